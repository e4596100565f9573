//! Trajectory and image-quality metrics.
//!
//! Absolute trajectory error associates poses by nearest timestamp, optionally
//! aligns with the closed-form similarity (Umeyama) — with scale for
//! monocular runs — and reports the RMSE of translational residuals in
//! centimeters. Image quality reports PSNR, SSIM (11x11 Gaussian window,
//! standard constants), and depth L1 in centimeters, plus a depth-based
//! completion-ratio proxy.

use nalgebra::{Matrix3, Rotation3, Vector3};

use crate::depth_prior::DepthMap;
use crate::error::{Error, Result};
use crate::geom::Pose;

/// Maximum timestamp distance for pose association, seconds.
pub const ASSOCIATION_WINDOW_S: f64 = 0.02;

/// A timed pose sequence. Poses follow the trajectory-file convention:
/// camera-to-world, so the translation is the camera position.
#[derive(Clone, Debug, Default)]
pub struct Trajectory {
    pub timestamps: Vec<f64>,
    pub poses: Vec<Pose>,
}

impl Trajectory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, timestamp: f64, pose: Pose) -> Result<()> {
        if let Some(&last) = self.timestamps.last() {
            if timestamp <= last {
                return Err(Error::InvalidArgument(format!(
                    "timestamps must increase strictly: {last} then {timestamp}"
                )));
            }
        }
        self.timestamps.push(timestamp);
        self.poses.push(pose);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn positions(&self) -> Vec<Vector3<f64>> {
        self.poses.iter().map(|p| p.translation).collect()
    }

    /// Index of the timestamp nearest to `t`, if any.
    fn nearest(&self, t: f64) -> Option<usize> {
        if self.timestamps.is_empty() {
            return None;
        }
        let idx = self.timestamps.partition_point(|&x| x < t);
        let mut best = None;
        for cand in [idx.wrapping_sub(1), idx] {
            if cand < self.timestamps.len() {
                let d = (self.timestamps[cand] - t).abs();
                match best {
                    None => best = Some((cand, d)),
                    Some((_, bd)) if d < bd => best = Some((cand, d)),
                    _ => {}
                }
            }
        }
        best.map(|(i, _)| i)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AlignMode {
    /// No alignment; raw positional residuals.
    None,
    /// Rigid alignment (rotation + translation).
    Se3,
    /// Similarity alignment (rotation + translation + scale).
    Sim3,
}

/// Closed-form similarity fit `y ≈ s·R·x + t` (Umeyama).
pub fn umeyama_alignment(
    from: &[Vector3<f64>],
    to: &[Vector3<f64>],
    with_scale: bool,
) -> Result<(f64, Matrix3<f64>, Vector3<f64>)> {
    if from.len() != to.len() || from.len() < 3 {
        return Err(Error::TooFewAssociations {
            need: 3,
            got: from.len().min(to.len()),
        });
    }
    let n = from.len() as f64;
    let mean_from: Vector3<f64> = from.iter().sum::<Vector3<f64>>() / n;
    let mean_to: Vector3<f64> = to.iter().sum::<Vector3<f64>>() / n;

    let mut cov = Matrix3::<f64>::zeros();
    let mut var_from = 0.0;
    for (x, y) in from.iter().zip(to) {
        let xc = x - mean_from;
        let yc = y - mean_to;
        cov += yc * xc.transpose();
        var_from += xc.norm_squared();
    }
    cov /= n;
    var_from /= n;

    let svd = cov.svd(true, true);
    let u = svd.u.ok_or_else(|| Error::InvalidArgument("svd failed".into()))?;
    let v_t = svd
        .v_t
        .ok_or_else(|| Error::InvalidArgument("svd failed".into()))?;
    let mut s = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let r = u * s * v_t;
    let scale = if with_scale {
        let trace_ds = svd.singular_values[0] * s[(0, 0)]
            + svd.singular_values[1] * s[(1, 1)]
            + svd.singular_values[2] * s[(2, 2)];
        if var_from < 1e-15 {
            1.0
        } else {
            trace_ds / var_from
        }
    } else {
        1.0
    };
    let t = mean_to - scale * (r * mean_from);
    Ok((scale, r, t))
}

/// RMSE of translational residuals after association and optional alignment,
/// in centimeters.
pub fn ate_rmse(estimated: &Trajectory, reference: &Trajectory, align: AlignMode) -> Result<f64> {
    let mut est_pts = Vec::new();
    let mut ref_pts = Vec::new();
    for (i, &t) in estimated.timestamps.iter().enumerate() {
        if let Some(j) = reference.nearest(t) {
            if (reference.timestamps[j] - t).abs() <= ASSOCIATION_WINDOW_S {
                est_pts.push(estimated.poses[i].translation);
                ref_pts.push(reference.poses[j].translation);
            }
        }
    }
    if est_pts.len() < 3 {
        return Err(Error::TooFewAssociations {
            need: 3,
            got: est_pts.len(),
        });
    }

    let (scale, r, t) = match align {
        AlignMode::None => (1.0, Matrix3::identity(), Vector3::zeros()),
        AlignMode::Se3 => umeyama_alignment(&est_pts, &ref_pts, false)?,
        AlignMode::Sim3 => umeyama_alignment(&est_pts, &ref_pts, true)?,
    };

    let mut sq = 0.0;
    for (x, y) in est_pts.iter().zip(&ref_pts) {
        let aligned = scale * (r * x) + t;
        sq += (aligned - y).norm_squared();
    }
    let rmse_m = (sq / est_pts.len() as f64).sqrt();
    Ok(rmse_m * 100.0)
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ImageMetrics {
    pub psnr_db: f64,
    pub ssim: f64,
    pub depth_l1_cm: Option<f64>,
}

/// PSNR over all pixels and channels; capped at 100 dB when the MSE falls
/// below 1e-10.
pub fn psnr(rendered: &crate::color_image::ColorImage, gt: &crate::color_image::ColorImage) -> Result<f64> {
    if !rendered.same_size(gt) {
        return Err(Error::DimensionMismatch("psnr image sizes".into()));
    }
    let n = rendered.as_slice().len() as f64;
    let mse: f64 = rendered
        .as_slice()
        .iter()
        .zip(gt.as_slice())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n;
    Ok(if mse < 1e-10 {
        100.0
    } else {
        10.0 * (1.0 / mse).log10()
    })
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Mean SSIM with an 11x11 Gaussian window over valid window positions,
/// averaged across channels.
pub fn ssim(a: &crate::color_image::ColorImage, b: &crate::color_image::ColorImage) -> Result<f64> {
    if !a.same_size(b) {
        return Err(Error::DimensionMismatch("ssim image sizes".into()));
    }
    let (w, h) = (a.width, a.height);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::DimensionMismatch(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} images, got {w}x{h}"
        )));
    }
    let kernel = gaussian_kernel();
    let half = SSIM_WINDOW / 2;

    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..3 {
        let plane = |img: &crate::color_image::ColorImage, x: usize, y: usize| {
            img.as_slice()[(y * w + x) * 3 + ch]
        };
        // Separable Gaussian filtering of the five statistics maps.
        let mut mu_a = vec![0.0; w * h];
        let mut mu_b = vec![0.0; w * h];
        let mut aa = vec![0.0; w * h];
        let mut bb = vec![0.0; w * h];
        let mut ab = vec![0.0; w * h];
        // Horizontal pass into scratch, vertical pass into the outputs.
        let mut scratch = vec![[0.0f64; 5]; w * h];
        for y in 0..h {
            for x in half..w - half {
                let mut acc = [0.0f64; 5];
                for (ki, kv) in kernel.iter().enumerate() {
                    let sx = x + ki - half;
                    let va = plane(a, sx, y);
                    let vb = plane(b, sx, y);
                    acc[0] += kv * va;
                    acc[1] += kv * vb;
                    acc[2] += kv * va * va;
                    acc[3] += kv * vb * vb;
                    acc[4] += kv * va * vb;
                }
                scratch[y * w + x] = acc;
            }
        }
        for y in half..h - half {
            for x in half..w - half {
                let mut acc = [0.0f64; 5];
                for (ki, kv) in kernel.iter().enumerate() {
                    let sy = y + ki - half;
                    let s = &scratch[sy * w + x];
                    for c in 0..5 {
                        acc[c] += kv * s[c];
                    }
                }
                mu_a[y * w + x] = acc[0];
                mu_b[y * w + x] = acc[1];
                aa[y * w + x] = acc[2];
                bb[y * w + x] = acc[3];
                ab[y * w + x] = acc[4];
            }
        }
        for y in half..h - half {
            for x in half..w - half {
                let i = y * w + x;
                let (ma, mb) = (mu_a[i], mu_b[i]);
                let va = aa[i] - ma * ma;
                let vb = bb[i] - mb * mb;
                let cab = ab[i] - ma * mb;
                let val = ((2.0 * ma * mb + SSIM_C1) * (2.0 * cab + SSIM_C2))
                    / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
                total += val;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Mean absolute depth difference over jointly valid pixels, centimeters.
pub fn depth_l1_cm(rendered: &DepthMap, gt: &DepthMap) -> Result<f64> {
    let (value_m, _) = crate::losses::depth_geometric_l1(rendered, gt)?;
    Ok(value_m * 100.0)
}

/// Fraction of jointly valid pixels whose rendered depth lies within
/// `threshold_m` of ground truth. A depth-based stand-in for mesh
/// completion-ratio metrics.
pub fn completion_ratio(rendered: &DepthMap, gt: &DepthMap, threshold_m: f64) -> Result<f64> {
    if rendered.width != gt.width || rendered.height != gt.height {
        return Err(Error::DimensionMismatch("completion ratio sizes".into()));
    }
    let mut hit = 0usize;
    let mut count = 0usize;
    for i in 0..rendered.values().len() {
        if rendered.valid_mask()[i] && gt.valid_mask()[i] {
            count += 1;
            if (rendered.values()[i] - gt.values()[i]).abs() < threshold_m {
                hit += 1;
            }
        }
    }
    Ok(if count == 0 {
        0.0
    } else {
        hit as f64 / count as f64
    })
}

/// PSNR, SSIM, and optional depth L1 for one frame.
pub fn image_metrics(
    rendered: &crate::color_image::ColorImage,
    gt: &crate::color_image::ColorImage,
    depths: Option<(&DepthMap, &DepthMap)>,
) -> Result<ImageMetrics> {
    Ok(ImageMetrics {
        psnr_db: psnr(rendered, gt)?,
        ssim: ssim(rendered, gt)?,
        depth_l1_cm: match depths {
            Some((r, g)) => Some(depth_l1_cm(r, g)?),
            None => None,
        },
    })
}

/// Convert a rotation matrix into a pose rotation (helper for alignment
/// consumers that need to re-apply the fitted similarity).
pub fn rotation_to_pose(r: &Matrix3<f64>) -> Pose {
    Pose::new(
        nalgebra::UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*r)),
        Vector3::zeros(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::color_image::ColorImage;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_trajectory(rng: &mut ChaCha8Rng, n: usize) -> Trajectory {
        let mut t = Trajectory::new();
        for i in 0..n {
            let xi = nalgebra::Vector6::from_fn(|c, _| {
                if c < 3 {
                    rng.gen_range(-1.0..1.0)
                } else {
                    rng.gen_range(-0.5..0.5)
                }
            });
            t.push(i as f64 / 30.0, crate::geom::se3_exp(&xi)).unwrap();
        }
        t
    }

    #[test]
    fn ate_identity_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = random_trajectory(&mut rng, 40);
        assert_relative_eq!(ate_rmse(&t, &t, AlignMode::None).unwrap(), 0.0, epsilon = 1e-12);
        assert!(ate_rmse(&t, &t, AlignMode::Sim3).unwrap() < 1e-9);
    }

    #[test]
    fn ate_uniform_offset_without_alignment() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let reference = random_trajectory(&mut rng, 40);
        let mut shifted = reference.clone();
        for p in &mut shifted.poses {
            p.translation += Vector3::new(0.01, 0.0, 0.0); // 1 cm
        }
        let ate = ate_rmse(&shifted, &reference, AlignMode::None).unwrap();
        assert_relative_eq!(ate, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn ate_recovers_global_scale_with_sim3() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let reference = random_trajectory(&mut rng, 50);
        let mut scaled = reference.clone();
        for p in &mut scaled.poses {
            p.translation *= 2.0;
        }
        let ate = ate_rmse(&scaled, &reference, AlignMode::Sim3).unwrap();
        assert!(ate < 1e-9, "ate = {ate}");
        // SE(3) alignment cannot absorb the scale.
        let ate_rigid = ate_rmse(&scaled, &reference, AlignMode::Se3).unwrap();
        assert!(ate_rigid > 1.0);
    }

    #[test]
    fn ate_invariant_under_common_rigid_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_trajectory(&mut rng, 30);
        let mut b = a.clone();
        // Perturb b slightly so the error is nonzero.
        for p in &mut b.poses {
            p.translation += Vector3::new(
                rng.gen_range(-0.01..0.01),
                rng.gen_range(-0.01..0.01),
                rng.gen_range(-0.01..0.01),
            );
        }
        let base = ate_rmse(&b, &a, AlignMode::Se3).unwrap();

        let x = crate::geom::se3_exp(&nalgebra::Vector6::new(0.4, -0.2, 0.1, 0.3, 0.2, -0.1));
        let apply = |t: &Trajectory| {
            let mut out = t.clone();
            for p in &mut out.poses {
                *p = x.compose(p);
            }
            out
        };
        let moved = ate_rmse(&apply(&b), &apply(&a), AlignMode::Se3).unwrap();
        assert_relative_eq!(base, moved, epsilon = 1e-9);
    }

    #[test]
    fn ate_needs_enough_associations() {
        let mut a = Trajectory::new();
        let mut b = Trajectory::new();
        for i in 0..2 {
            a.push(i as f64, Pose::identity()).unwrap();
            b.push(i as f64, Pose::identity()).unwrap();
        }
        assert!(matches!(
            ate_rmse(&a, &b, AlignMode::None),
            Err(Error::TooFewAssociations { .. })
        ));
    }

    #[test]
    fn association_respects_window() {
        let mut a = Trajectory::new();
        let mut b = Trajectory::new();
        for i in 0..10 {
            a.push(i as f64, Pose::identity()).unwrap();
            // Reference offset beyond the 20 ms window.
            b.push(i as f64 + 0.5, Pose::identity()).unwrap();
        }
        assert!(ate_rmse(&a, &b, AlignMode::None).is_err());
    }

    #[test]
    fn psnr_identity_and_uniform_error() {
        let a = ColorImage::filled(16, 16, [0.5, 0.5, 0.5]);
        assert_eq!(psnr(&a, &a).unwrap(), 100.0);

        let b = ColorImage::filled(16, 16, [0.6, 0.6, 0.6]);
        // MSE = 0.01 -> PSNR = 20 dB.
        assert_relative_eq!(psnr(&b, &a).unwrap(), 20.0, epsilon = 1e-9);
    }

    #[test]
    fn ssim_identity_is_one_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data: Vec<f64> = (0..32 * 24 * 3).map(|_| rng.gen_range(0.0..1.0)).collect();
        let a = ColorImage::from_data(32, 24, data).unwrap();
        assert_relative_eq!(ssim(&a, &a).unwrap(), 1.0, epsilon = 1e-9);

        let b = ColorImage::filled(32, 24, [0.3, 0.3, 0.3]);
        let v = ssim(&a, &b).unwrap();
        assert!((-1.0..=1.0).contains(&v));
        assert!(v < 1.0);
    }

    #[test]
    fn depth_l1_constant_offset_in_cm() {
        let a = DepthMap::constant(8, 8, 2.00);
        let b = DepthMap::constant(8, 8, 2.02);
        assert_relative_eq!(depth_l1_cm(&b, &a).unwrap(), 2.0, epsilon = 1e-9);
    }

    #[test]
    fn completion_ratio_counts_near_pixels() {
        let gt = DepthMap::constant(4, 4, 1.0);
        let mut values = vec![1.0; 16];
        for v in values.iter_mut().take(4) {
            *v = 1.2; // 20 cm off
        }
        let rendered = DepthMap::all_valid(4, 4, values).unwrap();
        assert_relative_eq!(
            completion_ratio(&rendered, &gt, 0.05).unwrap(),
            12.0 / 16.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn metrics_are_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let data: Vec<f64> = (0..16 * 16 * 3).map(|_| rng.gen_range(0.0..1.0)).collect();
        let a = ColorImage::from_data(16, 16, data.clone()).unwrap();
        let b = ColorImage::filled(16, 16, [0.4, 0.2, 0.7]);
        let m1 = image_metrics(&a, &b, None).unwrap();
        let m2 = image_metrics(&a, &b, None).unwrap();
        assert_eq!(m1.psnr_db, m2.psnr_db);
        assert_eq!(m1.ssim, m2.ssim);
    }
}
