//! Mapping losses: photometric L1, depth-geometric L1, depth smoothness, and
//! the isotropic scale regularizer, combined with fixed weights.
//!
//! All image losses are means so the weights are resolution-independent; the
//! isotropic term is normalized by Gaussian count for the same reason.
//!
//! The geometric term compares the literal composited depth against the
//! aligned prior, which keeps pressure on accumulated opacity to saturate.
//! The smoothness term reads the rendered depth over a far-plane backdrop,
//! `D + (1−A)·d_far`: where opacity saturates this is exactly the rendered
//! depth, and where nothing renders it falls to the backdrop. On the raw
//! partial-sum depth the term would reward making the scene transparent (a
//! flat zero depth map is perfectly smooth), a degenerate direction the
//! printed weights cannot contain.

use nalgebra::{Vector3, Vector6};

use crate::color_image::ColorImage;
use crate::depth_prior::DepthMap;
use crate::error::{Error, Result};
use crate::gaussian_map::GaussianMap;
use crate::geom::{Intrinsics, Pose};
use crate::rasterizer::{render, render_backward, MapGradients, RasterSettings, RenderOutput};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_p: f64,
    pub lambda_g: f64,
    pub lambda_s: f64,
    pub lambda_i: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_p: 0.99,
            lambda_g: 0.01,
            lambda_s: 1.0,
            lambda_i: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub pho: f64,
    pub geo: f64,
    pub smooth: f64,
    pub iso: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn combine(pho: f64, geo: f64, smooth: f64, iso: f64, w: &LossWeights) -> Self {
        LossBreakdown {
            pho,
            geo,
            smooth,
            iso,
            total: w.lambda_p * pho + w.lambda_g * geo + w.lambda_s * smooth + w.lambda_i * iso,
        }
    }
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Mean absolute difference over all pixels and channels.
pub fn photometric_l1(rendered: &ColorImage, gt: &ColorImage) -> Result<f64> {
    if !rendered.same_size(gt) {
        return Err(Error::DimensionMismatch(format!(
            "photometric: {}x{} vs {}x{}",
            rendered.width, rendered.height, gt.width, gt.height
        )));
    }
    let n = rendered.as_slice().len();
    let sum: f64 = rendered
        .as_slice()
        .iter()
        .zip(gt.as_slice())
        .map(|(a, b)| (a - b).abs())
        .sum();
    Ok(sum / n as f64)
}

/// Mean absolute depth difference over jointly valid pixels. Returns the
/// value and a degenerate flag that is set when no pixel is jointly valid
/// (the value is then defined as 0).
pub fn depth_geometric_l1(rendered: &DepthMap, prior: &DepthMap) -> Result<(f64, bool)> {
    if rendered.width != prior.width || rendered.height != prior.height {
        return Err(Error::DimensionMismatch(format!(
            "depth geometric: {}x{} vs {}x{}",
            rendered.width, rendered.height, prior.width, prior.height
        )));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..rendered.values().len() {
        if rendered.valid_mask()[i] && prior.valid_mask()[i] {
            sum += (rendered.values()[i] - prior.values()[i]).abs();
            count += 1;
        }
    }
    if count == 0 {
        Ok((0.0, true))
    } else {
        Ok((sum / count as f64, false))
    }
}

/// Count of pixels carrying the L-shaped smoothness stencil (left and lower
/// neighbors in range and valid).
fn smooth_stencil_count(depth: &DepthMap) -> usize {
    let mut count = 0;
    for y in 0..depth.height.saturating_sub(1) {
        for x in 1..depth.width {
            if depth.is_valid(x, y) && depth.is_valid(x - 1, y) && depth.is_valid(x, y + 1) {
                count += 1;
            }
        }
    }
    count
}

/// Depth smoothness: mean over stencil pixels of
/// `|d(i,j−1) − d(i,j)| + |d(i+1,j) − d(i,j)|`.
pub fn depth_smooth(depth: &DepthMap) -> f64 {
    let count = smooth_stencil_count(depth);
    if count == 0 {
        return 0.0;
    }
    let mut sum = 0.0;
    for y in 0..depth.height - 1 {
        for x in 1..depth.width {
            if depth.is_valid(x, y) && depth.is_valid(x - 1, y) && depth.is_valid(x, y + 1) {
                let d = depth.get(x, y);
                sum += (depth.get(x - 1, y) - d).abs() + (depth.get(x, y + 1) - d).abs();
            }
        }
    }
    sum / count as f64
}

/// Gradient of [`depth_smooth`] with respect to every depth pixel, row-major.
pub fn depth_smooth_grad(depth: &DepthMap) -> Vec<f64> {
    let mut grad = vec![0.0; depth.width * depth.height];
    let count = smooth_stencil_count(depth);
    if count == 0 {
        return grad;
    }
    let scale = 1.0 / count as f64;
    for y in 0..depth.height - 1 {
        for x in 1..depth.width {
            if depth.is_valid(x, y) && depth.is_valid(x - 1, y) && depth.is_valid(x, y + 1) {
                let d = depth.get(x, y);
                let s_left = sign(depth.get(x - 1, y) - d);
                let s_down = sign(depth.get(x, y + 1) - d);
                grad[y * depth.width + (x - 1)] += scale * s_left;
                grad[(y + 1) * depth.width + x] += scale * s_down;
                grad[y * depth.width + x] -= scale * (s_left + s_down);
            }
        }
    }
    grad
}

/// Isotropic regularizer: `Σ_i ‖s_i − mean(s_i)·1‖₁ / |map|` on exp scales.
pub fn isotropic_loss(map: &GaussianMap) -> f64 {
    if map.is_empty() {
        return 0.0;
    }
    let sum: f64 = map
        .gaussians
        .iter()
        .map(|g| {
            let s = g.scales();
            let mean = (s.x + s.y + s.z) / 3.0;
            (s.x - mean).abs() + (s.y - mean).abs() + (s.z - mean).abs()
        })
        .sum();
    sum / map.len() as f64
}

/// Gradient of [`isotropic_loss`] with respect to each log-scale vector.
pub fn isotropic_loss_grad(map: &GaussianMap) -> Vec<Vector3<f64>> {
    if map.is_empty() {
        return Vec::new();
    }
    let norm = 1.0 / map.len() as f64;
    map.gaussians
        .iter()
        .map(|g| {
            let s = g.scales();
            let mean = (s.x + s.y + s.z) / 3.0;
            let signs = Vector3::new(sign(s.x - mean), sign(s.y - mean), sign(s.z - mean));
            let sign_sum = signs.x + signs.y + signs.z;
            // d/ds_k Σ_j |s_j − mean| = sign_k − sign_sum / 3; chain through
            // s_k = exp(log_scale_k).
            Vector3::from_fn(|k, _| norm * (signs[k] - sign_sum / 3.0) * s[k])
        })
        .collect()
}

/// Rendered depth over a far-plane backdrop: `D + (1−A)·d_far`. Defined and
/// smooth at every pixel; equals the rendered depth wherever opacity
/// saturates.
pub fn backdrop_depth(out: &RenderOutput, d_far: f64) -> DepthMap {
    let values: Vec<f64> = out
        .depth
        .iter()
        .zip(&out.alpha)
        .map(|(d, a)| d + (1.0 - a) * d_far)
        .collect();
    DepthMap::all_valid(out.width, out.height, values).expect("render buffers are consistent")
}

/// Backdrop distance for the smoothness term: past the supervised geometry.
fn smooth_backdrop(prior: &DepthMap) -> f64 {
    let (mu, _) = prior.stats();
    if mu > 0.0 {
        2.0 * mu
    } else {
        4.0
    }
}

/// Full mapping evaluation at one viewpoint: loss breakdown, gradients for
/// every map parameter and the pose tangent, and the retained render.
pub struct MappingEval {
    pub breakdown: LossBreakdown,
    pub grads: MapGradients,
    pub render: RenderOutput,
}

/// Renders the map at `pose` and evaluates the combined mapping objective
/// against the ground-truth image and the aligned prior depth. The geometric
/// term masks by prior validity; rendered depth participates everywhere.
pub fn mapping_loss(
    map: &GaussianMap,
    pose: &Pose,
    k: &Intrinsics,
    gt_image: &ColorImage,
    prior_depth: &DepthMap,
    weights: &LossWeights,
    background: Vector3<f64>,
    settings: &RasterSettings,
) -> Result<MappingEval> {
    if gt_image.width != k.width || gt_image.height != k.height {
        return Err(Error::DimensionMismatch(
            "ground-truth image does not match intrinsics".into(),
        ));
    }
    if prior_depth.width != k.width || prior_depth.height != k.height {
        return Err(Error::DimensionMismatch(
            "prior depth does not match intrinsics".into(),
        ));
    }

    let out = render(map, pose, k, background, settings);
    let rendered_depth = DepthMap::all_valid(out.width, out.height, out.depth.clone())?;
    let d_far = smooth_backdrop(prior_depth);
    let smooth_input = backdrop_depth(&out, d_far);

    let pho = photometric_l1(&out.color, gt_image)?;
    let (geo, _degenerate) = depth_geometric_l1(&rendered_depth, prior_depth)?;
    let smooth = depth_smooth(&smooth_input);
    let iso = isotropic_loss(map);
    let breakdown = LossBreakdown::combine(pho, geo, smooth, iso, weights);

    // Upstream gradients for the rendered images.
    let n_color = out.color.as_slice().len() as f64;
    let grad_color: Vec<f64> = out
        .color
        .as_slice()
        .iter()
        .zip(gt_image.as_slice())
        .map(|(c, g)| weights.lambda_p * sign(c - g) / n_color)
        .collect();

    let geo_count = prior_depth
        .valid_mask()
        .iter()
        .filter(|&&v| v)
        .count()
        .max(1) as f64;
    let smooth_grad = depth_smooth_grad(&smooth_input);
    let mut grad_depth = vec![0.0; out.width * out.height];
    let mut grad_alpha = vec![0.0; out.width * out.height];
    for i in 0..grad_depth.len() {
        if prior_depth.valid_mask()[i] {
            grad_depth[i] += weights.lambda_g
                * sign(rendered_depth.values()[i] - prior_depth.values()[i])
                / geo_count;
        }
        // Backdrop chain: d(D + (1-A)·d_far)/dD = 1, d(...)/dA = -d_far.
        grad_depth[i] += weights.lambda_s * smooth_grad[i];
        grad_alpha[i] -= weights.lambda_s * smooth_grad[i] * d_far;
    }

    let mut grads = render_backward(&out, map, &grad_color, &grad_depth, &grad_alpha);
    for (g, iso_g) in grads.log_scale.iter_mut().zip(isotropic_loss_grad(map)) {
        *g += weights.lambda_i * iso_g;
    }

    Ok(MappingEval {
        breakdown,
        grads,
        render: out,
    })
}

/// Evaluate the total mapping loss only (no gradients); used by finite
/// difference checks and step-acceptance logic.
#[allow(clippy::too_many_arguments)]
pub fn mapping_loss_value(
    map: &GaussianMap,
    pose: &Pose,
    k: &Intrinsics,
    gt_image: &ColorImage,
    prior_depth: &DepthMap,
    weights: &LossWeights,
    background: Vector3<f64>,
    settings: &RasterSettings,
) -> Result<LossBreakdown> {
    let out = render(map, pose, k, background, settings);
    let rendered_depth = DepthMap::all_valid(out.width, out.height, out.depth.clone())?;
    let pho = photometric_l1(&out.color, gt_image)?;
    let (geo, _) = depth_geometric_l1(&rendered_depth, prior_depth)?;
    let smooth = depth_smooth(&backdrop_depth(&out, smooth_backdrop(prior_depth)));
    let iso = isotropic_loss(map);
    Ok(LossBreakdown::combine(pho, geo, smooth, iso, weights))
}

/// Pose-tangent gradient alias, matching the rasterizer convention.
pub type PoseTangentGrad = Vector6<f64>;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian_map::Gaussian;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> ColorImage {
        let data: Vec<f64> = (0..w * h * 3).map(|_| rng.gen_range(0.0..1.0)).collect();
        ColorImage::from_data(w, h, data).unwrap()
    }

    #[test]
    fn photometric_identity_and_offset() {
        let a = ColorImage::filled(8, 8, [0.5, 0.5, 0.5]);
        assert_eq!(photometric_l1(&a, &a).unwrap(), 0.0);
        let b = ColorImage::filled(8, 8, [0.7, 0.7, 0.7]);
        assert_relative_eq!(photometric_l1(&b, &a).unwrap(), 0.2, epsilon = 1e-12);
    }

    #[test]
    fn photometric_matches_elementwise_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let a = random_image(&mut rng, 13, 9);
        let b = random_image(&mut rng, 13, 9);
        let direct: f64 = a
            .as_slice()
            .iter()
            .zip(b.as_slice())
            .map(|(x, y)| (x - y).abs())
            .sum::<f64>()
            / (13.0 * 9.0 * 3.0);
        assert_relative_eq!(photometric_l1(&a, &b).unwrap(), direct, epsilon = 1e-12);
    }

    #[test]
    fn photometric_rejects_size_mismatch() {
        let a = ColorImage::new(8, 8);
        let b = ColorImage::new(8, 9);
        assert!(photometric_l1(&a, &b).is_err());
    }

    #[test]
    fn depth_geo_identity_offset_and_mask() {
        let base = DepthMap::constant(10, 10, 2.0);
        let (v, warn) = depth_geometric_l1(&base, &base).unwrap();
        assert_eq!((v, warn), (0.0, false));

        let shifted = base.affine(1.0, 0.1);
        let (v, _) = depth_geometric_l1(&shifted, &base).unwrap();
        assert_relative_eq!(v, 0.1, epsilon = 1e-12);

        // Half the prior invalid: masked mean over the valid half.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let values: Vec<f64> = (0..100).map(|_| rng.gen_range(1.0..3.0)).collect();
        let rendered = DepthMap::all_valid(10, 10, values.clone()).unwrap();
        let prior = DepthMap::new(
            10,
            10,
            vec![2.0; 100],
            (0..100).map(|i| i % 2 == 0).collect(),
        )
        .unwrap();
        let oracle: f64 = values
            .iter()
            .enumerate()
            .filter(|(i, _)| i % 2 == 0)
            .map(|(_, v)| (v - 2.0).abs())
            .sum::<f64>()
            / 50.0;
        let (v, warn) = depth_geometric_l1(&rendered, &prior).unwrap();
        assert!(!warn);
        assert_relative_eq!(v, oracle, epsilon = 1e-12);
    }

    #[test]
    fn depth_geo_degenerate_mask_flags_warning() {
        let rendered = DepthMap::constant(4, 4, 1.0);
        let prior = DepthMap::new(4, 4, vec![1.0; 16], vec![false; 16]).unwrap();
        let (v, warn) = depth_geometric_l1(&rendered, &prior).unwrap();
        assert_eq!(v, 0.0);
        assert!(warn);
    }

    #[test]
    fn smooth_flat_is_zero_and_ramp_is_one() {
        let flat = DepthMap::constant(8, 6, 1.5);
        assert_eq!(depth_smooth(&flat), 0.0);

        let ramp_values: Vec<f64> = (0..6)
            .flat_map(|_| (0..8).map(|x| x as f64))
            .collect();
        let ramp = DepthMap::all_valid(8, 6, ramp_values).unwrap();
        assert_relative_eq!(depth_smooth(&ramp), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn smooth_invariant_to_global_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let values: Vec<f64> = (0..64).map(|_| rng.gen_range(1.0..2.0)).collect();
        let a = DepthMap::all_valid(8, 8, values).unwrap();
        let b = a.affine(1.0, 7.3);
        assert_relative_eq!(depth_smooth(&a), depth_smooth(&b), epsilon = 1e-12);
    }

    #[test]
    fn smooth_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        for _ in 0..5 {
            let values: Vec<f64> = (0..64).map(|_| rng.gen_range(1.0..2.0)).collect();
            let map = DepthMap::all_valid(8, 8, values.clone()).unwrap();
            let grad = depth_smooth_grad(&map);
            let h = 1e-6;
            for i in 0..64 {
                let mut vp = values.clone();
                vp[i] += h;
                let mut vm = values.clone();
                vm[i] -= h;
                let fd = (depth_smooth(&DepthMap::all_valid(8, 8, vp).unwrap())
                    - depth_smooth(&DepthMap::all_valid(8, 8, vm).unwrap()))
                    / (2.0 * h);
                if grad[i].abs() < 1e-8 && fd.abs() < 1e-8 {
                    continue; // both zero up to FD roundoff
                }
                let denom = grad[i].abs().max(fd.abs());
                assert!(
                    (grad[i] - fd).abs() / denom < 1e-6,
                    "pixel {i}: analytic {} vs fd {fd}",
                    grad[i]
                );
            }
        }
    }

    #[test]
    fn isotropic_zero_for_isotropic_and_two_for_123() {
        let mut map = GaussianMap::new();
        map.push(Gaussian::isotropic(
            Vector3::zeros(),
            0.7,
            0.9,
            Vector3::zeros(),
        ));
        assert_relative_eq!(isotropic_loss(&map), 0.0, epsilon = 1e-12);

        let mut map = GaussianMap::new();
        map.push(Gaussian {
            mu_w: Vector3::zeros(),
            rot: nalgebra::UnitQuaternion::identity(),
            log_scale: Vector3::new(1.0f64.ln(), 2.0f64.ln(), 3.0f64.ln()),
            opacity_logit: 0.0,
            color: Vector3::zeros(),
        });
        assert_relative_eq!(isotropic_loss(&map), 2.0, epsilon = 1e-12);

        assert_eq!(isotropic_loss(&GaussianMap::new()), 0.0);
    }

    #[test]
    fn isotropic_grad_matches_finite_differences() {
        let mut map = GaussianMap::new();
        map.push(Gaussian {
            mu_w: Vector3::zeros(),
            rot: nalgebra::UnitQuaternion::identity(),
            log_scale: Vector3::new(-1.0, -0.4, 0.3),
            opacity_logit: 0.0,
            color: Vector3::zeros(),
        });
        map.push(Gaussian {
            mu_w: Vector3::zeros(),
            rot: nalgebra::UnitQuaternion::identity(),
            log_scale: Vector3::new(0.2, -0.9, -0.1),
            opacity_logit: 0.0,
            color: Vector3::zeros(),
        });
        let grads = isotropic_loss_grad(&map);
        let h = 1e-7;
        for gi in 0..2 {
            for axis in 0..3 {
                let mut mp = map.clone();
                mp.gaussians[gi].log_scale[axis] += h;
                let mut mm = map.clone();
                mm.gaussians[gi].log_scale[axis] -= h;
                let fd = (isotropic_loss(&mp) - isotropic_loss(&mm)) / (2.0 * h);
                assert_relative_eq!(grads[gi][axis], fd, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn mapping_loss_vanishes_on_perfect_flat_scene() {
        // Empty map: render is pure background; ground truth equal to the
        // background, prior fully invalid, flat zero depth.
        let k = Intrinsics::new(50.0, 50.0, 8.0, 8.0, 16, 16).unwrap();
        let map = GaussianMap::new();
        let bg = Vector3::new(0.4, 0.5, 0.6);
        let gt = ColorImage::filled(16, 16, [0.4, 0.5, 0.6]);
        let prior = DepthMap::new(16, 16, vec![1.0; 256], vec![false; 256]).unwrap();
        let eval = mapping_loss(
            &map,
            &Pose::identity(),
            &k,
            &gt,
            &prior,
            &LossWeights::default(),
            bg,
            &RasterSettings::default(),
        )
        .unwrap();
        assert_eq!(eval.breakdown.total, 0.0);
    }

    #[test]
    fn default_weights_match_contract() {
        let w = LossWeights::default();
        assert_eq!((w.lambda_p, w.lambda_g, w.lambda_s, w.lambda_i), (0.99, 0.01, 1.0, 1.0));
    }

    #[test]
    fn total_is_weighted_recombination() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let k = Intrinsics::new(40.0, 40.0, 12.0, 10.0, 24, 20).unwrap();
        let (map, pose) = crate::rasterizer::tests::random_scene(&mut rng, 6, &k);
        let gt = random_image(&mut rng, 24, 20);
        let prior_values: Vec<f64> = (0..24 * 20).map(|_| rng.gen_range(1.0..3.0)).collect();
        let prior = DepthMap::all_valid(24, 20, prior_values).unwrap();
        let weights = LossWeights::default();
        let bg = Vector3::new(0.2, 0.2, 0.2);
        let settings = RasterSettings::default();

        let eval = mapping_loss(&map, &pose, &k, &gt, &prior, &weights, bg, &settings).unwrap();

        // Recombine from independently computed terms.
        let out = render(&map, &pose, &k, bg, &settings);
        let rendered_depth = DepthMap::all_valid(out.width, out.height, out.depth.clone()).unwrap();
        let pho = photometric_l1(&out.color, &gt).unwrap();
        let (geo, _) = depth_geometric_l1(&rendered_depth, &prior).unwrap();
        let smooth = depth_smooth(&backdrop_depth(&out, 2.0 * prior.stats().0));
        let iso = isotropic_loss(&map);
        let expected = weights.lambda_p * pho
            + weights.lambda_g * geo
            + weights.lambda_s * smooth
            + weights.lambda_i * iso;
        assert_relative_eq!(eval.breakdown.total, expected, epsilon = 1e-12);
        assert_relative_eq!(
            eval.breakdown.total,
            weights.lambda_p * eval.breakdown.pho
                + weights.lambda_g * eval.breakdown.geo
                + weights.lambda_s * eval.breakdown.smooth
                + weights.lambda_i * eval.breakdown.iso,
            epsilon = 1e-12
        );
    }

    #[test]
    fn mapping_gradients_match_finite_differences_spot_check() {
        // Small scene, a handful of parameters; the acceptance suite runs the
        // exhaustive version over every class and 20 scenes.
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let k = Intrinsics::new(30.0, 30.0, 8.0, 8.0, 16, 16).unwrap();
        let (map, pose) = crate::rasterizer::tests::random_scene(&mut rng, 3, &k);
        let gt = random_image(&mut rng, 16, 16);
        let prior_values: Vec<f64> = (0..256).map(|_| rng.gen_range(1.0..3.0)).collect();
        let prior = DepthMap::all_valid(16, 16, prior_values).unwrap();
        let weights = LossWeights::default();
        let bg = Vector3::new(0.3, 0.3, 0.3);
        let settings = RasterSettings::exact();

        let eval = mapping_loss(&map, &pose, &k, &gt, &prior, &weights, bg, &settings).unwrap();
        let h = 1e-4;
        let value = |m: &GaussianMap, p: &Pose| {
            mapping_loss_value(m, p, &k, &gt, &prior, &weights, bg, &settings)
                .unwrap()
                .total
        };

        for gi in 0..map.len() {
            for axis in 0..3 {
                let mut mp = map.clone();
                mp.gaussians[gi].mu_w[axis] += h;
                let mut mm = map.clone();
                mm.gaussians[gi].mu_w[axis] -= h;
                let fd = (value(&mp, &pose) - value(&mm, &pose)) / (2.0 * h);
                let a = eval.grads.mu_w[gi][axis];
                let denom = a.abs().max(fd.abs()).max(1e-6);
                assert!((a - fd).abs() / denom < 1e-3, "mu {gi}/{axis}: {a} vs {fd}");
            }
        }
        for comp in 0..6 {
            let mut xi = Vector6::zeros();
            xi[comp] = h;
            let pp = pose.left_update(&xi);
            xi[comp] = -h;
            let pm = pose.left_update(&xi);
            let fd = (value(&map, &pp) - value(&map, &pm)) / (2.0 * h);
            let a = eval.grads.pose[comp];
            let denom = a.abs().max(fd.abs()).max(1e-6);
            assert!((a - fd).abs() / denom < 1e-3, "pose {comp}: {a} vs {fd}");
        }
    }
}
