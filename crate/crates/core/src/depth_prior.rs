//! Dense depth maps, prior providers, and depth-quality metrics.
//!
//! Providers stand in for a multi-view depth estimation network: they produce
//! a prior depth map for the reference frame of a keyframe window. The
//! bundled providers derive from a scene oracle — noiseless but globally
//! mis-scaled, or log-normally perturbed with a per-run scale bias that
//! emulates the scale ambiguity of monocular estimation.
//!
//! The quality metrics score a predicted depth map against ground truth over
//! a 3-level pyramid: a scale-invariant log-depth term, a multi-view warped
//! log-depth term, and a normal-consistency term.

use std::io::Read;
use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geom::{Intrinsics, Pose};

/// Weight inside the scale-invariant depth metric.
pub const SI_LAMBDA: f64 = 0.85;
/// Combination weights (scale-invariant, multi-view, normal).
pub const METRIC_WEIGHTS: (f64, f64, f64) = (1.0, 0.2, 1.0);
/// Pyramid has levels `s = 0..=PYRAMID_TOP`.
pub const PYRAMID_TOP: usize = 2;

/// Dense per-pixel depth with validity mask and cached statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    values: Vec<f64>,
    valid: Vec<bool>,
    mu: f64,
    sigma: f64,
}

impl DepthMap {
    pub fn new(width: usize, height: usize, values: Vec<f64>, valid: Vec<bool>) -> Result<Self> {
        if values.len() != width * height || valid.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "depth map buffers: {}x{} vs {} values / {} flags",
                width,
                height,
                values.len(),
                valid.len()
            )));
        }
        let mut m = DepthMap {
            width,
            height,
            values,
            valid,
            mu: 0.0,
            sigma: 0.0,
        };
        m.recompute_stats();
        Ok(m)
    }

    pub fn all_valid(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        let n = values.len();
        Self::new(width, height, values, vec![true; n])
    }

    pub fn constant(width: usize, height: usize, value: f64) -> Self {
        Self::all_valid(width, height, vec![value; width * height]).unwrap()
    }

    fn recompute_stats(&mut self) {
        let mut sum = 0.0;
        let mut count = 0usize;
        for (v, &ok) in self.values.iter().zip(&self.valid) {
            if ok {
                sum += v;
                count += 1;
            }
        }
        if count == 0 {
            self.mu = 0.0;
            self.sigma = 0.0;
            return;
        }
        self.mu = sum / count as f64;
        let mut var = 0.0;
        for (v, &ok) in self.values.iter().zip(&self.valid) {
            if ok {
                var += (v - self.mu) * (v - self.mu);
            }
        }
        self.sigma = (var / count as f64).sqrt();
    }

    /// Mean and standard deviation over valid pixels.
    pub fn stats(&self) -> (f64, f64) {
        (self.mu, self.sigma)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    #[inline]
    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.valid[y * self.width + x]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn valid_mask(&self) -> &[bool] {
        &self.valid
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Value at the nearest pixel to (u, v); `None` outside or invalid.
    pub fn sample_nearest(&self, u: f64, v: f64) -> Option<f64> {
        let x = u.round();
        let y = v.round();
        if x < 0.0 || y < 0.0 || x >= self.width as f64 || y >= self.height as f64 {
            return None;
        }
        let (x, y) = (x as usize, y as usize);
        self.is_valid(x, y).then(|| self.get(x, y))
    }

    /// Bilinear sample; requires all four corners valid.
    pub fn sample_bilinear(&self, u: f64, v: f64) -> Option<f64> {
        if u < 0.0 || v < 0.0 {
            return None;
        }
        let x0 = u.floor() as usize;
        let y0 = v.floor() as usize;
        if x0 >= self.width || y0 >= self.height {
            return None;
        }
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        if !(self.is_valid(x0, y0)
            && self.is_valid(x1, y0)
            && self.is_valid(x0, y1)
            && self.is_valid(x1, y1))
        {
            return None;
        }
        let fx = u - x0 as f64;
        let fy = v - y0 as f64;
        let top = self.get(x0, y0) * (1.0 - fx) + self.get(x1, y0) * fx;
        let bot = self.get(x0, y1) * (1.0 - fx) + self.get(x1, y1) * fx;
        Some(top * (1.0 - fy) + bot * fy)
    }

    /// Apply an affine transform `a·d + b` to valid pixels.
    pub fn affine(&self, a: f64, b: f64) -> DepthMap {
        let values = self
            .values
            .iter()
            .zip(&self.valid)
            .map(|(v, &ok)| if ok { a * v + b } else { *v })
            .collect();
        DepthMap::new(self.width, self.height, values, self.valid.clone()).unwrap()
    }

    /// Restrict validity to pixels passing `keep`.
    pub fn masked(&self, keep: impl Fn(usize, usize) -> bool) -> DepthMap {
        let valid = (0..self.height)
            .flat_map(|y| (0..self.width).map(move |x| (x, y)))
            .map(|(x, y)| self.is_valid(x, y) && keep(x, y))
            .collect();
        DepthMap::new(self.width, self.height, self.values.clone(), valid).unwrap()
    }

    /// 2x average-pool downsample (floor dimensions); a coarse pixel is valid
    /// when all pooled fine pixels are.
    pub fn downsample2(&self) -> DepthMap {
        let w = self.width / 2;
        let h = self.height / 2;
        let mut values = vec![0.0; w * h];
        let mut valid = vec![false; w * h];
        for y in 0..h {
            for x in 0..w {
                let mut sum = 0.0;
                let mut ok = true;
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let (fx, fy) = (2 * x + dx, 2 * y + dy);
                    ok &= self.is_valid(fx, fy);
                    sum += self.get(fx, fy);
                }
                values[y * w + x] = sum / 4.0;
                valid[y * w + x] = ok;
            }
        }
        DepthMap::new(w, h, values, valid).unwrap()
    }

    /// 16-bit PNG, TUM convention: depth · 5000, 0 = invalid.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut img = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(
            self.width as u32,
            self.height as u32,
        );
        for y in 0..self.height {
            for x in 0..self.width {
                let raw = if self.is_valid(x, y) {
                    (self.get(x, y) * 5000.0).round().clamp(0.0, 65535.0) as u16
                } else {
                    0
                };
                img.put_pixel(x as u32, y as u32, image::Luma([raw]));
            }
        }
        img.save(path).map_err(|e| Error::Image(e.to_string()))
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?
            .into_luma16();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut values = vec![0.0; w * h];
        let mut valid = vec![false; w * h];
        for y in 0..h {
            for x in 0..w {
                let raw = img.get_pixel(x as u32, y as u32).0[0];
                if raw > 0 {
                    values[y * w + x] = raw as f64 / 5000.0;
                    valid[y * w + x] = true;
                }
            }
        }
        DepthMap::new(w, h, values, valid)
    }

    /// Binary format: magic "MGSD", u32 height, u32 width, then H·W
    /// little-endian f32 values; non-positive values are invalid.
    pub fn save_binary(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(12 + self.values.len() * 4);
        buf.extend_from_slice(b"MGSD");
        buf.extend_from_slice(&(self.height as u32).to_le_bytes());
        buf.extend_from_slice(&(self.width as u32).to_le_bytes());
        for (v, &ok) in self.values.iter().zip(&self.valid) {
            let out = if ok { *v as f32 } else { 0.0f32 };
            buf.extend_from_slice(&out.to_le_bytes());
        }
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load_binary(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .map_err(|e| Error::io(path, e))?
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(path, e))?;
        if bytes.len() < 12 || &bytes[0..4] != b"MGSD" {
            return Err(Error::Checkpoint("missing MGSD magic".into()));
        }
        let h = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let w = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        if bytes.len() != 12 + w * h * 4 {
            return Err(Error::Checkpoint(format!(
                "MGSD payload mismatch for {w}x{h}"
            )));
        }
        let mut values = vec![0.0; w * h];
        let mut valid = vec![false; w * h];
        for i in 0..w * h {
            let v = f32::from_le_bytes(bytes[12 + i * 4..16 + i * 4].try_into().unwrap()) as f64;
            if v > 0.0 {
                values[i] = v;
                valid[i] = true;
            }
        }
        DepthMap::new(w, h, values, valid)
    }
}

/// One frame of the keyframe window handed to a provider. `window[0]` is the
/// reference frame the prior is estimated for.
#[derive(Clone, Copy, Debug)]
pub struct WindowFrame {
    pub frame_id: usize,
    pub pose: Pose,
}

/// Source of true depth per frame, used by the bundled providers.
pub trait SceneDepthOracle: Send + Sync {
    fn true_depth(&self, frame_id: usize) -> DepthMap;
}

/// Produces a prior depth map for the reference frame of a window.
pub trait DepthPriorProvider: Send + Sync {
    fn provide(&self, window: &[WindowFrame], oracle: &dyn SceneDepthOracle) -> Result<DepthMap>;
}

fn check_window(window: &[WindowFrame]) -> Result<()> {
    if window.len() < 2 {
        return Err(Error::WindowTooSmall {
            need: 2,
            got: window.len(),
        });
    }
    Ok(())
}

/// Noiseless oracle depth under a fixed global scale, for isolating the
/// behavior of scale alignment.
#[derive(Clone, Copy, Debug)]
pub struct GroundTruthScaled {
    pub scale: f64,
}

impl DepthPriorProvider for GroundTruthScaled {
    fn provide(&self, window: &[WindowFrame], oracle: &dyn SceneDepthOracle) -> Result<DepthMap> {
        check_window(window)?;
        Ok(oracle.true_depth(window[0].frame_id).affine(self.scale, 0.0))
    }
}

/// Oracle depth with multiplicative log-normal noise and one global scale
/// bias drawn per provider instance. Noise is keyed on the frame id, so a
/// frame's prior does not depend on when it is requested.
#[derive(Clone, Copy, Debug)]
pub struct GroundTruthNoisy {
    pub sigma_noise: f64,
    pub scale_bias: f64,
    pub seed: u64,
}

impl GroundTruthNoisy {
    /// Draws the per-run scale bias log-uniformly from `bias_range`.
    pub fn new(sigma_noise: f64, bias_range: (f64, f64), seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_b1a5);
        let (lo, hi) = bias_range;
        let scale_bias = if hi > lo {
            rng.gen_range(lo.ln()..hi.ln()).exp()
        } else {
            lo
        };
        GroundTruthNoisy {
            sigma_noise,
            scale_bias,
            seed,
        }
    }
}

impl DepthPriorProvider for GroundTruthNoisy {
    fn provide(&self, window: &[WindowFrame], oracle: &dyn SceneDepthOracle) -> Result<DepthMap> {
        check_window(window)?;
        let frame_id = window[0].frame_id;
        let gt = oracle.true_depth(frame_id);
        let mut rng =
            ChaCha8Rng::seed_from_u64(self.seed.wrapping_add(frame_id as u64 * 0x9e37));
        let values: Vec<f64> = gt
            .values()
            .iter()
            .zip(gt.valid_mask())
            .map(|(v, &ok)| {
                // Box-Muller keeps the dependency surface small.
                let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
                let u2: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                let n = (-2.0 * u1.ln()).sqrt() * u2.cos();
                if ok {
                    v * self.scale_bias * (self.sigma_noise * n).exp()
                } else {
                    *v
                }
            })
            .collect();
        DepthMap::new(gt.width, gt.height, values, gt.valid_mask().to_vec())
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct LevelMetrics {
    pub l_si: f64,
    pub l_mv: f64,
    pub l_normal: f64,
}

#[derive(Clone, Debug, Default)]
pub struct DepthQualityReport {
    pub levels: Vec<LevelMetrics>,
    pub combined: f64,
}

fn downscaled_intrinsics(k: &Intrinsics, level: usize) -> Intrinsics {
    let f = (1usize << level) as f64;
    Intrinsics {
        fx: k.fx / f,
        fy: k.fy / f,
        // Integer-aligned pixel centers: fine x maps to (x − 0.5·(f−1)) / f.
        cx: (k.cx - 0.5 * (f - 1.0)) / f,
        cy: (k.cy - 0.5 * (f - 1.0)) / f,
        width: k.width >> level,
        height: k.height >> level,
    }
}

/// Scale-invariant log-depth error, `sqrt(mean(g²) − λ·mean(g)²)`.
fn si_metric(pred: &DepthMap, gt: &DepthMap) -> Result<f64> {
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    let mut count = 0usize;
    for i in 0..pred.values().len() {
        if pred.valid_mask()[i] && gt.valid_mask()[i] {
            let (p, g) = (pred.values()[i], gt.values()[i]);
            if p <= 0.0 || g <= 0.0 {
                return Err(Error::InvalidArgument(
                    "non-positive depth where valid".into(),
                ));
            }
            let d = p.ln() - g.ln();
            sum += d;
            sum_sq += d * d;
            count += 1;
        }
    }
    if count == 0 {
        return Ok(0.0);
    }
    let mean_sq = sum_sq / count as f64;
    let mean = sum / count as f64;
    Ok((mean_sq - SI_LAMBDA * mean * mean).max(0.0).sqrt())
}

/// Multi-view log-depth error: the predicted reference depth is backprojected,
/// carried into each source view, and compared against that view's ground
/// truth sampled at the warped pixel. Out-of-frame and occluded samples
/// (warped depth behind the visible surface by >5%) are excluded.
fn mv_metric(pred: &DepthMap, gts: &[DepthMap], poses: &[Pose], k: &Intrinsics) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    let reference = &poses[0];
    for n in 1..poses.len() {
        let rel = reference.relative_to(&poses[n]); // ref camera -> view n
        let gt_n = &gts[n];
        for y in 0..pred.height {
            for x in 0..pred.width {
                if !pred.is_valid(x, y) {
                    continue;
                }
                let d = pred.get(x, y);
                if d <= 0.0 {
                    return Err(Error::InvalidArgument(
                        "non-positive depth where valid".into(),
                    ));
                }
                let p_ref = k.unproject(x as f64, y as f64) * d;
                let p_n = rel.transform(&p_ref);
                if p_n.z <= 0.0 {
                    continue;
                }
                let (u, v) = k.project(&p_n);
                let Some(gt_sample) = gt_n.sample_bilinear(u, v) else {
                    continue;
                };
                if gt_sample <= 0.0 {
                    continue;
                }
                // Occlusion: the warped point sits measurably behind what
                // view n actually sees.
                if p_n.z > gt_sample * 1.05 {
                    continue;
                }
                sum += (p_n.z.ln() - gt_sample.ln()).abs();
                count += 1;
            }
        }
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

/// Surface normal at (x, y) from central differences of backprojected
/// positions; `None` at borders or where any stencil pixel is invalid.
pub fn normal_at(map: &DepthMap, k: &Intrinsics, x: usize, y: usize) -> Option<Vector3<f64>> {
    if x == 0 || y == 0 || x + 1 >= map.width || y + 1 >= map.height {
        return None;
    }
    for (dx, dy) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
        let (sx, sy) = ((x as i64 + dx) as usize, (y as i64 + dy) as usize);
        if !map.is_valid(sx, sy) {
            return None;
        }
    }
    let point = |px: usize, py: usize| k.unproject(px as f64, py as f64) * map.get(px, py);
    let ddx = point(x + 1, y) - point(x - 1, y);
    let ddy = point(x, y + 1) - point(x, y - 1);
    let n = ddx.cross(&ddy);
    let norm = n.norm();
    (norm > 1e-12).then(|| n / norm)
}

/// Normal-consistency metric: mean over interior valid pixels of
/// `(1 − N̂·N)/2`. Orthogonal normals everywhere give exactly 0.5.
fn normal_metric(pred: &DepthMap, gt: &DepthMap, k: &Intrinsics) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for y in 0..pred.height {
        for x in 0..pred.width {
            let (Some(np), Some(ng)) = (normal_at(pred, k, x, y), normal_at(gt, k, x, y)) else {
                continue;
            };
            sum += 0.5 * (1.0 - np.dot(&ng));
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Score a predicted reference-frame depth against ground truth over a
/// 3-level pyramid. `gts` and `poses` are aligned, reference first; source
/// views feed the multi-view term. Combined value is
/// `Σ_s 2^{−s} (λ_si·L_si + λ_mv·L_mv + λ_n·L_normal)`.
pub fn depth_quality_metrics(
    pred: &DepthMap,
    gts: &[DepthMap],
    poses: &[Pose],
    k: &Intrinsics,
) -> Result<DepthQualityReport> {
    if gts.is_empty() || gts.len() != poses.len() {
        return Err(Error::DimensionMismatch(
            "need one ground-truth depth per pose, reference first".into(),
        ));
    }
    if pred.width != gts[0].width || pred.height != gts[0].height {
        return Err(Error::DimensionMismatch(
            "prediction and reference ground truth differ in size".into(),
        ));
    }

    let (w_si, w_mv, w_normal) = METRIC_WEIGHTS;
    let mut report = DepthQualityReport::default();
    let mut pred_level = pred.clone();
    let mut gt_levels: Vec<DepthMap> = gts.to_vec();
    for s in 0..=PYRAMID_TOP {
        let k_s = downscaled_intrinsics(k, s);
        let level = LevelMetrics {
            l_si: si_metric(&pred_level, &gt_levels[0])?,
            l_mv: mv_metric(&pred_level, &gt_levels, poses, &k_s)?,
            l_normal: normal_metric(&pred_level, &gt_levels[0], &k_s),
        };
        report.combined +=
            (w_si * level.l_si + w_mv * level.l_mv + w_normal * level.l_normal) / (1 << s) as f64;
        report.levels.push(level);
        if s < PYRAMID_TOP {
            pred_level = pred_level.downsample2();
            for g in &mut gt_levels {
                *g = g.downsample2();
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    struct FlatOracle {
        depth: f64,
        width: usize,
        height: usize,
    }

    impl SceneDepthOracle for FlatOracle {
        fn true_depth(&self, _frame_id: usize) -> DepthMap {
            DepthMap::constant(self.width, self.height, self.depth)
        }
    }

    /// Smooth, strictly positive synthetic depth with spatial variation.
    fn wavy_depth(width: usize, height: usize) -> DepthMap {
        let mut values = vec![0.0; width * height];
        for y in 0..height {
            for x in 0..width {
                values[y * width + x] =
                    2.0 + 0.3 * (x as f64 * 0.37).sin() + 0.2 * (y as f64 * 0.23).cos();
            }
        }
        DepthMap::all_valid(width, height, values).unwrap()
    }

    fn window(n: usize) -> Vec<WindowFrame> {
        (0..n)
            .map(|i| WindowFrame {
                frame_id: i,
                pose: Pose::identity(),
            })
            .collect()
    }

    fn test_k(width: usize, height: usize) -> Intrinsics {
        Intrinsics::new(
            60.0,
            60.0,
            width as f64 / 2.0,
            height as f64 / 2.0,
            width,
            height,
        )
        .unwrap()
    }

    #[test]
    fn stats_track_valid_pixels_only() {
        let values = vec![1.0, 3.0, 100.0, 100.0];
        let valid = vec![true, true, false, false];
        let m = DepthMap::new(2, 2, values, valid).unwrap();
        let (mu, sigma) = m.stats();
        assert_relative_eq!(mu, 2.0, epsilon = 1e-12);
        assert_relative_eq!(sigma, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn scaled_provider_identity_and_double() {
        let oracle = FlatOracle {
            depth: 2.5,
            width: 8,
            height: 8,
        };
        let exact = GroundTruthScaled { scale: 1.0 }
            .provide(&window(8), &oracle)
            .unwrap();
        assert_relative_eq!(exact.get(3, 3), 2.5, epsilon = 1e-15);
        let doubled = GroundTruthScaled { scale: 2.0 }
            .provide(&window(8), &oracle)
            .unwrap();
        for y in 0..8 {
            for x in 0..8 {
                assert_relative_eq!(doubled.get(x, y), 5.0, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn provider_rejects_tiny_window() {
        let oracle = FlatOracle {
            depth: 1.0,
            width: 4,
            height: 4,
        };
        assert!(matches!(
            GroundTruthScaled { scale: 1.0 }.provide(&window(1), &oracle),
            Err(Error::WindowTooSmall { .. })
        ));
    }

    #[test]
    fn noisy_provider_log_residual_std_matches_sigma() {
        let oracle = FlatOracle {
            depth: 2.0,
            width: 128,
            height: 128,
        };
        let provider = GroundTruthNoisy::new(0.05, (1.0, 1.0), 99);
        let prior = provider.provide(&window(8), &oracle).unwrap();
        // >= 10^4 pixels; sample std of log residuals should sit near sigma.
        let residuals: Vec<f64> = prior
            .values()
            .iter()
            .map(|v| (v / 2.0).ln() - provider.scale_bias.ln())
            .collect();
        let n = residuals.len() as f64;
        assert!(n >= 1e4);
        let mean = residuals.iter().sum::<f64>() / n;
        let var = residuals
            .iter()
            .map(|r| (r - mean) * (r - mean))
            .sum::<f64>()
            / n;
        let std = var.sqrt();
        assert!((0.04..=0.06).contains(&std), "std = {std}");
    }

    #[test]
    fn noisy_provider_is_deterministic_per_frame() {
        let oracle = FlatOracle {
            depth: 2.0,
            width: 16,
            height: 16,
        };
        let p = GroundTruthNoisy::new(0.05, (0.5, 2.0), 7);
        let a = p.provide(&window(8), &oracle).unwrap();
        let b = p.provide(&window(8), &oracle).unwrap();
        assert_eq!(a.values(), b.values());
    }

    #[test]
    fn metrics_zero_for_perfect_prediction() {
        let k = test_k(24, 20);
        let gt = wavy_depth(24, 20);
        let gts = vec![gt.clone(), gt.clone(), gt.clone()];
        let poses = vec![Pose::identity(); 3];
        let report = depth_quality_metrics(&gt, &gts, &poses, &k).unwrap();
        for level in &report.levels {
            assert!(level.l_si.abs() < 1e-9);
            assert!(level.l_mv.abs() < 1e-9);
            assert!(level.l_normal.abs() < 1e-9);
        }
        assert!(report.combined < 1e-9);
    }

    #[test]
    fn si_metric_closed_form_under_global_scale() {
        let k = test_k(24, 20);
        let gt = wavy_depth(24, 20);
        let c = 1.7;
        let pred = gt.affine(c, 0.0);
        let report =
            depth_quality_metrics(&pred, &[gt.clone(), gt.clone()], &[Pose::identity(); 2], &k)
                .unwrap();
        let expected = c.ln().abs() * (1.0 - SI_LAMBDA).sqrt();
        for level in &report.levels {
            assert_relative_eq!(level.l_si, expected, epsilon = 1e-9);
        }
    }

    #[test]
    fn normal_term_is_half_when_orthogonal() {
        let a = Vector3::new(0.0, 0.0, 1.0);
        let b = Vector3::new(1.0, 0.0, 0.0);
        assert_relative_eq!(0.5 * (1.0 - a.dot(&b)), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn metric_weights_and_constants_pinned() {
        assert_eq!(SI_LAMBDA, 0.85);
        assert_eq!(METRIC_WEIGHTS, (1.0, 0.2, 1.0));
        assert_eq!(PYRAMID_TOP, 2);
    }

    #[test]
    fn mv_metric_invariant_under_source_permutation() {
        let k = test_k(24, 20);
        let gt = wavy_depth(24, 20);
        let pred = gt.affine(1.1, 0.02);
        let pose_a = crate::geom::se3_exp(&nalgebra::Vector6::new(0.02, 0.0, 0.0, 0.0, 0.0, 0.0));
        let pose_b = crate::geom::se3_exp(&nalgebra::Vector6::new(0.0, 0.015, 0.0, 0.0, 0.0, 0.0));
        let r1 = depth_quality_metrics(
            &pred,
            &[gt.clone(), gt.clone(), gt.clone()],
            &[Pose::identity(), pose_a, pose_b],
            &k,
        )
        .unwrap();
        let r2 = depth_quality_metrics(
            &pred,
            &[gt.clone(), gt.clone(), gt.clone()],
            &[Pose::identity(), pose_b, pose_a],
            &k,
        )
        .unwrap();
        for (a, b) in r1.levels.iter().zip(&r2.levels) {
            assert_relative_eq!(a.l_mv, b.l_mv, epsilon = 1e-12);
        }
    }

    #[test]
    fn non_positive_valid_depth_is_an_error() {
        let k = test_k(8, 8);
        let gt = wavy_depth(8, 8);
        let bad = DepthMap::all_valid(8, 8, vec![0.0; 64]).unwrap();
        assert!(
            depth_quality_metrics(&bad, &[gt.clone(), gt], &[Pose::identity(); 2], &k).is_err()
        );
    }

    #[test]
    fn png_round_trip_preserves_depth_to_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.png");
        let m = wavy_depth(16, 12);
        m.save_png(&p).unwrap();
        let back = DepthMap::load_png(&p).unwrap();
        for i in 0..m.values().len() {
            assert!((m.values()[i] - back.values()[i]).abs() < 1.0 / 5000.0);
        }
    }

    #[test]
    fn binary_round_trip_is_f32_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.mgsd");
        let m = wavy_depth(16, 12);
        let m = DepthMap::new(
            16,
            12,
            m.values().to_vec(),
            (0..16 * 12).map(|i| i != 40).collect(),
        )
        .unwrap();
        m.save_binary(&p).unwrap();
        let back = DepthMap::load_binary(&p).unwrap();
        assert_eq!(back.valid_mask(), m.valid_mask());
        for i in 0..m.values().len() {
            if m.valid_mask()[i] {
                assert_relative_eq!(back.values()[i], m.values()[i] as f32 as f64);
            }
        }
    }
}
