//! The dense scene as a mutable set of anisotropic 3D Gaussians.
//!
//! Map maintenance follows the vanilla splatting recipe: primitives whose
//! accumulated positional gradient exceeds a threshold are cloned (small) or
//! split (large), and primitives whose opacity falls below a threshold are
//! removed. Seeding backprojects a colored point cloud into isotropic
//! primitives.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use rand::Rng;

use crate::error::{Error, Result};

/// Default maximum mean positional-gradient before densification triggers.
pub const DEFAULT_GRAD_THRESHOLD: f64 = 0.0002;
/// Default minimum opacity below which a Gaussian is pruned.
pub const DEFAULT_OPACITY_THRESHOLD: f64 = 0.65;
/// Opacity assigned to freshly seeded Gaussians. Comfortably above the
/// prune threshold: early optimization pushes overlapping seeds down, and a
/// narrow margin lets routine maintenance carve holes into fresh geometry.
pub const SEED_OPACITY: f64 = 0.9;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// One anisotropic 3D Gaussian primitive.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Gaussian {
    /// Center, meters, world frame.
    pub mu_w: Vector3<f64>,
    /// Orientation of the principal axes (R component of Σ = R S Sᵀ Rᵀ).
    pub rot: UnitQuaternion<f64>,
    /// Log of the per-axis scales (diagonal of S).
    pub log_scale: Vector3<f64>,
    /// Opacity before the sigmoid.
    pub opacity_logit: f64,
    /// Constant RGB in [0, 1]; no view dependence.
    pub color: Vector3<f64>,
}

impl Gaussian {
    pub fn isotropic(mu_w: Vector3<f64>, scale: f64, opacity: f64, color: Vector3<f64>) -> Self {
        Gaussian {
            mu_w,
            rot: UnitQuaternion::identity(),
            log_scale: Vector3::repeat(scale.ln()),
            opacity_logit: logit(opacity),
            color,
        }
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn scales(&self) -> Vector3<f64> {
        self.log_scale.map(f64::exp)
    }

    /// World-frame covariance Σ = R · diag(exp(2·log_scale)) · Rᵀ.
    pub fn covariance(&self) -> Matrix3<f64> {
        let r = self.rot.to_rotation_matrix().into_inner();
        let d = Matrix3::from_diagonal(&self.log_scale.map(|s| (2.0 * s).exp()));
        r * d * r.transpose()
    }
}

/// Per-Gaussian densification statistics: accumulated world-space positional
/// gradient magnitude and the number of backward passes that touched it.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradAccum {
    pub grad_norm_sum: f64,
    pub count: u32,
}

impl GradAccum {
    pub fn mean(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.grad_norm_sum / self.count as f64
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GaussianMap {
    pub gaussians: Vec<Gaussian>,
    pub grad_accum: Vec<GradAccum>,
}

/// Outcome counts of one densify-and-prune pass.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MaintenanceStats {
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
}

impl GaussianMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn push(&mut self, g: Gaussian) {
        self.gaussians.push(g);
        self.grad_accum.push(GradAccum::default());
    }

    /// Record one backward pass: world-space gradient magnitude per center.
    pub fn accumulate_gradients(&mut self, mu_grads: &[Vector3<f64>]) {
        assert_eq!(mu_grads.len(), self.gaussians.len());
        for (acc, g) in self.grad_accum.iter_mut().zip(mu_grads) {
            acc.grad_norm_sum += g.norm();
            acc.count += 1;
        }
    }

    pub fn reset_grad_accum(&mut self) {
        for acc in &mut self.grad_accum {
            *acc = GradAccum::default();
        }
    }

    /// Axis-aligned bounding-box diagonal of the centers; 0 for empty maps.
    pub fn extent(&self) -> f64 {
        if self.gaussians.is_empty() {
            return 0.0;
        }
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for g in &self.gaussians {
            lo = lo.inf(&g.mu_w);
            hi = hi.sup(&g.mu_w);
        }
        (hi - lo).norm()
    }

    /// Seed one isotropic Gaussian per point. Points carry their RGB color;
    /// scale and opacity come from the hint and [`SEED_OPACITY`]. Coincident
    /// points produce distinct primitives.
    pub fn seed_from_pointcloud(
        &mut self,
        points: &[(Vector3<f64>, Vector3<f64>)],
        initial_scale_hint: f64,
    ) -> usize {
        if points.is_empty() {
            return 0;
        }
        assert!(initial_scale_hint > 0.0, "scale hint must be positive");
        for (p, color) in points {
            self.push(Gaussian::isotropic(*p, initial_scale_hint, SEED_OPACITY, *color));
        }
        points.len()
    }

    /// One maintenance pass. High-gradient small Gaussians are cloned with a
    /// jittered center, high-gradient large ones split into two with scales
    /// divided by 1.6; low-opacity Gaussians are removed. `size_ref` is the
    /// seeding scale hint that separates "small" from "large" (max scale
    /// below 2x the hint clones, otherwise splits). Resets the accumulator.
    pub fn densify_and_prune(
        &mut self,
        grad_threshold: f64,
        opacity_threshold: f64,
        size_ref: f64,
        rng: &mut impl Rng,
    ) -> MaintenanceStats {
        let mut stats = MaintenanceStats::default();
        if self.gaussians.is_empty() {
            return stats;
        }

        let mut out: Vec<Gaussian> = Vec::with_capacity(self.gaussians.len());
        for (g, acc) in self.gaussians.iter().zip(&self.grad_accum) {
            if g.opacity() < opacity_threshold {
                stats.pruned += 1;
                continue;
            }
            let scales = g.scales();
            let max_scale = scales.max();
            if acc.count > 0 && acc.mean() > grad_threshold {
                if max_scale < 2.0 * size_ref {
                    // Clone with center jitter of half the scale per axis.
                    let mut clone = *g;
                    let jitter =
                        Vector3::from_fn(|i, _| 0.5 * scales[i] * rng.gen_range(-1.0..1.0));
                    clone.mu_w += jitter;
                    out.push(*g);
                    out.push(clone);
                    stats.cloned += 1;
                } else {
                    // Split into two along the dominant axis, shrunken 1.6x.
                    let axis_idx = scales.imax();
                    let axis = g.rot.to_rotation_matrix().into_inner().column(axis_idx)
                        * scales[axis_idx];
                    let shrunk = g.log_scale.map(|s| s - 1.6f64.ln());
                    for sign in [-0.5, 0.5] {
                        let mut half = *g;
                        half.mu_w += sign * axis;
                        half.log_scale = shrunk;
                        out.push(half);
                    }
                    stats.split += 1;
                }
            } else {
                out.push(*g);
            }
        }

        self.gaussians = out;
        self.grad_accum = vec![GradAccum::default(); self.gaussians.len()];
        stats
    }

    /// Write the binary checkpoint: magic "MGSM", u32 version, u64 count,
    /// then 14 little-endian f32 per Gaussian
    /// (mu_w[3], rot wxyz[4], log_scale[3], opacity_logit, color[3]).
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::with_capacity(16 + self.len() * 14 * 4);
        buf.extend_from_slice(b"MGSM");
        buf.extend_from_slice(&1u32.to_le_bytes());
        buf.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for g in &self.gaussians {
            let q = g.rot.quaternion();
            let vals: [f64; 14] = [
                g.mu_w.x,
                g.mu_w.y,
                g.mu_w.z,
                q.w,
                q.i,
                q.j,
                q.k,
                g.log_scale.x,
                g.log_scale.y,
                g.log_scale.z,
                g.opacity_logit,
                g.color.x,
                g.color.y,
                g.color.z,
            ];
            for v in vals {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .map_err(|e| Error::io(path, e))?
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(path, e))?;
        if bytes.len() < 16 || &bytes[0..4] != b"MGSM" {
            return Err(Error::Checkpoint("missing MGSM magic".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != 1 {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let expected = 16 + count * 14 * 4;
        if bytes.len() != expected {
            return Err(Error::Checkpoint(format!(
                "expected {expected} bytes for {count} gaussians, got {}",
                bytes.len()
            )));
        }
        let mut map = GaussianMap::new();
        let mut off = 16;
        let mut next = || {
            let v = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as f64;
            off += 4;
            v
        };
        for _ in 0..count {
            let mu_w = Vector3::new(next(), next(), next());
            let (w, x, y, z) = (next(), next(), next(), next());
            // Stored components were unit before the f32 rounding; loading
            // without renormalization keeps save->load->save bit-identical.
            let rot = UnitQuaternion::new_unchecked(Quaternion::new(w, x, y, z));
            let log_scale = Vector3::new(next(), next(), next());
            let opacity_logit = next();
            let color = Vector3::new(next(), next(), next());
            map.push(Gaussian {
                mu_w,
                rot,
                log_scale,
                opacity_logit,
                color,
            });
        }
        Ok(map)
    }
}

/// Uniform voxel-grid downsampling: keeps the centroid (position and color)
/// of every occupied voxel. The grid anchors at the cloud's minimum corner,
/// so a cloud smaller than one voxel collapses to exactly one point. Output
/// order follows first occupancy, deterministic in the input order.
pub fn voxel_downsample(
    points: &[(Vector3<f64>, Vector3<f64>)],
    voxel_size: f64,
) -> Vec<(Vector3<f64>, Vector3<f64>)> {
    assert!(voxel_size > 0.0);
    let mut anchor = Vector3::repeat(f64::INFINITY);
    for (p, _) in points {
        anchor = anchor.inf(p);
    }
    let mut cells: HashMap<(i64, i64, i64), (Vector3<f64>, Vector3<f64>, usize)> = HashMap::new();
    let mut order: Vec<(i64, i64, i64)> = Vec::new();
    for (p, c) in points {
        let key = (
            ((p.x - anchor.x) / voxel_size).floor() as i64,
            ((p.y - anchor.y) / voxel_size).floor() as i64,
            ((p.z - anchor.z) / voxel_size).floor() as i64,
        );
        match cells.get_mut(&key) {
            Some(entry) => {
                entry.0 += p;
                entry.1 += c;
                entry.2 += 1;
            }
            None => {
                cells.insert(key, (*p, *c, 1));
                order.push(key);
            }
        }
    }
    order
        .into_iter()
        .map(|key| {
            let (psum, csum, n) = cells[&key];
            (psum / n as f64, csum / n as f64)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn seed_single_point() {
        let mut map = GaussianMap::new();
        let n = map.seed_from_pointcloud(
            &[(Vector3::new(0.0, 0.0, 1.0), Vector3::new(1.0, 1.0, 1.0))],
            0.05,
        );
        assert_eq!(n, 1);
        assert_eq!(map.len(), 1);
        let g = &map.gaussians[0];
        assert_eq!(g.mu_w, Vector3::new(0.0, 0.0, 1.0));
        assert_eq!(g.color, Vector3::new(1.0, 1.0, 1.0));
        assert_relative_eq!(g.opacity(), SEED_OPACITY, epsilon = 1e-12);
    }

    #[test]
    fn seed_thousand_points_all_scales_equal_hint() {
        let mut map = GaussianMap::new();
        let pts: Vec<_> = (0..1000)
            .map(|i| {
                let f = i as f64 / 1000.0;
                (Vector3::new(f, -f, 1.0 + f), Vector3::new(f, f, f))
            })
            .collect();
        map.seed_from_pointcloud(&pts, 0.02);
        assert_eq!(map.len(), 1000);
        for g in &map.gaussians {
            assert_relative_eq!(g.scales().x, 0.02, epsilon = 1e-12);
            assert_relative_eq!(g.scales().y, 0.02, epsilon = 1e-12);
            assert_relative_eq!(g.scales().z, 0.02, epsilon = 1e-12);
        }
    }

    #[test]
    fn seed_keeps_coincident_points() {
        let mut map = GaussianMap::new();
        let p = (Vector3::new(1.0, 2.0, 3.0), Vector3::new(0.5, 0.5, 0.5));
        map.seed_from_pointcloud(&[p, p], 0.01);
        assert_eq!(map.len(), 2);
    }

    #[test]
    fn seed_empty_is_noop() {
        let mut map = GaussianMap::new();
        assert_eq!(map.seed_from_pointcloud(&[], 0.01), 0);
        assert!(map.is_empty());
    }

    #[test]
    fn maintenance_no_trigger_leaves_map_unchanged() {
        let mut map = GaussianMap::new();
        for i in 0..10 {
            map.push(Gaussian::isotropic(
                Vector3::new(i as f64, 0.0, 2.0),
                0.05,
                0.9,
                Vector3::repeat(0.5),
            ));
        }
        map.accumulate_gradients(&vec![Vector3::zeros(); 10]);
        let before = map.gaussians.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let stats = map.densify_and_prune(
            DEFAULT_GRAD_THRESHOLD,
            DEFAULT_OPACITY_THRESHOLD,
            0.05,
            &mut rng,
        );
        assert_eq!(stats, MaintenanceStats::default());
        assert_eq!(map.gaussians, before);
    }

    #[test]
    fn prune_removes_low_opacity() {
        let mut map = GaussianMap::new();
        map.push(Gaussian::isotropic(Vector3::zeros(), 0.05, 0.9, Vector3::zeros()));
        map.push(Gaussian::isotropic(Vector3::zeros(), 0.05, 0.1, Vector3::zeros()));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let stats = map.densify_and_prune(
            DEFAULT_GRAD_THRESHOLD,
            DEFAULT_OPACITY_THRESHOLD,
            0.05,
            &mut rng,
        );
        assert_eq!(stats.pruned, 1);
        assert_eq!(map.len(), 1);
        for g in &map.gaussians {
            assert!(g.opacity() >= DEFAULT_OPACITY_THRESHOLD);
        }
    }

    #[test]
    fn densify_clones_small_and_splits_large() {
        let mut map = GaussianMap::new();
        // Small (scale = hint) and large (scale = 3x hint), both over-threshold.
        map.push(Gaussian::isotropic(Vector3::zeros(), 0.05, 0.9, Vector3::zeros()));
        map.push(Gaussian::isotropic(Vector3::zeros(), 0.15, 0.9, Vector3::zeros()));
        map.accumulate_gradients(&vec![Vector3::new(1.0, 0.0, 0.0); 2]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let stats = map.densify_and_prune(DEFAULT_GRAD_THRESHOLD, 0.65, 0.05, &mut rng);
        assert_eq!(stats.cloned, 1);
        assert_eq!(stats.split, 1);
        assert_eq!(map.len(), 4);
        // Split halves shrink by 1.6.
        let split_scale = map.gaussians[3].scales().x;
        assert_relative_eq!(split_scale, 0.15 / 1.6, epsilon = 1e-12);
        // Accumulator reset and sized to the new map.
        assert_eq!(map.grad_accum.len(), 4);
        assert!(map.grad_accum.iter().all(|a| a.count == 0));
    }

    #[test]
    fn accumulator_mean_drives_trigger() {
        let mut map = GaussianMap::new();
        map.push(Gaussian::isotropic(Vector3::zeros(), 0.05, 0.9, Vector3::zeros()));
        // Two passes averaging below threshold: no densify.
        map.accumulate_gradients(&[Vector3::new(0.0003, 0.0, 0.0)]);
        map.accumulate_gradients(&[Vector3::zeros()]);
        assert!(map.grad_accum[0].mean() < DEFAULT_GRAD_THRESHOLD);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let stats = map.densify_and_prune(DEFAULT_GRAD_THRESHOLD, 0.65, 0.05, &mut rng);
        assert_eq!(stats.cloned + stats.split, 0);
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut map = GaussianMap::new();
        for _ in 0..57 {
            map.push(Gaussian {
                mu_w: Vector3::from_fn(|_, _| rng.gen_range(-2.0..2.0)),
                rot: UnitQuaternion::new_normalize(Quaternion::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                )),
                log_scale: Vector3::from_fn(|_, _| rng.gen_range(-4.0..0.0)),
                opacity_logit: rng.gen_range(-2.0..2.0),
                color: Vector3::from_fn(|_, _| rng.gen_range(0.0..1.0)),
            });
        }
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.mgsm");
        let p2 = dir.path().join("b.mgsm");
        map.save_checkpoint(&p1).unwrap();
        let loaded = GaussianMap::load_checkpoint(&p1).unwrap();
        assert_eq!(loaded.len(), map.len());
        loaded.save_checkpoint(&p2).unwrap();
        // Save -> load -> save reproduces identical bytes.
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn checkpoint_rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.mgsm");
        std::fs::write(&p, b"NOPE\x01\x00\x00\x00\x00\x00\x00\x00\x00\x00\x00\x00").unwrap();
        assert!(matches!(
            GaussianMap::load_checkpoint(&p),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn voxel_downsample_collapses_to_one_cell() {
        let pts: Vec<_> = (0..32)
            .map(|i| {
                let f = i as f64 / 100.0;
                (Vector3::new(f, f, f), Vector3::new(1.0, 0.0, 0.0))
            })
            .collect();
        let out = voxel_downsample(&pts, 10.0);
        assert_eq!(out.len(), 1);
    }

    #[test]
    fn voxel_downsample_keeps_separated_points() {
        let pts = vec![
            (Vector3::new(0.0, 0.0, 0.0), Vector3::zeros()),
            (Vector3::new(1.0, 0.0, 0.0), Vector3::zeros()),
            (Vector3::new(0.05, 0.0, 0.0), Vector3::zeros()),
        ];
        let out = voxel_downsample(&pts, 0.5);
        assert_eq!(out.len(), 2);
    }
}
