//! Sparse-dense adjustment ring: the three-part scale loop between the
//! sparse odometry and the dense Gaussian map.
//!
//! 1. Prior depth is aligned to the sparse map's statistics:
//!    `D̄ = (σ_s/σ̂_d)·D̂ + μ_d·(μ_s/μ̂_d − σ_s/σ̂_d)`,
//!    where `μ̂_d, σ̂_d` are statistics of the prior sampled at the sparse
//!    pixel coordinates and `μ_d` is the full prior-map mean. The formula is
//!    implemented as printed; it reproduces the sparse mean exactly when
//!    `μ_d = μ̂_d`.
//! 2. The aligned depth is backprojected with the frame's colors, voxel
//!    downsampled, and seeded into the Gaussian map.
//! 3. New sparse patches take their inverse depth from the rendered map
//!    depth, closing the loop so the frontend tracks at the map's scale.

use nalgebra::Vector3;

use crate::color_image::ColorImage;
use crate::depth_prior::DepthMap;
use crate::error::{Error, Result};
use crate::gaussian_map::{voxel_downsample, GaussianMap};
use crate::geom::{Intrinsics, Pose};
use crate::rasterizer::{render, RasterSettings};

/// Sparse depth observations at pixel coordinates, with cached statistics.
#[derive(Clone, Debug, Default)]
pub struct SparseDepthObservations {
    pixels: Vec<(f64, f64)>,
    depths: Vec<f64>,
    mu_s: f64,
    sigma_s: f64,
}

impl SparseDepthObservations {
    pub fn new(pixels: Vec<(f64, f64)>, depths: Vec<f64>) -> Result<Self> {
        if pixels.len() != depths.len() {
            return Err(Error::DimensionMismatch(format!(
                "sparse observations: {} pixels vs {} depths",
                pixels.len(),
                depths.len()
            )));
        }
        if depths.iter().any(|&d| d <= 0.0) {
            return Err(Error::InvalidArgument(
                "sparse depths must be positive".into(),
            ));
        }
        let n = depths.len() as f64;
        let mu = depths.iter().sum::<f64>() / n.max(1.0);
        let var = depths.iter().map(|d| (d - mu) * (d - mu)).sum::<f64>() / n.max(1.0);
        Ok(SparseDepthObservations {
            pixels,
            depths,
            mu_s: mu,
            sigma_s: var.sqrt(),
        })
    }

    pub fn len(&self) -> usize {
        self.depths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.depths.is_empty()
    }

    pub fn pixels(&self) -> &[(f64, f64)] {
        &self.pixels
    }

    pub fn depths(&self) -> &[f64] {
        &self.depths
    }

    pub fn stats(&self) -> (f64, f64) {
        (self.mu_s, self.sigma_s)
    }
}

/// Outcome of the alignment, including the degenerate-support fallback flag.
pub struct AlignedPrior {
    pub depth: DepthMap,
    /// Set when the sparsified prior had no spread and the alignment fell
    /// back to pure mean scaling.
    pub degenerate: bool,
    /// The affine coefficients actually applied, `a·d + b`.
    pub scale: f64,
    pub offset: f64,
}

/// Align a prior depth map to sparse observations.
pub fn align_prior_depth(
    prior: &DepthMap,
    sparse: &SparseDepthObservations,
) -> Result<AlignedPrior> {
    if sparse.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "alignment needs at least 2 sparse observations, got {}",
            sparse.len()
        )));
    }

    // Sparsified prior statistics: the prior sampled at sparse pixels.
    let sampled: Vec<f64> = sparse
        .pixels
        .iter()
        .filter_map(|&(u, v)| prior.sample_nearest(u, v))
        .collect();
    if sampled.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "prior valid at only {} of {} sparse pixels",
            sampled.len(),
            sparse.len()
        )));
    }
    let n = sampled.len() as f64;
    let mu_hat = sampled.iter().sum::<f64>() / n;
    let var_hat = sampled.iter().map(|d| (d - mu_hat) * (d - mu_hat)).sum::<f64>() / n;
    let sigma_hat = var_hat.sqrt();

    let (mu_s, sigma_s) = sparse.stats();
    let mu_d = prior.stats().0;

    if mu_hat.abs() < 1e-12 {
        return Err(Error::InvalidArgument(
            "sparsified prior mean is zero".into(),
        ));
    }

    let (scale, offset, degenerate) = if sigma_hat < 1e-9 {
        // Degenerate spread: pure scale alignment of the means.
        (mu_s / mu_hat, 0.0, true)
    } else {
        let a = sigma_s / sigma_hat;
        (a, mu_d * (mu_s / mu_hat - a), false)
    };

    Ok(AlignedPrior {
        depth: prior.affine(scale, offset),
        degenerate,
        scale,
        offset,
    })
}

/// Backproject the aligned depth with the frame's colors into world points,
/// voxel-downsample, and seed new Gaussians. Returns the number added.
pub fn backproject_and_seed(
    aligned: &DepthMap,
    image: &ColorImage,
    pose: &Pose,
    k: &Intrinsics,
    map: &mut GaussianMap,
    scale_hint: f64,
) -> Result<usize> {
    if aligned.width != k.width || aligned.height != k.height {
        return Err(Error::DimensionMismatch(
            "aligned depth does not match intrinsics".into(),
        ));
    }
    let cam_to_world = pose.inverse();
    let mut points = Vec::with_capacity(aligned.valid_count());
    for y in 0..aligned.height {
        for x in 0..aligned.width {
            if !aligned.is_valid(x, y) {
                continue;
            }
            let d = aligned.get(x, y);
            if d <= 0.0 {
                continue;
            }
            let p_cam = k.unproject(x as f64, y as f64) * d;
            let p_world = cam_to_world.transform(&p_cam);
            let c = image.get(x, y);
            points.push((p_world, Vector3::new(c[0], c[1], c[2])));
        }
    }
    if points.is_empty() {
        return Ok(0);
    }
    let downsampled = voxel_downsample(&points, 2.0 * scale_hint);
    Ok(map.seed_from_pointcloud(&downsampled, scale_hint))
}

/// Minimum accumulated opacity for a rendered depth sample to initialize a
/// patch directly.
pub const CLOSURE_MIN_ALPHA: f64 = 0.5;
/// Inverse depth used when the map renders nothing at all.
pub const DEFAULT_INVERSE_DEPTH: f64 = 1.0;

/// Initialize inverse depths for new patch pixels from the rendered map
/// depth at `pose`. Pixels where the render is confident (accumulated
/// opacity above [`CLOSURE_MIN_ALPHA`]) use the rendered depth; the rest
/// fall back to the frame's median rendered depth, or
/// [`DEFAULT_INVERSE_DEPTH`] when the whole render is empty.
pub fn scale_closure(
    map: &GaussianMap,
    pose: &Pose,
    k: &Intrinsics,
    pixels: &[(f64, f64)],
    settings: &RasterSettings,
) -> Vec<f64> {
    if map.is_empty() {
        return vec![DEFAULT_INVERSE_DEPTH; pixels.len()];
    }
    let out = render(map, pose, k, Vector3::zeros(), settings);

    // Median depth over confident pixels as the fallback.
    let mut confident: Vec<f64> = (0..out.depth.len())
        .filter(|&i| out.alpha[i] > CLOSURE_MIN_ALPHA && out.depth[i] > 0.0)
        .map(|i| out.depth[i])
        .collect();
    let fallback_inv = if confident.is_empty() {
        DEFAULT_INVERSE_DEPTH
    } else {
        confident.sort_by(|a, b| a.partial_cmp(b).unwrap());
        1.0 / confident[confident.len() / 2]
    };

    pixels
        .iter()
        .map(|&(u, v)| {
            let x = u.round();
            let y = v.round();
            if x < 0.0 || y < 0.0 || x >= k.width as f64 || y >= k.height as f64 {
                return fallback_inv;
            }
            let (x, y) = (x as usize, y as usize);
            let alpha = out.alpha_at(x, y);
            let depth = out.depth_at(x, y);
            if alpha > CLOSURE_MIN_ALPHA && depth > 0.0 {
                1.0 / depth
            } else {
                fallback_inv
            }
        })
        .collect()
}
