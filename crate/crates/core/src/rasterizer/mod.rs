//! Differentiable splatting of a Gaussian map into color and depth images.
//!
//! Forward: every Gaussian is projected to the image plane (center through
//! the pinhole, covariance through the linearized projection Jacobian), then
//! composited front-to-back per pixel with alpha blending. Depth composites
//! the camera-frame z of each center with the same weights; remaining
//! transmittance falls to the background color and contributes no depth.
//!
//! Backward: exact analytic gradients of the composited images with respect
//! to every Gaussian parameter and the left tangent of the camera pose. The
//! per-pixel pass is replayed from retained contributor lists so forward and
//! backward see bit-identical alphas.
//!
//! The production path is tiled; [`reference`] keeps a naive per-pixel path
//! as the compositing oracle. Both paths skip a Gaussian at a pixel when its
//! alpha falls below the cutoff, and the tile binning radius is derived from
//! that same cutoff, so the two paths composite identical term sequences.

pub mod reference;

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3, Vector4, Vector6};

use crate::color_image::ColorImage;
use crate::gaussian_map::{sigmoid, Gaussian, GaussianMap};
use crate::geom::{skew, Intrinsics, Pose};

#[derive(Clone, Copy, Debug)]
pub struct RasterSettings {
    /// Gaussians at or behind this camera-frame depth are culled.
    pub near_plane: f64,
    /// Added to the projected covariance diagonal before inversion, px².
    pub lowpass_floor: f64,
    /// Per-pixel contributions with alpha below this are skipped.
    pub alpha_cutoff: f64,
    /// A pixel stops compositing once transmittance drops below this.
    pub transmittance_min: f64,
    pub tile_size: usize,
    /// Worker threads for tile processing; results are identical for any
    /// value because per-tile buffers merge in tile order.
    pub threads: usize,
}

impl Default for RasterSettings {
    fn default() -> Self {
        RasterSettings {
            near_plane: 0.01,
            lowpass_floor: 0.3,
            alpha_cutoff: 1.0 / 255.0,
            transmittance_min: 1e-4,
            tile_size: 16,
            threads: 1,
        }
    }
}

impl RasterSettings {
    /// Cutoffs disabled: the compositing becomes the smooth blending formula
    /// with no skip/termination discontinuities. Used by gradient checks.
    pub fn exact() -> Self {
        RasterSettings {
            alpha_cutoff: 0.0,
            transmittance_min: 0.0,
            ..Default::default()
        }
    }
}

/// A Gaussian after projection to one camera.
#[derive(Clone, Copy, Debug)]
pub struct ProjectedGaussian {
    /// Index into the map it was projected from.
    pub index: usize,
    /// Pixel center.
    pub mu_i: Vector2<f64>,
    /// Projected covariance J W Σ_w Wᵀ Jᵀ, px², before the low-pass floor.
    pub sigma_i: Matrix2<f64>,
    /// Camera-frame depth of the center.
    pub z: f64,
    pub alpha_base: f64,
    pub color: Vector3<f64>,
    /// Camera-frame center (cached for the backward pass).
    pub p_cam: Vector3<f64>,
    /// Inverse of the floored covariance.
    pub conic: Matrix2<f64>,
    /// Half-extent of the pixel box outside which alpha < cutoff.
    pub radius: f64,
}

/// Pinhole Jacobian ∂(u,v)/∂p_cam at a camera-frame point.
#[inline]
fn projection_jacobian(k: &Intrinsics, p: &Vector3<f64>) -> Matrix2x3<f64> {
    let iz = 1.0 / p.z;
    let iz2 = iz * iz;
    Matrix2x3::new(
        k.fx * iz,
        0.0,
        -k.fx * p.x * iz2,
        0.0,
        k.fy * iz,
        -k.fy * p.y * iz2,
    )
}

#[inline]
fn max_eigenvalue_2x2(m: &Matrix2<f64>) -> f64 {
    let mid = 0.5 * (m[(0, 0)] + m[(1, 1)]);
    let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
    mid + (mid * mid - det).max(0.0).sqrt()
}

/// Project one Gaussian; `None` when culled (behind the near plane, opacity
/// below the cutoff, or its 3σ ellipse misses the image).
pub fn project_gaussian(
    g: &Gaussian,
    pose: &Pose,
    k: &Intrinsics,
    settings: &RasterSettings,
) -> Option<ProjectedGaussian> {
    let p_cam = pose.transform(&g.mu_w);
    if p_cam.z <= settings.near_plane {
        return None;
    }
    let alpha_base = sigmoid(g.opacity_logit);
    if alpha_base <= settings.alpha_cutoff {
        return None;
    }

    let (u, v) = k.project(&p_cam);
    let j = projection_jacobian(k, &p_cam);
    let w = pose.rotation_matrix();
    let sigma_w = g.covariance();
    let m = w * sigma_w * w.transpose();
    let sigma_i = j * m * j.transpose();

    let floored = sigma_i + Matrix2::from_diagonal_element(settings.lowpass_floor);
    let det = floored[(0, 0)] * floored[(1, 1)] - floored[(0, 1)] * floored[(1, 0)];
    if det <= 0.0 {
        return None;
    }
    let conic = Matrix2::new(
        floored[(1, 1)] / det,
        -floored[(0, 1)] / det,
        -floored[(1, 0)] / det,
        floored[(0, 0)] / det,
    );

    let lambda_max = max_eigenvalue_2x2(&floored);
    // Image cull at 3σ.
    let r3 = 3.0 * lambda_max.sqrt();
    if u + r3 < 0.0
        || v + r3 < 0.0
        || u - r3 > (k.width - 1) as f64
        || v - r3 > (k.height - 1) as f64
    {
        return None;
    }
    // Binning radius from the alpha cutoff: outside it, alpha < cutoff by
    // construction, so the tiled and naive paths skip identically.
    let radius = if settings.alpha_cutoff > 0.0 {
        let q = 2.0 * (alpha_base / settings.alpha_cutoff).ln();
        (q.max(0.0) * lambda_max).sqrt()
    } else {
        f64::INFINITY
    };

    Some(ProjectedGaussian {
        index: g_index_placeholder(),
        mu_i: Vector2::new(u, v),
        sigma_i,
        z: p_cam.z,
        alpha_base,
        color: g.color,
        p_cam,
        conic,
        radius,
    })
}

// The index is assigned by the caller that knows the map position.
#[inline]
fn g_index_placeholder() -> usize {
    usize::MAX
}

/// Project the whole map and sort front-to-back. Sorting keys are geometric
/// (depth, then pixel center), so the order does not depend on storage order
/// for distinct Gaussians.
pub fn project_map(
    map: &GaussianMap,
    pose: &Pose,
    k: &Intrinsics,
    settings: &RasterSettings,
) -> Vec<ProjectedGaussian> {
    let mut projected: Vec<ProjectedGaussian> = map
        .gaussians
        .iter()
        .enumerate()
        .filter_map(|(i, g)| {
            project_gaussian(g, pose, k, settings).map(|mut p| {
                p.index = i;
                p
            })
        })
        .collect();
    projected.sort_by(|a, b| {
        (a.z, a.mu_i.x, a.mu_i.y, a.index)
            .partial_cmp(&(b.z, b.mu_i.x, b.mu_i.y, b.index))
            .expect("projected gaussians are finite")
    });
    projected
}

/// Rendered images plus everything the backward pass replays.
pub struct RenderOutput {
    pub color: ColorImage,
    /// Composited depth, meters; 0 where nothing contributed.
    pub depth: Vec<f64>,
    /// Accumulated opacity in [0, 1].
    pub alpha: Vec<f64>,
    pub width: usize,
    pub height: usize,
    pub background: Vector3<f64>,
    pub projected: Vec<ProjectedGaussian>,
    /// Per-pixel contributor ranges into `entries` (start, len).
    ranges: Vec<(u32, u32)>,
    /// Indices into `projected`, in compositing order.
    entries: Vec<u32>,
    pose: Pose,
    intrinsics: Intrinsics,
    settings: RasterSettings,
}

impl RenderOutput {
    pub fn depth_at(&self, x: usize, y: usize) -> f64 {
        self.depth[y * self.width + x]
    }

    pub fn alpha_at(&self, x: usize, y: usize) -> f64 {
        self.alpha[y * self.width + x]
    }

    pub fn contributors(&self, x: usize, y: usize) -> &[u32] {
        let (start, len) = self.ranges[y * self.width + x];
        &self.entries[start as usize..(start + len) as usize]
    }
}

/// Gradients of a scalar loss with respect to the map and the camera pose.
#[derive(Clone, Debug)]
pub struct MapGradients {
    pub mu_w: Vec<Vector3<f64>>,
    /// Quaternion gradient in (w, x, y, z) order, tangent to the unit sphere.
    pub rot: Vec<Vector4<f64>>,
    pub log_scale: Vec<Vector3<f64>>,
    pub opacity_logit: Vec<f64>,
    pub color: Vec<Vector3<f64>>,
    /// Left tangent `[rho, theta]` at the render pose.
    pub pose: Vector6<f64>,
}

impl MapGradients {
    pub fn zeros(n: usize) -> Self {
        MapGradients {
            mu_w: vec![Vector3::zeros(); n],
            rot: vec![Vector4::zeros(); n],
            log_scale: vec![Vector3::zeros(); n],
            opacity_logit: vec![0.0; n],
            color: vec![Vector3::zeros(); n],
            pose: Vector6::zeros(),
        }
    }
}

struct TileGrid {
    tile_size: usize,
    tiles_x: usize,
    tiles_y: usize,
}

impl TileGrid {
    fn new(width: usize, height: usize, tile_size: usize) -> Self {
        TileGrid {
            tile_size,
            tiles_x: width.div_ceil(tile_size),
            tiles_y: height.div_ceil(tile_size),
        }
    }

    fn count(&self) -> usize {
        self.tiles_x * self.tiles_y
    }

    /// Pixel bounds (x0, y0, x1, y1) of a tile, exclusive upper.
    fn bounds(&self, tile: usize, width: usize, height: usize) -> (usize, usize, usize, usize) {
        let tx = tile % self.tiles_x;
        let ty = tile / self.tiles_x;
        let x0 = tx * self.tile_size;
        let y0 = ty * self.tile_size;
        (
            x0,
            y0,
            (x0 + self.tile_size).min(width),
            (y0 + self.tile_size).min(height),
        )
    }

    /// Tiles overlapped by a projected Gaussian's cutoff box.
    fn tile_range(
        &self,
        p: &ProjectedGaussian,
        width: usize,
        height: usize,
    ) -> Option<(usize, usize, usize, usize)> {
        let x_lo = (p.mu_i.x - p.radius).max(0.0);
        let y_lo = (p.mu_i.y - p.radius).max(0.0);
        let x_hi = (p.mu_i.x + p.radius).min((width - 1) as f64);
        let y_hi = (p.mu_i.y + p.radius).min((height - 1) as f64);
        if x_lo > x_hi || y_lo > y_hi {
            return None;
        }
        Some((
            x_lo as usize / self.tile_size,
            y_lo as usize / self.tile_size,
            x_hi as usize / self.tile_size,
            y_hi as usize / self.tile_size,
        ))
    }
}

fn build_tile_lists(
    grid: &TileGrid,
    projected: &[ProjectedGaussian],
    width: usize,
    height: usize,
) -> Vec<Vec<u32>> {
    let mut lists: Vec<Vec<u32>> = vec![Vec::new(); grid.count()];
    for (pi, p) in projected.iter().enumerate() {
        if let Some((tx0, ty0, tx1, ty1)) = grid.tile_range(p, width, height) {
            for ty in ty0..=ty1 {
                for tx in tx0..=tx1 {
                    lists[ty * grid.tiles_x + tx].push(pi as u32);
                }
            }
        }
    }
    lists
}

/// Composite one pixel. Appends the contributing entries (indices into the
/// projected list) to `taken` and returns (color, depth, alpha).
#[inline]
fn composite_pixel(
    px: f64,
    py: f64,
    list: &[u32],
    projected: &[ProjectedGaussian],
    background: &Vector3<f64>,
    settings: &RasterSettings,
    taken: &mut Vec<u32>,
) -> (Vector3<f64>, f64, f64) {
    let mut color = Vector3::zeros();
    let mut depth = 0.0;
    let mut acc_alpha = 0.0;
    let mut transmittance = 1.0;
    for &pi in list {
        let p = &projected[pi as usize];
        let dx = px - p.mu_i.x;
        let dy = py - p.mu_i.y;
        let power = -0.5
            * (p.conic[(0, 0)] * dx * dx
                + (p.conic[(0, 1)] + p.conic[(1, 0)]) * dx * dy
                + p.conic[(1, 1)] * dy * dy);
        if power > 0.0 {
            continue;
        }
        let alpha = p.alpha_base * power.exp();
        if alpha < settings.alpha_cutoff {
            continue;
        }
        let weight = alpha * transmittance;
        color += weight * p.color;
        depth += weight * p.z;
        acc_alpha += weight;
        transmittance *= 1.0 - alpha;
        taken.push(pi);
        if transmittance < settings.transmittance_min {
            break;
        }
    }
    color += transmittance * background;
    (color, depth, acc_alpha)
}

struct TileForward {
    tile: usize,
    /// Row-major within the tile: (color, depth, alpha).
    pixels: Vec<(Vector3<f64>, f64, f64)>,
    /// Contributor entries, tile-local, with per-pixel counts.
    entries: Vec<u32>,
    counts: Vec<u32>,
}

fn forward_tile(
    tile: usize,
    grid: &TileGrid,
    lists: &[Vec<u32>],
    projected: &[ProjectedGaussian],
    background: &Vector3<f64>,
    settings: &RasterSettings,
    width: usize,
    height: usize,
) -> TileForward {
    let (x0, y0, x1, y1) = grid.bounds(tile, width, height);
    let list = &lists[tile];
    let mut pixels = Vec::with_capacity((x1 - x0) * (y1 - y0));
    let mut entries = Vec::new();
    let mut counts = Vec::with_capacity((x1 - x0) * (y1 - y0));
    for y in y0..y1 {
        for x in x0..x1 {
            let before = entries.len();
            let out = composite_pixel(
                x as f64,
                y as f64,
                list,
                projected,
                background,
                settings,
                &mut entries,
            );
            counts.push((entries.len() - before) as u32);
            pixels.push(out);
        }
    }
    TileForward {
        tile,
        pixels,
        entries,
        counts,
    }
}

/// Run a job per tile on `threads` workers with a static cyclic partition,
/// then hand results to `merge` in ascending tile order.
fn for_each_tile<T: Send>(
    n_tiles: usize,
    threads: usize,
    job: impl Fn(usize) -> T + Sync,
    mut merge: impl FnMut(T),
) {
    let threads = threads.max(1).min(n_tiles.max(1));
    if threads <= 1 || n_tiles <= 1 {
        for tile in 0..n_tiles {
            merge(job(tile));
        }
        return;
    }
    let mut buckets: Vec<Vec<T>> = Vec::with_capacity(threads);
    std::thread::scope(|scope| {
        let mut handles = Vec::with_capacity(threads);
        for w in 0..threads {
            let job = &job;
            handles.push(scope.spawn(move || {
                (w..n_tiles).step_by(threads).map(job).collect::<Vec<T>>()
            }));
        }
        for h in handles {
            buckets.push(h.join().expect("tile worker panicked"));
        }
    });
    // Cyclic partition: tile t lives at buckets[t % threads][t / threads].
    for tile in 0..n_tiles {
        let item = buckets[tile % threads].remove(0);
        merge(item);
    }
}

/// Forward render. The output retains projected Gaussians and per-pixel
/// contributor lists so the backward pass can replay compositing exactly.
pub fn render(
    map: &GaussianMap,
    pose: &Pose,
    k: &Intrinsics,
    background: Vector3<f64>,
    settings: &RasterSettings,
) -> RenderOutput {
    let (width, height) = (k.width, k.height);
    let projected = project_map(map, pose, k, settings);
    let grid = TileGrid::new(width, height, settings.tile_size);
    let lists = build_tile_lists(&grid, &projected, width, height);

    let mut color = ColorImage::new(width, height);
    let mut depth = vec![0.0; width * height];
    let mut alpha = vec![0.0; width * height];
    let mut ranges = vec![(0u32, 0u32); width * height];
    let mut entries: Vec<u32> = Vec::new();

    for_each_tile(
        grid.count(),
        settings.threads,
        |tile| {
            forward_tile(
                tile, &grid, &lists, &projected, &background, settings, width, height,
            )
        },
        |tf: TileForward| {
            let (x0, y0, x1, y1) = grid.bounds(tf.tile, width, height);
            let mut local = 0usize;
            let mut entry_pos = 0usize;
            for y in y0..y1 {
                for x in x0..x1 {
                    let (c, d, a) = tf.pixels[local];
                    color.set(x, y, [c.x, c.y, c.z]);
                    depth[y * width + x] = d;
                    alpha[y * width + x] = a;
                    let count = tf.counts[local] as usize;
                    ranges[y * width + x] = (entries.len() as u32, count as u32);
                    entries.extend_from_slice(&tf.entries[entry_pos..entry_pos + count]);
                    entry_pos += count;
                    local += 1;
                }
            }
        },
    );

    RenderOutput {
        color,
        depth,
        alpha,
        width,
        height,
        background,
        projected,
        ranges,
        entries,
        pose: *pose,
        intrinsics: *k,
        settings: *settings,
    }
}

/// Per-projected-Gaussian gradient accumulator for the image-plane stage.
#[derive(Clone, Copy, Default)]
struct ProjGrad {
    mu_i: Vector2<f64>,
    conic: Matrix2<f64>,
    alpha_base: f64,
    color: Vector3<f64>,
    z: f64,
}

impl ProjGrad {
    fn zero() -> Self {
        ProjGrad {
            mu_i: Vector2::zeros(),
            conic: Matrix2::zeros(),
            alpha_base: 0.0,
            color: Vector3::zeros(),
            z: 0.0,
        }
    }

    fn add(&mut self, o: &ProjGrad) {
        self.mu_i += o.mu_i;
        self.conic += o.conic;
        self.alpha_base += o.alpha_base;
        self.color += o.color;
        self.z += o.z;
    }
}

struct TileBackward {
    tile: usize,
    /// Parallel to the tile's Gaussian list.
    grads: Vec<ProjGrad>,
}

#[allow(clippy::too_many_arguments)]
fn backward_tile(
    tile: usize,
    grid: &TileGrid,
    lists: &[Vec<u32>],
    out: &RenderOutput,
    grad_color: &[f64],
    grad_depth: &[f64],
    grad_alpha: &[f64],
    width: usize,
    height: usize,
) -> TileBackward {
    let list = &lists[tile];
    let mut grads = vec![ProjGrad::zero(); list.len()];
    // Position of each projected index within this tile's list (dense
    // lookup; projected counts are small enough that a table beats hashing).
    let mut slot_of = vec![u32::MAX; out.projected.len()];
    for (slot, &pi) in list.iter().enumerate() {
        slot_of[pi as usize] = slot as u32;
    }

    let (x0, y0, x1, y1) = grid.bounds(tile, width, height);
    // Scratch reused across pixels: (entry index, alpha, gauss value, dx, dy).
    let mut scratch: Vec<(u32, f64, f64, f64, f64)> = Vec::new();
    for y in y0..y1 {
        for x in x0..x1 {
            let pix = y * width + x;
            let taken = out.contributors(x, y);
            if taken.is_empty() {
                continue;
            }
            let gc = Vector3::new(
                grad_color[pix * 3],
                grad_color[pix * 3 + 1],
                grad_color[pix * 3 + 2],
            );
            let gd = grad_depth[pix];
            let ga = grad_alpha[pix];
            if gc == Vector3::zeros() && gd == 0.0 && ga == 0.0 {
                continue;
            }

            // Replay alphas in compositing order.
            scratch.clear();
            let (px, py) = (x as f64, y as f64);
            for &pi in taken {
                let p = &out.projected[pi as usize];
                let dx = px - p.mu_i.x;
                let dy = py - p.mu_i.y;
                let power = -0.5
                    * (p.conic[(0, 0)] * dx * dx
                        + (p.conic[(0, 1)] + p.conic[(1, 0)]) * dx * dy
                        + p.conic[(1, 1)] * dy * dy);
                let alpha = p.alpha_base * power.exp();
                scratch.push((pi, alpha, power.exp(), dx, dy));
            }

            // Prefix transmittances, then reverse suffix accumulation.
            let mut transmittances = Vec::with_capacity(scratch.len());
            let mut t = 1.0;
            for &(_, alpha, _, _, _) in scratch.iter() {
                transmittances.push(t);
                t *= 1.0 - alpha;
            }
            let t_end = t;
            // Suffix sums start from the background contribution; the
            // accumulated-opacity channel has no background term.
            let mut suffix_c: Vector3<f64> = t_end * out.background;
            let mut suffix_d: f64 = 0.0;
            let mut suffix_a: f64 = 0.0;
            for i in (0..scratch.len()).rev() {
                let (pi, alpha, gauss, dx, dy) = scratch[i];
                let p = &out.projected[pi as usize];
                let t_i = transmittances[i];
                let w_i = alpha * t_i;

                let d_alpha = t_i * (gc.dot(&p.color) + gd * p.z + ga)
                    - (gc.dot(&suffix_c) + gd * suffix_d + ga * suffix_a) / (1.0 - alpha);
                let g = &mut grads[slot_of[pi as usize] as usize];
                g.color += w_i * gc;
                g.z += w_i * gd;
                g.alpha_base += d_alpha * gauss;

                let d_gauss = d_alpha * p.alpha_base;
                // d gauss / d delta = -gauss * conic * delta
                let cd_x = p.conic[(0, 0)] * dx + 0.5 * (p.conic[(0, 1)] + p.conic[(1, 0)]) * dy;
                let cd_y = p.conic[(1, 1)] * dy + 0.5 * (p.conic[(0, 1)] + p.conic[(1, 0)]) * dx;
                let scale = d_gauss * gauss;
                g.mu_i.x += scale * cd_x;
                g.mu_i.y += scale * cd_y;
                // d gauss / d conic = -0.5 * gauss * delta deltaᵀ
                let half = -0.5 * scale;
                g.conic[(0, 0)] += half * dx * dx;
                g.conic[(0, 1)] += half * dx * dy;
                g.conic[(1, 0)] += half * dy * dx;
                g.conic[(1, 1)] += half * dy * dy;

                suffix_c += w_i * p.color;
                suffix_d += w_i * p.z;
                suffix_a += w_i;
            }
        }
    }
    TileBackward { tile, grads }
}

/// Derivatives of the rotation matrix of a unit quaternion (w, x, y, z) with
/// respect to each component, treating components as independent.
fn rotation_matrix_derivatives(w: f64, x: f64, y: f64, z: f64) -> [Matrix3<f64>; 4] {
    [
        2.0 * Matrix3::new(0.0, -z, y, z, 0.0, -x, -y, x, 0.0),
        2.0 * Matrix3::new(0.0, y, z, y, -2.0 * x, -w, z, w, -2.0 * x),
        2.0 * Matrix3::new(-2.0 * y, x, w, x, 0.0, z, -w, z, -2.0 * y),
        2.0 * Matrix3::new(-2.0 * z, -w, x, w, -2.0 * z, y, x, y, 0.0),
    ]
}

/// Exact analytic gradients of `sum(grad_color ⊙ color) + sum(grad_depth ⊙
/// depth) + sum(grad_alpha ⊙ alpha)` with respect to all map parameters and
/// the pose left tangent.
///
/// `grad_color` is H·W·3, `grad_depth` and `grad_alpha` H·W, all row-major,
/// matching the layout of the rendered images.
pub fn render_backward(
    out: &RenderOutput,
    map: &GaussianMap,
    grad_color: &[f64],
    grad_depth: &[f64],
    grad_alpha: &[f64],
) -> MapGradients {
    assert_eq!(grad_color.len(), out.width * out.height * 3);
    assert_eq!(grad_depth.len(), out.width * out.height);
    assert_eq!(grad_alpha.len(), out.width * out.height);

    let (width, height) = (out.width, out.height);
    let grid = TileGrid::new(width, height, out.settings.tile_size);
    let lists = build_tile_lists(&grid, &out.projected, width, height);

    // Stage 1: image-plane gradients per projected Gaussian, merged in tile
    // order for run-to-run identical sums.
    let mut pg = vec![ProjGrad::zero(); out.projected.len()];
    for_each_tile(
        grid.count(),
        out.settings.threads,
        |tile| {
            backward_tile(
                tile, &grid, &lists, out, grad_color, grad_depth, grad_alpha, width, height,
            )
        },
        |tb: TileBackward| {
            for (slot, &pi) in lists[tb.tile].iter().enumerate() {
                pg[pi as usize].add(&tb.grads[slot]);
            }
        },
    );

    // Stage 2: chain from image-plane quantities to world parameters and the
    // pose tangent.
    let mut grads = MapGradients::zeros(map.len());
    let k = &out.intrinsics;
    let w_rot = out.pose.rotation_matrix();

    for (p, g) in out.projected.iter().zip(&pg) {
        if g.mu_i == Vector2::zeros()
            && g.conic == Matrix2::zeros()
            && g.alpha_base == 0.0
            && g.color == Vector3::zeros()
            && g.z == 0.0
        {
            continue;
        }
        let gauss = &map.gaussians[p.index];

        // color, opacity
        grads.color[p.index] += g.color;
        let ab = p.alpha_base;
        grads.opacity_logit[p.index] += g.alpha_base * ab * (1.0 - ab);

        // conic -> floored covariance -> raw covariance (floor is additive)
        let d_sigma = -(p.conic * g.conic * p.conic);

        // sigma_raw = J M Jᵀ with M = W Σ_w Wᵀ
        let j = projection_jacobian(k, &p.p_cam);
        let sigma_w = gauss.covariance();
        let m = w_rot * sigma_w * w_rot.transpose();
        let d_j = (d_sigma + d_sigma.transpose()) * j * m;
        let d_m = j.transpose() * d_sigma * j;
        let d_sigma_w = w_rot.transpose() * d_m * w_rot;
        let d_w = (d_m + d_m.transpose()) * w_rot * sigma_w;

        // Σ_w = R D Rᵀ, D = diag(exp(2·log_scale))
        let r = gauss.rot.to_rotation_matrix().into_inner();
        let v = gauss.log_scale.map(|s| (2.0 * s).exp());
        let d_r = (d_sigma_w + d_sigma_w.transpose()) * r * Matrix3::from_diagonal(&v);
        let rt_gr = r.transpose() * d_sigma_w * r;
        for axis in 0..3 {
            grads.log_scale[p.index][axis] += rt_gr[(axis, axis)] * 2.0 * v[axis];
        }

        // Rotation: through dR/dq then projected onto the unit sphere.
        let q = gauss.rot.quaternion();
        let dr_dq = rotation_matrix_derivatives(q.w, q.i, q.j, q.k);
        let mut dq = Vector4::new(
            d_r.component_mul(&dr_dq[0]).sum(),
            d_r.component_mul(&dr_dq[1]).sum(),
            d_r.component_mul(&dr_dq[2]).sum(),
            d_r.component_mul(&dr_dq[3]).sum(),
        );
        let qv = Vector4::new(q.w, q.i, q.j, q.k);
        dq -= qv * qv.dot(&dq);
        grads.rot[p.index] += dq;

        // Camera-frame center gradient: through the pixel projection, the
        // projection Jacobian entries, and the composited depth.
        let mut d_pcam = j.transpose() * g.mu_i;
        let (fx, fy) = (k.fx, k.fy);
        let iz2 = 1.0 / (p.p_cam.z * p.p_cam.z);
        let iz3 = iz2 / p.p_cam.z;
        d_pcam.x += d_j[(0, 2)] * (-fx * iz2);
        d_pcam.y += d_j[(1, 2)] * (-fy * iz2);
        d_pcam.z += d_j[(0, 0)] * (-fx * iz2)
            + d_j[(1, 1)] * (-fy * iz2)
            + d_j[(0, 2)] * (2.0 * fx * p.p_cam.x * iz3)
            + d_j[(1, 2)] * (2.0 * fy * p.p_cam.y * iz3);
        d_pcam.z += g.z;

        grads.mu_w[p.index] += w_rot.transpose() * d_pcam;

        // Pose left tangent: p_cam shifts as rho + theta × p_cam, and the
        // rotation block of the pose feeds the covariance through W.
        let d_rho = d_pcam;
        let mut d_theta = p.p_cam.cross(&d_pcam);
        for axis in 0..3 {
            let mut e = Vector3::zeros();
            e[axis] = 1.0;
            d_theta[axis] += (skew(&e) * w_rot).component_mul(&d_w).sum();
        }
        grads.pose[0] += d_rho.x;
        grads.pose[1] += d_rho.y;
        grads.pose[2] += d_rho.z;
        grads.pose[3] += d_theta.x;
        grads.pose[4] += d_theta.y;
        grads.pose[5] += d_theta.z;
    }

    grads
}
