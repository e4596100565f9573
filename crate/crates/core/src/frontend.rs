//! Sparse patch-based visual odometry.
//!
//! The frontend keeps a patch graph: frames with pose estimates, square
//! patches carried by their center pixel and inverse depth, and edges that
//! pair a patch with a target frame. Each edge stores a corrected target
//! pixel and a per-axis confidence weight; bundle adjustment minimizes the
//! weighted reprojection error
//! `Σ ‖K T_j T_i⁻¹ K⁻¹ P − (P̄ + δ)‖²_ψ`
//! over pose tangents and inverse depths by Gauss-Newton with Levenberg
//! damping. A correction provider fills in δ and ψ; the bundled provider is
//! an oracle with configurable pixel noise and outlier injection, standing in
//! for a learned update operator.

use nalgebra::{DMatrix, DVector, Matrix2x3, Matrix2x6, Matrix3, Vector2, Vector6};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::color_image::ColorImage;
use crate::error::{Error, Result};
use crate::geom::{se3_exp, skew, Intrinsics, PatchHomogeneous, Pose};

/// Side length of the square patch extent, pixels. Only the center drives
/// bundle adjustment; the extent bounds where patch centers may be sampled.
pub const PATCH_SIDE: usize = 3;

#[derive(Clone, Copy, Debug)]
pub struct Frame {
    pub id: usize,
    pub pose: Pose,
    /// Fixed frames keep their pose constant (gauge anchor or slid out of
    /// the optimization window).
    pub fixed: bool,
    /// Frozen depths: patches hosted here stay constant. Set when the frame
    /// leaves the sliding window; the gauge frame keeps its depths free.
    pub depth_frozen: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct Patch {
    /// Host frame index within the graph.
    pub frame: usize,
    pub u: f64,
    pub v: f64,
    pub inv_depth: f64,
}

impl Patch {
    pub fn homogeneous(&self) -> PatchHomogeneous {
        PatchHomogeneous {
            u: self.u,
            v: self.v,
            d: self.inv_depth,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Edge {
    /// Global patch index.
    pub patch: usize,
    /// Target frame index within the graph.
    pub target: usize,
    /// Corrected target pixel `P̄ + δ` the residual is measured against.
    pub target_px: Vector2<f64>,
    /// Correction applied on top of the reprojection at correction time.
    pub delta: Vector2<f64>,
    /// Per-axis confidence weights, non-negative.
    pub psi: Vector2<f64>,
}

#[derive(Clone, Debug)]
pub struct PatchGraph {
    pub frames: Vec<Frame>,
    pub patches: Vec<Patch>,
    pub edges: Vec<Edge>,
    pub intrinsics: Intrinsics,
}

impl PatchGraph {
    pub fn new(intrinsics: Intrinsics) -> Self {
        PatchGraph {
            frames: Vec::new(),
            patches: Vec::new(),
            edges: Vec::new(),
            intrinsics,
        }
    }

    pub fn patches_of_frame(&self, frame: usize) -> impl Iterator<Item = (usize, &Patch)> {
        self.patches
            .iter()
            .enumerate()
            .filter(move |(_, p)| p.frame == frame)
    }

    /// Connect every patch to all other frames within `horizon` of its host,
    /// adding only edges that do not exist yet.
    pub fn connect_within_horizon(&mut self, horizon: usize) {
        let mut existing: std::collections::HashSet<(usize, usize)> =
            self.edges.iter().map(|e| (e.patch, e.target)).collect();
        for (k, patch) in self.patches.iter().enumerate() {
            for j in 0..self.frames.len() {
                if j == patch.frame {
                    continue;
                }
                if patch.frame.abs_diff(j) <= horizon && existing.insert((k, j)) {
                    self.edges.push(Edge {
                        patch: k,
                        target: j,
                        target_px: Vector2::zeros(),
                        delta: Vector2::zeros(),
                        psi: Vector2::zeros(),
                    });
                }
            }
        }
    }
}

/// Gradient-magnitude-weighted sampling of patch centers. Fails when the
/// image carries no gradient at all.
pub fn sample_patches(
    image: &ColorImage,
    frame: usize,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Patch>> {
    let margin = PATCH_SIDE / 2 + 1;
    let lum = image.luminance();
    let (w, h) = (image.width, image.height);
    let mut weights = Vec::with_capacity((w - 2 * margin) * (h - 2 * margin));
    let mut coords = Vec::with_capacity(weights.capacity());
    for y in margin..h - margin {
        for x in margin..w - margin {
            let gx = lum[y * w + x + 1] - lum[y * w + x - 1];
            let gy = lum[(y + 1) * w + x] - lum[(y - 1) * w + x];
            let mag = (gx * gx + gy * gy).sqrt();
            weights.push(mag);
            coords.push((x, y));
        }
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "frame {frame}: no extractable patches (image has zero gradient)"
        )));
    }
    let mut cumulative = Vec::with_capacity(weights.len());
    let mut acc = 0.0;
    for w in &weights {
        acc += w;
        cumulative.push(acc);
    }
    let mut out = Vec::with_capacity(count);
    let mut seen = std::collections::HashSet::new();
    let mut attempts = 0;
    while out.len() < count && attempts < count * 50 {
        attempts += 1;
        let r = rng.gen_range(0.0..total);
        let idx = cumulative.partition_point(|&c| c < r).min(coords.len() - 1);
        if !seen.insert(idx) {
            continue;
        }
        let (x, y) = coords[idx];
        out.push(Patch {
            frame,
            u: x as f64,
            v: y as f64,
            inv_depth: 1.0,
        });
    }
    if out.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "frame {frame}: sampling produced no patches"
        )));
    }
    Ok(out)
}

/// Build a graph over the given frames: sample patches per frame and connect
/// each patch to every frame within the horizon.
pub fn build_patch_graph(
    frames: &[(usize, Pose, &ColorImage)],
    intrinsics: Intrinsics,
    patches_per_frame: usize,
    edge_horizon: usize,
    rng: &mut ChaCha8Rng,
) -> Result<PatchGraph> {
    if frames.len() < 2 {
        return Err(Error::WindowTooSmall {
            need: 2,
            got: frames.len(),
        });
    }
    let mut graph = PatchGraph::new(intrinsics);
    for (fi, (id, pose, image)) in frames.iter().enumerate() {
        graph.frames.push(Frame {
            id: *id,
            pose: *pose,
            fixed: false,
            depth_frozen: false,
        });
        let patches = sample_patches(image, fi, patches_per_frame, rng)?;
        graph.patches.extend(patches);
    }
    graph.connect_within_horizon(edge_horizon);
    Ok(graph)
}

/// Ground-truth access the oracle corrections are built from.
pub trait TrackingOracle: Send + Sync {
    fn true_pose(&self, frame_id: usize) -> Pose;
    /// True scene depth under the pixel in the given frame, if any.
    fn true_depth_at(&self, frame_id: usize, u: f64, v: f64) -> Option<f64>;
}

/// Fills edge corrections; implementations own their randomness so repeated
/// runs with the same seed reproduce targets bit-exactly.
pub trait CorrectionProvider {
    fn update_corrections(&mut self, graph: &mut PatchGraph) -> Result<()>;
}

/// Oracle correction provider: targets are ground-truth reprojections plus
/// Gaussian pixel noise; a configurable fraction of edges become outliers
/// with large random offsets and near-zero confidence.
pub struct OracleCorrections<'a> {
    pub oracle: &'a dyn TrackingOracle,
    pub noise_px: f64,
    pub outlier_fraction: f64,
    pub rng: ChaCha8Rng,
}

impl<'a> OracleCorrections<'a> {
    pub fn new(
        oracle: &'a dyn TrackingOracle,
        noise_px: f64,
        outlier_fraction: f64,
        rng: ChaCha8Rng,
    ) -> Self {
        OracleCorrections {
            oracle,
            noise_px,
            outlier_fraction,
            rng,
        }
    }

    fn gaussian(&mut self) -> f64 {
        let u1: f64 = self.rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = self.rng.gen_range(0.0..std::f64::consts::TAU);
        (-2.0 * u1.ln()).sqrt() * u2.cos()
    }
}

impl CorrectionProvider for OracleCorrections<'_> {
    fn update_corrections(&mut self, graph: &mut PatchGraph) -> Result<()> {
        let k = graph.intrinsics;
        let mut dropped = Vec::new();
        for ei in 0..graph.edges.len() {
            let edge = graph.edges[ei];
            let patch = graph.patches[edge.patch];
            let host = graph.frames[patch.frame];
            let target = graph.frames[edge.target];

            // Ground-truth reprojection from true poses and true depth.
            let Some(depth) = self.oracle.true_depth_at(host.id, patch.u, patch.v) else {
                dropped.push(ei);
                continue;
            };
            let gt_patch = PatchHomogeneous {
                u: patch.u,
                v: patch.v,
                d: 1.0 / depth,
            };
            let pose_i_gt = self.oracle.true_pose(host.id);
            let pose_j_gt = self.oracle.true_pose(target.id);
            let gt = match crate::geom::reproject_patch(&gt_patch, &pose_i_gt, &pose_j_gt, &k) {
                Ok(r) => Vector2::new(r.u, r.v),
                Err(_) => {
                    dropped.push(ei);
                    continue;
                }
            };

            // Base reprojection under the current estimates defines delta.
            let base = match crate::geom::reproject_patch(
                &patch.homogeneous(),
                &host.pose,
                &target.pose,
                &k,
            ) {
                Ok(r) => Vector2::new(r.u, r.v),
                Err(_) => gt, // delta measured from the target itself
            };

            let edge = &mut graph.edges[ei];
            let is_outlier = self.rng.gen_range(0.0..1.0) < self.outlier_fraction;
            if is_outlier {
                let off = Vector2::new(
                    self.rng.gen_range(-50.0..50.0),
                    self.rng.gen_range(-50.0..50.0),
                );
                edge.target_px = gt + off;
                edge.delta = edge.target_px - base;
                edge.psi = Vector2::repeat(1e-6);
            } else {
                let noise = Vector2::new(self.gaussian(), self.gaussian()) * self.noise_px;
                edge.target_px = gt + noise;
                edge.delta = edge.target_px - base;
                let w = 1.0 / (self.noise_px * self.noise_px + 1e-6);
                edge.psi = Vector2::repeat(w);
            }
        }
        for ei in dropped.into_iter().rev() {
            graph.edges.swap_remove(ei);
        }
        Ok(())
    }
}

/// Weighted reprojection cost over all edges in front of the camera.
pub fn graph_cost(graph: &PatchGraph) -> f64 {
    let mut cost = 0.0;
    for edge in &graph.edges {
        let patch = graph.patches[edge.patch];
        let host = &graph.frames[patch.frame];
        let target = &graph.frames[edge.target];
        if let Ok(r) = crate::geom::reproject_patch(
            &patch.homogeneous(),
            &host.pose,
            &target.pose,
            &graph.intrinsics,
        ) {
            let ru = r.u - edge.target_px.x;
            let rv = r.v - edge.target_px.y;
            cost += edge.psi.x * ru * ru + edge.psi.y * rv * rv;
        }
    }
    cost
}

/// Residual and Jacobians of one edge at the current state.
struct EdgeLinearization {
    residual: Vector2<f64>,
    j_pose_i: Matrix2x6<f64>,
    j_pose_j: Matrix2x6<f64>,
    j_depth: Vector2<f64>,
}

fn linearize_edge(graph: &PatchGraph, edge: &Edge) -> Option<EdgeLinearization> {
    let k = &graph.intrinsics;
    let patch = graph.patches[edge.patch];
    let host = &graph.frames[patch.frame];
    let target = &graph.frames[edge.target];

    let rel = host.pose.relative_to(&target.pose);
    let r_rel = rel.rotation_matrix();
    let x_tilde = k.unproject(patch.u, patch.v);
    let d = patch.inv_depth;
    let q = r_rel * x_tilde + d * rel.translation;
    if q.z <= 0.0 {
        return None;
    }

    let (u, v) = (k.fx * q.x / q.z + k.cx, k.fy * q.y / q.z + k.cy);
    let residual = Vector2::new(u - edge.target_px.x, v - edge.target_px.y);

    let iz = 1.0 / q.z;
    let a = Matrix2x3::new(
        k.fx * iz,
        0.0,
        -k.fx * q.x * iz * iz,
        0.0,
        k.fy * iz,
        -k.fy * q.y * iz * iz,
    );

    // Left-increment tangents: q lives in the target frame, so a target
    // update moves q directly; a host update enters through the inverse.
    let dq_rho_j = Matrix3::identity() * d;
    let dq_theta_j = -skew(&q);
    let dq_rho_i = -d * r_rel;
    let dq_theta_i = r_rel * skew(&x_tilde);

    let mut j_pose_j = Matrix2x6::zeros();
    j_pose_j
        .fixed_view_mut::<2, 3>(0, 0)
        .copy_from(&(a * dq_rho_j));
    j_pose_j
        .fixed_view_mut::<2, 3>(0, 3)
        .copy_from(&(a * dq_theta_j));
    let mut j_pose_i = Matrix2x6::zeros();
    j_pose_i
        .fixed_view_mut::<2, 3>(0, 0)
        .copy_from(&(a * dq_rho_i));
    j_pose_i
        .fixed_view_mut::<2, 3>(0, 3)
        .copy_from(&(a * dq_theta_i));

    let j_depth = a * rel.translation;

    Some(EdgeLinearization {
        residual,
        j_pose_i,
        j_pose_j,
        j_depth,
    })
}

#[derive(Clone, Copy, Debug, Default)]
pub struct BaReport {
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations_run: usize,
    pub accepted_steps: usize,
}

/// Gauss-Newton with Levenberg damping over non-fixed poses and the inverse
/// depths of patches hosted in non-fixed frames. Inverse depths are
/// eliminated with a Schur complement. The cost never increases across
/// accepted steps; a step that fails to decrease the cost is rolled back and
/// retried with stronger damping.
pub fn bundle_adjust(
    graph: &mut PatchGraph,
    fixed_frames: usize,
    iterations: usize,
) -> Result<BaReport> {
    for (fi, frame) in graph.frames.iter_mut().enumerate() {
        if fi < fixed_frames {
            frame.fixed = true;
        }
    }
    if graph.frames.iter().all(|f| f.fixed) {
        return Err(Error::BundleAdjustment("no free frames".into()));
    }
    if graph.patches.iter().any(|p| p.inv_depth <= 0.0) {
        return Err(Error::BundleAdjustment("non-positive patch depth".into()));
    }

    // Variable layout.
    let pose_var: Vec<Option<usize>> = {
        let mut next = 0;
        graph
            .frames
            .iter()
            .map(|f| {
                if f.fixed {
                    None
                } else {
                    let v = next;
                    next += 1;
                    Some(v)
                }
            })
            .collect()
    };
    let n_poses = pose_var.iter().flatten().count();
    let depth_var: Vec<Option<usize>> = {
        let mut next = 0;
        graph
            .patches
            .iter()
            .map(|p| {
                if graph.frames[p.frame].depth_frozen {
                    None
                } else {
                    let v = next;
                    next += 1;
                    Some(v)
                }
            })
            .collect()
    };
    let n_depths = depth_var.iter().flatten().count();

    let mut report = BaReport {
        initial_cost: graph_cost(graph),
        final_cost: 0.0,
        iterations_run: 0,
        accepted_steps: 0,
    };
    let mut cost = report.initial_cost;
    let mut lambda = 1e-6;

    for _ in 0..iterations {
        report.iterations_run += 1;

        let np = 6 * n_poses;
        let mut h_pp = DMatrix::<f64>::zeros(np, np);
        let mut b_p = DVector::<f64>::zeros(np);
        let mut h_dd = vec![0.0; n_depths];
        let mut b_d = vec![0.0; n_depths];
        // Rows coupling each depth with the pose blocks.
        let mut h_pd: Vec<Vec<(usize, Vector6<f64>)>> = vec![Vec::new(); n_depths];

        for edge in &graph.edges {
            let Some(lin) = linearize_edge(graph, edge) else {
                continue;
            };
            let w = edge.psi;
            let patch = graph.patches[edge.patch];
            let vi = pose_var[patch.frame];
            let vj = pose_var[edge.target];
            let vd = depth_var[edge.patch];

            let weighted = |a: &Vector2<f64>, b: &Vector2<f64>| w.x * a.x * b.x + w.y * a.y * b.y;

            let blocks: [(Option<usize>, &Matrix2x6<f64>); 2] =
                [(vi, &lin.j_pose_i), (vj, &lin.j_pose_j)];
            for (va, ja) in blocks.iter() {
                let Some(va) = va else { continue };
                for c in 0..6 {
                    let col = Vector2::new(ja[(0, c)], ja[(1, c)]);
                    b_p[6 * va + c] += weighted(&col, &lin.residual);
                }
                for (vb, jb) in blocks.iter() {
                    let Some(vb) = vb else { continue };
                    for ca in 0..6 {
                        let col_a = Vector2::new(ja[(0, ca)], ja[(1, ca)]);
                        for cb in 0..6 {
                            let col_b = Vector2::new(jb[(0, cb)], jb[(1, cb)]);
                            h_pp[(6 * va + ca, 6 * vb + cb)] += weighted(&col_a, &col_b);
                        }
                    }
                }
            }

            if let Some(vd) = vd {
                h_dd[vd] += weighted(&lin.j_depth, &lin.j_depth);
                b_d[vd] += weighted(&lin.j_depth, &lin.residual);
                for (va, ja) in blocks.iter() {
                    let Some(va) = va else { continue };
                    let mut col6 = Vector6::zeros();
                    for c in 0..6 {
                        let col = Vector2::new(ja[(0, c)], ja[(1, c)]);
                        col6[c] = weighted(&col, &lin.j_depth);
                    }
                    h_pd[vd].push((*va, col6));
                }
            }
        }

        // Levenberg loop: retry the step with stronger damping on rejection.
        let mut accepted = false;
        for _attempt in 0..8 {
            let mut h_red = h_pp.clone();
            let mut b_red = b_p.clone();
            for i in 0..np {
                h_red[(i, i)] *= 1.0 + lambda;
                h_red[(i, i)] += 1e-12;
            }
            for vd in 0..n_depths {
                let hdd = h_dd[vd] * (1.0 + lambda) + 1e-12;
                for (va, ca) in &h_pd[vd] {
                    for (vb, cb) in &h_pd[vd] {
                        for ra in 0..6 {
                            for rb in 0..6 {
                                h_red[(6 * va + ra, 6 * vb + rb)] -= ca[ra] * cb[rb] / hdd;
                            }
                        }
                    }
                    for ra in 0..6 {
                        b_red[6 * va + ra] -= ca[ra] * b_d[vd] / hdd;
                    }
                }
            }

            let Some(delta_p) = h_red.clone().cholesky().map(|c| c.solve(&(-&b_red))) else {
                if std::env::var_os("MGS_BA_TRACE").is_some() {
                    eprintln!("  attempt lambda={lambda:.2e} cholesky failed");
                }
                lambda = (lambda * 10.0).min(1e8);
                continue;
            };
            if delta_p.iter().any(|x| !x.is_finite()) {
                lambda = (lambda * 10.0).min(1e8);
                continue;
            }

            // Back-substitute depths.
            let mut delta_d = vec![0.0; n_depths];
            for vd in 0..n_depths {
                let hdd = h_dd[vd] * (1.0 + lambda) + 1e-12;
                let mut rhs = -b_d[vd];
                for (va, ca) in &h_pd[vd] {
                    for ra in 0..6 {
                        rhs -= ca[ra] * delta_p[6 * va + ra];
                    }
                }
                delta_d[vd] = rhs / hdd;
            }

            // Trial state.
            let saved_frames = graph.frames.clone();
            let saved_patches = graph.patches.clone();
            for (fi, frame) in graph.frames.iter_mut().enumerate() {
                if let Some(va) = pose_var[fi] {
                    let xi = Vector6::from_fn(|r, _| delta_p[6 * va + r]);
                    frame.pose = se3_exp(&xi).compose(&frame.pose);
                }
            }
            for (pi, patch) in graph.patches.iter_mut().enumerate() {
                if let Some(vd) = depth_var[pi] {
                    patch.inv_depth = (patch.inv_depth + delta_d[vd]).max(1e-4);
                }
            }

            let new_cost = graph_cost(graph);
            if std::env::var_os("MGS_BA_TRACE").is_some() {
                eprintln!(
                    "  attempt lambda={lambda:.2e} |dp|={:.3e} cost {cost:.6e} -> {new_cost:.6e}",
                    delta_p.norm()
                );
            }
            if new_cost <= cost && new_cost.is_finite() {
                cost = new_cost;
                lambda = (lambda * 0.5).max(1e-10);
                accepted = true;
                report.accepted_steps += 1;
                break;
            }
            graph.frames = saved_frames;
            graph.patches = saved_patches;
            lambda = (lambda * 10.0).min(1e8);
        }

        if !accepted {
            // Persistent failure: keep the last valid state.
            break;
        }
    }

    report.final_cost = cost;
    Ok(report)
}

/// Configuration of the sliding-window odometry loop.
#[derive(Clone, Copy, Debug)]
pub struct FrontendConfig {
    pub patches_per_frame: usize,
    pub edge_horizon: usize,
    /// Frames older than this stay fixed.
    pub window: usize,
    pub ba_iterations_init: usize,
    pub ba_iterations_track: usize,
    /// Leading frames whose poses pin the gauge. One frame anchors the six
    /// rigid freedoms and leaves the monocular scale to the adjustment ring;
    /// two also pin scale (useful for experiments against metric truth).
    pub gauge_frames: usize,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        FrontendConfig {
            patches_per_frame: 24,
            edge_horizon: 3,
            window: 10,
            ba_iterations_init: 12,
            ba_iterations_track: 2,
            gauge_frames: 1,
        }
    }
}

/// Sliding-window odometry over a patch graph.
pub struct FrontendVo {
    pub graph: PatchGraph,
    pub config: FrontendConfig,
    rng: ChaCha8Rng,
}

impl FrontendVo {
    pub fn new(intrinsics: Intrinsics, config: FrontendConfig, rng: ChaCha8Rng) -> Self {
        FrontendVo {
            graph: PatchGraph::new(intrinsics),
            config,
            rng,
        }
    }

    pub fn frame_count(&self) -> usize {
        self.graph.frames.len()
    }

    pub fn poses(&self) -> Vec<(usize, Pose)> {
        self.graph.frames.iter().map(|f| (f.id, f.pose)).collect()
    }

    /// Constant-velocity initialization for the next frame.
    pub fn predict_next_pose(&self) -> Result<Pose> {
        let n = self.graph.frames.len();
        if n < 2 {
            return Err(Error::WindowTooSmall { need: 2, got: n });
        }
        let prev = self.graph.frames[n - 1].pose;
        let prev2 = self.graph.frames[n - 2].pose;
        let motion = prev.compose(&prev2.inverse());
        Ok(motion.compose(&prev))
    }

    /// Seed the graph with one frame at a given pose (initialization only).
    pub fn push_initial_frame(&mut self, id: usize, pose: Pose, image: &ColorImage) -> Result<()> {
        let fi = self.graph.frames.len();
        self.graph.frames.push(Frame {
            id,
            pose,
            fixed: false,
            depth_frozen: false,
        });
        let patches = sample_patches(image, fi, self.config.patches_per_frame, &mut self.rng)?;
        self.graph.patches.extend(patches);
        self.graph.connect_within_horizon(self.config.edge_horizon);
        Ok(())
    }

    /// Track one frame: constant-velocity initialization, patch sampling,
    /// correction refresh, and a short bundle adjustment over the sliding
    /// window. `depth_init` supplies inverse depths for the new patches
    /// (scale closure against the dense map); patches it declines fall back
    /// to the frame's median initialized value or 1.0.
    pub fn track_frame(
        &mut self,
        id: usize,
        image: &ColorImage,
        corrections: &mut dyn CorrectionProvider,
        depth_init: &mut dyn FnMut(&Pose, &[(f64, f64)]) -> Vec<Option<f64>>,
    ) -> Result<Pose> {
        let pose = self.predict_next_pose()?;
        let fi = self.graph.frames.len();
        self.graph.frames.push(Frame {
            id,
            pose,
            fixed: false,
            depth_frozen: false,
        });
        let mut patches = sample_patches(image, fi, self.config.patches_per_frame, &mut self.rng)?;

        let pixels: Vec<(f64, f64)> = patches.iter().map(|p| (p.u, p.v)).collect();
        let inits = depth_init(&pose, &pixels);
        let provided: Vec<f64> = inits.iter().flatten().copied().collect();
        let fallback = if provided.is_empty() {
            1.0
        } else {
            let mut sorted = provided.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            sorted[sorted.len() / 2]
        };
        for (patch, init) in patches.iter_mut().zip(&inits) {
            patch.inv_depth = init.unwrap_or(fallback).max(1e-4);
        }
        self.graph.patches.extend(patches);
        self.graph.connect_within_horizon(self.config.edge_horizon);

        // Freeze frames that slid out of the window; the gauge frames stay
        // fixed but keep their patch depths adjustable.
        let n = self.graph.frames.len();
        for (i, frame) in self.graph.frames.iter_mut().enumerate() {
            let out_of_window = i + self.config.window < n;
            frame.fixed = i < self.config.gauge_frames.max(1) || out_of_window;
            frame.depth_frozen = out_of_window;
        }

        corrections.update_corrections(&mut self.graph)?;
        let fixed = self.graph.frames.iter().filter(|f| f.fixed).count();
        // Fixed frames are a prefix by construction (frame 0 plus the oldest).
        bundle_adjust(&mut self.graph, fixed.max(1), self.config.ba_iterations_track)?;
        Ok(self.graph.frames[n - 1].pose)
    }
}
