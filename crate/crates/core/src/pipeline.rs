//! End-to-end orchestration: dataset or synthetic ingestion, initialization,
//! the track / keyframe / align / map loop, and artifact output.
//!
//! Two execution modes share all logic: `deterministic-single` interleaves
//! tracking and mapping on one thread in a fixed schedule; `parallel` runs a
//! frontend worker and a backend worker connected by a bounded queue with
//! backpressure, with map snapshots published copy-on-write for the scale
//! closure.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::mpsc::{sync_channel, Receiver, SyncSender};
use std::sync::{Arc, RwLock};

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backend::{
    initialize_system, optimize_window, select_keyframe, InitInputs, Keyframe, KeyframeWindow,
    OptimizerConfig, WindowOptimizeOptions, INIT_FRAMES,
};
use crate::color_image::ColorImage;
use crate::config::{PriorKind, RunConfig, ThreadingMode};
use crate::dataset::{load_tum_dataset, write_trajectory, TumDataset};
use crate::depth_prior::{
    DepthMap, DepthPriorProvider, GroundTruthNoisy, GroundTruthScaled, SceneDepthOracle,
    WindowFrame,
};
use crate::error::{Error, Result};
use crate::eval::{ate_rmse, completion_ratio, image_metrics, AlignMode, Trajectory};
use crate::frontend::{FrontendConfig, FrontendVo, OracleCorrections, TrackingOracle};
use crate::gaussian_map::GaussianMap;
use crate::geom::{Intrinsics, Pose};
use crate::losses::LossWeights;
use crate::rasterizer::{render, RasterSettings};
use crate::sdar::{align_prior_depth, backproject_and_seed, scale_closure, SparseDepthObservations};
use crate::synthetic::{generate_synthetic_scene, SyntheticScene};

/// Frames held back for the constant-velocity model; the frame this many
/// steps behind the tracker is the mapping candidate.
pub const KEYFRAME_LAG: usize = 3;

/// A TUM dataset wrapped with caches and oracle implementations.
pub struct TumScene {
    pub dataset: TumDataset,
    pub intrinsics: Intrinsics,
    poses_cw: Vec<Pose>,
    images: RwLock<BTreeMap<usize, Arc<ColorImage>>>,
    depths: RwLock<BTreeMap<usize, Arc<DepthMap>>>,
}

impl TumScene {
    pub fn open(root: &Path, fov_deg: f64, max_frames: usize) -> Result<Self> {
        let mut dataset = load_tum_dataset(root)?;
        if dataset.frames.is_empty() {
            return Err(Error::InvalidArgument("dataset has no frames".into()));
        }
        dataset.frames.truncate(max_frames.max(1));
        let mut poses_cw = Vec::with_capacity(dataset.frames.len());
        for f in &dataset.frames {
            let Some(gt) = f.gt_pose else {
                return Err(Error::InvalidArgument(format!(
                    "frame at t={} lacks associated ground truth",
                    f.timestamp
                )));
            };
            poses_cw.push(gt.inverse());
        }
        let first = ColorImage::load_png(&dataset.frames[0].rgb_path)?;
        let f = 0.5 * first.width as f64 / (0.5 * fov_deg.to_radians()).tan();
        let intrinsics = Intrinsics::new(
            f,
            f,
            (first.width / 2) as f64,
            (first.height / 2) as f64,
            first.width,
            first.height,
        )?;
        let scene = TumScene {
            dataset,
            intrinsics,
            poses_cw,
            images: RwLock::new(BTreeMap::new()),
            depths: RwLock::new(BTreeMap::new()),
        };
        scene.images.write().unwrap().insert(0, Arc::new(first));
        Ok(scene)
    }

    pub fn image(&self, frame_id: usize) -> Result<Arc<ColorImage>> {
        if let Some(img) = self.images.read().unwrap().get(&frame_id) {
            return Ok(img.clone());
        }
        let img = Arc::new(ColorImage::load_png(
            &self.dataset.frames[frame_id].rgb_path,
        )?);
        self.images
            .write()
            .unwrap()
            .insert(frame_id, img.clone());
        Ok(img)
    }

    pub fn depth(&self, frame_id: usize) -> Result<Arc<DepthMap>> {
        if let Some(d) = self.depths.read().unwrap().get(&frame_id) {
            return Ok(d.clone());
        }
        let Some(path) = &self.dataset.frames[frame_id].depth_path else {
            return Err(Error::MissingFile(
                self.dataset.root.join("depth.txt (needed for oracle depth)"),
            ));
        };
        let d = Arc::new(DepthMap::load_png(path)?);
        self.depths.write().unwrap().insert(frame_id, d.clone());
        Ok(d)
    }
}

impl TrackingOracle for TumScene {
    fn true_pose(&self, frame_id: usize) -> Pose {
        self.poses_cw[frame_id]
    }

    fn true_depth_at(&self, frame_id: usize, u: f64, v: f64) -> Option<f64> {
        self.depth(frame_id).ok()?.sample_bilinear(u, v)
    }
}

impl SceneDepthOracle for TumScene {
    fn true_depth(&self, frame_id: usize) -> DepthMap {
        match self.depth(frame_id) {
            Ok(d) => (*d).clone(),
            // No dataset depth: empty map (providers then yield no prior).
            Err(_) => DepthMap::new(
                self.intrinsics.width,
                self.intrinsics.height,
                vec![0.0; self.intrinsics.width * self.intrinsics.height],
                vec![false; self.intrinsics.width * self.intrinsics.height],
            )
            .unwrap(),
        }
    }
}

/// The frame stream a run consumes: synthetic preset or TUM dataset.
pub enum SceneSource {
    Synthetic(Arc<SyntheticScene>),
    Tum(Arc<TumScene>),
}

impl SceneSource {
    pub fn build(cfg: &RunConfig) -> Result<Self> {
        match &cfg.dataset {
            Some(root) => Ok(SceneSource::Tum(Arc::new(TumScene::open(
                root,
                cfg.fov_deg,
                cfg.frames,
            )?))),
            None => {
                let scene = generate_synthetic_scene(
                    &cfg.preset,
                    cfg.seed,
                    cfg.intrinsics()?,
                    cfg.frames,
                )?;
                Ok(SceneSource::Synthetic(Arc::new(scene)))
            }
        }
    }

    pub fn intrinsics(&self) -> Intrinsics {
        match self {
            SceneSource::Synthetic(s) => s.intrinsics,
            SceneSource::Tum(s) => s.intrinsics,
        }
    }

    pub fn frame_count(&self) -> usize {
        match self {
            SceneSource::Synthetic(s) => s.frame_count(),
            SceneSource::Tum(s) => s.dataset.frames.len(),
        }
    }

    pub fn timestamp(&self, frame_id: usize) -> f64 {
        match self {
            SceneSource::Synthetic(s) => s.timestamps[frame_id],
            SceneSource::Tum(s) => s.dataset.frames[frame_id].timestamp,
        }
    }

    pub fn image(&self, frame_id: usize) -> Result<Arc<ColorImage>> {
        match self {
            SceneSource::Synthetic(s) => Ok(Arc::new(s.frame(frame_id).0)),
            SceneSource::Tum(s) => s.image(frame_id),
        }
    }

    pub fn gt_depth(&self, frame_id: usize) -> Option<DepthMap> {
        match self {
            SceneSource::Synthetic(s) => Some(s.frame(frame_id).1),
            SceneSource::Tum(s) => s.depth(frame_id).ok().map(|d| (*d).clone()),
        }
    }

    pub fn gt_trajectory(&self) -> Trajectory {
        match self {
            SceneSource::Synthetic(s) => s.gt_trajectory(),
            SceneSource::Tum(s) => {
                let mut t = Trajectory::new();
                for (i, f) in s.dataset.frames.iter().enumerate() {
                    let _ = t.push(f.timestamp, s.poses_cw[i].inverse());
                }
                t
            }
        }
    }

    pub fn tracking_oracle(&self) -> Arc<dyn TrackingOracle> {
        match self {
            SceneSource::Synthetic(s) => s.clone(),
            SceneSource::Tum(s) => s.clone(),
        }
    }

    pub fn depth_oracle(&self) -> Arc<dyn SceneDepthOracle> {
        match self {
            SceneSource::Synthetic(s) => s.clone(),
            SceneSource::Tum(s) => s.clone(),
        }
    }
}

fn build_prior_provider(cfg: &RunConfig) -> Arc<dyn DepthPriorProvider> {
    match cfg.prior {
        PriorKind::Noisy => Arc::new(GroundTruthNoisy::new(
            cfg.prior_sigma_noise,
            (cfg.prior_bias_lo, cfg.prior_bias_hi),
            cfg.seed.wrapping_add(3),
        )),
        // Dataset depth is exposed through the oracle, so a unit-scaled
        // provider passes it through unchanged.
        PriorKind::Scaled | PriorKind::Dataset => Arc::new(GroundTruthScaled {
            scale: cfg.prior_scale,
        }),
    }
}

/// One candidate handed from tracking to mapping: the frame that just became
/// 4th-most-recent, with its refreshed pose, sparse depths, and the prior
/// estimation window.
pub struct MappingCandidate {
    pub frame_id: usize,
    pub timestamp: f64,
    pub pose: Pose,
    pub image: Arc<ColorImage>,
    pub sparse_pixels: Vec<(f64, f64)>,
    pub sparse_depths: Vec<f64>,
    pub prior_window: Vec<WindowFrame>,
}

/// Mapping-side state shared by both threading modes.
struct BackendState {
    map: GaussianMap,
    window: KeyframeWindow,
    refined_poses: BTreeMap<usize, Pose>,
    keyframe_ids: Vec<usize>,
    scale_hint: f64,
    maintenance_counter: usize,
    rng: ChaCha8Rng,
}

struct BackendDeps {
    k: Intrinsics,
    weights: LossWeights,
    settings: RasterSettings,
    opt_cfg: OptimizerConfig,
    cfg: RunConfig,
    provider: Arc<dyn DepthPriorProvider>,
    depth_oracle: Arc<dyn SceneDepthOracle>,
    background: Vector3<f64>,
}

impl BackendState {
    /// Keyframe decision plus, on acceptance, alignment, seeding, and window
    /// optimization.
    fn consider(&mut self, candidate: MappingCandidate, deps: &BackendDeps) -> Result<bool> {
        let accepted = select_keyframe(
            &self.window,
            &self.map,
            &candidate.pose,
            &deps.k,
            deps.cfg.iou_threshold,
            &deps.settings,
        );
        if !accepted {
            return Ok(false);
        }

        let prior = deps
            .provider
            .provide(&candidate.prior_window, deps.depth_oracle.as_ref())?;
        if prior.valid_count() == 0 {
            return Err(Error::InvalidArgument(format!(
                "no prior depth available for frame {}",
                candidate.frame_id
            )));
        }

        let aligned = if deps.cfg.sdar_enabled {
            let sparse = SparseDepthObservations::new(
                candidate.sparse_pixels.clone(),
                candidate.sparse_depths.clone(),
            )?;
            align_prior_depth(&prior, &sparse)?.depth
        } else {
            prior
        };

        // Depth-consistency cull: splats rendering clearly in front of the
        // freshly aligned surface from this viewpoint are stale layers from
        // earlier (noisier) alignments; remove them before re-seeding.
        {
            let mut keep = Vec::with_capacity(self.map.len());
            for g in &self.map.gaussians {
                let retain = match crate::rasterizer::project_gaussian(
                    g,
                    &candidate.pose,
                    &deps.k,
                    &deps.settings,
                ) {
                    Some(p) if deps.k.contains(p.mu_i.x, p.mu_i.y) => {
                        match aligned.sample_nearest(p.mu_i.x, p.mu_i.y) {
                            Some(surface) => p.z > 0.7 * surface,
                            None => true,
                        }
                    }
                    _ => true,
                };
                keep.push(retain);
            }
            let mut idx = 0;
            self.map.gaussians.retain(|_| {
                let k = keep[idx];
                idx += 1;
                k
            });
            self.map.grad_accum = vec![Default::default(); self.map.gaussians.len()];
        }

        // Seed the full aligned depth; the aggressive opacity prune keeps
        // redundant splats in check.
        if self.map.len() < deps.cfg.max_gaussians {
            backproject_and_seed(
                &aligned,
                &candidate.image,
                &candidate.pose,
                &deps.k,
                &mut self.map,
                self.scale_hint,
            )?;
        }

        self.window.push(Keyframe {
            frame_id: candidate.frame_id,
            pose: candidate.pose,
            image: (*candidate.image).clone(),
            prior: aligned,
        });
        self.keyframe_ids.push(candidate.frame_id);

        let options = WindowOptimizeOptions {
            iterations: deps.cfg.mapping_iterations,
            densify_every: Some(deps.cfg.densify_every),
            grad_threshold: deps.cfg.grad_threshold,
            opacity_threshold: deps.cfg.opacity_threshold,
            scale_hint: self.scale_hint,
            max_gaussians: deps.cfg.max_gaussians,
            ..Default::default()
        };
        optimize_window(
            &mut self.map,
            &mut self.window,
            &deps.k,
            &deps.weights,
            deps.background,
            &deps.settings,
            &deps.opt_cfg,
            &options,
            &mut self.maintenance_counter,
            &mut self.rng,
        )?;
        for entry in &self.window.entries {
            self.refined_poses.insert(entry.frame_id, entry.pose);
        }
        Ok(true)
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunSummary {
    pub output_dir: PathBuf,
    pub frames_tracked: usize,
    pub keyframes: usize,
    pub gaussians: usize,
    pub ate_full_cm: f64,
    pub ate_keyframes_cm: f64,
    pub mean_psnr_db: f64,
    pub mean_ssim: f64,
    pub mean_depth_l1_cm: Option<f64>,
    pub completion_ratio: Option<f64>,
}

impl RunSummary {
    pub fn render_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("frames_tracked={}\n", self.frames_tracked));
        s.push_str(&format!("keyframes={}\n", self.keyframes));
        s.push_str(&format!("gaussians={}\n", self.gaussians));
        s.push_str(&format!("ate_full_cm={:.6}\n", self.ate_full_cm));
        s.push_str(&format!("ate_keyframes_cm={:.6}\n", self.ate_keyframes_cm));
        s.push_str(&format!("mean_psnr_db={:.4}\n", self.mean_psnr_db));
        s.push_str(&format!("mean_ssim={:.6}\n", self.mean_ssim));
        if let Some(d) = self.mean_depth_l1_cm {
            s.push_str(&format!("mean_depth_l1_cm={d:.4}\n"));
        }
        if let Some(c) = self.completion_ratio {
            s.push_str(&format!("completion_ratio={c:.4}\n"));
        }
        s
    }
}

fn raster_settings(cfg: &RunConfig) -> RasterSettings {
    RasterSettings {
        threads: match cfg.threading {
            // Pinned worker count keeps two runs bit-identical.
            ThreadingMode::DeterministicSingle => 2,
            ThreadingMode::Parallel => std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(2),
        },
        ..Default::default()
    }
}

/// Background color for every render in the pipeline.
const BACKGROUND: Vector3<f64> = Vector3::new(0.0, 0.0, 0.0);

/// Run the full system per the configuration; writes all artifacts into
/// `cfg.output` and returns the summary.
pub fn run_pipeline(cfg: &RunConfig) -> Result<RunSummary> {
    let scene = Arc::new(SceneSource::build(cfg)?);
    std::fs::create_dir_all(&cfg.output).map_err(|e| Error::io(&cfg.output, e))?;
    cfg.save(&cfg.output.join("config.cfg"))?;

    let k = scene.intrinsics();
    let total_frames = scene.frame_count().min(cfg.frames);
    if total_frames < INIT_FRAMES + KEYFRAME_LAG + 1 {
        return Err(Error::WindowTooSmall {
            need: INIT_FRAMES + KEYFRAME_LAG + 1,
            got: total_frames,
        });
    }

    let settings = raster_settings(cfg);
    let weights = cfg.loss_weights();
    let opt_cfg = OptimizerConfig::default();
    let frontend_cfg = FrontendConfig {
        patches_per_frame: cfg.patches_per_frame,
        edge_horizon: cfg.edge_horizon,
        window: cfg.frontend_window,
        ba_iterations_init: cfg.ba_iterations_init,
        ba_iterations_track: cfg.ba_iterations_track,
        gauge_frames: 1,
    };
    let provider = build_prior_provider(cfg);
    let tracking_oracle = scene.tracking_oracle();
    let depth_oracle = scene.depth_oracle();

    // Initialization over the first frames.
    let init_images: Vec<Arc<ColorImage>> = (0..INIT_FRAMES)
        .map(|i| scene.image(i))
        .collect::<Result<_>>()?;
    let init_frames: Vec<(usize, &ColorImage)> = init_images
        .iter()
        .enumerate()
        .map(|(i, img)| (i, img.as_ref()))
        .collect();
    let mut corrections = OracleCorrections::new(
        tracking_oracle.as_ref(),
        cfg.correction_noise_px,
        cfg.outlier_fraction,
        ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2)),
    );
    let init = initialize_system(InitInputs {
        frames: &init_frames,
        intrinsics: k,
        corrections: &mut corrections,
        prior_provider: provider.as_ref(),
        depth_oracle: depth_oracle.as_ref(),
        frontend_config: frontend_cfg,
        sdar_enabled: cfg.sdar_enabled,
        rng: ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1)),
    })?;

    let mut frontend = init.frontend;
    let mut backend = BackendState {
        map: init.map,
        window: KeyframeWindow::new(cfg.mapping_window),
        refined_poses: BTreeMap::new(),
        keyframe_ids: vec![init.first_keyframe.frame_id],
        scale_hint: init.scale_hint,
        maintenance_counter: 0,
        rng: ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(4)),
    };
    backend.window.push(init.first_keyframe);
    let deps = BackendDeps {
        k,
        weights,
        settings,
        opt_cfg,
        cfg: cfg.clone(),
        provider,
        depth_oracle,
        background: BACKGROUND,
    };
    // Refine the initial map against the first keyframe.
    {
        let options = WindowOptimizeOptions {
            iterations: deps.cfg.mapping_iterations,
            densify_every: Some(deps.cfg.densify_every),
            grad_threshold: deps.cfg.grad_threshold,
            opacity_threshold: deps.cfg.opacity_threshold,
            scale_hint: backend.scale_hint,
            max_gaussians: deps.cfg.max_gaussians,
            ..Default::default()
        };
        optimize_window(
            &mut backend.map,
            &mut backend.window,
            &deps.k,
            &deps.weights,
            deps.background,
            &deps.settings,
            &deps.opt_cfg,
            &options,
            &mut backend.maintenance_counter,
            &mut backend.rng,
        )?;
        for entry in &backend.window.entries {
            backend.refined_poses.insert(entry.frame_id, entry.pose);
        }
    }

    // Map snapshots for the scale closure: copy-on-write publication.
    let map_snapshot: Arc<RwLock<Arc<GaussianMap>>> =
        Arc::new(RwLock::new(Arc::new(backend.map.clone())));

    let build_candidate = |frontend: &FrontendVo, graph_index: usize| -> Result<MappingCandidate> {
        let frame = &frontend.graph.frames[graph_index];
        let mut sparse_pixels = Vec::new();
        let mut sparse_depths = Vec::new();
        for (_, patch) in frontend.graph.patches_of_frame(graph_index) {
            sparse_pixels.push((patch.u, patch.v));
            sparse_depths.push(1.0 / patch.inv_depth);
        }
        // Prior window: the candidate as reference plus up to 7 previous
        // frames from the graph.
        let mut prior_window = vec![WindowFrame {
            frame_id: frame.id,
            pose: frame.pose,
        }];
        let mut back = graph_index;
        while prior_window.len() < INIT_FRAMES && back > 0 {
            back -= 1;
            let f = &frontend.graph.frames[back];
            prior_window.push(WindowFrame {
                frame_id: f.id,
                pose: f.pose,
            });
        }
        Ok(MappingCandidate {
            frame_id: frame.id,
            timestamp: scene.timestamp(frame.id),
            pose: frame.pose,
            image: scene.image(frame.id)?,
            sparse_pixels,
            sparse_depths,
            prior_window,
        })
    };

    let mut frontend_poses: BTreeMap<usize, Pose> = BTreeMap::new();
    for f in &frontend.graph.frames {
        frontend_poses.insert(f.id, f.pose);
    }

    let timing = std::env::var_os("MGS_TIMING").is_some();
    let mut t_track = 0.0f64;
    let mut t_backend = 0.0f64;
    match cfg.threading {
        ThreadingMode::DeterministicSingle => {
            for frame_id in INIT_FRAMES..total_frames {
                let image = scene.image(frame_id)?;
                let snapshot = map_snapshot.read().unwrap().clone();
                let sdar_on = cfg.sdar_enabled;
                let mut depth_init = |pose: &Pose, pixels: &[(f64, f64)]| {
                    if !sdar_on || snapshot.is_empty() {
                        return vec![None; pixels.len()];
                    }
                    scale_closure(&snapshot, pose, &k, pixels, &settings)
                        .into_iter()
                        .map(Some)
                        .collect()
                };
                let t0 = std::time::Instant::now();
                let pose =
                    frontend.track_frame(frame_id, &image, &mut corrections, &mut depth_init)?;
                t_track += t0.elapsed().as_secs_f64();
                frontend_poses.insert(frame_id, pose);
                // Window frames get re-optimized each track; refresh them.
                for f in &frontend.graph.frames {
                    frontend_poses.insert(f.id, f.pose);
                }

                // The frame KEYFRAME_LAG behind becomes the mapping candidate.
                if frame_id >= INIT_FRAMES + KEYFRAME_LAG {
                    let candidate_graph_index = frontend.graph.frames.len() - 1 - KEYFRAME_LAG;
                    let candidate = build_candidate(&frontend, candidate_graph_index)?;
                    let t1 = std::time::Instant::now();
                    if backend.consider(candidate, &deps)? {
                        *map_snapshot.write().unwrap() = Arc::new(backend.map.clone());
                    }
                    t_backend += t1.elapsed().as_secs_f64();
                }
            }
        }
        ThreadingMode::Parallel => {
            let (tx, rx): (SyncSender<MappingCandidate>, Receiver<MappingCandidate>) =
                sync_channel(4);
            let deps_thread = BackendDeps {
                cfg: cfg.clone(),
                ..BackendDeps {
                    k,
                    weights,
                    settings,
                    opt_cfg,
                    cfg: cfg.clone(),
                    provider: deps.provider.clone(),
                    depth_oracle: deps.depth_oracle.clone(),
                    background: BACKGROUND,
                }
            };
            let snapshot_writer = map_snapshot.clone();
            let mut backend_thread_state = backend;
            let handle = std::thread::spawn(move || -> Result<BackendState> {
                while let Ok(candidate) = rx.recv() {
                    if backend_thread_state.consider(candidate, &deps_thread)? {
                        *snapshot_writer.write().unwrap() =
                            Arc::new(backend_thread_state.map.clone());
                    }
                }
                Ok(backend_thread_state)
            });

            for frame_id in INIT_FRAMES..total_frames {
                let image = scene.image(frame_id)?;
                let snapshot = map_snapshot.read().unwrap().clone();
                let sdar_on = cfg.sdar_enabled;
                let mut depth_init = |pose: &Pose, pixels: &[(f64, f64)]| {
                    if !sdar_on || snapshot.is_empty() {
                        return vec![None; pixels.len()];
                    }
                    scale_closure(&snapshot, pose, &k, pixels, &settings)
                        .into_iter()
                        .map(Some)
                        .collect()
                };
                let pose =
                    frontend.track_frame(frame_id, &image, &mut corrections, &mut depth_init)?;
                frontend_poses.insert(frame_id, pose);
                for f in &frontend.graph.frames {
                    frontend_poses.insert(f.id, f.pose);
                }
                if frame_id >= INIT_FRAMES + KEYFRAME_LAG {
                    let candidate_graph_index = frontend.graph.frames.len() - 1 - KEYFRAME_LAG;
                    let candidate = build_candidate(&frontend, candidate_graph_index)?;
                    // Bounded queue: blocks when the mapper falls behind.
                    tx.send(candidate)
                        .map_err(|_| Error::InvalidArgument("backend worker died".into()))?;
                }
            }
            drop(tx);
            backend = handle
                .join()
                .map_err(|_| Error::InvalidArgument("backend worker panicked".into()))??;
        }
    }

    let t2 = std::time::Instant::now();
    let result = write_artifacts(cfg, &scene, &k, &frontend_poses, &backend, &settings);
    if timing {
        eprintln!(
            "timing: track {t_track:.1} s, backend {t_backend:.1} s, eval/artifacts {:.1} s",
            t2.elapsed().as_secs_f64()
        );
    }
    result
}

/// Final evaluation and artifact output.
fn write_artifacts(
    cfg: &RunConfig,
    scene: &SceneSource,
    k: &Intrinsics,
    frontend_poses: &BTreeMap<usize, Pose>,
    backend: &BackendState,
    settings: &RasterSettings,
) -> Result<RunSummary> {
    let out_dir = &cfg.output;
    let renders_dir = out_dir.join("renders");
    std::fs::create_dir_all(&renders_dir).map_err(|e| Error::io(&renders_dir, e))?;

    // Estimated trajectories: refined poses where mapped, frontend elsewhere.
    let mut full = Trajectory::new();
    let mut keyframes_only = Trajectory::new();
    let keyframe_set: std::collections::BTreeSet<usize> =
        backend.keyframe_ids.iter().copied().collect();
    for (&frame_id, pose_cw) in frontend_poses {
        let pose_cw = backend.refined_poses.get(&frame_id).unwrap_or(pose_cw);
        let t = scene.timestamp(frame_id);
        full.push(t, pose_cw.inverse())?;
        if keyframe_set.contains(&frame_id) {
            keyframes_only.push(t, pose_cw.inverse())?;
        }
    }
    write_trajectory(&out_dir.join("trajectory_full.txt"), &full)?;
    write_trajectory(&out_dir.join("trajectory_keyframes.txt"), &keyframes_only)?;

    let gt = scene.gt_trajectory();
    let align = if cfg.ate_sim3 {
        AlignMode::Sim3
    } else {
        AlignMode::Se3
    };
    let ate_full_cm = ate_rmse(&full, &gt, align)?;
    let ate_keyframes_cm = if keyframes_only.len() >= 3 {
        ate_rmse(&keyframes_only, &gt, align)?
    } else {
        f64::NAN
    };

    // Scale correction for monocular depth evaluation: the similarity fitted
    // on the trajectory maps estimated scale onto the reference scale.
    let eval_scale = {
        let est: Vec<_> = full.positions();
        let mut reference = Vec::with_capacity(est.len());
        let mut est_used = Vec::with_capacity(est.len());
        for (i, &t) in full.timestamps.iter().enumerate() {
            if let Some(j) = gt
                .timestamps
                .iter()
                .enumerate()
                .min_by(|a, b| {
                    (a.1 - t).abs().partial_cmp(&(b.1 - t).abs()).unwrap()
                })
                .map(|(j, _)| j)
            {
                if (gt.timestamps[j] - t).abs() <= crate::eval::ASSOCIATION_WINDOW_S {
                    reference.push(gt.poses[j].translation);
                    est_used.push(est[i]);
                }
            }
        }
        if cfg.ate_sim3 && est_used.len() >= 3 {
            crate::eval::umeyama_alignment(&est_used, &reference, true)
                .map(|(s, _, _)| s)
                .unwrap_or(1.0)
        } else {
            1.0
        }
    };

    // Per-frame rendering metrics on tracked non-keyframes.
    let mut csv = String::from("frame_id,psnr_db,ssim,depth_l1_cm\n");
    let mut sums = (0.0f64, 0.0f64, 0.0f64, 0usize, 0usize);
    let mut completion_acc = (0.0f64, 0usize);
    for (&frame_id, pose_cw) in frontend_poses {
        if keyframe_set.contains(&frame_id) {
            continue;
        }
        let gt_image = scene.image(frame_id)?;
        let rendered = render(&backend.map, pose_cw, k, BACKGROUND, settings);
        let gt_depth = scene.gt_depth(frame_id);
        // Alpha-normalized depth, carried to the reference scale by the
        // trajectory-fitted similarity (monocular evaluation convention).
        let scaled_depth: Vec<f64> = rendered
            .depth
            .iter()
            .zip(&rendered.alpha)
            .map(|(d, a)| if *a > 0.5 { d / a * eval_scale } else { 0.0 })
            .collect();
        let rendered_depth = DepthMap::new(
            k.width,
            k.height,
            scaled_depth,
            rendered.alpha.iter().map(|&a| a > 0.5).collect(),
        )?;
        let metrics = image_metrics(
            &rendered.color,
            &gt_image,
            gt_depth.as_ref().map(|g| (&rendered_depth, g)),
        )?;
        csv.push_str(&format!(
            "{frame_id},{:.4},{:.6},{}\n",
            metrics.psnr_db,
            metrics.ssim,
            metrics
                .depth_l1_cm
                .map(|d| format!("{d:.4}"))
                .unwrap_or_default()
        ));
        sums.0 += metrics.psnr_db;
        sums.1 += metrics.ssim;
        if let Some(d) = metrics.depth_l1_cm {
            sums.2 += d;
            sums.4 += 1;
        }
        sums.3 += 1;
        if let Some(gt_d) = &gt_depth {
            completion_acc.0 += completion_ratio(&rendered_depth, gt_d, 0.05)?;
            completion_acc.1 += 1;
        }
    }
    let n_eval = sums.3.max(1) as f64;
    let mean_psnr = sums.0 / n_eval;
    let mean_ssim = sums.1 / n_eval;
    let mean_depth_l1 = (sums.4 > 0).then(|| sums.2 / sums.4 as f64);
    let completion = (completion_acc.1 > 0).then(|| completion_acc.0 / completion_acc.1 as f64);
    csv.push_str(&format!(
        "mean,{:.4},{:.6},{}\n",
        mean_psnr,
        mean_ssim,
        mean_depth_l1.map(|d| format!("{d:.4}")).unwrap_or_default()
    ));
    std::fs::write(out_dir.join("metrics.csv"), csv)
        .map_err(|e| Error::io(out_dir.join("metrics.csv"), e))?;

    // Keyframe renders: color and colormapped depth.
    let depth_range = 2.0 * match scene {
        SceneSource::Synthetic(s) => s.extent(),
        SceneSource::Tum(_) => 5.0,
    };
    for &frame_id in &backend.keyframe_ids {
        let pose = backend
            .refined_poses
            .get(&frame_id)
            .or_else(|| frontend_poses.get(&frame_id))
            .copied()
            .unwrap_or_default();
        let rendered = render(&backend.map, &pose, k, BACKGROUND, settings);
        rendered
            .color
            .save_png(&renders_dir.join(format!("kf_{frame_id:05}_color.png")))?;
        depth_to_turbo(&rendered.depth, k.width, k.height, depth_range)
            .save_png(&renders_dir.join(format!("kf_{frame_id:05}_depth.png")))?;
    }

    backend.map.save_checkpoint(&out_dir.join("map.mgsm"))?;

    let summary = RunSummary {
        output_dir: out_dir.clone(),
        frames_tracked: frontend_poses.len(),
        keyframes: backend.keyframe_ids.len(),
        gaussians: backend.map.len(),
        ate_full_cm,
        ate_keyframes_cm,
        mean_psnr_db: mean_psnr,
        mean_ssim,
        mean_depth_l1_cm: mean_depth_l1,
        completion_ratio: completion,
    };
    std::fs::write(out_dir.join("summary.txt"), summary.render_text())
        .map_err(|e| Error::io(out_dir.join("summary.txt"), e))?;
    Ok(summary)
}

/// Fixed turbo-style colormap over [0, range]; zeros stay black.
pub fn depth_to_turbo(depth: &[f64], width: usize, height: usize, range: f64) -> ColorImage {
    let mut img = ColorImage::new(width, height);
    for y in 0..height {
        for x in 0..width {
            let d = depth[y * width + x];
            if d <= 0.0 {
                continue;
            }
            let t = (d / range).clamp(0.0, 1.0);
            let r = 0.13572138
                + t * (4.61539260
                    + t * (-42.66032258 + t * (132.13108234 + t * (-152.94239396 + t * 59.28637943))));
            let g = 0.09140261
                + t * (2.19418839
                    + t * (4.84296658 + t * (-14.18503333 + t * (4.27729857 + t * 2.82956604))));
            let b = 0.10667330
                + t * (12.64194608
                    + t * (-60.58204836 + t * (110.36276771 + t * (-89.90310912 + t * 27.34824973))));
            img.set(x, y, [r.clamp(0.0, 1.0), g.clamp(0.0, 1.0), b.clamp(0.0, 1.0)]);
        }
    }
    img
}

/// Write a synthetic scene to disk as a TUM-format dataset (rgb/, depth/,
/// rgb.txt, depth.txt, groundtruth.txt).
pub fn export_synthetic_scene(scene: &SyntheticScene, out_dir: &Path) -> Result<()> {
    let rgb_dir = out_dir.join("rgb");
    let depth_dir = out_dir.join("depth");
    std::fs::create_dir_all(&rgb_dir).map_err(|e| Error::io(&rgb_dir, e))?;
    std::fs::create_dir_all(&depth_dir).map_err(|e| Error::io(&depth_dir, e))?;

    let mut rgb_txt = String::from("# timestamp filename\n");
    let mut depth_txt = String::from("# timestamp filename\n");
    for i in 0..scene.frame_count() {
        let (image, depth) = scene.frame(i);
        let t = scene.timestamps[i];
        let rgb_name = format!("rgb/{t:.6}.png");
        let depth_name = format!("depth/{t:.6}.png");
        image.save_png(&out_dir.join(&rgb_name))?;
        depth.save_png(&out_dir.join(&depth_name))?;
        rgb_txt.push_str(&format!("{t:.6} {rgb_name}\n"));
        depth_txt.push_str(&format!("{t:.6} {depth_name}\n"));
    }
    std::fs::write(out_dir.join("rgb.txt"), rgb_txt)
        .map_err(|e| Error::io(out_dir.join("rgb.txt"), e))?;
    std::fs::write(out_dir.join("depth.txt"), depth_txt)
        .map_err(|e| Error::io(out_dir.join("depth.txt"), e))?;
    write_trajectory(&out_dir.join("groundtruth.txt"), &scene.gt_trajectory())?;
    Ok(())
}
