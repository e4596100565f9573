//! Run configuration: every knob of the pipeline with defaults, plus the
//! flat key=value file format written alongside run outputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ThreadingMode {
    /// Frontend and backend workers connected by a bounded queue.
    Parallel,
    /// One thread, fixed interleave; bit-reproducible runs.
    DeterministicSingle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PriorKind {
    /// Oracle depth with log-normal noise and a per-run scale bias.
    Noisy,
    /// Noiseless oracle depth under a fixed global scale.
    Scaled,
    /// Depth maps shipped with the dataset (TUM depth.txt).
    Dataset,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Synthetic preset name; ignored when `dataset` is set.
    pub preset: String,
    /// TUM dataset root; `None` runs the synthetic preset.
    pub dataset: Option<PathBuf>,
    pub output: PathBuf,
    pub seed: u64,
    pub threading: ThreadingMode,

    pub width: usize,
    pub height: usize,
    pub frames: usize,
    /// Horizontal field of view used to derive the focal length.
    pub fov_deg: f64,

    // Frontend.
    pub patches_per_frame: usize,
    pub edge_horizon: usize,
    pub frontend_window: usize,
    pub ba_iterations_init: usize,
    pub ba_iterations_track: usize,
    pub correction_noise_px: f64,
    pub outlier_fraction: f64,

    // Depth prior.
    pub prior: PriorKind,
    pub prior_sigma_noise: f64,
    pub prior_scale: f64,
    pub prior_bias_lo: f64,
    pub prior_bias_hi: f64,

    // Sparse-dense adjustment ring toggle (ablations).
    pub sdar_enabled: bool,

    // Mapping backend.
    pub iou_threshold: f64,
    pub mapping_window: usize,
    pub mapping_iterations: usize,
    pub densify_every: usize,
    pub grad_threshold: f64,
    pub opacity_threshold: f64,
    pub max_gaussians: usize,
    pub lambda_p: f64,
    pub lambda_g: f64,
    pub lambda_s: f64,
    pub lambda_i: f64,

    // Evaluation.
    pub ate_sim3: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            preset: "room-orbit".into(),
            dataset: None,
            output: PathBuf::from("out"),
            seed: 42,
            threading: ThreadingMode::DeterministicSingle,
            width: 120,
            height: 90,
            frames: 300,
            fov_deg: 60.0,
            patches_per_frame: 24,
            edge_horizon: 3,
            frontend_window: 10,
            ba_iterations_init: 12,
            ba_iterations_track: 2,
            correction_noise_px: 0.0,
            outlier_fraction: 0.0,
            prior: PriorKind::Noisy,
            prior_sigma_noise: 0.05,
            prior_scale: 1.0,
            prior_bias_lo: 0.5,
            prior_bias_hi: 2.0,
            sdar_enabled: true,
            iou_threshold: 0.9,
            mapping_window: 8,
            mapping_iterations: 150,
            densify_every: 100,
            grad_threshold: 0.0002,
            opacity_threshold: 0.65,
            max_gaussians: 50_000,
            lambda_p: 0.99,
            lambda_g: 0.01,
            lambda_s: 1.0,
            lambda_i: 1.0,
            ate_sim3: true,
        }
    }
}

impl RunConfig {
    /// Pinhole intrinsics derived from image size and field of view, with
    /// the principal point at the integer image center.
    pub fn intrinsics(&self) -> Result<crate::geom::Intrinsics> {
        let f = 0.5 * self.width as f64 / (0.5 * self.fov_deg.to_radians()).tan();
        crate::geom::Intrinsics::new(
            f,
            f,
            (self.width / 2) as f64,
            (self.height / 2) as f64,
            self.width,
            self.height,
        )
    }

    pub fn loss_weights(&self) -> crate::losses::LossWeights {
        crate::losses::LossWeights {
            lambda_p: self.lambda_p,
            lambda_g: self.lambda_g,
            lambda_s: self.lambda_s,
            lambda_i: self.lambda_i,
        }
    }

    /// Apply one `key=value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| Error::Config(format!("bad value for {what}: {value:?}"));
        macro_rules! num {
            ($field:ident) => {
                self.$field = value.parse().map_err(|_| bad(key))?
            };
        }
        match key {
            "preset" => self.preset = value.to_string(),
            "dataset" => {
                self.dataset = if value.is_empty() {
                    None
                } else {
                    Some(PathBuf::from(value))
                }
            }
            "output" => self.output = PathBuf::from(value),
            "seed" => num!(seed),
            "threading" => {
                self.threading = match value {
                    "parallel" => ThreadingMode::Parallel,
                    "deterministic-single" => ThreadingMode::DeterministicSingle,
                    _ => return Err(bad(key)),
                }
            }
            "width" => num!(width),
            "height" => num!(height),
            "frames" => num!(frames),
            "fov_deg" => num!(fov_deg),
            "patches_per_frame" => num!(patches_per_frame),
            "edge_horizon" => num!(edge_horizon),
            "frontend_window" => num!(frontend_window),
            "ba_iterations_init" => num!(ba_iterations_init),
            "ba_iterations_track" => num!(ba_iterations_track),
            "correction_noise_px" => num!(correction_noise_px),
            "outlier_fraction" => num!(outlier_fraction),
            "prior" => {
                self.prior = match value {
                    "noisy" => PriorKind::Noisy,
                    "scaled" => PriorKind::Scaled,
                    "dataset" => PriorKind::Dataset,
                    _ => return Err(bad(key)),
                }
            }
            "prior_sigma_noise" => num!(prior_sigma_noise),
            "prior_scale" => num!(prior_scale),
            "prior_bias_lo" => num!(prior_bias_lo),
            "prior_bias_hi" => num!(prior_bias_hi),
            "sdar_enabled" => self.sdar_enabled = value.parse().map_err(|_| bad(key))?,
            "iou_threshold" => num!(iou_threshold),
            "mapping_window" => num!(mapping_window),
            "mapping_iterations" => num!(mapping_iterations),
            "densify_every" => num!(densify_every),
            "grad_threshold" => num!(grad_threshold),
            "opacity_threshold" => num!(opacity_threshold),
            "max_gaussians" => num!(max_gaussians),
            "lambda_p" => num!(lambda_p),
            "lambda_g" => num!(lambda_g),
            "lambda_s" => num!(lambda_s),
            "lambda_i" => num!(lambda_i),
            "ate_sim3" => self.ate_sim3 = value.parse().map_err(|_| bad(key))?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Flat key=value serialization, keys sorted for stable files.
    pub fn to_kv(&self) -> String {
        let mut kv = BTreeMap::new();
        kv.insert("preset", self.preset.clone());
        kv.insert(
            "dataset",
            self.dataset
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
        );
        kv.insert("output", self.output.display().to_string());
        kv.insert("seed", self.seed.to_string());
        kv.insert(
            "threading",
            match self.threading {
                ThreadingMode::Parallel => "parallel".into(),
                ThreadingMode::DeterministicSingle => "deterministic-single".into(),
            },
        );
        kv.insert("width", self.width.to_string());
        kv.insert("height", self.height.to_string());
        kv.insert("frames", self.frames.to_string());
        kv.insert("fov_deg", self.fov_deg.to_string());
        kv.insert("patches_per_frame", self.patches_per_frame.to_string());
        kv.insert("edge_horizon", self.edge_horizon.to_string());
        kv.insert("frontend_window", self.frontend_window.to_string());
        kv.insert("ba_iterations_init", self.ba_iterations_init.to_string());
        kv.insert("ba_iterations_track", self.ba_iterations_track.to_string());
        kv.insert(
            "correction_noise_px",
            self.correction_noise_px.to_string(),
        );
        kv.insert("outlier_fraction", self.outlier_fraction.to_string());
        kv.insert(
            "prior",
            match self.prior {
                PriorKind::Noisy => "noisy".into(),
                PriorKind::Scaled => "scaled".into(),
                PriorKind::Dataset => "dataset".into(),
            },
        );
        kv.insert("prior_sigma_noise", self.prior_sigma_noise.to_string());
        kv.insert("prior_scale", self.prior_scale.to_string());
        kv.insert("prior_bias_lo", self.prior_bias_lo.to_string());
        kv.insert("prior_bias_hi", self.prior_bias_hi.to_string());
        kv.insert("sdar_enabled", self.sdar_enabled.to_string());
        kv.insert("iou_threshold", self.iou_threshold.to_string());
        kv.insert("mapping_window", self.mapping_window.to_string());
        kv.insert("mapping_iterations", self.mapping_iterations.to_string());
        kv.insert("densify_every", self.densify_every.to_string());
        kv.insert("grad_threshold", self.grad_threshold.to_string());
        kv.insert("opacity_threshold", self.opacity_threshold.to_string());
        kv.insert("max_gaussians", self.max_gaussians.to_string());
        kv.insert("lambda_p", self.lambda_p.to_string());
        kv.insert("lambda_g", self.lambda_g.to_string());
        kv.insert("lambda_s", self.lambda_s.to_string());
        kv.insert("lambda_i", self.lambda_i.to_string());
        kv.insert("ate_sim3", self.ate_sim3.to_string());

        let mut out = String::new();
        for (k, v) in kv {
            out.push_str(k);
            out.push('=');
            out.push_str(&v);
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_kv()).map_err(|e| Error::io(path, e))
    }

    /// Parse a key=value file on top of the defaults.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|_| Error::MissingFile(path.into()))?;
        let mut cfg = RunConfig::default();
        for (lineno, line) in text.lines().enumerate() {
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let Some((key, value)) = trimmed.split_once('=') else {
                return Err(Error::ParseLine {
                    path: path.to_path_buf(),
                    line: lineno + 1,
                    msg: "expected key=value".into(),
                });
            };
            cfg.set(key.trim(), value.trim()).map_err(|e| Error::ParseLine {
                path: path.to_path_buf(),
                line: lineno + 1,
                msg: e.to_string(),
            })?;
        }
        Ok(cfg)
    }

    /// Environment override for the seed.
    pub fn apply_env_overrides(&mut self) -> Result<()> {
        if let Ok(seed) = std::env::var("MGS_SEED") {
            self.seed = seed
                .parse()
                .map_err(|_| Error::Config(format!("MGS_SEED={seed:?} is not an integer")))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_round_trip_reproduces_config() {
        let mut cfg = RunConfig::default();
        cfg.seed = 1234;
        cfg.frames = 77;
        cfg.prior = PriorKind::Scaled;
        cfg.prior_scale = 1.7;
        cfg.sdar_enabled = false;
        cfg.threading = ThreadingMode::Parallel;
        cfg.dataset = Some(PathBuf::from("/data/tum"));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        cfg.save(&path).unwrap();
        let back = RunConfig::load(&path).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_key_is_rejected_with_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.cfg");
        std::fs::write(&path, "seed=5\nnot_a_key=1\n").unwrap();
        match RunConfig::load(&path) {
            Err(Error::ParseLine { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn every_field_has_a_default_and_overrides_apply() {
        let mut cfg = RunConfig::default();
        cfg.set("lambda_g", "0.5").unwrap();
        assert_eq!(cfg.lambda_g, 0.5);
        cfg.set("threading", "parallel").unwrap();
        assert_eq!(cfg.threading, ThreadingMode::Parallel);
        assert!(cfg.set("threading", "what").is_err());
    }

    #[test]
    fn intrinsics_derive_from_fov() {
        let cfg = RunConfig::default();
        let k = cfg.intrinsics().unwrap();
        assert_eq!(k.width, 120);
        // 60 degree horizontal fov at 120 px: f = 60 / tan(30 deg).
        approx::assert_relative_eq!(k.fx, 60.0 / 30.0f64.to_radians().tan(), epsilon = 1e-9);
    }
}
