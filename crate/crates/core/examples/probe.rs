// scratch probe: small end-to-end run
use mgs_core::config::{PriorKind, RunConfig, ThreadingMode};
use mgs_core::pipeline::run_pipeline;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mut cfg = RunConfig::default();
    cfg.preset = "room-orbit".into();
    cfg.frames = 60;
    cfg.width = 64;
    cfg.height = 48;
    cfg.prior = PriorKind::Scaled;
    cfg.prior_scale = 1.0;
    cfg.threading = ThreadingMode::DeterministicSingle;
    cfg.output = std::path::PathBuf::from("/tmp/mgs_probe");
    for a in &args[1..] {
        if let Some((k, v)) = a.split_once('=') {
            cfg.set(k, v).unwrap();
        }
    }
    let t0 = std::time::Instant::now();
    match run_pipeline(&cfg) {
        Ok(summary) => {
            println!("{}", summary.render_text());
            println!("elapsed: {:.1} s", t0.elapsed().as_secs_f64());
        }
        Err(e) => {
            eprintln!("pipeline error: {e}");
            std::process::exit(1);
        }
    }
}
