// scratch probe: depth error anatomy of a finished run
use mgs_core::dataset::load_trajectory;
use mgs_core::gaussian_map::GaussianMap;
use mgs_core::geom::Intrinsics;
use mgs_core::rasterizer::{render, RasterSettings};
use mgs_core::synthetic::generate_synthetic_scene;
use nalgebra::Vector3;

fn main() {
    let k = Intrinsics::new(103.9230, 103.9230, 60.0, 45.0, 120, 90).unwrap();
    let scene = generate_synthetic_scene("room-orbit", 42, k, 100).unwrap();
    let map = GaussianMap::load_checkpoint(std::path::Path::new("/tmp/mgs_q_cull/map.mgsm")).unwrap();
    let traj = load_trajectory(std::path::Path::new("/tmp/mgs_q_cull/trajectory_full.txt")).unwrap();
    let idx = 50;
    let pose_cw = traj.poses[idx].inverse();
    let out = render(&map, &pose_cw, &k, Vector3::zeros(), &RasterSettings::default());
    let (_, gt_depth) = scene.frame(idx);
    let mut ratios: Vec<f64> = (0..out.depth.len()).filter(|&i| out.alpha[i] > 0.5)
        .map(|i| (out.depth[i] / out.alpha[i]) / gt_depth.values()[i]).collect();
    ratios.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let s = 1.0 / ratios[ratios.len() / 2];
    let (w, h) = (k.width, k.height);
    let is_edge = |x: usize, y: usize| -> bool {
        if x == 0 || y == 0 || x + 1 >= w || y + 1 >= h { return true; }
        let c = gt_depth.get(x, y);
        [(x-1,y),(x+1,y),(x,y-1),(x,y+1)].iter().any(|&(a,b)| (gt_depth.get(a,b) - c).abs() > 0.1)
    };
    let mut edge = (0.0, 0usize);
    let mut flat = (0.0, 0usize);
    let mut flat_errs: Vec<f64> = Vec::new();
    for y in 0..h { for x in 0..w {
        let i = y * w + x;
        if out.alpha[i] <= 0.5 { continue; }
        let e = ((out.depth[i] / out.alpha[i]) * s - gt_depth.get(x, y)).abs() * 100.0;
        if is_edge(x, y) { edge.0 += e; edge.1 += 1; } else { flat.0 += e; flat.1 += 1; flat_errs.push(e); }
    }}
    flat_errs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pct = |p: f64| flat_errs[(p * (flat_errs.len()-1) as f64) as usize];
    println!("edge: {} px mean {:.2} cm | flat: {} px mean {:.2} cm (p50 {:.2} p90 {:.2} p99 {:.2})",
        edge.1, edge.0 / edge.1 as f64, flat.1, flat.0 / flat.1 as f64, pct(0.5), pct(0.9), pct(0.99));
    println!("total mean {:.2} cm", (edge.0 + flat.0) / (edge.1 + flat.1) as f64);
    // Worst flat pixels with context.
    let mut worst: Vec<(f64, usize, usize)> = Vec::new();
    for y in 0..h { for x in 0..w {
        let i = y * w + x;
        if out.alpha[i] <= 0.5 || is_edge(x, y) { continue; }
        let e = ((out.depth[i] / out.alpha[i]) * s - gt_depth.get(x, y)).abs() * 100.0;
        worst.push((e, x, y));
    }}
    worst.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    for (e, x, y) in worst.iter().take(12) {
        let i = y * w + x;
        println!("  ({x:3},{y:3}) err {e:7.1} cm: rendered {:.3} (alpha {:.3}) gt {:.3}",
            out.depth[i] / out.alpha[i] * s, out.alpha[i], gt_depth.get(*x, *y));
    }
}
