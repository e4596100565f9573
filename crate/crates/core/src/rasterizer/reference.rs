//! Naive per-pixel compositing oracle.
//!
//! Shares the projection stage with the tiled path but composites each pixel
//! by walking the full projected list in an explicitly sorted order, with no
//! tile binning. Used to validate the production renderer.

use nalgebra::Vector3;

use crate::gaussian_map::GaussianMap;
use crate::geom::{Intrinsics, Pose};

use super::{project_map, RasterSettings};

pub struct ReferenceOutput {
    pub color: Vec<f64>,
    pub depth: Vec<f64>,
    pub alpha: Vec<f64>,
}

pub fn render_reference(
    map: &GaussianMap,
    pose: &Pose,
    k: &Intrinsics,
    background: Vector3<f64>,
    settings: &RasterSettings,
) -> ReferenceOutput {
    let projected = project_map(map, pose, k, settings);
    let (width, height) = (k.width, k.height);
    let mut color = vec![0.0; width * height * 3];
    let mut depth = vec![0.0; width * height];
    let mut alpha = vec![0.0; width * height];

    // Per-pixel explicit ordering: indices sorted front-to-back by depth.
    let mut order: Vec<usize> = (0..projected.len()).collect();
    order.sort_by(|&a, &b| {
        projected[a]
            .z
            .partial_cmp(&projected[b].z)
            .expect("finite depths")
    });

    for y in 0..height {
        for x in 0..width {
            let (px, py) = (x as f64, y as f64);
            let mut c = Vector3::zeros();
            let mut d = 0.0;
            let mut a = 0.0;
            let mut transmittance = 1.0;
            for &pi in &order {
                let p = &projected[pi];
                let dx = px - p.mu_i.x;
                let dy = py - p.mu_i.y;
                let power = -0.5
                    * (p.conic[(0, 0)] * dx * dx
                        + (p.conic[(0, 1)] + p.conic[(1, 0)]) * dx * dy
                        + p.conic[(1, 1)] * dy * dy);
                if power > 0.0 {
                    continue;
                }
                let alpha_i = p.alpha_base * power.exp();
                if alpha_i < settings.alpha_cutoff {
                    continue;
                }
                let w = alpha_i * transmittance;
                c += w * p.color;
                d += w * p.z;
                a += w;
                transmittance *= 1.0 - alpha_i;
                if transmittance < settings.transmittance_min {
                    break;
                }
            }
            c += transmittance * background;
            let pix = y * width + x;
            color[pix * 3] = c.x;
            color[pix * 3 + 1] = c.y;
            color[pix * 3 + 2] = c.z;
            depth[pix] = d;
            alpha[pix] = a;
        }
    }

    ReferenceOutput {
        color,
        depth,
        alpha,
    }
}
