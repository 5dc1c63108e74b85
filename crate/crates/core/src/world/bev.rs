use super::{AgentClass, Scene, Status, WorldConfig};
use crate::autodiff::Tensor;

/// occupancy, class code, vx, vy
pub const BEV_CHANNELS: usize = 4;

/// Class code written into channel 1: `(index + 1) / 4`.
pub fn class_code(class: AgentClass) -> f64 {
    (class.index() + 1) as f64 / 4.0
}

/// Cell index range `[lo, hi)` along one axis covered by the open interval
/// `(c - r, c + r)`, clipped to the grid.
fn covered(c: f64, r: f64, cfg: &WorldConfig) -> (usize, usize) {
    let ext = cfg.extent();
    let lo = ((c - r + ext) / cfg.cell_size).floor();
    let hi = ((c + r + ext) / cfg.cell_size).ceil();
    let clamp = |v: f64| v.clamp(0.0, cfg.grid as f64) as usize;
    (clamp(lo), clamp(hi))
}

/// Rasterizes the current frame into a `[grid, grid, 4]` tensor indexed
/// `[ix, iy, channel]`, where `ix` runs along `x` from `-extent`.
///
/// Each agent marks every cell its axis-aligned square footprint (half-size =
/// class radius) overlaps. Agents partly or wholly off-grid are clipped.
pub fn render_bev(scene: &Scene, cfg: &WorldConfig) -> Tensor {
    let g = cfg.grid;
    let mut t = Tensor::zeros(&[g, g, BEV_CHANNELS]);
    let data = t.data_mut();
    for agent in &scene.agents {
        let p = agent.position();
        let r = cfg.radius_of(agent.class);
        let v = match agent.status {
            Status::Moving => agent.velocity(cfg.dt),
            Status::Stopped => [0.0, 0.0],
        };
        let (x0, x1) = covered(p[0], r, cfg);
        let (y0, y1) = covered(p[1], r, cfg);
        for ix in x0..x1 {
            for iy in y0..y1 {
                let o = (ix * g + iy) * BEV_CHANNELS;
                data[o] = 1.0;
                data[o + 1] = class_code(agent.class);
                data[o + 2] = v[0];
                data[o + 3] = v[1];
            }
        }
    }
    t
}

/// Cell centers in `[ix, iy]` row-major order.
pub fn cell_centers(cfg: &WorldConfig) -> Vec<[f64; 2]> {
    let ext = cfg.extent();
    let mut out = Vec::with_capacity(cfg.cells());
    for ix in 0..cfg.grid {
        for iy in 0..cfg.grid {
            out.push([
                -ext + (ix as f64 + 0.5) * cfg.cell_size,
                -ext + (iy as f64 + 0.5) * cfg.cell_size,
            ]);
        }
    }
    out
}

/// Side length, in cells, of one pooled patch.
pub const PATCH: usize = 4;

/// `[(grid/4)^2, grid^2]` averaging matrix for 4x4 patches.
pub fn pool_matrix(cfg: &WorldConfig) -> Tensor {
    let g = cfg.grid;
    let pg = g / PATCH;
    let mut m = Tensor::zeros(&[pg * pg, g * g]);
    let w = 1.0 / (PATCH * PATCH) as f64;
    let cols = g * g;
    let data = m.data_mut();
    for ix in 0..g {
        for iy in 0..g {
            let patch = (ix / PATCH) * pg + iy / PATCH;
            data[patch * cols + ix * g + iy] = w;
        }
    }
    m
}

/// Patch centers matching the rows of [`pool_matrix`].
pub fn patch_centers(cfg: &WorldConfig) -> Vec<[f64; 2]> {
    let ext = cfg.extent();
    let side = cfg.cell_size * PATCH as f64;
    let pg = cfg.grid / PATCH;
    let mut out = Vec::with_capacity(pg * pg);
    for px in 0..pg {
        for py in 0..pg {
            out.push([
                -ext + (px as f64 + 0.5) * side,
                -ext + (py as f64 + 0.5) * side,
            ]);
        }
    }
    out
}

/// 4x4 average pooling of a rendered grid, `[(grid/4)^2, 4]`.
pub fn pooled_patches(bev: &Tensor, cfg: &WorldConfig) -> Tensor {
    let g = cfg.grid;
    let pg = g / PATCH;
    let mut out = Tensor::zeros(&[pg * pg, BEV_CHANNELS]);
    let w = 1.0 / (PATCH * PATCH) as f64;
    for ix in 0..g {
        for iy in 0..g {
            let patch = (ix / PATCH) * pg + iy / PATCH;
            for c in 0..BEV_CHANNELS {
                out.data_mut()[patch * BEV_CHANNELS + c] +=
                    w * bev.data()[(ix * g + iy) * BEV_CHANNELS + c];
            }
        }
    }
    out
}
