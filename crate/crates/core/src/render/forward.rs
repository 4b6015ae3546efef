//! Forward rasterization: depth-sorted front-to-back alpha compositing of
//! projected Gaussians into color, depth, and accumulated-opacity images.

use super::project::{
    mahalanobis2, project_map, TileBins, ViewGeometry, CUTOFF_D2, TERMINATE_T, VISIBLE_ALPHA,
    VISIBLE_T,
};
use crate::gaussians::GaussianMap;
use crate::geom::{CameraIntrinsics, Pose};
use crate::img::ImageF;
use crate::{Error, Result};

/// Everything one rasterization pass produces.
pub struct RenderOutput {
    /// RGB, alpha-composited front to back.
    pub color: ImageF,
    /// Opacity-weighted sum of Gaussian center depths (not normalized).
    pub depth: ImageF,
    /// Accumulated opacity ᾱ = Σ α_i T_i per pixel.
    pub alpha: ImageF,
    /// Per-Gaussian: contributed α > 1/255 at a pixel while T > 0.5.
    pub visible: Vec<bool>,
    /// Per-Gaussian 3σ screen radius in pixels; None if culled.
    pub radius: Vec<Option<f64>>,
    /// Map generation this render was computed against.
    pub generation: u64,
}

pub(crate) const DEFAULT_TILE: usize = 16;

/// Rasterizes the map into the given view.
pub fn render(map: &GaussianMap, k: &CameraIntrinsics, pose: &Pose) -> Result<RenderOutput> {
    render_tiled(map, k, pose, DEFAULT_TILE)
}

pub(crate) fn render_tiled(
    map: &GaussianMap,
    k: &CameraIntrinsics,
    pose: &Pose,
    tile_size: usize,
) -> Result<RenderOutput> {
    if map.is_empty() {
        return Err(Error::msg("cannot render an empty Gaussian map"));
    }
    let view = ViewGeometry::new(pose);
    let (projected, radius) = project_map(map, k, &view);
    let bins = TileBins::build(&projected, k.width, k.height, tile_size);

    let mut color = ImageF::new(k.width, k.height, 3)?;
    let mut depth = ImageF::new(k.width, k.height, 1)?;
    let mut alpha = ImageF::new(k.width, k.height, 1)?;
    let mut visible = vec![false; map.len()];

    for r in 0..k.height {
        for c in 0..k.width {
            let (px, py) = (c as f64, r as f64);
            let mut t = 1.0;
            let mut acc = [0.0f64; 3];
            let mut acc_d = 0.0;
            let mut acc_a = 0.0;
            for &pi in bins.bin_for(r, c) {
                let p = &projected[pi as usize];
                let (d2, _) = mahalanobis2(p, px, py);
                if d2 > CUTOFF_D2 {
                    continue;
                }
                let a = p.opacity * (-0.5 * d2).exp();
                if a > VISIBLE_ALPHA && t > VISIBLE_T {
                    visible[p.id] = true;
                }
                let w = a * t;
                acc[0] += p.color.x * w;
                acc[1] += p.color.y * w;
                acc[2] += p.color.z * w;
                acc_d += p.depth * w;
                acc_a += w;
                t *= 1.0 - a;
                if t < TERMINATE_T {
                    break;
                }
            }
            for (ch, v) in acc.iter().enumerate() {
                color.set(r, c, ch, *v);
            }
            depth.set(r, c, 0, acc_d);
            alpha.set(r, c, 0, acc_a);
        }
    }
    Ok(RenderOutput {
        color,
        depth,
        alpha,
        visible,
        radius,
        generation: map.generation(),
    })
}
