//! Differentiable Gaussian rasterizer.
//!
//! [`render`] composites the map front to back into color, depth, and
//! accumulated opacity; [`render_backward`] recomputes the same pass and
//! pulls pixel-space gradients back to every Gaussian parameter and the
//! camera pose; [`render_virtual_stack`] renders the sub-frame views of an
//! exposure interval for blur synthesis.

mod backward;
mod forward;
mod project;

pub use backward::{render_backward, MapGradients, PoseGradient, UpstreamGrads};
pub use forward::{render, RenderOutput};


use crate::gaussians::GaussianMap;
use crate::geom::{CameraIntrinsics, SubFrameTrajectory};
use crate::img::ImageF;
use crate::Result;

/// Renders the `m` evenly spaced virtual views of an exposure interval and
/// the per-pixel mean of their depth maps.
///
/// Requires `m >= 2`; a single-view pipeline should render the mid-exposure
/// pose directly instead of averaging a stack.
pub fn render_virtual_stack(
    map: &GaussianMap,
    k: &CameraIntrinsics,
    traj: &SubFrameTrajectory,
    m: usize,
) -> Result<(Vec<RenderOutput>, ImageF)> {
    let views = traj.virtual_views(m)?;
    let mut outputs = Vec::with_capacity(m);
    for pose in &views {
        outputs.push(render(map, k, pose)?);
    }
    let all_equal = outputs[1..]
        .iter()
        .all(|o| o.depth.data() == outputs[0].depth.data());
    let mean_depth = if all_equal {
        // Static interval: the mean of identical maps is the map itself,
        // bit for bit.
        outputs[0].depth.clone()
    } else {
        let mut d = ImageF::new(k.width, k.height, 1)?;
        for o in &outputs {
            d.add_scaled(&o.depth, 1.0 / m as f64)?;
        }
        d
    };
    Ok((outputs, mean_depth))
}
