//! Non-rigid map deformation under keyframe pose and proxy-depth updates.
//!
//! Each Gaussian anchored to the updated keyframe is projected into the old
//! pose to find its pixel (u, v); the mean is then scaled in the old camera
//! frame by `f = 1 + (D'(u,v) − D(u,v)) / z` — a pure shift along its viewing
//! ray that leaves (u, v) fixed — and carried to the new pose. Rotations are
//! left-composed with the relative pose rotation and scales multiplied by the
//! same factor, so running the inverse update restores the map exactly
//! (`f⁻¹ = 1 + (D − D') / (f·z)`).

use super::{GaussianMap, ProxyDepthMap};
use crate::error::Result;
use crate::geom::{CameraIntrinsics, Pose};

/// Outcome counts for one deformation pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DeformStats {
    /// Gaussians updated.
    pub deformed: usize,
    /// Gaussians left untouched because they sat behind the old camera or
    /// the depth change would have pushed them through it.
    pub skipped: usize,
}

fn poses_identical(a: &Pose, b: &Pose) -> bool {
    a.rot.coords() == b.rot.coords() && a.trans == b.trans
}

/// Applies the pose/depth update for `keyframe_id` to all anchored Gaussians.
pub fn deform(
    map: &mut GaussianMap,
    keyframe_id: usize,
    old_pose: &Pose,
    new_pose: &Pose,
    old_depth: &ProxyDepthMap,
    new_depth: &ProxyDepthMap,
    intrinsics: &CameraIntrinsics,
) -> Result<DeformStats> {
    let ids: Vec<usize> = map.anchored_to(keyframe_id).to_vec();
    // Bit-equal update → bit-equal map: skip the floating-point round trip.
    if poses_identical(old_pose, new_pose) && old_depth.image().data() == new_depth.image().data()
    {
        return Ok(DeformStats {
            deformed: ids.len(),
            skipped: 0,
        });
    }
    let (w, h) = (old_depth.width(), old_depth.height());
    let rel_rot = new_pose.rot.mul(&old_pose.rot.inverse());
    let mut stats = DeformStats::default();
    for id in ids {
        let g = &map.gaussians()[id];
        let cam = old_pose.transform_inv(&g.mean);
        if cam.z <= intrinsics.near {
            stats.skipped += 1;
            continue;
        }
        let u = intrinsics.fx * cam.x / cam.z + intrinsics.cx;
        let v = intrinsics.fy * cam.y / cam.z + intrinsics.cy;
        let (uc, vr) = (u.round(), v.round());
        let in_bounds =
            uc >= 0.0 && vr >= 0.0 && (uc as usize) < w && (vr as usize) < h;
        // Off-screen or invalid pixels contribute no depth change.
        let delta = if in_bounds {
            let (c, r) = (uc as usize, vr as usize);
            if old_depth.is_valid(r, c) && new_depth.is_valid(r, c) {
                new_depth.depth(r, c) - old_depth.depth(r, c)
            } else {
                0.0
            }
        } else {
            0.0
        };
        let f = 1.0 + delta / cam.z;
        if f <= 1e-6 {
            stats.skipped += 1;
            continue;
        }
        let mean = new_pose.transform(&(cam * f));
        let g = &mut map.gaussians_mut()[id];
        g.mean = mean;
        g.rot = rel_rot.mul(&g.rot);
        let lf = f.ln();
        g.log_scale.apply(|s| *s += lf);
        // Re-anchor under the new pose when it still lands on screen.
        if let Ok((px, _)) = intrinsics.project(new_pose, &mean) {
            let (uc, vr) = (px.x.round(), px.y.round());
            if uc >= 0.0 && vr >= 0.0 && (uc as usize) < w && (vr as usize) < h {
                g.anchor_pixel = (uc as usize, vr as usize);
            }
        }
        stats.deformed += 1;
    }
    Ok(stats)
}
