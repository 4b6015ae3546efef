//! Proxy depth: fusing multi-view and monocular depth, the affine
//! scale/shift fit, and Gaussian initialization from a depth map.

use super::{logit, Gaussian, GaussianMap};
use crate::error::{Error, Result};
use crate::geom::{CameraIntrinsics, Pose, Quaternion};
use crate::img::ImageF;
use nalgebra::{Vector2, Vector3};

/// Where a proxy-depth pixel came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DepthSource {
    /// Consistency-checked multi-view depth, used as-is.
    Multiview,
    /// Monocular depth mapped through the fitted affine θ·D + γ.
    MonoFitted,
}

/// Per-pixel fused depth with provenance and validity.
///
/// Every valid pixel holds a strictly positive depth; pixels where neither
/// source produced a positive value are invalid and skipped downstream.
#[derive(Debug, Clone)]
pub struct ProxyDepthMap {
    depth: ImageF,
    source: Vec<DepthSource>,
    valid: Vec<bool>,
}

impl ProxyDepthMap {
    pub fn width(&self) -> usize {
        self.depth.width()
    }

    pub fn height(&self) -> usize {
        self.depth.height()
    }

    pub fn depth(&self, r: usize, c: usize) -> f64 {
        self.depth.get(r, c, 0)
    }

    pub fn is_valid(&self, r: usize, c: usize) -> bool {
        self.valid[r * self.width() + c]
    }

    pub fn source(&self, r: usize, c: usize) -> DepthSource {
        self.source[r * self.width() + c]
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// The raw depth image (invalid pixels hold whatever the fuse produced).
    pub fn image(&self) -> &ImageF {
        &self.depth
    }

    /// Overwrites one pixel; `d ≤ 0` marks it invalid.
    pub fn set_depth(&mut self, r: usize, c: usize, d: f64, source: DepthSource) {
        let i = r * self.width() + c;
        self.depth.set(r, c, 0, d);
        self.source[i] = source;
        self.valid[i] = d > 0.0;
    }

    /// Builds a map that is valid multi-view depth everywhere (test/synth
    /// convenience; equivalent to fuse with an all-true mask).
    pub fn from_multiview(depth: &ImageF) -> Result<Self> {
        let mask = vec![true; depth.pixel_count()];
        fuse_proxy_depth(depth, &mask, depth, 1.0, 0.0)
    }
}

/// Per-pixel fusion: consistency-checked multi-view depth where valid, the
/// affine-corrected monocular value `θ·mono + γ` elsewhere.
pub fn fuse_proxy_depth(
    multiview: &ImageF,
    multiview_valid: &[bool],
    mono: &ImageF,
    theta: f64,
    gamma: f64,
) -> Result<ProxyDepthMap> {
    if theta <= 0.0 {
        return Err(Error::NonPositiveScale { theta });
    }
    if !multiview.same_shape(mono) {
        return Err(multiview.shape_error(mono));
    }
    if multiview.channels() != 1 {
        return Err(Error::msg("depth maps must be single-channel"));
    }
    if multiview_valid.len() != multiview.pixel_count() {
        return Err(Error::msg("validity mask size does not match depth map"));
    }
    let n = multiview.pixel_count();
    let mut depth = multiview.zeros_like();
    let mut source = Vec::with_capacity(n);
    let mut valid = Vec::with_capacity(n);
    let inputs = multiview_valid
        .iter()
        .zip(multiview.data())
        .zip(mono.data());
    for (((&mv_ok, &mv_d), &mono_d), out) in inputs.zip(depth.data_mut()) {
        let (d, s) = if mv_ok && mv_d > 0.0 {
            (mv_d, DepthSource::Multiview)
        } else {
            (theta * mono_d + gamma, DepthSource::MonoFitted)
        };
        *out = d;
        source.push(s);
        valid.push(d > 0.0);
    }
    Ok(ProxyDepthMap {
        depth,
        source,
        valid,
    })
}

/// Least-squares affine fit `θ·mono + γ ≈ target` over masked pixels.
///
/// Closed form from the 2×2 normal equations; a (near-)constant mono signal
/// leaves θ unobservable and is rejected.
pub fn fit_scale_shift(mono: &ImageF, target: &ImageF, valid: &[bool]) -> Result<(f64, f64)> {
    if !mono.same_shape(target) {
        return Err(mono.shape_error(target));
    }
    if valid.len() != mono.pixel_count() || mono.channels() != 1 {
        return Err(Error::msg("fit inputs must be single-channel with matching mask"));
    }
    let mut n = 0.0;
    let (mut sm, mut st, mut smm, mut smt) = (0.0, 0.0, 0.0, 0.0);
    for ((&ok, &m), &t) in valid.iter().zip(mono.data()).zip(target.data()) {
        if !ok {
            continue;
        }
        n += 1.0;
        sm += m;
        st += t;
        smm += m * m;
        smt += m * t;
    }
    if n < 2.0 {
        return Err(Error::TooFewPoints { min: 2, got: n as usize });
    }
    let det = n * smm - sm * sm;
    // det = n²·var(mono); vanishes iff the mono signal is constant.
    if det <= 1e-12 * n * smm.max(1e-300) {
        return Err(Error::ScaleShiftRankDeficient {
            what: "monocular disparity is constant over the mask".into(),
        });
    }
    let theta = (n * smt - sm * st) / det;
    let gamma = (st - theta * sm) / n;
    Ok((theta, gamma))
}

/// Creates one Gaussian per sampled valid pixel: mean unprojected at the
/// proxy depth, color from the observation, isotropic scale covering about
/// `stride` pixels at that depth, opacity 0.5.
pub fn initialize_from_depth(
    image: &ImageF,
    pose: &Pose,
    depth: &ProxyDepthMap,
    intrinsics: &CameraIntrinsics,
    stride: usize,
    keyframe_id: usize,
) -> Result<Vec<Gaussian>> {
    if stride == 0 {
        return Err(Error::msg("stride must be positive"));
    }
    if image.width() != depth.width() || image.height() != depth.height() {
        return Err(Error::msg("image and depth dimensions differ"));
    }
    let mut out = Vec::new();
    for r in (0..depth.height()).step_by(stride) {
        for c in (0..depth.width()).step_by(stride) {
            if !depth.is_valid(r, c) {
                continue;
            }
            let d = depth.depth(r, c);
            let cam = intrinsics.unproject(&Vector2::new(c as f64, r as f64), d);
            let mean = pose.transform(&cam);
            let px = image.pixel(r, c);
            let color = if image.channels() == 3 {
                Vector3::new(px[0], px[1], px[2])
            } else {
                Vector3::repeat(px[0])
            };
            let s = d / intrinsics.fx * stride as f64;
            out.push(Gaussian {
                mean,
                rot: Quaternion::identity(),
                log_scale: Vector3::repeat(s.ln()),
                opacity_logit: logit(0.5),
                color,
                anchor_keyframe: keyframe_id,
                anchor_pixel: (c, r),
            });
        }
    }
    if out.is_empty() {
        return Err(Error::msg("no valid depth pixels to initialize from"));
    }
    Ok(out)
}

/// Convenience: initialize a fresh map from the first keyframe.
pub fn map_from_first_keyframe(
    image: &ImageF,
    pose: &Pose,
    depth: &ProxyDepthMap,
    intrinsics: &CameraIntrinsics,
    stride: usize,
    keyframe_id: usize,
) -> Result<GaussianMap> {
    let gs = initialize_from_depth(image, pose, depth, intrinsics, stride, keyframe_id)?;
    let mut map = GaussianMap::new();
    map.extend(gs);
    Ok(map)
}
