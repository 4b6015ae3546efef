//! Reverse-mode differentiation of the rasterizer. Recomputes the forward
//! pass per pixel (no retained state), then chains pixel-space gradients back
//! to every Gaussian parameter and to the camera pose tangent.
//!
//! The per-pixel scan avoids dividing by (1 - alpha): with suffix sums
//! S_i = u_i a_i + (1 - a_i) S_{i+1}, the compositing gradient is
//! dL/da_i = T_i (u_i - S_{i+1}), which stays finite even at a_i = 1.

use super::project::{
    mahalanobis2, project_map, Projected, TileBins, ViewGeometry, CUTOFF_D2, TERMINATE_T,
};
use super::forward::DEFAULT_TILE;
use crate::gaussians::GaussianMap;
use crate::geom::{CameraIntrinsics, Pose};
use crate::img::ImageF;
use crate::{Error, Result};
use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3, Vector4};

/// Pixel-space loss gradients to pull back. Any `None` stream is treated as
/// uniformly zero.
pub struct UpstreamGrads<'a> {
    /// dL/dColor, 3 channels.
    pub color: Option<&'a ImageF>,
    /// dL/dDepth, 1 channel.
    pub depth: Option<&'a ImageF>,
    /// dL/dAccumulatedOpacity, 1 channel.
    pub alpha: Option<&'a ImageF>,
}

/// Per-Gaussian parameter gradients, indexed like the map.
pub struct MapGradients {
    pub mean: Vec<Vector3<f64>>,
    /// Gradient w.r.t. quaternion components (w, x, y, z), projected onto
    /// the tangent of the unit sphere so renormalizing updates are exact.
    pub rot: Vec<Vector4<f64>>,
    pub log_scale: Vec<Vector3<f64>>,
    pub opacity_logit: Vec<f64>,
    pub color: Vec<Vector3<f64>>,
    /// Norm of the screen-space positional gradient; None when the Gaussian
    /// was culled from this view. Feeds densification statistics.
    pub mean2d_norm: Vec<Option<f64>>,
}

/// Gradient w.r.t. the camera pose in the left-update tangent convention
/// (`Pose::left_update`): rotation by exp(dphi) composed on the left,
/// translation added directly.
#[derive(Debug, Clone, Copy)]
pub struct PoseGradient {
    pub rot: Vector3<f64>,
    pub trans: Vector3<f64>,
}

/// Per-projected-Gaussian accumulators filled by the pixel loop.
#[derive(Clone)]
struct Accum {
    mean2d: Vector2<f64>,
    w: Matrix2<f64>,
    depth: f64,
    color: Vector3<f64>,
    opacity_logit: f64,
}

impl Accum {
    fn zero() -> Self {
        Accum {
            mean2d: Vector2::zeros(),
            w: Matrix2::zeros(),
            depth: 0.0,
            color: Vector3::zeros(),
            opacity_logit: 0.0,
        }
    }
}

/// One compositing step recorded during the forward scan of a pixel.
struct Step {
    slot: usize,
    alpha: f64,
    kernel: f64,
    u: f64,
    t: f64,
    delta: Vector2<f64>,
}

/// Differentiates the render at `pose` w.r.t. all map parameters and the
/// pose, pulling back the given pixel-space gradients.
pub fn render_backward(
    map: &GaussianMap,
    k: &CameraIntrinsics,
    pose: &Pose,
    upstream: &UpstreamGrads,
) -> Result<(MapGradients, PoseGradient)> {
    if map.is_empty() {
        return Err(Error::msg("cannot differentiate an empty Gaussian map"));
    }
    for (img, ch, name) in [
        (upstream.color, 3, "color"),
        (upstream.depth, 1, "depth"),
        (upstream.alpha, 1, "alpha"),
    ] {
        if let Some(img) = img {
            if img.width() != k.width || img.height() != k.height || img.channels() != ch {
                return Err(Error::msg(format!(
                    "upstream {name} gradient is {}x{}x{}, expected {}x{}x{ch}",
                    img.width(),
                    img.height(),
                    img.channels(),
                    k.width,
                    k.height
                )));
            }
        }
    }

    let view = ViewGeometry::new(pose);
    let (projected, _) = project_map(map, k, &view);
    let bins = TileBins::build(&projected, k.width, k.height, DEFAULT_TILE);

    let mut accum = vec![Accum::zero(); projected.len()];
    let mut steps: Vec<Step> = Vec::new();

    for r in 0..k.height {
        for c in 0..k.width {
            let (px, py) = (c as f64, r as f64);
            let up_c = match upstream.color {
                Some(img) => [img.get(r, c, 0), img.get(r, c, 1), img.get(r, c, 2)],
                None => [0.0; 3],
            };
            let up_d = upstream.depth.map_or(0.0, |img| img.get(r, c, 0));
            let up_a = upstream.alpha.map_or(0.0, |img| img.get(r, c, 0));
            if up_c == [0.0; 3] && up_d == 0.0 && up_a == 0.0 {
                continue;
            }

            steps.clear();
            let mut t = 1.0;
            for &pi in bins.bin_for(r, c) {
                let p = &projected[pi as usize];
                let (d2, delta) = mahalanobis2(p, px, py);
                if d2 > CUTOFF_D2 {
                    continue;
                }
                let kernel = (-0.5 * d2).exp();
                let alpha = p.opacity * kernel;
                let u = up_c[0] * p.color.x
                    + up_c[1] * p.color.y
                    + up_c[2] * p.color.z
                    + up_d * p.depth
                    + up_a;
                steps.push(Step {
                    slot: pi as usize,
                    alpha,
                    kernel,
                    u,
                    t,
                    delta,
                });
                t *= 1.0 - alpha;
                if t < TERMINATE_T {
                    break;
                }
            }

            // Suffix sum S over the recorded steps, walked back to front.
            let mut suffix = 0.0;
            for step in steps.iter().rev() {
                let p = &projected[step.slot];
                let acc = &mut accum[step.slot];
                let d_alpha = step.t * (step.u - suffix);
                suffix = step.u * step.alpha + (1.0 - step.alpha) * suffix;

                let weight = step.alpha * step.t;
                acc.color.x += up_c[0] * weight;
                acc.color.y += up_c[1] * weight;
                acc.color.z += up_c[2] * weight;
                acc.depth += up_d * weight;

                let o = p.opacity;
                acc.opacity_logit += d_alpha * step.kernel * o * (1.0 - o);
                // alpha = o * exp(-d2/2): pull back through d2 into the
                // screen mean and the inverse covariance.
                let dd2 = -0.5 * d_alpha * o * step.kernel;
                acc.mean2d -= 2.0 * dd2 * (p.w * step.delta);
                acc.w += dd2 * (step.delta * step.delta.transpose());
            }
        }
    }

    chain_to_parameters(map, k, &view, &projected, &accum)
}

/// Chains screen-space accumulators back to 3D parameters and the pose.
fn chain_to_parameters(
    map: &GaussianMap,
    k: &CameraIntrinsics,
    view: &ViewGeometry,
    projected: &[Projected],
    accum: &[Accum],
) -> Result<(MapGradients, PoseGradient)> {
    let n = map.len();
    let mut grads = MapGradients {
        mean: vec![Vector3::zeros(); n],
        rot: vec![Vector4::zeros(); n],
        log_scale: vec![Vector3::zeros(); n],
        opacity_logit: vec![0.0; n],
        color: vec![Vector3::zeros(); n],
        mean2d_norm: vec![None; n],
    };
    let mut pose_grad = PoseGradient {
        rot: Vector3::zeros(),
        trans: Vector3::zeros(),
    };
    let r_cw = view.r_wc.transpose();

    for (p, acc) in projected.iter().zip(accum) {
        let g = &map.gaussians()[p.id];
        grads.color[p.id] += acc.color;
        grads.opacity_logit[p.id] += acc.opacity_logit;
        grads.mean2d_norm[p.id] = Some(acc.mean2d.norm());

        // d2 = delta^T W delta with W = inv(Sigma'), so
        // dL/dSigma' = -W (dL/dW) W; both sides stay symmetric.
        let d_cov2d = -(p.w * acc.w * p.w);
        // Sigma' = A Sigma3D A^T (+ constant dilation).
        let d_a = 2.0 * d_cov2d * p.a * p.sigma3d;
        let d_sigma3d = p.a.transpose() * d_cov2d * p.a;

        // Sigma3D = R diag(s^2) R^T.
        let rot_m = g.rot.to_matrix();
        let s = g.scale();
        let s2 = Matrix3::from_diagonal(&Vector3::new(s.x * s.x, s.y * s.y, s.z * s.z));
        let d_rot_m = 2.0 * d_sigma3d * rot_m * s2;
        for axis in 0..3 {
            let col = rot_m.column(axis);
            grads.log_scale[p.id][axis] +=
                2.0 * s[axis] * s[axis] * (col.transpose() * d_sigma3d * col)[(0, 0)];
        }
        let raw = Vector4::new(
            frob3(&d_rot_m, &drot_dw(g.rot.coords())),
            frob3(&d_rot_m, &drot_dx(g.rot.coords())),
            frob3(&d_rot_m, &drot_dy(g.rot.coords())),
            frob3(&d_rot_m, &drot_dz(g.rot.coords())),
        );
        let q = Vector4::from(g.rot.coords());
        grads.rot[p.id] += raw - q * q.dot(&raw);

        // A = J R_wc: split into the Jacobian path (through the camera-frame
        // point) and the explicit rotation path (pose only).
        let d_j: Matrix2x3<f64> = d_a * r_cw;
        let (x, y, z) = (p.x_cam.x, p.x_cam.y, p.x_cam.z);
        let (fx, fy) = (k.fx, k.fy);
        let z2 = z * z;
        let mut d_x_cam = Vector3::new(
            d_j[(0, 2)] * (-fx / z2),
            d_j[(1, 2)] * (-fy / z2),
            d_j[(0, 0)] * (-fx / z2)
                + d_j[(1, 1)] * (-fy / z2)
                + d_j[(0, 2)] * (2.0 * fx * x / (z2 * z))
                + d_j[(1, 2)] * (2.0 * fy * y / (z2 * z)),
        );
        // Screen-mean path: the projection Jacobian is exactly J.
        d_x_cam += p.j.transpose() * acc.mean2d;
        // Depth path: the composited value is the camera-frame z.
        d_x_cam.z += acc.depth;

        // x_cam = R_wc (mu - t).
        let d_mu_world = r_cw * d_x_cam;
        grads.mean[p.id] += d_mu_world;
        pose_grad.trans -= d_mu_world;
        pose_grad.rot -= (g.mean - view.t_c).cross(&d_mu_world);
        // Explicit R_wc dependence of A under the left update:
        // dA/dphi_k = -A skew(e_k).
        for axis in 0..3 {
            pose_grad.rot[axis] -= frob23(&d_a, &(p.a * skew_basis(axis)));
        }
    }
    Ok((grads, pose_grad))
}

fn skew_basis(axis: usize) -> Matrix3<f64> {
    let mut e = Vector3::zeros();
    e[axis] = 1.0;
    Matrix3::new(0.0, -e.z, e.y, e.z, 0.0, -e.x, -e.y, e.x, 0.0)
}

fn frob3(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    a.component_mul(b).sum()
}

fn frob23(a: &Matrix2x3<f64>, b: &Matrix2x3<f64>) -> f64 {
    a.component_mul(b).sum()
}

// Derivatives of the rotation matrix w.r.t. unit-quaternion components
// (w, x, y, z). Combined with the tangent projection above they match finite
// differences of renormalized perturbations.
fn drot_dw([_, x, y, z]: [f64; 4]) -> Matrix3<f64> {
    2.0 * Matrix3::new(0.0, -z, y, z, 0.0, -x, -y, x, 0.0)
}

fn drot_dx([w, x, y, z]: [f64; 4]) -> Matrix3<f64> {
    2.0 * Matrix3::new(0.0, y, z, y, -2.0 * x, -w, z, w, -2.0 * x)
}

fn drot_dy([w, x, y, z]: [f64; 4]) -> Matrix3<f64> {
    2.0 * Matrix3::new(-2.0 * y, x, w, x, 0.0, z, -w, z, -2.0 * y)
}

fn drot_dz([w, x, y, z]: [f64; 4]) -> Matrix3<f64> {
    2.0 * Matrix3::new(-2.0 * z, -w, x, w, -2.0 * z, y, x, y, 0.0)
}
