//! Frame-to-model tracking: refines a frame's sub-frame control poses and
//! exposure parameters against the current Gaussian map by descending an
//! opacity- and edge-masked photometric loss, plus exposure-gap estimation
//! between neighboring frames.

use crate::blur::{blur_backward, synthesize_blur, BlurryRender, ExposureParams};
use crate::gaussians::GaussianMap;
use crate::geom::{CameraIntrinsics, Pose, SubFrameTrajectory};
use crate::img::ImageF;
use crate::render::{render, UpstreamGrads};
use crate::{Error, Result};
use nalgebra::Vector3;

/// A pixel counts as mapped when the accumulated opacity exceeds this.
const ALPHA_COVERED: f64 = 0.5;

/// Tangent-space magnitude of the deterministic seed that splits coincident
/// control poses apart. A static start is a stationary configuration of the
/// descent — every virtual view renders identically, so both control points
/// receive the same gradient and would stay glued together forever. The seed
/// is antisymmetric (the trajectory midpoint is preserved to first order)
/// and is only applied when the gradient check has not already stopped the
/// optimization, so an exactly explained observation still returns the
/// initial poses untouched. Components along the true blur direction grow
/// under descent; the rest decay.
const SPREAD_SEED: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct TrackerConfig {
    pub max_iterations: usize,
    pub lr_rotation: f64,
    pub lr_translation: f64,
    pub lr_exposure: f64,
    /// Extra rate multiplier for the antisymmetric (spread) component of
    /// the control-pose gradient. The blur signal that separates the two
    /// control points is orders of magnitude weaker than the shared pose
    /// signal, so it gets its own parameter group; 1.0 recovers plain
    /// per-control descent.
    pub lr_spread_scale: f64,
    /// All rates are halved when the best loss has not improved for this
    /// many iterations. The absolute-error subgradient keeps a roughly
    /// constant magnitude however close the fit is, so a fixed step size
    /// orbits the optimum instead of entering it.
    pub plateau_patience: usize,
    /// Stop once the full gradient norm drops below this.
    pub early_stop_grad: f64,
    /// Minimum fraction of edge pixels the map must cover.
    pub min_coverage: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig {
            max_iterations: 200,
            lr_rotation: 3e-3,
            lr_translation: 1e-3,
            lr_exposure: 1e-2,
            lr_spread_scale: 256.0,
            plateau_patience: 50,
            early_stop_grad: 1e-4,
            min_coverage: 0.05,
        }
    }
}

/// Binary mask of high-gradient pixels in the blurry observation: Sobel
/// magnitude at or above the 90th percentile, dilated by one pixel.
pub struct EdgeMask {
    width: usize,
    height: usize,
    mask: Vec<bool>,
}

impl EdgeMask {
    pub fn from_image(img: &ImageF) -> Result<Self> {
        let (w, h) = (img.width(), img.height());
        let gray: Vec<f64> = (0..h * w)
            .map(|i| {
                let (r, c) = (i / w, i % w);
                (0..img.channels()).map(|ch| img.get(r, c, ch)).sum::<f64>()
                    / img.channels() as f64
            })
            .collect();
        let at = |r: isize, c: isize| -> f64 {
            let r = r.clamp(0, h as isize - 1) as usize;
            let c = c.clamp(0, w as isize - 1) as usize;
            gray[r * w + c]
        };
        let mut mag = vec![0.0; h * w];
        for r in 0..h as isize {
            for c in 0..w as isize {
                let gx = (at(r - 1, c + 1) + 2.0 * at(r, c + 1) + at(r + 1, c + 1))
                    - (at(r - 1, c - 1) + 2.0 * at(r, c - 1) + at(r + 1, c - 1));
                let gy = (at(r + 1, c - 1) + 2.0 * at(r + 1, c) + at(r + 1, c + 1))
                    - (at(r - 1, c - 1) + 2.0 * at(r - 1, c) + at(r - 1, c + 1));
                mag[r as usize * w + c as usize] = (gx * gx + gy * gy).sqrt();
            }
        }
        let mut sorted = mag.clone();
        sorted.sort_unstable_by(f64::total_cmp);
        // Nearest-rank 90th percentile; >= keeps the mask nonempty even on
        // constant images (every pixel ties at zero).
        let threshold = sorted[(sorted.len() - 1) * 9 / 10];
        let raw: Vec<bool> = mag.iter().map(|m| *m >= threshold).collect();
        let mut mask = vec![false; h * w];
        for r in 0..h as isize {
            for c in 0..w as isize {
                'search: for dr in -1..=1 {
                    for dc in -1..=1 {
                        let (nr, nc) = (r + dr, c + dc);
                        if nr >= 0
                            && nr < h as isize
                            && nc >= 0
                            && nc < w as isize
                            && raw[nr as usize * w + nc as usize]
                        {
                            mask[r as usize * w + c as usize] = true;
                            break 'search;
                        }
                    }
                }
            }
        }
        Ok(EdgeMask {
            width: w,
            height: h,
            mask,
        })
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.mask[r * self.width + c]
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }
}

/// Result of tracking one frame: the refined sub-frame trajectory endpoints,
/// exposure, exposure gaps (filled in by gap estimation), and diagnostics
/// for the tracking log.
#[derive(Debug, Clone)]
pub struct TrackerState {
    pub control: [Pose; 2],
    pub exposure: ExposureParams,
    pub g_prev: f64,
    pub g_next: f64,
    pub iterations: usize,
    pub loss: f64,
    pub grad_norm: f64,
    /// Fraction of edge pixels covered by the map at the initial pose.
    pub coverage: f64,
}

impl TrackerState {
    pub fn trajectory(&self) -> SubFrameTrajectory {
        SubFrameTrajectory::linear(self.control[0], self.control[1])
    }

    pub fn mid(&self) -> Pose {
        self.trajectory().mid()
    }
}

/// Per-pixel weights alpha * W: the mean accumulated opacity where the edge
/// mask is set, zero elsewhere. Treated as constants by the gradient.
fn alpha_mask_weights(mean_alpha: &ImageF, mask: &EdgeMask) -> ImageF {
    let mut weights = mean_alpha.clone();
    for r in 0..mask.height() {
        for c in 0..mask.width() {
            if !mask.get(r, c) {
                weights.set(r, c, 0, 0.0);
            }
        }
    }
    weights
}

/// Weighted mean absolute error over all elements, with its gradient in the
/// rendered image. `weights` is one channel, broadcast across color
/// channels; the zero-difference subgradient is zero.
fn weighted_l1(b: &ImageF, b_gt: &ImageF, weights: &ImageF) -> Result<(f64, ImageF)> {
    if !b.same_shape(b_gt) {
        return Err(b.shape_error(b_gt));
    }
    let n_inv = 1.0 / b.data().len() as f64;
    let mut grad = b.zeros_like();
    let mut loss = 0.0;
    for r in 0..b.height() {
        for c in 0..b.width() {
            let w = weights.get(r, c, 0);
            if w == 0.0 {
                continue;
            }
            for ch in 0..b.channels() {
                let d = b.get(r, c, ch) - b_gt.get(r, c, ch);
                loss += w * d.abs();
                if d != 0.0 {
                    grad.set(r, c, ch, w * d.signum() * n_inv);
                }
            }
        }
    }
    Ok((loss * n_inv, grad))
}

/// Renders the virtual views of `traj` at the standard sample times and
/// synthesizes the exposure-corrected blurry image.
fn render_blurry(
    map: &GaussianMap,
    k: &CameraIntrinsics,
    traj: &SubFrameTrajectory,
    times: &[f64],
    exposure: ExposureParams,
) -> Result<(Vec<Pose>, BlurryRender)> {
    let poses: Vec<Pose> = times
        .iter()
        .map(|t| traj.sample(*t))
        .collect::<Result<_>>()?;
    let stack: Vec<_> = poses
        .iter()
        .map(|p| render(map, k, p))
        .collect::<Result<_>>()?;
    Ok((poses, synthesize_blur(stack, exposure)?))
}

struct LossGradients {
    control: [(Vector3<f64>, Vector3<f64>); 2],
    d_log_gain: f64,
    d_offset: f64,
}

impl LossGradients {
    fn norm(&self) -> f64 {
        let c = &self.control;
        (c[0].0.norm_squared()
            + c[0].1.norm_squared()
            + c[1].0.norm_squared()
            + c[1].1.norm_squared()
            + self.d_log_gain * self.d_log_gain
            + self.d_offset * self.d_offset)
            .sqrt()
    }
}

/// One descent step on the control poses. The gradient pair is split into a
/// symmetric (mid-pose) component stepped at the base rates and an
/// antisymmetric (spread) component scaled by `lr_spread_scale`; the mixing
/// matrix is positive definite for any positive scale, so the step remains
/// a descent direction. `lr_scale` is the current plateau-decay multiplier.
fn step_controls(control: &mut [Pose; 2], grads: &LossGradients, cfg: &TrackerConfig, lr_scale: f64) {
    let (g0r, g0t) = grads.control[0];
    let (g1r, g1t) = grads.control[1];
    let mid_r = 0.5 * (g0r + g1r);
    let mid_t = 0.5 * (g0t + g1t);
    let spread_r = 0.5 * cfg.lr_spread_scale * (g1r - g0r);
    let spread_t = 0.5 * cfg.lr_spread_scale * (g1t - g0t);
    let lr_rot = lr_scale * cfg.lr_rotation;
    let lr_trans = lr_scale * cfg.lr_translation;
    control[0] = control[0].left_update(
        &(-lr_rot * (mid_r - spread_r)),
        &(-lr_trans * (mid_t - spread_t)),
    );
    control[1] = control[1].left_update(
        &(-lr_rot * (mid_r + spread_r)),
        &(-lr_trans * (mid_t + spread_t)),
    );
}

/// Pulls the photometric gradient back through blur synthesis and each
/// virtual render onto the control-pose tangents and exposure parameters.
fn backprop(
    map: &GaussianMap,
    k: &CameraIntrinsics,
    traj: &SubFrameTrajectory,
    times: &[f64],
    poses: &[Pose],
    blurry: &BlurryRender,
    d_blur: &ImageF,
) -> Result<LossGradients> {
    let bg = blur_backward(blurry, d_blur)?;
    let mut control = [
        (Vector3::zeros(), Vector3::zeros()),
        (Vector3::zeros(), Vector3::zeros()),
    ];
    for ((t, pose), upstream) in times.iter().zip(poses).zip(&bg.per_view) {
        let up = UpstreamGrads {
            color: Some(upstream),
            depth: None,
            alpha: None,
        };
        let (_, pg) = crate::render::render_backward(map, k, pose, &up)?;
        traj.linear_chain(*t)?.accumulate(&pg.rot, &pg.trans, &mut control);
    }
    Ok(LossGradients {
        control,
        d_log_gain: bg.d_log_gain(&blurry.exposure),
        d_offset: bg.d_offset,
    })
}

fn poses_bitwise_eq(a: &Pose, b: &Pose) -> bool {
    a.rot.coords() == b.rot.coords() && a.trans == b.trans
}

/// Shared descent core: refines control poses and exposure from the given
/// starting point so the synthesized blurry image matches the observation on
/// mapped edge pixels. Keeps the best-loss state it visits and stops early
/// when the gradient norm falls below the configured threshold.
fn descend(
    map: &GaussianMap,
    k: &CameraIntrinsics,
    observation: &ImageF,
    init_control: [Pose; 2],
    init_exposure: ExposureParams,
    m: usize,
    cfg: &TrackerConfig,
) -> Result<TrackerState> {
    if observation.width() != k.width
        || observation.height() != k.height
        || observation.channels() != 3
    {
        return Err(Error::msg(format!(
            "observation is {}x{}x{}, camera expects {}x{}x3",
            observation.width(),
            observation.height(),
            observation.channels(),
            k.width,
            k.height
        )));
    }
    if m == 0 {
        return Err(Error::msg("tracking needs at least one virtual view"));
    }
    let mask = EdgeMask::from_image(observation)?;
    let times = SubFrameTrajectory::view_times(m);

    // Coverage gate: the loss is uninformative where the map is empty.
    let probe_pose = SubFrameTrajectory::linear(init_control[0], init_control[1]).mid();
    let probe = render(map, k, &probe_pose)?;
    let edge_pixels = mask.count().max(1);
    let covered = (0..k.height)
        .flat_map(|r| (0..k.width).map(move |c| (r, c)))
        .filter(|(r, c)| mask.get(*r, *c) && probe.alpha.get(*r, *c, 0) > ALPHA_COVERED)
        .count();
    let coverage = covered as f64 / edge_pixels as f64;
    if coverage < cfg.min_coverage {
        return Err(Error::Untrackable {
            coverage,
            min: cfg.min_coverage,
        });
    }

    let mut control = init_control;
    let mut exposure = init_exposure;
    let mut best = (f64::INFINITY, control, exposure);
    let mut iterations = 0;
    let mut grad_norm = f64::INFINITY;
    let mut lr_scale = 1.0;
    let mut last_improve = 0;

    for iter in 0..cfg.max_iterations {
        let traj = SubFrameTrajectory::linear(control[0], control[1]);
        let (poses, blurry) = render_blurry(map, k, &traj, &times, exposure)?;
        let weights = alpha_mask_weights(&blurry.mean_alpha, &mask);
        let (loss, d_blur) = weighted_l1(&blurry.color, observation, &weights)?;
        if loss < best.0 {
            best = (loss, control, exposure);
            last_improve = iter;
        } else if iter - last_improve > cfg.plateau_patience {
            lr_scale *= 0.5;
            last_improve = iter;
        }
        let grads = backprop(map, k, &traj, &times, &poses, &blurry, &d_blur)?;
        grad_norm = grads.norm();
        // Coincident control points are blind to blur: every view renders
        // the same image, so the spread direction has exactly zero gradient
        // no matter how blurred the observation is. A small gradient there
        // only proves convergence when the observation is fully explained.
        let coincident = poses_bitwise_eq(&control[0], &control[1]);
        if grad_norm < cfg.early_stop_grad && !(coincident && loss != 0.0) {
            iterations = iter;
            break;
        }
        step_controls(&mut control, &grads, cfg, lr_scale);
        exposure.step(
            -lr_scale * cfg.lr_exposure * grads.d_log_gain,
            -lr_scale * cfg.lr_exposure * grads.d_offset,
        );
        // Coincident controls move in lockstep (their gradients match);
        // split them once so descent can sample the spread direction.
        if coincident {
            let e = Vector3::new(1.0, 1.0, 1.0) / 3f64.sqrt();
            control[0] = control[0].left_update(&(-SPREAD_SEED * e), &(-SPREAD_SEED * e));
            control[1] = control[1].left_update(&(SPREAD_SEED * e), &(SPREAD_SEED * e));
        }
        iterations = iter + 1;
    }

    // The last step was never evaluated; fold it into the best-state search.
    let traj = SubFrameTrajectory::linear(control[0], control[1]);
    let (_, blurry) = render_blurry(map, k, &traj, &times, exposure)?;
    let weights = alpha_mask_weights(&blurry.mean_alpha, &mask);
    let (final_loss, _) = weighted_l1(&blurry.color, observation, &weights)?;
    if final_loss < best.0 {
        best = (final_loss, control, exposure);
    }

    Ok(TrackerState {
        control: best.1,
        exposure: best.2,
        g_prev: 0.0,
        g_next: 0.0,
        iterations,
        loss: best.0,
        grad_norm,
        coverage,
    })
}

/// Refines sub-frame control poses and exposure against the map so the
/// synthesized blurry image matches the observation on mapped edge pixels.
///
/// Both control points start at `init` (a static trajectory at the pose
/// handed over by the factor graph); gradient descent keeps the best-loss
/// state it visits and stops early when the gradient norm falls below the
/// configured threshold.
pub fn track_frame(
    map: &GaussianMap,
    k: &CameraIntrinsics,
    observation: &ImageF,
    init: &Pose,
    m: usize,
    cfg: &TrackerConfig,
) -> Result<TrackerState> {
    descend(map, k, observation, [*init, *init], ExposureParams::identity(), m, cfg)
}

/// Continues the photometric refinement of an already-tracked frame from
/// its current state. A state that already explains the observation is
/// returned unchanged.
pub fn refine_tracked(
    map: &GaussianMap,
    k: &CameraIntrinsics,
    observation: &ImageF,
    state: &TrackerState,
    m: usize,
    cfg: &TrackerConfig,
) -> Result<TrackerState> {
    descend(map, k, observation, state.control, state.exposure, m, cfg)
}

/// Rigidly transports the sub-frame trajectory so its mid-pose lands on the
/// updated global pose, preserving the relative sub-frame motion.
pub fn align_subframe_to_global(state: &TrackerState, target_mid: &Pose) -> TrackerState {
    let mid = state.mid();
    if poses_bitwise_eq(&mid, target_mid) {
        return state.clone();
    }
    let t = target_mid.compose(&mid.inverse());
    let moved = state.trajectory().transport(&t);
    let mut out = state.clone();
    out.control = [moved.control_poses()[0], moved.control_poses()[1]];
    out
}

/// Squared translation distance plus squared rotation angle between the
/// segment pose at `t = 0.5 + g` and the neighbor's boundary pose.
fn gap_objective(segment: &SubFrameTrajectory, near: &Pose, g: f64) -> f64 {
    let p = segment
        .sample(0.5 + g)
        .expect("gap is bounded inside (-0.5, 0.5)");
    let ang = p.rot.angle_to(&near.rot);
    (p.trans - near.trans).norm_squared() + ang * ang
}

/// Minimizes the gap objective over g in (-0.5, 0.5) via a tanh
/// reparameterization: coarse scan (ties keep zero gap), then golden-section
/// refinement of the bracketing interval.
fn best_gap(segment: &SubFrameTrajectory, near: &Pose) -> (f64, f64) {
    let eval = |u: f64| gap_objective(segment, near, 0.5 * u.tanh());
    let (lo, hi, steps) = (-3.0f64, 3.0f64, 60usize);
    let width = (hi - lo) / steps as f64;
    let mut best_u = 0.0;
    let mut best_v = eval(0.0);
    for i in 0..=steps {
        let u = lo + width * i as f64;
        let v = eval(u);
        if v < best_v {
            best_u = u;
            best_v = v;
        }
    }
    let (mut a, mut b) = ((best_u - width).max(lo), (best_u + width).min(hi));
    let inv_phi = 0.5 * (5.0f64.sqrt() - 1.0);
    let mut x1 = b - inv_phi * (b - a);
    let mut x2 = a + inv_phi * (b - a);
    let (mut f1, mut f2) = (eval(x1), eval(x2));
    for _ in 0..90 {
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - inv_phi * (b - a);
            f1 = eval(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + inv_phi * (b - a);
            f2 = eval(x2);
        }
    }
    let u = 0.5 * (a + b);
    (0.5 * u.tanh(), eval(u))
}

/// A neighboring frame (previous or next) used for gap estimation: its
/// blurry observation and the tracking result it already has.
pub struct GapNeighbor<'a> {
    pub observation: &'a ImageF,
    pub state: &'a TrackerState,
}

#[derive(Debug, Clone, Copy)]
pub struct GapEstimate {
    pub g_prev: f64,
    pub g_next: f64,
    /// False when the neighbor was missing or untrackable (gap stays 0).
    pub prev_estimated: bool,
    pub next_estimated: bool,
}

/// Estimates the exposure gaps toward the previous and next frames.
///
/// Each available neighbor's photometric fit is first refreshed against the
/// map with the standard frame-to-model procedure; the gap is then the
/// interpolation point along the segment from this frame's mid-pose to the
/// neighbor's mid-pose (translation lerp, rotation slerp) closest to the
/// neighbor's facing trajectory endpoint. A missing or untrackable neighbor
/// leaves its gap at zero with the flag cleared.
pub fn estimate_exposure_gaps(
    map: &GaussianMap,
    k: &CameraIntrinsics,
    state: &TrackerState,
    prev: Option<GapNeighbor>,
    next: Option<GapNeighbor>,
    m: usize,
    cfg: &TrackerConfig,
) -> Result<GapEstimate> {
    let mid = state.mid();
    let solve = |neighbor: Option<GapNeighbor>, take_end: bool| -> Result<(f64, bool)> {
        let Some(neighbor) = neighbor else {
            return Ok((0.0, false));
        };
        let tracked = match refine_tracked(map, k, neighbor.observation, neighbor.state, m, cfg) {
            Ok(t) => t,
            Err(Error::Untrackable { .. }) => return Ok((0.0, false)),
            Err(e) => return Err(e),
        };
        let near = tracked.control[usize::from(take_end)];
        let segment = SubFrameTrajectory::linear(mid, tracked.mid());
        let (g, _) = best_gap(&segment, &near);
        Ok((g, true))
    };
    let (g_prev, prev_estimated) = solve(prev, true)?;
    let (g_next, next_estimated) = solve(next, false)?;
    Ok(GapEstimate {
        g_prev,
        g_next,
        prev_estimated,
        next_estimated,
    })
}
