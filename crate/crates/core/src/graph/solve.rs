//! Damped Gauss-Newton solvers over the keyframe graph.
//!
//! All three entry points share one residual model: a pixel of the source
//! keyframe is back-projected with its disparity, warped into the target
//! keyframe, and compared against the dense flow target under the flow's
//! per-pixel confidence weight. [`dba_step`] refines window poses and
//! disparities, [`dspo_step`] repairs high-error disparities with an
//! affine-calibrated monocular prior (poses fixed), and [`global_ba`]
//! relaxes the whole graph after loop closures.

use nalgebra::{DMatrix, DVector, Matrix2x6, Matrix3, Vector2, Vector3};

use crate::geom::so3::skew;
use crate::geom::{CameraIntrinsics, Pose};
use crate::img::ImageF;
use crate::{Error, Result};

use super::FactorGraph;

const DIAG_FLOOR: f64 = 1e-12;
const LAMBDA_MIN: f64 = 1e-8;
const GLOBAL_BA_MAX_ITERATIONS: usize = 10;

/// Persistent Levenberg damping state, carried across solver calls so the
/// step size adapts over a sequence of attempts.
#[derive(Debug, Clone, Copy)]
pub struct Damping {
    pub lambda: f64,
}

impl Damping {
    pub fn new(lambda: f64) -> Self {
        Damping { lambda }
    }

    fn accept(&mut self) {
        self.lambda = (0.5 * self.lambda).max(LAMBDA_MIN);
    }

    fn reject(&mut self, lambda_max: f64) {
        self.lambda = (10.0 * self.lambda).min(lambda_max);
    }
}

/// Outcome of one damped Gauss-Newton attempt.
#[derive(Debug, Clone, Copy)]
pub struct StepReport {
    pub cost_before: f64,
    pub cost_after: f64,
    /// Whether the step was kept; a rejected step leaves the graph unchanged.
    pub accepted: bool,
    /// Damping after the accept/reject bookkeeping.
    pub lambda: f64,
}

/// Per-keyframe state change emitted by [`global_ba`], consumed by map
/// deformation and sub-frame trajectory realignment.
#[derive(Debug, Clone)]
pub struct KeyframeDelta {
    pub node: usize,
    pub frame: usize,
    pub old_pose: Pose,
    pub new_pose: Pose,
    pub old_disparity: ImageF,
    pub new_disparity: ImageF,
}

/// Summary of one [`global_ba`] run.
#[derive(Debug)]
pub struct GlobalBaReport {
    pub iterations: usize,
    pub cost_before: f64,
    pub cost_after: f64,
    /// Connected components of the keyframe graph; more than one means some
    /// keyframes are only gauge-anchored within their own component.
    pub components: usize,
    pub deltas: Vec<KeyframeDelta>,
}

/// Rotation matrices and translations of an edge's endpoint poses, cached
/// once per edge per evaluation.
pub(super) struct EdgeFrames {
    r_i: Matrix3<f64>,
    t_i: Vector3<f64>,
    r_j_t: Matrix3<f64>,
    t_j: Vector3<f64>,
}

impl EdgeFrames {
    pub(super) fn new(pose_i: &Pose, pose_j: &Pose) -> Self {
        EdgeFrames {
            r_i: pose_i.rot.to_matrix(),
            t_i: pose_i.trans,
            r_j_t: pose_j.rot.to_matrix().transpose(),
            t_j: pose_j.trans,
        }
    }
}

/// Reprojection residual of one pixel with Jacobians against both endpoint
/// poses (left-update tangent: rotation then translation) and the source
/// pixel's disparity.
pub(super) struct Linearized {
    pub(super) residual: Vector2<f64>,
    pub(super) j_pose_i: Matrix2x6<f64>,
    pub(super) j_pose_j: Matrix2x6<f64>,
    pub(super) j_disp: Vector2<f64>,
}

fn warp_chain(
    k: &CameraIntrinsics,
    frames: &EdgeFrames,
    col: usize,
    row: usize,
    disp: f64,
) -> (Vector3<f64>, Vector3<f64>, Vector3<f64>) {
    let ray = Vector3::new(
        (col as f64 - k.cx) / k.fx,
        (row as f64 - k.cy) / k.fy,
        1.0,
    );
    let rot_ray_over_d = frames.r_i * (ray / disp);
    let x_w = rot_ray_over_d + frames.t_i;
    let x_j = frames.r_j_t * (x_w - frames.t_j);
    (rot_ray_over_d, x_w, x_j)
}

/// Residual only; `None` when the warped point sits at or behind the target
/// near plane (the pixel is skipped for that evaluation).
pub(super) fn pixel_residual(
    k: &CameraIntrinsics,
    frames: &EdgeFrames,
    col: usize,
    row: usize,
    disp: f64,
    target: &Vector2<f64>,
) -> Option<Vector2<f64>> {
    let (_, _, x_j) = warp_chain(k, frames, col, row, disp);
    let (proj, _) = k.project_cam(&x_j).ok()?;
    Some(target - proj)
}

/// Residual plus Jacobians; `None` under the same skip rule.
pub(super) fn linearize_pixel(
    k: &CameraIntrinsics,
    frames: &EdgeFrames,
    col: usize,
    row: usize,
    disp: f64,
    target: &Vector2<f64>,
) -> Option<Linearized> {
    let (rot_ray_over_d, x_w, x_j) = warp_chain(k, frames, col, row, disp);
    let (proj, _) = k.project_cam(&x_j).ok()?;
    let p = k.projection_jacobian(&x_j);

    // x_j = R_j^T (exp(psi_j) R_i (ray/d) + t_i + tau_i - t_j - ups_j) with
    // the perturbations inserted by the decoupled left update; residual is
    // target - proj(x_j), hence the leading minus on every block.
    let d_phi_i = -(frames.r_j_t * skew(&rot_ray_over_d));
    let d_tau_i = frames.r_j_t;
    let d_psi_j = frames.r_j_t * skew(&(x_w - frames.t_j));
    let d_ups_j = -frames.r_j_t;
    let d_disp = -(frames.r_j_t * rot_ray_over_d) / disp;

    let mut j_pose_i = Matrix2x6::zeros();
    j_pose_i
        .fixed_view_mut::<2, 3>(0, 0)
        .copy_from(&(-(p * d_phi_i)));
    j_pose_i
        .fixed_view_mut::<2, 3>(0, 3)
        .copy_from(&(-(p * d_tau_i)));
    let mut j_pose_j = Matrix2x6::zeros();
    j_pose_j
        .fixed_view_mut::<2, 3>(0, 0)
        .copy_from(&(-(p * d_psi_j)));
    j_pose_j
        .fixed_view_mut::<2, 3>(0, 3)
        .copy_from(&(-(p * d_ups_j)));

    Some(Linearized {
        residual: target - proj,
        j_pose_i,
        j_pose_j,
        j_disp: -(p * d_disp),
    })
}

/// Weighted squared reprojection cost of the listed edges.
pub(super) fn reproj_cost(graph: &FactorGraph, edges: &[usize]) -> f64 {
    let k = graph.k;
    let mut cost = 0.0;
    for &e in edges {
        let edge = &graph.edges[e];
        let ni = &graph.nodes[edge.from];
        let nj = &graph.nodes[edge.to];
        let frames = EdgeFrames::new(&ni.pose, &nj.pose);
        for row in 0..k.height {
            for col in 0..k.width {
                let w = edge.flow.weight.get(row, col, 0);
                if w <= 0.0 {
                    continue;
                }
                let target = Vector2::new(
                    edge.flow.target.get(row, col, 0),
                    edge.flow.target.get(row, col, 1),
                );
                let disp = ni.disparity.get(row, col, 0);
                if let Some(r) = pixel_residual(&k, &frames, col, row, disp, &target) {
                    cost += w * r.norm_squared();
                }
            }
        }
    }
    cost
}

/// Normal equations in pose/disparity arrow form. Disparities never couple
/// with each other (each residual reads exactly one source pixel), so their
/// block is the diagonal `c` and the system is solved by a Schur complement
/// onto the pose block.
pub(super) struct NormalEqs {
    pub(super) b: DMatrix<f64>,
    pub(super) e: DMatrix<f64>,
    pub(super) c: DVector<f64>,
    pub(super) rhs_p: DVector<f64>,
    pub(super) rhs_d: DVector<f64>,
}

pub(super) fn assemble(
    graph: &FactorGraph,
    edges: &[usize],
    pose_slot: &[Option<usize>],
    disp_slot: &[Option<usize>],
    n_pose: usize,
    n_disp_blocks: usize,
) -> NormalEqs {
    let k = graph.k;
    let px = k.width * k.height;
    let n_disp = n_disp_blocks * px;
    let mut eqs = NormalEqs {
        b: DMatrix::zeros(6 * n_pose, 6 * n_pose),
        e: DMatrix::zeros(6 * n_pose, n_disp),
        c: DVector::zeros(n_disp),
        rhs_p: DVector::zeros(6 * n_pose),
        rhs_d: DVector::zeros(n_disp),
    };
    for &e in edges {
        let edge = &graph.edges[e];
        let ni = &graph.nodes[edge.from];
        let nj = &graph.nodes[edge.to];
        let si = pose_slot[edge.from];
        let sj = pose_slot[edge.to];
        let block = disp_slot[edge.from];
        if si.is_none() && sj.is_none() && block.is_none() {
            continue;
        }
        let frames = EdgeFrames::new(&ni.pose, &nj.pose);
        for row in 0..k.height {
            for col in 0..k.width {
                let w = edge.flow.weight.get(row, col, 0);
                if w <= 0.0 {
                    continue;
                }
                let target = Vector2::new(
                    edge.flow.target.get(row, col, 0),
                    edge.flow.target.get(row, col, 1),
                );
                let disp = ni.disparity.get(row, col, 0);
                let Some(lin) = linearize_pixel(&k, &frames, col, row, disp, &target) else {
                    continue;
                };
                let d_idx = block.map(|b| b * px + row * k.width + col);
                if let Some(si) = si {
                    let jt = lin.j_pose_i.transpose();
                    let mut bb = eqs.b.fixed_view_mut::<6, 6>(6 * si, 6 * si);
                    bb += w * jt * lin.j_pose_i;
                    let mut rp = eqs.rhs_p.fixed_rows_mut::<6>(6 * si);
                    rp -= w * jt * lin.residual;
                    if let Some(sj) = sj {
                        let cross = w * jt * lin.j_pose_j;
                        let mut bij = eqs.b.fixed_view_mut::<6, 6>(6 * si, 6 * sj);
                        bij += cross;
                        let mut bji = eqs.b.fixed_view_mut::<6, 6>(6 * sj, 6 * si);
                        bji += cross.transpose();
                    }
                    if let Some(d) = d_idx {
                        let mut col_i = eqs.e.fixed_view_mut::<6, 1>(6 * si, d);
                        col_i += w * jt * lin.j_disp;
                    }
                }
                if let Some(sj) = sj {
                    let jt = lin.j_pose_j.transpose();
                    let mut bb = eqs.b.fixed_view_mut::<6, 6>(6 * sj, 6 * sj);
                    bb += w * jt * lin.j_pose_j;
                    let mut rp = eqs.rhs_p.fixed_rows_mut::<6>(6 * sj);
                    rp -= w * jt * lin.residual;
                    if let Some(d) = d_idx {
                        let mut col_j = eqs.e.fixed_view_mut::<6, 1>(6 * sj, d);
                        col_j += w * jt * lin.j_disp;
                    }
                }
                if let Some(d) = d_idx {
                    eqs.c[d] += w * lin.j_disp.norm_squared();
                    eqs.rhs_d[d] -= w * lin.j_disp.dot(&lin.residual);
                }
            }
        }
    }
    eqs
}

/// Solves the damped normal equations; `None` when the Schur complement is
/// not positive definite at this damping.
fn solve_damped(eqs: &NormalEqs, lambda: f64) -> Option<(DVector<f64>, DVector<f64>)> {
    let np = eqs.rhs_p.len();
    let nd = eqs.c.len();
    let c_inv = DVector::from_fn(nd, |i, _| {
        let damped = eqs.c[i] * (1.0 + lambda);
        1.0 / damped.max(DIAG_FLOOR)
    });
    if np == 0 {
        let dd = c_inv.component_mul(&eqs.rhs_d);
        return Some((DVector::zeros(0), dd));
    }
    let mut b = eqs.b.clone();
    for i in 0..np {
        b[(i, i)] = (b[(i, i)] * (1.0 + lambda)).max(DIAG_FLOOR);
    }
    // E C^-1, reused for both the Schur complement and its right-hand side.
    let mut e_cinv = eqs.e.clone();
    for (j, mut col) in e_cinv.column_iter_mut().enumerate() {
        col *= c_inv[j];
    }
    let s = &b - &e_cinv * eqs.e.transpose();
    let rhs_s = &eqs.rhs_p - &e_cinv * &eqs.rhs_d;
    let chol = s.cholesky()?;
    let dp = chol.solve(&rhs_s);
    let dd = c_inv.component_mul(&(&eqs.rhs_d - eqs.e.transpose() * &dp));
    Some((dp, dd))
}

fn apply_deltas(
    graph: &mut FactorGraph,
    pose_slot: &[Option<usize>],
    disp_slot: &[Option<usize>],
    dp: &DVector<f64>,
    dd: &DVector<f64>,
    min_disparity: f64,
) {
    let px = graph.k.width * graph.k.height;
    for (idx, node) in graph.nodes.iter_mut().enumerate() {
        if let Some(s) = pose_slot[idx] {
            let phi = Vector3::new(dp[6 * s], dp[6 * s + 1], dp[6 * s + 2]);
            let tau = Vector3::new(dp[6 * s + 3], dp[6 * s + 4], dp[6 * s + 5]);
            node.pose = node.pose.left_update(&phi, &tau);
        }
        if let Some(b) = disp_slot[idx] {
            for (p, d) in node.disparity.data_mut().iter_mut().enumerate() {
                *d = (*d + dd[b * px + p]).max(min_disparity);
            }
        }
    }
}

/// One Levenberg attempt over the given residual set: assemble, solve
/// (escalating damping past singular systems), apply, then keep or roll
/// back by comparing cost.
fn lm_step(
    graph: &mut FactorGraph,
    edges: &[usize],
    pose_slot: &[Option<usize>],
    disp_slot: &[Option<usize>],
    n_pose: usize,
    n_disp_blocks: usize,
    damping: &mut Damping,
) -> Result<StepReport> {
    let lambda_max = graph.config.lambda_max;
    let min_disparity = graph.config.min_disparity;
    let cost_before = reproj_cost(graph, edges);
    let eqs = assemble(graph, edges, pose_slot, disp_slot, n_pose, n_disp_blocks);
    let (dp, dd) = loop {
        match solve_damped(&eqs, damping.lambda) {
            Some(sol) => break sol,
            None if damping.lambda >= lambda_max => {
                return Err(Error::SolveFailed {
                    what: "reprojection normal equations are not positive definite".into(),
                })
            }
            None => damping.reject(lambda_max),
        }
    };
    let saved: Vec<(usize, Pose, Option<ImageF>)> = graph
        .nodes
        .iter()
        .enumerate()
        .filter(|(i, _)| pose_slot[*i].is_some() || disp_slot[*i].is_some())
        .map(|(i, n)| {
            let disp = disp_slot[i].is_some().then(|| n.disparity.clone());
            (i, n.pose, disp)
        })
        .collect();
    apply_deltas(graph, pose_slot, disp_slot, &dp, &dd, min_disparity);
    let cost_after = reproj_cost(graph, edges);
    let accepted = cost_after.is_finite() && cost_after <= cost_before;
    if accepted {
        damping.accept();
    } else {
        for (i, pose, disp) in saved {
            graph.nodes[i].pose = pose;
            if let Some(d) = disp {
                graph.nodes[i].disparity = d;
            }
        }
        damping.reject(lambda_max);
    }
    Ok(StepReport {
        cost_before,
        cost_after,
        accepted,
        lambda: damping.lambda,
    })
}

fn check_window(graph: &FactorGraph, window: &[usize]) -> Result<()> {
    if window.is_empty() {
        return Err(Error::EmptyWindow);
    }
    for &i in window {
        if i >= graph.nodes.len() {
            return Err(Error::UnknownKeyframe { id: i });
        }
    }
    Ok(())
}

/// One damped Gauss-Newton attempt of dense bundle adjustment over the
/// window: window poses and disparities move jointly against every edge
/// touching the window. The first keyframe of the graph (node 0) is the
/// gauge anchor and never moves; keyframes outside the window are held
/// fixed and act as boundary constraints.
pub fn dba_step(
    graph: &mut FactorGraph,
    window: &[usize],
    damping: &mut Damping,
) -> Result<StepReport> {
    check_window(graph, window)?;
    if window.len() < 2 {
        return Err(Error::msg("bundle adjustment needs a window of at least 2 keyframes"));
    }
    let n = graph.nodes.len();
    let mut pose_slot = vec![None; n];
    let mut disp_slot = vec![None; n];
    let (mut n_pose, mut n_disp) = (0, 0);
    for &i in window {
        if i != 0 && pose_slot[i].is_none() {
            pose_slot[i] = Some(n_pose);
            n_pose += 1;
        }
        if disp_slot[i].is_none() {
            disp_slot[i] = Some(n_disp);
            n_disp += 1;
        }
    }
    let mut in_window = vec![false; n];
    for &i in window {
        in_window[i] = true;
    }
    let edges: Vec<usize> = graph
        .edges
        .iter()
        .enumerate()
        .filter(|(_, e)| in_window[e.from] || in_window[e.to])
        .map(|(i, _)| i)
        .collect();
    if edges.is_empty() {
        return Err(Error::msg("bundle adjustment window touches no edges"));
    }
    lm_step(graph, &edges, &pose_slot, &disp_slot, n_pose, n_disp, damping)
}

/// Per-node data behind one disparity-scale attempt: the indices of the
/// high-error pixels plus the (theta, gamma) affine calibration solved
/// jointly with them.
pub(super) struct DspoSystem {
    pub(super) node: usize,
    pub(super) high: Vec<usize>,
    pub(super) edges: Vec<usize>,
}

pub(super) fn dspo_node_cost(graph: &FactorGraph, sys: &DspoSystem) -> f64 {
    let k = graph.k;
    let node = &graph.nodes[sys.node];
    let (alpha1, alpha2) = (graph.config.alpha1, graph.config.alpha2);
    let mut cost = 0.0;
    for &e in &sys.edges {
        let edge = &graph.edges[e];
        let nj = &graph.nodes[edge.to];
        let frames = EdgeFrames::new(&node.pose, &nj.pose);
        for &p in &sys.high {
            let (row, col) = (p / k.width, p % k.width);
            let w = edge.flow.weight.get(row, col, 0);
            if w <= 0.0 {
                continue;
            }
            let target = Vector2::new(
                edge.flow.target.get(row, col, 0),
                edge.flow.target.get(row, col, 1),
            );
            let disp = node.disparity.data()[p];
            if let Some(r) = pixel_residual(&k, &frames, col, row, disp, &target) {
                cost += w * r.norm_squared();
            }
        }
    }
    for (p, (&d, &m)) in node
        .disparity
        .data()
        .iter()
        .zip(node.mono_disparity.data())
        .enumerate()
    {
        let alpha = if node.valid[p] { alpha2 } else { alpha1 };
        let r = d - (node.theta * m + node.gamma);
        cost += alpha * r * r;
    }
    cost
}

/// Normal equations of one per-node disparity-scale system: parameters are
/// the high-error disparities in `sys.high` order, then theta, then gamma.
pub(super) fn dspo_normal_eqs(graph: &FactorGraph, sys: &DspoSystem) -> (DMatrix<f64>, DVector<f64>) {
    let k = graph.k;
    let node = &graph.nodes[sys.node];
    let (alpha1, alpha2) = (graph.config.alpha1, graph.config.alpha2);
    let nh = sys.high.len();
    let np = nh + 2;
    let (ti, gi) = (nh, nh + 1);
    let mut a: DMatrix<f64> = DMatrix::zeros(np, np);
    let mut rhs: DVector<f64> = DVector::zeros(np);
    let mut slot_of = vec![usize::MAX; node.valid.len()];
    for (s, &p) in sys.high.iter().enumerate() {
        slot_of[p] = s;
    }
    for &e in &sys.edges {
        let edge = &graph.edges[e];
        let nj = &graph.nodes[edge.to];
        let frames = EdgeFrames::new(&node.pose, &nj.pose);
        for &p in &sys.high {
            let (row, col) = (p / k.width, p % k.width);
            let w = edge.flow.weight.get(row, col, 0);
            if w <= 0.0 {
                continue;
            }
            let target = Vector2::new(
                edge.flow.target.get(row, col, 0),
                edge.flow.target.get(row, col, 1),
            );
            let disp = node.disparity.data()[p];
            let Some(lin) = linearize_pixel(&k, &frames, col, row, disp, &target) else {
                continue;
            };
            let s = slot_of[p];
            a[(s, s)] += w * lin.j_disp.norm_squared();
            rhs[s] -= w * lin.j_disp.dot(&lin.residual);
        }
    }
    for (p, (&d, &m)) in node
        .disparity
        .data()
        .iter()
        .zip(node.mono_disparity.data())
        .enumerate()
    {
        let r = d - (node.theta * m + node.gamma);
        if node.valid[p] {
            // Low-error pixel: d is fixed, only (theta, gamma) move.
            a[(ti, ti)] += alpha2 * m * m;
            a[(ti, gi)] += alpha2 * m;
            a[(gi, ti)] += alpha2 * m;
            a[(gi, gi)] += alpha2;
            rhs[ti] += alpha2 * r * m;
            rhs[gi] += alpha2 * r;
        } else {
            let s = slot_of[p];
            a[(s, s)] += alpha1;
            a[(s, ti)] -= alpha1 * m;
            a[(ti, s)] -= alpha1 * m;
            a[(s, gi)] -= alpha1;
            a[(gi, s)] -= alpha1;
            a[(ti, ti)] += alpha1 * m * m;
            a[(ti, gi)] += alpha1 * m;
            a[(gi, ti)] += alpha1 * m;
            a[(gi, gi)] += alpha1;
            rhs[s] -= alpha1 * r;
            rhs[ti] += alpha1 * r * m;
            rhs[gi] += alpha1 * r;
        }
    }
    (a, rhs)
}

/// Solves one damped per-node system; `None` when not positive definite.
fn dspo_solve_node(graph: &FactorGraph, sys: &DspoSystem, lambda: f64) -> Option<DVector<f64>> {
    let (mut a, rhs) = dspo_normal_eqs(graph, sys);
    let np = rhs.len();
    for i in 0..np {
        a[(i, i)] = (a[(i, i)] * (1.0 + lambda)).max(DIAG_FLOOR);
    }
    let chol = a.cholesky()?;
    Some(chol.solve(&rhs))
}

/// One damped Gauss-Newton attempt of disparity-scale optimization over the
/// window. Poses and low-error disparities stay fixed; each node's
/// high-error disparities and its (theta, gamma) monocular calibration move
/// against the flow plus the affine mono prior. On the first visit of a
/// node, (theta, gamma) are initialized by least squares of its low-error
/// disparities against the mono cue; a node whose fit is impossible fails
/// the whole step with the graph untouched.
pub fn dspo_step(
    graph: &mut FactorGraph,
    window: &[usize],
    damping: &mut Damping,
) -> Result<StepReport> {
    check_window(graph, window)?;
    let lambda_max = graph.config.lambda_max;
    let min_disparity = graph.config.min_disparity;

    // Stage all first-visit affine fits before mutating anything, so a fit
    // failure on any node leaves the graph exactly as it was.
    let mut fits = Vec::new();
    for &i in window {
        let node = &graph.nodes[i];
        if !node.scale_fitted {
            let (theta, gamma) =
                crate::gaussians::fit_scale_shift(&node.mono_disparity, &node.disparity, &node.valid)?;
            fits.push((i, theta, gamma));
        }
    }
    for (i, theta, gamma) in fits {
        let node = &mut graph.nodes[i];
        node.theta = theta;
        node.gamma = gamma;
        node.scale_fitted = true;
    }

    let systems: Vec<DspoSystem> = window
        .iter()
        .map(|&i| {
            let high = graph.nodes[i]
                .valid
                .iter()
                .enumerate()
                .filter(|(_, &ok)| !ok)
                .map(|(p, _)| p)
                .collect();
            let edges = graph
                .edges
                .iter()
                .enumerate()
                .filter(|(_, e)| e.from == i)
                .map(|(idx, _)| idx)
                .collect();
            DspoSystem { node: i, high, edges }
        })
        .collect();

    let cost_before: f64 = systems.iter().map(|s| dspo_node_cost(graph, s)).sum();
    let deltas = loop {
        let mut all = Vec::with_capacity(systems.len());
        let mut singular = false;
        for sys in &systems {
            match dspo_solve_node(graph, sys, damping.lambda) {
                Some(d) => all.push(d),
                None => {
                    singular = true;
                    break;
                }
            }
        }
        if !singular {
            break all;
        }
        if damping.lambda >= lambda_max {
            return Err(Error::SolveFailed {
                what: "disparity-scale normal equations are not positive definite".into(),
            });
        }
        damping.reject(lambda_max);
    };

    let saved: Vec<(ImageF, f64, f64)> = systems
        .iter()
        .map(|s| {
            let n = &graph.nodes[s.node];
            (n.disparity.clone(), n.theta, n.gamma)
        })
        .collect();
    for (sys, delta) in systems.iter().zip(&deltas) {
        let node = &mut graph.nodes[sys.node];
        let data = node.disparity.data_mut();
        for (s, &p) in sys.high.iter().enumerate() {
            data[p] = (data[p] + delta[s]).max(min_disparity);
        }
        node.theta += delta[sys.high.len()];
        node.gamma += delta[sys.high.len() + 1];
    }
    let cost_after: f64 = systems.iter().map(|s| dspo_node_cost(graph, s)).sum();
    let accepted = cost_after.is_finite() && cost_after <= cost_before;
    if accepted {
        damping.accept();
    } else {
        for (sys, (disp, theta, gamma)) in systems.iter().zip(saved) {
            let node = &mut graph.nodes[sys.node];
            node.disparity = disp;
            node.theta = theta;
            node.gamma = gamma;
        }
        damping.reject(lambda_max);
    }
    Ok(StepReport {
        cost_before,
        cost_after,
        accepted,
        lambda: damping.lambda,
    })
}

pub(super) fn median(values: &mut [f64]) -> f64 {
    values.sort_unstable_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Connected components of the node set under the edge relation; returns a
/// component id per node.
fn components(n: usize, edges: &[(usize, usize)]) -> (usize, Vec<usize>) {
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], x: usize) -> usize {
        let mut root = x;
        while parent[root] != root {
            root = parent[root];
        }
        let mut cur = x;
        while parent[cur] != root {
            let next = parent[cur];
            parent[cur] = root;
            cur = next;
        }
        root
    }
    for &(a, b) in edges {
        let ra = find(&mut parent, a);
        let rb = find(&mut parent, b);
        if ra != rb {
            parent[ra.max(rb)] = ra.min(rb);
        }
    }
    let mut ids = vec![usize::MAX; n];
    let mut count = 0;
    for i in 0..n {
        let root = find(&mut parent, i);
        if ids[root] == usize::MAX {
            ids[root] = count;
            count += 1;
        }
        ids[i] = ids[root];
    }
    (count, ids)
}

/// Full-graph relaxation after loop closures. Disparities are normalized so
/// their global median is one (translations rescaled to match), every edge
/// is optimized with damped Gauss-Newton holding the lowest-index pose of
/// each connected component fixed as gauge, and the scale normalization is
/// undone afterwards. Returns per-keyframe pose/disparity deltas for map
/// deformation and sub-frame realignment.
pub fn global_ba(graph: &mut FactorGraph) -> Result<GlobalBaReport> {
    if graph.nodes.is_empty() {
        return Err(Error::EmptyWindow);
    }
    let old: Vec<(Pose, ImageF)> = graph
        .nodes
        .iter()
        .map(|n| (n.pose, n.disparity.clone()))
        .collect();

    let mut all: Vec<f64> = graph
        .nodes
        .iter()
        .flat_map(|n| n.disparity.data().iter().copied())
        .collect();
    let sigma = median(&mut all);
    if sigma.is_nan() || sigma <= 0.0 {
        return Err(Error::msg(format!("median disparity must be > 0, got {sigma}")));
    }
    for node in &mut graph.nodes {
        for d in node.disparity.data_mut() {
            *d /= sigma;
        }
        node.pose.trans *= sigma;
    }

    let n = graph.nodes.len();
    let pairs: Vec<(usize, usize)> = graph.edges.iter().map(|e| (e.from, e.to)).collect();
    let (n_components, comp_of) = components(n, &pairs);
    if n_components > 1 {
        log::warn!(
            "keyframe graph has {n_components} connected components; poses are only consistent within each component"
        );
    }
    // Gauge: the lowest-index node of every component stays fixed.
    let mut anchored: Vec<bool> = vec![false; n_components];
    let mut pose_slot = vec![None; n];
    let mut disp_slot = vec![None; n];
    let (mut n_pose, mut n_disp) = (0, 0);
    for i in 0..n {
        if !anchored[comp_of[i]] {
            anchored[comp_of[i]] = true;
        } else {
            pose_slot[i] = Some(n_pose);
            n_pose += 1;
        }
        disp_slot[i] = Some(n_disp);
        n_disp += 1;
    }
    let edges: Vec<usize> = (0..graph.edges.len()).collect();

    let cost_before = reproj_cost(graph, &edges);
    let mut damping = Damping::new(graph.config.lambda_init);
    let mut cost_after = cost_before;
    let mut iterations = 0;
    while iterations < GLOBAL_BA_MAX_ITERATIONS {
        let report = lm_step(
            graph,
            &edges,
            &pose_slot,
            &disp_slot,
            n_pose,
            n_disp,
            &mut damping,
        )?;
        iterations += 1;
        cost_after = if report.accepted {
            report.cost_after
        } else {
            report.cost_before
        };
        let improved = report.cost_before - report.cost_after;
        if report.accepted && improved <= 1e-12 * report.cost_before.max(1.0) {
            break;
        }
        if !report.accepted && damping.lambda >= graph.config.lambda_max {
            break;
        }
    }

    for node in &mut graph.nodes {
        for d in node.disparity.data_mut() {
            *d *= sigma;
        }
        node.pose.trans /= sigma;
    }

    let deltas = graph
        .nodes
        .iter()
        .enumerate()
        .zip(old)
        .map(|((node, n), (old_pose, old_disparity))| KeyframeDelta {
            node,
            frame: n.frame,
            old_pose,
            new_pose: n.pose,
            old_disparity,
            new_disparity: n.disparity.clone(),
        })
        .collect();

    Ok(GlobalBaReport {
        iterations,
        cost_before,
        cost_after,
        components: n_components,
        deltas,
    })
}
