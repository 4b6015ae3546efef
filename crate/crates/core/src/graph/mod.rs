//! Flow-driven keyframe factor graph.
//!
//! Nodes hold keyframe poses and dense per-pixel disparities on a reduced
//! grid; edges hold dense flow targets between keyframe pairs. Bundle
//! adjustment ([`dba_step`]) refines poses and disparities jointly against
//! the flow; disparity-scale optimization ([`dspo_step`]) repairs
//! high-error disparities using affine-calibrated monocular cues; loop
//! edges plus [`global_ba`] keep the whole trajectory consistent.

mod provider;
mod solve;

use nalgebra::Vector3;
use serde::Serialize;

use crate::geom::{CameraIntrinsics, Pose};
use crate::img::ImageF;
use crate::{Error, Result};

pub use provider::{FlowField, FlowProvider, OracleFlowProvider, OracleMonoDepth};
pub use solve::{dba_step, dspo_step, global_ba, Damping, GlobalBaReport, KeyframeDelta, StepReport};

/// Thresholds and weights for graph maintenance and its solvers.
#[derive(Debug, Clone)]
pub struct GraphConfig {
    /// Mean-flow threshold (pixels) above which a frame becomes a keyframe.
    pub tau_f: f64,
    /// Mean-flow threshold (pixels) below which a distant pair closes a loop.
    pub tau_loop: f64,
    /// Minimum keyframe-index gap (strict) for loop candidates.
    pub tau_t: usize,
    /// Weight of the mono prior on high-error disparities.
    pub alpha1: f64,
    /// Weight of the mono prior on low-error (fixed) disparities.
    pub alpha2: f64,
    /// Consistency distance threshold, as a fraction of mean depth.
    pub eta: f64,
    /// Minimum two-view consistency count for a disparity to rank low-error.
    pub n_min: u32,
    /// Lower clamp keeping disparities strictly positive through updates.
    pub min_disparity: f64,
    /// Initial Levenberg damping for fresh solver state.
    pub lambda_init: f64,
    /// Damping ceiling; a still-singular system past this ceiling is an error.
    pub lambda_max: f64,
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig {
            tau_f: 2.5,
            tau_loop: 50.0,
            tau_t: 20,
            alpha1: 0.01,
            alpha2: 0.1,
            eta: 0.01,
            n_min: 2,
            min_disparity: 1e-6,
            lambda_init: 1e-4,
            lambda_max: 1e10,
        }
    }
}

/// One keyframe: pose plus dense disparity state on the reduced grid.
#[derive(Debug, Clone)]
pub struct GraphNode {
    /// Index of the source frame in the input sequence.
    pub frame: usize,
    /// Camera-to-world mid-exposure pose.
    pub pose: Pose,
    /// Per-pixel disparity (inverse depth), single channel, entries > 0.
    pub disparity: ImageF,
    /// Low-error mask: `true` pixels are trusted (d^l), `false` pixels are
    /// the high-error set (d^h) that the mono prior may rewrite.
    pub valid: Vec<bool>,
    /// Latest two-view consistency counts behind `valid`.
    pub consistency: Vec<u32>,
    /// Monocular disparity cue for this frame.
    pub mono_disparity: ImageF,
    /// Affine calibration mapping mono disparity into metric disparity.
    pub theta: f64,
    pub gamma: f64,
    /// Whether (theta, gamma) have been least-squares initialized yet.
    pub scale_fitted: bool,
}

/// Edge category; loop edges stay unidirectional, odometry edges come in
/// forward/backward pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeKind {
    Odometry,
    Loop,
}

/// Directed flow-residual edge: pixels of node `from` warp into node `to`.
#[derive(Debug, Clone)]
pub struct GraphEdge {
    pub from: usize,
    pub to: usize,
    pub kind: EdgeKind,
    pub flow: FlowField,
}

/// Everything needed to enroll a frame as a keyframe.
#[derive(Debug, Clone)]
pub struct KeyframeCandidate {
    pub frame: usize,
    pub pose: Pose,
    pub disparity: ImageF,
    pub mono_disparity: ImageF,
}

/// Summary of one disparity classification pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClassifyReport {
    pub low_error: usize,
    pub high_error: usize,
}

/// Keyframe graph over poses and disparities with dense flow edges.
#[derive(Clone)]
pub struct FactorGraph {
    k: CameraIntrinsics,
    pub config: GraphConfig,
    nodes: Vec<GraphNode>,
    edges: Vec<GraphEdge>,
}

impl FactorGraph {
    /// `k` is the reduced-resolution camera shared by every disparity grid
    /// and flow field in this graph.
    pub fn new(k: CameraIntrinsics, config: GraphConfig) -> Self {
        FactorGraph {
            k,
            config,
            nodes: Vec::new(),
            edges: Vec::new(),
        }
    }

    pub fn intrinsics(&self) -> &CameraIntrinsics {
        &self.k
    }

    pub fn nodes(&self) -> &[GraphNode] {
        &self.nodes
    }

    pub fn edges(&self) -> &[GraphEdge] {
        &self.edges
    }

    pub fn node(&self, idx: usize) -> Result<&GraphNode> {
        self.nodes.get(idx).ok_or(Error::UnknownKeyframe { id: idx })
    }

    pub fn node_mut(&mut self, idx: usize) -> Result<&mut GraphNode> {
        self.nodes.get_mut(idx).ok_or(Error::UnknownKeyframe { id: idx })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Node indices of the trailing window of up to `size` keyframes.
    pub fn tail_window(&self, size: usize) -> Vec<usize> {
        let start = self.nodes.len().saturating_sub(size);
        (start..self.nodes.len()).collect()
    }

    fn validate_candidate(&self, cand: &KeyframeCandidate) -> Result<()> {
        for (name, img, channels) in [
            ("disparity", &cand.disparity, 1),
            ("mono disparity", &cand.mono_disparity, 1),
        ] {
            if img.width() != self.k.width || img.height() != self.k.height || img.channels() != channels
            {
                return Err(Error::msg(format!(
                    "keyframe {name} must be {}x{}x{channels}, got {}x{}x{}",
                    self.k.height,
                    self.k.width,
                    img.height(),
                    img.width(),
                    img.channels()
                )));
            }
        }
        if cand.disparity.data().iter().any(|&d| d.is_nan() || d <= 0.0) {
            return Err(Error::msg("keyframe disparities must all be > 0"));
        }
        Ok(())
    }

    fn push_node(&mut self, cand: KeyframeCandidate) -> usize {
        let pixels = self.k.width * self.k.height;
        self.nodes.push(GraphNode {
            frame: cand.frame,
            pose: cand.pose,
            disparity: cand.disparity,
            valid: vec![true; pixels],
            consistency: vec![0; pixels],
            mono_disparity: cand.mono_disparity,
            theta: 1.0,
            gamma: 0.0,
            scale_fitted: false,
        });
        self.nodes.len() - 1
    }

    /// Enrolls the first keyframe unconditionally.
    pub fn add_first_keyframe(&mut self, cand: KeyframeCandidate) -> Result<usize> {
        if !self.nodes.is_empty() {
            return Err(Error::msg("graph already has keyframes; use maybe_add_keyframe"));
        }
        self.validate_candidate(&cand)?;
        Ok(self.push_node(cand))
    }

    /// Enrolls `cand` as a keyframe iff its mean flow from the last keyframe
    /// strictly exceeds `tau_f`; on enrollment a forward/backward odometry
    /// edge pair to the previous keyframe is created. Returns the new node
    /// index, or `None` when the frame was skipped.
    pub fn maybe_add_keyframe(
        &mut self,
        cand: KeyframeCandidate,
        provider: &dyn FlowProvider,
    ) -> Result<Option<usize>> {
        let Some(last) = self.nodes.last() else {
            return Err(Error::msg("add_first_keyframe must run before maybe_add_keyframe"));
        };
        self.validate_candidate(&cand)?;
        let forward = provider.flow(last.frame, cand.frame)?;
        if forward.mean_magnitude <= self.config.tau_f {
            return Ok(None);
        }
        let backward = provider.flow(cand.frame, last.frame)?;
        let prev_idx = self.nodes.len() - 1;
        let new_idx = self.push_node(cand);
        self.edges.push(GraphEdge {
            from: prev_idx,
            to: new_idx,
            kind: EdgeKind::Odometry,
            flow: forward,
        });
        self.edges.push(GraphEdge {
            from: new_idx,
            to: prev_idx,
            kind: EdgeKind::Odometry,
            flow: backward,
        });
        Ok(Some(new_idx))
    }

    /// Classifies node `idx`'s disparities by global two-view consistency:
    /// each pixel is back-projected with its depth and compared, in 3D,
    /// against the back-projection of its correspondence in every other
    /// keyframe; pixels agreeing with at least `n_min` other keyframes are
    /// low-error, the rest form the high-error set.
    pub fn classify_disparities(&mut self, idx: usize) -> Result<ClassifyReport> {
        if self.nodes.len() < 2 {
            return Err(Error::msg("disparity classification needs at least 2 keyframes"));
        }
        if idx >= self.nodes.len() {
            return Err(Error::UnknownKeyframe { id: idx });
        }
        let (h, w) = (self.k.height, self.k.width);
        let node = &self.nodes[idx];
        let mean_depth = node
            .disparity
            .data()
            .iter()
            .map(|&d| 1.0 / d)
            .sum::<f64>()
            / node.disparity.data().len() as f64;
        let radius = self.config.eta * mean_depth;
        let mut counts = vec![0u32; w * h];
        for other in 0..self.nodes.len() {
            if other == idx {
                continue;
            }
            let them = &self.nodes[other];
            for r in 0..h {
                for c in 0..w {
                    let depth = 1.0 / node.disparity.get(r, c, 0);
                    let src = nalgebra::Vector2::new(c as f64, r as f64);
                    let p_i = self.k.unproject_world(&node.pose, &src, depth);
                    let in_other = them.pose.transform_inv(&p_i);
                    let Ok((proj, _)) = self.k.project_cam(&in_other) else {
                        continue;
                    };
                    let (uc, vr) = (proj.x.round(), proj.y.round());
                    if uc < 0.0 || vr < 0.0 || uc >= w as f64 || vr >= h as f64 {
                        continue;
                    }
                    let (oc, or) = (uc as usize, vr as usize);
                    let other_depth = 1.0 / them.disparity.get(or, oc, 0);
                    let p_k = self.k.unproject_world(
                        &them.pose,
                        &nalgebra::Vector2::new(uc, vr),
                        other_depth,
                    );
                    if (p_i - p_k).norm() < radius {
                        counts[r * w + c] += 1;
                    }
                }
            }
        }
        let node = &mut self.nodes[idx];
        let mut report = ClassifyReport {
            low_error: 0,
            high_error: 0,
        };
        for (pixel, &n) in counts.iter().enumerate() {
            let ok = n >= self.config.n_min;
            node.valid[pixel] = ok;
            if ok {
                report.low_error += 1;
            } else {
                report.high_error += 1;
            }
        }
        node.consistency = counts;
        Ok(report)
    }

    /// Scans pairs of an active-window keyframe against every keyframe
    /// before the window whose keyframe-index gap strictly exceeds `tau_t`;
    /// every pair whose mean flow is strictly below `tau_loop` gains one
    /// unidirectional loop edge (active -> past). Returns the (from, to)
    /// node pairs added.
    pub fn detect_loops(
        &mut self,
        window: &[usize],
        provider: &dyn FlowProvider,
    ) -> Result<Vec<(usize, usize)>> {
        let mut in_window = vec![false; self.nodes.len()];
        for &i in window {
            if i >= self.nodes.len() {
                return Err(Error::UnknownKeyframe { id: i });
            }
            in_window[i] = true;
        }
        let mut added = Vec::new();
        for &i in window {
            for j in 0..self.nodes.len() {
                if i <= j || i - j <= self.config.tau_t || in_window[j] {
                    continue;
                }
                let exists = self
                    .edges
                    .iter()
                    .any(|e| e.kind == EdgeKind::Loop && e.from == i && e.to == j);
                if exists {
                    continue;
                }
                let flow = provider.flow(self.nodes[i].frame, self.nodes[j].frame)?;
                if flow.mean_magnitude < self.config.tau_loop {
                    self.edges.push(GraphEdge {
                        from: i,
                        to: j,
                        kind: EdgeKind::Loop,
                        flow,
                    });
                    added.push((i, j));
                }
            }
        }
        Ok(added)
    }

    /// Serializable snapshot of graph topology and calibration state.
    pub fn dump(&self) -> GraphDump {
        GraphDump {
            nodes: self
                .nodes
                .iter()
                .enumerate()
                .map(|(idx, n)| NodeDump {
                    node: idx,
                    frame: n.frame,
                    rotation_wxyz: n.pose.rot.coords(),
                    translation: [n.pose.trans.x, n.pose.trans.y, n.pose.trans.z],
                    theta: n.theta,
                    gamma: n.gamma,
                })
                .collect(),
            edges: self
                .edges
                .iter()
                .map(|e| EdgeDump {
                    from: e.from,
                    to: e.to,
                    kind: e.kind,
                    mean_flow: e.flow.mean_magnitude,
                })
                .collect(),
        }
    }

    /// Positions of all keyframes, in node order (drift diagnostics).
    pub fn positions(&self) -> Vec<Vector3<f64>> {
        self.nodes.iter().map(|n| n.pose.trans).collect()
    }

    /// Total weighted squared reprojection cost over all edges.
    pub fn total_cost(&self) -> f64 {
        let edges: Vec<usize> = (0..self.edges.len()).collect();
        solve::reproj_cost(self, &edges)
    }
}

/// JSON-facing graph snapshot.
#[derive(Debug, Serialize)]
pub struct GraphDump {
    pub nodes: Vec<NodeDump>,
    pub edges: Vec<EdgeDump>,
}

#[derive(Debug, Serialize)]
pub struct NodeDump {
    pub node: usize,
    pub frame: usize,
    pub rotation_wxyz: [f64; 4],
    pub translation: [f64; 3],
    pub theta: f64,
    pub gamma: f64,
}

#[derive(Debug, Serialize)]
pub struct EdgeDump {
    pub from: usize,
    pub to: usize,
    pub kind: EdgeKind,
    pub mean_flow: f64,
}

#[cfg(test)]
mod tests;
