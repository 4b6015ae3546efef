//! The 3D Gaussian scene representation.
//!
//! A map is a flat collection of anisotropic Gaussians plus an index from
//! keyframe id to the Gaussians anchored there (used by deformation and
//! visibility pruning). Structural mutations (insert/densify/prune) bump a
//! generation counter so statistics gathered from renders of an older map
//! state are rejected instead of silently misapplied.

mod deform;
mod depth;
mod ply;

pub use deform::{deform, DeformStats};
pub use depth::{
    fit_scale_shift, fuse_proxy_depth, initialize_from_depth, map_from_first_keyframe,
    DepthSource, ProxyDepthMap,
};
pub use ply::{read_ply, write_ply};

use crate::error::{Error, Result};
use crate::geom::Quaternion;
use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use std::collections::BTreeMap;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// One anisotropic 3D Gaussian.
///
/// Scale is stored in the log domain and opacity as a logit, so every stored
/// value is unconstrained and `exp`/`sigmoid` recover valid ranges by
/// construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    /// Centroid in world coordinates, meters.
    pub mean: Vector3<f64>,
    /// Orientation of the principal axes.
    pub rot: Quaternion,
    /// Per-axis log standard deviation; `exp` gives meters.
    pub log_scale: Vector3<f64>,
    /// Opacity in logit space; `sigmoid` gives o ∈ (0, 1).
    pub opacity_logit: f64,
    /// RGB color in [0, 1].
    pub color: Vector3<f64>,
    /// Keyframe this Gaussian was created from.
    pub anchor_keyframe: usize,
    /// Pixel (u = col, v = row) it was created at, updated on deformation.
    pub anchor_pixel: (usize, usize),
}

impl Gaussian {
    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    /// Per-axis standard deviations in meters.
    pub fn scale(&self) -> Vector3<f64> {
        self.log_scale.map(f64::exp)
    }

    /// World-frame covariance `R S² Rᵀ` — symmetric PSD by construction.
    pub fn covariance(&self) -> Matrix3<f64> {
        let r = self.rot.to_matrix();
        let s = self.scale();
        let s2 = Matrix3::from_diagonal(&Vector3::new(s.x * s.x, s.y * s.y, s.z * s.z));
        r * s2 * r.transpose()
    }
}

/// Accumulated 2D positional-gradient statistics driving densification.
#[derive(Debug, Clone)]
pub struct DensifyStats {
    grad_sum: Vec<f64>,
    count: Vec<u32>,
    generation: u64,
}

impl DensifyStats {
    pub fn new(map: &GaussianMap) -> Self {
        Self {
            grad_sum: vec![0.0; map.len()],
            count: vec![0; map.len()],
            generation: map.generation(),
        }
    }

    /// Adds one render's per-Gaussian screen-space gradient norms.
    /// Gaussians that did not touch the screen should carry `None`.
    pub fn accumulate(&mut self, map: &GaussianMap, grads: &[Option<f64>]) -> Result<()> {
        if map.generation() != self.generation {
            return Err(Error::StaleRenderState {
                expected: self.generation,
                got: map.generation(),
            });
        }
        assert_eq!(grads.len(), self.grad_sum.len());
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                self.grad_sum[i] += g;
                self.count[i] += 1;
            }
        }
        Ok(())
    }

    fn average(&self, i: usize) -> f64 {
        if self.count[i] == 0 {
            0.0
        } else {
            self.grad_sum[i] / self.count[i] as f64
        }
    }
}

/// What a densification pass did.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DensifyReport {
    pub cloned: usize,
    pub split: usize,
}

/// The scene map: Gaussians plus a keyframe-anchor index.
#[derive(Debug, Clone, Default)]
pub struct GaussianMap {
    gaussians: Vec<Gaussian>,
    anchors: BTreeMap<usize, Vec<usize>>,
    generation: u64,
}

impl GaussianMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn gaussians(&self) -> &[Gaussian] {
        &self.gaussians
    }

    /// Mutable access to parameters. Structure (count, anchors) must not be
    /// changed through this; use insert/densify/prune, which keep the index
    /// and generation coherent.
    pub fn gaussians_mut(&mut self) -> &mut [Gaussian] {
        &mut self.gaussians
    }

    /// Bumped on every structural change; render-derived statistics carry
    /// the generation they were computed at.
    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn insert(&mut self, g: Gaussian) -> usize {
        let id = self.gaussians.len();
        self.anchors.entry(g.anchor_keyframe).or_default().push(id);
        self.gaussians.push(g);
        self.generation += 1;
        id
    }

    pub fn extend(&mut self, gs: impl IntoIterator<Item = Gaussian>) {
        for g in gs {
            let id = self.gaussians.len();
            self.anchors.entry(g.anchor_keyframe).or_default().push(id);
            self.gaussians.push(g);
        }
        self.generation += 1;
    }

    /// Indices of Gaussians anchored to a keyframe, in insertion order.
    pub fn anchored_to(&self, kf: usize) -> &[usize] {
        self.anchors.get(&kf).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Bounding-box diagonal of the means — a cheap scene-extent proxy.
    pub fn extent(&self) -> f64 {
        if self.gaussians.is_empty() {
            return 0.0;
        }
        let mut lo = self.gaussians[0].mean;
        let mut hi = lo;
        for g in &self.gaussians {
            lo = lo.inf(&g.mean);
            hi = hi.sup(&g.mean);
        }
        (hi - lo).norm()
    }

    /// Removes Gaussians where `keep[i]` is false and rebuilds the anchor
    /// index. Returns how many were removed.
    fn retain(&mut self, keep: &[bool]) -> usize {
        assert_eq!(keep.len(), self.gaussians.len());
        let before = self.gaussians.len();
        let mut i = 0;
        self.gaussians.retain(|_| {
            let k = keep[i];
            i += 1;
            k
        });
        self.rebuild_anchors();
        self.generation += 1;
        before - self.gaussians.len()
    }

    fn rebuild_anchors(&mut self) {
        self.anchors.clear();
        for (id, g) in self.gaussians.iter().enumerate() {
            self.anchors.entry(g.anchor_keyframe).or_default().push(id);
        }
    }

    /// Clone-and-split densification.
    ///
    /// A Gaussian whose average screen-space positional gradient exceeds
    /// `grad_threshold` is cloned if its largest axis is at most
    /// `split_scale_frac · extent`, and otherwise split into two children
    /// sampled from its own distribution with scales shrunk by 1.6. Children
    /// inherit the parent's anchor.
    pub fn densify(
        &mut self,
        stats: &DensifyStats,
        extent: f64,
        grad_threshold: f64,
        split_scale_frac: f64,
        rng: &mut ChaCha12Rng,
    ) -> Result<DensifyReport> {
        if stats.generation != self.generation {
            return Err(Error::StaleRenderState {
                expected: stats.generation,
                got: self.generation,
            });
        }
        let n = self.gaussians.len();
        let split_limit = split_scale_frac * extent;
        let mut report = DensifyReport::default();
        let mut keep = vec![true; n];
        let mut born: Vec<Gaussian> = Vec::new();
        for (i, keep_i) in keep.iter_mut().enumerate() {
            if stats.average(i) <= grad_threshold {
                continue;
            }
            let g = &self.gaussians[i];
            let max_scale = g.scale().max();
            if max_scale <= split_limit {
                born.push(g.clone());
                report.cloned += 1;
            } else {
                let rot = g.rot.to_matrix();
                let s = g.scale();
                for _ in 0..2 {
                    let sample = Vector3::new(
                        rng.gen_range(-1.0..1.0) * s.x,
                        rng.gen_range(-1.0..1.0) * s.y,
                        rng.gen_range(-1.0..1.0) * s.z,
                    );
                    let mut child = g.clone();
                    child.mean = g.mean + rot * sample;
                    child.log_scale = g.log_scale.map(|v| v - 1.6f64.ln());
                    born.push(child);
                }
                *keep_i = false;
                report.split += 1;
            }
        }
        if report.split > 0 {
            self.retain(&keep);
        }
        if !born.is_empty() {
            self.extend(born);
        } else if report.split == 0 {
            // Nothing changed; keep the generation stable.
            return Ok(report);
        }
        Ok(report)
    }

    /// Global prune: drop Gaussians with opacity below `min_opacity` or a
    /// projected screen radius above `max_radius_px` in any recent render.
    /// `radii` holds the per-Gaussian maximum observed radius (None when
    /// never on screen).
    pub fn prune_global(
        &mut self,
        radii: &[Option<f64>],
        radii_generation: u64,
        min_opacity: f64,
        max_radius_px: f64,
    ) -> Result<usize> {
        if radii_generation != self.generation {
            return Err(Error::StaleRenderState {
                expected: radii_generation,
                got: self.generation,
            });
        }
        assert_eq!(radii.len(), self.gaussians.len());
        let keep: Vec<bool> = self
            .gaussians
            .iter()
            .zip(radii)
            .map(|(g, r)| g.opacity() >= min_opacity && r.is_none_or(|r| r <= max_radius_px))
            .collect();
        if keep.iter().all(|&k| k) {
            return Ok(0);
        }
        Ok(self.retain(&keep))
    }

    /// Visibility prune: Gaussians anchored to one of `recent_keyframes`
    /// observed by fewer than `min_observers` keyframes are dropped — but
    /// only once the keyframe window is full, so early maps are not starved.
    pub fn prune_visibility(
        &mut self,
        observers: &[u32],
        observers_generation: u64,
        recent_keyframes: &[usize],
        min_observers: u32,
        window_full: bool,
    ) -> Result<usize> {
        if observers_generation != self.generation {
            return Err(Error::StaleRenderState {
                expected: observers_generation,
                got: self.generation,
            });
        }
        assert_eq!(observers.len(), self.gaussians.len());
        if !window_full {
            return Ok(0);
        }
        let keep: Vec<bool> = self
            .gaussians
            .iter()
            .zip(observers)
            .map(|(g, &n)| !recent_keyframes.contains(&g.anchor_keyframe) || n >= min_observers)
            .collect();
        if keep.iter().all(|&k| k) {
            return Ok(0);
        }
        Ok(self.retain(&keep))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;

    pub(crate) fn test_gaussian(seed: u64) -> Gaussian {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut r = || rng.gen_range(-1.0..1.0);
        Gaussian {
            mean: Vector3::new(r(), r(), 2.0 + r().abs()),
            rot: Quaternion::try_new(1.0 + r().abs(), r(), r(), r()).unwrap(),
            log_scale: Vector3::new(-3.0 + r(), -3.0 + r(), -3.0 + r()),
            opacity_logit: r(),
            color: Vector3::new(0.5 + 0.4 * r(), 0.5 + 0.4 * r(), 0.5 + 0.4 * r()),
            anchor_keyframe: 0,
            anchor_pixel: (0, 0),
        }
    }

    #[test]
    fn covariance_is_symmetric_psd() {
        let g = test_gaussian(5);
        let cov = g.covariance();
        assert_relative_eq!(cov, cov.transpose(), epsilon = 1e-15);
        let eig = cov.symmetric_eigen();
        for v in eig.eigenvalues.iter() {
            assert!(*v > 0.0);
        }
        // Eigenvalues are the squared scales.
        let mut s2: Vec<f64> = g.scale().iter().map(|s| s * s).collect();
        let mut ev: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        s2.sort_by(f64::total_cmp);
        ev.sort_by(f64::total_cmp);
        for (a, b) in s2.iter().zip(&ev) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn opacity_stays_in_unit_interval() {
        for x in [-50.0, -1.0, 0.0, 3.0, 80.0] {
            let mut g = test_gaussian(1);
            g.opacity_logit = x;
            let o = g.opacity();
            assert!((0.0..=1.0).contains(&o));
        }
        assert_relative_eq!(sigmoid(logit(0.73)), 0.73, epsilon = 1e-12);
    }

    #[test]
    fn anchor_index_tracks_mutations() {
        let mut map = GaussianMap::new();
        for kf in [0, 1, 0, 2, 1] {
            let mut g = test_gaussian(kf as u64);
            g.anchor_keyframe = kf;
            map.insert(g);
        }
        assert_eq!(map.anchored_to(0), &[0, 2]);
        assert_eq!(map.anchored_to(1), &[1, 4]);
        assert_eq!(map.anchored_to(7), &[] as &[usize]);
        let keep = vec![true, false, true, true, true];
        map.retain(&keep);
        assert_eq!(map.len(), 4);
        assert_eq!(map.anchored_to(0), &[0, 1]);
        assert_eq!(map.anchored_to(1), &[3]);
    }

    #[test]
    fn generation_bumps_on_structure_only() {
        let mut map = GaussianMap::new();
        let g0 = map.generation();
        map.insert(test_gaussian(1));
        assert!(map.generation() > g0);
        let g1 = map.generation();
        map.gaussians_mut()[0].opacity_logit = 2.0;
        assert_eq!(map.generation(), g1);
    }

    #[test]
    fn densify_no_gradients_is_identity() {
        let mut map = GaussianMap::new();
        map.extend((0..4).map(test_gaussian));
        let stats = DensifyStats::new(&map);
        let gen = map.generation();
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let report = map.densify(&stats, 4.0, 2e-4, 0.01, &mut rng).unwrap();
        assert_eq!(report, DensifyReport::default());
        assert_eq!(map.len(), 4);
        assert_eq!(map.generation(), gen);
    }

    #[test]
    fn densify_clones_small_and_splits_large() {
        let mut map = GaussianMap::new();
        let mut small = test_gaussian(1);
        small.log_scale = Vector3::repeat((0.001f64).ln());
        let mut large = test_gaussian(2);
        large.log_scale = Vector3::repeat((0.2f64).ln());
        let mut quiet = test_gaussian(3);
        quiet.log_scale = Vector3::repeat((0.2f64).ln());
        map.extend([small, large, quiet]);
        let mut stats = DensifyStats::new(&map);
        stats
            .accumulate(&map, &[Some(1e-3), Some(1e-3), Some(1e-6)])
            .unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        // extent 4 → split limit 0.04: small (0.001) clones, large (0.2) splits.
        let report = map.densify(&stats, 4.0, 2e-4, 0.01, &mut rng).unwrap();
        assert_eq!(report, DensifyReport { cloned: 1, split: 1 });
        // 3 - 1 split + 2 children + 1 clone = 5
        assert_eq!(map.len(), 5);
        let shrunk = (0.2f64 / 1.6).ln();
        let n_shrunk = map
            .gaussians()
            .iter()
            .filter(|g| (g.log_scale.x - shrunk).abs() < 1e-12)
            .count();
        assert_eq!(n_shrunk, 2);
    }

    #[test]
    fn stale_stats_are_rejected() {
        let mut map = GaussianMap::new();
        map.insert(test_gaussian(1));
        let stats = DensifyStats::new(&map);
        map.insert(test_gaussian(2));
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        assert!(matches!(
            map.densify(&stats, 4.0, 2e-4, 0.01, &mut rng),
            Err(Error::StaleRenderState { .. })
        ));
        assert!(matches!(
            map.prune_global(&[None, None], stats.generation, 0.7, 10.0),
            Err(Error::StaleRenderState { .. })
        ));
    }

    #[test]
    fn global_prune_rules() {
        let mut map = GaussianMap::new();
        let mut healthy = test_gaussian(1);
        healthy.opacity_logit = logit(0.9);
        let mut faint = test_gaussian(2);
        faint.opacity_logit = logit(0.5);
        let mut huge = test_gaussian(3);
        huge.opacity_logit = logit(0.9);
        map.extend([healthy, faint, huge]);
        let gen = map.generation();
        let radii = vec![Some(3.0), Some(3.0), Some(50.0)];
        let removed = map.prune_global(&radii, gen, 0.7, 12.8).unwrap();
        assert_eq!(removed, 2);
        assert_eq!(map.len(), 1);
        assert!(map.gaussians()[0].opacity() > 0.7);
    }

    #[test]
    fn visibility_prune_only_when_window_full() {
        let build = || {
            let mut map = GaussianMap::new();
            let mut old = test_gaussian(1);
            old.anchor_keyframe = 0;
            let mut fresh = test_gaussian(2);
            fresh.anchor_keyframe = 9;
            map.extend([old, fresh]);
            map
        };
        let mut map = build();
        let gen = map.generation();
        // Window not full → untouched even with one observer.
        let removed = map
            .prune_visibility(&[1, 1], gen, &[8, 9, 10], 3, false)
            .unwrap();
        assert_eq!(removed, 0);
        let mut map = build();
        let gen = map.generation();
        let removed = map
            .prune_visibility(&[1, 1], gen, &[8, 9, 10], 3, true)
            .unwrap();
        assert_eq!(removed, 1);
        // The old-anchor Gaussian survives regardless of observer count.
        assert_eq!(map.gaussians()[0].anchor_keyframe, 0);
    }
}
