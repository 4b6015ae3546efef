//! Correspondence and monocular-disparity sources for the factor graph.
//!
//! The graph itself never looks at images: it consumes dense pixel
//! correspondences with per-pixel confidence weights through [`FlowProvider`].
//! Production systems plug a learned flow backbone in here; tests and the
//! synthetic pipeline use [`OracleFlowProvider`], which warps ground-truth
//! geometry and optionally corrupts it with seeded Gaussian noise.

use nalgebra::Vector2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::geom::{CameraIntrinsics, Pose};
use crate::img::ImageF;
use crate::{Error, Result};

/// Dense correspondence field from one frame's pixel grid into another frame.
#[derive(Debug, Clone)]
pub struct FlowField {
    /// Per-pixel target coordinates in the destination frame (channels: u, v).
    pub target: ImageF,
    /// Per-pixel diagonal confidence weights (channels: u, v), each >= 0.
    /// Zero marks an unusable correspondence (occluded, out of view).
    pub weight: ImageF,
    /// Mean length of `target - source` over usable pixels; infinite when no
    /// pixel is usable, so threshold comparisons treat "no overlap" as huge
    /// motion.
    pub mean_magnitude: f64,
}

/// Source of dense correspondences between frames, addressed by frame index.
///
/// Implementations must be pure: querying the same ordered pair twice returns
/// the same field (noise included), so graph edges stay reproducible.
pub trait FlowProvider {
    /// Correspondences from every pixel of frame `from` into frame `to`.
    fn flow(&self, from: usize, to: usize) -> Result<FlowField>;
    /// The (height, width) of the correspondence grid.
    fn grid(&self) -> (usize, usize);
}

/// Ground-truth-driven flow oracle: warps each pixel with its true depth and
/// true poses, then adds seeded Gaussian pixel noise of std `sigma_flow`.
///
/// With `sigma_flow = 0` the returned targets satisfy the reprojection
/// identity exactly for co-visible pixels.
pub struct OracleFlowProvider {
    k: CameraIntrinsics,
    poses: Vec<Pose>,
    depths: Vec<ImageF>,
    sigma_flow: f64,
    seed: u64,
}

impl OracleFlowProvider {
    /// `depths[f]` is frame `f`'s true depth map on the correspondence grid
    /// (single channel, entries > 0 where defined; non-positive entries mark
    /// holes and get zero weight).
    pub fn new(
        k: CameraIntrinsics,
        poses: Vec<Pose>,
        depths: Vec<ImageF>,
        sigma_flow: f64,
        seed: u64,
    ) -> Result<Self> {
        if poses.len() != depths.len() {
            return Err(Error::msg(format!(
                "oracle flow needs one depth map per pose: {} poses vs {} depths",
                poses.len(),
                depths.len()
            )));
        }
        for d in &depths {
            if d.width() != k.width || d.height() != k.height || d.channels() != 1 {
                return Err(Error::msg(
                    "oracle depth maps must be single-channel at the grid resolution",
                ));
            }
        }
        if !sigma_flow.is_finite() || sigma_flow < 0.0 {
            return Err(Error::msg(format!(
                "sigma_flow must be finite and >= 0, got {sigma_flow}"
            )));
        }
        Ok(OracleFlowProvider {
            k,
            poses,
            depths,
            sigma_flow,
            seed,
        })
    }

    pub fn frame_count(&self) -> usize {
        self.poses.len()
    }

    fn check_frame(&self, f: usize, other: usize) -> Result<()> {
        if f >= self.poses.len() {
            return Err(Error::FlowUnavailable {
                i: f,
                j: other,
                what: format!("frame {f} outside the {}-frame oracle", self.poses.len()),
            });
        }
        Ok(())
    }
}

impl FlowProvider for OracleFlowProvider {
    fn flow(&self, from: usize, to: usize) -> Result<FlowField> {
        self.check_frame(from, to)?;
        self.check_frame(to, from)?;
        let (h, w) = (self.k.height, self.k.width);
        let mut target = ImageF::new(w, h, 2)?;
        let mut weight = ImageF::new(w, h, 2)?;
        // One deterministic stream per ordered pair: repeated queries for the
        // same edge must agree bit-for-bit.
        let mut rng = ChaCha12Rng::seed_from_u64(
            self.seed
                ^ (from as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
                ^ (to as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F),
        );
        let base_weight = 1.0 / (1.0 + self.sigma_flow * self.sigma_flow);
        let (mut magnitude_sum, mut usable) = (0.0, 0usize);
        for r in 0..h {
            for c in 0..w {
                let depth = self.depths[from].get(r, c, 0);
                // Keep the noise stream position-indexed regardless of which
                // pixels end up usable.
                let (n_u, n_v) = if self.sigma_flow > 0.0 {
                    (
                        self.sigma_flow * standard_normal(&mut rng),
                        self.sigma_flow * standard_normal(&mut rng),
                    )
                } else {
                    (0.0, 0.0)
                };
                if depth <= 0.0 {
                    continue;
                }
                let src = Vector2::new(c as f64, r as f64);
                let world = self.k.unproject_world(&self.poses[from], &src, depth);
                let in_to = self.poses[to].transform_inv(&world);
                let Ok((proj, _)) = self.k.project_cam(&in_to) else {
                    continue;
                };
                if !self.k.contains(&proj) {
                    continue;
                }
                target.set(r, c, 0, proj.x + n_u);
                target.set(r, c, 1, proj.y + n_v);
                weight.set(r, c, 0, base_weight);
                weight.set(r, c, 1, base_weight);
                magnitude_sum += (proj - src).norm();
                usable += 1;
            }
        }
        let mean_magnitude = if usable == 0 {
            f64::INFINITY
        } else {
            magnitude_sum / usable as f64
        };
        Ok(FlowField {
            target,
            weight,
            mean_magnitude,
        })
    }

    fn grid(&self) -> (usize, usize) {
        (self.k.height, self.k.width)
    }
}

/// Monocular-disparity stand-in: the true disparity pushed through a hidden
/// inverse affine map plus a smooth low-frequency field, i.e. exactly the
/// scale/shift ambiguity (plus bias) the disparity-scale optimization is
/// built to resolve. Recovering the hidden `(theta0, gamma0)` makes
/// `theta * mono + gamma` match the true disparity again.
pub struct OracleMonoDepth {
    theta0: f64,
    gamma0: f64,
    noise_amp: f64,
    seed: u64,
}

impl OracleMonoDepth {
    pub fn new(theta0: f64, gamma0: f64, noise_amp: f64, seed: u64) -> Result<Self> {
        if theta0 == 0.0 || !theta0.is_finite() || !gamma0.is_finite() {
            return Err(Error::msg(format!(
                "mono oracle needs finite theta0 != 0, got ({theta0}, {gamma0})"
            )));
        }
        Ok(OracleMonoDepth {
            theta0,
            gamma0,
            noise_amp,
            seed,
        })
    }

    /// The hidden affine parameters (handy for construct-then-recover tests).
    pub fn hidden(&self) -> (f64, f64) {
        (self.theta0, self.gamma0)
    }

    /// Mono disparity for a frame given its true depth map.
    pub fn mono_disparity(&self, frame: usize, true_depth: &ImageF) -> Result<ImageF> {
        if true_depth.channels() != 1 {
            return Err(Error::msg("true depth must be single-channel"));
        }
        let (h, w) = (true_depth.height(), true_depth.width());
        let mut mono = ImageF::new(w, h, 1)?;
        let mut rng = ChaCha12Rng::seed_from_u64(self.seed ^ (frame as u64).wrapping_mul(0x517C_C1B7_2722_0A95));
        // Three random low-frequency plane waves make a smooth bias field:
        // structured enough to be "wrong" everywhere, smooth enough to stay
        // out of the reprojection term's way at high frequencies.
        let mut waves = [(0.0, 0.0, 0.0); 3];
        for wv in &mut waves {
            *wv = (
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(0.0..std::f64::consts::TAU),
            );
        }
        for r in 0..h {
            for c in 0..w {
                let depth = true_depth.get(r, c, 0);
                if depth <= 0.0 {
                    continue;
                }
                let disp = 1.0 / depth;
                let mut bias = 0.0;
                for (fr, fc, phase) in waves {
                    let arg = std::f64::consts::TAU
                        * (fr * r as f64 / h as f64 + fc * c as f64 / w as f64)
                        + phase;
                    bias += arg.sin();
                }
                let value = (disp - self.gamma0) / self.theta0 + self.noise_amp * bias / 3.0;
                mono.set(r, c, 0, value);
            }
        }
        Ok(mono)
    }
}

/// Box-Muller standard normal; two uniforms in, one normal out. Deterministic
/// given the RNG state, which keeps oracle fields reproducible per edge.
fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
