//! Physical blur formation: a blurry frame is the per-pixel mean of the
//! sharp virtual renders across the exposure interval, followed by a
//! per-frame affine exposure correction.

use crate::img::ImageF;
use crate::render::RenderOutput;
use crate::{Error, Result};

/// Per-frame exposure correction `B = gain * mean + offset`.
///
/// The gain is stored as its logarithm so optimizer steps can never push it
/// negative; `identity()` is gain 1, offset 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExposureParams {
    log_gain: f64,
    offset: f64,
}

impl ExposureParams {
    pub fn identity() -> Self {
        ExposureParams {
            log_gain: 0.0,
            offset: 0.0,
        }
    }

    pub fn from_gain(gain: f64, offset: f64) -> Result<Self> {
        if gain.is_nan() || gain <= 0.0 {
            return Err(Error::msg(format!(
                "exposure gain must be positive, got {gain}"
            )));
        }
        Ok(ExposureParams {
            log_gain: gain.ln(),
            offset,
        })
    }

    pub fn gain(&self) -> f64 {
        self.log_gain.exp()
    }

    pub fn offset(&self) -> f64 {
        self.offset
    }

    pub fn log_gain(&self) -> f64 {
        self.log_gain
    }

    /// Gradient step in (log-gain, offset) space.
    pub fn step(&mut self, d_log_gain: f64, d_offset: f64) {
        self.log_gain += d_log_gain;
        self.offset += d_offset;
    }
}

impl Default for ExposureParams {
    fn default() -> Self {
        Self::identity()
    }
}

/// A synthesized blurry frame with everything the backward pass needs.
pub struct BlurryRender {
    /// Exposure-corrected blurry image (unclamped).
    pub color: ImageF,
    /// Pre-exposure mean of the virtual colors.
    pub mean_color: ImageF,
    /// Per-pixel mean of the virtual depth maps.
    pub mean_depth: ImageF,
    /// Per-pixel mean of the accumulated opacities.
    pub mean_alpha: ImageF,
    /// The constituent virtual renders, retained for gradients.
    pub views: Vec<RenderOutput>,
    pub exposure: ExposureParams,
}

/// Mean of one image stream across the stack. Bit-identical stacks return
/// the shared image unchanged so a static camera reproduces the sharp
/// render exactly.
fn stack_mean<'a, F>(stack: &'a [RenderOutput], select: F) -> Result<ImageF>
where
    F: Fn(&'a RenderOutput) -> &'a ImageF,
{
    let first = select(&stack[0]);
    for o in &stack[1..] {
        let img = select(o);
        if !first.same_shape(img) {
            return Err(first.shape_error(img));
        }
    }
    if stack[1..].iter().all(|o| select(o).data() == first.data()) {
        return Ok(first.clone());
    }
    let w = 1.0 / stack.len() as f64;
    let mut mean = first.zeros_like();
    for o in stack {
        mean.add_scaled(select(o), w)?;
    }
    Ok(mean)
}

/// Averages the virtual stack and applies the exposure affine.
pub fn synthesize_blur(stack: Vec<RenderOutput>, exposure: ExposureParams) -> Result<BlurryRender> {
    if stack.is_empty() {
        return Err(Error::msg("cannot synthesize blur from an empty stack"));
    }
    let mean_color = stack_mean(&stack, |o| &o.color)?;
    let mean_depth = stack_mean(&stack, |o| &o.depth)?;
    let mean_alpha = stack_mean(&stack, |o| &o.alpha)?;
    let (a, b) = (exposure.gain(), exposure.offset());
    let mut color = mean_color.clone();
    for v in color.data_mut() {
        *v = *v * a + b;
    }
    Ok(BlurryRender {
        color,
        mean_color,
        mean_depth,
        mean_alpha,
        views: stack,
        exposure,
    })
}

/// Gradients of a scalar loss through the blur formation.
pub struct BlurGradients {
    /// dL/dC_i for each retained virtual view.
    pub per_view: Vec<ImageF>,
    /// dL/d(gain).
    pub d_gain: f64,
    /// dL/d(offset).
    pub d_offset: f64,
}

impl BlurGradients {
    /// Chain into the log-gain parameterization actually optimized.
    pub fn d_log_gain(&self, exposure: &ExposureParams) -> f64 {
        self.d_gain * exposure.gain()
    }
}

/// Distributes dL/dB back to every virtual view and the exposure affine.
pub fn blur_backward(blurry: &BlurryRender, d_color: &ImageF) -> Result<BlurGradients> {
    if !d_color.same_shape(&blurry.color) {
        return Err(d_color.shape_error(&blurry.color));
    }
    let m = blurry.views.len() as f64;
    let scale = blurry.exposure.gain() / m;
    let mut per_view_grad = d_color.clone();
    per_view_grad.scale(scale);
    let per_view = vec![per_view_grad; blurry.views.len()];
    let mut d_gain = 0.0;
    let mut d_offset = 0.0;
    for (g, mc) in d_color.data().iter().zip(blurry.mean_color.data()) {
        d_gain += g * mc;
        d_offset += g;
    }
    Ok(BlurGradients {
        per_view,
        d_gain,
        d_offset,
    })
}

/// Averages consecutive groups of sharp frames into blurry frames (no
/// exposure affine), returning each blurry frame's constituent indices.
pub fn make_blurry_dataset(
    sharp: &[ImageF],
    group_size: usize,
) -> Result<(Vec<ImageF>, Vec<Vec<usize>>)> {
    if group_size == 0 || !sharp.len().is_multiple_of(group_size) || sharp.is_empty() {
        return Err(Error::GroupSizeMismatch {
            frames: sharp.len(),
            group: group_size,
        });
    }
    let mut blurry = Vec::with_capacity(sharp.len() / group_size);
    let mut groups = Vec::with_capacity(sharp.len() / group_size);
    for chunk in sharp.chunks(group_size).enumerate() {
        let (gi, frames) = chunk;
        for f in &frames[1..] {
            if !frames[0].same_shape(f) {
                return Err(frames[0].shape_error(f));
            }
        }
        let img = if frames[1..].iter().all(|f| f.data() == frames[0].data()) {
            frames[0].clone()
        } else {
            let mut mean = frames[0].zeros_like();
            for f in frames {
                mean.add_scaled(f, 1.0 / group_size as f64)?;
            }
            mean
        };
        blurry.push(img);
        groups.push((gi * group_size..(gi + 1) * group_size).collect());
    }
    Ok((blurry, groups))
}

/// Indices of the evaluation sub-frames within a group: `eval_count` frames
/// at a constant stride starting from the group's first frame. A 36-frame
/// group evaluated at 9 sub-poses uses stride 4: indices 0, 4, ..., 32.
pub fn eval_indices(group_size: usize, eval_count: usize) -> Result<Vec<usize>> {
    if eval_count == 0 || !group_size.is_multiple_of(eval_count) {
        return Err(Error::GroupSizeMismatch {
            frames: group_size,
            group: eval_count,
        });
    }
    let stride = group_size / eval_count;
    Ok((0..eval_count).map(|i| i * stride).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussians::{Gaussian, GaussianMap};
    use crate::geom::{CameraIntrinsics, Pose, Quaternion};
    use crate::quality::psnr;
    use crate::render::render;
    use nalgebra::{Vector2, Vector3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn camera() -> CameraIntrinsics {
        CameraIntrinsics::new(8.0, 8.0, 4.5, 3.5, 10, 8).unwrap()
    }

    fn scene(seed: u64, k: &CameraIntrinsics) -> GaussianMap {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut map = GaussianMap::new();
        for _ in 0..12 {
            let u = rng.gen_range(1.0..(k.width as f64 - 2.0));
            let v = rng.gen_range(1.0..(k.height as f64 - 2.0));
            let d = rng.gen_range(1.5..3.0);
            map.insert(Gaussian {
                mean: k.unproject(&Vector2::new(u, v), d),
                rot: Quaternion::identity(),
                log_scale: Vector3::repeat(rng.gen_range(0.05f64..0.2).ln()),
                opacity_logit: rng.gen_range(-0.5..1.5),
                color: Vector3::new(rng.gen(), rng.gen(), rng.gen()),
                anchor_keyframe: 0,
                anchor_pixel: (0, 0),
            });
        }
        map
    }

    fn constant_output(k: &CameraIntrinsics, value: f64) -> RenderOutput {
        RenderOutput {
            color: ImageF::constant(k.width, k.height, 3, value).unwrap(),
            depth: ImageF::constant(k.width, k.height, 1, 2.0).unwrap(),
            alpha: ImageF::constant(k.width, k.height, 1, 0.5).unwrap(),
            visible: Vec::new(),
            radius: Vec::new(),
            generation: 0,
        }
    }

    fn random_image(rng: &mut ChaCha12Rng, w: usize, h: usize, ch: usize) -> ImageF {
        let mut img = ImageF::new(w, h, ch).unwrap();
        for v in img.data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        img
    }

    /// Neumaier-compensated mean, an independent summation path.
    fn compensated_mean(vals: &[f64]) -> f64 {
        let mut sum = 0.0;
        let mut comp = 0.0;
        for &v in vals {
            let t = sum + v;
            comp += if sum.abs() >= v.abs() {
                (sum - t) + v
            } else {
                (v - t) + sum
            };
            sum = t;
        }
        (sum + comp) / vals.len() as f64
    }

    #[test]
    fn static_stack_with_identity_exposure_is_bit_equal() {
        let k = camera();
        let map = scene(1, &k);
        let pose = Pose::identity();
        let sharp = render(&map, &k, &pose).unwrap();
        let stack: Vec<_> = (0..4).map(|_| render(&map, &k, &pose).unwrap()).collect();
        let blurry = synthesize_blur(stack, ExposureParams::identity()).unwrap();
        assert_eq!(blurry.color.data(), sharp.color.data());
        assert_eq!(blurry.mean_depth.data(), sharp.depth.data());
        assert_eq!(blurry.mean_alpha.data(), sharp.alpha.data());
        assert!(psnr(&blurry.color, &sharp.color, 1.0).unwrap().is_infinite());
    }

    #[test]
    fn constant_stack_applies_exposure_affine() {
        let k = camera();
        let stack = vec![constant_output(&k, 0.25), constant_output(&k, 0.25)];
        let exposure = ExposureParams::from_gain(2.0, 0.1).unwrap();
        let blurry = synthesize_blur(stack, exposure).unwrap();
        for v in blurry.color.data() {
            assert!((v - 0.6).abs() < 1e-15);
        }
    }

    #[test]
    fn nine_view_mean_matches_compensated_summation() {
        let k = camera();
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let stack: Vec<RenderOutput> = (0..9)
            .map(|_| {
                let mut o = constant_output(&k, 0.0);
                o.color = random_image(&mut rng, k.width, k.height, 3);
                o
            })
            .collect();
        let colors: Vec<ImageF> = stack.iter().map(|o| o.color.clone()).collect();
        let blurry = synthesize_blur(stack, ExposureParams::identity()).unwrap();
        for idx in 0..blurry.color.data().len() {
            let vals: Vec<f64> = colors.iter().map(|c| c.data()[idx]).collect();
            let expect = compensated_mean(&vals);
            assert!((blurry.color.data()[idx] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn exposure_affine_is_exactly_linear_in_the_mean() {
        let k = camera();
        let map = scene(2, &k);
        let poses = [
            Pose::identity(),
            Pose::new(
                Quaternion::exp_map(&Vector3::new(0.0, 0.01, 0.0)),
                Vector3::new(0.01, 0.0, 0.0),
            ),
        ];
        let stack: Vec<_> = poses.iter().map(|p| render(&map, &k, p).unwrap()).collect();
        let stack2: Vec<_> = poses.iter().map(|p| render(&map, &k, p).unwrap()).collect();
        let exposure = ExposureParams::from_gain(1.7, -0.05).unwrap();
        let with_affine = synthesize_blur(stack, exposure).unwrap();
        let plain = synthesize_blur(stack2, ExposureParams::identity()).unwrap();
        let (a, b) = (exposure.gain(), exposure.offset());
        for (lhs, mean) in with_affine.color.data().iter().zip(plain.color.data()) {
            assert_eq!(*lhs, mean * a + b);
        }
    }

    #[test]
    fn stack_permutation_changes_nothing_beyond_rounding() {
        let k = camera();
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let make = |rng: &mut ChaCha12Rng| {
            let mut o = constant_output(&k, 0.0);
            o.color = random_image(rng, k.width, k.height, 3);
            o
        };
        let stack: Vec<RenderOutput> = (0..5).map(|_| make(&mut rng)).collect();
        let mut shuffled: Vec<RenderOutput> = Vec::new();
        for i in [3, 0, 4, 2, 1] {
            let o = &stack[i];
            let mut copy = constant_output(&k, 0.0);
            copy.color = o.color.clone();
            shuffled.push(copy);
        }
        let a = synthesize_blur(stack, ExposureParams::identity()).unwrap();
        let b = synthesize_blur(shuffled, ExposureParams::identity()).unwrap();
        for (x, y) in a.color.data().iter().zip(b.color.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn mismatched_stack_shapes_are_rejected() {
        let k = camera();
        let mut other = constant_output(&k, 0.1);
        other.color = ImageF::constant(k.width + 1, k.height, 3, 0.1).unwrap();
        let stack = vec![constant_output(&k, 0.1), other];
        assert!(synthesize_blur(stack, ExposureParams::identity()).is_err());
    }

    #[test]
    fn empty_stack_is_rejected() {
        assert!(synthesize_blur(Vec::new(), ExposureParams::identity()).is_err());
    }

    #[test]
    fn backward_zero_upstream_is_zero() {
        let k = camera();
        let stack = vec![constant_output(&k, 0.3), constant_output(&k, 0.4)];
        let blurry = synthesize_blur(stack, ExposureParams::identity()).unwrap();
        let zero = ImageF::new(k.width, k.height, 3).unwrap();
        let grads = blur_backward(&blurry, &zero).unwrap();
        assert_eq!(grads.d_gain, 0.0);
        assert_eq!(grads.d_offset, 0.0);
        for img in &grads.per_view {
            assert!(img.data().iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn backward_splits_upstream_evenly_at_unit_gain() {
        let k = camera();
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let stack = vec![constant_output(&k, 0.3), constant_output(&k, 0.4)];
        let blurry = synthesize_blur(stack, ExposureParams::identity()).unwrap();
        let upstream = random_image(&mut rng, k.width, k.height, 3);
        let grads = blur_backward(&blurry, &upstream).unwrap();
        assert_eq!(grads.per_view.len(), 2);
        for img in &grads.per_view {
            for (g, u) in img.data().iter().zip(upstream.data()) {
                assert_eq!(*g, u * 0.5);
            }
        }
    }

    #[test]
    fn exposure_gradients_match_finite_differences() {
        let k = camera();
        let map = scene(5, &k);
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        let upstream = random_image(&mut rng, k.width, k.height, 3);
        let poses = [
            Pose::identity(),
            Pose::new(
                Quaternion::exp_map(&Vector3::new(0.0, 0.0, 0.02)),
                Vector3::new(0.0, 0.01, 0.0),
            ),
            Pose::new(
                Quaternion::exp_map(&Vector3::new(0.01, 0.0, 0.0)),
                Vector3::new(-0.01, 0.0, 0.01),
            ),
        ];
        let render_stack =
            || -> Vec<RenderOutput> { poses.iter().map(|p| render(&map, &k, p).unwrap()).collect() };
        let loss = |gain: f64, offset: f64| -> f64 {
            let blurry =
                synthesize_blur(render_stack(), ExposureParams::from_gain(gain, offset).unwrap())
                    .unwrap();
            blurry
                .color
                .data()
                .iter()
                .zip(upstream.data())
                .map(|(x, y)| x * y)
                .sum()
        };
        let exposure = ExposureParams::from_gain(1.3, 0.07).unwrap();
        let blurry = synthesize_blur(render_stack(), exposure).unwrap();
        let grads = blur_backward(&blurry, &upstream).unwrap();
        let h = 1e-6;
        let fd_gain = (loss(1.3 + h, 0.07) - loss(1.3 - h, 0.07)) / (2.0 * h);
        let fd_offset = (loss(1.3, 0.07 + h) - loss(1.3, 0.07 - h)) / (2.0 * h);
        assert!((grads.d_gain - fd_gain).abs() <= 1e-6 * fd_gain.abs().max(1.0));
        assert!((grads.d_offset - fd_offset).abs() <= 1e-6 * fd_offset.abs().max(1.0));
        // Log-gain chain: d/d(ln a) = a * d/da.
        assert!((grads.d_log_gain(&exposure) - 1.3 * grads.d_gain).abs() < 1e-12);
    }

    #[test]
    fn per_view_gradients_match_finite_differences() {
        // Perturb one virtual view's color plane and confirm the distributed
        // gradient accounts for it.
        let k = camera();
        let map = scene(9, &k);
        let mut rng = ChaCha12Rng::seed_from_u64(23);
        let upstream = random_image(&mut rng, k.width, k.height, 3);
        let pose = Pose::identity();
        let exposure = ExposureParams::from_gain(1.4, 0.02).unwrap();
        let stack: Vec<_> = (0..3).map(|_| render(&map, &k, &pose).unwrap()).collect();
        let blurry = synthesize_blur(stack, exposure).unwrap();
        let grads = blur_backward(&blurry, &upstream).unwrap();

        let h = 1e-6;
        let idx = 37;
        let loss_with_bump = |bump: f64| -> f64 {
            let mut stack: Vec<_> = (0..3).map(|_| render(&map, &k, &pose).unwrap()).collect();
            stack[1].color.data_mut()[idx] += bump;
            let b = synthesize_blur(stack, exposure).unwrap();
            b.color
                .data()
                .iter()
                .zip(upstream.data())
                .map(|(x, y)| x * y)
                .sum()
        };
        let fd = (loss_with_bump(h) - loss_with_bump(-h)) / (2.0 * h);
        let analytic = grads.per_view[1].data()[idx];
        assert!((analytic - fd).abs() <= 1e-6 * fd.abs().max(1.0));
    }

    #[test]
    fn group_of_one_is_identity() {
        let k = camera();
        let mut rng = ChaCha12Rng::seed_from_u64(31);
        let frames: Vec<ImageF> = (0..3)
            .map(|_| random_image(&mut rng, k.width, k.height, 3))
            .collect();
        let (blurry, groups) = make_blurry_dataset(&frames, 1).unwrap();
        assert_eq!(blurry.len(), 3);
        for (b, f) in blurry.iter().zip(&frames) {
            assert_eq!(b.data(), f.data());
        }
        assert_eq!(groups, vec![vec![0], vec![1], vec![2]]);
    }

    #[test]
    fn pairwise_mean_of_constants() {
        let a = ImageF::constant(4, 3, 3, 0.2).unwrap();
        let b = ImageF::constant(4, 3, 3, 0.4).unwrap();
        let (blurry, groups) = make_blurry_dataset(&[a, b], 2).unwrap();
        assert_eq!(blurry.len(), 1);
        for v in blurry[0].data() {
            assert!((v - 0.3).abs() < 1e-15);
        }
        assert_eq!(groups[0], vec![0, 1]);
    }

    #[test]
    fn indivisible_group_size_is_rejected() {
        let frames: Vec<ImageF> = (0..5)
            .map(|_| ImageF::constant(2, 2, 3, 0.5).unwrap())
            .collect();
        assert!(make_blurry_dataset(&frames, 2).is_err());
        assert!(make_blurry_dataset(&frames, 0).is_err());
        assert!(make_blurry_dataset(&[], 2).is_err());
    }

    #[test]
    fn evaluation_layout_for_36_frame_groups() {
        // 36 averaged frames evaluated at 9 sub-poses: every 4th frame.
        let idx = eval_indices(36, 9).unwrap();
        assert_eq!(idx, vec![0, 4, 8, 12, 16, 20, 24, 28, 32]);
        assert_eq!(eval_indices(9, 9).unwrap(), (0..9).collect::<Vec<_>>());
        assert!(eval_indices(10, 4).is_err());
        assert!(eval_indices(9, 0).is_err());
    }

    #[test]
    fn gain_must_be_positive() {
        assert!(ExposureParams::from_gain(0.0, 0.0).is_err());
        assert!(ExposureParams::from_gain(-1.0, 0.0).is_err());
        let e = ExposureParams::from_gain(2.0, 0.5).unwrap();
        assert!((e.gain() - 2.0).abs() < 1e-15);
        assert_eq!(e.offset(), 0.5);
    }
}
