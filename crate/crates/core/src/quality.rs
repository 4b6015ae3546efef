//! Image quality measures: PSNR and a differentiable SSIM.
//!
//! SSIM uses the standard 11×11 Gaussian window (σ = 1.5) with constants
//! C1 = 0.01², C2 = 0.03², averaged over pixels and channels. Near borders
//! the window is cropped to valid pixels and its weights renormalized, so a
//! constant image has exactly constant local statistics — this keeps the
//! closed-form value for constant inputs exact, which the tests pin.
//!
//! The gradient of SSIM with respect to the first image is analytic. The
//! windowed-mean operator factors as `diag(1/Z) · K` with `K` the symmetric
//! cropped convolution and `Z` the per-pixel weight sum, so its adjoint is
//! `K · diag(1/Z)`: divide by `Z` first, then convolve.

use crate::error::Result;
use crate::img::ImageF;

pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

const WIN_RADIUS: isize = 5;
const WIN_SIGMA: f64 = 1.5;

/// Mean squared error over all samples.
pub fn mse(a: &ImageF, b: &ImageF) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(a.shape_error(b));
    }
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(s / a.data().len() as f64)
}

/// Peak signal-to-noise ratio in dB: `10·log10(peak²/MSE)`; infinite for
/// identical images.
pub fn psnr(a: &ImageF, b: &ImageF, peak: f64) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / m).log10())
}

/// SSIM value together with its gradient w.r.t. the first image.
#[derive(Debug, Clone)]
pub struct SsimGrad {
    pub value: f64,
    /// d(value)/d(a), same shape as the inputs.
    pub grad: ImageF,
}

/// The unnormalized 1-D window: Gaussian taps that sum to 1 over the full
/// 11-tap support (border pixels see a renormalized subset).
fn window_taps() -> [f64; 11] {
    let mut k = [0.0; 11];
    let mut sum = 0.0;
    for (i, tap) in k.iter_mut().enumerate() {
        let d = i as f64 - WIN_RADIUS as f64;
        *tap = (-d * d / (2.0 * WIN_SIGMA * WIN_SIGMA)).exp();
        sum += *tap;
    }
    for tap in &mut k {
        *tap /= sum;
    }
    k
}

/// Per-coordinate sums of in-range taps (window weight normalizers).
fn axis_norm(len: usize, k: &[f64; 11]) -> Vec<f64> {
    (0..len as isize)
        .map(|c| {
            let mut z = 0.0;
            for (i, tap) in k.iter().enumerate() {
                let q = c + i as isize - WIN_RADIUS;
                if q >= 0 && q < len as isize {
                    z += tap;
                }
            }
            z
        })
        .collect()
}

/// Symmetric cropped separable convolution (no normalization).
fn conv_cropped(img: &ImageF, k: &[f64; 11]) -> ImageF {
    let (w, h, ch) = (img.width(), img.height(), img.channels());
    let mut tmp = img.zeros_like();
    for r in 0..h {
        for c in 0..w as isize {
            for (i, tap) in k.iter().enumerate() {
                let q = c + i as isize - WIN_RADIUS;
                if q >= 0 && q < w as isize {
                    for s in 0..ch {
                        let v = tap * img.get(r, q as usize, s);
                        let cur = tmp.get(r, c as usize, s);
                        tmp.set(r, c as usize, s, cur + v);
                    }
                }
            }
        }
    }
    let mut out = img.zeros_like();
    for r in 0..h as isize {
        for (i, tap) in k.iter().enumerate() {
            let q = r + i as isize - WIN_RADIUS;
            if q >= 0 && q < h as isize {
                for c in 0..w {
                    for s in 0..ch {
                        let v = tap * tmp.get(q as usize, c, s);
                        let cur = out.get(r as usize, c, s);
                        out.set(r as usize, c, s, cur + v);
                    }
                }
            }
        }
    }
    out
}

struct Windowed {
    k: [f64; 11],
    zx: Vec<f64>,
    zy: Vec<f64>,
}

impl Windowed {
    fn new(img: &ImageF) -> Self {
        let k = window_taps();
        Self {
            zx: axis_norm(img.width(), &k),
            zy: axis_norm(img.height(), &k),
            k,
        }
    }

    /// Normalized windowed mean.
    fn mean(&self, img: &ImageF) -> ImageF {
        let mut out = conv_cropped(img, &self.k);
        self.div_norm(&mut out);
        out
    }

    /// Adjoint of `mean`: divide by the normalizer, then convolve.
    fn adjoint(&self, g: &ImageF) -> ImageF {
        let mut t = g.clone();
        self.div_norm(&mut t);
        conv_cropped(&t, &self.k)
    }

    fn div_norm(&self, img: &mut ImageF) {
        for r in 0..img.height() {
            for c in 0..img.width() {
                let z = self.zx[c] * self.zy[r];
                for s in 0..img.channels() {
                    let v = img.get(r, c, s) / z;
                    img.set(r, c, s, v);
                }
            }
        }
    }
}

fn hadamard(a: &ImageF, b: &ImageF) -> ImageF {
    let mut out = a.clone();
    for (x, y) in out.data_mut().iter_mut().zip(b.data()) {
        *x *= y;
    }
    out
}

/// Structural similarity in `[-1, 1]`; 1 for identical images.
pub fn ssim(a: &ImageF, b: &ImageF) -> Result<f64> {
    Ok(ssim_with_grad_impl(a, b, false)?.value)
}

/// SSIM with the analytic gradient w.r.t. `a`.
pub fn ssim_with_grad(a: &ImageF, b: &ImageF) -> Result<SsimGrad> {
    ssim_with_grad_impl(a, b, true)
}

fn ssim_with_grad_impl(a: &ImageF, b: &ImageF, want_grad: bool) -> Result<SsimGrad> {
    if !a.same_shape(b) {
        return Err(a.shape_error(b));
    }
    let win = Windowed::new(a);
    let mu_a = win.mean(a);
    let mu_b = win.mean(b);
    let e_a2 = win.mean(&hadamard(a, a));
    let e_b2 = win.mean(&hadamard(b, b));
    let e_ab = win.mean(&hadamard(a, b));

    let n = a.data().len();
    let inv_n = 1.0 / n as f64;
    let mut value = 0.0;
    // Gradients of the mean SSIM w.r.t. the three a-side moment maps.
    let mut g_mu = a.zeros_like();
    let mut g_ea2 = a.zeros_like();
    let mut g_eab = a.zeros_like();
    for i in 0..n {
        let ma = mu_a.data()[i];
        let mb = mu_b.data()[i];
        let sa2 = e_a2.data()[i] - ma * ma;
        let sb2 = e_b2.data()[i] - mb * mb;
        let sab = e_ab.data()[i] - ma * mb;
        let n1 = 2.0 * ma * mb + SSIM_C1;
        let d1 = ma * ma + mb * mb + SSIM_C1;
        let n2 = 2.0 * sab + SSIM_C2;
        let d2 = sa2 + sb2 + SSIM_C2;
        let s = (n1 * n2) / (d1 * d2);
        value += s;
        if want_grad {
            let ds_dn1 = n2 / (d1 * d2);
            let ds_dn2 = n1 / (d1 * d2);
            let ds_dd1 = -s / d1;
            let ds_dd2 = -s / d2;
            // σ terms re-expand to the raw moments: n2 and d2 both carry
            // -μ_a-dependence through sab and sa2.
            g_mu.data_mut()[i] =
                inv_n * (ds_dn1 * 2.0 * mb + ds_dd1 * 2.0 * ma - ds_dn2 * 2.0 * mb - ds_dd2 * 2.0 * ma);
            g_ea2.data_mut()[i] = inv_n * ds_dd2;
            g_eab.data_mut()[i] = inv_n * ds_dn2 * 2.0;
        }
    }
    value *= inv_n;

    let grad = if want_grad {
        let t_mu = win.adjoint(&g_mu);
        let t_ea2 = win.adjoint(&g_ea2);
        let t_eab = win.adjoint(&g_eab);
        let mut grad = t_mu;
        for i in 0..n {
            grad.data_mut()[i] += 2.0 * a.data()[i] * t_ea2.data()[i] + b.data()[i] * t_eab.data()[i];
        }
        grad
    } else {
        a.zeros_like()
    };
    Ok(SsimGrad { value, grad })
}
