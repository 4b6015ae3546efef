use crate::error::{Error, Result};
use nalgebra::{Matrix3, Vector3};

/// Similarity transform `x -> scale * rot * x + trans`.
#[derive(Debug, Clone, Copy)]
pub struct Similarity {
    pub scale: f64,
    pub rot: Matrix3<f64>,
    pub trans: Vector3<f64>,
}

impl Similarity {
    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rot * x * self.scale + self.trans
    }
}

/// Least-squares similarity aligning `src` onto `dst` (Umeyama). Requires at
/// least three points whose spread spans two dimensions; coincident or
/// collinear sets leave the rotation unconstrained and are rejected.
pub fn umeyama(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Result<Similarity> {
    if src.len() != dst.len() {
        return Err(Error::LengthMismatch {
            a: src.len(),
            b: dst.len(),
        });
    }
    if src.len() < 3 {
        return Err(Error::TooFewPoints {
            min: 3,
            got: src.len(),
        });
    }
    let n = src.len() as f64;
    let mu_s: Vector3<f64> = src.iter().sum::<Vector3<f64>>() / n;
    let mu_d: Vector3<f64> = dst.iter().sum::<Vector3<f64>>() / n;

    let mut sigma = Matrix3::zeros();
    let mut var_src = 0.0;
    for (s, d) in src.iter().zip(dst) {
        let xs = s - mu_s;
        let xd = d - mu_d;
        sigma += xd * xs.transpose();
        var_src += xs.norm_squared();
    }
    sigma /= n;
    var_src /= n;

    let svd = sigma.svd(true, true);
    let sing = svd.singular_values;
    if sing[0].is_nan() || sing[0] <= 0.0 || sing[1] <= 1e-9 * sing[0] {
        let rank = if sing[0] > 0.0 { 1 } else { 0 };
        return Err(Error::DegenerateAlignment { rank });
    }
    let u = svd.u.expect("svd requested u");
    let vt = svd.v_t.expect("svd requested v_t");

    // Reflection guard: force det(R) = +1 by flipping the least-significant
    // singular direction.
    let mut s_fix = Vector3::new(1.0, 1.0, 1.0);
    if (u.determinant() * vt.determinant()) < 0.0 {
        s_fix[2] = -1.0;
    }
    let rot = u * Matrix3::from_diagonal(&s_fix) * vt;
    let scale = (sing[0] * s_fix[0] + sing[1] * s_fix[1] + sing[2] * s_fix[2]) / var_src;
    let trans = mu_d - rot * mu_s * scale;
    Ok(Similarity { scale, rot, trans })
}

/// Absolute trajectory error: RMSE of positions after a similarity (scale +
/// rigid) alignment of the estimate onto the ground truth.
///
/// Degenerate trajectories (static or collinear) cannot support a similarity
/// fit; they fall back to translation-only alignment of the centroids, which
/// keeps static smoke tests meaningful.
pub fn ate_rmse(est: &[Vector3<f64>], gt: &[Vector3<f64>]) -> Result<f64> {
    if est.len() != gt.len() {
        return Err(Error::LengthMismatch {
            a: est.len(),
            b: gt.len(),
        });
    }
    if est.is_empty() {
        return Err(Error::TooFewPoints { min: 1, got: 0 });
    }
    let aligned: Vec<Vector3<f64>> = match umeyama(est, gt) {
        Ok(sim) => est.iter().map(|p| sim.apply(p)).collect(),
        Err(Error::DegenerateAlignment { .. }) | Err(Error::TooFewPoints { .. }) => {
            let n = est.len() as f64;
            let mu_e: Vector3<f64> = est.iter().sum::<Vector3<f64>>() / n;
            let mu_g: Vector3<f64> = gt.iter().sum::<Vector3<f64>>() / n;
            est.iter().map(|p| p - mu_e + mu_g).collect()
        }
        Err(e) => return Err(e),
    };
    let mse = aligned
        .iter()
        .zip(gt)
        .map(|(a, g)| (a - g).norm_squared())
        .sum::<f64>()
        / est.len() as f64;
    Ok(mse.sqrt())
}
