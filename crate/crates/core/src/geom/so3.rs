//! SO(3) tangent-space helpers: hat map, exponential coefficients and the
//! right/left Jacobians used to push rotation gradients through
//! interpolation. Angles near zero fall back to Taylor expansions.

use nalgebra::{Matrix3, Vector3};

/// Threshold below which series expansions replace the closed forms.
const SMALL_ANGLE: f64 = 1e-6;

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rodrigues formula: rotation matrix of the axis-angle vector `phi`.
pub fn exp(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let k = skew(phi);
    let (a, b) = if theta2 < SMALL_ANGLE * SMALL_ANGLE {
        // sin(t)/t and (1-cos(t))/t^2
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        let theta = theta2.sqrt();
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    Matrix3::identity() + k * a + k * k * b
}

fn jac_coeffs(theta2: f64) -> (f64, f64) {
    // c1 = (1-cos t)/t^2, c2 = (t - sin t)/t^3
    if theta2 < SMALL_ANGLE * SMALL_ANGLE {
        (
            0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0,
            1.0 / 6.0 - theta2 / 120.0 + theta2 * theta2 / 5040.0,
        )
    } else {
        let theta = theta2.sqrt();
        (
            (1.0 - theta.cos()) / theta2,
            (theta - theta.sin()) / (theta2 * theta),
        )
    }
}

/// Right Jacobian: `exp(phi + d) ~= exp(phi) * exp(Jr(phi) d)`.
pub fn right_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    let (c1, c2) = jac_coeffs(phi.norm_squared());
    let k = skew(phi);
    Matrix3::identity() - k * c1 + k * k * c2
}

/// Left Jacobian: `exp(phi + d) ~= exp(Jl(phi) d) * exp(phi)`.
pub fn left_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    let (c1, c2) = jac_coeffs(phi.norm_squared());
    let k = skew(phi);
    Matrix3::identity() + k * c1 + k * k * c2
}

fn inv_jac_coeff(theta2: f64) -> f64 {
    // c3 = 1/t^2 - cot(t/2)/(2t); stable for t in (0, pi].
    if theta2 < SMALL_ANGLE * SMALL_ANGLE {
        1.0 / 12.0 + theta2 / 720.0 + theta2 * theta2 / 30240.0
    } else {
        let theta = theta2.sqrt();
        let half = 0.5 * theta;
        1.0 / theta2 - half.cos() / (2.0 * theta * half.sin())
    }
}

pub fn right_jacobian_inv(phi: &Vector3<f64>) -> Matrix3<f64> {
    let c3 = inv_jac_coeff(phi.norm_squared());
    let k = skew(phi);
    Matrix3::identity() + k * 0.5 + k * k * c3
}

pub fn left_jacobian_inv(phi: &Vector3<f64>) -> Matrix3<f64> {
    let c3 = inv_jac_coeff(phi.norm_squared());
    let k = skew(phi);
    Matrix3::identity() - k * 0.5 + k * k * c3
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn sample_phis() -> Vec<Vector3<f64>> {
        vec![
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(1e-9, -2e-9, 5e-10),
            Vector3::new(0.3, -0.2, 0.9),
            Vector3::new(-1.7, 0.4, 0.1),
            Vector3::new(0.0, 3.0, 0.0),
        ]
    }

    #[test]
    fn exp_matches_finite_products() {
        // exp(phi) ~ (I + skew(phi)/n)^n for large n.
        let phi = Vector3::new(0.4, -0.1, 0.7);
        let n = 1 << 20;
        let step = Matrix3::identity() + skew(&(phi / n as f64));
        let mut acc = Matrix3::identity();
        for _ in 0..n {
            acc = step * acc;
        }
        let r = exp(&phi);
        assert_relative_eq!(r, acc, epsilon = 1e-5);
    }

    #[test]
    fn jacobians_are_transposes() {
        for phi in sample_phis() {
            let jr = right_jacobian(&phi);
            let jl = left_jacobian(&phi);
            assert_relative_eq!(jr.transpose(), jl, epsilon = 1e-12);
        }
    }

    #[test]
    fn inverse_jacobians_invert() {
        for phi in sample_phis() {
            let prod = right_jacobian(&phi) * right_jacobian_inv(&phi);
            assert_relative_eq!(prod, Matrix3::identity(), epsilon = 1e-9);
            let prod = left_jacobian(&phi) * left_jacobian_inv(&phi);
            assert_relative_eq!(prod, Matrix3::identity(), epsilon = 1e-9);
        }
    }

    #[test]
    fn right_jacobian_matches_finite_difference() {
        let phi = Vector3::new(0.5, -0.8, 0.2);
        let jr = right_jacobian(&phi);
        let h = 1e-7;
        for k in 0..3 {
            let mut dphi = Vector3::zeros();
            dphi[k] = h;
            // exp(phi + h e_k) = exp(phi) exp(Jr h e_k)  =>
            // log(exp(phi)^T exp(phi + h e_k)) / h ~= Jr e_k
            let lhs = exp(&phi).transpose() * exp(&(phi + dphi));
            // Extract axis-angle from the small rotation.
            let cos = ((lhs.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
            let angle = cos.acos();
            let axis = Vector3::new(
                lhs[(2, 1)] - lhs[(1, 2)],
                lhs[(0, 2)] - lhs[(2, 0)],
                lhs[(1, 0)] - lhs[(0, 1)],
            ) / (2.0 * angle.sin().max(1e-300));
            let fd = axis * angle / h;
            assert_relative_eq!(fd, jr.column(k).into_owned(), epsilon = 1e-5);
        }
    }
}
