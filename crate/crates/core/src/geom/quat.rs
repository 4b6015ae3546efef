use crate::error::{Error, Result};
use crate::geom::so3;
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

/// Unit quaternion with a canonical sign.
///
/// Invariants enforced by every constructor:
/// - norm is 1 within 1e-12 (inputs are renormalized),
/// - `w >= 0`; for `w == 0` the first nonzero vector component is positive,
///   so `q` and `-q` map to the same representative.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct Quaternion {
    w: f64,
    x: f64,
    y: f64,
    z: f64,
}

impl Quaternion {
    pub fn identity() -> Self {
        Quaternion {
            w: 1.0,
            x: 0.0,
            y: 0.0,
            z: 0.0,
        }
    }

    /// Builds a unit quaternion from arbitrary components, normalizing and
    /// canonicalizing. Errors when the norm is too small to be meaningful.
    pub fn try_new(w: f64, x: f64, y: f64, z: f64) -> Result<Self> {
        let norm2 = w * w + x * x + y * y + z * z;
        if norm2.is_nan() || norm2 <= 1e-24 {
            return Err(Error::ZeroQuaternion { norm: norm2.sqrt() });
        }
        let q = if norm2 == 1.0 {
            // Skip the division so already-unit inputs round-trip bit-exactly.
            Quaternion { w, x, y, z }
        } else {
            let inv = norm2.sqrt().recip();
            Quaternion {
                w: w * inv,
                x: x * inv,
                y: y * inv,
                z: z * inv,
            }
        };
        Ok(q.canonicalized())
    }

    fn canonicalized(self) -> Self {
        let Quaternion { w, x, y, z } = self;
        let flip = if w != 0.0 {
            w < 0.0
        } else if x != 0.0 {
            x < 0.0
        } else if y != 0.0 {
            y < 0.0
        } else {
            z < 0.0
        };
        if flip {
            Quaternion {
                w: -w,
                x: -x,
                y: -y,
                z: -z,
            }
        } else {
            self
        }
    }

    pub fn w(&self) -> f64 {
        self.w
    }
    pub fn x(&self) -> f64 {
        self.x
    }
    pub fn y(&self) -> f64 {
        self.y
    }
    pub fn z(&self) -> f64 {
        self.z
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    /// Exponential map: axis-angle vector (angle = |phi|) to quaternion.
    pub fn exp_map(phi: &Vector3<f64>) -> Self {
        let [w, x, y, z] = raw_exp(phi);
        Quaternion { w, x, y, z }.canonicalized()
    }

    /// Logarithm map: principal axis-angle vector, |result| <= pi.
    pub fn log_map(&self) -> Vector3<f64> {
        raw_log([self.w, self.x, self.y, self.z])
    }

    /// Hamilton product (this * rhs), re-canonicalized.
    pub fn mul(&self, rhs: &Quaternion) -> Quaternion {
        let [w, x, y, z] = raw_mul(self.coords(), rhs.coords());
        // Products of unit quaternions drift from unit norm only by rounding;
        // renormalize to keep the invariant tight over long chains.
        let norm2 = w * w + x * x + y * y + z * z;
        let q = if norm2 == 1.0 {
            Quaternion { w, x, y, z }
        } else {
            let inv = norm2.sqrt().recip();
            Quaternion {
                w: w * inv,
                x: x * inv,
                y: y * inv,
                z: z * inv,
            }
        };
        q.canonicalized()
    }

    /// Inverse rotation; for unit quaternions this is the conjugate.
    pub fn inverse(&self) -> Quaternion {
        Quaternion {
            w: self.w,
            x: -self.x,
            y: -self.y,
            z: -self.z,
        }
        .canonicalized()
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        // q v q^-1 expanded: v + 2 u x (u x v + w v), u = (x, y, z).
        let u = Vector3::new(self.x, self.y, self.z);
        let t = u.cross(v) * 2.0;
        v + t * self.w + u.cross(&t)
    }

    pub fn to_matrix(&self) -> Matrix3<f64> {
        let (w, x, y, z) = (self.w, self.x, self.y, self.z);
        Matrix3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        )
    }

    /// Shepperd-style conversion from a rotation matrix.
    pub fn from_matrix(m: &Matrix3<f64>) -> Result<Self> {
        let tr = m.trace();
        let (w, x, y, z);
        if tr > 0.0 {
            let s = (tr + 1.0).sqrt() * 2.0;
            w = 0.25 * s;
            x = (m[(2, 1)] - m[(1, 2)]) / s;
            y = (m[(0, 2)] - m[(2, 0)]) / s;
            z = (m[(1, 0)] - m[(0, 1)]) / s;
        } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
            let s = (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt() * 2.0;
            w = (m[(2, 1)] - m[(1, 2)]) / s;
            x = 0.25 * s;
            y = (m[(0, 1)] + m[(1, 0)]) / s;
            z = (m[(0, 2)] + m[(2, 0)]) / s;
        } else if m[(1, 1)] > m[(2, 2)] {
            let s = (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt() * 2.0;
            w = (m[(0, 2)] - m[(2, 0)]) / s;
            x = (m[(0, 1)] + m[(1, 0)]) / s;
            y = 0.25 * s;
            z = (m[(1, 2)] + m[(2, 1)]) / s;
        } else {
            let s = (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt() * 2.0;
            w = (m[(1, 0)] - m[(0, 1)]) / s;
            x = (m[(0, 2)] + m[(2, 0)]) / s;
            y = (m[(1, 2)] + m[(2, 1)]) / s;
            z = 0.25 * s;
        }
        Quaternion::try_new(w, x, y, z)
    }

    pub fn dot(&self, rhs: &Quaternion) -> f64 {
        self.w * rhs.w + self.x * rhs.x + self.y * rhs.y + self.z * rhs.z
    }

    /// Rotation angle (radians, in [0, pi]) between two orientations.
    pub fn angle_to(&self, rhs: &Quaternion) -> f64 {
        let d = self.dot(rhs).abs().min(1.0);
        2.0 * d.acos()
    }
}

impl TryFrom<[f64; 4]> for Quaternion {
    type Error = Error;
    fn try_from(v: [f64; 4]) -> Result<Self> {
        Quaternion::try_new(v[0], v[1], v[2], v[3])
    }
}

impl From<Quaternion> for [f64; 4] {
    fn from(q: Quaternion) -> [f64; 4] {
        q.coords()
    }
}

fn raw_mul(a: [f64; 4], b: [f64; 4]) -> [f64; 4] {
    let [aw, ax, ay, az] = a;
    let [bw, bx, by, bz] = b;
    [
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ]
}

fn raw_exp(phi: &Vector3<f64>) -> [f64; 4] {
    let theta2 = phi.norm_squared();
    if theta2 < 1e-12 {
        let k = 0.5 - theta2 / 48.0;
        [1.0 - theta2 / 8.0, phi.x * k, phi.y * k, phi.z * k]
    } else {
        let theta = theta2.sqrt();
        let half = 0.5 * theta;
        let k = half.sin() / theta;
        [half.cos(), phi.x * k, phi.y * k, phi.z * k]
    }
}

fn raw_log(q: [f64; 4]) -> Vector3<f64> {
    let [w, x, y, z] = if q[0] < 0.0 {
        [-q[0], -q[1], -q[2], -q[3]]
    } else {
        q
    };
    let v = Vector3::new(x, y, z);
    let s2 = v.norm_squared();
    if s2 < 1e-24 {
        // theta/sin(theta/2) ~= 2/w * (1 - s^2/(3 w^2)) for tiny s = |v|.
        return v * (2.0 / w.max(1e-300)) * (1.0 - s2 / (3.0 * w * w).max(1e-300));
    }
    let s = s2.sqrt();
    let theta = 2.0 * s.atan2(w);
    v * (theta / s)
}

/// Spherical linear interpolation along the shortest arc.
///
/// Falls back to normalized linear interpolation when the arc is nearly
/// degenerate (|dot| > 1 - 1e-6). Bitwise-identical endpoints return the
/// shared pose unchanged, so static trajectories sample exactly.
pub fn slerp(q0: &Quaternion, q1: &Quaternion, t: f64) -> Quaternion {
    let a = q0.coords();
    let mut b = q1.coords();
    let mut d = a[0] * b[0] + a[1] * b[1] + a[2] * b[2] + a[3] * b[3];
    if d < 0.0 {
        for v in &mut b {
            *v = -*v;
        }
        d = -d;
    }
    if a == b {
        return *q0;
    }
    if d > 1.0 - 1e-6 {
        // nlerp: exact at both endpoints, within O(theta^2) of the geodesic.
        let c = [
            a[0] + t * (b[0] - a[0]),
            a[1] + t * (b[1] - a[1]),
            a[2] + t * (b[2] - a[2]),
            a[3] + t * (b[3] - a[3]),
        ];
        return Quaternion::try_new(c[0], c[1], c[2], c[3])
            .expect("nlerp of unit quaternions cannot vanish");
    }
    let theta = d.min(1.0).acos();
    let sin_theta = theta.sin();
    let ka = ((1.0 - t) * theta).sin() / sin_theta;
    let kb = (t * theta).sin() / sin_theta;
    Quaternion::try_new(
        ka * a[0] + kb * b[0],
        ka * a[1] + kb * b[1],
        ka * a[2] + kb * b[2],
        ka * a[3] + kb * b[3],
    )
    .expect("slerp of unit quaternions cannot vanish")
}

/// First-order sensitivity of `slerp(q0, q1, s)` to left perturbations of its
/// endpoints: `dphi_s = A dphi_0 + B dphi_1`, all tangents being left
/// perturbations (`q <- exp(dphi) q`).
///
/// Derivation sketch: with `u = log(q0^-1 q1)` and `q_s = q0 exp(s u)`,
/// endpoint perturbations move `u` through the inverse left Jacobian and
/// re-emerge at `q_s` through the right Jacobian of `s u`, giving
/// `G = R(q_s) Jr(s u) Jl^-1(u) R(q0)^T`, `A = I - s G`, `B = s G`.
pub fn slerp_chain(q0: &Quaternion, q1: &Quaternion, s: f64) -> (Matrix3<f64>, Matrix3<f64>) {
    let mut b = q1.coords();
    let a = q0.coords();
    let d = a[0] * b[0] + a[1] * b[1] + a[2] * b[2] + a[3] * b[3];
    if d < 0.0 {
        for v in &mut b {
            *v = -*v;
        }
    }
    let a_inv = [a[0], -a[1], -a[2], -a[3]];
    let u = raw_log(raw_mul(a_inv, b));
    let su = u * s;
    let r_s = Quaternion::exp_map(&su); // q0^-1 q_s
    let rot_s = q0.mul(&r_s).to_matrix();
    let g = rot_s * so3::right_jacobian(&su) * so3::left_jacobian_inv(&u) * q0.to_matrix().transpose();
    (Matrix3::identity() - g * s, g * s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::Vector4;
    use proptest::prelude::*;

    fn quat(w: f64, x: f64, y: f64, z: f64) -> Quaternion {
        Quaternion::try_new(w, x, y, z).unwrap()
    }

    #[test]
    fn constructor_normalizes_and_canonicalizes() {
        let q = quat(-2.0, 0.0, 0.0, 2.0);
        assert!(q.w() >= 0.0);
        let n = q.coords().iter().map(|v| v * v).sum::<f64>();
        assert!((n - 1.0).abs() < 1e-12);
        assert_relative_eq!(q.w(), std::f64::consts::FRAC_1_SQRT_2, epsilon = 1e-12);
        assert_relative_eq!(q.z(), -std::f64::consts::FRAC_1_SQRT_2, epsilon = 1e-12);
    }

    #[test]
    fn zero_quaternion_rejected() {
        assert!(Quaternion::try_new(0.0, 0.0, 0.0, 0.0).is_err());
        assert!(Quaternion::try_new(1e-13, 0.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn negation_collapses_to_same_representative() {
        let q = quat(0.3, -0.5, 0.7, 0.2);
        let neg = Quaternion::try_new(-q.w(), -q.x(), -q.y(), -q.z()).unwrap();
        assert_eq!(q.coords(), neg.coords());
    }

    #[test]
    fn rotate_matches_matrix() {
        let q = quat(0.9, 0.1, -0.3, 0.25);
        let v = Vector3::new(0.4, -1.2, 2.0);
        assert_relative_eq!(q.rotate(&v), q.to_matrix() * v, epsilon = 1e-12);
    }

    #[test]
    fn log_exp_round_trip() {
        for phi in [
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(1e-8, 2e-8, -1e-8),
            Vector3::new(0.4, -0.2, 0.9),
            Vector3::new(3.0, 0.4, -0.4),
        ] {
            let q = Quaternion::exp_map(&phi);
            assert_relative_eq!(q.log_map(), phi, epsilon = 1e-9);
        }
    }

    #[test]
    fn matrix_round_trip() {
        let q = quat(0.2, 0.9, -0.1, 0.36);
        let back = Quaternion::from_matrix(&q.to_matrix()).unwrap();
        assert_relative_eq!(
            Vector3::from_row_slice(&back.coords()[1..]),
            Vector3::from_row_slice(&q.coords()[1..]),
            epsilon = 1e-12
        );
    }

    /// Independent oracle: the geodesic through the exponential map,
    /// q0 * exp(t * log(q0^-1 q1)).
    fn slerp_oracle(q0: &Quaternion, q1: &Quaternion, t: f64) -> Quaternion {
        let mut b = q1.coords();
        let a = q0.coords();
        let d = a[0] * b[0] + a[1] * b[1] + a[2] * b[2] + a[3] * b[3];
        if d < 0.0 {
            for v in &mut b {
                *v = -*v;
            }
        }
        let a_inv = [a[0], -a[1], -a[2], -a[3]];
        let u = raw_log(raw_mul(a_inv, b));
        q0.mul(&Quaternion::exp_map(&(u * t)))
    }

    #[test]
    fn slerp_matches_exponential_map_formula() {
        let q0 = quat(0.9, 0.1, -0.2, 0.3);
        let q1 = quat(0.5, 0.7, 0.2, -0.4);
        let via_exp = slerp_oracle(&q0, &q1, 0.25);
        let direct = slerp(&q0, &q1, 0.25);
        for (a, b) in direct.coords().iter().zip(via_exp.coords()) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn slerp_identical_endpoints_returns_exact_bits() {
        let q = quat(0.37, -0.2, 0.11, 0.9);
        for t in [0.0, 0.3, 0.5, 0.77, 1.0] {
            let s = slerp(&q, &q, t);
            assert_eq!(s.coords(), q.coords());
        }
    }

    #[test]
    fn slerp_takes_shortest_arc() {
        let q0 = quat(1.0, 0.0, 0.0, 0.0);
        // ~170 degrees about z; the negated representative is closer.
        let q1 = Quaternion::exp_map(&Vector3::new(0.0, 0.0, 170f64.to_radians()));
        let mid = slerp(&q0, &q1, 0.5);
        assert!(q0.angle_to(&mid) < std::f64::consts::FRAC_PI_2);
        assert_relative_eq!(
            q0.angle_to(&mid) + mid.angle_to(&q1),
            q0.angle_to(&q1),
            epsilon = 1e-9
        );
    }

    #[test]
    fn slerp_chain_matches_finite_differences() {
        let q0 = quat(0.8, 0.3, -0.2, 0.1);
        let q1 = quat(0.6, -0.5, 0.4, 0.2);
        let s = 0.37;
        let (a_mat, b_mat) = slerp_chain(&q0, &q1, s);
        let h = 1e-7;
        let base = slerp(&q0, &q1, s);
        for k in 0..3 {
            let mut d = Vector3::zeros();
            d[k] = h;
            let pert = |dq0: &Vector3<f64>, dq1: &Vector3<f64>| {
                let p0 = Quaternion::exp_map(dq0).mul(&q0);
                let p1 = Quaternion::exp_map(dq1).mul(&q1);
                slerp(&p0, &p1, s)
            };
            // Left tangent of the perturbed sample relative to the base.
            let tangent = |qp: Quaternion| qp.mul(&base.inverse()).log_map() / h;
            let fd0 = tangent(pert(&d, &Vector3::zeros()));
            let fd1 = tangent(pert(&Vector3::zeros(), &d));
            assert_relative_eq!(fd0, a_mat.column(k).into_owned(), epsilon = 1e-5);
            assert_relative_eq!(fd1, b_mat.column(k).into_owned(), epsilon = 1e-5);
        }
    }

    #[test]
    fn slerp_chain_endpoint_limits() {
        let q0 = quat(0.8, 0.3, -0.2, 0.1);
        let q1 = quat(0.6, -0.5, 0.4, 0.2);
        let (a0, b0) = slerp_chain(&q0, &q1, 0.0);
        assert_relative_eq!(a0, Matrix3::identity(), epsilon = 1e-12);
        assert_relative_eq!(b0, Matrix3::zeros(), epsilon = 1e-12);
        let (a1, b1) = slerp_chain(&q0, &q1, 1.0);
        assert_relative_eq!(a1, Matrix3::zeros(), epsilon = 1e-9);
        assert_relative_eq!(b1, Matrix3::identity(), epsilon = 1e-9);
    }

    proptest! {
        #[test]
        fn prop_any_construction_is_canonical(
            w in -2.0f64..2.0, x in -2.0f64..2.0, y in -2.0f64..2.0, z in -2.0f64..2.0
        ) {
            prop_assume!(w * w + x * x + y * y + z * z > 1e-3);
            let q = Quaternion::try_new(w, x, y, z).unwrap();
            let n: f64 = q.coords().iter().map(|v| v * v).sum();
            prop_assert!((n - 1.0).abs() < 1e-12);
            prop_assert!(q.w() >= 0.0);
        }

        #[test]
        fn prop_slerp_endpoints(
            w in -1.0f64..1.0, x in -1.0f64..1.0, y in -1.0f64..1.0, z in -1.0f64..1.0
        ) {
            prop_assume!(w * w + x * x + y * y + z * z > 1e-3);
            let n1 = (x + 0.2) * (x + 0.2) + w * w + z * z + (y - 0.1) * (y - 0.1);
            prop_assume!(n1 > 1e-3);
            let q0 = Quaternion::try_new(w, x, y, z).unwrap();
            let q1 = Quaternion::try_new(x + 0.2, w, z, y - 0.1).unwrap();
            let s0 = slerp(&q0, &q1, 0.0);
            let s1 = slerp(&q0, &q1, 1.0);
            // Compare components, not angles: acos amplifies 1-ulp dot
            // differences to ~1e-8, which would drown the real check.
            let d0 = Vector4::from(s0.coords()) - Vector4::from(q0.coords());
            let d1 = Vector4::from(s1.coords()) - Vector4::from(q1.coords());
            prop_assert!(d0.norm() < 1e-12);
            prop_assert!(d1.norm() < 1e-12);
        }
    }
}
