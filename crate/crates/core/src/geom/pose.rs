use crate::geom::Quaternion;
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

/// Camera-to-world rigid transform: `x_world = rot * x_cam + trans`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rot: Quaternion,
    pub trans: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rot: Quaternion::identity(),
            trans: Vector3::zeros(),
        }
    }

    pub fn new(rot: Quaternion, trans: Vector3<f64>) -> Self {
        Pose { rot, trans }
    }

    /// Composition: `(self * rhs)(x) = self(rhs(x))`.
    pub fn compose(&self, rhs: &Pose) -> Pose {
        Pose {
            rot: self.rot.mul(&rhs.rot),
            trans: self.rot.rotate(&rhs.trans) + self.trans,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rot_inv = self.rot.inverse();
        Pose {
            rot: rot_inv,
            trans: -rot_inv.rotate(&self.trans),
        }
    }

    /// Camera frame to world frame.
    pub fn transform(&self, x_cam: &Vector3<f64>) -> Vector3<f64> {
        self.rot.rotate(x_cam) + self.trans
    }

    /// World frame to camera frame.
    pub fn transform_inv(&self, x_world: &Vector3<f64>) -> Vector3<f64> {
        self.rot.inverse().rotate(&(x_world - self.trans))
    }

    /// Applies a decoupled left update: rotation by `exp(dphi)` on the left,
    /// translation added directly. This is the tangent convention used by all
    /// pose gradients in the crate.
    pub fn left_update(&self, dphi: &Vector3<f64>, dt: &Vector3<f64>) -> Pose {
        Pose {
            rot: Quaternion::exp_map(dphi).mul(&self.rot),
            trans: self.trans + dt,
        }
    }

    /// Translation distance plus rotation angle to another pose; convenient
    /// for tests and drift diagnostics.
    pub fn distance(&self, other: &Pose) -> (f64, f64) {
        (
            (self.trans - other.trans).norm(),
            self.rot.angle_to(&other.rot),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn sample_pose() -> Pose {
        Pose::new(
            Quaternion::try_new(0.9, 0.2, -0.3, 0.1).unwrap(),
            Vector3::new(1.0, -2.0, 0.5),
        )
    }

    #[test]
    fn compose_with_inverse_is_identity() {
        let p = sample_pose();
        let id = p.compose(&p.inverse());
        assert_relative_eq!(id.trans, Vector3::zeros(), epsilon = 1e-12);
        assert!(id.rot.angle_to(&Quaternion::identity()) < 1e-12);
    }

    #[test]
    fn transform_round_trip() {
        let p = sample_pose();
        let x = Vector3::new(0.3, 0.7, -1.1);
        assert_relative_eq!(p.transform_inv(&p.transform(&x)), x, epsilon = 1e-12);
    }

    #[test]
    fn composition_matches_sequential_transforms() {
        let a = sample_pose();
        let b = Pose::new(
            Quaternion::try_new(0.7, -0.1, 0.5, 0.2).unwrap(),
            Vector3::new(-0.4, 0.1, 2.0),
        );
        let x = Vector3::new(1.0, 2.0, 3.0);
        assert_relative_eq!(
            a.compose(&b).transform(&x),
            a.transform(&b.transform(&x)),
            epsilon = 1e-12
        );
    }
}
