//! Rotations, poses, sub-frame trajectories and trajectory metrics.
//!
//! Conventions used across the crate:
//! - Quaternions are unit-norm with a canonical sign (`w >= 0`), so `q` and
//!   `-q` collapse to one representative.
//! - Poses are camera-to-world: `x_world = R * x_cam + t`.
//! - The camera looks along +z in its own frame, x right, y down.
//! - Rotation tangents are left perturbations: `q <- exp(phi) * q`.

mod align;
mod camera;
mod pose;
mod quat;
pub mod so3;
mod trajectory;
mod tum;

pub use align::{ate_rmse, umeyama, Similarity};
pub use camera::CameraIntrinsics;
pub use pose::Pose;
pub use quat::{slerp, slerp_chain, Quaternion};
pub use trajectory::{InterpolationMode, SubFrameTrajectory};
pub use tum::{read_trajectory, write_trajectory, TimedPose};
