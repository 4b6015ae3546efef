use crate::error::{Error, Result};
use crate::geom::Pose;
use nalgebra::{Matrix2x3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

pub const DEFAULT_NEAR: f64 = 0.01;

/// Pinhole camera. Pixel `(row, col)` samples the ray through continuous
/// image coordinate `(x = col, y = row)`; that convention is shared by the
/// rasterizer, depth unprojection and the flow oracle, so integer-pixel
/// anchors round-trip exactly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    #[serde(default = "default_near")]
    pub near: f64,
}

fn default_near() -> f64 {
    DEFAULT_NEAR
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::Config(format!(
                "focal lengths must be positive, got fx={fx} fy={fy}"
            )));
        }
        if width == 0 || height == 0 {
            return Err(Error::Config(format!(
                "image size must be positive, got {width}x{height}"
            )));
        }
        Ok(CameraIntrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            near: DEFAULT_NEAR,
        })
    }

    /// Intrinsics of the same camera at `1/div` resolution. Valid because
    /// pixel (r, c) maps to continuous (c, r): pure coordinate scaling.
    pub fn downscaled(&self, div: usize) -> Result<Self> {
        if div == 0 || !self.width.is_multiple_of(div) || !self.height.is_multiple_of(div) {
            return Err(Error::Config(format!(
                "cannot downscale {}x{} by {div}",
                self.width, self.height
            )));
        }
        let f = div as f64;
        Ok(CameraIntrinsics {
            fx: self.fx / f,
            fy: self.fy / f,
            cx: self.cx / f,
            cy: self.cy / f,
            width: self.width / div,
            height: self.height / div,
            near: self.near,
        })
    }

    /// Camera-frame point to pixel coordinate plus depth. Errors for points
    /// at or behind the near plane.
    pub fn project_cam(&self, pc: &Vector3<f64>) -> Result<(Vector2<f64>, f64)> {
        if pc.z <= self.near {
            return Err(Error::BehindCamera {
                z: pc.z,
                near: self.near,
            });
        }
        Ok((
            Vector2::new(
                self.fx * pc.x / pc.z + self.cx,
                self.fy * pc.y / pc.z + self.cy,
            ),
            pc.z,
        ))
    }

    /// World point to pixel through a camera-to-world pose.
    pub fn project(&self, pose: &Pose, pw: &Vector3<f64>) -> Result<(Vector2<f64>, f64)> {
        self.project_cam(&pose.transform_inv(pw))
    }

    /// Jacobian of the pixel coordinate w.r.t. the camera-frame point.
    pub fn projection_jacobian(&self, pc: &Vector3<f64>) -> Matrix2x3<f64> {
        let iz = 1.0 / pc.z;
        let iz2 = iz * iz;
        Matrix2x3::new(
            self.fx * iz,
            0.0,
            -self.fx * pc.x * iz2,
            0.0,
            self.fy * iz,
            -self.fy * pc.y * iz2,
        )
    }

    /// Pixel plus depth to a camera-frame point.
    pub fn unproject(&self, px: &Vector2<f64>, depth: f64) -> Vector3<f64> {
        Vector3::new(
            (px.x - self.cx) / self.fx * depth,
            (px.y - self.cy) / self.fy * depth,
            depth,
        )
    }

    /// Pixel plus depth to a world point through a camera-to-world pose.
    pub fn unproject_world(&self, pose: &Pose, px: &Vector2<f64>, depth: f64) -> Vector3<f64> {
        pose.transform(&self.unproject(px, depth))
    }

    pub fn contains(&self, px: &Vector2<f64>) -> bool {
        px.x >= 0.0 && px.y >= 0.0 && px.x <= (self.width - 1) as f64 && px.y <= (self.height - 1) as f64
    }
}
