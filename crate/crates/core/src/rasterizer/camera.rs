//! Pinhole camera with a y-down image plane.
//!
//! Camera space is x right, y down, z forward; a world point maps through
//! `world_to_camera`, then to pixels by `u = fx * x / z + cx`. Pixel (i, j)
//! covers the unit square whose center is (i + 0.5, j + 0.5).

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::math::Affine3;

#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub world_to_camera: Affine3,
    /// Splats at or behind this camera-space depth are culled.
    pub z_near: f64,
}

impl Camera {
    pub fn new(
        width: usize,
        height: usize,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        world_to_camera: Affine3,
        z_near: f64,
    ) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidParameter("camera image size must be positive".into()));
        }
        if !(fx > 0.0 && fy > 0.0 && fx.is_finite() && fy.is_finite()) {
            return Err(Error::InvalidParameter(format!("focal lengths must be positive: {fx}, {fy}")));
        }
        if !(cx.is_finite() && cy.is_finite()) {
            return Err(Error::InvalidParameter("principal point must be finite".into()));
        }
        if !world_to_camera.is_finite() {
            return Err(Error::InvalidParameter("camera transform must be finite".into()));
        }
        if !(z_near > 0.0 && z_near.is_finite()) {
            return Err(Error::InvalidParameter(format!("near plane must be positive: {z_near}")));
        }
        Ok(Camera {
            width,
            height,
            fx,
            fy,
            cx,
            cy,
            world_to_camera,
            z_near,
        })
    }

    /// Camera at `eye` looking at `target`, image centered on the principal
    /// point. `up` orients the image (world up appears toward smaller v).
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        width: usize,
        height: usize,
        fx: f64,
        fy: f64,
    ) -> Result<Self> {
        let forward = target - eye;
        if forward.norm() < 1e-12 {
            return Err(Error::InvalidParameter("camera eye coincides with target".into()));
        }
        let f = forward.normalize();
        let right = f.cross(&up);
        if right.norm() < 1e-9 {
            return Err(Error::InvalidParameter("camera up is parallel to the view direction".into()));
        }
        let r = right.normalize();
        let d = f.cross(&r);
        let rot = Matrix3::from_rows(&[r.transpose(), d.transpose(), f.transpose()]);
        let world_to_camera = Affine3::new(rot, -(rot * eye));
        Camera::new(
            width,
            height,
            fx,
            fy,
            width as f64 / 2.0,
            height as f64 / 2.0,
            world_to_camera,
            0.01,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn look_at_centers_the_target() {
        let cam = Camera::look_at(
            Vector3::new(0.0, 0.0, -5.0),
            Vector3::zeros(),
            Vector3::y(),
            64,
            64,
            80.0,
            80.0,
        )
        .unwrap();
        let t = cam.world_to_camera.apply_point(Vector3::zeros());
        assert_relative_eq!(t, Vector3::new(0.0, 0.0, 5.0), epsilon = 1e-12);
        // Rotation part is proper (no reflection baked in).
        assert_relative_eq!(cam.world_to_camera.linear.determinant(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn world_up_appears_above_center() {
        let cam = Camera::look_at(
            Vector3::new(0.0, 0.0, -5.0),
            Vector3::zeros(),
            Vector3::y(),
            64,
            64,
            80.0,
            80.0,
        )
        .unwrap();
        let t = cam.world_to_camera.apply_point(Vector3::new(0.0, 1.0, 0.0));
        let v = cam.fy * t.y / t.z + cam.cy;
        assert!(v < cam.cy, "world up should project to smaller v, got {v}");
    }

    #[test]
    fn rejects_degenerate_setups() {
        let id = Affine3::identity();
        assert!(Camera::new(0, 64, 10.0, 10.0, 0.0, 0.0, id, 0.01).is_err());
        assert!(Camera::new(64, 64, -1.0, 10.0, 0.0, 0.0, id, 0.01).is_err());
        assert!(Camera::new(64, 64, 10.0, 10.0, 0.0, 0.0, id, 0.0).is_err());
        assert!(Camera::look_at(Vector3::zeros(), Vector3::zeros(), Vector3::y(), 8, 8, 1.0, 1.0).is_err());
        assert!(Camera::look_at(Vector3::new(0.0, 2.0, 0.0), Vector3::zeros(), Vector3::y(), 8, 8, 1.0, 1.0)
            .is_err());
    }
}
