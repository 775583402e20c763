//! Pinhole camera, computer-vision convention: x right, y down, z forward
//! in camera space; pixel (u,v) = (f*x/z + cx, f*y/z + cy). World space is
//! y-up, so a camera built by [`Camera::look_at`] films upright images.

use crate::{Error, Mat3, Result, Vec2, Vec3};

#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    /// Focal length in pixels (square pixels, shared by both axes).
    pub focal: f32,
    /// Principal point in pixels.
    pub principal: Vec2,
    pub width: usize,
    pub height: usize,
    /// World-to-camera rotation (rows are the camera axes in world space).
    pub rotation: Mat3,
    /// World-to-camera translation: x_cam = R x_world + t.
    pub translation: Vec3,
}

impl Camera {
    /// Camera at `position` looking at `target`, with `up` fixing the roll.
    /// Focal length in pixels for the given image size.
    pub fn look_at(
        position: Vec3,
        target: Vec3,
        up: Vec3,
        focal: f32,
        width: usize,
        height: usize,
    ) -> Result<Camera> {
        let forward = target - position;
        if forward.norm() < 1e-9 {
            return Err(Error::InvalidModel(
                "camera position coincides with target".into(),
            ));
        }
        let z = forward.normalize();
        let x = z.cross(&up);
        if x.norm() < 1e-6 {
            return Err(Error::InvalidModel(
                "camera view direction parallel to up vector".into(),
            ));
        }
        let x = x.normalize();
        let y = z.cross(&x);
        let rotation = Mat3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let cam = Camera {
            focal,
            principal: Vec2::new(width as f32 / 2.0, height as f32 / 2.0),
            width,
            height,
            rotation,
            translation: -(rotation * position),
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.focal > 0.0 && self.focal.is_finite()) {
            return Err(Error::InvalidModel(format!(
                "focal length {} not positive",
                self.focal
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidModel("camera image size is zero".into()));
        }
        let r = self.rotation;
        let ident = r * r.transpose();
        if (ident - Mat3::identity()).norm() > 1e-4 || (r.determinant() - 1.0).abs() > 1e-4 {
            return Err(Error::InvalidModel(
                "camera pose is not a rigid transform".into(),
            ));
        }
        Ok(())
    }

    /// Camera center in world coordinates.
    pub fn position(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn to_camera(&self, p: Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// Projects a world point to pixel coordinates and view depth.
    /// None when the point is not safely in front of the camera.
    pub fn project(&self, p: Vec3) -> Option<(f32, f32, f32)> {
        let c = self.to_camera(p);
        if c.z <= 1e-4 {
            return None;
        }
        Some((
            self.focal * c.x / c.z + self.principal.x,
            self.focal * c.y / c.z + self.principal.y,
            c.z,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> Camera {
        Camera::look_at(
            Vec3::new(0.0, 0.9, 2.5),
            Vec3::new(0.0, 0.9, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
            500.0,
            512,
            512,
        )
        .unwrap()
    }

    #[test]
    fn look_at_produces_rigid_pose() {
        let cam = fixture();
        cam.validate().unwrap();
        assert!((cam.position() - Vec3::new(0.0, 0.9, 2.5)).norm() < 1e-5);
    }

    #[test]
    fn target_projects_to_principal_point() {
        let cam = fixture();
        let (u, v, z) = cam.project(Vec3::new(0.0, 0.9, 0.0)).unwrap();
        assert!((u - 256.0).abs() < 1e-3);
        assert!((v - 256.0).abs() < 1e-3);
        assert!((z - 2.5).abs() < 1e-5);
    }

    #[test]
    fn world_up_is_image_up() {
        let cam = fixture();
        // A point above the target must land at smaller v (image up).
        let (_, v_high, _) = cam.project(Vec3::new(0.0, 1.4, 0.0)).unwrap();
        let (_, v_low, _) = cam.project(Vec3::new(0.0, 0.4, 0.0)).unwrap();
        assert!(v_high < 256.0 && v_low > 256.0);
        // World +x coincides with this camera's x axis, so it lands at
        // larger u.
        let (u_right, _, _) = cam.project(Vec3::new(0.5, 0.9, 0.0)).unwrap();
        assert!(u_right > 256.0);
    }

    #[test]
    fn pinhole_scale_is_focal_over_depth() {
        let cam = fixture();
        let (u0, _, _) = cam.project(Vec3::new(0.0, 0.9, 0.0)).unwrap();
        let (u1, _, _) = cam.project(Vec3::new(0.5, 0.9, 0.0)).unwrap();
        // 0.5 m at 2.5 m depth under f=500 px spans 100 px.
        assert!(((u1 - u0) - 100.0).abs() < 1e-3);
    }

    #[test]
    fn points_behind_camera_do_not_project() {
        let cam = fixture();
        assert!(cam.project(Vec3::new(0.0, 0.9, 5.0)).is_none());
    }

    #[test]
    fn degenerate_setups_are_rejected() {
        let p = Vec3::new(0.0, 1.0, 2.0);
        assert!(Camera::look_at(p, p, Vec3::new(0.0, 1.0, 0.0), 500.0, 64, 64).is_err());
        assert!(Camera::look_at(
            Vec3::new(0.0, 5.0, 0.0),
            Vec3::zeros(),
            Vec3::new(0.0, 1.0, 0.0),
            500.0,
            64,
            64
        )
        .is_err());
        let mut cam = fixture();
        cam.focal = -1.0;
        assert!(cam.validate().is_err());
    }
}
