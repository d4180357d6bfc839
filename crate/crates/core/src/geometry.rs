//! Cameras, rays and pose transforms.
//!
//! Conventions, fixed across the engine:
//! - pixel (u, v) samples the pixel center (u + 0.5, v + 0.5), v grows downward;
//! - camera space is right-handed with +x right, +y down, +z forward;
//! - `rotation` maps camera space to world space (its columns are the camera
//!   axes expressed in world coordinates).

use crate::error::{Error, Result};
use crate::math::{Mat3, Vec3};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CameraMode {
    Pinhole,
    Orthographic,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub position: Vec3,
    pub rotation: Mat3,
    /// Vertical field of view in radians (pinhole).
    pub fov_y: f64,
    /// Half of the vertical extent of the image plane (orthographic).
    pub ortho_half_height: f64,
    pub near: f64,
    pub far: f64,
    pub mode: CameraMode,
}

#[derive(Clone, Copy, Debug)]
pub struct Ray {
    pub origin: Vec3,
    /// Unit length.
    pub direction: Vec3,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }
}

impl Camera {
    pub fn new(
        position: Vec3,
        rotation: Mat3,
        fov_y: f64,
        ortho_half_height: f64,
        near: f64,
        far: f64,
        mode: CameraMode,
    ) -> Result<Camera> {
        if !rotation.is_rotation(1e-9) {
            return Err(Error::InvalidCamera("rotation must be orthonormal with det +1".into()));
        }
        if !(near > 0.0 && far > near) {
            return Err(Error::InvalidCamera(format!("need 0 < near < far, got {near}..{far}")));
        }
        match mode {
            CameraMode::Pinhole => {
                if !(fov_y > 0.0 && fov_y < std::f64::consts::PI) {
                    return Err(Error::InvalidCamera(format!("fov_y {fov_y} outside (0, pi)")));
                }
            }
            CameraMode::Orthographic => {
                if !(ortho_half_height > 0.0) {
                    return Err(Error::InvalidCamera("ortho_half_height must be positive".into()));
                }
            }
        }
        Ok(Camera { position, rotation, fov_y, ortho_half_height, near, far, mode })
    }

    /// Re-runs the constructor checks; deserialized cameras must pass through
    /// here before use.
    pub fn validate(&self) -> Result<()> {
        Camera::new(
            self.position,
            self.rotation,
            self.fov_y,
            self.ortho_half_height,
            self.near,
            self.far,
            self.mode,
        )
        .map(|_| ())
    }

    pub fn pinhole(position: Vec3, rotation: Mat3, fov_y: f64, near: f64, far: f64) -> Result<Camera> {
        Camera::new(position, rotation, fov_y, 0.0, near, far, CameraMode::Pinhole)
    }

    pub fn orthographic(
        position: Vec3,
        rotation: Mat3,
        half_height: f64,
        near: f64,
        far: f64,
    ) -> Result<Camera> {
        Camera::new(position, rotation, 0.0, half_height, near, far, CameraMode::Orthographic)
    }

    /// Rotation built from eye/target/up. The image's up direction aligns
    /// with `up` as closely as the +y-down camera frame permits.
    pub fn look_at_rotation(eye: Vec3, target: Vec3, up: Vec3) -> Result<Mat3> {
        let forward = target - eye;
        if forward.length() < 1e-12 {
            return Err(Error::InvalidCamera("look_at target coincides with eye".into()));
        }
        let z = forward.normalized();
        let up_perp = up - z * up.dot(z);
        if up_perp.length() < 1e-9 {
            return Err(Error::InvalidCamera("up vector parallel to view direction".into()));
        }
        let y = -up_perp.normalized();
        let x = y.cross(z);
        Ok(Mat3::from_cols(x, y, z))
    }

    /// World forward axis (+z of camera space).
    pub fn lookat(&self) -> Vec3 {
        self.rotation.col(2)
    }

    pub fn world_to_cam(&self, x: Vec3) -> Vec3 {
        self.rotation.transpose_mul_vec(x - self.position)
    }

    pub fn cam_to_world(&self, x: Vec3) -> Vec3 {
        self.rotation.mul_vec(x) + self.position
    }

    /// Ray through the center of pixel (u, v) of a width x height image.
    pub fn ray_for_pixel(&self, u: u32, v: u32, width: u32, height: u32) -> Result<Ray> {
        if u >= width || v >= height {
            return Err(Error::PixelOutOfRange { u, v, width, height });
        }
        Ok(self.ray_for_pixel_centered(u as f64 + 0.5, v as f64 + 0.5, width, height))
    }

    /// Ray through continuous image position (su, sv) in pixel units, where
    /// (u + 0.5, v + 0.5) is the center of pixel (u, v). No range check;
    /// the low-res intersection grid uses off-center positions.
    pub fn ray_for_pixel_centered(&self, su: f64, sv: f64, width: u32, height: u32) -> Ray {
        let aspect = width as f64 / height as f64;
        let ndc_x = 2.0 * su / width as f64 - 1.0;
        let ndc_y = 2.0 * sv / height as f64 - 1.0;
        match self.mode {
            CameraMode::Pinhole => {
                let th = (self.fov_y * 0.5).tan();
                let dir_cam = Vec3::new(ndc_x * th * aspect, ndc_y * th, 1.0).normalized();
                Ray { origin: self.position, direction: self.rotation.mul_vec(dir_cam) }
            }
            CameraMode::Orthographic => {
                let hh = self.ortho_half_height;
                let origin_cam = Vec3::new(ndc_x * hh * aspect, ndc_y * hh, 0.0);
                Ray {
                    origin: self.cam_to_world(origin_cam),
                    direction: self.rotation.col(2),
                }
            }
        }
    }

    /// Continuous pixel position hit by world point `x`, in the same units as
    /// `ray_for_pixel_centered`, plus the camera-space depth. `None` when the
    /// point is at or behind the camera plane (pinhole).
    pub fn project(&self, x: Vec3, width: u32, height: u32) -> Option<(f64, f64, f64)> {
        let c = self.world_to_cam(x);
        let aspect = width as f64 / height as f64;
        let (ndc_x, ndc_y) = match self.mode {
            CameraMode::Pinhole => {
                if c.z <= 1e-12 {
                    return None;
                }
                let th = (self.fov_y * 0.5).tan();
                (c.x / (c.z * th * aspect), c.y / (c.z * th))
            }
            CameraMode::Orthographic => {
                let hh = self.ortho_half_height;
                (c.x / (hh * aspect), c.y / hh)
            }
        };
        let su = (ndc_x + 1.0) * 0.5 * width as f64;
        let sv = (ndc_y + 1.0) * 0.5 * height as f64;
        Some((su, sv, c.z))
    }
}

/// Dolly-zoom: slide the camera along its lookat axis to `new_distance` from
/// `subject` while widening or narrowing the field of view so that
/// `new_distance * tan(fov'/2) = d * tan(fov/2)`, which keeps the subject's
/// projected size fixed.
pub fn dolly_zoom_camera(camera: &Camera, new_distance: f64, subject: Vec3) -> Result<Camera> {
    if camera.mode != CameraMode::Pinhole {
        return Err(Error::InvalidCamera("dolly zoom requires a pinhole camera".into()));
    }
    if !(new_distance > 0.0) {
        return Err(Error::InvalidArgument(format!("new_distance must be positive, got {new_distance}")));
    }
    let axis = camera.lookat();
    let d = (subject - camera.position).dot(axis);
    if d <= 0.0 {
        return Err(Error::InvalidArgument("subject is behind the camera".into()));
    }
    let mut out = *camera;
    out.position = camera.position + axis * (d - new_distance);
    out.fov_y = 2.0 * (d * (camera.fov_y * 0.5).tan() / new_distance).atan();
    // Keep the subject inside the clip range after the move.
    let scale = new_distance / d;
    out.near = camera.near * scale;
    out.far = camera.far * scale;
    Ok(out)
}

/// Convenience wrapper of [`Camera::look_at_rotation`] for poses known to be
/// non-degenerate; panics otherwise.
pub fn look_at_rotation(eye: Vec3, target: Vec3, up: Vec3) -> Mat3 {
    Camera::look_at_rotation(eye, target, up).expect("degenerate look_at pose")
}

/// Rotate the whole rig about the world origin: yaw about world +y, then
/// pitch about world +x, then roll about the camera's own optical axis.
pub fn orbit_camera(base: &Camera, yaw: f64, pitch: f64, roll: f64) -> Camera {
    let rig = Mat3::rotation_y(yaw).mul_mat(&Mat3::rotation_x(pitch));
    let mut out = *base;
    out.position = rig.mul_vec(base.position);
    out.rotation = rig.mul_mat(&base.rotation).mul_mat(&Mat3::rotation_z(roll));
    out
}
