//! Pinhole camera with world-to-camera extrinsics (`x_cam = R x_world + t`).
//!
//! Camera frame: x right, y down, z forward along the optical axis.

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::dual::Real;
use crate::error::{Error, Result};
use crate::geom::{self, Mat3, Vec3};

/// Smallest camera-frame depth accepted by projection, meters.
pub const MIN_DEPTH: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    /// World-to-camera rotation.
    pub rotation: Mat3<f64>,
    /// World-to-camera translation, meters.
    pub translation: [f64; 3],
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) || !self.fx.is_finite() || !self.fy.is_finite() {
            return Err(Error::InvalidParam(format!(
                "focal lengths must be positive, got ({}, {})",
                self.fx, self.fy
            )));
        }
        let r = geom::to_na(&self.rotation);
        let orth = (r.transpose() * r - nalgebra::Matrix3::identity()).abs().max();
        let det = r.determinant();
        if orth > 1e-9 || (det - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParam(format!(
                "camera rotation is not a proper rotation (orthogonality error {orth:.2e}, det {det})"
            )));
        }
        Ok(())
    }

    pub fn to_camera_frame(&self, p: [f64; 3]) -> [f64; 3] {
        geom::add(geom::mat_vec(&self.rotation, p), self.translation)
    }

    /// Pixel coordinates of a world point.
    pub fn project(&self, p: [f64; 3]) -> Result<[f64; 2]> {
        let c = self.to_camera_frame(p);
        if !(c[2] > MIN_DEPTH) {
            return Err(Error::BehindCamera { depth: c[2] });
        }
        Ok([
            self.fx * c[0] / c[2] + self.cx,
            self.fy * c[1] / c[2] + self.cy,
        ])
    }

    /// Camera centre in world coordinates.
    pub fn center(&self) -> [f64; 3] {
        let rt = geom::transpose(&self.rotation);
        let c = geom::mat_vec(&rt, self.translation);
        [-c[0], -c[1], -c[2]]
    }

    /// World point at camera-frame depth `depth` along the ray through `pixel`.
    pub fn unproject(&self, pixel: [f64; 2], depth: f64) -> [f64; 3] {
        let cam = [
            (pixel[0] - self.cx) / self.fx * depth,
            (pixel[1] - self.cy) / self.fy * depth,
            depth,
        ];
        let rt = geom::transpose(&self.rotation);
        geom::mat_vec(&rt, geom::sub(cam, self.translation))
    }

    /// World-frame unit direction of the ray through `pixel`.
    pub fn ray_direction(&self, pixel: [f64; 2]) -> [f64; 3] {
        let d = [
            (pixel[0] - self.cx) / self.fx,
            (pixel[1] - self.cy) / self.fy,
            1.0,
        ];
        let w = geom::mat_vec(&geom::transpose(&self.rotation), d);
        geom::scale(w, 1.0 / geom::norm(w))
    }

    /// The 3x4 matrix `K [R | t]`.
    pub fn projection_matrix(&self) -> nalgebra::Matrix3x4<f64> {
        let k = nalgebra::Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0);
        let mut rt = nalgebra::Matrix3x4::zeros();
        rt.fixed_view_mut::<3, 3>(0, 0).copy_from(&geom::to_na(&self.rotation));
        rt.set_column(3, &nalgebra::Vector3::from(self.translation));
        k * rt
    }

    /// Extrinsics after a camera-frame perturbation: `x' = exp(δω) x_cam + δt`.
    pub fn perturbed(&self, delta_rot: [f64; 3], delta_t: [f64; 3]) -> Camera {
        let (r, t) = perturbed_extrinsics(self, delta_rot, delta_t);
        Camera {
            rotation: r,
            translation: t,
            ..self.clone()
        }
    }

    pub fn with_extrinsics(&self, rotation: Mat3<f64>, translation: [f64; 3]) -> Camera {
        Camera {
            rotation,
            translation,
            ..self.clone()
        }
    }
}

/// Generic form of [`Camera::perturbed`] for use inside residuals.
pub fn perturbed_extrinsics<T: Real>(
    cam: &Camera,
    delta_rot: Vec3<T>,
    delta_t: Vec3<T>,
) -> (Mat3<T>, Vec3<T>) {
    let dr = geom::rodrigues(delta_rot);
    let r = geom::mat_mulf(&dr, &cam.rotation);
    let t = geom::add(geom::mat_vec(&dr, geom::lift3(cam.translation)), delta_t);
    (r, t)
}

/// Projection with generic extrinsics. Depth is clamped at [`MIN_DEPTH`] so
/// the residual stays finite; callers screen points before building problems.
pub fn project_generic<T: Real>(
    cam: &Camera,
    rotation: &Mat3<T>,
    translation: &Vec3<T>,
    p: Vec3<T>,
) -> [T; 2] {
    let c = geom::add(geom::mat_vec(rotation, p), *translation);
    let z = if c[2].value() > MIN_DEPTH {
        c[2]
    } else {
        T::cst(MIN_DEPTH)
    };
    [c[0] / z * cam.fx + cam.cx, c[1] / z * cam.fy + cam.cy]
}

/// Projection through the camera's fixed extrinsics.
pub fn project_fixed<T: Real>(cam: &Camera, p: Vec3<T>) -> [T; 2] {
    let c = geom::add(geom::matf_vec(&cam.rotation, p), geom::lift3(cam.translation));
    let z = if c[2].value() > MIN_DEPTH {
        c[2]
    } else {
        T::cst(MIN_DEPTH)
    };
    [c[0] / z * cam.fx + cam.cx, c[1] / z * cam.fy + cam.cy]
}

/// Intrinsics from a horizontal field of view; extrinsics are the identity.
pub fn intrinsics_from_fov(hfov_deg: f64, width: u32, height: u32) -> Result<Camera> {
    if !(hfov_deg > 0.0 && hfov_deg < 180.0) {
        return Err(Error::FieldOfView(hfov_deg));
    }
    let f = (width as f64 / 2.0) / (hfov_deg.to_radians() / 2.0).tan();
    Ok(Camera {
        fx: f,
        fy: f,
        cx: width as f64 / 2.0,
        cy: height as f64 / 2.0,
        width,
        height,
        rotation: geom::identity(),
        translation: [0.0; 3],
    })
}

/// World-to-camera extrinsics for a camera at `eye` looking at `target`,
/// with world +y as up.
pub fn look_at(eye: [f64; 3], target: [f64; 3]) -> (Mat3<f64>, [f64; 3]) {
    let z = geom::sub(target, eye);
    let z = geom::scale(z, 1.0 / geom::norm(z));
    let mut x = geom::cross(z, [0.0, 1.0, 0.0]);
    if geom::norm(x) < 1e-9 {
        x = geom::cross(z, [0.0, 0.0, 1.0]);
    }
    let x = geom::scale(x, 1.0 / geom::norm(x));
    let y = geom::cross(z, x);
    let r = [x, y, z];
    let t = geom::mat_vec(&r, eye);
    (r, [-t[0], -t[1], -t[2]])
}

/// `n` cameras evenly spaced in azimuth on a horizontal circle of `radius`
/// around `target`, all looking at it and sharing `intrinsics`.
pub fn camera_ring(n: usize, radius: f64, target: [f64; 3], intrinsics: &Camera) -> Vec<Camera> {
    (0..n)
        .map(|i| {
            let a = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
            let eye = [
                target[0] + radius * a.sin(),
                target[1],
                target[2] + radius * a.cos(),
            ];
            let (r, t) = look_at(eye, target);
            intrinsics.with_extrinsics(r, t)
        })
        .collect()
}
