//! Inertial frames, planar-yaw poses and similarity transforms.
//!
//! Waypoints are planned in a right-handed ENU (east-north-up) frame and
//! handed to the flight stack in right-handed NED (north-east-down). ENU yaw
//! is measured counterclockwise from +east; NED yaw clockwise from +north.

use std::f64::consts::{PI, TAU};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Three-component position in meters. The frame is carried by the enclosing type.
pub type Vec3 = Vector3<f64>;

/// Wraps an angle into `(-π, π]`.
pub fn wrap_angle(angle: f64) -> f64 {
    let r = angle.rem_euclid(TAU);
    if r > PI {
        r - TAU
    } else {
        r
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Frame {
    Enu,
    Ned,
    CameraLocal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose3 {
    pub position: Vec3,
    /// Radians in `(-π, π]`, measured in `frame`'s convention.
    pub yaw: f64,
    pub frame: Frame,
}

impl Pose3 {
    pub fn new(position: Vec3, yaw: f64, frame: Frame) -> Self {
        Self {
            position,
            yaw: wrap_angle(yaw),
            frame,
        }
    }

    pub fn enu(x: f64, y: f64, z: f64, yaw: f64) -> Self {
        Self::new(Vec3::new(x, y, z), yaw, Frame::Enu)
    }

    pub fn is_finite(&self) -> bool {
        self.position.iter().all(|c| c.is_finite()) && self.yaw.is_finite()
    }

    /// Re-expresses an ENU pose in NED. Poses already in NED are returned unchanged.
    pub fn to_ned(&self) -> Result<Pose3> {
        match self.frame {
            Frame::Ned => Ok(*self),
            Frame::Enu => Ok(Pose3::new(
                enu_to_ned(&self.position),
                yaw_enu_to_ned(self.yaw),
                Frame::Ned,
            )),
            Frame::CameraLocal => Err(Error::FrameMismatch {
                expected: Frame::Enu,
                found: Frame::CameraLocal,
            }),
        }
    }

    pub fn to_enu(&self) -> Result<Pose3> {
        match self.frame {
            Frame::Enu => Ok(*self),
            Frame::Ned => Ok(Pose3::new(
                ned_to_enu(&self.position),
                yaw_ned_to_enu(self.yaw),
                Frame::Enu,
            )),
            Frame::CameraLocal => Err(Error::FrameMismatch {
                expected: Frame::Ned,
                found: Frame::CameraLocal,
            }),
        }
    }
}

/// `(e, n, u) ↦ (n, e, -u)`.
pub fn enu_to_ned(p: &Vec3) -> Vec3 {
    Vec3::new(p.y, p.x, -p.z)
}

/// `(n, e, d) ↦ (e, n, -d)`.
pub fn ned_to_enu(p: &Vec3) -> Vec3 {
    Vec3::new(p.y, p.x, -p.z)
}

/// The linear map behind [`enu_to_ned`].
pub fn enu_to_ned_matrix() -> Matrix3<f64> {
    Matrix3::new(0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, -1.0)
}

pub fn yaw_enu_to_ned(yaw: f64) -> f64 {
    wrap_angle(PI / 2.0 - yaw)
}

pub fn yaw_ned_to_enu(yaw: f64) -> f64 {
    wrap_angle(PI / 2.0 - yaw)
}

/// Rotation about +z by `yaw` radians.
pub fn rot_z(yaw: f64) -> Matrix3<f64> {
    let (s, c) = yaw.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// `p ↦ scale · rotation · p + translation`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityTransform {
    scale: f64,
    rotation: Matrix3<f64>,
    translation: Vec3,
}

/// Orthonormality and determinant tolerance for stored rotations.
pub const ROTATION_TOL: f64 = 1e-9;

impl SimilarityTransform {
    pub fn new(scale: f64, rotation: Matrix3<f64>, translation: Vec3) -> Result<Self> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::InvalidTransform(format!(
                "scale must be positive and finite, got {scale}"
            )));
        }
        if !translation.iter().all(|c| c.is_finite()) {
            return Err(Error::InvalidTransform("non-finite translation".into()));
        }
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if !(ortho <= ROTATION_TOL) {
            return Err(Error::InvalidTransform(format!(
                "rotation is not orthonormal (max deviation {ortho:e})"
            )));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > ROTATION_TOL {
            return Err(Error::InvalidTransform(format!(
                "rotation determinant {det} is not +1"
            )));
        }
        Ok(Self {
            scale,
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.scale * (self.rotation * p) + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        let inv_scale = 1.0 / self.scale;
        Self {
            scale: inv_scale,
            rotation: rt,
            translation: -inv_scale * (rt * self.translation),
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &SimilarityTransform) -> Self {
        Self {
            scale: self.scale * other.scale,
            rotation: self.rotation * other.rotation,
            translation: self.scale * (self.rotation * other.translation) + self.translation,
        }
    }
}

pub fn apply_similarity(t: &SimilarityTransform, p: &Vec3) -> Vec3 {
    t.apply(p)
}

pub fn invert_similarity(t: &SimilarityTransform) -> SimilarityTransform {
    t.inverse()
}
