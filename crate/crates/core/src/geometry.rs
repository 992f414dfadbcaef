//! Geometric primitives shared by every stage of the pipeline.
//!
//! Rotations are kept as plain 3×3 matrices so that the on-disk formats can
//! store them without conversion. Point and vector transforms are spelled out
//! component by component, which pins the floating-point evaluation order and
//! keeps results bit-identical between the engine and its test oracles.

use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::{Matrix3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// Tolerance used when validating orthonormality and unit lengths.
pub const UNIT_TOL: f64 = 1e-9;

/// Rigid transform `p ↦ R·p + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vec3) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(translation: Vec3) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    /// Rotation about +z by `yaw` radians, then translation.
    pub fn from_yaw(yaw: f64, translation: Vec3) -> Self {
        Self::from_rpy(0.0, 0.0, yaw, translation)
    }

    /// Builds a pose from roll/pitch/yaw (applied as `Rz(yaw)·Ry(pitch)·Rx(roll)`).
    pub fn from_rpy(roll: f64, pitch: f64, yaw: f64, translation: Vec3) -> Self {
        let rotation = *Rotation3::from_euler_angles(roll, pitch, yaw).matrix();
        Self {
            rotation,
            translation,
        }
    }

    /// Returns `(roll, pitch, yaw)` for this pose's rotation.
    pub fn rpy(&self) -> (f64, f64, f64) {
        Rotation3::from_matrix_unchecked(self.rotation).euler_angles()
    }

    /// Heading of the rotated +x axis in the xy-plane.
    pub fn yaw(&self) -> f64 {
        self.rotation[(1, 0)].atan2(self.rotation[(0, 0)])
    }

    /// `R·p + t`.
    #[inline]
    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotate(p) + self.translation
    }

    /// `R·v`.
    #[inline]
    pub fn rotate(&self, v: &Vec3) -> Vec3 {
        let r = &self.rotation;
        Vec3::new(
            r[(0, 0)] * v.x + r[(0, 1)] * v.y + r[(0, 2)] * v.z,
            r[(1, 0)] * v.x + r[(1, 1)] * v.y + r[(1, 2)] * v.z,
            r[(2, 0)] * v.x + r[(2, 1)] * v.y + r[(2, 2)] * v.z,
        )
    }

    /// `Rᵀ·v`.
    #[inline]
    pub fn inverse_rotate(&self, v: &Vec3) -> Vec3 {
        let r = &self.rotation;
        Vec3::new(
            r[(0, 0)] * v.x + r[(1, 0)] * v.y + r[(2, 0)] * v.z,
            r[(0, 1)] * v.x + r[(1, 1)] * v.y + r[(2, 1)] * v.z,
            r[(0, 2)] * v.x + r[(1, 2)] * v.y + r[(2, 2)] * v.z,
        )
    }

    /// `Rᵀ·(p − t)`.
    #[inline]
    pub fn inverse_transform_point(&self, p: &Vec3) -> Vec3 {
        self.inverse_rotate(&(p - self.translation))
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.transform_point(&other.translation),
        }
    }

    /// Rotation angle of `R` in radians, in `[0, π]`.
    pub fn rotation_angle(&self) -> f64 {
        let c = ((self.rotation.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
        c.acos()
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        if !r.iter().all(|v| v.is_finite()) || !self.translation.iter().all(|v| v.is_finite()) {
            return Err(Error::input("pose has non-finite components"));
        }
        let err = (r.transpose() * r - Matrix3::identity()).amax();
        if err > UNIT_TOL {
            return Err(Error::input(format!(
                "pose rotation is not orthonormal (max |RᵀR − I| = {err:e})"
            )));
        }
        if (r.determinant() - 1.0).abs() > UNIT_TOL {
            return Err(Error::input("pose rotation has det ≠ +1"));
        }
        Ok(())
    }

    /// Row-major rotation followed by translation.
    pub fn to_array(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t.x,
            t.y,
            t.z,
        ]
    }

    pub fn from_array(a: &[f64; 12]) -> Pose {
        Pose {
            rotation: Matrix3::new(a[0], a[1], a[2], a[3], a[4], a[5], a[6], a[7], a[8]),
            translation: Vec3::new(a[9], a[10], a[11]),
        }
    }
}

/// Semantic class of a point or surfel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SemanticClass {
    Background,
    Road,
    Vehicle,
}

impl SemanticClass {
    /// Integer code used in feature grids and binary files (0 is reserved for "empty").
    pub fn code(self) -> u8 {
        match self {
            SemanticClass::Background => 1,
            SemanticClass::Road => 2,
            SemanticClass::Vehicle => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(SemanticClass::Background),
            2 => Some(SemanticClass::Road),
            3 => Some(SemanticClass::Vehicle),
            _ => None,
        }
    }
}

/// Oriented disk with the metadata recorded when it was reconstructed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Surfel {
    pub center: Vec3,
    pub normal: Vec3,
    pub radius: f64,
    pub orig_intensity: f64,
    pub orig_range: f64,
    pub orig_incidence: f64,
    pub semantic_class: SemanticClass,
}

impl Surfel {
    pub fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0) {
            return Err(Error::input("surfel radius must be positive"));
        }
        if (self.normal.norm() - 1.0).abs() > UNIT_TOL {
            return Err(Error::input("surfel normal is not unit length"));
        }
        if !(self.orig_range >= 0.0) {
            return Err(Error::input("surfel orig_range must be non-negative"));
        }
        if !(0.0..=FRAC_PI_2).contains(&self.orig_incidence) {
            return Err(Error::input("surfel orig_incidence outside [0, π/2]"));
        }
        Ok(())
    }

    /// Same disk with geometry moved by `pose`; metadata is unchanged.
    pub fn transformed(&self, pose: &Pose) -> Surfel {
        Surfel {
            center: pose.transform_point(&self.center),
            normal: pose.rotate(&self.normal),
            ..*self
        }
    }
}

/// One LiDAR ray of a sweep.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    /// Seconds since the start of the sweep.
    pub time_offset: f64,
    pub laser_row: u16,
    pub azimuth_col: u16,
}

impl Ray {
    pub fn new(origin: Vec3, direction: Vec3) -> Self {
        Self {
            origin,
            direction,
            time_offset: 0.0,
            laser_row: 0,
            azimuth_col: 0,
        }
    }

    #[inline]
    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }
}

/// Closest intersection of a ray with a surfel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub range: f64,
    pub point: Vec3,
    pub surfel_index: usize,
    pub incidence: f64,
}

/// Angle between a ray direction and a surface normal, ignoring the normal's sign.
#[inline]
pub fn incidence_angle(direction: &Vec3, normal: &Vec3) -> f64 {
    direction.dot(normal).abs().min(1.0).acos()
}

/// Intersects `ray` with the disk `surfel`.
///
/// The ray hits the disk's plane at `t = ((c − o)·n)/(d·n)`; the hit counts if
/// `t > t_min` and the plane point lies within `radius` of the center. Normals
/// are unoriented, so the test is symmetric under `n → −n`.
#[inline]
pub fn ray_disk_intersect(ray: &Ray, surfel: &Surfel, t_min: f64) -> Option<Hit> {
    intersect_disk_index(ray, surfel, t_min, 0)
}

#[inline]
pub(crate) fn intersect_disk_index(
    ray: &Ray,
    surfel: &Surfel,
    t_min: f64,
    index: usize,
) -> Option<Hit> {
    let n = &surfel.normal;
    let d = &ray.direction;
    let denom = d.x * n.x + d.y * n.y + d.z * n.z;
    if denom.abs() < 1e-9 {
        return None;
    }
    let oc = surfel.center - ray.origin;
    let t = (oc.x * n.x + oc.y * n.y + oc.z * n.z) / denom;
    if !(t > t_min) {
        return None;
    }
    let point = ray.at(t);
    let off = point - surfel.center;
    if off.x * off.x + off.y * off.y + off.z * off.z > surfel.radius * surfel.radius {
        return None;
    }
    Some(Hit {
        range: t,
        point,
        surfel_index: index,
        incidence: denom.abs().min(1.0).acos(),
    })
}

/// Wraps an angle into `[−π, π)`.
pub fn wrap_angle(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w >= PI {
        w - 2.0 * PI
    } else {
        w
    }
}

/// Axis-aligned bounding box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn empty() -> Self {
        Self {
            min: Vec3::repeat(f64::INFINITY),
            max: Vec3::repeat(f64::NEG_INFINITY),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.min.x > self.max.x
    }

    pub fn grow_point(&mut self, p: &Vec3) {
        self.min = self.min.inf(p);
        self.max = self.max.sup(p);
    }

    pub fn grow(&mut self, other: &Aabb) {
        self.min = self.min.inf(&other.min);
        self.max = self.max.sup(&other.max);
    }

    pub fn from_points<'a>(points: impl IntoIterator<Item = &'a Vec3>) -> Self {
        let mut b = Self::empty();
        for p in points {
            b.grow_point(p);
        }
        b
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }

    pub fn extent(&self) -> Vec3 {
        self.max - self.min
    }
}
