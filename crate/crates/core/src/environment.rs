//! Compliant surfaces and spherical end-tool contact.
//!
//! The tool is a sphere of radius `r_R` whose center sits `r_off` along the
//! end-effector z axis. At alignment the end-effector z axis coincides
//! with the outward surface normal, so the wrist lies between the sphere
//! center and the contact point.

use serde::{Deserialize, Serialize};

use crate::spatial::{axis_angle_rotation, Mat3, Vec3, Vec6};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Frame {
    Base,
    EndEffector,
}

/// Force and torque (about the end-effector origin) in a named frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Wrench {
    pub force: Vec3,
    pub torque: Vec3,
    pub frame: Frame,
}

impl Wrench {
    pub fn zero(frame: Frame) -> Self {
        Self { force: Vec3::zeros(), torque: Vec3::zeros(), frame }
    }

    pub fn to_vec6(&self) -> Vec6 {
        Vec6::new(
            self.force.x, self.force.y, self.force.z, self.torque.x, self.torque.y, self.torque.z,
        )
    }

    pub fn from_vec6(v: &Vec6, frame: Frame) -> Self {
        Self { force: Vec3::new(v[0], v[1], v[2]), torque: Vec3::new(v[3], v[4], v[5]), frame }
    }

    /// Re-expresses the wrench given the end-effector orientation `r`.
    pub fn expressed_in(&self, frame: Frame, r: &Mat3) -> Self {
        let (force, torque) = match (self.frame, frame) {
            (Frame::EndEffector, Frame::Base) => (r * self.force, r * self.torque),
            (Frame::Base, Frame::EndEffector) => (r.transpose() * self.force, r.transpose() * self.torque),
            _ => (self.force, self.torque),
        };
        Self { force, torque, frame }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SurfaceShape {
    /// Plane through the object origin, normal along the object z axis.
    Plane,
    /// Sphere centered at the object origin.
    Sphere { radius: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurfaceModel {
    pub shape: SurfaceShape,
    /// Object frame origin in the base frame (m).
    pub position: [f64; 3],
    /// Object frame roll/pitch/yaw in the base frame (rad).
    #[serde(default)]
    pub rpy: [f64; 3],
    /// Neutral offset of the undeformed surface along the outward normal (m).
    #[serde(default)]
    pub z_n: f64,
}

impl SurfaceModel {
    pub fn plane(position: [f64; 3]) -> Self {
        Self { shape: SurfaceShape::Plane, position, rpy: [0.0; 3], z_n: 0.0 }
    }

    pub fn sphere(center: [f64; 3], radius: f64) -> Self {
        Self { shape: SurfaceShape::Sphere { radius }, position: center, rpy: [0.0; 3], z_n: 0.0 }
    }

    pub fn rotation(&self) -> Mat3 {
        axis_angle_rotation(&Vec3::z(), self.rpy[2])
            * axis_angle_rotation(&Vec3::y(), self.rpy[1])
            * axis_angle_rotation(&Vec3::x(), self.rpy[0])
    }

    pub fn origin(&self) -> Vec3 {
        Vec3::new(self.position[0], self.position[1], self.position[2])
    }

    /// Outward normal and signed clearance of a point from the undeformed surface.
    pub fn normal_and_distance(&self, point: &Vec3) -> (Vec3, f64) {
        match self.shape {
            SurfaceShape::Plane => {
                let n = self.rotation().column(2).into_owned();
                (n, n.dot(&(point - self.origin())) - self.z_n)
            }
            SurfaceShape::Sphere { radius } => {
                let d = point - self.origin();
                let dist = d.norm();
                let n = if dist > 0.0 { d / dist } else { self.rotation().column(2).into_owned() };
                (n, dist - radius - self.z_n)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DampingPoint {
    /// Damp the tangential wrist velocity.
    #[default]
    Wrist,
    /// Damp the tangential velocity of the contact point, `v + ω × r`.
    ContactPoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvParams {
    /// Normal stiffness (N/m).
    pub k_e: f64,
    /// Tangential damping (N·s/m); zero for a frictionless surface.
    pub b_e: f64,
    #[serde(default)]
    pub damping_point: DampingPoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndToolGeometry {
    /// Wrist to sphere-center distance along the end-effector z axis (m).
    pub r_off: f64,
    /// Tool sphere radius (m).
    pub r_r: f64,
}

impl EndToolGeometry {
    /// Lever from the wrist to the contact point at alignment, end-effector frame.
    pub fn aligned_lever(&self) -> Vec3 {
        Vec3::new(0.0, 0.0, -(self.r_r - self.r_off))
    }

    pub fn is_valid(&self) -> bool {
        self.r_r > self.r_off && self.r_off >= 0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContactState {
    pub in_contact: bool,
    pub penetration: f64,
    /// Deepest point of the tool sphere along the normal, base frame.
    pub contact_point: Vec3,
    /// Outward surface normal at the contact, base frame.
    pub normal: Vec3,
    /// Wrist-to-contact lever, end-effector frame.
    pub lever: Vec3,
    /// Rotation taking local surface-frame vectors to the end-effector frame.
    pub r_oe: Mat3,
}

/// Rotation whose z column is `n`, obtained by the smallest turn from `base`.
fn frame_with_normal(base: &Mat3, n: &Vec3) -> Mat3 {
    let z = base.column(2).into_owned();
    let axis = z.cross(n);
    let s = axis.norm();
    let c = z.dot(n);
    if s < 1e-12 {
        if c > 0.0 {
            return *base;
        }
        return base * axis_angle_rotation(&Vec3::x(), std::f64::consts::PI);
    }
    axis_angle_rotation(&(axis / s), s.atan2(c)) * base
}

/// Closest-point contact between the tool sphere and the surface.
pub fn contact_state(surface: &SurfaceModel, tool: &EndToolGeometry, ee_rot: &Mat3, ee_pos: &Vec3) -> ContactState {
    let z_e = ee_rot.column(2).into_owned();
    let center = ee_pos + tool.r_off * z_e;
    let (normal, clearance) = surface.normal_and_distance(&center);
    let overlap = tool.r_r - clearance;
    let contact_point = center - tool.r_r * normal;
    let r_o = frame_with_normal(&surface.rotation(), &normal);
    ContactState {
        in_contact: overlap > 0.0,
        penetration: overlap.max(0.0),
        contact_point,
        normal,
        lever: ee_rot.transpose() * (contact_point - ee_pos),
        r_oe: ee_rot.transpose() * r_o,
    }
}

/// Wrench the surface applies to the end-effector, end-effector frame.
///
/// `v` and `omega` are the base-frame linear and angular velocities of the
/// end-effector origin.
pub fn environment_wrench(
    contact: &ContactState,
    env: &EnvParams,
    ee_rot: &Mat3,
    v: &Vec3,
    omega: &Vec3,
) -> Wrench {
    if !contact.in_contact {
        return Wrench::zero(Frame::EndEffector);
    }
    let n = contact.normal;
    let mut f = env.k_e * contact.penetration * n;
    if env.b_e > 0.0 {
        let vel = match env.damping_point {
            DampingPoint::Wrist => *v,
            DampingPoint::ContactPoint => v + omega.cross(&(ee_rot * contact.lever)),
        };
        let tangential = vel - n * n.dot(&vel);
        f -= env.b_e * tangential;
    }
    let force = ee_rot.transpose() * f;
    Wrench { force, torque: contact.lever.cross(&force), frame: Frame::EndEffector }
}
