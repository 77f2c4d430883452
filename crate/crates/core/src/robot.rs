//! Serial-chain kinematics and rigid-body dynamics.
//!
//! All kinematic quantities are computed in the base frame. The
//! end-effector twist is `[v_b; ω_b]`, the linear velocity of the
//! end-effector frame origin (the wrist sensor center) followed by the
//! angular velocity, both in base coordinates.
//!
//! Two independent routes produce the velocity-product torques: the
//! Christoffel matrix `C(q, q̇)` built from analytic `∂M/∂q`, and a
//! recursive Newton–Euler pass. They are cross-checked by the model oracles.

use nalgebra::{DMatrix, DVector, Vector6};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::spatial::{axis_angle_rotation, block_rotation, pseudoinverse, skew, Mat3, MathError, MatMN, Vec3};

pub type VecN = DVector<f64>;
pub type MatNN = DMatrix<f64>;

/// Largest tolerated `cond(M)` before forward dynamics refuses to solve.
pub const MAX_INERTIA_CONDITION: f64 = 1e10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("inertia matrix is ill-conditioned (cond ≈ {0:e})")]
    IllConditionedInertia(f64),
    #[error(transparent)]
    Math(#[from] MathError),
}

/// One revolute joint and the rigid link it drives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointSpec {
    /// Joint axis in the joint frame (unit).
    pub axis: [f64; 3],
    /// Joint origin relative to the previous link frame (m).
    pub origin: [f64; 3],
    /// Fixed roll/pitch/yaw (rad) of the joint frame relative to the previous link.
    #[serde(default)]
    pub origin_rpy: [f64; 3],
    /// Link mass (kg).
    pub mass: f64,
    /// Link center of mass in the link frame (m).
    pub com: [f64; 3],
    /// Rotational inertia about the center of mass, link frame, row-major (kg·m²).
    pub inertia: [[f64; 3]; 3],
    /// Joint position limits (rad).
    #[serde(default = "default_limits")]
    pub limits: [f64; 2],
}

fn default_limits() -> [f64; 2] {
    [-2.9, 2.9]
}

fn default_gravity() -> [f64; 3] {
    [0.0, 0.0, -9.81]
}

/// Serial chain of revolute joints ending in a fixed tool (end-effector) frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KinematicChain {
    pub joints: Vec<JointSpec>,
    /// End-effector frame origin relative to the last link frame (m).
    pub tool_origin: [f64; 3],
    /// End-effector frame roll/pitch/yaw relative to the last link frame (rad).
    pub tool_rpy: [f64; 3],
    #[serde(default = "default_gravity")]
    pub gravity: [f64; 3],
}

fn rpy_matrix(rpy: &[f64; 3]) -> Mat3 {
    axis_angle_rotation(&Vec3::z(), rpy[2])
        * axis_angle_rotation(&Vec3::y(), rpy[1])
        * axis_angle_rotation(&Vec3::x(), rpy[0])
}

fn to_vec3(a: &[f64; 3]) -> Vec3 {
    Vec3::new(a[0], a[1], a[2])
}

fn to_mat3(a: &[[f64; 3]; 3]) -> Mat3 {
    Mat3::new(
        a[0][0], a[0][1], a[0][2], a[1][0], a[1][1], a[1][2], a[2][0], a[2][1], a[2][2],
    )
}

/// Principal inertia of a solid cylinder about its center, axis along local z.
pub fn solid_cylinder_inertia(mass: f64, radius: f64, length: f64) -> [[f64; 3]; 3] {
    let lateral = mass * (3.0 * radius * radius + length * length) / 12.0;
    let axial = 0.5 * mass * radius * radius;
    [[lateral, 0.0, 0.0], [0.0, lateral, 0.0], [0.0, 0.0, axial]]
}

impl KinematicChain {
    /// The documented 7-DOF arm: alternating z/y joint axes, shoulder
    /// height 0.27 m, upper arm 0.36 m, forearm 0.37 m, wrist-to-flange
    /// 0.23 m, link masses 5/4/3/2.5/2/1.5/1 kg with solid-cylinder
    /// inertias. The end-effector frame is the flange frame turned half a
    /// turn about x, so its z axis points back out of the tool.
    ///
    /// At `q = 0` the arm stands straight up: the end-effector sits at
    /// `(0, 0, 1.23)` with orientation `Rx(π)`.
    pub fn default_arm() -> Self {
        // (axis, offset to this joint along parent z, mass, link length, radius)
        let layout: [([f64; 3], f64, f64, f64, f64); 7] = [
            ([0.0, 0.0, 1.0], 0.0, 5.0, 0.27, 0.06),
            ([0.0, 1.0, 0.0], 0.27, 4.0, 0.18, 0.055),
            ([0.0, 0.0, 1.0], 0.18, 3.0, 0.18, 0.05),
            ([0.0, 1.0, 0.0], 0.18, 2.5, 0.185, 0.045),
            ([0.0, 0.0, 1.0], 0.185, 2.0, 0.185, 0.04),
            ([0.0, 1.0, 0.0], 0.185, 1.5, 0.115, 0.035),
            ([0.0, 0.0, 1.0], 0.115, 1.0, 0.115, 0.03),
        ];
        let joints = layout
            .iter()
            .map(|&(axis, offset, mass, length, radius)| JointSpec {
                axis,
                origin: [0.0, 0.0, offset],
                origin_rpy: [0.0; 3],
                mass,
                com: [0.0, 0.0, 0.5 * length],
                inertia: solid_cylinder_inertia(mass, radius, length),
                limits: default_limits(),
            })
            .collect();
        Self {
            joints,
            tool_origin: [0.0, 0.0, 0.115],
            tool_rpy: [std::f64::consts::PI, 0.0, 0.0],
            gravity: default_gravity(),
        }
    }

    pub fn dof(&self) -> usize {
        self.joints.len()
    }

    pub fn gravity_vec(&self) -> Vec3 {
        to_vec3(&self.gravity)
    }

    pub fn within_limits(&self, q: &VecN) -> bool {
        self.joints
            .iter()
            .zip(q.iter())
            .all(|(j, &qi)| qi >= j.limits[0] && qi <= j.limits[1])
    }

    /// Structural checks: unit axes, positive masses, symmetric positive
    /// definite link inertias. Returns a description of each violation.
    pub fn validate(&self) -> Vec<String> {
        let mut issues = Vec::new();
        for (i, j) in self.joints.iter().enumerate() {
            let n = to_vec3(&j.axis).norm();
            if (n - 1.0).abs() > 1e-6 {
                issues.push(format!("joint {i}: axis norm {n}"));
            }
            if !(j.mass > 0.0) {
                issues.push(format!("joint {i}: mass {} not positive", j.mass));
            }
            let inertia = to_mat3(&j.inertia);
            if (inertia - inertia.transpose()).norm() > 1e-12 {
                issues.push(format!("joint {i}: link inertia is not symmetric"));
            } else if inertia.symmetric_eigenvalues().min() <= 0.0 {
                issues.push(format!("joint {i}: link inertia is not positive definite"));
            }
        }
        issues
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointState {
    pub q: VecN,
    pub qdot: VecN,
}

impl JointState {
    pub fn rest(q: VecN) -> Self {
        let n = q.len();
        Self { q, qdot: VecN::zeros(n) }
    }
}

/// Base-frame geometry of every joint and link at one configuration.
#[derive(Debug, Clone)]
pub struct Frames {
    pub joint_pos: Vec<Vec3>,
    pub joint_axis: Vec<Vec3>,
    pub link_rot: Vec<Mat3>,
    pub com: Vec<Vec3>,
    pub inertia: Vec<Mat3>,
    pub ee_rot: Mat3,
    pub ee_pos: Vec3,
}

pub fn frames(chain: &KinematicChain, q: &VecN) -> Frames {
    let n = chain.dof();
    let mut rot = Mat3::identity();
    let mut pos = Vec3::zeros();
    let mut out = Frames {
        joint_pos: Vec::with_capacity(n),
        joint_axis: Vec::with_capacity(n),
        link_rot: Vec::with_capacity(n),
        com: Vec::with_capacity(n),
        inertia: Vec::with_capacity(n),
        ee_rot: Mat3::identity(),
        ee_pos: Vec3::zeros(),
    };
    for (j, &qi) in chain.joints.iter().zip(q.iter()) {
        pos += rot * to_vec3(&j.origin);
        rot *= rpy_matrix(&j.origin_rpy);
        let axis_local = to_vec3(&j.axis);
        out.joint_pos.push(pos);
        out.joint_axis.push(rot * axis_local);
        rot *= axis_angle_rotation(&axis_local, qi);
        out.link_rot.push(rot);
        out.com.push(pos + rot * to_vec3(&j.com));
        out.inertia.push(rot * to_mat3(&j.inertia) * rot.transpose());
    }
    out.ee_pos = pos + rot * to_vec3(&chain.tool_origin);
    out.ee_rot = rot * rpy_matrix(&chain.tool_rpy);
    out
}

/// End-effector orientation and position in the base frame.
pub fn forward_kinematics(chain: &KinematicChain, q: &VecN) -> (Mat3, Vec3) {
    let f = frames(chain, q);
    (f.ee_rot, f.ee_pos)
}

fn point_jacobian(f: &Frames, point: &Vec3, upto: usize, n: usize) -> MatMN {
    let mut jac = MatMN::zeros(6, n);
    for j in 0..=upto {
        let z = f.joint_axis[j];
        let v = z.cross(&(point - f.joint_pos[j]));
        jac.fixed_view_mut::<3, 1>(0, j).copy_from(&v);
        jac.fixed_view_mut::<3, 1>(3, j).copy_from(&z);
    }
    jac
}

/// Geometric Jacobian mapping `q̇` to the base-frame twist `[v_b; ω_b]`.
pub fn jacobian(chain: &KinematicChain, q: &VecN) -> MatMN {
    let f = frames(chain, q);
    jacobian_from_frames(&f)
}

pub fn jacobian_from_frames(f: &Frames) -> MatMN {
    let n = f.joint_axis.len();
    point_jacobian(f, &f.ee_pos, n - 1, n)
}

/// Column `j` of `∂J_point/∂q_k` for a point rigidly attached to link `upto`.
fn point_jacobian_partial(f: &Frames, point: &Vec3, upto: usize, k: usize, n: usize) -> MatMN {
    let mut d = MatMN::zeros(6, n);
    if k > upto {
        return d;
    }
    let zk = f.joint_axis[k];
    for j in 0..=upto {
        let zj = f.joint_axis[j];
        let (dv, dw) = if k < j {
            let col = zj.cross(&(point - f.joint_pos[j]));
            (zk.cross(&col), zk.cross(&zj))
        } else {
            (zj.cross(&zk.cross(&(point - f.joint_pos[k]))), Vec3::zeros())
        };
        d.fixed_view_mut::<3, 1>(0, j).copy_from(&dv);
        d.fixed_view_mut::<3, 1>(3, j).copy_from(&dw);
    }
    d
}

/// Time derivative of the end-effector Jacobian along `q̇`.
pub fn jacobian_dot(chain: &KinematicChain, q: &VecN, qdot: &VecN) -> MatMN {
    let f = frames(chain, q);
    jacobian_dot_from_frames(&f, qdot)
}

pub fn jacobian_dot_from_frames(f: &Frames, qdot: &VecN) -> MatMN {
    let n = f.joint_axis.len();
    let mut jd = MatMN::zeros(6, n);
    for k in 0..n {
        if qdot[k] != 0.0 {
            jd += point_jacobian_partial(f, &f.ee_pos, n - 1, k, n) * qdot[k];
        }
    }
    jd
}

fn link_jacobians(f: &Frames, n: usize) -> Vec<MatMN> {
    (0..n).map(|i| point_jacobian(f, &f.com[i], i, n)).collect()
}

pub fn mass_matrix_from_frames(chain: &KinematicChain, f: &Frames) -> MatNN {
    let n = chain.dof();
    let mut m = MatNN::zeros(n, n);
    for (i, ji) in link_jacobians(f, n).iter().enumerate() {
        let jv = ji.rows(0, 3);
        let jw = ji.rows(3, 3);
        m += chain.joints[i].mass * jv.transpose() * jv;
        m += jw.transpose() * f.inertia[i] * jw;
    }
    m
}

pub fn mass_matrix(chain: &KinematicChain, q: &VecN) -> MatNN {
    mass_matrix_from_frames(chain, &frames(chain, q))
}

/// Analytic `∂M/∂q_k` for every `k`.
pub fn mass_matrix_partials(chain: &KinematicChain, f: &Frames) -> Vec<MatNN> {
    let n = chain.dof();
    let jacs = link_jacobians(f, n);
    (0..n)
        .map(|k| {
            let mut dm = MatNN::zeros(n, n);
            let zk = skew(&f.joint_axis[k]);
            for i in k..n {
                let ji = &jacs[i];
                let di = point_jacobian_partial(f, &f.com[i], i, k, n);
                let (jv, jw) = (ji.rows(0, 3), ji.rows(3, 3));
                let (dv, dw) = (di.rows(0, 3), di.rows(3, 3));
                let mass = chain.joints[i].mass;
                let inertia = f.inertia[i];
                let dinertia = zk * inertia - inertia * zk;
                let lin = dv.transpose() * jv;
                dm += mass * (&lin + lin.transpose());
                dm += dw.transpose() * inertia * jw;
                dm += jw.transpose() * dinertia * jw;
                dm += jw.transpose() * inertia * dw;
            }
            dm
        })
        .collect()
}

/// Christoffel-symbol Coriolis/centrifugal matrix from `∂M/∂q`.
pub fn coriolis_matrix(partials: &[MatNN], qdot: &VecN) -> MatNN {
    let n = qdot.len();
    let mut c = MatNN::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            for k in 0..n {
                acc += (partials[k][(i, j)] + partials[j][(i, k)] - partials[i][(j, k)]) * qdot[k];
            }
            c[(i, j)] = 0.5 * acc;
        }
    }
    c
}

/// Gravity torque `G = ∂PE/∂q`, from link Jacobians.
pub fn gravity_torque_from_frames(chain: &KinematicChain, f: &Frames) -> VecN {
    let n = chain.dof();
    let g = chain.gravity_vec();
    let mut out = VecN::zeros(n);
    for (i, ji) in link_jacobians(f, n).iter().enumerate() {
        let jv = ji.rows(0, 3);
        out -= chain.joints[i].mass * jv.transpose() * g;
    }
    out
}

/// Recursive Newton–Euler inverse dynamics in the base frame.
pub fn rnea(chain: &KinematicChain, f: &Frames, qdot: &VecN, qddot: &VecN, with_gravity: bool) -> VecN {
    let n = chain.dof();
    let mut omega = Vec3::zeros();
    let mut omega_dot = Vec3::zeros();
    let mut acc = if with_gravity { -chain.gravity_vec() } else { Vec3::zeros() };
    let mut prev_pos = f.joint_pos[0];
    let mut forces = Vec::with_capacity(n);
    let mut moments = Vec::with_capacity(n);
    for i in 0..n {
        let z = f.joint_axis[i];
        let d = f.joint_pos[i] - prev_pos;
        acc += omega_dot.cross(&d) + omega.cross(&omega.cross(&d));
        let omega_next = omega + z * qdot[i];
        omega_dot += z * qddot[i] + omega.cross(&(z * qdot[i]));
        omega = omega_next;
        let rc = f.com[i] - f.joint_pos[i];
        let acc_com = acc + omega_dot.cross(&rc) + omega.cross(&omega.cross(&rc));
        let inertia = f.inertia[i];
        forces.push(chain.joints[i].mass * acc_com);
        moments.push(inertia * omega_dot + omega.cross(&(inertia * omega)));
        prev_pos = f.joint_pos[i];
    }
    let mut tau = VecN::zeros(n);
    let mut f_next = Vec3::zeros();
    let mut n_next = Vec3::zeros();
    for i in (0..n).rev() {
        let rc = f.com[i] - f.joint_pos[i];
        let r_next = if i + 1 < n { f.joint_pos[i + 1] - f.joint_pos[i] } else { Vec3::zeros() };
        let fi = forces[i] + f_next;
        let ni = moments[i] + rc.cross(&forces[i]) + n_next + r_next.cross(&f_next);
        tau[i] = f.joint_axis[i].dot(&ni);
        f_next = fi;
        n_next = ni;
    }
    tau
}

/// `M`, Christoffel `C`, `G`, and the Newton–Euler velocity-product torque.
#[derive(Debug, Clone)]
pub struct DynamicsTerms {
    pub m: MatNN,
    pub c: MatNN,
    pub g: VecN,
    /// `C(q, q̇) q̇` evaluated by the Newton–Euler recursion.
    pub coriolis: VecN,
}

pub fn dynamics_terms(chain: &KinematicChain, state: &JointState) -> DynamicsTerms {
    let f = frames(chain, &state.q);
    dynamics_terms_from_frames(chain, &f, &state.qdot)
}

pub fn dynamics_terms_from_frames(chain: &KinematicChain, f: &Frames, qdot: &VecN) -> DynamicsTerms {
    let n = chain.dof();
    let partials = mass_matrix_partials(chain, f);
    DynamicsTerms {
        m: mass_matrix_from_frames(chain, f),
        c: coriolis_matrix(&partials, qdot),
        g: gravity_torque_from_frames(chain, f),
        coriolis: rnea(chain, f, qdot, &VecN::zeros(n), false),
    }
}

pub fn kinetic_energy(m: &MatNN, qdot: &VecN) -> f64 {
    0.5 * qdot.dot(&(m * qdot))
}

pub fn potential_energy(chain: &KinematicChain, q: &VecN) -> f64 {
    let f = frames(chain, q);
    let g = chain.gravity_vec();
    chain
        .joints
        .iter()
        .zip(f.com.iter())
        .map(|(j, c)| -j.mass * g.dot(c))
        .sum()
}

/// Per-joint Coulomb/static/viscous/Stribeck coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrictionParams {
    pub fc: Vec<f64>,
    pub fs: Vec<f64>,
    pub fv: Vec<f64>,
    pub vs: Vec<f64>,
}

impl FrictionParams {
    /// Seven-joint values used by the frictional scenarios.
    pub fn table() -> Self {
        Self {
            fc: vec![0.07, 0.07, 0.07, 0.07, 0.014, 0.014, 0.0035],
            fs: vec![0.14, 0.14, 0.14, 0.14, 0.028, 0.028, 0.007],
            fv: vec![0.13, 0.13, 0.13, 0.13, 0.026, 0.026, 0.013],
            vs: vec![0.01, 0.01, 0.01, 0.01, 0.01, 0.005, 0.005],
        }
    }

    pub fn is_valid(&self, n: usize) -> bool {
        [&self.fc, &self.fs, &self.fv, &self.vs]
            .iter()
            .all(|v| v.len() == n && v.iter().all(|&x| x >= 0.0))
            && self.vs.iter().all(|&x| x > 0.0)
    }
}

fn sgn(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Stribeck joint friction, opposing velocity, with `sgn(0) = 0`.
pub fn joint_friction(fp: &FrictionParams, qdot: &VecN) -> VecN {
    VecN::from_iterator(
        qdot.len(),
        qdot.iter().enumerate().map(|(i, &v)| {
            let stribeck = (-v * v / fp.vs[i]).exp();
            let s = sgn(v);
            fp.fc[i] * s * (1.0 - stribeck) + fp.fs[i] * s * stribeck + fp.fv[i] * v
        }),
    )
}

/// Cheap lower bound on `cond(M)` from the Cholesky factor.
fn cholesky_condition(l: &MatNN) -> f64 {
    let d = l.diagonal();
    let max = d.iter().cloned().fold(f64::MIN, f64::max);
    let min = d.iter().cloned().fold(f64::MAX, f64::min);
    (max / min).powi(2)
}

/// Solves `M q̈ = τ + Jᵀ F − C q̇ − G − τ_f` for `q̈`.
///
/// `wrench_base` is the environment wrench on the end-effector, expressed
/// in the base frame about the end-effector origin.
pub fn forward_dynamics(
    chain: &KinematicChain,
    friction: Option<&FrictionParams>,
    state: &JointState,
    tau: &VecN,
    wrench_base: &Vector6<f64>,
) -> Result<VecN, DynamicsError> {
    let f = frames(chain, &state.q);
    forward_dynamics_from_frames(chain, &f, friction, &state.qdot, tau, wrench_base)
}

pub fn forward_dynamics_from_frames(
    chain: &KinematicChain,
    f: &Frames,
    friction: Option<&FrictionParams>,
    qdot: &VecN,
    tau: &VecN,
    wrench_base: &Vector6<f64>,
) -> Result<VecN, DynamicsError> {
    let n = chain.dof();
    let m = mass_matrix_from_frames(chain, f);
    let bias = rnea(chain, f, qdot, &VecN::zeros(n), true);
    let jac = jacobian_from_frames(f);
    let mut rhs = tau + jac.transpose() * wrench_base - bias;
    if let Some(fp) = friction {
        rhs -= joint_friction(fp, qdot);
    }
    let chol = m
        .cholesky()
        .ok_or(DynamicsError::IllConditionedInertia(f64::INFINITY))?;
    let cond = cholesky_condition(&chol.l());
    if cond > MAX_INERTIA_CONDITION {
        return Err(DynamicsError::IllConditionedInertia(cond));
    }
    Ok(chol.solve(&rhs))
}

/// Systematic model errors available to the controller's estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelErrors {
    /// Fractional gravity-compensation deficit (`Ĝ = (1 − f) G`).
    pub gravity_fraction: f64,
    /// Fractional inertia error on the listed joints.
    pub inertia_fraction: f64,
    /// Zero-based joint indices whose inertia is misestimated.
    pub inertia_joints: Vec<usize>,
}

impl Default for ModelErrors {
    fn default() -> Self {
        Self { gravity_fraction: 0.0, inertia_fraction: 0.0, inertia_joints: Vec::new() }
    }
}

impl ModelErrors {
    fn scaling(&self, n: usize) -> VecN {
        let mut s = VecN::from_element(n, 1.0);
        for &j in &self.inertia_joints {
            if j < n {
                s[j] = (1.0 + self.inertia_fraction).sqrt();
            }
        }
        s
    }

    /// Estimated `(M̂, Ĉ, Ĝ)`: `M̂ = S M S` with `S` scaling the affected
    /// joints by `√(1 + f)` (their diagonal inertias become `(1 + f)·M_ii`).
    pub fn estimate(&self, terms: &DynamicsTerms) -> (MatNN, MatNN, VecN) {
        let n = terms.g.len();
        let s = self.scaling(n);
        let scale = |m: &MatNN| MatNN::from_fn(n, n, |i, j| m[(i, j)] * s[i] * s[j]);
        (scale(&terms.m), scale(&terms.c), &terms.g * (1.0 - self.gravity_fraction))
    }
}

/// `U = M J⁺ J̇ J⁺ − C J⁺ − M J⁺ R̄̇ R̄ᵀ`.
pub fn task_space_u(m: &MatNN, c: &MatNN, jpinv: &MatMN, jdot: &MatMN, rbar_dot_rbar_t: &MatMN) -> MatMN {
    let mj = m * jpinv;
    &mj * jdot * jpinv - c * jpinv - &mj * rbar_dot_rbar_t
}

/// Coefficients of `‖D‖ < b0 + b1‖q̇‖ + b2‖q̇‖²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyBound {
    pub b0: f64,
    pub b1: f64,
    pub b2: f64,
    /// Largest `‖D‖` seen on the sweep.
    pub max_norm: f64,
    pub samples: usize,
}

impl UncertaintyBound {
    pub fn eval(&self, qdot_norm: f64) -> f64 {
        self.b0 + self.b1 * qdot_norm + self.b2 * qdot_norm * qdot_norm
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self { b0: self.b0 * factor, b1: self.b1 * factor, b2: self.b2 * factor, ..*self }
    }
}

/// Settings of the random-state sweep behind [`calibrate_uncertainty`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationSettings {
    pub samples: usize,
    pub qdot_max: f64,
    pub vd_dot_max: f64,
    /// Half-width of the joint-space box around the nominal posture (rad).
    pub posture_spread: f64,
}

impl Default for CalibrationSettings {
    fn default() -> Self {
        Self { samples: 1000, qdot_max: 1.0, vd_dot_max: 0.1, posture_spread: 0.5 }
    }
}

/// Lumped uncertainty `D = M̂⁻¹(−G̃ + Ũẋ − M̃J⁺R̄v̄̇_d − τ_f)` at one state.
pub fn lumped_uncertainty(
    chain: &KinematicChain,
    friction: Option<&FrictionParams>,
    errors: &ModelErrors,
    state: &JointState,
    vd_dot: &Vec3,
) -> Result<VecN, DynamicsError> {
    let f = frames(chain, &state.q);
    let terms = dynamics_terms_from_frames(chain, &f, &state.qdot);
    let (m_hat, c_hat, g_hat) = errors.estimate(&terms);
    let jac = jacobian_from_frames(&f);
    let jdot = jacobian_dot_from_frames(&f, &state.qdot);
    let jpinv = pseudoinverse(&jac)?;
    let xdot = &jac * &state.qdot;
    let omega = Vec3::new(xdot[3], xdot[4], xdot[5]);
    let rbar = block_rotation(&f.ee_rot);
    let rbar_dot = block_rotation(&(skew(&omega) * f.ee_rot));
    let rr = MatMN::from_iterator(6, 6, (rbar_dot * rbar.transpose()).iter().cloned());
    let u = task_space_u(&terms.m, &terms.c, &jpinv, &jdot, &rr);
    let u_hat = task_space_u(&m_hat, &c_hat, &jpinv, &jdot, &rr);
    let vbar_dot = nalgebra::DVector::from_vec(vec![vd_dot.x, vd_dot.y, vd_dot.z, 0.0, 0.0, 0.0]);
    let rbar_dyn = MatMN::from_iterator(6, 6, rbar.iter().cloned());
    let mut rhs = -(&terms.g - &g_hat) + (u - u_hat) * &xdot - (&terms.m - &m_hat) * &jpinv * rbar_dyn * vbar_dot;
    if let Some(fp) = friction {
        rhs -= joint_friction(fp, &state.qdot);
    }
    let chol = m_hat
        .cholesky()
        .ok_or(DynamicsError::IllConditionedInertia(f64::INFINITY))?;
    Ok(chol.solve(&rhs))
}

/// Certifies `(b0, b1, b2)` on a random sweep around `nominal`.
///
/// A nonnegative least-squares quadratic is fitted to `‖D‖` against `‖q̇‖`
/// and then lifted by its largest violation so that every sample lies
/// strictly below the bound.
pub fn calibrate_uncertainty<R: Rng>(
    chain: &KinematicChain,
    friction: Option<&FrictionParams>,
    errors: &ModelErrors,
    nominal: &VecN,
    settings: &CalibrationSettings,
    rng: &mut R,
) -> Result<UncertaintyBound, DynamicsError> {
    let n = chain.dof();
    let mut pts = Vec::with_capacity(settings.samples);
    let mut drawn = 0usize;
    while pts.len() < settings.samples && drawn < settings.samples * 20 {
        drawn += 1;
        let q = VecN::from_fn(n, |i, _| {
            let lim = chain.joints[i].limits;
            (nominal[i] + rng.random_range(-1.0..=1.0) * settings.posture_spread).clamp(lim[0], lim[1])
        });
        let dir = VecN::from_fn(n, |_, _| rng.random_range(-1.0..=1.0));
        let speed = rng.random_range(0.0..=settings.qdot_max);
        let qdot = if dir.norm() > 0.0 { dir.normalize() * speed } else { dir };
        let vd_dot = Vec3::new(rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0), 0.0)
            * settings.vd_dot_max;
        let state = JointState { q, qdot };
        match lumped_uncertainty(chain, friction, errors, &state, &vd_dot) {
            Ok(d) => pts.push((state.qdot.norm(), d.norm())),
            Err(DynamicsError::Math(MathError::NearSingular(_))) => continue,
            Err(e) => return Err(e),
        }
    }
    Ok(fit_quadratic_envelope(&pts))
}

/// Quadratic upper envelope of `(s, d)` samples with nonnegative coefficients.
pub fn fit_quadratic_envelope(pts: &[(f64, f64)]) -> UncertaintyBound {
    let max_norm = pts.iter().map(|p| p.1).fold(0.0, f64::max);
    if pts.is_empty() || max_norm == 0.0 {
        return UncertaintyBound { b0: 0.0, b1: 0.0, b2: 0.0, max_norm, samples: pts.len() };
    }
    // Projected gradient on the normal equations keeps coefficients ≥ 0.
    let mut ata = nalgebra::Matrix3::<f64>::zeros();
    let mut atb = Vec3::zeros();
    for &(s, d) in pts {
        let row = Vec3::new(1.0, s, s * s);
        ata += row * row.transpose();
        atb += row * d;
    }
    let mut coef = ata.try_inverse().map(|inv| inv * atb).unwrap_or_else(Vec3::zeros);
    if coef.iter().any(|&c| c < 0.0) {
        coef = nnls3(&ata, &atb);
    }
    let worst = pts
        .iter()
        .map(|&(s, d)| d - (coef[0] + coef[1] * s + coef[2] * s * s))
        .fold(f64::MIN, f64::max);
    let lift = worst.max(0.0) + 1e-9 * max_norm.max(1.0);
    UncertaintyBound { b0: coef[0] + lift, b1: coef[1], b2: coef[2], max_norm, samples: pts.len() }
}

/// Exhaustive active-set NNLS for three coefficients.
fn nnls3(ata: &nalgebra::Matrix3<f64>, atb: &Vec3) -> Vec3 {
    let mut best = Vec3::zeros();
    let mut best_cost = 0.0;
    for mask in 1u8..8 {
        let idx: Vec<usize> = (0..3).filter(|i| mask & (1 << i) != 0).collect();
        let k = idx.len();
        let sub = DMatrix::from_fn(k, k, |a, b| ata[(idx[a], idx[b])]);
        let rhs = DVector::from_fn(k, |a, _| atb[idx[a]]);
        if let Some(sol) = sub.lu().solve(&rhs) {
            if sol.iter().all(|&x| x >= 0.0) {
                let mut c = Vec3::zeros();
                for (a, &i) in idx.iter().enumerate() {
                    c[i] = sol[a];
                }
                // cost up to a constant: cᵀAc − 2cᵀb
                let cost = (c.transpose() * ata * c)[0] - 2.0 * c.dot(atb);
                if cost < best_cost {
                    best_cost = cost;
                    best = c;
                }
            }
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_state(rng: &mut ChaCha8Rng, n: usize) -> JointState {
        JointState {
            q: VecN::from_fn(n, |_, _| rng.random_range(-1.5..1.5)),
            qdot: VecN::from_fn(n, |_, _| rng.random_range(-1.0..1.0)),
        }
    }

    fn single_joint_chain() -> KinematicChain {
        KinematicChain {
            joints: vec![JointSpec {
                axis: [0.0, 0.0, 1.0],
                origin: [0.0, 0.0, 0.0],
                origin_rpy: [0.0; 3],
                mass: 1.0,
                com: [0.25, 0.0, 0.0],
                inertia: solid_cylinder_inertia(1.0, 0.02, 0.5),
                limits: default_limits(),
            }],
            tool_origin: [0.5, 0.0, 0.0],
            tool_rpy: [0.0; 3],
            gravity: default_gravity(),
        }
    }

    #[test]
    fn home_pose() {
        let chain = KinematicChain::default_arm();
        let (r, p) = forward_kinematics(&chain, &VecN::zeros(7));
        assert_relative_eq!(p, Vec3::new(0.0, 0.0, 1.23), epsilon = 1e-12);
        assert_relative_eq!(r, axis_angle_rotation(&Vec3::x(), std::f64::consts::PI), epsilon = 1e-12);
    }

    #[test]
    fn last_joint_only_rotates() {
        let chain = KinematicChain::default_arm();
        let q = VecN::from_vec(vec![0.1, 0.5, -0.2, 1.6, 0.3, 1.0, 0.0]);
        let (r0, p0) = forward_kinematics(&chain, &q);
        let mut q2 = q.clone();
        q2[6] = 0.9;
        let (r1, p1) = forward_kinematics(&chain, &q2);
        assert_relative_eq!(p0, p1, epsilon = 1e-12);
        assert!((r0 - r1).norm() > 0.1);
    }

    #[test]
    fn pose_is_lipschitz() {
        let chain = KinematicChain::default_arm();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // Reach from the base is at most 1.23 m, so L = 1.23 bounds the position map.
        for _ in 0..50 {
            let s = random_state(&mut rng, 7);
            let delta = s.qdot * 1e-4;
            let (_, p0) = forward_kinematics(&chain, &s.q);
            let (_, p1) = forward_kinematics(&chain, &(&s.q + &delta));
            assert!((p1 - p0).norm() <= 1.23 * delta.norm() * 7f64.sqrt() + 1e-12);
        }
    }

    #[test]
    fn single_joint_jacobian_column() {
        let chain = single_joint_chain();
        let q = VecN::from_vec(vec![0.4]);
        let jac = jacobian(&chain, &q);
        let (_, p) = forward_kinematics(&chain, &q);
        let expect_v = Vec3::z().cross(&p);
        assert_relative_eq!(Vec3::new(jac[(0, 0)], jac[(1, 0)], jac[(2, 0)]), expect_v, epsilon = 1e-14);
        assert_relative_eq!(Vec3::new(jac[(3, 0)], jac[(4, 0)], jac[(5, 0)]), Vec3::z(), epsilon = 1e-14);
    }

    fn rotation_log(r: &Mat3) -> Vec3 {
        let q = crate::spatial::UnitQuaternion::from_rotation(r);
        let s = q.v.norm();
        if s < 1e-15 {
            return Vec3::zeros();
        }
        q.v / s * q.angle() * q.w.signum()
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let chain = KinematicChain::default_arm();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = 1e-6;
        for _ in 0..30 {
            let s = random_state(&mut rng, 7);
            let jac = jacobian(&chain, &s.q);
            let twist = &jac * &s.qdot;
            let (r_p, p_p) = forward_kinematics(&chain, &(&s.q + &s.qdot * h));
            let (r_m, p_m) = forward_kinematics(&chain, &(&s.q - &s.qdot * h));
            let v_fd = (p_p - p_m) / (2.0 * h);
            let w_fd = rotation_log(&(r_p * r_m.transpose())) / (2.0 * h);
            assert!((Vec3::new(twist[0], twist[1], twist[2]) - v_fd).norm() < 1e-5);
            assert!((Vec3::new(twist[3], twist[4], twist[5]) - w_fd).norm() < 1e-5);
        }
    }

    #[test]
    fn jacobian_dot_properties() {
        let chain = KinematicChain::default_arm();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = 1e-6;
        for _ in 0..30 {
            let s = random_state(&mut rng, 7);
            assert_eq!(jacobian_dot(&chain, &s.q, &VecN::zeros(7)).norm(), 0.0);
            let jd = jacobian_dot(&chain, &s.q, &s.qdot);
            let fd = (jacobian(&chain, &(&s.q + &s.qdot * h)) - jacobian(&chain, &(&s.q - &s.qdot * h))) / (2.0 * h);
            assert!((&jd - fd).amax() < 1e-4);
            let jd2 = jacobian_dot(&chain, &s.q, &(&s.qdot * 2.0));
            assert_relative_eq!(jd2, jd * 2.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn mass_partials_match_finite_differences() {
        let chain = KinematicChain::default_arm();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let h = 1e-6;
        for _ in 0..10 {
            let s = random_state(&mut rng, 7);
            let partials = mass_matrix_partials(&chain, &frames(&chain, &s.q));
            for k in 0..7 {
                let mut qp = s.q.clone();
                let mut qm = s.q.clone();
                qp[k] += h;
                qm[k] -= h;
                let fd = (mass_matrix(&chain, &qp) - mass_matrix(&chain, &qm)) / (2.0 * h);
                assert!((&partials[k] - fd).amax() < 1e-7, "k={k}");
            }
        }
    }

    #[test]
    fn coriolis_routes_agree_and_vanish_at_rest() {
        let chain = KinematicChain::default_arm();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..50 {
            let s = random_state(&mut rng, 7);
            let t = dynamics_terms(&chain, &s);
            assert!((&t.c * &s.qdot - &t.coriolis).amax() < 1e-9);
            let rest = dynamics_terms(&chain, &JointState::rest(s.q.clone()));
            assert_eq!((&rest.c * &rest.coriolis.map(|_| 0.0)).amax(), 0.0);
            assert!(rest.coriolis.amax() < 1e-15);
        }
    }

    #[test]
    fn gravity_routes_agree() {
        let chain = KinematicChain::default_arm();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let s = random_state(&mut rng, 7);
            let f = frames(&chain, &s.q);
            let g = gravity_torque_from_frames(&chain, &f);
            let g_ne = rnea(&chain, &f, &VecN::zeros(7), &VecN::zeros(7), true);
            assert!((&g - g_ne).amax() < 1e-10);
        }
    }

    #[test]
    fn gravity_static_moment_horizontal_arm() {
        let chain = KinematicChain::default_arm();
        let mut q = VecN::zeros(7);
        q[1] = std::f64::consts::FRAC_PI_2;
        let t = dynamics_terms(&chain, &JointState::rest(q));
        // Horizontal lever of each distal link center about the shoulder axis.
        let moment = 4.0 * 0.09 + 3.0 * 0.27 + 2.5 * 0.4525 + 2.0 * 0.6375 + 1.5 * 0.7875 + 1.0 * 0.9025;
        assert_relative_eq!(t.g[1], -9.81 * moment, epsilon = 1e-10);
        assert!(t.g[0].abs() < 1e-12);
        let upright = dynamics_terms(&chain, &JointState::rest(VecN::zeros(7)));
        assert!(upright.g.amax() < 1e-12);
    }

    #[test]
    fn inertia_positive_definite_and_skew_property() {
        let chain = KinematicChain::default_arm();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let h = 1e-6;
        for _ in 0..200 {
            let s = random_state(&mut rng, 7);
            let t = dynamics_terms(&chain, &s);
            assert!((&t.m - t.m.transpose()).amax() < 1e-14);
            assert!(t.m.clone().symmetric_eigenvalues().min() > 0.0);
            let mdot = (mass_matrix(&chain, &(&s.q + &s.qdot * h)) - mass_matrix(&chain, &(&s.q - &s.qdot * h))) / (2.0 * h);
            let val = s.qdot.dot(&(&mdot * &s.qdot)) - 2.0 * s.qdot.dot(&t.coriolis);
            assert!(val.abs() < 1e-8, "{val}");
        }
    }

    #[test]
    fn friction_examples() {
        let fp = FrictionParams::table();
        assert_eq!(joint_friction(&fp, &VecN::zeros(7)), VecN::zeros(7));
        let tf = joint_friction(&fp, &VecN::from_element(7, 1.0));
        assert_relative_eq!(tf[0], 0.07 * (1.0 - (-100f64).exp()) + 0.14 * (-100f64).exp() + 0.13, epsilon = 1e-15);
        assert_relative_eq!(tf[0], 0.20, epsilon = 1e-12);
        let v = VecN::from_vec(vec![0.3, -0.05, 0.001, 2.0, -1.0, 0.07, -0.2]);
        assert_relative_eq!(joint_friction(&fp, &(-&v)), -joint_friction(&fp, &v), epsilon = 1e-15);
    }

    #[test]
    fn forward_dynamics_cases() {
        let chain = KinematicChain::default_arm();
        let q = VecN::from_vec(vec![0.1, 0.5, -0.2, 1.6, 0.3, 1.0, 0.0]);
        let rest = JointState::rest(q.clone());
        let t = dynamics_terms(&chain, &rest);
        let qdd = forward_dynamics(&chain, None, &rest, &t.g, &Vector6::zeros()).unwrap();
        assert!(qdd.amax() < 1e-10);

        let mut zero_g = chain.clone();
        zero_g.gravity = [0.0; 3];
        let qdd = forward_dynamics(&zero_g, None, &rest, &VecN::zeros(7), &Vector6::zeros()).unwrap();
        assert!(qdd.amax() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let fp = FrictionParams::table();
        for _ in 0..20 {
            let s = random_state(&mut rng, 7);
            let tau = VecN::from_fn(7, |_, _| rng.random_range(-5.0..5.0));
            let w = Vector6::from_fn(|_, _| rng.random_range(-3.0..3.0));
            let qdd = forward_dynamics(&chain, Some(&fp), &s, &tau, &w).unwrap();
            let t = dynamics_terms(&chain, &s);
            let jac = jacobian(&chain, &s.q);
            let resid = &t.m * qdd + &t.c * &s.qdot + &t.g + joint_friction(&fp, &s.qdot) - tau - jac.transpose() * w;
            assert!(resid.amax() < 1e-9, "{}", resid.amax());
        }
    }

    #[test]
    fn model_error_estimates() {
        let chain = KinematicChain::default_arm();
        let s = JointState { q: VecN::from_element(7, 0.3), qdot: VecN::from_element(7, 0.2) };
        let t = dynamics_terms(&chain, &s);
        let (m, c, g) = ModelErrors::default().estimate(&t);
        assert_eq!(m, t.m);
        assert_eq!(c, t.c);
        assert_eq!(g, t.g);
        let errs = ModelErrors { gravity_fraction: 0.03, inertia_fraction: 0.2, inertia_joints: vec![4, 5, 6] };
        let (m, _, g) = errs.estimate(&t);
        assert_relative_eq!(g, &t.g * 0.97, epsilon = 1e-15);
        assert_relative_eq!(m[(6, 6)], 1.2 * t.m[(6, 6)], epsilon = 1e-14);
        assert_relative_eq!(m[(0, 0)], t.m[(0, 0)], epsilon = 1e-15);
        assert!(m.symmetric_eigenvalues().min() > 0.0);
    }

    #[test]
    fn calibration_is_zero_for_perfect_model_and_certifies_sweep() {
        let chain = KinematicChain::default_arm();
        let nominal = VecN::from_vec(vec![0.0, 0.5, 0.0, 1.6, 0.0, 1.0, 0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let settings = CalibrationSettings { samples: 200, ..Default::default() };
        let b = calibrate_uncertainty(&chain, None, &ModelErrors::default(), &nominal, &settings, &mut rng).unwrap();
        assert!(b.max_norm < 1e-9, "{}", b.max_norm);

        let errs = ModelErrors { gravity_fraction: 0.03, inertia_fraction: 0.2, inertia_joints: vec![4, 5, 6] };
        let fp = FrictionParams::table();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = calibrate_uncertainty(&chain, Some(&fp), &errs, &nominal, &settings, &mut rng).unwrap();
        assert!(b.b0 > 0.0 && b.b1 >= 0.0 && b.b2 >= 0.0);
        // Re-draw the same sweep and confirm every sample sits under the bound.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 7;
        for _ in 0..settings.samples {
            let q = VecN::from_fn(n, |i, _| {
                let lim = chain.joints[i].limits;
                (nominal[i] + rng.random_range(-1.0..=1.0) * settings.posture_spread).clamp(lim[0], lim[1])
            });
            let dir = VecN::from_fn(n, |_, _| rng.random_range(-1.0..=1.0));
            let speed = rng.random_range(0.0..=settings.qdot_max);
            let qdot = dir.normalize() * speed;
            let vd = Vec3::new(rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0), 0.0) * settings.vd_dot_max;
            let st = JointState { q, qdot };
            if let Ok(d) = lumped_uncertainty(&chain, Some(&fp), &errs, &st, &vd) {
                assert!(d.norm() < b.eval(st.qdot.norm()));
            }
        }
    }

    #[test]
    fn envelope_fit_handles_decreasing_data() {
        let pts: Vec<(f64, f64)> = (0..20).map(|i| (i as f64 * 0.05, 5.0 - i as f64 * 0.2)).collect();
        let b = fit_quadratic_envelope(&pts);
        assert!(b.b1 >= 0.0 && b.b2 >= 0.0);
        for (s, d) in pts {
            assert!(d < b.eval(s));
        }
    }
}
