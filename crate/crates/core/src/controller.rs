//! Hybrid force/velocity/attitude controller.
//!
//! The outer loop shapes a translational impedance (velocity tracking in
//! the tangential plane, force regulation along the tool axis) and a
//! rotational law that turns the measured contact torque into an alignment
//! quaternion. The inner loop is a computed-torque law with a sliding-mode
//! term that rejects the lumped model uncertainty.
//!
//! Task-space vectors are ordered `[linear; angular]`. Velocity errors and
//! wrenches are in the end-effector frame; `a_x` and `ẋ` are in the base frame.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::environment::{EndToolGeometry, Wrench};
use crate::robot::{
    dynamics_terms_from_frames, frames, jacobian_dot_from_frames, jacobian_from_frames, task_space_u, DynamicsError,
    JointState, KinematicChain, MatNN, ModelErrors, VecN,
};
use crate::spatial::{
    block_rotation, diag3, pseudoinverse, quat_error, quat_from_axis_angle, skew, vec6, Mat3, MathError, MatMN,
    UnitQuaternion, Vec3, Vec6,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControlError {
    #[error("contact force {0:.3} N is below the alignment threshold")]
    NoContact(f64),
    #[error("both measured and desired torques are below the deadband")]
    DegenerateTorque,
    #[error(transparent)]
    Math(#[from] MathError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error("invalid controller parameters: {0}")]
    InvalidParams(String),
}

/// Diagonal target dynamics for the translational and rotational axes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImpedanceParams {
    pub m_d: [f64; 3],
    pub b_d: [f64; 3],
    pub k_d: [f64; 3],
    pub i_d: [f64; 3],
    pub k1: [f64; 3],
    pub p_bar: [f64; 3],
}

impl Default for ImpedanceParams {
    fn default() -> Self {
        Self {
            m_d: [1.0, 1.0, 10.0],
            b_d: [10.0, 10.0, 70.0],
            k_d: [30.0, 30.0, 0.0],
            i_d: [0.3; 3],
            k1: [10.0; 3],
            p_bar: [4.0; 3],
        }
    }
}

impl ImpedanceParams {
    pub fn validate(&self) -> Result<(), ControlError> {
        let positive = |name: &str, v: &[f64]| {
            if v.iter().all(|&x| x > 0.0 && x.is_finite()) {
                Ok(())
            } else {
                Err(ControlError::InvalidParams(format!("{name} must be positive")))
            }
        };
        positive("m_d", &self.m_d)?;
        positive("b_d", &self.b_d)?;
        positive("k_d[x,y]", &self.k_d[..2])?;
        positive("i_d", &self.i_d)?;
        positive("k1", &self.k1)?;
        positive("p_bar", &self.p_bar)?;
        if self.k_d[2] != 0.0 {
            return Err(ControlError::InvalidParams("k_d along the tool axis must be zero".into()));
        }
        Ok(())
    }

    /// Decay rate `min(λmin K₁, λmin P̄) / max(2, λmax I_d)` of the rotational target.
    pub fn rotational_decay_rate(&self) -> f64 {
        let min = |v: &[f64; 3]| v.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = |v: &[f64; 3]| v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        min(&self.k1).min(min(&self.p_bar)) / max(&self.i_d).max(2.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SwitchingMode {
    /// `Q ∘ sign(S)`.
    Ideal,
    /// `K S + Q ∘ tanh(S / φ)`.
    #[default]
    Practical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SmcParams {
    pub b_d0: f64,
    pub b_d1: f64,
    pub b_d2: f64,
    pub alpha: f64,
    /// Boundary-layer width of the tanh switching function.
    pub phi: f64,
    /// Diagonal proportional gain on `S` (practical mode).
    pub k: Vec<f64>,
    /// Per-joint lower bound on the switching gain.
    pub q_floor: Option<Vec<f64>>,
    pub mode: SwitchingMode,
}

impl Default for SmcParams {
    fn default() -> Self {
        Self {
            b_d0: 0.0,
            b_d1: 0.0,
            b_d2: 0.0,
            alpha: 0.5,
            phi: 0.15,
            k: vec![10.0; 7],
            q_floor: Some(vec![24.0, 48.0, 48.0, 60.0, 72.0, 72.0, 84.0]),
            mode: SwitchingMode::Practical,
        }
    }
}

impl SmcParams {
    pub fn validate(&self, n: usize) -> Result<(), ControlError> {
        let bad = |m: &str| Err(ControlError::InvalidParams(m.into()));
        if !(self.alpha > 0.0) {
            return bad("alpha must be positive");
        }
        if self.b_d0 < 0.0 || self.b_d1 < 0.0 || self.b_d2 < 0.0 {
            return bad("uncertainty bound coefficients must be nonnegative");
        }
        if !(self.phi > 0.0) {
            return bad("phi must be positive");
        }
        if self.k.len() != n || self.k.iter().any(|&k| k < 0.0) {
            return bad("k must hold one nonnegative gain per joint");
        }
        if let Some(f) = &self.q_floor {
            if f.len() != n || f.iter().any(|&x| x < 0.0) {
                return bad("q_floor must hold one nonnegative gain per joint");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignmentMode {
    #[default]
    Frictionless,
    Frictional,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RotationalLaw {
    /// Quaternion-feedback target dynamics with state-dependent damping.
    #[default]
    Quaternion,
    /// Direct torque-error feedback with constant diagonal damping.
    TorqueError { b_w: [f64; 3] },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignmentParams {
    pub mode: AlignmentMode,
    /// Known upper bound on the contact lever length (m).
    pub r_m: f64,
    pub torque_deadband: f64,
    pub force_threshold: f64,
    pub law: RotationalLaw,
}

impl Default for AlignmentParams {
    fn default() -> Self {
        Self {
            mode: AlignmentMode::Frictionless,
            r_m: 0.06,
            torque_deadband: 1e-4,
            force_threshold: 0.5,
            law: RotationalLaw::Quaternion,
        }
    }
}

impl AlignmentParams {
    pub fn validate(&self, tool: &EndToolGeometry) -> Result<(), ControlError> {
        if self.r_m < tool.r_r {
            return Err(ControlError::InvalidParams("r_m must bound the tool radius".into()));
        }
        if !(self.torque_deadband > 0.0 && self.force_threshold > 0.0) {
            return Err(ControlError::InvalidParams("alignment thresholds must be positive".into()));
        }
        Ok(())
    }
}

/// Left endpoint of the current sliding-surface integration interval.
#[derive(Debug, Clone, PartialEq)]
struct Segment {
    smooth: VecN,
    a_x: VecN,
    jpinv_a_x: VecN,
}

/// Integrators carried between control steps.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerState {
    pub int_e_v: Vec3,
    pub s_acc: VecN,
    prev_e_v: Option<Vec3>,
    prev_integrand: Option<Segment>,
    pub last_wrench: Option<Wrench>,
}

impl ControllerState {
    pub fn new(n: usize) -> Self {
        Self { int_e_v: Vec3::zeros(), s_acc: VecN::zeros(n), prev_e_v: None, prev_integrand: None, last_wrench: None }
    }

    /// Trapezoidal update of `∫e_v dt`.
    pub fn integrate_velocity_error(&mut self, e_v: &Vec3, dt: f64) -> Vec3 {
        if let Some(prev) = self.prev_e_v {
            self.int_e_v += 0.5 * (prev + e_v) * dt;
        }
        self.prev_e_v = Some(*e_v);
        self.int_e_v
    }
}

/// `e = [v_e − v_d; ω_e]` with the normal component of `v_d` forced to zero.
pub fn velocity_error(v_e: &Vec3, omega_e: &Vec3, v_d: &Vec3) -> Vec6 {
    let vd = Vec3::new(v_d.x, v_d.y, 0.0);
    vec6(&(v_e - vd), omega_e)
}

/// `a_xv = R M_d⁻¹(−B_d e_v − K_d ∫e_v + e_f)`.
pub fn translational_aux(ip: &ImpedanceParams, e_v: &Vec3, int_e_v: &Vec3, e_f: &Vec3, r: &Mat3) -> Vec3 {
    let inner = -diag3(ip.b_d) * e_v - diag3(ip.k_d) * int_e_v + e_f;
    r * inner.component_div(&Vec3::from(ip.m_d))
}

fn clamped_asin(x: f64) -> f64 {
    x.clamp(0.0, 1.0).asin()
}

/// Alignment quaternion from the lever `r_off` of a frictionless contact.
pub fn extract_alignment_frictionless(
    tau_e: &Vec3,
    f_ee: &Vec3,
    tool: &EndToolGeometry,
    ap: &AlignmentParams,
) -> Result<UnitQuaternion, ControlError> {
    let f = f_ee.norm();
    if f < ap.force_threshold {
        return Err(ControlError::NoContact(f));
    }
    let t = tau_e.norm();
    if t < ap.torque_deadband {
        return Ok(UnitQuaternion::identity());
    }
    let theta = clamped_asin(t / (f * tool.r_off));
    Ok(quat_from_axis_angle(&(-tau_e / t), theta)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrictionalAlignment {
    pub q_hat: UnitQuaternion,
    pub q_hat_d: UnitQuaternion,
    pub error: UnitQuaternion,
    /// Desired contact torque `r_d × f`.
    pub tau_d: Vec3,
}

fn torque_quaternion(tau: &Vec3, f: f64, r_m: f64, deadband: f64) -> Result<UnitQuaternion, MathError> {
    let t = tau.norm();
    if t < deadband {
        return Ok(UnitQuaternion::identity());
    }
    quat_from_axis_angle(&(-tau / t), clamped_asin(t / (r_m * f)))
}

/// Measured and desired alignment quaternions for a frictional contact,
/// both using the lever bound `r_m`, and their error `q̂_d⁻¹ ∘ q̂`.
pub fn extract_alignment_frictional(
    tau_e: &Vec3,
    f_ee: &Vec3,
    tool: &EndToolGeometry,
    ap: &AlignmentParams,
) -> Result<FrictionalAlignment, ControlError> {
    let f = f_ee.norm();
    if f < ap.force_threshold {
        return Err(ControlError::NoContact(f));
    }
    let tau_d = tool.aligned_lever().cross(f_ee);
    if tau_e.norm() < ap.torque_deadband && tau_d.norm() < ap.torque_deadband {
        return Err(ControlError::DegenerateTorque);
    }
    let q_hat = torque_quaternion(tau_e, f, ap.r_m, ap.torque_deadband)?;
    let q_hat_d = torque_quaternion(&tau_d, f, ap.r_m, ap.torque_deadband)?;
    Ok(FrictionalAlignment { q_hat, q_hat_d, error: quat_error(&q_hat_d, &q_hat), tau_d })
}

/// `a_xω = R I_d⁻¹[−(P̄K₁ + I)q − ½(q0 I_d K₁ + 2P̄ + [q]×) ω_e]`.
pub fn rotational_aux_quaternion(ip: &ImpedanceParams, q: &UnitQuaternion, omega_e: &Vec3, r: &Mat3) -> Vec3 {
    let (i_d, k1, p) = (diag3(ip.i_d), diag3(ip.k1), diag3(ip.p_bar));
    let tau_a = -(p * k1 + Mat3::identity()) * q.v;
    let damping = 0.5 * (q.w * i_d * k1 + 2.0 * p + skew(&q.v));
    r * (tau_a - damping * omega_e).component_div(&Vec3::from(ip.i_d))
}

/// `a_xω = R I_d⁻¹[−B_ω ω_e + (τ_e − τ_d)]`.
pub fn rotational_aux_torque_error(ip: &ImpedanceParams, b_w: &[f64; 3], e_tau: &Vec3, omega_e: &Vec3, r: &Mat3) -> Vec3 {
    r * (-diag3(*b_w) * omega_e + e_tau).component_div(&Vec3::from(ip.i_d))
}

/// Advances the sliding-surface integral and returns `S = q̇ + ∫J⁺(J̇J⁺ẋ − R̄v̄̇_d − R̄̇e − R̄̇v̄_d − a_x)dt`.
///
/// The trapezoid spans the interval since the previous control step. Over that
/// interval the plant was driven by the previous `a_x` (held with the torque),
/// so both endpoints of the `a_x` term use that held value.
#[allow(clippy::too_many_arguments)]
pub fn sliding_surface_step(
    cs: &mut ControllerState,
    qdot: &VecN,
    jpinv: &MatMN,
    jdot: &MatMN,
    xdot: &VecN,
    rbar: &MatMN,
    rbar_dot: &MatMN,
    vbar_d: &VecN,
    vbar_d_dot: &VecN,
    e: &VecN,
    a_x: &VecN,
    dt: f64,
) -> VecN {
    let smooth = jpinv * (jdot * (jpinv * xdot) - rbar * vbar_d_dot - rbar_dot * e - rbar_dot * vbar_d);
    if let Some(prev) = &cs.prev_integrand {
        let held = jpinv * &prev.a_x;
        cs.s_acc += 0.5 * (&prev.smooth + &smooth - &prev.jpinv_a_x - held) * dt;
    }
    cs.prev_integrand = Some(Segment { smooth, a_x: a_x.clone(), jpinv_a_x: jpinv * a_x });
    qdot + &cs.s_acc
}

/// Per-joint switching gain `max(b_D0 + b_D1‖q̇‖ + b_D2‖q̇‖² + α, floor_i)`.
pub fn smc_gain(sp: &SmcParams, qdot: &VecN) -> VecN {
    let s = qdot.norm();
    let q = sp.b_d0 + sp.b_d1 * s + sp.b_d2 * s * s + sp.alpha;
    match &sp.q_floor {
        Some(f) => VecN::from_iterator(qdot.len(), f.iter().map(|&fi| q.max(fi))),
        None => VecN::from_element(qdot.len(), q),
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Joint-space auxiliary acceleration `a_j`.
pub fn smc_aux(sp: &SmcParams, gain: &VecN, s: &VecN, jpinv_ax: &VecN) -> VecN {
    let switching = match sp.mode {
        SwitchingMode::Ideal => VecN::from_fn(s.len(), |i, _| gain[i] * sign(s[i])),
        SwitchingMode::Practical => VecN::from_fn(s.len(), |i, _| sp.k[i] * s[i] + gain[i] * (s[i] / sp.phi).tanh()),
    };
    jpinv_ax - switching
}

/// Model quantities the torque law needs at one state.
pub struct TorqueInputs<'a> {
    pub m_hat: &'a MatNN,
    pub g_hat: &'a VecN,
    pub u_hat: &'a MatMN,
    pub jac: &'a MatMN,
    pub jpinv: &'a MatMN,
    pub rbar: &'a MatMN,
}

/// `τ = M̂a_j − JᵀF + Ĝ − Ûẋ + M̂J⁺R̄v̄̇_d`, with `F` the base-frame wrench on the end-effector.
pub fn torque_command(m: &TorqueInputs, a_j: &VecN, wrench_base: &VecN, xdot: &VecN, vbar_d_dot: &VecN) -> VecN {
    m.m_hat * a_j - m.jac.transpose() * wrench_base + m.g_hat - m.u_hat * xdot
        + m.m_hat * (m.jpinv * (m.rbar * vbar_d_dot))
}

/// References for one control step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Reference {
    /// Desired tangential velocity, end-effector frame (z ignored).
    pub v_d: Vec3,
    pub v_d_dot: Vec3,
    pub f_dz: f64,
}

/// Everything computed during one control step, for logging and analysis.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlOutput {
    pub tau: VecN,
    pub s: VecN,
    pub a_x: Vec6,
    pub a_j: VecN,
    pub e_v: Vec3,
    pub int_e_v: Vec3,
    pub e_f: Vec3,
    pub v_e: Vec3,
    pub omega_e: Vec3,
    /// Quaternion driving the rotational law (`q` or `ê`).
    pub alignment: UnitQuaternion,
    pub q_hat: UnitQuaternion,
    pub q_hat_d: UnitQuaternion,
    pub in_alignment_contact: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControllerParams {
    pub impedance: ImpedanceParams,
    pub smc: SmcParams,
    pub alignment: AlignmentParams,
}

fn to_dyn6(m: &crate::spatial::Mat6) -> MatMN {
    MatMN::from_iterator(6, 6, m.iter().cloned())
}

fn to_dvec(v: &Vec6) -> VecN {
    VecN::from_iterator(6, v.iter().cloned())
}

/// Stateful controller bound to a (possibly misestimated) robot model.
#[derive(Debug, Clone)]
pub struct Controller {
    pub chain: KinematicChain,
    pub errors: ModelErrors,
    pub tool: EndToolGeometry,
    pub params: ControllerParams,
    pub state: ControllerState,
}

impl Controller {
    pub fn new(
        chain: KinematicChain,
        errors: ModelErrors,
        tool: EndToolGeometry,
        params: ControllerParams,
    ) -> Result<Self, ControlError> {
        params.impedance.validate()?;
        params.smc.validate(chain.dof())?;
        params.alignment.validate(&tool)?;
        let n = chain.dof();
        Ok(Self { chain, errors, tool, params, state: ControllerState::new(n) })
    }

    pub fn reset(&mut self) {
        self.state = ControllerState::new(self.chain.dof());
    }

    fn rotational(&self, wrench: &Wrench, omega_e: &Vec3, r: &Mat3) -> Result<(Vec3, UnitQuaternion, UnitQuaternion, UnitQuaternion, bool), ControlError> {
        let ip = &self.params.impedance;
        let ap = &self.params.alignment;
        let id = UnitQuaternion::identity();
        let (q_hat, q_hat_d, align, tau_d, contact) = match ap.mode {
            AlignmentMode::Frictionless => {
                match extract_alignment_frictionless(&wrench.torque, &wrench.force, &self.tool, ap) {
                    Ok(q) => (q, id, q, self.tool.aligned_lever().cross(&wrench.force), true),
                    Err(ControlError::NoContact(_)) => (id, id, id, Vec3::zeros(), false),
                    Err(e) => return Err(e),
                }
            }
            AlignmentMode::Frictional => {
                match extract_alignment_frictional(&wrench.torque, &wrench.force, &self.tool, ap) {
                    Ok(fa) => (fa.q_hat, fa.q_hat_d, fa.error, fa.tau_d, true),
                    Err(ControlError::NoContact(_)) => (id, id, id, Vec3::zeros(), false),
                    Err(ControlError::DegenerateTorque) => {
                        (id, id, id, self.tool.aligned_lever().cross(&wrench.force), true)
                    }
                    Err(e) => return Err(e),
                }
            }
        };
        let a = match &ap.law {
            RotationalLaw::Quaternion => rotational_aux_quaternion(ip, &align, omega_e, r),
            RotationalLaw::TorqueError { b_w } => {
                let e_tau = if contact { wrench.torque - tau_d } else { Vec3::zeros() };
                rotational_aux_torque_error(ip, b_w, &e_tau, omega_e, r)
            }
        };
        Ok((a, align, q_hat, q_hat_d, contact))
    }

    /// One control update from the measured joint state and end-effector wrench.
    pub fn step(&mut self, state: &JointState, wrench: &Wrench, reference: &Reference, dt: f64) -> Result<ControlOutput, ControlError> {
        let f = frames(&self.chain, &state.q);
        let jac = jacobian_from_frames(&f);
        let jdot = jacobian_dot_from_frames(&f, &state.qdot);
        let jpinv = pseudoinverse(&jac)?;
        let r = f.ee_rot;
        let xdot = &jac * &state.qdot;
        let v_b = Vec3::new(xdot[0], xdot[1], xdot[2]);
        let omega_b = Vec3::new(xdot[3], xdot[4], xdot[5]);
        let v_e = r.transpose() * v_b;
        let omega_e = r.transpose() * omega_b;
        let wrench = wrench.expressed_in(crate::environment::Frame::EndEffector, &r);

        let e = velocity_error(&v_e, &omega_e, &reference.v_d);
        let e_v = Vec3::new(e[0], e[1], e[2]);
        let int_e_v = self.state.integrate_velocity_error(&e_v, dt);
        let e_f = Vec3::new(0.0, 0.0, wrench.force.z - reference.f_dz);
        let a_xv = translational_aux(&self.params.impedance, &e_v, &int_e_v, &e_f, &r);
        let (a_xw, alignment, q_hat, q_hat_d, contact) = self.rotational(&wrench, &omega_e, &r)?;
        let a_x = vec6(&a_xv, &a_xw);

        let rbar = to_dyn6(&block_rotation(&r));
        let rbar_dot = to_dyn6(&block_rotation(&(skew(&omega_b) * r)));
        let vbar_d = to_dvec(&Vec6::new(reference.v_d.x, reference.v_d.y, 0.0, 0.0, 0.0, 0.0));
        let vbar_d_dot = to_dvec(&Vec6::new(reference.v_d_dot.x, reference.v_d_dot.y, 0.0, 0.0, 0.0, 0.0));
        let a_x_dyn = to_dvec(&a_x);
        let s = sliding_surface_step(
            &mut self.state,
            &state.qdot,
            &jpinv,
            &jdot,
            &xdot,
            &rbar,
            &rbar_dot,
            &vbar_d,
            &vbar_d_dot,
            &to_dvec(&e),
            &a_x_dyn,
            dt,
        );
        let gain = smc_gain(&self.params.smc, &state.qdot);
        let a_j = smc_aux(&self.params.smc, &gain, &s, &(&jpinv * &a_x_dyn));

        let terms = dynamics_terms_from_frames(&self.chain, &f, &state.qdot);
        let (m_hat, c_hat, g_hat) = self.errors.estimate(&terms);
        let rr = to_dyn6(&block_rotation(&skew(&omega_b)));
        let u_hat = task_space_u(&m_hat, &c_hat, &jpinv, &jdot, &rr);
        let w_base = to_dvec(&vec6(&(r * wrench.force), &(r * wrench.torque)));
        let inputs = TorqueInputs { m_hat: &m_hat, g_hat: &g_hat, u_hat: &u_hat, jac: &jac, jpinv: &jpinv, rbar: &rbar };
        let tau = torque_command(&inputs, &a_j, &w_base, &xdot, &vbar_d_dot);
        self.state.last_wrench = Some(wrench);

        Ok(ControlOutput {
            tau,
            s,
            a_x,
            a_j,
            e_v,
            int_e_v,
            e_f,
            v_e,
            omega_e,
            alignment,
            q_hat,
            q_hat_d,
            in_alignment_contact: contact,
        })
    }
}
