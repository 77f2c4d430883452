//! Fixed-step closed-loop simulation.
//!
//! The plant is integrated with classical RK4 and a torque held constant
//! over each step. The contact wrench is re-evaluated inside every RK4
//! stage. The plant state is augmented with the actuator work, the work
//! done by the environment on the robot, and the friction loss, so the
//! energy ledger is integrated to the same order as the motion.

use std::collections::VecDeque;
use std::io::{Read, Write};

use nalgebra::Vector6;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controller::{
    extract_alignment_frictional, extract_alignment_frictionless, AlignmentMode, ControlError, ControlOutput,
    Controller, ControllerParams, Reference,
};
use crate::environment::{contact_state, environment_wrench, EndToolGeometry, EnvParams, Frame, SurfaceModel, Wrench};
use crate::robot::{
    calibrate_uncertainty, forward_dynamics_from_frames, frames, jacobian, jacobian_from_frames, joint_friction,
    kinetic_energy, mass_matrix_from_frames, potential_energy, CalibrationSettings, DynamicsError, DynamicsTerms,
    FrictionParams, JointState, KinematicChain, MatNN, ModelErrors, UncertaintyBound, VecN,
};
use crate::spatial::{axis_angle_rotation, pseudoinverse, Mat3, MathError, UnitQuaternion, Vec3, Vec6};

pub const RNG_NAME: &str = "ChaCha8Rng (rand_chacha 0.9)";

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    InvalidConfig(String),
    #[error("controller failure at t = {t:.4} s: {source}")]
    Control { t: f64, source: ControlError },
    #[error("plant failure at t = {t:.4} s: {source}")]
    Plant { t: f64, source: DynamicsError },
    #[error("joint {joint} left its limits at t = {t:.4} s")]
    JointLimit { t: f64, joint: usize },
    #[error("non-finite state at t = {t:.4} s")]
    NonFinite { t: f64 },
    #[error("run aborted: {source}")]
    Aborted { source: Box<SimError>, log: Box<SimLog> },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl SimError {
    /// Time of a step failure, if this is one.
    pub fn time(&self) -> Option<f64> {
        match self {
            SimError::Control { t, .. } | SimError::Plant { t, .. } | SimError::JointLimit { t, .. } => Some(*t),
            SimError::NonFinite { t } => Some(*t),
            SimError::Aborted { source, .. } => source.time(),
            _ => None,
        }
    }
}

/// `f_dz(t) = A(1 − e^{−λt})`, or the constant `A` when no rate is given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForceProfile {
    pub amplitude: f64,
    #[serde(default)]
    pub rate: Option<f64>,
}

impl ForceProfile {
    pub fn eval(&self, t: f64) -> f64 {
        match self.rate {
            Some(l) => self.amplitude * (1.0 - (-l * t).exp()),
            None => self.amplitude,
        }
    }
}

/// Constant tangential velocity `(v_x, v_y)` in the end-effector frame over `[t_start, t_end)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VelocitySegment {
    pub t_start: f64,
    pub t_end: f64,
    pub v: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSpec {
    pub mean: f64,
    pub std_dev: f64,
    /// Also perturb the joint velocities seen by the controller.
    pub on_joint_velocity: bool,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self { mean: 0.0, std_dev: 0.0, on_joint_velocity: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialCondition {
    Joints {
        q: Vec<f64>,
        #[serde(default)]
        qdot: Option<Vec<f64>>,
    },
    /// Places the tool `clearance` above `surface_point`, tilted by
    /// `tilt_deg` about the end-effector axis `tilt_axis`, solved by
    /// inverse kinematics that stays close to `seed`.
    Placement {
        surface_point: [f64; 3],
        clearance: f64,
        tilt_deg: f64,
        #[serde(default = "default_tilt_axis")]
        tilt_axis: [f64; 3],
        /// Turn of the aligned frame about the surface normal (deg).
        #[serde(default)]
        yaw_deg: f64,
        seed: Vec<f64>,
        #[serde(default)]
        qdot: Option<Vec<f64>>,
    },
}

fn default_tilt_axis() -> [f64; 3] {
    [1.0, 0.0, 0.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationConfig {
    #[serde(default)]
    pub settings: CalibrationSettings,
    #[serde(default = "default_margin")]
    pub margin: f64,
}

fn default_margin() -> f64 {
    1.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisWindows {
    /// Steady-state evaluation window `[t0, t1]` (s).
    pub steady: [f64; 2],
    /// Window over which the tail slope of the work integrals is tested (s).
    pub tail: [f64; 2],
}

impl Default for AnalysisWindows {
    fn default() -> Self {
        Self { steady: [10.0, 20.0], tail: [30.0, 40.0] }
    }
}

fn default_name() -> String {
    "scenario".into()
}
fn default_dt() -> f64 {
    1e-3
}
fn default_filter() -> usize {
    1
}
fn default_log_every() -> usize {
    1
}
fn default_tool() -> EndToolGeometry {
    EndToolGeometry { r_off: 0.03, r_r: 0.06 }
}

/// A complete, self-describing scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub seed: u64,
    #[serde(default = "KinematicChain::default_arm")]
    pub chain: KinematicChain,
    #[serde(default)]
    pub friction: Option<FrictionParams>,
    pub surface: SurfaceModel,
    pub env: EnvParams,
    #[serde(default = "default_tool")]
    pub tool: EndToolGeometry,
    #[serde(default)]
    pub controller: ControllerParams,
    #[serde(default)]
    pub calibration: Option<CalibrationConfig>,
    pub force_profile: ForceProfile,
    #[serde(default)]
    pub velocity_segments: Vec<VelocitySegment>,
    /// Duration of the smooth transition at each velocity breakpoint (s); zero gives steps.
    #[serde(default)]
    pub velocity_ramp: f64,
    #[serde(default)]
    pub noise: NoiseSpec,
    #[serde(default)]
    pub model_errors: ModelErrors,
    /// Moving-average window of the wrench measurement (samples at the control rate).
    #[serde(default = "default_filter")]
    pub filter_window: usize,
    #[serde(default = "default_dt")]
    pub dt: f64,
    /// Control period (s); defaults to `dt`.
    #[serde(default)]
    pub control_dt: Option<f64>,
    pub duration: f64,
    /// Keep one log row every `log_every` steps.
    #[serde(default = "default_log_every")]
    pub log_every: usize,
    pub initial: InitialCondition,
    #[serde(default)]
    pub analysis: AnalysisWindows,
}

impl ScenarioConfig {
    /// Parses a scenario. Errors name the offending field path and position.
    pub fn from_json(text: &str) -> Result<Self, serde_path_to_error::Error<serde_json::Error>> {
        serde_path_to_error::deserialize(&mut serde_json::Deserializer::from_str(text))
    }

    pub fn control_divider(&self) -> Result<usize, SimError> {
        let period = self.control_dt.unwrap_or(self.dt);
        let ratio = period / self.dt;
        let div = ratio.round();
        if div < 1.0 || (ratio - div).abs() > 1e-9 * ratio.max(1.0) {
            return Err(SimError::InvalidConfig(format!(
                "control period {period} is not a whole multiple of dt {}",
                self.dt
            )));
        }
        Ok(div as usize)
    }

    pub fn steps(&self) -> usize {
        (self.duration / self.dt).round() as usize
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidConfig(m));
        if !(self.dt > 0.0) {
            return bad("dt must be positive".into());
        }
        if !(self.duration >= 0.0) {
            return bad("duration must be nonnegative".into());
        }
        self.control_divider()?;
        if self.filter_window == 0 || self.log_every == 0 {
            return bad("filter_window and log_every must be at least 1".into());
        }
        let issues = self.chain.validate();
        if !issues.is_empty() {
            return bad(format!("chain: {}", issues.join("; ")));
        }
        if let Some(fp) = &self.friction {
            if !fp.is_valid(self.chain.dof()) {
                return bad("friction coefficients must be nonnegative with one entry per joint".into());
            }
        }
        if !(self.env.k_e > 0.0) || self.env.b_e < 0.0 {
            return bad("env requires k_e > 0 and b_e >= 0".into());
        }
        if !self.tool.is_valid() {
            return bad("tool requires r_r > r_off >= 0".into());
        }
        if let crate::environment::SurfaceShape::Sphere { radius } = self.surface.shape {
            if radius <= self.tool.r_r {
                return bad("sphere radius must exceed the tool radius".into());
            }
        }
        let mut last_end = f64::NEG_INFINITY;
        for (i, s) in self.velocity_segments.iter().enumerate() {
            if !(s.t_end > s.t_start) || s.t_start < last_end {
                return bad(format!("velocity segment {i} is empty, unordered, or overlapping"));
            }
            last_end = s.t_end;
        }
        if self.velocity_ramp < 0.0 {
            return bad("velocity_ramp must be nonnegative".into());
        }
        if self.noise.std_dev < 0.0 {
            return bad("noise std_dev must be nonnegative".into());
        }
        if self.model_errors.inertia_joints.iter().any(|&j| j >= self.chain.dof()) {
            return bad("inertia error joint index out of range".into());
        }
        Ok(())
    }
}

fn smoothstep(s: f64) -> (f64, f64) {
    if s <= 0.0 {
        (0.0, 0.0)
    } else if s >= 1.0 {
        (1.0, 0.0)
    } else {
        (s * s * (3.0 - 2.0 * s), 6.0 * s * (1.0 - s))
    }
}

/// Desired tangential velocity, its rate, and desired normal force at `t`.
pub fn desired_profiles(cfg: &ScenarioConfig, t: f64) -> (Vec3, Vec3, f64) {
    let mut v = Vec3::zeros();
    let mut a = Vec3::zeros();
    let ramp = cfg.velocity_ramp;
    for seg in &cfg.velocity_segments {
        let dir = Vec3::new(seg.v[0], seg.v[1], 0.0);
        if ramp > 0.0 {
            let (h0, d0) = smoothstep((t - seg.t_start) / ramp);
            let (h1, d1) = smoothstep((t - seg.t_end) / ramp);
            v += dir * (h0 - h1);
            a += dir * ((d0 - d1) / ramp);
        } else if t >= seg.t_start && t < seg.t_end {
            v += dir;
        }
    }
    (v, a, cfg.force_profile.eval(t))
}

/// Moving average over the most recent `window` samples.
#[derive(Debug, Clone)]
pub struct MovingAverage {
    window: usize,
    samples: VecDeque<Vec6>,
}

impl MovingAverage {
    pub fn new(window: usize) -> Self {
        Self { window: window.max(1), samples: VecDeque::with_capacity(window.max(1)) }
    }

    pub fn push(&mut self, x: Vec6) -> Vec6 {
        if self.samples.len() == self.window {
            self.samples.pop_front();
        }
        self.samples.push_back(x);
        self.samples.iter().fold(Vec6::zeros(), |acc, s| acc + s) / self.samples.len() as f64
    }
}

/// Wrench sensor: additive Gaussian noise per component followed by a moving average.
#[derive(Debug, Clone)]
pub struct SensorModel {
    rng: ChaCha8Rng,
    noise: Option<Normal<f64>>,
    filter: MovingAverage,
    pub noise_joint_velocity: bool,
}

impl SensorModel {
    pub fn new(spec: &NoiseSpec, window: usize, seed: u64) -> Result<Self, SimError> {
        let noise = if spec.std_dev > 0.0 || spec.mean != 0.0 {
            Some(Normal::new(spec.mean, spec.std_dev).map_err(|e| SimError::InvalidConfig(e.to_string()))?)
        } else {
            None
        };
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            noise,
            filter: MovingAverage::new(window),
            noise_joint_velocity: spec.on_joint_velocity,
        })
    }

    fn draw(&mut self) -> f64 {
        match &self.noise {
            Some(n) => n.sample(&mut self.rng),
            None => 0.0,
        }
    }

    pub fn measure(&mut self, truth: &Vec6) -> Vec6 {
        let noisy = Vec6::from_fn(|i, _| truth[i] + self.draw());
        self.filter.push(noisy)
    }

    pub fn measure_velocity(&mut self, qdot: &VecN) -> VecN {
        if !self.noise_joint_velocity {
            return qdot.clone();
        }
        VecN::from_fn(qdot.len(), |i, _| qdot[i] + self.draw())
    }
}

/// Estimated model terms and one measured wrench sample.
pub fn apply_model_errors(
    errors: &ModelErrors,
    terms: &DynamicsTerms,
    sensor: &mut SensorModel,
    true_wrench: &Vec6,
) -> ((MatNN, VecN, MatNN), Vec6) {
    let (m, c, g) = errors.estimate(terms);
    ((m, g, c), sensor.measure(true_wrench))
}

/// Robot in contact with a surface, without the controller.
#[derive(Debug, Clone)]
pub struct Plant {
    pub chain: KinematicChain,
    pub friction: Option<FrictionParams>,
    pub surface: Option<SurfaceModel>,
    pub env: EnvParams,
    pub tool: EndToolGeometry,
}

/// Cumulative energy flows since the start of a run (J).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EnergyLedger {
    pub actuator_work: f64,
    /// Work done by the environment on the end-effector.
    pub env_work_on_robot: f64,
    pub friction_loss: f64,
}

/// End-effector quantities at one plant state.
#[derive(Debug, Clone)]
pub struct PlantSnapshot {
    pub ee_rot: Mat3,
    pub ee_pos: Vec3,
    /// Base-frame twist `[v; ω]` of the end-effector.
    pub twist: Vector6<f64>,
    pub wrench: Wrench,
    pub in_contact: bool,
    pub penetration: f64,
    pub normal: Vec3,
}

type Deriv = (VecN, VecN, [f64; 3]);

impl Plant {
    pub fn snapshot(&self, state: &JointState) -> PlantSnapshot {
        let f = frames(&self.chain, &state.q);
        self.snapshot_from_frames(&f, &state.qdot)
    }

    fn snapshot_from_frames(&self, f: &crate::robot::Frames, qdot: &VecN) -> PlantSnapshot {
        let jac = jacobian_from_frames(f);
        let tw = &jac * qdot;
        let twist = Vector6::from_iterator(tw.iter().cloned());
        let v = Vec3::new(twist[0], twist[1], twist[2]);
        let w = Vec3::new(twist[3], twist[4], twist[5]);
        let (wrench, in_contact, penetration, normal) = match &self.surface {
            Some(s) => {
                let c = contact_state(s, &self.tool, &f.ee_rot, &f.ee_pos);
                (environment_wrench(&c, &self.env, &f.ee_rot, &v, &w), c.in_contact, c.penetration, c.normal)
            }
            None => (Wrench::zero(Frame::EndEffector), false, 0.0, Vec3::z()),
        };
        PlantSnapshot { ee_rot: f.ee_rot, ee_pos: f.ee_pos, twist, wrench, in_contact, penetration, normal }
    }

    fn derivative(&self, q: &VecN, qdot: &VecN, tau: &VecN) -> Result<Deriv, DynamicsError> {
        let f = frames(&self.chain, q);
        let snap = self.snapshot_from_frames(&f, qdot);
        let wb = snap.wrench.expressed_in(Frame::Base, &snap.ee_rot);
        let w = Vector6::new(wb.force.x, wb.force.y, wb.force.z, wb.torque.x, wb.torque.y, wb.torque.z);
        let qdd = forward_dynamics_from_frames(&self.chain, &f, self.friction.as_ref(), qdot, tau, &w)?;
        let tf = match &self.friction {
            Some(fp) => joint_friction(fp, qdot).dot(qdot),
            None => 0.0,
        };
        Ok((qdot.clone(), qdd, [tau.dot(qdot), w.dot(&snap.twist), tf]))
    }

    /// One RK4 step with zero-order-hold torque.
    pub fn rk4_step(&self, state: &JointState, ledger: &EnergyLedger, tau: &VecN, dt: f64) -> Result<(JointState, EnergyLedger), DynamicsError> {
        let (q, v) = (&state.q, &state.qdot);
        let k1 = self.derivative(q, v, tau)?;
        let k2 = self.derivative(&(q + &k1.0 * (0.5 * dt)), &(v + &k1.1 * (0.5 * dt)), tau)?;
        let k3 = self.derivative(&(q + &k2.0 * (0.5 * dt)), &(v + &k2.1 * (0.5 * dt)), tau)?;
        let k4 = self.derivative(&(q + &k3.0 * dt), &(v + &k3.1 * dt), tau)?;
        let w = dt / 6.0;
        let q_next = q + (&k1.0 + &k2.0 * 2.0 + &k3.0 * 2.0 + &k4.0) * w;
        let v_next = v + (&k1.1 + &k2.1 * 2.0 + &k3.1 * 2.0 + &k4.1) * w;
        let e = |i: usize| (k1.2[i] + 2.0 * k2.2[i] + 2.0 * k3.2[i] + k4.2[i]) * w;
        let next = EnergyLedger {
            actuator_work: ledger.actuator_work + e(0),
            env_work_on_robot: ledger.env_work_on_robot + e(1),
            friction_loss: ledger.friction_loss + e(2),
        };
        Ok((JointState { q: q_next, qdot: v_next }, next))
    }

    pub fn mechanical_energy(&self, state: &JointState) -> (f64, f64) {
        let f = frames(&self.chain, &state.q);
        let m = mass_matrix_from_frames(&self.chain, &f);
        (kinetic_energy(&m, &state.qdot), potential_energy(&self.chain, &state.q))
    }
}

/// Rotation log map as a rotation vector.
fn rotation_vector(r: &Mat3) -> Vec3 {
    let q = UnitQuaternion::from_rotation(r);
    let (w, v) = if q.w < 0.0 { (-q.w, -q.v) } else { (q.w, q.v) };
    let s = v.norm();
    if s < 1e-15 {
        return 2.0 * v;
    }
    v / s * (2.0 * s.atan2(w))
}

/// Solves for joint angles reaching `(r_t, p_t)` by Newton iteration on the
/// pseudoinverse, starting from `seed` and pulling the self-motion back toward it.
pub fn inverse_kinematics(chain: &KinematicChain, r_t: &Mat3, p_t: &Vec3, seed: &VecN) -> Result<VecN, SimError> {
    let n = chain.dof();
    let mut q = seed.clone();
    for _ in 0..500 {
        let f = frames(chain, &q);
        let dp = p_t - f.ee_pos;
        let dr = rotation_vector(&(r_t * f.ee_rot.transpose()));
        if dp.norm() < 1e-12 && dr.norm() < 1e-12 {
            return Ok(q);
        }
        let err = VecN::from_vec(vec![dp.x, dp.y, dp.z, dr.x, dr.y, dr.z]);
        let jac = jacobian(chain, &q);
        let jp = pseudoinverse(&jac).map_err(|e| SimError::InvalidConfig(format!("inverse kinematics: {e}")))?;
        let null = MatNN::identity(n, n) - &jp * &jac;
        let step = &jp * err + null * (seed - &q) * 0.5;
        let scale = (0.3 / step.amax()).min(1.0);
        q += step * scale;
    }
    Err(SimError::InvalidConfig("inverse kinematics did not converge for the initial placement".into()))
}

/// Joint state described by the initial condition.
pub fn initial_state(cfg: &ScenarioConfig) -> Result<JointState, SimError> {
    let n = cfg.chain.dof();
    let to_vec = |v: &Vec<f64>, what: &str| {
        if v.len() != n {
            Err(SimError::InvalidConfig(format!("initial {what} must have {n} entries")))
        } else {
            Ok(VecN::from_column_slice(v))
        }
    };
    let (q, qdot) = match &cfg.initial {
        InitialCondition::Joints { q, qdot } => (to_vec(q, "q")?, qdot.as_ref().map(|v| to_vec(v, "qdot")).transpose()?),
        InitialCondition::Placement { surface_point, clearance, tilt_deg, tilt_axis, yaw_deg, seed, qdot } => {
            let p = Vec3::from(*surface_point);
            let (normal, offset) = cfg.surface.normal_and_distance(&p);
            let on_surface = p - normal * offset;
            let base = cfg.surface.rotation();
            let z = base.column(2).into_owned();
            let axis = z.cross(&normal);
            let aligned = if axis.norm() < 1e-12 {
                base
            } else {
                axis_angle_rotation(&axis.normalize(), axis.norm().atan2(z.dot(&normal))) * base
            };
            let tilt_axis = Vec3::from(*tilt_axis);
            if (tilt_axis.norm() - 1.0).abs() > 1e-6 {
                return Err(SimError::InvalidConfig("tilt_axis must be a unit vector".into()));
            }
            let r_t = aligned
                * axis_angle_rotation(&Vec3::z(), yaw_deg.to_radians())
                * axis_angle_rotation(&tilt_axis, tilt_deg.to_radians());
            let center = on_surface + normal * (cfg.tool.r_r + clearance);
            let p_t = center - cfg.tool.r_off * r_t.column(2).into_owned();
            let q = inverse_kinematics(&cfg.chain, &r_t, &p_t, &to_vec(seed, "seed")?)?;
            (q, qdot.as_ref().map(|v| to_vec(v, "qdot")).transpose()?)
        }
    };
    if !cfg.chain.within_limits(&q) {
        return Err(SimError::InvalidConfig("initial posture violates joint limits".into()));
    }
    Ok(JointState { qdot: qdot.unwrap_or_else(|| VecN::zeros(n)), q })
}

/// One logged sample. Wrenches are on the end-effector, end-effector frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SimRecord {
    pub t: f64,
    pub q: VecN,
    pub qdot: VecN,
    pub ee_pos: Vec3,
    pub ee_quat: UnitQuaternion,
    pub v_e: Vec3,
    pub omega_e: Vec3,
    pub force: Vec3,
    pub torque: Vec3,
    pub force_meas: Vec3,
    pub torque_meas: Vec3,
    pub v_d: Vec3,
    pub f_dz: f64,
    pub e_v: Vec3,
    pub int_e_v: Vec3,
    pub s: VecN,
    /// Quaternion used by the rotational law (from the measured wrench).
    pub align: UnitQuaternion,
    pub q_hat: UnitQuaternion,
    pub q_hat_d: UnitQuaternion,
    /// The same alignment quaternion computed from the noise-free wrench.
    pub align_true: UnitQuaternion,
    /// Angle between the end-effector z axis and the outward surface normal.
    pub misalign_angle: f64,
    pub tau: VecN,
    pub in_contact: bool,
    pub penetration: f64,
    /// `F_envᵀ [v_e; ω_e]` with `F_env` the wrench the robot applies to the environment.
    pub power: f64,
    /// Time integral of `power` from the plant integrator.
    pub work: f64,
    pub kinetic: f64,
    pub potential: f64,
    pub actuator_work: f64,
    pub friction_loss: f64,
    pub aborted: bool,
}

/// Frozen CSV header for an `n`-joint chain.
pub fn csv_header(n: usize) -> Vec<String> {
    let mut h: Vec<String> = vec!["t".into()];
    let idx = |p: &str, h: &mut Vec<String>| (1..=n).for_each(|i| h.push(format!("{p}{i}")));
    let xyz = |p: &str, h: &mut Vec<String>| ["x", "y", "z"].iter().for_each(|a| h.push(format!("{p}_{a}")));
    let wxyz = |p: &str, h: &mut Vec<String>| ["w", "x", "y", "z"].iter().for_each(|a| h.push(format!("{p}_{a}")));
    idx("q", &mut h);
    idx("qd", &mut h);
    xyz("p", &mut h);
    wxyz("quat", &mut h);
    xyz("ve", &mut h);
    xyz("we", &mut h);
    xyz("f", &mut h);
    xyz("tau", &mut h);
    xyz("fm", &mut h);
    xyz("taum", &mut h);
    h.push("vd_x".into());
    h.push("vd_y".into());
    h.push("f_dz".into());
    xyz("ev", &mut h);
    xyz("iev", &mut h);
    idx("s", &mut h);
    wxyz("align", &mut h);
    wxyz("qhat", &mut h);
    wxyz("qhatd", &mut h);
    wxyz("align_true", &mut h);
    h.push("misalign".into());
    idx("tau_j", &mut h);
    for c in ["in_contact", "penetration", "power", "work", "kinetic", "potential", "actuator_work", "friction_loss", "status"] {
        h.push(c.into());
    }
    h
}

impl SimRecord {
    pub fn to_row(&self) -> Vec<String> {
        let mut r: Vec<f64> = vec![self.t];
        r.extend(self.q.iter());
        r.extend(self.qdot.iter());
        r.extend(self.ee_pos.iter());
        r.extend(self.ee_quat.to_array());
        for v in [&self.v_e, &self.omega_e, &self.force, &self.torque, &self.force_meas, &self.torque_meas] {
            r.extend(v.iter());
        }
        r.extend([self.v_d.x, self.v_d.y, self.f_dz]);
        r.extend(self.e_v.iter());
        r.extend(self.int_e_v.iter());
        r.extend(self.s.iter());
        for q in [&self.align, &self.q_hat, &self.q_hat_d, &self.align_true] {
            r.extend(q.to_array());
        }
        r.push(self.misalign_angle);
        r.extend(self.tau.iter());
        r.extend([
            if self.in_contact { 1.0 } else { 0.0 },
            self.penetration,
            self.power,
            self.work,
            self.kinetic,
            self.potential,
            self.actuator_work,
            self.friction_loss,
            if self.aborted { 1.0 } else { 0.0 },
        ]);
        r.iter().map(|x| x.to_string()).collect()
    }

    pub fn from_row(row: &[f64], n: usize) -> Result<Self, SimError> {
        if row.len() != csv_header(n).len() {
            return Err(SimError::InvalidConfig(format!("row has {} columns, expected {}", row.len(), csv_header(n).len())));
        }
        let mut i = 0;
        let mut take = |k: usize| {
            let s = &row[i..i + k];
            i += k;
            s.to_vec()
        };
        let v3 = |s: Vec<f64>| Vec3::new(s[0], s[1], s[2]);
        let quat = |s: Vec<f64>| UnitQuaternion { w: s[0], v: Vec3::new(s[1], s[2], s[3]) };
        let t = take(1)[0];
        let q = VecN::from_vec(take(n));
        let qdot = VecN::from_vec(take(n));
        let ee_pos = v3(take(3));
        let ee_quat = quat(take(4));
        let v_e = v3(take(3));
        let omega_e = v3(take(3));
        let force = v3(take(3));
        let torque = v3(take(3));
        let force_meas = v3(take(3));
        let torque_meas = v3(take(3));
        let vd = take(3);
        let e_v = v3(take(3));
        let int_e_v = v3(take(3));
        let s = VecN::from_vec(take(n));
        let align = quat(take(4));
        let q_hat = quat(take(4));
        let q_hat_d = quat(take(4));
        let align_true = quat(take(4));
        let misalign_angle = take(1)[0];
        let tau = VecN::from_vec(take(n));
        let tail = take(9);
        Ok(Self {
            t,
            q,
            qdot,
            ee_pos,
            ee_quat,
            v_e,
            omega_e,
            force,
            torque,
            force_meas,
            torque_meas,
            v_d: Vec3::new(vd[0], vd[1], 0.0),
            f_dz: vd[2],
            e_v,
            int_e_v,
            s,
            align,
            q_hat,
            q_hat_d,
            align_true,
            misalign_angle,
            tau,
            in_contact: tail[0] != 0.0,
            penetration: tail[1],
            power: tail[2],
            work: tail[3],
            kinetic: tail[4],
            potential: tail[5],
            actuator_work: tail[6],
            friction_loss: tail[7],
            aborted: tail[8] != 0.0,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbortInfo {
    pub t: f64,
    pub reason: String,
}

/// Sidecar metadata describing a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub format_version: u32,
    pub tool_version: String,
    pub scenario: String,
    pub seed: u64,
    pub rng: String,
    pub dt: f64,
    pub control_dt: f64,
    pub steps: usize,
    pub dof: usize,
    pub columns: Vec<String>,
    pub calibrated_bound: Option<UncertaintyBound>,
    pub contact_losses: Vec<f64>,
    pub first_steady_contact: Option<f64>,
    pub abort: Option<AbortInfo>,
    pub config: ScenarioConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimLog {
    pub records: Vec<SimRecord>,
    pub meta: RunMeta,
}

impl SimLog {
    pub fn dof(&self) -> usize {
        self.meta.dof
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), SimError> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(csv_header(self.meta.dof))?;
        for r in &self.records {
            wr.write_record(r.to_row())?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn write_meta<W: Write>(&self, w: W) -> Result<(), SimError> {
        serde_json::to_writer_pretty(w, &self.meta).map_err(|e| SimError::Io(e.into()))
    }

    /// Reads records written by [`SimLog::write_csv`].
    pub fn read_csv<R: Read>(r: R, n: usize) -> Result<Vec<SimRecord>, SimError> {
        let mut rd = csv::Reader::from_reader(r);
        let header: Vec<String> = rd.headers()?.iter().map(String::from).collect();
        if header != csv_header(n) {
            return Err(SimError::InvalidConfig("CSV header does not match the documented column order".into()));
        }
        let mut out = Vec::new();
        for rec in rd.records() {
            let rec = rec?;
            let vals = rec
                .iter()
                .map(|s| s.parse::<f64>().map_err(|e| SimError::InvalidConfig(format!("bad number {s:?}: {e}"))))
                .collect::<Result<Vec<_>, _>>()?;
            out.push(SimRecord::from_row(&vals, n)?);
        }
        Ok(out)
    }
}

/// Seconds of uninterrupted contact that count as steady contact.
const STEADY_CONTACT: f64 = 0.5;

/// Closed-loop simulation state.
pub struct Simulator {
    pub cfg: ScenarioConfig,
    pub plant: Plant,
    pub controller: Controller,
    sensor: SensorModel,
    pub state: JointState,
    pub ledger: EnergyLedger,
    step_index: usize,
    divider: usize,
    tau: VecN,
    last: Option<(ControlOutput, Vec6)>,
    contact_since: Option<f64>,
    pub first_steady_contact: Option<f64>,
    pub contact_losses: Vec<f64>,
    pub calibrated_bound: Option<UncertaintyBound>,
}

impl Simulator {
    pub fn new(cfg: ScenarioConfig) -> Result<Self, SimError> {
        cfg.validate()?;
        let state = initial_state(&cfg)?;
        let mut params = cfg.controller.clone();
        let mut calibrated_bound = None;
        if let Some(cal) = &cfg.calibration {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9E37_79B9_7F4A_7C15);
            let b = calibrate_uncertainty(&cfg.chain, cfg.friction.as_ref(), &cfg.model_errors, &state.q, &cal.settings, &mut rng)
                .map_err(|e| SimError::InvalidConfig(format!("calibration failed: {e}")))?
                .scaled(cal.margin);
            params.smc.b_d0 = b.b0;
            params.smc.b_d1 = b.b1;
            params.smc.b_d2 = b.b2;
            calibrated_bound = Some(b);
        }
        let controller = Controller::new(cfg.chain.clone(), cfg.model_errors.clone(), cfg.tool, params)
            .map_err(|e| SimError::InvalidConfig(e.to_string()))?;
        let plant = Plant {
            chain: cfg.chain.clone(),
            friction: cfg.friction.clone(),
            surface: Some(cfg.surface.clone()),
            env: cfg.env.clone(),
            tool: cfg.tool,
        };
        let sensor = SensorModel::new(&cfg.noise, cfg.filter_window, cfg.seed)?;
        let divider = cfg.control_divider()?;
        let n = cfg.chain.dof();
        Ok(Self {
            cfg,
            plant,
            controller,
            sensor,
            state,
            ledger: EnergyLedger::default(),
            step_index: 0,
            divider,
            tau: VecN::zeros(n),
            last: None,
            contact_since: None,
            first_steady_contact: None,
            contact_losses: Vec::new(),
            calibrated_bound,
        })
    }

    pub fn time(&self) -> f64 {
        self.step_index as f64 * self.cfg.dt
    }

    fn true_alignment(&self, w: &Wrench) -> UnitQuaternion {
        let ap = &self.controller.params.alignment;
        let id = UnitQuaternion::identity();
        match ap.mode {
            AlignmentMode::Frictionless => extract_alignment_frictionless(&w.torque, &w.force, &self.cfg.tool, ap).unwrap_or(id),
            AlignmentMode::Frictional => extract_alignment_frictional(&w.torque, &w.force, &self.cfg.tool, ap)
                .map(|a| a.error)
                .unwrap_or(id),
        }
    }

    fn track_contact(&mut self, t: f64, in_contact: bool) {
        if in_contact {
            let since = *self.contact_since.get_or_insert(t);
            if self.first_steady_contact.is_none() && t - since >= STEADY_CONTACT {
                self.first_steady_contact = Some(since);
            }
        } else {
            if self.first_steady_contact.is_some() && self.contact_since.is_some() {
                log::warn!("contact lost at t = {t:.4} s");
                self.contact_losses.push(t);
            }
            self.contact_since = None;
        }
    }

    /// Advances one plant step and returns the record for the state at the start of the step.
    pub fn step(&mut self) -> Result<SimRecord, SimError> {
        let t = self.time();
        let snap = self.plant.snapshot(&self.state);
        self.track_contact(t, snap.in_contact);
        let (v_d, v_d_dot, f_dz) = desired_profiles(&self.cfg, t);
        if self.step_index.is_multiple_of(self.divider) || self.last.is_none() {
            let truth = snap.wrench.to_vec6();
            let measured = self.sensor.measure(&truth);
            let qdot_meas = self.sensor.measure_velocity(&self.state.qdot);
            let meas_state = JointState { q: self.state.q.clone(), qdot: qdot_meas };
            let wrench = Wrench::from_vec6(&measured, Frame::EndEffector);
            let reference = Reference { v_d, v_d_dot, f_dz };
            let control_dt = self.cfg.dt * self.divider as f64;
            let out = self
                .controller
                .step(&meas_state, &wrench, &reference, control_dt)
                .map_err(|source| SimError::Control { t, source })?;
            self.tau = out.tau.clone();
            self.last = Some((out, measured));
        }
        let (out, measured) = self.last.clone().expect("control output computed above");
        let (kinetic, potential) = self.plant.mechanical_energy(&self.state);
        let r = snap.ee_rot;
        let v_e = r.transpose() * Vec3::new(snap.twist[0], snap.twist[1], snap.twist[2]);
        let omega_e = r.transpose() * Vec3::new(snap.twist[3], snap.twist[4], snap.twist[5]);
        let w = snap.wrench;
        let z_e = r.column(2).into_owned();
        let record = SimRecord {
            t,
            q: self.state.q.clone(),
            qdot: self.state.qdot.clone(),
            ee_pos: snap.ee_pos,
            ee_quat: UnitQuaternion::from_rotation(&r),
            v_e,
            omega_e,
            force: w.force,
            torque: w.torque,
            force_meas: Vec3::new(measured[0], measured[1], measured[2]),
            torque_meas: Vec3::new(measured[3], measured[4], measured[5]),
            v_d,
            f_dz,
            e_v: out.e_v,
            int_e_v: out.int_e_v,
            s: out.s.clone(),
            align: out.alignment,
            q_hat: out.q_hat,
            q_hat_d: out.q_hat_d,
            align_true: self.true_alignment(&w),
            misalign_angle: if snap.in_contact { z_e.dot(&snap.normal).clamp(-1.0, 1.0).acos() } else { f64::NAN },
            tau: self.tau.clone(),
            in_contact: snap.in_contact,
            penetration: snap.penetration,
            power: -(w.force.dot(&v_e) + w.torque.dot(&omega_e)),
            work: -self.ledger.env_work_on_robot,
            kinetic,
            potential,
            actuator_work: self.ledger.actuator_work,
            friction_loss: self.ledger.friction_loss,
            aborted: false,
        };
        let (next, ledger) = self
            .plant
            .rk4_step(&self.state, &self.ledger, &self.tau, self.cfg.dt)
            .map_err(|source| SimError::Plant { t, source })?;
        let t_next = t + self.cfg.dt;
        if next.q.iter().chain(next.qdot.iter()).any(|x| !x.is_finite()) {
            return Err(SimError::NonFinite { t: t_next });
        }
        if let Some(j) = (0..next.q.len()).find(|&j| {
            let lim = self.cfg.chain.joints[j].limits;
            next.q[j] < lim[0] || next.q[j] > lim[1]
        }) {
            return Err(SimError::JointLimit { t: t_next, joint: j });
        }
        self.state = next;
        self.ledger = ledger;
        self.step_index += 1;
        Ok(record)
    }

    fn meta(&self, abort: Option<AbortInfo>) -> RunMeta {
        RunMeta {
            format_version: 1,
            tool_version: env!("CARGO_PKG_VERSION").into(),
            scenario: self.cfg.name.clone(),
            seed: self.cfg.seed,
            rng: RNG_NAME.into(),
            dt: self.cfg.dt,
            control_dt: self.cfg.dt * self.divider as f64,
            steps: self.cfg.steps(),
            dof: self.cfg.chain.dof(),
            columns: csv_header(self.cfg.chain.dof()),
            calibrated_bound: self.calibrated_bound,
            contact_losses: self.contact_losses.clone(),
            first_steady_contact: self.first_steady_contact,
            abort,
            config: self.cfg.clone(),
        }
    }

    fn abort_record(&self, t: f64) -> SimRecord {
        let n = self.cfg.chain.dof();
        let nan3 = Vec3::from_element(f64::NAN);
        let nanq = UnitQuaternion { w: f64::NAN, v: nan3 };
        let (kinetic, potential) = if self.state.q.iter().all(|x| x.is_finite()) {
            self.plant.mechanical_energy(&self.state)
        } else {
            (f64::NAN, f64::NAN)
        };
        SimRecord {
            t,
            q: self.state.q.clone(),
            qdot: self.state.qdot.clone(),
            ee_pos: nan3,
            ee_quat: nanq,
            v_e: nan3,
            omega_e: nan3,
            force: nan3,
            torque: nan3,
            force_meas: nan3,
            torque_meas: nan3,
            v_d: nan3,
            f_dz: f64::NAN,
            e_v: nan3,
            int_e_v: nan3,
            s: VecN::from_element(n, f64::NAN),
            align: nanq,
            q_hat: nanq,
            q_hat_d: nanq,
            align_true: nanq,
            misalign_angle: f64::NAN,
            tau: self.tau.clone(),
            in_contact: false,
            penetration: f64::NAN,
            power: f64::NAN,
            work: -self.ledger.env_work_on_robot,
            kinetic,
            potential,
            actuator_work: self.ledger.actuator_work,
            friction_loss: self.ledger.friction_loss,
            aborted: true,
        }
    }
}

/// Runs a scenario to completion. On a step failure the error carries the
/// partial log, terminated by an abort record.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<SimLog, SimError> {
    let mut sim = Simulator::new(cfg.clone())?;
    let steps = cfg.steps();
    let mut records = Vec::with_capacity(steps / cfg.log_every + 1);
    for k in 0..steps {
        match sim.step() {
            Ok(rec) => {
                if k % cfg.log_every == 0 {
                    records.push(rec);
                }
            }
            Err(e) => {
                let t = e.time().unwrap_or(sim.time());
                log::error!("{e}");
                records.push(sim.abort_record(t));
                let meta = sim.meta(Some(AbortInfo { t, reason: e.to_string() }));
                return Err(SimError::Aborted { source: Box::new(e), log: Box::new(SimLog { records, meta }) });
            }
        }
    }
    let meta = sim.meta(None);
    Ok(SimLog { records, meta })
}

/// Classifies errors that stem from a near-singular Jacobian.
pub fn is_singularity(e: &SimError) -> bool {
    match e {
        SimError::Control { source: ControlError::Math(MathError::NearSingular(_)), .. } => true,
        SimError::Aborted { source, .. } => is_singularity(source),
        _ => false,
    }
}
