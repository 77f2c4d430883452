//! Post-hoc metrics over simulation logs.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controller::ImpedanceParams;
use crate::environment::EndToolGeometry;
use crate::simulator::{SimLog, SimRecord};
use crate::spatial::{diag3, skew, UnitQuaternion, Vec3};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("initial misalignment ‖q(0)‖ = {0:.4} is outside the basin ‖q‖ < 1/√2")]
    BasinViolation(f64),
    #[error("window [{0}, {1}] s contains no usable samples")]
    WindowOutOfRange(f64, f64),
    #[error("not enough samples to fit a decay rate")]
    TooFewSamples,
}

/// Trapezoidal integral of uniformly or non-uniformly sampled data.
pub fn trapezoid(t: &[f64], y: &[f64]) -> f64 {
    t.windows(2).zip(y.windows(2)).map(|(tt, yy)| 0.5 * (yy[0] + yy[1]) * (tt[1] - tt[0])).sum()
}

/// Running trapezoidal integral, starting at zero.
pub fn cumulative_trapezoid(t: &[f64], y: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(t.len());
    let mut acc = 0.0;
    for i in 0..t.len() {
        if i > 0 {
            acc += 0.5 * (y[i] + y[i - 1]) * (t[i] - t[i - 1]);
        }
        out.push(acc);
    }
    out
}

/// Least-squares slope of `y` against `t`.
pub fn linear_slope(t: &[f64], y: &[f64]) -> f64 {
    let n = t.len() as f64;
    if t.len() < 2 {
        return 0.0;
    }
    let tm = t.iter().sum::<f64>() / n;
    let ym = y.iter().sum::<f64>() / n;
    let num: f64 = t.iter().zip(y).map(|(a, b)| (a - tm) * (b - ym)).sum();
    let den: f64 = t.iter().map(|a| (a - tm).powi(2)).sum();
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Running `W(t)` and `W_excess(t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkSeries {
    pub t: Vec<f64>,
    pub w: Vec<f64>,
    pub w_excess: Vec<f64>,
    /// Running `∫ b_e ‖v_d‖² dt`.
    pub essential: Vec<f64>,
}

fn usable(records: &[SimRecord]) -> impl Iterator<Item = &SimRecord> {
    records.iter().filter(|r| !r.aborted)
}

pub fn work_series(records: &[SimRecord], b_e: f64) -> WorkSeries {
    let t: Vec<f64> = usable(records).map(|r| r.t).collect();
    let p: Vec<f64> = usable(records).map(|r| r.power).collect();
    let d: Vec<f64> = usable(records).map(|r| b_e * r.v_d.norm_squared()).collect();
    let w = cumulative_trapezoid(&t, &p);
    let essential = cumulative_trapezoid(&t, &d);
    let w_excess = w.iter().zip(&essential).map(|(a, b)| a - b).collect();
    WorkSeries { t, w, w_excess, essential }
}

/// `W = ∫F_envᵀ[v_e; ω_e]dt` and `W_excess = W − ∫ b_e‖v_d‖² dt`.
pub fn work_integrals(records: &[SimRecord], b_e: f64) -> (f64, f64) {
    let s = work_series(records, b_e);
    (s.w.last().copied().unwrap_or(0.0), s.w_excess.last().copied().unwrap_or(0.0))
}

/// Misalignment angle from the contact wrench, clamped arcsin.
pub fn misalignment_angle(force: &Vec3, torque: &Vec3, r_off: f64) -> f64 {
    (torque.norm() / (force.norm() * r_off)).clamp(0.0, 1.0).asin()
}

/// Equivalent lever `√(τ_x² + τ_y²)/|F_z|` (m).
pub fn equivalent_lever(force: &Vec3, torque: &Vec3) -> f64 {
    torque.xy().norm() / force.z.abs()
}

/// Per-sample `θ_m` and `r_tan` from the true contact wrench; `NaN` off contact.
pub fn misalignment_metrics(records: &[SimRecord], tool: &EndToolGeometry) -> (Vec<f64>, Vec<f64>) {
    records
        .iter()
        .map(|r| {
            if r.in_contact && !r.aborted {
                (misalignment_angle(&r.force, &r.torque, tool.r_off), equivalent_lever(&r.force, &r.torque))
            } else {
                (f64::NAN, f64::NAN)
            }
        })
        .unzip()
}

/// `V_ω = qᵀq + (q0 − 1)² + rᵀ I_d r` with `r = ω + K₁ q`.
pub fn v_omega(q: &UnitQuaternion, omega: &Vec3, ip: &ImpedanceParams) -> f64 {
    let r = omega + diag3(ip.k1) * q.v;
    q.v.norm_squared() + (q.w - 1.0).powi(2) + r.dot(&(diag3(ip.i_d) * r))
}

/// Samples of the isolated rotational target dynamics.
#[derive(Debug, Clone, PartialEq)]
pub struct RotationTrace {
    pub t: Vec<f64>,
    pub q: Vec<UnitQuaternion>,
    pub omega: Vec<Vec3>,
}

fn rotation_rhs(ip: &ImpedanceParams, q: &UnitQuaternion, w: &Vec3) -> (f64, Vec3, Vec3) {
    let (i_d, k1, p) = (diag3(ip.i_d), diag3(ip.k1), diag3(ip.p_bar));
    let tau_a = -(p * k1 + nalgebra::Matrix3::identity()) * q.v;
    let b = 0.5 * (q.w * i_d * k1 + 2.0 * p + skew(&q.v));
    let w_dot = (tau_a - b * w).component_div(&Vec3::from(ip.i_d));
    (-0.5 * w.dot(&q.v), 0.5 * (q.w * w + q.v.cross(w)), w_dot)
}

/// Integrates `I_d ω̇ + B_ω ω = τ_a` with the quaternion kinematics by RK4,
/// renormalizing the quaternion after every step.
pub fn simulate_isolated_rotation(ip: &ImpedanceParams, q0: UnitQuaternion, omega0: Vec3, dt: f64, duration: f64) -> RotationTrace {
    let steps = (duration / dt).round() as usize;
    let mut tr = RotationTrace { t: vec![0.0], q: vec![q0], omega: vec![omega0] };
    let (mut q, mut w) = (q0, omega0);
    let add = |q: &UnitQuaternion, k: &(f64, Vec3, Vec3), h: f64| UnitQuaternion { w: q.w + k.0 * h, v: q.v + k.1 * h };
    for i in 1..=steps {
        let k1 = rotation_rhs(ip, &q, &w);
        let k2 = rotation_rhs(ip, &add(&q, &k1, 0.5 * dt), &(w + k1.2 * 0.5 * dt));
        let k3 = rotation_rhs(ip, &add(&q, &k2, 0.5 * dt), &(w + k2.2 * 0.5 * dt));
        let k4 = rotation_rhs(ip, &add(&q, &k3, dt), &(w + k3.2 * dt));
        let s = dt / 6.0;
        let raw = UnitQuaternion {
            w: q.w + (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0) * s,
            v: q.v + (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1) * s,
        };
        q = raw.renormalized().unwrap_or(raw);
        w += (k1.2 + 2.0 * k2.2 + 2.0 * k3.2 + k4.2) * s;
        tr.t.push(i as f64 * dt);
        tr.q.push(q);
        tr.omega.push(w);
    }
    tr
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    /// Fitted rate `−d ln V_ω / dt`.
    pub gamma_hat: f64,
    /// Guaranteed rate from the gain matrices.
    pub gamma_theory: f64,
    /// Largest ratio `V_ω(t) / (V_ω(0) e^{−γ t})` over the trace.
    pub envelope_ratio: f64,
    pub samples: usize,
}

/// Fits the exponential decay rate of `V_ω` along a rotation trace.
pub fn lyapunov_decay(tr: &RotationTrace, ip: &ImpedanceParams) -> Result<DecayFit, AnalysisError> {
    let q0 = tr.q.first().ok_or(AnalysisError::TooFewSamples)?;
    if q0.v.norm() >= std::f64::consts::FRAC_1_SQRT_2 {
        return Err(AnalysisError::BasinViolation(q0.v.norm()));
    }
    let gamma_theory = ip.rotational_decay_rate();
    let v: Vec<f64> = tr.q.iter().zip(&tr.omega).map(|(q, w)| v_omega(q, w, ip)).collect();
    let v0 = v[0];
    // Fit over the leading stretch where V_ω keeps falling and stays above the numerical floor.
    let mut end = 0;
    while end + 1 < v.len() && v[end + 1] > 1e-10 && v[end + 1] <= v[end] {
        end += 1;
    }
    if end < 2 {
        return Err(AnalysisError::TooFewSamples);
    }
    let t = &tr.t[..=end];
    let lv: Vec<f64> = v[..=end].iter().map(|x| x.ln()).collect();
    let envelope_ratio = if v0 > 0.0 {
        tr.t.iter().zip(&v).map(|(t, x)| x / (v0 * (-gamma_theory * t).exp())).fold(0.0, f64::max)
    } else {
        0.0
    };
    Ok(DecayFit { gamma_hat: -linear_slope(t, &lv), gamma_theory, envelope_ratio, samples: end + 1 })
}

/// Max-abs and RMS error statistics over a time window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SteadyState {
    pub window: [f64; 2],
    pub force_err_max: f64,
    pub force_err_rms: f64,
    /// Tangential velocity error (cm/s).
    pub vel_err_max: f64,
    pub vel_err_rms: f64,
    /// Tangential position error `‖∫e_v‖` (cm).
    pub pos_err_max: f64,
    pub pos_err_rms: f64,
    /// Norm of the vector part of the alignment quaternion (true wrench).
    pub quat_err_max: f64,
    pub quat_err_rms: f64,
    pub samples: usize,
}

fn max_rms(x: &[f64]) -> (f64, f64) {
    let max = x.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt();
    (max, rms)
}

pub fn steady_state_metrics(records: &[SimRecord], window: [f64; 2]) -> Result<SteadyState, AnalysisError> {
    let sel: Vec<&SimRecord> = usable(records).filter(|r| r.t >= window[0] && r.t <= window[1]).collect();
    if sel.is_empty() || window[1] < window[0] {
        return Err(AnalysisError::WindowOutOfRange(window[0], window[1]));
    }
    let f: Vec<f64> = sel.iter().map(|r| r.force.z - r.f_dz).collect();
    let v: Vec<f64> = sel.iter().map(|r| 100.0 * r.e_v.xy().norm()).collect();
    let p: Vec<f64> = sel.iter().map(|r| 100.0 * r.int_e_v.xy().norm()).collect();
    let q: Vec<f64> = sel.iter().map(|r| r.align_true.v.norm()).collect();
    let (force_err_max, force_err_rms) = max_rms(&f);
    let (vel_err_max, vel_err_rms) = max_rms(&v);
    let (pos_err_max, pos_err_rms) = max_rms(&p);
    let (quat_err_max, quat_err_rms) = max_rms(&q);
    Ok(SteadyState {
        window,
        force_err_max,
        force_err_rms,
        vel_err_max,
        vel_err_rms,
        pos_err_max,
        pos_err_rms,
        quat_err_max,
        quat_err_rms,
        samples: sel.len(),
    })
}

/// First time `‖S‖` drops below `threshold` and the largest `‖S‖` afterwards.
pub fn reaching_time(records: &[SimRecord], threshold: f64) -> Option<(f64, f64)> {
    let rs: Vec<&SimRecord> = usable(records).collect();
    let k = rs.iter().position(|r| r.s.norm() < threshold)?;
    let after = rs[k..].iter().map(|r| r.s.norm()).fold(0.0, f64::max);
    Some((rs[k].t, after))
}

/// Metrics written next to every run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scenario: String,
    pub w: f64,
    pub w_excess: f64,
    /// Largest running `W_excess(t)`: the reported passivity bound `c`.
    pub w_excess_bound: f64,
    pub essential_dissipation: f64,
    pub w_tail_slope: f64,
    pub w_excess_tail_slope: f64,
    pub reaching_time: Option<f64>,
    pub steady: Option<SteadyState>,
    pub terminal_align_norm: f64,
    pub terminal_theta_m: f64,
    pub terminal_r_tan: f64,
    pub contact_losses: usize,
    pub gamma_theory: f64,
    pub aborted: bool,
}

fn tail_slope(t: &[f64], y: &[f64], window: [f64; 2]) -> f64 {
    let (tt, yy): (Vec<f64>, Vec<f64>) =
        t.iter().zip(y).filter(|(t, _)| **t >= window[0] && **t <= window[1]).map(|(a, b)| (*a, *b)).unzip();
    linear_slope(&tt, &yy)
}

pub fn metrics_report(log: &SimLog) -> MetricsReport {
    let cfg = &log.meta.config;
    let recs = &log.records;
    let ws = work_series(recs, cfg.env.b_e);
    let (theta, r_tan) = misalignment_metrics(recs, &cfg.tool);
    let last = usable(recs).last();
    MetricsReport {
        scenario: cfg.name.clone(),
        w: ws.w.last().copied().unwrap_or(0.0),
        w_excess: ws.w_excess.last().copied().unwrap_or(0.0),
        w_excess_bound: ws.w_excess.iter().cloned().fold(0.0, f64::max),
        essential_dissipation: ws.essential.last().copied().unwrap_or(0.0),
        w_tail_slope: tail_slope(&ws.t, &ws.w, cfg.analysis.tail),
        w_excess_tail_slope: tail_slope(&ws.t, &ws.w_excess, cfg.analysis.tail),
        reaching_time: reaching_time(recs, 1e-3).map(|r| r.0),
        steady: steady_state_metrics(recs, cfg.analysis.steady).ok(),
        terminal_align_norm: last.map(|r| r.align_true.v.norm()).unwrap_or(f64::NAN),
        terminal_theta_m: theta.iter().rev().find(|x| !x.is_nan()).copied().unwrap_or(f64::NAN),
        terminal_r_tan: r_tan.iter().rev().find(|x| !x.is_nan()).copied().unwrap_or(f64::NAN),
        contact_losses: log.meta.contact_losses.len(),
        gamma_theory: cfg.controller.impedance.rotational_decay_rate(),
        aborted: log.meta.abort.is_some(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::robot::VecN;
    use crate::spatial::quat_from_axis_angle;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn blank(t: f64) -> SimRecord {
        let z = Vec3::zeros();
        let id = UnitQuaternion::identity();
        SimRecord {
            t,
            q: VecN::zeros(7),
            qdot: VecN::zeros(7),
            ee_pos: z,
            ee_quat: id,
            v_e: z,
            omega_e: z,
            force: z,
            torque: z,
            force_meas: z,
            torque_meas: z,
            v_d: z,
            f_dz: 0.0,
            e_v: z,
            int_e_v: z,
            s: VecN::zeros(7),
            align: id,
            q_hat: id,
            q_hat_d: id,
            align_true: id,
            misalign_angle: 0.0,
            tau: VecN::zeros(7),
            in_contact: true,
            penetration: 0.0,
            power: 0.0,
            work: 0.0,
            kinetic: 0.0,
            potential: 0.0,
            actuator_work: 0.0,
            friction_loss: 0.0,
            aborted: false,
        }
    }

    fn log_of(n: usize, dt: f64, f: impl Fn(&mut SimRecord)) -> Vec<SimRecord> {
        (0..n)
            .map(|i| {
                let mut r = blank(i as f64 * dt);
                f(&mut r);
                r
            })
            .collect()
    }

    #[test]
    fn work_cases() {
        let recs = log_of(101, 0.1, |_| {});
        assert_eq!(work_integrals(&recs, 100.0), (0.0, 0.0));
        // Robot pushes 1 N on the environment while moving 1 cm/s against the reaction.
        let recs = log_of(1001, 0.01, |r| {
            r.force = Vec3::new(0.0, 0.0, -1.0);
            r.v_e = Vec3::new(0.0, 0.0, 0.01);
            r.power = -(r.force.dot(&r.v_e));
        });
        let (w, we) = work_integrals(&recs, 0.0);
        assert_relative_eq!(w, 0.1, epsilon = 1e-12);
        assert_eq!(w, we);
        let recs = log_of(101, 0.1, |r| r.v_d = Vec3::new(0.015, 0.0, 0.0));
        let (w, we) = work_integrals(&recs, 100.0);
        assert_eq!(w, 0.0);
        assert_relative_eq!(we, -100.0 * 0.015f64.powi(2) * 10.0, epsilon = 1e-12);
    }

    #[test]
    fn misalignment_cases() {
        let f = Vec3::new(0.0, 0.0, 10.0);
        assert_eq!(misalignment_angle(&f, &Vec3::zeros(), 0.03), 0.0);
        assert_eq!(equivalent_lever(&f, &Vec3::zeros()), 0.0);
        assert_relative_eq!(equivalent_lever(&f, &Vec3::new(0.01, 0.0, 0.0)), 1e-3, epsilon = 1e-15);
        assert_relative_eq!(misalignment_angle(&f, &Vec3::new(0.3, 0.0, 0.0), 0.03), std::f64::consts::FRAC_PI_2);
    }

    #[test]
    fn alignment_quaternion_encodes_the_angle() {
        use crate::controller::{extract_alignment_frictionless, AlignmentParams};
        let tool = EndToolGeometry { r_off: 0.03, r_r: 0.06 };
        let ap = AlignmentParams::default();
        for k in 1..50 {
            let f = Vec3::new(0.1 * k as f64, -0.05, 8.0);
            let tau = Vec3::new(0.004 * k as f64, 0.001, 0.0);
            let q = extract_alignment_frictionless(&tau, &f, &tool, &ap).unwrap();
            let theta = misalignment_angle(&f, &tau, tool.r_off);
            assert_relative_eq!(theta, 2.0 * q.v.norm().asin(), epsilon = 1e-9);
        }
    }

    #[test]
    fn decay_rate_and_basin() {
        let ip = ImpedanceParams::default();
        assert_relative_eq!(ip.rotational_decay_rate(), 2.0);
        let eq = simulate_isolated_rotation(&ip, UnitQuaternion::identity(), Vec3::zeros(), 1e-3, 1.0);
        assert!(eq.q.iter().zip(&eq.omega).all(|(q, w)| v_omega(q, w, &ip) == 0.0));
        let q0 = UnitQuaternion::new((1.0f64 - 0.01).sqrt(), 0.1, 0.0, 0.0).unwrap();
        let tr = simulate_isolated_rotation(&ip, q0, Vec3::zeros(), 1e-3, 3.0);
        let fit = lyapunov_decay(&tr, &ip).unwrap();
        assert!(fit.gamma_hat >= 2.0, "{fit:?}");
        let far = quat_from_axis_angle(&Vec3::x(), 1.7).unwrap();
        let tr = simulate_isolated_rotation(&ip, far, Vec3::zeros(), 1e-3, 0.1);
        assert!(matches!(lyapunov_decay(&tr, &ip), Err(AnalysisError::BasinViolation(_))));
    }

    #[test]
    fn steady_state_cases() {
        let recs = log_of(100, 0.1, |_| {});
        let s = steady_state_metrics(&recs, [2.0, 8.0]).unwrap();
        assert_eq!((s.force_err_max, s.vel_err_max, s.pos_err_max, s.quat_err_max), (0.0, 0.0, 0.0, 0.0));
        let recs = log_of(100, 0.1, |r| {
            r.f_dz = 10.0;
            r.force.z = 10.3;
        });
        let s = steady_state_metrics(&recs, [2.0, 8.0]).unwrap();
        assert_relative_eq!(s.force_err_max, 0.3, epsilon = 1e-12);
        assert!(matches!(steady_state_metrics(&recs, [20.0, 30.0]), Err(AnalysisError::WindowOutOfRange(..))));
    }

    #[test]
    fn reaching_time_finds_first_crossing() {
        let recs = log_of(100, 0.01, |r| r.s = VecN::from_element(7, (1.0 - r.t).max(0.0) * 0.01));
        let (t1, after) = reaching_time(&recs, 1e-3).unwrap();
        assert!(t1 > 0.95 && t1 < 0.98);
        assert!(after < 1e-3);
    }

    proptest! {
        #[test]
        fn halving_sample_interval_barely_changes_work(a in 0.1f64..2.0, w in 0.5f64..5.0) {
            let make = |dt: f64, n: usize| log_of(n, dt, |r| r.power = a * (w * r.t).sin().powi(2) + 0.1);
            let w1 = work_integrals(&make(0.01, 1001), 0.0).0;
            let w2 = work_integrals(&make(0.005, 2001), 0.0).0;
            prop_assert!(((w1 - w2) / w2).abs() < 1e-3);
        }
    }
}
