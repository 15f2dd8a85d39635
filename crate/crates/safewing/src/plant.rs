//! Nonlinear aeroelastic typical-section plant.
//!
//! Two-degree-of-freedom wing section (plunge + pitch) with polynomial
//! hardening pitch stiffness, quasi-steady aerodynamics linear in the
//! effective angle of attack and flap deflection, and a first-order
//! low-pass flap actuator. The only control path into the airframe is the
//! flap state, so accelerations are affine in the actuator deflection.
//!
//! Discretizations provided:
//! * [`step_euler`] — one-step forward Euler at the sampling time `T`
//!   (the actuator channel uses the exact discrete low-pass law, which for
//!   this model coincides with forward Euler bit for bit),
//! * [`step_taylor2`] — the two-step prediction `x + 2T f + T² (∇ₓf) f`,
//!   which matches two composed Euler steps up to third-order terms in `T`,
//! * [`rk4_step`] / [`rk4_refined`] — the reference integrator used as
//!   ground truth by the model validation paths.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::float::Float;
use crate::linalg::{self, Mat5, Vec5, STATE_DIM};
use crate::state::{ControlInput, Disturbance, InputBox, WingState};

/// Physical and numerical parameters of the wing section.
///
/// Field names match `plant.toml` exactly; that file is the authoritative
/// parameter ledger for the shipped configuration.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantParams<T> {
    /// Section mass per unit span (kg).
    pub mass: T,
    /// Static unbalance S = m x_a b coupling plunge and pitch (kg·m).
    pub static_unbalance: T,
    /// Pitch moment of inertia about the elastic axis (kg·m²).
    pub pitch_inertia: T,
    /// Plunge structural damping (kg/s).
    pub plunge_damping: T,
    /// Pitch structural damping (kg·m²/s).
    pub pitch_damping: T,
    /// Plunge stiffness (N/m).
    pub plunge_stiffness: T,
    /// Constant term of the hardening pitch stiffness k(θ) = k0 + k2 θ² (N·m/rad).
    pub pitch_stiffness_0: T,
    /// Quadratic hardening coefficient (N·m/rad³).
    pub pitch_stiffness_2: T,
    /// Air density (kg/m³).
    pub air_density: T,
    /// Free-stream airspeed V (m/s).
    pub airspeed: T,
    /// Semichord b (m).
    pub semichord: T,
    /// Dimensionless aerodynamic center offset in the pitch-rate term of α_eff.
    pub a_offset: T,
    /// Lift slope w.r.t. effective angle of attack (1/rad).
    pub lift_slope_alpha: T,
    /// Lift slope w.r.t. flap deflection (1/rad).
    pub lift_slope_flap: T,
    /// Moment slope w.r.t. effective angle of attack (1/rad).
    pub moment_slope_alpha: T,
    /// Moment slope w.r.t. flap deflection (1/rad).
    pub moment_slope_flap: T,
    /// Actuator low-pass gain λ (1/s); time constant 1/λ.
    pub actuator_gain: T,
    /// Sampling time T (s).
    pub sample_time: T,
}

impl<T: Float> PlantParams<T> {
    /// Validate the structural invariants: positive timing constants,
    /// T·λ < 1 (convex actuator update), and a non-singular mass matrix.
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.mass,
            self.static_unbalance,
            self.pitch_inertia,
            self.plunge_damping,
            self.pitch_damping,
            self.plunge_stiffness,
            self.pitch_stiffness_0,
            self.pitch_stiffness_2,
            self.air_density,
            self.airspeed,
            self.semichord,
            self.a_offset,
            self.lift_slope_alpha,
            self.lift_slope_flap,
            self.moment_slope_alpha,
            self.moment_slope_flap,
            self.actuator_gain,
            self.sample_time,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("plant parameters"));
        }
        if self.sample_time <= T::zero() {
            return Err(Error::config("sample_time must be positive"));
        }
        if self.actuator_gain <= T::zero() {
            return Err(Error::config("actuator_gain must be positive"));
        }
        if self.sample_time * self.actuator_gain >= T::one() {
            return Err(Error::config(
                "sample_time * actuator_gain must be < 1 for a convex actuator update",
            ));
        }
        if self.airspeed <= T::zero() {
            return Err(Error::config("airspeed must be positive"));
        }
        if self.semichord <= T::zero() {
            return Err(Error::config("semichord must be positive"));
        }
        let det = self.mass * self.pitch_inertia - self.static_unbalance * self.static_unbalance;
        if det.abs() < T::of(1e-12) {
            return Err(Error::config("singular inertia matrix: m*I_a - S^2 ~ 0"));
        }
        Ok(())
    }

    /// Parse from a TOML string.
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let p: PlantParams<T> = toml::from_str(s).map_err(|e| Error::Toml(e.to_string()))?;
        p.validate()?;
        Ok(p)
    }

    /// Load from a TOML file.
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let s = std::fs::read_to_string(path)?;
        Self::from_toml_str(&s)
    }

    /// The shipped default section, embedded from `configs/plant.toml`.
    pub fn default_section() -> Self {
        Self::from_toml_str(include_str!(concat!(
            env!("CARGO_MANIFEST_DIR"),
            "/../../configs/plant.toml"
        )))
        .expect("shipped plant.toml is valid")
    }
}

/// Effective aeroelastic angle of attack (rad).
///
/// `atan((V sinθ − w) / (V cosθ)) + v_h/V + a_offset · b · v_θ / V`
pub fn alpha_eff<T: Float>(x: &WingState<T>, w: Disturbance<T>, p: &PlantParams<T>) -> Result<T> {
    if !x.is_finite() || !w.0.is_finite() {
        return Err(Error::NonFinite("alpha_eff input"));
    }
    Ok(alpha_eff_raw(x, w.0, p))
}

#[inline]
fn alpha_eff_raw<T: Float>(x: &WingState<T>, w: T, p: &PlantParams<T>) -> T {
    let v = p.airspeed;
    let gust_term = ((v * x.theta.sin() - w) / (v * x.theta.cos())).atan();
    gust_term + x.v_h / v + p.a_offset * p.semichord * x.v_theta / v
}

/// Continuous-time state derivative.
///
/// Returns `[v_h, v_θ, a_h, a_θ, λ(u − β_f)]` where the accelerations come
/// from the 2-DOF section equations
///
/// ```text
/// m  ḧ + S θ̈ + c_h ḣ + k_h h          = −L
/// S  ḧ + I θ̈ + c_θ θ̇ + k(θ) θ         =  M
/// L = ρ V² b  (c_lα α_eff + c_lβ β_f)
/// M = ρ V² b² (c_mα α_eff + c_mβ β_f)
/// ```
pub fn deriv<T: Float>(
    x: &WingState<T>,
    u: ControlInput<T>,
    w: Disturbance<T>,
    p: &PlantParams<T>,
) -> Result<Vec5<T>> {
    if !x.is_finite() || !u.0.is_finite() || !w.0.is_finite() {
        return Err(Error::NonFinite("deriv input"));
    }
    Ok(deriv_raw(x, u.0, w.0, p))
}

#[inline]
pub(crate) fn deriv_raw<T: Float>(x: &WingState<T>, u: T, w: T, p: &PlantParams<T>) -> Vec5<T> {
    let alpha = alpha_eff_raw(x, w, p);
    let q = p.air_density * p.airspeed * p.airspeed * p.semichord;
    let lift = q * (p.lift_slope_alpha * alpha + p.lift_slope_flap * x.beta_f);
    let moment = q * p.semichord * (p.moment_slope_alpha * alpha + p.moment_slope_flap * x.beta_f);

    let k_theta = p.pitch_stiffness_0 + p.pitch_stiffness_2 * x.theta * x.theta;
    let rhs_h = -p.plunge_damping * x.v_h - p.plunge_stiffness * x.h - lift;
    let rhs_t = -p.pitch_damping * x.v_theta - k_theta * x.theta + moment;

    // Invert the 2x2 inertia matrix [[m, S], [S, I]].
    let det = p.mass * p.pitch_inertia - p.static_unbalance * p.static_unbalance;
    let a_h = (p.pitch_inertia * rhs_h - p.static_unbalance * rhs_t) / det;
    let a_t = (p.mass * rhs_t - p.static_unbalance * rhs_h) / det;

    [x.v_h, x.v_theta, a_h, a_t, p.actuator_gain * (u - x.beta_f)]
}

/// Exact discrete actuator law: `(1 − Tλ) β + Tλ u`.
///
/// Requires `Tλ < 1` ([`PlantParams::validate`]); the result is then a convex
/// combination of `beta` and `u`.
pub fn actuator_step<T: Float>(beta: T, u: ControlInput<T>, p: &PlantParams<T>) -> T {
    let a = p.sample_time * p.actuator_gain;
    (T::one() - a) * beta + a * u.0
}

/// One-step forward Euler update at the sampling time.
pub fn step_euler<T: Float>(
    x: &WingState<T>,
    u: ControlInput<T>,
    w: Disturbance<T>,
    p: &PlantParams<T>,
) -> Result<WingState<T>> {
    let f = deriv(x, u, w, p)?;
    Ok(step_euler_from_deriv(x, u, &f, p))
}

#[inline]
fn step_euler_from_deriv<T: Float>(
    x: &WingState<T>,
    u: ControlInput<T>,
    f: &Vec5<T>,
    p: &PlantParams<T>,
) -> WingState<T> {
    let t = p.sample_time;
    WingState {
        h: x.h + t * f[0],
        theta: x.theta + t * f[1],
        v_h: x.v_h + t * f[2],
        v_theta: x.v_theta + t * f[3],
        beta_f: actuator_step(x.beta_f, u, p),
    }
}

/// Jacobian ∂f/∂x by central finite differences with perturbation
/// `1e-6 · (1 + |x_j|)` per component.
pub fn deriv_jacobian_x<T: Float>(
    x: &WingState<T>,
    u: ControlInput<T>,
    w: Disturbance<T>,
    p: &PlantParams<T>,
) -> Result<Mat5<T>> {
    if !x.is_finite() || !u.0.is_finite() || !w.0.is_finite() {
        return Err(Error::NonFinite("jacobian input"));
    }
    let base = x.to_array();
    let mut jac = linalg::mat_zeros::<T>();
    for j in 0..STATE_DIM {
        let hj = T::of(1e-6) * (T::one() + base[j].abs());
        let mut xp = base;
        let mut xm = base;
        xp[j] += hj;
        xm[j] -= hj;
        let fp = deriv_raw(&WingState::from_array(xp), u.0, w.0, p);
        let fm = deriv_raw(&WingState::from_array(xm), u.0, w.0, p);
        for i in 0..STATE_DIM {
            jac[i][j] = (fp[i] - fm[i]) / (T::of(2.0) * hj);
        }
    }
    Ok(jac)
}

/// Two-step prediction `x(k+2) ≈ x + 2T f + T² (∇ₓ f) f`.
///
/// The commanded input and the disturbance are held over the horizon, so the
/// feedback Jacobians in the general expansion vanish. Up to third-order
/// terms in `T` this equals two composed [`step_euler`] applications.
pub fn step_taylor2<T: Float>(
    x: &WingState<T>,
    u: ControlInput<T>,
    w: Disturbance<T>,
    p: &PlantParams<T>,
) -> Result<WingState<T>> {
    let f = deriv(x, u, w, p)?;
    let jac = deriv_jacobian_x(x, u, w, p)?;
    let jf = linalg::matvec(&jac, &f);
    let t = p.sample_time;
    let two_t = t + t;
    let xa = x.to_array();
    let next = std::array::from_fn(|i| xa[i] + two_t * f[i] + t * t * jf[i]);
    Ok(WingState::from_array(next))
}

/// One classical RK4 step of length `dt`, holding `u` and `w`.
pub fn rk4_step<T: Float>(
    x: &WingState<T>,
    u: ControlInput<T>,
    w: Disturbance<T>,
    p: &PlantParams<T>,
    dt: T,
) -> Result<WingState<T>> {
    if !x.is_finite() || !u.0.is_finite() || !w.0.is_finite() {
        return Err(Error::NonFinite("rk4 input"));
    }
    let xa = x.to_array();
    let k1 = deriv_raw(x, u.0, w.0, p);
    let half = dt / T::of(2.0);
    let k2 = deriv_raw(&WingState::from_array(linalg::axpy(&xa, half, &k1)), u.0, w.0, p);
    let k3 = deriv_raw(&WingState::from_array(linalg::axpy(&xa, half, &k2)), u.0, w.0, p);
    let k4 = deriv_raw(&WingState::from_array(linalg::axpy(&xa, dt, &k3)), u.0, w.0, p);
    let sixth = dt / T::of(6.0);
    let next = std::array::from_fn(|i| {
        xa[i] + sixth * (k1[i] + T::of(2.0) * (k2[i] + k3[i]) + k4[i])
    });
    Ok(WingState::from_array(next))
}

/// Integrate `total` seconds with `n_sub` RK4 substeps, holding `u` and `w`.
/// The ground-truth oracle for order-of-accuracy and LPV validation runs.
pub fn rk4_refined<T: Float>(
    x: &WingState<T>,
    u: ControlInput<T>,
    w: Disturbance<T>,
    p: &PlantParams<T>,
    total: T,
    n_sub: usize,
) -> Result<WingState<T>> {
    let dt = total / T::from_usize(n_sub).unwrap();
    let mut cur = *x;
    for _ in 0..n_sub {
        cur = rk4_step(&cur, u, w, p, dt)?;
    }
    Ok(cur)
}

/// Reference update over `n_steps` sampling periods: RK4 for the airframe
/// states, the exact discrete convex law for the actuator.
///
/// The flap actuator is defined by its discrete update (λT = 0.125 per step
/// is not small, so the exponential and convex laws differ by over a percent
/// of the command gap); the airframe reference is the integrated continuous
/// dynamics under that actuator trajectory.
pub fn reference_steps<T: Float>(
    x: &WingState<T>,
    u: ControlInput<T>,
    w: Disturbance<T>,
    p: &PlantParams<T>,
    n_steps: usize,
    n_sub_per_step: usize,
) -> Result<WingState<T>> {
    let mut cur = *x;
    for _ in 0..n_steps {
        let mut fine = rk4_refined(&cur, u, w, p, p.sample_time, n_sub_per_step)?;
        fine.beta_f = actuator_step(cur.beta_f, u, p);
        cur = fine;
    }
    Ok(cur)
}

/// Episode abort record: the controller emitted an unusable input.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Abort<T> {
    pub step: usize,
    pub input: T,
}

/// Closed-loop rollout record. `states` has one more entry than
/// `inputs`/`gusts`; `states[k]` is the state the input `inputs[k]` acted on.
#[derive(Clone, Debug)]
pub struct Trajectory<T> {
    pub states: Vec<WingState<T>>,
    pub inputs: Vec<T>,
    pub gusts: Vec<T>,
    pub abort: Option<Abort<T>>,
}

impl<T: Float> Trajectory<T> {
    pub fn steps(&self) -> usize {
        self.inputs.len()
    }

    /// CSV with header `k,t,h,theta,v_h,v_theta,beta_f,u,w`, one row per step.
    pub fn write_csv<W: std::io::Write>(&self, mut out: W, sample_time: T) -> std::io::Result<()> {
        writeln!(out, "k,t,h,theta,v_h,v_theta,beta_f,u,w")?;
        for k in 0..self.inputs.len() {
            let s = &self.states[k];
            let t = sample_time * T::from_usize(k).unwrap();
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                k, t, s.h, s.theta, s.v_h, s.v_theta, s.beta_f, self.inputs[k], self.gusts[k]
            )?;
        }
        Ok(())
    }
}

/// Fixed-step closed-loop rollout at rate `1/T`.
///
/// The controller callback sees the step index and the current state and
/// returns the commanded flap deflection, which acts through the actuator
/// law. A non-finite or out-of-box command aborts the episode and records
/// the violation; everything up to the abort is returned.
pub fn simulate<T: Float>(
    x0: &WingState<T>,
    mut controller: impl FnMut(usize, &WingState<T>) -> ControlInput<T>,
    gusts: &[T],
    p: &PlantParams<T>,
    input_box: &InputBox<T>,
) -> Result<Trajectory<T>> {
    if !x0.is_finite() {
        return Err(Error::NonFinite("simulate initial state"));
    }
    let n = gusts.len();
    let mut traj = Trajectory {
        states: Vec::with_capacity(n + 1),
        inputs: Vec::with_capacity(n),
        gusts: Vec::with_capacity(n),
        abort: None,
    };
    traj.states.push(*x0);
    let mut cur = *x0;
    for (k, &w) in gusts.iter().enumerate() {
        let u = controller(k, &cur);
        if !u.0.is_finite() || !input_box.contains(u.0) {
            traj.abort = Some(Abort { step: k, input: u.0 });
            break;
        }
        cur = step_euler(&cur, u, Disturbance(w), p)?;
        traj.inputs.push(u.0);
        traj.gusts.push(w);
        traj.states.push(cur);
    }
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn params() -> PlantParams<f64> {
        PlantParams::default_section()
    }

    fn zero_u() -> ControlInput<f64> {
        ControlInput(0.0)
    }

    fn zero_w() -> Disturbance<f64> {
        Disturbance(0.0)
    }

    #[test]
    fn alpha_eff_vanishes_at_rest() {
        let p = params();
        let a = alpha_eff(&WingState::zero(), zero_w(), &p).unwrap();
        assert_eq!(a, 0.0);
    }

    #[test]
    fn alpha_eff_gust_term() {
        // V=10, θ=0, w=−1: atan(0.1)
        let mut p = params();
        p.airspeed = 10.0;
        let a = alpha_eff(&WingState::zero(), Disturbance(-1.0), &p).unwrap();
        assert_relative_eq!(a, 0.1_f64.atan(), epsilon = 1e-12);
        assert_relative_eq!(a, 0.099669, epsilon = 1e-6);
    }

    #[test]
    fn alpha_eff_plunge_rate_term() {
        let mut p = params();
        p.airspeed = 10.0;
        let x = WingState::new(0.0, 0.0, 1.0, 0.0, 0.0);
        let a = alpha_eff(&x, zero_w(), &p).unwrap();
        assert_relative_eq!(a, 0.1, epsilon = 1e-12);
    }

    #[test]
    fn alpha_eff_rejects_non_finite() {
        let p = params();
        let x = WingState::new(f64::NAN, 0.0, 0.0, 0.0, 0.0);
        assert!(alpha_eff(&x, zero_w(), &p).is_err());
    }

    #[test]
    fn equilibrium_is_fixed_point() {
        let p = params();
        let f = deriv(&WingState::zero(), zero_u(), zero_w(), &p).unwrap();
        assert_eq!(f, [0.0; 5]);
        let next = step_euler(&WingState::zero(), zero_u(), zero_w(), &p).unwrap();
        assert_eq!(next, WingState::zero());
        let next2 = step_taylor2(&WingState::zero(), zero_u(), zero_w(), &p).unwrap();
        assert_eq!(next2.to_array(), [0.0; 5]);
    }

    #[test]
    fn actuator_channel_gain() {
        // β_f = 0, u = 0.01, λ = 125 → flap derivative 1.25 rad/s
        let mut p = params();
        p.actuator_gain = 125.0;
        let f = deriv(&WingState::zero(), ControlInput(0.01), zero_w(), &p).unwrap();
        assert_relative_eq!(f[4], 1.25, epsilon = 1e-12);
    }

    #[test]
    fn actuator_step_examples() {
        let mut p = params();
        p.sample_time = 0.001;
        p.actuator_gain = 125.0;
        assert_eq!(actuator_step(0.0, ControlInput(0.0), &p), 0.0);
        let c = 0.37;
        assert_relative_eq!(actuator_step(c, ControlInput(c), &p), c, epsilon = 1e-15);
        assert_relative_eq!(actuator_step(0.0, ControlInput(1.0), &p), 0.125, epsilon = 1e-15);
        assert!(p.validate().is_ok());
        p.sample_time = 0.009;
        assert!(p.validate().is_err(), "Tλ >= 1 must be a configuration error");
    }

    #[test]
    fn euler_actuator_law_from_zero() {
        // β_f = 0, u = c → new β_f = Tλc
        let p = params();
        let c = 0.02;
        let next = step_euler(&WingState::zero(), ControlInput(c), zero_w(), &p).unwrap();
        assert_relative_eq!(next.beta_f, p.sample_time * p.actuator_gain * c, epsilon = 1e-15);
    }

    #[test]
    fn deriv_matches_position_finite_difference() {
        // Central difference of integrated positions at t=0 reproduces the
        // velocity components of deriv to 1e-6 relative.
        let p = params();
        let x = WingState::new(0.01, 0.05, -0.1, 0.2, 0.03);
        let u = ControlInput(0.01);
        let w = Disturbance(0.5);
        let f = deriv(&x, u, w, &p).unwrap();
        let dt = p.sample_time / 100.0;
        let fwd = rk4_refined(&x, u, w, &p, dt, 1).unwrap();
        let mut back = params();
        back.sample_time = p.sample_time; // unchanged; rk4 uses explicit dt
        let bwd = rk4_refined(&x, u, w, &back, -dt, 1).unwrap();
        let dh = (fwd.h - bwd.h) / (2.0 * dt);
        let dth = (fwd.theta - bwd.theta) / (2.0 * dt);
        assert_relative_eq!(dh, f[0], max_relative = 1e-6);
        assert_relative_eq!(dth, f[1], max_relative = 1e-6);
        // Same check for the velocity states against the accelerations.
        let dvh = (fwd.v_h - bwd.v_h) / (2.0 * dt);
        let dvt = (fwd.v_theta - bwd.v_theta) / (2.0 * dt);
        assert_relative_eq!(dvh, f[2], max_relative = 1e-6);
        assert_relative_eq!(dvt, f[3], max_relative = 1e-6);
    }

    #[test]
    fn euler_local_error_is_second_order() {
        let p0 = params();
        let x = WingState::new(0.01, 0.04, -0.08, 0.3, 0.02);
        let u = ControlInput(0.015);
        let w = Disturbance(0.8);
        let err_at = |t: f64| {
            let mut p = p0;
            p.sample_time = t;
            let e = step_euler(&x, u, w, &p).unwrap();
            let r = rk4_refined(&x, u, w, &p, t, 10).unwrap();
            linalg::norm2(&linalg::sub(&e.to_array(), &r.to_array()))
        };
        let ratio = err_at(1e-3) / err_at(5e-4);
        assert!((3.2..4.8).contains(&ratio), "local Euler order ratio {ratio}");
    }

    #[test]
    fn euler_global_error_halves_with_step() {
        // Over a fixed horizon the accumulated Euler error is first order.
        let p0 = params();
        let x0 = WingState::new(0.01, 0.04, -0.08, 0.3, 0.02);
        let u = ControlInput(0.01);
        let w = Disturbance(0.5);
        let horizon = 0.1;
        let endpoint_err = |t: f64| {
            let mut p = p0;
            p.sample_time = t;
            let n = (horizon / t).round() as usize;
            let mut cur = x0;
            for _ in 0..n {
                cur = step_euler(&cur, u, w, &p).unwrap();
            }
            let truth = rk4_refined(&x0, u, w, &p, horizon, 10 * n).unwrap();
            linalg::norm2(&linalg::sub(&cur.to_array(), &truth.to_array()))
        };
        let ratio = endpoint_err(1e-3) / endpoint_err(5e-4);
        assert!((1.6..2.6).contains(&ratio), "global Euler order ratio {ratio}");
    }

    #[test]
    fn taylor2_tracks_two_euler_steps_to_third_order() {
        let p0 = params();
        let x = WingState::new(0.012, -0.05, 0.11, -0.4, 0.04);
        let u = ControlInput(-0.02);
        let w = Disturbance(-0.7);
        let err_at = |t: f64| {
            let mut p = p0;
            p.sample_time = t;
            let two = {
                let mid = step_euler(&x, u, w, &p).unwrap();
                step_euler(&mid, u, w, &p).unwrap()
            };
            let tay = step_taylor2(&x, u, w, &p).unwrap();
            linalg::norm2(&linalg::sub(&tay.to_array(), &two.to_array()))
        };
        let ratio = err_at(2e-3) / err_at(1e-3);
        assert!((6.0..10.5).contains(&ratio), "taylor2 vs euler∘euler ratio {ratio}");
    }

    #[test]
    fn taylor2_matches_rk4_two_step_within_scale_tolerance() {
        // Desk version of the 2% fidelity check (full sweep in acceptance).
        let p = params();
        let scale = [0.08, 0.15, 0.4, 1.0, 0.26];
        let x = WingState::new(0.02, 0.1, 0.2, -1.0, 0.1);
        let u = ControlInput(0.05);
        let w = Disturbance(1.5);
        let tay = step_taylor2(&x, u, w, &p).unwrap();
        let truth = rk4_refined(&x, u, w, &p, 2.0 * p.sample_time, 20).unwrap();
        for i in 0..STATE_DIM {
            let rel = (tay.to_array()[i] - truth.to_array()[i]).abs() / scale[i];
            assert!(rel < 0.02, "component {i} relative error {rel}");
        }
    }

    #[test]
    fn taylor2_kinematic_channels_match_component_forms() {
        // z(k+2) ≈ z + T v + T²/2 a and v(k+2) ≈ v + T a, judged at the same
        // state-scale tolerance used for the two-step fidelity checks.
        let p = params();
        let scale = [0.08, 0.15, 0.4, 1.0, 0.26];
        let x = WingState::new(0.015, 0.08, -0.15, 0.8, 0.05);
        let u = ControlInput(0.03);
        let w = Disturbance(1.0);
        let f = deriv(&x, u, w, &p).unwrap();
        let t = p.sample_time;
        let tay = step_taylor2(&x, u, w, &p).unwrap().to_array();
        let kin = [
            x.h + t * x.v_h + 0.5 * t * t * f[2],
            x.theta + t * x.v_theta + 0.5 * t * t * f[3],
            x.v_h + t * f[2],
            x.v_theta + t * f[3],
        ];
        for i in 0..4 {
            let rel = (tay[i] - kin[i]).abs() / scale[i];
            assert!(rel < 0.02, "kinematic channel {i} deviation {rel}");
        }
    }

    #[test]
    fn simulate_constant_trajectory_at_equilibrium() {
        let p = params();
        let ib = InputBox { lo: -0.3, hi: 0.3 };
        let gusts = vec![0.0; 100];
        let traj = simulate(&WingState::zero(), |_, _| ControlInput(0.0), &gusts, &p, &ib).unwrap();
        assert!(traj.abort.is_none());
        assert_eq!(traj.states.len(), 101);
        for s in &traj.states {
            assert_eq!(*s, WingState::zero());
        }
    }

    #[test]
    fn simulate_flap_converges_geometrically() {
        let p = params();
        let ib = InputBox { lo: -0.3, hi: 0.3 };
        let c = 0.1;
        let gusts = vec![0.0; 50];
        let traj = simulate(&WingState::zero(), |_, _| ControlInput(c), &gusts, &p, &ib).unwrap();
        let r = 1.0 - p.sample_time * p.actuator_gain;
        for (k, s) in traj.states.iter().enumerate() {
            let expect = c * (1.0 - r.powi(k as i32));
            assert_relative_eq!(s.beta_f, expect, epsilon = 1e-12);
        }
    }

    #[test]
    fn simulate_matches_manual_euler_replay() {
        let p = params();
        let ib = InputBox { lo: -0.3, hi: 0.3 };
        let gusts: Vec<f64> = (0..40).map(|k| 0.3 * (k as f64 * 0.07).sin()).collect();
        let ctrl = |k: usize, _: &WingState<f64>| ControlInput(0.05 * ((k % 7) as f64 - 3.0) / 3.0);
        let traj = simulate(&WingState::zero(), ctrl, &gusts, &p, &ib).unwrap();
        let mut cur = WingState::zero();
        for k in 0..gusts.len() {
            let u = ControlInput(traj.inputs[k]);
            cur = step_euler(&cur, u, Disturbance(gusts[k]), &p).unwrap();
            assert_eq!(cur, traj.states[k + 1]);
        }
    }

    #[test]
    fn simulate_aborts_on_out_of_box_input() {
        let p = params();
        let ib = InputBox { lo: -0.1, hi: 0.1 };
        let gusts = vec![0.0; 10];
        let traj = simulate(
            &WingState::zero(),
            |k, _| ControlInput(if k == 3 { 0.5 } else { 0.0 }),
            &gusts,
            &p,
            &ib,
        )
        .unwrap();
        let abort = traj.abort.expect("must abort");
        assert_eq!(abort.step, 3);
        assert_eq!(traj.inputs.len(), 3);
    }

    proptest! {
        #[test]
        fn actuator_update_is_convex_combination(beta in -0.5_f64..0.5, u in -0.5_f64..0.5) {
            let p = params();
            let next = actuator_step(beta, ControlInput(u), &p);
            prop_assert!(next >= beta.min(u) - 1e-15);
            prop_assert!(next <= beta.max(u) + 1e-15);
        }

        #[test]
        fn alpha_eff_is_antisymmetric(
            theta in -0.5_f64..0.5,
            w in -3.0_f64..3.0,
            v_h in -0.5_f64..0.5,
            v_t in -3.0_f64..3.0,
        ) {
            let p = params();
            let pos = alpha_eff(&WingState::new(0.0, theta, v_h, v_t, 0.0), Disturbance(w), &p).unwrap();
            let neg = alpha_eff(&WingState::new(0.0, -theta, -v_h, -v_t, 0.0), Disturbance(-w), &p).unwrap();
            prop_assert!((pos + neg).abs() < 1e-12);
        }

        #[test]
        fn taylor2_is_monotone_in_input(
            h in -0.04_f64..0.04,
            theta in -0.2_f64..0.2,
            v_h in -0.4_f64..0.4,
            v_t in -2.0_f64..2.0,
            beta in -0.2_f64..0.2,
            w in -3.0_f64..3.0,
        ) {
            let p = params();
            let x = WingState::new(h, theta, v_h, v_t, beta);
            let us: Vec<f64> = crate::linalg::linspace(-0.26, 0.26, 9);
            let mut prev: Option<[f64; 5]> = None;
            let mut dir = [0i8; 5];
            for &u in &us {
                let next = step_taylor2(&x, ControlInput(u), Disturbance(w), &p).unwrap().to_array();
                if let Some(last) = prev {
                    for i in 0..STATE_DIM {
                        let d = next[i] - last[i];
                        if d.abs() > 1e-14 {
                            let s = if d > 0.0 { 1 } else { -1 };
                            if dir[i] == 0 {
                                dir[i] = s;
                            }
                            prop_assert_eq!(dir[i], s, "component {} reversed direction in u", i);
                        }
                    }
                }
                prev = Some(next);
            }
        }
    }
}
