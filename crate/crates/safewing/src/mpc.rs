//! Training-time MPC: finite-horizon quadratic cost over the scheduled
//! linear prediction model, plus extraction and certification of the safe
//! control interval `[u_min, u_max]` per (state, disturbance) pair.
//!
//! The box-constrained QP is solved by accelerated projected gradient
//! (FISTA with backtracking and restart) to a KKT-residual tolerance; state
//! box constraints enter through a quadratic penalty and a feasibility
//! post-check.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::float::Float;
use crate::linalg::{self, Mat5, Vec5, STATE_DIM};
use crate::lpv::{self, LpvStep};
use crate::plant::{self, PlantParams};
use crate::state::{ControlInput, Disturbance, InputBox, StateBox, WingState};

/// Weights, constraint sets, and solver knobs for the training-time MPC.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct MpcConfig<T> {
    /// Prediction horizon N (steps).
    pub horizon: usize,
    /// Stage state weight (PSD).
    pub q: Mat5<T>,
    /// Stage input weight (> 0).
    pub r: T,
    /// Terminal state weight (PSD); defaults to `q`.
    pub terminal: Mat5<T>,
    /// Admissible state box X.
    pub state_box: StateBox<T>,
    /// Actuator command box U.
    pub input_box: InputBox<T>,
    /// KKT residual tolerance.
    pub tolerance: T,
    /// Iteration cap for the projected-gradient solve.
    pub max_iters: usize,
    /// Quadratic penalty weight for state-box violations (normalized by
    /// squared half-widths internally).
    pub state_penalty: T,
    /// Safety margin inside X during the bound search, as a fraction of each
    /// half-width.
    pub margin_frac: T,
    /// Probe count for interval certification.
    pub n_probe: usize,
    /// Prediction-model discretization, in plant sampling periods. The
    /// receding-horizon lookahead is `horizon * coarse_steps * T`.
    pub coarse_steps: usize,
}

impl<T: Float> MpcConfig<T> {
    /// Diagonal weights normalized by the box half-widths, R = 0.1 in
    /// normalized input units.
    pub fn normalized(state_box: StateBox<T>, input_box: InputBox<T>) -> Self {
        let hw = state_box.half_widths();
        let mut q = linalg::mat_zeros::<T>();
        for i in 0..STATE_DIM {
            q[i][i] = T::one() / (hw[i] * hw[i]);
        }
        let uh = input_box.half_width();
        MpcConfig {
            horizon: 80,
            q,
            r: T::of(0.1) / (uh * uh),
            terminal: q,
            state_box,
            input_box,
            tolerance: T::of(1e-8),
            max_iters: 500,
            state_penalty: T::of(1e4),
            margin_frac: T::of(0.02),
            n_probe: 17,
            coarse_steps: 5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::config("mpc horizon must be >= 1"));
        }
        if self.r <= T::zero() {
            return Err(Error::config("mpc input weight R must be positive"));
        }
        if !self.state_box.is_valid() || !self.input_box.is_valid() {
            return Err(Error::config("mpc constraint boxes are degenerate"));
        }
        if self.n_probe < 2 {
            return Err(Error::config("n_probe must be >= 2"));
        }
        if self.coarse_steps == 0 {
            return Err(Error::config("coarse_steps must be >= 1"));
        }
        Ok(())
    }
}

/// Stage + terminal cost of an input sequence, including the state-box
/// penalty. Public so oracles and diagnostics can score candidate sequences
/// with exactly the solver's objective.
pub fn objective<T: Float>(
    model: &LpvStep<T>,
    x0: &Vec5<T>,
    gusts: &[T],
    cfg: &MpcConfig<T>,
    inputs: &[T],
) -> T {
    let pen_w = penalty_weights(cfg);
    let mut x = *x0;
    let mut j = quad(&cfg.q, &x);
    for (k, &u) in inputs.iter().enumerate() {
        j += cfg.r * u * u;
        x = model.step(&x, u, gusts[k]);
        let w = if k + 1 == inputs.len() { &cfg.terminal } else { &cfg.q };
        j += quad(w, &x) + penalty(&x, cfg, &pen_w);
    }
    j
}

fn quad<T: Float>(m: &Mat5<T>, x: &Vec5<T>) -> T {
    linalg::dot(x, &linalg::matvec(m, x))
}

fn penalty_weights<T: Float>(cfg: &MpcConfig<T>) -> Vec5<T> {
    let hw = cfg.state_box.half_widths();
    std::array::from_fn(|i| cfg.state_penalty / (hw[i] * hw[i]))
}

fn penalty<T: Float>(x: &Vec5<T>, cfg: &MpcConfig<T>, pen_w: &Vec5<T>) -> T {
    let mut p = T::zero();
    for i in 0..STATE_DIM {
        let over = (x[i] - cfg.state_box.hi[i]).max(T::zero());
        let under = (cfg.state_box.lo[i] - x[i]).max(T::zero());
        p += pen_w[i] * (over * over + under * under);
    }
    p
}

fn penalty_grad<T: Float>(x: &Vec5<T>, cfg: &MpcConfig<T>, pen_w: &Vec5<T>) -> Vec5<T> {
    std::array::from_fn(|i| {
        let over = (x[i] - cfg.state_box.hi[i]).max(T::zero());
        let under = (cfg.state_box.lo[i] - x[i]).max(T::zero());
        T::of(2.0) * pen_w[i] * (over - under)
    })
}

/// Objective and gradient in one forward/backward sweep.
fn cost_grad<T: Float>(
    model: &LpvStep<T>,
    x0: &Vec5<T>,
    gusts: &[T],
    cfg: &MpcConfig<T>,
    inputs: &[T],
    states: &mut Vec<Vec5<T>>,
    grad: &mut [T],
) -> T {
    let n = inputs.len();
    let pen_w = penalty_weights(cfg);
    states.clear();
    states.push(*x0);
    let mut j = quad(&cfg.q, x0);
    for (k, &u) in inputs.iter().enumerate() {
        j += cfg.r * u * u;
        let next = model.step(&states[k], u, gusts[k]);
        let w = if k + 1 == n { &cfg.terminal } else { &cfg.q };
        j += quad(w, &next) + penalty(&next, cfg, &pen_w);
        states.push(next);
    }
    // Adjoint sweep: lambda_k = dJ/dx_k.
    let two = T::of(2.0);
    let mut lambda: Vec5<T> = {
        let xn = &states[n];
        let base = linalg::scale(&linalg::matvec(&cfg.terminal, xn), two);
        linalg::add(&base, &penalty_grad(xn, cfg, &pen_w))
    };
    for k in (0..n).rev() {
        grad[k] = two * cfg.r * inputs[k] + linalg::dot(&model.b, &lambda);
        if k > 0 {
            let xk = &states[k];
            let stage = linalg::scale(&linalg::matvec(&cfg.q, xk), two);
            let mut next = linalg::add(&stage, &penalty_grad(xk, cfg, &pen_w));
            let back = linalg::matvec_t(&model.a, &lambda);
            next = linalg::add(&next, &back);
            lambda = next;
        }
    }
    j
}

/// Minimize the finite-horizon quadratic cost over the prediction model with
/// the known gust injected, subject to the input box (by projection) and the
/// state box (by penalty + feasibility post-check).
///
/// Returns the N-step input sequence; `warm` seeds the iterate. A pair whose
/// predicted trajectory cannot be kept inside X maps to [`Error::Infeasible`].
pub fn solve_mpc<T: Float>(
    model: &LpvStep<T>,
    x0: &Vec5<T>,
    gusts: &[T],
    cfg: &MpcConfig<T>,
    warm: Option<&[T]>,
) -> Result<Vec<T>> {
    cfg.validate()?;
    let n = cfg.horizon;
    if gusts.len() < n {
        return Err(Error::config(format!(
            "gust segment shorter than the horizon: {} < {n}",
            gusts.len()
        )));
    }
    if !cfg.state_box.contains(x0) {
        return Err(Error::OutOfEnvelope("mpc initial state outside X".into()));
    }
    let gusts = &gusts[..n];
    let project = |u: &mut [T]| {
        for v in u.iter_mut() {
            *v = cfg.input_box.clamp(*v);
        }
    };

    let mut u: Vec<T> = match warm {
        Some(w) if w.len() == n => w.to_vec(),
        _ => vec![T::zero(); n],
    };
    project(&mut u);

    let mut states = Vec::with_capacity(n + 1);
    let mut grad = vec![T::zero(); n];
    let mut grad_y = vec![T::zero(); n];

    let mut u_prev = u.clone();
    let mut step = T::one(); // inverse Lipschitz estimate, adapted by backtracking
    let mut t_momentum = T::one();
    let mut j_prev = T::infinity();

    for _ in 0..cfg.max_iters {
        // Momentum point.
        let t_next = (T::one() + (T::one() + T::of(4.0) * t_momentum * t_momentum).sqrt()) / T::of(2.0);
        let beta = (t_momentum - T::one()) / t_next;
        let mut y: Vec<T> = (0..n).map(|k| u[k] + beta * (u[k] - u_prev[k])).collect();
        project(&mut y);
        let j_y = cost_grad(model, x0, gusts, cfg, &y, &mut states, &mut grad_y);

        // Backtracking proximal step from y.
        let mut candidate;
        loop {
            candidate = y.clone();
            for k in 0..n {
                candidate[k] -= step * grad_y[k];
            }
            project(&mut candidate);
            let j_c = objective(model, x0, gusts, cfg, &candidate);
            let mut upper = j_y;
            for k in 0..n {
                let d = candidate[k] - y[k];
                upper += grad_y[k] * d + d * d / (T::of(2.0) * step);
            }
            if j_c <= upper + T::of(1e-30) || step < T::of(1e-18) {
                u_prev = std::mem::replace(&mut u, candidate);
                t_momentum = t_next;
                j_prev = if j_c > j_prev {
                    // Restart momentum when the objective rises.
                    t_momentum = T::one();
                    j_prev
                } else {
                    j_c
                };
                break;
            }
            step = step / T::of(2.0);
        }
        step = step * T::of(1.2);

        // KKT residual at the new iterate.
        let _ = cost_grad(model, x0, gusts, cfg, &u, &mut states, &mut grad);
        let mut resid = T::zero();
        for k in 0..n {
            let stepped = cfg.input_box.clamp(u[k] - grad[k]);
            resid = resid.max((u[k] - stepped).abs());
        }
        if resid <= cfg.tolerance {
            break;
        }
    }

    // Feasibility: the converged prediction must respect X (small slack for
    // the penalty formulation).
    let hw = cfg.state_box.half_widths();
    let mut x = *x0;
    for (k, &uk) in u.iter().enumerate() {
        x = model.step(&x, uk, gusts[k]);
        for i in 0..STATE_DIM {
            let slack = T::of(1e-3) * hw[i];
            if x[i] > cfg.state_box.hi[i] + slack || x[i] < cfg.state_box.lo[i] - slack {
                return Err(Error::Infeasible);
            }
        }
    }
    Ok(u)
}

/// Scheduled prediction model at the MPC's coarser discretization
/// (`coarse_steps` plant periods per model step).
pub fn wing_prediction_model<T: Float>(
    x: &WingState<T>,
    p: &PlantParams<T>,
    cfg: &MpcConfig<T>,
) -> Result<LpvStep<T>> {
    let mut pc = *p;
    pc.sample_time = p.sample_time * T::from_usize(cfg.coarse_steps).unwrap();
    pc.validate()?;
    lpv::linearize(x, &pc, &cfg.state_box)
}

/// Gust samples at the prediction model's rate: every `coarse_steps`-th
/// plant-rate sample, padded with the last value.
pub fn downsample_gusts<T: Float>(gusts: &[T], cfg: &MpcConfig<T>) -> Vec<T> {
    let mut out: Vec<T> = gusts.iter().step_by(cfg.coarse_steps.max(1)).copied().collect();
    let pad = *out.last().unwrap_or(&T::zero());
    while out.len() < cfg.horizon {
        out.push(pad);
    }
    out
}

/// Verified per-pair control interval and its bounding state trajectories
/// over the two-step delay horizon.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SafeBounds<T> {
    pub u_min: T,
    pub u_max: T,
    /// Nominal MPC action the interval was grown from.
    pub u_star: T,
    /// Element-wise lower envelope of the bounding trajectories at
    /// κ = k, k+1, k+2.
    pub x_traj_min: [Vec5<T>; 3],
    /// Element-wise upper envelope.
    pub x_traj_max: [Vec5<T>; 3],
    pub verified: bool,
}

impl<T: Float> SafeBounds<T> {
    pub fn contains(&self, u: T) -> bool {
        u >= self.u_min && u <= self.u_max
    }
}

/// The two intermediate states of the delay horizon under a held command:
/// the Euler successor at k+1 and the two-step Taylor prediction at k+2.
pub fn two_step_states<T: Float>(
    x0: &WingState<T>,
    u: T,
    w: T,
    p: &PlantParams<T>,
) -> Result<(Vec5<T>, Vec5<T>)> {
    let x1 = plant::step_euler(x0, ControlInput(u), Disturbance(w), p)?;
    let x2 = plant::step_taylor2(x0, ControlInput(u), Disturbance(w), p)?;
    Ok((x1.to_array(), x2.to_array()))
}

fn in_box_all<T: Float>(b: &StateBox<T>, x1: &Vec5<T>, x2: &Vec5<T>) -> bool {
    b.contains(x1) && b.contains(x2)
}

/// Largest certified interval around the MPC optimum for one
/// (state, gust realization) pair.
///
/// Bisection expands `u*` toward each end of the actuator box until the
/// two-step trajectories leave the margin-shrunk X, then the interval is
/// probe-certified (shrinking back toward `u*` on any probe failure).
pub fn safe_bounds<T: Float>(
    x0: &WingState<T>,
    gusts: &[T],
    cfg: &MpcConfig<T>,
    p: &PlantParams<T>,
) -> Result<SafeBounds<T>> {
    let model = wing_prediction_model(x0, p, cfg)?;
    let coarse = downsample_gusts(gusts, cfg);
    let u_seq = solve_mpc(&model, &x0.to_array(), &coarse, cfg, None)?;
    let u_star = u_seq[0];
    let w0 = gusts[0];
    let shrunk = cfg.state_box.shrink(cfg.margin_frac);

    let safe = |u: T| -> Result<bool> {
        let (x1, x2) = two_step_states(x0, u, w0, p)?;
        Ok(in_box_all(&shrunk, &x1, &x2))
    };
    if !safe(u_star)? {
        return Err(Error::Infeasible);
    }

    let tol_u = T::of(1e-7) * (cfg.input_box.hi - cfg.input_box.lo);
    let expand = |toward: T| -> Result<T> {
        if safe(toward)? {
            return Ok(toward);
        }
        let mut good = u_star;
        let mut bad = toward;
        while (bad - good).abs() > tol_u {
            let mid = (good + bad) / T::of(2.0);
            if safe(mid)? {
                good = mid;
            } else {
                bad = mid;
            }
        }
        Ok(good)
    };

    let mut bounds = SafeBounds {
        u_min: expand(cfg.input_box.lo)?,
        u_max: expand(cfg.input_box.hi)?,
        u_star,
        x_traj_min: [linalg::zeros(); 3],
        x_traj_max: [linalg::zeros(); 3],
        verified: false,
    };
    refresh_envelope(&mut bounds, x0, w0, p)?;
    certify_bounding(x0, &mut bounds, gusts, p, cfg.n_probe)?;
    Ok(bounds)
}

fn refresh_envelope<T: Float>(
    bounds: &mut SafeBounds<T>,
    x0: &WingState<T>,
    w0: T,
    p: &PlantParams<T>,
) -> Result<()> {
    let (lo1, lo2) = two_step_states(x0, bounds.u_min, w0, p)?;
    let (hi1, hi2) = two_step_states(x0, bounds.u_max, w0, p)?;
    let x0a = x0.to_array();
    bounds.x_traj_min = [
        x0a,
        std::array::from_fn(|i| lo1[i].min(hi1[i])),
        std::array::from_fn(|i| lo2[i].min(hi2[i])),
    ];
    bounds.x_traj_max = [
        x0a,
        std::array::from_fn(|i| lo1[i].max(hi1[i])),
        std::array::from_fn(|i| lo2[i].max(hi2[i])),
    ];
    Ok(())
}

/// Probe the interval and verify `x_min(κ) ≤ x(κ) ≤ x_max(κ)` element-wise
/// at κ = k+1, k+2 for every probe input. Probes that fail shrink the
/// offending side toward `u*` and the interval is re-certified; a pair that
/// cannot be certified even at `u_min = u_max` is rejected.
pub fn certify_bounding<T: Float>(
    x0: &WingState<T>,
    bounds: &mut SafeBounds<T>,
    gusts: &[T],
    p: &PlantParams<T>,
    n_probe: usize,
) -> Result<()> {
    let w0 = gusts[0];
    let scale: Vec5<T> = std::array::from_fn(|i| {
        T::of(1e-9) * (T::one() + bounds.x_traj_max[1][i].abs().max(bounds.x_traj_min[1][i].abs()))
    });
    let two_step = |u: T| two_step_states(x0, u, w0, p);
    for _round in 0..128 {
        refresh_envelope(bounds, x0, w0, p)?;
        match probe_envelope(&two_step, bounds, n_probe, &scale)? {
            None => {
                bounds.verified = true;
                return Ok(());
            }
            Some(bad_u) => {
                let width = bounds.u_max - bounds.u_min;
                if width <= T::of(1e-12) {
                    return Err(Error::Other(
                        "bounding certification failed at a collapsed interval".into(),
                    ));
                }
                // Shrink the side the failing probe came from.
                if bad_u >= bounds.u_star {
                    bounds.u_max = (bounds.u_max + bounds.u_star) / T::of(2.0);
                } else {
                    bounds.u_min = (bounds.u_min + bounds.u_star) / T::of(2.0);
                }
            }
        }
    }
    Err(Error::Other("bounding certification did not converge".into()))
}

/// Returns the first probe input violating the envelope, or `None` if all
/// probes stay inside. Generic over the two-step map so adversarial
/// dynamics can be exercised directly in tests.
pub fn probe_envelope<T: Float>(
    two_step: &impl Fn(T) -> Result<(Vec5<T>, Vec5<T>)>,
    bounds: &SafeBounds<T>,
    n_probe: usize,
    scale: &Vec5<T>,
) -> Result<Option<T>> {
    for &u in &linalg::linspace(bounds.u_min, bounds.u_max, n_probe) {
        let (x1, x2) = two_step(u)?;
        for (kappa, x) in [(1usize, &x1), (2usize, &x2)] {
            for i in 0..STATE_DIM {
                if x[i] < bounds.x_traj_min[kappa][i] - scale[i]
                    || x[i] > bounds.x_traj_max[kappa][i] + scale[i]
                {
                    return Ok(Some(u));
                }
            }
        }
    }
    Ok(None)
}
