//! Closed-loop episode execution, the three-controller comparison, and the
//! Monte Carlo metric suite.
//!
//! Episodes run 10 s at 1 kHz by default: a 5 s turbulence phase followed by
//! recovery. Every controller in a campaign sees bit-identical gust profiles
//! and initial states. The MPC–RL controller additionally keeps the
//! soundness evidence of every certified step so the campaign can assert the
//! Lipschitz bound against the realized trajectory.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::filter::{
    certify, estimate_lipschitz, interpolate, query_neighbors, DecisionRecord, FilterConfig,
    Transition, TransitionDb,
};
use crate::gust::{dryden_generate, training_ensemble, GustConfig, GustProfile};
use crate::linalg::{self, Vec5, STATE_DIM};
use crate::mpc::{safe_bounds, solve_mpc, MpcConfig};
use crate::plant::{self, PlantParams, Trajectory};
use crate::qlearn::{QTable, RewardConfig};
use crate::state::{ControlInput, Disturbance, InputBox, StateBox, WingState};
use crate::util::mix_seed;

/// Metric knobs shared by every episode of a campaign.
#[derive(Clone, Copy, Debug)]
pub struct HarnessParams {
    pub episode_steps: usize,
    pub gust_steps: usize,
    /// Reference max actuator step (rad) for the increment metric.
    pub du_max: f64,
    /// Settling band as a fraction of the admissible half-width.
    pub settle_band_frac: f64,
    /// Admissible effective angle of attack (rad).
    pub alpha_max: f64,
    /// Excursion threshold as a fraction of the max open-loop response.
    pub excursion_frac: f64,
    /// Initial states drawn from this inner fraction of each box dimension.
    pub inner_frac: f64,
}

impl HarnessParams {
    pub fn from_config(cfg: &RunConfig, sample_time: f64) -> Self {
        HarnessParams {
            episode_steps: cfg.episode_steps(sample_time),
            gust_steps: cfg.gust_steps(sample_time),
            du_max: cfg.harness.du_max,
            settle_band_frac: cfg.harness.settle_band_frac,
            alpha_max: cfg.harness.alpha_max_deg.to_radians(),
            excursion_frac: cfg.harness.excursion_frac,
            inner_frac: cfg.harness.inner_frac,
        }
    }
}

/// Per-episode metric record.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub max_overshoot_h: f64,
    pub settle_h: f64,
    pub max_alpha_eff_deg: f64,
    pub settle_alpha: f64,
    pub rms_vh_full: f64,
    pub rms_vh_post: f64,
    pub rms_vtheta_full: f64,
    pub rms_vtheta_post: f64,
    pub excursions_h: usize,
    pub excursions_alpha: usize,
    pub median_du_pct: f64,
    pub fallback_count: usize,
    pub violation_count: usize,
    // Safety-filter diagnostics (zero for controllers without a filter).
    pub tier2_count: usize,
    pub certified_steps: usize,
    pub soundness_violations: usize,
    /// Violations of the weighted-norm Lipschitz bound (the sound layer).
    pub global_bound_violations: usize,
    /// Realized deviations exceeding a neighbor's stored safety margin.
    pub margin_violations: usize,
    pub merged_set_exits: usize,
    pub max_dev_ratio: f64,
    pub envelope_exits: usize,
}

impl EpisodeMetrics {
    pub const CSV_FIELDS: &'static str = "max_overshoot_h,settle_h,max_alpha_eff_deg,settle_alpha,\
rms_vh_full,rms_vh_post,rms_vtheta_full,rms_vtheta_post,excursions_h,excursions_alpha,\
median_du_pct,fallback_count,violation_count,tier2_count,certified_steps,\
soundness_violations,global_bound_violations,margin_violations,merged_set_exits,\
max_dev_ratio,envelope_exits";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.max_overshoot_h,
            self.settle_h,
            self.max_alpha_eff_deg,
            self.settle_alpha,
            self.rms_vh_full,
            self.rms_vh_post,
            self.rms_vtheta_full,
            self.rms_vtheta_post,
            self.excursions_h,
            self.excursions_alpha,
            self.median_du_pct,
            self.fallback_count,
            self.violation_count,
            self.tier2_count,
            self.certified_steps,
            self.soundness_violations,
            self.global_bound_violations,
            self.margin_violations,
            self.merged_set_exits,
            self.max_dev_ratio,
            self.envelope_exits,
        )
    }
}

/// Controller-side counters merged into [`EpisodeMetrics`].
#[derive(Clone, Debug, Default)]
pub struct ControllerReport {
    pub fallback_count: usize,
    pub tier2_count: usize,
    pub certified_steps: usize,
    pub soundness_violations: usize,
    pub global_bound_violations: usize,
    pub margin_violations: usize,
    pub merged_set_exits: usize,
    pub max_dev_ratio: f64,
    pub envelope_exits: usize,
    pub decisions: Vec<DecisionRecord<f64>>,
}

/// A named closed-loop policy.
pub trait Controller {
    fn name(&self) -> &'static str;
    fn step(&mut self, k: usize, x: &WingState<f64>) -> ControlInput<f64>;
    /// Called once after the rollout with the realized trajectory, before
    /// the report is collected.
    fn finalize(&mut self, _traj: &Trajectory<f64>) {}
    fn report(&mut self) -> ControllerReport {
        ControllerReport::default()
    }
}

/// Open-loop reference (zero commanded input).
pub struct ZeroController;

impl Controller for ZeroController {
    fn name(&self) -> &'static str {
        "open-loop"
    }
    fn step(&mut self, _k: usize, _x: &WingState<f64>) -> ControlInput<f64> {
        ControlInput(0.0)
    }
}

/// Actuator rate limit: every controller's applied command moves at most
/// `du_max` per step, mirroring a physical flap-rate constraint.
#[derive(Clone, Copy, Debug)]
pub struct RateLimiter {
    last: f64,
    du_max: f64,
}

impl RateLimiter {
    pub fn new(du_max: f64) -> Self {
        RateLimiter { last: 0.0, du_max }
    }

    /// Rate-limited candidate without committing it.
    pub fn clamp(&self, cmd: f64) -> f64 {
        cmd.max(self.last - self.du_max).min(self.last + self.du_max)
    }

    /// Commit and return the rate-limited command.
    pub fn apply(&mut self, cmd: f64) -> f64 {
        let u = self.clamp(cmd);
        self.last = u;
        u
    }

    pub fn last(&self) -> f64 {
        self.last
    }
}

/// Receding-horizon LPV-MPC baseline: re-linearize and re-solve every step
/// with zero assumed future gust, apply the first input. Per-step
/// infeasibility holds the previous input.
pub struct LpvMpcController {
    p: PlantParams<f64>,
    cfg: MpcConfig<f64>,
    zero_gusts: Vec<f64>,
    warm: Option<Vec<f64>>,
    limiter: RateLimiter,
    pub infeasible_steps: usize,
}

impl LpvMpcController {
    pub fn new(p: PlantParams<f64>, cfg: MpcConfig<f64>, du_max: f64) -> Self {
        let zero_gusts = vec![0.0; cfg.horizon];
        LpvMpcController {
            p,
            cfg,
            zero_gusts,
            warm: None,
            limiter: RateLimiter::new(du_max),
            infeasible_steps: 0,
        }
    }
}

impl Controller for LpvMpcController {
    fn name(&self) -> &'static str {
        "lpv"
    }

    fn step(&mut self, _k: usize, x: &WingState<f64>) -> ControlInput<f64> {
        let solved = crate::mpc::wing_prediction_model(x, &self.p, &self.cfg).and_then(|model| {
            solve_mpc(&model, &x.to_array(), &self.zero_gusts, &self.cfg, self.warm.as_deref())
        });
        match solved {
            Ok(seq) => {
                let mut shifted = seq[1..].to_vec();
                shifted.push(*seq.last().unwrap());
                self.warm = Some(shifted);
                ControlInput(self.cfg.input_box.clamp(self.limiter.apply(seq[0])))
            }
            Err(_) => {
                self.infeasible_steps += 1;
                let hold = self.limiter.last();
                ControlInput(self.cfg.input_box.clamp(self.limiter.apply(hold)))
            }
        }
    }
}

/// Greedy tabular baseline over the full actuator box, with
/// nearest-visited-cell lookup for unvisited cells.
pub struct RlController<'a> {
    table: &'a QTable<f64>,
    input_box: InputBox<f64>,
    weights: Vec5<f64>,
    limiter: RateLimiter,
    /// Memoized nearest-cell answers for unvisited cells.
    miss_cache: std::collections::HashMap<usize, f64>,
    visited: Vec<(Vec5<f64>, f64)>,
}

impl<'a> RlController<'a> {
    pub fn new(table: &'a QTable<f64>, input_box: InputBox<f64>, weights: Vec5<f64>, du_max: f64) -> Self {
        let visited = table
            .visited_cells()
            .into_iter()
            .filter_map(|c| table.greedy(c).map(|u| (table.grid.cell_center(c), u.0)))
            .collect();
        RlController {
            table,
            input_box,
            weights,
            limiter: RateLimiter::new(du_max),
            miss_cache: std::collections::HashMap::new(),
            visited,
        }
    }

    fn greedy_target(&mut self, x: &WingState<f64>) -> f64 {
        let cell = self.table.grid.cell_index(&x.to_array());
        if let Some(u) = self.table.greedy(cell) {
            return self.input_box.clamp(u.0);
        }
        if let Some(&u) = self.miss_cache.get(&cell) {
            return u;
        }
        let xa = x.to_array();
        let mut best = (f64::INFINITY, 0.0);
        for (center, u) in &self.visited {
            let d = linalg::weighted_norm(&linalg::sub(&xa, center), &self.weights);
            if d < best.0 {
                best = (d, *u);
            }
        }
        let u = self.input_box.clamp(best.1);
        self.miss_cache.insert(cell, u);
        u
    }
}

impl Controller for RlController<'_> {
    fn name(&self) -> &'static str {
        "rl"
    }

    fn step(&mut self, _k: usize, x: &WingState<f64>) -> ControlInput<f64> {
        let target = self.greedy_target(x);
        ControlInput(self.input_box.clamp(self.limiter.apply(target)))
    }
}

/// Soundness evidence for one certified step: enough to re-derive the
/// matched-disturbance verified successor afterwards.
struct NeighborEvidence {
    x_bar: WingState<f64>,
    u_bar: f64,
    /// Per-component deviation bound δ at certification time.
    delta: Vec5<f64>,
    /// Stored margins δ̄ of the neighbor's successor.
    margin: Vec5<f64>,
    /// Weighted distance ‖x − x̄‖_W at certification time.
    dist_w: f64,
}

struct PendingCheck {
    k: usize,
    u_applied: f64,
    /// Aggregate weighted-norm Lipschitz constant sqrt(Σ (c_j L_x^{(j)})²).
    l_bar_x: f64,
    l_u: f64,
    neighbors: Vec<NeighborEvidence>,
}

/// Deployment controller: database interpolation certified by the Lipschitz
/// filter, with hold / local-retraining fallback.
pub struct MpcRlController<'a> {
    pub db: &'a mut TransitionDb<f64>,
    p: PlantParams<f64>,
    fcfg: FilterConfig<f64>,
    mcfg: MpcConfig<f64>,
    rcfg: RewardConfig<f64>,
    gcfg: GustConfig<f64>,
    input_box: InputBox<f64>,
    merged: StateBox<f64>,
    n_actions: usize,
    limiter: RateLimiter,
    /// Allow tier-2 local retraining.
    retrain_enabled: bool,
    retrain_counter: usize,
    report: ControllerReport,
    pending: Vec<PendingCheck>,
}

impl<'a> MpcRlController<'a> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        db: &'a mut TransitionDb<f64>,
        p: PlantParams<f64>,
        fcfg: FilterConfig<f64>,
        mcfg: MpcConfig<f64>,
        rcfg: RewardConfig<f64>,
        gcfg: GustConfig<f64>,
        n_actions: usize,
        du_max: f64,
        retrain_enabled: bool,
    ) -> Self {
        let input_box = mcfg.input_box;
        let merged = mcfg.state_box.shrink(mcfg.margin_frac);
        MpcRlController {
            db,
            p,
            fcfg,
            mcfg,
            rcfg,
            gcfg,
            input_box,
            merged,
            n_actions,
            limiter: RateLimiter::new(du_max),
            retrain_enabled,
            retrain_counter: 0,
            report: ControllerReport::default(),
            pending: Vec::new(),
        }
    }

    fn dynamics(&self) -> impl Fn(&Vec5<f64>, f64, f64) -> Vec5<f64> + '_ {
        let p = self.p;
        move |x, u, w| plant::deriv_raw(&WingState::from_array(*x), u, w, &p)
    }

    /// Tier-2 local retraining: certify bounds at the query state under a
    /// fresh representative ensemble and store its ensemble-robust verified
    /// transitions (one per realization, sharing the robust action).
    fn retrain(&mut self, x: &WingState<f64>) -> Result<Vec<Transition<f64>>> {
        let ensemble =
            training_ensemble(x, self.fcfg.retrain_realizations, &self.gcfg, self.p.airspeed, self.p.sample_time)?;
        let mut group = Vec::new();
        for gust in ensemble {
            let bounds = match safe_bounds(x, &gust.samples, &self.mcfg, &self.p) {
                Ok(b) => b,
                Err(Error::Infeasible) | Err(Error::OutOfEnvelope(_)) | Err(Error::Other(_)) => continue,
                Err(e) => return Err(e),
            };
            self.retrain_counter += 1;
            group.push(crate::qlearn::TrainingPair {
                id: usize::MAX - self.retrain_counter,
                x0: *x,
                gust,
                bounds,
            });
        }
        let refs: Vec<&crate::qlearn::TrainingPair<f64>> = group.iter().collect();
        crate::pipeline::robust_transitions(
            x,
            &refs,
            &self.rcfg,
            self.n_actions,
            &self.merged,
            &self.mcfg.state_box,
            self.gcfg.w_max(),
            &self.p,
        )
    }

    /// Query → interpolate → rate-limit → estimate → certify; the certified
    /// input is exactly the one that will be applied.
    fn try_certify(&self, x: &WingState<f64>) -> Option<(ControlInput<f64>, f64, PendingCheck, usize)> {
        let neighbors = query_neighbors(x, self.db, &self.fcfg);
        if neighbors.is_empty() {
            return None;
        }
        let raw = interpolate(x, &neighbors, self.db, self.fcfg.epsilon, &self.input_box).ok()?;
        let u_star = ControlInput(self.input_box.clamp(self.limiter.clamp(raw.0)));
        let w_max = self.gcfg.w_max();
        let l = estimate_lipschitz(&self.dynamics(), x, u_star.0, self.db.weights(), w_max, &self.fcfg).ok()?;
        let outcome = certify(x, u_star.0, &neighbors, self.db, &l, self.p.sample_time, &self.fcfg);
        if !outcome.safe {
            return None;
        }
        let weights = self.db.weights();
        let l_bar_x = (0..STATE_DIM)
            .map(|j| {
                let v = weights[j] * l.l_x[j];
                v * v
            })
            .sum::<f64>()
            .sqrt();
        let snap = neighbors
            .iter()
            .zip(&outcome.deltas)
            .map(|(n, d)| {
                let t = &self.db.transitions()[n.index];
                NeighborEvidence {
                    x_bar: t.x_bar,
                    u_bar: t.u_bar,
                    delta: *d,
                    margin: t.margin_bar,
                    dist_w: n.distance,
                }
            })
            .collect();
        let pend = PendingCheck { k: 0, u_applied: u_star.0, l_bar_x, l_u: l.l_u, neighbors: snap };
        Some((u_star, outcome.max_ratio, pend, neighbors.len()))
    }
}

impl Controller for MpcRlController<'_> {
    fn name(&self) -> &'static str {
        "mpc-rl"
    }

    fn step(&mut self, k: usize, x: &WingState<f64>) -> ControlInput<f64> {
        if let Some((u, ratio, mut pend, n_nb)) = self.try_certify(x) {
            pend.k = k;
            self.pending.push(pend);
            self.report.certified_steps += 1;
            self.report.decisions.push(DecisionRecord {
                k,
                verdict: "safe",
                n_neighbors: n_nb,
                max_ratio: ratio,
                fallback_tier: 0,
            });
            return ControlInput(self.limiter.apply(u.0));
        }

        // Fallback: tier-2 local retraining when enabled, tier-1 hold
        // otherwise (or when retraining cannot certify the state).
        self.report.fallback_count += 1;
        if self.retrain_enabled {
            match self.retrain(x) {
                Ok(fresh) if !fresh.is_empty() => {
                    for t in fresh {
                        self.db.insert(t);
                    }
                    if let Some((u, ratio, mut pend, n_nb)) = self.try_certify(x) {
                        pend.k = k;
                        self.pending.push(pend);
                        self.report.certified_steps += 1;
                        self.report.tier2_count += 1;
                        self.report.decisions.push(DecisionRecord {
                            k,
                            verdict: "retrained",
                            n_neighbors: n_nb,
                            max_ratio: ratio,
                            fallback_tier: 2,
                        });
                        return ControlInput(self.limiter.apply(u.0));
                    }
                    self.report.envelope_exits += 1;
                }
                Ok(_) => self.report.envelope_exits += 1,
                Err(_) => self.report.envelope_exits += 1,
            }
        }
        self.report.decisions.push(DecisionRecord {
            k,
            verdict: "hold",
            n_neighbors: 0,
            max_ratio: 0.0,
            fallback_tier: 1,
        });
        let hold = self.input_box.clamp(x.beta_f);
        ControlInput(self.input_box.clamp(self.limiter.apply(hold)))
    }

    fn finalize(&mut self, traj: &Trajectory<f64>) {
        // Retrospective audit of every certified step against each selected
        // neighbor's verified successor recomputed under the recorded
        // disturbance (the bound's matched-disturbance form). Three layers:
        // the literal per-component bound δ, the stored margins δ̄, and the
        // weighted-norm Lipschitz bound; plus merged-set membership of the
        // realized successor.
        let h = self.p.sample_time * self.fcfg.n_bar.max(1) as f64;
        let weights = *self.db.weights();
        for pend in &self.pending {
            let Some(x_next) = traj.states.get(pend.k + 1) else { continue };
            let w_k = traj.gusts[pend.k];
            let xn = x_next.to_array();
            for nb in &pend.neighbors {
                let Ok(x_bar_plus) =
                    plant::step_euler(&nb.x_bar, ControlInput(nb.u_bar), Disturbance(w_k), &self.p)
                else {
                    continue;
                };
                let xb = x_bar_plus.to_array();
                let mut component_violated = false;
                let mut margin_violated = false;
                for i in 0..STATE_DIM {
                    let realized = (xn[i] - xb[i]).abs();
                    if realized > nb.delta[i] {
                        component_violated = true;
                    }
                    if realized > nb.margin[i] {
                        margin_violated = true;
                    }
                    if nb.delta[i] > 0.0 {
                        self.report.max_dev_ratio = self.report.max_dev_ratio.max(realized / nb.delta[i]);
                    }
                }
                if component_violated {
                    self.report.soundness_violations += 1;
                }
                if margin_violated {
                    self.report.margin_violations += 1;
                }
                let dev_w = linalg::weighted_norm(&linalg::sub(&xn, &xb), &weights);
                let du = (pend.u_applied - nb.u_bar).abs();
                let global_bound = (1.0 + h * pend.l_bar_x) * nb.dist_w + h * pend.l_u * du;
                if dev_w > global_bound {
                    self.report.global_bound_violations += 1;
                }
            }
            if !self.merged.contains(&xn) {
                self.report.merged_set_exits += 1;
            }
        }
        self.pending.clear();
    }

    fn report(&mut self) -> ControllerReport {
        std::mem::take(&mut self.report)
    }
}

/// Gust samples for a full episode: the turbulence phase followed by
/// recovery (zero gust).
pub fn episode_gusts(profile: &GustProfile<f64>, episode_steps: usize) -> Vec<f64> {
    let mut gusts = profile.samples.clone();
    gusts.truncate(episode_steps);
    gusts.resize(episode_steps, 0.0);
    gusts
}

/// Excursion thresholds measured once per gust profile from the open-loop
/// response.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct ExcursionThresholds {
    pub h: f64,
    pub alpha: f64,
}

fn alpha_series(traj: &Trajectory<f64>, p: &PlantParams<f64>) -> Vec<f64> {
    traj.states
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let w = traj.gusts.get(k).copied().unwrap_or(0.0);
            plant::alpha_eff(s, Disturbance(w), p).unwrap_or(f64::NAN)
        })
        .collect()
}

/// First index at or after `start` from which `|series|` stays within `band`
/// for the remainder; `len` when it never settles.
fn settle_index(series: &[f64], band: f64, start: usize) -> usize {
    let mut settle = series.len();
    for k in (start..series.len()).rev() {
        if series[k].abs() > band {
            return settle.min(series.len());
        }
        settle = k;
    }
    settle
}

fn count_excursions(series: &[f64], threshold: f64) -> usize {
    if threshold <= 0.0 {
        return 0;
    }
    let mut count = 0;
    for k in 1..series.len() {
        if series[k].abs() > threshold && series[k - 1].abs() <= threshold {
            count += 1;
        }
    }
    count
}

fn rms(series: impl Iterator<Item = f64>) -> f64 {
    let mut acc = 0.0;
    let mut n = 0usize;
    for v in series {
        acc += v * v;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        (acc / n as f64).sqrt()
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Compute trajectory-level metrics (the controller-independent part of
/// [`EpisodeMetrics`]).
pub fn compute_metrics(
    traj: &Trajectory<f64>,
    p: &PlantParams<f64>,
    state_box: &StateBox<f64>,
    hp: &HarnessParams,
    thresholds: ExcursionThresholds,
) -> EpisodeMetrics {
    let t = p.sample_time;
    let hw = state_box.half_widths();
    let h_series: Vec<f64> = traj.states.iter().map(|s| s.h).collect();
    let alpha = alpha_series(traj, p);
    let gust_end = hp.gust_steps.min(traj.states.len());

    let band_h = hp.settle_band_frac * hw[0];
    let band_alpha = hp.settle_band_frac * hp.alpha_max;
    let settle_h = (settle_index(&h_series, band_h, gust_end) - gust_end) as f64 * t;
    let settle_alpha = (settle_index(&alpha, band_alpha, gust_end) - gust_end) as f64 * t;

    // Actuator-increment metric over action-change events: steps with an
    // unchanged command do not enter the median, so a policy that rests and
    // then slews at the rate limit reads as 100%.
    let du_pct: Vec<f64> = traj
        .inputs
        .windows(2)
        .filter(|w| w[1] != w[0])
        .map(|w| ((w[1] - w[0]).abs() / hp.du_max * 100.0).min(100.0))
        .collect();

    let violation_count = traj
        .states
        .iter()
        .skip(1)
        .filter(|s| !state_box.contains(&s.to_array()))
        .count();

    EpisodeMetrics {
        max_overshoot_h: h_series.iter().fold(0.0, |a, &v| a.max(v.abs())),
        settle_h,
        max_alpha_eff_deg: alpha.iter().fold(0.0, |a: f64, &v| a.max(v.abs())).to_degrees(),
        settle_alpha,
        rms_vh_full: rms(traj.states.iter().map(|s| s.v_h)),
        rms_vh_post: rms(traj.states.iter().skip(gust_end).map(|s| s.v_h)),
        rms_vtheta_full: rms(traj.states.iter().map(|s| s.v_theta)),
        rms_vtheta_post: rms(traj.states.iter().skip(gust_end).map(|s| s.v_theta)),
        excursions_h: count_excursions(&h_series, thresholds.h),
        excursions_alpha: count_excursions(&alpha, thresholds.alpha),
        median_du_pct: median(du_pct),
        violation_count,
        ..EpisodeMetrics::default()
    }
}

/// Run one closed-loop episode and compute its metrics.
pub fn run_episode(
    controller: &mut dyn Controller,
    gusts: &[f64],
    x0: &WingState<f64>,
    p: &PlantParams<f64>,
    state_box: &StateBox<f64>,
    input_box: &InputBox<f64>,
    hp: &HarnessParams,
    thresholds: ExcursionThresholds,
) -> Result<(EpisodeMetrics, Trajectory<f64>)> {
    let traj = plant::simulate(x0, |k, x| controller.step(k, x), gusts, p, input_box)?;
    controller.finalize(&traj);
    let report = controller.report();
    let mut metrics = compute_metrics(&traj, p, state_box, hp, thresholds);
    metrics.fallback_count = report.fallback_count;
    metrics.tier2_count = report.tier2_count;
    metrics.certified_steps = report.certified_steps;
    metrics.soundness_violations = report.soundness_violations;
    metrics.global_bound_violations = report.global_bound_violations;
    metrics.margin_violations = report.margin_violations;
    metrics.merged_set_exits = report.merged_set_exits;
    metrics.max_dev_ratio = report.max_dev_ratio;
    metrics.envelope_exits = report.envelope_exits;
    Ok((metrics, traj))
}

/// Deterministic per-run seeds and initial state.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunSetup {
    pub run: usize,
    pub gust_seed: u64,
    pub x0_seed: u64,
    pub sigma: f64,
    pub x0: WingState<f64>,
}

/// Build the paired run setups for a campaign seed.
pub fn run_setups(cfg: &RunConfig, n_runs: usize, seed0: u64) -> Vec<RunSetup> {
    let sb = cfg.state_box();
    let hw = sb.half_widths();
    let frac = cfg.harness.inner_frac;
    (0..n_runs)
        .map(|r| {
            let gust_seed = mix_seed(seed0, 2 * r as u64);
            let x0_seed = mix_seed(seed0, 2 * r as u64 + 1);
            let mut rng = ChaCha8Rng::seed_from_u64(x0_seed);
            let mut x0 = [0.0f64; STATE_DIM];
            for (d, v) in x0.iter_mut().enumerate().take(4) {
                let half = hw[d] * frac;
                *v = rng.random_range(-half..half);
            }
            RunSetup {
                run: r,
                gust_seed,
                x0_seed,
                sigma: cfg.gust.sigma,
                x0: WingState::from_array(x0),
            }
        })
        .collect()
}

/// Gust profile for one run.
pub fn run_gusts(cfg: &RunConfig, p: &PlantParams<f64>, setup: &RunSetup, hp: &HarnessParams) -> Result<Vec<f64>> {
    let gcfg = cfg.gust_config();
    let profile = dryden_generate(
        setup.gust_seed,
        cfg.harness.gust_phase_s,
        p.airspeed,
        setup.sigma,
        gcfg.length_scale,
        p.sample_time,
        gcfg.w_max(),
    )?;
    Ok(episode_gusts(&profile, hp.episode_steps))
}

/// One controller's metrics for one run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunOutcome {
    pub run: usize,
    pub controller: String,
    pub metrics: EpisodeMetrics,
}

/// Full campaign output.
#[derive(Clone, Debug, Default)]
pub struct CampaignResult {
    pub setups: Vec<RunSetup>,
    /// Ordered run-major, controller order: lpv, rl, mpc-rl.
    pub outcomes: Vec<RunOutcome>,
    /// (run, controller, trajectory) for the first `timeseries_runs` runs.
    pub timeseries: Vec<(usize, String, Trajectory<f64>)>,
    /// Per-run filter decision logs for the recorded runs (mpc-rl only).
    pub decisions: Vec<(usize, Vec<DecisionRecord<f64>>)>,
    /// Per-run excursion thresholds from the open-loop response.
    pub thresholds: Vec<ExcursionThresholds>,
}

pub const CONTROLLERS: [&str; 3] = ["lpv", "rl", "mpc-rl"];

/// Everything the campaign needs besides the run configuration.
pub struct CampaignInputs<'a> {
    pub cfg: &'a RunConfig,
    pub p: &'a PlantParams<f64>,
    pub rl_qtable: &'a QTable<f64>,
    /// Trained transition database; the campaign clones it and lets tier-2
    /// retraining grow the copy across sequential runs.
    pub db: &'a TransitionDb<f64>,
}

/// Paired Monte Carlo comparison of the three controllers.
///
/// The LPV and RL baselines parallelize across runs; the MPC–RL episodes run
/// sequentially so tier-2 database growth stays deterministic. Every
/// controller sees identical gusts and initial states.
pub fn monte_carlo(inputs: &CampaignInputs<'_>, n_runs: usize, seed0: u64) -> Result<CampaignResult> {
    use rayon::prelude::*;

    let cfg = inputs.cfg;
    let p = inputs.p;
    let hp = HarnessParams::from_config(cfg, p.sample_time);
    let sb = cfg.state_box();
    let ib = cfg.input_box();
    let mcfg = cfg.mpc_config();
    let fcfg = cfg.filter_config()?;
    let rcfg = cfg.reward_config();
    let gcfg = cfg.gust_config();

    let setups = run_setups(cfg, n_runs, seed0);
    let all_gusts: Vec<Vec<f64>> = setups
        .iter()
        .map(|s| run_gusts(cfg, p, s, &hp))
        .collect::<Result<_>>()?;

    // Open-loop pass: excursion thresholds per profile.
    let open_loop: Vec<(ExcursionThresholds, Trajectory<f64>)> = setups
        .par_iter()
        .zip(&all_gusts)
        .map(|(s, gusts)| {
            let traj = plant::simulate(&s.x0, |_, _| ControlInput(0.0), gusts, p, &ib)?;
            let h_max = traj.states.iter().fold(0.0f64, |a, st| a.max(st.h.abs()));
            let alpha = alpha_series(&traj, p);
            let a_max = alpha.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            Ok((
                ExcursionThresholds { h: hp.excursion_frac * h_max, alpha: hp.excursion_frac * a_max },
                traj,
            ))
        })
        .collect::<Result<_>>()?;
    let thresholds: Vec<ExcursionThresholds> = open_loop.iter().map(|(t, _)| *t).collect();

    // Parallel baselines.
    let lpv_runs: Vec<(EpisodeMetrics, Trajectory<f64>)> = setups
        .par_iter()
        .zip(&all_gusts)
        .zip(&thresholds)
        .map(|((s, gusts), thr)| {
            let mut ctrl = LpvMpcController::new(*p, mcfg, hp.du_max);
            run_episode(&mut ctrl, gusts, &s.x0, p, &sb, &ib, &hp, *thr)
        })
        .collect::<Result<_>>()?;

    let rl_runs: Vec<(EpisodeMetrics, Trajectory<f64>)> = setups
        .par_iter()
        .zip(&all_gusts)
        .zip(&thresholds)
        .map(|((s, gusts), thr)| {
            let mut ctrl = RlController::new(inputs.rl_qtable, ib, sb.half_widths(), hp.du_max);
            run_episode(&mut ctrl, gusts, &s.x0, p, &sb, &ib, &hp, *thr)
        })
        .collect::<Result<_>>()?;

    // Sequential MPC–RL with a shared, growing database.
    let mut db = inputs.db.clone();
    let mut mpcrl_runs = Vec::with_capacity(n_runs);
    let mut decisions = Vec::new();
    for ((s, gusts), thr) in setups.iter().zip(&all_gusts).zip(&thresholds) {
        let mut ctrl = MpcRlController::new(
            &mut db,
            *p,
            fcfg,
            mcfg,
            rcfg,
            gcfg,
            cfg.qlearn.n_actions,
            hp.du_max,
            true,
        );
        let traj = plant::simulate(&s.x0, |k, x| ctrl.step(k, x), gusts, p, &ib)?;
        ctrl.finalize(&traj);
        let report = ctrl.report();
        let mut metrics = compute_metrics(&traj, p, &sb, &hp, *thr);
        metrics.fallback_count = report.fallback_count;
        metrics.tier2_count = report.tier2_count;
        metrics.certified_steps = report.certified_steps;
        metrics.soundness_violations = report.soundness_violations;
        metrics.global_bound_violations = report.global_bound_violations;
        metrics.margin_violations = report.margin_violations;
        metrics.merged_set_exits = report.merged_set_exits;
        metrics.max_dev_ratio = report.max_dev_ratio;
        metrics.envelope_exits = report.envelope_exits;
        if s.run < cfg.harness.timeseries_runs {
            decisions.push((s.run, report.decisions));
        }
        mpcrl_runs.push((metrics, traj));
    }

    let mut result = CampaignResult { setups, thresholds, ..CampaignResult::default() };
    for r in 0..n_runs {
        result.outcomes.push(RunOutcome { run: r, controller: "lpv".into(), metrics: lpv_runs[r].0.clone() });
        result.outcomes.push(RunOutcome { run: r, controller: "rl".into(), metrics: rl_runs[r].0.clone() });
        result.outcomes.push(RunOutcome { run: r, controller: "mpc-rl".into(), metrics: mpcrl_runs[r].0.clone() });
        if r < cfg.harness.timeseries_runs {
            result.timeseries.push((r, "open-loop".into(), open_loop[r].1.clone()));
            result.timeseries.push((r, "lpv".into(), lpv_runs[r].1.clone()));
            result.timeseries.push((r, "rl".into(), rl_runs[r].1.clone()));
            result.timeseries.push((r, "mpc-rl".into(), mpcrl_runs[r].1.clone()));
        }
    }
    result.decisions = decisions;
    Ok(result)
}

/// Column-wise means per controller.
pub fn summarize(result: &CampaignResult) -> Vec<(String, EpisodeMetrics)> {
    CONTROLLERS
        .iter()
        .map(|&name| {
            let rows: Vec<&EpisodeMetrics> = result
                .outcomes
                .iter()
                .filter(|o| o.controller == name)
                .map(|o| &o.metrics)
                .collect();
            let n = rows.len().max(1) as f64;
            let mean = |f: fn(&EpisodeMetrics) -> f64| rows.iter().map(|m| f(m)).sum::<f64>() / n;
            let mean_u = |f: fn(&EpisodeMetrics) -> usize| rows.iter().map(|m| f(m) as f64).sum::<f64>() / n;
            (
                name.to_string(),
                EpisodeMetrics {
                    max_overshoot_h: mean(|m| m.max_overshoot_h),
                    settle_h: mean(|m| m.settle_h),
                    max_alpha_eff_deg: mean(|m| m.max_alpha_eff_deg),
                    settle_alpha: mean(|m| m.settle_alpha),
                    rms_vh_full: mean(|m| m.rms_vh_full),
                    rms_vh_post: mean(|m| m.rms_vh_post),
                    rms_vtheta_full: mean(|m| m.rms_vtheta_full),
                    rms_vtheta_post: mean(|m| m.rms_vtheta_post),
                    excursions_h: 0,
                    excursions_alpha: 0,
                    median_du_pct: mean(|m| m.median_du_pct),
                    fallback_count: mean_u(|m| m.fallback_count) as usize,
                    violation_count: rows.iter().map(|m| m.violation_count).sum(),
                    tier2_count: mean_u(|m| m.tier2_count) as usize,
                    certified_steps: mean_u(|m| m.certified_steps) as usize,
                    soundness_violations: rows.iter().map(|m| m.soundness_violations).sum(),
                    global_bound_violations: rows.iter().map(|m| m.global_bound_violations).sum(),
                    margin_violations: rows.iter().map(|m| m.margin_violations).sum(),
                    merged_set_exits: rows.iter().map(|m| m.merged_set_exits).sum(),
                    max_dev_ratio: rows.iter().map(|m| m.max_dev_ratio).fold(0.0, f64::max),
                    envelope_exits: rows.iter().map(|m| m.envelope_exits).sum(),
                },
            )
        })
        .collect()
}

/// Mean excursion counts need float precision; exposed separately for the
/// summary CSV.
pub fn mean_excursions(result: &CampaignResult, controller: &str) -> (f64, f64) {
    let rows: Vec<&EpisodeMetrics> = result
        .outcomes
        .iter()
        .filter(|o| o.controller == controller)
        .map(|o| &o.metrics)
        .collect();
    let n = rows.len().max(1) as f64;
    (
        rows.iter().map(|m| m.excursions_h as f64).sum::<f64>() / n,
        rows.iter().map(|m| m.excursions_alpha as f64).sum::<f64>() / n,
    )
}

/// `metrics_summary.csv` body: one row per controller.
pub fn summary_csv(result: &CampaignResult) -> String {
    let mut out = String::from("controller,");
    out.push_str(EpisodeMetrics::CSV_FIELDS);
    out.push_str(",mean_excursions_h,mean_excursions_alpha\n");
    for (name, mean) in summarize(result) {
        let (eh, ea) = mean_excursions(result, &name);
        out.push_str(&format!("{},{},{},{}\n", name, mean.csv_row(), eh, ea));
    }
    out
}

/// `metrics_runs.csv` body: one row per run per controller.
pub fn runs_csv(result: &CampaignResult) -> String {
    let mut out = String::from("run,controller,gust_seed,x0_seed,sigma,x0_h,x0_theta,x0_v_h,x0_v_theta,x0_beta_f,");
    out.push_str(EpisodeMetrics::CSV_FIELDS);
    out.push('\n');
    for o in &result.outcomes {
        let s = &result.setups[o.run];
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            o.run,
            o.controller,
            s.gust_seed,
            s.x0_seed,
            s.sigma,
            s.x0.h,
            s.x0.theta,
            s.x0.v_h,
            s.x0.v_theta,
            s.x0.beta_f,
            o.metrics.csv_row()
        ));
    }
    out
}

/// Manifest row for `runs.jsonl`; everything replay needs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub run: usize,
    pub gust_seed: u64,
    pub x0_seed: u64,
    pub sigma: f64,
    pub x0: WingState<f64>,
    pub thresholds: ExcursionThresholds,
}

/// Write the campaign artifacts: summary and per-run CSVs, the run manifest,
/// per-step time series for the recorded runs, and the filter decision logs.
pub fn write_campaign_outputs(
    result: &CampaignResult,
    out: &std::path::Path,
    config_hash: &str,
    sample_time: f64,
) -> Result<()> {
    std::fs::create_dir_all(out)?;
    crate::persist::write_csv_with_hash(&out.join("metrics_summary.csv"), config_hash, &summary_csv(result))?;
    crate::persist::write_csv_with_hash(&out.join("metrics_runs.csv"), config_hash, &runs_csv(result))?;
    let manifest: Vec<RunManifest> = result
        .setups
        .iter()
        .zip(&result.thresholds)
        .map(|(s, t)| RunManifest {
            run: s.run,
            gust_seed: s.gust_seed,
            x0_seed: s.x0_seed,
            sigma: s.sigma,
            x0: s.x0,
            thresholds: *t,
        })
        .collect();
    crate::persist::write_jsonl(&out.join("runs.jsonl"), config_hash, &manifest)?;

    if !result.timeseries.is_empty() {
        let ts_dir = out.join("timeseries");
        std::fs::create_dir_all(&ts_dir)?;
        for (run, controller, traj) in &result.timeseries {
            let mut body = Vec::new();
            traj.write_csv(&mut body, sample_time)?;
            crate::persist::write_csv_with_hash(
                &ts_dir.join(format!("{run}_{controller}.csv")),
                config_hash,
                &String::from_utf8_lossy(&body),
            )?;
        }
    }
    if !result.decisions.is_empty() {
        let dec_dir = out.join("decisions");
        std::fs::create_dir_all(&dec_dir)?;
        for (run, rows) in &result.decisions {
            let mut body = Vec::new();
            crate::filter::write_decision_log(rows, &mut body)?;
            crate::persist::write_csv_with_hash(
                &dec_dir.join(format!("{run}.csv")),
                config_hash,
                &String::from_utf8_lossy(&body),
            )?;
        }
    }
    Ok(())
}

/// The qualitative orderings the paper's tables report, checked on campaign
/// means: MPC–RL does not overshoot more than either baseline, the pure RL
/// baseline saturates the actuator-increment metric, and MPC–RL stays smooth.
pub fn check_orderings(result: &CampaignResult) -> Vec<String> {
    let summary = summarize(result);
    let get = |name: &str| summary.iter().find(|(n, _)| n == name).map(|(_, m)| m.clone()).unwrap();
    let lpv = get("lpv");
    let rl = get("rl");
    let mpcrl = get("mpc-rl");
    let mut failures = Vec::new();
    if mpcrl.max_overshoot_h > lpv.max_overshoot_h {
        failures.push(format!(
            "mean plunge overshoot: mpc-rl {} > lpv {}",
            mpcrl.max_overshoot_h, lpv.max_overshoot_h
        ));
    }
    if mpcrl.max_overshoot_h > rl.max_overshoot_h {
        failures.push(format!(
            "mean plunge overshoot: mpc-rl {} > rl {}",
            mpcrl.max_overshoot_h, rl.max_overshoot_h
        ));
    }
    if rl.median_du_pct < 90.0 {
        failures.push(format!("rl median actuator increment {} < 90%", rl.median_du_pct));
    }
    if mpcrl.median_du_pct > 20.0 {
        failures.push(format!("mpc-rl median actuator increment {} > 20%", mpcrl.median_du_pct));
    }
    failures
}
