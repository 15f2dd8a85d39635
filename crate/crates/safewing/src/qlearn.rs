//! Tabular Q-learning over MPC-bounded action sets.
//!
//! Each (initial state, gust realization) pair is a deterministic
//! micro-environment: every discretized action inside the pair's certified
//! interval is evaluated by a fixed-length rollout, and the tabular update
//! writes the immediate return plus an optional bootstrapped long-term term
//! (γ = 0 reproduces the pure single-interaction scheme).

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::float::Float;
use crate::gust::GustProfile;
use crate::linalg::{self, Mat5, Vec5, STATE_DIM};
use crate::mpc::SafeBounds;
use crate::plant::{self, PlantParams};
use crate::state::{ControlInput, InputBox, StateBox, WingState};

/// Uniform cell grid over the admissible envelope.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct StateGrid<T> {
    pub envelope: StateBox<T>,
    pub bins: [usize; STATE_DIM],
}

impl<T: Float> StateGrid<T> {
    pub fn new(envelope: StateBox<T>, bins: [usize; STATE_DIM]) -> Result<Self> {
        if bins.iter().any(|&b| b == 0) {
            return Err(Error::config("grid bins must be >= 1 per dimension"));
        }
        if !envelope.is_valid() {
            return Err(Error::config("grid envelope is degenerate"));
        }
        Ok(StateGrid { envelope, bins })
    }

    pub fn n_cells(&self) -> usize {
        self.bins.iter().product()
    }

    /// Flattened cell index; out-of-box states clamp to the edge cells.
    pub fn cell_index(&self, x: &Vec5<T>) -> usize {
        let mut idx = 0usize;
        for d in 0..STATE_DIM {
            let width = (self.envelope.hi[d] - self.envelope.lo[d]) / T::from_usize(self.bins[d]).unwrap();
            let raw = ((x[d] - self.envelope.lo[d]) / width).floor();
            let bin = raw.to_usize().unwrap_or(0).min(self.bins[d] - 1);
            idx = idx * self.bins[d] + bin;
        }
        idx
    }

    pub fn cell_center(&self, mut idx: usize) -> Vec5<T> {
        let mut coords = [0usize; STATE_DIM];
        for d in (0..STATE_DIM).rev() {
            coords[d] = idx % self.bins[d];
            idx /= self.bins[d];
        }
        std::array::from_fn(|d| {
            let width = (self.envelope.hi[d] - self.envelope.lo[d]) / T::from_usize(self.bins[d]).unwrap();
            self.envelope.lo[d] + width * (T::from_usize(coords[d]).unwrap() + T::of(0.5))
        })
    }

    /// Half-diagonal of one cell in the weighted norm; the filter derives its
    /// neighborhood radius from this.
    pub fn cell_half_diagonal(&self, weights: &Vec5<T>) -> T {
        let mut acc = T::zero();
        for d in 0..STATE_DIM {
            let width = (self.envelope.hi[d] - self.envelope.lo[d]) / T::from_usize(self.bins[d]).unwrap();
            let z = width / (T::of(2.0) * weights[d]);
            acc += z * z;
        }
        acc.sqrt()
    }
}

/// Quadratic reward weights and the rollout length used to score an action.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct RewardConfig<T> {
    /// State-deviation weight (PSD).
    pub q: Mat5<T>,
    /// Input-effort weight (>= 0).
    pub r: T,
    /// Rollout length for reward evaluation (steps).
    pub rollout_steps: usize,
}

impl<T: Float> RewardConfig<T> {
    /// Diagonal weights normalized by the envelope half-widths, effort weight
    /// 0.1 in normalized input units.
    pub fn normalized(envelope: &StateBox<T>, input_box: &InputBox<T>) -> Self {
        let hw = envelope.half_widths();
        let mut q = linalg::mat_zeros::<T>();
        for i in 0..STATE_DIM {
            q[i][i] = T::one() / (hw[i] * hw[i]);
        }
        let uh = input_box.half_width();
        RewardConfig { q, r: T::of(0.1) / (uh * uh), rollout_steps: 50 }
    }
}

/// Tabular learning knobs.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct QConfig<T> {
    /// Action levels per certified interval.
    pub n_actions: usize,
    /// Bootstrap discount; 0 = literal single-interaction updates.
    pub gamma: T,
    /// Maximum sweeps over the pair set.
    pub n_sweeps: usize,
    /// Stop when the largest per-sweep Q change falls below this.
    pub tolerance: T,
}

impl<T: Float> Default for QConfig<T> {
    fn default() -> Self {
        QConfig { n_actions: 15, gamma: T::zero(), n_sweeps: 8, tolerance: T::of(1e-9) }
    }
}

/// One deterministic micro-environment: a sampled state, its disturbance
/// realization, and the certified action interval.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainingPair<T> {
    pub id: usize,
    pub x0: WingState<T>,
    pub gust: GustProfile<T>,
    pub bounds: SafeBounds<T>,
}

/// Value entry for one (cell, action index).
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct QEntry<T> {
    pub q: T,
    /// Actual command the action index mapped to when last written.
    pub u: T,
    pub visits: u32,
}

/// Sparse tabular value function.
#[derive(Clone, Debug)]
pub struct QTable<T> {
    pub grid: StateGrid<T>,
    pub n_actions: usize,
    entries: HashMap<(usize, usize), QEntry<T>>,
}

/// Flat record used for JSON persistence.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QRecord<T> {
    pub cell: usize,
    pub action: usize,
    pub q: T,
    pub u: T,
    pub visits: u32,
}

impl<T: Float> QTable<T> {
    pub fn new(grid: StateGrid<T>, n_actions: usize) -> Self {
        QTable { grid, n_actions, entries: HashMap::new() }
    }

    pub fn get(&self, cell: usize, action: usize) -> Option<&QEntry<T>> {
        self.entries.get(&(cell, action))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn write(&mut self, cell: usize, action: usize, q: T, u: T) -> T {
        let e = self.entries.entry((cell, action)).or_insert(QEntry { q, u, visits: 0 });
        let change = if e.visits == 0 { q.abs() } else { (e.q - q).abs() };
        e.q = q;
        e.u = u;
        e.visits += 1;
        change
    }

    /// Best recorded value in a cell, if any (used for bootstrapping).
    pub fn cell_value(&self, cell: usize) -> Option<T> {
        let mut best: Option<T> = None;
        for a in 0..self.n_actions {
            if let Some(e) = self.entries.get(&(cell, a)) {
                best = Some(best.map_or(e.q, |b: T| b.max(e.q)));
            }
        }
        best
    }

    /// Greedy action for a cell: argmax over recorded actions, ties broken
    /// toward the smallest |u|.
    pub fn greedy(&self, cell: usize) -> Option<ControlInput<T>> {
        let mut best: Option<(T, T)> = None;
        for a in 0..self.n_actions {
            if let Some(e) = self.entries.get(&(cell, a)) {
                let better = match best {
                    None => true,
                    Some((bq, bu)) => e.q > bq || (e.q == bq && e.u.abs() < bu.abs()),
                };
                if better {
                    best = Some((e.q, e.u));
                }
            }
        }
        best.map(|(_, u)| ControlInput(u))
    }

    /// Cells with at least one recorded action, sorted.
    pub fn visited_cells(&self) -> Vec<usize> {
        let mut cells: Vec<usize> = self.entries.keys().map(|&(c, _)| c).collect();
        cells.sort_unstable();
        cells.dedup();
        cells
    }

    pub fn to_records(&self) -> Vec<QRecord<T>> {
        let mut keys: Vec<&(usize, usize)> = self.entries.keys().collect();
        keys.sort_unstable();
        keys.into_iter()
            .map(|&(cell, action)| {
                let e = &self.entries[&(cell, action)];
                QRecord { cell, action, q: e.q, u: e.u, visits: e.visits }
            })
            .collect()
    }

    pub fn from_records(grid: StateGrid<T>, n_actions: usize, records: Vec<QRecord<T>>) -> Self {
        let mut t = QTable::new(grid, n_actions);
        for r in records {
            t.entries.insert((r.cell, r.action), QEntry { q: r.q, u: r.u, visits: r.visits });
        }
        t
    }
}

/// Tensor-product sampling over (h, θ, v_h, v_θ) with β_f = 0, spanning the
/// given sampling box edge to edge; deterministic ordering, no duplicates.
///
/// The sampling box is normally an inner fraction of the admissible
/// envelope: states on the envelope boundary itself can never keep their
/// two-step trajectories inside it, so boundary pairs would only be dropped.
pub fn sample_initial_states<T: Float>(env: &StateBox<T>, n_per_dim: usize) -> Result<Vec<WingState<T>>> {
    if n_per_dim < 2 {
        return Err(Error::config("n_per_dim must be >= 2"));
    }
    let axes: Vec<Vec<T>> = (0..4).map(|d| linalg::linspace(env.lo[d], env.hi[d], n_per_dim)).collect();
    let mut out = Vec::with_capacity(n_per_dim.pow(4));
    for &h in &axes[0] {
        for &theta in &axes[1] {
            for &v_h in &axes[2] {
                for &v_theta in &axes[3] {
                    out.push(WingState::new(h, theta, v_h, v_theta, T::zero()));
                }
            }
        }
    }
    Ok(out)
}

/// Outcome of scoring one action in its micro-environment.
#[derive(Clone, Copy, Debug)]
pub struct ActionOutcome<T> {
    pub reward: T,
    pub end_state: WingState<T>,
    pub violated: bool,
}

/// Deterministic rollout holding the commanded input; accumulates
/// `−(xᵀ Q_r x + R_r u²)` per step. A state-constraint violation yields the
/// −∞ sentinel and the violation flag (certified actions should never hit it).
pub fn evaluate_action<T: Float>(
    x0: &WingState<T>,
    gust: &GustProfile<T>,
    u: ControlInput<T>,
    reward_cfg: &RewardConfig<T>,
    p: &PlantParams<T>,
    envelope: &StateBox<T>,
) -> Result<ActionOutcome<T>> {
    if gust.samples.len() < reward_cfg.rollout_steps {
        return Err(Error::config("gust realization shorter than the reward rollout"));
    }
    let mut cur = *x0;
    let mut reward = T::zero();
    for k in 0..reward_cfg.rollout_steps {
        cur = plant::step_euler(&cur, u, crate::state::Disturbance(gust.samples[k]), p)?;
        let xa = cur.to_array();
        reward -= linalg::dot(&xa, &linalg::matvec(&reward_cfg.q, &xa)) + reward_cfg.r * u.0 * u.0;
        if !envelope.contains(&xa) {
            return Ok(ActionOutcome { reward: T::neg_infinity(), end_state: cur, violated: true });
        }
    }
    Ok(ActionOutcome { reward, end_state: cur, violated: false })
}

/// Per-pair training log row.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainLogRow<T> {
    pub pair_id: usize,
    pub cell: usize,
    pub best_action: T,
    pub best_reward: T,
    pub violations: usize,
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport<T> {
    pub rows: Vec<TrainLogRow<T>>,
    /// Largest Q change per sweep, for convergence diagnostics.
    pub sweep_deltas: Vec<T>,
    pub violations: usize,
}

impl<T: Float> TrainReport<T> {
    pub fn write_csv<W: std::io::Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "pair_id,cell,best_action,best_reward,violations")?;
        for r in &self.rows {
            writeln!(out, "{},{},{},{},{}", r.pair_id, r.cell, r.best_action, r.best_reward, r.violations)?;
        }
        Ok(())
    }
}

/// Exhaustive evaluation of every discretized action per pair, then sweeps of
/// learning-rate-1 tabular updates with a nearest-cell bootstrapped long-term
/// term until the largest Q change drops below tolerance.
///
/// Rollout scoring parallelizes across pairs; table writes happen in pair
/// order so training is bit-reproducible.
pub fn train<T: Float>(
    pairs: &[TrainingPair<T>],
    grid: &StateGrid<T>,
    reward_cfg: &RewardConfig<T>,
    qcfg: &QConfig<T>,
    p: &PlantParams<T>,
) -> Result<(QTable<T>, TrainReport<T>)> {
    if qcfg.n_actions < 1 {
        return Err(Error::config("n_actions must be >= 1"));
    }
    // Score all (pair, action) rollouts once; they do not depend on Q.
    let scored: Vec<(Vec<T>, Vec<ActionOutcome<T>>)> = pairs
        .par_iter()
        .map(|pair| {
            let actions = linalg::linspace(pair.bounds.u_min, pair.bounds.u_max, qcfg.n_actions);
            let outcomes = actions
                .iter()
                .map(|&u| evaluate_action(&pair.x0, &pair.gust, ControlInput(u), reward_cfg, p, &grid.envelope))
                .collect::<Result<Vec<_>>>()?;
            Ok((actions, outcomes))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut table = QTable::new(*grid, qcfg.n_actions);
    let mut report = TrainReport::default();

    for _sweep in 0..qcfg.n_sweeps.max(1) {
        let mut max_change = T::zero();
        for (pair, (actions, outcomes)) in pairs.iter().zip(&scored) {
            let cell = grid.cell_index(&pair.x0.to_array());
            for (a_idx, (&u, outcome)) in actions.iter().zip(outcomes).enumerate() {
                let bootstrap = if qcfg.gamma > T::zero() {
                    let next_cell = grid.cell_index(&outcome.end_state.to_array());
                    table.cell_value(next_cell).unwrap_or(T::zero())
                } else {
                    T::zero()
                };
                let q = outcome.reward + qcfg.gamma * bootstrap;
                // The violation sentinel never enters the table: values stay
                // finite and violating actions are simply not recorded.
                if q.is_finite() {
                    max_change = max_change.max(table.write(cell, a_idx, q, u));
                }
            }
        }
        report.sweep_deltas.push(max_change);
        if max_change < qcfg.tolerance {
            break;
        }
    }

    for (pair, (actions, outcomes)) in pairs.iter().zip(&scored) {
        let cell = grid.cell_index(&pair.x0.to_array());
        let mut best = 0usize;
        for (i, o) in outcomes.iter().enumerate() {
            let better = o.reward > outcomes[best].reward
                || (o.reward == outcomes[best].reward && actions[i].abs() < actions[best].abs());
            if better {
                best = i;
            }
        }
        let violations = outcomes.iter().filter(|o| o.violated).count();
        report.violations += violations;
        report.rows.push(TrainLogRow {
            pair_id: pair.id,
            cell,
            best_action: actions[best],
            best_reward: outcomes[best].reward,
            violations,
        });
    }
    Ok((table, report))
}

/// Greedy policy lookup; `None` signals an unvisited cell (deployment falls
/// back to the safety filter's machinery).
pub fn policy<T: Float>(x: &WingState<T>, table: &QTable<T>) -> Option<ControlInput<T>> {
    table.greedy(table.grid.cell_index(&x.to_array()))
}

/// Greedy lookup with nearest-visited-cell fallback under the weighted norm;
/// the baseline RL controller uses this so it always returns a stored action.
pub fn policy_nearest<T: Float>(
    x: &WingState<T>,
    table: &QTable<T>,
    weights: &Vec5<T>,
) -> Option<ControlInput<T>> {
    if let Some(u) = policy(x, table) {
        return Some(u);
    }
    let xa = x.to_array();
    let mut best: Option<(T, usize)> = None;
    for cell in table.visited_cells() {
        let center = table.grid.cell_center(cell);
        let d = linalg::weighted_norm(&linalg::sub(&xa, &center), weights);
        if best.map_or(true, |(bd, _)| d < bd) {
            best = Some((d, cell));
        }
    }
    best.and_then(|(_, cell)| table.greedy(cell))
}
