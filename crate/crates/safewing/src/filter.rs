//! Deployment-time Lipschitz safety filter.
//!
//! Per control step: query the verified-transition database for neighbors of
//! the current state, interpolate their stored actions by inverse distance,
//! estimate local Lipschitz constants of the dynamics by small perturbations
//! (robustified over the disturbance bound), bound the deviation of the next
//! state from each neighbor's verified successor, and certify the
//! interpolated action only if every per-component bound fits inside the
//! stored safety margins. Uncertifiable steps fall back to holding the
//! actuator or to local retraining.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::float::Float;
use crate::linalg::{self, Vec5, STATE_DIM};
use crate::state::{ControlInput, InputBox, StateBox, WingState};

/// Verified one-step transition stored for deployment interpolation.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Transition<T> {
    pub x_bar: WingState<T>,
    pub u_bar: T,
    pub x_plus: WingState<T>,
    /// Per-component distance of `x_plus` to the merged safe set boundary.
    pub margin_bar: Vec5<T>,
    /// Seed of the gust realization the transition was verified under.
    pub gust_seed: u64,
    /// Training pair (or retraining event) the transition came from.
    pub pair_id: usize,
}

/// Neighborhood rule: k-nearest under the weighted norm, with a radius cap.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct FilterConfig<T> {
    /// Neighbors per query.
    pub k: usize,
    /// Radius cap in the weighted norm.
    pub r_max: T,
    /// Inverse-distance regularization ε.
    pub epsilon: T,
    /// Control perturbation for the L_u probe (rad).
    pub h_u: T,
    /// State perturbation for the L_x probes, as a fraction of each
    /// normalizing magnitude c_i.
    pub h_x: T,
    /// Delay-adjusted bound: the deviation horizon is `n_bar · T` steps.
    /// 1 = plain one-step bound; 8 matches the 8 ms actuation lag.
    pub n_bar: usize,
    /// Fresh gust realizations used by tier-2 local retraining.
    pub retrain_realizations: usize,
}

impl<T: Float> Default for FilterConfig<T> {
    fn default() -> Self {
        FilterConfig {
            k: 8,
            r_max: T::of(0.5),
            epsilon: T::of(1e-9),
            h_u: T::of(1e-4),
            h_x: T::of(1e-4),
            n_bar: 8,
            retrain_realizations: 8,
        }
    }
}

/// Database of verified transitions with a uniform-bucket spatial index over
/// the weighted coordinates.
#[derive(Clone, Debug)]
pub struct TransitionDb<T> {
    transitions: Vec<Transition<T>>,
    /// Normalizing magnitudes c_i of the weighted norm.
    weights: Vec5<T>,
    /// Bucket edge length equals the query radius, so a query only has to
    /// scan the 3^5 neighboring buckets.
    bucket_size: T,
    buckets: std::collections::HashMap<[i64; STATE_DIM], Vec<usize>>,
}

impl<T: Float> TransitionDb<T> {
    pub fn new(weights: Vec5<T>, r_max: T) -> Self {
        TransitionDb {
            transitions: Vec::new(),
            weights,
            bucket_size: r_max,
            buckets: std::collections::HashMap::new(),
        }
    }

    pub fn weights(&self) -> &Vec5<T> {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn transitions(&self) -> &[Transition<T>] {
        &self.transitions
    }

    fn bucket_of(&self, x: &Vec5<T>) -> [i64; STATE_DIM] {
        std::array::from_fn(|i| {
            (x[i] / (self.weights[i] * self.bucket_size))
                .floor()
                .to_i64()
                .unwrap_or(0)
        })
    }

    pub fn insert(&mut self, t: Transition<T>) {
        let key = self.bucket_of(&t.x_bar.to_array());
        let idx = self.transitions.len();
        self.transitions.push(t);
        self.buckets.entry(key).or_default().push(idx);
    }

    pub fn from_transitions(transitions: Vec<Transition<T>>, weights: Vec5<T>, r_max: T) -> Self {
        let mut db = TransitionDb::new(weights, r_max);
        for t in transitions {
            db.insert(t);
        }
        db
    }

    fn distance(&self, a: &Vec5<T>, b: &Vec5<T>) -> T {
        linalg::weighted_norm(&linalg::sub(a, b), &self.weights)
    }
}

/// A query hit: transition index and weighted distance.
#[derive(Clone, Copy, Debug)]
pub struct Neighbor<T> {
    pub index: usize,
    pub distance: T,
}

/// k nearest stored transitions within the radius cap; an empty result
/// signals an out-of-regime query.
pub fn query_neighbors<T: Float>(
    x: &WingState<T>,
    db: &TransitionDb<T>,
    cfg: &FilterConfig<T>,
) -> Vec<Neighbor<T>> {
    let xa = x.to_array();
    let center = db.bucket_of(&xa);
    let mut hits: Vec<Neighbor<T>> = Vec::new();
    let mut offsets = [[0i64; STATE_DIM]; 243];
    for (n, off) in offsets.iter_mut().enumerate() {
        let mut m = n;
        for o in off.iter_mut() {
            *o = (m % 3) as i64 - 1;
            m /= 3;
        }
    }
    for off in &offsets {
        let key: [i64; STATE_DIM] = std::array::from_fn(|i| center[i] + off[i]);
        if let Some(indices) = db.buckets.get(&key) {
            for &idx in indices {
                let d = db.distance(&xa, &db.transitions[idx].x_bar.to_array());
                if d <= cfg.r_max {
                    hits.push(Neighbor { index: idx, distance: d });
                }
            }
        }
    }
    hits.sort_by(|a, b| {
        a.distance
            .partial_cmp(&b.distance)
            .unwrap()
            .then(a.index.cmp(&b.index))
    });
    hits.truncate(cfg.k);
    hits
}

/// Inverse-distance interpolation of the neighbors' stored actions,
/// clipped to the actuator box. Weights are `∝ 1/(d + ε)` and normalized.
pub fn interpolate<T: Float>(
    x: &WingState<T>,
    neighbors: &[Neighbor<T>],
    db: &TransitionDb<T>,
    epsilon: T,
    input_box: &InputBox<T>,
) -> Result<ControlInput<T>> {
    if neighbors.is_empty() {
        return Err(Error::config("interpolate requires at least one neighbor"));
    }
    if epsilon <= T::zero() {
        return Err(Error::config("interpolation epsilon must be positive"));
    }
    let _ = x;
    let raw: Vec<T> = neighbors.iter().map(|n| T::one() / (n.distance + epsilon)).collect();
    let total: T = raw.iter().copied().sum();
    let mut u = T::zero();
    for (n, w) in neighbors.iter().zip(&raw) {
        u += *w / total * db.transitions[n.index].u_bar;
    }
    Ok(ControlInput(input_box.clamp(u)))
}

/// Normalized interpolation weights (exposed for the weight invariants).
pub fn interpolation_weights<T: Float>(neighbors: &[Neighbor<T>], epsilon: T) -> Vec<T> {
    let raw: Vec<T> = neighbors.iter().map(|n| T::one() / (n.distance + epsilon)).collect();
    let total: T = raw.iter().copied().sum();
    raw.into_iter().map(|w| w / total).collect()
}

/// Local sensitivity estimates of the dynamics at the current step.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LipschitzEstimates<T> {
    /// Weighted-norm sensitivity to control perturbations.
    pub l_u: T,
    /// Per-component weighted-norm sensitivities to state perturbations.
    pub l_x: Vec5<T>,
}

/// Estimate local Lipschitz constants by two-sided probes of the dynamics,
/// taking the worst case over the disturbance sweep `{−w_max, 0, +w_max}`.
///
/// `dynamics(state, u, w)` returns the state derivative; non-finite probe
/// output refuses certification via `Err`.
pub fn estimate_lipschitz<T: Float>(
    dynamics: &impl Fn(&Vec5<T>, T, T) -> Vec5<T>,
    x: &WingState<T>,
    u_star: T,
    weights: &Vec5<T>,
    w_max: T,
    cfg: &FilterConfig<T>,
) -> Result<LipschitzEstimates<T>> {
    if !x.is_finite() || !u_star.is_finite() {
        return Err(Error::NonFinite("lipschitz probe input"));
    }
    let xa = x.to_array();
    let sweep = [-w_max, T::zero(), w_max];

    let mut l_u = T::zero();
    for &w in &sweep {
        let base = dynamics(&xa, u_star, w);
        if !linalg::is_finite(&base) {
            return Err(Error::NonFinite("dynamics at probe point"));
        }
        for du in [cfg.h_u, -cfg.h_u] {
            let f = dynamics(&xa, u_star + du, w);
            if !linalg::is_finite(&f) {
                return Err(Error::NonFinite("dynamics at control probe"));
            }
            let g = linalg::weighted_norm(&linalg::sub(&f, &base), weights) / du.abs();
            l_u = l_u.max(g);
        }
    }

    let mut l_x = linalg::zeros::<T>();
    for i in 0..STATE_DIM {
        let hi = cfg.h_x * weights[i];
        for &w in &sweep {
            let base = dynamics(&xa, u_star, w);
            for dx in [hi, -hi] {
                let mut xp = xa;
                xp[i] += dx;
                let f = dynamics(&xp, u_star, w);
                if !linalg::is_finite(&f) {
                    return Err(Error::NonFinite("dynamics at state probe"));
                }
                let g = linalg::weighted_norm(&linalg::sub(&f, &base), weights) / dx.abs();
                l_x[i] = l_x[i].max(g);
            }
        }
    }
    Ok(LipschitzEstimates { l_u, l_x })
}

/// Per-component deviation bound
/// `δ_i = (1 + ĥ L_x^{(i)}) |x_i − x̄_i| + ĥ L_u |u* − ū|`
/// with `ĥ = n_bar · T` (the delay-adjusted horizon when `n_bar > 1`).
pub fn deviation_bound<T: Float>(
    x: &WingState<T>,
    u_star: T,
    neighbor: &Transition<T>,
    l: &LipschitzEstimates<T>,
    sample_time: T,
    n_bar: usize,
) -> Vec5<T> {
    let h = sample_time * T::from_usize(n_bar.max(1)).unwrap();
    let xa = x.to_array();
    let xb = neighbor.x_bar.to_array();
    let du = (u_star - neighbor.u_bar).abs();
    std::array::from_fn(|i| (T::one() + h * l.l_x[i]) * (xa[i] - xb[i]).abs() + h * l.l_u * du)
}

/// Certification verdict with the evidence the decision log records.
#[derive(Clone, Debug)]
pub struct CertifyOutcome<T> {
    pub safe: bool,
    /// max over neighbors and components of δ_i / δ̄_i.
    pub max_ratio: T,
    /// Deviation bounds per selected neighbor.
    pub deltas: Vec<Vec5<T>>,
}

/// Safe iff the deviation bound fits inside the stored margin component-wise
/// for every selected neighbor.
pub fn certify<T: Float>(
    x: &WingState<T>,
    u_star: T,
    neighbors: &[Neighbor<T>],
    db: &TransitionDb<T>,
    l: &LipschitzEstimates<T>,
    sample_time: T,
    cfg: &FilterConfig<T>,
) -> CertifyOutcome<T> {
    let mut safe = !neighbors.is_empty();
    let mut max_ratio = T::zero();
    let mut deltas = Vec::with_capacity(neighbors.len());
    for n in neighbors {
        let tr = &db.transitions[n.index];
        let delta = deviation_bound(x, u_star, tr, l, sample_time, cfg.n_bar);
        for i in 0..STATE_DIM {
            let ratio = if tr.margin_bar[i] > T::zero() {
                delta[i] / tr.margin_bar[i]
            } else if delta[i] > T::zero() {
                T::infinity()
            } else {
                T::zero()
            };
            max_ratio = max_ratio.max(ratio);
            if delta[i] > tr.margin_bar[i] {
                safe = false;
            }
        }
        deltas.push(delta);
    }
    CertifyOutcome { safe, max_ratio, deltas }
}

/// Which fallback tier produced the applied input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FallbackTier {
    /// Hold the actuator: command the current flap deflection.
    Hold,
    /// Local retraining succeeded and its certified action was applied.
    Retrain,
}

/// Retraining hook: given the query state, produce fresh verified transitions
/// around it (the harness wires this to `safe_bounds` + action evaluation).
pub type RetrainFn<'a, T> = dyn FnMut(&WingState<T>) -> Result<Vec<Transition<T>>> + 'a;

/// Fallback context. Without a retraining hook only tier-1 (hold) is
/// available.
pub struct FallbackCtx<'a, T> {
    pub retrain: Option<&'a mut RetrainFn<'a, T>>,
}

impl<T: Float> Default for FallbackCtx<'_, T> {
    fn default() -> Self {
        FallbackCtx { retrain: None }
    }
}

/// Outcome of a fallback activation.
#[derive(Clone, Debug)]
pub struct FallbackOutcome<T> {
    pub input: ControlInput<T>,
    pub tier: FallbackTier,
    /// Set when tier-2 retraining could not certify the state.
    pub envelope_exit: bool,
}

/// Conservative recovery when certification fails or no neighbors exist.
///
/// Tier 2 (when a retraining hook is available) inserts fresh verified
/// transitions at the query state and retries the certification once;
/// otherwise tier 1 holds the actuator (zero commanded change).
#[allow(clippy::too_many_arguments)]
pub fn fallback<T: Float>(
    x: &WingState<T>,
    db: &mut TransitionDb<T>,
    ctx: &mut FallbackCtx<'_, T>,
    dynamics: &impl Fn(&Vec5<T>, T, T) -> Vec5<T>,
    input_box: &InputBox<T>,
    w_max: T,
    sample_time: T,
    cfg: &FilterConfig<T>,
) -> Result<FallbackOutcome<T>> {
    let hold = ControlInput(input_box.clamp(x.beta_f));
    let Some(retrain) = ctx.retrain.as_mut() else {
        return Ok(FallbackOutcome { input: hold, tier: FallbackTier::Hold, envelope_exit: false });
    };
    match retrain(x) {
        Ok(fresh) if !fresh.is_empty() => {
            for t in fresh {
                db.insert(t);
            }
            let neighbors = query_neighbors(x, db, cfg);
            if neighbors.is_empty() {
                return Ok(FallbackOutcome { input: hold, tier: FallbackTier::Hold, envelope_exit: true });
            }
            let weights = *db.weights();
            let u_star = interpolate(x, &neighbors, db, cfg.epsilon, input_box)?;
            let l = estimate_lipschitz(dynamics, x, u_star.0, &weights, w_max, cfg)?;
            let outcome = certify(x, u_star.0, &neighbors, db, &l, sample_time, cfg);
            if outcome.safe {
                Ok(FallbackOutcome { input: u_star, tier: FallbackTier::Retrain, envelope_exit: false })
            } else {
                Ok(FallbackOutcome { input: hold, tier: FallbackTier::Hold, envelope_exit: true })
            }
        }
        Ok(_) => Ok(FallbackOutcome { input: hold, tier: FallbackTier::Hold, envelope_exit: true }),
        Err(Error::Infeasible) | Err(Error::OutOfEnvelope(_)) => {
            Ok(FallbackOutcome { input: hold, tier: FallbackTier::Hold, envelope_exit: true })
        }
        Err(e) => Err(e),
    }
}

/// Margins of a verified successor against the merged safe set.
pub fn margins_against<T: Float>(merged: &StateBox<T>, x_plus: &WingState<T>) -> Vec5<T> {
    let xa = x_plus.to_array();
    std::array::from_fn(|i| merged.margin(&xa, i))
}

/// Per-step decision record for the filter log CSV.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DecisionRecord<T> {
    pub k: usize,
    pub verdict: &'static str,
    pub n_neighbors: usize,
    pub max_ratio: T,
    /// 0 = certified, 1 = hold, 2 = retrain.
    pub fallback_tier: u8,
}

pub fn write_decision_log<T: Float, W: std::io::Write>(
    rows: &[DecisionRecord<T>],
    mut out: W,
) -> std::io::Result<()> {
    writeln!(out, "k,verdict,n_neighbors,max_ratio,fallback_tier")?;
    for r in rows {
        writeln!(out, "{},{},{},{},{}", r.k, r.verdict, r.n_neighbors, r.max_ratio, r.fallback_tier)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plant::{self, PlantParams};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn weights() -> Vec5<f64> {
        [0.08, 0.15, 0.4, 1.0, 0.26]
    }

    fn mk_transition(x: WingState<f64>, u: f64, margin: f64) -> Transition<f64> {
        Transition {
            x_bar: x,
            u_bar: u,
            x_plus: x,
            margin_bar: [margin; STATE_DIM],
            gust_seed: 0,
            pair_id: 0,
        }
    }

    fn small_db() -> TransitionDb<f64> {
        let cfg = FilterConfig::<f64>::default();
        let mut db = TransitionDb::new(weights(), cfg.r_max);
        db.insert(mk_transition(WingState::new(0.01, 0.0, 0.0, 0.0, 0.0), 0.02, 0.01));
        db.insert(mk_transition(WingState::new(-0.01, 0.0, 0.0, 0.0, 0.0), -0.02, 0.01));
        db.insert(mk_transition(WingState::new(0.0, 0.05, 0.0, 0.0, 0.0), 0.05, 0.01));
        db.insert(mk_transition(WingState::new(0.07, 0.14, 0.39, 0.99, 0.25), 0.1, 0.01));
        db
    }

    #[test]
    fn query_returns_exact_match_first() {
        let db = small_db();
        let cfg = FilterConfig::default();
        let x = WingState::new(0.01, 0.0, 0.0, 0.0, 0.0);
        let hits = query_neighbors(&x, &db, &cfg);
        assert!(!hits.is_empty());
        assert_eq!(hits[0].index, 0);
        assert_eq!(hits[0].distance, 0.0);
        for h in &hits {
            assert!(h.distance <= cfg.r_max);
        }
    }

    #[test]
    fn query_matches_linear_scan_oracle() {
        let db = small_db();
        let mut cfg = FilterConfig::default();
        cfg.k = 1;
        for x in [
            WingState::new(0.005, 0.01, 0.0, 0.0, 0.0),
            WingState::new(-0.002, 0.04, 0.1, 0.0, 0.0),
            WingState::new(0.06, 0.12, 0.3, 0.8, 0.2),
        ] {
            let got = query_neighbors(&x, &db, &cfg);
            // Exhaustive oracle.
            let mut best: Option<(f64, usize)> = None;
            for (i, t) in db.transitions().iter().enumerate() {
                let d = linalg::weighted_norm(
                    &linalg::sub(&x.to_array(), &t.x_bar.to_array()),
                    db.weights(),
                );
                if d <= cfg.r_max && best.map_or(true, |(bd, _)| d < bd) {
                    best = Some((d, i));
                }
            }
            match (got.first(), best) {
                (Some(n), Some((d, i))) => {
                    assert_eq!(n.index, i);
                    assert_relative_eq!(n.distance, d, epsilon = 1e-15);
                }
                (None, None) => {}
                other => panic!("scan mismatch: {other:?}"),
            }
        }
    }

    #[test]
    fn empty_result_signals_out_of_regime() {
        let db = small_db();
        let mut cfg = FilterConfig::default();
        cfg.r_max = 0.01;
        let hits = query_neighbors(&WingState::new(0.05, -0.1, -0.3, 0.0, -0.2), &db, &cfg);
        assert!(hits.is_empty());
    }

    #[test]
    fn single_neighbor_interpolation_is_identity() {
        let db = small_db();
        let ib = InputBox { lo: -0.26, hi: 0.26 };
        let n = [Neighbor { index: 2, distance: 0.03 }];
        let u = interpolate(&WingState::zero(), &n, &db, 1e-9, &ib).unwrap();
        assert_eq!(u.0, db.transitions()[2].u_bar);
    }

    #[test]
    fn equidistant_neighbors_average() {
        let db = small_db();
        let ib = InputBox { lo: -0.26, hi: 0.26 };
        let x = WingState::zero();
        let n = [
            Neighbor { index: 0, distance: 0.125 },
            Neighbor { index: 1, distance: 0.125 },
        ];
        let u = interpolate(&x, &n, &db, 1e-9, &ib).unwrap();
        let expect = (db.transitions()[0].u_bar + db.transitions()[1].u_bar) / 2.0;
        assert_relative_eq!(u.0, expect, epsilon = 1e-12);
    }

    #[test]
    fn lipschitz_matches_linear_plant_columns() {
        // f = A x + B u with W = I: L_u = ||B||, L_x_i = ||A e_i||.
        let a = [
            [0.0, 1.0, 0.0, 0.0, 0.0],
            [-2.0, -0.5, 0.0, 0.0, 0.0],
            [0.3, 0.0, -1.0, 0.0, 0.0],
            [0.0, 0.0, 0.0, -0.2, 0.7],
            [0.0, 0.0, 0.0, 0.0, -1.5],
        ];
        let b = [0.0, 0.4, 0.0, 0.0, 1.5];
        let dyn_lin = move |x: &Vec5<f64>, u: f64, _w: f64| -> Vec5<f64> {
            let ax = linalg::matvec(&a, x);
            std::array::from_fn(|i| ax[i] + b[i] * u)
        };
        let cfg = FilterConfig::default();
        let ones = [1.0; STATE_DIM];
        let l = estimate_lipschitz(&dyn_lin, &WingState::zero(), 0.0, &ones, 3.0, &cfg).unwrap();
        assert_relative_eq!(l.l_u, linalg::norm2(&b), epsilon = 1e-6);
        for i in 0..STATE_DIM {
            let col: Vec5<f64> = std::array::from_fn(|r| a[r][i]);
            assert_relative_eq!(l.l_x[i], linalg::norm2(&col), epsilon = 1e-6);
        }
    }

    #[test]
    fn lipschitz_scales_with_norm_weights() {
        let dyn_lin = |x: &Vec5<f64>, u: f64, _w: f64| -> Vec5<f64> {
            [x[1], -x[0], u, 0.0, -x[4]]
        };
        let cfg = FilterConfig::default();
        let s = 2.0;
        let base = estimate_lipschitz(&dyn_lin, &WingState::zero(), 0.0, &[1.0; 5], 1.0, &cfg).unwrap();
        // Scaling every c_i by s scales every weighted norm, and with it
        // every estimate, by 1/s.
        let scaled = estimate_lipschitz(&dyn_lin, &WingState::zero(), 0.0, &[s; 5], 1.0, &cfg).unwrap();
        assert_relative_eq!(scaled.l_u, base.l_u / s, epsilon = 1e-9);
        for i in 0..STATE_DIM {
            assert_relative_eq!(scaled.l_x[i], base.l_x[i] / s, epsilon = 1e-9);
        }
    }

    #[test]
    fn lipschitz_refuses_non_finite_dynamics() {
        let bad = |_: &Vec5<f64>, _: f64, _: f64| -> Vec5<f64> { [f64::NAN; 5] };
        let cfg = FilterConfig::default();
        assert!(estimate_lipschitz(&bad, &WingState::zero(), 0.0, &[1.0; 5], 1.0, &cfg).is_err());
    }

    #[test]
    fn deviation_bound_worked_example() {
        // L_x = 1 (all), L_u = 2, T = 1e-3, |dx_i| = 0.01, |du| = 0.1.
        let l = LipschitzEstimates { l_u: 2.0, l_x: [1.0; STATE_DIM] };
        let tr = mk_transition(WingState::zero(), 0.0, 1.0);
        let x = WingState::new(0.01, 0.01, 0.01, 0.01, 0.01);
        let d = deviation_bound(&x, 0.1, &tr, &l, 1e-3, 1);
        for i in 0..STATE_DIM {
            assert_relative_eq!(d[i], 0.01021, epsilon = 1e-12);
        }
    }

    #[test]
    fn deviation_bound_zero_at_stored_point() {
        let l = LipschitzEstimates { l_u: 5.0, l_x: [3.0; STATE_DIM] };
        let tr = mk_transition(WingState::new(0.01, 0.02, 0.03, 0.04, 0.05), 0.07, 1.0);
        let d = deviation_bound(&tr.x_bar.clone(), 0.07, &tr, &l, 1e-3, 1);
        assert_eq!(d, [0.0; STATE_DIM]);
    }

    #[test]
    fn delay_adjusted_bound_scales_the_horizon() {
        let l = LipschitzEstimates { l_u: 2.0, l_x: [1.0; STATE_DIM] };
        let tr = mk_transition(WingState::zero(), 0.0, 1.0);
        let x = WingState::new(0.01, 0.0, 0.0, 0.0, 0.0);
        let plain = deviation_bound(&x, 0.1, &tr, &l, 1e-3, 1);
        let delayed = deviation_bound(&x, 0.1, &tr, &l, 1e-3, 8);
        assert!(delayed[0] > plain[0]);
        assert_relative_eq!(delayed[0], (1.0 + 8e-3) * 0.01 + 8e-3 * 2.0 * 0.1, epsilon = 1e-12);
    }

    #[test]
    fn certify_zero_distance_with_positive_margins() {
        let db = small_db();
        let cfg = FilterConfig::default();
        let x = db.transitions()[0].x_bar;
        let u = db.transitions()[0].u_bar;
        let l = LipschitzEstimates { l_u: 10.0, l_x: [10.0; STATE_DIM] };
        let n = [Neighbor { index: 0, distance: 0.0 }];
        let out = certify(&x, u, &n, &db, &l, 1e-3, &cfg);
        assert!(out.safe);
        assert_eq!(out.max_ratio, 0.0);
    }

    #[test]
    fn zero_margins_reject_any_positive_deviation() {
        let cfg = FilterConfig::<f64>::default();
        let mut db = TransitionDb::new(weights(), cfg.r_max);
        db.insert(mk_transition(WingState::zero(), 0.0, 0.0));
        let l = LipschitzEstimates { l_u: 1.0, l_x: [1.0; STATE_DIM] };
        let n = [Neighbor { index: 0, distance: 1e-3 }];
        let x = WingState::new(1e-3, 0.0, 0.0, 0.0, 0.0);
        let out = certify(&x, 0.0, &n, &db, &l, 1e-3, &cfg);
        assert!(!out.safe);
        // At the stored point with zero deviation, zero margins still certify.
        let exact = certify(&WingState::zero(), 0.0, &n_at_zero(), &db, &l, 1e-3, &cfg);
        assert!(exact.safe);
    }

    fn n_at_zero() -> Vec<Neighbor<f64>> {
        vec![Neighbor { index: 0, distance: 0.0 }]
    }

    #[test]
    fn verdict_conjunction_over_supersets() {
        // safe(S2) implies safe(S1) for S1 ⊆ S2.
        let db = small_db();
        let cfg = FilterConfig::default();
        let x = WingState::new(0.005, 0.01, 0.0, 0.0, 0.0);
        let l = LipschitzEstimates { l_u: 1.0, l_x: [1.0; STATE_DIM] };
        let s2 = query_neighbors(&x, &db, &cfg);
        let s1: Vec<_> = s2.iter().take(1).copied().collect();
        let v2 = certify(&x, 0.01, &s2, &db, &l, 1e-3, &cfg);
        let v1 = certify(&x, 0.01, &s1, &db, &l, 1e-3, &cfg);
        if v2.safe {
            assert!(v1.safe);
        }
    }

    #[test]
    fn fallback_tier1_holds_actuator() {
        let cfg = FilterConfig::<f64>::default();
        let mut db = TransitionDb::new(weights(), cfg.r_max);
        let ib = InputBox { lo: -0.26, hi: 0.26 };
        let p = PlantParams::default_section();
        let dynamics = move |x: &Vec5<f64>, u: f64, w: f64| {
            plant::deriv_raw(&WingState::from_array(*x), u, w, &p)
        };
        let x = WingState::new(0.0, 0.0, 0.0, 0.0, 0.17);
        let mut ctx = FallbackCtx::default();
        let out = fallback(&x, &mut db, &mut ctx, &dynamics, &ib, 3.0, 1e-3, &cfg).unwrap();
        assert_eq!(out.tier, FallbackTier::Hold);
        assert_eq!(out.input.0, 0.17);
    }

    #[test]
    fn fallback_tier2_inserts_and_certifies() {
        let cfg = FilterConfig::<f64>::default();
        let mut db = TransitionDb::new(weights(), cfg.r_max);
        let ib = InputBox { lo: -0.26, hi: 0.26 };
        let p = PlantParams::default_section();
        let dynamics = move |x: &Vec5<f64>, u: f64, w: f64| {
            plant::deriv_raw(&WingState::from_array(*x), u, w, &p)
        };
        let x = WingState::new(0.01, -0.02, 0.05, 0.1, 0.02);
        let mut hook = |q: &WingState<f64>| -> Result<Vec<Transition<f64>>> {
            Ok(vec![Transition {
                x_bar: *q,
                u_bar: 0.03,
                x_plus: *q,
                margin_bar: [0.5; STATE_DIM],
                gust_seed: 9,
                pair_id: 77,
            }])
        };
        let mut ctx = FallbackCtx { retrain: Some(&mut hook) };
        let out = fallback(&x, &mut db, &mut ctx, &dynamics, &ib, 3.0, 1e-3, &cfg).unwrap();
        assert_eq!(out.tier, FallbackTier::Retrain);
        assert!(!out.envelope_exit);
        assert_eq!(db.len(), 1);
        // The re-query sees the inserted zero-distance transition.
        let hits = query_neighbors(&x, &db, &cfg);
        assert_eq!(hits[0].distance, 0.0);
        assert_eq!(out.input.0, 0.03);
    }

    #[test]
    fn margins_measure_distance_to_faces() {
        let merged = StateBox::symmetric([1.0; STATE_DIM]);
        let m = margins_against(&merged, &WingState::new(0.2, -0.9, 0.0, 0.5, 0.0));
        assert_relative_eq!(m[0], 0.8, epsilon = 1e-12);
        assert_relative_eq!(m[1], 0.1, epsilon = 1e-12);
        assert_relative_eq!(m[2], 1.0, epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn weights_are_normalized_and_positive(ds in proptest::collection::vec(0.0_f64..0.5, 1..6)) {
            let neighbors: Vec<Neighbor<f64>> = ds
                .iter()
                .enumerate()
                .map(|(i, &d)| Neighbor { index: i, distance: d })
                .collect();
            let w = interpolation_weights(&neighbors, 1e-9);
            let total: f64 = w.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            prop_assert!(w.iter().all(|&v| v > 0.0));
        }

        #[test]
        fn deviation_bound_is_monotone(
            dx in 0.0_f64..0.1,
            du in 0.0_f64..0.2,
            lx in 0.0_f64..100.0,
            lu in 0.0_f64..100.0,
            scale in 1.0_f64..3.0,
        ) {
            let tr = mk_transition(WingState::zero(), 0.0, 1.0);
            let base_l = LipschitzEstimates { l_u: lu, l_x: [lx; STATE_DIM] };
            let x = WingState::new(dx, 0.0, 0.0, 0.0, 0.0);
            let d0 = deviation_bound(&x, du, &tr, &base_l, 1e-3, 1);

            let x_big = WingState::new(dx * scale, 0.0, 0.0, 0.0, 0.0);
            let d_dx = deviation_bound(&x_big, du, &tr, &base_l, 1e-3, 1);
            prop_assert!(d_dx[0] >= d0[0]);

            let d_du = deviation_bound(&x, du * scale, &tr, &base_l, 1e-3, 1);
            prop_assert!(d_du[0] >= d0[0]);

            let big_l = LipschitzEstimates { l_u: lu * scale, l_x: [lx * scale; STATE_DIM] };
            let d_l = deviation_bound(&x, du, &tr, &big_l, 1e-3, 1);
            prop_assert!(d_l[0] >= d0[0]);
        }
    }
}
