//! Training pipeline: structured state sampling → per-pair disturbance
//! ensembles → MPC safe bounds → tabular learning → deployment database.
//!
//! Everything here is deterministic given the run configuration; pair
//! scoring parallelizes across states with order-preserving collection.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::filter::{margins_against, Transition, TransitionDb};
use crate::gust::training_ensemble;
use crate::linalg::Vec5;
use crate::mpc::{safe_bounds, SafeBounds};
use crate::persist;
use crate::plant::{self, PlantParams};
use crate::qlearn::{
    sample_initial_states, train, QRecord, QTable, StateGrid, TrainReport, TrainingPair,
};
use crate::state::{ControlInput, Disturbance, StateBox, WingState};

/// Outcome of assembling the certified pair set.
#[derive(Clone, Debug, Default)]
pub struct PairStats {
    /// Pairs dropped because no safe interval exists (MPC infeasible or the
    /// nominal action already violates the margin).
    pub excluded: usize,
    /// Pairs dropped because interval certification failed outright.
    pub cert_failures: usize,
}

/// Sample the envelope, draw each state's disturbance ensemble, and compute
/// certified bounds per pair. Uncertifiable pairs are dropped and counted.
pub fn build_pairs(
    cfg: &RunConfig,
    p: &PlantParams<f64>,
) -> Result<(Vec<TrainingPair<f64>>, PairStats)> {
    let mcfg = cfg.mpc_config();
    let gcfg = cfg.gust_config();
    let needed = (cfg.mpc.horizon * cfg.mpc.coarse_steps).max(cfg.reward.rollout_steps);
    let training_samples = (gcfg.training_duration / p.sample_time).round() as usize;
    if training_samples < needed {
        return Err(Error::config(format!(
            "training_duration_s covers {training_samples} samples; horizon/rollout need {needed}"
        )));
    }

    let states = sample_initial_states(&cfg.sampling_box(), cfg.grid.n_per_dim)?;
    let per_state: Vec<Result<Vec<(WingState<f64>, crate::gust::GustProfile<f64>, Result<SafeBounds<f64>>)>>> = states
        .par_iter()
        .map(|x0| {
            let ensemble = training_ensemble(x0, cfg.grid.n_realizations, &gcfg, p.airspeed, p.sample_time)?;
            Ok(ensemble
                .into_iter()
                .map(|g| {
                    let b = safe_bounds(x0, &g.samples, &mcfg, p);
                    (*x0, g, b)
                })
                .collect())
        })
        .collect();

    let mut pairs = Vec::new();
    let mut stats = PairStats::default();
    let mut id = 0usize;
    for group in per_state {
        for (x0, gust, bounds) in group? {
            match bounds {
                Ok(b) => {
                    pairs.push(TrainingPair { id, x0, gust, bounds: b });
                    id += 1;
                }
                Err(Error::Infeasible) | Err(Error::OutOfEnvelope(_)) => stats.excluded += 1,
                Err(Error::Other(_)) => stats.cert_failures += 1,
                Err(e) => return Err(e),
            }
        }
    }
    Ok((pairs, stats))
}

/// One deployment action per base state, robust across its disturbance
/// ensemble: the action (from the intersection of the pairs' certified
/// intervals) maximizing the mean rollout reward over every realization,
/// vetoing actions that violate under any of them. Each realization then
/// contributes its own verified transition under that shared action, which
/// realizes the merged-safe-set intersection over the ensemble.
pub fn robust_transitions(
    x0: &WingState<f64>,
    group: &[&TrainingPair<f64>],
    rcfg: &crate::qlearn::RewardConfig<f64>,
    n_actions: usize,
    merged: &StateBox<f64>,
    envelope: &StateBox<f64>,
    w_max: f64,
    p: &PlantParams<f64>,
) -> Result<Vec<Transition<f64>>> {
    if group.is_empty() {
        return Ok(Vec::new());
    }
    let lo = group.iter().map(|pr| pr.bounds.u_min).fold(f64::NEG_INFINITY, f64::max);
    let hi = group.iter().map(|pr| pr.bounds.u_max).fold(f64::INFINITY, f64::min);
    if lo > hi {
        return Ok(Vec::new());
    }
    let mut best: Option<(f64, f64)> = None;
    for &u in &crate::linalg::linspace(lo, hi, n_actions) {
        let mut total = 0.0;
        let mut ok = true;
        for pr in group {
            let out = crate::qlearn::evaluate_action(x0, &pr.gust, ControlInput(u), rcfg, p, envelope)?;
            if out.violated {
                ok = false;
                break;
            }
            total += out.reward;
        }
        if !ok {
            continue;
        }
        let better = best.map_or(true, |(bq, bu)| total > bq || (total == bq && u.abs() < bu.abs()));
        if better {
            best = Some((total, u));
        }
    }
    let Some((_, u_rob)) = best else { return Ok(Vec::new()) };
    // The deviation bound compares successors under a matched disturbance;
    // the stored margin must additionally absorb the spread of the verified
    // successor itself across the disturbance bound, so the certified chain
    // keeps the realized successor inside the merged set for any gust in W.
    let mut out = Vec::new();
    for pr in group {
        let w0 = pr.gust.samples[0];
        let x_plus = plant::step_euler(x0, ControlInput(u_rob), Disturbance(w0), p)?;
        let mut spread = [0.0f64; 5];
        for w in [-w_max, 0.0, w_max] {
            let alt = plant::step_euler(x0, ControlInput(u_rob), Disturbance(w), p)?.to_array();
            for i in 0..5 {
                spread[i] = spread[i].max((alt[i] - x_plus.to_array()[i]).abs());
            }
        }
        let raw = margins_against(merged, &x_plus);
        let margin: Vec5<f64> = std::array::from_fn(|i| raw[i] - spread[i]);
        if margin.iter().any(|&m| m <= 0.0) {
            continue;
        }
        out.push(Transition {
            x_bar: *x0,
            u_bar: u_rob,
            x_plus,
            margin_bar: margin,
            gust_seed: pr.gust.seed,
            pair_id: pr.id,
        });
    }
    Ok(out)
}

/// Build the deployment database: group the certified pairs by base state
/// and store the ensemble-robust transitions of each group.
pub fn build_transition_db(
    pairs: &[TrainingPair<f64>],
    rcfg: &crate::qlearn::RewardConfig<f64>,
    n_actions: usize,
    merged: &StateBox<f64>,
    envelope: &StateBox<f64>,
    weights: Vec5<f64>,
    r_max: f64,
    w_max: f64,
    p: &PlantParams<f64>,
) -> Result<TransitionDb<f64>> {
    let mut db = TransitionDb::new(weights, r_max);
    let mut groups: Vec<(u64, Vec<&TrainingPair<f64>>)> = Vec::new();
    for pair in pairs {
        let key = pair.x0.bit_hash();
        match groups.last_mut() {
            Some((k, g)) if *k == key => g.push(pair),
            _ => groups.push((key, vec![pair])),
        }
    }
    let batches: Vec<Result<Vec<Transition<f64>>>> = groups
        .par_iter()
        .map(|(_, group)| robust_transitions(&group[0].x0, group, rcfg, n_actions, merged, envelope, w_max, p))
        .collect();
    for batch in batches {
        for t in batch? {
            db.insert(t);
        }
    }
    Ok(db)
}

/// Unbounded pair set for the pure-RL baseline: the same micro-environments
/// with the whole actuator box as the action interval.
pub fn full_box_pairs(cfg: &RunConfig, p: &PlantParams<f64>) -> Result<Vec<TrainingPair<f64>>> {
    let gcfg = cfg.gust_config();
    let ib = cfg.input_box();
    let states = sample_initial_states(&cfg.sampling_box(), cfg.grid.n_per_dim)?;
    let mut pairs = Vec::new();
    let mut id = 0usize;
    for x0 in states {
        for gust in training_ensemble(&x0, cfg.grid.n_realizations, &gcfg, p.airspeed, p.sample_time)? {
            pairs.push(TrainingPair {
                id,
                x0,
                gust,
                bounds: SafeBounds {
                    u_min: ib.lo,
                    u_max: ib.hi,
                    u_star: 0.0,
                    x_traj_min: [[0.0; 5]; 3],
                    x_traj_max: [[0.0; 5]; 3],
                    verified: false,
                },
            });
            id += 1;
        }
    }
    Ok(pairs)
}

/// Everything `cmd_train` produces, in memory.
pub struct TrainingArtifacts {
    pub grid: StateGrid<f64>,
    pub pairs: Vec<TrainingPair<f64>>,
    pub stats: PairStats,
    pub qtable: QTable<f64>,
    pub report: TrainReport<f64>,
    pub db: TransitionDb<f64>,
    pub rl_qtable: QTable<f64>,
}

/// Run the full training pipeline.
pub fn train_all(cfg: &RunConfig, p: &PlantParams<f64>) -> Result<TrainingArtifacts> {
    let grid = cfg.state_grid()?;
    let rcfg = cfg.reward_config();
    let qcfg = cfg.q_config();

    let (pairs, stats) = build_pairs(cfg, p)?;
    if pairs.is_empty() {
        return Err(Error::config("no certifiable training pairs; envelope or gusts too aggressive"));
    }
    let (qtable, report) = train(&pairs, &grid, &rcfg, &qcfg, p)?;

    let merged = cfg.state_box().shrink(cfg.mpc.margin_frac);
    let fcfg = cfg.filter_config()?;
    let db = build_transition_db(
        &pairs,
        &rcfg,
        qcfg.n_actions,
        &merged,
        &cfg.state_box(),
        cfg.state_box().half_widths(),
        fcfg.r_max,
        cfg.gust_config().w_max(),
        p,
    )?;

    let rl_pairs = full_box_pairs(cfg, p)?;
    let (rl_qtable, _) = train(&rl_pairs, &grid, &rcfg, &qcfg, p)?;

    Ok(TrainingArtifacts { grid, pairs, stats, qtable, report, db, rl_qtable })
}

/// JSONL record for `bounds.jsonl`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BoundsRecord {
    pub pair_id: usize,
    pub state: WingState<f64>,
    pub gust_seed: u64,
    pub gust_sigma: f64,
    pub bounds: SafeBounds<f64>,
}

/// Serialized Q-table document.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QTableFile {
    pub grid: StateGrid<f64>,
    pub n_actions: usize,
    pub records: Vec<QRecord<f64>>,
}

impl QTableFile {
    pub fn from_table(t: &QTable<f64>) -> Self {
        QTableFile { grid: t.grid, n_actions: t.n_actions, records: t.to_records() }
    }

    pub fn into_table(self) -> QTable<f64> {
        QTable::from_records(self.grid, self.n_actions, self.records)
    }
}

/// Write the four training artifacts (plus the baseline table) into `out`.
pub fn save_artifacts(art: &TrainingArtifacts, out: &Path, config_hash: &str) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let bounds: Vec<BoundsRecord> = art
        .pairs
        .iter()
        .map(|pr| BoundsRecord {
            pair_id: pr.id,
            state: pr.x0,
            gust_seed: pr.gust.seed,
            gust_sigma: pr.gust.scale,
            bounds: pr.bounds.clone(),
        })
        .collect();
    persist::write_jsonl(&out.join("bounds.jsonl"), config_hash, &bounds)?;
    persist::write_jsonl(&out.join("transitions.jsonl"), config_hash, art.db.transitions())?;
    persist::write_json(&out.join("qtable.json"), config_hash, &QTableFile::from_table(&art.qtable))?;
    persist::write_json(&out.join("rl_qtable.json"), config_hash, &QTableFile::from_table(&art.rl_qtable))?;
    let mut log = Vec::new();
    art.report.write_csv(&mut log)?;
    persist::write_csv_with_hash(&out.join("train_log.csv"), config_hash, &String::from_utf8_lossy(&log))?;
    Ok(())
}

/// Load the artifacts evaluation needs, verifying hash consistency.
pub struct LoadedArtifacts {
    pub qtable: QTable<f64>,
    pub rl_qtable: QTable<f64>,
    pub db: TransitionDb<f64>,
    pub config_hash: String,
}

pub fn load_artifacts(cfg: &RunConfig, out: &Path) -> Result<LoadedArtifacts> {
    let qdoc: persist::Document<QTableFile> = persist::read_json(&out.join("qtable.json"))?;
    let rldoc: persist::Document<QTableFile> = persist::read_json(&out.join("rl_qtable.json"))?;
    let (db_hash, transitions): (String, Vec<Transition<f64>>) =
        persist::read_jsonl(&out.join("transitions.jsonl"))?;
    if qdoc.config_hash != db_hash || rldoc.config_hash != db_hash {
        return Err(Error::config(
            "artifact hashes disagree; re-run training with a single config",
        ));
    }
    let fcfg = cfg.filter_config()?;
    let db = TransitionDb::from_transitions(transitions, cfg.state_box().half_widths(), fcfg.r_max);
    Ok(LoadedArtifacts {
        qtable: qdoc.payload.into_table(),
        rl_qtable: rldoc.payload.into_table(),
        db,
        config_hash: db_hash,
    })
}

/// Combined model-validation outcome for the `validate-model` command.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct ModelValidation {
    pub lpv: crate::lpv::ValidationReport,
    /// Worst component-wise difference between the two-step Taylor update and
    /// the two-step RK4 oracle, relative to the envelope half-widths.
    pub taylor_max_rel: f64,
    pub taylor_samples: usize,
    pub lpv_threshold: f64,
    pub taylor_threshold: f64,
    pub mode_band_hz: [f64; 2],
    pub pass: bool,
}

/// Uniform envelope samples for validation sweeps, deterministic in `seed`.
pub fn sample_envelope(
    envelope: &StateBox<f64>,
    n: usize,
    seed: u64,
) -> Vec<WingState<f64>> {
    use rand::Rng;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let mut x = [0.0f64; 5];
            for d in 0..5 {
                x[d] = rng.random_range(envelope.lo[d]..envelope.hi[d]);
            }
            WingState::from_array(x)
        })
        .collect()
}

/// Model-fidelity gate: the scheduled linear model against the RK4 oracle
/// over rolling horizons, the dominant-mode band check, and the two-step
/// Taylor fidelity sweep.
pub fn validate_model(
    cfg: &RunConfig,
    p: &PlantParams<f64>,
    n_lpv_samples: usize,
    lpv_horizon: usize,
    n_taylor_samples: usize,
) -> Result<ModelValidation> {
    use rand::Rng;
    use rand::SeedableRng;
    let envelope = cfg.state_box();
    let weights = envelope.half_widths();

    // Samples come from the operational (inner) region; the admissible
    // scheduling region is wider than the safety box because free
    // trajectories trade energy between modes and may overswing individual
    // components while the model stays perfectly valid.
    let samples = sample_envelope(&cfg.sampling_box(), n_lpv_samples, crate::util::mix_seed(cfg.seed, 0xA11C));
    let hw = envelope.half_widths();
    let schedule_region = StateBox::symmetric(std::array::from_fn(|i| 2.0 * hw[i]));
    let report = crate::lpv::validate(&samples, lpv_horizon, p, &schedule_region, &weights)?;

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(crate::util::mix_seed(cfg.seed, 0x7A71));
    let ib = cfg.input_box();
    let w_max = cfg.gust_config().w_max();
    let mut worst = 0.0f64;
    for _ in 0..n_taylor_samples {
        let mut xa = [0.0f64; 5];
        for d in 0..5 {
            xa[d] = rng.random_range(envelope.lo[d]..envelope.hi[d]);
        }
        let x = WingState::from_array(xa);
        let u = ControlInput(rng.random_range(ib.lo..ib.hi));
        let w = Disturbance(rng.random_range(-w_max..w_max));
        let tay = plant::step_taylor2(&x, u, w, p)?.to_array();
        let oracle = plant::reference_steps(&x, u, w, p, 2, 10)?.to_array();
        for i in 0..5 {
            worst = worst.max((tay[i] - oracle[i]).abs() / weights[i]);
        }
    }

    let lpv_threshold = 0.01;
    let taylor_threshold = 0.02;
    let band = [0.5, 5.0];
    let pass = report.max_rel_traj_error < lpv_threshold
        && report.dominant_mode_hz >= band[0]
        && report.dominant_mode_hz <= band[1]
        && worst < taylor_threshold;
    Ok(ModelValidation {
        lpv: report,
        taylor_max_rel: worst,
        taylor_samples: n_taylor_samples,
        lpv_threshold,
        taylor_threshold,
        mode_band_hz: band,
        pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.plant_params = std::path::PathBuf::from(concat!(
            env!("CARGO_MANIFEST_DIR"),
            "/../../configs/plant.toml"
        ));
        cfg.grid.n_per_dim = 2;
        cfg.grid.n_realizations = 1;
        cfg.qlearn.n_actions = 5;
        cfg.harness.n_runs = 1;
        cfg
    }

    #[test]
    fn tiny_pipeline_trains_and_persists() {
        let cfg = tiny_config();
        let p = cfg.load_plant().unwrap();
        let art = train_all(&cfg, &p).unwrap();
        assert!(!art.pairs.is_empty(), "some corner pairs must certify");
        assert_eq!(art.stats.cert_failures, 0);
        assert!(!art.db.is_empty());
        assert!(art.qtable.len() > 0);

        // Margins are strictly positive for every stored transition.
        for t in art.db.transitions() {
            assert!(t.margin_bar.iter().all(|&m| m > 0.0));
        }

        let dir = tempfile::tempdir().unwrap();
        save_artifacts(&art, dir.path(), "hash0").unwrap();
        for f in ["bounds.jsonl", "transitions.jsonl", "qtable.json", "rl_qtable.json", "train_log.csv"] {
            assert!(dir.path().join(f).exists(), "{f} missing");
        }
        let loaded = load_artifacts(&cfg, dir.path()).unwrap();
        assert_eq!(loaded.db.len(), art.db.len());
        assert_eq!(loaded.qtable.len(), art.qtable.len());
        assert_eq!(loaded.config_hash, "hash0");
    }

    #[test]
    fn training_pipeline_is_deterministic() {
        let cfg = tiny_config();
        let p = cfg.load_plant().unwrap();
        let a = train_all(&cfg, &p).unwrap();
        let b = train_all(&cfg, &p).unwrap();
        assert_eq!(a.pairs.len(), b.pairs.len());
        for (x, y) in a.pairs.iter().zip(&b.pairs) {
            assert_eq!(x.x0, y.x0);
            assert_eq!(x.bounds.u_min, y.bounds.u_min);
            assert_eq!(x.bounds.u_max, y.bounds.u_max);
        }
        let ra = a.qtable.to_records();
        let rb = b.qtable.to_records();
        assert_eq!(ra.len(), rb.len());
        for (x, y) in ra.iter().zip(&rb) {
            assert_eq!(x.q, y.q);
            assert_eq!(x.u, y.u);
        }
    }

    #[test]
    fn short_training_duration_is_rejected() {
        let mut cfg = tiny_config();
        cfg.gust.training_duration_s = 0.01;
        let p = cfg.load_plant().unwrap();
        assert!(matches!(build_pairs(&cfg, &p), Err(Error::Config(_))));
    }
}
