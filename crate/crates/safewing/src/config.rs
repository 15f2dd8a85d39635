//! Run configuration: one TOML file wires the whole pipeline.
//!
//! Sections map onto the per-module config structs; every field has a
//! desk-scale default so smoke configs only override what they need.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::FilterConfig;
use crate::gust::GustConfig;
use crate::mpc::MpcConfig;
use crate::plant::PlantParams;
use crate::qlearn::{QConfig, RewardConfig, StateGrid};
use crate::state::{InputBox, StateBox};
use crate::util::fnv1a_bytes;

fn default_plant_path() -> PathBuf {
    PathBuf::from("configs/plant.toml")
}
fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}
fn default_seed() -> u64 {
    42
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoxesConfig {
    /// Admissible state box half-widths: [h, theta, v_h, v_theta, beta_f].
    pub state_half: [f64; 5],
    /// Actuator command half-width (rad), symmetric box.
    pub input_half: f64,
}

impl Default for BoxesConfig {
    fn default() -> Self {
        BoxesConfig { state_half: [0.22, 0.3, 0.8, 1.8, 0.26], input_half: 0.26 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    /// Cells per dimension for the tabular state grid.
    pub bins: [usize; 5],
    /// Samples per dimension for structured initial-state sampling.
    pub n_per_dim: usize,
    /// Disturbance realizations per sampled state.
    pub n_realizations: usize,
    /// Initial states sample this inner fraction of the envelope; states on
    /// the envelope boundary can never certify a two-step trajectory.
    pub training_frac: f64,
}

impl Default for GridSection {
    fn default() -> Self {
        GridSection { bins: [9; 5], n_per_dim: 9, n_realizations: 4, training_frac: 0.6 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MpcSection {
    pub horizon: usize,
    /// Input weight in normalized units (scaled by the input half-width).
    pub r_weight: f64,
    pub tolerance: f64,
    pub max_iters: usize,
    pub state_penalty: f64,
    pub margin_frac: f64,
    pub n_probe: usize,
    /// Prediction-model step in plant periods.
    pub coarse_steps: usize,
}

impl Default for MpcSection {
    fn default() -> Self {
        MpcSection {
            horizon: 20,
            r_weight: 0.01,
            tolerance: 1e-6,
            max_iters: 500,
            state_penalty: 1e4,
            margin_frac: 0.02,
            n_probe: 17,
            coarse_steps: 5,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardSection {
    /// Effort weight in normalized units.
    pub r_weight: f64,
    pub rollout_steps: usize,
}

impl Default for RewardSection {
    fn default() -> Self {
        RewardSection { r_weight: 0.01, rollout_steps: 150 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QSection {
    pub n_actions: usize,
    pub gamma: f64,
    pub n_sweeps: usize,
    pub tolerance: f64,
}

impl Default for QSection {
    fn default() -> Self {
        QSection { n_actions: 15, gamma: 0.0, n_sweeps: 8, tolerance: 1e-9 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterSection {
    pub k: usize,
    /// Neighborhood radius as a fraction of the smallest cell half-diagonal.
    pub r_max_factor: f64,
    pub epsilon: f64,
    pub h_u: f64,
    pub h_x: f64,
    pub n_bar: usize,
    pub retrain_realizations: usize,
}

impl Default for FilterSection {
    fn default() -> Self {
        FilterSection {
            k: 8,
            r_max_factor: 0.5,
            epsilon: 1e-9,
            h_u: 1e-4,
            h_x: 1e-4,
            n_bar: 8,
            retrain_realizations: 8,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GustSection {
    pub sigma: f64,
    pub length_scale: f64,
    pub bound_factor: f64,
    pub training_duration_s: f64,
}

impl Default for GustSection {
    fn default() -> Self {
        GustSection { sigma: 1.5, length_scale: 200.0, bound_factor: 3.0, training_duration_s: 0.2 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HarnessSection {
    pub episode_s: f64,
    pub gust_phase_s: f64,
    pub n_runs: usize,
    /// Reference "max actuator step" for the increment metric (rad/step).
    pub du_max: f64,
    /// Settling band as a fraction of the admissible half-width.
    pub settle_band_frac: f64,
    /// Admissible effective angle of attack (deg) for the α settling band.
    pub alpha_max_deg: f64,
    /// Excursion threshold as a fraction of the max open-loop gust response.
    pub excursion_frac: f64,
    /// Initial states drawn uniformly from this inner fraction of each box.
    pub inner_frac: f64,
    /// Write per-step time series for the first N runs.
    pub timeseries_runs: usize,
}

impl Default for HarnessSection {
    fn default() -> Self {
        HarnessSection {
            episode_s: 10.0,
            gust_phase_s: 5.0,
            n_runs: 100,
            du_max: 0.01,
            settle_band_frac: 0.05,
            alpha_max_deg: 25.0,
            excursion_frac: 0.2,
            inner_frac: 0.2,
            timeseries_runs: 3,
        }
    }
}

/// The full pipeline configuration.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Path to the plant parameter ledger (TOML).
    pub plant_params: PathBuf,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub boxes: BoxesConfig,
    pub grid: GridSection,
    pub mpc: MpcSection,
    pub reward: RewardSection,
    pub qlearn: QSection,
    pub filter: FilterSection,
    pub gust: GustSection,
    pub harness: HarnessSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            plant_params: default_plant_path(),
            out_dir: default_out_dir(),
            seed: default_seed(),
            boxes: BoxesConfig::default(),
            grid: GridSection::default(),
            mpc: MpcSection::default(),
            reward: RewardSection::default(),
            qlearn: QSection::default(),
            filter: FilterSection::default(),
            gust: GustSection::default(),
            harness: HarnessSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(s).map_err(|e| Error::Toml(e.to_string()))?;
        cfg.validate_values()?;
        Ok(cfg)
    }

    /// Load and validate; relative paths resolve against the config file's

    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&s)?;
        if let Some(dir) = path.parent() {
            if cfg.plant_params.is_relative() {
                cfg.plant_params = dir.join(&cfg.plant_params);
            }
        }
        Ok(cfg)
    }

    /// Value-level invariants (box shapes, positive counts). Path existence
    /// is checked by [`RunConfig::load_plant`].
    pub fn validate_values(&self) -> Result<()> {
        if !self.state_box().is_valid() || !self.input_box().is_valid() {
            return Err(Error::config("boxes must be non-degenerate"));
        }
        if self.grid.bins.iter().any(|&b| b == 0) || self.grid.n_per_dim < 2 {
            return Err(Error::config("grid bins must be >= 1 and n_per_dim >= 2"));
        }
        if self.grid.n_realizations == 0 {
            return Err(Error::config("n_realizations must be >= 1"));
        }
        if !(0.0 < self.grid.training_frac && self.grid.training_frac <= 1.0) {
            return Err(Error::config("training_frac must be in (0, 1]"));
        }
        if self.harness.episode_s < self.harness.gust_phase_s {
            return Err(Error::config("episode must be at least as long as the gust phase"));
        }
        if !(0.0..=1.0).contains(&self.harness.inner_frac) {
            return Err(Error::config("inner_frac must be in [0, 1]"));
        }
        if self.harness.du_max <= 0.0 {
            return Err(Error::config("du_max must be positive"));
        }
        Ok(())
    }

    pub fn load_plant(&self) -> Result<PlantParams<f64>> {
        if !self.plant_params.exists() {
            return Err(Error::config(format!(
                "plant parameter file not found: {}",
                self.plant_params.display()
            )));
        }
        PlantParams::load(&self.plant_params)
    }

    pub fn state_box(&self) -> StateBox<f64> {
        StateBox::symmetric(self.boxes.state_half)
    }

    pub fn input_box(&self) -> InputBox<f64> {
        InputBox { lo: -self.boxes.input_half, hi: self.boxes.input_half }
    }

    pub fn state_grid(&self) -> Result<StateGrid<f64>> {
        StateGrid::new(self.state_box(), self.grid.bins)
    }

    /// Inner region the structured training states are drawn from.
    pub fn sampling_box(&self) -> StateBox<f64> {
        self.state_box().shrink(1.0 - self.grid.training_frac)
    }

    pub fn mpc_config(&self) -> MpcConfig<f64> {
        let mut cfg = MpcConfig::normalized(self.state_box(), self.input_box());
        cfg.horizon = self.mpc.horizon;
        let uh = self.input_box().half_width();
        cfg.r = self.mpc.r_weight / (uh * uh);
        cfg.tolerance = self.mpc.tolerance;
        cfg.max_iters = self.mpc.max_iters;
        cfg.state_penalty = self.mpc.state_penalty;
        cfg.margin_frac = self.mpc.margin_frac;
        cfg.n_probe = self.mpc.n_probe;
        cfg.coarse_steps = self.mpc.coarse_steps;
        cfg
    }

    pub fn reward_config(&self) -> RewardConfig<f64> {
        let mut cfg = RewardConfig::normalized(&self.state_box(), &self.input_box());
        let uh = self.input_box().half_width();
        cfg.r = self.reward.r_weight / (uh * uh);
        cfg.rollout_steps = self.reward.rollout_steps;
        cfg
    }

    pub fn q_config(&self) -> QConfig<f64> {
        QConfig {
            n_actions: self.qlearn.n_actions,
            gamma: self.qlearn.gamma,
            n_sweeps: self.qlearn.n_sweeps,
            tolerance: self.qlearn.tolerance,
        }
    }

    pub fn gust_config(&self) -> GustConfig<f64> {
        GustConfig {
            sigma: self.gust.sigma,
            length_scale: self.gust.length_scale,
            bound_factor: self.gust.bound_factor,
            training_duration: self.gust.training_duration_s,
        }
    }

    /// Filter neighborhood config; `r_max` comes from the grid cell geometry.
    pub fn filter_config(&self) -> Result<FilterConfig<f64>> {
        let grid = self.state_grid()?;
        let half_diag = grid.cell_half_diagonal(&self.state_box().half_widths());
        Ok(FilterConfig {
            k: self.filter.k,
            r_max: self.filter.r_max_factor * half_diag,
            epsilon: self.filter.epsilon,
            h_u: self.filter.h_u,
            h_x: self.filter.h_x,
            n_bar: self.filter.n_bar,
            retrain_realizations: self.filter.retrain_realizations,
        })
    }

    pub fn episode_steps(&self, sample_time: f64) -> usize {
        (self.harness.episode_s / sample_time).round() as usize
    }

    pub fn gust_steps(&self, sample_time: f64) -> usize {
        (self.harness.gust_phase_s / sample_time).round() as usize
    }

    /// Stable hash over the resolved config plus the plant ledger contents;
    /// stamped into every output file.
    pub fn config_hash(&self, plant_toml: &str) -> String {
        let cfg_json = serde_json::to_string(self).expect("config serializes");
        let mut bytes = cfg_json.into_bytes();
        bytes.extend_from_slice(plant_toml.as_bytes());
        format!("{:016x}", fnv1a_bytes(&bytes))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let cfg = RunConfig::default();
        cfg.validate_values().unwrap();
        assert_eq!(cfg.grid.bins, [9; 5]);
        assert!(cfg.filter_config().unwrap().r_max > 0.0);
    }

    #[test]
    fn partial_toml_overrides() {
        let cfg = RunConfig::from_toml_str(
            r#"
            seed = 7
            [grid]
            n_per_dim = 3
            [harness]
            n_runs = 2
            "#,
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.grid.n_per_dim, 3);
        assert_eq!(cfg.harness.n_runs, 2);
        assert_eq!(cfg.mpc.horizon, 20);
    }

    #[test]
    fn degenerate_box_is_rejected() {
        let err = RunConfig::from_toml_str(
            r#"
            [boxes]
            state_half = [0.0, 0.15, 0.4, 1.0, 0.26]
            "#,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml_str("not_a_field = 1").is_err());
    }

    #[test]
    fn hash_tracks_config_and_plant() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        let h_a = a.config_hash("plant");
        assert_eq!(h_a, a.config_hash("plant"));
        b.seed = 43;
        assert_ne!(h_a, b.config_hash("plant"));
        assert_ne!(h_a, a.config_hash("plant2"));
    }

    #[test]
    fn r_max_matches_cell_geometry() {
        let cfg = RunConfig::default();
        // 9 bins per dim over symmetric boxes: half-diagonal sqrt(5)/9.
        let expect = 0.5 * (5.0_f64).sqrt() / 9.0;
        let got = cfg.filter_config().unwrap().r_max;
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
    }
}
