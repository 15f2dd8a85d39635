//! Bounded vertical-turbulence generation for training ensembles and
//! Monte Carlo evaluation.
//!
//! White noise shaped by the first-order Dryden vertical filter
//! `ẇ = −(V/L_w) w + σ_w √(2V/L_w) η(t)`, discretized at the plant rate and
//! hard-clipped to the disturbance bound so every emitted sample lies in
//! `[-w_max, w_max]`.

use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::float::Float;
use crate::state::WingState;
use crate::util::mix_seed;

/// One gust realization at the plant rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GustProfile<T> {
    /// Vertical gust velocity samples (m/s), one per control step.
    pub samples: Vec<T>,
    /// RNG seed the profile was generated from.
    pub seed: u64,
    /// Turbulence intensity σ_w (m/s).
    pub scale: T,
    /// Dryden length scale L_w (m).
    pub length_scale: T,
}

impl<T: Float> GustProfile<T> {
    /// CSV with header `k,w`.
    pub fn write_csv<W: std::io::Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "k,w")?;
        for (k, w) in self.samples.iter().enumerate() {
            writeln!(out, "{},{}", k, w)?;
        }
        Ok(())
    }

    /// Parse the `k,w` CSV written by [`GustProfile::write_csv`]. Metadata
    /// fields are not stored in the CSV and reset to defaults.
    pub fn read_csv<R: std::io::BufRead>(reader: R) -> Result<Self> {
        let mut samples = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') || (i == 0 && line.starts_with('k')) {
                continue;
            }
            let w = line
                .split(',')
                .nth(1)
                .ok_or_else(|| Error::config(format!("malformed gust CSV row: {line}")))?;
            let w: f64 = w
                .parse()
                .map_err(|e| Error::config(format!("bad gust sample {w:?}: {e}")))?;
            samples.push(T::of(w));
        }
        Ok(GustProfile {
            samples,
            seed: 0,
            scale: T::zero(),
            length_scale: T::zero(),
        })
    }
}

/// Generate one Dryden profile; deterministic in `seed`.
///
/// `duration` must be a positive multiple of `sample_time`; samples are
/// clipped to `[-w_max, w_max]`.
#[allow(clippy::too_many_arguments)]
pub fn dryden_generate<T: Float>(
    seed: u64,
    duration: T,
    airspeed: T,
    sigma_w: T,
    length_scale: T,
    sample_time: T,
    w_max: T,
) -> Result<GustProfile<T>>
where
    StandardNormal: Distribution<T>,
{
    if duration <= T::zero()
        || airspeed <= T::zero()
        || length_scale <= T::zero()
        || sample_time <= T::zero()
    {
        return Err(Error::config("dryden parameters must be positive"));
    }
    if sigma_w < T::zero() || w_max < T::zero() {
        return Err(Error::config("sigma_w and w_max must be non-negative"));
    }
    let corner = sample_time * airspeed / length_scale;
    if corner >= T::one() {
        return Err(Error::config("dryden filter unstable: T*V/L_w >= 1"));
    }
    let n = (duration / sample_time).round().to_usize().unwrap_or(0);
    if n == 0 {
        return Err(Error::config("duration shorter than one sample"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gain = sigma_w * (T::of(2.0) * corner).sqrt();
    let decay = T::one() - corner;
    // Stationary initial sample, then the AR(1) shaping recursion.
    let mut w = sigma_w * StandardNormal.sample(&mut rng);
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        samples.push(w.max(-w_max).min(w_max));
        let xi: T = StandardNormal.sample(&mut rng);
        w = decay * w + gain * xi;
    }
    Ok(GustProfile { samples, seed, scale: sigma_w, length_scale })
}

/// Parameters shared by every gust realization.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct GustConfig<T> {
    /// Largest turbulence intensity σ_max (m/s); ensembles stratify [0, σ_max].
    pub sigma: T,
    /// Dryden length scale L_w (m).
    pub length_scale: T,
    /// Disturbance bound as a multiple of σ_max; w_max = bound_factor · σ_max.
    pub bound_factor: T,
    /// Length of each training realization (s).
    pub training_duration: T,
}

impl<T: Float> GustConfig<T> {
    pub fn w_max(&self) -> T {
        self.bound_factor * self.sigma
    }
}

impl<T: Float> Default for GustConfig<T> {
    fn default() -> Self {
        GustConfig {
            sigma: T::of(1.0),
            length_scale: T::of(50.0),
            bound_factor: T::of(3.0),
            training_duration: T::of(0.2),
        }
    }
}

/// Deterministic per-state disturbance ensemble.
///
/// Realization `i` draws its seed from the bit hash of `x0` mixed with `i`,
/// and its intensity from the midpoint of the `i`-th of `n` equal bands of
/// `[0, σ_max]`, so the ensemble spans low to high turbulence.
pub fn training_ensemble<T: Float>(
    x0: &WingState<T>,
    n_realizations: usize,
    cfg: &GustConfig<T>,
    airspeed: T,
    sample_time: T,
) -> Result<Vec<GustProfile<T>>>
where
    StandardNormal: Distribution<T>,
{
    if n_realizations == 0 {
        return Err(Error::config("n_realizations must be >= 1"));
    }
    let base = x0.bit_hash();
    let n_t = T::from_usize(n_realizations).unwrap();
    (0..n_realizations)
        .map(|i| {
            let sigma_i = cfg.sigma * (T::from_usize(i).unwrap() + T::of(0.5)) / n_t;
            dryden_generate(
                mix_seed(base, i as u64),
                cfg.training_duration,
                airspeed,
                sigma_i,
                cfg.length_scale,
                sample_time,
                cfg.w_max(),
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const V: f64 = 10.0;
    const T_S: f64 = 0.001;

    #[test]
    fn zero_intensity_is_silent() {
        let g = dryden_generate(7, 1.0, V, 0.0, 50.0, T_S, 3.0).unwrap();
        assert_eq!(g.samples.len(), 1000);
        assert!(g.samples.iter().all(|&w| w == 0.0));
    }

    #[test]
    fn deterministic_in_seed() {
        let a = dryden_generate(42, 0.5, V, 1.0, 50.0, T_S, 3.0).unwrap();
        let b = dryden_generate(42, 0.5, V, 1.0, 50.0, T_S, 3.0).unwrap();
        assert_eq!(a, b);
        let c = dryden_generate(43, 0.5, V, 1.0, 50.0, T_S, 3.0).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn stationary_variance_matches_intensity() {
        // 10^6 samples, effectively unclipped.
        let sigma = 0.8;
        let g = dryden_generate(11, 1000.0, V, sigma, 50.0, T_S, 1e9).unwrap();
        assert_eq!(g.samples.len(), 1_000_000);
        let mean: f64 = g.samples.iter().sum::<f64>() / g.samples.len() as f64;
        let var: f64 =
            g.samples.iter().map(|w| (w - mean) * (w - mean)).sum::<f64>() / g.samples.len() as f64;
        let rel = (var - sigma * sigma).abs() / (sigma * sigma);
        assert!(rel < 0.10, "variance {var} vs sigma^2 {}", sigma * sigma);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(dryden_generate(0, 0.0, V, 1.0, 50.0, T_S, 3.0).is_err());
        assert!(dryden_generate(0, 1.0, -1.0, 1.0, 50.0, T_S, 3.0).is_err());
        assert!(dryden_generate(0, 1.0, V, 1.0, 50.0, 10.0, 3.0).is_err());
    }

    #[test]
    fn ensemble_is_reproducible_and_stratified() {
        let cfg = GustConfig::<f64>::default();
        let x0 = WingState::new(0.01, -0.05, 0.2, 0.0, 0.0);
        let e1 = training_ensemble(&x0, 4, &cfg, V, T_S).unwrap();
        let e2 = training_ensemble(&x0, 4, &cfg, V, T_S).unwrap();
        assert_eq!(e1, e2);
        assert_eq!(e1.len(), 4);
        for (i, g) in e1.iter().enumerate() {
            let lo = cfg.sigma * i as f64 / 4.0;
            let hi = cfg.sigma * (i + 1) as f64 / 4.0;
            assert!(g.scale > lo && g.scale < hi, "realization {i} outside its band");
        }
        let single = training_ensemble(&x0, 1, &cfg, V, T_S).unwrap();
        assert_eq!(single.len(), 1);
    }

    #[test]
    fn csv_round_trip() {
        let g = dryden_generate(3, 0.02, V, 1.0, 50.0, T_S, 3.0).unwrap();
        let mut buf = Vec::new();
        g.write_csv(&mut buf).unwrap();
        let back = GustProfile::<f64>::read_csv(std::io::BufReader::new(&buf[..])).unwrap();
        assert_eq!(back.samples, g.samples);
    }

    proptest! {
        #[test]
        fn samples_respect_the_bound(seed in 0u64..1000, sigma in 0.1_f64..4.0) {
            let w_max = 3.0 * sigma;
            let g = dryden_generate(seed, 0.25, V, sigma, 50.0, T_S, w_max).unwrap();
            prop_assert!(g.samples.iter().all(|w| w.abs() <= w_max));
        }
    }
}
