//! State-scheduled linearization of the plant and its validation against
//! the nonlinear model.
//!
//! The discrete model is `x(k+1) = A(h,θ) x(k) + B u(k) + E w(k) + c`,
//! obtained from finite-difference Jacobians of [`plant::step_euler`] at the
//! scheduling state. The affine offset `c` makes the model exact at the
//! linearization point; it vanishes at the equilibrium.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::float::Float;
use crate::linalg::{self, Mat5, Vec5, STATE_DIM};
use crate::plant::{self, PlantParams};
use crate::state::{ControlInput, Disturbance, StateBox, WingState};

/// One scheduled linearization of the discrete dynamics.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LpvStep<T> {
    /// Discrete state matrix at the scheduling state.
    pub a: Mat5<T>,
    /// Input column for the commanded flap deflection (exact: the actuator
    /// law is already linear).
    pub b: Vec5<T>,
    /// Disturbance column for the vertical gust.
    pub e: Vec5<T>,
    /// Affine offset; zero when the scheduling state is the equilibrium.
    pub c: Vec5<T>,
}

impl<T: Float> LpvStep<T> {
    /// Advance one step: `A x + B u + E w + c`.
    pub fn step(&self, x: &Vec5<T>, u: T, w: T) -> Vec5<T> {
        let ax = linalg::matvec(&self.a, x);
        std::array::from_fn(|i| ax[i] + self.b[i] * u + self.e[i] * w + self.c[i])
    }
}

/// Linearize the discrete dynamics at `(x, u = β_f, w = 0)`.
///
/// Central finite differences with perturbation `1e-6 · (1 + |·|)` per
/// component. Returns a schedule error when `x` leaves the envelope.
pub fn linearize<T: Float>(
    x: &WingState<T>,
    p: &PlantParams<T>,
    envelope: &StateBox<T>,
) -> Result<LpvStep<T>> {
    if !envelope.contains(&x.to_array()) {
        return Err(Error::OutOfEnvelope(format!(
            "linearization state {:?} outside the admissible envelope",
            x.to_array().map(|v| v.as_f64())
        )));
    }
    let u0 = x.beta_f;
    let base = x.to_array();

    let mut a = linalg::mat_zeros::<T>();
    for j in 0..STATE_DIM {
        let hj = T::of(1e-6) * (T::one() + base[j].abs());
        let mut xp = base;
        let mut xm = base;
        xp[j] += hj;
        xm[j] -= hj;
        let fp = plant::step_euler(&WingState::from_array(xp), ControlInput(u0), Disturbance(T::zero()), p)?;
        let fm = plant::step_euler(&WingState::from_array(xm), ControlInput(u0), Disturbance(T::zero()), p)?;
        let (fp, fm) = (fp.to_array(), fm.to_array());
        for i in 0..STATE_DIM {
            a[i][j] = (fp[i] - fm[i]) / (T::of(2.0) * hj);
        }
    }

    let hu = T::of(1e-6) * (T::one() + u0.abs());
    let up = plant::step_euler(x, ControlInput(u0 + hu), Disturbance(T::zero()), p)?.to_array();
    let um = plant::step_euler(x, ControlInput(u0 - hu), Disturbance(T::zero()), p)?.to_array();
    let b: Vec5<T> = std::array::from_fn(|i| (up[i] - um[i]) / (T::of(2.0) * hu));

    let hw = T::of(1e-6);
    let wp = plant::step_euler(x, ControlInput(u0), Disturbance(hw), p)?.to_array();
    let wm = plant::step_euler(x, ControlInput(u0), Disturbance(-hw), p)?.to_array();
    let e: Vec5<T> = std::array::from_fn(|i| (wp[i] - wm[i]) / (T::of(2.0) * hw));

    let nominal = plant::step_euler(x, ControlInput(u0), Disturbance(T::zero()), p)?.to_array();
    let ax = linalg::matvec(&a, &base);
    let c: Vec5<T> = std::array::from_fn(|i| nominal[i] - ax[i] - b[i] * u0);

    Ok(LpvStep { a, b, e, c })
}

/// Frequency (Hz) and spectral radius of the dominant oscillatory mode of a
/// discrete state matrix. The dominant mode is the complex-pair eigenvalue
/// of largest magnitude; eigenvalues are computed in `f64`.
pub fn dominant_mode<T: Float>(a: &Mat5<T>, sample_time: T) -> (f64, f64) {
    let m = nalgebra::DMatrix::from_fn(STATE_DIM, STATE_DIM, |i, j| a[i][j].as_f64());
    let eig = m.complex_eigenvalues();
    let t = sample_time.as_f64();
    let mut best_freq = 0.0;
    let mut best_mag = 0.0;
    let mut rho: f64 = 0.0;
    for z in eig.iter() {
        let mag = z.norm();
        rho = rho.max(mag);
        if z.im.abs() > 1e-12 && mag > best_mag {
            best_mag = mag;
            best_freq = z.im.atan2(z.re).abs() / (2.0 * std::f64::consts::PI * t);
        }
    }
    (best_freq, rho)
}

/// Per-sample validation row.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SampleError {
    pub initial_state: [f64; STATE_DIM],
    /// max_k ||x_lpv - x_ref||_W / max_k ||x_ref||_W over the horizon.
    pub rel_traj_error: f64,
}

/// Validation summary for the scheduled linear model.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ValidationReport {
    pub horizon_steps: usize,
    pub n_samples: usize,
    /// Worst weighted relative trajectory error across samples.
    pub max_rel_traj_error: f64,
    /// Largest relative spread of any A entry across the sampled envelope.
    pub max_entry_deviation: f64,
    /// Dominant oscillatory mode of A at the equilibrium (Hz).
    pub dominant_mode_hz: f64,
    /// Spectral radius of A at the equilibrium.
    pub spectral_radius: f64,
    pub samples: Vec<SampleError>,
}

/// Roll the re-scheduled LPV model and the RK4 oracle side by side from each
/// sample with zero commanded input and no gust, and report the worst
/// weighted relative trajectory error plus the envelope spread of A.
///
/// `weights` are the per-component normalizing magnitudes of the weighted
/// norm (box half-widths in the shipped configuration).
pub fn validate<T: Float>(
    samples: &[WingState<T>],
    horizon: usize,
    p: &PlantParams<T>,
    envelope: &StateBox<T>,
    weights: &Vec5<T>,
) -> Result<ValidationReport> {
    if samples.is_empty() {
        return Err(Error::config("validation sample set is empty"));
    }
    let zero_u = ControlInput(T::zero());
    let zero_w = Disturbance(T::zero());

    let mut rows = Vec::with_capacity(samples.len());
    let mut max_err = 0.0f64;

    let mut a_min = linalg::mat_zeros::<T>();
    let mut a_max = linalg::mat_zeros::<T>();
    let mut first = true;

    for x0 in samples {
        let mut x_lpv = x0.to_array();
        let mut x_ref = *x0;
        let mut worst_dev = T::zero();
        let mut worst_ref = T::zero();
        for step in 0..horizon {
            let sched = linearize(&WingState::from_array(x_lpv), p, envelope)?;
            if step == 0 {
                for i in 0..STATE_DIM {
                    for j in 0..STATE_DIM {
                        if first {
                            a_min[i][j] = sched.a[i][j];
                            a_max[i][j] = sched.a[i][j];
                        } else {
                            a_min[i][j] = a_min[i][j].min(sched.a[i][j]);
                            a_max[i][j] = a_max[i][j].max(sched.a[i][j]);
                        }
                    }
                }
                first = false;
            }
            x_lpv = sched.step(&x_lpv, T::zero(), T::zero());
            x_ref = plant::reference_steps(&x_ref, zero_u, zero_w, p, 1, 10)?;
            let dev = linalg::weighted_norm(&linalg::sub(&x_lpv, &x_ref.to_array()), weights);
            let mag = linalg::weighted_norm(&x_ref.to_array(), weights);
            worst_dev = worst_dev.max(dev);
            worst_ref = worst_ref.max(mag);
        }
        let rel = if worst_ref > T::zero() {
            (worst_dev / worst_ref).as_f64()
        } else {
            worst_dev.as_f64()
        };
        max_err = max_err.max(rel);
        rows.push(SampleError {
            initial_state: x0.to_array().map(|v| v.as_f64()),
            rel_traj_error: rel,
        });
    }

    let mut max_entry_dev = 0.0f64;
    for i in 0..STATE_DIM {
        for j in 0..STATE_DIM {
            let span = (a_max[i][j] - a_min[i][j]).as_f64();
            let scale = a_max[i][j].abs().max(a_min[i][j].abs()).as_f64().max(1e-12);
            max_entry_dev = max_entry_dev.max(span / scale);
        }
    }

    let eq = linearize(&WingState::zero(), p, envelope)?;
    let (freq, rho) = dominant_mode(&eq.a, p.sample_time);

    Ok(ValidationReport {
        horizon_steps: horizon,
        n_samples: samples.len(),
        max_rel_traj_error: max_err,
        max_entry_deviation: max_entry_dev,
        dominant_mode_hz: freq,
        spectral_radius: rho,
        samples: rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn params() -> PlantParams<f64> {
        PlantParams::default_section()
    }

    fn envelope() -> StateBox<f64> {
        StateBox::symmetric([0.08, 0.15, 0.4, 1.0, 0.26])
    }

    #[test]
    fn offset_vanishes_at_equilibrium() {
        let lin = linearize(&WingState::zero(), &params(), &envelope()).unwrap();
        for v in lin.c {
            assert!(v.abs() < 1e-12, "offset component {v}");
        }
    }

    #[test]
    fn input_column_is_actuator_row() {
        let p = params();
        let lin = linearize(&WingState::zero(), &p, &envelope()).unwrap();
        let expect = p.sample_time * p.actuator_gain;
        assert_relative_eq!(lin.b[4], expect, epsilon = 1e-9);
        for i in 0..4 {
            assert!(lin.b[i].abs() < 1e-9, "b[{i}] = {}", lin.b[i]);
        }
    }

    #[test]
    fn state_matrix_matches_deriv_jacobian() {
        let p = params();
        let x = WingState::new(0.01, 0.1, -0.05, 0.4, 0.08);
        let lin = linearize(&x, &p, &envelope()).unwrap();
        let jac = plant::deriv_jacobian_x(&x, ControlInput(x.beta_f), Disturbance(0.0), &p).unwrap();
        for i in 0..STATE_DIM {
            for j in 0..STATE_DIM {
                let expect = if i == j { 1.0 } else { 0.0 } + p.sample_time * jac[i][j];
                assert!(
                    (lin.a[i][j] - expect).abs() < 1e-8,
                    "A[{i}][{j}] = {} vs {}",
                    lin.a[i][j],
                    expect
                );
            }
        }
    }

    #[test]
    fn exact_at_scheduling_point() {
        let p = params();
        let x = WingState::new(-0.02, 0.15, 0.2, -1.0, -0.1);
        let lin = linearize(&x, &p, &envelope()).unwrap();
        let model = lin.step(&x.to_array(), x.beta_f, 0.0);
        let truth = plant::step_euler(&x, ControlInput(x.beta_f), Disturbance(0.0), &p)
            .unwrap()
            .to_array();
        for i in 0..STATE_DIM {
            assert!((model[i] - truth[i]).abs() < 1e-12, "component {i}");
        }
    }

    #[test]
    fn schedule_error_outside_envelope() {
        let x = WingState::new(1.0, 0.0, 0.0, 0.0, 0.0);
        assert!(matches!(
            linearize(&x, &params(), &envelope()),
            Err(Error::OutOfEnvelope(_))
        ));
    }

    #[test]
    fn schedule_is_continuous() {
        let p = params();
        let x = WingState::new(0.01, 0.05, 0.0, 0.0, 0.0);
        let a0 = linearize(&x, &p, &envelope()).unwrap().a;
        let diff_at = |d: f64| {
            let xp = WingState::new(0.01, 0.05 + d, 0.0, 0.0, 0.0);
            let ap = linearize(&xp, &p, &envelope()).unwrap().a;
            let mut worst = 0.0f64;
            for i in 0..STATE_DIM {
                for j in 0..STATE_DIM {
                    worst = worst.max((ap[i][j] - a0[i][j]).abs());
                }
            }
            worst
        };
        let coarse = diff_at(0.05);
        let fine = diff_at(0.005);
        assert!(fine < coarse, "entry differences must shrink with the schedule step");
        assert!(fine < 0.12 * coarse, "expected roughly linear shrinkage: {fine} vs {coarse}");
    }

    #[test]
    fn equilibrium_mode_in_band_and_stable() {
        let p = params();
        let lin = linearize(&WingState::zero(), &p, &envelope()).unwrap();
        let (freq, rho) = dominant_mode(&lin.a, p.sample_time);
        assert!(rho < 1.0, "equilibrium must be discrete-stable, spectral radius {rho}");
        assert!((0.5..5.0).contains(&freq), "dominant mode {freq} Hz");
    }

    #[test]
    fn validate_zero_error_from_equilibrium() {
        let p = params();
        let report = validate(
            &[WingState::zero()],
            20,
            &p,
            &envelope(),
            &envelope().half_widths(),
        )
        .unwrap();
        assert!(report.max_rel_traj_error < 1e-12);
    }

    #[test]
    fn validate_rejects_empty_sample_set() {
        let p = params();
        assert!(validate(&[], 10, &p, &envelope(), &envelope().half_widths()).is_err());
    }
}
