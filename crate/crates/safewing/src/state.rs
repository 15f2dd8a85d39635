//! Domain types shared across the stack: wing state, control input,
//! disturbance, and the admissible box sets.

use serde::{Deserialize, Serialize};

use crate::float::Float;
use crate::linalg::{Vec5, STATE_DIM};

/// Physical state of the typical-section wing model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WingState<T> {
    /// Plunge displacement (m), positive down.
    pub h: T,
    /// Pitch angle (rad), positive nose-up.
    pub theta: T,
    /// Plunge velocity (m/s).
    pub v_h: T,
    /// Pitch rate (rad/s).
    pub v_theta: T,
    /// Flap deflection angle (rad); the actuator state.
    pub beta_f: T,
}

impl<T: Float> WingState<T> {
    pub fn new(h: T, theta: T, v_h: T, v_theta: T, beta_f: T) -> Self {
        Self { h, theta, v_h, v_theta, beta_f }
    }

    pub fn zero() -> Self {
        Self::from_array([T::zero(); STATE_DIM])
    }

    pub fn from_array(a: Vec5<T>) -> Self {
        Self { h: a[0], theta: a[1], v_h: a[2], v_theta: a[3], beta_f: a[4] }
    }

    pub fn to_array(self) -> Vec5<T> {
        [self.h, self.theta, self.v_h, self.v_theta, self.beta_f]
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|x| x.is_finite())
    }

    /// Stable 64-bit hash of the component bit patterns, used to derive
    /// deterministic per-state seeds.
    pub fn bit_hash(&self) -> u64 {
        let mut acc = crate::util::FNV_OFFSET;
        for x in self.to_array() {
            acc = crate::util::fnv1a_u64(acc, x.as_f64().to_bits());
        }
        acc
    }
}

/// Commanded flap deflection (rad).
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct ControlInput<T>(pub T);

impl<T: Float> ControlInput<T> {
    pub fn zero() -> Self {
        ControlInput(T::zero())
    }
}

/// Vertical gust velocity (m/s).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Disturbance<T>(pub T);

impl<T: Float> Disturbance<T> {
    pub fn zero() -> Self {
        Disturbance(T::zero())
    }
}

/// Axis-aligned box of admissible states.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct StateBox<T> {
    pub lo: Vec5<T>,
    pub hi: Vec5<T>,
}

impl<T: Float> StateBox<T> {
    /// Symmetric box from per-component half-widths.
    pub fn symmetric(half: Vec5<T>) -> Self {
        Self { lo: std::array::from_fn(|i| -half[i]), hi: half }
    }

    pub fn half_widths(&self) -> Vec5<T> {
        std::array::from_fn(|i| (self.hi[i] - self.lo[i]) / T::of(2.0))
    }

    pub fn center(&self) -> Vec5<T> {
        std::array::from_fn(|i| (self.hi[i] + self.lo[i]) / T::of(2.0))
    }

    pub fn contains(&self, x: &Vec5<T>) -> bool {
        (0..STATE_DIM).all(|i| x[i] >= self.lo[i] && x[i] <= self.hi[i])
    }

    /// Box shrunk inward by `frac` of each half-width.
    pub fn shrink(&self, frac: T) -> Self {
        let m: Vec5<T> = self.half_widths();
        Self {
            lo: std::array::from_fn(|i| self.lo[i] + m[i] * frac),
            hi: std::array::from_fn(|i| self.hi[i] - m[i] * frac),
        }
    }

    /// Signed distance of component `i` to the nearest face; positive inside.
    pub fn margin(&self, x: &Vec5<T>, i: usize) -> T {
        (x[i] - self.lo[i]).min(self.hi[i] - x[i])
    }

    pub fn is_valid(&self) -> bool {
        (0..STATE_DIM).all(|i| self.lo[i] < self.hi[i] && self.lo[i].is_finite() && self.hi[i].is_finite())
    }
}

/// Actuator command interval.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct InputBox<T> {
    pub lo: T,
    pub hi: T,
}

impl<T: Float> InputBox<T> {
    pub fn contains(&self, u: T) -> bool {
        u >= self.lo && u <= self.hi
    }

    pub fn clamp(&self, u: T) -> T {
        u.max(self.lo).min(self.hi)
    }

    pub fn half_width(&self) -> T {
        (self.hi - self.lo) / T::of(2.0)
    }

    pub fn is_valid(&self) -> bool {
        self.lo < self.hi && self.lo.is_finite() && self.hi.is_finite()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn array_round_trip() {
        let x = WingState::new(0.1, -0.2, 0.3, -0.4, 0.5);
        assert_eq!(WingState::from_array(x.to_array()), x);
    }

    #[test]
    fn box_contains_and_shrink() {
        let b = StateBox::symmetric([1.0_f64, 1.0, 1.0, 1.0, 1.0]);
        assert!(b.contains(&[0.99, 0.0, 0.0, 0.0, 0.0]));
        assert!(!b.contains(&[1.01, 0.0, 0.0, 0.0, 0.0]));
        let s = b.shrink(0.02);
        assert!((s.hi[0] - 0.98).abs() < 1e-15);
        assert!((b.margin(&[0.9, 0.0, 0.0, 0.0, 0.0], 0) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn bit_hash_deterministic() {
        let x = WingState::new(0.1_f64, 0.0, 0.0, 0.0, 0.0);
        let y = WingState::new(0.1_f64, 0.0, 0.0, 0.0, 0.0);
        assert_eq!(x.bit_hash(), y.bit_hash());
        let z = WingState::new(0.2_f64, 0.0, 0.0, 0.0, 0.0);
        assert_ne!(x.bit_hash(), z.bit_hash());
    }
}
