//! Minimal fixed-size linear algebra for the 5-state model.
//!
//! The state dimension is small and fixed, so plain arrays beat a matrix
//! library for everything except the eigenvalue computation in `lpv`.

use crate::float::Float;

/// Number of state components: plunge, pitch, plunge rate, pitch rate, flap.
pub const STATE_DIM: usize = 5;

pub type Vec5<T> = [T; STATE_DIM];
pub type Mat5<T> = [[T; STATE_DIM]; STATE_DIM];

pub fn zeros<T: Float>() -> Vec5<T> {
    [T::zero(); STATE_DIM]
}

pub fn mat_zeros<T: Float>() -> Mat5<T> {
    [[T::zero(); STATE_DIM]; STATE_DIM]
}

pub fn identity<T: Float>() -> Mat5<T> {
    let mut m = mat_zeros();
    for (i, row) in m.iter_mut().enumerate() {
        row[i] = T::one();
    }
    m
}

pub fn add<T: Float>(a: &Vec5<T>, b: &Vec5<T>) -> Vec5<T> {
    std::array::from_fn(|i| a[i] + b[i])
}

pub fn sub<T: Float>(a: &Vec5<T>, b: &Vec5<T>) -> Vec5<T> {
    std::array::from_fn(|i| a[i] - b[i])
}

pub fn scale<T: Float>(a: &Vec5<T>, s: T) -> Vec5<T> {
    std::array::from_fn(|i| a[i] * s)
}

/// a + s * b
pub fn axpy<T: Float>(a: &Vec5<T>, s: T, b: &Vec5<T>) -> Vec5<T> {
    std::array::from_fn(|i| a[i] + s * b[i])
}

pub fn dot<T: Float>(a: &Vec5<T>, b: &Vec5<T>) -> T {
    let mut acc = T::zero();
    for i in 0..STATE_DIM {
        acc += a[i] * b[i];
    }
    acc
}

pub fn matvec<T: Float>(m: &Mat5<T>, v: &Vec5<T>) -> Vec5<T> {
    std::array::from_fn(|i| dot(&m[i], v))
}

/// m^T v without materializing the transpose.
pub fn matvec_t<T: Float>(m: &Mat5<T>, v: &Vec5<T>) -> Vec5<T> {
    std::array::from_fn(|j| {
        let mut acc = T::zero();
        for i in 0..STATE_DIM {
            acc += m[i][j] * v[i];
        }
        acc
    })
}

pub fn norm2<T: Float>(v: &Vec5<T>) -> T {
    dot(v, v).sqrt()
}

/// Weighted Euclidean norm sqrt(sum (v_i / c_i)^2); `weights` holds the
/// normalizing magnitudes c_i, not their inverses.
pub fn weighted_norm<T: Float>(v: &Vec5<T>, weights: &Vec5<T>) -> T {
    let mut acc = T::zero();
    for i in 0..STATE_DIM {
        let z = v[i] / weights[i];
        acc += z * z;
    }
    acc.sqrt()
}

pub fn is_finite<T: Float>(v: &Vec5<T>) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Evenly spaced values from `lo` to `hi` inclusive; `n == 1` yields the midpoint.
pub fn linspace<T: Float>(lo: T, hi: T, n: usize) -> Vec<T> {
    assert!(n >= 1);
    if n == 1 {
        return vec![(lo + hi) / T::of(2.0)];
    }
    let step = (hi - lo) / T::from_usize(n - 1).unwrap();
    (0..n)
        .map(|i| {
            if i == n - 1 {
                hi
            } else {
                lo + step * T::from_usize(i).unwrap()
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matvec_identity() {
        let v = [1.0, -2.0, 3.0, 0.5, -0.25];
        assert_eq!(matvec(&identity::<f64>(), &v), v);
        assert_eq!(matvec_t(&identity::<f64>(), &v), v);
    }

    #[test]
    fn weighted_norm_scales() {
        let v = [2.0_f64, 0.0, 0.0, 0.0, 0.0];
        let w = [2.0, 1.0, 1.0, 1.0, 1.0];
        assert!((weighted_norm(&v, &w) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn linspace_endpoints() {
        let xs = linspace(-1.0, 1.0, 5);
        assert_eq!(xs.first(), Some(&-1.0));
        assert_eq!(xs.last(), Some(&1.0));
        assert_eq!(xs.len(), 5);
        assert_eq!(linspace(-2.0, 4.0, 1), vec![1.0]);
    }
}
