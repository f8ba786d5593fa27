//! Small dense helpers with a fixed evaluation order.
//!
//! Every state update in the crate (environment, particles, enumeration nodes,
//! replay checks) goes through [`affine_step_into`], so identical inputs give
//! bit-identical outputs regardless of which code path produced them.

use nalgebra::{DMatrix, DVector};

/// `out = a * x + bias + noise`, accumulated left to right per row.
pub fn affine_step_into(a: &DMatrix<f64>, x: &[f64], bias: &[f64], noise: &[f64], out: &mut [f64]) {
    let (rows, cols) = a.shape();
    debug_assert_eq!(x.len(), cols);
    for r in 0..rows {
        let mut acc = 0.0;
        for c in 0..cols {
            acc += a[(r, c)] * x[c];
        }
        out[r] = acc + bias[r] + noise[r];
    }
}

/// `a * x` with the same row ordering as [`affine_step_into`].
pub fn matvec(a: &DMatrix<f64>, x: &[f64]) -> DVector<f64> {
    let (rows, cols) = a.shape();
    let mut out = DVector::zeros(rows);
    for r in 0..rows {
        let mut acc = 0.0;
        for c in 0..cols {
            acc += a[(r, c)] * x[c];
        }
        out[r] = acc;
    }
    out
}

/// `obs - c * x`, the residual fed to the observation-noise law.
pub fn residual_into(c: &DMatrix<f64>, x: &[f64], obs: &[f64], out: &mut [f64]) {
    let (rows, cols) = c.shape();
    for r in 0..rows {
        let mut acc = 0.0;
        for k in 0..cols {
            acc += c[(r, k)] * x[k];
        }
        out[r] = obs[r] - acc;
    }
}

/// Largest singular value.
pub fn op_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    if m.nrows() == 1 || m.ncols() == 1 {
        return m.norm();
    }
    m.clone().singular_values().max()
}

pub fn l1_norm(x: &DVector<f64>) -> f64 {
    x.iter().map(|v| v.abs()).sum()
}

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.carry += (self.sum - t) + v;
        } else {
            self.carry += (v - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

/// Norm of `a - b` relative to `max(1, ‖a‖, ‖b‖)`.
pub fn rel_diff(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let scale = 1f64.max(a.norm()).max(b.norm());
    (a - b).norm() / scale
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compensated_sum_recovers_small_terms() {
        let mut s = CompensatedSum::default();
        s.add(1e16);
        s.add(1.0);
        s.add(-1e16);
        assert_eq!(s.value(), 1.0);
    }

    #[test]
    fn op_norm_of_diagonal() {
        let m = DMatrix::from_row_slice(2, 2, &[3.0, 0.0, 0.0, -4.0]);
        assert!((op_norm(&m) - 4.0).abs() < 1e-12);
        assert_eq!(op_norm(&DMatrix::from_element(1, 1, -2.5)), 2.5);
    }

    #[test]
    fn affine_step_matches_matvec() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let mut out = [0.0; 2];
        affine_step_into(&a, &[1.0, -1.0], &[0.5, 0.5], &[0.0, 1.0], &mut out);
        assert_eq!(out, [-0.5, 0.5]);
        assert_eq!(matvec(&a, &[1.0, -1.0]).as_slice(), &[-1.0, -1.0]);
    }
}
