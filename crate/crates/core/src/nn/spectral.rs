//! Spectral normalization by warm-started power iteration.

use crate::rng::{standard_normal, Rng};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data has the wrong length");
        Self { rows, cols, data }
    }

    pub fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self::new(n, n, data)
    }

    pub fn diag(d: &[f64]) -> Self {
        let n = d.len();
        let mut m = Self::new(n, n, vec![0.0; n * n]);
        for (i, &x) in d.iter().enumerate() {
            m.data[i * n + i] = x;
        }
        m
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }
}

/// Persistent left/right singular-vector estimates for one weight matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerIterState {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

impl PowerIterState {
    pub fn random(rows: usize, cols: usize, rng: &mut Rng) -> Self {
        let mut u: Vec<f64> = (0..rows).map(|_| standard_normal(rng)).collect();
        normalize(&mut u);
        Self { u, v: vec![0.0; cols] }
    }
}

pub(crate) fn normalize(x: &mut [f64]) -> f64 {
    let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n > 0.0 {
        x.iter_mut().for_each(|v| *v /= n);
    }
    n
}

/// Runs `iters` power iterations on the row-major `rows x cols` matrix `w`,
/// updating `state` in place, and returns `σ̂ = uᵀ W v`.
pub(crate) fn power_iterate(w: &[f64], rows: usize, cols: usize, iters: usize, state: &mut PowerIterState) -> f64 {
    for _ in 0..iters {
        // v <- Wᵀu / |Wᵀu|
        state.v.iter_mut().for_each(|x| *x = 0.0);
        for r in 0..rows {
            let ur = state.u[r];
            let row = &w[r * cols..(r + 1) * cols];
            for (vc, &wrc) in state.v.iter_mut().zip(row) {
                *vc += wrc * ur;
            }
        }
        normalize(&mut state.v);
        // u <- Wv / |Wv|
        for r in 0..rows {
            let row = &w[r * cols..(r + 1) * cols];
            state.u[r] = row.iter().zip(&state.v).map(|(a, b)| a * b).sum();
        }
        normalize(&mut state.u);
    }
    bilinear(w, rows, cols, &state.u, &state.v)
}

pub(crate) fn bilinear(w: &[f64], rows: usize, cols: usize, u: &[f64], v: &[f64]) -> f64 {
    (0..rows)
        .map(|r| u[r] * w[r * cols..(r + 1) * cols].iter().zip(v).map(|(a, b)| a * b).sum::<f64>())
        .sum()
}

/// Returns `weight / σ̂` where `σ̂` is the power-iteration estimate of the top
/// singular value. A zero matrix comes back unchanged.
pub fn spectral_normalize(weight: &Matrix, iters: usize, state: &mut PowerIterState) -> Matrix {
    assert!(iters >= 1, "spectral_normalize needs at least one iteration");
    assert_eq!(state.u.len(), weight.rows);
    if state.v.len() != weight.cols {
        state.v = vec![0.0; weight.cols];
    }
    let sigma = power_iterate(&weight.data, weight.rows, weight.cols, iters, state);
    if sigma.abs() <= f64::MIN_POSITIVE {
        return weight.clone();
    }
    Matrix::new(weight.rows, weight.cols, weight.data.iter().map(|x| x / sigma).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn identity_is_unchanged() {
        let mut st = PowerIterState::random(4, 4, &mut seeded(1));
        let out = spectral_normalize(&Matrix::identity(4), 3, &mut st);
        for (a, b) in out.data.iter().zip(&Matrix::identity(4).data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn diagonal_is_divided_by_largest_entry() {
        let mut st = PowerIterState::random(2, 2, &mut seeded(2));
        let out = spectral_normalize(&Matrix::diag(&[2.0, 1.0]), 60, &mut st);
        assert!((out.get(0, 0) - 1.0).abs() < 1e-9);
        assert!((out.get(1, 1) - 0.5).abs() < 1e-9);
        assert!(out.get(0, 1).abs() < 1e-12 && out.get(1, 0).abs() < 1e-12);
    }

    #[test]
    fn zero_matrix_is_returned_unchanged() {
        let z = Matrix::new(3, 2, vec![0.0; 6]);
        let mut st = PowerIterState::random(3, 2, &mut seeded(3));
        assert_eq!(spectral_normalize(&z, 5, &mut st), z);
    }

    #[test]
    fn state_is_reused_across_calls() {
        let mut rng = seeded(4);
        let mut w = Matrix::new(5, 3, (0..15).map(|_| standard_normal(&mut rng)).collect());
        w.data[0] += 4.0;
        let mut st = PowerIterState::random(5, 3, &mut rng);
        spectral_normalize(&w, 200, &mut st);
        let warmed = st.clone();
        spectral_normalize(&w, 1, &mut st);
        let du: f64 = warmed.u.iter().zip(&st.u).map(|(a, b)| (a - b).abs()).sum();
        assert!(du < 1e-8);
    }
}
