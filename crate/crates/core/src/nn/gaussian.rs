//! Diagonal Gaussian heads.

use crate::rng::{standard_normal, Rng};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianHead {
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
    /// `[σ_min, σ_max]` applied elementwise to `exp(log_std)`.
    pub clamp: Option<(f64, f64)>,
}

impl GaussianHead {
    pub fn new(mean: Vec<f64>, log_std: Vec<f64>, clamp: Option<(f64, f64)>) -> Self {
        assert_eq!(mean.len(), log_std.len(), "mean and log-std lengths differ");
        Self { mean, log_std, clamp }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn is_clamped(&self, i: usize) -> bool {
        match self.clamp {
            Some((lo, hi)) => {
                let s = self.log_std[i].exp();
                s < lo || s > hi
            }
            None => false,
        }
    }

    pub fn std(&self) -> Vec<f64> {
        self.log_std
            .iter()
            .map(|l| {
                let s = l.exp();
                match self.clamp {
                    Some((lo, hi)) => s.clamp(lo, hi),
                    None => s,
                }
            })
            .collect()
    }

    pub fn log_prob(&self, x: &[f64]) -> f64 {
        assert_eq!(x.len(), self.dim(), "sample dimension mismatch");
        self.std()
            .iter()
            .zip(x.iter().zip(&self.mean))
            .map(|(s, (xi, mi))| {
                let z = (xi - mi) / s;
                -0.5 * z * z - s.ln() - HALF_LN_2PI
            })
            .sum()
    }

    /// Gradients of `log_prob(x)` with respect to the mean and the raw
    /// log-std. Clamped coordinates have zero log-std gradient.
    pub fn log_prob_grads(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let std = self.std();
        let mut dmean = Vec::with_capacity(self.dim());
        let mut dlog = Vec::with_capacity(self.dim());
        for i in 0..self.dim() {
            let d = x[i] - self.mean[i];
            let var = std[i] * std[i];
            dmean.push(d / var);
            dlog.push(if self.is_clamped(i) { 0.0 } else { d * d / var - 1.0 });
        }
        (dmean, dlog)
    }

    pub fn sample(&self, rng: &mut Rng) -> Vec<f64> {
        self.std().iter().zip(&self.mean).map(|(s, m)| m + s * standard_normal(rng)).collect()
    }

    pub fn entropy(&self) -> f64 {
        self.std().iter().map(|s| s.ln() + 0.5 + HALF_LN_2PI).sum()
    }

    /// Gradient of the entropy with respect to the raw log-std.
    pub fn entropy_grad(&self) -> Vec<f64> {
        (0..self.dim()).map(|i| if self.is_clamped(i) { 0.0 } else { 1.0 }).collect()
    }

    /// `KL(self ‖ other)`.
    pub fn kl(&self, other: &GaussianHead) -> f64 {
        let (s1, s2) = (self.std(), other.std());
        (0..self.dim())
            .map(|i| {
                let d = self.mean[i] - other.mean[i];
                (s2[i] / s1[i]).ln() + (s1[i] * s1[i] + d * d) / (2.0 * s2[i] * s2[i]) - 0.5
            })
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn standard_normal_density_at_mean() {
        let h = GaussianHead::new(vec![0.7], vec![0.0], None);
        assert!((h.log_prob(&[0.7]) + 0.918_938_533_204_672_8).abs() < 1e-15);
        assert!((h.log_prob(&[1.7]) - (h.log_prob(&[0.7]) - 0.5)).abs() < 1e-15);
    }

    #[test]
    fn one_std_offset_costs_half_a_nat() {
        let h = GaussianHead::new(vec![2.0], vec![0.3f64.ln()], None);
        assert!((h.log_prob(&[2.3]) - (h.log_prob(&[2.0]) - 0.5)).abs() < 1e-12);
    }

    #[test]
    fn clamp_caps_std() {
        let h = GaussianHead::new(vec![0.0, 0.0], vec![5.0f64.ln(), 0.01f64.ln()], Some((0.1, 0.3)));
        assert_eq!(h.std(), vec![0.3, 0.1]);
        let (_, dlog) = h.log_prob_grads(&[1.0, 1.0]);
        assert_eq!(dlog, vec![0.0, 0.0]);
        assert_eq!(h.entropy_grad(), vec![0.0, 0.0]);
    }

    #[test]
    fn zero_std_sample_is_mean() {
        let h = GaussianHead::new(vec![1.5, -2.0], vec![f64::NEG_INFINITY; 2], None);
        assert_eq!(h.sample(&mut seeded(0)), vec![1.5, -2.0]);
    }

    #[test]
    fn log_prob_peaks_at_mean() {
        let h = GaussianHead::new(vec![0.4], vec![-0.5], None);
        let best = (-100..=100)
            .map(|k| 0.4 + k as f64 * 0.01)
            .max_by(|a, b| h.log_prob(&[*a]).total_cmp(&h.log_prob(&[*b])))
            .unwrap();
        assert!((best - 0.4).abs() < 1e-12);
    }

    #[test]
    fn grads_match_finite_differences() {
        let h = GaussianHead::new(vec![0.2, -1.0], vec![-0.3, 0.4], None);
        let x = [0.9, -0.2];
        let (dm, dl) = h.log_prob_grads(&x);
        let eps = 1e-6;
        for i in 0..2 {
            let mut p = h.clone();
            p.mean[i] += eps;
            let mut m = h.clone();
            m.mean[i] -= eps;
            assert!(((p.log_prob(&x) - m.log_prob(&x)) / (2.0 * eps) - dm[i]).abs() < 1e-7);
            let mut p = h.clone();
            p.log_std[i] += eps;
            let mut m = h.clone();
            m.log_std[i] -= eps;
            assert!(((p.log_prob(&x) - m.log_prob(&x)) / (2.0 * eps) - dl[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn kl_of_identical_heads_is_zero() {
        let h = GaussianHead::new(vec![0.1, 0.2], vec![-1.0, -2.0], Some((0.1, 0.3)));
        assert!(h.kl(&h).abs() < 1e-15);
        let g = GaussianHead::new(vec![1.1, 0.2], vec![-1.0, -2.0], Some((0.1, 0.3)));
        assert!((h.kl(&g) - 0.5 / 0.09).abs() < 1e-9);
    }
}
