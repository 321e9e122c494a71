//! Per-module importance scores driving rank allocation.
//!
//! Each step, every module gets a raw sensitivity score: the mean absolute
//! elementwise product of its adapter update and that update's gradient
//! (how much loss would move if the update were zeroed, to first order).
//! The raw stream is noisy, so the state keeps an exponential moving
//! average `i` and an uncertainty term `u` tracking how far the average sits
//! from the latest raw value. The composite score multiplies the two:
//! modules rank high only while they are both sensitive and still moving.

use serde::{Deserialize, Serialize};

use crate::numkernel::DenseMatrix;

/// Mean over entries of |delta_w ⊙ grad|. Panics on shape mismatch.
pub fn raw_score(delta_w: &DenseMatrix, grad: &DenseMatrix) -> f64 {
    assert_eq!(
        delta_w.shape(),
        grad.shape(),
        "raw_score: update {:?} vs grad {:?}",
        delta_w.shape(),
        grad.shape()
    );
    let n = (delta_w.rows() * delta_w.cols()) as f64;
    delta_w
        .as_slice()
        .iter()
        .zip(grad.as_slice())
        .map(|(w, g)| (w * g).abs())
        .sum::<f64>()
        / n
}

/// Smoothed importance state for all n modules.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceState {
    i: Vec<f64>,
    u: Vec<f64>,
    s_hat: Vec<f64>,
    t: u64,
    beta1: f64,
    beta2: f64,
}

impl ImportanceState {
    /// Cold start: every accumulator at zero.
    pub fn new(n: usize, beta1: f64, beta2: f64) -> Self {
        assert!(n >= 1, "need at least one module");
        for (name, b) in [("beta1", beta1), ("beta2", beta2)] {
            assert!(b > 0.0 && b < 1.0, "{name} must lie in (0,1), got {b}");
        }
        ImportanceState {
            i: vec![0.0; n],
            u: vec![0.0; n],
            s_hat: vec![0.0; n],
            t: 0,
            beta1,
            beta2,
        }
    }

    pub fn num_modules(&self) -> usize {
        self.i.len()
    }

    pub fn step(&self) -> u64 {
        self.t
    }

    pub fn i(&self) -> &[f64] {
        &self.i
    }

    pub fn u(&self) -> &[f64] {
        &self.u
    }

    pub fn s_hat(&self) -> &[f64] {
        &self.s_hat
    }

    /// Folds one step's raw scores into the state. The uncertainty update
    /// deliberately reads the freshly updated average, not the previous one.
    pub fn update_all(&mut self, raw: &[f64]) {
        assert_eq!(raw.len(), self.i.len(), "expected {} raw scores, got {}", self.i.len(), raw.len());
        for (k, &s) in raw.iter().enumerate() {
            assert!(
                s >= 0.0 && s.is_finite(),
                "module {k}: raw score {s} must be finite and non-negative; raw_score is broken"
            );
            self.i[k] = self.beta1 * self.i[k] + (1.0 - self.beta1) * s;
            self.u[k] = self.beta2 * self.u[k] + (1.0 - self.beta2) * (self.i[k] - s).abs();
            self.s_hat[k] = self.i[k] * self.u[k];
        }
        self.t += 1;
    }

    /// Indices of the h largest composite scores, ties broken toward the
    /// lower module index. Result is sorted ascending.
    pub fn top_h(&self, h: usize) -> Vec<usize> {
        let n = self.i.len();
        assert!(h >= 1 && h <= n, "h must lie in 1..={n}, got {h}");
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            self.s_hat[b]
                .partial_cmp(&self.s_hat[a])
                .expect("scores are finite")
                .then(a.cmp(&b))
        });
        let mut selected: Vec<usize> = order.into_iter().take(h).collect();
        selected.sort_unstable();
        selected
    }
}
