//! Power iteration for largest singular values.
//!
//! Each regularized weight matrix keeps a persistent pair of unit vectors
//! that are refined by one iteration per training step; verification runs
//! use many more iterations.

use crate::rng::SeedRng;
use crate::tensor::Tensor;

/// Persistent left/right singular-vector estimates for one weight matrix.
#[derive(Clone, Debug)]
pub struct PowerIterState {
    pub u: Tensor,
    pub v: Tensor,
}

impl PowerIterState {
    pub fn new(rows: usize, cols: usize, rng: &mut SeedRng) -> Self {
        let mut u = Tensor::randn(&[rows], 1.0, rng);
        let mut v = Tensor::randn(&[cols], 1.0, rng);
        normalize(&mut u);
        normalize(&mut v);
        PowerIterState { u, v }
    }

    /// Refine the singular vectors against `w` (rows x cols as a flat
    /// slice) and return the current sigma estimate u^T W v.
    ///
    /// A zero matrix leaves the state untouched and reports sigma = 0.
    pub fn update(&mut self, w: &[f64], rows: usize, cols: usize, iters: usize) -> f64 {
        assert_eq!(w.len(), rows * cols, "weight buffer size");
        assert!(iters >= 1, "power iteration needs at least one step");
        if w.iter().all(|&x| x == 0.0) {
            return 0.0;
        }
        for _ in 0..iters {
            // v <- normalize(W^T u)
            for j in 0..cols {
                let mut acc = 0.0;
                for i in 0..rows {
                    acc += w[i * cols + j] * self.u.data()[i];
                }
                self.v.data_mut()[j] = acc;
            }
            if !normalize(&mut self.v) {
                // u is orthogonal to the range; re-seed deterministically.
                for (i, x) in self.v.data_mut().iter_mut().enumerate() {
                    *x = if i == 0 { 1.0 } else { 0.0 };
                }
            }
            // u <- normalize(W v)
            for i in 0..rows {
                let mut acc = 0.0;
                for j in 0..cols {
                    acc += w[i * cols + j] * self.v.data()[j];
                }
                self.u.data_mut()[i] = acc;
            }
            if !normalize(&mut self.u) {
                for (i, x) in self.u.data_mut().iter_mut().enumerate() {
                    *x = if i == 0 { 1.0 } else { 0.0 };
                }
            }
        }
        let mut sigma = 0.0;
        for i in 0..rows {
            let mut acc = 0.0;
            for j in 0..cols {
                acc += w[i * cols + j] * self.v.data()[j];
            }
            sigma += self.u.data()[i] * acc;
        }
        sigma
    }
}

fn normalize(t: &mut Tensor) -> bool {
    let norm = t.sq_norm().sqrt();
    if norm <= 1e-300 {
        return false;
    }
    for x in t.data_mut() {
        *x /= norm;
    }
    true
}
