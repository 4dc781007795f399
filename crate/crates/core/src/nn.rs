//! Two-layer perceptron building block shared by the prompt learner and the
//! predicate head: `y = relu(x W1 + b1) W2 + b2`.
//!
//! All parameters are stored as 2-d arrays (biases as `[1, n]` rows) so the
//! optimizer can treat every trainable tensor uniformly.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub w1: Array2<f64>,
    pub b1: Array2<f64>,
    pub w2: Array2<f64>,
    pub b2: Array2<f64>,
}

/// Tape handles for one forward pass over an [`Mlp`].
#[derive(Debug, Clone, Copy)]
pub struct MlpVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Uniform fan-in init, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn fan_in_init(rng: &mut ChaCha20Rng, rows: usize, cols: usize) -> Array2<f64> {
    let bound = 1.0 / (rows as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..bound))
}

impl Mlp {
    pub fn init(in_dim: usize, hidden: usize, out_dim: usize, rng: &mut ChaCha20Rng) -> Self {
        Mlp {
            w1: fan_in_init(rng, in_dim, hidden),
            b1: Array2::zeros((1, hidden)),
            w2: fan_in_init(rng, hidden, out_dim),
            b2: Array2::zeros((1, out_dim)),
        }
    }

    pub fn zeros(in_dim: usize, hidden: usize, out_dim: usize) -> Self {
        Mlp {
            w1: Array2::zeros((in_dim, hidden)),
            b1: Array2::zeros((1, hidden)),
            w2: Array2::zeros((hidden, out_dim)),
            b2: Array2::zeros((1, out_dim)),
        }
    }

    /// Exact identity map on `dim`-vectors: hidden layer is `[x; -x]` and the
    /// output recombines `relu(x) - relu(-x) = x`. Used by linear sanity
    /// checks that need the relu stack out of the way.
    pub fn identity(dim: usize) -> Self {
        let mut w1 = Array2::zeros((dim, 2 * dim));
        let mut w2 = Array2::zeros((2 * dim, dim));
        for i in 0..dim {
            w1[(i, i)] = 1.0;
            w1[(i, dim + i)] = -1.0;
            w2[(i, i)] = 1.0;
            w2[(dim + i, i)] = -1.0;
        }
        Mlp {
            w1,
            b1: Array2::zeros((1, 2 * dim)),
            w2,
            b2: Array2::zeros((1, dim)),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w1.dim().0
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.dim().1
    }

    pub fn out_dim(&self) -> usize {
        self.w2.dim().1
    }

    pub fn parameter_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    pub fn check_input(&self, dim: usize) -> Result<()> {
        if dim != self.in_dim() {
            return Err(Error::InvalidArgument(format!(
                "expected input of dimension {}, got {}",
                self.in_dim(),
                dim
            )));
        }
        Ok(())
    }

    /// Loads the parameters onto a tape as gradient-capable leaves.
    pub fn vars(&self, tape: &mut Tape) -> MlpVars {
        MlpVars {
            w1: tape.leaf(self.w1.clone()),
            b1: tape.leaf(self.b1.clone()),
            w2: tape.leaf(self.w2.clone()),
            b2: tape.leaf(self.b2.clone()),
        }
    }

    /// Differentiable forward pass for a `[n, in_dim]` node.
    pub fn forward(tape: &mut Tape, vars: MlpVars, x: Var) -> Var {
        let h = tape.matmul(x, vars.w1);
        let h = tape.add_row(h, vars.b1);
        let h = tape.relu(h);
        let y = tape.matmul(h, vars.w2);
        tape.add_row(y, vars.b2)
    }

    /// Plain forward pass for a `[n, in_dim]` batch.
    pub fn apply_batch(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut h = x.dot(&self.w1) + &self.b1;
        h.mapv_inplace(|v| v.max(0.0));
        h.dot(&self.w2) + &self.b2
    }

    /// Plain forward pass for a single vector.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let arr = Array2::from_shape_vec((1, x.len()), x.to_vec())
            .expect("row shape consistent by construction");
        self.apply_batch(&arr).row(0).to_vec()
    }

    pub fn params(&self) -> [&Array2<f64>; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn params_mut(&mut self) -> [&mut Array2<f64>; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn identity_mlp_reproduces_input_exactly() {
        let mlp = Mlp::identity(3);
        let x = vec![1.5, -2.25, 0.0];
        assert_eq!(mlp.apply(&x), x);
    }

    #[test]
    fn tape_forward_matches_plain_forward() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let mlp = Mlp::init(4, 6, 3, &mut rng);
        let x = Array2::from_shape_fn((2, 4), |(i, j)| (i as f64) - 0.3 * (j as f64));
        let plain = mlp.apply_batch(&x);

        let mut tape = Tape::new();
        let vars = mlp.vars(&mut tape);
        let leaf = tape.leaf(x);
        let out = Mlp::forward(&mut tape, vars, leaf);
        assert_eq!(tape.value(out), &plain);
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let mut a = ChaCha20Rng::seed_from_u64(7);
        let mut b = ChaCha20Rng::seed_from_u64(7);
        assert_eq!(Mlp::init(5, 8, 2, &mut a), Mlp::init(5, 8, 2, &mut b));
    }

    #[test]
    fn parameter_count_matches_shape_arithmetic() {
        let mlp = Mlp::zeros(10, 20, 5);
        assert_eq!(mlp.parameter_count(), 10 * 20 + 20 + 20 * 5 + 5);
    }
}
