//! Stochastic gradient descent with classical momentum, plus the piecewise
//! learning rate schedule used for predicate head training.

use ndarray::Array2;

/// SGD with velocity `v <- momentum * v + g` and update `p <- p - lr * v`.
/// With `momentum = 0` this is plain SGD.
pub struct SgdMomentum {
    momentum: f64,
    velocity: Vec<Array2<f64>>,
}

impl SgdMomentum {
    pub fn new(momentum: f64) -> Self {
        assert!(
            (0.0..1.0).contains(&momentum),
            "momentum must be in [0, 1)"
        );
        SgdMomentum {
            momentum,
            velocity: Vec::new(),
        }
    }

    /// Applies one update. `params` and `grads` must line up index by index
    /// and keep the same order across calls; velocity slots are created on
    /// first use.
    pub fn step(&mut self, params: &mut [&mut Array2<f64>], grads: &[&Array2<f64>], lr: f64) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| Array2::zeros(p.dim())).collect();
        }
        assert_eq!(
            self.velocity.len(),
            params.len(),
            "parameter list changed between steps"
        );
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            assert_eq!(p.dim(), g.dim(), "gradient shape mismatch");
            v.zip_mut_with(g, |vi, gi| *vi = self.momentum * *vi + gi);
            p.zip_mut_with(v, |pi, vi| *pi -= lr * vi);
        }
    }
}

/// Head training schedule over 1-based epochs: 1e-3 for epochs 1-15, 1e-4
/// for 16-30, 1e-3 for 31-45, and 1e-4 from 46 on.
pub fn head_lr_schedule(epoch: usize) -> f64 {
    assert!(epoch >= 1, "epochs are 1-based");
    match epoch {
        1..=15 => 1e-3,
        16..=30 => 1e-4,
        31..=45 => 1e-3,
        _ => 1e-4,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn schedule_boundaries() {
        assert_eq!(head_lr_schedule(1), 1e-3);
        assert_eq!(head_lr_schedule(15), 1e-3);
        assert_eq!(head_lr_schedule(16), 1e-4);
        assert_eq!(head_lr_schedule(30), 1e-4);
        assert_eq!(head_lr_schedule(31), 1e-3);
        assert_eq!(head_lr_schedule(45), 1e-3);
        assert_eq!(head_lr_schedule(46), 1e-4);
        assert_eq!(head_lr_schedule(80), 1e-4);
        assert_eq!(head_lr_schedule(100), 1e-4);
    }

    #[test]
    fn zero_momentum_is_plain_sgd() {
        let mut p = array![[1.0, 2.0]];
        let g = array![[0.5, -0.5]];
        let mut opt = SgdMomentum::new(0.0);
        opt.step(&mut [&mut p], &[&g], 0.1);
        assert_eq!(p, array![[0.95, 2.05]]);
    }

    #[test]
    fn momentum_accumulates_velocity() {
        let mut p = array![[0.0]];
        let g = array![[1.0]];
        let mut opt = SgdMomentum::new(0.9);
        opt.step(&mut [&mut p], &[&g], 1.0);
        // v = 1, p = -1
        assert_eq!(p, array![[-1.0]]);
        opt.step(&mut [&mut p], &[&g], 1.0);
        // v = 1.9, p = -2.9
        assert!((p[(0, 0)] + 2.9).abs() < 1e-12);
    }
}
