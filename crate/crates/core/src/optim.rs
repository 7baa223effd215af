//! First-order optimizer shared by every optimization stage.

use ndarray::{Array2, Zip};

pub const DEFAULT_LEARNING_RATE: f64 = 0.01;

/// Adam with bias-corrected first and second moment estimates and a
/// constant learning rate.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Array2<f64>,
    v: Array2<f64>,
}

impl Adam {
    pub fn new(shape: (usize, usize), lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Array2::zeros(shape),
            v: Array2::zeros(shape),
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.t
    }

    /// Updates `params` in place against `grad`.
    pub fn step(&mut self, params: &mut Array2<f64>, grad: &Array2<f64>) {
        assert_eq!(params.dim(), grad.dim(), "parameter and gradient shapes differ");
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let (lr, eps) = (self.lr, self.eps);
        Zip::from(params)
            .and(&mut self.m)
            .and(&mut self.v)
            .and(grad)
            .for_each(|p, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = Array2::from_elem((1, 2), 1.0);
        let g = ndarray::array![[3.0, -0.5]];
        let mut opt = Adam::new((1, 2), 0.01);
        opt.step(&mut p, &g);
        // bias correction makes the first update lr * sign(g)
        assert!((p[[0, 0]] - 0.99).abs() < 1e-6);
        assert!((p[[0, 1]] - 1.01).abs() < 1e-6);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut p = Array2::from_elem((1, 1), 2.0);
        let mut opt = Adam::new((1, 1), 0.05);
        for _ in 0..2000 {
            let g = p.mapv(|x| 2.0 * (x - 0.5));
            opt.step(&mut p, &g);
        }
        assert!((p[[0, 0]] - 0.5).abs() < 1e-2);
    }
}
