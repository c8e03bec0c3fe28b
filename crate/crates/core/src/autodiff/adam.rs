use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use crate::error::{Error, Result};

/// Adam with bias correction. Moment buffers are created on the first step
/// and are tied to the parameter list's order and shapes from then on.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step_count: u64,
    first_moment: Vec<Matrix>,
    second_moment: Vec<Matrix>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam::new(1e-3)
    }
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step_count: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Updates `params` in place from `grads`. The caller discards the
    /// gradients afterwards (tapes are rebuilt every step).
    pub fn update(&mut self, params: &mut [&mut Matrix], grads: &[Matrix]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::InvalidArgument(format!(
                "adam: {} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::dim("adam_update", p.shape(), g.shape()));
            }
        }
        if self.first_moment.is_empty() {
            self.first_moment = grads.iter().map(|g| Matrix::zeros(g.rows(), g.cols())).collect();
            self.second_moment = self.first_moment.clone();
        } else if self.first_moment.len() != grads.len()
            || self.first_moment.iter().zip(grads).any(|(m, g)| m.shape() != g.shape())
        {
            return Err(Error::InvalidArgument(
                "adam: parameter list changed between steps".into(),
            ));
        }

        self.step_count += 1;
        let t = self.step_count as i32;
        let bias1 = 1.0 - self.beta1.powi(t);
        let bias2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.learning_rate, self.epsilon);

        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = self.first_moment[k].data_mut();
            let v = self.second_moment[k].data_mut();
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let m_hat = *mi / bias1;
                let v_hat = *vi / bias2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut w = Matrix::row_vector(&[1.0, -2.0]);
        let before = w.clone();
        let mut adam = Adam::default();
        adam.update(&mut [&mut w], &[Matrix::zeros(1, 2)]).unwrap();
        assert_eq!(w, before);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn one_step_on_square_moves_toward_zero() {
        let mut w = Matrix::scalar(1.0);
        let mut adam = Adam::new(0.1);
        let g = Matrix::scalar(2.0 * w.data()[0]);
        adam.update(&mut [&mut w], &[g]).unwrap();
        assert!(w.data()[0].abs() < 1.0);
    }

    #[test]
    fn converges_on_shifted_square() {
        let mut w = Matrix::scalar(0.0);
        let mut adam = Adam::new(0.1);
        for _ in 0..500 {
            let g = Matrix::scalar(2.0 * (w.data()[0] - 3.0));
            adam.update(&mut [&mut w], &[g]).unwrap();
        }
        assert!((w.data()[0] - 3.0).abs() < 1e-2, "{:?}", w);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut w = Matrix::zeros(2, 2);
        let mut adam = Adam::default();
        assert!(adam.update(&mut [&mut w], &[Matrix::zeros(1, 2)]).is_err());
        assert!(adam.update(&mut [&mut w], &[]).is_err());
    }

    #[test]
    fn step_count_increases() {
        let mut w = Matrix::zeros(1, 1);
        let mut adam = Adam::default();
        for k in 1..=3 {
            adam.update(&mut [&mut w], &[Matrix::scalar(1.0)]).unwrap();
            assert_eq!(adam.step_count(), k);
        }
    }
}
