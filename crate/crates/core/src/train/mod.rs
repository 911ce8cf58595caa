//! Mini-batch training: cross-entropy loss, Adam with L2 weight decay,
//! exponential learning-rate decay, early stopping and best-AUC selection.

mod adam;
mod fit;

pub use adam::{adam_step, AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPSILON};
pub use fit::{fit, EpochRecord, FitOutcome};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    /// Per-epoch multiplicative learning-rate factor.
    pub lr_decay: f64,
    pub batch_size: usize,
    pub dropout: f64,
    pub l2_lambda: f64,
    pub max_epochs: usize,
    /// Epochs without validation-AUC improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 1e-4,
            lr_decay: 0.97,
            batch_size: 128,
            dropout: 0.3,
            l2_lambda: 1e-4,
            max_epochs: 100,
            patience: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Parameter(msg));
        if !(self.lr0 > 0.0) {
            return bad(format!("lr0 must be positive, got {}", self.lr0));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad(format!("lr_decay must lie in (0, 1], got {}", self.lr_decay));
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if !(self.l2_lambda >= 0.0) {
            return bad(format!("l2_lambda must be non-negative, got {}", self.l2_lambda));
        }
        if self.patience < 1 {
            return bad("patience must be at least 1".into());
        }
        Ok(())
    }
}

/// Learning rate for a 0-based epoch: `lr0 * lr_decay^epoch`.
pub fn lr_at(epoch: usize, config: &TrainConfig) -> f64 {
    config.lr0 * config.lr_decay.powi(epoch as i32)
}

/// Mean negative log-likelihood of the true class for `[N, 2]` softmax
/// outputs, and its gradient with respect to the pre-softmax logits,
/// `(probs - onehot) / N`.
pub fn cross_entropy_loss<T: Element>(probs: &Tensor<T>, labels: &[u8]) -> Result<(f64, Tensor<T>)> {
    let n = labels.len();
    if probs.shape() != [n, 2] {
        return Err(Error::dim(format!(
            "probabilities {:?} do not match {n} labels",
            probs.shape()
        )));
    }
    let inv_n = T::from_f64(1.0 / n as f64);
    let mut grad = probs.clone();
    let mut total = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        if label > 1 {
            return Err(Error::Data(format!("label {label} at index {i} is not in {{0, 1}}")));
        }
        let p = probs.data()[2 * i + label as usize].as_f64();
        total -= p.max(f64::MIN_POSITIVE).ln();
        let row = &mut grad.data_mut()[2 * i..2 * i + 2];
        row[label as usize] -= T::one();
        for v in row {
            *v *= inv_n;
        }
    }
    Ok((total / n as f64, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_prediction_costs_ln_two() {
        let p = Tensor::from_vec(&[2, 2], vec![0.5f64, 0.5, 0.5, 0.5]).unwrap();
        for labels in [[0, 0], [1, 0], [1, 1]] {
            let (loss, _) = cross_entropy_loss(&p, &labels).unwrap();
            assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
        }
    }

    #[test]
    fn confident_correct_prediction_costs_nothing() {
        for delta in [1e-3, 1e-6, 1e-9] {
            let p = Tensor::from_vec(&[1, 2], vec![1.0 - delta, delta]).unwrap();
            let (loss, _) = cross_entropy_loss(&p, &[0]).unwrap();
            assert!(loss < 2.0 * delta);
        }
    }

    #[test]
    fn two_sample_loss_and_gradient() {
        let p = Tensor::from_vec(&[2, 2], vec![0.8f64, 0.2, 0.3, 0.7]).unwrap();
        let (loss, grad) = cross_entropy_loss(&p, &[0, 1]).unwrap();
        let expected = -(0.8f64.ln() + 0.7f64.ln()) / 2.0;
        assert!((loss - expected).abs() < 1e-12);
        assert!((loss - 0.28990).abs() < 1e-5);
        let g = grad.data();
        assert!((g[0] - (-0.1)).abs() < 1e-12 && (g[1] - 0.1).abs() < 1e-12);
        assert!((g[2] - 0.15).abs() < 1e-12 && (g[3] - (-0.15)).abs() < 1e-12);
    }

    #[test]
    fn labels_outside_binary_are_rejected() {
        let p = Tensor::from_vec(&[1, 2], vec![0.5f32, 0.5]).unwrap();
        assert!(matches!(cross_entropy_loss(&p, &[2]), Err(Error::Data(_))));
    }

    #[test]
    fn learning_rate_schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, &cfg), 1e-4);
        let cfg95 = TrainConfig { lr_decay: 0.95, ..cfg.clone() };
        assert!((lr_at(10, &cfg95) - 5.987369392383789e-5).abs() < 1e-12);
        let flat = TrainConfig { lr_decay: 1.0, ..cfg };
        assert!((0..50).all(|e| lr_at(e, &flat) == 1e-4));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for cfg in [
            TrainConfig { lr0: 0.0, ..Default::default() },
            TrainConfig { lr_decay: 1.5, ..Default::default() },
            TrainConfig { batch_size: 1, ..Default::default() },
            TrainConfig { patience: 0, ..Default::default() },
            TrainConfig { dropout: 1.0, ..Default::default() },
        ] {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
    }
}
