//! RMSprop with momentum and decoupled weight decay.
//!
//! Update per trainable parameter, in this order:
//!
//! ```text
//! p   <- p * (1 - lr * wd)              (decoupled decay, before the step)
//! sq  <- alpha * sq + (1 - alpha) * g^2
//! buf <- momentum * buf + g / (sqrt(sq) + eps)
//! p   <- p - lr * buf
//! ```
//!
//! A zero gradient with zero decay leaves a parameter untouched. Before any
//! parameter is mutated, every gradient is scanned; a non-finite value aborts
//! the whole step with [`Error::Diverged`].

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::param::ParamStore;
use crate::scalar::Scalar;

struct Slot<S> {
    sq: Vec<S>,
    buf: Vec<S>,
}

/// RMSprop accumulators plus hyperparameters.
pub struct OptimizerState<S: Scalar> {
    pub lr: f64,
    pub momentum: f64,
    /// Squared-gradient EMA decay.
    pub alpha: f64,
    pub weight_decay: f64,
    pub eps: f64,
    slots: BTreeMap<String, Slot<S>>,
}

impl<S: Scalar> OptimizerState<S> {
    pub fn rmsprop(lr: f64, weight_decay: f64) -> Result<Self> {
        if !(lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
        }
        if weight_decay < 0.0 {
            return Err(Error::Config(format!("weight decay must be >= 0, got {weight_decay}")));
        }
        Ok(OptimizerState {
            lr,
            momentum: 0.9,
            alpha: 0.9,
            weight_decay,
            eps: 1e-8,
            slots: BTreeMap::new(),
        })
    }

    /// One update over every trainable parameter, in name order.
    /// Gradients must have been collected into the store first.
    pub fn step(&mut self, store: &mut ParamStore<S>) -> Result<()> {
        // validate before mutating anything: a bad gradient aborts the step
        for (name, entry) in store.iter() {
            if !entry.trainable {
                continue;
            }
            let grad = entry.tensor.grad.as_deref().ok_or_else(|| {
                Error::Usage(format!("no gradient collected for parameter '{name}'"))
            })?;
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged(format!("non-finite gradient in '{name}'")));
            }
        }

        let lr = S::cast(self.lr);
        let decay = S::cast(1.0 - self.lr * self.weight_decay);
        let alpha = S::cast(self.alpha);
        let one_m_alpha = S::one() - alpha;
        let momentum = S::cast(self.momentum);
        let eps = S::cast(self.eps);

        for (name, entry) in store.iter_mut() {
            if !entry.trainable {
                continue;
            }
            let slot = self.slots.entry(name.to_string()).or_insert_with(|| Slot {
                sq: vec![S::zero(); entry.tensor.numel()],
                buf: vec![S::zero(); entry.tensor.numel()],
            });
            if slot.sq.len() != entry.tensor.numel() {
                return Err(Error::Shape(format!(
                    "accumulator for '{name}' has {} elements, parameter has {}",
                    slot.sq.len(),
                    entry.tensor.numel()
                )));
            }
            let grad = entry.tensor.grad.as_ref().expect("validated above").clone();
            let data = entry.tensor.data_mut();
            for i in 0..data.len() {
                let g = grad[i];
                data[i] *= decay;
                slot.sq[i] = alpha * slot.sq[i] + one_m_alpha * g * g;
                slot.buf[i] = momentum * slot.buf[i] + g / (slot.sq[i].sqrt() + eps);
                data[i] -= lr * slot.buf[i];
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Shape4, Tensor4};

    fn store_with(p: Vec<f64>, g: Option<Vec<f64>>) -> ParamStore<f64> {
        let mut store = ParamStore::new();
        let shape = Shape4::matrix(1, p.len());
        let mut t = Tensor4::from_vec(shape, p).unwrap();
        t.grad = g;
        store.insert("w", t, true).unwrap();
        store
    }

    #[test]
    fn zero_gradient_zero_decay_is_a_no_op() {
        let mut store = store_with(vec![1.5, -2.0], Some(vec![0.0, 0.0]));
        let mut opt = OptimizerState::rmsprop(0.01, 0.0).unwrap();
        for _ in 0..3 {
            opt.step(&mut store).unwrap();
        }
        assert_eq!(store.tensor("w").unwrap().data(), &[1.5, -2.0]);
    }

    #[test]
    fn weight_decay_only_scales_geometrically() {
        let (lr, wd) = (0.1, 0.5);
        let mut store = store_with(vec![2.0], Some(vec![0.0]));
        let mut opt = OptimizerState::rmsprop(lr, wd).unwrap();
        for t in 1..=5 {
            opt.step(&mut store).unwrap();
            let want = 2.0 * (1.0 - lr * wd).powi(t);
            let got = store.tensor("w").unwrap().data()[0];
            assert!((got - want).abs() < 1e-12, "step {t}: {got} vs {want}");
        }
    }

    #[test]
    fn quadratic_bowl_shrinks_parameter_each_step() {
        // loss = p^2/2, grad = p; independent scalar simulation cross-checks
        let lr = 1e-3;
        let mut store = store_with(vec![1.0], None);
        let mut opt = OptimizerState::rmsprop(lr, 0.0).unwrap();
        let (mut sim_p, mut sim_sq, mut sim_buf) = (1.0f64, 0.0f64, 0.0f64);
        for _ in 0..50 {
            let p = store.tensor("w").unwrap().data()[0];
            store.get_mut("w").unwrap().tensor.grad = Some(vec![p]);
            opt.step(&mut store).unwrap();
            let next = store.tensor("w").unwrap().data()[0];
            assert!(next.abs() < p.abs(), "|p| must shrink: {next} vs {p}");

            let g = sim_p;
            sim_sq = 0.9 * sim_sq + 0.1 * g * g;
            sim_buf = 0.9 * sim_buf + g / (sim_sq.sqrt() + 1e-8);
            sim_p -= lr * sim_buf;
            assert!((next - sim_p).abs() < 1e-12);
        }
    }

    #[test]
    fn nan_gradient_aborts_without_touching_parameters() {
        let mut store = store_with(vec![1.0, 2.0], Some(vec![0.5, f64::NAN]));
        let mut opt = OptimizerState::rmsprop(0.01, 0.1).unwrap();
        assert!(matches!(opt.step(&mut store), Err(Error::Diverged(_))));
        assert_eq!(store.tensor("w").unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn missing_gradient_is_a_usage_error() {
        let mut store = store_with(vec![1.0], None);
        let mut opt = OptimizerState::rmsprop(0.01, 0.0).unwrap();
        assert!(matches!(opt.step(&mut store), Err(Error::Usage(_))));
    }

    #[test]
    fn hyperparameters_are_validated() {
        assert!(OptimizerState::<f64>::rmsprop(0.0, 0.0).is_err());
        assert!(OptimizerState::<f64>::rmsprop(0.1, -0.1).is_err());
    }
}
