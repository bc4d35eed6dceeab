use crate::error::{NnError, Result};
use crate::param::ParamStore;
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Adam with decoupled weight decay.
///
/// The decay shrinks the weights directly (`w -= lr * wd * w`) and never
/// enters the moment estimates.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    /// Number of completed steps.
    pub step: u64,
    /// First and second moments, one buffer per parameter in store order.
    pub moments: Vec<(Vec<T>, Vec<T>)>,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: AdamWConfig, store: &ParamStore<T>) -> Self {
        let moments = store
            .iter()
            .map(|p| (vec![T::zero(); p.tensor.numel()], vec![T::zero(); p.tensor.numel()]))
            .collect();
        Self {
            config,
            step: 0,
            moments,
        }
    }

    /// Applies one update using the gradients accumulated in `store`.
    /// Parameters without a gradient buffer are left untouched.
    ///
    /// Nothing is modified when any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if self.moments.len() != store.len() {
            return Err(NnError::InvalidArgument(format!(
                "optimizer tracks {} parameters, store has {}",
                self.moments.len(),
                store.len()
            )));
        }
        if let Some(p) = store
            .iter()
            .find(|p| p.tensor.grad().is_some_and(|g| g.iter().any(|v| !v.is_finite())))
        {
            return Err(NnError::NonFiniteGradient(p.name.clone()));
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let (one_b1, one_b2) = (T::from_f64(1.0 - c.beta1), T::from_f64(1.0 - c.beta2));
        let decay = T::from_f64(1.0 - lr * c.weight_decay);
        let (bc1, bc2, lr_t) = (T::from_f64(bc1), T::from_f64(bc2), T::from_f64(lr));
        let eps = T::from_f64(c.eps);
        for (p, (m, v)) in store.iter_mut().zip(self.moments.iter_mut()) {
            let Some(g) = p.tensor.grad().map(<[T]>::to_vec) else {
                continue;
            };
            for (((w, &gi), mi), vi) in p
                .tensor
                .data_mut()
                .iter_mut()
                .zip(&g)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *w *= decay;
                *mi = b1 * *mi + one_b1 * gi;
                *vi = b2 * *vi + one_b2 * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w -= lr_t * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
