use crate::{ParamStore, Result, TensorError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected first and second moments, one pair of moment
/// buffers per trainable parameter.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    moments: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn with_lr(lr: f64) -> Self {
        Self::new(AdamConfig {
            lr,
            ..AdamConfig::default()
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every trainable parameter in place.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if let Some((_, p)) = store
            .iter()
            .find(|(_, p)| p.trainable && p.tensor.grad().is_none())
        {
            return Err(TensorError::MissingGrad(p.name.clone()));
        }
        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), None);
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (id, p) in store.iter_mut() {
            if !p.trainable {
                continue;
            }
            let n = p.tensor.numel();
            let (m, v) =
                self.moments[id.index()].get_or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            let (w, g) = p.tensor.value_and_grad_mut();
            let g = g.expect("checked above");
            for i in 0..n {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                w[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;

    #[test]
    fn zero_gradient_leaves_parameter_unchanged() {
        let mut store = ParamStore::new();
        let id = store
            .add("w", Tensor::new(&[2], vec![0.3, -1.2]).unwrap())
            .unwrap();
        let mut adam = Adam::with_lr(0.1);
        for _ in 0..5 {
            adam.step(&mut store).unwrap();
        }
        assert_eq!(store.tensor(id).data(), &[0.3, -1.2]);
    }

    #[test]
    fn missing_gradient_names_parameter() {
        let mut store = ParamStore::new();
        let id = store.add("enc.w", Tensor::zeros(&[1])).unwrap();
        store.get_mut(id).tensor.clear_grad();
        let err = Adam::with_lr(0.1).step(&mut store).unwrap_err();
        assert!(err.to_string().contains("enc.w"));
    }
}
