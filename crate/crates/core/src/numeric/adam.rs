use crate::error::{Error, Result};
use crate::numeric::{ParamKind, ParamStore, Parameter, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Classic L2 term added to the gradient; 0 disables it.
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adam moments for every parameter of one [`ParamStore`].
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    first: Vec<Option<Tensor>>,
    second: Vec<Option<Tensor>>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Result<Self> {
        if !(config.lr > 0.0) {
            return Err(Error::invalid(format!(
                "learning rate must be positive, got {}",
                config.lr
            )));
        }
        if !(0.0..1.0).contains(&config.beta1) || !(0.0..1.0).contains(&config.beta2) {
            return Err(Error::invalid("beta1 and beta2 must lie in [0, 1)"));
        }
        Ok(Self {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        })
    }

    pub fn set_lr(&mut self, lr: f64) -> Result<()> {
        if !(lr > 0.0) {
            return Err(Error::invalid(format!(
                "learning rate must be positive, got {lr}"
            )));
        }
        self.config.lr = lr;
        Ok(())
    }

    pub fn first_moment(&self, index: usize) -> Option<&Tensor> {
        self.first.get(index).and_then(Option::as_ref)
    }

    pub fn second_moment(&self, index: usize) -> Option<&Tensor> {
        self.second.get(index).and_then(Option::as_ref)
    }

    /// One bias-corrected update of every trainable parameter holding a
    /// gradient. `lr_scale` gives a per-parameter learning-rate multiplier.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        lr_scale: impl Fn(&Parameter) -> f64,
    ) -> Result<()> {
        self.first.resize(store.len(), None);
        self.second.resize(store.len(), None);
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for id in store.ids().collect::<Vec<_>>() {
            let p = store.get_mut(id);
            if p.kind != ParamKind::Trainable {
                continue;
            }
            let Some(grad) = p.grad.as_ref() else {
                continue;
            };
            if grad.shape() != p.value.shape() {
                return Err(Error::shape("adam_step", p.value.shape(), grad.shape()));
            }
            let lr = c.lr * lr_scale(p);
            let i = id.index();
            let m = self.first[i].get_or_insert_with(|| Tensor::zeros(grad.shape()));
            let v = self.second[i].get_or_insert_with(|| Tensor::zeros(grad.shape()));
            if m.shape() != grad.shape() || v.shape() != grad.shape() {
                return Err(Error::shape("adam_step", m.shape(), grad.shape()));
            }
            let (theta, g) = (p.value.data_mut(), grad.data());
            for (((th, &gi), mi), vi) in theta.iter_mut().zip(g).zip(m.data_mut()).zip(v.data_mut())
            {
                let gi = gi + c.weight_decay * *th;
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *th -= lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        Ok(())
    }

    /// Moment tensors as named records, for checkpointing.
    pub fn export(&self, store: &ParamStore) -> Vec<(String, Tensor)> {
        let mut out = vec![("adam.step".to_string(), Tensor::scalar(self.step as f64))];
        for (id, p) in store.iter() {
            if let Some(m) = self.first_moment(id.index()) {
                out.push((format!("adam.m.{}", p.name), m.clone()));
            }
            if let Some(v) = self.second_moment(id.index()) {
                out.push((format!("adam.v.{}", p.name), v.clone()));
            }
        }
        out
    }

    /// Inverse of [`AdamState::export`].
    pub fn import(&mut self, store: &ParamStore, records: &[(String, Tensor)]) -> Result<()> {
        self.first = vec![None; store.len()];
        self.second = vec![None; store.len()];
        for (name, t) in records {
            if name == "adam.step" {
                self.step = t.data()[0] as u64;
            } else if let Some(rest) = name.strip_prefix("adam.m.") {
                let id = store
                    .id(rest)
                    .ok_or_else(|| Error::invalid(format!("unknown moment {name}")))?;
                self.first[id.index()] = Some(t.clone());
            } else if let Some(rest) = name.strip_prefix("adam.v.") {
                let id = store
                    .id(rest)
                    .ok_or_else(|| Error::invalid(format!("unknown moment {name}")))?;
                self.second[id.index()] = Some(t.clone());
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64, grad: f64) -> ParamStore {
        let mut s = ParamStore::new();
        let id = s.add_trainable("p", Tensor::scalar(value)).unwrap();
        s.get_mut(id).grad = Some(Tensor::scalar(grad));
        s
    }

    #[test]
    fn first_update_is_minus_lr() {
        let mut s = single(0.0, 1.0);
        let mut adam = AdamState::new(AdamConfig::with_lr(0.1)).unwrap();
        adam.step(&mut s, |_| 1.0).unwrap();
        let v = s.value(s.id("p").unwrap()).data()[0];
        assert!((v + 0.1).abs() < 1e-8, "{v}");
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn zero_gradient_leaves_params_and_decays_moments() {
        let mut s = single(2.0, 1.0);
        let mut adam = AdamState::new(AdamConfig::with_lr(0.1)).unwrap();
        adam.step(&mut s, |_| 1.0).unwrap();
        let before = s.value(s.id("p").unwrap()).data()[0];
        let m_before = adam.first_moment(0).unwrap().data()[0];
        s.get_mut(s.id("p").unwrap()).grad = Some(Tensor::scalar(0.0));
        adam.step(&mut s, |_| 1.0).unwrap();
        // the decayed first moment still moves the parameter; a fresh state with zero grads must not
        assert!(adam.first_moment(0).unwrap().data()[0] < m_before);

        let mut fresh = single(2.0, 0.0);
        let mut adam2 = AdamState::new(AdamConfig::with_lr(0.1)).unwrap();
        adam2.step(&mut fresh, |_| 1.0).unwrap();
        assert_eq!(fresh.value(fresh.id("p").unwrap()).data()[0], 2.0);
        assert!(before != 2.0);
    }

    #[test]
    fn rejects_bad_lr_and_shape() {
        assert!(AdamState::new(AdamConfig::with_lr(0.0)).is_err());
        let mut s = single(0.0, 1.0);
        s.get_mut(s.id("p").unwrap()).grad = Some(Tensor::zeros(&[2]));
        let mut adam = AdamState::new(AdamConfig::default()).unwrap();
        assert!(adam.step(&mut s, |_| 1.0).is_err());
    }

    #[test]
    fn identical_runs_are_bitwise_equal() {
        let run = || {
            let mut s = single(0.3, 0.0);
            let mut adam = AdamState::new(AdamConfig::with_lr(0.01)).unwrap();
            for k in 0..50 {
                let id = s.id("p").unwrap();
                let x = s.value(id).data()[0];
                s.get_mut(id).grad = Some(Tensor::scalar(2.0 * x + (k as f64).sin()));
                adam.step(&mut s, |_| 1.0).unwrap();
            }
            s.value(s.id("p").unwrap()).data()[0].to_bits()
        };
        assert_eq!(run(), run());
    }
}
