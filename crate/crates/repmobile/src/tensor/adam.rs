//! Adam optimizer with decoupled weight decay, keyed by parameter name.

use std::collections::HashMap;

use super::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

struct Slot<T> {
    m: Tensor<T>,
    v: Tensor<T>,
}

/// State is per parameter name; `step` counts global update rounds so that
/// bias correction is shared across all parameters of a round.
pub struct Adam<T: Element> {
    cfg: AdamConfig,
    slots: HashMap<String, Slot<T>>,
    step: u64,
}

impl<T: Element> Adam<T> {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            slots: HashMap::new(),
            step: 0,
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    /// Begin an update round; call once per optimizer step before
    /// [`Adam::update`] on each parameter.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    pub fn update(&mut self, name: &str, param: &mut Tensor<T>, grad: &Tensor<T>, lr: f64) {
        debug_assert_eq!(param.shape(), grad.shape());
        debug_assert!(self.step > 0, "begin_step before update");
        let slot = self.slots.entry(name.to_string()).or_insert_with(|| Slot {
            m: Tensor::zeros(param.shape()),
            v: Tensor::zeros(param.shape()),
        });
        let b1 = T::from_f64_(self.cfg.beta1);
        let b2 = T::from_f64_(self.cfg.beta2);
        let one = T::one();
        let eps = T::from_f64_(self.cfg.eps);
        let lr_t = T::from_f64_(lr);
        let wd = T::from_f64_(self.cfg.weight_decay);
        let bc1 = T::from_f64_(1.0 - self.cfg.beta1.powi(self.step as i32));
        let bc2 = T::from_f64_(1.0 - self.cfg.beta2.powi(self.step as i32));

        for ((p, g), (m, v)) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(slot.m.data_mut().iter_mut().zip(slot.v.data_mut()))
        {
            *m = b1 * *m + (one - b1) * *g;
            *v = b2 * *v + (one - b2) * *g * *g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            // decoupled weight decay: applied even when the gradient is zero
            *p = *p - lr_t * (m_hat / (v_hat.sqrt() + eps) + wd * *p);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_only_applies_weight_decay() {
        let mut adam = Adam::<f64>::new(AdamConfig {
            weight_decay: 0.1,
            ..AdamConfig::default()
        });
        let mut p = Tensor::from_vec(&[2], vec![1.0, -2.0]).unwrap();
        let g = Tensor::zeros(&[2]);
        adam.begin_step();
        adam.update("w", &mut p, &g, 0.01);
        assert!((p.data()[0] - (1.0 - 0.01 * 0.1)).abs() < 1e-12);
        assert!((p.data()[1] - (-2.0 + 0.01 * 0.1 * 2.0)).abs() < 1e-12);

        // and with no weight decay, parameters stay put
        let mut adam0 = Adam::<f64>::new(AdamConfig::default());
        let mut p0 = Tensor::from_vec(&[1], vec![3.0]).unwrap();
        adam0.begin_step();
        adam0.update("w", &mut p0, &Tensor::zeros(&[1]), 0.01);
        assert_eq!(p0.data()[0], 3.0);
    }

    #[test]
    fn first_step_matches_hand_recurrence() {
        // g=1, lr=0.01: m_hat=1, v_hat=1 => delta = lr/(1+eps)
        let mut adam = Adam::<f64>::new(AdamConfig::default());
        let mut p = Tensor::from_vec(&[1], vec![0.5]).unwrap();
        let g = Tensor::from_vec(&[1], vec![1.0]).unwrap();
        adam.begin_step();
        adam.update("w", &mut p, &g, 0.01);
        let expect = 0.5 - 0.01 * (1.0 / (1.0 + 1e-8));
        assert!((p.data()[0] - expect).abs() < 1e-15);
        assert!((0.5 - p.data()[0] - 0.01).abs() < 1e-9);
    }

    #[test]
    fn updates_are_deterministic() {
        let run = || {
            let mut adam = Adam::<f32>::new(AdamConfig::default());
            let mut p = Tensor::from_vec(&[3], vec![0.1f32, -0.2, 0.3]).unwrap();
            for s in 0..10 {
                let g = Tensor::from_vec(&[3], vec![0.5 - s as f32 * 0.05, 0.1, -0.3]).unwrap();
                adam.begin_step();
                adam.update("w", &mut p, &g, 0.01);
            }
            p
        };
        assert_eq!(run(), run());
    }
}
