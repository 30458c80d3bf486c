use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Bias-corrected Adam with one moment pair per parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let (m, v) = params
            .into_iter()
            .map(|p| (vec![0.0; p.numel()], vec![0.0; p.numel()]))
            .unzip();
        AdamState { config, t: 0, m, v }
    }

    /// One update of every parameter from its `grad` buffer. Parameters
    /// without a gradient are treated as having a zero gradient.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Tensor>) -> Result<()> {
        self.t += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        let mut count = 0;
        for (i, p) in params.into_iter().enumerate() {
            count += 1;
            let (m, v) = match (self.m.get_mut(i), self.v.get_mut(i)) {
                (Some(m), Some(v)) if m.len() == p.numel() => (m, v),
                _ => {
                    return Err(Error::Contract(format!(
                        "adam state has no slot matching parameter {i} of shape {:?}",
                        p.shape()
                    )))
                }
            };
            let grad = p.grad.take();
            let data = p.data_mut();
            for j in 0..data.len() {
                let g = grad.as_ref().map_or(0.0, |g| g[j]);
                m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                data[j] -= lr * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        if count != self.m.len() {
            return Err(Error::Contract(format!(
                "adam state tracks {} parameters, step received {count}",
                self.m.len()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let before = p.clone();
        let mut st = AdamState::new(AdamConfig::default(), [&p]);
        for _ in 0..5 {
            p.grad = Some(vec![0.0; 3]);
            st.step([&mut p]).unwrap();
        }
        assert_eq!(p.data(), before.data());
        assert_eq!(st.t, 5);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = Tensor::new(&[1], vec![0.0]).unwrap();
        let mut st = AdamState::new(AdamConfig::default(), [&p]);
        p.grad = Some(vec![1.0]);
        st.step([&mut p]).unwrap();
        // m̂ = 1, v̂ = 1 → Δ = lr / (1 + 1e-8)
        let expected = -1e-3 / (1.0 + 1e-8);
        assert!((p.item() - expected).abs() < 1e-18);
        assert!((p.item() + 9.99999e-4).abs() < 1e-9);
    }

    fn reference_adam(p: &mut f64, m: &mut f64, v: &mut f64, t: i32, g: f64) {
        let (lr, b1, b2, eps) = (1e-3, 0.9, 0.999, 1e-8);
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let mh = *m / (1.0 - f64::powi(b1, t));
        let vh = *v / (1.0 - f64::powi(b2, t));
        *p -= lr * mh / (vh.sqrt() + eps);
    }

    #[test]
    fn matches_scalar_reference_bit_for_bit() {
        let init = [0.3, -0.7];
        let grads = [[0.25, -1.5], [0.25, -1.5]];
        let mut p = Tensor::new(&[2], init.to_vec()).unwrap();
        let mut st = AdamState::new(AdamConfig::default(), [&p]);
        let mut r = init;
        let mut rm = [0.0; 2];
        let mut rv = [0.0; 2];
        for (t, g) in grads.iter().enumerate() {
            p.grad = Some(g.to_vec());
            st.step([&mut p]).unwrap();
            for j in 0..2 {
                reference_adam(&mut r[j], &mut rm[j], &mut rv[j], t as i32 + 1, g[j]);
            }
        }
        assert_eq!(p.data()[0].to_bits(), r[0].to_bits());
        assert_eq!(p.data()[1].to_bits(), r[1].to_bits());
    }
}
