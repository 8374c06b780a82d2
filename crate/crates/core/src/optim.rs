//! Adam.

use serde::{Deserialize, Serialize};

use crate::nn::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_eps() -> f64 {
    1e-8
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

/// First and second moment estimates, one pair per store entry.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<S> {
    pub config: AdamConfig,
    pub step: u64,
    pub first: Vec<Matrix<S>>,
    pub second: Vec<Matrix<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(config: AdamConfig, store: &ParamStore<S>) -> Self {
        let zeros = || -> Vec<Matrix<S>> {
            store
                .entries()
                .iter()
                .map(|e| Matrix::zeros(e.value.rows(), e.value.cols()))
                .collect()
        };
        Self {
            config,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    /// Applies one update. `grads[i]` pairs with store entry `i`; `None` or a
    /// frozen entry leaves the parameter and its moments untouched.
    pub fn update(&mut self, store: &mut ParamStore<S>, grads: &[Option<Matrix<S>>]) {
        self.step += 1;
        let c = self.config;
        let b1 = S::lit(c.beta1);
        let b2 = S::lit(c.beta2);
        let one = S::one();
        let bias1 = one - S::lit(c.beta1.powi(self.step as i32));
        let bias2 = one - S::lit(c.beta2.powi(self.step as i32));
        let lr = S::lit(c.lr);
        let eps = S::lit(c.eps);
        for id in store.ids().collect::<Vec<ParamId>>() {
            let i = id.index();
            if !store.entries()[i].trainable {
                continue;
            }
            let Some(g) = grads.get(i).and_then(Option::as_ref) else { continue };
            let m = self.first[i].as_mut_slice();
            let v = self.second[i].as_mut_slice();
            let w = store.get_mut(id).as_mut_slice();
            for k in 0..w.len() {
                let gk = g.as_slice()[k];
                m[k] = b1 * m[k] + (one - b1) * gk;
                v[k] = b2 * v[k] + (one - b2) * gk * gk;
                let m_hat = m[k] / bias1;
                let v_hat = v[k] / bias2;
                w[k] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}
