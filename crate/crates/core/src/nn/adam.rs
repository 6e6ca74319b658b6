use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
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

/// Adam moments for a fixed list of parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<E: Element = f32> {
    pub config: AdamConfig,
    m: Vec<Vec<E>>,
    v: Vec<Vec<E>>,
    t: u64,
}

impl<E: Element> AdamState<E> {
    pub fn new(config: AdamConfig, params: &[Tensor<E>]) -> Self {
        Self {
            config,
            m: params.iter().map(|p| vec![E::zero(); p.len()]).collect(),
            v: params.iter().map(|p| vec![E::zero(); p.len()]).collect(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self, i: usize) -> &[E] {
        &self.m[i]
    }

    pub fn second_moment(&self, i: usize) -> &[E] {
        &self.v[i]
    }

    /// One bias-corrected Adam update using each parameter's gradient.
    pub fn step(&mut self, params: &mut [Tensor<E>]) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} parameters, got {}",
                self.m.len(),
                params.len()
            )));
        }
        for (i, p) in params.iter().enumerate() {
            if p.grad().is_none() {
                return Err(Error::Contract(format!("parameter {i} has no gradient")));
            }
            if p.len() != self.m[i].len() {
                return Err(Error::Contract(format!("parameter {i} changed size")));
            }
        }
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let grad = p.grad().expect("checked").to_vec();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, theta) in p.data_mut().iter_mut().enumerate() {
                let g = grad[j].as_f64();
                let mj = beta1 * m[j].as_f64() + (1.0 - beta1) * g;
                let vj = beta2 * v[j].as_f64() + (1.0 - beta2) * g * g;
                m[j] = E::lit(mj);
                v[j] = E::lit(vj);
                let m_hat = mj / bc1;
                let v_hat = vj / bc2;
                *theta = E::lit(theta.as_f64() - lr * m_hat / (v_hat.sqrt() + eps));
            }
        }
        Ok(())
    }
}
