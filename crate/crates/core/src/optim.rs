//! AdamW: Adam moments with bias correction and weight decay applied
//! directly to the parameters rather than folded into the gradient.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::Gradients;
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

#[derive(Clone, Debug, Default)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct AdamW {
    cfg: AdamWConfig,
    step: u64,
    state: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW { cfg, step: 0, state: BTreeMap::new() }
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.cfg
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Apply one update to every parameter that has a gradient. Nothing is
    /// modified if any gradient is non-finite or names a frozen parameter.
    pub fn step(&mut self, params: &mut ModelParams, grads: &Gradients) -> Result<()> {
        let mut items = Vec::with_capacity(grads.len());
        for (name, g) in grads.iter() {
            let entry = params.get(name).ok_or_else(|| Error::ArchMismatch(format!("no parameter {name}")))?;
            if !entry.trainable {
                return Err(Error::ArchMismatch(format!("{name} is frozen")));
            }
            items.push((name.as_str(), entry.tensor.clone(), g));
        }
        let mut refs: Vec<(&str, &mut Tensor, &Tensor)> = items.iter_mut().map(|(n, t, g)| (*n, t, *g)).collect();
        self.step_tensors(&mut refs)?;
        for (name, t, _) in items {
            params.set_tensor(name, t)?;
        }
        Ok(())
    }

    /// One AdamW step over explicit `(name, parameter, gradient)` triples.
    pub fn step_tensors(&mut self, items: &mut [(&str, &mut Tensor, &Tensor)]) -> Result<()> {
        for (name, p, g) in items.iter() {
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient((*name).to_owned()));
            }
            if p.shape() != g.shape() {
                return Err(Error::ShapeMismatch(format!("gradient for {name} has shape {:?}", g.shape())));
            }
        }
        self.step += 1;
        let AdamWConfig { lr, beta1, beta2, eps, weight_decay } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (name, p, g) in items.iter_mut() {
            let st = self.state.entry((*name).to_owned()).or_insert_with(|| Moments {
                m: vec![0.0; g.len()],
                v: vec![0.0; g.len()],
            });
            for (i, (p, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gv = gv as f64;
                let mut w = *p as f64;
                w *= 1.0 - lr * weight_decay;
                st.m[i] = beta1 * st.m[i] + (1.0 - beta1) * gv;
                st.v[i] = beta2 * st.v[i] + (1.0 - beta2) * gv * gv;
                let m_hat = st.m[i] / bc1;
                let v_hat = st.v[i] / bc2;
                w -= lr * m_hat / (v_hat.sqrt() + eps);
                *p = w as f32;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(opt: &mut AdamW, p: &mut Tensor, g: &Tensor) {
        opt.step_tensors(&mut [("w", p, g)]).unwrap();
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..Default::default() });
        let orig = Tensor::from_vec(vec![0.3, -1.7, 12.0]);
        let mut p = orig.clone();
        for _ in 0..5 {
            run(&mut opt, &mut p, &Tensor::zeros([3]));
        }
        assert_eq!(p, orig);
    }

    #[test]
    fn constant_gradient_steps_approach_lr() {
        let lr = 1e-3;
        let mut opt = AdamW::new(AdamWConfig { lr, weight_decay: 0.0, ..Default::default() });
        let mut p = Tensor::from_vec(vec![0.0, 0.0]);
        let g = Tensor::from_vec(vec![0.5, -3.0]);
        let mut last = p.clone();
        for _ in 0..2000 {
            last = p.clone();
            run(&mut opt, &mut p, &g);
        }
        let delta = p.sub(&last).unwrap();
        assert!((delta.data()[0] as f64 + lr).abs() < 2e-5 * lr.max(1.0));
        assert!((delta.data()[1] as f64 - lr).abs() < 2e-5 * lr.max(1.0));
    }

    #[test]
    fn first_step_matches_closed_form() {
        let cfg = AdamWConfig { lr: 0.01, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.1 };
        let mut opt = AdamW::new(cfg);
        let (w0, g0) = (0.8f32, -0.25f32);
        let mut p = Tensor::from_vec(vec![w0]);
        run(&mut opt, &mut p, &Tensor::from_vec(vec![g0]));
        // one step: m̂ = g, v̂ = g², so the Adam part is g / (|g| + eps)
        let (w, g) = (w0 as f64, g0 as f64);
        let expect = w * (1.0 - cfg.lr * cfg.weight_decay) - cfg.lr * g / (g.abs() + cfg.eps);
        assert!((p.data()[0] as f64 - expect).abs() < 1e-6);
    }

    #[test]
    fn rejects_non_finite_gradient_before_touching_params() {
        let mut opt = AdamW::new(AdamWConfig::default());
        let mut a = Tensor::from_vec(vec![1.0]);
        let mut b = Tensor::from_vec(vec![2.0]);
        let ga = Tensor::from_vec(vec![0.1]);
        let gb = Tensor::from_vec(vec![f32::NAN]);
        let err = opt.step_tensors(&mut [("a", &mut a, &ga), ("b", &mut b, &gb)]).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient(n) if n == "b"));
        assert_eq!(a.data(), &[1.0]);
        assert_eq!(opt.steps_taken(), 0);
    }
}
