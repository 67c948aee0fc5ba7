//! Adam with inspectable moment state, so it can be checkpointed and resumed.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::nn::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamParams {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates per parameter name.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

#[derive(Debug)]
pub struct Adam {
    stores: Vec<ParamStore>,
    pub params: AdamParams,
    state: AdamState,
}

impl Adam {
    /// Optimizes every variable of the given stores. Names must not collide across stores.
    pub fn new(stores: Vec<ParamStore>, params: AdamParams) -> Result<Self> {
        if !(params.lr > 0.0) {
            return Err(Error::invalid("learning_rate", "must be positive"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for s in &stores {
            for (name, _) in s.named_vars() {
                if !seen.insert(name.clone()) {
                    return Err(Error::Dimension(format!("parameter `{name}` appears in two stores")));
                }
            }
        }
        Ok(Self {
            stores,
            params,
            state: AdamState::default(),
        })
    }

    pub fn state(&self) -> &AdamState {
        &self.state
    }

    pub fn set_state(&mut self, state: AdamState) {
        self.state = state;
    }

    /// One update from `grads`. Variables without a gradient are left untouched.
    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.state.step += 1;
        let t = self.state.step as i32;
        let p = self.params;
        let bc1 = 1.0 - p.beta1.powi(t);
        let bc2 = 1.0 - p.beta2.powi(t);
        for store in &self.stores {
            for (name, var) in store.named_vars() {
                let Some(g) = grads.get(var.as_tensor()) else {
                    continue;
                };
                // Gradients carry their own op graph; keep moments free of it.
                let g = &g.detach();
                let m_prev = match self.state.m.get(&name) {
                    Some(m) => m.clone(),
                    None => g.zeros_like()?,
                };
                let v_prev = match self.state.v.get(&name) {
                    Some(v) => v.clone(),
                    None => g.zeros_like()?,
                };
                let m = ((m_prev * p.beta1)? + (g * (1.0 - p.beta1))?)?.detach();
                let v = ((v_prev * p.beta2)? + (g.sqr()? * (1.0 - p.beta2))?)?.detach();
                let m_hat = (&m / bc1)?;
                let v_hat = (&v / bc2)?;
                let update = (m_hat / (v_hat.sqrt()? + p.eps)?)?;
                var.set(&(var.as_tensor().detach() - (update * p.lr)?)?)?;
                self.state.m.insert(name.clone(), m);
                self.state.v.insert(name, v);
            }
        }
        Ok(())
    }

    /// Backpropagates `loss` and applies one step.
    pub fn backward_step(&mut self, loss: &Tensor) -> Result<()> {
        let grads = loss.backward()?;
        self.step(&grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Init;
    use candle_core::{DType, Device};

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let store = ParamStore::new(0, DType::F64, &Device::Cpu);
        let w = store.root().get(3, "w", Init::Const(1.0)).unwrap();
        let mut opt = Adam::new(vec![store.clone()], AdamParams::with_lr(0.1)).unwrap();
        let target = Tensor::new(&[0.0f64, 2.0, 1.0], &Device::Cpu).unwrap();
        let loss = (&w - &target).unwrap().sqr().unwrap().sum_all().unwrap();
        opt.backward_step(&loss).unwrap();
        let after: Vec<f64> = store.get("w").unwrap().as_tensor().to_vec1().unwrap();
        assert!((after[0] - 0.9).abs() < 1e-6);
        assert!((after[1] - 1.1).abs() < 1e-6);
        // Zero gradient: m = v = 0, no movement.
        assert!((after[2] - 1.0).abs() < 1e-6);
        assert_eq!(opt.state().step, 1);
    }

    #[test]
    fn converges_on_quadratic() {
        let store = ParamStore::new(0, DType::F64, &Device::Cpu);
        store.root().get(4, "w", Init::Normal(1.0)).unwrap();
        let mut opt = Adam::new(vec![store.clone()], AdamParams::with_lr(0.05)).unwrap();
        for _ in 0..500 {
            let w = store.get("w").unwrap();
            let loss = (w.as_tensor() - 3.0).unwrap().sqr().unwrap().sum_all().unwrap();
            opt.backward_step(&loss).unwrap();
        }
        for x in store.get("w").unwrap().as_tensor().to_vec1::<f64>().unwrap() {
            assert!((x - 3.0).abs() < 1e-2);
        }
    }

    #[test]
    fn untouched_store_keeps_values() {
        let a = ParamStore::new(0, DType::F64, &Device::Cpu);
        let b = ParamStore::new(1, DType::F64, &Device::Cpu);
        let wa = a.root().get(2, "a", Init::Const(1.0)).unwrap();
        let wb = b.root().get(2, "b", Init::Const(1.0)).unwrap();
        let mut opt = Adam::new(vec![a.clone()], AdamParams::with_lr(0.1)).unwrap();
        let loss = (wa.sum_all().unwrap() + wb.sum_all().unwrap()).unwrap();
        opt.backward_step(&loss).unwrap();
        assert_eq!(b.get("b").unwrap().as_tensor().to_vec1::<f64>().unwrap(), vec![1.0, 1.0]);
        assert!(Adam::new(vec![a.clone(), a], AdamParams::with_lr(0.1)).is_err());
    }
}
