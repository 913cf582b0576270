//! Named trainable parameters, their gradients, and Adam state.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    grad: Option<Tensor>,
    m: Vec<f32>,
    v: Vec<f32>,
    trainable: bool,
    lr_scale: f32,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::State(format!("parameter {name} already registered")));
        }
        let n = value.len();
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value,
            grad: None,
            m: vec![0.0; n],
            v: vec![0.0; n],
            trainable: true,
            lr_scale: 1.0,
        });
        Ok(ParamId(id))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.value(id))
    }

    pub fn grad(&self, id: ParamId) -> Option<&Tensor> {
        self.params[id.0].grad.as_ref()
    }

    /// Number of Adam steps taken so far.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.grad = None);
    }

    pub fn set_grad(&mut self, id: ParamId, grad: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        grad.expect_shape(p.value.shape(), &format!("gradient of {}", p.name))?;
        p.grad = Some(grad);
        Ok(())
    }

    pub fn accumulate_grad(&mut self, id: ParamId, grad: &Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        match &mut p.grad {
            Some(g) => g.add_assign(grad),
            None => {
                grad.expect_shape(p.value.shape(), &format!("gradient of {}", p.name))?;
                p.grad = Some(grad.clone());
                Ok(())
            }
        }
    }

    /// Freeze or unfreeze every parameter whose name starts with `prefix`.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.trainable = trainable;
        }
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.params[id.0].trainable
    }

    /// Scale the learning rate of every parameter whose name starts with `prefix`.
    pub fn set_lr_scale(&mut self, prefix: &str, scale: f32) {
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.lr_scale = scale;
        }
    }

    /// One Adam update of every trainable parameter, then clears gradients.
    pub fn adam_step(&mut self, lr: f32) -> Result<()> {
        if let Some(p) = self.params.iter().find(|p| p.trainable && p.grad.is_none()) {
            return Err(Error::State(format!("missing gradient for {}", p.name)));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        for p in self.params.iter_mut().filter(|p| p.trainable) {
            let g = p.grad.take().expect("checked above");
            let step = (lr * p.lr_scale) as f64;
            for (((w, &g), m), v) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(p.m.iter_mut())
                .zip(p.v.iter_mut())
            {
                let g = g as f64;
                let m_new = ADAM_BETA1 * *m as f64 + (1.0 - ADAM_BETA1) * g;
                let v_new = ADAM_BETA2 * *v as f64 + (1.0 - ADAM_BETA2) * g * g;
                *m = m_new as f32;
                *v = v_new as f32;
                let m_hat = m_new / bc1;
                let v_hat = v_new / bc2;
                *w = (*w as f64 - step * m_hat / (v_hat.sqrt() + ADAM_EPS)) as f32;
            }
        }
        self.params.iter_mut().for_each(|p| p.grad = None);
        Ok(())
    }

    /// First and second Adam moments of one parameter.
    pub fn moments(&self, id: ParamId) -> (&[f32], &[f32]) {
        let p = &self.params[id.0];
        (&p.m, &p.v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(values: Vec<f32>) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let n = values.len();
        let id = s.add("w", Tensor::new(vec![n], values).unwrap()).unwrap();
        (s, id)
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let (mut s, id) = store_with(vec![1.0, -2.0, 3.0]);
        s.set_grad(id, Tensor::new(vec![3], vec![0.5, 0.5, 0.5]).unwrap()).unwrap();
        s.adam_step(0.1).unwrap();
        let before = s.value(id).clone();
        let m_before: Vec<f32> = s.moments(id).0.to_vec();
        s.set_grad(id, Tensor::zeros(&[3])).unwrap();
        s.adam_step(0.1).unwrap();
        // nonzero first moment still moves w; with m = 0 it must not.
        let (mut fresh, fid) = store_with(vec![1.0, -2.0, 3.0]);
        fresh.set_grad(fid, Tensor::zeros(&[3])).unwrap();
        fresh.adam_step(0.1).unwrap();
        assert_eq!(fresh.value(fid).data(), &[1.0, -2.0, 3.0]);
        let m_after = s.moments(id).0;
        for (a, b) in m_after.iter().zip(&m_before) {
            assert!(a.abs() < b.abs());
        }
        assert_ne!(s.value(id), &before);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let g = [0.3f32, -2.0, 1e-3, 50.0];
        let (mut s, id) = store_with(vec![0.0; 4]);
        s.set_grad(id, Tensor::new(vec![4], g.to_vec()).unwrap()).unwrap();
        s.adam_step(0.1).unwrap();
        for (w, g) in s.value(id).data().iter().zip(g) {
            let g = g as f64;
            let expected = -0.1 * g / (g.abs() + ADAM_EPS);
            assert!((*w as f64 - expected).abs() < 1e-6, "{w} vs {expected}");
        }
    }

    #[test]
    fn two_steps_match_f64_reference() {
        // independent 64-bit Adam with constant gradient
        let (w0, g, lr) = (0.75f64, 0.4f64, 0.01f64);
        let (mut w, mut m, mut v) = (w0, 0.0f64, 0.0f64);
        for t in 1..=2 {
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            w -= lr * mh / (vh.sqrt() + 1e-8);
        }
        let (mut s, id) = store_with(vec![w0 as f32]);
        for _ in 0..2 {
            s.set_grad(id, Tensor::new(vec![1], vec![g as f32]).unwrap()).unwrap();
            s.adam_step(lr as f32).unwrap();
        }
        assert!((s.value(id).data()[0] as f64 - w).abs() < 1e-7);
        assert_eq!(s.step_count(), 2);
    }

    #[test]
    fn missing_gradient_is_a_state_error() {
        let (mut s, _) = store_with(vec![1.0]);
        assert!(matches!(s.adam_step(0.1), Err(Error::State(_))));
        assert_eq!(s.step_count(), 0);
    }

    #[test]
    fn frozen_parameters_do_not_move() {
        let (mut s, id) = store_with(vec![1.0]);
        s.set_trainable("w", false);
        s.adam_step(0.1).unwrap();
        assert_eq!(s.value(id).data(), &[1.0]);
    }

    #[test]
    fn duplicate_names_rejected() {
        let (mut s, _) = store_with(vec![1.0]);
        assert!(s.add("w", Tensor::zeros(&[1])).is_err());
    }
}
