//! Adam with bias correction, fixed hyperparameters apart from the
//! learning rate. First/second-moment state is keyed by parameter name so
//! it survives checkpointing and trainability-mask changes.

use crate::error::{Result, SlmError};
use crate::params::ParameterStore;
use crate::scalar::Scalar;
use std::collections::HashMap;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

pub struct Adam<S: Scalar> {
    pub lr: f64,
    /// Completed update count; bias correction uses `step + 1` within a
    /// call, so a restored optimizer continues the same trajectory.
    pub step: usize,
    m: HashMap<String, Vec<S>>,
    v: HashMap<String, Vec<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            step: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    /// One update over every trainable tensor. Frozen tensors are never
    /// touched; a trainable tensor without an accumulated gradient is an
    /// error (the step would silently drop it otherwise).
    pub fn step(&mut self, store: &mut ParameterStore<S>) -> Result<()> {
        let t = self.step + 1;
        let bc1 = S::from_f64(1.0 - BETA1.powi(t as i32));
        let bc2 = S::from_f64(1.0 - BETA2.powi(t as i32));
        let b1 = S::from_f64(BETA1);
        let b2 = S::from_f64(BETA2);
        let one_m_b1 = S::from_f64(1.0 - BETA1);
        let one_m_b2 = S::from_f64(1.0 - BETA2);
        let lr = S::from_f64(self.lr);
        let eps = S::from_f64(EPS);

        for p in store.iter_mut() {
            if !p.trainable {
                continue;
            }
            let grad = p.grad.as_ref().ok_or_else(|| {
                SlmError::Train(format!("missing gradient for trainable tensor {:?}", p.name))
            })?;
            let m = self
                .m
                .entry(p.name.clone())
                .or_insert_with(|| vec![S::ZERO; p.data.len()]);
            let v = self
                .v
                .entry(p.name.clone())
                .or_insert_with(|| vec![S::ZERO; p.data.len()]);
            for i in 0..p.data.len() {
                let g = grad[i];
                m[i] = b1 * m[i] + one_m_b1 * g;
                v[i] = b2 * v[i] + one_m_b2 * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p.data[i] = p.data[i] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        self.step = t;
        Ok(())
    }

    /// Moment vectors sorted by name; the serialization order.
    pub fn entries(&self) -> Vec<(&str, &[S], &[S])> {
        let mut names: Vec<&String> = self.m.keys().collect();
        names.sort();
        names
            .into_iter()
            .map(|n| (n.as_str(), self.m[n].as_slice(), self.v[n].as_slice()))
            .collect()
    }

    pub fn restore_entry(&mut self, name: &str, m: Vec<S>, v: Vec<S>) {
        self.m.insert(name.to_string(), m);
        self.v.insert(name.to_string(), v);
    }
}
