//! Named parameter tensors with trainability flags.
//!
//! The frozen/trainable split is data on the store, not structure in the
//! model code: a training mask flips flags by name prefix, and everything
//! downstream (leaf recording, gradient accumulation, optimizer updates)
//! consults the flag.

use crate::error::{Result, SlmError};
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::{Tape, TensorId};
use std::collections::HashMap;

/// Weight init: truncated normal, std 0.02, clipped at 2 std. Sampled in
/// f64 and cast so f32 and f64 runs draw the same underlying stream.
pub const INIT_STD: f64 = 0.02;
pub const INIT_BOUND_STDS: f64 = 2.0;

#[derive(Clone)]
pub struct Param<S: Scalar> {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<S>,
    pub trainable: bool,
    /// Accumulated gradient for the current step; `None` until the first
    /// backward pass touches it.
    pub grad: Option<Vec<S>>,
}

#[derive(Clone)]
pub struct ParameterStore<S: Scalar> {
    params: Vec<Param<S>>,
    index: HashMap<String, usize>,
}

impl<S: Scalar> ParameterStore<S> {
    pub fn new() -> Self {
        ParameterStore {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        data: Vec<S>,
        trainable: bool,
    ) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(SlmError::Train(format!("duplicate parameter {name:?}")));
        }
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(SlmError::Shape(format!(
                "parameter {name:?}: {} values for {rows}x{cols}",
                data.len()
            )));
        }
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            rows,
            cols,
            data,
            trainable,
            grad: None,
        });
        Ok(())
    }

    /// Weight matrix with truncated-normal init.
    pub fn init_matrix(&mut self, name: &str, rows: usize, cols: usize, rng: &mut SeededRng) -> Result<()> {
        let data = (0..rows * cols)
            .map(|_| S::from_f64(rng.truncated_normal(INIT_STD, INIT_BOUND_STDS)))
            .collect();
        self.add(name, rows, cols, data, true)
    }

    /// Constant-filled parameter (biases start 0, norm gains start 1).
    pub fn init_fill(&mut self, name: &str, rows: usize, cols: usize, value: f64) -> Result<()> {
        self.add(name, rows, cols, vec![S::from_f64(value); rows * cols], true)
    }

    pub fn get(&self, name: &str) -> Option<&Param<S>> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<S>> {
        let i = *self.index.get(name)?;
        Some(&mut self.params[i])
    }

    /// Parameters in insertion order; the canonical serialization order.
    pub fn iter(&self) -> impl Iterator<Item = &Param<S>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<S>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count, optionally restricted to trainable tensors.
    pub fn num_scalars(&self, trainable_only: bool) -> usize {
        self.params
            .iter()
            .filter(|p| !trainable_only || p.trainable)
            .map(|p| p.data.len())
            .sum()
    }

    pub fn freeze_all(&mut self) {
        for p in &mut self.params {
            p.trainable = false;
        }
    }

    /// Trainable = name starts with any of `prefixes`; everything else
    /// frozen. An empty-string prefix matches every tensor.
    pub fn set_trainable_by_prefixes(&mut self, prefixes: &[&str]) {
        for p in &mut self.params {
            p.trainable = prefixes.iter().any(|pre| p.name.starts_with(pre));
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Fold gradients recorded on a tape back into the store.
    pub fn accumulate_grads(&mut self, binding: &TapeBinding, tape: &Tape<S>) {
        for &(idx, id) in &binding.bound {
            let p = &mut self.params[idx];
            if !p.trainable {
                continue;
            }
            if let Some(g) = tape.grad(id) {
                let buf = p.grad.get_or_insert_with(|| vec![S::ZERO; p.data.len()]);
                for (b, &gv) in buf.iter_mut().zip(g) {
                    *b += gv;
                }
            }
        }
    }
}

impl<S: Scalar> Default for ParameterStore<S> {
    fn default() -> Self {
        ParameterStore::new()
    }
}

/// Per-tape record of which parameters became which leaves, so gradients
/// can be folded back after `backward`. One binding per tape.
pub struct TapeBinding {
    ids: HashMap<usize, TensorId>,
    bound: Vec<(usize, TensorId)>,
}

impl TapeBinding {
    pub fn new() -> Self {
        TapeBinding {
            ids: HashMap::new(),
            bound: Vec::new(),
        }
    }

    /// Leaf id for `name`, recording it on first use. The leaf's
    /// `requires_grad` mirrors the trainability flag, so frozen tensors
    /// never grow gradient buffers.
    pub fn get<S: Scalar>(
        &mut self,
        store: &ParameterStore<S>,
        tape: &mut Tape<S>,
        name: &str,
    ) -> Result<TensorId> {
        let idx = *store
            .index
            .get(name)
            .ok_or_else(|| SlmError::Train(format!("unknown parameter {name:?}")))?;
        if let Some(&id) = self.ids.get(&idx) {
            return Ok(id);
        }
        let p = &store.params[idx];
        let id = tape.leaf(p.rows, p.cols, p.data.clone(), p.trainable)?;
        self.ids.insert(idx, id);
        self.bound.push((idx, id));
        Ok(id)
    }
}

impl Default for TapeBinding {
    fn default() -> Self {
        TapeBinding::new()
    }
}
