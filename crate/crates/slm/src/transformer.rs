//! Transformer building blocks over the tape.
//!
//! Blocks are pre-norm: `x + Attn(LN(x))`, optional `x + XAttn(LN(x), mem)`,
//! then `x + FF(LN(x))` with a GELU feed-forward of width 4x. Attention
//! projections carry no biases; the feed-forward does. A stack is `layers`
//! blocks followed by a final layer norm. Positional information is a
//! learned table added at stack entry by the caller (the adapter adds none,
//! its inputs inherit position from where they land in the LM prompt).
//!
//! All builders walk a `ParameterStore` through a `TapeBinding`, so a
//! parameter used twice binds one leaf and accumulates both gradient paths.

use crate::error::Result;
use crate::params::{ParameterStore, TapeBinding};
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::{Tape, TensorId};

pub const LN_EPS: f64 = 1e-5;
/// Additive pre-softmax penalty for masked positions. exp(-1e9) underflows
/// to exactly 0.0, so masked positions contribute nothing, bit-for-bit.
pub const MASK_PENALTY: f64 = -1e9;
pub const FF_MULT: usize = 4;

// ── registration ──

fn register_ln<S: Scalar>(store: &mut ParameterStore<S>, prefix: &str, width: usize) -> Result<()> {
    store.init_fill(&format!("{prefix}.gain"), 1, width, 1.0)?;
    store.init_fill(&format!("{prefix}.bias"), 1, width, 0.0)
}

fn register_attn<S: Scalar>(
    store: &mut ParameterStore<S>,
    rng: &mut SeededRng,
    prefix: &str,
    width: usize,
) -> Result<()> {
    for w in ["wq", "wk", "wv", "wo"] {
        store.init_matrix(&format!("{prefix}.{w}"), width, width, rng)?;
    }
    Ok(())
}

pub fn register_block<S: Scalar>(
    store: &mut ParameterStore<S>,
    rng: &mut SeededRng,
    prefix: &str,
    width: usize,
    cross: bool,
) -> Result<()> {
    register_ln(store, &format!("{prefix}.ln1"), width)?;
    register_attn(store, rng, &format!("{prefix}.attn"), width)?;
    if cross {
        register_ln(store, &format!("{prefix}.ln_x"), width)?;
        register_attn(store, rng, &format!("{prefix}.xattn"), width)?;
    }
    register_ln(store, &format!("{prefix}.ln2"), width)?;
    let ff = FF_MULT * width;
    store.init_matrix(&format!("{prefix}.ff.w1"), width, ff, rng)?;
    store.init_fill(&format!("{prefix}.ff.b1"), 1, ff, 0.0)?;
    store.init_matrix(&format!("{prefix}.ff.w2"), ff, width, rng)?;
    store.init_fill(&format!("{prefix}.ff.b2"), 1, width, 0.0)
}

/// Register `layers` blocks plus the final norm under `prefix`.
pub fn register_stack<S: Scalar>(
    store: &mut ParameterStore<S>,
    rng: &mut SeededRng,
    prefix: &str,
    width: usize,
    layers: usize,
    cross: bool,
) -> Result<()> {
    for i in 0..layers {
        register_block(store, rng, &format!("{prefix}.block{i}"), width, cross)?;
    }
    register_ln(store, &format!("{prefix}.ln_f"), width)
}

// ── forward ──

pub struct Ctx<'a, S: Scalar> {
    pub tape: &'a mut Tape<S>,
    pub binding: &'a mut TapeBinding,
    pub store: &'a ParameterStore<S>,
}

impl<'a, S: Scalar> Ctx<'a, S> {
    pub fn new(
        tape: &'a mut Tape<S>,
        binding: &'a mut TapeBinding,
        store: &'a ParameterStore<S>,
    ) -> Self {
        Ctx { tape, binding, store }
    }

    pub fn param(&mut self, name: &str) -> Result<TensorId> {
        self.binding.get(self.store, self.tape, name)
    }

    fn ln(&mut self, prefix: &str, x: TensorId) -> Result<TensorId> {
        let gain = self.param(&format!("{prefix}.gain"))?;
        let bias = self.param(&format!("{prefix}.bias"))?;
        self.tape.layer_norm(x, gain, bias, LN_EPS)
    }

    /// Multi-head attention: queries from `q_in`, keys and values from
    /// `kv_in`. `mask` is an optional additive pre-softmax tensor.
    fn attention(
        &mut self,
        prefix: &str,
        q_in: TensorId,
        kv_in: TensorId,
        heads: usize,
        mask: Option<TensorId>,
    ) -> Result<TensorId> {
        let wq = self.param(&format!("{prefix}.wq"))?;
        let wk = self.param(&format!("{prefix}.wk"))?;
        let wv = self.param(&format!("{prefix}.wv"))?;
        let wo = self.param(&format!("{prefix}.wo"))?;
        let q = self.tape.matmul(q_in, wq)?;
        let k = self.tape.matmul(kv_in, wk)?;
        let v = self.tape.matmul(kv_in, wv)?;
        let width = self.tape.dims(q).1;
        let dh = width / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut ctx_heads = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = self.tape.slice_cols(q, h * dh, dh)?;
            let kh = self.tape.slice_cols(k, h * dh, dh)?;
            let vh = self.tape.slice_cols(v, h * dh, dh)?;
            let kt = self.tape.transpose(kh)?;
            let scores = self.tape.matmul(qh, kt)?;
            let mut scaled = self.tape.scale(scores, scale)?;
            if let Some(m) = mask {
                scaled = self.tape.add(scaled, m)?;
            }
            let probs = self.tape.softmax_rows(scaled)?;
            ctx_heads.push(self.tape.matmul(probs, vh)?);
        }
        let ctx = self.tape.concat_cols(&ctx_heads)?;
        self.tape.matmul(ctx, wo)
    }

    /// One pre-norm block. `memory` adds a cross-attention sublayer whose
    /// keys and values come from the (already-normed) memory sequence.
    pub fn block(
        &mut self,
        prefix: &str,
        x: TensorId,
        heads: usize,
        memory: Option<TensorId>,
        mask: Option<TensorId>,
    ) -> Result<TensorId> {
        let h = self.ln(&format!("{prefix}.ln1"), x)?;
        let a = self.attention(&format!("{prefix}.attn"), h, h, heads, mask)?;
        let mut x = self.tape.add(x, a)?;
        if let Some(mem) = memory {
            let hx = self.ln(&format!("{prefix}.ln_x"), x)?;
            let ax = self.attention(&format!("{prefix}.xattn"), hx, mem, heads, None)?;
            x = self.tape.add(x, ax)?;
        }
        let h2 = self.ln(&format!("{prefix}.ln2"), x)?;
        let w1 = self.param(&format!("{prefix}.ff.w1"))?;
        let b1 = self.param(&format!("{prefix}.ff.b1"))?;
        let w2 = self.param(&format!("{prefix}.ff.w2"))?;
        let b2 = self.param(&format!("{prefix}.ff.b2"))?;
        let f = self.tape.matmul(h2, w1)?;
        let f = self.tape.add_row(f, b1)?;
        let f = self.tape.gelu(f)?;
        let f = self.tape.matmul(f, w2)?;
        let f = self.tape.add_row(f, b2)?;
        self.tape.add(x, f)
    }

    /// Blocks 0..layers then the final norm. `causal` masks self-attention
    /// to the past; `memory` threads cross-attention through every block.
    pub fn stack(
        &mut self,
        prefix: &str,
        mut x: TensorId,
        layers: usize,
        heads: usize,
        memory: Option<TensorId>,
        causal: bool,
    ) -> Result<TensorId> {
        let mask = if causal {
            let t = self.tape.dims(x).0;
            Some(causal_mask(self.tape, t)?)
        } else {
            None
        };
        for i in 0..layers {
            x = self.block(&format!("{prefix}.block{i}"), x, heads, memory, mask)?;
        }
        self.ln(&format!("{prefix}.ln_f"), x)
    }

    /// Add learned absolute positions: row i of `x` gets row i of the
    /// table. Inputs longer than the table are an index error.
    pub fn add_positions(&mut self, table_name: &str, x: TensorId) -> Result<TensorId> {
        let table = self.param(table_name)?;
        let t = self.tape.dims(x).0;
        let ids: Vec<usize> = (0..t).collect();
        let rows = self.tape.gather(table, &ids)?;
        self.tape.add(x, rows)
    }
}

/// t-by-t additive mask: 0 at or before the diagonal, the penalty beyond it.
pub fn causal_mask<S: Scalar>(tape: &mut Tape<S>, t: usize) -> Result<TensorId> {
    let mut data = vec![S::ZERO; t * t];
    for i in 0..t {
        for j in (i + 1)..t {
            data[i * t + j] = S::from_f64(MASK_PENALTY);
        }
    }
    tape.constant(t, t, data)
}
