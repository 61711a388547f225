//! The adapter sandwich: frozen speech encoder, trainable adapter, frozen
//! text LM, glued by frame subsampling and prompt concatenation.
//!
//! The whole model lives in one `ParameterStore`; the three components keep
//! their registration prefixes, and training masks pick tensors by prefix.
//! The adapter adds no positional signal of its own: its output rows get
//! positions from where they land in the concatenated LM prompt.

use crate::backbones::{lm_decode, lm_embed, lm_encode_embedded, lm_seq2seq_loss, speech_encode};
use crate::config::{Config, SubsampleMode};
use crate::error::{Result, SlmError};
use crate::params::{ParameterStore, TapeBinding};
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::speechify::FeatureSequence;
use crate::tensor::{Tape, TensorId};
use crate::transformer::{register_stack, Ctx};
use crate::vocab;

// ── subsampling ──

/// Indices kept by an U -> ceil(U/r) reduction, strictly increasing.
/// Strided keeps 0, r, 2r, ...; random draws a sorted sample of the same
/// size. The rng is consumed only in random mode.
pub fn subsample_indices(
    u: usize,
    rate: usize,
    mode: SubsampleMode,
    rng: &mut SeededRng,
) -> Result<Vec<usize>> {
    if u == 0 {
        return Err(SlmError::Empty("cannot subsample an empty sequence".into()));
    }
    if rate == 0 {
        return Err(SlmError::Config("subsample rate must be positive".into()));
    }
    let keep = u.div_ceil(rate);
    Ok(match mode {
        SubsampleMode::Strided => (0..u).step_by(rate).collect(),
        SubsampleMode::Random => rng.sample_indices_sorted(u, keep),
    })
}

// ── adapter ──

pub fn register_adapter<S: Scalar>(
    store: &mut ParameterStore<S>,
    rng: &mut SeededRng,
    cfg: &Config,
) -> Result<()> {
    store.init_matrix("adapter.input_proj", cfg.speech_width, cfg.lm_width, rng)?;
    store.init_fill("adapter.input_bias", 1, cfg.lm_width, 0.0)?;
    register_stack(store, rng, "adapter", cfg.lm_width, cfg.adapter_layers, false)
}

/// EmbeddingSequence[U' x D] -> EmbeddingSequence[U' x E].
pub fn adapter_forward<S: Scalar>(
    ctx: &mut Ctx<'_, S>,
    cfg: &Config,
    x: TensorId,
) -> Result<TensorId> {
    let proj = ctx.param("adapter.input_proj")?;
    let bias = ctx.param("adapter.input_bias")?;
    let x = ctx.tape.matmul(x, proj)?;
    let x = ctx.tape.add_row(x, bias)?;
    ctx.stack("adapter", x, cfg.adapter_layers, cfg.adapter_heads, None, false)
}

// ── the assembled model ──

pub struct Sandwich<S: Scalar> {
    pub cfg: Config,
    pub store: ParameterStore<S>,
}

impl<S: Scalar> Sandwich<S> {
    /// Merge a frozen speech encoder and frozen LM with a fresh trainable
    /// adapter. Backbone stores must arrive already frozen.
    pub fn assemble(
        cfg: &Config,
        speech: &ParameterStore<S>,
        lm: &ParameterStore<S>,
    ) -> Result<Sandwich<S>> {
        let mut store = ParameterStore::new();
        for p in speech.iter().chain(lm.iter()) {
            store.add(&p.name, p.rows, p.cols, p.data.clone(), p.trainable)?;
        }
        let mut rng = SeededRng::derived(cfg.seed, "adapter_init", 0);
        register_adapter(&mut store, &mut rng, cfg)?;
        Ok(Sandwich { cfg: cfg.clone(), store })
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.store
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.name.clone())
            .collect()
    }

    /// Destroy the adapter's learned function while keeping its value
    /// distribution: every adapter tensor's entries are permuted in place.
    /// Used as the control model for zero-shot probes.
    pub fn shuffle_adapter(&mut self, seed: u64) {
        let mut rng = SeededRng::derived(seed, "shuffle_adapter", 0);
        for p in self.store.iter_mut() {
            if p.name.starts_with("adapter.") {
                rng.shuffle(&mut p.data);
            }
        }
    }

    /// Speech-encoder output for `frames`, detached: values only, no tape.
    pub fn encode_speech(&self, frames: &FeatureSequence) -> Result<(Vec<S>, usize)> {
        let mut tape = Tape::new();
        let mut binding = TapeBinding::new();
        let mut ctx = Ctx::new(&mut tape, &mut binding, &self.store);
        let enc = speech_encode(&mut ctx, &self.cfg, frames)?;
        let rows = tape.dims(enc).0;
        Ok((tape.value(enc).to_vec(), rows))
    }

    /// Teacher-forced loss from raw frames. Gradient reaches every tensor
    /// the current mask leaves trainable, including the speech encoder.
    pub fn loss_from_frames(
        &self,
        tape: &mut Tape<S>,
        binding: &mut TapeBinding,
        instruction: &[u32],
        frames: &FeatureSequence,
        target: &[u32],
        mode: SubsampleMode,
        rng: &mut SeededRng,
    ) -> Result<TensorId> {
        let mut ctx = Ctx::new(tape, binding, &self.store);
        let enc = speech_encode(&mut ctx, &self.cfg, frames)?;
        let u = ctx.tape.dims(enc).0;
        let idx = subsample_indices(u, self.cfg.subsample_rate, mode, rng)?;
        self.loss_from_enc_id(ctx, enc, &idx, instruction, target)
    }

    /// Same loss, starting from a cached encoder output. Valid only while
    /// the speech encoder is frozen: the cache is a constant, so nothing
    /// can flow into `speech_encoder.*`.
    pub fn loss_from_cached_enc(
        &self,
        tape: &mut Tape<S>,
        binding: &mut TapeBinding,
        enc_vals: &[S],
        enc_rows: usize,
        instruction: &[u32],
        target: &[u32],
        mode: SubsampleMode,
        rng: &mut SeededRng,
    ) -> Result<TensorId> {
        let enc = tape.constant(enc_rows, self.cfg.speech_width, enc_vals.to_vec())?;
        let idx = subsample_indices(enc_rows, self.cfg.subsample_rate, mode, rng)?;
        let ctx = Ctx::new(tape, binding, &self.store);
        self.loss_from_enc_id(ctx, enc, &idx, instruction, target)
    }

    fn loss_from_enc_id(
        &self,
        mut ctx: Ctx<'_, S>,
        enc: TensorId,
        idx: &[usize],
        instruction: &[u32],
        target: &[u32],
    ) -> Result<TensorId> {
        let sub = ctx.tape.gather(enc, idx)?;
        let adapted = adapter_forward(&mut ctx, &self.cfg, sub)?;
        let prompt = if instruction.is_empty() {
            adapted
        } else {
            let text = lm_embed(&mut ctx, instruction)?;
            ctx.tape.concat_rows(text, adapted)?
        };
        let mem = lm_encode_embedded(&mut ctx, &self.cfg, prompt)?;
        lm_seq2seq_loss(&mut ctx, &self.cfg, mem, target)
    }

    /// Greedy decode with strided subsampling; stops at EOS, caps at
    /// `max_len` tokens.
    pub fn generate(
        &self,
        instruction: &[u32],
        frames: &FeatureSequence,
        max_len: usize,
    ) -> Result<Vec<u32>> {
        if max_len == 0 {
            return Err(SlmError::Empty("generation needs max_len >= 1".into()));
        }
        let (mem_vals, mem_rows) = {
            let mut tape = Tape::new();
            let mut binding = TapeBinding::new();
            let mut ctx = Ctx::new(&mut tape, &mut binding, &self.store);
            let enc = speech_encode(&mut ctx, &self.cfg, frames)?;
            let u = ctx.tape.dims(enc).0;
            let mut unused = SeededRng::derived(0, "strided", 0);
            let idx = subsample_indices(u, self.cfg.subsample_rate, SubsampleMode::Strided, &mut unused)?;
            let sub = ctx.tape.gather(enc, &idx)?;
            let adapted = adapter_forward(&mut ctx, &self.cfg, sub)?;
            let prompt = if instruction.is_empty() {
                adapted
            } else {
                let text = lm_embed(&mut ctx, instruction)?;
                ctx.tape.concat_rows(text, adapted)?
            };
            let mem = lm_encode_embedded(&mut ctx, &self.cfg, prompt)?;
            (tape.value(mem).to_vec(), tape.dims(mem).0)
        };
        let mut out: Vec<u32> = Vec::new();
        for _ in 0..max_len {
            let mut tape = Tape::new();
            let mut binding = TapeBinding::new();
            let mem = tape.constant(mem_rows, self.cfg.lm_width, mem_vals.clone())?;
            let mut dec_in = Vec::with_capacity(out.len() + 1);
            dec_in.push(vocab::BOS);
            dec_in.extend_from_slice(&out);
            let mut ctx = Ctx::new(&mut tape, &mut binding, &self.store);
            let logits = lm_decode(&mut ctx, &self.cfg, mem, &dec_in)?;
            let (rows, cols) = tape.dims(logits);
            let last = &tape.value(logits)[(rows - 1) * cols..];
            let mut best = 0usize;
            for j in 1..cols {
                if last[j] > last[best] {
                    best = j;
                }
            }
            if best as u32 == vocab::EOS {
                break;
            }
            out.push(best as u32);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbones::{register_speech_encoder, register_text_lm};
    use proptest::prelude::*;

    fn tiny_cfg() -> Config {
        let mut cfg = Config::default();
        cfg.speech_frame_dim = 4;
        cfg.speech_width = 8;
        cfg.speech_layers = 1;
        cfg.speech_heads = 2;
        cfg.speech_max_len = 40;
        cfg.lm_width = 12;
        cfg.lm_layers = 1;
        cfg.lm_heads = 2;
        cfg.lm_max_len = 24;
        cfg.adapter_layers = 1;
        cfg.adapter_heads = 2;
        cfg.validate().unwrap();
        cfg
    }

    fn tiny_sandwich(cfg: &Config) -> Sandwich<f64> {
        let mut speech = ParameterStore::new();
        let mut rng = SeededRng::derived(cfg.seed, "speech_init", 0);
        register_speech_encoder(&mut speech, &mut rng, cfg).unwrap();
        speech.freeze_all();
        let mut lm = ParameterStore::new();
        let mut rng = SeededRng::derived(cfg.seed, "lm_init", 0);
        register_text_lm(&mut lm, &mut rng, cfg).unwrap();
        lm.freeze_all();
        Sandwich::assemble(cfg, &speech, &lm).unwrap()
    }

    fn tiny_frames(cfg: &Config, tokens: &[u32], seed: u64) -> FeatureSequence {
        let sp = crate::speechify::Speechifier::generate(cfg.speech_frame_dim, 3, 6, 0.1, 77);
        sp.speechify(tokens, seed).unwrap()
    }

    #[test]
    fn strided_subsampling_matches_contract() {
        let mut rng = SeededRng::derived(0, "t", 0);
        assert_eq!(
            subsample_indices(8, 4, SubsampleMode::Strided, &mut rng).unwrap(),
            vec![0, 4]
        );
        assert_eq!(
            subsample_indices(3, 4, SubsampleMode::Strided, &mut rng).unwrap(),
            vec![0]
        );
        assert!(subsample_indices(0, 4, SubsampleMode::Strided, &mut rng).is_err());
    }

    #[test]
    fn random_subsampling_is_seeded_and_pinned() {
        let mut rng = SeededRng::derived(123, "subsample", 0);
        let a = subsample_indices(100, 4, SubsampleMode::Random, &mut rng).unwrap();
        let mut rng = SeededRng::derived(123, "subsample", 0);
        let b = subsample_indices(100, 4, SubsampleMode::Random, &mut rng).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 25);
        // golden subset for this seed; a silent sampler change must show up
        assert_eq!(
            a,
            vec![
                6, 11, 13, 17, 21, 27, 30, 33, 39, 41, 47, 48, 52, 54, 55, 56, 58, 69, 71, 72,
                78, 83, 84, 90, 94
            ]
        );
    }

    proptest! {
        #[test]
        fn subsample_length_and_order_invariants(u in 1usize..200, rate in 1usize..9, seed in 0u64..50) {
            let mut rng = SeededRng::derived(seed, "prop", 0);
            for mode in [SubsampleMode::Strided, SubsampleMode::Random] {
                let idx = subsample_indices(u, rate, mode, &mut rng).unwrap();
                prop_assert_eq!(idx.len(), u.div_ceil(rate));
                prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
                prop_assert!(idx.iter().all(|&i| i < u));
            }
        }
    }

    #[test]
    fn trainable_set_is_exactly_the_adapter() {
        let cfg = tiny_cfg();
        let sw = tiny_sandwich(&cfg);
        let names = sw.trainable_names();
        assert!(!names.is_empty());
        assert!(names.iter().all(|n| n.starts_with("adapter.")));
        let adapter_count = sw
            .store
            .iter()
            .filter(|p| p.name.starts_with("adapter."))
            .count();
        assert_eq!(names.len(), adapter_count);
    }

    #[test]
    fn untrained_loss_sits_near_uniform() {
        let cfg = tiny_cfg();
        let sw = tiny_sandwich(&cfg);
        let frames = tiny_frames(&cfg, &[24, 25, 26], 5);
        let mut tape = Tape::new();
        let mut binding = TapeBinding::new();
        let mut rng = SeededRng::derived(0, "s", 0);
        let loss = sw
            .loss_from_frames(
                &mut tape,
                &mut binding,
                &[3, 9, 10],
                &frames,
                &[24, 25, 26],
                SubsampleMode::Strided,
                &mut rng,
            )
            .unwrap();
        let v = tape.value(loss)[0];
        let uniform = (cfg.vocab_size as f64).ln();
        assert!((v - uniform).abs() / uniform < 0.15, "loss {v} vs {uniform}");
    }

    #[test]
    fn strided_loss_is_bit_deterministic_and_matches_cached_encoder() {
        let cfg = tiny_cfg();
        let sw = tiny_sandwich(&cfg);
        let frames = tiny_frames(&cfg, &[24, 25, 26, 27], 9);
        let once = |cached: bool| -> f64 {
            let mut tape = Tape::new();
            let mut binding = TapeBinding::new();
            let mut rng = SeededRng::derived(0, "s", 0);
            let loss = if cached {
                let (vals, rows) = sw.encode_speech(&frames).unwrap();
                sw.loss_from_cached_enc(
                    &mut tape,
                    &mut binding,
                    &vals,
                    rows,
                    &[3, 9, 10],
                    &[24, 25, 26, 27],
                    SubsampleMode::Strided,
                    &mut rng,
                )
                .unwrap()
            } else {
                sw.loss_from_frames(
                    &mut tape,
                    &mut binding,
                    &[3, 9, 10],
                    &frames,
                    &[24, 25, 26, 27],
                    SubsampleMode::Strided,
                    &mut rng,
                )
                .unwrap()
            };
            tape.value(loss)[0]
        };
        assert_eq!(once(false).to_bits(), once(false).to_bits());
        assert_eq!(once(false).to_bits(), once(true).to_bits());
    }

    #[test]
    fn empty_instruction_prompt_is_speech_only() {
        let cfg = tiny_cfg();
        let sw = tiny_sandwich(&cfg);
        let frames = tiny_frames(&cfg, &[24, 25], 3);
        let mut tape = Tape::new();
        let mut binding = TapeBinding::new();
        let mut rng = SeededRng::derived(0, "s", 0);
        let loss = sw.loss_from_frames(
            &mut tape,
            &mut binding,
            &[],
            &frames,
            &[24, 25],
            SubsampleMode::Strided,
            &mut rng,
        );
        assert!(loss.is_ok());
    }

    #[test]
    fn generation_is_deterministic_caps_length_and_shuffling_changes_it() {
        let cfg = tiny_cfg();
        let sw = tiny_sandwich(&cfg);
        let frames = tiny_frames(&cfg, &[24, 25, 26], 5);
        let a = sw.generate(&[3, 9, 10], &frames, 6).unwrap();
        let b = sw.generate(&[3, 9, 10], &frames, 6).unwrap();
        assert_eq!(a, b);
        assert!(a.len() <= 6);
        let one = sw.generate(&[3, 9, 10], &frames, 1).unwrap();
        assert!(one.len() <= 1);

        let mut shuffled = Sandwich { cfg: sw.cfg.clone(), store: sw.store.clone() };
        shuffled.shuffle_adapter(99);
        let mut changed = false;
        for p in shuffled.store.iter() {
            let orig = sw.store.get(&p.name).unwrap();
            if p.name.starts_with("adapter.") && p.data != orig.data {
                changed = true;
            }
            if !p.name.starts_with("adapter.") {
                assert_eq!(
                    p.data.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                    orig.data.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                    "{} moved",
                    p.name
                );
            }
        }
        assert!(changed, "shuffle left every adapter tensor fixed");
    }

    /// Loss gradient vs central differences for every adapter tensor, in
    /// 64-bit on the tiny configuration.
    #[test]
    fn adapter_gradients_match_finite_differences() {
        let cfg = tiny_cfg();
        let mut sw = tiny_sandwich(&cfg);
        let frames = tiny_frames(&cfg, &[24, 25, 26], 5);
        let instruction = [3u32, 9, 10];
        let target = [24u32, 25, 26];

        let loss_of = |sw: &Sandwich<f64>| -> f64 {
            let mut tape = Tape::new();
            let mut binding = TapeBinding::new();
            let mut rng = SeededRng::derived(0, "s", 0);
            let loss = sw
                .loss_from_frames(
                    &mut tape,
                    &mut binding,
                    &instruction,
                    &frames,
                    &target,
                    SubsampleMode::Strided,
                    &mut rng,
                )
                .unwrap();
            tape.value(loss)[0]
        };

        let mut tape = Tape::new();
        let mut binding = TapeBinding::new();
        let mut rng = SeededRng::derived(0, "s", 0);
        let loss = sw
            .loss_from_frames(
                &mut tape,
                &mut binding,
                &instruction,
                &frames,
                &target,
                SubsampleMode::Strided,
                &mut rng,
            )
            .unwrap();
        tape.backward(loss).unwrap();
        sw.store.zero_grads();
        sw.store.accumulate_grads(&binding, &tape);

        let names: Vec<String> = sw.trainable_names();
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for name in &names {
            let grad = sw.store.get(name).unwrap().grad.clone().expect("adapter grad");
            let picks = [0usize, grad.len() / 3, grad.len() - 1];
            for &idx in &picks {
                let orig = sw.store.get(name).unwrap().data[idx];
                sw.store.get_mut(name).unwrap().data[idx] = orig + h;
                let up = loss_of(&sw);
                sw.store.get_mut(name).unwrap().data[idx] = orig - h;
                let down = loss_of(&sw);
                sw.store.get_mut(name).unwrap().data[idx] = orig;
                let numeric = (up - down) / (2.0 * h);
                let analytic = grad[idx];
                let denom = analytic.abs().max(numeric.abs()).max(0.1);
                let rel = (analytic - numeric).abs() / denom;
                worst = worst.max(rel);
                assert!(rel < 1e-4, "{name}[{idx}]: {analytic} vs {numeric} rel {rel}");
            }
        }
        assert!(worst < 1e-4);
    }

    #[test]
    fn frozen_backbones_receive_no_gradient() {
        let cfg = tiny_cfg();
        let mut sw = tiny_sandwich(&cfg);
        let frames = tiny_frames(&cfg, &[24, 25], 1);
        let mut tape = Tape::new();
        let mut binding = TapeBinding::new();
        let mut rng = SeededRng::derived(0, "s", 0);
        let loss = sw
            .loss_from_frames(
                &mut tape,
                &mut binding,
                &[3, 9, 10],
                &frames,
                &[24, 25],
                SubsampleMode::Strided,
                &mut rng,
            )
            .unwrap();
        tape.backward(loss).unwrap();
        sw.store.zero_grads();
        sw.store.accumulate_grads(&binding, &tape);
        for p in sw.store.iter() {
            if p.name.starts_with("adapter.") {
                assert!(p.grad.is_some(), "{} missing grad", p.name);
            } else {
                assert!(p.grad.is_none(), "{} unexpectedly has grad", p.name);
            }
        }
    }
}
