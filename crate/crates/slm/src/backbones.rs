//! The two frozen foundation models and their pretraining loops.
//!
//! The speech encoder trains as the encoder of an attention seq2seq
//! recognizer whose decoder (`asr_decoder.*`) exists only for pretraining
//! and is dropped afterwards. The text LM is a shared-vocabulary
//! encoder-decoder trained on text-form versions of every downstream task,
//! so that later speech-side instruction following is attributable to the
//! adapter rather than to task knowledge the LM lacks.
//!
//! Parameter names are load-bearing: training masks select by prefix
//! (`speech_encoder.`, `text_lm.encoder.`, ...), and checkpoints match
//! records to stores by name.

use crate::checkpoint::{Checkpoint, RawRecord};
use crate::config::Config;
use crate::error::{Result, SlmError};
use crate::optim::Adam;
use crate::params::{ParameterStore, TapeBinding};
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::speechify::{FeatureSequence, Speechifier};
use crate::tasks::TaskExample;
use crate::tensor::{Tape, TensorId};
use crate::transformer::{register_stack, Ctx};
use crate::vocab;
use std::path::Path;

const HISTORY_RECORD: &str = "meta.loss_history";

// ── registration ──

pub fn register_speech_encoder<S: Scalar>(
    store: &mut ParameterStore<S>,
    rng: &mut SeededRng,
    cfg: &Config,
) -> Result<()> {
    let d = cfg.speech_width;
    store.init_matrix("speech_encoder.input_proj", cfg.speech_frame_dim, d, rng)?;
    store.init_fill("speech_encoder.input_bias", 1, d, 0.0)?;
    store.init_matrix("speech_encoder.pos", cfg.speech_max_len, d, rng)?;
    register_stack(store, rng, "speech_encoder", d, cfg.speech_layers, false)
}

/// Seq2seq head used only while pretraining the speech encoder.
pub fn register_asr_decoder<S: Scalar>(
    store: &mut ParameterStore<S>,
    rng: &mut SeededRng,
    cfg: &Config,
) -> Result<()> {
    let d = cfg.speech_width;
    store.init_matrix("asr_decoder.embedding", cfg.vocab_size, d, rng)?;
    store.init_matrix("asr_decoder.pos", cfg.lm_max_len, d, rng)?;
    register_stack(store, rng, "asr_decoder", d, cfg.speech_layers, true)?;
    store.init_matrix("asr_decoder.head", d, cfg.vocab_size, rng)
}

pub fn register_text_lm<S: Scalar>(
    store: &mut ParameterStore<S>,
    rng: &mut SeededRng,
    cfg: &Config,
) -> Result<()> {
    let e = cfg.lm_width;
    store.init_matrix("text_lm.embedding", cfg.vocab_size, e, rng)?;
    store.init_matrix("text_lm.encoder.pos", cfg.lm_max_len, e, rng)?;
    register_stack(store, rng, "text_lm.encoder", e, cfg.lm_layers, false)?;
    store.init_matrix("text_lm.decoder.pos", cfg.lm_max_len, e, rng)?;
    register_stack(store, rng, "text_lm.decoder", e, cfg.lm_layers, true)?;
    store.init_matrix("text_lm.head", e, cfg.vocab_size, rng)
}

// ── forward pieces ──

fn frames_constant<S: Scalar>(tape: &mut Tape<S>, frames: &FeatureSequence) -> Result<TensorId> {
    let data: Vec<S> = frames.frames.iter().map(|&x| S::from_f64(x)).collect();
    tape.constant(frames.rows(), frames.dim, data)
}

/// FeatureSequence[U x F] -> EmbeddingSequence[U x D], length preserved.
pub fn speech_encode<S: Scalar>(
    ctx: &mut Ctx<'_, S>,
    cfg: &Config,
    frames: &FeatureSequence,
) -> Result<TensorId> {
    let x = frames_constant(ctx.tape, frames)?;
    let proj = ctx.param("speech_encoder.input_proj")?;
    let bias = ctx.param("speech_encoder.input_bias")?;
    let x = ctx.tape.matmul(x, proj)?;
    let x = ctx.tape.add_row(x, bias)?;
    let x = ctx.add_positions("speech_encoder.pos", x)?;
    ctx.stack("speech_encoder", x, cfg.speech_layers, cfg.speech_heads, None, false)
}

fn ids_usize(ids: &[u32]) -> Vec<usize> {
    ids.iter().map(|&t| t as usize).collect()
}

/// Token rows from the LM embedding table, no positions added.
pub fn lm_embed<S: Scalar>(ctx: &mut Ctx<'_, S>, ids: &[u32]) -> Result<TensorId> {
    let table = ctx.param("text_lm.embedding")?;
    ctx.tape.gather(table, &ids_usize(ids))
}

/// Run the LM encoder over already-embedded prompt rows. Positions are
/// added here, over the whole prompt, which is exactly what hands adapted
/// speech rows their position when they are concatenated after text.
pub fn lm_encode_embedded<S: Scalar>(
    ctx: &mut Ctx<'_, S>,
    cfg: &Config,
    x: TensorId,
) -> Result<TensorId> {
    let x = ctx.add_positions("text_lm.encoder.pos", x)?;
    ctx.stack("text_lm.encoder", x, cfg.lm_layers, cfg.lm_heads, None, false)
}

/// Teacher-forced decoder logits over `dec_ids`, cross-attending `memory`.
pub fn lm_decode<S: Scalar>(
    ctx: &mut Ctx<'_, S>,
    cfg: &Config,
    memory: TensorId,
    dec_ids: &[u32],
) -> Result<TensorId> {
    let table = ctx.param("text_lm.embedding")?;
    let x = ctx.tape.gather(table, &ids_usize(dec_ids))?;
    let x = ctx.add_positions("text_lm.decoder.pos", x)?;
    let x = ctx.stack("text_lm.decoder", x, cfg.lm_layers, cfg.lm_heads, Some(memory), true)?;
    let head = ctx.param("text_lm.head")?;
    ctx.tape.matmul(x, head)
}

/// Next-token loss on `target` given encoder `memory`: decoder input is
/// BOS ++ target, labels are target ++ EOS.
pub fn lm_seq2seq_loss<S: Scalar>(
    ctx: &mut Ctx<'_, S>,
    cfg: &Config,
    memory: TensorId,
    target: &[u32],
) -> Result<TensorId> {
    if target.is_empty() {
        return Err(SlmError::Empty("seq2seq target is empty".into()));
    }
    let mut dec_in = Vec::with_capacity(target.len() + 1);
    dec_in.push(vocab::BOS);
    dec_in.extend_from_slice(target);
    let mut labels = target.to_vec();
    labels.push(vocab::EOS);
    let logits = lm_decode(ctx, cfg, memory, &dec_in)?;
    ctx.tape.cross_entropy(logits, &labels, vocab::PAD)
}

/// ASR-decoder analogues of the two functions above.
pub fn asr_decode<S: Scalar>(
    ctx: &mut Ctx<'_, S>,
    cfg: &Config,
    memory: TensorId,
    dec_ids: &[u32],
) -> Result<TensorId> {
    let table = ctx.param("asr_decoder.embedding")?;
    let x = ctx.tape.gather(table, &ids_usize(dec_ids))?;
    let x = ctx.add_positions("asr_decoder.pos", x)?;
    let x = ctx.stack("asr_decoder", x, cfg.speech_layers, cfg.speech_heads, Some(memory), true)?;
    let head = ctx.param("asr_decoder.head")?;
    ctx.tape.matmul(x, head)
}

pub fn asr_seq2seq_loss<S: Scalar>(
    ctx: &mut Ctx<'_, S>,
    cfg: &Config,
    memory: TensorId,
    target: &[u32],
) -> Result<TensorId> {
    if target.is_empty() {
        return Err(SlmError::Empty("seq2seq target is empty".into()));
    }
    let mut dec_in = Vec::with_capacity(target.len() + 1);
    dec_in.push(vocab::BOS);
    dec_in.extend_from_slice(target);
    let mut labels = target.to_vec();
    labels.push(vocab::EOS);
    let logits = asr_decode(ctx, cfg, memory, &dec_in)?;
    ctx.tape.cross_entropy(logits, &labels, vocab::PAD)
}

// ── greedy decoding ──

/// Greedy argmax decode against a fixed memory; stops at EOS. Each emitted
/// token re-runs the decoder on the grown prefix: wasteful but simple, and
/// targets here are at most a dozen tokens.
fn greedy_loop<S: Scalar>(
    store: &ParameterStore<S>,
    memory_vals: &[S],
    memory_rows: usize,
    width: usize,
    max_len: usize,
    mut step_logits: impl FnMut(&mut Ctx<'_, S>, TensorId, &[u32]) -> Result<TensorId>,
) -> Result<Vec<u32>> {
    let mut out: Vec<u32> = Vec::new();
    for _ in 0..max_len {
        let mut tape = Tape::new();
        let mut binding = TapeBinding::new();
        let mem = tape.constant(memory_rows, width, memory_vals.to_vec())?;
        let mut dec_in = Vec::with_capacity(out.len() + 1);
        dec_in.push(vocab::BOS);
        dec_in.extend_from_slice(&out);
        let mut ctx = Ctx::new(&mut tape, &mut binding, store);
        let logits = step_logits(&mut ctx, mem, &dec_in)?;
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

/// Text-in text-out greedy generation with the LM alone.
pub fn lm_generate_text<S: Scalar>(
    store: &ParameterStore<S>,
    cfg: &Config,
    enc_ids: &[u32],
    max_len: usize,
) -> Result<Vec<u32>> {
    let (mem_vals, rows) = {
        let mut tape = Tape::new();
        let mut binding = TapeBinding::new();
        let mut ctx = Ctx::new(&mut tape, &mut binding, store);
        let emb = lm_embed(&mut ctx, enc_ids)?;
        let mem = lm_encode_embedded(&mut ctx, cfg, emb)?;
        (tape.value(mem).to_vec(), tape.dims(mem).0)
    };
    greedy_loop(store, &mem_vals, rows, cfg.lm_width, max_len, |ctx, mem, dec_in| {
        lm_decode(ctx, cfg, mem, dec_in)
    })
}

fn asr_generate<S: Scalar>(
    store: &ParameterStore<S>,
    cfg: &Config,
    frames: &FeatureSequence,
    max_len: usize,
) -> Result<Vec<u32>> {
    let (mem_vals, rows) = {
        let mut tape = Tape::new();
        let mut binding = TapeBinding::new();
        let mut ctx = Ctx::new(&mut tape, &mut binding, store);
        let mem = speech_encode(&mut ctx, cfg, frames)?;
        (tape.value(mem).to_vec(), tape.dims(mem).0)
    };
    greedy_loop(store, &mem_vals, rows, cfg.speech_width, max_len, |ctx, mem, dec_in| {
        asr_decode(ctx, cfg, mem, dec_in)
    })
}

// ── pretraining ──

pub struct PretrainOutcome<S: Scalar> {
    pub store: ParameterStore<S>,
    pub history: Vec<f64>,
}

/// 50-step boxcar smoothing, the window clipped at the start.
pub fn smoothed_loss(history: &[f64], step: usize) -> f64 {
    let end = (step + 1).min(history.len());
    let start = end.saturating_sub(50);
    let w = &history[start..end];
    w.iter().sum::<f64>() / w.len() as f64
}

fn materialized<'a>(
    examples: &'a [TaskExample],
    sp: &Speechifier,
) -> Result<Vec<(FeatureSequence, &'a [u32])>> {
    examples
        .iter()
        .map(|ex| Ok((ex.speech.materialize(sp, ex.noise_std)?, ex.target.as_slice())))
        .collect()
}

fn check_finite(loss: f64, step: usize) -> Result<()> {
    if !loss.is_finite() {
        return Err(SlmError::Numeric { step, detail: format!("loss is {loss}") });
    }
    Ok(())
}

/// Train encoder + throwaway decoder on recognition; every parameter in
/// the store is trainable here.
pub fn pretrain_speech_encoder<S: Scalar>(
    cfg: &Config,
    corpus: &[TaskExample],
    sp: &Speechifier,
    steps: usize,
) -> Result<PretrainOutcome<S>> {
    if corpus.is_empty() {
        return Err(SlmError::Empty("speech pretraining corpus is empty".into()));
    }
    let mut store = ParameterStore::new();
    let mut rng = SeededRng::derived(cfg.seed, "speech_init", 0);
    register_speech_encoder(&mut store, &mut rng, cfg)?;
    register_asr_decoder(&mut store, &mut rng, cfg)?;
    let data = materialized(corpus, sp)?;
    let mut adam = Adam::new(cfg.pretrain_lr);
    let mut history = Vec::with_capacity(steps);
    for step in 0..steps {
        let mut batch_rng = SeededRng::derived(cfg.seed, "speech_batch", step as u64);
        let mut tape = Tape::new();
        let mut binding = TapeBinding::new();
        let mut losses = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let (frames, target) = &data[batch_rng.below(data.len())];
            let mut ctx = Ctx::new(&mut tape, &mut binding, &store);
            let mem = speech_encode(&mut ctx, cfg, frames)?;
            losses.push(asr_seq2seq_loss(&mut ctx, cfg, mem, target)?);
        }
        let total = tape.mean_scalars(&losses)?;
        let loss = total_value(&tape, total);
        check_finite(loss, step)?;
        history.push(loss);
        tape.backward(total)?;
        store.zero_grads();
        store.accumulate_grads(&binding, &tape);
        adam.step(&mut store)?;
    }
    Ok(PretrainOutcome { store, history })
}

fn total_value<S: Scalar>(tape: &Tape<S>, id: TensorId) -> f64 {
    tape.value(id)[0].to_f64()
}

fn text_encoder_input(ex: &TaskExample) -> Result<Vec<u32>> {
    let spoken = ex
        .speech
        .tokens()
        .ok_or_else(|| SlmError::Corpus("text-form training needs recipe speech".into()))?;
    let mut ids = ex.instruction.clone();
    ids.extend_from_slice(spoken);
    Ok(ids)
}

/// Train the LM on text-form tasks: encoder input is instruction ++ spoken
/// tokens read as text.
pub fn pretrain_text_lm<S: Scalar>(
    cfg: &Config,
    corpus: &[TaskExample],
    steps: usize,
) -> Result<PretrainOutcome<S>> {
    if corpus.is_empty() {
        return Err(SlmError::Empty("text pretraining corpus is empty".into()));
    }
    let mut store = ParameterStore::new();
    let mut rng = SeededRng::derived(cfg.seed, "lm_init", 0);
    register_text_lm(&mut store, &mut rng, cfg)?;
    let data: Vec<(Vec<u32>, &[u32])> = corpus
        .iter()
        .map(|ex| Ok((text_encoder_input(ex)?, ex.target.as_slice())))
        .collect::<Result<_>>()?;
    let mut adam = Adam::new(cfg.pretrain_lr);
    let mut history = Vec::with_capacity(steps);
    for step in 0..steps {
        let mut batch_rng = SeededRng::derived(cfg.seed, "lm_batch", step as u64);
        let mut tape = Tape::new();
        let mut binding = TapeBinding::new();
        let mut losses = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let (enc_ids, target) = &data[batch_rng.below(data.len())];
            let mut ctx = Ctx::new(&mut tape, &mut binding, &store);
            let emb = lm_embed(&mut ctx, enc_ids)?;
            let mem = lm_encode_embedded(&mut ctx, cfg, emb)?;
            losses.push(lm_seq2seq_loss(&mut ctx, cfg, mem, target)?);
        }
        let total = tape.mean_scalars(&losses)?;
        let loss = total_value(&tape, total);
        check_finite(loss, step)?;
        history.push(loss);
        tape.backward(total)?;
        store.zero_grads();
        store.accumulate_grads(&binding, &tape);
        adam.step(&mut store)?;
    }
    Ok(PretrainOutcome { store, history })
}

// ── evaluation ──

/// Teacher-forced token accuracy of the recognizer on held-out frames.
pub fn speech_token_accuracy<S: Scalar>(
    store: &ParameterStore<S>,
    cfg: &Config,
    examples: &[TaskExample],
    sp: &Speechifier,
) -> Result<f64> {
    let mut hit = 0usize;
    let mut total = 0usize;
    for ex in examples {
        let frames = ex.speech.materialize(sp, ex.noise_std)?;
        let mut tape = Tape::new();
        let mut binding = TapeBinding::new();
        let mut ctx = Ctx::new(&mut tape, &mut binding, store);
        let mem = speech_encode(&mut ctx, cfg, &frames)?;
        let mut dec_in = vec![vocab::BOS];
        dec_in.extend_from_slice(&ex.target);
        let logits = asr_decode(&mut ctx, cfg, mem, &dec_in)?;
        let (_, cols) = tape.dims(logits);
        let vals = tape.value(logits);
        let mut labels = ex.target.clone();
        labels.push(vocab::EOS);
        for (i, &label) in labels.iter().enumerate() {
            let row = &vals[i * cols..(i + 1) * cols];
            let mut best = 0usize;
            for j in 1..cols {
                if row[j] > row[best] {
                    best = j;
                }
            }
            if best as u32 == label {
                hit += 1;
            }
            total += 1;
        }
    }
    Ok(hit as f64 / total as f64)
}

/// Greedy decode of the recognizer, for callers that want transcripts.
pub fn speech_recognize<S: Scalar>(
    store: &ParameterStore<S>,
    cfg: &Config,
    frames: &FeatureSequence,
    max_len: usize,
) -> Result<Vec<u32>> {
    asr_generate(store, cfg, frames, max_len)
}

/// Fraction of examples whose greedy text-side decode equals the target.
pub fn lm_exact_match<S: Scalar>(
    store: &ParameterStore<S>,
    cfg: &Config,
    examples: &[TaskExample],
) -> Result<f64> {
    let mut hit = 0usize;
    for ex in examples {
        let enc_ids = text_encoder_input(ex)?;
        let got = lm_generate_text(store, cfg, &enc_ids, ex.target.len() + 4)?;
        if got == ex.target {
            hit += 1;
        }
    }
    Ok(hit as f64 / examples.len() as f64)
}

// ── checkpoint plumbing ──

pub fn backbone_checkpoint<S: Scalar>(
    store: &ParameterStore<S>,
    cfg: &Config,
    history: &[f64],
) -> Checkpoint {
    let mut ck = Checkpoint::new(cfg.fingerprint());
    ck.push_store(store);
    let hist: Vec<f64> = history.to_vec();
    ck.records.push(RawRecord::from_values(
        HISTORY_RECORD,
        &[1, hist.len() as u64],
        false,
        &hist,
    ));
    ck
}

pub fn save_backbone<S: Scalar>(
    path: &Path,
    store: &ParameterStore<S>,
    cfg: &Config,
    history: &[f64],
) -> Result<()> {
    backbone_checkpoint(store, cfg, history).save(path)
}

/// Register the named backbone fresh and fill it from a checkpoint; the
/// fingerprint must match the running config's architecture.
pub fn load_backbone<S: Scalar>(
    path: &Path,
    cfg: &Config,
    register: impl Fn(&mut ParameterStore<S>, &mut SeededRng, &Config) -> Result<()>,
) -> Result<ParameterStore<S>> {
    let ck = Checkpoint::load(path)?;
    ck.expect_fingerprint(cfg.fingerprint())?;
    let mut store = ParameterStore::new();
    let mut rng = SeededRng::derived(0, "load", 0);
    register(&mut store, &mut rng, cfg)?;
    ck.apply_to_store(&mut store)?;
    Ok(store)
}

/// Drop pretraining-only tensors and freeze the rest in place.
pub fn freeze_speech_encoder<S: Scalar>(store: &mut ParameterStore<S>) -> ParameterStore<S> {
    let mut kept = ParameterStore::new();
    for p in store.iter() {
        if p.name.starts_with("speech_encoder.") {
            kept.add(&p.name, p.rows, p.cols, p.data.clone(), false).unwrap();
        }
    }
    kept
}
