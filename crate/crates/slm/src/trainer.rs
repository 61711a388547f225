//! Adapter training and fine-tuning loops.
//!
//! One loop serves both: `train` applies the config's trainability mask and
//! runs proportional-mixture batches; `finetune` is the same loop pointed
//! at a different corpus, conventionally starting from an already-trained
//! model with a fresh optimizer.
//!
//! Determinism layout: batch composition draws from a per-step stream
//! derived as (seed, "mix_batch", step), subsampling from (seed,
//! "subsample", step). A resumed run replays the identical streams because
//! the step index is global, carried by the optimizer's update count.
//!
//! While the speech encoder is frozen (every mask except `all`) its output
//! for each example is computed once and cached; the cached rows enter the
//! tape as constants, which is bit-identical to the full forward pass.

use crate::backbones;
use crate::checkpoint::Checkpoint;
use crate::config::{Config, SubsampleMode, TrainMask};
use crate::error::{Result, SlmError};
use crate::optim::Adam;
use crate::params::{ParameterStore, TapeBinding};
use crate::rng::SeededRng;
use crate::sandwich::Sandwich;
use crate::scalar::Scalar;
use crate::speechify::Speechifier;
use crate::tasks::{MixtureDataset, TaskExample};
use crate::tensor::Tape;
use sha2::{Digest, Sha256};
use std::io::Write;
use std::path::{Path, PathBuf};

pub const METRICS_FILE: &str = "metrics.log";
pub const CHECKPOINT_DIR: &str = "checkpoints";

#[derive(Debug)]
pub struct RunRecord {
    /// Step index of the first loss entry (0 for fresh runs).
    pub start_step: usize,
    pub losses: Vec<f64>,
    /// (step, mean held-out teacher-forced loss) at the eval cadence.
    pub evals: Vec<(usize, f64)>,
    pub fingerprint: [u8; 32],
}

impl RunRecord {
    /// Boxcar-smoothed loss at a global step index, window 50.
    pub fn smoothed(&self, step: usize) -> f64 {
        let i = step - self.start_step;
        crate::backbones::smoothed_loss(&self.losses, i)
    }
}

fn batch_fingerprint(picks: &[(usize, usize)]) -> String {
    let mut h = Sha256::new();
    for &(t, i) in picks {
        h.update((t as u64).to_le_bytes());
        h.update((i as u64).to_le_bytes());
    }
    let d = h.finalize();
    d[..4].iter().map(|b| format!("{b:02x}")).collect()
}

pub fn append_metrics(run_dir: Option<&Path>, line: &str) -> Result<()> {
    let Some(dir) = run_dir else { return Ok(()) };
    let path = dir.join(METRICS_FILE);
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| SlmError::io(&path, e))?;
    writeln!(f, "{line}").map_err(|e| SlmError::io(&path, e))
}

pub fn checkpoint_path(run_dir: &Path, step: usize) -> PathBuf {
    run_dir.join(CHECKPOINT_DIR).join(format!("step_{step}.slmc"))
}

pub fn save_train_checkpoint<S: Scalar>(
    run_dir: &Path,
    sw: &Sandwich<S>,
    adam: &Adam<S>,
    step: usize,
) -> Result<()> {
    let dir = run_dir.join(CHECKPOINT_DIR);
    std::fs::create_dir_all(&dir).map_err(|e| SlmError::io(&dir, e))?;
    let mut ck = Checkpoint::new(sw.cfg.fingerprint());
    ck.push_store(&sw.store);
    ck.push_adam(adam);
    ck.save(&checkpoint_path(run_dir, step))
}

/// Load a training checkpoint into an assembled model, restoring optimizer
/// state so training continues the same trajectory.
pub fn load_train_checkpoint<S: Scalar>(
    path: &Path,
    sw: &mut Sandwich<S>,
) -> Result<(Adam<S>, usize)> {
    let ck = Checkpoint::load(path)?;
    ck.expect_fingerprint(sw.cfg.fingerprint())?;
    ck.apply_to_store(&mut sw.store)?;
    let adam = ck.restore_adam(sw.cfg.lr)?;
    let step = adam.step;
    Ok((adam, step))
}

/// Load a checkpoint's parameter values only: fresh optimizer, step 0.
/// This is the fine-tuning entry point.
pub fn load_model_values<S: Scalar>(path: &Path, sw: &mut Sandwich<S>) -> Result<()> {
    let ck = Checkpoint::load(path)?;
    ck.expect_fingerprint(sw.cfg.fingerprint())?;
    ck.apply_to_store(&mut sw.store)
}

/// Assemble a sandwich with freshly registered (then fully overwritten)
/// stores and load every parameter value from a training checkpoint.
pub fn load_sandwich<S: Scalar>(cfg: &Config, ckpt: &Path) -> Result<Sandwich<S>> {
    let mut speech = ParameterStore::<S>::new();
    let mut rng = SeededRng::derived(cfg.seed, "speech_init", 0);
    backbones::register_speech_encoder(&mut speech, &mut rng, cfg)?;
    let speech = backbones::freeze_speech_encoder(&mut speech);
    let mut lm = ParameterStore::new();
    let mut rng = SeededRng::derived(cfg.seed, "lm_init", 0);
    backbones::register_text_lm(&mut lm, &mut rng, cfg)?;
    lm.freeze_all();
    let mut sw = Sandwich::assemble(cfg, &speech, &lm)?;
    load_model_values(ckpt, &mut sw)?;
    Ok(sw)
}

struct CachedEnc {
    vals: Vec<f64>,
    rows: usize,
}

/// Per-example speech-encoder outputs, stored in f64 and cast on use so a
/// cache built once serves either precision without re-encoding.
struct EncCache {
    by_task: Vec<Vec<CachedEnc>>,
}

fn build_cache<S: Scalar>(
    sw: &Sandwich<S>,
    sp: &Speechifier,
    dataset: &MixtureDataset,
) -> Result<EncCache> {
    let mut by_task = Vec::with_capacity(dataset.tasks.len());
    for task in &dataset.tasks {
        let mut list = Vec::with_capacity(task.len());
        for ex in task {
            let frames = ex.speech.materialize(sp, ex.noise_std)?;
            let (vals, rows) = sw.encode_speech(&frames)?;
            list.push(CachedEnc { vals: vals.iter().map(|v| v.to_f64()).collect(), rows });
        }
        by_task.push(list);
    }
    Ok(EncCache { by_task })
}

/// Mean teacher-forced loss over a held-out set, strided subsampling.
pub fn heldout_loss<S: Scalar>(
    sw: &Sandwich<S>,
    sp: &Speechifier,
    examples: &[TaskExample],
) -> Result<f64> {
    if examples.is_empty() {
        return Err(SlmError::Empty("held-out set is empty".into()));
    }
    let mut total = 0.0;
    for ex in examples {
        let frames = ex.speech.materialize(sp, ex.noise_std)?;
        let mut tape = Tape::new();
        let mut binding = TapeBinding::new();
        let mut rng = SeededRng::derived(0, "eval", 0);
        let loss = sw.loss_from_frames(
            &mut tape,
            &mut binding,
            &ex.instruction,
            &frames,
            &ex.target,
            SubsampleMode::Strided,
            &mut rng,
        )?;
        total += tape.value(loss)[0].to_f64();
    }
    Ok(total / examples.len() as f64)
}

/// Train from `start_step` until `steps_total`, mutating the model and
/// optimizer in place. Applies the config's mask on entry; only masked
/// tensors change. Emits metrics lines and periodic checkpoints when
/// `run_dir` is given.
pub fn train<S: Scalar>(
    sw: &mut Sandwich<S>,
    sp: &Speechifier,
    dataset: &MixtureDataset,
    heldout: &[TaskExample],
    adam: &mut Adam<S>,
    start_step: usize,
    steps_total: usize,
    run_dir: Option<&Path>,
) -> Result<RunRecord> {
    let cfg = sw.cfg.clone();
    sw.store.set_trainable_by_prefixes(cfg.mask.prefixes());
    let mut record = RunRecord {
        start_step,
        losses: Vec::new(),
        evals: Vec::new(),
        fingerprint: cfg.fingerprint(),
    };
    if start_step >= steps_total {
        return Ok(record);
    }
    // mask `all` trains the speech encoder, so its outputs cannot be reused
    let cache = if cfg.mask == TrainMask::All {
        None
    } else {
        Some(build_cache(sw, sp, dataset)?)
    };

    for step in start_step..steps_total {
        let mut batch_rng = SeededRng::derived(cfg.seed, "mix_batch", step as u64);
        let picks = dataset.sample_indices(cfg.batch_size, &mut batch_rng)?;
        let mut sub_rng = SeededRng::derived(cfg.seed, "subsample", step as u64);

        let mut tape = Tape::new();
        let mut binding = TapeBinding::new();
        let mut losses = Vec::with_capacity(picks.len());
        for &(t, i) in &picks {
            let ex = &dataset.tasks[t][i];
            let loss = match &cache {
                Some(c) => {
                    let enc = &c.by_task[t][i];
                    let vals: Vec<S> = enc.vals.iter().map(|&v| S::from_f64(v)).collect();
                    sw.loss_from_cached_enc(
                        &mut tape,
                        &mut binding,
                        &vals,
                        enc.rows,
                        &ex.instruction,
                        &ex.target,
                        cfg.subsample,
                        &mut sub_rng,
                    )?
                }
                None => {
                    let frames = ex.speech.materialize(sp, ex.noise_std)?;
                    sw.loss_from_frames(
                        &mut tape,
                        &mut binding,
                        &ex.instruction,
                        &frames,
                        &ex.target,
                        cfg.subsample,
                        &mut sub_rng,
                    )?
                }
            };
            losses.push(loss);
        }
        let total = tape.mean_scalars(&losses)?;
        let loss = tape.value(total)[0].to_f64();
        if !loss.is_finite() {
            return Err(SlmError::Numeric {
                step,
                detail: format!("loss is {loss} (batch {})", batch_fingerprint(&picks)),
            });
        }
        tape.backward(total)?;
        sw.store.zero_grads();
        sw.store.accumulate_grads(&binding, &tape);
        adam.step(&mut sw.store)?;
        record.losses.push(loss);
        append_metrics(run_dir, &format!("step={} loss={loss}", step + 1))?;

        let done = step + 1;
        if cfg.eval_every > 0 && done % cfg.eval_every == 0 && !heldout.is_empty() {
            let hl = heldout_loss(sw, sp, heldout)?;
            record.evals.push((done, hl));
            append_metrics(run_dir, &format!("step={done} heldout_loss={hl}"))?;
        }
        if let Some(dir) = run_dir {
            if (cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0) || done == steps_total
            {
                save_train_checkpoint(dir, sw, adam, done)?;
            }
        }
    }
    Ok(record)
}

/// The fine-tuning loop is the training loop with a fresh optimizer over a
/// new corpus; the mask in `sw.cfg` picks which presets' tensors move.
pub fn finetune<S: Scalar>(
    sw: &mut Sandwich<S>,
    sp: &Speechifier,
    corpus: &MixtureDataset,
    heldout: &[TaskExample],
    steps: usize,
    run_dir: Option<&Path>,
) -> Result<RunRecord> {
    let mut adam = Adam::new(sw.cfg.lr);
    train(sw, sp, corpus, heldout, &mut adam, 0, steps, run_dir)
}

#[derive(Debug)]
pub struct DepthOutcome {
    pub depth: usize,
    pub final_heldout_loss: f64,
    pub record: RunRecord,
}

/// Train one fresh adapter per depth on identical budgets and backbones;
/// everything except `adapter.num_layers` is shared.
pub fn ablate_depth<S: Scalar>(
    cfg: &Config,
    speech: &crate::params::ParameterStore<S>,
    lm: &crate::params::ParameterStore<S>,
    sp: &Speechifier,
    dataset: &MixtureDataset,
    heldout: &[TaskExample],
    depths: &[usize],
    steps: usize,
) -> Result<Vec<DepthOutcome>> {
    if depths.is_empty() {
        return Err(SlmError::Empty("depth list is empty".into()));
    }
    let mut out = Vec::with_capacity(depths.len());
    for &depth in depths {
        let mut c = cfg.clone();
        c.adapter_layers = depth;
        c.validate()?;
        let mut sw = Sandwich::assemble(&c, speech, lm)?;
        let mut adam = Adam::new(c.lr);
        let record = train(&mut sw, sp, dataset, heldout, &mut adam, 0, steps, None)?;
        let final_heldout_loss = heldout_loss(&sw, sp, heldout)?;
        out.push(DepthOutcome { depth, final_heldout_loss, record });
    }
    Ok(out)
}
