//! Operator surface. One command per process; every artifact lands under
//! --out with fixed names (config.snapshot, checkpoints/step_N.slmc,
//! metrics.log, reports/*.txt) so scripts never depend on internals.
//!
//! Exit codes: 0 success, 1 config or usage problem, 2 numeric failure,
//! 3 I/O failure. Corpus locations come from the `data.dir` config key;
//! relative paths resolve against the working directory.

use crate::backbones::{
    self, register_speech_encoder, register_text_lm, smoothed_loss,
};
use crate::biasing;
use crate::cascade::{run_cascade, CascadeOptions};
use crate::config::Config;
use crate::scalar::Dtype;
use crate::corpus;
use crate::error::{Result, SlmError};
use crate::metrics::{self, evaluate_model, MetricKind, Normalizer};
use crate::optim::Adam;
use crate::params::ParameterStore;
use crate::rng::SeededRng;
use crate::sandwich::Sandwich;
use crate::scalar::Scalar;
use crate::speechify::Speechifier;
use crate::tasks::{BiasSplit, MixtureDataset, TaskExample, TaskTag};
use crate::trainer;
use crate::vocab;
use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};

pub const SPEECH_BACKBONE: &str = "speech_backbone.slmc";
pub const LM_BACKBONE: &str = "lm_backbone.slmc";

#[derive(Parser, Debug)]
#[command(name = "slm", version, about = "Adapter-sandwich speech-language model tooling")]
pub struct Cli {
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Subcommand, Debug)]
pub enum Cmd {
    /// Generate the synthetic corpus into --out.
    #[command(name = "gen-corpus")]
    GenCorpus(GenCorpusArgs),
    /// Pretrain the speech encoder (with its throwaway ASR decoder).
    #[command(name = "pretrain-speech")]
    PretrainSpeech(PretrainArgs),
    /// Pretrain the text encoder-decoder LM.
    #[command(name = "pretrain-lm")]
    PretrainLm(PretrainArgs),
    /// Train the adapter between the frozen backbones.
    Train(TrainArgs),
    /// Continue training from a checkpoint's values with a fresh optimizer
    /// on the biasing fine-tune corpus.
    Finetune(FinetuneArgs),
    /// Decode the held-out corpora and write per-task reports.
    Eval(EvalArgs),
    /// Paired ASR / C-ASR evaluation over the biasing splits.
    #[command(name = "bias-eval")]
    BiasEval(EvalArgs),
    /// Train one adapter per depth on equal budgets and compare.
    #[command(name = "ablate-depth")]
    AblateDepth(AblateArgs),
    /// Two-stage recognize-then-translate baseline vs end-to-end.
    Cascade(EvalArgs),
    /// Greedy-decode one utterance under an instruction.
    Generate(GenerateArgs),
}

#[derive(Args, Debug)]
pub struct CommonArgs {
    /// Config file of key=value lines.
    #[arg(long)]
    pub config: PathBuf,
    /// Master seed override.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Numeric precision override {f32|f64}.
    #[arg(long)]
    pub precision: Option<String>,
}

#[derive(Args, Debug)]
pub struct GenCorpusArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Corpus directory to create.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Run directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Pretraining step budget override.
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Run directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Training step budget override.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Trainable-parameter mask override
    /// {adapter_only|adapter_plus_lm_encoder|all}.
    #[arg(long)]
    pub mask: Option<String>,
    /// Frame subsampling mode override {random|strided}.
    #[arg(long)]
    pub subsample: Option<String>,
    /// Resume from this training checkpoint (optimizer state included).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Speech backbone checkpoint; defaults to <out>/speech_backbone.slmc.
    #[arg(long)]
    pub speech_checkpoint: Option<PathBuf>,
    /// Text LM backbone checkpoint; defaults to <out>/lm_backbone.slmc.
    #[arg(long)]
    pub lm_checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Run directory (use a fresh one: step numbering restarts at 0).
    #[arg(long)]
    pub out: PathBuf,
    /// Checkpoint whose parameter values seed the fine-tune.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub mask: Option<String>,
    #[arg(long)]
    pub subsample: Option<String>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Run directory for reports.
    #[arg(long)]
    pub out: PathBuf,
    /// Model checkpoint to evaluate.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Frame subsampling mode override {random|strided}.
    #[arg(long)]
    pub subsample: Option<String>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Per-depth training budget override.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Comma-separated adapter depths to compare.
    #[arg(long, default_value = "1,2,4")]
    pub depths: String,
    #[arg(long)]
    pub speech_checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub lm_checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Model checkpoint to decode with.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Instruction text, e.g. "recognize" or "translate lang_a lang_b".
    #[arg(long)]
    pub instruction: String,
    /// Utterance as space-separated vocabulary words.
    #[arg(long)]
    pub tokens: Option<String>,
    /// Alternative input: <corpus file>:<1-based line number>.
    #[arg(long)]
    pub corpus_line: Option<String>,
    /// Frame noise level; defaults to the config's data.noise_std.
    #[arg(long)]
    pub noise: Option<f64>,
    /// Frame rendering seed for --tokens input.
    #[arg(long, default_value_t = 0)]
    pub render_seed: u64,
}

// ── shared plumbing ──

fn effective_config(common: &CommonArgs) -> Result<Config> {
    let mut cfg = Config::load(&common.config)?;
    if let Some(s) = common.seed {
        cfg.set("seed", &s.to_string())?;
    }
    if let Some(p) = &common.precision {
        cfg.set("precision", p)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn apply_override(cfg: &mut Config, key: &str, value: Option<&String>) -> Result<()> {
    if let Some(v) = value {
        cfg.set(key, v)?;
        cfg.validate()?;
    }
    Ok(())
}

fn apply_steps(cfg: &mut Config, key: &str, steps: Option<usize>) -> Result<()> {
    if let Some(n) = steps {
        cfg.set(key, &n.to_string())?;
        cfg.validate()?;
    }
    Ok(())
}

fn prepare_run_dir(out: &Path, cfg: &Config) -> Result<()> {
    let reports = out.join("reports");
    std::fs::create_dir_all(&reports).map_err(|e| SlmError::io(&reports, e))?;
    let snap = out.join("config.snapshot");
    std::fs::write(&snap, cfg.snapshot()).map_err(|e| SlmError::io(&snap, e))
}

fn write_report(out: &Path, name: &str, text: &str) -> Result<()> {
    let path = out.join("reports").join(name);
    std::fs::write(&path, text).map_err(|e| SlmError::io(&path, e))
}

fn data_path(cfg: &Config, file: &str) -> PathBuf {
    Path::new(&cfg.data_dir).join(file)
}

fn load_corpus_file(cfg: &Config, file: &str) -> Result<Vec<TaskExample>> {
    corpus::load_examples(&data_path(cfg, file))
}

fn load_speechifier(cfg: &Config) -> Result<Speechifier> {
    Ok(corpus::load_meta(Path::new(&cfg.data_dir))?.speechifier)
}

/// Group a flat example list by task tag; empty groups are dropped.
fn to_mixture(examples: Vec<TaskExample>) -> MixtureDataset {
    let mut buckets: Vec<Vec<TaskExample>> = vec![Vec::new(), Vec::new(), Vec::new()];
    for ex in examples {
        let slot = match ex.task {
            TaskTag::Recognize => 0,
            TaskTag::Translate => 1,
            TaskTag::Instruct => 2,
        };
        buckets[slot].push(ex);
    }
    MixtureDataset { tasks: buckets.into_iter().filter(|b| !b.is_empty()).collect() }
}

fn load_mix_heldout(cfg: &Config) -> Result<Vec<TaskExample>> {
    let mut all = load_corpus_file(cfg, corpus::MIX_HELDOUT_RECOGNIZE)?;
    all.extend(load_corpus_file(cfg, corpus::MIX_HELDOUT_TRANSLATE)?);
    all.extend(load_corpus_file(cfg, corpus::MIX_HELDOUT_INSTRUCT)?);
    Ok(all)
}

fn load_backbone_pair<S: Scalar>(
    cfg: &Config,
    out: &Path,
    speech_override: &Option<PathBuf>,
    lm_override: &Option<PathBuf>,
) -> Result<(ParameterStore<S>, ParameterStore<S>)> {
    let speech_path = speech_override.clone().unwrap_or_else(|| out.join(SPEECH_BACKBONE));
    let lm_path = lm_override.clone().unwrap_or_else(|| out.join(LM_BACKBONE));
    // the pretraining artifact also holds the throwaway ASR decoder, so
    // register both before applying, then prune to the encoder
    let mut full = backbones::load_backbone::<S>(&speech_path, cfg, |st, rng, c| {
        register_speech_encoder(st, rng, c)?;
        backbones::register_asr_decoder(st, rng, c)
    })?;
    let speech = backbones::freeze_speech_encoder(&mut full);
    let mut lm = backbones::load_backbone::<S>(&lm_path, cfg, register_text_lm)?;
    lm.freeze_all();
    Ok((speech, lm))
}

fn sandwich_from_checkpoint<S: Scalar>(cfg: &Config, ckpt: &Path) -> Result<Sandwich<S>> {
    trainer::load_sandwich(cfg, ckpt)
}

macro_rules! dispatched {
    ($cfg:expr, $f:ident($($arg:expr),* $(,)?)) => {
        match $cfg.precision {
            Dtype::F32 => $f::<f32>($($arg),*),
            Dtype::F64 => $f::<f64>($($arg),*),
        }
    };
}

// ── commands ──

fn cmd_gen_corpus(args: &GenCorpusArgs) -> Result<()> {
    let cfg = effective_config(&args.common)?;
    let summary = corpus::generate(&cfg, &args.out)?;
    for (file, count) in &summary.files {
        println!("wrote {} examples to {}", count, args.out.join(file).display());
    }
    Ok(())
}

fn pretrain_speech_impl<S: Scalar>(cfg: &Config, out: &Path, steps: usize) -> Result<()> {
    let sp = load_speechifier(cfg)?;
    let examples = load_corpus_file(cfg, corpus::ASR_TRAIN)?;
    let outcome = backbones::pretrain_speech_encoder::<S>(cfg, &examples, &sp, steps)?;
    for (i, loss) in outcome.history.iter().enumerate() {
        trainer::append_metrics(Some(out), &format!("stage=pretrain_speech step={i} loss={loss}"))?;
    }
    let path = out.join(SPEECH_BACKBONE);
    backbones::save_backbone(&path, &outcome.store, cfg, &outcome.history)?;
    println!(
        "pretrained speech encoder for {} steps, final smoothed loss {}",
        outcome.history.len(),
        smoothed_loss(&outcome.history, outcome.history.len().saturating_sub(1)),
    );
    let heldout = load_corpus_file(cfg, corpus::ASR_HELDOUT)?;
    let acc = backbones::speech_token_accuracy(&outcome.store, cfg, &heldout, &sp)?;
    println!("heldout_token_accuracy={acc}");
    println!("saved {}", path.display());
    Ok(())
}

fn cmd_pretrain_speech(args: &PretrainArgs) -> Result<()> {
    let mut cfg = effective_config(&args.common)?;
    apply_steps(&mut cfg, "pretrain.speech_steps", args.steps)?;
    prepare_run_dir(&args.out, &cfg)?;
    dispatched!(cfg, pretrain_speech_impl(&cfg, &args.out, cfg.pretrain_speech_steps))
}

fn pretrain_lm_impl<S: Scalar>(cfg: &Config, out: &Path, steps: usize) -> Result<()> {
    let examples = load_corpus_file(cfg, corpus::LM_TRAIN)?;
    let outcome = backbones::pretrain_text_lm::<S>(cfg, &examples, steps)?;
    for (i, loss) in outcome.history.iter().enumerate() {
        trainer::append_metrics(Some(out), &format!("stage=pretrain_lm step={i} loss={loss}"))?;
    }
    let path = out.join(LM_BACKBONE);
    backbones::save_backbone(&path, &outcome.store, cfg, &outcome.history)?;
    println!(
        "pretrained text LM for {} steps, final smoothed loss {}",
        outcome.history.len(),
        smoothed_loss(&outcome.history, outcome.history.len().saturating_sub(1)),
    );
    let heldout = load_corpus_file(cfg, corpus::LM_HELDOUT)?;
    let acc = backbones::lm_exact_match(&outcome.store, cfg, &heldout)?;
    println!("heldout_exact_match={acc}");
    println!("saved {}", path.display());
    Ok(())
}

fn cmd_pretrain_lm(args: &PretrainArgs) -> Result<()> {
    let mut cfg = effective_config(&args.common)?;
    apply_steps(&mut cfg, "pretrain.lm_steps", args.steps)?;
    prepare_run_dir(&args.out, &cfg)?;
    dispatched!(cfg, pretrain_lm_impl(&cfg, &args.out, cfg.pretrain_lm_steps))
}

fn train_impl<S: Scalar>(cfg: &Config, args: &TrainArgs) -> Result<()> {
    let sp = load_speechifier(cfg)?;
    let dataset = to_mixture(load_corpus_file(cfg, corpus::MIX_TRAIN)?);
    let heldout = load_mix_heldout(cfg)?;
    let (speech, lm) =
        load_backbone_pair::<S>(cfg, &args.out, &args.speech_checkpoint, &args.lm_checkpoint)?;
    let mut sw = Sandwich::assemble(cfg, &speech, &lm)?;
    let (mut adam, start_step) = match &args.checkpoint {
        Some(path) => trainer::load_train_checkpoint(path, &mut sw)?,
        None => (Adam::new(cfg.lr), 0),
    };
    let record = trainer::train(
        &mut sw,
        &sp,
        &dataset,
        &heldout,
        &mut adam,
        start_step,
        cfg.train_steps,
        Some(&args.out),
    )?;
    if start_step >= cfg.train_steps {
        // zero remaining steps: still leave a decodable artifact behind
        trainer::save_train_checkpoint(&args.out, &sw, &adam, start_step)?;
        println!("no steps to run, wrote checkpoint at step {start_step}");
        return Ok(());
    }
    println!(
        "trained steps {}..{}, final smoothed loss {}",
        start_step,
        cfg.train_steps,
        record.smoothed(cfg.train_steps - 1),
    );
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let mut cfg = effective_config(&args.common)?;
    apply_steps(&mut cfg, "train.steps", args.steps)?;
    apply_override(&mut cfg, "train.mask", args.mask.as_ref())?;
    apply_override(&mut cfg, "train.subsample", args.subsample.as_ref())?;
    prepare_run_dir(&args.out, &cfg)?;
    dispatched!(cfg, train_impl(&cfg, args))
}

fn finetune_impl<S: Scalar>(cfg: &Config, args: &FinetuneArgs) -> Result<()> {
    let sp = load_speechifier(cfg)?;
    let dataset = to_mixture(load_corpus_file(cfg, corpus::BIAS_FINETUNE)?);
    let heldout = load_corpus_file(cfg, corpus::BIAS_WO_PREFIX)?;
    let mut sw = sandwich_from_checkpoint::<S>(cfg, &args.checkpoint)?;
    let record =
        trainer::finetune(&mut sw, &sp, &dataset, &heldout, cfg.train_steps, Some(&args.out))?;
    if cfg.train_steps == 0 {
        trainer::save_train_checkpoint(&args.out, &sw, &Adam::new(cfg.lr), 0)?;
        println!("no steps to run, wrote checkpoint at step 0");
        return Ok(());
    }
    println!(
        "finetuned for {} steps, final smoothed loss {}",
        cfg.train_steps,
        record.smoothed(cfg.train_steps - 1),
    );
    Ok(())
}

fn cmd_finetune(args: &FinetuneArgs) -> Result<()> {
    let mut cfg = effective_config(&args.common)?;
    apply_steps(&mut cfg, "train.steps", args.steps)?;
    apply_override(&mut cfg, "train.mask", args.mask.as_ref())?;
    apply_override(&mut cfg, "train.subsample", args.subsample.as_ref())?;
    prepare_run_dir(&args.out, &cfg)?;
    dispatched!(cfg, finetune_impl(&cfg, args))
}

fn eval_impl<S: Scalar>(cfg: &Config, args: &EvalArgs) -> Result<()> {
    let sp = load_speechifier(cfg)?;
    let sw = sandwich_from_checkpoint::<S>(cfg, &args.checkpoint)?;
    let norm = Normalizer::standard();
    let sets: [(&str, &str, MetricKind, &str); 4] = [
        ("recognize", corpus::MIX_HELDOUT_RECOGNIZE, MetricKind::Wer, "eval_recognize.txt"),
        ("translate", corpus::MIX_HELDOUT_TRANSLATE, MetricKind::Bleu, "eval_translate.txt"),
        ("instruct", corpus::MIX_HELDOUT_INSTRUCT, MetricKind::ExactMatch, "eval_instruct.txt"),
        ("qa", corpus::QA_HELDOUT, MetricKind::ExactMatch, "eval_qa.txt"),
    ];
    for (task, file, metric, report_name) in sets {
        let examples = load_corpus_file(cfg, file)?;
        let report = evaluate_model(&sw, &sp, &examples, task, metric, &norm)?;
        write_report(&args.out, report_name, &report.to_text())?;
        println!(
            "task={} metric={} value={} corpus_size={}",
            report.task, report.metric, report.value, report.corpus_size
        );
    }
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let mut cfg = effective_config(&args.common)?;
    apply_override(&mut cfg, "train.subsample", args.subsample.as_ref())?;
    prepare_run_dir(&args.out, &cfg)?;
    dispatched!(cfg, eval_impl(&cfg, args))
}

fn bias_eval_impl<S: Scalar>(cfg: &Config, args: &EvalArgs) -> Result<()> {
    let sp = load_speechifier(cfg)?;
    let sw = sandwich_from_checkpoint::<S>(cfg, &args.checkpoint)?;
    let entities_path = data_path(cfg, corpus::BIAS_ENTITIES);
    let text = std::fs::read_to_string(&entities_path)
        .map_err(|e| SlmError::io(&entities_path, e))?;
    let entities = corpus::parse_entities(&text)?;
    let db = biasing::build_database(&entities, &sw, &sp)?;
    let splits = vec![
        (BiasSplit::WoPrefix, load_corpus_file(cfg, corpus::BIAS_WO_PREFIX)?),
        (BiasSplit::WPrefix, load_corpus_file(cfg, corpus::BIAS_W_PREFIX)?),
        (BiasSplit::Anti, load_corpus_file(cfg, corpus::BIAS_ANTI)?),
    ];
    let pairs = biasing::evaluate_biasing(&sw, &sp, &splits, &db, &Normalizer::standard())?;
    for pair in &pairs {
        write_report(&args.out, &format!("bias_{}_asr.txt", pair.split), &pair.asr.to_text())?;
        write_report(&args.out, &format!("bias_{}_c_asr.txt", pair.split), &pair.c_asr.to_text())?;
        println!(
            "split={} asr_wer={} c_asr_wer={} relative_change={}",
            pair.split, pair.asr.value, pair.c_asr.value, pair.relative_change
        );
    }
    Ok(())
}

fn cmd_bias_eval(args: &EvalArgs) -> Result<()> {
    let mut cfg = effective_config(&args.common)?;
    apply_override(&mut cfg, "train.subsample", args.subsample.as_ref())?;
    prepare_run_dir(&args.out, &cfg)?;
    dispatched!(cfg, bias_eval_impl(&cfg, args))
}

fn parse_depths(s: &str) -> Result<Vec<usize>> {
    let out: Vec<usize> = s
        .split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| SlmError::Config(format!("bad depth {p:?} in --depths")))
        })
        .collect::<Result<_>>()?;
    if out.is_empty() {
        return Err(SlmError::Config("--depths is empty".into()));
    }
    Ok(out)
}

fn ablate_impl<S: Scalar>(cfg: &Config, args: &AblateArgs, depths: &[usize]) -> Result<()> {
    let sp = load_speechifier(cfg)?;
    let dataset = to_mixture(load_corpus_file(cfg, corpus::MIX_TRAIN)?);
    let heldout = load_mix_heldout(cfg)?;
    let (speech, lm) =
        load_backbone_pair::<S>(cfg, &args.out, &args.speech_checkpoint, &args.lm_checkpoint)?;
    let outcomes = trainer::ablate_depth(
        cfg,
        &speech,
        &lm,
        &sp,
        &dataset,
        &heldout,
        depths,
        cfg.train_steps,
    )?;
    let mut table = String::new();
    for o in &outcomes {
        let line = format!("depth={} heldout_loss={}", o.depth, o.final_heldout_loss);
        println!("{line}");
        table.push_str(&line);
        table.push('\n');
    }
    write_report(&args.out, "ablate_depth.txt", &table)
}

fn cmd_ablate(args: &AblateArgs) -> Result<()> {
    let mut cfg = effective_config(&args.common)?;
    apply_steps(&mut cfg, "train.steps", args.steps)?;
    let depths = parse_depths(&args.depths)?;
    prepare_run_dir(&args.out, &cfg)?;
    dispatched!(cfg, ablate_impl(&cfg, args, &depths))
}

const CORRUPTION_RATES: [f64; 4] = [0.0, 0.1, 0.2, 0.4];

fn cascade_impl<S: Scalar>(cfg: &Config, args: &EvalArgs) -> Result<()> {
    let sp = load_speechifier(cfg)?;
    let sw = sandwich_from_checkpoint::<S>(cfg, &args.checkpoint)?;
    let examples = load_corpus_file(cfg, corpus::MIX_HELDOUT_TRANSLATE)?;
    let norm = Normalizer::standard();

    let model_run = run_cascade(&sw, &sp, &examples, CascadeOptions::clean(false), &norm)?;
    write_report(&args.out, "cascade.txt", &model_run.to_text())?;
    println!(
        "end_to_end_bleu={} cascade_bleu={} transcript_wer={}",
        model_run.end_to_end_bleu(),
        model_run.cascade_bleu(),
        model_run.transcript_wer()
    );

    // controlled corruption over oracle transcripts isolates how transcript
    // errors propagate through the second stage
    let mut table = String::new();
    for rate in CORRUPTION_RATES {
        let opts = CascadeOptions {
            oracle_transcripts: true,
            corruption_rate: rate,
            corruption_seed: cfg.seed,
        };
        let res = run_cascade(&sw, &sp, &examples, opts, &norm)?;
        let line = format!(
            "rate={} cascade_bleu={} transcript_wer={}",
            rate,
            res.cascade_bleu(),
            res.transcript_wer()
        );
        println!("{line}");
        table.push_str(&line);
        table.push('\n');
    }
    write_report(&args.out, "cascade_corruption.txt", &table)
}

fn cmd_cascade(args: &EvalArgs) -> Result<()> {
    let mut cfg = effective_config(&args.common)?;
    apply_override(&mut cfg, "train.subsample", args.subsample.as_ref())?;
    prepare_run_dir(&args.out, &cfg)?;
    dispatched!(cfg, cascade_impl(&cfg, args))
}

fn generate_impl<S: Scalar>(cfg: &Config, args: &GenerateArgs) -> Result<()> {
    let sp = load_speechifier(cfg)?;
    let sw = sandwich_from_checkpoint::<S>(cfg, &args.checkpoint)?;
    let instruction = vocab::tokenize(&args.instruction)?;
    let frames = match (&args.tokens, &args.corpus_line) {
        (Some(text), None) => {
            let tokens = vocab::tokenize(text)?;
            sp.speechify_at(&tokens, args.render_seed, args.noise.unwrap_or(cfg.noise_std))?
        }
        (None, Some(spec)) => {
            let (file, lineno) = spec.rsplit_once(':').ok_or_else(|| {
                SlmError::Config(format!("--corpus-line wants <file>:<line>, got {spec:?}"))
            })?;
            let lineno: usize = lineno
                .parse()
                .map_err(|_| SlmError::Config(format!("bad line number in {spec:?}")))?;
            if lineno == 0 {
                return Err(SlmError::Config("--corpus-line line numbers start at 1".into()));
            }
            let text =
                std::fs::read_to_string(file).map_err(|e| SlmError::io(file, e))?;
            let line = text.lines().nth(lineno - 1).ok_or_else(|| {
                SlmError::Config(format!("{file} has no line {lineno}"))
            })?;
            let ex = corpus::parse_example_line(line)?;
            ex.speech.materialize(&sp, args.noise.unwrap_or(ex.noise_std))?
        }
        _ => {
            return Err(SlmError::Config(
                "pass exactly one of --tokens or --corpus-line".into(),
            ))
        }
    };
    let out = sw.generate(&instruction, &frames, metrics::MAX_GENERATION_LEN)?;
    println!("{}", vocab::detokenize(&out)?);
    Ok(())
}

fn cmd_generate(args: &GenerateArgs) -> Result<()> {
    let cfg = effective_config(&args.common)?;
    dispatched!(cfg, generate_impl(&cfg, args))
}

// ── entry ──

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.cmd {
        Cmd::GenCorpus(a) => cmd_gen_corpus(a),
        Cmd::PretrainSpeech(a) => cmd_pretrain_speech(a),
        Cmd::PretrainLm(a) => cmd_pretrain_lm(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Finetune(a) => cmd_finetune(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::BiasEval(a) => cmd_bias_eval(a),
        Cmd::AblateDepth(a) => cmd_ablate(a),
        Cmd::Cascade(a) => cmd_cascade(a),
        Cmd::Generate(a) => cmd_generate(a),
    }
}

/// Parse argv (argv[0] included) and run; returns the process exit code.
pub fn main_from_args<I>(args: I) -> i32
where
    I: IntoIterator<Item = String>,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            eprint!("{e}");
            return 1;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err}");
            err.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(v: &[&str]) -> Vec<String> {
        std::iter::once("slm").chain(v.iter().copied()).map(String::from).collect()
    }

    #[test]
    fn unknown_subcommand_and_missing_flags_are_usage_errors() {
        assert_eq!(main_from_args(args(&["frobnicate"])), 1);
        assert_eq!(main_from_args(args(&["train"])), 1);
        assert_eq!(main_from_args(args(&["--help"])), 0);
    }

    #[test]
    fn missing_config_file_exits_io() {
        let code = main_from_args(args(&[
            "gen-corpus",
            "--config",
            "/nonexistent/path.cfg",
            "--out",
            "/tmp/never_created_slm",
        ]));
        assert_eq!(code, 3);
    }

    #[test]
    fn bad_config_key_exits_one() {
        let dir = tempfile::tempdir().unwrap();
        let cfg_path = dir.path().join("c.cfg");
        std::fs::write(&cfg_path, "no_such_key=1\n").unwrap();
        let code = main_from_args(args(&[
            "gen-corpus",
            "--config",
            cfg_path.to_str().unwrap(),
            "--out",
            dir.path().join("corpus").to_str().unwrap(),
        ]));
        assert_eq!(code, 1);
    }

    #[test]
    fn depth_list_parses_and_rejects_garbage() {
        assert_eq!(parse_depths("1,2,4").unwrap(), vec![1, 2, 4]);
        assert_eq!(parse_depths(" 3 ").unwrap(), vec![3]);
        assert!(parse_depths("1,x").is_err());
        assert!(parse_depths("").is_err());
    }

    #[test]
    fn mixture_grouping_preserves_counts_and_drops_empty_tasks() {
        use crate::tasks;
        let utts = vec![vec![24, 25], vec![26, 27]];
        let mut all = tasks::make_recognition_task(&utts, 1, 0.1, 1, "a");
        let w = tasks::ToyWorld::generate(3);
        all.extend(tasks::make_translation_task(&utts, &w, 1, 0.1, 1, "b"));
        let mix = to_mixture(all);
        assert_eq!(mix.tasks.len(), 2);
        assert_eq!(mix.total(), 4);
    }
}
