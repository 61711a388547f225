//! Corpus files on disk.
//!
//! A corpus directory holds one `meta.json` (the speechifier prototype
//! table, cipher, fact table, entities and carriers) plus line-delimited
//! example files: one JSON object per line, no header. Speech ships in
//! recipe form wherever possible; recipes regenerate frames bit-exactly
//! because rendering is f64 end to end and JSON round-trips f64 exactly.

use crate::config::Config;
use crate::error::{Result, SlmError};
use crate::rng::{derive_seed, SeededRng};
use crate::speechify::Speechifier;
use crate::tasks::{self, BiasSplit, SpeechSource, TaskExample, ToyWorld, ADAPTER_FAMILIES};
use crate::vocab;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const META: &str = "meta.json";
pub const ASR_TRAIN: &str = "asr_train.jsonl";
pub const ASR_HELDOUT: &str = "asr_heldout.jsonl";
pub const LM_TRAIN: &str = "lm_train.jsonl";
pub const LM_HELDOUT: &str = "lm_heldout.jsonl";
pub const MIX_TRAIN: &str = "mix_train.jsonl";
pub const MIX_HELDOUT_RECOGNIZE: &str = "mix_heldout_recognize.jsonl";
pub const MIX_HELDOUT_TRANSLATE: &str = "mix_heldout_translate.jsonl";
pub const MIX_HELDOUT_INSTRUCT: &str = "mix_heldout_instruct.jsonl";
pub const QA_HELDOUT: &str = "qa_heldout.jsonl";
pub const BIAS_ENTITIES: &str = "bias_entities.txt";
pub const BIAS_WO_PREFIX: &str = "bias_wo_prefix.jsonl";
pub const BIAS_W_PREFIX: &str = "bias_w_prefix.jsonl";
pub const BIAS_ANTI: &str = "bias_anti.jsonl";
pub const BIAS_FINETUNE: &str = "bias_finetune.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusMeta {
    pub speechifier: Speechifier,
    pub world: ToyWorld,
}

// ── single-line / single-file codecs (fuzz-facing, panic-free) ──

/// Parse one example line, validating every token id and shape.
pub fn parse_example_line(line: &str) -> Result<TaskExample> {
    let ex: TaskExample =
        serde_json::from_str(line).map_err(|e| SlmError::Corpus(format!("bad example line: {e}")))?;
    validate_example(&ex)?;
    Ok(ex)
}

fn check_tokens(what: &str, tokens: &[u32]) -> Result<()> {
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= vocab::VOCAB_SIZE) {
        return Err(SlmError::Corpus(format!("{what} token id {bad} out of range")));
    }
    Ok(())
}

pub fn validate_example(ex: &TaskExample) -> Result<()> {
    check_tokens("instruction", &ex.instruction)?;
    check_tokens("target", &ex.target)?;
    if ex.target.is_empty() {
        return Err(SlmError::Corpus("example has empty target".into()));
    }
    if !ex.noise_std.is_finite() || ex.noise_std < 0.0 {
        return Err(SlmError::Corpus("example noise level must be finite and non-negative".into()));
    }
    match &ex.speech {
        SpeechSource::Recipe { tokens, .. } => {
            check_tokens("speech recipe", tokens)?;
            if tokens.is_empty() {
                return Err(SlmError::Corpus("speech recipe has no tokens".into()));
            }
        }
        SpeechSource::Frames(fs) => {
            if fs.dim == 0 || fs.frames.len() % fs.dim != 0 {
                return Err(SlmError::Corpus(format!(
                    "frame buffer of {} values is not a multiple of dim {}",
                    fs.frames.len(),
                    fs.dim
                )));
            }
            if fs.frames.is_empty() {
                return Err(SlmError::Corpus("inline frames are empty".into()));
            }
            if !fs.frames.iter().all(|x| x.is_finite()) {
                return Err(SlmError::Corpus("inline frames contain non-finite values".into()));
            }
        }
    }
    Ok(())
}

/// Parse an entity-list file: one whitespace-tokenized entity per line,
/// blank lines ignored.
pub fn parse_entities(text: &str) -> Result<Vec<Vec<u32>>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let tokens = vocab::tokenize(line)
            .map_err(|e| SlmError::Corpus(format!("entity line {}: {e}", lineno + 1)))?;
        if tokens.is_empty() {
            continue;
        }
        out.push(tokens);
    }
    if out.is_empty() {
        return Err(SlmError::Corpus("entity list is empty".into()));
    }
    Ok(out)
}

pub fn save_examples(path: &Path, examples: &[TaskExample]) -> Result<()> {
    let mut buf = Vec::new();
    for ex in examples {
        serde_json::to_writer(&mut buf, ex).map_err(|e| SlmError::Corpus(e.to_string()))?;
        buf.push(b'\n');
    }
    std::fs::write(path, buf).map_err(|e| SlmError::io(path, e))
}

pub fn load_examples(path: &Path) -> Result<Vec<TaskExample>> {
    let text = std::fs::read_to_string(path).map_err(|e| SlmError::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let ex = parse_example_line(line)
            .map_err(|e| SlmError::Corpus(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        out.push(ex);
    }
    if out.is_empty() {
        return Err(SlmError::Corpus(format!("{}: empty corpus file", path.display())));
    }
    Ok(out)
}

pub fn save_meta(dir: &Path, meta: &CorpusMeta) -> Result<()> {
    let path = dir.join(META);
    let text = serde_json::to_string_pretty(meta).map_err(|e| SlmError::Corpus(e.to_string()))?;
    std::fs::write(&path, text).map_err(|e| SlmError::io(&path, e))
}

pub fn load_meta(dir: &Path) -> Result<CorpusMeta> {
    let path = dir.join(META);
    let text = std::fs::read_to_string(&path).map_err(|e| SlmError::io(&path, e))?;
    let meta: CorpusMeta =
        serde_json::from_str(&text).map_err(|e| SlmError::Corpus(format!("bad corpus meta: {e}")))?;
    if meta.speechifier.frame_dim == 0
        || meta.speechifier.prototypes.len() != vocab::VOCAB_SIZE * meta.speechifier.frame_dim
    {
        return Err(SlmError::Corpus("corpus meta: malformed prototype table".into()));
    }
    Ok(meta)
}

// ── generation ──

/// Per-file example counts reported by `generate`.
#[derive(Debug)]
pub struct CorpusSummary {
    pub files: Vec<(String, usize)>,
}

/// Text-form counterpart of a spoken example set: same instructions and
/// targets, but the LM pretrainer reads the recipe tokens as literal text.
fn text_tasks_for(utts: &[Vec<u32>], world: &ToyWorld, seed: u64, label: &str) -> Result<Vec<TaskExample>> {
    let mut out = Vec::new();
    out.extend(tasks::make_recognition_task(utts, 1, 0.0, seed, &format!("{label}.copy")));
    out.extend(tasks::make_translation_task(utts, world, 1, 0.0, seed, &format!("{label}.cipher")));
    out.extend(tasks::make_instruction_task(
        utts,
        world,
        &ADAPTER_FAMILIES,
        0.0,
        seed,
        &format!("{label}.instruct"),
    )?);
    Ok(out)
}

/// Build the full corpus directory. Pure function of (config, seed): the
/// same inputs write byte-identical files.
pub fn generate(cfg: &Config, out_dir: &Path) -> Result<CorpusSummary> {
    std::fs::create_dir_all(out_dir).map_err(|e| SlmError::io(out_dir, e))?;
    let seed = cfg.seed;
    let world = ToyWorld::generate(seed);
    let speechifier = Speechifier::generate(
        cfg.speech_frame_dim,
        cfg.frames_per_token_min,
        cfg.frames_per_token_max,
        cfg.noise_std,
        derive_seed(seed, "prototypes", 0),
    );
    save_meta(out_dir, &CorpusMeta { speechifier, world: world.clone() })?;

    let mut rng = SeededRng::derived(seed, "utterances", 0);
    let utts = tasks::generate_utterances(cfg.utterances, cfg.utt_len_min, cfg.utt_len_max, &mut rng);
    let heldout_n = (cfg.utterances / 8).max(1);
    let (train_utts, heldout_utts) = utts.split_at(utts.len() - heldout_n);

    let noise = cfg.noise_std;
    let bias_noise = cfg.bias_noise_std;
    let mut summary = CorpusSummary { files: Vec::new() };
    let mut write = |name: &str, examples: Vec<TaskExample>| -> Result<()> {
        save_examples(&out_dir.join(name), &examples)?;
        summary.files.push((name.to_string(), examples.len()));
        Ok(())
    };

    // speech-encoder pretraining: wide acoustic variant coverage
    write(ASR_TRAIN, tasks::make_recognition_task(train_utts, 8, noise, seed, "asr_train"))?;
    write(ASR_HELDOUT, tasks::make_recognition_task(heldout_utts, 2, noise, seed, "asr_heldout"))?;

    // LM pretraining: text-form tasks incl. the families withheld from
    // adapter training (lookup-QA, mention correction)
    let qa_repeats = (train_utts.len() / tasks::NUM_FACTS).max(1);
    let mut lm_train = text_tasks_for(train_utts, &world, seed, "lm_train")?;
    lm_train.extend(tasks::make_qa_task(&world, qa_repeats, 0.0, seed, "lm_train.qa"));
    lm_train.extend(tasks::make_mention_task(2 * train_utts.len(), 0.0, seed, "lm_train.mention"));
    write(LM_TRAIN, lm_train)?;

    let mut lm_heldout = text_tasks_for(heldout_utts, &world, seed, "lm_heldout")?;
    lm_heldout.extend(tasks::make_qa_task(&world, 2, 0.0, seed, "lm_heldout.qa"));
    lm_heldout.extend(tasks::make_mention_task(64, 0.0, seed, "lm_heldout.mention"));
    write(LM_HELDOUT, lm_heldout)?;

    // adapter-training mixture: recognize + translate + instruct, QA and
    // mention families deliberately absent
    let mut mix = tasks::make_recognition_task(train_utts, 2, noise, seed, "mix.recognize");
    mix.extend(tasks::make_translation_task(train_utts, &world, 2, noise, seed, "mix.translate"));
    mix.extend(tasks::make_instruction_task(
        train_utts,
        &world,
        &ADAPTER_FAMILIES,
        noise,
        seed,
        "mix.instruct",
    )?);
    write(MIX_TRAIN, mix)?;

    write(
        MIX_HELDOUT_RECOGNIZE,
        tasks::make_recognition_task(heldout_utts, 2, noise, seed, "mixh.recognize"),
    )?;
    write(
        MIX_HELDOUT_TRANSLATE,
        tasks::make_translation_task(heldout_utts, &world, 2, noise, seed, "mixh.translate"),
    )?;
    write(
        MIX_HELDOUT_INSTRUCT,
        tasks::make_instruction_task(heldout_utts, &world, &ADAPTER_FAMILIES, noise, seed, "mixh.instruct")?,
    )?;

    // zero-shot probe: spoken queries for a task family the adapter never saw
    write(QA_HELDOUT, tasks::make_qa_task(&world, 4, noise, seed, "qa_heldout"))?;

    // biasing: entity list, eval splits at the harder noise level, and a
    // fine-tune corpus over fresh utterance instances
    let entity_path = out_dir.join(BIAS_ENTITIES);
    let mut entity_text = String::new();
    for e in &world.entities {
        entity_text.push_str(&vocab::detokenize(e)?);
        entity_text.push('\n');
    }
    std::fs::write(&entity_path, entity_text).map_err(|e| SlmError::io(&entity_path, e))?;

    write(BIAS_WO_PREFIX, tasks::make_bias_split(&world, BiasSplit::WoPrefix, 64, bias_noise, seed, "bias.wo"))?;
    write(BIAS_W_PREFIX, tasks::make_bias_split(&world, BiasSplit::WPrefix, 64, bias_noise, seed, "bias.w"))?;
    write(BIAS_ANTI, tasks::make_bias_split(&world, BiasSplit::Anti, 64, bias_noise, seed, "bias.anti"))?;

    let mut ft = tasks::make_bias_split(&world, BiasSplit::WoPrefix, 128, bias_noise, seed, "bias.ft.wo");
    ft.extend(tasks::make_bias_split(&world, BiasSplit::WPrefix, 128, bias_noise, seed, "bias.ft.w"));
    // fine-tuning runs with the mention clause present, mirroring how the
    // model is prompted at biasing evaluation time
    for ex in &mut ft {
        let entity = ex.target[ex.target.len() - tasks::MENTION_LEN..].to_vec();
        ex.instruction = tasks::bias_prompt(Some(&entity));
    }
    write(BIAS_FINETUNE, ft)?;

    Ok(summary)
}
