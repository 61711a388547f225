//! Run configuration.
//!
//! A config is a flat key=value text file with dotted keys; `#` starts a
//! comment line. Files list only the keys they override; everything else
//! keeps its default. `snapshot` renders the full effective config with
//! keys sorted, and the architecture fingerprint hashes the subset of
//! keys that must match between a checkpoint and the model loading it.

use crate::error::{Result, SlmError};
use crate::scalar::Dtype;
use sha2::{Digest, Sha256};
use std::fmt;
use std::path::Path;

/// Which parameter groups an adapter-training run updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMask {
    AdapterOnly,
    AdapterPlusLmEncoder,
    All,
}

impl TrainMask {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "adapter_only" => Ok(TrainMask::AdapterOnly),
            "adapter_plus_lm_encoder" => Ok(TrainMask::AdapterPlusLmEncoder),
            "all" => Ok(TrainMask::All),
            _ => Err(SlmError::Config(format!("unknown mask {s:?}"))),
        }
    }

    /// Name prefixes of the tensors this mask trains.
    pub fn prefixes(self) -> &'static [&'static str] {
        match self {
            TrainMask::AdapterOnly => &["adapter."],
            TrainMask::AdapterPlusLmEncoder => &["adapter.", "text_lm.encoder."],
            TrainMask::All => &[""],
        }
    }
}

impl fmt::Display for TrainMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainMask::AdapterOnly => "adapter_only",
            TrainMask::AdapterPlusLmEncoder => "adapter_plus_lm_encoder",
            TrainMask::All => "all",
        })
    }
}

/// Frame-rate reduction mode at the adapter input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubsampleMode {
    /// Seeded random discard; training default, acts as a regularizer.
    Random,
    /// Every r-th frame; deterministic, evaluation default.
    Strided,
}

impl SubsampleMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(SubsampleMode::Random),
            "strided" => Ok(SubsampleMode::Strided),
            _ => Err(SlmError::Config(format!("unknown subsample mode {s:?}"))),
        }
    }
}

impl fmt::Display for SubsampleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SubsampleMode::Random => "random",
            SubsampleMode::Strided => "strided",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub precision: Dtype,
    pub seed: u64,

    pub speech_frame_dim: usize,
    pub speech_width: usize,
    pub speech_layers: usize,
    pub speech_heads: usize,
    /// Positional-table capacity in frames; inputs longer than this are rejected.
    pub speech_max_len: usize,

    pub lm_width: usize,
    pub lm_layers: usize,
    pub lm_heads: usize,
    pub vocab_size: usize,
    /// Positional-table capacity in prompt rows (shared by encoder and decoder).
    pub lm_max_len: usize,

    pub adapter_layers: usize,
    pub adapter_heads: usize,
    pub subsample_rate: usize,

    pub lr: f64,
    pub batch_size: usize,
    pub train_steps: usize,
    pub checkpoint_every: usize,
    /// Held-out loss cadence in steps; 0 disables periodic evaluation.
    pub eval_every: usize,
    pub mask: TrainMask,
    pub subsample: SubsampleMode,

    pub pretrain_lr: f64,
    pub pretrain_speech_steps: usize,
    pub pretrain_lm_steps: usize,

    pub utterances: usize,
    pub noise_std: f64,
    pub bias_noise_std: f64,
    pub utt_len_min: usize,
    pub utt_len_max: usize,
    pub frames_per_token_min: usize,
    pub frames_per_token_max: usize,

    /// Corpus directory the pipeline commands read from; relative paths
    /// resolve against the working directory.
    pub data_dir: String,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            precision: Dtype::F32,
            seed: 42,
            speech_frame_dim: 16,
            speech_width: 64,
            speech_layers: 2,
            speech_heads: 4,
            speech_max_len: 96,
            lm_width: 96,
            lm_layers: 2,
            lm_heads: 4,
            vocab_size: 32,
            lm_max_len: 64,
            adapter_layers: 2,
            adapter_heads: 4,
            subsample_rate: 4,
            lr: 3e-4,
            batch_size: 16,
            train_steps: 5000,
            checkpoint_every: 1000,
            eval_every: 500,
            mask: TrainMask::AdapterOnly,
            subsample: SubsampleMode::Random,
            pretrain_lr: 1e-3,
            pretrain_speech_steps: 3000,
            pretrain_lm_steps: 3000,
            utterances: 512,
            noise_std: 0.1,
            bias_noise_std: 0.5,
            utt_len_min: 2,
            utt_len_max: 12,
            frames_per_token_min: 3,
            frames_per_token_max: 6,
            data_dir: "corpus".to_string(),
        }
    }
}

impl Config {
    /// Apply one `key=value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| SlmError::Config(format!("key {key:?}: invalid {what} {value:?}"));
        macro_rules! num {
            ($ty:ty, $what:expr) => {
                value.parse::<$ty>().map_err(|_| bad($what))?
            };
        }
        match key {
            "precision" => self.precision = Dtype::parse(value)?,
            "seed" => self.seed = num!(u64, "integer"),
            "speech_encoder.frame_dim" => self.speech_frame_dim = num!(usize, "integer"),
            "speech_encoder.width" => self.speech_width = num!(usize, "integer"),
            "speech_encoder.layers" => self.speech_layers = num!(usize, "integer"),
            "speech_encoder.heads" => self.speech_heads = num!(usize, "integer"),
            "speech_encoder.max_len" => self.speech_max_len = num!(usize, "integer"),
            "text_lm.width" => self.lm_width = num!(usize, "integer"),
            "text_lm.layers" => self.lm_layers = num!(usize, "integer"),
            "text_lm.heads" => self.lm_heads = num!(usize, "integer"),
            "text_lm.vocab_size" => self.vocab_size = num!(usize, "integer"),
            "text_lm.max_len" => self.lm_max_len = num!(usize, "integer"),
            "adapter.num_layers" => self.adapter_layers = num!(usize, "integer"),
            "adapter.heads" => self.adapter_heads = num!(usize, "integer"),
            "adapter.subsample_rate" => self.subsample_rate = num!(usize, "integer"),
            "train.lr" => self.lr = num!(f64, "number"),
            "train.batch_size" => self.batch_size = num!(usize, "integer"),
            "train.steps" => self.train_steps = num!(usize, "integer"),
            "train.checkpoint_every" => self.checkpoint_every = num!(usize, "integer"),
            "train.eval_every" => self.eval_every = num!(usize, "integer"),
            "train.mask" => self.mask = TrainMask::parse(value)?,
            "train.subsample" => self.subsample = SubsampleMode::parse(value)?,
            "pretrain.lr" => self.pretrain_lr = num!(f64, "number"),
            "pretrain.speech_steps" => self.pretrain_speech_steps = num!(usize, "integer"),
            "pretrain.lm_steps" => self.pretrain_lm_steps = num!(usize, "integer"),
            "data.dir" => self.data_dir = value.to_string(),
            "data.utterances" => self.utterances = num!(usize, "integer"),
            "data.noise_std" => self.noise_std = num!(f64, "number"),
            "data.bias_noise_std" => self.bias_noise_std = num!(f64, "number"),
            "data.utt_len_min" => self.utt_len_min = num!(usize, "integer"),
            "data.utt_len_max" => self.utt_len_max = num!(usize, "integer"),
            "data.frames_per_token_min" => self.frames_per_token_min = num!(usize, "integer"),
            "data.frames_per_token_max" => self.frames_per_token_max = num!(usize, "integer"),
            _ => return Err(SlmError::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Parse config text over the defaults. Duplicate keys are an error.
    pub fn parse_str(text: &str) -> Result<Config> {
        let mut cfg = Config::default();
        let mut seen: Vec<String> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                SlmError::Config(format!("line {}: expected key=value", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            if seen.iter().any(|k| k == key) {
                return Err(SlmError::Config(format!(
                    "line {}: duplicate key {key:?}",
                    lineno + 1
                )));
            }
            cfg.set(key, value)?;
            seen.push(key.to_string());
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path).map_err(|e| SlmError::io(path, e))?;
        Config::parse_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(SlmError::Config(msg));
        let dims = [
            ("speech_encoder.frame_dim", self.speech_frame_dim),
            ("speech_encoder.width", self.speech_width),
            ("speech_encoder.max_len", self.speech_max_len),
            ("text_lm.width", self.lm_width),
            ("text_lm.max_len", self.lm_max_len),
            ("adapter.subsample_rate", self.subsample_rate),
            ("train.batch_size", self.batch_size),
            ("data.utterances", self.utterances),
        ];
        for (name, v) in dims {
            if v == 0 {
                return err(format!("{name} must be positive"));
            }
        }
        let headed = [
            ("speech_encoder", self.speech_width, self.speech_heads),
            ("text_lm", self.lm_width, self.lm_heads),
            ("adapter", self.lm_width, self.adapter_heads),
        ];
        for (name, width, heads) in headed {
            if heads == 0 || width % heads != 0 {
                return err(format!("{name}: width {width} not divisible by heads {heads}"));
            }
        }
        if self.vocab_size < 4 {
            return err("text_lm.vocab_size must be at least 4".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.pretrain_lr > 0.0 && self.pretrain_lr.is_finite()) {
            return err("learning rates must be positive and finite".into());
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite())
            || !(self.bias_noise_std >= 0.0 && self.bias_noise_std.is_finite())
        {
            return err("noise levels must be non-negative and finite".into());
        }
        if self.utt_len_min == 0 || self.utt_len_min > self.utt_len_max {
            return err("utterance length range is empty".into());
        }
        if self.frames_per_token_min == 0 || self.frames_per_token_min > self.frames_per_token_max {
            return err("frames-per-token range is empty".into());
        }
        Ok(())
    }

    fn lines(&self, arch_only: bool) -> Vec<String> {
        let mut lines = vec![
            format!("adapter.heads={}", self.adapter_heads),
            format!("adapter.num_layers={}", self.adapter_layers),
            format!("adapter.subsample_rate={}", self.subsample_rate),
            format!("precision={}", self.precision.name()),
            format!("speech_encoder.frame_dim={}", self.speech_frame_dim),
            format!("speech_encoder.heads={}", self.speech_heads),
            format!("speech_encoder.layers={}", self.speech_layers),
            format!("speech_encoder.max_len={}", self.speech_max_len),
            format!("speech_encoder.width={}", self.speech_width),
            format!("text_lm.heads={}", self.lm_heads),
            format!("text_lm.layers={}", self.lm_layers),
            format!("text_lm.max_len={}", self.lm_max_len),
            format!("text_lm.vocab_size={}", self.vocab_size),
            format!("text_lm.width={}", self.lm_width),
        ];
        if !arch_only {
            lines.extend([
                format!("data.bias_noise_std={}", self.bias_noise_std),
                format!("data.dir={}", self.data_dir),
                format!("data.frames_per_token_max={}", self.frames_per_token_max),
                format!("data.frames_per_token_min={}", self.frames_per_token_min),
                format!("data.noise_std={}", self.noise_std),
                format!("data.utt_len_max={}", self.utt_len_max),
                format!("data.utt_len_min={}", self.utt_len_min),
                format!("data.utterances={}", self.utterances),
                format!("pretrain.lm_steps={}", self.pretrain_lm_steps),
                format!("pretrain.lr={}", self.pretrain_lr),
                format!("pretrain.speech_steps={}", self.pretrain_speech_steps),
                format!("seed={}", self.seed),
                format!("train.batch_size={}", self.batch_size),
                format!("train.checkpoint_every={}", self.checkpoint_every),
                format!("train.eval_every={}", self.eval_every),
                format!("train.lr={}", self.lr),
                format!("train.mask={}", self.mask),
                format!("train.steps={}", self.train_steps),
                format!("train.subsample={}", self.subsample),
            ]);
        }
        lines.sort();
        lines
    }

    /// Full effective config, sorted `key=value` lines. Parsing a snapshot
    /// reproduces the config exactly.
    pub fn snapshot(&self) -> String {
        let mut out = self.lines(false).join("\n");
        out.push('\n');
        out
    }

    /// SHA-256 over the architecture-relevant keys. Checkpoints store this
    /// hash; loading under a mismatched architecture is refused. Training
    /// and data keys are excluded so one checkpoint serves many runs.
    pub fn fingerprint(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        for line in self.lines(true) {
            hasher.update(line.as_bytes());
            hasher.update(b"\n");
        }
        hasher.finalize().into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        Config::default().validate().unwrap();
    }

    #[test]
    fn parse_overrides_and_comments() {
        let cfg = Config::parse_str(
            "# toy run\nadapter.num_layers = 4\n\ntrain.lr=0.001\nprecision=f64\n",
        )
        .unwrap();
        assert_eq!(cfg.adapter_layers, 4);
        assert_eq!(cfg.lr, 0.001);
        assert_eq!(cfg.precision, Dtype::F64);
        assert_eq!(cfg.speech_width, 64);
    }

    #[test]
    fn rejects_unknown_key_duplicate_and_garbage() {
        assert!(Config::parse_str("adapter.depth=2").is_err());
        assert!(Config::parse_str("seed=1\nseed=2").is_err());
        assert!(Config::parse_str("just some words").is_err());
        assert!(Config::parse_str("train.lr=banana").is_err());
    }

    #[test]
    fn rejects_invalid_shapes() {
        assert!(Config::parse_str("text_lm.width=10").is_err());
        assert!(Config::parse_str("data.utt_len_min=9\ndata.utt_len_max=3").is_err());
        assert!(Config::parse_str("train.lr=0").is_err());
        assert!(Config::parse_str("data.noise_std=-1").is_err());
    }

    #[test]
    fn snapshot_round_trips() {
        let mut cfg = Config::default();
        cfg.set("train.mask", "all").unwrap();
        cfg.set("data.noise_std", "0.25").unwrap();
        cfg.set("seed", "7").unwrap();
        let reparsed = Config::parse_str(&cfg.snapshot()).unwrap();
        assert_eq!(reparsed, cfg);
        assert_eq!(reparsed.snapshot(), cfg.snapshot());
    }

    #[test]
    fn fingerprint_tracks_architecture_only() {
        let base = Config::default();
        let mut training_change = base.clone();
        training_change.set("train.steps", "9999").unwrap();
        training_change.set("seed", "123").unwrap();
        assert_eq!(base.fingerprint(), training_change.fingerprint());

        let mut arch_change = base.clone();
        arch_change.set("adapter.num_layers", "3").unwrap();
        assert_ne!(base.fingerprint(), arch_change.fingerprint());

        let mut precision_change = base.clone();
        precision_change.set("precision", "f64").unwrap();
        assert_ne!(base.fingerprint(), precision_change.fingerprint());
    }
}
