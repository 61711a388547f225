//! Synthetic speech rendering: the TTS stand-in.
//!
//! Every vocabulary token owns a fixed prototype frame (drawn once per
//! corpus). An utterance renders as k noisy copies of each token's
//! prototype in order, k drawn per token from a small range, so frame
//! count varies while content stays recoverable. All arithmetic is f64
//! regardless of model precision: a (tokens, seed) recipe regenerates the
//! exact same bytes anywhere, which is what lets corpora ship recipes
//! instead of frames.

use crate::error::{Result, SlmError};
use crate::rng::SeededRng;
use crate::vocab;
use serde::{Deserialize, Serialize};

/// U frames by `dim` feature columns, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSequence {
    pub dim: usize,
    pub frames: Vec<f64>,
}

impl FeatureSequence {
    pub fn rows(&self) -> usize {
        self.frames.len() / self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.frames[i * self.dim..(i + 1) * self.dim]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Speechifier {
    /// Vocab-size x frame_dim prototype rows.
    pub prototypes: Vec<f64>,
    pub frame_dim: usize,
    pub frames_per_token_min: usize,
    pub frames_per_token_max: usize,
    pub noise_std: f64,
}

impl Speechifier {
    /// Draw a fresh prototype table. Unit-normal prototypes in `frame_dim`
    /// dimensions keep tokens well separated relative to the noise level.
    pub fn generate(
        frame_dim: usize,
        frames_per_token_min: usize,
        frames_per_token_max: usize,
        noise_std: f64,
        seed: u64,
    ) -> Self {
        let mut rng = SeededRng::new(seed);
        let prototypes = (0..vocab::VOCAB_SIZE * frame_dim)
            .map(|_| rng.normal(0.0, 1.0))
            .collect();
        Speechifier {
            prototypes,
            frame_dim,
            frames_per_token_min,
            frames_per_token_max,
            noise_std,
        }
    }

    pub fn proto_row(&self, token: u32) -> &[f64] {
        &self.prototypes[token as usize * self.frame_dim..(token as usize + 1) * self.frame_dim]
    }

    /// Render `tokens` to frames. Identical (tokens, seed, noise) give
    /// byte-identical output; an empty token list gives U=0 (callers must
    /// reject that before subsampling).
    pub fn speechify(&self, tokens: &[u32], seed: u64) -> Result<FeatureSequence> {
        self.speechify_at(tokens, seed, self.noise_std)
    }

    /// `speechify` with an explicit noise level; evaluation sets are
    /// rendered harder than training data.
    pub fn speechify_at(&self, tokens: &[u32], seed: u64, noise_std: f64) -> Result<FeatureSequence> {
        let mut rng = SeededRng::new(seed);
        let mut frames = Vec::new();
        for &tok in tokens {
            if tok as usize >= vocab::VOCAB_SIZE {
                return Err(SlmError::Vocab(format!("cannot speechify token id {tok}")));
            }
            let proto = self.proto_row(tok).to_vec();
            let k = rng.range_inclusive(self.frames_per_token_min, self.frames_per_token_max);
            for _ in 0..k {
                for &p in &proto {
                    frames.push(p + rng.normal(0.0, noise_std));
                }
            }
        }
        Ok(FeatureSequence {
            dim: self.frame_dim,
            frames,
        })
    }
}
