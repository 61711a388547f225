//! Cascade baseline: recognize speech to tokens first, then translate the
//! transcript with the frozen text LM alone. Compared against end-to-end
//! translation through the adapter on the identical utterance list, plus a
//! controlled-corruption mode that substitutes transcript tokens at a given
//! rate to measure how transcript errors propagate.

use crate::backbones::lm_generate_text;
use crate::error::{Result, SlmError};
use crate::metrics::{self, EvalReport, Normalizer, MAX_GENERATION_LEN};
use crate::rng::SeededRng;
use crate::sandwich::Sandwich;
use crate::scalar::Scalar;
use crate::speechify::Speechifier;
use crate::tasks::{self, TaskExample, TaskTag};
use crate::vocab;

#[derive(Debug, Clone, Copy)]
pub struct CascadeOptions {
    /// Feed the ground-truth spoken tokens to step 2 instead of the model
    /// transcript; isolates the translation stage.
    pub oracle_transcripts: bool,
    /// Probability per transcript position of substituting a different
    /// content token before step 2. 0 disables corruption.
    pub corruption_rate: f64,
    pub corruption_seed: u64,
}

impl CascadeOptions {
    pub fn clean(oracle: bool) -> Self {
        CascadeOptions { oracle_transcripts: oracle, corruption_rate: 0.0, corruption_seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CascadeResult {
    pub end_to_end: EvalReport,
    pub cascade: EvalReport,
    pub transcript: EvalReport,
    pub corpus_size: usize,
}

impl CascadeResult {
    pub fn end_to_end_bleu(&self) -> f64 {
        self.end_to_end.value
    }

    pub fn cascade_bleu(&self) -> f64 {
        self.cascade.value
    }

    pub fn transcript_wer(&self) -> f64 {
        self.transcript.value
    }

    pub fn to_text(&self) -> String {
        format!(
            "=== end_to_end ===\n{}=== cascade ===\n{}=== transcript ===\n{}",
            self.end_to_end.to_text(),
            self.cascade.to_text(),
            self.transcript.to_text()
        )
    }
}

const COIN_GRAIN: usize = 1 << 24;

/// Substitute each position with probability `rate` by a uniformly random
/// content token different from the current one; corruption never
/// introduces specials. Every position consumes the same two draws at any
/// rate, so for a fixed seed the corrupted sets nest as the rate grows.
pub fn corrupt_tokens(tokens: &[u32], rate: f64, rng: &mut SeededRng) -> Vec<u32> {
    tokens
        .iter()
        .map(|&t| {
            let coin = rng.below(COIN_GRAIN);
            let draw = rng.below(vocab::NUM_CONTENT - 1) as u32;
            if (coin as f64) >= rate * COIN_GRAIN as f64 {
                return t;
            }
            let cur = if vocab::is_content(t) {
                t - vocab::CONTENT_BASE
            } else {
                vocab::NUM_CONTENT as u32
            };
            let idx = if draw >= cur { draw + 1 } else { draw };
            vocab::CONTENT_BASE + idx
        })
        .collect()
}

/// Two-stage baseline over a translation corpus. Both paths decode the
/// same examples in the same order; the report triple shares one corpus.
pub fn run_cascade<S: Scalar>(
    sw: &Sandwich<S>,
    sp: &Speechifier,
    examples: &[TaskExample],
    opts: CascadeOptions,
    norm: &Normalizer,
) -> Result<CascadeResult> {
    if examples.is_empty() {
        return Err(SlmError::Empty("cascade corpus is empty".into()));
    }
    let mut refs = Vec::with_capacity(examples.len());
    let mut e2e_hyps = Vec::with_capacity(examples.len());
    let mut cascade_hyps = Vec::with_capacity(examples.len());
    let mut spoken_refs = Vec::with_capacity(examples.len());
    let mut transcript_hyps = Vec::with_capacity(examples.len());
    for (i, ex) in examples.iter().enumerate() {
        if ex.task != TaskTag::Translate {
            return Err(SlmError::Corpus(format!(
                "cascade expects translation examples, found {:?} at index {i}",
                ex.task
            )));
        }
        let spoken = ex.speech.tokens().ok_or_else(|| {
            SlmError::Corpus(format!("example {i} carries literal frames, cascade needs recipes"))
        })?;
        let frames = ex.speech.materialize(sp, ex.noise_std)?;

        let e2e = sw.generate(&ex.instruction, &frames, MAX_GENERATION_LEN)?;
        e2e_hyps.push(vocab::detokenize(&e2e)?);
        refs.push(vocab::detokenize(&ex.target)?);

        let transcript = if opts.oracle_transcripts {
            spoken.to_vec()
        } else {
            sw.generate(&tasks::recognize_instruction(), &frames, MAX_GENERATION_LEN)?
        };
        let mut rng = SeededRng::derived(opts.corruption_seed, "corrupt", i as u64);
        let transcript = corrupt_tokens(&transcript, opts.corruption_rate, &mut rng);
        spoken_refs.push(vocab::detokenize(spoken)?);
        transcript_hyps.push(vocab::detokenize(&transcript)?);

        let mut enc_ids = ex.instruction.clone();
        enc_ids.extend_from_slice(&transcript);
        let translated = lm_generate_text(&sw.store, &sw.cfg, &enc_ids, MAX_GENERATION_LEN)?;
        cascade_hyps.push(vocab::detokenize(&translated)?);
    }
    let fp = metrics::fingerprint_hex(&sw.cfg);
    let bleu_report = |task: &str, hyps: &[String]| -> Result<EvalReport> {
        let s = metrics::bleu_stats(&refs, hyps)?;
        Ok(EvalReport {
            task: task.to_string(),
            metric: "bleu".to_string(),
            value: metrics::bleu_from_stats(&s),
            detail: format!(
                "matches={:?} totals={:?} hyp_len={} ref_len={}",
                s.matches, s.totals, s.hyp_len, s.ref_len
            ),
            corpus_size: refs.len(),
            fingerprint_hex: fp.clone(),
        })
    };
    let end_to_end = bleu_report("translate_end_to_end", &e2e_hyps)?;
    let cascade = bleu_report("translate_cascade", &cascade_hyps)?;
    let (rate, s) = metrics::wer(&spoken_refs, &transcript_hyps, norm)?;
    let transcript = EvalReport {
        task: "cascade_transcript".to_string(),
        metric: "wer".to_string(),
        value: 100.0 * rate,
        detail: format!(
            "substitutions={} deletions={} insertions={} ref_len={}",
            s.substitutions, s.deletions, s.insertions, s.ref_len
        ),
        corpus_size: spoken_refs.len(),
        fingerprint_hex: fp,
    };
    Ok(CascadeResult { end_to_end, cascade, transcript, corpus_size: examples.len() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbones::{register_speech_encoder, register_text_lm};
    use crate::config::Config;
    use crate::params::ParameterStore;
    use crate::tasks::ToyWorld;

    fn tiny_cfg() -> Config {
        let mut cfg = Config::default();
        cfg.speech_frame_dim = 4;
        cfg.speech_width = 8;
        cfg.speech_layers = 1;
        cfg.speech_heads = 2;
        cfg.speech_max_len = 48;
        cfg.lm_width = 12;
        cfg.lm_layers = 1;
        cfg.lm_heads = 2;
        cfg.lm_max_len = 24;
        cfg.adapter_layers = 1;
        cfg.adapter_heads = 2;
        cfg.validate().unwrap();
        cfg
    }

    fn tiny_sandwich(cfg: &Config) -> Sandwich<f32> {
        let mut speech = ParameterStore::<f32>::new();
        let mut rng = SeededRng::derived(cfg.seed, "speech_init", 0);
        register_speech_encoder(&mut speech, &mut rng, cfg).unwrap();
        speech.freeze_all();
        let mut lm = ParameterStore::new();
        let mut rng = SeededRng::derived(cfg.seed, "lm_init", 0);
        register_text_lm(&mut lm, &mut rng, cfg).unwrap();
        lm.freeze_all();
        Sandwich::assemble(cfg, &speech, &lm).unwrap()
    }

    fn tiny_corpus(w: &ToyWorld) -> Vec<TaskExample> {
        let utts: Vec<Vec<u32>> = (0..5)
            .map(|i| vec![24 + (i % 8) as u32, 25, 26 + (i % 4) as u32])
            .collect();
        tasks::make_translation_task(&utts, w, 1, 0.05, 21, "casc")
    }

    #[test]
    fn corruption_rate_zero_is_identity_and_one_replaces_everything() {
        let toks = vec![24, 27, 31, 24];
        let mut rng = SeededRng::derived(4, "c", 0);
        assert_eq!(corrupt_tokens(&toks, 0.0, &mut rng), toks);
        let mut rng = SeededRng::derived(4, "c", 0);
        let all = corrupt_tokens(&toks, 1.0, &mut rng);
        for (a, b) in toks.iter().zip(&all) {
            assert_ne!(a, b);
            assert!(vocab::is_content(*b));
        }
        let mut r1 = SeededRng::derived(4, "c", 1);
        let mut r2 = SeededRng::derived(4, "c", 1);
        assert_eq!(corrupt_tokens(&toks, 0.5, &mut r1), corrupt_tokens(&toks, 0.5, &mut r2));
    }

    #[test]
    fn oracle_clean_cascade_equals_text_translation() {
        let cfg = tiny_cfg();
        let sw = tiny_sandwich(&cfg);
        let sp = Speechifier::generate(cfg.speech_frame_dim, 2, 3, 0.05, 3);
        let w = ToyWorld::generate(13);
        let corpus = tiny_corpus(&w);
        let norm = Normalizer::standard();
        let res = run_cascade(&sw, &sp, &corpus, CascadeOptions::clean(true), &norm).unwrap();
        assert_eq!(res.transcript_wer(), 0.0);

        // independent text-only path over the same corpus
        let mut refs = Vec::new();
        let mut hyps = Vec::new();
        for ex in &corpus {
            let mut ids = ex.instruction.clone();
            ids.extend_from_slice(ex.speech.tokens().unwrap());
            let out = lm_generate_text(&sw.store, &sw.cfg, &ids, MAX_GENERATION_LEN).unwrap();
            hyps.push(vocab::detokenize(&out).unwrap());
            refs.push(vocab::detokenize(&ex.target).unwrap());
        }
        let text_bleu = metrics::corpus_bleu(&refs, &hyps).unwrap();
        assert_eq!(res.cascade_bleu(), text_bleu);
        assert_eq!(res.corpus_size, corpus.len());
    }

    #[test]
    fn cascade_is_deterministic_and_corruption_degrades_transcripts() {
        let cfg = tiny_cfg();
        let sw = tiny_sandwich(&cfg);
        let sp = Speechifier::generate(cfg.speech_frame_dim, 2, 3, 0.05, 3);
        let w = ToyWorld::generate(13);
        let corpus = tiny_corpus(&w);
        let norm = Normalizer::standard();
        let opts = CascadeOptions { oracle_transcripts: true, corruption_rate: 0.4, corruption_seed: 7 };
        let a = run_cascade(&sw, &sp, &corpus, opts, &norm).unwrap();
        let b = run_cascade(&sw, &sp, &corpus, opts, &norm).unwrap();
        assert_eq!(a, b);
        assert!(a.transcript_wer() > 0.0, "0.4 corruption left transcripts intact");

        // transcript damage is monotone in the corruption rate
        let mut prev = -1.0;
        for rate in [0.0, 0.1, 0.2, 0.4] {
            let r = run_cascade(
                &sw,
                &sp,
                &corpus,
                CascadeOptions { oracle_transcripts: true, corruption_rate: rate, corruption_seed: 7 },
                &norm,
            )
            .unwrap();
            assert!(
                r.transcript_wer() >= prev - 1e-9,
                "transcript WER fell from {prev} to {} at rate {rate}",
                r.transcript_wer()
            );
            prev = r.transcript_wer();
        }
        let text = a.to_text();
        assert!(text.contains("=== cascade ==="));
        assert!(text.contains("metric=wer"));
    }

    #[test]
    fn cascade_rejects_wrong_task_and_empty_corpus() {
        let cfg = tiny_cfg();
        let sw = tiny_sandwich(&cfg);
        let sp = Speechifier::generate(cfg.speech_frame_dim, 2, 3, 0.05, 3);
        let norm = Normalizer::standard();
        assert!(run_cascade(&sw, &sp, &[], CascadeOptions::clean(true), &norm).is_err());
        let utts = vec![vec![24, 25, 26]];
        let wrong = tasks::make_recognition_task(&utts, 1, 0.05, 5, "r");
        assert!(run_cascade(&sw, &sp, &wrong, CascadeOptions::clean(true), &norm).is_err());
    }
}
