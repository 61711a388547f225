//! Fuzz entry points shared by the libFuzzer targets under fuzz/ and the
//! seed-regression test that replays the checked-in corpus on stable.
//!
//! Each function must never panic on arbitrary bytes: parsers return errors,
//! and on success the round-trip invariants are asserted here so the fuzzer
//! exercises them too.

use crate::checkpoint::Checkpoint;
use crate::config::Config;
use crate::corpus;
use crate::vocab;

pub fn fuzz_checkpoint(data: &[u8]) {
    if let Ok(ck) = Checkpoint::parse(data) {
        let bytes = ck.to_bytes();
        let again = Checkpoint::parse(&bytes).expect("serialized checkpoint must reparse");
        assert_eq!(bytes, again.to_bytes(), "checkpoint bytes not stable");
    }
}

pub fn fuzz_corpus_line(data: &[u8]) {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(ex) = corpus::parse_example_line(text) {
        let line = serde_json::to_string(&ex).expect("parsed example must serialize");
        let again = corpus::parse_example_line(&line).expect("serialized example must reparse");
        assert_eq!(ex, again, "corpus line round-trip drifted");
    }
}

pub fn fuzz_config(data: &[u8]) {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = Config::parse_str(text) {
        let again = Config::parse_str(&cfg.snapshot()).expect("snapshot must reparse");
        assert_eq!(cfg, again, "config snapshot round-trip drifted");
        assert_eq!(cfg.fingerprint(), again.fingerprint());
    }
}

pub fn fuzz_entities(data: &[u8]) {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(entities) = corpus::parse_entities(text) {
        assert!(!entities.is_empty(), "parse_entities returned an empty list as Ok");
        for e in &entities {
            assert!(!e.is_empty());
            assert!(e.iter().all(|&t| (t as usize) < vocab::VOCAB_SIZE));
        }
    }
}

pub fn fuzz_tokenize(data: &[u8]) {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(ids) = vocab::tokenize(text) {
        let rendered = vocab::detokenize(&ids).expect("tokenized ids must detokenize");
        let again = vocab::tokenize(&rendered).expect("detokenized text must retokenize");
        assert_eq!(ids, again, "tokenize round-trip drifted");
    }
}
