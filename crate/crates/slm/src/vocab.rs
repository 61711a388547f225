//! Fixed 32-token vocabulary shared by every model in the pipeline.
//!
//! The table is compiled in, never learned or configured: instruction
//! text, transcripts, and targets all tokenize by whitespace against it.
//! Layout: 3 specials, 10 template words, `<mention>`, 11 number words,
//! then the 8 content syllables that utterances are built from.

use crate::error::{Result, SlmError};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;

/// First content-syllable id; content ids are `CONTENT_BASE..VOCAB_SIZE`.
pub const CONTENT_BASE: u32 = 24;
pub const NUM_CONTENT: usize = 8;
pub const VOCAB_SIZE: usize = 32;

/// First number-word id; `NUMBER_BASE + k` spells the count `k + 2`.
pub const NUMBER_BASE: u32 = 13;

static TOKENS: [&str; VOCAB_SIZE] = [
    "<pad>",
    "<bos>",
    "<eos>",
    "recognize",
    "translate",
    "answer",
    "reverse",
    "length",
    "last",
    "speech",
    "lang_a",
    "lang_b",
    "<mention>",
    "2",
    "3",
    "4",
    "5",
    "6",
    "7",
    "8",
    "9",
    "10",
    "11",
    "12",
    "ba",
    "da",
    "ka",
    "ma",
    "na",
    "pa",
    "ra",
    "sa",
];

/// Token string for `id`.
pub fn token_str(id: u32) -> Result<&'static str> {
    TOKENS
        .get(id as usize)
        .copied()
        .ok_or(SlmError::Vocab(format!("token id {id} out of range")))
}

/// Id for a token string.
pub fn token_id(token: &str) -> Result<u32> {
    TOKENS
        .iter()
        .position(|&t| t == token)
        .map(|i| i as u32)
        .ok_or_else(|| SlmError::Vocab(format!("unknown token {token:?}")))
}

/// Whitespace tokenization against the fixed table.
pub fn tokenize(text: &str) -> Result<Vec<u32>> {
    text.split_whitespace().map(token_id).collect()
}

/// Space-joined token strings; specials render as their literal names.
pub fn detokenize(ids: &[u32]) -> Result<String> {
    let words: Result<Vec<&str>> = ids.iter().map(|&id| token_str(id)).collect();
    Ok(words?.join(" "))
}

/// Number word for a count (counts 2 through 12 are representable).
pub fn number_token(count: usize) -> Result<u32> {
    if (2..=12).contains(&count) {
        Ok(NUMBER_BASE + (count as u32 - 2))
    } else {
        Err(SlmError::Vocab(format!("no number word for count {count}")))
    }
}

/// True for the 8 content-syllable ids utterances are drawn from.
pub fn is_content(id: u32) -> bool {
    (CONTENT_BASE..VOCAB_SIZE as u32).contains(&id)
}
