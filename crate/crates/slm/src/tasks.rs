//! Synthetic task families and the training mixture.
//!
//! The toy world is generated once per corpus from a seed: a cipher (the
//! second "language"), a fact table (the LM's world knowledge), an entity
//! inventory of deliberately confusable pairs for biasing, and carrier
//! phrases. Task generators stamp out (instruction, speech, target)
//! triples whose targets are recomputable from their inputs.

use crate::error::{Result, SlmError};
use crate::rng::SeededRng;
use crate::speechify::{FeatureSequence, Speechifier};
use crate::vocab::{self, CONTENT_BASE, NUM_CONTENT};
use serde::{Deserialize, Serialize};
use std::collections::HashSet;

/// Entity length in tokens. Four keeps confusable pairs hard to hear
/// apart while leaving entity-free utterances easy to sample.
pub const MENTION_LEN: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskTag {
    Recognize,
    Translate,
    Instruct,
}

impl TaskTag {
    pub fn name(self) -> &'static str {
        match self {
            TaskTag::Recognize => "recognize",
            TaskTag::Translate => "translate",
            TaskTag::Instruct => "instruct",
        }
    }

    pub fn parse(s: &str) -> Result<TaskTag> {
        match s {
            "recognize" => Ok(TaskTag::Recognize),
            "translate" => Ok(TaskTag::Translate),
            "instruct" => Ok(TaskTag::Instruct),
            _ => Err(SlmError::Corpus(format!("unknown task tag {s:?}"))),
        }
    }
}

/// Speech input, either as a regeneration recipe or as literal frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpeechSource {
    Recipe { tokens: Vec<u32>, seed: u64 },
    Frames(FeatureSequence),
}

impl SpeechSource {
    pub fn materialize(&self, sp: &Speechifier, noise_std: f64) -> Result<FeatureSequence> {
        match self {
            SpeechSource::Recipe { tokens, seed } => sp.speechify_at(tokens, *seed, noise_std),
            SpeechSource::Frames(fs) => Ok(fs.clone()),
        }
    }

    /// Spoken token sequence, available only in recipe form. Text-side
    /// pretraining reads these as literal text.
    pub fn tokens(&self) -> Option<&[u32]> {
        match self {
            SpeechSource::Recipe { tokens, .. } => Some(tokens),
            SpeechSource::Frames(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskExample {
    pub task: TaskTag,
    pub instruction: Vec<u32>,
    pub speech: SpeechSource,
    pub target: Vec<u32>,
    /// Noise level the speech renders at; evaluation sets run hotter.
    pub noise_std: f64,
}

// ── instruction templates ──

pub fn recognize_instruction() -> Vec<u32> {
    vec![vocab::token_id("recognize").unwrap(), vocab::token_id("speech").unwrap(), vocab::token_id("lang_a").unwrap()]
}

pub fn translate_instruction() -> Vec<u32> {
    vec![
        vocab::token_id("translate").unwrap(),
        vocab::token_id("speech").unwrap(),
        vocab::token_id("lang_a").unwrap(),
        vocab::token_id("lang_b").unwrap(),
    ]
}

/// Instruction-task families. Lookup-QA is generated for LM pretraining
/// and held out of adapter training to probe zero-shot transfer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    Reverse,
    Length,
    Last,
    Qa,
}

pub const ADAPTER_FAMILIES: [Family; 3] = [Family::Reverse, Family::Length, Family::Last];

impl Family {
    fn keyword(self) -> &'static str {
        match self {
            Family::Reverse => "reverse",
            Family::Length => "length",
            Family::Last => "last",
            Family::Qa => "answer",
        }
    }

    /// Two phrasings per family: keyword before or after the speech slot.
    pub fn instruction(self, phrasing: usize) -> Vec<u32> {
        let kw = vocab::token_id(self.keyword()).unwrap();
        let sp = vocab::token_id("speech").unwrap();
        if phrasing % 2 == 0 {
            vec![kw, sp]
        } else {
            vec![sp, kw]
        }
    }

    pub fn target(self, spoken: &[u32], world: &ToyWorld) -> Result<Vec<u32>> {
        match self {
            Family::Reverse => Ok(spoken.iter().rev().copied().collect()),
            Family::Length => Ok(vec![vocab::number_token(spoken.len())?]),
            Family::Last => Ok(vec![*spoken.last().ok_or(SlmError::Empty("empty utterance".into()))?]),
            Family::Qa => world
                .fact_value(spoken)
                .map(|v| v.to_vec())
                .ok_or_else(|| SlmError::Corpus(format!("no fact for key {spoken:?}"))),
        }
    }
}

/// Biasing prompt: the recognition instruction extended with a mention
/// clause. With no entity it degrades to the plain instruction.
pub fn bias_prompt(entity: Option<&[u32]>) -> Vec<u32> {
    let mut p = recognize_instruction();
    if let Some(e) = entity {
        p.push(vocab::token_id("<mention>").unwrap());
        p.extend_from_slice(e);
    }
    p
}

/// The mention-conditioned correction rule the LM is pretrained on: if
/// the content's tail is within one substitution of the mention, snap the
/// tail to the mention; otherwise leave the content alone.
pub fn apply_mention_rule(content: &[u32], mention: &[u32]) -> Vec<u32> {
    if content.len() >= mention.len() && !mention.is_empty() {
        let split = content.len() - mention.len();
        let tail = &content[split..];
        let mismatches = tail.iter().zip(mention).filter(|(a, b)| a != b).count();
        if mismatches <= 1 {
            let mut out = content[..split].to_vec();
            out.extend_from_slice(mention);
            return out;
        }
    }
    content.to_vec()
}

// ── the toy world ──

pub const NUM_FACTS: usize = 32;
pub const NUM_ENTITY_PAIRS: usize = 100;
pub const NUM_CARRIERS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyWorld {
    /// Content-token substitution: `cipher[i]` is the image of content
    /// token `CONTENT_BASE + i`. A derangement, so "lang_b" never equals
    /// "lang_a" on any token.
    pub cipher: Vec<u32>,
    pub fact_keys: Vec<Vec<u32>>,
    pub fact_values: Vec<Vec<u32>>,
    /// 2*NUM_ENTITY_PAIRS entities; entries 2i and 2i+1 differ in exactly
    /// one position, so unbiased recognition genuinely confuses them.
    pub entities: Vec<Vec<u32>>,
    /// Short carrier phrases prefixed to entities in the W_PREFIX split.
    pub carriers: Vec<Vec<u32>>,
}

fn random_content(rng: &mut SeededRng, len: usize) -> Vec<u32> {
    (0..len)
        .map(|_| CONTENT_BASE + rng.below(NUM_CONTENT) as u32)
        .collect()
}

impl ToyWorld {
    pub fn generate(seed: u64) -> ToyWorld {
        let mut rng = SeededRng::derived(seed, "world", 0);

        // cipher: shuffle content tokens until no fixed point remains
        let cipher = loop {
            let mut perm: Vec<u32> = (0..NUM_CONTENT as u32).map(|i| CONTENT_BASE + i).collect();
            rng.shuffle(&mut perm);
            if perm.iter().enumerate().all(|(i, &t)| t != CONTENT_BASE + i as u32) {
                break perm;
            }
        };

        // fact table: keys and values drawn from disjoint halves of the
        // shuffled 2-token pair space, so keys are distinct, values are
        // distinct, and no value collides with any key
        let mut pairs: Vec<Vec<u32>> = (0..NUM_CONTENT)
            .flat_map(|a| {
                (0..NUM_CONTENT).map(move |b| vec![CONTENT_BASE + a as u32, CONTENT_BASE + b as u32])
            })
            .collect();
        rng.shuffle(&mut pairs);
        let fact_keys = pairs[..NUM_FACTS].to_vec();
        let fact_values = pairs[NUM_FACTS..2 * NUM_FACTS].to_vec();

        // confusable entity pairs
        let mut entities: Vec<Vec<u32>> = Vec::new();
        let mut seen: HashSet<Vec<u32>> = HashSet::new();
        while entities.len() < 2 * NUM_ENTITY_PAIRS {
            let base = random_content(&mut rng, MENTION_LEN);
            let mut twin = base.clone();
            let pos = rng.below(MENTION_LEN);
            let old = twin[pos];
            twin[pos] = loop {
                let cand = CONTENT_BASE + rng.below(NUM_CONTENT) as u32;
                if cand != old {
                    break cand;
                }
            };
            if seen.contains(&base) || seen.contains(&twin) {
                continue;
            }
            seen.insert(base.clone());
            seen.insert(twin.clone());
            entities.push(base);
            entities.push(twin);
        }

        let carriers = (0..NUM_CARRIERS)
            .map(|_| {
                let len = rng.range_inclusive(2, 3);
                random_content(&mut rng, len)
            })
            .collect();

        ToyWorld {
            cipher,
            fact_keys,
            fact_values,
            entities,
            carriers,
        }
    }

    pub fn apply_cipher(&self, tokens: &[u32]) -> Vec<u32> {
        tokens
            .iter()
            .map(|&t| {
                if vocab::is_content(t) {
                    self.cipher[(t - CONTENT_BASE) as usize]
                } else {
                    t
                }
            })
            .collect()
    }

    pub fn invert_cipher(&self, tokens: &[u32]) -> Vec<u32> {
        tokens
            .iter()
            .map(|&t| {
                if let Some(i) = self.cipher.iter().position(|&c| c == t) {
                    CONTENT_BASE + i as u32
                } else {
                    t
                }
            })
            .collect()
    }

    pub fn fact_value(&self, key: &[u32]) -> Option<&[u32]> {
        self.fact_keys
            .iter()
            .position(|k| k == key)
            .map(|i| self.fact_values[i].as_slice())
    }

    /// True if `entity` occurs as a contiguous subsequence of `utt`.
    pub fn contains_entity(&self, utt: &[u32]) -> bool {
        self.entities
            .iter()
            .any(|e| utt.windows(e.len()).any(|w| w == e.as_slice()))
    }
}

/// Distinct random utterances over content tokens.
pub fn generate_utterances(
    count: usize,
    len_min: usize,
    len_max: usize,
    rng: &mut SeededRng,
) -> Vec<Vec<u32>> {
    let mut seen: HashSet<Vec<u32>> = HashSet::new();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let len = rng.range_inclusive(len_min, len_max);
        let utt = random_content(rng, len);
        if seen.insert(utt.clone()) {
            out.push(utt);
        }
    }
    out
}

// ── task generators ──

fn recipe(tokens: &[u32], label: &str, seed: u64, index: u64) -> SpeechSource {
    SpeechSource::Recipe {
        tokens: tokens.to_vec(),
        seed: crate::rng::derive_seed(seed, label, index),
    }
}

/// One recognition example per (utterance, variant): target is the spoken
/// sequence itself.
pub fn make_recognition_task(
    utterances: &[Vec<u32>],
    variants: usize,
    noise_std: f64,
    seed: u64,
    label: &str,
) -> Vec<TaskExample> {
    let mut out = Vec::new();
    for (i, utt) in utterances.iter().enumerate() {
        for v in 0..variants {
            out.push(TaskExample {
                task: TaskTag::Recognize,
                instruction: recognize_instruction(),
                speech: recipe(utt, label, seed, (i * variants + v) as u64),
                target: utt.clone(),
                noise_std,
            });
        }
    }
    out
}

/// Translation: target is the cipher image of the spoken sequence.
pub fn make_translation_task(
    utterances: &[Vec<u32>],
    world: &ToyWorld,
    variants: usize,
    noise_std: f64,
    seed: u64,
    label: &str,
) -> Vec<TaskExample> {
    let mut out = Vec::new();
    for (i, utt) in utterances.iter().enumerate() {
        for v in 0..variants {
            out.push(TaskExample {
                task: TaskTag::Translate,
                instruction: translate_instruction(),
                speech: recipe(utt, label, seed, (i * variants + v) as u64),
                target: world.apply_cipher(utt),
                noise_std,
            });
        }
    }
    out
}

/// Instruction examples over the given families, phrasing and family
/// rotated deterministically per utterance.
pub fn make_instruction_task(
    utterances: &[Vec<u32>],
    world: &ToyWorld,
    families: &[Family],
    noise_std: f64,
    seed: u64,
    label: &str,
) -> Result<Vec<TaskExample>> {
    let mut out = Vec::new();
    let mut idx = 0u64;
    for (i, utt) in utterances.iter().enumerate() {
        for (f, &family) in families.iter().enumerate() {
            out.push(TaskExample {
                task: TaskTag::Instruct,
                instruction: family.instruction(i + f),
                speech: recipe(utt, label, seed, idx),
                target: family.target(utt, world)?,
                noise_std,
            });
            idx += 1;
        }
    }
    Ok(out)
}

/// Spoken lookup-QA: the fact key is spoken, the value is the target.
pub fn make_qa_task(
    world: &ToyWorld,
    variants: usize,
    noise_std: f64,
    seed: u64,
    label: &str,
) -> Vec<TaskExample> {
    let mut out = Vec::new();
    for (i, key) in world.fact_keys.iter().enumerate() {
        for v in 0..variants {
            out.push(TaskExample {
                task: TaskTag::Instruct,
                instruction: Family::Qa.instruction(i + v),
                speech: recipe(key, label, seed, (i * variants + v) as u64),
                target: world.fact_values[i].clone(),
                noise_std,
            });
        }
    }
    out
}

/// Mention-correction examples for LM pretraining: random mention, content
/// whose tail equals it, nearly equals it, or misses entirely; target per
/// `apply_mention_rule`. Mentions are fresh random strings, not database
/// entities, so the rule generalizes to unseen entities.
pub fn make_mention_task(
    count: usize,
    noise_std: f64,
    seed: u64,
    label: &str,
) -> Vec<TaskExample> {
    let mut rng = SeededRng::derived(seed, label, 0);
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let mention = random_content(&mut rng, MENTION_LEN);
        let carrier_len = if rng.below(2) == 0 { 0 } else { rng.range_inclusive(1, 3) };
        let carrier = random_content(&mut rng, carrier_len);
        let tail = match rng.below(3) {
            0 => mention.clone(),
            1 => {
                let mut t = mention.clone();
                let pos = rng.below(MENTION_LEN);
                t[pos] = CONTENT_BASE + rng.below(NUM_CONTENT) as u32;
                t
            }
            _ => random_content(&mut rng, MENTION_LEN),
        };
        let mut content = carrier;
        content.extend_from_slice(&tail);
        let target = apply_mention_rule(&content, &mention);
        out.push(TaskExample {
            task: TaskTag::Recognize,
            instruction: bias_prompt(Some(&mention)),
            speech: recipe(&content, label, seed, i as u64 + 1),
            target,
            noise_std,
        });
    }
    out
}

/// Biasing evaluation splits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BiasSplit {
    /// Transcript is a database entity alone.
    WoPrefix,
    /// Transcript is carrier phrase + entity.
    WPrefix,
    /// Transcript contains no database entity anywhere.
    Anti,
}

impl BiasSplit {
    pub fn name(self) -> &'static str {
        match self {
            BiasSplit::WoPrefix => "wo_prefix",
            BiasSplit::WPrefix => "w_prefix",
            BiasSplit::Anti => "anti",
        }
    }
}

/// Recognition examples for one biasing split, ASR-form instruction (the
/// mention clause is added at evaluation time from retrieval).
pub fn make_bias_split(
    world: &ToyWorld,
    split: BiasSplit,
    count: usize,
    noise_std: f64,
    seed: u64,
    label: &str,
) -> Vec<TaskExample> {
    let mut rng = SeededRng::derived(seed, label, 0);
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let transcript = match split {
            BiasSplit::WoPrefix => world.entities[rng.below(world.entities.len())].clone(),
            BiasSplit::WPrefix => {
                let mut t = world.carriers[rng.below(world.carriers.len())].clone();
                t.extend_from_slice(&world.entities[rng.below(world.entities.len())]);
                t
            }
            BiasSplit::Anti => loop {
                let len = rng.range_inclusive(2, 6);
                let utt = random_content(&mut rng, len);
                if !world.contains_entity(&utt) {
                    break utt;
                }
            },
        };
        out.push(TaskExample {
            task: TaskTag::Recognize,
            instruction: recognize_instruction(),
            speech: recipe(&transcript, label, seed, i as u64 + 1),
            target: transcript,
            noise_std,
        });
    }
    out
}

// ── mixture ──

pub struct MixtureDataset {
    pub tasks: Vec<Vec<TaskExample>>,
}

impl MixtureDataset {
    pub fn total(&self) -> usize {
        self.tasks.iter().map(|t| t.len()).sum()
    }

    /// Draw `batch_size` (task, example) index pairs i.i.d.; task
    /// probability is proportional to task example count.
    pub fn sample_indices(
        &self,
        batch_size: usize,
        rng: &mut SeededRng,
    ) -> Result<Vec<(usize, usize)>> {
        let total = self.total();
        if total == 0 {
            return Err(SlmError::Empty("mixture dataset has no examples".into()));
        }
        let mut batch = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            let mut pick = rng.below(total);
            for (t, task) in self.tasks.iter().enumerate() {
                if pick < task.len() {
                    batch.push((t, pick));
                    break;
                }
                pick -= task.len();
            }
        }
        Ok(batch)
    }

    pub fn sample_batch(&self, batch_size: usize, rng: &mut SeededRng) -> Result<Vec<&TaskExample>> {
        Ok(self
            .sample_indices(batch_size, rng)?
            .into_iter()
            .map(|(t, i)| &self.tasks[t][i])
            .collect())
    }
}
