//! Character-level corpus handling: vocabulary, train/held-out split,
//! batch sampling, and a deterministic synthetic English-like text source.

use std::collections::BTreeSet;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Characters per split block.
pub const SPLIT_BLOCK: usize = 1024;

/// Sorted observed characters; the unknown symbol takes the last id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub symbols: Vec<char>,
}

impl Vocab {
    pub fn from_text(text: &str) -> Self {
        let set: BTreeSet<char> = text.chars().collect();
        Self {
            symbols: set.into_iter().collect(),
        }
    }

    /// Observed symbols plus the unknown symbol.
    pub fn size(&self) -> usize {
        self.symbols.len() + 1
    }

    pub fn unk(&self) -> usize {
        self.symbols.len()
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.chars()
            .map(|c| self.symbols.binary_search(&c).unwrap_or(self.unk()))
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.symbols.get(i).copied().unwrap_or('\u{fffd}'))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub vocab: Vocab,
    pub train: Vec<usize>,
    pub heldout: Vec<usize>,
}

impl Corpus {
    /// Builds the vocabulary from the whole text, then assigns contiguous
    /// blocks of [`SPLIT_BLOCK`] characters to held-out so that a
    /// `heldout_fraction` share of blocks, spread evenly, is held out.
    pub fn from_text(text: &str, heldout_fraction: f64) -> Result<Self> {
        Self::with_vocab(text, Vocab::from_text(text), heldout_fraction)
    }

    /// Like [`Corpus::from_text`] but encodes with an existing vocabulary;
    /// unseen characters become the unknown symbol.
    pub fn with_vocab(text: &str, vocab: Vocab, heldout_fraction: f64) -> Result<Self> {
        if text.is_empty() {
            return Err(Error::config("corpus is empty"));
        }
        if !(0.0..1.0).contains(&heldout_fraction) {
            return Err(Error::config(format!(
                "heldout_fraction must be in [0, 1), got {heldout_fraction}"
            )));
        }
        let ids = vocab.encode(text);
        let mut train = Vec::with_capacity(ids.len());
        let mut heldout = Vec::new();
        for (i, block) in ids.chunks(SPLIT_BLOCK).enumerate() {
            let before = (i as f64 * heldout_fraction).floor();
            let after = ((i + 1) as f64 * heldout_fraction).floor();
            if after > before {
                heldout.extend_from_slice(block);
            } else {
                train.extend_from_slice(block);
            }
        }
        Ok(Self {
            vocab,
            train,
            heldout,
        })
    }
}

pub fn ingest_corpus(path: &Path, heldout_fraction: f64) -> Result<Corpus> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if text.is_empty() {
        return Err(Error::config(format!("{} is empty", path.display())));
    }
    Corpus::from_text(&text, heldout_fraction)
}

/// `batch` sequences of `seq` tokens, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBatch {
    pub tokens: Vec<usize>,
    pub batch: usize,
    pub seq: usize,
}

/// Uniformly random training windows from a seeded generator.
pub struct BatchSampler<'a> {
    tokens: &'a [usize],
    batch: usize,
    seq: usize,
    rng: ChaCha8Rng,
}

impl<'a> BatchSampler<'a> {
    pub fn new(tokens: &'a [usize], batch: usize, seq: usize, seed: u64) -> Result<Self> {
        if batch == 0 || seq == 0 {
            return Err(Error::config(
                "batch size and sequence length must be positive",
            ));
        }
        if tokens.len() < seq {
            return Err(Error::config(format!(
                "corpus has {} tokens, fewer than one sequence of {seq}",
                tokens.len()
            )));
        }
        Ok(Self {
            tokens,
            batch,
            seq,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn next_batch(&mut self) -> TokenBatch {
        let max_start = self.tokens.len() - self.seq;
        let mut tokens = Vec::with_capacity(self.batch * self.seq);
        for _ in 0..self.batch {
            let s = self.rng.gen_range(0..=max_start);
            tokens.extend_from_slice(&self.tokens[s..s + self.seq]);
        }
        TokenBatch {
            tokens,
            batch: self.batch,
            seq: self.seq,
        }
    }
}

/// Consecutive non-overlapping windows, grouped `batch` at a time; at most
/// `max_windows` windows (all when `None`). A short final group is kept.
pub fn eval_batches(
    tokens: &[usize],
    batch: usize,
    seq: usize,
    max_windows: Option<usize>,
) -> Vec<TokenBatch> {
    if seq == 0 || batch == 0 {
        return Vec::new();
    }
    let mut windows: Vec<&[usize]> = tokens.chunks_exact(seq).collect();
    if let Some(limit) = max_windows {
        windows.truncate(limit);
    }
    windows
        .chunks(batch)
        .map(|group| TokenBatch {
            tokens: group.concat(),
            batch: group.len(),
            seq,
        })
        .collect()
}

/// Random calibration windows covering about `fraction` of `tokens`
/// (at least one window).
pub fn calibration_batches(
    tokens: &[usize],
    fraction: f64,
    batch: usize,
    seq: usize,
    seed: u64,
) -> Result<Vec<TokenBatch>> {
    let windows = ((tokens.len() as f64 * fraction) / seq as f64)
        .ceil()
        .max(1.0) as usize;
    let mut sampler = BatchSampler::new(tokens, 1, seq, seed)?;
    let all: Vec<TokenBatch> = (0..windows).map(|_| sampler.next_batch()).collect();
    Ok(all
        .chunks(batch.max(1))
        .map(|group| TokenBatch {
            tokens: group
                .iter()
                .flat_map(|b| b.tokens.iter().copied())
                .collect(),
            batch: group.len(),
            seq,
        })
        .collect())
}

const DETERMINERS: &[&str] = &[
    "the", "a", "every", "one", "that", "this", "some", "no", "his", "her", "their", "our",
];
const ADJECTIVES: &[&str] = &[
    "old", "young", "quiet", "bright", "small", "great", "dark", "green", "cold", "strange",
    "gentle", "heavy", "ancient", "narrow", "golden", "silent", "broken", "distant", "hidden",
    "careful",
];
const NOUNS: &[&str] = &[
    "king", "river", "house", "garden", "ship", "letter", "mountain", "child", "window", "forest",
    "stranger", "lamp", "road", "city", "horse", "bridge", "doctor", "island", "village", "sailor",
    "merchant", "tower", "door", "winter", "morning", "question", "music", "soldier", "farmer",
    "book",
];
const VERBS: &[&str] = &[
    "saw",
    "found",
    "followed",
    "remembered",
    "carried",
    "watched",
    "opened",
    "crossed",
    "heard",
    "painted",
    "forgot",
    "visited",
    "built",
    "answered",
    "loved",
    "feared",
    "kept",
    "lost",
];
const INTRANSITIVE: &[&str] = &[
    "slept", "waited", "laughed", "vanished", "returned", "trembled", "wandered", "listened",
    "sang", "rested",
];
const PREPOSITIONS: &[&str] = &[
    "near", "under", "beyond", "behind", "across", "beside", "above", "toward", "inside",
];
const CONJUNCTIONS: &[&str] = &["and", "but", "while", "because", "although", "so"];
const ADVERBS: &[&str] = &[
    "slowly", "again", "quickly", "never", "often", "softly", "suddenly", "alone",
];

fn zipf<'w>(rng: &mut ChaCha8Rng, words: &[&'w str]) -> &'w str {
    let total: f64 = (1..=words.len()).map(|r| 1.0 / r as f64).sum();
    let mut u = rng.gen::<f64>() * total;
    for (r, w) in words.iter().enumerate() {
        u -= 1.0 / (r + 1) as f64;
        if u <= 0.0 {
            return w;
        }
    }
    words[words.len() - 1]
}

fn noun_phrase(rng: &mut ChaCha8Rng, out: &mut Vec<&'static str>) {
    out.push(zipf(rng, DETERMINERS));
    if rng.gen_bool(0.45) {
        out.push(zipf(rng, ADJECTIVES));
    }
    out.push(zipf(rng, NOUNS));
    if rng.gen_bool(0.2) {
        out.push(zipf(rng, PREPOSITIONS));
        out.push(zipf(rng, DETERMINERS));
        out.push(zipf(rng, NOUNS));
    }
}

fn clause(rng: &mut ChaCha8Rng, out: &mut Vec<&'static str>) {
    noun_phrase(rng, out);
    if rng.gen_bool(0.25) {
        out.push(zipf(rng, ADVERBS));
    }
    if rng.gen_bool(0.65) {
        out.push(zipf(rng, VERBS));
        noun_phrase(rng, out);
    } else {
        out.push(zipf(rng, INTRANSITIVE));
        if rng.gen_bool(0.5) {
            out.push(zipf(rng, PREPOSITIONS));
            noun_phrase(rng, out);
        }
    }
}

/// Deterministic English-like text of at least `min_chars` characters built
/// from a small phrase grammar with Zipf-weighted word choice.
pub fn synthetic_text(seed: u64, min_chars: usize) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut text = String::with_capacity(min_chars + 256);
    let mut words = Vec::new();
    let mut sentences_in_paragraph = 0;
    while text.len() < min_chars {
        words.clear();
        clause(&mut rng, &mut words);
        let joined = if rng.gen_bool(0.35) {
            let mut second = Vec::new();
            clause(&mut rng, &mut second);
            format!(
                "{}, {} {}",
                words.join(" "),
                zipf(&mut rng, CONJUNCTIONS),
                second.join(" ")
            )
        } else {
            words.join(" ")
        };
        let mut chars = joined.chars();
        if let Some(first) = chars.next() {
            text.extend(first.to_uppercase());
            text.push_str(chars.as_str());
        }
        text.push('.');
        sentences_in_paragraph += 1;
        if sentences_in_paragraph >= rng.gen_range(3..8) {
            text.push('\n');
            sentences_in_paragraph = 0;
        } else {
            text.push(' ');
        }
    }
    text
}
