use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{CLS, NUM_RESERVED, PAD, SEP, UNK};

pub const RESERVED_TOKENS: [&str; NUM_RESERVED] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

/// Token <-> id bijection with the five reserved ids fixed at the front.
#[derive(Clone, Debug)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>) -> Vocab {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocab { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Lookup with [UNK] fallback.
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }
}

/// Lowercased split on whitespace and punctuation; separators are dropped.
pub fn tokenize(line: &str) -> Vec<String> {
    line.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// Keep the `cap - 5` most frequent tokens, ties broken lexicographically.
pub fn build_vocab_from_texts(texts: &[String], cap: usize) -> Result<Vocab> {
    if cap < NUM_RESERVED + 1 {
        return Err(Error::Config(format!("vocab cap {cap} leaves no room for content tokens")));
    }
    let mut counts: HashMap<String, u64> = HashMap::new();
    for text in texts {
        for tok in tokenize(text) {
            *counts.entry(tok).or_insert(0) += 1;
        }
    }
    if counts.is_empty() {
        return Err(Error::Data("empty corpus: no tokens to build a vocabulary from".into()));
    }
    let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(cap - NUM_RESERVED);
    let mut tokens: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
    tokens.extend(ranked.into_iter().map(|(t, _)| t));
    Ok(Vocab::from_tokens(tokens))
}

pub fn build_vocab_from_files(paths: &[&Path], cap: usize) -> Result<Vocab> {
    let mut texts = Vec::with_capacity(paths.len());
    for p in paths {
        texts.push(fs::read_to_string(p).map_err(Error::io(*p))?);
    }
    build_vocab_from_texts(&texts, cap)
}

/// BERT-style packing: `[CLS] A [SEP]` or `[CLS] A [SEP] B [SEP]`, truncating
/// the longer segment first, padded to `max_len`.
pub fn encode_pair(
    a: &[String],
    b: Option<&[String]>,
    vocab: &Vocab,
    max_len: usize,
) -> Result<(Vec<usize>, Vec<usize>, Vec<u8>)> {
    if max_len < 3 {
        return Err(Error::Config(format!("max_len {max_len} cannot hold [CLS] t [SEP]")));
    }
    let specials = 2 + usize::from(b.is_some());
    let mut a_len = a.len();
    let mut b_len = b.map_or(0, <[String]>::len);
    while a_len + b_len + specials > max_len {
        if a_len > b_len {
            a_len -= 1;
        } else {
            b_len -= 1;
        }
    }
    let mut ids = Vec::with_capacity(max_len);
    let mut segments = Vec::with_capacity(max_len);
    ids.push(CLS);
    segments.push(0);
    for tok in &a[..a_len] {
        ids.push(vocab.id(tok));
        segments.push(0);
    }
    ids.push(SEP);
    segments.push(0);
    if let Some(b) = b {
        for tok in &b[..b_len] {
            ids.push(vocab.id(tok));
            segments.push(1);
        }
        ids.push(SEP);
        segments.push(1);
    }
    let mut mask = vec![1u8; ids.len()];
    while ids.len() < max_len {
        ids.push(PAD);
        segments.push(0);
        mask.push(0);
    }
    Ok((ids, segments, mask))
}

/// One padded example.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub segments: Vec<usize>,
    pub mask: Vec<u8>,
}

/// Token-id sequences plus a deterministic train/dev split (every eighth
/// example is dev) and a hash of the source.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub examples: Vec<Example>,
    pub train: Vec<usize>,
    pub dev: Vec<usize>,
    pub vocab_size: usize,
    pub source_hash: String,
}

impl Corpus {
    fn split(n: usize) -> (Vec<usize>, Vec<usize>) {
        let dev: Vec<usize> = (0..n).filter(|i| i % 8 == 7).collect();
        let train: Vec<usize> = (0..n).filter(|i| i % 8 != 7).collect();
        (train, dev)
    }

    pub fn validate(&self) -> Result<()> {
        for idx in self.train.iter().chain(&self.dev) {
            if *idx >= self.examples.len() {
                return Err(Error::Data(format!("split index {idx} out of range")));
            }
        }
        if self.train.iter().any(|i| self.dev.contains(i)) {
            return Err(Error::Data("train and dev splits overlap".into()));
        }
        for ex in &self.examples {
            if let Some(&id) = ex.tokens.iter().find(|&&id| id >= self.vocab_size) {
                return Err(Error::Data(format!("token id {id} exceeds vocab size {}", self.vocab_size)));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CorpusKind {
    /// Long-range repetition: three copies of one random segment per
    /// example, so every masked content token has a visible twin with
    /// overwhelming probability.
    Copy,
    /// Fixed random Markov chain; MLM is solvable from neighbors.
    Bigram,
}

impl CorpusKind {
    pub fn parse(s: &str) -> Option<CorpusKind> {
        match s {
            "copy" => Some(CorpusKind::Copy),
            "bigram" => Some(CorpusKind::Bigram),
            _ => None,
        }
    }

    fn name(self) -> &'static str {
        match self {
            CorpusKind::Copy => "copy",
            CorpusKind::Bigram => "bigram",
        }
    }
}

/// The bigram generator's row-stochastic transition matrix over the
/// `vocab_size - 5` content tokens; fixed by the seed.
pub fn bigram_matrix(seed: u64, vocab_size: usize) -> Vec<Vec<f64>> {
    let k = vocab_size - NUM_RESERVED;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6269_6772_616d); // "bigram"
    let mut rows = Vec::with_capacity(k);
    for _ in 0..k {
        let mut row: Vec<f64> = (0..k).map(|_| rng.gen::<f64>() + 0.05).collect();
        let sum: f64 = row.iter().sum();
        for w in &mut row {
            *w /= sum;
        }
        rows.push(row);
    }
    rows
}

fn sample_discrete<R: Rng>(weights: &[f64], rng: &mut R) -> usize {
    let mut r: f64 = rng.gen();
    for (i, &w) in weights.iter().enumerate() {
        r -= w;
        if r < 0.0 {
            return i;
        }
    }
    weights.len() - 1
}

/// Deterministic synthetic corpus of `size` examples padded to `seq_len`.
pub fn synth_corpus(kind: CorpusKind, size: usize, seed: u64, vocab_size: usize, seq_len: usize) -> Result<Corpus> {
    if vocab_size <= NUM_RESERVED {
        return Err(Error::Config(format!(
            "vocab_size {vocab_size} leaves no content tokens (need > {NUM_RESERVED})"
        )));
    }
    if size == 0 {
        return Err(Error::Data("corpus size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut examples = Vec::with_capacity(size);
    match kind {
        CorpusKind::Copy => {
            // [CLS] g [SEP] g [SEP] g [SEP]: needs seq_len >= 7.
            let seg_len = (seq_len.saturating_sub(4)) / 3;
            if seg_len == 0 {
                return Err(Error::Config(format!("seq_len {seq_len} too short for the copy layout")));
            }
            for _ in 0..size {
                let g: Vec<usize> = (0..seg_len).map(|_| rng.gen_range(NUM_RESERVED..vocab_size)).collect();
                let mut tokens = Vec::with_capacity(seq_len);
                let mut segments = Vec::with_capacity(seq_len);
                tokens.push(CLS);
                segments.push(0);
                for (rep, seg_id) in [(0usize, 0usize), (1, 1), (2, 1)] {
                    let _ = rep;
                    tokens.extend_from_slice(&g);
                    tokens.push(SEP);
                    for _ in 0..=seg_len {
                        segments.push(seg_id);
                    }
                }
                let mut mask = vec![1u8; tokens.len()];
                while tokens.len() < seq_len {
                    tokens.push(PAD);
                    segments.push(0);
                    mask.push(0);
                }
                examples.push(Example { tokens, segments, mask });
            }
        }
        CorpusKind::Bigram => {
            if seq_len < 4 {
                return Err(Error::Config(format!("seq_len {seq_len} too short for the bigram layout")));
            }
            let matrix = bigram_matrix(seed, vocab_size);
            let k = matrix.len();
            let max_chain = seq_len - 2;
            let min_chain = (max_chain / 2).max(1);
            for _ in 0..size {
                let chain_len = rng.gen_range(min_chain..=max_chain);
                let mut state = rng.gen_range(0..k);
                let mut tokens = vec![CLS, NUM_RESERVED + state];
                for _ in 1..chain_len {
                    state = sample_discrete(&matrix[state], &mut rng);
                    tokens.push(NUM_RESERVED + state);
                }
                tokens.push(SEP);
                let mut segments = vec![0usize; tokens.len()];
                let mut mask = vec![1u8; tokens.len()];
                while tokens.len() < seq_len {
                    tokens.push(PAD);
                    segments.push(0);
                    mask.push(0);
                }
                examples.push(Example { tokens, segments, mask });
            }
        }
    }
    let (train, dev) = Corpus::split(size);
    let mut hasher = Sha256::new();
    hasher.update(format!("{}:{size}:{seed}:{vocab_size}:{seq_len}", kind.name()));
    let source_hash = hex_digest(hasher);
    let corpus = Corpus { examples, train, dev, vocab_size, source_hash };
    corpus.validate()?;
    Ok(corpus)
}

/// Plain-text corpus: one sentence per line, single-segment encoding, vocab
/// derived from the file itself.
pub fn file_corpus(path: &Path, vocab_cap: usize, seq_len: usize) -> Result<(Corpus, Vocab)> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    let vocab = build_vocab_from_texts(std::slice::from_ref(&text), vocab_cap)?;
    let mut examples = Vec::new();
    for line in text.lines() {
        let toks = tokenize(line);
        if toks.is_empty() {
            continue;
        }
        let (tokens, segments, mask) = encode_pair(&toks, None, &vocab, seq_len)?;
        examples.push(Example { tokens, segments, mask });
    }
    if examples.is_empty() {
        return Err(Error::Data(format!("{}: no usable lines", path.display())));
    }
    let (train, dev) = Corpus::split(examples.len());
    let mut hasher = Sha256::new();
    hasher.update(text.as_bytes());
    let corpus = Corpus {
        examples,
        train,
        dev,
        vocab_size: vocab.len(),
        source_hash: hex_digest(hasher),
    };
    corpus.validate()?;
    Ok((corpus, vocab))
}

pub(crate) fn hex_digest(hasher: Sha256) -> String {
    hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
