//! Deterministic synthetic parallel corpora, vocabulary handling and
//! length-bucketed batching.
//!
//! Corpus files are UTF-8, one sentence per line, space-separated tokens;
//! the vocab file is one token per line where the line number is the id.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Token ↔ id bijection with the four reserved ids fixed at 0..=3.
#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() {
            return Err(Error::Config("vocabulary must contain the reserved tokens".into()));
        }
        for (i, expect) in RESERVED.iter().enumerate() {
            if tokens[i] != *expect {
                return Err(Error::Config(format!(
                    "vocabulary line {i} must be {expect}, found {}",
                    tokens[i]
                )));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary token {t}")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    /// `<pad> <bos> <eos> <unk> w4 w5 ...` up to the requested size.
    pub fn synthetic(size: usize) -> Result<Self> {
        if size <= RESERVED.len() {
            return Err(Error::InvalidArg(format!(
                "vocab size must exceed {} to leave room for content tokens, got {size}",
                RESERVED.len()
            )));
        }
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        for i in RESERVED.len()..size {
            tokens.push(format!("w{i}"));
        }
        Ok(Vocab { index: tokens.iter().cloned().zip(0..).collect(), tokens })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Whitespace tokenization of already-tokenized text; unknown tokens
    /// map to `<unk>`.
    pub fn tokenize(&self, line: &str) -> Vec<usize> {
        line.split_whitespace().map(|t| self.id(t).unwrap_or(UNK)).collect()
    }

    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter().map(|&id| self.token(id)).collect::<Vec<_>>().join(" ")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.tokens.join("\n") + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Vocab::new(text.lines().map(str::to_string).collect())
    }
}

/// Synthetic task families.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Copy,
    Reverse,
    LexicalSwap,
}

impl TaskKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(TaskKind::Copy),
            "reverse" => Ok(TaskKind::Reverse),
            "lexical-swap" => Ok(TaskKind::LexicalSwap),
            other => Err(Error::InvalidArg(format!(
                "unknown task `{other}` (expected copy, reverse or lexical-swap)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
    Test,
}

/// Aligned (source, target) token-id pairs for one split.
#[derive(Debug, Clone)]
pub struct ParallelCorpus {
    pub split: Split,
    pub pairs: Vec<(Vec<usize>, Vec<usize>)>,
}

/// The three disjoint splits of one generated task.
#[derive(Debug, Clone)]
pub struct GeneratedTask {
    pub vocab: Vocab,
    pub train: ParallelCorpus,
    pub valid: ParallelCorpus,
    pub test: ParallelCorpus,
}

/// Generate a deterministic toy parallel corpus. Sources are distinct
/// across all splits, so the splits are disjoint by construction; content
/// tokens come from ids 4..vocab_size only.
pub fn gen_task(
    kind: TaskKind,
    vocab_size: usize,
    count: usize,
    len_range: (usize, usize),
    seed: u64,
) -> Result<GeneratedTask> {
    let vocab = Vocab::synthetic(vocab_size)?;
    let (lo, hi) = len_range;
    if lo == 0 || lo > hi {
        return Err(Error::InvalidArg(format!("invalid length range {lo}..{hi}")));
    }
    if count == 0 {
        return Err(Error::EmptyCorpus);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // fixed random bijection over content ids, drawn before the sentences
    // so it depends only on the seed
    let mut swap: Vec<usize> = (RESERVED.len()..vocab_size).collect();
    swap.shuffle(&mut rng);
    let map_token = |kind: TaskKind, id: usize| match kind {
        TaskKind::LexicalSwap => swap[id - RESERVED.len()],
        _ => id,
    };

    let held_out = (count / 10).clamp(1, 2000);
    let total = count + 2 * held_out;
    let mut seen: HashSet<Vec<usize>> = HashSet::with_capacity(total);
    let mut sources: Vec<Vec<usize>> = Vec::with_capacity(total);
    let mut attempts: usize = 0;
    let max_attempts = total.saturating_mul(100) + 10_000;
    while sources.len() < total {
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::InvalidArg(format!(
                "cannot draw {total} distinct sentences from vocab {vocab_size} with lengths {lo}..{hi}"
            )));
        }
        let len = rng.gen_range(lo..=hi);
        let sent: Vec<usize> =
            (0..len).map(|_| rng.gen_range(RESERVED.len()..vocab_size)).collect();
        if seen.insert(sent.clone()) {
            sources.push(sent);
        }
    }

    let make_pairs = |sources: &[Vec<usize>]| -> Vec<(Vec<usize>, Vec<usize>)> {
        sources
            .iter()
            .map(|src| {
                let tgt: Vec<usize> = match kind {
                    TaskKind::Copy => src.clone(),
                    TaskKind::Reverse => src.iter().rev().cloned().collect(),
                    TaskKind::LexicalSwap => src.iter().map(|&t| map_token(kind, t)).collect(),
                };
                (src.clone(), tgt)
            })
            .collect()
    };

    Ok(GeneratedTask {
        vocab,
        train: ParallelCorpus { split: Split::Train, pairs: make_pairs(&sources[..count]) },
        valid: ParallelCorpus {
            split: Split::Valid,
            pairs: make_pairs(&sources[count..count + held_out]),
        },
        test: ParallelCorpus {
            split: Split::Test,
            pairs: make_pairs(&sources[count + held_out..]),
        },
    })
}

/// A padded teacher-forcing batch. Sources carry a trailing `<eos>`;
/// decoder inputs are `<bos>` + target, labels are target + `<eos>`.
#[derive(Debug, Clone)]
pub struct Batch {
    pub sentences: usize,
    pub src_width: usize,
    pub tgt_width: usize,
    pub src: Vec<usize>,
    pub src_len: Vec<usize>,
    pub tgt_in: Vec<usize>,
    pub tgt_out: Vec<usize>,
    pub tgt_len: Vec<usize>,
    /// non-pad label count, the token measure used for batch sizing
    pub target_tokens: usize,
}

impl Batch {
    pub fn from_pairs(pairs: &[(Vec<usize>, Vec<usize>)]) -> Batch {
        assert!(!pairs.is_empty(), "a batch needs at least one sentence");
        let src_width = pairs.iter().map(|(s, _)| s.len() + 1).max().unwrap();
        let tgt_width = pairs.iter().map(|(_, t)| t.len() + 1).max().unwrap();
        let n = pairs.len();
        let mut batch = Batch {
            sentences: n,
            src_width,
            tgt_width,
            src: vec![PAD; n * src_width],
            src_len: Vec::with_capacity(n),
            tgt_in: vec![PAD; n * tgt_width],
            tgt_out: vec![PAD; n * tgt_width],
            tgt_len: Vec::with_capacity(n),
            target_tokens: 0,
        };
        for (i, (src, tgt)) in pairs.iter().enumerate() {
            let s = &mut batch.src[i * src_width..];
            s[..src.len()].copy_from_slice(src);
            s[src.len()] = EOS;
            batch.src_len.push(src.len() + 1);

            let ti = &mut batch.tgt_in[i * tgt_width..];
            ti[0] = BOS;
            ti[1..=tgt.len()].copy_from_slice(tgt);
            let to = &mut batch.tgt_out[i * tgt_width..];
            to[..tgt.len()].copy_from_slice(tgt);
            to[tgt.len()] = EOS;
            batch.tgt_len.push(tgt.len() + 1);
            batch.target_tokens += tgt.len() + 1;
        }
        batch
    }
}

/// Length-bucketed padded batches: sentences sorted by target length,
/// packed so padded target tokens stay within `max_tokens`, with the
/// batch order shuffled by the seed. Every sentence appears exactly once.
pub fn batch_iterator(
    corpus: &ParallelCorpus,
    max_tokens: usize,
    seed: u64,
) -> Result<Vec<Batch>> {
    if corpus.pairs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    for (src, tgt) in &corpus.pairs {
        let longest = src.len().max(tgt.len());
        if longest + 2 > max_tokens {
            return Err(Error::SequenceTooLong { len: longest, limit: max_tokens - 2 });
        }
    }
    let mut order: Vec<usize> = (0..corpus.pairs.len()).collect();
    order.sort_by_key(|&i| (corpus.pairs[i].1.len(), corpus.pairs[i].0.len(), i));

    let mut batches: Vec<Vec<usize>> = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    for &i in &order {
        let width = corpus.pairs[i].1.len() + 1;
        // sorted by target length, so `width` is the running maximum
        if !current.is_empty() && (current.len() + 1) * width > max_tokens {
            batches.push(std::mem::take(&mut current));
        }
        current.push(i);
    }
    if !current.is_empty() {
        batches.push(current);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    batches.shuffle(&mut rng);

    Ok(batches
        .into_iter()
        .map(|ids| {
            let pairs: Vec<_> = ids.into_iter().map(|i| corpus.pairs[i].clone()).collect();
            Batch::from_pairs(&pairs)
        })
        .collect())
}

pub fn write_corpus(dir: &Path, name: &str, corpus: &ParallelCorpus, vocab: &Vocab) -> Result<()> {
    let mut src_text = String::new();
    let mut tgt_text = String::new();
    for (src, tgt) in &corpus.pairs {
        src_text.push_str(&vocab.detokenize(src));
        src_text.push('\n');
        tgt_text.push_str(&vocab.detokenize(tgt));
        tgt_text.push('\n');
    }
    std::fs::write(dir.join(format!("{name}.src")), src_text)?;
    std::fs::write(dir.join(format!("{name}.tgt")), tgt_text)?;
    Ok(())
}

pub fn read_lines(path: &Path, vocab: &Vocab) -> Result<Vec<Vec<usize>>> {
    let text = std::fs::read_to_string(path)?;
    Ok(text.lines().map(|l| vocab.tokenize(l)).collect())
}

pub fn read_corpus(dir: &Path, name: &str, split: Split, vocab: &Vocab) -> Result<ParallelCorpus> {
    let src = read_lines(&dir.join(format!("{name}.src")), vocab)?;
    let tgt = read_lines(&dir.join(format!("{name}.tgt")), vocab)?;
    if src.len() != tgt.len() {
        return Err(Error::Config(format!(
            "{name}: source and target line counts differ ({} vs {})",
            src.len(),
            tgt.len()
        )));
    }
    if src.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(ParallelCorpus { split, pairs: src.into_iter().zip(tgt).collect() })
}
