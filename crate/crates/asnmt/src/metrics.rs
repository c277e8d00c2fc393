//! Quality metrics: corpus BLEU-4 with clipped n-gram counts, and
//! teacher-forced token accuracy.

use std::collections::HashMap;

use crate::data::{batch_iterator, ParallelCorpus, PAD};
use crate::error::{Error, Result};
use crate::model::{Mode, TransformerModel};
use crate::tensor::Tape;

pub const MAX_NGRAM: usize = 4;

/// Corpus BLEU-4 decomposition.
#[derive(Debug, Clone, Copy)]
pub struct BleuScore {
    pub precisions: [f64; MAX_NGRAM],
    pub brevity_penalty: f64,
    /// in [0, 100]; exactly 0 whenever any precision is 0 and smoothing
    /// is off
    pub score: f64,
    pub candidate_len: usize,
    pub reference_len: usize,
}

fn ngram_counts(tokens: &[usize], n: usize) -> HashMap<&[usize], usize> {
    let mut counts: HashMap<&[usize], usize> = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU-4: clipped n-gram precision per order, geometric
/// mean, brevity penalty exp(1 - ref/cand) when the candidate corpus is
/// shorter. `smooth` enables add-one smoothing for tiny corpora.
pub fn bleu(candidates: &[Vec<usize>], references: &[Vec<usize>], smooth: bool) -> Result<BleuScore> {
    if candidates.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if candidates.len() != references.len() {
        return Err(Error::InvalidArg(format!(
            "candidate and reference counts differ ({} vs {})",
            candidates.len(),
            references.len()
        )));
    }
    let mut clipped = [0usize; MAX_NGRAM];
    let mut total = [0usize; MAX_NGRAM];
    let mut candidate_len = 0usize;
    let mut reference_len = 0usize;
    for (cand, reference) in candidates.iter().zip(references) {
        candidate_len += cand.len();
        reference_len += reference.len();
        for n in 1..=MAX_NGRAM {
            let cand_counts = ngram_counts(cand, n);
            let ref_counts = ngram_counts(reference, n);
            for (gram, count) in &cand_counts {
                let allowed = ref_counts.get(gram).copied().unwrap_or(0);
                clipped[n - 1] += (*count).min(allowed);
            }
            total[n - 1] += cand.len().saturating_sub(n - 1);
        }
    }

    let mut precisions = [0.0; MAX_NGRAM];
    for n in 0..MAX_NGRAM {
        precisions[n] = if smooth {
            (clipped[n] + 1) as f64 / (total[n] + 1) as f64
        } else if total[n] > 0 {
            clipped[n] as f64 / total[n] as f64
        } else {
            0.0
        };
    }
    let brevity_penalty = if candidate_len == 0 {
        0.0
    } else if candidate_len > reference_len {
        1.0
    } else {
        (1.0 - reference_len as f64 / candidate_len as f64).exp()
    };
    let score = if precisions.iter().any(|&p| p == 0.0) {
        0.0
    } else {
        let mean_log: f64 = precisions.iter().map(|p| p.ln()).sum::<f64>() / MAX_NGRAM as f64;
        100.0 * brevity_penalty * mean_log.exp()
    };
    Ok(BleuScore { precisions, brevity_penalty, score, candidate_len, reference_len })
}

/// Fraction of non-pad target positions where the teacher-forced argmax
/// equals the reference token.
pub fn token_accuracy(
    model: &TransformerModel,
    corpus: &ParallelCorpus,
    batch_tokens: usize,
) -> Result<f64> {
    let batches = batch_iterator(corpus, batch_tokens, 0)?;
    let vocab = model.config.vocab_size;
    let mut correct = 0usize;
    let mut total = 0usize;
    for batch in &batches {
        let mut tape = Tape::new();
        let (logits, _) = model.forward_batch(&mut tape, batch, &mut Mode::Eval)?;
        let values = tape.value(logits);
        for (row, &target) in batch.tgt_out.iter().enumerate() {
            if target == PAD {
                continue;
            }
            let slice = &values[row * vocab..(row + 1) * vocab];
            let argmax = slice
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then_with(|| b.0.cmp(&a.0)))
                .map(|(i, _)| i)
                .unwrap();
            if argmax == target {
                correct += 1;
            }
            total += 1;
        }
    }
    Ok(correct as f64 / total as f64)
}
