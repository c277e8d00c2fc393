//! Beam-search decoding with length normalization.
//!
//! Ranking is by cumulative log-probability divided by length^alpha,
//! where length counts generated tokens including the terminating
//! `<eos>`. Ties break toward the earlier finish, then lexicographically
//! smaller token sequence, so decoding is fully deterministic.

use crate::data::{BOS, EOS};
use crate::error::{Error, Result};
use crate::model::TransformerModel;

/// A finished hypothesis: generated tokens (no `<bos>`, `<eos>` stripped),
/// its cumulative log-probability and normalization bookkeeping.
#[derive(Debug, Clone)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub logprob: f64,
    /// number of generated tokens including `<eos>` (or the cutoff length)
    pub length: usize,
    /// step at which the hypothesis finished; cutoffs rank after genuine
    /// finishes of the same score and length
    pub finished_step: usize,
}

impl Hypothesis {
    pub fn normalized(&self, alpha: f64) -> f64 {
        self.logprob / (self.length as f64).powf(alpha)
    }
}

/// Deterministic comparison: higher normalized score first, then earlier
/// finish, then lexicographically smaller tokens.
pub fn better(a: &Hypothesis, b: &Hypothesis, alpha: f64) -> bool {
    let sa = a.normalized(alpha);
    let sb = b.normalized(alpha);
    if sa != sb {
        return sa > sb;
    }
    if a.finished_step != b.finished_step {
        return a.finished_step < b.finished_step;
    }
    a.tokens < b.tokens
}

fn log_softmax_vec(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    logits.iter().map(|x| x - lse).collect()
}

struct Live {
    prefix: Vec<usize>, // includes <bos>
    logprob: f64,
}

/// Beam search over the decoder for one source sentence (content tokens,
/// no `<eos>`); the output length is capped at 2·source length + 10.
pub fn beam_search(
    model: &TransformerModel,
    src: &[usize],
    k: usize,
    alpha: f64,
) -> Result<Vec<usize>> {
    beam_search_bounded(model, src, k, alpha, 2 * src.len() + 10)
}

/// Beam search with an explicit output-length bound. Returns the best
/// hypothesis' content tokens.
pub fn beam_search_bounded(
    model: &TransformerModel,
    src: &[usize],
    k: usize,
    alpha: f64,
    max_len: usize,
) -> Result<Vec<usize>> {
    Ok(beam_search_hypothesis(model, src, k, alpha, max_len)?.tokens)
}

/// Full-detail variant used by tests and evaluation.
pub fn beam_search_hypothesis(
    model: &TransformerModel,
    src: &[usize],
    k: usize,
    alpha: f64,
    max_len: usize,
) -> Result<Hypothesis> {
    if k == 0 {
        return Err(Error::InvalidArg("beam width must be at least 1".into()));
    }
    if alpha < 0.0 {
        return Err(Error::InvalidArg("length-normalization exponent must be nonnegative".into()));
    }
    if max_len == 0 {
        return Err(Error::InvalidArg("maximum output length must be at least 1".into()));
    }
    let mut src_eos = src.to_vec();
    src_eos.push(EOS);
    let src_len = src_eos.len();
    let enc = model.encode_sentence(&src_eos)?;
    let vocab = model.config.vocab_size;

    let mut live = vec![Live { prefix: vec![BOS], logprob: 0.0 }];
    let mut finished: Vec<Hypothesis> = Vec::new();

    for step in 1..=max_len {
        if live.is_empty() || finished.len() >= k {
            break;
        }
        // expand every live hypothesis over the full vocabulary
        let mut expansions: Vec<(f64, usize, usize)> = Vec::with_capacity(live.len() * vocab);
        for (li, hyp) in live.iter().enumerate() {
            let logits = model.prefix_logits(&enc, src_len, &hyp.prefix)?;
            let logp = log_softmax_vec(&logits);
            for (v, lp) in logp.iter().enumerate() {
                expansions.push((hyp.logprob + lp, li, v));
            }
        }
        expansions.sort_by(|a, b| {
            b.0.partial_cmp(&a.0).unwrap().then_with(|| a.1.cmp(&b.1)).then_with(|| a.2.cmp(&b.2))
        });
        // the top k expansions advance: <eos> ones finish, others stay live
        let mut next: Vec<Live> = Vec::with_capacity(k);
        for &(score, li, v) in expansions.iter().take(k) {
            if v == EOS {
                let tokens = live[li].prefix[1..].to_vec();
                finished.push(Hypothesis {
                    tokens,
                    logprob: score,
                    length: step,
                    finished_step: step,
                });
            } else {
                let mut prefix = live[li].prefix.clone();
                prefix.push(v);
                next.push(Live { prefix, logprob: score });
            }
        }
        live = next;
    }

    // hypotheses still alive at the length cap compete as cutoffs
    for hyp in live {
        finished.push(Hypothesis {
            tokens: hyp.prefix[1..].to_vec(),
            logprob: hyp.logprob,
            length: max_len,
            finished_step: max_len + 1,
        });
    }

    let mut best: Option<Hypothesis> = None;
    for h in finished {
        let replace = match &best {
            None => true,
            Some(b) => better(&h, b, alpha),
        };
        if replace {
            best = Some(h);
        }
    }
    best.ok_or_else(|| Error::InvalidArg("beam search produced no hypotheses".into()))
}

/// Greedy decoding: follow the argmax until `<eos>` or the length cap.
pub fn greedy_decode(model: &TransformerModel, src: &[usize], max_len: usize) -> Result<Vec<usize>> {
    let mut src_eos = src.to_vec();
    src_eos.push(EOS);
    let enc = model.encode_sentence(&src_eos)?;
    let mut prefix = vec![BOS];
    for _ in 0..max_len {
        let logits = model.prefix_logits(&enc, src_eos.len(), &prefix)?;
        let argmax = logits
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then_with(|| b.0.cmp(&a.0)))
            .map(|(i, _)| i)
            .unwrap();
        if argmax == EOS {
            break;
        }
        prefix.push(argmax);
    }
    Ok(prefix[1..].to_vec())
}

/// Recompute the cumulative log-probability of a generated sequence —
/// the re-check for beam bookkeeping. `generated` excludes `<bos>` and
/// includes `<eos>` for finished hypotheses.
pub fn sequence_logprob(model: &TransformerModel, src: &[usize], generated: &[usize]) -> Result<f64> {
    let mut src_eos = src.to_vec();
    src_eos.push(EOS);
    let enc = model.encode_sentence(&src_eos)?;
    let mut prefix = vec![BOS];
    let mut total = 0.0;
    for &tok in generated {
        let logits = model.prefix_logits(&enc, src_eos.len(), &prefix)?;
        let logp = log_softmax_vec(&logits);
        total += logp[tok];
        prefix.push(tok);
    }
    Ok(total)
}
