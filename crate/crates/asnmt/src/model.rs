//! Pre-norm transformer encoder–decoder over a named-parameter registry.
//!
//! Every trainable matrix is addressable by a stable path string such as
//! `encoder.layer3.ffn.w1`, which is what the group-regularizer and the
//! compaction pass key on. Residual wiring is x + Sublayer(LayerNorm(x))
//! throughout, with a final LayerNorm on each side, so a sub-component
//! whose parameters are all zero contributes exactly zero and the layer
//! degrades to the identity.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::{AttnWidths, ModelConfig, ModelLayout};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::tensor::{Tape, TensorId};

pub const LN_EPS: f64 = 1e-5;

/// One named parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub path: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Param {
    pub fn new(path: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, data.len(), "param data must match its shape");
        Param { path: path.into(), shape, data }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Ordered registry mapping path strings to parameters. Order is the
/// construction order and is what checkpoints serialize.
#[derive(Debug, Clone, Default)]
pub struct ParamRegistry {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, param: Param) {
        assert!(
            !self.index.contains_key(&param.path),
            "duplicate parameter path {}",
            param.path
        );
        self.index.insert(param.path.clone(), self.params.len());
        self.params.push(param);
    }

    pub fn get(&self, path: &str) -> Option<&Param> {
        self.index.get(path).map(|&i| &self.params[i])
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut Param> {
        self.index.get(path).map(|&i| &mut self.params[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.params.iter().map(Param::numel).sum()
    }
}

/// Per-step tape handles for every registered parameter.
pub struct Vars {
    entries: Vec<(String, TensorId)>,
    by_path: HashMap<String, TensorId>,
}

impl Vars {
    pub fn get(&self, path: &str) -> TensorId {
        *self
            .by_path
            .get(path)
            .unwrap_or_else(|| panic!("no tape var for parameter {path}"))
    }

    pub fn entries(&self) -> &[(String, TensorId)] {
        &self.entries
    }
}

/// Forward-pass mode: training applies dropout from the given stream,
/// evaluation is deterministic.
pub enum Mode<'r> {
    Train { rng: &'r mut ChaCha8Rng },
    Eval,
}

#[derive(Debug, Clone)]
pub struct TransformerModel {
    pub config: ModelConfig,
    pub layout: ModelLayout,
    pub params: ParamRegistry,
}

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<f64> {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    (0..rows * cols).map(|_| rng.gen_range(-a..a)).collect()
}

fn push_norm(reg: &mut ParamRegistry, prefix: &str, d: usize) {
    reg.insert(Param::new(format!("{prefix}.gain"), vec![d], vec![1.0; d]));
    reg.insert(Param::new(format!("{prefix}.bias"), vec![d], vec![0.0; d]));
}

fn push_attention(reg: &mut ParamRegistry, rng: &mut ChaCha8Rng, prefix: &str, widths: &AttnWidths, d: usize) {
    let qk = widths.qk_total();
    let v = widths.v_total();
    if qk > 0 {
        reg.insert(Param::new(format!("{prefix}.wq"), vec![qk, d], xavier(rng, qk, d)));
        reg.insert(Param::new(format!("{prefix}.bq"), vec![qk], vec![0.0; qk]));
        reg.insert(Param::new(format!("{prefix}.wk"), vec![qk, d], xavier(rng, qk, d)));
        reg.insert(Param::new(format!("{prefix}.bk"), vec![qk], vec![0.0; qk]));
    }
    if v > 0 {
        reg.insert(Param::new(format!("{prefix}.wv"), vec![v, d], xavier(rng, v, d)));
        reg.insert(Param::new(format!("{prefix}.bv"), vec![v], vec![0.0; v]));
        reg.insert(Param::new(format!("{prefix}.wo"), vec![d, v], xavier(rng, d, v)));
    }
    reg.insert(Param::new(format!("{prefix}.bo"), vec![d], vec![0.0; d]));
}

fn push_ffn(reg: &mut ParamRegistry, rng: &mut ChaCha8Rng, prefix: &str, width: usize, d: usize) {
    if width > 0 {
        reg.insert(Param::new(format!("{prefix}.w1"), vec![width, d], xavier(rng, width, d)));
        reg.insert(Param::new(format!("{prefix}.b1"), vec![width], vec![0.0; width]));
        reg.insert(Param::new(format!("{prefix}.w2"), vec![d, width], xavier(rng, d, width)));
    }
    reg.insert(Param::new(format!("{prefix}.b2"), vec![d], vec![0.0; d]));
}

impl TransformerModel {
    /// Fresh model at the config's construction widths, Xavier-uniform
    /// matrices and zero biases, deterministic in the seed.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let layout = ModelLayout::full(&config);
        Self::with_layout(config, layout, seed)
    }

    pub fn with_layout(config: ModelConfig, layout: ModelLayout, seed: u64) -> Result<Self> {
        use rand::SeedableRng;
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let v = config.vocab_size;
        let mut reg = ParamRegistry::new();
        reg.insert(Param::new("encoder.embed.token", vec![v, d], xavier(&mut rng, v, d)));
        reg.insert(Param::new("decoder.embed.token", vec![v, d], xavier(&mut rng, v, d)));
        for (i, layer) in layout.encoder.iter().enumerate() {
            let p = format!("encoder.layer{i}");
            push_norm(&mut reg, &format!("{p}.self_attn_norm"), d);
            push_attention(&mut reg, &mut rng, &format!("{p}.self_attn"), &layer.self_attn, d);
            push_norm(&mut reg, &format!("{p}.ffn_norm"), d);
            push_ffn(&mut reg, &mut rng, &format!("{p}.ffn"), layer.ffn, d);
        }
        push_norm(&mut reg, "encoder.norm", d);
        for (i, layer) in layout.decoder.iter().enumerate() {
            let p = format!("decoder.layer{i}");
            push_norm(&mut reg, &format!("{p}.self_attn_norm"), d);
            push_attention(&mut reg, &mut rng, &format!("{p}.self_attn"), &layer.self_attn, d);
            let cross = layer.cross_attn.as_ref().expect("decoder layers carry cross attention");
            push_norm(&mut reg, &format!("{p}.cross_attn_norm"), d);
            push_attention(&mut reg, &mut rng, &format!("{p}.cross_attn"), cross, d);
            push_norm(&mut reg, &format!("{p}.ffn_norm"), d);
            push_ffn(&mut reg, &mut rng, &format!("{p}.ffn"), layer.ffn, d);
        }
        push_norm(&mut reg, "decoder.norm", d);
        reg.insert(Param::new("output.weight", vec![v, d], xavier(&mut rng, v, d)));
        reg.insert(Param::new("output.bias", vec![v], vec![0.0; v]));
        Ok(TransformerModel { config, layout, params: reg })
    }

    pub fn param_count(&self) -> usize {
        self.params.total_elements()
    }

    /// Register every parameter on the tape, in registry order.
    pub fn register_vars(&self, tape: &mut Tape) -> Vars {
        let mut entries = Vec::with_capacity(self.params.len());
        let mut by_path = HashMap::with_capacity(self.params.len());
        for p in self.params.iter() {
            let id = tape.leaf(p.data.clone(), p.shape.clone(), true);
            entries.push((p.path.clone(), id));
            by_path.insert(p.path.clone(), id);
        }
        Vars { entries, by_path }
    }

    fn maybe_dropout(&self, tape: &mut Tape, x: TensorId, mode: &mut Mode) -> TensorId {
        match mode {
            Mode::Train { rng } => tape.dropout(x, self.config.dropout, rng),
            Mode::Eval => x,
        }
    }

    /// Sinusoidal position encodings for `sentences` rows of `width`
    /// positions each, flattened to [sentences*width, d].
    fn positional(&self, sentences: usize, width: usize) -> Vec<f64> {
        let d = self.config.d_model;
        let mut row = vec![0.0; width * d];
        for pos in 0..width {
            for j in 0..d.div_ceil(2) {
                let theta = pos as f64 / 10_000f64.powf(2.0 * j as f64 / d as f64);
                row[pos * d + 2 * j] = theta.sin();
                if 2 * j + 1 < d {
                    row[pos * d + 2 * j + 1] = theta.cos();
                }
            }
        }
        let mut out = Vec::with_capacity(sentences * width * d);
        for _ in 0..sentences {
            out.extend_from_slice(&row);
        }
        out
    }

    fn embed(
        &self,
        tape: &mut Tape,
        vars: &Vars,
        table: &str,
        ids: &[usize],
        sentences: usize,
        width: usize,
        mode: &mut Mode,
    ) -> Result<TensorId> {
        if width > self.config.max_positions {
            return Err(Error::SequenceTooLong { len: width, limit: self.config.max_positions });
        }
        let d = self.config.d_model;
        let emb = tape.gather_rows(vars.get(table), ids)?;
        let scaled = tape.scale(emb, (d as f64).sqrt());
        let pos = tape.constant(self.positional(sentences, width), vec![sentences * width, d]);
        let x = tape.add(scaled, pos)?;
        Ok(self.maybe_dropout(tape, x, mode))
    }

    /// Multi-head scaled-dot-product attention over a padded batch.
    /// `masks[s]` is the additive [tq, tk] mask for sentence s; masked
    /// logits receive -inf before the softmax. The score scale stays
    /// 1/sqrt(d_model/num_heads) regardless of surviving head widths.
    #[allow(clippy::too_many_arguments)]
    fn attention(
        &self,
        tape: &mut Tape,
        vars: &Vars,
        prefix: &str,
        widths: &AttnWidths,
        q_in: TensorId,
        kv_in: TensorId,
        sentences: usize,
        tq: usize,
        tk: usize,
        masks: &[Vec<f64>],
    ) -> Result<TensorId> {
        let d = self.config.d_model;
        let scale = 1.0 / (self.config.head_dim() as f64).sqrt();
        let qk_total = widths.qk_total();
        let v_total = widths.v_total();
        let bo = vars.get(&format!("{prefix}.bo"));

        if v_total == 0 {
            // every value dimension pruned: the sub-component reduces to
            // its output bias
            let zeros = tape.constant(vec![0.0; sentences * tq * d], vec![sentences * tq, d]);
            return tape.add_row(zeros, bo);
        }

        let qk = if qk_total > 0 {
            let q = tape.matmul_nt(q_in, vars.get(&format!("{prefix}.wq")))?;
            let q = tape.add_row(q, vars.get(&format!("{prefix}.bq")))?;
            let k = tape.matmul_nt(kv_in, vars.get(&format!("{prefix}.wk")))?;
            let k = tape.add_row(k, vars.get(&format!("{prefix}.bk")))?;
            Some((q, k))
        } else {
            None
        };
        let v = tape.matmul_nt(kv_in, vars.get(&format!("{prefix}.wv")))?;
        let v = tape.add_row(v, vars.get(&format!("{prefix}.bv")))?;

        let mut ctx_parts = Vec::with_capacity(sentences);
        for s in 0..sentences {
            let qb = match qk {
                Some((q, _)) => Some(tape.narrow_rows(q, s * tq, tq)?),
                None => None,
            };
            let kb = match qk {
                Some((_, k)) => Some(tape.narrow_rows(k, s * tk, tk)?),
                None => None,
            };
            let vb = tape.narrow_rows(v, s * tk, tk)?;
            let mask = tape.constant(masks[s].clone(), vec![tq, tk]);
            let mut heads = Vec::new();
            let mut qk_off = 0;
            let mut v_off = 0;
            for h in 0..self.config.num_heads {
                let dq = widths.qk_dims[h];
                let dv = widths.v_dims[h];
                if dv == 0 {
                    // no value dimensions left: this head contributes
                    // nothing and its scores pull no gradient
                    qk_off += dq;
                    continue;
                }
                let scores = if dq > 0 {
                    let qh = tape.narrow_cols(qb.unwrap(), qk_off, dq)?;
                    let kh = tape.narrow_cols(kb.unwrap(), qk_off, dq)?;
                    let raw = tape.matmul_nt(qh, kh)?;
                    tape.scale(raw, scale)
                } else {
                    tape.constant(vec![0.0; tq * tk], vec![tq, tk])
                };
                let masked = tape.add(scores, mask)?;
                let attn = tape.softmax(masked, 1)?;
                let vh = tape.narrow_cols(vb, v_off, dv)?;
                heads.push(tape.matmul(attn, vh)?);
                qk_off += dq;
                v_off += dv;
            }
            ctx_parts.push(tape.concat_cols(&heads)?);
        }
        let ctx = tape.concat_rows(&ctx_parts)?;
        let out = tape.matmul_nt(ctx, vars.get(&format!("{prefix}.wo")))?;
        tape.add_row(out, bo)
    }

    /// Position-wise feed-forward: w2·max(0, w1·x + b1) + b2, evaluated
    /// row by row. At width 0 only the output bias remains.
    fn ffn(
        &self,
        tape: &mut Tape,
        vars: &Vars,
        prefix: &str,
        width: usize,
        x: TensorId,
        mode: &mut Mode,
    ) -> Result<TensorId> {
        let d = self.config.d_model;
        let b2 = vars.get(&format!("{prefix}.b2"));
        if width == 0 {
            let rows = tape.shape(x)[0];
            let zeros = tape.constant(vec![0.0; rows * d], vec![rows, d]);
            return tape.add_row(zeros, b2);
        }
        let h = tape.matmul_nt(x, vars.get(&format!("{prefix}.w1")))?;
        let h = tape.add_row(h, vars.get(&format!("{prefix}.b1")))?;
        let h = tape.relu(h);
        let h = self.maybe_dropout(tape, h, mode);
        let out = tape.matmul_nt(h, vars.get(&format!("{prefix}.w2")))?;
        tape.add_row(out, b2)
    }

    fn norm(&self, tape: &mut Tape, vars: &Vars, prefix: &str, x: TensorId) -> Result<TensorId> {
        tape.layer_norm(x, vars.get(&format!("{prefix}.gain")), vars.get(&format!("{prefix}.bias")), LN_EPS)
    }

    /// Encoder stack over padded source ids; returns [sentences*width, d].
    pub fn encode_ids(
        &self,
        tape: &mut Tape,
        vars: &Vars,
        src: &[usize],
        src_len: &[usize],
        width: usize,
        mode: &mut Mode,
    ) -> Result<TensorId> {
        let sentences = src_len.len();
        debug_assert_eq!(src.len(), sentences * width);
        let mut x = self.embed(tape, vars, "encoder.embed.token", src, sentences, width, mode)?;
        let masks: Vec<Vec<f64>> =
            (0..sentences).map(|s| key_pad_mask(width, width, src_len[s])).collect();
        for (i, layer) in self.layout.encoder.iter().enumerate() {
            let p = format!("encoder.layer{i}");
            let ln = self.norm(tape, vars, &format!("{p}.self_attn_norm"), x)?;
            let attn = self.attention(
                tape,
                vars,
                &format!("{p}.self_attn"),
                &layer.self_attn,
                ln,
                ln,
                sentences,
                width,
                width,
                &masks,
            )?;
            let attn = self.maybe_dropout(tape, attn, mode);
            x = tape.add(x, attn)?;
            let ln = self.norm(tape, vars, &format!("{p}.ffn_norm"), x)?;
            let f = self.ffn(tape, vars, &format!("{p}.ffn"), layer.ffn, ln, mode)?;
            let f = self.maybe_dropout(tape, f, mode);
            x = tape.add(x, f)?;
        }
        self.norm(tape, vars, "encoder.norm", x)
    }

    /// Decoder stack over padded, right-shifted target ids; returns
    /// per-position vocabulary logits [sentences*tgt_width, vocab].
    #[allow(clippy::too_many_arguments)]
    pub fn decode_ids(
        &self,
        tape: &mut Tape,
        vars: &Vars,
        tgt_in: &[usize],
        tgt_width: usize,
        enc_out: TensorId,
        src_len: &[usize],
        src_width: usize,
        mode: &mut Mode,
    ) -> Result<TensorId> {
        let sentences = src_len.len();
        debug_assert_eq!(tgt_in.len(), sentences * tgt_width);
        let mut y = self.embed(tape, vars, "decoder.embed.token", tgt_in, sentences, tgt_width, mode)?;
        let causal = causal_mask(tgt_width);
        let self_masks: Vec<Vec<f64>> = (0..sentences).map(|_| causal.clone()).collect();
        let cross_masks: Vec<Vec<f64>> =
            (0..sentences).map(|s| key_pad_mask(tgt_width, src_width, src_len[s])).collect();
        for (i, layer) in self.layout.decoder.iter().enumerate() {
            let p = format!("decoder.layer{i}");
            let ln = self.norm(tape, vars, &format!("{p}.self_attn_norm"), y)?;
            let attn = self.attention(
                tape,
                vars,
                &format!("{p}.self_attn"),
                &layer.self_attn,
                ln,
                ln,
                sentences,
                tgt_width,
                tgt_width,
                &self_masks,
            )?;
            let attn = self.maybe_dropout(tape, attn, mode);
            y = tape.add(y, attn)?;

            let cross = layer.cross_attn.as_ref().expect("decoder layer without cross attention");
            let ln = self.norm(tape, vars, &format!("{p}.cross_attn_norm"), y)?;
            let attn = self.attention(
                tape,
                vars,
                &format!("{p}.cross_attn"),
                cross,
                ln,
                enc_out,
                sentences,
                tgt_width,
                src_width,
                &cross_masks,
            )?;
            let attn = self.maybe_dropout(tape, attn, mode);
            y = tape.add(y, attn)?;

            let ln = self.norm(tape, vars, &format!("{p}.ffn_norm"), y)?;
            let f = self.ffn(tape, vars, &format!("{p}.ffn"), layer.ffn, ln, mode)?;
            let f = self.maybe_dropout(tape, f, mode);
            y = tape.add(y, f)?;
        }
        let y = self.norm(tape, vars, "decoder.norm", y)?;
        let logits = tape.matmul_nt(y, vars.get("output.weight"))?;
        tape.add_row(logits, vars.get("output.bias"))
    }

    /// Full teacher-forced pass over a padded batch; returns logits and
    /// the parameter handles for gradient extraction.
    pub fn forward_batch(&self, tape: &mut Tape, batch: &Batch, mode: &mut Mode) -> Result<(TensorId, Vars)> {
        let vars = self.register_vars(tape);
        let enc = self.encode_ids(tape, &vars, &batch.src, &batch.src_len, batch.src_width, mode)?;
        let logits = self.decode_ids(
            tape,
            &vars,
            &batch.tgt_in,
            batch.tgt_width,
            enc,
            &batch.src_len,
            batch.src_width,
            mode,
        )?;
        Ok((logits, vars))
    }

    /// Evaluate the encoder on one sentence and return the raw output
    /// values (used by the incremental decoder).
    pub fn encode_sentence(&self, src: &[usize]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let vars = self.register_vars(&mut tape);
        let enc =
            self.encode_ids(&mut tape, &vars, src, &[src.len()], src.len(), &mut Mode::Eval)?;
        Ok(tape.value(enc).to_vec())
    }

    /// Teacher-forced logits for a single prefix against a precomputed
    /// encoder output; returns the logits of the final position.
    pub fn prefix_logits(&self, enc_out: &[f64], src_len: usize, prefix: &[usize]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let vars = self.register_vars(&mut tape);
        let enc = tape.constant(enc_out.to_vec(), vec![src_len, self.config.d_model]);
        let logits = self.decode_ids(
            &mut tape,
            &vars,
            prefix,
            prefix.len(),
            enc,
            &[src_len],
            src_len,
            &mut Mode::Eval,
        )?;
        let v = self.config.vocab_size;
        let last = &tape.value(logits)[(prefix.len() - 1) * v..prefix.len() * v];
        Ok(last.to_vec())
    }
}

/// Additive mask hiding key positions at or beyond `kv_len`.
pub fn key_pad_mask(tq: usize, tk: usize, kv_len: usize) -> Vec<f64> {
    let mut m = vec![0.0; tq * tk];
    for q in 0..tq {
        for k in kv_len..tk {
            m[q * tk + k] = f64::NEG_INFINITY;
        }
    }
    m
}

/// Additive mask hiding future positions (strictly upper triangle).
pub fn causal_mask(t: usize) -> Vec<f64> {
    let mut m = vec![0.0; t * t];
    for q in 0..t {
        for k in (q + 1)..t {
            m[q * t + k] = f64::NEG_INFINITY;
        }
    }
    m
}

/// Label-smoothed negative log likelihood, normalized by the number of
/// non-pad target positions:
///   -(1/n) Σ_nonpad [(1-ε)·log p(target) + ε·mean_vocab log p]
pub fn label_smoothed_loss(
    tape: &mut Tape,
    logits: TensorId,
    targets: &[usize],
    pad_id: usize,
    smoothing: f64,
) -> Result<TensorId> {
    assert!((0.0..1.0).contains(&smoothing), "smoothing must be in [0, 1)");
    let shape = tape.shape(logits).to_vec();
    let (rows, vocab) = (shape[0], shape[1]);
    assert_eq!(targets.len(), rows, "one target per logit row");
    let n = targets.iter().filter(|&&t| t != pad_id).count();
    if n == 0 {
        return Err(Error::AllPadBatch);
    }
    let mut weights = vec![0.0; rows * vocab];
    for (r, &t) in targets.iter().enumerate() {
        if t == pad_id {
            continue;
        }
        if t >= vocab {
            return Err(Error::TokenOutOfRange { id: t, vocab_size: vocab });
        }
        let row = &mut weights[r * vocab..(r + 1) * vocab];
        for w in row.iter_mut() {
            *w = smoothing / vocab as f64;
        }
        row[t] += 1.0 - smoothing;
    }
    let w = tape.constant(weights, vec![rows, vocab]);
    let logp = tape.log_softmax(logits)?;
    let weighted = tape.mul(logp, w)?;
    let total = tape.sum(weighted);
    Ok(tape.scale(total, -1.0 / n as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::LayerWidths;
    use crate::data::{Batch, PAD};
    use rand::SeedableRng;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            num_layers: 1,
            d_model: 8,
            num_heads: 2,
            d_ffn: 16,
            vocab_size: 11,
            max_positions: 32,
            dropout: 0.0,
            label_smoothing: 0.0,
        }
    }

    fn batch_of(pairs: &[(&[usize], &[usize])]) -> Batch {
        let owned: Vec<(Vec<usize>, Vec<usize>)> =
            pairs.iter().map(|(s, t)| (s.to_vec(), t.to_vec())).collect();
        Batch::from_pairs(&owned)
    }

    #[test]
    fn registry_paths_are_unique_and_counted() {
        let model = TransformerModel::new(tiny_config(), 3).unwrap();
        let closed = crate::config::param_count(&model.config, &model.layout);
        assert_eq!(closed, model.param_count());
        assert!(model.params.get("encoder.layer0.ffn.w1").is_some());
        assert!(model.params.get("decoder.layer0.cross_attn.wq").is_some());
    }

    #[test]
    fn same_seed_builds_identical_models() {
        let a = TransformerModel::new(tiny_config(), 9).unwrap();
        let b = TransformerModel::new(tiny_config(), 9).unwrap();
        for (pa, pb) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(pa.path, pb.path);
            assert_eq!(pa.data, pb.data);
        }
    }

    #[test]
    fn ffn_hand_example() {
        // d=1, width=1: w1=[[1]], b1=[-1], w2=[[2]], b2=[0], x=3 → 2·max(0,3-1) = 4
        let config = ModelConfig {
            num_layers: 1,
            d_model: 1,
            num_heads: 1,
            d_ffn: 1,
            vocab_size: 5,
            max_positions: 8,
            dropout: 0.0,
            label_smoothing: 0.0,
        };
        let mut model = TransformerModel::new(config, 0).unwrap();
        model.params.get_mut("encoder.layer0.ffn.w1").unwrap().data = vec![1.0];
        model.params.get_mut("encoder.layer0.ffn.b1").unwrap().data = vec![-1.0];
        model.params.get_mut("encoder.layer0.ffn.w2").unwrap().data = vec![2.0];
        let mut tape = Tape::new();
        let vars = model.register_vars(&mut tape);
        let x = tape.constant(vec![3.0], vec![1, 1]);
        let y = model.ffn(&mut tape, &vars, "encoder.layer0.ffn", 1, x, &mut Mode::Eval).unwrap();
        assert_eq!(tape.value(y), &[4.0]);
    }

    #[test]
    fn ffn_zero_params_give_zero_output() {
        let mut model = TransformerModel::new(tiny_config(), 1).unwrap();
        for path in ["encoder.layer0.ffn.w1", "encoder.layer0.ffn.b1", "encoder.layer0.ffn.b2"] {
            model.params.get_mut(path).unwrap().data.fill(0.0);
        }
        let mut tape = Tape::new();
        let vars = model.register_vars(&mut tape);
        let x = tape.constant((0..24).map(|i| i as f64 / 7.0).collect(), vec![3, 8]);
        let y = model.ffn(&mut tape, &vars, "encoder.layer0.ffn", 16, x, &mut Mode::Eval).unwrap();
        assert!(tape.value(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ffn_is_position_wise() {
        let model = TransformerModel::new(tiny_config(), 2).unwrap();
        let rows: Vec<f64> = (0..32).map(|i| (i as f64).sin()).collect();
        let permuted: Vec<f64> = rows[8..16]
            .iter()
            .chain(&rows[0..8])
            .chain(&rows[24..32])
            .chain(&rows[16..24])
            .cloned()
            .collect();
        let run = |data: Vec<f64>| {
            let mut tape = Tape::new();
            let vars = model.register_vars(&mut tape);
            let x = tape.constant(data, vec![4, 8]);
            let y = model.ffn(&mut tape, &vars, "encoder.layer0.ffn", 16, x, &mut Mode::Eval).unwrap();
            tape.value(y).to_vec()
        };
        let a = run(rows);
        let b = run(permuted);
        assert_eq!(&a[0..8], &b[8..16]);
        assert_eq!(&a[8..16], &b[0..8]);
        assert_eq!(&a[16..24], &b[24..32]);
        assert_eq!(&a[24..32], &b[16..24]);
    }

    #[test]
    fn single_position_single_head_attention_weight_is_one() {
        let config = ModelConfig {
            num_layers: 1,
            d_model: 4,
            num_heads: 1,
            d_ffn: 4,
            vocab_size: 6,
            max_positions: 8,
            dropout: 0.0,
            label_smoothing: 0.0,
        };
        let model = TransformerModel::new(config, 5).unwrap();
        let mut tape = Tape::new();
        let vars = model.register_vars(&mut tape);
        let x_data = vec![0.3, -0.8, 1.1, 0.25];
        let x = tape.constant(x_data.clone(), vec![1, 4]);
        let widths = model.layout.encoder[0].self_attn.clone();
        let masks = vec![vec![0.0]];
        let out = model
            .attention(&mut tape, &vars, "encoder.layer0.self_attn", &widths, x, x, 1, 1, 1, &masks)
            .unwrap();
        // softmax over one element is exactly 1, so out = wo·(wv·x + bv) + bo
        let wv = &model.params.get("encoder.layer0.self_attn.wv").unwrap().data;
        let wo = &model.params.get("encoder.layer0.self_attn.wo").unwrap().data;
        let mut vproj = vec![0.0; 4];
        for r in 0..4 {
            vproj[r] = (0..4).map(|c| wv[r * 4 + c] * x_data[c]).sum::<f64>();
        }
        let mut expect = vec![0.0; 4];
        for r in 0..4 {
            expect[r] = (0..4).map(|c| wo[r * 4 + c] * vproj[c]).sum::<f64>();
        }
        for (g, e) in tape.value(out).iter().zip(&expect) {
            assert!((g - e).abs() < 1e-12, "attention single-position mismatch: {g} vs {e}");
        }
    }

    /// Independent dense reference for multi-head attention: plain loops
    /// over raw parameter data, no tape.
    #[allow(clippy::too_many_arguments)]
    fn reference_mha(
        model: &TransformerModel,
        prefix: &str,
        q_in: &[f64],
        kv_in: &[f64],
        tq: usize,
        tk: usize,
        mask: &[f64],
    ) -> Vec<f64> {
        let d = model.config.d_model;
        let h = model.config.num_heads;
        let dh = d / h;
        let get = |name: &str| &model.params.get(&format!("{prefix}.{name}")).unwrap().data;
        let (wq, bq, wk, bk) = (get("wq"), get("bq"), get("wk"), get("bk"));
        let (wv, bv, wo, bo) = (get("wv"), get("bv"), get("wo"), get("bo"));
        let proj = |x: &[f64], rows: usize, w: &[f64], b: &[f64]| -> Vec<f64> {
            let mut out = vec![0.0; rows * d];
            for r in 0..rows {
                for o in 0..d {
                    let mut acc = b[o];
                    for c in 0..d {
                        acc += x[r * d + c] * w[o * d + c];
                    }
                    out[r * d + o] = acc;
                }
            }
            out
        };
        let q = proj(q_in, tq, wq, bq);
        let k = proj(kv_in, tk, wk, bk);
        let v = proj(kv_in, tk, wv, bv);
        let mut ctx = vec![0.0; tq * d];
        for head in 0..h {
            let off = head * dh;
            for i in 0..tq {
                let mut scores = vec![0.0; tk];
                for j in 0..tk {
                    let mut s = 0.0;
                    for c in 0..dh {
                        s += q[i * d + off + c] * k[j * d + off + c];
                    }
                    scores[j] = s / (dh as f64).sqrt() + mask[i * tk + j];
                }
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let denom: f64 = exps.iter().sum();
                for j in 0..tk {
                    let w = exps[j] / denom;
                    for c in 0..dh {
                        ctx[i * d + off + c] += w * v[j * d + off + c];
                    }
                }
            }
        }
        let mut out = vec![0.0; tq * d];
        for r in 0..tq {
            for o in 0..d {
                let mut acc = bo[o];
                for c in 0..d {
                    acc += ctx[r * d + c] * wo[o * d + c];
                }
                out[r * d + o] = acc;
            }
        }
        out
    }

    #[test]
    fn attention_matches_independent_reference() {
        let mut model = TransformerModel::new(tiny_config(), 6).unwrap();
        // nonzero biases so the reference exercises them
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        for name in ["bq", "bk", "bv", "bo"] {
            for v in &mut model.params.get_mut(&format!("encoder.layer0.self_attn.{name}")).unwrap().data {
                *v = rng.gen_range(-0.5..0.5);
            }
        }
        let tq = 3;
        let tk = 4;
        let d = 8;
        let q_data: Vec<f64> = (0..tq * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let kv_data: Vec<f64> = (0..tk * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mask = key_pad_mask(tq, tk, 3);

        let mut tape = Tape::new();
        let vars = model.register_vars(&mut tape);
        let q = tape.constant(q_data.clone(), vec![tq, d]);
        let kv = tape.constant(kv_data.clone(), vec![tk, d]);
        let widths = model.layout.encoder[0].self_attn.clone();
        let out = model
            .attention(
                &mut tape,
                &vars,
                "encoder.layer0.self_attn",
                &widths,
                q,
                kv,
                1,
                tq,
                tk,
                &[mask.clone()],
            )
            .unwrap();
        let reference = reference_mha(&model, "encoder.layer0.self_attn", &q_data, &kv_data, tq, tk, &mask);
        for (g, e) in tape.value(out).iter().zip(&reference) {
            assert!((g - e).abs() < 1e-10, "mha mismatch: {g} vs {e}");
        }
    }

    #[test]
    fn causal_mask_blocks_future_positions() {
        let model = TransformerModel::new(tiny_config(), 7).unwrap();
        let src: &[usize] = &[4, 5, 6, 2];
        let run = |tgt: &[usize]| {
            let batch = batch_of(&[(src, tgt)]);
            let mut tape = Tape::new();
            let (logits, _) = model.forward_batch(&mut tape, &batch, &mut Mode::Eval).unwrap();
            tape.value(logits).to_vec()
        };
        let a = run(&[7, 8, 9]);
        let b = run(&[7, 8, 10]); // change only the last target token
        let v = model.config.vocab_size;
        // logits at positions 0..=2 (which see inputs bos,7,8) are bitwise equal
        assert_eq!(&a[0..3 * v], &b[0..3 * v]);
    }

    #[test]
    fn padding_does_not_change_non_pad_logits() {
        let model = TransformerModel::new(tiny_config(), 8).unwrap();
        let single = batch_of(&[(&[4, 5, 6], &[7, 8])]);
        let padded = batch_of(&[(&[4, 5, 6], &[7, 8]), (&[9, 10, 4, 5, 6, 7], &[4, 5, 6, 7, 8])]);
        let run = |batch: &Batch| {
            let mut tape = Tape::new();
            let (logits, _) = model.forward_batch(&mut tape, batch, &mut Mode::Eval).unwrap();
            tape.value(logits).to_vec()
        };
        let a = run(&single);
        let b = run(&padded);
        let v = model.config.vocab_size;
        // first sentence occupies the first tgt_width rows of the padded
        // batch; compare its non-pad positions (tgt len 2 + eos = 3)
        for pos in 0..3 {
            let lhs = &a[pos * v..(pos + 1) * v];
            let rhs = &b[pos * v..(pos + 1) * v];
            for (x, y) in lhs.iter().zip(rhs) {
                assert!((x - y).abs() < 1e-10, "padding changed logits at pos {pos}");
            }
        }
    }

    #[test]
    fn zero_layer_model_is_embeddings_plus_projection() {
        let config = ModelConfig { num_layers: 0, ..tiny_config() };
        let model = TransformerModel::new(config, 11).unwrap();
        let batch = batch_of(&[(&[4, 5], &[6])]);
        let mut tape = Tape::new();
        let (logits, _) = model.forward_batch(&mut tape, &batch, &mut Mode::Eval).unwrap();
        assert_eq!(tape.shape(logits), &[2, 11]); // bos + one token
        assert!(tape.value(logits).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn zeroed_ffn_sublayer_equals_dropped_ffn_sublayer() {
        // set one ffn's parameters to zero: sub-component output is
        // exactly zero and the layer output equals its residual input,
        // which is also what a width-0 layout computes
        let mut zeroed = TransformerModel::new(tiny_config(), 12).unwrap();
        for name in ["w1", "b1", "w2", "b2"] {
            zeroed.params.get_mut(&format!("encoder.layer0.ffn.{name}")).unwrap().data.fill(0.0);
        }
        let mut layout = zeroed.layout.clone();
        layout.encoder[0].ffn = 0;
        let mut dropped = TransformerModel::with_layout(tiny_config(), layout, 12).unwrap();
        for p in dropped.params.iter_mut() {
            p.data.copy_from_slice(&zeroed.params.get(&p.path).unwrap().data);
        }
        let batch = batch_of(&[(&[4, 5, 6], &[7, 8, 9])]);
        let run = |m: &TransformerModel| {
            let mut tape = Tape::new();
            let (logits, _) = m.forward_batch(&mut tape, &batch, &mut Mode::Eval).unwrap();
            tape.value(logits).to_vec()
        };
        assert_eq!(run(&zeroed), run(&dropped));
    }

    #[test]
    fn label_smoothed_loss_reduces_to_cross_entropy_at_zero() {
        let mut tape = Tape::new();
        let logits = tape.constant(vec![2.0, -1.0, 0.5, 0.1, 3.0, -0.5], vec![2, 3]);
        let loss = label_smoothed_loss(&mut tape, logits, &[2, 1], PAD, 0.0).unwrap();
        let expect = {
            let row = |r: &[f64], t: usize| {
                let max = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + r.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                -(r[t] - lse)
            };
            (row(&[2.0, -1.0, 0.5], 2) + row(&[0.1, 3.0, -0.5], 1)) / 2.0
        };
        assert!((tape.value(loss)[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn label_smoothed_loss_uniform_logits_is_log_vocab() {
        for eps in [0.0, 0.1, 0.5] {
            let mut tape = Tape::new();
            let logits = tape.constant(vec![0.7; 8], vec![2, 4]);
            let loss = label_smoothed_loss(&mut tape, logits, &[1, 3], PAD, eps).unwrap();
            assert!((tape.value(loss)[0] - 4.0f64.ln()).abs() < 1e-12, "eps={eps}");
        }
    }

    #[test]
    fn label_smoothed_loss_decreases_when_target_logit_grows() {
        let base = vec![0.2, -0.3, 0.4, 0.1];
        let eval = |target_logit: f64| {
            let mut row = base.clone();
            row[2] = target_logit;
            let mut tape = Tape::new();
            let logits = tape.constant(row, vec![1, 4]);
            let loss = label_smoothed_loss(&mut tape, logits, &[2], PAD, 0.1).unwrap();
            tape.value(loss)[0]
        };
        assert!(eval(1.0) < eval(0.4));
        assert!(eval(2.0) < eval(1.0));
    }

    #[test]
    fn label_smoothed_loss_rejects_all_pad() {
        let mut tape = Tape::new();
        let logits = tape.constant(vec![0.0; 6], vec![2, 3]);
        let err = label_smoothed_loss(&mut tape, logits, &[PAD, PAD], PAD, 0.1).unwrap_err();
        assert!(matches!(err, Error::AllPadBatch));
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        let model = TransformerModel::new(tiny_config(), 13).unwrap();
        let batch = batch_of(&[(&[4, 5, 6], &[7, 8]), (&[9, 10], &[4, 5, 6])]);
        let (max_err, _worst) = crate::gradcheck::model_grad_check(&model, &batch, 1e-5);
        assert!(max_err < 1e-4, "worst relative gradient error {max_err}");
    }

    #[test]
    fn forward_is_deterministic() {
        let model = TransformerModel::new(tiny_config(), 14).unwrap();
        let batch = batch_of(&[(&[4, 5, 6, 7], &[8, 9])]);
        let run = || {
            let mut tape = Tape::new();
            let (logits, _) = model.forward_batch(&mut tape, &batch, &mut Mode::Eval).unwrap();
            tape.value(logits).to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn token_id_out_of_range_is_reported() {
        let model = TransformerModel::new(tiny_config(), 15).unwrap();
        let batch = batch_of(&[(&[4, 99], &[5])]);
        let mut tape = Tape::new();
        let err = match model.forward_batch(&mut tape, &batch, &mut Mode::Eval) {
            Err(e) => e,
            Ok(_) => panic!("expected out-of-range token error"),
        };
        assert!(matches!(err, Error::TokenOutOfRange { id: 99, .. }));
    }

    #[test]
    fn ragged_attention_layout_still_runs() {
        let config = tiny_config();
        let mut layout = ModelLayout::full(&config);
        layout.encoder[0] = LayerWidths {
            self_attn: AttnWidths { qk_dims: vec![2, 0], v_dims: vec![3, 1] },
            cross_attn: None,
            ffn: 5,
        };
        let model = TransformerModel::with_layout(config, layout, 16).unwrap();
        let batch = batch_of(&[(&[4, 5, 6], &[7, 8])]);
        let mut tape = Tape::new();
        let (logits, _) = model.forward_batch(&mut tape, &batch, &mut Mode::Eval).unwrap();
        assert!(tape.value(logits).iter().all(|v| v.is_finite()));
    }
}
