//! Architecture hyperparameters and the per-layer width bookkeeping that
//! survives compaction.

/// Architecture hyperparameters. `d_ffn` and the head dimensions are the
/// *construction* widths; after compaction the actual per-layer widths
/// live in [`ModelLayout`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Encoder and decoder layer count (each).
    pub num_layers: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub d_ffn: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub dropout: f64,
    pub label_smoothing: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_layers: 6,
            d_model: 512,
            num_heads: 8,
            d_ffn: 2048,
            // typical joint subword vocabulary size at full scale
            vocab_size: 35_000,
            max_positions: 1024,
            dropout: 0.1,
            label_smoothing: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> crate::error::Result<()> {
        use crate::error::Error;
        if self.d_model == 0 || self.num_heads == 0 || self.d_model % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "d_model ({}) must be a positive multiple of num_heads ({})",
                self.d_model, self.num_heads
            )));
        }
        if self.d_ffn == 0 {
            return Err(Error::Config("d_ffn must be at least 1".into()));
        }
        // the model itself only needs pad/bos/eos; text handling demands
        // the full reserved set and checks it separately
        if self.vocab_size < 3 {
            return Err(Error::Config("vocab_size must cover pad, bos and eos".into()));
        }
        if self.max_positions < 3 {
            return Err(Error::Config("max_positions too small".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.num_heads
    }
}

/// Surviving widths of one attention sub-component, per head. Query and
/// key rows prune in pairs (they meet in the score dot product), value
/// rows pair with output-projection columns.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttnWidths {
    pub qk_dims: Vec<usize>,
    pub v_dims: Vec<usize>,
}

impl AttnWidths {
    pub fn full(num_heads: usize, head_dim: usize) -> Self {
        AttnWidths { qk_dims: vec![head_dim; num_heads], v_dims: vec![head_dim; num_heads] }
    }

    pub fn qk_total(&self) -> usize {
        self.qk_dims.iter().sum()
    }

    pub fn v_total(&self) -> usize {
        self.v_dims.iter().sum()
    }

    fn param_count(&self, d: usize) -> usize {
        let qk = self.qk_total();
        let v = self.v_total();
        let mut n = d; // output bias is always present
        if qk > 0 {
            n += 2 * qk * d + 2 * qk; // wq, wk and their biases
        }
        if v > 0 {
            n += v * d + v; // wv, bv
            n += d * v; // wo
        }
        n
    }
}

/// Widths of one layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerWidths {
    pub self_attn: AttnWidths,
    /// Present on decoder layers only.
    pub cross_attn: Option<AttnWidths>,
    pub ffn: usize,
}

impl LayerWidths {
    fn param_count(&self, d: usize) -> usize {
        let mut n = self.self_attn.param_count(d) + 2 * d; // + norm
        if let Some(cross) = &self.cross_attn {
            n += cross.param_count(d) + 2 * d;
        }
        // ffn: w1 [w,d], b1 [w], w2 [d,w]; b2 survives even at width 0
        n += d;
        if self.ffn > 0 {
            n += 2 * self.ffn * d + self.ffn;
        }
        n += 2 * d; // ffn norm
        n
    }
}

/// Actual widths of every layer; starts uniform and turns ragged as
/// compaction deletes units.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelLayout {
    pub encoder: Vec<LayerWidths>,
    pub decoder: Vec<LayerWidths>,
}

impl ModelLayout {
    pub fn full(config: &ModelConfig) -> Self {
        let attn = || AttnWidths::full(config.num_heads, config.head_dim());
        ModelLayout {
            encoder: (0..config.num_layers)
                .map(|_| LayerWidths { self_attn: attn(), cross_attn: None, ffn: config.d_ffn })
                .collect(),
            decoder: (0..config.num_layers)
                .map(|_| LayerWidths { self_attn: attn(), cross_attn: Some(attn()), ffn: config.d_ffn })
                .collect(),
        }
    }
}

/// Closed-form parameter count; must equal the registry's actual element
/// count (checked in tests and used for size reporting).
pub fn param_count(config: &ModelConfig, layout: &ModelLayout) -> usize {
    let d = config.d_model;
    let v = config.vocab_size;
    let mut n = 2 * v * d; // token embeddings
    n += v * d + v; // output projection and bias
    n += 2 * (2 * d); // final norms
    for layer in layout.encoder.iter().chain(&layout.decoder) {
        n += layer.param_count(d);
    }
    n
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_matches_reported_baseline_size() {
        let config = ModelConfig::default();
        config.validate().unwrap();
        let layout = ModelLayout::full(&config);
        let count = param_count(&config, &layout);
        // the published baseline figure for this architecture family
        let reference = 98_200_000.0;
        let rel = (count as f64 - reference).abs() / reference;
        assert!(rel < 0.02, "parameter count {count} deviates {rel:.4} from {reference}");
    }

    #[test]
    fn ffn_width_zero_keeps_only_output_bias() {
        let config = ModelConfig {
            num_layers: 1,
            d_model: 4,
            num_heads: 2,
            d_ffn: 8,
            vocab_size: 10,
            max_positions: 16,
            dropout: 0.0,
            label_smoothing: 0.0,
        };
        let mut layout = ModelLayout::full(&config);
        let before = param_count(&config, &layout);
        layout.encoder[0].ffn = 0;
        let after = param_count(&config, &layout);
        // w1 (8*4) + b1 (8) + w2 (4*8) disappear, b2 stays
        assert_eq!(before - after, 8 * 4 + 8 + 4 * 8);
    }

    #[test]
    fn config_validation_rejects_bad_heads() {
        let config = ModelConfig { d_model: 10, num_heads: 4, ..ModelConfig::default() };
        assert!(config.validate().is_err());
    }
}
