use std::path::Path;

use netfound_core::tokenizer::{MetadataVector, TokenizedFlow, MAX_BURSTS, META_WIDTH, VOCAB_SIZE};
use serde::{Deserialize, Serialize};

use crate::ModelError;

/// Architecture hyperparameters. Serialized as TOML next to checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Hidden width q.
    pub hidden: usize,
    pub heads: usize,
    /// Number of burst/flow encoder pairs.
    pub layers: usize,
    pub ffn: usize,
    pub vocab: usize,
    /// Hidden width of the metadata projection (ignored when `linear_meta`).
    pub meta_hidden: usize,
    pub dropout: f64,
    /// Write updated CLS_B states back into their bursts after every flow
    /// layer. When false, all burst layers run first and the flow layers
    /// then run as a separate stack.
    pub write_back: bool,
    /// Single affine metadata projection instead of the two-layer MLP.
    pub linear_meta: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: 768,
            heads: 24,
            layers: 12,
            ffn: 4 * 768,
            vocab: VOCAB_SIZE,
            meta_hidden: 1024,
            dropout: 0.1,
            write_back: true,
            linear_meta: false,
        }
    }
}

impl ModelConfig {
    /// Small preset for CPU experiments and tests.
    pub fn toy() -> Self {
        ModelConfig {
            hidden: 64,
            heads: 4,
            layers: 2,
            ffn: 256,
            meta_hidden: 128,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return bad("hidden width must be a positive multiple of heads");
        }
        if self.layers == 0 || self.ffn == 0 || self.meta_hidden == 0 {
            return bad("layers, ffn and meta_hidden must be positive");
        }
        if self.vocab != VOCAB_SIZE {
            return bad("vocab must match the tokenizer vocabulary");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self, ModelError> {
        let c: ModelConfig = toml::from_str(text).map_err(|e| ModelError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }
}

/// Frozen statistics for metadata normalization: packets, bytes and
/// interarrival go through `ln(1 + x)`, then every feature is z-scored.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: [f64; META_WIDTH],
    pub std: [f64; META_WIDTH],
}

impl Default for NormStats {
    fn default() -> Self {
        NormStats {
            mean: [0.0; META_WIDTH],
            std: [1.0; META_WIDTH],
        }
    }
}

fn squash(m: &MetadataVector) -> [f64; META_WIDTH] {
    let mut x = m.0.map(f64::from);
    for i in 1..4 {
        x[i] = x[i].max(0.0).ln_1p();
    }
    x
}

impl NormStats {
    /// Statistics over the metadata of every valid burst. Features with no
    /// spread keep unit scale so they normalize to zero.
    pub fn fit(flows: &[TokenizedFlow]) -> Self {
        let rows: Vec<[f64; META_WIDTH]> = flows
            .iter()
            .flat_map(|f| (0..MAX_BURSTS).filter(|&b| f.burst_valid(b)).map(|b| squash(&f.metadata[b])))
            .collect();
        if rows.is_empty() {
            return Self::default();
        }
        let n = rows.len() as f64;
        let mut mean = [0.0; META_WIDTH];
        let mut std = [0.0; META_WIDTH];
        for r in &rows {
            for i in 0..META_WIDTH {
                mean[i] += r[i] / n;
            }
        }
        for r in &rows {
            for i in 0..META_WIDTH {
                std[i] += (r[i] - mean[i]).powi(2) / n;
            }
        }
        for s in &mut std {
            *s = if s.sqrt() < 1e-6 { 1.0 } else { s.sqrt() };
        }
        // Rounded to f32 so that checkpoints, which store f32, reproduce
        // them exactly.
        let round = |xs: [f64; META_WIDTH]| xs.map(|x| x as f32 as f64);
        NormStats {
            mean: round(mean),
            std: round(std),
        }
    }

    pub fn apply(&self, m: &MetadataVector) -> [f64; META_WIDTH] {
        let mut x = squash(m);
        for i in 0..META_WIDTH {
            x[i] = (x[i] - self.mean[i]) / self.std[i];
        }
        x
    }
}
