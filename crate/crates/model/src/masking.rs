//! Masked-token corruption.

use netfound_core::tokenizer::{is_field_token, TokenizedFlow, FIELD_OFFSET, MASK, VOCAB_SIZE};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ModelError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskingConfig {
    /// Probability that a valid field token is selected.
    pub select_rate: f64,
    /// Of the selected tokens: replaced by MASK, left unchanged, replaced by
    /// a random field token.
    pub mask_frac: f64,
    pub keep_frac: f64,
    pub random_frac: f64,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        MaskingConfig {
            select_rate: 0.30,
            mask_frac: 0.80,
            keep_frac: 0.10,
            random_frac: 0.10,
        }
    }
}

impl MaskingConfig {
    /// Every selected token becomes MASK (used for evaluation).
    pub fn mask_only(select_rate: f64) -> Self {
        MaskingConfig {
            select_rate,
            mask_frac: 1.0,
            keep_frac: 0.0,
            random_frac: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let sum = self.mask_frac + self.keep_frac + self.random_frac;
        let fracs = [self.mask_frac, self.keep_frac, self.random_frac];
        if !(self.select_rate > 0.0 && self.select_rate < 1.0) {
            return Err(ModelError::Config("select rate must be in (0, 1)".into()));
        }
        if (sum - 1.0).abs() > 1e-9 || fracs.iter().any(|f| *f < 0.0) {
            return Err(ModelError::Config("mask/keep/random fractions must be non-negative and sum to 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Corruption {
    Mask,
    Keep,
    Random,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedFlow {
    pub corrupted: TokenizedFlow,
    /// Selected grid indices, ascending.
    pub selected: Vec<usize>,
    /// Original token at each selected index.
    pub targets: Vec<u32>,
    pub kinds: Vec<Corruption>,
}

/// RNG for corrupting flow `flow` in epoch `epoch`: a distinct stream per
/// pair, so masks differ across flows and epochs but replay exactly.
pub fn masking_rng(seed: u64, epoch: usize, flow: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 40) ^ flow as u64);
    rng
}

/// Selects each valid field token independently with `select_rate` and
/// corrupts it. CLS and PAD positions are never touched.
pub fn apply_masking(tf: &TokenizedFlow, cfg: &MaskingConfig, rng: &mut impl Rng) -> MaskedFlow {
    let mut out = MaskedFlow {
        corrupted: tf.clone(),
        selected: Vec::new(),
        targets: Vec::new(),
        kinds: Vec::new(),
    };
    for (g, (&t, &v)) in tf.tokens.iter().zip(&tf.valid).enumerate() {
        if !v || !is_field_token(t) {
            continue;
        }
        if rng.gen::<f64>() >= cfg.select_rate {
            continue;
        }
        let u = rng.gen::<f64>();
        let kind = if u < cfg.mask_frac {
            out.corrupted.tokens[g] = MASK;
            Corruption::Mask
        } else if u < cfg.mask_frac + cfg.keep_frac {
            Corruption::Keep
        } else {
            out.corrupted.tokens[g] = rng.gen_range(FIELD_OFFSET..VOCAB_SIZE as u32);
            Corruption::Random
        };
        out.selected.push(g);
        out.targets.push(t);
        out.kinds.push(kind);
    }
    out
}
