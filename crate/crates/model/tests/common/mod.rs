#![allow(dead_code)]

use netfound_core::flow::FilterConfig;
use netfound_core::pipeline::synthetic_grids;
use netfound_core::synthgen::{CorpusOptions, ScenarioSpec};
use netfound_core::tokenizer::{
    field_token, MetadataVector, TokenizedFlow, BURST_LEN, CLS_B, MAX_BURSTS, SLOTS_PER_PACKET,
};
use netfound_model::{Model, ModelConfig, NormStats};
use rand::Rng;

/// Labelled grids from the three-class synthetic generator.
pub fn corpus(per_class: usize, seed: u64) -> Vec<TokenizedFlow> {
    let filter = FilterConfig::default();
    synthetic_grids(
        &ScenarioSpec::standard_classes(per_class, seed),
        &CorpusOptions { seed, ..Default::default() },
        &filter,
        &Default::default(),
        filter.gap_threshold_us,
    )
    .expect("synthetic corpus")
}

/// A grid with `bursts` valid bursts of random lengths and contents.
pub fn random_flow(rng: &mut impl Rng, bursts: usize) -> TokenizedFlow {
    let proto = [6u8, 17, 1][rng.gen_range(0..3)];
    let mut tf = TokenizedFlow::empty(proto);
    for b in 0..bursts.min(MAX_BURSTS) {
        let len = rng.gen_range(1..=6) * SLOTS_PER_PACKET;
        let len = len.min(BURST_LEN - 1);
        tf.tokens[TokenizedFlow::index(b, 0)] = CLS_B;
        tf.valid[TokenizedFlow::index(b, 0)] = true;
        for p in 1..=len {
            let g = TokenizedFlow::index(b, p);
            tf.tokens[g] = field_token(rng.gen_range(0..64));
            tf.valid[g] = true;
        }
        tf.metadata[b] = MetadataVector([
            if rng.gen() { 1.0 } else { -1.0 },
            rng.gen_range(1..7) as f32,
            rng.gen_range(60..9000) as f32,
            rng.gen_range(0..50_000) as f32,
            proto as f32,
        ]);
    }
    tf
}

pub fn toy_model(seed: u64) -> Model<f32> {
    Model::new(ModelConfig::toy(), NormStats::default(), seed).unwrap()
}

/// A toy model with metadata statistics fitted to `data`.
pub fn fitted_model(data: &[TokenizedFlow], seed: u64) -> Model<f32> {
    Model::new(ModelConfig::toy(), NormStats::fit(data), seed).unwrap()
}

/// A toy model with a vocabulary small enough for finite differences.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        hidden: 8,
        heads: 2,
        layers: 2,
        ffn: 16,
        meta_hidden: 8,
        ..ModelConfig::toy()
    }
}
