mod common;

use common::{random_flow, toy_model};
use netfound_core::tokenizer::{
    TokenizedFlow, BURST_LEN, GRID_LEN, MAX_BURSTS, META_WIDTH, PAD, SLOTS_PER_PACKET, VOCAB_SIZE,
};
use netfound_model::attention::{extract_attention, LayerKind};
use netfound_model::batch::FlowBatch;
use netfound_model::io::{load_model, save_model};
use netfound_model::{expected_param_count, Model, ModelConfig, NormStats, TaskLevel, FLOW_WIDTH};
use netfound_tensor::{Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn max_diff(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

/// Parameter count tallied module by module, written out independently of
/// the library's own formula.
fn tally(c: &ModelConfig) -> usize {
    let (q, f, v) = (c.hidden, c.ffn, c.vocab);
    let embeddings = v * q + 109 * q + 13 * q;
    let metadata = if c.linear_meta {
        5 * q + q
    } else {
        (5 + 1) * c.meta_hidden + (c.meta_hidden + 1) * q
    };
    let attention = (q + 1) * 3 * q + (q + 1) * q;
    let feed_forward = (q + 1) * f + (f + 1) * q;
    let norms = 2 * 2 * q;
    let layer = attention + feed_forward + norms;
    let final_norms = 2 * 2 * q;
    let mlm = (q + 1) * v;
    embeddings + metadata + q + 2 * c.layers * layer + final_norms + mlm
}

#[test]
fn toy_parameter_count_matches_tally() {
    let model = toy_model(1);
    let counted = model.params.element_count();
    assert_eq!(counted, tally(&model.config));
    assert_eq!(counted, expected_param_count(&model.config));
    let linear = ModelConfig {
        linear_meta: true,
        ..ModelConfig::toy()
    };
    let m = Model::new(linear.clone(), NormStats::default(), 1).unwrap();
    assert_eq!(m.params.element_count(), tally(&linear));
    let no_wb = ModelConfig {
        write_back: false,
        ..ModelConfig::toy()
    };
    assert_eq!(expected_param_count(&no_wb), tally(&no_wb));
}

#[test]
fn default_config_parameter_count() {
    let c = ModelConfig::default();
    assert_eq!(expected_param_count(&c), tally(&c));
}

#[test]
fn flow_encoder_sees_thirteen_rows_per_round() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let model = toy_model(2);
    for bursts in [1, 5, 12] {
        let flows = [random_flow(&mut rng, bursts), random_flow(&mut rng, 3)];
        let refs: Vec<&TokenizedFlow> = flows.iter().collect();
        let batch = FlowBatch::new(&refs).unwrap();
        let mut tape = Tape::new(&model.params);
        let enc = model.encode(&mut tape, &batch, None);
        assert_eq!(enc.flow_widths, vec![FLOW_WIDTH; model.config.layers]);
        assert_eq!(FLOW_WIDTH, 13);
        for &a in &enc.flow_attention {
            // One probability matrix per flow and head, each 13 x 13.
            for f in 0..2 {
                let p = tape.attention_probs(a, f, 0).unwrap();
                assert_eq!(p.len(), 13 * 13);
            }
        }
    }
}

#[test]
fn two_stage_variant_also_uses_thirteen_rows() {
    let config = ModelConfig {
        write_back: false,
        ..ModelConfig::toy()
    };
    let model = Model::new(config, NormStats::default(), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let flow = random_flow(&mut rng, 4);
    let batch = FlowBatch::new(&[&flow]).unwrap();
    let mut tape = Tape::new(&model.params);
    let enc = model.encode(&mut tape, &batch, None);
    assert_eq!(enc.flow_widths, vec![13, 13]);
    let out = model.infer(&[&flow]).unwrap();
    assert!(out[0].cls_f.iter().all(|x| x.is_finite()));
}

fn assert_outputs_equal(a: &netfound_model::FlowOutput, b: &netfound_model::FlowOutput, tol: f32) {
    assert!(max_diff(a.token_states.data(), b.token_states.data()) <= tol);
    assert!(max_diff(a.cls_b.data(), b.cls_b.data()) <= tol);
    assert!(max_diff(&a.cls_f, &b.cls_f) <= tol);
    assert_eq!(a.valid, b.valid);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn pad_region_values_never_matter(seed in any::<u64>(), bursts in 1usize..=12) {
        let model = toy_model(4);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let flow = random_flow(&mut rng, bursts);
        let mut fuzzed = flow.clone();
        for g in 0..GRID_LEN {
            if !fuzzed.valid[g] {
                fuzzed.tokens[g] = rng.gen();
            }
        }
        for b in bursts..MAX_BURSTS {
            for k in 0..META_WIDTH {
                fuzzed.metadata[b].0[k] = rng.gen_range(-1e6..1e6);
            }
        }
        let a = model.infer(&[&flow]).unwrap();
        let b = model.infer(&[&fuzzed]).unwrap();
        assert_outputs_equal(&a[0], &b[0], 0.0);
        let la = model.mlm_logits(&a[0], &[1, 2]);
        let lb = model.mlm_logits(&b[0], &[1, 2]);
        prop_assert_eq!(la.data(), lb.data());
    }

    #[test]
    fn outputs_do_not_depend_on_batch_neighbours(seed in any::<u64>(), na in 1usize..=12, nb in 1usize..=12) {
        let model = toy_model(5);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_flow(&mut rng, na);
        let b = random_flow(&mut rng, nb);
        let alone = model.infer(&[&a]).unwrap();
        let paired = model.infer(&[&b, &a]).unwrap();
        assert_outputs_equal(&alone[0], &paired[1], 1e-5);
    }
}

#[test]
fn absent_and_invalidated_bursts_are_equivalent() {
    let model = toy_model(6);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for trial in 0..10 {
        let full = random_flow(&mut rng, 12);
        let drop = if trial == 0 { 11 } else { rng.gen_range(0..12) };
        let mut absent = full.clone();
        absent.clear_burst(drop);
        let mut invalidated = full.clone();
        for p in 0..BURST_LEN {
            invalidated.valid[TokenizedFlow::index(drop, p)] = false;
        }
        let out = model.infer(&[&absent, &invalidated]).unwrap();
        assert_outputs_equal(&out[0], &out[1], 1e-6);
        assert!(out[0].cls_b.row(drop).iter().all(|&x| x == 0.0));
    }
}

#[test]
fn embedding_depends_on_token_position_and_metadata_only() {
    let model = toy_model(7);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut a = random_flow(&mut rng, 2);
    let mut b = random_flow(&mut rng, 3);
    // Burst 0 of both flows: same token at position 5, same metadata.
    let g = TokenizedFlow::index(0, 5);
    b.tokens[g] = a.tokens[g];
    b.metadata[0] = a.metadata[0];
    let embed = |flows: &[&TokenizedFlow]| {
        let batch = FlowBatch::new(flows).unwrap();
        let mut tape = Tape::new(&model.params);
        let e = model.embed(&mut tape, &batch);
        let rows: Vec<Vec<f32>> = (0..flows.len())
            .map(|f| tape.value(e).row(batch.row(f, g).unwrap()).to_vec())
            .collect();
        rows
    };
    let rows = embed(&[&a, &b]);
    assert_eq!(rows[0], rows[1]);
    // Flipping direction changes the embedding.
    a.metadata[0].0[0] = -a.metadata[0].0[0];
    let flipped = embed(&[&a]);
    assert!(max_diff(&flipped[0], &rows[0]) > 1e-6);
}

#[test]
fn intra_burst_packet_order_is_invisible_without_positions() {
    let mut model = toy_model(8);
    let id = model.params.id("emb.position").unwrap();
    let shape = model.params.get(id).shape().to_vec();
    *model.params.get_mut(id) = Tensor::zeros(&shape);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut flow = random_flow(&mut rng, 3);
    // Make burst 1 exactly three full packets.
    for p in 1..BURST_LEN {
        let g = TokenizedFlow::index(1, p);
        flow.valid[g] = p <= 3 * SLOTS_PER_PACKET;
        flow.tokens[g] = if flow.valid[g] { 4 + rng.gen_range(0..200) } else { PAD };
    }
    let mut swapped = flow.clone();
    for s in 0..SLOTS_PER_PACKET {
        let a = TokenizedFlow::index(1, 1 + s);
        let b = TokenizedFlow::index(1, 1 + 2 * SLOTS_PER_PACKET + s);
        swapped.tokens.swap(a, b);
    }
    assert_ne!(flow.tokens, swapped.tokens);
    let out = model.infer(&[&flow, &swapped]).unwrap();
    assert!(max_diff(out[0].cls_b.row(1), out[1].cls_b.row(1)) < 1e-5);
    assert!(max_diff(&out[0].cls_f, &out[1].cls_f) < 1e-5);
    let cls = TokenizedFlow::index(1, 0);
    assert!(max_diff(out[0].token_states.row(cls), out[1].token_states.row(cls)) < 1e-5);
}

#[test]
fn full_logit_grid_shape_and_finiteness() {
    let model = toy_model(9);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let flow = random_flow(&mut rng, 2);
    let out = model.infer(&[&flow]).unwrap();
    let logits = model.mlm_logits_full(&out[0]);
    assert_eq!(logits.shape(), &[MAX_BURSTS, BURST_LEN, VOCAB_SIZE]);
    assert!(logits.all_finite());
}

#[test]
fn zero_weight_head_gives_uniform_posterior() {
    let mut model = toy_model(10);
    model.set_head(3, 1).unwrap();
    for name in ["head.l2.w", "head.l2.b"] {
        let id = model.params.id(name).unwrap();
        let shape = model.params.get(id).shape().to_vec();
        *model.params.get_mut(id) = Tensor::zeros(&shape);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let flow = random_flow(&mut rng, 4);
    let out = model.infer(&[&flow]).unwrap();
    let flow_logits = model.cls_logits(&out[0], TaskLevel::Flow).unwrap();
    assert_eq!(flow_logits.shape(), &[1, 3]);
    let burst_logits = model.cls_logits(&out[0], TaskLevel::Burst).unwrap();
    assert_eq!(burst_logits.shape(), &[MAX_BURSTS, 3]);
    for row in flow_logits.data().chunks(3).chain(burst_logits.data().chunks(3)) {
        let z: f32 = row.iter().map(|x| x.exp()).sum();
        for x in row {
            assert!((x.exp() / z - 1.0 / 3.0).abs() < 1e-7);
        }
    }
}

#[test]
fn head_requires_two_classes_and_matching_size() {
    let mut model = toy_model(11);
    assert!(model.set_head(1, 0).is_err());
    model.set_head(4, 0).unwrap();
    assert!(model.set_head(3, 0).is_err());
    assert_eq!(model.head_classes(), Some(4));
    let out = model.infer(&[&TokenizedFlow::empty(6)]).unwrap();
    assert_eq!(out[0].cls_f.len(), 64);
}

#[test]
fn forward_passes_are_bitwise_repeatable() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let flows: Vec<TokenizedFlow> = (0..4).map(|i| random_flow(&mut rng, 3 * i + 1)).collect();
    let refs: Vec<&TokenizedFlow> = flows.iter().collect();
    let a = toy_model(12).infer(&refs).unwrap();
    let b = toy_model(12).infer(&refs).unwrap();
    assert_eq!(a, b);
    let c = toy_model(13).infer(&refs).unwrap();
    assert_ne!(a, c);
}

#[test]
fn token_ids_beyond_vocabulary_are_rejected() {
    let model = toy_model(14);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut flow = random_flow(&mut rng, 1);
    flow.tokens[TokenizedFlow::index(0, 1)] = VOCAB_SIZE as u32;
    assert!(model.infer(&[&flow]).is_err());
}

#[test]
fn attention_rows_are_distributions_over_valid_keys() {
    let model = toy_model(15);
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let flow = random_flow(&mut rng, 5);
    for round in 0..2 {
        for head in 0..4 {
            let m = extract_attention(&model, &flow, round, LayerKind::Burst(2), head).unwrap();
            assert_eq!(m.weights.shape(), &[BURST_LEN, BURST_LEN]);
            for q in 0..BURST_LEN {
                let row = m.weights.row(q);
                let valid_q = flow.is_valid(2, q);
                let total: f32 = row.iter().sum();
                if valid_q {
                    assert!((total - 1.0).abs() < 1e-5);
                } else {
                    assert_eq!(total, 0.0);
                }
                for (k, &w) in row.iter().enumerate() {
                    if !flow.is_valid(2, k) {
                        assert_eq!(w, 0.0, "PAD key {k} received attention");
                    }
                }
            }
            let m = extract_attention(&model, &flow, round, LayerKind::Flow, head).unwrap();
            assert_eq!(m.weights.shape(), &[13, 13]);
            assert_eq!(m.labels.last().map(String::as_str), Some("CLS_F"));
            for q in 0..13 {
                let total: f32 = m.weights.row(q).iter().sum();
                let expect = if q < 5 || q == 12 { 1.0 } else { 0.0 };
                assert!((total - expect).abs() < 1e-5, "row {q}: {total}");
                for k in 5..12 {
                    assert_eq!(m.weights.row(q)[k], 0.0);
                }
            }
        }
    }
    assert!(extract_attention(&model, &flow, 2, LayerKind::Flow, 0).is_err());
    assert!(extract_attention(&model, &flow, 0, LayerKind::Burst(7), 0).is_err());
}

#[test]
fn checkpoint_round_trip_reproduces_outputs_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("toy.nfck");
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let flows: Vec<TokenizedFlow> = (0..3).map(|i| random_flow(&mut rng, 4 * i + 1)).collect();
    let mut model = Model::new(ModelConfig::toy(), NormStats::fit(&flows), 16).unwrap();
    model.set_head(3, 2).unwrap();
    save_model(&model, &path).unwrap();
    let loaded = load_model(&path).unwrap();
    assert_eq!(loaded.config, model.config);
    assert_eq!(loaded.norm, model.norm);
    let refs: Vec<&TokenizedFlow> = flows.iter().collect();
    let a = model.infer(&refs).unwrap();
    let b = loaded.infer(&refs).unwrap();
    assert_eq!(a, b);
    let la = model.cls_logits(&a[0], TaskLevel::Flow).unwrap();
    let lb = loaded.cls_logits(&b[0], TaskLevel::Flow).unwrap();
    assert_eq!(la, lb);
}
