mod common;

use common::{corpus, random_flow, toy_model};
use netfound_core::tokenizer::{is_field_token, TokenizedFlow, MASK, VOCAB_SIZE};
use netfound_model::batch::FlowBatch;
use netfound_model::masking::{apply_masking, masking_rng, Corruption, MaskingConfig};
use netfound_model::pretrain::{
    evaluate_mlm, load_training, loss_csv, pretrain, selection_rows, StepRecord, TrainConfig,
};
use netfound_model::ModelError;
use netfound_tensor::Tape;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn masking_statistics_over_ten_thousand_flows() {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let cfg = MaskingConfig::default();
    let (mut eligible, mut selected) = (0usize, 0usize);
    let mut kinds = [0usize; 3];
    for i in 0..10_000 {
        let tf = random_flow(&mut rng, 1 + i % 12);
        let m = apply_masking(&tf, &cfg, &mut masking_rng(9, 0, i));
        eligible += tf.field_token_count();
        selected += m.selected.len();
        for (k, &g) in m.kinds.iter().zip(&m.selected) {
            assert!(tf.valid[g] && is_field_token(tf.tokens[g]), "selected a CLS or PAD slot");
            kinds[*k as usize] += 1;
        }
    }
    let frac = selected as f64 / eligible as f64;
    assert!((frac - 0.30).abs() <= 0.01, "selected {frac}");
    let n = selected as f64;
    let split = kinds.map(|c| c as f64 / n);
    assert!((split[0] - 0.8).abs() <= 0.02, "{split:?}");
    assert!((split[1] - 0.1).abs() <= 0.02, "{split:?}");
    assert!((split[2] - 0.1).abs() <= 0.02, "{split:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn corruption_respects_its_kind(seed in any::<u64>(), bursts in 0usize..=12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tf = random_flow(&mut rng, bursts);
        let m = apply_masking(&tf, &MaskingConfig::default(), &mut masking_rng(seed, 1, 2));
        prop_assert!(m.selected.windows(2).all(|w| w[0] < w[1]));
        for ((&g, &t), &k) in m.selected.iter().zip(&m.targets).zip(&m.kinds) {
            prop_assert_eq!(t, tf.tokens[g]);
            let c = m.corrupted.tokens[g];
            match k {
                Corruption::Mask => prop_assert_eq!(c, MASK),
                Corruption::Keep => prop_assert_eq!(c, t),
                Corruption::Random => prop_assert!(is_field_token(c) && (c as usize) < VOCAB_SIZE),
            }
        }
        for g in 0..tf.tokens.len() {
            if !m.selected.contains(&g) {
                prop_assert_eq!(m.corrupted.tokens[g], tf.tokens[g]);
            }
        }
        prop_assert_eq!(&m.corrupted.valid, &tf.valid);
        let again = apply_masking(&tf, &MaskingConfig::default(), &mut masking_rng(seed, 1, 2));
        prop_assert_eq!(again, m);
    }
}

#[test]
fn masked_loss_matches_hand_computation() {
    let model = toy_model(31);
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let flow = random_flow(&mut rng, 2);
    let batch = FlowBatch::new(&[&flow]).unwrap();
    let rows: Vec<usize> = (0..5).map(|_| rng.gen_range(0..batch.rows())).collect();
    let targets: Vec<usize> = (0..5).map(|_| rng.gen_range(4..VOCAB_SIZE)).collect();
    let mut tape = Tape::new(&model.params);
    let enc = model.encode(&mut tape, &batch, None);
    let loss = model.mlm_loss(&mut tape, &enc, &rows, &targets);
    let got = tape.value(loss).data()[0] as f64;

    // Logits by explicit dot products, log-softmax in f64.
    let w = model.params.by_name("mlm.w").unwrap();
    let b = model.params.by_name("mlm.b").unwrap();
    let q = model.config.hidden;
    let states = tape.value(enc.tokens);
    let mut total = 0.0;
    for (&r, &t) in rows.iter().zip(&targets) {
        let h = states.row(r);
        let logits: Vec<f64> = (0..VOCAB_SIZE)
            .map(|v| b.data()[v] as f64 + (0..q).map(|i| h[i] as f64 * w.data()[i * VOCAB_SIZE + v] as f64).sum::<f64>())
            .collect();
        let max = logits.iter().cloned().fold(f64::MIN, f64::max);
        let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        total += lse - logits[t];
    }
    let expect = total / 5.0;
    assert!((got - expect).abs() < 1e-6 * expect.abs().max(1.0), "{got} vs {expect}");
}

#[test]
fn empty_selection_has_zero_loss_and_no_update() {
    let mut model = toy_model(32);
    let before = model.params.clone();
    let empty = vec![TokenizedFlow::empty(6); 3];
    let cfg = TrainConfig {
        lr: 1e-2,
        batch_size: 2,
        ..Default::default()
    };
    let (report, state) = pretrain(&mut model, &empty, &cfg, None, None, |_| {}).unwrap();
    assert_eq!(state.step, 2);
    assert!(report.steps.iter().all(|s| s.loss == 0.0));
    for (id, _, t) in before.iter() {
        assert_eq!(t, model.params.get(id));
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let data = corpus(4, 33);
    let mut model = toy_model(33);
    let before = model.params.clone();
    let cfg = TrainConfig {
        lr: 0.0,
        batch_size: 4,
        seed: 1,
        ..Default::default()
    };
    let (report, _) = pretrain(&mut model, &data, &cfg, None, None, |_| {}).unwrap();
    assert_eq!(report.epoch_means.len(), 1);
    assert!(report.steps.iter().all(|s| s.loss > 0.0));
    for (id, name, t) in before.iter() {
        assert_eq!(t, model.params.get(id), "{name} moved");
    }
}

#[test]
fn rejects_empty_corpus_and_bad_config() {
    let mut model = toy_model(34);
    let e = pretrain(&mut model, &[], &TrainConfig::default(), None, None, |_| {}).unwrap_err();
    assert!(matches!(e, ModelError::Data(_)));
    let data = vec![TokenizedFlow::empty(6)];
    let bad = TrainConfig {
        batch_size: 0,
        ..Default::default()
    };
    assert!(pretrain(&mut model, &data, &bad, None, None, |_| {}).is_err());
}

#[test]
fn resumed_training_reproduces_the_uninterrupted_run() {
    let data = corpus(3, 35);
    let cfg = TrainConfig {
        lr: 1e-3,
        batch_size: 3,
        epochs: 2,
        seed: 7,
        checkpoint_every: 2,
        ..Default::default()
    };
    let per_epoch = data.len().div_ceil(3) as u64;
    let dir = tempfile::tempdir().unwrap();
    let mut straight = toy_model(35);
    let (full, _) = pretrain(&mut straight, &data, &cfg, None, None, |_| {}).unwrap();
    assert_eq!(full.steps.len() as u64, 2 * per_epoch);

    // Train one epoch with checkpoints, then continue from disk.
    let mut first = toy_model(35);
    let partial = TrainConfig { epochs: 1, ..cfg.clone() };
    let mut seen = Vec::new();
    pretrain(&mut first, &data, &partial, None, Some(dir.path()), |r| seen.push(*r)).unwrap();
    let (mut resumed, state) = load_training(dir.path()).unwrap();
    assert_eq!(state.step, per_epoch);
    let (rest, _) = pretrain(&mut resumed, &data, &cfg, Some(state), Some(dir.path()), |r| seen.push(*r)).unwrap();
    assert_eq!(rest.steps.len() as u64, per_epoch);
    let bits = |s: &[StepRecord]| s.iter().map(|r| (r.step, r.loss.to_bits(), r.lr.to_bits())).collect::<Vec<_>>();
    assert_eq!(bits(&seen), bits(&full.steps));
    for (id, name, t) in straight.params.iter() {
        assert_eq!(t, resumed.params.get(id), "{name} differs");
    }
    assert!(loss_csv(&seen).starts_with("step,lr,loss\n1,"));
}

#[test]
fn training_lowers_the_loss_on_a_small_corpus() {
    let data = corpus(10, 36);
    let mut model = toy_model(36);
    let cfg = TrainConfig {
        lr: 1e-3,
        batch_size: 8,
        epochs: 3,
        seed: 2,
        ..Default::default()
    };
    let (report, _) = pretrain(&mut model, &data, &cfg, None, None, |_| {}).unwrap();
    assert_eq!(report.epoch_means.len(), 3);
    assert!(report.epoch_means[2] < report.epoch_means[0], "{:?}", report.epoch_means);
}

#[test]
fn masked_prediction_report_covers_every_field() {
    let data = corpus(5, 37);
    let model = toy_model(37);
    let report = evaluate_mlm(&model, &data, 0.3, 4, 8).unwrap();
    let total: usize = report.fields.iter().map(|f| f.count).sum();
    assert_eq!(total, report.masked);
    assert!(report.masked > 0);
    assert!(report.accuracy() >= 0.0 && report.accuracy() <= 1.0);
    assert!(report.majority_baseline > 0.0);
    let tcp = report.field("IP.HeaderLen", 6).expect("IHL reported");
    // Every TCP packet carries the same header length.
    assert_eq!(tcp.entropy, 0.0);
    assert!(report.fields.iter().all(|f| f.entropy >= 0.0 && (0.0..=1.0).contains(&f.f1)));
    let csv = report.to_csv();
    assert!(csv.starts_with("field,proto,entropy,f1,count\n"));
    assert_eq!(csv.lines().count(), report.fields.len() + 1);
    // Same seed, same report.
    assert_eq!(evaluate_mlm(&model, &data, 0.3, 4, 8).unwrap(), report);
}

#[test]
fn majority_baseline_matches_a_direct_tally() {
    let data = corpus(3, 38);
    let model = toy_model(38);
    let report = evaluate_mlm(&model, &data, 0.5, 11, 4).unwrap();
    let cfg = MaskingConfig::mask_only(0.5);
    let mut counts = std::collections::HashMap::new();
    for (i, f) in data.iter().enumerate() {
        let m = apply_masking(f, &cfg, &mut masking_rng(11, 0, i));
        for t in m.targets {
            *counts.entry(t).or_insert(0usize) += 1;
        }
    }
    let n: usize = counts.values().sum();
    assert_eq!(n, report.masked);
    let top = *counts.values().max().unwrap();
    assert!((report.majority_baseline - top as f64 / n as f64).abs() < 1e-12);
}

#[test]
fn selection_rows_point_at_the_corrupted_tokens() {
    let mut rng = ChaCha8Rng::seed_from_u64(39);
    let flows: Vec<TokenizedFlow> = (0..3).map(|i| random_flow(&mut rng, i + 2)).collect();
    let masked: Vec<_> = flows
        .iter()
        .enumerate()
        .map(|(i, f)| apply_masking(f, &MaskingConfig::default(), &mut masking_rng(1, 0, i)))
        .collect();
    let refs: Vec<&TokenizedFlow> = masked.iter().map(|m| &m.corrupted).collect();
    let batch = FlowBatch::new(&refs).unwrap();
    let (rows, targets) = selection_rows(&batch, &masked);
    let expected: usize = masked.iter().map(|m| m.selected.len()).sum();
    assert_eq!(rows.len(), expected);
    let mut k = 0;
    for m in &masked {
        for (&g, &t) in m.selected.iter().zip(&m.targets) {
            assert_eq!(batch.tokens[rows[k]], m.corrupted.tokens[g] as usize);
            assert_eq!(targets[k], t as usize);
            k += 1;
        }
    }
}
