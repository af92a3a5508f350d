//! Masked-token pre-training and masked-prediction evaluation.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use netfound_core::tokenizer::{slot_field, TokenizedFlow, BURST_LEN, SLOTS_PER_PACKET};
use netfound_tensor::{read_checkpoint, write_checkpoint, AdamConfig, AdamState, StepDecay, Tape};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::batch::FlowBatch;
use crate::io::{load_model, save_model};
use crate::masking::{apply_masking, masking_rng, MaskedFlow, MaskingConfig};
use crate::{Model, ModelError};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    /// Learning rate multiplier applied every `decay_every` steps.
    pub decay: f64,
    pub decay_every: u64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Save a training checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: u64,
    pub masking: MaskingConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 2e-5,
            decay: 0.995,
            decay_every: 10_000,
            batch_size: 32,
            epochs: 1,
            seed: 0,
            checkpoint_every: 0,
            masking: MaskingConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self) -> StepDecay {
        StepDecay {
            base: self.lr,
            gamma: self.decay,
            step_size: self.decay_every,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
}

/// Optimizer progress needed to resume.
#[derive(Debug, Clone)]
pub struct TrainState {
    /// Steps completed.
    pub step: u64,
    pub adam: AdamState<f32>,
}

#[derive(Debug, Clone, Default)]
pub struct PretrainReport {
    pub steps: Vec<StepRecord>,
    /// Mean loss of every epoch that finished during this call.
    pub epoch_means: Vec<f64>,
}

/// Visiting order of the corpus in `epoch`.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5851_f42d_4c95_7f2d);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// RNG for dropout at a given optimizer step.
pub fn dropout_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x2545_f491_4f6c_dd1d);
    rng.set_stream(step);
    rng
}

/// Packed rows and targets of the selected positions of masked flows.
pub fn selection_rows(batch: &FlowBatch, masked: &[MaskedFlow]) -> (Vec<usize>, Vec<usize>) {
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (f, m) in masked.iter().enumerate() {
        for (&g, &t) in m.selected.iter().zip(&m.targets) {
            rows.push(batch.row(f, g).expect("selected positions are valid"));
            targets.push(t as usize);
        }
    }
    (rows, targets)
}

/// Pre-trains `model` on `corpus`, starting from `resume` if given.
///
/// With `checkpoint_dir` set, a resumable checkpoint is written at the
/// configured cadence and after the last step. A non-finite loss stops
/// training with an error, leaving the last checkpoint in place.
pub fn pretrain(
    model: &mut Model<f32>,
    corpus: &[TokenizedFlow],
    cfg: &TrainConfig,
    resume: Option<TrainState>,
    checkpoint_dir: Option<&Path>,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<(PretrainReport, TrainState), ModelError> {
    if corpus.is_empty() {
        return Err(ModelError::Data("pre-training corpus is empty".into()));
    }
    if cfg.batch_size == 0 || cfg.lr < 0.0 {
        return Err(ModelError::Config("batch size must be positive and lr non-negative".into()));
    }
    cfg.masking.validate()?;
    let mut state = resume.unwrap_or_else(|| TrainState {
        step: 0,
        adam: AdamState::new(&model.params, AdamConfig::default()),
    });
    let per_epoch = corpus.len().div_ceil(cfg.batch_size) as u64;
    let total = per_epoch * cfg.epochs as u64;
    let schedule = cfg.schedule();
    let mut report = PretrainReport::default();
    let mut epoch_sum = 0.0;
    let mut epoch_count = 0usize;
    let mut order = Vec::new();
    let mut order_epoch = usize::MAX;
    while state.step < total {
        let epoch = (state.step / per_epoch) as usize;
        let within = (state.step % per_epoch) as usize;
        if order_epoch != epoch {
            order = epoch_order(cfg.seed, epoch, corpus.len());
            order_epoch = epoch;
        }
        let idx = &order[within * cfg.batch_size..((within + 1) * cfg.batch_size).min(corpus.len())];
        let masked: Vec<MaskedFlow> = idx
            .iter()
            .map(|&i| apply_masking(&corpus[i], &cfg.masking, &mut masking_rng(cfg.seed, epoch, i)))
            .collect();
        let refs: Vec<&TokenizedFlow> = masked.iter().map(|m| &m.corrupted).collect();
        let batch = FlowBatch::new(&refs)?;
        let (rows, targets) = selection_rows(&batch, &masked);
        let lr = schedule.lr(state.step);
        let mut drop = dropout_rng(cfg.seed, state.step);
        let (loss, grads) = {
            let mut tape = Tape::new(&model.params);
            let enc = model.encode(&mut tape, &batch, Some(&mut drop));
            let l = model.mlm_loss(&mut tape, &enc, &rows, &targets);
            let loss = tape.value(l).data()[0] as f64;
            let grads = (!rows.is_empty() && loss.is_finite()).then(|| tape.backward(l));
            (loss, grads)
        };
        if !loss.is_finite() {
            return Err(ModelError::NonFiniteLoss { step: state.step });
        }
        if let Some(g) = grads {
            state.adam.update(&mut model.params, &g, lr)?;
        }
        state.step += 1;
        let rec = StepRecord {
            step: state.step,
            lr,
            loss,
        };
        on_step(&rec);
        report.steps.push(rec);
        epoch_sum += loss;
        epoch_count += 1;
        if state.step % per_epoch == 0 {
            report.epoch_means.push(epoch_sum / epoch_count as f64);
            epoch_sum = 0.0;
            epoch_count = 0;
        }
        if let Some(dir) = checkpoint_dir {
            if (cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0) || state.step == total {
                save_training(dir, model, &state)?;
            }
        }
    }
    Ok((report, state))
}

#[derive(Serialize, Deserialize)]
struct StateFile {
    step: u64,
    adam_step: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

/// Writes `model.nfck`, `model.toml`, `optimizer.nfck` and `state.toml`.
pub fn save_training(dir: &Path, model: &Model<f32>, state: &TrainState) -> Result<(), ModelError> {
    std::fs::create_dir_all(dir)?;
    save_model(model, &dir.join("model.nfck"))?;
    let f = std::io::BufWriter::new(std::fs::File::create(dir.join("optimizer.nfck"))?);
    write_checkpoint(f, &state.adam.moments(&model.params))?;
    let s = StateFile {
        step: state.step,
        adam_step: state.adam.step,
        beta1: state.adam.config.beta1,
        beta2: state.adam.config.beta2,
        eps: state.adam.config.eps,
    };
    std::fs::write(dir.join("state.toml"), toml::to_string(&s).expect("serializes"))?;
    Ok(())
}

pub fn load_training(dir: &Path) -> Result<(Model<f32>, TrainState), ModelError> {
    let model = load_model(&dir.join("model.nfck"))?;
    let text = std::fs::read_to_string(dir.join("state.toml"))?;
    let s: StateFile = toml::from_str(&text).map_err(|e| ModelError::Data(e.to_string()))?;
    let moments = read_checkpoint(std::io::BufReader::new(std::fs::File::open(dir.join("optimizer.nfck"))?))?;
    let config = AdamConfig {
        beta1: s.beta1,
        beta2: s.beta2,
        eps: s.eps,
    };
    let adam = AdamState::from_moments(&model.params, &moments, config, s.adam_step)?;
    Ok((model, TrainState { step: s.step, adam }))
}

pub fn loss_csv(steps: &[StepRecord]) -> String {
    let mut s = String::from("step,lr,loss\n");
    for r in steps {
        writeln!(s, "{},{},{}", r.step, r.lr, r.loss).unwrap();
    }
    s
}

/// Masked-prediction quality for one header field.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldScore {
    pub field: String,
    pub proto: u8,
    /// Shannon entropy (bits) of the true values at masked positions.
    pub entropy: f64,
    /// Micro-averaged F1 over token classes, which for single-label
    /// prediction equals accuracy.
    pub f1: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlmReport {
    pub fields: Vec<FieldScore>,
    pub masked: usize,
    pub correct: usize,
    /// Accuracy of always predicting the most frequent masked token.
    pub majority_baseline: f64,
}

impl MlmReport {
    pub fn accuracy(&self) -> f64 {
        if self.masked == 0 {
            0.0
        } else {
            self.correct as f64 / self.masked as f64
        }
    }

    pub fn field(&self, name: &str, proto: u8) -> Option<&FieldScore> {
        self.fields.iter().find(|f| f.field == name && f.proto == proto)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("field,proto,entropy,f1,count\n");
        for f in &self.fields {
            writeln!(s, "{},{},{:.6},{:.6},{}", f.field, f.proto, f.entropy, f.f1, f.count).unwrap();
        }
        s
    }
}

fn entropy_bits(counts: &HashMap<u32, usize>) -> f64 {
    // Sorted so the float sum does not depend on hash order.
    let mut cs: Vec<usize> = counts.values().copied().collect();
    cs.sort_unstable();
    let n: usize = cs.iter().sum();
    let h: f64 = cs
        .iter()
        .map(|&c| {
            let p = c as f64 / n as f64;
            -p * p.log2()
        })
        .sum();
    h.max(0.0)
}

/// Replaces `mask_rate` of the valid field tokens by MASK, predicts them
/// and scores the predictions per field.
pub fn evaluate_mlm(
    model: &Model<f32>,
    corpus: &[TokenizedFlow],
    mask_rate: f64,
    seed: u64,
    batch_size: usize,
) -> Result<MlmReport, ModelError> {
    let cfg = MaskingConfig::mask_only(mask_rate);
    cfg.validate()?;
    #[derive(Default)]
    struct Tally {
        correct: usize,
        count: usize,
        values: HashMap<u32, usize>,
    }
    let mut tallies: BTreeMap<(u8, usize), Tally> = BTreeMap::new();
    let mut all_values: HashMap<u32, usize> = HashMap::new();
    let (mut masked_total, mut correct_total) = (0, 0);
    for (chunk_i, chunk) in corpus.chunks(batch_size.max(1)).enumerate() {
        let masked: Vec<MaskedFlow> = chunk
            .iter()
            .enumerate()
            .map(|(j, f)| apply_masking(f, &cfg, &mut masking_rng(seed, 0, chunk_i * batch_size.max(1) + j)))
            .collect();
        let refs: Vec<&TokenizedFlow> = masked.iter().map(|m| &m.corrupted).collect();
        let batch = FlowBatch::new(&refs)?;
        let (rows, targets) = selection_rows(&batch, &masked);
        let preds = {
            let mut tape = Tape::inference(&model.params);
            let enc = model.encode(&mut tape, &batch, None);
            model.predict_rows(tape.value(enc.tokens), &rows)
        };
        let mut k = 0;
        for (f, m) in masked.iter().enumerate() {
            for &g in &m.selected {
                let slot = (g % BURST_LEN - 1) % SLOTS_PER_PACKET;
                let proto = batch.protos[f];
                let t = targets[k] as u32;
                let ok = preds[k] == targets[k];
                let e = tallies.entry((proto, slot)).or_default();
                e.count += 1;
                e.correct += ok as usize;
                *e.values.entry(t).or_default() += 1;
                *all_values.entry(t).or_default() += 1;
                masked_total += 1;
                correct_total += ok as usize;
                k += 1;
            }
        }
    }
    let fields = tallies
        .into_iter()
        .map(|((proto, slot), t)| FieldScore {
            field: slot_field(proto, slot).map_or_else(|| format!("slot{slot}"), |f| f.name()),
            proto,
            entropy: entropy_bits(&t.values),
            f1: t.correct as f64 / t.count as f64,
            count: t.count,
        })
        .collect();
    let majority = all_values.values().copied().max().unwrap_or(0);
    Ok(MlmReport {
        fields,
        masked: masked_total,
        correct: correct_total,
        majority_baseline: if masked_total == 0 { 0.0 } else { majority as f64 / masked_total as f64 },
    })
}
