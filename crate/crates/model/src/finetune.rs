//! Supervised fine-tuning with a two-layer head.

use netfound_core::tokenizer::{TokenizedFlow, MAX_BURSTS};
use netfound_tensor::{AdamConfig, AdamState, ParamSet, Tape};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::batch::FlowBatch;
use crate::metrics::Metrics;
use crate::pretrain::{dropout_rng, epoch_order};
use crate::{Model, ModelError, TaskLevel};

#[derive(Debug, Clone, PartialEq)]
pub struct TaskConfig {
    pub classes: usize,
    pub level: TaskLevel,
    pub lr: f64,
    /// Upper bound on epochs; early stopping usually ends sooner.
    pub max_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Train only the head.
    pub freeze_backbone: bool,
    /// Stop after this many epochs without a validation improvement.
    pub patience: usize,
    /// Share of the training flows held out for early stopping.
    pub val_fraction: f64,
}

impl TaskConfig {
    pub fn new(classes: usize) -> Self {
        TaskConfig {
            classes,
            level: TaskLevel::Flow,
            lr: 1e-5,
            max_epochs: 30,
            batch_size: 32,
            seed: 0,
            freeze_backbone: false,
            patience: 2,
            val_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_weighted_f1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneReport {
    pub history: Vec<EpochRecord>,
    /// First epoch (1-based) that reached the best validation F1; training
    /// stopped `patience` epochs later without improving on it.
    pub convergence_epoch: usize,
    pub best_val_f1: f64,
    pub trainable_params: usize,
}

/// Splits `0..n` into (train, validation) with a seeded shuffle.
pub fn split_validation(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15));
    let val = ((n as f64 * fraction).round() as usize).min(n);
    let v = idx.split_off(n - val);
    (idx, v)
}

/// Classification targets for a batch: one per flow, or one per valid burst
/// (every burst inherits its flow's label). Returns logit rows and targets.
fn targets_for(batch: &FlowBatch, labels: &[usize], level: TaskLevel) -> (Vec<usize>, Vec<usize>) {
    match level {
        TaskLevel::Flow => ((0..batch.flow_count).collect(), labels.to_vec()),
        TaskLevel::Burst => batch
            .bursts
            .iter()
            .map(|b| (b.flow * MAX_BURSTS + b.slot, labels[b.flow]))
            .unzip(),
    }
}

/// Per-sample logits: one row per flow, or per valid burst.
pub fn predict(model: &Model<f32>, flows: &[&TokenizedFlow], level: TaskLevel, batch_size: usize) -> Result<Vec<Vec<f32>>, ModelError> {
    let mut out = Vec::new();
    for chunk in flows.chunks(batch_size.max(1)) {
        let batch = FlowBatch::new(chunk)?;
        let mut tape = Tape::inference(&model.params);
        let enc = model.encode(&mut tape, &batch, None);
        let logits = model.head_logits(&mut tape, &enc, level)?;
        let (rows, _) = targets_for(&batch, &vec![0; chunk.len()], level);
        let v = tape.value(logits);
        out.extend(rows.iter().map(|&r| v.row(r).to_vec()));
    }
    Ok(out)
}

/// Metrics of the model on labelled flows.
pub fn evaluate(
    model: &Model<f32>,
    flows: &[&TokenizedFlow],
    labels: &[usize],
    level: TaskLevel,
    k: usize,
    batch_size: usize,
) -> Result<Metrics, ModelError> {
    let classes = model.head_classes().ok_or(ModelError::NoHead)?;
    let logits = predict(model, flows, level, batch_size)?;
    let truth: Vec<usize> = match level {
        TaskLevel::Flow => labels.to_vec(),
        TaskLevel::Burst => flows
            .iter()
            .zip(labels)
            .flat_map(|(f, &l)| std::iter::repeat(l).take(f.valid_burst_count()))
            .collect(),
    };
    Ok(Metrics::from_logits(&logits, &truth, classes, k))
}

fn check_labels(labels: &[usize], classes: usize) -> Result<(), ModelError> {
    if classes < 2 {
        return Err(ModelError::Config("a task needs at least two classes".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(ModelError::Data(format!("label {bad} out of range for {classes} classes")));
    }
    let first = labels.first().copied();
    if labels.iter().all(|&l| Some(l) == first) {
        return Err(ModelError::Data("training labels contain a single class".into()));
    }
    Ok(())
}

/// Fine-tunes `model` (adding a head if needed) on labelled flows. The
/// model ends with the parameters of its best validation epoch.
pub fn finetune(
    model: &mut Model<f32>,
    flows: &[TokenizedFlow],
    labels: &[usize],
    cfg: &TaskConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<FinetuneReport, ModelError> {
    if flows.len() != labels.len() {
        return Err(ModelError::Data("one label per flow required".into()));
    }
    check_labels(labels, cfg.classes)?;
    if cfg.batch_size == 0 || cfg.max_epochs == 0 {
        return Err(ModelError::Config("batch size and epochs must be positive".into()));
    }
    if model.head_classes().is_none() {
        model.set_head(cfg.classes, cfg.seed)?;
    } else if model.head_classes() != Some(cfg.classes) {
        return Err(ModelError::Config("existing head has a different class count".into()));
    }
    let (train_idx, val_idx) = split_validation(flows.len(), cfg.val_fraction, cfg.seed);
    let frozen = if cfg.freeze_backbone { model.backbone_ids() } else { Vec::new() };
    let mlm = model.mlm_ids();
    let trainable_params = model
        .params
        .iter()
        .filter(|(id, _, _)| !frozen.contains(id) && !mlm.contains(id))
        .map(|(_, _, t)| t.len())
        .sum();
    let mut adam = AdamState::new(&model.params, AdamConfig::default());
    let val_flows: Vec<&TokenizedFlow> = val_idx.iter().map(|&i| &flows[i]).collect();
    let val_labels: Vec<usize> = val_idx.iter().map(|&i| labels[i]).collect();
    let mut best: Option<(f64, usize, ParamSet<f32>)> = None;
    let mut history = Vec::new();
    let mut step = 0u64;
    for epoch in 0..cfg.max_epochs {
        let order = epoch_order(cfg.seed, epoch, train_idx.len());
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let idx: Vec<usize> = chunk.iter().map(|&o| train_idx[o]).collect();
            let refs: Vec<&TokenizedFlow> = idx.iter().map(|&i| &flows[i]).collect();
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let batch = FlowBatch::new(&refs)?;
            let (rows, targets) = targets_for(&batch, &y, cfg.level);
            let mut drop = dropout_rng(cfg.seed, step);
            let (loss, grads) = {
                let mut tape = Tape::new(&model.params);
                for &id in &frozen {
                    tape.freeze(id);
                }
                let enc = model.encode(&mut tape, &batch, Some(&mut drop));
                let logits = model.head_logits(&mut tape, &enc, cfg.level)?;
                let logits = match cfg.level {
                    TaskLevel::Flow => logits,
                    TaskLevel::Burst => tape.gather_rows(logits, rows.iter().map(|&r| Some(r)).collect()),
                };
                let l = tape.cross_entropy(logits, &targets);
                let loss = tape.value(l).data()[0] as f64;
                (loss, loss.is_finite().then(|| tape.backward(l)))
            };
            let Some(grads) = grads else {
                return Err(ModelError::NonFiniteLoss { step });
            };
            adam.update(&mut model.params, &grads, cfg.lr)?;
            step += 1;
            loss_sum += loss;
            batches += 1;
        }
        let val_f1 = if val_flows.is_empty() {
            0.0
        } else {
            evaluate(model, &val_flows, &val_labels, cfg.level, 1, cfg.batch_size.max(64))?.weighted_f1
        };
        let rec = EpochRecord {
            epoch: epoch + 1,
            train_loss: loss_sum / batches.max(1) as f64,
            val_weighted_f1: val_f1,
        };
        on_epoch(&rec);
        history.push(rec);
        match &best {
            Some((f, _, _)) if val_f1 <= *f => {}
            _ => best = Some((val_f1, epoch + 1, model.params.clone())),
        }
        let best_epoch = best.as_ref().map_or(0, |b| b.1);
        if epoch + 1 - best_epoch >= cfg.patience {
            break;
        }
    }
    let (best_val_f1, convergence_epoch, params) = best.expect("at least one epoch ran");
    model.params = params;
    Ok(FinetuneReport {
        history,
        convergence_epoch,
        best_val_f1,
        trainable_params,
    })
}
