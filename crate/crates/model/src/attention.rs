//! Attention weights of a single flow, annotated with field names.

use std::fmt::Write as _;

use netfound_core::tokenizer::{position_label, TokenizedFlow, BURST_LEN, MAX_BURSTS};
use netfound_tensor::{Tape, Tensor};

use crate::batch::FlowBatch;
use crate::{Model, ModelError, FLOW_WIDTH};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    /// Burst layer, restricted to the given burst slot.
    Burst(usize),
    Flow,
}

/// `weights[i][j]`: attention of query position `i` on key position `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub weights: Tensor<f32>,
    pub labels: Vec<String>,
}

impl AttentionMap {
    /// Keys receiving the most attention from the given queries, summed.
    pub fn top_keys(&self, queries: &[usize], n: usize) -> Vec<(usize, f32)> {
        let len = self.labels.len();
        let mut mass = vec![0f32; len];
        for &q in queries {
            for (m, w) in mass.iter_mut().zip(self.weights.row(q)) {
                *m += *w;
            }
        }
        let mut keys: Vec<(usize, f32)> = mass.into_iter().enumerate().collect();
        keys.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        keys.truncate(n);
        keys
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("query,key,weight,query_label,key_label\n");
        let n = self.labels.len();
        for i in 0..n {
            for j in 0..n {
                let w = self.weights.row(i)[j];
                writeln!(s, "{i},{j},{w},{},{}", self.labels[i], self.labels[j]).unwrap();
            }
        }
        s
    }
}

/// Runs the model on `tf` and returns the attention of one head in one
/// layer. Burst maps are `BURST_LEN x BURST_LEN`, flow maps
/// `FLOW_WIDTH x FLOW_WIDTH`; rows and columns of invalid positions are zero.
pub fn extract_attention(
    model: &Model<f32>,
    tf: &TokenizedFlow,
    round: usize,
    kind: LayerKind,
    head: usize,
) -> Result<AttentionMap, ModelError> {
    let c = &model.config;
    if round >= c.layers || head >= c.heads {
        return Err(ModelError::Config(format!(
            "round {round} / head {head} out of range ({} rounds, {} heads)",
            c.layers, c.heads
        )));
    }
    let batch = FlowBatch::new(&[tf])?;
    let mut tape = Tape::inference(&model.params);
    let enc = model.encode(&mut tape, &batch, None);
    match kind {
        LayerKind::Burst(slot) => {
            let b = match batch.slots[0].get(slot) {
                Some(Some(b)) => *b,
                _ => return Err(ModelError::Config(format!("burst {slot} is absent or out of range"))),
            };
            let pb = batch.bursts[b];
            let probs = tape
                .attention_probs(enc.burst_attention[round], b, head)
                .expect("attention node");
            let positions = &batch.positions[pb.start..pb.start + pb.len];
            let mut w = Tensor::zeros(&[BURST_LEN, BURST_LEN]);
            for (i, &pi) in positions.iter().enumerate() {
                for (j, &pj) in positions.iter().enumerate() {
                    w.row_mut(pi)[pj] = probs[i * pb.len + j];
                }
            }
            let labels = (0..BURST_LEN).map(|p| position_label(tf.proto, p)).collect();
            Ok(AttentionMap { weights: w, labels })
        }
        LayerKind::Flow => {
            let probs = tape
                .attention_probs(enc.flow_attention[round], 0, head)
                .expect("attention node");
            let mut w = Tensor::from_vec(&[FLOW_WIDTH, FLOW_WIDTH], probs.to_vec()).expect("13 x 13");
            for (s, b) in batch.slots[0].iter().enumerate() {
                if b.is_none() {
                    w.row_mut(s).iter_mut().for_each(|x| *x = 0.0);
                }
            }
            let labels = (0..MAX_BURSTS)
                .map(|b| format!("burst{}", b + 1))
                .chain(std::iter::once("CLS_F".to_string()))
                .collect();
            Ok(AttentionMap { weights: w, labels })
        }
    }
}
