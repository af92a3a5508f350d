use netfound_core::tokenizer::{TokenizedFlow, BURST_LEN, GRID_LEN, MAX_BURSTS, META_WIDTH};
use netfound_tensor::{kernels, ParamId, ParamSet, Scalar, Segment, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::batch::FlowBatch;
use crate::config::{ModelConfig, NormStats};
use crate::ModelError;

/// Rows in a flow encoder input: one per burst slot plus CLS_F.
pub const FLOW_WIDTH: usize = MAX_BURSTS + 1;

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy)]
struct LayerIds {
    ln1: (ParamId, ParamId),
    qkv: (ParamId, ParamId),
    out: (ParamId, ParamId),
    ln2: (ParamId, ParamId),
    ffn_in: (ParamId, ParamId),
    ffn_out: (ParamId, ParamId),
}

#[derive(Debug, Clone)]
enum MetaIds {
    Mlp { l1: (ParamId, ParamId), l2: (ParamId, ParamId) },
    Linear((ParamId, ParamId)),
}

#[derive(Debug, Clone, Copy)]
struct HeadIds {
    l1: (ParamId, ParamId),
    l2: (ParamId, ParamId),
    classes: usize,
}

#[derive(Debug, Clone)]
struct Ids {
    tok: ParamId,
    pos: ParamId,
    burst_pos: ParamId,
    meta: MetaIds,
    cls_f: ParamId,
    burst: Vec<LayerIds>,
    flow: Vec<LayerIds>,
    burst_norm: (ParamId, ParamId),
    flow_norm: (ParamId, ParamId),
    mlm: (ParamId, ParamId),
    head: Option<HeadIds>,
}

/// Which hidden states a classification head reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskLevel {
    Flow,
    Burst,
}

/// Tape nodes produced by [`Model::encode`].
#[derive(Debug, Clone)]
pub struct Encoded {
    /// Final state of every packed row, `rows x q`.
    pub tokens: Var,
    /// `flows * MAX_BURSTS x q`; rows of invalid bursts are zero.
    pub cls_b: Var,
    /// `flows x q`.
    pub cls_f: Var,
    pub burst_attention: Vec<Var>,
    pub flow_attention: Vec<Var>,
    /// Rows per flow seen by each flow-encoder layer.
    pub flow_widths: Vec<usize>,
}

/// Per-flow hidden states.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowOutput {
    /// `GRID_LEN x q`; invalid positions are zero.
    pub token_states: Tensor<f32>,
    /// `MAX_BURSTS x q`; invalid bursts are zero.
    pub cls_b: Tensor<f32>,
    pub cls_f: Vec<f32>,
    pub valid: Vec<bool>,
}

/// The hierarchical burst/flow transformer.
#[derive(Debug, Clone)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamSet<T>,
    pub norm: NormStats,
    ids: Ids,
}

fn normal<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<T> {
    let d = Normal::new(0.0, INIT_STD).expect("valid std");
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| T::from_f64(d.sample(rng))).collect()).expect("shape")
}

fn insert_linear<T: Scalar>(p: &mut ParamSet<T>, rng: &mut ChaCha8Rng, name: &str, i: usize, o: usize) {
    p.insert(format!("{name}.w"), normal(rng, &[i, o]));
    p.insert(format!("{name}.b"), Tensor::zeros(&[o]));
}

fn insert_norm<T: Scalar>(p: &mut ParamSet<T>, name: &str, q: usize) {
    p.insert(format!("{name}.g"), Tensor::full(&[q], T::one()));
    p.insert(format!("{name}.b"), Tensor::zeros(&[q]));
}

fn layer_names(prefix: &str) -> [String; 6] {
    ["ln1", "attn.qkv", "attn.out", "ln2", "ffn.in", "ffn.out"].map(|s| format!("{prefix}.{s}"))
}

/// Parameter count implied by a configuration (without a task head).
pub fn expected_param_count(c: &ModelConfig) -> usize {
    let q = c.hidden;
    let layer = 2 * q + (q * 3 * q + 3 * q) + (q * q + q) + 2 * q + (q * c.ffn + c.ffn) + (c.ffn * q + q);
    let meta = if c.linear_meta {
        META_WIDTH * q + q
    } else {
        META_WIDTH * c.meta_hidden + c.meta_hidden + c.meta_hidden * q + q
    };
    c.vocab * q + BURST_LEN * q + FLOW_WIDTH * q + meta + q + 2 * c.layers * layer + 4 * q + q * c.vocab + c.vocab
}

fn pair<T: Scalar>(p: &ParamSet<T>, name: &str, a: &str, b: &str) -> Result<(ParamId, ParamId), ModelError> {
    let get = |s: &str| {
        let key = format!("{name}.{s}");
        p.id(&key).ok_or(ModelError::MissingParam(key))
    };
    Ok((get(a)?, get(b)?))
}

fn one<T: Scalar>(p: &ParamSet<T>, name: &str) -> Result<ParamId, ModelError> {
    p.id(name).ok_or_else(|| ModelError::MissingParam(name.to_string()))
}

impl Ids {
    fn resolve<T: Scalar>(c: &ModelConfig, p: &ParamSet<T>) -> Result<Ids, ModelError> {
        let lin = |n: &str| pair(p, n, "w", "b");
        let norm = |n: &str| pair(p, n, "g", "b");
        let layer = |prefix: &str| -> Result<LayerIds, ModelError> {
            let n = layer_names(prefix);
            Ok(LayerIds {
                ln1: norm(&n[0])?,
                qkv: lin(&n[1])?,
                out: lin(&n[2])?,
                ln2: norm(&n[3])?,
                ffn_in: lin(&n[4])?,
                ffn_out: lin(&n[5])?,
            })
        };
        let meta = if c.linear_meta {
            MetaIds::Linear(lin("meta")?)
        } else {
            MetaIds::Mlp {
                l1: lin("meta.l1")?,
                l2: lin("meta.l2")?,
            }
        };
        let head = match (p.id("head.l1.w"), p.id("head.l2.w")) {
            (Some(_), Some(w2)) => Some(HeadIds {
                l1: lin("head.l1")?,
                l2: lin("head.l2")?,
                classes: p.get(w2).cols(),
            }),
            _ => None,
        };
        let ids = Ids {
            tok: one(p, "emb.token")?,
            pos: one(p, "emb.position")?,
            burst_pos: one(p, "emb.burst_position")?,
            meta,
            cls_f: one(p, "cls_f")?,
            burst: (0..c.layers).map(|i| layer(&format!("burst.{i}"))).collect::<Result<_, _>>()?,
            flow: (0..c.layers).map(|i| layer(&format!("flow.{i}"))).collect::<Result<_, _>>()?,
            burst_norm: norm("burst_norm")?,
            flow_norm: norm("flow_norm")?,
            mlm: lin("mlm")?,
            head,
        };
        Ok(ids)
    }
}

struct Dropout<'a> {
    rate: f64,
    rng: Option<&'a mut ChaCha8Rng>,
}

impl Dropout<'_> {
    fn apply<T: Scalar>(&mut self, tape: &mut Tape<T>, x: Var) -> Var {
        let Some(rng) = self.rng.as_deref_mut() else { return x };
        if self.rate == 0.0 {
            return x;
        }
        let keep = T::from_f64(1.0 / (1.0 - self.rate));
        let mask = (0..tape.value(x).len())
            .map(|_| if rng.gen::<f64>() < self.rate { T::zero() } else { keep })
            .collect();
        tape.mul_mask(x, mask)
    }
}

impl Model<f32> {
    /// Freshly initialized model: weights `N(0, 0.02)`, biases zero, norm
    /// gains one.
    pub fn new(config: ModelConfig, norm: NormStats, seed: u64) -> Result<Self, ModelError> {
        Self::init(config, norm, seed)
    }
}

impl<T: Scalar> Model<T> {
    pub fn init(config: ModelConfig, norm: NormStats, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let c = &config;
        let q = c.hidden;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        p.insert("emb.token", normal(&mut rng, &[c.vocab, q]));
        p.insert("emb.position", normal(&mut rng, &[BURST_LEN, q]));
        p.insert("emb.burst_position", normal(&mut rng, &[FLOW_WIDTH, q]));
        if c.linear_meta {
            insert_linear(&mut p, &mut rng, "meta", META_WIDTH, q);
        } else {
            insert_linear(&mut p, &mut rng, "meta.l1", META_WIDTH, c.meta_hidden);
            insert_linear(&mut p, &mut rng, "meta.l2", c.meta_hidden, q);
        }
        p.insert("cls_f", normal(&mut rng, &[1, q]));
        for stack in ["burst", "flow"] {
            for i in 0..c.layers {
                let n = layer_names(&format!("{stack}.{i}"));
                insert_norm(&mut p, &n[0], q);
                insert_linear(&mut p, &mut rng, &n[1], q, 3 * q);
                insert_linear(&mut p, &mut rng, &n[2], q, q);
                insert_norm(&mut p, &n[3], q);
                insert_linear(&mut p, &mut rng, &n[4], q, c.ffn);
                insert_linear(&mut p, &mut rng, &n[5], c.ffn, q);
            }
        }
        insert_norm(&mut p, "burst_norm", q);
        insert_norm(&mut p, "flow_norm", q);
        insert_linear(&mut p, &mut rng, "mlm", q, c.vocab);
        Self::from_parts(config, p, norm)
    }

    /// Wraps an existing parameter set, checking names and shapes.
    pub fn from_parts(config: ModelConfig, params: ParamSet<T>, norm: NormStats) -> Result<Self, ModelError> {
        config.validate()?;
        let ids = Ids::resolve(&config, &params)?;
        let reference = Model::<f32>::shapes(&config);
        for (name, shape) in reference {
            let got = params.by_name(&name).ok_or_else(|| ModelError::MissingParam(name.clone()))?;
            if got.shape() != shape.as_slice() {
                return Err(ModelError::ShapeMismatch {
                    name,
                    expected: shape,
                    got: got.shape().to_vec(),
                });
            }
        }
        Ok(Model {
            config,
            params,
            norm,
            ids,
        })
    }

    fn shapes(c: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let q = c.hidden;
        let mut s = vec![
            ("emb.token".to_string(), vec![c.vocab, q]),
            ("emb.position".into(), vec![BURST_LEN, q]),
            ("emb.burst_position".into(), vec![FLOW_WIDTH, q]),
            ("cls_f".into(), vec![1, q]),
            ("mlm.w".into(), vec![q, c.vocab]),
            ("mlm.b".into(), vec![c.vocab]),
        ];
        for stack in ["burst", "flow"] {
            for i in 0..c.layers {
                let n = layer_names(&format!("{stack}.{i}"));
                s.push((format!("{}.w", n[1]), vec![q, 3 * q]));
                s.push((format!("{}.w", n[2]), vec![q, q]));
                s.push((format!("{}.w", n[4]), vec![q, c.ffn]));
                s.push((format!("{}.w", n[5]), vec![c.ffn, q]));
            }
        }
        s
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            norm: self.norm.clone(),
            ids: self.ids.clone(),
        }
    }

    pub fn head_classes(&self) -> Option<usize> {
        self.ids.head.map(|h| h.classes)
    }

    /// Adds (or re-initializes) a two-layer classification head.
    pub fn set_head(&mut self, classes: usize, seed: u64) -> Result<(), ModelError> {
        if classes < 2 {
            return Err(ModelError::Config("a classification head needs at least two classes".into()));
        }
        let q = self.config.hidden;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match self.ids.head {
            Some(h) if h.classes != classes => {
                return Err(ModelError::Config(format!(
                    "model already has a {}-class head, asked for {classes}",
                    h.classes
                )))
            }
            Some(h) => {
                *self.params.get_mut(h.l1.0) = normal(&mut rng, &[q, q]);
                *self.params.get_mut(h.l1.1) = Tensor::zeros(&[q]);
                *self.params.get_mut(h.l2.0) = normal(&mut rng, &[q, classes]);
                *self.params.get_mut(h.l2.1) = Tensor::zeros(&[classes]);
            }
            None => {
                insert_linear(&mut self.params, &mut rng, "head.l1", q, q);
                insert_linear(&mut self.params, &mut rng, "head.l2", q, classes);
            }
        }
        self.ids = Ids::resolve(&self.config, &self.params)?;
        Ok(())
    }

    /// Parameters outside the classification head.
    pub fn backbone_ids(&self) -> Vec<ParamId> {
        let head: Vec<ParamId> = self
            .ids
            .head
            .map(|h| vec![h.l1.0, h.l1.1, h.l2.0, h.l2.1])
            .unwrap_or_default();
        self.params.ids().filter(|id| !head.contains(id)).collect()
    }

    /// Parameters of the masked-token output layer.
    pub fn mlm_ids(&self) -> [ParamId; 2] {
        [self.ids.mlm.0, self.ids.mlm.1]
    }

    fn block(&self, tape: &mut Tape<T>, x: Var, l: &LayerIds, segments: Vec<Segment>, key_mask: Option<&[bool]>, drop: &mut Dropout) -> (Var, Var) {
        let p = |tape: &mut Tape<T>, ids: (ParamId, ParamId)| (tape.param(ids.0), tape.param(ids.1));
        let (g, b) = p(tape, l.ln1);
        let h = tape.layer_norm(x, g, b);
        let (w, b) = p(tape, l.qkv);
        let qkv = tape.linear(h, w, Some(b));
        let att = tape.attention(qkv, self.config.heads, segments, key_mask);
        let (w, b) = p(tape, l.out);
        let a = tape.linear(att, w, Some(b));
        let a = drop.apply(tape, a);
        let x = tape.add(x, a);
        let (g, b) = p(tape, l.ln2);
        let h = tape.layer_norm(x, g, b);
        let (w, b) = p(tape, l.ffn_in);
        let h = tape.linear(h, w, Some(b));
        let h = tape.gelu(h);
        let (w, b) = p(tape, l.ffn_out);
        let h = tape.linear(h, w, Some(b));
        let h = drop.apply(tape, h);
        (tape.add(x, h), att)
    }

    /// Token + position + metadata embedding for every packed row.
    pub fn embed(&self, tape: &mut Tape<T>, batch: &FlowBatch) -> Var {
        let meta: Vec<T> = batch
            .metadata
            .iter()
            .flat_map(|m| self.norm.apply(&netfound_core::tokenizer::MetadataVector(*m)))
            .map(T::from_f64)
            .collect();
        let meta = tape.constant(Tensor::from_vec(&[batch.bursts.len(), META_WIDTH], meta).expect("nb x k"));
        let meta = match self.ids.meta {
            MetaIds::Mlp { l1, l2 } => {
                let (w, b) = (tape.param(l1.0), tape.param(l1.1));
                let h = tape.linear(meta, w, Some(b));
                let h = tape.gelu(h);
                let (w, b) = (tape.param(l2.0), tape.param(l2.1));
                tape.linear(h, w, Some(b))
            }
            MetaIds::Linear(l) => {
                let (w, b) = (tape.param(l.0), tape.param(l.1));
                tape.linear(meta, w, Some(b))
            }
        };
        let tok = tape.param(self.ids.tok);
        let tok = tape.gather_rows(tok, batch.tokens.iter().map(|&t| Some(t)).collect());
        let pos = tape.param(self.ids.pos);
        let pos = tape.gather_rows(pos, batch.positions.iter().map(|&p| Some(p)).collect());
        let meta = tape.gather_rows(meta, batch.row_burst.iter().map(|&b| Some(b)).collect());
        let e = tape.add(tok, pos);
        tape.add(e, meta)
    }

    /// Runs the encoder. `dropout_rng` enables dropout (training mode).
    pub fn encode(&self, tape: &mut Tape<T>, batch: &FlowBatch, dropout_rng: Option<&mut ChaCha8Rng>) -> Encoded {
        let mut drop = Dropout {
            rate: self.config.dropout,
            rng: dropout_rng,
        };
        let nf = batch.flow_count;
        let rows = batch.rows();
        let mut x = self.embed(tape, batch);
        let burst_segments = batch.burst_segments();
        let flow_segments: Vec<Segment> = (0..nf).map(|f| Segment::new(f * FLOW_WIDTH, FLOW_WIDTH)).collect();
        let mut key_mask = Vec::with_capacity(nf * FLOW_WIDTH);
        // Index into concat(x, cls_f rows) for each flow-encoder input row.
        let mut flow_index = Vec::with_capacity(nf * FLOW_WIDTH);
        for (f, slots) in batch.slots.iter().enumerate() {
            for s in slots {
                key_mask.push(s.is_some());
                flow_index.push(s.map(|b| batch.bursts[b].start));
            }
            key_mask.push(true);
            flow_index.push(Some(rows + f));
        }
        // Where each valid burst's CLS_B lands in the flow-encoder rows.
        let (cls_rows, flow_rows): (Vec<usize>, Vec<Option<usize>>) = batch
            .bursts
            .iter()
            .map(|b| (b.start, Some(b.flow * FLOW_WIDTH + b.slot)))
            .unzip();
        let burst_pos = tape.param(self.ids.burst_pos);
        let burst_pos = tape.gather_rows(burst_pos, (0..nf * FLOW_WIDTH).map(|i| Some(i % FLOW_WIDTH)).collect());
        let cls_f = tape.param(self.ids.cls_f);
        let mut cls_f = tape.gather_rows(cls_f, vec![Some(0); nf]);

        let mut burst_attention = Vec::new();
        let mut flow_attention = Vec::new();
        let mut flow_widths = Vec::new();
        let mut y = None;
        let flow_input = |tape: &mut Tape<T>, x: Var, cls_f: Var, first: bool| {
            let all = tape.concat_rows(&[x, cls_f]);
            let v = tape.gather_rows(all, flow_index.clone());
            if first {
                tape.add(v, burst_pos)
            } else {
                v
            }
        };
        if self.config.write_back {
            for r in 0..self.config.layers {
                let (nx, att) = self.block(tape, x, &self.ids.burst[r], burst_segments.clone(), None, &mut drop);
                burst_attention.push(att);
                let fin = flow_input(tape, nx, cls_f, r == 0);
                flow_widths.push(FLOW_WIDTH);
                let (fy, att) = self.block(tape, fin, &self.ids.flow[r], flow_segments.clone(), Some(&key_mask), &mut drop);
                flow_attention.push(att);
                let back = tape.gather_rows(fy, flow_rows.clone());
                x = tape.replace_rows(nx, cls_rows.clone(), back);
                cls_f = tape.gather_rows(fy, (0..nf).map(|f| Some(f * FLOW_WIDTH + MAX_BURSTS)).collect());
                y = Some(fy);
            }
        } else {
            for r in 0..self.config.layers {
                let (nx, att) = self.block(tape, x, &self.ids.burst[r], burst_segments.clone(), None, &mut drop);
                burst_attention.push(att);
                x = nx;
            }
            let mut fy = flow_input(tape, x, cls_f, true);
            for r in 0..self.config.layers {
                flow_widths.push(FLOW_WIDTH);
                let (ny, att) = self.block(tape, fy, &self.ids.flow[r], flow_segments.clone(), Some(&key_mask), &mut drop);
                flow_attention.push(att);
                fy = ny;
            }
            y = Some(fy);
        }
        let y = y.expect("at least one layer");
        let (g, b) = (tape.param(self.ids.burst_norm.0), tape.param(self.ids.burst_norm.1));
        let tokens = tape.layer_norm(x, g, b);
        let (g, b) = (tape.param(self.ids.flow_norm.0), tape.param(self.ids.flow_norm.1));
        let y = tape.layer_norm(y, g, b);
        let cls_b_index = batch
            .slots
            .iter()
            .enumerate()
            .flat_map(|(f, slots)| slots.iter().enumerate().map(move |(s, b)| b.map(|_| f * FLOW_WIDTH + s)))
            .collect();
        let cls_b = tape.gather_rows(y, cls_b_index);
        let cls_f = tape.gather_rows(y, (0..nf).map(|f| Some(f * FLOW_WIDTH + MAX_BURSTS)).collect());
        Encoded {
            tokens,
            cls_b,
            cls_f,
            burst_attention,
            flow_attention,
            flow_widths,
        }
    }

    /// Mean cross-entropy of the masked-token head at the given packed rows.
    pub fn mlm_loss(&self, tape: &mut Tape<T>, enc: &Encoded, rows: &[usize], targets: &[usize]) -> Var {
        let h = tape.gather_rows(enc.tokens, rows.iter().map(|&r| Some(r)).collect());
        let (w, b) = (tape.param(self.ids.mlm.0), tape.param(self.ids.mlm.1));
        tape.linear_cross_entropy(h, w, b, targets)
    }

    /// Task-head logits: one row per flow, or `MAX_BURSTS` rows per flow
    /// (invalid bursts included; callers skip them).
    pub fn head_logits(&self, tape: &mut Tape<T>, enc: &Encoded, level: TaskLevel) -> Result<Var, ModelError> {
        let h = self.ids.head.ok_or(ModelError::NoHead)?;
        let x = match level {
            TaskLevel::Flow => enc.cls_f,
            TaskLevel::Burst => enc.cls_b,
        };
        let (w, b) = (tape.param(h.l1.0), tape.param(h.l1.1));
        let z = tape.linear(x, w, Some(b));
        let z = tape.gelu(z);
        let (w, b) = (tape.param(h.l2.0), tape.param(h.l2.1));
        Ok(tape.linear(z, w, Some(b)))
    }

    /// Inference-mode hidden states for each flow.
    pub fn infer(&self, flows: &[&TokenizedFlow]) -> Result<Vec<FlowOutput>, ModelError> {
        let batch = FlowBatch::new(flows)?;
        let mut tape = Tape::inference(&self.params);
        let enc = self.encode(&mut tape, &batch, None);
        let q = self.config.hidden;
        let tokens = tape.value(enc.tokens);
        let cls_b = tape.value(enc.cls_b);
        let cls_f = tape.value(enc.cls_f);
        let f32s = |xs: &[T]| xs.iter().map(|x| x.as_f64() as f32).collect::<Vec<f32>>();
        Ok((0..batch.flow_count)
            .map(|f| {
                let mut states = Tensor::zeros(&[GRID_LEN, q]);
                let mut valid = vec![false; GRID_LEN];
                for (g, v) in valid.iter_mut().enumerate() {
                    if let Some(r) = batch.row(f, g) {
                        states.row_mut(g).copy_from_slice(&f32s(tokens.row(r)));
                        *v = true;
                    }
                }
                let cb = f32s(&cls_b.data()[f * MAX_BURSTS * q..(f + 1) * MAX_BURSTS * q]);
                FlowOutput {
                    token_states: states,
                    cls_b: Tensor::from_vec(&[MAX_BURSTS, q], cb).expect("12 x q"),
                    cls_f: f32s(cls_f.row(f)),
                    valid,
                }
            })
            .collect())
    }
}

impl Model<f32> {
    /// Masked-token logits for the given grid positions of one flow,
    /// `positions.len() x vocab`.
    pub fn mlm_logits(&self, out: &FlowOutput, positions: &[usize]) -> Tensor<f32> {
        let q = self.config.hidden;
        let v = self.config.vocab;
        let mut h = Vec::with_capacity(positions.len() * q);
        for &g in positions {
            h.extend_from_slice(out.token_states.row(g));
        }
        let mut logits = Tensor::zeros(&[positions.len(), v]);
        let (w, b) = (self.params.get(self.ids.mlm.0), self.params.get(self.ids.mlm.1));
        kernels::linear_rows(&h, positions.len(), q, w.data(), v, b.data(), |i, row| {
            logits.row_mut(i).copy_from_slice(row)
        });
        logits
    }

    /// Logits at every grid position, `MAX_BURSTS x BURST_LEN x vocab`.
    pub fn mlm_logits_full(&self, out: &FlowOutput) -> Tensor<f32> {
        let all: Vec<usize> = (0..GRID_LEN).collect();
        self.mlm_logits(out, &all)
            .reshape(&[MAX_BURSTS, BURST_LEN, self.config.vocab])
            .expect("grid shape")
    }

    /// Most likely token at each requested packed row.
    pub fn predict_rows(&self, tokens: &Tensor<f32>, rows: &[usize]) -> Vec<usize> {
        let q = self.config.hidden;
        let v = self.config.vocab;
        let mut h = Vec::with_capacity(rows.len() * q);
        for &r in rows {
            h.extend_from_slice(tokens.row(r));
        }
        let mut out = vec![0; rows.len()];
        let (w, b) = (self.params.get(self.ids.mlm.0), self.params.get(self.ids.mlm.1));
        kernels::linear_rows(&h, rows.len(), q, w.data(), v, b.data(), |i, row| out[i] = kernels::argmax(row));
        out
    }

    /// Head logits computed from a finished [`FlowOutput`].
    pub fn cls_logits(&self, out: &FlowOutput, level: TaskLevel) -> Result<Tensor<f32>, ModelError> {
        let h = self.ids.head.ok_or(ModelError::NoHead)?;
        let q = self.config.hidden;
        let x = match level {
            TaskLevel::Flow => Tensor::from_vec(&[1, q], out.cls_f.clone()).expect("1 x q"),
            TaskLevel::Burst => out.cls_b.clone(),
        };
        let mut tape = Tape::inference(&self.params);
        let x = tape.constant(x);
        let (w, b) = (tape.param(h.l1.0), tape.param(h.l1.1));
        let z = tape.linear(x, w, Some(b));
        let z = tape.gelu(z);
        let (w, b) = (tape.param(h.l2.0), tape.param(h.l2.1));
        let z = tape.linear(z, w, Some(b));
        Ok(tape.value(z).clone())
    }
}
