//! Desk-scale models and synthetic datasets: an MLP classifier, a tiny
//! pre-norm transformer encoder, and the wrapping routine that turns a
//! frozen teacher into an adapter student.
//!
//! Wrappable positions are the named linear sublayers; for the
//! transformer that is qkv, proj, fc1, fc2 per block plus the head.
//! Embedding and positional tables are never wrapped: they are copied
//! into the student and stay frozen. The classification head is wrapped
//! like any other linear layer, so a fully decayed student exports to an
//! adapter-only model end to end.

use crate::error::{Error, Result};
use crate::graph::{Tape, Var};
use crate::lora::{AdapterLinear, PcLoraLinear, PlainLinear};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;

pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Fraction of generated samples used for training; the rest is the eval
/// split. Class labels are interleaved, so any prefix split is balanced.
pub const TRAIN_FRACTION: f64 = 0.75;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Gelu,
    Relu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub seed: u64,
}

impl MlpSpec {
    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 || self.widths.iter().any(|&w| w == 0) {
            return Err(Error::InvalidConfig(format!(
                "mlp widths {:?} need at least two positive entries",
                self.widths
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TinyTransformerSpec {
    pub depth: usize,
    pub d_model: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub seq_len: usize,
    pub vocab: usize,
    pub classes: usize,
    pub seed: u64,
}

impl TinyTransformerSpec {
    /// Default encoder sized for the token-pattern task.
    pub fn for_token_pattern(seed: u64) -> Self {
        Self {
            depth: 2,
            d_model: 32,
            heads: 4,
            mlp_ratio: 4,
            seq_len: token_pattern::SEQ_LEN,
            vocab: token_pattern::VOCAB,
            classes: token_pattern::CLASSES,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0
            || self.d_model == 0
            || self.heads == 0
            || self.mlp_ratio == 0
            || self.seq_len == 0
            || self.vocab == 0
            || self.classes == 0
        {
            return Err(Error::InvalidConfig(
                "transformer spec fields must be positive".into(),
            ));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "d_model {} must be divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Layer slots

/// One wrappable linear position in a model.
#[derive(Debug, Clone)]
pub enum LayerSlot {
    Plain(PlainLinear),
    Wrapped(PcLoraLinear),
    Adapter(AdapterLinear),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlotKind {
    Plain,
    Wrapped,
    Adapter,
}

impl LayerSlot {
    pub fn kind(&self) -> SlotKind {
        match self {
            LayerSlot::Plain(_) => SlotKind::Plain,
            LayerSlot::Wrapped(_) => SlotKind::Wrapped,
            LayerSlot::Adapter(_) => SlotKind::Adapter,
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        match self {
            LayerSlot::Plain(l) => (l.d_in, l.d_out),
            LayerSlot::Wrapped(l) => (l.d_in, l.d_out),
            LayerSlot::Adapter(l) => (l.d_in, l.d_out),
        }
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, lambda: f64) -> Var {
        match self {
            LayerSlot::Plain(l) => l.forward(tape, store, x),
            LayerSlot::Wrapped(l) => l.forward(tape, store, x, lambda).0,
            LayerSlot::Adapter(l) => l.forward(tape, store, x),
        }
    }
}

// ---------------------------------------------------------------------------
// Datasets

pub mod token_pattern {
    pub const SEQ_LEN: usize = 8;
    pub const VOCAB: usize = 8;
    pub const CLASSES: usize = 3;
    pub const MARKERS_PER_SEQ: usize = 3;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    TwoSpirals,
    TokenPattern,
}

#[derive(Debug, Clone)]
pub enum DataInputs {
    /// Row-major `[samples, dim]` real inputs.
    Dense { x: Vec<f64>, dim: usize },
    Tokens { ids: Vec<Vec<usize>> },
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub kind: DatasetKind,
    pub inputs: DataInputs,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub train_count: usize,
    pub noise: f64,
    pub seed: u64,
}

/// One minibatch ready for a forward pass.
#[derive(Debug, Clone)]
pub enum Batch {
    Dense { x: Tensor, labels: Vec<usize> },
    Tokens { ids: Vec<Vec<usize>>, labels: Vec<usize> },
}

impl Batch {
    pub fn labels(&self) -> &[usize] {
        match self {
            Batch::Dense { labels, .. } => labels,
            Batch::Tokens { labels, .. } => labels,
        }
    }

    pub fn len(&self) -> usize {
        self.labels().len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels().is_empty()
    }
}

impl Dataset {
    /// Planar two-spirals classification. Classes interleave by index, so
    /// prefix splits stay balanced.
    pub fn two_spirals(count: usize, noise: f64, seed: u64) -> Self {
        assert!(count >= 8, "two_spirals needs a handful of samples");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let per_class = count.div_ceil(2);
        let max_angle = 3.0 * std::f64::consts::PI;
        let mut x = Vec::with_capacity(count * 2);
        let mut labels = Vec::with_capacity(count);
        for i in 0..count {
            let class = i % 2;
            let k = i / 2;
            let t = k as f64 / (per_class.saturating_sub(1)).max(1) as f64;
            let radius = 0.15 + 0.85 * t;
            let angle = t * max_angle + class as f64 * std::f64::consts::PI;
            let px = radius * angle.cos() + noise * normal.sample(&mut rng);
            let py = radius * angle.sin() + noise * normal.sample(&mut rng);
            x.push(px);
            x.push(py);
            labels.push(class);
        }
        let train_count = (count as f64 * TRAIN_FRACTION).round() as usize;
        Self {
            kind: DatasetKind::TwoSpirals,
            inputs: DataInputs::Dense { x, dim: 2 },
            labels,
            classes: 2,
            train_count,
            noise,
            seed,
        }
    }

    /// Sequence classification: each sequence carries a handful of copies
    /// of one marker token among random filler; the label is the marker.
    /// `noise` is the probability that one marker gets overwritten.
    pub fn token_pattern(count: usize, noise: f64, seed: u64) -> Self {
        use token_pattern::*;
        assert!(count >= CLASSES, "token_pattern needs samples");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ids = Vec::with_capacity(count);
        let mut labels = Vec::with_capacity(count);
        for i in 0..count {
            let class = i % CLASSES;
            let mut seq: Vec<usize> = (0..SEQ_LEN)
                .map(|_| rng.gen_range(CLASSES..VOCAB))
                .collect();
            // choose distinct marker positions
            let mut positions: Vec<usize> = (0..SEQ_LEN).collect();
            for j in 0..MARKERS_PER_SEQ {
                let pick = rng.gen_range(j..SEQ_LEN);
                positions.swap(j, pick);
            }
            for &p in &positions[..MARKERS_PER_SEQ] {
                seq[p] = class;
            }
            if noise > 0.0 && rng.gen_range(0.0..1.0) < noise {
                seq[positions[0]] = rng.gen_range(CLASSES..VOCAB);
            }
            ids.push(seq);
            labels.push(class);
        }
        let train_count = (count as f64 * TRAIN_FRACTION).round() as usize;
        Self {
            kind: DatasetKind::TokenPattern,
            inputs: DataInputs::Tokens { ids },
            labels,
            classes: CLASSES,
            train_count,
            noise,
            seed,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn eval_count(&self) -> usize {
        self.len() - self.train_count
    }

    fn gather(&self, indices: &[usize]) -> Batch {
        let labels: Vec<usize> = indices.iter().map(|&i| self.labels[i]).collect();
        match &self.inputs {
            DataInputs::Dense { x, dim } => {
                let mut data = Vec::with_capacity(indices.len() * dim);
                for &i in indices {
                    data.extend_from_slice(&x[i * dim..(i + 1) * dim]);
                }
                Batch::Dense {
                    x: Tensor::from_vec(vec![indices.len(), *dim], data),
                    labels,
                }
            }
            DataInputs::Tokens { ids } => Batch::Tokens {
                ids: indices.iter().map(|&i| ids[i].clone()).collect(),
                labels,
            },
        }
    }

    /// Uniformly sampled training minibatch.
    pub fn sample_batch(&self, rng: &mut ChaCha8Rng, size: usize) -> Batch {
        assert!(self.train_count > 0, "empty train split");
        let indices: Vec<usize> = (0..size)
            .map(|_| rng.gen_range(0..self.train_count))
            .collect();
        self.gather(&indices)
    }

    fn range_batches(&self, start: usize, end: usize, chunk: usize) -> Vec<Batch> {
        (start..end)
            .step_by(chunk)
            .map(|lo| {
                let hi = (lo + chunk).min(end);
                let indices: Vec<usize> = (lo..hi).collect();
                self.gather(&indices)
            })
            .collect()
    }

    pub fn eval_batches(&self, chunk: usize) -> Vec<Batch> {
        self.range_batches(self.train_count, self.len(), chunk)
    }

    pub fn train_batches(&self, chunk: usize) -> Vec<Batch> {
        self.range_batches(0, self.train_count, chunk)
    }

    /// CSV with header `x0,..,label` (dense) or `t0,..,label` (tokens).
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        match &self.inputs {
            DataInputs::Dense { x, dim } => {
                for j in 0..*dim {
                    let _ = write!(out, "x{j},");
                }
                out.push_str("label\n");
                for (i, label) in self.labels.iter().enumerate() {
                    for j in 0..*dim {
                        let _ = write!(out, "{},", x[i * dim + j]);
                    }
                    let _ = writeln!(out, "{label}");
                }
            }
            DataInputs::Tokens { ids } => {
                let seq = ids[0].len();
                for j in 0..seq {
                    let _ = write!(out, "t{j},");
                }
                out.push_str("label\n");
                for (seq_ids, label) in ids.iter().zip(&self.labels) {
                    for v in seq_ids {
                        let _ = write!(out, "{v},");
                    }
                    let _ = writeln!(out, "{label}");
                }
            }
        }
        out
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        crate::checkpoint::write_atomic(path, self.to_csv().as_bytes())
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::InvalidConfig("empty dataset csv".into()))?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.len() < 2 || cols.last() != Some(&"label") {
            return Err(Error::InvalidConfig(
                "dataset csv header must end with `label`".into(),
            ));
        }
        let dense = cols[0].starts_with('x');
        let width = cols.len() - 1;
        let mut x = Vec::new();
        let mut ids = Vec::new();
        let mut labels = Vec::new();
        for (lineno, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != width + 1 {
                return Err(Error::InvalidConfig(format!(
                    "dataset csv line {}: expected {} fields, got {}",
                    lineno + 2,
                    width + 1,
                    fields.len()
                )));
            }
            if dense {
                for f in &fields[..width] {
                    x.push(f.parse::<f64>().map_err(|e| {
                        Error::InvalidConfig(format!("dataset csv line {}: {e}", lineno + 2))
                    })?);
                }
            } else {
                let seq: std::result::Result<Vec<usize>, _> =
                    fields[..width].iter().map(|f| f.parse::<usize>()).collect();
                ids.push(seq.map_err(|e| {
                    Error::InvalidConfig(format!("dataset csv line {}: {e}", lineno + 2))
                })?);
            }
            labels.push(fields[width].parse::<usize>().map_err(|e| {
                Error::InvalidConfig(format!("dataset csv line {}: {e}", lineno + 2))
            })?);
        }
        if labels.is_empty() {
            return Err(Error::InvalidConfig("dataset csv has no rows".into()));
        }
        let classes = labels.iter().max().unwrap() + 1;
        let count = labels.len();
        Ok(Self {
            kind: if dense {
                DatasetKind::TwoSpirals
            } else {
                DatasetKind::TokenPattern
            },
            inputs: if dense {
                DataInputs::Dense { x, dim: width }
            } else {
                DataInputs::Tokens { ids }
            },
            labels,
            classes,
            train_count: (count as f64 * TRAIN_FRACTION).round() as usize,
            noise: 0.0,
            seed: 0,
        })
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        Self::from_csv(&std::fs::read_to_string(path)?)
    }
}

// ---------------------------------------------------------------------------
// Models

#[derive(Debug, Clone)]
pub struct NormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl NormParams {
    fn create(store: &mut ParamStore, name: &str, d: usize, trainable: bool) -> Self {
        let gain = store.add(
            format!("{name}.gain"),
            Tensor::from_vec(vec![d], vec![1.0; d]),
            trainable,
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![d]), trainable);
        Self { gain, bias }
    }

    fn copy_into(&self, name: &str, src: &ParamStore, dst: &mut ParamStore) -> NormParams {
        NormParams {
            gain: dst.add(format!("{name}.gain"), src.value(self.gain).clone(), false),
            bias: dst.add(format!("{name}.bias"), src.value(self.bias).clone(), false),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub store: ParamStore,
    pub layers: Vec<LayerSlot>,
}

#[derive(Debug, Clone)]
pub struct Block {
    pub ln1: NormParams,
    pub qkv: LayerSlot,
    pub proj: LayerSlot,
    pub ln2: NormParams,
    pub fc1: LayerSlot,
    pub fc2: LayerSlot,
}

#[derive(Debug, Clone)]
pub struct TinyTransformer {
    pub spec: TinyTransformerSpec,
    pub store: ParamStore,
    pub token_embed: ParamId,
    pub pos_embed: ParamId,
    pub blocks: Vec<Block>,
    pub final_ln: NormParams,
    pub head: LayerSlot,
}

#[derive(Debug, Clone)]
pub enum Model {
    Mlp(Mlp),
    Transformer(TinyTransformer),
}

pub struct ForwardOut {
    pub logits: Var,
    /// Wrapped-position outputs in model order; one per slot.
    pub taps: Vec<Var>,
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    let normal = Normal::new(0.0, std).expect("valid std");
    (0..n).map(|_| normal.sample(rng)).collect()
}

impl Mlp {
    pub fn build(spec: MlpSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut store = ParamStore::new();
        let mut layers = Vec::new();
        for (i, pair) in spec.widths.windows(2).enumerate() {
            let (d_in, d_out) = (pair[0], pair[1]);
            let w = Tensor::from_vec(
                vec![d_out, d_in],
                gaussian(&mut rng, d_out * d_in, 1.0 / (d_in as f64).sqrt()),
            );
            let b = Tensor::zeros(vec![d_out]);
            layers.push(LayerSlot::Plain(PlainLinear::create(
                &mut store, i, w, b, true,
            )));
        }
        Ok(Self {
            spec,
            store,
            layers,
        })
    }

    fn forward_in(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        batch: &Batch,
        lambda: f64,
    ) -> ForwardOut {
        let Batch::Dense { x, .. } = batch else {
            panic!("mlp expects dense batches");
        };
        let mut cur = tape.constant(x.clone());
        let mut taps = Vec::with_capacity(self.layers.len());
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let out = layer.forward(tape, store, cur, lambda);
            taps.push(out);
            cur = if i < last {
                match self.spec.activation {
                    Activation::Gelu => tape.gelu(out),
                    Activation::Relu => tape.relu(out),
                }
            } else {
                out
            };
        }
        ForwardOut { logits: cur, taps }
    }
}

impl TinyTransformer {
    pub fn build(spec: TinyTransformerSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut store = ParamStore::new();
        let d = spec.d_model;
        let token_embed = store.add(
            "embed.token",
            Tensor::from_vec(vec![spec.vocab, d], gaussian(&mut rng, spec.vocab * d, 0.02)),
            true,
        );
        let pos_embed = store.add(
            "embed.pos",
            Tensor::from_vec(
                vec![spec.seq_len, d],
                gaussian(&mut rng, spec.seq_len * d, 0.02),
            ),
            true,
        );
        fn linear(
            store: &mut ParamStore,
            rng: &mut ChaCha8Rng,
            index: usize,
            d_in: usize,
            d_out: usize,
        ) -> LayerSlot {
            let w = Tensor::from_vec(vec![d_out, d_in], gaussian(rng, d_out * d_in, 0.02));
            LayerSlot::Plain(PlainLinear::create(
                store,
                index,
                w,
                Tensor::zeros(vec![d_out]),
                true,
            ))
        }
        let mut blocks = Vec::with_capacity(spec.depth);
        for j in 0..spec.depth {
            let ln1 = NormParams::create(&mut store, &format!("block.{j}.ln1"), d, true);
            let qkv = linear(&mut store, &mut rng, j * 4, d, 3 * d);
            let proj = linear(&mut store, &mut rng, j * 4 + 1, d, d);
            let ln2 = NormParams::create(&mut store, &format!("block.{j}.ln2"), d, true);
            let fc1 = linear(&mut store, &mut rng, j * 4 + 2, d, spec.mlp_ratio * d);
            let fc2 = linear(&mut store, &mut rng, j * 4 + 3, spec.mlp_ratio * d, d);
            blocks.push(Block {
                ln1,
                qkv,
                proj,
                ln2,
                fc1,
                fc2,
            });
        }
        let final_ln = NormParams::create(&mut store, "final_ln", d, true);
        let head = linear(&mut store, &mut rng, spec.depth * 4, d, spec.classes);
        Ok(Self {
            spec,
            store,
            token_embed,
            pos_embed,
            blocks,
            final_ln,
            head,
        })
    }

    fn forward_in(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        batch: &Batch,
        lambda: f64,
    ) -> ForwardOut {
        let Batch::Tokens { ids, .. } = batch else {
            panic!("transformer expects token batches");
        };
        let spec = &self.spec;
        let (b, s, d, h) = (ids.len(), spec.seq_len, spec.d_model, spec.heads);
        let dh = d / h;
        let flat: Vec<usize> = ids
            .iter()
            .flat_map(|seq| {
                assert_eq!(seq.len(), s, "sequence length mismatch");
                seq.iter().copied()
            })
            .collect();
        let table = tape.param(store, self.token_embed);
        let tok = tape.embed(table, &flat);
        let pos = tape.param(store, self.pos_embed);
        let pos_tiled = tape.tile_rows(pos, b);
        let mut x = tape.add(tok, pos_tiled);
        let mut taps = Vec::new();
        let scale = 1.0 / (dh as f64).sqrt();
        for block in &self.blocks {
            let g1 = tape.param(store, block.ln1.gain);
            let b1 = tape.param(store, block.ln1.bias);
            let normed = tape.layer_norm(x, g1, b1, LAYER_NORM_EPS);
            let qkv = block.qkv.forward(tape, store, normed, lambda);
            taps.push(qkv);
            let q = tape.slice_cols(qkv, 0, d);
            let k = tape.slice_cols(qkv, d, d);
            let v = tape.slice_cols(qkv, 2 * d, d);
            let mut sample_outs = Vec::with_capacity(b);
            for i in 0..b {
                let qs = tape.slice_rows(q, i * s, s);
                let ks = tape.slice_rows(k, i * s, s);
                let vs = tape.slice_rows(v, i * s, s);
                let mut head_outs = Vec::with_capacity(h);
                for hd in 0..h {
                    let qh = tape.slice_cols(qs, hd * dh, dh);
                    let kh = tape.slice_cols(ks, hd * dh, dh);
                    let vh = tape.slice_cols(vs, hd * dh, dh);
                    let scores = tape.matmul_nt(qh, kh);
                    let scaled = tape.scale(scores, scale);
                    let attn = tape.softmax(scaled);
                    head_outs.push(tape.matmul(attn, vh));
                }
                sample_outs.push(tape.concat_cols(&head_outs));
            }
            let attn_out = tape.concat_rows(&sample_outs);
            let proj = block.proj.forward(tape, store, attn_out, lambda);
            taps.push(proj);
            x = tape.add(x, proj);

            let g2 = tape.param(store, block.ln2.gain);
            let b2 = tape.param(store, block.ln2.bias);
            let normed2 = tape.layer_norm(x, g2, b2, LAYER_NORM_EPS);
            let h1 = block.fc1.forward(tape, store, normed2, lambda);
            taps.push(h1);
            let act = tape.gelu(h1);
            let h2 = block.fc2.forward(tape, store, act, lambda);
            taps.push(h2);
            x = tape.add(x, h2);
        }
        let gf = tape.param(store, self.final_ln.gain);
        let bf = tape.param(store, self.final_ln.bias);
        let xn = tape.layer_norm(x, gf, bf, LAYER_NORM_EPS);
        let pooled: Vec<Var> = (0..b)
            .map(|i| {
                let rows = tape.slice_rows(xn, i * s, s);
                tape.mean_rows(rows)
            })
            .collect();
        let pool = tape.concat_rows(&pooled);
        let logits = self.head.forward(tape, store, pool, lambda);
        taps.push(logits);
        ForwardOut { logits, taps }
    }
}

/// Checkpoint-facing structural description of a model.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "snake_case")]
pub enum ModelManifest {
    Mlp {
        spec: MlpSpec,
        slots: Vec<SlotKind>,
        rank: Option<usize>,
    },
    Transformer {
        spec: TinyTransformerSpec,
        slots: Vec<SlotKind>,
        rank: Option<usize>,
    },
}

impl Model {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Model::Mlp(_) => "mlp",
            Model::Transformer(_) => "transformer",
        }
    }

    pub fn store(&self) -> &ParamStore {
        match self {
            Model::Mlp(m) => &m.store,
            Model::Transformer(m) => &m.store,
        }
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        match self {
            Model::Mlp(m) => &mut m.store,
            Model::Transformer(m) => &mut m.store,
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            Model::Mlp(m) => *m.spec.widths.last().unwrap(),
            Model::Transformer(m) => m.spec.classes,
        }
    }

    /// Wrappable positions in model order.
    pub fn slots(&self) -> Vec<&LayerSlot> {
        match self {
            Model::Mlp(m) => m.layers.iter().collect(),
            Model::Transformer(m) => {
                let mut v = Vec::new();
                for b in &m.blocks {
                    v.push(&b.qkv);
                    v.push(&b.proj);
                    v.push(&b.fc1);
                    v.push(&b.fc2);
                }
                v.push(&m.head);
                v
            }
        }
    }

    pub fn wrapped_layers(&self) -> Vec<&PcLoraLinear> {
        self.slots()
            .into_iter()
            .filter_map(|s| match s {
                LayerSlot::Wrapped(l) => Some(l),
                _ => None,
            })
            .collect()
    }

    pub fn forward_in(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        batch: &Batch,
        lambda: f64,
    ) -> ForwardOut {
        match self {
            Model::Mlp(m) => m.forward_in(store, tape, batch, lambda),
            Model::Transformer(m) => m.forward_in(store, tape, batch, lambda),
        }
    }

    pub fn forward(&self, tape: &mut Tape, batch: &Batch, lambda: f64) -> ForwardOut {
        self.forward_in(self.store(), tape, batch, lambda)
    }

    pub fn manifest(&self) -> ModelManifest {
        let slots: Vec<SlotKind> = self.slots().iter().map(|s| s.kind()).collect();
        let rank = self.slots().iter().find_map(|s| match s {
            LayerSlot::Wrapped(l) => Some(l.rank),
            LayerSlot::Adapter(l) => Some(l.rank),
            LayerSlot::Plain(_) => None,
        });
        match self {
            Model::Mlp(m) => ModelManifest::Mlp {
                spec: m.spec.clone(),
                slots,
                rank,
            },
            Model::Transformer(m) => ModelManifest::Transformer {
                spec: m.spec,
                slots,
                rank,
            },
        }
    }

    /// Replace every wrappable linear with a decay-wrapped layer sharing
    /// the frozen weights. The teacher must already be frozen.
    pub fn wrap(&self, rank: usize, init_std: f64, seed: u64) -> Result<Model> {
        if rank < 1 {
            return Err(Error::InvalidConfig("adapter rank must be >= 1".into()));
        }
        if self.store().trainable_count() != 0 {
            return Err(Error::InvalidConfig(
                "wrap expects a frozen teacher; freeze it first".into(),
            ));
        }
        let mut student = self.clone();
        let old_store = self.store().clone();
        let mut fresh = ParamStore::new();
        let wrap_slot = |fresh: &mut ParamStore, slot: &LayerSlot, index: usize| -> Result<LayerSlot> {
            let LayerSlot::Plain(l) = slot else {
                return Err(Error::InvalidConfig(
                    "wrap expects a plain (unwrapped) teacher".into(),
                ));
            };
            let w = old_store.value(l.w).clone();
            let b = old_store.value(l.b).clone();
            Ok(LayerSlot::Wrapped(PcLoraLinear::wrap(
                fresh,
                index,
                &w,
                &b,
                rank,
                init_std,
                seed.wrapping_add(index as u64),
            )))
        };
        match &mut student {
            Model::Mlp(m) => {
                let mut layers = Vec::new();
                for (i, slot) in m.layers.iter().enumerate() {
                    layers.push(wrap_slot(&mut fresh, slot, i)?);
                }
                m.layers = layers;
                m.store = fresh;
            }
            Model::Transformer(m) => {
                m.token_embed =
                    fresh.add("embed.token", old_store.value(m.token_embed).clone(), false);
                m.pos_embed = fresh.add("embed.pos", old_store.value(m.pos_embed).clone(), false);
                let mut blocks = Vec::new();
                for (j, block) in m.blocks.iter().enumerate() {
                    let ln1 = block
                        .ln1
                        .copy_into(&format!("block.{j}.ln1"), &old_store, &mut fresh);
                    let qkv = wrap_slot(&mut fresh, &block.qkv, j * 4)?;
                    let proj = wrap_slot(&mut fresh, &block.proj, j * 4 + 1)?;
                    let ln2 = block
                        .ln2
                        .copy_into(&format!("block.{j}.ln2"), &old_store, &mut fresh);
                    let fc1 = wrap_slot(&mut fresh, &block.fc1, j * 4 + 2)?;
                    let fc2 = wrap_slot(&mut fresh, &block.fc2, j * 4 + 3)?;
                    blocks.push(Block {
                        ln1,
                        qkv,
                        proj,
                        ln2,
                        fc1,
                        fc2,
                    });
                }
                m.final_ln = m.final_ln.copy_into("final_ln", &old_store, &mut fresh);
                m.head = wrap_slot(&mut fresh, &m.head, m.spec.depth * 4)?;
                m.blocks = blocks;
                m.store = fresh;
            }
        }
        Ok(student)
    }

    /// Strip frozen bases from every wrapped slot, leaving adapters plus
    /// the untouched structural parameters.
    pub fn export_adapters(&self) -> Result<Model> {
        let mut exported = self.clone();
        let old_store = self.store().clone();
        let mut fresh = ParamStore::new();
        let export_slot = |fresh: &mut ParamStore, slot: &LayerSlot| -> Result<LayerSlot> {
            let LayerSlot::Wrapped(l) = slot else {
                return Err(Error::InvalidConfig(
                    "export expects every slot to be wrapped".into(),
                ));
            };
            Ok(LayerSlot::Adapter(l.export(&old_store, fresh)))
        };
        match &mut exported {
            Model::Mlp(m) => {
                let mut layers = Vec::new();
                for slot in &m.layers {
                    layers.push(export_slot(&mut fresh, slot)?);
                }
                m.layers = layers;
                m.store = fresh;
            }
            Model::Transformer(m) => {
                m.token_embed =
                    fresh.add("embed.token", old_store.value(m.token_embed).clone(), false);
                m.pos_embed = fresh.add("embed.pos", old_store.value(m.pos_embed).clone(), false);
                let mut blocks = Vec::new();
                for (j, block) in m.blocks.iter().enumerate() {
                    let ln1 = block
                        .ln1
                        .copy_into(&format!("block.{j}.ln1"), &old_store, &mut fresh);
                    let qkv = export_slot(&mut fresh, &block.qkv)?;
                    let proj = export_slot(&mut fresh, &block.proj)?;
                    let ln2 = block
                        .ln2
                        .copy_into(&format!("block.{j}.ln2"), &old_store, &mut fresh);
                    let fc1 = export_slot(&mut fresh, &block.fc1)?;
                    let fc2 = export_slot(&mut fresh, &block.fc2)?;
                    blocks.push(Block {
                        ln1,
                        qkv,
                        proj,
                        ln2,
                        fc1,
                        fc2,
                    });
                }
                m.final_ln = m.final_ln.copy_into("final_ln", &old_store, &mut fresh);
                m.head = export_slot(&mut fresh, &m.head)?;
                m.blocks = blocks;
                m.store = fresh;
            }
        }
        Ok(exported)
    }

    /// Rebuild the structure described by a manifest with placeholder
    /// values, ready to be filled from a checkpoint's tensor table.
    pub fn skeleton(manifest: &ModelManifest) -> Result<Model> {
        match manifest {
            ModelManifest::Mlp { spec, slots, rank } => {
                let base = Mlp::build(spec.clone())?;
                Model::Mlp(base).reshape_slots(slots, *rank)
            }
            ModelManifest::Transformer { spec, slots, rank } => {
                let base = TinyTransformer::build(*spec)?;
                Model::Transformer(base).reshape_slots(slots, *rank)
            }
        }
    }

    fn reshape_slots(mut self, kinds: &[SlotKind], rank: Option<usize>) -> Result<Model> {
        let n = self.slots().len();
        if kinds.len() != n {
            return Err(Error::Checkpoint(format!(
                "manifest lists {} slots, model has {n}",
                kinds.len()
            )));
        }
        self.store_mut().freeze_all();
        if kinds.iter().all(|k| *k == SlotKind::Plain) {
            return Ok(self);
        }
        let rank = rank.ok_or_else(|| {
            Error::Checkpoint("manifest with wrapped/adapter slots needs a rank".into())
        })?;
        let model = self.wrap(rank, 0.0, 0)?;
        if kinds.iter().all(|k| *k == SlotKind::Wrapped) {
            return Ok(model);
        }
        if kinds.iter().all(|k| *k == SlotKind::Adapter) {
            return model.export_adapters();
        }
        Err(Error::Checkpoint(
            "manifests with mixed slot kinds are not supported".into(),
        ))
    }

    /// Overwrite every store entry from `(name, tensor)` pairs; every
    /// entry must be covered and no extras are allowed.
    pub fn fill_from(&mut self, tensors: &[(String, Tensor)]) -> Result<()> {
        let store = self.store_mut();
        let mut seen = vec![false; store.len()];
        for (name, tensor) in tensors {
            let id = store.by_name(name).ok_or_else(|| {
                Error::Checkpoint(format!("tensor `{name}` does not fit this model"))
            })?;
            store
                .set_value(id, tensor.clone())
                .map_err(|e| Error::Checkpoint(format!("tensor `{name}`: {e}")))?;
            seen[id.index()] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            let name = store.iter().nth(missing).map(|(_, e)| e.name.clone());
            return Err(Error::Checkpoint(format!(
                "checkpoint is missing tensor `{}`",
                name.unwrap_or_default()
            )));
        }
        Ok(())
    }

    pub fn hash_all(&self) -> [u8; 32] {
        self.store().hash_all()
    }

    pub fn hash_frozen(&self) -> [u8; 32] {
        self.store().hash_frozen()
    }
}

// ---------------------------------------------------------------------------
// Teacher training

#[derive(Debug, Clone)]
pub struct TeacherConfig {
    pub budget: u64,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Train-split accuracy the teacher is expected to reach.
    pub target_acc: f64,
    /// Hard floor below which the run errors out.
    pub min_acc: f64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            budget: 3000,
            lr: 3e-3,
            weight_decay: 0.0,
            batch_size: 64,
            seed: 7,
            target_acc: 0.95,
            min_acc: 0.90,
        }
    }
}

/// Argmax accuracy of `model` at the given lambda over prepared batches.
pub fn accuracy_on(model: &Model, batches: &[Batch], lambda: f64) -> f64 {
    let mut correct = 0usize;
    let mut total = 0usize;
    for batch in batches {
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, batch, lambda);
        let logits = tape.value(out.logits);
        let classes = logits.cols();
        for (i, &label) in batch.labels().iter().enumerate() {
            let row = &logits.data()[i * classes..(i + 1) * classes];
            let pred = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
                .map(|(j, _)| j)
                .expect("nonempty row");
            if pred == label {
                correct += 1;
            }
            total += 1;
        }
    }
    assert!(total > 0, "accuracy over an empty dataset");
    correct as f64 / total as f64
}

/// Fit a fresh model to the dataset with cross-entropy and a cosine
/// schedule, then freeze it. Errors if the train-split accuracy lands
/// below `min_acc` after the full budget.
pub fn train_teacher(mut model: Model, dataset: &Dataset, cfg: &TeacherConfig) -> Result<Model> {
    if dataset.is_empty() {
        return Err(Error::InvalidConfig(
            "teacher needs a nonempty dataset".into(),
        ));
    }
    let ids = model.store().trainable_ids();
    let mut opt = AdamW::new(AdamWConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        total_iters: cfg.budget,
        ..Default::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for iter in 0..cfg.budget {
        let batch = dataset.sample_batch(&mut rng, cfg.batch_size);
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &batch, 1.0);
        let loss = tape.softmax_cross_entropy(out.logits, batch.labels());
        let loss_val = tape.value(loss).item();
        if !loss_val.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: iter,
                value: loss_val,
            });
        }
        tape.backward(loss);
        tape.write_grads(model.store_mut());
        opt.step(model.store_mut(), &ids);
    }
    let train_acc = accuracy_on(&model, &dataset.train_batches(256), 1.0);
    if train_acc < cfg.min_acc {
        return Err(Error::TeacherBudget {
            achieved: train_acc,
            required: cfg.min_acc,
            budget: cfg.budget,
        });
    }
    if train_acc < cfg.target_acc {
        log::warn!(
            "teacher reached {train_acc:.4}, below the {:.2} target but above the {:.2} floor",
            cfg.target_acc,
            cfg.min_acc
        );
    }
    model.store_mut().freeze_all();
    Ok(model)
}
