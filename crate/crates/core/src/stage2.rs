//! Second-stage volume classifier over the sequence of window embeddings.
//!
//! Sequences of any length are reduced to a fixed number of segments, encoded
//! by a transformer with a class token, and scored by a three-layer head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, STAGE2_TAG};
use crate::error::{Error, Result};
use crate::nn::{BertConfig, BertEncoder, Ctx, Linear, ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor, Var};

pub const DEFAULT_SEGMENTS: usize = 16;
pub const SEVERITY_CLASSES: usize = 4;

/// Reduces a `[W, D]` sequence to `[K, D]` segments.
///
/// Segment `j` spans `[j·W/K, (j+1)·W/K)` in row units. With `W ≥ K` each row
/// is weighted by its overlap with that span; with `W < K` the sequence is
/// linearly interpolated at the span centre.
pub fn segment_average<T: Scalar>(seq: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    if seq.ndim() != 2 || seq.shape()[0] == 0 {
        return Err(Error::Data(format!("segment averaging needs a non-empty [W, D] sequence, got {:?}", seq.shape())));
    }
    if k == 0 {
        return Err(Error::Config("segment count must be positive".into()));
    }
    let (w, d) = (seq.shape()[0], seq.shape()[1]);
    let x = seq.data();
    let mut out = vec![T::zero(); k * d];
    for (j, dst) in out.chunks_mut(d).enumerate() {
        if w >= k {
            // Scaled by K: segment is [jW, (j+1)W), row i is [iK, (i+1)K).
            let (lo, hi) = (j * w, (j + 1) * w);
            // Written as the first row plus weighted differences, so constant
            // inputs and the W == K case come out exact.
            let first = lo / k;
            let last = (hi - 1) / k;
            let base = &x[first * d..(first + 1) * d];
            dst.copy_from_slice(base);
            for i in first + 1..=last {
                let overlap = hi.min((i + 1) * k) - lo.max(i * k);
                let weight = T::lit(overlap as f64 / w as f64);
                for ((o, &v), &b) in dst.iter_mut().zip(&x[i * d..(i + 1) * d]).zip(base) {
                    *o += weight * (v - b);
                }
            }
        } else {
            let pos = ((j as f64 + 0.5) * w as f64 / k as f64 - 0.5).clamp(0.0, (w - 1) as f64);
            let i0 = pos.floor() as usize;
            let i1 = (i0 + 1).min(w - 1);
            let frac = T::lit(pos - i0 as f64);
            for c in 0..d {
                let (a, b) = (x[i0 * d + c], x[i1 * d + c]);
                dst[c] = a + frac * (b - a);
            }
        }
    }
    Ok(Tensor::from_vec(&[k, d], out))
}

/// Stacks the segment matrices of several volumes into `[N, K, D]`.
pub fn segment_batch<T: Scalar>(seqs: &[&Tensor<T>], k: usize) -> Result<Tensor<T>> {
    let mut data = Vec::new();
    let mut d = None;
    for seq in seqs {
        let segs = segment_average(seq, k)?;
        let width = segs.shape()[1];
        if *d.get_or_insert(width) != width {
            return Err(Error::Data("embedding sequences differ in width".into()));
        }
        data.extend_from_slice(segs.data());
    }
    Ok(Tensor::from_vec(&[seqs.len(), k, d.unwrap_or(0)], data))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage2Task {
    Binary,
    Severity,
}

impl Stage2Task {
    pub fn outputs(self) -> usize {
        match self {
            Stage2Task::Binary => 1,
            Stage2Task::Severity => SEVERITY_CLASSES,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2Config {
    pub bert: BertConfig,
    pub segments: usize,
    pub hidden: [usize; 2],
    pub head_dropout: f64,
    pub task: Stage2Task,
}

impl Stage2Config {
    pub fn new(bert: BertConfig, segments: usize, task: Stage2Task) -> Self {
        Self { bert, segments, hidden: [256, 128], head_dropout: 0.3, task }
    }

    pub fn validate(&self) -> Result<()> {
        if self.segments == 0 {
            return Err(Error::Config("segment count must be positive".into()));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.head_dropout) {
            return Err(Error::Config(format!("head dropout {} outside [0, 1)", self.head_dropout)));
        }
        self.bert.validate(self.segments)
    }
}

#[derive(Debug, Clone)]
pub struct Stage2Net {
    /// Per-feature offset and scale applied to segments before encoding.
    pub input_mean: ParamId,
    pub input_scale: ParamId,
    pub encoder: BertEncoder,
    pub fc: [Linear; 3],
}

/// Aggregating encoder plus head, with weights.
#[derive(Debug, Clone)]
pub struct Stage2Model<T: Scalar = f32> {
    pub config: Stage2Config,
    pub net: Stage2Net,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Stage2Model<T> {
    pub fn new(config: Stage2Config, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let d = config.bert.model_dim;
        let input_mean = params.add_buffer("aggregate.input_mean", Tensor::zeros(&[d]));
        let input_scale = params.add_buffer("aggregate.input_scale", Tensor::full(&[d], T::one()));
        let encoder = BertEncoder::new(&mut params, "aggregate", config.bert.clone(), &mut rng);
        let [h1, h2] = config.hidden;
        let fc = [
            Linear::new(&mut params, "head.fc1", d, h1, &mut rng),
            Linear::new(&mut params, "head.fc2", h1, h2, &mut rng),
            Linear::new(&mut params, "head.fc3", h2, config.task.outputs(), &mut rng),
        ];
        Ok(Self { config, net: Stage2Net { input_mean, input_scale, encoder, fc }, params })
    }

    /// Sets the input standardization to the per-feature mean and spread of `segments` `[N, K, D]`.
    pub fn fit_input_scaling(&mut self, segments: &Tensor<T>) -> Result<()> {
        let d = self.config.bert.model_dim;
        if segments.ndim() != 3 || segments.shape()[2] != d || segments.numel() == 0 {
            return Err(Error::Data(format!("cannot fit input scaling to segments of shape {:?}", segments.shape())));
        }
        let rows = (segments.numel() / d) as f64;
        let mut mean = vec![0.0f64; d];
        let mut sq = vec![0.0f64; d];
        for row in segments.data().chunks(d) {
            for c in 0..d {
                let v = row[c].to_f64().unwrap_or(0.0);
                mean[c] += v / rows;
                sq[c] += v * v / rows;
            }
        }
        let scale: Vec<T> = (0..d).map(|c| T::lit(1.0 / (sq[c] - mean[c] * mean[c]).max(0.0).sqrt().max(1e-4))).collect();
        *self.params.get_mut(self.net.input_mean) = Tensor::from_vec(&[d], mean.into_iter().map(T::lit).collect());
        *self.params.get_mut(self.net.input_scale) = Tensor::from_vec(&[d], scale);
        Ok(())
    }

    fn standardize(&self, ctx: &Ctx<T>, segments: &Var<T>) -> Var<T> {
        let neg_mean = ctx.buffer(self.net.input_mean).map(|v| -v);
        let scale = ctx.buffer(self.net.input_scale).data();
        let tiled: Vec<T> = (0..segments.value().numel()).map(|i| scale[i % scale.len()]).collect();
        segments
            .add_broadcast(&Var::constant(neg_mean))
            .mul(&Var::constant(Tensor::from_vec(segments.shape(), tiled)))
    }

    /// Class-token embeddings `[N, D]` for segments `[N, K, D]`.
    pub fn aggregate(&self, ctx: &Ctx<T>, segments: &Var<T>) -> Var<T> {
        self.net.encoder.forward(ctx, &self.standardize(ctx, segments)).cls
    }

    /// Head logits `[N, outputs]`.
    pub fn head_logits(&self, ctx: &Ctx<T>, embedding: &Var<T>) -> Var<T> {
        let p = self.config.head_dropout;
        let [fc1, fc2, fc3] = &self.net.fc;
        let h = ctx.dropout(&fc1.forward(ctx, embedding).relu(), p);
        let h = ctx.dropout(&fc2.forward(ctx, &h).relu(), p);
        fc3.forward(ctx, &h)
    }

    pub fn logits(&self, ctx: &Ctx<T>, segments: &Var<T>) -> Var<T> {
        self.head_logits(ctx, &self.aggregate(ctx, segments))
    }

    fn probabilities(&self, logits: Var<T>) -> Tensor<T> {
        match self.config.task {
            Stage2Task::Binary => logits.sigmoid().value().clone(),
            Stage2Task::Severity => logits.softmax_last().value().clone(),
        }
    }

    /// Inference-mode probabilities `[N, outputs]` for segments `[N, K, D]`.
    pub fn predict_proba(&self, segments: &Tensor<T>) -> Tensor<T> {
        let ctx = Ctx::eval(&self.params);
        self.probabilities(self.logits(&ctx, &Var::constant(segments.clone())))
    }

    /// Inference-mode probabilities for precomputed embeddings `[N, D]`.
    pub fn classify(&self, embedding: &Tensor<T>) -> Tensor<T> {
        let ctx = Ctx::eval(&self.params);
        self.probabilities(self.head_logits(&ctx, &Var::constant(embedding.clone())))
    }

    pub fn aggregate_eval(&self, segments: &Tensor<T>) -> Tensor<T> {
        let ctx = Ctx::eval(&self.params);
        self.aggregate(&ctx, &Var::constant(segments.clone())).value().clone()
    }
}

impl Stage2Model<f32> {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let config = serde_json::to_string(&self.config).expect("config serializes");
        Checkpoint::from_store(STAGE2_TAG, config, &self.params)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config: Stage2Config =
            serde_json::from_str(&ck.config).map_err(|e| Error::Format(format!("stage-2 config record: {e}")))?;
        let mut model = Self::new(config, 0)?;
        ck.load_into(&mut model.params)?;
        Ok(model)
    }
}
