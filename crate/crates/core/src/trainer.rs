//! Training loops, learning-rate schedule, model selection and embedding export.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::ingest::{Label, Severity};
use crate::lungseg::ModalityStack;
use crate::nn::{Adam, Ctx, ParamStore};
use crate::sampling::{sample_eval, sample_train, stage2_windows};
use crate::seed;
use crate::stage1::Stage1Model;
use crate::stage2::{segment_batch, Stage2Model, Stage2Task, SEVERITY_CLASSES};
use crate::tensor::{Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Per-class loss weights for the severity head.
    pub class_weights: Option<Vec<f64>>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            plateau_factor: 0.1,
            plateau_patience: 5,
            max_epochs: 200,
            early_stop_patience: 20,
            batch_size: 8,
            seed: 0,
            class_weights: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return Err(Error::Config(format!("plateau_factor {} outside (0, 1)", self.plateau_factor)));
        }
        if self.plateau_patience == 0 || self.early_stop_patience == 0 {
            return Err(Error::Config("patience values must be at least 1".into()));
        }
        if self.max_epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("max_epochs and batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if let Some(w) = &self.class_weights {
            if w.len() != SEVERITY_CLASSES || w.iter().any(|&v| !(v > 0.0)) {
                return Err(Error::Config("class_weights needs 4 positive values".into()));
            }
        }
        Ok(())
    }
}

/// Multiplies the learning rate by `factor` after `patience` epochs without improvement.
#[derive(Debug, Clone)]
pub struct PlateauScheduler {
    pub lr: f64,
    factor: f64,
    patience: usize,
    bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, factor: f64, patience: usize) -> Self {
        Self { lr, factor, patience, bad_epochs: 0 }
    }

    /// Records one epoch and returns the rate for the next.
    pub fn step(&mut self, improved: bool) -> f64 {
        if improved {
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs == self.patience {
                self.lr *= self.factor;
                self.bad_epochs = 0;
            }
        }
        self.lr
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub task: String,
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub stopped_early: bool,
    /// Diagnostic when training diverged.
    pub aborted: Option<String>,
    pub checkpoint_path: Option<String>,
}

#[derive(Serialize)]
struct Summary<'a> {
    summary: SummaryBody<'a>,
}

#[derive(Serialize)]
struct SummaryBody<'a> {
    task: &'a str,
    seed: u64,
    best_epoch: usize,
    best_val_accuracy: f64,
    epochs_run: usize,
    stopped_early: bool,
    aborted: &'a Option<String>,
    checkpoint_path: &'a Option<String>,
}

impl RunRecord {
    /// One JSON object per epoch followed by a summary object.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.epochs {
            out.push_str(&serde_json::to_string(e).expect("epoch serializes"));
            out.push('\n');
        }
        let summary = Summary {
            summary: SummaryBody {
                task: &self.task,
                seed: self.seed,
                best_epoch: self.best_epoch,
                best_val_accuracy: self.best_val_accuracy,
                epochs_run: self.epochs.len(),
                stopped_early: self.stopped_early,
                aborted: &self.aborted,
                checkpoint_path: &self.checkpoint_path,
            },
        };
        out.push_str(&serde_json::to_string(&summary).expect("summary serializes"));
        out.push('\n');
        out
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).at(path)?;
        f.write_all(self.to_jsonl().as_bytes()).at(path)
    }
}

/// Best model found by a run together with its record.
#[derive(Debug, Clone)]
pub struct TrainOutcome<M> {
    pub model: M,
    pub record: RunRecord,
}

/// Models whose weights live in one [`ParamStore`].
pub trait HasParams {
    fn params(&self) -> &ParamStore<f32>;
    fn params_mut(&mut self) -> &mut ParamStore<f32>;
}

impl HasParams for Stage1Model<f32> {
    fn params(&self) -> &ParamStore<f32> {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.params
    }
}

impl HasParams for Stage2Model<f32> {
    fn params(&self) -> &ParamStore<f32> {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.params
    }
}

/// One optimizer step; returns the loss before the update.
fn optimizer_step<M: HasParams>(
    model: &mut M,
    adam: &mut Adam<f32>,
    lr: f64,
    ctx_seed: u64,
    loss_fn: impl FnOnce(&M, &Ctx<f32>) -> Var<f32>,
) -> Result<f64> {
    let (value, grads, updates) = {
        let ctx = Ctx::train(model.params(), ctx_seed);
        let loss = loss_fn(model, &ctx);
        let value = f64::from(loss.value().item());
        if !value.is_finite() {
            return Err(Error::Numerical(format!("loss became {value}")));
        }
        (value, loss.backward(), ctx.take_buffer_updates())
    };
    model.params_mut().apply_buffer_updates(updates);
    adam.step(model.params_mut(), &grads, lr);
    Ok(value)
}

/// Shared epoch loop: shuffled mini-batches, validation, plateau schedule, early stop.
fn fit<M: HasParams + Clone>(
    mut model: M,
    cfg: &TrainConfig,
    task: &str,
    n_train: usize,
    batch_loss: impl Fn(&M, &Ctx<f32>, usize, &[usize]) -> Var<f32>,
    validate: impl Fn(&M) -> (f64, f64),
) -> Result<TrainOutcome<M>> {
    cfg.validate()?;
    let mut adam = Adam::new();
    let mut sched = PlateauScheduler::new(cfg.learning_rate, cfg.plateau_factor, cfg.plateau_patience);
    let mut record = RunRecord {
        task: task.to_string(),
        seed: cfg.seed,
        epochs: Vec::new(),
        best_epoch: 0,
        best_val_accuracy: f64::NEG_INFINITY,
        stopped_early: false,
        aborted: None,
        checkpoint_path: None,
    };
    let mut best: Option<(M, f64)> = None;
    let mut since_best = 0usize;
    let mut order: Vec<usize> = (0..n_train).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, &[0x0dd]));
    'epochs: for epoch in 1..=cfg.max_epochs {
        let lr = sched.lr;
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let ctx_seed = seed::derive(cfg.seed, &[epoch as u64, b as u64]);
            match optimizer_step(&mut model, &mut adam, lr, ctx_seed, |m, ctx| batch_loss(m, ctx, epoch, batch)) {
                Ok(v) => loss_sum += v * batch.len() as f64,
                Err(e) => {
                    record.aborted = Some(format!("epoch {epoch}, batch {b}: {e}"));
                    break 'epochs;
                }
            }
        }
        let (val_loss, val_accuracy) = validate(&model);
        record.epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / n_train as f64,
            val_loss,
            val_accuracy,
            learning_rate: lr,
        });
        let improved = match &best {
            None => true,
            Some((_, best_loss)) => {
                val_accuracy > record.best_val_accuracy
                    || (val_accuracy == record.best_val_accuracy && val_loss < *best_loss)
            }
        };
        if improved {
            record.best_epoch = epoch;
            record.best_val_accuracy = val_accuracy;
            best = Some((model.clone(), val_loss));
            since_best = 0;
        } else {
            since_best += 1;
        }
        sched.step(improved);
        if since_best >= cfg.early_stop_patience {
            record.stopped_early = epoch < cfg.max_epochs;
            break;
        }
    }
    let model = match best {
        Some((m, _)) => m,
        None => {
            return Err(Error::Numerical(record.aborted.unwrap_or_else(|| "no epoch completed".into())));
        }
    };
    Ok(TrainOutcome { model, record })
}

/// Modality stacks of one volume's kept slices, `[n, 3, S, S]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StackVolume {
    pub volume_id: String,
    pub label: Option<Label>,
    pub severity: Option<Severity>,
    pub size: usize,
    pub n_slices: usize,
    pub data: Vec<f32>,
}

impl StackVolume {
    pub fn from_stacks(
        volume_id: &str,
        label: Option<Label>,
        severity: Option<Severity>,
        stacks: &[ModalityStack],
    ) -> Result<Self> {
        let size = stacks.first().map(|s| s.size).unwrap_or(0);
        if stacks.iter().any(|s| s.size != size) {
            return Err(Error::Data(format!("volume {volume_id} mixes stack sizes")));
        }
        let data = stacks.iter().flat_map(|s| s.data.iter().copied()).collect();
        Ok(Self { volume_id: volume_id.to_string(), label, severity, size, n_slices: stacks.len(), data })
    }
}

/// Assembles `[N, 3, T, S, S]` inputs from one index window per volume.
pub fn window_batch(vols: &[&StackVolume], windows: &[Vec<usize>]) -> Tensor<f32> {
    assert_eq!(vols.len(), windows.len(), "one window per volume");
    let s = vols.first().map(|v| v.size).unwrap_or(0);
    let t = windows.first().map(Vec::len).unwrap_or(0);
    let plane = s * s;
    let mut data = Vec::with_capacity(vols.len() * 3 * t * plane);
    for (v, w) in vols.iter().zip(windows) {
        assert_eq!(v.size, s, "stack sizes differ within a batch");
        for c in 0..3 {
            for &i in w {
                let start = (i * 3 + c) * plane;
                data.extend_from_slice(&v.data[start..start + plane]);
            }
        }
    }
    Tensor::from_vec(&[vols.len(), 3, t, s, s], data)
}

fn binary_targets(vols: &[&StackVolume]) -> Vec<f32> {
    vols.iter().map(|v| if v.label == Some(Label::Covid) { 1.0 } else { 0.0 }).collect()
}

fn check_stage1_inputs(model: &Stage1Model<f32>, vols: &[StackVolume], what: &str) -> Result<()> {
    if vols.is_empty() {
        return Err(Error::Config(format!("{what} partition is empty")));
    }
    let size = model.config.backbone.input_size;
    for v in vols {
        if v.label.is_none() {
            return Err(Error::Data(format!("{what} volume {} has no label", v.volume_id)));
        }
        if v.n_slices == 0 {
            return Err(Error::Data(format!("{what} volume {} has no kept slices", v.volume_id)));
        }
        if v.size != size {
            return Err(Error::Config(format!(
                "stacks of {} are {}×{}, model expects {size}×{size}",
                v.volume_id, v.size, v.size
            )));
        }
    }
    Ok(())
}

/// Mean loss and accuracy of the single evaluation window per volume.
pub fn evaluate_stage1(model: &Stage1Model<f32>, vols: &[StackVolume], batch_size: usize) -> (f64, f64) {
    let probs = stage1_probabilities(model, vols, batch_size);
    let (mut loss, mut correct) = (0.0, 0usize);
    for (p, v) in probs.iter().zip(vols) {
        let y = v.label == Some(Label::Covid);
        let p = f64::from(*p).clamp(1e-7, 1.0 - 1e-7);
        loss -= if y { p.ln() } else { (1.0 - p).ln() };
        correct += ((p >= 0.5) == y) as usize;
    }
    (loss / vols.len() as f64, correct as f64 / vols.len() as f64)
}

/// Stage-1 probability per volume from its symmetric evaluation window.
pub fn stage1_probabilities(model: &Stage1Model<f32>, vols: &[StackVolume], batch_size: usize) -> Vec<f32> {
    let t = model.config.backbone.input_frames;
    let mut out = Vec::with_capacity(vols.len());
    for chunk in vols.chunks(batch_size.max(1)) {
        let refs: Vec<&StackVolume> = chunk.iter().collect();
        let windows: Vec<Vec<usize>> =
            chunk.iter().map(|v| sample_eval(v.n_slices, t).expect("non-empty volume")).collect();
        out.extend(model.predict_proba(&window_batch(&refs, &windows)));
    }
    out
}

/// Trains stage 1 on one fresh random window per training volume and epoch.
pub fn train_stage1(
    model: Stage1Model<f32>,
    train: &[StackVolume],
    val: &[StackVolume],
    cfg: &TrainConfig,
) -> Result<TrainOutcome<Stage1Model<f32>>> {
    check_stage1_inputs(&model, train, "train")?;
    check_stage1_inputs(&model, val, "val")?;
    let t = model.config.backbone.input_frames;
    let eval_batch = cfg.batch_size.max(8);
    let batch_loss = |m: &Stage1Model<f32>, ctx: &Ctx<f32>, epoch: usize, idx: &[usize]| {
        let vols: Vec<&StackVolume> = idx.iter().map(|&i| &train[i]).collect();
        let windows: Vec<Vec<usize>> = idx
            .iter()
            .map(|&i| {
                let s = seed::derive(cfg.seed, &[0x51, epoch as u64, i as u64]);
                sample_train(train[i].n_slices, t, s).expect("non-empty volume")
            })
            .collect();
        let x = Var::constant(window_batch(&vols, &windows));
        m.logits(ctx, &x).bce_with_logits(&binary_targets(&vols))
    };
    fit(model, cfg, "stage1", train.len(), batch_loss, |m| evaluate_stage1(m, val, eval_batch))
}

/// Losses of repeated optimizer steps on one fixed batch with a fixed dropout draw.
pub fn fixed_batch_losses(
    model: &mut Stage1Model<f32>,
    x: &Tensor<f32>,
    targets: &[f32],
    lr: f64,
    steps: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut adam = Adam::new();
    let input = Var::constant(x.clone());
    (0..steps)
        .map(|_| optimizer_step(model, &mut adam, lr, seed, |m, ctx| m.logits(ctx, &input).bce_with_logits(targets)))
        .collect()
}

/// Window embeddings of one volume in sequential order.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSequence {
    pub volume_id: String,
    /// `[W, D]`.
    pub features: Tensor<f32>,
}

/// Embeds every stage-2 window of every volume; volumes without slices are reported and skipped.
pub fn extract_embeddings(
    model: &Stage1Model<f32>,
    vols: &[StackVolume],
    batch_size: usize,
) -> Result<(Vec<EmbeddingSequence>, Vec<String>)> {
    let t = model.config.backbone.input_frames;
    let d = model.config.bert.model_dim;
    let mut out = Vec::with_capacity(vols.len());
    let mut skipped = Vec::new();
    for v in vols {
        if v.n_slices == 0 {
            log::warn!("volume {} has no kept slices; not embedded", v.volume_id);
            skipped.push(v.volume_id.clone());
            continue;
        }
        if v.size != model.config.backbone.input_size {
            return Err(Error::Config(format!("stacks of {} do not match the model input size", v.volume_id)));
        }
        let plan = stage2_windows(v.n_slices, t)?;
        let mut rows = Vec::with_capacity(plan.windows.len() * d);
        for chunk in plan.windows.chunks(batch_size.max(1)) {
            let refs = vec![v; chunk.len()];
            rows.extend_from_slice(model.embed_eval(&window_batch(&refs, chunk)).data());
        }
        out.push(EmbeddingSequence {
            volume_id: v.volume_id.clone(),
            features: Tensor::from_vec(&[plan.windows.len(), d], rows),
        });
    }
    Ok((out, skipped))
}

/// One labeled embedding sequence.
#[derive(Debug, Clone, Copy)]
pub struct Stage2Example<'a> {
    pub sequence: &'a EmbeddingSequence,
    pub label: Option<Label>,
    pub severity: Option<Severity>,
}

struct Stage2Data {
    segments: Tensor<f32>,
    binary: Vec<f32>,
    classes: Vec<usize>,
}

impl Stage2Data {
    fn build(examples: &[Stage2Example], task: Stage2Task, k: usize, what: &str) -> Result<Self> {
        let chosen: Vec<&Stage2Example> = match task {
            Stage2Task::Binary => examples.iter().collect(),
            Stage2Task::Severity => {
                examples.iter().filter(|e| e.label == Some(Label::Covid) && e.severity.is_some()).collect()
            }
        };
        if chosen.is_empty() {
            let kind = if task == Stage2Task::Severity { "severity-labeled " } else { "" };
            return Err(Error::Config(format!("{what} partition has no {kind}volumes")));
        }
        if task == Stage2Task::Binary && chosen.iter().any(|e| e.label.is_none()) {
            return Err(Error::Data(format!("{what} partition contains unlabeled volumes")));
        }
        let seqs: Vec<&Tensor<f32>> = chosen.iter().map(|e| &e.sequence.features).collect();
        Ok(Self {
            segments: segment_batch(&seqs, k)?,
            binary: chosen.iter().map(|e| if e.label == Some(Label::Covid) { 1.0 } else { 0.0 }).collect(),
            classes: chosen.iter().map(|e| e.severity.map_or(0, Severity::index)).collect(),
        })
    }

    fn len(&self) -> usize {
        self.binary.len()
    }

    fn rows(&self, idx: &[usize]) -> Tensor<f32> {
        let s = self.segments.shape();
        let per = s[1] * s[2];
        let data = idx.iter().flat_map(|&i| self.segments.data()[i * per..(i + 1) * per].iter().copied()).collect();
        Tensor::from_vec(&[idx.len(), s[1], s[2]], data)
    }
}

fn stage2_loss(
    model: &Stage2Model<f32>,
    logits: &Var<f32>,
    data: &Stage2Data,
    idx: &[usize],
    weights: Option<&[f32]>,
) -> Var<f32> {
    match model.config.task {
        Stage2Task::Binary => {
            let y: Vec<f32> = idx.iter().map(|&i| data.binary[i]).collect();
            logits.reshape(&[idx.len()]).bce_with_logits(&y)
        }
        Stage2Task::Severity => {
            let y: Vec<usize> = idx.iter().map(|&i| data.classes[i]).collect();
            logits.cross_entropy(&y, weights)
        }
    }
}

fn evaluate_stage2_data(model: &Stage2Model<f32>, data: &Stage2Data, weights: Option<&[f32]>) -> (f64, f64) {
    let idx: Vec<usize> = (0..data.len()).collect();
    let ctx = Ctx::eval(&model.params);
    let logits = model.logits(&ctx, &Var::constant(data.rows(&idx)));
    let loss = f64::from(stage2_loss(model, &logits, data, &idx, weights).value().item());
    let z = logits.value().data();
    let correct = match model.config.task {
        Stage2Task::Binary => idx.iter().filter(|&&i| (z[i] >= 0.0) == (data.binary[i] == 1.0)).count(),
        Stage2Task::Severity => idx
            .iter()
            .filter(|&&i| {
                let row = &z[i * SEVERITY_CLASSES..(i + 1) * SEVERITY_CLASSES];
                argmax(row) == data.classes[i]
            })
            .count(),
    };
    (loss, correct as f64 / data.len() as f64)
}

/// Index of the largest value; the first wins ties.
pub fn argmax(row: &[f32]) -> usize {
    row.iter().enumerate().fold(0, |best, (i, &v)| if v > row[best] { i } else { best })
}

/// Loss and accuracy of a stage-2 model on labeled sequences.
pub fn evaluate_stage2(model: &Stage2Model<f32>, examples: &[Stage2Example]) -> Result<(f64, f64)> {
    let data = Stage2Data::build(examples, model.config.task, model.config.segments, "evaluation")?;
    Ok(evaluate_stage2_data(model, &data, None))
}

/// Trains a stage-2 head on frozen embeddings.
pub fn train_stage2(
    mut model: Stage2Model<f32>,
    train: &[Stage2Example],
    val: &[Stage2Example],
    cfg: &TrainConfig,
) -> Result<TrainOutcome<Stage2Model<f32>>> {
    cfg.validate()?;
    let task = model.config.task;
    let k = model.config.segments;
    let train_data = Stage2Data::build(train, task, k, "train")?;
    let val_data = Stage2Data::build(val, task, k, "val")?;
    model.fit_input_scaling(&train_data.segments)?;
    if task == Stage2Task::Severity {
        let first = train_data.classes[0];
        if train_data.classes.iter().all(|&c| c == first) {
            return Err(Error::Data(format!(
                "every severity training label is {}; a single-class run cannot be trained",
                Severity::ALL[first]
            )));
        }
    }
    let weights: Option<Vec<f32>> = cfg.class_weights.as_ref().map(|w| w.iter().map(|&v| v as f32).collect());
    let name = match task {
        Stage2Task::Binary => "stage2",
        Stage2Task::Severity => "severity",
    };
    let batch_loss = |m: &Stage2Model<f32>, ctx: &Ctx<f32>, _epoch: usize, idx: &[usize]| {
        let logits = m.logits(ctx, &Var::constant(train_data.rows(idx)));
        stage2_loss(m, &logits, &train_data, idx, weights.as_deref())
    };
    fit(model, cfg, name, train_data.len(), batch_loss, |m| evaluate_stage2_data(m, &val_data, weights.as_deref()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::BertConfig;
    use crate::stage2::Stage2Config;

    #[test]
    fn plateau_drops_after_exactly_patience_bad_epochs() {
        let mut s = PlateauScheduler::new(1e-5, 0.1, 5);
        let mut rates = vec![s.lr];
        rates.push(s.step(true));
        for _ in 0..4 {
            rates.push(s.step(false));
        }
        assert!(rates.iter().all(|&r| r == 1e-5));
        let dropped = s.step(false);
        assert!((dropped - 1e-6).abs() < 1e-18);
        for _ in 0..4 {
            assert_eq!(s.step(false), dropped);
        }
        assert!((s.step(false) - 1e-7).abs() < 1e-19);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { plateau_factor: 1.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { plateau_patience: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { class_weights: Some(vec![1.0; 3]), ..TrainConfig::default() }.validate().is_err());
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn window_batch_layout() {
        let stacks: Vec<ModalityStack> =
            (0..3).map(|i| ModalityStack { size: 2, data: (0..12).map(|j| (i * 100 + j) as f32).collect() }).collect();
        let v = StackVolume::from_stacks("v", Some(Label::Covid), None, &stacks).unwrap();
        let x = window_batch(&[&v], &[vec![2, 0]]);
        assert_eq!(x.shape(), [1, 3, 2, 2, 2]);
        assert_eq!(&x.data()[..8], &[200.0, 201.0, 202.0, 203.0, 0.0, 1.0, 2.0, 3.0]);
        assert_eq!(&x.data()[8..12], &[204.0, 205.0, 206.0, 207.0]);
    }

    #[test]
    fn jsonl_has_epoch_lines_and_summary() {
        let rec = RunRecord {
            task: "stage1".into(),
            seed: 3,
            epochs: vec![EpochRecord { epoch: 1, train_loss: 0.5, val_loss: 0.4, val_accuracy: 0.75, learning_rate: 1e-5 }],
            best_epoch: 1,
            best_val_accuracy: 0.75,
            stopped_early: false,
            aborted: None,
            checkpoint_path: None,
        };
        let text = rec.to_jsonl();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        let back: EpochRecord = serde_json::from_str(lines[0]).unwrap();
        assert_eq!(back, rec.epochs[0]);
        assert!(lines[1].starts_with("{\"summary\""));
    }

    fn sequences(n: usize, d: usize) -> Vec<(EmbeddingSequence, Label, Option<Severity>)> {
        (0..n)
            .map(|i| {
                let covid = i % 2 == 0;
                let sev = covid.then(|| Severity::ALL[(i / 2) % 4]);
                let shift = if covid { 1.0 + sev.unwrap().index() as f32 } else { -1.0 };
                let w = 3 + i % 4;
                let data = (0..w * d).map(|j| shift + ((i * 31 + j * 7) % 13) as f32 * 0.05).collect();
                let seq = EmbeddingSequence { volume_id: format!("v{i}"), features: Tensor::from_vec(&[w, d], data) };
                (seq, if covid { Label::Covid } else { Label::NonCovid }, sev)
            })
            .collect()
    }

    fn stage2_model(task: Stage2Task) -> Stage2Model<f32> {
        let bert = BertConfig { model_dim: 8, heads: 2, layers: 1, ff_dim: 16, dropout: 0.0, max_positions: 9 };
        let mut cfg = Stage2Config::new(bert, 4, task);
        cfg.hidden = [16, 8];
        cfg.head_dropout = 0.0;
        Stage2Model::new(cfg, 1).unwrap()
    }

    #[test]
    fn stage2_learns_separable_sequences_and_is_deterministic() {
        let seqs = sequences(24, 8);
        let ex: Vec<Stage2Example> =
            seqs.iter().map(|(s, l, v)| Stage2Example { sequence: s, label: Some(*l), severity: *v }).collect();
        let cfg = TrainConfig { learning_rate: 3e-3, max_epochs: 40, batch_size: 8, ..TrainConfig::default() };
        let a = train_stage2(stage2_model(Stage2Task::Binary), &ex, &ex, &cfg).unwrap();
        let b = train_stage2(stage2_model(Stage2Task::Binary), &ex, &ex, &cfg).unwrap();
        assert_eq!(a.record, b.record);
        assert_eq!(a.record.best_val_accuracy, 1.0);
        let best = a.record.epochs.iter().map(|e| e.val_accuracy).fold(0.0, f64::max);
        assert_eq!(a.record.epochs[a.record.best_epoch - 1].val_accuracy, best);
        let (_, acc) = evaluate_stage2(&a.model, &ex).unwrap();
        assert!((acc - a.record.best_val_accuracy).abs() < 1e-6);
        let rates: Vec<f64> = a.record.epochs.iter().map(|e| e.learning_rate).collect();
        for w in rates.windows(2) {
            assert!(w[1] == w[0] || (w[1] - w[0] * 0.1).abs() < 1e-15);
        }
    }

    #[test]
    fn severity_rejects_missing_or_single_class_labels() {
        let seqs = sequences(8, 8);
        let none: Vec<Stage2Example> =
            seqs.iter().map(|(s, l, _)| Stage2Example { sequence: s, label: Some(*l), severity: None }).collect();
        let cfg = TrainConfig { max_epochs: 2, ..TrainConfig::default() };
        let err = train_stage2(stage2_model(Stage2Task::Severity), &none, &none, &cfg).unwrap_err();
        assert!(err.is_config());
        let mild: Vec<Stage2Example> = seqs
            .iter()
            .map(|(s, l, _)| Stage2Example {
                sequence: s,
                label: Some(*l),
                severity: (*l == Label::Covid).then_some(Severity::Mild),
            })
            .collect();
        assert!(train_stage2(stage2_model(Stage2Task::Severity), &mild, &mild, &cfg).is_err());
    }
}
