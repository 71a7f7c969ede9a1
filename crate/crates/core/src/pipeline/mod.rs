//! Run orchestration: synthetic data, preprocessing, training, embedding
//! extraction, prediction and evaluation over one output directory.
//!
//! ```text
//! <out>/preprocess/   volumes.csv kept_indices.csv stacks/*.tns masks/<id>/*.png [unet.ckpt]
//! <out>/stage1/       model.ckpt run.jsonl
//! <out>/embeddings/   index.csv *.emb
//! <out>/stage2_k<K>/  model.ckpt run.jsonl
//! <out>/severity_k<K>/
//! <out>/results_k<K>/ predictions.csv metrics.json
//! ```
//! Every command also writes its resolved `run_config.txt`.

pub mod config;
pub mod store;

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;

pub use config::RunConfig;

use crate::checkpoint::{Checkpoint, STAGE1_TAG, STAGE2_TAG, UNET_TAG};
use crate::error::{Error, IoContext, Result};
use crate::fusion::{evaluate, fit_fusion_weight, Evaluation, FusionRule, VolumePrediction, VolumeTruth};
use crate::ingest::{
    generate_synthetic, load_slice, scan_dataset_with_warnings, write_png, CtVolume, GrayscaleImage, Label,
    Partition, Severity, SyntheticRecord,
};
use crate::lungseg::{morph_masks, filter_slices, preprocess_volume, refine_mask, train_unet, SliceMask, UnetModel};
use crate::stage1::Stage1Model;
use crate::stage2::{segment_batch, Stage2Model, Stage2Task};
use crate::tensor::Tensor;
use crate::trainer::{
    argmax, extract_embeddings, stage1_probabilities, train_stage1, train_stage2, EmbeddingSequence, RunRecord,
    Stage2Example, StackVolume,
};
use store::{read_embedding, read_index, read_tensor, write_embedding, write_index, write_tensor, IndexEntry};

pub const CONFIG_FILE: &str = "run_config.txt";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const RECORD_FILE: &str = "run.jsonl";

/// Which model `train` fits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainStage {
    Stage1,
    Stage2,
    Severity,
}

impl FromStr for TrainStage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1" | "stage1" => Ok(TrainStage::Stage1),
            "2" | "stage2" => Ok(TrainStage::Stage2),
            "severity" => Ok(TrainStage::Severity),
            _ => Err(Error::Config(format!("unknown stage {s:?}; expected 1, 2 or severity"))),
        }
    }
}

impl fmt::Display for TrainStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainStage::Stage1 => "stage1",
            TrainStage::Stage2 => "stage2",
            TrainStage::Severity => "severity",
        })
    }
}

/// Paths inside one output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(cfg: &RunConfig) -> Self {
        Self { root: cfg.out_dir() }
    }

    pub fn preprocess(&self) -> PathBuf {
        self.root.join("preprocess")
    }

    pub fn volumes_csv(&self) -> PathBuf {
        self.preprocess().join("volumes.csv")
    }

    pub fn stack_file(&self, volume_id: &str) -> PathBuf {
        self.preprocess().join("stacks").join(format!("{volume_id}.tns"))
    }

    pub fn unet_checkpoint(&self) -> PathBuf {
        self.preprocess().join("unet.ckpt")
    }

    pub fn stage_dir(&self, stage: TrainStage, segments: usize) -> PathBuf {
        match stage {
            TrainStage::Stage1 => self.root.join("stage1"),
            TrainStage::Stage2 => self.root.join(format!("stage2_k{segments}")),
            TrainStage::Severity => self.root.join(format!("severity_k{segments}")),
        }
    }

    pub fn embeddings(&self) -> PathBuf {
        self.root.join("embeddings")
    }

    pub fn results(&self, segments: usize) -> PathBuf {
        self.root.join(format!("results_k{segments}"))
    }
}

fn fresh_dir(path: &Path) -> Result<()> {
    if path.exists() {
        fs::remove_dir_all(path).at(path)?;
    }
    fs::create_dir_all(path).at(path)
}

fn write_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(dir).at(dir)?;
    let path = dir.join(CONFIG_FILE);
    fs::write(&path, cfg.to_text()).at(&path)
}

/// Writes the synthetic dataset under `data_root`.
pub fn cmd_synth(cfg: &RunConfig) -> Result<Vec<SyntheticRecord>> {
    let root = cfg.data_root();
    let records = generate_synthetic(&cfg.synthetic(), &root)?;
    write_config(&Layout::new(cfg).root.join("synth"), cfg)?;
    Ok(records)
}

/// One row of `volumes.csv`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VolumeRow {
    pub volume_id: String,
    pub partition: Partition,
    pub label: Option<Label>,
    pub severity: Option<Severity>,
    pub n_slices: usize,
    pub n_kept: usize,
}

const VOLUMES_HEADER: &str = "volume_id,partition,label,severity,n_slices,n_kept";

fn opt_str<T: fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map(ToString::to_string).unwrap_or_default()
}

pub fn write_volume_rows(path: &Path, rows: &[VolumeRow]) -> Result<()> {
    let mut text = format!("{VOLUMES_HEADER}\n");
    for r in rows {
        text.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.volume_id,
            r.partition,
            opt_str(&r.label),
            opt_str(&r.severity),
            r.n_slices,
            r.n_kept
        ));
    }
    fs::write(path, text).at(path)
}

fn parse_opt<T: FromStr<Err = Error>>(s: &str) -> Result<Option<T>> {
    if s.is_empty() {
        Ok(None)
    } else {
        s.parse().map(Some)
    }
}

pub fn read_volume_rows(path: &Path) -> Result<Vec<VolumeRow>> {
    let text = fs::read_to_string(path).at(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(VOLUMES_HEADER) {
        return Err(Error::Format(format!("{} lacks the volumes header", path.display())));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::Format(format!("{}: malformed row {line:?}", path.display()));
            if f.len() != 6 {
                return Err(bad());
            }
            Ok(VolumeRow {
                volume_id: f[0].to_string(),
                partition: f[1].parse()?,
                label: parse_opt(f[2])?,
                severity: parse_opt(f[3])?,
                n_slices: f[4].parse().map_err(|_| bad())?,
                n_kept: f[5].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

fn load_slices(vol: &CtVolume) -> Result<Vec<GrayscaleImage>> {
    vol.slice_paths.iter().map(|p| load_slice(p)).collect()
}

/// Pseudo-labelled slices for the segmentation network: refined morphological
/// masks of evenly spaced kept slices from the training partition.
fn unet_training_pairs(cfg: &RunConfig, vols: &[&CtVolume]) -> Result<Vec<(GrayscaleImage, SliceMask)>> {
    let budget = cfg.unet_train_slices();
    if vols.is_empty() || budget == 0 {
        return Err(Error::Config("segmentation network needs training volumes and unet.train_slices > 0".into()));
    }
    let per_volume = budget.div_ceil(vols.len()).max(1);
    let mut pairs = Vec::with_capacity(budget);
    for vol in vols {
        if pairs.len() >= budget {
            break;
        }
        let slices = load_slices(vol)?;
        let coarse = morph_masks(&slices);
        let kept = filter_slices(&coarse, cfg.preprocess().filter_ratio)?;
        let take = per_volume.min(kept.len()).min(budget - pairs.len());
        for j in 0..take {
            let i = kept[(2 * j + 1) * kept.len() / (2 * take)];
            pairs.push((slices[i].clone(), refine_mask(&coarse[i])));
        }
    }
    Ok(pairs)
}

fn segmentation_model(cfg: &RunConfig, layout: &Layout, vols: &[CtVolume]) -> Result<Option<UnetModel>> {
    if !cfg.use_unet() {
        return Ok(None);
    }
    if let Some(path) = cfg.unet_checkpoint() {
        return UnetModel::from_checkpoint(&Checkpoint::load(&path, UNET_TAG)?).map(Some);
    }
    let train: Vec<&CtVolume> = vols.iter().filter(|v| v.partition == Partition::Train).collect();
    let pairs = unet_training_pairs(cfg, &train)?;
    log::info!("training the segmentation network on {} slices", pairs.len());
    let trained = train_unet(&pairs, &cfg.unet())?;
    trained.model.to_checkpoint().save(&layout.unet_checkpoint())?;
    Ok(Some(trained.model))
}

#[derive(Debug, Clone)]
pub struct PreprocessSummary {
    pub volumes: Vec<VolumeRow>,
    pub warnings: Vec<String>,
}

/// Filters, segments, refines and composes every volume of the dataset.
pub fn cmd_preprocess(cfg: &RunConfig) -> Result<PreprocessSummary> {
    let root = cfg.data_root();
    if !root.is_dir() {
        return Err(Error::Config(format!("dataset root {} does not exist", root.display())));
    }
    let layout = Layout::new(cfg);
    let dir = layout.preprocess();
    fresh_dir(&dir)?;
    fresh_dir(&dir.join("stacks"))?;
    let (vols, scan_warnings) = scan_dataset_with_warnings(&root)?;
    if vols.is_empty() {
        return Err(Error::Data(format!("no volumes found under {}", root.display())));
    }
    let mut warnings: Vec<String> =
        scan_warnings.iter().map(|w| format!("{}: {}", w.path.display(), w.message)).collect();
    let unet = segmentation_model(cfg, &layout, &vols)?;
    let pcfg = cfg.preprocess();
    let write_masks = cfg.write_masks();
    let results: Vec<Result<(VolumeRow, Vec<usize>, Vec<String>)>> = vols
        .par_iter()
        .map(|vol| {
            let slices = load_slices(vol)?;
            let processed = preprocess_volume(&slices, &pcfg, unet.as_ref())?;
            let s = pcfg.stack_size;
            let data: Vec<f32> = processed.stacks.iter().flat_map(|st| st.data.iter().copied()).collect();
            write_tensor(&layout.stack_file(&vol.volume_id), &Tensor::from_vec(&[processed.kept.len(), 3, s, s], data))?;
            if write_masks {
                let mdir = dir.join("masks").join(&vol.volume_id);
                fs::create_dir_all(&mdir).at(&mdir)?;
                for (&i, m) in processed.kept.iter().zip(&processed.masks) {
                    let bytes: Vec<u8> = m.mask.data.iter().map(|&b| if b { 255 } else { 0 }).collect();
                    write_png(&mdir.join(format!("{i:04}.png")), m.mask.height, m.mask.width, &bytes)?;
                }
            }
            let row = VolumeRow {
                volume_id: vol.volume_id.clone(),
                partition: vol.partition,
                label: vol.label,
                severity: vol.severity,
                n_slices: slices.len(),
                n_kept: processed.kept.len(),
            };
            let notes = processed.warnings.iter().map(|w| format!("{}: {w}", vol.volume_id)).collect();
            Ok((row, processed.kept, notes))
        })
        .collect();
    let mut rows = Vec::with_capacity(results.len());
    let mut kept_text = String::from("volume_id,kept_indices\n");
    for r in results {
        let (row, kept, notes) = r?;
        let list: Vec<String> = kept.iter().map(ToString::to_string).collect();
        kept_text.push_str(&format!("{},{}\n", row.volume_id, list.join(" ")));
        warnings.extend(notes);
        rows.push(row);
    }
    let kept_path = dir.join("kept_indices.csv");
    fs::write(&kept_path, kept_text).at(&kept_path)?;
    write_volume_rows(&layout.volumes_csv(), &rows)?;
    let warn_path = dir.join("warnings.txt");
    fs::write(&warn_path, warnings.iter().map(|w| format!("{w}\n")).collect::<String>()).at(&warn_path)?;
    for w in &warnings {
        log::warn!("{w}");
    }
    write_config(&dir, cfg)?;
    Ok(PreprocessSummary { volumes: rows, warnings })
}

fn load_stack_volume(layout: &Layout, row: &VolumeRow) -> Result<StackVolume> {
    let t = read_tensor(&layout.stack_file(&row.volume_id))?;
    let shape = t.shape().to_vec();
    if shape.len() != 4 || shape[1] != 3 || shape[2] != shape[3] {
        return Err(Error::Format(format!("stack file of {} has shape {shape:?}", row.volume_id)));
    }
    Ok(StackVolume {
        volume_id: row.volume_id.clone(),
        label: row.label,
        severity: row.severity,
        size: shape[2],
        n_slices: shape[0],
        data: t.into_data(),
    })
}

fn load_partition(layout: &Layout, rows: &[VolumeRow], partition: Partition) -> Result<Vec<StackVolume>> {
    rows.iter().filter(|r| r.partition == partition).map(|r| load_stack_volume(layout, r)).collect()
}

fn read_rows(layout: &Layout) -> Result<Vec<VolumeRow>> {
    let path = layout.volumes_csv();
    if !path.exists() {
        return Err(Error::Config(format!("{} is missing; run preprocess first", path.display())));
    }
    read_volume_rows(&path)
}

fn load_embeddings(layout: &Layout) -> Result<HashMap<String, EmbeddingSequence>> {
    let dir = layout.embeddings();
    let index_path = dir.join("index.csv");
    if !index_path.exists() {
        return Err(Error::Config(format!("{} is missing; run extract first", index_path.display())));
    }
    let mut out = HashMap::new();
    for e in read_index(&index_path)? {
        let seq = read_embedding(&dir.join(&e.path))?;
        if seq.volume_id != e.volume_id || seq.features.shape()[0] != e.windows {
            return Err(Error::Format(format!("embedding file of {} disagrees with index.csv", e.volume_id)));
        }
        out.insert(e.volume_id, seq);
    }
    Ok(out)
}

fn finish_training(dir: &Path, cfg: &RunConfig, mut record: RunRecord, ckpt: Checkpoint) -> Result<RunRecord> {
    if let Some(reason) = &record.aborted {
        record.write_jsonl(&dir.join(RECORD_FILE))?;
        return Err(Error::Numerical(format!("training aborted ({reason}); diagnostics in {}", dir.display())));
    }
    record.checkpoint_path = Some(CHECKPOINT_FILE.to_string());
    ckpt.save(&dir.join(CHECKPOINT_FILE))?;
    record.write_jsonl(&dir.join(RECORD_FILE))?;
    write_config(dir, cfg)?;
    Ok(record)
}

/// Trains one model and stores its best checkpoint and run record.
pub fn cmd_train(cfg: &RunConfig, stage: TrainStage) -> Result<RunRecord> {
    let layout = Layout::new(cfg);
    let dir = layout.stage_dir(stage, cfg.segments());
    fresh_dir(&dir)?;
    let rows = read_rows(&layout)?;
    match stage {
        TrainStage::Stage1 => {
            let train = load_partition(&layout, &rows, Partition::Train)?;
            let val = load_partition(&layout, &rows, Partition::Val)?;
            let model = Stage1Model::new(cfg.stage1()?, cfg.sub_seed(2))?;
            let outcome = train_stage1(model, &train, &val, &cfg.train("stage1", cfg.sub_seed(3))?)?;
            finish_training(&dir, cfg, outcome.record, outcome.model.to_checkpoint())
        }
        TrainStage::Stage2 | TrainStage::Severity => {
            let (task, name, stream) = match stage {
                TrainStage::Stage2 => (Stage2Task::Binary, "stage2", 4),
                _ => (Stage2Task::Severity, "severity", 6),
            };
            let embeddings = load_embeddings(&layout)?;
            let examples = |p: Partition| -> Result<Vec<Stage2Example>> {
                rows.iter()
                    .filter(|r| r.partition == p)
                    .map(|r| {
                        let sequence = embeddings.get(&r.volume_id).ok_or_else(|| {
                            Error::Data(format!("no embedding for {}; rerun extract", r.volume_id))
                        })?;
                        Ok(Stage2Example { sequence, label: r.label, severity: r.severity })
                    })
                    .collect()
            };
            let train = examples(Partition::Train)?;
            let val = examples(Partition::Val)?;
            let model = Stage2Model::new(cfg.stage2(task)?, cfg.sub_seed(stream))?;
            let outcome = train_stage2(model, &train, &val, &cfg.train(name, cfg.sub_seed(stream + 1))?)?;
            finish_training(&dir, cfg, outcome.record, outcome.model.to_checkpoint())
        }
    }
}

fn load_stage1(layout: &Layout) -> Result<Stage1Model<f32>> {
    let path = layout.stage_dir(TrainStage::Stage1, 0).join(CHECKPOINT_FILE);
    Stage1Model::from_checkpoint(&Checkpoint::load(&path, STAGE1_TAG)?)
}

fn load_stage2(layout: &Layout, stage: TrainStage, k: usize) -> Result<Stage2Model<f32>> {
    let path = layout.stage_dir(stage, k).join(CHECKPOINT_FILE);
    Stage2Model::from_checkpoint(&Checkpoint::load(&path, STAGE2_TAG)?)
}

/// Embeds every preprocessed volume with the trained first stage.
pub fn cmd_extract(cfg: &RunConfig) -> Result<Vec<IndexEntry>> {
    let layout = Layout::new(cfg);
    let model = load_stage1(&layout)?;
    let rows = read_rows(&layout)?;
    let dir = layout.embeddings();
    fresh_dir(&dir)?;
    let batch = cfg.extract_batch();
    let entries: Vec<Result<Option<IndexEntry>>> = rows
        .par_iter()
        .map(|row| {
            let vol = load_stack_volume(&layout, row)?;
            let (mut seqs, _) = extract_embeddings(&model, std::slice::from_ref(&vol), batch)?;
            let Some(seq) = seqs.pop() else { return Ok(None) };
            let file = PathBuf::from(format!("{}.emb", row.volume_id));
            write_embedding(&dir.join(&file), &seq)?;
            Ok(Some(IndexEntry { volume_id: row.volume_id.clone(), path: file, windows: seq.features.shape()[0] }))
        })
        .collect();
    let entries: Vec<IndexEntry> = entries.into_iter().filter_map(Result::transpose).collect::<Result<_>>()?;
    write_index(&dir.join("index.csv"), &entries)?;
    write_config(&dir, cfg)?;
    Ok(entries)
}

struct StageScores {
    p1: Vec<f64>,
    p2: Vec<f64>,
    severity: Vec<Option<Severity>>,
}

fn score_partition(
    cfg: &RunConfig,
    layout: &Layout,
    rows: &[VolumeRow],
    models: (&Stage1Model<f32>, &Stage2Model<f32>, Option<&Stage2Model<f32>>),
    embeddings: &HashMap<String, EmbeddingSequence>,
    partition: Partition,
) -> Result<(Vec<String>, StageScores)> {
    let (s1, s2, sev) = models;
    let vols = load_partition(layout, rows, partition)?;
    if vols.is_empty() {
        return Err(Error::Data(format!("partition {partition} has no volumes")));
    }
    let p1: Vec<f64> = stage1_probabilities(s1, &vols, cfg.extract_batch()).into_iter().map(f64::from).collect();
    let seqs: Vec<&Tensor<f32>> = vols
        .iter()
        .map(|v| {
            embeddings
                .get(&v.volume_id)
                .map(|e| &e.features)
                .ok_or_else(|| Error::Data(format!("no embedding for {}; rerun extract", v.volume_id)))
        })
        .collect::<Result<_>>()?;
    let k = s2.config.segments;
    let segs = segment_batch(&seqs, k)?;
    let p2: Vec<f64> = s2.predict_proba(&segs).data().iter().map(|&p| f64::from(p)).collect();
    let severity = match sev {
        Some(m) => {
            let probs = m.predict_proba(&segment_batch(&seqs, m.config.segments)?);
            probs.data().chunks(probs.shape()[1]).map(|row| Severity::from_index(argmax(row))).collect()
        }
        None => vec![None; vols.len()],
    };
    Ok((vols.into_iter().map(|v| v.volume_id).collect(), StageScores { p1, p2, severity }))
}

/// Per-volume stage and fused probabilities for `predict.partition`.
pub fn cmd_predict(cfg: &RunConfig) -> Result<Vec<VolumePrediction>> {
    let layout = Layout::new(cfg);
    let k = cfg.segments();
    let s1 = load_stage1(&layout)?;
    let s2 = load_stage2(&layout, TrainStage::Stage2, k)?;
    let sev_path = layout.stage_dir(TrainStage::Severity, k).join(CHECKPOINT_FILE);
    let sev = if sev_path.exists() { Some(load_stage2(&layout, TrainStage::Severity, k)?) } else { None };
    let rows = read_rows(&layout)?;
    let embeddings = load_embeddings(&layout)?;
    let models = (&s1, &s2, sev.as_ref());
    let partition = cfg.predict_partition();
    let (ids, scores) = score_partition(cfg, &layout, &rows, models, &embeddings, partition)?;

    let (mut rule, learned) = cfg.fusion();
    if learned {
        let (val_ids, val) = if partition == Partition::Val {
            (ids.clone(), StageScores { p1: scores.p1.clone(), p2: scores.p2.clone(), severity: Vec::new() })
        } else {
            score_partition(cfg, &layout, &rows, models, &embeddings, Partition::Val)?
        };
        let by_id: HashMap<&str, Option<Label>> = rows.iter().map(|r| (r.volume_id.as_str(), r.label)).collect();
        let truths: Vec<Label> = val_ids
            .iter()
            .map(|id| by_id[id.as_str()].ok_or_else(|| Error::Data(format!("validation volume {id} has no label"))))
            .collect::<Result<_>>()?;
        rule = FusionRule::Weighted(fit_fusion_weight(&val.p1, &val.p2, &truths)?);
    }

    let preds: Vec<VolumePrediction> = ids
        .iter()
        .enumerate()
        .map(|(i, id)| VolumePrediction::new(id, scores.p1[i], scores.p2[i], rule, scores.severity[i]))
        .collect();
    let dir = layout.results(k);
    fs::create_dir_all(&dir).at(&dir)?;
    let fusion_path = dir.join("fusion.txt");
    fs::write(&fusion_path, format!("{rule}\n")).at(&fusion_path)?;
    write_predictions(&dir.join("predictions.csv"), &preds)?;
    write_config(&dir, cfg)?;
    Ok(preds)
}

const PREDICTIONS_HEADER: &str = "volume_id,p_stage1,p_stage2,p_fused,label_pred,severity_pred";

pub fn write_predictions(path: &Path, preds: &[VolumePrediction]) -> Result<()> {
    let mut text = format!("{PREDICTIONS_HEADER}\n");
    for p in preds {
        text.push_str(&format!(
            "{},{},{},{},{},{}\n",
            p.volume_id,
            p.p_stage1,
            p.p_stage2,
            p.p_fused,
            p.label_pred,
            opt_str(&p.severity_pred)
        ));
    }
    fs::write(path, text).at(path)
}

pub fn read_predictions(path: &Path) -> Result<Vec<VolumePrediction>> {
    let text = fs::read_to_string(path).at(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(PREDICTIONS_HEADER) {
        return Err(Error::Format(format!("{} lacks the predictions header", path.display())));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::Format(format!("{}: malformed row {line:?}", path.display()));
            if f.len() != 6 {
                return Err(bad());
            }
            let prob = |s: &str| s.parse::<f64>().ok().filter(|p| (0.0..=1.0).contains(p)).ok_or_else(bad);
            Ok(VolumePrediction {
                volume_id: f[0].to_string(),
                p_stage1: prob(f[1])?,
                p_stage2: prob(f[2])?,
                p_fused: prob(f[3])?,
                label_pred: f[4].parse()?,
                severity_pred: parse_opt(f[5])?,
            })
        })
        .collect()
}

/// Scores a predictions file against the preprocessed labels.
pub fn cmd_evaluate(cfg: &RunConfig, predictions: Option<&Path>) -> Result<Evaluation> {
    let layout = Layout::new(cfg);
    let dir = layout.results(cfg.segments());
    let pred_path = predictions.map(Path::to_path_buf).unwrap_or_else(|| dir.join("predictions.csv"));
    let preds = read_predictions(&pred_path)?;
    let rows = read_rows(&layout)?;
    let by_id: HashMap<&str, &VolumeRow> = rows.iter().map(|r| (r.volume_id.as_str(), r)).collect();
    let truths: Vec<VolumeTruth> = preds
        .iter()
        .map(|p| {
            let row = by_id
                .get(p.volume_id.as_str())
                .ok_or_else(|| Error::Data(format!("{} is not a preprocessed volume", p.volume_id)))?;
            let label = row.label.ok_or_else(|| Error::Data(format!("{} has no ground-truth label", p.volume_id)))?;
            Ok(VolumeTruth { label, severity: row.severity })
        })
        .collect::<Result<_>>()?;
    let eval = evaluate(&preds, &truths)?;
    fs::create_dir_all(&dir).at(&dir)?;
    let metrics_path = dir.join("metrics.json");
    let json = serde_json::to_string_pretty(&eval).expect("metrics serialize");
    fs::write(&metrics_path, json + "\n").at(&metrics_path)?;
    Ok(eval)
}
