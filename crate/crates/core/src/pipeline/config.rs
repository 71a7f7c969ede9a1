//! Flat `key=value` run configuration checked against a fixed schema.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, IoContext, Result};
use crate::fusion::FusionRule;
use crate::ingest::{PartitionCounts, SyntheticConfig};
use crate::lungseg::{PreprocessConfig, UnetConfig};
use crate::nn::BertConfig;
use crate::seed;
use crate::stage1::{BackboneConfig, Stage1Config};
use crate::stage2::{Stage2Config, Stage2Task};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Int,
    Float,
    Bool,
    Text,
    /// Comma-separated integers, or empty.
    Ints(usize),
    /// Comma-separated floats, or empty.
    Floats(usize),
    /// Integer or empty for "inherit".
    OptInt,
    OptFloat,
    Choice(&'static [&'static str]),
}

struct Key {
    name: &'static str,
    kind: Kind,
    default: &'static str,
}

const fn key(name: &'static str, kind: Kind, default: &'static str) -> Key {
    Key { name, kind, default }
}

const SCHEMA: &[Key] = &[
    key("data_root", Kind::Text, "data"),
    key("out", Kind::Text, "runs"),
    key("seed", Kind::Int, "0"),
    key("synth.train", Kind::Int, "40"),
    key("synth.val", Kind::Int, "10"),
    key("synth.test", Kind::Int, "10"),
    key("synth.min_slices", Kind::Int, "20"),
    key("synth.max_slices", Kind::Int, "120"),
    key("synth.image_size", Kind::Int, "512"),
    key("synth.covid_fraction", Kind::Float, "0.5"),
    key("synth.noise_std", Kind::Float, "0.02"),
    key("synth.lesion_intensity", Kind::Float, "0.3"),
    key("preprocess.filter_ratio", Kind::Float, "0.5"),
    key("preprocess.stack_size", Kind::Int, "224"),
    key("preprocess.segmenter", Kind::Choice(&["unet", "morph"]), "unet"),
    key("preprocess.write_masks", Kind::Bool, "true"),
    key("unet.levels", Kind::Int, "3"),
    key("unet.base_channels", Kind::Int, "16"),
    key("unet.input_size", Kind::Int, "128"),
    key("unet.epochs", Kind::Int, "15"),
    key("unet.batch_size", Kind::Int, "8"),
    key("unet.learning_rate", Kind::Float, "0.002"),
    key("unet.train_slices", Kind::Int, "64"),
    key("unet.checkpoint", Kind::Text, ""),
    key("backbone.scale", Kind::Choice(&["full", "toy"]), "full"),
    key("backbone.block_counts", Kind::Ints(4), ""),
    key("backbone.stage_channels", Kind::Ints(4), ""),
    key("backbone.temporal_strides", Kind::Ints(4), ""),
    key("backbone.spatial_strides", Kind::Ints(4), ""),
    key("backbone.stem_kernel", Kind::OptInt, ""),
    key("backbone.stem_stride", Kind::OptInt, ""),
    key("backbone.stem_pool", Kind::Choice(&["", "true", "false"]), ""),
    key("backbone.input_size", Kind::OptInt, ""),
    key("backbone.input_frames", Kind::OptInt, ""),
    key("backbone.width_divisor", Kind::OptInt, ""),
    key("bert.heads", Kind::Int, "8"),
    key("bert.layers", Kind::Int, "1"),
    key("bert.ff_dim", Kind::OptInt, ""),
    key("bert.dropout", Kind::Float, "0.1"),
    key("stage2.segments", Kind::Int, "16"),
    key("stage2.hidden", Kind::Ints(2), "256,128"),
    key("stage2.head_dropout", Kind::Float, "0.3"),
    key("train.learning_rate", Kind::Float, "1e-5"),
    key("train.plateau_factor", Kind::Float, "0.1"),
    key("train.plateau_patience", Kind::Int, "5"),
    key("train.max_epochs", Kind::Int, "200"),
    key("train.early_stop_patience", Kind::Int, "20"),
    key("train.class_weights", Kind::Floats(4), ""),
    key("stage1.batch_size", Kind::Int, "8"),
    key("stage1.learning_rate", Kind::OptFloat, ""),
    key("stage1.max_epochs", Kind::OptInt, ""),
    key("stage2.batch_size", Kind::Int, "32"),
    key("stage2.learning_rate", Kind::OptFloat, ""),
    key("stage2.max_epochs", Kind::OptInt, ""),
    key("severity.batch_size", Kind::Int, "32"),
    key("severity.learning_rate", Kind::OptFloat, ""),
    key("severity.max_epochs", Kind::OptInt, ""),
    key("extract.batch_size", Kind::Int, "8"),
    key("predict.partition", Kind::Choice(&["train", "val", "test"]), "val"),
    key("fusion", Kind::Choice(&["mean", "max", "learned"]), "mean"),
];

fn schema(name: &str) -> Option<&'static Key> {
    SCHEMA.iter().find(|k| k.name == name)
}

fn check_value(k: &Key, value: &str) -> Result<()> {
    let bad = |what: &str| Error::Config(format!("{} = {value:?} is not {what}", k.name));
    let list_ok = |n: usize, f: &dyn Fn(&str) -> bool| {
        value.is_empty() || {
            let parts: Vec<&str> = value.split(',').map(str::trim).collect();
            parts.len() == n && parts.iter().all(|p| f(p))
        }
    };
    match k.kind {
        Kind::Int => value.parse::<u64>().map(|_| ()).map_err(|_| bad("a non-negative integer")),
        Kind::Float => match value.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(()),
            _ => Err(bad("a finite number")),
        },
        Kind::Bool => value.parse::<bool>().map(|_| ()).map_err(|_| bad("true or false")),
        Kind::Text => Ok(()),
        Kind::OptInt if value.is_empty() => Ok(()),
        Kind::OptInt => value.parse::<u64>().map(|_| ()).map_err(|_| bad("an integer or empty")),
        Kind::OptFloat if value.is_empty() => Ok(()),
        Kind::OptFloat => value.parse::<f64>().map(|_| ()).map_err(|_| bad("a number or empty")),
        Kind::Ints(n) => {
            if list_ok(n, &|p| p.parse::<u64>().is_ok()) {
                Ok(())
            } else {
                Err(bad(&format!("{n} comma-separated integers")))
            }
        }
        Kind::Floats(n) => {
            if list_ok(n, &|p| p.parse::<f64>().is_ok()) {
                Ok(())
            } else {
                Err(bad(&format!("{n} comma-separated numbers")))
            }
        }
        Kind::Choice(options) => {
            if options.contains(&value) {
                Ok(())
            } else {
                Err(bad(&format!("one of {options:?}")))
            }
        }
    }
}

/// Resolved configuration; every key of the schema is present.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { values: SCHEMA.iter().map(|k| (k.name.to_string(), k.default.to_string())).collect() }
    }
}

impl RunConfig {
    /// Defaults overlaid with `key=value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", n + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path).at(path)?)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let k = schema(key).ok_or_else(|| Error::Config(format!("unknown configuration key {key:?}")))?;
        check_value(k, value)?;
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Applies one `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} must look like key=value")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("{key} is not a schema key"))
    }

    fn int(&self, key: &str) -> usize {
        self.get(key).parse().expect("validated integer")
    }

    fn float(&self, key: &str) -> f64 {
        self.get(key).parse().expect("validated number")
    }

    fn opt_int(&self, key: &str) -> Option<usize> {
        let v = self.get(key);
        (!v.is_empty()).then(|| v.parse().expect("validated integer"))
    }

    fn opt_float(&self, key: &str) -> Option<f64> {
        let v = self.get(key);
        (!v.is_empty()).then(|| v.parse().expect("validated number"))
    }

    fn ints<const N: usize>(&self, key: &str) -> Option<[usize; N]> {
        let v = self.get(key);
        if v.is_empty() {
            return None;
        }
        let parts: Vec<usize> = v.split(',').map(|p| p.trim().parse().expect("validated list")).collect();
        parts.try_into().ok()
    }

    pub fn seed(&self) -> u64 {
        self.get("seed").parse().expect("validated seed")
    }

    /// Seed for one named sub-task of the run.
    pub fn sub_seed(&self, stream: u64) -> u64 {
        seed::derive(self.seed(), &[stream])
    }

    pub fn data_root(&self) -> PathBuf {
        PathBuf::from(self.get("data_root"))
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(self.get("out"))
    }

    /// Sorted `key=value` lines covering every key.
    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn synthetic(&self) -> SyntheticConfig {
        SyntheticConfig {
            n_volumes_per_partition: PartitionCounts {
                train: self.int("synth.train"),
                val: self.int("synth.val"),
                test: self.int("synth.test"),
            },
            slice_count_range: (self.int("synth.min_slices"), self.int("synth.max_slices")),
            image_size: self.int("synth.image_size"),
            covid_fraction: self.float("synth.covid_fraction"),
            noise_std: self.float("synth.noise_std") as f32,
            lesion_intensity: self.float("synth.lesion_intensity") as f32,
            seed: self.seed(),
            ..SyntheticConfig::default()
        }
    }

    pub fn preprocess(&self) -> PreprocessConfig {
        PreprocessConfig {
            filter_ratio: self.float("preprocess.filter_ratio"),
            stack_size: self.int("preprocess.stack_size"),
        }
    }

    pub fn use_unet(&self) -> bool {
        self.get("preprocess.segmenter") == "unet"
    }

    pub fn write_masks(&self) -> bool {
        self.get("preprocess.write_masks") == "true"
    }

    pub fn unet(&self) -> UnetConfig {
        UnetConfig {
            levels: self.int("unet.levels"),
            base_channels: self.int("unet.base_channels"),
            input_size: self.int("unet.input_size"),
            epochs: self.int("unet.epochs"),
            batch_size: self.int("unet.batch_size"),
            learning_rate: self.float("unet.learning_rate"),
            seed: self.sub_seed(1),
        }
    }

    pub fn unet_train_slices(&self) -> usize {
        self.int("unet.train_slices")
    }

    pub fn unet_checkpoint(&self) -> Option<PathBuf> {
        let v = self.get("unet.checkpoint");
        (!v.is_empty()).then(|| PathBuf::from(v))
    }

    pub fn backbone(&self) -> BackboneConfig {
        let mut b = match self.get("backbone.scale") {
            "toy" => BackboneConfig::toy(),
            _ => BackboneConfig::full(),
        };
        if let Some(v) = self.ints("backbone.block_counts") {
            b.block_counts = v;
        }
        if let Some(v) = self.ints("backbone.stage_channels") {
            b.stage_channels = v;
        }
        if let Some(v) = self.ints("backbone.temporal_strides") {
            b.temporal_strides = v;
        }
        if let Some(v) = self.ints("backbone.spatial_strides") {
            b.spatial_strides = v;
        }
        if let Some(v) = self.opt_int("backbone.stem_kernel") {
            b.stem_kernel = v;
        }
        if let Some(v) = self.opt_int("backbone.stem_stride") {
            b.stem_stride = v;
        }
        match self.get("backbone.stem_pool") {
            "true" => b.stem_pool = true,
            "false" => b.stem_pool = false,
            _ => {}
        }
        if let Some(v) = self.opt_int("backbone.input_size") {
            b.input_size = v;
        }
        if let Some(v) = self.opt_int("backbone.input_frames") {
            b.input_frames = v;
        }
        if let Some(v) = self.opt_int("backbone.width_divisor") {
            b.toy_scale_factor = v;
        }
        b
    }

    fn bert(&self, model_dim: usize, seq_len: usize) -> BertConfig {
        BertConfig {
            model_dim,
            heads: self.int("bert.heads"),
            layers: self.int("bert.layers"),
            ff_dim: self.opt_int("bert.ff_dim").unwrap_or(2 * model_dim),
            dropout: self.float("bert.dropout"),
            max_positions: (seq_len + 1).max(16),
        }
    }

    pub fn stage1(&self) -> Result<Stage1Config> {
        let backbone = self.backbone();
        let (t, d) = backbone.output_shape()?;
        let cfg = Stage1Config { bert: self.bert(d, t), backbone };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn segments(&self) -> usize {
        self.int("stage2.segments")
    }

    pub fn stage2(&self, task: Stage2Task) -> Result<Stage2Config> {
        let (_, d) = self.backbone().output_shape()?;
        let k = self.segments();
        let mut cfg = Stage2Config::new(self.bert(d, k), k, task);
        cfg.hidden = self.ints("stage2.hidden").expect("hidden widths have a default");
        cfg.head_dropout = self.float("stage2.head_dropout");
        cfg.validate()?;
        Ok(cfg)
    }

    /// Training policy for `stage` (`stage1`, `stage2` or `severity`).
    pub fn train(&self, stage: &str, seed: u64) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            learning_rate: self
                .opt_float(&format!("{stage}.learning_rate"))
                .unwrap_or_else(|| self.float("train.learning_rate")),
            plateau_factor: self.float("train.plateau_factor"),
            plateau_patience: self.int("train.plateau_patience"),
            max_epochs: self.opt_int(&format!("{stage}.max_epochs")).unwrap_or_else(|| self.int("train.max_epochs")),
            early_stop_patience: self.int("train.early_stop_patience"),
            batch_size: self.int(&format!("{stage}.batch_size")),
            seed,
            class_weights: {
                let v = self.get("train.class_weights");
                (!v.is_empty()).then(|| v.split(',').map(|p| p.trim().parse().expect("validated list")).collect())
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn extract_batch(&self) -> usize {
        self.int("extract.batch_size").max(1)
    }

    pub fn predict_partition(&self) -> crate::ingest::Partition {
        self.get("predict.partition").parse().expect("validated partition")
    }

    /// Stated rule; `learned` starts at equal weights and is fit during prediction.
    pub fn fusion(&self) -> (FusionRule, bool) {
        let name = self.get("fusion");
        (name.parse().expect("validated fusion rule"), name == "learned")
    }
}
