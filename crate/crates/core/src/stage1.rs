//! First-stage window classifier: a factorized (2+1)D residual CNN whose
//! per-timestep features are pooled by a transformer encoder through a class
//! token, followed by a single-logit head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, STAGE1_TAG};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, BertConfig, BertEncoder, Conv3d, Ctx, EncoderOutput, Linear, ParamStore};
use crate::tensor::{ConvGeom, Scalar, Tensor, Var};

/// Geometry of the residual backbone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub block_counts: [usize; 4],
    /// Stage widths before `toy_scale_factor` is applied.
    pub stage_channels: [usize; 4],
    pub temporal_strides: [usize; 4],
    pub spatial_strides: [usize; 4],
    /// Spatial kernel of the stem convolution.
    pub stem_kernel: usize,
    pub stem_stride: usize,
    /// 2×2 spatial max pooling after the stem.
    pub stem_pool: bool,
    pub input_size: usize,
    pub input_frames: usize,
    /// Divisor applied to every channel width.
    pub toy_scale_factor: usize,
}

impl BackboneConfig {
    /// ResNet-34 layout on 32 frames of 224×224.
    pub fn full() -> Self {
        Self {
            block_counts: [3, 4, 6, 3],
            stage_channels: [64, 128, 256, 512],
            temporal_strides: [1, 2, 2, 2],
            spatial_strides: [1, 2, 2, 2],
            stem_kernel: 7,
            stem_stride: 2,
            stem_pool: true,
            input_size: 224,
            input_frames: 32,
            toy_scale_factor: 1,
        }
    }

    /// One block per stage, widths divided by 8; 8 frames of 56×56 give a 2×64 sequence.
    pub fn toy() -> Self {
        Self {
            block_counts: [1, 1, 1, 1],
            temporal_strides: [1, 1, 2, 2],
            stem_kernel: 3,
            input_size: 56,
            input_frames: 8,
            toy_scale_factor: 8,
            ..Self::full()
        }
    }

    pub fn widths(&self) -> [usize; 4] {
        self.stage_channels.map(|c| (c / self.toy_scale_factor.max(1)).max(1))
    }

    pub fn output_dim(&self) -> usize {
        self.widths()[3]
    }

    fn spatial_geom(k: usize, stride: usize) -> ConvGeom {
        ConvGeom::new([1, k, k], [1, stride, stride], [0, k / 2, k / 2])
    }

    fn temporal_geom(stride: usize) -> ConvGeom {
        ConvGeom::new([3, 1, 1], [stride, 1, 1], [1, 0, 0])
    }

    /// Analytic `(T', D)` of the feature sequence, tracing every stride.
    pub fn output_shape(&self) -> Result<(usize, usize)> {
        self.validate()?;
        let (mut t, mut s) = (self.input_frames, self.input_size);
        let trace = |geom: ConvGeom, t: usize, s: usize| -> Result<(usize, usize)> {
            let out = geom.output_dims([t, s, s]).ok_or_else(|| {
                Error::Config(format!("feature map {t}×{s}×{s} collapses under {geom:?}"))
            })?;
            Ok((out[0], out[1]))
        };
        (t, s) = trace(Self::spatial_geom(self.stem_kernel, self.stem_stride), t, s)?;
        (t, s) = trace(Self::temporal_geom(1), t, s)?;
        if self.stem_pool {
            s = s.div_ceil(2);
        }
        for stage in 0..4 {
            for block in 0..self.block_counts[stage] {
                let (st, ss) = if block == 0 {
                    (self.temporal_strides[stage], self.spatial_strides[stage])
                } else {
                    (1, 1)
                };
                (t, s) = trace(Self::spatial_geom(3, ss), t, s)?;
                (t, s) = trace(Self::temporal_geom(st), t, s)?;
            }
        }
        Ok((t, self.output_dim()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_counts.iter().any(|&b| b == 0) {
            return Err(Error::Config("every stage needs at least one block".into()));
        }
        if self.temporal_strides.iter().chain(&self.spatial_strides).any(|&s| s == 0) {
            return Err(Error::Config("strides must be positive".into()));
        }
        if self.stem_kernel % 2 == 0 || self.stem_stride == 0 {
            return Err(Error::Config("stem kernel must be odd and stride positive".into()));
        }
        if self.toy_scale_factor == 0 || self.input_size == 0 {
            return Err(Error::Config("toy_scale_factor and input_size must be positive".into()));
        }
        let product: usize = self.temporal_strides.iter().product();
        if self.input_frames % product != 0 || self.input_frames / product < 2 {
            return Err(Error::Config(format!(
                "{} input frames with temporal strides {:?} leave fewer than 2 steps",
                self.input_frames, self.temporal_strides
            )));
        }
        Ok(())
    }
}

/// Intermediate width keeping a factorized t×d×d convolution near the parameter
/// count of the full 3-D kernel.
pub fn factorized_width(t: usize, d: usize, c_in: usize, c_out: usize) -> usize {
    ((t * d * d * c_in * c_out) / (d * d * c_in + t * c_out)).max(1)
}

/// Spatial 1×d×d convolution, batch norm, ReLU, then temporal t×1×1 convolution.
#[derive(Debug, Clone)]
struct Conv2Plus1d {
    spatial: Conv3d,
    mid_norm: BatchNorm,
    temporal: Conv3d,
}

impl Conv2Plus1d {
    #[allow(clippy::too_many_arguments)]
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        temporal_stride: usize,
        spatial_stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mid = factorized_width(3, kernel, c_in, c_out);
        let spatial = Conv3d::new(
            store,
            &format!("{name}.spatial"),
            c_in,
            mid,
            BackboneConfig::spatial_geom(kernel, spatial_stride),
            false,
            rng,
        );
        let mid_norm = BatchNorm::new(store, &format!("{name}.mid_norm"), mid);
        let temporal = Conv3d::new(
            store,
            &format!("{name}.temporal"),
            mid,
            c_out,
            BackboneConfig::temporal_geom(temporal_stride),
            false,
            rng,
        );
        Self { spatial, mid_norm, temporal }
    }

    fn forward<T: Scalar>(&self, ctx: &Ctx<T>, x: &Var<T>) -> Var<T> {
        let mut h = self.spatial.forward(ctx, x);
        h = self.mid_norm.forward(ctx, &h).relu();
        self.temporal.forward(ctx, &h)
    }
}

#[derive(Debug, Clone)]
struct ResidualBlock {
    conv1: Conv2Plus1d,
    norm1: BatchNorm,
    conv2: Conv2Plus1d,
    norm2: BatchNorm,
    shortcut: Option<(Conv3d, BatchNorm)>,
}

impl ResidualBlock {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        temporal_stride: usize,
        spatial_stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let conv1 = Conv2Plus1d::new(
            store,
            &format!("{name}.conv1"),
            c_in,
            c_out,
            3,
            temporal_stride,
            spatial_stride,
            rng,
        );
        let norm1 = BatchNorm::new(store, &format!("{name}.norm1"), c_out);
        let conv2 = Conv2Plus1d::new(store, &format!("{name}.conv2"), c_out, c_out, 3, 1, 1, rng);
        let norm2 = BatchNorm::new(store, &format!("{name}.norm2"), c_out);
        let shortcut = (temporal_stride != 1 || spatial_stride != 1 || c_in != c_out).then(|| {
            let geom = ConvGeom::new(
                [1, 1, 1],
                [temporal_stride, spatial_stride, spatial_stride],
                [0, 0, 0],
            );
            (
                Conv3d::new(store, &format!("{name}.shortcut"), c_in, c_out, geom, false, rng),
                BatchNorm::new(store, &format!("{name}.shortcut_norm"), c_out),
            )
        });
        Self { conv1, norm1, conv2, norm2, shortcut }
    }

    fn forward<T: Scalar>(&self, ctx: &Ctx<T>, x: &Var<T>) -> Var<T> {
        let mut h = self.conv1.forward(ctx, x);
        h = self.norm1.forward(ctx, &h).relu();
        h = self.conv2.forward(ctx, &h);
        h = self.norm2.forward(ctx, &h);
        let skip = match &self.shortcut {
            Some((conv, norm)) => norm.forward(ctx, &conv.forward(ctx, x)),
            None => x.clone(),
        };
        h.add(&skip).relu()
    }
}

/// (2+1)D residual network producing `[N, C, T', H', W']` feature maps.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub config: BackboneConfig,
    stem: Conv2Plus1d,
    stem_norm: BatchNorm,
    blocks: Vec<ResidualBlock>,
}

impl Backbone {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, config: BackboneConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let widths = config.widths();
        let stem = Conv2Plus1d::new(store, "backbone.stem", 3, widths[0], config.stem_kernel, 1, config.stem_stride, rng);
        let stem_norm = BatchNorm::new(store, "backbone.stem_norm", widths[0]);
        let mut blocks = Vec::new();
        let mut c_in = widths[0];
        for stage in 0..4 {
            for b in 0..config.block_counts[stage] {
                let (st, ss) =
                    if b == 0 { (config.temporal_strides[stage], config.spatial_strides[stage]) } else { (1, 1) };
                blocks.push(ResidualBlock::new(
                    store,
                    &format!("backbone.stage{stage}.block{b}"),
                    c_in,
                    widths[stage],
                    st,
                    ss,
                    rng,
                ));
                c_in = widths[stage];
            }
        }
        Ok(Self { config, stem, stem_norm, blocks })
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<T>, x: &Var<T>) -> Var<T> {
        let mut h = self.stem.forward(ctx, x);
        h = self.stem_norm.forward(ctx, &h).relu();
        if self.config.stem_pool {
            h = h.max_pool2x();
        }
        for block in &self.blocks {
            h = block.forward(ctx, &h);
        }
        h
    }
}

/// Backbone plus pooling encoder configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Config {
    pub backbone: BackboneConfig,
    pub bert: BertConfig,
}

impl Stage1Config {
    pub fn full() -> Self {
        Self { backbone: BackboneConfig::full(), bert: BertConfig::default() }
    }

    /// Toy backbone with an encoder sized to its 64-wide output.
    pub fn toy() -> Self {
        let backbone = BackboneConfig::toy();
        let d = backbone.output_dim();
        Self {
            backbone,
            bert: BertConfig { model_dim: d, heads: 8, layers: 1, ff_dim: 2 * d, dropout: 0.1, max_positions: 16 },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (t, d) = self.backbone.output_shape()?;
        if d != self.bert.model_dim {
            return Err(Error::Config(format!(
                "encoder width {} must equal backbone output width {d}",
                self.bert.model_dim
            )));
        }
        self.bert.validate(t)
    }
}

#[derive(Debug, Clone)]
pub struct Stage1Net {
    pub backbone: Backbone,
    pub pool: BertEncoder,
    pub head: Linear,
}

/// Stage-1 architecture together with its weights.
#[derive(Debug, Clone)]
pub struct Stage1Model<T: Scalar = f32> {
    pub config: Stage1Config,
    pub net: Stage1Net,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Stage1Model<T> {
    /// Deterministic initialization from `seed`.
    pub fn new(config: Stage1Config, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let backbone = Backbone::new(&mut params, config.backbone.clone(), &mut rng)?;
        let pool = BertEncoder::new(&mut params, "pool", config.bert.clone(), &mut rng);
        let d = config.bert.model_dim;
        let head = Linear::new(&mut params, "head", d, 1, &mut rng);
        Ok(Self { config, net: Stage1Net { backbone, pool, head }, params })
    }

    /// Feature sequences `[N, T', D]` from stacks `[N, 3, frames, size, size]`.
    pub fn features(&self, ctx: &Ctx<T>, x: &Var<T>) -> Var<T> {
        self.net.backbone.forward(ctx, x).spatial_mean_seq()
    }

    pub fn pool(&self, ctx: &Ctx<T>, seq: &Var<T>) -> EncoderOutput<T> {
        self.net.pool.forward(ctx, seq)
    }

    /// Class-token embeddings `[N, D]`.
    pub fn embed(&self, ctx: &Ctx<T>, x: &Var<T>) -> Var<T> {
        self.pool(ctx, &self.features(ctx, x)).cls
    }

    /// Head logits `[N]` for embeddings `[N, D]`.
    pub fn classify_logits(&self, ctx: &Ctx<T>, embedding: &Var<T>) -> Var<T> {
        let n = embedding.shape()[0];
        self.net.head.forward(ctx, embedding).reshape(&[n])
    }

    pub fn logits(&self, ctx: &Ctx<T>, x: &Var<T>) -> Var<T> {
        self.classify_logits(ctx, &self.embed(ctx, x))
    }

    /// Inference-mode probabilities.
    pub fn predict_proba(&self, x: &Tensor<T>) -> Vec<T> {
        let ctx = Ctx::eval(&self.params);
        self.logits(&ctx, &Var::constant(x.clone())).sigmoid().value().data().to_vec()
    }

    /// Inference-mode embeddings `[N, D]`.
    pub fn embed_eval(&self, x: &Tensor<T>) -> Tensor<T> {
        let ctx = Ctx::eval(&self.params);
        self.embed(&ctx, &Var::constant(x.clone())).value().clone()
    }

    /// Head probability for precomputed embeddings.
    pub fn classify(&self, embedding: &Tensor<T>) -> Vec<T> {
        let ctx = Ctx::eval(&self.params);
        self.classify_logits(&ctx, &Var::constant(embedding.clone())).sigmoid().value().data().to_vec()
    }
}

impl Stage1Model<f32> {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let config = serde_json::to_string(&self.config).expect("config serializes");
        Checkpoint::from_store(STAGE1_TAG, config, &self.params)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config: Stage1Config =
            serde_json::from_str(&ck.config).map_err(|e| Error::Format(format!("stage-1 config record: {e}")))?;
        let mut model = Self::new(config, 0)?;
        ck.load_into(&mut model.params)?;
        Ok(model)
    }
}
