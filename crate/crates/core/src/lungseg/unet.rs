//! Small encoder-decoder segmenter working at a reduced resolution.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::morph::BinaryImage;
use super::SliceMask;
use crate::checkpoint::{Checkpoint, UNET_TAG};
use crate::error::{Error, Result};
use crate::ingest::{resize_bilinear, GrayscaleImage};
use crate::nn::{Adam, BatchNorm, Conv3d, Ctx, ParamStore};
use crate::seed;
use crate::tensor::{ConvGeom, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnetConfig {
    pub levels: usize,
    pub base_channels: usize,
    /// Side length images are reduced to before segmentation.
    pub input_size: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for UnetConfig {
    fn default() -> Self {
        Self { levels: 3, base_channels: 16, input_size: 128, epochs: 15, batch_size: 8, learning_rate: 2e-3, seed: 0 }
    }
}

impl UnetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.base_channels == 0 || self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("unet levels, channels, epochs and batch size must be positive".into()));
        }
        let step = 1usize << (self.levels - 1);
        if self.input_size == 0 || self.input_size % step != 0 {
            return Err(Error::Config(format!(
                "unet input size {} must be a positive multiple of {step}",
                self.input_size
            )));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("unet learning rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct ConvBlock {
    conv1: Conv3d,
    norm1: BatchNorm,
    conv2: Conv3d,
    norm2: BatchNorm,
}

impl ConvBlock {
    fn new(store: &mut ParamStore<f32>, name: &str, c_in: usize, c_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let geom = ConvGeom::spatial(3, 1, 1);
        Self {
            conv1: Conv3d::new(store, &format!("{name}.conv1"), c_in, c_out, geom, false, rng),
            norm1: BatchNorm::new(store, &format!("{name}.norm1"), c_out),
            conv2: Conv3d::new(store, &format!("{name}.conv2"), c_out, c_out, geom, false, rng),
            norm2: BatchNorm::new(store, &format!("{name}.norm2"), c_out),
        }
    }

    fn forward(&self, ctx: &Ctx<f32>, x: &Var<f32>) -> Var<f32> {
        let mut h = self.conv1.forward(ctx, x);
        h = self.norm1.forward(ctx, &h).relu();
        h = self.conv2.forward(ctx, &h);
        self.norm2.forward(ctx, &h).relu()
    }
}

#[derive(Debug, Clone)]
struct UnetNet {
    down: Vec<ConvBlock>,
    up: Vec<ConvBlock>,
    head: Conv3d,
}

/// Trained segmenter; read-only after training.
#[derive(Debug, Clone)]
pub struct UnetModel {
    pub config: UnetConfig,
    pub params: ParamStore<f32>,
    net: UnetNet,
}

/// Model plus per-step training losses.
#[derive(Debug, Clone)]
pub struct UnetTraining {
    pub model: UnetModel,
    pub losses: Vec<f32>,
}

/// Reduces a plane to `size`×`size`: box averaging for integer factors, bilinear otherwise.
pub fn shrink(pixels: &[f32], h: usize, w: usize, size: usize) -> Vec<f32> {
    if h % size == 0 && w % size == 0 && h / size == w / size {
        let f = h / size;
        let inv = 1.0 / (f * f) as f32;
        let mut out = vec![0.0f32; size * size];
        for r in 0..h {
            for c in 0..w {
                out[(r / f) * size + c / f] += pixels[r * w + c];
            }
        }
        out.iter_mut().for_each(|v| *v *= inv);
        out
    } else {
        resize_bilinear(pixels, h, w, size, size)
    }
}

impl UnetModel {
    pub fn new(config: UnetConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(config.seed, &[0x0e7]));
        let mut params = ParamStore::new();
        let width = |l: usize| config.base_channels << l;
        let down = (0..config.levels)
            .map(|l| ConvBlock::new(&mut params, &format!("down{l}"), if l == 0 { 1 } else { width(l - 1) }, width(l), &mut rng))
            .collect();
        let up = (0..config.levels - 1)
            .rev()
            .map(|l| ConvBlock::new(&mut params, &format!("up{l}"), width(l + 1) + width(l), width(l), &mut rng))
            .collect();
        let head = Conv3d::new(&mut params, "head", width(0), 1, ConvGeom::spatial(1, 1, 0), true, &mut rng);
        Ok(Self { config, params, net: UnetNet { down, up, head } })
    }

    /// Logits `[N, 1, 1, S, S]` for inputs of the same shape.
    pub fn forward(&self, ctx: &Ctx<f32>, x: &Var<f32>) -> Var<f32> {
        let mut skips = Vec::new();
        let mut h = x.clone();
        for (l, block) in self.net.down.iter().enumerate() {
            if l > 0 {
                h = h.max_pool2x();
            }
            h = block.forward(ctx, &h);
            skips.push(h.clone());
        }
        skips.pop();
        for block in &self.net.up {
            let skip = skips.pop().expect("one skip per decoder level");
            h = block.forward(ctx, &Var::concat(&[h.upsample2x(), skip], 1));
        }
        self.net.head.forward(ctx, &h)
    }

    fn batch_input(&self, images: &[&GrayscaleImage]) -> Tensor<f32> {
        let s = self.config.input_size;
        let data = images.iter().flat_map(|im| shrink(&im.pixels, im.height, im.width, s)).collect();
        Tensor::from_vec(&[images.len(), 1, 1, s, s], data)
    }

    /// Per-pixel foreground probability at the working resolution.
    pub fn working_probabilities(&self, images: &[&GrayscaleImage]) -> Vec<Vec<f32>> {
        if images.is_empty() {
            return Vec::new();
        }
        let ctx = Ctx::eval(&self.params);
        let probs = self.forward(&ctx, &Var::constant(self.batch_input(images))).sigmoid();
        let s2 = self.config.input_size * self.config.input_size;
        probs.value().data().chunks(s2).map(<[f32]>::to_vec).collect()
    }

    /// Probabilities resampled to each image's own size.
    pub fn probabilities(&self, images: &[&GrayscaleImage]) -> Vec<Vec<f32>> {
        let s = self.config.input_size;
        self.working_probabilities(images)
            .into_iter()
            .zip(images)
            .map(|(p, im)| resize_bilinear(&p, s, s, im.height, im.width))
            .collect()
    }

    /// Thresholded masks for a batch of slices.
    pub fn segment_batch(&self, images: &[&GrayscaleImage]) -> Vec<SliceMask> {
        self.probabilities(images)
            .into_iter()
            .zip(images)
            .map(|(p, im)| mask_from_probabilities(im.height, im.width, &p))
            .collect()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let config = serde_json::to_string(&self.config).expect("config serializes");
        Checkpoint::from_store(UNET_TAG, config, &self.params)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config: UnetConfig =
            serde_json::from_str(&ck.config).map_err(|e| Error::Format(format!("unet config record: {e}")))?;
        let mut model = Self::new(config)?;
        ck.load_into(&mut model.params)?;
        Ok(model)
    }
}

/// Foreground where probability ≥ 0.5.
pub fn mask_from_probabilities(height: usize, width: usize, probs: &[f32]) -> SliceMask {
    SliceMask::from_binary(BinaryImage::new(height, width, probs.iter().map(|&p| p >= 0.5).collect()))
}

/// Fits the segmenter to `(image, target)` pairs with per-pixel cross-entropy.
pub fn train_unet(pairs: &[(GrayscaleImage, SliceMask)], config: &UnetConfig) -> Result<UnetTraining> {
    if pairs.is_empty() {
        return Err(Error::Data("unet training needs at least one image/mask pair".into()));
    }
    let mut model = UnetModel::new(config.clone())?;
    let s = config.input_size;
    let inputs: Vec<Vec<f32>> = pairs.iter().map(|(im, _)| shrink(&im.pixels, im.height, im.width, s)).collect();
    let targets: Vec<Vec<f32>> = pairs
        .iter()
        .map(|(_, m)| {
            let plane: Vec<f32> = m.mask.data.iter().map(|&v| v as u8 as f32).collect();
            shrink(&plane, m.mask.height, m.mask.width, s)
        })
        .collect();
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(config.seed, &[0x5eed]));
    let mut adam = Adam::new();
    let mut losses = Vec::new();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let x: Vec<f32> = batch.iter().flat_map(|&i| inputs[i].iter().copied()).collect();
            let y: Vec<f32> = batch.iter().flat_map(|&i| targets[i].iter().copied()).collect();
            let ctx = Ctx::train(&model.params, seed::derive(config.seed, &[losses.len() as u64]));
            let logits = model.forward(&ctx, &Var::constant(Tensor::from_vec(&[batch.len(), 1, 1, s, s], x)));
            let loss = logits.bce_with_logits(&y);
            let value = loss.value().item();
            if !value.is_finite() {
                return Err(Error::Numerical(format!("unet loss became {value} at step {}", losses.len())));
            }
            losses.push(value);
            let grads = loss.backward();
            let updates = ctx.take_buffer_updates();
            drop(ctx);
            model.params.apply_buffer_updates(updates);
            adam.step(&mut model.params, &grads, config.learning_rate);
        }
    }
    Ok(UnetTraining { model, losses })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn disk_pair(size: usize, radius: f64) -> (GrayscaleImage, SliceMask) {
        let c = size as f64 / 2.0;
        let mask: Vec<bool> = (0..size * size)
            .map(|i| ((i / size) as f64 + 0.5 - c).hypot((i % size) as f64 + 0.5 - c) <= radius)
            .collect();
        let pixels = mask.iter().map(|&m| if m { 0.1 } else { 0.7 }).collect();
        (GrayscaleImage::new(size, size, pixels).unwrap(), SliceMask::from_binary(BinaryImage::new(size, size, mask)))
    }

    fn tiny() -> UnetConfig {
        UnetConfig { levels: 2, base_channels: 4, input_size: 16, epochs: 200, batch_size: 1, learning_rate: 1e-2, seed: 1 }
    }

    #[test]
    fn single_pair_overfit_and_determinism() {
        let pairs = vec![disk_pair(32, 9.0)];
        let a = train_unet(&pairs, &tiny()).unwrap();
        assert!(a.losses.last().unwrap() < a.losses.first().unwrap());
        let b = train_unet(&pairs, &UnetConfig { epochs: 3, ..tiny() }).unwrap();
        let c = train_unet(&pairs, &UnetConfig { epochs: 3, ..tiny() }).unwrap();
        assert_eq!(b.model.params.named().collect::<Vec<_>>(), c.model.params.named().collect::<Vec<_>>());
        let seg = a.model.segment_batch(&[&pairs[0].0]).pop().unwrap();
        assert!(seg.mask.iou(&pairs[0].1.mask) > 0.8);
        let back = UnetModel::from_checkpoint(&a.model.to_checkpoint()).unwrap();
        assert_eq!(back.probabilities(&[&pairs[0].0]), a.model.probabilities(&[&pairs[0].0]));
    }

    #[test]
    fn rejects_empty_training_set_and_bad_sizes() {
        assert!(train_unet(&[], &tiny()).is_err());
        assert!(UnetModel::new(UnetConfig { input_size: 30, levels: 3, ..tiny() }).is_err());
    }

    #[test]
    fn threshold_convention() {
        assert_eq!(mask_from_probabilities(2, 2, &[0.0; 4]).area, 0);
        let m = mask_from_probabilities(1, 3, &[0.5, 0.4999, 1.0]);
        assert_eq!(m.mask.data, [true, false, true]);
    }

    #[test]
    fn box_shrink_averages() {
        let p: Vec<f32> = (0..16).map(|i| i as f32).collect();
        assert_eq!(shrink(&p, 4, 4, 2), vec![2.5, 4.5, 10.5, 12.5]);
    }
}
