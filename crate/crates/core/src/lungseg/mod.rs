//! Lung masks, slice filtering and three-channel model inputs.

mod morph;
mod unet;

pub use morph::{close, components, dilate, erode, fill_holes, squared_distance, BBox, BinaryImage, Components};
pub use unet::{mask_from_probabilities, shrink, train_unet, UnetConfig, UnetModel, UnetTraining};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{resize_bilinear, GrayscaleImage, SLICE_SIZE};

pub const DEFAULT_FILTER_RATIO: f64 = 0.5;
/// Side length of a model-input modality stack.
pub const MODALITY_SIZE: usize = 224;
const CLOSING_RADIUS_AT_512: f64 = 5.0;

/// Binary lung mask with its foreground statistics.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SliceMask {
    pub mask: BinaryImage,
    pub area: usize,
    pub bbox: Option<BBox>,
}

impl SliceMask {
    pub fn from_binary(mask: BinaryImage) -> Self {
        let area = mask.count();
        let bbox = mask.bbox();
        Self { mask, area, bbox }
    }
}

/// Closing radius for an image of `width` pixels (5 px at 512).
pub fn closing_radius(width: usize) -> usize {
    ((CLOSING_RADIUS_AT_512 * width as f64 / SLICE_SIZE as f64).round() as usize).max(1)
}

/// Otsu threshold bin over a 256-bin histogram; `None` when fewer than two bins are occupied.
pub fn otsu_threshold(pixels: &[f32]) -> Option<usize> {
    let mut hist = [0u64; 256];
    for &v in pixels {
        hist[((v.clamp(0.0, 1.0) * 256.0) as usize).min(255)] += 1;
    }
    if hist.iter().filter(|&&c| c > 0).count() < 2 {
        return None;
    }
    let total = pixels.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let mut best = (f64::NEG_INFINITY, 0usize);
    for (t, &c) in hist.iter().enumerate().take(255) {
        w0 += c as f64;
        sum0 += t as f64 * c as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let diff = sum0 / w0 - (sum_all - sum0) / w1;
        let between = w0 * w1 * diff * diff;
        if between > best.0 {
            best = (between, t);
        }
    }
    Some(best.1)
}

/// Dark pixels (at or below the Otsu bin) become foreground.
pub fn binarize(img: &GrayscaleImage) -> BinaryImage {
    match otsu_threshold(&img.pixels) {
        None => BinaryImage::empty(img.height, img.width),
        Some(t) => BinaryImage::new(
            img.height,
            img.width,
            img.pixels.iter().map(|&v| ((v.clamp(0.0, 1.0) * 256.0) as usize).min(255) <= t).collect(),
        ),
    }
}

/// Drops border-connected regions, keeps the two largest others, and closes small gaps.
pub fn morph_segment(bin: &BinaryImage) -> SliceMask {
    let comps = components(bin, true, true);
    let mut interior: Vec<usize> = (0..comps.sizes.len()).filter(|&i| !comps.touches_border[i]).collect();
    interior.sort_by(|&a, &b| comps.sizes[b].cmp(&comps.sizes[a]).then(a.cmp(&b)));
    interior.truncate(2);
    let keep: Vec<bool> = (0..comps.sizes.len()).map(|i| interior.contains(&i)).collect();
    let kept = BinaryImage::new(
        bin.height,
        bin.width,
        comps.labels.iter().map(|&l| l != 0 && keep[l as usize - 1]).collect(),
    );
    let mut closed = close(&kept, closing_radius(bin.width));
    // Closing may reach the frame; the outermost ring is always background.
    let (h, w) = (closed.height, closed.width);
    for (i, v) in closed.data.iter_mut().enumerate() {
        let (r, c) = (i / w, i % w);
        if r == 0 || c == 0 || r + 1 == h || c + 1 == w {
            *v = false;
        }
    }
    SliceMask::from_binary(closed)
}

pub fn max_lung_area(masks: &[SliceMask]) -> usize {
    masks.iter().map(|m| m.area).max().unwrap_or(0)
}

/// Outcome of area-based slice filtering.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SliceFilter {
    pub kept: Vec<usize>,
    /// All areas were zero, so every slice was kept.
    pub degenerate: bool,
}

/// Keeps slice `i` iff `area_i ≥ ratio · max(area)`.
pub fn filter_by_area(areas: &[usize], ratio: f64) -> Result<SliceFilter> {
    if areas.is_empty() {
        return Err(Error::Data("slice filtering needs at least one slice".into()));
    }
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Config(format!("filter ratio {ratio} outside (0, 1]")));
    }
    let max = *areas.iter().max().expect("non-empty");
    if max == 0 {
        return Ok(SliceFilter { kept: (0..areas.len()).collect(), degenerate: true });
    }
    let cutoff = ratio * max as f64;
    let kept = areas.iter().enumerate().filter(|(_, &a)| a as f64 >= cutoff).map(|(i, _)| i).collect();
    Ok(SliceFilter { kept, degenerate: false })
}

pub fn filter_slices(masks: &[SliceMask], ratio: f64) -> Result<Vec<usize>> {
    let areas: Vec<usize> = masks.iter().map(|m| m.area).collect();
    let f = filter_by_area(&areas, ratio)?;
    if f.degenerate {
        log::warn!("no lung found in any of {} slices; keeping all", masks.len());
    }
    Ok(f.kept)
}

/// Closing followed by hole filling; never removes foreground.
pub fn refine_mask(m: &SliceMask) -> SliceMask {
    let closed = close(&m.mask, closing_radius(m.mask.width));
    SliceMask::from_binary(fill_holes(&closed))
}

pub fn union_bbox<'a>(masks: impl IntoIterator<Item = &'a SliceMask>) -> Option<BBox> {
    masks.into_iter().filter_map(|m| m.bbox).reduce(BBox::union)
}

/// Channel-major `[3, size, size]` input: image, mask, masked image.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityStack {
    pub size: usize,
    pub data: Vec<f32>,
}

impl ModalityStack {
    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.size * self.size;
        &self.data[c * n..(c + 1) * n]
    }
}

fn crop(plane: &[f32], width: usize, b: BBox) -> Vec<f32> {
    (b.row_min..=b.row_max).flat_map(|r| plane[r * width + b.col_min..=r * width + b.col_max].iter().copied()).collect()
}

/// Crops to `region` (full frame when `None`), resizes, and assembles the three channels.
pub fn compose_modality(img: &GrayscaleImage, m: &SliceMask, region: Option<BBox>, size: usize) -> Result<ModalityStack> {
    if (img.height, img.width) != (m.mask.height, m.mask.width) {
        return Err(Error::Data(format!(
            "image is {}×{} but mask is {}×{}",
            img.height, img.width, m.mask.height, m.mask.width
        )));
    }
    let full = BBox { row_min: 0, row_max: img.height - 1, col_min: 0, col_max: img.width - 1 };
    let b = region.unwrap_or(full);
    if b.row_max >= img.height || b.col_max >= img.width || b.row_min > b.row_max || b.col_min > b.col_max {
        return Err(Error::Data(format!("crop region {b:?} lies outside the image")));
    }
    let mask_plane: Vec<f32> = m.mask.data.iter().map(|&v| v as u8 as f32).collect();
    let image = resize_bilinear(&crop(&img.pixels, img.width, b), b.height(), b.width(), size, size);
    let mask: Vec<f32> = resize_bilinear(&crop(&mask_plane, img.width, b), b.height(), b.width(), size, size)
        .into_iter()
        .map(|v| if v >= 0.5 { 1.0 } else { 0.0 })
        .collect();
    let masked: Vec<f32> = image.iter().zip(&mask).map(|(a, b)| a * b).collect();
    let mut data = image;
    data.extend(mask);
    data.extend(masked);
    Ok(ModalityStack { size, data })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub filter_ratio: f64,
    pub stack_size: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self { filter_ratio: DEFAULT_FILTER_RATIO, stack_size: MODALITY_SIZE }
    }
}

/// Kept slices of one volume with their refined masks and stacks.
#[derive(Debug, Clone)]
pub struct ProcessedVolume {
    pub kept: Vec<usize>,
    pub masks: Vec<SliceMask>,
    pub stacks: Vec<ModalityStack>,
    pub region: Option<BBox>,
    pub warnings: Vec<String>,
}

/// Morphological masks for every slice.
pub fn morph_masks(slices: &[GrayscaleImage]) -> Vec<SliceMask> {
    slices.iter().map(|s| morph_segment(&binarize(s))).collect()
}

/// Filters on morphological masks, segments kept slices (UNet when given), refines and composes.
pub fn preprocess_volume(
    slices: &[GrayscaleImage],
    cfg: &PreprocessConfig,
    unet: Option<&UnetModel>,
) -> Result<ProcessedVolume> {
    let coarse = morph_masks(slices);
    let areas: Vec<usize> = coarse.iter().map(|m| m.area).collect();
    let filter = filter_by_area(&areas, cfg.filter_ratio)?;
    let mut warnings = Vec::new();
    if filter.degenerate {
        warnings.push("no lung found in any slice; all slices kept".to_string());
    }
    let kept = filter.kept;
    let raw: Vec<SliceMask> = match unet {
        Some(model) => kept
            .chunks(16)
            .flat_map(|chunk| model.segment_batch(&chunk.iter().map(|&i| &slices[i]).collect::<Vec<_>>()))
            .collect(),
        None => kept.iter().map(|&i| coarse[i].clone()).collect(),
    };
    let masks: Vec<SliceMask> = raw.iter().map(refine_mask).collect();
    let region = union_bbox(&masks);
    if region.is_none() {
        warnings.push("empty lung mask on every kept slice; using the full frame".to_string());
    }
    let stacks = kept
        .iter()
        .zip(&masks)
        .map(|(&i, m)| compose_modality(&slices[i], m, region, cfg.stack_size))
        .collect::<Result<Vec<_>>>()?;
    Ok(ProcessedVolume { kept, masks, stacks, region, warnings })
}
