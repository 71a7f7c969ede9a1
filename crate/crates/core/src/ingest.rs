//! Dataset discovery, slice decoding and the synthetic CT corpus.
//!
//! On-disk layout: `<root>/<partition>/<label>/<volume_id>/<index>.png`, with
//! optional severity labels in `<root>/severity.csv`. Test volumes may also sit
//! directly under `<root>/test/<volume_id>/` when unlabeled.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::seed;

/// Canonical slice side length.
pub const SLICE_SIZE: usize = 512;
pub const SEVERITY_FILE: &str = "severity.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    NonCovid,
    Covid,
}

impl Label {
    pub const ALL: [Label; 2] = [Label::NonCovid, Label::Covid];

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Covid => "covid",
            Label::NonCovid => "non_covid",
        }
    }

    /// Class index used by the binary heads (`covid` is the positive class).
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn from_probability(p: f64) -> Self {
        if p >= 0.5 {
            Label::Covid
        } else {
            Label::NonCovid
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Mild,
    Moderate,
    Severe,
    Critical,
}

impl Severity {
    pub const ALL: [Severity; 4] = [Severity::Mild, Severity::Moderate, Severity::Severe, Severity::Critical];

    pub fn as_str(self) -> &'static str {
        match self {
            Severity::Mild => "mild",
            Severity::Moderate => "moderate",
            Severity::Severe => "severe",
            Severity::Critical => "critical",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// Class of a lesion fraction given three ascending cut points.
    pub fn from_fraction(fraction: f64, thresholds: &[f64; 3]) -> Self {
        let class = thresholds.iter().filter(|&&t| fraction >= t).count();
        Self::ALL[class]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    Train,
    Val,
    Test,
}

impl Partition {
    pub const ALL: [Partition; 3] = [Partition::Train, Partition::Val, Partition::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Partition::Train => "train",
            Partition::Val => "val",
            Partition::Test => "test",
        }
    }
}

macro_rules! text_enum {
    ($ty:ty) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                let s = s.trim();
                <$ty>::ALL
                    .iter()
                    .copied()
                    .find(|v| v.as_str().eq_ignore_ascii_case(s))
                    .ok_or_else(|| Error::Format(format!("unknown {} value {s:?}", stringify!($ty))))
            }
        }
    };
}

text_enum!(Label);
text_enum!(Severity);
text_enum!(Partition);

/// One scan: its ordered slice files and labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CtVolume {
    pub volume_id: String,
    pub slice_paths: Vec<PathBuf>,
    /// `None` for unlabeled test volumes.
    pub label: Option<Label>,
    pub severity: Option<Severity>,
    pub partition: Partition,
}

/// Row-major single-channel image with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayscaleImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

impl GrayscaleImage {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != height * width || height == 0 || width == 0 {
            return Err(Error::Data(format!("{} pixels do not form a {height}×{width} image", pixels.len())));
        }
        Ok(Self { height, width, pixels })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self { height, width, pixels: vec![value; height * width] }
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * self.width + col]
    }

    /// Bilinear resampling with half-pixel centres and edge clamping.
    pub fn resized(&self, height: usize, width: usize) -> Self {
        Self { height, width, pixels: resize_bilinear(&self.pixels, self.height, self.width, height, width) }
    }

    /// 8-bit quantization, rounding to nearest.
    pub fn to_u8(&self) -> Vec<u8> {
        self.pixels.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }

    pub fn from_u8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(height, width, bytes.iter().map(|&b| f32::from(b) / 255.0).collect())
    }
}

/// Bilinear resize of a row-major plane.
pub fn resize_bilinear(src: &[f32], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f32> {
    if h == out_h && w == out_w {
        return src.to_vec();
    }
    let taps = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f32)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|o| {
                let p = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = p.floor() as usize;
                (i0, (i0 + 1).min(n_in - 1), (p - i0 as f64) as f32)
            })
            .collect()
    };
    let rows = taps(h, out_h);
    let cols = taps(w, out_w);
    let mut out = Vec::with_capacity(out_h * out_w);
    for &(r0, r1, fr) in &rows {
        let (a, b) = (&src[r0 * w..(r0 + 1) * w], &src[r1 * w..(r1 + 1) * w]);
        for &(c0, c1, fc) in &cols {
            let top = a[c0] + fc * (a[c1] - a[c0]);
            let bottom = b[c0] + fc * (b[c1] - b[c0]);
            out.push(top + fr * (bottom - top));
        }
    }
    out
}

/// Decodes one slice to grayscale in `[0, 1]`, resized to 512×512 when needed.
pub fn load_slice(path: &Path) -> Result<GrayscaleImage> {
    let img = image::ImageReader::open(path)
        .at(path)?
        .with_guessed_format()
        .at(path)?
        .decode()
        .map_err(|e| Error::Image { path: path.to_path_buf(), message: e.to_string() })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let pixels: Vec<f32> = match &img {
        image::DynamicImage::ImageLuma8(g) => g.as_raw().iter().map(|&v| f32::from(v) / 255.0).collect(),
        image::DynamicImage::ImageLuma16(g) => g.as_raw().iter().map(|&v| f32::from(v) / 65535.0).collect(),
        other => other.to_luma32f().into_raw().into_iter().map(|v| v.clamp(0.0, 1.0)).collect(),
    };
    let img = GrayscaleImage::new(h, w, pixels)?;
    Ok(if h == SLICE_SIZE && w == SLICE_SIZE { img } else { img.resized(SLICE_SIZE, SLICE_SIZE) })
}

/// Writes an 8-bit grayscale PNG.
pub fn write_png(path: &Path, height: usize, width: usize, bytes: &[u8]) -> Result<()> {
    image::save_buffer(path, bytes, width as u32, height as u32, image::ExtendedColorType::L8)
        .map_err(|e| Error::Image { path: path.to_path_buf(), message: e.to_string() })
}

/// Filename order where digit runs compare by numeric value.
pub fn natural_cmp(a: &str, b: &str) -> Ordering {
    fn chunks(s: &str) -> Vec<(bool, &str)> {
        let mut out = Vec::new();
        let mut start = 0;
        let bytes = s.as_bytes();
        for i in 1..=bytes.len() {
            if i == bytes.len() || bytes[i].is_ascii_digit() != bytes[start].is_ascii_digit() {
                out.push((bytes[start].is_ascii_digit(), &s[start..i]));
                start = i;
            }
        }
        out
    }
    let (ca, cb) = (chunks(a), chunks(b));
    for (&(da, xa), &(db, xb)) in ca.iter().zip(&cb) {
        let ord = if da && db {
            let (ta, tb) = (xa.trim_start_matches('0'), xb.trim_start_matches('0'));
            ta.len().cmp(&tb.len()).then_with(|| ta.cmp(tb))
        } else {
            xa.cmp(xb)
        };
        if ord != Ordering::Equal {
            return ord;
        }
    }
    ca.len().cmp(&cb.len()).then_with(|| a.cmp(b))
}

/// Something skipped while scanning.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScanWarning {
    pub path: PathBuf,
    pub message: String,
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries: Vec<PathBuf> =
        fs::read_dir(dir).at(dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>().at(dir)?;
    entries.sort_by(|a, b| natural_cmp(&file_name(a), &file_name(b)));
    Ok(entries)
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

fn is_png(p: &Path) -> bool {
    p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

fn decodable(p: &Path) -> bool {
    image::ImageReader::open(p)
        .ok()
        .and_then(|r| r.with_guessed_format().ok())
        .and_then(|r| r.into_dimensions().ok())
        .is_some_and(|(w, h)| w > 0 && h > 0)
}

/// Reads `volume_id,severity` rows.
pub fn read_severity_csv(path: &Path) -> Result<HashMap<String, Severity>> {
    let text = fs::read_to_string(path).at(path)?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    match lines.next().map(|h| h.split(',').map(str::trim).collect::<Vec<_>>()) {
        Some(h) if h == ["volume_id", "severity"] => {}
        _ => return Err(Error::Format(format!("{} must start with header volume_id,severity", path.display()))),
    }
    lines
        .map(|line| {
            let (id, sev) = line
                .split_once(',')
                .ok_or_else(|| Error::Format(format!("malformed severity row {line:?}")))?;
            Ok((id.trim().to_string(), sev.parse()?))
        })
        .collect()
}

/// Enumerates all volumes under `root`, sorted by volume id.
pub fn scan_dataset(root: &Path) -> Result<Vec<CtVolume>> {
    let (volumes, warnings) = scan_dataset_with_warnings(root)?;
    for w in &warnings {
        log::warn!("{}: {}", w.path.display(), w.message);
    }
    Ok(volumes)
}

/// [`scan_dataset`] that also returns what was skipped.
pub fn scan_dataset_with_warnings(root: &Path) -> Result<(Vec<CtVolume>, Vec<ScanWarning>)> {
    if !root.is_dir() {
        return Err(Error::Config(format!("dataset root {} does not exist", root.display())));
    }
    let severities = {
        let p = root.join(SEVERITY_FILE);
        if p.is_file() {
            read_severity_csv(&p)?
        } else {
            HashMap::new()
        }
    };
    let mut volumes = Vec::new();
    let mut warnings = Vec::new();
    let mut warn = |path: &Path, message: String| warnings.push(ScanWarning { path: path.to_path_buf(), message });
    for partition in Partition::ALL {
        let pdir = root.join(partition.as_str());
        if !pdir.is_dir() {
            continue;
        }
        let mut volume_dirs: Vec<(PathBuf, Option<Label>)> = Vec::new();
        for entry in sorted_entries(&pdir)?.into_iter().filter(|p| p.is_dir()) {
            match file_name(&entry).parse::<Label>() {
                Ok(label) => volume_dirs
                    .extend(sorted_entries(&entry)?.into_iter().filter(|p| p.is_dir()).map(|p| (p, Some(label)))),
                Err(_) if partition == Partition::Test => volume_dirs.push((entry, None)),
                Err(_) => warn(&entry, "not a label directory; skipped".into()),
            }
        }
        for (dir, label) in volume_dirs {
            let slice_paths: Vec<PathBuf> =
                sorted_entries(&dir)?.into_iter().filter(|p| is_png(p) && decodable(p)).collect();
            if slice_paths.is_empty() {
                warn(&dir, "no decodable slices; volume excluded".into());
                continue;
            }
            let volume_id = file_name(&dir);
            let severity = match (severities.get(&volume_id), label) {
                (Some(&s), Some(Label::Covid)) => Some(s),
                (Some(_), _) => {
                    warn(&dir, "severity given for a volume not labeled covid; ignored".into());
                    None
                }
                (None, _) => None,
            };
            volumes.push(CtVolume { volume_id, slice_paths, label, severity, partition });
        }
    }
    volumes.sort_by(|a, b| natural_cmp(&a.volume_id, &b.volume_id).then(a.partition.cmp(&b.partition)));
    Ok((volumes, warnings))
}

/// Volume counts per partition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl PartitionCounts {
    pub fn get(&self, p: Partition) -> usize {
        match p {
            Partition::Train => self.train,
            Partition::Val => self.val,
            Partition::Test => self.test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_volumes_per_partition: PartitionCounts,
    /// Inclusive slice-count bounds.
    pub slice_count_range: (usize, usize),
    pub lesion_intensity: f32,
    /// Lesion-voxel fractions separating mild | moderate | severe | critical.
    pub severity_fraction_thresholds: [f64; 3],
    /// Range of lesion fractions drawn for covid volumes.
    pub lesion_fraction_range: (f64, f64),
    pub covid_fraction: f64,
    pub noise_std: f32,
    pub image_size: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_volumes_per_partition: PartitionCounts { train: 40, val: 10, test: 10 },
            slice_count_range: (20, 120),
            lesion_intensity: 0.3,
            severity_fraction_thresholds: [0.04, 0.09, 0.16],
            lesion_fraction_range: (0.01, 0.28),
            covid_fraction: 0.5,
            noise_std: 0.02,
            image_size: SLICE_SIZE,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.slice_count_range;
        if lo < 1 || hi < lo {
            return Err(Error::Config(format!("slice_count_range [{lo}, {hi}] is invalid")));
        }
        let t = self.severity_fraction_thresholds;
        if !(0.0 < t[0] && t[0] < t[1] && t[1] < t[2] && t[2] < 1.0) {
            return Err(Error::Config(format!("severity thresholds {t:?} must ascend strictly inside (0, 1)")));
        }
        let (flo, fhi) = self.lesion_fraction_range;
        if !(0.0 < flo && flo < t[0] && t[2] < fhi && fhi < 1.0) {
            return Err(Error::Config(format!(
                "lesion_fraction_range ({flo}, {fhi}) must bracket the severity thresholds"
            )));
        }
        if !(0.0..=1.0).contains(&self.covid_fraction) {
            return Err(Error::Config("covid_fraction must lie in [0, 1]".into()));
        }
        if self.image_size < 32 || !(0.0..=1.0).contains(&self.lesion_intensity) || self.noise_std < 0.0 {
            return Err(Error::Config("image_size, lesion_intensity or noise_std out of range".into()));
        }
        Ok(())
    }
}

const AIR: f32 = 0.02;
const BODY: f32 = 0.65;
const LUNG: f32 = 0.12;

/// Rotated ellipse in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
    pub angle: f64,
}

impl Ellipse {
    /// Whether the centre of pixel `(row, col)` lies inside.
    pub fn contains(&self, row: usize, col: usize) -> bool {
        let (x, y) = (col as f64 + 0.5 - self.cx, row as f64 + 0.5 - self.cy);
        let (s, c) = self.angle.sin_cos();
        let (u, v) = (c * x + s * y, -s * x + c * y);
        (u / self.rx).powi(2) + (v / self.ry).powi(2) <= 1.0
    }

    pub fn area(&self) -> f64 {
        std::f64::consts::PI * self.rx * self.ry
    }

    fn scaled(&self, s: f64) -> Self {
        Self { rx: self.rx * s, ry: self.ry * s, ..*self }
    }

    /// Inclusive row and column bounds clipped to a `size` image.
    fn bounds(&self, size: usize) -> (usize, usize, usize, usize) {
        let r = self.rx.max(self.ry) + 1.0;
        let clip = |v: f64| v.clamp(0.0, (size - 1) as f64) as usize;
        (clip(self.cy - r), clip(self.cy + r), clip(self.cx - r), clip(self.cx + r))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Lesion {
    center: (f64, f64, f64),
    radii: (f64, f64, f64),
}

impl Lesion {
    fn contains(&self, z: usize, row: usize, col: usize) -> bool {
        let dz = (z as f64 + 0.5 - self.center.0) / self.radii.0;
        let dy = (row as f64 + 0.5 - self.center.1) / self.radii.1;
        let dx = (col as f64 + 0.5 - self.center.2) / self.radii.2;
        dz * dz + dy * dy + dx * dx <= 1.0
    }
}

/// Fully determined synthetic scan; slices are rendered on demand.
#[derive(Debug, Clone)]
pub struct SyntheticVolume {
    pub volume_id: String,
    pub partition: Partition,
    pub label: Label,
    pub severity: Option<Severity>,
    /// Lesion voxels over lung voxels.
    pub lesion_fraction: f64,
    pub n_slices: usize,
    pub size: usize,
    body: Ellipse,
    lungs: [Ellipse; 2],
    lesions: Vec<Lesion>,
    /// Slice range `[start, end)` that may hold lesions.
    lesion_span: Option<(usize, usize)>,
    lesion_intensity: f32,
    noise_std: f32,
    noise_seed: u64,
}

impl SyntheticVolume {
    /// Builds volume `index` of `partition`; labels are balanced by `covid_fraction`.
    pub fn build(cfg: &SyntheticConfig, partition: Partition, index: usize) -> Result<Self> {
        cfg.validate()?;
        let count = cfg.n_volumes_per_partition.get(partition);
        let n_covid = (count as f64 * cfg.covid_fraction).round() as usize;
        let part_seed = seed::derive(cfg.seed, &[partition as u64]);
        // Label assignment: a seeded permutation of the partition's slots.
        let mut order: Vec<usize> = (0..count.max(index + 1)).collect();
        let mut perm_rng = ChaCha8Rng::seed_from_u64(part_seed);
        for i in (1..order.len()).rev() {
            order.swap(i, perm_rng.random_range(0..=i));
        }
        let rank = order.iter().position(|&v| v == index).unwrap_or(index);
        let covid = rank < n_covid;
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(part_seed, &[index as u64]));

        let size = cfg.image_size as f64;
        let (lo, hi) = cfg.slice_count_range;
        let n_slices = rng.random_range(lo..=hi);
        let jitter = |rng: &mut ChaCha8Rng, amount: f64| 1.0 + rng.random_range(-amount..=amount);
        let centre = (size / 2.0 + rng.random_range(-0.02..=0.02) * size, size / 2.0 + rng.random_range(-0.02..=0.02) * size);
        let body = Ellipse {
            cx: centre.0,
            cy: centre.1,
            rx: 0.42 * size * jitter(&mut rng, 0.04),
            ry: 0.33 * size * jitter(&mut rng, 0.04),
            angle: rng.random_range(-0.05..=0.05),
        };
        let lung_scale = jitter(&mut rng, 0.08);
        let lungs = [-1.0, 1.0].map(|side: f64| Ellipse {
            cx: centre.0 + side * 0.19 * size * jitter(&mut rng, 0.04),
            cy: centre.1 + rng.random_range(-0.015..=0.015) * size,
            rx: 0.13 * size * lung_scale * jitter(&mut rng, 0.05),
            ry: 0.20 * size * lung_scale * jitter(&mut rng, 0.05),
            angle: side * rng.random_range(0.0..=0.15),
        });
        let label = if covid { Label::Covid } else { Label::NonCovid };
        let mut vol = Self {
            volume_id: format!("{}_{index:04}", partition.as_str()),
            partition,
            label,
            severity: None,
            lesion_fraction: 0.0,
            n_slices,
            size: cfg.image_size,
            body,
            lungs,
            lesions: Vec::new(),
            lesion_span: None,
            lesion_intensity: cfg.lesion_intensity,
            noise_std: cfg.noise_std,
            noise_seed: rng.random(),
        };
        if covid {
            let class = rank % Severity::ALL.len();
            let t = cfg.severity_fraction_thresholds;
            let (flo, fhi) = cfg.lesion_fraction_range;
            let edges = [flo, t[0], t[1], t[2], fhi];
            let (a, b) = (edges[class], edges[class + 1]);
            let target = rng.random_range(a + 0.2 * (b - a)..=b - 0.2 * (b - a));
            vol.plant_lesions(target, &mut rng);
            vol.severity = Some(Severity::from_fraction(vol.lesion_fraction, &t));
        }
        Ok(vol)
    }

    fn lung_scale(&self, z: usize) -> f64 {
        let t = (z as f64 + 0.5) / self.n_slices as f64;
        (std::f64::consts::PI * t).sin().max(0.0).powf(0.6)
    }

    /// Lung cross-sections at slice `z`.
    pub fn lung_ellipses(&self, z: usize) -> [Ellipse; 2] {
        let s = self.lung_scale(z);
        self.lungs.map(|l| l.scaled(s))
    }

    fn in_lung(lungs: &[Ellipse; 2], row: usize, col: usize) -> bool {
        lungs.iter().any(|l| l.contains(row, col))
    }

    /// Ground-truth lung mask of slice `z`, row-major.
    pub fn lung_mask(&self, z: usize) -> Vec<bool> {
        let lungs = self.lung_ellipses(z);
        let n = self.size;
        (0..n * n).map(|i| Self::in_lung(&lungs, i / n, i % n)).collect()
    }

    /// Analytic lung area of slice `z`.
    pub fn lung_area(&self, z: usize) -> f64 {
        self.lung_ellipses(z).iter().map(Ellipse::area).sum()
    }

    fn plant_lesions(&mut self, target: f64, rng: &mut ChaCha8Rng) {
        let (n, size) = (self.n_slices, self.size);
        let mut lesion = vec![false; n * size * size];
        let lung_by_slice: Vec<[Ellipse; 2]> = (0..n).map(|z| self.lung_ellipses(z)).collect();
        let lung_total: usize = (0..n)
            .map(|z| {
                let lungs = &lung_by_slice[z];
                lungs
                    .iter()
                    .map(|l| {
                        let (r0, r1, c0, c1) = l.bounds(size);
                        (r0..=r1).flat_map(|r| (c0..=c1).map(move |c| (r, c))).filter(|&(r, c)| l.contains(r, c)).count()
                    })
                    .sum::<usize>()
            })
            .sum();
        // Lungs are disjoint by construction, so per-ellipse counts add up.
        // Heavier involvement reaches across more of the volume.
        let extent = (0.25 + 2.2 * target + rng.random_range(-0.05..=0.05)).clamp(0.25, 0.9);
        let span_len = ((n as f64) * extent).round().max(1.0) as usize;
        let span_start = (n - span_len) / 2 + rng.random_range(0..=(n - span_len).div_ceil(4));
        let span = span_start.min(n - span_len)..(span_start.min(n - span_len) + span_len);
        let mut planted = 0usize;
        let s = size as f64 / SLICE_SIZE as f64;
        for _ in 0..2000 {
            if lung_total == 0 || planted as f64 / lung_total as f64 >= target {
                break;
            }
            let z = rng.random_range(span.clone());
            let lungs = &lung_by_slice[z];
            let lung = lungs[rng.random_range(0..2)];
            let (r0, r1, c0, c1) = lung.bounds(size);
            if r0 >= r1 || c0 >= c1 {
                continue;
            }
            let (row, col) = (rng.random_range(r0..=r1), rng.random_range(c0..=c1));
            if !lung.contains(row, col) {
                continue;
            }
            let r_xy = rng.random_range(8.0..=(10.0 + 120.0 * target)) * s;
            let blob = Lesion {
                center: (z as f64 + 0.5, row as f64 + 0.5, col as f64 + 0.5),
                radii: (rng.random_range(1.0..=(1.5 + 0.1 * n as f64)), r_xy * rng.random_range(0.7..=1.0), r_xy),
            };
            let z_lo = ((blob.center.0 - blob.radii.0).floor().max(0.0) as usize).max(span.start);
            let z_hi = ((blob.center.0 + blob.radii.0).ceil() as usize).min(span.end - 1);
            let reach = r_xy + 1.0;
            let clip = |v: f64| v.clamp(0.0, (size - 1) as f64) as usize;
            for zz in z_lo..=z_hi {
                for r in clip(blob.center.1 - reach)..=clip(blob.center.1 + reach) {
                    for c in clip(blob.center.2 - reach)..=clip(blob.center.2 + reach) {
                        let idx = (zz * size + r) * size + c;
                        if !lesion[idx] && blob.contains(zz, r, c) && Self::in_lung(&lung_by_slice[zz], r, c) {
                            lesion[idx] = true;
                            planted += 1;
                        }
                    }
                }
            }
            self.lesions.push(blob);
        }
        self.lesion_fraction = planted as f64 / lung_total.max(1) as f64;
        self.lesion_span = Some((span.start, span.end));
    }

    /// Renders slice `z` with its noise.
    pub fn render(&self, z: usize) -> GrayscaleImage {
        let n = self.size;
        let lungs = self.lung_ellipses(z);
        let in_span = self.lesion_span.is_some_and(|(a, b)| (a..b).contains(&z));
        let active: Vec<&Lesion> = if in_span {
            self.lesions.iter().filter(|l| (l.center.0 - (z as f64 + 0.5)).abs() <= l.radii.0).collect()
        } else {
            Vec::new()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(self.noise_seed, &[z as u64]));
        let noise = Normal::new(0.0f32, self.noise_std.max(f32::MIN_POSITIVE)).expect("valid std");
        let mut pixels = Vec::with_capacity(n * n);
        for row in 0..n {
            for col in 0..n {
                let base = if Self::in_lung(&lungs, row, col) {
                    if active.iter().any(|l| l.contains(z, row, col)) {
                        self.lesion_intensity
                    } else {
                        LUNG
                    }
                } else if self.body.contains(row, col) {
                    BODY
                } else {
                    AIR
                };
                let v = if self.noise_std > 0.0 { base + noise.sample(&mut rng) } else { base };
                pixels.push(v.clamp(0.0, 1.0));
            }
        }
        GrayscaleImage { height: n, width: n, pixels }
    }
}

/// Per-volume record of a generated corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticRecord {
    pub volume_id: String,
    pub partition: Partition,
    pub label: Label,
    pub severity: Option<Severity>,
    pub lesion_fraction: f64,
    pub n_slices: usize,
}

/// Writes the corpus described by `cfg` under `root`.
pub fn generate_synthetic(cfg: &SyntheticConfig, root: &Path) -> Result<Vec<SyntheticRecord>> {
    cfg.validate()?;
    fs::create_dir_all(root).at(root)?;
    let jobs: Vec<(Partition, usize)> = Partition::ALL
        .iter()
        .flat_map(|&p| (0..cfg.n_volumes_per_partition.get(p)).map(move |i| (p, i)))
        .collect();
    let records = jobs
        .par_iter()
        .map(|&(partition, index)| {
            let vol = SyntheticVolume::build(cfg, partition, index)?;
            let dir = root.join(partition.as_str()).join(vol.label.as_str()).join(&vol.volume_id);
            fs::create_dir_all(&dir).at(&dir)?;
            for z in 0..vol.n_slices {
                let img = vol.render(z);
                write_png(&dir.join(format!("{z}.png")), img.height, img.width, &img.to_u8())?;
            }
            Ok(SyntheticRecord {
                volume_id: vol.volume_id,
                partition,
                label: vol.label,
                severity: vol.severity,
                lesion_fraction: vol.lesion_fraction,
                n_slices: vol.n_slices,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut csv = String::from("volume_id,severity\n");
    for r in &records {
        if let Some(s) = r.severity {
            csv.push_str(&format!("{},{s}\n", r.volume_id));
        }
    }
    let path = root.join(SEVERITY_FILE);
    fs::write(&path, csv).at(&path)?;
    Ok(records)
}
