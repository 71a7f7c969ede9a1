//! Binary morphology on row-major boolean planes.

use serde::{Deserialize, Serialize};

/// Row-major binary image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

/// Inclusive bounds of the foreground.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub row_min: usize,
    pub row_max: usize,
    pub col_min: usize,
    pub col_max: usize,
}

impl BBox {
    pub fn union(self, other: BBox) -> BBox {
        BBox {
            row_min: self.row_min.min(other.row_min),
            row_max: self.row_max.max(other.row_max),
            col_min: self.col_min.min(other.col_min),
            col_max: self.col_max.max(other.col_max),
        }
    }

    pub fn height(&self) -> usize {
        self.row_max - self.row_min + 1
    }

    pub fn width(&self) -> usize {
        self.col_max - self.col_min + 1
    }
}

impl BinaryImage {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Self {
        assert_eq!(data.len(), height * width, "binary image size mismatch");
        Self { height, width, data }
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self::new(height, width, vec![false; height * width])
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn bbox(&self) -> Option<BBox> {
        let mut b: Option<BBox> = None;
        for (i, _) in self.data.iter().enumerate().filter(|(_, &v)| v) {
            let (r, c) = (i / self.width, i % self.width);
            let here = BBox { row_min: r, row_max: r, col_min: c, col_max: c };
            b = Some(b.map_or(here, |b| b.union(here)));
        }
        b
    }

    pub fn complement(&self) -> Self {
        Self::new(self.height, self.width, self.data.iter().map(|v| !v).collect())
    }

    fn on_border(&self, i: usize) -> bool {
        let (r, c) = (i / self.width, i % self.width);
        r == 0 || c == 0 || r + 1 == self.height || c + 1 == self.width
    }

    /// Intersection over union; 1 when both are empty.
    pub fn iou(&self, other: &BinaryImage) -> f64 {
        let (mut inter, mut union) = (0usize, 0usize);
        for (&a, &b) in self.data.iter().zip(&other.data) {
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }
}

/// One-dimensional squared distance transform of a sampled function.
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let inter = |q: usize, p: usize| {
        ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * q as f64 - 2.0 * p as f64)
    };
    for q in 1..n {
        if f[q].is_infinite() {
            continue;
        }
        if f[v[k]].is_infinite() {
            v[k] = q;
            continue;
        }
        let mut s = inter(q, v[k]);
        while s <= z[k] {
            k -= 1;
            s = inter(q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    if f[v[0]].is_infinite() {
        out.fill(f64::INFINITY);
        return;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Exact squared Euclidean distance from every pixel to the nearest set pixel.
pub fn squared_distance(img: &BinaryImage) -> Vec<f64> {
    let (h, w) = (img.height, img.width);
    let mut grid: Vec<f64> = img.data.iter().map(|&v| if v { 0.0 } else { f64::INFINITY }).collect();
    let n = h.max(w);
    let (mut col, mut out) = (vec![0.0; n], vec![0.0; n]);
    let (mut v, mut z) = (vec![0usize; n], vec![0.0; n + 1]);
    for c in 0..w {
        for r in 0..h {
            col[r] = grid[r * w + c];
        }
        edt_1d(&col[..h], &mut out[..h], &mut v, &mut z);
        for r in 0..h {
            grid[r * w + c] = out[r];
        }
    }
    for r in 0..h {
        col[..w].copy_from_slice(&grid[r * w..(r + 1) * w]);
        edt_1d(&col[..w], &mut out[..w], &mut v, &mut z);
        grid[r * w..(r + 1) * w].copy_from_slice(&out[..w]);
    }
    grid
}

/// Dilation by the digital disk of `radius`, clipped to the image.
///
/// Each row is first dilated horizontally by every half-width the disk uses;
/// output rows are then unions of those, skipping empty source rows.
pub fn dilate(img: &BinaryImage, radius: usize) -> BinaryImage {
    let (h, w) = (img.height, img.width);
    if radius == 0 || h == 0 || w == 0 {
        return img.clone();
    }
    let reach: Vec<usize> = (0..=radius).map(|dy| isqrt(radius * radius - dy * dy)).collect();
    let mut widths = reach.clone();
    widths.dedup();
    let slot = |half: usize| widths.iter().position(|&x| x == half).expect("listed width");
    // spans[r][k]: row r dilated horizontally by widths[k]; None for empty rows.
    let mut prefix = vec![0u32; w + 1];
    let spans: Vec<Option<Vec<Vec<u8>>>> = (0..h)
        .map(|r| {
            let row = &img.data[r * w..(r + 1) * w];
            if !row.contains(&true) {
                return None;
            }
            for c in 0..w {
                prefix[c + 1] = prefix[c] + row[c] as u32;
            }
            Some(
                widths
                    .iter()
                    .map(|&half| {
                        (0..w).map(|c| (prefix[(c + half + 1).min(w)] > prefix[c.saturating_sub(half)]) as u8).collect()
                    })
                    .collect(),
            )
        })
        .collect();
    let slots: Vec<usize> = reach.iter().map(|&half| slot(half)).collect();
    let mut out = vec![false; h * w];
    let mut acc = vec![0u8; w];
    for r in 0..h {
        acc.fill(0);
        let mut any = false;
        for rr in r.saturating_sub(radius)..=(r + radius).min(h - 1) {
            if let Some(rows) = &spans[rr] {
                any = true;
                for (a, &b) in acc.iter_mut().zip(&rows[slots[rr.abs_diff(r)]]) {
                    *a |= b;
                }
            }
        }
        if any {
            for (o, &a) in out[r * w..(r + 1) * w].iter_mut().zip(&acc) {
                *o = a != 0;
            }
        }
    }
    BinaryImage::new(h, w, out)
}

fn isqrt(n: usize) -> usize {
    let mut x = (n as f64).sqrt() as usize;
    while x * x > n {
        x -= 1;
    }
    while (x + 1) * (x + 1) <= n {
        x += 1;
    }
    x
}

/// Erosion by the same disk; pixels outside the image are ignored.
pub fn erode(img: &BinaryImage, radius: usize) -> BinaryImage {
    dilate(&img.complement(), radius).complement()
}

pub fn close(img: &BinaryImage, radius: usize) -> BinaryImage {
    erode(&dilate(img, radius), radius)
}

/// Connected-component labelling; label 0 is unset, components are numbered from 1.
#[derive(Debug, Clone)]
pub struct Components {
    pub labels: Vec<u32>,
    /// Pixel count of component `i + 1`.
    pub sizes: Vec<usize>,
    pub touches_border: Vec<bool>,
}

/// Labels pixels equal to `value`, 8-connected when `eight` else 4-connected.
pub fn components(img: &BinaryImage, value: bool, eight: bool) -> Components {
    let (h, w) = (img.height, img.width);
    let mut labels = vec![0u32; h * w];
    let mut sizes = Vec::new();
    let mut touches = Vec::new();
    let mut stack = Vec::new();
    let neighbours: &[(isize, isize)] = if eight {
        &[(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]
    } else {
        &[(-1, 0), (0, -1), (0, 1), (1, 0)]
    };
    for start in 0..h * w {
        if img.data[start] != value || labels[start] != 0 {
            continue;
        }
        let id = sizes.len() as u32 + 1;
        let (mut size, mut border) = (0usize, false);
        labels[start] = id;
        stack.push(start);
        while let Some(i) = stack.pop() {
            size += 1;
            border |= img.on_border(i);
            let (r, c) = ((i / w) as isize, (i % w) as isize);
            for &(dr, dc) in neighbours {
                let (nr, nc) = (r + dr, c + dc);
                if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                    continue;
                }
                let j = nr as usize * w + nc as usize;
                if img.data[j] == value && labels[j] == 0 {
                    labels[j] = id;
                    stack.push(j);
                }
            }
        }
        sizes.push(size);
        touches.push(border);
    }
    Components { labels, sizes, touches_border: touches }
}

/// Sets every background region that does not reach the border (4-connected).
pub fn fill_holes(img: &BinaryImage) -> BinaryImage {
    let comps = components(img, false, false);
    let data = img
        .data
        .iter()
        .zip(&comps.labels)
        .map(|(&v, &l)| v || (l != 0 && !comps.touches_border[l as usize - 1]))
        .collect();
    BinaryImage::new(img.height, img.width, data)
}
