//! Score maps to boxes, and MaxBoxAccV2 over a set of images.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LocalizationError {
    #[error("{got} weights do not fill a {rows}x{cols} grid")]
    SizeMismatch {
        rows: usize,
        cols: usize,
        got: usize,
    },
    #[error("output size {0}x{1} must be positive")]
    EmptyOutput(usize, usize),
    #[error("non-finite score in heatmap input")]
    NonFinite,
    #[error("no images to score")]
    EmptyDataset,
    #[error("image {0} has no ground-truth box")]
    MissingGroundTruth(usize),
    #[error("threshold and IoU grids must be non-empty")]
    EmptyGrid,
    #[error("invalid box [{0}, {1}, {2}, {3}]")]
    InvalidBox(f64, f64, f64, f64),
}

pub type LocalizationResult<T> = Result<T, LocalizationError>;

/// Min-max normalized map. A constant input is flagged `degenerate` and
/// stored as all zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub values: Vec<f64>,
    pub height: usize,
    pub width: usize,
    pub degenerate: bool,
}

impl Heatmap {
    /// Min-max normalizes raw `height×width` values.
    pub fn from_raw(values: Vec<f64>, height: usize, width: usize) -> LocalizationResult<Self> {
        if height == 0 || width == 0 {
            return Err(LocalizationError::EmptyOutput(height, width));
        }
        if values.len() != height * width {
            return Err(LocalizationError::SizeMismatch {
                rows: height,
                cols: width,
                got: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(LocalizationError::NonFinite);
        }
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let range = hi - lo;
        if range <= 0.0 {
            return Ok(Self {
                values: vec![0.0; values.len()],
                height,
                width,
                degenerate: true,
            });
        }
        Ok(Self {
            values: values.into_iter().map(|v| (v - lo) / range).collect(),
            height,
            width,
            degenerate: false,
        })
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }
}

/// Pixel box `[x0, x1) × [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BoundingBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> LocalizationResult<Self> {
        if !(x0 < x1 && y0 < y1) || [x0, y0, x1, y1].iter().any(|v| !v.is_finite()) {
            return Err(LocalizationError::InvalidBox(x0, y0, x1, y1));
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    pub fn from_array(b: [f64; 4]) -> LocalizationResult<Self> {
        Self::new(b[0], b[1], b[2], b[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }

    pub fn area(&self) -> f64 {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }
}

pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let w = (a.x1.min(b.x1) - a.x0.max(b.x0)).max(0.0);
    let h = (a.y1.min(b.y1) - a.y0.max(b.y0)).max(0.0);
    let inter = w * h;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Source coordinate for output index `i` under half-pixel-center alignment.
fn source_coord(i: usize, input: usize, output: usize) -> (usize, usize, f64) {
    let scale = input as f64 / output as f64;
    let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(input - 1);
    let i1 = (i0 + 1).min(input - 1);
    (i0, i1, src - i0 as f64)
}

/// Bilinear resize of a `rows×cols` grid to `height×width`, with pixel
/// centers aligned (no corner alignment) and edge clamping.
pub fn bilinear_upsample(
    grid: &[f64],
    rows: usize,
    cols: usize,
    height: usize,
    width: usize,
) -> LocalizationResult<Vec<f64>> {
    if grid.len() != rows * cols || rows == 0 || cols == 0 {
        return Err(LocalizationError::SizeMismatch {
            rows,
            cols,
            got: grid.len(),
        });
    }
    if height == 0 || width == 0 {
        return Err(LocalizationError::EmptyOutput(height, width));
    }
    let xs: Vec<_> = (0..width).map(|x| source_coord(x, cols, width)).collect();
    let mut out = Vec::with_capacity(height * width);
    for y in 0..height {
        let (r0, r1, fy) = source_coord(y, rows, height);
        for &(c0, c1, fx) in &xs {
            let top = grid[r0 * cols + c0] * (1.0 - fx) + grid[r0 * cols + c1] * fx;
            let bottom = grid[r1 * cols + c0] * (1.0 - fx) + grid[r1 * cols + c1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    Ok(out)
}

/// Patch weights → upsampled, min-max normalized heatmap.
pub fn scores_to_heatmap(
    weights: &[f64],
    rows: usize,
    cols: usize,
    height: usize,
    width: usize,
) -> LocalizationResult<Heatmap> {
    if weights.iter().any(|v| !v.is_finite()) {
        return Err(LocalizationError::NonFinite);
    }
    let up = bilinear_upsample(weights, rows, cols, height, width)?;
    Heatmap::from_raw(up, height, width)
}

/// Tight box around the largest 4-connected component of `h ≥ tau`. Equal
/// sizes go to the component met first in row-major order. Degenerate maps
/// never produce a box.
pub fn threshold_to_box(h: &Heatmap, tau: f64) -> Option<BoundingBox> {
    if h.degenerate {
        return None;
    }
    let (hh, ww) = (h.height, h.width);
    let mut seen = vec![false; hh * ww];
    let mut best: Option<(usize, [usize; 4])> = None;
    let mut stack = Vec::new();
    for start in 0..hh * ww {
        if seen[start] || h.values[start] < tau {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut size = 0;
        let mut bb = [usize::MAX, usize::MAX, 0, 0];
        while let Some(p) = stack.pop() {
            let (y, x) = (p / ww, p % ww);
            size += 1;
            bb = [
                bb[0].min(x),
                bb[1].min(y),
                bb[2].max(x + 1),
                bb[3].max(y + 1),
            ];
            let mut visit = |q: usize| {
                if !seen[q] && h.values[q] >= tau {
                    seen[q] = true;
                    stack.push(q);
                }
            };
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < ww {
                visit(p + 1);
            }
            if y > 0 {
                visit(p - ww);
            }
            if y + 1 < hh {
                visit(p + ww);
            }
        }
        if best.is_none_or(|(s, _)| size > s) {
            best = Some((size, bb));
        }
    }
    best.map(|(_, b)| BoundingBox {
        x0: b[0] as f64,
        y0: b[1] as f64,
        x1: b[2] as f64,
        y1: b[3] as f64,
    })
}

/// `0.00, 0.05, …, 0.95`.
pub fn default_thresholds() -> Vec<f64> {
    (0..20).map(|i| i as f64 * 0.05).collect()
}

pub fn default_iou_levels() -> Vec<f64> {
    vec![0.3, 0.5, 0.7]
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationItem {
    pub heatmap: Heatmap,
    pub gt_boxes: Vec<BoundingBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaResult {
    pub delta: f64,
    pub max_box_acc: f64,
    pub best_tau: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxAccReport {
    pub thresholds: Vec<f64>,
    pub deltas: Vec<f64>,
    /// `hits[t][d]`: images whose best IoU at threshold `t` reaches level `d`.
    pub hits: Vec<Vec<usize>>,
    pub n_images: usize,
    pub per_delta: Vec<DeltaResult>,
    /// Mean over IoU levels of the best box accuracy, in percent.
    pub score: f64,
    /// Per image, per threshold: best IoU against any ground-truth box
    /// (0 when no box is produced).
    pub best_iou: Vec<Vec<f64>>,
}

impl BoxAccReport {
    /// `BoxAcc(τ, δ)` as a fraction.
    pub fn box_acc(&self, t: usize, d: usize) -> f64 {
        self.hits[t][d] as f64 / self.n_images as f64
    }

    /// Threshold index maximizing the mean accuracy over IoU levels.
    pub fn best_threshold(&self) -> usize {
        let mut best = 0;
        let total = |t: usize| self.hits[t].iter().sum::<usize>();
        for t in 1..self.thresholds.len() {
            if total(t) > total(best) {
                best = t;
            }
        }
        best
    }
}

/// Best IoU of the box at each threshold against the image's ground truth.
pub fn image_ious(item: &LocalizationItem, thresholds: &[f64]) -> Vec<f64> {
    thresholds
        .iter()
        .map(|&tau| match threshold_to_box(&item.heatmap, tau) {
            Some(b) => item.gt_boxes.iter().map(|g| iou(&b, g)).fold(0.0, f64::max),
            None => 0.0,
        })
        .collect()
}

pub fn max_box_acc_v2(
    items: &[LocalizationItem],
    thresholds: &[f64],
    deltas: &[f64],
) -> LocalizationResult<BoxAccReport> {
    if items.is_empty() {
        return Err(LocalizationError::EmptyDataset);
    }
    if thresholds.is_empty() || deltas.is_empty() {
        return Err(LocalizationError::EmptyGrid);
    }
    if let Some(i) = items.iter().position(|it| it.gt_boxes.is_empty()) {
        return Err(LocalizationError::MissingGroundTruth(i));
    }
    let best_iou: Vec<Vec<f64>> = items
        .par_iter()
        .map(|it| image_ious(it, thresholds))
        .collect();
    let mut hits = vec![vec![0usize; deltas.len()]; thresholds.len()];
    for ious in &best_iou {
        for (t, &v) in ious.iter().enumerate() {
            for (d, &delta) in deltas.iter().enumerate() {
                hits[t][d] += usize::from(v >= delta);
            }
        }
    }
    let n = items.len();
    let per_delta: Vec<DeltaResult> = deltas
        .iter()
        .enumerate()
        .map(|(d, &delta)| {
            let mut bt = 0;
            for t in 1..thresholds.len() {
                if hits[t][d] > hits[bt][d] {
                    bt = t;
                }
            }
            DeltaResult {
                delta,
                max_box_acc: hits[bt][d] as f64 / n as f64,
                best_tau: thresholds[bt],
            }
        })
        .collect();
    let score = per_delta.iter().map(|r| r.max_box_acc).sum::<f64>() / deltas.len() as f64 * 100.0;
    Ok(BoxAccReport {
        thresholds: thresholds.to_vec(),
        deltas: deltas.to_vec(),
        hits,
        n_images: n,
        per_delta,
        score,
        best_iou,
    })
}
