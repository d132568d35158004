//! Information-flow metrics over captured attention maps and KL comparisons
//! between token-selection vectors.
//!
//! All entropies use the natural logarithm. Per-image values are computed per
//! block and head, averaged over images with a running sum in f64, and only
//! then averaged over heads to give the per-block value.

use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Real;
use crate::vit::AttentionTensor;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("attention has no [cls] token")]
    NoCls,
    #[error("attention row {row} has zero mass over the patch tokens")]
    ZeroMass { row: usize },
    #[error("attention row has a negative entry")]
    Negative,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("sequence has no patch tokens")]
    NoPatches,
    #[error("attention shape {got:?} differs from earlier images {expected:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("weights are not a probability vector (sum {0})")]
    NotSimplex(f64),
}

pub type MetricsResult<T> = Result<T, MetricsError>;

/// Shannon entropy (nats) of `row[range]` after renormalizing it to sum 1.
/// `0 · ln 0` is taken as 0.
pub fn row_entropy<T: Real>(row: &[T], range: Range<usize>) -> MetricsResult<f64> {
    let slice = &row[range];
    if slice.iter().any(|x| x.as_f64() < 0.0) {
        return Err(MetricsError::Negative);
    }
    let mass: f64 = slice.iter().map(|x| x.as_f64()).sum();
    if mass <= 0.0 {
        return Err(MetricsError::ZeroMass { row: 0 });
    }
    Ok(slice
        .iter()
        .map(|x| x.as_f64() / mass)
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowMetric {
    /// `a[0,0]`: attention of `[cls]` to itself.
    ClsSelfAttention,
    /// Entropy of the `[cls]` row over patch targets.
    ClsPatchEntropy,
    /// `a[i,i] / Σ_j a[i,j]` over patch targets, averaged over patches.
    PatchSelfAttentionRatio,
    /// Entropy of each patch row over patch targets, averaged over patches.
    PatchPatchEntropy,
}

impl FlowMetric {
    pub const ALL: [FlowMetric; 4] = [
        FlowMetric::ClsSelfAttention,
        FlowMetric::ClsPatchEntropy,
        FlowMetric::PatchSelfAttentionRatio,
        FlowMetric::PatchPatchEntropy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FlowMetric::ClsSelfAttention => "cls_self_attention",
            FlowMetric::ClsPatchEntropy => "cls_patch_entropy",
            FlowMetric::PatchSelfAttentionRatio => "patch_self_attention_ratio",
            FlowMetric::PatchPatchEntropy => "patch_patch_entropy",
        }
    }

    pub fn needs_cls(self) -> bool {
        matches!(
            self,
            FlowMetric::ClsSelfAttention | FlowMetric::ClsPatchEntropy
        )
    }

    /// Value for one head's `T×T` map.
    fn head_value(self, attn: &AttentionTensor, block: usize, head: usize) -> MetricsResult<f64> {
        let off = attn.patch_offset();
        let t = attn.tokens();
        let n = t - off;
        if self.needs_cls() && !attn.has_cls {
            return Err(MetricsError::NoCls);
        }
        if n == 0 {
            return Err(MetricsError::NoPatches);
        }
        match self {
            FlowMetric::ClsSelfAttention => Ok(attn.row(block, head, 0)[0] as f64),
            FlowMetric::ClsPatchEntropy => row_entropy(attn.row(block, head, 0), off..t),
            FlowMetric::PatchSelfAttentionRatio => {
                let mut total = 0.0;
                for i in off..t {
                    let row = attn.row(block, head, i);
                    let mass: f64 = row[off..].iter().map(|&x| x as f64).sum();
                    if mass <= 0.0 {
                        return Err(MetricsError::ZeroMass { row: i });
                    }
                    total += row[i] as f64 / mass;
                }
                Ok(total / n as f64)
            }
            FlowMetric::PatchPatchEntropy => {
                let mut total = 0.0;
                for i in off..t {
                    total +=
                        row_entropy(attn.row(block, head, i), off..t).map_err(|e| match e {
                            MetricsError::ZeroMass { .. } => MetricsError::ZeroMass { row: i },
                            e => e,
                        })?;
                }
                Ok(total / n as f64)
            }
        }
    }

    /// `[blocks][heads]` values for a single image.
    pub fn per_head(self, attn: &AttentionTensor) -> MetricsResult<Vec<Vec<f64>>> {
        (0..attn.blocks())
            .map(|b| {
                (0..attn.heads())
                    .map(|h| self.head_value(attn, b, h))
                    .collect()
            })
            .collect()
    }
}

/// Dataset-level, per-block summary of one metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockMetricSeries {
    pub metric: String,
    /// Per-block mean over heads of the image-averaged head values.
    pub values: Vec<f64>,
    /// `[block][head]` image-averaged values.
    pub per_head: Vec<Vec<f64>>,
    pub n_images: usize,
}

/// Running per-block/per-head sums; `merge` is associative, and images are
/// always folded in the order they are added.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricAccumulator {
    metric: FlowMetric,
    sums: Vec<Vec<f64>>,
    count: usize,
}

impl MetricAccumulator {
    pub fn new(metric: FlowMetric) -> Self {
        Self {
            metric,
            sums: Vec::new(),
            count: 0,
        }
    }

    pub fn add_values(&mut self, values: &[Vec<f64>]) -> MetricsResult<()> {
        if self.count == 0 {
            self.sums = values.iter().map(|r| vec![0.0; r.len()]).collect();
        } else if self.sums.len() != values.len()
            || self
                .sums
                .iter()
                .zip(values)
                .any(|(a, b)| a.len() != b.len())
        {
            return Err(MetricsError::ShapeMismatch {
                expected: vec![self.sums.len(), self.sums.first().map_or(0, Vec::len)],
                got: vec![values.len(), values.first().map_or(0, Vec::len)],
            });
        }
        for (s, v) in self.sums.iter_mut().zip(values) {
            for (a, b) in s.iter_mut().zip(v) {
                *a += b;
            }
        }
        self.count += 1;
        Ok(())
    }

    pub fn add_image(&mut self, attn: &AttentionTensor) -> MetricsResult<()> {
        let v = self.metric.per_head(attn)?;
        self.add_values(&v)
    }

    pub fn merge(&mut self, other: &MetricAccumulator) -> MetricsResult<()> {
        if other.count == 0 {
            return Ok(());
        }
        if self.count == 0 {
            *self = other.clone();
            return Ok(());
        }
        let count = self.count + other.count;
        self.add_values(&other.sums)?;
        self.count = count;
        Ok(())
    }

    pub fn finish(&self) -> MetricsResult<BlockMetricSeries> {
        if self.count == 0 {
            return Err(MetricsError::EmptyDataset);
        }
        let n = self.count as f64;
        let per_head: Vec<Vec<f64>> = self
            .sums
            .iter()
            .map(|r| r.iter().map(|s| s / n).collect())
            .collect();
        let values = per_head
            .iter()
            .map(|r| {
                if r.is_empty() {
                    0.0
                } else {
                    r.iter().sum::<f64>() / r.len() as f64
                }
            })
            .collect();
        Ok(BlockMetricSeries {
            metric: self.metric.name().to_string(),
            values,
            per_head,
            n_images: self.count,
        })
    }
}

/// Evaluates `metrics` over a dataset. Per-image work runs in parallel; sums
/// are folded in image order so the result does not depend on thread count.
pub fn flow_metrics(
    images: &[AttentionTensor],
    metrics: &[FlowMetric],
) -> MetricsResult<Vec<BlockMetricSeries>> {
    if images.is_empty() {
        return Err(MetricsError::EmptyDataset);
    }
    let first = images[0].maps.dims();
    if let Some(bad) = images
        .iter()
        .find(|a| a.maps.dims() != first || a.has_cls != images[0].has_cls)
    {
        return Err(MetricsError::ShapeMismatch {
            expected: first.to_vec(),
            got: bad.maps.dims().to_vec(),
        });
    }
    let per_image: Vec<Vec<Vec<Vec<f64>>>> = images
        .par_iter()
        .map(|a| {
            metrics
                .iter()
                .map(|m| m.per_head(a))
                .collect::<MetricsResult<Vec<_>>>()
        })
        .collect::<MetricsResult<_>>()?;
    metrics
        .iter()
        .enumerate()
        .map(|(k, &m)| {
            let mut acc = MetricAccumulator::new(m);
            for img in &per_image {
                acc.add_values(&img[k])?;
            }
            acc.finish()
        })
        .collect()
}

pub fn cls_self_attention(images: &[AttentionTensor]) -> MetricsResult<BlockMetricSeries> {
    Ok(flow_metrics(images, &[FlowMetric::ClsSelfAttention])?.remove(0))
}

pub fn cls_patch_entropy(images: &[AttentionTensor]) -> MetricsResult<BlockMetricSeries> {
    Ok(flow_metrics(images, &[FlowMetric::ClsPatchEntropy])?.remove(0))
}

pub fn patch_self_attention_ratio(images: &[AttentionTensor]) -> MetricsResult<BlockMetricSeries> {
    Ok(flow_metrics(images, &[FlowMetric::PatchSelfAttentionRatio])?.remove(0))
}

pub fn patch_patch_entropy(images: &[AttentionTensor]) -> MetricsResult<BlockMetricSeries> {
    Ok(flow_metrics(images, &[FlowMetric::PatchPatchEntropy])?.remove(0))
}

/// A probability vector over tokens, tagged with the selector that made it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionVector {
    pub weights: Vec<f64>,
    pub source: String,
}

impl SelectionVector {
    /// Accepts `weights` only if already non-negative and summing to 1 ± 1e-6.
    pub fn new(weights: Vec<f64>, source: impl Into<String>) -> MetricsResult<Self> {
        if weights.iter().any(|&w| w < 0.0 || !w.is_finite()) {
            return Err(MetricsError::Negative);
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(MetricsError::NotSimplex(sum));
        }
        Ok(Self {
            weights,
            source: source.into(),
        })
    }

    /// Renormalizes non-negative scores to the simplex.
    pub fn from_scores(scores: &[f64], source: impl Into<String>) -> MetricsResult<Self> {
        if scores.iter().any(|&w| w < 0.0 || !w.is_finite()) {
            return Err(MetricsError::Negative);
        }
        let sum: f64 = scores.iter().sum();
        if sum <= 0.0 {
            return Err(MetricsError::ZeroMass { row: 0 });
        }
        Ok(Self {
            weights: scores.iter().map(|w| w / sum).collect(),
            source: source.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn entropy(&self) -> f64 {
        row_entropy(&self.weights, 0..self.weights.len()).unwrap_or(0.0)
    }
}

/// `KL(p ‖ q)` with `eps` added to `q` before both are renormalized.
pub fn kld(p: &SelectionVector, q: &SelectionVector, eps: f64) -> MetricsResult<f64> {
    if p.len() != q.len() {
        return Err(MetricsError::LengthMismatch(p.len(), q.len()));
    }
    let ps: f64 = p.weights.iter().sum();
    let qs: f64 = q.weights.iter().map(|x| x + eps).sum();
    if ps <= 0.0 || qs <= 0.0 {
        return Err(MetricsError::ZeroMass { row: 0 });
    }
    let mut total = 0.0;
    for (&pi, &qi) in p.weights.iter().zip(&q.weights) {
        let pn = pi / ps;
        if pn > 0.0 {
            total += pn * (pn / ((qi + eps) / qs)).ln();
        }
    }
    Ok(total.max(0.0))
}

pub const DEFAULT_KLD_EPS: f64 = 1e-8;

/// Mean pairwise KL divergence between selectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KldMatrix {
    pub selectors: Vec<String>,
    /// `values[i][j]` is the dataset mean of `KL(s_i ‖ s_j)`.
    pub values: Vec<Vec<f64>>,
    pub n_images: usize,
}

/// `selectors[s][image]` holds selector `s`'s vector for each image.
pub fn selector_kld_matrix(
    names: &[String],
    selectors: &[Vec<SelectionVector>],
    eps: f64,
) -> MetricsResult<KldMatrix> {
    if names.len() != selectors.len() {
        return Err(MetricsError::LengthMismatch(names.len(), selectors.len()));
    }
    let n_images = selectors.first().map_or(0, Vec::len);
    if n_images == 0 {
        return Err(MetricsError::EmptyDataset);
    }
    if let Some(bad) = selectors.iter().find(|s| s.len() != n_images) {
        return Err(MetricsError::LengthMismatch(n_images, bad.len()));
    }
    let s = selectors.len();
    let mut values = vec![vec![0.0; s]; s];
    for (i, row) in values.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            let mut sum = 0.0;
            for (p, q) in selectors[i].iter().zip(&selectors[j]).take(n_images) {
                sum += kld(p, q, eps)?;
            }
            *cell = sum / n_images as f64;
        }
    }
    Ok(KldMatrix {
        selectors: names.to_vec(),
        values,
        n_images,
    })
}
