//! Joint training of the aggregation score model and a linear classifier on
//! frozen token features.
//!
//! Gradients are analytic. Per-example work is spread over fixed-size chunks,
//! each summed serially and then reduced in chunk order, so the result does
//! not depend on the number of worker threads.

use std::ops::Range;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregation::{AggregationError, AggregatorMode, Dense, ScoreModel, ScoreModelSpec};
use crate::metrics::{MetricsError, SelectionVector};
use crate::rng::RngStream;
use crate::tensor::{self, rand_normal, Real, Tensor, TensorError};
use crate::vit::TokenSequence;

/// Examples per gradient chunk. Fixed so reductions never depend on threads.
const CHUNK: usize = 16;
const STD_FLOOR: f64 = 1e-6;
const SCORE_STREAM: u64 = 1 << 32;
const CLASSIFIER_STREAM: u64 = 2 << 32;
const SHUFFLE_STREAM: u64 = 3 << 32;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProbeError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("label {label} of sample `{id}` is out of range for {classes} classes")]
    LabelOutOfRange {
        id: String,
        label: usize,
        classes: usize,
    },
    #[error("sample `{id}` has token dim {got}, probe expects {expected}")]
    DimMismatch {
        id: String,
        expected: usize,
        got: usize,
    },
    #[error("mode {mode} needs a [cls] token but sample `{id}` has none")]
    NoCls { id: String, mode: AggregatorMode },
    #[error("mode {mode} needs precomputed selection weights; sample `{id}` has none")]
    MissingWeights { id: String, mode: AggregatorMode },
    #[error("sample `{id}` carries {got} selection weights for {expected} patches")]
    WeightLength {
        id: String,
        expected: usize,
        got: usize,
    },
    #[error("mode {0} needs a score model")]
    MissingScoreModel(AggregatorMode),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("warmup ({warmup}) exceeds total steps ({total})")]
    Warmup { warmup: usize, total: usize },
    #[error("step {step} is past the end of the schedule ({total})")]
    StepOutOfRange { step: usize, total: usize },
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("parameter and gradient lists disagree at tensor {0}")]
    ShapeMismatch(usize),
    #[error("probe bundle is missing tensor `{0}`")]
    MissingTensor(String),
    #[error(transparent)]
    Aggregation(#[from] AggregationError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type ProbeResult<T> = Result<T, ProbeError>;

/// One labelled bag of frozen tokens. `fixed_weights` holds a patch-level
/// selection for the non-trainable selector modes.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample<T = f32> {
    pub id: String,
    pub tokens: TokenSequence<T>,
    pub label: usize,
    pub fixed_weights: Option<Vec<T>>,
}

/// Per-dimension mean/std of the training tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardization<T = f32> {
    pub mean: Vec<T>,
    pub std: Vec<T>,
}

impl<T: Real> Standardization<T> {
    /// Statistics over every token row of `samples`, accumulated in `f64` in
    /// iteration order. The std is floored at 1e-6.
    pub fn fit<'a>(samples: impl IntoIterator<Item = &'a Sample<T>>) -> ProbeResult<Self>
    where
        T: 'a,
    {
        let mut samples = samples.into_iter().peekable();
        let d = samples.peek().ok_or(ProbeError::EmptyDataset)?.tokens.dim();
        let mut sum = vec![0.0f64; d];
        let mut sq = vec![0.0f64; d];
        let mut n = 0usize;
        for s in samples {
            check_dim(s, d)?;
            for r in 0..s.tokens.rows() {
                for (j, &x) in s.tokens.tokens.row(r).iter().enumerate() {
                    let x = x.as_f64();
                    sum[j] += x;
                    sq[j] += x * x;
                }
                n += 1;
            }
        }
        let n = n as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / n - m * m).max(0.0).sqrt().max(STD_FLOOR))
            .collect::<Vec<_>>();
        Ok(Self {
            mean: mean.into_iter().map(T::from_f64_lossy).collect(),
            std: std.into_iter().map(T::from_f64_lossy).collect(),
        })
    }

    pub fn apply_row(&self, row: &[T], out: &mut [T]) {
        for (((o, &x), &m), &s) in out.iter_mut().zip(row).zip(&self.mean).zip(&self.std) {
            *o = (x - m) / s;
        }
    }

    pub fn cast<U: Real>(&self) -> Standardization<U> {
        Standardization {
            mean: self
                .mean
                .iter()
                .map(|x| U::from_f64_lossy(x.as_f64()))
                .collect(),
            std: self
                .std
                .iter()
                .map(|x| U::from_f64_lossy(x.as_f64()))
                .collect(),
        }
    }
}

/// Score model (AbMILP modes only), `D×K` classifier and optional
/// standardization applied to tokens before anything else sees them.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeParams<T = f32> {
    pub score: Option<ScoreModel<T>>,
    pub classifier: Dense<T>,
    pub standardization: Option<Standardization<T>>,
}

impl<T: Real> ProbeParams<T> {
    /// Classifier weights `N(0, 0.01²)`, zero biases; see [`ScoreModel::init`].
    pub fn init(
        dim: usize,
        classes: usize,
        score: Option<&ScoreModelSpec>,
        seed: u64,
    ) -> ProbeResult<Self> {
        let score = score
            .map(|s| ScoreModel::init(s, dim, &RngStream::new(seed, SCORE_STREAM)))
            .transpose()?;
        let weight = rand_normal(vec![dim, classes], &RngStream::new(seed, CLASSIFIER_STREAM))
            .map(|x| T::from_f64_lossy(x as f64 * 0.01));
        Ok(Self {
            score,
            classifier: Dense {
                weight,
                bias: Tensor::zeros(vec![classes]),
            },
            standardization: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.classifier.input_dim()
    }

    pub fn classes(&self) -> usize {
        self.classifier.output_dim()
    }

    /// Names of the trainable tensors, in gradient order.
    pub fn names(&self) -> Vec<String> {
        let mut names = Vec::new();
        if let Some(t) = &self.score {
            for l in 0..t.layers.len() {
                names.push(format!("score.{l}.weight"));
                names.push(format!("score.{l}.bias"));
            }
        }
        names.push("classifier.weight".into());
        names.push("classifier.bias".into());
        names
    }

    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut out = Vec::new();
        if let Some(t) = &self.score {
            for layer in &t.layers {
                out.push(&layer.weight);
                out.push(&layer.bias);
            }
        }
        out.push(&self.classifier.weight);
        out.push(&self.classifier.bias);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        if let Some(t) = &mut self.score {
            for layer in &mut t.layers {
                out.push(&mut layer.weight);
                out.push(&mut layer.bias);
            }
        }
        out.push(&mut self.classifier.weight);
        out.push(&mut self.classifier.bias);
        out
    }

    pub fn zero_grads(&self) -> Vec<Tensor<T>> {
        self.tensors()
            .iter()
            .map(|t| Tensor::zeros(t.dims().to_vec()))
            .collect()
    }

    pub fn num_trainable(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Every tensor including standardization statistics, for serialization.
    pub fn named_tensors(&self) -> Vec<(String, Tensor<T>)> {
        let mut out: Vec<(String, Tensor<T>)> = self
            .names()
            .into_iter()
            .zip(self.tensors().into_iter().cloned())
            .collect();
        if let Some(s) = &self.standardization {
            let d = s.mean.len();
            out.push((
                "standardization.mean".into(),
                Tensor::from_vec(vec![d], s.mean.clone()).expect("1-D"),
            ));
            out.push((
                "standardization.std".into(),
                Tensor::from_vec(vec![d], s.std.clone()).expect("1-D"),
            ));
        }
        out
    }

    /// Rebuilds a probe from named tensors. `depth` is the number of score
    /// layers (0 for none).
    pub fn from_named(
        depth: usize,
        activation: Option<crate::aggregation::Activation>,
        mut get: impl FnMut(&str) -> Option<Tensor<T>>,
    ) -> ProbeResult<Self> {
        let mut take =
            |name: &str| get(name).ok_or_else(|| ProbeError::MissingTensor(name.to_string()));
        let score = if depth > 0 {
            let layers = (0..depth)
                .map(|l| {
                    Ok(Dense {
                        weight: take(&format!("score.{l}.weight"))?,
                        bias: take(&format!("score.{l}.bias"))?,
                    })
                })
                .collect::<ProbeResult<Vec<_>>>()?;
            Some(ScoreModel { layers, activation })
        } else {
            None
        };
        let classifier = Dense {
            weight: take("classifier.weight")?,
            bias: take("classifier.bias")?,
        };
        let standardization = match (get("standardization.mean"), get("standardization.std")) {
            (Some(m), Some(s)) => Some(Standardization {
                mean: m.into_data(),
                std: s.into_data(),
            }),
            _ => None,
        };
        let probe = Self {
            score,
            classifier,
            standardization,
        };
        probe.validate()?;
        Ok(probe)
    }

    pub fn validate(&self) -> ProbeResult<()> {
        let d = self.dim();
        if self.classifier.bias.dims() != [self.classes()] {
            return Err(ProbeError::Config(
                "classifier bias does not match weight".into(),
            ));
        }
        if let Some(t) = &self.score {
            t.validate(d)?;
            for l in &t.layers {
                if l.bias.dims() != [l.output_dim()] {
                    return Err(ProbeError::Config(
                        "score layer bias does not match weight".into(),
                    ));
                }
            }
        }
        if let Some(s) = &self.standardization {
            if s.mean.len() != d || s.std.len() != d {
                return Err(ProbeError::Config(
                    "standardization length does not match dim".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ProbeParams<U> {
        ProbeParams {
            score: self.score.as_ref().map(ScoreModel::cast),
            classifier: self.classifier.cast(),
            standardization: self.standardization.as_ref().map(Standardization::cast),
        }
    }
}

/// Logits plus the selection weights used, over token rows
/// `offset..offset + weights.len()`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeOutput<T = f32> {
    pub logits: Vec<T>,
    pub weights: Vec<T>,
    pub offset: usize,
}

impl<T: Real> ProbeOutput<T> {
    pub fn selection(&self, mode: AggregatorMode) -> ProbeResult<SelectionVector> {
        Ok(SelectionVector::from_scores(
            &self.weights.iter().map(|w| w.as_f64()).collect::<Vec<_>>(),
            mode.name(),
        )?)
    }

    pub fn predicted(&self) -> usize {
        argmax(&self.logits)
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<T: Real>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

struct Trace<T> {
    /// Standardized included token rows.
    z: Tensor<T>,
    /// Inputs of each score layer (`acts[0] == z`).
    acts: Vec<Tensor<T>>,
    /// Pre-activations of each hidden score layer.
    pres: Vec<Tensor<T>>,
    weights: Vec<T>,
    offset: usize,
    z_agg: Vec<T>,
    logits: Vec<T>,
}

fn check_dim<T: Real>(s: &Sample<T>, d: usize) -> ProbeResult<()> {
    if s.tokens.dim() != d {
        return Err(ProbeError::DimMismatch {
            id: s.id.clone(),
            expected: d,
            got: s.tokens.dim(),
        });
    }
    Ok(())
}

fn included_rows<T: Real>(s: &Sample<T>, mode: AggregatorMode) -> ProbeResult<Range<usize>> {
    let rows = s.tokens.rows();
    if mode.requires_cls() && !s.tokens.has_cls {
        return Err(ProbeError::NoCls {
            id: s.id.clone(),
            mode,
        });
    }
    let range = match mode {
        AggregatorMode::Cls => 0..1,
        AggregatorMode::AbmilpWithCls => 0..rows,
        _ => s.tokens.patch_offset()..rows,
    };
    if range.is_empty() {
        return Err(AggregationError::NoPatches.into());
    }
    Ok(range)
}

fn trace<T: Real>(
    s: &Sample<T>,
    probe: &ProbeParams<T>,
    mode: AggregatorMode,
) -> ProbeResult<Trace<T>> {
    let d = probe.dim();
    check_dim(s, d)?;
    let range = included_rows(s, mode)?;
    let n = range.len();
    let mut z = Tensor::zeros(vec![n, d]);
    for (i, r) in range.clone().enumerate() {
        let row = s.tokens.tokens.row(r);
        match &probe.standardization {
            Some(st) => st.apply_row(row, z.row_mut(i)),
            None => z.row_mut(i).copy_from_slice(row),
        }
    }

    let mut acts = Vec::new();
    let mut pres = Vec::new();
    let weights = match mode {
        AggregatorMode::Cls => vec![T::one()],
        AggregatorMode::AvgPatches => vec![T::from_f64_lossy(1.0 / n as f64); n],
        AggregatorMode::AbmilpPatches | AggregatorMode::AbmilpWithCls => {
            let t = probe
                .score
                .as_ref()
                .ok_or(ProbeError::MissingScoreModel(mode))?;
            let last = t.layers.len() - 1;
            let mut h = z.clone();
            for (l, layer) in t.layers.iter().enumerate() {
                let pre = tensor::linear(&h, &layer.weight, Some(&layer.bias))?;
                acts.push(h);
                if l == last {
                    h = pre;
                } else {
                    let a = t
                        .activation
                        .ok_or(AggregationError::MissingActivation(t.layers.len()))?;
                    h = pre.map(|x| T::from_f64_lossy(a.apply(x.as_f64())));
                    pres.push(pre);
                }
            }
            tensor::softmax_slice(h.data())?
        }
        _ => {
            let w = s
                .fixed_weights
                .as_ref()
                .ok_or_else(|| ProbeError::MissingWeights {
                    id: s.id.clone(),
                    mode,
                })?;
            if w.len() != n {
                return Err(ProbeError::WeightLength {
                    id: s.id.clone(),
                    expected: n,
                    got: w.len(),
                });
            }
            w.clone()
        }
    };

    let mut z_agg = vec![T::zero(); d];
    for (i, &w) in weights.iter().enumerate() {
        for (a, &x) in z_agg.iter_mut().zip(z.row(i)) {
            *a = *a + w * x;
        }
    }
    let agg = Tensor::from_vec(vec![1, d], z_agg.clone())?;
    let logits =
        tensor::linear(&agg, &probe.classifier.weight, Some(&probe.classifier.bias))?.into_data();
    Ok(Trace {
        z,
        acts,
        pres,
        weights,
        offset: range.start,
        z_agg,
        logits,
    })
}

/// Logits and selection weights for one bag of tokens.
pub fn probe_forward<T: Real>(
    s: &Sample<T>,
    probe: &ProbeParams<T>,
    mode: AggregatorMode,
) -> ProbeResult<ProbeOutput<T>> {
    let t = trace(s, probe, mode)?;
    Ok(ProbeOutput {
        logits: t.logits,
        weights: t.weights,
        offset: t.offset,
    })
}

/// `−ln softmax(logits)[label]` via log-sum-exp in `f64`.
pub fn cross_entropy<T: Real>(logits: &[T], label: usize) -> ProbeResult<f64> {
    if label >= logits.len() {
        return Err(ProbeError::LabelOutOfRange {
            id: String::new(),
            label,
            classes: logits.len(),
        });
    }
    let max = logits
        .iter()
        .map(|x| x.as_f64())
        .fold(f64::NEG_INFINITY, f64::max);
    let lse = max
        + logits
            .iter()
            .map(|x| (x.as_f64() - max).exp())
            .sum::<f64>()
            .ln();
    let loss = lse - logits[label].as_f64();
    if !loss.is_finite() {
        return Err(ProbeError::NonFinite("cross entropy"));
    }
    Ok(loss)
}

fn softmax_f64<T: Real>(logits: &[T]) -> Vec<f64> {
    let max = logits
        .iter()
        .map(|x| x.as_f64())
        .fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|x| (x.as_f64() - max).exp()).collect();
    let sum: f64 = e.iter().sum();
    e.into_iter().map(|x| x / sum).collect()
}

fn accumulate<T: Real>(dst: &mut [T], src: impl IntoIterator<Item = T>) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

/// Adds the gradient of `dlogits·logits` w.r.t. every trainable tensor.
fn backward<T: Real>(
    tr: &Trace<T>,
    probe: &ProbeParams<T>,
    mode: AggregatorMode,
    dlogits: &[T],
    grads: &mut [Tensor<T>],
) {
    let k = dlogits.len();
    let d = tr.z_agg.len();
    let nc = grads.len();
    {
        let gw = grads[nc - 2].data_mut();
        for (i, &z) in tr.z_agg.iter().enumerate() {
            accumulate(&mut gw[i * k..(i + 1) * k], dlogits.iter().map(|&g| z * g));
        }
    }
    accumulate(grads[nc - 1].data_mut(), dlogits.iter().copied());

    if !mode.is_abmilp() {
        return;
    }
    let t = probe
        .score
        .as_ref()
        .expect("abmilp trace has a score model");
    let w = probe.classifier.weight.data();
    let dz: Vec<T> = (0..d)
        .map(|i| {
            w[i * k..(i + 1) * k]
                .iter()
                .zip(dlogits)
                .fold(T::zero(), |a, (&w, &g)| a + w * g)
        })
        .collect();
    let n = tr.weights.len();
    let ds: Vec<T> = (0..n)
        .map(|i| {
            tr.z.row(i)
                .iter()
                .zip(&dz)
                .fold(T::zero(), |a, (&x, &g)| a + x * g)
        })
        .collect();
    let dot = tr
        .weights
        .iter()
        .zip(&ds)
        .fold(T::zero(), |a, (&s, &g)| a + s * g);
    // Softmax Jacobian: du_i = s_i (ds_i − Σ_j s_j ds_j).
    let mut dy = Tensor::from_vec(
        vec![n, 1],
        tr.weights
            .iter()
            .zip(&ds)
            .map(|(&s, &g)| s * (g - dot))
            .collect(),
    )
    .expect("n×1");

    for l in (0..t.layers.len()).rev() {
        let x = &tr.acts[l];
        let (rows, fan_in) = x.shape2().expect("2-D");
        let fan_out = t.layers[l].output_dim();
        {
            let gw = grads[2 * l].data_mut();
            for r in 0..rows {
                let xr = x.row(r);
                let yr = dy.row(r);
                for (i, &xv) in xr.iter().enumerate() {
                    accumulate(
                        &mut gw[i * fan_out..(i + 1) * fan_out],
                        yr.iter().map(|&g| xv * g),
                    );
                }
            }
        }
        {
            let gb = grads[2 * l + 1].data_mut();
            for r in 0..rows {
                accumulate(gb, dy.row(r).iter().copied());
            }
        }
        if l == 0 {
            break;
        }
        let wl = t.layers[l].weight.data();
        let act = t.activation.expect("MLP has an activation");
        let pre = &tr.pres[l - 1];
        let mut dx = Tensor::zeros(vec![rows, fan_in]);
        for r in 0..rows {
            let yr = dy.row(r).to_vec();
            let pr = pre.row(r);
            for (i, o) in dx.row_mut(r).iter_mut().enumerate() {
                let g = wl[i * fan_out..(i + 1) * fan_out]
                    .iter()
                    .zip(&yr)
                    .fold(T::zero(), |a, (&w, &g)| a + w * g);
                *o = g * T::from_f64_lossy(act.derivative(pr[i].as_f64()));
            }
        }
        dy = dx;
    }
}

/// Mean cross-entropy over a batch, its gradient and the number of correct
/// predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchGrad<T> {
    pub loss: f64,
    pub grads: Vec<Tensor<T>>,
    pub correct: usize,
}

pub fn probe_backward<T: Real>(
    batch: &[&Sample<T>],
    probe: &ProbeParams<T>,
    mode: AggregatorMode,
) -> ProbeResult<BatchGrad<T>> {
    if batch.is_empty() {
        return Err(ProbeError::EmptyDataset);
    }
    let k = probe.classes();
    let inv = 1.0 / batch.len() as f64;
    let partials = batch
        .par_chunks(CHUNK)
        .map(|chunk| -> ProbeResult<(f64, Vec<Tensor<T>>, usize)> {
            let mut grads = probe.zero_grads();
            let mut loss = 0.0;
            let mut correct = 0;
            for s in chunk {
                if s.label >= k {
                    return Err(ProbeError::LabelOutOfRange {
                        id: s.id.clone(),
                        label: s.label,
                        classes: k,
                    });
                }
                let tr = trace(s, probe, mode)?;
                loss += cross_entropy(&tr.logits, s.label)?;
                correct += usize::from(argmax(&tr.logits) == s.label);
                let p = softmax_f64(&tr.logits);
                let dlogits: Vec<T> = p
                    .iter()
                    .enumerate()
                    .map(|(c, &pc)| {
                        T::from_f64_lossy((pc - f64::from(u8::from(c == s.label))) * inv)
                    })
                    .collect();
                backward(&tr, probe, mode, &dlogits, &mut grads);
            }
            Ok((loss, grads, correct))
        })
        .collect::<ProbeResult<Vec<_>>>()?;

    let mut grads = probe.zero_grads();
    let mut loss = 0.0;
    let mut correct = 0;
    for (l, g, c) in partials {
        loss += l;
        correct += c;
        for (dst, src) in grads.iter_mut().zip(g) {
            accumulate(dst.data_mut(), src.data().iter().copied());
        }
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(ProbeError::NonFinite("gradient"));
    }
    Ok(BatchGrad {
        loss: loss * inv,
        grads,
        correct,
    })
}

/// Mean loss only, for finite differences and monitoring.
pub fn batch_loss<T: Real>(
    batch: &[&Sample<T>],
    probe: &ProbeParams<T>,
    mode: AggregatorMode,
) -> ProbeResult<f64> {
    if batch.is_empty() {
        return Err(ProbeError::EmptyDataset);
    }
    let losses = batch
        .par_iter()
        .map(|s| cross_entropy(&trace(s, probe, mode)?.logits, s.label))
        .collect::<ProbeResult<Vec<_>>>()?;
    Ok(losses.iter().sum::<f64>() / batch.len() as f64)
}

/// Linear warmup from 0 to `base_lr` over `warmup` steps, then a half cosine
/// down to 0 at `total`.
pub fn lr_schedule(step: usize, total: usize, warmup: usize, base_lr: f64) -> ProbeResult<f64> {
    if warmup > total {
        return Err(ProbeError::Warmup { warmup, total });
    }
    if step > total {
        return Err(ProbeError::StepOutOfRange { step, total });
    }
    if step < warmup {
        return Ok(base_lr * step as f64 / warmup as f64);
    }
    if total == warmup {
        return Ok(base_lr);
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    Ok(0.5 * base_lr * (1.0 + (std::f64::consts::PI * progress).cos()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdMomentum,
    Lars,
}

impl std::str::FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sgd_momentum" | "sgd" => Ok(OptimizerKind::SgdMomentum),
            "lars" => Ok(OptimizerKind::Lars),
            other => Err(format!(
                "unknown optimizer `{other}` (expected sgd_momentum or lars)"
            )),
        }
    }
}

/// Momentum buffers, one per parameter tensor; created on the first step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OptimizerState<T = f32> {
    pub velocity: Vec<Tensor<T>>,
}

fn check_shapes<T: Real>(
    params: &[&mut Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut OptimizerState<T>,
) -> ProbeResult<()> {
    if state.velocity.is_empty() {
        state.velocity = params
            .iter()
            .map(|p| Tensor::zeros(p.dims().to_vec()))
            .collect();
    }
    if params.len() != grads.len() || params.len() != state.velocity.len() {
        return Err(ProbeError::ShapeMismatch(params.len().min(grads.len())));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.dims() != g.dims() || p.dims() != state.velocity[i].dims() {
            return Err(ProbeError::ShapeMismatch(i));
        }
    }
    Ok(())
}

fn momentum_update<T: Real>(
    w: &mut Tensor<T>,
    g: &Tensor<T>,
    v: &mut Tensor<T>,
    lr: f64,
    local_lr: f64,
    momentum: f64,
    wd: f64,
) {
    for ((w, &g), v) in w.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
        let step = local_lr * (g.as_f64() + wd * w.as_f64());
        let nv = momentum * v.as_f64() + step;
        *v = T::from_f64_lossy(nv);
        *w = T::from_f64_lossy(w.as_f64() - lr * nv);
    }
}

/// `v ← m·v + g + wd·w; w ← w − lr·v`.
pub fn sgd_momentum_step<T: Real>(
    params: &mut [&mut Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut OptimizerState<T>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> ProbeResult<()> {
    check_shapes(params, grads, state)?;
    for ((w, g), v) in params.iter_mut().zip(grads).zip(&mut state.velocity) {
        momentum_update(w, g, v, lr, 1.0, momentum, weight_decay);
    }
    Ok(())
}

fn norm<T: Real>(x: &[T]) -> f64 {
    x.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt()
}

/// Layer-wise trust ratio; 1 when either norm vanishes.
pub fn lars_local_lr<T: Real>(
    w: &[T],
    g: &[T],
    weight_decay: f64,
    trust_coefficient: f64,
    eps: f64,
) -> f64 {
    let wn = norm(w);
    let gn = norm(g);
    if wn > 0.0 && gn > 0.0 {
        trust_coefficient * wn / (gn + weight_decay * wn + eps)
    } else {
        1.0
    }
}

/// `v ← m·v + local_lr·(g + wd·w); w ← w − lr·v`, with `local_lr` per tensor.
#[allow(clippy::too_many_arguments)]
pub fn lars_step<T: Real>(
    params: &mut [&mut Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut OptimizerState<T>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    trust_coefficient: f64,
    eps: f64,
) -> ProbeResult<()> {
    check_shapes(params, grads, state)?;
    for ((w, g), v) in params.iter_mut().zip(grads).zip(&mut state.velocity) {
        let local = lars_local_lr(w.data(), g.data(), weight_decay, trust_coefficient, eps);
        momentum_update(w, g, v, lr, local, momentum, weight_decay);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Desk,
    Paper,
}

impl std::str::FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            other => Err(format!("unknown preset `{other}` (expected desk or paper)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub mode: AggregatorMode,
    pub score_model: Option<ScoreModelSpec>,
    pub standardize: bool,
    pub trust_coefficient: f64,
    pub lars_eps: f64,
}

impl TrainConfig {
    pub fn preset(preset: Preset, mode: AggregatorMode) -> Self {
        let score_model = mode.is_abmilp().then(ScoreModelSpec::linear);
        let common = Self {
            optimizer: OptimizerKind::SgdMomentum,
            base_lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
            epochs: 50,
            warmup_epochs: 5,
            batch_size: 256,
            seed: 0,
            mode,
            score_model,
            standardize: true,
            trust_coefficient: 0.001,
            lars_eps: 1e-9,
        };
        match preset {
            Preset::Desk => common,
            Preset::Paper => Self {
                optimizer: OptimizerKind::Lars,
                epochs: 90,
                warmup_epochs: 10,
                batch_size: 16_384,
                ..common
            },
        }
    }

    pub fn validate(&self) -> ProbeResult<()> {
        if self.batch_size == 0 {
            return Err(ProbeError::Config("batch size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(ProbeError::Config("epochs must be at least 1".into()));
        }
        if self.warmup_epochs > self.epochs {
            return Err(ProbeError::Config(format!(
                "warmup epochs ({}) exceed epochs ({})",
                self.warmup_epochs, self.epochs
            )));
        }
        if !(self.base_lr.is_finite() && self.base_lr >= 0.0) {
            return Err(ProbeError::Config(format!(
                "learning rate {} is invalid",
                self.base_lr
            )));
        }
        crate::aggregation::AggregatorSpec::new(self.mode, self.score_model)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub eval_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub const COLUMNS: [&'static str; 5] = [
        "epoch",
        "lr",
        "train_loss",
        "train_accuracy",
        "eval_accuracy",
    ];

    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }
}

fn check_labels<T: Real>(samples: &[Sample<T>], classes: usize) -> ProbeResult<()> {
    for s in samples {
        if s.label >= classes {
            return Err(ProbeError::LabelOutOfRange {
                id: s.id.clone(),
                label: s.label,
                classes,
            });
        }
    }
    Ok(())
}

/// Trains a probe with `classes` outputs. Samples are visited in an order
/// derived from their ids and the seed, never from their position in
/// `train`.
pub fn train_probe(
    train: &[Sample],
    eval: Option<&[Sample]>,
    classes: usize,
    cfg: &TrainConfig,
) -> ProbeResult<(ProbeParams, TrainHistory)> {
    cfg.validate()?;
    let first = train.first().ok_or(ProbeError::EmptyDataset)?;
    if classes == 0 {
        return Err(ProbeError::Config("at least one class is required".into()));
    }
    let d = first.tokens.dim();
    for s in train.iter().chain(eval.unwrap_or(&[])) {
        check_dim(s, d)?;
    }
    check_labels(train, classes)?;
    if let Some(e) = eval {
        check_labels(e, classes)?;
    }

    let mut order: Vec<usize> = (0..train.len()).collect();
    order.sort_by(|&a, &b| train[a].id.cmp(&train[b].id));

    let mut probe = ProbeParams::<f32>::init(d, classes, cfg.score_model.as_ref(), cfg.seed)?;
    if cfg.standardize {
        probe.standardization = Some(Standardization::fit(order.iter().map(|&i| &train[i]))?);
    }

    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.epochs;
    let warmup = steps_per_epoch * cfg.warmup_epochs;
    let mut state = OptimizerState::default();
    let mut history = TrainHistory::default();
    let mut step = 0;

    for epoch in 0..cfg.epochs {
        let mut perm = order.clone();
        perm.shuffle(&mut RngStream::new(cfg.seed, SHUFFLE_STREAM + epoch as u64).generator());
        let mut loss_sum = 0.0;
        let mut correct = 0;
        let mut lr = 0.0;
        for idx in perm.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = idx.iter().map(|&i| &train[i]).collect();
            let g = probe_backward(&batch, &probe, cfg.mode)?;
            if !g.loss.is_finite() {
                return Err(ProbeError::NonFiniteLoss { epoch, step });
            }
            loss_sum += g.loss * batch.len() as f64;
            correct += g.correct;
            lr = lr_schedule(step, total, warmup, cfg.base_lr)?;
            let mut params = probe.tensors_mut();
            match cfg.optimizer {
                OptimizerKind::SgdMomentum => sgd_momentum_step(
                    &mut params,
                    &g.grads,
                    &mut state,
                    lr,
                    cfg.momentum,
                    cfg.weight_decay,
                )?,
                OptimizerKind::Lars => lars_step(
                    &mut params,
                    &g.grads,
                    &mut state,
                    lr,
                    cfg.momentum,
                    cfg.weight_decay,
                    cfg.trust_coefficient,
                    cfg.lars_eps,
                )?,
            }
            if probe.tensors().iter().any(|t| !t.is_finite()) {
                return Err(ProbeError::NonFiniteLoss { epoch, step });
            }
            step += 1;
        }
        let eval_accuracy = match eval {
            Some(e) if !e.is_empty() => Some(evaluate(e, &probe, cfg.mode)?),
            _ => None,
        };
        history.epochs.push(EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / train.len() as f64,
            train_accuracy: correct as f64 / train.len() as f64,
            eval_accuracy,
        });
    }
    Ok((probe, history))
}

/// Top-1 accuracy; argmax ties go to the lowest class index.
pub fn evaluate<T: Real>(
    samples: &[Sample<T>],
    probe: &ProbeParams<T>,
    mode: AggregatorMode,
) -> ProbeResult<f64> {
    if samples.is_empty() {
        return Err(ProbeError::EmptyDataset);
    }
    let hits = samples
        .par_iter()
        .map(|s| {
            Ok(usize::from(
                probe_forward(s, probe, mode)?.predicted() == s.label,
            ))
        })
        .collect::<ProbeResult<Vec<usize>>>()?;
    Ok(hits.iter().sum::<usize>() as f64 / samples.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckConfig {
    pub mode: AggregatorMode,
    pub score_model: Option<ScoreModelSpec>,
    pub dim: usize,
    pub tokens: usize,
    pub classes: usize,
    pub batch: usize,
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
    /// Perturbs one analytic gradient entry; a negative control for the checker.
    pub corrupt: bool,
}

impl GradcheckConfig {
    pub fn new(mode: AggregatorMode, score_model: Option<ScoreModelSpec>, seed: u64) -> Self {
        Self {
            mode,
            score_model,
            dim: 16,
            tokens: 8,
            classes: 5,
            batch: 4,
            seed,
            step: 1e-4,
            tolerance: 1e-4,
            corrupt: false,
        }
    }

    pub fn label(&self) -> String {
        match &self.score_model {
            None => self.mode.name().to_string(),
            Some(s) => format!(
                "{} depth={} activation={}",
                self.mode.name(),
                s.depth,
                s.activation.map_or("none", |a| a.name())
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub label: String,
    pub max_rel_error: f64,
    pub worst_tensor: String,
    pub worst_index: usize,
    pub checked: usize,
    pub passed: bool,
}

/// Every mode, and for AbMILP modes every depth 1–4 and activation.
pub fn gradcheck_suite(seed: u64) -> Vec<GradcheckConfig> {
    use crate::aggregation::Activation;
    let mut out = Vec::new();
    for mode in AggregatorMode::ALL {
        if mode.is_abmilp() {
            out.push(GradcheckConfig::new(
                mode,
                Some(ScoreModelSpec::linear()),
                seed,
            ));
            for depth in 2..=4 {
                for act in [Activation::Relu, Activation::Gelu, Activation::Tanh] {
                    out.push(GradcheckConfig::new(
                        mode,
                        Some(ScoreModelSpec::mlp(depth, 8, act)),
                        seed,
                    ));
                }
            }
        } else {
            out.push(GradcheckConfig::new(mode, None, seed));
        }
    }
    out
}

fn normal_vec(n: usize, rng: &mut impl Rng, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal) * scale)
        .collect()
}

fn gradcheck_problem(
    cfg: &GradcheckConfig,
    attempt: u64,
) -> ProbeResult<(Vec<Sample<f64>>, ProbeParams<f64>)> {
    let mut g = RngStream::new(cfg.seed, attempt).generator();
    let (d, n, k) = (cfg.dim, cfg.tokens, cfg.classes);
    let samples = (0..cfg.batch)
        .map(|b| {
            let tokens = Tensor::from_vec(vec![n + 1, d], normal_vec((n + 1) * d, &mut g, 1.0))?;
            let logits = normal_vec(n, &mut g, 1.0);
            let fixed = tensor::softmax_slice(&logits)?;
            Ok(Sample {
                id: format!("s{b}"),
                tokens: TokenSequence::new(tokens, true, 0)
                    .map_err(|e| ProbeError::Config(e.to_string()))?,
                label: g.random_range(0..k),
                fixed_weights: Some(fixed),
            })
        })
        .collect::<ProbeResult<Vec<_>>>()?;

    let score = match &cfg.score_model {
        Some(spec) => {
            spec.validate()?;
            let layers = spec
                .layer_shapes(d)
                .into_iter()
                .map(|(i, o)| {
                    Ok(Dense {
                        weight: Tensor::from_vec(
                            vec![i, o],
                            normal_vec(i * o, &mut g, 1.0 / (i as f64).sqrt()),
                        )?,
                        bias: Tensor::from_vec(vec![o], normal_vec(o, &mut g, 0.5))?,
                    })
                })
                .collect::<ProbeResult<Vec<_>>>()?;
            Some(ScoreModel {
                layers,
                activation: spec.activation,
            })
        }
        None if cfg.mode.is_abmilp() => return Err(ProbeError::MissingScoreModel(cfg.mode)),
        None => None,
    };
    let classifier = Dense {
        weight: Tensor::from_vec(vec![d, k], normal_vec(d * k, &mut g, 0.5))?,
        bias: Tensor::from_vec(vec![k], normal_vec(k, &mut g, 0.5))?,
    };
    let standardization = Standardization {
        mean: normal_vec(d, &mut g, 0.3),
        std: (0..d).map(|_| g.random_range(0.5..1.5)).collect(),
    };
    Ok((
        samples,
        ProbeParams {
            score,
            classifier,
            standardization: Some(standardization),
        },
    ))
}

/// Smallest |pre-activation| of any hidden unit over the batch.
fn kink_margin(
    samples: &[Sample<f64>],
    probe: &ProbeParams<f64>,
    mode: AggregatorMode,
) -> ProbeResult<f64> {
    let mut margin = f64::INFINITY;
    for s in samples {
        for p in trace(s, probe, mode)?.pres {
            margin = p.data().iter().fold(margin, |m, x| m.min(x.abs()));
        }
    }
    Ok(margin)
}

/// Compares analytic gradients with 64-bit central differences on a random
/// problem. Relative error is `|a − n| / max(1, |a|)`.
pub fn gradcheck(cfg: &GradcheckConfig) -> ProbeResult<GradcheckReport> {
    if cfg.batch == 0 || cfg.tokens == 0 || cfg.dim == 0 || cfg.classes == 0 {
        return Err(ProbeError::Config(
            "gradcheck sizes must be positive".into(),
        ));
    }
    let relu = cfg
        .score_model
        .is_some_and(|s| s.activation == Some(crate::aggregation::Activation::Relu));
    // Finite differences straddling a ReLU kink are meaningless; redraw the
    // problem until every hidden pre-activation keeps a safe distance from 0.
    let mut attempt = 0;
    let (samples, mut probe) = loop {
        let (s, p) = gradcheck_problem(cfg, attempt)?;
        if !relu || kink_margin(&s, &p, cfg.mode)? > 100.0 * cfg.step || attempt >= 1000 {
            break (s, p);
        }
        attempt += 1;
    };
    let batch: Vec<&Sample<f64>> = samples.iter().collect();
    let mut analytic = probe_backward(&batch, &probe, cfg.mode)?.grads;
    if cfg.corrupt {
        analytic[0].data_mut()[0] += 1e-2;
    }

    let names = probe.names();
    let mut worst = (0.0f64, names[0].clone(), 0usize);
    let mut checked = 0;
    for (ti, name) in names.iter().enumerate() {
        for j in 0..analytic[ti].len() {
            let orig = probe.tensors()[ti].data()[j];
            probe.tensors_mut()[ti].data_mut()[j] = orig + cfg.step;
            let plus = batch_loss(&batch, &probe, cfg.mode)?;
            probe.tensors_mut()[ti].data_mut()[j] = orig - cfg.step;
            let minus = batch_loss(&batch, &probe, cfg.mode)?;
            probe.tensors_mut()[ti].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let a = analytic[ti].data()[j];
            let rel = (a - numeric).abs() / a.abs().max(1.0);
            if rel > worst.0 || !rel.is_finite() {
                worst = (rel, name.clone(), j);
            }
            checked += 1;
        }
    }
    Ok(GradcheckReport {
        label: cfg.label(),
        max_rel_error: worst.0,
        worst_tensor: worst.1,
        worst_index: worst.2,
        checked,
        passed: worst.0 < cfg.tolerance,
    })
}
