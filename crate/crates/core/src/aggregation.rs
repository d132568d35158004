//! Global-representation constructors over final-block tokens: `[cls]`
//! readout, average pooling, AbMILP selective aggregation and the
//! non-trainable attention-derived selectors.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{row_entropy, MetricsError, SelectionVector};
use crate::rng::RngStream;
use crate::tensor::{self, rand_normal, Real, Tensor, TensorError};
use crate::vit::{AttentionTensor, TokenSequence};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AggregationError {
    #[error("token sequence has no [cls] token")]
    NoCls,
    #[error("token sequence has no patch tokens")]
    NoPatches,
    #[error("selection length {got} does not match {expected} tokens")]
    LengthMismatch { expected: usize, got: usize },
    #[error("token dim {got} does not match score model input {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("score model depth must be in 1..=4, got {0}")]
    BadDepth(usize),
    #[error("an activation is meaningless for a depth-1 (linear) score model")]
    ActivationAtDepthOne,
    #[error("an MLP score model of depth {0} needs an activation")]
    MissingActivation(usize),
    #[error("mode {0} requires a score model")]
    MissingScoreModel(AggregatorMode),
    #[error("mode {0} does not take a score model")]
    UnexpectedScoreModel(AggregatorMode),
    #[error("attention tensor holds no blocks")]
    MissingCapture,
    #[error("grid {rows}x{cols} does not match {patches} patches")]
    GridMismatch {
        rows: usize,
        cols: usize,
        patches: usize,
    },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type AggregationResult<T> = Result<T, AggregationError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Gelu,
    Tanh,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Gelu => tensor::gelu_scalar(x),
            Activation::Tanh => x.tanh(),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Gelu => tensor::gelu_derivative(x),
            Activation::Tanh => 1.0 - x.tanh().powi(2),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Gelu => "gelu",
            Activation::Tanh => "tanh",
        }
    }
}

impl FromStr for Activation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "relu" => Ok(Activation::Relu),
            "gelu" => Ok(Activation::Gelu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(format!(
                "unknown activation `{other}` (expected relu, gelu or tanh)"
            )),
        }
    }
}

/// Affine layer with `[in, out]` weight.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> Dense<T> {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Tensor::zeros(vec![input, output]),
            bias: Tensor::zeros(vec![output]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn cast<U: Real>(&self) -> Dense<U> {
        Dense {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
        }
    }
}

/// Shape of a score model, independent of its parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreModelSpec {
    pub depth: usize,
    pub hidden: usize,
    pub activation: Option<Activation>,
}

impl ScoreModelSpec {
    pub fn linear() -> Self {
        Self {
            depth: 1,
            hidden: 0,
            activation: None,
        }
    }

    pub fn mlp(depth: usize, hidden: usize, activation: Activation) -> Self {
        Self {
            depth,
            hidden,
            activation: Some(activation),
        }
    }

    pub fn validate(&self) -> AggregationResult<()> {
        if !(1..=4).contains(&self.depth) {
            return Err(AggregationError::BadDepth(self.depth));
        }
        match (self.depth, self.activation) {
            (1, Some(_)) => Err(AggregationError::ActivationAtDepthOne),
            (d, None) if d > 1 => Err(AggregationError::MissingActivation(d)),
            _ if self.depth > 1 && self.hidden == 0 => Err(AggregationError::BadDepth(self.depth)),
            _ => Ok(()),
        }
    }

    /// `(in, out)` of each layer for token dim `dim`.
    pub fn layer_shapes(&self, dim: usize) -> Vec<(usize, usize)> {
        (0..self.depth)
            .map(|l| {
                let input = if l == 0 { dim } else { self.hidden };
                let output = if l + 1 == self.depth { 1 } else { self.hidden };
                (input, output)
            })
            .collect()
    }

    pub fn num_params(&self, dim: usize) -> usize {
        self.layer_shapes(dim)
            .iter()
            .map(|(i, o)| (i + 1) * o)
            .sum()
    }
}

/// Per-token scalar scorer `t: R^D → R`; a stack of affine layers with the
/// activation between them.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreModel<T = f32> {
    pub layers: Vec<Dense<T>>,
    pub activation: Option<Activation>,
}

impl<T: Real> ScoreModel<T> {
    /// Random initialization: hidden layers use `N(0, 1/in)`, the output layer
    /// `N(0, 0.01²)`; biases start at zero.
    pub fn init(spec: &ScoreModelSpec, dim: usize, rng: &RngStream) -> AggregationResult<Self> {
        spec.validate()?;
        let shapes = spec.layer_shapes(dim);
        let last = shapes.len() - 1;
        let layers = shapes
            .into_iter()
            .enumerate()
            .map(|(l, (i, o))| {
                let scale = if l == last {
                    0.01
                } else {
                    1.0 / (i as f64).sqrt()
                };
                let stream = RngStream::new(rng.seed, rng.stream_id.wrapping_add(l as u64));
                Dense {
                    weight: rand_normal(vec![i, o], &stream)
                        .map(|x| T::from_f64_lossy(x as f64 * scale)),
                    bias: Tensor::zeros(vec![o]),
                }
            })
            .collect();
        Ok(Self {
            layers,
            activation: spec.activation,
        })
    }

    pub fn spec(&self) -> ScoreModelSpec {
        ScoreModelSpec {
            depth: self.layers.len(),
            hidden: if self.layers.len() > 1 {
                self.layers[0].output_dim()
            } else {
                0
            },
            activation: self.activation,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Dense::num_params).sum()
    }

    pub fn validate(&self, dim: usize) -> AggregationResult<()> {
        self.spec().validate()?;
        if self.input_dim() != dim {
            return Err(AggregationError::DimMismatch {
                expected: self.input_dim(),
                got: dim,
            });
        }
        if self.layers.last().map(Dense::output_dim) != Some(1) {
            return Err(AggregationError::DimMismatch {
                expected: 1,
                got: self.layers.last().map_or(0, Dense::output_dim),
            });
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ScoreModel<U> {
        ScoreModel {
            layers: self.layers.iter().map(Dense::cast).collect(),
            activation: self.activation,
        }
    }
}

/// Scores every row of `tokens` (`rows×D`).
pub fn score_model_forward<T: Real>(
    tokens: &Tensor<T>,
    t: &ScoreModel<T>,
) -> AggregationResult<Vec<T>> {
    let (_, d) = tokens.shape2()?;
    t.validate(d)?;
    let act = t.activation;
    let mut h = tokens.clone();
    for (l, layer) in t.layers.iter().enumerate() {
        h = tensor::linear(&h, &layer.weight, Some(&layer.bias))?;
        if l + 1 < t.layers.len() {
            let a = act.expect("validated MLP has an activation");
            h = h.map(|x| T::from_f64_lossy(a.apply(x.as_f64())));
        }
    }
    Ok(h.into_data())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregatorMode {
    Cls,
    AvgPatches,
    AbmilpPatches,
    AbmilpWithCls,
    ExternalMap,
    AttnAvgCls,
    AttnLowestEntropy,
    AttnCentralPatch,
}

impl AggregatorMode {
    pub const ALL: [AggregatorMode; 8] = [
        AggregatorMode::Cls,
        AggregatorMode::AvgPatches,
        AggregatorMode::AbmilpPatches,
        AggregatorMode::AbmilpWithCls,
        AggregatorMode::ExternalMap,
        AggregatorMode::AttnAvgCls,
        AggregatorMode::AttnLowestEntropy,
        AggregatorMode::AttnCentralPatch,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AggregatorMode::Cls => "cls",
            AggregatorMode::AvgPatches => "avg_patches",
            AggregatorMode::AbmilpPatches => "abmilp_patches",
            AggregatorMode::AbmilpWithCls => "abmilp_with_cls",
            AggregatorMode::ExternalMap => "external_map",
            AggregatorMode::AttnAvgCls => "attn_avg_cls",
            AggregatorMode::AttnLowestEntropy => "attn_lowest_entropy",
            AggregatorMode::AttnCentralPatch => "attn_central_patch",
        }
    }

    pub fn is_abmilp(self) -> bool {
        matches!(
            self,
            AggregatorMode::AbmilpPatches | AggregatorMode::AbmilpWithCls
        )
    }

    /// Modes whose weights come from a precomputed per-image selector.
    pub fn is_fixed_selector(self) -> bool {
        matches!(
            self,
            AggregatorMode::ExternalMap
                | AggregatorMode::AttnAvgCls
                | AggregatorMode::AttnLowestEntropy
                | AggregatorMode::AttnCentralPatch
        )
    }

    pub fn requires_cls(self) -> bool {
        matches!(self, AggregatorMode::Cls | AggregatorMode::AbmilpWithCls)
    }
}

impl fmt::Display for AggregatorMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AggregatorMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AggregatorMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown aggregator mode `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatorSpec {
    pub mode: AggregatorMode,
    pub score_model: Option<ScoreModelSpec>,
}

impl AggregatorSpec {
    pub fn new(
        mode: AggregatorMode,
        score_model: Option<ScoreModelSpec>,
    ) -> AggregationResult<Self> {
        let spec = Self { mode, score_model };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> AggregationResult<()> {
        match (self.mode.is_abmilp(), &self.score_model) {
            (true, None) => Err(AggregationError::MissingScoreModel(self.mode)),
            (false, Some(_)) => Err(AggregationError::UnexpectedScoreModel(self.mode)),
            (true, Some(s)) => s.validate(),
            (false, None) => Ok(()),
        }
    }
}

/// Trainable parameters of aggregator + linear classifier for token dim `dim`
/// and `classes` outputs.
pub fn parameter_count(spec: &AggregatorSpec, dim: usize, classes: usize) -> usize {
    let classifier = (dim + 1) * classes;
    classifier + spec.score_model.map_or(0, |s| s.num_params(dim))
}

fn included_rows<T: Real>(
    tokens: &TokenSequence<T>,
    include_cls: bool,
) -> AggregationResult<std::ops::Range<usize>> {
    if include_cls && !tokens.has_cls {
        return Err(AggregationError::NoCls);
    }
    let start = if include_cls {
        0
    } else {
        tokens.patch_offset()
    };
    if start >= tokens.rows() {
        return Err(AggregationError::NoPatches);
    }
    Ok(start..tokens.rows())
}

/// AbMILP weights `softmax(t(z_i))` over the included tokens, in `T`.
pub fn abmilp_weights<T: Real>(
    tokens: &TokenSequence<T>,
    t: &ScoreModel<T>,
    include_cls: bool,
) -> AggregationResult<Vec<T>> {
    let rows = included_rows(tokens, include_cls)?;
    let scores = score_model_forward(&tokens.tokens, t)?;
    Ok(tensor::softmax_slice(&scores[rows])?)
}

pub fn abmilp_scores<T: Real>(
    tokens: &TokenSequence<T>,
    t: &ScoreModel<T>,
    include_cls: bool,
) -> AggregationResult<SelectionVector> {
    let w = abmilp_weights(tokens, t, include_cls)?;
    let source = if include_cls {
        "abmilp_with_cls"
    } else {
        "abmilp_patches"
    };
    Ok(SelectionVector {
        weights: w.into_iter().map(Real::as_f64).collect(),
        source: source.into(),
    })
}

/// `Σ s_i z_i`. A selection of length `rows` covers every token; length
/// `rows − 1` on a sequence with `[cls]` covers the patches only.
pub fn aggregate<T: Real>(tokens: &TokenSequence<T>, weights: &[T]) -> AggregationResult<Vec<T>> {
    let rows = tokens.rows();
    let start = if weights.len() == rows {
        0
    } else if tokens.has_cls && weights.len() + 1 == rows {
        1
    } else {
        return Err(AggregationError::LengthMismatch {
            expected: tokens.num_patches(),
            got: weights.len(),
        });
    };
    let d = tokens.dim();
    let mut out = vec![T::zero(); d];
    for (i, &w) in weights.iter().enumerate() {
        for (o, &z) in out.iter_mut().zip(tokens.tokens.row(start + i)) {
            *o = *o + w * z;
        }
    }
    Ok(out)
}

pub fn aggregate_selection(
    tokens: &TokenSequence,
    s: &SelectionVector,
) -> AggregationResult<Vec<f32>> {
    let w: Vec<f32> = s.weights.iter().map(|&x| x as f32).collect();
    aggregate(tokens, &w)
}

pub fn cls_readout<T: Real>(tokens: &TokenSequence<T>) -> AggregationResult<Vec<T>> {
    if !tokens.has_cls {
        return Err(AggregationError::NoCls);
    }
    Ok(tokens.tokens.row(0).to_vec())
}

pub fn avg_pool<T: Real>(tokens: &TokenSequence<T>) -> AggregationResult<Vec<T>> {
    let n = tokens.num_patches();
    if n == 0 {
        return Err(AggregationError::NoPatches);
    }
    let inv = T::from_f64_lossy(1.0 / n as f64);
    aggregate(tokens, &vec![inv; n])
}

fn final_block(attn: &AttentionTensor) -> AggregationResult<usize> {
    if attn.blocks() == 0 {
        return Err(AggregationError::MissingCapture);
    }
    if !attn.has_cls {
        return Err(AggregationError::NoCls);
    }
    if attn.num_patches() == 0 {
        return Err(AggregationError::NoPatches);
    }
    Ok(attn.blocks() - 1)
}

/// Head-averaged final-block row `row`, restricted to patch targets.
fn head_mean_patch_row(attn: &AttentionTensor, block: usize, row: usize) -> Vec<f64> {
    let off = attn.patch_offset();
    let mut acc = vec![0.0f64; attn.num_patches()];
    for h in 0..attn.heads() {
        for (a, &x) in acc.iter_mut().zip(&attn.row(block, h, row)[off..]) {
            *a += x as f64;
        }
    }
    let heads = attn.heads() as f64;
    acc.iter().map(|a| a / heads).collect()
}

/// Mean over heads of the final-block `[cls]` → patch attention.
pub fn selector_avg_cls_attention(attn: &AttentionTensor) -> AggregationResult<SelectionVector> {
    let b = final_block(attn)?;
    Ok(SelectionVector::from_scores(
        &head_mean_patch_row(attn, b, 0),
        "attn_avg_cls",
    )?)
}

/// The final-block head whose `[cls]` → patch attention has the lowest
/// entropy; ties go to the lowest head index.
pub fn selector_lowest_entropy_head(attn: &AttentionTensor) -> AggregationResult<SelectionVector> {
    let b = final_block(attn)?;
    let off = attn.patch_offset();
    let mut best: Option<(usize, f64)> = None;
    for h in 0..attn.heads() {
        let e = row_entropy(attn.row(b, h, 0), off..attn.tokens())?;
        if best.is_none_or(|(_, be)| e < be) {
            best = Some((h, e));
        }
    }
    let (h, _) = best.ok_or(AggregationError::MissingCapture)?;
    let row: Vec<f64> = attn.row(b, h, 0)[off..].iter().map(|&x| x as f64).collect();
    Ok(SelectionVector::from_scores(&row, "attn_lowest_entropy")?)
}

/// Patch index of the grid center, `floor(rows/2)·cols + floor(cols/2)`.
pub fn central_patch_index(rows: usize, cols: usize) -> usize {
    (rows / 2) * cols + cols / 2
}

/// Head-averaged final-block attention of the central patch to all patches.
pub fn selector_central_patch(
    attn: &AttentionTensor,
    rows: usize,
    cols: usize,
) -> AggregationResult<SelectionVector> {
    if rows * cols != attn.num_patches() {
        return Err(AggregationError::GridMismatch {
            rows,
            cols,
            patches: attn.num_patches(),
        });
    }
    let b = final_block(attn)?;
    let row = attn.patch_offset() + central_patch_index(rows, cols);
    Ok(SelectionVector::from_scores(
        &head_mean_patch_row(attn, b, row),
        "attn_central_patch",
    )?)
}

/// Imports an externally produced non-negative score map of length `expected`.
pub fn selector_external(values: &[f64], expected: usize) -> AggregationResult<SelectionVector> {
    if values.len() != expected {
        return Err(AggregationError::LengthMismatch {
            expected,
            got: values.len(),
        });
    }
    Ok(SelectionVector::from_scores(values, "external")?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(rows: usize, dim: usize, seed: u64, has_cls: bool) -> TokenSequence<f64> {
        let t = rand_normal(vec![rows, dim], &RngStream::new(seed, 0)).cast();
        TokenSequence::new(t, has_cls, 0).unwrap()
    }

    #[test]
    fn constant_score_gives_uniform_weights() {
        let tokens = seq(6, 4, 1, true);
        let mut t = ScoreModel::<f64> {
            layers: vec![Dense::zeros(4, 1)],
            activation: None,
        };
        t.layers[0].bias.data_mut()[0] = 3.0;
        assert!(score_model_forward(&tokens.tokens, &t)
            .unwrap()
            .iter()
            .all(|&s| s == 3.0));
        let w = abmilp_weights(&tokens, &t, false).unwrap();
        assert_eq!(w.len(), 5);
        assert!(w.iter().all(|&x| (x - 0.2).abs() < 1e-15));
        assert_eq!(abmilp_weights(&tokens, &t, true).unwrap().len(), 6);
    }

    #[test]
    fn abmilp_with_cls_needs_cls() {
        let tokens = seq(4, 3, 2, false);
        let t =
            ScoreModel::<f64>::init(&ScoreModelSpec::linear(), 3, &RngStream::new(0, 0)).unwrap();
        assert_eq!(
            abmilp_weights(&tokens, &t, true),
            Err(AggregationError::NoCls)
        );
    }

    #[test]
    fn aggregate_one_hot_and_uniform() {
        let tokens = seq(5, 3, 3, true);
        let mut w = vec![0.0; 4];
        w[2] = 1.0;
        assert_eq!(aggregate(&tokens, &w).unwrap(), tokens.tokens.row(3));
        let avg = avg_pool(&tokens).unwrap();
        let uni = aggregate(&tokens, &[0.25; 4]).unwrap();
        for (a, b) in avg.iter().zip(&uni) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(matches!(
            aggregate(&tokens, &[0.5; 2]),
            Err(AggregationError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn readouts() {
        let tokens = seq(4, 3, 4, true);
        assert_eq!(cls_readout(&tokens).unwrap(), tokens.tokens.row(0));
        assert_eq!(
            cls_readout(&seq(4, 3, 4, false)),
            Err(AggregationError::NoCls)
        );
        let only_cls = seq(1, 3, 4, true);
        assert_eq!(avg_pool(&only_cls), Err(AggregationError::NoPatches));
    }

    #[test]
    fn score_model_depth_rules() {
        assert_eq!(
            ScoreModelSpec {
                depth: 1,
                hidden: 0,
                activation: Some(Activation::Relu)
            }
            .validate(),
            Err(AggregationError::ActivationAtDepthOne)
        );
        assert_eq!(
            ScoreModelSpec::mlp(5, 4, Activation::Relu).validate(),
            Err(AggregationError::BadDepth(5))
        );
        assert!(ScoreModelSpec::mlp(3, 4, Activation::Tanh)
            .validate()
            .is_ok());
    }

    #[test]
    fn relu_identity_region() {
        // Non-negative pre-activations: ReLU MLP == composition of affine maps.
        let w1 = Tensor::from_vec(vec![2, 2], vec![1.0, 0.5, 0.25, 2.0]).unwrap();
        let w2 = Tensor::from_vec(vec![2, 1], vec![3.0, -1.0]).unwrap();
        let t = ScoreModel::<f64> {
            layers: vec![
                Dense {
                    weight: w1.clone(),
                    bias: Tensor::full(vec![2], 0.1),
                },
                Dense {
                    weight: w2.clone(),
                    bias: Tensor::full(vec![1], 0.2),
                },
            ],
            activation: Some(Activation::Relu),
        };
        let x = Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, 0.5, 0.0]).unwrap();
        let s = score_model_forward(&x, &t).unwrap();
        for (i, &si) in s.iter().enumerate() {
            let r = x.row(i);
            let h0 = r[0] * 1.0 + r[1] * 0.25 + 0.1;
            let h1 = r[0] * 0.5 + r[1] * 2.0 + 0.1;
            assert!((si - (3.0 * h0 - h1 + 0.2)).abs() < 1e-12);
        }
    }

    #[test]
    fn parameter_counts() {
        let plain = AggregatorSpec::new(AggregatorMode::Cls, None).unwrap();
        let lin = AggregatorSpec::new(
            AggregatorMode::AbmilpPatches,
            Some(ScoreModelSpec::linear()),
        )
        .unwrap();
        assert_eq!(parameter_count(&plain, 768, 1000), 769_000);
        assert_eq!(parameter_count(&lin, 768, 1000), 769_769);
        let mlp = AggregatorSpec::new(
            AggregatorMode::AbmilpWithCls,
            Some(ScoreModelSpec::mlp(2, 32, Activation::Gelu)),
        )
        .unwrap();
        assert_eq!(parameter_count(&mlp, 64, 10), 65 * 32 + 33 + 65 * 10);
        assert!(AggregatorSpec::new(AggregatorMode::AbmilpPatches, None).is_err());
        assert!(
            AggregatorSpec::new(AggregatorMode::AvgPatches, Some(ScoreModelSpec::linear()))
                .is_err()
        );
    }

    fn attn_from(maps: Vec<Vec<f32>>, t: usize) -> AttentionTensor {
        let heads = maps.len();
        let data: Vec<f32> = maps.into_iter().flatten().collect();
        AttentionTensor::new(Tensor::from_vec(vec![1, heads, t, t], data).unwrap(), true).unwrap()
    }

    #[test]
    fn lowest_entropy_picks_one_hot_and_ties_go_to_head_zero() {
        let t = 4;
        let uniform = vec![0.25f32; t * t];
        let mut peaked = uniform.clone();
        peaked[..4].copy_from_slice(&[0.0, 0.0, 1.0, 0.0]);
        let s = selector_lowest_entropy_head(&attn_from(vec![uniform.clone(), peaked], t)).unwrap();
        assert_eq!(s.weights, vec![0.0, 1.0, 0.0]);

        let mut a = uniform.clone();
        a[..4].copy_from_slice(&[0.1, 0.6, 0.2, 0.1]);
        let mut b = a.clone();
        b[..4].copy_from_slice(&[0.1, 0.2, 0.6, 0.1]); // same entropy, permuted
        let s = selector_lowest_entropy_head(&attn_from(vec![a, b], t)).unwrap();
        assert!((s.weights[0] - 0.6 / 0.9).abs() < 1e-6);
    }

    #[test]
    fn central_patch_selector() {
        assert_eq!(central_patch_index(14, 14), 105);
        let t = 10; // 3x3 grid + cls
        let mut id = vec![0.0f32; t * t];
        for i in 0..t {
            id[i * t + i] = 1.0;
        }
        let s = selector_central_patch(&attn_from(vec![id], t), 3, 3).unwrap();
        let mut expected = vec![0.0; 9];
        expected[4] = 1.0;
        assert_eq!(s.weights, expected);
        let u = attn_from(vec![vec![0.1f32; t * t]], t);
        assert!(selector_central_patch(&u, 3, 3)
            .unwrap()
            .weights
            .iter()
            .all(|&w| (w - 1.0 / 9.0).abs() < 1e-9));
        assert!(matches!(
            selector_central_patch(&u, 2, 4),
            Err(AggregationError::GridMismatch { .. })
        ));
        assert!(selector_avg_cls_attention(&u)
            .unwrap()
            .weights
            .iter()
            .all(|&w| (w - 1.0 / 9.0).abs() < 1e-9));
    }

    #[test]
    fn external_selector() {
        assert_eq!(
            selector_external(&[2.0, 2.0], 2).unwrap().weights,
            vec![0.5, 0.5]
        );
        assert_eq!(
            selector_external(&[0.25, 0.75], 2).unwrap().weights,
            vec![0.25, 0.75]
        );
        assert!(selector_external(&[1.0, -0.5], 2).is_err());
        assert!(selector_external(&[1.0], 2).is_err());
    }

    #[test]
    fn mode_names_round_trip() {
        for m in AggregatorMode::ALL {
            assert_eq!(m.name().parse::<AggregatorMode>().unwrap(), m);
        }
    }
}
