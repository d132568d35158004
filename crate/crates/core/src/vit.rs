//! Inference-only ViT encoder and MAE decoder.
//!
//! Linear layers use the `x · W + b` convention with `W` stored as
//! `[in, out]`. Blocks are pre-norm: `x + MSA(LN(x))` followed by
//! `x + MLP(LN(x))`, with an exact-GELU MLP.
//!
//! Patches are flattened in `(row, col, channel)` order and ordered row-major
//! over the patch grid. Token 0 is the `[cls]` token whenever one is present.

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::RngStream;
use crate::tensor::{self, rand_normal, Real, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum VitError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("shape mismatch for {what}: expected {expected:?}, got {got:?}")]
    Shape {
        what: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("missing tensor `{0}`")]
    MissingTensor(String),
    #[error("stop block {stop} exceeds depth {depth}")]
    StopBlock { stop: usize, depth: usize },
    #[error("sequence has no [cls] token")]
    NoCls,
    #[error("mask length {mask} does not match {patches} patches")]
    MaskLength { mask: usize, patches: usize },
    #[error("attention over an empty sequence")]
    EmptySequence,
    #[error("reconstruction loss is undefined when no patch is dropped")]
    NoDroppedPatches,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type VitResult<T> = Result<T, VitError>;

fn default_true() -> bool {
    true
}

fn default_ln_eps() -> f64 {
    1e-6
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    #[serde(default = "default_true")]
    pub final_norm: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViTConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    #[serde(default = "default_true")]
    pub final_norm: bool,
    #[serde(default = "default_ln_eps")]
    pub layer_norm_eps: f64,
    #[serde(default)]
    pub decoder: Option<DecoderConfig>,
}

impl ViTConfig {
    /// A small config used by tests and the synthetic tooling.
    pub fn tiny() -> Self {
        Self {
            image_height: 16,
            image_width: 16,
            channels: 3,
            patch_size: 4,
            embed_dim: 16,
            depth: 2,
            heads: 2,
            mlp_ratio: 2.0,
            final_norm: true,
            layer_norm_eps: 1e-6,
            decoder: Some(DecoderConfig {
                embed_dim: 8,
                depth: 1,
                heads: 2,
                mlp_ratio: 2.0,
                final_norm: true,
            }),
        }
    }

    pub fn validate(&self) -> VitResult<()> {
        let p = self.patch_size;
        if p == 0 || self.channels == 0 || self.embed_dim == 0 || self.heads == 0 {
            return Err(VitError::Config("sizes must be positive".into()));
        }
        if !self.image_height.is_multiple_of(p) || !self.image_width.is_multiple_of(p) {
            return Err(VitError::Config(format!(
                "image {}x{} is not divisible into {p}x{p} patches",
                self.image_height, self.image_width
            )));
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return Err(VitError::Config(format!(
                "embed_dim {} is not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        if let Some(d) = &self.decoder {
            if d.embed_dim == 0 || d.heads == 0 || d.embed_dim % d.heads != 0 {
                return Err(VitError::Config(
                    "decoder embed_dim must be a positive multiple of heads".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        (
            self.image_height / self.patch_size,
            self.image_width / self.patch_size,
        )
    }

    pub fn num_patches(&self) -> usize {
        let (r, c) = self.grid();
        r * c
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn mlp_hidden(&self) -> usize {
        mlp_hidden(self.embed_dim, self.mlp_ratio)
    }
}

fn mlp_hidden(dim: usize, ratio: f64) -> usize {
    (dim as f64 * ratio).round() as usize
}

/// `(rows, cols)` token matrix plus bookkeeping about where it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence<T = f32> {
    pub tokens: Tensor<T>,
    pub has_cls: bool,
    pub block_index: usize,
}

impl<T: Real> TokenSequence<T> {
    pub fn new(tokens: Tensor<T>, has_cls: bool, block_index: usize) -> VitResult<Self> {
        let (rows, _) = tokens.shape2()?;
        if rows == 0 {
            return Err(VitError::EmptySequence);
        }
        Ok(Self {
            tokens,
            has_cls,
            block_index,
        })
    }

    pub fn rows(&self) -> usize {
        self.tokens.dims()[0]
    }

    pub fn dim(&self) -> usize {
        self.tokens.dims()[1]
    }

    /// Row index of the first patch token.
    pub fn patch_offset(&self) -> usize {
        usize::from(self.has_cls)
    }

    pub fn num_patches(&self) -> usize {
        self.rows() - self.patch_offset()
    }
}

/// Per-block, per-head attention maps `[blocks, heads, T, T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTensor {
    pub maps: Tensor<f32>,
    pub has_cls: bool,
}

impl AttentionTensor {
    pub fn new(maps: Tensor<f32>, has_cls: bool) -> VitResult<Self> {
        match maps.dims() {
            [_, _, t, t2] if t == t2 && *t > 0 => Ok(Self { maps, has_cls }),
            d => Err(VitError::Shape {
                what: "attention tensor".into(),
                expected: vec![0, 0, 0, 0],
                got: d.to_vec(),
            }),
        }
    }

    pub fn blocks(&self) -> usize {
        self.maps.dims()[0]
    }

    pub fn heads(&self) -> usize {
        self.maps.dims()[1]
    }

    pub fn tokens(&self) -> usize {
        self.maps.dims()[2]
    }

    pub fn patch_offset(&self) -> usize {
        usize::from(self.has_cls)
    }

    pub fn num_patches(&self) -> usize {
        self.tokens() - self.patch_offset()
    }

    /// Full `T×T` map of one head.
    pub fn map(&self, block: usize, head: usize) -> &[f32] {
        let t = self.tokens();
        let start = (block * self.heads() + head) * t * t;
        &self.maps.data()[start..start + t * t]
    }

    pub fn row(&self, block: usize, head: usize, i: usize) -> &[f32] {
        let t = self.tokens();
        &self.map(block, head)[i * t..(i + 1) * t]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNormParams {
    pub fn identity(dim: usize) -> Self {
        Self {
            gamma: Tensor::full(vec![dim], 1.0),
            beta: Tensor::zeros(vec![dim]),
        }
    }

    fn forward(&self, x: &Tensor, eps: f64) -> VitResult<Tensor> {
        Ok(tensor::layer_norm(x, &self.gamma, &self.beta, eps)?)
    }
}

/// Affine map with `[in, out]` weight; an absent bias acts as zero.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl LinearParams {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Tensor::zeros(vec![input, output]),
            bias: Some(Tensor::zeros(vec![output])),
        }
    }

    fn forward(&self, x: &Tensor) -> VitResult<Tensor> {
        Ok(tensor::linear(x, &self.weight, self.bias.as_ref())?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub norm1: LayerNormParams,
    pub q: LinearParams,
    pub k: LinearParams,
    pub v: LinearParams,
    pub proj: LinearParams,
    pub norm2: LayerNormParams,
    pub fc1: LinearParams,
    pub fc2: LinearParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViTParams {
    pub patch_embed: LinearParams,
    /// `[N + 1, D]`; row 0 is the `[cls]` position.
    pub pos_embed: Tensor,
    pub cls_token: Tensor,
    pub blocks: Vec<BlockParams>,
    pub norm: Option<LayerNormParams>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaeDecoderParams {
    pub embed: LinearParams,
    pub mask_token: Tensor,
    /// `[N + 1, D']`.
    pub pos_embed: Tensor,
    pub blocks: Vec<BlockParams>,
    pub norm: Option<LayerNormParams>,
    pub pred: LinearParams,
}

struct Init<'a> {
    seed: u64,
    stream: &'a mut u64,
}

impl Init<'_> {
    fn normal(&mut self, dims: Vec<usize>, scale: f32) -> Tensor {
        *self.stream += 1;
        rand_normal(dims, &RngStream::new(self.seed, *self.stream)).map(|x| x * scale)
    }

    fn linear(&mut self, input: usize, output: usize) -> LinearParams {
        let scale = 1.0 / (input as f32).sqrt();
        LinearParams {
            weight: self.normal(vec![input, output], scale),
            bias: Some(self.normal(vec![output], 0.1)),
        }
    }

    fn norm(&mut self, dim: usize) -> LayerNormParams {
        LayerNormParams {
            gamma: self.normal(vec![dim], 0.1).map(|x| 1.0 + x),
            beta: self.normal(vec![dim], 0.1),
        }
    }

    fn block(&mut self, dim: usize, hidden: usize) -> BlockParams {
        BlockParams {
            norm1: self.norm(dim),
            q: self.linear(dim, dim),
            k: self.linear(dim, dim),
            v: self.linear(dim, dim),
            proj: self.linear(dim, dim),
            norm2: self.norm(dim),
            fc1: self.linear(dim, hidden),
            fc2: self.linear(hidden, dim),
        }
    }
}

impl ViTParams {
    /// Randomly initialized encoder (for tests, synthetic data and tooling).
    pub fn random(cfg: &ViTConfig, seed: u64) -> VitResult<Self> {
        cfg.validate()?;
        let mut stream = 0;
        let mut init = Init {
            seed,
            stream: &mut stream,
        };
        let d = cfg.embed_dim;
        Ok(Self {
            patch_embed: init.linear(cfg.patch_dim(), d),
            pos_embed: init.normal(vec![cfg.num_patches() + 1, d], 0.5),
            cls_token: init.normal(vec![d], 0.5),
            blocks: (0..cfg.depth)
                .map(|_| init.block(d, cfg.mlp_hidden()))
                .collect(),
            norm: cfg.final_norm.then(|| init.norm(d)),
        })
    }

    /// Flat `(name, tensor)` list in the bundle naming scheme.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        push_linear(&mut out, "patch_embed", &self.patch_embed);
        out.push(("pos_embed".into(), self.pos_embed.clone()));
        out.push(("cls_token".into(), self.cls_token.clone()));
        for (i, b) in self.blocks.iter().enumerate() {
            push_block(&mut out, &format!("blocks.{i}"), b);
        }
        if let Some(n) = &self.norm {
            push_norm(&mut out, "norm", n);
        }
        out
    }

    /// Rebuilds parameters from named tensors, validating every shape against
    /// `cfg`.
    pub fn from_named(
        cfg: &ViTConfig,
        mut get: impl FnMut(&str) -> Option<Tensor>,
    ) -> VitResult<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let n = cfg.num_patches();
        let mut l = Loader { get: &mut get };
        Ok(Self {
            patch_embed: l.linear("patch_embed", cfg.patch_dim(), d)?,
            pos_embed: l.required("pos_embed", &[n + 1, d])?,
            cls_token: l.required("cls_token", &[d])?,
            blocks: (0..cfg.depth)
                .map(|i| l.block(&format!("blocks.{i}"), d, cfg.mlp_hidden()))
                .collect::<VitResult<_>>()?,
            norm: if cfg.final_norm {
                Some(l.norm("norm", d)?)
            } else {
                None
            },
        })
    }
}

impl MaeDecoderParams {
    pub fn random(cfg: &ViTConfig, seed: u64) -> VitResult<Self> {
        cfg.validate()?;
        let dc = cfg
            .decoder
            .as_ref()
            .ok_or_else(|| VitError::Config("config has no decoder".into()))?;
        let mut stream = 1 << 32;
        let mut init = Init {
            seed,
            stream: &mut stream,
        };
        let dd = dc.embed_dim;
        Ok(Self {
            embed: init.linear(cfg.embed_dim, dd),
            mask_token: init.normal(vec![dd], 0.5),
            pos_embed: init.normal(vec![cfg.num_patches() + 1, dd], 0.5),
            blocks: (0..dc.depth)
                .map(|_| init.block(dd, mlp_hidden(dd, dc.mlp_ratio)))
                .collect(),
            norm: dc.final_norm.then(|| init.norm(dd)),
            pred: init.linear(dd, cfg.patch_dim()),
        })
    }

    /// Decoder with every weight zero except the identity layer norms.
    pub fn zeros(cfg: &ViTConfig) -> VitResult<Self> {
        let dc = cfg
            .decoder
            .as_ref()
            .ok_or_else(|| VitError::Config("config has no decoder".into()))?;
        let dd = dc.embed_dim;
        let hidden = mlp_hidden(dd, dc.mlp_ratio);
        let block = BlockParams {
            norm1: LayerNormParams::identity(dd),
            q: LinearParams::zeros(dd, dd),
            k: LinearParams::zeros(dd, dd),
            v: LinearParams::zeros(dd, dd),
            proj: LinearParams::zeros(dd, dd),
            norm2: LayerNormParams::identity(dd),
            fc1: LinearParams::zeros(dd, hidden),
            fc2: LinearParams::zeros(hidden, dd),
        };
        Ok(Self {
            embed: LinearParams::zeros(cfg.embed_dim, dd),
            mask_token: Tensor::zeros(vec![dd]),
            pos_embed: Tensor::zeros(vec![cfg.num_patches() + 1, dd]),
            blocks: vec![block; dc.depth],
            norm: dc.final_norm.then(|| LayerNormParams::identity(dd)),
            pred: LinearParams::zeros(dd, cfg.patch_dim()),
        })
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        push_linear(&mut out, "decoder_embed", &self.embed);
        out.push(("mask_token".into(), self.mask_token.clone()));
        out.push(("decoder_pos_embed".into(), self.pos_embed.clone()));
        for (i, b) in self.blocks.iter().enumerate() {
            push_block(&mut out, &format!("decoder_blocks.{i}"), b);
        }
        if let Some(n) = &self.norm {
            push_norm(&mut out, "decoder_norm", n);
        }
        push_linear(&mut out, "decoder_pred", &self.pred);
        out
    }

    pub fn from_named(
        cfg: &ViTConfig,
        mut get: impl FnMut(&str) -> Option<Tensor>,
    ) -> VitResult<Self> {
        cfg.validate()?;
        let dc = cfg
            .decoder
            .as_ref()
            .ok_or_else(|| VitError::Config("config has no decoder".into()))?;
        let dd = dc.embed_dim;
        let mut l = Loader { get: &mut get };
        Ok(Self {
            embed: l.linear("decoder_embed", cfg.embed_dim, dd)?,
            mask_token: l.required("mask_token", &[dd])?,
            pos_embed: l.required("decoder_pos_embed", &[cfg.num_patches() + 1, dd])?,
            blocks: (0..dc.depth)
                .map(|i| {
                    l.block(
                        &format!("decoder_blocks.{i}"),
                        dd,
                        mlp_hidden(dd, dc.mlp_ratio),
                    )
                })
                .collect::<VitResult<_>>()?,
            norm: if dc.final_norm {
                Some(l.norm("decoder_norm", dd)?)
            } else {
                None
            },
            pred: l.linear("decoder_pred", dd, cfg.patch_dim())?,
        })
    }
}

fn push_linear(out: &mut Vec<(String, Tensor)>, prefix: &str, p: &LinearParams) {
    out.push((format!("{prefix}.weight"), p.weight.clone()));
    if let Some(b) = &p.bias {
        out.push((format!("{prefix}.bias"), b.clone()));
    }
}

fn push_norm(out: &mut Vec<(String, Tensor)>, prefix: &str, p: &LayerNormParams) {
    out.push((format!("{prefix}.weight"), p.gamma.clone()));
    out.push((format!("{prefix}.bias"), p.beta.clone()));
}

fn push_block(out: &mut Vec<(String, Tensor)>, prefix: &str, b: &BlockParams) {
    push_norm(out, &format!("{prefix}.norm1"), &b.norm1);
    push_linear(out, &format!("{prefix}.attn.q"), &b.q);
    push_linear(out, &format!("{prefix}.attn.k"), &b.k);
    push_linear(out, &format!("{prefix}.attn.v"), &b.v);
    push_linear(out, &format!("{prefix}.attn.proj"), &b.proj);
    push_norm(out, &format!("{prefix}.norm2"), &b.norm2);
    push_linear(out, &format!("{prefix}.mlp.fc1"), &b.fc1);
    push_linear(out, &format!("{prefix}.mlp.fc2"), &b.fc2);
}

struct Loader<'a, F: FnMut(&str) -> Option<Tensor>> {
    get: &'a mut F,
}

impl<F: FnMut(&str) -> Option<Tensor>> Loader<'_, F> {
    fn optional(&mut self, name: &str, dims: &[usize]) -> VitResult<Option<Tensor>> {
        match (self.get)(name) {
            None => Ok(None),
            Some(t) if t.dims() == dims => Ok(Some(t)),
            Some(t) => Err(VitError::Shape {
                what: name.to_string(),
                expected: dims.to_vec(),
                got: t.dims().to_vec(),
            }),
        }
    }

    fn required(&mut self, name: &str, dims: &[usize]) -> VitResult<Tensor> {
        self.optional(name, dims)?
            .ok_or_else(|| VitError::MissingTensor(name.to_string()))
    }

    fn linear(&mut self, prefix: &str, input: usize, output: usize) -> VitResult<LinearParams> {
        Ok(LinearParams {
            weight: self.required(&format!("{prefix}.weight"), &[input, output])?,
            bias: self.optional(&format!("{prefix}.bias"), &[output])?,
        })
    }

    fn norm(&mut self, prefix: &str, dim: usize) -> VitResult<LayerNormParams> {
        Ok(LayerNormParams {
            gamma: self.required(&format!("{prefix}.weight"), &[dim])?,
            beta: self.required(&format!("{prefix}.bias"), &[dim])?,
        })
    }

    fn block(&mut self, prefix: &str, dim: usize, hidden: usize) -> VitResult<BlockParams> {
        Ok(BlockParams {
            norm1: self.norm(&format!("{prefix}.norm1"), dim)?,
            q: self.linear(&format!("{prefix}.attn.q"), dim, dim)?,
            k: self.linear(&format!("{prefix}.attn.k"), dim, dim)?,
            v: self.linear(&format!("{prefix}.attn.v"), dim, dim)?,
            proj: self.linear(&format!("{prefix}.attn.proj"), dim, dim)?,
            norm2: self.norm(&format!("{prefix}.norm2"), dim)?,
            fc1: self.linear(&format!("{prefix}.mlp.fc1"), dim, hidden)?,
            fc2: self.linear(&format!("{prefix}.mlp.fc2"), hidden, dim)?,
        })
    }
}

/// Splits an `H×W×C` image into `N×(P²·C)` patches.
pub fn patchify(image: &Tensor, patch: usize) -> VitResult<Tensor> {
    let (h, w, c) = match image.dims() {
        [h, w, c] => (*h, *w, *c),
        d => {
            return Err(VitError::Shape {
                what: "image".into(),
                expected: vec![0, 0, 0],
                got: d.to_vec(),
            })
        }
    };
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(VitError::Config(format!(
            "image {h}x{w} is not divisible into {patch}x{patch} patches"
        )));
    }
    let (gr, gc) = (h / patch, w / patch);
    let src = image.data();
    let mut out = Vec::with_capacity(src.len());
    for pr in 0..gr {
        for pc in 0..gc {
            for r in 0..patch {
                let y = pr * patch + r;
                let start = (y * w + pc * patch) * c;
                out.extend_from_slice(&src[start..start + patch * c]);
            }
        }
    }
    Ok(Tensor::from_vec(vec![gr * gc, patch * patch * c], out)?)
}

/// Inverse of [`patchify`].
pub fn unpatchify(
    patches: &Tensor,
    height: usize,
    width: usize,
    channels: usize,
    patch: usize,
) -> VitResult<Tensor> {
    let (gr, gc) = (height / patch, width / patch);
    let expected = [gr * gc, patch * patch * channels];
    if patches.dims() != expected || !height.is_multiple_of(patch) || !width.is_multiple_of(patch) {
        return Err(VitError::Shape {
            what: "patches".into(),
            expected: expected.to_vec(),
            got: patches.dims().to_vec(),
        });
    }
    let mut img = vec![0.0f32; height * width * channels];
    let row_len = patch * channels;
    for pr in 0..gr {
        for pc in 0..gc {
            let p = patches.row(pr * gc + pc);
            for r in 0..patch {
                let y = pr * patch + r;
                let dst = (y * width + pc * patch) * channels;
                img[dst..dst + row_len].copy_from_slice(&p[r * row_len..(r + 1) * row_len]);
            }
        }
    }
    Ok(Tensor::from_vec(vec![height, width, channels], img)?)
}

/// `z0 = [x_cls + p_0; x_p·W_e + b + p_{1..N}]`.
pub fn embed(patches: &Tensor, params: &ViTParams) -> VitResult<TokenSequence> {
    let (n, pd) = patches.shape2()?;
    let (wi, d) = params.patch_embed.weight.shape2()?;
    if pd != wi {
        return Err(VitError::Shape {
            what: "patch dim".into(),
            expected: vec![wi],
            got: vec![pd],
        });
    }
    if params.pos_embed.dims() != [n + 1, d] {
        return Err(VitError::Shape {
            what: "pos_embed".into(),
            expected: vec![n + 1, d],
            got: params.pos_embed.dims().to_vec(),
        });
    }
    let zp = params.patch_embed.forward(patches)?;
    let mut data = Vec::with_capacity((n + 1) * d);
    data.extend(
        params
            .cls_token
            .data()
            .iter()
            .zip(params.pos_embed.row(0))
            .map(|(a, b)| a + b),
    );
    for i in 0..n {
        data.extend(
            zp.row(i)
                .iter()
                .zip(params.pos_embed.row(i + 1))
                .map(|(a, b)| a + b),
        );
    }
    TokenSequence::new(Tensor::from_vec(vec![n + 1, d], data)?, true, 0)
}

/// One self-attention head: `a = softmax(q kᵀ / sqrt(d))`, `o = a v`.
pub fn attention_head<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
) -> VitResult<(Tensor<T>, Tensor<T>)> {
    let (t, dh) = q.shape2()?;
    if k.dims() != q.dims() || v.dims() != q.dims() {
        return Err(VitError::Shape {
            what: "q/k/v".into(),
            expected: q.dims().to_vec(),
            got: k.dims().to_vec(),
        });
    }
    if t == 0 {
        return Err(VitError::EmptySequence);
    }
    let scale = T::from_f64_lossy(1.0 / (dh as f64).sqrt());
    let mut attn = Vec::with_capacity(t * t);
    let mut logits = vec![T::zero(); t];
    for i in 0..t {
        let qi = q.row(i);
        for (j, l) in logits.iter_mut().enumerate() {
            let kj = k.row(j);
            let dot = qi
                .iter()
                .zip(kj)
                .fold(T::zero(), |acc, (&a, &b)| acc + a * b);
            *l = dot * scale;
        }
        attn.extend(tensor::softmax_slice(&logits)?);
    }
    let attn = Tensor::from_vec(vec![t, t], attn)?;
    let out = tensor::matmul(&attn, v)?;
    Ok((out, attn))
}

fn split_head(x: &Tensor, head: usize, head_dim: usize) -> Tensor {
    let (t, d) = (x.dims()[0], x.dims()[1]);
    let mut data = Vec::with_capacity(t * head_dim);
    for i in 0..t {
        data.extend_from_slice(&x.data()[i * d + head * head_dim..i * d + (head + 1) * head_dim]);
    }
    Tensor::from_vec(vec![t, head_dim], data).expect("consistent head split")
}

fn block_forward(
    x: &Tensor,
    b: &BlockParams,
    heads: usize,
    eps: f64,
    capture: Option<&mut Vec<f32>>,
) -> VitResult<Tensor> {
    let (t, d) = x.shape2()?;
    let hd = d / heads;
    let h = b.norm1.forward(x, eps)?;
    let q = b.q.forward(&h)?;
    let k = b.k.forward(&h)?;
    let v = b.v.forward(&h)?;
    let mut concat = vec![0.0f32; t * d];
    let mut maps = capture;
    for head in 0..heads {
        let (o, a) = attention_head(
            &split_head(&q, head, hd),
            &split_head(&k, head, hd),
            &split_head(&v, head, hd),
        )?;
        for i in 0..t {
            concat[i * d + head * hd..i * d + (head + 1) * hd].copy_from_slice(o.row(i));
        }
        if let Some(m) = maps.as_deref_mut() {
            m.extend_from_slice(a.data());
        }
    }
    let attn_out = b.proj.forward(&Tensor::from_vec(vec![t, d], concat)?)?;
    let x = tensor::add(x, &attn_out)?;
    let h2 = b.norm2.forward(&x, eps)?;
    let m = b.fc2.forward(&tensor::gelu(&b.fc1.forward(&h2)?)?)?;
    Ok(tensor::add(&x, &m)?)
}

fn run_blocks(
    mut x: Tensor,
    blocks: &[BlockParams],
    heads: usize,
    eps: f64,
    capture: bool,
) -> VitResult<(Tensor, Option<Tensor>)> {
    let t = x.dims()[0];
    let mut maps = capture.then(|| Vec::with_capacity(blocks.len() * heads * t * t));
    for b in blocks {
        x = block_forward(&x, b, heads, eps, maps.as_mut())?;
    }
    let maps = match maps {
        Some(m) => Some(Tensor::from_vec(vec![blocks.len(), heads, t, t], m)?),
        None => None,
    };
    Ok((x, maps))
}

/// Runs the encoder blocks over `z0`.
///
/// With `stop_block = Some(l)` only the first `l` blocks run and the final
/// norm is skipped unless `l == depth`.
pub fn vit_forward(
    z0: &TokenSequence,
    params: &ViTParams,
    cfg: &ViTConfig,
    capture_attention: bool,
    stop_block: Option<usize>,
) -> VitResult<(TokenSequence, Option<AttentionTensor>)> {
    let depth = params.blocks.len();
    let stop = stop_block.unwrap_or(depth);
    if stop > depth {
        return Err(VitError::StopBlock { stop, depth });
    }
    if z0.dim() != cfg.embed_dim {
        return Err(VitError::Shape {
            what: "token dim".into(),
            expected: vec![cfg.embed_dim],
            got: vec![z0.dim()],
        });
    }
    let (mut x, maps) = run_blocks(
        z0.tokens.clone(),
        &params.blocks[..stop],
        cfg.heads,
        cfg.layer_norm_eps,
        capture_attention,
    )?;
    if stop == depth {
        if let Some(n) = &params.norm {
            x = n.forward(&x, cfg.layer_norm_eps)?;
        }
    }
    let attn = match maps {
        Some(m) => Some(AttentionTensor::new(m, z0.has_cls)?),
        None => None,
    };
    Ok((TokenSequence::new(x, z0.has_cls, stop)?, attn))
}

/// Forward passes for many sequences; per-item results are independent of
/// how the work is split across threads.
pub fn vit_forward_batch(
    batch: &[TokenSequence],
    params: &ViTParams,
    cfg: &ViTConfig,
    capture_attention: bool,
    stop_block: Option<usize>,
) -> VitResult<Vec<(TokenSequence, Option<AttentionTensor>)>> {
    batch
        .par_iter()
        .map(|z| vit_forward(z, params, cfg, capture_attention, stop_block))
        .collect()
}

/// Binary keep-mask over patches (`true` = visible).
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSpec {
    pub keep: Vec<bool>,
    pub rho: f64,
}

impl MaskSpec {
    pub fn all_visible(n: usize) -> Self {
        Self {
            keep: vec![true; n],
            rho: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }

    pub fn kept_indices(&self) -> Vec<usize> {
        self.keep
            .iter()
            .enumerate()
            .filter(|(_, k)| **k)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn num_kept(&self) -> usize {
        self.keep.iter().filter(|k| **k).count()
    }

    pub fn num_dropped(&self) -> usize {
        self.len() - self.num_kept()
    }
}

/// Number of patches dropped at ratio `rho`: `floor(rho·N)`.
pub fn num_masked(n: usize, rho: f64) -> usize {
    // The epsilon absorbs representation error such as 0.29 * 100 = 28.999...
    ((rho * n as f64) + 1e-9).floor() as usize
}

/// Keeps exactly `N − floor(rho·N)` positions sampled uniformly without
/// replacement.
pub fn sample_mask(n: usize, rho: f64, rng: &RngStream) -> VitResult<MaskSpec> {
    if !(0.0..1.0).contains(&rho) {
        return Err(VitError::Config(format!(
            "mask ratio {rho} is outside [0, 1)"
        )));
    }
    let keep_count = n - num_masked(n, rho);
    let mut keep = vec![false; n];
    let mut g = rng.generator();
    for i in index::sample(&mut g, n, keep_count) {
        keep[i] = true;
    }
    Ok(MaskSpec { keep, rho })
}

/// Keeps the `[cls]` token plus the visible patches, in original order.
pub fn apply_mask(z0: &TokenSequence, mask: &MaskSpec) -> VitResult<TokenSequence> {
    if !z0.has_cls {
        return Err(VitError::NoCls);
    }
    if mask.len() != z0.num_patches() {
        return Err(VitError::MaskLength {
            mask: mask.len(),
            patches: z0.num_patches(),
        });
    }
    let rows: Vec<usize> = std::iter::once(0)
        .chain(mask.kept_indices().into_iter().map(|i| i + 1))
        .collect();
    TokenSequence::new(z0.tokens.select_rows(&rows)?, true, z0.block_index)
}

/// Scatters visible patch rows back to their positions and fills every
/// dropped position with `mask_token`. Returns an `N×D` matrix.
pub fn insert_mask_tokens(
    visible: &Tensor,
    mask: &MaskSpec,
    mask_token: &Tensor,
) -> VitResult<Tensor> {
    let (v, d) = visible.shape2()?;
    if v != mask.num_kept() || mask_token.len() != d {
        return Err(VitError::Shape {
            what: "visible tokens".into(),
            expected: vec![mask.num_kept(), mask_token.len()],
            got: visible.dims().to_vec(),
        });
    }
    let mut out = Vec::with_capacity(mask.len() * d);
    let mut next = 0;
    for &k in &mask.keep {
        if k {
            out.extend_from_slice(visible.row(next));
            next += 1;
        } else {
            out.extend_from_slice(mask_token.data());
        }
    }
    Ok(Tensor::from_vec(vec![mask.len(), d], out)?)
}

/// Decodes encoder output for the visible tokens into per-patch pixel
/// predictions `N×(P²·C)`.
pub fn mae_decode(
    encoded: &TokenSequence,
    mask: &MaskSpec,
    dec: &MaeDecoderParams,
    cfg: &ViTConfig,
) -> VitResult<Tensor> {
    let dc = cfg
        .decoder
        .as_ref()
        .ok_or_else(|| VitError::Config("config has no decoder".into()))?;
    if !encoded.has_cls {
        return Err(VitError::NoCls);
    }
    if encoded.num_patches() != mask.num_kept() {
        return Err(VitError::Shape {
            what: "encoded tokens".into(),
            expected: vec![mask.num_kept() + 1],
            got: vec![encoded.rows()],
        });
    }
    let x = dec.embed.forward(&encoded.tokens)?;
    let (_, dd) = x.shape2()?;
    let visible = x.select_rows(&(1..x.dims()[0]).collect::<Vec<_>>())?;
    let full_patches = insert_mask_tokens(&visible, mask, &dec.mask_token)?;
    let mut full = Vec::with_capacity((mask.len() + 1) * dd);
    full.extend_from_slice(x.row(0));
    full.extend_from_slice(full_patches.data());
    let full = tensor::add(
        &Tensor::from_vec(vec![mask.len() + 1, dd], full)?,
        &dec.pos_embed,
    )?;
    let (mut y, _) = run_blocks(full, &dec.blocks, dc.heads, cfg.layer_norm_eps, false)?;
    if let Some(n) = &dec.norm {
        y = n.forward(&y, cfg.layer_norm_eps)?;
    }
    let patches = y.select_rows(&(1..=mask.len()).collect::<Vec<_>>())?;
    dec.pred.forward(&patches)
}

/// Mean squared error over the dropped patches only (per-patch mean over
/// pixels, then mean over dropped patches). With `normalize_target` each
/// target patch is standardized by its own mean and variance first.
pub fn mae_loss(
    pred: &Tensor,
    target: &Tensor,
    mask: &MaskSpec,
    normalize_target: bool,
) -> VitResult<f64> {
    if pred.dims() != target.dims() {
        return Err(VitError::Shape {
            what: "prediction".into(),
            expected: target.dims().to_vec(),
            got: pred.dims().to_vec(),
        });
    }
    let (n, pd) = pred.shape2()?;
    if mask.len() != n {
        return Err(VitError::MaskLength {
            mask: mask.len(),
            patches: n,
        });
    }
    if mask.num_dropped() == 0 {
        return Err(VitError::NoDroppedPatches);
    }
    let mut total = 0.0f64;
    for (i, &kept) in mask.keep.iter().enumerate() {
        if kept {
            continue;
        }
        let t = target.row(i);
        let (mean, inv_std) = if normalize_target {
            let m = t.iter().map(|&x| x as f64).sum::<f64>() / pd as f64;
            let var = t.iter().map(|&x| (x as f64 - m).powi(2)).sum::<f64>() / pd as f64;
            (m, 1.0 / (var + 1e-6).sqrt())
        } else {
            (0.0, 1.0)
        };
        let se: f64 = pred
            .row(i)
            .iter()
            .zip(t)
            .map(|(&p, &x)| {
                let e = p as f64 - (x as f64 - mean) * inv_std;
                e * e
            })
            .sum();
        total += se / pd as f64;
    }
    Ok(total / mask.num_dropped() as f64)
}
