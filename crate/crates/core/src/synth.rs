//! Seeded synthetic datasets: signal-token classification bags, attention
//! tensors with known structure, and heatmap/box localization sets.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::localization::BoundingBox;
use crate::probe::Sample;
use crate::rng::RngStream;
use crate::tensor::{self, Tensor};
use crate::vit::{AttentionTensor, TokenSequence};

const SHARED_STREAM: u64 = 0;
const ITEM_STREAM: u64 = 1 << 40;

fn normal(g: &mut impl Rng) -> f64 {
    g.sample(StandardNormal)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BagsConfig {
    pub train: usize,
    pub eval: usize,
    /// Patch tokens per bag.
    pub tokens: usize,
    pub dim: usize,
    pub classes: usize,
    /// Length of the shared marker direction on the signal token.
    pub salience: f64,
    /// Per-dimension std of the class prototypes.
    pub prototype_scale: f64,
    /// Per-dimension std of the noise added to the signal token.
    pub signal_noise: f64,
    /// Prepend a `[cls]` row holding the mean of the patch tokens.
    pub with_cls: bool,
    pub seed: u64,
}

impl Default for BagsConfig {
    fn default() -> Self {
        Self {
            train: 5000,
            eval: 1000,
            tokens: 32,
            dim: 64,
            classes: 10,
            salience: 4.0,
            prototype_scale: 0.5,
            signal_noise: 0.5,
            with_cls: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthBag {
    pub sample: Sample,
    pub split: Split,
    /// Patch index of the class-informative token.
    pub signal_index: usize,
}

/// Bags of `tokens` standard-normal patch tokens, exactly one of which (at a
/// uniformly random position) carries `salience·marker + prototype[label]`.
pub fn synth_bags(cfg: &BagsConfig) -> Vec<SynthBag> {
    let (d, n, k) = (cfg.dim, cfg.tokens, cfg.classes.max(1));
    let mut g = RngStream::new(cfg.seed, SHARED_STREAM).generator();
    let mut marker: Vec<f64> = (0..d).map(|_| normal(&mut g)).collect();
    let len = marker
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(f64::MIN_POSITIVE);
    marker.iter_mut().for_each(|x| *x /= len);
    let prototypes: Vec<Vec<f64>> = (0..k)
        .map(|_| {
            (0..d)
                .map(|_| normal(&mut g) * cfg.prototype_scale)
                .collect()
        })
        .collect();

    let specs: Vec<(Split, usize)> = (0..cfg.train)
        .map(|i| (Split::Train, i))
        .chain((0..cfg.eval).map(|i| (Split::Eval, i)))
        .collect();
    specs
        .par_iter()
        .enumerate()
        .map(|(global, &(split, i))| {
            let mut g = RngStream::new(cfg.seed, ITEM_STREAM + global as u64).generator();
            let label = g.random_range(0..k);
            let signal_index = g.random_range(0..n);
            let off = usize::from(cfg.with_cls);
            let mut data = vec![0.0f32; (n + off) * d];
            for p in 0..n {
                let row = &mut data[(p + off) * d..(p + off + 1) * d];
                if p == signal_index {
                    for (j, r) in row.iter_mut().enumerate() {
                        let v = cfg.salience * marker[j]
                            + prototypes[label][j]
                            + cfg.signal_noise * normal(&mut g);
                        *r = v as f32;
                    }
                } else {
                    row.iter_mut().for_each(|r| *r = normal(&mut g) as f32);
                }
            }
            if cfg.with_cls {
                for j in 0..d {
                    let mean = (0..n).map(|p| data[(p + 1) * d + j] as f64).sum::<f64>() / n as f64;
                    data[j] = mean as f32;
                }
            }
            let tokens = Tensor::from_vec(vec![n + off, d], data).expect("sized above");
            SynthBag {
                sample: Sample {
                    id: format!("{}-{i:05}", split.name()),
                    tokens: TokenSequence::new(tokens, cfg.with_cls, 0).expect("non-empty"),
                    label,
                    fixed_weights: None,
                },
                split,
                signal_index,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionSynthConfig {
    pub images: usize,
    pub blocks: usize,
    pub heads: usize,
    pub patches: usize,
    pub with_cls: bool,
    /// Logit scale of the final block; block `b` uses
    /// `sharpness·(b+1)/blocks`. Zero gives exactly uniform rows.
    pub sharpness: f64,
    pub seed: u64,
}

impl Default for AttentionSynthConfig {
    fn default() -> Self {
        Self {
            images: 8,
            blocks: 4,
            heads: 4,
            patches: 16,
            with_cls: true,
            sharpness: 3.0,
            seed: 0,
        }
    }
}

/// Row-stochastic attention tensors built as softmax of Gaussian logits.
pub fn synth_attention(cfg: &AttentionSynthConfig) -> Vec<(String, AttentionTensor)> {
    let t = cfg.patches + usize::from(cfg.with_cls);
    (0..cfg.images)
        .into_par_iter()
        .map(|i| {
            let mut g = RngStream::new(cfg.seed, ITEM_STREAM + i as u64).generator();
            let mut data = Vec::with_capacity(cfg.blocks * cfg.heads * t * t);
            for b in 0..cfg.blocks {
                let scale = if cfg.blocks == 0 {
                    0.0
                } else {
                    cfg.sharpness * (b + 1) as f64 / cfg.blocks as f64
                };
                for _ in 0..cfg.heads * t {
                    let logits: Vec<f64> = (0..t).map(|_| normal(&mut g) * scale).collect();
                    let row = tensor::softmax_slice(&logits).expect("finite logits");
                    data.extend(row.into_iter().map(|x| x as f32));
                }
            }
            let maps =
                Tensor::from_vec(vec![cfg.blocks, cfg.heads, t, t], data).expect("sized above");
            (
                format!("img-{i:05}"),
                AttentionTensor::new(maps, cfg.with_cls).expect("square maps"),
            )
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxesConfig {
    pub images: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub image_height: usize,
    pub image_width: usize,
    /// Std of the log-score noise; 0 gives perfect maps.
    pub noise: f64,
    pub seed: u64,
}

impl Default for BoxesConfig {
    fn default() -> Self {
        Self {
            images: 16,
            grid_rows: 7,
            grid_cols: 7,
            image_height: 112,
            image_width: 112,
            noise: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoxItem {
    pub id: String,
    /// Positive per-patch scores, row-major over the grid.
    pub scores: Vec<f64>,
    pub gt: BoundingBox,
}

/// A random patch-aligned ground-truth box per image and scores
/// `exp(2·inside + noise·ε)`.
pub fn synth_boxes(cfg: &BoxesConfig) -> Vec<BoxItem> {
    let (rows, cols) = (cfg.grid_rows.max(1), cfg.grid_cols.max(1));
    let ph = cfg.image_height as f64 / rows as f64;
    let pw = cfg.image_width as f64 / cols as f64;
    (0..cfg.images)
        .map(|i| {
            let mut g = RngStream::new(cfg.seed, ITEM_STREAM + i as u64).generator();
            let (r0, r1) = ordered_pair(&mut g, rows);
            let (c0, c1) = ordered_pair(&mut g, cols);
            let scores = (0..rows * cols)
                .map(|p| {
                    let (r, c) = (p / cols, p % cols);
                    let inside = (r0..r1).contains(&r) && (c0..c1).contains(&c);
                    (2.0 * f64::from(u8::from(inside)) + cfg.noise * normal(&mut g)).exp()
                })
                .collect();
            BoxItem {
                id: format!("img-{i:05}"),
                scores,
                gt: BoundingBox {
                    x0: c0 as f64 * pw,
                    y0: r0 as f64 * ph,
                    x1: c1 as f64 * pw,
                    y1: r1 as f64 * ph,
                },
            }
        })
        .collect()
}

/// `a < b` with both in `0..=n`.
fn ordered_pair(g: &mut impl Rng, n: usize) -> (usize, usize) {
    let a = g.random_range(0..n);
    let b = g.random_range(a + 1..=n);
    (a, b)
}

/// `H×W×C` images with standard-normal pixels.
pub fn synth_images(
    n: usize,
    height: usize,
    width: usize,
    channels: usize,
    seed: u64,
) -> Vec<(String, Tensor)> {
    (0..n)
        .map(|i| {
            let t = tensor::rand_normal(
                vec![height, width, channels],
                &RngStream::new(seed, ITEM_STREAM + i as u64),
            );
            (format!("img-{i:05}"), t)
        })
        .collect()
}
