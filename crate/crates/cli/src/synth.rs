use std::collections::BTreeMap;
use std::path::PathBuf;

use clap::{Args, ValueEnum};
use selagg_core::storage::{self, Bundle, BundleItem, DatasetItem, DatasetManifest};
use selagg_core::synth::{self, AttentionSynthConfig, BagsConfig, BoxesConfig};
use selagg_core::tensor::Tensor;
use selagg_core::vit::{MaeDecoderParams, ViTConfig, ViTParams};
use serde::Serialize;
use serde_json::json;

use crate::common::{self, ROLE_ATTENTION, ROLE_SELECTOR, ROLE_TOKENS};
use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Signal-token classification bags (feature bundle).
    Bags,
    /// Row-stochastic attention tensors (feature bundle with attention only).
    Attention,
    /// Patch score maps with ground-truth boxes.
    Boxes,
    /// Random tiny ViT weights plus an image manifest.
    Vit,
}

#[derive(Debug, Args, Serialize)]
#[command(args_override_self = true)]
pub struct SynthArgs {
    /// Dataset to generate.
    #[arg(long, value_enum)]
    pub task: Task,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Seed for every generated value.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Items (training bags for `bags`).
    #[arg(long)]
    pub n: Option<usize>,
    /// Evaluation bags.
    #[arg(long)]
    pub eval_n: Option<usize>,
    /// Token dimension for bags.
    #[arg(long)]
    pub d: Option<usize>,
    /// Classes for bags.
    #[arg(long)]
    pub k: Option<usize>,
    /// Patch tokens per bag, or patches per attention map.
    #[arg(long)]
    pub tokens: Option<usize>,
    /// Length of the marker on the signal token.
    #[arg(long)]
    pub salience: Option<f64>,
    /// Blocks per attention tensor.
    #[arg(long)]
    pub blocks: Option<usize>,
    /// Heads per attention block.
    #[arg(long)]
    pub heads: Option<usize>,
    /// Attention logit scale; 0 gives uniform rows.
    #[arg(long)]
    pub sharpness: Option<f64>,
    /// Omit the [cls] token.
    #[arg(long)]
    pub no_cls: bool,
    /// Patch grid as ROWSxCOLS for boxes.
    #[arg(long)]
    pub grid: Option<String>,
    /// Image size as HEIGHTxWIDTH for boxes.
    #[arg(long)]
    pub image_size: Option<String>,
    /// Log-score noise for boxes; 0 gives perfect maps.
    #[arg(long)]
    pub noise: Option<f64>,
}

fn positive(v: usize, flag: &str) -> CliResult<usize> {
    if v == 0 {
        Err(CliError::usage(format!("{flag} must be positive")))
    } else {
        Ok(v)
    }
}

fn meta(pairs: Vec<(&str, serde_json::Value)>) -> BTreeMap<String, serde_json::Value> {
    pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

fn bags(a: &SynthArgs) -> CliResult<()> {
    let d = BagsConfig::default();
    let cfg = BagsConfig {
        train: a.n.unwrap_or(d.train),
        eval: a.eval_n.unwrap_or(d.eval),
        tokens: positive(a.tokens.unwrap_or(d.tokens), "--tokens")?,
        dim: positive(a.d.unwrap_or(d.dim), "--d")?,
        classes: positive(a.k.unwrap_or(d.classes), "--k")?,
        salience: a.salience.unwrap_or(d.salience),
        with_cls: !a.no_cls,
        seed: a.seed,
        ..d
    };
    positive(cfg.train, "--n")?;
    let data = synth::synth_bags(&cfg);
    let mut b = Bundle::new("features");
    b.classes = (0..cfg.classes).map(|c| format!("class_{c}")).collect();
    let mut signal = BTreeMap::new();
    for bag in data {
        let id = bag.sample.id.clone();
        let name = format!("tokens/{id}");
        b.insert(name.clone(), bag.sample.tokens.tokens);
        signal.insert(id.clone(), bag.signal_index);
        b.items.push(BundleItem {
            id,
            tensors: BTreeMap::from([(ROLE_TOKENS.to_string(), name)]),
            label: Some(bag.sample.label),
            split: Some(bag.split.name().to_string()),
            gt_boxes: None,
        });
    }
    b.meta = meta(vec![
        ("block", json!(0)),
        ("has_cls", json!(cfg.with_cls)),
        ("seed", json!(a.seed)),
        ("signal_index", json!(signal)),
        ("synth", serde_json::to_value(&cfg).unwrap_or_default()),
    ]);
    storage::save_bundle(&a.out, &b)?;
    println!("wrote {} bags to {}", b.items.len(), a.out.display());
    Ok(())
}

fn attention(a: &SynthArgs) -> CliResult<()> {
    let d = AttentionSynthConfig::default();
    let cfg = AttentionSynthConfig {
        images: positive(a.n.unwrap_or(d.images), "--n")?,
        blocks: positive(a.blocks.unwrap_or(d.blocks), "--blocks")?,
        heads: positive(a.heads.unwrap_or(d.heads), "--heads")?,
        patches: positive(a.tokens.unwrap_or(d.patches), "--tokens")?,
        with_cls: !a.no_cls,
        sharpness: a.sharpness.unwrap_or(d.sharpness),
        seed: a.seed,
    };
    let mut b = Bundle::new("features");
    for (id, attn) in synth::synth_attention(&cfg) {
        let name = format!("attention/{id}");
        b.insert(name.clone(), attn.maps);
        b.items.push(BundleItem {
            id,
            tensors: BTreeMap::from([(ROLE_ATTENTION.to_string(), name)]),
            ..Default::default()
        });
    }
    let mut m = vec![
        ("has_cls", json!(cfg.with_cls)),
        ("seed", json!(a.seed)),
        ("synth", serde_json::to_value(&cfg).unwrap_or_default()),
    ];
    let s = (cfg.patches as f64).sqrt().round() as usize;
    if s * s == cfg.patches {
        m.push(("grid_rows", json!(s)));
        m.push(("grid_cols", json!(s)));
    }
    b.meta = meta(m);
    storage::save_bundle(&a.out, &b)?;
    println!(
        "wrote {} attention tensors to {}",
        b.items.len(),
        a.out.display()
    );
    Ok(())
}

fn boxes(a: &SynthArgs) -> CliResult<()> {
    let d = BoxesConfig::default();
    let (rows, cols) = match &a.grid {
        Some(g) => common::parse_pair(g, "--grid")?,
        None => (d.grid_rows, d.grid_cols),
    };
    let (h, w) = match &a.image_size {
        Some(s) => common::parse_pair(s, "--image-size")?,
        None => (d.image_height, d.image_width),
    };
    let cfg = BoxesConfig {
        images: positive(a.n.unwrap_or(d.images), "--n")?,
        grid_rows: positive(rows, "--grid")?,
        grid_cols: positive(cols, "--grid")?,
        image_height: positive(h, "--image-size")?,
        image_width: positive(w, "--image-size")?,
        noise: a.noise.unwrap_or(d.noise),
        seed: a.seed,
    };
    let mut b = Bundle::new("features");
    for item in synth::synth_boxes(&cfg) {
        let name = format!("selector/{}", item.id);
        let scores: Vec<f32> = item.scores.iter().map(|&s| s as f32).collect();
        b.insert(name.clone(), Tensor::from_vec(vec![scores.len()], scores)?);
        b.items.push(BundleItem {
            id: item.id,
            tensors: BTreeMap::from([(ROLE_SELECTOR.to_string(), name)]),
            gt_boxes: Some(vec![item.gt.to_array()]),
            ..Default::default()
        });
    }
    b.meta = meta(vec![
        ("grid_rows", json!(cfg.grid_rows)),
        ("grid_cols", json!(cfg.grid_cols)),
        ("image_height", json!(cfg.image_height)),
        ("image_width", json!(cfg.image_width)),
        ("seed", json!(a.seed)),
        ("synth", serde_json::to_value(&cfg).unwrap_or_default()),
    ]);
    storage::save_bundle(&a.out, &b)?;
    println!("wrote {} score maps to {}", b.items.len(), a.out.display());
    Ok(())
}

fn vit(a: &SynthArgs) -> CliResult<()> {
    let cfg = ViTConfig::tiny();
    let params = ViTParams::random(&cfg, a.seed)?;
    let decoder = MaeDecoderParams::random(&cfg, a.seed)?;
    storage::save_vit(&a.out.join("weights"), &cfg, &params, Some(&decoder))?;
    let n = positive(a.n.unwrap_or(8), "--n")?;
    let k = positive(a.k.unwrap_or(2), "--k")?;
    let images_dir = a.out.join("images");
    common::ensure_dir(&images_dir)?;
    let mut items = Vec::new();
    let images = synth::synth_images(n, cfg.image_height, cfg.image_width, cfg.channels, a.seed);
    for (i, (id, img)) in images.into_iter().enumerate() {
        let rel = format!("images/{id}.satf");
        storage::write_tensor(&a.out.join(&rel), &img)?;
        items.push(DatasetItem {
            id,
            image: Some(rel),
            label: Some(i % k),
            split: Some(if i % 4 == 3 { "eval" } else { "train" }.to_string()),
            gt_boxes: Some(vec![[
                0.0,
                0.0,
                cfg.image_width as f64 / 2.0,
                cfg.image_height as f64 / 2.0,
            ]]),
            ..Default::default()
        });
    }
    let manifest = DatasetManifest {
        classes: (0..k).map(|c| format!("class_{c}")).collect(),
        items,
    };
    manifest.save(&a.out.join("dataset.json"))?;
    println!(
        "wrote tiny ViT weights and {n} images to {}",
        a.out.display()
    );
    Ok(())
}

pub fn run(a: SynthArgs) -> CliResult<()> {
    common::ensure_dir(
        a.out
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(std::path::Path::new(".")),
    )?;
    match a.task {
        Task::Bags => bags(&a),
        Task::Attention => attention(&a),
        Task::Boxes => boxes(&a),
        Task::Vit => {
            common::ensure_dir(&a.out)?;
            vit(&a)
        }
    }
}
