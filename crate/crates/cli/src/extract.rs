use std::collections::BTreeMap;
use std::path::PathBuf;

use clap::Args;
use rayon::prelude::*;
use selagg_core::storage::{self, Bundle, BundleItem, DatasetManifest};
use selagg_core::tensor::Tensor;
use selagg_core::vit::{self, MaskSpec};
use selagg_core::RngStream;
use serde::Serialize;
use serde_json::json;

use crate::common::{ROLE_ATTENTION, ROLE_MASK, ROLE_TOKENS};
use crate::error::{CliError, CliResult};

#[derive(Debug, Args, Serialize)]
#[command(args_override_self = true)]
pub struct ExtractArgs {
    /// Weights bundle directory.
    #[arg(long)]
    pub weights: PathBuf,
    /// Dataset manifest (JSON) listing SATF images stored as H×W×C.
    #[arg(long)]
    pub images: PathBuf,
    /// Output feature bundle directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Take tokens after this many blocks (defaults to the model depth).
    #[arg(long)]
    pub block: Option<usize>,
    /// Fraction of patches dropped before the encoder.
    #[arg(long, default_value_t = 0.0)]
    pub mask_ratio: f64,
    /// Seed for per-image masks.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also save per-block attention maps.
    #[arg(long)]
    pub capture_attn: bool,
}

struct Extracted {
    tokens: Tensor,
    attention: Option<Tensor>,
    mask: Option<Tensor>,
}

pub fn run(a: ExtractArgs) -> CliResult<()> {
    if !(0.0..1.0).contains(&a.mask_ratio) {
        return Err(CliError::usage(format!(
            "--mask-ratio must be in [0, 1), got {}",
            a.mask_ratio
        )));
    }
    let (cfg, params, _) = storage::load_vit(&a.weights)?;
    let block = a.block.unwrap_or(cfg.depth);
    if block > cfg.depth {
        return Err(CliError::usage(format!(
            "--block {block} exceeds model depth {}",
            cfg.depth
        )));
    }
    let manifest = DatasetManifest::load(&a.images)?;
    if manifest.items.is_empty() {
        return Err(CliError::data("image manifest lists no items"));
    }
    let n = cfg.num_patches();
    let outputs = manifest
        .items
        .par_iter()
        .map(|item| {
            let rel = item
                .image
                .as_deref()
                .ok_or_else(|| CliError::data(format!("item `{}` has no image path", item.id)))?;
            let image = storage::read_tensor(&DatasetManifest::resolve(&a.images, rel))?;
            let expected = [cfg.image_height, cfg.image_width, cfg.channels];
            if image.dims() != expected {
                return Err(CliError::data(format!(
                    "image `{}` has dims {:?}, model expects {:?}",
                    item.id,
                    image.dims(),
                    expected
                )));
            }
            let patches = vit::patchify(&image, cfg.patch_size)?;
            let z0 = vit::embed(&patches, &params)?;
            let mask = if a.mask_ratio > 0.0 {
                vit::sample_mask(n, a.mask_ratio, &RngStream::keyed(a.seed, &item.id))?
            } else {
                MaskSpec::all_visible(n)
            };
            let visible = vit::apply_mask(&z0, &mask)?;
            let (out, attn) =
                vit::vit_forward(&visible, &params, &cfg, a.capture_attn, Some(block))?;
            let mask = (a.mask_ratio > 0.0)
                .then(|| {
                    Tensor::from_vec(
                        vec![n],
                        mask.keep.iter().map(|&k| f32::from(u8::from(k))).collect(),
                    )
                })
                .transpose()?;
            Ok(Extracted {
                tokens: out.tokens,
                attention: attn.map(|t| t.maps),
                mask,
            })
        })
        .collect::<CliResult<Vec<_>>>()?;

    let mut bundle = Bundle::new("features");
    bundle.classes = manifest.classes.clone();
    for (item, ex) in manifest.items.iter().zip(outputs) {
        let mut roles = BTreeMap::new();
        let tname = format!("tokens/{}", item.id);
        bundle.insert(tname.clone(), ex.tokens);
        roles.insert(ROLE_TOKENS.to_string(), tname);
        if let Some(att) = ex.attention {
            let name = format!("attention/{}", item.id);
            bundle.insert(name.clone(), att);
            roles.insert(ROLE_ATTENTION.to_string(), name);
        }
        if let Some(m) = ex.mask {
            let name = format!("mask/{}", item.id);
            bundle.insert(name.clone(), m);
            roles.insert(ROLE_MASK.to_string(), name);
        }
        bundle.items.push(BundleItem {
            id: item.id.clone(),
            tensors: roles,
            label: item.label,
            split: item.split.clone(),
            gt_boxes: item.gt_boxes.clone(),
        });
    }
    let (rows, cols) = cfg.grid();
    let meta = [
        ("block", json!(block)),
        ("has_cls", json!(true)),
        ("mask_ratio", json!(a.mask_ratio)),
        ("seed", json!(a.seed)),
        ("grid_rows", json!(rows)),
        ("grid_cols", json!(cols)),
        ("image_height", json!(cfg.image_height)),
        ("image_width", json!(cfg.image_width)),
    ];
    bundle.meta = meta.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
    storage::save_bundle(&a.out, &bundle)?;
    println!(
        "extracted {} images at block {block} into {}",
        bundle.items.len(),
        a.out.display()
    );
    Ok(())
}
