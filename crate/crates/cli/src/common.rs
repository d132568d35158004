//! Helpers shared by subcommands: reading items out of feature/attention
//! bundles, grids and selector construction.

use std::path::Path;

use selagg_core::aggregation::{self, Activation, AggregatorMode};
use selagg_core::metrics::SelectionVector;
use selagg_core::probe::{probe_forward, ProbeParams, Sample};
use selagg_core::storage::{self, Bundle, BundleItem};
use selagg_core::vit::{AttentionTensor, TokenSequence};
use serde::Serialize;

use crate::error::{CliError, CliResult};

pub const ROLE_TOKENS: &str = "tokens";
pub const ROLE_ATTENTION: &str = "attention";
pub const ROLE_SELECTOR: &str = "selector";
pub const ROLE_MASK: &str = "mask";

/// One bundle item with whatever per-item tensors it carries.
#[derive(Debug, Clone)]
pub struct Item {
    pub id: String,
    pub tokens: Option<TokenSequence>,
    pub attention: Option<AttentionTensor>,
    pub selector: Option<Vec<f64>>,
    pub label: Option<usize>,
    pub split: Option<String>,
    pub gt_boxes: Option<Vec<[f64; 4]>>,
}

pub fn has_cls(bundle: &Bundle) -> bool {
    bundle.meta_bool("has_cls").unwrap_or(true)
}

fn item(bundle: &Bundle, it: &BundleItem) -> CliResult<Item> {
    let cls = has_cls(bundle);
    let block = bundle.meta_usize("block").unwrap_or(0);
    let tokens = bundle
        .item_tensor(it, ROLE_TOKENS)?
        .map(|t| TokenSequence::new(t.clone(), cls, block))
        .transpose()?;
    let attention = bundle
        .item_tensor(it, ROLE_ATTENTION)?
        .map(|t| AttentionTensor::new(t.clone(), cls))
        .transpose()?;
    let selector = bundle
        .item_tensor(it, ROLE_SELECTOR)?
        .map(|t| t.data().iter().map(|&x| x as f64).collect());
    Ok(Item {
        id: it.id.clone(),
        tokens,
        attention,
        selector,
        label: it.label,
        split: it.split.clone(),
        gt_boxes: it.gt_boxes.clone(),
    })
}

pub fn items(bundle: &Bundle) -> CliResult<Vec<Item>> {
    if bundle.items.is_empty() {
        return Err(CliError::data(format!(
            "bundle {} lists no items",
            bundle.source.as_deref().unwrap_or(Path::new("?")).display()
        )));
    }
    bundle.items.iter().map(|it| item(bundle, it)).collect()
}

/// Patch grid from bundle metadata, else the square root of `patches`.
pub fn grid(bundle: &Bundle, patches: usize) -> CliResult<(usize, usize)> {
    if let (Some(r), Some(c)) = (
        bundle.meta_usize("grid_rows"),
        bundle.meta_usize("grid_cols"),
    ) {
        if r * c != patches {
            return Err(CliError::data(format!(
                "grid {r}x{c} does not hold {patches} patches"
            )));
        }
        return Ok((r, c));
    }
    let s = (patches as f64).sqrt().round() as usize;
    if s * s == patches {
        Ok((s, s))
    } else {
        Err(CliError::data(format!(
            "cannot infer a patch grid for {patches} patches; record grid_rows/grid_cols in the bundle"
        )))
    }
}

pub fn parse_pair(s: &str, what: &str) -> CliResult<(usize, usize)> {
    let (a, b) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| CliError::usage(format!("{what} must look like ROWSxCOLS, got `{s}`")))?;
    let parse = |v: &str| {
        v.trim()
            .parse::<usize>()
            .map_err(|_| CliError::usage(format!("{what}: `{v}` is not a positive integer")))
    };
    Ok((parse(a)?, parse(b)?))
}

pub fn parse_floats(s: &str, what: &str) -> CliResult<Vec<f64>> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| CliError::usage(format!("{what}: `{v}` is not a number")))
        })
        .collect()
}

pub fn split_list(s: &str) -> Vec<String> {
    s.split(',')
        .map(|v| v.trim().to_string())
        .filter(|v| !v.is_empty())
        .collect()
}

/// Selectors available by name; `abmilp` needs a trained probe.
pub const SELECTORS: [&str; 5] = [
    "abmilp",
    "attn_avg_cls",
    "attn_lowest_entropy",
    "attn_central_patch",
    "external",
];

/// A probe bundle ready for inference.
pub struct LoadedProbe {
    pub params: ProbeParams,
    pub mode: AggregatorMode,
}

pub fn load_probe(dir: &Path) -> CliResult<LoadedProbe> {
    let bundle = storage::load_bundle(dir)?;
    if bundle.kind != "probe" {
        return Err(CliError::data(format!(
            "{} is a `{}` bundle, not a probe",
            dir.display(),
            bundle.kind
        )));
    }
    let text = |k: &str| {
        bundle
            .meta
            .get(k)
            .and_then(|v| v.as_str())
            .map(str::to_string)
    };
    let mode: AggregatorMode = text("mode")
        .ok_or_else(|| CliError::data("probe bundle does not record its mode"))?
        .parse()
        .map_err(|e: String| CliError::data(e))?;
    let activation = text("activation")
        .map(|a| a.parse::<Activation>())
        .transpose()
        .map_err(|e| CliError::data(e.to_string()))?;
    let depth = bundle.meta_usize("score_depth").unwrap_or(0);
    let get = |name: &str| bundle.f32(name).ok().cloned();
    let params = ProbeParams::from_named(depth, activation, get)?;
    Ok(LoadedProbe { params, mode })
}

/// Patch-level selection weights of a trained AbMILP probe. With `[cls]`
/// in the softmax its weight is dropped and the rest renormalized.
pub fn probe_selection(it: &Item, probe: &LoadedProbe) -> CliResult<SelectionVector> {
    if !probe.mode.is_abmilp() {
        return Err(CliError::usage(format!(
            "selector abmilp needs an AbMILP probe, this one was trained with mode {}",
            probe.mode
        )));
    }
    let tokens = it
        .tokens
        .clone()
        .ok_or_else(|| CliError::data(format!("item `{}` has no token features", it.id)))?;
    let off = tokens.patch_offset();
    let s = Sample {
        id: it.id.clone(),
        tokens,
        label: 0,
        fixed_weights: None,
    };
    let out = probe_forward(&s, &probe.params, probe.mode)?;
    let w: Vec<f64> = out.weights.iter().map(|&x| x as f64).collect();
    let patches = if out.offset < off {
        &w[off - out.offset..]
    } else {
        &w[..]
    };
    Ok(SelectionVector::from_scores(patches, "abmilp")?)
}

/// Computes a named patch-level selector for one item.
pub fn selector(
    name: &str,
    it: &Item,
    grid: Option<(usize, usize)>,
    probe: Option<&LoadedProbe>,
) -> CliResult<SelectionVector> {
    let attn = || {
        it.attention.as_ref().ok_or_else(|| {
            CliError::data(format!(
                "item `{}` has no attention maps (extract with --capture-attn)",
                it.id
            ))
        })
    };
    Ok(match name {
        "abmilp" => {
            let p = probe.ok_or_else(|| CliError::usage("selector abmilp needs --probe"))?;
            probe_selection(it, p)?
        }
        "attn_avg_cls" => aggregation::selector_avg_cls_attention(attn()?)?,
        "attn_lowest_entropy" => aggregation::selector_lowest_entropy_head(attn()?)?,
        "attn_central_patch" => {
            let a = attn()?;
            let (r, c) =
                grid.ok_or_else(|| CliError::data("central-patch selector needs a patch grid"))?;
            aggregation::selector_central_patch(a, r, c)?
        }
        "external" => {
            let v = it.selector.as_ref().ok_or_else(|| {
                CliError::data(format!("item `{}` has no external selector map", it.id))
            })?;
            aggregation::selector_external(v, v.len())?
        }
        other => {
            return Err(CliError::usage(format!(
                "unknown selector `{other}` (expected one of {})",
                SELECTORS.join(", ")
            )))
        }
    })
}

/// Selector name backing a fixed-selector aggregation mode.
pub fn mode_selector(mode: AggregatorMode) -> Option<&'static str> {
    match mode {
        AggregatorMode::ExternalMap => Some("external"),
        AggregatorMode::AttnAvgCls => Some("attn_avg_cls"),
        AggregatorMode::AttnLowestEntropy => Some("attn_lowest_entropy"),
        AggregatorMode::AttnCentralPatch => Some("attn_central_patch"),
        _ => None,
    }
}

/// Builds a training/eval sample for `mode` from an item.
pub fn sample(it: &Item, mode: AggregatorMode, grid: Option<(usize, usize)>) -> CliResult<Sample> {
    let tokens = it
        .tokens
        .clone()
        .ok_or_else(|| CliError::data(format!("item `{}` has no token features", it.id)))?;
    let label = it
        .label
        .ok_or_else(|| CliError::data(format!("item `{}` has no label", it.id)))?;
    let fixed_weights = match mode_selector(mode) {
        Some(name) => {
            let s = selector(name, it, grid, None)?;
            if s.len() != tokens.num_patches() {
                return Err(CliError::data(format!(
                    "selector for `{}` covers {} patches, features have {}",
                    it.id,
                    s.len(),
                    tokens.num_patches()
                )));
            }
            Some(s.weights.iter().map(|&w| w as f32).collect())
        }
        None => None,
    };
    Ok(Sample {
        id: it.id.clone(),
        tokens,
        label,
        fixed_weights,
    })
}

/// Writes `payload` as pretty JSON with 9-significant-digit floats.
pub fn write_json<T: Serialize>(path: &Path, payload: &T) -> CliResult<()> {
    Ok(storage::write_json(path, payload)?)
}

pub fn ensure_dir(path: &Path) -> CliResult<()> {
    std::fs::create_dir_all(path)
        .map_err(|e| CliError::data(format!("cannot create {}: {e}", path.display())))
}
