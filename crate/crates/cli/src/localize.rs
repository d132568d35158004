use std::collections::BTreeMap;
use std::path::PathBuf;

use clap::Args;
use selagg_core::localization::{self, BoundingBox, BoxAccReport, LocalizationItem};
use selagg_core::storage::{self, Cell, DatasetManifest};
use serde::Serialize;

use crate::common::{self, LoadedProbe};
use crate::error::{CliError, CliResult};

#[derive(Debug, Args, Serialize)]
#[command(args_override_self = true)]
pub struct LocalizeArgs {
    /// Feature or attention bundle (also accepts `synth --task boxes` output).
    #[arg(long)]
    pub bundle: PathBuf,
    /// Dataset manifest whose ground-truth boxes replace the bundle's.
    #[arg(long)]
    pub gt: Option<PathBuf>,
    /// Probe bundle backing the `abmilp` selector.
    #[arg(long)]
    pub probe: Option<PathBuf>,
    /// Comma-separated selectors: abmilp, attn_avg_cls, attn_lowest_entropy,
    /// attn_central_patch, external.
    #[arg(long, default_value = "attn_avg_cls")]
    pub selector: String,
    /// Image size as HEIGHTxWIDTH (defaults to bundle metadata).
    #[arg(long)]
    pub image_size: Option<String>,
    /// Patch grid as ROWSxCOLS (defaults to bundle metadata).
    #[arg(long)]
    pub grid: Option<String>,
    /// Comma-separated heatmap thresholds (defaults to 0, 0.05, ..., 0.95).
    #[arg(long)]
    pub thresholds: Option<String>,
    /// Comma-separated IoU levels (defaults to 0.3, 0.5, 0.7).
    #[arg(long)]
    pub deltas: Option<String>,
    /// Output directory for localization.json and boxes.csv.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Serialize)]
struct LocalizationSummary {
    n_images: usize,
    image_height: usize,
    image_width: usize,
    grid_rows: usize,
    grid_cols: usize,
    selectors: BTreeMap<String, BoxAccReport>,
}

pub fn run(a: LocalizeArgs) -> CliResult<()> {
    let names = common::split_list(&a.selector);
    if names.is_empty() {
        return Err(CliError::usage("--selector needs at least one name"));
    }
    let thresholds = match &a.thresholds {
        Some(s) => common::parse_floats(s, "--thresholds")?,
        None => localization::default_thresholds(),
    };
    let deltas = match &a.deltas {
        Some(s) => common::parse_floats(s, "--deltas")?,
        None => localization::default_iou_levels(),
    };
    let probe: Option<LoadedProbe> = a.probe.as_deref().map(common::load_probe).transpose()?;

    let bundle = storage::load_bundle(&a.bundle)?;
    let mut items = common::items(&bundle)?;
    if let Some(path) = &a.gt {
        let m = DatasetManifest::load(path)?;
        let by_id: BTreeMap<&str, _> = m.items.iter().map(|i| (i.id.as_str(), i)).collect();
        for it in items.iter_mut() {
            it.gt_boxes = by_id.get(it.id.as_str()).and_then(|e| e.gt_boxes.clone());
        }
    }
    let gts = items
        .iter()
        .map(|it| {
            let boxes = it.gt_boxes.as_deref().unwrap_or_default();
            if boxes.is_empty() {
                return Err(CliError::data(format!(
                    "item `{}` has no ground-truth box",
                    it.id
                )));
            }
            boxes
                .iter()
                .map(|&b| BoundingBox::from_array(b).map_err(CliError::from))
                .collect::<CliResult<Vec<_>>>()
        })
        .collect::<CliResult<Vec<_>>>()?;

    let (rows, cols) = match &a.grid {
        Some(g) => common::parse_pair(g, "--grid")?,
        None => {
            let patches = items
                .iter()
                .find_map(|i| {
                    i.attention
                        .as_ref()
                        .map(|t| t.num_patches())
                        .or(i.tokens.as_ref().map(|t| t.num_patches()))
                })
                .or(items
                    .first()
                    .and_then(|i| i.selector.as_ref().map(Vec::len)))
                .ok_or_else(|| CliError::data("cannot determine the patch grid; pass --grid"))?;
            common::grid(&bundle, patches)?
        }
    };
    let (height, width) = match &a.image_size {
        Some(s) => common::parse_pair(s, "--image-size")?,
        None => match (
            bundle.meta_usize("image_height"),
            bundle.meta_usize("image_width"),
        ) {
            (Some(h), Some(w)) => (h, w),
            _ => {
                return Err(CliError::usage(
                    "bundle does not record the image size; pass --image-size",
                ))
            }
        },
    };

    let mut reports = BTreeMap::new();
    let mut rows_out: Vec<Vec<Cell>> = Vec::new();
    for name in &names {
        let loc_items = items
            .iter()
            .zip(&gts)
            .map(|(it, gt)| {
                let s = common::selector(name, it, Some((rows, cols)), probe.as_ref())?;
                let heatmap =
                    localization::scores_to_heatmap(&s.weights, rows, cols, height, width)?;
                Ok(LocalizationItem {
                    heatmap,
                    gt_boxes: gt.clone(),
                })
            })
            .collect::<CliResult<Vec<_>>>()?;
        let report = localization::max_box_acc_v2(&loc_items, &thresholds, &deltas)?;
        let bt = report.best_threshold();
        let tau = thresholds[bt];
        for ((it, li), ious) in items.iter().zip(&loc_items).zip(&report.best_iou) {
            let b = localization::threshold_to_box(&li.heatmap, tau);
            let coords: [Cell; 4] = match b {
                Some(b) => b.to_array().map(Cell::Float),
                None => [Cell::Empty, Cell::Empty, Cell::Empty, Cell::Empty],
            };
            let mut row = vec![name.as_str().into(), it.id.as_str().into(), tau.into()];
            row.extend(coords);
            row.push(ious[bt].into());
            rows_out.push(row);
        }
        println!("{name}: MaxBoxAccV2 {:.4}", report.score);
        reports.insert(name.clone(), report);
    }

    common::ensure_dir(&a.out)?;
    let summary = LocalizationSummary {
        n_images: items.len(),
        image_height: height,
        image_width: width,
        grid_rows: rows,
        grid_cols: cols,
        selectors: reports,
    };
    common::write_json(&a.out.join("localization.json"), &summary)?;
    let columns = ["selector", "id", "tau", "x0", "y0", "x1", "y1", "iou"].map(String::from);
    storage::write_csv(&a.out.join("boxes.csv"), &columns, &rows_out)?;
    Ok(())
}
