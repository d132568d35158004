use std::collections::BTreeMap;
use std::path::PathBuf;

use clap::Args;
use selagg_core::aggregation::{Activation, AggregatorMode, ScoreModelSpec};
use selagg_core::probe::{self, OptimizerKind, Preset, Sample, TrainConfig, TrainHistory};
use selagg_core::storage::{self, Bundle, Cell, DatasetManifest, Report};
use serde::Serialize;
use serde_json::json;

use crate::common::{self, Item};
use crate::error::{CliError, CliResult};

#[derive(Debug, Args, Serialize)]
#[command(args_override_self = true)]
pub struct TrainArgs {
    /// Feature bundle from `extract` or `synth --task bags`.
    #[arg(long)]
    pub features: PathBuf,
    /// Dataset manifest whose labels and splits override the bundle's.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Output directory for the probe bundle and training history.
    #[arg(long)]
    pub out: PathBuf,
    /// Aggregation head: cls, avg_patches, abmilp_patches, abmilp_with_cls,
    /// external_map, attn_avg_cls, attn_lowest_entropy or attn_central_patch.
    #[arg(long, default_value = "abmilp_patches")]
    pub mode: AggregatorMode,
    /// Score-model layers for AbMILP modes (1 = linear).
    #[arg(long)]
    pub score_depth: Option<usize>,
    /// Hidden width of an MLP score model.
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Score-model activation: relu, gelu or tanh.
    #[arg(long)]
    pub activation: Option<Activation>,
    /// Hyperparameter preset: desk or paper.
    #[arg(long, default_value = "desk")]
    pub preset: Preset,
    /// Optimizer: sgd_momentum or lars (overrides the preset).
    #[arg(long)]
    pub optimizer: Option<OptimizerKind>,
    /// Base learning rate (overrides the preset).
    #[arg(long)]
    pub lr: Option<f64>,
    /// Optimizer momentum (overrides the preset).
    #[arg(long)]
    pub momentum: Option<f64>,
    /// Weight decay (overrides the preset).
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Training epochs (overrides the preset).
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Linear warmup epochs (overrides the preset).
    #[arg(long)]
    pub warmup_epochs: Option<usize>,
    /// Examples per step (overrides the preset).
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Seed for initialization and shuffling.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Feed raw features to the head instead of standardized ones.
    #[arg(long)]
    pub no_standardize: bool,
}

struct HistoryTable<'a>(&'a TrainHistory);

impl Report for HistoryTable<'_> {
    fn columns(&self) -> Vec<String> {
        TrainHistory::COLUMNS.map(String::from).to_vec()
    }

    fn rows(&self) -> Vec<Vec<Cell>> {
        self.0
            .epochs
            .iter()
            .map(|e| {
                vec![
                    e.epoch.into(),
                    e.lr.into(),
                    e.train_loss.into(),
                    e.train_accuracy.into(),
                    e.eval_accuracy.into(),
                ]
            })
            .collect()
    }
}

fn score_spec(a: &TrainArgs) -> CliResult<Option<ScoreModelSpec>> {
    if !a.mode.is_abmilp() {
        if a.score_depth.is_some() || a.hidden.is_some() || a.activation.is_some() {
            return Err(CliError::usage(format!(
                "mode {} does not take a score model",
                a.mode
            )));
        }
        return Ok(None);
    }
    let depth = a.score_depth.unwrap_or(1);
    let spec = ScoreModelSpec {
        depth,
        hidden: if depth > 1 {
            a.hidden.unwrap_or(64)
        } else {
            a.hidden.unwrap_or(0)
        },
        activation: a.activation,
    };
    spec.validate()?;
    Ok(Some(spec))
}

fn train_config(a: &TrainArgs) -> CliResult<TrainConfig> {
    let mut cfg = TrainConfig::preset(a.preset, a.mode);
    cfg.score_model = score_spec(a)?;
    if let Some(o) = a.optimizer {
        cfg.optimizer = o;
    }
    cfg.base_lr = a.lr.unwrap_or(cfg.base_lr);
    cfg.momentum = a.momentum.unwrap_or(cfg.momentum);
    cfg.weight_decay = a.weight_decay.unwrap_or(cfg.weight_decay);
    cfg.epochs = a.epochs.unwrap_or(cfg.epochs);
    cfg.warmup_epochs = a.warmup_epochs.unwrap_or(cfg.warmup_epochs);
    cfg.batch_size = a.batch_size.unwrap_or(cfg.batch_size);
    cfg.seed = a.seed;
    cfg.standardize = !a.no_standardize;
    cfg.validate()?;
    Ok(cfg)
}

fn apply_labels(items: &mut [Item], path: &std::path::Path) -> CliResult<Vec<String>> {
    let m = DatasetManifest::load(path)?;
    let by_id: BTreeMap<&str, _> = m.items.iter().map(|i| (i.id.as_str(), i)).collect();
    for it in items.iter_mut() {
        let entry = by_id.get(it.id.as_str()).ok_or_else(|| {
            CliError::data(format!(
                "labels file {} has no entry for `{}`",
                path.display(),
                it.id
            ))
        })?;
        it.label = entry.label;
        if entry.split.is_some() {
            it.split = entry.split.clone();
        }
    }
    Ok(m.classes)
}

pub fn run(a: TrainArgs) -> CliResult<()> {
    let cfg = train_config(&a)?;
    eprintln!(
        "train config: {}",
        serde_json::to_string(&cfg).unwrap_or_default()
    );
    let bundle = storage::load_bundle(&a.features)?;
    let mut items = common::items(&bundle)?;
    let mut classes = bundle.classes.clone();
    if let Some(p) = &a.labels {
        let c = apply_labels(&mut items, p)?;
        if !c.is_empty() {
            classes = c;
        }
    }
    let has_cls = common::has_cls(&bundle);
    if a.mode.requires_cls() && !has_cls {
        return Err(CliError::usage(format!(
            "mode {} needs a [cls] token, but these features have none",
            a.mode
        )));
    }
    let patches = items
        .first()
        .and_then(|i| i.tokens.as_ref())
        .map(|t| t.num_patches())
        .ok_or_else(|| CliError::data("feature bundle has no token tensors"))?;
    let grid = common::grid(&bundle, patches).ok();

    let mut train: Vec<Sample> = Vec::new();
    let mut eval: Vec<Sample> = Vec::new();
    for it in &items {
        let s = common::sample(it, a.mode, grid)?;
        match it.split.as_deref() {
            Some("eval") | Some("val") | Some("test") => eval.push(s),
            _ => train.push(s),
        }
    }
    if train.is_empty() {
        return Err(CliError::data(
            "no training items (every item is in the eval split)",
        ));
    }
    let n_classes = if classes.is_empty() {
        items
            .iter()
            .filter_map(|i| i.label)
            .max()
            .map_or(0, |m| m + 1)
    } else {
        classes.len()
    };
    let eval_ref = (!eval.is_empty()).then_some(eval.as_slice());
    let (params, history) = probe::train_probe(&train, eval_ref, n_classes, &cfg)?;

    let mut out = Bundle::new("probe");
    out.classes = classes;
    for (name, t) in params.named_tensors() {
        out.insert(name, t);
    }
    let spec = cfg.score_model;
    let mut meta = BTreeMap::new();
    meta.insert("mode".to_string(), json!(a.mode.name()));
    meta.insert(
        "score_depth".to_string(),
        json!(spec.map_or(0, |s| s.depth)),
    );
    meta.insert("hidden".to_string(), json!(spec.map_or(0, |s| s.hidden)));
    if let Some(act) = spec.and_then(|s| s.activation) {
        meta.insert("activation".to_string(), json!(act.name()));
    }
    meta.insert("dim".to_string(), json!(params.dim()));
    meta.insert("num_classes".to_string(), json!(n_classes));
    meta.insert("has_cls".to_string(), json!(has_cls));
    meta.insert(
        "train_config".to_string(),
        serde_json::to_value(&cfg).unwrap_or_default(),
    );
    out.meta = meta;
    storage::save_bundle(&a.out.join("probe"), &out)?;
    storage::write_report_csv(&a.out.join("history.csv"), &HistoryTable(&history))?;
    storage::write_json(&a.out.join("history.json"), &history)?;

    let last = history.last().expect("at least one epoch");
    println!(
        "mode {} epochs {} train_loss {:.6} train_accuracy {:.4}",
        a.mode,
        history.epochs.len(),
        last.train_loss,
        last.train_accuracy
    );
    match last.eval_accuracy {
        Some(acc) => println!("eval_accuracy {acc:.4}"),
        None => println!("eval_accuracy n/a (no eval split)"),
    }
    Ok(())
}
