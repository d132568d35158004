use std::path::PathBuf;

use clap::Args;
use selagg_core::metrics::{self, BlockMetricSeries, FlowMetric, KldMatrix, DEFAULT_KLD_EPS};
use selagg_core::storage::{self, Cell, Report, ReportFormat};
use serde::Serialize;

use crate::common::{self, LoadedProbe};
use crate::error::{CliError, CliResult};

#[derive(Debug, Args, Serialize)]
#[command(args_override_self = true)]
pub struct AnalyzeArgs {
    /// Feature bundle holding per-image attention maps.
    #[arg(long)]
    pub attn: PathBuf,
    /// Output directory for metrics and divergence tables.
    #[arg(long)]
    pub out: PathBuf,
    /// Table format: csv or json.
    #[arg(long, default_value = "csv")]
    pub format: ReportFormat,
    /// Comma-separated selectors for the pairwise KL matrix (needs at least two).
    #[arg(long)]
    pub selectors: Option<String>,
    /// Probe bundle backing the `abmilp` selector.
    #[arg(long)]
    pub probe: Option<PathBuf>,
    /// Floor added inside the KL logarithm.
    #[arg(long, default_value_t = DEFAULT_KLD_EPS)]
    pub kld_eps: f64,
}

/// One row per (metric, block).
#[derive(Debug, Serialize)]
pub struct MetricsReport {
    pub metrics: Vec<BlockMetricSeries>,
}

impl Report for MetricsReport {
    fn columns(&self) -> Vec<String> {
        ["metric", "block", "value", "n_images"]
            .map(String::from)
            .to_vec()
    }

    fn rows(&self) -> Vec<Vec<Cell>> {
        self.metrics
            .iter()
            .flat_map(|s| {
                s.values.iter().enumerate().map(|(b, &v)| {
                    vec![
                        s.metric.as_str().into(),
                        b.into(),
                        v.into(),
                        s.n_images.into(),
                    ]
                })
            })
            .collect()
    }
}

/// One row per ordered selector pair.
#[derive(Debug, Serialize)]
pub struct KldReport(pub KldMatrix);

impl Report for KldReport {
    fn columns(&self) -> Vec<String> {
        ["p", "q", "kld", "n_images"].map(String::from).to_vec()
    }

    fn rows(&self) -> Vec<Vec<Cell>> {
        let m = &self.0;
        let mut rows = Vec::new();
        for (i, p) in m.selectors.iter().enumerate() {
            for (j, q) in m.selectors.iter().enumerate() {
                rows.push(vec![
                    p.as_str().into(),
                    q.as_str().into(),
                    m.values[i][j].into(),
                    m.n_images.into(),
                ]);
            }
        }
        rows
    }
}

fn ext(f: ReportFormat) -> &'static str {
    match f {
        ReportFormat::Json => "json",
        ReportFormat::Csv => "csv",
    }
}

pub fn run(a: AnalyzeArgs) -> CliResult<()> {
    if !(a.kld_eps.is_finite() && a.kld_eps >= 0.0) {
        return Err(CliError::usage(format!(
            "--kld-eps must be finite and non-negative, got {}",
            a.kld_eps
        )));
    }
    let names = a
        .selectors
        .as_deref()
        .map(common::split_list)
        .unwrap_or_default();
    if names.len() == 1 {
        return Err(CliError::usage(
            "--selectors needs at least two entries for a divergence matrix",
        ));
    }
    for n in &names {
        if !common::SELECTORS.contains(&n.as_str()) {
            return Err(CliError::usage(format!(
                "unknown selector `{n}` (expected one of {})",
                common::SELECTORS.join(", ")
            )));
        }
    }
    let probe: Option<LoadedProbe> = a.probe.as_deref().map(common::load_probe).transpose()?;

    let bundle = storage::load_bundle(&a.attn)?;
    let items = common::items(&bundle)?;
    let attn: Vec<_> = items
        .iter()
        .map(|it| {
            it.attention.clone().ok_or_else(|| {
                CliError::data(format!(
                    "item `{}` in {} has no attention maps (extract with --capture-attn)",
                    it.id,
                    a.attn.display()
                ))
            })
        })
        .collect::<CliResult<_>>()?;
    let cls = common::has_cls(&bundle);
    let wanted: Vec<FlowMetric> = FlowMetric::ALL
        .into_iter()
        .filter(|m| cls || !m.needs_cls())
        .collect();
    let series = metrics::flow_metrics(&attn, &wanted)?;

    common::ensure_dir(&a.out)?;
    let report = MetricsReport { metrics: series };
    storage::write_report(
        &a.out.join(format!("metrics.{}", ext(a.format))),
        &report,
        a.format,
    )?;
    for s in &report.metrics {
        let vals: Vec<String> = s.values.iter().map(|v| format!("{v:.6}")).collect();
        println!("{}: {}", s.metric, vals.join(" "));
    }

    if names.len() >= 2 {
        let grid = common::grid(&bundle, attn[0].num_patches()).ok();
        let per_selector = names
            .iter()
            .map(|n| {
                items
                    .iter()
                    .map(|it| common::selector(n, it, grid, probe.as_ref()))
                    .collect::<CliResult<Vec<_>>>()
            })
            .collect::<CliResult<Vec<_>>>()?;
        let m = metrics::selector_kld_matrix(&names, &per_selector, a.kld_eps)?;
        storage::write_report(
            &a.out.join(format!("kld.{}", ext(a.format))),
            &KldReport(m),
            a.format,
        )?;
    }
    Ok(())
}
