use std::path::PathBuf;

use clap::Args;
use selagg_core::aggregation::{Activation, AggregatorMode, ScoreModelSpec};
use selagg_core::probe::{self, GradcheckConfig, GradcheckReport};
use selagg_core::storage;
use serde::Serialize;

use crate::error::{CliError, CliResult};

#[derive(Debug, Args, Serialize)]
#[command(args_override_self = true)]
pub struct GradcheckArgs {
    /// Aggregation mode to check.
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
    /// Seed for the random problem.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Check every mode, depth and activation.
    #[arg(long)]
    pub all: bool,
    /// Perturb one analytic gradient entry (negative control).
    #[arg(long, hide = true)]
    pub corrupt: bool,
    /// Write the per-configuration reports as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn configs(a: &GradcheckArgs) -> CliResult<Vec<GradcheckConfig>> {
    let mut cfgs = if a.all {
        probe::gradcheck_suite(a.seed)
    } else {
        let score = if a.mode.is_abmilp() {
            let depth = a.score_depth.unwrap_or(1);
            let spec = ScoreModelSpec {
                depth,
                hidden: if depth > 1 {
                    a.hidden.unwrap_or(8)
                } else {
                    a.hidden.unwrap_or(0)
                },
                activation: a.activation,
            };
            spec.validate()?;
            Some(spec)
        } else if a.score_depth.is_some() || a.activation.is_some() || a.hidden.is_some() {
            return Err(CliError::usage(format!(
                "mode {} does not take a score model",
                a.mode
            )));
        } else {
            None
        };
        vec![GradcheckConfig::new(a.mode, score, a.seed)]
    };
    for c in &mut cfgs {
        c.corrupt = a.corrupt;
    }
    Ok(cfgs)
}

pub fn run(a: GradcheckArgs) -> CliResult<()> {
    let cfgs = configs(&a)?;
    let reports = cfgs
        .iter()
        .map(|c| probe::gradcheck(c).map_err(CliError::from))
        .collect::<CliResult<Vec<GradcheckReport>>>()?;
    for r in &reports {
        println!(
            "{} {}: max_rel_error {:.3e} worst {}[{}] ({} entries)",
            if r.passed { "PASS" } else { "FAIL" },
            r.label,
            r.max_rel_error,
            r.worst_tensor,
            r.worst_index,
            r.checked
        );
    }
    if let Some(out) = &a.out {
        storage::write_json(out, &reports)?;
    }
    let failed: Vec<&GradcheckReport> = reports.iter().filter(|r| !r.passed).collect();
    match failed
        .iter()
        .max_by(|x, y| x.max_rel_error.total_cmp(&y.max_rel_error))
    {
        None => Ok(()),
        Some(worst) => Err(CliError::Numeric(format!(
            "{} of {} gradient checks failed; worst {} in tensor {} (relative error {:.3e})",
            failed.len(),
            reports.len(),
            worst.label,
            worst.worst_tensor,
            worst.max_rel_error
        ))),
    }
}
