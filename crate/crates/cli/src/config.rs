use std::fs;
use std::path::{Path, PathBuf};

use clap::parser::ValueSource;
use clap::ArgMatches;
use serde::Deserialize;
use xmatch::trainer::{Ablation, HyperParams};

use crate::args::{HyperArgs, TrainArgs};
use crate::exit::{data_error, usage_error};

/// Contents of a `--config` file. Every key is optional and unknown keys
/// are rejected.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub hyper: Option<HyperParams>,
    pub data: Option<PathBuf>,
    pub eval_data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub report_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| data_error(format!("reading {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| usage_error(format!("{}: {e}", path.display())))
    }
}

/// Fully resolved inputs of `train`.
#[derive(Debug)]
pub struct TrainPlan {
    pub hyper: HyperParams,
    pub data: PathBuf,
    pub eval_data: Option<PathBuf>,
    pub checkpoint: PathBuf,
    pub report_dir: PathBuf,
}

fn from_cli(m: &ArgMatches, id: &str) -> bool {
    m.value_source(id) == Some(ValueSource::CommandLine)
}

/// Copies every hyperparameter that was typed on the command line into `hp`.
pub fn apply_flags(hp: &mut HyperParams, args: &HyperArgs, m: &ArgMatches) -> anyhow::Result<()> {
    macro_rules! take {
        ($($field:ident),*) => {
            $(if from_cli(m, stringify!($field)) {
                hp.$field = args.$field;
            })*
        };
    }
    take!(
        tau, th, lambda, alpha, k, eps, rho, jitter_sigma, batch_size, epochs, lr_start, lr_peak, warmup_epochs,
        beta1, beta2, eps_opt, weight_decay, seed
    );
    if from_cli(m, "confidence_denominator") {
        hp.confidence_denominator = parse_enum(&args.confidence_denominator)?;
    }
    if from_cli(m, "asymmetry") {
        hp.asymmetry = parse_enum(&args.asymmetry)?;
    }
    if let Some(list) = &args.ablate {
        hp.ablation = Ablation::ALL.without(list)?;
    }
    Ok(())
}

fn parse_enum<T: serde::de::DeserializeOwned>(s: &str) -> anyhow::Result<T> {
    serde_json::from_value(serde_json::Value::String(s.to_owned())).map_err(|e| usage_error(e.to_string()))
}

pub fn resolve_train(args: &TrainArgs, m: &ArgMatches) -> anyhow::Result<TrainPlan> {
    let cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut hyper = cfg.hyper.unwrap_or_default();
    apply_flags(&mut hyper, &args.hyper, m)?;
    hyper.validate()?;
    let pick = |flag: &PathBuf, id: &str, file: Option<PathBuf>| {
        if from_cli(m, id) { flag.clone() } else { file.unwrap_or_else(|| flag.clone()) }
    };
    let data = args
        .data
        .clone()
        .or(cfg.data)
        .ok_or_else(|| usage_error("no dataset given: pass --data or set `data` in the config"))?;
    Ok(TrainPlan {
        hyper,
        data,
        eval_data: args.eval_data.clone().or(cfg.eval_data),
        checkpoint: pick(&args.checkpoint, "checkpoint", cfg.checkpoint),
        report_dir: pick(&args.report_dir, "report_dir", cfg.report_dir),
    })
}
