use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::Context;
use clap::ArgMatches;
use serde_json::json;
use xmatch::emb_store::{generate_heldout, generate_synthetic, DatasetBundle, SynthConfig};
use xmatch::trainer::gradcheck::{grad_check_shape, InstanceShape};
use xmatch::trainer::{
    evaluate_params, mine_dataset, train_with_eval, AdapterParams, Checkpoint, CheckpointMeta, HyperParams,
    LossSelector, TrainData, TrainReport,
};

use crate::args::{EvalArgs, GradcheckArgs, MineArgs, SourceArgs, SynthArgs, TrainArgs};
use crate::config::resolve_train;
use crate::exit::{data_error, numeric_error, usage_error};
use crate::output::write_report;

fn load_bundle(dir: &Path) -> anyhow::Result<DatasetBundle> {
    DatasetBundle::load(dir).with_context(|| format!("loading dataset {}", dir.display()))
}

pub fn synth(args: &SynthArgs) -> anyhow::Result<()> {
    let cfg = SynthConfig {
        identities: args.identities,
        per_id_images: args.per_id,
        per_id_texts: args.per_id_texts.unwrap_or(args.per_id),
        dim: args.dim,
        sigma: args.sigma,
        seed: args.seed,
        modality_offset: args.modality_offset,
        nuisance_rank: args.nuisance_rank,
        nuisance_scale: args.nuisance_scale,
        max_centroid_cosine: args.max_centroid_cosine,
    };
    cfg.validate()?;
    let bundle = generate_synthetic(&cfg)?;
    bundle.save(&args.out)?;
    println!("wrote {} pairs (d = {}) to {}", bundle.len(), bundle.dim(), args.out.display());
    if let Some(dir) = &args.heldout {
        let held = generate_heldout(&cfg)?;
        held.save(dir)?;
        println!("wrote {} held-out pairs to {}", held.len(), dir.display());
    }
    Ok(())
}

fn train_summary(r: &TrainReport) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:>5}{:>10}{:>10}{:>10}{:>10}{:>10}{:>11}{:>11}",
        "epoch", "total", "itc", "rc_b", "rc_g", "rc_h", "precision", "lr"
    );
    for e in &r.epochs {
        let p = e.association_precision.map_or("n/a".to_owned(), |p| format!("{p:.2}"));
        let _ = writeln!(
            s,
            "{:>5}{:>10.4}{:>10.4}{:>10.4}{:>10.4}{:>10.4}{:>11}{:>11.3e}",
            e.epoch, e.total, e.itc, e.rc_b, e.rc_g, e.rc_h, p, e.lr
        );
    }
    let split = if r.separate_eval { "evaluation split" } else { "training data" };
    let _ = writeln!(s, "\nbaseline ({split}):\n{}", r.baseline);
    let _ = write!(s, "final ({split}):\n{}", r.final_metrics);
    s
}

pub fn train(args: &TrainArgs, m: &ArgMatches) -> anyhow::Result<()> {
    let plan = resolve_train(args, m)?;
    let bundle = load_bundle(&plan.data)?;
    let eval = plan.eval_data.as_deref().map(load_bundle).transpose()?;
    for dir in [&plan.checkpoint, &plan.report_dir] {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let hp = &plan.hyper;
    let out = train_with_eval(&bundle, eval.as_ref(), hp).context("training")?;
    let ck = Checkpoint {
        meta: CheckpointMeta {
            step: out.report.steps,
            epoch: hp.epochs as u64,
            dim: bundle.dim(),
            hyper: hp.clone(),
            rng: out.rng,
            bank_epoch: out.banks.as_ref().map(|b| b.image.epoch()),
        },
        params: out.params,
        banks: out.banks,
    };
    ck.save(&plan.checkpoint)?;
    let summary = train_summary(&out.report);
    let json = serde_json::to_string_pretty(&out.report)?;
    let path = write_report(&plan.report_dir, "train", &json, Some(&summary))?;
    println!("{summary}");
    println!("checkpoint: {}\nreport: {}", plan.checkpoint.display(), path.display());
    Ok(())
}

/// Adapter parameters and hyperparameters named by `--checkpoint` or
/// `--identity-adapter`, checked against the data dimension.
fn load_source(source: &SourceArgs, d: usize) -> anyhow::Result<(AdapterParams, HyperParams, Option<Checkpoint>)> {
    match &source.checkpoint {
        Some(dir) => {
            let ck = Checkpoint::load(dir)?;
            ck.check_dim(d)?;
            Ok((ck.params.clone(), ck.meta.hyper.clone(), Some(ck)))
        }
        None => Ok((AdapterParams::identity(d), HyperParams::default(), None)),
    }
}

fn mining_overrides(hp: &mut HyperParams, k: Option<usize>, th: Option<f64>) -> anyhow::Result<()> {
    if let Some(k) = k {
        hp.k = k;
    }
    if let Some(th) = th {
        hp.th = th;
    }
    hp.validate()?;
    Ok(())
}

pub fn eval(args: &EvalArgs) -> anyhow::Result<()> {
    let bundle = load_bundle(&args.data)?;
    let (params, mut hp, _) = load_source(&args.source, bundle.dim())?;
    mining_overrides(&mut hp, args.k, args.th)?;
    let data = TrainData::from_bundle(&bundle)?;
    let report = evaluate_params(&params, &data, &hp)?;
    let table = report.to_table();
    let path = write_report(&args.report_dir, "eval", &report.to_json(), Some(&table))?;
    print!("{table}");
    println!("report: {}", path.display());
    Ok(())
}

pub fn mine(args: &MineArgs) -> anyhow::Result<()> {
    let bundle = load_bundle(&args.data)?;
    let (params, mut hp, ck) = load_source(&args.source, bundle.dim())?;
    mining_overrides(&mut hp, args.k, args.th)?;
    let bank = if args.from_bank {
        let banks = ck
            .as_ref()
            .and_then(|c| c.banks.as_ref())
            .ok_or_else(|| usage_error("--from-bank needs a checkpoint that stores memory banks"))?;
        if banks.image.len() != bundle.len() {
            return Err(data_error(format!(
                "checkpoint bank holds {} rows, dataset has {}",
                banks.image.len(),
                bundle.len()
            )));
        }
        Some(&banks.image)
    } else {
        None
    };
    let data = TrainData::from_bundle(&bundle)?;
    let (cands, tally) = mine_dataset(&params, &data, bank, &hp)?;
    let precision = tally.precision().ok();
    let report = json!({
        "k": hp.k,
        "th": hp.th,
        "from_bank": args.from_bank,
        "mined_pairs": tally.total,
        "correct_pairs": tally.correct,
        "association_precision": precision,
        "candidates": cands.sets,
    });
    let path = write_report(&args.report_dir, "mine", &serde_json::to_string_pretty(&report)?, None)?;
    match precision {
        Some(p) => println!("mined {} pairs, association precision {p:.2}", tally.total),
        None => println!("nothing mined beyond the given pairs"),
    }
    println!("report: {}", path.display());
    Ok(())
}

pub fn gradcheck(args: &GradcheckArgs) -> anyhow::Result<()> {
    let selectors = args
        .losses
        .split(',')
        .map(|s| LossSelector::parse(s.trim()))
        .collect::<Result<Vec<_>, _>>()?;
    if args.instances == 0 {
        return Err(usage_error("--instances must be at least 1"));
    }
    let shape = InstanceShape {
        batch: args.batch,
        dim: args.dim,
        samples: 4 * args.batch,
        tau: args.tau,
        ..InstanceShape::default()
    };
    let mut failures = 0usize;
    let mut worst = 0.0f64;
    for &sel in &selectors {
        for seed in args.seed..args.seed + args.instances {
            let r = grad_check_shape(sel, seed, args.tol, shape, args.step)?;
            worst = worst.max(r.max_rel_error);
            let verdict = if r.passed(args.tol) { "ok" } else { "FAIL" };
            failures += usize::from(!r.passed(args.tol));
            println!("{:<6} seed {:>4}  max rel error {:.3e}  {verdict}", sel.name(), seed, r.max_rel_error);
        }
    }
    let checks = selectors.len() as u64 * args.instances;
    println!("{checks} checks, {failures} failed, worst {worst:.3e} (tolerance {:.1e})", args.tol);
    if failures > 0 {
        return Err(numeric_error(format!("{failures} gradient checks exceeded tolerance {}", args.tol)));
    }
    Ok(())
}
