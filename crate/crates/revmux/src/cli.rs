//! Subcommands of the `revmux` binary.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use revmux_core::adapters::{RevMuxAdapters, TrainMode};
use revmux_core::backbone::EncoderModel;
use revmux_core::data::Encoded;
use revmux_core::evaluation::{cdf, count_flops, flops_sweep, EvalReport, EvalSpec, FlopsReport};
use revmux_core::pipeline::{backbone_accuracy, pretrain_backbone, train_adapters, PrefixCache};
use serde::{Deserialize, Serialize};

use crate::atomic::{check_overwrite, write_csv, write_json};
use crate::checkpoint::{AdapterBundle, AdapterRun, Backbone};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::parallel::{evaluate_rounds_parallel, threads_from_env};

#[derive(Debug, Parser)]
#[command(
    name = "revmux",
    version,
    about = "Reversible multiplexing adapters over a small transformer encoder"
)]
pub struct Cli {
    /// TOML run configuration; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the encoder and classifier on single inputs.
    Pretrain(PretrainArgs),
    /// Train multiplexing adapters on top of a backbone checkpoint.
    TrainAdapters(TrainArgs),
    /// Multi-round grouped evaluation.
    Eval(EvalArgs),
    /// Analytical FLOPs and speedup table.
    Flops(FlopsArgs),
    /// Train and evaluate adapters over an (N, l) grid.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Per-epoch metrics CSV.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub min_accuracy: Option<f64>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Fe,
    Ft,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub backbone: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Training log CSV (step,epoch,ce,infonce,total,acc).
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub prefill_l: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Where the tuned backbone goes in FT mode.
    #[arg(long)]
    pub backbone_out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub backbone: PathBuf,
    #[arg(long)]
    pub adapters: Option<PathBuf>,
    /// Multiplex width; taken from the adapters when given.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub prefill_l: Option<usize>,
    #[arg(long)]
    pub rounds: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Report JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// CDF of round accuracies as CSV.
    #[arg(long)]
    pub cdf: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct FlopsArgs {
    /// Read the model shape from this checkpoint instead of the config.
    #[arg(long)]
    pub backbone: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub n_set: Option<Vec<usize>>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub seq_len: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub backbone: PathBuf,
    /// Grid CSV; rows already present are skipped.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',')]
    pub n_set: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub l_set: Option<Vec<usize>>,
    #[arg(long)]
    pub rounds: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Discard existing rows instead of resuming.
    #[arg(long)]
    pub force: bool,
}

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Pretrain(a) => pretrain(&mut cfg, &a),
        Command::TrainAdapters(a) => train(&mut cfg, &a),
        Command::Eval(a) => eval(&mut cfg, &a).map(|_| ()),
        Command::Flops(a) => flops(&cfg, &a).map(|_| ()),
        Command::Sweep(a) => sweep(&mut cfg, &a).map(|_| ()),
    }
}

#[derive(Serialize)]
struct EpochRow {
    epoch: usize,
    ce: f64,
    train_acc: f64,
    eval_acc: Option<f64>,
}

fn pretrain(cfg: &mut RunConfig, a: &PretrainArgs) -> Result<()> {
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.pretrain.epochs = e;
    }
    if let Some(m) = a.min_accuracy {
        cfg.pretrain.min_accuracy = m;
    }
    check_overwrite(&a.out, a.force)?;
    if let Some(m) = &a.metrics {
        check_overwrite(m, a.force)?;
    }
    cfg.model.validate()?;
    let data = cfg.prepare(&cfg.model, None)?;
    let mut model = EncoderModel::<f32>::new(cfg.model.clone(), cfg.seed)?;
    eprintln!(
        "pretraining on {} examples for {} epochs (vocab {})",
        data.train.len(),
        cfg.pretrain.epochs,
        data.vocab.len()
    );
    let log = pretrain_backbone(&mut model, &data.train, &cfg.pretrain_config())?;
    let mut accs = Vec::new();
    for (name, set) in &data.evals {
        let acc = backbone_accuracy(&model, set)?;
        eprintln!("{name}: eval accuracy {:.4}", acc);
        accs.push(acc);
    }
    let acc = accs.iter().sum::<f64>() / accs.len() as f64;
    if let Some(m) = &a.metrics {
        let last = log.epochs.len().saturating_sub(1);
        let rows: Vec<EpochRow> = log
            .epochs
            .iter()
            .map(|e| EpochRow {
                epoch: e.epoch,
                ce: e.ce,
                train_acc: e.train_acc,
                eval_acc: (e.epoch == last).then_some(acc),
            })
            .collect();
        write_csv(m, &rows)?;
    }
    if acc < cfg.pretrain.min_accuracy {
        return Err(Error::Nonconvergence {
            accuracy: acc,
            floor: cfg.pretrain.min_accuracy,
        });
    }
    Backbone {
        model,
        vocab: data.vocab,
    }
    .save(&a.out)?;
    eprintln!("wrote {}", a.out.display());
    Ok(())
}

fn train(cfg: &mut RunConfig, a: &TrainArgs) -> Result<()> {
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.n {
        cfg.train.n = n;
    }
    if let Some(l) = a.prefill_l {
        cfg.train.l = l;
    }
    if let Some(x) = a.lambda {
        cfg.train.lambda = x;
    }
    if let Some(m) = a.mode {
        cfg.train.mode = match m {
            ModeArg::Fe => TrainMode::Fe,
            ModeArg::Ft => TrainMode::Ft,
        };
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    match (cfg.train.mode, &a.backbone_out) {
        (TrainMode::Ft, None) => return Err(Error::config("--mode ft needs --backbone-out for the tuned backbone")),
        (TrainMode::Fe, Some(_)) => return Err(Error::config("--backbone-out only applies to --mode ft")),
        _ => {}
    }
    check_overwrite(&a.out, a.force)?;
    for p in a.log.iter().chain(&a.backbone_out) {
        check_overwrite(p, a.force)?;
    }
    let Backbone { mut model, vocab } = Backbone::load(&a.backbone)?;
    let tcfg = cfg.train_config();
    tcfg.validate()?;
    model.config().check_split(tcfg.l)?;
    let data = cfg.prepare(model.config(), Some(&vocab))?;
    let acfg = cfg.adapter_config(tcfg.n, model.config().d_model);
    let mut adapters = RevMuxAdapters::<f32>::new(acfg, cfg.seed)?;
    eprintln!(
        "training adapters: N={} l={} lambda={} mode={:?} on {} examples",
        tcfg.n,
        tcfg.l,
        tcfg.lambda,
        tcfg.mode,
        data.train.len()
    );
    let log = train_adapters(&mut model, &mut adapters, &data.train, &tcfg)?;
    for e in &log.epochs {
        eprintln!(
            "epoch {}: ce {:.4} infonce {:.4} train acc {:.4} val acc {}",
            e.epoch,
            e.ce,
            e.infonce,
            e.train_acc,
            e.val_acc.map_or("-".to_string(), |v| format!("{v:.4}"))
        );
    }
    if let Some(p) = &a.log {
        write_csv(p, &log.steps)?;
    }
    if let Some(p) = &a.backbone_out {
        Backbone { model, vocab }.save(p)?;
    }
    AdapterBundle {
        adapters,
        run: AdapterRun {
            l: tcfg.l,
            lambda: tcfg.lambda,
            mode: tcfg.mode,
            seed: tcfg.seed,
        },
    }
    .save(&a.out)?;
    eprintln!("wrote {} (best epoch {})", a.out.display(), log.best_epoch);
    Ok(())
}

/// Evaluates every configured dataset and merges them into one report.
pub fn evaluate_sets(
    model: &EncoderModel<f32>,
    bundle: Option<&AdapterBundle>,
    sets: &[(String, Vec<Encoded>)],
    spec: &EvalSpec,
    threads: usize,
) -> Result<EvalReport> {
    let adapters = bundle.map(|b| &b.adapters);
    let mut reports = Vec::new();
    for (name, data) in sets {
        let cache = match adapters {
            Some(_) if spec.l > 0 => Some(PrefixCache::build(model, data, spec.l)?),
            _ => None,
        };
        let s = EvalSpec {
            dataset: name.clone(),
            ..spec.clone()
        };
        reports.push(evaluate_rounds_parallel(
            model,
            adapters,
            data,
            &s,
            cache.as_ref(),
            threads,
        )?);
    }
    if reports.len() == 1 {
        Ok(reports.pop().expect("one report"))
    } else {
        Ok(EvalReport::merge(reports)?)
    }
}

fn eval(cfg: &mut RunConfig, a: &EvalArgs) -> Result<EvalReport> {
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(r) = a.rounds {
        cfg.eval.rounds = r;
    }
    for p in a.out.iter().chain(&a.cdf) {
        check_overwrite(p, a.force)?;
    }
    let threads = threads_from_env()?;
    let Backbone { model, vocab } = Backbone::load(&a.backbone)?;
    let bundle = a.adapters.as_deref().map(AdapterBundle::load).transpose()?;
    let (n, l, lambda) = match &bundle {
        Some(b) => {
            let (n, l) = (b.adapters.n(), b.run.l);
            if a.n.is_some_and(|x| x != n) || a.prefill_l.is_some_and(|x| x != l) {
                return Err(Error::config(format!(
                    "adapters were trained for N={n}, l={l}; --n/--prefill-l disagree"
                )));
            }
            if b.adapters.config().d_model != model.config().d_model {
                return Err(Error::config("adapters do not match the backbone width"));
            }
            (n, l, Some(b.run.lambda))
        }
        None => {
            if a.n.is_some_and(|x| x != 1) {
                return Err(Error::config("N > 1 needs --adapters"));
            }
            (1, 0, None)
        }
    };
    model.config().check_split(l)?;
    let data = cfg.prepare(model.config(), Some(&vocab))?;
    let spec = EvalSpec {
        rounds: cfg.eval.rounds,
        lambda,
        batch_groups: cfg.eval.batch_groups,
        ..EvalSpec::new(n, l, cfg.seed)
    };
    let report = evaluate_sets(&model, bundle.as_ref(), &data.evals, &spec, threads)?;
    for d in &report.per_dataset {
        println!(
            "{}: {:.2} ± {:.2} over {} rounds (N={n}, l={l})",
            d.name,
            100.0 * d.mean,
            100.0 * d.std,
            d.rounds.len()
        );
    }
    if report.per_dataset.len() > 1 {
        println!("average: {:.2} ± {:.2}", 100.0 * report.mean, 100.0 * report.std);
    }
    if let Some(p) = &a.out {
        write_json(p, &report)?;
    }
    if let Some(p) = &a.cdf {
        write_csv(p, &cdf(&report.rounds))?;
    }
    Ok(report)
}

fn flops(cfg: &RunConfig, a: &FlopsArgs) -> Result<Vec<FlopsReport>> {
    if let Some(p) = &a.out {
        check_overwrite(p, a.force)?;
    }
    let model_cfg = match &a.backbone {
        Some(p) => Backbone::load(p)?.model.config().clone(),
        None => cfg.model.clone(),
    };
    let n_set = a.n_set.clone().unwrap_or_else(|| cfg.eval.n_set.clone());
    let batch = a.batch.unwrap_or(cfg.eval.flops_batch);
    let seq_len = a.seq_len.unwrap_or(cfg.eval.flops_seq_len);
    if n_set.is_empty() {
        return Err(Error::config("empty N set"));
    }
    let mut all = Vec::new();
    let mut table: Vec<Vec<f64>> = Vec::new();
    for &n in &n_set {
        let acfg = (n > 1).then(|| cfg.adapter_config(n, model_cfg.d_model));
        let sweep = flops_sweep(&model_cfg, acfg.as_ref(), n, batch, seq_len)?;
        table.push(sweep.iter().map(|r| r.speedup_pct).collect());
        all.extend(sweep);
    }
    println!("speedup over N single passes (batch {batch}, seq len {seq_len})");
    print!("{:>4}", "l");
    for n in &n_set {
        print!("{:>10}", format!("N={n}"));
    }
    println!();
    for l in 0..=model_cfg.n_layers {
        print!("{l:>4}");
        for col in &table {
            print!("{:>9.1}%", col[l]);
        }
        println!();
    }
    if let Some(p) = &a.out {
        write_json(p, &all)?;
    }
    Ok(all)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n: usize,
    pub l: usize,
    pub mean: f64,
    pub std: f64,
    pub speedup_pct: f64,
    pub seed: u64,
}

fn read_rows(path: &Path) -> Result<Vec<SweepRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::format(path, e.to_string())))
        .collect()
}

fn sweep(cfg: &mut RunConfig, a: &SweepArgs) -> Result<Vec<SweepRow>> {
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(r) = a.rounds {
        cfg.eval.rounds = r;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    let threads = threads_from_env()?;
    let backbone = Backbone::load(&a.backbone)?;
    let mcfg = backbone.model.config().clone();
    let n_set = a.n_set.clone().unwrap_or_else(|| cfg.eval.n_set.clone());
    let l_set = a.l_set.clone().unwrap_or_else(|| cfg.l_set(mcfg.n_layers));
    if n_set.is_empty() || l_set.is_empty() {
        return Err(Error::config("empty N or l set"));
    }
    for &l in &l_set {
        mcfg.check_split(l)?;
    }
    let mut done: BTreeMap<(usize, usize), SweepRow> = BTreeMap::new();
    if a.out.exists() && !a.force {
        for r in read_rows(&a.out)? {
            done.insert((r.n, r.l), r);
        }
        if !done.is_empty() {
            eprintln!("resuming: {} cells already in {}", done.len(), a.out.display());
        }
    }
    let data = cfg.prepare(&mcfg, Some(&backbone.vocab))?;
    for &n in &n_set {
        for &l in &l_set {
            if done.contains_key(&(n, l)) {
                continue;
            }
            let spec = EvalSpec {
                rounds: cfg.eval.rounds,
                batch_groups: cfg.eval.batch_groups,
                ..EvalSpec::new(n, l, cfg.seed)
            };
            let (report, acfg) = if n == 1 {
                let s = EvalSpec { l: 0, ..spec };
                (evaluate_sets(&backbone.model, None, &data.evals, &s, threads)?, None)
            } else {
                let mut model = backbone.model.clone();
                let tcfg = revmux_core::pipeline::TrainConfig {
                    n,
                    l,
                    mode: TrainMode::Fe,
                    ..cfg.train_config()
                };
                let acfg = cfg.adapter_config(n, mcfg.d_model);
                let mut adapters = RevMuxAdapters::<f32>::new(acfg.clone(), cfg.seed)?;
                train_adapters(&mut model, &mut adapters, &data.train, &tcfg)?;
                let bundle = AdapterBundle {
                    adapters,
                    run: AdapterRun {
                        l,
                        lambda: tcfg.lambda,
                        mode: TrainMode::Fe,
                        seed: cfg.seed,
                    },
                };
                let spec = EvalSpec {
                    lambda: Some(tcfg.lambda),
                    ..spec
                };
                (
                    evaluate_sets(&model, Some(&bundle), &data.evals, &spec, threads)?,
                    Some(acfg),
                )
            };
            let f = count_flops(&mcfg, acfg.as_ref(), n, l, cfg.eval.flops_batch, cfg.eval.flops_seq_len)?;
            let row = SweepRow {
                n,
                l,
                mean: report.mean,
                std: report.std,
                speedup_pct: f.speedup_pct,
                seed: cfg.seed,
            };
            eprintln!(
                "N={n} l={l}: {:.2} ± {:.2}, speedup {:.1}%",
                100.0 * row.mean,
                100.0 * row.std,
                row.speedup_pct
            );
            done.insert((n, l), row);
            let rows: Vec<SweepRow> = done.values().cloned().collect();
            write_csv(&a.out, &rows)?;
        }
    }
    Ok(done.into_values().collect())
}
