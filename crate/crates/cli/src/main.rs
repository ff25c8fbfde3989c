use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use seqcl::config::RunConfig;
use seqcl::dataset::{split, CandidateSetting, EvalTarget, Format};
use seqcl::diagnostics::TrajectoryLog;
use seqcl::gradcheck::{gradcheck, GradcheckConfig};
use seqcl::loss::Augmentation;
use seqcl::metrics::{evaluate, write_csv, EvalOptions, DEFAULT_CUTOFFS};
use seqcl::threshold::Strategy;
use seqcl::trainer::{self, Model, Seeds};

/// Sequential recommender with threshold-filtered contrastive learning.
///
/// Every training flag overrides the config-file key of the same name
/// (dashes become underscores). Each run directory receives a
/// `manifest.json` holding the resolved config and derived seeds.
#[derive(Parser)]
#[command(name = "seqcl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoints, logs and diagnostics to --out.
    Train(TrainArgs),
    /// Evaluate a checkpoint on held-out items.
    Eval(EvalArgs),
    /// Recompute embedding and threshold diagnostics from a checkpoint.
    Diagnose(DiagnoseArgs),
    /// Compare analytic gradients with central finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Args)]
struct Overrides {
    /// TOML config file with flat `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Interaction file.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Interaction file format: ml1m or tsv.
    #[arg(long)]
    format: Option<Format>,
    /// Threshold strategy: fixed, statistical or learnable.
    #[arg(long)]
    strategy: Option<Strategy>,
    /// Threshold of the fixed strategy, in [-1, 1].
    #[arg(long, allow_negative_numbers = true)]
    k0: Option<f64>,
    /// Percentile of the statistical threshold, in [0, 100].
    #[arg(long)]
    q: Option<f64>,
    /// Weight of the threshold regularizer.
    #[arg(long)]
    lambda: Option<f64>,
    /// Weight of the contrastive loss.
    #[arg(long)]
    lambda_cl: Option<f64>,
    /// Positive construction: su, un or us_x.
    #[arg(long)]
    aug: Option<Augmentation>,
    /// Re-label candidates above the threshold as weighted positives.
    #[arg(long, value_enum)]
    positive_sampling: Option<Switch>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Stop after this many optimizer steps (0 = no limit).
    #[arg(long)]
    max_steps: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
}

impl Overrides {
    fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
            None => RunConfig::default(),
        };
        if let Some(d) = &self.data {
            c.data = Some(d.to_string_lossy().into_owned());
        }
        macro_rules! set {
            ($($f:ident),*) => {$(if let Some(v) = self.$f { c.$f = v; })*};
        }
        set!(format, strategy, k0, q, lambda, lambda_cl, aug, seed, epochs, max_steps, batch_size, learning_rate);
        if let Some(s) = self.positive_sampling {
            c.positive_sampling = matches!(s, Switch::On);
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    overrides: Overrides,
    /// Run directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Valid,
    Test,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Interaction file; defaults to the one recorded in the checkpoint.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    format: Option<Format>,
    /// Comma-separated candidate settings: whole, popular, random.
    #[arg(long, value_delimiter = ',', default_value = "whole,popular,random")]
    setting: Vec<CandidateSetting>,
    #[arg(long, value_enum, default_value = "test")]
    split: Split,
    /// Candidate sampling seed; defaults to the training run's.
    #[arg(long)]
    seed: Option<u64>,
    /// Also write eval_metrics.csv/.json and a manifest here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DiagnoseArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    format: Option<Format>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long)]
    seed: Option<u64>,
    /// Write the full report as JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// The checkpoint's model and run config with data flags applied.
fn load_checkpoint(ckpt: &Path, data: &Option<PathBuf>, format: Option<Format>) -> Result<(Model, RunConfig)> {
    if !ckpt.exists() {
        bail!("checkpoint {} does not exist", ckpt.display());
    }
    let (model, meta, hash) = Model::load(ckpt)?;
    let mut cfg = meta.run;
    if let Some(d) = data {
        cfg.data = Some(d.to_string_lossy().into_owned());
    }
    if let Some(f) = format {
        cfg.format = f;
    }
    let ds = trainer::load_dataset(&cfg)?;
    if ds.vocab_hash() != hash {
        bail!(
            "dataset vocabulary {:016x} does not match the checkpoint's {hash:016x}",
            ds.vocab_hash()
        );
    }
    Ok((model, cfg))
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = a.overrides.resolve()?;
    let ds = trainer::load_dataset(&cfg)?;
    info!("{} users, {} items", ds.num_users(), ds.num_items());
    let o = trainer::train(&cfg, &ds, Some(&a.out))?;
    println!(
        "best epoch {} valid NDCG@10 {:.4}; artifacts in {}",
        o.best_epoch,
        o.best_ndcg10,
        a.out.display()
    );
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let (model, cfg) = load_checkpoint(&a.ckpt, &a.data, a.format)?;
    let ds = trainer::load_dataset(&cfg)?;
    let sv = split(&ds);
    let seeds = Seeds::derive(cfg.seed);
    let opts = EvalOptions {
        target: match a.split {
            Split::Valid => EvalTarget::Valid,
            Split::Test => EvalTarget::Test,
        },
        cutoffs: DEFAULT_CUTOFFS.to_vec(),
        num_candidates: cfg.eval_candidates,
        exclude_seen: cfg.exclude_seen,
        seed: a.seed.unwrap_or(seeds.eval),
    };
    let reports = a
        .setting
        .iter()
        .map(|&s| evaluate(&model.encoder, &sv, s, &opts))
        .collect::<seqcl::Result<Vec<_>>>()?;
    let mut out = std::io::stdout().lock();
    write_csv(&mut out, &reports)?;
    out.flush()?;
    if let Some(dir) = &a.out {
        trainer::write_manifest(dir, &cfg, seeds, &ds)?;
        trainer::write_reports(dir, "eval_metrics", &reports)?;
    }
    Ok(())
}

fn diagnose(a: DiagnoseArgs) -> Result<()> {
    let (model, cfg) = load_checkpoint(&a.ckpt, &a.data, a.format)?;
    let ds = trainer::load_dataset(&cfg)?;
    let seed = a.seed.unwrap_or(cfg.seed);
    let record = trainer::diagnose(&model, &split(&ds), &cfg, seed)?;
    trainer::write_manifest(&a.out, &cfg, Seeds::derive(seed), &ds)?;
    println!(
        "alignment {:.6} uniformity {:.6} mean k {:.4} (min {:.4}, max {:.4}) percentile target {}",
        record.alignment,
        record.uniformity,
        record.mean_k,
        record.min_k,
        record.max_k,
        record.k_stat_target.map_or("-".into(), |t| format!("{t:.4}"))
    );
    TrajectoryLog::to_dir(&a.out).log_epoch(record)?;
    Ok(())
}

fn grad(a: GradcheckArgs) -> Result<bool> {
    let mut cfg = GradcheckConfig::default();
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let r = gradcheck(&cfg)?;
    for c in &r.cases {
        println!(
            "{:<18} {:>5} coords  max rel. error {:.3e}  {}",
            c.name,
            c.coordinates,
            c.max_rel_error,
            if c.passed { "PASS" } else { "FAIL" }
        );
    }
    println!("max rel. error {:.3e} (tolerance {:.0e})", r.max_rel_error(), r.tolerance);
    println!("{}", if r.passed() { "PASS" } else { "FAIL" });
    if let Some(p) = &a.out {
        fs::write(p, serde_json::to_string_pretty(&r)? + "\n").with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(r.passed())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train(a).map(|_| true),
        Command::Eval(a) => eval(a).map(|_| true),
        Command::Diagnose(a) => diagnose(a).map(|_| true),
        Command::Gradcheck(a) => grad(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
