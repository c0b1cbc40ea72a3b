//! Command-line driver for contraction-mapping softmax experiments.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 data/format error,
//! 3 numeric error or training divergence. `CM_LOG=debug|info` controls
//! verbosity.

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use cmsoftmax::analysis::{partition_by_norm, read_records_csv, scatter_svg, subset_report,
    write_records_csv, write_report_csv};
use cmsoftmax::autodiff::grad_check;
use cmsoftmax::config::{load_config, render, load_test_dataset, load_train_dataset,
    ExperimentConfig};
use cmsoftmax::losses::{
    cm_margin_softmax_loss, cm_softmax_loss, fixed_margin_loss, fixed_norm_loss, lower_bound,
    plain_softmax_loss, upper_bound, ClassifierHead, ContractionSpec, FixedNormSpec, MarginSpec,
    MarginVariant,
};
use cmsoftmax::training::{evaluate, load_checkpoint, save_checkpoint, train};
use cmsoftmax::{Error, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "cmsoftmax", version, about = "Quality-aware softmax loss experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model as described by a config file
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (overrides the config's `out`)
        #[arg(long)]
        out: Option<PathBuf>,
        /// RNG seed (overrides the config's `seed`)
        #[arg(long)]
        seed: Option<u64>,
        /// Comma-separated seed sweep; runs land in <out>/seed_<n>
        #[arg(long)]
        seeds: Option<String>,
    },
    /// Evaluate a checkpoint on the config's test split
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Low-quality subset fraction (overrides the config)
        #[arg(long)]
        fraction: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Scatter-plot 2-D feature records to SVG
    Plot {
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the feature-norm bounds for a designated probability and class count
    Bounds {
        #[arg(long)]
        p: f64,
        #[arg(long, short = 'c')]
        classes: usize,
    },
    /// Check a loss's analytic gradients against finite differences
    Gradcheck {
        /// softmax | fixed_norm | cm_softmax | cm_margin_angle |
        /// cm_margin_cosine | fixed_margin_angle | fixed_margin_cosine
        #[arg(long)]
        loss: String,
        #[arg(long, default_value_t = 8)]
        batch: usize,
        #[arg(long, default_value_t = 16)]
        dim: usize,
        #[arg(long, short = 'c', default_value_t = 5)]
        classes: usize,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 1e-4)]
        threshold: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CM_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let kind = e.kind();
            let _ = e.print();
            return if matches!(kind, ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Domain(_) => 1,
        Error::Format(_) | Error::Io(_) | Error::Dimension { .. } | Error::Index(_) => 2,
        Error::Numeric(_) | Error::Diverged { .. } | Error::DegenerateFeature(_)
        | Error::Contract(_) => 3,
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train {
            config,
            out,
            seed,
            seeds,
        } => cmd_train(config, out, seed, seeds),
        Command::Eval {
            checkpoint,
            config,
            fraction,
            out,
        } => cmd_eval(checkpoint, config, fraction, out),
        Command::Plot { records, out } => cmd_plot(records, out),
        Command::Bounds { p, classes } => cmd_bounds(p, classes),
        Command::Gradcheck {
            loss,
            batch,
            dim,
            classes,
            trials,
            threshold,
            seed,
        } => cmd_gradcheck(&loss, batch, dim, classes, trials, threshold, seed),
    }
}

fn cmd_train(
    config: PathBuf,
    out: Option<PathBuf>,
    seed: Option<u64>,
    seeds: Option<String>,
) -> Result<()> {
    let mut cfg = load_config(&config)?;
    if let Some(out) = out {
        cfg.out_dir = out;
    }
    if let Some(seed) = seed {
        cfg.seed = seed;
        cfg.optimizer.seed = seed;
    }

    let Some(seeds) = seeds else {
        return run_one(cfg);
    };

    let mut sweep = Vec::new();
    for part in seeds.split(',') {
        let s: u64 = part.trim().parse().map_err(|_| {
            Error::Config(format!("--seeds: invalid seed `{part}`"))
        })?;
        sweep.push(s);
    }
    let base = cfg.out_dir.clone();
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for &s in &sweep {
            let mut run_cfg = cfg.clone();
            run_cfg.seed = s;
            run_cfg.optimizer.seed = s;
            run_cfg.out_dir = base.join(format!("seed_{s}"));
            handles.push(scope.spawn(move || run_one(run_cfg)));
        }
        for handle in handles {
            handle.join().expect("sweep thread panicked")?;
        }
        Ok(())
    })
}

fn run_one(mut cfg: ExperimentConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out_dir)?;
    cfg.out_dir = cfg.out_dir.canonicalize()?;
    let dataset = load_train_dataset(&cfg)?;
    log::info!(
        "training loss={} on {} samples, seed {}",
        cfg.loss.name(),
        dataset.len(),
        cfg.seed
    );
    let state = train(&dataset, &cfg.backbone, &cfg.loss, &cfg.optimizer)?;

    save_checkpoint(&state, &cfg.out_dir.join("checkpoint.cmnc"))?;
    let mut history = String::from("epoch,mean_loss\n");
    for (epoch, loss) in state.loss_history.iter().enumerate() {
        history.push_str(&format!("{epoch},{loss}\n"));
    }
    fs::write(cfg.out_dir.join("loss_history.csv"), history)?;
    fs::write(cfg.out_dir.join("config.resolved"), render(&cfg))?;
    println!(
        "trained {} for {} epochs; artifacts in {}",
        cfg.loss.name(),
        state.epoch,
        cfg.out_dir.display()
    );
    Ok(())
}

fn cmd_eval(
    checkpoint: PathBuf,
    config: PathBuf,
    fraction: Option<f64>,
    out: Option<PathBuf>,
) -> Result<()> {
    let mut cfg = load_config(&config)?;
    if let Some(f) = fraction {
        if !(f > 0.0 && f < 1.0) {
            return Err(Error::Config(format!(
                "--fraction must lie in (0, 1), got {f}"
            )));
        }
        cfg.fraction = f;
    }
    if let Some(out) = out {
        cfg.out_dir = out;
    }
    fs::create_dir_all(&cfg.out_dir)?;

    let state = load_checkpoint(&checkpoint)?;
    let dataset = load_test_dataset(&cfg)?;
    let (accuracy, records) = evaluate(&state, &dataset)?;
    write_records_csv(&records, &cfg.out_dir.join("records.csv"))?;

    let partition = partition_by_norm(&records, cfg.fraction)?;
    let rows = subset_report(&partition);
    write_report_csv(&rows, &cfg.out_dir.join("report.csv"))?;

    println!("accuracy {accuracy:.4} over {} samples", records.len());
    for row in &rows {
        println!(
            "{:<8} count {:<6} accuracy {:.4} mean_norm {:.4}",
            row.subset, row.count, row.accuracy, row.mean_norm
        );
    }
    Ok(())
}

fn cmd_plot(records: PathBuf, out: PathBuf) -> Result<()> {
    let records = read_records_csv(&records)?;
    scatter_svg(&records, &out)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_bounds(p: f64, classes: usize) -> Result<()> {
    let s_lower = lower_bound(p, classes)?;
    let s_upper = upper_bound(s_lower)?;
    println!("s_lower = {s_lower:.6}");
    println!("s_upper = {s_upper:.6}");
    Ok(())
}

fn cmd_gradcheck(
    loss: &str,
    batch: usize,
    dim: usize,
    classes: usize,
    trials: usize,
    threshold: f64,
    seed: u64,
) -> Result<()> {
    if trials == 0 {
        return Err(Error::Config("gradcheck needs at least one trial".into()));
    }
    if batch == 0 || dim == 0 || classes < 2 {
        return Err(Error::Config(format!(
            "sizes must be positive with at least 2 classes, got batch={batch} dim={dim} classes={classes}"
        )));
    }

    let contraction = ContractionSpec::new(0.9, classes, 1.0)?;
    let fixed = FixedNormSpec::new(10.0)?;
    let angle = MarginSpec::new(MarginVariant::AdditiveAngle, 0.5)?;
    let cosine = MarginSpec::new(MarginVariant::AdditiveCosine, 0.35)?;

    let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let features = Tensor::new(
            vec![batch, dim],
            (0..batch * dim).map(|_| rng.random_range(-2.0..2.0)).collect(),
        )?;
        let weights = Tensor::new(
            vec![dim, classes],
            (0..dim * classes)
                .map(|_| rng.random_range(-2.0..2.0))
                .collect(),
        )?;
        let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..classes)).collect();

        let err = grad_check(
            |g, ids| {
                let head = ClassifierHead::new(g, ids[1])?;
                let out = match loss {
                    "softmax" => plain_softmax_loss(g, ids[0], &head, &labels)?,
                    "fixed_norm" => fixed_norm_loss(g, ids[0], &head, &labels, &fixed)?,
                    "cm_softmax" => cm_softmax_loss(g, ids[0], &head, &labels, &contraction)?,
                    "cm_margin_angle" => {
                        cm_margin_softmax_loss(g, ids[0], &head, &labels, &contraction, &angle)?
                    }
                    "cm_margin_cosine" => {
                        cm_margin_softmax_loss(g, ids[0], &head, &labels, &contraction, &cosine)?
                    }
                    "fixed_margin_angle" => {
                        fixed_margin_loss(g, ids[0], &head, &labels, &fixed, &angle)?
                    }
                    "fixed_margin_cosine" => {
                        fixed_margin_loss(g, ids[0], &head, &labels, &fixed, &cosine)?
                    }
                    other => return Err(Error::Config(format!("unknown loss `{other}`"))),
                };
                Ok(out.loss)
            },
            &[features, weights],
            1e-5,
        )?;
        worst = worst.max(err);
    }

    println!("max relative error {worst:.3e} over {trials} trials");
    if worst > threshold {
        return Err(Error::Numeric(format!(
            "gradient check failed: {worst:.3e} exceeds threshold {threshold:.3e}"
        )));
    }
    Ok(())
}
