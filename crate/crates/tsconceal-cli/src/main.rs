use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, bail};
use clap::{Args, Parser, Subcommand};

use tsconceal::data::{load_ucr_tsv, LabeledSeriesSet};
use tsconceal::metrics::{f1, Averaging};
use tsconceal::runner::{
    self, emit_plot, evaluate_sets, resolve_output_root, ExperimentConfig, RunRecord,
};

#[derive(Parser)]
#[command(
    name = "tsconceal",
    version,
    about = "Concealed adversarial attacks on time-series classifiers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the target classifier and save its parameters.
    TrainTarget(RunArgs),
    /// Curriculum-train the discriminator and save its parameters.
    TrainDisc(RunArgs),
    /// Run the configured attack end to end and score every iteration.
    Attack(RunArgs),
    /// Score a clean/attacked TSV pair with the config's models.
    Evaluate(EvaluateArgs),
    /// Run the attack over the config's hyperparameter grid.
    Grid(RunArgs),
    /// Overlay an original and an attacked series as an SVG.
    Plot(PlotArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides TSCONCEAL_OUT and the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Clean series, UCR TSV.
    #[arg(long)]
    clean: PathBuf,
    /// Attacked series, UCR TSV, same shape and labels as --clean.
    #[arg(long)]
    attacked: PathBuf,
}

#[derive(Args)]
struct PlotArgs {
    /// Original series, UCR TSV.
    #[arg(long)]
    original: PathBuf,
    /// Attacked series, UCR TSV.
    #[arg(long)]
    attacked: PathBuf,
    /// Row to plot from both files.
    #[arg(long, default_value_t = 0)]
    row: usize,
    /// Output SVG path.
    #[arg(long, default_value = "overlay.svg")]
    out: PathBuf,
    /// Keep only the first N points.
    #[arg(long)]
    truncate: Option<usize>,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::TrainTarget(args) => train_target(&args),
        Command::TrainDisc(args) => train_disc(&args),
        Command::Attack(args) => {
            let (cfg, out) = load(&args)?;
            report_run(&runner::run_pipeline_in(&cfg, &out)?)
        }
        Command::Grid(args) => {
            let (cfg, out) = load(&args)?;
            report_run(&runner::grid_search_in(&cfg, &out)?)
        }
        Command::Evaluate(args) => evaluate(&args),
        Command::Plot(args) => plot(&args),
    }
}

fn load(args: &RunArgs) -> anyhow::Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let out = resolve_output_root(args.out.as_deref(), cfg.output.directory.as_deref());
    Ok((cfg, out))
}

fn train_target(args: &RunArgs) -> anyhow::Result<()> {
    let (cfg, out) = load(args)?;
    fs::create_dir_all(&out).map_err(|e| anyhow!("creating {}: {e}", out.display()))?;
    let (train, test) = runner::load_data(&cfg)?;
    let target = runner::fit_target(&cfg, &train)?;
    let clean = f1(
        test.labels(),
        &target.predict_labels(test.features())?,
        Averaging::Macro,
    )?;
    let path = out.join("target_params.json");
    target.save_parameters(&path)?;
    println!(
        "trained target on {} series; clean test macro-F1 {clean:.4}",
        train.len()
    );
    println!("wrote {}", path.display());
    Ok(())
}

fn train_disc(args: &RunArgs) -> anyhow::Result<()> {
    let (cfg, out) = load(args)?;
    fs::create_dir_all(&out).map_err(|e| anyhow!("creating {}: {e}", out.display()))?;
    let (train, _) = runner::load_data(&cfg)?;
    let target = runner::fit_target(&cfg, &train)?;
    let (disc, report) = runner::train_discriminator(&cfg, &train, &target)?;
    for (round, (eps, acc)) in report
        .epsilon_schedule
        .iter()
        .zip(&report.round_accuracies)
        .enumerate()
    {
        println!("round {round}: epsilon {eps} holdout accuracy {acc:.4}");
    }
    let params_path = out.join("disc_params.json");
    disc.save_parameters(&params_path)?;
    let report_path = out.join("curriculum.json");
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    fs::write(&report_path, text)
        .map_err(|e| anyhow!("writing {}: {e}", report_path.display()))?;
    println!("wrote {}", params_path.display());
    println!("wrote {}", report_path.display());
    Ok(())
}

fn report_run(record: &RunRecord) -> anyhow::Result<()> {
    for combo in &record.combinations {
        let sel = combo.selected();
        let axes = if combo.assignments.is_empty() {
            String::new()
        } else {
            let parts: Vec<String> = combo
                .assignments
                .iter()
                .map(|(k, v)| format!("{k}={v}"))
                .collect();
            format!(" [{}]", parts.join(" "))
        };
        println!(
            "combination {}{axes}: iteration {} ({}) E {:.4} C {:.4} S {:.4}, {} queries",
            combo.index,
            sel.iteration,
            combo.report.selection.reason.name(),
            sel.efficiency,
            sel.concealability,
            sel.successfulness,
            combo.queries
        );
    }
    if let Some(best) = record
        .combinations
        .iter()
        .max_by(|a, b| {
            a.selected()
                .successfulness
                .partial_cmp(&b.selected().successfulness)
                .expect("metrics are finite")
                .then(b.index.cmp(&a.index))
        })
        .filter(|_| record.combinations.len() > 1)
    {
        println!(
            "best: combination {} with S {:.4}",
            best.index,
            best.selected().successfulness
        );
    }
    println!(
        "wrote {} artifacts to {} in {:.1}s",
        record.artifact_paths.len(),
        record.out_dir.display(),
        record.wall_clock_secs
    );
    Ok(())
}

fn evaluate(args: &EvaluateArgs) -> anyhow::Result<()> {
    let (cfg, _) = load(&args.run)?;
    let clean = load_ucr_tsv(&args.clean)?;
    let attacked = load_ucr_tsv(&args.attacked)?;
    check_pair(&clean, &attacked)?;
    let (train, _) = runner::load_data(&cfg)?;
    let target = runner::fit_target(&cfg, &train)?;
    let (disc, _) = runner::train_discriminator(&cfg, &train, &target)?;
    let scores = evaluate_sets(&target, &disc, &clean, attacked.features())?;
    println!("{}", serde_json::to_string_pretty(&scores)?);
    Ok(())
}

fn check_pair(clean: &LabeledSeriesSet, attacked: &LabeledSeriesSet) -> anyhow::Result<()> {
    if clean.features().shape() != attacked.features().shape() {
        bail!(
            "clean and attacked sets differ in shape: {:?} vs {:?}",
            clean.features().shape(),
            attacked.features().shape()
        );
    }
    if clean.labels() != attacked.labels() {
        bail!("clean and attacked sets carry different labels");
    }
    Ok(())
}

fn plot(args: &PlotArgs) -> anyhow::Result<()> {
    let original = load_ucr_tsv(&args.original)?;
    let attacked = load_ucr_tsv(&args.attacked)?;
    let limit = original.len().min(attacked.len());
    if args.row >= limit {
        bail!("row {} out of range; both files have {limit} rows", args.row);
    }
    emit_plot(
        original.features().row(args.row),
        attacked.features().row(args.row),
        &args.out,
        args.truncate,
    )?;
    println!("wrote {}", args.out.display());
    Ok(())
}
