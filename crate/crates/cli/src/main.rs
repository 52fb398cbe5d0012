//! `vipo` command-line driver.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vipo_core::flow_model::save_checkpoint;
use vipo_core::harness::{
    dump_artifacts, evaluate, load_pretrained, pretrain_model, run_ablation_grid, run_redness_experiment, DumpOptions,
    EvalSet, ExperimentConfig,
};
use vipo_core::Error;

#[derive(Parser)]
#[command(name = "vipo", version, about = "Pixel-wise GRPO fine-tuning of a toy flow model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the flow model on the synthetic shapes and save the checkpoint.
    Pretrain(Common),
    /// GRPO vs ViPO under the redness reward, for every configured seed.
    Train(Common),
    /// Allocation-map ablation grid.
    Ablate(Common),
    /// Sample the checkpoint on the evaluation set and write images.
    Render(Common),
}

#[derive(Args)]
struct Common {
    /// Configuration file; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run a single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Also write allocation-map images next to the samples.
    #[arg(long)]
    dump_maps: bool,
    /// Also write per-component map images.
    #[arg(long)]
    dump_components: bool,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig, Error> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg = cfg.with_seed(seed);
        }
        if let Some(out) = &self.out {
            cfg.output = out.clone();
        }
        Ok(cfg)
    }

    fn dump(&self) -> DumpOptions {
        DumpOptions {
            maps: self.dump_maps,
            components: self.dump_components,
        }
    }
}

fn pretrain(cfg: &ExperimentConfig) -> Result<(), Error> {
    let (model, report) = pretrain_model(cfg)?;
    if let Some(dir) = cfg.checkpoint.parent() {
        std::fs::create_dir_all(dir)?;
    }
    save_checkpoint(&model, &cfg.checkpoint)?;
    let smooth = report.smoothed(100);
    if let (Some(first), Some(last)) = (smooth.get(smooth.len().min(100).saturating_sub(1)), smooth.last()) {
        println!("pretrain loss {first:.4} -> {last:.4}");
    }
    println!("checkpoint written to {}", cfg.checkpoint.display());
    Ok(())
}

fn train(cfg: &ExperimentConfig, dump: DumpOptions) -> Result<(), Error> {
    let model = load_pretrained(cfg)?;
    let out = cfg.output.join("redness");
    let summary = run_redness_experiment(&model, cfg, Some(&out), dump)?;
    println!("seed  matched  grpo_gain  vipo_gain  grpo_structure  vipo_structure");
    for s in &summary.seeds {
        let w = summary.smoothing_window;
        println!(
            "{:>4}  {:>7}{}  {:>9.4}  {:>9.4}  {:>14.4}  {:>14.4}",
            s.seed,
            s.matched_update,
            if s.matched_fallback { "*" } else { " " },
            s.grpo.smoothed_reward(w) - s.grpo.baseline_reward(),
            s.vipo.smoothed_reward(w) - s.vipo.baseline_reward(),
            s.grpo_structure,
            s.vipo_structure
        );
    }
    println!(
        "vipo structure >= grpo in {}/{} seeds; results in {}",
        summary.vipo_wins(),
        summary.seeds.len(),
        out.display()
    );
    Ok(())
}

fn ablate(cfg: &ExperimentConfig, dump: DumpOptions) -> Result<(), Error> {
    let model = load_pretrained(cfg)?;
    let out = cfg.output.join("ablation");
    let report = run_ablation_grid(&model, cfg, Some(&out), dump)?;
    for r in &report.rows {
        println!(
            "{:<48} reward {:>8.4}  structure {:.4}",
            r.cell.variant(),
            r.final_reward,
            r.structure
        );
    }
    println!(
        "first-update gradient check: max rel err {:.3e} over {} positions",
        report.cross_check.max_rel_err(),
        report.cross_check.positions
    );
    println!("results in {}", out.display());
    Ok(())
}

fn render(cfg: &ExperimentConfig, dump: DumpOptions) -> Result<(), Error> {
    let model = load_pretrained(cfg)?;
    let snap = evaluate(&model, &EvalSet::new(cfg), &cfg.train.sampler, &cfg.data, 0)?;
    let out = cfg.output.join("render");
    dump_artifacts(&out, &snap, &cfg.train.psm, dump)?;
    println!(
        "redness {:.4}, structure {:.4}; images in {}",
        snap.redness,
        snap.structure,
        out.display()
    );
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) | Error::UnknownClass(_) => 2,
        Error::DivergedTraining { .. } => 3,
        _ => 1,
    }
}

type Action = fn(&ExperimentConfig, DumpOptions) -> Result<(), Error>;

fn run(cli: &Cli) -> Result<(), Error> {
    let (common, action): (&Common, Action) = match &cli.command {
        Command::Pretrain(c) => (c, |cfg, _| pretrain(cfg)),
        Command::Train(c) => (c, train),
        Command::Ablate(c) => (c, ablate),
        Command::Render(c) => (c, render),
    };
    let cfg = common.load().map_err(|e| match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    })?;
    action(&cfg, common.dump())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::MissingCheckpoint(p) = &e {
                eprintln!("run `vipo pretrain` first to create {}", Path::new(p).display());
            }
            ExitCode::from(exit_code(&e))
        }
    }
}
