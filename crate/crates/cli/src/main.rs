use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use metagent_cli::{pipeline, EngineConfig, ExperimentKind, RunOutput};
use metagent_core::agents::Answers;

#[derive(Parser)]
#[command(name = "metagent", version, about = "Grow a neural surrogate under a budget, then invert it")]
struct Cli {
    /// JSON engine config; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config entry, e.g. `--set budgets.target_metric=5e-3`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Shorthand for `--set out_dir=DIR`.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Plan from a request, verify inputs, train and run inverse design.
    Run {
        #[arg(long)]
        query: String,
        /// Planner answers such as `target_spectrum_path=/data/t.txt`.
        #[arg(long = "answer", value_name = "KEY=VALUE")]
        answers: Vec<String>,
    },
    /// Forward training plus a held-out inverse-design evaluation.
    Experiment {
        #[arg(value_enum)]
        kind: ExperimentKind,
    },
    /// Forward training only.
    ForwardTrain {
        #[arg(long, value_enum, default_value = "target-mse")]
        mode: ExperimentKind,
    },
    /// Neural Adjoint against a saved bundle.
    Inverse {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        target: PathBuf,
    },
    /// Plan and verify inputs without training.
    Check {
        #[arg(long, default_value = "")]
        query: String,
        #[arg(long = "answer", value_name = "KEY=VALUE")]
        answers: Vec<String>,
    },
}

fn parse_answers(raw: &[String]) -> Result<Answers> {
    raw.iter()
        .map(|a| {
            a.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .with_context(|| format!("answer `{a}` is not key=value"))
        })
        .collect()
}

fn summarize(out: &RunOutput) {
    let m = &out.metrics;
    if let Some(f) = &m.forward {
        println!(
            "forward: best MSE {} ({}) at k = {}, {} events{}",
            f.best_metric.map_or("n/a".into(), |v| format!("{v:.4e}")),
            f.best_model_id,
            f.final_k,
            f.events,
            if f.target_reached { "" } else { " (target not reached)" }
        );
    }
    if let Some(i) = &m.inverse {
        match (&i.resim, i.best_surrogate_loss) {
            (Some(r), _) => println!("inverse: best re-simulation MSE {:.4e}", r.best),
            (None, Some(s)) => println!("inverse: best surrogate loss {s:.4e} (re-simulation unavailable)"),
            _ => {}
        }
    }
    if let Some(d) = &m.distribution {
        if let Some(r) = &d.resim {
            println!(
                "held-out: {} targets, re-sim median {:.4e}, p95 {:.4e}",
                d.n_targets, r.median, r.p95
            );
        }
    }
    println!("artifacts in {}", out.out_dir.display());
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match real_main() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn real_main() -> Result<()> {
    let cli = Cli::parse();
    let mut overrides = cli.overrides.clone();
    if let Some(dir) = &cli.out_dir {
        overrides.push(format!("out_dir={}", dir.display()));
    }
    let cfg = EngineConfig::load(cli.config.as_deref(), &overrides)?;
    let out = match cli.command {
        Command::Run { query, answers } => pipeline::run(&cfg, &query, &parse_answers(&answers)?)?,
        Command::Experiment { kind } => pipeline::experiment(&cfg, kind)?,
        Command::ForwardTrain { mode } => pipeline::forward_only(&cfg, mode)?,
        Command::Inverse { bundle, target } => pipeline::inverse(&cfg, &bundle, &target)?,
        Command::Check { query, answers } => {
            let task = pipeline::check(&cfg, &query, &parse_answers(&answers)?)?;
            println!("{}", serde_json::to_string_pretty(&task)?);
            return Ok(());
        }
    };
    summarize(&out);
    Ok(())
}
