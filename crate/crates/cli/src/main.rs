mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use adagtcn::data::{load_dataset, save_dataset, split_by_participant, threshold_oracle, SessionSample, SplitRatios, SyntheticConfig};
use adagtcn::gradsuite::{self, GradModule};
use adagtcn::metrics::Metrics;
use adagtcn::model::Model;
use adagtcn::train::{evaluate, inspect_graph, run_repetitions, ExecMode, TrainConfig};
use adagtcn::{Error, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "adagtcn", version, about = "Adaptive graph learning with temporal convolutions for EEG reading-task classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on a dataset split by participant and save the best checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Evaluate a checkpoint on every session of a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Print the learned graph of one session as JSON.
    InspectGraph {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Session id.
        #[arg(long)]
        sample: String,
    },
    /// Write a synthetic dataset drawn from a random planted graph.
    GenSynth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 400)]
        sessions: usize,
        #[arg(long, default_value_t = 8)]
        participants: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the planted graph and signal settings as JSON.
        #[arg(long)]
        graph_out: Option<PathBuf>,
    },
    /// Compare analytic gradients with finite differences.
    GradCheck {
        #[arg(long, value_enum, default_value_t = ModuleArg::All)]
        module: ModuleArg,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModuleArg {
    All,
    Agl,
    Gconv,
    Tconv,
    Head,
    Model,
}

impl ModuleArg {
    fn modules(self) -> Vec<GradModule> {
        match self {
            ModuleArg::All => GradModule::ALL.to_vec(),
            ModuleArg::Agl => vec![GradModule::Agl],
            ModuleArg::Gconv => vec![GradModule::Gconv],
            ModuleArg::Tconv => vec![GradModule::Tconv],
            ModuleArg::Head => vec![GradModule::Head],
            ModuleArg::Model => vec![GradModule::Model],
        }
    }
}

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NonFinite(_) => EXIT_NUMERIC,
        e if e.is_data_error() => EXIT_DATA,
        _ => EXIT_USAGE,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Train { config, data, out, json } => train(&config, &data, &out, json),
        Command::Eval { ckpt, data, json } => eval(&ckpt, &data, json),
        Command::InspectGraph { ckpt, data, sample } => inspect(&ckpt, &data, &sample),
        Command::GenSynth {
            out,
            sessions,
            participants,
            seed,
            graph_out,
        } => gen_synth(&out, sessions, participants, seed, graph_out.as_deref()),
        Command::GradCheck { module, json } => grad_check(module, json),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn load_nonempty(path: &Path) -> Result<Vec<SessionSample>> {
    let samples = load_dataset(path)?;
    if samples.is_empty() {
        return Err(Error::Parse {
            location: path.display().to_string(),
            message: "dataset has no sessions".into(),
        });
    }
    for s in &samples {
        s.validate()?;
    }
    Ok(samples)
}

fn metrics_row(label: &str, m: &Metrics) -> String {
    format!(
        "{label:<6} {:>9.4} {:>9.4} {:>9.4} {:>9.4}",
        m.accuracy, m.micro_f1, m.precision, m.recall
    )
}

const METRICS_HEADER: &str = "         accuracy  micro-F1 precision    recall";

fn train(config: &Path, data: &Path, out: &Path, json_out: bool) -> Result<u8> {
    let mut cfg = config::parse(&fs::read_to_string(config)?)?;
    let samples = load_nonempty(data)?;
    if !cfg.explicit_p {
        cfg.model.p = samples[0].sequence.nodes();
    }
    cfg.model.validate()?;
    let warnings = cfg.model.warnings();
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    let split = split_by_participant(&samples, SplitRatios::default(), cfg.train.seed)?;
    let train_cfg = TrainConfig {
        repetitions: cfg.train.repetitions.max(1),
        ..cfg.train.clone()
    };
    let outcome = run_repetitions(&cfg.model, &split, &train_cfg, ExecMode::default())?;
    let selected = outcome
        .outcomes
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.best_val_loss.total_cmp(&b.1.best_val_loss))
        .map(|(i, _)| i)
        .expect("at least one repetition");
    outcome.outcomes[selected].model.save(out)?;

    if json_out {
        let runs: Vec<Value> = outcome
            .outcomes
            .iter()
            .zip(&outcome.report.runs)
            .enumerate()
            .map(|(r, (o, m))| {
                json!({
                    "seed": train_cfg.seed + r as u64,
                    "test": m,
                    "best_epoch": o.best_epoch,
                    "best_val_loss": o.best_val_loss,
                    "epochs_run": o.history.len(),
                    "seconds": o.elapsed_secs,
                })
            })
            .collect();
        let doc = json!({
            "checkpoint": out.display().to_string(),
            "selected_run": selected,
            "split": split.spec,
            "sessions": {"train": split.train.len(), "val": split.val.len(), "test": split.test.len()},
            "runs": runs,
            "mean": outcome.report.mean,
            "std": outcome.report.std,
            "warnings": warnings,
        });
        println!("{}", serde_json::to_string_pretty(&doc)?);
    } else {
        println!(
            "sessions: {} train, {} val, {} test",
            split.train.len(),
            split.val.len(),
            split.test.len()
        );
        println!("{METRICS_HEADER}  best epoch   seconds");
        for (r, (o, m)) in outcome.outcomes.iter().zip(&outcome.report.runs).enumerate() {
            println!("{} {:>11} {:>9.1}", metrics_row(&format!("run {r}"), m), o.best_epoch, o.elapsed_secs);
        }
        println!("{}", metrics_row("mean", &outcome.report.mean));
        println!("{}", metrics_row("std", &outcome.report.std));
        println!("saved run {selected} (lowest validation loss) to {}", out.display());
    }
    Ok(0)
}

fn eval(ckpt: &Path, data: &Path, json_out: bool) -> Result<u8> {
    let model = Model::load(ckpt)?;
    let samples = load_nonempty(data)?;
    let m = evaluate(&model, &samples, ExecMode::default())?;
    if json_out {
        println!("{}", serde_json::to_string_pretty(&json!({"sessions": samples.len(), "metrics": m}))?);
    } else {
        println!("{} sessions", samples.len());
        println!("{METRICS_HEADER}");
        println!("{}", metrics_row("test", &m));
    }
    Ok(0)
}

fn inspect(ckpt: &Path, data: &Path, id: &str) -> Result<u8> {
    let model = Model::load(ckpt)?;
    let samples = load_dataset(data)?;
    let sample = samples.iter().find(|s| s.session_id == id).ok_or_else(|| Error::Parse {
        location: data.display().to_string(),
        message: format!("no session with id {id:?}"),
    })?;
    let doc = inspect_graph(&model, sample)?;
    println!("{}", serde_json::to_string_pretty(&doc)?);
    Ok(0)
}

fn gen_synth(out: &Path, sessions: usize, participants: usize, seed: u64, graph_out: Option<&Path>) -> Result<u8> {
    let cfg = SyntheticConfig {
        sessions,
        participants,
        ..SyntheticConfig::default()
    };
    let (world, samples) = cfg.generate(seed)?;
    save_dataset(out, &samples)?;
    if let Some(path) = graph_out {
        fs::write(path, serde_json::to_string_pretty(&world)?)?;
    }
    println!(
        "wrote {} sessions from {} participants to {} (p = {}, {} planted edges, threshold oracle accuracy {:.3})",
        samples.len(),
        participants,
        out.display(),
        world.nodes(),
        world.edge_count(),
        threshold_oracle(&samples).accuracy
    );
    Ok(0)
}

fn grad_check(module: ModuleArg, json_out: bool) -> Result<u8> {
    let entries = gradsuite::run(&module.modules())?;
    let all_passed = entries.iter().all(|e| e.report.passed);
    if json_out {
        println!("{}", serde_json::to_string_pretty(&json!({"passed": all_passed, "checks": entries}))?);
    } else {
        println!("{:<8} {:<12} {:>8} {:>12} {:>10}", "module", "check", "elements", "max rel err", "tolerance");
        for e in &entries {
            println!(
                "{:<8} {:<12} {:>8} {:>12.3e} {:>10.0e}  {}",
                e.module.name(),
                e.check,
                e.report.checked,
                e.report.max_rel_error,
                e.report.tolerance,
                if e.report.passed { "ok" } else { "FAILED" }
            );
        }
    }
    Ok(if all_passed { 0 } else { EXIT_NUMERIC })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_by_error_kind() {
        assert_eq!(exit_code(&Error::NonFinite("loss".into())), EXIT_NUMERIC);
        assert_eq!(exit_code(&Error::Length { len: 3, required: 5 }), EXIT_DATA);
        assert_eq!(exit_code(&Error::Config("x".into())), EXIT_USAGE);
        assert_eq!(exit_code(&Error::Param("x".into())), EXIT_USAGE);
    }
}
