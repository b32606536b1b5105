use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use psg_ssl::config::RunConfig;
use psg_ssl::data::Task;
use psg_ssl::eval::scenarios::Scenario;
use psg_ssl::pipeline::{self, CommandReport, RunDir};
use psg_ssl::signal::Modality;
use psg_ssl::{Error, Result};

/// Self-supervised multimodal PSG representation learning on synthetic
/// recordings: generation, preprocessing, pretraining and evaluation.
#[derive(Parser)]
#[command(name = "psg-ssl", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// TOML file layered over the built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one setting, e.g. `--set fusion.mm_dim=32`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory holding every artifact.
    #[arg(long, global = true, default_value = "runs/default")]
    out_dir: PathBuf,
    /// Stream combination such as `eeg2+eog2+emg1+ecg1`.
    #[arg(long, global = true)]
    modalities: Option<String>,
    /// Share of labeled training epochs kept for scenario 3.
    #[arg(long, global = true)]
    label_fraction: Option<f64>,
    /// Downstream task; repeat for several. Defaults to the configured tasks.
    #[arg(long, global = true, value_parser = ["stage", "apnea", "hypopnea"])]
    task: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic recordings into `raw/`.
    GenSynth,
    /// Filter, resample, segment and label recordings into `epochs/`.
    Preprocess,
    /// Pretrain the per-modality backbones used by `fusion.modalities`.
    PretrainBackbone {
        /// Only this modality (eeg, eog, emg, ecg).
        #[arg(long)]
        modality: Option<String>,
    },
    /// Pretrain the fusion model on top of the frozen backbones.
    PretrainFusion,
    /// Run a downstream scenario: 1 (linear probe), 2 (fine-tune + TCM),
    /// 3 (semi-supervised; needs --label-fraction below 1).
    Train {
        #[arg(long)]
        scenario: String,
    },
    /// Recompute metrics from the saved predictions.
    Evaluate,
    /// k-NN accuracy of every saved fusion pretraining epoch.
    KnnProbe,
    /// Draw hypnograms from saved sleep-stage predictions.
    Hypnogram {
        #[arg(long, default_value = "linear_probe")]
        scenario: String,
    },
    /// Plot the pretraining loss logs.
    PlotLosses,
    /// Mask-ratio and α sweeps with linear probing.
    Ablate,
}

fn overrides(g: &Global) -> Vec<String> {
    let mut o = g.set.clone();
    if let Some(s) = g.seed {
        o.push(format!("seed={s}"));
    }
    if let Some(m) = &g.modalities {
        o.push(format!("fusion.modalities=\"{m}\""));
    }
    if let Some(f) = g.label_fraction {
        o.push(format!("eval.label_fraction={f}"));
    }
    if !g.task.is_empty() {
        let quoted: Vec<String> = g.task.iter().map(|t| format!("\"{t}\"")).collect();
        o.push(format!("downstream.tasks=[{}]", quoted.join(",")));
    }
    o
}

fn run(cli: Cli) -> Result<CommandReport> {
    let cfg = RunConfig::resolve(cli.global.config.as_deref(), &overrides(&cli.global))?;
    let dir = RunDir::new(&cli.global.out_dir);
    match cli.command {
        Command::GenSynth => pipeline::cmd_gen_synth(&cfg, &dir),
        Command::Preprocess => pipeline::cmd_preprocess(&cfg, &dir),
        Command::PretrainBackbone { modality } => {
            let m = modality.map(|m| m.parse::<Modality>()).transpose()?;
            pipeline::cmd_pretrain_backbone(&cfg, &dir, m)
        }
        Command::PretrainFusion => pipeline::cmd_pretrain_fusion(&cfg, &dir),
        Command::Train { scenario } => {
            let s: Scenario = scenario.parse()?;
            Ok(pipeline::cmd_train(&cfg, &dir, s, &cfg.downstream.tasks)?.0)
        }
        Command::Evaluate => Ok(pipeline::cmd_evaluate(&cfg, &dir)?.0),
        Command::KnnProbe => {
            let task = cfg.downstream.tasks.first().copied().unwrap_or(Task::Stage);
            Ok(pipeline::cmd_knn_probe(&cfg, &dir, task)?.0)
        }
        Command::Hypnogram { scenario } => pipeline::cmd_hypnogram(&cfg, &dir, scenario.parse()?),
        Command::PlotLosses => pipeline::cmd_plot_losses(&cfg, &dir),
        Command::Ablate => Ok(pipeline::cmd_ablate(&cfg, &dir)?.0),
    }
}

fn category(e: &Error) -> &'static str {
    match e {
        Error::Config(_) => "config",
        Error::InvalidInput(_) => "invalid-input",
        Error::Dependency(_) => "dependency",
        Error::Corrupt { .. } => "corrupt",
        Error::Contract(_) => "contract",
        Error::Io { .. } => "io",
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(report) => {
            for line in &report.lines {
                println!("{line}");
            }
            for p in &report.outputs {
                println!("wrote {}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error[{}]: {e}", category(&e));
            ExitCode::from(e.exit_code())
        }
    }
}
