use std::path::PathBuf;
use std::process::ExitCode;

use bayes_fusion::pipeline::{Experiment, ExperimentConfig};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bayes-fusion", version, about = "Variational heads, uncertainty and gated audio-visual fusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML). Defaults to the bundled synthetic config.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override the config's global seed.
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    /// Output directory [default: the config's `out`, else ./runs].
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Worker threads; 0 uses every core.
    #[arg(long, value_name = "N", default_value_t = 0)]
    threads: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset and OOD set.
    GenSynth(Common),
    /// Train variational, MC-dropout and plain heads per modality.
    Train(Common),
    /// Write MC prediction dumps for val, test and OOD data.
    Predict(Common),
    /// Fit AvU-optimal thresholds and the fusion policy.
    Avu(Common),
    /// Apply uncertainty-gated fusion to the test split.
    Fuse(Common),
    /// Compare in- and out-of-distribution uncertainty.
    Ood(Common),
    /// Write the comparison tables, curves and confidence histograms.
    Eval(Common),
}

fn run(cli: Cli) -> bayes_fusion::Result<()> {
    let (name, common) = match &cli.command {
        Command::GenSynth(c) => ("gen-synth", c),
        Command::Train(c) => ("train", c),
        Command::Predict(c) => ("predict", c),
        Command::Avu(c) => ("avu", c),
        Command::Fuse(c) => ("fuse", c),
        Command::Ood(c) => ("ood", c),
        Command::Eval(c) => ("eval", c),
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(common.threads)
        .build_global()
        .map_err(|e| bayes_fusion::Error::Config(e.to_string()))?;
    let mut config = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::bundled(),
    };
    if let Some(s) = common.seed {
        config.seed = s;
    }
    let exp = Experiment::new(config, common.out.clone())?;
    match cli.command {
        Command::GenSynth(_) => exp.gen_synth()?,
        Command::Train(_) => exp.train()?,
        Command::Predict(_) => exp.predict()?,
        Command::Avu(_) => {
            for (model, p) in exp.avu()? {
                println!("{model}: thresholds {:?} ({})", p.thresholds, p.metric);
            }
        }
        Command::Fuse(_) => {
            for r in exp.fuse()? {
                println!("{:<10} {:<8} top1 {:.4}  pr_auc {:.4}", r.model, r.source, r.top1, r.pr_auc);
            }
        }
        Command::Ood(_) => {
            for r in exp.ood()? {
                println!("{:<10} {:<8} {:<8} auroc {:.4}", r.model, r.modality, r.metric, r.auroc);
            }
        }
        Command::Eval(_) => {
            for r in exp.eval()?.table {
                println!(
                    "{:<10} {:<8} top1 {:.4}  top5 {:.4}  pr_auc {:.4}  roc_auc {:.4}",
                    r.model, r.source, r.top1, r.top5, r.pr_auc, r.roc_auc
                );
            }
        }
    }
    eprintln!("{name}: outputs under {}", exp.out.display());
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
