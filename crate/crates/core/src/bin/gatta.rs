use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gattanet::experiment::{self, ExperimentConfig};
use gattanet::Error;

#[derive(Parser)]
#[command(name = "gatta", about = "Toy CNN with global attention agreement")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// key=value config file applied before flags
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. --set lesion=c.cdd (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
    #[arg(long, global = true)]
    dataset: Option<String>,
    #[arg(long, global = true)]
    data_path: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    backbone: Option<PathBuf>,
    #[arg(long, global = true)]
    attention: Option<PathBuf>,
    #[arg(long, global = true)]
    lesion: Option<String>,
    #[arg(long, global = true)]
    dim: Option<usize>,
    #[arg(long, global = true)]
    iterations: Option<usize>,
    /// Full CIFAR training set (hours of CPU time)
    #[arg(long, global = true)]
    long: bool,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Train the backbone and write its checkpoint
    PretrainBackbone,
    /// Train attention on the frozen backbone checkpoint
    TrainAttention,
    /// Test accuracy of the baseline or augmented model
    Eval,
    /// Accuracy of both models under Gaussian input noise
    NoiseSweep,
    /// Accuracy under every lesion mask plus the named ones
    LesionSweep,
    /// Write agreement maps and global queries for a few test images
    ExportMaps,
    /// Parameter counts of the reference and configured models
    ParamAudit,
}

impl Cli {
    fn resolve(&self) -> gattanet::Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        let flags: [(&str, Option<String>); 9] = [
            ("dataset", self.dataset.clone()),
            ("data_path", self.data_path.as_ref().map(|p| p.display().to_string())),
            ("seed", self.seed.map(|s| s.to_string())),
            ("out_dir", self.out.as_ref().map(|p| p.display().to_string())),
            ("backbone_checkpoint", self.backbone.as_ref().map(|p| p.display().to_string())),
            ("attention_checkpoint", self.attention.as_ref().map(|p| p.display().to_string())),
            ("lesion", self.lesion.clone()),
            ("attention_dim", self.dim.map(|d| d.to_string())),
            ("iterations", self.iterations.map(|i| i.to_string())),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                cfg.set(key, &v)?;
            }
        }
        for s in &self.sets {
            cfg.set_assignment(s)?;
        }
        if self.long {
            cfg.long = true;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: &Cli) -> gattanet::Result<()> {
    let cfg = cli.resolve()?;
    for w in cfg.warnings() {
        eprintln!("warning: {w}");
    }
    match cli.command {
        Command::PretrainBackbone => println!("{}", experiment::pretrain_backbone(&cfg)?),
        Command::TrainAttention => println!("{}", experiment::train_attention(&cfg)?),
        Command::Eval => {
            println!("{}", experiment::EVAL_HEADER);
            println!("{}", experiment::eval(&cfg)?.csv());
        }
        Command::NoiseSweep => {
            println!("{}", experiment::NOISE_HEADER);
            for r in experiment::noise_sweep(&cfg)? {
                println!(
                    "{},{},{},{:+.2},{},{}",
                    r.sigma,
                    r.baseline_acc,
                    r.augmented_acc,
                    r.gap_pp(),
                    r.n,
                    cfg.noise_seed
                );
            }
        }
        Command::LesionSweep => {
            println!("{}", experiment::LESION_HEADER);
            for r in experiment::lesion_sweep(&cfg)? {
                println!("{},{},{},{},{}", r.set, r.mask, r.accuracy, r.correct, r.n);
            }
        }
        Command::ExportMaps => {
            let s = experiment::export_maps(&cfg)?;
            println!("exported {} images, {} files under {}", s.images, s.files.len(), cfg.out_dir.join("export").display());
        }
        Command::ParamAudit => {
            println!("{}", experiment::AUDIT_HEADER);
            for r in experiment::param_audit(&cfg)? {
                println!("{}", r.csv());
            }
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    if e.is_numeric() {
        3
    } else if e.is_io() || matches!(e, Error::EmptyDataset(_)) {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
