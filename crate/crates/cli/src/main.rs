use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use roboaug_core::config::PipelineConfig;
use roboaug_core::pipeline::{self, PipelineError, StageReport};

#[derive(Parser)]
#[command(name = "roboaug", version, about = "Region extraction, background augmentation and policy learning pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic reach fixture (experts, reference labels, boxes)
    Generate(Common),
    /// Match reference regions on anchor frames and propagate masks
    Extract(Common),
    /// Composite augmented copies of every annotated expert trajectory
    Augment(Common),
    /// Train the policy on the augmented dataset
    Train(Common),
    /// Evaluate the trained policy on in- and out-of-distribution scenes
    Eval(Common),
    /// Sweep augmentation ratios over several seeds
    Sweep(Common),
    /// Score detections with mAP@IoU
    EvalDetect(Common),
    /// Print the effective configuration as TOML
    Config(Common),
    /// Print the content hash of a directory tree
    Hash { dir: PathBuf },
}

#[derive(Args)]
struct Common {
    /// TOML config file; built-in defaults when omitted
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override augment.ratio
    #[arg(long)]
    ratio: Option<usize>,
    /// Override the root seed
    #[arg(long)]
    seed: Option<u64>,
    /// Override paths.output
    #[arg(long)]
    output: Option<PathBuf>,
    /// Override the worker count (0 = all cores)
    #[arg(long)]
    workers: Option<usize>,
}

impl Common {
    fn load(&self) -> Result<PipelineConfig, PipelineError> {
        let mut cfg = match &self.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        if let Some(r) = self.ratio {
            cfg.augment.ratio = r;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.output {
            cfg.paths.output = o.clone();
        }
        if let Some(w) = self.workers {
            cfg.workers = w;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn print_report(r: &StageReport) {
    println!("[{}] {}", r.stage, r.dir.display());
    for line in &r.summary {
        println!("  {line}");
    }
    if !r.review.is_empty() {
        println!("  needs review ({}):", r.review.len());
        for line in &r.review {
            println!("    {line}");
        }
    }
}

fn run(cli: Cli) -> Result<i32, PipelineError> {
    let (common, stage): (&Common, fn(&PipelineConfig) -> Result<StageReport, PipelineError>) = match &cli.command {
        Command::Hash { dir } => {
            println!("{}", pipeline::tree_hash(dir)?);
            return Ok(0);
        }
        Command::Config(c) => {
            print!("{}", c.load()?.to_toml());
            return Ok(0);
        }
        Command::Generate(c) => (c, pipeline::cmd_generate),
        Command::Extract(c) => (c, pipeline::cmd_extract),
        Command::Augment(c) => (c, pipeline::cmd_augment),
        Command::Train(c) => (c, pipeline::cmd_train),
        Command::Eval(c) => (c, pipeline::cmd_eval),
        Command::Sweep(c) => (c, pipeline::cmd_sweep),
        Command::EvalDetect(c) => (c, pipeline::cmd_eval_detect),
    };
    let report = stage(&common.load()?)?;
    print_report(&report);
    Ok(report.exit_code())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
