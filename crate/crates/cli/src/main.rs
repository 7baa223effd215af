use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::error;
use posehair::pipeline::{self, BackendKind, PipelineConfig};
use posehair::Error;

/// Hairstyle transfer with hair pose alignment.
#[derive(Parser, Debug)]
#[command(name = "posehair", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Transfer the hairstyle of TARGET onto SOURCE.
    Transfer {
        source: PathBuf,
        target: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Reconstruct each source of a pairs CSV from its target's hair and
    /// score it with SSIM.
    EvalReconstruction {
        pairs: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Split pairs into Easy/Medium/Difficult pose-difference terciles.
    /// `--out` names the output CSV.
    Stratify {
        pairs: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Invert one image to W+ (and FS when fs_steps > 0).
    Invert {
        image: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Backend {
    Toy,
    External,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    backend: Option<Backend>,
    /// Dump alignment images and style regions every N steps.
    #[arg(long)]
    save_every: Option<usize>,
    #[arg(long)]
    no_lsm: bool,
    #[arg(long)]
    no_reg: bool,
    #[arg(long)]
    rematch_target: bool,
    #[arg(long)]
    convex_blend: bool,
}

impl Common {
    fn resolve(&self) -> posehair::Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(path) => PipelineConfig::load(path)?,
            None => PipelineConfig::default(),
        };
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(b) = self.backend {
            cfg.backend = match b {
                Backend::Toy => BackendKind::Toy,
                Backend::External => BackendKind::External,
            };
        }
        if let Some(n) = self.save_every {
            cfg.save_every = n;
        }
        cfg.no_lsm |= self.no_lsm;
        cfg.no_reg |= self.no_reg;
        cfg.rematch_target |= self.rematch_target;
        cfg.convex_blend |= self.convex_blend;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Argument(_) | Error::Parse { .. } => 2,
        Error::Divergence { .. } => 3,
        Error::Io { .. } | Error::Codec { .. } | Error::Artifact { .. } => 4,
        Error::Dimension(_) | Error::EmptyRegion(_) => 1,
    }
}

fn print_json(value: &impl serde::Serialize) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
}

fn default_stratified(pairs: &Path) -> PathBuf {
    let stem = pairs.file_stem().and_then(|s| s.to_str()).unwrap_or("pairs");
    pairs.with_file_name(format!("{stem}_stratified.csv"))
}

fn run(cli: Cli) -> posehair::Result<()> {
    match cli.command {
        Command::Transfer { source, target, common } => {
            let cfg = common.resolve()?;
            let m = pipeline::run_transfer(&source, &target, &cfg)?;
            println!("{}", cfg.out_dir.join(&m.artifacts["i_final"]).display());
        }
        Command::EvalReconstruction { pairs, common } => {
            let report = pipeline::run_reconstruction_eval(&pairs, &common.resolve()?, None)?;
            print_json(&report);
        }
        Command::Stratify { pairs, common } => {
            let out = common.out.clone().unwrap_or_else(|| default_stratified(&pairs));
            let cfg = common.resolve()?;
            let records = pipeline::run_stratify(&pairs, &out, &cfg)?;
            println!("{} pairs -> {}", records.len(), out.display());
        }
        Command::Invert { image, common } => {
            let cfg = common.resolve()?;
            let r = pipeline::run_invert(&image, &cfg)?;
            println!("initial {:e} final {:e}", r.initial_loss, r.final_loss);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
