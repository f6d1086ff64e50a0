use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use petrecon_cli::dataset::{parse_split, Split};
use petrecon_cli::{
    cmd_ablate, cmd_bias_variance, cmd_evaluate, cmd_reconstruct, cmd_simulate, cmd_train, Failure, Layout, Method,
    Outcome, PipelineConfig,
};

/// PET reconstruction pipeline: simulate, train, reconstruct, evaluate.
#[derive(Parser, Debug)]
#[command(name = "petrecon", version, about)]
struct Cli {
    /// JSON configuration; unspecified fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the root seed of the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; defaults to the number of available cores.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Output root holding dataset/, checkpoint/, recon/, eval/ and friends.
    #[arg(long, global = true, env = "PETRECON_OUT", default_value = "petrecon-out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the effective configuration (defaults merged with --config).
    PrintConfig,
    /// Simulate phantoms and noisy scans for the train/val/test splits.
    Simulate {
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Train the learned reconstructor without ground truth.
    Train {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Continue from an existing checkpoint instead of starting over.
        #[arg(long)]
        resume: bool,
    },
    /// Reconstruct every sinogram of a split.
    Reconstruct {
        /// mlem, emtv or lda.
        method: Method,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: Split,
        /// Training checkpoint directory (lda only).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Output directory; defaults to <out>/recon/<method>.
        #[arg(long)]
        dest: Option<PathBuf>,
    },
    /// Score reconstructions against the ground truth.
    Evaluate {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: Split,
        /// Reconstruction directories; defaults to every existing <out>/recon/<method>.
        #[arg(long = "recon")]
        recon: Vec<PathBuf>,
        /// Bias/variance summary to merge into the table.
        #[arg(long)]
        bias_variance: Option<PathBuf>,
        #[arg(long)]
        dest: Option<PathBuf>,
    },
    /// Train and score every configured (phase count, loss mode) pair.
    Ablate {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        dest: Option<PathBuf>,
    },
    /// Bias and variance over repeated noise realizations of the test phantoms.
    BiasVariance {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "mlem,emtv")]
        methods: Vec<Method>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        dest: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Outcome<()> {
    let mut cfg = PipelineConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(Failure::config("--jobs must be positive"));
        }
        rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global().map_err(|e| Failure::new(1, e))?;
    }
    let layout = Layout::new(&cli.out);
    let cfg_path = cli.config.as_deref();
    let or = |p: Option<PathBuf>, d: PathBuf| p.unwrap_or(d);
    match cli.command {
        Command::PrintConfig => {
            cfg.validate()?;
            println!("{}", serde_json::to_string_pretty(&cfg)?);
        }
        Command::Simulate { dataset } => {
            let dir = or(dataset, layout.dataset());
            let m = cmd_simulate(&cfg, cfg_path, &dir)?;
            println!("wrote {} slices to {}", m.slices.len(), dir.display());
        }
        Command::Train { dataset, checkpoint, resume } => {
            let ckpt = or(checkpoint, layout.checkpoint());
            let state = cmd_train(&cfg, cfg_path, &or(dataset, layout.dataset()), &ckpt, resume)?;
            println!(
                "trained {} epochs ({} steps); best objective {:.6e}; checkpoint in {}",
                state.epochs_done,
                state.step,
                state.best_val,
                ckpt.display()
            );
        }
        Command::Reconstruct { method, dataset, split, checkpoint, dest } => {
            let dir = or(dest, layout.recon(method));
            let ckpt = checkpoint.or_else(|| (method == Method::Lda).then(|| layout.checkpoint()));
            let files = cmd_reconstruct(&cfg, cfg_path, method, &or(dataset, layout.dataset()), split, ckpt.as_deref(), &dir)?;
            println!("wrote {} files to {}", files.len(), dir.display());
        }
        Command::Evaluate { dataset, split, recon, bias_variance, dest } => {
            let dirs = if recon.is_empty() { existing_recon_dirs(&layout) } else { recon };
            let dir = or(dest, layout.eval());
            let reports =
                cmd_evaluate(&or(dataset, layout.dataset()), split, &dirs, bias_variance.as_deref(), cfg_path, &dir)?;
            print!("{}", petrecon::metrics::comparison_table(&reports));
        }
        Command::Ablate { dataset, dest } => {
            let dir = or(dest, layout.ablation());
            let rows = cmd_ablate(&cfg, cfg_path, &or(dataset, layout.dataset()), &dir)?;
            print!("{}", petrecon_cli::ablate::ablation_table(&rows));
        }
        Command::BiasVariance { dataset, methods, checkpoint, dest } => {
            let dir = or(dest, layout.bias_variance());
            let ckpt = checkpoint.or_else(|| methods.contains(&Method::Lda).then(|| layout.checkpoint()));
            let summary = cmd_bias_variance(&cfg, cfg_path, &or(dataset, layout.dataset()), &methods, ckpt.as_deref(), &dir)?;
            for (m, v) in summary {
                println!("{m:<8} bias {:.6} variance {:.6}", v.bias, v.variance);
            }
        }
    }
    Ok(())
}

fn existing_recon_dirs(layout: &Layout) -> Vec<PathBuf> {
    Method::ALL.iter().map(|&m| layout.recon(m)).filter(|p| Path::is_dir(p)).collect()
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code)
        }
    }
}
