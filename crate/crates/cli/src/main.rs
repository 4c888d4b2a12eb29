//! `pairx`: pairwise explanations for metric-learning re-identification models.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pairx_core::config::{LayerChoice, RunConfig};
use pairx_core::synthetic::{write_dataset, SyntheticConfig};
use pairx_core::{pipeline, Error, ErrorClass};

#[derive(Debug, Parser)]
#[command(name = "pairx", version, about = "Pairwise relevance explanations for re-identification models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Explain why two images were scored as similar.
    Explain {
        image_a: PathBuf,
        image_b: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Evaluate explanation metrics over a manifest's query/gallery pairs.
    Eval {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Report ρ_res at every tapped layer over sampled train pairs.
    SweepLayers {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Write the synthetic patterned-individuals dataset and its model.
    Synth {
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Individuals split into query and gallery views.
        #[arg(long)]
        individuals: Option<usize>,
        /// Extra individuals used only as train pairs.
        #[arg(long)]
        train_individuals: Option<usize>,
        /// Image side length in pixels.
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

/// Overrides applied on top of the config file (or the defaults).
#[derive(Debug, Args)]
struct RunArgs {
    /// TOML config file; flags take precedence over its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model weights (PXW1 container).
    #[arg(long)]
    model: Option<PathBuf>,
    /// Layer index, "auto" or "default".
    #[arg(long)]
    layer: Option<String>,
    #[arg(long)]
    n_matches: Option<usize>,
    /// JSONL manifest of images with identity and split.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Reference correspondences (JSON, JSONL or a directory of them).
    #[arg(long)]
    correspondences: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; defaults to the machine's parallelism.
    #[arg(long, env = "PAIRX_THREADS")]
    threads: Option<usize>,
    /// RANSAC inlier threshold in model-input pixels.
    #[arg(long)]
    ransac_threshold: Option<f64>,
}

impl RunArgs {
    fn resolve(self) -> Result<RunConfig, Error> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(v) = self.model {
            cfg.model_path = Some(v);
        }
        if let Some(v) = self.layer {
            cfg.layer = v.parse::<LayerChoice>()?;
        }
        if let Some(v) = self.n_matches {
            cfg.n_matches = v;
        }
        if let Some(v) = self.manifest {
            cfg.manifest_path = Some(v);
        }
        if let Some(v) = self.correspondences {
            cfg.correspondence_path = Some(v);
        }
        if let Some(v) = self.out {
            cfg.output_dir = v;
        }
        if let Some(v) = self.seed {
            cfg.rng_seed = v;
        }
        if let Some(v) = self.threads {
            cfg.thread_count = Some(v);
        }
        if let Some(v) = self.ransac_threshold {
            cfg.ransac.threshold = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "missing".to_string(), |v| format!("{v:.6}"))
}

fn run(command: Command) -> Result<(), Error> {
    match command {
        Command::Explain { image_a, image_b, run } => {
            let out = pipeline::run_explain(&run.resolve()?, &image_a, &image_b)?;
            let r = &out.record;
            println!("cosine_similarity {:.6}", r.cosine_similarity);
            println!("matches {} (of {}) at layer {}", r.matches.len(), r.matches_total, r.layer_index);
            println!("wrote {} and {}", out.png.display(), out.sidecar.display());
        }
        Command::Eval { run } => {
            let out = pipeline::run_eval(&run.resolve()?)?;
            let a = &out.report.aggregate;
            println!("pairs {} at layer {}", out.report.pairs.len(), a.layer_index);
            println!("rho_res {}  delta_res {}", fmt_opt(a.rho_res), fmt_opt(a.delta_res));
            println!("rho_mc  {}  delta_mc  {}", fmt_opt(a.rho_mc), fmt_opt(a.delta_mc));
            println!("wrote {}", out.path.display());
        }
        Command::SweepLayers { run } => {
            let out = pipeline::run_sweep_layers(&run.resolve()?)?;
            println!("{:>6} {:>10} {:>6}", "layer", "rho_res", "pairs");
            for row in &out.report.rows {
                let mark = if row.selected { " *" } else { "" };
                println!("{:>6} {:>10} {:>6}{mark}", row.layer_index, fmt_opt(row.rho_res), row.pairs_used);
            }
            println!("wrote {}", out.path.display());
        }
        Command::Synth { out, individuals, train_individuals, size, seed } => {
            let d = SyntheticConfig::default();
            let cfg = SyntheticConfig {
                individuals: individuals.unwrap_or(d.individuals),
                train_individuals: train_individuals.unwrap_or(d.train_individuals),
                size: size.unwrap_or(d.size),
                seed: seed.unwrap_or(d.seed),
                ..d
            };
            let files = write_dataset(&out, &cfg)?;
            println!("wrote {}", files.manifest.display());
            println!("wrote {}", files.correspondences.display());
            println!("wrote {}", files.model.display());
        }
    }
    Ok(())
}

fn exit_code(class: ErrorClass) -> u8 {
    match class {
        ErrorClass::Io => 2,
        ErrorClass::Numerical => 3,
        ErrorClass::Contract => 4,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // Usage errors are contract violations; exit 2 is reserved for I/O.
            return if e.use_stderr() { ExitCode::from(4) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.class()))
        }
    }
}
