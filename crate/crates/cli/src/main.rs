use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mmcontrast_cli::commands::{self, EmbeddingSpace, EvalSplit, Overrides};
use mmcontrast_cli::Result;
use mmcontrast_core::training::RecipeName;
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(name = "mmcontrast", version, about = "Multi-modal multi-label contrastive experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Shared {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base seed: training seed, generator seed for `synth`, pixel-sampling
    /// seed for `class-similarity`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides `output_dir`.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Recipe {
    IntraSimclr,
    IaiSimclr,
    Mosaic1,
    Mosaic2,
}

impl From<Recipe> for RecipeName {
    fn from(r: Recipe) -> Self {
        match r {
            Recipe::IntraSimclr => RecipeName::IntraSimclr,
            Recipe::IaiSimclr => RecipeName::IaiSimclr,
            Recipe::Mosaic1 => RecipeName::Mosaic1,
            Recipe::Mosaic2 => RecipeName::Mosaic2,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Space {
    H,
    Z,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    HeldOut,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic dataset to patch files and a manifest.
    Synth {
        #[command(flatten)]
        shared: Shared,
    },
    /// Run the multi-seed training protocol.
    Train {
        #[command(flatten)]
        shared: Shared,
        #[arg(long, value_enum)]
        recipe: Option<Recipe>,
        #[arg(long)]
        label_fraction: Option<f64>,
        #[arg(long)]
        runs: Option<usize>,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[command(flatten)]
        shared: Shared,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Overrides `metrics.threshold`.
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long, value_enum, default_value = "held-out")]
        split: Split,
    },
    /// Evaluate with one modality zeroed or replaced by its training mean.
    AblateModality {
        #[command(flatten)]
        shared: Shared,
        /// Model to ablate; trained from the config when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum)]
        recipe: Option<Recipe>,
    },
    /// Export fused features for external 2-D projection.
    ExportEmbeddings {
        #[command(flatten)]
        shared: Shared,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "h")]
        space: Space,
        /// Also write a two-component PCA projection.
        #[arg(long)]
        pca: bool,
    },
    /// Class-similarity matrix from sampled S2 pixels.
    ClassSimilarity {
        #[command(flatten)]
        shared: Shared,
        #[arg(long, default_value_t = 1000)]
        pixels: usize,
    },
}

fn overrides(shared: &Shared) -> Overrides {
    Overrides {
        seed: shared.seed,
        output: shared.output.clone(),
        ..Overrides::default()
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { shared } => {
            // The seed goes to the generator, not the trainer.
            let o = Overrides {
                seed: None,
                ..overrides(&shared)
            };
            let cfg = commands::load_config(shared.config.as_deref(), &o)?;
            let s = commands::synth(&cfg, shared.seed)?;
            println!(
                "{} samples, {} labels, cardinality {:.3}, mean class similarity {:.3} (target {:.3})",
                s.size, s.num_labels, s.label_cardinality, s.mean_class_similarity, s.class_similarity_target
            );
            println!("class counts {:?}", s.class_counts);
            println!("wrote {}", cfg.output_dir.display());
        }
        Command::Train {
            shared,
            recipe,
            label_fraction,
            runs,
        } => {
            let o = Overrides {
                recipe: recipe.map(Into::into),
                label_fraction,
                runs,
                ..overrides(&shared)
            };
            let cfg = commands::load_config(shared.config.as_deref(), &o)?;
            let out = commands::train(&cfg)?;
            for r in &out.runs {
                println!("seed {} micro-F1 {:.4} macro-F1 {:.4}", r.seed, r.report.micro_f1, r.report.macro_f1);
            }
            for key in ["micro_f1", "macro_f1"] {
                if let Some(m) = out.aggregate.scalar(key) {
                    println!("{key} {:.4} ± {:.4}", m.mean, m.std);
                }
            }
            println!("wrote {}", cfg.output_dir.join(commands::AGGREGATE_FILE).display());
        }
        Command::Eval {
            shared,
            checkpoint,
            threshold,
            split,
        } => {
            let cfg = commands::load_config(shared.config.as_deref(), &overrides(&shared))?;
            let split = match split {
                Split::HeldOut => EvalSplit::HeldOut,
                Split::All => EvalSplit::All,
            };
            let r = commands::eval(&cfg, &checkpoint, split, threshold)?;
            println!(
                "micro P/R/F1 {:.4} {:.4} {:.4}  macro P/R/F1 {:.4} {:.4} {:.4}  hamming {:.4}  brier {:.4}",
                r.micro_p, r.micro_r, r.micro_f1, r.macro_p, r.macro_r, r.macro_f1, r.hamming_total, r.brier_total
            );
        }
        Command::AblateModality {
            shared,
            checkpoint,
            recipe,
        } => {
            let o = Overrides {
                recipe: recipe.map(Into::into),
                ..overrides(&shared)
            };
            let cfg = commands::load_config(shared.config.as_deref(), &o)?;
            let table = commands::ablate_modality(&cfg, checkpoint.as_deref())?;
            print!("{}", table.to_csv());
        }
        Command::ExportEmbeddings {
            shared,
            checkpoint,
            space,
            pca,
        } => {
            let cfg = commands::load_config(shared.config.as_deref(), &overrides(&shared))?;
            let space = match space {
                Space::H => EmbeddingSpace::H,
                Space::Z => EmbeddingSpace::Z,
            };
            for p in commands::export_embeddings(&cfg, &checkpoint, space, pca)? {
                println!("wrote {}", p.display());
            }
        }
        Command::ClassSimilarity { shared, pixels } => {
            let o = Overrides {
                seed: None,
                ..overrides(&shared)
            };
            let cfg = commands::load_config(shared.config.as_deref(), &o)?;
            let (matrix, summary) = commands::class_similarity(&cfg, pixels, shared.seed.unwrap_or(0))?;
            print!("{}", matrix.to_csv());
            println!("mean off-diagonal {:.4}", summary.mean_off_diagonal);
            if let Some((a, b, v)) = summary.most_similar {
                println!("most similar pair {a} / {b} ({v:.4})");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
