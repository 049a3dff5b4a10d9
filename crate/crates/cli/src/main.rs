mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mcvi_core::trainer::Target;

#[derive(Parser, Debug)]
#[command(name = "mcvi", version, about = "Canopy LAI/SPAD estimation from multispectral vegetation-index imagery")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// JSON config merged over the defaults; flags win.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (or file for `report`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Start from the small desk-scale presets.
    #[arg(long, global = true)]
    pub desk_scale: bool,
    /// Corpus root with `plots/` and `labels.csv`.
    #[arg(long, global = true)]
    pub input: Option<PathBuf>,
    /// Labels file when it is not `<input>/labels.csv`.
    #[arg(long, global = true)]
    pub labels: Option<PathBuf>,
    /// Precomputed VI cache written by `vi`.
    #[arg(long, global = true)]
    pub vi_cache: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic corpus.
    Synth {
        #[arg(long)]
        n_labeled: Option<usize>,
        #[arg(long)]
        n_unlabeled: Option<usize>,
        #[arg(long)]
        size: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Compute the 11-channel VI cache for every plot.
    Vi {
        #[command(flatten)]
        common: Common,
    },
    /// Per-plot, per-index texture statistics.
    Texture {
        #[arg(long)]
        bins: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Stratified train/val/test split of the labeled plots.
    Partition {
        #[arg(long)]
        k_clusters: Option<usize>,
        #[arg(long)]
        n_runs: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Self-supervised VICReg pretraining on the unlabeled plots.
    Pretrain {
        #[arg(long)]
        epochs: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Supervised regression on the training subset.
    Finetune {
        #[arg(long)]
        target: Option<Target>,
        #[arg(long)]
        freeze_encoder: bool,
        /// Pretrained checkpoint whose encoder initializes the model.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        split: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// R² and RMSE of a fine-tuned model on one subset.
    Eval {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        split: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        subset: String,
        #[command(flatten)]
        common: Common,
    },
    /// Predictions for every plot in the corpus.
    Predict {
        #[arg(long)]
        model: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Grad-CAM heatmaps and VI channel weights.
    Explain {
        #[arg(long)]
        model: Option<PathBuf>,
        /// Restrict to one subset of this split.
        #[arg(long)]
        split: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        subset: String,
        #[command(flatten)]
        common: Common,
    },
    /// Collect `eval.json` files under the given directories into one CSV.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

fn configure_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("MCVI_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| anyhow::anyhow!("MCVI_THREADS must be a positive integer, got '{v}'"))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()?;
    }
    Ok(())
}

fn error_kind(e: &anyhow::Error) -> &'static str {
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<mcvi_core::Error>() {
            return match err {
                mcvi_core::Error::Io(_) => "io",
                mcvi_core::Error::Csv(e) if e.is_io_error() => "io",
                mcvi_core::Error::Json(_) | mcvi_core::Error::Csv(_) => "format",
                mcvi_core::Error::Invalid(_) | mcvi_core::Error::UnknownIndex(_) => "invalid",
                mcvi_core::Error::Degenerate(_) => "degenerate",
                mcvi_core::Error::Diverged(_) => "diverged",
                mcvi_core::Error::Num(_) => "numeric",
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return "io";
        }
        if cause.downcast_ref::<serde_json::Error>().is_some() {
            return "config";
        }
    }
    "error"
}

fn report_error(kind: &str, message: &str) {
    let line = serde_json::json!({ "error": kind, "message": message });
    eprintln!("{line}");
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("usage error").trim_start_matches("error: ");
            report_error("usage", first);
            return ExitCode::from(2);
        }
    };
    if let Err(e) = configure_threads().and_then(|_| commands::run(cli.command)) {
        let message = format!("{e:#}").replace('\n', " ");
        report_error(error_kind(&e), &message);
        return ExitCode::FAILURE;
    }
    ExitCode::SUCCESS
}
