//! `cowpro`: synthetic data, superpixel pseudo-labels, self-supervised
//! training, one-shot evaluation and single-image prediction.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "cowpro",
    version,
    about = "One-shot segmentation by correlation-weighted prototypes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        scans: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 12)]
        slices: usize,
        /// Image side length; must be a multiple of 8.
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
    /// Compute and store superpixel label maps for every slice.
    PseudoLabel {
        #[arg(long)]
        data: PathBuf,
        /// Merge scale, in 8-bit intensity units.
        #[arg(long)]
        scale: Option<f64>,
        /// Gaussian pre-smoothing.
        #[arg(long)]
        sigma: Option<f64>,
        /// Smallest segment in pixels at 256×256, rescaled by slice area.
        #[arg(long)]
        min_size: Option<usize>,
        /// Config file whose `superpixel.*` keys supply defaults.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train the encoder on pseudo-labelled slices of the training folds.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint (its configuration is used unless
        /// `--config` is given).
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// One-shot evaluation on the held-out fold.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        organ: String,
        /// Allowed quadrants per organ (defaults to the dataset's map).
        #[arg(long)]
        quadrant_map: Option<PathBuf>,
        #[arg(long)]
        no_quadrant_mask: bool,
        /// Fraction of most similar prototypes kept per pixel.
        #[arg(long)]
        top_k: Option<f64>,
        /// Mask pooling window.
        #[arg(long)]
        window: Option<usize>,
        /// Prototype softmax temperature.
        #[arg(long)]
        temperature: Option<f64>,
        /// Also write the `scan organ part dice` records here.
        #[arg(long)]
        records: Option<PathBuf>,
    },
    /// Segment one query image given a support image and mask.
    Predict {
        #[arg(long)]
        support_img: PathBuf,
        #[arg(long)]
        support_mask: PathBuf,
        #[arg(long)]
        query_img: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference checks of every differentiable operation and of
    /// the full training loss.
    Gradcheck {
        #[arg(long, default_value_t = 10)]
        seeds: u64,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Synth {
            out,
            scans,
            seed,
            slices,
            size,
        } => commands::synth(&out, scans, slices, size, seed),
        Command::PseudoLabel {
            data,
            scale,
            sigma,
            min_size,
            config,
        } => commands::pseudo_label(&data, scale, sigma, min_size, config.as_deref()),
        Command::Train {
            data,
            config,
            out,
            resume,
        } => commands::train(&data, config.as_deref(), &out, resume.as_deref()),
        Command::Eval {
            data,
            ckpt,
            organ,
            quadrant_map,
            no_quadrant_mask,
            top_k,
            window,
            temperature,
            records,
        } => commands::eval(commands::EvalArgs {
            data: &data,
            ckpt: &ckpt,
            organ: &organ,
            quadrant_map: quadrant_map.as_deref(),
            no_quadrant_mask,
            overrides: cowpro::evaluation::HeadOverrides {
                top_k_fraction: top_k,
                window,
                temperature,
            },
            records: records.as_deref(),
        }),
        Command::Predict {
            support_img,
            support_mask,
            query_img,
            ckpt,
            out,
        } => commands::predict(&support_img, &support_mask, &query_img, &ckpt, &out),
        Command::Gradcheck { seeds } => commands::gradcheck(seeds),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
