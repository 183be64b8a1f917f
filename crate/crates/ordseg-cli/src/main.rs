//! `ordseg`: evaluation, loss computation, distance transforms, interval
//! comparison, gradient checks, synthetic scenes, and the training demo.
//!
//! Exit codes: 0 on success, 1 on validation/configuration errors, 2 on
//! computation errors (divergence, failed checks, degenerate geometry).

mod commands;
mod format;

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "ordseg", version, about = "Ordinal semantic segmentation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate a prediction against ground-truth labels (Dice, CS, UP).
    Eval {
        /// Prediction: a probability tensor (.otsr) or a label map (PGM).
        #[arg(long)]
        pred: PathBuf,
        /// Ground-truth label map (PGM).
        #[arg(long)]
        gt: PathBuf,
        /// Denominator offset of the contact-surface metric.
        #[arg(long, default_value_t = 1e-8)]
        epsilon: f64,
    },
    /// Compute one loss value (and optionally its gradient tensor).
    Loss {
        /// One of: ce, qul, expmse, o2, csnp, csdt, cssdf.
        #[arg(long)]
        name: String,
        /// Probability tensor (H x W x K .otsr file).
        #[arg(long)]
        pred: PathBuf,
        /// Ground-truth label map (PGM).
        #[arg(long)]
        gt: PathBuf,
        /// Margin of qul/o2.
        #[arg(long)]
        delta: Option<f64>,
        /// Weight: qul's global-constraint weight or expmse's variance weight.
        #[arg(long)]
        lambda: Option<f64>,
        /// Confidence threshold of csdt/cssdf.
        #[arg(long)]
        delta_conf: Option<f64>,
        /// Distance-transform saturation of csdt.
        #[arg(long)]
        gamma: Option<f64>,
        /// Boundary-emphasis decay of cssdf.
        #[arg(long)]
        gamma_decay: Option<f64>,
        /// Signed-distance clamp of cssdf (default: image diagonal).
        #[arg(long)]
        gamma_hat: Option<f64>,
        /// Penalty exponent of cssdf (1 or 2).
        #[arg(long)]
        p_exponent: Option<u32>,
        /// Skip the published hyperparameter range checks.
        #[arg(long = "unsafe")]
        unsafe_params: bool,
        /// Also write the gradient with respect to the probability tensor.
        #[arg(long)]
        grad: Option<PathBuf>,
    },
    /// Distance transform or signed distance field of a class region.
    Dt {
        /// Label map (PGM); the region is the pixels equal to --class.
        #[arg(long, conflicts_with = "pred")]
        labels: Option<PathBuf>,
        /// Probability tensor; the region is thresholded at --delta-conf.
        #[arg(long)]
        pred: Option<PathBuf>,
        /// Class index (1-based).
        #[arg(long)]
        class: usize,
        /// Confidence threshold when --pred is used.
        #[arg(long, default_value_t = 0.05)]
        delta_conf: f64,
        /// Compute the signed field instead of the unsigned transform.
        #[arg(long)]
        signed: bool,
        /// Saturate (unsigned) or clamp (signed) the field.
        #[arg(long)]
        clamp: Option<f64>,
        /// Output tensor path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare two mean-and-deviation intervals with the inferiority rule.
    Compare {
        /// First interval as "mu,sigma".
        #[arg(long)]
        a: String,
        /// Second interval as "mu,sigma".
        #[arg(long)]
        b: String,
        /// Threshold under which the overlap ratio counts as small.
        #[arg(long, default_value_t = 0.5)]
        rho: f64,
    },
    /// Finite-difference check of a loss gradient on random inputs.
    Gradcheck {
        /// One of: ce, qul, expmse, o2, csnp, csdt, cssdf.
        #[arg(long)]
        loss: String,
        #[arg(long, default_value_t = 6)]
        height: usize,
        #[arg(long, default_value_t = 6)]
        width: usize,
        #[arg(long, default_value_t = 3)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Central-difference step.
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        /// Relative tolerance.
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        /// Number of random draws.
        #[arg(long, default_value_t = 1)]
        draws: u64,
    },
    /// Generate synthetic ordinal scenes (images + label maps).
    Synth {
        /// One of: rings, bands, blobs.
        #[arg(long, default_value = "rings")]
        geometry: String,
        #[arg(long, default_value_t = 16)]
        height: usize,
        #[arg(long, default_value_t = 16)]
        width: usize,
        #[arg(long, default_value_t = 4)]
        k: usize,
        /// Gaussian noise level on the image intensities.
        #[arg(long, default_value_t = 0.25)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train the desk-scale segmenter with cross-validation and write
    /// per-fold records plus an aggregate table.
    TrainDemo {
        /// Ordinal loss of the combined objective, or "ce" for plain CE.
        #[arg(long)]
        loss: String,
        /// Trade-off weight of the combined objective.
        #[arg(long, default_value_t = 1.0)]
        lambda: f64,
        /// Margin of qul/o2.
        #[arg(long)]
        delta: Option<f64>,
        /// Inner weight of qul.
        #[arg(long)]
        qul_lambda: Option<f64>,
        #[arg(long)]
        delta_conf: Option<f64>,
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long)]
        gamma_decay: Option<f64>,
        #[arg(long)]
        gamma_hat: Option<f64>,
        #[arg(long)]
        p_exponent: Option<u32>,
        /// Number of synthetic scenes (at least 10).
        #[arg(long)]
        scenes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "rings")]
        geometry: String,
        #[arg(long, default_value_t = 16)]
        height: usize,
        #[arg(long, default_value_t = 16)]
        width: usize,
        #[arg(long, default_value_t = 4)]
        k: usize,
        #[arg(long, default_value_t = 0.25)]
        noise: f64,
        #[arg(long, default_value_t = 5)]
        folds: usize,
        #[arg(long, default_value_t = 200)]
        epochs: usize,
        #[arg(long, default_value_t = 15)]
        patience: usize,
        #[arg(long, default_value_t = 1e-4)]
        learning_rate: f64,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
        #[arg(long, default_value = "train_demo_out")]
        out_dir: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Eval { pred, gt, epsilon } => commands::eval(&pred, &gt, epsilon),
        Command::Loss {
            name,
            pred,
            gt,
            delta,
            lambda,
            delta_conf,
            gamma,
            gamma_decay,
            gamma_hat,
            p_exponent,
            unsafe_params,
            grad,
        } => commands::loss(commands::LossArgs {
            name,
            pred,
            gt,
            delta,
            lambda,
            delta_conf,
            gamma,
            gamma_decay,
            gamma_hat,
            p_exponent,
            unsafe_params,
            grad,
        }),
        Command::Dt { labels, pred, class, delta_conf, signed, clamp, out } => {
            commands::dt(labels.as_deref(), pred.as_deref(), class, delta_conf, signed, clamp, &out)
        }
        Command::Compare { a, b, rho } => commands::compare(&a, &b, rho),
        Command::Gradcheck { loss, height, width, k, seed, step, tol, draws } => {
            commands::gradcheck(&loss, height, width, k, seed, step, tol, draws)
        }
        Command::Synth { geometry, height, width, k, noise, seed, count, out_dir } => {
            commands::synth(&geometry, height, width, k, noise, seed, count, &out_dir)
        }
        Command::TrainDemo {
            loss,
            lambda,
            delta,
            qul_lambda,
            delta_conf,
            gamma,
            gamma_decay,
            gamma_hat,
            p_exponent,
            scenes,
            seed,
            geometry,
            height,
            width,
            k,
            noise,
            folds,
            epochs,
            patience,
            learning_rate,
            batch_size,
            out_dir,
        } => commands::train_demo(commands::TrainDemoArgs {
            loss,
            lambda,
            delta,
            qul_lambda,
            delta_conf,
            gamma,
            gamma_decay,
            gamma_hat,
            p_exponent,
            scenes,
            seed,
            geometry,
            height,
            width,
            k,
            noise,
            folds,
            epochs,
            patience,
            learning_rate,
            batch_size,
            out_dir,
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(error) => {
            eprintln!("error: {error}");
            ExitCode::from(exit_code(&error))
        }
    }
}

/// 1 for bad inputs or configuration, 2 for computation failures.
fn exit_code(error: &ordseg::Error) -> u8 {
    use ordseg::Error;
    match error {
        Error::Validation(_)
        | Error::Config(_)
        | Error::Usage(_)
        | Error::Format { .. }
        | Error::InsufficientData(_)
        | Error::Partition(_)
        | Error::Geometry(_)
        | Error::Io(_) => 1,
        Error::Numeric(_)
        | Error::Training(_)
        | Error::Oracle(_)
        | Error::EmptyRegion
        | Error::UnboundedField => 2,
    }
}
