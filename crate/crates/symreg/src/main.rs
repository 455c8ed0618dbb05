//! Command-line surface: symmetric registration, warping, Jacobian reports,
//! Dice evaluation, synthetic pair generation, and PGM slice export.

use clap::{Parser, Subcommand};
use std::path::{Path, PathBuf};
use symreg::io::{self, SliceAxis};
use symreg::{
    dice, fold_report, present_labels, register, synth_pair, warp_image, warp_labels, Dims,
    RegistrationConfig, RegistrationSummary,
};

#[derive(Parser)]
#[command(
    name = "symreg",
    about = "Symmetric diffeomorphic 3D image registration on stationary velocity fields",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Register two volumes symmetrically and write all result fields.
    /// The --fixed/--moving names are conventions only; the method treats
    /// both volumes identically.
    Register {
        #[arg(long)]
        fixed: PathBuf,
        #[arg(long)]
        moving: PathBuf,
        /// Output directory for fields, loss log, and summary.
        #[arg(long)]
        out: PathBuf,
        /// Optimizer preset: "direct" (per-pair optimization) or "paper"
        /// (published network-training settings).
        #[arg(long, default_value = "direct")]
        preset: String,
        /// Orientation-consistency weight λ₁.
        #[arg(long)]
        lambda1: Option<f64>,
        /// Smoothness weight λ₂.
        #[arg(long)]
        lambda2: Option<f64>,
        /// Magnitude-balance weight λ₃.
        #[arg(long)]
        lambda3: Option<f64>,
        /// Maximum iterations.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long = "step-size")]
        step_size: Option<f64>,
        #[arg(long)]
        momentum: Option<f64>,
        /// Scaling-and-squaring time steps.
        #[arg(long = "T")]
        t_steps: Option<u32>,
        /// Softsign velocity bound in voxels.
        #[arg(long = "c")]
        velocity_cap: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Apply a deformation field to a volume (or label map with --labels).
    Warp {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        field: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Treat the image as a label map and warp with nearest-neighbor sampling.
        #[arg(long)]
        labels: bool,
    },
    /// Jacobian-determinant fold report of a deformation field.
    Jacobian {
        #[arg(long)]
        field: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dice overlap of two label maps over all labels present.
    Dice {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic pair with known ground-truth deformation.
    Synth {
        #[arg(long)]
        seed: u64,
        /// Grid size as NX,NY,NZ.
        #[arg(long, value_parser = parse_dims)]
        dims: Dims,
        /// Largest ground-truth displacement magnitude, in voxels.
        #[arg(long)]
        amplitude: f64,
        /// Gaussian smoothing sigma of the ground-truth velocity, in voxels.
        #[arg(long)]
        smoothness: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export one slice of a volume as an 8-bit PGM image.
    ExportSlice {
        #[arg(long)]
        volume: PathBuf,
        /// Slice axis: x, y, or z.
        #[arg(long)]
        axis: String,
        /// Slice index along the axis.
        #[arg(long)]
        index: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_dims(s: &str) -> Result<Dims, String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(format!("expected NX,NY,NZ, got {s:?}"));
    }
    let mut vals = [0usize; 3];
    for (v, p) in vals.iter_mut().zip(&parts) {
        *v = p
            .trim()
            .parse()
            .map_err(|e| format!("bad dimension {p:?}: {e}"))?;
        if *v == 0 {
            return Err("dimensions must be positive".into());
        }
    }
    Ok(Dims::new(vals[0], vals[1], vals[2]))
}

fn run(cli: Cli) -> symreg::Result<()> {
    match cli.command {
        Command::Register {
            fixed,
            moving,
            out,
            preset,
            lambda1,
            lambda2,
            lambda3,
            steps,
            step_size,
            momentum,
            t_steps,
            velocity_cap,
            seed,
        } => {
            let x = io::load_volume(&fixed)?;
            let y = io::load_volume(&moving)?;
            let mut cfg = match preset.as_str() {
                "direct" => RegistrationConfig::direct(),
                "paper" => RegistrationConfig::paper(),
                other => {
                    return Err(symreg::Error::InvalidParameter(format!(
                        "unknown preset {other:?} (expected direct or paper)"
                    )))
                }
            };
            if let Some(v) = lambda1 {
                cfg.weights.lambda_jdet = v;
            }
            if let Some(v) = lambda2 {
                cfg.weights.lambda_smooth = v;
            }
            if let Some(v) = lambda3 {
                cfg.weights.lambda_mag = v;
            }
            if let Some(v) = steps {
                cfg.max_iters = v;
            }
            if let Some(v) = step_size {
                cfg.step_size = v;
            }
            if let Some(v) = momentum {
                cfg.momentum = v;
            }
            if let Some(v) = t_steps {
                cfg.t_steps = v;
            }
            if let Some(v) = velocity_cap {
                cfg.velocity_cap = v;
            }
            if let Some(v) = seed {
                cfg.seed = v;
            }
            std::fs::create_dir_all(&out)?;
            let result = register(&x, &y, &cfg)?;
            io::save_deformation(&result.transforms.xy_half, out.join("phi_xy_half.json"))?;
            io::save_deformation(&result.transforms.yx_half, out.join("phi_yx_half.json"))?;
            io::save_deformation(&result.transforms.xy_full, out.join("phi_xy_full.json"))?;
            io::save_deformation(&result.transforms.yx_full, out.join("phi_yx_full.json"))?;
            io::write_loss_log(&result.history, out.join("loss_log.jsonl"))?;
            let summary = RegistrationSummary::new(&result, &cfg);
            write_json(&summary, &out.join("summary.json"))?;
            println!(
                "registered in {} iterations, {:.3} s; total loss {:.6}",
                result.iterations,
                result.runtime_seconds,
                result.final_loss().total
            );
            Ok(())
        }
        Command::Warp {
            image,
            field,
            out,
            labels,
        } => {
            let d = io::load_deformation(&field)?;
            if labels {
                let lm = io::load_labels(&image)?;
                io::save_labels(&warp_labels(&lm, &d)?, &out)?;
            } else {
                let vol = io::load_volume(&image)?;
                io::save_volume(&warp_image(&vol, &d)?, &out)?;
            }
            Ok(())
        }
        Command::Jacobian { field, out } => {
            let d = io::load_deformation(&field)?;
            let report = fold_report(&d)?;
            write_json(&report, &out)
        }
        Command::Dice { a, b, out } => {
            let la = io::load_labels(&a)?;
            let lb = io::load_labels(&b)?;
            let labels = present_labels(&la, &lb);
            let report = dice(&la, &lb, &labels)?;
            write_json(&report, &out)
        }
        Command::Synth {
            seed,
            dims,
            amplitude,
            smoothness,
            out,
        } => {
            if amplitude < 0.0 {
                return Err(symreg::Error::InvalidParameter(
                    "amplitude must be non-negative".into(),
                ));
            }
            if smoothness <= 0.0 {
                return Err(symreg::Error::InvalidParameter(
                    "smoothness must be positive".into(),
                ));
            }
            std::fs::create_dir_all(&out)?;
            let pair = synth_pair(seed, dims, smoothness, amplitude);
            io::save_volume(&pair.x, out.join("x.json"))?;
            io::save_volume(&pair.y, out.join("y.json"))?;
            io::save_labels(&pair.labels_x, out.join("labels_x.json"))?;
            io::save_labels(&pair.labels_y, out.join("labels_y.json"))?;
            io::save_velocity(&pair.v_true, out.join("v_true.json"))?;
            Ok(())
        }
        Command::ExportSlice {
            volume,
            axis,
            index,
            out,
        } => {
            let vol = io::load_volume(&volume)?;
            let axis: SliceAxis = axis.parse()?;
            io::write_pgm_slice(&vol, axis, index, &out)
        }
    }
}

fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> symreg::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
