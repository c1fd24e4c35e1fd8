use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use uqr_cli::{cmd_codec_sweep, cmd_eval, cmd_gradcheck, cmd_train, exit_code, ExperimentConfig};
use uqr_core::codec::{CodecKind, CodecSpec};
use uqr_core::data::CropMode;
use uqr_core::model::detection_only_mode;

#[derive(Parser)]
#[command(name = "uqr", version, about = "Mask codecs and a toy query decoder for instance segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Reconstruction IoU of each codec over an (N, n_k) grid.
    CodecSweep(Common),
    /// Train the toy model and evaluate it on the validation split.
    Train(Common),
    /// Evaluate a checkpoint on the validation split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Basis file of a fitted codec (PCA, sparse).
        #[arg(long)]
        codec_file: Option<PathBuf>,
    },
    /// Finite-difference check of every primitive and of the full loss.
    Gradcheck(Common),
}

#[derive(Args)]
struct Common {
    /// JSON experiment config; missing fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Dataset and training seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    codec: Option<CodecKind>,
    /// Mask side N.
    #[arg(long)]
    n: Option<usize>,
    /// Mask vector dimension n_k.
    #[arg(long)]
    nk: Option<usize>,
    #[arg(long)]
    lambda_vec: Option<f64>,
    /// Train without the vector loss and mask head.
    #[arg(long)]
    det_only: bool,
    #[arg(long)]
    crop_mode: Option<CropMode>,
}

impl Common {
    fn resolve(&self, sweep: bool) -> uqr_core::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
            cfg.train.seed = s;
        }
        if sweep {
            if let Some(k) = self.codec {
                cfg.sweep.codecs = vec![k];
                cfg.sweep.extra_cells.clear();
            }
            if let Some(n) = self.n {
                cfg.sweep.sides = vec![n];
            }
            if let Some(nk) = self.nk {
                cfg.sweep.nks = vec![nk];
            }
        } else {
            let c = &mut cfg.model.codec;
            let kind = self.codec.unwrap_or(c.kind);
            let side = self.n.unwrap_or(c.side);
            let nk = match (kind, self.nk) {
                (_, Some(nk)) => nk,
                (CodecKind::Flatten, None) => side * side,
                (_, None) => c.nk,
            };
            *c = CodecSpec { kind, side, nk, params: c.params };
        }
        if let Some(l) = self.lambda_vec {
            cfg.train.weights.vec = l;
        }
        if self.det_only {
            cfg.train = detection_only_mode(cfg.train);
        }
        if let Some(m) = self.crop_mode {
            cfg.model.crop_mode = m;
        }
        Ok(cfg)
    }
}

fn run(cli: Cli) -> uqr_core::Result<bool> {
    match cli.command {
        Command::CodecSweep(c) => {
            let cfg = c.resolve(true)?;
            let rows = cmd_codec_sweep(&cfg, &c.out)?;
            for r in rows {
                println!("{:<7} N={:<4} n_k={:<5} mean IoU {:.4}  median {:.4}", r.codec, r.n, r.nk, r.mean_iou, r.median_iou);
            }
        }
        Command::Train(c) => {
            let cfg = c.resolve(false)?;
            let o = cmd_train(&cfg, &c.out)?;
            println!("loss ratio (last/first 100 steps) {:.3}", o.loss_ratio);
            println!("matched mask IoU {:.3}", o.matched_mask_iou);
            println!("box AP50 {:.3}  AP {:.3}", o.report.bbox.ap50, o.report.bbox.ap);
            println!("mask AP50 {:.3}  AP {:.3}", o.report.mask.ap50, o.report.mask.ap);
        }
        Command::Eval { common, checkpoint, codec_file } => {
            let cfg = common.resolve(false)?;
            let r = cmd_eval(&cfg, &checkpoint, codec_file.as_deref(), &common.out)?;
            println!("box AP50 {:.3}  AP {:.3}", r.bbox.ap50, r.bbox.ap);
            println!("mask AP50 {:.3}  AP {:.3}", r.mask.ap50, r.mask.ap);
        }
        Command::Gradcheck(c) => {
            let cfg = c.resolve(false)?;
            let o = cmd_gradcheck(&cfg, &c.out)?;
            for r in &o.primitives {
                println!("{:<20} {:.3e} {}", r.name, r.max_rel_err, if r.passed { "ok" } else { "FAIL" });
            }
            println!(
                "pipeline: {:.1}% of {} params under {:e} or within roundoff {:.1e} (max rel err {:.3e})",
                100.0 * o.pipeline.pass_fraction(),
                o.pipeline.checks.len(),
                o.pipeline.tol,
                o.pipeline.roundoff,
                o.pipeline.max_rel_err()
            );
            return Ok(o.passed);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("gradient check failed");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
