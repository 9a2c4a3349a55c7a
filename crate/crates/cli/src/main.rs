//! `aeroseg` — prompted small-object segmentation pipeline.
//!
//! Subcommands: `synth` (synthetic dataset), `train`, `eval`, `infer`,
//! `annotate` (mask generation from box-only annotations with a review
//! list), `visualize` (overlay rendering).
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
//! failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;

use aeroseg_core::data::ExportFormat;
use config::ResolvedConfig;

#[derive(Parser)]
#[command(name = "aeroseg", version, about = "Prompted small-object segmentation for aerial imagery")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct CommonOpts {
    /// TOML configuration file; flags override file values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Random seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Network input side in pixels (divisible by 16).
    #[arg(long)]
    s_in: Option<u32>,
}

impl CommonOpts {
    fn resolve(&self) -> aeroseg_core::Result<ResolvedConfig> {
        let mut rc = ResolvedConfig::load(self.config.as_deref())?;
        rc.set_flag("seed", self.seed, |c, v| c.seed = v);
        rc.set_flag("ram.s_in", self.s_in, |c, v| c.ram.s_in = v);
        Ok(rc)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a deterministic synthetic dataset (train + val splits).
    Synth {
        #[command(flatten)]
        common: CommonOpts,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        train_images: Option<usize>,
        #[arg(long)]
        val_images: Option<usize>,
        #[arg(long)]
        instances_per_image: Option<usize>,
        #[arg(long)]
        img_side: Option<usize>,
        #[arg(long)]
        size_min: Option<f64>,
        #[arg(long)]
        size_max: Option<f64>,
        #[arg(long)]
        noise: Option<f64>,
    },
    /// Train a model on a dataset directory (train/ and val/ splits).
    Train {
        #[command(flatten)]
        common: CommonOpts,
        /// Dataset directory produced by `synth` (or matching its layout).
        #[arg(long)]
        data: PathBuf,
        /// Run directory for checkpoints, metrics, and the resolved config.
        #[arg(long)]
        out: PathBuf,
        /// Resume from a checkpoint written by a previous run.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr_decoder: Option<f64>,
        #[arg(long)]
        lr_refine: Option<f64>,
        #[arg(long)]
        lr_backbone: Option<f64>,
        /// Freeze the backbone and prompt embeddings.
        #[arg(long)]
        freeze_backbone: bool,
        /// Train without edge supervision (ablation).
        #[arg(long)]
        no_edge_supervision: bool,
        /// Disable horizontal-flip augmentation.
        #[arg(long)]
        no_flip: bool,
        /// Stop once validation mIoU reaches this value.
        #[arg(long)]
        stop_at_miou: Option<f64>,
        /// Encoder token width.
        #[arg(long)]
        model_width: Option<usize>,
        /// Encoder depth in transformer blocks.
        #[arg(long)]
        model_blocks: Option<usize>,
        /// Encoder attention heads.
        #[arg(long)]
        model_heads: Option<usize>,
    },
    /// Evaluate a checkpoint: per-class and mean IoU / boundary IoU.
    Eval {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Dataset split subdirectory to evaluate.
        #[arg(long, default_value = "val")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Segment one instance: image plus oriented box in, mask plus score out.
    Infer {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Oriented box: `cx,cy,long,short,theta` (radians) or 8 corner
        /// coordinates `x1,y1,...,x4,y4`.
        #[arg(long)]
        obb: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate masks for box-only annotations; low-confidence instances
    /// land on a review list with overlay images.
    Annotate {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Annotation JSON (masks optional; never modified).
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Review threshold on the predicted quality score.
        #[arg(long)]
        tau: Option<f64>,
        /// Mask storage: png files or inline rle.
        #[arg(long, value_parser = parse_format)]
        format: Option<ExportFormat>,
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Render per-image overlays from an export manifest.
    Visualize {
        /// Manifest written by `annotate`.
        #[arg(long)]
        manifest: PathBuf,
        /// Annotation JSON that references the original images.
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_format(s: &str) -> Result<ExportFormat, String> {
    match s {
        "png" => Ok(ExportFormat::Png),
        "rle" => Ok(ExportFormat::Rle),
        other => Err(format!("unknown format '{other}' (png|rle)")),
    }
}

fn run(cli: Cli) -> aeroseg_core::Result<()> {
    match cli.cmd {
        Cmd::Synth {
            common,
            out,
            train_images,
            val_images,
            instances_per_image,
            img_side,
            size_min,
            size_max,
            noise,
        } => {
            let mut rc = common.resolve()?;
            rc.set_flag("synth.train_images", train_images, |c, v| c.synth.train_images = v);
            rc.set_flag("synth.val_images", val_images, |c, v| c.synth.val_images = v);
            rc.set_flag("synth.instances_per_image", instances_per_image, |c, v| {
                c.synth.instances_per_image = v
            });
            rc.set_flag("synth.img_side", img_side, |c, v| c.synth.img_side = v);
            rc.set_flag("synth.size_min", size_min, |c, v| c.synth.size_min = v);
            rc.set_flag("synth.size_max", size_max, |c, v| c.synth.size_max = v);
            rc.set_flag("synth.noise", noise, |c, v| c.synth.noise = v);
            commands::cmd_synth(&rc, &out)
        }
        Cmd::Train {
            common,
            data,
            out,
            resume,
            epochs,
            batch_size,
            lr_decoder,
            lr_refine,
            lr_backbone,
            freeze_backbone,
            no_edge_supervision,
            no_flip,
            stop_at_miou,
            model_width,
            model_blocks,
            model_heads,
        } => {
            let mut rc = common.resolve()?;
            rc.set_flag("train.epochs", epochs, |c, v| c.train.epochs = v);
            rc.set_flag("train.batch_size", batch_size, |c, v| c.train.batch_size = v);
            rc.set_flag("train.lr_decoder", lr_decoder, |c, v| c.train.lr_decoder = v);
            rc.set_flag("train.lr_refine", lr_refine, |c, v| c.train.lr_refine = v);
            rc.set_flag("train.lr_backbone", lr_backbone, |c, v| {
                c.train.lr_backbone = Some(v)
            });
            rc.set_flag(
                "model.freeze_backbone",
                freeze_backbone.then_some(true),
                |c, v| c.model.freeze_backbone = v,
            );
            rc.set_flag(
                "train.edge_supervision",
                no_edge_supervision.then_some(false),
                |c, v| c.train.edge_supervision = v,
            );
            rc.set_flag("train.flip_augment", no_flip.then_some(false), |c, v| {
                c.train.flip_augment = v
            });
            rc.set_flag("train.stop_at_val_miou", stop_at_miou, |c, v| {
                c.train.stop_at_val_miou = Some(v)
            });
            rc.set_flag("model.encoder.width", model_width, |c, v| {
                c.model.encoder.width = v
            });
            rc.set_flag("model.encoder.blocks", model_blocks, |c, v| {
                c.model.encoder.blocks = v
            });
            rc.set_flag("model.encoder.heads", model_heads, |c, v| {
                c.model.encoder.heads = v
            });
            commands::cmd_train(&rc, &data, &out, resume.as_deref())
        }
        Cmd::Eval {
            common,
            checkpoint,
            data,
            split,
            out,
        } => {
            let rc = common.resolve()?;
            commands::cmd_eval(&rc, &checkpoint, &data, &split, &out)
        }
        Cmd::Infer {
            common,
            checkpoint,
            image,
            obb,
            out,
        } => {
            let rc = common.resolve()?;
            commands::cmd_infer(&rc, &checkpoint, &image, &obb, &out)
        }
        Cmd::Annotate {
            common,
            checkpoint,
            annotations,
            out,
            tau,
            format,
            batch_size,
        } => {
            let mut rc = common.resolve()?;
            rc.set_flag("annotate.tau", tau, |c, v| c.annotate.tau = v);
            rc.set_flag("annotate.format", format, |c, v| c.annotate.format = v);
            rc.set_flag("train.batch_size", batch_size, |c, v| c.train.batch_size = v);
            commands::cmd_annotate(&rc, &checkpoint, &annotations, &out)
        }
        Cmd::Visualize {
            manifest,
            annotations,
            out,
        } => commands::cmd_visualize(&manifest, &annotations, &out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(commands::exit_code(&e) as u8)
        }
    }
}
