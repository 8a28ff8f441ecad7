use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tcip::checkpoint::Checkpoint;
use tcip::config::{Overrides, RunConfig, OUTPUT_ROOT_ENV};
use tcip::dataset::{self, Pair};
use tcip::report::{self, RunReport};
use tcip::run::{self, Preset};
use tcip::{io, io::IoError};
use tcip_core::synth::SynthSpec;
use tcip_core::warpfield;

const CHECKPOINT_FILE: &str = "checkpoint.tcip";

#[derive(Parser)]
#[command(name = "tcip", version, about = "Deformable 3D registration with iteration control")]
struct Cli {
    /// Directory that relative output paths are placed under.
    #[arg(long, global = true, env = OUTPUT_ROOT_ENV)]
    output_root: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset directory.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        pairs: usize,
        #[arg(long)]
        grid_size: Option<usize>,
        #[arg(long)]
        num_blobs: Option<usize>,
        #[arg(long)]
        amplitude: Option<f64>,
        #[arg(long)]
        smoothness: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a network and write a checkpoint and loss curve.
    Train {
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Register one moving volume onto a fixed volume.
    Register {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Fixed volume stem (`<stem>.json` + `<stem>.raw`).
        #[arg(long)]
        fixed: PathBuf,
        #[arg(long)]
        moving: PathBuf,
        /// Moving label map to carry through the field.
        #[arg(long)]
        moving_labels: Option<PathBuf>,
        /// Output directory for the field, warped volume and trace.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Train and evaluate every cell of an ablation grid.
    Ablate {
        #[arg(long, value_enum)]
        preset: Preset,
        #[command(flatten)]
        overrides: Overrides,
    },
}

fn under(root: Option<&Path>, p: &Path) -> PathBuf {
    match root {
        Some(r) if p.is_relative() => r.join(p),
        _ => p.to_path_buf(),
    }
}

fn pairs_for(cfg: &RunConfig) -> anyhow::Result<Vec<Pair>> {
    let pairs = run::load_pairs(cfg)?;
    anyhow::ensure!(!pairs.is_empty(), "the dataset holds no pairs");
    Ok(pairs)
}

fn execute(cli: Cli) -> anyhow::Result<()> {
    let root = cli.output_root.as_deref();
    match cli.command {
        Command::Synth {
            out,
            pairs,
            grid_size,
            num_blobs,
            amplitude,
            smoothness,
            seed,
        } => {
            let d = SynthSpec::default();
            let spec = SynthSpec {
                grid_size: grid_size.unwrap_or(d.grid_size),
                num_blobs: num_blobs.unwrap_or(d.num_blobs),
                deform_amplitude: amplitude.unwrap_or(d.deform_amplitude),
                deform_smoothness: smoothness.unwrap_or(d.deform_smoothness),
                seed: seed.unwrap_or(d.seed),
            };
            let dir = under(root, &out);
            let m = dataset::write_synthetic(&dir, &spec, pairs)?;
            eprintln!("wrote {} pairs to {}", m.pairs.len(), dir.display());
        }
        Command::Train { overrides } => {
            let cfg = overrides.resolve()?;
            let out = cfg.resolved_output(root);
            let pairs = pairs_for(&cfg)?;
            let every = (cfg.train.steps / 20).max(1);
            let trained = run::train(&cfg, &pairs, |p| {
                if p.step % every == 0 {
                    eprintln!("step {:>5}  loss {:+.6}  ncc {:+.6}  smooth {:.6}", p.step, p.total, p.ncc, p.smooth);
                }
            })?;
            trained.checkpoint.save(&out.join(CHECKPOINT_FILE))?;
            report::write_json(&out.join("config.json"), &cfg)?;
            report::write_json(&out.join("loss_curve.json"), &trained.loss_curve)?;
            report::write_json(
                &out.join("train_timing.json"),
                &serde_json::json!({ "train_seconds": trained.seconds }),
            )?;
            eprintln!("checkpoint written to {}", out.join(CHECKPOINT_FILE).display());
        }
        Command::Register {
            checkpoint,
            fixed,
            moving,
            moving_labels,
            out,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let f = io::load_volume(&fixed)?;
            let m = io::load_volume(&moving)?;
            ckpt.check_grid(f.dims())?;
            let reg = tcip_core::model::register(&ckpt.params, &ckpt.network, &f, &m)?;
            let dir = under(root, &out);
            io::save_field(&dir.join("field"), &reg.field, f.spacing())?;
            io::save_volume(&dir.join("warped"), &reg.warped)?;
            if let Some(stem) = moving_labels {
                let labels = io::load_labels(&stem)?;
                let warped = warpfield::warp_labels(&labels, &reg.field)?;
                io::save_labels(&dir.join("warped_labels"), &warped)?;
            }
            report::write_json(&dir.join("trace.json"), &(&reg.layers, &reg.trace))?;
            let fold = warpfield::jacobian_folding_fraction(&reg.field)?;
            eprintln!("registered; folding fraction {fold:.6}; outputs in {}", dir.display());
        }
        Command::Eval { checkpoint, overrides } => {
            let mut cfg = overrides.resolve()?;
            let ckpt = Checkpoint::load(&checkpoint)?;
            let n = ckpt.network;
            (cfg.encoder, cfg.ferm, cfg.tci, cfg.loss) = (n.encoder, n.ferm, n.tci, n.loss);
            let out = cfg.resolved_output(root);
            let pairs = pairs_for(&cfg)?;
            let (rows, timings) = run::evaluate(&ckpt, &pairs)?;
            let rep = RunReport::new(&cfg, rows, Vec::new());
            report::write_text(&out.join("report.json"), &rep.to_json())?;
            report::write_text(&out.join("report.txt"), &rep.table())?;
            report::write_json(&out.join("timings.json"), &timings)?;
            print!("{}", rep.table());
        }
        Command::Ablate { preset, overrides } => {
            let cfg = overrides.resolve()?;
            let out = cfg.resolved_output(root);
            let pairs = pairs_for(&cfg)?;
            let rep = run::ablate(preset, &cfg, &pairs, |row| {
                let d = row.summary.dice.map_or(f64::NAN, |s| s.mean);
                eprintln!("{:<28} dice {d:.4}  iterations {:.2?}", row.name, row.summary.mean_iterations);
            })?;
            report::write_json(&out.join("ablation.json"), &rep)?;
            report::write_text(&out.join("ablation.txt"), &rep.table())?;
            print!("{}", rep.table());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = if e.chain().any(|c| c.downcast_ref::<IoError>().is_some()) {
                "io"
            } else if e.chain().any(|c| c.downcast_ref::<tcip_core::Error>().is_some()) {
                "core"
            } else {
                "run"
            };
            eprintln!("error[{kind}]: {e}");
            for cause in e.chain().skip(1) {
                eprintln!("  caused by: {cause}");
            }
            ExitCode::from(if kind == "io" { 2 } else { 1 })
        }
    }
}
