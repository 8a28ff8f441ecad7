//! Training, evaluation and ablation drivers shared by the CLI and tests.

use std::time::Instant;

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use tcip_core::encoder::PYRAMID_DIVISOR;
use tcip_core::model::{self, NetworkConfig};
use tcip_core::tci::{SimMetric, TciMode};
use tcip_core::volume::padded_dims;
use tcip_core::{metrics, warpfield, AdamConfig};

use crate::checkpoint::Checkpoint;
use crate::config::{DataSource, RunConfig};
use crate::dataset::{self, Pair};
use crate::report::{LossPoint, PairReport, PairTiming, RunReport, Summary, Timings};

pub fn load_pairs(cfg: &RunConfig) -> anyhow::Result<Vec<Pair>> {
    match &cfg.data {
        DataSource::Synth { spec, pairs } => Ok(dataset::generate(spec, *pairs)?),
        DataSource::Directory { path } => {
            dataset::load_dataset(path).with_context(|| format!("loading dataset {}", path.display()))
        }
    }
}

/// Common padded grid of every pair.
pub fn grid_of(pairs: &[Pair]) -> anyhow::Result<[usize; 3]> {
    let Some(first) = pairs.first() else {
        bail!("the dataset holds no pairs");
    };
    let grid = padded_dims(first.fixed.dims(), PYRAMID_DIVISOR);
    for p in pairs {
        let g = padded_dims(p.fixed.dims(), PYRAMID_DIVISOR);
        if g != grid {
            bail!("pair {} pads to {g:?}, others to {grid:?}", p.id);
        }
    }
    Ok(grid)
}

pub struct Trained {
    pub checkpoint: Checkpoint,
    pub loss_curve: Vec<LossPoint>,
    pub seconds: f64,
}

/// Adam over the pairs in round-robin order, one pair per step.
pub fn train(cfg: &RunConfig, pairs: &[Pair], mut on_step: impl FnMut(&LossPoint)) -> anyhow::Result<Trained> {
    cfg.validate()?;
    let network = cfg.network();
    let grid_dims = grid_of(pairs)?;
    let mut params = model::init_params(&network, cfg.train.seed)?;
    let adam = AdamConfig::with_lr(cfg.train.lr);
    let tensors: Vec<_> = pairs
        .iter()
        .map(|p| {
            (
                p.fixed.pad_to_multiple(PYRAMID_DIVISOR).to_tensor(),
                p.moving.pad_to_multiple(PYRAMID_DIVISOR).to_tensor(),
            )
        })
        .collect();
    let start = Instant::now();
    let mut curve = Vec::with_capacity(cfg.train.steps);
    for step in 0..cfg.train.steps {
        let i = step % tensors.len();
        let (f, m) = &tensors[i];
        let r = model::train_step(&mut params, &network, &adam, f, m, cfg.train.detach_iterations)
            .with_context(|| format!("training step {step} on pair {}", pairs[i].id))?;
        let point = LossPoint {
            step,
            pair: i,
            total: r.total,
            ncc: r.ncc,
            smooth: r.smooth,
        };
        on_step(&point);
        curve.push(point);
    }
    Ok(Trained {
        checkpoint: Checkpoint {
            network,
            grid_dims,
            params,
        },
        loss_curve: curve,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Registers one pair and scores it. Returns the report row, the full
/// registration and the registration wall time.
pub fn register_pair(ckpt: &Checkpoint, pair: &Pair) -> anyhow::Result<(PairReport, model::Registration, f64)> {
    ckpt.check_grid(pair.fixed.dims())?;
    let start = Instant::now();
    let reg = model::register(&ckpt.params, &ckpt.network, &pair.fixed, &pair.moving)?;
    let seconds = start.elapsed().as_secs_f64();
    let warped_labels = warpfield::warp_labels(&pair.moving_labels, &reg.field)?;
    let surface = metrics::mean_surface_distances(&pair.fixed_labels, &warped_labels)?;
    let report = PairReport {
        id: pair.id.clone(),
        dice_before: metrics::mean_dice(&pair.fixed_labels, &pair.moving_labels)?,
        dice: metrics::mean_dice(&pair.fixed_labels, &warped_labels)?,
        hd95: surface.map(|s| s.hd95),
        assd: surface.map(|s| s.assd),
        mse_before: metrics::mse(&pair.fixed, &pair.moving)?,
        mse: metrics::mse(&pair.fixed, &reg.warped)?,
        folding_fraction: warpfield::jacobian_folding_fraction(&reg.field)?,
        layers: reg.layers.clone(),
        trace: reg.trace.clone(),
    };
    Ok((report, reg, seconds))
}

pub fn evaluate(ckpt: &Checkpoint, pairs: &[Pair]) -> anyhow::Result<(Vec<PairReport>, Timings)> {
    let mut rows = Vec::with_capacity(pairs.len());
    let mut timings = Timings::default();
    for p in pairs {
        let (row, _, secs) = register_pair(ckpt, p).with_context(|| format!("registering pair {}", p.id))?;
        rows.push(row);
        timings.pairs.push(PairTiming {
            id: p.id.clone(),
            register_seconds: secs,
        });
    }
    rows.sort_by(|a, b| a.id.cmp(&b.id));
    timings.pairs.sort_by(|a, b| a.id.cmp(&b.id));
    Ok((rows, timings))
}

/// Trains on `pairs` and evaluates on the same pairs.
pub fn train_and_evaluate(cfg: &RunConfig, pairs: &[Pair]) -> anyhow::Result<(RunReport, Checkpoint, Timings)> {
    let trained = train(cfg, pairs, |_| {})?;
    let (rows, mut timings) = evaluate(&trained.checkpoint, pairs)?;
    timings.train_seconds = Some(trained.seconds);
    Ok((RunReport::new(cfg, rows, trained.loss_curve), trained.checkpoint, timings))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// FFB / SEB on-off, four rows.
    Ferm,
    /// Controller modes TCI-1 .. TCI-4.
    TciMode,
    /// δ_s ∈ {0.01, 0.005, 0.001} × δ_c ∈ {0.01, 0.005}.
    Threshold,
    /// Per-layer TCI enablement, eight rows.
    Layers,
    /// Similarity metric × threshold grid.
    SimMetric,
    /// Window size t ∈ {3, 4, 5}.
    Window,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub name: String,
    pub config: RunConfig,
}

const DELTA_S: [f64; 3] = [0.01, 0.005, 0.001];
const DELTA_C: [f64; 2] = [0.01, 0.005];

fn mark(b: bool) -> &'static str {
    if b {
        "✓"
    } else {
        "✗"
    }
}

fn threshold_cells(base: &RunConfig, prefix: &str) -> Vec<Cell> {
    let mut out = Vec::new();
    for ds in DELTA_S {
        for dc in DELTA_C {
            let mut c = base.clone();
            c.tci.delta_s = ds;
            c.tci.delta_c = dc;
            out.push(Cell {
                name: format!("{prefix}δs={ds} δc={dc}"),
                config: c,
            });
        }
    }
    out
}

/// The grid cells of a preset, each a copy of `base` with one factor changed.
pub fn cells(preset: Preset, base: &RunConfig) -> Vec<Cell> {
    let with = |name: String, f: &dyn Fn(&mut RunConfig)| {
        let mut c = base.clone();
        f(&mut c);
        Cell { name, config: c }
    };
    match preset {
        Preset::Ferm => [(false, false), (false, true), (true, false), (true, true)]
            .into_iter()
            .map(|(ffb, seb)| {
                with(format!("FFB {} SEB {}", mark(ffb), mark(seb)), &|c| {
                    c.ferm.use_ffb = ffb;
                    c.ferm.use_seb = seb;
                })
            })
            .collect(),
        Preset::TciMode => TciMode::ALL
            .into_iter()
            .map(|m| with(m.label().to_string(), &|c| c.tci.mode = m))
            .collect(),
        Preset::Threshold => threshold_cells(base, ""),
        Preset::Layers => {
            // Rows as (layer 4, layer 3, layer 2, layer 1).
            let rows = [
                [false, false, false, false],
                [true, false, false, false],
                [false, true, false, false],
                [false, false, true, false],
                [false, false, false, true],
                [true, true, false, false],
                [true, true, true, false],
                [true, true, true, true],
            ];
            rows.into_iter()
                .map(|r| {
                    let name = format!("L4 {} L3 {} L2 {} L1 {}", mark(r[0]), mark(r[1]), mark(r[2]), mark(r[3]));
                    with(name, &|c| c.tci.per_layer_enabled = [r[3], r[2], r[1], r[0]])
                })
                .collect()
        }
        Preset::SimMetric => SimMetric::ALL
            .into_iter()
            .flat_map(|m| {
                let mut b = base.clone();
                b.tci.sim_metric = m;
                threshold_cells(&b, &format!("{} ", m.label()))
            })
            .collect(),
        Preset::Window => [3, 4, 5]
            .into_iter()
            .map(|t| with(format!("t={t}"), &|c| c.tci.window = t))
            .collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub network: NetworkConfig,
    pub summary: Summary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub preset: Preset,
    pub seed: u64,
    pub base: RunConfig,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn table(&self) -> String {
        use std::fmt::Write as _;
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<28} {:>16} {:>8} {:>8} {:>10} {:>8}  iters(l1..l4)",
            "cell", "dice", "hd95", "assd", "mse", "fold%"
        );
        let f = |x: Option<crate::report::Stat>, k: f64, p: usize| {
            x.map_or_else(|| "-".to_string(), |v| format!("{:.p$}", k * v.mean))
        };
        for r in &self.rows {
            let m = &r.summary;
            let dice = m
                .dice
                .map_or_else(|| "-".to_string(), |d| format!("{:.4}±{:.4}", d.mean, d.std));
            let _ = writeln!(
                s,
                "{:<28} {:>16} {:>8} {:>8} {:>10} {:>8}  {:.2?}",
                r.name,
                dice,
                f(m.hd95, 1.0, 3),
                f(m.assd, 1.0, 3),
                f(m.mse, 1.0, 6),
                f(m.folding_fraction, 100.0, 4),
                m.mean_iterations
            );
        }
        s
    }
}

/// Trains and evaluates every cell of a preset on the same pairs and seed.
pub fn ablate(
    preset: Preset,
    base: &RunConfig,
    pairs: &[Pair],
    mut on_cell: impl FnMut(&AblationRow),
) -> anyhow::Result<AblationReport> {
    let mut rows = Vec::new();
    for cell in cells(preset, base) {
        let (report, _, _) = train_and_evaluate(&cell.config, pairs).with_context(|| format!("ablation cell {}", cell.name))?;
        let row = AblationRow {
            name: cell.name,
            network: cell.config.network(),
            summary: report.summary,
        };
        on_cell(&row);
        rows.push(row);
    }
    Ok(AblationReport {
        preset,
        seed: base.train.seed,
        base: base.clone(),
        rows,
    })
}
