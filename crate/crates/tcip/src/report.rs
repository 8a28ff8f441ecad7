//! Run reports. Everything here is a pure function of the configuration and
//! seed, so reruns serialise to identical bytes; wall-clock timings are kept
//! in a separate [`Timings`] record.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::Context;
use serde::{Deserialize, Serialize};
use tcip_core::model::{LayerOutcome, TraceRow};

use crate::config::RunConfig;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    pub pair: usize,
    pub total: f64,
    pub ncc: f64,
    pub smooth: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairReport {
    pub id: String,
    /// Mean foreground Dice before and after registration.
    pub dice_before: f64,
    pub dice: f64,
    /// Mean over labels shared by both volumes; absent when none is shared.
    pub hd95: Option<f64>,
    pub assd: Option<f64>,
    pub mse_before: f64,
    pub mse: f64,
    pub folding_fraction: f64,
    pub layers: Vec<LayerOutcome>,
    pub trace: Vec<TraceRow>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    /// Mean and population standard deviation; `None` for no values.
    pub fn of(values: impl IntoIterator<Item = f64>) -> Option<Stat> {
        let v: Vec<f64> = values.into_iter().collect();
        if v.is_empty() {
            return None;
        }
        let (mean, std) = tcip_core::math::mean_std(&v);
        Some(Stat { mean, std })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub pairs: usize,
    pub dice_before: Option<Stat>,
    pub dice: Option<Stat>,
    pub hd95: Option<Stat>,
    pub assd: Option<Stat>,
    pub mse: Option<Stat>,
    pub folding_fraction: Option<Stat>,
    /// Mean iterations per decoding layer, index 0 holding layer 1.
    pub mean_iterations: [f64; 4],
}

impl Summary {
    pub fn of(pairs: &[PairReport]) -> Summary {
        let mut iters = [0.0; 4];
        let mut counts = [0usize; 4];
        for l in pairs.iter().flat_map(|p| &p.layers) {
            iters[l.layer - 1] += l.iterations as f64;
            counts[l.layer - 1] += 1;
        }
        for (i, c) in iters.iter_mut().zip(counts) {
            if c > 0 {
                *i /= c as f64;
            }
        }
        Summary {
            pairs: pairs.len(),
            dice_before: Stat::of(pairs.iter().map(|p| p.dice_before)),
            dice: Stat::of(pairs.iter().map(|p| p.dice)),
            hd95: Stat::of(pairs.iter().filter_map(|p| p.hd95)),
            assd: Stat::of(pairs.iter().filter_map(|p| p.assd)),
            mse: Stat::of(pairs.iter().map(|p| p.mse)),
            folding_fraction: Stat::of(pairs.iter().map(|p| p.folding_fraction)),
            mean_iterations: iters,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub seed: u64,
    pub config: RunConfig,
    pub summary: Summary,
    /// Sorted by pair id.
    pub pairs: Vec<PairReport>,
    pub loss_curve: Vec<LossPoint>,
}

impl RunReport {
    pub fn new(config: &RunConfig, mut pairs: Vec<PairReport>, loss_curve: Vec<LossPoint>) -> RunReport {
        pairs.sort_by(|a, b| a.id.cmp(&b.id));
        RunReport {
            schema_version: SCHEMA_VERSION,
            seed: config.train.seed,
            config: config.clone(),
            summary: Summary::of(&pairs),
            pairs,
            loss_curve,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises") + "\n"
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<12} {:>8} {:>8} {:>8} {:>8} {:>10} {:>10} {:>10}  iters(l1..l4)",
            "pair", "dice0", "dice", "hd95", "assd", "mse0", "mse", "fold%"
        );
        let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.3}"));
        for p in &self.pairs {
            let mut its = [0usize; 4];
            for l in &p.layers {
                its[l.layer - 1] = l.iterations;
            }
            let _ = writeln!(
                s,
                "{:<12} {:>8.4} {:>8.4} {:>8} {:>8} {:>10.6} {:>10.6} {:>10.4}  {:?}",
                p.id,
                p.dice_before,
                p.dice,
                opt(p.hd95),
                opt(p.assd),
                p.mse_before,
                p.mse,
                100.0 * p.folding_fraction,
                its
            );
        }
        let pm = |st: Option<Stat>, k: f64| st.map_or_else(|| "-".to_string(), |x| format!("{:.4} ± {:.4}", k * x.mean, k * x.std));
        let m = &self.summary;
        let _ = writeln!(s);
        let _ = writeln!(s, "pairs            {}", m.pairs);
        let _ = writeln!(s, "dice (identity)  {}", pm(m.dice_before, 1.0));
        let _ = writeln!(s, "dice             {}", pm(m.dice, 1.0));
        let _ = writeln!(s, "hd95             {}", pm(m.hd95, 1.0));
        let _ = writeln!(s, "assd             {}", pm(m.assd, 1.0));
        let _ = writeln!(s, "mse              {}", pm(m.mse, 1.0));
        let _ = writeln!(s, "folding %        {}", pm(m.folding_fraction, 100.0));
        let _ = writeln!(s, "mean iterations  {:?}", m.mean_iterations);
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairTiming {
    pub id: String,
    /// Encode through final warp.
    pub register_seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub train_seconds: Option<f64>,
    pub pairs: Vec<PairTiming>,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}
