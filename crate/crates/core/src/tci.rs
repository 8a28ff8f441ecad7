//! Dual-stage threshold-controlled iteration policy.
//!
//! Each decoding layer keeps a sliding window of the last `t` similarity
//! scores. Once the window is full, a stability stage compares the
//! population standard deviation of the window against `δ_s` and a
//! convergence stage compares the latest score change against `δ_c`.
//! The ablation modes run only one stage, or both in the reverse order.

use alloc::collections::VecDeque;
use alloc::format;

use serde::{Deserialize, Serialize};

use crate::encoder::LEVELS;
use crate::error::{Error, Result};
use crate::losses;
use crate::math;
use crate::tensor::Tensor5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TciMode {
    /// TCI-1: convergence check only.
    ConvOnly,
    /// TCI-2: stability check only.
    StabOnly,
    /// TCI-3: convergence, then stability.
    ConvThenStab,
    /// TCI-4: stability, then convergence.
    StabThenConv,
}

impl TciMode {
    pub const ALL: [TciMode; 4] = [
        TciMode::ConvOnly,
        TciMode::StabOnly,
        TciMode::ConvThenStab,
        TciMode::StabThenConv,
    ];

    pub fn label(self) -> &'static str {
        match self {
            TciMode::ConvOnly => "TCI-1",
            TciMode::StabOnly => "TCI-2",
            TciMode::ConvThenStab => "TCI-3",
            TciMode::StabThenConv => "TCI-4",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimMetric {
    Ncc,
    Mae,
    Mse,
}

impl SimMetric {
    pub const ALL: [SimMetric; 3] = [SimMetric::Mae, SimMetric::Mse, SimMetric::Ncc];

    pub fn label(self) -> &'static str {
        match self {
            SimMetric::Ncc => "NCC",
            SimMetric::Mae => "MAE",
            SimMetric::Mse => "MSE",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TciConfig {
    /// Stability threshold `δ_s`.
    pub delta_s: f64,
    /// Convergence threshold `δ_c`.
    pub delta_c: f64,
    /// Window size `t`.
    pub window: usize,
    pub k_max: usize,
    pub mode: TciMode,
    pub sim_metric: SimMetric,
    /// Per decoding level 1..=4; a disabled level runs a single iteration.
    pub per_layer_enabled: [bool; LEVELS],
    /// Return the best-scoring field seen in the window instead of the last.
    pub return_best: bool,
}

impl Default for TciConfig {
    fn default() -> Self {
        TciConfig {
            delta_s: 0.005,
            delta_c: 0.005,
            window: 3,
            k_max: 10,
            mode: TciMode::StabThenConv,
            sim_metric: SimMetric::Ncc,
            per_layer_enabled: [true; LEVELS],
            return_best: false,
        }
    }
}

impl TciConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what, reason| Err(Error::InvalidArgument { what, reason });
        if self.window < 2 {
            return bad("window size", format!("{} must be at least 2", self.window));
        }
        if self.k_max < 1 {
            return bad("k_max", "must be at least 1".into());
        }
        if !(self.delta_s >= 0.0) || !(self.delta_c >= 0.0) {
            return bad(
                "thresholds",
                format!("δ_s = {}, δ_c = {} must be non-negative", self.delta_s, self.delta_c),
            );
        }
        Ok(())
    }

    pub fn layer_enabled(&self, level: usize) -> bool {
        self.per_layer_enabled[level - 1]
    }

    /// Iteration cap at a level: `k_max`, or one when the level is disabled.
    pub fn iteration_cap(&self, level: usize) -> usize {
        if self.layer_enabled(level) {
            self.k_max
        } else {
            1
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Stability,
    Convergence,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Continue,
    Stop(Stage),
}

impl Decision {
    pub fn is_stop(self) -> bool {
        matches!(self, Decision::Stop(_))
    }
}

/// Outcome of one controller consultation plus the statistics it evaluated.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Assessment {
    pub decision: Decision,
    pub std: Option<f64>,
    pub delta: Option<f64>,
}

/// Recent similarity scores, oldest first.
#[derive(Clone, Debug, PartialEq)]
pub struct TciWindow {
    scores: VecDeque<f64>,
    capacity: usize,
}

impl TciWindow {
    pub fn new(capacity: usize) -> Self {
        TciWindow {
            scores: VecDeque::with_capacity(capacity + 1),
            capacity,
        }
    }

    pub fn from_scores(capacity: usize, scores: &[f64]) -> Self {
        let mut w = Self::new(capacity);
        for &s in scores {
            w.push(s);
        }
        w
    }

    /// Appends a score, evicting the oldest once more than `capacity` are held.
    pub fn push(&mut self, score: f64) {
        self.scores.push_back(score);
        if self.scores.len() > self.capacity {
            self.scores.pop_front();
        }
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.scores.len() >= self.capacity
    }

    pub fn last(&self) -> Option<f64> {
        self.scores.back().copied()
    }

    pub fn scores(&self) -> impl Iterator<Item = f64> + '_ {
        self.scores.iter().copied()
    }

    /// Population standard deviation of the held scores.
    pub fn std(&self) -> f64 {
        let (s1, s2) = self.scores.as_slices();
        let n = self.scores.len() as f64;
        if n == 0.0 {
            return 0.0;
        }
        let mean = (s1.iter().sum::<f64>() + s2.iter().sum::<f64>()) / n;
        let var = self.scores.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        math::sqrt(var)
    }
}

/// Stopping decision for the current score, taken before it enters the
/// window. `previous` is the score of the preceding iteration.
pub fn should_stop(window: &TciWindow, current: f64, previous: Option<f64>, cfg: &TciConfig) -> Assessment {
    let mut a = Assessment {
        decision: Decision::Continue,
        std: None,
        delta: None,
    };
    if window.len() < cfg.window {
        return a;
    }
    let stable = |a: &mut Assessment| {
        let eps = window.std();
        a.std = Some(eps);
        eps <= cfg.delta_s
    };
    let converged = |a: &mut Assessment| match previous {
        Some(p) => {
            let d = current - p;
            a.delta = Some(d);
            d <= cfg.delta_c
        }
        None => false,
    };
    a.decision = match cfg.mode {
        TciMode::ConvOnly => {
            if converged(&mut a) {
                Decision::Stop(Stage::Convergence)
            } else {
                Decision::Continue
            }
        }
        TciMode::StabOnly => {
            if stable(&mut a) {
                Decision::Stop(Stage::Stability)
            } else {
                Decision::Continue
            }
        }
        TciMode::StabThenConv => {
            if stable(&mut a) && converged(&mut a) {
                Decision::Stop(Stage::Convergence)
            } else {
                Decision::Continue
            }
        }
        TciMode::ConvThenStab => {
            if converged(&mut a) && stable(&mut a) {
                Decision::Stop(Stage::Stability)
            } else {
                Decision::Continue
            }
        }
    };
    a
}

/// Per-layer controller state: window plus the previous score.
#[derive(Clone, Debug)]
pub struct TciController {
    cfg: TciConfig,
    enabled: bool,
    window: TciWindow,
    previous: Option<f64>,
}

impl TciController {
    pub fn new(cfg: TciConfig, level: usize) -> Self {
        TciController {
            enabled: cfg.layer_enabled(level),
            window: TciWindow::new(cfg.window),
            previous: None,
            cfg,
        }
    }

    pub fn window(&self) -> &TciWindow {
        &self.window
    }

    /// Consults [`should_stop`] for `score` and, unless stopping, records it.
    pub fn observe(&mut self, score: f64) -> Assessment {
        let a = if self.enabled {
            should_stop(&self.window, score, self.previous, &self.cfg)
        } else {
            Assessment {
                decision: Decision::Continue,
                std: None,
                delta: None,
            }
        };
        if !a.decision.is_stop() {
            self.window.push(score);
            self.previous = Some(score);
        }
        a
    }
}

/// Replays a score sequence through a controller, returning the 1-based
/// iteration at which the layer ends and the stage that ended it (`None`
/// when the iteration cap was reached).
pub fn replay(scores: &[f64], cfg: &TciConfig, level: usize) -> (usize, Option<Stage>) {
    let cap = cfg.iteration_cap(level).min(scores.len());
    let mut ctl = TciController::new(*cfg, level);
    for (k, &s) in scores.iter().take(cap).enumerate() {
        if let Decision::Stop(stage) = ctl.observe(s).decision {
            return (k + 1, Some(stage));
        }
    }
    (cap, None)
}

/// Similarity oriented so that larger means more alike for every metric:
/// mean local NCC, or negated MAE / MSE.
pub fn similarity(fixed: &Tensor5, warped: &Tensor5, metric: SimMetric, patch_size: usize, eps: f64) -> Result<f64> {
    fixed.check_same_shape(warped, "similarity")?;
    let n = fixed.len() as f64;
    Ok(match metric {
        SimMetric::Ncc => losses::local_ncc_map(fixed, warped, patch_size, eps)?.sum() / n,
        SimMetric::Mae => -fixed.data().iter().zip(warped.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / n,
        SimMetric::Mse => -fixed.data().iter().zip(warped.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n,
    })
}
