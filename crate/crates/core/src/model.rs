//! The full registration network: shared encoder, four decoding layers of
//! iterated FERM increments under the TCI controller, and the training
//! step that ties them to the loss.

use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::encoder::{self, EncoderConfig, LEVELS, PYRAMID_DIVISOR};
use crate::error::{Error, Result};
use crate::ferm::{self, FermConfig};
use crate::kernels;
use crate::losses::{self, LossConfig};
use crate::params::{AdamConfig, Bound, ParamStore};
use crate::tci::{self, Decision, Stage, TciConfig, TciController};
use crate::tensor::Tensor5;
use crate::volume::{self, Volume};
use crate::warpfield::{self, DeformationField};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub encoder: EncoderConfig,
    pub ferm: FermConfig,
    pub tci: TciConfig,
    pub loss: LossConfig,
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.ferm.validate()?;
        self.tci.validate()?;
        self.loss.validate()
    }
}

/// Fresh parameters for every module, drawn from a seeded generator.
pub fn init_params(cfg: &NetworkConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    encoder::init_params(&mut store, &cfg.encoder, &mut rng)?;
    ferm::init_params(&mut store, &cfg.encoder, &cfg.ferm, &mut rng)?;
    Ok(store)
}

/// Produces one field increment at a decoding level from the (warped)
/// moving features and the fixed features.
pub trait IncrementEstimator {
    fn increment(&mut self, tape: &mut Tape, level: usize, moving: Var, fixed: Var) -> Result<Var>;
}

/// The learned estimator.
pub struct Ferm<'a> {
    pub params: &'a Bound,
    pub cfg: FermConfig,
}

impl IncrementEstimator for Ferm<'_> {
    fn increment(&mut self, tape: &mut Tape, level: usize, moving: Var, fixed: Var) -> Result<Var> {
        ferm::ferm_forward(tape, self.params, level, &self.cfg, moving, fixed).map(|(field, _)| field)
    }
}

/// One row of the iteration trace.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub layer: usize,
    pub iteration: usize,
    pub score: f64,
    pub std: Option<f64>,
    pub delta: Option<f64>,
    pub decision: Decision,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerOutcome {
    pub layer: usize,
    pub iterations: usize,
    /// Stage that ended the layer, `None` when the iteration cap did.
    pub stopped_by: Option<Stage>,
}

/// Full-resolution images the controller scores warps against.
pub struct ScoringImages<'a> {
    pub fixed: &'a Tensor5,
    pub moving: &'a Tensor5,
}

/// Switches for one decoding layer run.
#[derive(Clone, Copy, Debug)]
pub struct LayerSettings<'a> {
    pub tci: &'a TciConfig,
    pub loss: &'a LossConfig,
    /// Cut the gradient between consecutive iterations.
    pub detach_iterations: bool,
}

fn score(images: &ScoringImages<'_>, field: &Tensor5, level: usize, s: &LayerSettings<'_>) -> Result<f64> {
    let full = kernels::upsample_trilinear(field, 1 << level)?.scaled((1usize << level) as f64);
    let warped = kernels::warp(images.moving, &full)?;
    tci::similarity(images.fixed, &warped, s.tci.sim_metric, s.loss.patch_size, s.loss.variance_floor)
}

/// Iterates one decoding layer until the controller stops it or the cap is
/// reached. `incoming` is the previous layer's field already brought to
/// this level's grid (absent at the coarsest level). Returns the final
/// field upsampled by two, ready for the next finer layer.
pub fn run_layer(
    tape: &mut Tape,
    estimator: &mut dyn IncrementEstimator,
    level: usize,
    fixed_feat: Var,
    moving_feat: Var,
    incoming: Option<Var>,
    images: &ScoringImages<'_>,
    settings: &LayerSettings<'_>,
    trace: &mut Vec<TraceRow>,
) -> Result<(Var, LayerOutcome)> {
    if !(1..=LEVELS).contains(&level) {
        return Err(Error::InvalidArgument {
            what: "decoding level",
            reason: alloc::format!("{level} is outside 1..={LEVELS}"),
        });
    }
    let cap = settings.tci.iteration_cap(level);
    let mut ctl = TciController::new(*settings.tci, level);
    let mut prev = incoming;
    let mut best: Option<(f64, Var)> = None;
    let mut recent: Vec<(f64, Var)> = Vec::new();
    let mut outcome = LayerOutcome {
        layer: level,
        iterations: 0,
        stopped_by: None,
    };
    for k in 1..=cap {
        let warped_feat = match prev {
            Some(f) => tape.warp(moving_feat, f)?,
            None => moving_feat,
        };
        let inc = estimator.increment(tape, level, warped_feat, fixed_feat)?;
        let cur = match prev {
            Some(f) => warpfield::compose_var(tape, f, inc)?,
            None => inc,
        };
        let s = score(images, tape.value(cur), level, settings)?;
        let a = ctl.observe(s);
        trace.push(TraceRow {
            layer: level,
            iteration: k,
            score: s,
            std: a.std,
            delta: a.delta,
            decision: a.decision,
        });
        outcome.iterations = k;
        recent.push((s, cur));
        if recent.len() > settings.tci.window + 1 {
            recent.remove(0);
        }
        prev = Some(cur);
        if let Decision::Stop(stage) = a.decision {
            outcome.stopped_by = Some(stage);
            break;
        }
        if k < cap && settings.detach_iterations {
            prev = Some(tape.detach(cur));
        }
    }
    let mut last = recent.last().map(|r| r.1).expect("at least one iteration");
    if settings.tci.return_best {
        for &(s, v) in &recent {
            if best.map_or(true, |(b, _)| s > b) {
                best = Some((s, v));
            }
        }
        last = best.map(|b| b.1).unwrap_or(last);
    }
    Ok((warpfield::upsample_field_var(tape, last, 2)?, outcome))
}

/// Result of the decoder on one image pair.
pub struct ForwardOutput {
    /// Full-resolution displacement field on the tape.
    pub field: Var,
    pub trace: Vec<TraceRow>,
    pub layers: Vec<LayerOutcome>,
}

/// Encodes both images and runs layers 4 → 1. Images are (1, 1, D, H, W)
/// with dims divisible by 16.
pub fn forward(
    tape: &mut Tape,
    params: &Bound,
    cfg: &NetworkConfig,
    fixed: &Tensor5,
    moving: &Tensor5,
    detach_iterations: bool,
) -> Result<ForwardOutput> {
    fixed.check_same_shape(moving, "forward")?;
    let f_img = tape.constant(fixed.clone());
    let m_img = tape.constant(moving.clone());
    let fp = encoder::encode(tape, params, f_img)?;
    let mp = encoder::encode(tape, params, m_img)?;
    let images = ScoringImages { fixed, moving };
    let settings = LayerSettings {
        tci: &cfg.tci,
        loss: &cfg.loss,
        detach_iterations,
    };
    let mut est = Ferm {
        params,
        cfg: cfg.ferm,
    };
    let mut trace = Vec::new();
    let mut layers = Vec::with_capacity(LEVELS);
    let mut incoming = None;
    for level in (1..=LEVELS).rev() {
        let (next, outcome) = run_layer(
            tape,
            &mut est,
            level,
            fp.level(level),
            mp.level(level),
            incoming,
            &images,
            &settings,
            &mut trace,
        )?;
        layers.push(outcome);
        incoming = Some(next);
    }
    Ok(ForwardOutput {
        field: incoming.expect("four layers ran"),
        trace,
        layers,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub total: f64,
    pub ncc: f64,
    pub smooth: f64,
    pub trace: Vec<TraceRow>,
    pub layers: Vec<LayerOutcome>,
}

/// One Adam update on a single image pair. A non-finite loss leaves the
/// parameters untouched and returns [`Error::NonFinite`].
pub fn train_step(
    store: &mut ParamStore,
    cfg: &NetworkConfig,
    adam: &AdamConfig,
    fixed: &Tensor5,
    moving: &Tensor5,
    detach_iterations: bool,
) -> Result<StepReport> {
    let mut tape = Tape::new();
    let params = store.bind(&mut tape);
    let out = forward(&mut tape, &params, cfg, fixed, moving, detach_iterations)?;
    let f_img = tape.constant(fixed.clone());
    let m_img = tape.constant(moving.clone());
    let warped = tape.warp(m_img, out.field)?;
    let terms = losses::total_loss(&mut tape, f_img, warped, out.field, &cfg.loss)?;
    let value = |v: Var| tape.value(v).data()[0];
    let report = StepReport {
        total: value(terms.total),
        ncc: value(terms.ncc),
        smooth: value(terms.smooth),
        trace: out.trace,
        layers: out.layers,
    };
    if !report.total.is_finite() {
        return Err(Error::NonFinite {
            context: alloc::format!("training loss ({})", report.total),
        });
    }
    tape.backward(terms.total)?;
    store.absorb_grads(&tape, &params)?;
    store.adam_step(adam)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Registration {
    /// Full-resolution field on the caller's grid.
    pub field: DeformationField,
    pub warped: Volume,
    pub trace: Vec<TraceRow>,
    pub layers: Vec<LayerOutcome>,
}

/// Registers `moving` onto `fixed`. Inputs are zero-padded to a multiple
/// of 16 for the network and the field is cropped back afterwards.
pub fn register(store: &ParamStore, cfg: &NetworkConfig, fixed: &Volume, moving: &Volume) -> Result<Registration> {
    fixed.check_same_dims(moving)?;
    let dims = fixed.dims();
    let pf = fixed.pad_to_multiple(PYRAMID_DIVISOR).to_tensor();
    let pm = moving.pad_to_multiple(PYRAMID_DIVISOR).to_tensor();
    let mut tape = Tape::new();
    let params = store.bind(&mut tape);
    let out = forward(&mut tape, &params, cfg, &pf, &pm, false)?;
    let cropped = volume::crop_tensor(tape.value(out.field), dims)?;
    let field = DeformationField::new(cropped, 0)?;
    let warped = Volume::from_tensor(&warpfield::warp(&moving.to_tensor(), &field)?, moving.spacing())?;
    Ok(Registration {
        field,
        warped,
        trace: out.trace,
        layers: out.layers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{make_pair, SynthSpec};
    use crate::tensor::Shape5;

    struct Zero;

    impl IncrementEstimator for Zero {
        fn increment(&mut self, tape: &mut Tape, _level: usize, moving: Var, _fixed: Var) -> Result<Var> {
            let s = tape.shape(moving).with_channels(3);
            Ok(tape.constant(Tensor5::zeros(s)))
        }
    }

    struct Count(usize, Tensor5);

    impl IncrementEstimator for Count {
        fn increment(&mut self, tape: &mut Tape, _level: usize, _m: Var, _f: Var) -> Result<Var> {
            self.0 += 1;
            Ok(tape.constant(self.1.clone()))
        }
    }

    fn images() -> (Tensor5, Tensor5) {
        let p = make_pair(&SynthSpec {
            grid_size: 16,
            num_blobs: 4,
            seed: 9,
            ..Default::default()
        })
        .unwrap();
        (p.fixed.to_tensor(), p.moving.to_tensor())
    }

    fn run(est: &mut dyn IncrementEstimator, tci: TciConfig, level: usize) -> (LayerOutcome, Vec<TraceRow>) {
        let (f, m) = images();
        let n = 16 >> level;
        let mut tape = Tape::new();
        let feat = tape.constant(Tensor5::zeros(Shape5::new(1, 2, n, n, n)));
        let images = ScoringImages { fixed: &f, moving: &m };
        let loss = LossConfig {
            patch_size: 5,
            ..Default::default()
        };
        let settings = LayerSettings {
            tci: &tci,
            loss: &loss,
            detach_iterations: false,
        };
        let mut trace = Vec::new();
        let (next, o) = run_layer(&mut tape, est, level, feat, feat, None, &images, &settings, &mut trace).unwrap();
        assert_eq!(tape.shape(next).spatial(), [2 * n; 3]);
        (o, trace)
    }

    #[test]
    fn zero_increments_stop_after_window_fills() {
        let (o, trace) = run(&mut Zero, TciConfig::default(), 2);
        assert_eq!(o.iterations, 4);
        assert_eq!(o.stopped_by, Some(Stage::Convergence));
        assert_eq!(trace.len(), 4);
        assert!(trace.iter().all(|r| r.score == trace[0].score));
        assert!(trace[..3].iter().all(|r| r.decision == Decision::Continue));
    }

    #[test]
    fn k_max_one_runs_once() {
        let cfg = TciConfig {
            k_max: 1,
            ..Default::default()
        };
        let mut est = Count(0, Tensor5::zeros(Shape5::new(1, 3, 4, 4, 4)));
        let (o, trace) = run(&mut est, cfg, 2);
        assert_eq!((est.0, o.iterations, o.stopped_by), (1, 1, None));
        assert_eq!(trace[0].std, None);
    }

    #[test]
    fn disabled_layer_runs_once() {
        let mut cfg = TciConfig::default();
        cfg.per_layer_enabled[1] = false;
        let mut est = Count(0, Tensor5::zeros(Shape5::new(1, 3, 4, 4, 4)));
        let (o, _) = run(&mut est, cfg, 2);
        assert_eq!((est.0, o.iterations), (1, 1));
    }

    #[test]
    fn untrained_network_is_identity() {
        let cfg = NetworkConfig::default();
        let store = init_params(&cfg, 1).unwrap();
        let p = make_pair(&SynthSpec {
            grid_size: 16,
            num_blobs: 4,
            seed: 2,
            ..Default::default()
        })
        .unwrap();
        let cfg = NetworkConfig {
            loss: LossConfig {
                patch_size: 5,
                ..Default::default()
            },
            ..cfg
        };
        let r = register(&store, &cfg, &p.fixed, &p.moving).unwrap();
        assert_eq!(r.warped, p.moving);
        assert_eq!(r.field.max_magnitude(), 0.0);
        assert!(r.layers.iter().all(|l| l.iterations == 4));
    }

    #[test]
    fn train_step_moves_parameters() {
        let cfg = NetworkConfig {
            loss: LossConfig {
                patch_size: 5,
                ..Default::default()
            },
            ..Default::default()
        };
        let mut store = init_params(&cfg, 3).unwrap();
        let (f, m) = images();
        let before = store.value("ferm.l1.c4.weight").unwrap().clone();
        let r = train_step(&mut store, &cfg, &AdamConfig::default(), &f, &m, false).unwrap();
        assert!(r.total.is_finite());
        assert_eq!(r.smooth, 0.0);
        assert_ne!(store.value("ferm.l1.c4.weight").unwrap(), &before);
        let enc = store.value("encoder.block1.weight").unwrap().clone();
        train_step(&mut store, &cfg, &AdamConfig::default(), &f, &m, false).unwrap();
        assert_ne!(store.value("encoder.block1.weight").unwrap(), &enc);
    }
}
