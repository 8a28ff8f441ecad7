//! Feature-enhanced residual module: fusion block (FFB), squeeze-excitation
//! block (SEB) and deformation-field estimator (DeF), run once per decoder
//! iteration.

use alloc::format;
use alloc::string::String;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::encoder::{EncoderConfig, LEVELS};
use crate::error::{Error, Result};
use crate::params::{fan_in_uniform, Bound, ParamStore};
use crate::tensor::{Shape5, Tensor5};
use crate::LEAKY_SLOPE;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FermConfig {
    /// SEB bottleneck reduction ratio `r`.
    pub reduction: usize,
    /// Second convolution plus residual connection in the fusion block.
    pub use_ffb: bool,
    /// Channel re-weighting; when off the weights are fixed at one.
    pub use_seb: bool,
}

impl Default for FermConfig {
    fn default() -> Self {
        FermConfig {
            reduction: 16,
            use_ffb: true,
            use_seb: true,
        }
    }
}

impl FermConfig {
    pub fn validate(&self) -> Result<()> {
        if self.reduction == 0 {
            return Err(Error::InvalidArgument {
                what: "reduction ratio",
                reason: "must be at least 1".into(),
            });
        }
        Ok(())
    }

    pub fn hidden_width(&self, channels: usize) -> usize {
        (channels / self.reduction).max(1)
    }
}

/// Channel count of the C3 output.
pub fn def_mid_channels(channels: usize) -> usize {
    channels.div_ceil(2)
}

fn path(level: usize, name: &str) -> String {
    format!("ferm.l{level}.{name}")
}

/// Registers the FERM parameters of every decoding level. C4 starts at zero
/// so the first estimated field is the identity.
pub fn init_params<R: Rng + ?Sized>(
    store: &mut ParamStore,
    enc: &EncoderConfig,
    cfg: &FermConfig,
    rng: &mut R,
) -> Result<()> {
    cfg.validate()?;
    for level in 1..=LEVELS {
        let c = enc.level_channels(level);
        let mid = def_mid_channels(c);
        let hidden = cfg.hidden_width(c);
        store.insert(path(level, "c1.weight"), fan_in_uniform(Shape5::new(c, 2 * c, 3, 3, 3), rng))?;
        store.insert(path(level, "c1.bias"), Tensor5::zeros(Shape5::new(c, 1, 1, 1, 1)))?;
        if cfg.use_ffb {
            store.insert(path(level, "c2.weight"), fan_in_uniform(Shape5::new(c, c, 3, 3, 3), rng))?;
            store.insert(path(level, "c2.bias"), Tensor5::zeros(Shape5::new(c, 1, 1, 1, 1)))?;
        }
        if cfg.use_seb {
            store.insert(path(level, "seb.w1"), fan_in_uniform(Shape5::new(hidden, c, 1, 1, 1), rng))?;
            store.insert(path(level, "seb.b1"), Tensor5::zeros(Shape5::new(hidden, 1, 1, 1, 1)))?;
            store.insert(path(level, "seb.w2"), fan_in_uniform(Shape5::new(c, hidden, 1, 1, 1), rng))?;
            store.insert(path(level, "seb.b2"), Tensor5::zeros(Shape5::new(c, 1, 1, 1, 1)))?;
        }
        store.insert(path(level, "c3.weight"), fan_in_uniform(Shape5::new(mid, c, 3, 3, 3), rng))?;
        store.insert(path(level, "c3.bias"), Tensor5::zeros(Shape5::new(mid, 1, 1, 1, 1)))?;
        store.insert(path(level, "c4.weight"), Tensor5::zeros(Shape5::new(3, mid, 3, 3, 3)))?;
        store.insert(path(level, "c4.bias"), Tensor5::zeros(Shape5::new(3, 1, 1, 1, 1)))?;
    }
    Ok(())
}

fn conv(tape: &mut Tape, p: &Bound, level: usize, name: &str, x: Var) -> Result<Var> {
    let w = p.get(&path(level, &format!("{name}.weight")))?;
    let b = p.get(&path(level, &format!("{name}.bias")))?;
    tape.conv3d(x, w, Some(b), 1, 1)
}

/// Fuses the (warped) moving and fixed features of one level:
/// `h = γ(C1(|M, F|))`, `R = γ(C2(h) + h)`. With the block ablated only
/// `h` is kept.
pub fn ffb(tape: &mut Tape, p: &Bound, level: usize, cfg: &FermConfig, moving: Var, fixed: Var) -> Result<Var> {
    let (ms, fs) = (tape.shape(moving), tape.shape(fixed));
    if ms != fs {
        return Err(Error::ShapeMismatch {
            op: "ffb",
            left: ms,
            right: fs,
        });
    }
    let cat = tape.concat_channels(moving, fixed)?;
    let c1 = conv(tape, p, level, "c1", cat)?;
    let h = tape.leaky_relu(c1, LEAKY_SLOPE);
    if !cfg.use_ffb {
        return Ok(h);
    }
    let c2 = conv(tape, p, level, "c2", h)?;
    let sum = tape.add(c2, h)?;
    Ok(tape.leaky_relu(sum, LEAKY_SLOPE))
}

/// Squeeze-excitation: `Z = mean(R)`, `S = σ(W2 γ(W1 Z))`, `O = R * S`.
/// Returns `(O, S)`; `S` has shape (1, C, 1, 1, 1).
pub fn seb(tape: &mut Tape, p: &Bound, level: usize, cfg: &FermConfig, r: Var) -> Result<(Var, Var)> {
    let s = tape.shape(r);
    if !cfg.use_seb {
        let ones = tape.constant(Tensor5::full(Shape5::new(s.batch, s.channels, 1, 1, 1), 1.0));
        return Ok((r, ones));
    }
    let z = tape.global_avg_pool(r);
    let w1 = p.get(&path(level, "seb.w1"))?;
    let b1 = p.get(&path(level, "seb.b1"))?;
    let w2 = p.get(&path(level, "seb.w2"))?;
    let b2 = p.get(&path(level, "seb.b2"))?;
    let hidden = tape.linear(z, w1, Some(b1))?;
    let hidden = tape.leaky_relu(hidden, LEAKY_SLOPE);
    let logits = tape.linear(hidden, w2, Some(b2))?;
    let weights = tape.sigmoid(logits);
    let o = tape.channel_scale(r, weights)?;
    Ok((o, weights))
}

/// `φ = C4(C3(O))`, a 3-channel field at the input's resolution.
pub fn def_estimate(tape: &mut Tape, p: &Bound, level: usize, o: Var) -> Result<Var> {
    let mid = conv(tape, p, level, "c3", o)?;
    conv(tape, p, level, "c4", mid)
}

/// FFB → SEB → DeF. Returns the field increment and the channel weights.
pub fn ferm_forward(
    tape: &mut Tape,
    p: &Bound,
    level: usize,
    cfg: &FermConfig,
    moving: Var,
    fixed: Var,
) -> Result<(Var, Var)> {
    let r = ffb(tape, p, level, cfg, moving, fixed)?;
    let (o, s) = seb(tape, p, level, cfg, r)?;
    let field = def_estimate(tape, p, level, o)?;
    Ok((field, s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store(cfg: &FermConfig) -> ParamStore {
        let mut s = ParamStore::new();
        init_params(&mut s, &EncoderConfig::default(), cfg, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        s
    }

    fn feat(c: usize, n: usize, seed: u64) -> Tensor5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor5::from_fn(Shape5::new(1, c, n, n, n), |_, _, _, _, _| rng.gen::<f64>() * 2.0 - 1.0)
    }

    #[test]
    fn hidden_width_never_zero() {
        let cfg = FermConfig::default();
        assert_eq!(cfg.hidden_width(8), 1);
        assert_eq!(cfg.hidden_width(16), 1);
        assert_eq!(cfg.hidden_width(64), 4);
        assert_eq!(def_mid_channels(7), 4);
    }

    #[test]
    fn shapes_and_identity_start() {
        let cfg = FermConfig::default();
        let s = store(&cfg);
        let mut tape = Tape::new();
        let p = s.bind(&mut tape);
        let m = tape.constant(feat(16, 4, 1));
        let f = tape.constant(feat(16, 4, 2));
        let (field, w) = ferm_forward(&mut tape, &p, 3, &cfg, m, f).unwrap();
        assert_eq!(tape.shape(field), Shape5::new(1, 3, 4, 4, 4));
        assert!(tape.value(field).data().iter().all(|&v| v == 0.0));
        assert!(tape.value(w).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let cfg = FermConfig::default();
        let s = store(&cfg);
        let mut tape = Tape::new();
        let p = s.bind(&mut tape);
        let m = tape.constant(feat(16, 4, 1));
        let f = tape.constant(feat(8, 4, 2));
        assert!(ffb(&mut tape, &p, 3, &cfg, m, f).is_err());
    }
}
