//! Weight-sharing four-level convolutional encoder.
//!
//! Each block is conv(3³) → LeakyReLU → 2× average pooling, so level `l`
//! sits at `1 / 2^l` of the input resolution.

use alloc::format;
use alloc::string::String;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{fan_in_uniform, Bound, ParamStore};
use crate::tensor::{Shape5, Tensor5};
use crate::LEAKY_SLOPE;

pub const LEVELS: usize = 4;
/// Total downsampling from the input to the coarsest level.
pub const PYRAMID_DIVISOR: usize = 1 << LEVELS;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    /// Output channels of blocks 1..=4.
    pub channels: [usize; LEVELS],
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig { channels: [8, 16, 16, 16] }
    }
}

impl EncoderConfig {
    pub fn base_channels(&self) -> usize {
        self.channels[0]
    }

    /// Channel count at level `l` (1-based).
    pub fn level_channels(&self, level: usize) -> usize {
        self.channels[level - 1]
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.contains(&0) {
            return Err(Error::InvalidArgument {
                what: "encoder channels",
                reason: format!("{:?} contains a zero width", self.channels),
            });
        }
        Ok(())
    }
}

fn weight_path(level: usize) -> String {
    format!("encoder.block{level}.weight")
}

fn bias_path(level: usize) -> String {
    format!("encoder.block{level}.bias")
}

/// Registers one encoder; fixed and moving images share it.
pub fn init_params<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &EncoderConfig, rng: &mut R) -> Result<()> {
    cfg.validate()?;
    let mut c_in = 1;
    for level in 1..=LEVELS {
        let c_out = cfg.level_channels(level);
        store.insert(weight_path(level), fan_in_uniform(Shape5::new(c_out, c_in, 3, 3, 3), rng))?;
        store.insert(bias_path(level), Tensor5::zeros(Shape5::new(c_out, 1, 1, 1, 1)))?;
        c_in = c_out;
    }
    Ok(())
}

/// Per-level feature maps, index 0 holding level 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeaturePyramid {
    levels: [Var; LEVELS],
}

impl FeaturePyramid {
    /// Feature map at level `l` (1-based).
    pub fn level(&self, l: usize) -> Var {
        self.levels[l - 1]
    }

    pub fn levels(&self) -> &[Var; LEVELS] {
        &self.levels
    }
}

pub fn check_divisible(dims: [usize; 3]) -> Result<()> {
    if dims.iter().any(|d| *d == 0 || d % PYRAMID_DIVISOR != 0) {
        return Err(Error::NotDivisible {
            op: "encode",
            dims,
            divisor: PYRAMID_DIVISOR,
        });
    }
    Ok(())
}

/// Runs the encoder on a (1, 1, D, H, W) image already on the tape.
pub fn encode(tape: &mut Tape, params: &Bound, image: Var) -> Result<FeaturePyramid> {
    let s = tape.shape(image);
    if s.channels != 1 {
        return Err(Error::InvalidShape {
            op: "encode",
            reason: format!("expected a single-channel image, got {s}"),
        });
    }
    check_divisible(s.spatial())?;
    let mut x = image;
    let mut levels = [image; LEVELS];
    for (i, slot) in levels.iter_mut().enumerate() {
        let level = i + 1;
        let w = params.get(&weight_path(level))?;
        let b = params.get(&bias_path(level))?;
        let conv = tape.conv3d(x, w, Some(b), 1, 1)?;
        let act = tape.leaky_relu(conv, LEAKY_SLOPE);
        x = tape.avg_pool3d(act, 2)?;
        *slot = x;
    }
    Ok(FeaturePyramid { levels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (ParamStore, EncoderConfig) {
        let cfg = EncoderConfig::default();
        let mut store = ParamStore::new();
        init_params(&mut store, &cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        (store, cfg)
    }

    fn image(n: usize) -> Tensor5 {
        Tensor5::from_fn(Shape5::new(1, 1, n, n, n), |_, _, z, y, x| ((z * 13 + y * 7 + x * 3) % 11) as f64 / 10.0)
    }

    #[test]
    fn pyramid_shapes_for_32_cube() {
        let (store, _) = setup();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let img = tape.constant(image(32));
        let pyr = encode(&mut tape, &p, img).unwrap();
        let expect = [(8, 16), (16, 8), (16, 4), (16, 2)];
        for (l, (c, n)) in (1..=4).zip(expect) {
            assert_eq!(tape.shape(pyr.level(l)), Shape5::new(1, c, n, n, n));
        }
    }

    #[test]
    fn rejects_indivisible_input() {
        let (store, _) = setup();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let img = tape.constant(Tensor5::zeros(Shape5::new(1, 1, 24, 32, 32)));
        let err = encode(&mut tape, &p, img).unwrap_err();
        assert!(matches!(err, Error::NotDivisible { divisor: 16, .. }));
        assert!(alloc::format!("{err}").contains("pad"));
    }

    #[test]
    fn one_encoder_copy_in_the_store() {
        let (store, _) = setup();
        assert_eq!(store.paths().filter(|p| p.starts_with("encoder.")).count(), 8);
    }

    #[test]
    fn deterministic_and_weight_shared() {
        let (store, _) = setup();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let a = tape.constant(image(16));
        let b = tape.constant(image(16));
        let pa = encode(&mut tape, &p, a).unwrap();
        let pb = encode(&mut tape, &p, b).unwrap();
        for l in 1..=4 {
            assert_eq!(tape.value(pa.level(l)), tape.value(pb.level(l)));
        }
    }
}
