//! Training objective: local normalised cross-correlation plus a
//! forward-difference smoothness penalty on the displacement field.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::kernels;
use crate::math;
use crate::tensor::Tensor5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Edge length `n` of the cubic correlation window.
    pub patch_size: usize,
    /// Weight of the smoothness term.
    pub lambda: f64,
    /// Added under the square root of the correlation denominator.
    pub variance_floor: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            patch_size: 9,
            lambda: 1.0,
            variance_floor: 1e-5,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size < 3 || self.patch_size % 2 == 0 {
            return Err(Error::InvalidArgument {
                what: "patch size",
                reason: alloc::format!("{} must be odd and at least 3", self.patch_size),
            });
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::InvalidArgument {
                what: "lambda",
                reason: alloc::format!("{} must be non-negative", self.lambda),
            });
        }
        if !(self.variance_floor > 0.0) {
            return Err(Error::InvalidArgument {
                what: "variance floor",
                reason: alloc::format!("{} must be positive", self.variance_floor),
            });
        }
        Ok(())
    }
}

fn check_window(t: &Tensor5, n: usize) -> Result<()> {
    let dims = t.shape().spatial();
    if dims.iter().any(|&d| d < n) {
        return Err(Error::InvalidArgument {
            what: "patch size",
            reason: alloc::format!("window {n} exceeds spatial dims {dims:?}"),
        });
    }
    Ok(())
}

/// Per-voxel local correlation of two images over `n`³ windows. Windows are
/// truncated at the border and their statistics use the in-volume count.
pub fn local_ncc_map(fixed: &Tensor5, warped: &Tensor5, n: usize, eps: f64) -> Result<Tensor5> {
    fixed.check_same_shape(warped, "local_ncc")?;
    check_window(fixed, n)?;
    let prod = |a: &Tensor5, b: &Tensor5| {
        Tensor5::from_vec(a.shape(), a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect())
            .expect("same shape")
    };
    let sf = kernels::box_sum(fixed, n);
    let sm = kernels::box_sum(warped, n);
    let sff = kernels::box_sum(&prod(fixed, fixed), n);
    let smm = kernels::box_sum(&prod(warped, warped), n);
    let sfm = kernels::box_sum(&prod(fixed, warped), n);
    let cnt = kernels::box_counts(fixed.shape(), n);
    let mut out = Tensor5::zeros(fixed.shape());
    for i in 0..out.len() {
        let c = cnt.data()[i];
        let (f, m) = (sf.data()[i], sm.data()[i]);
        let cross = sfm.data()[i] - f * m / c;
        let vf = sff.data()[i] - f * f / c;
        let vm = smm.data()[i] - m * m / c;
        out.data_mut()[i] = cross / math::sqrt(vf * vm + eps);
    }
    Ok(out)
}

/// Negative sum of the local correlation map, built from tape primitives so
/// it is differentiable with respect to both images.
pub fn ncc_loss(tape: &mut Tape, fixed: Var, warped: Var, cfg: &LossConfig) -> Result<Var> {
    let fs = tape.shape(fixed);
    if fs != tape.shape(warped) {
        return Err(Error::ShapeMismatch {
            op: "ncc_loss",
            left: fs,
            right: tape.shape(warped),
        });
    }
    check_window(tape.value(fixed), cfg.patch_size)?;
    let n = cfg.patch_size;
    let inv_cnt = tape.constant(kernels::box_counts(fs, n).map(|c| 1.0 / c));
    let ff = tape.mul(fixed, fixed)?;
    let mm = tape.mul(warped, warped)?;
    let fm = tape.mul(fixed, warped)?;
    let sf = tape.box_sum(fixed, n);
    let sm = tape.box_sum(warped, n);
    let sff = tape.box_sum(ff, n);
    let smm = tape.box_sum(mm, n);
    let sfm = tape.box_sum(fm, n);

    // cross = Sfm - Sf·Sm/count, var = Sxx - Sx²/count
    let sf_sm = tape.mul(sf, sm)?;
    let sf_sm = tape.mul(sf_sm, inv_cnt)?;
    let cross = tape.sub(sfm, sf_sm)?;
    let sf2 = tape.mul(sf, sf)?;
    let sf2 = tape.mul(sf2, inv_cnt)?;
    let var_f = tape.sub(sff, sf2)?;
    let sm2 = tape.mul(sm, sm)?;
    let sm2 = tape.mul(sm2, inv_cnt)?;
    let var_m = tape.sub(smm, sm2)?;

    let denom = tape.mul(var_f, var_m)?;
    let denom = tape.add_scalar(denom, cfg.variance_floor);
    let denom = tape.sqrt(denom);
    let cc = tape.div(cross, denom)?;
    let total = tape.sum(cc);
    Ok(tape.scale(total, -1.0))
}

/// Sum over voxels of the squared forward-difference gradient of every
/// displacement channel.
pub fn smooth_loss(tape: &mut Tape, field: Var) -> Result<Var> {
    let s = tape.shape(field);
    if s.spatial().iter().any(|&d| d < 2) {
        return Err(Error::InvalidShape {
            op: "smooth_loss",
            reason: alloc::format!("every spatial dim must be at least 2, got {s}"),
        });
    }
    Ok(tape.smooth_penalty(field))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LossTerms {
    pub total: Var,
    pub ncc: Var,
    pub smooth: Var,
}

/// `ncc_loss + λ · smooth_loss`.
pub fn total_loss(tape: &mut Tape, fixed: Var, warped: Var, field: Var, cfg: &LossConfig) -> Result<LossTerms> {
    cfg.validate()?;
    let ncc = ncc_loss(tape, fixed, warped, cfg)?;
    let smooth = smooth_loss(tape, field)?;
    let weighted = tape.scale(smooth, cfg.lambda);
    let total = tape.add(ncc, weighted)?;
    Ok(LossTerms { total, ncc, smooth })
}
