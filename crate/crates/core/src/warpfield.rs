//! Displacement fields: spatial-transformer warping, composition,
//! resolution changes and folding statistics.
//!
//! Fields hold (dz, dy, dx) in voxels of their own grid. `scale_level`
//! counts halvings relative to the full-resolution image, so level 0 is
//! full resolution and a level-`l` voxel spans `2^l` image voxels.

use alloc::vec::Vec;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::kernels;
use crate::math;
use crate::tensor::{Shape5, Tensor5};
use crate::volume::LabelVolume;

#[derive(Clone, Debug, PartialEq)]
pub struct DeformationField {
    displacements: Tensor5,
    scale_level: u32,
}

impl DeformationField {
    pub fn new(displacements: Tensor5, scale_level: u32) -> Result<Self> {
        let s = displacements.shape();
        if s.channels != 3 {
            return Err(Error::InvalidShape {
                op: "DeformationField",
                reason: alloc::format!("expected 3 displacement channels, got {s}"),
            });
        }
        if !displacements.is_finite() {
            return Err(Error::NonFinite {
                context: "deformation field".into(),
            });
        }
        Ok(DeformationField {
            displacements,
            scale_level,
        })
    }

    pub fn zeros(dims: [usize; 3], scale_level: u32) -> Self {
        DeformationField {
            displacements: Tensor5::zeros(Shape5::new(1, 3, dims[0], dims[1], dims[2])),
            scale_level,
        }
    }

    /// Same displacement at every voxel.
    pub fn constant(dims: [usize; 3], d: [f64; 3], scale_level: u32) -> Self {
        let shape = Shape5::new(1, 3, dims[0], dims[1], dims[2]);
        DeformationField {
            displacements: Tensor5::from_fn(shape, |_, c, _, _, _| d[c]),
            scale_level,
        }
    }

    pub fn displacements(&self) -> &Tensor5 {
        &self.displacements
    }

    pub fn into_displacements(self) -> Tensor5 {
        self.displacements
    }

    pub fn scale_level(&self) -> u32 {
        self.scale_level
    }

    pub fn dims(&self) -> [usize; 3] {
        self.displacements.shape().spatial()
    }

    pub fn max_magnitude(&self) -> f64 {
        let s = self.displacements.shape();
        let mut best = 0.0f64;
        for b in 0..s.batch {
            for v in 0..s.voxels() {
                let m: f64 = (0..3)
                    .map(|c| {
                        let d = self.displacements.channel(b, c)[v];
                        d * d
                    })
                    .sum();
                best = best.max(math::sqrt(m));
            }
        }
        best
    }

    fn check_compatible(&self, other: &DeformationField, op: &'static str) -> Result<()> {
        if self.displacements.shape() != other.displacements.shape() || self.scale_level != other.scale_level {
            return Err(Error::ShapeMismatch {
                op,
                left: self.displacements.shape(),
                right: other.displacements.shape(),
            });
        }
        Ok(())
    }
}

/// `out(x) = input(x + u(x))`, trilinear with edge clamping.
pub fn warp(input: &Tensor5, field: &DeformationField) -> Result<Tensor5> {
    kernels::warp(input, &field.displacements)
}

/// Nearest-neighbour variant of [`warp`] for label volumes.
pub fn warp_labels(labels: &LabelVolume, field: &DeformationField) -> Result<LabelVolume> {
    let dims = labels.dims();
    let fs = field.displacements.shape();
    if fs.spatial() != dims || fs.batch != 1 {
        return Err(Error::ShapeMismatch {
            op: "warp_labels",
            left: Shape5::new(1, 1, dims[0], dims[1], dims[2]),
            right: fs,
        });
    }
    let u = &field.displacements;
    let nearest = |p: f64, n: usize| (math::round(p).clamp(0.0, (n - 1) as f64)) as usize;
    let mut out = Vec::with_capacity(labels.labels().len());
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                let sz = nearest(z as f64 + u.at(0, 0, z, y, x), dims[0]);
                let sy = nearest(y as f64 + u.at(0, 1, z, y, x), dims[1]);
                let sx = nearest(x as f64 + u.at(0, 2, z, y, x), dims[2]);
                out.push(labels.at(sz, sy, sx));
            }
        }
    }
    LabelVolume::new(dims, labels.spacing(), out)
}

/// Accumulates an increment onto an existing field:
/// `out(x) = prev(x + new(x)) + new(x)`.
pub fn compose(prev: &DeformationField, new: &DeformationField) -> Result<DeformationField> {
    prev.check_compatible(new, "compose")?;
    let mut out = kernels::warp(&prev.displacements, &new.displacements)?;
    for (o, n) in out.data_mut().iter_mut().zip(new.displacements.data()) {
        *o += n;
    }
    Ok(DeformationField {
        displacements: out,
        scale_level: new.scale_level,
    })
}

/// Fixed-point estimate of the inverse field, `v(x) = -u(x + v(x))`, so
/// that `compose(field, inverse)` is close to zero for smooth fields.
pub fn approximate_inverse(field: &DeformationField, iterations: usize) -> Result<DeformationField> {
    let mut v = field.displacements.scaled(-1.0);
    for _ in 1..iterations {
        v = kernels::warp(&field.displacements, &v)?.scaled(-1.0);
    }
    Ok(DeformationField {
        displacements: v,
        scale_level: field.scale_level,
    })
}

fn level_drop(factor: usize) -> Result<u32> {
    if factor == 0 || !factor.is_power_of_two() {
        return Err(Error::InvalidArgument {
            what: "field upsample factor",
            reason: alloc::format!("{factor} is not a positive power of two"),
        });
    }
    Ok(factor.trailing_zeros())
}

/// Trilinear upsampling with displacement values rescaled into the finer
/// grid's voxel units.
pub fn upsample_field(field: &DeformationField, factor: usize) -> Result<DeformationField> {
    let drop = level_drop(factor)?;
    let up = kernels::upsample_trilinear(&field.displacements, factor)?;
    Ok(DeformationField {
        displacements: if factor == 1 { up } else { up.scaled(factor as f64) },
        scale_level: field.scale_level.saturating_sub(drop),
    })
}

/// Tape version of [`compose`] on raw displacement tensors.
pub fn compose_var(tape: &mut Tape, prev: Var, new: Var) -> Result<Var> {
    if tape.shape(prev) != tape.shape(new) {
        return Err(Error::ShapeMismatch {
            op: "compose",
            left: tape.shape(prev),
            right: tape.shape(new),
        });
    }
    let sampled = tape.warp(prev, new)?;
    tape.add(sampled, new)
}

/// Tape version of [`upsample_field`].
pub fn upsample_field_var(tape: &mut Tape, field: Var, factor: usize) -> Result<Var> {
    level_drop(factor)?;
    if factor == 1 {
        return Ok(field);
    }
    let up = tape.upsample_trilinear(field, factor)?;
    Ok(tape.scale(up, factor as f64))
}

/// Share of interior voxels where `det(I + ∇u) <= 0`, using forward
/// differences. Voxels on the last face of any axis have no forward
/// neighbour and are left out of the denominator.
pub fn jacobian_folding_fraction(field: &DeformationField) -> Result<f64> {
    let det = jacobian_determinants(field)?;
    if det.is_empty() {
        return Ok(0.0);
    }
    Ok(det.iter().filter(|&&d| d <= 0.0).count() as f64 / det.len() as f64)
}

/// `det(I + ∇u)` for every interior voxel in z-major order.
pub fn jacobian_determinants(field: &DeformationField) -> Result<Vec<f64>> {
    let s = field.displacements.shape();
    let [d, h, w] = s.spatial();
    if d < 2 || h < 2 || w < 2 {
        return Err(Error::InvalidShape {
            op: "jacobian",
            reason: alloc::format!("every spatial dim must be at least 2, got {s}"),
        });
    }
    let u = &field.displacements;
    let mut out = Vec::with_capacity(s.batch * (d - 1) * (h - 1) * (w - 1));
    for b in 0..s.batch {
        for z in 0..d - 1 {
            for y in 0..h - 1 {
                for x in 0..w - 1 {
                    let mut j = [[0.0f64; 3]; 3];
                    for (c, row) in j.iter_mut().enumerate() {
                        let here = u.at(b, c, z, y, x);
                        row[0] = u.at(b, c, z + 1, y, x) - here;
                        row[1] = u.at(b, c, z, y + 1, x) - here;
                        row[2] = u.at(b, c, z, y, x + 1) - here;
                        row[c] += 1.0;
                    }
                    out.push(det3(&j));
                }
            }
        }
    }
    Ok(out)
}

fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp_x(dims: [usize; 3]) -> Tensor5 {
        Tensor5::from_fn(Shape5::new(1, 1, dims[0], dims[1], dims[2]), |_, _, _, _, x| x as f64)
    }

    #[test]
    fn zero_field_is_exact_identity() {
        let t = Tensor5::from_fn(Shape5::new(1, 2, 4, 5, 6), |_, c, z, y, x| {
            math::sigmoid((c * 31 + z * 7 + y * 3 + x) as f64 * 0.37 - 5.0)
        });
        let f = DeformationField::zeros([4, 5, 6], 0);
        assert_eq!(warp(&t, &f).unwrap(), t);
    }

    #[test]
    fn unit_translation_shifts_a_ramp() {
        let dims = [4, 4, 6];
        let img = ramp_x(dims);
        let f = DeformationField::constant(dims, [0.0, 0.0, 1.0], 0);
        let out = warp(&img, &f).unwrap();
        for z in 0..4 {
            for y in 0..4 {
                for x in 0..5 {
                    assert_eq!(out.at(0, 0, z, y, x), (x + 1) as f64);
                }
                // clamped at the border
                assert_eq!(out.at(0, 0, z, y, 5), 5.0);
            }
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let img = ramp_x([4, 4, 4]);
        let f = DeformationField::zeros([4, 4, 5], 0);
        assert!(matches!(warp(&img, &f), Err(Error::ShapeMismatch { .. })));
        let g = DeformationField::zeros([4, 4, 4], 1);
        let h = DeformationField::zeros([4, 4, 4], 0);
        assert!(compose(&g, &h).is_err());
    }

    #[test]
    fn compose_with_zero_is_two_sided_identity() {
        let dims = [4, 5, 3];
        let f = DeformationField::new(
            Tensor5::from_fn(Shape5::new(1, 3, 4, 5, 3), |_, c, z, y, x| {
                0.3 * (c as f64 + 1.0) * ((z + 2 * y + 3 * x) as f64 * 0.7).sin()
            }),
            0,
        )
        .unwrap();
        let zero = DeformationField::zeros(dims, 0);
        assert_eq!(compose(&zero, &f).unwrap(), f);
        assert_eq!(compose(&f, &zero).unwrap(), f);
    }

    #[test]
    fn translations_add() {
        let dims = [6, 6, 6];
        let a = DeformationField::constant(dims, [0.5, -0.25, 1.0], 0);
        let b = DeformationField::constant(dims, [0.25, 0.5, -0.5], 0);
        let c = compose(&a, &b).unwrap();
        for v in 0..c.displacements().shape().voxels() {
            assert!((c.displacements().channel(0, 0)[v] - 0.75).abs() < 1e-12);
            assert!((c.displacements().channel(0, 1)[v] - 0.25).abs() < 1e-12);
            assert!((c.displacements().channel(0, 2)[v] - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn upsample_rescales_constant_fields() {
        let f = DeformationField::constant([2, 3, 2], [0.0, 0.0, 1.0], 1);
        let up = upsample_field(&f, 2).unwrap();
        assert_eq!(up.dims(), [4, 6, 4]);
        assert_eq!(up.scale_level(), 0);
        assert!(up.displacements().channel(0, 2).iter().all(|&v| v == 2.0));
        assert!(up.displacements().channel(0, 0).iter().all(|&v| v == 0.0));
        assert_eq!(upsample_field(&f, 1).unwrap(), f);
        assert!(upsample_field(&f, 3).is_err());
    }

    #[test]
    fn folding_fraction_cases() {
        let dims = [5, 5, 5];
        assert_eq!(jacobian_folding_fraction(&DeformationField::zeros(dims, 0)).unwrap(), 0.0);
        let t = DeformationField::constant(dims, [3.0, -2.0, 0.5], 0);
        assert_eq!(jacobian_folding_fraction(&t).unwrap(), 0.0);
        // u_x = -2x: det = 1 - 2 = -1 everywhere
        let fold = DeformationField::new(
            Tensor5::from_fn(Shape5::new(1, 3, 5, 5, 5), |_, c, _, _, x| if c == 2 { -2.0 * x as f64 } else { 0.0 }),
            0,
        )
        .unwrap();
        assert_eq!(jacobian_folding_fraction(&fold).unwrap(), 1.0);
        assert!(jacobian_folding_fraction(&DeformationField::zeros([1, 4, 4], 0)).is_err());
    }

    #[test]
    fn nearest_label_warp_moves_labels() {
        let mut labels = alloc::vec![0u16; 4 * 4 * 4];
        labels[(2 * 4 + 2) * 4 + 2] = 5;
        let lv = LabelVolume::new([4, 4, 4], [1.0; 3], labels).unwrap();
        let f = DeformationField::constant([4, 4, 4], [0.0, 0.0, 1.0], 0);
        let out = warp_labels(&lv, &f).unwrap();
        assert_eq!(out.at(2, 2, 1), 5);
        assert_eq!(out.at(2, 2, 2), 0);
    }

    #[test]
    fn composing_with_inverse_nearly_cancels() {
        let n = 12;
        let shape = Shape5::new(1, 3, n, n, n);
        let u = Tensor5::from_fn(shape, |_, c, z, y, x| {
            let t = (z as f64 * 0.3 + y as f64 * 0.2 + x as f64 * 0.25 + c as f64).sin();
            0.8 * t
        });
        let f = DeformationField::new(u, 0).unwrap();
        let inv = approximate_inverse(&f, 20).unwrap();
        let residual = compose(&f, &inv).unwrap();
        assert!(residual.max_magnitude() < 0.1 * f.max_magnitude(), "{}", residual.max_magnitude());
    }
}
