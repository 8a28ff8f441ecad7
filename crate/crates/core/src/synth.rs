//! Synthetic registration pairs: a labelled blob phantom and a copy of it
//! deformed by a smooth random displacement field.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::PYRAMID_DIVISOR;
use crate::error::{Error, Result};
use crate::math;
use crate::tensor::{Shape5, Tensor5};
use crate::volume::{LabelVolume, Volume};
use crate::warpfield::{self, DeformationField};

/// Intensity outside every blob.
pub const BACKGROUND: f64 = 0.05;
/// Blob radii are drawn from this range, as a fraction of the grid size.
pub const RADIUS_FRACTION: (f64, f64) = (0.06, 0.1);

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    /// Edge length of the cubic grid.
    pub grid_size: usize,
    pub num_blobs: usize,
    /// Largest displacement magnitude, in voxels.
    pub deform_amplitude: f64,
    /// Standard deviation of the Gaussian that smooths the random field, in voxels.
    pub deform_smoothness: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            grid_size: 32,
            num_blobs: 12,
            deform_amplitude: 2.0,
            deform_smoothness: 8.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.grid_size == 0 || self.grid_size % PYRAMID_DIVISOR != 0 {
            return Err(Error::NotDivisible {
                op: "synth",
                dims: [self.grid_size; 3],
                divisor: PYRAMID_DIVISOR,
            });
        }
        if !(self.deform_amplitude >= 0.0) || !self.deform_amplitude.is_finite() {
            return Err(Error::InvalidArgument {
                what: "deform amplitude",
                reason: alloc::format!("{} must be finite and non-negative", self.deform_amplitude),
            });
        }
        if !(self.deform_smoothness > 0.0) || !self.deform_smoothness.is_finite() {
            return Err(Error::InvalidArgument {
                what: "deform smoothness",
                reason: alloc::format!("{} must be finite and positive", self.deform_smoothness),
            });
        }
        if self.num_blobs > u16::MAX as usize {
            return Err(Error::InvalidArgument {
                what: "blob count",
                reason: alloc::format!("{} exceeds the label range", self.num_blobs),
            });
        }
        Ok(())
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.grid_size; 3]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthPair {
    pub fixed: Volume,
    pub moving: Volume,
    pub fixed_labels: LabelVolume,
    pub moving_labels: LabelVolume,
    /// Field with `moving = warp(fixed, gt_field)`.
    pub gt_field: DeformationField,
}

#[derive(Clone, Copy, Debug)]
struct Blob {
    center: [f64; 3],
    radius: f64,
    peak: f64,
}

fn sample_blobs(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<Blob> {
    let n = spec.grid_size as f64;
    (0..spec.num_blobs)
        .map(|_| {
            let radius = n * rng.gen_range(RADIUS_FRACTION.0..RADIUS_FRACTION.1);
            let margin = 0.5 * radius;
            let center = [0; 3].map(|_: i32| rng.gen_range(margin..n - 1.0 - margin));
            let peak = rng.gen_range(0.45..0.95);
            Blob { center, radius, peak }
        })
        .collect()
}

/// Phantom image and labels. A voxel takes the label (1-based) of the blob
/// whose normalised distance is smallest below one, or 0.
fn render(spec: &SynthSpec, blobs: &[Blob]) -> (Tensor5, Vec<u16>) {
    let n = spec.grid_size;
    let mut labels = vec![0u16; n * n * n];
    let image = Tensor5::from_fn(Shape5::new(1, 1, n, n, n), |_, _, z, y, x| {
        let p = [z as f64, y as f64, x as f64];
        let mut value = BACKGROUND;
        let mut best = (1.0, 0u16);
        for (i, b) in blobs.iter().enumerate() {
            let d2: f64 = (0..3).map(|a| (p[a] - b.center[a]) * (p[a] - b.center[a])).sum();
            let rho = math::sqrt(d2) / b.radius;
            if rho < 1.0 {
                let bump = 1.0 - rho * rho;
                value = value.max(BACKGROUND + b.peak * bump * bump);
                if rho < best.0 {
                    best = (rho, (i + 1) as u16);
                }
            }
        }
        labels[(z * n + y) * n + x] = best.1;
        value.min(1.0)
    });
    (image, labels)
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = math::ceil(3.0 * sigma) as isize;
    let k: Vec<f64> = (-r..=r).map(|i| math::exp(-0.5 * (i * i) as f64 / (sigma * sigma))).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian smoothing of every channel with replicated borders.
pub fn gaussian_smooth(t: &Tensor5, sigma: f64) -> Tensor5 {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let s = t.shape();
    let [d, h, w] = s.spatial();
    let dims = [d, h, w];
    let strides = [h * w, w, 1];
    let mut cur = t.clone();
    for axis in 0..3 {
        let mut next = Tensor5::zeros(s);
        let n = dims[axis] as isize;
        for b in 0..s.batch {
            for c in 0..s.channels {
                let src = cur.channel(b, c);
                let dst = next.channel_mut(b, c);
                for (i, out) in dst.iter_mut().enumerate() {
                    let coord = ((i / strides[axis]) % dims[axis]) as isize;
                    let base = i as isize - coord * strides[axis] as isize;
                    let mut acc = 0.0;
                    for (j, kv) in k.iter().enumerate() {
                        let q = (coord + j as isize - r).clamp(0, n - 1);
                        acc += kv * src[(base + q * strides[axis] as isize) as usize];
                    }
                    *out = acc;
                }
            }
        }
        cur = next;
    }
    cur
}

/// Smoothed Gaussian noise rescaled so its largest vector magnitude equals
/// the spec amplitude.
fn random_field(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Result<DeformationField> {
    let n = spec.grid_size;
    let dims = spec.dims();
    if spec.deform_amplitude == 0.0 {
        return Ok(DeformationField::zeros(dims, 0));
    }
    // Noise is drawn on a margin-padded grid so the border of the cropped
    // field is as rough as its interior.
    let margin = math::ceil(3.0 * spec.deform_smoothness) as usize;
    let m = n + 2 * margin;
    let noise = Tensor5::from_fn(Shape5::new(1, 3, m, m, m), |_, _, _, _, _| math::standard_normal(rng));
    let smooth = gaussian_smooth(&noise, spec.deform_smoothness);
    let cropped = Tensor5::from_fn(Shape5::new(1, 3, n, n, n), |_, c, z, y, x| {
        smooth.at(0, c, z + margin, y + margin, x + margin)
    });
    let raw = DeformationField::new(cropped, 0)?;
    let peak = raw.max_magnitude();
    if peak == 0.0 {
        return Ok(DeformationField::zeros(dims, 0));
    }
    DeformationField::new(raw.into_displacements().scaled(spec.deform_amplitude / peak), 0)
}

/// Deterministic pair for `spec.seed`.
pub fn make_pair(spec: &SynthSpec) -> Result<SynthPair> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let blobs = sample_blobs(spec, &mut rng);
    let (image, labels) = render(spec, &blobs);
    let dims = spec.dims();
    let fixed = Volume::from_tensor(&image, [1.0; 3])?;
    let fixed_labels = LabelVolume::new(dims, [1.0; 3], labels)?;
    let gt_field = random_field(spec, &mut rng)?;
    let moving = Volume::from_tensor(&warpfield::warp(&fixed.to_tensor(), &gt_field)?, [1.0; 3])?;
    let moving_labels = warpfield::warp_labels(&fixed_labels, &gt_field)?;
    Ok(SynthPair {
        fixed,
        moving,
        fixed_labels,
        moving_labels,
        gt_field,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics;

    fn spec(seed: u64) -> SynthSpec {
        SynthSpec { seed, ..Default::default() }
    }

    #[test]
    fn zero_amplitude_is_identity() {
        let p = make_pair(&SynthSpec { deform_amplitude: 0.0, ..spec(1) }).unwrap();
        assert_eq!(p.fixed, p.moving);
        assert_eq!(p.fixed_labels, p.moving_labels);
        assert_eq!(p.gt_field.max_magnitude(), 0.0);
    }

    #[test]
    fn deterministic_per_seed() {
        assert_eq!(make_pair(&spec(5)).unwrap(), make_pair(&spec(5)).unwrap());
        assert_ne!(make_pair(&spec(5)).unwrap().moving, make_pair(&spec(6)).unwrap().moving);
    }

    #[test]
    fn amplitude_is_peak_magnitude() {
        let p = make_pair(&spec(2)).unwrap();
        assert!((p.gt_field.max_magnitude() - 2.0).abs() < 1e-9);
    }

    #[test]
    fn deformation_gives_registration_work() {
        let p = make_pair(&spec(3)).unwrap();
        assert!(p.fixed_labels.foreground_labels().len() >= 3);
        assert!(metrics::mean_dice(&p.fixed_labels, &p.moving_labels).unwrap() < 1.0);
        assert!(metrics::mse(&p.fixed, &p.moving).unwrap() > 0.0);
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(make_pair(&SynthSpec { grid_size: 24, ..spec(0) }).is_err());
        assert!(make_pair(&SynthSpec { deform_amplitude: -1.0, ..spec(0) }).is_err());
        assert!(make_pair(&SynthSpec { deform_smoothness: 0.0, ..spec(0) }).is_err());
    }

    #[test]
    fn smoothing_preserves_constants() {
        let t = Tensor5::full(Shape5::new(1, 2, 5, 6, 7), 0.3);
        for v in gaussian_smooth(&t, 1.5).data() {
            assert!((v - 0.3).abs() < 1e-12);
        }
    }
}
