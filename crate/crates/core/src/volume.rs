//! Scalar intensity volumes and integer label volumes.

use alloc::collections::BTreeSet;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{Shape5, Tensor5};

/// Intensity field in `[0, 1]`, stored z-major (z slowest, x fastest).
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    spacing: [f64; 3],
    data: Vec<f32>,
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], data: Vec<f32>) -> Result<Self> {
        let n = dims.iter().product();
        if data.len() != n {
            return Err(Error::LengthMismatch {
                expected: n,
                actual: data.len(),
            });
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::InvalidArgument {
                what: "volume intensity",
                reason: alloc::format!("{v} lies outside [0, 1]"),
            });
        }
        Ok(Volume { dims, spacing, data })
    }

    pub fn zeros(dims: [usize; 3]) -> Self {
        Volume {
            dims,
            spacing: [1.0; 3],
            data: alloc::vec![0.0; dims.iter().product()],
        }
    }

    /// Builds a volume from the single channel of a (1, 1, D, H, W) tensor,
    /// clamping to `[0, 1]`.
    pub fn from_tensor(t: &Tensor5, spacing: [f64; 3]) -> Result<Self> {
        let s = t.shape();
        if s.batch != 1 || s.channels != 1 {
            return Err(Error::InvalidShape {
                op: "Volume::from_tensor",
                reason: alloc::format!("expected a single-channel tensor, got {s}"),
            });
        }
        let data = t.data().iter().map(|&v| (v as f32).clamp(0.0, 1.0)).collect();
        Volume::new(s.spatial(), spacing, data)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn with_spacing(mut self, spacing: [f64; 3]) -> Self {
        self.spacing = spacing;
        self
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn shape5(&self) -> Shape5 {
        Shape5::new(1, 1, self.dims[0], self.dims[1], self.dims[2])
    }

    pub fn to_tensor(&self) -> Tensor5 {
        Tensor5::from_vec(self.shape5(), self.data.iter().map(|&v| v as f64).collect()).expect("volume dims")
    }

    /// Zero-pads at the high end of every axis up to a multiple of `multiple`.
    pub fn pad_to_multiple(&self, multiple: usize) -> Volume {
        let target = padded_dims(self.dims, multiple);
        Volume {
            dims: target,
            spacing: self.spacing,
            data: pad_values(&self.data, self.dims, target, 0.0),
        }
    }

    pub fn check_same_dims(&self, other: &Volume) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::ShapeMismatch {
                op: "volume",
                left: self.shape5(),
                right: other.shape5(),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabelVolume {
    dims: [usize; 3],
    spacing: [f64; 3],
    labels: Vec<u16>,
}

impl LabelVolume {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], labels: Vec<u16>) -> Result<Self> {
        let n = dims.iter().product();
        if labels.len() != n {
            return Err(Error::LengthMismatch {
                expected: n,
                actual: labels.len(),
            });
        }
        Ok(LabelVolume {
            dims,
            spacing,
            labels,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn with_spacing(mut self, spacing: [f64; 3]) -> Self {
        self.spacing = spacing;
        self
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    /// Distinct label ids present, background included.
    pub fn label_set(&self) -> BTreeSet<u16> {
        self.labels.iter().copied().collect()
    }

    /// Distinct non-background label ids.
    pub fn foreground_labels(&self) -> BTreeSet<u16> {
        let mut s = self.label_set();
        s.remove(&0);
        s
    }

    #[inline]
    pub fn at(&self, z: usize, y: usize, x: usize) -> u16 {
        self.labels[(z * self.dims[1] + y) * self.dims[2] + x]
    }

    pub fn pad_to_multiple(&self, multiple: usize) -> LabelVolume {
        let target = padded_dims(self.dims, multiple);
        LabelVolume {
            dims: target,
            spacing: self.spacing,
            labels: pad_values(&self.labels, self.dims, target, 0),
        }
    }

    pub fn check_same_dims(&self, other: &LabelVolume) -> Result<()> {
        if self.dims != other.dims {
            let s = |d: [usize; 3]| Shape5::new(1, 1, d[0], d[1], d[2]);
            return Err(Error::ShapeMismatch {
                op: "label volume",
                left: s(self.dims),
                right: s(other.dims),
            });
        }
        Ok(())
    }
}

pub fn padded_dims(dims: [usize; 3], multiple: usize) -> [usize; 3] {
    dims.map(|d| d.div_ceil(multiple).max(1) * multiple)
}

fn pad_values<T: Copy>(src: &[T], dims: [usize; 3], target: [usize; 3], fill: T) -> Vec<T> {
    let mut out = alloc::vec![fill; target.iter().product()];
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            let s = (z * dims[1] + y) * dims[2];
            let d = (z * target[1] + y) * target[2];
            out[d..d + dims[2]].copy_from_slice(&src[s..s + dims[2]]);
        }
    }
    out
}

/// Keeps the low corner `dims` of every channel of a tensor.
pub fn crop_tensor(t: &Tensor5, dims: [usize; 3]) -> Result<Tensor5> {
    let s = t.shape();
    if (0..3).any(|a| dims[a] > s.spatial()[a]) {
        return Err(Error::InvalidShape {
            op: "crop",
            reason: alloc::format!("cannot crop {s} to {dims:?}"),
        });
    }
    Ok(Tensor5::from_fn(s.with_spatial(dims), |b, c, z, y, x| t.at(b, c, z, y, x)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_intensity() {
        assert!(Volume::new([1, 1, 2], [1.0; 3], alloc::vec![0.5, 1.5]).is_err());
        assert!(Volume::new([1, 1, 2], [1.0; 3], alloc::vec![0.5]).is_err());
    }

    #[test]
    fn pad_then_crop_restores_content() {
        let data: Vec<f32> = (0..3 * 5 * 7).map(|i| i as f32 / 105.0).collect();
        let v = Volume::new([3, 5, 7], [1.0; 3], data).unwrap();
        let p = v.pad_to_multiple(16);
        assert_eq!(p.dims(), [16, 16, 16]);
        let back = crop_tensor(&p.to_tensor(), [3, 5, 7]).unwrap();
        assert_eq!(back, v.to_tensor());
    }

    #[test]
    fn label_set_lists_distinct_values() {
        let l = LabelVolume::new([1, 2, 2], [1.0; 3], alloc::vec![0, 3, 3, 1]).unwrap();
        assert_eq!(l.label_set().into_iter().collect::<Vec<_>>(), [0, 1, 3]);
        assert_eq!(l.foreground_labels().len(), 2);
    }
}
