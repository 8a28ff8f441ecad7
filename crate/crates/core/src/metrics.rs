//! Overlap, surface-distance and intensity metrics for evaluating a
//! registration against the fixed volume.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;
use crate::volume::{LabelVolume, Volume};

/// `2|A∩B| / (|A|+|B|)` for one label. A label absent from both volumes
/// scores 1.
pub fn dice(a: &LabelVolume, b: &LabelVolume, label: u16) -> Result<f64> {
    a.check_same_dims(b)?;
    let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.labels().iter().zip(b.labels()) {
        let (ia, ib) = (x == label, y == label);
        na += ia as usize;
        nb += ib as usize;
        both += (ia && ib) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (na + nb) as f64)
}

/// Mean Dice over the foreground labels of `fixed`. A fixed volume with no
/// foreground yields 1.
pub fn mean_dice(fixed: &LabelVolume, warped: &LabelVolume) -> Result<f64> {
    let labels = fixed.foreground_labels();
    if labels.is_empty() {
        fixed.check_same_dims(warped)?;
        return Ok(1.0);
    }
    let mut total = 0.0;
    for &l in &labels {
        total += dice(fixed, warped, l)?;
    }
    Ok(total / labels.len() as f64)
}

/// Boundary voxels of `label`: voxels carrying the label with at least one
/// 6-neighbour that does not. Outside the volume counts as background.
pub fn surface_voxels(v: &LabelVolume, label: u16) -> Vec<[usize; 3]> {
    let [d, h, w] = v.dims();
    let mut out = Vec::new();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if v.at(z, y, x) != label {
                    continue;
                }
                let interior = z > 0
                    && y > 0
                    && x > 0
                    && z + 1 < d
                    && y + 1 < h
                    && x + 1 < w
                    && v.at(z - 1, y, x) == label
                    && v.at(z + 1, y, x) == label
                    && v.at(z, y - 1, x) == label
                    && v.at(z, y + 1, x) == label
                    && v.at(z, y, x - 1) == label
                    && v.at(z, y, x + 1) == label;
                if !interior {
                    out.push([z, y, x]);
                }
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurfaceDistances {
    pub hd95: f64,
    pub assd: f64,
}

/// Squared distance transform of a 1D sampled function over sites placed at
/// `i · step` (lower envelope of parabolas). Infinite entries are not sites.
fn edt_1d(f: &[f64], step: f64, out: &mut [f64], v: &mut Vec<usize>, zs: &mut Vec<f64>) {
    v.clear();
    zs.clear();
    let pos = |i: usize| i as f64 * step;
    for (q, &fq) in f.iter().enumerate() {
        if !fq.is_finite() {
            continue;
        }
        let pq = pos(q);
        loop {
            let Some(&last) = v.last() else {
                v.push(q);
                zs.push(f64::NEG_INFINITY);
                break;
            };
            let pv = pos(last);
            let s = ((fq + pq * pq) - (f[last] + pv * pv)) / (2.0 * (pq - pv));
            if s <= zs[zs.len() - 1] {
                v.pop();
                zs.pop();
            } else {
                v.push(q);
                zs.push(s);
                break;
            }
        }
    }
    if v.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    // zs[i] is the left boundary of the parabola v[i]; the first is -∞.
    let mut k = 0;
    for (i, o) in out.iter_mut().enumerate() {
        let p = pos(i);
        while k + 1 < v.len() && zs[k + 1] < p {
            k += 1;
        }
        let d = p - pos(v[k]);
        *o = d * d + f[v[k]];
    }
}

/// Exact Euclidean distance from every voxel to the nearest voxel in
/// `sites`, in physical units.
pub fn distance_transform(dims: [usize; 3], spacing: [f64; 3], sites: &[[usize; 3]]) -> Vec<f64> {
    let [d, h, w] = dims;
    let mut g = vec![f64::INFINITY; d * h * w];
    for &[z, y, x] in sites {
        g[(z * h + y) * w + x] = 0.0;
    }
    let strides = [h * w, w, 1];
    let mut v = Vec::new();
    let mut zs = Vec::new();
    for axis in 0..3 {
        let n = dims[axis];
        let stride = strides[axis];
        let mut line = vec![0.0; n];
        let mut out = vec![0.0; n];
        for base in 0..d * h * w {
            let coord = (base / stride) % n;
            if coord != 0 {
                continue;
            }
            for i in 0..n {
                line[i] = g[base + i * stride];
            }
            edt_1d(&line, spacing[axis], &mut out, &mut v, &mut zs);
            for i in 0..n {
                g[base + i * stride] = out[i];
            }
        }
    }
    g.iter().map(|&s| math::sqrt(s)).collect()
}

/// Linear-interpolation percentile of an ascending slice, `q ∈ [0, 1]`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = math::floor(pos) as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let t = pos - lo as f64;
    sorted[lo] + t * (sorted[hi] - sorted[lo])
}

/// Distances from each surface voxel of `a` to the nearest surface voxel of
/// `b`, followed by the reverse direction.
pub fn symmetric_surface_distances(a: &LabelVolume, b: &LabelVolume, label: u16) -> Result<Vec<f64>> {
    a.check_same_dims(b)?;
    let sa = surface_voxels(a, label);
    let sb = surface_voxels(b, label);
    if sa.is_empty() || sb.is_empty() {
        return Err(Error::LabelAbsent { label });
    }
    let dims = a.dims();
    let idx = |[z, y, x]: [usize; 3]| (z * dims[1] + y) * dims[2] + x;
    let to_b = distance_transform(dims, a.spacing(), &sb);
    let to_a = distance_transform(dims, a.spacing(), &sa);
    let mut all: Vec<f64> = sa.iter().map(|&p| to_b[idx(p)]).collect();
    all.extend(sb.iter().map(|&p| to_a[idx(p)]));
    Ok(all)
}

/// 95th-percentile and mean of the combined symmetric surface distances.
pub fn surface_distances(a: &LabelVolume, b: &LabelVolume, label: u16) -> Result<SurfaceDistances> {
    let mut all = symmetric_surface_distances(a, b, label)?;
    let assd = all.iter().sum::<f64>() / all.len() as f64;
    all.sort_by(f64::total_cmp);
    Ok(SurfaceDistances {
        hd95: percentile(&all, 0.95),
        assd,
    })
}

/// Surface distances averaged over the foreground labels present in both
/// volumes. `None` when no label is shared.
pub fn mean_surface_distances(fixed: &LabelVolume, warped: &LabelVolume) -> Result<Option<SurfaceDistances>> {
    fixed.check_same_dims(warped)?;
    let shared: Vec<u16> = fixed
        .foreground_labels()
        .intersection(&warped.foreground_labels())
        .copied()
        .collect();
    if shared.is_empty() {
        return Ok(None);
    }
    let (mut hd, mut as_) = (0.0, 0.0);
    for &l in &shared {
        let s = surface_distances(fixed, warped, l)?;
        hd += s.hd95;
        as_ += s.assd;
    }
    let n = shared.len() as f64;
    Ok(Some(SurfaceDistances {
        hd95: hd / n,
        assd: as_ / n,
    }))
}

/// Mean squared intensity difference.
pub fn mse(fixed: &Volume, warped: &Volume) -> Result<f64> {
    fixed.check_same_dims(warped)?;
    let sum: f64 = fixed
        .data()
        .iter()
        .zip(warped.data())
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum();
    Ok(sum / fixed.len() as f64)
}
