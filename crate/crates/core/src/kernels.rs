//! Forward and adjoint kernels on plain tensors. The autodiff tape calls
//! into these; inference paths that need no gradient call them directly.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::{Shape5, Tensor5};

// ── convolution ──────────────────────────────────────────────────────

fn conv_out_len(n: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = n + 2 * padding;
    if padded < k || stride == 0 {
        None
    } else {
        Some((padded - k) / stride + 1)
    }
}

/// Half-open range of output positions whose tap at kernel offset `k_off`
/// lands inside the input.
fn valid_range(n_in: usize, n_out: usize, k_off: usize, padding: usize, stride: usize) -> (usize, usize) {
    let lo = if k_off >= padding {
        0
    } else {
        (padding - k_off).div_ceil(stride)
    };
    if n_in - 1 + padding < k_off {
        return (0, 0);
    }
    let hi = ((n_in - 1 + padding - k_off) / stride + 1).min(n_out);
    (lo.min(hi), hi)
}

pub fn conv3d_output_shape(input: Shape5, kernel: Shape5, stride: usize, padding: usize) -> Result<Shape5> {
    if kernel.channels != input.channels {
        return Err(Error::ShapeMismatch {
            op: "conv3d",
            left: input,
            right: kernel,
        });
    }
    let k = kernel.spatial();
    let dims = input.spatial();
    let mut out = [0usize; 3];
    for a in 0..3 {
        out[a] = conv_out_len(dims[a], k[a], stride, padding).ok_or(Error::ShapeMismatch {
            op: "conv3d",
            left: input,
            right: kernel,
        })?;
    }
    Ok(Shape5::new(input.batch, kernel.batch, out[0], out[1], out[2]))
}

struct ConvGeometry {
    out: Shape5,
    rz: Vec<(usize, usize)>,
    ry: Vec<(usize, usize)>,
    rx: Vec<(usize, usize)>,
}

fn conv_geometry(input: Shape5, kernel: Shape5, stride: usize, padding: usize) -> Result<ConvGeometry> {
    let out = conv3d_output_shape(input, kernel, stride, padding)?;
    let rz = (0..kernel.depth)
        .map(|k| valid_range(input.depth, out.depth, k, padding, stride))
        .collect();
    let ry = (0..kernel.height)
        .map(|k| valid_range(input.height, out.height, k, padding, stride))
        .collect();
    let rx = (0..kernel.width)
        .map(|k| valid_range(input.width, out.width, k, padding, stride))
        .collect();
    Ok(ConvGeometry { out, rz, ry, rx })
}

/// Cross-correlation with kernel shape (C_out, C_in, kd, kh, kw).
pub fn conv3d(
    input: &Tensor5,
    kernel: &Tensor5,
    bias: Option<&Tensor5>,
    stride: usize,
    padding: usize,
) -> Result<Tensor5> {
    let is = input.shape();
    let ks = kernel.shape();
    let g = conv_geometry(is, ks, stride, padding)?;
    if let Some(b) = bias {
        if b.len() != ks.batch {
            return Err(Error::ShapeMismatch {
                op: "conv3d bias",
                left: ks,
                right: b.shape(),
            });
        }
    }
    let os = g.out;
    let mut out = Tensor5::zeros(os);
    for b in 0..is.batch {
        for co in 0..ks.batch {
            let oc = out.channel_mut(b, co);
            if let Some(bias) = bias {
                oc.fill(bias.data()[co]);
            }
            for ci in 0..is.channels {
                let xc = input.channel(b, ci);
                for kz in 0..ks.depth {
                    let (z0, z1) = g.rz[kz];
                    for ky in 0..ks.height {
                        let (y0, y1) = g.ry[ky];
                        for kx in 0..ks.width {
                            let (x0, x1) = g.rx[kx];
                            if x0 >= x1 {
                                continue;
                            }
                            let wv = kernel.at(co, ci, kz, ky, kx);
                            for oz in z0..z1 {
                                let iz = oz * stride + kz - padding;
                                for oy in y0..y1 {
                                    let iy = oy * stride + ky - padding;
                                    let orow = &mut oc[(oz * os.height + oy) * os.width..][..os.width];
                                    let irow = &xc[(iz * is.height + iy) * is.width..][..is.width];
                                    if stride == 1 {
                                        let ix0 = x0 + kx - padding;
                                        for (o, &i) in orow[x0..x1].iter_mut().zip(&irow[ix0..ix0 + (x1 - x0)]) {
                                            *o += wv * i;
                                        }
                                    } else {
                                        for ox in x0..x1 {
                                            orow[ox] += wv * irow[ox * stride + kx - padding];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

pub struct ConvGrads {
    pub input: Option<Tensor5>,
    pub kernel: Option<Tensor5>,
    pub bias: Option<Tensor5>,
}

/// Adjoint of [`conv3d`]; each gradient is only computed when requested.
pub fn conv3d_backward(
    input: &Tensor5,
    kernel: &Tensor5,
    grad_out: &Tensor5,
    stride: usize,
    padding: usize,
    want_input: bool,
    want_kernel: bool,
    want_bias: bool,
) -> Result<ConvGrads> {
    let is = input.shape();
    let ks = kernel.shape();
    let g = conv_geometry(is, ks, stride, padding)?;
    let os = g.out;
    if grad_out.shape() != os {
        return Err(Error::ShapeMismatch {
            op: "conv3d backward",
            left: os,
            right: grad_out.shape(),
        });
    }
    let mut gx = want_input.then(|| Tensor5::zeros(is));
    let mut gw = want_kernel.then(|| Tensor5::zeros(ks));
    let gb = want_bias.then(|| {
        let mut gb = Tensor5::zeros(Shape5::new(ks.batch, 1, 1, 1, 1));
        for b in 0..is.batch {
            for co in 0..ks.batch {
                gb.data_mut()[co] += grad_out.channel(b, co).iter().sum::<f64>();
            }
        }
        gb
    });
    if gx.is_none() && gw.is_none() {
        return Ok(ConvGrads {
            input: None,
            kernel: None,
            bias: gb,
        });
    }
    let kvol = ks.voxels();
    for b in 0..is.batch {
        for co in 0..ks.batch {
            let gc = grad_out.channel(b, co);
            for ci in 0..is.channels {
                let xc = input.channel(b, ci);
                let kbase = (co * ks.channels + ci) * kvol;
                for kz in 0..ks.depth {
                    let (z0, z1) = g.rz[kz];
                    for ky in 0..ks.height {
                        let (y0, y1) = g.ry[ky];
                        for kx in 0..ks.width {
                            let (x0, x1) = g.rx[kx];
                            if x0 >= x1 {
                                continue;
                            }
                            let kidx = kbase + (kz * ks.height + ky) * ks.width + kx;
                            let wv = kernel.data()[kidx];
                            let mut acc = 0.0;
                            for oz in z0..z1 {
                                let iz = oz * stride + kz - padding;
                                for oy in y0..y1 {
                                    let iy = oy * stride + ky - padding;
                                    let grow = &gc[(oz * os.height + oy) * os.width..][..os.width];
                                    let ioff = (iz * is.height + iy) * is.width;
                                    if let Some(gx) = gx.as_mut() {
                                        let gxrow = &mut gx.channel_mut(b, ci)[ioff..ioff + is.width];
                                        for ox in x0..x1 {
                                            gxrow[ox * stride + kx - padding] += wv * grow[ox];
                                        }
                                    }
                                    if gw.is_some() {
                                        let xrow = &xc[ioff..ioff + is.width];
                                        for ox in x0..x1 {
                                            acc += grow[ox] * xrow[ox * stride + kx - padding];
                                        }
                                    }
                                }
                            }
                            if let Some(gw) = gw.as_mut() {
                                gw.data_mut()[kidx] += acc;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(ConvGrads {
        input: gx,
        kernel: gw,
        bias: gb,
    })
}

// ── pooling ──────────────────────────────────────────────────────────

pub fn avg_pool3d(input: &Tensor5, window: usize) -> Result<Tensor5> {
    let s = input.shape();
    let dims = s.spatial();
    if window == 0 || dims.iter().any(|d| d % window != 0) {
        return Err(Error::NotDivisible {
            op: "avg_pool3d",
            dims,
            divisor: window,
        });
    }
    let os = s.with_spatial([dims[0] / window, dims[1] / window, dims[2] / window]);
    let norm = 1.0 / (window * window * window) as f64;
    let mut out = Tensor5::zeros(os);
    for b in 0..s.batch {
        for c in 0..s.channels {
            let src = input.channel(b, c);
            let dst = out.channel_mut(b, c);
            for z in 0..s.depth {
                for y in 0..s.height {
                    let row = &src[(z * s.height + y) * s.width..][..s.width];
                    let orow = &mut dst[((z / window) * os.height + y / window) * os.width..][..os.width];
                    for (x, v) in row.iter().enumerate() {
                        orow[x / window] += v * norm;
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn avg_pool3d_backward(input_shape: Shape5, grad_out: &Tensor5, window: usize) -> Tensor5 {
    let s = input_shape;
    let os = grad_out.shape();
    let norm = 1.0 / (window * window * window) as f64;
    Tensor5::from_fn(s, |b, c, z, y, x| {
        grad_out.data()[os.index(b, c, z / window, y / window, x / window)] * norm
    })
}

/// (B, C, D, H, W) -> (B, C, 1, 1, 1) spatial mean.
pub fn global_avg_pool(input: &Tensor5) -> Tensor5 {
    let s = input.shape();
    let n = s.voxels() as f64;
    let mut out = Tensor5::zeros(Shape5::new(s.batch, s.channels, 1, 1, 1));
    for b in 0..s.batch {
        for c in 0..s.channels {
            out.data_mut()[b * s.channels + c] = input.channel(b, c).iter().sum::<f64>() / n;
        }
    }
    out
}

pub fn global_avg_pool_backward(input_shape: Shape5, grad_out: &Tensor5) -> Tensor5 {
    let n = input_shape.voxels() as f64;
    Tensor5::from_fn(input_shape, |b, c, _, _, _| {
        grad_out.data()[b * input_shape.channels + c] / n
    })
}

// ── dense layer ──────────────────────────────────────────────────────

/// Affine map on (B, In, 1, 1, 1) with weight (Out, In, 1, 1, 1).
pub fn linear(input: &Tensor5, weight: &Tensor5, bias: Option<&Tensor5>) -> Result<Tensor5> {
    let is = input.shape();
    let ws = weight.shape();
    let features = is.channels * is.voxels();
    if ws.channels * ws.voxels() != features {
        return Err(Error::ShapeMismatch {
            op: "linear",
            left: is,
            right: ws,
        });
    }
    let outs = ws.batch;
    if let Some(b) = bias {
        if b.len() != outs {
            return Err(Error::ShapeMismatch {
                op: "linear bias",
                left: ws,
                right: b.shape(),
            });
        }
    }
    let mut out = Tensor5::zeros(Shape5::new(is.batch, outs, 1, 1, 1));
    for b in 0..is.batch {
        let x = &input.data()[b * features..(b + 1) * features];
        for o in 0..outs {
            let w = &weight.data()[o * features..(o + 1) * features];
            let mut acc = bias.map_or(0.0, |bb| bb.data()[o]);
            for (wi, xi) in w.iter().zip(x) {
                acc += wi * xi;
            }
            out.data_mut()[b * outs + o] = acc;
        }
    }
    Ok(out)
}

pub fn linear_backward(input: &Tensor5, weight: &Tensor5, grad_out: &Tensor5) -> (Tensor5, Tensor5, Tensor5) {
    let is = input.shape();
    let ws = weight.shape();
    let features = is.channels * is.voxels();
    let outs = ws.batch;
    let mut gx = Tensor5::zeros(is);
    let mut gw = Tensor5::zeros(ws);
    let mut gb = Tensor5::zeros(Shape5::new(outs, 1, 1, 1, 1));
    for b in 0..is.batch {
        for o in 0..outs {
            let g = grad_out.data()[b * outs + o];
            gb.data_mut()[o] += g;
            for f in 0..features {
                gx.data_mut()[b * features + f] += g * weight.data()[o * features + f];
                gw.data_mut()[o * features + f] += g * input.data()[b * features + f];
            }
        }
    }
    (gx, gw, gb)
}

// ── trilinear upsampling ─────────────────────────────────────────────

/// Two-tap interpolation stencil along one axis.
#[derive(Clone, Copy, Debug)]
struct Tap {
    i0: usize,
    i1: usize,
    w0: f64,
    w1: f64,
}

/// Half-pixel-centre mapping: output `o` samples input `(o + 0.5) / f - 0.5`,
/// clamped to the valid range.
fn upsample_taps(n_in: usize, factor: usize) -> Vec<Tap> {
    (0..n_in * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = math::floor(src) as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            let t = src - i0 as f64;
            Tap {
                i0,
                i1,
                w0: 1.0 - t,
                w1: t,
            }
        })
        .collect()
}

pub fn upsample_trilinear(input: &Tensor5, factor: usize) -> Result<Tensor5> {
    if factor == 0 {
        return Err(Error::InvalidArgument {
            what: "upsample factor",
            reason: "must be at least 1".into(),
        });
    }
    let s = input.shape();
    if factor == 1 {
        return Ok(input.clone());
    }
    let tz = upsample_taps(s.depth, factor);
    let ty = upsample_taps(s.height, factor);
    let tx = upsample_taps(s.width, factor);
    let os = s.with_spatial([tz.len(), ty.len(), tx.len()]);
    let mut out = Tensor5::zeros(os);
    for b in 0..s.batch {
        for c in 0..s.channels {
            let src = input.channel(b, c);
            let dst = out.channel_mut(b, c);
            let at = |z: usize, y: usize, x: usize| src[(z * s.height + y) * s.width + x];
            for (oz, a) in tz.iter().enumerate() {
                for (oy, bb) in ty.iter().enumerate() {
                    for (ox, cc) in tx.iter().enumerate() {
                        let lerp_x = |z: usize, y: usize| at(z, y, cc.i0) * cc.w0 + at(z, y, cc.i1) * cc.w1;
                        let v0 = lerp_x(a.i0, bb.i0) * bb.w0 + lerp_x(a.i0, bb.i1) * bb.w1;
                        let v1 = lerp_x(a.i1, bb.i0) * bb.w0 + lerp_x(a.i1, bb.i1) * bb.w1;
                        dst[(oz * os.height + oy) * os.width + ox] = v0 * a.w0 + v1 * a.w1;
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn upsample_trilinear_backward(input_shape: Shape5, grad_out: &Tensor5, factor: usize) -> Tensor5 {
    let s = input_shape;
    if factor == 1 {
        return grad_out.clone();
    }
    let tz = upsample_taps(s.depth, factor);
    let ty = upsample_taps(s.height, factor);
    let tx = upsample_taps(s.width, factor);
    let os = grad_out.shape();
    let mut gx = Tensor5::zeros(s);
    for b in 0..s.batch {
        for c in 0..s.channels {
            let g = grad_out.channel(b, c);
            let dst = gx.channel_mut(b, c);
            for (oz, a) in tz.iter().enumerate() {
                for (oy, bb) in ty.iter().enumerate() {
                    for (ox, cc) in tx.iter().enumerate() {
                        let gv = g[(oz * os.height + oy) * os.width + ox];
                        for (iz, wz) in [(a.i0, a.w0), (a.i1, a.w1)] {
                            for (iy, wy) in [(bb.i0, bb.w0), (bb.i1, bb.w1)] {
                                let row = (iz * s.height + iy) * s.width;
                                let k = gv * wz * wy;
                                dst[row + cc.i0] += k * cc.w0;
                                dst[row + cc.i1] += k * cc.w1;
                            }
                        }
                    }
                }
            }
        }
    }
    gx
}

// ── spatial-transformer sampling ─────────────────────────────────────

/// Linear sampling stencil for coordinate `p` on an axis of length `n`,
/// clamped to the border. `live` is false where clamping makes the sample
/// locally independent of `p`.
#[derive(Clone, Copy, Debug)]
struct AxisSample {
    i0: usize,
    i1: usize,
    t: f64,
    live: bool,
}

#[inline]
fn axis_sample(p: f64, n: usize) -> AxisSample {
    if n == 1 {
        return AxisSample {
            i0: 0,
            i1: 0,
            t: 0.0,
            live: false,
        };
    }
    let hi = (n - 1) as f64;
    let live = (0.0..=hi).contains(&p);
    let pc = p.clamp(0.0, hi);
    let i0 = (math::floor(pc) as usize).min(n - 2);
    AxisSample {
        i0,
        i1: i0 + 1,
        t: pc - i0 as f64,
        live,
    }
}

fn check_field(input: Shape5, field: Shape5, op: &'static str) -> Result<()> {
    if field.channels != 3 || field.batch != input.batch || field.spatial() != input.spatial() {
        return Err(Error::ShapeMismatch {
            op,
            left: input,
            right: field,
        });
    }
    Ok(())
}

/// `out(x) = input(x + u(x))` with trilinear sampling and edge clamping.
/// Field channels are (dz, dy, dx) in voxels.
pub fn warp(input: &Tensor5, field: &Tensor5) -> Result<Tensor5> {
    let s = input.shape();
    check_field(s, field.shape(), "warp")?;
    let (d, h, w) = (s.depth, s.height, s.width);
    let mut out = Tensor5::zeros(s);
    for b in 0..s.batch {
        let fz = field.channel(b, 0);
        let fy = field.channel(b, 1);
        let fx = field.channel(b, 2);
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let v = (z * h + y) * w + x;
                    let sz = axis_sample(z as f64 + fz[v], d);
                    let sy = axis_sample(y as f64 + fy[v], h);
                    let sx = axis_sample(x as f64 + fx[v], w);
                    for c in 0..s.channels {
                        let src = input.channel(b, c);
                        let val = trilinear(src, h, w, &sz, &sy, &sx);
                        out.channel_mut(b, c)[v] = val;
                    }
                }
            }
        }
    }
    Ok(out)
}

#[inline]
fn trilinear(src: &[f64], h: usize, w: usize, sz: &AxisSample, sy: &AxisSample, sx: &AxisSample) -> f64 {
    let at = |z: usize, y: usize, x: usize| src[(z * h + y) * w + x];
    let lx = |z: usize, y: usize| at(z, y, sx.i0) * (1.0 - sx.t) + at(z, y, sx.i1) * sx.t;
    let ly = |z: usize| lx(z, sy.i0) * (1.0 - sy.t) + lx(z, sy.i1) * sy.t;
    ly(sz.i0) * (1.0 - sz.t) + ly(sz.i1) * sz.t
}

pub struct WarpGrads {
    pub input: Option<Tensor5>,
    pub field: Option<Tensor5>,
}

pub fn warp_backward(
    input: &Tensor5,
    field: &Tensor5,
    grad_out: &Tensor5,
    want_input: bool,
    want_field: bool,
) -> Result<WarpGrads> {
    let s = input.shape();
    check_field(s, field.shape(), "warp backward")?;
    let (d, h, w) = (s.depth, s.height, s.width);
    let mut gi = want_input.then(|| Tensor5::zeros(s));
    let mut gf = want_field.then(|| Tensor5::zeros(field.shape()));
    for b in 0..s.batch {
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let v = (z * h + y) * w + x;
                    let sz = axis_sample(z as f64 + field.channel(b, 0)[v], d);
                    let sy = axis_sample(y as f64 + field.channel(b, 1)[v], h);
                    let sx = axis_sample(x as f64 + field.channel(b, 2)[v], w);
                    let wz = [1.0 - sz.t, sz.t];
                    let wy = [1.0 - sy.t, sy.t];
                    let wx = [1.0 - sx.t, sx.t];
                    let iz = [sz.i0, sz.i1];
                    let iy = [sy.i0, sy.i1];
                    let ix = [sx.i0, sx.i1];
                    let mut dz = 0.0;
                    let mut dy = 0.0;
                    let mut dx = 0.0;
                    for c in 0..s.channels {
                        let g = grad_out.channel(b, c)[v];
                        if g == 0.0 {
                            continue;
                        }
                        if let Some(gi) = gi.as_mut() {
                            let dst = gi.channel_mut(b, c);
                            for a in 0..2 {
                                for bb in 0..2 {
                                    for cc in 0..2 {
                                        dst[(iz[a] * h + iy[bb]) * w + ix[cc]] += g * wz[a] * wy[bb] * wx[cc];
                                    }
                                }
                            }
                        }
                        if gf.is_some() {
                            let src = input.channel(b, c);
                            let at = |a: usize, bb: usize, cc: usize| src[(iz[a] * h + iy[bb]) * w + ix[cc]];
                            let sign = [-1.0, 1.0];
                            for a in 0..2 {
                                for bb in 0..2 {
                                    for cc in 0..2 {
                                        let val = g * at(a, bb, cc);
                                        dz += val * sign[a] * wy[bb] * wx[cc];
                                        dy += val * wz[a] * sign[bb] * wx[cc];
                                        dx += val * wz[a] * wy[bb] * sign[cc];
                                    }
                                }
                            }
                        }
                    }
                    if let Some(gf) = gf.as_mut() {
                        if sz.live {
                            gf.channel_mut(b, 0)[v] += dz;
                        }
                        if sy.live {
                            gf.channel_mut(b, 1)[v] += dy;
                        }
                        if sx.live {
                            gf.channel_mut(b, 2)[v] += dx;
                        }
                    }
                }
            }
        }
    }
    Ok(WarpGrads { input: gi, field: gf })
}

// ── box filtering ────────────────────────────────────────────────────

/// Sum over the `n`³ cube centred on each voxel, zero outside the volume.
/// The operator is symmetric, so it is also its own adjoint.
pub fn box_sum(input: &Tensor5, n: usize) -> Tensor5 {
    let s = input.shape();
    let r = n / 2;
    let (d, h, w) = (s.depth, s.height, s.width);
    let mut out = input.clone();
    let mut line = Vec::new();
    for b in 0..s.batch {
        for c in 0..s.channels {
            let ch = out.channel_mut(b, c);
            // (axis length, element stride, starting offsets of every line)
            let passes: [(usize, usize, Vec<usize>); 3] = [
                (w, 1, (0..d * h).map(|zy| zy * w).collect()),
                (h, w, (0..d).flat_map(|z| (0..w).map(move |x| z * h * w + x)).collect()),
                (d, h * w, (0..h * w).collect()),
            ];
            for (len, stride, starts) in passes.iter() {
                for &base in starts {
                    line.clear();
                    line.extend((0..*len).map(|i| ch[base + i * stride]));
                    for i in 0..*len {
                        let lo = i.saturating_sub(r);
                        let hi = (i + r).min(len - 1);
                        ch[base + i * stride] = line[lo..=hi].iter().sum();
                    }
                }
            }
        }
    }
    out
}

/// Number of in-volume voxels inside each `n`³ window.
pub fn box_counts(shape: Shape5, n: usize) -> Tensor5 {
    let r = n / 2;
    let count = |i: usize, len: usize| ((i + r).min(len - 1) - i.saturating_sub(r) + 1) as f64;
    Tensor5::from_fn(shape, |_, _, z, y, x| {
        count(z, shape.depth) * count(y, shape.height) * count(x, shape.width)
    })
}

// ── smoothness penalty ───────────────────────────────────────────────

/// Sum of squared forward differences along each axis for every channel;
/// the stencil never crosses the last face of an axis.
pub fn smooth_penalty(field: &Tensor5) -> f64 {
    let mut total = 0.0;
    for_each_forward_pair(field.shape(), |i, j| {
        let d = field.data()[j] - field.data()[i];
        total += d * d;
    });
    total
}

pub fn smooth_penalty_backward(field: &Tensor5, grad_out: f64) -> Tensor5 {
    let mut g = Tensor5::zeros(field.shape());
    for_each_forward_pair(field.shape(), |i, j| {
        let d = 2.0 * grad_out * (field.data()[j] - field.data()[i]);
        g.data_mut()[j] += d;
        g.data_mut()[i] -= d;
    });
    g
}

fn for_each_forward_pair(s: Shape5, mut f: impl FnMut(usize, usize)) {
    for b in 0..s.batch {
        for c in 0..s.channels {
            for z in 0..s.depth {
                for y in 0..s.height {
                    for x in 0..s.width {
                        let i = s.index(b, c, z, y, x);
                        if z + 1 < s.depth {
                            f(i, s.index(b, c, z + 1, y, x));
                        }
                        if y + 1 < s.height {
                            f(i, s.index(b, c, z, y + 1, x));
                        }
                        if x + 1 < s.width {
                            f(i, s.index(b, c, z, y, x + 1));
                        }
                    }
                }
            }
        }
    }
}

/// Scales each channel of `input` by the matching entry of a (B, C, 1, 1, 1) tensor.
pub fn channel_scale(input: &Tensor5, weights: &Tensor5) -> Result<Tensor5> {
    let s = input.shape();
    let ws = weights.shape();
    if ws.batch != s.batch || ws.channels != s.channels || ws.voxels() != 1 {
        return Err(Error::ShapeMismatch {
            op: "channel_scale",
            left: s,
            right: ws,
        });
    }
    let mut out = input.clone();
    for b in 0..s.batch {
        for c in 0..s.channels {
            let k = weights.data()[b * s.channels + c];
            out.channel_mut(b, c).iter_mut().for_each(|v| *v *= k);
        }
    }
    Ok(out)
}

/// Concatenates along the channel axis.
pub fn concat_channels(a: &Tensor5, b: &Tensor5) -> Result<Tensor5> {
    let sa = a.shape();
    let sb = b.shape();
    if sa.batch != sb.batch || sa.spatial() != sb.spatial() {
        return Err(Error::ShapeMismatch {
            op: "concat",
            left: sa,
            right: sb,
        });
    }
    let os = sa.with_channels(sa.channels + sb.channels);
    let mut data = Vec::with_capacity(os.numel());
    for bi in 0..sa.batch {
        for c in 0..sa.channels {
            data.extend_from_slice(a.channel(bi, c));
        }
        for c in 0..sb.channels {
            data.extend_from_slice(b.channel(bi, c));
        }
    }
    Tensor5::from_vec(os, data)
}

/// Splits a channel-concatenated gradient back into its two parts.
pub fn split_channels(g: &Tensor5, first: usize) -> (Tensor5, Tensor5) {
    let s = g.shape();
    let mut a = Vec::with_capacity(s.batch * first * s.voxels());
    let mut b = Vec::with_capacity(s.batch * (s.channels - first) * s.voxels());
    for bi in 0..s.batch {
        for c in 0..s.channels {
            if c < first {
                a.extend_from_slice(g.channel(bi, c));
            } else {
                b.extend_from_slice(g.channel(bi, c));
            }
        }
    }
    (
        Tensor5::from_vec(s.with_channels(first), a).expect("split shape"),
        Tensor5::from_vec(s.with_channels(s.channels - first), b).expect("split shape"),
    )
}

/// Helper for building all-ones tensors of a shape.
pub fn ones(shape: Shape5) -> Tensor5 {
    Tensor5::full(shape, 1.0)
}

