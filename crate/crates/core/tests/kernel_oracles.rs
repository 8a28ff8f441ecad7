//! Forward kernels against naive loop definitions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tcip_core::kernels;
use tcip_core::{Shape5, Tensor5};

fn random(shape: Shape5, rng: &mut ChaCha8Rng) -> Tensor5 {
    Tensor5::from_vec(shape, (0..shape.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn close(a: &Tensor5, b: &Tensor5, tol: f64) {
    assert_eq!(a.shape(), b.shape());
    for (i, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
        assert!((x - y).abs() <= tol, "element {i}: {x} vs {y}");
    }
}

fn naive_conv(input: &Tensor5, kernel: &Tensor5, bias: &[f64], stride: usize, pad: usize) -> Tensor5 {
    let s = input.shape();
    let k = kernel.shape();
    let out_len = |n: usize, kk: usize| (n + 2 * pad - kk) / stride + 1;
    let os = Shape5::new(s.batch, k.batch, out_len(s.depth, k.depth), out_len(s.height, k.height), out_len(s.width, k.width));
    Tensor5::from_fn(os, |b, o, z, y, x| {
        let mut acc = bias[o];
        for c in 0..s.channels {
            for dz in 0..k.depth {
                for dy in 0..k.height {
                    for dx in 0..k.width {
                        let iz = (z * stride + dz) as i64 - pad as i64;
                        let iy = (y * stride + dy) as i64 - pad as i64;
                        let ix = (x * stride + dx) as i64 - pad as i64;
                        let inside = |v: i64, n: usize| v >= 0 && v < n as i64;
                        if inside(iz, s.depth) && inside(iy, s.height) && inside(ix, s.width) {
                            acc += kernel.at(o, c, dz, dy, dx) * input.at(b, c, iz as usize, iy as usize, ix as usize);
                        }
                    }
                }
            }
        }
        acc
    })
}

#[test]
fn conv3d_matches_direct_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (stride, pad, ksize) in [(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 2), (1, 2, 3)] {
        let input = random(Shape5::new(2, 3, 5, 6, 4), &mut rng);
        let kernel = random(Shape5::new(4, 3, ksize, ksize, ksize), &mut rng);
        let bias: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let bt = Tensor5::from_vec(Shape5::new(1, 4, 1, 1, 1), bias.clone()).unwrap();
        let got = kernels::conv3d(&input, &kernel, Some(&bt), stride, pad).unwrap();
        close(&got, &naive_conv(&input, &kernel, &bias, stride, pad), 1e-12);
    }
}

#[test]
fn avg_pool_matches_block_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let input = random(Shape5::new(1, 2, 4, 6, 8), &mut rng);
    let got = kernels::avg_pool3d(&input, 2).unwrap();
    let want = Tensor5::from_fn(Shape5::new(1, 2, 2, 3, 4), |b, c, z, y, x| {
        let mut s = 0.0;
        for dz in 0..2 {
            for dy in 0..2 {
                for dx in 0..2 {
                    s += input.at(b, c, 2 * z + dz, 2 * y + dy, 2 * x + dx);
                }
            }
        }
        s / 8.0
    });
    close(&got, &want, 1e-12);
}

#[test]
fn global_avg_pool_matches_channel_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let input = random(Shape5::new(2, 3, 3, 4, 5), &mut rng);
    let got = kernels::global_avg_pool(&input);
    let want = Tensor5::from_fn(Shape5::new(2, 3, 1, 1, 1), |b, c, _, _, _| {
        input.channel(b, c).iter().sum::<f64>() / 60.0
    });
    close(&got, &want, 1e-12);
}

/// Half-voxel-centred linear interpolation along one axis, clamped at the ends.
fn interp_1d(values: &dyn Fn(usize) -> f64, n: usize, o: usize, factor: usize) -> f64 {
    let src = ((o as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (n - 1) as f64);
    let i0 = src.floor() as usize;
    let i1 = (i0 + 1).min(n - 1);
    let t = src - i0 as f64;
    values(i0) * (1.0 - t) + values(i1) * t
}

#[test]
fn upsample_is_separable_linear_interpolation() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let input = random(Shape5::new(1, 2, 3, 4, 2), &mut rng);
    let s = input.shape();
    for factor in [2, 4] {
        let got = kernels::upsample_trilinear(&input, factor).unwrap();
        let want = Tensor5::from_fn(s.with_spatial([3 * factor, 4 * factor, 2 * factor]), |b, c, z, y, x| {
            let along_x = |zz: usize, yy: usize| interp_1d(&|xx| input.at(b, c, zz, yy, xx), s.width, x, factor);
            let along_y = |zz: usize| interp_1d(&|yy| along_x(zz, yy), s.height, y, factor);
            interp_1d(&along_y, s.depth, z, factor)
        });
        close(&got, &want, 1e-12);
    }
}

#[test]
fn upsample_preserves_constants() {
    let c = Tensor5::full(Shape5::new(1, 1, 2, 2, 2), 0.7);
    close(&kernels::upsample_trilinear(&c, 2).unwrap(), &Tensor5::full(Shape5::new(1, 1, 4, 4, 4), 0.7), 1e-15);
}

#[test]
fn warp_by_integer_shift_is_a_clamped_translation() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let input = random(Shape5::new(1, 2, 5, 4, 6), &mut rng);
    for shift in [[1.0, 0.0, -2.0], [0.0, -1.0, 3.0], [-4.0, 2.0, 0.0]] {
        let field = Tensor5::from_fn(Shape5::new(1, 3, 5, 4, 6), |_, c, _, _, _| shift[c]);
        let got = kernels::warp(&input, &field).unwrap();
        let want = Tensor5::from_fn(input.shape(), |b, c, z, y, x| {
            let clamp = |p: usize, d: f64, n: usize| (p as f64 + d).clamp(0.0, (n - 1) as f64) as usize;
            input.at(b, c, clamp(z, shift[0], 5), clamp(y, shift[1], 4), clamp(x, shift[2], 6))
        });
        close(&got, &want, 1e-12);
    }
}

#[test]
fn warp_reproduces_affine_intensities_inside_the_volume() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let n = 6;
    let ramp = |z: f64, y: f64, x: f64| 0.3 * z - 0.2 * y + 0.1 * x + 0.05;
    let input = Tensor5::from_fn(Shape5::new(1, 1, n, n, n), |_, _, z, y, x| ramp(z as f64, y as f64, x as f64));
    let field = Tensor5::from_fn(Shape5::new(1, 3, n, n, n), |_, _, _, _, _| rng.gen_range(-0.9..0.9));
    let got = kernels::warp(&input, &field).unwrap();
    for z in 1..n - 1 {
        for y in 1..n - 1 {
            for x in 1..n - 1 {
                let p = [
                    z as f64 + field.at(0, 0, z, y, x),
                    y as f64 + field.at(0, 1, z, y, x),
                    x as f64 + field.at(0, 2, z, y, x),
                ];
                assert!((got.at(0, 0, z, y, x) - ramp(p[0], p[1], p[2])).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn box_sum_matches_window_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let input = random(Shape5::new(1, 2, 5, 4, 6), &mut rng);
    let s = input.shape();
    for n in [3, 5] {
        let r = (n / 2) as i64;
        let want = Tensor5::from_fn(s, |b, c, z, y, x| {
            let mut acc = 0.0;
            for dz in -r..=r {
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (zz, yy, xx) = (z as i64 + dz, y as i64 + dy, x as i64 + dx);
                        if (0..s.depth as i64).contains(&zz) && (0..s.height as i64).contains(&yy) && (0..s.width as i64).contains(&xx) {
                            acc += input.at(b, c, zz as usize, yy as usize, xx as usize);
                        }
                    }
                }
            }
            acc
        });
        close(&kernels::box_sum(&input, n), &want, 1e-12);
    }
}
