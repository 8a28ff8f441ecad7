//! Evaluation metrics against brute-force definitions on random volumes.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tcip_core::metrics;
use tcip_core::{LabelVolume, Volume};

const CASES: u64 = 20;

/// A few random boxes of labels 1..=3 over background, boxes may overlap.
fn random_labels(rng: &mut ChaCha8Rng, dims: [usize; 3], spacing: [f64; 3]) -> LabelVolume {
    let mut data = vec![0u16; dims.iter().product()];
    for _ in 0..rng.gen_range(2..6) {
        let label = rng.gen_range(1..=3);
        let lo: Vec<usize> = dims.iter().map(|&d| rng.gen_range(0..d)).collect();
        let hi: Vec<usize> = (0..3).map(|a| rng.gen_range(lo[a]..dims[a]) + 1).collect();
        for z in lo[0]..hi[0] {
            for y in lo[1]..hi[1] {
                for x in lo[2]..hi[2] {
                    data[(z * dims[1] + y) * dims[2] + x] = label;
                }
            }
        }
    }
    // Speckle so that surfaces are not only box faces.
    for v in data.iter_mut() {
        if rng.gen_bool(0.05) {
            *v = rng.gen_range(0..=3);
        }
    }
    LabelVolume::new(dims, spacing, data).unwrap()
}

fn case(seed: u64) -> (LabelVolume, LabelVolume) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = [rng.gen_range(4..9), rng.gen_range(4..9), rng.gen_range(4..9)];
    let spacing = [rng.gen_range(0.5..2.0), rng.gen_range(0.5..2.0), rng.gen_range(0.5..2.0)];
    (random_labels(&mut rng, dims, spacing), random_labels(&mut rng, dims, spacing))
}

fn voxels_of(v: &LabelVolume, label: u16) -> BTreeSet<[usize; 3]> {
    let [d, h, w] = v.dims();
    let mut out = BTreeSet::new();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if v.at(z, y, x) == label {
                    out.insert([z, y, x]);
                }
            }
        }
    }
    out
}

fn oracle_dice(a: &LabelVolume, b: &LabelVolume, label: u16) -> f64 {
    let (sa, sb) = (voxels_of(a, label), voxels_of(b, label));
    if sa.is_empty() && sb.is_empty() {
        return 1.0;
    }
    2.0 * sa.intersection(&sb).count() as f64 / (sa.len() + sb.len()) as f64
}

fn oracle_surface(v: &LabelVolume, label: u16) -> Vec<[usize; 3]> {
    let dims = v.dims();
    voxels_of(v, label)
        .into_iter()
        .filter(|p| {
            (0..3).any(|axis| {
                [-1i64, 1].iter().any(|&step| {
                    let q = p[axis] as i64 + step;
                    if q < 0 || q >= dims[axis] as i64 {
                        return true;
                    }
                    let mut n = *p;
                    n[axis] = q as usize;
                    v.at(n[0], n[1], n[2]) != label
                })
            })
        })
        .collect()
}

fn nearest(p: [usize; 3], set: &[[usize; 3]], spacing: [f64; 3]) -> f64 {
    set.iter()
        .map(|q| {
            (0..3)
                .map(|a| ((p[a] as f64 - q[a] as f64) * spacing[a]).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .fold(f64::INFINITY, f64::min)
}

fn oracle_distances(a: &LabelVolume, b: &LabelVolume, label: u16) -> Option<(f64, f64)> {
    let (sa, sb) = (oracle_surface(a, label), oracle_surface(b, label));
    if sa.is_empty() || sb.is_empty() {
        return None;
    }
    let sp = a.spacing();
    let mut all: Vec<f64> = sa.iter().map(|&p| nearest(p, &sb, sp)).collect();
    all.extend(sb.iter().map(|&p| nearest(p, &sa, sp)));
    all.sort_by(f64::total_cmp);
    let rank = 0.95 * (all.len() - 1) as f64;
    let (lo, hi) = (rank.floor() as usize, rank.ceil() as usize);
    let hd95 = all[lo] + (all[hi] - all[lo]) * (rank - lo as f64);
    let assd = all.iter().sum::<f64>() / all.len() as f64;
    Some((hd95, assd))
}

#[test]
fn dice_matches_set_definition() {
    for seed in 0..CASES {
        let (a, b) = case(seed);
        for label in 0..=4 {
            assert_eq!(metrics::dice(&a, &b, label).unwrap(), oracle_dice(&a, &b, label), "seed {seed} label {label}");
        }
        let fg = a.foreground_labels();
        let want = if fg.is_empty() {
            1.0
        } else {
            fg.iter().map(|&l| oracle_dice(&a, &b, l)).sum::<f64>() / fg.len() as f64
        };
        assert!((metrics::mean_dice(&a, &b).unwrap() - want).abs() < 1e-12);
    }
}

#[test]
fn surface_voxels_match_neighbour_definition() {
    for seed in 0..CASES {
        let (a, _) = case(seed);
        for label in 1..=3 {
            let mut got = metrics::surface_voxels(&a, label);
            got.sort();
            assert_eq!(got, oracle_surface(&a, label), "seed {seed} label {label}");
        }
    }
}

#[test]
fn hd95_and_assd_match_exhaustive_search() {
    let mut compared = 0;
    for seed in 0..CASES {
        let (a, b) = case(seed);
        for label in 1..=3 {
            match (metrics::surface_distances(&a, &b, label), oracle_distances(&a, &b, label)) {
                (Ok(got), Some((hd95, assd))) => {
                    assert!((got.hd95 - hd95).abs() < 1e-9, "seed {seed} label {label}: hd95 {} vs {hd95}", got.hd95);
                    assert!((got.assd - assd).abs() < 1e-9, "seed {seed} label {label}: assd {} vs {assd}", got.assd);
                    compared += 1;
                }
                (Err(_), None) => {}
                (got, want) => panic!("seed {seed} label {label}: {got:?} vs {want:?}"),
            }
        }
    }
    assert!(compared >= 40, "only {compared} label pairs compared");
}

#[test]
fn mse_matches_plain_mean() {
    for seed in 0..CASES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = [rng.gen_range(2..7), rng.gen_range(2..7), rng.gen_range(2..7)];
        let n: usize = dims.iter().product();
        let a: Vec<f32> = (0..n).map(|_| rng.gen()).collect();
        let b: Vec<f32> = (0..n).map(|_| rng.gen()).collect();
        let want = a.iter().zip(&b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>() / n as f64;
        let va = Volume::new(dims, [1.0; 3], a).unwrap();
        let vb = Volume::new(dims, [1.0; 3], b).unwrap();
        assert!((metrics::mse(&va, &vb).unwrap() - want).abs() < 1e-12);
    }
}
