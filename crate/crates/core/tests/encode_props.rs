mod common;

use common::{noise_image, random_model, uniform};
use ddsfl::encode::{describe_image, llc_encode, spm_pool, spm_regions, Codebook, SparseCode};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn codebook(seed: u64, b: usize, dim: usize) -> Codebook {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Codebook {
        centers: uniform(&mut rng, b, dim),
        layer_idx: 0,
    }
}

/// Solves `a x = rhs` by Gaussian elimination with partial pivoting.
fn solve(mut a: Vec<Vec<f64>>, mut rhs: Vec<f64>) -> Vec<f64> {
    let n = rhs.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, piv);
        rhs.swap(col, piv);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
            rhs[r] -= f * rhs[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| a[r][c] * x[c]).sum();
        x[r] = (rhs[r] - s) / a[r][r];
    }
    x
}

/// Locality-constrained code from the Lagrangian of the sum-to-one least
/// squares problem on the nearest codewords.
fn llc_oracle(cb: &Codebook, f: &[f64], knn: usize, beta: f64) -> SparseCode {
    let mut order: Vec<usize> = (0..cb.size()).collect();
    let d = |i: usize| cb.centers.row(i).iter().zip(f).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    order.sort_by(|&a, &b| d(a).total_cmp(&d(b)).then(a.cmp(&b)));
    order.truncate(knn.min(cb.size()));
    let k = order.len();
    let z: Vec<Vec<f64>> = order.iter().map(|&i| cb.centers.row(i).iter().zip(f).map(|(a, b)| a - b).collect()).collect();
    let mut c: Vec<Vec<f64>> = (0..k).map(|i| (0..k).map(|j| z[i].iter().zip(&z[j]).map(|(a, b)| a * b).sum()).collect()).collect();
    let tr: f64 = (0..k).map(|i| c[i][i]).sum();
    for (i, row) in c.iter_mut().enumerate() {
        row[i] += if tr > 0.0 { beta * tr } else { beta };
    }
    let w = solve(c, vec![1.0; k]);
    let s: f64 = w.iter().sum();
    SparseCode {
        idx: order,
        weights: w.iter().map(|v| v / s).collect(),
    }
}

#[test]
fn codes_match_the_lagrangian_solution() {
    for seed in 0..30u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = rng.random_range(3..30);
        let dim = rng.random_range(2..10);
        let cb = codebook(seed, b, dim);
        let f: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let knn = rng.random_range(1..6);
        let got = llc_encode(&cb, &f, knn, 1e-4).unwrap();
        let want = llc_oracle(&cb, &f, knn, 1e-4);
        assert_eq!(got.idx, want.idx);
        for (a, b) in got.weights.iter().zip(&want.weights) {
            assert!((a - b).abs() <= 1e-8 * b.abs().max(1.0), "{a} vs {b}");
        }
    }
}

#[test]
fn codewords_encode_to_themselves() {
    let cb = codebook(3, 40, 6);
    for j in 0..40 {
        let code = llc_encode(&cb, cb.centers.row(j), 5, 1e-4).unwrap();
        let w = code.to_dense(40)[j];
        assert!(w >= 0.99, "codeword {j}: {w}");
    }
}

/// Region index of a center at each pyramid level, computed directly.
fn pool_oracle(codes: &[SparseCode], centers: &[(f64, f64)], w: usize, h: usize, b: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; 21 * b];
    let mut base = 0;
    for level in [1usize, 2, 4] {
        for (code, &(cx, cy)) in codes.iter().zip(centers) {
            let gx = ((cx * level as f64 / w as f64) as usize).min(level - 1);
            let gy = ((cy * level as f64 / h as f64) as usize).min(level - 1);
            let region = base + gy * level + gx;
            for (&i, &v) in code.idx.iter().zip(&code.weights) {
                let slot = &mut out[region * b + i];
                *slot = (*slot).max(v.abs());
            }
        }
        base += level * level;
    }
    let n = out.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n > 0.0 {
        out.iter_mut().for_each(|v| *v /= n);
    }
    out
}

fn random_codes(rng: &mut ChaCha8Rng, n: usize, b: usize, w: usize, h: usize) -> (Vec<SparseCode>, Vec<(f64, f64)>) {
    let codes = (0..n)
        .map(|_| {
            let k = rng.random_range(1..=b.min(4));
            let mut idx: Vec<usize> = (0..b).collect();
            for i in (1..b).rev() {
                idx.swap(i, rng.random_range(0..=i));
            }
            idx.truncate(k);
            let weights = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
            SparseCode { idx, weights }
        })
        .collect();
    let centers = (0..n)
        .map(|_| (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64)))
        .collect();
    (codes, centers)
}

#[test]
fn pooling_matches_region_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..20 {
        let b = rng.random_range(1..12);
        let (w, h) = (rng.random_range(16..200), rng.random_range(16..200));
        let n = rng.random_range(0..60);
        let (codes, centers) = random_codes(&mut rng, n, b, w, h);
        let got = spm_pool(&codes, &centers, w, h, b, false).unwrap();
        let want = pool_oracle(&codes, &centers, w, h, b);
        assert_eq!(got.len(), 21 * b);
        for (a, e) in got.iter().zip(&want) {
            assert!((a - e).abs() <= 1e-12);
        }
    }
}

#[test]
fn one_layer_descriptor_length() {
    let model = random_model(2, &[6], 4, 7, 2);
    let d = describe_image(&noise_image(1, 48, 40), &model).unwrap();
    assert_eq!(d.len(), spm_regions() * 7);
    assert_eq!(spm_regions(), 21);
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn codes_sum_to_one(seed in 0u64..100_000, b in 1usize..40, dim in 1usize..12, knn in 1usize..8) {
        let cb = codebook(seed, b, dim);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        let f: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        let code = llc_encode(&cb, &f, knn, 1e-4).unwrap();
        prop_assert_eq!(code.idx.len(), knn.min(b));
        prop_assert!((code.weights.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn pooling_ignores_patch_order(seed in 0u64..100_000, n in 0usize..40, b in 1usize..10, signed: bool) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (codes, centers) = random_codes(&mut rng, n, b, 64, 48);
        let a = spm_pool(&codes, &centers, 64, 48, b, signed).unwrap();
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let codes2: Vec<SparseCode> = order.iter().map(|&i| codes[i].clone()).collect();
        let centers2: Vec<(f64, f64)> = order.iter().map(|&i| centers[i]).collect();
        let b2 = spm_pool(&codes2, &centers2, 64, 48, b, signed).unwrap();
        prop_assert_eq!(&a, &b2);
        let norm = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!(norm == 0.0 || (norm - 1.0).abs() <= 1e-12);
        if !signed {
            prop_assert_eq!(norm == 0.0, n == 0);
        }
    }
}

#[test]
fn zero_vector_stays_zero() {
    let mut v = vec![0.0; 5];
    ddsfl::encode::l2_normalize(&mut v);
    assert_eq!(v, vec![0.0; 5]);
}
