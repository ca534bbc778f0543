mod common;

use common::uniform;
use ddsfl::mathkit::{kmeans, pca_fit_with_spectrum, Matrix};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn pca_components_are_orthonormal(seed in 0u64..100_000, n in 12usize..60, d in 1usize..10, k in 1usize..10) {
        let k = k.min(d);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = uniform(&mut rng, n, d);
        let (pca, spectrum) = pca_fit_with_spectrum(&x, k).unwrap();
        prop_assert_eq!(pca.output_dim(), k);
        let gram = pca.components.mul_t(&pca.components);
        for i in 0..k {
            for j in 0..k {
                let want = if i == j { 1.0 } else { 0.0 };
                prop_assert!((gram[(i, j)] - want).abs() <= 1e-9);
            }
        }
        prop_assert!(spectrum.windows(2).all(|p| p[0] >= p[1] - 1e-12));
        // the mean maps to the origin
        prop_assert!(pca.transform(&pca.mean).unwrap().iter().all(|v| v.abs() <= 1e-12));
        // projected variance along each component equals its eigenvalue
        for (c, &lambda) in spectrum.iter().take(k).enumerate() {
            let var: f64 = x.iter_rows().map(|r| pca.transform(r).unwrap()[c].powi(2)).sum::<f64>() / (n - 1) as f64;
            prop_assert!((var - lambda).abs() <= 1e-8 * lambda.max(1.0));
        }
    }

    #[test]
    fn full_rank_pca_reconstructs(seed in 0u64..100_000, n in 8usize..40, d in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = uniform(&mut rng, n, d);
        let (pca, _) = pca_fit_with_spectrum(&x, d).unwrap();
        for r in x.iter_rows() {
            let back = pca.reconstruct(&pca.transform(r).unwrap());
            prop_assert!(back.iter().zip(r).all(|(a, b)| (a - b).abs() <= 1e-9));
        }
    }

    #[test]
    fn kmeans_sse_never_rises(seed in 0u64..100_000, n in 5usize..80, k in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = uniform(&mut rng, n, 3);
        let res = kmeans(&x, k.min(n), 25, seed).unwrap();
        prop_assert!(res.sse_history.windows(2).all(|p| p[1] <= p[0] + 1e-12));
        // every point sits with its nearest center
        for (i, r) in x.iter_rows().enumerate() {
            let d = |c: usize| res.centers.row(c).iter().zip(r).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            let best = (0..res.centers.rows()).map(d).fold(f64::INFINITY, f64::min);
            prop_assert!(d(res.assignment[i]) <= best + 1e-12);
        }
    }
}

#[test]
fn rank_deficient_data_has_zero_tail() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let coef = uniform(&mut rng, 30, 2);
    let basis = uniform(&mut rng, 2, 5);
    let x: Matrix = coef.mul(&basis);
    let (_, spectrum) = pca_fit_with_spectrum(&x, 2).unwrap();
    assert!(spectrum[2..].iter().all(|v| v.abs() <= 1e-10));
}
