//! Property tests for the spec-level invariants that hold on arbitrary
//! inputs, not just hand-picked cases.

use proptest::prelude::*;

use mhsa::autodiff::{Tape, Tensor};
use mhsa::eval::{cmc_map, EmbeddingRecord};
use mhsa::losses;

fn finite_vec(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-50.0f64..50.0, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_stochastic(rows in 1usize..6, cols in 1usize..6, seed in any::<u64>()) {
        let mut rng = mhsa::rng::Rng::new(seed);
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.uniform(-30.0, 30.0)).collect();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![rows, cols], data).unwrap()).unwrap();
        let y = tape.softmax_rows(x).unwrap();
        let v = tape.value(y);
        for r in 0..rows {
            let sum: f64 = (0..cols).map(|c| v.at2(r, c)).sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            for c in 0..cols {
                let e = v.at2(r, c);
                prop_assert!((0.0..=1.0).contains(&e));
            }
        }
    }

    #[test]
    fn pairwise_sqdist_zero_diagonal_and_symmetric(n in 2usize..6, d in 1usize..5, data in finite_vec(30)) {
        let needed = n * d;
        prop_assume!(data.len() >= needed);
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::new(vec![n, d], data[..needed].to_vec()).unwrap()).unwrap();
        let dist = tape.pairwise_sqdist(a, a).unwrap();
        let v = tape.value(dist);
        for i in 0..n {
            prop_assert!(v.at2(i, i).abs() < 1e-12);
            for j in 0..n {
                prop_assert!((v.at2(i, j) - v.at2(j, i)).abs() < 1e-12);
                prop_assert!(v.at2(i, j) >= 0.0);
            }
        }
    }

    #[test]
    fn acm_bounded_by_saturation(j in 1usize..20, k in 1usize..6, gamma in 1e-4f64..0.5, seed in any::<u64>()) {
        let mut rng = mhsa::rng::Rng::new(seed);
        let data: Vec<f64> = (0..j * k).map(|_| rng.uniform(0.0, 1.5)).collect();
        let mut tape = Tape::new();
        let alpha = tape.constant(Tensor::new(vec![j, k], data).unwrap()).unwrap();
        let loss = losses::acm_term(&mut tape, alpha, gamma).unwrap();
        let v = tape.value(loss).data()[0];
        let bound = (j * k) as f64 * gamma * gamma;
        prop_assert!(v >= 0.0);
        prop_assert!(v <= bound * (1.0 + 1e-12));
    }

    #[test]
    fn acm_monotone_in_gamma(j in 1usize..12, k in 1usize..5, seed in any::<u64>()) {
        let mut rng = mhsa::rng::Rng::new(seed);
        let data: Vec<f64> = (0..j * k).map(|_| rng.uniform(0.0, 0.3)).collect();
        let mut tape = Tape::new();
        let alpha = tape.constant(Tensor::new(vec![j, k], data).unwrap()).unwrap();
        let mut prev = 0.0;
        for gamma in [1e-4, 1e-3, 1e-2, 1e-1, 1.0] {
            let loss = losses::acm_term(&mut tape, alpha, gamma).unwrap();
            let v = tape.value(loss).data()[0];
            prop_assert!(v + 1e-15 >= prev);
            prev = v;
        }
    }

    #[test]
    fn cmc_monotone_and_map_bounded(seed in any::<u64>()) {
        let mut rng = mhsa::rng::Rng::new(seed);
        let nq = 2 + rng.below(6);
        let ng = 4 + rng.below(12);
        let dim = 2 + rng.below(4);
        let mk = |rng: &mut mhsa::rng::Rng| EmbeddingRecord {
            id: rng.below(3) as u32,
            cam: rng.below(2) as u32,
            feature: (0..dim).map(|_| rng.gaussian()).collect(),
        };
        let queries: Vec<_> = (0..nq).map(|_| mk(&mut rng)).collect();
        let gallery: Vec<_> = (0..ng).map(|_| mk(&mut rng)).collect();
        if let Ok(report) = cmc_map(&queries, &gallery) {
            let mut prev = 0.0;
            for &v in &report.cmc {
                prop_assert!(v + 1e-15 >= prev);
                prev = v;
            }
            prop_assert!(*report.cmc.last().unwrap() <= 1.0 + 1e-15);
            prop_assert!((0.0..=1.0).contains(&report.map));
            let mean_ap: f64 =
                report.per_query_ap.iter().sum::<f64>() / report.per_query_ap.len() as f64;
            prop_assert!((report.map - mean_ap).abs() < 1e-12);
        }
    }

    #[test]
    fn fdrt_invariant_to_row_rescaling(seed in any::<u64>(), scale in 0.01f64..50.0) {
        let mut rng = mhsa::rng::Rng::new(seed);
        let p = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let mut scaled = p.clone();
        for c in 0..4 {
            scaled.data_mut()[4 + c] *= scale; // row 1
        }
        let mut tape = Tape::new();
        let a = tape.constant(p).unwrap();
        let b = tape.constant(scaled).unwrap();
        let fa = losses::fdrt(&mut tape, a).unwrap();
        let fb = losses::fdrt(&mut tape, b).unwrap();
        let va = tape.value(fa).data()[0];
        let vb = tape.value(fb).data()[0];
        prop_assert!((va - vb).abs() < 1e-10);
    }
}
