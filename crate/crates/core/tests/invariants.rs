use dfkit::autodiff::Tape;
use dfkit::filters::{soft_resample, ParticleBelief, UkfParams};
use dfkit::gaussian::bhattacharyya_value;
use dfkit::tensor::{cholesky, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-5.0..5.0f64, rows * cols).prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
}

fn spd(n: usize) -> impl Strategy<Value = Tensor> {
    matrix(n, n).prop_map(move |a| {
        let mut s = a.matmul(&a.transpose());
        for i in 0..n {
            s.set(i, i, s.at(i, i) + 0.5);
        }
        s
    })
}

fn dims() -> impl Strategy<Value = (usize, usize, usize)> {
    (1..7usize, 0..9usize, 0..9usize)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matmul_matches_naive_sum((a, b) in dims().prop_flat_map(|(m, k, n)| (matrix(m, k), matrix(k, n)))) {
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let c = a.matmul(&b);
        prop_assert_eq!(c.shape(), &[m, n][..]);
        for i in 0..m {
            for j in 0..n {
                let expect: f64 = (0..k).map(|p| a.at(i, p) * b.at(p, j)).sum();
                prop_assert!((c.at(i, j) - expect).abs() <= 1e-12 * (1.0 + expect.abs()));
            }
        }
    }

    #[test]
    fn cholesky_reconstructs(a in (1..6usize).prop_flat_map(spd)) {
        let l = cholesky(&a).unwrap();
        let back = l.matmul(&l.transpose());
        let n = a.rows();
        for i in 0..n {
            for j in 0..n {
                prop_assert!((back.at(i, j) - a.at(i, j)).abs() <= 1e-9 * (1.0 + a.at(i, j).abs()));
                if j > i {
                    prop_assert_eq!(l.at(i, j), 0.0);
                }
            }
        }
    }

    #[test]
    fn sigma_weights_sum_to_one(alpha in 0.05..2.0f64, kappa in 0.0..5.0f64, beta in 0.0..3.0f64, n in 1..7usize) {
        let (wm, wc) = UkfParams { alpha, kappa, beta }.weights(n).unwrap();
        prop_assert_eq!(wm.len(), 2 * n + 1);
        prop_assert_eq!(wc.len(), 2 * n + 1);
        let big = wm.iter().fold(0.0f64, |m, w| m.max(w.abs()));
        let bound = (2 * n + 1) as f64 * f64::EPSILON * big.max(1.0);
        prop_assert!((wm.iter().sum::<f64>() - 1.0).abs() <= bound);
    }

    #[test]
    fn soft_resampling_keeps_weights_normalised(
        raw in prop::collection::vec(0.01..1.0f64, 2..30),
        alpha in 0.0..=1.0f64,
        seed in any::<u64>(),
    ) {
        let total: f64 = raw.iter().sum();
        let n = raw.len();
        let tape = Tape::new();
        let bel = ParticleBelief {
            particles: tape.constant(Tensor::new(vec![n, 2], (0..2 * n).map(|i| i as f64).collect()).unwrap()),
            log_weights: tape.constant(Tensor::vector(&raw.iter().map(|w| (w / total).ln()).collect::<Vec<_>>())),
        };
        let out = soft_resample(&bel, alpha, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(out.particles.value().shape(), &[n, 2][..]);
        let mass: f64 = out.log_weights.value().data().iter().map(|lw| lw.exp()).sum();
        prop_assert!((mass - 1.0).abs() < 1e-9);
        // Every resampled particle is one of the originals.
        for row in out.particles.value().data().chunks(2) {
            prop_assert!(row[0] as usize % 2 == 0 && row[1] == row[0] + 1.0);
        }
    }

    #[test]
    fn bhattacharyya_is_a_symmetric_divergence(a in spd(3), b in spd(3)) {
        prop_assert!(bhattacharyya_value(&a, &a).unwrap().abs() < 1e-10);
        let ab = bhattacharyya_value(&a, &b).unwrap();
        let ba = bhattacharyya_value(&b, &a).unwrap();
        prop_assert!(ab >= -1e-12);
        prop_assert!((ab - ba).abs() <= 1e-9 * (1.0 + ab.abs()));
    }
}
