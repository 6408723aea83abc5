//! Property tests over the pieces with simple algebraic contracts.

use gradsense::dataio::fmt_sig6;
use gradsense::objective::{adaptive_coefficient, sample_subset, schedule_subset_size, ScheduleSpec, Strategy};
use gradsense::tensor::{matmul, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

proptest! {
    /// Every strategy stays inside [1, B] for every iteration index.
    #[test]
    fn schedules_always_land_in_range(
        strategy_idx in 0usize..5,
        b in 1usize..64,
        total in 1usize..400,
        e_script in 1usize..2000,
        constant_s in 1usize..64,
    ) {
        let strategy = Strategy::ALL[strategy_idx];
        let spec = ScheduleSpec {
            strategy,
            constant_s: constant_s.min(b),
            e_script,
            total_iters: total,
        };
        for e in 0..total {
            let s = schedule_subset_size(&spec, e, b);
            prop_assert!((1..=b).contains(&s));
        }
    }

    /// The exact-combinatorics coefficient always reduces to 2/(B*S).
    #[test]
    fn coefficient_matches_closed_form(b in 1usize..=128, s_frac in 0.0f64..1.0) {
        let s = 1 + ((b - 1) as f64 * s_frac) as usize;
        let coeff = adaptive_coefficient(b, s).unwrap();
        prop_assert_eq!(coeff.to_bits(), (2.0 / (b as f64 * s as f64)).to_bits());
    }

    /// Sampled subsets are strictly increasing, unique, in range, and sized S.
    #[test]
    fn sampled_subsets_are_well_formed(seed in any::<u64>(), b in 1usize..32, s_frac in 0.0f64..1.0) {
        let s = 1 + ((b - 1) as f64 * s_frac) as usize;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let subset = sample_subset(&mut rng, b, s).unwrap();
        prop_assert_eq!(subset.size(), s);
        prop_assert!(subset.indices().windows(2).all(|w| w[0] < w[1]));
        prop_assert!(subset.indices().iter().all(|&i| i < b));
    }

    /// Six significant digits: the printed value parses back within 1e-5
    /// relative of the original.
    #[test]
    fn fmt_sig6_round_trips_to_six_digits(x in -1e9f64..1e9) {
        let printed = fmt_sig6(x);
        let back: f64 = printed.parse().unwrap();
        if x == 0.0 {
            prop_assert_eq!(back, 0.0);
        } else {
            prop_assert!(((back - x) / x).abs() < 1e-5, "{} -> {} -> {}", x, printed, back);
        }
    }

    /// Transpose flags agree with explicitly materialized transposes.
    #[test]
    fn matmul_transpose_flags_are_consistent(
        m in 1usize..5, k in 1usize..5, n in 1usize..5,
        seed in any::<u64>(),
        ta in any::<bool>(), tb in any::<bool>(),
    ) {
        use rand::Rng;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let a_shape = if ta { vec![k, m] } else { vec![m, k] };
        let b_shape = if tb { vec![n, k] } else { vec![k, n] };
        let a = Tensor::new(a_shape.clone(), (0..a_shape.iter().product()).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let b = Tensor::new(b_shape.clone(), (0..b_shape.iter().product()).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();

        let transpose = |t: &Tensor| {
            let (r, c) = (t.shape()[0], t.shape()[1]);
            let mut data = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    data[j * r + i] = t.data()[i * c + j];
                }
            }
            Tensor::new(vec![c, r], data).unwrap()
        };
        let am = if ta { transpose(&a) } else { a.clone() };
        let bm = if tb { transpose(&b) } else { b.clone() };
        let expect = matmul(&am, &bm, false, false).unwrap();
        let got = matmul(&a, &b, ta, tb).unwrap();
        prop_assert_eq!(got.shape(), expect.shape());
        for (x, y) in got.data().iter().zip(expect.data().iter()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }
}
