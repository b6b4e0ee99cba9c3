use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use roundfit::oracle::{brute_force_rounding, grad_check_suite, rounding_sandwich};
use roundfit::quant::{qdq, qdq_tape, GroupLayout, TunedParams};
use roundfit::{QuantConfig, Tape, Tensor, TuneConfig};

#[test]
fn gradcheck_passes_for_several_seeds() {
    for seed in [2, 3, 4] {
        let r = grad_check_suite(seed).unwrap();
        assert!(r.passed(), "seed {seed}:\n{}", r.to_text());
    }
}

#[test]
fn tape_quantizer_matches_direct_quantizer() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for (bits, gs) in [(2u8, 8i64), (3, 5), (4, -1), (8, 32)] {
        let cfg = QuantConfig::new(bits, gs).unwrap();
        let w = Tensor::<f32>::randn([6, 40], 0.5, &mut rng);
        let layout = GroupLayout::new(w.shape(), &cfg).unwrap();
        let g = layout.group_shape();
        let tuned = TunedParams {
            v: Tensor::uniform([6, 40], -0.5, 0.5, &mut rng),
            alpha: Tensor::uniform(g, 0.5, 1.0, &mut rng),
            beta: Tensor::uniform(g, 0.5, 1.0, &mut rng),
        };
        let direct = qdq(&w, &cfg, &tuned).unwrap();
        let mut tape = Tape::new();
        let v = tape.leaf(tuned.v.clone());
        let a = tape.leaf(tuned.alpha.clone());
        let b = tape.leaf(tuned.beta.clone());
        let out = qdq_tape(&mut tape, &w, &cfg, v, a, b).unwrap();
        assert_eq!(tape.value(out), &direct, "{cfg}");
    }
}

fn fixture(seed: u64, n: usize, b: usize) -> (Tensor<f64>, Tensor<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (Tensor::randn([1, n], 1.0, &mut rng), Tensor::randn([n, b], 1.0, &mut rng))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn optimum_bounds_rtn(seed in 0u64..10_000, n in 1usize..=10, b in 1usize..=12, bits in prop::sample::select(vec![2u8, 3, 4])) {
        let (w, x) = fixture(seed, n, b);
        let r = brute_force_rounding(&w, &x, &QuantConfig::new(bits, -1).unwrap()).unwrap();
        prop_assert_eq!(r.candidates, 1 << n);
        prop_assert!(r.optimal_mse <= r.rtn_mse);
    }

    #[test]
    fn tuned_rounding_sits_between_optimum_and_rtn(seed in 0u64..10_000, n in 2usize..=8) {
        let (w, x) = fixture(seed, n, 10);
        let tcfg = TuneConfig { steps: 150, ..TuneConfig::default() };
        let r = rounding_sandwich(&w, &x, &QuantConfig::new(2, -1).unwrap(), &tcfg).unwrap();
        let tuned = r.tuned_mse.unwrap();
        prop_assert!(r.optimal_mse <= tuned + 1e-9);
        prop_assert!(tuned <= r.rtn_mse + 1e-9);
        prop_assert!(r.gap_ratio.unwrap() >= 1.0 - 1e-9);
    }
}
