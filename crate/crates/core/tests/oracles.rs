mod common;

use common::*;
use fedcl::federation::{aggregation_weights, fedavg};
use fedcl::losses::{distillation_loss, flwf1_loss, flwf2_loss, LossMode, LossSpec, OneHot};
use fedcl::nn::{Architecture, LayerConfig, ModelParams};
use fedcl::Tensor;
use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use rand::SeedableRng;

fn logits(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-4.0f64..4.0, rows * cols).prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
}

fn case() -> impl Strategy<Value = (Tensor, Tensor, Tensor, Vec<usize>, f64, f64, f64)> {
    (1usize..5, 2usize..6).prop_flat_map(|(b, n)| {
        (
            logits(b, n),
            logits(b, n),
            logits(b, n),
            prop::collection::vec(0..n, b),
            0.0f64..1.0,
            0.0f64..1.0,
            0.3f64..4.0,
        )
            .prop_map(|(s, tc, ts, y, a, f, t)| (s, tc, ts, y, a, f * (1.0 - a), t))
    })
}

proptest! {
    #[test]
    fn flwf_losses_are_weighted_sums((s, tc, ts, y, alpha, beta, t) in case()) {
        let n = s.row_len();
        let labels = OneHot::from_classes(&y, n).unwrap();
        let ce = ref_ce(&s, &y);
        let dc = ref_distill(&tc, &s, t);
        let ds = ref_distill(&ts, &s, t);
        assert_abs_diff_eq!(flwf1_loss(&labels, &s, &tc, alpha, t).unwrap(), alpha * ce + (1.0 - alpha) * dc, epsilon = 1e-10);
        assert_abs_diff_eq!(
            flwf2_loss(&labels, &s, Some(&tc), &ts, alpha, beta, t).unwrap(),
            alpha * ce + beta * dc + (1.0 - alpha - beta) * ds,
            epsilon = 1e-10
        );
    }

    #[test]
    fn loss_spec_agrees_with_free_functions((s, tc, ts, y, alpha, beta, t) in case()) {
        let labels = OneHot::from_classes(&y, s.row_len()).unwrap();
        let spec = LossSpec {
            mode: LossMode::Flwf2,
            alpha,
            beta: Some(beta),
            temperature: t,
            teacher_client: Some(tc.clone()),
            teacher_server: Some(ts.clone()),
        };
        let want = flwf2_loss(&labels, &s, Some(&tc), &ts, alpha, beta, t).unwrap();
        assert_abs_diff_eq!(spec.value(&s, &y).unwrap(), want, epsilon = 1e-10);
    }

    #[test]
    fn self_distillation_is_entropy((s, _tc, _ts, _y, _a, _b, t) in case()) {
        assert_abs_diff_eq!(distillation_loss(&s, &s, t).unwrap(), ref_entropy(&s, t), epsilon = 1e-10);
    }

    #[test]
    fn fedavg_is_the_weighted_mean(seed in 0u64..1000, k in 1usize..=5, sizes in prop::collection::vec(1usize..300, 5)) {
        let arch = Architecture::new(1, 4, 3, LayerConfig::default_mlp(3), 0.5).unwrap();
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let models: Vec<ModelParams> = (0..k).map(|_| ModelParams::glorot(&arch, &mut r)).collect();
        let refs: Vec<&ModelParams> = models.iter().collect();
        let sizes: Vec<f64> = sizes[..k].iter().map(|&s| s as f64).collect();
        let got = fedavg(&refs, &sizes).unwrap().to_flat();
        for (g, w) in got.iter().zip(ref_weighted_mean(&refs, &sizes)) {
            prop_assert!((g - w).abs() <= 1e-12);
        }
        let same = vec![&models[0]; k];
        prop_assert_eq!(fedavg(&same, &sizes).unwrap(), models[0].clone());
    }

    #[test]
    fn aggregation_weights_sum_to_one(hints in prop::collection::vec(1usize..6, 1..6), m in 1usize..200) {
        let h: Vec<f64> = hints.iter().map(|&x| x as f64).collect();
        let w = aggregation_weights(&h, &vec![m; h.len()]).unwrap();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let total: usize = hints.iter().sum();
        for (wi, hi) in w.iter().zip(&hints) {
            prop_assert!((wi - *hi as f64 / total as f64).abs() < 1e-12);
        }
    }
}
