mod common;

use cgsd::checkpoint;
use cgsd::guidance::{guidance_loss_value, lora_forward, prior_from, GuidanceTrainConfig};
use cgsd::numkit::{argmax, Tensor2};
use cgsd::pipeline::{pretrain_base, train_stage1, PretrainConfig};
use cgsd::rng;
use proptest::prelude::*;

use common::{random_model, small_bench};

#[test]
fn zero_adapter_matches_frozen_base_on_100_inputs() {
    let model = random_model(7, 4, 3);
    let mut r = rng::seeded(4);
    for _ in 0..100 {
        let x = rng::normal_vec(&mut r, 7);
        let a = model.encode_feature(&x).unwrap();
        let b = model.encode_frozen_base(&x).unwrap();
        let diff = a.iter().zip(&b).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max);
        assert!(diff <= 1e-12);
        let hidden = rng::normal_vec(&mut r, 12);
        let y = lora_forward(&hidden, &model.w2, &model.adapter).unwrap();
        let w = model.w2.matmul(&Tensor2::column_vector(&hidden)).unwrap();
        assert!(y.iter().zip(w.data()).all(|(p, q)| (p - q).abs() <= 1e-12));
    }
}

#[test]
fn encoding_is_deterministic_and_unit_norm() {
    let mut model = random_model(5, 3, 8);
    model.adapter.b = Tensor2::from_fn(6, 3, |i, j| ((i + 2 * j) as f64).sin() * 0.2);
    let x = [0.3, -1.0, 2.0, 0.1, 0.0];
    let a = model.encode_feature(&x).unwrap();
    let b = model.encode_feature(&x).unwrap();
    assert_eq!(
        a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
    assert!((a.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-12);
    assert_ne!(a, model.encode_frozen_base(&x).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn similarities_stay_in_range_and_prior_is_a_distribution(
        seed in any::<u64>(),
        xs in prop::collection::vec(-20.0f64..20.0, 5 * 8),
    ) {
        let mut model = random_model(5, 4, seed);
        model.adapter.b = Tensor2::from_fn(6, 3, |i, j| ((seed as usize + i * 3 + j) as f64).cos());
        let x = Tensor2::new(8, 5, xs).unwrap();
        let s = model.condition(&x).unwrap();
        for i in 0..8 {
            for &d in s.d.row(i) {
                prop_assert!((-1.0 - 1e-9..=1.0 + 1e-9).contains(&d));
            }
            let p = s.prior.row(i);
            prop_assert!(p.iter().all(|&v| v > 0.0));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert_eq!(argmax(p), argmax(s.d.row(i)));
        }
    }

    #[test]
    fn zero_shot_ignores_the_logit_scale(seed in any::<u64>(), log_scale in -3.0f64..4.6) {
        let mut model = random_model(5, 5, seed);
        let mut r = rng::seeded(seed ^ 1);
        let x = Tensor2::from_fn(16, 5, |_, _| rng::normal(&mut r));
        let before = model.zero_shot_batch(&x).unwrap();
        model.log_scale = log_scale;
        prop_assert_eq!(before, model.zero_shot_batch(&x).unwrap());
    }

    #[test]
    fn prior_argmax_is_scale_free(d in prop::collection::vec(-1.0f64..1.0, 5), scale in 0.01f64..100.0) {
        prop_assert_eq!(argmax(&prior_from(&d, scale)), argmax(&d));
    }
}

#[test]
fn stage1_reduces_guidance_loss_on_separable_data() {
    let bench = small_bench(900, 6.0, 21);
    let pre = PretrainConfig {
        epochs: 10,
        ..PretrainConfig::default()
    };
    let (base, _) = pretrain_base(&bench.source, 8, 16.0, &pre, 21).unwrap();
    let cfg = GuidanceTrainConfig::default();
    let before = guidance_loss_value(&base, &bench.train.features, &bench.train.labels, cfg.lambda_rank, cfg.margin).unwrap();
    let (ckpt, log) = train_stage1(&base, &bench.train, &cfg).unwrap();
    let after_model = ckpt.clone().into_model().unwrap();
    let after =
        guidance_loss_value(&after_model, &bench.train.features, &bench.train.labels, cfg.lambda_rank, cfg.margin).unwrap();
    assert!(after < before, "loss {before} -> {after}");
    assert_eq!(log.losses.len(), cfg.epochs);
    assert!(ckpt.frozen);
    // the frozen encoder is carried through untouched
    assert_eq!(checkpoint::digest(&(&ckpt.w1, &ckpt.b1, &ckpt.w2, &ckpt.b2)),
        checkpoint::digest(&(&base.w1, &base.b1, &base.w2, &base.b2)));
}
