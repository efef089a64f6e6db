//! Learning-rate cycle, the asymptotic rate and momentum SGD.

use effipose::data::synthetic_dataset;
use effipose::optim::{lambda_inf, sgd_step, ClrSchedule, SgdState, CYCLE_EPOCHS, LR_MIN_DIVISOR};
use effipose::train::{recalibrate_batch_norm, train, train_step, TrainOptions};
use effipose::{build_variant, Mode, ParamStore, RunConfig, Shape, SigmaSchedule, Tensor, Variant};
use proptest::prelude::*;

fn scalar_store(v: f64) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    s.insert("w", Tensor::full(Shape::vector(1), v), true)
        .unwrap();
    s
}

fn w(s: &ParamStore<f64>) -> f64 {
    s.value("w").unwrap().data()[0]
}

#[test]
fn lambda_inf_examples() {
    let max = 1e-2;
    let min = max / 3000.0;
    let mean = lambda_inf(max, min, 2.0, 2.0).unwrap();
    assert!((mean - 1.826e-4).abs() < 1e-7, "{mean}");
    let four = lambda_inf(max, min, 4.0, 2.0).unwrap();
    assert!((four - 7.303e-4).abs() < 1e-7, "{four}");
    let r = lambda_inf(0.3, 0.3, 1.0, 1.0).unwrap();
    assert!((r - 0.3).abs() < 1e-15);
    assert!(lambda_inf(0.0, 1e-3, 1.0, 1.0).is_err());
    assert!(lambda_inf(1e-2, 1e-3, 1.0, 2.0).is_err());
}

#[test]
fn schedule_shape() {
    let s = ClrSchedule::new(1e-2, &SigmaSchedule::default()).unwrap();
    assert_eq!(s.lr_min, 1e-2 / LR_MIN_DIVISOR);
    assert_eq!(CYCLE_EPOCHS, 3.0);
    assert!((s.lr_at(0.0) - s.lr_min).abs() < 1e-18);
    assert!((s.lr_at(1.5) - 1e-2).abs() < 1e-15);
    assert!((s.lr_at(3.0) - s.lr_min).abs() < 1e-15);
    let peaks: Vec<f64> = (0..200).map(|k| s.peak(k)).collect();
    assert!(peaks.windows(2).all(|p| p[1] < p[0]));
    assert!((peaks[199] - s.lr_inf).abs() < 1e-7);
    assert!((s.lr_inf - 7.303e-4).abs() < 1e-7);
    // after 200 epochs less than 2% of the initial excess over the asymptote remains
    let excess = |k| s.peak(k) - s.lr_inf;
    assert!(excess(66) / excess(0) < 0.02);
}

#[test]
fn out_of_order_rates_rejected() {
    assert!(ClrSchedule::with_params(1.0, 0.1, 2.0, 3.0, 0.9).is_err());
    assert!(ClrSchedule::with_params(1.0, 0.1, 0.05, 3.0, 0.9).is_err());
}

#[test]
fn sgd_examples() {
    let mut s = scalar_store(2.0);
    let mut st = SgdState::default();
    sgd_step(&mut s, [("w", &[0.0][..])], &mut st, 0.5).unwrap();
    assert_eq!(w(&s), 2.0);

    let mut s = scalar_store(0.0);
    let mut st = SgdState::default();
    sgd_step(&mut s, [("w", &[1.0][..])], &mut st, 0.1).unwrap();
    assert_eq!(st.velocity("w").unwrap(), &[-0.1]);
    assert!((w(&s) + 0.1).abs() < 1e-15);
    let first = w(&s);
    sgd_step(&mut s, [("w", &[1.0][..])], &mut st, 0.1).unwrap();
    let second = w(&s) - first;
    assert!((second / first - 1.9).abs() < 1e-12);

    assert!(sgd_step(&mut s, [("w", &[1.0, 2.0][..])], &mut st, 0.1).is_err());
    assert!(sgd_step(&mut s, [("nope", &[1.0][..])], &mut st, 0.1).is_err());
}

#[test]
fn frozen_parameters_stay_put() {
    let mut s = scalar_store(1.0);
    s.set_trainable("w", false);
    sgd_step(&mut s, [("w", &[1.0][..])], &mut SgdState::default(), 0.1).unwrap();
    assert_eq!(w(&s), 1.0);
}

fn tiny() -> (RunConfig, effipose::ModelGraph, effipose::data::Dataset) {
    let mut cfg = RunConfig::named(Variant::RT);
    cfg.variant.high_res = 64;
    cfg.train.batch_size = 4;
    cfg.train.augment = false;
    let model = build_variant(&cfg.variant).unwrap();
    (cfg, model, synthetic_dataset(4, 64, 1).unwrap())
}

#[test]
fn zero_rate_epoch_changes_nothing() {
    let (mut cfg, model, _) = tiny();
    cfg.train.epochs = 1;
    let one = synthetic_dataset(1, 64, 2).unwrap();
    let mut p = model.graph.init_params::<f32>(5).unwrap();
    let before = p.clone();
    let opts = TrainOptions {
        fixed_lr: Some(0.0),
        ..Default::default()
    };
    train(&cfg, &model, &one, &mut p, &mut SgdState::default(), &opts).unwrap();
    for (a, b) in p.iter().zip(before.iter()) {
        if a.trainable {
            assert_eq!(a.value.data(), b.value.data(), "{}", a.name);
        }
    }
}

#[test]
fn fixed_batch_loss_decreases() {
    let (mut cfg, _, data) = tiny();
    cfg.variant.dropout_rate = 0.0;
    let model = build_variant(&cfg.variant).unwrap();
    let batch = effipose::data::make_batch::<f32>(
        &data,
        &[0, 1, 2, 3],
        &model,
        None,
        &cfg.train.sigma,
        cfg.train.paf_width,
        0,
        0.0,
    )
    .unwrap();
    let mut p = model.graph.init_params::<f32>(3).unwrap();
    let mut st = SgdState::default();
    let mut losses = Vec::new();
    for step in 0..50 {
        losses.push(train_step(&model, &mut p, &mut st, &batch, 1e-3, step).unwrap());
    }
    let drops = losses.windows(2).filter(|l| l[1] < l[0]).count();
    assert_eq!(drops, 49, "{losses:?}");
}

#[test]
fn recalibrated_statistics_match_the_batch() {
    let (mut cfg, _, data) = tiny();
    cfg.variant.dropout_rate = 0.0;
    let model = build_variant(&cfg.variant).unwrap();
    let mut p = model.graph.init_params::<f32>(4).unwrap();
    let batch = effipose::data::make_batch::<f32>(
        &data,
        &[0, 1, 2, 3],
        &model,
        None,
        &cfg.train.sigma,
        1.0,
        0,
        0.0,
    )
    .unwrap();
    let mut st = SgdState::default();
    for step in 0..3 {
        train_step(&model, &mut p, &mut st, &batch, 0.5, step).unwrap();
    }
    let out = |p: &ParamStore<f32>, mode| {
        let run = model
            .graph
            .forward(p, vec![batch.images.clone()], mode, 0)
            .unwrap();
        run.output_tensor(&model.final_head().name).unwrap().clone()
    };
    let reference = out(&p, Mode::Train);
    let lagged = out(&p, Mode::Infer).max_abs_diff(&reference);
    recalibrate_batch_norm(&model, &mut p, &data, 4).unwrap();
    let fresh = out(&p, Mode::Infer).max_abs_diff(&reference);
    assert!(
        fresh < 1e-4 && fresh < lagged,
        "lagged {lagged}, recalibrated {fresh}"
    );
    assert!(recalibrate_batch_norm(&model, &mut p, &data, 0).is_err());
}

proptest! {
    #[test]
    fn lr_stays_between_bounds(e in 0.0f64..400.0, max in 1e-4f64..1.0) {
        let s = ClrSchedule::new(max, &SigmaSchedule::default()).unwrap();
        let k = (e / 3.0).floor() as usize;
        let lr = s.lr_at(e);
        prop_assert!(lr >= s.lr_min * (1.0 - 1e-12));
        prop_assert!(lr <= s.peak(k) * (1.0 + 1e-12));
    }

    #[test]
    fn lr_is_continuous(e in 0.0f64..400.0) {
        let s = ClrSchedule::new(1e-2, &SigmaSchedule::default()).unwrap();
        let h = 1e-7;
        // slope is bounded by the steepest rise of the first cycle
        let slope = 2.0 * (s.lr_max - s.lr_min) / 3.0;
        prop_assert!((s.lr_at(e + h) - s.lr_at(e)).abs() <= slope * h * 1.01 + 1e-15);
    }

    #[test]
    fn lambda_inf_symmetry_and_doubling(a in 1e-5f64..1.0, b in 1e-5f64..1.0, s in 0.5f64..4.0, d in 0.0f64..3.0) {
        let x = lambda_inf(a, b, s + d, s).unwrap();
        let y = lambda_inf(b, a, s + d, s).unwrap();
        prop_assert!((x - y).abs() <= 1e-12 * x);
        let z = lambda_inf(a, b, s + d + 1.0, s).unwrap();
        prop_assert!((z / x - 2.0).abs() < 1e-12);
    }

    #[test]
    fn zero_momentum_is_plain_descent(p0 in -5.0f64..5.0, grads in prop::collection::vec(-3.0f64..3.0, 1..8), rate in 0.0f64..1.0) {
        let mut s = scalar_store(p0);
        let mut st = SgdState::new(0.0);
        let mut plain = p0;
        for g in &grads {
            sgd_step(&mut s, [("w", &[*g][..])], &mut st, rate).unwrap();
            plain -= rate * g;
        }
        prop_assert!((w(&s) - plain).abs() < 1e-12);
    }
}
