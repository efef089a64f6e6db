//! Confidence maps, part affinity fields, sigma schedule and per-head
//! targets.

use effipose::model::HeadKind;
use effipose::skeleton::NUM_KEYPOINTS;
use effipose::supervision::{build_targets, confidence_map, from_grid, paf_map};
use effipose::{
    build_variant, Keypoint, KeypointAnnotation, SigmaSchedule, Variant, VariantConfig,
};
use proptest::prelude::*;

fn at(map: &[f64], w: usize, x: usize, y: usize) -> f64 {
    map[y * w + x]
}

fn person(keypoints: Vec<Keypoint>) -> KeypointAnnotation {
    KeypointAnnotation {
        image: "p.png".into(),
        center: (112.0, 112.0),
        scale: 0.9,
        head_box: [100.0, 20.0, 124.0, 50.0],
        keypoints,
    }
}

#[test]
fn peak_and_sigma_distance() {
    let kp = Keypoint::new(10.0, 7.0, true);
    let m = confidence_map(&kp, 16, 20, 1, 3.0).unwrap();
    assert_eq!(at(&m, 20, 10, 7), 1.0);
    let e = (-1.0f64).exp();
    assert!((e - 0.367879).abs() < 1e-6);
    for (x, y) in [(13, 7), (7, 7), (10, 10), (10, 4)] {
        assert!((at(&m, 20, x, y) - e).abs() < 1e-12, "({x}, {y})");
    }
}

#[test]
fn keypoint_maps_to_nearest_grid_centre() {
    // cell 3 of a stride-8 grid is centred on pixel 27.5
    let kp = Keypoint::new(from_grid(3.0, 8) + 2.0, from_grid(5.0, 8) - 3.0, true);
    let m = confidence_map(&kp, 8, 8, 8, 1.0).unwrap();
    assert_eq!(at(&m, 8, 3, 5), 1.0);
}

#[test]
fn border_pixels_light_the_last_cell() {
    // a 368 px image spans [-0.5, 367.5) in pixel-centre coordinates
    let m = confidence_map(&Keypoint::new(0.0, 367.4, true), 46, 46, 8, 1.0).unwrap();
    assert_eq!(at(&m, 46, 0, 45), 1.0);
    let off = confidence_map(&Keypoint::new(0.0, 367.5, true), 46, 46, 8, 1.0).unwrap();
    assert!(off.iter().all(|&v| v == 0.0));
}

#[test]
fn invisible_and_bad_sigma() {
    let m = confidence_map(&Keypoint::hidden(), 6, 6, 1, 2.0).unwrap();
    assert!(m.iter().all(|&v| v == 0.0));
    assert!(confidence_map(&Keypoint::new(1.0, 1.0, true), 6, 6, 1, 0.0).is_err());
}

#[test]
fn doubling_sigma_quadruples_area() {
    let kp = Keypoint::new(200.0, 200.0, true);
    let area = |sigma: f64| {
        let m = confidence_map(&kp, 401, 401, 1, sigma).unwrap();
        m.iter().filter(|&&v| v > 0.3).count() as f64
    };
    let ratio = area(40.0) / area(20.0);
    assert!((ratio - 4.0).abs() < 0.02, "{ratio}");
}

#[test]
fn paf_band_values() {
    let (a, b) = (
        Keypoint::new(2.0, 5.0, true),
        Keypoint::new(12.0, 5.0, true),
    );
    let (x, y) = paf_map(&a, &b, 12, 16, 1, 1.0);
    assert_eq!(at(&x, 16, 7, 5), 1.0);
    assert_eq!(at(&y, 16, 7, 5), 0.0);
    assert_eq!(at(&x, 16, 7, 6), 1.0);
    assert_eq!(at(&x, 16, 7, 8), 0.0);
    assert_eq!(at(&x, 16, 14, 5), 0.0);

    let (a, b) = (Keypoint::new(1.0, 1.0, true), Keypoint::new(9.0, 9.0, true));
    let (x, y) = paf_map(&a, &b, 12, 12, 1, 1.0);
    let h = std::f64::consts::FRAC_1_SQRT_2;
    assert!((at(&x, 12, 5, 5) - h).abs() < 1e-15);
    assert!((at(&y, 12, 5, 5) - h).abs() < 1e-15);
    assert_eq!((at(&x, 12, 9, 1), at(&y, 12, 9, 1)), (0.0, 0.0));
}

#[test]
fn sigma_schedule_lookup() {
    let s = SigmaSchedule::default();
    assert_eq!(s.sigma_at_epoch(0.0, 8).unwrap(), s.sigma_0());
    assert_eq!(s.sigma_at_epoch(500.0, 8).unwrap(), s.sigma_inf());
    for e in [0.0, 49.9, 50.0, 120.0] {
        assert_eq!(
            s.sigma_at_epoch(e, 4).unwrap(),
            2.0 * s.sigma_at_epoch(e, 8).unwrap()
        );
    }
    assert!(SigmaSchedule::new(Vec::new()).is_err());
}

#[test]
fn targets_per_head() {
    let model = build_variant(&VariantConfig::named(Variant::RT)).unwrap();
    let kps = (0..NUM_KEYPOINTS)
        .map(|k| Keypoint::new(20.0 + 10.0 * k as f64, 100.0, true))
        .collect();
    let t =
        build_targets::<f32>(&person(kps), &model, &SigmaSchedule::default(), 1.0, 0.0).unwrap();
    assert_eq!(t.len(), model.config.keypoint_passes + 2);
    let kinds: Vec<HeadKind> = t.iter().map(|m| m.kind).collect();
    assert_eq!(
        kinds,
        [
            HeadKind::Paf,
            HeadKind::Keypoints,
            HeadKind::Keypoints,
            HeadKind::Upscaled
        ]
    );
    assert_eq!(t[0].maps.shape().c, 30);
    assert_eq!(t[1].maps.shape().h, 28);
    assert_eq!(t[3].maps.shape().h, 224);
    assert_eq!(t[1].sigma_used, 4.0);
    assert_eq!(t[3].sigma_used, 32.0);
    for m in &t[1..] {
        for k in 0..NUM_KEYPOINTS {
            let peak = m.maps.plane(0, k).iter().cloned().fold(f32::MIN, f32::max);
            assert_eq!(peak, 1.0);
        }
    }
}

#[test]
fn invisible_person_gives_zero_targets() {
    let model = build_variant(&VariantConfig::named(Variant::RT)).unwrap();
    let t = build_targets::<f32>(
        &person(vec![Keypoint::hidden(); NUM_KEYPOINTS]),
        &model,
        &SigmaSchedule::default(),
        1.0,
        0.0,
    )
    .unwrap();
    assert!(t.iter().all(|m| m.maps.data().iter().all(|&v| v == 0.0)));
}

proptest! {
    #[test]
    fn map_peaks_at_one_and_is_radial(gx in 2usize..30, gy in 2usize..30, sigma in 0.3f64..6.0) {
        let kp = Keypoint::new(gx as f64, gy as f64, true);
        let m = confidence_map(&kp, 32, 32, 1, sigma).unwrap();
        let max = m.iter().cloned().fold(f64::MIN, f64::max);
        prop_assert_eq!(max, 1.0);
        for y in 0..32 {
            for x in 0..32 {
                let v = at(&m, 32, x, y);
                prop_assert!((0.0..=1.0).contains(&v));
                let (dx, dy) = (x as i64 - gx as i64, y as i64 - gy as i64);
                // mirrored and transposed offsets share the value
                for (mx, my) in [(-dx, dy), (dx, -dy), (dy, dx)] {
                    let (px, py) = (gx as i64 + mx, gy as i64 + my);
                    if (0..32).contains(&px) && (0..32).contains(&py) {
                        prop_assert!((at(&m, 32, px as usize, py as usize) - v).abs() < 1e-15);
                    }
                }
            }
        }
    }

    #[test]
    fn paf_is_unit_or_zero(ax in 0.0f64..40.0, ay in 0.0f64..40.0, bx in 0.0f64..40.0, by in 0.0f64..40.0, w in 0.5f64..3.0) {
        let (x, y) = paf_map(&Keypoint::new(ax, ay, true), &Keypoint::new(bx, by, true), 40, 40, 1, w);
        for (u, v) in x.iter().zip(&y) {
            let n = u * u + v * v;
            prop_assert!(n.abs() < 1e-6 || (n - 1.0).abs() < 1e-6, "{}", n);
        }
    }

    #[test]
    fn schedule_is_non_increasing(mut sigmas in prop::collection::vec(0.5f64..8.0, 1..6), a in 0.0f64..300.0, b in 0.0f64..300.0) {
        sigmas.sort_by(|p, q| q.partial_cmp(p).unwrap());
        let steps = sigmas.iter().enumerate().map(|(i, &s)| (40.0 * i as f64, s)).collect();
        let s = SigmaSchedule::new(steps).unwrap();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(s.reference_sigma(hi).unwrap() <= s.reference_sigma(lo).unwrap());
    }
}
