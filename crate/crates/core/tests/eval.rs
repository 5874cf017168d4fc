use danet::eval::*;
use danet::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;

use common::coco_oracle::{ann, exact, oracle_at, pred, random_scene};

// ---------------------------------------------------------------- oks

#[test]
fn oks_exact_far_and_closed_form() {
    let g = ann(1, 1, 400.0, &[(10.0, 10.0, 2), (20.0, 5.0, 1), (0.0, 0.0, 0)]);
    let k = [0.1, 0.2, 0.3];
    assert_eq!(oks(&[(10.0, 10.0), (20.0, 5.0), (99.0, 99.0)], &g, &k).unwrap(), 1.0);
    assert_eq!(oks(&[(1e9, 1e9), (-1e9, 1e9), (0.0, 0.0)], &g, &k).unwrap(), 0.0);
    // one labeled keypoint at d² = 2·s²·κ²
    let one = ann(2, 1, 400.0, &[(0.0, 0.0, 0), (3.0, 4.0, 2)]);
    let kappa = [0.7, 0.25];
    let d = (2.0f64 * 400.0 * 0.25 * 0.25).sqrt();
    let v = oks(&[(50.0, 50.0), (3.0 + d, 4.0)], &one, &kappa).unwrap();
    assert!((v - (-1.0f64).exp()).abs() < 1e-9, "{v}");
}

#[test]
fn oks_errors_are_distinct() {
    let none = ann(1, 1, 100.0, &[(1.0, 1.0, 0), (2.0, 2.0, 0)]);
    assert!(matches!(oks(&[(0.0, 0.0), (0.0, 0.0)], &none, &[0.1, 0.1]), Err(Error::NoLabeledKeypoints)));
    let g = ann(1, 1, 100.0, &[(1.0, 1.0, 2)]);
    assert!(matches!(oks(&[(0.0, 0.0), (0.0, 0.0)], &g, &[0.1]), Err(Error::Shape { .. })));
    let flat = ann(1, 1, 0.0, &[(1.0, 1.0, 2)]);
    assert!(matches!(oks(&[(0.0, 0.0)], &flat, &[0.1]), Err(Error::InvalidArgument { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn oks_is_translation_and_scale_invariant(seed in any::<u64>(), c in 0.25f64..4.0, tx in -50.0f64..50.0, ty in -50.0f64..50.0) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let kps: Vec<(f64, f64, u8)> = (0..17).map(|_| (r.random_range(0.0..100.0), r.random_range(0.0..100.0), r.random_range(0..3u8))).collect();
        prop_assume!(kps.iter().any(|k| k.2 > 0));
        let p: Vec<(f64, f64)> = kps.iter().map(|k| (k.0 + r.random_range(-8.0..8.0), k.1 + r.random_range(-8.0..8.0))).collect();
        let area = r.random_range(500.0..5000.0);
        let base = oks(&p, &ann(1, 1, area, &kps), &COCO_KAPPA).unwrap();
        let moved_g: Vec<_> = kps.iter().map(|k| (k.0 + tx, k.1 + ty, k.2)).collect();
        let moved_p: Vec<_> = p.iter().map(|q| (q.0 + tx, q.1 + ty)).collect();
        prop_assert!((oks(&moved_p, &ann(1, 1, area, &moved_g), &COCO_KAPPA).unwrap() - base).abs() < 1e-9);
        let scaled_g: Vec<_> = kps.iter().map(|k| (k.0 * c, k.1 * c, k.2)).collect();
        let scaled_p: Vec<_> = p.iter().map(|q| (q.0 * c, q.1 * c)).collect();
        prop_assert!((oks(&scaled_p, &ann(1, 1, area * c * c, &scaled_g), &COCO_KAPPA).unwrap() - base).abs() < 1e-9);
        prop_assert!((0.0..=1.0).contains(&base));
    }
}

// ---------------------------------------------------------------- coco_ap oracle

#[test]
fn coco_ap_matches_exhaustive_oracle() {
    let kappa = [0.3, 0.4, 0.5];
    let mut r = ChaCha8Rng::seed_from_u64(2024);
    let (mut cases, mut partial, mut graded) = (0, 0, 0);
    for np in 0..=3 {
        for ng in 1..=3 {
            for _ in 0..20 {
                let (preds, gts) = random_scene(&mut r, np, ng);
                let res = coco_ap(&preds, &gts, &kappa).unwrap();
                let per: Vec<(f64, f64)> = oks_thresholds().iter().map(|&t| oracle_at(&preds, &gts, &kappa, t)).collect();
                for (i, (ap, _)) in per.iter().enumerate() {
                    assert_eq!(res.ap_per_threshold[i], *ap, "case {cases} threshold {i}");
                }
                let ap = per.iter().map(|p| p.0).sum::<f64>() / 10.0;
                let ar = per.iter().map(|p| p.1).sum::<f64>() / 10.0;
                assert!((res.ap - ap).abs() < 1e-15 && (res.ar - ar).abs() < 1e-15, "case {cases}");
                assert_eq!((res.ap50, res.ap75), (per[0].0, per[5].0));
                cases += 1;
                partial += (res.ap > 0.0 && res.ap < 1.0) as usize;
                graded += (per[0].0 != per[9].0) as usize;
            }
        }
    }
    assert!(cases >= 200);
    // the scenes exercise partial matches and threshold-dependent outcomes
    assert!(partial >= 50 && graded >= 50, "{partial} {graded}");
}

#[test]
fn handcrafted_scene_with_one_miss() {
    let kappa = [0.5, 0.5];
    let gts = vec![
        ann(0, 1, 100.0, &[(0.0, 0.0, 2), (10.0, 0.0, 2)]),
        ann(1, 1, 100.0, &[(50.0, 50.0, 2), (60.0, 50.0, 2)]),
        ann(2, 1, 100.0, &[(100.0, 0.0, 2), (110.0, 0.0, 2)]),
    ];
    let preds = vec![
        exact(&gts[0], 0.9),
        pred(1, &[(51.0, 50.0), (61.0, 50.0)], 0.8),
        pred(1, &[(200.0, 200.0), (210.0, 200.0)], 0.7),
    ];
    let res = coco_ap(&preds, &gts, &kappa).unwrap();
    // OKS of the shifted prediction: exp(−1/(2·100·0.25)) = exp(−0.02) ≈ 0.980, a match at every threshold
    // precision 1,1 at recall 1/3, 2/3; the miss never reaches recall 1
    let expected = 67.0 / 101.0;
    assert!((res.ap - expected).abs() < 1e-12, "{res:?}");
    assert!((res.ar - 2.0 / 3.0).abs() < 1e-12);
    let per: Vec<(f64, f64)> = oks_thresholds().iter().map(|&t| oracle_at(&preds, &gts, &kappa, t)).collect();
    assert!((per.iter().map(|p| p.0).sum::<f64>() / 10.0 - res.ap).abs() < 1e-15);
}

#[test]
fn perfect_predictions_score_one_whatever_the_scores() {
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let gts: Vec<InstanceAnnotation> = (0..6)
        .map(|i| {
            let kps: Vec<(f64, f64, u8)> = (0..17).map(|_| (r.random_range(0.0..300.0), r.random_range(0.0..300.0), 2)).collect();
            ann(i, i / 2, r.random_range(500.0..20000.0), &kps)
        })
        .collect();
    let preds: Vec<Prediction> = gts.iter().map(|g| exact(g, r.random_range(0.0..1.0))).collect();
    let res = coco_ap(&preds, &gts, &COCO_KAPPA).unwrap();
    assert_eq!((res.ap, res.ap50, res.ap75, res.ar), (1.0, 1.0, 1.0, 1.0));
}

#[test]
fn no_predictions_score_zero() {
    let gts = vec![ann(0, 1, 100.0, &[(1.0, 1.0, 2)])];
    let res = coco_ap(&[], &gts, &[0.1]).unwrap();
    assert_eq!((res.ap, res.ar), (0.0, 0.0));
    assert!(coco_ap(&[], &[], &[0.1]).is_err());
}

#[test]
fn area_ranges_split_at_96_squared() {
    let kps = [(10.0, 10.0, 2), (30.0, 40.0, 2)];
    let medium = ann(0, 1, 50.0 * 50.0, &kps);
    let large = ann(1, 2, 200.0 * 200.0, &kps);
    let preds = vec![exact(&medium, 0.9)];
    let res = coco_ap(&preds, &[medium.clone(), large.clone()], &[0.1, 0.1]).unwrap();
    assert_eq!(res.apm, Some(1.0));
    assert_eq!(res.apl, Some(0.0));
    assert!(res.ap < 1.0);
    let only_medium = coco_ap(&preds, &[medium], &[0.1, 0.1]).unwrap();
    assert_eq!(only_medium.apl, None);
    // an area-tagged prediction in the other range does not count against it
    let stray = Prediction { area: Some(300.0 * 300.0), ..exact(&large, 0.95) };
    let stray = Prediction { image_id: 1, keypoints: vec![(500.0, 500.0), (600.0, 600.0)], ..stray };
    let res = coco_ap(&[preds[0].clone(), stray], &[ann(0, 1, 2500.0, &kps)], &[0.1, 0.1]).unwrap();
    assert_eq!(res.apm, Some(1.0));
    assert!(res.ap < 1.0);
}

#[test]
fn unlabeled_annotations_are_ignored() {
    let g = ann(0, 1, 100.0, &[(1.0, 1.0, 2)]);
    let empty = ann(1, 1, 100.0, &[(0.0, 0.0, 0)]);
    let res = coco_ap(&[exact(&g, 0.5)], &[g.clone(), empty], &[0.1]).unwrap();
    assert_eq!(res.ap, 1.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn coco_ap_depends_only_on_score_order(seed in any::<u64>(), a in 0.1f64..5.0, b in -3.0f64..3.0) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let (preds, gts) = random_scene(&mut r, 3, 3);
        let moved: Vec<Prediction> = preds.iter().map(|p| Prediction { score: (a * p.score + b).exp(), ..p.clone() }).collect();
        prop_assert_eq!(coco_ap(&preds, &gts, &[0.3, 0.4, 0.5]).unwrap(), coco_ap(&moved, &gts, &[0.3, 0.4, 0.5]).unwrap());
    }
}

// ---------------------------------------------------------------- pckh

fn head_ann(kps: &[(f64, f64, u8)], head: Option<f64>) -> InstanceAnnotation {
    InstanceAnnotation { head_length: head, ..ann(0, 0, 1.0, kps) }
}

#[test]
fn pckh_exact_and_inclusive_boundary() {
    let g = head_ann(&[(10.0, 10.0, 2), (20.0, 20.0, 1)], Some(10.0));
    let r = pckh(&[vec![(10.0, 10.0), (20.0, 20.0)]], std::slice::from_ref(&g), 0.5).unwrap();
    assert_eq!(r.mean, 1.0);
    // displaced by exactly 0.5 · 10 = 5 = |(3, 4)|
    let r = pckh(&[vec![(13.0, 14.0), (17.0, 16.0)]], std::slice::from_ref(&g), 0.5).unwrap();
    assert_eq!(r.mean, 1.0);
    let r = pckh(&[vec![(13.0, 14.001), (17.0, 16.0)]], &[g], 0.5).unwrap();
    assert_eq!(r.mean, 0.5);
}

#[test]
fn pckh_hand_counted_set() {
    let gts = vec![
        head_ann(&[(0.0, 0.0, 2), (10.0, 0.0, 2), (20.0, 0.0, 2)], Some(4.0)),
        head_ann(&[(0.0, 0.0, 2), (10.0, 0.0, 0), (20.0, 0.0, 2)], Some(8.0)),
        head_ann(&[(0.0, 0.0, 2), (10.0, 0.0, 2), (20.0, 0.0, 2)], None),
        head_ann(&[(0.0, 0.0, 1), (10.0, 0.0, 2), (20.0, 0.0, 0)], Some(2.0)),
    ];
    let preds = vec![
        vec![(1.0, 0.0), (13.0, 0.0), (20.0, 2.0)], // 1 ok, 3 > 2 miss, 2 ok
        vec![(0.0, 5.0), (99.0, 0.0), (24.0, 0.0)], // 5 > 4 miss, unlabeled, 4 ok
        vec![(0.0, 0.0), (10.0, 0.0), (20.0, 0.0)], // skipped
        vec![(0.0, 1.0), (10.0, 1.5), (0.0, 0.0)],  // 1 ok, 1.5 > 1 miss, unlabeled
    ];
    let r = pckh(&preds, &gts, 0.5).unwrap();
    assert_eq!(r.skipped, 1);
    assert_eq!(r.per_joint, vec![Some(2.0 / 3.0), Some(0.0), Some(1.0)]);
    assert!((r.mean - 4.0 / 7.0).abs() < 1e-15);
    let csv = r.to_csv();
    assert!(csv.starts_with("joint,pckh\n0,0.666667\n1,0.000000\n2,1.000000\nmean,0.571429"));
}

#[test]
fn pckh_errors() {
    let g = head_ann(&[(0.0, 0.0, 0)], Some(1.0));
    assert!(matches!(pckh(&[vec![(0.0, 0.0)]], &[g.clone()], 0.5), Err(Error::NoLabeledKeypoints)));
    assert!(pckh(&[], &[g], 0.5).is_err());
}

#[test]
fn head_length_is_point_six_of_the_diagonal() {
    assert!((head_length_from_box((10.0, 20.0, 40.0, 60.0)) - 30.0).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pckh_is_monotone_in_tau(seed in any::<u64>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let gts: Vec<InstanceAnnotation> = (0..5)
            .map(|_| head_ann(&(0..16).map(|_| (r.random_range(0.0..50.0), r.random_range(0.0..50.0), r.random_range(0..3u8))).collect::<Vec<_>>(), Some(r.random_range(2.0..20.0))))
            .collect();
        prop_assume!(gts.iter().any(|g| g.labeled() > 0));
        let preds: Vec<Vec<(f64, f64)>> = gts.iter().map(|g| g.keypoints.iter().map(|k| (k.0 + r.random_range(-10.0..10.0), k.1 + r.random_range(-10.0..10.0))).collect()).collect();
        let mut prev = 0.0;
        for i in 0..=20 {
            let m = pckh(&preds, &gts, i as f64 * 0.1).unwrap().mean;
            prop_assert!(m >= prev);
            prev = m;
        }
    }
}

// ---------------------------------------------------------------- ingestion

const DOC: &str = r#"{
  "info": {"description": "ignored"},
  "images": [{"id": 3, "width": 640, "height": 480, "file_name": "a.jpg"}],
  "annotations": [
    {"id": 10, "image_id": 3, "bbox": [1, 2, 30, 40], "area": 900.5, "category_id": 1, "iscrowd": 0,
     "keypoints": [5, 6, 2, 0, 0, 0, 7, 8, 1], "num_keypoints": 2, "head_box": [0, 0, 30, 40]}
  ],
  "categories": []
}"#;

#[test]
fn annotations_parse_ignoring_unknown_fields() {
    let (images, anns) = parse_annotations(DOC).unwrap();
    assert_eq!(images, vec![CocoImage { id: 3, width: 640, height: 480 }]);
    let a = &anns[0];
    assert_eq!((a.id, a.image_id, a.area), (10, 3, 900.5));
    assert_eq!(a.bbox, (1.0, 2.0, 30.0, 40.0));
    assert_eq!(a.keypoints, vec![(5.0, 6.0, 2), (0.0, 0.0, 0), (7.0, 8.0, 1)]);
    assert!((a.head_length.unwrap() - 30.0).abs() < 1e-12);
}

#[test]
fn malformed_annotations_name_the_offender() {
    let bad_len = DOC.replace("[5, 6, 2, 0, 0, 0, 7, 8, 1]", "[5, 6, 2, 0]");
    assert!(matches!(parse_annotations(&bad_len), Err(Error::Annotation { index: 0, .. })));
    let bad_flag = DOC.replace("[5, 6, 2, 0, 0, 0, 7, 8, 1]", "[5, 6, 3, 0, 0, 0, 7, 8, 1]");
    assert!(matches!(parse_annotations(&bad_flag), Err(Error::Annotation { .. })));
    let bad_count = DOC.replace("\"num_keypoints\": 2", "\"num_keypoints\": 3");
    assert!(matches!(parse_annotations(&bad_count), Err(Error::Annotation { .. })));
    assert!(matches!(parse_annotations("{"), Err(Error::Json(_))));
}

#[test]
fn predictions_parse() {
    let p = parse_predictions(r#"[{"image_id": 3, "category_id": 1, "keypoints": [5, 6, 0.9, 1, 2, 0.1], "score": 0.75}]"#).unwrap();
    assert_eq!(p, vec![Prediction { image_id: 3, keypoints: vec![(5.0, 6.0), (1.0, 2.0)], score: 0.75, area: None }]);
    assert!(parse_predictions(r#"[{"image_id": 3, "keypoints": [1, 2], "score": 1}]"#).is_err());
}

#[test]
fn results_as_csv() {
    let r = CocoResult { ap: 0.5, ap50: 0.75, ap75: 0.25, apm: None, apl: Some(1.0), ar: 0.6, ap_per_threshold: vec![] };
    assert_eq!(r.to_csv(), "metric,value\nAP,0.500000\nAP50,0.750000\nAP75,0.250000\nAPM,\nAPL,1.000000\nAR,0.600000\n");
}
