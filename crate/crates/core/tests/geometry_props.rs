mod common;

use mspad::geometry::{nms, BBox, ClassId, ScoredBox};
use proptest::prelude::*;

fn grid_box() -> impl Strategy<Value = BBox> {
    (0i32..200, 0i32..200, 0i32..80, 0i32..80)
        .prop_map(|(x, y, w, h)| BBox::new(x as f64, y as f64, (x + w) as f64, (y + h) as f64).unwrap())
}

/// Coordinates on a 1/64 px lattice, so translation by whole pixels is exact.
fn fine_box() -> impl Strategy<Value = BBox> {
    (0i32..64_000, 0i32..64_000, 1i32..6_400, 1i32..6_400).prop_map(|(x, y, w, h)| {
        let s = |v: i32| v as f64 / 64.0;
        BBox::new(s(x), s(y), s(x + w), s(y + h)).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn iou_symmetric_and_bounded(a in grid_box(), b in grid_box()) {
        let (ab, ba) = (a.iou(&b), b.iou(&a));
        prop_assert_eq!(ab, ba);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(ab == 1.0, a == b && !a.is_degenerate());
        prop_assert_eq!(ab, common::ref_iou(a.to_array(), b.to_array()));
    }

    #[test]
    fn translation_preserves_area_and_iou(a in fine_box(), b in fine_box(), dx in -5000i32..5000, dy in -5000i32..5000) {
        let (dx, dy) = (dx as f64, dy as f64);
        let (ta, tb) = (a.translate(dx, dy), b.translate(dx, dy));
        prop_assert_eq!(ta.area(), a.area());
        prop_assert_eq!(ta.iou(&tb), a.iou(&b));
        prop_assert_eq!(ta.translate(-dx, -dy), a);
    }

    #[test]
    fn clip_is_contained(a in grid_box(), r in grid_box()) {
        match a.clip(&r) {
            Some(c) => {
                prop_assert!(r.contains(&c) && a.contains(&c));
                prop_assert_eq!(c.area(), a.intersection_area(&r));
            }
            None => prop_assert_eq!(a.intersection_area(&r), 0.0),
        }
    }
}

#[test]
fn nms_matches_reference_and_is_idempotent() {
    for case in 0..1500u64 {
        let n = (case % 51) as usize;
        let boxes = common::random_boxes(case, n);
        for thr in [0.3, 0.5, 0.7] {
            let got = nms(&boxes, thr);
            let want: Vec<ScoredBox> = common::ref_nms(&boxes, thr).into_iter().map(|i| boxes[i]).collect();
            assert_eq!(got, want, "case {case}, threshold {thr}");
            assert_eq!(nms(&got, thr), got, "idempotence, case {case}");
            assert!(got.windows(2).all(|w| w[0].score >= w[1].score));
        }
    }
}

#[test]
fn nms_never_suppresses_across_classes() {
    let b = BBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
    let boxes: Vec<_> = (0..5).map(|c| ScoredBox::new(b, ClassId(c), 0.5).unwrap()).collect();
    assert_eq!(nms(&boxes, 0.1).len(), 5);
}
