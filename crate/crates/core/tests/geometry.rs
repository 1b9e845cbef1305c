use proptest::prelude::*;
use pseudomine::geometry::{intersection_area, nms};
use pseudomine::{rotated_iou, RotatedBox};

fn arb_box() -> impl Strategy<Value = RotatedBox> {
    (-20.0..20.0f64, -20.0..20.0f64, 0.5..25.0f64, 0.5..25.0f64, -7.0..7.0f64)
        .prop_map(|(cx, cy, w, h, t)| RotatedBox::new(cx, cy, w, h, t).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 10_000, ..ProptestConfig::default() })]

    #[test]
    fn iou_is_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
        let ab = rotated_iou(&a, &b);
        let ba = rotated_iou(&b, &a);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!((ab - ba).abs() < 1e-9);
    }

    #[test]
    fn intersection_never_exceeds_smaller_area(a in arb_box(), b in arb_box()) {
        let i = intersection_area(&a, &b);
        prop_assert!(i >= 0.0 && i <= a.area().min(b.area()) * (1.0 + 1e-9));
    }

    #[test]
    fn self_iou_is_one(a in arb_box()) {
        prop_assert_eq!(rotated_iou(&a, &a), 1.0);
    }

    #[test]
    fn translation_preserves_iou(a in arb_box(), b in arb_box(), dx in -50.0..50.0f64, dy in -50.0..50.0f64) {
        let moved = rotated_iou(&a.translated(dx, dy), &b.translated(dx, dy));
        prop_assert!((rotated_iou(&a, &b) - moved).abs() < 1e-7);
    }
}

proptest! {
    #[test]
    fn nms_survivors_do_not_overlap(boxes in proptest::collection::vec(arb_box(), 1..20)) {
        let scores: Vec<f64> = (0..boxes.len()).map(|i| 1.0 / (1.0 + i as f64)).collect();
        let kept = nms(&boxes, &scores, 0.4).unwrap();
        prop_assert!(kept.contains(&0));
        for (i, &a) in kept.iter().enumerate() {
            for &b in &kept[i + 1..] {
                prop_assert!(rotated_iou(&boxes[a], &boxes[b]) <= 0.4);
            }
        }
    }
}
