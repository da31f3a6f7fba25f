use dapass_core::eval::{iou_report, ConfusionMatrix};
use dapass_core::panosynth::LabelMap;
use proptest::prelude::*;

fn map(h: usize, w: usize, data: Vec<u8>) -> LabelMap {
    LabelMap::new(h, w, data).unwrap()
}

fn pairs(c: u8) -> impl Strategy<Value = Vec<(Vec<u8>, Vec<u8>)>> {
    let px = prop_oneof![8 => 0..c, 1 => Just(255u8)];
    prop::collection::vec(
        (prop::collection::vec(0..c, 12), prop::collection::vec(px, 12)),
        1..8,
    )
}

fn matrix(items: &[(Vec<u8>, Vec<u8>)], c: usize) -> ConfusionMatrix {
    let mut cm = ConfusionMatrix::new(c);
    for (p, g) in items {
        cm.accumulate(&map(3, 4, p.clone()), &map(3, 4, g.clone())).unwrap();
    }
    cm
}

proptest! {
    #[test]
    fn accumulation_is_order_independent(items in pairs(5), seed in any::<u64>()) {
        let mut shuffled = items.clone();
        let n = shuffled.len();
        let mut s = seed;
        for i in (1..n).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            shuffled.swap(i, (s >> 33) as usize % (i + 1));
        }
        let a = matrix(&items, 5);
        let b = matrix(&shuffled, 5);
        prop_assert_eq!(&a, &b);
        // Merging per-image matrices gives the same counts.
        let mut merged = ConfusionMatrix::new(5);
        for it in &items {
            merged.merge(&matrix(std::slice::from_ref(it), 5));
        }
        prop_assert_eq!(&a, &merged);
        let valid: usize = items.iter().map(|(_, g)| g.iter().filter(|&&v| v != 255).count()).sum();
        prop_assert_eq!(a.total(), valid as u64);
    }

    #[test]
    fn miou_is_invariant_to_relabeling(items in pairs(6), perm in Just((0u8..6).collect::<Vec<_>>()).prop_shuffle()) {
        let relabel = |v: &Vec<u8>| v.iter().map(|&l| if l == 255 { 255 } else { perm[l as usize] }).collect::<Vec<_>>();
        let moved: Vec<_> = items.iter().map(|(p, g)| (relabel(p), relabel(g))).collect();
        let a = iou_report(&matrix(&items, 6), &[]);
        let b = iou_report(&matrix(&moved, 6), &[]);
        prop_assert!((a.miou - b.miou).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&a.miou));
        for k in 0..6 {
            prop_assert_eq!(a.per_class[k], b.per_class[perm[k] as usize]);
        }
        prop_assert_eq!(iou_report(&matrix(&items, 6), &[]), a);
    }
}

#[test]
fn two_by_two_toy() {
    let mut cm = ConfusionMatrix::new(2);
    cm.accumulate(&map(2, 2, vec![0, 1, 1, 1]), &map(2, 2, vec![0, 0, 1, 1])).unwrap();
    let r = iou_report(&cm, &[1]);
    assert_eq!(r.per_class, vec![Some(0.5), Some(2.0 / 3.0)]);
    assert!((r.miou - 7.0 / 12.0).abs() < 1e-15);
    assert!((r.minority_miou - 2.0 / 3.0).abs() < 1e-15);
    assert!((r.majority_miou - 0.5).abs() < 1e-15);
}

#[test]
fn zero_union_classes_are_excluded() {
    let mut cm = ConfusionMatrix::new(4);
    cm.accumulate(&map(1, 3, vec![0, 1, 1]), &map(1, 3, vec![0, 1, 255])).unwrap();
    let r = iou_report(&cm, &[2, 3]);
    assert_eq!(r.per_class, vec![Some(1.0), Some(1.0), None, None]);
    assert_eq!(r.miou, 1.0);
    assert_eq!(r.minority_miou, 0.0);
}
