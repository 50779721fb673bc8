use proptest::prelude::*;
use rand::Rng;
use scmn::localization::{
    extract_box, iou, label_components, largest_component_box, loc_metrics, Box, LocalizationRecord,
};
use scmn::rng::seeded;
use scmn::tensor::Tensor;

const SIDE: usize = 12;

fn fill(mask: &[bool], seen: &mut [bool], y: isize, x: isize, out: &mut Vec<usize>) {
    if y < 0 || x < 0 || y >= SIDE as isize || x >= SIDE as isize {
        return;
    }
    let k = y as usize * SIDE + x as usize;
    if !mask[k] || seen[k] {
        return;
    }
    seen[k] = true;
    out.push(k);
    for dy in -1..=1 {
        for dx in -1..=1 {
            fill(mask, seen, y + dy, x + dx, out);
        }
    }
}

/// Recursive flood fill: every component as a set of pixel indices.
fn oracle_components(mask: &[bool]) -> Vec<Vec<usize>> {
    let mut seen = vec![false; mask.len()];
    let mut out = Vec::new();
    for k in 0..mask.len() {
        if mask[k] && !seen[k] {
            let mut comp = Vec::new();
            fill(
                mask,
                &mut seen,
                (k / SIDE) as isize,
                (k % SIDE) as isize,
                &mut comp,
            );
            comp.sort();
            out.push(comp);
        }
    }
    out
}

fn bbox(pixels: &[usize]) -> Box {
    let xs = pixels.iter().map(|k| k % SIDE);
    let ys = pixels.iter().map(|k| k / SIDE);
    Box::new(
        xs.clone().min().unwrap(),
        ys.clone().min().unwrap(),
        xs.max().unwrap() + 1,
        ys.max().unwrap() + 1,
    )
    .unwrap()
}

#[test]
fn components_match_flood_fill_oracle() {
    let mut rng = seeded(21);
    for trial in 0..200 {
        let density = rng.gen_range(0.1..0.7);
        let mask: Vec<bool> = (0..SIDE * SIDE).map(|_| rng.gen_bool(density)).collect();
        let expected = oracle_components(&mask);
        let (labels, count) = label_components(&mask, SIDE, SIDE);
        assert_eq!(count, expected.len(), "trial {trial}");
        for comp in &expected {
            let l = labels[comp[0]];
            let mut mine: Vec<usize> = (0..labels.len()).filter(|&k| labels[k] == l).collect();
            mine.sort();
            assert_eq!(&mine, comp, "trial {trial}");
        }
        // ties go to the component whose first pixel comes first
        let most = expected.iter().map(Vec::len).max();
        let want = most.map(|n| bbox(expected.iter().find(|c| c.len() == n).unwrap()));
        assert_eq!(
            largest_component_box(&mask, SIDE, SIDE),
            want,
            "trial {trial}"
        );
    }
}

#[test]
fn iou_unit_cases() {
    let a = Box::new(0, 0, 10, 10).unwrap();
    let b = Box::new(5, 5, 15, 15).unwrap();
    assert!((iou(&a, &b) - 1.0 / 7.0).abs() < 1e-12);
    assert_eq!(iou(&a, &a), 1.0);
    assert_eq!(iou(&a, &Box::new(10, 0, 20, 10).unwrap()), 0.0);
    assert!((iou(&a, &Box::new(0, 0, 5, 10).unwrap()) - 0.5).abs() < 1e-12);
}

#[test]
fn exactly_half_is_not_a_hit() {
    let gt = Box::new(0, 0, 10, 10).unwrap();
    let half = Box::new(0, 0, 5, 10).unwrap();
    let rec = LocalizationRecord::new("a", vec![0, 1], half, half, 0, vec![gt]);
    let m = loc_metrics(&[rec]).unwrap();
    assert_eq!((m.top1, m.top5, m.gt_known), (0.0, 0.0, 0.0));
}

#[test]
fn metrics_on_mixed_records() {
    let gt = Box::new(0, 0, 10, 10).unwrap();
    let good = Box::new(0, 0, 10, 9).unwrap();
    let bad = Box::new(20, 20, 30, 30).unwrap();
    let recs = vec![
        LocalizationRecord::new("hit", vec![2, 0, 1, 3, 4, 5], good, good, 2, vec![gt]),
        // wrong top-1 but right box for the known class
        LocalizationRecord::new("top5", vec![1, 2, 0, 3, 4, 5], bad, good, 2, vec![gt]),
        LocalizationRecord::new("miss", vec![2, 0, 1, 3, 4, 5], bad, bad, 2, vec![gt]),
        LocalizationRecord::new("late", vec![0, 1, 3, 4, 5, 2], good, good, 2, vec![gt]),
    ];
    let m = loc_metrics(&recs).unwrap();
    assert_eq!(m.top1, 0.25);
    assert_eq!(m.gt_known, 0.75);
    assert_eq!(m.top5, 0.25);
}

#[test]
fn extracted_box_covers_a_blob() {
    let mut map = Tensor::zeros(&[8, 8]);
    let mut data = map.data().to_vec();
    for y in 2..5 {
        for x in 3..6 {
            data[y * 8 + x] = 1.0;
        }
    }
    map = Tensor::new(&[8, 8], data).unwrap();
    let b = extract_box(&map, 64, 64, 0.5).unwrap();
    // source cell s lands on pixel 9s; the 0.5 level sits half a cell outside
    // the blob, at 22.5 and 49.5 across and 13.5 and 40.5 down
    assert_eq!(b, Box::new(23, 14, 50, 41).unwrap());
    assert_eq!(
        extract_box(&Tensor::zeros(&[8, 8]), 64, 64, 0.5).unwrap(),
        Box::full(64, 64)
    );
}

proptest! {
    #[test]
    fn iou_is_symmetric_and_bounded(a in (0usize..20, 0usize..20, 1usize..20, 1usize..20),
                                    b in (0usize..20, 0usize..20, 1usize..20, 1usize..20)) {
        let a = Box::new(a.0, a.1, a.0 + a.2, a.1 + a.3).unwrap();
        let b = Box::new(b.0, b.1, b.0 + b.2, b.1 + b.3).unwrap();
        let v = iou(&a, &b);
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert_eq!(v, iou(&b, &a));
    }

    #[test]
    fn extracted_box_is_inside_the_image(seed in any::<u64>(), t in 0.05f64..0.95) {
        let mut rng = seeded(seed);
        let map = Tensor::from_fn(&[8, 8], |_| rng.gen_range(-1.0..1.0));
        let b = extract_box(&map, 64, 48, t).unwrap();
        prop_assert!(b.within(48, 64) && b.area() > 0);
    }
}
