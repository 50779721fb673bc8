use rand::Rng;
use scmn::rng::seeded;
use scmn::shuffle::{
    block_members, global_patch_shuffle, local_patch_shuffle, local_patch_shuffle_grouped,
    BlockGrouping, ShuffleConfig,
};
use scmn::tensor::Tensor;

const PATCH: usize = 4;

fn image(seed: u64) -> Tensor {
    let mut rng = seeded(seed);
    Tensor::from_fn(&[3, 16, 16], |_| rng.gen_range(0.0..1.0))
}

fn sorted(t: &Tensor) -> Vec<f64> {
    let mut v = t.data().to_vec();
    v.sort_by(f64::total_cmp);
    v
}

#[test]
fn thousand_runs_stay_in_blocks_and_keep_pixels() {
    let blocks = block_members(4, 4, BlockGrouping::Spatial).unwrap();
    let img = image(3);
    let reference = sorted(&img);
    let mut changed = 0usize;
    for seed in 0..1000 {
        let (out, rec) =
            local_patch_shuffle(&img, &ShuffleConfig::new(PATCH, 1.0, seed).unwrap()).unwrap();
        assert!(rec.cycles_within(&blocks), "seed {seed}");
        assert_eq!(sorted(&out), reference, "seed {seed}");
        changed += blocks
            .iter()
            .filter(|b| b.iter().any(|&d| rec.permutation[d] != d))
            .count();
    }
    let trials = 1000.0 * blocks.len() as f64;
    let p = 23.0 / 24.0;
    let frac = changed as f64 / trials;
    let se = (p * (1.0 - p) / trials).sqrt();
    assert!(
        (frac - p).abs() <= 3.0 * se,
        "fraction {frac}, expected {p} +- {}",
        3.0 * se
    );
}

#[test]
fn eta_zero_is_identity() {
    let img = image(5);
    for seed in 0..1000 {
        let (out, rec) =
            local_patch_shuffle(&img, &ShuffleConfig::new(PATCH, 0.0, seed).unwrap()).unwrap();
        assert!(rec.is_identity());
        assert_eq!(out, img);
    }
}

#[test]
fn permutation_moves_patch_content() {
    let img = image(9);
    let (out, rec) =
        local_patch_shuffle(&img, &ShuffleConfig::new(PATCH, 1.0, 4).unwrap()).unwrap();
    for (dest, &src) in rec.permutation.iter().enumerate() {
        let (dy, dx) = (dest / 4 * PATCH, dest % 4 * PATCH);
        let (sy, sx) = (src / 4 * PATCH, src % 4 * PATCH);
        for c in 0..3 {
            for y in 0..PATCH {
                for x in 0..PATCH {
                    assert_eq!(out.at(&[c, dy + y, dx + x]), img.at(&[c, sy + y, sx + x]));
                }
            }
        }
    }
}

#[test]
fn flattened_grouping_and_global_shuffle() {
    let img = image(1);
    let flat = block_members(4, 4, BlockGrouping::Flattened).unwrap();
    let cfg = ShuffleConfig::new(PATCH, 1.0, 8).unwrap();
    let (out, rec) = local_patch_shuffle_grouped(&img, &cfg, BlockGrouping::Flattened).unwrap();
    assert!(rec.cycles_within(&flat));
    assert_eq!(sorted(&out), sorted(&img));
    let (g, grec) = global_patch_shuffle(&img, &cfg).unwrap();
    assert_eq!(sorted(&g), sorted(&img));
    let mut p = grec.permutation.clone();
    p.sort();
    assert_eq!(p, (0..16).collect::<Vec<_>>());
}

#[test]
fn seeded_runs_reproduce() {
    let img = image(2);
    let cfg = ShuffleConfig::new(PATCH, 0.5, 77).unwrap();
    assert_eq!(
        local_patch_shuffle(&img, &cfg).unwrap(),
        local_patch_shuffle(&img, &cfg).unwrap()
    );
}

#[test]
fn rejects_bad_inputs() {
    assert!(ShuffleConfig::new(PATCH, 1.5, 0).is_err());
    let odd = Tensor::zeros(&[3, 12, 12]);
    assert!(local_patch_shuffle(&odd, &ShuffleConfig::new(PATCH, 1.0, 0).unwrap()).is_err());
}
