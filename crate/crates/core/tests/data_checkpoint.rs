use std::fs;

use scmn::checkpoint::{self, fnv1a64};
use scmn::data::{
    gen_dataset, read_pgm, read_ppm, render_sample, write_pgm, DatasetManifest, CLASS_NAMES,
};
use scmn::params::ModelParams;
use scmn::tensor::Tensor;
use scmn::vit::EncoderConfig;
use scmn::Error;

#[test]
fn generation_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (ta, sa) = gen_dataset(a.path(), 24, 8, 32, 7).unwrap();
    let (tb, sb) = gen_dataset(b.path(), 24, 8, 32, 7).unwrap();
    assert_eq!(ta.to_text(), tb.to_text());
    assert_eq!(sa.to_text(), sb.to_text());
    for e in ta.entries.iter().chain(&sa.entries) {
        assert_eq!(
            fs::read(a.path().join(&e.path)).unwrap(),
            fs::read(b.path().join(&e.path)).unwrap(),
            "{}",
            e.path.display()
        );
    }
    let (other, _) = gen_dataset(b.path(), 24, 8, 32, 8).unwrap();
    assert_ne!(other.to_text(), ta.to_text());
}

#[test]
fn manifest_round_trips_and_boxes_are_valid() {
    let dir = tempfile::tempdir().unwrap();
    let (train, _) = gen_dataset(dir.path(), 40, 0, 64, 3).unwrap();
    let back = DatasetManifest::read(&dir.path().join("train.txt")).unwrap();
    assert_eq!(back.entries, train.entries);
    assert_eq!(back.seed, 3);
    assert_eq!(back.class_names.len(), CLASS_NAMES.len());
    for e in &back.entries {
        let img = read_ppm(&back.image_path(e)).unwrap();
        assert_eq!(img.dims(), &[3, 64, 64]);
        assert!(e.label < CLASS_NAMES.len());
        for b in &e.boxes {
            assert!(b.area() >= 64 && b.within(64, 64), "{b:?}");
        }
    }
    assert_eq!(back.load_samples().unwrap().len(), 40);
}

#[test]
fn class_histogram_is_near_uniform() {
    let dir = tempfile::tempdir().unwrap();
    let (train, _) = gen_dataset(dir.path(), 800, 0, 32, 1).unwrap();
    let mut counts = [0usize; 8];
    for e in &train.entries {
        counts[e.label] += 1;
    }
    let expect = 800.0 / 8.0;
    for c in counts {
        assert!((c as f64 - expect).abs() / expect < 0.1, "{counts:?}");
    }
}

#[test]
fn rendered_boxes_hold_the_shape() {
    for seed in 0..400u64 {
        let label = (seed % 8) as usize;
        let size = [32, 48, 64][(seed % 3) as usize];
        let (img, b) = render_sample(seed, label, size).unwrap();
        assert!(b.area() >= 64 && b.within(size, size));
        assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
    assert!(render_sample(0, 0, 24).is_err());
    assert!(render_sample(0, 8, 64).is_err());
}

#[test]
fn unwritable_directory_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("plain");
    fs::write(&file, b"x").unwrap();
    assert!(gen_dataset(&file.join("sub"), 2, 2, 32, 0).is_err());
}

#[test]
fn pgm_round_trip_is_normalized() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.pgm");
    write_pgm(&p, &Tensor::from_fn(&[4, 5], |i| i as f64 * 3.0 - 7.0)).unwrap();
    let back = read_pgm(&p).unwrap();
    assert_eq!(back.dims(), &[4, 5]);
    assert_eq!(back.data()[0], 0.0);
    assert_eq!(back.data()[19], 1.0);
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let cfg = EncoderConfig::tiny();
    let params = ModelParams::init(&cfg, 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    checkpoint::save(&path, &params).unwrap();
    let back = checkpoint::load(&path, &cfg).unwrap();
    for ((na, a), (nb, b)) in params.iter().zip(back.iter()) {
        assert_eq!(na, nb);
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b), "{na}");
    }
    assert_eq!(
        checkpoint::to_bytes(&back).unwrap(),
        fs::read(&path).unwrap()
    );
}

#[test]
fn corrupted_checkpoint_is_refused() {
    let cfg = EncoderConfig::tiny();
    let params = ModelParams::init(&cfg, 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    checkpoint::save(&path, &params).unwrap();
    let mut bytes = fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x10;
    fs::write(&path, &bytes).unwrap();
    let err = checkpoint::load(&path, &cfg).unwrap_err();
    assert!(matches!(err, Error::Checkpoint(_)), "{err}");
    assert!(err.to_string().contains("checksum"), "{err}");

    let mut other = EncoderConfig::tiny();
    other.embed_dim = 12;
    other.heads = 3;
    checkpoint::save(&path, &params).unwrap();
    assert!(checkpoint::load(&path, &other).is_err());
}

#[test]
fn fnv_reference_values() {
    assert_eq!(fnv1a64(b""), 0xcbf2_9ce4_8422_2325);
    assert_eq!(fnv1a64(b"a"), 0xaf63_dc4c_8601_ec8c);
}
