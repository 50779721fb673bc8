use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "image_size = 32\npatch_size = 8\nembed_dim = 16\nlayers = 1\nheads = 2\nepochs = 1\nbatch_size = 4\n";

fn scmn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scmn"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = scmn(args);
    assert!(
        out.status.success(),
        "scmn {args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> String {
    p.display().to_string()
}

#[test]
fn small_pipeline_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.cfg");
    fs::write(&cfg, SMALL).unwrap();
    let data = dir.path().join("data");
    let (cfg, data) = (s(&cfg), s(&data));
    ok(&[
        "gen-data",
        "--config",
        &cfg,
        "--out",
        &data,
        "--n-train",
        "8",
        "--n-test",
        "4",
        "--seed",
        "3",
    ]);

    let mut metrics = Vec::new();
    for run in ["a", "b"] {
        let ckpt = s(&dir.path().join(format!("{run}.ckpt")));
        let out = s(&dir.path().join(format!("{run}.txt")));
        let train = ok(&["train", "--config", &cfg, "--data", &data, "--out", &ckpt]);
        assert!(train.contains("steps 2"), "{train}");
        // the saved config rebuilds the small model without --config
        let eval = ok(&[
            "eval",
            "--data",
            &data,
            "--checkpoint",
            &ckpt,
            "--out",
            &out,
        ]);
        assert!(eval.contains("gt_known_loc"));
        metrics.push(fs::read(&out).unwrap());
    }
    assert_eq!(metrics[0], metrics[1]);

    let ckpt = s(&dir.path().join("a.ckpt"));
    let image = s(&dir.path().join("data/test/00000.ppm"));
    let heat = dir.path().join("heat.pgm");
    let inf = ok(&[
        "infer",
        "--image",
        &image,
        "--checkpoint",
        &ckpt,
        "--out",
        &s(&heat),
    ]);
    assert!(inf.lines().any(|l| l.starts_with("ranked ")));
    assert!(heat.exists());

    let demo = dir.path().join("demo");
    let out = ok(&[
        "match-demo",
        "--checkpoint",
        &ckpt,
        "--label",
        "2",
        "--out",
        &s(&demo),
    ]);
    assert!(out.contains("positions 16x16"), "{out}");
    for f in ["primal.ppm", "shuffled.ppm", "plan.pgm"] {
        assert!(demo.join(f).exists(), "{f}");
    }
}

#[test]
fn bad_input_is_reported() {
    let out = scmn(&["train", "--data", "/nonexistent/scmn"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("gen-data"));
    let out = scmn(&["gen-data", "--set", "epochs"]);
    assert!(!out.status.success());
    let out = scmn(&["gen-data", "--set", "no_such_key=1"]);
    assert!(!out.status.success());
}
