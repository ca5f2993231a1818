use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dclscam"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn dclscam")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn value<'a>(stdout: &'a str, key: &str) -> &'a str {
    stdout
        .lines()
        .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
        .unwrap_or_else(|| panic!("no {key}= in {stdout}"))
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen(dir: &Path, n: usize, seed: u64) -> PathBuf {
    ok(&["gen", "--n", &n.to_string(), "--size", "32", "--classes", "3", "--seed", &seed.to_string(), "--out", s(dir)]);
    dir.join("manifest.jsonl")
}

#[test]
fn gen_is_deterministic_and_checks_classes() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let out = ok(&["gen", "--n", "100", "--size", "32", "--classes", "3", "--seed", "7", "--out", s(&a)]);
    assert_eq!(value(&out, "samples"), "100");
    gen(&b, 100, 7);
    let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 201);
    for n in names {
        assert_eq!(fs::read(a.join(&n)).unwrap(), fs::read(b.join(&n)).unwrap(), "{n:?}");
    }
    let bad = run(&["gen", "--n", "5", "--classes", "9", "--out", s(&tmp.path().join("c"))]);
    assert_eq!(bad.status.code(), Some(2));
    let unknown = run(&["gen", "--n", "5", "--out", s(&tmp.path().join("c")), "--colour", "red"]);
    assert_eq!(unknown.status.code(), Some(2));
}

#[test]
fn train_overfits_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let data = gen(&tmp.path().join("d"), 10, 1);
    let train = |out: &Path| {
        ok(&[
            "train", "--arch", "baseline", "--data", s(&data), "--epochs", "200", "--batch-size", "10", "--val-frac", "0",
            "--seed", "3", "--out", s(out),
        ])
    };
    let (a, b) = (tmp.path().join("a.ckpt"), tmp.path().join("b.ckpt"));
    let out = train(&a);
    assert_eq!(value(&out, "train_top1"), "1.0000");
    train(&b);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(fs::read(a.with_extension("train.csv")).unwrap(), fs::read(b.with_extension("train.csv")).unwrap());
    let log = fs::read_to_string(a.with_extension("train.csv")).unwrap();
    assert_eq!(log.lines().count(), 201);
}

#[test]
fn gaussian_dcls_checkpoints_sigma() {
    let tmp = tempfile::tempdir().unwrap();
    let data = gen(&tmp.path().join("d"), 20, 2);
    let ckpt = tmp.path().join("g.ckpt");
    let out = ok(&[
        "train", "--arch", "starrelu_dcls", "--interp", "gaussian", "--data", s(&data), "--epochs", "1", "--out", s(&ckpt),
    ]);
    assert_eq!(value(&out, "arch"), "starrelu_dcls");
    assert!(value(&out, "val_top1").parse::<f64>().is_ok());
    let side = fs::read_to_string(ckpt.with_extension("json")).unwrap();
    assert!(side.contains("stage1.dw.sigma"));
    let bytes = fs::read(&ckpt).unwrap();
    assert!(bytes.windows(15).any(|w| w == b"stage3.dw.sigma"));
}

#[test]
fn config_file_is_overridden_by_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let data = gen(&tmp.path().join("d"), 12, 3);
    let cfg = tmp.path().join("cfg.json");
    fs::write(&cfg, r#"{"arch": "starrelu", "epochs": 5, "width": 4, "classes": 3}"#).unwrap();
    let ckpt = tmp.path().join("m.ckpt");
    let out = ok(&["train", "--config", s(&cfg), "--epochs", "2", "--data", s(&data), "--out", s(&ckpt)]);
    assert_eq!(value(&out, "arch"), "starrelu");
    assert_eq!(fs::read_to_string(ckpt.with_extension("train.csv")).unwrap().lines().count(), 3);
    fs::write(&cfg, r#"{"arch": "transformer"}"#).unwrap();
    let bad = run(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&ckpt)]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn divergence_exits_with_three() {
    let tmp = tempfile::tempdir().unwrap();
    let data = gen(&tmp.path().join("d"), 8, 4);
    let out = run(&["train", "--data", s(&data), "--lr", "1e30", "--epochs", "3", "--out", s(&tmp.path().join("x.ckpt"))]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("diverged at step"));
}

#[test]
fn explain_rigged_fixture() {
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = fixture("cancel.ckpt");
    let image = fixture("cancel.ppm");
    let explain = |method: &str, out: &Path, extra: &[&str]| {
        let mut args = vec!["explain", "--ckpt", s(&ckpt), "--image", s(&image), "--class", "0", "--method", method, "--out", s(out)];
        args.extend_from_slice(extra);
        ok(&args)
    };
    let g = explain("gradcam", &tmp.path().join("g"), &[]);
    assert_eq!(value(&g, "degenerate"), "true");
    let t = explain("tgradcam", &tmp.path().join("t"), &[]);
    assert_eq!(value(&t, "degenerate"), "false");
    assert_eq!(value(&t, "threshold"), "0.3");
    let t2 = tmp.path().join("t2");
    explain("tgradcam", &t2, &["--threshold", "0.3"]);
    for ext in ["pgm", "png"] {
        let (a, b) = (tmp.path().join("t").with_extension(ext), t2.with_extension(ext));
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
        assert_ne!(fs::read(&a).unwrap(), fs::read(tmp.path().join("g").with_extension(ext)).unwrap());
    }
    let bad = run(&["explain", "--ckpt", s(&ckpt), "--image", s(&image), "--class", "7", "--out", s(&tmp.path().join("x"))]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn shipped_fixture_matches_its_generator() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("cancel.ckpt");
    dclscam::zoo::save(&dclscam::zoo::cancellation_model(), None, &path).unwrap();
    assert_eq!(fs::read(&path).unwrap(), fs::read(fixture("cancel.ckpt")).unwrap());
    assert_eq!(fs::read(path.with_extension("json")).unwrap(), fs::read(fixture("cancel.json")).unwrap());
    let ppm = dclscam::datakit::write_ppm(&dclscam::zoo::cancellation_image(8));
    assert_eq!(ppm, fs::read(fixture("cancel.ppm")).unwrap());
}

#[test]
fn score_and_report() {
    let tmp = tempfile::tempdir().unwrap();
    let data = gen(&tmp.path().join("d"), 30, 5);
    let ckpt = tmp.path().join("m.ckpt");
    ok(&["train", "--data", s(&data), "--epochs", "1", "--out", s(&ckpt)]);
    let mut csvs = Vec::new();
    for (i, method) in ["gradcam", "tgradcam", "gradcam", "tgradcam"].iter().enumerate() {
        let csv = tmp.path().join(format!("s{i}.csv"));
        let out = ok(&[
            "score", "--ckpt", s(&ckpt), "--data", s(&data), "--method", method, "--split", "val", "--name", &format!("m{}", i / 2),
            "--out", s(&csv),
        ]);
        assert_eq!(value(&out, "csv"), s(&csv));
        csvs.push(csv);
    }
    let again = tmp.path().join("again.csv");
    ok(&["score", "--ckpt", s(&ckpt), "--data", s(&data), "--method", "tgradcam", "--split", "val", "--name", "m0", "--out", s(&again)]);
    assert_eq!(fs::read(&again).unwrap(), fs::read(&csvs[1]).unwrap());
    let first = fs::read_to_string(&csvs[0]).unwrap();
    assert!(first.lines().nth(1).unwrap().starts_with("m0,gradcam,"));
    assert!(first.lines().nth(1).unwrap().contains(",6,"));

    let table = tmp.path().join("table.txt");
    let mut args = vec!["report", "--out", s(&table), "--in"];
    args.extend(csvs.iter().map(|p| s(p)));
    let out = ok(&args);
    assert_eq!(value(&out, "rows"), "4");
    let text = fs::read_to_string(&table).unwrap();
    assert_eq!(text.lines().count(), 6);
    for col in ["Top1-accuracy", "Grad-CAM score", "Threshold-Grad-CAM score"] {
        assert!(text.lines().next().unwrap().contains(col));
    }

    let bad = tmp.path().join("bad.csv");
    fs::write(&bad, "model,score\nx,1\n").unwrap();
    let out = run(&["report", "--in", s(&csvs[0]), s(&bad)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn score_on_self_referenced_data_is_one() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("self");
    fs::create_dir_all(&dir).unwrap();
    let ckpt = fixture("cancel.ckpt");
    // Class 1 of the rigged model is non-degenerate; use its own map as reference.
    let mut lines = String::new();
    for i in 0..3 {
        let img = dir.join(format!("i{i}.ppm"));
        fs::copy(fixture("cancel.ppm"), &img).unwrap();
        ok(&["explain", "--ckpt", s(&ckpt), "--image", s(&img), "--class", "1", "--out", s(&dir.join(format!("h{i}")))]);
        lines.push_str(&format!("{{\"image\":\"i{i}.ppm\",\"heatmap\":\"h{i}.pgm\",\"label\":1}}\n"));
    }
    let manifest = dir.join("manifest.jsonl");
    fs::write(&manifest, lines).unwrap();
    let out = ok(&["score", "--ckpt", s(&ckpt), "--data", s(&manifest), "--method", "gradcam", "--out", s(&dir.join("s.csv"))]);
    assert!(out.contains("mean_score=1.0000"), "{out}");
}
