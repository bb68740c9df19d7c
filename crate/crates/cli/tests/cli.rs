use std::path::Path;
use std::process::{Command, Output};

fn cssr(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cssr"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn theorems_report() {
    let dir = tempfile::tempdir().unwrap();
    let o = cssr(&["theorems", "--seed", "7"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    assert!(out.contains("0.731059") && out.contains("0.880797"), "{out}");
    assert!(out.contains("MAE monotonicity: pass"), "{out}");
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&cssr(&["train", "--no-such-flag"], dir.path())), 1);
    assert_eq!(code(&cssr(&["frobnicate"], dir.path())), 1);
    assert_eq!(code(&cssr(&["train", "--mode", "svm"], dir.path())), 1);
    // the image preset reads files
    let o = cssr(&["train"], dir.path());
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("--data"));
    assert_eq!(code(&cssr(&["eval"], dir.path())), 1);
    assert_eq!(code(&cssr(&["--help"], dir.path())), 0);
    assert_eq!(code(&cssr(&["--version"], dir.path())), 0);
}

#[test]
fn data_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("junk.cssr"), b"not a checkpoint").unwrap();
    assert_eq!(code(&cssr(&["eval", "--checkpoint", "junk.cssr"], dir.path())), 2);
    assert_eq!(code(&cssr(&["eval", "--checkpoint", "missing.cssr"], dir.path())), 2);
    // a data directory without IDX files
    std::fs::create_dir(dir.path().join("empty")).unwrap();
    assert_eq!(code(&cssr(&["train", "--data", "empty"], dir.path())), 2);
}

#[test]
fn divergence_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let config = serde_json::json!({
        "epochs": 2, "batch_size": 64, "lr_initial": 1e300, "lr_drop_epochs": [], "lr_drop_factor": 0.1,
        "momentum": 0.9, "seed": 0,
        "head": {"mode": "linear", "gamma": 1.0, "error_norm": "mae", "strategy": "sm-ap", "num_classes": 4, "latent_dim": 2},
        "backbone": {"preset": "mlp2d", "feature_dim": 8, "seed": 0},
        "augment": {"transforms": [], "max_ops": 0, "brightness": [-0.3, 0.3], "contrast": [0.7, 1.3],
                    "rotate": [-30.0, 30.0], "shear": [-0.3, 0.3], "seed": 0}
    });
    std::fs::write(dir.path().join("bad.json"), config.to_string()).unwrap();
    let o = cssr(&["train", "--config", "bad.json"], dir.path());
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn gaussian_train_eval_render_infer() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let o = cssr(&["train", "--preset", "gaussian-2d", "--epochs", "5", "--out", "g.cssr"], p);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(p.join("g.cssr").exists());

    let o = cssr(&["eval", "--checkpoint", "g.cssr", "--out", "report.json"], p);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(p.join("report.json")).unwrap()).unwrap();
    assert!(report["eval"]["auroc"].is_number());
    assert!(report["eval"]["openness"].is_null());

    let o = cssr(&["render2d", "--checkpoint", "g.cssr", "--out", "map", "--resolution", "21"], p);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let pgm = std::fs::read(p.join("map.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n21 21\n255\n"));
    assert_eq!(pgm.len(), "P5\n21 21\n255\n".len() + 21 * 21);
    assert!(p.join("map.classes.pgm").exists());

    let o = cssr(&["infer", "--checkpoint", "g.cssr", "--out", "decisions.csv"], p);
    assert_eq!(code(&o), 0);
    let csv = std::fs::read_to_string(p.join("decisions.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2000 + 2000);

    let o = cssr(&["stats", "--checkpoint", "g.cssr", "--out", "g2.cssr"], p);
    assert_eq!(code(&o), 0);
    // refitting on the same data reproduces the stored statistics exactly
    assert_eq!(std::fs::read(p.join("g.cssr")).unwrap(), std::fs::read(p.join("g2.cssr")).unwrap());
}

#[test]
fn image_files_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    assert_eq!(code(&cssr(&["synth", "--out", "digits", "--per-class", "12,4"], p)), 0);
    let o = cssr(
        &["train", "--data", "digits", "--epochs", "1", "--known-classes", "0,1,2,3,4,5", "--latent-dim", "4", "--out", "m.cssr"],
        p,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = cssr(&["eval", "--checkpoint", "m.cssr", "--data", "digits", "--out", "r.json"], p);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(p.join("r.json")).unwrap()).unwrap();
    assert_eq!(report["split"]["known_classes"], serde_json::json!([0, 1, 2, 3, 4, 5]));
    assert!(report["eval"]["openness"].is_number());
    // the 2-D renderer refuses image models
    assert_eq!(code(&cssr(&["render2d", "--checkpoint", "m.cssr", "--data", "digits"], p)), 1);
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = cssr(&["gradcheck", "--seed", "3"], dir.path());
    assert_eq!(code(&o), 0);
    assert!(!stdout(&o).contains("FAIL"));
}
