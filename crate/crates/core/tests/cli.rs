use std::process::Command;

fn fastrm(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_fastrm")).args(args).output().unwrap()
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(fastrm(&[]).status.code(), Some(1));
    assert_eq!(fastrm(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(fastrm(&["bench", "--no-such-flag", "3"]).status.code(), Some(1));
    let out = fastrm(&["train-fastrm", "--dataset", "/nonexistent/dataset.frmd"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());
}

#[test]
fn corrupt_checkpoint_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.frmd");
    std::fs::write(&bad, b"FRMDgarbage").unwrap();
    let out = dir.path().join("out");
    let status = fastrm(&[
        "train-fastrm",
        "--dataset",
        bad.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ])
    .status;
    assert_eq!(status.code(), Some(2));
}

#[test]
fn pipeline_writes_artifacts_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let cfg = dir.path().join("pretrain.cfg");
    std::fs::write(&cfg, "# small run\nn_samples = 200\nepochs = 1\neval_samples = 10\ntest_samples = 20\n").unwrap();
    let runs: [Vec<String>; 3] = [
        vec!["pretrain-toy".into(), "--config".into(), cfg.display().to_string(), "--out".into(), format!("{d}/toy")],
        vec![
            "gen-dataset".into(),
            "--toy".into(),
            format!("{d}/toy/toy.tlvm"),
            "--n-queries".into(),
            "40".into(),
            "--out".into(),
            format!("{d}/data"),
        ],
        vec![
            "train-fastrm".into(),
            "--dataset".into(),
            format!("{d}/data/dataset.frmd"),
            "--steps".into(),
            "5".into(),
            "--out".into(),
            format!("{d}/head"),
        ],
    ];
    for args in &runs {
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        let out = fastrm(&refs);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for f in ["toy/toy.tlvm", "toy/pretrain_log.csv", "data/dataset.frmd", "head/fastrm.frmc", "head/train_loss.csv"] {
        assert!(dir.path().join(f).is_file(), "{f} missing");
    }
    let manifest = std::fs::read_to_string(dir.path().join("toy/manifest.txt")).unwrap();
    assert!(manifest.contains("subcommand=pretrain-toy"));
    assert!(manifest.contains("config.n_samples=200"));
    assert!(manifest.contains("config.epochs=1"));
}
