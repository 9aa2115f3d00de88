use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn mdba(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mdba"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("MDBA_SEED")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = mdba(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL: [&str; 14] = [
    "--set", "height=32", "--set", "width=32", "--set", "train_simple=10", "--set", "train_complex=4", "--set",
    "val_simple=3", "--set", "val_complex=3", "--set", "context_bias=0.5",
];

fn fixture(dir: &Path, clean: bool) -> PathBuf {
    let root = dir.join("data");
    let mut args = vec!["make-fixture", "--out", s(&root), "--seed", "4"];
    args.extend(SMALL);
    if clean {
        args.extend(["--set", "p_dilation=0", "--set", "p_erosion=0", "--set", "p_extra_blob=0", "--set", "p_misplaced=0", "--set", "p_speckle=0"]);
    }
    ok(&args);
    root
}

fn tiny_config(dir: &Path, root: &Path) -> PathBuf {
    let path = dir.join("run.toml");
    std::fs::write(
        &path,
        format!(
            "dataset_root = {:?}\nout_dir = {:?}\nt_max = 8\nt_w = 3\nt_s = 1\nbatch_simple = 3\nbatch_complex = 2\n\
             disc_base_channels = 2\nlr_g = 0.01\neval_every = 4\n",
            s(root),
            s(&dir.join("run"))
        ),
    )
    .unwrap();
    path
}

#[test]
fn prepare_labels_matches_clean_ground_truth_and_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let root = fixture(dir.path(), true);
    let out = dir.path().join("labels");
    let stdout = ok(&["prepare-labels", "--dataset", s(&root), "--out", s(&out)]);
    assert!(stdout.contains("10 pseudo labels"));
    let mut files: Vec<_> = std::fs::read_dir(&out).unwrap().map(|e| e.unwrap().path()).collect();
    files.sort();
    assert_eq!(files.len(), 10);
    for f in &files {
        let name = f.file_name().unwrap().to_str().unwrap();
        assert!(name.starts_with("ts"), "complex image {name} got a label");
        assert_eq!(std::fs::read(f).unwrap(), std::fs::read(root.join("gt").join(name)).unwrap());
    }
    let before: Vec<Vec<u8>> = files.iter().map(|f| std::fs::read(f).unwrap()).collect();
    ok(&["prepare-labels", "--dataset", s(&root), "--out", s(&out)]);
    let after: Vec<Vec<u8>> = files.iter().map(|f| std::fs::read(f).unwrap()).collect();
    assert_eq!(before, after);
}

#[test]
fn train_evaluate_export_retrain_visualize() {
    let dir = tempfile::tempdir().unwrap();
    let root = fixture(dir.path(), false);
    let cfg = tiny_config(dir.path(), &root);
    let run = dir.path().join("run");

    let out = mdba(&["train", "--config", s(&cfg), "--alpha", "0.25", "--lambda-adv", "0.002"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("override: alpha = 0.25") && stderr.contains("override: lambda_adv = 0.002"));
    let snapshot = std::fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(snapshot.contains("alpha = 0.25") && snapshot.contains("lambda_adv = 0.002"));
    let log = std::fs::read_to_string(run.join("log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 8);
    assert!(log.lines().next().unwrap().contains("\"T_pixel\":null"));
    for f in ["final.ckpt", "best.ckpt", "eval.jsonl", "val_report.txt"] {
        assert!(run.join(f).exists(), "{f}");
    }

    // evaluation is deterministic and prints what it writes
    let ckpt = run.join("final.ckpt");
    let rep1 = dir.path().join("r1.txt");
    let rep2 = dir.path().join("r2.txt");
    let printed = ok(&["evaluate", "--checkpoint", s(&ckpt), "--dataset", s(&root), "--report", s(&rep1)]);
    ok(&["evaluate", "--checkpoint", s(&ckpt), "--dataset", s(&root), "--report", s(&rep2)]);
    let text = std::fs::read_to_string(&rep1).unwrap();
    assert_eq!(text, std::fs::read_to_string(&rep2).unwrap());
    assert_eq!(printed, text);
    assert_eq!(text.lines().filter(|l| !l.starts_with("mIoU")).count(), 5);

    // export and second step
    let labels = dir.path().join("exported");
    let stdout = ok(&["export-labels", "--checkpoint", s(&ckpt), "--dataset", s(&root), "--out", s(&labels)]);
    assert!(stdout.contains("14 labels"));
    let run2 = dir.path().join("run2");
    let stdout = ok(&["retrain", "--config", s(&cfg), "--out", s(&run2), "--labels", s(&labels)]);
    assert!(stdout.contains("second-step val mIoU"));
    let snap2 = std::fs::read_to_string(run2.join("config.toml")).unwrap();
    assert!(snap2.contains("lambda_adv = 0.0"));

    // visualization: four panels per known id, unknown ids skipped, stable bytes
    let viz = dir.path().join("viz");
    let stdout = ok(&[
        "visualize", "--checkpoint", s(&ckpt), "--dataset", s(&root), "--ids", "ts0000,ts0001,nope", "--out", s(&viz),
        "--threshold", "inf", "--mix",
    ]);
    assert!(stdout.contains("2 panels"));
    let png = image::open(viz.join("ts0000.png")).unwrap().to_rgb8();
    assert_eq!((png.width(), png.height()), (4 * 32 + 3 * 2, 32));
    // the noise-mask panel keeps every pixel at an infinite threshold
    let x0 = 3 * (32 + 2);
    assert!((0..32).all(|y| (0..32).all(|x| png.get_pixel(x0 + x, y).0 == [255, 255, 255])));
    assert!(std::fs::read_dir(&viz).unwrap().any(|e| e.unwrap().file_name().to_str().unwrap().starts_with("mix_")));
    let first = std::fs::read(viz.join("ts0000.png")).unwrap();
    ok(&["visualize", "--checkpoint", s(&ckpt), "--dataset", s(&root), "--ids", "ts0000", "--out", s(&viz), "--threshold", "inf"]);
    assert_eq!(first, std::fs::read(viz.join("ts0000.png")).unwrap());
}

#[test]
fn resume_continues_the_log() {
    let dir = tempfile::tempdir().unwrap();
    let root = fixture(dir.path(), false);
    let cfg = tiny_config(dir.path(), &root);
    let full = dir.path().join("full");
    ok(&["train", "--config", s(&cfg), "--out", s(&full)]);
    let part = dir.path().join("part");
    ok(&["train", "--config", s(&cfg), "--out", s(&part), "--set", "checkpoint_every=5", "--until", "5"]);
    ok(&["train", "--resume", s(&part.join("last.ckpt"))]);
    assert_eq!(
        std::fs::read_to_string(full.join("log.jsonl")).unwrap(),
        std::fs::read_to_string(part.join("log.jsonl")).unwrap()
    );
}

#[test]
fn ablation_flags_compose() {
    let dir = tempfile::tempdir().unwrap();
    let root = fixture(dir.path(), false);
    let cfg = tiny_config(dir.path(), &root);
    let run = dir.path().join("abl");
    ok(&["train", "--config", s(&cfg), "--out", s(&run), "--ablate", "onf,pnd,s2c,c2s"]);
    let snapshot = std::fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(snapshot.contains("ablate = [\"onf\", \"pnd\", \"s2c\", \"c2s\"]"), "{snapshot}");
    let log = std::fs::read_to_string(run.join("log.jsonl")).unwrap();
    assert!(log.lines().all(|l| l.contains("\"T_pixel\":null") && l.contains("\"L_D\":null")));
}

#[test]
fn exit_codes_follow_error_kind() {
    let dir = tempfile::tempdir().unwrap();
    // config error
    let out = mdba(&["train", "--set", "alpha=1.5"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("alpha"));
    let out = mdba(&["train", "--set", "no_such_key=1"]);
    assert_eq!(out.status.code(), Some(2));
    // data error: directory exists but holds no dataset
    let empty = dir.path().join("empty");
    std::fs::create_dir_all(&empty).unwrap();
    let out = mdba(&["train", "--dataset", s(&empty), "--out", s(&dir.path().join("r"))]);
    assert_eq!(out.status.code(), Some(3));
    // invalid fixture spec
    let out = mdba(&["make-fixture", "--out", s(&dir.path().join("f")), "--set", "p_misplaced=2"]);
    assert_eq!(out.status.code(), Some(2));
    // usage error
    assert_eq!(mdba(&["train", "--bogus"]).status.code(), Some(2));
}

#[test]
fn numerical_abort_exits_with_four() {
    let dir = tempfile::tempdir().unwrap();
    let root = fixture(dir.path(), false);
    let cfg = tiny_config(dir.path(), &root);
    let out = mdba(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("nan")), "--set", "lr_g=1e30"]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn help_lists_every_config_key() {
    let out = ok(&["train", "--help"]);
    for key in ["alpha", "lambda_adv", "T_h", "T_l", "t_w", "t_s", "t_max", "p_mix", "ablate", "eval_every"] {
        assert!(out.contains(&format!("  {key} ")), "{key} missing from help");
    }
}
