use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use scl::cli::{cmd_ablate, cmd_evaluate, cmd_train, ExperimentConfig, GridSpec, LossOverride, ABLATION_COLUMNS};
use scl::losses::LossKind;
use scl::synthdata::{load_dataset, Split};

const TINY: &str = r#"
[data]
n_source = 8
n_target = 8
n_test = 6

[train]
steps = 12
decay_every = 0
"#;

fn scl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scl")).args(args).output().unwrap()
}

fn tiny_config(dir: &Path) -> PathBuf {
    let p = dir.join("tiny.toml");
    fs::write(&p, TINY).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap().flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn generate_is_reproducible_and_guards_its_output() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        let o = scl(&["generate", "--config", s(&cfg), "--seed", "4", "--out", s(out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for split in ["source", "target", "target_test"] {
        assert!(a.join(split).join("annotations.jsonl").is_file());
    }
    assert!(a.join("run_config.toml").is_file());
    assert_eq!(tree(&a), tree(&b));

    let data = load_dataset(&a).unwrap();
    assert_eq!((data.source.len(), data.target.len(), data.target_test.len()), (8, 8, 6));
    assert!(data.target.iter().all(|s| s.boxes.is_empty()));

    // a populated directory needs --force
    let o = scl(&["generate", "--config", s(&cfg), "--seed", "5", "--out", s(&a)]);
    assert_eq!(o.status.code(), Some(1));
    let o = scl(&["generate", "--config", s(&cfg), "--seed", "5", "--out", s(&a), "--force"]);
    assert!(o.status.success());
    assert_ne!(tree(&a), tree(&b));
    let embedded = ExperimentConfig::load(&a.join("run_config.toml")).unwrap();
    assert_eq!((embedded.scene.seed, embedded.train.seed), (5, 5));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    assert_eq!(scl(&["train", "--out", s(&out), "--bogus"]).status.code(), Some(1));
    assert_eq!(scl(&[]).status.code(), Some(1));
    assert_eq!(scl(&["--help"]).status.code(), Some(0));

    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "[train]\nsteps = -3\n").unwrap();
    let o = scl(&["generate", "--config", s(&bad), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("bad.toml:2"));

    let missing = tmp.path().join("nope.json");
    let o = scl(&["evaluate", "--checkpoint", s(&missing), "--data", s(tmp.path()), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
    let o = scl(&["evaluate", "--checkpoint", s(&bad), "--data", s(&tmp.path().join("none")), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1), "missing dataset directory");

    // a checkpoint that exists but cannot be decoded is a runtime failure
    let data = tmp.path().join("data");
    let cfg = tiny_config(tmp.path());
    assert!(scl(&["generate", "--config", s(&cfg), "--out", s(&data)]).status.success());
    let junk = tmp.path().join("junk.json");
    fs::write(&junk, "{}").unwrap();
    let o = scl(&["evaluate", "--checkpoint", s(&junk), "--data", s(&data), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_evaluate_and_dump() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = tiny_config(tmp.path());
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    assert!(scl(&["generate", "--config", s(&cfg_path), "--out", s(&data)]).status.success());
    let o = scl(&["train", "--config", s(&cfg_path), "--data", s(&data), "--out", s(&run)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let ckpt = run.join("checkpoints/final.json");
    assert!(ckpt.is_file());
    let log = fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 1 + 12);
    assert!(log.lines().next().unwrap().contains("\"config\""));

    let ev = tmp.path().join("eval");
    let o = scl(&[
        "evaluate", "--checkpoint", s(&ckpt), "--data", s(&data), "--thresholds", "0.3,0.5,0.7", "--out", s(&ev),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(ev.join("eval.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "class,n_gt,AP@0.30,AP@0.50,AP@0.70");
    assert_eq!(lines.len(), 5);
    assert!(lines[4].starts_with("mAP,"));
    assert!(ev.join("detections.jsonl").is_file());
    let used = ExperimentConfig::load(&ev.join("run_config.toml")).unwrap();
    assert_eq!(used.eval.thresholds, vec![0.3, 0.5, 0.7]);

    // unlabeled split cannot be scored
    let o = scl(&["evaluate", "--checkpoint", s(&ckpt), "--data", s(&data), "--split", "target", "--out", s(&tmp.path().join("e2"))]);
    assert_eq!(o.status.code(), Some(1));

    let feats = tmp.path().join("feats");
    let o = scl(&["dump-features", "--checkpoint", s(&ckpt), "--data", s(&data), "--n", "5", "--out", s(&feats)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(feats.join("features.csv")).unwrap();
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(&header[..3], &["image", "domain", "f0"]);
    assert_eq!(header.len(), 2 + 128);
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 10);
    assert_eq!(rows.iter().filter(|r| r.split(',').nth(1) == Some("source")).count(), 5);
    assert_eq!(rows.iter().filter(|r| r.split(',').nth(1) == Some("target")).count(), 5);

    let heat = tmp.path().join("heat");
    let img = data.join("target_test/000000.png");
    let o = scl(&["dump-heatmaps", "--checkpoint", s(&ckpt), "--images", s(&img), "--out", s(&heat)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let png = image::open(heat.join("000000_heatmap.png")).unwrap().to_luma8();
    assert_eq!(png.dimensions(), (64, 64));
    let (lo, hi) = png.pixels().fold((255u8, 0u8), |(l, h), p| (l.min(p[0]), h.max(p[0])));
    assert_eq!((lo, hi), (0, 255));
}

#[test]
fn untrained_model_scores_near_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::parse(TINY, "tiny").unwrap();
    cfg.train.steps = 0;
    cfg.data.n_test = 20;
    let data = tmp.path().join("data");
    scl::cli::cmd_generate(&cfg, &data, false).unwrap();
    let t = cmd_train(&cfg, Some(&data), &tmp.path().join("run"), false).unwrap();
    let r = cmd_evaluate(&cfg, &t.checkpoint, &data, &[0.5], Split::TargetTest, &tmp.path().join("ev"), false).unwrap();
    assert!(r.map[0] < 0.05, "untrained mAP {}", r.map[0]);
}

#[test]
fn ablation_rows_and_labels() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::parse(TINY, "tiny").unwrap();
    cfg.train.steps = 3;
    let best = LossOverride {
        level_kinds: Some(vec![LossKind::Ls, LossKind::Ce, LossKind::Fl]),
        ..LossOverride::default()
    };
    let no_detach = LossOverride {
        use_detach: Some(false),
        ..LossOverride::default()
    };
    let grid = GridSpec {
        rows: vec![best.clone(), no_detach, best],
        axes: None,
    };
    let out = tmp.path().join("ab");
    let rows = cmd_ablate(&cfg, &grid, None, &out, false).unwrap();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[0].label, "LS|CE|FL + ILoss=FL + Context + Detach");
    assert_eq!(rows[1].label, "LS|CE|FL + ILoss=FL + Context");
    assert_eq!(rows[0], rows[2]);
    let csv = fs::read_to_string(out.join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), ABLATION_COLUMNS.join(","));
    assert_eq!(csv.lines().count(), 4);
    assert_eq!(fs::read_dir(out.join("logs")).unwrap().count(), 3);

    // an invalid explicit row is reported, not fatal
    let grid = GridSpec {
        rows: vec![LossOverride {
            use_context: Some(false),
            ..LossOverride::default()
        }],
        axes: None,
    };
    let rows = cmd_ablate(&cfg, &grid, None, &tmp.path().join("ab2"), false).unwrap();
    assert!(rows[0].status.starts_with("error"));
    assert!(rows[0].map.is_none());
}

#[test]
fn grid_file_via_binary() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.toml");
    fs::write(&cfg, TINY.replace("steps = 12", "steps = 2")).unwrap();
    let grid = tmp.path().join("grid.toml");
    fs::write(&grid, "[axes]\nuse_detach = [true, false]\n").unwrap();
    let out = tmp.path().join("ab");
    let o = scl(&["ablate", "--config", s(&cfg), "--grid", s(&grid), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_to_string(out.join("ablation.csv")).unwrap().lines().count(), 3);

    let o = scl(&["sweep", "--config", s(&cfg), "--param", "k", "--values", "2,3", "--out", s(&tmp.path().join("sw"))]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(tmp.path().join("sw/sweep_K.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "param,value,label,mAP,status");
    assert_eq!(csv.lines().count(), 3);

    let o = scl(&["sweep", "--config", s(&cfg), "--param", "gamma", "--values", "-1", "--out", s(&tmp.path().join("sw2"))]);
    assert_eq!(o.status.code(), Some(1));
}
