use std::collections::HashSet;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use molre::checkpoint::Checkpoint;
use molre::data::io::Dataset;
use molre::data::Split;

const BIN: &str = env!("CARGO_BIN_EXE_molre");

const CONFIG: &str = "n_samples = 100\nslices = 4\nheight = 16\nwidth = 16\nfeature_dim = 16\nrouter_hidden = 16\n\
augment = false\nmin_epochs = 2\npatience = 1\nmax_epochs = 3\n";

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN).current_dir(dir).args(args).output().unwrap()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.toml"), CONFIG).unwrap();
    dir
}

#[test]
fn synth_writes_disjoint_splits_deterministically() {
    let dir = setup();
    let p = dir.path();
    assert!(run(p, &["synth", "--config", "run.toml", "--out", "a"]).status.success());
    assert!(run(p, &["synth", "--config", "run.toml", "--out", "b"]).status.success());
    assert_eq!(fs::read(p.join("a/manifest.json")).unwrap(), fs::read(p.join("b/manifest.json")).unwrap());
    assert_eq!(fs::read_dir(p.join("a/volumes")).unwrap().count(), 100);

    let ds = Dataset::open(p.join("a")).unwrap();
    let ids = |s| ds.manifest.entries(s).map(|e| e.id.clone()).collect::<HashSet<_>>();
    let (tr, va, te) = (ids(Split::Train), ids(Split::Val), ids(Split::Test));
    assert_eq!((tr.len(), va.len(), te.len()), (80, 10, 10));
    assert!(tr.is_disjoint(&va) && tr.is_disjoint(&te) && va.is_disjoint(&te));

    assert!(run(p, &["synth", "--config", "run.toml", "--seed", "9", "--out", "c"]).status.success());
    assert_ne!(fs::read(p.join("a/manifest.json")).unwrap(), fs::read(p.join("c/manifest.json")).unwrap());
}

#[test]
fn train_eval_round_trip() {
    let dir = setup();
    let p = dir.path();
    assert!(run(p, &["synth", "--config", "run.toml", "--out", "data"]).status.success());
    let a = run(p, &["train", "--config", "run.toml", "--out", "r1"]);
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    assert!(run(p, &["train", "--config", "run.toml", "--out", "r2"]).status.success());
    let log = fs::read_to_string(p.join("r1/metrics.jsonl")).unwrap();
    assert_eq!(log, fs::read_to_string(p.join("r2/metrics.jsonl")).unwrap());
    assert!(!p.join("r1/run.lock").exists());

    let records: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let last = records.last().unwrap();
    assert_eq!(last["stop"], true);
    let best_epoch = last["best_epoch"].as_u64().unwrap() as usize;
    let logged = records[best_epoch - 1]["val_mean_auc"].as_f64().unwrap();

    let e = run(p, &["eval", "--checkpoint", "r1/best.ckpt", "--split", "val", "--out", "ev"]);
    assert!(e.status.success(), "{}", String::from_utf8_lossy(&e.stderr));
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(p.join("ev/val_summary.json")).unwrap()).unwrap();
    assert!((summary["mean_auc"].as_f64().unwrap() - logged).abs() <= 1e-12);
    let tsv = fs::read_to_string(p.join("ev/val_per_class.tsv")).unwrap();
    assert_eq!(tsv.lines().count(), 1 + 12);

    assert!(run(p, &["eval", "--checkpoint", "r1/last.ckpt", "--split", "test", "--out", "ev"]).status.success());
    assert!(p.join("ev/test_summary.json").exists());
}

#[test]
fn resume_matches_uninterrupted_run() {
    let dir = setup();
    let p = dir.path();
    assert!(run(p, &["synth", "--config", "run.toml", "--out", "data"]).status.success());
    let long = ["--set", "min_epochs=4", "--set", "max_epochs=4"];
    let full = run(p, &[&["train", "--config", "run.toml", "--out", "full"][..], &long].concat());
    assert!(full.status.success());
    let short = ["--set", "min_epochs=4", "--set", "max_epochs=2"];
    assert!(run(p, &[&["train", "--config", "run.toml", "--out", "part"][..], &short].concat()).status.success());
    let r = run(p, &[&["train", "--config", "run.toml", "--out", "part", "--resume"][..], &long].concat());
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));

    let a = Checkpoint::load(&p.join("full/last.ckpt")).unwrap();
    let b = Checkpoint::load(&p.join("part/last.ckpt")).unwrap();
    assert_eq!(a.state, b.state);
    for ((_, _, x), (_, _, y)) in a.model.params().iter().zip(b.model.params()) {
        assert_eq!(x.data(), y.data());
    }
    let strip = |path: &str| -> Vec<serde_json::Value> {
        fs::read_to_string(p.join(path))
            .unwrap()
            .lines()
            .map(|l| {
                let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
                v.as_object_mut().unwrap().remove("stop");
                v
            })
            .collect()
    };
    assert_eq!(strip("full/metrics.jsonl"), strip("part/metrics.jsonl"));

    let mismatched = run(p, &["train", "--config", "run.toml", "--set", "experts=2", "--out", "part", "--resume"]);
    assert_eq!(mismatched.status.code(), Some(2));
}

#[test]
fn count_params_reference_configs() {
    let dir = setup();
    for (d, want) in [(768, 272_134), (1024, 362_246), (1152, 407_302)] {
        let o = run(dir.path(), &["count-params", "--set", &format!("feature_dim={d}")]);
        assert!(o.status.success());
        let text = String::from_utf8(o.stdout).unwrap();
        let line = text.lines().find(|l| l.starts_with("molre_total")).unwrap();
        assert_eq!(line.split_whitespace().nth(1).unwrap().parse::<usize>().unwrap(), want);
    }
}

#[test]
fn exit_codes() {
    let dir = setup();
    let p = dir.path();
    assert_eq!(run(p, &["count-params", "--set", "bogus=1"]).status.code(), Some(2));
    assert_eq!(run(p, &["count-params", "--set", "experts=0"]).status.code(), Some(2));
    assert_eq!(run(p, &["count-params", "--config", "missing.toml"]).status.code(), Some(2));
    assert_eq!(run(p, &["train", "--config", "run.toml", "--set", "data_dir=\"nowhere\""]).status.code(), Some(3));
    assert_eq!(run(p, &["frobnicate"]).status.code(), Some(2));

    assert!(run(p, &["synth", "--config", "run.toml", "--out", "data"]).status.success());
    let blown = run(p, &["train", "--config", "run.toml", "--set", "lr_head=1e300", "--set", "lr_adapter=1e300", "--out", "nan"]);
    assert_eq!(blown.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&blown.stderr).contains("parameter norms"));

    fs::create_dir_all(p.join("locked")).unwrap();
    fs::write(p.join("locked/run.lock"), "1").unwrap();
    assert_eq!(run(p, &["train", "--config", "run.toml", "--out", "locked"]).status.code(), Some(3));

    fs::write(p.join("bad.ckpt"), b"MLRCKPT\0\x07\0\0\0\0\0\0\0").unwrap();
    let e = run(p, &["eval", "--checkpoint", "bad.ckpt"]);
    assert_eq!(e.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&e.stderr).contains("version 7"));
}
