use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn clwe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_clwe"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = clwe(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const CONFIG: &str = r#"
[data]
source = "data/source.vec"
target = "data/target.vec"
gold = "data/gold.txt"

[run]
seed = 11
restarts = 2
refine = "global"

[single_gan]
epochs = 2
steps_per_epoch = 30
dis_hidden = 16
lr_generator = 0.01

[multi_gan]
epochs = 1
steps_per_epoch = 30
dis_hidden = 16
lr_generator = 0.001

[refine]
max_iters = 10
"#;

fn setup(dir: &Path) -> PathBuf {
    let data = dir.join("data");
    ok(&[
        "synth-gen", "--out", s(&data), "--clusters", "2", "--per-cluster", "60", "--dim", "4", "--seed", "5",
    ]);
    let cfg = dir.join("run.toml");
    fs::write(&cfg, CONFIG).unwrap();
    cfg
}

/// Every file under `root`, keyed by relative path.
fn snapshot(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn manifest_without_timings(dir: &Path) -> serde_json::Value {
    let text = fs::read_to_string(dir.join("manifest.json")).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v.as_object_mut().unwrap().remove("timings");
    v
}

fn numeric_artifacts(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut snap = snapshot(dir);
    snap.remove("manifest.json");
    snap
}

const STAGES: [&str; 6] = [
    "train-single",
    "cluster",
    "align-subspaces",
    "train-multi",
    "induce-dict",
    "eval-bli",
];

fn run_subcommands(cfg: &Path, out: &Path) {
    for (i, cmd) in STAGES.iter().enumerate() {
        if i == 4 {
            ok(&["refine", "--mode", "global", "--config", s(cfg), "--out", s(out)]);
        }
        ok(&[cmd, "--config", s(cfg), "--out", s(out)]);
    }
}

#[test]
fn synth_gen_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["a", "b"] {
        ok(&["synth-gen", "--out", s(&dir.path().join(name)), "--clusters", "2", "--per-cluster", "40", "--dim", "3"]);
    }
    let a = snapshot(&dir.path().join("a"));
    assert!(a.contains_key("source.vec") && a.contains_key("gold.txt") && a.contains_key("labels.tsv"));
    assert_eq!(a, snapshot(&dir.path().join("b")));
}

#[test]
fn pipeline_equals_subcommands_and_reruns_are_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    let manual = dir.path().join("manual");
    let piped = dir.path().join("piped");
    run_subcommands(&cfg, &manual);
    let out = ok(&["pipeline", "--config", s(&cfg), "--out", s(&piped)]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("p_at_1"));

    assert_eq!(numeric_artifacts(&manual), numeric_artifacts(&piped));
    assert_eq!(manifest_without_timings(&manual), manifest_without_timings(&piped));

    // every subcommand rerun reproduces its artifacts bit for bit
    let again = dir.path().join("again");
    run_subcommands(&cfg, &again);
    assert_eq!(numeric_artifacts(&manual), numeric_artifacts(&again));

    let m = manifest_without_timings(&piped);
    for st in m["stages"].as_array().unwrap() {
        assert_eq!(st["status"], "ok");
        for a in st["artifacts"].as_array().unwrap() {
            assert!(piped.join(a.as_str().unwrap()).exists());
        }
    }
    let induce = m["stages"].as_array().unwrap().iter().find(|s| s["stage"] == "induce").unwrap();
    assert_eq!(induce["criteria"]["mutual_recheck_pass_rate"], 1.0);
}

#[test]
fn eval_prints_subspace_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    let out = dir.path().join("run");
    ok(&["pipeline", "--config", s(&cfg), "--out", s(&out), "--refine", "none"]);
    let printed = ok(&["eval-bli", "--config", s(&cfg), "--out", s(&out), "--refine", "none", "--per-subspace"]);
    let text = String::from_utf8_lossy(&printed.stdout);
    assert!(text.contains("cluster_id\tsize\tevaluated\tcorrect\taccuracy"), "{text}");
}

#[test]
fn single_gan_only_and_stage_restart() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    let text = fs::read_to_string(&cfg).unwrap().replace("refine = \"global\"", "refine = \"global\"\nsingle_gan_only = true");
    let only = dir.path().join("only.toml");
    fs::write(&only, text).unwrap();
    let out = dir.path().join("run");
    ok(&["pipeline", "--config", s(&only), "--out", s(&out)]);
    assert!(out.join("single_gan/map.txt").exists());
    assert!(!out.join("cluster").exists());

    let full = dir.path().join("full");
    ok(&["pipeline", "--config", s(&cfg), "--out", s(&full)]);
    let before = numeric_artifacts(&full);
    ok(&["pipeline", "--config", s(&cfg), "--out", s(&full), "--stage", "multi_gan"]);
    assert_eq!(before, numeric_artifacts(&full));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    let out = dir.path().join("run");

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, format!("{CONFIG}\n[cluster]\nbogus = 1\n")).unwrap();
    assert_eq!(clwe(&["pipeline", "--config", s(&bad), "--out", s(&out)]).status.code(), Some(2));
    assert_eq!(
        clwe(&["train-single", "--config", s(&cfg), "--out", s(&out), "--restarts", "0"]).status.code(),
        Some(2)
    );
    assert_eq!(
        clwe(&["cluster", "--config", s(&cfg), "--out", s(&out), "--level", "sideways"]).status.code(),
        Some(2)
    );

    let missing = dir.path().join("missing.toml");
    fs::write(&missing, CONFIG.replace("data/source.vec", "data/nowhere.vec")).unwrap();
    assert_eq!(clwe(&["pipeline", "--config", s(&missing), "--out", s(&out)]).status.code(), Some(1));

    // a stage whose inputs were never produced is a typed failure
    let fresh = dir.path().join("fresh");
    assert_eq!(clwe(&["train-multi", "--config", s(&cfg), "--out", s(&fresh)]).status.code(), Some(1));
    let m = manifest_without_timings(&fresh);
    assert_eq!(m["failed_stage"], "multi_gan");
}
