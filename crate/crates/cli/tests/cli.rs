use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use logictree::data::load_dataset;
use logictree::em::{TrainConfig, TrainedModel};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_logictree"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
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

fn gen(dir: &Path, name: &str, n: usize, seed: u64) -> PathBuf {
    let out = dir.join(name);
    ok(&["gen", "-n", &n.to_string(), "--split", "--seed", &seed.to_string(), "-o", s(&out)]);
    out
}

fn smoke_config(dir: &Path) -> PathBuf {
    let p = dir.join("smoke.toml");
    fs::write(&p, "epochs = 1\nbatch_size = 2\nmax_depth = 2\nmax_width = 2\neval_samples = 2\n").unwrap();
    p
}

#[test]
fn gen_matches_target_scale_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = gen(dir.path(), "a.json", 200, 3);
    let b = gen(dir.path(), "b.json", 200, 3);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let d = load_dataset(&a).unwrap();
    assert_eq!(d.sequences.len(), 200);
    assert_eq!(d.vocabulary.len(), 5);
    let avg = d.sequences.iter().map(|s| s.events.len()).sum::<usize>() as f64 / 200.0;
    assert!((20.0..=45.0).contains(&avg), "average length {avg}");
}

#[test]
fn gen_zero_sequences_is_a_valid_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("empty.json");
    ok(&["gen", "-n", "0", "-o", s(&out)]);
    assert!(load_dataset(&out).unwrap().sequences.is_empty());
}

#[test]
fn gen_reads_a_model_file() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("model.json");
    fs::write(
        &model,
        r#"{"predicates": ["X", "Y"], "targets": ["X"], "rules": [{"path": ["X", "Y"], "weight": 0.3}],
            "base": {"X": -0.5}, "horizon": 3.0}"#,
    )
    .unwrap();
    let out = dir.path().join("d.json");
    ok(&["gen", "--model", s(&model), "-n", "12", "-o", s(&out)]);
    let d = load_dataset(&out).unwrap();
    assert_eq!(d.sequences.len(), 12);
    assert!(d.sequences.iter().all(|q| q.label == 0));

    fs::write(&model, r#"{"predicates": ["X"], "targets": ["Q"], "rules": [], "horizon": 1}"#).unwrap();
    assert_eq!(run(&["gen", "--model", s(&model), "-o", s(&out)]).status.code(), Some(2));
}

#[test]
fn split_is_seeded_and_does_not_touch_input() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("raw.json");
    ok(&["gen", "-n", "30", "-o", s(&raw)]);
    let before = fs::read(&raw).unwrap();
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    ok(&["split", "--dataset", s(&raw), "-o", s(&a), "--seed", "5"]);
    ok(&["split", "--dataset", s(&raw), "-o", s(&b), "--seed", "5"]);
    assert_eq!(fs::read(&raw).unwrap(), before);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let d = load_dataset(&a).unwrap();
    assert_eq!(d.splits.iter().filter(|x| x.is_some()).count(), 30);
}

#[test]
fn smoke_training_then_resume() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "d.json", 200, 0);
    let cfg = smoke_config(dir.path());
    let out = dir.path().join("run");
    let t0 = Instant::now();
    ok(&["train", "--config", s(&cfg), "--dataset", s(&data), "--out-dir", s(&out), "--seed", "1"]);
    assert!(t0.elapsed() < Duration::from_secs(60));
    for f in ["manifest.json", "best.json", "last.json", "epochs.csv", "subtb.csv", "mstep.csv"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 1);
    assert_eq!(manifest["config"]["epochs"], 1);
    assert_eq!(manifest["input_hash"].as_str().unwrap().len(), 64);
    let manifest_bytes = fs::read(out.join("manifest.json")).unwrap();

    let first = TrainedModel::load(out.join("last.json")).unwrap();
    assert_eq!(first.state.epochs_done, 1);
    let steps_before = first.state.estep.step;
    assert!(steps_before > 0);

    ok(&[
        "train", "--config", s(&cfg), "--dataset", s(&data), "--out-dir", s(&out), "--seed", "1", "--epochs", "2",
        "--resume",
    ]);
    let second = TrainedModel::load(out.join("last.json")).unwrap();
    assert_eq!(second.state.epochs_done, 2);
    assert_eq!(second.state.estep.step, 2 * steps_before);
    assert_eq!(fs::read(out.join("manifest.json")).unwrap(), manifest_bytes);
    assert!(out.join("manifest.resume-1.json").is_file());

    let csv = fs::read_to_string(out.join("subtb.csv")).unwrap();
    let steps: Vec<u64> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap().parse().unwrap())
        .collect();
    assert!(steps.windows(2).all(|w| w[1] == w[0] + 1), "step counter not monotone");
    assert_eq!(*steps.last().unwrap(), 2 * steps_before);
}

#[test]
fn missing_dataset_is_a_usage_error_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = run(&["train", "--dataset", s(&dir.path().join("nope.json")), "--out-dir", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn bad_flags_and_configs_are_usage_errors() {
    assert_eq!(run(&["train", "--bogus"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "d.json", 20, 0);
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "epochz = 3\n").unwrap();
    let o = run(&["train", "--config", s(&cfg), "--dataset", s(&data), "--out-dir", s(&dir.path().join("r"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn malformed_dataset_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{\"vocabulary\": [").unwrap();
    let o = run(&["train", "--dataset", s(&bad), "--out-dir", s(&dir.path().join("r"))]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn divergence_exits_with_code_four() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "d.json", 40, 0);
    let cfg = dir.path().join("wild.toml");
    fs::write(
        &cfg,
        "epochs = 1\nbatch_size = 4\nmax_depth = 2\nmax_width = 2\noptimizer = \"sgd\"\nlr_logic = 1e300\nlr_policy = 1e300\n",
    )
    .unwrap();
    let o = run(&["train", "--config", s(&cfg), "--dataset", s(&data), "--out-dir", s(&dir.path().join("r"))]);
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn eval_is_deterministic_and_uniform_model_matches_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "d.json", 400, 2);
    let d = load_dataset(&data).unwrap();
    let config = TrainConfig {
        max_depth: 2,
        max_width: 2,
        ..TrainConfig::default()
    };
    let ckpt = dir.path().join("uniform.json");
    TrainedModel::init(&d.vocabulary, &config).save(&ckpt).unwrap();

    let r1 = dir.path().join("r1.json");
    let r2 = dir.path().join("r2.json");
    let recs = dir.path().join("records.csv");
    for r in [&r1, &r2] {
        ok(&[
            "eval", "--checkpoint", s(&ckpt), "--dataset", s(&data), "--split", "train", "--n-samples", "2",
            "--seed", "9", "--out", s(r), "--records", s(&recs),
        ]);
    }
    assert_eq!(fs::read(&r1).unwrap(), fs::read(&r2).unwrap());
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(&r1).unwrap()).unwrap();
    for key in ["split", "n_sequences", "n_samples", "er", "mr", "nll", "baselines", "per_seed"] {
        assert!(report.get(key).is_some(), "report lacks {key}");
    }
    let er = report["er"].as_f64().unwrap();
    let uniform = report["baselines"]["uniform"]["er"].as_f64().unwrap();
    assert_eq!(uniform, 0.5);
    // 320 sequences: three binomial standard deviations is about 0.084.
    assert!((er - uniform).abs() < 0.1, "er {er}");
    assert_eq!(fs::read_to_string(&recs).unwrap().lines().count(), 321);
}

#[test]
fn sample_emits_trees_and_frequency_weighted_dot() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "d.json", 40, 1);
    let run_dir = dir.path().join("run");
    let cfg = smoke_config(dir.path());
    ok(&["train", "--config", s(&cfg), "--dataset", s(&data), "--out-dir", s(&run_dir)]);
    let ckpt = run_dir.join("last.json");

    let out = dir.path().join("dot");
    ok(&[
        "sample", "--checkpoint", s(&ckpt), "--dataset", s(&data), "--sequence", "3", "-n", "25", "--format", "dot",
        "--out-dir", s(&out), "--seed", "4",
    ]);
    let dots = fs::read_dir(&out)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().starts_with("tree_"))
        .count();
    assert_eq!(dots, 25);
    let trees: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("trees.json")).unwrap()).unwrap();
    let trees = trees["trees"].as_array().unwrap();
    assert_eq!(trees.len(), 25);

    // Recount path frequencies from the JSON and compare with the summary.
    let mut counts = std::collections::BTreeMap::<String, f64>::new();
    for t in trees {
        for p in t["paths"].as_array().unwrap() {
            let key: Vec<&str> = p.as_array().unwrap().iter().map(|x| x.as_str().unwrap()).collect();
            *counts.entry(key.join("<")).or_default() += 1.0 / 25.0;
        }
    }
    let summary = fs::read_to_string(out.join("summary.dot")).unwrap();
    assert!(summary.starts_with("digraph"));
    assert_eq!(summary.matches('{').count(), summary.matches('}').count());
    let freqs: Vec<f64> = summary
        .lines()
        .filter_map(|l| l.split("freq=").nth(1))
        .map(|r| r.split(',').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(freqs.len(), counts.len());
    let mut want: Vec<f64> = counts.values().copied().collect();
    let mut got = freqs.clone();
    want.sort_by(f64::total_cmp);
    got.sort_by(f64::total_cmp);
    for (w, g) in want.iter().zip(&got) {
        assert!((w - g).abs() < 1e-12);
    }

    let again = dir.path().join("again");
    ok(&[
        "sample", "--checkpoint", s(&ckpt), "--dataset", s(&data), "--sequence", "3", "-n", "25", "--format", "dot",
        "--out-dir", s(&again), "--seed", "4",
    ]);
    assert_eq!(
        fs::read(out.join("trees.json")).unwrap(),
        fs::read(again.join("trees.json")).unwrap()
    );

    let js = dir.path().join("json");
    ok(&[
        "sample", "--checkpoint", s(&ckpt), "--dataset", s(&data), "-n", "5", "--out-dir", s(&js),
    ]);
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(js.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["n"], 5);

    let seq = dir.path().join("seq.json");
    fs::write(&seq, r#"{"events": [{"t": 0.5, "type": "B"}, {"t": 1.0, "type": 3}], "horizon": 2.0, "label": "A"}"#).unwrap();
    ok(&["sample", "--checkpoint", s(&ckpt), "--sequence-file", s(&seq), "-n", "3", "--out-dir", s(&dir.path().join("f"))]);

    let o = run(&["sample", "--checkpoint", s(&ckpt), "--dataset", s(&data), "--sequence", "999", "--out-dir", s(&js)]);
    assert_eq!(o.status.code(), Some(2));
}
