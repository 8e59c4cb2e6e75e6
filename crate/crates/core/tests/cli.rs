use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use vsumm::checkpoint;
use vsumm::model::{init_params, ModelConfig};

struct Out {
    code: i32,
    stdout: String,
    stderr: String,
}

fn vsumm(dir: &Path, args: &[&str]) -> Out {
    let o = Command::new(env!("CARGO_BIN_EXE_vsumm"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap();
    Out {
        code: o.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&o.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&o.stderr).into_owned(),
    }
}

const SMALL: &str = "[synth]\nvideos = 5\nframes = 32\n\n[train]\nepochs = 2\nlr = 0.01\n";

/// Writes a small config and a synthetic dataset under `dir`.
fn fixture(dir: &Path, extra: &str) -> PathBuf {
    fs::write(dir.join("run.toml"), format!("{SMALL}{extra}")).unwrap();
    let o = vsumm(dir, &["synth", "--config", "run.toml", "--out", "data", "--seed", "3"]);
    assert_eq!(o.code, 0, "{}", o.stderr);
    PathBuf::from(o.stdout.trim())
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(tree(&p));
        } else {
            out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
        }
    }
    out.sort();
    out
}

#[test]
fn synth_is_deterministic_per_seed() {
    let d = tempfile::tempdir().unwrap();
    let dir = d.path();
    for out in ["a", "b"] {
        assert_eq!(vsumm(dir, &["synth", "--out", out, "--seed", "7"]).code, 0);
    }
    assert_eq!(vsumm(dir, &["synth", "--out", "c", "--seed", "8"]).code, 0);
    let a = tree(&dir.join("a"));
    assert_eq!(a.len(), 41);
    assert_eq!(a, tree(&dir.join("b")));
    assert_ne!(a, tree(&dir.join("c")));
}

#[test]
fn synth_one_cluster_is_a_config_error() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("k1.toml"), "[synth]\nclusters = 1\n").unwrap();
    let o = vsumm(d.path(), &["synth", "--config", "k1.toml", "--out", "x"]);
    assert_eq!(o.code, 1, "{}", o.stderr);
    assert!(o.stderr.starts_with("vsumm: "));
}

#[test]
fn unknown_config_key_is_rejected() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("bad.toml"), "[train]\nepochs = 1\nlearnign_rate = 3\n").unwrap();
    let o = vsumm(d.path(), &["synth", "--config", "bad.toml", "--out", "x"]);
    assert_ne!(o.code, 0);
    assert!(o.stderr.contains("learnign_rate"), "{}", o.stderr);
}

#[test]
fn gradcheck_passes_and_catches_injected_fault() {
    let d = tempfile::tempdir().unwrap();
    let ok = vsumm(d.path(), &["gradcheck"]);
    assert_eq!(ok.code, 0, "{}{}", ok.stdout, ok.stderr);
    assert!(ok.stdout.lines().count() > 5);
    assert!(!ok.stdout.contains("FAIL"));

    let bad = vsumm(d.path(), &["gradcheck", "--inject-fault", "conv-input-grad-sign"]);
    assert_eq!(bad.code, 3, "{}", bad.stdout);
    assert!(bad.stdout.contains("FAIL"));

    fs::write(d.path().join("eps.toml"), "[gradcheck]\neps = 0.5\n").unwrap();
    assert_eq!(vsumm(d.path(), &["gradcheck", "--config", "eps.toml"]).code, 1);
}

#[test]
fn train_zero_epochs_writes_the_initialization() {
    let d = tempfile::tempdir().unwrap();
    let manifest = fixture(d.path(), "");
    let m = manifest.to_str().unwrap();
    let o = vsumm(d.path(), &["train", "--config", "run.toml", "--manifest", m, "--out", "t0", "--seed", "5", "--epochs", "0"]);
    assert_eq!(o.code, 0, "{}", o.stderr);
    let loaded = checkpoint::load(&d.path().join("t0/model.ckpt")).unwrap();
    let init = init_params(&ModelConfig::default(), 5).unwrap();
    assert_eq!(loaded.names, init.names);
    for (a, b) in loaded.tensors.iter().zip(&init.tensors) {
        let rounded: Vec<f64> = b.data().iter().map(|&v| f64::from(v as f32)).collect();
        assert_eq!(a.data(), &rounded[..]);
    }
}

#[test]
fn train_logs_config_and_epochs() {
    let d = tempfile::tempdir().unwrap();
    let manifest = fixture(d.path(), "");
    let m = manifest.to_str().unwrap();
    let o = vsumm(d.path(), &["train", "--config", "run.toml", "--manifest", m, "--out", "t"]);
    assert_eq!(o.code, 0, "{}", o.stderr);
    assert!(o.stdout.trim().ends_with("model.ckpt"));
    let log = fs::read_to_string(d.path().join("t/train_log.jsonl")).unwrap();
    let events: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(events[0]["event"], "config");
    // the echoed config reproduces the run
    let echoed = vsumm::config::RunConfig::from_toml(events[0]["config_toml"].as_str().unwrap(), Path::new("e")).unwrap();
    assert_eq!(echoed.train.epochs, 2);
    assert_eq!(echoed.manifest, vec![manifest.clone()]);
    let epochs = events.iter().filter(|e| e["event"] == "epoch").count();
    assert_eq!(epochs, 2);
    assert!(events.iter().any(|e| e["event"] == "step"));
}

#[test]
fn supervised_without_annotations_is_a_config_error() {
    let d = tempfile::tempdir().unwrap();
    fixture(d.path(), "");
    let dir = d.path().join("data");
    let text = fs::read_to_string(dir.join("manifest.tsv")).unwrap();
    let stripped: String = text
        .lines()
        .map(|l| match l.rsplit_once('\t') {
            Some((head, _)) => format!("{head}\t-\n"),
            None => format!("{l}\n"),
        })
        .collect();
    fs::write(dir.join("bare.tsv"), stripped).unwrap();
    fs::write(d.path().join("sup.toml"), format!("{SMALL}paradigm = \"supervised\"\n")).unwrap();
    let o = vsumm(d.path(), &["train", "--config", "sup.toml", "--manifest", "data/bare.tsv", "--out", "s"]);
    assert_eq!(o.code, 1, "{}", o.stderr);
}

#[test]
fn summarize_is_deterministic_and_checks_the_config() {
    let d = tempfile::tempdir().unwrap();
    let manifest = fixture(d.path(), "");
    let m = manifest.to_str().unwrap();
    assert_eq!(vsumm(d.path(), &["train", "--config", "run.toml", "--manifest", m, "--out", "t", "--epochs", "1"]).code, 0);
    let ck = "t/model.ckpt";
    for out in ["s1", "s2"] {
        let o = vsumm(d.path(), &["summarize", "--checkpoint", ck, "--manifest", m, "--out", out, "--budget", "0.15", "--budget", "1.0"]);
        assert_eq!(o.code, 0, "{}", o.stderr);
        assert_eq!(o.stdout.lines().count(), 10);
    }
    let a = tree(&d.path().join("s1"));
    assert_eq!(a, tree(&d.path().join("s2")));

    let (_, full) = vsumm::shots::parse_summary(&fs::read_to_string(d.path().join("s1/video_000.b1.summary")).unwrap()).unwrap();
    assert!(full.used <= 32);
    let (_, short) = vsumm::shots::parse_summary(&fs::read_to_string(d.path().join("s1/video_000.b0.15.summary")).unwrap()).unwrap();
    assert!(short.used <= 4);

    // only one video, default budget from the manifest
    let o = vsumm(d.path(), &["summarize", "--checkpoint", ck, "--manifest", m, "--out", "one", "--video", "video_001"]);
    assert_eq!(o.code, 0, "{}", o.stderr);
    assert_eq!(o.stdout.lines().count(), 1);
    assert!(o.stdout.contains("video_001.b0.2.summary"));

    fs::write(d.path().join("wide.toml"), "[model]\nbase_channels = 4\n").unwrap();
    let o = vsumm(d.path(), &["summarize", "--config", "wide.toml", "--checkpoint", ck, "--manifest", m, "--out", "w"]);
    assert_eq!(o.code, 1);
    assert!(o.stderr.contains("base_channels"), "{}", o.stderr);
}

#[test]
fn single_shot_full_budget_summary_covers_the_video() {
    // a constant video segments into one shot; untrained scores near 0.5
    // still need a keyframe, so write a model whose head bias is large
    let d = tempfile::tempdir().unwrap();
    let dir = d.path();
    let seq = vsumm::data::FeatureSequence {
        id: "flat".into(),
        tensor: vsumm::Tensor::new(&[16, 16, 1, 1], vec![0.25; 256]).unwrap(),
        n: 1,
        provenance: vsumm::data::Provenance::Synthetic,
    };
    vsumm::data::write_features(&dir.join("flat.fseq"), &seq).unwrap();
    fs::write(dir.join("m.tsv"), "vsumm-manifest v1\nflat\tflat.fseq\t-\n").unwrap();
    let mut p = init_params(&ModelConfig::default(), 0).unwrap();
    let last = p.tensors.len() - 1;
    p.tensors[last] = vsumm::Tensor::new(p.tensors[last].shape(), vec![5.0; p.tensors[last].len()]).unwrap();
    checkpoint::save(&dir.join("hot.ckpt"), &p).unwrap();
    let o = vsumm(dir, &["summarize", "--checkpoint", "hot.ckpt", "--manifest", "m.tsv", "--out", "s", "--budget", "1.0"]);
    assert_eq!(o.code, 0, "{}", o.stderr);
    let (_, s) = vsumm::shots::parse_summary(&fs::read_to_string(dir.join("s/flat.b1.summary")).unwrap()).unwrap();
    assert_eq!(s.shots.len(), 1);
    assert!(s.mask.iter().all(|&m| m));
}

#[test]
fn evaluate_writes_results_per_split() {
    let d = tempfile::tempdir().unwrap();
    let manifest = fixture(d.path(), "\n[eval]\nsplits = 2\nlength_study = true\n");
    let m = manifest.to_str().unwrap();
    let o = vsumm(d.path(), &["evaluate", "--config", "run.toml", "--manifest", m, "--out", "e"]);
    assert_eq!(o.code, 0, "{}", o.stderr);
    let results = fs::read_to_string(d.path().join("e/results.tsv")).unwrap();
    let mut lines = results.lines();
    assert_eq!(lines.next(), Some(vsumm::eval::RESULTS_HEADER));
    // 5 videos, 1 test video per split
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split('\t').collect()).collect();
    assert_eq!(rows.len(), 2);
    for r in &rows {
        let mean: f64 = r[5].parse().unwrap();
        let max: f64 = r[6].parse().unwrap();
        assert!((0.0..=1.0).contains(&mean) && max >= mean);
    }
    let plot = fs::read_to_string(d.path().join("e/length_study.tsv")).unwrap();
    assert_eq!(plot.lines().count(), 5);
    let log = fs::read_to_string(d.path().join("e/eval_log.jsonl")).unwrap();
    assert!(log.lines().next().unwrap().contains("\"config\""));
}

#[test]
fn evaluate_needs_annotations() {
    let d = tempfile::tempdir().unwrap();
    let seq = vsumm::data::FeatureSequence {
        id: "x".into(),
        tensor: vsumm::Tensor::new(&[8, 16, 1, 1], vec![0.1; 128]).unwrap(),
        n: 1,
        provenance: vsumm::data::Provenance::Synthetic,
    };
    vsumm::data::write_features(&d.path().join("x.fseq"), &seq).unwrap();
    fs::write(d.path().join("m.tsv"), "vsumm-manifest v1\nx\tx.fseq\t-\ny\tx.fseq\t-\n").unwrap();
    let o = vsumm(d.path(), &["evaluate", "--manifest", "m.tsv", "--out", "e"]);
    assert_eq!(o.code, 2, "{}", o.stderr);
}

#[test]
fn missing_manifest_and_bad_budget() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(vsumm(d.path(), &["train", "--out", "t"]).code, 1);
    assert_eq!(vsumm(d.path(), &["train", "--manifest", "nope.tsv", "--out", "t"]).code, 2);
    assert_eq!(vsumm(d.path(), &["summarize", "--budget", "1.5"]).code, 1);
}
