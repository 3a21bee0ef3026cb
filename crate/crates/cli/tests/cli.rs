use std::path::Path;
use std::process::{Command, Output};

use dualpath_core::audio::{write_wav, Waveform};
use dualpath_core::dft::{read_dft, read_dft_header};
use dualpath_core::manifest::load_manifest;

fn dualpath(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dualpath"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn synth(dir: &Path, n: usize) {
    let o = dualpath(dir, &["synth", "--out-dir", "data", "--n-videos", &n.to_string()]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn featurize_contract() {
    let dir = tempfile::tempdir().unwrap();
    let wavs = dir.path().join("wavs");
    std::fs::create_dir(&wavs).unwrap();

    let o = dualpath(dir.path(), &["featurize", "--wav-dir", "wavs", "--out-dir", "feats"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stderr(&o).contains("no inputs"));

    let tone: Vec<f64> = (0..16_000).map(|n| 0.3 * (n as f64 * 0.1).sin()).collect();
    write_wav(&wavs.join("one.wav"), &Waveform::new(tone, 16_000).unwrap()).unwrap();
    let o = dualpath(dir.path(), &["featurize", "--wav-dir", "wavs", "--out-dir", "feats"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let (_, shape) = read_dft_header(&dir.path().join("feats/one.dft")).unwrap();
    assert_eq!(shape, [128, 55]);

    let cd = hound::WavSpec {
        channels: 1,
        sample_rate: 44_100,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(wavs.join("cd.wav"), cd).unwrap();
    for _ in 0..44_100 {
        w.write_sample(0i16).unwrap();
    }
    w.finalize().unwrap();
    let o = dualpath(dir.path(), &["featurize", "--wav-dir", "wavs", "--out-dir", "feats"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("cd.wav"), "{}", stderr(&o));
}

#[test]
fn train_writes_a_reproducible_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 24);
    let args = |run: &str| {
        vec![
            "train".to_string(),
            "--run-dir".into(),
            run.into(),
            "--manifest".into(),
            "data/manifest.jsonl".into(),
            "--epochs".into(),
            "3".into(),
            "--seed".into(),
            "7".into(),
        ]
    };
    let run = |name: &str| {
        let a = args(name);
        let o = dualpath(dir.path(), &a.iter().map(String::as_str).collect::<Vec<_>>());
        assert!(o.status.success(), "{}", stderr(&o));
        stdout(&o)
    };
    let (a, b) = (run("run_a"), run("run_b"));
    let final_line = |s: &str| s.lines().find(|l| l.starts_with("final")).unwrap().to_string();
    assert_eq!(final_line(&a), final_line(&b));
    assert_eq!(a, b);

    let root = dir.path().join("run_a");
    for f in ["config.txt", "config.json", "VERSION", "best.dvhd", "last.dvhd", "runlog.jsonl", "timing.jsonl"] {
        assert!(root.join(f).is_file(), "{f}");
    }
    let runlog = std::fs::read_to_string(root.join("runlog.jsonl")).unwrap();
    assert_eq!(runlog, std::fs::read_to_string(dir.path().join("run_b/runlog.jsonl")).unwrap());
    assert_eq!(runlog.lines().count(), 3);
    let config = std::fs::read_to_string(root.join("config.txt")).unwrap();
    assert!(config.contains("seed = 7") && config.contains("epochs = 3"));
    assert!(std::fs::read_to_string(root.join("VERSION")).unwrap().starts_with(env!("CARGO_PKG_VERSION")));

    // the recorded config reproduces the run
    let o = dualpath(dir.path(), &["train", "--run-dir", "run_c", "--config", "run_a/config.txt"]);
    assert_eq!(final_line(&stdout(&o)), final_line(&a));
}

#[test]
fn train_reports_missing_manifest_as_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = dualpath(dir.path(), &["train", "--run-dir", "r", "--manifest", "nowhere/m.jsonl"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nowhere/m.jsonl"));
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        &["frobnicate"][..],
        &["train", "--run-dir", "r", "--set", "learning_rat=1"],
        &["train", "--run-dir", "r", "--preset", "imagenet"],
        &["eval", "--manifest", "m.jsonl"],
        &["ablate", "--axis", "depth", "--run-dir", "r"],
    ] {
        let o = dualpath(dir.path(), args);
        assert_eq!(o.status.code(), Some(1), "{args:?}: {}", stderr(&o));
    }
    std::fs::write(dir.path().join("bad.cfg"), "epochs = 2\nwidth = 3\n").unwrap();
    let o = dualpath(dir.path(), &["train", "--run-dir", "r", "--config", "bad.cfg"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("width"));
}

#[test]
fn eval_with_oracle_scores_hits_maxima() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 20);
    let manifest = load_manifest(&dir.path().join("data/manifest.jsonl")).unwrap();
    let test = manifest.split("test");
    let mut scores = String::new();
    for r in &test {
        let gt = read_dft(&manifest.resolve(&r.gt)).unwrap().to_vec();
        scores += &(serde_json::json!({ "id": r.id, "scores": gt }).to_string() + "\n");
    }
    std::fs::write(dir.path().join("oracle.jsonl"), scores).unwrap();
    let o = dualpath(
        dir.path(),
        &["eval", "--scores", "oracle.jsonl", "--manifest", "data/manifest.jsonl", "--split", "test", "--out-dir", "ev"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let table = stdout(&o);
    let header: Vec<&str> = table.lines().next().unwrap().split_whitespace().skip(1).collect();
    assert_eq!(header, ["F1", "mAP50", "mAP15", "rho", "tau"]);
    let mean = table.lines().find(|l| l.starts_with("mean")).unwrap();
    assert!(mean.split_whitespace().skip(1).all(|v| v == "1.0000"), "{mean}");

    let jsonl = std::fs::read_to_string(dir.path().join("ev/eval.jsonl")).unwrap();
    let per_video = jsonl.lines().filter(|l| !l.contains("\"aggregate\"")).count();
    assert_eq!(per_video, test.len());

    std::fs::write(dir.path().join("partial.jsonl"), "").unwrap();
    let o = dualpath(dir.path(), &["eval", "--scores", "partial.jsonl", "--manifest", "data/manifest.jsonl"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn eval_of_a_trained_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 16);
    let o = dualpath(dir.path(), &["train", "--run-dir", "run", "--manifest", "data/manifest.jsonl", "--epochs", "1"]);
    assert!(o.status.success());
    let o = dualpath(
        dir.path(),
        &["eval", "--checkpoint", "run/best.dvhd", "--manifest", "data/manifest.jsonl", "--split", "val"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).lines().any(|l| l.starts_with("mean")));
}

#[test]
fn ablation_tables() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 16);
    let run = |axis: &str, out: &str| {
        let o = dualpath(
            dir.path(),
            &["ablate", "--axis", axis, "--run-dir", out, "--manifest", "data/manifest.jsonl", "--epochs", "1"],
        );
        assert!(o.status.success(), "{}", stderr(&o));
        stdout(&o)
    };
    let modality = run("modality", "abl");
    assert_eq!(modality.lines().count(), 8);
    assert!(modality.lines().next().unwrap().ends_with("F1    mAP50    mAP15      rho      tau"));
    assert_eq!(
        std::fs::read_to_string(dir.path().join("abl/ablation_modality.jsonl")).unwrap().lines().count(),
        7
    );
    assert_eq!(run("fusion", "abl").lines().count(), 5);
    assert_eq!(run("modality", "abl2"), modality);
}

#[test]
fn split_writes_disjoint_fold_manifests() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 25);
    let o = dualpath(dir.path(), &["split", "--manifest", "data/manifest.jsonl", "--out-dir", "folds", "--folds", "5"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let mut tested = std::collections::HashSet::new();
    for i in 0..5 {
        let m = load_manifest(&dir.path().join(format!("folds/fold{i}.jsonl"))).unwrap();
        assert_eq!(m.records.len(), 25);
        let test = m.split("test");
        assert_eq!(test.len(), 5);
        assert_eq!(m.split("val").len(), 5);
        for r in test {
            assert!(tested.insert(r.id.clone()));
        }
    }
    assert_eq!(tested.len(), 25);
    let o = dualpath(dir.path(), &["split", "--manifest", "data/manifest.jsonl", "--out-dir", "f2", "--folds", "2"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn gradcheck_passes_and_detects_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let o = dualpath(dir.path(), &["gradcheck", "--out", "groups.jsonl"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let names: Vec<String> = stdout(&o)
        .lines()
        .filter(|l| l.starts_with("PASS"))
        .map(|l| l.split_whitespace().nth(1).unwrap().to_string())
        .collect();
    let unique: std::collections::HashSet<_> = names.iter().collect();
    assert_eq!(unique.len(), names.len());
    assert!(names.iter().any(|n| n == "input.spectrogram"));
    assert_eq!(std::fs::read_to_string(dir.path().join("groups.jsonl")).unwrap().lines().count(), names.len());

    let o = dualpath(dir.path(), &["gradcheck", "--corrupt-backward", "softmax", "--segments", "3", "--frames", "12"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stdout(&o).contains("FAIL"));
}
