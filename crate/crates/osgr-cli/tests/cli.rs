//! End-to-end tests that drive the compiled `osgr` binary the way a user
//! would: generate data, train, calibrate, evaluate, detect, and check
//! that the digest guards and config validation actually stop bad runs.
//!
//! The expensive gen-synth -> train -> calibrate sequence runs once into a
//! shared fixture; every test that only reads artifacts piggybacks on it.

use once_cell::sync::Lazy;
use osgr::eval::AggregateReport;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_osgr");

fn osgr(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env("RUST_LOG", "error")
        .env_remove("OSGR_THREADS")
        .output()
        .expect("osgr binary should run")
}

fn assert_ok(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed\nstdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

/// Six synthetic subjects, 1/8-width model: big enough that calibration
/// finds a separating threshold, small enough to train in seconds.
fn write_config(path: &Path, recordings: &Path, epochs: usize) {
    let text = format!(
        r#"
seed = 11

[data]
recordings_dir = "{rec}"
n_frames = 10
n_points = 16

[synth]
subjects = 6
separability = 0.9
duration_s = 60.0

[model]
scale_factor = 0.125

[train]
epochs = {epochs}
batch_size = 16
adversary = "off"

[eval]
unknown_count = 1
trials = 1
k = [1, 2]
"#,
        rec = recordings.display()
    );
    std::fs::write(path, text).expect("write config");
}

struct Fixture {
    _dir: TempDir,
    config: PathBuf,
    recordings: PathBuf,
    run: PathBuf,
}

impl Fixture {
    fn checkpoint(&self) -> PathBuf {
        self.run.join("checkpoint.ckpt")
    }

    fn detector(&self) -> PathBuf {
        self.run.join("detector.json")
    }
}

static FIXTURE: Lazy<Fixture> = Lazy::new(|| {
    let dir = TempDir::new().expect("tempdir");
    let recordings = dir.path().join("rec");
    let config = dir.path().join("tiny.toml");
    write_config(&config, &recordings, 25);
    let run = dir.path().join("run");

    assert_ok(&osgr(&["gen-synth", "--config", p(&config)]), "gen-synth");
    assert_ok(
        &osgr(&["train", "--config", p(&config), "--out", p(&run)]),
        "train",
    );
    assert_ok(
        &osgr(&[
            "calibrate",
            "--config",
            p(&config),
            "--checkpoint",
            p(&run.join("checkpoint.ckpt")),
            "--out",
            p(&run),
        ]),
        "calibrate",
    );
    Fixture { _dir: dir, config, recordings, run }
});

#[test]
fn generation_is_byte_identical_across_reruns() {
    let dir = TempDir::new().unwrap();
    let config = dir.path().join("gen.toml");
    write_config(&config, &dir.path().join("unused"), 1);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert_ok(
        &osgr(&["gen-synth", "--config", p(&config), "--out", p(&a)]),
        "gen-synth a",
    );
    assert_ok(
        &osgr(&["gen-synth", "--config", p(&config), "--out", p(&b)]),
        "gen-synth b",
    );

    let mut names: Vec<String> = std::fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names.len(), 6 * 3, "one file per subject x modality");
    for name in &names {
        let bytes_a = std::fs::read(a.join(name)).unwrap();
        let bytes_b = std::fs::read(b.join(name)).unwrap();
        assert_eq!(bytes_a, bytes_b, "{name} differs between reruns");
        assert!(!bytes_a.is_empty());
    }
}

#[test]
fn convert_round_trips_csv_points() {
    let dir = TempDir::new().unwrap();
    let csv = dir.path().join("walk.csv");
    let out = dir.path().join("walk.mmgt");
    std::fs::write(
        &csv,
        "frame,x,y,z,v\n0,1.0,2.0,0.5,0.1\n0,1.1,2.1,0.6,0.2\n2,1.4,2.4,0.7,0.3\n",
    )
    .unwrap();
    assert_ok(
        &osgr(&[
            "convert",
            "--input",
            p(&csv),
            "--output",
            p(&out),
            "--subject",
            "42",
            "--modality",
            "1",
            "--frame-rate",
            "20",
        ]),
        "convert",
    );
    let seg = osgr::data::load_recording(&out).expect("converted recording loads");
    assert_eq!(seg.subject_id, 42);
    assert_eq!(seg.modality, osgr::data::Modality::Smartphone);
    assert_eq!(seg.frame_rate_hz, 20.0);
    // Frame 1 has no rows but still exists between frames 0 and 2.
    assert_eq!(seg.frames.len(), 3);
    assert_eq!(seg.frames[0].points.len(), 2);
    assert_eq!(seg.frames[1].points.len(), 0);
    // The binary format stores single-precision records.
    let want = [1.4f32 as f64, 2.4f32 as f64, 0.7f32 as f64, 0.3f32 as f64];
    assert_eq!(seg.frames[2].points[0], want);
}

#[test]
fn pipeline_produces_all_artifacts() {
    let f = &*FIXTURE;
    for name in ["checkpoint.ckpt", "training_curve.csv", "resolved_config.json"] {
        assert!(f.run.join(name).is_file(), "train should write {name}");
    }
    let detector = std::fs::read_to_string(f.detector()).expect("detector.json exists");
    let v: serde_json::Value = serde_json::from_str(&detector).unwrap();
    assert!(v["tau_p"].as_f64().unwrap().is_finite());
    assert_eq!(v["checkpoint_digest"].as_str().unwrap().len(), 64);
    assert_eq!(v["config_digest"].as_str().unwrap().len(), 64);
    assert_eq!(v["known_subjects"].as_array().unwrap().len(), 4);
}

#[test]
fn eval_sweeps_each_requested_k() {
    let f = &*FIXTURE;
    let out = f._dir.path().join("eval_out");
    assert_ok(
        &osgr(&[
            "eval",
            "--config",
            p(&f.config),
            "--checkpoint",
            p(&f.checkpoint()),
            "--detector",
            p(&f.detector()),
            "--k",
            "1,2",
            "--out",
            p(&out),
        ]),
        "eval",
    );
    let text = std::fs::read_to_string(out.join("report.json")).unwrap();
    let report: AggregateReport = serde_json::from_str(&text).unwrap();
    assert_eq!(report.trials.len(), 2, "one row per requested k");
    let ks: Vec<usize> = report.trials.iter().map(|t| t.k).collect();
    assert_eq!(ks, vec![1, 2]);
    assert_eq!(report.summaries.len(), 2);
    assert_eq!(report.n_known, 4);
    assert_eq!(report.n_unknown, 1, "one evaluated unknown beside the calibration subject");
    assert_eq!(report.config_digest.len(), 64);

    let plot = std::fs::read_to_string(out.join("plot.csv")).unwrap();
    assert_eq!(plot.lines().count(), 3, "header plus one row per k");
    assert!(plot.starts_with("openness,k,mean_f1,dispersion"));
    assert!(out.join("confusion_k1.csv").is_file());
    assert!(out.join("confusion_k2.csv").is_file());
}

#[test]
fn detect_reports_a_verdict_per_recording() {
    let f = &*FIXTURE;
    let recording = f.recordings.join("subject01_free_walk.mmgt");
    let out = osgr(&[
        "detect",
        "--config",
        p(&f.config),
        "--checkpoint",
        p(&f.checkpoint()),
        "--detector",
        p(&f.detector()),
        "--recording",
        p(&recording),
        "--k",
        "3",
    ]);
    assert_ok(&out, "detect");
    let stdout = stdout_of(&out);
    assert_eq!(stdout.matches("window ").count(), 3, "one line per window");
    assert!(
        stdout.contains("verdict: Known(") || stdout.contains("verdict: Unknown"),
        "missing verdict in:\n{stdout}"
    );

    // Asking for more evidence than the recording holds is an error.
    let out = osgr(&[
        "detect",
        "--config",
        p(&f.config),
        "--checkpoint",
        p(&f.checkpoint()),
        "--detector",
        p(&f.detector()),
        "--recording",
        p(&recording),
        "--k",
        "100000",
    ]);
    assert!(!out.status.success());
    assert!(stderr_of(&out).contains("windows"), "should explain the shortfall");
}

#[test]
fn stale_detector_is_rejected_by_digest() {
    let f = &*FIXTURE;
    // Retrain with different settings: the new checkpoint's bytes (and
    // digest) no longer match what the detector was calibrated against.
    let dir = TempDir::new().unwrap();
    let config = dir.path().join("one_epoch.toml");
    write_config(&config, &f.recordings, 1);
    let run2 = dir.path().join("run2");
    assert_ok(
        &osgr(&["train", "--config", p(&config), "--out", p(&run2)]),
        "1-epoch retrain",
    );
    let out = osgr(&[
        "eval",
        "--config",
        p(&config),
        "--checkpoint",
        p(&run2.join("checkpoint.ckpt")),
        "--detector",
        p(&f.detector()),
        "--out",
        p(&run2),
    ]);
    assert!(!out.status.success(), "stale detector must be rejected");
    let err = stderr_of(&out);
    assert!(err.contains("re-run `osgr calibrate`"), "unhelpful error:\n{err}");
}

#[test]
fn model_mismatch_is_caught_before_scoring() {
    let f = &*FIXTURE;
    // --points changes the implied architecture; the checkpoint was
    // trained with 16 points per frame.
    let out = osgr(&[
        "calibrate",
        "--config",
        p(&f.config),
        "--points",
        "8",
        "--checkpoint",
        p(&f.checkpoint()),
        "--out",
        p(f._dir.path()),
    ]);
    assert!(!out.status.success());
    let err = stderr_of(&out);
    assert!(err.contains("checkpoint was trained with"), "unhelpful error:\n{err}");
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = TempDir::new().unwrap();
    let config = dir.path().join("typo.toml");
    std::fs::write(
        &config,
        r#"
seed = 1

[data]
recordings_dir = "x"
n_frames = 10
n_points = 16

[model]
scale_factor = 0.125

[train]
epochz = 3

[eval]
unknown_count = 1
trials = 1
k = [1]
"#,
    )
    .unwrap();
    let out = osgr(&["train", "--config", p(&config), "--out", p(dir.path())]);
    assert!(!out.status.success());
    assert!(stderr_of(&out).contains("epochz"), "should name the bad key");
}

#[test]
fn bad_flag_values_are_rejected_up_front() {
    let f = &*FIXTURE;
    let out = osgr(&[
        "eval",
        "--config",
        p(&f.config),
        "--modality",
        "sideways",
        "--out",
        p(f._dir.path()),
    ]);
    assert!(!out.status.success());
    assert!(stderr_of(&out).contains("modality"));

    let out = osgr(&[
        "experiment",
        "--config",
        p(&f.config),
        "--ablation",
        "v9",
        "--out",
        p(f._dir.path()),
    ]);
    assert!(!out.status.success());
    assert!(stderr_of(&out).contains("ablation"));
}

#[test]
fn experiment_aggregates_trials() {
    let f = &*FIXTURE;
    let dir = TempDir::new().unwrap();
    let config = dir.path().join("exp.toml");
    write_config(&config, &f.recordings, 18);
    let out_dir = dir.path().join("exp_out");
    let out = osgr(&[
        "experiment",
        "--config",
        p(&config),
        "--out",
        p(&out_dir),
        "--deterministic",
    ]);
    assert_ok(&out, "experiment");
    let text = std::fs::read_to_string(out_dir.join("report.json")).unwrap();
    let report: AggregateReport = serde_json::from_str(&text).unwrap();
    assert_eq!(report.trials.len(), 2, "1 trial x 2 evidence lengths");
    assert_eq!(report.summaries.len(), 2);
    for s in &report.summaries {
        assert_eq!(s.n_trials, 1);
        assert!(s.mean_f1.is_finite());
    }
    assert!(out_dir.join("plot.csv").is_file());
}
