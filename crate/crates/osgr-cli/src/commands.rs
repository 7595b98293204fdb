//! Command implementations.  Each command is a pure function of its
//! config and inputs: identical settings and seed produce byte-identical
//! artifacts, so any result can be regenerated from its logged config
//! digest.

use crate::config::{parse_modality, Ablation, ExperimentConfig};
use crate::CliError;
use osgr::data::{
    load_recording, load_recording_csv, make_partition, write_recording, DatasetPartition,
    Modality, PreprocessConfig, WindowedSequence,
};
use osgr::detect::{calibrate_threshold, detect, evaluate_openset, score_windows, DetectorConfig};
use osgr::eval::{
    aggregate_by_k, config_digest, f1_breakdown, openness, run_trials, write_confusion_csv,
    write_plot_csv, write_report_json, AggregateReport, RunPlan, TrialReport,
};
use osgr::prior::{place_centroids, DEFAULT_MIN_SEPARATION, DEFAULT_RADIUS};
use osgr::synth::{generate_profiles, simulate_recording};
use osgr::train::{
    load_checkpoint, save_checkpoint, split_known, split_known_chunked, train,
    write_training_curve, Checkpoint, SplitStrategy,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::Read;
use std::path::{Path, PathBuf};

/// Calibration artifact binding a threshold to the exact checkpoint it
/// was computed for.
#[derive(Debug, Serialize, Deserialize)]
pub struct DetectorFile {
    pub tau_p: f64,
    /// SHA-256 of the checkpoint file this threshold belongs to.
    pub checkpoint_digest: String,
    pub config_digest: String,
    pub calibration_subject: u32,
    pub known_subjects: Vec<u32>,
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let mut f = std::fs::File::open(path).map_err(|source| CliError::Artifact {
        path: path.to_path_buf(),
        source,
    })?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = f.read(&mut buf).map_err(|source| CliError::Artifact {
            path: path.to_path_buf(),
            source,
        })?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

fn log_resolved(config: &ExperimentConfig) -> Result<(), CliError> {
    let (json, digest) = config.resolved_json()?;
    log::info!("resolved config (digest {digest}):\n{json}");
    Ok(())
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|source| CliError::Artifact {
        path: dir.to_path_buf(),
        source,
    })
}

// ----- gen-synth ---------------------------------------------------------------

pub fn cmd_gen_synth(config: &ExperimentConfig, out_dir: &Path) -> Result<(), CliError> {
    log_resolved(config)?;
    let synth = config.synth.as_ref().ok_or_else(|| {
        CliError::Invalid("gen-synth needs a [synth] section in the config".into())
    })?;
    ensure_dir(out_dir)?;
    let profiles = generate_profiles(synth.subjects, config.seed, synth.separability);
    println!("subject  height  speed  gait_hz  arm_amp  leg_amp  points/frame  noise");
    for p in &profiles {
        println!(
            "{:>7}  {:>6.2}  {:>5.2}  {:>7.2}  {:>7.3}  {:>7.3}  {:>12.1}  {:>5.3}",
            p.subject_id,
            p.height,
            p.torso_speed_mean,
            p.gait_frequency,
            p.arm_swing_amplitude,
            p.leg_swing_amplitude,
            p.point_rate_mean,
            p.noise_sigma
        );
    }
    let mut written = 0usize;
    for p in &profiles {
        for m in Modality::all() {
            let seg = simulate_recording(p, m, synth.duration_s, synth.frame_rate_hz);
            let path = out_dir.join(format!("subject{:02}_{}.mmgt", p.subject_id, m.as_str()));
            write_recording(&path, &seg)?;
            written += 1;
        }
    }
    println!(
        "wrote {written} recordings ({} subjects x {} modalities) to {}",
        profiles.len(),
        Modality::all().len(),
        out_dir.display()
    );
    Ok(())
}

// ----- convert -----------------------------------------------------------------

pub fn cmd_convert(
    input: &Path,
    output: &Path,
    subject: u32,
    modality: &str,
    frame_rate_hz: f32,
) -> Result<(), CliError> {
    let modality = parse_modality(modality)?.ok_or_else(|| {
        CliError::Invalid("convert needs one concrete modality, not \"all\"".into())
    })?;
    let seg = load_recording_csv(input, subject, modality, frame_rate_hz)?;
    let points: usize = seg.frames.iter().map(|f| f.points.len()).sum();
    write_recording(output, &seg)?;
    println!(
        "converted {} -> {}: {} frames, {} points",
        input.display(),
        output.display(),
        seg.frames.len(),
        points
    );
    Ok(())
}

// ----- dataset loading ----------------------------------------------------------

/// Read every binary recording under the configured directory and window
/// it.  Files are taken in sorted name order so segment ids are stable.
pub fn load_dataset(config: &ExperimentConfig) -> Result<Vec<WindowedSequence>, CliError> {
    let dir = &config.data.recordings_dir;
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|source| CliError::Artifact { path: dir.clone(), source })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map_or(false, |x| x == "mmgt"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::Invalid(format!(
            "no .mmgt recordings in {}; run `osgr gen-synth` or `osgr convert` first",
            dir.display()
        )));
    }
    let pre = PreprocessConfig {
        n_frames: config.data.n_frames,
        n_points: config.data.n_points,
        step: config.window_step(),
        center_velocity: config.data.center_velocity,
        seed: config.seed,
    };
    let mut windows = Vec::new();
    let mut dropped = 0usize;
    for (i, path) in paths.iter().enumerate() {
        let seg = load_recording(path)?;
        let (ws, d) = osgr::data::windows_from_segment(&seg, i as u32, &pre)?;
        windows.extend(ws);
        dropped += d;
    }
    if dropped > 0 {
        log::warn!("dropped {dropped} windows containing empty frames");
    }
    if windows.is_empty() {
        return Err(CliError::Invalid(
            "recordings produced no windows; check n_frames against recording lengths".into(),
        ));
    }
    Ok(windows)
}

/// Rebuild the partition a config + seed implies.  Deterministic, so
/// train/calibrate/eval agree on it without an extra artifact.
pub fn build_partition(
    windows: &[WindowedSequence],
    config: &ExperimentConfig,
) -> Result<DatasetPartition, CliError> {
    let mut subjects: Vec<u32> = windows.iter().map(|w| w.label).collect();
    subjects.sort_unstable();
    subjects.dedup();
    let mut partition =
        make_partition(&subjects, config.eval.unknown_count + 1, config.seed)?;
    let (tr, va, te) = match config.split_strategy() {
        SplitStrategy::Random => {
            split_known(windows, &partition.known, (0.8, 0.1, 0.1), config.seed)?
        }
        SplitStrategy::ChunkByTime => {
            split_known_chunked(windows, &partition.known, (0.8, 0.1, 0.1))?
        }
    };
    partition.train_idx = tr;
    partition.val_idx = va;
    partition.test_idx = te;
    Ok(partition)
}

/// The checkpoint must describe the same experiment as the config on the
/// command line; otherwise scores and classes silently disagree.
fn check_consistency(
    checkpoint: &Checkpoint,
    config: &ExperimentConfig,
    partition: &DatasetPartition,
) -> Result<(), CliError> {
    let expected = config.model_config(partition.known.len());
    if expected != checkpoint.model {
        let want = config_digest(&serde_json::to_vec(&expected)?);
        let got = config_digest(&serde_json::to_vec(&checkpoint.model)?);
        return Err(CliError::Mismatch(format!(
            "config implies model digest {want} but checkpoint was trained with {got}; \
             pass the config used for training"
        )));
    }
    let mut trained: Vec<u32> = checkpoint.prior.label_map.iter().map(|(s, _)| *s).collect();
    trained.sort_unstable();
    if trained != partition.known {
        return Err(CliError::Mismatch(format!(
            "config + seed imply known subjects {:?} but the checkpoint was trained on {:?}; \
             seed or dataset changed since training",
            partition.known, trained
        )));
    }
    Ok(())
}

// ----- train --------------------------------------------------------------------

pub fn cmd_train(config: &ExperimentConfig, out_dir: &Path) -> Result<PathBuf, CliError> {
    log_resolved(config)?;
    ensure_dir(out_dir)?;
    let windows = load_dataset(config)?;
    let partition = build_partition(&windows, config)?;
    let model = config.model_config(partition.known.len());
    let mut prior = place_centroids(
        partition.known.len(),
        model.latent_dim,
        DEFAULT_RADIUS,
        DEFAULT_MIN_SEPARATION,
        config.seed,
    )?;
    prior.assign_subjects(&partition.known)?;
    let train_cfg = config.train_config()?;
    log::info!(
        "training on {} windows ({} known subjects), {} epochs",
        partition.train_idx.len(),
        partition.known.len(),
        train_cfg.epochs
    );
    let checkpoint = train(&windows, &partition, &prior, &model, &train_cfg)?;

    let ckpt_path = out_dir.join("checkpoint.ckpt");
    save_checkpoint(&ckpt_path, &checkpoint)?;
    write_training_curve(&out_dir.join("training_curve.csv"), &checkpoint.history)?;
    let (json, digest) = config.resolved_json()?;
    std::fs::write(out_dir.join("resolved_config.json"), json).map_err(|source| {
        CliError::Artifact { path: out_dir.join("resolved_config.json"), source }
    })?;
    println!("checkpoint: {} (config digest {digest})", ckpt_path.display());
    if let Some(last) = checkpoint.history.last() {
        println!(
            "final epoch {}: L={:.4} val_L={:.4} val_accuracy={:.3}",
            last.epoch, last.l, last.val_l, last.val_accuracy
        );
    }
    Ok(ckpt_path)
}

// ----- calibrate ----------------------------------------------------------------

pub fn cmd_calibrate(
    config: &ExperimentConfig,
    checkpoint_path: &Path,
    out_dir: &Path,
) -> Result<PathBuf, CliError> {
    log_resolved(config)?;
    ensure_dir(out_dir)?;
    let checkpoint = load_checkpoint(checkpoint_path)?;
    let windows = load_dataset(config)?;
    let partition = build_partition(&windows, config)?;
    check_consistency(&checkpoint, config, &partition)?;
    let prior = checkpoint.effective_prior()?;

    let known_scores: Vec<f64> = score_windows(
        &checkpoint.params,
        &checkpoint.model,
        &prior,
        &windows,
        &partition.train_idx,
        64,
    )?
    .into_iter()
    .map(|s| s.log_score)
    .collect();
    let calib_idx: Vec<usize> = (0..windows.len())
        .filter(|&i| windows[i].label == partition.calibration_subject)
        .collect();
    let unknown_scores: Vec<f64> = score_windows(
        &checkpoint.params,
        &checkpoint.model,
        &prior,
        &windows,
        &calib_idx,
        64,
    )?
    .into_iter()
    .map(|s| s.log_score)
    .collect();
    let tau_p = calibrate_threshold(&known_scores, &unknown_scores)?;

    let (_, digest) = config.resolved_json()?;
    let detector = DetectorFile {
        tau_p,
        checkpoint_digest: sha256_file(checkpoint_path)?,
        config_digest: digest,
        calibration_subject: partition.calibration_subject,
        known_subjects: partition.known.clone(),
    };
    let path = out_dir.join("detector.json");
    let text = serde_json::to_string_pretty(&detector)?;
    std::fs::write(&path, text)
        .map_err(|source| CliError::Artifact { path: path.clone(), source })?;
    println!(
        "tau_p = {tau_p:.6} (log-likelihood), calibration subject {} -> {}",
        partition.calibration_subject,
        path.display()
    );
    Ok(path)
}

fn load_detector(path: &Path, checkpoint_path: &Path) -> Result<DetectorFile, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| CliError::Artifact { path: path.to_path_buf(), source })?;
    let detector: DetectorFile = serde_json::from_str(&text).map_err(|e| {
        CliError::Invalid(format!("{} is not a detector file: {e}", path.display()))
    })?;
    let actual = sha256_file(checkpoint_path)?;
    if detector.checkpoint_digest != actual {
        return Err(CliError::Mismatch(format!(
            "detector {} was calibrated for checkpoint digest {} but {} has digest {}; \
             re-run `osgr calibrate`",
            path.display(),
            detector.checkpoint_digest,
            checkpoint_path.display(),
            actual
        )));
    }
    Ok(detector)
}

// ----- eval ---------------------------------------------------------------------

#[allow(clippy::too_many_arguments)]
pub fn cmd_eval(
    config: &ExperimentConfig,
    checkpoint_path: &Path,
    detector_path: &Path,
    k_values: &[usize],
    out_dir: &Path,
) -> Result<(), CliError> {
    log_resolved(config)?;
    ensure_dir(out_dir)?;
    let checkpoint = load_checkpoint(checkpoint_path)?;
    let detector = load_detector(detector_path, checkpoint_path)?;
    let windows = load_dataset(config)?;
    let partition = build_partition(&windows, config)?;
    check_consistency(&checkpoint, config, &partition)?;
    let prior = checkpoint.effective_prior()?;
    let modality = config.eval_modality()?;

    let closed = osgr::train::evaluate_known(
        &checkpoint.params,
        &checkpoint.model,
        &prior,
        &windows,
        &partition.test_idx,
        64,
    )?;

    let eval_unknown: Vec<u32> = partition
        .unknown
        .iter()
        .copied()
        .filter(|&s| s != partition.calibration_subject)
        .collect();
    let mut openset_idx: Vec<usize> = partition.test_idx.clone();
    openset_idx
        .extend((0..windows.len()).filter(|&i| eval_unknown.contains(&windows[i].label)));
    if let Some(m) = modality {
        openset_idx.retain(|&i| windows[i].modality == m);
    }

    let n_known = partition.known.len();
    let n_unknown = eval_unknown.len();
    let mut trials = Vec::with_capacity(k_values.len());
    for &k in k_values {
        let dc = DetectorConfig { tau_p: detector.tau_p, k };
        let confusion = evaluate_openset(
            &checkpoint.params,
            &checkpoint.model,
            &prior,
            &windows,
            &openset_idx,
            partition.calibration_subject,
            &dc,
        )?;
        write_confusion_csv(&out_dir.join(format!("confusion_k{k}.csv")), &confusion)?;
        let f1 = f1_breakdown(&confusion);
        println!(
            "k={k}: macro-F1 {:.4}, accuracy over blocks {:.4}",
            f1.macro_f1,
            confusion.accuracy()
        );
        trials.push(TrialReport {
            trial: 0,
            partition_seed: config.seed,
            n_known,
            n_unknown,
            openness: openness(n_known, n_unknown),
            k,
            tau_p: detector.tau_p,
            confusion,
            macro_f1: f1.macro_f1,
            per_class_f1: f1.per_class,
            empty_classes: f1.empty_classes,
            closed_set_accuracy: closed.accuracy,
        });
    }
    let (_, digest) = config.resolved_json()?;
    let report = AggregateReport {
        config_digest: digest,
        n_known,
        n_unknown,
        openness: openness(n_known, n_unknown),
        summaries: aggregate_by_k(&trials),
        trials,
    };
    write_report_json(&out_dir.join("report.json"), &report)?;
    write_plot_csv(&out_dir.join("plot.csv"), std::slice::from_ref(&report))?;
    println!(
        "closed-set accuracy {:.4}; report -> {}",
        closed.accuracy,
        out_dir.join("report.json").display()
    );
    Ok(())
}

// ----- detect -------------------------------------------------------------------

pub fn cmd_detect(
    config: &ExperimentConfig,
    checkpoint_path: &Path,
    detector_path: &Path,
    recording: &Path,
    k: usize,
) -> Result<(), CliError> {
    let checkpoint = load_checkpoint(checkpoint_path)?;
    let detector = load_detector(detector_path, checkpoint_path)?;
    if k == 0 {
        return Err(CliError::Invalid("k must be at least 1".into()));
    }
    let seg = load_recording(recording)?;
    let pre = PreprocessConfig {
        n_frames: checkpoint.model.n_frames,
        n_points: checkpoint.model.n_points,
        step: config.window_step(),
        center_velocity: config.data.center_velocity,
        seed: config.seed,
    };
    let (windows, _) = osgr::data::windows_from_segment(&seg, 0, &pre)?;
    if windows.len() < k {
        return Err(CliError::Invalid(format!(
            "recording yields {} windows but k = {k}; record longer or lower k",
            windows.len()
        )));
    }
    let prior = checkpoint.effective_prior()?;
    let dc = DetectorConfig { tau_p: detector.tau_p, k };
    let outcome =
        detect(&windows[..k], &checkpoint.params, &checkpoint.model, &prior, &dc)?;
    for (t, (s, p)) in outcome.scores.iter().zip(&outcome.predictions).enumerate() {
        let mark = if *s > detector.tau_p { ">" } else { "<=" };
        println!("window {}: prediction {p}, score {s:.4} {mark} tau_p", t + 1);
    }
    match outcome.verdict {
        osgr::detect::Verdict::Known(id) => println!("verdict: Known({id})"),
        osgr::detect::Verdict::Unknown => println!("verdict: Unknown"),
    }
    Ok(())
}

// ----- experiment ---------------------------------------------------------------

/// Multi-trial orchestration: load (or synthesize in memory) the dataset,
/// then run the full partition → train → calibrate → evaluate pipeline
/// `trials` times and aggregate.
pub fn cmd_experiment(
    config: &ExperimentConfig,
    out_dir: &Path,
    max_parallel: Option<usize>,
) -> Result<(), CliError> {
    log_resolved(config)?;
    ensure_dir(out_dir)?;
    let windows = if config.data.recordings_dir.is_dir() {
        load_dataset(config)?
    } else if let Some(synth) = &config.synth {
        log::info!(
            "{} not found; synthesizing {} subjects in memory",
            config.data.recordings_dir.display(),
            synth.subjects
        );
        let profiles = generate_profiles(synth.subjects, config.seed, synth.separability);
        let pre = PreprocessConfig {
            n_frames: config.data.n_frames,
            n_points: config.data.n_points,
            step: config.window_step(),
            center_velocity: config.data.center_velocity,
            seed: config.seed,
        };
        let mut windows = Vec::new();
        let mut segment = 0u32;
        for p in &profiles {
            for m in Modality::all() {
                let seg = simulate_recording(p, m, synth.duration_s, synth.frame_rate_hz);
                let (ws, _) = osgr::data::windows_from_segment(&seg, segment, &pre)?;
                windows.extend(ws);
                segment += 1;
            }
        }
        windows
    } else {
        return Err(CliError::Invalid(format!(
            "{} does not exist and the config has no [synth] section",
            config.data.recordings_dir.display()
        )));
    };

    let mut subjects: Vec<u32> = windows.iter().map(|w| w.label).collect();
    subjects.sort_unstable();
    subjects.dedup();
    let n_known = subjects
        .len()
        .checked_sub(config.eval.unknown_count + 1)
        .filter(|&n| n >= 1)
        .ok_or_else(|| {
            CliError::Invalid(format!(
                "{} subjects cannot host {} evaluated unknowns + 1 calibration subject",
                subjects.len(),
                config.eval.unknown_count
            ))
        })?;

    let plan = RunPlan {
        n_unknown: config.eval.unknown_count,
        n_trials: config.eval.trials,
        k_values: config.eval.k.clone(),
        model: config.model_config(n_known),
        train: config.train_config()?,
        seed: config.seed,
        modality: config.eval_modality()?,
        split: config.split_strategy(),
        max_parallel,
    };
    let report = run_trials(&windows, &plan)?;
    write_report_json(&out_dir.join("report.json"), &report)?;
    write_plot_csv(&out_dir.join("plot.csv"), std::slice::from_ref(&report))?;
    println!(
        "openness {:.2}% ({} known / {} unknown), {} trials",
        report.openness * 100.0,
        report.n_known,
        report.n_unknown,
        config.eval.trials
    );
    for s in &report.summaries {
        println!(
            "k={}: mean macro-F1 {:.4} +/- {:.4} over {} trials",
            s.k, s.mean_f1, s.dispersion, s.n_trials
        );
    }
    println!("report -> {}", out_dir.join("report.json").display());
    Ok(())
}

/// Apply command-line overrides on top of the loaded config file.
#[allow(clippy::too_many_arguments)]
pub fn apply_overrides(
    config: &mut ExperimentConfig,
    seed: Option<u64>,
    k: Option<Vec<usize>>,
    unknown_count: Option<usize>,
    trials: Option<usize>,
    split_by_chunk: bool,
    points: Option<usize>,
    modality: Option<String>,
    ablation: Option<String>,
) -> Result<(), CliError> {
    if let Some(s) = seed {
        config.seed = s;
    }
    if let Some(k) = k {
        config.eval.k = k;
    }
    if let Some(u) = unknown_count {
        config.eval.unknown_count = u;
    }
    if let Some(t) = trials {
        config.eval.trials = t;
    }
    if split_by_chunk {
        config.eval.split_by_chunk = true;
    }
    if let Some(p) = points {
        config.data.n_points = p;
    }
    if let Some(m) = modality {
        parse_modality(&m)?;
        config.eval.modality = Some(m);
    }
    if let Some(a) = ablation {
        config.model.ablation = Ablation::parse(&a)?;
    }
    config.validate()
}
