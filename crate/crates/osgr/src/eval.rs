//! Metrics and multi-trial experiment orchestration.
//!
//! Openness quantifies how much of the subject population is unseen at
//! training time; macro-F1 weights every class equally — crucial because
//! the single Unknown class absorbs all unknown subjects and would
//! otherwise dominate or vanish depending on the split.  `run_trials`
//! repeats the full partition → train → calibrate → evaluate pipeline over
//! independently seeded trials and reports per-k means with a σ/√n
//! dispersion, so a single lucky split cannot masquerade as a result.

use crate::data::{make_partition, DataError, Modality, WindowedSequence};
use crate::detect::{
    calibrate_threshold, evaluate_openset, score_windows, ConfusionMatrix, DetectError,
    DetectorConfig,
};
use crate::model::ModelConfig;
use crate::prior::{place_centroids, PriorError, DEFAULT_MIN_SEPARATION, DEFAULT_RADIUS};
use crate::seeds::subseed_indexed;
use crate::train::{
    evaluate_known, split_known, split_known_chunked, train, Checkpoint, SplitStrategy,
    TrainConfig, TrainError,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::Write;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid experiment plan: {0}")]
    BadPlan(String),
    #[error("trial {index}: {source}")]
    Trial {
        index: usize,
        #[source]
        source: Box<EvalError>,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Detect(#[from] DetectError),
    #[error(transparent)]
    Prior(#[from] PriorError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("report encoding error: {0}")]
    Encode(#[from] serde_json::Error),
}

/// Openness = 1 − √(2·n_known / (2·n_known + n_unknown)): 0 for a closed
/// set, approaching 1 as unknowns dominate.  `n_unknown` counts the
/// subjects actually evaluated as unknown — the calibration subject is
/// spent on choosing τ_p and is not part of the recognition problem.
pub fn openness(n_known: usize, n_unknown: usize) -> f64 {
    assert!(n_known >= 1, "openness needs at least one known subject");
    let k = 2.0 * n_known as f64;
    1.0 - (k / (k + n_unknown as f64)).sqrt()
}

/// Per-class F1 scores and their equal-weight mean over the known classes
/// plus the trailing Unknown class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct F1Breakdown {
    pub per_class: Vec<f64>,
    pub macro_f1: f64,
    /// Classes with no true or predicted samples at all; they contribute
    /// an F1 of 0 by convention, which drags the mean down — flagged so
    /// reports can distinguish "failed" from "never exercised".
    pub empty_classes: Vec<usize>,
}

pub fn f1_breakdown(confusion: &ConfusionMatrix) -> F1Breakdown {
    let n = confusion.n_classes();
    let mut per_class = Vec::with_capacity(n);
    let mut empty_classes = Vec::new();
    for i in 0..n {
        let tp = confusion.counts[i][i];
        let row: usize = confusion.counts[i].iter().sum();
        let col: usize = confusion.counts.iter().map(|r| r[i]).sum();
        let fn_i = row - tp;
        let fp_i = col - tp;
        if tp == 0 && fp_i == 0 && fn_i == 0 {
            empty_classes.push(i);
            per_class.push(0.0);
        } else {
            per_class.push(2.0 * tp as f64 / (2.0 * tp as f64 + fp_i as f64 + fn_i as f64));
        }
    }
    let macro_f1 = per_class.iter().sum::<f64>() / n as f64;
    F1Breakdown { per_class, macro_f1, empty_classes }
}

/// σ/√n over trial values: sample standard deviation (n−1 denominator)
/// divided by √n.  A single value has no spread and reports 0.
pub fn dispersion(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    var.sqrt() / (n as f64).sqrt()
}

/// Everything one trial produced at one evidence length k.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialReport {
    pub trial: usize,
    pub partition_seed: u64,
    pub n_known: usize,
    /// Evaluated unknown subjects (calibration subject excluded).
    pub n_unknown: usize,
    pub openness: f64,
    pub k: usize,
    pub tau_p: f64,
    pub confusion: ConfusionMatrix,
    pub macro_f1: f64,
    pub per_class_f1: Vec<f64>,
    pub empty_classes: Vec<usize>,
    /// Closed-set classifier accuracy on the known test split; independent
    /// of k, repeated on each row for self-contained reports.
    pub closed_set_accuracy: f64,
}

/// Mean macro-F1 and dispersion across trials at one evidence length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KSummary {
    pub k: usize,
    pub mean_f1: f64,
    pub dispersion: f64,
    pub n_trials: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub config_digest: String,
    pub n_known: usize,
    pub n_unknown: usize,
    pub openness: f64,
    pub trials: Vec<TrialReport>,
    pub summaries: Vec<KSummary>,
}

/// Group per-trial rows by k (ascending) and fold means/dispersions in
/// trial order.  Pure so reports can be re-aggregated and checked.
pub fn aggregate_by_k(trials: &[TrialReport]) -> Vec<KSummary> {
    let mut ks: Vec<usize> = trials.iter().map(|t| t.k).collect();
    ks.sort_unstable();
    ks.dedup();
    ks.into_iter()
        .map(|k| {
            let values: Vec<f64> =
                trials.iter().filter(|t| t.k == k).map(|t| t.macro_f1).collect();
            KSummary {
                k,
                mean_f1: values.iter().sum::<f64>() / values.len() as f64,
                dispersion: dispersion(&values),
                n_trials: values.len(),
            }
        })
        .collect()
}

/// SHA-256 hex digest of a serialized configuration, stamped into every
/// report so results can be traced back to exact settings.
pub fn config_digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// One full experiment: how many trials, which evidence lengths, and the
/// model/training settings shared by every trial.
#[derive(Debug, Clone, Serialize)]
pub struct RunPlan {
    /// Evaluated unknown subjects per trial; one extra subject is always
    /// drawn for calibration, so the dataset needs at least
    /// `n_unknown + 2` subjects.
    pub n_unknown: usize,
    pub n_trials: usize,
    pub k_values: Vec<usize>,
    /// Template configuration; `n_classes` is overridden per trial to the
    /// partition's known-subject count.
    pub model: ModelConfig,
    /// Template training settings; the seed is overridden per trial.
    pub train: TrainConfig,
    pub seed: u64,
    /// Restrict evaluation (never training) to one walking modality.
    pub modality: Option<Modality>,
    pub split: SplitStrategy,
    /// Upper bound on concurrent trial threads; `None` means one thread
    /// per trial.  Purely a scheduling knob — results are identical either
    /// way — so it stays out of the config digest.
    #[serde(skip)]
    pub max_parallel: Option<usize>,
}

impl RunPlan {
    fn validate(&self, n_subjects: usize) -> Result<(), EvalError> {
        if self.n_trials < 1 {
            return Err(EvalError::BadPlan("n_trials must be at least 1".into()));
        }
        if self.k_values.is_empty() || self.k_values.contains(&0) {
            return Err(EvalError::BadPlan("k values must be positive and non-empty".into()));
        }
        if n_subjects < self.n_unknown + 2 {
            return Err(EvalError::BadPlan(format!(
                "{} evaluated unknowns + 1 calibration subject need at least {} subjects, \
                 dataset has {}",
                self.n_unknown,
                self.n_unknown + 2,
                n_subjects
            )));
        }
        Ok(())
    }
}

/// Artifacts of one trial worth keeping beyond its report rows.
pub struct TrialArtifacts {
    pub checkpoint: Checkpoint,
    pub tau_p: f64,
    pub reports: Vec<TrialReport>,
}

fn subject_ids(windows: &[WindowedSequence]) -> Vec<u32> {
    let mut ids: Vec<u32> = windows.iter().map(|w| w.label).collect();
    ids.sort_unstable();
    ids.dedup();
    ids
}

/// Run one trial end to end: partition subjects, train on the knowns,
/// calibrate τ_p on the held-out calibration subject, then evaluate the
/// detector at every requested k.  One model serves all k values — the
/// evidence length only affects the decision stage.
pub fn run_single_trial(
    windows: &[WindowedSequence],
    plan: &RunPlan,
    trial: usize,
) -> Result<TrialArtifacts, EvalError> {
    let subjects = subject_ids(windows);
    let trial_seed = subseed_indexed(plan.seed, "trial", trial as u64);
    // +1: the calibration subject is drawn from the unknown pool.
    let mut partition = make_partition(&subjects, plan.n_unknown + 1, trial_seed)?;
    let (train_idx, val_idx, test_idx) = match plan.split {
        SplitStrategy::Random => {
            split_known(windows, &partition.known, (0.8, 0.1, 0.1), trial_seed)?
        }
        SplitStrategy::ChunkByTime => {
            split_known_chunked(windows, &partition.known, (0.8, 0.1, 0.1))?
        }
    };
    partition.train_idx = train_idx;
    partition.val_idx = val_idx;
    partition.test_idx = test_idx;

    let mut model = plan.model.clone();
    model.n_classes = partition.known.len();
    let mut prior = place_centroids(
        partition.known.len(),
        model.latent_dim,
        DEFAULT_RADIUS,
        DEFAULT_MIN_SEPARATION,
        trial_seed,
    )?;
    prior.assign_subjects(&partition.known)?;

    let mut train_cfg = plan.train.clone();
    train_cfg.seed = trial_seed;
    let checkpoint = train(windows, &partition, &prior, &model, &train_cfg)?;
    let scoring_prior = checkpoint.effective_prior()?;

    // Calibration positives come from the known TRAIN split so the known
    // test windows stay untouched until evaluation; negatives are every
    // window of the calibration subject.
    let known_scores: Vec<f64> = score_windows(
        &checkpoint.params,
        &model,
        &scoring_prior,
        windows,
        &partition.train_idx,
        64,
    )?
    .into_iter()
    .map(|s| s.log_score)
    .collect();
    let calib_idx: Vec<usize> = (0..windows.len())
        .filter(|&i| windows[i].label == partition.calibration_subject)
        .collect();
    let unknown_scores: Vec<f64> =
        score_windows(&checkpoint.params, &model, &scoring_prior, windows, &calib_idx, 64)?
            .into_iter()
            .map(|s| s.log_score)
            .collect();
    let tau_p = calibrate_threshold(&known_scores, &unknown_scores)?;

    let closed = evaluate_known(
        &checkpoint.params,
        &model,
        &scoring_prior,
        windows,
        &partition.test_idx,
        64,
    )?;

    // Open-set test pool: known test windows plus every window of the
    // evaluated unknown subjects, optionally filtered to one modality.
    // Training always sees all modalities; only evaluation narrows.
    let eval_unknown: Vec<u32> = partition
        .unknown
        .iter()
        .copied()
        .filter(|&s| s != partition.calibration_subject)
        .collect();
    let mut openset_idx: Vec<usize> = partition.test_idx.clone();
    openset_idx
        .extend((0..windows.len()).filter(|&i| eval_unknown.contains(&windows[i].label)));
    if let Some(m) = plan.modality {
        openset_idx.retain(|&i| windows[i].modality == m);
    }

    let n_known = partition.known.len();
    let n_unknown = eval_unknown.len();
    let mut reports = Vec::with_capacity(plan.k_values.len());
    for &k in &plan.k_values {
        let detector = DetectorConfig { tau_p, k };
        let confusion = evaluate_openset(
            &checkpoint.params,
            &model,
            &scoring_prior,
            windows,
            &openset_idx,
            partition.calibration_subject,
            &detector,
        )?;
        let f1 = f1_breakdown(&confusion);
        reports.push(TrialReport {
            trial,
            partition_seed: trial_seed,
            n_known,
            n_unknown,
            openness: openness(n_known, n_unknown),
            k,
            tau_p,
            confusion,
            macro_f1: f1.macro_f1,
            per_class_f1: f1.per_class,
            empty_classes: f1.empty_classes,
            closed_set_accuracy: closed.accuracy,
        });
    }
    Ok(TrialArtifacts { checkpoint, tau_p, reports })
}

/// Run every trial and aggregate.  Trials are independent — each gets its
/// own derived seed — so they run on separate threads; results are folded
/// in trial order, keeping the aggregate deterministic regardless of
/// scheduling.
pub fn run_trials(windows: &[WindowedSequence], plan: &RunPlan) -> Result<AggregateReport, EvalError> {
    plan.validate(subject_ids(windows).len())?;
    let width = plan.max_parallel.unwrap_or(plan.n_trials).max(1);
    let mut results: Vec<Result<TrialArtifacts, EvalError>> =
        Vec::with_capacity(plan.n_trials);
    for wave in (0..plan.n_trials).collect::<Vec<_>>().chunks(width) {
        let batch: Vec<Result<TrialArtifacts, EvalError>> = std::thread::scope(|scope| {
            let handles: Vec<_> = wave
                .iter()
                .map(|&t| scope.spawn(move || run_single_trial(windows, plan, t)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("trial thread panicked"))
                .collect()
        });
        results.extend(batch);
    }
    let mut trials = Vec::new();
    for (t, result) in results.into_iter().enumerate() {
        let artifacts =
            result.map_err(|e| EvalError::Trial { index: t, source: Box::new(e) })?;
        trials.extend(artifacts.reports);
    }
    let summaries = aggregate_by_k(&trials);
    let digest = config_digest(&serde_json::to_vec(plan)?);
    let (n_known, n_unknown) = (trials[0].n_known, trials[0].n_unknown);
    Ok(AggregateReport {
        config_digest: digest,
        n_known,
        n_unknown,
        openness: openness(n_known, n_unknown),
        trials,
        summaries,
    })
}

pub fn write_report_json(path: &Path, report: &AggregateReport) -> Result<(), EvalError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer_pretty(&mut f, report)?;
    f.write_all(b"\n")?;
    Ok(())
}

/// Plot-ready CSV: one row per (openness, k) pair, mirroring the axes of
/// the F1-vs-openness figures.
pub fn write_plot_csv(path: &Path, reports: &[AggregateReport]) -> Result<(), EvalError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "openness,k,mean_f1,dispersion")?;
    for r in reports {
        for s in &r.summaries {
            writeln!(f, "{},{},{},{}", r.openness, s.k, s.mean_f1, s.dispersion)?;
        }
    }
    Ok(())
}

/// Confusion matrix as CSV with named rows/columns; Unknown is last.
pub fn write_confusion_csv(path: &Path, m: &ConfusionMatrix) -> Result<(), EvalError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let mut header = String::from("true\\predicted");
    for s in &m.subjects {
        header.push_str(&format!(",{s}"));
    }
    header.push_str(",Unknown");
    writeln!(f, "{header}")?;
    for (i, row) in m.counts.iter().enumerate() {
        let name = if i < m.subjects.len() {
            m.subjects[i].to_string()
        } else {
            "Unknown".to_string()
        };
        let cells: Vec<String> = row.iter().map(|c| c.to_string()).collect();
        writeln!(f, "{name},{}", cells.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::PreprocessConfig;
    use crate::synth::{generate_profiles, simulate_recording};
    use crate::train::AdversaryMode;

    #[test]
    fn openness_matches_the_published_levels() {
        // Published percentages for a 10-subject pool with one calibration
        // subject withheld; tolerance 0.005 percentage points.
        for (n_known, n_unknown, pct) in
            [(8, 1, 2.99), (6, 3, 10.56), (4, 5, 21.55), (2, 7, 39.70)]
        {
            let got = openness(n_known, n_unknown) * 100.0;
            assert!(
                (got - pct).abs() <= 0.005,
                "openness({n_known},{n_unknown}) = {got:.4}%, published {pct}%"
            );
        }
    }

    #[test]
    fn openness_boundaries_and_monotonicity() {
        for n in 1..12 {
            assert_eq!(openness(n, 0), 0.0);
        }
        for n_known in 1..10usize {
            for n_unknown in 0..10usize {
                let here = openness(n_known, n_unknown);
                assert!((0.0..1.0).contains(&here));
                assert!(openness(n_known, n_unknown + 1) > here);
                assert!(openness(n_known + 1, n_unknown) <= here);
                if n_unknown > 0 {
                    assert!(openness(n_known + 1, n_unknown) < here);
                }
            }
        }
    }

    fn matrix(subjects: Vec<u32>, counts: Vec<Vec<usize>>) -> ConfusionMatrix {
        ConfusionMatrix { subjects, counts }
    }

    #[test]
    fn macro_f1_hand_computed_examples() {
        // Perfect diagonal.
        let m = matrix(vec![1, 2], vec![vec![5, 0, 0], vec![0, 5, 0], vec![0, 0, 5]]);
        let b = f1_breakdown(&m);
        assert_eq!(b.macro_f1, 1.0);
        assert!(b.empty_classes.is_empty());

        // Known classes perfect, all true-Unknown absorbed by class 1:
        // F1 = (2/3 + 1 + 0) / 3.
        let m = matrix(vec![1, 2], vec![vec![10, 0, 0], vec![0, 10, 0], vec![10, 0, 0]]);
        let b = f1_breakdown(&m);
        assert!((b.per_class[0] - 2.0 / 3.0).abs() <= 1e-12);
        assert_eq!(b.per_class[1], 1.0);
        assert_eq!(b.per_class[2], 0.0);
        assert!((b.macro_f1 - (2.0 / 3.0 + 1.0) / 3.0).abs() <= 1e-12);
        assert!((b.macro_f1 - 0.5556).abs() <= 5e-5);

        // Everything predicted Unknown: F1_unknown = 20/40, rest 0.
        let m = matrix(vec![1, 2], vec![vec![0, 0, 10], vec![0, 0, 10], vec![0, 0, 10]]);
        let b = f1_breakdown(&m);
        assert_eq!(b.per_class, vec![0.0, 0.0, 0.5]);
        assert!((b.macro_f1 - 1.0 / 6.0).abs() <= 1e-12);
        assert!((b.macro_f1 - 0.1667).abs() <= 5e-5);
        assert!(b.empty_classes.is_empty(), "those classes have false negatives");
    }

    #[test]
    fn macro_f1_flags_untouched_classes() {
        // Class 2 never appears as truth or prediction.
        let m = matrix(vec![1, 2], vec![vec![4, 0, 1], vec![0, 0, 0], vec![2, 0, 3]]);
        let b = f1_breakdown(&m);
        assert_eq!(b.empty_classes, vec![1]);
        assert_eq!(b.per_class[1], 0.0);
    }

    #[test]
    fn macro_f1_is_invariant_under_joint_class_permutation_and_count_scaling() {
        let m = matrix(
            vec![1, 2, 3],
            vec![
                vec![8, 1, 0, 1],
                vec![2, 6, 1, 1],
                vec![0, 0, 9, 1],
                vec![1, 2, 1, 6],
            ],
        );
        let base = f1_breakdown(&m);

        // Swap known classes 0 and 2 in both rows and columns (Unknown,
        // the last class, stays put).
        let perm = [2usize, 1, 0, 3];
        let permuted = matrix(
            vec![3, 2, 1],
            (0..4)
                .map(|i| (0..4).map(|j| m.counts[perm[i]][perm[j]]).collect())
                .collect(),
        );
        let p = f1_breakdown(&permuted);
        assert!((p.macro_f1 - base.macro_f1).abs() <= 1e-15);

        // Scaling every count preserves all ratios.
        let scaled = matrix(
            vec![1, 2, 3],
            m.counts.iter().map(|r| r.iter().map(|&c| c * 7).collect()).collect(),
        );
        let s = f1_breakdown(&scaled);
        assert_eq!(s.per_class, base.per_class);
    }

    #[test]
    fn dispersion_hand_values() {
        assert_eq!(dispersion(&[0.7]), 0.0);
        assert_eq!(dispersion(&[]), 0.0);
        // (0.6, 0.8): sample std 0.1·√2, over √2 → exactly 0.1.
        assert!((dispersion(&[0.6, 0.8]) - 0.1).abs() <= 1e-12);
        assert_eq!(dispersion(&[0.5, 0.5, 0.5]), 0.0);
    }

    fn fake_trial(trial: usize, k: usize, macro_f1: f64) -> TrialReport {
        let confusion = matrix(vec![1], vec![vec![1, 0], vec![0, 1]]);
        TrialReport {
            trial,
            partition_seed: trial as u64,
            n_known: 1,
            n_unknown: 1,
            openness: openness(1, 1),
            k,
            tau_p: 0.0,
            confusion,
            macro_f1,
            per_class_f1: vec![macro_f1, macro_f1],
            empty_classes: vec![],
            closed_set_accuracy: 1.0,
        }
    }

    #[test]
    fn aggregation_reproduces_hand_computed_means_and_recomputes_from_reports() {
        // Frozen per-trial F1 lists: constant at k=1, (0.6, 0.8) at k=2.
        let trials = vec![
            fake_trial(0, 1, 0.4),
            fake_trial(1, 1, 0.4),
            fake_trial(0, 2, 0.6),
            fake_trial(1, 2, 0.8),
        ];
        let summaries = aggregate_by_k(&trials);
        assert_eq!(summaries.len(), 2);
        assert_eq!(summaries[0].k, 1);
        assert_eq!(summaries[0].mean_f1, 0.4);
        assert_eq!(summaries[0].dispersion, 0.0);
        assert_eq!(summaries[1].k, 2);
        assert!((summaries[1].mean_f1 - 0.7).abs() <= 1e-12);
        assert!((summaries[1].dispersion - 0.1).abs() <= 1e-12);

        // Self-consistency: re-aggregating the emitted rows is a no-op.
        assert_eq!(aggregate_by_k(&trials), summaries);
    }

    #[test]
    fn config_digest_is_stable_and_content_sensitive() {
        let a = config_digest(b"alpha");
        assert_eq!(a, config_digest(b"alpha"));
        assert_ne!(a, config_digest(b"beta"));
        assert_eq!(a.len(), 64);
    }

    fn synth_dataset(
        n_subjects: usize,
        duration_s: f64,
        cfg: &ModelConfig,
        seed: u64,
    ) -> Vec<WindowedSequence> {
        let profiles = generate_profiles(n_subjects, seed, 1.0);
        let pre = PreprocessConfig {
            n_frames: cfg.n_frames,
            n_points: cfg.n_points,
            step: cfg.n_frames,
            center_velocity: false,
            seed,
        };
        let mut out = Vec::new();
        for (si, p) in profiles.iter().enumerate() {
            let rec =
                simulate_recording(p, Modality::FreeWalk, duration_s, 10.0);
            let (ws, _) =
                crate::data::windows_from_segment(&rec, si as u32, &pre).unwrap();
            out.extend(ws);
        }
        out
    }

    #[test]
    fn full_trial_pipeline_produces_a_consistent_report() {
        let model = ModelConfig::desk_scale(0.125, 2, 6, 8);
        let windows = synth_dataset(4, 6.0, &model, 21);
        let plan = RunPlan {
            n_unknown: 1,
            n_trials: 2,
            k_values: vec![2, 1],
            model,
            train: TrainConfig {
                epochs: 2,
                batch_size: 8,
                adversary: AdversaryMode::Off,
                ..TrainConfig::default()
            },
            seed: 21,
            modality: None,
            split: SplitStrategy::Random,
            max_parallel: None,
        };
        let report = run_trials(&windows, &plan).unwrap();

        // 4 subjects → 2 known, 1 evaluated unknown, 1 calibration.
        assert_eq!(report.n_known, 2);
        assert_eq!(report.n_unknown, 1);
        assert!((report.openness - openness(2, 1)).abs() <= 1e-15);
        assert_eq!(report.trials.len(), 4); // 2 trials × 2 k values
        assert_eq!(report.summaries.len(), 2);
        assert_eq!(report.summaries[0].k, 1); // ascending regardless of plan order
        assert_eq!(report.summaries[1].k, 2);
        assert_eq!(report.config_digest.len(), 64);

        for t in &report.trials {
            assert!((0.0..=1.0).contains(&t.macro_f1));
            assert!((0.0..=1.0).contains(&t.closed_set_accuracy));
            assert_eq!(t.per_class_f1.len(), t.n_known + 1);
            assert_eq!(t.confusion.subjects.len(), t.n_known);
            let again = f1_breakdown(&t.confusion);
            assert_eq!(again.macro_f1, t.macro_f1);
            assert_eq!(again.per_class, t.per_class_f1);
        }
        // Trials with different partition seeds exist.
        assert_ne!(report.trials[0].partition_seed, report.trials[2].partition_seed);

        // Determinism: the whole report reproduces bit-for-bit.
        let again = run_trials(&windows, &plan).unwrap();
        assert_eq!(serde_json::to_string(&again).unwrap(), serde_json::to_string(&report).unwrap());

        // Emission round-trips.
        let dir = tempfile::tempdir().unwrap();
        let json_path = dir.path().join("report.json");
        write_report_json(&json_path, &report).unwrap();
        let back: AggregateReport =
            serde_json::from_reader(std::fs::File::open(&json_path).unwrap()).unwrap();
        assert_eq!(back, report);

        let csv_path = dir.path().join("plot.csv");
        write_plot_csv(&csv_path, std::slice::from_ref(&report)).unwrap();
        let text = std::fs::read_to_string(&csv_path).unwrap();
        assert!(text.starts_with("openness,k,mean_f1,dispersion\n"));
        assert_eq!(text.lines().count(), 1 + report.summaries.len());

        let conf_path = dir.path().join("confusion.csv");
        write_confusion_csv(&conf_path, &report.trials[0].confusion).unwrap();
        let text = std::fs::read_to_string(&conf_path).unwrap();
        assert!(text.lines().count() == report.trials[0].confusion.n_classes() + 1);
        assert!(text.contains("Unknown"));
    }

    #[test]
    fn plans_are_validated_before_any_training() {
        let model = ModelConfig::desk_scale(0.125, 2, 6, 8);
        let windows = synth_dataset(3, 3.0, &model, 22);
        let base = RunPlan {
            n_unknown: 1,
            n_trials: 1,
            k_values: vec![1],
            model,
            train: TrainConfig::default(),
            seed: 22,
            modality: None,
            split: SplitStrategy::Random,
            max_parallel: None,
        };
        // 3 subjects cannot host 2 evaluated unknowns + calibration.
        let plan = RunPlan { n_unknown: 2, ..base.clone() };
        assert!(matches!(run_trials(&windows, &plan), Err(EvalError::BadPlan(_))));
        let plan = RunPlan { n_trials: 0, ..base.clone() };
        assert!(matches!(run_trials(&windows, &plan), Err(EvalError::BadPlan(_))));
        let plan = RunPlan { k_values: vec![], ..base };
        assert!(matches!(run_trials(&windows, &plan), Err(EvalError::BadPlan(_))));
    }
}
