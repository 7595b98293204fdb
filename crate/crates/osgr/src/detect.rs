//! k-sample novelty detection over the latent mixture prior.
//!
//! A trained encoder maps each input window to a feature vector whose
//! likelihood under the fixed Gaussian-mixture prior measures how "known"
//! the window looks.  Detection accumulates `k` consecutive windows: each
//! contributes a closed-set prediction and a score, and the block verdict
//! is the modal prediction if strictly more than half the scores clear the
//! threshold τ_p, otherwise Unknown.
//!
//! All scores here live in log-likelihood space.  The decision rule only
//! ever compares scores against the threshold, so thresholding log scores
//! against a log-space τ_p is exactly equivalent to thresholding raw
//! likelihoods (strictly monotone transforms preserve every comparison).

use crate::data::WindowedSequence;
use crate::data::FEATURES;
use crate::model::{batch_matrix, Forward, ModelConfig, ModelError, ParamStore};
use crate::tensor::{BnMode, Tape};
use crate::prior::{CentroidPrior, PriorError};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DetectError {
    #[error("detector expects k = {expected} windows, got {got}")]
    KMismatch { expected: usize, got: usize },
    #[error("invalid detector configuration: {0}")]
    BadConfig(String),
    #[error("cannot calibrate: {0}")]
    Degenerate(String),
    #[error("evaluation set is empty")]
    EmptyEvaluation,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Prior(#[from] PriorError),
}

/// Detection hyper-parameters: the calibrated score threshold (stored as a
/// log-likelihood) and the evidence length `k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub tau_p: f64,
    pub k: usize,
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<(), DetectError> {
        if self.k == 0 {
            return Err(DetectError::BadConfig("k must be at least 1".into()));
        }
        if !self.tau_p.is_finite() {
            return Err(DetectError::BadConfig("threshold must be finite".into()));
        }
        Ok(())
    }
}

/// One window's contribution to a detection decision.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredStep {
    /// Closed-set prediction: the subject id behind the argmax class.
    pub prediction: u32,
    /// log p(z) under the mixture prior.
    pub log_score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Known(u32),
    Unknown,
}

/// The full evidence trail behind one verdict, kept for reporting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionOutcome {
    pub verdict: Verdict,
    pub scores: Vec<f64>,
    pub predictions: Vec<u32>,
}

/// The decision rule on already-scored evidence.
///
/// Strictly more than half the scores must exceed τ_p (strict on both
/// comparisons: `s > τ_p` and `count > k/2`, so an even split stays
/// Unknown).  The returned identity is the most frequent prediction over
/// all `k` steps — not just the above-threshold ones.  Ties on frequency
/// go to the candidate with the highest summed score; an exact tie there
/// falls back to the smallest subject id so the rule stays deterministic.
pub fn decide(steps: &[ScoredStep], tau_p: f64) -> Verdict {
    let k = steps.len();
    let above = steps.iter().filter(|s| s.log_score > tau_p).count();
    if 2 * above <= k {
        return Verdict::Unknown;
    }
    let mut tally: BTreeMap<u32, (usize, f64)> = BTreeMap::new();
    for s in steps {
        let e = tally.entry(s.prediction).or_insert((0, 0.0));
        e.0 += 1;
        e.1 += s.log_score;
    }
    // BTreeMap iterates in ascending id order, and only strict improvements
    // replace the running best, so equal (count, sum) keeps the smaller id.
    let mut best: Option<(u32, usize, f64)> = None;
    for (&id, &(count, sum)) in &tally {
        let wins = match best {
            None => true,
            Some((_, bc, bs)) => count > bc || (count == bc && sum > bs),
        };
        if wins {
            best = Some((id, count, sum));
        }
    }
    Verdict::Known(best.expect("decide called with at least one step").0)
}

/// Score a batch of windows: closed-set prediction and log-likelihood per
/// window, in `idx` order.  This is the shared inference path behind
/// `detect`, calibration, and open-set evaluation.
pub fn score_windows(
    store: &ParamStore,
    cfg: &ModelConfig,
    prior: &CentroidPrior,
    windows: &[WindowedSequence],
    idx: &[usize],
    batch_size: usize,
) -> Result<Vec<ScoredStep>, DetectError> {
    let mut out = Vec::with_capacity(idx.len());
    for chunk in idx.chunks(batch_size.max(1)) {
        let batch: Vec<&WindowedSequence> = chunk.iter().map(|&i| &windows[i]).collect();
        let b = batch.len();
        let x_data = batch_matrix(&batch, cfg)?;
        let mut tape = Tape::new();
        let x = tape.constant(x_data, &[b * cfg.n_frames * cfg.n_points, FEATURES]);
        let (z_data, probs_data) = {
            let mut fwd = Forward::new(&mut tape, store, cfg, BnMode::Eval);
            let z = fwd.encode(x, b)?;
            let probs = fwd.classify(z)?;
            (fwd.tape.data(z).to_vec(), fwd.tape.data(probs).to_vec())
        };
        for r in 0..b {
            let z = &z_data[r * cfg.latent_dim..(r + 1) * cfg.latent_dim];
            let row = &probs_data[r * cfg.n_classes..(r + 1) * cfg.n_classes];
            let class = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("softmax output is finite"))
                .map(|(i, _)| i)
                .expect("classifier has at least one class");
            let prediction = prior
                .subject_for(class)
                .ok_or(PriorError::UnknownSubject(class as u32))?;
            out.push(ScoredStep { prediction, log_score: prior.log_mixture_likelihood(z) });
        }
    }
    Ok(out)
}

/// Run the detection procedure on one block of `k` consecutive windows.
pub fn detect(
    windows: &[WindowedSequence],
    store: &ParamStore,
    model: &ModelConfig,
    prior: &CentroidPrior,
    cfg: &DetectorConfig,
) -> Result<DetectionOutcome, DetectError> {
    cfg.validate()?;
    if windows.len() != cfg.k {
        return Err(DetectError::KMismatch { expected: cfg.k, got: windows.len() });
    }
    let idx: Vec<usize> = (0..windows.len()).collect();
    let steps = score_windows(store, model, prior, windows, &idx, cfg.k)?;
    Ok(DetectionOutcome {
        verdict: decide(&steps, cfg.tau_p),
        scores: steps.iter().map(|s| s.log_score).collect(),
        predictions: steps.iter().map(|s| s.prediction).collect(),
    })
}

/// Pick τ_p from calibration scores: log-likelihoods of known-subject
/// windows (positives) and of the single held-out calibration subject's
/// windows (negatives).
///
/// Candidates are the midpoints between adjacent distinct values of the
/// merged sorted score list; the winner maximizes Youden's J = TPR − FPR,
/// where a positive is a known window scoring strictly above the
/// threshold.  Ties go to the larger threshold (more conservative toward
/// Unknown).  Errors when every candidate has J ≤ 0 — identical or
/// inverted distributions give no usable operating point — or when the
/// merged scores hold a single distinct value.
pub fn calibrate_threshold(
    known_scores: &[f64],
    unknown_scores: &[f64],
) -> Result<f64, DetectError> {
    if known_scores.is_empty() || unknown_scores.is_empty() {
        return Err(DetectError::Degenerate("both score sets must be non-empty".into()));
    }
    if known_scores.iter().chain(unknown_scores).any(|s| !s.is_finite()) {
        return Err(DetectError::Degenerate("scores must be finite".into()));
    }
    // Merge with provenance, sort ascending; walking the merged list keeps
    // running counts of positives/negatives at or below each candidate.
    let mut merged: Vec<(f64, bool)> = known_scores
        .iter()
        .map(|&s| (s, true))
        .chain(unknown_scores.iter().map(|&s| (s, false)))
        .collect();
    merged.sort_unstable_by(|a, b| a.0.partial_cmp(&b.0).expect("finite scores"));
    let n_pos = known_scores.len() as f64;
    let n_neg = unknown_scores.len() as f64;

    let mut best: Option<(f64, f64)> = None; // (J, τ)
    let mut pos_below = 0usize;
    let mut neg_below = 0usize;
    let mut i = 0;
    while i < merged.len() {
        // Consume the run of equal values so candidates sit strictly
        // between distinct scores.
        let v = merged[i].0;
        while i < merged.len() && merged[i].0 == v {
            if merged[i].1 {
                pos_below += 1;
            } else {
                neg_below += 1;
            }
            i += 1;
        }
        if i == merged.len() {
            break; // no value above v: v is the maximum, no midpoint follows
        }
        let tau = 0.5 * (v + merged[i].0);
        let tpr = (n_pos - pos_below as f64) / n_pos;
        let fpr = (n_neg - neg_below as f64) / n_neg;
        let j = tpr - fpr;
        let wins = match best {
            None => true,
            Some((bj, bt)) => j > bj || (j == bj && tau > bt),
        };
        if wins {
            best = Some((j, tau));
        }
    }
    match best {
        None => Err(DetectError::Degenerate(
            "all calibration scores are identical; distributions are indistinguishable".into(),
        )),
        Some((j, _)) if j <= 0.0 => Err(DetectError::Degenerate(format!(
            "no threshold separates known from unknown scores (best J = {j})"
        ))),
        Some((_, tau)) => Ok(tau),
    }
}

/// Confusion matrix over the known subjects plus one trailing Unknown
/// class.  `counts[true][predicted]`, with `subjects[i]` naming class `i`
/// and index `subjects.len()` standing for Unknown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub subjects: Vec<u32>,
    pub counts: Vec<Vec<usize>>,
}

impl ConfusionMatrix {
    pub fn new(subjects: Vec<u32>) -> Self {
        let n = subjects.len() + 1;
        ConfusionMatrix { subjects, counts: vec![vec![0; n]; n] }
    }

    /// Number of classes including Unknown.
    pub fn n_classes(&self) -> usize {
        self.subjects.len() + 1
    }

    pub fn total(&self) -> usize {
        self.counts.iter().map(|r| r.iter().sum::<usize>()).sum()
    }

    pub fn accuracy(&self) -> f64 {
        let correct: usize = (0..self.n_classes()).map(|i| self.counts[i][i]).sum();
        correct as f64 / self.total() as f64
    }

    fn class_of(&self, verdict: Verdict) -> usize {
        match verdict {
            Verdict::Known(id) => self
                .subjects
                .iter()
                .position(|&s| s == id)
                .expect("verdict names a subject outside the known set"),
            Verdict::Unknown => self.subjects.len(),
        }
    }

    pub fn record(&mut self, truth: Verdict, predicted: Verdict) {
        let t = self.class_of(truth);
        let p = self.class_of(predicted);
        self.counts[t][p] += 1;
    }
}

/// The pure half of open-set evaluation: given each subject's time-ordered
/// scored windows, cut them into consecutive non-overlapping blocks of
/// `k`, decide each block, and tally the confusion matrix.  Windows left
/// over at a subject's tail (fewer than `k`) are dropped.  Subjects not in
/// `known_order` count as true-Unknown.
pub fn confusion_from_scored(
    per_subject: &[(u32, Vec<ScoredStep>)],
    known_order: &[u32],
    cfg: &DetectorConfig,
) -> Result<ConfusionMatrix, DetectError> {
    cfg.validate()?;
    let mut matrix = ConfusionMatrix::new(known_order.to_vec());
    let mut blocks = 0usize;
    for (subject, steps) in per_subject {
        let truth = if known_order.contains(subject) {
            Verdict::Known(*subject)
        } else {
            Verdict::Unknown
        };
        for block in steps.chunks_exact(cfg.k) {
            matrix.record(truth, decide(block, cfg.tau_p));
            blocks += 1;
        }
    }
    if blocks == 0 {
        return Err(DetectError::EmptyEvaluation);
    }
    Ok(matrix)
}

/// Open-set evaluation over a test index: score every window once, group
/// per true subject in time order (segment id, then start frame), and
/// tally block verdicts.  The calibration subject's windows are excluded —
/// they chose τ_p, so letting them into the evaluation would leak.
pub fn evaluate_openset(
    store: &ParamStore,
    model: &ModelConfig,
    prior: &CentroidPrior,
    windows: &[WindowedSequence],
    test_idx: &[usize],
    calibration_subject: u32,
    cfg: &DetectorConfig,
) -> Result<ConfusionMatrix, DetectError> {
    cfg.validate()?;
    let kept: Vec<usize> = test_idx
        .iter()
        .copied()
        .filter(|&i| windows[i].label != calibration_subject)
        .collect();
    if kept.is_empty() {
        return Err(DetectError::EmptyEvaluation);
    }
    let steps = score_windows(store, model, prior, windows, &kept, 64)?;

    // Group per subject, keeping each subject's stream in time order.
    let mut order: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (pos, &i) in kept.iter().enumerate() {
        order.entry(windows[i].label).or_default().push(pos);
    }
    let per_subject: Vec<(u32, Vec<ScoredStep>)> = order
        .into_iter()
        .map(|(subject, mut positions)| {
            positions.sort_by_key(|&p| {
                let w = &windows[kept[p]];
                (w.segment_id, w.start_frame)
            });
            (subject, positions.into_iter().map(|p| steps[p]).collect())
        })
        .collect();
    confusion_from_scored(&per_subject, &prior.subjects_in_class_order(), cfg)
}
