//! Two-stage training: per batch, a feature-extraction step minimizes
//! classification + reconstruction loss over the encoder, heads, decoder and
//! classifier; a regularization block then trains the conditional critic for
//! several steps against fresh prior samples and applies one adversarial
//! update to the encoder. Includes stratified splits, Adam with separate
//! state per parameter group, checkpoint serialization, and training-curve
//! CSV output.

use crate::data::{DataError, DatasetPartition, WindowedSequence, FEATURES};
use crate::loss::{
    cross_entropy_batch, encoder_adversarial_loss, wgan_gp_critic_loss, LossReport,
};
use crate::model::{
    batch_matrix, bn_layers, init_params, one_hot, parameter_shapes, BnStats, BnUpdate, Forward,
    ModelConfig, ModelError, ParamStore, ParamTensor,
};
use crate::prior::{CentroidPrior, PriorError};
use crate::tensor::{BnMode, Tape};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

/// Exponential-moving-average momentum for batch-norm running statistics.
pub const BN_MOMENTUM: f64 = 0.1;
/// Checkpoint container magic.
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PCAA";
/// Checkpoint container version.
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("metadata encoding error: {0}")]
    Meta(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("bad checkpoint magic")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("tensor {name}: expected shape {expected:?}, got {got:?}")]
    TensorShape { name: String, expected: Vec<usize>, got: Vec<usize> },
    #[error("subject {subject} has only {count} windows; stratified split needs at least 3")]
    SubjectTooFewWindows { subject: u32, count: usize },
    #[error("invalid training configuration: {0}")]
    BadConfig(String),
    #[error("non-finite {loss_name} in epoch {epoch}, batch {batch}: training diverged")]
    Diverged { epoch: usize, batch: usize, loss_name: &'static str },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Prior(#[from] PriorError),
}

/// How the regularization stage participates in training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AdversaryMode {
    /// No stage-2 work at all.
    Off,
    /// Stage 2 computes the critic loss for reporting but applies no updates
    /// (critic frozen at initialization, encoder untouched by it).
    Frozen,
    /// Full adversarial training.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Critic updates per encoder adversarial update.
    pub critic_steps: usize,
    /// Gradient-penalty weight λ.
    pub gp_lambda: f64,
    pub seed: u64,
    /// Global-norm gradient clip per parameter group; None disables.
    pub grad_clip_norm: Option<f64>,
    /// Stop after this many epochs without validation-loss improvement.
    pub early_stop_patience: Option<usize>,
    pub adversary: AdversaryMode,
    pub split_ratios: (f64, f64, f64),
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 32,
            epochs: 100,
            critic_steps: 5,
            gp_lambda: crate::loss::DEFAULT_GP_LAMBDA,
            seed: 0,
            grad_clip_norm: Some(10.0),
            early_stop_patience: None,
            adversary: AdversaryMode::Full,
            split_ratios: (0.8, 0.1, 0.1),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.learning_rate > 0.0) {
            return Err(TrainError::BadConfig("learning rate must be positive".into()));
        }
        if self.batch_size < 2 {
            return Err(TrainError::BadConfig(
                "batch size must be at least 2 (normalization and interpolation need pairs)"
                    .into(),
            ));
        }
        if self.epochs == 0 {
            return Err(TrainError::BadConfig("need at least one epoch".into()));
        }
        if self.gp_lambda < 0.0 {
            return Err(TrainError::BadConfig("gradient-penalty weight must be >= 0".into()));
        }
        let (a, b, c) = self.split_ratios;
        if (a + b + c - 1.0).abs() > 1e-9 || a <= 0.0 || b <= 0.0 || c <= 0.0 {
            return Err(TrainError::BadConfig("split ratios must be positive and sum to 1".into()));
        }
        Ok(())
    }
}

/// One row of the training curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub epoch: usize,
    pub l_c: f64,
    pub l_r: f64,
    pub l: f64,
    pub l_d: f64,
    pub val_l: f64,
    pub val_accuracy: f64,
}

/// A complete training artifact: parameters, running statistics, every
/// configuration needed to reproduce inference, and the loss history.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ParamStore,
    pub model: ModelConfig,
    pub prior: CentroidPrior,
    pub train: TrainConfig,
    pub epoch: usize,
    pub history: Vec<CurveRow>,
}

impl Checkpoint {
    /// The prior used for scoring: the fixed placement, or — under the
    /// learned-centroids ablation — centroids read out of the label-to-center
    /// network, with the descriptive radius/separation fields recomputed.
    pub fn effective_prior(&self) -> Result<CentroidPrior, TrainError> {
        if !self.model.learned_centroids {
            return Ok(self.prior.clone());
        }
        let m = self.model.n_classes;
        let mut tape = Tape::new();
        let oh = tape.constant(one_hot(&(0..m).collect::<Vec<_>>(), m), &[m, m]);
        let mut fwd = Forward::new(&mut tape, &self.params, &self.model, BnMode::Eval);
        let mu = fwd.centroid_map(oh)?;
        let k = self.model.latent_dim;
        let data = tape.data(mu);
        let centroids: Vec<Vec<f64>> =
            (0..m).map(|i| data[i * k..(i + 1) * k].to_vec()).collect();
        let radius = centroids
            .iter()
            .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
            .sum::<f64>()
            / m as f64;
        let mut min_sep = f64::INFINITY;
        for i in 0..m {
            for j in i + 1..m {
                let d = centroids[i]
                    .iter()
                    .zip(&centroids[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                min_sep = min_sep.min(d);
            }
        }
        Ok(CentroidPrior {
            centroids,
            radius,
            min_separation: min_sep,
            label_map: self.prior.label_map.clone(),
            seed: self.prior.seed,
        })
    }
}

// ----- splits ----------------------------------------------------------------

/// Stratified per-subject split of known-subject window indices into
/// (train, val, test). Every subject lands in all three splits; deterministic
/// in `seed`; returned lists are sorted and disjoint.
pub fn split_known(
    windows: &[WindowedSequence],
    known: &[u32],
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>), TrainError> {
    let (r_train, r_val, r_test) = ratios;
    if (r_train + r_val + r_test - 1.0).abs() > 1e-9 {
        return Err(TrainError::BadConfig("split ratios must sum to 1".into()));
    }
    let mut per_subject: HashMap<u32, Vec<usize>> = HashMap::new();
    for (i, w) in windows.iter().enumerate() {
        if known.contains(&w.label) {
            per_subject.entry(w.label).or_default().push(i);
        }
    }
    let mut subjects: Vec<u32> = known.to_vec();
    subjects.sort_unstable();
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for s in subjects {
        let mut idx = per_subject.remove(&s).unwrap_or_default();
        if idx.len() < 3 {
            return Err(TrainError::SubjectTooFewWindows { subject: s, count: idx.len() });
        }
        let mut rng = crate::seeds::rng_for_indexed(seed, "split", s as u64);
        idx.shuffle(&mut rng);
        let n = idx.len();
        let n_val = ((r_val * n as f64).round() as usize).max(1);
        let n_test = ((r_test * n as f64).round() as usize).clamp(1, n - n_val - 1);
        let n_train = n - n_val - n_test;
        train.extend_from_slice(&idx[..n_train]);
        val.extend_from_slice(&idx[n_train..n_train + n_val]);
        test.extend_from_slice(&idx[n_train + n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok((train, val, test))
}

/// How known-subject windows are assigned to train/val/test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplitStrategy {
    /// Uniformly random per subject.  With a window step smaller than the
    /// window length, adjacent windows overlap, so frames leak between the
    /// splits — accepted as the reference protocol.
    Random,
    /// Contiguous time chunks per subject (train, then val, then test in
    /// stream order), with val/test windows that share frames across a
    /// chunk boundary dropped.  Leak-free, at the cost of fewer windows
    /// and non-uniform coverage of each recording.
    ChunkByTime,
}

impl Default for SplitStrategy {
    fn default() -> Self {
        SplitStrategy::Random
    }
}

/// Leak-free alternative to `split_known`: each subject's windows are
/// ordered by (segment, start frame) and cut into three consecutive
/// chunks with the given ratios.  A val/test window beginning before the
/// previous chunk's last frame ends would share raw frames across the
/// boundary, so it is dropped.
pub fn split_known_chunked(
    windows: &[WindowedSequence],
    known: &[u32],
    ratios: (f64, f64, f64),
) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>), TrainError> {
    let (r_train, r_val, r_test) = ratios;
    if (r_train + r_val + r_test - 1.0).abs() > 1e-9 {
        return Err(TrainError::BadConfig("split ratios must sum to 1".into()));
    }
    let mut per_subject: HashMap<u32, Vec<usize>> = HashMap::new();
    for (i, w) in windows.iter().enumerate() {
        if known.contains(&w.label) {
            per_subject.entry(w.label).or_default().push(i);
        }
    }
    let mut subjects: Vec<u32> = known.to_vec();
    subjects.sort_unstable();
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for s in subjects {
        let mut idx = per_subject.remove(&s).unwrap_or_default();
        if idx.len() < 3 {
            return Err(TrainError::SubjectTooFewWindows { subject: s, count: idx.len() });
        }
        idx.sort_by_key(|&i| (windows[i].segment_id, windows[i].start_frame));
        let n = idx.len();
        let n_val = ((r_val * n as f64).round() as usize).max(1);
        let n_test = ((r_test * n as f64).round() as usize).clamp(1, n - n_val - 1);
        let n_train = n - n_val - n_test;

        // One frame past the end of the last window of a chunk, per segment.
        let chunk_end = |slice: &[usize]| -> Option<(u32, u32)> {
            slice.last().map(|&i| {
                let w = &windows[i];
                (w.segment_id, w.start_frame + w.n_frames as u32)
            })
        };
        let leaks = |i: usize, boundary: Option<(u32, u32)>| -> bool {
            match boundary {
                Some((seg, end)) => {
                    windows[i].segment_id == seg && windows[i].start_frame < end
                }
                None => false,
            }
        };
        let tr = &idx[..n_train];
        let va: Vec<usize> = idx[n_train..n_train + n_val]
            .iter()
            .copied()
            .filter(|&i| !leaks(i, chunk_end(tr)))
            .collect();
        let te: Vec<usize> = idx[n_train + n_val..]
            .iter()
            .copied()
            .filter(|&i| !leaks(i, chunk_end(&idx[n_train..n_train + n_val])))
            .collect();
        if va.is_empty() || te.is_empty() {
            return Err(TrainError::BadConfig(format!(
                "subject {s}: chunked split leaves an empty val or test chunk \
                 after dropping boundary windows"
            )));
        }
        train.extend_from_slice(tr);
        val.extend(va);
        test.extend(te);
    }
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok((train, val, test))
}

// ----- optimizer --------------------------------------------------------------

/// Adam with bias correction; one instance per parameter group so moment
/// state never leaks between groups.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: HashMap<String, Vec<f64>>,
    v: HashMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Adam {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: HashMap::new(), v: HashMap::new() }
    }

    /// Apply one update from named gradients, optionally clipping the global
    /// norm across the whole group first.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &[(String, Vec<f64>)],
        clip: Option<f64>,
    ) {
        let mut scale = 1.0;
        if let Some(c) = clip {
            let norm: f64 = grads
                .iter()
                .map(|(_, g)| g.iter().map(|v| v * v).sum::<f64>())
                .sum::<f64>()
                .sqrt();
            if norm > c {
                scale = c / norm;
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, g) in grads {
            let p = &mut store.tensors.get_mut(name).unwrap_or_else(|| {
                panic!("optimizer step on unknown tensor {}", name)
            }).data;
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; p.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; p.len()]);
            for i in 0..p.len() {
                let gi = g[i] * scale;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// Early stopping on a minimized metric.
pub struct EarlyStop {
    patience: Option<usize>,
    best: f64,
    since: usize,
}

impl EarlyStop {
    pub fn new(patience: Option<usize>) -> EarlyStop {
        EarlyStop { patience, best: f64::INFINITY, since: 0 }
    }

    /// Record one epoch's value; true means stop now.
    pub fn should_stop(&mut self, value: f64) -> bool {
        if value < self.best {
            self.best = value;
            self.since = 0;
            return false;
        }
        self.since += 1;
        match self.patience {
            Some(p) => self.since > p,
            None => false,
        }
    }
}

// ----- forward helpers ---------------------------------------------------------

fn collect_grads(
    tape: &Tape,
    leaves: &[(String, crate::tensor::TensorId)],
    prefixes: &[&str],
) -> Vec<(String, Vec<f64>)> {
    leaves
        .iter()
        .filter(|(name, _)| prefixes.iter().any(|p| name.starts_with(p)))
        .map(|(name, id)| (name.clone(), tape.grad_or_zeros(*id)))
        .collect()
}

fn apply_bn_updates(store: &mut ParamStore, updates: &[BnUpdate]) {
    for u in updates {
        let stats = store
            .bn
            .get_mut(&u.name)
            .unwrap_or_else(|| panic!("batch-norm update for unknown layer {}", u.name));
        for j in 0..stats.mean.len() {
            stats.mean[j] = (1.0 - BN_MOMENTUM) * stats.mean[j] + BN_MOMENTUM * u.mean[j];
            stats.var[j] = (1.0 - BN_MOMENTUM) * stats.var[j] + BN_MOMENTUM * u.var[j];
        }
    }
}

/// Encode a prepared batch and return the latent values (no graph kept).
fn encode_values(
    store: &ParamStore,
    cfg: &ModelConfig,
    x_data: &[f64],
    b: usize,
    mode: BnMode,
) -> Result<Vec<f64>, TrainError> {
    let mut tape = Tape::new();
    let x = tape.constant(x_data.to_vec(), &[b * cfg.n_frames * cfg.n_points, FEATURES]);
    let mut fwd = Forward::new(&mut tape, store, cfg, mode);
    let z = fwd.encode(x, b)?;
    Ok(tape.data(z).to_vec())
}

/// Eval-mode latent vectors for a set of windows, in index order.
pub fn encode_windows(
    store: &ParamStore,
    cfg: &ModelConfig,
    windows: &[WindowedSequence],
    idx: &[usize],
    batch_size: usize,
) -> Result<Vec<Vec<f64>>, TrainError> {
    let mut out = Vec::with_capacity(idx.len());
    for chunk in idx.chunks(batch_size.max(1)) {
        let batch: Vec<&WindowedSequence> = chunk.iter().map(|&i| &windows[i]).collect();
        let x_data = batch_matrix(&batch, cfg)?;
        let z = encode_values(store, cfg, &x_data, batch.len(), BnMode::Eval)?;
        for row in z.chunks(cfg.latent_dim) {
            out.push(row.to_vec());
        }
    }
    Ok(out)
}

/// Eval-mode metrics over a window subset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValMetrics {
    pub l_c: f64,
    pub l_r: f64,
    pub l: f64,
    pub accuracy: f64,
}

/// Compute eval-mode loss and accuracy over the given windows (running
/// batch-norm statistics; no parameter updates).
pub fn evaluate_known(
    store: &ParamStore,
    cfg: &ModelConfig,
    prior: &CentroidPrior,
    windows: &[WindowedSequence],
    idx: &[usize],
    batch_size: usize,
) -> Result<ValMetrics, TrainError> {
    if idx.is_empty() {
        return Err(TrainError::BadConfig("evaluation set is empty".into()));
    }
    let mut sum_ce = 0.0;
    let mut sum_ch = 0.0;
    let mut correct = 0usize;
    for chunk in idx.chunks(batch_size.max(1)) {
        let batch: Vec<&WindowedSequence> = chunk.iter().map(|&i| &windows[i]).collect();
        let b = batch.len();
        let x_data = batch_matrix(&batch, cfg)?;
        let classes: Vec<usize> = batch
            .iter()
            .map(|w| prior.centroid_index(w.label))
            .collect::<Result<_, _>>()?;
        let mut tape = Tape::new();
        let x = tape.constant(x_data.clone(), &[b * cfg.n_frames * cfg.n_points, FEATURES]);
        let (probs, chamfer) = {
            let mut fwd = Forward::new(&mut tape, store, cfg, BnMode::Eval);
            let z = fwd.encode(x, b)?;
            let probs = fwd.classify(z)?;
            let chamfer = if cfg.use_decoder {
                let r = fwd.decode(z)?;
                Some(fwd.tape.chamfer_per_sample(&x_data, r, b, cfg.n_frames, cfg.n_points))
            } else {
                None
            };
            (probs, chamfer)
        };
        let pd = tape.data(probs);
        for (i, &c) in classes.iter().enumerate() {
            let row = &pd[i * cfg.n_classes..(i + 1) * cfg.n_classes];
            sum_ce += crate::loss::cross_entropy(row, &one_hot(&[c], cfg.n_classes)).unwrap();
            let pred = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            if pred == c {
                correct += 1;
            }
        }
        if let Some(per) = chamfer {
            sum_ch += tape.data(per).iter().sum::<f64>();
        }
    }
    let n = idx.len() as f64;
    let l_c = sum_ce / n;
    let l_r = sum_ch / n;
    Ok(ValMetrics { l_c, l_r, l: l_c + l_r, accuracy: correct as f64 / n })
}

// ----- the training loop --------------------------------------------------------

struct StageContext<'a> {
    model_cfg: &'a ModelConfig,
    cfg: &'a TrainConfig,
    prior: &'a CentroidPrior,
}

/// One critic update (or evaluation when frozen): fresh prior samples, the
/// Wasserstein loss with gradient penalty on a detached latent batch, and —
/// in Full mode — an Adam step on the critic group only.
#[allow(clippy::too_many_arguments)]
fn critic_update(
    ctx: &StageContext,
    store: &mut ParamStore,
    adam: &mut Adam,
    z_data: &[f64],
    labels: &[u32],
    onehot: &[f64],
    prior_rng: &mut impl Rng,
    interp_rng: &mut impl Rng,
    apply: bool,
) -> Result<(f64, f64), TrainError> {
    let b = labels.len();
    let k = ctx.model_cfg.latent_dim;
    let mut tape = Tape::new();
    let z = tape.constant(z_data.to_vec(), &[b, k]);
    let mut fwd = Forward::new(&mut tape, store, ctx.model_cfg, BnMode::Train);

    // Fresh prior samples, one per window, conditioned on the window's label.
    let z_star = if ctx.model_cfg.learned_centroids {
        let oh = fwd.tape.constant(onehot.to_vec(), &[b, ctx.model_cfg.n_classes]);
        let mu = fwd.centroid_map(oh)?;
        let noise: Vec<f64> = (0..b * k)
            .map(|_| prior_rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        let eps = fwd.tape.constant(noise, &[b, k]);
        fwd.tape.add(mu, eps)
    } else {
        let mut data = Vec::with_capacity(b * k);
        for &label in labels {
            data.extend(ctx.prior.sample(label, prior_rng)?);
        }
        fwd.tape.constant(data, &[b, k])
    };

    let (loss, gp) =
        wgan_gp_critic_loss(&mut fwd, z, z_star, onehot, ctx.cfg.gp_lambda, interp_rng)?;
    let leaves = fwd.touched_leaves();
    drop(fwd);
    let l_d = tape.value(loss);
    let gp_v = tape.value(gp);
    if apply {
        tape.backward(loss);
        let prefixes: &[&str] =
            if ctx.model_cfg.learned_centroids { &["disc.", "cmap."] } else { &["disc."] };
        let grads = collect_grads(&tape, &leaves, prefixes);
        adam.step(store, &grads, ctx.cfg.grad_clip_norm);
    }
    Ok((l_d, gp_v))
}

/// One encoder adversarial update: re-encode the batch, minimize −mean D,
/// and step the encoder group only.
fn encoder_adversarial_update(
    ctx: &StageContext,
    store: &mut ParamStore,
    adam: &mut Adam,
    x_data: &[f64],
    b: usize,
    onehot: &[f64],
) -> Result<f64, TrainError> {
    let mut tape = Tape::new();
    let x = tape
        .constant(x_data.to_vec(), &[b * ctx.model_cfg.n_frames * ctx.model_cfg.n_points, FEATURES]);
    let mut fwd = Forward::new(&mut tape, store, ctx.model_cfg, BnMode::Train);
    let z = fwd.encode(x, b)?;
    let loss = encoder_adversarial_loss(&mut fwd, z, onehot)?;
    let leaves = fwd.touched_leaves();
    drop(fwd);
    let value = tape.value(loss);
    tape.backward(loss);
    let grads = collect_grads(&tape, &leaves, &["enc."]);
    adam.step(store, &grads, ctx.cfg.grad_clip_norm);
    Ok(value)
}

/// Train the full model on the known-subject partition.
pub fn train(
    windows: &[WindowedSequence],
    partition: &DatasetPartition,
    prior: &CentroidPrior,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<Checkpoint, TrainError> {
    cfg.validate()?;
    model_cfg.validate()?;
    if partition.known.len() < 2 {
        return Err(TrainError::BadConfig("need at least 2 known subjects".into()));
    }
    if model_cfg.n_classes != partition.known.len() || prior.n_modes() != partition.known.len() {
        return Err(TrainError::BadConfig(format!(
            "class count mismatch: model {}, prior {}, partition {}",
            model_cfg.n_classes,
            prior.n_modes(),
            partition.known.len()
        )));
    }
    if prior.latent_dim() != model_cfg.latent_dim {
        return Err(TrainError::BadConfig(format!(
            "latent dimension mismatch: model {}, prior {}",
            model_cfg.latent_dim,
            prior.latent_dim()
        )));
    }
    if partition.train_idx.is_empty() || partition.val_idx.is_empty() {
        return Err(TrainError::BadConfig("empty train or validation split".into()));
    }

    let mut store = init_params(model_cfg, cfg.seed);
    let mut adam_stage1 = Adam::new(cfg.learning_rate);
    let mut adam_critic = Adam::new(cfg.learning_rate);
    let mut adam_enc_adv = Adam::new(cfg.learning_rate);
    let mut early = EarlyStop::new(cfg.early_stop_patience);
    let mut prior_rng = crate::seeds::rng_for(cfg.seed, "prior-samples");
    let mut interp_rng = crate::seeds::rng_for(cfg.seed, "gp-interpolation");
    let ctx = StageContext { model_cfg, cfg, prior };
    let mut history: Vec<CurveRow> = Vec::new();
    let mut last_epoch = 0;

    for epoch in 0..cfg.epochs {
        let mut order = partition.train_idx.clone();
        let mut shuffle_rng = crate::seeds::rng_for_indexed(cfg.seed, "batch-shuffle", epoch as u64);
        order.shuffle(&mut shuffle_rng);

        let mut epoch_report = LossReport::default();
        let mut batches = 0usize;
        for (batch_i, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&WindowedSequence> = chunk.iter().map(|&i| &windows[i]).collect();
            let b = batch.len();
            let x_data = batch_matrix(&batch, model_cfg)?;
            let labels: Vec<u32> = batch.iter().map(|w| w.label).collect();
            let classes: Vec<usize> = labels
                .iter()
                .map(|&l| prior.centroid_index(l))
                .collect::<Result<_, _>>()?;
            let oh = one_hot(&classes, model_cfg.n_classes);

            // Stage 1: feature extraction — classification + reconstruction.
            let (l_c_v, l_r_v, l_v) = {
                let mut tape = Tape::new();
                let x = tape.constant(
                    x_data.clone(),
                    &[b * model_cfg.n_frames * model_cfg.n_points, FEATURES],
                );
                let mut fwd = Forward::new(&mut tape, &store, model_cfg, BnMode::Train);
                let z = fwd.encode(x, b)?;
                let probs = fwd.classify(z)?;
                let l_c = cross_entropy_batch(&mut fwd, probs, &oh);
                let (l_r_v, total) = if model_cfg.use_decoder {
                    let r = fwd.decode(z)?;
                    let per = fwd.tape.chamfer_per_sample(
                        &x_data,
                        r,
                        b,
                        model_cfg.n_frames,
                        model_cfg.n_points,
                    );
                    let l_r = fwd.tape.mean_all(per);
                    let total = fwd.tape.add(l_c, l_r);
                    (fwd.tape.value(l_r), total)
                } else {
                    (0.0, l_c)
                };
                let updates = std::mem::take(&mut fwd.bn_updates);
                let leaves = fwd.touched_leaves();
                drop(fwd);
                let l_c_v = tape.value(l_c);
                let l_v = tape.value(total);
                if !l_v.is_finite() {
                    return Err(TrainError::Diverged { epoch, batch: batch_i, loss_name: "L" });
                }
                tape.backward(total);
                let grads = collect_grads(&tape, &leaves, &["enc.", "dec.", "cls."]);
                adam_stage1.step(&mut store, &grads, cfg.grad_clip_norm);
                apply_bn_updates(&mut store, &updates);
                (l_c_v, l_r_v, l_v)
            };

            // Stage 2: adversarial regularization.
            let mut l_d_v = 0.0;
            let mut gp_v = 0.0;
            if cfg.adversary != AdversaryMode::Off {
                let apply = cfg.adversary == AdversaryMode::Full;
                // Latents from the just-updated encoder; the critic sees
                // them as constants.
                let z_data = encode_values(&store, model_cfg, &x_data, b, BnMode::Train)?;
                for _ in 0..cfg.critic_steps.max(1) {
                    let (l_d, gp) = critic_update(
                        &ctx,
                        &mut store,
                        &mut adam_critic,
                        &z_data,
                        &labels,
                        &oh,
                        &mut prior_rng,
                        &mut interp_rng,
                        apply,
                    )?;
                    if !l_d.is_finite() {
                        return Err(TrainError::Diverged {
                            epoch,
                            batch: batch_i,
                            loss_name: "L_D",
                        });
                    }
                    l_d_v = l_d;
                    gp_v = gp;
                }
                if apply {
                    let adv = encoder_adversarial_update(
                        &ctx,
                        &mut store,
                        &mut adam_enc_adv,
                        &x_data,
                        b,
                        &oh,
                    )?;
                    if !adv.is_finite() {
                        return Err(TrainError::Diverged {
                            epoch,
                            batch: batch_i,
                            loss_name: "encoder adversarial loss",
                        });
                    }
                }
            }

            epoch_report.l_c += l_c_v;
            epoch_report.l_r += l_r_v;
            epoch_report.l += l_v;
            epoch_report.l_d += l_d_v;
            epoch_report.gp_term += gp_v;
            batches += 1;
        }

        let nb = batches.max(1) as f64;
        let val = evaluate_known(&store, model_cfg, prior, windows, &partition.val_idx,
            cfg.batch_size)?;
        if !val.l.is_finite() {
            return Err(TrainError::Diverged { epoch, batch: 0, loss_name: "val_L" });
        }
        history.push(CurveRow {
            epoch,
            l_c: epoch_report.l_c / nb,
            l_r: epoch_report.l_r / nb,
            l: epoch_report.l / nb,
            l_d: epoch_report.l_d / nb,
            val_l: val.l,
            val_accuracy: val.accuracy,
        });
        last_epoch = epoch;
        if early.should_stop(val.l) {
            break;
        }
    }

    Ok(Checkpoint {
        params: store,
        model: model_cfg.clone(),
        prior: prior.clone(),
        train: cfg.clone(),
        epoch: last_epoch,
        history,
    })
}

// ----- checkpoint serialization --------------------------------------------------

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    model: ModelConfig,
    prior: CentroidPrior,
    train: TrainConfig,
    epoch: usize,
    history: Vec<CurveRow>,
}

/// Write a checkpoint: magic, version, JSON metadata blob, then a named
/// tensor table and the batch-norm statistics, all little-endian f64.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), TrainError> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
    let meta = serde_json::to_vec(&CheckpointMeta {
        model: ckpt.model.clone(),
        prior: ckpt.prior.clone(),
        train: ckpt.train.clone(),
        epoch: ckpt.epoch,
        history: ckpt.history.clone(),
    })?;
    w.write_u32::<LittleEndian>(meta.len() as u32)?;
    w.write_all(&meta)?;

    w.write_u32::<LittleEndian>(ckpt.params.tensors.len() as u32)?;
    for (name, t) in &ckpt.params.tensors {
        w.write_u16::<LittleEndian>(name.len() as u16)?;
        w.write_all(name.as_bytes())?;
        w.write_u8(t.shape.len() as u8)?;
        for &d in &t.shape {
            w.write_u32::<LittleEndian>(d as u32)?;
        }
        for &v in &t.data {
            w.write_f64::<LittleEndian>(v)?;
        }
    }
    w.write_u32::<LittleEndian>(ckpt.params.bn.len() as u32)?;
    for (name, s) in &ckpt.params.bn {
        w.write_u16::<LittleEndian>(name.len() as u16)?;
        w.write_all(name.as_bytes())?;
        w.write_u32::<LittleEndian>(s.mean.len() as u32)?;
        for &v in &s.mean {
            w.write_f64::<LittleEndian>(v)?;
        }
        for &v in &s.var {
            w.write_f64::<LittleEndian>(v)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_name(r: &mut impl Read) -> Result<String, TrainError> {
    let len = r.read_u16::<LittleEndian>()? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| TrainError::Corrupt("tensor name is not UTF-8".into()))
}

/// Read a checkpoint and verify every tensor and statistics vector against
/// the architecture implied by the stored model configuration.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, TrainError> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(TrainError::BadMagic);
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != CHECKPOINT_VERSION {
        return Err(TrainError::BadVersion(version));
    }
    let meta_len = r.read_u32::<LittleEndian>()? as usize;
    let mut meta_buf = vec![0u8; meta_len.min(1 << 26)];
    if meta_buf.len() != meta_len {
        return Err(TrainError::Corrupt("metadata block too large".into()));
    }
    r.read_exact(&mut meta_buf)?;
    let meta: CheckpointMeta = serde_json::from_slice(&meta_buf)?;
    meta.model.validate()?;

    let mut store = ParamStore::default();
    let n_tensors = r.read_u32::<LittleEndian>()? as usize;
    for _ in 0..n_tensors {
        let name = read_name(&mut r)?;
        let ndim = r.read_u8()? as usize;
        let mut shape = Vec::with_capacity(ndim.min(8));
        for _ in 0..ndim {
            shape.push(r.read_u32::<LittleEndian>()? as usize);
        }
        let len: usize = shape.iter().product();
        if len > (1 << 28) {
            return Err(TrainError::Corrupt(format!("tensor {} implausibly large", name)));
        }
        let mut data = vec![0.0f64; len];
        r.read_f64_into::<LittleEndian>(&mut data)?;
        store.tensors.insert(name, ParamTensor { data, shape });
    }
    let n_bn = r.read_u32::<LittleEndian>()? as usize;
    for _ in 0..n_bn {
        let name = read_name(&mut r)?;
        let c = r.read_u32::<LittleEndian>()? as usize;
        if c > (1 << 24) {
            return Err(TrainError::Corrupt(format!("statistics for {} implausibly large", name)));
        }
        let mut mean = vec![0.0f64; c];
        r.read_f64_into::<LittleEndian>(&mut mean)?;
        let mut var = vec![0.0f64; c];
        r.read_f64_into::<LittleEndian>(&mut var)?;
        store.bn.insert(name, BnStats { mean, var });
    }

    validate_store(&store, &meta.model)?;
    Ok(Checkpoint {
        params: store,
        model: meta.model,
        prior: meta.prior,
        train: meta.train,
        epoch: meta.epoch,
        history: meta.history,
    })
}

/// Check that a parameter store matches the architecture of `cfg` exactly:
/// same tensor names in the same order, same shapes, same statistics layers.
pub fn validate_store(store: &ParamStore, cfg: &ModelConfig) -> Result<(), TrainError> {
    let expected = parameter_shapes(cfg);
    if store.tensors.len() != expected.len() {
        return Err(TrainError::Corrupt(format!(
            "expected {} tensors for this configuration, found {}",
            expected.len(),
            store.tensors.len()
        )));
    }
    for ((name, shape, _), (got_name, got)) in expected.iter().zip(&store.tensors) {
        if name != got_name {
            return Err(TrainError::Corrupt(format!(
                "tensor order mismatch: expected {}, found {}",
                name, got_name
            )));
        }
        if &got.shape != shape || got.data.len() != shape.iter().product::<usize>() {
            return Err(TrainError::TensorShape {
                name: name.clone(),
                expected: shape.clone(),
                got: got.shape.clone(),
            });
        }
    }
    let expected_bn = bn_layers(cfg);
    if store.bn.len() != expected_bn.len() {
        return Err(TrainError::Corrupt("batch-norm layer count mismatch".into()));
    }
    for ((name, c), (got_name, got)) in expected_bn.iter().zip(&store.bn) {
        if name != got_name || got.mean.len() != *c || got.var.len() != *c {
            return Err(TrainError::Corrupt(format!(
                "batch-norm layer mismatch at {}",
                got_name
            )));
        }
    }
    Ok(())
}

/// Write the training curve: epoch, L_C, L_R, L, L_D, val_L, val_accuracy.
pub fn write_training_curve(path: &Path, history: &[CurveRow]) -> Result<(), TrainError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "L_C", "L_R", "L", "L_D", "val_L", "val_accuracy"])?;
    for row in history {
        w.write_record([
            row.epoch.to_string(),
            row.l_c.to_string(),
            row.l_r.to_string(),
            row.l.to_string(),
            row.l_d.to_string(),
            row.val_l.to_string(),
            row.val_accuracy.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Modality, PreprocessConfig};
    use crate::model::ModelConfig;
    use crate::prior::place_centroids;
    use crate::synth::{generate_profiles, simulate_recording};

    fn tiny_cfg(n_classes: usize) -> ModelConfig {
        ModelConfig::desk_scale(0.125, n_classes, 6, 8)
    }

    /// Synthetic windows for `n_subjects` subjects (ids 1..=n), free walk.
    fn synth_windows(n_subjects: usize, duration_s: f64, cfg: &ModelConfig, seed: u64)
        -> Vec<WindowedSequence>
    {
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
            let rec = simulate_recording(p, Modality::FreeWalk, duration_s, 10.0);
            let (mut ws, _) = crate::data::windows_from_segment(&rec, si as u32, &pre).unwrap();
            out.append(&mut ws);
        }
        out
    }

    fn fixture(n_subjects: usize, duration_s: f64, cfg: &ModelConfig, seed: u64)
        -> (Vec<WindowedSequence>, DatasetPartition, CentroidPrior)
    {
        let windows = synth_windows(n_subjects, duration_s, cfg, seed);
        let known: Vec<u32> = (1..=n_subjects as u32).collect();
        let (train_idx, val_idx, test_idx) =
            split_known(&windows, &known, (0.8, 0.1, 0.1), seed).unwrap();
        let partition = DatasetPartition {
            known: known.clone(),
            unknown: vec![],
            calibration_subject: 0,
            train_idx,
            val_idx,
            test_idx,
            seed,
        };
        let mut prior =
            place_centroids(n_subjects, cfg.latent_dim, 10.0, 10.0, seed).unwrap();
        prior.assign_subjects(&known).unwrap();
        (windows, partition, prior)
    }

    fn fake_window(label: u32, cfg: &ModelConfig) -> WindowedSequence {
        WindowedSequence {
            data: vec![0.1; cfg.n_frames * cfg.n_points * FEATURES],
            n_frames: cfg.n_frames,
            n_points: cfg.n_points,
            label,
            modality: Modality::FreeWalk,
            segment_id: 0,
            start_frame: 0,
        }
    }

    #[test]
    fn stratified_split_is_disjoint_proportional_and_deterministic() {
        let cfg = tiny_cfg(10);
        let windows: Vec<WindowedSequence> = (1..=10u32)
            .flat_map(|s| (0..100).map(move |_| s))
            .map(|s| fake_window(s, &cfg))
            .collect();
        let known: Vec<u32> = (1..=10).collect();
        let (tr, va, te) = split_known(&windows, &known, (0.8, 0.1, 0.1), 7).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (800, 100, 100));
        let mut all: Vec<usize> = tr.iter().chain(&va).chain(&te).copied().collect();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), 1000, "splits must cover disjointly");

        // Per-subject proportions within 2 percentage points.
        for s in 1..=10u32 {
            let count = |idx: &[usize]| {
                idx.iter().filter(|&&i| windows[i].label == s).count() as f64
            };
            assert!((count(&tr) / 100.0 - 0.8).abs() <= 0.02);
            assert!((count(&va) / 100.0 - 0.1).abs() <= 0.02);
            assert!((count(&te) / 100.0 - 0.1).abs() <= 0.02);
        }

        let again = split_known(&windows, &known, (0.8, 0.1, 0.1), 7).unwrap();
        assert_eq!((tr, va, te), again);
        let other = split_known(&windows, &known, (0.8, 0.1, 0.1), 8).unwrap();
        assert_ne!(other.0, again.0);
    }

    #[test]
    fn split_rejects_subjects_with_fewer_than_three_windows() {
        let cfg = tiny_cfg(2);
        let mut windows = vec![fake_window(1, &cfg); 10];
        windows.push(fake_window(2, &cfg));
        windows.push(fake_window(2, &cfg));
        let err = split_known(&windows, &[1, 2], (0.8, 0.1, 0.1), 0).unwrap_err();
        match err {
            TrainError::SubjectTooFewWindows { subject, count } => {
                assert_eq!((subject, count), (2, 2));
            }
            other => panic!("unexpected error {:?}", other),
        }
    }

    #[test]
    fn chunked_split_is_time_ordered_and_leak_free() {
        let cfg = tiny_cfg(2);
        // Overlapping windows (step = half the window) so a random split
        // WOULD leak frames; the chunked protocol must not.
        let profiles = generate_profiles(2, 41, 1.0);
        let pre = PreprocessConfig {
            n_frames: cfg.n_frames,
            n_points: cfg.n_points,
            step: cfg.n_frames / 2,
            center_velocity: false,
            seed: 41,
        };
        let mut windows = Vec::new();
        for (si, p) in profiles.iter().enumerate() {
            let rec = simulate_recording(p, Modality::FreeWalk, 12.0, 10.0);
            let (ws, _) = crate::data::windows_from_segment(&rec, si as u32, &pre).unwrap();
            windows.extend(ws);
        }
        let known = vec![1u32, 2];
        let (tr, va, te) =
            split_known_chunked(&windows, &known, (0.8, 0.1, 0.1)).unwrap();
        assert!(!tr.is_empty() && !va.is_empty() && !te.is_empty());

        // Deterministic without any seed: a second call is identical.
        let again = split_known_chunked(&windows, &known, (0.8, 0.1, 0.1)).unwrap();
        assert_eq!((tr.clone(), va.clone(), te.clone()), again);

        // No raw frame appears in two different splits.
        let span = |i: usize| {
            let w = &windows[i];
            (w.label, w.segment_id, w.start_frame, w.start_frame + w.n_frames as u32)
        };
        let disjoint = |a: &[usize], b: &[usize]| {
            for &i in a {
                for &j in b {
                    let (sa, ga, s0, s1) = span(i);
                    let (sb, gb, t0, t1) = span(j);
                    if sa == sb && ga == gb {
                        assert!(
                            s1 <= t0 || t1 <= s0,
                            "windows {i} and {j} share frames across splits"
                        );
                    }
                }
            }
        };
        disjoint(&tr, &va);
        disjoint(&va, &te);
        disjoint(&tr, &te);

        // Chunks come in stream order per subject: train before val before
        // test by start frame.
        for &s in &known {
            let seg = s as u32 - 1; // one segment per subject above
            let max_start = |idx: &[usize]| {
                idx.iter()
                    .filter(|&&i| windows[i].label == s && windows[i].segment_id == seg)
                    .map(|&i| windows[i].start_frame)
                    .max()
                    .unwrap()
            };
            let min_start = |idx: &[usize]| {
                idx.iter()
                    .filter(|&&i| windows[i].label == s && windows[i].segment_id == seg)
                    .map(|&i| windows[i].start_frame)
                    .min()
                    .unwrap()
            };
            assert!(max_start(&tr) < min_start(&va));
            assert!(max_start(&va) < min_start(&te));
        }
    }

    #[test]
    fn adam_first_step_matches_hand_computation() {
        let cfg = tiny_cfg(2);
        let mut store = init_params(&cfg, 1);
        let name = "enc.out.b".to_string();
        let before = store.get(&name).unwrap().data.clone();
        let g = vec![0.5; before.len()];
        let mut adam = Adam::new(1e-3);
        adam.step(&mut store, &[(name.clone(), g)], None);
        // First step: m̂ = g, v̂ = g², so Δ = lr·g/(|g|+ε) = lr·sign(g).
        let after = &store.get(&name).unwrap().data;
        for (b, a) in before.iter().zip(after) {
            let want = b - 1e-3 * 0.5 / (0.5 + 1e-8);
            assert!((a - want).abs() <= 1e-12);
        }
    }

    #[test]
    fn gradient_clipping_rescales_the_whole_group() {
        let cfg = tiny_cfg(2);
        let mut store_a = init_params(&cfg, 1);
        let mut store_b = store_a.clone();
        let name = "enc.out.b".to_string();
        let n = store_a.get(&name).unwrap().data.len();
        let g = vec![100.0; n];
        let norm = (n as f64).sqrt() * 100.0;
        // Clipped at 10: same direction, scaled magnitude.
        let mut adam_a = Adam::new(1e-3);
        adam_a.step(&mut store_a, &[(name.clone(), g.clone())], Some(10.0));
        let scaled: Vec<f64> = g.iter().map(|v| v * (10.0 / norm)).collect();
        let mut adam_b = Adam::new(1e-3);
        adam_b.step(&mut store_b, &[(name.clone(), scaled)], None);
        assert_eq!(store_a.get(&name).unwrap().data, store_b.get(&name).unwrap().data);
    }

    #[test]
    fn early_stop_waits_out_its_patience() {
        let mut es = EarlyStop::new(Some(2));
        assert!(!es.should_stop(1.0));
        assert!(!es.should_stop(0.9)); // improvement
        assert!(!es.should_stop(0.95)); // 1 stale
        assert!(!es.should_stop(0.92)); // 2 stale
        assert!(es.should_stop(0.91)); // 3rd stale epoch -> stop
        let mut never = EarlyStop::new(None);
        for _ in 0..50 {
            assert!(!never.should_stop(5.0));
        }
    }

    #[test]
    fn overfit_smoke_reaches_low_classification_loss_monotonically() {
        let cfg = tiny_cfg(2);
        let (windows, _, prior) = fixture(2, 3.0, &cfg, 42);
        // Overfit a fixed set of 8 windows: all splits point at them.
        let idx: Vec<usize> = {
            let a: Vec<usize> =
                (0..windows.len()).filter(|&i| windows[i].label == 1).take(4).collect();
            let b: Vec<usize> =
                (0..windows.len()).filter(|&i| windows[i].label == 2).take(4).collect();
            a.into_iter().chain(b).collect()
        };
        assert_eq!(idx.len(), 8);
        let partition = DatasetPartition {
            known: vec![1, 2],
            unknown: vec![],
            calibration_subject: 0,
            train_idx: idx.clone(),
            val_idx: idx,
            test_idx: vec![],
            seed: 42,
        };
        let tc = TrainConfig {
            learning_rate: 1e-3,
            batch_size: 8,
            epochs: 500,
            adversary: AdversaryMode::Off,
            early_stop_patience: None,
            seed: 42,
            ..TrainConfig::default()
        };
        let ckpt = train(&windows, &partition, &prior, &cfg, &tc).unwrap();
        let final_l_c = ckpt.history.last().unwrap().l_c;
        assert!(final_l_c < 0.05, "classification loss stuck at {}", final_l_c);
        for pair in ckpt.history.windows(2) {
            assert!(
                pair[1].l <= pair[0].l * 1.05,
                "training loss rose by more than 5% between epochs {} and {}",
                pair[0].epoch,
                pair[1].epoch
            );
        }
    }

    #[test]
    fn training_is_bit_deterministic() {
        let cfg = tiny_cfg(2);
        let (windows, partition, prior) = fixture(2, 3.0, &cfg, 5);
        let tc = TrainConfig {
            epochs: 2,
            batch_size: 4,
            critic_steps: 2,
            adversary: AdversaryMode::Full,
            seed: 5,
            ..TrainConfig::default()
        };
        let a = train(&windows, &partition, &prior, &cfg, &tc).unwrap();
        let b = train(&windows, &partition, &prior, &cfg, &tc).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.history, b.history);
    }

    #[test]
    fn decoder_ablation_zeroes_reconstruction_and_drops_parameters() {
        let mut cfg = tiny_cfg(2);
        cfg.use_decoder = false;
        let (windows, partition, prior) = fixture(2, 3.0, &cfg, 6);
        let tc = TrainConfig {
            epochs: 2,
            batch_size: 4,
            adversary: AdversaryMode::Full,
            seed: 6,
            ..TrainConfig::default()
        };
        let ckpt = train(&windows, &partition, &prior, &cfg, &tc).unwrap();
        assert!(ckpt.history.iter().all(|r| r.l_r == 0.0));
        assert!(ckpt.params.tensors.keys().all(|k| !k.starts_with("dec.")));
        assert!(ckpt.history.iter().all(|r| (r.l - r.l_c).abs() <= 1e-12));
    }

    #[test]
    fn critic_update_modifies_only_critic_parameters() {
        let cfg = tiny_cfg(3);
        let mut store = init_params(&cfg, 9);
        let snapshot = store.clone();
        let prior = {
            let mut p = place_centroids(3, cfg.latent_dim, 10.0, 10.0, 9).unwrap();
            p.assign_subjects(&[1, 2, 3]).unwrap();
            p
        };
        let tc = TrainConfig { seed: 9, ..TrainConfig::default() };
        let ctx = StageContext { model_cfg: &cfg, cfg: &tc, prior: &prior };
        let mut adam = Adam::new(1e-3);
        let b = 4;
        let z_data: Vec<f64> = (0..b * cfg.latent_dim).map(|i| 0.1 * i as f64).collect();
        let labels = [1u32, 2, 3, 1];
        let oh = one_hot(&[0, 1, 2, 0], cfg.n_classes);
        let mut prior_rng = crate::seeds::rng_for(9, "p");
        let mut interp_rng = crate::seeds::rng_for(9, "t");
        let (l_d, gp) = critic_update(
            &ctx, &mut store, &mut adam, &z_data, &labels, &oh,
            &mut prior_rng, &mut interp_rng, true,
        )
        .unwrap();
        assert!(l_d.is_finite() && gp >= 0.0);
        let mut critic_changed = false;
        for (name, t) in &store.tensors {
            let was = &snapshot.tensors[name];
            if name.starts_with("disc.") {
                critic_changed |= t.data != was.data;
            } else {
                assert_eq!(t.data, was.data, "{} must not change in a critic update", name);
            }
        }
        assert!(critic_changed);

        // Frozen mode: nothing moves at all.
        let mut frozen = snapshot.clone();
        let mut adam2 = Adam::new(1e-3);
        critic_update(
            &ctx, &mut frozen, &mut adam2, &z_data, &labels, &oh,
            &mut prior_rng, &mut interp_rng, false,
        )
        .unwrap();
        assert_eq!(frozen, snapshot);
    }

    #[test]
    fn encoder_adversarial_update_modifies_only_encoder_parameters() {
        let cfg = tiny_cfg(2);
        let mut store = init_params(&cfg, 10);
        let snapshot = store.clone();
        let prior = {
            let mut p = place_centroids(2, cfg.latent_dim, 10.0, 10.0, 10).unwrap();
            p.assign_subjects(&[1, 2]).unwrap();
            p
        };
        let tc = TrainConfig { seed: 10, ..TrainConfig::default() };
        let ctx = StageContext { model_cfg: &cfg, cfg: &tc, prior: &prior };
        let mut adam = Adam::new(1e-3);
        let b = 2;
        let x: Vec<f64> =
            (0..b * cfg.n_frames * cfg.n_points * FEATURES).map(|i| (i as f64).sin()).collect();
        let oh = one_hot(&[0, 1], cfg.n_classes);
        encoder_adversarial_update(&ctx, &mut store, &mut adam, &x, b, &oh).unwrap();
        let mut encoder_changed = false;
        for (name, t) in &store.tensors {
            let was = &snapshot.tensors[name];
            if name.starts_with("enc.") {
                encoder_changed |= t.data != was.data;
            } else {
                assert_eq!(
                    t.data, was.data,
                    "{} must not change in the encoder adversarial update",
                    name
                );
            }
        }
        assert!(encoder_changed);
    }

    #[test]
    fn frozen_critic_with_zero_lambda_matches_the_no_adversary_run() {
        let cfg = tiny_cfg(2);
        let (windows, partition, prior) = fixture(2, 3.0, &cfg, 11);
        let base = TrainConfig {
            epochs: 3,
            batch_size: 4,
            seed: 11,
            ..TrainConfig::default()
        };
        let off = TrainConfig { adversary: AdversaryMode::Off, ..base.clone() };
        let frozen =
            TrainConfig { adversary: AdversaryMode::Frozen, gp_lambda: 0.0, ..base };
        let a = train(&windows, &partition, &prior, &cfg, &off).unwrap();
        let b = train(&windows, &partition, &prior, &cfg, &frozen).unwrap();
        assert_eq!(a.params, b.params, "frozen adversary must not disturb stage 1");
        for (ra, rb) in a.history.iter().zip(&b.history) {
            assert_eq!(ra.l_c, rb.l_c);
            assert_eq!(ra.l_r, rb.l_r);
            assert_eq!(ra.l, rb.l);
            assert_eq!(ra.val_l, rb.val_l);
        }
        // The frozen run still reports a Wasserstein estimate.
        assert!(b.history.iter().any(|r| r.l_d != 0.0));
        assert!(a.history.iter().all(|r| r.l_d == 0.0));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact_and_revalidates() {
        let cfg = tiny_cfg(2);
        let (windows, partition, prior) = fixture(2, 3.0, &cfg, 12);
        let tc = TrainConfig { epochs: 2, batch_size: 4, seed: 12, ..TrainConfig::default() };
        let ckpt = train(&windows, &partition, &prior, &cfg, &tc).unwrap();
        let val_before =
            evaluate_known(&ckpt.params, &cfg, &prior, &windows, &partition.val_idx, 4).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &ckpt).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert!(loaded.model == ckpt.model, "model config changed across the round trip");
        assert!(loaded.prior == ckpt.prior, "prior changed across the round trip");
        assert!(loaded.train == ckpt.train, "train config changed across the round trip");
        assert_eq!(loaded.epoch, ckpt.epoch);
        assert_eq!(loaded.history, ckpt.history);
        assert_eq!(
            loaded.params.tensors.keys().collect::<Vec<_>>(),
            ckpt.params.tensors.keys().collect::<Vec<_>>()
        );
        for (name, t) in &ckpt.params.tensors {
            let l = &loaded.params.tensors[name];
            assert!(l.shape == t.shape && l.data == t.data, "tensor {} not bit-exact", name);
        }
        assert_eq!(
            loaded.params.bn.keys().collect::<Vec<_>>(),
            ckpt.params.bn.keys().collect::<Vec<_>>()
        );
        for (name, s) in &ckpt.params.bn {
            let l = &loaded.params.bn[name];
            assert!(l.mean == s.mean && l.var == s.var, "bn stats {} not bit-exact", name);
        }
        let val_after = evaluate_known(
            &loaded.params, &loaded.model, &loaded.prior, &windows, &partition.val_idx, 4,
        )
        .unwrap();
        assert!((val_before.l - val_after.l).abs() <= 1e-6);

        // Corrupt magic.
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        let bad = dir.path().join("bad.ckpt");
        std::fs::write(&bad, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&bad), Err(TrainError::BadMagic)));

        // Future version.
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 99;
        std::fs::write(&bad, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&bad), Err(TrainError::BadVersion(99))));

        // Truncated payload.
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&bad, &bytes[..bytes.len() / 2]).unwrap();
        assert!(load_checkpoint(&bad).is_err());

        // A store from a different architecture fails validation.
        let other = init_params(&tiny_cfg(3), 0);
        assert!(validate_store(&other, &cfg).is_err());
    }

    #[test]
    fn divergence_guard_names_the_batch() {
        let cfg = tiny_cfg(2);
        let (mut windows, partition, prior) = fixture(2, 3.0, &cfg, 13);
        let first_train = partition.train_idx[0];
        windows[first_train].data[3] = f64::NAN;
        let tc = TrainConfig { epochs: 1, batch_size: 64, seed: 13, ..TrainConfig::default() };
        match train(&windows, &partition, &prior, &cfg, &tc) {
            Err(TrainError::Diverged { epoch, .. }) => assert_eq!(epoch, 0),
            other => panic!("expected divergence, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn training_curve_csv_round_trips_by_column() {
        let history = vec![
            CurveRow { epoch: 0, l_c: 1.5, l_r: 0.25, l: 1.75, l_d: -0.1, val_l: 1.8,
                val_accuracy: 0.5 },
            CurveRow { epoch: 1, l_c: 1.0, l_r: 0.2, l: 1.2, l_d: -0.2, val_l: 1.4,
                val_accuracy: 0.75 },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("curve.csv");
        write_training_curve(&path, &history).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "epoch,L_C,L_R,L,L_D,val_L,val_accuracy");
        let row: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(row[0], "0");
        assert_eq!(row[1].parse::<f64>().unwrap(), 1.5);
        assert_eq!(row[6].parse::<f64>().unwrap(), 0.5);
        assert_eq!(lines.count(), 1);
    }
}
