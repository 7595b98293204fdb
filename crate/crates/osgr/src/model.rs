//! The gait recognition network: a point-cloud encoder (shared per-point MLP
//! blocks + dilated causal temporal convolutions), a decoder and classifier
//! fed through small projection heads, and a conditional critic.
//!
//! All four passes are free of internal state: parameters live in a
//! [`ParamStore`] and are leafed onto a caller-supplied tape per forward, so
//! one training step can mix passes on a single tape while inference uses a
//! throwaway tape per batch.

use crate::data::{WindowedSequence, FEATURES};
use crate::tensor::{BnMode, Tape, TensorId};
use indexmap::IndexMap;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use thiserror::Error;

/// Batch-norm epsilon.
pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("decoder is disabled in this configuration")]
    DecoderDisabled,
    #[error("centroid-map network is disabled in this configuration")]
    CentroidMapDisabled,
    #[error("invalid model configuration: {0}")]
    BadConfig(String),
    #[error("missing parameter tensor {0}")]
    MissingParam(String),
}

/// Full architectural description. Widths scale together via
/// [`ModelConfig::desk_scale`]; the decoder's final width is always pinned to
/// the flattened reconstruction size 4·n_frames·n_points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_points: usize,
    pub n_frames: usize,
    pub pointnet_widths: [usize; 4],
    pub temporal_filters: [usize; 6],
    pub dilations: [usize; 6],
    pub latent_dim: usize,
    pub head_width: usize,
    pub decoder_widths: [usize; 5],
    pub discriminator_widths: Vec<usize>,
    pub n_classes: usize,
    /// Ablation: map one-hot labels to mode centers with a small MLP instead
    /// of fixed placements.
    pub learned_centroids: bool,
    /// Ablation: when false the classifier reads z directly (no 64-unit head).
    pub use_projection_heads: bool,
    /// Ablation: when false the decoder (and reconstruction loss) is absent.
    pub use_decoder: bool,
    pub scale_factor: f64,
}

impl ModelConfig {
    /// Full-size configuration.
    pub fn paper_default(n_classes: usize) -> ModelConfig {
        let n_points = 150;
        let n_frames = 30;
        ModelConfig {
            n_points,
            n_frames,
            pointnet_widths: [512, 512, 512, 1024],
            temporal_filters: [16, 32, 64, 128, 256, 512],
            dilations: [1, 2, 4, 1, 2, 4],
            latent_dim: 32,
            head_width: 64,
            decoder_widths: [1125, 2250, 4500, 9000, 4 * n_frames * n_points],
            discriminator_widths: vec![128, 64],
            n_classes,
            learned_centroids: false,
            use_projection_heads: true,
            use_decoder: true,
            scale_factor: 1.0,
        }
    }

    /// Shrink every width by `factor` (minimum 1) and swap in the given
    /// window geometry; shape contracts are preserved, in particular the
    /// decoder still emits exactly 4·n_frames·n_points values.
    pub fn desk_scale(
        factor: f64,
        n_classes: usize,
        n_frames: usize,
        n_points: usize,
    ) -> ModelConfig {
        assert!(factor > 0.0 && factor <= 1.0, "scale factor must be in (0, 1]");
        let s = |w: usize| -> usize { ((w as f64 * factor).round() as usize).max(1) };
        let base = ModelConfig::paper_default(n_classes);
        let out = 4 * n_frames * n_points;
        let dw = |frac: f64| -> usize { ((out as f64 * factor * frac).round() as usize).max(1) };
        ModelConfig {
            n_points,
            n_frames,
            pointnet_widths: base.pointnet_widths.map(s),
            temporal_filters: base.temporal_filters.map(s),
            dilations: base.dilations,
            latent_dim: s(base.latent_dim).max(2),
            head_width: s(base.head_width),
            decoder_widths: [
                dw(1.0 / 16.0),
                dw(1.0 / 8.0),
                dw(1.0 / 4.0),
                dw(1.0 / 2.0),
                out,
            ],
            discriminator_widths: base.discriminator_widths.iter().map(|&w| s(w)).collect(),
            n_classes,
            learned_centroids: false,
            use_projection_heads: true,
            use_decoder: true,
            scale_factor: factor,
        }
    }

    /// Flattened reconstruction length.
    pub fn recon_len(&self) -> usize {
        4 * self.n_frames * self.n_points
    }

    /// Width of the classifier/decoder input after the optional head.
    fn head_out(&self) -> usize {
        if self.use_projection_heads {
            self.head_width
        } else {
            self.latent_dim
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |what: &str| Err(ModelError::BadConfig(what.to_string()));
        if self.n_points == 0 || self.n_frames == 0 {
            return bad("window geometry must be nonzero");
        }
        if self.latent_dim < 2 {
            return bad("latent dimension must be at least 2");
        }
        if self.n_classes < 2 {
            return bad("need at least 2 known classes");
        }
        if self.pointnet_widths.iter().any(|&w| w == 0)
            || self.temporal_filters.iter().any(|&w| w == 0)
            || self.decoder_widths.iter().any(|&w| w == 0)
            || self.head_width == 0
        {
            return bad("all layer widths must be nonzero");
        }
        if self.dilations.iter().any(|&d| d == 0) {
            return bad("dilations must be at least 1");
        }
        if self.decoder_widths[4] != self.recon_len() {
            return bad("final decoder width must equal 4·n_frames·n_points");
        }
        if !(self.scale_factor > 0.0) {
            return bad("scale factor must be positive");
        }
        Ok(())
    }
}

/// Running batch-norm statistics for one normalization layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// One named parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamTensor {
    pub data: Vec<f64>,
    pub shape: Vec<usize>,
}

/// All trainable tensors plus batch-norm running statistics, keyed by
/// hierarchical names (`enc.pointnet.0.w`, `disc.out.b`, ...). Insertion
/// order is the canonical serialization order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    pub tensors: IndexMap<String, ParamTensor>,
    pub bn: IndexMap<String, BnStats>,
}

impl ParamStore {
    pub fn total_parameters(&self) -> usize {
        self.tensors.values().map(|t| t.data.len()).sum()
    }

    pub fn get(&self, name: &str) -> Result<&ParamTensor, ModelError> {
        self.tensors.get(name).ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    fn add(&mut self, name: &str, data: Vec<f64>, shape: Vec<usize>) {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        self.tensors.insert(name.to_string(), ParamTensor { data, shape });
    }
}

/// A batch-norm update produced by a train-mode forward: the batch moments
/// the trainer folds into the running statistics.
#[derive(Debug, Clone)]
pub struct BnUpdate {
    pub name: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Architectural parameter inventory for `cfg`: (name, shape, fan_in) for
/// every trainable tensor, in the canonical creation/serialization order.
/// fan_in is 0 for batch-norm scale/shift tensors (they have fixed inits).
pub fn parameter_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, usize)> {
    let mut out: Vec<(String, Vec<usize>, usize)> = Vec::new();
    let linear = |out: &mut Vec<(String, Vec<usize>, usize)>,
                  name: &str, fan_in: usize, fan_out: usize| {
        out.push((format!("{}.w", name), vec![fan_in, fan_out], fan_in));
        out.push((format!("{}.b", name), vec![1, fan_out], fan_in));
    };
    let bn = |out: &mut Vec<(String, Vec<usize>, usize)>, name: &str, c: usize| {
        out.push((format!("{}.gamma", name), vec![1, c], 0));
        out.push((format!("{}.beta", name), vec![1, c], 0));
    };

    // Encoder: per-point MLP blocks.
    let mut c_in = FEATURES;
    for (i, &w) in cfg.pointnet_widths.iter().enumerate() {
        let name = format!("enc.pointnet.{}", i);
        linear(&mut out, &name, c_in, w);
        bn(&mut out, &format!("{}.bn", name), w);
        c_in = w;
    }
    // Encoder: dilated causal convolutions, three taps each. Fan-in of a
    // kernel-3 convolution counts all taps.
    for (i, &w) in cfg.temporal_filters.iter().enumerate() {
        let name = format!("enc.temporal.{}", i);
        let fan = 3 * c_in;
        for t in 0..3 {
            out.push((format!("{}.tap{}", name, t), vec![c_in, w], fan));
        }
        out.push((format!("{}.b", name), vec![1, w], fan));
        bn(&mut out, &format!("{}.bn", name), w);
        c_in = w;
    }
    linear(&mut out, "enc.out", c_in, cfg.latent_dim);

    if cfg.use_decoder {
        // The reconstruction projection head comes and goes together with
        // the classification one; without it the decoder reads z directly.
        if cfg.use_projection_heads {
            linear(&mut out, "dec.head", cfg.latent_dim, cfg.head_width);
        }
        let mut d_in = cfg.head_out();
        for (i, &w) in cfg.decoder_widths.iter().enumerate() {
            linear(&mut out, &format!("dec.mlp.{}", i), d_in, w);
            d_in = w;
        }
    }

    if cfg.use_projection_heads {
        linear(&mut out, "cls.head", cfg.latent_dim, cfg.head_width);
    }
    linear(&mut out, "cls.out", cfg.head_out(), cfg.n_classes);

    let mut d_in = cfg.latent_dim + cfg.n_classes;
    for (i, &w) in cfg.discriminator_widths.iter().enumerate() {
        linear(&mut out, &format!("disc.{}", i), d_in, w);
        d_in = w;
    }
    linear(&mut out, "disc.out", d_in, 1);

    if cfg.learned_centroids {
        let mut m_in = cfg.n_classes;
        for (i, &w) in [16usize, 32, 64].iter().enumerate() {
            let w = ((w as f64 * cfg.scale_factor).round() as usize).max(1);
            linear(&mut out, &format!("cmap.{}", i), m_in, w);
            m_in = w;
        }
        linear(&mut out, "cmap.out", m_in, cfg.latent_dim);
    }

    out
}

/// Batch-norm layer names and channel counts, in canonical order.
pub fn bn_layers(cfg: &ModelConfig) -> Vec<(String, usize)> {
    let mut out = Vec::new();
    for (i, &w) in cfg.pointnet_widths.iter().enumerate() {
        out.push((format!("enc.pointnet.{}.bn", i), w));
    }
    for (i, &w) in cfg.temporal_filters.iter().enumerate() {
        out.push((format!("enc.temporal.{}.bn", i), w));
    }
    out
}

fn uniform_fan_in(rng: &mut impl Rng, fan_in: usize, len: usize) -> Vec<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    (0..len).map(|_| rng.gen_range(-bound..bound)).collect()
}

/// Initialize all parameters for `cfg`: weights and biases uniform in
/// ±1/√fan_in, batch-norm gamma 1 / beta 0, running stats (0, 1).
/// Deterministic in `seed`; tensor creation order is fixed.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> ParamStore {
    let mut rng = crate::seeds::rng_for(seed, "init");
    let mut store = ParamStore::default();
    for (name, shape, fan_in) in parameter_shapes(cfg) {
        let len = shape.iter().product();
        let data = if name.ends_with(".gamma") {
            vec![1.0; len]
        } else if name.ends_with(".beta") {
            vec![0.0; len]
        } else {
            uniform_fan_in(&mut rng, fan_in, len)
        };
        store.add(&name, data, shape);
    }
    for (name, c) in bn_layers(cfg) {
        store.bn.insert(name, BnStats { mean: vec![0.0; c], var: vec![1.0; c] });
    }
    store
}

/// One forward-pass context: binds a tape, a parameter snapshot, and a
/// batch-norm mode. Parameters are leafed onto the tape lazily and cached by
/// name, so every use of a tensor within the tape shares one leaf and
/// gradients accumulate there.
pub struct Forward<'a> {
    pub tape: &'a mut Tape,
    store: &'a ParamStore,
    pub cfg: &'a ModelConfig,
    mode: BnMode,
    trainable: bool,
    /// Batch moments recorded by train-mode normalization layers, in
    /// encounter order; the trainer folds them into running statistics.
    pub bn_updates: Vec<BnUpdate>,
    leaves: HashMap<String, TensorId>,
}

impl<'a> Forward<'a> {
    pub fn new(
        tape: &'a mut Tape,
        store: &'a ParamStore,
        cfg: &'a ModelConfig,
        mode: BnMode,
    ) -> Forward<'a> {
        let trainable = mode == BnMode::Train;
        Forward { tape, store, cfg, mode, trainable, bn_updates: Vec::new(), leaves: HashMap::new() }
    }

    /// Leaf a named parameter onto the tape (cached per name).
    pub fn param(&mut self, name: &str) -> TensorId {
        if let Some(&id) = self.leaves.get(name) {
            return id;
        }
        let t = self.store.get(name).unwrap_or_else(|e| panic!("{}", e));
        let id = self.tape.leaf(t.data.clone(), &t.shape, self.trainable);
        self.leaves.insert(name.to_string(), id);
        id
    }

    /// Parameter leaves touched so far, in store order, for optimizer sweeps.
    pub fn touched_leaves(&self) -> Vec<(String, TensorId)> {
        self.store
            .tensors
            .keys()
            .filter_map(|name| self.leaves.get(name).map(|&id| (name.clone(), id)))
            .collect()
    }

    fn linear(&mut self, x: TensorId, name: &str) -> TensorId {
        let w = self.param(&format!("{}.w", name));
        let b = self.param(&format!("{}.b", name));
        let y = self.tape.matmul(x, w);
        self.tape.add_bias_row(y, b)
    }

    fn batch_norm(&mut self, x: TensorId, name: &str) -> TensorId {
        match self.mode {
            BnMode::Train => {
                let gamma = self.param(&format!("{}.gamma", name));
                let beta = self.param(&format!("{}.beta", name));
                let (y, mean, var) = self.tape.batch_norm_train(x, gamma, beta, BN_EPS);
                self.bn_updates.push(BnUpdate { name: name.to_string(), mean, var });
                y
            }
            BnMode::Eval => {
                let gamma = &self.store.get(&format!("{}.gamma", name)).unwrap().data;
                let beta = &self.store.get(&format!("{}.beta", name)).unwrap().data;
                let stats = self
                    .store
                    .bn
                    .get(name)
                    .unwrap_or_else(|| panic!("missing batch-norm stats for {}", name));
                self.tape.batch_norm_eval(x, gamma, beta, &stats.mean, &stats.var, BN_EPS)
            }
        }
    }

    /// Encode a batch of windows into latent vectors.
    ///
    /// `x` is `[b·n_frames·n_points, 4]` (points as rows, frames and samples
    /// stacked). Per-point MLP blocks lift each point; average pooling over
    /// each frame's points gives one feature per frame; six dilated causal
    /// convolutions (kernel 3) plus time pooling and a linear layer give
    /// z ∈ R^latent_dim per sample. Returns `[b, latent_dim]`.
    pub fn encode(&mut self, x: TensorId, b: usize) -> Result<TensorId, ModelError> {
        let shape = self.tape.shape(x).to_vec();
        let rows = b * self.cfg.n_frames * self.cfg.n_points;
        if shape != [rows, FEATURES] {
            return Err(ModelError::ShapeMismatch {
                expected: format!("[{}, {}]", rows, FEATURES),
                got: format!("{:?}", shape),
            });
        }
        let mut h = x;
        for i in 0..4 {
            let name = format!("enc.pointnet.{}", i);
            h = self.linear(h, &name);
            h = self.batch_norm(h, &format!("{}.bn", name));
            h = self.tape.elu(h);
        }
        // Frame feature: average over the point axis.
        h = self.tape.mean_grouped_rows(h, self.cfg.n_points);
        for i in 0..6 {
            let name = format!("enc.temporal.{}", i);
            let taps = [
                self.param(&format!("{}.tap0", name)),
                self.param(&format!("{}.tap1", name)),
                self.param(&format!("{}.tap2", name)),
            ];
            let bias = self.param(&format!("{}.b", name));
            h = self.tape.conv1d_dilated_causal(
                h,
                b,
                self.cfg.n_frames,
                &taps,
                bias,
                self.cfg.dilations[i],
            );
            h = self.batch_norm(h, &format!("{}.bn", name));
            h = self.tape.elu(h);
        }
        // Pre-latent sequence summary: average over time.
        let pooled = self.tape.mean_grouped_rows(h, self.cfg.n_frames);
        Ok(self.linear(pooled, "enc.out"))
    }

    /// As [`Forward::encode`] but also returns the pre-pooling temporal
    /// activations `[b·n_frames, c]` (used to check causality).
    pub fn encode_with_temporal(
        &mut self,
        x: TensorId,
        b: usize,
    ) -> Result<(TensorId, TensorId), ModelError> {
        let shape = self.tape.shape(x).to_vec();
        let rows = b * self.cfg.n_frames * self.cfg.n_points;
        if shape != [rows, FEATURES] {
            return Err(ModelError::ShapeMismatch {
                expected: format!("[{}, {}]", rows, FEATURES),
                got: format!("{:?}", shape),
            });
        }
        let mut h = x;
        for i in 0..4 {
            let name = format!("enc.pointnet.{}", i);
            h = self.linear(h, &name);
            h = self.batch_norm(h, &format!("{}.bn", name));
            h = self.tape.elu(h);
        }
        h = self.tape.mean_grouped_rows(h, self.cfg.n_points);
        for i in 0..6 {
            let name = format!("enc.temporal.{}", i);
            let taps = [
                self.param(&format!("{}.tap0", name)),
                self.param(&format!("{}.tap1", name)),
                self.param(&format!("{}.tap2", name)),
            ];
            let bias = self.param(&format!("{}.b", name));
            h = self.tape.conv1d_dilated_causal(
                h,
                b,
                self.cfg.n_frames,
                &taps,
                bias,
                self.cfg.dilations[i],
            );
            h = self.batch_norm(h, &format!("{}.bn", name));
            h = self.tape.elu(h);
        }
        let pooled = self.tape.mean_grouped_rows(h, self.cfg.n_frames);
        let z = self.linear(pooled, "enc.out");
        Ok((h, z))
    }

    /// Decode latent vectors into flattened reconstructions
    /// `[b, 4·n_frames·n_points]`, laid out channel-major per sample.
    pub fn decode(&mut self, z: TensorId) -> Result<TensorId, ModelError> {
        if !self.cfg.use_decoder {
            return Err(ModelError::DecoderDisabled);
        }
        self.expect_latent(z)?;
        let mut h = z;
        if self.cfg.use_projection_heads {
            h = self.linear(h, "dec.head");
            h = self.tape.elu(h);
        }
        for i in 0..5 {
            h = self.linear(h, &format!("dec.mlp.{}", i));
            if i < 4 {
                h = self.tape.elu(h);
            }
        }
        Ok(h)
    }

    /// Classify latent vectors: probability rows over the known classes.
    pub fn classify(&mut self, z: TensorId) -> Result<TensorId, ModelError> {
        self.expect_latent(z)?;
        let mut h = z;
        if self.cfg.use_projection_heads {
            h = self.linear(h, "cls.head");
            h = self.tape.elu(h);
        }
        let logits = self.linear(h, "cls.out");
        Ok(self.tape.softmax_rows(logits))
    }

    /// Critic value for latent‖one-hot rows `[b, latent_dim + n_classes]`.
    /// Unbounded scalar per row; no normalization layers anywhere.
    pub fn discriminate(&mut self, zc: TensorId) -> Result<TensorId, ModelError> {
        let shape = self.tape.shape(zc).to_vec();
        let want = self.cfg.latent_dim + self.cfg.n_classes;
        if shape.len() != 2 || shape[1] != want {
            return Err(ModelError::ShapeMismatch {
                expected: format!("[b, {}]", want),
                got: format!("{:?}", shape),
            });
        }
        let mut h = zc;
        for i in 0..self.cfg.discriminator_widths.len() {
            h = self.linear(h, &format!("disc.{}", i));
            h = self.tape.elu(h);
        }
        Ok(self.linear(h, "disc.out"))
    }

    /// Learned-centroid ablation: map one-hot label rows `[b, n_classes]` to
    /// mode centers `[b, latent_dim]`.
    pub fn centroid_map(&mut self, onehot: TensorId) -> Result<TensorId, ModelError> {
        if !self.cfg.learned_centroids {
            return Err(ModelError::CentroidMapDisabled);
        }
        let shape = self.tape.shape(onehot).to_vec();
        if shape.len() != 2 || shape[1] != self.cfg.n_classes {
            return Err(ModelError::ShapeMismatch {
                expected: format!("[b, {}]", self.cfg.n_classes),
                got: format!("{:?}", shape),
            });
        }
        let mut h = onehot;
        for i in 0..3 {
            h = self.linear(h, &format!("cmap.{}", i));
            h = self.tape.elu(h);
        }
        Ok(self.linear(h, "cmap.out"))
    }

    fn expect_latent(&self, z: TensorId) -> Result<(), ModelError> {
        let shape = self.tape.shape(z);
        if shape.len() != 2 || shape[1] != self.cfg.latent_dim {
            return Err(ModelError::ShapeMismatch {
                expected: format!("[b, {}]", self.cfg.latent_dim),
                got: format!("{:?}", shape),
            });
        }
        Ok(())
    }
}

/// Stack windows into the flat `[b·n_frames·n_points, 4]` row layout the
/// encoder consumes. The same buffer doubles as the `[b, f, p, 4]` Chamfer
/// target.
pub fn batch_matrix(
    windows: &[&WindowedSequence],
    cfg: &ModelConfig,
) -> Result<Vec<f64>, ModelError> {
    let mut out = Vec::with_capacity(windows.len() * cfg.n_frames * cfg.n_points * FEATURES);
    for w in windows {
        if w.n_frames != cfg.n_frames || w.n_points != cfg.n_points {
            return Err(ModelError::ShapeMismatch {
                expected: format!("window [{}, {}, 4]", cfg.n_frames, cfg.n_points),
                got: format!("window [{}, {}, 4]", w.n_frames, w.n_points),
            });
        }
        out.extend_from_slice(&w.data);
    }
    Ok(out)
}

/// One-hot encode class indices into `[b, n_classes]` rows.
pub fn one_hot(class_indices: &[usize], n_classes: usize) -> Vec<f64> {
    let mut out = vec![0.0; class_indices.len() * n_classes];
    for (i, &c) in class_indices.iter().enumerate() {
        assert!(c < n_classes, "class index {} out of range {}", c, n_classes);
        out[i * n_classes + c] = 1.0;
    }
    out
}
