//! Training criteria: cross-entropy, sequence Chamfer distance, their
//! unweighted sum, the Wasserstein critic loss with gradient penalty, and the
//! encoder's adversarial term.
//!
//! Each criterion exists in two forms where useful: a pure scalar reference
//! (used for reporting and as an oracle) and a tape-level builder that
//! produces a differentiable node.

use crate::model::Forward;
use crate::tensor::TensorId;
use rand::Rng;
use thiserror::Error;

/// Gradient-penalty weight default.
pub const DEFAULT_GP_LAMBDA: f64 = 15.0;
/// Probability floor inside logarithms.
pub const LOG_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("length mismatch: prediction {pred} vs target {target}")]
    LengthMismatch { pred: usize, target: usize },
    #[error("frame count mismatch: {0} vs {1}")]
    FrameCountMismatch(usize, usize),
    #[error("empty point set in frame {0}")]
    EmptyFrame(usize),
}

/// Scalar loss values for one batch, as reported on training curves.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossReport {
    pub l_c: f64,
    pub l_r: f64,
    pub l: f64,
    pub l_d: f64,
    pub gp_term: f64,
}

/// Cross-entropy between one probability vector and a one-hot target:
/// −Σ y·log(pred), log clamped at 1e-12.
pub fn cross_entropy(pred: &[f64], y: &[f64]) -> Result<f64, LossError> {
    if pred.len() != y.len() {
        return Err(LossError::LengthMismatch { pred: pred.len(), target: y.len() });
    }
    Ok(-pred
        .iter()
        .zip(y)
        .map(|(&p, &t)| t * p.max(LOG_EPS).ln())
        .sum::<f64>())
}

/// Unweighted first-stage objective.
pub fn joint_loss(l_c: f64, l_r: f64) -> f64 {
    l_c + l_r
}

/// Mean over frames of the symmetric sum of squared nearest-neighbour
/// distances between two point-set sequences (points in R⁴, per-frame point
/// counts may differ between the sequences).
pub fn chamfer_sequence(
    x: &[Vec<[f64; 4]>],
    x_hat: &[Vec<[f64; 4]>],
) -> Result<f64, LossError> {
    if x.len() != x_hat.len() {
        return Err(LossError::FrameCountMismatch(x.len(), x_hat.len()));
    }
    if x.is_empty() {
        return Err(LossError::FrameCountMismatch(0, 0));
    }
    let mut total = 0.0;
    for (fi, (fx, fh)) in x.iter().zip(x_hat).enumerate() {
        if fx.is_empty() || fh.is_empty() {
            return Err(LossError::EmptyFrame(fi));
        }
        let nearest = |a: &[f64; 4], set: &[[f64; 4]]| -> f64 {
            set.iter()
                .map(|b| {
                    (0..4).map(|c| (a[c] - b[c]) * (a[c] - b[c])).sum::<f64>()
                })
                .fold(f64::INFINITY, f64::min)
        };
        let fwd: f64 = fx.iter().map(|p| nearest(p, fh)).sum();
        let bwd: f64 = fh.iter().map(|p| nearest(p, fx)).sum();
        total += fwd + bwd;
    }
    Ok(total / x.len() as f64)
}

/// Batch cross-entropy as a tape node: mean over rows of −Σ y·ln(p).
/// `probs` is `[b, m]` (rows sum to 1); `onehot` is constant `[b, m]` data.
pub fn cross_entropy_batch(fwd: &mut Forward, probs: TensorId, onehot: &[f64]) -> TensorId {
    let shape = fwd.tape.shape(probs).to_vec();
    assert_eq!(shape.len(), 2, "cross_entropy_batch: probs must be 2-D");
    assert_eq!(onehot.len(), shape[0] * shape[1], "cross_entropy_batch: target size mismatch");
    let y = fwd.tape.constant(onehot.to_vec(), &shape);
    let logp = fwd.tape.ln_clamped(probs, LOG_EPS);
    let picked = fwd.tape.mul(y, logp);
    let per_row = fwd.tape.sum_axis1(picked);
    let mean = fwd.tape.mean_all(per_row);
    fwd.tape.scale(mean, -1.0)
}

/// Wasserstein critic loss with gradient penalty, as tape nodes.
///
/// `z_enc` is the encoder's latent batch `[b, k]` (detach it for critic
/// updates); `z_star` is the matching batch of prior samples (a constant
/// node for a fixed prior, or a live node when the prior itself is learned);
/// `onehot` is the shared `[b, m]` label block — the same label conditions
/// the encoder latent, the prior sample, and the interpolate of a pair.
/// Returns `(loss, penalty)` where
/// loss = mean D(z‖y) − mean D(z*‖y) + λ·mean[(‖∇_ẑ D(ẑ‖y)‖₂ − 1)²]
/// and each ẑ = t·z + (1−t)·z* with its own t ~ U(0,1). The penalty
/// gradient is taken with respect to the latent interpolate (the label block
/// is a constant switch, not a variable).
pub fn wgan_gp_critic_loss(
    fwd: &mut Forward,
    z_enc: TensorId,
    z_star: TensorId,
    onehot: &[f64],
    lambda: f64,
    rng: &mut impl Rng,
) -> Result<(TensorId, TensorId), crate::model::ModelError> {
    let shape = fwd.tape.shape(z_enc).to_vec();
    let (b, k) = (shape[0], shape[1]);
    assert_eq!(
        fwd.tape.shape(z_star),
        &[b, k],
        "wgan_gp_critic_loss: prior batch shape mismatch"
    );
    let m = onehot.len() / b;
    assert_eq!(onehot.len(), b * m, "wgan_gp_critic_loss: label block size mismatch");

    let oh = fwd.tape.constant(onehot.to_vec(), &[b, m]);
    let zc_enc = fwd.tape.concat_cols(&[z_enc, oh]);
    let d_enc = fwd.discriminate(zc_enc)?;
    let mean_enc = fwd.tape.mean_all(d_enc);

    let zc_star = fwd.tape.concat_cols(&[z_star, oh]);
    let d_star = fwd.discriminate(zc_star)?;
    let mean_star = fwd.tape.mean_all(d_star);

    // Interpolates along the line between each pair, one t per pair. Built
    // as data (the interpolation point is a sampling choice, not a function
    // being differentiated) and re-entered as a gradient leaf.
    let z_data = fwd.tape.data(z_enc).to_vec();
    let z_prior = fwd.tape.data(z_star).to_vec();
    let mut z_hat = vec![0.0; b * k];
    for i in 0..b {
        let t: f64 = rng.gen_range(0.0..1.0);
        for j in 0..k {
            z_hat[i * k + j] = t * z_data[i * k + j] + (1.0 - t) * z_prior[i * k + j];
        }
    }
    let zh = fwd.tape.leaf(z_hat, &[b, k], true);
    let zc_hat = fwd.tape.concat_cols(&[zh, oh]);
    let d_hat = fwd.discriminate(zc_hat)?;
    let g = fwd.tape.grad_of(d_hat, zh);
    let g2 = fwd.tape.mul(g, g);
    let sq = fwd.tape.sum_axis1(g2);
    let norms = fwd.tape.sqrt(sq);
    let ones = fwd.tape.constant(vec![1.0; b], &[b, 1]);
    let dev = fwd.tape.sub(norms, ones);
    let dev2 = fwd.tape.mul(dev, dev);
    let penalty = fwd.tape.mean_all(dev2);

    let gap = fwd.tape.sub(mean_enc, mean_star);
    let scaled = fwd.tape.scale(penalty, lambda);
    Ok((fwd.tape.add(gap, scaled), penalty))
}

/// Encoder adversarial term: −mean D(z‖y). Built on the undetached latent so
/// gradients reach the encoder; the optimizer's parameter grouping keeps the
/// critic itself fixed during this update.
pub fn encoder_adversarial_loss(
    fwd: &mut Forward,
    z_enc: TensorId,
    onehot: &[f64],
) -> Result<TensorId, crate::model::ModelError> {
    let shape = fwd.tape.shape(z_enc).to_vec();
    let b = shape[0];
    let m = onehot.len() / b;
    assert_eq!(onehot.len(), b * m, "encoder_adversarial_loss: label block size mismatch");
    let oh = fwd.tape.constant(onehot.to_vec(), &[b, m]);
    let zc = fwd.tape.concat_cols(&[z_enc, oh]);
    let d = fwd.discriminate(zc)?;
    let m = fwd.tape.mean_all(d);
    Ok(fwd.tape.scale(m, -1.0))
}
