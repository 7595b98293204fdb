//! Fixed Gaussian-mixture latent prior with one unit-covariance mode per
//! known subject, modes centered on a hypersphere with a minimum pairwise
//! separation. The mixture serves two roles: its per-subject modes are the
//! sampling targets for adversarial regularization, and its overall density
//! is the novelty score for open-set detection.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PriorError {
    #[error("centroid placement failed: best separation {best:.4} < required {required:.4} after {iterations} iterations")]
    PlacementFailed { best: f64, required: f64, iterations: usize },
    #[error("subject {0} has no centroid assigned")]
    UnknownSubject(u32),
    #[error("label map must cover exactly the {expected} centroids, got {got} subjects")]
    BadLabelMap { expected: usize, got: usize },
}

/// Immutable mixture prior: M centroids in R^K on a radius-R sphere, at
/// least `min_separation` apart, plus the subject-to-centroid bijection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CentroidPrior {
    pub centroids: Vec<Vec<f64>>,
    pub radius: f64,
    pub min_separation: f64,
    /// Bijection subject id -> centroid index, sorted by subject id.
    pub label_map: Vec<(u32, usize)>,
    pub seed: u64,
}

pub const DEFAULT_RADIUS: f64 = 10.0;
pub const DEFAULT_MIN_SEPARATION: f64 = 10.0;
const PLACEMENT_BUDGET: usize = 10_000;

/// Deterministically place `m` centroids in R^k on the radius-`r` sphere
/// with pairwise separation at least `d_min`.
///
/// Two points get the exact antipodal optimum. Larger configurations start
/// from uniform sphere samples and run repulsion iterations (inverse-square
/// pair forces, re-projected onto the sphere) until the separation
/// constraint holds or the iteration budget expires.
pub fn place_centroids(
    m: usize,
    k: usize,
    r: f64,
    d_min: f64,
    seed: u64,
) -> Result<CentroidPrior, PriorError> {
    assert!(m >= 1, "place_centroids: need at least one centroid");
    assert!(k >= 1, "place_centroids: latent dimension must be positive");
    assert!(r > 0.0 && d_min > 0.0, "place_centroids: radius and separation must be positive");

    let mut rng = crate::seeds::rng_for(seed, "centroid-placement");
    let mut pts: Vec<Vec<f64>> = (0..m).map(|_| sphere_point(&mut rng, k, r)).collect();

    if m == 2 {
        // Antipodal pair: separation exactly 2r, optimal for two points.
        pts[1] = pts[0].iter().map(|v| -v).collect();
    }

    let mut best = min_separation(&pts);
    let mut iterations = 0usize;
    let step = 0.05 * r;
    while best < d_min && iterations < PLACEMENT_BUDGET {
        repel_once(&mut pts, r, step);
        best = min_separation(&pts);
        iterations += 1;
    }
    if best < d_min {
        return Err(PriorError::PlacementFailed { best, required: d_min, iterations });
    }

    let label_map = (0..m).map(|i| (i as u32, i)).collect();
    Ok(CentroidPrior { centroids: pts, radius: r, min_separation: d_min, label_map, seed })
}

fn sphere_point(rng: &mut impl Rng, k: usize, r: f64) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..k).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let n = norm(&v);
        if n > 1e-9 {
            return v.iter().map(|x| x * r / n).collect();
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn min_separation(pts: &[Vec<f64>]) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            let d: f64 = pts[i]
                .iter()
                .zip(&pts[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            best = best.min(d);
        }
    }
    best
}

/// One repulsion sweep: each point moves along the sum of inverse-square
/// forces from all others, then is re-projected onto the sphere.
fn repel_once(pts: &mut [Vec<f64>], r: f64, step: f64) {
    let m = pts.len();
    let k = pts[0].len();
    let mut forces = vec![vec![0.0; k]; m];
    for i in 0..m {
        for j in 0..m {
            if i == j {
                continue;
            }
            let mut diff = vec![0.0; k];
            let mut d2 = 0.0;
            for c in 0..k {
                diff[c] = pts[i][c] - pts[j][c];
                d2 += diff[c] * diff[c];
            }
            let d = d2.sqrt().max(1e-9);
            for c in 0..k {
                forces[i][c] += diff[c] / (d * d * d);
            }
        }
    }
    for i in 0..m {
        let fnorm = norm(&forces[i]).max(1e-12);
        for c in 0..k {
            pts[i][c] += step * forces[i][c] / fnorm;
        }
        let n = norm(&pts[i]);
        for c in 0..k {
            pts[i][c] *= r / n;
        }
    }
}

impl CentroidPrior {
    pub fn n_modes(&self) -> usize {
        self.centroids.len()
    }

    pub fn latent_dim(&self) -> usize {
        self.centroids[0].len()
    }

    /// Install the subject -> centroid bijection, sorted by subject id.
    pub fn assign_subjects(&mut self, subject_ids: &[u32]) -> Result<(), PriorError> {
        if subject_ids.len() != self.centroids.len() {
            return Err(PriorError::BadLabelMap {
                expected: self.centroids.len(),
                got: subject_ids.len(),
            });
        }
        let mut ids = subject_ids.to_vec();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != subject_ids.len() {
            return Err(PriorError::BadLabelMap {
                expected: self.centroids.len(),
                got: ids.len(),
            });
        }
        self.label_map = ids.into_iter().enumerate().map(|(i, s)| (s, i)).collect();
        Ok(())
    }

    pub fn centroid_index(&self, subject_id: u32) -> Result<usize, PriorError> {
        self.label_map
            .iter()
            .find(|(s, _)| *s == subject_id)
            .map(|(_, i)| *i)
            .ok_or(PriorError::UnknownSubject(subject_id))
    }

    /// Inverse of `centroid_index`: the subject assigned to a mode.
    pub fn subject_for(&self, class: usize) -> Option<u32> {
        self.label_map.iter().find(|(_, i)| *i == class).map(|(s, _)| *s)
    }

    /// Subject ids in mode order — the canonical class order for reporting.
    pub fn subjects_in_class_order(&self) -> Vec<u32> {
        let mut map = self.label_map.clone();
        map.sort_unstable_by_key(|(_, i)| *i);
        map.into_iter().map(|(s, _)| s).collect()
    }

    /// Draw z* = μ_i + ε with ε ~ N(0, I_K) for the subject's mode.
    pub fn sample(&self, subject_id: u32, rng: &mut impl Rng) -> Result<Vec<f64>, PriorError> {
        let idx = self.centroid_index(subject_id)?;
        Ok(self.centroids[idx]
            .iter()
            .map(|mu| mu + rng.sample::<f64, _>(StandardNormal))
            .collect())
    }

    /// log p(z) for the equal-weight unit-covariance Gaussian mixture,
    /// evaluated with log-sum-exp so distant z never collapse to −∞.
    pub fn log_mixture_likelihood(&self, z: &[f64]) -> f64 {
        let k = self.latent_dim();
        assert!(z.len() == k, "log_mixture_likelihood: z has length {}, expected {}", z.len(), k);
        let m = self.n_modes() as f64;
        let log_norm = -(k as f64) * 0.5 * (2.0 * std::f64::consts::PI).ln() - m.ln();
        let exponents: Vec<f64> = self
            .centroids
            .iter()
            .map(|mu| {
                let d2: f64 = mu.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum();
                -0.5 * d2
            })
            .collect();
        let mx = exponents.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + exponents.iter().map(|e| (e - mx).exp()).sum::<f64>().ln();
        log_norm + lse
    }

    /// p(z) itself; may underflow to 0 far from all modes (use the log form
    /// for thresholding).
    pub fn mixture_likelihood(&self, z: &[f64]) -> f64 {
        self.log_mixture_likelihood(z).exp()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn two_centroids_are_antipodal() {
        for k in [2usize, 8, 32] {
            let p = place_centroids(2, k, 5.0, 9.9, 7).unwrap();
            let d: f64 = p.centroids[0]
                .iter()
                .zip(&p.centroids[1])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            assert!((d - 10.0).abs() < 1e-9, "k={}: separation {}", k, d);
        }
    }

    #[test]
    fn default_configuration_meets_constraints_and_is_deterministic() {
        let p1 = place_centroids(10, 32, 10.0, 10.0, 42).unwrap();
        let p2 = place_centroids(10, 32, 10.0, 10.0, 42).unwrap();
        assert_eq!(p1.centroids, p2.centroids);
        for c in &p1.centroids {
            assert!((norm(c) - 10.0).abs() < 1e-6);
        }
        assert!(min_separation(&p1.centroids) >= 10.0);
    }

    #[test]
    fn low_dimensional_placement_uses_repulsion() {
        // Six points in R^3 at separation 1.2 on the unit sphere need real
        // spreading work (octahedron optimum is sqrt(2) ≈ 1.414).
        let p = place_centroids(6, 3, 1.0, 1.2, 3).unwrap();
        assert!(min_separation(&p.centroids) >= 1.2);
        for c in &p.centroids {
            assert!((norm(c) - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn impossible_placement_reports_best_separation() {
        // 40 points on a circle cannot all be 1.9 apart at radius 1.
        let err = place_centroids(40, 2, 1.0, 1.9, 5).unwrap_err();
        match err {
            PriorError::PlacementFailed { best, required, .. } => {
                assert!(best < required);
            }
            other => panic!("unexpected error {:?}", other),
        }
    }

    #[test]
    fn sampling_matches_mode_statistics() {
        let mut p = place_centroids(4, 8, 10.0, 8.0, 11).unwrap();
        p.assign_subjects(&[3, 1, 7, 5]).unwrap();
        let idx = p.centroid_index(5).unwrap();
        let mu = p.centroids[idx].clone();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = 100_000usize;
        let mut mean = vec![0.0; 8];
        let mut m2 = vec![0.0; 8];
        for _ in 0..n {
            let z = p.sample(5, &mut rng).unwrap();
            for c in 0..8 {
                mean[c] += z[c];
                m2[c] += z[c] * z[c];
            }
        }
        for c in 0..8 {
            mean[c] /= n as f64;
            let var = m2[c] / n as f64 - mean[c] * mean[c];
            assert!((mean[c] - mu[c]).abs() < 0.02, "coordinate {} mean off: {}", c, mean[c] - mu[c]);
            assert!((var - 1.0).abs() < 0.05, "coordinate {} variance {}", c, var);
        }
        assert!(matches!(p.sample(2, &mut rng), Err(PriorError::UnknownSubject(2))));
    }

    #[test]
    fn likelihood_analytic_cases() {
        // Single standard mode in 2-D peaks at 1/(2π).
        let prior = CentroidPrior {
            centroids: vec![vec![0.0, 0.0]],
            radius: 1.0,
            min_separation: 1.0,
            label_map: vec![(0, 0)],
            seed: 0,
        };
        let p = prior.mixture_likelihood(&[0.0, 0.0]);
        assert!((p - 1.0 / (2.0 * std::f64::consts::PI)).abs() < 1e-12);

        // Two modes 20 apart: at a mode, the far mode contributes ~e^{-200}.
        let prior = CentroidPrior {
            centroids: vec![vec![10.0, 0.0], vec![-10.0, 0.0]],
            radius: 10.0,
            min_separation: 20.0,
            label_map: vec![(0, 0), (1, 1)],
            seed: 0,
        };
        let p = prior.mixture_likelihood(&[10.0, 0.0]);
        assert!((p - 0.5 / (2.0 * std::f64::consts::PI)).abs() < 1e-12);
    }

    #[test]
    fn likelihood_matches_direct_summation_oracle() {
        // Independent naive-summation implementation at a small K where raw
        // densities do not underflow.
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let prior = place_centroids(5, 4, 3.0, 2.0, 23).unwrap();
        for _ in 0..200 {
            let z: Vec<f64> = (0..4)
                .map(|_| rng.sample::<f64, _>(StandardNormal) * 3.0)
                .collect();
            let got = prior.mixture_likelihood(&z);
            let mut direct = 0.0;
            for mu in &prior.centroids {
                let d2: f64 = mu.iter().zip(&z).map(|(a, b)| (a - b) * (a - b)).sum();
                direct += (2.0 * std::f64::consts::PI).powi(-2) * (-0.5 * d2).exp();
            }
            direct /= prior.centroids.len() as f64;
            let rel = (got - direct).abs() / direct.max(1e-300);
            assert!(rel < 1e-12, "rel err {}", rel);
        }
    }

    #[test]
    fn log_likelihood_stays_finite_far_from_modes() {
        let prior = place_centroids(10, 32, 10.0, 10.0, 42).unwrap();
        let z = vec![100.0 / (32.0f64).sqrt(); 32];
        let l = prior.log_mixture_likelihood(&z);
        assert!(l.is_finite(), "log-likelihood {}", l);
        assert!(prior.mixture_likelihood(&z) >= 0.0);
    }

    #[test]
    fn likelihood_is_permutation_invariant_and_peaks_at_centroids() {
        let prior = place_centroids(6, 16, 10.0, 10.0, 9).unwrap();
        let mut shuffled = prior.clone();
        shuffled.centroids.rotate_left(2);
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..50 {
            let z: Vec<f64> = (0..16)
                .map(|_| rng.sample::<f64, _>(StandardNormal) * 5.0)
                .collect();
            let a = prior.log_mixture_likelihood(&z);
            let b = shuffled.log_mixture_likelihood(&z);
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
        // Every centroid outscores random sphere points and midpoints.
        let floor = prior
            .centroids
            .iter()
            .map(|c| prior.log_mixture_likelihood(c))
            .fold(f64::INFINITY, f64::min);
        for i in 0..prior.centroids.len() {
            for j in i + 1..prior.centroids.len() {
                let mid: Vec<f64> = prior.centroids[i]
                    .iter()
                    .zip(&prior.centroids[j])
                    .map(|(a, b)| 0.5 * (a + b))
                    .collect();
                assert!(prior.log_mixture_likelihood(&mid) < floor);
            }
        }
    }

    #[test]
    fn mixture_integrates_to_one_monte_carlo() {
        // K=2, M=3 on a radius-3 circle; uniform box MC over ±6σ beyond the
        // sphere captures all but ~1e-8 of the mass.
        let prior = place_centroids(3, 2, 3.0, 3.0, 13).unwrap();
        let lo = -9.0;
        let hi = 9.0;
        let vol = (hi - lo) * (hi - lo);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let n = 2_000_000usize;
        let mut acc = 0.0;
        for _ in 0..n {
            let z = [rng.gen_range(lo..hi), rng.gen_range(lo..hi)];
            acc += prior.mixture_likelihood(&z);
        }
        let integral = vol * acc / n as f64;
        assert!((integral - 1.0).abs() < 0.01, "MC integral {}", integral);
    }
}
