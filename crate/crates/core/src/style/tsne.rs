use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::StyleError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub initial_momentum: f64,
    pub final_momentum: f64,
    /// Iteration at which momentum switches and early exaggeration ends.
    pub switch_iteration: usize,
    pub exaggeration: f64,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: 200.0,
            initial_momentum: 0.5,
            final_momentum: 0.8,
            switch_iteration: 250,
            exaggeration: 12.0,
            seed: 0,
        }
    }
}

impl TsneConfig {
    pub fn validate(&self) -> Result<(), StyleError> {
        if !(self.perplexity >= 2.0) {
            return Err(StyleError::Config(format!(
                "perplexity {} is below 2",
                self.perplexity
            )));
        }
        if self.iterations == 0 {
            return Err(StyleError::Config("iterations must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.exaggeration >= 1.0) {
            return Err(StyleError::Config(
                "learning rate must be positive and exaggeration at least 1".into(),
            ));
        }
        Ok(())
    }

    /// Perplexity actually used for `n` points: at most `(n - 1) / 3`.
    pub fn effective_perplexity(&self, n: usize) -> f64 {
        self.perplexity.min((n as f64 - 1.0) / 3.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TsneResult {
    pub points: Vec<[f64; 2]>,
    pub perplexity: f64,
    /// KL divergence (against the unexaggerated P) when early exaggeration
    /// ends, and at the last iteration.
    pub kl_after_exaggeration: f64,
    pub final_kl: f64,
}

/// Squared Euclidean distances, row-major `n x n`.
pub fn pairwise_sq_distances(x: &[Vec<f64>]) -> Vec<f64> {
    let n = x.len();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let v: f64 = x[i].iter().zip(&x[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    d
}

/// Row `i` of `exp(-beta d)` normalized over `j != i`, and its entropy in
/// nats. Distances are shifted by the row minimum for stability; the shift
/// cancels in the normalization.
fn row_distribution(d: &[f64], i: usize, beta: f64, out: &mut [f64]) -> f64 {
    let n = out.len();
    let dmin = (0..n)
        .filter(|&j| j != i)
        .map(|j| d[j])
        .fold(f64::INFINITY, f64::min);
    let mut sum = 0.0;
    for j in 0..n {
        out[j] = if j == i {
            0.0
        } else {
            (-beta * (d[j] - dmin)).exp()
        };
        sum += out[j];
    }
    let mut weighted = 0.0;
    for j in 0..n {
        out[j] /= sum;
        weighted += out[j] * (d[j] - dmin);
    }
    // H = ln(sum) + beta * E[d - dmin]
    sum.ln() + beta * weighted
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conditionals {
    /// Row-major `p_{j|i}`.
    pub p: Vec<f64>,
    pub betas: Vec<f64>,
    pub entropies: Vec<f64>,
}

/// Per-point precision found by bisection (with bracket expansion) so that
/// each conditional's entropy equals `ln(perplexity)`.
pub fn conditional_probabilities(d: &[f64], n: usize, perplexity: f64) -> Conditionals {
    let target = perplexity.ln();
    let mut p = vec![0.0; n * n];
    let mut betas = vec![1.0; n];
    let mut entropies = vec![0.0; n];
    for i in 0..n {
        let row = &d[i * n..(i + 1) * n];
        let out = &mut p[i * n..(i + 1) * n];
        let (mut lo, mut hi) = (0.0f64, f64::INFINITY);
        let mut beta = 1.0;
        let mut h = row_distribution(row, i, beta, out);
        for _ in 0..200 {
            let diff = h - target;
            if diff.abs() < 1e-10 {
                break;
            }
            if diff > 0.0 {
                lo = beta;
                beta = if hi.is_finite() {
                    (beta + hi) / 2.0
                } else {
                    beta * 2.0
                };
            } else {
                hi = beta;
                beta = (beta + lo) / 2.0;
            }
            h = row_distribution(row, i, beta, out);
        }
        betas[i] = beta;
        entropies[i] = h;
    }
    Conditionals {
        p,
        betas,
        entropies,
    }
}

/// `p_ij = (p_{j|i} + p_{i|j}) / 2n`, floored at 1e-12.
pub fn joint_probabilities(cond: &[f64], n: usize) -> Vec<f64> {
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                p[i * n + j] = ((cond[i * n + j] + cond[j * n + i]) / (2.0 * n as f64)).max(1e-12);
            }
        }
    }
    p
}

/// Student-t kernel `1 / (1 + |y_i - y_j|^2)` with a zero diagonal.
fn student_kernel(y: &[[f64; 2]]) -> Vec<f64> {
    let n = y.len();
    let mut w = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let dx = y[i][0] - y[j][0];
            let dy = y[i][1] - y[j][1];
            let v = 1.0 / (1.0 + dx * dx + dy * dy);
            w[i * n + j] = v;
            w[j * n + i] = v;
        }
    }
    w
}

/// Normalized low-dimensional affinities.
pub fn low_dim_affinities(y: &[[f64; 2]]) -> Vec<f64> {
    let w = student_kernel(y);
    let z: f64 = w.iter().sum();
    w.iter().map(|v| v / z).collect()
}

/// `KL(P || Q) = sum p log(p / q)` over off-diagonal pairs.
pub fn kl_divergence(p: &[f64], y: &[[f64; 2]]) -> f64 {
    let q = low_dim_affinities(y);
    p.iter()
        .zip(&q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi / qi.max(1e-300)).ln())
        .sum()
}

/// `dC/dy_i = 4 sum_j (p_ij - q_ij) (y_i - y_j) / (1 + |y_i - y_j|^2)`.
pub fn kl_gradient(p: &[f64], y: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let n = y.len();
    let w = student_kernel(y);
    let z: f64 = w.iter().sum();
    let mut g = vec![[0.0; 2]; n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let k = i * n + j;
            let m = 4.0 * (p[k] - w[k] / z) * w[k];
            g[i][0] += m * (y[i][0] - y[j][0]);
            g[i][1] += m * (y[i][1] - y[j][1]);
        }
    }
    g
}

fn center(y: &mut [[f64; 2]]) {
    let n = y.len() as f64;
    let mx = y.iter().map(|p| p[0]).sum::<f64>() / n;
    let my = y.iter().map(|p| p[1]).sum::<f64>() / n;
    for p in y.iter_mut() {
        p[0] -= mx;
        p[1] -= my;
    }
}

/// Exact t-SNE into two dimensions.
///
/// Gradient descent with momentum and per-coordinate adaptive gains
/// (+0.2 when the gradient sign flips against the update, x0.8 otherwise,
/// floored at 0.01). P is exaggerated and the initial momentum is used
/// until `switch_iteration`. The embedding is re-centered every step.
pub fn tsne(x: &[Vec<f64>], cfg: &TsneConfig) -> Result<TsneResult, StyleError> {
    cfg.validate()?;
    let n = x.len();
    if n < 5 {
        return Err(StyleError::InsufficientData(n));
    }
    let dim = x[0].len();
    if x.iter().any(|v| v.len() != dim) {
        return Err(StyleError::Dimension(
            "style vectors differ in length".into(),
        ));
    }
    if x.iter().flatten().any(|v| !v.is_finite()) {
        return Err(StyleError::Dimension(
            "style vectors contain non-finite values".into(),
        ));
    }
    let perplexity = cfg.effective_perplexity(n);
    let d = pairwise_sq_distances(x);
    let cond = conditional_probabilities(&d, n, perplexity);
    let p = joint_probabilities(&cond.p, n);
    let p_exag: Vec<f64> = p.iter().map(|v| v * cfg.exaggeration).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, 1e-4).expect("valid sigma");
    let mut y: Vec<[f64; 2]> = (0..n)
        .map(|_| [normal.sample(&mut rng), normal.sample(&mut rng)])
        .collect();
    let mut update = vec![[0.0f64; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];
    let mut kl_after_exaggeration = None;

    for it in 0..cfg.iterations {
        if it == cfg.switch_iteration {
            kl_after_exaggeration = Some(kl_divergence(&p, &y));
        }
        let early = it < cfg.switch_iteration;
        let momentum = if early {
            cfg.initial_momentum
        } else {
            cfg.final_momentum
        };
        let grad = kl_gradient(if early { &p_exag } else { &p }, &y);
        for i in 0..n {
            for k in 0..2 {
                gains[i][k] = if (grad[i][k] > 0.0) != (update[i][k] > 0.0) {
                    gains[i][k] + 0.2
                } else {
                    (gains[i][k] * 0.8).max(0.01)
                };
                update[i][k] =
                    momentum * update[i][k] - cfg.learning_rate * gains[i][k] * grad[i][k];
                y[i][k] += update[i][k];
            }
        }
        center(&mut y);
    }
    let final_kl = kl_divergence(&p, &y);
    Ok(TsneResult {
        points: y,
        perplexity,
        kl_after_exaggeration: kl_after_exaggeration.unwrap_or(final_kl),
        final_kl,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_points(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect()
    }

    #[test]
    fn distributions_are_normalized() {
        let x = random_points(40, 6, 1);
        let cond = conditional_probabilities(&pairwise_sq_distances(&x), 40, 10.0);
        for i in 0..40 {
            let s: f64 = cond.p[i * 40..(i + 1) * 40].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!((cond.entropies[i] - 10f64.ln()).abs() < 1e-4);
        }
        let p = joint_probabilities(&cond.p, 40);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-8);
        assert!(p.iter().all(|&v| v >= 0.0));
        let y: Vec<[f64; 2]> = x.iter().map(|v| [v[0], v[1]]).collect();
        let q = low_dim_affinities(&y);
        assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-8);
    }

    #[test]
    fn identical_points_stay_finite() {
        let x = vec![vec![0.5; 4]; 12];
        let r = tsne(
            &x,
            &TsneConfig {
                iterations: 300,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(r.points.iter().flatten().all(|v| v.is_finite()));
    }

    #[test]
    fn too_few_points() {
        assert!(matches!(
            tsne(&random_points(4, 3, 0), &TsneConfig::default()),
            Err(StyleError::InsufficientData(4))
        ));
    }

    #[test]
    fn perplexity_is_clamped() {
        assert_eq!(TsneConfig::default().effective_perplexity(31), 10.0);
        assert_eq!(TsneConfig::default().effective_perplexity(1000), 30.0);
        assert!(TsneConfig {
            perplexity: 1.5,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn deterministic_centered_and_kl_decreases() {
        let x = random_points(60, 8, 2);
        let cfg = TsneConfig {
            seed: 5,
            iterations: 600,
            ..Default::default()
        };
        let a = tsne(&x, &cfg).unwrap();
        assert_eq!(a, tsne(&x, &cfg).unwrap());
        let n = a.points.len() as f64;
        let mx = a.points.iter().map(|p| p[0]).sum::<f64>() / n;
        let my = a.points.iter().map(|p| p[1]).sum::<f64>() / n;
        assert!(mx.abs() < 1e-6 && my.abs() < 1e-6);
        assert!(a.final_kl < a.kl_after_exaggeration);
    }
}
