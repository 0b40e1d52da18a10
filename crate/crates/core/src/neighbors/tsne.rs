// Exact O(N²) t-SNE.
//
// Conditional affinities are Gaussian with a per-row precision found by
// bisection so that exp(H(P_i)) hits the target perplexity; the joint P is
// (P_j|i + P_i|j) / 2N. The low-dimensional kernel is Student-t with one
// degree of freedom, optimized by gradient descent with momentum, per-
// coordinate gains and early exaggeration.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{check_finite, EmbedConfig, LowDimEmbedding};
use crate::error::{Error, Result};
use crate::linalg::squared_distance_matrix;
use crate::store::EmbeddingMatrix;

const PERPLEXITY_TOL: f64 = 1e-5;
const MAX_BISECTION_STEPS: usize = 50;
const INIT_STD: f64 = 1e-4;
const MIN_GAIN: f64 = 0.01;
const OBJECTIVE_EVERY: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TsneConfig {
    pub output_dim: usize,
    pub perplexity: f64,
    /// Step size; `None` uses max(N / (4·exaggeration_factor), 50).
    pub learning_rate: Option<f64>,
    pub iterations: usize,
    pub exaggeration_factor: f64,
    /// Early exaggeration length; momentum switches from 0.5 to 0.8 here too.
    pub exaggeration_iters: usize,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        TsneConfig {
            output_dim: 1,
            perplexity: 30.0,
            learning_rate: None,
            iterations: 1000,
            exaggeration_factor: 12.0,
            exaggeration_iters: 250,
            seed: 0,
        }
    }
}

impl TsneConfig {
    pub fn validate(&self, n: usize) -> Result<()> {
        if !(self.output_dim == 1 || self.output_dim == 2) {
            return Err(Error::invalid("t-SNE output_dim must be 1 or 2"));
        }
        if !(self.perplexity >= 2.0) {
            return Err(Error::invalid("perplexity must be at least 2"));
        }
        if !(3.0 * self.perplexity < n as f64) {
            return Err(Error::invalid(format!(
                "perplexity {} needs more than {} samples (have {n})",
                self.perplexity,
                (3.0 * self.perplexity).floor()
            )));
        }
        if self.learning_rate.is_some_and(|lr| !(lr > 0.0)) || !(self.exaggeration_factor >= 1.0) {
            return Err(Error::invalid(
                "learning_rate must be positive and exaggeration_factor at least 1",
            ));
        }
        Ok(())
    }

    pub fn effective_learning_rate(&self, n: usize) -> f64 {
        self.learning_rate
            .unwrap_or_else(|| (n as f64 / (4.0 * self.exaggeration_factor)).max(50.0))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    /// Per-row Gaussian precision β = 1/(2σ²).
    pub betas: Vec<f64>,
    /// Row-major N×N conditional probabilities P_{j|i}; zero diagonal.
    pub conditional: Vec<f64>,
    /// Achieved exp(H(P_i)) per row.
    pub achieved: Vec<f64>,
}

// Returns (conditional row, exp(entropy)) for precision beta.
fn row_distribution(dist: &[f64], i: usize, dmin: f64, beta: f64, out: &mut [f64]) -> f64 {
    let mut sum = 0.0;
    let mut weighted = 0.0;
    for (j, (&d, p)) in dist.iter().zip(out.iter_mut()).enumerate() {
        if j == i {
            *p = 0.0;
            continue;
        }
        let shifted = d - dmin;
        *p = (-beta * shifted).exp();
        sum += *p;
        weighted += *p * shifted;
    }
    out.iter_mut().for_each(|p| *p /= sum);
    // H = ln Σ exp(−β d') + β Σ p d'
    (sum.ln() + beta * weighted / sum).exp()
}

fn calibrate_row(dist: &[f64], i: usize, perplexity: f64, out: &mut [f64]) -> Result<(f64, f64)> {
    let others = dist.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, &d)| d);
    let dmin = others.clone().fold(f64::INFINITY, f64::min);
    let (count, total) = others.fold(
        (0usize, 0.0),
        |(c, t), d| {
            if d > dmin {
                (c + 1, t + (d - dmin))
            } else {
                (c, t)
            }
        },
    );
    let mut beta = if count > 0 { count as f64 / total } else { 1.0 };
    let (mut lo, mut hi) = (0.0f64, f64::INFINITY);
    for _ in 0..MAX_BISECTION_STEPS {
        let perp = row_distribution(dist, i, dmin, beta, out);
        if (perp - perplexity).abs() < PERPLEXITY_TOL {
            return Ok((beta, perp));
        }
        if perp > perplexity {
            lo = beta;
            beta = if hi.is_infinite() {
                beta * 2.0
            } else {
                0.5 * (beta + hi)
            };
        } else {
            hi = beta;
            beta = 0.5 * (beta + lo);
        }
    }
    Err(Error::Calibration {
        row: i,
        steps: MAX_BISECTION_STEPS,
    })
}

/// Per-row bandwidth search on a row-major N×N squared-distance matrix.
///
/// Rows are shifted by their smallest off-diagonal distance before
/// exponentiation, which leaves the normalized probabilities unchanged.
pub fn perplexity_calibration(distances: &[f64], n: usize, perplexity: f64) -> Result<Calibration> {
    if distances.len() != n * n || n < 2 {
        return Err(Error::invalid("distance matrix must be N×N with N >= 2"));
    }
    if !(perplexity > 1.0 && perplexity <= (n - 1) as f64) {
        return Err(Error::invalid(format!(
            "perplexity {perplexity} outside (1, {}]",
            n - 1
        )));
    }
    let mut conditional = vec![0.0; n * n];
    let rows: Vec<Result<(f64, f64)>> = conditional
        .par_chunks_mut(n)
        .enumerate()
        .map(|(i, out)| calibrate_row(&distances[i * n..(i + 1) * n], i, perplexity, out))
        .collect();
    let mut betas = Vec::with_capacity(n);
    let mut achieved = Vec::with_capacity(n);
    for r in rows {
        let (b, p) = r?;
        betas.push(b);
        achieved.push(p);
    }
    Ok(Calibration {
        betas,
        conditional,
        achieved,
    })
}

/// Symmetrized joint affinities (P_{j|i} + P_{i|j}) / 2N, row-major N×N.
pub fn joint_probabilities(m: &EmbeddingMatrix, perplexity: f64) -> Result<Vec<f64>> {
    let n = m.n();
    let dist = squared_distance_matrix(m);
    let cal = perplexity_calibration(&dist, n, perplexity)?;
    let c = &cal.conditional;
    let denom = 2.0 * n as f64;
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            p[i * n + j] = (c[i * n + j] + c[j * n + i]) / denom;
        }
    }
    Ok(p)
}

// Student-t numerators and their sum over i ≠ j.
fn student_kernel(y: &[f64], n: usize, dim: usize, num: &mut [f64]) -> f64 {
    let mut z = 0.0;
    for i in 0..n {
        let yi = &y[i * dim..(i + 1) * dim];
        num[i * n + i] = 0.0;
        for j in i + 1..n {
            let yj = &y[j * dim..(j + 1) * dim];
            let d2: f64 = yi.iter().zip(yj).map(|(a, b)| (a - b) * (a - b)).sum();
            let v = 1.0 / (1.0 + d2);
            num[i * n + j] = v;
            num[j * n + i] = v;
            z += 2.0 * v;
        }
    }
    z
}

/// KL(P‖Q) for joint affinities `p` and coordinates `y` (N×dim, row-major).
pub fn kl_divergence(p: &[f64], y: &[f64], n: usize, dim: usize) -> f64 {
    let mut num = vec![0.0; n * n];
    let z = student_kernel(y, n, dim, &mut num);
    kl_from_kernel(p, &num, z, n)
}

fn kl_from_kernel(p: &[f64], num: &[f64], z: f64, n: usize) -> f64 {
    let mut kl = 0.0;
    for i in 0..n {
        for j in 0..n {
            let pij = p[i * n + j];
            if i != j && pij > 0.0 {
                kl += pij * (pij * z / num[i * n + j]).ln();
            }
        }
    }
    kl
}

/// Analytic ∂KL/∂y: 4 Σ_j (p_ij − q_ij)(y_i − y_j) / (1 + ‖y_i − y_j‖²).
pub fn kl_gradient(p: &[f64], y: &[f64], n: usize, dim: usize) -> Vec<f64> {
    let mut num = vec![0.0; n * n];
    let z = student_kernel(y, n, dim, &mut num);
    let mut grad = vec![0.0; n * dim];
    accumulate_gradient(p, 1.0, &num, z, y, n, dim, &mut grad);
    grad
}

#[allow(clippy::too_many_arguments)]
fn accumulate_gradient(
    p: &[f64],
    exaggeration: f64,
    num: &[f64],
    z: f64,
    y: &[f64],
    n: usize,
    dim: usize,
    grad: &mut [f64],
) {
    grad.iter_mut().for_each(|g| *g = 0.0);
    for i in 0..n {
        let gi = &mut grad[i * dim..(i + 1) * dim];
        for j in 0..n {
            if i == j {
                continue;
            }
            let w = num[i * n + j];
            let mult = 4.0 * (exaggeration * p[i * n + j] - w / z) * w;
            for d in 0..dim {
                gi[d] += mult * (y[i * dim + d] - y[j * dim + d]);
            }
        }
    }
}

pub fn tsne_embed(m: &EmbeddingMatrix, config: &TsneConfig) -> Result<LowDimEmbedding> {
    let n = m.n();
    config.validate(n)?;
    let dim = config.output_dim;
    let p = joint_probabilities(m, config.perplexity)?;
    let learning_rate = config.effective_learning_rate(n);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut y: Vec<f64> = (0..n * dim)
        .map(|_| INIT_STD * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let mut update = vec![0.0; n * dim];
    let mut gains = vec![1.0f64; n * dim];
    let mut grad = vec![0.0; n * dim];
    let mut num = vec![0.0; n * n];
    let mut trace = Vec::new();

    for it in 0..config.iterations {
        let early = it < config.exaggeration_iters;
        let exaggeration = if early { config.exaggeration_factor } else { 1.0 };
        let momentum = if early { 0.5 } else { 0.8 };

        let z = student_kernel(&y, n, dim, &mut num);
        if it % OBJECTIVE_EVERY == 0 {
            let kl = kl_from_kernel(&p, &num, z, n);
            if !kl.is_finite() {
                return Err(Error::Diverged { iteration: it });
            }
            trace.push((it, kl));
        }
        accumulate_gradient(&p, exaggeration, &num, z, &y, n, dim, &mut grad);

        for k in 0..n * dim {
            let same_sign = (grad[k] > 0.0) == (update[k] > 0.0);
            gains[k] = if same_sign { gains[k] * 0.8 } else { gains[k] + 0.2 };
            gains[k] = gains[k].max(MIN_GAIN);
            update[k] = momentum * update[k] - learning_rate * gains[k] * grad[k];
            y[k] += update[k];
        }
        for d in 0..dim {
            let mean = (0..n).map(|i| y[i * dim + d]).sum::<f64>() / n as f64;
            (0..n).for_each(|i| y[i * dim + d] -= mean);
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged { iteration: it });
        }
    }

    let final_objective = kl_divergence(&p, &y, n, dim);
    if !final_objective.is_finite() {
        return Err(Error::Diverged {
            iteration: config.iterations,
        });
    }
    trace.push((config.iterations, final_objective));
    check_finite(&y)?;
    Ok(LowDimEmbedding {
        item_ids: m.item_ids(),
        output_dim: dim,
        coords: y,
        config: EmbedConfig::Tsne(config.clone()),
        final_objective,
        objective_trace: trace,
    })
}
