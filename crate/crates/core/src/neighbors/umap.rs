// UMAP: fuzzy kNN membership graph plus SGD on a fuzzy-set cross-entropy.
//
// The layout is initialized from a PCA projection scaled to ±10 with a small
// seeded jitter; spectral initialization is not implemented.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{check_finite, EmbedConfig, LowDimEmbedding};
use crate::error::{Error, Result};
use crate::linalg::{pca_fit, pca_transform, squared_euclidean};
use crate::store::EmbeddingMatrix;

const SPREAD: f64 = 1.0;
const NEGATIVE_SAMPLE_RATE: usize = 5;
const INITIAL_ALPHA: f64 = 1.0;
const GRAD_CLIP: f64 = 4.0;
const SIGMA_ITERS: usize = 64;
const SIGMA_TOL: f64 = 1e-5;
const MIN_SIGMA_SCALE: f64 = 1e-3;
const INIT_EXTENT: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UmapConfig {
    pub n_neighbors: usize,
    pub min_dist: f64,
    pub output_dim: usize,
    pub n_epochs: usize,
    pub seed: u64,
}

impl Default for UmapConfig {
    fn default() -> Self {
        UmapConfig {
            n_neighbors: 15,
            min_dist: 0.1,
            output_dim: 10,
            n_epochs: 300,
            seed: 0,
        }
    }
}

impl UmapConfig {
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.n_neighbors < 2 || self.n_neighbors >= n {
            return Err(Error::invalid(format!(
                "n_neighbors {} outside [2, {n})",
                self.n_neighbors
            )));
        }
        if !(self.min_dist >= 0.0 && self.min_dist < SPREAD * 3.0) {
            return Err(Error::invalid("min_dist must lie in [0, 3)"));
        }
        if self.output_dim == 0 || self.n_epochs == 0 {
            return Err(Error::invalid("output_dim and n_epochs must be positive"));
        }
        Ok(())
    }
}

/// Probabilistic OR of two directed memberships.
pub fn fuzzy_union(a: f64, b: f64) -> f64 {
    a + b - a * b
}

/// Least-squares fit of 1/(1 + a·x^{2b}) to the offset exponential
/// `1` for x < min_dist, `exp(-(x - min_dist)/spread)` beyond, sampled at 300
/// points on [0, 3·spread]. Levenberg–Marquardt from (1, 1).
pub fn fit_curve(spread: f64, min_dist: f64) -> (f64, f64) {
    let xs: Vec<f64> = (0..300).map(|i| 3.0 * spread * i as f64 / 299.0).collect();
    let ys: Vec<f64> = xs
        .iter()
        .map(|&x| {
            if x < min_dist {
                1.0
            } else {
                (-(x - min_dist) / spread).exp()
            }
        })
        .collect();
    let sse = |a: f64, b: f64| -> f64 {
        xs.iter()
            .zip(&ys)
            .map(|(&x, &y)| {
                let r = 1.0 / (1.0 + a * x.powf(2.0 * b)) - y;
                r * r
            })
            .sum()
    };
    let (mut a, mut b) = (1.0f64, 1.0f64);
    let mut lambda = 1e-3;
    let mut cost = sse(a, b);
    for _ in 0..500 {
        // Normal equations JᵀJ δ = −Jᵀr
        let (mut jaa, mut jab, mut jbb, mut ga, mut gb) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (&x, &y) in xs.iter().zip(&ys) {
            let u = if x > 0.0 { x.powf(2.0 * b) } else { 0.0 };
            let g = 1.0 / (1.0 + a * u);
            let r = g - y;
            let da = -u * g * g;
            let db = if x > 0.0 { -a * u * 2.0 * x.ln() * g * g } else { 0.0 };
            jaa += da * da;
            jab += da * db;
            jbb += db * db;
            ga += da * r;
            gb += db * r;
        }
        let mut improved = false;
        for _ in 0..20 {
            let (m00, m11) = (jaa * (1.0 + lambda), jbb * (1.0 + lambda));
            let det = m00 * m11 - jab * jab;
            if det.abs() < f64::MIN_POSITIVE {
                break;
            }
            let step_a = -(m11 * ga - jab * gb) / det;
            let step_b = -(m00 * gb - jab * ga) / det;
            let trial = sse(a + step_a, b + step_b);
            if trial.is_finite() && trial <= cost {
                let converged = (cost - trial) <= 1e-15 * cost.max(1e-300);
                a += step_a;
                b += step_b;
                cost = trial;
                lambda = (lambda / 10.0).max(1e-12);
                improved = !converged;
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    (a, b)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MembershipGraph {
    pub n: usize,
    /// Symmetrized memberships keyed by (i, j) with i < j.
    pub weights: BTreeMap<(usize, usize), f64>,
    pub rho: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl MembershipGraph {
    pub fn weight(&self, i: usize, j: usize) -> f64 {
        let key = if i < j { (i, j) } else { (j, i) };
        self.weights.get(&key).copied().unwrap_or(0.0)
    }
}

// (distance, index) of the k nearest other points, ties by index.
fn nearest(m: &EmbeddingMatrix, i: usize, k: usize) -> Vec<(f64, usize)> {
    let xi = m.row(i);
    let mut d: Vec<(f64, usize)> = (0..m.n())
        .filter(|&j| j != i)
        .map(|j| (squared_euclidean(xi, m.row(j)).sqrt(), j))
        .collect();
    d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    d.truncate(k);
    d
}

fn smooth_distances(dists: &[f64], target: f64, mean_all: f64) -> (f64, f64) {
    let rho = dists.iter().copied().find(|&d| d > 0.0).unwrap_or(0.0);
    let (mut lo, mut hi, mut mid) = (0.0f64, f64::INFINITY, 1.0f64);
    for _ in 0..SIGMA_ITERS {
        let psum: f64 = dists
            .iter()
            .map(|&d| {
                let e = d - rho;
                if e > 0.0 {
                    (-e / mid).exp()
                } else {
                    1.0
                }
            })
            .sum();
        if (psum - target).abs() < SIGMA_TOL {
            break;
        }
        if psum > target {
            hi = mid;
            mid = 0.5 * (lo + hi);
        } else {
            lo = mid;
            mid = if hi.is_infinite() { mid * 2.0 } else { 0.5 * (lo + hi) };
        }
    }
    let mean_row = dists.iter().sum::<f64>() / dists.len() as f64;
    let floor = MIN_SIGMA_SCALE * if rho > 0.0 { mean_row } else { mean_all };
    (rho, mid.max(floor))
}

/// Fuzzy simplicial membership graph over each point's `n_neighbors` nearest
/// other points, symmetrized with [`fuzzy_union`].
pub fn membership_graph(m: &EmbeddingMatrix, n_neighbors: usize) -> Result<MembershipGraph> {
    let n = m.n();
    if n_neighbors < 1 || n_neighbors >= n {
        return Err(Error::invalid(format!("n_neighbors {n_neighbors} outside [1, {n})")));
    }
    let knn: Vec<Vec<(f64, usize)>> = (0..n).into_par_iter().map(|i| nearest(m, i, n_neighbors)).collect();
    let mean_all = knn.iter().flatten().map(|p| p.0).sum::<f64>() / (n * n_neighbors) as f64;
    let target = (n_neighbors as f64).log2();

    let mut rho = Vec::with_capacity(n);
    let mut sigma = Vec::with_capacity(n);
    let mut directed: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for (i, row) in knn.iter().enumerate() {
        let dists: Vec<f64> = row.iter().map(|p| p.0).collect();
        let (r, s) = smooth_distances(&dists, target, mean_all);
        for &(d, j) in row {
            let w = if d - r <= 0.0 { 1.0 } else { (-(d - r) / s).exp() };
            directed.insert((i, j), w);
        }
        rho.push(r);
        sigma.push(s);
    }
    let mut weights = BTreeMap::new();
    for (&(i, j), &w) in &directed {
        let back = directed.get(&(j, i)).copied().unwrap_or(0.0);
        let key = if i < j { (i, j) } else { (j, i) };
        weights.insert(key, fuzzy_union(w, back));
    }
    Ok(MembershipGraph { n, weights, rho, sigma })
}

fn initial_layout(m: &EmbeddingMatrix, dim: usize, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let n = m.n();
    let q = dim.min(m.dim()).min(n - 1);
    let model = pca_fit(m, q)?;
    let proj = pca_transform(&model, m)?;
    let max_abs = proj.data().iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    let scale = if max_abs > 0.0 { INIT_EXTENT / max_abs } else { 1.0 };
    let mut y = vec![0.0; n * dim];
    for i in 0..n {
        for d in 0..dim {
            y[i * dim + d] = if d < q {
                proj.row(i)[d] * scale
            } else {
                rng.random_range(-INIT_EXTENT..INIT_EXTENT)
            };
        }
    }
    for v in y.iter_mut() {
        *v += 1e-4 * rng.sample::<f64, _>(StandardNormal);
    }
    Ok(y)
}

fn clip(v: f64) -> f64 {
    v.clamp(-GRAD_CLIP, GRAD_CLIP)
}

/// Fuzzy-set cross-entropy between the graph and 1/(1 + a·d^{2b}) over all pairs.
fn cross_entropy(graph: &MembershipGraph, y: &[f64], dim: usize, a: f64, b: f64) -> f64 {
    let n = graph.n;
    (0..n)
        .into_par_iter()
        .map(|i| {
            let yi = &y[i * dim..(i + 1) * dim];
            let mut acc = 0.0;
            for j in i + 1..n {
                let d2 = squared_euclidean(yi, &y[j * dim..(j + 1) * dim]);
                let q = (1.0 / (1.0 + a * d2.powf(b))).clamp(1e-12, 1.0 - 1e-12);
                let w = graph.weight(i, j);
                acc -= w * q.ln() + (1.0 - w) * (1.0 - q).ln();
            }
            acc
        })
        .sum()
}

pub fn umap_embed(m: &EmbeddingMatrix, config: &UmapConfig) -> Result<LowDimEmbedding> {
    let n = m.n();
    config.validate(n)?;
    let dim = config.output_dim;
    let (a, b) = fit_curve(SPREAD, config.min_dist);
    let graph = membership_graph(m, config.n_neighbors)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut y = initial_layout(m, dim, &mut rng)?;

    // Each undirected edge is sampled in both directions.
    let edges: Vec<(usize, usize, f64)> = graph
        .weights
        .iter()
        .flat_map(|(&(i, j), &w)| [(i, j, w), (j, i, w)])
        .collect();
    let w_max = edges.iter().fold(0.0f64, |acc, e| acc.max(e.2));
    let n_epochs = config.n_epochs as f64;
    let per_sample: Vec<f64> = edges
        .iter()
        .map(|e| {
            let s = n_epochs * e.2 / w_max;
            if s > 0.0 {
                n_epochs / s
            } else {
                -1.0
            }
        })
        .collect();
    let per_negative: Vec<f64> = per_sample.iter().map(|p| p / NEGATIVE_SAMPLE_RATE as f64).collect();
    let mut next_sample = per_sample.clone();
    let mut next_negative = per_negative.clone();
    let mut trace = Vec::new();

    let mut cur = vec![0.0; dim];
    for epoch in 0..config.n_epochs {
        let alpha = INITIAL_ALPHA * (1.0 - epoch as f64 / n_epochs);
        let ep = epoch as f64;
        for (e, &(j, k, _)) in edges.iter().enumerate() {
            if per_sample[e] <= 0.0 || next_sample[e] > ep {
                continue;
            }
            cur.copy_from_slice(&y[j * dim..(j + 1) * dim]);
            let other = &y[k * dim..(k + 1) * dim];
            let d2 = squared_euclidean(&cur, other);
            let coeff = if d2 > 0.0 {
                -2.0 * a * b * d2.powf(b - 1.0) / (1.0 + a * d2.powf(b))
            } else {
                0.0
            };
            for d in 0..dim {
                let g = clip(coeff * (cur[d] - y[k * dim + d]));
                cur[d] += g * alpha;
                y[k * dim + d] -= g * alpha;
            }
            next_sample[e] += per_sample[e];

            let n_neg = ((ep - next_negative[e]) / per_negative[e]).floor().max(0.0) as usize;
            for _ in 0..n_neg {
                let s = rng.random_range(0..n);
                if s == j {
                    continue;
                }
                let other = &y[s * dim..(s + 1) * dim];
                let d2 = squared_euclidean(&cur, other);
                if d2 > 0.0 {
                    let coeff = 2.0 * b / ((0.001 + d2) * (1.0 + a * d2.powf(b)));
                    for d in 0..dim {
                        cur[d] += clip(coeff * (cur[d] - other[d])) * alpha;
                    }
                } else {
                    cur.iter_mut().for_each(|c| *c += GRAD_CLIP * alpha);
                }
            }
            next_negative[e] += n_neg as f64 * per_negative[e];
            y[j * dim..(j + 1) * dim].copy_from_slice(&cur);
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteEmbedding);
        }
        if (epoch + 1) % 50 == 0 {
            trace.push((epoch + 1, cross_entropy(&graph, &y, dim, a, b)));
        }
    }

    check_finite(&y)?;
    let final_objective = cross_entropy(&graph, &y, dim, a, b);
    Ok(LowDimEmbedding {
        item_ids: m.item_ids(),
        output_dim: dim,
        coords: y,
        config: EmbedConfig::Umap(config.clone()),
        final_objective,
        objective_trace: trace,
    })
}
