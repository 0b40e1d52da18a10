//! Full-covariance Gaussian mixtures fitted by EM, and BIC model selection.
//!
//! BIC(k) = −2·ln L + p(k)·ln N with p(k) = k·[d + d(d+1)/2] + (k − 1): means,
//! covariance upper triangles and the k − 1 free mixture weights. The selected
//! component count is the arg-min over a closed range, ties going to the
//! smaller k.
//!
//! Each restart seeds means with k-means++, starts every component at the
//! pooled (ML) data covariance with uniform weights, and iterates until the
//! relative change in log-likelihood drops below `tol`. The random stream for
//! a given `(seed, k)` pair is fixed, so a sweep gives the same models whether
//! the k values run serially or in parallel.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::EmbeddingMatrix;

/// Relative regularization steps applied to `trace(Σ)/d` when Cholesky fails.
const REG_STEPS: [f64; 5] = [1e-6, 1e-5, 1e-4, 1e-3, 1e-2];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmOptions {
    pub restarts: usize,
    pub max_iter: usize,
    /// Relative log-likelihood change that counts as converged.
    pub tol: f64,
}

impl Default for EmOptions {
    fn default() -> Self {
        EmOptions {
            restarts: 5,
            max_iter: 200,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitInfo {
    /// M-steps performed by the winning restart.
    pub iterations: usize,
    pub converged: bool,
    /// Index of the winning restart.
    pub restart: usize,
    /// Log-likelihood before each M-step and after the last one.
    pub log_likelihood_trace: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmModel {
    pub k: usize,
    pub dim: usize,
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    /// One d×d matrix per component, as rows.
    pub covariances: Vec<Vec<Vec<f64>>>,
    pub log_likelihood: f64,
    pub fit: FitInfo,
}

/// Cluster index per item; `-1` marks DBSCAN noise.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HardAssignment {
    pub cluster_of: Vec<i64>,
    pub k: usize,
}

impl HardAssignment {
    pub const NOISE: i64 = -1;

    pub fn new(cluster_of: Vec<i64>, k: usize) -> Result<Self> {
        if let Some(bad) = cluster_of
            .iter()
            .find(|&&c| c != Self::NOISE && (c < 0 || c as usize >= k))
        {
            return Err(Error::invalid(format!("cluster index {bad} outside [0, {k})")));
        }
        Ok(HardAssignment { cluster_of, k })
    }

    pub fn len(&self) -> usize {
        self.cluster_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cluster_of.is_empty()
    }

    pub fn noise_count(&self) -> usize {
        self.cluster_of.iter().filter(|&&c| c == Self::NOISE).count()
    }

    /// Member count per cluster id.
    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &c in &self.cluster_of {
            if c >= 0 {
                sizes[c as usize] += 1;
            }
        }
        sizes
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BicEntry {
    pub k: usize,
    pub params: usize,
    pub bic: Option<f64>,
    pub log_likelihood: Option<f64>,
    pub iterations: Option<usize>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BicReport {
    pub entries: Vec<BicEntry>,
    pub selected_k: usize,
    pub search_range: [usize; 2],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BicScore {
    pub params: usize,
    pub value: f64,
}

/// Free parameters of a k-component full-covariance mixture in d dimensions.
pub fn parameter_count(k: usize, d: usize) -> usize {
    k * (d + d * (d + 1) / 2) + (k - 1)
}

pub fn bic(model: &GmmModel, n: usize) -> Result<BicScore> {
    if n < 2 {
        return Err(Error::invalid("BIC needs at least 2 samples"));
    }
    let params = parameter_count(model.k, model.dim);
    Ok(BicScore {
        params,
        value: -2.0 * model.log_likelihood + params as f64 * (n as f64).ln(),
    })
}

// Precomputed per-component terms for density evaluation.
struct Component {
    log_weight: f64,
    mean: Vec<f64>,
    // Row-major lower Cholesky factor.
    chol: Vec<f64>,
    // −½(d·ln 2π + ln det Σ)
    log_norm: f64,
}

impl Component {
    fn log_density(&self, x: &[f64], scratch: &mut [f64]) -> f64 {
        let d = self.mean.len();
        // Forward substitution L z = x − μ.
        let mut maha = 0.0;
        for i in 0..d {
            let mut s = x[i] - self.mean[i];
            let row = &self.chol[i * d..i * d + i];
            for (l, z) in row.iter().zip(scratch.iter()) {
                s -= l * z;
            }
            let z = s / self.chol[i * d + i];
            scratch[i] = z;
            maha += z * z;
        }
        self.log_norm - 0.5 * maha
    }
}

fn trace(cov: &DMatrix<f64>) -> f64 {
    (0..cov.nrows()).map(|i| cov[(i, i)]).sum()
}

/// Cholesky factor of `cov`, regularizing the diagonal in place if needed.
fn factor_with_regularization(cov: &mut DMatrix<f64>, component: usize) -> Result<Cholesky<f64, nalgebra::Dyn>> {
    if let Some(ch) = Cholesky::new(cov.clone()) {
        return Ok(ch);
    }
    let d = cov.nrows();
    let base = trace(cov) / d as f64;
    if base > 0.0 && base.is_finite() {
        for factor in REG_STEPS {
            let mut reg = cov.clone();
            for i in 0..d {
                reg[(i, i)] += factor * base;
            }
            if let Some(ch) = Cholesky::new(reg.clone()) {
                *cov = reg;
                return Ok(ch);
            }
        }
    }
    Err(Error::SingularCovariance {
        component,
        max_reg: REG_STEPS[REG_STEPS.len() - 1],
    })
}

fn components_of(weights: &[f64], means: &[Vec<f64>], covs: &mut [DMatrix<f64>]) -> Result<Vec<Component>> {
    let d = means[0].len();
    let mut out = Vec::with_capacity(weights.len());
    for (j, cov) in covs.iter_mut().enumerate() {
        let ch = factor_with_regularization(cov, j)?;
        let l = ch.l();
        let log_det: f64 = 2.0 * (0..d).map(|i| l[(i, i)].ln()).sum::<f64>();
        let mut chol = vec![0.0; d * d];
        for r in 0..d {
            for c in 0..=r {
                chol[r * d + c] = l[(r, c)];
            }
        }
        out.push(Component {
            log_weight: weights[j].ln(),
            mean: means[j].clone(),
            chol,
            log_norm: -0.5 * (d as f64 * (2.0 * PI).ln() + log_det),
        });
    }
    Ok(out)
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

// Fills `resp` (N×k row-major) with log joint densities, normalizes to
// responsibilities in place and returns the total log-likelihood.
fn e_step(comps: &[Component], m: &EmbeddingMatrix, resp: &mut [f64]) -> f64 {
    let k = comps.len();
    let mut scratch = vec![0.0; m.dim()];
    let mut total = 0.0;
    for (x, row) in m.rows().zip(resp.chunks_exact_mut(k)) {
        for (slot, c) in row.iter_mut().zip(comps) {
            *slot = c.log_weight + c.log_density(x, &mut scratch);
        }
        let lse = log_sum_exp(row);
        total += lse;
        row.iter_mut().for_each(|v| *v = (*v - lse).exp());
    }
    total
}

struct Params {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    covs: Vec<DMatrix<f64>>,
}

fn m_step(m: &EmbeddingMatrix, resp: &[f64], k: usize) -> Result<Params> {
    let (n, d) = (m.n(), m.dim());
    let mut nk = vec![0.0; k];
    let mut means = vec![vec![0.0; d]; k];
    for (x, r) in m.rows().zip(resp.chunks_exact(k)) {
        for j in 0..k {
            nk[j] += r[j];
            for (acc, xi) in means[j].iter_mut().zip(x) {
                *acc += r[j] * xi;
            }
        }
    }
    for j in 0..k {
        if !(nk[j] > f64::MIN_POSITIVE * 1e10) {
            return Err(Error::SingularCovariance {
                component: j,
                max_reg: REG_STEPS[REG_STEPS.len() - 1],
            });
        }
        means[j].iter_mut().for_each(|v| *v /= nk[j]);
    }
    let mut covs = vec![DMatrix::<f64>::zeros(d, d); k];
    let mut diff = vec![0.0; d];
    for (x, r) in m.rows().zip(resp.chunks_exact(k)) {
        for j in 0..k {
            let w = r[j];
            if w == 0.0 {
                continue;
            }
            for (t, (xi, mi)) in diff.iter_mut().zip(x.iter().zip(&means[j])) {
                *t = xi - mi;
            }
            let cov = &mut covs[j];
            for a in 0..d {
                let wa = w * diff[a];
                for b in 0..=a {
                    cov[(a, b)] += wa * diff[b];
                }
            }
        }
    }
    for j in 0..k {
        let cov = &mut covs[j];
        for a in 0..d {
            for b in 0..=a {
                let v = cov[(a, b)] / nk[j];
                cov[(a, b)] = v;
                cov[(b, a)] = v;
            }
        }
    }
    let weights = nk.iter().map(|v| v / n as f64).collect();
    Ok(Params { weights, means, covs })
}

fn pooled_covariance(m: &EmbeddingMatrix) -> DMatrix<f64> {
    let d = m.dim();
    let resp = vec![1.0; m.n()];
    m_step(m, &resp, 1)
        .map(|p| p.covs.into_iter().next().unwrap())
        .unwrap_or_else(|_| DMatrix::identity(d, d))
}

fn kmeans_pp_seeds(m: &EmbeddingMatrix, k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = m.n();
    let mut seeds = Vec::with_capacity(k);
    let first = rng.random_range(0..n);
    seeds.push(m.row(first).to_vec());
    let mut d2: Vec<f64> = m
        .rows()
        .map(|x| crate::linalg::squared_euclidean(x, &seeds[0]))
        .collect();
    while seeds.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, v) in d2.iter().enumerate() {
                acc += v;
                if acc > target {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let seed = m.row(pick).to_vec();
        for (slot, x) in d2.iter_mut().zip(m.rows()) {
            *slot = slot.min(crate::linalg::squared_euclidean(x, &seed));
        }
        seeds.push(seed);
    }
    seeds
}

fn rng_for(seed: u64, k: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k as u64);
    rng
}

fn fit_once(m: &EmbeddingMatrix, k: usize, opts: &EmOptions, rng: &mut ChaCha8Rng) -> Result<(Params, FitInfo)> {
    let pooled = pooled_covariance(m);
    let mut params = Params {
        weights: vec![1.0 / k as f64; k],
        means: kmeans_pp_seeds(m, k, rng),
        covs: vec![pooled; k],
    };
    let mut resp = vec![0.0; m.n() * k];
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    loop {
        let comps = components_of(&params.weights, &params.means, &mut params.covs)?;
        let ll = e_step(&comps, m, &mut resp);
        if !ll.is_finite() {
            return Err(Error::invalid("non-finite log-likelihood during EM"));
        }
        if let Some(&prev) = trace.last() {
            let prev: f64 = prev;
            if (ll - prev).abs() <= opts.tol * ll.abs().max(f64::MIN_POSITIVE) {
                converged = true;
            }
        }
        trace.push(ll);
        if converged || iterations >= opts.max_iter {
            break;
        }
        params = m_step(m, &resp, k)?;
        iterations += 1;
    }
    Ok((
        params,
        FitInfo {
            iterations,
            converged,
            restart: 0,
            log_likelihood_trace: trace,
        },
    ))
}

pub fn em_fit(m: &EmbeddingMatrix, k: usize, seed: u64) -> Result<GmmModel> {
    em_fit_with(m, k, seed, &EmOptions::default())
}

/// Fit a k-component mixture; the best of `opts.restarts` runs is returned.
pub fn em_fit_with(m: &EmbeddingMatrix, k: usize, seed: u64, opts: &EmOptions) -> Result<GmmModel> {
    if k == 0 || k > m.n() {
        return Err(Error::invalid(format!("component count {k} must be in [1, {}]", m.n())));
    }
    if opts.restarts == 0 {
        return Err(Error::invalid("at least one EM restart is required"));
    }
    let mut rng = rng_for(seed, k);
    let mut best: Option<(Params, FitInfo)> = None;
    let mut last_err = None;
    for restart in 0..opts.restarts {
        match fit_once(m, k, opts, &mut rng) {
            Ok((params, mut info)) => {
                info.restart = restart;
                let ll = *info.log_likelihood_trace.last().unwrap();
                let better = best
                    .as_ref()
                    .is_none_or(|(_, b)| ll > *b.log_likelihood_trace.last().unwrap());
                if better {
                    best = Some((params, info));
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    let Some((params, fit)) = best else {
        return Err(last_err.unwrap());
    };
    let d = m.dim();
    Ok(GmmModel {
        k,
        dim: d,
        weights: params.weights,
        means: params.means,
        covariances: params
            .covs
            .iter()
            .map(|c| (0..d).map(|r| c.row(r).iter().copied().collect()).collect())
            .collect(),
        log_likelihood: *fit.log_likelihood_trace.last().unwrap(),
        fit,
    })
}

impl GmmModel {
    fn components(&self) -> Result<Vec<Component>> {
        let d = self.dim;
        let mut covs: Vec<DMatrix<f64>> = self
            .covariances
            .iter()
            .map(|rows| DMatrix::from_fn(d, d, |r, c| rows[r][c]))
            .collect();
        components_of(&self.weights, &self.means, &mut covs)
    }

    fn check_dim(&self, m: &EmbeddingMatrix) -> Result<()> {
        if m.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                row: 0,
                expected: self.dim,
                found: m.dim(),
            });
        }
        Ok(())
    }
}

/// Σᵢ ln Σⱼ wⱼ 𝒩(xᵢ; μⱼ, Σⱼ), log-sum-exp stabilized.
pub fn log_likelihood(model: &GmmModel, m: &EmbeddingMatrix) -> Result<f64> {
    model.check_dim(m)?;
    let comps = model.components()?;
    let mut resp = vec![0.0; m.n() * model.k];
    Ok(e_step(&comps, m, &mut resp))
}

/// Posterior component probabilities, one row per item.
pub fn responsibilities(model: &GmmModel, m: &EmbeddingMatrix) -> Result<Vec<Vec<f64>>> {
    model.check_dim(m)?;
    let comps = model.components()?;
    let mut resp = vec![0.0; m.n() * model.k];
    e_step(&comps, m, &mut resp);
    Ok(resp.chunks_exact(model.k).map(|r| r.to_vec()).collect())
}

/// Arg-max responsibility per item, ties to the lower component index.
pub fn hard_assign(model: &GmmModel, m: &EmbeddingMatrix) -> Result<HardAssignment> {
    model.check_dim(m)?;
    let comps = model.components()?;
    let mut scratch = vec![0.0; m.dim()];
    let cluster_of = m
        .rows()
        .map(|x| {
            let mut best = 0usize;
            let mut best_val = f64::NEG_INFINITY;
            for (j, c) in comps.iter().enumerate() {
                let v = c.log_weight + c.log_density(x, &mut scratch);
                if v > best_val {
                    best_val = v;
                    best = j;
                }
            }
            best as i64
        })
        .collect();
    HardAssignment::new(cluster_of, model.k)
}

pub fn select_components(m: &EmbeddingMatrix, k_min: usize, k_max: usize, seed: u64) -> Result<(BicReport, GmmModel)> {
    select_components_with(m, k_min, k_max, seed, &EmOptions::default())
}

/// Fit every k in `[k_min, k_max]` and keep the BIC minimizer.
pub fn select_components_with(
    m: &EmbeddingMatrix,
    k_min: usize,
    k_max: usize,
    seed: u64,
    opts: &EmOptions,
) -> Result<(BicReport, GmmModel)> {
    if k_min < 2 || k_min > k_max {
        return Err(Error::invalid(format!(
            "component range [{k_min}, {k_max}] must satisfy 2 <= k_min <= k_max"
        )));
    }
    if k_max >= m.n() {
        return Err(Error::invalid(format!(
            "k_max = {k_max} must be below the sample count {}",
            m.n()
        )));
    }
    let n = m.n();
    let fits: Vec<(usize, Result<GmmModel>)> = (k_min..=k_max)
        .into_par_iter()
        .map(|k| (k, em_fit_with(m, k, seed, opts)))
        .collect();

    let mut entries = Vec::with_capacity(fits.len());
    let mut best: Option<(f64, GmmModel)> = None;
    for (k, fit) in fits {
        let params = parameter_count(k, m.dim());
        match fit.and_then(|model| bic(&model, n).map(|s| (s, model))) {
            Ok((score, model)) => {
                entries.push(BicEntry {
                    k,
                    params,
                    bic: Some(score.value),
                    log_likelihood: Some(model.log_likelihood),
                    iterations: Some(model.fit.iterations),
                    error: None,
                });
                if best.as_ref().is_none_or(|(b, _)| score.value < *b) {
                    best = Some((score.value, model));
                }
            }
            Err(e) => entries.push(BicEntry {
                k,
                params,
                bic: None,
                log_likelihood: None,
                iterations: None,
                error: Some(e.to_string()),
            }),
        }
    }
    let Some((_, model)) = best else {
        return Err(Error::AllFitsFailed { k_min, k_max });
    };
    Ok((
        BicReport {
            entries,
            selected_k: model.k,
            search_range: [k_min, k_max],
        },
        model,
    ))
}
