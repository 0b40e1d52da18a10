//! Seeded labeled Gaussian-mixture datasets with a guaranteed centroid separation.
//!
//! Centroids sit on the vertices of a regular simplex with edge length
//! `separation` (in units of the within-cluster σ = 1), randomly rotated into
//! `dim` dimensions, so every pair of centroids is exactly `separation` apart.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::{save_embeddings, EmbeddingMatrix, Format, ItemRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureSpec {
    pub n_clusters: usize,
    pub per_cluster_n: usize,
    pub dim: usize,
    pub separation: f64,
    pub seed: u64,
    /// Per-cluster, per-axis σ drawn uniformly from this range when set.
    #[serde(default)]
    pub anisotropy: Option<(f64, f64)>,
}

impl FixtureSpec {
    pub fn new(n_clusters: usize, per_cluster_n: usize, dim: usize, separation: f64, seed: u64) -> Self {
        FixtureSpec {
            n_clusters,
            per_cluster_n,
            dim,
            separation,
            seed,
            anisotropy: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_clusters == 0 || self.per_cluster_n == 0 || self.dim == 0 {
            return Err(Error::invalid("fixture counts must all be at least 1"));
        }
        if !(self.separation > 0.0) {
            return Err(Error::invalid("fixture separation must be positive"));
        }
        if self.dim < self.n_clusters - 1 {
            return Err(Error::invalid(format!(
                "cannot place {} simplex vertices in {} dimensions",
                self.n_clusters, self.dim
            )));
        }
        if let Some((lo, hi)) = self.anisotropy {
            if !(lo > 0.0 && hi >= lo) {
                return Err(Error::invalid("anisotropy range must satisfy 0 < lo <= hi"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Fixture {
    /// Labeled embeddings, cluster-major row order.
    pub embeddings: EmbeddingMatrix,
    pub centroids: Vec<Vec<f64>>,
    /// Generating component of each row.
    pub truth: Vec<usize>,
}

pub fn cluster_label(c: usize) -> String {
    format!("cluster_{c}")
}

pub fn generate(spec: &FixtureSpec) -> Result<Fixture> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let centroids = simplex_centroids(spec.n_clusters, spec.dim, spec.separation, &mut rng);

    let n = spec.n_clusters * spec.per_cluster_n;
    let mut data = Vec::with_capacity(n * spec.dim);
    let mut items = Vec::with_capacity(n);
    let mut truth = Vec::with_capacity(n);
    for (c, centroid) in centroids.iter().enumerate() {
        let scales: Vec<f64> = match spec.anisotropy {
            Some((lo, hi)) => (0..spec.dim).map(|_| rng.random_range(lo..=hi)).collect(),
            None => vec![1.0; spec.dim],
        };
        for _ in 0..spec.per_cluster_n {
            for (mu, s) in centroid.iter().zip(&scales) {
                let z: f64 = rng.sample(StandardNormal);
                data.push(mu + s * z);
            }
            items.push(ItemRecord::labeled(
                format!("item_{:05}", items.len()),
                cluster_label(c),
            ));
            truth.push(c);
        }
    }
    Ok(Fixture {
        embeddings: EmbeddingMatrix::new(items, data, spec.dim)?,
        centroids,
        truth,
    })
}

fn simplex_centroids(k: usize, dim: usize, separation: f64, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    if k == 1 {
        return vec![vec![0.0; dim]];
    }
    // Centered standard basis in R^k: pairwise distance sqrt(2).
    let scale = separation / 2f64.sqrt();
    let centered: Vec<Vec<f64>> = (0..k)
        .map(|i| {
            (0..k)
                .map(|j| scale * (if i == j { 1.0 } else { 0.0 } - 1.0 / k as f64))
                .collect()
        })
        .collect();
    // Orthonormal basis of their (k-1)-dimensional span.
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k - 1);
    for v in centered.iter().take(k - 1) {
        let mut u = v.clone();
        for b in &basis {
            let p: f64 = u.iter().zip(b).map(|(x, y)| x * y).sum();
            u.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        u.iter_mut().for_each(|x| *x /= norm);
        basis.push(u);
    }
    let rotation = random_rotation(dim, rng);
    centered
        .iter()
        .map(|v| {
            let mut coords = vec![0.0; dim];
            for (slot, b) in coords.iter_mut().zip(&basis) {
                *slot = v.iter().zip(b).map(|(x, y)| x * y).sum();
            }
            (0..dim)
                .map(|r| (0..dim).map(|c| rotation[(r, c)] * coords[c]).sum())
                .collect()
        })
        .collect()
}

// Haar-distributed orthogonal matrix via QR of a Gaussian matrix.
fn random_rotation(dim: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(dim, dim, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for c in 0..dim {
        if r[(c, c)] < 0.0 {
            q.column_mut(c).neg_mut();
        }
    }
    q
}

/// Write `<stem>.csv`, `<stem>.jsonl` and `raw/<stem>.f32` (+ its `raw/<stem>.jsonl`
/// sidecar) into `dir`.
pub fn write_all_formats(m: &EmbeddingMatrix, dir: &Path, stem: &str) -> Result<Vec<(Format, PathBuf)>> {
    let raw_dir = dir.join("raw");
    std::fs::create_dir_all(&raw_dir).map_err(|e| Error::io(&raw_dir, e))?;
    let targets = vec![
        (Format::Csv, dir.join(format!("{stem}.csv"))),
        (Format::Jsonl, dir.join(format!("{stem}.jsonl"))),
        (Format::Rawf32, raw_dir.join(format!("{stem}.f32"))),
    ];
    for (fmt, path) in &targets {
        save_embeddings(m, path, *fmt)?;
    }
    Ok(targets)
}
