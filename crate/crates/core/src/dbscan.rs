//! DBSCAN with brute-force neighborhoods.
//!
//! A point is core when at least `min_pts` points (itself included) lie within
//! `eps`. Clusters are numbered in the order their first core point appears in
//! row order, and a border point belongs to the first cluster that reaches it.

use std::collections::VecDeque;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmm::HardAssignment;
use crate::linalg::squared_euclidean;
use crate::store::EmbeddingMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DbscanParams {
    pub eps: f64,
    pub min_pts: usize,
}

impl DbscanParams {
    pub fn new(eps: f64, min_pts: usize) -> Result<Self> {
        let p = DbscanParams { eps, min_pts };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::invalid("eps must be a positive finite distance"));
        }
        if self.min_pts == 0 {
            return Err(Error::invalid("min_pts must be at least 1"));
        }
        Ok(())
    }
}

fn neighborhoods(m: &EmbeddingMatrix, eps: f64) -> Vec<Vec<usize>> {
    let eps2 = eps * eps;
    (0..m.n())
        .into_par_iter()
        .map(|i| {
            let xi = m.row(i);
            (0..m.n())
                .filter(|&j| squared_euclidean(xi, m.row(j)) <= eps2)
                .collect()
        })
        .collect()
}

pub fn dbscan_fit(m: &EmbeddingMatrix, params: &DbscanParams) -> Result<HardAssignment> {
    params.validate()?;
    let n = m.n();
    let hoods = neighborhoods(m, params.eps);
    let core: Vec<bool> = hoods.iter().map(|h| h.len() >= params.min_pts).collect();

    let mut label = vec![HardAssignment::NOISE; n];
    let mut assigned = vec![false; n];
    let mut clusters = 0i64;
    let mut queue = VecDeque::new();
    for start in 0..n {
        if assigned[start] || !core[start] {
            continue;
        }
        assigned[start] = true;
        label[start] = clusters;
        queue.extend(hoods[start].iter().copied());
        while let Some(q) = queue.pop_front() {
            if assigned[q] {
                continue;
            }
            assigned[q] = true;
            label[q] = clusters;
            if core[q] {
                queue.extend(hoods[q].iter().copied());
            }
        }
        clusters += 1;
    }
    HardAssignment::new(label, clusters as usize)
}

/// Sorted distances from every point to its k-th nearest other point.
pub fn k_distance_profile(m: &EmbeddingMatrix, k: usize) -> Result<Vec<f64>> {
    let n = m.n();
    if k == 0 || k >= n {
        return Err(Error::invalid(format!("neighbor index {k} outside [1, {n})")));
    }
    let mut out: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let xi = m.row(i);
            let mut d: Vec<f64> = (0..n)
                .filter(|&j| j != i)
                .map(|j| squared_euclidean(xi, m.row(j)))
                .collect();
            let (_, kth, _) = d.select_nth_unstable_by(k - 1, f64::total_cmp);
            kth.sqrt()
        })
        .collect();
    out.sort_by(f64::total_cmp);
    Ok(out)
}
