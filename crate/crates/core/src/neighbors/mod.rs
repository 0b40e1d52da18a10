//! Neighbor-embedding reductions: exact t-SNE and UMAP.

mod tsne;
mod umap;

pub use tsne::{
    joint_probabilities, kl_divergence, kl_gradient, perplexity_calibration, tsne_embed, Calibration, TsneConfig,
};
pub use umap::{fit_curve, fuzzy_union, membership_graph, umap_embed, MembershipGraph, UmapConfig};

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::EmbeddingMatrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase")]
pub enum EmbedConfig {
    Tsne(TsneConfig),
    Umap(UmapConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowDimEmbedding {
    pub item_ids: Vec<String>,
    pub output_dim: usize,
    /// Row-major N×output_dim coordinates; row i belongs to input row i.
    pub coords: Vec<f64>,
    pub config: EmbedConfig,
    /// KL divergence (t-SNE) or fuzzy-set cross-entropy (UMAP).
    pub final_objective: f64,
    /// `(iteration, objective)` samples taken during optimization.
    pub objective_trace: Vec<(usize, f64)>,
}

impl LowDimEmbedding {
    pub fn n(&self) -> usize {
        self.item_ids.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.coords[i * self.output_dim..(i + 1) * self.output_dim]
    }

    /// The coordinates as an embedding matrix carrying the source items.
    pub fn to_matrix(&self, source: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
        if source.n() != self.n() {
            return Err(Error::invalid("embedding and source row counts differ"));
        }
        source.with_data(self.coords.clone(), self.output_dim)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        let io = |e| Error::io(path, e);
        let header: Vec<String> = std::iter::once("item_id".to_string())
            .chain((0..self.output_dim).map(|j| format!("y_{j}")))
            .collect();
        writeln!(w, "{}", header.join(",")).map_err(io)?;
        for (i, id) in self.item_ids.iter().enumerate() {
            let vals: Vec<String> = self.row(i).iter().map(|v| v.to_string()).collect();
            writeln!(w, "{},{}", id, vals.join(",")).map_err(io)?;
        }
        w.flush().map_err(io)
    }
}

pub(crate) fn check_finite(coords: &[f64]) -> Result<()> {
    if coords.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteEmbedding)
    }
}
