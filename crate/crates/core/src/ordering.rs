//! 1D similarity ordering and species coherence.
//!
//! Coherence of a species is the longest contiguous run of that species in the
//! sorted sequence divided by its total count, as a percentage.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neighbors::{tsne_embed, LowDimEmbedding, TsneConfig};
use crate::store::EmbeddingMatrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ordering {
    /// Row indices sorted by coordinate, ties by item id.
    pub permutation: Vec<usize>,
    /// 1D coordinate of each row, in row order.
    pub coordinates: Vec<f64>,
    pub item_ids: Vec<String>,
    pub seed: Option<u64>,
}

impl Ordering {
    pub fn sorted_ids(&self) -> Vec<&str> {
        self.permutation.iter().map(|&i| self.item_ids[i].as_str()).collect()
    }
}

pub fn sort_1d(embedding: &LowDimEmbedding) -> Result<Ordering> {
    if embedding.output_dim != 1 {
        return Err(Error::invalid(format!(
            "sorting needs a 1D embedding, got {} dimensions",
            embedding.output_dim
        )));
    }
    let seed = match &embedding.config {
        crate::neighbors::EmbedConfig::Tsne(c) => Some(c.seed),
        crate::neighbors::EmbedConfig::Umap(c) => Some(c.seed),
    };
    Ok(order_by(&embedding.coords, &embedding.item_ids, seed))
}

/// Ascending order of `coordinates`, ties broken by `item_ids`.
pub fn order_by(coordinates: &[f64], item_ids: &[String], seed: Option<u64>) -> Ordering {
    let mut permutation: Vec<usize> = (0..coordinates.len()).collect();
    permutation.sort_by(|&a, &b| {
        coordinates[a]
            .total_cmp(&coordinates[b])
            .then_with(|| item_ids[a].cmp(&item_ids[b]))
    });
    Ordering {
        permutation,
        coordinates: coordinates.to_vec(),
        item_ids: item_ids.to_vec(),
        seed,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeciesCoherence {
    pub species: String,
    pub max_run_length: usize,
    pub total_count: usize,
    pub coherence_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoherenceReport {
    /// Species in order of first appearance in row order.
    pub per_species: Vec<SpeciesCoherence>,
    pub overall_pct: f64,
}

/// Longest run per distinct label, labels in first-appearance order of `seq`.
pub fn longest_runs<T: PartialEq + Clone>(seq: &[T]) -> Vec<(T, usize, usize)> {
    let mut out: Vec<(T, usize, usize)> = Vec::new();
    let mut i = 0;
    while i < seq.len() {
        let mut j = i + 1;
        while j < seq.len() && seq[j] == seq[i] {
            j += 1;
        }
        let run = j - i;
        match out.iter_mut().find(|e| e.0 == seq[i]) {
            Some(e) => {
                e.1 = e.1.max(run);
                e.2 += run;
            }
            None => out.push((seq[i].clone(), run, run)),
        }
        i = j;
    }
    out
}

/// Coherence of `ordering` against per-row `labels`.
pub fn coherence(ordering: &Ordering, labels: &[Option<String>]) -> Result<CoherenceReport> {
    if labels.len() != ordering.permutation.len() {
        return Err(Error::invalid("label count differs from ordering length"));
    }
    let mut appearance: Vec<&str> = Vec::new();
    for (i, l) in labels.iter().enumerate() {
        let l = l.as_deref().ok_or_else(|| Error::MissingLabel {
            item: ordering.item_ids[i].clone(),
        })?;
        if !appearance.contains(&l) {
            appearance.push(l);
        }
    }
    let sequence: Vec<&str> = ordering
        .permutation
        .iter()
        .map(|&i| labels[i].as_deref().unwrap())
        .collect();
    let runs = longest_runs(&sequence);
    let per_species: Vec<SpeciesCoherence> = appearance
        .iter()
        .map(|s| {
            let &(_, max_run, total) = runs.iter().find(|r| r.0 == *s).unwrap();
            SpeciesCoherence {
                species: s.to_string(),
                max_run_length: max_run,
                total_count: total,
                coherence_pct: 100.0 * max_run as f64 / total as f64,
            }
        })
        .collect();
    let n: usize = per_species.iter().map(|s| s.total_count).sum();
    let overall_pct = per_species
        .iter()
        .map(|s| s.coherence_pct * s.total_count as f64)
        .sum::<f64>()
        / n as f64;
    Ok(CoherenceReport {
        per_species,
        overall_pct,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeciesAggregate {
    pub species: String,
    pub total_count: usize,
    pub mean_pct: f64,
    /// Sample standard deviation; absent for a single run.
    pub std_pct: Option<f64>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateCoherence {
    pub runs: usize,
    pub seeds: Vec<u64>,
    pub per_species: Vec<SpeciesAggregate>,
    pub total_count: usize,
    pub overall_mean_pct: f64,
    pub overall_std_pct: Option<f64>,
    pub overall_values: Vec<f64>,
}

/// Mean and sample standard deviation (None below two values).
pub fn mean_std(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, None);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, Some(var.sqrt()))
}

/// Combine per-run reports that share one species set.
pub fn summarize(reports: &[CoherenceReport], seeds: Vec<u64>) -> Result<AggregateCoherence> {
    let first = reports
        .first()
        .ok_or_else(|| Error::invalid("no coherence runs to aggregate"))?;
    let per_species = first
        .per_species
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let values: Vec<f64> = reports.iter().map(|r| r.per_species[k].coherence_pct).collect();
            let (mean_pct, std_pct) = mean_std(&values);
            SpeciesAggregate {
                species: s.species.clone(),
                total_count: s.total_count,
                mean_pct,
                std_pct,
                values,
            }
        })
        .collect();
    let overall_values: Vec<f64> = reports.iter().map(|r| r.overall_pct).collect();
    let (overall_mean_pct, overall_std_pct) = mean_std(&overall_values);
    Ok(AggregateCoherence {
        runs: reports.len(),
        seeds,
        per_species,
        total_count: first.per_species.iter().map(|s| s.total_count).sum(),
        overall_mean_pct,
        overall_std_pct,
        overall_values,
    })
}

/// 1D t-SNE orderings for seeds `config.seed + 0 .. runs`.
pub fn ordering_runs(m: &EmbeddingMatrix, config: &TsneConfig, runs: usize) -> Result<Vec<Ordering>> {
    if runs == 0 {
        return Err(Error::invalid("runs must be at least 1"));
    }
    let config = TsneConfig {
        output_dim: 1,
        ..config.clone()
    };
    let seeds: Vec<u64> = (0..runs as u64).map(|r| config.seed.wrapping_add(r)).collect();
    seeds
        .par_iter()
        .map(|&seed| {
            let emb = tsne_embed(m, &TsneConfig { seed, ..config.clone() })
                .map_err(|e| Error::invalid(format!("t-SNE run with seed {seed} failed: {e}")))?;
            sort_1d(&emb)
        })
        .collect()
}

/// Coherence of each ordering against per-row labels, summarized.
pub fn score_orderings(orderings: &[Ordering], labels: &[Option<String>]) -> Result<AggregateCoherence> {
    let reports = orderings
        .iter()
        .map(|o| coherence(o, labels))
        .collect::<Result<Vec<_>>>()?;
    summarize(&reports, orderings.iter().map(|o| o.seed.unwrap_or(0)).collect())
}

/// t-SNE orderings for seeds `config.seed + 0 .. runs`, each scored for coherence.
pub fn aggregate_runs(
    m: &EmbeddingMatrix,
    config: &TsneConfig,
    runs: usize,
) -> Result<(AggregateCoherence, Vec<Ordering>)> {
    if let Some(it) = m.items().iter().find(|it| it.label.is_none()) {
        return Err(Error::MissingLabel {
            item: it.item_id.clone(),
        });
    }
    let orderings = ordering_runs(m, config, runs)?;
    Ok((score_orderings(&orderings, &m.labels())?, orderings))
}

pub fn format_pct(mean: f64, std: Option<f64>) -> String {
    match std {
        Some(s) => format!("{mean:.1} ± {s:.1}%"),
        None => format!("{mean:.1}%"),
    }
}

/// Species | Coherence | N, with an overall row.
pub fn render_coherence_table(agg: &AggregateCoherence) -> String {
    let mut rows: Vec<[String; 3]> = vec![["Species".into(), "Coherence".into(), "N".into()]];
    for s in &agg.per_species {
        rows.push([
            s.species.clone(),
            format_pct(s.mean_pct, s.std_pct),
            s.total_count.to_string(),
        ]);
    }
    let body = rows.len();
    rows.push([
        "Overall".into(),
        format_pct(agg.overall_mean_pct, agg.overall_std_pct),
        agg.total_count.to_string(),
    ]);
    let widths: Vec<usize> = (0..3)
        .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap())
        .collect();
    let rule = "-".repeat(widths.iter().sum::<usize>() + 4);
    let mut out = String::new();
    for (i, r) in rows.iter().enumerate() {
        if i == 1 || i == body {
            out.push_str(&rule);
            out.push('\n');
        }
        let pad = |s: &str, w: usize| " ".repeat(w - s.chars().count());
        out.push_str(&format!(
            "{}{}  {}{}  {}{}\n",
            r[0],
            pad(&r[0], widths[0]),
            pad(&r[1], widths[1]),
            r[1],
            pad(&r[2], widths[2]),
            r[2]
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("id{i:03}")).collect()
    }

    fn labels(s: &[&str]) -> Vec<Option<String>> {
        s.iter().map(|l| Some(l.to_string())).collect()
    }

    #[test]
    fn sorts_ascending() {
        let o = order_by(&[3.2, -1.0, 0.5], &ids(3), None);
        assert_eq!(o.permutation, vec![1, 2, 0]);
    }

    #[test]
    fn ties_follow_item_id() {
        let item_ids = vec!["b".to_string(), "a".to_string(), "c".to_string()];
        let o = order_by(&[1.0, 1.0, 0.0], &item_ids, None);
        assert_eq!(o.permutation, vec![2, 1, 0]);
    }

    #[test]
    fn negated_coordinates_reverse() {
        let c = [0.3, -2.0, 5.5, 1.25];
        let neg: Vec<f64> = c.iter().map(|v| -v).collect();
        let mut fwd = order_by(&c, &ids(4), None).permutation;
        fwd.reverse();
        assert_eq!(fwd, order_by(&neg, &ids(4), None).permutation);
    }

    #[test]
    fn hand_counted_runs() {
        let o = order_by(&[0.0, 1.0, 2.0, 3.0, 4.0, 5.0], &ids(6), None);
        let r = coherence(&o, &labels(&["A", "A", "B", "A", "A", "A"])).unwrap();
        assert_eq!(r.per_species[0].species, "A");
        assert!((r.per_species[0].coherence_pct - 60.0).abs() < 1e-12);
        assert_eq!(r.per_species[1].coherence_pct, 100.0);
        assert!((r.overall_pct - (60.0 * 5.0 + 100.0) / 6.0).abs() < 1e-12);
    }

    #[test]
    fn grouped_sequence_is_fully_coherent() {
        let o = order_by(&[5.0, 4.0, 3.0, 2.0, 1.0], &ids(5), None);
        let r = coherence(&o, &labels(&["x", "x", "y", "y", "z"])).unwrap();
        assert!(r.per_species.iter().all(|s| s.coherence_pct == 100.0));
        assert_eq!(r.overall_pct, 100.0);
    }

    #[test]
    fn unlabeled_item_is_rejected() {
        let o = order_by(&[0.0, 1.0], &ids(2), None);
        let err = coherence(&o, &[Some("a".into()), None]).unwrap_err();
        assert!(err.to_string().contains("evaluation requires labels"));
    }

    #[test]
    fn spread_arithmetic() {
        assert_eq!(mean_std(&[72.0, 72.0, 72.0]), (72.0, Some(0.0)));
        let (m, s) = mean_std(&[80.0, 90.0]);
        assert_eq!(m, 85.0);
        assert!((s.unwrap() - 7.0710678118654755).abs() < 1e-12);
        assert_eq!(mean_std(&[42.0]), (42.0, None));
    }

    #[test]
    fn table_formatting() {
        assert_eq!(format_pct(100.0, Some(0.0)), "100.0 ± 0.0%");
        assert_eq!(format_pct(99.24, Some(0.78)), "99.2 ± 0.8%");
        let o = order_by(&[0.0, 1.0, 2.0], &ids(3), None);
        let r = coherence(&o, &labels(&["lion", "lion", "oryx"])).unwrap();
        let agg = summarize(&[r.clone(), r], vec![0, 1]).unwrap();
        let text = render_coherence_table(&agg);
        assert!(text.contains("lion"));
        assert!(text.contains("100.0 ± 0.0%"));
        assert!(text.lines().last().unwrap().starts_with("Overall"));
    }
}
