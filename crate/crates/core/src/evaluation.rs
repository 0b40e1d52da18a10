//! Post-hoc evaluation of hard assignments against species labels.
//!
//! Clusters are matched one-to-one to species by maximizing the matched
//! diagonal mass. Noise items belong to no cluster: they never count as false
//! positives but still depress recall.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmm::HardAssignment;

/// Maximum-weight perfect matching on a square matrix (Kuhn–Munkres with
/// potentials). Returns the total and the column chosen for each row.
pub fn hungarian_max(weights: &[Vec<i64>]) -> (i64, Vec<usize>) {
    let n = weights.len();
    if n == 0 {
        return (0, Vec::new());
    }
    let top = weights.iter().flatten().copied().max().unwrap_or(0);
    let cost = |i: usize, j: usize| top - weights[i - 1][j - 1];
    let inf = i64::MAX / 4;
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of = vec![0usize; n];
    for j in 1..=n {
        col_of[p[j] - 1] = j - 1;
    }
    let total = (0..n).map(|i| weights[i][col_of[i]]).sum();
    (total, col_of)
}

fn best_on(weights: &[Vec<i64>], rows: &[usize], cols: &[usize]) -> i64 {
    let sub: Vec<Vec<i64>> = rows
        .iter()
        .map(|&r| cols.iter().map(|&c| weights[r][c]).collect())
        .collect();
    hungarian_max(&sub).0
}

/// Maximum-weight one-to-one matching of rows to columns of a rectangular
/// non-negative table. Among optimal matchings the one chosen is
/// lexicographically smallest: rows are fixed in index order, each taking the
/// lowest column index that keeps the optimum reachable; a row is left
/// unmatched only when every column option fails.
pub fn max_weight_matching(table: &[Vec<i64>]) -> (i64, Vec<Option<usize>>) {
    let rows = table.len();
    let cols = table.first().map_or(0, |r| r.len());
    let n = rows.max(cols);
    // Dummy rows/columns stand for "unmatched".
    let mut w = vec![vec![0i64; n]; n];
    for (i, r) in table.iter().enumerate() {
        w[i][..cols].copy_from_slice(r);
    }
    let optimum = hungarian_max(&w).0;

    let mut free_rows: Vec<usize> = (0..n).collect();
    let mut free_cols: Vec<usize> = (0..n).collect();
    let mut fixed = 0i64;
    let mut out = vec![None; rows];
    for r in 0..rows {
        free_rows.retain(|&x| x != r);
        let mut chosen = None;
        for (pos, &c) in free_cols.iter().enumerate() {
            // All dummy columns are interchangeable: try only the first.
            if c >= cols && free_cols[..pos].iter().any(|&x| x >= cols) {
                continue;
            }
            let mut rest = free_cols.clone();
            rest.remove(pos);
            if fixed + w[r][c] + best_on(&w, &free_rows, &rest) == optimum {
                chosen = Some(pos);
                break;
            }
        }
        let pos = chosen.expect("optimum is always reachable");
        let c = free_cols.remove(pos);
        fixed += w[r][c];
        out[r] = (c < cols).then_some(c);
    }
    (optimum, out)
}

/// Cluster × species counts over non-noise items, plus per-species noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contingency {
    /// Species in order of first appearance.
    pub species: Vec<String>,
    /// `counts[cluster][species]`.
    pub counts: Vec<Vec<u64>>,
    pub noise: Vec<u64>,
    pub totals: Vec<u64>,
}

pub fn contingency(assignment: &HardAssignment, labels: &[Option<String>]) -> Result<Contingency> {
    if assignment.is_empty() {
        return Err(Error::invalid("empty assignment"));
    }
    if labels.len() != assignment.len() {
        return Err(Error::invalid(format!(
            "{} labels for {} assigned items",
            labels.len(),
            assignment.len()
        )));
    }
    let mut species: Vec<String> = Vec::new();
    let mut index = Vec::with_capacity(labels.len());
    for (i, l) in labels.iter().enumerate() {
        let l = l.as_deref().ok_or_else(|| Error::MissingLabel {
            item: format!("row {i}"),
        })?;
        let s = match species.iter().position(|x| x == l) {
            Some(s) => s,
            None => {
                species.push(l.to_string());
                species.len() - 1
            }
        };
        index.push(s);
    }
    let s_count = species.len();
    let mut counts = vec![vec![0u64; s_count]; assignment.k];
    let mut noise = vec![0u64; s_count];
    let mut totals = vec![0u64; s_count];
    for (&c, &s) in assignment.cluster_of.iter().zip(&index) {
        totals[s] += 1;
        if c < 0 {
            noise[s] += 1;
        } else {
            counts[c as usize][s] += 1;
        }
    }
    Ok(Contingency {
        species,
        counts,
        noise,
        totals,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterMatching {
    /// Matched species for each cluster id, if any.
    pub species_of_cluster: Vec<Option<String>>,
    /// Total matched count (diagonal mass).
    pub matched_total: u64,
}

fn match_contingency(table: &Contingency) -> ClusterMatching {
    // Species are tried in name order for the tie-break.
    let mut by_name: Vec<usize> = (0..table.species.len()).collect();
    by_name.sort_by(|&a, &b| table.species[a].cmp(&table.species[b]));
    let weights: Vec<Vec<i64>> = table
        .counts
        .iter()
        .map(|row| by_name.iter().map(|&s| row[s] as i64).collect())
        .collect();
    // Clusters are fixed in descending order of their count vectors, so the
    // chosen optimum does not depend on how clusters are numbered.
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| weights[b].cmp(&weights[a]).then(a.cmp(&b)));
    let ranked: Vec<Vec<i64>> = order.iter().map(|&c| weights[c].clone()).collect();
    let (total, ranked_cols) = max_weight_matching(&ranked);
    let mut cols = vec![None; weights.len()];
    for (rank, &c) in order.iter().enumerate() {
        cols[c] = ranked_cols[rank];
    }
    ClusterMatching {
        species_of_cluster: cols
            .iter()
            .map(|c| c.map(|c| table.species[by_name[c]].clone()))
            .collect(),
        matched_total: total as u64,
    }
}

pub fn match_clusters(assignment: &HardAssignment, labels: &[Option<String>]) -> Result<ClusterMatching> {
    Ok(match_contingency(&contingency(assignment, labels)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    /// Actual species (row order) and, in the same order, their matched clusters.
    pub species: Vec<String>,
    pub matched_cluster: Vec<Option<usize>>,
    /// `counts[actual][predicted]` over matched clusters.
    pub counts: Vec<Vec<u64>>,
    pub unmatched_cluster_counts: Vec<u64>,
    pub noise_counts: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeciesMetrics {
    pub species: String,
    pub true_positives: u64,
    pub total: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub confusion: ConfusionMatrix,
    pub per_species: Vec<SpeciesMetrics>,
    pub macro_f1: f64,
    pub accuracy: f64,
    pub assignment: ClusterMatching,
}

pub fn evaluate(assignment: &HardAssignment, labels: &[Option<String>]) -> Result<EvalReport> {
    let table = contingency(assignment, labels)?;
    let matching = match_contingency(&table);
    let s_count = table.species.len();
    let matched_cluster: Vec<Option<usize>> = table
        .species
        .iter()
        .map(|s| {
            matching
                .species_of_cluster
                .iter()
                .position(|m| m.as_deref() == Some(s.as_str()))
        })
        .collect();
    let mut counts = vec![vec![0u64; s_count]; s_count];
    let mut unmatched = vec![0u64; s_count];
    for (c, row) in table.counts.iter().enumerate() {
        match matched_cluster.iter().position(|&m| m == Some(c)) {
            Some(col) => (0..s_count).for_each(|a| counts[a][col] = row[a]),
            None => (0..s_count).for_each(|a| unmatched[a] += row[a]),
        }
    }

    let per_species: Vec<SpeciesMetrics> = (0..s_count)
        .map(|s| {
            let tp = counts[s][s];
            let cluster_size: u64 = (0..s_count).map(|a| counts[a][s]).sum();
            let precision = if cluster_size > 0 {
                tp as f64 / cluster_size as f64
            } else {
                0.0
            };
            let recall = tp as f64 / table.totals[s] as f64;
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            SpeciesMetrics {
                species: table.species[s].clone(),
                true_positives: tp,
                total: table.totals[s],
                precision,
                recall,
                f1,
            }
        })
        .collect();
    let macro_f1 = per_species.iter().map(|m| m.f1).sum::<f64>() / s_count as f64;
    let n: u64 = table.totals.iter().sum();
    let tp: u64 = per_species.iter().map(|m| m.true_positives).sum();
    Ok(EvalReport {
        confusion: ConfusionMatrix {
            species: table.species,
            matched_cluster,
            counts,
            unmatched_cluster_counts: unmatched,
            noise_counts: table.noise,
        },
        per_species,
        macro_f1,
        accuracy: tp as f64 / n as f64,
        assignment: matching,
    })
}

/// Expand a species × cluster count table into per-item assignments and labels.
pub fn assignment_from_table(species: &[&str], table: &[Vec<u64>]) -> Result<(HardAssignment, Vec<Option<String>>)> {
    if species.len() != table.len() {
        return Err(Error::invalid("one table row per species required"));
    }
    let k = table.first().map_or(0, |r| r.len());
    if table.iter().any(|r| r.len() != k) {
        return Err(Error::invalid("ragged count table"));
    }
    let mut cluster_of = Vec::new();
    let mut labels = Vec::new();
    for (s, row) in species.iter().zip(table) {
        for (c, &count) in row.iter().enumerate() {
            for _ in 0..count {
                cluster_of.push(c as i64);
                labels.push(Some(s.to_string()));
            }
        }
    }
    Ok((HardAssignment::new(cluster_of, k)?, labels))
}

fn pad(s: &str, w: usize, right: bool) -> String {
    let fill = " ".repeat(w.saturating_sub(s.chars().count()));
    if right {
        format!("{fill}{s}")
    } else {
        format!("{s}{fill}")
    }
}

/// Actual × predicted counts with an F1 column and a macro-average row.
pub fn render_confusion_table(report: &EvalReport) -> String {
    let cm = &report.confusion;
    let show_unmatched = cm.unmatched_cluster_counts.iter().any(|&c| c > 0);
    let show_noise = cm.noise_counts.iter().any(|&c| c > 0);

    let mut header = vec!["Actual \\ Predicted".to_string()];
    header.extend(cm.species.iter().zip(&cm.matched_cluster).map(|(s, c)| match c {
        Some(c) => format!("{s} [c{c}]"),
        None => format!("{s} [-]"),
    }));
    if show_unmatched {
        header.push("Unmatched".into());
    }
    if show_noise {
        header.push("Noise".into());
    }
    header.push("F1".into());

    let mut rows = vec![header];
    for (a, m) in report.per_species.iter().enumerate() {
        let mut r = vec![m.species.clone()];
        r.extend(cm.counts[a].iter().map(|c| c.to_string()));
        if show_unmatched {
            r.push(cm.unmatched_cluster_counts[a].to_string());
        }
        if show_noise {
            r.push(cm.noise_counts[a].to_string());
        }
        r.push(format!("{:.3}", m.f1));
        rows.push(r);
    }
    let cols = rows[0].len();
    let mut macro_row = vec!["Macro Average".to_string()];
    macro_row.extend(std::iter::repeat_n(String::new(), cols - 2));
    macro_row.push(format!("{:.3}", report.macro_f1));

    let widths: Vec<usize> = (0..cols)
        .map(|c| {
            rows.iter()
                .chain(std::iter::once(&macro_row))
                .map(|r| r[c].chars().count())
                .max()
                .unwrap()
        })
        .collect();
    let line = |r: &[String]| -> String {
        let cells: Vec<String> = r.iter().enumerate().map(|(c, s)| pad(s, widths[c], c > 0)).collect();
        cells.join("  ").trim_end().to_string()
    };
    let rule = "-".repeat(widths.iter().sum::<usize>() + 2 * (cols - 1));
    let mut out = String::new();
    out.push_str(&line(&rows[0]));
    out.push('\n');
    out.push_str(&rule);
    out.push('\n');
    for r in &rows[1..] {
        out.push_str(&line(r));
        out.push('\n');
    }
    out.push_str(&rule);
    out.push('\n');
    out.push_str(&line(&macro_row));
    out.push('\n');
    let tp: u64 = report.per_species.iter().map(|m| m.true_positives).sum();
    let n: u64 = report.per_species.iter().map(|m| m.total).sum();
    out.push_str(&format!("Accuracy {tp}/{n} = {:.3}\n", report.accuracy));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_force(table: &[Vec<i64>]) -> i64 {
        let rows = table.len();
        let cols = table[0].len();
        let n = rows.max(cols);
        let mut perm: Vec<usize> = (0..n).collect();
        let mut best = i64::MIN;
        permute(&mut perm, 0, &mut |p| {
            let v = (0..rows).filter(|&r| p[r] < cols).map(|r| table[r][p[r]]).sum();
            best = best.max(v);
        });
        best
    }

    fn permute(p: &mut Vec<usize>, k: usize, f: &mut dyn FnMut(&[usize])) {
        if k == p.len() {
            f(p);
            return;
        }
        for i in k..p.len() {
            p.swap(k, i);
            permute(p, k + 1, f);
            p.swap(k, i);
        }
    }

    #[test]
    fn dominant_diagonal_maps_identity() {
        let (a, l) =
            assignment_from_table(&["a", "b", "c"], &[vec![50, 3, 1], vec![2, 40, 5], vec![0, 6, 33]]).unwrap();
        let m = match_clusters(&a, &l).unwrap();
        assert_eq!(
            m.species_of_cluster,
            vec![Some("a".to_string()), Some("b".to_string()), Some("c".to_string())]
        );
        assert_eq!(m.matched_total, 123);
    }

    #[test]
    fn small_tables_match_brute_force() {
        let tables = [
            vec![vec![3, 1, 4], vec![1, 5, 9], vec![2, 6, 5]],
            vec![vec![7, 7], vec![7, 7], vec![1, 9]],
            vec![vec![0, 0, 0, 8]],
        ];
        for t in &tables {
            let (v, cols) = max_weight_matching(t);
            assert_eq!(v, brute_force(t));
            let recomputed: i64 = cols.iter().enumerate().filter_map(|(r, c)| c.map(|c| t[r][c])).sum();
            assert_eq!(recomputed, v);
        }
    }

    #[test]
    fn ties_prefer_lowest_column_per_row() {
        let (v, cols) = max_weight_matching(&[vec![5, 5], vec![5, 5]]);
        assert_eq!(v, 10);
        assert_eq!(cols, vec![Some(0), Some(1)]);
    }

    #[test]
    fn surplus_cluster_is_unmatched() {
        // 6 clusters, 5 species: cluster 5 takes a slice of species b.
        let mut table: Vec<Vec<u64>> = (0..5)
            .map(|s| (0..6).map(|c| if c == s { 90 } else { 0 }).collect())
            .collect();
        table[1][5] = 10;
        let (a, l) = assignment_from_table(&["a", "b", "c", "d", "e"], &table).unwrap();
        let r = evaluate(&a, &l).unwrap();
        assert_eq!(
            r.assignment.species_of_cluster.iter().filter(|s| s.is_none()).count(),
            1
        );
        assert_eq!(r.assignment.species_of_cluster[5], None);
        assert_eq!(r.confusion.unmatched_cluster_counts[1], 10);
        assert!((r.per_species[1].recall - 0.9).abs() < 1e-15);
        assert_eq!(r.per_species[1].precision, 1.0);
    }

    #[test]
    fn perfect_diagonal() {
        let (a, l) = assignment_from_table(&["x", "y"], &[vec![10, 0], vec![0, 7]]).unwrap();
        let r = evaluate(&a, &l).unwrap();
        assert!(r.per_species.iter().all(|m| m.f1 == 1.0));
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.macro_f1, 1.0);
    }

    #[test]
    fn single_cluster_degenerate_case() {
        let species = ["a", "b", "c", "d", "e"];
        let table: Vec<Vec<u64>> = (0..5).map(|_| vec![20]).collect();
        let (a, l) = assignment_from_table(&species, &table).unwrap();
        let r = evaluate(&a, &l).unwrap();
        let matched = &r.per_species[0];
        assert_eq!(matched.recall, 1.0);
        assert!((matched.precision - 0.2).abs() < 1e-15);
        assert!((matched.f1 - 1.0 / 3.0).abs() < 1e-15);
        assert!(r.per_species[1..].iter().all(|m| m.f1 == 0.0));
        assert!((r.macro_f1 - 1.0 / 15.0).abs() < 1e-15);
    }

    #[test]
    fn noise_only_lowers_recall() {
        let a = HardAssignment::new(vec![0, 0, -1, 1, 1], 2).unwrap();
        let l: Vec<Option<String>> = ["p", "p", "p", "q", "q"].iter().map(|s| Some(s.to_string())).collect();
        let r = evaluate(&a, &l).unwrap();
        assert_eq!(r.per_species[0].precision, 1.0);
        assert!((r.per_species[0].recall - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.confusion.noise_counts, vec![1, 0]);
        assert!((r.accuracy - 0.8).abs() < 1e-15);
    }

    #[test]
    fn missing_label_is_rejected() {
        let a = HardAssignment::new(vec![0, 0], 1).unwrap();
        let err = evaluate(&a, &[Some("a".into()), None]).unwrap_err();
        assert!(err.to_string().contains("evaluation requires labels"));
    }

    #[test]
    fn table_rendering_layout() {
        let (a, l) = assignment_from_table(&["x", "y"], &[vec![9, 1], vec![2, 8]]).unwrap();
        let text = render_confusion_table(&evaluate(&a, &l).unwrap());
        let lines: Vec<&str> = text.lines().collect();
        assert!(lines[0].starts_with("Actual \\ Predicted"));
        assert!(lines[0].ends_with("F1"));
        assert!(text.contains("Macro Average"));
        assert!(text.contains("Accuracy 17/20 = 0.850"));
    }
}
