use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;

use wildsort::dbscan::{dbscan_fit, DbscanParams};
use wildsort::evaluation::{assignment_from_table, evaluate};
use wildsort::fixtures::{generate, FixtureSpec};
use wildsort::gmm::{em_fit, hard_assign, responsibilities, HardAssignment};
use wildsort::linalg::{pca_fit, squared_euclidean};
use wildsort::neighbors::{
    joint_probabilities, kl_divergence, membership_graph, tsne_embed, umap_embed, TsneConfig, UmapConfig,
};
use wildsort::ordering::{coherence, order_by, summarize};
use wildsort::store::{load_embeddings, save_embeddings, EmbeddingMatrix, Format, ItemRecord};

fn matrix(n: std::ops::Range<usize>, d: std::ops::Range<usize>) -> impl Strategy<Value = Vec<Vec<f64>>> {
    (n, d).prop_flat_map(|(n, d)| prop::collection::vec(prop::collection::vec(-5.0..5.0f64, d), n))
}

fn labeled(rows: &[Vec<f64>], labels: &[Option<String>]) -> EmbeddingMatrix {
    let items = labels
        .iter()
        .enumerate()
        .map(|(i, l)| ItemRecord {
            item_id: format!("id-{i}"),
            label: l.clone(),
            crop_ref: None,
        })
        .collect();
    EmbeddingMatrix::new(items, rows.concat(), rows[0].len()).unwrap()
}

fn sequence_ordering(seq: &[usize]) -> (wildsort::ordering::Ordering, Vec<Option<String>>) {
    let ids: Vec<String> = (0..seq.len()).map(|i| format!("{i:04}")).collect();
    let coords: Vec<f64> = (0..seq.len()).map(|i| i as f64).collect();
    let labels = seq.iter().map(|s| Some(format!("s{s}"))).collect();
    (order_by(&coords, &ids, None), labels)
}

fn same_partition(a: &[i64], b: &[i64]) -> bool {
    let mut fwd = BTreeMap::new();
    let mut back = BTreeMap::new();
    a.iter()
        .zip(b)
        .all(|(x, y)| *fwd.entry(*x).or_insert(*y) == *y && *back.entry(*y).or_insert(*x) == *x)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn store_round_trips(rows in matrix(1..12, 1..6), tags in prop::collection::vec(prop::option::of("[a-z ,\"]{1,8}"), 12)) {
        let labels = &tags[..rows.len()];
        let m = labeled(&rows, labels);
        let dir = tempfile::tempdir().unwrap();

        let raw = dir.path().join("x.f32");
        save_embeddings(&m, &raw, Format::Rawf32).unwrap();
        let once = load_embeddings(&raw, Format::Rawf32).unwrap();
        let again = dir.path().join("y.f32");
        save_embeddings(&once, &again, Format::Rawf32).unwrap();
        prop_assert_eq!(std::fs::read(&raw).unwrap(), std::fs::read(&again).unwrap());
        prop_assert_eq!(once.labels(), m.labels());

        for (name, format) in [("x.csv", Format::Csv), ("x.jsonl", Format::Jsonl)] {
            let path = dir.path().join(name);
            save_embeddings(&m, &path, format).unwrap();
            let back = load_embeddings(&path, format).unwrap();
            prop_assert_eq!(back.items(), m.items());
            prop_assert!(back.data().iter().zip(m.data()).all(|(a, b)| (a - b).abs() <= 1e-9));
        }
    }

    #[test]
    fn coherence_ignores_direction(seq in prop::collection::vec(0usize..4, 1..80)) {
        let (forward, labels) = sequence_ordering(&seq);
        let reversed: Vec<usize> = seq.iter().rev().copied().collect();
        let (backward, rev_labels) = sequence_ordering(&reversed);
        let a = coherence(&forward, &labels).unwrap();
        let b = coherence(&backward, &rev_labels).unwrap();
        let by_species = |r: &wildsort::ordering::CoherenceReport| {
            r.per_species
                .iter()
                .map(|s| (s.species.clone(), (s.max_run_length, s.total_count)))
                .collect::<BTreeMap<_, _>>()
        };
        prop_assert_eq!(by_species(&a), by_species(&b));
        prop_assert!((a.overall_pct - b.overall_pct).abs() < 1e-12);
    }

    #[test]
    fn coherence_bounds(seq in prop::collection::vec(0usize..5, 1..80)) {
        let (ordering, labels) = sequence_ordering(&seq);
        let report = coherence(&ordering, &labels).unwrap();
        let pcts: Vec<f64> = report.per_species.iter().map(|s| s.coherence_pct).collect();
        let lo = pcts.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = pcts.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(report.overall_pct >= lo - 1e-9 && report.overall_pct <= hi + 1e-9);
        for s in &report.per_species {
            prop_assert!(s.coherence_pct > 0.0 && s.coherence_pct <= 100.0);
            prop_assert!(s.max_run_length <= s.total_count);
            if s.total_count == 1 {
                prop_assert_eq!(s.coherence_pct, 100.0);
            }
        }
        let weighted: f64 = report
            .per_species
            .iter()
            .map(|s| s.coherence_pct * s.total_count as f64)
            .sum::<f64>()
            / seq.len() as f64;
        prop_assert!((weighted - report.overall_pct).abs() < 1e-9);

        let single = summarize(std::slice::from_ref(&report), vec![0]).unwrap();
        prop_assert_eq!(single.overall_mean_pct, report.overall_pct);
        prop_assert!(single.overall_std_pct.is_none());
    }

    #[test]
    fn ordering_is_a_sorted_bijection(coords in prop::collection::vec(prop::sample::select(vec![-1.0, 0.0, 0.5, 2.0]), 1..40)) {
        let ids: Vec<String> = (0..coords.len()).map(|i| format!("item-{:03}", (i * 7919) % 1000)).collect();
        let o = order_by(&coords, &ids, None);
        let mut seen = o.permutation.clone();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..coords.len()).collect::<Vec<_>>());
        for w in o.permutation.windows(2) {
            let (a, b) = (w[0], w[1]);
            prop_assert!(coords[a] < coords[b] || (coords[a] == coords[b] && ids[a] < ids[b]));
        }
    }

    #[test]
    fn metrics_ignore_cluster_ids(
        table in prop::collection::vec(prop::collection::vec(0u64..15, 4), 1..5),
        shuffle in Just((0..4).collect::<Vec<usize>>()).prop_shuffle(),
    ) {
        prop_assume!(table.iter().all(|r| r.iter().sum::<u64>() > 0));
        let names = ["ant", "bee", "cat", "dog", "eel"];
        let species = &names[..table.len()];
        let (a, labels) = assignment_from_table(species, &table).unwrap();
        let relabeled = HardAssignment::new(
            a.cluster_of.iter().map(|&c| shuffle[c as usize] as i64).collect(),
            a.k,
        )
        .unwrap();
        let r1 = evaluate(&a, &labels).unwrap();
        let r2 = evaluate(&relabeled, &labels).unwrap();
        prop_assert_eq!(&r1.per_species, &r2.per_species);
        prop_assert_eq!(r1.macro_f1, r2.macro_f1);
        prop_assert_eq!(r1.accuracy, r2.accuracy);

        let n: u64 = table.iter().flatten().sum();
        let tp: u64 = r1.per_species.iter().map(|s| s.true_positives).sum();
        prop_assert_eq!(r1.accuracy, tp as f64 / n as f64);
        let mean_f1 = r1.per_species.iter().map(|s| s.f1).sum::<f64>() / species.len() as f64;
        prop_assert!((r1.macro_f1 - mean_f1).abs() < 1e-12);
        for s in &r1.per_species {
            prop_assert_eq!((s.recall * s.total as f64).round() as u64, s.true_positives);
            for v in [s.precision, s.recall, s.f1] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn dbscan_row_permutation(
        rows in matrix(5..40, 2..3),
        eps in 0.3..3.0f64,
        min_pts in 1usize..6,
        perm in Just((0..40).collect::<Vec<usize>>()).prop_shuffle(),
    ) {
        let n = rows.len();
        let perm: Vec<usize> = perm.into_iter().filter(|&i| i < n).collect();
        let m = EmbeddingMatrix::from_rows(&rows).unwrap();
        let shuffled = EmbeddingMatrix::from_rows(&perm.iter().map(|&i| rows[i].clone()).collect::<Vec<_>>()).unwrap();
        let params = DbscanParams::new(eps, min_pts).unwrap();
        let a = dbscan_fit(&m, &params).unwrap();
        let b = dbscan_fit(&shuffled, &params).unwrap();
        // Labels of b, back in the original row order.
        let mut b_orig = vec![0i64; n];
        for (pos, &i) in perm.iter().enumerate() {
            b_orig[i] = b.cluster_of[pos];
        }

        let close = |i: usize, j: usize| squared_euclidean(&rows[i], &rows[j]) <= eps * eps;
        let core: Vec<bool> = (0..n).map(|i| (0..n).filter(|&j| close(i, j)).count() >= min_pts).collect();
        let ambiguous: Vec<bool> = (0..n)
            .map(|i| {
                let owners: BTreeSet<i64> = (0..n).filter(|&j| core[j] && close(i, j)).map(|j| a.cluster_of[j]).collect();
                !core[i] && owners.len() > 1
            })
            .collect();

        prop_assert_eq!(a.k, b.k);
        let noise = |c: &[i64]| (0..n).filter(|&i| c[i] == -1).collect::<Vec<_>>();
        prop_assert_eq!(noise(&a.cluster_of), noise(&b_orig));
        let keep: Vec<usize> = (0..n).filter(|&i| !ambiguous[i]).collect();
        let pick = |c: &[i64]| keep.iter().map(|&i| c[i]).collect::<Vec<_>>();
        prop_assert!(same_partition(&pick(&a.cluster_of), &pick(&b_orig)));
        if !ambiguous.contains(&true) {
            let mut sa = a.cluster_sizes();
            let mut sb = b.cluster_sizes();
            sa.sort_unstable();
            sb.sort_unstable();
            prop_assert_eq!(sa, sb);
        }
        for i in 0..n {
            if a.cluster_of[i] >= 0 {
                prop_assert!((0..n).any(|j| core[j] && a.cluster_of[j] == a.cluster_of[i] && close(i, j)));
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn labels_are_inert(seed in 0u64..1000) {
        let f = generate(&FixtureSpec::new(3, 20, 4, 6.0, seed)).unwrap();
        let blind = f.embeddings.without_labels();

        let g1 = em_fit(&f.embeddings, 3, seed).unwrap();
        let g2 = em_fit(&blind, 3, seed).unwrap();
        prop_assert_eq!(hard_assign(&g1, &f.embeddings).unwrap(), hard_assign(&g2, &blind).unwrap());
        prop_assert_eq!(g1.log_likelihood.to_bits(), g2.log_likelihood.to_bits());

        let params = DbscanParams::new(1.5, 3).unwrap();
        prop_assert_eq!(dbscan_fit(&f.embeddings, &params).unwrap(), dbscan_fit(&blind, &params).unwrap());

        let tsne = TsneConfig { perplexity: 5.0, iterations: 200, seed, ..TsneConfig::default() };
        prop_assert_eq!(tsne_embed(&f.embeddings, &tsne).unwrap().coords, tsne_embed(&blind, &tsne).unwrap().coords);

        let umap = UmapConfig { n_neighbors: 5, output_dim: 2, n_epochs: 50, seed, ..UmapConfig::default() };
        prop_assert_eq!(umap_embed(&f.embeddings, &umap).unwrap().coords, umap_embed(&blind, &umap).unwrap().coords);
    }

    #[test]
    fn pca_axes_and_variance(rows in matrix(3..30, 2..12)) {
        let m = EmbeddingMatrix::from_rows(&rows).unwrap();
        let q = (m.n() - 1).min(m.dim());
        let model = pca_fit(&m, q).unwrap();
        for (i, a) in model.components.iter().enumerate() {
            for (j, b) in model.components.iter().enumerate() {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let expected = if i == j { 1.0 } else { 0.0 };
                prop_assert!((dot - expected).abs() < 1e-8);
            }
        }
        for w in model.explained_variance.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-12);
        }
        prop_assert!(model.explained_variance.iter().all(|&v| v >= -1e-12));
        let n = m.n() as f64;
        let total: f64 = (0..m.dim())
            .map(|j| {
                let mean = m.rows().map(|r| r[j]).sum::<f64>() / n;
                m.rows().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / (n - 1.0)
            })
            .sum();
        let captured: f64 = model.explained_variance.iter().sum();
        prop_assert!((captured - total).abs() <= 1e-6 * total.max(1e-12));
        prop_assert_eq!(pca_fit(&m, q).unwrap(), model);
    }

    #[test]
    fn em_fit_is_well_formed(seed in 0u64..1000) {
        let spec = FixtureSpec { anisotropy: Some((0.5, 1.5)), ..FixtureSpec::new(3, 40, 3, 5.0, seed) };
        let f = generate(&spec).unwrap();
        let model = em_fit(&f.embeddings, 3, seed).unwrap();
        prop_assert!((model.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(model.weights.iter().all(|&w| w > 0.0));
        for cov in &model.covariances {
            for (r, row) in cov.iter().enumerate() {
                for (c, v) in row.iter().enumerate() {
                    prop_assert!((v - cov[c][r]).abs() < 1e-9);
                }
            }
        }
        for row in responsibilities(&model, &f.embeddings).unwrap() {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let a = hard_assign(&model, &f.embeddings).unwrap();
        prop_assert!(a.cluster_of.iter().all(|&c| c >= 0 && (c as usize) < a.k));
    }

    #[test]
    fn gmm_row_permutation(seed in 0u64..1000, perm in Just((0..120).collect::<Vec<usize>>()).prop_shuffle()) {
        let f = generate(&FixtureSpec::new(3, 40, 3, 10.0, seed)).unwrap();
        let shuffled = f.embeddings.permuted(&perm).unwrap();
        let a = hard_assign(&em_fit(&f.embeddings, 3, seed).unwrap(), &f.embeddings).unwrap();
        let b = hard_assign(&em_fit(&shuffled, 3, seed).unwrap(), &shuffled).unwrap();
        let mut b_orig = vec![0i64; 120];
        for (pos, &i) in perm.iter().enumerate() {
            b_orig[i] = b.cluster_of[pos];
        }
        prop_assert!(same_partition(&a.cluster_of, &b_orig));
        let labels = f.embeddings.labels();
        prop_assert_eq!(evaluate(&a, &labels).unwrap().accuracy, 1.0);
    }

    #[test]
    fn tsne_objective_settles(seed in 0u64..1000) {
        let f = generate(&FixtureSpec::new(3, 25, 5, 6.0, seed)).unwrap();
        let config = TsneConfig { perplexity: 8.0, iterations: 600, seed, ..TsneConfig::default() };
        let emb = tsne_embed(&f.embeddings, &config).unwrap();
        let tail: Vec<f64> = emb
            .objective_trace
            .iter()
            .filter(|(it, _)| *it >= config.iterations - 100)
            .map(|(_, kl)| *kl)
            .collect();
        prop_assert!(tail.len() >= 10);
        for w in tail.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-3, "KL rose from {} to {}", w[0], w[1]);
        }
        prop_assert!(emb.coords.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn objectives_ignore_translation(rows in matrix(10..20, 3..5), shift in -50.0..50.0f64, seed in 0u64..100) {
        let m = EmbeddingMatrix::from_rows(&rows).unwrap();
        let p = joint_probabilities(&m, 3.0).unwrap();
        let n = m.n();
        let total: f64 = p.iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-8);
        for i in 0..n {
            prop_assert_eq!(p[i * n + i], 0.0);
            for j in 0..n {
                prop_assert!(p[i * n + j] >= 0.0 && (p[i * n + j] - p[j * n + i]).abs() < 1e-15);
            }
        }
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        let y: Vec<f64> = (0..2 * n).map(|_| rand::Rng::random_range(&mut rng, -5.0..5.0)).collect();
        let moved: Vec<f64> = y.iter().map(|v| v + shift).collect();
        prop_assert!((kl_divergence(&p, &y, n, 2) - kl_divergence(&p, &moved, n, 2)).abs() < 1e-10);
    }

    #[test]
    fn far_outlier_leaves_membership_untouched(rows in matrix(12..25, 2..4)) {
        let m = EmbeddingMatrix::from_rows(&rows).unwrap();
        let mut extended = rows.clone();
        extended.push(vec![1e4; rows[0].len()]);
        let m2 = EmbeddingMatrix::from_rows(&extended).unwrap();
        let g1 = membership_graph(&m, 5).unwrap();
        let g2 = membership_graph(&m2, 5).unwrap();
        for i in 0..m.n() {
            for j in 0..m.n() {
                prop_assert!((g1.weight(i, j) - g2.weight(i, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fixture_geometry(k in 2usize..6, extra in 0usize..4, sep in 1.0..12.0f64, seed in 0u64..1000) {
        let per = 60;
        let f = generate(&FixtureSpec::new(k, per, k - 1 + extra, sep, seed)).unwrap();
        for a in 0..k {
            for b in a + 1..k {
                let d = squared_euclidean(&f.centroids[a], &f.centroids[b]).sqrt();
                prop_assert!(d >= sep - 1e-9);
            }
            let members: Vec<&[f64]> = (0..f.truth.len()).filter(|&i| f.truth[i] == a).map(|i| f.embeddings.row(i)).collect();
            let dim = f.embeddings.dim();
            let mean: Vec<f64> = (0..dim).map(|j| members.iter().map(|r| r[j]).sum::<f64>() / per as f64).collect();
            for (mu, c) in mean.iter().zip(&f.centroids[a]) {
                prop_assert!((mu - c).abs() <= 6.0 / (per as f64).sqrt());
            }
        }
    }
}
