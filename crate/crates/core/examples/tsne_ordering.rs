//! 1D t-SNE similarity ordering on synthetic clusters, scored by coherence.
//!
//! cargo run --release --example tsne_ordering -- [separation] [runs]

use wildsort::fixtures::{generate, FixtureSpec};
use wildsort::neighbors::TsneConfig;
use wildsort::ordering::{aggregate_runs, render_coherence_table};

fn main() -> wildsort::Result<()> {
    let mut args = std::env::args().skip(1);
    let separation: f64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(8.0);
    let runs: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(10);

    let fixture = generate(&FixtureSpec::new(3, 100, 10, separation, 1))?;
    let config = TsneConfig {
        perplexity: 30.0,
        ..TsneConfig::default()
    };
    let started = std::time::Instant::now();
    let (agg, orderings) = aggregate_runs(&fixture.embeddings, &config, runs)?;
    println!("separation {separation}σ, {runs} runs in {:.1?}", started.elapsed());
    print!("{}", render_coherence_table(&agg));

    let first = &orderings[0];
    let labels = fixture.embeddings.labels();
    let strip: String = first
        .permutation
        .iter()
        .map(|&i| match labels[i].as_deref() {
            Some("cluster_0") => 'a',
            Some("cluster_1") => 'b',
            _ => 'c',
        })
        .collect();
    println!("seed {:?}: {strip}", first.seed);
    Ok(())
}
