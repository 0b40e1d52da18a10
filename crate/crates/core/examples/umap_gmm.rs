//! UMAP to 10 dimensions, then a BIC sweep over GMM component counts.
//!
//! cargo run --release --example umap_gmm -- [seeds]

use wildsort::evaluation::evaluate;
use wildsort::fixtures::{generate, FixtureSpec};
use wildsort::gmm::{hard_assign, select_components};
use wildsort::neighbors::{umap_embed, UmapConfig};

fn main() -> wildsort::Result<()> {
    let seeds: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(3);
    for seed in 0..seeds {
        let started = std::time::Instant::now();
        let fixture = generate(&FixtureSpec::new(5, 100, 50, 8.0, seed))?;
        let config = UmapConfig {
            seed,
            ..UmapConfig::default()
        };
        let emb = umap_embed(&fixture.embeddings, &config)?;
        let reduced = emb.to_matrix(&fixture.embeddings)?;
        let (report, model) = select_components(&reduced, 2, 15, seed)?;
        let assignment = hard_assign(&model, &reduced)?;
        let eval = evaluate(&assignment, &reduced.labels())?;
        let bic: Vec<String> = report
            .entries
            .iter()
            .map(|e| match e.bic {
                Some(b) => format!("{}:{b:.0}", e.k),
                None => format!("{}:failed", e.k),
            })
            .collect();
        println!(
            "seed {seed}: k* = {}, accuracy {:.3}, macro-F1 {:.3}, cross-entropy {:.1} ({:.1?})",
            report.selected_k,
            eval.accuracy,
            eval.macro_f1,
            emb.final_objective,
            started.elapsed()
        );
        println!("  BIC {}", bic.join(" "));
    }
    Ok(())
}
