//! Pick DBSCAN's eps from the k-distance profile and show how the clustering
//! changes around it.
//!
//! cargo run --release --example dbscan_eps -- [min_pts]

use wildsort::dbscan::{dbscan_fit, k_distance_profile, DbscanParams};
use wildsort::fixtures::{generate, FixtureSpec};

fn main() -> wildsort::Result<()> {
    let min_pts: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(5);
    let fixture = generate(&FixtureSpec::new(3, 80, 2, 12.0, 4))?;
    let m = &fixture.embeddings;

    let profile = k_distance_profile(m, min_pts - 1)?;
    let at = |q: f64| profile[((profile.len() - 1) as f64 * q).round() as usize];
    println!(
        "{}-NN distance: median {:.3}, p90 {:.3}, p99 {:.3}, max {:.3}",
        min_pts - 1,
        at(0.5),
        at(0.9),
        at(0.99),
        at(1.0)
    );

    for eps in [at(0.5), at(0.9), at(1.0), 4.0 * at(1.0)] {
        let a = dbscan_fit(m, &DbscanParams::new(eps, min_pts)?)?;
        println!(
            "eps {eps:7.3}: {} clusters, {:>3} noise, sizes {:?}",
            a.k,
            a.noise_count(),
            a.cluster_sizes()
        );
    }
    Ok(())
}
