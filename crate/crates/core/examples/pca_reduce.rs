//! PCA on a 50-dimensional fixture: explained variance and reconstruction.
//!
//! cargo run --release --example pca_reduce -- [components]

use wildsort::fixtures::{generate, FixtureSpec};
use wildsort::linalg::{pca_fit, pca_transform, squared_euclidean};

fn main() -> wildsort::Result<()> {
    let q: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(10);
    let fixture = generate(&FixtureSpec::new(5, 60, 50, 6.0, 3))?;
    let m = &fixture.embeddings;

    let model = pca_fit(m, q)?;
    let ratios = model.explained_variance_ratio();
    let mut cumulative = 0.0;
    for (i, r) in ratios.iter().enumerate() {
        cumulative += r;
        println!(
            "PC{:<2} {:6.2}%  cumulative {:6.2}%",
            i + 1,
            100.0 * r,
            100.0 * cumulative
        );
    }

    let reduced = pca_transform(&model, m)?;
    let err: f64 = (0..m.n())
        .map(|i| squared_euclidean(m.row(i), &model.inverse_row(reduced.row(i))))
        .sum::<f64>()
        / m.n() as f64;
    println!(
        "{} → {} dims, mean squared reconstruction error {err:.4}",
        m.dim(),
        reduced.dim()
    );
    Ok(())
}
