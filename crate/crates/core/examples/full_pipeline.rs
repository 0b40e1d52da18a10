//! End-to-end run from a TOML config: UMAP, GMM with BIC, 1D ordering and
//! evaluation, writing a manifest and text tables.
//!
//! cargo run --release --example full_pipeline -- [output-dir]

use std::path::PathBuf;

use wildsort::fixtures::{generate, FixtureSpec};
use wildsort::pipeline::{run_pipeline, PipelineConfig};
use wildsort::store::{save_embeddings, Format};

const CONFIG: &str = r#"
evaluate = true

[input]
path = "embeddings.f32"

[reduction]
kind = "umap"
output_dim = 10
seed = 0

[method]
kind = "gmm"
k_min = 2
k_max = 15
seed = 0

[ordering]
runs = 10

[ordering.tsne]
perplexity = 30.0
"#;

fn main() -> wildsort::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("wildsort-full-pipeline"));
    std::fs::create_dir_all(&out).map_err(|e| wildsort::Error::Config(e.to_string()))?;

    let fixture = generate(&FixtureSpec::new(5, 100, 50, 8.0, 7))?;
    save_embeddings(&fixture.embeddings, out.join("embeddings.f32"), Format::Rawf32)?;
    let config_path = out.join("pipeline.toml");
    std::fs::write(&config_path, CONFIG).map_err(|e| wildsort::Error::Config(e.to_string()))?;

    let mut config = PipelineConfig::load(&config_path)?;
    config.output = Some(out.join("run"));
    let result = run_pipeline(&config)?;
    print!("{}", std::fs::read_to_string(&result.tables_path).unwrap_or_default());
    println!("manifest written to {}", result.manifest_path.display());
    Ok(())
}
