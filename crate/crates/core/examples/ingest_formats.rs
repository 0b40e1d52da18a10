//! Write one dataset in all three embedding formats, load each back and
//! L2-normalize it.
//!
//! cargo run --example ingest_formats -- [dir]

use std::path::PathBuf;

use wildsort::fixtures::{generate, FixtureSpec};
use wildsort::store::{l2_normalize, load_embeddings, save_embeddings, sidecar_path, Format};

fn main() -> wildsort::Result<()> {
    let dir = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("wildsort-ingest"));
    std::fs::create_dir_all(&dir).map_err(|e| wildsort::Error::Config(e.to_string()))?;

    let fixture = generate(&FixtureSpec::new(3, 4, 6, 5.0, 2))?;
    for (name, format) in [
        ("items.csv", Format::Csv),
        ("items.jsonl", Format::Jsonl),
        ("vectors.f32", Format::Rawf32),
    ] {
        let path = dir.join(name);
        save_embeddings(&fixture.embeddings, &path, format)?;
        let loaded = load_embeddings(&path, format)?;
        let bytes = std::fs::metadata(&path).map(|m| m.len()).unwrap_or(0);
        println!(
            "{format:>6}: {} items × {} dims, {} labeled, {bytes} bytes",
            loaded.n(),
            loaded.dim(),
            loaded.labels().iter().flatten().count()
        );
        if format == Format::Rawf32 {
            println!("        labels in {}", sidecar_path(&path).display());
        }
    }

    let m = load_embeddings(dir.join("vectors.f32"), Format::Rawf32)?;
    let unit = l2_normalize(&m)?;
    for i in [0, 5, 11] {
        let norm: f64 = unit.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        println!(
            "{} {:?} |x| = {norm:.6}",
            unit.items()[i].item_id,
            unit.items()[i].label
        );
    }
    Ok(())
}
