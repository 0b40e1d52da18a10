//! Metrics from a reference 5-species confusion matrix: optimal cluster to
//! species matching, per-species F1, macro-F1 and accuracy.
//!
//! cargo run --example evaluate_confusion

use wildsort::evaluation::{assignment_from_table, evaluate, render_confusion_table};

fn main() -> wildsort::Result<()> {
    let species = ["badger", "raccoon dog", "red fox", "polecat", "hooded crow"];
    let table = vec![
        vec![93, 7, 0, 0, 0],
        vec![31, 61, 4, 0, 4],
        vec![0, 2, 95, 3, 0],
        vec![0, 0, 9, 91, 0],
        vec![0, 1, 0, 0, 99],
    ];
    let (assignment, labels) = assignment_from_table(&species, &table)?;
    let report = evaluate(&assignment, &labels)?;
    print!("{}", render_confusion_table(&report));
    for m in &report.per_species {
        println!(
            "{:<12} P {:.4}  R {:.4}  F1 {:.5}",
            m.species, m.precision, m.recall, m.f1
        );
    }
    Ok(())
}
