//! BIC sweep over component counts on a labeled fixture, then matched accuracy
//! of the selected model.
//!
//! cargo run --release --example gmm_bic_sweep -- [clusters] [dim] [separation]

use wildsort::evaluation::{evaluate, render_confusion_table};
use wildsort::fixtures::{generate, FixtureSpec};
use wildsort::gmm::{hard_assign, select_components};

fn main() -> wildsort::Result<()> {
    let mut args = std::env::args().skip(1);
    let k: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(4);
    let dim: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(4);
    let separation: f64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(8.0);

    let fixture = generate(&FixtureSpec::new(k, 100, dim, separation, 5))?;
    let m = &fixture.embeddings;
    let (report, model) = select_components(m, 2, 10, 0)?;
    println!("{:>3} {:>7} {:>14} {:>14}", "k", "params", "log-lik", "BIC");
    for e in &report.entries {
        match (e.log_likelihood, e.bic) {
            (Some(ll), Some(bic)) => println!(
                "{:>3} {:>7} {ll:>14.2} {bic:>14.2}{}",
                e.k,
                e.params,
                if e.k == report.selected_k { "  <" } else { "" }
            ),
            _ => println!(
                "{:>3} {:>7} failed: {}",
                e.k,
                e.params,
                e.error.as_deref().unwrap_or("?")
            ),
        }
    }

    let eval = evaluate(&hard_assign(&model, m)?, &m.labels())?;
    println!("\nselected k = {} (generated with {k})", report.selected_k);
    print!("{}", render_confusion_table(&eval));
    Ok(())
}
