use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use wildsort::neighbors::UmapConfig;
use wildsort::pipeline::{
    evaluate_manifest, render_coherence, render_confusion, render_tables, run_pipeline, ClusterMethod, Manifest,
    OrderingConfig, PipelineConfig, Reduction, RunResult,
};
use wildsort::store::Format;

/// Organize image-crop embeddings: cluster, order by similarity, evaluate.
#[derive(Parser)]
#[command(name = "wildsort", version)]
struct Cli {
    /// Output directory (defaults to $WILDSORT_OUT, then ./wildsort-out).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load, validate and normalize embeddings; write a manifest of the items.
    Ingest(InputArgs),
    /// Reduce and cluster embeddings (GMM with BIC, or DBSCAN).
    Cluster {
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        cluster: ClusterArgs,
    },
    /// 1D t-SNE similarity ordering over repeated seeds.
    Sort {
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        sort: SortArgs,
    },
    /// Evaluate an existing manifest against labels.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        /// JSON-lines file of {"id", "label"} rows overriding manifest labels.
        #[arg(long)]
        labels: Option<PathBuf>,
    },
    /// Run every stage configured in a TOML file.
    Run {
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        cluster: ClusterArgs,
        #[command(flatten)]
        sort: SortArgs,
    },
    /// Print the confusion and coherence tables of a manifest.
    Render {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value_t = Section::All)]
        section: Section,
    },
}

#[derive(Args)]
struct InputArgs {
    /// TOML pipeline config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Embedding file.
    #[arg(long)]
    input: Option<PathBuf>,
    /// csv, jsonl or rawf32; inferred from the extension when omitted.
    #[arg(long)]
    format: Option<Format>,
    /// JSON-lines {"id", "label"} file merged into the items.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Skip L2 normalization of the input vectors.
    #[arg(long)]
    no_normalize: bool,
    /// Compute evaluation metrics (requires labels).
    #[arg(long)]
    evaluate: bool,
}

#[derive(Args)]
struct ClusterArgs {
    #[arg(long, value_enum)]
    method: Option<MethodArg>,
    /// Smallest component count in the BIC sweep.
    #[arg(long)]
    k_min: Option<usize>,
    /// Largest component count in the BIC sweep.
    #[arg(long)]
    k_max: Option<usize>,
    /// DBSCAN neighborhood radius.
    #[arg(long)]
    eps: Option<f64>,
    /// DBSCAN core threshold, counting the point itself.
    #[arg(long)]
    min_pts: Option<usize>,
    #[arg(long, value_enum)]
    reduction: Option<ReductionArg>,
    /// PCA components or UMAP output dimension.
    #[arg(long)]
    dims: Option<usize>,
    /// Seed for the GMM sweep and UMAP.
    #[arg(long)]
    cluster_seed: Option<u64>,
}

#[derive(Args)]
struct SortArgs {
    /// Number of t-SNE runs to score.
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    perplexity: Option<f64>,
    #[arg(long)]
    iterations: Option<usize>,
    /// Fixed t-SNE step size (default: max(N / (4 · exaggeration), 50)).
    #[arg(long)]
    learning_rate: Option<f64>,
    /// First t-SNE seed; run r uses seed + r.
    #[arg(long)]
    sort_seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Gmm,
    Dbscan,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReductionArg {
    None,
    Pca,
    Umap,
}

#[derive(Clone, Copy, ValueEnum)]
enum Section {
    All,
    Clustering,
    Ordering,
}

fn base_config(input: &InputArgs) -> wildsort::Result<PipelineConfig> {
    let mut c = match (&input.config, &input.input) {
        (Some(path), _) => PipelineConfig::load(path)?,
        (None, Some(path)) => PipelineConfig::new(path),
        (None, None) => {
            return Err(wildsort::Error::Config("either --config or --input is required".into()));
        }
    };
    if let Some(p) = &input.input {
        c.input.path = p.clone();
    }
    if input.format.is_some() {
        c.input.format = input.format;
    }
    if input.labels.is_some() {
        c.input.labels = input.labels.clone();
    }
    if input.no_normalize {
        c.normalize = false;
    }
    c.evaluate |= input.evaluate;
    Ok(c)
}

fn apply_cluster(c: &mut PipelineConfig, a: &ClusterArgs, required: bool) -> wildsort::Result<()> {
    match a.reduction {
        Some(ReductionArg::None) => c.reduction = Reduction::None,
        Some(ReductionArg::Pca) => {
            c.reduction = Reduction::Pca {
                q: a.dims.unwrap_or(50),
            }
        }
        Some(ReductionArg::Umap) => {
            c.reduction = Reduction::Umap(UmapConfig {
                output_dim: a.dims.unwrap_or(10),
                seed: a.cluster_seed.unwrap_or(0),
                ..UmapConfig::default()
            })
        }
        None => match &mut c.reduction {
            Reduction::Pca { q } => *q = a.dims.unwrap_or(*q),
            Reduction::Umap(u) => {
                u.output_dim = a.dims.unwrap_or(u.output_dim);
                u.seed = a.cluster_seed.unwrap_or(u.seed);
            }
            Reduction::None => {}
        },
    }
    let prev = c.method.take();
    let wants_dbscan = match a.method {
        Some(m) => matches!(m, MethodArg::Dbscan),
        None => matches!(prev, Some(ClusterMethod::Dbscan { .. })),
    };
    let method = if wants_dbscan {
        let (eps, min_pts) = match prev {
            Some(ClusterMethod::Dbscan { eps, min_pts }) => (Some(eps), min_pts),
            _ => (None, 5),
        };
        Some(ClusterMethod::Dbscan {
            eps: a
                .eps
                .or(eps)
                .ok_or_else(|| wildsort::Error::Config("dbscan needs --eps".into()))?,
            min_pts: a.min_pts.unwrap_or(min_pts),
        })
    } else if a.method.is_some() || prev.is_some() || required {
        let (k_min, k_max, seed) = match prev {
            Some(ClusterMethod::Gmm { k_min, k_max, seed }) => (k_min, k_max, seed),
            _ => (2, 15, 0),
        };
        Some(ClusterMethod::Gmm {
            k_min: a.k_min.unwrap_or(k_min),
            k_max: a.k_max.unwrap_or(k_max),
            seed: a.cluster_seed.unwrap_or(seed),
        })
    } else {
        None
    };
    c.method = method;
    Ok(())
}

fn apply_sort(c: &mut PipelineConfig, a: &SortArgs, required: bool) {
    if c.ordering.is_none() && (required || a.runs.is_some() || a.perplexity.is_some()) {
        c.ordering = Some(OrderingConfig::default());
    }
    if let Some(o) = c.ordering.as_mut() {
        o.runs = a.runs.unwrap_or(o.runs);
        o.tsne.perplexity = a.perplexity.unwrap_or(o.tsne.perplexity);
        o.tsne.iterations = a.iterations.unwrap_or(o.tsne.iterations);
        o.tsne.seed = a.sort_seed.unwrap_or(o.tsne.seed);
        if a.learning_rate.is_some() {
            o.tsne.learning_rate = a.learning_rate;
        }
    }
}

fn report(r: &RunResult) {
    let m = &r.manifest;
    println!(
        "{} items, {} dimensions, {} labeled",
        m.dataset.n, m.dataset.d, m.dataset.labeled
    );
    if let Some(c) = &m.clustering {
        println!("{}: {} clusters, {} noise", c.method, c.k, c.noise);
    }
    if let Some(e) = &m.evaluation {
        println!("accuracy {:.3}, macro-F1 {:.3}", e.accuracy, e.macro_f1);
    }
    if let Some(c) = m.ordering.as_ref().and_then(|o| o.coherence.as_ref()) {
        println!(
            "coherence {}",
            wildsort::ordering::format_pct(c.overall_mean_pct, c.overall_std_pct)
        );
    }
    println!("manifest: {}", r.manifest_path.display());
    println!("tables:   {}", r.tables_path.display());
}

fn run(cli: Cli) -> wildsort::Result<()> {
    let finish = |mut c: PipelineConfig| -> wildsort::Result<()> {
        if cli.out.is_some() {
            c.output = cli.out.clone();
        }
        report(&run_pipeline(&c)?);
        Ok(())
    };
    match &cli.command {
        Command::Ingest(input) => {
            let mut c = base_config(input)?;
            c.method = None;
            c.ordering = None;
            finish(c)
        }
        Command::Cluster { input, cluster } => {
            let mut c = base_config(input)?;
            apply_cluster(&mut c, cluster, true)?;
            c.ordering = None;
            finish(c)
        }
        Command::Sort { input, sort } => {
            let mut c = base_config(input)?;
            c.method = None;
            apply_sort(&mut c, sort, true);
            finish(c)
        }
        Command::Run { input, cluster, sort } => {
            let mut c = base_config(input)?;
            apply_cluster(&mut c, cluster, false)?;
            apply_sort(&mut c, sort, false);
            finish(c)
        }
        Command::Eval { manifest, labels } => {
            let r = evaluate_manifest(manifest, labels.as_deref())?;
            report(&r);
            Ok(())
        }
        Command::Render { manifest, section } => {
            let m = Manifest::load(manifest)?;
            let text = match section {
                Section::All => render_tables(&m),
                Section::Clustering => render_confusion(&m)?,
                Section::Ordering => render_coherence(&m)?,
            };
            print!("{text}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
