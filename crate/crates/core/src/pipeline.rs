//! Declarative pipeline: ingest → reduce → cluster / order → evaluate → manifest.
//!
//! A run writes `manifest.json`, `tables.txt` and content-addressed stage
//! caches under `cache/` in the output directory. Cache keys hash the input
//! bytes together with the config subtree of the stage and its upstream
//! stages, so changing only the clusterer reuses the reduction.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dbscan::{dbscan_fit, DbscanParams};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, render_confusion_table, EvalReport};
use crate::gmm::{hard_assign, select_components, BicReport, HardAssignment};
use crate::linalg::{pca_fit, pca_transform};
use crate::neighbors::{umap_embed, TsneConfig, UmapConfig};
use crate::ordering::{ordering_runs, render_coherence_table, score_orderings, AggregateCoherence, Ordering};
use crate::store::{l2_normalize, load_embeddings, read_sidecar, sidecar_path, EmbeddingMatrix, Format, ItemRecord};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const OUTPUT_ENV: &str = "WILDSORT_OUT";
pub const DEFAULT_OUTPUT: &str = "wildsort-out";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TABLES_FILE: &str = "tables.txt";

fn yes() -> bool {
    true
}

fn default_pca_q() -> usize {
    50
}

fn default_k_min() -> usize {
    2
}

fn default_k_max() -> usize {
    15
}

fn default_runs() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputConfig {
    pub path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub format: Option<Format>,
    /// JSON-lines `{"id", "label"}` rows applied on top of the input.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Reduction {
    None,
    Pca {
        #[serde(default = "default_pca_q")]
        q: usize,
    },
    Umap(UmapConfig),
}

impl Default for Reduction {
    fn default() -> Self {
        Reduction::Pca { q: default_pca_q() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ClusterMethod {
    Gmm {
        #[serde(default = "default_k_min")]
        k_min: usize,
        #[serde(default = "default_k_max")]
        k_max: usize,
        #[serde(default)]
        seed: u64,
    },
    Dbscan {
        eps: f64,
        min_pts: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrderingConfig {
    #[serde(default = "default_runs")]
    pub runs: usize,
    /// Inputs wider than this are PCA-reduced before t-SNE.
    #[serde(default = "default_pca_q")]
    pub pca_dims: usize,
    #[serde(default)]
    pub tsne: TsneConfig,
}

impl Default for OrderingConfig {
    fn default() -> Self {
        OrderingConfig {
            runs: default_runs(),
            pca_dims: default_pca_q(),
            tsne: TsneConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub input: InputConfig,
    #[serde(default = "yes")]
    pub normalize: bool,
    #[serde(default)]
    pub reduction: Reduction,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method: Option<ClusterMethod>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ordering: Option<OrderingConfig>,
    #[serde(default)]
    pub evaluate: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
}

impl PipelineConfig {
    pub fn new(input: impl Into<PathBuf>) -> Self {
        PipelineConfig {
            input: InputConfig {
                path: input.into(),
                format: None,
                labels: None,
            },
            normalize: true,
            reduction: Reduction::default(),
            method: None,
            ordering: None,
            evaluate: false,
            output: None,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Parse a TOML file; relative paths inside resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        rebase(&mut config.input.path);
        if let Some(l) = config.input.labels.as_mut() {
            rebase(l);
        }
        if let Some(o) = config.output.as_mut() {
            rebase(o);
        }
        Ok(config)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn format(&self) -> Result<Format> {
        match self.input.format {
            Some(f) => Ok(f),
            None => Format::from_extension(&self.input.path).ok_or_else(|| {
                Error::Config(format!(
                    "cannot infer the format of {}; set input.format",
                    self.input.path.display()
                ))
            }),
        }
    }

    /// `output`, else `$WILDSORT_OUT`, else `wildsort-out`.
    pub fn output_dir(&self) -> PathBuf {
        self.output
            .clone()
            .or_else(|| std::env::var_os(OUTPUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT))
    }

    pub fn validate(&self) -> Result<()> {
        self.format()?;
        if let Reduction::Pca { q } = self.reduction {
            if q == 0 {
                return Err(Error::Config("pca q must be at least 1".into()));
            }
        }
        match &self.method {
            Some(ClusterMethod::Gmm { k_min, k_max, .. }) if !(2 <= *k_min && k_min <= k_max) => {
                return Err(Error::Config(format!("gmm range [{k_min}, {k_max}] is invalid")));
            }
            Some(ClusterMethod::Dbscan { eps, min_pts }) => {
                DbscanParams::new(*eps, *min_pts).map_err(|e| Error::Config(e.to_string()))?;
            }
            _ => {}
        }
        if let Some(o) = &self.ordering {
            if o.runs == 0 || o.pca_dims == 0 {
                return Err(Error::Config("ordering runs and pca_dims must be positive".into()));
            }
        }
        if self.evaluate && self.method.is_none() && self.ordering.is_none() {
            return Err(Error::Config(
                "evaluate needs a clustering method or an ordering".into(),
            ));
        }
        Ok(())
    }

    fn resolved(&self) -> Result<PipelineConfig> {
        let mut c = self.clone();
        c.input.format = Some(self.format()?);
        c.output = None;
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolInfo {
    pub name: String,
    pub version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub n: usize,
    pub d: usize,
    pub source: String,
    pub format: Format,
    pub labeled: usize,
    pub normalized: bool,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReductionSection {
    pub kind: String,
    pub input_dim: usize,
    pub output_dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub explained_variance_ratio: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_objective: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusteringSection {
    pub method: String,
    pub k: usize,
    pub noise: usize,
    pub sizes: Vec<usize>,
    pub cluster_of: Vec<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log_likelihood: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bic: Option<BicReport>,
}

impl ClusteringSection {
    pub fn assignment(&self) -> Result<HardAssignment> {
        HardAssignment::new(self.cluster_of.clone(), self.k)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderingSection {
    pub runs: usize,
    pub seeds: Vec<u64>,
    pub input_dim: usize,
    pub orderings: Vec<Ordering>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coherence: Option<AggregateCoherence>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema: u32,
    pub tool: ToolInfo,
    /// Wall-clock creation time; the only field that varies between identical runs.
    pub created_unix: u64,
    pub dataset: DatasetSummary,
    pub config: PipelineConfig,
    pub seeds: BTreeMap<String, Vec<u64>>,
    pub items: Vec<ItemRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reduction: Option<ReductionSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clustering: Option<ClusteringSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ordering: Option<OrderingSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evaluation: Option<EvalReport>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Manifest> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn labels(&self) -> Vec<Option<String>> {
        self.items.iter().map(|it| it.label.clone()).collect()
    }

    /// Overwrite item labels from `(id, label)` pairs; unknown ids are an error.
    pub fn apply_labels<'a>(&mut self, pairs: impl IntoIterator<Item = (&'a str, Option<&'a str>)>) -> Result<usize> {
        let index: BTreeMap<&str, usize> = self
            .items
            .iter()
            .enumerate()
            .map(|(i, it)| (it.item_id.as_str(), i))
            .collect();
        let mut updates = Vec::new();
        for (id, label) in pairs {
            let &i = index
                .get(id)
                .ok_or_else(|| Error::invalid(format!("label for unknown item {id:?}")))?;
            updates.push((i, label.map(str::to_string)));
        }
        let count = updates.len();
        for (i, label) in updates {
            self.items[i].label = label;
        }
        self.dataset.labeled = self.items.iter().filter(|it| it.label.is_some()).count();
        Ok(count)
    }

    /// Recompute the evaluation and coherence sections from current labels.
    pub fn evaluate(&mut self) -> Result<()> {
        let labels = self.labels();
        if self.clustering.is_none() && self.ordering.is_none() {
            return Err(Error::MissingSection("clustering or ordering"));
        }
        if let Some(c) = &self.clustering {
            self.evaluation = Some(evaluate(&c.assignment()?, &labels).map_err(|e| e.in_stage("evaluate"))?);
        }
        if let Some(o) = self.ordering.as_mut() {
            o.coherence = Some(score_orderings(&o.orderings, &labels).map_err(|e| e.in_stage("evaluate"))?);
        }
        Ok(())
    }
}

/// Confusion matrix with per-species F1, when present.
pub fn render_confusion(manifest: &Manifest) -> Result<String> {
    manifest
        .evaluation
        .as_ref()
        .map(render_confusion_table)
        .ok_or(Error::MissingSection("evaluation"))
}

/// Per-species coherence summary, when present.
pub fn render_coherence(manifest: &Manifest) -> Result<String> {
    manifest
        .ordering
        .as_ref()
        .and_then(|o| o.coherence.as_ref())
        .map(render_coherence_table)
        .ok_or(Error::MissingSection("ordering coherence"))
}

/// Both tables, with placeholders for absent sections.
pub fn render_tables(manifest: &Manifest) -> String {
    let mut out = String::new();
    out.push_str("Clustering\n\n");
    match (&manifest.evaluation, &manifest.clustering) {
        (Some(e), _) => out.push_str(&render_confusion_table(e)),
        (None, Some(c)) => {
            out.push_str(&format!(
                "{} clusters, {} noise (no labels to evaluate)\n",
                c.k, c.noise
            ));
            for (i, s) in c.sizes.iter().enumerate() {
                out.push_str(&format!("  c{i}: {s}\n"));
            }
        }
        (None, None) => out.push_str("no clustering run\n"),
    }
    out.push_str("\n1D ordering\n\n");
    match &manifest.ordering {
        Some(OrderingSection { coherence: Some(c), .. }) => out.push_str(&render_coherence_table(c)),
        Some(o) => out.push_str(&format!("{} runs (no labels to score coherence)\n", o.runs)),
        None => out.push_str("no ordering run\n"),
    }
    out
}

fn hash_parts(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    hex::encode(h.finalize())
}

fn input_digest(config: &PipelineConfig, format: Format) -> Result<String> {
    let mut h = Sha256::new();
    let mut feed = |path: &Path| -> Result<()> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
        Ok(())
    };
    feed(&config.input.path)?;
    if format == Format::Rawf32 {
        let side = sidecar_path(&config.input.path);
        if side.exists() {
            feed(&side)?;
        }
    }
    if let Some(l) = &config.input.labels {
        feed(l)?;
    }
    h.update([config.normalize as u8]);
    Ok(hex::encode(h.finalize()))
}

// Files created during a run, removed again if the run fails.
struct Outputs {
    root: PathBuf,
    created: Vec<PathBuf>,
    created_dirs: Vec<PathBuf>,
}

impl Outputs {
    fn new(root: PathBuf) -> Self {
        Outputs {
            root,
            created: Vec::new(),
            created_dirs: Vec::new(),
        }
    }

    fn ensure_dir(&mut self, dir: &Path) -> Result<()> {
        let mut missing = Vec::new();
        let mut cur = Some(dir);
        while let Some(d) = cur {
            if d.as_os_str().is_empty() || d.exists() {
                break;
            }
            missing.push(d.to_path_buf());
            cur = d.parent();
        }
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        missing.reverse();
        self.created_dirs.extend(missing);
        Ok(())
    }

    fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.root.join(rel);
        let parent = path.parent().unwrap_or(&self.root).to_path_buf();
        self.ensure_dir(&parent)?;
        let tmp = path.with_extension("partial");
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        let existed = path.exists();
        std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
        if !existed {
            self.created.push(path.clone());
        }
        Ok(path)
    }

    fn cached<T: DeserializeOwned>(&self, rel: &str) -> Option<T> {
        let text = std::fs::read_to_string(self.root.join(rel)).ok()?;
        serde_json::from_str(&text).ok()
    }

    fn rollback(&mut self) {
        for f in self.created.drain(..).rev() {
            let _ = std::fs::remove_file(f);
        }
        for d in self.created_dirs.drain(..).rev() {
            let _ = std::fs::remove_dir(d);
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ReducedCache {
    dim: usize,
    data: Vec<f64>,
    section: ReductionSection,
}

#[derive(Debug)]
pub struct RunResult {
    pub manifest: Manifest,
    pub output_dir: PathBuf,
    pub manifest_path: PathBuf,
    pub tables_path: PathBuf,
}

/// Execute `config` and write its outputs; on failure nothing new is left behind.
pub fn run_pipeline(config: &PipelineConfig) -> Result<RunResult> {
    let mut outputs = Outputs::new(config.output_dir());
    match execute(config, &mut outputs) {
        Ok(r) => Ok(r),
        Err(e) => {
            outputs.rollback();
            Err(e)
        }
    }
}

pub fn ingest(config: &PipelineConfig) -> Result<EmbeddingMatrix> {
    let format = config.format()?;
    let mut m = load_embeddings(&config.input.path, format)?;
    if let Some(path) = &config.input.labels {
        let rows = read_sidecar(path)?;
        m.apply_labels(rows.into_iter().map(|r| (r.id, r.label)))?;
    }
    if config.normalize {
        m = l2_normalize(&m)?;
    }
    Ok(m)
}

fn reduce(m: &EmbeddingMatrix, reduction: &Reduction) -> Result<(EmbeddingMatrix, ReductionSection)> {
    match reduction {
        Reduction::None => Ok((
            m.clone(),
            ReductionSection {
                kind: "none".into(),
                input_dim: m.dim(),
                output_dim: m.dim(),
                explained_variance_ratio: None,
                final_objective: None,
            },
        )),
        Reduction::Pca { q } => {
            let q = (*q).min(m.dim()).min(m.n().saturating_sub(1)).max(1);
            let model = pca_fit(m, q)?;
            let out = pca_transform(&model, m)?;
            Ok((
                out,
                ReductionSection {
                    kind: "pca".into(),
                    input_dim: m.dim(),
                    output_dim: q,
                    explained_variance_ratio: Some(model.explained_variance_ratio()),
                    final_objective: None,
                },
            ))
        }
        Reduction::Umap(cfg) => {
            let emb = umap_embed(m, cfg)?;
            Ok((
                emb.to_matrix(m)?,
                ReductionSection {
                    kind: "umap".into(),
                    input_dim: m.dim(),
                    output_dim: cfg.output_dim,
                    explained_variance_ratio: None,
                    final_objective: Some(emb.final_objective),
                },
            ))
        }
    }
}

fn cluster(m: &EmbeddingMatrix, method: &ClusterMethod) -> Result<ClusteringSection> {
    match method {
        ClusterMethod::Gmm { k_min, k_max, seed } => {
            let (report, model) = select_components(m, *k_min, *k_max, *seed)?;
            let a = hard_assign(&model, m)?;
            Ok(ClusteringSection {
                method: "gmm".into(),
                k: a.k,
                noise: 0,
                sizes: a.cluster_sizes(),
                cluster_of: a.cluster_of,
                log_likelihood: Some(model.log_likelihood),
                bic: Some(report),
            })
        }
        ClusterMethod::Dbscan { eps, min_pts } => {
            let a = dbscan_fit(m, &DbscanParams::new(*eps, *min_pts)?)?;
            Ok(ClusteringSection {
                method: "dbscan".into(),
                k: a.k,
                noise: a.noise_count(),
                sizes: a.cluster_sizes(),
                cluster_of: a.cluster_of,
                log_likelihood: None,
                bic: None,
            })
        }
    }
}

fn ordering_input(m: &EmbeddingMatrix, pca_dims: usize) -> Result<EmbeddingMatrix> {
    if m.dim() > pca_dims && m.n() > pca_dims {
        let model = pca_fit(m, pca_dims)?;
        pca_transform(&model, m)
    } else {
        Ok(m.clone())
    }
}

fn json_bytes<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    Ok(serde_json::to_vec(v)?)
}

fn execute(config: &PipelineConfig, outputs: &mut Outputs) -> Result<RunResult> {
    config.validate()?;
    let format = config.format()?;
    let m = ingest(config).map_err(|e| e.in_stage("ingest"))?;
    let digest = input_digest(config, format).map_err(|e| e.in_stage("ingest"))?;
    if config.evaluate {
        if let Some(it) = m.items().iter().find(|it| it.label.is_none()) {
            return Err(Error::MissingLabel {
                item: it.item_id.clone(),
            }
            .in_stage("evaluate"));
        }
    }
    let mut seeds = BTreeMap::new();

    let mut reduction = None;
    let mut clustering = None;
    if let Some(method) = &config.method {
        let reduce_key = hash_parts(&[digest.as_bytes(), b"reduce", &json_bytes(&config.reduction)?]);
        let rel = format!("cache/reduce-{reduce_key}.json");
        let cached: Option<ReducedCache> = outputs.cached(&rel);
        let (reduced, section) = match cached {
            Some(c) => (m.with_data(c.data, c.dim)?, c.section),
            None => {
                let (r, s) = reduce(&m, &config.reduction).map_err(|e| e.in_stage("reduce"))?;
                let entry = ReducedCache {
                    dim: r.dim(),
                    data: r.data().to_vec(),
                    section: s.clone(),
                };
                outputs.write(&rel, &json_bytes(&entry)?)?;
                (r, s)
            }
        };
        if let Reduction::Umap(u) = &config.reduction {
            seeds.insert("reduction".to_string(), vec![u.seed]);
        }
        reduction = Some(section);

        let cluster_key = hash_parts(&[reduce_key.as_bytes(), b"cluster", &json_bytes(method)?]);
        let rel = format!("cache/cluster-{cluster_key}.json");
        let section = match outputs.cached::<ClusteringSection>(&rel) {
            Some(c) => c,
            None => {
                let c = cluster(&reduced, method).map_err(|e| e.in_stage("cluster"))?;
                outputs.write(&rel, &json_bytes(&c)?)?;
                c
            }
        };
        if let ClusterMethod::Gmm { seed, .. } = method {
            seeds.insert("clustering".to_string(), vec![*seed]);
        }
        clustering = Some(section);
    }

    let mut ordering = None;
    if let Some(oc) = &config.ordering {
        let key = hash_parts(&[digest.as_bytes(), b"ordering", &json_bytes(oc)?]);
        let rel = format!("cache/ordering-{key}.json");
        let input = ordering_input(&m, oc.pca_dims).map_err(|e| e.in_stage("ordering"))?;
        let orderings = match outputs.cached::<Vec<Ordering>>(&rel) {
            Some(o) => o,
            None => {
                let o = ordering_runs(&input, &oc.tsne, oc.runs).map_err(|e| e.in_stage("ordering"))?;
                outputs.write(&rel, &json_bytes(&o)?)?;
                o
            }
        };
        let run_seeds: Vec<u64> = orderings.iter().map(|o| o.seed.unwrap_or(0)).collect();
        seeds.insert("ordering".to_string(), run_seeds.clone());
        ordering = Some(OrderingSection {
            runs: oc.runs,
            seeds: run_seeds,
            input_dim: input.dim(),
            orderings,
            coherence: None,
        });
    }

    let mut manifest = Manifest {
        schema: MANIFEST_SCHEMA_VERSION,
        tool: ToolInfo {
            name: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
        },
        created_unix: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        dataset: DatasetSummary {
            n: m.n(),
            d: m.dim(),
            source: config.input.path.display().to_string(),
            format,
            labeled: m.items().iter().filter(|it| it.label.is_some()).count(),
            normalized: config.normalize,
            sha256: digest,
        },
        config: config.resolved()?,
        seeds,
        items: m.items().to_vec(),
        reduction,
        clustering,
        ordering,
        evaluation: None,
    };
    if config.evaluate {
        manifest.evaluate()?;
    } else if m.is_fully_labeled() {
        // Coherence is cheap and label-only; report it whenever possible.
        if let Some(o) = manifest.ordering.as_mut() {
            o.coherence = Some(score_orderings(
                &o.orderings,
                &manifest.items.iter().map(|it| it.label.clone()).collect::<Vec<_>>(),
            )?);
        }
    }
    let result = write_manifest(manifest, outputs)?;
    Ok(result)
}

fn write_manifest(manifest: Manifest, outputs: &mut Outputs) -> Result<RunResult> {
    let tables = render_tables(&manifest);
    let tables_path = outputs.write(TABLES_FILE, tables.as_bytes())?;
    let manifest_path = outputs.write(MANIFEST_FILE, manifest.to_json()?.as_bytes())?;
    Ok(RunResult {
        manifest,
        output_dir: outputs.root.clone(),
        manifest_path,
        tables_path,
    })
}

/// Re-evaluate an existing manifest, optionally with labels from a JSON-lines
/// file, and rewrite it together with its tables in `dir`.
pub fn evaluate_manifest(manifest_path: &Path, labels: Option<&Path>) -> Result<RunResult> {
    let mut manifest = Manifest::load(manifest_path)?;
    if let Some(path) = labels {
        let rows = read_sidecar(path)?;
        manifest.apply_labels(rows.iter().map(|r| (r.id.as_str(), r.label.as_deref())))?;
    }
    manifest.evaluate()?;
    let dir = manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let mut outputs = Outputs::new(dir);
    let tables = render_tables(&manifest);
    let tables_path = outputs.write(TABLES_FILE, tables.as_bytes())?;
    let manifest_path = outputs.write(
        manifest_path
            .file_name()
            .and_then(|f| f.to_str())
            .unwrap_or(MANIFEST_FILE),
        manifest.to_json()?.as_bytes(),
    )?;
    Ok(RunResult {
        manifest,
        output_dir: outputs.root.clone(),
        manifest_path,
        tables_path,
    })
}

/// Serialized manifest with the timestamp zeroed, for reproducibility checks.
pub fn canonical_json(manifest: &Manifest) -> Result<String> {
    let mut m = manifest.clone();
    m.created_unix = 0;
    m.to_json()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::assignment_from_table;
    use crate::fixtures::{generate, FixtureSpec};
    use crate::store::save_embeddings;

    const FULL: &str = r#"
normalize = false
evaluate = true

[input]
path = "data.csv"

[reduction]
kind = "umap"
output_dim = 5
n_epochs = 50

[method]
kind = "gmm"
k_min = 2
k_max = 6
seed = 3

[ordering]
runs = 3

[ordering.tsne]
perplexity = 10.0
iterations = 300
"#;

    #[test]
    fn toml_config_round_trip() {
        let c = PipelineConfig::from_toml_str(FULL).unwrap();
        assert!(!c.normalize);
        assert_eq!(c.format().unwrap(), Format::Csv);
        match &c.reduction {
            Reduction::Umap(u) => {
                assert_eq!(u.output_dim, 5);
                assert_eq!(u.n_neighbors, 15);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(
            c.method,
            Some(ClusterMethod::Gmm {
                k_min: 2,
                k_max: 6,
                seed: 3
            })
        );
        assert_eq!(c.ordering.as_ref().unwrap().tsne.perplexity, 10.0);
        let back = PipelineConfig::from_toml_str(&c.to_toml_string().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn minimal_config_defaults() {
        let c = PipelineConfig::from_toml_str("[input]\npath = \"x.f32\"\n").unwrap();
        assert!(c.normalize);
        assert_eq!(c.reduction, Reduction::Pca { q: 50 });
        assert_eq!(c.format().unwrap(), Format::Rawf32);
        assert!(PipelineConfig::from_toml_str("[input]\npath = \"x\"\nbogus = 1\n").is_err());
        assert!(PipelineConfig::from_toml_str("[input]\npath = \"x.unknown\"\n")
            .unwrap()
            .validate()
            .is_err());
    }

    #[test]
    fn stages_run_and_cache() {
        let dir = tempfile::tempdir().unwrap();
        let f = generate(&FixtureSpec::new(3, 100, 4, 8.0, 4)).unwrap();
        let input = dir.path().join("data.csv");
        save_embeddings(&f.embeddings, &input, Format::Csv).unwrap();
        let mut c = PipelineConfig::new(&input);
        c.normalize = false;
        c.method = Some(ClusterMethod::Gmm {
            k_min: 2,
            k_max: 5,
            seed: 0,
        });
        c.evaluate = true;
        c.output = Some(dir.path().join("out"));
        let first = run_pipeline(&c).unwrap();
        let bic = first.manifest.clustering.as_ref().unwrap().bic.clone();
        assert_eq!(first.manifest.clustering.as_ref().unwrap().k, 3, "{bic:?}");
        assert_eq!(first.manifest.evaluation.as_ref().unwrap().accuracy, 1.0);
        let caches = std::fs::read_dir(dir.path().join("out/cache")).unwrap().count();
        assert_eq!(caches, 2);

        // A different clusterer reuses the reduction cache entry.
        c.method = Some(ClusterMethod::Dbscan { eps: 0.5, min_pts: 4 });
        run_pipeline(&c).unwrap();
        let caches = std::fs::read_dir(dir.path().join("out/cache")).unwrap().count();
        assert_eq!(caches, 3);
    }

    #[test]
    fn failure_removes_new_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let f = generate(&FixtureSpec::new(2, 10, 3, 8.0, 4)).unwrap();
        let input = dir.path().join("data.jsonl");
        save_embeddings(&f.embeddings, &input, Format::Jsonl).unwrap();
        let mut c = PipelineConfig::new(&input);
        // k_max >= N fails in the cluster stage, after the reduction was cached.
        c.method = Some(ClusterMethod::Gmm {
            k_min: 2,
            k_max: 40,
            seed: 0,
        });
        c.output = Some(dir.path().join("out"));
        let err = run_pipeline(&c).unwrap_err();
        assert!(err.to_string().starts_with("cluster stage failed"), "{err}");
        assert!(!dir.path().join("out").exists());
    }

    #[test]
    fn evaluation_without_labels_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let f = generate(&FixtureSpec::new(2, 10, 3, 8.0, 4)).unwrap();
        let input = dir.path().join("data.csv");
        save_embeddings(&f.embeddings.without_labels(), &input, Format::Csv).unwrap();
        let mut c = PipelineConfig::new(&input);
        c.method = Some(ClusterMethod::Dbscan { eps: 0.5, min_pts: 3 });
        c.evaluate = true;
        c.output = Some(dir.path().join("out"));
        let err = run_pipeline(&c).unwrap_err();
        assert!(err.to_string().contains("evaluation requires labels"), "{err}");
        assert!(!dir.path().join("out").exists());
    }

    fn five_species_manifest() -> Manifest {
        let species = ["badger", "raccoon dog", "red fox", "polecat", "hooded crow"];
        let table = vec![
            vec![93, 7, 0, 0, 0],
            vec![31, 61, 4, 0, 4],
            vec![0, 2, 95, 3, 0],
            vec![0, 0, 9, 91, 0],
            vec![0, 1, 0, 0, 99],
        ];
        let (a, labels) = assignment_from_table(&species, &table).unwrap();
        let items: Vec<ItemRecord> = labels
            .iter()
            .enumerate()
            .map(|(i, l)| ItemRecord::labeled(format!("{i:03}"), l.clone().unwrap()))
            .collect();
        Manifest {
            schema: MANIFEST_SCHEMA_VERSION,
            tool: ToolInfo {
                name: "wildsort".into(),
                version: "test".into(),
            },
            created_unix: 0,
            dataset: DatasetSummary {
                n: 500,
                d: 1,
                source: "table".into(),
                format: Format::Csv,
                labeled: 500,
                normalized: false,
                sha256: String::new(),
            },
            config: PipelineConfig::new("table.csv"),
            seeds: BTreeMap::new(),
            items,
            reduction: None,
            clustering: Some(ClusteringSection {
                method: "gmm".into(),
                k: a.k,
                noise: 0,
                sizes: a.cluster_sizes(),
                cluster_of: a.cluster_of.clone(),
                log_likelihood: None,
                bic: None,
            }),
            ordering: None,
            evaluation: Some(evaluate(&a, &labels).unwrap()),
        }
    }

    #[test]
    fn rendered_tables() {
        let m = five_species_manifest();
        let text = render_tables(&m);
        let macro_line = text.lines().find(|l| l.starts_with("Macro Average")).unwrap();
        assert!(macro_line.ends_with("0.874"), "{macro_line}");
        assert!(text.contains("no ordering run"));
        assert!(render_coherence(&m).is_err());
        assert!(render_confusion(&m).unwrap().contains("badger"));
    }
}
