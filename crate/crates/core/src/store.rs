//! Embedding collections and their on-disk formats.
//!
//! Three interchangeable formats are supported:
//!
//! * **CSV** with header `item_id,label,dim_0,...,dim_{d-1}`; an empty label
//!   field means unlabeled.
//! * **JSON-lines**, one `{"id": .., "label": .. | null, "vec": [..]}` object
//!   per row.
//! * **rawf32**, the canonical binary form: magic `FSEM`, then little-endian
//!   `u32` version (1), `u32` N and `u32` d, followed by N·d little-endian
//!   `f32` values in row-major order. Item ids and labels live in a JSON-lines
//!   sidecar with the same stem and a `.jsonl` extension.
//!
//! Values are held as `f64` in memory. Labels are carried for evaluation only;
//! no clustering or ordering code reads them.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const RAW_MAGIC: &[u8; 4] = b"FSEM";
pub const RAW_VERSION: u32 = 1;
const RAW_HEADER_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub item_id: String,
    pub label: Option<String>,
    pub crop_ref: Option<String>,
}

impl ItemRecord {
    pub fn new(item_id: impl Into<String>) -> Self {
        ItemRecord {
            item_id: item_id.into(),
            label: None,
            crop_ref: None,
        }
    }

    pub fn labeled(item_id: impl Into<String>, label: impl Into<String>) -> Self {
        ItemRecord {
            item_id: item_id.into(),
            label: Some(label.into()),
            crop_ref: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Jsonl,
    Rawf32,
}

impl Format {
    /// Guess the format from a file extension (`csv`, `jsonl`/`ndjson`, `f32`/`fsem`/`bin`).
    pub fn from_extension(path: &Path) -> Option<Format> {
        let ext = path.extension()?.to_str()?.to_ascii_lowercase();
        match ext.as_str() {
            "csv" => Some(Format::Csv),
            "jsonl" | "ndjson" => Some(Format::Jsonl),
            "f32" | "fsem" | "bin" => Some(Format::Rawf32),
            _ => None,
        }
    }
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(Format::Csv),
            "jsonl" => Ok(Format::Jsonl),
            "rawf32" => Ok(Format::Rawf32),
            other => Err(Error::invalid(format!(
                "unknown embedding format {other:?} (expected csv, jsonl or rawf32)"
            ))),
        }
    }
}

impl fmt::Display for Format {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(match self {
            Format::Csv => "csv",
            Format::Jsonl => "jsonl",
            Format::Rawf32 => "rawf32",
        })
    }
}

/// N×d matrix of item vectors, row `i` belonging to `items[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    items: Vec<ItemRecord>,
    data: Vec<f64>,
    dim: usize,
}

impl EmbeddingMatrix {
    /// Build a validated matrix from row-major data.
    pub fn new(items: Vec<ItemRecord>, data: Vec<f64>, dim: usize) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::invalid("embedding matrix needs at least one row"));
        }
        if dim == 0 {
            return Err(Error::invalid("embedding dimension must be at least 1"));
        }
        if data.len() != items.len() * dim {
            return Err(Error::invalid(format!(
                "data length {} does not match {} rows x {} dims",
                data.len(),
                items.len(),
                dim
            )));
        }
        let mut seen = HashSet::with_capacity(items.len());
        for (row, item) in items.iter().enumerate() {
            if !seen.insert(item.item_id.as_str()) {
                return Err(Error::DuplicateId {
                    row,
                    id: item.item_id.clone(),
                });
            }
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                row: pos / dim,
                col: pos % dim,
            });
        }
        Ok(EmbeddingMatrix { items, data, dim })
    }

    /// Build from rows, generating ids `"0".."N-1"` and no labels.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map(|r| r.len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (row, r) in rows.iter().enumerate() {
            if r.len() != dim {
                return Err(Error::DimensionMismatch {
                    row,
                    expected: dim,
                    found: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        let items = (0..rows.len()).map(|i| ItemRecord::new(i.to_string())).collect();
        EmbeddingMatrix::new(items, data, dim)
    }

    pub fn n(&self) -> usize {
        self.items.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn items(&self) -> &[ItemRecord] {
        &self.items
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.dim)
    }

    pub fn item_ids(&self) -> Vec<String> {
        self.items.iter().map(|it| it.item_id.clone()).collect()
    }

    /// Ground-truth labels, one per row.
    pub fn labels(&self) -> Vec<Option<String>> {
        self.items.iter().map(|it| it.label.clone()).collect()
    }

    pub fn has_labels(&self) -> bool {
        self.items.iter().any(|it| it.label.is_some())
    }

    pub fn is_fully_labeled(&self) -> bool {
        self.items.iter().all(|it| it.label.is_some())
    }

    /// Same vectors with every label removed.
    pub fn without_labels(&self) -> Self {
        let mut out = self.clone();
        for it in &mut out.items {
            it.label = None;
        }
        out
    }

    /// Replace the vectors, keeping item records. Used by reductions.
    pub fn with_data(&self, data: Vec<f64>, dim: usize) -> Result<Self> {
        EmbeddingMatrix::new(self.items.clone(), data, dim)
    }

    /// Set labels from `(item_id, label)` pairs. Ids not in the matrix are an error;
    /// items not mentioned keep their current label.
    pub fn apply_labels<I>(&mut self, pairs: I) -> Result<usize>
    where
        I: IntoIterator<Item = (String, Option<String>)>,
    {
        let index: BTreeMap<&str, usize> = self
            .items
            .iter()
            .enumerate()
            .map(|(i, it)| (it.item_id.as_str(), i))
            .collect();
        let mut updates = Vec::new();
        for (row, (id, label)) in pairs.into_iter().enumerate() {
            let Some(&i) = index.get(id.as_str()) else {
                return Err(Error::Parse {
                    row,
                    message: format!("label for unknown item id {id:?}"),
                });
            };
            updates.push((i, label));
        }
        let count = updates.len();
        for (i, label) in updates {
            self.items[i].label = label;
        }
        Ok(count)
    }

    /// Rows reordered by `perm` (`out[i] = self[perm[i]]`).
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.n() {
            return Err(Error::invalid("permutation length differs from row count"));
        }
        let mut data = Vec::with_capacity(self.data.len());
        let mut items = Vec::with_capacity(self.n());
        for &p in perm {
            data.extend_from_slice(self.row(p));
            items.push(self.items[p].clone());
        }
        EmbeddingMatrix::new(items, data, self.dim)
    }
}

/// Scale every row to unit Euclidean norm.
pub fn l2_normalize(m: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
    let mut data = Vec::with_capacity(m.data.len());
    for (row, r) in m.rows().enumerate() {
        let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::ZeroNorm { row });
        }
        data.extend(r.iter().map(|v| v / norm));
    }
    m.with_data(data, m.dim)
}

#[derive(Debug, Serialize, Deserialize)]
struct JsonlRow {
    #[serde(alias = "item_id")]
    id: String,
    #[serde(default)]
    label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    crop_ref: Option<String>,
    vec: Vec<f64>,
}

/// Sidecar record for rawf32 files and annotation exports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SidecarRow {
    #[serde(alias = "item_id")]
    pub id: String,
    #[serde(default)]
    pub label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crop_ref: Option<String>,
}

pub fn load_embeddings(path: impl AsRef<Path>, format: Format) -> Result<EmbeddingMatrix> {
    let path = path.as_ref();
    match format {
        Format::Csv => load_csv(path),
        Format::Jsonl => load_jsonl(path),
        Format::Rawf32 => load_rawf32(path),
    }
}

pub fn save_embeddings(m: &EmbeddingMatrix, path: impl AsRef<Path>, format: Format) -> Result<()> {
    let path = path.as_ref();
    match format {
        Format::Csv => save_csv(m, path),
        Format::Jsonl => save_jsonl(m, path),
        Format::Rawf32 => save_rawf32(m, path),
    }
}

/// Path of the ids/labels sidecar accompanying a rawf32 file.
pub fn sidecar_path(raw: &Path) -> PathBuf {
    raw.with_extension("jsonl")
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn check_finite(row: usize, values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(col) => Err(Error::NonFinite { row, col }),
        None => Ok(()),
    }
}

fn load_csv(path: &Path) -> Result<EmbeddingMatrix> {
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(open(path)?);
    let header = reader.headers()?.clone();
    if header.len() < 3 || &header[0] != "item_id" || &header[1] != "label" {
        return Err(Error::Parse {
            row: 0,
            message: "header must start with item_id,label followed by dim_0..".into(),
        });
    }
    let dim = header.len() - 2;
    let mut items = Vec::new();
    let mut data = Vec::new();
    for (row, rec) in reader.records().enumerate() {
        let rec = rec?;
        if rec.len() != dim + 2 {
            return Err(Error::DimensionMismatch {
                row,
                expected: dim,
                found: rec.len().saturating_sub(2),
            });
        }
        let label = match &rec[1] {
            "" => None,
            s => Some(s.to_string()),
        };
        let start = data.len();
        for field in rec.iter().skip(2) {
            let v: f64 = field.trim().parse().map_err(|_| Error::Parse {
                row,
                message: format!("not a number: {field:?}"),
            })?;
            data.push(v);
        }
        check_finite(row, &data[start..])?;
        items.push(ItemRecord {
            item_id: rec[0].to_string(),
            label,
            crop_ref: None,
        });
    }
    EmbeddingMatrix::new(items, data, dim)
}

fn save_csv(m: &EmbeddingMatrix, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    let mut header = vec!["item_id".to_string(), "label".to_string()];
    header.extend((0..m.dim).map(|j| format!("dim_{j}")));
    w.write_record(&header)?;
    for (item, r) in m.items.iter().zip(m.rows()) {
        let mut rec = Vec::with_capacity(m.dim + 2);
        rec.push(item.item_id.clone());
        rec.push(item.label.clone().unwrap_or_default());
        rec.extend(r.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn load_jsonl(path: &Path) -> Result<EmbeddingMatrix> {
    let reader = BufReader::new(open(path)?);
    let mut items = Vec::new();
    let mut data = Vec::new();
    let mut dim = None;
    for (line_no, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row = items.len();
        let parsed: JsonlRow = serde_json::from_str(&line).map_err(|e| Error::Parse {
            row,
            message: format!("line {}: {e}", line_no + 1),
        })?;
        let expected = *dim.get_or_insert(parsed.vec.len());
        if parsed.vec.len() != expected {
            return Err(Error::DimensionMismatch {
                row,
                expected,
                found: parsed.vec.len(),
            });
        }
        check_finite(row, &parsed.vec)?;
        data.extend_from_slice(&parsed.vec);
        items.push(ItemRecord {
            item_id: parsed.id,
            label: parsed.label,
            crop_ref: parsed.crop_ref,
        });
    }
    EmbeddingMatrix::new(items, data, dim.unwrap_or(0))
}

fn save_jsonl(m: &EmbeddingMatrix, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    for (item, r) in m.items.iter().zip(m.rows()) {
        let row = JsonlRow {
            id: item.item_id.clone(),
            label: item.label.clone(),
            crop_ref: item.crop_ref.clone(),
            vec: r.to_vec(),
        };
        serde_json::to_writer(&mut w, &row)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Read a JSON-lines sidecar of `{"id", "label"}` records.
pub fn read_sidecar(path: impl AsRef<Path>) -> Result<Vec<SidecarRow>> {
    let path = path.as_ref();
    let reader = BufReader::new(open(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row = out.len();
        let rec: SidecarRow = serde_json::from_str(&line).map_err(|e| Error::Parse {
            row,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_sidecar(path: impl AsRef<Path>, rows: &[SidecarRow]) -> Result<()> {
    let path = path.as_ref();
    let mut w = create(path)?;
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn load_rawf32(path: &Path) -> Result<EmbeddingMatrix> {
    let mut bytes = Vec::new();
    open(path)?.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    if bytes.len() < RAW_HEADER_LEN || &bytes[..4] != RAW_MAGIC {
        return Err(Error::Parse {
            row: 0,
            message: "missing FSEM header".into(),
        });
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
    let version = word(4);
    if version != RAW_VERSION {
        return Err(Error::Parse {
            row: 0,
            message: format!("unsupported rawf32 version {version}"),
        });
    }
    let n = word(8) as usize;
    let dim = word(12) as usize;
    let payload = &bytes[RAW_HEADER_LEN..];
    if payload.len() != n * dim * 4 {
        return Err(Error::Parse {
            row: 0,
            message: format!("payload has {} bytes, header declares {n} x {dim} f32", payload.len()),
        });
    }
    let data: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    for row in 0..n {
        check_finite(row, &data[row * dim..(row + 1) * dim])?;
    }

    let side = sidecar_path(path);
    let items = if side.exists() {
        let rows = read_sidecar(&side)?;
        if rows.len() != n {
            return Err(Error::Parse {
                row: rows.len().min(n),
                message: format!("sidecar has {} records for {n} vectors", rows.len()),
            });
        }
        rows.into_iter()
            .map(|r| ItemRecord {
                item_id: r.id,
                label: r.label,
                crop_ref: r.crop_ref,
            })
            .collect()
    } else {
        (0..n).map(|i| ItemRecord::new(i.to_string())).collect()
    };
    EmbeddingMatrix::new(items, data, dim)
}

fn save_rawf32(m: &EmbeddingMatrix, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    w.write_all(RAW_MAGIC).map_err(io)?;
    for word in [RAW_VERSION, m.n() as u32, m.dim as u32] {
        w.write_all(&word.to_le_bytes()).map_err(io)?;
    }
    for v in &m.data {
        w.write_all(&(*v as f32).to_le_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)?;

    let rows: Vec<SidecarRow> = m
        .items
        .iter()
        .map(|it| SidecarRow {
            id: it.item_id.clone(),
            label: it.label.clone(),
            crop_ref: it.crop_ref.clone(),
        })
        .collect();
    write_sidecar(sidecar_path(path), &rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn csv_three_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.csv");
        std::fs::write(
            &p,
            "item_id,label,dim_0,dim_1,dim_2,dim_3\n\
             a,fox,1,2,3,4\n\
             b,,0.5,0.25,0,1\n\
             c,crow,-1,-2,-3,-4\n",
        )
        .unwrap();
        let m = load_embeddings(&p, Format::Csv).unwrap();
        assert_eq!((m.n(), m.dim()), (3, 4));
        assert_eq!(m.items()[1].label, None);
        assert_eq!(m.items()[2].label.as_deref(), Some("crow"));
        assert_eq!(m.row(1), &[0.5, 0.25, 0.0, 1.0]);
    }

    #[test]
    fn csv_nan_names_the_row() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.csv");
        std::fs::write(&p, "item_id,label,dim_0,dim_1\na,,1,2\nb,,NaN,2\n").unwrap();
        match load_embeddings(&p, Format::Csv) {
            Err(Error::NonFinite { row: 1, col: 0 }) => {}
            other => panic!("expected NonFinite at row 1, got {other:?}"),
        }
    }

    #[test]
    fn csv_dimension_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.csv");
        std::fs::write(&p, "item_id,label,dim_0,dim_1\na,,1,2\nb,,3\n").unwrap();
        assert!(matches!(
            load_embeddings(&p, Format::Csv),
            Err(Error::DimensionMismatch { row: 1, .. })
        ));
    }

    #[test]
    fn jsonl_duplicate_id() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.jsonl");
        std::fs::write(
            &p,
            "{\"id\":\"x\",\"label\":null,\"vec\":[1,2]}\n{\"id\":\"x\",\"label\":\"a\",\"vec\":[3,4]}\n",
        )
        .unwrap();
        assert!(matches!(
            load_embeddings(&p, Format::Jsonl),
            Err(Error::DuplicateId { row: 1, .. })
        ));
    }

    #[test]
    fn rawf32_500_by_1536_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (n, d) = (500, 1536);
        let data: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0f32..1.0) as f64).collect();
        let items = (0..n)
            .map(|i| ItemRecord::labeled(format!("crop/{i}.jpg"), format!("s{}", i % 5)))
            .collect();
        let m = EmbeddingMatrix::new(items, data, d).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("emb.f32");
        save_embeddings(&m, &p, Format::Rawf32).unwrap();
        assert_eq!(std::fs::metadata(&p).unwrap().len() as usize, 16 + n * d * 4);
        let back = load_embeddings(&p, Format::Rawf32).unwrap();
        assert_eq!((back.n(), back.dim()), (500, 1536));
        assert_eq!(back, m);
    }

    #[test]
    fn rawf32_rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.f32");
        std::fs::write(&p, b"NOPE\x01\0\0\0\x01\0\0\0\x01\0\0\0\0\0\x80\x3f").unwrap();
        assert!(matches!(load_embeddings(&p, Format::Rawf32), Err(Error::Parse { .. })));
    }

    #[test]
    fn normalize_three_four_five() {
        let m = EmbeddingMatrix::from_rows(&[vec![3.0, 4.0]]).unwrap();
        let n = l2_normalize(&m).unwrap();
        assert!((n.row(0)[0] - 0.6).abs() < 1e-15);
        assert!((n.row(0)[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn normalize_is_idempotent_on_unit_rows() {
        let m = EmbeddingMatrix::from_rows(&[vec![0.6, 0.8], vec![1.0, 0.0]]).unwrap();
        let n = l2_normalize(&m).unwrap();
        for (a, b) in m.data().iter().zip(n.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn normalize_random_rows_have_unit_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let rows: Vec<Vec<f64>> = (0..10)
            .map(|_| (0..8).map(|_| rng.random_range(-5.0..5.0)).collect())
            .collect();
        let n = l2_normalize(&EmbeddingMatrix::from_rows(&rows).unwrap()).unwrap();
        for r in n.rows() {
            let norm: f64 = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn normalize_zero_row_reports_index() {
        let m = EmbeddingMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        assert!(matches!(l2_normalize(&m), Err(Error::ZeroNorm { row: 1 })));
    }

    #[test]
    fn apply_labels_rejects_unknown_ids() {
        let mut m = EmbeddingMatrix::from_rows(&[vec![1.0], vec![2.0]]).unwrap();
        let n = m
            .apply_labels(vec![("1".to_string(), Some("fox".to_string()))])
            .unwrap();
        assert_eq!(n, 1);
        assert_eq!(m.labels(), vec![None, Some("fox".to_string())]);
        assert!(m.apply_labels(vec![("zzz".to_string(), None)]).is_err());
    }
}
