//! Semantic-search index: embed a corpus once through the inference path,
//! rank queries by clamped cosine similarity.
//!
//! The index is immutable after build. On disk it is a directory holding a
//! JSON manifest, a JSON id/metadata table, and a flat row-major matrix of
//! little-endian f32 encodings; entries are quantized to f32 at build time
//! so the file round-trip is bitwise exact.

use std::fs::File;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::FunctionRecord;
use crate::error::{Error, Result};
use crate::train::{cosine_similarity, Checkpoint};

pub const INDEX_SCHEMA: &str = "pluvio-index";
pub const INDEX_VERSION: u32 = 1;

/// Pairwise similarity score in [0, 1]: cosine clamped at zero from below.
pub fn sscore(z_a: &[f64], z_b: &[f64]) -> Result<f64> {
    let a = ndarray::ArrayView1::from(z_a).to_owned();
    let b = ndarray::ArrayView1::from(z_b).to_owned();
    Ok(cosine_similarity(&a, &b)?.max(0.0))
}

/// Informational metadata carried per index entry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub id: String,
    pub name_norm: String,
    pub library: String,
    pub architecture: String,
    pub optimization: String,
}

/// One ranked search result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryHit {
    pub rank: usize,
    pub id: String,
    pub name: String,
    pub sscore: f64,
}

/// Immutable mapping from function id to inference-path encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchIndex {
    pub dim: usize,
    /// Fingerprint of the checkpoint that produced the encodings.
    pub fingerprint: String,
    pub entries: Vec<IndexEntry>,
    /// Row-major encodings, one row per entry, quantized to f32.
    pub vectors: Vec<Vec<f32>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexManifest {
    schema: String,
    version: u32,
    dim: usize,
    count: usize,
    fingerprint: String,
}

/// Embed every record through the inference path (absent conditions, zero
/// noise) and collect the encodings into an index.
pub fn build_index(checkpoint: &Checkpoint, records: &[FunctionRecord]) -> Result<SearchIndex> {
    let fingerprint = checkpoint.fingerprint();
    let mut entries = Vec::with_capacity(records.len());
    let mut vectors = Vec::with_capacity(records.len());
    let mut dim = 0usize;
    for record in records {
        let z = checkpoint.infer_encoding(&record.instruction_sequence)?;
        dim = z.len();
        vectors.push(z.iter().map(|&v| v as f32).collect());
        entries.push(IndexEntry {
            id: record.id.clone(),
            name_norm: record.name_norm.clone(),
            library: record.library.clone(),
            architecture: record.architecture.clone(),
            optimization: record.optimization.clone(),
        });
    }
    Ok(SearchIndex {
        dim,
        fingerprint,
        entries,
        vectors,
    })
}

/// Rank the index against a query encoding: descending sscore, ties broken
/// by ascending id, at most `top_n` results.
pub fn query_encoding(index: &SearchIndex, z: &[f64], top_n: usize) -> Result<Vec<QueryHit>> {
    if index.entries.is_empty() {
        return Err(Error::Domain("cannot query an empty index".into()));
    }
    if top_n == 0 {
        return Err(Error::Domain("top_n must be at least 1".into()));
    }
    let mut scored: Vec<(usize, f64)> = Vec::with_capacity(index.entries.len());
    for (i, row) in index.vectors.iter().enumerate() {
        let entry: Vec<f64> = row.iter().map(|&v| v as f64).collect();
        scored.push((i, sscore(z, &entry)?));
    }
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .expect("finite scores")
            .then_with(|| index.entries[a.0].id.cmp(&index.entries[b.0].id))
    });
    Ok(scored
        .into_iter()
        .take(top_n)
        .enumerate()
        .map(|(rank, (i, s))| QueryHit {
            rank: rank + 1,
            id: index.entries[i].id.clone(),
            name: index.entries[i].name_norm.clone(),
            sscore: s,
        })
        .collect())
}

/// Embed `text` with the checkpoint's inference path and rank the index.
/// The index must have been built by the same checkpoint.
pub fn query(
    index: &SearchIndex,
    checkpoint: &Checkpoint,
    text: &str,
    top_n: usize,
) -> Result<Vec<QueryHit>> {
    if index.fingerprint != checkpoint.fingerprint() {
        return Err(Error::Incompatible {
            what: "search index".into(),
            expected: index.fingerprint.clone(),
            found: checkpoint.fingerprint(),
        });
    }
    let z = checkpoint.infer_encoding(text)?;
    query_encoding(index, z.as_slice().expect("contiguous"), top_n)
}

impl SearchIndex {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let manifest = IndexManifest {
            schema: INDEX_SCHEMA.into(),
            version: INDEX_VERSION,
            dim: self.dim,
            count: self.entries.len(),
            fingerprint: self.fingerprint.clone(),
        };
        serde_json::to_writer_pretty(File::create(dir.join("manifest.json"))?, &manifest)?;
        serde_json::to_writer_pretty(File::create(dir.join("entries.json"))?, &self.entries)?;
        let mut bytes = Vec::with_capacity(self.entries.len() * self.dim * 4);
        for row in &self.vectors {
            for &v in row {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::write(dir.join("matrix.f32"), bytes)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<SearchIndex> {
        let manifest_path = dir.join("manifest.json");
        let manifest: IndexManifest = serde_json::from_reader(File::open(&manifest_path)?)
            .map_err(|e| Error::Manifest(format!("{}: {e}", manifest_path.display())))?;
        if manifest.schema != INDEX_SCHEMA || manifest.version != INDEX_VERSION {
            return Err(Error::Incompatible {
                what: "search index".into(),
                expected: format!("{INDEX_SCHEMA} v{INDEX_VERSION}"),
                found: format!("{} v{}", manifest.schema, manifest.version),
            });
        }
        let entries: Vec<IndexEntry> = serde_json::from_reader(File::open(dir.join("entries.json"))?)
            .map_err(|e| Error::Manifest(format!("entries.json: {e}")))?;
        if entries.len() != manifest.count {
            return Err(Error::Manifest(format!(
                "entries.json lists {} entries, manifest says {}",
                entries.len(),
                manifest.count
            )));
        }
        let bytes = std::fs::read(dir.join("matrix.f32"))?;
        let expected = manifest.count * manifest.dim * 4;
        if bytes.len() != expected {
            return Err(Error::Manifest(format!(
                "matrix.f32 holds {} bytes, expected {expected}",
                bytes.len()
            )));
        }
        let mut vectors = Vec::with_capacity(manifest.count);
        for row_bytes in bytes.chunks_exact(manifest.dim * 4) {
            let row: Vec<f32> = row_bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            vectors.push(row);
        }
        Ok(SearchIndex {
            dim: manifest.dim,
            fingerprint: manifest.fingerprint,
            entries,
            vectors,
        })
    }
}
