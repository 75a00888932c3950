//! Text-encoder backends: tokenization, the shared token-embedding table,
//! and pooled sequence embeddings.
//!
//! Two backends sit behind one struct. The `compact` backend is a small
//! seed-initialized encoder (token table, masked mean pooling, one dense
//! tanh transform) used for desk-scale runs. The `pretrained-text` backend
//! loads the same shape of machinery from a weights directory so an
//! externally trained general-text encoder can be dropped in. Both expose
//! the embedding table to the removal agent.

use std::collections::HashMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Dense};
use crate::rng::substream;

/// Token ids plus attention mask, padded to the tokenizer length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedSequence {
    pub token_ids: Vec<u32>,
    pub attention_mask: Vec<u8>,
    pub true_length: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    Compact,
    PretrainedText,
}

impl std::fmt::Display for BackendKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BackendKind::Compact => write!(f, "compact"),
            BackendKind::PretrainedText => write!(f, "pretrained-text"),
        }
    }
}

/// A tokenizer plus embedder with one shared token table.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoder {
    pub name: String,
    pub kind: BackendKind,
    pub d: usize,
    pub ls_max: usize,
    pub k_limit: usize,
    pub pad_id: u32,
    pub unk_id: u32,
    pub vocab_size: usize,
    /// Embedding table, (vocab_size x d). Shared by `token_embed`, `embed`,
    /// and the removal agent's scorer input.
    pub table: Array2<f64>,
    /// Dense tanh transforms applied after pooling.
    pub dense: Vec<Dense>,
    /// Explicit token vocabulary (pretrained backend); `None` means tokens
    /// are hashed into the table.
    vocab: Option<HashMap<String, u32>>,
}

/// Intermediate activations of one `embed` call, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct EmbedCache {
    pub rows: Array2<f64>,
    pub mask: Vec<u8>,
    pub n_live: usize,
    /// Input to dense layer i (index 0 is the pooled vector).
    pub layer_inputs: Vec<Array1<f64>>,
    /// tanh output of dense layer i.
    pub layer_outputs: Vec<Array1<f64>>,
}

/// Gradient buffers for the encoder parameters. The table gradient is only
/// allocated when the embedder is trainable.
#[derive(Debug, Clone)]
pub struct EncoderGrads {
    pub table: Option<Array2<f64>>,
    pub dense: Vec<Dense>,
}

impl EncoderGrads {
    pub fn new(enc: &TextEncoder, train_table: bool) -> Self {
        EncoderGrads {
            table: train_table.then(|| Array2::zeros((enc.vocab_size, enc.d))),
            dense: enc
                .dense
                .iter()
                .map(|l| Dense::zeros(l.out_dim(), l.in_dim()))
                .collect(),
        }
    }

    pub fn zero(&mut self) {
        if let Some(t) = &mut self.table {
            t.fill(0.0);
        }
        for l in &mut self.dense {
            l.zero();
        }
    }
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub const COMPACT_D: usize = 64;
pub const COMPACT_LS_MAX: usize = 256;
pub const COMPACT_K_LIMIT: usize = 64;
pub const COMPACT_VOCAB: usize = 4096;

pub const PRETRAINED_D: usize = 768;
pub const PRETRAINED_LS_MAX: usize = 2048;
pub const PRETRAINED_K_LIMIT: usize = 512;

#[derive(Debug, Serialize, Deserialize)]
struct WeightsManifest {
    backend: String,
    name: String,
    d: usize,
    ls_max: usize,
    k_limit: usize,
    vocab_size: usize,
    pad_id: u32,
    unk_id: u32,
    n_dense: usize,
}

impl TextEncoder {
    /// Seed-initialized compact backend with a hashing tokenizer.
    pub fn compact(d: usize, ls_max: usize, k_limit: usize, vocab_size: usize, seed: u64) -> Result<Self> {
        if k_limit > ls_max || k_limit == 0 || d == 0 || vocab_size < 2 {
            return Err(Error::Config(format!(
                "invalid compact backend dims: d={d}, ls_max={ls_max}, k_limit={k_limit}, vocab={vocab_size}"
            )));
        }
        let mut rng = substream(seed, "encoder-init");
        let table = {
            use rand_distr::{Distribution, Normal};
            let normal = Normal::new(0.0, 0.5).expect("valid std");
            let mut t = Array2::from_shape_fn((vocab_size, d), |_| normal.sample(&mut rng));
            t.row_mut(0).fill(0.0); // pad row
            t
        };
        let dense = vec![Dense::seeded(d, d, 1.0 / (d as f64).sqrt(), &mut rng)];
        Ok(TextEncoder {
            name: "compact".into(),
            kind: BackendKind::Compact,
            d,
            ls_max,
            k_limit,
            pad_id: 0,
            unk_id: 0,
            vocab_size,
            table,
            dense,
            vocab: None,
        })
    }

    pub fn compact_default(seed: u64) -> Self {
        Self::compact(COMPACT_D, COMPACT_LS_MAX, COMPACT_K_LIMIT, COMPACT_VOCAB, seed)
            .expect("default dims are valid")
    }

    /// Load a pretrained-text backend from a weights directory:
    /// `manifest.json`, `vocab.json` (token list, index = id), and f32
    /// little-endian blobs `table.f32`, `dense_<i>_w.f32`, `dense_<i>_b.f32`.
    pub fn load_weights_dir(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join("manifest.json");
        let manifest: WeightsManifest = serde_json::from_reader(File::open(&manifest_path)?)
            .map_err(|e| Error::Manifest(format!("{}: {e}", manifest_path.display())))?;
        if manifest.backend != "pretrained-text" {
            return Err(Error::Incompatible {
                what: "weights directory".into(),
                expected: "pretrained-text".into(),
                found: manifest.backend,
            });
        }
        if manifest.k_limit > manifest.ls_max {
            return Err(Error::Manifest("k_limit exceeds ls_max".into()));
        }
        let tokens: Vec<String> = serde_json::from_reader(File::open(dir.join("vocab.json"))?)
            .map_err(|e| Error::Manifest(format!("vocab.json: {e}")))?;
        if tokens.len() != manifest.vocab_size {
            return Err(Error::Manifest(format!(
                "vocab.json lists {} tokens, manifest says {}",
                tokens.len(),
                manifest.vocab_size
            )));
        }
        let vocab: HashMap<String, u32> = tokens
            .into_iter()
            .enumerate()
            .map(|(i, t)| (t, i as u32))
            .collect();
        let table_flat = read_f32_blob(&dir.join("table.f32"), manifest.vocab_size * manifest.d)?;
        let table = Array2::from_shape_vec((manifest.vocab_size, manifest.d), table_flat)
            .expect("length checked");
        let mut dense = Vec::with_capacity(manifest.n_dense);
        for i in 0..manifest.n_dense {
            let w_flat = read_f32_blob(&dir.join(format!("dense_{i}_w.f32")), manifest.d * manifest.d)?;
            let b = read_f32_blob(&dir.join(format!("dense_{i}_b.f32")), manifest.d)?;
            dense.push(Dense {
                w: Array2::from_shape_vec((manifest.d, manifest.d), w_flat).expect("length checked"),
                b: Array1::from_vec(b),
            });
        }
        Ok(TextEncoder {
            name: manifest.name,
            kind: BackendKind::PretrainedText,
            d: manifest.d,
            ls_max: manifest.ls_max,
            k_limit: manifest.k_limit,
            pad_id: manifest.pad_id,
            unk_id: manifest.unk_id,
            vocab_size: manifest.vocab_size,
            table,
            dense,
            vocab: Some(vocab),
        })
    }

    /// Write this encoder out in the weights-directory layout.
    pub fn export_weights_dir(&self, dir: &Path) -> Result<()> {
        let vocab = self.vocab.as_ref().ok_or_else(|| {
            Error::Config("only explicit-vocabulary encoders can be exported as weights dirs".into())
        })?;
        std::fs::create_dir_all(dir)?;
        let manifest = WeightsManifest {
            backend: "pretrained-text".into(),
            name: self.name.clone(),
            d: self.d,
            ls_max: self.ls_max,
            k_limit: self.k_limit,
            vocab_size: self.vocab_size,
            pad_id: self.pad_id,
            unk_id: self.unk_id,
            n_dense: self.dense.len(),
        };
        serde_json::to_writer_pretty(File::create(dir.join("manifest.json"))?, &manifest)?;
        let mut tokens = vec![String::new(); self.vocab_size];
        for (t, &i) in vocab {
            tokens[i as usize] = t.clone();
        }
        serde_json::to_writer(File::create(dir.join("vocab.json"))?, &tokens)?;
        write_f32_blob(&dir.join("table.f32"), self.table.iter().cloned())?;
        for (i, layer) in self.dense.iter().enumerate() {
            write_f32_blob(&dir.join(format!("dense_{i}_w.f32")), layer.w.iter().cloned())?;
            write_f32_blob(&dir.join(format!("dense_{i}_b.f32")), layer.b.iter().cloned())?;
        }
        Ok(())
    }

    /// Build an in-memory pretrained-style encoder from explicit parts
    /// (test scaffolding for the weights-directory route).
    pub fn from_parts(
        name: &str,
        tokens: Vec<String>,
        table: Array2<f64>,
        dense: Vec<Dense>,
        ls_max: usize,
        k_limit: usize,
        pad_id: u32,
        unk_id: u32,
    ) -> Result<Self> {
        let vocab_size = tokens.len();
        let d = table.ncols();
        if table.nrows() != vocab_size {
            return Err(Error::Config("table rows must match vocabulary size".into()));
        }
        let vocab = tokens
            .into_iter()
            .enumerate()
            .map(|(i, t)| (t, i as u32))
            .collect();
        Ok(TextEncoder {
            name: name.into(),
            kind: BackendKind::PretrainedText,
            d,
            ls_max,
            k_limit,
            pad_id,
            unk_id,
            vocab_size,
            table,
            dense,
            vocab: Some(vocab),
        })
    }

    /// The explicit vocabulary map, when this backend has one.
    pub fn vocab_map(&self) -> Option<&HashMap<String, u32>> {
        self.vocab.as_ref()
    }

    /// Token list in id order for explicit-vocabulary backends.
    pub fn vocab_token_list(&self) -> Option<Vec<String>> {
        self.vocab.as_ref().map(|vocab| {
            let mut tokens = vec![String::new(); self.vocab_size];
            for (t, &i) in vocab {
                tokens[i as usize] = t.clone();
            }
            tokens
        })
    }

    fn token_to_id(&self, token: &str) -> u32 {
        match &self.vocab {
            Some(v) => *v.get(token).unwrap_or(&self.unk_id),
            None => 1 + (fnv1a64(token.as_bytes()) % (self.vocab_size as u64 - 1)) as u32,
        }
    }

    /// Whitespace-tokenize `text`, truncate at `ls_max`, pad with the pad id.
    pub fn tokenize(&self, text: &str) -> Result<TokenizedSequence> {
        let mut ids: Vec<u32> = Vec::new();
        for tok in text.split_whitespace() {
            if ids.len() == self.ls_max {
                break;
            }
            ids.push(self.token_to_id(tok));
        }
        if ids.is_empty() {
            return Err(Error::Domain("cannot tokenize empty text".into()));
        }
        let true_length = ids.len();
        ids.resize(self.ls_max, self.pad_id);
        let mut attention_mask = vec![0u8; self.ls_max];
        for m in attention_mask.iter_mut().take(true_length) {
            *m = 1;
        }
        Ok(TokenizedSequence {
            token_ids: ids,
            attention_mask,
            true_length,
        })
    }

    /// Rows of the shared embedding table for `ids`.
    pub fn token_embed(&self, ids: &[u32]) -> Result<Array2<f64>> {
        let mut rows = Array2::zeros((ids.len(), self.d));
        for (i, &id) in ids.iter().enumerate() {
            if id as usize >= self.vocab_size {
                return Err(Error::Vocabulary(format!(
                    "token id {id} outside vocabulary of size {}",
                    self.vocab_size
                )));
            }
            rows.row_mut(i).assign(&self.table.row(id as usize));
        }
        Ok(rows)
    }

    /// Pooled sequence embedding of the unmasked tokens.
    pub fn embed(&self, ids: &[u32], mask: &[u8]) -> Result<Array1<f64>> {
        Ok(self.embed_cached(ids, mask)?.0)
    }

    /// `embed` that also returns the activations needed for backprop.
    pub fn embed_cached(&self, ids: &[u32], mask: &[u8]) -> Result<(Array1<f64>, EmbedCache)> {
        if ids.len() != mask.len() {
            return Err(Error::Config("token ids and mask length mismatch".into()));
        }
        let live = mask.iter().filter(|&&m| m != 0).count();
        if live == 0 {
            return Err(Error::Domain("cannot embed a fully masked sequence".into()));
        }
        if live > self.k_limit {
            return Err(Error::Capacity(format!(
                "{live} unmasked tokens exceed the embedder limit of {}",
                self.k_limit
            )));
        }
        let rows = self.token_embed(ids)?;
        let (pooled, n_live) = nn::masked_mean_pool(&rows, mask);
        let mut layer_inputs = Vec::with_capacity(self.dense.len());
        let mut layer_outputs = Vec::with_capacity(self.dense.len());
        let mut x = pooled;
        for layer in &self.dense {
            layer_inputs.push(x.clone());
            let a = nn::tanh_forward(&layer.forward(&x));
            layer_outputs.push(a.clone());
            x = a;
        }
        let cache = EmbedCache {
            rows,
            mask: mask.to_vec(),
            n_live,
            layer_inputs,
            layer_outputs,
        };
        Ok((x, cache))
    }

    /// Backward through `embed`: accumulates dense-layer gradients (and
    /// table gradients when trainable) for the upstream gradient `d_e`.
    pub fn embed_backward(
        &self,
        ids: &[u32],
        cache: &EmbedCache,
        d_e: &Array1<f64>,
        grads: &mut EncoderGrads,
    ) {
        let mut da = d_e.clone();
        for (i, layer) in self.dense.iter().enumerate().rev() {
            let dpre = nn::tanh_backward(&cache.layer_outputs[i], &da);
            da = layer.backward(&cache.layer_inputs[i], &dpre, &mut grads.dense[i]);
        }
        if let Some(table_grad) = &mut grads.table {
            let drows =
                nn::masked_mean_pool_backward(&da, &cache.mask, cache.rows.nrows(), cache.n_live);
            for (i, &id) in ids.iter().enumerate() {
                if cache.mask[i] != 0 {
                    table_grad.row_mut(id as usize).scaled_add(1.0, &drows.row(i));
                }
            }
        }
    }
}

fn write_f32_blob<I: Iterator<Item = f64>>(path: &Path, values: I) -> Result<()> {
    let mut f = File::create(path)?;
    let mut buf = Vec::new();
    for v in values {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    f.write_all(&buf)?;
    Ok(())
}

fn read_f32_blob(path: &Path, expected: usize) -> Result<Vec<f64>> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() != expected * 4 {
        return Err(Error::Manifest(format!(
            "{}: expected {} f32 values, found {} bytes",
            path.display(),
            expected,
            bytes.len()
        )));
    }
    let mut out = Vec::with_capacity(expected);
    for chunk in bytes.chunks_exact(4) {
        out.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64);
    }
    Ok(out)
}
