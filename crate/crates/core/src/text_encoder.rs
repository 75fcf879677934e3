//! Contextual token encoders and max-pooled concept embeddings.
//!
//! Two backends are provided:
//!
//! * [`FeatureHashEncoder`]: each token is hashed into `hashes_per_token`
//!   signed buckets of an `embed_dim` vector, then every row is mixed with its
//!   neighbours inside a fixed context window:
//!   `row_i = base_i + context_weight * sum(base_j for 0 < |i - j| <= window / 2)`.
//!   The hash is FNV-1a over `(seed, probe index, token bytes)` followed by a
//!   SplitMix64 finalizer; the bucket is `h % dim` and the sign is the top bit.
//!   Output is a pure function of `(seed, tokens)`.
//! * [`PrecomputedEncoder`]: matrices produced offline and stored in the
//!   binary embedding file, keyed by the tokenized sentence joined with single
//!   spaces (see [`sentence_key`]).
//!
//! Token embeddings are treated as frozen inputs; no gradient flows into them.

use std::collections::HashMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Lowercases and splits on non-alphanumeric characters. A decimal number
/// such as `2.5` stays a single token.
pub fn tokenize(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut tokens = Vec::new();
    let mut cur = String::new();
    for (i, &c) in chars.iter().enumerate() {
        if c.is_alphanumeric() {
            cur.extend(c.to_lowercase());
            continue;
        }
        let decimal_point = c == '.'
            && !cur.is_empty()
            && cur.chars().all(|d| d.is_ascii_digit())
            && chars.get(i + 1).is_some_and(|n| n.is_ascii_digit());
        if decimal_point {
            cur.push('.');
            continue;
        }
        if !cur.is_empty() {
            tokens.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        tokens.push(cur);
    }
    tokens
}

/// Key under which a sentence is stored in a precomputed embedding file.
pub fn sentence_key(tokens: &[String]) -> String {
    tokens.join(" ")
}

/// One embedding row per token.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenEmbeddingMatrix {
    tokens: Vec<String>,
    dim: usize,
    values: Vec<f64>,
}

impl TokenEmbeddingMatrix {
    pub fn new(tokens: Vec<String>, dim: usize, values: Vec<f64>) -> Result<Self> {
        check_dim("token embedding values", tokens.len() * dim, values.len())?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite token embedding".into()));
        }
        Ok(TokenEmbeddingMatrix { tokens, dim, values })
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn num_tokens(&self) -> usize {
        self.tokens.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Row-major `[num_tokens, dim]` values.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    /// Elementwise maximum over rows.
    pub fn max_pool(&self) -> Vec<f64> {
        let mut out = vec![f64::NEG_INFINITY; self.dim];
        for i in 0..self.num_tokens() {
            for (o, v) in out.iter_mut().zip(self.row(i)) {
                *o = o.max(*v);
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    FeatureHash,
    PrecomputedFile,
}

impl EncoderKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EncoderKind::FeatureHash => "feature_hash",
            EncoderKind::PrecomputedFile => "precomputed_file",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureHashConfig {
    pub embed_dim: usize,
    pub window: usize,
    pub seed: u64,
    pub hashes_per_token: usize,
    pub context_weight: f64,
}

impl Default for FeatureHashConfig {
    fn default() -> Self {
        FeatureHashConfig {
            embed_dim: 64,
            window: 3,
            seed: 0,
            hashes_per_token: 2,
            context_weight: 0.5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FeatureHashEncoder {
    config: FeatureHashConfig,
}

fn fnv1a(bytes: impl IntoIterator<Item = u8>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl FeatureHashEncoder {
    pub fn new(config: FeatureHashConfig) -> Result<Self> {
        if config.embed_dim == 0 {
            return Err(Error::Config("embed_dim must be positive".into()));
        }
        if config.window == 0 || config.window % 2 == 0 {
            return Err(Error::Config("context window must be a positive odd number".into()));
        }
        if config.hashes_per_token == 0 {
            return Err(Error::Config("hashes_per_token must be positive".into()));
        }
        Ok(FeatureHashEncoder { config })
    }

    pub fn config(&self) -> &FeatureHashConfig {
        &self.config
    }

    /// The context-free signed hash vector of a single token.
    pub fn base_vector(&self, token: &str) -> Vec<f64> {
        let dim = self.config.embed_dim;
        let mut v = vec![0.0; dim];
        for probe in 0..self.config.hashes_per_token as u64 {
            let bytes = self
                .config
                .seed
                .to_le_bytes()
                .into_iter()
                .chain(probe.to_le_bytes())
                .chain(token.bytes());
            let h = splitmix64(fnv1a(bytes));
            let bucket = (h % dim as u64) as usize;
            let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
            v[bucket] += sign;
        }
        v
    }

    fn encode(&self, tokens: &[String]) -> Vec<f64> {
        let dim = self.config.embed_dim;
        let base: Vec<Vec<f64>> = tokens.iter().map(|t| self.base_vector(t)).collect();
        let radius = self.config.window / 2;
        let mut out = Vec::with_capacity(tokens.len() * dim);
        for i in 0..tokens.len() {
            let mut row = base[i].clone();
            let lo = i.saturating_sub(radius);
            let hi = (i + radius).min(tokens.len() - 1);
            for (j, neighbour) in base.iter().enumerate().take(hi + 1).skip(lo) {
                if j == i {
                    continue;
                }
                for (r, b) in row.iter_mut().zip(neighbour) {
                    *r += self.config.context_weight * b;
                }
            }
            out.extend(row);
        }
        out
    }
}

/// Embeddings loaded from a precomputed file.
#[derive(Debug, Clone)]
pub struct PrecomputedEncoder {
    dim: usize,
    entries: HashMap<String, Vec<f64>>,
}

impl PrecomputedEncoder {
    pub fn load(path: &Path, expected_dim: usize) -> Result<Self> {
        let (dim, records) = read_embedding_file(path)?;
        check_dim("precomputed embedding file", expected_dim, dim)?;
        let entries = records.into_iter().map(|(k, _, v)| (k, v)).collect();
        Ok(PrecomputedEncoder { dim, entries })
    }

    pub fn from_entries(dim: usize, entries: HashMap<String, Vec<f64>>) -> Result<Self> {
        for v in entries.values() {
            if v.len() % dim != 0 {
                return Err(Error::DimMismatch {
                    context: "precomputed matrix",
                    expected: dim,
                    actual: v.len(),
                });
            }
        }
        Ok(PrecomputedEncoder { dim, entries })
    }

    pub fn embed_dim(&self) -> usize {
        self.dim
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// The token encoder used by both branches of the network.
#[derive(Debug, Clone)]
pub enum EncoderBackend {
    FeatureHash(FeatureHashEncoder),
    Precomputed(PrecomputedEncoder),
}

impl EncoderBackend {
    pub fn kind(&self) -> EncoderKind {
        match self {
            EncoderBackend::FeatureHash(_) => EncoderKind::FeatureHash,
            EncoderBackend::Precomputed(_) => EncoderKind::PrecomputedFile,
        }
    }

    pub fn embed_dim(&self) -> usize {
        match self {
            EncoderBackend::FeatureHash(e) => e.config.embed_dim,
            EncoderBackend::Precomputed(e) => e.dim,
        }
    }

    pub fn encode_tokens(&self, tokens: &[String]) -> Result<TokenEmbeddingMatrix> {
        if tokens.is_empty() {
            return Err(Error::EmptySentence);
        }
        match self {
            EncoderBackend::FeatureHash(e) => {
                TokenEmbeddingMatrix::new(tokens.to_vec(), e.config.embed_dim, e.encode(tokens))
            }
            EncoderBackend::Precomputed(e) => {
                let key = sentence_key(tokens);
                let values = e.entries.get(&key).ok_or_else(|| Error::MissingKey(key.clone()))?;
                let rows = values.len() / e.dim;
                // The exporter aligns rows to whitespace words, which may not
                // coincide with this tokenizer's split.
                let row_tokens = if rows == tokens.len() {
                    tokens.to_vec()
                } else {
                    (0..rows).map(|i| format!("#{i}")).collect()
                };
                TokenEmbeddingMatrix::new(row_tokens, e.dim, values.clone())
            }
        }
    }

    pub fn encode_text(&self, text: &str) -> Result<TokenEmbeddingMatrix> {
        self.encode_tokens(&tokenize(text))
    }

    /// Elementwise max over the token rows of `description`.
    pub fn concept_embedding(&self, description: &str) -> Result<Vec<f64>> {
        Ok(self.encode_text(description)?.max_pool())
    }

    /// Fails on the first sentence the backend cannot encode.
    pub fn verify_sentences<'a>(&self, sentences: impl IntoIterator<Item = &'a str>) -> Result<()> {
        if let EncoderBackend::Precomputed(e) = self {
            for s in sentences {
                let key = sentence_key(&tokenize(s));
                if !e.contains(&key) {
                    return Err(Error::MissingKey(key));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct EmbeddingHeader {
    dim: usize,
    count: usize,
}

/// Writes the binary embedding file: a JSON header line, then per record
/// `(u32 key length, key bytes, u32 token count, f32 values)`, little-endian.
pub fn write_embedding_file(path: &Path, dim: usize, records: &[(String, Vec<f64>)]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    let header = serde_json::to_string(&EmbeddingHeader {
        dim,
        count: records.len(),
    })
    .expect("header serializes");
    w.write_all(header.as_bytes()).map_err(io)?;
    w.write_all(b"\n").map_err(io)?;
    for (key, values) in records {
        if dim == 0 || values.len() % dim != 0 {
            return Err(Error::DimMismatch {
                context: "embedding record",
                expected: dim,
                actual: values.len(),
            });
        }
        let rows = values.len() / dim;
        w.write_all(&(key.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(key.as_bytes()).map_err(io)?;
        w.write_all(&(rows as u32).to_le_bytes()).map_err(io)?;
        for v in values {
            w.write_all(&(*v as f32).to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

/// Reads every record of a binary embedding file, returning
/// `(dim, [(key, token count, values)])` in file order.
#[allow(clippy::type_complexity)]
pub fn read_embedding_file(path: &Path) -> Result<(usize, Vec<(String, usize, Vec<f64>)>)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut header = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        match r.read(&mut byte) {
            Ok(0) => return Err(Error::format(path, "missing header line")),
            Ok(_) if byte[0] == b'\n' => break,
            Ok(_) => header.push(byte[0]),
            Err(e) => return Err(Error::io(path, e)),
        }
    }
    let header: EmbeddingHeader = serde_json::from_slice(&header)
        .map_err(|e| Error::format(path, format!("bad header: {e}")))?;
    if header.dim == 0 {
        return Err(Error::format(path, "dim must be positive"));
    }
    let mut records = Vec::with_capacity(header.count);
    let truncated = |_| Error::format(path, "truncated record");
    for _ in 0..header.count {
        let mut u = [0u8; 4];
        r.read_exact(&mut u).map_err(truncated)?;
        let mut key = vec![0u8; u32::from_le_bytes(u) as usize];
        r.read_exact(&mut key).map_err(truncated)?;
        let key = String::from_utf8(key).map_err(|_| Error::format(path, "key is not UTF-8"))?;
        r.read_exact(&mut u).map_err(truncated)?;
        let rows = u32::from_le_bytes(u) as usize;
        let mut raw = vec![0u8; rows * header.dim * 4];
        r.read_exact(&mut raw).map_err(truncated)?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        records.push((key, rows, values));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(|e| Error::io(path, e))? != 0 {
        return Err(Error::format(path, "trailing bytes after declared records"));
    }
    Ok((header.dim, records))
}
