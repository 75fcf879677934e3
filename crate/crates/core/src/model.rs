//! The full matching network and its on-disk format.
//!
//! Model file: one JSON header line, then named tensor records until EOF:
//! `u32 name_len | name | u32 rank | rank x u32 shape | f32 LE values`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ec_encoder::{EcEncoderConfig, EcEncoderParams};
use crate::ec_parser::Polarity;
use crate::error::{check_dim, Error, Result};
use crate::matcher::{MatchLabel, MatchPrediction, MatcherDepths, MatcherParams};
use crate::memory::{backward_levels, encode_levels, Demographics, MemoryParams, MemoryState, VisitLevels};
use crate::nn::Parameters;
use crate::tensor::{cosine, Tensor};
use crate::text_encoder::{EncoderBackend, EncoderKind, FeatureHashConfig, TokenEmbeddingMatrix};
use crate::training::loss;

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub conv_dim: usize,
    pub kernel_sizes: Vec<usize>,
    pub highway_layers: usize,
    pub highway_kernel: usize,
    pub mem_dim: usize,
    #[serde(flatten)]
    pub depths: MatcherDepths,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let ec = EcEncoderConfig::default();
        ModelConfig {
            embed_dim: ec.embed_dim,
            conv_dim: ec.conv_dim,
            kernel_sizes: ec.kernel_sizes,
            highway_layers: ec.highway_layers,
            highway_kernel: ec.highway_kernel,
            mem_dim: 32,
            depths: MatcherDepths::default(),
        }
    }
}

impl ModelConfig {
    pub fn ec_config(&self) -> EcEncoderConfig {
        EcEncoderConfig {
            embed_dim: self.embed_dim,
            conv_dim: self.conv_dim,
            kernel_sizes: self.kernel_sizes.clone(),
            highway_layers: self.highway_layers,
            highway_kernel: self.highway_kernel,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.ec_config().validate()?;
        if self.mem_dim == 0 {
            return Err(Error::Config("mem_dim must be positive".into()));
        }
        Ok(())
    }
}

/// Loss switches shared by training and evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSettings {
    pub margin: f64,
    pub use_distance_loss: bool,
}

impl Default for LossSettings {
    fn default() -> Self {
        LossSettings {
            margin: 0.3,
            use_distance_loss: true,
        }
    }
}

/// One (patient, criterion) example with everything precomputed that does not
/// depend on trainable parameters.
#[derive(Debug, Clone, Copy)]
pub struct PairInput<'a> {
    pub tokens: &'a TokenEmbeddingMatrix,
    pub visits: &'a [VisitLevels],
    pub demographics: &'a Demographics,
    pub polarity: Polarity,
    pub label: MatchLabel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairEvaluation {
    pub prediction: MatchPrediction,
    pub classification: f64,
    pub distance: f64,
    /// `cos(query_mlp(e), m~)`, absent when either vector is zero.
    pub cosine: Option<f64>,
}

impl PairEvaluation {
    pub fn loss(&self) -> f64 {
        self.classification + self.distance
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub ec: EcEncoderParams,
    pub memory: MemoryParams,
    pub matcher: MatcherParams,
}

impl ModelParams {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ec_config = config.ec_config();
        let ec = EcEncoderParams::init(&ec_config, &mut rng);
        let memory = MemoryParams::init(config.embed_dim, config.mem_dim, &mut rng);
        let matcher = MatcherParams::init(ec_config.output_dim(), config.mem_dim, config.depths, &mut rng);
        Ok(ModelParams { ec, memory, matcher })
    }

    pub fn zeros_like(&self) -> Self {
        ModelParams {
            ec: self.ec.zeros_like(),
            memory: self.memory.zeros_like(),
            matcher: self.matcher.zeros_like(),
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.ec.embed_dim()
    }

    pub fn mem_dim(&self) -> usize {
        self.memory.mem_dim()
    }

    pub fn num_scalars(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.is_finite())
    }

    pub fn encode_memory(&self, visits: &[VisitLevels]) -> Result<MemoryState> {
        Ok(encode_levels(&self.memory, visits)?.state)
    }

    pub fn encode_criterion(&self, tokens: &TokenEmbeddingMatrix) -> Result<Vec<f64>> {
        Ok(self.ec.forward(tokens)?.embedding)
    }

    pub fn predict_pair(
        &self,
        tokens: &TokenEmbeddingMatrix,
        visits: &[VisitLevels],
        demographics: &Demographics,
    ) -> Result<MatchPrediction> {
        let memory = self.encode_memory(visits)?;
        let e = self.encode_criterion(tokens)?;
        self.matcher.predict(&memory, demographics, &e)
    }

    pub fn evaluate_pair(&self, input: &PairInput<'_>, settings: &LossSettings) -> Result<PairEvaluation> {
        let prediction = self.predict_pair(input.tokens, input.visits, input.demographics)?;
        score_prediction(prediction, input.polarity, input.label, settings)
    }

    /// Adds the gradient of this pair's `L_c + L_d` to `grad` and returns the
    /// forward results.
    pub fn accumulate_pair(
        &self,
        input: &PairInput<'_>,
        settings: &LossSettings,
        grad: &mut ModelParams,
    ) -> Result<PairEvaluation> {
        let mem_fwd = encode_levels(&self.memory, input.visits)?;
        let ec_fwd = self.ec.forward(input.tokens)?;
        let m_fwd = self
            .matcher
            .forward(&mem_fwd.state, input.demographics, &ec_fwd.embedding)?;
        let pred = &m_fwd.prediction;
        let y = input.label.one_hot();
        let dprobs = loss::classification_loss_grad(&pred.probs, &y);
        let dist_grad = if settings.use_distance_loss {
            loss::distance_loss_grad(&pred.query, &pred.retrieved, input.polarity, input.label, settings.margin)
        } else {
            None
        };
        let (dq, dr) = match &dist_grad {
            Some((dq, dr)) => (Some(dq.as_slice()), Some(dr.as_slice())),
            None => (None, None),
        };
        let input_grads = self
            .matcher
            .backward(&mem_fwd.state, &m_fwd, &dprobs, dq, dr, &mut grad.matcher);
        self.ec.backward(&ec_fwd, &input_grads.de, &mut grad.ec);
        backward_levels(&self.memory, input.visits, &mem_fwd, &input_grads.dslots, &mut grad.memory);
        score_prediction(m_fwd.prediction, input.polarity, input.label, settings)
    }
}

/// Attaches loss terms and the query/memory cosine to a prediction.
pub fn score_prediction(
    prediction: MatchPrediction,
    polarity: Polarity,
    label: MatchLabel,
    settings: &LossSettings,
) -> Result<PairEvaluation> {
    let classification = loss::classification_loss(&prediction.probs, &label.one_hot())?;
    let distance = if settings.use_distance_loss {
        loss::distance_loss(&prediction.query, &prediction.retrieved, polarity, label, settings.margin)
    } else {
        0.0
    };
    let cosine = cosine(&prediction.query, &prediction.retrieved);
    Ok(PairEvaluation {
        prediction,
        classification,
        distance,
        cosine,
    })
}

impl Parameters for ModelParams {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.ec.collect(&crate::nn::join(prefix, "ec"), out);
        self.memory.collect(&crate::nn::join(prefix, "memory"), out);
        self.matcher.collect(&crate::nn::join(prefix, "matcher"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        self.ec.collect_mut(&crate::nn::join(prefix, "ec"), out);
        self.memory.collect_mut(&crate::nn::join(prefix, "memory"), out);
        self.matcher.collect_mut(&crate::nn::join(prefix, "matcher"), out);
    }
}

/// How criterion and concept text is turned into token embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EncoderSpec {
    FeatureHash(FeatureHashConfig),
    PrecomputedFile { embed_dim: usize },
}

impl EncoderSpec {
    pub fn kind(&self) -> EncoderKind {
        match self {
            EncoderSpec::FeatureHash(_) => EncoderKind::FeatureHash,
            EncoderSpec::PrecomputedFile { .. } => EncoderKind::PrecomputedFile,
        }
    }

    pub fn embed_dim(&self) -> usize {
        match self {
            EncoderSpec::FeatureHash(c) => c.embed_dim,
            EncoderSpec::PrecomputedFile { embed_dim } => *embed_dim,
        }
    }

    pub fn describe(backend: &EncoderBackend) -> Self {
        match backend {
            EncoderBackend::FeatureHash(enc) => EncoderSpec::FeatureHash(*enc.config()),
            EncoderBackend::Precomputed(enc) => EncoderSpec::PrecomputedFile {
                embed_dim: enc.embed_dim(),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelHeader {
    pub format_version: u32,
    pub dims: ModelConfig,
    pub seed: u64,
    pub encoder: EncoderSpec,
}

impl ModelHeader {
    pub fn new(dims: ModelConfig, seed: u64, encoder: EncoderSpec) -> Self {
        ModelHeader {
            format_version: MODEL_FORMAT_VERSION,
            dims,
            seed,
            encoder,
        }
    }
}

/// Serializes header and parameters. Values are stored as `f32`.
pub fn write_model<W: Write>(mut w: W, header: &ModelHeader, params: &ModelParams) -> std::io::Result<()> {
    serde_json::to_writer(&mut w, header)?;
    w.write_all(b"\n")?;
    for (name, tensor) in params.named_tensors() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(tensor.shape().len() as u32).to_le_bytes())?;
        for &d in tensor.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in tensor.data() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()
}

pub fn save_model(path: &Path, header: &ModelHeader, params: &ModelParams) -> Result<()> {
    check_dim("encoder embed_dim", header.dims.embed_dim, header.encoder.embed_dim())?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_model(BufWriter::new(file), header, params).map_err(|e| Error::io(path, e))
}

fn read_u32(bytes: &[u8], pos: &mut usize) -> Option<u32> {
    let b = bytes.get(*pos..*pos + 4)?;
    *pos += 4;
    Some(u32::from_le_bytes(b.try_into().ok()?))
}

/// Parses a model file held in memory. `path` is used for error messages.
pub fn read_model(bytes: &[u8], path: &Path) -> Result<(ModelHeader, ModelParams)> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format(path, "missing header line"))?;
    let raw: serde_json::Value =
        serde_json::from_slice(&bytes[..nl]).map_err(|e| Error::format(path, format!("header: {e}")))?;
    let version = raw
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| Error::format(path, "header lacks format_version"))?;
    if version != MODEL_FORMAT_VERSION as u64 {
        return Err(Error::FormatVersionMismatch {
            found: u32::try_from(version).unwrap_or(u32::MAX),
            supported: MODEL_FORMAT_VERSION,
        });
    }
    let header: ModelHeader =
        serde_json::from_value(raw).map_err(|e| Error::format(path, format!("header: {e}")))?;
    header.dims.validate()?;
    let mut params = ModelParams::init(&header.dims, 0)?;
    let mut seen = std::collections::HashSet::new();
    {
        let mut slots: std::collections::HashMap<String, &mut Tensor> =
            params.named_tensors_mut().into_iter().collect();
        let expected = slots.len();
        let mut pos = nl + 1;
        let truncated = || Error::format(path, "truncated tensor record");
        while pos < bytes.len() {
            let name_len = read_u32(bytes, &mut pos).ok_or_else(truncated)? as usize;
            let name = bytes.get(pos..pos + name_len).ok_or_else(truncated)?;
            let name = std::str::from_utf8(name)
                .map_err(|_| Error::format(path, "tensor name is not UTF-8"))?
                .to_string();
            pos += name_len;
            let rank = read_u32(bytes, &mut pos).ok_or_else(truncated)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u32(bytes, &mut pos).ok_or_else(truncated)? as usize);
            }
            let count: usize = shape.iter().product();
            let raw = bytes.get(pos..pos + 4 * count).ok_or_else(truncated)?;
            pos += 4 * count;
            if !seen.insert(name.clone()) {
                return Err(Error::format(path, format!("duplicate tensor {name}")));
            }
            let target = slots
                .get_mut(&name)
                .ok_or_else(|| Error::format(path, format!("unexpected tensor {name}")))?;
            if target.shape() != shape.as_slice() {
                return Err(Error::format(
                    path,
                    format!("tensor {name} has shape {shape:?}, expected {:?}", target.shape()),
                ));
            }
            for (dst, chunk) in target.data_mut().iter_mut().zip(raw.chunks_exact(4)) {
                *dst = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk")) as f64;
            }
        }
        if seen.len() != expected {
            let missing: Vec<_> = slots.keys().filter(|k| !seen.contains(*k)).cloned().collect();
            return Err(Error::format(path, format!("missing tensors {missing:?}")));
        }
    }
    if !params.is_finite() {
        return Err(Error::format(path, "non-finite parameter values"));
    }
    Ok((header, params))
}

pub fn load_model(path: &Path) -> Result<(ModelHeader, ModelParams)> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|f| BufReader::new(f).read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    read_model(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> (ModelHeader, ModelParams) {
        let dims = ModelConfig {
            embed_dim: 4,
            conv_dim: 2,
            mem_dim: 3,
            ..ModelConfig::default()
        };
        let params = ModelParams::init(&dims, 11).unwrap();
        let enc = EncoderSpec::FeatureHash(FeatureHashConfig {
            embed_dim: 4,
            ..FeatureHashConfig::default()
        });
        (ModelHeader::new(dims, 11, enc), params)
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let (header, params) = tiny();
        let mut first = Vec::new();
        write_model(&mut first, &header, &params).unwrap();
        let (h2, p2) = read_model(&first, Path::new("mem")).unwrap();
        assert_eq!(h2, header);
        let mut second = Vec::new();
        write_model(&mut second, &h2, &p2).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn newer_version_fails_closed() {
        let (mut header, params) = tiny();
        header.format_version = 2;
        let mut bytes = Vec::new();
        write_model(&mut bytes, &header, &params).unwrap();
        assert!(matches!(
            read_model(&bytes, Path::new("mem")),
            Err(Error::FormatVersionMismatch { found: 2, .. })
        ));
    }

    #[test]
    fn truncated_file_is_rejected() {
        let (header, params) = tiny();
        let mut bytes = Vec::new();
        write_model(&mut bytes, &header, &params).unwrap();
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(read_model(&bytes, Path::new("mem")), Err(Error::Format { .. })));
    }

    #[test]
    fn tensor_names_are_unique() {
        let (_, params) = tiny();
        let names: Vec<_> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
        let set: std::collections::HashSet<_> = names.iter().collect();
        assert_eq!(set.len(), names.len());
    }
}
