//! Criterion encoder: parallel 1-D convolutions of several widths,
//! convolutional highway layers, and max-over-time pooling.
//!
//! Feature maps are `[steps, channels]` row-major. All convolutions use stride
//! 1 and "same" padding, so the time length never changes; there is no
//! nonlinearity between the multi-kernel convolution and the highway stack.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::nn::{join, ConvBank, Parameters};
use crate::tensor::{sigmoid, Tensor};
use crate::text_encoder::TokenEmbeddingMatrix;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EcEncoderConfig {
    pub embed_dim: usize,
    pub conv_dim: usize,
    pub kernel_sizes: Vec<usize>,
    pub highway_layers: usize,
    pub highway_kernel: usize,
}

impl Default for EcEncoderConfig {
    fn default() -> Self {
        EcEncoderConfig {
            embed_dim: 64,
            conv_dim: 16,
            kernel_sizes: vec![1, 3, 5, 7],
            highway_layers: 3,
            highway_kernel: 3,
        }
    }
}

impl EcEncoderConfig {
    pub fn output_dim(&self) -> usize {
        self.kernel_sizes.len() * self.conv_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.conv_dim == 0 {
            return Err(Error::Config("embed_dim and conv_dim must be positive".into()));
        }
        if self.kernel_sizes.is_empty() || self.kernel_sizes.contains(&0) {
            return Err(Error::Config("kernel sizes must be positive and non-empty".into()));
        }
        if self.highway_layers == 0 || self.highway_kernel == 0 {
            return Err(Error::Config("need at least one highway layer with a positive kernel".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HighwayLayer {
    pub gate: ConvBank,
    pub transform: ConvBank,
}

impl HighwayLayer {
    pub fn zeros_like(&self) -> Self {
        HighwayLayer {
            gate: self.gate.zeros_like(),
            transform: self.transform.zeros_like(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EcEncoderParams {
    pub convs: Vec<ConvBank>,
    pub highway: Vec<HighwayLayer>,
}

/// A `[steps, channels]` activation map.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub steps: usize,
    pub channels: usize,
    pub values: Vec<f64>,
}

impl FeatureMap {
    pub fn at(&self, t: usize, c: usize) -> f64 {
        self.values[t * self.channels + c]
    }
}

/// Pooled criterion embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct EcEmbedding {
    pub vector: Vec<f64>,
}

struct HighwayCache {
    input: Vec<f64>,
    u: Vec<f64>,
    transformed: Vec<f64>,
}

/// Forward result with everything the backward pass needs.
pub struct EcForward {
    pub embedding: Vec<f64>,
    steps: usize,
    tokens: Vec<f64>,
    layers: Vec<HighwayCache>,
    argmax: Vec<usize>,
}

/// Initial bias of the highway gates.
pub const HIGHWAY_GATE_BIAS: f64 = -1.0;

impl EcEncoderParams {
    pub fn init<R: Rng>(config: &EcEncoderConfig, rng: &mut R) -> Self {
        let convs = config
            .kernel_sizes
            .iter()
            .map(|&k| ConvBank::init(config.embed_dim, config.conv_dim, k, rng))
            .collect();
        let channels = config.output_dim();
        let highway = (0..config.highway_layers)
            .map(|_| {
                let mut gate = ConvBank::init(channels, channels, config.highway_kernel, rng);
                // start close to the identity (carry) path
                gate.bias.data_mut().iter_mut().for_each(|b| *b = HIGHWAY_GATE_BIAS);
                HighwayLayer {
                    gate,
                    transform: ConvBank::init(channels, channels, config.highway_kernel, rng),
                }
            })
            .collect();
        EcEncoderParams { convs, highway }
    }

    pub fn zeros_like(&self) -> Self {
        EcEncoderParams {
            convs: self.convs.iter().map(ConvBank::zeros_like).collect(),
            highway: self.highway.iter().map(HighwayLayer::zeros_like).collect(),
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.convs[0].in_channels()
    }

    pub fn output_dim(&self) -> usize {
        self.convs.iter().map(ConvBank::out_channels).sum()
    }

    /// Channel-wise concatenation of every convolution bank's output.
    pub fn multi_kernel_conv(&self, tokens: &TokenEmbeddingMatrix) -> Result<FeatureMap> {
        check_dim("token embedding dim", self.embed_dim(), tokens.dim())?;
        if tokens.num_tokens() == 0 {
            return Err(Error::EmptySentence);
        }
        Ok(self.conv_stack(tokens.values(), tokens.num_tokens()))
    }

    fn conv_stack(&self, input: &[f64], steps: usize) -> FeatureMap {
        let channels = self.output_dim();
        let mut values = vec![0.0; steps * channels];
        let mut offset = 0;
        for bank in &self.convs {
            let out = bank.forward(input, steps);
            let width = bank.out_channels();
            for t in 0..steps {
                values[t * channels + offset..t * channels + offset + width]
                    .copy_from_slice(&out[t * width..(t + 1) * width]);
            }
            offset += width;
        }
        FeatureMap {
            steps,
            channels,
            values,
        }
    }

    pub fn forward(&self, tokens: &TokenEmbeddingMatrix) -> Result<EcForward> {
        let x = self.multi_kernel_conv(tokens)?;
        let steps = x.steps;
        let mut current = x.values;
        let mut layers = Vec::with_capacity(self.highway.len());
        for layer in &self.highway {
            let (v, cache) = highway_forward(layer, &current, steps);
            layers.push(HighwayCache {
                input: std::mem::replace(&mut current, v),
                ..cache
            });
        }
        let channels = self.output_dim();
        let mut embedding = vec![f64::NEG_INFINITY; channels];
        let mut argmax = vec![0; channels];
        for t in 0..steps {
            for c in 0..channels {
                let v = current[t * channels + c];
                if v > embedding[c] {
                    embedding[c] = v;
                    argmax[c] = t;
                }
            }
        }
        Ok(EcForward {
            embedding,
            steps,
            tokens: tokens.values().to_vec(),
            layers,
            argmax,
        })
    }

    pub fn encode_criterion(&self, tokens: &TokenEmbeddingMatrix) -> Result<EcEmbedding> {
        Ok(EcEmbedding {
            vector: self.forward(tokens)?.embedding,
        })
    }

    /// Accumulates parameter gradients for `dL/de`. Token embeddings are
    /// frozen, so no input gradient is produced.
    pub fn backward(&self, fwd: &EcForward, de: &[f64], grad: &mut EcEncoderParams) {
        let channels = self.output_dim();
        let steps = fwd.steps;
        let mut dv = vec![0.0; steps * channels];
        for (c, (&t, g)) in fwd.argmax.iter().zip(de).enumerate() {
            dv[t * channels + c] += g;
        }
        for (i, layer) in self.highway.iter().enumerate().rev() {
            dv = highway_backward(layer, &fwd.layers[i], steps, &dv, &mut grad.highway[i]);
        }
        let mut offset = 0;
        for (bank, gbank) in self.convs.iter().zip(grad.convs.iter_mut()) {
            let width = bank.out_channels();
            let mut dout = vec![0.0; steps * width];
            for t in 0..steps {
                dout[t * width..(t + 1) * width]
                    .copy_from_slice(&dv[t * channels + offset..t * channels + offset + width]);
            }
            bank.backward(&fwd.tokens, steps, &dout, gbank, None);
            offset += width;
        }
    }
}

fn highway_forward(layer: &HighwayLayer, x: &[f64], steps: usize) -> (Vec<f64>, HighwayCache) {
    let gate = layer.gate.forward(x, steps);
    let transformed = layer.transform.forward(x, steps);
    let u: Vec<f64> = gate.into_iter().map(sigmoid).collect();
    let v = u
        .iter()
        .zip(&transformed)
        .zip(x)
        .map(|((u, h), x)| u * h + (1.0 - u) * x)
        .collect();
    (
        v,
        HighwayCache {
            input: Vec::new(),
            u,
            transformed,
        },
    )
}

fn highway_backward(
    layer: &HighwayLayer,
    cache: &HighwayCache,
    steps: usize,
    dv: &[f64],
    grad: &mut HighwayLayer,
) -> Vec<f64> {
    let n = dv.len();
    let mut dx = vec![0.0; n];
    let mut dgate = vec![0.0; n];
    let mut dtrans = vec![0.0; n];
    for i in 0..n {
        let u = cache.u[i];
        let x = cache.input[i];
        let h = cache.transformed[i];
        dx[i] = dv[i] * (1.0 - u);
        dtrans[i] = dv[i] * u;
        dgate[i] = dv[i] * (h - x) * u * (1.0 - u);
    }
    layer
        .gate
        .backward(&cache.input, steps, &dgate, &mut grad.gate, Some(&mut dx));
    layer
        .transform
        .backward(&cache.input, steps, &dtrans, &mut grad.transform, Some(&mut dx));
    dx
}

/// One highway layer applied to a feature map:
/// `u = sigmoid(gate(x))`, `v = u * transform(x) + (1 - u) * x`.
pub fn highway_layer(layer: &HighwayLayer, x: &FeatureMap) -> Result<FeatureMap> {
    check_dim("highway input channels", layer.gate.in_channels(), x.channels)?;
    check_dim("highway gate/transform shape", layer.gate.out_channels(), layer.transform.out_channels())?;
    check_dim("highway output channels", x.channels, layer.gate.out_channels())?;
    let (values, _) = highway_forward(layer, &x.values, x.steps);
    Ok(FeatureMap {
        steps: x.steps,
        channels: x.channels,
        values,
    })
}

impl Parameters for EcEncoderParams {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        for (i, c) in self.convs.iter().enumerate() {
            c.collect(&join(prefix, &format!("conv.{i}")), out);
        }
        for (i, h) in self.highway.iter().enumerate() {
            h.gate.collect(&join(prefix, &format!("highway.{i}.gate")), out);
            h.transform.collect(&join(prefix, &format!("highway.{i}.transform")), out);
        }
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        for (i, c) in self.convs.iter_mut().enumerate() {
            c.collect_mut(&join(prefix, &format!("conv.{i}")), out);
        }
        for (i, h) in self.highway.iter_mut().enumerate() {
            h.gate.collect_mut(&join(prefix, &format!("highway.{i}.gate")), out);
            h.transform
                .collect_mut(&join(prefix, &format!("highway.{i}.transform")), out);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn matrix(rows: &[&[f64]]) -> TokenEmbeddingMatrix {
        let dim = rows[0].len();
        let tokens = (0..rows.len()).map(|i| format!("t{i}")).collect();
        TokenEmbeddingMatrix::new(tokens, dim, rows.concat()).unwrap()
    }

    fn small_config() -> EcEncoderConfig {
        EcEncoderConfig {
            embed_dim: 3,
            conv_dim: 2,
            kernel_sizes: vec![1, 3],
            highway_layers: 2,
            highway_kernel: 3,
        }
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = EcEncoderParams::init(&small_config(), &mut rng);
        p.convs.iter_mut().for_each(|c| c.bias.fill(0.0));
        let x = p.multi_kernel_conv(&matrix(&[&[0.0; 3], &[0.0; 3]])).unwrap();
        assert!(x.values.iter().all(|v| *v == 0.0));
        assert_eq!((x.steps, x.channels), (2, 4));
    }

    #[test]
    fn identity_kernel_passes_value_through() {
        let mut bank = ConvBank::zeros(2, 1, 1);
        bank.weight.data_mut()[0] = 1.0;
        let p = EcEncoderParams {
            convs: vec![bank],
            highway: vec![],
        };
        let x = p.multi_kernel_conv(&matrix(&[&[0.7, -3.0]])).unwrap();
        assert_eq!(x.values, vec![0.7]);
    }

    #[test]
    fn dim_mismatch_is_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = EcEncoderParams::init(&small_config(), &mut rng);
        let err = p.multi_kernel_conv(&matrix(&[&[1.0, 2.0]])).unwrap_err();
        assert!(matches!(err, Error::DimMismatch { expected: 3, actual: 2, .. }));
    }

    #[test]
    fn output_length_is_independent_of_sentence_length() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = EcEncoderParams::init(&small_config(), &mut rng);
        for n in [1, 2, 9] {
            let rows: Vec<Vec<f64>> = (0..n).map(|i| vec![i as f64, 1.0, -0.5]).collect();
            let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
            assert_eq!(p.encode_criterion(&matrix(&refs)).unwrap().vector.len(), 4);
        }
    }

    #[test]
    fn pooled_entries_are_attained() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = EcEncoderParams::init(&small_config(), &mut rng);
        let m = matrix(&[&[0.1, 0.2, 0.3], &[-1.0, 0.5, 2.0], &[0.0, 0.0, 1.0]]);
        let fwd = p.forward(&m).unwrap();
        // recompute v through the public per-layer op
        let mut v = p.multi_kernel_conv(&m).unwrap();
        for layer in &p.highway {
            v = highway_layer(layer, &v).unwrap();
        }
        for c in 0..v.channels {
            let col: Vec<f64> = (0..v.steps).map(|t| v.at(t, c)).collect();
            assert!(col.contains(&fwd.embedding[c]));
            assert!(col.iter().all(|x| *x <= fwd.embedding[c]));
        }
    }
}
