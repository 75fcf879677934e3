//! Attentional memory read, demographics embedding and the 3-class head.
//!
//! ```text
//! q      = query_mlp(e)
//! a      = softmax_s(m_s . q)
//! m~     = sum_s a_s m_s
//! m_d    = demo_mlp([age / 120, one-hot gender])
//! logits = head(m~ ++ fuse_mlp(m_d ++ e))
//! ```

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::memory::{Demographics, Gender, MemoryState, NUM_SLOTS};
use crate::nn::{join, Linear, Mlp, MlpCache, Parameters};
use crate::tensor::{dot, softmax, softmax_backward, Tensor};

pub const NUM_CLASSES: usize = 3;
pub const AGE_SCALE: f64 = 120.0;
pub const DEMO_FEATURES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchLabel {
    Match,
    Mismatch,
    Unknown,
}

impl MatchLabel {
    pub const ALL: [MatchLabel; NUM_CLASSES] = [MatchLabel::Match, MatchLabel::Mismatch, MatchLabel::Unknown];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<MatchLabel> {
        Self::ALL.get(i).copied()
    }

    pub fn one_hot(self) -> [f64; NUM_CLASSES] {
        let mut y = [0.0; NUM_CLASSES];
        y[self.index()] = 1.0;
        y
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MatchLabel::Match => "match",
            MatchLabel::Mismatch => "mismatch",
            MatchLabel::Unknown => "unknown",
        }
    }
}

impl fmt::Display for MatchLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MatchLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "match" => Ok(MatchLabel::Match),
            "mismatch" => Ok(MatchLabel::Mismatch),
            "unknown" => Ok(MatchLabel::Unknown),
            other => Err(Error::InvalidInput(format!("unknown label {other:?}"))),
        }
    }
}

/// `[age / 120, male, female, other]`.
pub fn demographic_features(demo: &Demographics) -> [f64; DEMO_FEATURES] {
    let mut x = [demo.age / AGE_SCALE, 0.0, 0.0, 0.0];
    let slot = match demo.gender {
        Gender::Male => 1,
        Gender::Female => 2,
        Gender::Other => 3,
    };
    x[slot] = 1.0;
    x
}

/// Number of tanh hidden layers (each `mem_dim` wide) in the matcher MLPs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatcherDepths {
    pub query_hidden: usize,
    pub demo_hidden: usize,
    pub fuse_hidden: usize,
}

impl Default for MatcherDepths {
    fn default() -> Self {
        MatcherDepths {
            query_hidden: 1,
            demo_hidden: 0,
            fuse_hidden: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatcherParams {
    pub query: Mlp,
    pub demo: Mlp,
    pub fuse: Mlp,
    pub head: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchPrediction {
    pub probs: Vec<f64>,
    pub attention: Vec<f64>,
    pub retrieved: Vec<f64>,
    /// The projected criterion embedding `query_mlp(e)`.
    pub query: Vec<f64>,
}

impl MatchPrediction {
    pub fn label(&self) -> MatchLabel {
        MatchLabel::from_index(crate::tensor::argmax(&self.probs)).expect("three classes")
    }
}

pub struct MatcherForward {
    pub prediction: MatchPrediction,
    query_cache: MlpCache,
    demo_cache: MlpCache,
    fuse_cache: MlpCache,
    head_input: Vec<f64>,
}

/// Gradients flowing out of the matcher into its inputs.
pub struct MatcherInputGrads {
    pub de: Vec<f64>,
    pub dslots: Vec<Vec<f64>>,
}

impl MatcherParams {
    pub fn init<R: Rng>(ec_dim: usize, mem_dim: usize, depths: MatcherDepths, rng: &mut R) -> Self {
        MatcherParams {
            query: Mlp::init(ec_dim, &vec![mem_dim; depths.query_hidden], mem_dim, rng),
            demo: Mlp::init(DEMO_FEATURES, &vec![mem_dim; depths.demo_hidden], mem_dim, rng),
            fuse: Mlp::init(mem_dim + ec_dim, &vec![mem_dim; depths.fuse_hidden], mem_dim, rng),
            head: Linear::init(2 * mem_dim, NUM_CLASSES, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        MatcherParams {
            query: self.query.zeros_like(),
            demo: self.demo.zeros_like(),
            fuse: self.fuse.zeros_like(),
            head: Linear::zeros(self.head.input_dim(), self.head.output_dim()),
        }
    }

    pub fn ec_dim(&self) -> usize {
        self.query.input_dim()
    }

    pub fn mem_dim(&self) -> usize {
        self.query.output_dim()
    }

    pub fn validate(&self) -> Result<()> {
        let mem = self.mem_dim();
        check_dim("demo_mlp input", DEMO_FEATURES, self.demo.input_dim())?;
        check_dim("demo_mlp output", mem, self.demo.output_dim())?;
        check_dim("fuse_mlp input", mem + self.ec_dim(), self.fuse.input_dim())?;
        check_dim("fuse_mlp output", mem, self.fuse.output_dim())?;
        check_dim("head input", 2 * mem, self.head.input_dim())?;
        check_dim("head output", NUM_CLASSES, self.head.output_dim())
    }

    fn check_inputs(&self, memory: &MemoryState, e: &[f64]) -> Result<()> {
        check_dim("criterion embedding", self.ec_dim(), e.len())?;
        check_dim("memory slot count", NUM_SLOTS, memory.slots.len())?;
        for s in &memory.slots {
            check_dim("memory slot", self.mem_dim(), s.len())?;
        }
        Ok(())
    }

    pub fn embed_demographics(&self, demo: &Demographics) -> Vec<f64> {
        self.demo.forward(&demographic_features(demo))
    }

    pub fn forward(&self, memory: &MemoryState, demo: &Demographics, e: &[f64]) -> Result<MatcherForward> {
        self.check_inputs(memory, e)?;
        let (query, query_cache) = self.query.forward_cached(e);
        let (attention, retrieved) = read_memory(memory, &query);
        let (m_d, demo_cache) = self.demo.forward_cached(&demographic_features(demo));
        let fuse_in: Vec<f64> = m_d.iter().chain(e).copied().collect();
        let (fused, fuse_cache) = self.fuse.forward_cached(&fuse_in);
        let head_input: Vec<f64> = retrieved.iter().chain(&fused).copied().collect();
        let probs = softmax(&self.head.forward(&head_input));
        Ok(MatcherForward {
            prediction: MatchPrediction {
                probs,
                attention,
                retrieved,
                query,
            },
            query_cache,
            demo_cache,
            fuse_cache,
            head_input,
        })
    }

    pub fn predict(&self, memory: &MemoryState, demo: &Demographics, e: &[f64]) -> Result<MatchPrediction> {
        Ok(self.forward(memory, demo, e)?.prediction)
    }

    /// Backpropagates `dL/dprobs` plus optional direct gradients on the query
    /// and the retrieved memory (from the distance loss).
    pub fn backward(
        &self,
        memory: &MemoryState,
        fwd: &MatcherForward,
        dprobs: &[f64],
        dquery_extra: Option<&[f64]>,
        dretrieved_extra: Option<&[f64]>,
        grad: &mut MatcherParams,
    ) -> MatcherInputGrads {
        let mem = self.mem_dim();
        let pred = &fwd.prediction;
        let dlogits = softmax_backward(&pred.probs, dprobs);
        let dz = self.head.backward(&fwd.head_input, &dlogits, &mut grad.head);
        let mut dretrieved = dz[..mem].to_vec();
        if let Some(extra) = dretrieved_extra {
            dretrieved.iter_mut().zip(extra).for_each(|(a, b)| *a += b);
        }
        let dfuse_in = self.fuse.backward(&fwd.fuse_cache, &dz[mem..], &mut grad.fuse);
        self.demo.backward(&fwd.demo_cache, &dfuse_in[..mem], &mut grad.demo);
        let mut de = dfuse_in[mem..].to_vec();

        // m~ = sum a_s m_s, a = softmax(m_s . q)
        let mut dslots: Vec<Vec<f64>> = pred
            .attention
            .iter()
            .map(|a| dretrieved.iter().map(|d| a * d).collect())
            .collect();
        let dattention: Vec<f64> = memory.slots.iter().map(|m| dot(m, &dretrieved)).collect();
        let dlogit_att = softmax_backward(&pred.attention, &dattention);
        let mut dquery = vec![0.0; mem];
        if let Some(extra) = dquery_extra {
            dquery.copy_from_slice(extra);
        }
        for (s, dl) in dlogit_att.iter().enumerate() {
            for j in 0..mem {
                dslots[s][j] += dl * pred.query[j];
                dquery[j] += dl * memory.slots[s][j];
            }
        }
        let de_query = self.query.backward(&fwd.query_cache, &dquery, &mut grad.query);
        de.iter_mut().zip(&de_query).for_each(|(a, b)| *a += b);
        MatcherInputGrads { de, dslots }
    }
}

fn read_memory(memory: &MemoryState, query: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let logits: Vec<f64> = memory.slots.iter().map(|m| dot(m, query)).collect();
    let weights = softmax(&logits);
    let mut retrieved = vec![0.0; query.len()];
    for (w, slot) in weights.iter().zip(&memory.slots) {
        retrieved.iter_mut().zip(slot).for_each(|(r, m)| *r += w * m);
    }
    (weights, retrieved)
}

/// Attention weights over the twelve slots and the retrieved memory.
pub fn attend(params: &MatcherParams, memory: &MemoryState, e: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    params.check_inputs(memory, e)?;
    Ok(read_memory(memory, &params.query.forward(e)))
}

impl Parameters for MatcherParams {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.query.collect(&join(prefix, "query"), out);
        self.demo.collect(&join(prefix, "demo"), out);
        self.fuse.collect(&join(prefix, "fuse"), out);
        self.head.collect(&join(prefix, "head"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        self.query.collect_mut(&join(prefix, "query"), out);
        self.demo.collect_mut(&join(prefix, "demo"), out);
        self.fuse.collect_mut(&join(prefix, "fuse"), out);
        self.head.collect_mut(&join(prefix, "head"), out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(ec: usize, mem: usize) -> MatcherParams {
        MatcherParams::init(ec, mem, MatcherDepths::default(), &mut ChaCha8Rng::seed_from_u64(3))
    }

    #[test]
    fn zero_memory_gives_uniform_attention() {
        let p = params(4, 2);
        let (a, r) = attend(&p, &MemoryState::zeros(2), &[0.3, -0.1, 0.2, 0.5]).unwrap();
        for w in a {
            assert!((w - 1.0 / 12.0).abs() < 1e-12);
        }
        assert_eq!(r, vec![0.0, 0.0]);
    }

    #[test]
    fn zero_head_gives_uniform_probs() {
        let mut p = params(4, 2);
        p.head = Linear::zeros(4, 3);
        let demo = Demographics {
            age: 50.0,
            gender: Gender::Male,
        };
        let pred = p.predict(&MemoryState::zeros(2), &demo, &[1.0, 2.0, 3.0, 4.0]).unwrap();
        for q in pred.probs {
            assert!((q - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn demographic_feature_layout() {
        let f = demographic_features(&Demographics {
            age: 60.0,
            gender: Gender::Female,
        });
        assert_eq!(f, [0.5, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn wrong_embedding_dim_is_rejected() {
        let p = params(4, 2);
        assert!(matches!(
            attend(&p, &MemoryState::zeros(2), &[0.0; 3]),
            Err(Error::DimMismatch { .. })
        ));
    }

    #[test]
    fn label_round_trip() {
        for l in MatchLabel::ALL {
            assert_eq!(l.as_str().parse::<MatchLabel>().unwrap(), l);
            assert_eq!(MatchLabel::from_index(l.index()), Some(l));
        }
    }
}
