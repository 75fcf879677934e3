//! Dense row-major tensors and the scalar helpers shared by every layer.

use rand::Rng;

/// A dense, row-major `f64` tensor with an explicit shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    /// Builds a tensor from raw values; `None` if the shape does not match.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Option<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return None;
        }
        Some(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Uniform initialization in `[-bound, bound]`.
    pub fn uniform<R: Rng>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                if bound > 0.0 {
                    rng.gen_range(-bound..=bound)
                } else {
                    0.0
                }
            })
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn zeros_like(&self) -> Self {
        Tensor::zeros(&self.shape)
    }

    /// `self += scale * other`, elementwise.
    pub fn add_scaled(&mut self, other: &Tensor, scale: f64) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Numerically stable softmax (max-shifted).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Backward pass of softmax: given `p = softmax(l)` and `dL/dp`, returns `dL/dl`.
pub fn softmax_backward(probs: &[f64], dprobs: &[f64]) -> Vec<f64> {
    let inner = dot(probs, dprobs);
    probs
        .iter()
        .zip(dprobs)
        .map(|(p, d)| p * (d - inner))
        .collect()
}

/// Cosine similarity; `None` when either vector has (near-)zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let na = norm(a);
    let nb = norm(b);
    if na < 1e-12 || nb < 1e-12 {
        return None;
    }
    Some(dot(a, b) / (na * nb))
}

/// Gradients of `cos(a, b)` with respect to `a` and `b`.
pub fn cosine_backward(a: &[f64], b: &[f64]) -> Option<(Vec<f64>, Vec<f64>)> {
    let na = norm(a);
    let nb = norm(b);
    if na < 1e-12 || nb < 1e-12 {
        return None;
    }
    let c = dot(a, b) / (na * nb);
    let da = a
        .iter()
        .zip(b)
        .map(|(x, y)| y / (na * nb) - c * x / (na * na))
        .collect();
    let db = a
        .iter()
        .zip(b)
        .map(|(x, y)| x / (na * nb) - c * y / (nb * nb))
        .collect();
    Some((da, db))
}

/// Index of the largest entry; the first one wins on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}
