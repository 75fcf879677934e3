//! Trainable building blocks with hand-written backward passes.
//!
//! Every layer keeps its parameters in [`Tensor`]s and exposes a
//! `backward` that accumulates into a gradient container of the same type,
//! so gradients and optimizer state can reuse the parameter structs.

use rand::Rng;

use crate::tensor::Tensor;

/// Named access to every trainable tensor of a component.
pub trait Parameters {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>);
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>);

    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.collect("", &mut out);
        out
    }

    fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        self.collect_mut("", &mut out);
        out
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Affine map `y = W x + b`, with `W` stored as `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Linear {
            weight: Tensor::zeros(&[output, input]),
            bias: Tensor::zeros(&[output]),
        }
    }

    /// Glorot-uniform weights, zero bias.
    pub fn init<R: Rng>(input: usize, output: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (input + output).max(1) as f64).sqrt();
        Linear {
            weight: Tensor::uniform(&[output, input], bound, rng),
            bias: Tensor::zeros(&[output]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let (out, inp) = (self.output_dim(), self.input_dim());
        debug_assert_eq!(x.len(), inp);
        let w = self.weight.data();
        let b = self.bias.data();
        (0..out)
            .map(|o| {
                let row = &w[o * inp..(o + 1) * inp];
                b[o] + row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>()
            })
            .collect()
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: &[f64], dy: &[f64], grad: &mut Linear) -> Vec<f64> {
        let (out, inp) = (self.output_dim(), self.input_dim());
        let w = self.weight.data();
        let mut dx = vec![0.0; inp];
        {
            let gw = grad.weight.data_mut();
            for o in 0..out {
                let g = dy[o];
                if g == 0.0 {
                    continue;
                }
                let row = &mut gw[o * inp..(o + 1) * inp];
                for (r, xi) in row.iter_mut().zip(x) {
                    *r += g * xi;
                }
                for (d, wi) in dx.iter_mut().zip(&w[o * inp..(o + 1) * inp]) {
                    *d += g * wi;
                }
            }
        }
        for (gb, g) in grad.bias.data_mut().iter_mut().zip(dy) {
            *gb += g;
        }
        dx
    }
}

impl Parameters for Linear {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((join(prefix, "weight"), &self.weight));
        out.push((join(prefix, "bias"), &self.bias));
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        out.push((join(prefix, "bias"), &mut self.bias));
    }
}

/// Stack of affine layers with `tanh` between them; the last layer is linear.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

#[derive(Debug, Clone)]
pub struct MlpCache {
    /// Input fed to each layer, in order.
    inputs: Vec<Vec<f64>>,
}

impl Mlp {
    /// `hidden` lists the widths of the tanh layers; may be empty (pure affine).
    pub fn init<R: Rng>(input: usize, hidden: &[usize], output: usize, rng: &mut R) -> Self {
        let mut dims = vec![input];
        dims.extend_from_slice(hidden);
        dims.push(output);
        let layers = dims.windows(2).map(|w| Linear::init(w[0], w[1], rng)).collect();
        Mlp { layers }
    }

    pub fn zeros_like(&self) -> Self {
        Mlp {
            layers: self
                .layers
                .iter()
                .map(|l| Linear::zeros(l.input_dim(), l.output_dim()))
                .collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.forward_cached(x).0
    }

    pub fn forward_cached(&self, x: &[f64]) -> (Vec<f64>, MlpCache) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x.to_vec();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut y = layer.forward(&h);
            if i < last {
                y.iter_mut().for_each(|v| *v = v.tanh());
            }
            inputs.push(std::mem::replace(&mut h, y));
        }
        (h, MlpCache { inputs })
    }

    pub fn backward(&self, cache: &MlpCache, dy: &[f64], grad: &mut Mlp) -> Vec<f64> {
        let mut d = dy.to_vec();
        for i in (0..self.layers.len()).rev() {
            let dx = self.layers[i].backward(&cache.inputs[i], &d, &mut grad.layers[i]);
            d = if i > 0 {
                // inputs[i] is the tanh output of layer i-1
                dx.iter()
                    .zip(&cache.inputs[i])
                    .map(|(g, y)| g * (1.0 - y * y))
                    .collect()
            } else {
                dx
            };
        }
        d
    }
}

impl Parameters for Mlp {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        for (i, l) in self.layers.iter().enumerate() {
            l.collect(&join(prefix, &i.to_string()), out);
        }
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.collect_mut(&join(prefix, &i.to_string()), out);
        }
    }
}

/// One-dimensional convolution over time with stride 1 and "same" padding.
///
/// Inputs and outputs are `[steps, channels]` row-major; the weight is
/// `[out_channels, in_channels, kernel]`. Left padding is `(kernel - 1) / 2`,
/// so odd kernels are centred.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBank {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ConvBank {
    pub fn zeros(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        ConvBank {
            weight: Tensor::zeros(&[out_channels, in_channels, kernel]),
            bias: Tensor::zeros(&[out_channels]),
        }
    }

    pub fn init<R: Rng>(in_channels: usize, out_channels: usize, kernel: usize, rng: &mut R) -> Self {
        let bound = (6.0 / ((in_channels + out_channels) * kernel).max(1) as f64).sqrt();
        ConvBank {
            weight: Tensor::uniform(&[out_channels, in_channels, kernel], bound, rng),
            bias: Tensor::zeros(&[out_channels]),
        }
    }

    pub fn zeros_like(&self) -> Self {
        ConvBank::zeros(self.in_channels(), self.out_channels(), self.kernel())
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    fn pad(&self) -> isize {
        ((self.kernel() - 1) / 2) as isize
    }

    pub fn forward(&self, input: &[f64], steps: usize) -> Vec<f64> {
        let (cout, cin, k) = (self.out_channels(), self.in_channels(), self.kernel());
        debug_assert_eq!(input.len(), steps * cin);
        let w = self.weight.data();
        let b = self.bias.data();
        let pad = self.pad();
        let mut out = vec![0.0; steps * cout];
        for t in 0..steps {
            let row = &mut out[t * cout..(t + 1) * cout];
            row.copy_from_slice(b);
            for j in 0..k {
                let s = t as isize + j as isize - pad;
                if s < 0 || s >= steps as isize {
                    continue;
                }
                let x = &input[s as usize * cin..(s as usize + 1) * cin];
                for (o, acc) in row.iter_mut().enumerate() {
                    let base = o * cin * k + j;
                    let mut sum = 0.0;
                    for (c, xv) in x.iter().enumerate() {
                        sum += w[base + c * k] * xv;
                    }
                    *acc += sum;
                }
            }
        }
        out
    }

    /// Accumulates weight/bias gradients; adds `dL/dinput` into `dinput` when given.
    pub fn backward(
        &self,
        input: &[f64],
        steps: usize,
        dout: &[f64],
        grad: &mut ConvBank,
        mut dinput: Option<&mut [f64]>,
    ) {
        let (cout, cin, k) = (self.out_channels(), self.in_channels(), self.kernel());
        let w = self.weight.data();
        let pad = self.pad();
        {
            let gb = grad.bias.data_mut();
            for t in 0..steps {
                for o in 0..cout {
                    gb[o] += dout[t * cout + o];
                }
            }
        }
        let gw = grad.weight.data_mut();
        for t in 0..steps {
            let dy = &dout[t * cout..(t + 1) * cout];
            for j in 0..k {
                let s = t as isize + j as isize - pad;
                if s < 0 || s >= steps as isize {
                    continue;
                }
                let s = s as usize;
                let x = &input[s * cin..(s + 1) * cin];
                for (o, g) in dy.iter().enumerate() {
                    if *g == 0.0 {
                        continue;
                    }
                    let base = o * cin * k + j;
                    for (c, xv) in x.iter().enumerate() {
                        gw[base + c * k] += g * xv;
                    }
                    if let Some(dx) = dinput.as_deref_mut() {
                        let drow = &mut dx[s * cin..(s + 1) * cin];
                        for (c, d) in drow.iter_mut().enumerate() {
                            *d += g * w[base + c * k];
                        }
                    }
                }
            }
        }
    }
}

impl Parameters for ConvBank {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((join(prefix, "weight"), &self.weight));
        out.push((join(prefix, "bias"), &self.bias));
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        out.push((join(prefix, "bias"), &mut self.bias));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fd_check<F: Fn(&[f64]) -> f64>(f: F, x: &[f64], analytic: &[f64]) {
        let h = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[i] += h;
            xm[i] -= h;
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            assert!((fd - analytic[i]).abs() < 1e-7, "index {i}: fd {fd} vs {}", analytic[i]);
        }
    }

    #[test]
    fn mlp_input_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mlp = Mlp::init(5, &[4], 3, &mut rng);
        let x = [0.2, -0.4, 0.9, 0.1, -1.3];
        let upstream = [1.0, -2.0, 0.5];
        let (_, cache) = mlp.forward_cached(&x);
        let mut grad = mlp.zeros_like();
        let dx = mlp.backward(&cache, &upstream, &mut grad);
        let f = |v: &[f64]| {
            mlp.forward(v)
                .iter()
                .zip(&upstream)
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        fd_check(f, &x, &dx);
    }

    #[test]
    fn conv_input_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let conv = ConvBank::init(3, 2, 3, &mut rng);
        let steps = 4;
        let x: Vec<f64> = (0..steps * 3).map(|i| (i as f64 * 0.37).sin()).collect();
        let upstream: Vec<f64> = (0..steps * 2).map(|i| (i as f64 * 0.71).cos()).collect();
        let mut grad = conv.zeros_like();
        let mut dx = vec![0.0; x.len()];
        conv.backward(&x, steps, &upstream, &mut grad, Some(&mut dx));
        let f = |v: &[f64]| {
            conv.forward(v, steps)
                .iter()
                .zip(&upstream)
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        fd_check(f, &x, &dx);
    }

    #[test]
    fn even_kernel_preserves_length() {
        let conv = ConvBank::zeros(2, 3, 4);
        assert_eq!(conv.forward(&[0.0; 10], 5).len(), 15);
    }
}
