//! Dense ReLU networks with hand-written backpropagation.
//!
//! All parameters of a network live in one flat buffer. Layer `l` stores its
//! weight matrix row-major as `[fan_in][fan_out]`, followed by its bias.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::math;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    params: Vec<f64>,
}

fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl Mlp {
    /// All-zero network with layer widths `sizes` (input first).
    pub fn zeros(sizes: &[usize]) -> Self {
        assert!(sizes.len() >= 2, "a network needs an input and an output layer");
        Self { sizes: sizes.to_vec(), params: vec![0.0; param_count(sizes)] }
    }

    /// Weights and biases uniform in `±1/sqrt(fan_in)`.
    pub fn init_uniform<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Self {
        let mut net = Self::zeros(sizes);
        for l in 0..net.num_layers() {
            let bound = 1.0 / math::sqrt(net.sizes[l] as f64);
            let (w, b) = net.layer_mut(l);
            for p in w.iter_mut().chain(b.iter_mut()) {
                *p = rng.gen_range(-bound..=bound);
            }
        }
        net
    }

    pub fn from_params(sizes: &[usize], params: Vec<f64>) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) || params.len() != param_count(sizes) {
            return Err(Error::ShapeMismatch(alloc::format!(
                "{} parameters for layer sizes {:?}",
                params.len(),
                sizes
            )));
        }
        Ok(Self { sizes: sizes.to_vec(), params })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn offset(&self, l: usize) -> usize {
        param_count(&self.sizes[..=l])
    }

    /// `(weights, bias)` of layer `l`.
    pub fn layer(&self, l: usize) -> (&[f64], &[f64]) {
        let (fi, fo) = (self.sizes[l], self.sizes[l + 1]);
        let off = self.offset(l);
        let (w, rest) = self.params[off..].split_at(fi * fo);
        (w, &rest[..fo])
    }

    pub fn layer_mut(&mut self, l: usize) -> (&mut [f64], &mut [f64]) {
        let (fi, fo) = (self.sizes[l], self.sizes[l + 1]);
        let off = self.offset(l);
        let (w, rest) = self.params[off..].split_at_mut(fi * fo);
        (w, &mut rest[..fo])
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut acts = Vec::new();
        self.forward_batch(x, 1, &mut acts);
        acts.pop().unwrap()
    }

    /// Evaluates `n` row-major inputs. `acts[l]` receives the `n x sizes[l+1]`
    /// outputs of layer `l` (after ReLU for hidden layers).
    pub fn forward_batch(&self, xs: &[f64], n: usize, acts: &mut Vec<Vec<f64>>) {
        assert_eq!(xs.len(), n * self.input_dim());
        acts.resize_with(self.num_layers(), Vec::new);
        for l in 0..self.num_layers() {
            let (fi, fo) = (self.sizes[l], self.sizes[l + 1]);
            let (w, b) = self.layer(l);
            let hidden = l + 1 < self.num_layers();
            let (prev, rest) = acts.split_at_mut(l);
            let input: &[f64] = if l == 0 { xs } else { &prev[l - 1] };
            let out = &mut rest[0];
            out.clear();
            out.resize(n * fo, 0.0);
            for (x, o) in input.chunks_exact(fi).zip(out.chunks_exact_mut(fo)) {
                o.copy_from_slice(b);
                for (i, &xi) in x.iter().enumerate() {
                    if xi != 0.0 {
                        axpy(xi, &w[i * fo..(i + 1) * fo], o);
                    }
                }
                if hidden {
                    for v in o.iter_mut() {
                        if *v < 0.0 {
                            *v = 0.0;
                        }
                    }
                }
            }
        }
    }

    /// Accumulates into `grad` the parameter gradient of `sum_n <dout_n, f(x_n)>`.
    pub fn backward_batch(&self, xs: &[f64], n: usize, acts: &[Vec<f64>], dout: &[f64], grad: &mut [f64]) {
        assert_eq!(grad.len(), self.params.len());
        assert_eq!(dout.len(), n * self.output_dim());
        let max_width = self.sizes.iter().copied().max().unwrap();
        let mut delta = vec![0.0; max_width];
        let mut prev_delta = vec![0.0; max_width];
        for k in 0..n {
            let fo_last = self.output_dim();
            delta[..fo_last].copy_from_slice(&dout[k * fo_last..(k + 1) * fo_last]);
            for l in (0..self.num_layers()).rev() {
                let (fi, fo) = (self.sizes[l], self.sizes[l + 1]);
                let input = if l == 0 { &xs[k * fi..(k + 1) * fi] } else { &acts[l - 1][k * fi..(k + 1) * fi] };
                let off = self.offset(l);
                let d = &delta[..fo];
                let (gw, gb) = grad[off..off + fi * fo + fo].split_at_mut(fi * fo);
                for (g, &dj) in gb.iter_mut().zip(d) {
                    *g += dj;
                }
                for (i, &xi) in input.iter().enumerate() {
                    if xi != 0.0 {
                        axpy(xi, d, &mut gw[i * fo..(i + 1) * fo]);
                    }
                }
                if l > 0 {
                    let (w, _) = self.layer(l);
                    for (i, (pd, &xi)) in prev_delta[..fi].iter_mut().zip(input).enumerate() {
                        // Hidden inputs are ReLU outputs, so xi > 0 marks the active units.
                        *pd = if xi > 0.0 { dot(&w[i * fo..(i + 1) * fo], d) } else { 0.0 };
                    }
                    core::mem::swap(&mut delta, &mut prev_delta);
                }
            }
        }
    }
}

#[inline]
fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}
