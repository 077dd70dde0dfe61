//! A small dense network trained with plain minibatch SGD on softmax
//! cross-entropy. Everything is `f64` and single-threaded within a run.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::harness::rng::{stream, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

/// Weight initialisation: gaussian He (relu) or Glorot (tanh) scale times
/// `gain`, zero biases. `zero_head` starts the output layer at zero so the
/// initial logits carry no random offset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Init {
    pub gain: f64,
    #[serde(default)]
    pub zero_head: bool,
}

impl Default for Init {
    fn default() -> Self {
        Self { gain: 1.0, zero_head: false }
    }
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Tanh => v.tanh(),
        }
    }

    /// Derivative expressed through the activation output.
    fn grad_from_output(self, out: f64) -> f64 {
        match self {
            Activation::Relu => {
                if out > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - out * out,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Dense {
    n_in: usize,
    n_out: usize,
    /// Row-major `n_out x n_in`.
    w: Vec<f64>,
    b: Vec<f64>,
}

impl Dense {
    fn forward(&self, x: &[f64], batch: usize, out: &mut Vec<f64>) {
        out.clear();
        out.resize(batch * self.n_out, 0.0);
        for r in 0..batch {
            let xr = &x[r * self.n_in..(r + 1) * self.n_in];
            let or = &mut out[r * self.n_out..(r + 1) * self.n_out];
            for (o, slot) in or.iter_mut().enumerate() {
                let wr = &self.w[o * self.n_in..(o + 1) * self.n_in];
                *slot = self.b[o] + wr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>();
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Dense>,
    activation: Activation,
}

impl Mlp {
    pub fn new(n_in: usize, hidden: &[usize], n_out: usize, activation: Activation, init: Init, seed: u64) -> Self {
        let mut rng = stream(seed, Stream::Init);
        let mut sizes = vec![n_in];
        sizes.extend_from_slice(hidden);
        sizes.push(n_out);
        let n_layers = sizes.len() - 1;
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(li, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let gain = if init.zero_head && li + 1 == n_layers { 0.0 } else { init.gain };
                let std = gain
                    * match activation {
                        Activation::Relu => (2.0 / fan_in as f64).sqrt(),
                        Activation::Tanh => (1.0 / fan_in as f64).sqrt(),
                    };
                let w_vals = (0..fan_in * fan_out)
                    .map(|_| std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
                    .collect();
                Dense {
                    n_in: fan_in,
                    n_out: fan_out,
                    w: w_vals,
                    b: vec![0.0; fan_out],
                }
            })
            .collect();
        Self { layers, activation }
    }

    pub fn n_hidden(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn hidden_widths(&self) -> Vec<usize> {
        self.layers[..self.n_hidden()].iter().map(|l| l.n_out).collect()
    }

    pub fn n_outputs(&self) -> usize {
        self.layers.last().map_or(0, |l| l.n_out)
    }

    /// Forward pass over a row-major batch. Returns every hidden layer's
    /// post-activation output followed by the logits.
    pub fn forward_all(&self, x: &[f64], batch: usize) -> Vec<Vec<f64>> {
        let mut outs: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let input = if i == 0 { x } else { &outs[i - 1] };
            let mut out = Vec::new();
            layer.forward(input, batch, &mut out);
            if i + 1 < self.layers.len() {
                for v in &mut out {
                    *v = self.activation.apply(*v);
                }
            }
            outs.push(out);
        }
        outs
    }

    pub fn predict(&self, x: &[f64], batch: usize) -> Vec<usize> {
        let outs = self.forward_all(x, batch);
        let logits = outs.last().expect("at least one layer");
        let c = self.n_outputs();
        (0..batch)
            .map(|r| {
                let row = &logits[r * c..(r + 1) * c];
                let mut best = 0;
                for k in 1..c {
                    if row[k] > row[best] {
                        best = k;
                    }
                }
                best
            })
            .collect()
    }

    pub fn accuracy(&self, x: &[f64], y: &[usize]) -> f64 {
        if y.is_empty() {
            return 0.0;
        }
        let pred = self.predict(x, y.len());
        pred.iter().zip(y).filter(|(p, t)| p == t).count() as f64 / y.len() as f64
    }

    /// One SGD step on the batch; returns the mean cross-entropy before the update.
    pub fn sgd_step(&mut self, x: &[f64], y: &[usize], lr: f64, weight_decay: f64) -> f64 {
        let batch = y.len();
        let outs = self.forward_all(x, batch);
        let c = self.n_outputs();
        let logits = outs.last().expect("at least one layer");
        let mut delta = vec![0.0; batch * c];
        let mut loss = 0.0;
        for r in 0..batch {
            let row = &logits[r * c..(r + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            for k in 0..c {
                let p = (row[k] - max).exp() / z;
                delta[r * c + k] = (p - if k == y[r] { 1.0 } else { 0.0 }) / batch as f64;
            }
            loss += z.ln() + max - row[y[r]];
        }
        loss /= batch as f64;

        for li in (0..self.layers.len()).rev() {
            let input: &[f64] = if li == 0 { x } else { &outs[li - 1] };
            let (n_in, n_out) = (self.layers[li].n_in, self.layers[li].n_out);
            let mut next = if li > 0 { vec![0.0; batch * n_in] } else { Vec::new() };
            let layer = &mut self.layers[li];
            let mut gw = vec![0.0; n_in * n_out];
            let mut gb = vec![0.0; n_out];
            for r in 0..batch {
                let d = &delta[r * n_out..(r + 1) * n_out];
                let xr = &input[r * n_in..(r + 1) * n_in];
                for o in 0..n_out {
                    if d[o] == 0.0 {
                        continue;
                    }
                    gb[o] += d[o];
                    let g = &mut gw[o * n_in..(o + 1) * n_in];
                    for (gi, xi) in g.iter_mut().zip(xr) {
                        *gi += d[o] * xi;
                    }
                    if li > 0 {
                        let wr = &layer.w[o * n_in..(o + 1) * n_in];
                        let nr = &mut next[r * n_in..(r + 1) * n_in];
                        for (ni, wi) in nr.iter_mut().zip(wr) {
                            *ni += d[o] * wi;
                        }
                    }
                }
            }
            for (w, g) in layer.w.iter_mut().zip(&gw) {
                *w -= lr * (g + weight_decay * *w);
            }
            for (b, g) in layer.b.iter_mut().zip(&gb) {
                *b -= lr * g;
            }
            if li > 0 {
                let prev = &outs[li - 1];
                for (n, o) in next.iter_mut().zip(prev) {
                    *n *= self.activation.grad_from_output(*o);
                }
                delta = next;
            }
        }
        loss
    }
}

/// Row-major `f64` inputs from 2-D points.
pub fn flatten_inputs(points: &[[f64; 2]]) -> Vec<f64> {
    points.iter().flat_map(|p| [p[0], p[1]]).collect()
}

/// Random minibatch indices drawn with replacement from a counter-based stream.
pub(crate) fn minibatch<R: Rng>(rng: &mut R, n: usize, size: usize) -> Vec<usize> {
    (0..size).map(|_| rng.random_range(0..n)).collect()
}
