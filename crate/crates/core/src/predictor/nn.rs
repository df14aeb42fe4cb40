//! Layer primitives with hand-written backward passes. Parameters live in a
//! flat [`Params`] store; layers hold indices into it so gradients, the
//! optimizer and serialization can treat every tensor uniformly.

use ndarray::{s, Array1, Array2, Axis, Zip};
use rand_distr::{Distribution, Normal, Uniform};

use crate::seed;

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Params {
    names: Vec<String>,
    tensors: Vec<Array2<f64>>,
}

impl Params {
    pub(super) fn push(&mut self, name: impl Into<String>, t: Array2<f64>) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn zeros_like(&self) -> Params {
        Params {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| Array2::zeros(t.raw_dim())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Params) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            *a += b;
        }
    }

    pub fn scale(&mut self, c: f64) {
        for t in &mut self.tensors {
            t.mapv_inplace(|v| v * c);
        }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, i: usize) -> &Array2<f64> {
        &self.tensors[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Array2<f64> {
        &mut self.tensors[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn n_values(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }
}

pub(super) fn xavier(rng: &mut seed::Rng, rows: usize, cols: usize, gain: f64) -> Array2<f64> {
    let a = gain * (6.0 / (rows + cols) as f64).sqrt();
    let dist = Uniform::new_inclusive(-a, a).expect("valid range");
    Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng))
}

pub(super) fn small_normal(rng: &mut seed::Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let dist = Normal::new(0.0, std).expect("valid normal");
    Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng))
}

#[derive(Clone, Copy, Debug)]
pub(super) struct Linear {
    pub w: usize,
    pub b: Option<usize>,
}

impl Linear {
    pub fn new(p: &mut Params, name: &str, fan_in: usize, fan_out: usize, rng: &mut seed::Rng, gain: f64) -> Self {
        Linear {
            w: p.push(format!("{name}.weight"), xavier(rng, fan_in, fan_out, gain)),
            b: Some(p.push(format!("{name}.bias"), Array2::zeros((1, fan_out)))),
        }
    }

    pub fn without_bias(p: &mut Params, name: &str, fan_in: usize, fan_out: usize, rng: &mut seed::Rng) -> Self {
        Linear { w: p.push(format!("{name}.weight"), xavier(rng, fan_in, fan_out, 1.0)), b: None }
    }

    pub fn forward(&self, p: &Params, x: &Array2<f64>) -> Array2<f64> {
        let y = x.dot(p.get(self.w));
        match self.b {
            Some(b) => y + p.get(b),
            None => y,
        }
    }

    pub fn backward(&self, p: &Params, g: &mut Params, x: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
        *g.get_mut(self.w) += &x.t().dot(dy);
        if let Some(b) = self.b {
            *g.get_mut(b) += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        }
        dy.dot(&p.get(self.w).t())
    }
}

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug)]
pub(super) struct LayerNorm {
    pub gamma: usize,
    pub beta: usize,
}

pub(super) struct LnCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

impl LayerNorm {
    pub fn new(p: &mut Params, name: &str, d: usize) -> Self {
        LayerNorm {
            gamma: p.push(format!("{name}.gamma"), Array2::ones((1, d))),
            beta: p.push(format!("{name}.beta"), Array2::zeros((1, d))),
        }
    }

    pub fn forward(&self, p: &Params, x: &Array2<f64>) -> (Array2<f64>, LnCache) {
        let d = x.ncols() as f64;
        let mean = x.sum_axis(Axis(1)) / d;
        let centered = x - &mean.view().insert_axis(Axis(1));
        let var = centered.mapv(|v| v * v).sum_axis(Axis(1)) / d;
        let inv_std = var.mapv(|v| 1.0 / (v + LN_EPS).sqrt());
        let xhat = centered * &inv_std.view().insert_axis(Axis(1));
        let y = &xhat * p.get(self.gamma) + p.get(self.beta);
        (y, LnCache { xhat, inv_std })
    }

    pub fn backward(&self, p: &Params, g: &mut Params, c: &LnCache, dy: &Array2<f64>) -> Array2<f64> {
        *g.get_mut(self.gamma) += &(dy * &c.xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
        *g.get_mut(self.beta) += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        let dxhat = dy * p.get(self.gamma);
        let d = dy.ncols() as f64;
        let mean_dxhat = dxhat.sum_axis(Axis(1)) / d;
        let mean_dxhat_xhat = (&dxhat * &c.xhat).sum_axis(Axis(1)) / d;
        let mut dx = dxhat - &mean_dxhat.insert_axis(Axis(1));
        dx -= &(&c.xhat * &mean_dxhat_xhat.insert_axis(Axis(1)));
        dx * &c.inv_std.view().insert_axis(Axis(1))
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub(super) fn gelu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| 0.5 * v * (1.0 + (GELU_K * (v + GELU_C * v * v * v)).tanh()))
}

pub(super) fn gelu_backward(x: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let mut dx = Array2::zeros(x.raw_dim());
    Zip::from(&mut dx).and(x).and(dy).for_each(|o, &v, &g| {
        let t = (GELU_K * (v + GELU_C * v * v * v)).tanh();
        let dt = (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * v * v);
        *o = g * (0.5 * (1.0 + t) + 0.5 * v * dt);
    });
    dx
}

fn softmax_rows(s: &mut Array2<f64>) {
    for mut row in s.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row /= z;
    }
}

#[derive(Clone, Copy, Debug)]
pub(super) struct Mha {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

pub(super) struct MhaCache {
    xq: Array2<f64>,
    xkv: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    concat: Array2<f64>,
}

impl Mha {
    pub fn new(p: &mut Params, name: &str, d: usize, heads: usize, rng: &mut seed::Rng) -> Self {
        Mha {
            q: Linear::new(p, &format!("{name}.q"), d, d, rng, 1.0),
            // A key bias shifts every score in a row equally, which softmax
            // ignores; it would be a parameter with identically zero gradient.
            k: Linear::without_bias(p, &format!("{name}.k"), d, d, rng),
            v: Linear::new(p, &format!("{name}.v"), d, d, rng, 1.0),
            o: Linear::new(p, &format!("{name}.o"), d, d, rng, 1.0),
            heads,
        }
    }

    pub fn forward(&self, p: &Params, xq: &Array2<f64>, xkv: &Array2<f64>) -> (Array2<f64>, MhaCache) {
        let q = self.q.forward(p, xq);
        let k = self.k.forward(p, xkv);
        let v = self.v.forward(p, xkv);
        let d = q.ncols();
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut concat = Array2::zeros((q.nrows(), d));
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let mut scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
            softmax_rows(&mut scores);
            concat.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
            probs.push(scores);
        }
        let out = self.o.forward(p, &concat);
        let cache = MhaCache { xq: xq.clone(), xkv: xkv.clone(), q, k, v, probs, concat };
        (out, cache)
    }

    /// Returns gradients with respect to the query input and the key/value input.
    pub fn backward(&self, p: &Params, g: &mut Params, c: &MhaCache, dout: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
        let dconcat = self.o.backward(p, g, &c.concat, dout);
        let d = c.q.ncols();
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = Array2::zeros(c.q.raw_dim());
        let mut dk = Array2::zeros(c.k.raw_dim());
        let mut dv = Array2::zeros(c.v.raw_dim());
        for h in 0..self.heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let pr = &c.probs[h];
            let dout_h = dconcat.slice(cols);
            let dp = dout_h.dot(&c.v.slice(cols).t());
            dv.slice_mut(cols).assign(&pr.t().dot(&dout_h));
            let row_dot = (&dp * pr).sum_axis(Axis(1)).insert_axis(Axis(1));
            let ds = (dp - &row_dot) * pr * scale;
            dq.slice_mut(cols).assign(&ds.dot(&c.k.slice(cols)));
            dk.slice_mut(cols).assign(&ds.t().dot(&c.q.slice(cols)));
        }
        let dxq = self.q.backward(p, g, &c.xq, &dq);
        let dxkv = self.k.backward(p, g, &c.xkv, &dk) + self.v.backward(p, g, &c.xkv, &dv);
        (dxq, dxkv)
    }
}

/// Position-wise feed-forward block `W2·gelu(W1·x)`.
#[derive(Clone, Copy, Debug)]
pub(super) struct FeedForward {
    pub l1: Linear,
    pub l2: Linear,
}

pub(super) struct FfCache {
    x: Array2<f64>,
    pre: Array2<f64>,
    act: Array2<f64>,
}

impl FeedForward {
    pub fn new(p: &mut Params, name: &str, d: usize, d_ff: usize, rng: &mut seed::Rng) -> Self {
        FeedForward {
            l1: Linear::new(p, &format!("{name}.ff1"), d, d_ff, rng, 1.0),
            l2: Linear::new(p, &format!("{name}.ff2"), d_ff, d, rng, 1.0),
        }
    }

    pub fn forward(&self, p: &Params, x: &Array2<f64>) -> (Array2<f64>, FfCache) {
        let pre = self.l1.forward(p, x);
        let act = gelu(&pre);
        let y = self.l2.forward(p, &act);
        (y, FfCache { x: x.clone(), pre, act })
    }

    pub fn backward(&self, p: &Params, g: &mut Params, c: &FfCache, dy: &Array2<f64>) -> Array2<f64> {
        let dact = self.l2.backward(p, g, &c.act, dy);
        let dpre = gelu_backward(&c.pre, &dact);
        self.l1.backward(p, g, &c.x, &dpre)
    }
}

/// Random unit-scale inputs for layer-level gradient tests.
#[cfg(test)]
pub(super) fn random_matrix(rng: &mut seed::Rng, rows: usize, cols: usize) -> Array2<f64> {
    use rand::Rng;
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0))
}
