//! Encoder-decoder transformer over agent-flattened frames (7 slots × 3
//! features = 21 inputs per step). Post-LN layers, GELU feed-forward with
//! width 4·d_model, learned positional embeddings.
//!
//! The decoder sees the label-window frames followed by 25 learned query
//! vectors and predicts all future frames in one pass. Outputs are offsets
//! from the last observed frame in normalized units.

use ndarray::{concatenate, s, Array1, Array2, Axis};

use super::nn::{small_normal, FeedForward, FfCache, LayerNorm, Linear, LnCache, Mha, MhaCache, Params};
use super::{loss_sum, PredictionResult, PredictorConfig, T_ENC, T_PRED};
use crate::error::Result;
use crate::scene::{Frame, NormStats, SceneTensor, N_FEATURES, N_SLOTS};
use crate::seed;

pub(super) const N_IN: usize = N_SLOTS * N_FEATURES;

#[derive(Clone, Debug)]
struct EncLayer {
    attn: Mha,
    ln1: LayerNorm,
    ff: FeedForward,
    ln2: LayerNorm,
}

#[derive(Clone, Debug)]
struct DecLayer {
    self_attn: Mha,
    ln1: LayerNorm,
    cross: Mha,
    ln2: LayerNorm,
    ff: FeedForward,
    ln3: LayerNorm,
}

#[derive(Clone, Debug)]
struct Layout {
    enc_in: Linear,
    enc_pos: usize,
    enc: Vec<EncLayer>,
    dec_in: Linear,
    dec_query: usize,
    dec_pos: usize,
    dec: Vec<DecLayer>,
    head: Linear,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: PredictorConfig,
    pub norm: NormStats,
    pub params: Params,
    layout: Layout,
}

struct EncCache {
    attn: MhaCache,
    ln1: LnCache,
    ff: FfCache,
    ln2: LnCache,
}

struct DecCache {
    self_attn: MhaCache,
    ln1: LnCache,
    cross: MhaCache,
    ln2: LnCache,
    ff: FfCache,
    ln3: LnCache,
}

struct Cache {
    x_enc: Array2<f64>,
    x_lab: Array2<f64>,
    enc: Vec<EncCache>,
    dec: Vec<DecCache>,
    head_in: Array2<f64>,
}

fn build_layout(cfg: &PredictorConfig, p: &mut Params, rng: &mut seed::Rng) -> Layout {
    let d = cfg.d_model;
    let n_lab = cfg.label_len();
    let enc_in = Linear::new(p, "enc.in", N_IN, d, rng, 1.0);
    let enc_pos = p.push("enc.pos", small_normal(rng, T_ENC, d, 0.02));
    let enc = (0..cfg.n_layers)
        .map(|l| {
            let name = format!("enc.{l}");
            EncLayer {
                attn: Mha::new(p, &format!("{name}.attn"), d, cfg.n_heads, rng),
                ln1: LayerNorm::new(p, &format!("{name}.ln1"), d),
                ff: FeedForward::new(p, &name, d, 4 * d, rng),
                ln2: LayerNorm::new(p, &format!("{name}.ln2"), d),
            }
        })
        .collect();
    let dec_in = Linear::new(p, "dec.in", N_IN, d, rng, 1.0);
    let dec_query = p.push("dec.query", small_normal(rng, T_PRED, d, 0.02));
    let dec_pos = p.push("dec.pos", small_normal(rng, n_lab + T_PRED, d, 0.02));
    let dec = (0..cfg.n_layers)
        .map(|l| {
            let name = format!("dec.{l}");
            DecLayer {
                self_attn: Mha::new(p, &format!("{name}.self"), d, cfg.n_heads, rng),
                ln1: LayerNorm::new(p, &format!("{name}.ln1"), d),
                cross: Mha::new(p, &format!("{name}.cross"), d, cfg.n_heads, rng),
                ln2: LayerNorm::new(p, &format!("{name}.ln2"), d),
                ff: FeedForward::new(p, &name, d, 4 * d, rng),
                ln3: LayerNorm::new(p, &format!("{name}.ln3"), d),
            }
        })
        .collect();
    // Small head so training starts near "hold the last frame".
    let head = Linear::new(p, "head", d, N_IN, rng, 0.1);
    Layout { enc_in, enc_pos, enc, dec_in, dec_query, dec_pos, dec, head }
}

fn frames_matrix(frames: &[Frame]) -> Array2<f64> {
    Array2::from_shape_fn((frames.len(), N_IN), |(t, j)| frames[t][j / N_FEATURES][j % N_FEATURES])
}

impl Model {
    pub fn new(cfg: PredictorConfig, norm: NormStats) -> Result<Model> {
        cfg.validate()?;
        let mut params = Params::default();
        let mut rng = seed::child_rng(cfg.seed, "predictor/init");
        let layout = build_layout(&cfg, &mut params, &mut rng);
        Ok(Model { cfg, norm, params, layout })
    }

    /// Rebuild a model around externally supplied parameters. Names and shapes
    /// must match what `cfg` produces.
    pub fn with_params(cfg: PredictorConfig, norm: NormStats, params: Params) -> Result<Model> {
        let template = Model::new(cfg, norm)?;
        let same = template.params.len() == params.len()
            && template.params.iter().zip(params.iter()).all(|((n1, t1), (n2, t2))| n1 == n2 && t1.dim() == t2.dim());
        if !same {
            return Err(crate::Error::ModelFormat("parameter names or shapes do not match the configuration".into()));
        }
        Ok(Model { params, ..template })
    }

    /// Normalized inputs: encoder history, decoder label frames, last observed frame.
    fn inputs(&self, scene: &SceneTensor) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
        let frames = self.norm.normalize_scene(scene);
        let x_enc = frames_matrix(&frames[..T_ENC]);
        let x_lab = frames_matrix(&frames[self.cfg.label_start..self.cfg.label_end]);
        let last = x_enc.row(T_ENC - 1).to_owned();
        (x_enc, x_lab, last)
    }

    fn forward(&self, p: &Params, x_enc: Array2<f64>, x_lab: Array2<f64>, last: &Array1<f64>) -> (Array2<f64>, Cache) {
        let ly = &self.layout;
        let mut h = ly.enc_in.forward(p, &x_enc) + p.get(ly.enc_pos);
        let mut enc = Vec::with_capacity(ly.enc.len());
        for layer in &ly.enc {
            let (a, attn) = layer.attn.forward(p, &h, &h);
            let (h1, ln1) = layer.ln1.forward(p, &(&h + &a));
            let (f, ff) = layer.ff.forward(p, &h1);
            let (h2, ln2) = layer.ln2.forward(p, &(&h1 + &f));
            enc.push(EncCache { attn, ln1, ff, ln2 });
            h = h2;
        }
        let memory = h;
        let lab = ly.dec_in.forward(p, &x_lab);
        let mut d = concatenate(Axis(0), &[lab.view(), p.get(ly.dec_query).view()]).expect("same width")
            + p.get(ly.dec_pos);
        let mut dec = Vec::with_capacity(ly.dec.len());
        for layer in &ly.dec {
            let (sa, self_attn) = layer.self_attn.forward(p, &d, &d);
            let (d1, ln1) = layer.ln1.forward(p, &(&d + &sa));
            let (ca, cross) = layer.cross.forward(p, &d1, &memory);
            let (d2, ln2) = layer.ln2.forward(p, &(&d1 + &ca));
            let (f, ff) = layer.ff.forward(p, &d2);
            let (d3, ln3) = layer.ln3.forward(p, &(&d2 + &f));
            dec.push(DecCache { self_attn, ln1, cross, ln2, ff, ln3 });
            d = d3;
        }
        let head_in = d.slice(s![self.cfg.label_len().., ..]).to_owned();
        let out = ly.head.forward(p, &head_in) + &last.view().insert_axis(Axis(0));
        (out, Cache { x_enc, x_lab, enc, dec, head_in })
    }

    fn backward(&self, p: &Params, g: &mut Params, c: &Cache, dout: &Array2<f64>) {
        let ly = &self.layout;
        let n_lab = self.cfg.label_len();
        let dq = ly.head.backward(p, g, &c.head_in, dout);
        let mut dd = Array2::zeros((n_lab + T_PRED, self.cfg.d_model));
        dd.slice_mut(s![n_lab.., ..]).assign(&dq);
        let mut dmem = Array2::zeros((T_ENC, self.cfg.d_model));
        for (layer, lc) in ly.dec.iter().zip(&c.dec).rev() {
            let ds3 = layer.ln3.backward(p, g, &lc.ln3, &dd);
            let dd2 = layer.ff.backward(p, g, &lc.ff, &ds3) + &ds3;
            let ds2 = layer.ln2.backward(p, g, &lc.ln2, &dd2);
            let (dq_cross, dm) = layer.cross.backward(p, g, &lc.cross, &ds2);
            dmem += &dm;
            let dd1 = dq_cross + &ds2;
            let ds1 = layer.ln1.backward(p, g, &lc.ln1, &dd1);
            let (da, db) = layer.self_attn.backward(p, g, &lc.self_attn, &ds1);
            dd = ds1 + da + db;
        }
        *g.get_mut(ly.dec_pos) += &dd;
        *g.get_mut(ly.dec_query) += &dd.slice(s![n_lab.., ..]);
        ly.dec_in.backward(p, g, &c.x_lab, &dd.slice(s![..n_lab, ..]).to_owned());

        let mut dh = dmem;
        for (layer, lc) in ly.enc.iter().zip(&c.enc).rev() {
            let ds2 = layer.ln2.backward(p, g, &lc.ln2, &dh);
            let dh1 = layer.ff.backward(p, g, &lc.ff, &ds2) + &ds2;
            let ds1 = layer.ln1.backward(p, g, &lc.ln1, &dh1);
            let (da, db) = layer.attn.backward(p, g, &lc.attn, &ds1);
            dh = ds1 + da + db;
        }
        *g.get_mut(ly.enc_pos) += &dh;
        ly.enc_in.backward(p, g, &c.x_enc, &dh);
    }

    fn to_result(&self, scene: &SceneTensor, out: &Array2<f64>) -> PredictionResult {
        let mut predicted = vec![[[0.0; N_FEATURES]; N_SLOTS]; T_PRED];
        for (t, frame) in predicted.iter_mut().enumerate() {
            for s in scene.present_slots() {
                let norm: [f64; N_FEATURES] = std::array::from_fn(|f| out[[t, s * N_FEATURES + f]]);
                frame[s] = self.norm.denormalize(norm);
            }
        }
        PredictionResult {
            scene_id: scene.scene_id.clone(),
            predicted,
            actual: scene.values[T_ENC..].to_vec(),
            present: scene.present,
        }
    }

    fn predict_with(&self, p: &Params, scene: &SceneTensor) -> (PredictionResult, Cache) {
        let (x_enc, x_lab, last) = self.inputs(scene);
        let (out, cache) = self.forward(p, x_enc, x_lab, &last);
        (self.to_result(scene, &out), cache)
    }

    pub fn predict(&self, scene: &SceneTensor) -> PredictionResult {
        self.predict_with(&self.params, scene).0
    }

    /// Weighted squared-error sum, its entry count, and the gradient of
    /// `scale · sum` with respect to every parameter.
    pub(super) fn loss_grad_with(&self, p: &Params, scene: &SceneTensor, scale: f64) -> Result<(f64, usize, Params)> {
        let (pred, cache) = self.predict_with(p, scene);
        let (sum, n) = loss_sum(&pred, self.cfg.lambda_pos, self.cfg.lambda_vel)?;
        let lambda = [self.cfg.lambda_pos, self.cfg.lambda_pos, self.cfg.lambda_vel];
        let mut dout = Array2::zeros((T_PRED, N_IN));
        for (t, s) in pred.entries() {
            for f in 0..N_FEATURES {
                let e = pred.predicted[t][s][f] - pred.actual[t][s][f];
                dout[[t, s * N_FEATURES + f]] = scale * 2.0 * lambda[f] * e * self.norm.std[f];
            }
        }
        let mut g = p.zeros_like();
        self.backward(p, &mut g, &cache, &dout);
        Ok((sum, n, g))
    }

    pub(super) fn batch_loss_with(&self, p: &Params, scenes: &[SceneTensor]) -> Result<f64> {
        let (mut sum, mut n) = (0.0, 0usize);
        for s in scenes {
            let (ls, ln) = loss_sum(&self.predict_with(p, s).0, self.cfg.lambda_pos, self.cfg.lambda_vel)?;
            sum += ls;
            n += ln;
        }
        Ok(if n == 0 { 0.0 } else { sum / n as f64 })
    }

    /// Present agent-timesteps over which the batch loss is averaged.
    pub(super) fn entry_count(scenes: &[SceneTensor]) -> usize {
        scenes.iter().map(|s| s.present_slots().count() * T_PRED).sum()
    }
}

/// Compare analytic gradients of the mean batch loss against central finite
/// differences. Returns the largest relative error per parameter tensor,
/// using `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn gradient_check(model: &Model, scenes: &[SceneTensor], eps: f64) -> Result<Vec<(String, f64)>> {
    let n = Model::entry_count(scenes).max(1) as f64;
    let mut analytic = model.params.zeros_like();
    for s in scenes {
        let (_, _, g) = model.loss_grad_with(&model.params, s, 1.0 / n)?;
        analytic.add_assign(&g);
    }
    let mut p = model.params.clone();
    let mut report = Vec::with_capacity(p.len());
    for i in 0..p.len() {
        let mut worst: f64 = 0.0;
        for j in 0..p.get(i).len() {
            let orig = p.get(i).as_slice().expect("contiguous")[j];
            p.get_mut(i).as_slice_mut().expect("contiguous")[j] = orig + eps;
            let up = model.batch_loss_with(&p, scenes)?;
            p.get_mut(i).as_slice_mut().expect("contiguous")[j] = orig - eps;
            let down = model.batch_loss_with(&p, scenes)?;
            p.get_mut(i).as_slice_mut().expect("contiguous")[j] = orig;
            let num = (up - down) / (2.0 * eps);
            let ana = analytic.get(i).as_slice().expect("contiguous")[j];
            worst = worst.max((ana - num).abs() / ana.abs().max(num.abs()).max(1e-6));
        }
        report.push((p.names()[i].clone(), worst));
    }
    Ok(report)
}
