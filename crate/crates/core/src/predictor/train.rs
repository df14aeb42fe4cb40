use std::path::Path;

use log::{debug, info};
use ndarray::{Array2, Zip};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::nn::Params;
use super::transformer::Model;
use super::PredictorConfig;
use crate::error::{Error, Result};
use crate::io::{csv_writer, fmt_f64};
use crate::scene::{fit_norm, SceneTensor};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    /// Last epoch run (1-based).
    pub stopped_epoch: usize,
    pub best_epoch: usize,
    pub best_val: f64,
}

impl TrainLog {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv_writer(path)?;
        w.write_record(["epoch", "lr", "train_loss", "val_loss"])?;
        for e in &self.epochs {
            w.write_record([e.epoch.to_string(), fmt_f64(e.lr), fmt_f64(e.train_loss), fmt_f64(e.val_loss)])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Adam with decoupled weight decay, applied to weight matrices only.
struct AdamW {
    m: Params,
    v: Params,
    step: i32,
    weight_decay: f64,
}

impl AdamW {
    fn new(p: &Params, weight_decay: f64) -> Self {
        AdamW { m: p.zeros_like(), v: p.zeros_like(), step: 0, weight_decay }
    }

    fn update(&mut self, p: &mut Params, g: &Params, lr: f64) {
        self.step += 1;
        let c1 = 1.0 - BETA1.powi(self.step);
        let c2 = 1.0 - BETA2.powi(self.step);
        for i in 0..p.len() {
            let decay = if p.names()[i].ends_with(".weight") { self.weight_decay } else { 0.0 };
            let (m, v) = (self.m.get_mut(i), self.v.get_mut(i));
            Zip::from(p.get_mut(i)).and(g.get(i)).and(m).and(v).for_each(|w, &gr, m, v| {
                *m = BETA1 * *m + (1.0 - BETA1) * gr;
                *v = BETA2 * *v + (1.0 - BETA2) * gr * gr;
                let update = (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
                *w -= lr * (update + decay * *w);
            });
        }
    }
}

fn lr_at(cfg: &PredictorConfig, epoch: usize) -> f64 {
    cfg.lr * cfg.lr_gamma.powi((epoch / cfg.lr_step) as i32)
}

/// Batch gradient of the mean loss. Per-scene gradients are computed in
/// parallel and summed in scene order, so results do not depend on the
/// number of worker threads.
fn batch_gradient(model: &Model, batch: &[SceneTensor]) -> Result<(f64, usize, Params)> {
    let n = Model::entry_count(batch).max(1);
    let parts: Vec<(f64, usize, Params)> = batch
        .par_iter()
        .map(|s| model.loss_grad_with(&model.params, s, 1.0 / n as f64))
        .collect::<Result<_>>()?;
    let mut grad = model.params.zeros_like();
    let (mut sum, mut count) = (0.0, 0);
    for (s, c, g) in &parts {
        sum += s;
        count += c;
        grad.add_assign(g);
    }
    Ok((sum, count, grad))
}

fn mean_loss(model: &Model, scenes: &[SceneTensor]) -> Result<f64> {
    let parts: Vec<(f64, usize)> = scenes
        .par_iter()
        .map(|s| super::loss_sum(&model.predict(s), model.cfg.lambda_pos, model.cfg.lambda_vel))
        .collect::<Result<_>>()?;
    let (sum, n) = parts.iter().fold((0.0, 0), |(a, b), (s, c)| (a + s, b + c));
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

/// Train the transformer with AdamW, StepLR and early stopping on validation
/// loss. Normalization statistics are fitted on the training scenes. If
/// `val` is empty, training loss drives early stopping. The returned model
/// holds the parameters from the best epoch.
pub fn train_transformer(train: &[SceneTensor], val: &[SceneTensor], cfg: &PredictorConfig) -> Result<(Model, TrainLog)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyInput("training scenes"));
    }
    let norm = fit_norm(train)?;
    let mut model = Model::new(cfg.clone(), norm)?;
    let mut opt = AdamW::new(&model.params, cfg.weight_decay);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut shuffle_rng = seed::child_rng(cfg.seed, "predictor/shuffle");
    let mut best = (f64::INFINITY, 0usize, model.params.clone());
    let mut log = TrainLog { epochs: Vec::new(), stopped_epoch: 0, best_epoch: 0, best_val: f64::INFINITY };

    for epoch in 0..cfg.epochs {
        let lr = lr_at(cfg, epoch);
        order.shuffle(&mut shuffle_rng);
        let (mut sum, mut count) = (0.0, 0usize);
        for (b, chunk) in order.chunks(cfg.batch).enumerate() {
            let batch: Vec<SceneTensor> = chunk.iter().map(|&i| train[i].clone()).collect();
            let (s, c, grad) = batch_gradient(&model, &batch)?;
            if !s.is_finite() || grad_has_nonfinite(&grad) {
                return Err(Error::NonFiniteLoss { epoch: epoch + 1, batch: b });
            }
            sum += s;
            count += c;
            opt.update(&mut model.params, &grad, lr);
        }
        let train_loss = sum / count.max(1) as f64;
        let val_loss = if val.is_empty() { train_loss } else { mean_loss(&model, val)? };
        if !val_loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch: epoch + 1, batch: usize::MAX });
        }
        debug!("epoch {} lr {lr:e} train {train_loss:.5} val {val_loss:.5}", epoch + 1);
        log.epochs.push(EpochLog { epoch: epoch + 1, lr, train_loss, val_loss });
        log.stopped_epoch = epoch + 1;
        if val_loss < best.0 {
            best = (val_loss, epoch + 1, model.params.clone());
        } else if epoch + 1 - best.1 >= cfg.patience {
            info!("early stop after epoch {} (best {} at epoch {})", epoch + 1, best.0, best.1);
            break;
        }
    }
    log.best_val = best.0;
    log.best_epoch = best.1;
    model.params = best.2;
    Ok((model, log))
}

fn grad_has_nonfinite(g: &Params) -> bool {
    g.iter().any(|(_, t): (&str, &Array2<f64>)| t.iter().any(|v| !v.is_finite()))
}
