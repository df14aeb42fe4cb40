//! Multi-agent motion prediction: a constant-velocity baseline and a small
//! encoder-decoder transformer trained with a weighted position/velocity MSE.

mod model_io;
mod nn;
mod train;
mod transformer;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{Frame, SceneTensor, FEAT_V, FEAT_X, FEAT_Y, FRAME_DT, N_SLOTS, SCENE_LEN};

pub use model_io::{load_model, save_model};
pub use train::{train_transformer, EpochLog, TrainLog};
pub use nn::Params;
pub use transformer::{gradient_check, Model};

pub const T_ENC: usize = 25;
pub const T_PRED: usize = 25;
/// Frames used by the constant-velocity baseline to estimate velocity.
const CV_WINDOW: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictorConfig {
    pub t_enc: usize,
    pub t_pred: usize,
    /// History frames `[label_start, label_end)` fed to the decoder as context.
    pub label_start: usize,
    pub label_end: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub lambda_pos: f64,
    pub lambda_vel: f64,
    pub lr: f64,
    pub lr_step: usize,
    pub lr_gamma: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        PredictorConfig {
            t_enc: T_ENC,
            t_pred: T_PRED,
            label_start: 15,
            label_end: 25,
            d_model: 32,
            n_layers: 2,
            n_heads: 2,
            lambda_pos: 1.0,
            lambda_vel: 0.5,
            lr: 1e-3,
            lr_step: 20,
            lr_gamma: 0.1,
            weight_decay: 0.01,
            batch: 32,
            epochs: 50,
            patience: 10,
            seed: 7,
        }
    }
}

impl PredictorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.t_enc != T_ENC || self.t_pred != T_PRED {
            return bad("t_enc and t_pred must both be 25");
        }
        if !(self.label_start < self.label_end && self.label_end <= self.t_enc) {
            return bad("label window must be a non-empty range inside the history");
        }
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad("d_model must be a positive multiple of n_heads");
        }
        if self.n_layers == 0 || self.batch == 0 || self.lr_step == 0 {
            return bad("n_layers, batch and lr_step must be positive");
        }
        if !(self.lambda_pos >= 0.0 && self.lambda_vel >= 0.0) {
            return bad("loss weights must be non-negative");
        }
        if !(self.lr > 0.0 && self.lr_gamma > 0.0 && self.weight_decay >= 0.0) {
            return bad("lr and lr_gamma must be positive, weight_decay non-negative");
        }
        Ok(())
    }

    pub fn label_len(&self) -> usize {
        self.label_end - self.label_start
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionResult {
    pub scene_id: String,
    /// Future frames `T_ENC..SCENE_LEN`, ego frame, physical units.
    pub predicted: Vec<Frame>,
    pub actual: Vec<Frame>,
    pub present: [bool; N_SLOTS],
}

impl PredictionResult {
    pub fn check_shape(&self) -> Result<()> {
        if self.predicted.len() != self.actual.len() {
            return Err(Error::ShapeMismatch(format!(
                "{}: {} predicted frames vs {} actual",
                self.scene_id,
                self.predicted.len(),
                self.actual.len()
            )));
        }
        Ok(())
    }

    /// Present (frame, slot) pairs.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let slots: Vec<usize> = (0..N_SLOTS).filter(|&s| self.present[s]).collect();
        (0..self.predicted.len()).flat_map(move |t| slots.clone().into_iter().map(move |s| (t, s)))
    }
}

fn future_of(scene: &SceneTensor) -> Vec<Frame> {
    scene.values[T_ENC..SCENE_LEN].to_vec()
}

/// Constant-velocity extrapolation from the last observed frame, using the
/// mean velocity over the last five observed steps. Speed is held at its
/// mean over the same frames.
pub fn predict_cv(scene: &SceneTensor) -> PredictionResult {
    let last = T_ENC - 1;
    let first = last - CV_WINDOW;
    let mut predicted = vec![[[0.0; 3]; N_SLOTS]; T_PRED];
    for s in scene.present_slots() {
        let (x0, y0) = scene.position(last, s);
        let (xa, ya) = scene.position(first, s);
        let span = CV_WINDOW as f64 * FRAME_DT;
        let (vx, vy) = ((x0 - xa) / span, (y0 - ya) / span);
        let v = (first + 1..=last).map(|t| scene.speed(t, s)).sum::<f64>() / CV_WINDOW as f64;
        for (k, frame) in predicted.iter_mut().enumerate() {
            let dt = (k + 1) as f64 * FRAME_DT;
            frame[s] = [x0 + vx * dt, y0 + vy * dt, v];
        }
    }
    PredictionResult {
        scene_id: scene.scene_id.clone(),
        predicted,
        actual: future_of(scene),
        present: scene.present,
    }
}

/// Sum of weighted squared errors over present entries, and their count.
pub fn loss_sum(pred: &PredictionResult, lambda_pos: f64, lambda_vel: f64) -> Result<(f64, usize)> {
    pred.check_shape()?;
    let mut sum = 0.0;
    let mut n = 0;
    for (t, s) in pred.entries() {
        let (p, a) = (pred.predicted[t][s], pred.actual[t][s]);
        let (ex, ey, ev) = (p[FEAT_X] - a[FEAT_X], p[FEAT_Y] - a[FEAT_Y], p[FEAT_V] - a[FEAT_V]);
        sum += lambda_pos * (ex * ex + ey * ey) + lambda_vel * ev * ev;
        n += 1;
    }
    Ok((sum, n))
}

/// Mean over present agent-timesteps of `λ_pos·|p̂−p|² + λ_vel·(v̂−v)²`.
pub fn loss(pred: &PredictionResult, cfg: &PredictorConfig) -> Result<f64> {
    let (sum, n) = loss_sum(pred, cfg.lambda_pos, cfg.lambda_vel)?;
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

/// Average and final displacement error over present agents.
pub fn evaluate_ade_fde(preds: &[PredictionResult]) -> Result<(f64, f64)> {
    let dist = |p: &PredictionResult, t: usize, s: usize| {
        let (a, b) = (p.predicted[t][s], p.actual[t][s]);
        (a[FEAT_X] - b[FEAT_X]).hypot(a[FEAT_Y] - b[FEAT_Y])
    };
    let (mut ade, mut n_ade, mut fde, mut n_fde) = (0.0, 0usize, 0.0, 0usize);
    for p in preds {
        p.check_shape()?;
        let last = p.predicted.len().wrapping_sub(1);
        for (t, s) in p.entries() {
            let d = dist(p, t, s);
            ade += d;
            n_ade += 1;
            if t == last {
                fde += d;
                n_fde += 1;
            }
        }
    }
    if n_ade == 0 || n_fde == 0 {
        return Err(Error::EmptyInput("predictions"));
    }
    Ok((ade / n_ade as f64, fde / n_fde as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::testutil::scene_from_fn;
    use crate::scene::Role;
    use proptest::prelude::*;
    use rand::Rng;

    fn all_present() -> [bool; N_SLOTS] {
        [true; N_SLOTS]
    }

    #[test]
    fn cv_continues_straight_lines_and_rest() {
        let s = scene_from_fn("a", "e", all_present(), |t, k| {
            if k == 3 {
                [5.0, -2.0, 0.0]
            } else {
                [k as f64, 2.0 * t as f64, 20.0]
            }
        });
        let p = predict_cv(&s);
        assert_eq!(p.predicted.len(), T_PRED);
        for t in 0..T_PRED {
            for k in 0..N_SLOTS {
                for f in 0..3 {
                    assert!((p.predicted[t][k][f] - p.actual[t][k][f]).abs() < 1e-9);
                }
            }
        }
        assert_eq!(loss(&p, &PredictorConfig::default()).unwrap(), 0.0);
    }

    #[test]
    fn cv_constant_acceleration_closed_form() {
        // y = a t²/2 sampled at 10 Hz. The five-step mean velocity at t0 = 2.4 s
        // is a·(t0 - 0.25), so the error at horizon T = 2.5 s is a·T²/2 + a·0.25·T.
        let a = 1.0;
        let s = scene_from_fn("a", "e", [true, false, false, false, false, false, false], |t, _| {
            let tt = t as f64 * FRAME_DT;
            [0.0, 0.5 * a * tt * tt, a * tt]
        });
        let p = predict_cv(&s);
        let horizon = T_PRED as f64 * FRAME_DT;
        let err = p.actual[T_PRED - 1][0][FEAT_Y] - p.predicted[T_PRED - 1][0][FEAT_Y];
        assert!((err - (0.5 * a * horizon * horizon + a * 0.25 * horizon)).abs() < 1e-6, "{err}");
    }

    #[test]
    fn loss_weights() {
        let s = scene_from_fn("a", "e", [true, false, false, false, false, false, false], |_, _| [0.0, 0.0, 0.0]);
        let mut p = predict_cv(&s);
        p.predicted = vec![[[0.0; 3]; N_SLOTS]; 1];
        p.actual = vec![[[0.0; 3]; N_SLOTS]; 1];
        p.predicted[0][0] = [1.0, 0.0, 2.0];
        assert_eq!(loss(&p, &PredictorConfig::default()).unwrap(), 3.0);
        p.actual.push([[0.0; 3]; N_SLOTS]);
        assert!(matches!(loss(&p, &PredictorConfig::default()), Err(Error::ShapeMismatch(_))));
    }

    fn random_pred(rng: &mut impl Rng, id: &str) -> PredictionResult {
        let mut present = [false; N_SLOTS];
        for p in present.iter_mut() {
            *p = rng.random_bool(0.7);
        }
        present[0] = true;
        let mut frame = || -> Frame { std::array::from_fn(|_| std::array::from_fn(|_| rng.random_range(-5.0..5.0))) };
        let predicted: Vec<Frame> = (0..T_PRED).map(|_| frame()).collect();
        let actual: Vec<Frame> = (0..T_PRED).map(|_| frame()).collect();
        PredictionResult { scene_id: id.into(), predicted, actual, present }
    }

    #[test]
    fn loss_and_ade_match_loop_oracles() {
        let mut rng = crate::seed::rng(3);
        let preds: Vec<_> = (0..6).map(|i| random_pred(&mut rng, &format!("s{i}"))).collect();
        let cfg = PredictorConfig::default();
        for p in &preds {
            let (mut sum, mut n) = (0.0, 0);
            for t in 0..T_PRED {
                for k in 0..N_SLOTS {
                    if !p.present[k] {
                        continue;
                    }
                    let e: Vec<f64> = (0..3).map(|f| p.predicted[t][k][f] - p.actual[t][k][f]).collect();
                    sum += 1.0 * (e[0] * e[0] + e[1] * e[1]) + 0.5 * e[2] * e[2];
                    n += 1;
                }
            }
            assert!((loss(p, &cfg).unwrap() - sum / n as f64).abs() < 1e-9);
        }
        let (mut ade, mut na, mut fde, mut nf) = (0.0, 0.0, 0.0, 0.0);
        for p in &preds {
            for t in 0..T_PRED {
                for k in 0..N_SLOTS {
                    if p.present[k] {
                        let d = ((p.predicted[t][k][0] - p.actual[t][k][0]).powi(2)
                            + (p.predicted[t][k][1] - p.actual[t][k][1]).powi(2))
                        .sqrt();
                        ade += d;
                        na += 1.0;
                        if t == T_PRED - 1 {
                            fde += d;
                            nf += 1.0;
                        }
                    }
                }
            }
        }
        let (a, f) = evaluate_ade_fde(&preds).unwrap();
        assert!((a - ade / na).abs() < 1e-9);
        assert!((f - fde / nf).abs() < 1e-9);
    }

    #[test]
    fn ade_fde_offsets() {
        let s = scene_from_fn("a", "e", all_present(), |t, k| [k as f64, t as f64, 1.0]);
        let mut p = predict_cv(&s);
        assert_eq!(evaluate_ade_fde(std::slice::from_ref(&p)).unwrap(), (0.0, 0.0));
        for f in p.predicted.iter_mut() {
            for slot in f.iter_mut() {
                slot[FEAT_X] += 1.0;
            }
        }
        let (a, f) = evaluate_ade_fde(&[p]).unwrap();
        assert!((a - 1.0).abs() < 1e-12 && (f - 1.0).abs() < 1e-12);
        assert!(matches!(evaluate_ade_fde(&[]), Err(Error::EmptyInput(_))));
    }

    proptest! {
        #[test]
        fn absent_slots_do_not_affect_loss(seed in 0u64..1000, junk in -100.0f64..100.0) {
            let mut rng = crate::seed::rng(seed);
            let mut p = random_pred(&mut rng, "s");
            p.present[Role::RearRight.index()] = false;
            let cfg = PredictorConfig::default();
            let before = (loss(&p, &cfg).unwrap(), evaluate_ade_fde(std::slice::from_ref(&p)).unwrap());
            for t in 0..T_PRED {
                p.predicted[t][Role::RearRight.index()] = [junk; 3];
            }
            let after = (loss(&p, &cfg).unwrap(), evaluate_ade_fde(std::slice::from_ref(&p)).unwrap());
            prop_assert_eq!(before, after);
            prop_assert!(before.0 >= 0.0);
        }
    }

    #[test]
    fn config_validation() {
        assert!(PredictorConfig::default().validate().is_ok());
        assert!(PredictorConfig { d_model: 30, n_heads: 4, ..Default::default() }.validate().is_err());
        assert!(PredictorConfig { lambda_vel: -1.0, ..Default::default() }.validate().is_err());
        assert!(PredictorConfig { label_start: 20, label_end: 30, ..Default::default() }.validate().is_err());
    }
}
