//! Losses, the optimizer, the training loop and segment accuracy.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attention::TemperatureSchedule;
use crate::data::{stack, VideoSample};
use crate::error::{MpnError, Result};
use crate::model::{decode, ModelConfig, Mpn, Predictions, Regime, DECODE_THRESHOLD};
use crate::nn::{Graph, NamedTensor, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Probabilities are clamped to `[PROB_CLAMP, 1 − PROB_CLAMP]` inside logs.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss_lambda: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub schedule: TemperatureSchedule,
    pub regime: Regime,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss_lambda: 0.6,
            learning_rate: 2e-4,
            epochs: 200,
            batch_size: 16,
            seed: 1,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            schedule: TemperatureSchedule::default(),
            regime: Regime::Full,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.loss_lambda) {
            return Err(MpnError::Config(format!("loss_lambda must lie in [0, 1], got {}", self.loss_lambda)));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(MpnError::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(MpnError::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(MpnError::Config("beta1 and beta2 must lie in [0, 1)".into()));
        }
        if !(self.adam_eps > 0.0) {
            return Err(MpnError::Config("adam_eps must be > 0".into()));
        }
        let s = &self.schedule;
        if !(s.tau_start > 0.0 && s.tau_end > 0.0) {
            return Err(MpnError::Config("temperatures must be > 0".into()));
        }
        Ok(())
    }
}

/// Mean binary cross-entropy between clamped probabilities `p` and constant
/// targets of the same shape.
fn bce<F: Scalar>(g: &mut Tape<F>, p: Var, targets: Tensor<F>) -> Result<Var> {
    let eps = F::from_f(PROB_CLAMP);
    let p = g.clamp(p, eps, F::one() - eps);
    let not_targets = targets.map(|y| F::one() - y);
    let (y, ny) = (g.constant(targets), g.constant(not_targets));
    let lp = g.log(p);
    let q = g.one_minus(p);
    let lq = g.log(q);
    let a = g.mul(lp, y)?;
    let b = g.mul(lq, ny)?;
    let s = g.add(a, b)?;
    let m = g.mean(s);
    Ok(g.scale(m, -F::one()))
}

/// The two terms of the fully supervised loss, each averaged over the batch:
/// BCE of `p_r [B × T]` against event indicators and CE of `p_c [B × C]`
/// against the video label.
pub fn full_loss_terms<F: Scalar>(
    g: &mut Tape<F>,
    p_r: Var,
    p_c: Var,
    segment_labels: &[Vec<usize>],
    video_labels: &[usize],
) -> Result<(Var, Var)> {
    let (sr, sc) = (g.shape(p_r).to_vec(), g.shape(p_c).to_vec());
    if sr.len() != 2 || sc.len() != 2 || sr[0] != sc[0] {
        return Err(MpnError::dim("full_loss", &sr, &sc));
    }
    let (b, t, c) = (sr[0], sr[1], sc[1]);
    if segment_labels.len() != b || video_labels.len() != b {
        return Err(MpnError::Data(format!(
            "full_loss: batch of {b} predictions but {} segment label rows and {} video labels",
            segment_labels.len(),
            video_labels.len()
        )));
    }
    let mut relevance = Vec::with_capacity(b * t);
    for row in segment_labels {
        if row.len() != t {
            return Err(MpnError::Data(format!("full_loss: {} segment labels, expected {t}", row.len())));
        }
        relevance.extend(row.iter().map(|&l| if l == c { F::zero() } else { F::one() }));
    }
    let mut onehot = vec![F::zero(); b * c];
    for (i, &y) in video_labels.iter().enumerate() {
        if y >= c {
            return Err(MpnError::Data(format!("video label {y} out of range for {c} classes")));
        }
        onehot[i * c + y] = F::one();
    }
    let bce_term = bce(g, p_r, Tensor::new(&[b, t], relevance)?)?;

    let eps = F::from_f(PROB_CLAMP);
    let pc = g.clamp(p_c, eps, F::one() - eps);
    let lpc = g.log(pc);
    let y = g.constant(Tensor::new(&[b, c], onehot)?);
    let picked = g.mul(lpc, y)?;
    let s = g.sum(picked);
    let ce_term = g.scale(s, -F::one() / F::from_f(b as f64));
    Ok((bce_term, ce_term))
}

/// `λ·BCE(p_r, r) + (1 − λ)·CE(p_c, y)`.
pub fn full_loss<F: Scalar>(
    g: &mut Tape<F>,
    p_r: Var,
    p_c: Var,
    segment_labels: &[Vec<usize>],
    video_labels: &[usize],
    lambda: f64,
) -> Result<Var> {
    let (bce_term, ce_term) = full_loss_terms(g, p_r, p_c, segment_labels, video_labels)?;
    let a = g.scale(bce_term, F::from_f(lambda));
    let b = g.scale(ce_term, F::from_f(1.0 - lambda));
    g.add(a, b)
}

/// Mean over segments: `[B × T × C] → [B × C]`.
pub fn mil_pool<F: Scalar>(g: &mut Tape<F>, p_j: Var) -> Result<Var> {
    if g.shape(p_j).len() != 3 {
        return Err(MpnError::Shape(format!("mil_pool expects [B × T × C], got {:?}", g.shape(p_j))));
    }
    g.mean_axis(p_j, 1)
}

/// Multi-label soft margin loss on pooled probabilities `[B × C]`, averaged
/// over classes and the batch.
pub fn weak_loss<F: Scalar>(g: &mut Tape<F>, p_video: Var, video_labels: &[usize]) -> Result<Var> {
    let shape = g.shape(p_video).to_vec();
    if shape.len() != 2 || shape[0] != video_labels.len() {
        return Err(MpnError::Shape(format!(
            "weak_loss expects [{} × C], got {shape:?}",
            video_labels.len()
        )));
    }
    if !g.value(p_video).all_finite() {
        return Err(MpnError::Numerical("weak_loss: non-finite probabilities".into()));
    }
    let (b, c) = (shape[0], shape[1]);
    let mut y = vec![F::zero(); b * c];
    for (i, &l) in video_labels.iter().enumerate() {
        if l >= c {
            return Err(MpnError::Data(format!("video label {l} out of range for {c} classes")));
        }
        y[i * c + l] = F::one();
    }
    bce(g, p_video, Tensor::new(&[b, c], y)?)
}

/// Adaptive-moment optimizer with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<F: Scalar>(store: &ParamStore<F>, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn from_config<F: Scalar>(store: &ParamStore<F>, cfg: &TrainConfig) -> Self {
        Self::new(store, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    /// Apply one update. Every gradient is checked before anything changes.
    pub fn step<F: Scalar>(&mut self, store: &mut ParamStore<F>, grads: &[Tensor<F>]) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(MpnError::Shape(format!(
                "optimizer state for {} tensors, {} gradients, {} parameters",
                self.m.len(),
                grads.len(),
                store.len()
            )));
        }
        for (id, gr) in store.ids().zip(grads) {
            if gr.shape() != store.get(id).shape() {
                return Err(MpnError::dim("adam", store.get(id).shape(), gr.shape()));
            }
            if !gr.all_finite() {
                return Err(MpnError::Numerical(format!("non-finite gradient for parameter {}", store.name(id))));
            }
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (i, (param, gr)) in store.tensors_mut().iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, g)) in param.data_mut().iter_mut().zip(gr.data()).enumerate() {
                let g = g.to_f();
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let update = self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
                *w = F::from_f(w.to_f() - update);
            }
        }
        Ok(())
    }
}

/// Fraction of positions where the labels agree.
pub fn overall_accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(MpnError::Data(format!(
            "overall_accuracy: {} predictions vs {} labels",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(MpnError::Data("overall_accuracy: no segments".into()));
    }
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / pred.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub train_loss: f64,
    pub tau: f64,
    pub val_accuracy: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub final_params: ParamStore<f32>,
    pub best_params: ParamStore<f32>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub reports: Vec<EpochReport>,
}

const EVAL_BATCH: usize = 64;

/// Predictions for every sample, in order.
pub fn predict_all(model: &Mpn, store: &ParamStore<f32>, samples: &[&VideoSample], tau: f64) -> Result<Vec<Predictions>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let (v, a) = stack(chunk)?;
        out.extend(model.predict(store, v, a, tau)?);
    }
    Ok(out)
}

/// Segment accuracy over `samples`, decoding with `regime`.
pub fn evaluate(model: &Mpn, store: &ParamStore<f32>, samples: &[&VideoSample], regime: Regime, tau: f64) -> Result<f64> {
    let preds = predict_all(model, store, samples, tau)?;
    let mut p = Vec::new();
    let mut y = Vec::new();
    for (pr, s) in preds.iter().zip(samples) {
        p.extend(decode(pr, regime, DECODE_THRESHOLD));
        y.extend_from_slice(&s.segment_labels);
    }
    overall_accuracy(&p, &y)
}

/// Loss of one batch under `cfg.regime`. The weak regime never reads
/// segment labels.
pub fn batch_loss<F: Scalar>(
    model: &Mpn,
    g: &mut Graph<'_, F>,
    batch: &[&VideoSample],
    tau: f64,
    cfg: &TrainConfig,
) -> Result<Var> {
    let (v, a) = stack(batch)?;
    let v = g.constant(v.cast());
    let a = g.constant(a.cast());
    let out = model.forward(g, v, a, tau)?;
    let video_labels: Vec<usize> = batch.iter().map(|s| s.video_label).collect();
    match cfg.regime {
        Regime::Full => {
            let seg: Vec<Vec<usize>> = batch.iter().map(|s| s.segment_labels.clone()).collect();
            full_loss(g, out.p_r, out.p_c, &seg, &video_labels, cfg.loss_lambda)
        }
        Regime::Weak => {
            let pooled = mil_pool(g, out.p_j)?;
            weak_loss(g, pooled, &video_labels)
        }
    }
}

/// Train `store` in place of a fresh copy; returns final and best-validation
/// parameters. `on_epoch` sees every report as soon as it is produced.
pub fn train(
    model: &Mpn,
    store: ParamStore<f32>,
    train_set: &[&VideoSample],
    val_set: &[&VideoSample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochReport),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(MpnError::Data("training set is empty".into()));
    }
    let classes = model.cfg.classes;
    for s in train_set.iter().chain(val_set) {
        if s.video_label >= classes {
            return Err(MpnError::Data(format!(
                "video {} has label {} but the model has {classes} classes",
                s.id, s.video_label
            )));
        }
    }
    let mut store = store;
    let mut adam = Adam::from_config(&store, cfg);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut rng = Rng::new(cfg.seed).derive(100);
    let mut best: Option<(f64, usize, ParamStore<f32>)> = None;
    let mut reports = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let tau = cfg.schedule.tau_at(epoch);
        rng.shuffle(&mut order);
        let mut total = 0.0;
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&VideoSample> = idx.iter().map(|&i| train_set[i]).collect();
            let mut tape = Tape::new();
            let vars = store.bind(&mut tape, true);
            let mut g = Graph::new(&mut tape, &vars);
            let loss = batch_loss(model, &mut g, &batch, tau, cfg)?;
            let value = g.value(loss).data()[0] as f64;
            if !value.is_finite() {
                return Err(MpnError::Numerical(format!("non-finite loss at epoch {epoch}, step {step}")));
            }
            total += value * batch.len() as f64;
            let mut grads = tape.backward(loss)?;
            let gs: Vec<Tensor<f32>> = vars.iter().map(|&v| grads.take(v)).collect();
            adam.step(&mut store, &gs)?;
        }
        let val_accuracy = if val_set.is_empty() {
            0.0
        } else {
            evaluate(model, &store, val_set, cfg.regime, tau)?
        };
        let report = EpochReport {
            epoch,
            train_loss: total / train_set.len() as f64,
            tau,
            val_accuracy,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&report);
        reports.push(report);
        if best.as_ref().is_none_or(|(acc, _, _)| val_accuracy > *acc) {
            best = Some((val_accuracy, epoch, store.clone()));
        }
    }
    let (best_val_accuracy, best_epoch, best_params) = best.unwrap_or_else(|| (0.0, 0, store.clone()));
    Ok(TrainOutcome {
        final_params: store,
        best_params,
        best_epoch,
        best_val_accuracy,
        reports,
    })
}

/// A trained model on disk: architecture, training settings, the effective
/// run configuration text and the parameter values.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SavedModel {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub effective_config: String,
    pub best_epoch: usize,
    pub params: Vec<NamedTensor>,
}

impl SavedModel {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Rebuild the network and its parameters.
    pub fn instantiate(&self) -> Result<(Mpn, ParamStore<f32>)> {
        let (mpn, mut store) = Mpn::init::<f32>(self.model, &mut Rng::new(0))?;
        store.load_named(&self.params)?;
        Ok((mpn, store))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tape_with(values: &[(&[usize], &[f64])]) -> (Tape<f64>, Vec<Var>) {
        let mut tape = Tape::new();
        let vars = values
            .iter()
            .map(|(s, d)| tape.param(Tensor::from_f64(s, d).unwrap()))
            .collect();
        (tape, vars)
    }

    #[test]
    fn perfect_full_predictions_have_tiny_loss() {
        let (mut g, v) = tape_with(&[(&[1, 3], &[1.0, 0.0, 1.0]), (&[1, 2], &[0.0, 1.0])]);
        let l = full_loss(&mut g, v[0], v[1], &[vec![1, 2, 1]], &[1], 0.6).unwrap();
        assert!(g.value(l).data()[0] < 1e-5);
    }

    #[test]
    fn lambda_one_is_bce_only() {
        let (mut g, v) = tape_with(&[(&[1, 2], &[0.8, 0.3]), (&[1, 2], &[0.4, 0.6])]);
        let l = full_loss(&mut g, v[0], v[1], &[vec![0, 2]], &[0], 1.0).unwrap();
        let expect = -((0.8f64).ln() + (0.7f64).ln()) / 2.0;
        assert!((g.value(l).data()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn mil_pool_is_mean_over_segments() {
        let (mut g, v) = tape_with(&[(&[1, 2, 2], &[0.2, 0.8, 0.6, 0.4])]);
        let p = mil_pool(&mut g, v[0]).unwrap();
        let d = g.value(p).data();
        assert!((d[0] - 0.4).abs() < 1e-15 && (d[1] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn weak_loss_uniform_is_ln2() {
        let (mut g, v) = tape_with(&[(&[1, 4], &[0.5; 4])]);
        let l = weak_loss(&mut g, v[0], &[2]).unwrap();
        assert!((g.value(l).data()[0] - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn weak_loss_rejects_nan() {
        let (mut g, v) = tape_with(&[(&[1, 2], &[f64::NAN, 0.5])]);
        assert!(matches!(weak_loss(&mut g, v[0], &[0]), Err(MpnError::Numerical(_))));
    }

    #[test]
    fn adam_zero_gradient_leaves_params() {
        let mut store = ParamStore::<f64>::new();
        store.add("x", Tensor::from_f64(&[2], &[1.0, -2.0]).unwrap());
        let before = store.clone();
        let mut adam = Adam::new(&store, 0.1, 0.9, 0.999, 1e-8);
        adam.step(&mut store, &[Tensor::zeros(&[2])]).unwrap();
        assert_eq!(store, before);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::<f64>::new();
        store.add("x", Tensor::scalar(1.0));
        let mut adam = Adam::new(&store, 2e-4, 0.9, 0.999, 1e-8);
        adam.step(&mut store, &[Tensor::scalar(2.0)]).unwrap();
        let x = store.tensors()[0].data()[0];
        assert!((1.0 - x - 2e-4).abs() < 1e-9);
    }

    #[test]
    fn adam_names_bad_parameter() {
        let mut store = ParamStore::<f32>::new();
        store.add("head.weight", Tensor::scalar(1.0));
        let mut adam = Adam::new(&store, 0.1, 0.9, 0.999, 1e-8);
        let err = adam.step(&mut store, &[Tensor::scalar(f32::INFINITY)]).unwrap_err();
        assert!(err.to_string().contains("head.weight"));
    }

    #[test]
    fn accuracy_counts() {
        assert_eq!(overall_accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(overall_accuracy(&[1, 0], &[1, 2]).unwrap(), 0.5);
        assert!(overall_accuracy(&[1], &[1, 2]).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { loss_lambda: 1.5, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { learning_rate: 0.0, ..Default::default() }.validate().is_err());
    }
}
