//! Frame labelling, chunking, Adam and the early-stopping training loop.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Eager;
use crate::features::Spectrogram;
use crate::graph::{Graph, Mode};
use crate::model::{ModelConfig, Mtfa};
use crate::ops;
use crate::params::ParamStore;
use crate::postproc::EventAnnotation;
use crate::tensor::Tensor;

/// Slack for comparing frame centres against annotation boundaries.
const TIME_EPS: f64 = 1e-9;

/// Frame `t` is 1 when its centre `t·hop + window/2` lies in
/// `[onset, offset)` of any annotation.
pub fn label_frames(n_frames: usize, hop_seconds: f64, window_seconds: f64, annotations: &[EventAnnotation]) -> Result<Vec<f64>> {
    if let Some(a) = annotations.iter().find(|a| a.onset > a.offset) {
        return Err(Error::Annotation(format!("onset {} is after offset {}", a.onset, a.offset)));
    }
    Ok((0..n_frames)
        .map(|t| {
            let c = t as f64 * hop_seconds + window_seconds / 2.0;
            let hit = annotations.iter().any(|a| c >= a.onset - TIME_EPS && c < a.offset - TIME_EPS);
            f64::from(u8::from(hit))
        })
        .collect())
}

/// A clip's features with frame labels for one class.
#[derive(Debug, Clone)]
pub struct LabeledClip {
    pub id: String,
    pub spec: Spectrogram,
    pub labels: Vec<f64>,
}

/// A fixed-length training window.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledChunk {
    /// `frames × n_mels`, row-major.
    pub features: Vec<f64>,
    pub labels: Vec<f64>,
    pub clip: usize,
    pub start: usize,
}

/// Number of windows of `frames` with stride `shift` needed to cover `total`
/// frames.
pub fn chunk_count(total: usize, frames: usize, shift: usize) -> usize {
    if total <= frames {
        1
    } else {
        (total - frames).div_ceil(shift) + 1
    }
}

/// Cuts a clip into windows starting at `0, shift, 2·shift, …` until the end
/// is covered. Short windows repeat the final frame and final label.
pub fn chunk(spec: &Spectrogram, labels: &[f64], frames: usize, shift: usize, clip: usize) -> Vec<LabeledChunk> {
    let total = spec.n_frames();
    assert_eq!(labels.len(), total, "one label per frame");
    (0..chunk_count(total, frames, shift))
        .map(|k| {
            let start = k * shift;
            LabeledChunk {
                features: spec.window_padded(start, frames),
                labels: (start..start + frames).map(|t| labels[t.min(total - 1)]).collect(),
                clip,
                start,
            }
        })
        .collect()
}

/// Where the validation loss comes from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Validation {
    /// Hold out this fraction of clips (at least one).
    Holdout(f64),
    /// Score the training clips themselves in eval mode. For overfitting
    /// checks on tiny datasets.
    TrainingSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub validation: Validation,
    /// Stop as soon as the validation loss drops below this value.
    pub target_loss: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 16,
            patience: 10,
            max_epochs: 40,
            seed: 0,
            validation: Validation::Holdout(0.1),
            target_loss: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patience < 1 {
            return bad("patience must be at least 1".into());
        }
        if let Validation::Holdout(f) = self.validation {
            if !(f > 0.0 && f < 1.0) {
                return bad(format!("validation fraction {f} must lie in (0, 1)"));
            }
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return bad("batch size and epoch limit must be positive".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate {} must be finite and non-negative", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || self.adam_eps <= 0.0 {
            return bad("Adam needs betas in [0, 1) and eps > 0".into());
        }
        Ok(())
    }
}

/// One Adam update of `value` in place, `t` being the 1-based step index.
#[allow(clippy::too_many_arguments)]
pub fn adam_update(value: &mut [f64], grad: &[f64], m: &mut [f64], v: &mut [f64], t: u64, cfg: &TrainConfig) {
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    for i in 0..value.len() {
        let g = grad[i];
        m[i] = b1 * m[i] + (1.0 - b1) * g;
        v[i] = b2 * v[i] + (1.0 - b2) * g * g;
        let mh = m[i] / c1;
        let vh = v[i] / c2;
        value[i] -= cfg.learning_rate * mh / (vh.sqrt() + cfg.adam_eps);
    }
}

/// Applies Adam to every parameter using its accumulated gradient.
pub fn adam_step(store: &mut ParamStore, cfg: &TrainConfig) {
    for p in store.params_mut() {
        p.step_count += 1;
        let t = p.step_count;
        let (value, grad, m, v) = (&mut p.value, &p.grad, &mut p.adam_m, &mut p.adam_v);
        adam_update(value.data_mut(), grad.data(), m.data_mut(), v.data_mut(), t, cfg);
    }
}

fn batch_tensors(chunks: &[&LabeledChunk], frames: usize, n_mels: usize) -> Result<(Tensor, Tensor)> {
    let n = chunks.len();
    let x: Vec<f64> = chunks.iter().flat_map(|c| c.features.iter().copied()).collect();
    let y: Vec<f64> = chunks.iter().flat_map(|c| c.labels.iter().copied()).collect();
    Ok((Tensor::new(&[n, frames, n_mels], x)?, Tensor::new(&[n, frames], y)?))
}

/// Mean BCE of `model` in eval mode over `chunks`.
pub fn evaluate_loss(model: &Mtfa, chunks: &[&LabeledChunk], batch_size: usize) -> Result<f64> {
    let c = model.config();
    let mut total = 0.0;
    for batch in chunks.chunks(batch_size.max(1)) {
        let (x, y) = batch_tensors(batch, c.chunk_frames, c.n_mels)?;
        let mut ex = Eager::new(model.params());
        let out = model.forward(&mut ex, x, false)?;
        total += ops::bce_loss(&out.probs, &y)? * batch.len() as f64;
    }
    Ok(total / chunks.len() as f64)
}

/// One optimizer step on `batch`. Returns the batch loss before the update.
pub fn train_step(model: &mut Mtfa, batch: &[&LabeledChunk], cfg: &TrainConfig, dropout_seed: u64) -> Result<f64> {
    let c = model.config();
    let (x, y) = batch_tensors(batch, c.chunk_frames, c.n_mels)?;
    let (loss, grads, updates) = {
        let mut g = Graph::with_params(model.params(), Mode::Train, dropout_seed);
        let out = model.forward(&mut g, x, false)?;
        let loss = g.bce_loss(out.probs, &y)?;
        let value = g.value(loss).item();
        let updates = g.take_bn_updates();
        (value, g.backward(loss)?, updates)
    };
    let store = model.params_mut();
    store.zero_grad();
    grads.accumulate_into(store);
    adam_step(store, cfg);
    for u in &updates {
        u.apply(store);
    }
    Ok(loss)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    Patience,
    MaxEpochs,
    TargetLoss,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Snapshot from the epoch with the lowest validation loss.
    pub model: Mtfa,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub log: Vec<EpochLog>,
    pub stop: StopReason,
    pub train_clips: Vec<usize>,
    pub val_clips: Vec<usize>,
}

/// Tracks the best validation loss and decides when to stop.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    epoch: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            epoch: 0,
        }
    }

    /// Records one epoch's validation loss. Returns whether it is a new best.
    pub fn observe(&mut self, val_loss: f64) -> bool {
        self.epoch += 1;
        if val_loss < self.best {
            self.best = val_loss;
            self.best_epoch = self.epoch;
            true
        } else {
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.epoch - self.best_epoch >= self.patience
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best(&self) -> f64 {
        self.best
    }
}

/// Seeded split of clip indices into (train, validation).
pub fn split_clips(n: usize, validation: Validation, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n == 0 {
        return Err(Error::Config("training set is empty".into()));
    }
    match validation {
        Validation::TrainingSet => Ok(((0..n).collect(), (0..n).collect())),
        Validation::Holdout(f) => {
            let n_val = ((n as f64 * f).round() as usize).max(1);
            if n_val >= n {
                return Err(Error::Config(format!(
                    "{n} clips leave nothing to train on after holding out {n_val} for validation"
                )));
            }
            let mut ids: Vec<usize> = (0..n).collect();
            ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let val = ids.split_off(n - n_val);
            ids.sort_unstable();
            let mut val = val;
            val.sort_unstable();
            Ok((ids, val))
        }
    }
}

/// Trains a fresh model. `on_epoch` sees each log record as it is produced.
pub fn train(
    clips: &[LabeledClip],
    model_config: ModelConfig,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model_config.validate()?;
    let model = Mtfa::new(model_config, cfg.seed)?;
    train_model(model, clips, cfg, &mut on_epoch)
}

/// Continues training `model` from its current weights.
pub fn train_model(
    mut model: Mtfa,
    clips: &[LabeledClip],
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (train_ids, val_ids) = split_clips(clips.len(), cfg.validation, cfg.seed)?;
    let mc = model.config().clone();
    if let Some(c) = clips.iter().find(|c| c.spec.n_mels() != mc.n_mels) {
        return Err(Error::Config(format!("clip {} has {} mel bins, model expects {}", c.id, c.spec.n_mels(), mc.n_mels)));
    }
    let cut = |ids: &[usize]| -> Vec<LabeledChunk> {
        ids.iter()
            .flat_map(|&i| chunk(&clips[i].spec, &clips[i].labels, mc.chunk_frames, mc.chunk_shift, i))
            .collect()
    };
    let train_chunks = cut(&train_ids);
    let val_chunks = cut(&val_ids);
    let val_refs: Vec<&LabeledChunk> = val_chunks.iter().collect();

    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    order_rng.set_stream(1);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = model.clone();
    let mut log = Vec::new();
    let mut step: u64 = 0;
    let mut stop = StopReason::MaxEpochs;

    for epoch in 1..=cfg.max_epochs {
        let started = Instant::now();
        let mut order: Vec<&LabeledChunk> = train_chunks.iter().collect();
        order.shuffle(&mut order_rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            step += 1;
            let seed = cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(step);
            loss_sum += train_step(&mut model, batch, cfg, seed)? * batch.len() as f64;
        }
        let val_loss = evaluate_loss(&model, &val_refs, cfg.batch_size)?;
        let record = EpochLog {
            epoch,
            train_loss: loss_sum / order.len() as f64,
            val_loss,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!("epoch {epoch}: train {:.5} val {:.5}", record.train_loss, val_loss);
        on_epoch(&record);
        log.push(record);
        if !val_loss.is_finite() {
            return Err(Error::Config(format!("validation loss became {val_loss} at epoch {epoch}")));
        }
        if stopper.observe(val_loss) {
            best = model.clone();
        }
        if cfg.target_loss.is_some_and(|t| val_loss < t) {
            stop = StopReason::TargetLoss;
            break;
        }
        if stopper.should_stop() {
            stop = StopReason::Patience;
            break;
        }
    }
    Ok(TrainOutcome {
        model: best,
        best_epoch: stopper.best_epoch(),
        best_val_loss: stopper.best(),
        log,
        stop,
        train_clips: train_ids,
        val_clips: val_ids,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ann(on: f64, off: f64) -> EventAnnotation {
        EventAnnotation::new("x", on, off).unwrap()
    }

    #[test]
    fn labelling_examples() {
        assert!(label_frames(10, 0.02, 0.04, &[]).unwrap().iter().all(|&v| v == 0.0));
        let l = label_frames(150, 0.02, 0.04, &[ann(1.0, 2.0)]).unwrap();
        let ones: Vec<usize> = (0..150).filter(|&t| l[t] == 1.0).collect();
        assert_eq!(ones, (49..=98).collect::<Vec<_>>());
        assert!(label_frames(10, 0.02, 0.04, &[ann(0.0, 1.0)]).unwrap().iter().all(|&v| v == 1.0));
        let reversed = EventAnnotation {
            label: "x".into(),
            onset: 2.0,
            offset: 1.0,
        };
        assert!(label_frames(10, 0.02, 0.04, &[reversed]).is_err());
    }

    fn spec(t: usize) -> Spectrogram {
        Spectrogram::new((0..t).map(|v| v as f64).collect(), t, 1, 0.02, 0.04)
    }

    #[test]
    fn chunking_examples() {
        assert_eq!(chunk_count(1501, 256, 128), 11);
        let cs = chunk(&spec(1501), &vec![0.0; 1501], 256, 128, 0);
        assert_eq!(cs.len(), 11);
        assert_eq!(cs.last().unwrap().start, 1280);
        assert_eq!(*cs.last().unwrap().features.last().unwrap(), 1500.0);
        let one = chunk(&spec(256), &vec![1.0; 256], 256, 128, 0);
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].features, (0..256).map(|v| v as f64).collect::<Vec<_>>());
        let mut labels = vec![0.0; 100];
        labels[99] = 1.0;
        let short = chunk(&spec(100), &labels, 256, 128, 3);
        assert_eq!(short.len(), 1);
        assert!(short[0].features[99..].iter().all(|&v| v == 99.0));
        assert!(short[0].labels[99..].iter().all(|&v| v == 1.0));
        assert_eq!(short[0].clip, 3);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let cfg = TrainConfig::default();
        let mut x = vec![0.5; 4];
        let (mut m, mut v) = (vec![0.0; 4], vec![0.0; 4]);
        adam_update(&mut x, &[1.0; 4], &mut m, &mut v, 1, &cfg);
        for xi in &x {
            assert!((0.5 - xi - cfg.learning_rate).abs() < 1e-10);
        }
        let mut y = vec![0.5; 4];
        let (mut m, mut v) = (vec![0.0; 4], vec![0.0; 4]);
        adam_update(&mut y, &[0.0; 4], &mut m, &mut v, 1, &cfg);
        assert_eq!(y, vec![0.5; 4]);
    }

    #[test]
    fn patience_trace() {
        let mut es = EarlyStopping::new(10);
        let losses = [1.0, 0.9, 0.95, 0.95, 0.95, 0.95, 0.95, 0.95, 0.95, 0.95, 0.95, 0.95];
        let mut stopped_at = None;
        for (i, &l) in losses.iter().enumerate() {
            es.observe(l);
            if es.should_stop() {
                stopped_at = Some(i + 1);
                break;
            }
        }
        assert_eq!(stopped_at, Some(12));
        assert_eq!(es.best_epoch(), 2);
    }

    #[test]
    fn config_and_split_errors() {
        assert!(TrainConfig { patience: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { validation: Validation::Holdout(1.0), ..Default::default() }.validate().is_err());
        assert!(split_clips(0, Validation::Holdout(0.1), 0).is_err());
        assert!(split_clips(1, Validation::Holdout(0.1), 0).is_err());
        let (tr, va) = split_clips(20, Validation::Holdout(0.1), 4).unwrap();
        assert_eq!((tr.len(), va.len()), (18, 2));
        assert!(tr.iter().all(|i| !va.contains(i)));
        assert_eq!(split_clips(20, Validation::Holdout(0.1), 4).unwrap(), (tr, va));
    }
}
