//! Supervised training with binary cross-entropy and Adam, and batch
//! evaluation.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Tracklet;
use crate::error::{Error, Result};
use crate::metrics::{decide, evaluate as score, MetricReport};
use crate::model::VtfModel;
use crate::tensor::{Gradients, ParamId, ParamStore, Scalar, Tape, Tensor};
use crate::vision::{sample_frames, Frame};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Frames sampled per tracklet.
    pub frames: usize,
    pub freeze_encoders: bool,
    /// Stop after this many optimizer steps, if set.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            weight_decay: 1e-4,
            epochs: 20,
            batch_size: 8,
            seed: 0,
            frames: 6,
            freeze_encoders: true,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    /// A zero learning rate is accepted so a run can be checked to leave
    /// parameters untouched.
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Usage(format!("learning rate must be non-negative, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Usage(format!("weight decay must be non-negative, got {}", self.weight_decay)));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.frames == 0 {
            return Err(Error::Usage("epochs, batch size and frames must be at least 1".into()));
        }
        Ok(())
    }
}

/// First and second moments for every trainable parameter.
#[derive(Debug, Clone, Default)]
pub struct AdamState<T> {
    pub step: u64,
    pub first: BTreeMap<ParamId, Tensor<T>>,
    pub second: BTreeMap<ParamId, Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new() -> Self {
        AdamState {
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }
}

/// One bias-corrected Adam update with decoupled weight decay
/// (`θ ← θ − lr·λ·θ` first). Gradients must cover exactly the trainable
/// parameters; frozen ones are never touched.
pub fn adam_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &Gradients<T>,
    state: &mut AdamState<T>,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    let trainable = params.trainable_ids();
    if let Some(extra) = grads.param_ids().find(|id| !params.get(*id).trainable) {
        return Err(Error::Contract(format!("gradient given for frozen parameter {}", params.get(extra).name)));
    }
    for &id in &trainable {
        if grads.param(id).is_none() {
            return Err(Error::Contract(format!("no gradient for trainable parameter {}", params.get(id).name)));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    for id in trainable {
        let g = grads.param(id).expect("checked above");
        let shape = g.shape().to_vec();
        let m = state.first.entry(id).or_insert_with(|| Tensor::zeros(shape.clone()));
        let v = state.second.entry(id).or_insert_with(|| Tensor::zeros(shape));
        let theta = params.tensor_mut(id);
        for (((p, &gi), mi), vi) in theta.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
            let gi = gi.f64();
            let mut w = p.f64();
            w -= lr * weight_decay * w;
            let m_new = BETA1 * mi.f64() + (1.0 - BETA1) * gi;
            let v_new = BETA2 * vi.f64() + (1.0 - BETA2) * gi * gi;
            *mi = T::of(m_new);
            *vi = T::of(v_new);
            w -= lr * (m_new / c1) / ((v_new / c2).sqrt() + ADAM_EPS);
            *p = T::of(w);
        }
    }
    Ok(())
}

/// The frames of a tracklet the model sees under a frame budget.
pub fn frames_for(tracklet: &Tracklet, budget: usize) -> Vec<&Frame> {
    sample_frames(tracklet.frames.len(), budget).into_iter().map(|i| &tracklet.frames[i]).collect()
}

fn targets<T: Scalar>(labels: &[bool]) -> Tensor<T> {
    Tensor::new([labels.len()], labels.iter().map(|&b| if b { T::one() } else { T::zero() }).collect())
        .expect("label length")
}

/// Per-tracklet inputs: visual tokens when the encoders are frozen, raw
/// patch stacks otherwise.
enum Inputs<T> {
    Cached { text: Tensor<T>, visual: Vec<Tensor<T>> },
    Patches(Vec<Tensor<T>>),
}

fn prepare_inputs<T: Scalar>(model: &VtfModel<T>, tracklets: &[Tracklet], frames: usize) -> Result<Inputs<T>> {
    if model.encoders_frozen() {
        let text = model.encode_text()?;
        let visual = tracklets
            .par_iter()
            .map(|t| model.encode_visual(&frames_for(t, frames)))
            .collect::<Result<_>>()?;
        Ok(Inputs::Cached { text, visual })
    } else {
        let patches = tracklets.par_iter().map(|t| model.prepare(&frames_for(t, frames))).collect::<Result<_>>()?;
        Ok(Inputs::Patches(patches))
    }
}

fn tracklet_loss<T: Scalar>(
    model: &VtfModel<T>,
    inputs: &Inputs<T>,
    index: usize,
    labels: &[bool],
    weight: f64,
) -> Result<(f64, Gradients<T>)> {
    let mut tape = Tape::new();
    let logits = match inputs {
        Inputs::Cached { text, visual } => {
            let v = tape.constant(visual[index].clone());
            let t = tape.constant(text.clone());
            model.head_logits(&mut tape, v, t, None)?
        }
        Inputs::Patches(p) => model.logits_on_tape(&mut tape, &p[index], None)?,
    };
    let loss = tape.bce_with_logits(logits, &targets(labels))?;
    let value = tape.value(loss).item()?.f64();
    let scaled = tape.scale(loss, weight);
    Ok((value, tape.backward(scaled)?))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub macro_f1: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub steps: usize,
}

impl TrainLog {
    pub const HEADER: &'static str = "epoch\tloss\tmacro_f1";

    pub fn to_tsv(&self) -> String {
        let mut out = format!("{}\n", Self::HEADER);
        for r in &self.epochs {
            let f1 = r.macro_f1.map_or("-".to_string(), |f| format!("{f:.4}"));
            writeln!(out, "{}\t{:.4}\t{}", r.epoch, r.loss, f1).expect("writing to a string");
        }
        out
    }
}

/// Trains `model` in place. `held_out`, when given, is scored after every
/// epoch; `on_epoch` sees the model after each epoch (for checkpoints).
pub fn train<T: Scalar>(
    model: &mut VtfModel<T>,
    data: &[Tracklet],
    held_out: Option<&[Tracklet]>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, &VtfModel<T>) -> Result<()>,
) -> Result<TrainLog> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Usage("training set is empty".into()));
    }
    let classes = model.class_count();
    if let Some(t) = data.iter().find(|t| t.labels.len() != classes) {
        return Err(Error::ModelMismatch(format!(
            "tracklet {} has {} labels but the model predicts {classes} classes",
            t.id,
            t.labels.len()
        )));
    }
    model.freeze_encoders(cfg.freeze_encoders);
    let inputs = prepare_inputs(model, data, cfg.frames)?;
    let mut state = AdamState::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = TrainLog::default();
    'epochs: for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut seen = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let weight = 1.0 / batch.len() as f64;
            let results = batch
                .par_iter()
                .map(|&i| tracklet_loss(model, &inputs, i, &data[i].labels, weight))
                .collect::<Result<Vec<_>>>()?;
            let mut grads = Gradients::default();
            for (loss, g) in &results {
                if !loss.is_finite() {
                    return Err(Error::Verification(format!("non-finite loss at epoch {epoch}")));
                }
                total += loss;
                grads.accumulate(g);
            }
            seen += batch.len();
            adam_step(&mut model.params, &grads, &mut state, cfg.lr, cfg.weight_decay)?;
            log.steps += 1;
            if cfg.max_steps.is_some_and(|m| log.steps >= m) {
                log.epochs.push(EpochRecord {
                    epoch,
                    loss: total / seen as f64,
                    macro_f1: None,
                });
                on_epoch(epoch, model)?;
                break 'epochs;
            }
        }
        let macro_f1 = match held_out {
            Some(h) if !h.is_empty() => Some(evaluate(model, h, cfg.frames)?.macro_f1),
            _ => None,
        };
        log.epochs.push(EpochRecord {
            epoch,
            loss: total / seen as f64,
            macro_f1,
        });
        on_epoch(epoch, model)?;
    }
    Ok(log)
}

/// Logits `[C]` for every tracklet, in order.
pub fn predict<T: Scalar>(model: &VtfModel<T>, tracklets: &[Tracklet], frames: usize) -> Result<Vec<Tensor<T>>> {
    let text = model.encode_text()?;
    tracklets
        .par_iter()
        .map(|t| {
            let visual = model.encode_visual(&frames_for(t, frames))?;
            model.logits_from_tokens(&visual, &text)
        })
        .collect()
}

/// Decides every tracklet and scores the decisions per attribute group.
pub fn evaluate<T: Scalar>(model: &VtfModel<T>, tracklets: &[Tracklet], frames: usize) -> Result<MetricReport> {
    if tracklets.is_empty() {
        return Err(Error::Usage("evaluation set is empty".into()));
    }
    let logits = predict(model, tracklets, frames)?;
    let preds = logits.iter().map(|l| decide(l.data(), &model.schema)).collect::<Result<Vec<_>>>()?;
    let truths: Vec<Vec<bool>> = tracklets.iter().map(|t| t.labels.clone()).collect();
    score(&model.schema, &preds, &truths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, SyntheticSpec};
    use crate::model::ModelConfig;
    use crate::text::AttributeSchema;

    fn store(values: &[f64], trainable: bool) -> (ParamStore<f64>, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::from_f64([values.len()], values).unwrap(), trainable).unwrap();
        (s, id)
    }

    fn grads_for(s: &ParamStore<f64>, id: ParamId, g: &[f64]) -> Gradients<f64> {
        let mut tape = Tape::new();
        let w = tape.param(s, id);
        let c = tape.constant(Tensor::from_f64([g.len()], g).unwrap());
        let y = tape.mul(w, c).unwrap();
        let y = tape.sum(y).unwrap();
        tape.backward(y).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let (mut s, id) = store(&[0.5, -1.0], true);
        let g = grads_for(&s, id, &[0.0, 0.0]);
        adam_step(&mut s, &g, &mut AdamState::new(), 0.1, 0.0).unwrap();
        assert_eq!(s.tensor(id).data(), &[0.5, -1.0]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let (mut s, id) = store(&[0.5, -1.0, 2.0], true);
        let g = grads_for(&s, id, &[0.3, -4.0, 1e-3]);
        let mut state = AdamState::new();
        adam_step(&mut s, &g, &mut state, 1e-3, 0.0).unwrap();
        let moved: Vec<f64> = s.tensor(id).data().iter().zip([0.5, -1.0, 2.0]).map(|(a, b)| b - a).collect();
        for (m, sign) in moved.iter().zip([1.0, -1.0, 1.0]) {
            assert!((m - sign * 1e-3).abs() < 1e-8, "{m}");
        }
        assert!(state.second.values().all(|v| v.data().iter().all(|&x| x >= 0.0)));
    }

    #[test]
    fn decoupled_decay_happens_first() {
        let (mut s, id) = store(&[2.0], true);
        let g = grads_for(&s, id, &[0.0]);
        adam_step(&mut s, &g, &mut AdamState::new(), 0.1, 0.5).unwrap();
        assert!((s.tensor(id).data()[0] - 1.9).abs() < 1e-15);
    }

    #[test]
    fn missing_or_frozen_gradients_are_errors() {
        let (mut s, id) = store(&[1.0], true);
        assert!(matches!(
            adam_step(&mut s, &Gradients::default(), &mut AdamState::new(), 0.1, 0.0),
            Err(Error::Contract(_))
        ));
        let g = grads_for(&s, id, &[1.0]);
        let frozen = s.add("frozen", Tensor::zeros([1]), false).unwrap();
        adam_step(&mut s, &g, &mut AdamState::new(), 0.1, 0.0).unwrap();
        assert_eq!(s.tensor(frozen).data(), &[0.0]);
    }

    #[test]
    fn bce_examples() {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::from_f64([2], &[0.0, 0.0]).unwrap());
        let l = tape.bce_with_logits(z, &Tensor::from_f64([2], &[1.0, 0.0]).unwrap()).unwrap();
        assert!((tape.value(l).data()[0] - std::f64::consts::LN_2).abs() < 1e-15);
        let z = tape.constant(Tensor::from_f64([1], &[20.0]).unwrap());
        let l = tape.bce_with_logits(z, &Tensor::from_f64([1], &[1.0]).unwrap()).unwrap();
        assert!(tape.value(l).data()[0] < 1e-8);
    }

    #[test]
    fn bce_gradient_is_sigmoid_minus_target() {
        let zs = [-3.0, -0.2, 0.0, 1.7, 6.0];
        let ys = [1.0, 0.0, 1.0, 0.0, 1.0];
        let mut tape = Tape::<f64>::new();
        let z = tape.leaf(Tensor::from_f64([5], &zs).unwrap());
        let l = tape.bce_with_logits(z, &Tensor::from_f64([5], &ys).unwrap()).unwrap();
        let g = tape.backward(l).unwrap();
        for ((z, y), gi) in zs.iter().zip(ys).zip(g.wrt(z).unwrap().data()) {
            let expected = (1.0 / (1.0 + (-z).exp()) - y) / 5.0;
            assert!((gi - expected).abs() < 1e-12);
        }
    }

    fn tiny() -> (VtfModel<f32>, Vec<Tracklet>, Vec<Tracklet>) {
        let spec = SyntheticSpec {
            tracklets: 24,
            frames: 2,
            ..SyntheticSpec::default()
        };
        let data = generate(&spec, &AttributeSchema::default_mars()).unwrap();
        let mut cfg = ModelConfig::default();
        cfg.vision.depth = 1;
        cfg.fusion.blocks = 1;
        let model = VtfModel::new(cfg, data.schema.clone(), 3).unwrap();
        (model, data.train, data.test)
    }

    #[test]
    fn zero_lr_keeps_parameters() {
        let (mut model, train_set, _) = tiny();
        let before = model.params.clone();
        let cfg = TrainConfig {
            lr: 0.0,
            weight_decay: 0.0,
            epochs: 2,
            frames: 2,
            ..TrainConfig::default()
        };
        train(&mut model, &train_set, None, &cfg, |_, _| Ok(())).unwrap();
        for ((_, a), (_, b)) in model.params.iter().zip(before.iter()) {
            assert_eq!(a.tensor, b.tensor);
        }
    }

    #[test]
    fn same_seed_same_log() {
        let cfg = TrainConfig {
            epochs: 2,
            frames: 2,
            ..TrainConfig::default()
        };
        let run = || {
            let (mut model, train_set, test_set) = tiny();
            let log = train(&mut model, &train_set, Some(&test_set), &cfg, |_, _| Ok(())).unwrap();
            (log, crate::tensor::checkpoint::encode(&model.params))
        };
        let (a, pa) = run();
        let (b, pb) = run();
        assert_eq!(a, b);
        assert_eq!(a.epochs.len(), 2);
        assert_eq!(pa, pb);
    }

    #[test]
    fn empty_dataset_is_usage_error() {
        let (mut model, _, _) = tiny();
        assert!(matches!(
            train(&mut model, &[], None, &TrainConfig::default(), |_, _| Ok(())),
            Err(Error::Usage(_))
        ));
    }
}
