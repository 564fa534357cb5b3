//! Loss, Adam and the epoch loop.

use std::time::Instant;

use crate::data::{augment, AugmentPolicy, Batch, Loader};
use crate::error::{Error, Result};
use crate::layers::{Forward, Mode, ParamStore};
use crate::models::Model;
use crate::rng::derive_seed;
use crate::tensor::{Element, Tape, Var};

/// Probability clamp used by the loss.
pub const BCE_EPS: f64 = 1e-7;

/// Mean binary cross-entropy of probabilities `pred` (`[B]` or `[B, 1]`)
/// against 0/1 labels, with `pred` clamped to `[eps, 1 - eps]`.
pub fn bce_loss<T: Element>(tape: &mut Tape<T>, pred: Var, labels: &[T]) -> Result<Var> {
    tape.bce(pred, labels, T::of(BCE_EPS))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok =
            self.lr > 0.0 && (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid Adam settings {self:?}")))
        }
    }
}

/// Adam with bias correction. Moments are kept in f64 per trainable
/// parameter; buffers are never touched.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// One update from the gradients stored on each trainable parameter.
    pub fn step<T: Element>(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        if self.m.len() != ids.len() {
            self.m = ids.iter().map(|&id| vec![0.0; store.get(id).numel()]).collect();
            self.v = self.m.clone();
        }
        for &id in &ids {
            if store.kind(id) != crate::layers::ParamKind::Trainable {
                continue;
            }
            if store.get(id).grad().is_none() {
                return Err(Error::MissingGradient(store.name(id).to_string()));
            }
            if store.get(id).numel() != self.m[id.index()].len() {
                return Err(Error::ShapeMismatch {
                    op: "adam",
                    lhs: store.get(id).shape().to_vec(),
                    rhs: vec![self.m[id.index()].len()],
                });
            }
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for id in ids {
            if store.kind(id) != crate::layers::ParamKind::Trainable {
                continue;
            }
            let grad: Vec<f64> = store.get(id).grad().unwrap().iter().map(|g| g.as_f64()).collect();
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            for (((theta, g), m), v) in store
                .get_mut(id)
                .data_mut()
                .iter_mut()
                .zip(grad)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *theta = T::of(theta.as_f64() - c.lr * m_hat / (v_hat.sqrt() + c.eps));
            }
        }
        Ok(())
    }
}

fn correct(probs: &[f32], labels: &[f32]) -> usize {
    probs
        .iter()
        .zip(labels)
        .filter(|(&p, &l)| (p >= 0.5) == (l == 1.0))
        .count()
}

/// Mean loss and number of correct predictions of one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    pub correct: usize,
}

/// Forward, backward and Adam update on one batch in training mode.
pub fn train_step(model: &mut Model, adam: &mut Adam, batch: &Batch, dropout_seed: u64) -> Result<StepOutcome> {
    let (loss, probs, grads, updates) = {
        let mut f = Forward::new(&model.params, Mode::Train, dropout_seed);
        let x = f.input(batch.images.clone());
        let p = model.forward(&mut f, x)?;
        let loss = bce_loss(&mut f.tape, p, &batch.labels)?;
        let value = f.tape.value(loss).data()[0] as f64;
        let probs = f.tape.value(p).data().to_vec();
        if !value.is_finite() {
            return Ok(StepOutcome {
                loss: value,
                correct: 0,
            });
        }
        f.tape.backward(loss)?;
        (value, probs, f.param_grads(), f.take_updates())
    };
    model.params.zero_grads();
    model.params.accumulate_grads(grads)?;
    model.params.apply_updates(updates);
    adam.step(&mut model.params)?;
    Ok(StepOutcome {
        loss,
        correct: correct(&probs, &batch.labels),
    })
}

/// Inference-mode loss and accuracy over a whole loader, plus the
/// per-item probabilities in loader order.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
    pub probs: Vec<f32>,
    pub labels: Vec<f32>,
}

pub fn evaluate(model: &Model, loader: &Loader, batch_size: usize) -> Result<Evaluation> {
    let mut loss_sum = 0.0;
    let mut probs = Vec::with_capacity(loader.len());
    let mut labels = Vec::with_capacity(loader.len());
    for batch in loader.batches(batch_size, None) {
        let batch = batch?;
        let mut f = Forward::new(&model.params, Mode::Eval, 0);
        let x = f.input(batch.images.clone());
        let p = model.forward(&mut f, x)?;
        let loss = bce_loss(&mut f.tape, p, &batch.labels)?;
        loss_sum += f.tape.value(loss).data()[0] as f64 * batch.len() as f64;
        probs.extend_from_slice(f.tape.value(p).data());
        labels.extend_from_slice(&batch.labels);
    }
    let n = probs.len().max(1) as f64;
    Ok(Evaluation {
        loss: loss_sum / n,
        accuracy: correct(&probs, &labels) as f64 / n,
        probs,
        labels,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_acc: f64,
    pub train_loss: f64,
    pub val_acc: f64,
    pub val_loss: f64,
    pub seconds: f64,
}

pub const CURVES_CSV_HEADER: &str = "epoch,train_acc,train_loss,val_acc,val_loss,seconds";

impl TrainRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.3}",
            self.epoch, self.train_acc, self.train_loss, self.val_acc, self.val_loss, self.seconds
        )
    }
}

pub fn curves_csv(records: &[TrainRecord]) -> String {
    let mut s = format!("{CURVES_CSV_HEADER}\n");
    for r in records {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

pub fn parse_curves_csv(text: &str) -> Result<Vec<TrainRecord>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == CURVES_CSV_HEADER => {}
        _ => return Err(Error::Dataset("curves file lacks the expected header".into())),
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || Error::Dataset(format!("bad curves row `{l}`"));
            if f.len() != 6 {
                return Err(bad());
            }
            let num = |i: usize| f[i].trim().parse::<f64>().map_err(|_| bad());
            Ok(TrainRecord {
                epoch: f[0].trim().parse().map_err(|_| bad())?,
                train_acc: num(1)?,
                train_loss: num(2)?,
                val_acc: num(3)?,
                val_loss: num(4)?,
                seconds: num(5)?,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FitConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Epoch `e` shuffles the training set with `seed + e`.
    pub seed: u64,
    pub dropout_seed: u64,
    pub augment: AugmentPolicy,
    /// Record wall-clock seconds per epoch; otherwise 0 so runs compare
    /// byte for byte.
    pub timings: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            epochs: 20,
            batch_size: 16,
            adam: AdamConfig::default(),
            seed: 0,
            dropout_seed: 0,
            augment: AugmentPolicy::none(),
            timings: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub records: Vec<TrainRecord>,
    /// Parameters at the epoch with the lowest validation loss.
    pub best: Option<(usize, ParamStore<f32>)>,
}

/// Per epoch: a shuffled training pass (shuffle seed `seed + epoch`) and an
/// inference-mode validation pass. `hook` sees each record as it is made.
pub fn fit(
    model: &mut Model,
    train: &Loader,
    val: &Loader,
    cfg: &FitConfig,
    mut hook: impl FnMut(&TrainRecord),
) -> Result<FitResult> {
    cfg.adam.validate()?;
    cfg.augment.validate()?;
    if train.is_empty() {
        return Err(Error::EmptySplit("train".into()));
    }
    if val.is_empty() {
        return Err(Error::EmptySplit("val".into()));
    }
    let mut adam = Adam::new(cfg.adam);
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, ParamStore<f32>)> = None;
    let batches_per_epoch = train.len().div_ceil(cfg.batch_size.max(1)) as u64;
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let (mut loss_sum, mut hits) = (0.0, 0usize);
        let epoch_seed = derive_seed(cfg.dropout_seed, epoch as u64);
        for (b, batch) in train
            .batches(cfg.batch_size, Some(cfg.seed.wrapping_add(epoch as u64)))
            .enumerate()
        {
            let batch = batch?;
            let ordinal = (epoch as u64 - 1) * batches_per_epoch + b as u64;
            let batch = augment(&batch, &cfg.augment, ordinal);
            let out = train_step(model, &mut adam, &batch, derive_seed(epoch_seed, b as u64))?;
            if !out.loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b + 1 });
            }
            loss_sum += out.loss * batch.len() as f64;
            hits += out.correct;
        }
        let eval = evaluate(model, val, cfg.batch_size)?;
        if !eval.loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, batch: 0 });
        }
        let rec = TrainRecord {
            epoch,
            train_acc: hits as f64 / train.len() as f64,
            train_loss: loss_sum / train.len() as f64,
            val_acc: eval.accuracy,
            val_loss: eval.loss,
            seconds: if cfg.timings {
                start.elapsed().as_secs_f64()
            } else {
                0.0
            },
        };
        if best.as_ref().is_none_or(|(_, l, _)| rec.val_loss < *l) {
            best = Some((epoch, rec.val_loss, model.params.clone()));
        }
        hook(&rec);
        records.push(rec);
    }
    Ok(FitResult {
        records,
        best: best.map(|(e, _, p)| (e, p)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{Builder, Init};
    use crate::tensor::Tensor;

    fn loss_of(pred: Vec<f64>, labels: Vec<f64>) -> f64 {
        let mut tape = Tape::<f64>::new();
        let n = pred.len();
        let p = tape.constant(Tensor::from_vec(&[n, 1], pred).unwrap());
        let l = bce_loss(&mut tape, p, &labels).unwrap();
        tape.value(l).data()[0]
    }

    #[test]
    fn bce_examples() {
        assert!((loss_of(vec![0.5], vec![1.0]) - 2f64.ln()).abs() < 1e-12);
        assert!((loss_of(vec![0.5], vec![0.0]) - 2f64.ln()).abs() < 1e-12);
        assert!(loss_of(vec![1.0 - 1e-7], vec![1.0]) < 1e-6);
        let want = -(0.9f64.ln() + 0.8f64.ln()) / 2.0;
        assert!((loss_of(vec![0.9, 0.2], vec![1.0, 0.0]) - want).abs() < 1e-12);
        assert!((want - 0.16425).abs() < 1e-5);
        assert!(loss_of(vec![0.0], vec![1.0]).is_finite());
        assert!(loss_of(vec![f64::NAN], vec![1.0]).is_nan());
    }

    fn scalar_store(theta: f64) -> (ParamStore<f64>, crate::layers::ParamId) {
        let mut store = ParamStore::new();
        let id = Builder::new(&mut store, 0).param("theta", &[1], Init::Zeros).unwrap();
        store.get_mut(id).data_mut()[0] = theta;
        (store, id)
    }

    #[test]
    fn adam_first_steps_by_hand() {
        let (mut store, id) = scalar_store(0.0);
        let mut adam = Adam::new(AdamConfig::default());
        store.get_mut(id).accumulate_grad(&[1.0]).unwrap();
        adam.step(&mut store).unwrap();
        let after1 = store.get(id).data()[0];
        assert!((after1 + 0.001 / (1.0 + 1e-8)).abs() < 1e-15);
        // step 2: m = 0.19, v = 0.001999; m_hat = 1, v_hat = 1
        adam.step(&mut store).unwrap();
        let after2 = store.get(id).data()[0];
        assert!(after2 < after1);
        assert!((after2 - 2.0 * after1).abs() < 1e-12);
    }

    #[test]
    fn adam_zero_gradient_does_not_move() {
        let (mut store, id) = scalar_store(0.37);
        store.get_mut(id).accumulate_grad(&[0.0]).unwrap();
        let mut adam = Adam::new(AdamConfig::default());
        for _ in 0..5 {
            adam.step(&mut store).unwrap();
        }
        assert_eq!(store.get(id).data()[0], 0.37);
    }

    #[test]
    fn adam_requires_gradients() {
        let (mut store, _) = scalar_store(0.0);
        let mut adam = Adam::new(AdamConfig::default());
        assert!(matches!(adam.step(&mut store), Err(Error::MissingGradient(_))));
    }

    #[test]
    fn curves_round_trip() {
        let r = vec![TrainRecord {
            epoch: 1,
            train_acc: 0.5,
            train_loss: 0.7,
            val_acc: 0.25,
            val_loss: 0.8,
            seconds: 0.0,
        }];
        let text = curves_csv(&r);
        assert!(text.starts_with("epoch,train_acc,train_loss,val_acc,val_loss,seconds\n1,0.500000"));
        assert_eq!(parse_curves_csv(&text).unwrap(), r);
        assert!(parse_curves_csv("nope\n").is_err());
    }
}
