//! Training loop, evaluation and the learning-rate schedule.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::autodiff::Tape;
use crate::checkpoint;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::geometry::{augment, dropout_indices, stack_clouds, AugmentConfig, PointCloud};
use crate::metrics::{accuracy_metrics, part_miou, Accuracy};
use crate::model::{Model, Task};
use crate::optim::AdamState;
use crate::params::{Ctx, Mode, ParamStore};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay: f64,
    /// Epochs between decay steps.
    pub lr_step: usize,
    pub lr_floor: f64,
    pub bn_momentum: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Stop once the epoch's training accuracy reaches this value.
    pub target_train_acc: Option<f64>,
    pub augment: bool,
    /// Largest fraction of points removed from a training batch. Each batch
    /// draws a fraction uniformly from `[0, point_dropout]` and every cloud
    /// in it keeps the same random subset size. Zero disables it.
    pub point_dropout: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            lr: 0.001,
            lr_decay: 0.7,
            lr_step: 20,
            lr_floor: 1e-5,
            bn_momentum: 0.9,
            epochs: 250,
            seed: 0,
            target_train_acc: None,
            augment: true,
            point_dropout: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = self.batch_size > 0
            && self.lr > 0.0
            && self.lr_decay > 0.0
            && self.lr_step > 0
            && self.lr_floor > 0.0
            && self.epochs > 0;
        if !positive {
            return Err(Error::Config("training settings must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.point_dropout) {
            return Err(Error::Config(format!("point_dropout must be in [0, 1), got {}", self.point_dropout)));
        }
        if !(0.0..1.0).contains(&self.bn_momentum) {
            return Err(Error::Config(format!("bn_momentum must be in [0, 1), got {}", self.bn_momentum)));
        }
        Ok(())
    }

    /// Staircase decay with a floor.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let steps = (epoch / self.lr_step) as i32;
        (self.lr * self.lr_decay.powi(steps)).max(self.lr_floor)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    /// Instance accuracy, or mIoU for segmentation.
    pub val_metric: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub task: Option<Task>,
    pub epochs: Vec<EpochRecord>,
}

impl History {
    pub fn to_csv(&self) -> String {
        let val = match self.task {
            Some(Task::Segmentation) => "val_miou",
            _ => "val_acc",
        };
        let mut s = format!("epoch,lr,train_loss,train_acc,{val}\n");
        for r in &self.epochs {
            let v = r.val_metric.map(|v| format!("{v:.6}")).unwrap_or_default();
            let _ = writeln!(s, "{},{:e},{:.6},{:.6},{}", r.epoch, r.lr, r.train_loss, r.train_acc, v);
        }
        s
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }
}

pub struct TrainOutcome {
    pub history: History,
    /// Parameters of the epoch with the best validation metric.
    pub best: Option<(usize, ParamStore<f32>)>,
}

/// Points kept per cloud in one training batch, or `None` for all of them.
fn batch_keep(cfg: &TrainConfig, k: usize, n: usize, epoch: usize, batch: usize) -> Option<usize> {
    if cfg.point_dropout <= 0.0 {
        return None;
    }
    let mut r = rng::substream(cfg.seed, &format!("point_dropout/{epoch}/batch{batch}"));
    let dropped = r.random_range(0.0..cfg.point_dropout);
    let keep = ((n as f64) * (1.0 - dropped)).round() as usize;
    Some(keep.clamp((k + 1).min(n), n))
}

/// Row-wise argmax, optionally restricted to a set of allowed columns.
fn argmax(row: &[f32], allowed: Option<&[usize]>) -> usize {
    let mut best: Option<(usize, f32)> = None;
    let mut consider = |j: usize| {
        if best.is_none_or(|(_, v)| row[j] > v) {
            best = Some((j, row[j]));
        }
    };
    match allowed {
        Some(cols) => cols.iter().for_each(|&j| consider(j)),
        None => (0..row.len()).for_each(&mut consider),
    }
    best.map_or(0, |(j, _)| j)
}

/// Predictions for one batch of samples: one label per cloud, or one per point.
fn predict_batch(model: &Model<f32>, ds: &Dataset, idx: &[usize]) -> Result<Vec<Vec<usize>>> {
    let clouds: Vec<&PointCloud> = idx.iter().map(|&i| &ds.samples[i].cloud).collect();
    let logits = model.predict(&clouds)?;
    let width = model.config.outputs;
    let rows: Vec<&[f32]> = logits.data().chunks(width).collect();
    Ok(match ds.task {
        Task::Classification => rows.iter().map(|r| vec![argmax(r, None)]).collect(),
        Task::Segmentation => {
            let n = clouds[0].len();
            idx.iter()
                .zip(rows.chunks(n))
                .map(|(&i, cloud_rows)| {
                    let parts = ds.category_parts.get(ds.samples[i].label).map(Vec::as_slice);
                    cloud_rows.iter().map(|r| argmax(r, parts)).collect()
                })
                .collect()
        }
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    /// Per-sample predictions in dataset order.
    pub predictions: Vec<Vec<usize>>,
    pub accuracy: Option<Accuracy>,
    pub miou: Option<f64>,
}

impl Evaluation {
    /// Instance accuracy for classification, mIoU for segmentation.
    pub fn metric(&self) -> f64 {
        self.miou.or(self.accuracy.map(|a| a.instance)).unwrap_or(0.0)
    }
}

/// Eval-mode predictions over a dataset. Batches run concurrently; results
/// are collected in dataset order.
pub fn evaluate(model: &Model<f32>, ds: &Dataset, batch_size: usize) -> Result<Evaluation> {
    if ds.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate an empty dataset".into()));
    }
    let idx: Vec<usize> = (0..ds.len()).collect();
    let chunks: Vec<&[usize]> = idx.chunks(batch_size.max(1)).collect();
    #[cfg(feature = "parallel")]
    let per_batch: Vec<Result<Vec<Vec<usize>>>> = {
        use rayon::prelude::*;
        chunks.par_iter().map(|c| predict_batch(model, ds, c)).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let per_batch: Vec<Result<Vec<Vec<usize>>>> = chunks.iter().map(|c| predict_batch(model, ds, c)).collect();
    let mut predictions = Vec::with_capacity(ds.len());
    for b in per_batch {
        predictions.extend(b?);
    }
    Ok(match ds.task {
        Task::Classification => {
            let flat: Vec<usize> = predictions.iter().map(|p| p[0]).collect();
            Evaluation {
                accuracy: Some(accuracy_metrics(&flat, &ds.labels())?),
                miou: None,
                predictions,
            }
        }
        Task::Segmentation => {
            let gts: Vec<Vec<usize>> = ds
                .samples
                .iter()
                .map(|s| s.point_labels.clone().unwrap_or_default())
                .collect();
            let parts: Vec<&[usize]> = ds
                .samples
                .iter()
                .map(|s| ds.category_parts.get(s.label).map_or(&[][..], Vec::as_slice))
                .collect();
            Evaluation {
                accuracy: None,
                miou: Some(part_miou(&predictions, &gts, &parts)?),
                predictions,
            }
        }
    })
}

fn check_dataset(model: &Model<f32>, ds: &Dataset) -> Result<()> {
    if ds.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    if ds.task != model.config.task {
        return Err(Error::Config("dataset task does not match the model".into()));
    }
    Ok(())
}

/// Trains in place. `on_epoch` is called after every epoch.
pub fn train(
    model: &mut Model<f32>,
    train_set: &Dataset,
    val_set: Option<&Dataset>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_dataset(model, train_set)?;
    let aug = AugmentConfig::default();
    let mut adam = AdamState::<f32>::new(cfg.lr);
    let mut history = History {
        task: Some(model.config.task),
        epochs: Vec::new(),
    };
    let mut best: Option<(usize, f64, ParamStore<f32>)> = None;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        adam.lr = lr;
        order.shuffle(&mut rng::substream(cfg.seed, &format!("shuffle/{epoch}")));
        let (mut loss_sum, mut seen, mut correct, mut counted) = (0.0f64, 0usize, 0usize, 0usize);

        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            // A single cloud gives degenerate batch statistics in the dense head.
            if batch.len() < 2 {
                continue;
            }
            let keep = batch_keep(cfg, model.config.k, train_set.samples[batch[0]].cloud.len(), epoch, b);
            let mut labels = Vec::new();
            let mut clouds = Vec::with_capacity(batch.len());
            for &i in batch {
                let sample = &train_set.samples[i];
                let mut pc = if cfg.augment {
                    augment(&sample.cloud, &aug, rng::derive_seed(cfg.seed, &format!("augment/{epoch}/{i}")))
                } else {
                    sample.cloud.clone()
                };
                let kept = match keep {
                    Some(m) => {
                        let idx = dropout_indices(pc.len(), m, rng::derive_seed(cfg.seed, &format!("point_dropout/{epoch}/{i}")))?;
                        pc = pc.permuted(&idx);
                        Some(idx)
                    }
                    None => None,
                };
                match (train_set.task, &sample.point_labels, kept) {
                    (Task::Segmentation, Some(pl), Some(idx)) => labels.extend(idx.iter().map(|&j| pl[j])),
                    (Task::Segmentation, Some(pl), None) => labels.extend_from_slice(pl),
                    _ => labels.push(sample.label),
                }
                clouds.push(pc);
            }
            let refs: Vec<&PointCloud> = clouds.iter().collect();

            let tape = Tape::new();
            let ctx = Ctx::new(&tape, &model.store, Mode::Train);
            let x = ctx.input(stack_clouds::<f32>(&refs)?);
            let logits = model.forward(&ctx, x)?;
            let loss = model.loss(logits, &labels)?;
            let value = f64::from(loss.value().item());
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b, value });
            }
            let grads = tape.backward(loss)?;
            let param_grads = ctx.param_grads(&grads);
            let bn = ctx.take_bn_updates();

            let lv = logits.value();
            let rows: Vec<&[f32]> = lv.data().chunks(model.config.outputs).collect();
            correct += rows.iter().zip(&labels).filter(|(r, &l)| argmax(r, None) == l).count();
            counted += labels.len();
            loss_sum += value * batch.len() as f64;
            seen += batch.len();
            drop(ctx);

            model.store.adam_step(&mut adam, &param_grads)?;
            model.store.apply_bn_updates(bn, cfg.bn_momentum);
        }

        let val_metric = match val_set {
            Some(v) => Some(evaluate(model, v, cfg.batch_size.max(16))?.metric()),
            None => None,
        };
        let rec = EpochRecord {
            epoch,
            lr,
            train_loss: if seen > 0 { loss_sum / seen as f64 } else { f64::NAN },
            train_acc: if counted > 0 { correct as f64 / counted as f64 } else { 0.0 },
            val_metric,
        };
        if let Some(m) = val_metric {
            if best.as_ref().is_none_or(|(_, bm, _)| m > *bm) {
                best = Some((epoch, m, model.store.clone()));
            }
        }
        on_epoch(&rec);
        let done = cfg.target_train_acc.is_some_and(|t| rec.train_acc >= t);
        history.epochs.push(rec);
        if done {
            break;
        }
    }
    Ok(TrainOutcome {
        history,
        best: best.map(|(e, _, s)| (e, s)),
    })
}

/// Trains and writes `last.ckpt`, `best.ckpt` and `history.csv` into `out_dir`.
pub fn train_to_dir(
    model: &mut Model<f32>,
    train_set: &Dataset,
    val_set: Option<&Dataset>,
    cfg: &TrainConfig,
    out_dir: &Path,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<History> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let outcome = train(model, train_set, val_set, cfg, on_epoch)?;
    checkpoint::save(model, &out_dir.join("last.ckpt"))?;
    let best = match outcome.best {
        Some((_, store)) => Model {
            store,
            ..model.clone()
        },
        None => model.clone(),
    };
    checkpoint::save(&best, &out_dir.join("best.ckpt"))?;
    let csv = out_dir.join("history.csv");
    std::fs::write(&csv, outcome.history.to_csv()).map_err(|e| Error::io(&csv, e))?;
    Ok(outcome.history)
}

/// Eval-mode accuracy of a classifier on a list of clouds.
pub fn classify(model: &Model<f32>, clouds: &[PointCloud], batch_size: usize) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(clouds.len());
    for chunk in clouds.chunks(batch_size.max(1)) {
        let refs: Vec<&PointCloud> = chunk.iter().collect();
        let logits: Tensor<f32> = model.predict(&refs)?;
        out.extend(logits.data().chunks(model.config.outputs).map(|r| argmax(r, None)));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        let c = TrainConfig::default();
        assert_eq!(c.lr_at(0), 0.001);
        assert!((c.lr_at(20) - 0.0007).abs() < 1e-15);
        assert_eq!(c.lr_at(1000), 1e-5);
        let trace: Vec<f64> = (0..60).map(|e| c.lr_at(e)).collect();
        assert!(trace[..20].iter().all(|&v| v == 0.001));
        assert!(trace[20..40].iter().all(|&v| (v - 0.0007).abs() < 1e-15));
        assert!(trace[40..].iter().all(|&v| (v - 0.00049).abs() < 1e-15));
    }

    #[test]
    fn restricted_argmax() {
        let row = [0.1f32, 3.0, 0.5, 2.0];
        assert_eq!(argmax(&row, None), 1);
        assert_eq!(argmax(&row, Some(&[2, 3])), 3);
        assert_eq!(argmax(&[1.0, 1.0], None), 0);
    }

    #[test]
    fn csv_has_fixed_columns() {
        let h = History {
            task: Some(Task::Classification),
            epochs: vec![EpochRecord {
                epoch: 0,
                lr: 0.001,
                train_loss: 1.0,
                train_acc: 0.5,
                val_metric: Some(0.25),
            }],
        };
        assert_eq!(h.to_csv().lines().next(), Some("epoch,lr,train_loss,train_acc,val_acc"));
    }

    #[test]
    fn batch_keep_bounds() {
        let off = TrainConfig::default();
        assert_eq!(batch_keep(&off, 10, 64, 0, 0), None);
        let on = TrainConfig {
            point_dropout: 0.95,
            ..TrainConfig::default()
        };
        for b in 0..200 {
            let m = batch_keep(&on, 10, 64, 3, b).unwrap();
            assert!((11..=64).contains(&m));
            assert_eq!(batch_keep(&on, 10, 64, 3, b), Some(m));
        }
        assert_eq!(batch_keep(&on, 10, 8, 0, 0), Some(8));
        assert!(TrainConfig { point_dropout: 1.0, ..on }.validate().is_err());
    }

    #[test]
    fn segmentation_trains_under_point_dropout() {
        use crate::data::{gen_seg_synthetic, PoseRange, SegSyntheticSpec};
        use crate::model::ModelConfig;
        let ds = gen_seg_synthetic(&SegSyntheticSpec {
            samples_per_category: 3,
            points: 32,
            pose: PoseRange::default(),
            seed: 1,
        })
        .unwrap();
        let mut c = ModelConfig::segmenter(4);
        c.widths = vec![8, 8];
        c.final_width = 16;
        c.head = vec![8];
        c.k = 4;
        c.tnet_widths = vec![8];
        c.tnet_head = vec![8];
        let mut model = Model::<f32>::new(c, 0).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 3,
            point_dropout: 0.8,
            ..TrainConfig::default()
        };
        let out = train(&mut model, &ds, Some(&ds), &cfg, |_| {}).unwrap();
        assert_eq!(out.history.epochs.len(), 2);
        assert!(out.history.epochs.iter().all(|r| r.train_loss.is_finite()));
    }
}
