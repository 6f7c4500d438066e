//! Deterministic training loop: AdamW with separate backbone and main
//! learning rates, step decay, global-norm clipping and gradient accumulation.

use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Graph;
use crate::image::Image;
use crate::loss::{set_loss, CostWeights, FocalParams, LossBreakdown, LossError};
use crate::metrics::{self, ImageEval, ScoredBox, TruthBox};
use crate::model::{save_checkpoint, Detections, DetrModel, ModelError, ParamGroup, ParamStore};
use crate::projection::GroundTruthBox;
use crate::rng;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid optimizer config: {0}")]
    InvalidConfig(String),
    #[error("training set is empty")]
    EmptyTrainSet,
    #[error("non-finite loss at step {step} (epoch {epoch}); batch: {}", batch_ids.join(", "))]
    NonFiniteLoss {
        step: usize,
        epoch: usize,
        batch_ids: Vec<String>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("training log {path}: {reason}")]
    Log { path: String, reason: String },
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub lr_main: f64,
    pub lr_backbone: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub accumulation_steps: usize,
    pub lr_step: usize,
    pub lr_gamma: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr_main: 1e-4,
            lr_backbone: 1e-5,
            weight_decay: 1e-4,
            clip_norm: 0.1,
            accumulation_steps: 6,
            lr_step: 10,
            lr_gamma: 0.1,
            epochs: 15,
            batch_size: 6,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr_main > 0.0
            && self.lr_backbone > 0.0
            && self.weight_decay >= 0.0
            && self.clip_norm > 0.0
            && self.accumulation_steps >= 1
            && self.lr_step >= 1
            && self.lr_gamma > 0.0
            && self.lr_gamma <= 1.0
            && self.batch_size >= 1
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(TrainError::InvalidConfig(format!("{self:?}")))
        }
    }
}

/// Loss settings shared by matching and training.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub focal: FocalParams,
    pub weights: CostWeights,
}

/// `(main, backbone)` learning rates for `epoch`.
pub fn lr_schedule(epoch: usize, cfg: &OptimConfig) -> (f64, f64) {
    let decay = cfg.lr_gamma.powi((epoch / cfg.lr_step) as i32);
    (cfg.lr_main * decay, cfg.lr_backbone * decay)
}

pub fn global_norm(grads: &[Vec<f64>]) -> f64 {
    grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
}

/// Rescale so the global L2 norm is at most `clip_norm`; returns the norm
/// before clipping.
pub fn clip_gradients(grads: &mut [Vec<f64>], clip_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > clip_norm {
        let s = clip_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

/// Decoupled-weight-decay Adam state.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamW {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store
            .iter()
            .map(|(_, p)| vec![0.0; p.value.len()])
            .collect();
        AdamW {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Apply one update with `(main, backbone)` learning rates. Returns
    /// `false` and leaves everything untouched if any gradient is non-finite.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &[Vec<f64>],
        lrs: (f64, f64),
        cfg: &OptimConfig,
    ) -> bool {
        assert_eq!(
            grads.len(),
            store.len(),
            "gradient count does not match parameters"
        );
        if grads.iter().flatten().any(|g| !g.is_finite()) {
            warn!(
                "rejected optimizer step {}: non-finite gradient",
                self.t + 1
            );
            return false;
        }
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for (((p, g), m), v) in store
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            let lr = match p.group {
                ParamGroup::Main => lrs.0,
                ParamGroup::Backbone => lrs.1,
            };
            for i in 0..p.value.len() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + cfg.eps);
                p.value[i] -= lr * (cfg.weight_decay * p.value[i] + update);
            }
        }
        true
    }
}

/// One training or evaluation image.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Image,
    pub boxes: Vec<GroundTruthBox>,
}

impl Sample {
    pub fn targets(&self) -> Vec<[f64; 4]> {
        self.boxes.iter().map(GroundTruthBox::as_array).collect()
    }
}

/// Loss of one image without gradients.
pub fn image_loss(
    model: &DetrModel,
    sample: &Sample,
    loss_cfg: &LossConfig,
) -> Result<LossBreakdown> {
    let det = model.predict(&sample.image)?;
    Ok(set_loss(&det, &sample.targets(), loss_cfg.focal, loss_cfg.weights)?.breakdown)
}

/// Loss of one image and the gradient of `weight · total` for every parameter.
pub fn image_gradients(
    model: &DetrModel,
    sample: &Sample,
    loss_cfg: &LossConfig,
    weight: f64,
) -> Result<(LossBreakdown, Vec<Vec<f64>>)> {
    let mut g = Graph::new();
    let out = model.forward(&mut g, &sample.image)?;
    let det = Detections::from_graph(&g, &out);
    let loss = set_loss(&det, &sample.targets(), loss_cfg.focal, loss_cfg.weights)?;
    let d_prob: Vec<f64> = loss.d_prob.iter().map(|d| d * weight).collect();
    let d_boxes: Vec<f64> = loss.d_boxes.iter().flatten().map(|d| d * weight).collect();
    let grads = g.backward(&[(out.probs, &d_prob), (out.boxes, &d_boxes)]);
    Ok((loss.breakdown, grads.param_grads(&model.store)))
}

/// Summed loss and gradients over `samples`, each weighted by `weight`.
/// Images may run in parallel; the reduction is in input order.
pub fn batch_gradients(
    model: &DetrModel,
    samples: &[&Sample],
    loss_cfg: &LossConfig,
    weight: f64,
) -> Result<(Vec<LossBreakdown>, Vec<Vec<f64>>)> {
    let results: Vec<Result<(LossBreakdown, Vec<Vec<f64>>)>> = samples
        .par_iter()
        .map(|s| image_gradients(model, s, loss_cfg, weight))
        .collect();
    let mut total: Vec<Vec<f64>> = model
        .store
        .iter()
        .map(|(_, p)| vec![0.0; p.value.len()])
        .collect();
    let mut losses = Vec::with_capacity(samples.len());
    for r in results {
        let (l, grads) = r?;
        losses.push(l);
        for (t, g) in total.iter_mut().zip(grads) {
            for (a, b) in t.iter_mut().zip(g) {
                *a += b;
            }
        }
    }
    Ok((losses, total))
}

/// Model predictions on `samples` in evaluation form.
pub fn predict_all(model: &DetrModel, samples: &[Sample]) -> Result<Vec<ImageEval>> {
    samples
        .par_iter()
        .map(|s| {
            let det = model.predict(&s.image)?;
            Ok(ImageEval {
                detections: det
                    .boxes
                    .iter()
                    .zip(&det.class_prob)
                    .map(|(&bbox, &score)| ScoredBox { score, bbox })
                    .collect(),
                truths: s
                    .boxes
                    .iter()
                    .map(|b| TruthBox {
                        bbox: b.as_array(),
                        diameter_mm: b.diameter_mm,
                    })
                    .collect(),
            })
        })
        .collect()
}

/// Where to write training artifacts.
#[derive(Debug, Clone, Default)]
pub struct TrainOutputs {
    pub log_csv: Option<PathBuf>,
    pub best_checkpoint: Option<PathBuf>,
    pub last_checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_ap: Option<f64>,
    pub val_f1: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub epochs: Vec<EpochSummary>,
    /// Per applied step, the mean total loss of its window.
    pub step_losses: Vec<f64>,
    pub best_epoch: Option<usize>,
    pub best_model: DetrModel,
    pub final_model: DetrModel,
}

#[derive(Serialize)]
struct LogRow {
    step: usize,
    epoch: usize,
    kind: &'static str,
    loss_class: f64,
    loss_l1: f64,
    loss_giou: f64,
    loss_total: f64,
    lr_main: f64,
    lr_backbone: f64,
    grad_norm: f64,
    val_ap: Option<f64>,
    val_f1: Option<f64>,
}

fn log_err(path: &Path, e: impl std::fmt::Display) -> TrainError {
    TrainError::Log {
        path: path.display().to_string(),
        reason: e.to_string(),
    }
}

/// Train `model` on `train_set`, validating after every epoch on `val_set`
/// and keeping the parameters with the best validation AP.
pub fn train(
    mut model: DetrModel,
    train_set: &[Sample],
    val_set: &[Sample],
    loss_cfg: &LossConfig,
    cfg: &OptimConfig,
    outputs: &TrainOutputs,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptyTrainSet);
    }
    let mut log = match &outputs.log_csv {
        Some(p) => {
            if let Some(dir) = p.parent() {
                fs::create_dir_all(dir).map_err(|e| log_err(p, e))?;
            }
            Some((
                csv::Writer::from_path(p).map_err(|e| log_err(p, e))?,
                p.clone(),
            ))
        }
        None => None,
    };
    let mut opt = AdamW::new(&model.store);
    let window = cfg.batch_size * cfg.accumulation_steps;
    let mut epochs = Vec::new();
    let mut step_losses = Vec::new();
    let mut best: Option<(f64, usize, DetrModel)> = None;
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        let lrs = lr_schedule(epoch, cfg);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng::derived(cfg.seed, &format!("epoch/{epoch}")));
        let mut epoch_sum = 0.0;

        for chunk in order.chunks(window) {
            let weight = 1.0 / chunk.len() as f64;
            let mut grads: Vec<Vec<f64>> = model
                .store
                .iter()
                .map(|(_, p)| vec![0.0; p.value.len()])
                .collect();
            let mut mean = LossBreakdown::default();
            for micro in chunk.chunks(cfg.batch_size) {
                let samples: Vec<&Sample> = micro.iter().map(|&i| &train_set[i]).collect();
                let (losses, g) = batch_gradients(&model, &samples, loss_cfg, weight)?;
                if losses.iter().any(|l| !l.total.is_finite()) {
                    return Err(TrainError::NonFiniteLoss {
                        step,
                        epoch,
                        batch_ids: samples.iter().map(|s| s.id.clone()).collect(),
                    });
                }
                for l in losses {
                    epoch_sum += l.total;
                    mean += l.scaled(weight);
                }
                for (t, gi) in grads.iter_mut().zip(g) {
                    for (a, b) in t.iter_mut().zip(gi) {
                        *a += b;
                    }
                }
            }
            let norm = clip_gradients(&mut grads, cfg.clip_norm);
            opt.step(&mut model.store, &grads, lrs, cfg);
            step_losses.push(mean.total);
            if let Some((w, p)) = &mut log {
                w.serialize(LogRow {
                    step,
                    epoch,
                    kind: "train",
                    loss_class: mean.class,
                    loss_l1: mean.l1,
                    loss_giou: mean.giou,
                    loss_total: mean.total,
                    lr_main: lrs.0,
                    lr_backbone: lrs.1,
                    grad_norm: norm,
                    val_ap: None,
                    val_f1: None,
                })
                .map_err(|e| log_err(p, e))?;
            }
            step += 1;
        }

        let mean_loss = epoch_sum / train_set.len() as f64;
        let (val_ap, val_f1) = if val_set.is_empty() {
            (None, None)
        } else {
            let evals = predict_all(&model, val_set)?;
            let op = metrics::best_threshold(&evals);
            let report =
                metrics::evaluate(&evals, op.threshold).expect("validation set is non-empty");
            (Some(report.overall.ap), Some(report.operating.f1))
        };
        info!(
            "epoch {epoch}: mean loss {mean_loss:.5}, val AP {}, val F1 {}",
            val_ap.map_or("-".into(), |v| format!("{v:.4}")),
            val_f1.map_or("-".into(), |v| format!("{v:.4}"))
        );
        if let Some((w, p)) = &mut log {
            w.serialize(LogRow {
                step,
                epoch,
                kind: "val",
                loss_class: f64::NAN,
                loss_l1: f64::NAN,
                loss_giou: f64::NAN,
                loss_total: mean_loss,
                lr_main: lrs.0,
                lr_backbone: lrs.1,
                grad_norm: f64::NAN,
                val_ap,
                val_f1,
            })
            .map_err(|e| log_err(p, e))?;
            w.flush().map_err(|e| log_err(p, e))?;
        }
        let score = val_ap.unwrap_or(-mean_loss);
        if best.as_ref().is_none_or(|(s, _, _)| score > *s) {
            if let Some(path) = &outputs.best_checkpoint {
                save_checkpoint(&model, path)?;
            }
            best = Some((score, epoch, model.clone()));
        }
        epochs.push(EpochSummary {
            epoch,
            mean_loss,
            val_ap,
            val_f1,
        });
    }
    if let Some(path) = &outputs.last_checkpoint {
        save_checkpoint(&model, path)?;
    }
    let (best_epoch, best_model) = match best {
        Some((_, e, m)) => (Some(e), m),
        None => (None, model.clone()),
    };
    Ok(TrainOutcome {
        epochs,
        step_losses,
        best_epoch,
        best_model,
        final_model: model,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ParamGroup, ParamStore};

    #[test]
    fn schedule_boundaries() {
        let c = OptimConfig::default();
        assert_eq!(lr_schedule(0, &c), (1e-4, 1e-5));
        assert_eq!(lr_schedule(9, &c), (1e-4, 1e-5));
        let (m, b) = lr_schedule(10, &c);
        assert!((m - 1e-5).abs() < 1e-20 && (b - 1e-6).abs() < 1e-21);
    }

    #[test]
    fn clipping() {
        let mut g = vec![vec![0.03, 0.04]];
        assert_eq!(clip_gradients(&mut g, 0.1), 0.05);
        assert_eq!(g, vec![vec![0.03, 0.04]]);
        let mut g = vec![vec![0.6], vec![0.8]];
        clip_gradients(&mut g, 0.1);
        assert!((global_norm(&g) - 0.1).abs() < 1e-9);
    }

    fn quadratic_store(w: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", vec![w.len()], ParamGroup::Main, w.to_vec());
        s
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut s = quadratic_store(&[1.0, -2.0]);
        let before = s.clone();
        let cfg = OptimConfig {
            weight_decay: 0.0,
            ..OptimConfig::default()
        };
        let mut opt = AdamW::new(&s);
        assert!(opt.step(&mut s, &[vec![0.0, 0.0]], (0.1, 0.1), &cfg));
        assert_eq!(s, before);
        assert!(!opt.step(&mut s, &[vec![f64::NAN, 0.0]], (0.1, 0.1), &cfg));
        assert_eq!(s, before);
    }

    #[test]
    fn converges_on_quadratic() {
        // f(w) = (w0 - 3)^2 + 4 (w1 + 1)^2, minimizer (3, -1)
        let mut s = quadratic_store(&[0.0, 0.0]);
        let cfg = OptimConfig {
            weight_decay: 0.0,
            ..OptimConfig::default()
        };
        let mut opt = AdamW::new(&s);
        for i in 0..200 {
            let w = &s.get(crate::model::ParamId(0)).value;
            let g = vec![vec![2.0 * (w[0] - 3.0), 8.0 * (w[1] + 1.0)]];
            let lr = if i < 150 { 0.1 } else { 0.01 };
            opt.step(&mut s, &g, (lr, lr), &cfg);
        }
        let w = &s.get(crate::model::ParamId(0)).value;
        assert!(
            (w[0] - 3.0).abs() < 1e-3 && (w[1] + 1.0).abs() < 1e-3,
            "{w:?}"
        );
    }
}
