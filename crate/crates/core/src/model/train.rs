//! Mini-batch training with Adam and plateau decay of the learning rate.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::optim::{adam_step, AdamState, Plateau};
use super::{build_model, forward_nodes, ModelConfig, ModelWeights};
use crate::data::{augment, derived_rng, stable_hash, target_masks, AugmentConfig, Sample};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::losses::{total_node, LossNodes};
use crate::scalar::Real;
use crate::tape::{NodeId, Tape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    /// Relative loss improvement that counts as progress.
    pub plateau_threshold: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Random augmentation of every training draw; `None` trains on the raw samples.
    pub augmentation: Option<AugmentConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            plateau_factor: 0.1,
            plateau_patience: 10,
            plateau_threshold: 1e-4,
            epochs: 50,
            batch_size: 2,
            seed: 0,
            augmentation: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return Err(Error::invalid(format!("plateau_factor must lie in (0, 1), got {}", self.plateau_factor)));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::invalid("Adam betas must lie in [0, 1) and eps must be positive"));
        }
        if self.batch_size == 0 || self.plateau_patience == 0 {
            return Err(Error::invalid("batch_size and plateau_patience must be positive"));
        }
        if let Some(a) = &self.augmentation {
            a.validate()?;
        }
        Ok(())
    }
}

/// The single JSON document that drives an experiment.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s)?;
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config always serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_l1: f64,
    pub loss_l2: f64,
    /// Learning rate used during this epoch.
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutput<T: Real = f64> {
    pub weights: ModelWeights<T>,
    pub log: Vec<EpochLog>,
}

/// Training log as CSV: `epoch,loss_total,loss_l1,loss_l2,lr`.
pub fn log_csv(log: &[EpochLog]) -> String {
    let mut out = String::from("epoch,loss_total,loss_l1,loss_l2,lr\n");
    for e in log {
        writeln!(out, "{},{},{},{},{}", e.epoch, e.loss_total, e.loss_l1, e.loss_l2, e.lr).expect("string write");
    }
    out
}

/// Loss graph for one image: parameters are the given nodes, targets become constants.
pub fn loss_graph<T: Real>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    params: &[NodeId],
    image: &Grid<T>,
    g_heat: &Grid<T>,
    g_bin: &Grid<T>,
) -> Result<LossNodes> {
    let x = tape.constant(image.clone());
    let out = forward_nodes(tape, cfg, params, x)?;
    let gh = tape.constant(g_heat.clone());
    let gb = tape.constant(g_bin.clone());
    total_node(tape, out.stage1, out.stage2, gh, gb, &cfg.loss_config())
}

struct Item<T: Real> {
    image: Grid<T>,
    g_heat: Grid<T>,
    g_bin: Grid<T>,
}

fn prepare<T: Real>(sample: &Sample, cfg: &ModelConfig) -> Result<Item<T>> {
    let (h, b) = target_masks::<T>(&sample.points, &cfg.target_distribution())?;
    Ok(Item {
        image: sample.image.cast(),
        g_heat: h.into_grid(),
        g_bin: b.into_grid(),
    })
}

struct ItemResult<T: Real> {
    l1: f64,
    l2: f64,
    total: f64,
    grads: Vec<Grid<T>>,
}

fn item_step<T: Real>(weights: &ModelWeights<T>, cfg: &ModelConfig, item: &Item<T>) -> Result<ItemResult<T>> {
    let mut tape = Tape::new();
    let params: Vec<NodeId> = weights.grids().map(|g| tape.param(g.clone())).collect();
    let loss = loss_graph(&mut tape, cfg, &params, &item.image, &item.g_heat, &item.g_bin)?;
    let total = tape.value(loss.total).item().to_f64_lossy();
    let (l1, l2) = (tape.value(loss.l1).item().to_f64_lossy(), tape.value(loss.l2).item().to_f64_lossy());
    if !total.is_finite() {
        return Ok(ItemResult { l1, l2, total, grads: Vec::new() });
    }
    let mut g = tape.backward(loss.total)?;
    let grads = params
        .iter()
        .zip(weights.grids())
        .map(|(&id, w)| {
            g.take(id).unwrap_or_else(|| {
                let (a, b, c) = w.shape();
                Grid::zeros(a, b, c)
            })
        })
        .collect();
    Ok(ItemResult { l1, l2, total, grads })
}

/// Train from scratch. Fully determined by the samples, both configs and `train_cfg.seed`.
pub fn train<T: Real>(samples: &[Sample], model_cfg: &ModelConfig, train_cfg: &TrainConfig) -> Result<TrainOutput<T>> {
    train_with(samples, model_cfg, train_cfg, |_, _| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with<T: Real>(
    samples: &[Sample],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog, &ModelWeights<T>),
) -> Result<TrainOutput<T>> {
    model_cfg.validate()?;
    train_cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    for s in samples {
        let (h, w, c) = s.image.shape();
        if (h, w, c) != (model_cfg.input_height, model_cfg.input_width, model_cfg.input_channels) {
            return Err(Error::shape(
                "train",
                format!(
                    "sample {} is {h}x{w}x{c}, model expects {}x{}x{}",
                    s.sample_id, model_cfg.input_height, model_cfg.input_width, model_cfg.input_channels
                ),
            ));
        }
    }

    let mut weights = build_model::<T>(model_cfg, train_cfg.seed)?;
    let mut state = AdamState::new(weights.grids());
    let mut plateau = Plateau::from_config(train_cfg);
    let mut lr = train_cfg.learning_rate;
    let mut step = 0u64;
    let mut log = Vec::with_capacity(train_cfg.epochs);

    let fixed: Option<Vec<Item<T>>> = match train_cfg.augmentation {
        None => Some(samples.iter().map(|s| prepare(s, model_cfg)).collect::<Result<_>>()?),
        Some(_) => None,
    };

    for epoch in 1..=train_cfg.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut derived_rng(train_cfg.seed, 1, epoch as u64));
        let (mut sum_total, mut sum_l1, mut sum_l2) = (0.0, 0.0, 0.0);

        for (batch, chunk) in order.chunks(train_cfg.batch_size).enumerate() {
            let mut acc: Option<Vec<Grid<T>>> = None;
            for &i in chunk {
                let owned;
                let item = match (&fixed, &train_cfg.augmentation) {
                    (Some(items), _) => &items[i],
                    (None, Some(aug)) => {
                        let s = &samples[i];
                        let mut rng = derived_rng(train_cfg.seed ^ stable_hash(&s.sample_id), 2, epoch as u64);
                        owned = prepare(&augment(s, aug, &mut rng)?, model_cfg)?;
                        &owned
                    }
                    (None, None) => unreachable!("fixed items exist without augmentation"),
                };
                let r = item_step(&weights, model_cfg, item)?;
                if !r.total.is_finite() || r.grads.iter().any(|g| !g.is_finite()) {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        batch,
                        samples: chunk.iter().map(|&j| samples[j].sample_id.as_str()).collect::<Vec<_>>().join(", "),
                    });
                }
                sum_total += r.total;
                sum_l1 += r.l1;
                sum_l2 += r.l2;
                match &mut acc {
                    None => acc = Some(r.grads),
                    Some(a) => a.iter_mut().zip(&r.grads).for_each(|(a, g)| a.add_assign(g)),
                }
            }
            let mut grads = acc.expect("non-empty batch");
            let inv = T::of(1.0 / chunk.len() as f64);
            grads.iter_mut().for_each(|g| g.scale(inv));
            step += 1;
            adam_step(weights.grids_mut(), &grads, &mut state, step, lr, train_cfg)?;
        }

        let n = samples.len() as f64;
        let entry = EpochLog {
            epoch,
            loss_total: sum_total / n,
            loss_l1: sum_l1 / n,
            loss_l2: sum_l2 / n,
            lr,
        };
        on_epoch(&entry, &weights);
        log.push(entry);
        lr = plateau.step(entry.loss_total, lr);
    }
    Ok(TrainOutput { weights, log })
}
