//! Adam and reduce-on-plateau.

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::scalar::Real;

use super::train::TrainConfig;

/// First and second moment estimates, one pair per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T: Real = f64> {
    pub m: Vec<Grid<T>>,
    pub v: Vec<Grid<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Grid<T>>) -> Self {
        let zeros: Vec<Grid<T>> = params
            .into_iter()
            .map(|g| {
                let (h, w, c) = g.shape();
                Grid::zeros(h, w, c)
            })
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update at step `t` (1-based).
pub fn adam_step<'a, T: Real>(
    params: impl IntoIterator<Item = &'a mut Grid<T>>,
    grads: &[Grid<T>],
    state: &mut AdamState<T>,
    t: u64,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    if t == 0 {
        return Err(Error::invalid("Adam step index starts at 1"));
    }
    let params: Vec<&mut Grid<T>> = params.into_iter().collect();
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape(
            "adam_step",
            format!("{} parameters, {} gradients, {} moment slots", params.len(), grads.len(), state.m.len()),
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if !p.same_shape(g) || !p.same_shape(&state.m[i]) {
            return Err(Error::shape("adam_step", format!("parameter {i}: {:?} vs gradient {:?}", p.shape(), g.shape())));
        }
    }
    let (b1, b2) = (T::of(cfg.adam_beta1), T::of(cfg.adam_beta2));
    let c1 = T::of(1.0 - cfg.adam_beta1.powf(t as f64));
    let c2 = T::of(1.0 - cfg.adam_beta2.powf(t as f64));
    let (lr, eps, one) = (T::of(lr), T::of(cfg.adam_eps), T::one());
    for (i, p) in params.into_iter().enumerate() {
        let m = state.m[i].as_mut_slice();
        let v = state.v[i].as_mut_slice();
        for (j, (w, &g)) in p.as_mut_slice().iter_mut().zip(grads[i].as_slice()).enumerate() {
            m[j] = b1 * m[j] + (one - b1) * g;
            v[j] = b2 * v[j] + (one - b2) * g * g;
            let mh = m[j] / c1;
            let vh = v[j] / c2;
            *w -= lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

/// Reduce-on-plateau tracker for a minimized quantity.
#[derive(Debug, Clone, PartialEq)]
pub struct Plateau {
    pub best: f64,
    pub bad_epochs: usize,
    pub patience: usize,
    pub factor: f64,
    /// Relative improvement required to reset the counter.
    pub threshold: f64,
}

impl Plateau {
    pub fn new(patience: usize, factor: f64, threshold: f64) -> Self {
        Self {
            best: f64::INFINITY,
            bad_epochs: 0,
            patience,
            factor,
            threshold,
        }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self::new(cfg.plateau_patience, cfg.plateau_factor, cfg.plateau_threshold)
    }

    /// Record one epoch's loss and return the learning rate for the next epoch.
    pub fn step(&mut self, loss: f64, lr: f64) -> f64 {
        if self.best.is_infinite() || loss < self.best - self.threshold * self.best.abs() {
            self.best = loss;
            self.bad_epochs = 0;
            return lr;
        }
        self.bad_epochs += 1;
        if self.bad_epochs >= self.patience {
            self.bad_epochs = 0;
            lr * self.factor
        } else {
            lr
        }
    }
}

/// Learning rate after replaying `history` through a fresh plateau tracker.
pub fn lr_schedule(history: &[f64], current_lr: f64, cfg: &TrainConfig) -> Result<f64> {
    if history.is_empty() {
        return Err(Error::invalid("loss history is empty"));
    }
    let mut plateau = Plateau::from_config(cfg);
    Ok(history.iter().fold(current_lr, |lr, &loss| plateau.step(loss, lr)))
}
