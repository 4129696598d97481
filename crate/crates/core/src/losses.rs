//! Heatmap similarity losses.
//!
//! * `L1 = MSE + 1 − SDC` supervises output stage 1 against the Gaussian target.
//! * Stage 2 uses the same loss against a heatmap target (variant 1) or
//!   `1 − Fβ` against a binary mask (variant 2).
//! * The total objective is the unweighted sum of both stage losses.
//!
//! Each loss exists as a tape node (for training) and as a plain function on
//! heatmaps (for reporting); the plain functions evaluate the tape nodes.

use serde::{Deserialize, Serialize};

use crate::codec::Heatmap;
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::scalar::Real;
use crate::tape::{ops, NodeId, Op, Tape};

/// Which target supervises output stage 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Variant {
    /// Heatmap target, `L2 = MSE + 1 − SDC`.
    HeatmapTarget,
    /// Binary mask target, `L2 = 1 − Fβ`.
    BinaryTarget,
}

impl TryFrom<u8> for Variant {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            1 => Ok(Variant::HeatmapTarget),
            2 => Ok(Variant::BinaryTarget),
            _ => Err(format!("variant must be 1 or 2, got {v}")),
        }
    }
}

impl From<Variant> for u8 {
    fn from(v: Variant) -> u8 {
        match v {
            Variant::HeatmapTarget => 1,
            Variant::BinaryTarget => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub beta: f64,
    pub epsilon: f64,
    pub variant: Variant,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            beta: 2.0,
            epsilon: 1e-6,
            variant: Variant::HeatmapTarget,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) || !(self.epsilon > 0.0) {
            return Err(Error::invalid(format!(
                "beta ({}) and epsilon ({}) must be positive",
                self.beta, self.epsilon
            )));
        }
        Ok(())
    }
}

fn check_pair<T: Real>(op: &'static str, p: &Grid<T>, g: &Grid<T>) -> Result<()> {
    if !p.same_shape(g) {
        return Err(Error::shape(op, format!("prediction {:?} vs target {:?}", p.shape(), g.shape())));
    }
    Ok(())
}

struct MseOp;

impl<T: Real> Op<T> for MseOp {
    fn name(&self) -> &'static str {
        "mse"
    }

    fn backward(&self, inputs: &[&Grid<T>], _output: &Grid<T>, grad_out: &Grid<T>, needs: &[bool]) -> Vec<Option<Grid<T>>> {
        let (p, g) = (inputs[0], inputs[1]);
        let scale = T::of(2.0) * grad_out.item() / T::of(p.len() as f64);
        let mut gp = p.clone();
        for (d, &t) in gp.as_mut_slice().iter_mut().zip(g.as_slice()) {
            *d = (*d - t) * scale;
        }
        let gg = needs[1].then(|| gp.map(|v| -v));
        vec![needs[0].then_some(gp), gg]
    }
}

/// Mean of `(p − g)²` as a tape node.
pub fn mse_node<T: Real>(tape: &mut Tape<T>, p: NodeId, g: NodeId) -> Result<NodeId> {
    let (pv, gv) = (tape.value(p), tape.value(g));
    check_pair("mse", pv, gv)?;
    let total: T = pv.as_slice().iter().zip(gv.as_slice()).map(|(&a, &b)| (a - b) * (a - b)).sum();
    let value = Grid::scalar(total / T::of(pv.len() as f64));
    Ok(tape.record(Box::new(MseOp), vec![p, g], value))
}

struct DiceOp<T> {
    eps: T,
}

impl<T: Real> DiceOp<T> {
    fn sums(p: &Grid<T>, g: &Grid<T>) -> (T, T) {
        let (mut inter, mut total) = (T::zero(), T::zero());
        for (&a, &b) in p.as_slice().iter().zip(g.as_slice()) {
            inter += a * b;
            total += a * a + b * b;
        }
        (inter, total)
    }
}

impl<T: Real> Op<T> for DiceOp<T> {
    fn name(&self) -> &'static str {
        "soft_dice"
    }

    fn backward(&self, inputs: &[&Grid<T>], _output: &Grid<T>, grad_out: &Grid<T>, needs: &[bool]) -> Vec<Option<Grid<T>>> {
        let (p, g) = (inputs[0], inputs[1]);
        let (inter, total) = Self::sums(p, g);
        let num = T::of(2.0) * inter + self.eps;
        let den = total + self.eps;
        let go = grad_out.item();
        let two = T::of(2.0);
        // ∂/∂p_i = 2 (g_i · den − num · p_i) / den²
        let partial = |own: &Grid<T>, other: &Grid<T>| {
            let mut out = own.clone();
            for (d, &o) in out.as_mut_slice().iter_mut().zip(other.as_slice()) {
                *d = go * two * (o * den - num * *d) / (den * den);
            }
            out
        };
        vec![needs[0].then(|| partial(p, g)), needs[1].then(|| partial(g, p))]
    }
}

/// Soft Sørensen–Dice coefficient `(2Σpg + ε) / (Σp² + Σg² + ε)` as a tape node.
/// Equals the set form on binary masks and reaches 1 exactly when `p = g`.
pub fn sdc_node<T: Real>(tape: &mut Tape<T>, p: NodeId, g: NodeId, epsilon: f64) -> Result<NodeId> {
    let (pv, gv) = (tape.value(p), tape.value(g));
    check_pair("sdc", pv, gv)?;
    let eps = T::of(epsilon);
    let (inter, total) = DiceOp::sums(pv, gv);
    let value = Grid::scalar((T::of(2.0) * inter + eps) / (total + eps));
    Ok(tape.record(Box::new(DiceOp { eps }), vec![p, g], value))
}

struct FBetaOp<T> {
    beta2: T,
    eps: T,
}

impl<T: Real> FBetaOp<T> {
    /// `(numerator, denominator)` of the smoothed score.
    fn terms(&self, p: &Grid<T>, g: &Grid<T>) -> (T, T) {
        let (mut tp, mut fn_, mut fp) = (T::zero(), T::zero(), T::zero());
        for (&a, &b) in p.as_slice().iter().zip(g.as_slice()) {
            tp += a * b;
            fn_ += (T::one() - a) * b;
            fp += a * (T::one() - b);
        }
        let w = T::one() + self.beta2;
        let num = w * tp + self.eps;
        (num, w * tp + self.beta2 * fn_ + fp + self.eps)
    }
}

impl<T: Real> Op<T> for FBetaOp<T> {
    fn name(&self) -> &'static str {
        "f_beta"
    }

    fn backward(&self, inputs: &[&Grid<T>], _output: &Grid<T>, grad_out: &Grid<T>, needs: &[bool]) -> Vec<Option<Grid<T>>> {
        let (p, g) = (inputs[0], inputs[1]);
        let (num, den) = self.terms(p, g);
        let go = grad_out.item();
        let w = T::one() + self.beta2;
        let d2 = den * den;
        // ∂den/∂p_i = 1 and ∂den/∂g_i = β², independent of the pixel.
        let gp = needs[0].then(|| g.map(|gi| go * (w * gi * den - num) / d2));
        let gg = needs[1].then(|| p.map(|pi| go * (w * pi * den - num * self.beta2) / d2));
        vec![gp, gg]
    }
}

/// Smoothed F-beta score of a soft prediction against a binary mask, as a tape node.
pub fn f_beta_node<T: Real>(tape: &mut Tape<T>, p: NodeId, g: NodeId, beta: f64, epsilon: f64) -> Result<NodeId> {
    let (pv, gv) = (tape.value(p), tape.value(g));
    check_pair("f_beta", pv, gv)?;
    if gv.as_slice().iter().any(|&v| v != T::zero() && v != T::one()) {
        return Err(Error::invalid("f_beta target must be a binary {0, 1} mask"));
    }
    let op = FBetaOp {
        beta2: T::of(beta * beta),
        eps: T::of(epsilon),
    };
    let (num, den) = op.terms(pv, gv);
    let value = Grid::scalar(num / den);
    Ok(tape.record(Box::new(op), vec![p, g], value))
}

/// `MSE + 1 − SDC` as a tape node.
pub fn l1_node<T: Real>(tape: &mut Tape<T>, p: NodeId, g: NodeId, epsilon: f64) -> Result<NodeId> {
    let m = mse_node(tape, p, g)?;
    let d = sdc_node(tape, p, g, epsilon)?;
    let one_minus = ops::affine(tape, d, -T::one(), T::one());
    ops::add(tape, m, one_minus)
}

/// Target for output stage 2; its kind must agree with the loss variant.
#[derive(Debug, Clone, Copy)]
pub enum Stage2Target {
    Heat(NodeId),
    Binary(NodeId),
}

pub fn l2_node<T: Real>(tape: &mut Tape<T>, p: NodeId, target: Stage2Target, cfg: &LossConfig) -> Result<NodeId> {
    cfg.validate()?;
    match (cfg.variant, target) {
        (Variant::HeatmapTarget, Stage2Target::Heat(g)) => l1_node(tape, p, g, cfg.epsilon),
        (Variant::BinaryTarget, Stage2Target::Binary(g)) => {
            let f = f_beta_node(tape, p, g, cfg.beta, cfg.epsilon)?;
            Ok(ops::affine(tape, f, -T::one(), T::one()))
        }
        (v, t) => Err(Error::invalid(format!(
            "variant {} cannot be trained against a {} target",
            u8::from(v),
            match t {
                Stage2Target::Heat(_) => "heatmap",
                Stage2Target::Binary(_) => "binary",
            }
        ))),
    }
}

/// Nodes of the joint objective.
#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub l1: NodeId,
    pub l2: NodeId,
    pub total: NodeId,
}

/// `L1(stage1, g_heat) + L2(stage2, target per variant)`.
pub fn total_node<T: Real>(
    tape: &mut Tape<T>,
    stage1: NodeId,
    stage2: NodeId,
    g_heat: NodeId,
    g_bin: NodeId,
    cfg: &LossConfig,
) -> Result<LossNodes> {
    let l1 = l1_node(tape, stage1, g_heat, cfg.epsilon)?;
    let target = match cfg.variant {
        Variant::HeatmapTarget => Stage2Target::Heat(g_heat),
        Variant::BinaryTarget => Stage2Target::Binary(g_bin),
    };
    let l2 = l2_node(tape, stage2, target, cfg)?;
    let total = ops::add(tape, l1, l2)?;
    Ok(LossNodes { l1, l2, total })
}

fn eval2<T: Real>(
    p: &Heatmap<T>,
    g: &Heatmap<T>,
    f: impl FnOnce(&mut Tape<T>, NodeId, NodeId) -> Result<NodeId>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let pn = tape.constant(p.grid().clone());
    let gn = tape.constant(g.grid().clone());
    let out = f(&mut tape, pn, gn)?;
    Ok(tape.value(out).item().to_f64_lossy())
}

pub fn mse<T: Real>(p: &Heatmap<T>, g: &Heatmap<T>) -> Result<f64> {
    eval2(p, g, |t, a, b| mse_node(t, a, b))
}

pub fn sdc<T: Real>(p: &Heatmap<T>, g: &Heatmap<T>, epsilon: f64) -> Result<f64> {
    eval2(p, g, |t, a, b| sdc_node(t, a, b, epsilon))
}

pub fn loss_l1<T: Real>(p: &Heatmap<T>, g: &Heatmap<T>, epsilon: f64) -> Result<f64> {
    eval2(p, g, |t, a, b| l1_node(t, a, b, epsilon))
}

pub fn f_beta_score<T: Real>(p: &Heatmap<T>, g: &Heatmap<T>, beta: f64, epsilon: f64) -> Result<f64> {
    eval2(p, g, |t, a, b| f_beta_node(t, a, b, beta, epsilon))
}

/// Stage-2 loss. Variant 1 expects a heatmap target, variant 2 a binary one.
pub fn loss_l2<T: Real>(p: &Heatmap<T>, g: &Heatmap<T>, cfg: &LossConfig) -> Result<f64> {
    if cfg.variant == Variant::BinaryTarget && !g.is_binary() {
        return Err(Error::invalid("variant 2 needs a binary stage-2 target"));
    }
    eval2(p, g, |t, a, b| {
        let target = match cfg.variant {
            Variant::HeatmapTarget => Stage2Target::Heat(b),
            Variant::BinaryTarget => Stage2Target::Binary(b),
        };
        l2_node(t, a, target, cfg)
    })
}

pub fn loss_total<T: Real>(
    stage1: &Heatmap<T>,
    stage2: &Heatmap<T>,
    g_heat: &Heatmap<T>,
    g_bin: &Heatmap<T>,
    cfg: &LossConfig,
) -> Result<f64> {
    Ok(loss_l1(stage1, g_heat, cfg.epsilon)?
        + loss_l2(
            stage2,
            match cfg.variant {
                Variant::HeatmapTarget => g_heat,
                Variant::BinaryTarget => g_bin,
            },
            cfg,
        )?)
}
