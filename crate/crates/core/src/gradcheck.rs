//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::scalar::Real;
use crate::tape::{NodeId, Tape};

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    /// Finite-difference step.
    pub step: f64,
    pub tolerance: f64,
    /// Check at most this many randomly chosen entries per parameter.
    pub max_entries: Option<usize>,
    pub seed: u64,
    /// Multiplier applied to analytic gradients before comparison. Anything
    /// other than 1 deliberately corrupts them (negative control).
    pub analytic_scale: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            max_entries: None,
            seed: 0,
            analytic_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub param: usize,
    pub entries_checked: usize,
    pub max_rel_error: f64,
    pub worst_entry: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() <= self.tolerance
    }
}

fn eval_loss<T, F>(f: &F, params: &[Grid<T>]) -> Result<(Tape<T>, Vec<NodeId>, NodeId)>
where
    T: Real,
    F: Fn(&mut Tape<T>, &[NodeId]) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &ids)?;
    if !tape.value(loss).is_scalar() {
        return Err(Error::shape("grad_check", "function must return a scalar node"));
    }
    Ok((tape, ids, loss))
}

/// Compare the tape gradient of `f` at `params` against central differences.
///
/// `f` receives a fresh tape and the node ids of `params` (recorded as
/// trainable leaves) and must return a scalar node.
pub fn grad_check<T, F>(f: F, params: &[Grid<T>], cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    T: Real,
    F: Fn(&mut Tape<T>, &[NodeId]) -> Result<NodeId>,
{
    if cfg.step <= 0.0 {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let (tape, ids, loss) = eval_loss(&f, params)?;
    let grads = tape.backward(loss)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut work: Vec<Grid<T>> = params.to_vec();
    let h = T::of(cfg.step);
    let mut report = GradCheckReport {
        tolerance: cfg.tolerance,
        params: Vec::with_capacity(params.len()),
    };

    for (pi, id) in ids.iter().enumerate() {
        let n = params[pi].len();
        let analytic = grads.get(*id).cloned().unwrap_or_else(|| {
            let (a, b, c) = params[pi].shape();
            Grid::zeros(a, b, c)
        });
        let entries: Vec<usize> = match cfg.max_entries {
            Some(k) if k < n => {
                let mut v = sample(&mut rng, n, k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..n).collect(),
        };
        let mut check = ParamCheck {
            param: pi,
            entries_checked: entries.len(),
            max_rel_error: 0.0,
            worst_entry: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for &e in &entries {
            let orig = work[pi].as_slice()[e];
            work[pi].as_mut_slice()[e] = orig + h;
            let (tp, _, lp) = eval_loss(&f, &work)?;
            work[pi].as_mut_slice()[e] = orig - h;
            let (tm, _, lm) = eval_loss(&f, &work)?;
            work[pi].as_mut_slice()[e] = orig;
            let plus = tp.value(lp).item().to_f64_lossy();
            let minus = tm.value(lm).item().to_f64_lossy();
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let a = analytic.as_slice()[e].to_f64_lossy() * cfg.analytic_scale;
            let err = rel_error(a, numeric);
            if err > check.max_rel_error || !err.is_finite() {
                check.max_rel_error = if err.is_finite() { err } else { f64::INFINITY };
                check.worst_entry = e;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        report.params.push(check);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::ops;

    fn weighted_sum(tape: &mut Tape<f64>, x: NodeId, w: &Grid<f64>) -> Result<NodeId> {
        let wc = tape.constant(w.clone());
        let m = ops::mul(tape, x, wc)?;
        Ok(ops::sum(tape, m))
    }

    #[test]
    fn rel_error_floor() {
        assert_eq!(rel_error(0.0, 0.0), 0.0);
        assert!((rel_error(1.0, 1.01) - 0.01 / 1.01).abs() < 1e-15);
        assert_eq!(rel_error(1e-10, 0.0), 1e-2);
    }

    #[test]
    fn linear_function_is_exact() {
        let w = Grid::from_fn(3, 3, 1, |y, x, _| (y as f64 - x as f64) * 0.5 + 0.25);
        let p = Grid::from_fn(3, 3, 1, |y, x, _| (y * 3 + x) as f64 * 0.1);
        let report = grad_check(|t, ids| weighted_sum(t, ids[0], &w), &[p], &GradCheckConfig::default()).unwrap();
        assert!(report.max_rel_error() < 1e-10, "{}", report.max_rel_error());
    }

    #[test]
    fn sigmoid_composition_is_accurate() {
        let p = Grid::from_fn(4, 4, 1, |y, x, _| (y as f64 - 1.5) * 0.7 + (x as f64) * 0.3);
        let w = Grid::from_fn(4, 4, 1, |y, x, _| 1.0 + ((y + x) % 3) as f64);
        let f = |t: &mut Tape<f64>, ids: &[NodeId]| {
            let s = ops::sigmoid(t, ids[0]);
            let s2 = ops::mul(t, s, s)?;
            weighted_sum(t, s2, &w)
        };
        let report = grad_check(f, &[p], &GradCheckConfig::default()).unwrap();
        assert!(report.max_rel_error() < 1e-6, "{}", report.max_rel_error());
    }

    #[test]
    fn corrupted_gradient_is_flagged() {
        let p = Grid::from_fn(3, 3, 1, |y, x, _| (y as f64) * 0.2 - (x as f64) * 0.1);
        let w = Grid::filled(3, 3, 1, 1.3);
        let cfg = GradCheckConfig {
            analytic_scale: 1.01,
            ..Default::default()
        };
        let f = |t: &mut Tape<f64>, ids: &[NodeId]| {
            let s = ops::sigmoid(t, ids[0]);
            weighted_sum(t, s, &w)
        };
        let report = grad_check(f, &[p], &cfg).unwrap();
        assert!(!report.passed());
        assert!(report.max_rel_error() > 9e-3);
    }

    #[test]
    fn entry_sampling_limits_work() {
        let p = Grid::filled(10, 10, 1, 0.5);
        let cfg = GradCheckConfig {
            max_entries: Some(7),
            ..Default::default()
        };
        let report = grad_check(|t, ids| Ok(ops::sum(t, ids[0])), &[p], &cfg).unwrap();
        assert_eq!(report.params[0].entries_checked, 7);
        assert!(report.passed());
    }

    #[test]
    fn nonpositive_step_rejected() {
        let cfg = GradCheckConfig {
            step: 0.0,
            ..Default::default()
        };
        assert!(grad_check(|t, ids| Ok(ops::sum(t, ids[0])), &[Grid::<f64>::scalar(1.0)], &cfg).is_err());
    }
}
