//! Detection scoring: radius-constrained greedy matching, PPV/TPR/F1, RMSE.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::codec::{Point, PointSet};
use crate::error::{Error, Result};

/// One accepted prediction/ground-truth pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Match {
    pub pred: usize,
    pub gt: usize,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchReport {
    pub radius: f64,
    pub matches: Vec<Match>,
    /// False positives.
    pub unmatched_pred: Vec<usize>,
    /// False negatives.
    pub unmatched_gt: Vec<usize>,
}

impl MatchReport {
    pub fn tp(&self) -> usize {
        self.matches.len()
    }

    pub fn fp(&self) -> usize {
        self.unmatched_pred.len()
    }

    pub fn fn_(&self) -> usize {
        self.unmatched_gt.len()
    }
}

/// Greedy matching: all pairs closer than `radius` in ascending distance
/// (ties by gt index, then pred index); a pair is accepted when both ends are free.
pub fn match_points(pred: &[Point], gt: &[Point], radius: f64) -> Result<MatchReport> {
    if !(radius > 0.0) {
        return Err(Error::invalid(format!("match radius must be positive, got {radius}")));
    }
    let mut pairs = Vec::new();
    for (g, gp) in gt.iter().enumerate() {
        for (p, pp) in pred.iter().enumerate() {
            let d = pp.distance(gp);
            if d < radius {
                pairs.push(Match { pred: p, gt: g, distance: d });
            }
        }
    }
    pairs.sort_by(|a, b| a.distance.total_cmp(&b.distance).then(a.gt.cmp(&b.gt)).then(a.pred.cmp(&b.pred)));
    let mut pred_used = vec![false; pred.len()];
    let mut gt_used = vec![false; gt.len()];
    let mut matches = Vec::new();
    for m in pairs {
        if !pred_used[m.pred] && !gt_used[m.gt] {
            pred_used[m.pred] = true;
            gt_used[m.gt] = true;
            matches.push(m);
        }
    }
    Ok(MatchReport {
        radius,
        matches,
        unmatched_pred: (0..pred.len()).filter(|&i| !pred_used[i]).collect(),
        unmatched_gt: (0..gt.len()).filter(|&i| !gt_used[i]).collect(),
    })
}

/// `(tp, fp, fn)` to `(ppv, tpr, f1)`. An empty denominator yields 1 when the
/// opposite error count is 0 and 0 otherwise.
pub fn rates(tp: usize, fp: usize, fn_: usize) -> (f64, f64, f64) {
    let ratio = |den: usize, other: usize| {
        if den == 0 {
            if other == 0 {
                1.0
            } else {
                0.0
            }
        } else {
            tp as f64 / den as f64
        }
    };
    let ppv = ratio(tp + fp, fn_);
    let tpr = ratio(tp + fn_, fp);
    (ppv, tpr, f1_score(ppv, tpr))
}

pub fn f1_score(ppv: f64, tpr: f64) -> f64 {
    if ppv + tpr == 0.0 {
        0.0
    } else {
        2.0 * ppv * tpr / (ppv + tpr)
    }
}

pub fn image_metrics(report: &MatchReport) -> (f64, f64, f64) {
    rates(report.tp(), report.fp(), report.fn_())
}

/// Localization error of one image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Localization {
    /// Root mean square of each prediction's distance to its nearest ground truth.
    pub rmse: f64,
    /// Plain mean of the same distances.
    pub mean_min_dist: f64,
}

/// Outcome of [`rmse_localization`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LocalizationOutcome {
    Value(Localization),
    /// No predictions: the image is excluded from the average.
    NoPredictions,
    /// Predictions but no ground truth: undefined, counted separately.
    NoGroundTruth,
}

impl LocalizationOutcome {
    pub fn value(&self) -> Option<Localization> {
        match self {
            LocalizationOutcome::Value(v) => Some(*v),
            _ => None,
        }
    }
}

pub fn rmse_localization(pred: &[Point], gt: &[Point]) -> LocalizationOutcome {
    if pred.is_empty() {
        return LocalizationOutcome::NoPredictions;
    }
    if gt.is_empty() {
        return LocalizationOutcome::NoGroundTruth;
    }
    let d: Vec<f64> = pred
        .iter()
        .map(|p| gt.iter().map(|g| p.distance(g)).fold(f64::INFINITY, f64::min))
        .collect();
    let n = d.len() as f64;
    LocalizationOutcome::Value(Localization {
        rmse: (d.iter().map(|v| v * v).sum::<f64>() / n).sqrt(),
        mean_min_dist: d.iter().sum::<f64>() / n,
    })
}

/// Per-image evaluation at one radius.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageEval {
    pub report: MatchReport,
    pub localization: LocalizationOutcome,
}

pub fn evaluate_image(pred: &PointSet, gt: &PointSet, radius: f64) -> Result<ImageEval> {
    Ok(ImageEval {
        report: match_points(pred.points(), gt.points(), radius)?,
        localization: rmse_localization(pred.points(), gt.points()),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    /// Pool TP/FP/FN over images, then compute rates once.
    Micro,
    /// Average per-image rates.
    Macro,
}

impl Pooling {
    pub fn as_str(&self) -> &'static str {
        match self {
            Pooling::Micro => "micro",
            Pooling::Macro => "macro",
        }
    }
}

impl std::str::FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "micro" => Ok(Pooling::Micro),
            "macro" => Ok(Pooling::Macro),
            _ => Err(Error::invalid(format!("pooling mode must be micro or macro, got {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub radius: f64,
    pub mode: Pooling,
    pub ppv: f64,
    pub tpr: f64,
    pub f1: f64,
    pub rmse: Option<f64>,
    pub mean_min_dist: Option<f64>,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub images_with_predictions: usize,
    /// Images with predictions but no ground truth.
    pub images_without_gt: usize,
    pub images_total: usize,
}

pub fn aggregate(per_image: &[ImageEval], mode: Pooling) -> Result<MetricsReport> {
    let first = per_image.first().ok_or_else(|| Error::invalid("cannot aggregate zero images"))?;
    let radius = first.report.radius;
    let (tp, fp, fn_) = per_image.iter().fold((0, 0, 0), |(a, b, c), e| {
        (a + e.report.tp(), b + e.report.fp(), c + e.report.fn_())
    });
    let (ppv, tpr, f1) = match mode {
        Pooling::Micro => rates(tp, fp, fn_),
        Pooling::Macro => {
            let n = per_image.len() as f64;
            let (p, t) = per_image.iter().fold((0.0, 0.0), |(p, t), e| {
                let (pp, tt, _) = image_metrics(&e.report);
                (p + pp, t + tt)
            });
            let (p, t) = (p / n, t / n);
            (p, t, f1_score(p, t))
        }
    };
    let locs: Vec<Localization> = per_image.iter().filter_map(|e| e.localization.value()).collect();
    let mean = |f: fn(&Localization) -> f64| (!locs.is_empty()).then(|| locs.iter().map(f).sum::<f64>() / locs.len() as f64);
    Ok(MetricsReport {
        radius,
        mode,
        ppv,
        tpr,
        f1,
        rmse: mean(|l| l.rmse),
        mean_min_dist: mean(|l| l.mean_min_dist),
        tp,
        fp,
        fn_,
        images_with_predictions: locs.len(),
        images_without_gt: per_image
            .iter()
            .filter(|e| e.localization == LocalizationOutcome::NoGroundTruth)
            .count(),
        images_total: per_image.len(),
    })
}

pub const DEFAULT_RADII: [f64; 3] = [6.0, 8.0, 10.0];

/// Metrics for every radius and pooling mode, radius-major.
pub fn radius_sweep(pairs: &[(PointSet, PointSet)], radii: &[f64], modes: &[Pooling]) -> Result<Vec<MetricsReport>> {
    if radii.is_empty() || radii.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::invalid(format!("radii must be non-empty and strictly ascending, got {radii:?}")));
    }
    let mut out = Vec::with_capacity(radii.len() * modes.len());
    for &r in radii {
        let evals: Vec<ImageEval> = pairs.iter().map(|(p, g)| evaluate_image(p, g, r)).collect::<Result<_>>()?;
        for &m in modes {
            out.push(aggregate(&evals, m)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClosePointStats {
    pub close_total: usize,
    pub close_matched: usize,
    pub far_total: usize,
    pub far_matched: usize,
}

impl ClosePointStats {
    /// `None` when the subset is empty.
    pub fn tp_rate_close(&self) -> Option<f64> {
        (self.close_total > 0).then(|| self.close_matched as f64 / self.close_total as f64)
    }

    pub fn tp_rate_far(&self) -> Option<f64> {
        (self.far_total > 0).then(|| self.far_matched as f64 / self.far_total as f64)
    }
}

/// Split ground truth into points with a neighbour closer than `closeness`
/// (inclusive) and the rest, and count matches in each subset at `radius`.
pub fn close_point_analysis(pairs: &[(PointSet, PointSet)], closeness: f64, radius: f64) -> Result<ClosePointStats> {
    let mut s = ClosePointStats {
        close_total: 0,
        close_matched: 0,
        far_total: 0,
        far_matched: 0,
    };
    for (pred, gt) in pairs {
        let report = match_points(pred.points(), gt.points(), radius)?;
        let mut matched = vec![false; gt.len()];
        for m in &report.matches {
            matched[m.gt] = true;
        }
        let g = gt.points();
        for (i, p) in g.iter().enumerate() {
            let close = g.iter().enumerate().any(|(j, q)| j != i && p.distance(q) <= closeness);
            let (total, hit) = if close {
                (&mut s.close_total, &mut s.close_matched)
            } else {
                (&mut s.far_total, &mut s.far_matched)
            };
            *total += 1;
            *hit += matched[i] as usize;
        }
    }
    Ok(s)
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

/// Metrics as CSV (header plus one row per report).
pub fn metrics_csv(reports: &[MetricsReport]) -> String {
    let mut out = String::from("radius,mode,ppv,tpr,f1,rmse,mean_min_dist,images_with_predictions,images_total\n");
    for r in reports {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.radius,
            r.mode.as_str(),
            r.ppv,
            r.tpr,
            r.f1,
            opt(r.rmse),
            opt(r.mean_min_dist),
            r.images_with_predictions,
            r.images_total
        )
        .expect("string write");
    }
    out
}

/// Per-image match dump entry with coordinates, for overlays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchDump {
    pub image: String,
    pub radius: f64,
    pub true_positives: Vec<DumpPair>,
    pub false_positives: Vec<[f64; 2]>,
    pub false_negatives: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DumpPair {
    pub pred: [f64; 2],
    pub gt: [f64; 2],
    pub distance: f64,
}

impl MatchDump {
    pub fn new(image: impl Into<String>, pred: &PointSet, gt: &PointSet, report: &MatchReport) -> Self {
        let xy = |p: &Point| [p.x, p.y];
        Self {
            image: image.into(),
            radius: report.radius,
            true_positives: report
                .matches
                .iter()
                .map(|m| DumpPair {
                    pred: xy(&pred.points()[m.pred]),
                    gt: xy(&gt.points()[m.gt]),
                    distance: m.distance,
                })
                .collect(),
            false_positives: report.unmatched_pred.iter().map(|&i| xy(&pred.points()[i])).collect(),
            false_negatives: report.unmatched_gt.iter().map(|&i| xy(&gt.points()[i])).collect(),
        }
    }
}
