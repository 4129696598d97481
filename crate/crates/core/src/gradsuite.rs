//! Named gradient-check suites over every differentiable building block.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::codec::{encode, Distribution, Point, PointSet};
use crate::error::{Error, Result};
use crate::gradcheck::{grad_check, GradCheckConfig};
use crate::grid::Grid;
use crate::layers::{conv_soft_argmax, gaussian_filter, GaussianLayerSpec, SoftArgmaxSpec};
use crate::losses::{f_beta_node, l1_node, mse_node, sdc_node, Variant};
use crate::model::train::loss_graph;
use crate::model::{build_model, ModelConfig};
use crate::tape::ops::{self, ConvSpec};
use crate::tape::{NodeId, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    Ops,
    Layers,
    Model,
}

impl Scope {
    pub fn default_tolerance(self) -> f64 {
        match self {
            Scope::Ops | Scope::Layers => 1e-4,
            Scope::Model => 1e-3,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Scope::Ops => "ops",
            Scope::Layers => "layers",
            Scope::Model => "model",
        }
    }
}

impl std::str::FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ops" => Ok(Scope::Ops),
            "layers" => Ok(Scope::Layers),
            "model" => Ok(Scope::Model),
            _ => Err(Error::invalid(format!("unknown gradcheck scope {s:?} (ops, layers, model)"))),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct SuiteOptions {
    /// Overrides the per-scope tolerance.
    pub tolerance: Option<f64>,
    /// Corrupt the analytic gradient of this entry (negative control).
    pub fault: Option<String>,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteEntry {
    pub scope: Scope,
    pub name: String,
    pub entries_checked: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

type Loss = Box<dyn Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId>>;
type ParamGen = Box<dyn Fn(&mut ChaCha8Rng) -> Vec<Grid<f64>>>;

struct Case {
    name: String,
    /// Parameter values for an attempt; retried until kinks are far enough away.
    params: ParamGen,
    loss: Loss,
    max_entries: Option<usize>,
}

const MIN_KINK_MARGIN: f64 = 1e-3;
const MAX_ATTEMPTS: usize = 500;

fn normal(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize, scale: f64) -> Grid<f64> {
    let data = (0..h * w * c).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
    Grid::from_vec(h, w, c, data).expect("finite samples")
}

fn uniform(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize, lo: f64, hi: f64) -> Grid<f64> {
    Grid::from_fn(h, w, c, |_, _, _| rng.random_range(lo..hi))
}

/// `Σ w ⊙ x` with fixed pseudo-random weights, so every output entry matters differently.
fn probe(tape: &mut Tape<f64>, x: NodeId) -> Result<NodeId> {
    let (h, w, c) = tape.value(x).shape();
    let mut i = 0u32;
    let weights = Grid::from_fn(h, w, c, |_, _, _| {
        i += 1;
        (i.wrapping_mul(2654435761) >> 16) as f64 / 65536.0 + 0.25
    });
    let wn = tape.constant(weights);
    let m = ops::mul(tape, x, wn)?;
    Ok(ops::sum(tape, m))
}

fn case(
    name: &str,
    params: impl Fn(&mut ChaCha8Rng) -> Vec<Grid<f64>> + 'static,
    loss: impl Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId> + 'static,
) -> Case {
    Case {
        name: name.to_string(),
        params: Box::new(params),
        loss: Box::new(loss),
        max_entries: None,
    }
}

fn binary_mask(h: usize, w: usize, pts: &[(f64, f64)]) -> Grid<f64> {
    let ps = PointSet::new(h, w, pts.iter().map(|&(x, y)| Point::new(x, y)).collect()).expect("in bounds");
    encode::<f64>(&ps, &Distribution::Binary).expect("binary encode").into_grid()
}

fn ops_cases() -> Vec<Case> {
    let conv = |stride: usize, padding: usize| {
        move |t: &mut Tape<f64>, ids: &[NodeId]| {
            let y = ops::conv2d(t, ids[0], &ConvSpec { kernel: ids[1], bias: ids[2], stride, padding })?;
            probe(t, y)
        }
    };
    let conv_params = |rng: &mut ChaCha8Rng| vec![normal(rng, 6, 7, 2, 1.0), normal(rng, 3, 3, 2 * 3, 0.5), normal(rng, 1, 1, 3, 0.5)];
    let g_bin = binary_mask(6, 6, &[(1.0, 1.0), (4.0, 3.0)]);
    let g_heat = encode::<f64>(
        &PointSet::new(6, 6, vec![Point::new(1.2, 1.0), Point::new(4.0, 3.6)]).expect("in bounds"),
        &Distribution::Gaussian { sigma1: 1.0 },
    )
    .expect("encode")
    .into_grid();
    let (gb1, gh1, gh2) = (g_bin.clone(), g_heat.clone(), g_heat.clone());
    let prob = |rng: &mut ChaCha8Rng| vec![uniform(rng, 6, 6, 1, 0.05, 0.95)];
    vec![
        case("conv2d", conv_params, conv(1, 1)),
        case("conv2d_stride2", conv_params, conv(2, 0)),
        case(
            "conv2d_pointwise",
            |rng| vec![normal(rng, 4, 5, 3, 1.0), normal(rng, 1, 1, 3 * 2, 0.5), normal(rng, 1, 1, 2, 0.5)],
            conv(1, 0),
        ),
        case("relu", |rng| vec![normal(rng, 5, 5, 2, 1.0)], |t, ids| {
            let y = ops::relu(t, ids[0]);
            probe(t, y)
        }),
        case("sigmoid", |rng| vec![normal(rng, 5, 5, 2, 2.0)], |t, ids| {
            let y = ops::sigmoid(t, ids[0]);
            probe(t, y)
        }),
        case("maxpool2", |rng| vec![normal(rng, 6, 8, 2, 1.0)], |t, ids| {
            let y = ops::maxpool2(t, ids[0])?;
            probe(t, y)
        }),
        case("upsample_nearest", |rng| vec![normal(rng, 3, 4, 2, 1.0)], |t, ids| {
            let y = ops::upsample_nearest(t, ids[0]);
            probe(t, y)
        }),
        case("concat_channels", |rng| vec![normal(rng, 4, 4, 2, 1.0), normal(rng, 4, 4, 3, 1.0)], |t, ids| {
            let y = ops::concat_channels(t, ids[0], ids[1])?;
            probe(t, y)
        }),
        case("add", |rng| vec![normal(rng, 4, 4, 2, 1.0), normal(rng, 4, 4, 2, 1.0)], |t, ids| {
            let y = ops::add(t, ids[0], ids[1])?;
            probe(t, y)
        }),
        case("mul", |rng| vec![normal(rng, 4, 4, 2, 1.0), normal(rng, 4, 4, 2, 1.0)], |t, ids| {
            let y = ops::mul(t, ids[0], ids[1])?;
            probe(t, y)
        }),
        case("affine", |rng| vec![normal(rng, 4, 4, 1, 1.0)], |t, ids| {
            let y = ops::affine(t, ids[0], -1.7, 0.3);
            probe(t, y)
        }),
        case("sum", |rng| vec![normal(rng, 4, 4, 3, 1.0)], |t, ids| {
            let s = ops::sum(t, ids[0]);
            let sq = ops::mul(t, s, s)?;
            Ok(sq)
        }),
        case("mse", prob, move |t, ids| {
            let g = t.constant(gh1.clone());
            mse_node(t, ids[0], g)
        }),
        case("soft_dice", prob, move |t, ids| {
            let g = t.constant(gh2.clone());
            sdc_node(t, ids[0], g, 1e-6)
        }),
        case("f_beta", prob, move |t, ids| {
            let g = t.constant(gb1.clone());
            f_beta_node(t, ids[0], g, 2.0, 1e-6)
        }),
        case("loss_l1", prob, move |t, ids| {
            let g = t.constant(g_heat.clone());
            l1_node(t, ids[0], g, 1e-6)
        }),
    ]
}

fn layer_cases() -> Vec<Case> {
    let mut out = Vec::new();
    for sigma2 in [1.0, 2.0] {
        out.push(case(
            &format!("gaussian_filter_s{sigma2}"),
            |rng| vec![uniform(rng, 9, 10, 1, 0.0, 1.0)],
            move |t, ids| {
                let y = gaussian_filter(t, ids[0], &GaussianLayerSpec::new(sigma2))?;
                probe(t, y)
            },
        ));
    }
    for temperature in [0.1, 1.0] {
        out.push(case(
            &format!("conv_soft_argmax_t{temperature}"),
            |rng| vec![uniform(rng, 7, 8, 1, 0.0, 1.0)],
            move |t, ids| {
                let y = conv_soft_argmax(t, ids[0], &SoftArgmaxSpec::with_temperature(temperature))?;
                probe(t, y)
            },
        ));
    }
    out.push(case(
        "gaussian_then_soft_argmax",
        |rng| vec![normal(rng, 8, 8, 1, 2.0)],
        |t, ids| {
            let s = ops::sigmoid(t, ids[0]);
            let g = gaussian_filter(t, s, &GaussianLayerSpec::new(1.0))?;
            let y = conv_soft_argmax(t, g, &SoftArgmaxSpec::default())?;
            probe(t, y)
        },
    ));
    out
}

fn model_cases() -> Vec<Case> {
    [Variant::HeatmapTarget, Variant::BinaryTarget]
        .into_iter()
        .map(|variant| {
            let cfg = ModelConfig {
                depth: 1,
                base_channels: 4,
                input_height: 16,
                input_width: 16,
                variant,
                ..ModelConfig::default()
            };
            let points = PointSet::new(16, 16, vec![Point::new(4.3, 5.0), Point::new(11.0, 10.6)]).expect("in bounds");
            let g_heat = encode::<f64>(&points, &cfg.target_distribution()).expect("encode").into_grid();
            let g_bin = encode::<f64>(&points, &Distribution::Binary).expect("encode").into_grid();
            let image = Grid::from_fn(16, 16, 3, |y, x, c| ((y * 7 + x * 3 + c * 5) % 17) as f64 / 16.0);
            let build_cfg = cfg.clone();
            Case {
                name: format!("model_v{}_total", u8::from(variant)),
                params: Box::new(move |rng| {
                    build_model::<f64>(&build_cfg, rng.random())
                        .expect("valid config")
                        .grids()
                        .cloned()
                        .collect()
                }),
                loss: Box::new(move |t, ids| Ok(loss_graph(t, &cfg, ids, &image, &g_heat, &g_bin)?.total)),
                max_entries: Some(4),
            }
        })
        .collect()
}

fn run_case(scope: Scope, case: &Case, opts: &SuiteOptions, index: usize) -> Result<SuiteEntry> {
    let tolerance = opts.tolerance.unwrap_or_else(|| scope.default_tolerance());
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(1000 * index as u64));
    let mut params = None;
    for _ in 0..MAX_ATTEMPTS {
        let candidate = (case.params)(&mut rng);
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = candidate.iter().map(|p| tape.param(p.clone())).collect();
        (case.loss)(&mut tape, &ids)?;
        if tape.kink_margin().is_none_or(|m| m >= MIN_KINK_MARGIN) {
            params = Some(candidate);
            break;
        }
    }
    let params = params.ok_or_else(|| {
        Error::invalid(format!("{}: no input with kink margin >= {MIN_KINK_MARGIN} in {MAX_ATTEMPTS} draws", case.name))
    })?;
    let cfg = GradCheckConfig {
        tolerance,
        max_entries: case.max_entries,
        seed: opts.seed,
        analytic_scale: if opts.fault.as_deref() == Some(case.name.as_str()) { 1.5 } else { 1.0 },
        ..GradCheckConfig::default()
    };
    let report = grad_check(&case.loss, &params, &cfg)?;
    Ok(SuiteEntry {
        scope,
        name: case.name.clone(),
        entries_checked: report.params.iter().map(|p| p.entries_checked).sum(),
        max_rel_error: report.max_rel_error(),
        tolerance,
        passed: report.passed(),
    })
}

/// Names of the entries a scope runs.
pub fn entry_names(scope: Scope) -> Vec<String> {
    cases(scope).into_iter().map(|c| c.name).collect()
}

fn cases(scope: Scope) -> Vec<Case> {
    match scope {
        Scope::Ops => ops_cases(),
        Scope::Layers => layer_cases(),
        Scope::Model => model_cases(),
    }
}

pub fn run_suite(scope: Scope, opts: &SuiteOptions) -> Result<Vec<SuiteEntry>> {
    cases(scope)
        .iter()
        .enumerate()
        .map(|(i, c)| run_case(scope, c, opts, i))
        .collect()
}
