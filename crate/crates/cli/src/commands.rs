use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::error::ErrorKind;
use clap::CommandFactory;
use serde_json::json;

use heatpoint::codec::{decode as decode_heatmap, encode as encode_points, Connectivity, DecodeOptions, Distribution, Heatmap};
use heatpoint::data::{dataset, group_kfold, synth_dataset, Sample, SynthConfig};
use heatpoint::eval::{aggregate, evaluate_image, metrics_csv, radius_sweep, MatchDump, Pooling};
use heatpoint::gradsuite::{entry_names, run_suite, Scope, SuiteOptions};
use heatpoint::grid::Grid;
use heatpoint::io::{annotations, netpbm, read_bytes, read_string, write_atomic};
use heatpoint::losses::Variant;
use heatpoint::model::train::{log_csv, train_with};
use heatpoint::model::{forward, ExperimentConfig, ModelWeights, TrainOutput};
use heatpoint::PointSet;

use crate::manifest::Run;
use crate::overlay;
use crate::{
    Cli, ConfigOverrides, DecodeArgs, DistKind, EncodeArgs, EvalArgs, GradcheckArgs, OverlayArgs, Precision, PredictArgs,
    SplitArgs, SynthArgs, TrainArgs, XvalArgs,
};

/// An error that exits with the usage status.
fn usage(kind: ErrorKind, msg: impl std::fmt::Display) -> anyhow::Error {
    Cli::command().error(kind, msg).into()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    Ok(write_atomic(path, text.as_bytes())?)
}

/// `<path>` with `suffix` appended to the file name.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(suffix);
    path.with_file_name(name)
}

fn read_points(path: &Path) -> Result<PointSet> {
    annotations::parse_points_any(&read_string(path)?).with_context(|| format!("reading points from {}", path.display()))
}

pub fn encode(a: EncodeArgs) -> Result<()> {
    let dist = match a.dist {
        DistKind::Gaussian => Distribution::Gaussian {
            sigma1: a.sigma1.ok_or_else(|| usage(ErrorKind::MissingRequiredArgument, "--dist gaussian requires --sigma1"))?,
        },
        DistKind::Tanh => Distribution::Tanh {
            alpha: a.alpha.ok_or_else(|| usage(ErrorKind::MissingRequiredArgument, "--dist tanh requires --alpha"))?,
        },
        DistKind::Binary => Distribution::Binary,
    };
    dist.validate().map_err(|e| usage(ErrorKind::InvalidValue, e))?;
    let mut run = Run::start("encode");
    run.config(dist).input(&a.points);
    let points = read_points(&a.points)?;
    let heatmap = encode_points::<f64>(&points, &dist)?;
    write_atomic(&a.out, &heatmap.grid().to_hm01_bytes())?;
    run.output(&a.out);
    if let Some(pgm) = &a.pgm {
        write_atomic(pgm, &netpbm::encode_pgm16(&heatmap))?;
        run.output(pgm);
    }
    run.finish(&a.out)?;
    Ok(())
}

fn read_heatmap(path: &Path) -> Result<Heatmap<f64>> {
    let bytes = read_bytes(path)?;
    let grid = if bytes.starts_with(b"HM01") {
        Grid::<f64>::read_hm01(&bytes[..])?
    } else {
        netpbm::decode::<f64>(&bytes)?
    };
    if grid.channels() != 1 {
        bail!("{}: expected a single-channel heatmap, found {} channels", path.display(), grid.channels());
    }
    Heatmap::new(grid).with_context(|| format!("{} is not a valid heatmap", path.display()))
}

pub fn decode(a: DecodeArgs) -> Result<()> {
    let opts = DecodeOptions {
        threshold: a.threshold,
        connectivity: Connectivity::from_count(a.connectivity).map_err(|e| usage(ErrorKind::InvalidValue, e))?,
    };
    let mut run = Run::start("decode");
    run.config(json!({"threshold": a.threshold, "connectivity": a.connectivity})).input(&a.heatmap);
    let points = decode_heatmap(&read_heatmap(&a.heatmap)?, &opts)?;
    write_text(&a.out, &points.to_json())?;
    run.output(&a.out).finish(&a.out)?;
    Ok(())
}

pub fn synth(a: SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        n_images: a.first_index + a.n,
        height: a.height,
        width: a.width,
        dots: (a.dots_min, a.dots_max),
        min_separation: a.min_separation,
        n_groups: a.groups,
        seed: a.seed,
        ..SynthConfig::default()
    };
    cfg.validate().map_err(|e| usage(ErrorKind::InvalidValue, e))?;
    let mut run = Run::start("synth");
    run.config(json!({"synth": &cfg, "first_index": a.first_index})).seed(a.seed);
    let samples = synth_dataset(&cfg)?;
    dataset::write_dir(&a.out, &samples[a.first_index..])?;
    run.output(&a.out).finish(&a.out)?;
    eprintln!("wrote {} samples to {}", a.n, a.out.display());
    Ok(())
}

pub fn split(a: SplitArgs) -> Result<()> {
    let mut run = Run::start("split");
    run.config(json!({"k": a.k})).input(&a.data);
    let samples = dataset::load_samples(&a.data)?;
    let pairs: Vec<(&str, &str)> = samples.iter().map(|s| (s.sample_id.as_str(), s.group_id.as_str())).collect();
    let folds = group_kfold(&pairs, a.k)?;
    write_text(&a.out, &serde_json::to_string_pretty(&folds)?)?;
    run.output(&a.out).finish(&a.out)?;
    Ok(())
}

fn resolve_config(o: &ConfigOverrides) -> Result<ExperimentConfig> {
    let mut cfg = match &o.config {
        Some(p) => ExperimentConfig::from_json(&read_string(p)?).with_context(|| format!("reading config {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(v) = o.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = o.seed {
        cfg.train.seed = v;
    }
    if let Some(v) = o.variant {
        cfg.model.variant = Variant::try_from(v).map_err(|e| usage(ErrorKind::InvalidValue, e))?;
    }
    if let Some(v) = o.lr {
        cfg.train.learning_rate = v;
    }
    if let Some(v) = o.sigma1 {
        cfg.model.sigma1 = v;
    }
    if let Some(v) = o.sigma2 {
        cfg.model.sigma2 = v;
    }
    cfg.model.validate().map_err(|e| usage(ErrorKind::InvalidValue, e))?;
    cfg.train.validate().map_err(|e| usage(ErrorKind::InvalidValue, e))?;
    Ok(cfg)
}

/// Train in the requested precision; weights come back as `f64` (exact for `f32`).
fn train_any(samples: &[Sample], cfg: &ExperimentConfig, precision: Precision, verbose: bool) -> Result<TrainOutput<f64>> {
    let progress = |e: &heatpoint::model::EpochLog| {
        if verbose {
            eprintln!(
                "epoch {:>3}  loss {:.6}  l1 {:.6}  l2 {:.6}  lr {}",
                e.epoch, e.loss_total, e.loss_l1, e.loss_l2, e.lr
            );
        }
    };
    Ok(match precision {
        Precision::F64 => train_with::<f64>(samples, &cfg.model, &cfg.train, |e, _| progress(e))?,
        Precision::F32 => {
            let out = train_with::<f32>(samples, &cfg.model, &cfg.train, |e, _| progress(e))?;
            TrainOutput { weights: out.weights.cast(), log: out.log }
        }
    })
}

pub fn train(a: TrainArgs) -> Result<()> {
    let cfg = resolve_config(&a.overrides)?;
    let mut run = Run::start("train");
    run.config(json!({"experiment": &cfg, "precision": format!("{:?}", a.precision).to_lowercase()}))
        .seed(cfg.train.seed)
        .input(&a.data);
    if let Some(p) = &a.overrides.config {
        run.input(p);
    }
    let samples = dataset::load_samples(&a.data)?;
    let out = train_any(&samples, &cfg, a.precision, true)?;
    out.weights.write(&a.out)?;
    let log_path = sibling(&a.out, ".log.csv");
    write_text(&log_path, &log_csv(&out.log))?;
    run.output(&a.out).output(&log_path).finish(&a.out)?;
    Ok(())
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        if path.is_file() && path.extension().is_some_and(|e| e == "ppm" || e == "pgm") {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn stem(path: &Path) -> Result<String> {
    path.file_stem()
        .and_then(|s| s.to_str())
        .map(str::to_string)
        .ok_or_else(|| anyhow!("{} has no usable file name", path.display()))
}

fn rgb(grid: Grid<f64>) -> Grid<f64> {
    if grid.channels() == 1 {
        Grid::from_fn(grid.height(), grid.width(), 3, |y, x, _| grid.get(y, x, 0))
    } else {
        grid
    }
}

pub fn predict(a: PredictArgs) -> Result<()> {
    let cfg = resolve_config(&ConfigOverrides {
        config: a.config.clone(),
        epochs: None,
        seed: None,
        variant: None,
        lr: None,
        sigma1: None,
        sigma2: None,
    })?;
    let mut run = Run::start("predict");
    run.config(&cfg.model).input(&a.weights).input(&a.data);
    let weights = ModelWeights::<f64>::read(&a.weights)?;
    weights
        .check_config(&cfg.model)
        .with_context(|| format!("{} does not fit the model config", a.weights.display()))?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let files = image_files(&a.data)?;
    for path in &files {
        let image = rgb(netpbm::decode::<f64>(&read_bytes(path)?)?);
        let (_, stage2) = forward(&weights, &cfg.model, &image).with_context(|| format!("predicting {}", path.display()))?;
        let points = decode_heatmap(&stage2, &DecodeOptions::default())?;
        let name = stem(path)?;
        write_text(&a.out.join(format!("{name}.json")), &points.to_json())?;
        if a.heatmaps {
            write_atomic(&a.out.join(format!("{name}.pgm")), &netpbm::encode_pgm16(&stage2))?;
        }
    }
    run.output(&a.out).finish(&a.out)?;
    eprintln!("predicted {} images", files.len());
    Ok(())
}

fn json_stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        let is_points = path.extension().is_some_and(|e| e == "json")
            && !path.to_string_lossy().ends_with(".manifest.json")
            && path.is_file();
        if is_points {
            out.insert(stem(&path)?, path);
        }
    }
    Ok(out)
}

fn parse_modes(modes: &[String]) -> Result<Vec<Pooling>> {
    modes
        .iter()
        .map(|m| m.parse::<Pooling>().map_err(|e| usage(ErrorKind::InvalidValue, e)))
        .collect()
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let modes = parse_modes(&a.mode)?;
    let mut run = Run::start("eval");
    run.config(json!({"radii": &a.radii, "modes": &modes})).input(&a.pred).input(&a.gt);
    let pred = json_stems(&a.pred)?;
    let gt = json_stems(&a.gt)?;
    let orphans: Vec<String> = pred
        .keys()
        .filter(|k| !gt.contains_key(*k))
        .map(|k| format!("{k} (prediction only)"))
        .chain(gt.keys().filter(|k| !pred.contains_key(*k)).map(|k| format!("{k} (ground truth only)")))
        .collect();
    if !orphans.is_empty() {
        bail!("unmatched file stems: {}", orphans.join(", "));
    }
    if gt.is_empty() {
        bail!("no points files in {}", a.gt.display());
    }
    let mut names = Vec::new();
    let mut pairs = Vec::new();
    for (name, gt_path) in &gt {
        pairs.push((read_points(&pred[name])?, read_points(gt_path)?));
        names.push(name.clone());
    }
    let reports = radius_sweep(&pairs, &a.radii, &modes).map_err(|e| usage(ErrorKind::InvalidValue, e))?;
    let csv = metrics_csv(&reports);
    write_text(&a.out, &csv)?;
    let json_path = a.out.with_extension("json");
    write_text(&json_path, &serde_json::to_string_pretty(&reports)?)?;
    let dump_radius = a.radii[0];
    let dumps: Vec<MatchDump> = names
        .iter()
        .zip(&pairs)
        .map(|(n, (p, g))| Ok(MatchDump::new(n.clone(), p, g, &evaluate_image(p, g, dump_radius)?.report)))
        .collect::<Result<_>>()?;
    let dump_path = a.out.with_extension("matches.json");
    write_text(&dump_path, &serde_json::to_string_pretty(&dumps)?)?;
    run.output(&a.out).output(&json_path).output(&dump_path).finish(&a.out)?;
    print!("{csv}");
    Ok(())
}

pub fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let scopes: Vec<Scope> = a
        .scope
        .iter()
        .map(|s| s.parse::<Scope>().map_err(|e| usage(ErrorKind::InvalidValue, e)))
        .collect::<Result<_>>()?;
    if let Some(fault) = &a.inject_fault {
        if !scopes.iter().any(|&s| entry_names(s).contains(fault)) {
            return Err(usage(ErrorKind::InvalidValue, format!("no gradcheck entry named {fault:?} in the selected scopes")));
        }
    }
    let opts = SuiteOptions {
        tolerance: a.tol,
        fault: a.inject_fault.clone(),
        seed: a.seed,
    };
    println!("scope,name,entries,max_rel_error,tolerance,status");
    let mut failed = Vec::new();
    for scope in scopes {
        for e in run_suite(scope, &opts)? {
            println!(
                "{},{},{},{:.3e},{:e},{}",
                scope.as_str(),
                e.name,
                e.entries_checked,
                e.max_rel_error,
                e.tolerance,
                if e.passed { "pass" } else { "FAIL" }
            );
            if !e.passed {
                failed.push(format!("{}/{} (max rel error {:.3e} > {:e})", scope.as_str(), e.name, e.max_rel_error, e.tolerance));
            }
        }
    }
    if !failed.is_empty() {
        bail!("gradient check failed for {}", failed.join(", "));
    }
    Ok(())
}

pub fn overlay(a: OverlayArgs) -> Result<()> {
    let mut run = Run::start("overlay");
    run.input(&a.image).input(&a.matches);
    let mut img = netpbm::Rgb8::decode(&read_bytes(&a.image)?)?;
    let value: serde_json::Value = serde_json::from_str(&read_string(&a.matches)?)?;
    let dumps: Vec<MatchDump> = if value.is_array() {
        serde_json::from_value(value)?
    } else {
        vec![serde_json::from_value(value)?]
    };
    let wanted = match &a.name {
        Some(n) => n.clone(),
        None => stem(&a.image)?,
    };
    let dump = match dumps.iter().find(|d| d.image == wanted) {
        Some(d) => d,
        None if dumps.len() == 1 => &dumps[0],
        None if dumps.is_empty() => {
            write_atomic(&a.out, &img.encode())?;
            run.output(&a.out).finish(&a.out)?;
            return Ok(());
        }
        None => bail!("{} has no entry for image {wanted:?}", a.matches.display()),
    };
    run.config(json!({"image": dump.image}));
    overlay::draw(&mut img, dump);
    write_atomic(&a.out, &img.encode())?;
    run.output(&a.out).finish(&a.out)?;
    Ok(())
}

fn parse_dist(s: &str) -> Result<Option<f64>> {
    match s.split_once(':') {
        None if s == "gaussian" => Ok(None),
        Some(("tanh", alpha)) => alpha
            .parse::<f64>()
            .map(Some)
            .map_err(|_| usage(ErrorKind::InvalidValue, format!("bad tanh alpha in {s:?}"))),
        _ => Err(usage(ErrorKind::InvalidValue, format!("distribution must be gaussian or tanh:<alpha>, got {s:?}"))),
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

pub fn xval(a: XvalArgs) -> Result<()> {
    let base = resolve_config(&a.overrides)?;
    let or_base = |v: &[f64], d: f64| if v.is_empty() { vec![d] } else { v.to_vec() };
    let sigma1s = or_base(&a.grid_sigma1, base.model.sigma1);
    let sigma2s = or_base(&a.grid_sigma2, base.model.sigma2);
    let dists: Vec<Option<f64>> = if a.grid_dist.is_empty() {
        vec![base.model.tanh_alpha]
    } else {
        a.grid_dist.iter().map(|s| parse_dist(s)).collect::<Result<_>>()?
    };
    let variants: Vec<Variant> = if a.grid_variant.is_empty() {
        vec![base.model.variant]
    } else {
        a.grid_variant
            .iter()
            .map(|&v| Variant::try_from(v).map_err(|e| usage(ErrorKind::InvalidValue, e)))
            .collect::<Result<_>>()?
    };

    let mut run = Run::start("xval");
    run.config(json!({
        "base": &base, "k": a.k, "radius": a.radius,
        "grid": {"sigma1": &sigma1s, "sigma2": &sigma2s, "dist": &a.grid_dist, "variant": &variants},
    }))
    .seed(base.train.seed)
    .input(&a.data);

    let samples = dataset::load_samples(&a.data)?;
    let pairs: Vec<(&str, &str)> = samples.iter().map(|s| (s.sample_id.as_str(), s.group_id.as_str())).collect();
    let folds = group_kfold(&pairs, a.k)?;
    let by_id: BTreeMap<&str, &Sample> = samples.iter().map(|s| (s.sample_id.as_str(), s)).collect();

    let mut csv = String::from("experiment,distribution,sigma1,sigma2,variant,folds,ppv_mean,ppv_std,tpr_mean,tpr_std,f1_mean,f1_std\n");
    let mut experiment = 0;
    for &alpha in &dists {
        for &sigma1 in &sigma1s {
            for &sigma2 in &sigma2s {
                for &variant in &variants {
                    experiment += 1;
                    let mut cfg = base.clone();
                    cfg.model.sigma1 = sigma1;
                    cfg.model.sigma2 = sigma2;
                    cfg.model.tanh_alpha = alpha;
                    cfg.model.variant = variant;
                    cfg.model.validate().map_err(|e| usage(ErrorKind::InvalidValue, e))?;
                    let (mut ppv, mut tpr, mut f1) = (Vec::new(), Vec::new(), Vec::new());
                    for fold in &folds {
                        let train_set: Vec<Sample> = fold.train.iter().map(|id| by_id[id.as_str()].clone()).collect();
                        let out = train_any(&train_set, &cfg, a.precision, false)?;
                        let evals = fold
                            .val
                            .iter()
                            .map(|id| {
                                let s = by_id[id.as_str()];
                                let (_, stage2) = forward(&out.weights, &cfg.model, &s.image)?;
                                let pred = decode_heatmap(&stage2, &DecodeOptions::default())?;
                                Ok(evaluate_image(&pred, &s.points, a.radius)?)
                            })
                            .collect::<Result<Vec<_>>>()?;
                        let m = aggregate(&evals, Pooling::Micro)?;
                        eprintln!("E{experiment} fold {}: ppv {:.4} tpr {:.4} f1 {:.4}", fold.fold, m.ppv, m.tpr, m.f1);
                        ppv.push(m.ppv);
                        tpr.push(m.tpr);
                        f1.push(m.f1);
                    }
                    let (pm, ps) = mean_std(&ppv);
                    let (tm, ts) = mean_std(&tpr);
                    let (fm, fs) = mean_std(&f1);
                    csv.push_str(&format!(
                        "E{experiment},{},{sigma1},{sigma2},{},{},{pm},{ps},{tm},{ts},{fm},{fs}\n",
                        cfg.model.target_distribution().label(),
                        u8::from(variant),
                        folds.len()
                    ));
                }
            }
        }
    }
    write_text(&a.out, &csv)?;
    run.output(&a.out).finish(&a.out)?;
    print!("{csv}");
    Ok(())
}
