//! Synthetic suture-dot images for desk-scale experiments.

use rand::Rng;
use rand_distr::{Distribution as _, Normal};
use serde::{Deserialize, Serialize};

use super::{derived_rng, Sample};
use crate::codec::{Point, PointSet};
use crate::error::{Error, Result};
use crate::grid::Grid;

const MAX_ATTEMPTS: usize = 1000;
const SUPERSAMPLE: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_images: usize,
    pub height: usize,
    pub width: usize,
    /// Inclusive dot-count range per image.
    pub dots: (usize, usize),
    pub min_separation: f64,
    /// Minimum distance of a dot center from the border.
    pub margin: f64,
    pub n_groups: usize,
    pub noise_std: f64,
    /// Draw thin thread segments between consecutive dots.
    pub threads: bool,
    /// Inclusive range of soft specular highlights (distractors) per image.
    pub highlights: (usize, usize),
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_images: 16,
            height: 64,
            width: 96,
            dots: (3, 12),
            min_separation: 10.0,
            margin: 4.0,
            n_groups: 4,
            noise_std: 0.02,
            threads: true,
            highlights: (0, 2),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::invalid("synthetic image dimensions must be positive"));
        }
        if self.dots.0 > self.dots.1 || self.highlights.0 > self.highlights.1 {
            return Err(Error::invalid(format!(
                "dot range {:?} or highlight range {:?} is empty",
                self.dots, self.highlights
            )));
        }
        if self.n_groups == 0 {
            return Err(Error::invalid("n_groups must be positive"));
        }
        if !(self.min_separation >= 0.0 && self.margin >= 0.0 && self.noise_std >= 0.0) {
            return Err(Error::invalid("separation, margin and noise must be non-negative"));
        }
        if 2.0 * self.margin >= self.width.min(self.height) as f64 - 1.0 {
            return Err(Error::invalid(format!(
                "margin {} leaves no room in a {}x{} image",
                self.margin, self.width, self.height
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
enum Mark {
    Disc { radius: f64 },
    Cross { arm: f64, half_width: f64 },
}

impl Mark {
    fn covers(&self, dx: f64, dy: f64) -> bool {
        match *self {
            Mark::Disc { radius } => dx * dx + dy * dy <= radius * radius,
            Mark::Cross { arm, half_width } => {
                (dx.abs() <= half_width && dy.abs() <= arm) || (dy.abs() <= half_width && dx.abs() <= arm)
            }
        }
    }

    fn extent(&self) -> f64 {
        match *self {
            Mark::Disc { radius } => radius,
            Mark::Cross { arm, .. } => arm,
        }
    }
}

fn place_points<R: Rng>(cfg: &SynthConfig, n: usize, rng: &mut R) -> Result<Vec<Point>> {
    let (lo_x, hi_x) = (cfg.margin, cfg.width as f64 - 1.0 - cfg.margin);
    let (lo_y, hi_y) = (cfg.margin, cfg.height as f64 - 1.0 - cfg.margin);
    let mut pts: Vec<Point> = Vec::with_capacity(n);
    while pts.len() < n {
        let mut placed = false;
        for _ in 0..MAX_ATTEMPTS {
            let p = Point::new(rng.random_range(lo_x..=hi_x), rng.random_range(lo_y..=hi_y));
            if pts.iter().all(|q| q.distance(&p) >= cfg.min_separation) {
                pts.push(p);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::invalid(format!(
                "could not place dot {} of {n} at separation {} in a {}x{} image after {MAX_ATTEMPTS} attempts",
                pts.len() + 1,
                cfg.min_separation,
                cfg.width,
                cfg.height
            )));
        }
    }
    Ok(pts)
}

/// Alpha-blend `color` over the pixels of a box, weighting by supersampled coverage.
fn blend(img: &mut Grid<f64>, bbox: (f64, f64, f64, f64), color: [f64; 3], alpha: f64, covers: impl Fn(f64, f64) -> bool) {
    let (h, w) = (img.height() as isize, img.width() as isize);
    let (x0, y0) = ((bbox.0.floor() as isize).max(0), (bbox.1.floor() as isize).max(0));
    let (x1, y1) = ((bbox.2.ceil() as isize).min(w - 1), (bbox.3.ceil() as isize).min(h - 1));
    for yy in y0..=y1 {
        for xx in x0..=x1 {
            let mut hits = 0;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let ox = (sx as f64 + 0.5) / SUPERSAMPLE as f64 - 0.5;
                    let oy = (sy as f64 + 0.5) / SUPERSAMPLE as f64 - 0.5;
                    hits += covers(xx as f64 + ox, yy as f64 + oy) as usize;
                }
            }
            if hits == 0 {
                continue;
            }
            let a = alpha * hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
            for (c, &col) in color.iter().enumerate() {
                let i = img.index(yy as usize, xx as usize, c);
                let v = &mut img.as_mut_slice()[i];
                *v = *v * (1.0 - a) + col * a;
            }
        }
    }
}

fn segment_distance(px: f64, py: f64, a: &Point, b: &Point) -> f64 {
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 { 0.0 } else { (((px - a.x) * dx + (py - a.y) * dy) / len2).clamp(0.0, 1.0) };
    ((px - a.x - t * dx).powi(2) + (py - a.y - t * dy).powi(2)).sqrt()
}

fn render<R: Rng>(cfg: &SynthConfig, pts: &[Point], rng: &mut R) -> Grid<f64> {
    let (h, w) = (cfg.height, cfg.width);
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.15..0.45));
    let waves: Vec<(f64, f64, f64, f64)> = (0..2)
        .map(|_| {
            (
                rng.random_range(0.3..1.5),
                rng.random_range(0.3..1.5),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.03..0.08),
            )
        })
        .collect();
    let mut img = Grid::from_fn(h, w, 3, |y, x, c| {
        let shade: f64 = waves
            .iter()
            .map(|&(fx, fy, ph, amp)| {
                amp * (std::f64::consts::TAU * (fx * x as f64 / w as f64 + fy * y as f64 / h as f64) + ph + c as f64 * 0.4).cos()
            })
            .sum();
        base[c] + shade
    });

    let n_high = rng.random_range(cfg.highlights.0..=cfg.highlights.1);
    for _ in 0..n_high {
        // Soft glare away from the labelled dots.
        let spot = (0..MAX_ATTEMPTS)
            .map(|_| Point::new(rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64)))
            .find(|c| pts.iter().all(|p| p.distance(c) >= 8.0));
        let Some(c) = spot else { continue };
        let sigma: f64 = rng.random_range(2.5..4.0);
        let peak = rng.random_range(0.6..0.9);
        let reach = (3.0 * sigma).ceil() as isize;
        for yy in (c.y as isize - reach).max(0)..=(c.y as isize + reach).min(h as isize - 1) {
            for xx in (c.x as isize - reach).max(0)..=(c.x as isize + reach).min(w as isize - 1) {
                let r2 = (xx as f64 - c.x).powi(2) + (yy as f64 - c.y).powi(2);
                let a = peak * (-r2 / (2.0 * sigma * sigma)).exp();
                for ch in 0..3 {
                    let i = img.index(yy as usize, xx as usize, ch);
                    let v = &mut img.as_mut_slice()[i];
                    *v = *v * (1.0 - a) + a;
                }
            }
        }
    }

    if cfg.threads && pts.len() > 1 {
        let thread: [f64; 3] = std::array::from_fn(|c| [0.55, 0.58, 0.68][c] + rng.random_range(-0.05..0.05));
        let half = rng.random_range(0.4..0.6);
        let mut order: Vec<&Point> = pts.iter().collect();
        order.sort_by(|a, b| a.x.total_cmp(&b.x));
        for pair in order.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            let bbox = (a.x.min(b.x) - 1.0, a.y.min(b.y) - 1.0, a.x.max(b.x) + 1.0, a.y.max(b.y) + 1.0);
            blend(&mut img, bbox, thread, 0.8, |x, y| segment_distance(x, y, a, b) <= half);
        }
    }

    for p in pts {
        let mark = if rng.random_bool(0.5) {
            Mark::Disc {
                radius: rng.random_range(1.6..2.6),
            }
        } else {
            Mark::Cross {
                arm: rng.random_range(2.0..3.0),
                half_width: rng.random_range(0.6..0.9),
            }
        };
        let color: [f64; 3] = std::array::from_fn(|c| [0.92, 0.88, 0.80][c] + rng.random_range(-0.07..0.07));
        let r = mark.extent() + 1.0;
        blend(&mut img, (p.x - r, p.y - r, p.x + r, p.y + r), color, 1.0, |x, y| mark.covers(x - p.x, y - p.y));
    }

    if cfg.noise_std > 0.0 {
        let noise = Normal::new(0.0, cfg.noise_std).expect("finite std");
        for v in img.as_mut_slice() {
            *v += noise.sample(rng);
        }
    }
    img.as_mut_slice().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    img
}

/// Generate `n_images` samples; ids `s0000…`, groups `g0…` assigned round-robin.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<Vec<Sample>> {
    cfg.validate()?;
    (0..cfg.n_images)
        .map(|i| {
            let mut rng = derived_rng(cfg.seed, 0x5157, i as u64);
            let n = rng.random_range(cfg.dots.0..=cfg.dots.1);
            let pts = place_points(cfg, n, &mut rng)?;
            let image = render(cfg, &pts, &mut rng);
            let points = PointSet::new(cfg.height, cfg.width, pts)?;
            Sample::new(image, points, format!("g{}", i % cfg.n_groups), format!("s{i:04}"))
        })
        .collect()
}
