//! Label-consistent augmentation.
//!
//! Geometric transforms are composed into one affine map that moves both the
//! image (bilinear, zero fill) and the point labels. Photometric transforms
//! touch the image only.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Sample;
use crate::codec::{Point, PointSet};
use crate::error::{Error, Result};
use crate::grid::Grid;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Chance that each enabled transform fires.
    pub probability: f64,
    pub hflip: bool,
    pub vflip: bool,
    /// Maximum absolute rotation, degrees.
    pub rotation_deg: f64,
    /// Maximum absolute translation as a fraction of width/height.
    pub translate_frac: f64,
    /// Maximum absolute horizontal shear factor.
    pub shear: f64,
    pub brightness: f64,
    pub contrast_range: [f64; 2],
    pub saturation_range: [f64; 2],
    /// Maximum hue rotation as a fraction of the full circle.
    pub hue: f64,
    pub pixel_shift: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            probability: 0.5,
            hflip: true,
            vflip: true,
            rotation_deg: 60.0,
            translate_frac: 0.10,
            shear: 0.1,
            brightness: 0.2,
            contrast_range: [0.3, 0.5],
            saturation_range: [0.5, 2.0],
            hue: 0.1,
            pixel_shift: 0.01,
        }
    }
}

impl AugmentConfig {
    /// Every transform disabled.
    pub fn none() -> Self {
        Self {
            probability: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.probability) {
            return Err(Error::invalid(format!("augment probability {} outside [0, 1]", self.probability)));
        }
        let non_neg = [
            ("rotation_deg", self.rotation_deg),
            ("translate_frac", self.translate_frac),
            ("shear", self.shear),
            ("brightness", self.brightness),
            ("hue", self.hue),
            ("pixel_shift", self.pixel_shift),
        ];
        for (name, v) in non_neg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("augment {name} must be finite and >= 0, got {v}")));
            }
        }
        for (name, [lo, hi]) in [("contrast_range", self.contrast_range), ("saturation_range", self.saturation_range)] {
            if !(lo >= 0.0 && lo <= hi && hi.is_finite()) {
                return Err(Error::invalid(format!("augment {name} [{lo}, {hi}] is not a valid range")));
            }
        }
        Ok(())
    }
}

/// Row-major 2x3 affine map `p' = M [x, y, 1]^T`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine {
    pub m: [[f64; 3]; 2],
}

impl Affine {
    pub fn identity() -> Self {
        Self {
            m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
        }
    }

    pub fn hflip(width: usize) -> Self {
        Self {
            m: [[-1.0, 0.0, width as f64 - 1.0], [0.0, 1.0, 0.0]],
        }
    }

    pub fn vflip(height: usize) -> Self {
        Self {
            m: [[1.0, 0.0, 0.0], [0.0, -1.0, height as f64 - 1.0]],
        }
    }

    /// Rotation by `deg` about `(cx, cy)`, counter-clockwise in image axes.
    pub fn rotation(deg: f64, cx: f64, cy: f64) -> Self {
        let (s, c) = deg.to_radians().sin_cos();
        Self {
            m: [[c, -s, cx - c * cx + s * cy], [s, c, cy - s * cx - c * cy]],
        }
    }

    pub fn translation(dx: f64, dy: f64) -> Self {
        Self {
            m: [[1.0, 0.0, dx], [0.0, 1.0, dy]],
        }
    }

    /// `x' = x + k (y - cy)`.
    pub fn shear_x(k: f64, cy: f64) -> Self {
        Self {
            m: [[1.0, k, -k * cy], [0.0, 1.0, 0.0]],
        }
    }

    /// `self` applied after `first`.
    pub fn after(&self, first: &Affine) -> Affine {
        let a = &self.m;
        let b = &first.m;
        let mut m = [[0.0; 3]; 2];
        for r in 0..2 {
            m[r][0] = a[r][0] * b[0][0] + a[r][1] * b[1][0];
            m[r][1] = a[r][0] * b[0][1] + a[r][1] * b[1][1];
            m[r][2] = a[r][0] * b[0][2] + a[r][1] * b[1][2] + a[r][2];
        }
        Affine { m }
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let m = &self.m;
        (m[0][0] * x + m[0][1] * y + m[0][2], m[1][0] * x + m[1][1] * y + m[1][2])
    }

    pub fn inverse(&self) -> Result<Affine> {
        let m = &self.m;
        let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        if det.abs() < 1e-12 {
            return Err(Error::invalid("affine map is singular"));
        }
        let (a, b, c, d) = (m[1][1] / det, -m[0][1] / det, -m[1][0] / det, m[0][0] / det);
        Ok(Affine {
            m: [[a, b, -(a * m[0][2] + b * m[1][2])], [c, d, -(c * m[0][2] + d * m[1][2])]],
        })
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }
}

/// Bilinear warp: output pixel `q` samples the input at `map^-1(q)`, zero outside.
pub fn warp_image(image: &Grid<f64>, map: &Affine) -> Result<Grid<f64>> {
    let inv = map.inverse()?;
    let (h, w, c) = image.shape();
    let mut out = Grid::zeros(h, w, c);
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = inv.apply(x as f64, y as f64);
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let taps = [
                (x0, y0, (1.0 - fx) * (1.0 - fy)),
                (x0 + 1.0, y0, fx * (1.0 - fy)),
                (x0, y0 + 1.0, (1.0 - fx) * fy),
                (x0 + 1.0, y0 + 1.0, fx * fy),
            ];
            for (tx, ty, wt) in taps {
                if wt == 0.0 || tx < 0.0 || ty < 0.0 || tx >= w as f64 || ty >= h as f64 {
                    continue;
                }
                let (ix, iy) = (tx as usize, ty as usize);
                for ch in 0..c {
                    let i = out.index(y, x, ch);
                    out.as_mut_slice()[i] += wt * image.get(iy, ix, ch);
                }
            }
        }
    }
    Ok(out)
}

/// Map points through `map`, dropping any that leave the frame.
pub fn transform_points(points: &PointSet, map: &Affine) -> PointSet {
    let (h, w) = (points.height(), points.width());
    let kept = points
        .points()
        .iter()
        .map(|p| map.apply(p.x, p.y))
        .filter(|&(x, y)| x >= 0.0 && y >= 0.0 && x < w as f64 && y < h as f64)
        .map(|(x, y)| Point::new(x, y))
        .collect();
    PointSet::new(h, w, kept).expect("points filtered to the frame")
}

fn fires<R: Rng + ?Sized>(rng: &mut R, p: f64) -> bool {
    p > 0.0 && rng.random::<f64>() < p
}

fn symmetric<R: Rng + ?Sized>(rng: &mut R, bound: f64) -> f64 {
    if bound == 0.0 {
        0.0
    } else {
        rng.random_range(-bound..=bound)
    }
}

fn within<R: Rng + ?Sized>(rng: &mut R, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// Draw the geometric part of an augmentation.
pub fn sample_affine<R: Rng + ?Sized>(height: usize, width: usize, cfg: &AugmentConfig, rng: &mut R) -> Affine {
    let p = cfg.probability;
    let (cx, cy) = ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0);
    let mut map = Affine::identity();
    if cfg.hflip && fires(rng, p) {
        map = Affine::hflip(width).after(&map);
    }
    if cfg.vflip && fires(rng, p) {
        map = Affine::vflip(height).after(&map);
    }
    if cfg.rotation_deg > 0.0 && fires(rng, p) {
        map = Affine::rotation(symmetric(rng, cfg.rotation_deg), cx, cy).after(&map);
    }
    if cfg.translate_frac > 0.0 && fires(rng, p) {
        let dx = symmetric(rng, cfg.translate_frac) * width as f64;
        let dy = symmetric(rng, cfg.translate_frac) * height as f64;
        map = Affine::translation(dx, dy).after(&map);
    }
    if cfg.shear > 0.0 && fires(rng, p) {
        map = Affine::shear_x(symmetric(rng, cfg.shear), cy).after(&map);
    }
    map
}

fn rgb_to_hsv([r, g, b]: [f64; 3]) -> [f64; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    [h, s, max]
}

fn hsv_to_rgb([h, s, v]: [f64; 3]) -> [f64; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u8 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Apply the photometric transforms in place and clamp to `[0, 1]`.
pub fn photometric<R: Rng + ?Sized>(image: &mut Grid<f64>, cfg: &AugmentConfig, rng: &mut R) {
    let p = cfg.probability;
    if cfg.brightness > 0.0 && fires(rng, p) {
        let b = symmetric(rng, cfg.brightness);
        image.as_mut_slice().iter_mut().for_each(|v| *v += b);
    }
    if fires(rng, p) {
        let c = within(rng, cfg.contrast_range);
        let mean = image.sum() / image.len().max(1) as f64;
        image.as_mut_slice().iter_mut().for_each(|v| *v = mean + c * (*v - mean));
    }
    let sat = fires(rng, p).then(|| within(rng, cfg.saturation_range));
    let hue = (cfg.hue > 0.0 && fires(rng, p)).then(|| symmetric(rng, cfg.hue));
    if (sat.is_some() || hue.is_some()) && image.channels() == 3 {
        for px in image.as_mut_slice().chunks_exact_mut(3) {
            let rgb = [px[0].clamp(0.0, 1.0), px[1].clamp(0.0, 1.0), px[2].clamp(0.0, 1.0)];
            let [mut h, mut s, v] = rgb_to_hsv(rgb);
            if let Some(k) = sat {
                s = (s * k).min(1.0);
            }
            if let Some(dh) = hue {
                h += dh;
            }
            px.copy_from_slice(&hsv_to_rgb([h, s, v]));
        }
    }
    if cfg.pixel_shift > 0.0 && fires(rng, p) {
        let d = symmetric(rng, cfg.pixel_shift);
        image.as_mut_slice().iter_mut().for_each(|v| *v += d);
    }
    image.as_mut_slice().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
}

/// Randomly augment a sample. Labels follow the geometric part exactly.
pub fn augment<R: Rng + ?Sized>(sample: &Sample, cfg: &AugmentConfig, rng: &mut R) -> Result<Sample> {
    cfg.validate()?;
    let map = sample_affine(sample.image.height(), sample.image.width(), cfg, rng);
    let (mut image, points) = if map.is_identity() {
        (sample.image.clone(), sample.points.clone())
    } else {
        (warp_image(&sample.image, &map)?, transform_points(&sample.points, &map))
    };
    photometric(&mut image, cfg, rng);
    Ok(Sample {
        image,
        points,
        group_id: sample.group_id.clone(),
        sample_id: sample.sample_id.clone(),
    })
}
