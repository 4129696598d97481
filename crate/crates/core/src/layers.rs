//! The two fixed differentiable output-stage layers: a normalized Gaussian
//! blur and the sliding-window soft-argmax that acts as a soft local
//! non-maximum suppression.

use serde::{Deserialize, Serialize};

use crate::codec::Heatmap;
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::scalar::Real;
use crate::tape::ops::{self, ConvSpec};
use crate::tape::{NodeId, Op, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianLayerSpec {
    pub sigma2: f64,
    /// Odd side length; `2·⌈3σ₂⌉ + 1` when unset.
    #[serde(default)]
    pub kernel_size: Option<usize>,
}

impl GaussianLayerSpec {
    pub fn new(sigma2: f64) -> Self {
        Self {
            sigma2,
            kernel_size: None,
        }
    }

    pub fn size(&self) -> usize {
        self.kernel_size
            .unwrap_or_else(|| 2 * (3.0 * self.sigma2).ceil() as usize + 1)
    }

    /// Truncated 2-D Gaussian, renormalized to sum to one.
    pub fn kernel<T: Real>(&self) -> Result<Grid<T>> {
        if !(self.sigma2 > 0.0 && self.sigma2.is_finite()) {
            return Err(Error::invalid(format!("sigma2 must be positive, got {}", self.sigma2)));
        }
        let k = self.size();
        if k.is_multiple_of(2) {
            return Err(Error::invalid(format!("gaussian kernel size {k} must be odd")));
        }
        let c = (k / 2) as f64;
        let s2 = 2.0 * self.sigma2 * self.sigma2;
        let raw: Vec<f64> = (0..k * k)
            .map(|i| {
                let (dy, dx) = ((i / k) as f64 - c, (i % k) as f64 - c);
                (-(dx * dx + dy * dy) / s2).exp()
            })
            .collect();
        let total: f64 = raw.iter().sum();
        Grid::from_vec(k, k, 1, raw.into_iter().map(|v| T::of(v / total)).collect())
    }
}

/// Depthwise Gaussian blur of a single-channel node, zero padded to keep the
/// spatial size. The kernel is a constant: gradients flow to the input only.
pub fn gaussian_filter<T: Real>(tape: &mut Tape<T>, input: NodeId, spec: &GaussianLayerSpec) -> Result<NodeId> {
    if tape.value(input).channels() != 1 {
        return Err(Error::shape(
            "gaussian_filter",
            format!("expected 1 channel, got {}", tape.value(input).channels()),
        ));
    }
    let kernel = spec.kernel::<T>()?;
    let pad = kernel.height() / 2;
    let k = tape.constant(kernel);
    let b = tape.constant(Grid::zeros(1, 1, 1));
    ops::conv2d(
        tape,
        input,
        &ConvSpec {
            kernel: k,
            bias: b,
            stride: 1,
            padding: pad,
        },
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SoftArgmaxSpec {
    pub window: usize,
    pub stride: usize,
    pub padding: usize,
    pub temperature: f64,
}

impl Default for SoftArgmaxSpec {
    fn default() -> Self {
        Self {
            window: 3,
            stride: 1,
            padding: 1,
            temperature: 0.1,
        }
    }
}

impl SoftArgmaxSpec {
    pub fn with_temperature(temperature: f64) -> Self {
        Self {
            temperature,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window.is_multiple_of(2) || self.stride != 1 || self.padding != self.window / 2 {
            return Err(Error::invalid(format!(
                "soft-argmax needs an odd window with stride 1 and same padding, got window {} stride {} padding {}",
                self.window, self.stride, self.padding
            )));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::invalid(format!("temperature must be positive, got {}", self.temperature)));
        }
        Ok(())
    }
}

struct SoftArgmax<T> {
    radius: usize,
    temperature: T,
}

impl<T: Real> SoftArgmax<T> {
    /// In-image window bounds (inclusive start, exclusive end) around `(y, x)`.
    fn window(&self, h: usize, w: usize, y: usize, x: usize) -> (usize, usize, usize, usize) {
        let r = self.radius;
        (y.saturating_sub(r), (y + r + 1).min(h), x.saturating_sub(r), (x + r + 1).min(w))
    }

    /// Softmax-weighted window mean: `(Σ e_q·x_q / Σ e_q, Σ e_q)` with `e_q = exp((x_q − max)/T)`.
    fn eval(&self, x: &[T], h: usize, w: usize, y: usize, xx: usize) -> (T, T, T) {
        let (y0, y1, x0, x1) = self.window(h, w, y, xx);
        let (mut lo, mut m) = (T::infinity(), T::neg_infinity());
        for yy in y0..y1 {
            for v in &x[yy * w + x0..yy * w + x1] {
                lo = lo.min(*v);
                m = m.max(*v);
            }
        }
        let (mut z, mut s) = (T::zero(), T::zero());
        for yy in y0..y1 {
            for &v in &x[yy * w + x0..yy * w + x1] {
                let e = ((v - m) / self.temperature).exp();
                z += e;
                s += e * v;
            }
        }
        // Clamped to the window range.
        ((s / z).max(lo).min(m), z, m)
    }
}

impl<T: Real> Op<T> for SoftArgmax<T> {
    fn name(&self) -> &'static str {
        "conv_soft_argmax"
    }

    fn backward(&self, inputs: &[&Grid<T>], output: &Grid<T>, grad_out: &Grid<T>, _needs: &[bool]) -> Vec<Option<Grid<T>>> {
        let input = inputs[0];
        let (h, w, _) = input.shape();
        let x = input.as_slice();
        let mut g = Grid::zeros(h, w, 1);
        let gs = g.as_mut_slice();
        for y in 0..h {
            for xx in 0..w {
                let go = grad_out.as_slice()[y * w + xx];
                if go == T::zero() {
                    continue;
                }
                let o = output.as_slice()[y * w + xx];
                let (_, z, m) = self.eval(x, h, w, y, xx);
                let (y0, y1, x0, x1) = self.window(h, w, y, xx);
                for yy in y0..y1 {
                    for qx in x0..x1 {
                        let q = yy * w + qx;
                        let wq = ((x[q] - m) / self.temperature).exp() / z;
                        // ∂o/∂x_q = w_q (1 + (x_q − o)/T)
                        gs[q] += go * wq * (T::one() + (x[q] - o) / self.temperature);
                    }
                }
            }
        }
        vec![Some(g)]
    }
}

/// Per-pixel soft local maximum over the window: `o(p) = Σ_q w_q·x_q` with
/// `w = softmax(x/T)` over the in-image part of the window.
pub fn conv_soft_argmax<T: Real>(tape: &mut Tape<T>, input: NodeId, spec: &SoftArgmaxSpec) -> Result<NodeId> {
    spec.validate()?;
    let x = tape.value(input);
    if x.channels() != 1 {
        return Err(Error::shape(
            "conv_soft_argmax",
            format!("expected 1 channel, got {}", x.channels()),
        ));
    }
    let (h, w, _) = x.shape();
    let op = SoftArgmax {
        radius: spec.window / 2,
        temperature: T::of(spec.temperature),
    };
    let data = x.as_slice();
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for xx in 0..w {
            out.push(op.eval(data, h, w, y, xx).0);
        }
    }
    let value = Grid::from_vec(h, w, 1, out)?;
    Ok(tape.record(Box::new(op), vec![input], value))
}

/// Change in local peak contrast (peak minus mean of its in-image 8-neighbourhood)
/// from `before` to `after`. Positive means the peak stands out more afterwards.
pub fn nms_sharpness<T: Real>(before: &Heatmap<T>, after: &Heatmap<T>, peak: (usize, usize)) -> Result<f64> {
    let (px, py) = peak;
    let (h, w) = (before.height(), before.width());
    if (after.height(), after.width()) != (h, w) {
        return Err(Error::shape("nms_sharpness", "heatmap sizes differ"));
    }
    if px >= w || py >= h {
        return Err(Error::invalid(format!("peak ({px}, {py}) outside {w}x{h}")));
    }
    let neighbours: Vec<(usize, usize)> = (-1isize..=1)
        .flat_map(|dy| (-1isize..=1).map(move |dx| (dy, dx)))
        .filter(|&d| d != (0, 0))
        .filter_map(|(dy, dx)| {
            let (y, x) = (py as isize + dy, px as isize + dx);
            (y >= 0 && x >= 0 && y < h as isize && x < w as isize).then_some((y as usize, x as usize))
        })
        .collect();
    let centre = before.at(py, px);
    if neighbours.iter().any(|&(y, x)| before.at(y, x) >= centre) {
        return Err(Error::invalid(format!("({px}, {py}) is not a strict local maximum")));
    }
    let contrast = |m: &Heatmap<T>| {
        let mean = neighbours.iter().map(|&(y, x)| m.at(y, x).to_f64_lossy()).sum::<f64>() / neighbours.len() as f64;
        m.at(py, px).to_f64_lossy() - mean
    };
    Ok(contrast(after) - contrast(before))
}
