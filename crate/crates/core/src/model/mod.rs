//! Two-stage detector: U-Net trunk → sigmoid → Gaussian filter (stage 1) →
//! convolutional soft-argmax (stage 2).

pub mod optim;
pub mod train;

use std::io::{Cursor, Read};
use std::path::Path;

use rand_distr::{Distribution as _, Normal};
use serde::{Deserialize, Serialize};

use crate::codec::{decode, DecodeOptions, Distribution, Heatmap, PointSet};
use crate::data::derived_rng;
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::layers::{conv_soft_argmax, gaussian_filter, GaussianLayerSpec, SoftArgmaxSpec};
use crate::losses::{LossConfig, Variant};
use crate::scalar::Real;
use crate::tape::ops::{self, ConvSpec};
use crate::tape::{NodeId, Tape};

pub use optim::{adam_step, lr_schedule, AdamState, Plateau};
pub use train::{train, EpochLog, ExperimentConfig, TrainConfig, TrainOutput};

const HW01_MAGIC: &[u8; 4] = b"HW01";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_channels: usize,
    /// Number of 2× down-sampling steps.
    pub depth: usize,
    pub base_channels: usize,
    /// Spread of the Gaussian training target.
    pub sigma1: f64,
    /// Spread of the Gaussian filter layer.
    pub sigma2: f64,
    pub softargmax_temperature: f64,
    pub variant: Variant,
    pub input_height: usize,
    pub input_width: usize,
    /// Train against a tanh target with this α instead of the Gaussian.
    pub tanh_alpha: Option<f64>,
    pub beta: f64,
    pub epsilon: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_channels: 3,
            depth: 3,
            base_channels: 8,
            sigma1: 2.0,
            sigma2: 1.0,
            softargmax_temperature: 0.1,
            variant: Variant::HeatmapTarget,
            input_height: 64,
            input_width: 96,
            tanh_alpha: None,
            beta: 2.0,
            epsilon: 1e-6,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 || self.base_channels == 0 {
            return Err(Error::invalid("input and base channel counts must be positive"));
        }
        let cell = 1usize
            .checked_shl(self.depth as u32)
            .filter(|_| self.depth < 16)
            .ok_or_else(|| Error::invalid(format!("depth {} is too large", self.depth)))?;
        if self.input_height == 0
            || self.input_width == 0
            || !self.input_height.is_multiple_of(cell)
            || !self.input_width.is_multiple_of(cell)
        {
            return Err(Error::invalid(format!(
                "input {}x{} must be a positive multiple of 2^depth = {cell}",
                self.input_height, self.input_width
            )));
        }
        self.target_distribution().validate()?;
        GaussianLayerSpec::new(self.sigma2).kernel::<f64>()?;
        self.soft_argmax().validate()?;
        self.loss_config().validate()
    }

    pub fn target_distribution(&self) -> Distribution {
        match self.tanh_alpha {
            Some(alpha) => Distribution::Tanh { alpha },
            None => Distribution::Gaussian { sigma1: self.sigma1 },
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            beta: self.beta,
            epsilon: self.epsilon,
            variant: self.variant,
        }
    }

    pub fn soft_argmax(&self) -> SoftArgmaxSpec {
        SoftArgmaxSpec::with_temperature(self.softargmax_temperature)
    }

    pub fn gaussian_layer(&self) -> GaussianLayerSpec {
        GaussianLayerSpec::new(self.sigma2)
    }

    fn channels_at(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// `(name, kernel size, in channels, out channels)` of every convolution, in parameter order.
    pub fn conv_layers(&self) -> Vec<(String, usize, usize, usize)> {
        let mut out = Vec::new();
        let mut cin = self.input_channels;
        for l in 0..=self.depth {
            let c = self.channels_at(l);
            out.push((format!("enc{l}.conv0"), 3, cin, c));
            out.push((format!("enc{l}.conv1"), 3, c, c));
            cin = c;
        }
        for l in (0..self.depth).rev() {
            let c = self.channels_at(l);
            out.push((format!("dec{l}.conv0"), 3, self.channels_at(l + 1) + c, c));
            out.push((format!("dec{l}.conv1"), 3, c, c));
        }
        out.push(("head".to_string(), 1, self.channels_at(0), 1));
        out
    }
}

/// Named parameter grids in a fixed order: for each convolution `<name>.w` then `<name>.b`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights<T: Real = f64> {
    params: Vec<(String, Grid<T>)>,
}

impl<T: Real> ModelWeights<T> {
    pub fn new(params: Vec<(String, Grid<T>)>) -> Result<Self> {
        for (i, (name, _)) in params.iter().enumerate() {
            if params[..i].iter().any(|(n, _)| n == name) {
                return Err(Error::invalid(format!("duplicate parameter name {name}")));
            }
        }
        Ok(Self { params })
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Grid<T>> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, g)| g)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Grid<T>)> {
        self.params.iter().map(|(n, g)| (n.as_str(), g))
    }

    pub fn grids(&self) -> impl Iterator<Item = &Grid<T>> {
        self.params.iter().map(|(_, g)| g)
    }

    pub fn grids_mut(&mut self) -> impl Iterator<Item = &mut Grid<T>> {
        self.params.iter_mut().map(|(_, g)| g)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|(_, g)| g.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ModelWeights<U> {
        ModelWeights {
            params: self.params.iter().map(|(n, g)| (n.clone(), g.cast())).collect(),
        }
    }

    /// Check that names and shapes are exactly those `cfg` builds.
    pub fn check_config(&self, cfg: &ModelConfig) -> Result<()> {
        let expected = expected_shapes(cfg);
        if expected.len() != self.params.len() {
            return Err(Error::shape(
                "weights",
                format!("expected {} parameters, found {}", expected.len(), self.params.len()),
            ));
        }
        for ((name, shape), (have, grid)) in expected.iter().zip(&self.params) {
            if name != have || *shape != grid.shape() {
                return Err(Error::shape(
                    "weights",
                    format!("expected {name} {shape:?}, found {have} {:?}", grid.shape()),
                ));
            }
        }
        Ok(())
    }

    /// `HW01`: magic, u32 LE count, then per parameter a u32 LE name length,
    /// the UTF-8 name and the grid as a complete HM01 block.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = HW01_MAGIC.to_vec();
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, grid) in &self.params {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            grid.write_hm01(&mut out).expect("writing to a Vec cannot fail");
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |d: String| Error::format("HW01 weights", d);
        let mut r = Cursor::new(bytes);
        let mut word = [0u8; 4];
        r.read_exact(&mut word).map_err(|e| fmt(e.to_string()))?;
        if &word != HW01_MAGIC {
            return Err(fmt(format!("bad magic {word:?}")));
        }
        r.read_exact(&mut word).map_err(|e| fmt(e.to_string()))?;
        let count = u32::from_le_bytes(word) as usize;
        let mut params = Vec::with_capacity(count.min(1024));
        for i in 0..count {
            r.read_exact(&mut word).map_err(|e| fmt(format!("parameter {i}: {e}")))?;
            let len = u32::from_le_bytes(word) as usize;
            if len > bytes.len() {
                return Err(fmt(format!("parameter {i}: name length {len} exceeds file size")));
            }
            let mut name = vec![0u8; len];
            r.read_exact(&mut name).map_err(|e| fmt(format!("parameter {i}: {e}")))?;
            let name = String::from_utf8(name).map_err(|e| fmt(format!("parameter {i}: {e}")))?;
            let grid = Grid::<f64>::read_hm01(&mut r).map_err(|e| fmt(format!("parameter {name}: {e}")))?;
            params.push((name, grid.cast()));
        }
        if (r.position() as usize) != bytes.len() {
            return Err(fmt(format!("{} trailing bytes", bytes.len() - r.position() as usize)));
        }
        Self::new(params)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&crate::io::read_bytes(path)?)
    }
}

fn expected_shapes(cfg: &ModelConfig) -> Vec<(String, (usize, usize, usize))> {
    cfg.conv_layers()
        .into_iter()
        .flat_map(|(name, k, cin, cout)| [(format!("{name}.w"), (k, k, cin * cout)), (format!("{name}.b"), (1, 1, cout))])
        .collect()
}

/// He-normal kernels (`std = sqrt(2 / fan_in)`) and zero biases, deterministic in `seed`.
pub fn build_model<T: Real>(cfg: &ModelConfig, seed: u64) -> Result<ModelWeights<T>> {
    cfg.validate()?;
    let mut rng = derived_rng(seed, 0xB01D, 0);
    let mut params = Vec::new();
    for (name, k, cin, cout) in cfg.conv_layers() {
        let std = (2.0 / (k * k * cin) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let w: Vec<T> = (0..k * k * cin * cout).map(|_| T::of(normal.sample(&mut rng))).collect();
        params.push((format!("{name}.w"), Grid::from_vec(k, k, cin * cout, w)?));
        params.push((format!("{name}.b"), Grid::zeros(1, 1, cout)));
    }
    ModelWeights::new(params)
}

/// Graph nodes of a forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardNodes {
    pub logits: NodeId,
    pub stage1: NodeId,
    pub stage2: NodeId,
}

fn conv(tape: &mut Tape<impl Real>, x: NodeId, params: &[NodeId], next: &mut usize, relu: bool) -> Result<NodeId> {
    let kernel = params[*next];
    let bias = params[*next + 1];
    *next += 2;
    let padding = tape.value(kernel).height() / 2;
    let y = ops::conv2d(tape, x, &ConvSpec { kernel, bias, stride: 1, padding })?;
    Ok(if relu { ops::relu(tape, y) } else { y })
}

/// U-Net logits, one channel at input resolution. `params` are the weight nodes in parameter order.
pub fn unet<T: Real>(tape: &mut Tape<T>, cfg: &ModelConfig, params: &[NodeId], input: NodeId) -> Result<NodeId> {
    let expected = 2 * cfg.conv_layers().len();
    if params.len() != expected {
        return Err(Error::shape("unet", format!("expected {expected} parameter nodes, got {}", params.len())));
    }
    let mut next = 0;
    let mut skips = Vec::with_capacity(cfg.depth);
    let mut x = input;
    for l in 0..=cfg.depth {
        if l > 0 {
            x = ops::maxpool2(tape, x)?;
        }
        x = conv(tape, x, params, &mut next, true)?;
        x = conv(tape, x, params, &mut next, true)?;
        if l < cfg.depth {
            skips.push(x);
        }
    }
    for skip in skips.into_iter().rev() {
        let up = ops::upsample_nearest(tape, x);
        x = ops::concat_channels(tape, up, skip)?;
        x = conv(tape, x, params, &mut next, true)?;
        x = conv(tape, x, params, &mut next, true)?;
    }
    conv(tape, x, params, &mut next, false)
}

/// Record the full two-stage forward pass.
pub fn forward_nodes<T: Real>(tape: &mut Tape<T>, cfg: &ModelConfig, params: &[NodeId], image: NodeId) -> Result<ForwardNodes> {
    let (h, w, c) = tape.value(image).shape();
    if (h, w, c) != (cfg.input_height, cfg.input_width, cfg.input_channels) {
        return Err(Error::shape(
            "forward",
            format!(
                "image {h}x{w}x{c} vs model input {}x{}x{}",
                cfg.input_height, cfg.input_width, cfg.input_channels
            ),
        ));
    }
    let logits = unet(tape, cfg, params, image)?;
    let prob = ops::sigmoid(tape, logits);
    let stage1 = gaussian_filter(tape, prob, &cfg.gaussian_layer())?;
    let stage2 = conv_soft_argmax(tape, stage1, &cfg.soft_argmax())?;
    Ok(ForwardNodes { logits, stage1, stage2 })
}

fn to_heatmap<T: Real>(g: &Grid<T>) -> Result<Heatmap<T>> {
    // Rounding can push a value an ulp outside [0, 1].
    Heatmap::new(g.map(|v| v.max(T::zero()).min(T::one())))
}

/// Stage-1 and stage-2 heatmaps for one image.
pub fn forward<T: Real>(weights: &ModelWeights<T>, cfg: &ModelConfig, image: &Grid<T>) -> Result<(Heatmap<T>, Heatmap<T>)> {
    weights.check_config(cfg)?;
    let mut tape = Tape::new();
    let params: Vec<NodeId> = weights.grids().map(|g| tape.constant(g.clone())).collect();
    let x = tape.constant(image.clone());
    let nodes = forward_nodes(&mut tape, cfg, &params, x)?;
    Ok((to_heatmap(tape.value(nodes.stage1))?, to_heatmap(tape.value(nodes.stage2))?))
}

/// Points decoded from stage 2 at threshold 0.5.
pub fn predict<T: Real>(weights: &ModelWeights<T>, cfg: &ModelConfig, image: &Grid<T>) -> Result<PointSet> {
    let (_, stage2) = forward(weights, cfg, image)?;
    decode(&stage2, &DecodeOptions::default())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            depth: 1,
            base_channels: 4,
            input_height: 16,
            input_width: 16,
            ..ModelConfig::default()
        }
    }

    fn image(cfg: &ModelConfig) -> Grid<f64> {
        Grid::from_fn(cfg.input_height, cfg.input_width, 3, |y, x, c| ((y * 5 + x * 3 + c) % 13) as f64 / 12.0)
    }

    #[test]
    fn build_is_deterministic() {
        let a = build_model::<f64>(&tiny(), 7).unwrap();
        let b = build_model::<f64>(&tiny(), 7).unwrap();
        let c = build_model::<f64>(&tiny(), 8).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert_ne!(a, c);
    }

    #[test]
    fn parameter_names_and_shapes() {
        let cfg = tiny();
        let w = build_model::<f64>(&cfg, 0).unwrap();
        let names: Vec<&str> = w.iter().map(|(n, _)| n).collect();
        assert_eq!(
            names,
            [
                "enc0.conv0.w", "enc0.conv0.b", "enc0.conv1.w", "enc0.conv1.b", "enc1.conv0.w", "enc1.conv0.b",
                "enc1.conv1.w", "enc1.conv1.b", "dec0.conv0.w", "dec0.conv0.b", "dec0.conv1.w", "dec0.conv1.b",
                "head.w", "head.b",
            ]
        );
        assert_eq!(w.get("dec0.conv0.w").unwrap().shape(), (3, 3, 12 * 4));
        assert_eq!(w.get("head.w").unwrap().shape(), (1, 1, 4));
        assert!(w.get("enc1.conv1.b").unwrap().as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn he_init_statistics() {
        let cfg = ModelConfig::default();
        let w = build_model::<f64>(&cfg, 3).unwrap();
        for (name, k, cin, _) in cfg.conv_layers() {
            let g = w.get(&format!("{name}.w")).unwrap();
            if g.len() < 256 {
                continue;
            }
            let n = g.len() as f64;
            let mean = g.sum() / n;
            let std = (g.as_slice().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            let want = (2.0 / (k * k * cin) as f64).sqrt();
            assert!((std / want - 1.0).abs() < 0.2, "{name}: {std} vs {want}");
        }
    }

    #[test]
    fn forward_shapes_and_bounds() {
        let cfg = tiny();
        let w = build_model::<f64>(&cfg, 1).unwrap();
        let (s1, s2) = forward(&w, &cfg, &image(&cfg)).unwrap();
        assert_eq!((s1.height(), s1.width()), (16, 16));
        assert_eq!((s2.height(), s2.width()), (16, 16));
        for y in 0..16 {
            for x in 0..16 {
                let v = s2.at(y, x);
                assert!((0.0..=1.0).contains(&v) && (0.0..=1.0).contains(&s1.at(y, x)));
                let mut m = f64::NEG_INFINITY;
                for yy in y.saturating_sub(1)..(y + 2).min(16) {
                    for xx in x.saturating_sub(1)..(x + 2).min(16) {
                        m = m.max(s1.at(yy, xx));
                    }
                }
                assert!(v <= m + 1e-12);
            }
        }
    }

    #[test]
    fn predict_is_deterministic() {
        let cfg = tiny();
        let w = build_model::<f64>(&cfg, 1).unwrap();
        let img = image(&cfg);
        assert_eq!(predict(&w, &cfg, &img).unwrap(), predict(&w, &cfg, &img).unwrap());
    }

    #[test]
    fn shape_errors() {
        let cfg = tiny();
        let w = build_model::<f64>(&cfg, 1).unwrap();
        assert!(forward(&w, &cfg, &Grid::zeros(8, 16, 3)).is_err());
        let other = ModelConfig { base_channels: 2, ..tiny() };
        assert!(forward(&w, &other, &image(&cfg)).is_err());
        assert!(ModelConfig { input_width: 17, ..tiny() }.validate().is_err());
        assert!(build_model::<f64>(&ModelConfig { sigma2: 0.0, ..tiny() }, 0).is_err());
    }

    #[test]
    fn hw01_round_trip_is_bit_exact() {
        let w = build_model::<f64>(&tiny(), 5).unwrap();
        let bytes = w.to_bytes();
        assert_eq!(&bytes[..4], b"HW01");
        let back = ModelWeights::<f64>::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert!(ModelWeights::<f64>::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(ModelWeights::<f64>::from_bytes(&extra).is_err());
    }

    #[test]
    fn duplicate_names_rejected() {
        let g = Grid::<f64>::zeros(1, 1, 1);
        assert!(ModelWeights::new(vec![("a".into(), g.clone()), ("a".into(), g)]).is_err());
    }
}
