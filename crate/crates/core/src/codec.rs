//! Point sets ↔ likelihood heatmaps.
//!
//! Encoding places a radial profile at every point and combines overlapping
//! profiles with a per-pixel maximum. Decoding thresholds, labels connected
//! components and returns the intensity-weighted centroid of each component.
//!
//! Pixel `(row y, column x)` has its center at the coordinate `(x, y)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::scalar::Real;

/// A sub-pixel image location.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    /// Nearest pixel `(row, col)`, clamped into the image.
    pub fn pixel(&self, height: usize, width: usize) -> (usize, usize) {
        let r = (self.y.round().max(0.0) as usize).min(height - 1);
        let c = (self.x.round().max(0.0) as usize).min(width - 1);
        (r, c)
    }
}

/// The points labelled (or predicted) in one image. May be empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PointsFile", into = "PointsFile")]
pub struct PointSet {
    height: usize,
    width: usize,
    points: Vec<Point>,
}

/// Canonical on-disk shape: `{"image_height", "image_width", "points": [[x, y], …]}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PointsFile {
    pub image_height: usize,
    pub image_width: usize,
    pub points: Vec<[f64; 2]>,
}

impl TryFrom<PointsFile> for PointSet {
    type Error = Error;

    fn try_from(f: PointsFile) -> Result<Self> {
        PointSet::new(
            f.image_height,
            f.image_width,
            f.points.into_iter().map(|[x, y]| Point::new(x, y)).collect(),
        )
    }
}

impl From<PointSet> for PointsFile {
    fn from(p: PointSet) -> Self {
        PointsFile {
            image_height: p.height,
            image_width: p.width,
            points: p.points.iter().map(|p| [p.x, p.y]).collect(),
        }
    }
}

impl PointSet {
    /// Validates `0 ≤ x < width` and `0 ≤ y < height` for every point.
    pub fn new(height: usize, width: usize, points: Vec<Point>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid(format!("image size {height}x{width} must be positive")));
        }
        for (index, p) in points.iter().enumerate() {
            let inside = p.x.is_finite() && p.y.is_finite() && p.x >= 0.0 && p.y >= 0.0 && p.x < width as f64 && p.y < height as f64;
            if !inside {
                return Err(Error::PointOutOfBounds {
                    index,
                    x: p.x,
                    y: p.y,
                    width,
                    height,
                });
            }
        }
        Ok(Self { height, width, points })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            points: Vec::new(),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn contains(&self, p: &Point) -> bool {
        p.x >= 0.0 && p.y >= 0.0 && p.x < self.width as f64 && p.y < self.height as f64
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("point sets always serialize")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Radial profile used to render each point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Distribution {
    /// `exp(−r² / (2σ₁²))`.
    Gaussian { sigma1: f64 },
    /// `1 − tanh(r / α)`.
    Tanh { alpha: f64 },
    /// 1 at the nearest pixel of each point, 0 elsewhere.
    Binary,
}

impl Distribution {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Distribution::Gaussian { sigma1 } if !(sigma1 > 0.0 && sigma1.is_finite()) => {
                Err(Error::invalid(format!("gaussian sigma1 must be positive, got {sigma1}")))
            }
            Distribution::Tanh { alpha } if !(alpha > 0.0 && alpha.is_finite()) => {
                Err(Error::invalid(format!("tanh alpha must be positive, got {alpha}")))
            }
            _ => Ok(()),
        }
    }

    /// Profile value at distance `r ≥ 0`.
    pub fn value_at(&self, r: f64) -> f64 {
        match *self {
            Distribution::Gaussian { sigma1 } => (-(r * r) / (2.0 * sigma1 * sigma1)).exp(),
            Distribution::Tanh { alpha } => 1.0 - (r / alpha).tanh(),
            Distribution::Binary => {
                if r == 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub fn label(&self) -> String {
        match *self {
            Distribution::Gaussian { sigma1 } => format!("gauss(sigma1={sigma1})"),
            Distribution::Tanh { alpha } => format!("tanh(alpha={alpha})"),
            Distribution::Binary => "binary".to_string(),
        }
    }
}

/// Profile values for a list of radii.
pub fn distribution_profile(dist: &Distribution, radii: &[f64]) -> Result<Vec<f64>> {
    dist.validate()?;
    radii
        .iter()
        .map(|&r| {
            if r >= 0.0 {
                Ok(dist.value_at(r))
            } else {
                Err(Error::invalid(format!("radius {r} is negative")))
            }
        })
        .collect()
}

/// Single-channel grid with every value in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap<T: Real = f64>(Grid<T>);

impl<T: Real> Heatmap<T> {
    pub fn new(grid: Grid<T>) -> Result<Self> {
        if grid.channels() != 1 {
            return Err(Error::shape("heatmap", format!("expected 1 channel, got {}", grid.channels())));
        }
        if let Some(v) = grid.as_slice().iter().find(|v| !(**v >= T::zero() && **v <= T::one())) {
            return Err(Error::invalid(format!("heatmap value {v} outside [0, 1]")));
        }
        Ok(Self(grid))
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self(Grid::zeros(height, width, 1))
    }

    pub fn grid(&self) -> &Grid<T> {
        &self.0
    }

    pub fn into_grid(self) -> Grid<T> {
        self.0
    }

    pub fn height(&self) -> usize {
        self.0.height()
    }

    pub fn width(&self) -> usize {
        self.0.width()
    }

    /// Value at row `y`, column `x`.
    pub fn at(&self, y: usize, x: usize) -> T {
        self.0.get(y, x, 0)
    }

    /// Whether every value is exactly 0 or 1.
    pub fn is_binary(&self) -> bool {
        self.0.as_slice().iter().all(|&v| v == T::zero() || v == T::one())
    }
}

/// Render a point set as a heatmap of the point set's image size.
pub fn encode<T: Real>(points: &PointSet, dist: &Distribution) -> Result<Heatmap<T>> {
    dist.validate()?;
    let (h, w) = (points.height(), points.width());
    let mut data = vec![0.0f64; h * w];
    match dist {
        Distribution::Binary => {
            for p in points.points() {
                let (r, c) = p.pixel(h, w);
                data[r * w + c] = 1.0;
            }
        }
        _ => {
            for p in points.points() {
                for y in 0..h {
                    for x in 0..w {
                        let r = (x as f64 - p.x).hypot(y as f64 - p.y);
                        let v = dist.value_at(r);
                        let slot = &mut data[y * w + x];
                        if v > *slot {
                            *slot = v;
                        }
                    }
                }
            }
        }
    }
    let grid = Grid::from_vec(h, w, 1, data.into_iter().map(|v| T::of(v.clamp(0.0, 1.0))).collect())?;
    Ok(Heatmap(grid))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Connectivity {
    Four,
    Eight,
}

impl Connectivity {
    pub fn from_count(n: u8) -> Result<Self> {
        match n {
            4 => Ok(Connectivity::Four),
            8 => Ok(Connectivity::Eight),
            _ => Err(Error::invalid(format!("connectivity must be 4 or 8, got {n}"))),
        }
    }

    fn offsets(self) -> &'static [(isize, isize)] {
        match self {
            Connectivity::Four => &[(-1, 0), (1, 0), (0, -1), (0, 1)],
            Connectivity::Eight => &[(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeOptions {
    pub threshold: f64,
    pub connectivity: Connectivity,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            connectivity: Connectivity::Eight,
        }
    }
}

/// One connected above-threshold region.
#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub centroid: Point,
    pub pixels: usize,
    pub mass: f64,
    pub peak: f64,
}

/// Label connected components of `value ≥ threshold` and measure each.
/// Components are returned in ascending `(y, x)` order of their centroids.
pub fn components<T: Real>(heatmap: &Heatmap<T>, opts: &DecodeOptions) -> Result<Vec<Component>> {
    if !(opts.threshold > 0.0 && opts.threshold < 1.0) {
        return Err(Error::invalid(format!("threshold {} must lie in (0, 1)", opts.threshold)));
    }
    let (h, w) = (heatmap.height(), heatmap.width());
    let t = T::of(opts.threshold);
    let vals = heatmap.grid().as_slice();
    let mut visited = vec![false; h * w];
    let mut stack = Vec::new();
    let mut out = Vec::new();
    for start in 0..h * w {
        if visited[start] || vals[start] < t {
            continue;
        }
        visited[start] = true;
        stack.push(start);
        let (mut sx, mut sy, mut mass, mut peak, mut pixels) = (0.0, 0.0, 0.0, 0.0f64, 0usize);
        while let Some(i) = stack.pop() {
            let (y, x) = (i / w, i % w);
            let v = vals[i].to_f64_lossy();
            sx += v * x as f64;
            sy += v * y as f64;
            mass += v;
            peak = peak.max(v);
            pixels += 1;
            for &(dy, dx) in opts.connectivity.offsets() {
                let (ny, nx) = (y as isize + dy, x as isize + dx);
                if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if !visited[j] && vals[j] >= t {
                    visited[j] = true;
                    stack.push(j);
                }
            }
        }
        out.push(Component {
            centroid: Point::new(sx / mass, sy / mass),
            pixels,
            mass,
            peak,
        });
    }
    out.sort_by(|a, b| {
        a.centroid
            .y
            .total_cmp(&b.centroid.y)
            .then(a.centroid.x.total_cmp(&b.centroid.x))
    });
    Ok(out)
}

/// Heatmap → point set: threshold, connected components, intensity-weighted centroids.
pub fn decode<T: Real>(heatmap: &Heatmap<T>, opts: &DecodeOptions) -> Result<PointSet> {
    let points = components(heatmap, opts)?.into_iter().map(|c| c.centroid).collect();
    PointSet::new(heatmap.height(), heatmap.width(), points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ps(h: usize, w: usize, pts: &[(f64, f64)]) -> PointSet {
        PointSet::new(h, w, pts.iter().map(|&(x, y)| Point::new(x, y)).collect()).unwrap()
    }

    #[test]
    fn gaussian_peak_and_neighbour() {
        let hm: Heatmap = encode(&ps(11, 11, &[(5.0, 5.0)]), &Distribution::Gaussian { sigma1: 1.0 }).unwrap();
        assert_eq!(hm.at(5, 5), 1.0);
        // (x=6, y=5): r = 1, exp(-1/2)
        assert!((hm.at(5, 6) - 0.606_530_659_712_633_4).abs() < 1e-12);
    }

    #[test]
    fn coincident_points_are_idempotent() {
        let d = Distribution::Gaussian { sigma1: 2.0 };
        let one: Heatmap = encode(&ps(16, 16, &[(7.3, 8.1)]), &d).unwrap();
        let two: Heatmap = encode(&ps(16, 16, &[(7.3, 8.1), (7.3, 8.1)]), &d).unwrap();
        assert_eq!(one, two);
    }

    #[test]
    fn empty_set_encodes_to_zero_and_decodes_to_empty() {
        for d in [Distribution::Gaussian { sigma1: 1.0 }, Distribution::Tanh { alpha: 7.0 }, Distribution::Binary] {
            let hm: Heatmap = encode(&PointSet::empty(9, 12), &d).unwrap();
            assert!(hm.grid().as_slice().iter().all(|&v| v == 0.0));
            assert!(decode(&hm, &DecodeOptions::default()).unwrap().is_empty());
        }
    }

    #[test]
    fn out_of_bounds_point_rejected() {
        assert!(matches!(
            PointSet::new(10, 10, vec![Point::new(10.0, 3.0)]),
            Err(Error::PointOutOfBounds { index: 0, .. })
        ));
        assert!(PointSet::new(10, 10, vec![Point::new(-0.1, 3.0)]).is_err());
        assert!(PointSet::new(10, 10, vec![Point::new(9.99, 0.0)]).is_ok());
    }

    #[test]
    fn single_point_round_trip() {
        let hm: Heatmap = encode(&ps(21, 21, &[(5.0, 5.0)]), &Distribution::Gaussian { sigma1: 2.0 }).unwrap();
        let got = decode(&hm, &DecodeOptions::default()).unwrap();
        assert_eq!(got.len(), 1);
        assert!(got.points()[0].distance(&Point::new(5.0, 5.0)) < 0.5);
    }

    #[test]
    fn two_points_twenty_apart_round_trip() {
        let src = [(10.0, 15.0), (30.0, 15.0)];
        let hm: Heatmap = encode(&ps(32, 48, &src), &Distribution::Gaussian { sigma1: 2.0 }).unwrap();
        let got = decode(&hm, &DecodeOptions::default()).unwrap();
        assert_eq!(got.len(), 2);
        for (p, &(x, y)) in got.points().iter().zip(&src) {
            assert!(p.distance(&Point::new(x, y)) < 0.5);
        }
    }

    #[test]
    fn profiles() {
        let g = distribution_profile(&Distribution::Gaussian { sigma1: 1.0 }, &[0.0]).unwrap();
        assert_eq!(g, vec![1.0]);
        let t = distribution_profile(&Distribution::Tanh { alpha: 7.0 }, &[0.0, 7.0]).unwrap();
        assert_eq!(t[0], 1.0);
        assert!((t[1] - 0.238_405_844_044_234).abs() < 1e-12);
        assert!(distribution_profile(&Distribution::Tanh { alpha: 7.0 }, &[-1.0]).is_err());
        assert!(distribution_profile(&Distribution::Gaussian { sigma1: 0.0 }, &[1.0]).is_err());
    }

    #[test]
    fn tanh_is_sharper_near_center_than_matching_gaussian() {
        // alpha = 3.5 sigma: the tanh profile falls faster just off the peak.
        let g = Distribution::Gaussian { sigma1: 2.0 }.value_at(0.5);
        let t = Distribution::Tanh { alpha: 7.0 }.value_at(0.5);
        assert!(t < g);
    }

    #[test]
    fn binary_marks_nearest_pixel() {
        let hm: Heatmap = encode(&ps(8, 8, &[(2.4, 3.6), (2.6, 3.6), (7.9, 7.9)]), &Distribution::Binary).unwrap();
        assert!(hm.is_binary());
        assert_eq!(hm.grid().sum(), 3.0);
        assert_eq!(hm.at(4, 2), 1.0);
        assert_eq!(hm.at(4, 3), 1.0);
        assert_eq!(hm.at(7, 7), 1.0);
    }

    #[test]
    fn decode_orders_by_row_then_column() {
        let d = Distribution::Gaussian { sigma1: 1.0 };
        let hm: Heatmap = encode(&ps(30, 30, &[(20.0, 20.0), (5.0, 20.0), (25.0, 4.0)]), &d).unwrap();
        let got = decode(&hm, &DecodeOptions::default()).unwrap();
        let xs: Vec<f64> = got.points().iter().map(|p| p.x.round()).collect();
        assert_eq!(xs, vec![25.0, 5.0, 20.0]);
    }

    #[test]
    fn connectivity_changes_diagonal_grouping() {
        let mut g = Grid::<f64>::zeros(4, 4, 1);
        g.set(1, 1, 0, 1.0);
        g.set(2, 2, 0, 1.0);
        let hm = Heatmap::new(g).unwrap();
        let eight = decode(&hm, &DecodeOptions::default()).unwrap();
        let four = decode(
            &hm,
            &DecodeOptions {
                connectivity: Connectivity::Four,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(eight.len(), 1);
        assert_eq!(four.len(), 2);
    }

    #[test]
    fn invalid_threshold_rejected() {
        let hm = Heatmap::<f64>::zeros(3, 3);
        for t in [0.0, 1.0, -0.2] {
            assert!(decode(&hm, &DecodeOptions { threshold: t, ..Default::default() }).is_err());
        }
    }

    #[test]
    fn border_components_are_kept() {
        let hm: Heatmap = encode(&ps(16, 16, &[(0.0, 0.0)]), &Distribution::Gaussian { sigma1: 1.0 }).unwrap();
        let got = decode(&hm, &DecodeOptions::default()).unwrap();
        assert_eq!(got.len(), 1);
    }

    #[test]
    fn canonical_json_shape() {
        let p = ps(4, 5, &[(1.5, 2.0)]);
        let v: serde_json::Value = serde_json::from_str(&p.to_json()).unwrap();
        assert_eq!(v["image_height"], 4);
        assert_eq!(v["image_width"], 5);
        assert_eq!(v["points"][0][0], 1.5);
        assert_eq!(PointSet::from_json(&p.to_json()).unwrap(), p);
        assert!(PointSet::from_json(r#"{"image_height":4,"image_width":5,"points":[[5.0,1.0]]}"#).is_err());
    }

    proptest! {
        #[test]
        fn encode_values_in_unit_interval_and_monotone_in_points(
            pts in proptest::collection::vec((0.0f64..24.0, 0.0f64..16.0), 0..6),
            extra in (0.0f64..24.0, 0.0f64..16.0),
            sigma in 0.5f64..4.0,
            use_tanh in any::<bool>(),
        ) {
            let d = if use_tanh { Distribution::Tanh { alpha: 3.5 * sigma } } else { Distribution::Gaussian { sigma1: sigma } };
            let base = ps(16, 24, &pts);
            let mut more_pts = pts.clone();
            more_pts.push(extra);
            let more = ps(16, 24, &more_pts);
            let a: Heatmap = encode(&base, &d).unwrap();
            let b: Heatmap = encode(&more, &d).unwrap();
            for (x, y) in a.grid().as_slice().iter().zip(b.grid().as_slice()) {
                prop_assert!((0.0..=1.0).contains(x));
                prop_assert!(y >= x);
            }
        }

        #[test]
        fn decode_is_translation_equivariant(dx in 0usize..6, dy in 0usize..6, fx in 0.0f64..1.0, fy in 0.0f64..1.0) {
            let d = Distribution::Gaussian { sigma1: 1.5 };
            let p0 = (10.0 + fx, 10.0 + fy);
            let a: Heatmap = encode(&ps(32, 32, &[p0]), &d).unwrap();
            let mut shifted = Grid::<f64>::zeros(32, 32, 1);
            for y in 0..32 - dy {
                for x in 0..32 - dx {
                    shifted.set(y + dy, x + dx, 0, a.at(y, x));
                }
            }
            let da = decode(&a, &DecodeOptions::default()).unwrap();
            let db = decode(&Heatmap::new(shifted).unwrap(), &DecodeOptions::default()).unwrap();
            prop_assert_eq!(da.len(), 1);
            prop_assert_eq!(db.len(), 1);
            prop_assert!((db.points()[0].x - da.points()[0].x - dx as f64).abs() < 1e-9);
            prop_assert!((db.points()[0].y - da.points()[0].y - dy as f64).abs() < 1e-9);
        }
    }
}
