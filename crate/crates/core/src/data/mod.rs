//! Training samples and everything that produces or transforms them.

pub mod augment;
pub mod dataset;
pub mod split;
pub mod synth;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::codec::{encode, Distribution, Heatmap, PointSet};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::scalar::Real;

pub use augment::{augment, AugmentConfig};
pub use split::{group_kfold, Fold};
pub use synth::{synth_dataset, SynthConfig};

/// One RGB image (values in `[0, 1]`) with its point labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Grid<f64>,
    pub points: PointSet,
    pub group_id: String,
    pub sample_id: String,
}

impl Sample {
    pub fn new(image: Grid<f64>, points: PointSet, group_id: impl Into<String>, sample_id: impl Into<String>) -> Result<Self> {
        if (image.height(), image.width()) != (points.height(), points.width()) {
            return Err(Error::shape(
                "sample",
                format!(
                    "image {}x{} vs labels {}x{}",
                    image.height(),
                    image.width(),
                    points.height(),
                    points.width()
                ),
            ));
        }
        if image.channels() != 3 {
            return Err(Error::shape("sample", format!("expected RGB image, got {} channels", image.channels())));
        }
        Ok(Self {
            image,
            points,
            group_id: group_id.into(),
            sample_id: sample_id.into(),
        })
    }
}

/// Stage-1 heatmap target and binary stage-2 mask, both rendered from points.
pub fn target_masks<T: Real>(points: &PointSet, heat: &Distribution) -> Result<(Heatmap<T>, Heatmap<T>)> {
    Ok((encode(points, heat)?, encode(points, &Distribution::Binary)?))
}

/// Independent RNG stream for a `(seed, stream, index)` triple.
pub fn derived_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos(u128::from(index) << 20);
    rng
}

/// Stable 64-bit hash of a string (FNV-1a), for seeding from sample ids.
pub fn stable_hash(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::Point;

    #[test]
    fn empty_points_give_zero_masks() {
        let (h, b) = target_masks::<f64>(&PointSet::empty(8, 8), &Distribution::Gaussian { sigma1: 2.0 }).unwrap();
        assert_eq!(h.grid().sum(), 0.0);
        assert_eq!(b.grid().sum(), 0.0);
    }

    #[test]
    fn binary_mask_counts_distinct_rasterized_points() {
        let cases: [(&[(f64, f64)], f64); 3] = [
            (&[(3.0, 3.0)], 1.0),
            (&[(3.2, 3.1), (2.8, 2.9)], 1.0),
            (&[(3.2, 3.1), (3.6, 3.1), (6.0, 1.0)], 3.0),
        ];
        for (pts, want) in cases {
            let ps = PointSet::new(8, 8, pts.iter().map(|&(x, y)| Point::new(x, y)).collect()).unwrap();
            let (_, b) = target_masks::<f64>(&ps, &Distribution::Gaussian { sigma1: 1.0 }).unwrap();
            assert_eq!(b.grid().sum(), want);
        }
    }

    #[test]
    fn sample_requires_matching_rgb_image() {
        let ps = PointSet::empty(4, 5);
        assert!(Sample::new(Grid::zeros(4, 5, 3), ps.clone(), "g", "s").is_ok());
        assert!(Sample::new(Grid::zeros(4, 5, 1), ps.clone(), "g", "s").is_err());
        assert!(Sample::new(Grid::zeros(5, 4, 3), ps, "g", "s").is_err());
    }

    #[test]
    fn derived_streams_differ_and_repeat() {
        use rand::Rng;
        let a: u64 = derived_rng(1, 2, 3).random();
        let b: u64 = derived_rng(1, 2, 3).random();
        let c: u64 = derived_rng(1, 2, 4).random();
        let d: u64 = derived_rng(1, 3, 3).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }
}
