//! On-disk datasets: `<id>.ppm` images with sibling labelme `<id>.json` labels.

use std::fs;
use std::path::{Path, PathBuf};

use super::Sample;
use crate::error::{Error, Result};
use crate::io::{annotations, netpbm, read_bytes, read_string, write_atomic};

/// A loaded sample plus the number of non-point shapes that were skipped.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub sample: Sample,
    pub ignored_shapes: usize,
}

/// Group of a sample: the explicit JSON field, else the stem before `__`, else the stem.
pub fn infer_group(stem: &str, explicit: Option<&str>) -> String {
    match explicit {
        Some(g) => g.to_string(),
        None => stem.split_once("__").map_or(stem, |(g, _)| g).to_string(),
    }
}

pub fn load_labelme(json_path: &Path, image_path: &Path) -> Result<Loaded> {
    let text = read_string(json_path)?;
    let parsed = annotations::parse_labelme(&text).map_err(|e| match e {
        Error::Format { what, detail } => Error::format(what, format!("{}: {detail}", json_path.display())),
        other => other,
    })?;
    let image = netpbm::decode::<f64>(&read_bytes(image_path)?)?;
    let image = match image.channels() {
        3 => image,
        1 => crate::grid::Grid::from_fn(image.height(), image.width(), 3, |y, x, _| image.get(y, x, 0)),
        c => return Err(Error::shape("load_labelme", format!("{}: {c} channels", image_path.display()))),
    };
    let stem = file_stem(json_path)?;
    let group = infer_group(&stem, parsed.group_id.as_deref());
    let sample = Sample::new(image, parsed.points, group, stem).map_err(|e| match e {
        Error::Shape { detail, .. } => Error::format(
            "dataset",
            format!("{} does not match its image: {detail}", json_path.display()),
        ),
        other => other,
    })?;
    Ok(Loaded {
        sample,
        ignored_shapes: parsed.ignored_shapes,
    })
}

fn file_stem(path: &Path) -> Result<String> {
    path.file_stem()
        .and_then(|s| s.to_str())
        .map(str::to_string)
        .ok_or_else(|| Error::invalid(format!("{} has no usable file name", path.display())))
}

/// Sorted `<stem>.json` files in `dir`.
pub fn label_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "json") && path.is_file() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Image that belongs to a label file: `<stem>.ppm`, else `<stem>.pgm`.
pub fn image_for(json_path: &Path) -> Result<PathBuf> {
    for ext in ["ppm", "pgm"] {
        let p = json_path.with_extension(ext);
        if p.is_file() {
            return Ok(p);
        }
    }
    Err(Error::invalid(format!("no .ppm or .pgm image next to {}", json_path.display())))
}

/// Load every labelled image in `dir`, ordered by sample id.
pub fn load_dir(dir: &Path) -> Result<Vec<Loaded>> {
    label_files(dir)?
        .iter()
        .map(|json| load_labelme(json, &image_for(json)?))
        .collect()
}

pub fn load_samples(dir: &Path) -> Result<Vec<Sample>> {
    Ok(load_dir(dir)?.into_iter().map(|l| l.sample).collect())
}

/// Write samples as 8-bit PPM + labelme JSON (group recorded in the JSON).
pub fn write_dir(dir: &Path, samples: &[Sample]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for s in samples {
        let image_name = format!("{}.ppm", s.sample_id);
        write_atomic(&dir.join(&image_name), &netpbm::encode_8bit(&s.image)?)?;
        let json = annotations::to_labelme(&s.points, &image_name, Some(&s.group_id));
        write_atomic(&dir.join(format!("{}.json", s.sample_id)), json.as_bytes())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{synth_dataset, SynthConfig};

    #[test]
    fn group_inference() {
        assert_eq!(infer_group("op3__f0012", None), "op3");
        assert_eq!(infer_group("frame", None), "frame");
        assert_eq!(infer_group("op3__f0012", Some("x")), "x");
    }

    #[test]
    fn write_then_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig { n_images: 3, height: 32, width: 40, dots: (3, 4), seed: 2, ..SynthConfig::default() };
        let data = synth_dataset(&cfg).unwrap();
        write_dir(dir.path(), &data).unwrap();
        let back = load_samples(dir.path()).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in data.iter().zip(&back) {
            assert_eq!(a.sample_id, b.sample_id);
            assert_eq!(a.group_id, b.group_id);
            assert_eq!(a.points, b.points);
            for (u, v) in a.image.as_slice().iter().zip(b.image.as_slice()) {
                assert!((u - v).abs() <= 0.5 / 255.0 + 1e-12);
            }
        }
    }

    #[test]
    fn polygon_shapes_are_counted_not_loaded() {
        let dir = tempfile::tempdir().unwrap();
        let json = r#"{"shapes": [
            {"label": "a", "points": [[1, 1], [2, 2], [1, 3]], "shape_type": "polygon"},
            {"label": "s", "points": [[2.5, 1.5]], "shape_type": "point"},
            {"label": "s", "points": [[0.5, 3.0]], "shape_type": "point"}
        ], "imageHeight": 4, "imageWidth": 4}"#;
        fs::write(dir.path().join("op1__a.json"), json).unwrap();
        fs::write(dir.path().join("op1__a.ppm"), b"P6\n4 4\n255\n".iter().copied().chain([0u8; 48]).collect::<Vec<_>>()).unwrap();
        let loaded = load_dir(dir.path()).unwrap();
        assert_eq!(loaded[0].sample.points.len(), 2);
        assert_eq!(loaded[0].ignored_shapes, 1);
        assert_eq!(loaded[0].sample.group_id, "op1");
    }

    #[test]
    fn mismatched_dims_and_missing_images_rejected() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.json"), r#"{"shapes": [], "imageHeight": 5, "imageWidth": 4}"#).unwrap();
        assert!(load_dir(dir.path()).is_err());
        fs::write(dir.path().join("a.ppm"), b"P6\n4 4\n255\n".iter().copied().chain([0u8; 48]).collect::<Vec<_>>()).unwrap();
        let err = load_dir(dir.path()).unwrap_err().to_string();
        assert!(err.contains("a.json"), "{err}");
    }
}
