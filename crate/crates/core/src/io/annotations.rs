//! Point annotations: the canonical points file and labelme-style JSON.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::codec::{Point, PointSet};
use crate::error::{Error, Result};

/// A labelme shape. Only `shape_type == "point"` entries carry suture points.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabelmeShape {
    #[serde(default)]
    pub label: String,
    pub points: Vec<[f64; 2]>,
    #[serde(default = "default_shape_type")]
    pub shape_type: String,
    #[serde(default)]
    pub group_id: Option<Value>,
    #[serde(default)]
    pub flags: Value,
}

fn default_shape_type() -> String {
    // labelme's own default when the key is absent
    "polygon".to_string()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabelmeFile {
    #[serde(default = "default_version")]
    pub version: String,
    #[serde(default)]
    pub flags: Value,
    pub shapes: Vec<LabelmeShape>,
    #[serde(rename = "imagePath", default)]
    pub image_path: String,
    #[serde(rename = "imageData", default)]
    pub image_data: Option<String>,
    #[serde(rename = "imageHeight")]
    pub image_height: Option<usize>,
    #[serde(rename = "imageWidth")]
    pub image_width: Option<usize>,
    /// Surgery/session identity used for group-level splits (not a labelme key).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group_id: Option<String>,
}

fn default_version() -> String {
    "5.0.1".to_string()
}

/// Points parsed from a labelme document.
#[derive(Debug, Clone)]
pub struct LabelmePoints {
    pub points: PointSet,
    /// Number of non-point shapes skipped.
    pub ignored_shapes: usize,
    pub group_id: Option<String>,
    pub image_path: String,
}

pub fn parse_labelme(json: &str) -> Result<LabelmePoints> {
    let file: LabelmeFile = serde_json::from_str(json).map_err(|e| {
        Error::format("labelme JSON", format!("line {} column {}: {e}", e.line(), e.column()))
    })?;
    let (Some(height), Some(width)) = (file.image_height, file.image_width) else {
        return Err(Error::format("labelme JSON", "imageHeight and imageWidth are required"));
    };
    let mut points = Vec::new();
    let mut ignored = 0;
    for (i, shape) in file.shapes.iter().enumerate() {
        if shape.shape_type != "point" {
            ignored += 1;
            continue;
        }
        let Some(&[x, y]) = shape.points.first() else {
            return Err(Error::format("labelme JSON", format!("shapes[{i}]: point shape without coordinates")));
        };
        points.push(Point::new(x, y));
    }
    let points = PointSet::new(height, width, points).map_err(|e| match e {
        Error::PointOutOfBounds { index, x, y, width, height } => Error::format(
            "labelme JSON",
            format!("point shape #{index} at ({x}, {y}) lies outside the {width}x{height} image"),
        ),
        other => other,
    })?;
    Ok(LabelmePoints {
        points,
        ignored_shapes: ignored,
        group_id: file.group_id,
        image_path: file.image_path,
    })
}

pub fn to_labelme(points: &PointSet, image_path: &str, group_id: Option<&str>) -> String {
    let file = LabelmeFile {
        version: default_version(),
        flags: Value::Object(Default::default()),
        shapes: points
            .points()
            .iter()
            .map(|p| LabelmeShape {
                label: "suture".to_string(),
                points: vec![[p.x, p.y]],
                shape_type: "point".to_string(),
                group_id: None,
                flags: Value::Object(Default::default()),
            })
            .collect(),
        image_path: image_path.to_string(),
        image_data: None,
        image_height: Some(points.height()),
        image_width: Some(points.width()),
        group_id: group_id.map(str::to_string),
    };
    serde_json::to_string_pretty(&file).expect("labelme files always serialize")
}

/// Read either format: documents with a `shapes` key are labelme, others canonical.
pub fn parse_points_any(json: &str) -> Result<PointSet> {
    let v: Value = serde_json::from_str(json)?;
    if v.get("shapes").is_some() {
        Ok(parse_labelme(json)?.points)
    } else {
        Ok(serde_json::from_value(v)?)
    }
}
