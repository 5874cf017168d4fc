use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};

use super::{head_length_from_box, InstanceAnnotation, Prediction};

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub width: u32,
    pub height: u32,
}

#[derive(Deserialize)]
struct AnnotationFile {
    #[serde(default)]
    images: Vec<CocoImage>,
    annotations: Vec<RawAnnotation>,
}

#[derive(Deserialize)]
struct RawAnnotation {
    id: u64,
    image_id: u64,
    bbox: [f64; 4],
    area: f64,
    keypoints: Vec<f64>,
    #[serde(default)]
    num_keypoints: Option<usize>,
    /// `(x1, y1, x2, y2)`, for PCKh.
    #[serde(default)]
    head_box: Option<[f64; 4]>,
}

#[derive(Deserialize)]
struct RawPrediction {
    image_id: u64,
    keypoints: Vec<f64>,
    score: f64,
    #[serde(default)]
    area: Option<f64>,
}

fn triples(index: usize, flat: &[f64]) -> Result<Vec<(f64, f64, u8)>> {
    if flat.len() % 3 != 0 {
        return Err(Error::Annotation { index, detail: format!("{} keypoint values, not a multiple of 3", flat.len()) });
    }
    flat.chunks(3)
        .map(|c| {
            let v = c[2];
            if !(v == 0.0 || v == 1.0 || v == 2.0) {
                return Err(Error::Annotation { index, detail: format!("visibility flag {v}") });
            }
            if v > 0.0 && !(c[0].is_finite() && c[1].is_finite()) {
                return Err(Error::Annotation { index, detail: "non-finite labeled keypoint".into() });
            }
            Ok((c[0], c[1], v as u8))
        })
        .collect()
}

/// Images and instance annotations from a COCO-keypoints-style document.
/// Unknown fields are ignored.
pub fn parse_annotations(json: &str) -> Result<(Vec<CocoImage>, Vec<InstanceAnnotation>)> {
    let file: AnnotationFile = serde_json::from_str(json)?;
    let anns = file
        .annotations
        .into_iter()
        .enumerate()
        .map(|(index, a)| {
            let keypoints = triples(index, &a.keypoints)?;
            let labeled = keypoints.iter().filter(|k| k.2 > 0).count();
            if let Some(n) = a.num_keypoints {
                if n != labeled {
                    return Err(Error::Annotation { index, detail: format!("num_keypoints {n} but {labeled} labeled") });
                }
            }
            if !(a.area >= 0.0) {
                return Err(Error::Annotation { index, detail: format!("area {}", a.area) });
            }
            Ok(InstanceAnnotation {
                id: a.id,
                image_id: a.image_id,
                bbox: (a.bbox[0], a.bbox[1], a.bbox[2], a.bbox[3]),
                area: a.area,
                keypoints,
                head_length: a.head_box.map(|b| head_length_from_box((b[0], b[1], b[2], b[3]))),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((file.images, anns))
}

/// Predictions as `{image_id, keypoints, score}` objects, either in a JSON
/// array (the COCO results layout) or one per line.
pub fn parse_predictions(json: &str) -> Result<Vec<Prediction>> {
    let raw: Vec<RawPrediction> = if json.trim_start().starts_with('[') {
        serde_json::from_str(json)?
    } else {
        json.lines().filter(|l| !l.trim().is_empty()).map(serde_json::from_str).collect::<Result<_, _>>()?
    };
    raw.into_iter()
        .enumerate()
        .map(|(index, p)| {
            let keypoints = triples_any(index, &p.keypoints)?;
            if !p.score.is_finite() {
                return Err(Error::Annotation { index, detail: format!("score {}", p.score) });
            }
            Ok(Prediction { image_id: p.image_id, keypoints, score: p.score, area: p.area })
        })
        .collect()
}

/// Predicted `(x, y, confidence)` triples; the confidence is not used.
fn triples_any(index: usize, flat: &[f64]) -> Result<Vec<(f64, f64)>> {
    if flat.len() % 3 != 0 {
        return Err(Error::Annotation { index, detail: format!("{} keypoint values, not a multiple of 3", flat.len()) });
    }
    Ok(flat.chunks(3).map(|c| (c[0], c[1])).collect())
}

pub fn load_annotations(path: &Path) -> Result<(Vec<CocoImage>, Vec<InstanceAnnotation>)> {
    parse_annotations(&std::fs::read_to_string(path)?)
}

pub fn load_predictions(path: &Path) -> Result<Vec<Prediction>> {
    parse_predictions(&std::fs::read_to_string(path)?)
}
