//! Single-person inference on a full image: crop, forward (optionally also
//! on the mirrored crop), then flip-average, blur and decode.

use crate::codec::{decode_prediction, CropTransform, FlipPairs, Keypoint};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::train::warp;

/// Box enlargement applied around a detected person box.
pub const BOX_SCALE: f64 = 1.25;

/// Mirror pairs matching a keypoint count: COCO for 17, MPII for 16, none
/// otherwise.
pub fn pairs_for(keypoints: usize) -> FlipPairs {
    match keypoints {
        17 => FlipPairs::coco(),
        16 => FlipPairs::mpii(),
        _ => FlipPairs::empty(),
    }
}

/// Clips `(x, y, w, h)` to a `width × height` image. Returns the clipped box
/// and whether anything was cut off.
pub fn clamp_box(bbox: (f64, f64, f64, f64), width: usize, height: usize) -> Result<((f64, f64, f64, f64), bool)> {
    let (x, y, w, h) = bbox;
    if ![x, y, w, h].iter().all(|v| v.is_finite()) || w <= 0.0 || h <= 0.0 {
        return Err(Error::invalid("infer", format!("degenerate box {bbox:?}")));
    }
    let (x0, y0) = (x.max(0.0), y.max(0.0));
    let (x1, y1) = ((x + w).min(width as f64), (y + h).min(height as f64));
    if x1 <= x0 || y1 <= y0 {
        return Err(Error::invalid("infer", format!("box {bbox:?} lies outside the {width}×{height} image")));
    }
    let clipped = (x0, y0, x1 - x0, y1 - y0);
    Ok((clipped, clipped != bbox))
}

/// Keypoints in image pixels for the person inside `bbox`, which is padded
/// to the model's aspect ratio and enlarged by `scale`.
pub fn infer_person<T: Scalar>(
    model: &Model<T>,
    image: &Tensor<f32>,
    bbox: (f64, f64, f64, f64),
    scale: f64,
    flip: bool,
) -> Result<Vec<Keypoint>> {
    let cfg = model.config();
    let target = (cfg.input_width, cfg.input_height);
    let transform = CropTransform::from_box(bbox, 0.0, scale, target)?;
    let crop = |t: &CropTransform| -> Result<Tensor<T>> {
        let c = warp(image, t)?;
        Ok(c.reshape(&[1, 3, target.1, target.0])?.cast())
    };
    let heat = model.predict(&crop(&transform)?)?;
    let pairs = pairs_for(cfg.head.keypoints);
    let heat_flipped = if flip { Some(model.predict(&crop(&transform.mirrored())?)?) } else { None };
    decode_prediction(&heat, heat_flipped.as_ref(), &pairs, &transform)
}
