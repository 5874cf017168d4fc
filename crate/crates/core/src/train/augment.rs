use rand::Rng;

use crate::codec::{CropTransform, FlipPairs, Keypoint};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::SynthSample;

/// Sampling ranges of the geometric augmentation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentRanges {
    /// Rotation drawn uniformly from `[-rotation_deg, rotation_deg]`.
    pub rotation_deg: f64,
    /// Content magnification drawn uniformly from this range.
    pub scale: (f64, f64),
    pub flip_prob: f64,
}

impl Default for AugmentRanges {
    fn default() -> Self {
        AugmentRanges { rotation_deg: 45.0, scale: (0.7, 1.35), flip_prob: 0.5 }
    }
}

impl AugmentRanges {
    /// Ranges that leave every sample unchanged.
    pub fn identity() -> Self {
        AugmentRanges { rotation_deg: 0.0, scale: (1.0, 1.0), flip_prob: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale;
        let ok = self.rotation_deg.is_finite()
            && self.rotation_deg >= 0.0
            && lo > 0.0
            && hi >= lo
            && hi.is_finite()
            && (0.0..=1.0).contains(&self.flip_prob);
        if ok {
            Ok(())
        } else {
            Err(Error::invalid("augment", format!("invalid ranges {self:?}")))
        }
    }
}

/// Frame transform for a content rotation of `rotation_deg` (positive turns
/// +x toward +y) and magnification `scale` about the image center, with an
/// optional horizontal mirror.
pub fn augment_transform(width: usize, height: usize, rotation_deg: f64, scale: f64, flip: bool) -> Result<CropTransform> {
    // rotating or enlarging the crop window moves content the opposite way
    let t = CropTransform::from_box((0.0, 0.0, width as f64, height as f64), -rotation_deg, 1.0 / scale, (width, height))?;
    Ok(if flip { t.mirrored() } else { t })
}

/// Draws a transform from `ranges` and applies it to the image and the
/// keypoints. A flip also swaps left/right keypoints; keypoints leaving the
/// frame become invisible.
pub fn augment<R: Rng + ?Sized>(
    sample: &SynthSample,
    rng: &mut R,
    ranges: &AugmentRanges,
    pairs: &FlipPairs,
) -> Result<SynthSample> {
    ranges.validate()?;
    let rotation = if ranges.rotation_deg > 0.0 { rng.random_range(-ranges.rotation_deg..=ranges.rotation_deg) } else { 0.0 };
    let scale = if ranges.scale.1 > ranges.scale.0 { rng.random_range(ranges.scale.0..=ranges.scale.1) } else { ranges.scale.0 };
    let flip = ranges.flip_prob > 0.0 && rng.random::<f64>() < ranges.flip_prob;
    apply_augmentation(sample, rotation, scale, flip, pairs)
}

/// The deterministic part of [`augment`].
pub fn apply_augmentation(
    sample: &SynthSample,
    rotation_deg: f64,
    scale: f64,
    flip: bool,
    pairs: &FlipPairs,
) -> Result<SynthSample> {
    let (_, h, w) = image_dims(&sample.image)?;
    let t = augment_transform(w, h, rotation_deg, scale, flip)?;
    let image = warp(&sample.image, &t)?;
    let moved: Vec<Keypoint> = sample
        .keypoints
        .iter()
        .map(|kp| {
            if !kp.visible {
                return Keypoint::hidden();
            }
            let (x, y) = t.to_crop(kp.x, kp.y);
            let inside = x >= 0.0 && x < w as f64 && y >= 0.0 && y < h as f64;
            if inside {
                Keypoint { x, y, ..*kp }
            } else {
                Keypoint { x, y, score: 0.0, visible: false }
            }
        })
        .collect();
    let keypoints = if flip { (0..moved.len()).map(|k| moved[pairs.partner(k)]).collect() } else { moved };
    Ok(SynthSample { image, keypoints, head_length: sample.head_length * scale })
}

fn image_dims(image: &Tensor<f32>) -> Result<(usize, usize, usize)> {
    match *image.shape() {
        [c, h, w] => Ok((c, h, w)),
        ref s => Err(Error::shape("augment", format!("image must be [C,H,W], got {s:?}"))),
    }
}

/// Resamples `image` (`[C,H,W]`) into the frame of `t` with bilinear
/// interpolation; samples outside the source are zero.
pub fn warp(image: &Tensor<f32>, t: &CropTransform) -> Result<Tensor<f32>> {
    let (c, h, w) = image_dims(image)?;
    let (tw, th) = t.target;
    let src = image.data();
    let mut out = vec![0.0f32; c * th * tw];
    let fetch = |ch: usize, y: isize, x: isize| -> f32 {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            src[(ch * h + y as usize) * w + x as usize]
        }
    };
    for i in 0..th {
        for j in 0..tw {
            // pixel centers map to pixel centers
            let (sx, sy) = t.to_image(j as f64 + 0.5, i as f64 + 0.5);
            let (fx, fy) = (sx - 0.5, sy - 0.5);
            let (x0, y0) = (fx.floor(), fy.floor());
            let (ax, ay) = ((fx - x0) as f32, (fy - y0) as f32);
            let (x0, y0) = (x0 as isize, y0 as isize);
            for ch in 0..c {
                let top = fetch(ch, y0, x0) * (1.0 - ax) + fetch(ch, y0, x0 + 1) * ax;
                let bottom = fetch(ch, y0 + 1, x0) * (1.0 - ax) + fetch(ch, y0 + 1, x0 + 1) * ax;
                out[(ch * th + i) * tw + j] = top * (1.0 - ay) + bottom * ay;
            }
        }
    }
    Tensor::new(&[c, th, tw], out)
}
