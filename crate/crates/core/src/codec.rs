//! Heatmap targets, test-time decoding and crop geometry.
//!
//! Heatmap cell `(i, j)` covers crop pixels `[stride·j, stride·(j+1))` ×
//! `[stride·i, stride·(i+1))`; its center, crop pixel `stride·(j + 0.5)`,
//! has cell coordinate `j`. A crop pixel `p` therefore has cell coordinate
//! `p / stride − 0.5`.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Target Gaussian width in heatmap cells.
pub const TARGET_SIGMA: f64 = 2.0;
/// Test-time blur width in heatmap cells.
pub const BLUR_SIGMA: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub score: f64,
    pub visible: bool,
}

impl Keypoint {
    pub fn new(x: f64, y: f64) -> Self {
        Keypoint { x, y, score: 1.0, visible: true }
    }

    pub fn hidden() -> Self {
        Keypoint { x: 0.0, y: 0.0, score: 0.0, visible: false }
    }
}

/// Left/right channel pairs swapped by a horizontal flip.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlipPairs {
    pairs: Vec<(usize, usize)>,
}

impl FlipPairs {
    /// Rejects pairs that reuse an index, which would break the involution.
    pub fn new(pairs: Vec<(usize, usize)>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for &(a, b) in &pairs {
            if a == b || !seen.insert(a) || !seen.insert(b) {
                return Err(Error::invalid("flip_pairs", format!("index reused in pair ({a}, {b})")));
            }
        }
        Ok(FlipPairs { pairs })
    }

    pub fn empty() -> Self {
        FlipPairs { pairs: Vec::new() }
    }

    /// COCO order: nose, eyes, ears, shoulders, elbows, wrists, hips, knees,
    /// ankles (left before right).
    pub fn coco() -> Self {
        FlipPairs { pairs: (0..8).map(|i| (2 * i + 1, 2 * i + 2)).collect() }
    }

    /// MPII order: r/l ankle, knee, hip; pelvis, thorax, neck, head top;
    /// r/l wrist, elbow, shoulder.
    pub fn mpii() -> Self {
        FlipPairs { pairs: vec![(0, 5), (1, 4), (2, 3), (10, 15), (11, 14), (12, 13)] }
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    /// Channel that `k` maps to under the flip.
    pub fn partner(&self, k: usize) -> usize {
        for &(a, b) in &self.pairs {
            if k == a {
                return b;
            }
            if k == b {
                return a;
            }
        }
        k
    }

    fn check(&self, channels: usize) -> Result<()> {
        match self.pairs.iter().find(|&&(a, b)| a >= channels || b >= channels) {
            Some(&(a, b)) => Err(Error::invalid("flip_pairs", format!("pair ({a}, {b}) out of range for {channels} channels"))),
            None => Ok(()),
        }
    }
}

/// Affine map between an original image and a person crop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropTransform {
    /// Padded box `(x, y, w, h)` in the original image.
    pub region: (f64, f64, f64, f64),
    pub rotation_deg: f64,
    pub scale: f64,
    /// Crop size `(width, height)` in pixels.
    pub target: (usize, usize),
    forward: [[f64; 3]; 2],
    inverse: [[f64; 3]; 2],
}

fn invert(m: &[[f64; 3]; 2]) -> [[f64; 3]; 2] {
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    let (a, b, c, d) = (m[1][1] / det, -m[0][1] / det, -m[1][0] / det, m[0][0] / det);
    [[a, b, -(a * m[0][2] + b * m[1][2])], [c, d, -(c * m[0][2] + d * m[1][2])]]
}

fn apply(m: &[[f64; 3]; 2], x: f64, y: f64) -> (f64, f64) {
    (m[0][0] * x + m[0][1] * y + m[0][2], m[1][0] * x + m[1][1] * y + m[1][2])
}

/// Pads `(x, y, w, h)` about its center to the aspect ratio of `target`
/// (`width × height`), never shrinking either side.
pub fn pad_to_aspect(bbox: (f64, f64, f64, f64), target: (usize, usize)) -> Result<(f64, f64, f64, f64)> {
    let (x, y, w, h) = bbox;
    if !(w > 0.0 && h > 0.0 && x.is_finite() && y.is_finite() && w.is_finite() && h.is_finite()) {
        return Err(Error::invalid("box_to_crop", format!("degenerate box {bbox:?}")));
    }
    if target.0 == 0 || target.1 == 0 {
        return Err(Error::invalid("box_to_crop", format!("empty target {target:?}")));
    }
    let ratio = target.1 as f64 / target.0 as f64;
    let (cx, cy) = (x + w / 2.0, y + h / 2.0);
    let (w, h) = if h > w * ratio { (h / ratio, h) } else { (w, w * ratio) };
    Ok((cx - w / 2.0, cy - h / 2.0, w, h))
}

impl CropTransform {
    /// Crop of `bbox` padded to the target aspect, enlarged by `scale` and
    /// rotated by `rotation_deg` about its center.
    pub fn from_box(bbox: (f64, f64, f64, f64), rotation_deg: f64, scale: f64, target: (usize, usize)) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite() && rotation_deg.is_finite()) {
            return Err(Error::invalid("box_to_crop", format!("scale {scale} / rotation {rotation_deg}")));
        }
        let region = pad_to_aspect(bbox, target)?;
        let (x, y, w, _) = region;
        let (cx, cy) = (x + w / 2.0, y + region.3 / 2.0);
        let k = target.0 as f64 / (w * scale);
        let (s, c) = rotation_deg.to_radians().sin_cos();
        let (tx, ty) = (target.0 as f64 / 2.0, target.1 as f64 / 2.0);
        // p' = k·R·(p − center) + target center
        let forward = [
            [k * c, k * s, tx - k * (c * cx + s * cy)],
            [-k * s, k * c, ty - k * (-s * cx + c * cy)],
        ];
        Ok(CropTransform { region, rotation_deg, scale, target, forward, inverse: invert(&forward) })
    }

    /// The crop frame is the image frame.
    pub fn identity(target: (usize, usize)) -> Self {
        let forward = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        CropTransform {
            region: (0.0, 0.0, target.0 as f64, target.1 as f64),
            rotation_deg: 0.0,
            scale: 1.0,
            target,
            forward,
            inverse: forward,
        }
    }

    /// The same crop followed by a horizontal mirror of the crop frame.
    pub fn mirrored(&self) -> Self {
        let w = self.target.0 as f64;
        let f = self.forward;
        let forward = [[-f[0][0], -f[0][1], w - f[0][2]], f[1]];
        CropTransform { forward, inverse: invert(&forward), ..*self }
    }

    pub fn forward_matrix(&self) -> [[f64; 3]; 2] {
        self.forward
    }

    /// Original image → crop.
    pub fn to_crop(&self, x: f64, y: f64) -> (f64, f64) {
        apply(&self.forward, x, y)
    }

    /// Crop → original image.
    pub fn to_image(&self, x: f64, y: f64) -> (f64, f64) {
        apply(&self.inverse, x, y)
    }
}

/// Gaussian target maps `[K, H, W]` for one crop plus the visibility mask.
///
/// Keypoints are in crop pixels; `stride` is crop pixels per heatmap cell.
pub fn render_target<T: Scalar>(
    keypoints: &[Keypoint],
    sigma: f64,
    size: (usize, usize),
    stride: f64,
) -> Result<(Tensor<T>, Vec<bool>)> {
    if !(sigma > 0.0) {
        return Err(Error::invalid("render_target", format!("sigma must be positive, got {sigma}")));
    }
    let (h, w) = size;
    let mut data = vec![T::zero(); keypoints.len() * h * w];
    let mut mask = Vec::with_capacity(keypoints.len());
    let reach = 3.0 * sigma;
    for (k, kp) in keypoints.iter().enumerate() {
        let (mx, my) = (kp.x / stride - 0.5, kp.y / stride - 0.5);
        let on = kp.visible && mx.is_finite() && my.is_finite();
        mask.push(on);
        if !on {
            continue;
        }
        let plane = &mut data[k * h * w..(k + 1) * h * w];
        let (y0, y1) = ((my - reach).ceil().max(0.0) as usize, ((my + reach).floor() + 1.0).clamp(0.0, h as f64) as usize);
        let (x0, x1) = ((mx - reach).ceil().max(0.0) as usize, ((mx + reach).floor() + 1.0).clamp(0.0, w as f64) as usize);
        for i in y0..y1 {
            for j in x0..x1 {
                let d2 = (j as f64 - mx).powi(2) + (i as f64 - my).powi(2);
                if d2 <= reach * reach {
                    plane[i * w + j] = T::from_f64_lossy((-d2 / (2.0 * sigma * sigma)).exp());
                }
            }
        }
    }
    Ok((Tensor::new(&[keypoints.len(), h, w], data)?, mask))
}

fn dims<T: Scalar>(h: &Tensor<T>, op: &'static str) -> Result<(usize, usize, usize, usize)> {
    match *h.shape() {
        [n, k, hh, ww] => Ok((n, k, hh, ww)),
        [k, hh, ww] => Ok((1, k, hh, ww)),
        ref s => Err(Error::shape(op, format!("expected [N,K,H,W] or [K,H,W], got {s:?}"))),
    }
}

/// Mirrors each map horizontally and swaps paired channels.
pub fn mirror<T: Scalar>(h: &Tensor<T>, pairs: &FlipPairs) -> Result<Tensor<T>> {
    let (n, k, hh, ww) = dims(h, "mirror")?;
    pairs.check(k)?;
    let mut out = vec![T::zero(); h.len()];
    for b in 0..n {
        for c in 0..k {
            let src = &h.data()[((b * k + pairs.partner(c)) * hh) * ww..][..hh * ww];
            let dst = &mut out[((b * k + c) * hh) * ww..][..hh * ww];
            for i in 0..hh {
                for j in 0..ww {
                    dst[i * ww + j] = src[i * ww + ww - 1 - j];
                }
            }
        }
    }
    Tensor::new(h.shape(), out)
}

/// Shifts every row one cell right, keeping the first column.
pub fn shift_right<T: Scalar>(h: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, k, hh, ww) = dims(h, "shift_right")?;
    let mut out = h.data().to_vec();
    for row in 0..n * k * hh {
        let r = &mut out[row * ww..(row + 1) * ww];
        for j in (1..ww).rev() {
            r[j] = r[j - 1];
        }
    }
    Tensor::new(h.shape(), out)
}

/// Averages `h` with the prediction on the mirrored image, after undoing
/// the mirror (flip, channel swap, one-cell shift to the right).
pub fn flip_average<T: Scalar>(h: &Tensor<T>, h_flipped: &Tensor<T>, pairs: &FlipPairs) -> Result<Tensor<T>> {
    if h.shape() != h_flipped.shape() {
        return Err(Error::shape("flip_average", format!("{:?} vs {:?}", h.shape(), h_flipped.shape())));
    }
    let back = shift_right(&mirror(h_flipped, pairs)?)?;
    let half = T::from_f64_lossy(0.5);
    h.zip_map(&back, |a, b| (a + b) * half)
}

fn kernel_1d(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian smoothing with replicated borders; each map is then
/// rescaled so its maximum equals the maximum before blurring.
pub fn blur<T: Scalar>(h: &Tensor<T>, sigma: f64) -> Result<Tensor<T>> {
    if !(sigma > 0.0) {
        return Err(Error::invalid("blur", format!("sigma must be positive, got {sigma}")));
    }
    let (n, k, hh, ww) = dims(h, "blur")?;
    let kern = kernel_1d(sigma);
    let r = (kern.len() / 2) as isize;
    let clampi = |v: isize, hi: usize| v.clamp(0, hi as isize - 1) as usize;
    let mut out = Vec::with_capacity(h.len());
    let mut tmp = vec![0.0f64; hh * ww];
    for plane in h.data().chunks(hh * ww).take(n * k) {
        for i in 0..hh {
            for j in 0..ww {
                tmp[i * ww + j] = kern
                    .iter()
                    .enumerate()
                    .map(|(t, &kv)| kv * plane[i * ww + clampi(j as isize + t as isize - r, ww)].to_f64_lossy())
                    .sum();
            }
        }
        let mut blurred = vec![0.0f64; hh * ww];
        for i in 0..hh {
            for j in 0..ww {
                blurred[i * ww + j] =
                    kern.iter().enumerate().map(|(t, &kv)| kv * tmp[clampi(i as isize + t as isize - r, hh) * ww + j]).sum();
            }
        }
        let before = plane.iter().map(|v| v.to_f64_lossy()).fold(f64::NEG_INFINITY, f64::max);
        let after = blurred.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let gain = if after > 0.0 && before > 0.0 { before / after } else { 1.0 };
        out.extend(blurred.iter().map(|&v| T::from_f64_lossy(v * gain)));
    }
    Tensor::new(h.shape(), out)
}

/// Argmax with the quarter-offset refinement, in heatmap cells.
///
/// Returns `(x, y, peak)`. A channel with no unique structure (all values
/// equal) decodes to the center cell.
pub fn refine_peak(plane: &[f64], hh: usize, ww: usize) -> (f64, f64, f64) {
    let first = plane[0];
    if plane.iter().all(|&v| v == first) {
        return (((ww - 1) / 2) as f64, ((hh - 1) / 2) as f64, first);
    }
    let mut best = 0;
    for (i, &v) in plane.iter().enumerate() {
        if v > plane[best] {
            best = i;
        }
    }
    let (py, px) = (best / ww, best % ww);
    let at = |i: usize, j: usize| plane[i * ww + j];
    let mut x = px as f64;
    let mut y = py as f64;
    if px > 0 && px + 1 < ww {
        x += 0.25 * sign(at(py, px + 1) - at(py, px - 1));
    }
    if py > 0 && py + 1 < hh {
        y += 0.25 * sign(at(py + 1, px) - at(py - 1, px));
    }
    (x, y, plane[best])
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Decodes one crop's `[K, H, W]` maps into original-image keypoints.
pub fn decode<T: Scalar>(h: &Tensor<T>, transform: &CropTransform) -> Result<Vec<Keypoint>> {
    let (n, k, hh, ww) = dims(h, "decode")?;
    if n != 1 {
        return Err(Error::shape("decode", format!("expected a single crop, got batch of {n}")));
    }
    if h.data().iter().any(|v| !v.to_f64_lossy().is_finite()) {
        return Err(Error::invalid("decode", "heatmaps contain non-finite values"));
    }
    let stride_x = transform.target.0 as f64 / ww as f64;
    let stride_y = transform.target.1 as f64 / hh as f64;
    let mut out = Vec::with_capacity(k);
    for plane in h.data().chunks(hh * ww) {
        let plane: Vec<f64> = plane.iter().map(|v| v.to_f64_lossy()).collect();
        let (cx, cy, peak) = refine_peak(&plane, hh, ww);
        let (x, y) = transform.to_image((cx + 0.5) * stride_x, (cy + 0.5) * stride_y);
        out.push(Keypoint { x, y, score: peak.clamp(0.0, 1.0), visible: true });
    }
    Ok(out)
}

/// Test-time pipeline for one crop: flip averaging (when a mirrored
/// prediction is given), blur, then decoding.
pub fn decode_prediction<T: Scalar>(
    h: &Tensor<T>,
    h_flipped: Option<&Tensor<T>>,
    pairs: &FlipPairs,
    transform: &CropTransform,
) -> Result<Vec<Keypoint>> {
    let merged = match h_flipped {
        Some(f) => flip_average(h, f, pairs)?,
        None => h.clone(),
    };
    decode(&blur(&merged, BLUR_SIGMA)?, transform)
}
