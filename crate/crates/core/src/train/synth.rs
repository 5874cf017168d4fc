use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::codec::Keypoint;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::SynthSample;

/// Joints of the synthetic figures, in COCO keypoint order.
pub const JOINTS: usize = 17;

/// Default rendered size `(height, width)`.
pub const SYNTH_SIZE: (usize, usize) = (256, 192);

/// Segments drawn as limbs, with a color per body side.
const LIMBS: [(usize, usize, Side); 12] = [
    (5, 7, Side::Left),
    (7, 9, Side::Left),
    (6, 8, Side::Right),
    (8, 10, Side::Right),
    (11, 13, Side::Left),
    (13, 15, Side::Left),
    (12, 14, Side::Right),
    (14, 16, Side::Right),
    (5, 6, Side::Center),
    (11, 12, Side::Center),
    (5, 11, Side::Left),
    (6, 12, Side::Right),
];

#[derive(Debug, Clone, Copy)]
enum Side {
    Left,
    Right,
    Center,
}

impl Side {
    fn color(self) -> [f32; 3] {
        match self {
            Side::Left => [1.0, 0.35, 0.2],
            Side::Right => [0.2, 0.45, 1.0],
            Side::Center => [0.3, 0.9, 0.3],
        }
    }
}

/// Face dots: (joint, color).
const FACE: [(usize, [f32; 3]); 5] = [
    (0, [1.0, 0.2, 1.0]),
    (1, [1.0, 1.0, 1.0]),
    (2, [0.0, 0.0, 0.0]),
    (3, [1.0, 1.0, 0.2]),
    (4, [0.2, 1.0, 1.0]),
];

/// `n` figures at the default size.
pub fn synth_dataset(n: usize, seed: u64) -> Result<Vec<SynthSample>> {
    synth_dataset_sized(n, seed, SYNTH_SIZE)
}

/// `n` articulated stick figures on noise backgrounds, each fully inside a
/// `(height, width)` frame. Sample `i` depends only on `seed` and `i`.
pub fn synth_dataset_sized(n: usize, seed: u64, size: (usize, usize)) -> Result<Vec<SynthSample>> {
    if n == 0 {
        return Err(Error::invalid("synth_dataset", "n must be at least 1"));
    }
    if size.0 < 32 || size.1 < 24 {
        return Err(Error::invalid("synth_dataset", format!("frame {size:?} too small")));
    }
    Ok((0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            render_figure(&mut rng, size)
        })
        .collect())
}

/// Pose in head-radius units, head center at the origin, +y down, the
/// figure's left on +x.
fn pose<R: Rng + ?Sized>(rng: &mut R) -> [(f64, f64); JOINTS] {
    let mut p = [(0.0, 0.0); JOINTS];
    let turn = rng.random_range(-0.25..0.25);
    p[0] = (turn, 0.25);
    p[1] = (0.35 + turn, -0.2);
    p[2] = (-0.35 + turn, -0.2);
    p[3] = (0.8 + turn * 0.5, 0.0);
    p[4] = (-0.8 + turn * 0.5, 0.0);
    let shoulder_y = 1.8;
    let half_shoulder = rng.random_range(1.1..1.5);
    p[5] = (half_shoulder, shoulder_y);
    p[6] = (-half_shoulder, shoulder_y);
    let hip_y = shoulder_y + rng.random_range(2.6..3.2);
    let half_hip = rng.random_range(0.7..0.9);
    p[11] = (half_hip, hip_y);
    p[12] = (-half_hip, hip_y);
    let step = |from: (f64, f64), angle: f64, len: f64| (from.0 + len * angle.sin(), from.1 + len * angle.cos());
    // angles measured from straight down, positive toward +x
    for (shoulder, elbow, wrist, side) in [(5, 7, 9, 1.0), (6, 8, 10, -1.0)] {
        let upper = side * rng.random_range(0.2..2.6);
        let lower = upper + side * rng.random_range(-1.2..1.6);
        p[elbow] = step(p[shoulder], upper, rng.random_range(1.5..1.9));
        p[wrist] = step(p[elbow], lower, rng.random_range(1.4..1.7));
    }
    for (hip, knee, ankle, side) in [(11, 13, 15, 1.0), (12, 14, 16, -1.0)] {
        let upper = side * rng.random_range(-0.1..0.6);
        let lower = upper + rng.random_range(-0.6..0.6);
        p[knee] = step(p[hip], upper, rng.random_range(1.9..2.2));
        p[ankle] = step(p[knee], lower, rng.random_range(1.8..2.1));
    }
    p
}

fn render_figure<R: Rng + ?Sized>(rng: &mut R, (h, w): (usize, usize)) -> SynthSample {
    let local = pose(rng);
    let tilt: f64 = rng.random_range(-0.35..0.35);
    let (s, c) = tilt.sin_cos();
    let rotated: Vec<(f64, f64)> = local.iter().map(|&(x, y)| (c * x - s * y, s * x + c * y)).collect();
    // the head disk (radius 1) counts toward the extent
    let ext = |f: fn(&(f64, f64)) -> f64| -> (f64, f64) {
        rotated.iter().map(f).chain([-1.0, 1.0]).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)))
    };
    let (x_lo, x_hi) = ext(|p| p.0);
    let (y_lo, y_hi) = ext(|p| p.1);
    let margin = 0.06;
    let usable = (w as f64 * (1.0 - 2.0 * margin), h as f64 * (1.0 - 2.0 * margin));
    let fit = (usable.0 / (x_hi - x_lo)).min(usable.1 / (y_hi - y_lo));
    let radius = fit * rng.random_range(0.75..1.0);
    let span = ((x_hi - x_lo) * radius, (y_hi - y_lo) * radius);
    let ox = w as f64 * margin + rng.random_range(0.0..=(usable.0 - span.0).max(0.0)) - x_lo * radius;
    let oy = h as f64 * margin + rng.random_range(0.0..=(usable.1 - span.1).max(0.0)) - y_lo * radius;
    let joints: Vec<(f64, f64)> = rotated.iter().map(|&(x, y)| (ox + x * radius, oy + y * radius)).collect();
    let head = (ox, oy);

    let noise = Normal::new(0.0f32, 0.08).expect("valid deviation");
    let base: [f32; 3] = [rng.random_range(0.2..0.6), rng.random_range(0.2..0.6), rng.random_range(0.2..0.6)];
    let mut img = vec![0.0f32; 3 * h * w];
    for ch in 0..3 {
        for v in &mut img[ch * h * w..(ch + 1) * h * w] {
            *v = base[ch] + noise.sample(rng);
        }
    }
    let limb_width = (radius * 0.35).max(1.0);
    for &(a, b, side) in &LIMBS {
        paint_segment(&mut img, (h, w), joints[a], joints[b], limb_width, side.color());
    }
    paint_segment(&mut img, (h, w), head, head, radius, [0.95, 0.8, 0.6]);
    let dot = (radius * 0.18).max(0.8);
    for &(j, color) in &FACE {
        paint_segment(&mut img, (h, w), joints[j], joints[j], dot, color);
    }
    let keypoints = joints.iter().map(|&(x, y)| Keypoint::new(x, y)).collect();
    // a square head box of side 2r; reference length 0.6 × its diagonal
    let head_length = 0.6 * 2.0 * radius * std::f64::consts::SQRT_2;
    SynthSample { image: Tensor::new(&[3, h, w], img).expect("sized buffer"), keypoints, head_length }
}

/// Blends a capsule of half-width `r` around segment `a`–`b` with coverage
/// falling linearly over one pixel at its edge.
fn paint_segment(img: &mut [f32], (h, w): (usize, usize), a: (f64, f64), b: (f64, f64), r: f64, color: [f32; 3]) {
    let pad = r + 1.0;
    let x0 = (a.0.min(b.0) - pad).floor().max(0.0) as usize;
    let x1 = ((a.0.max(b.0) + pad).ceil().max(0.0) as usize).min(w);
    let y0 = (a.1.min(b.1) - pad).floor().max(0.0) as usize;
    let y1 = ((a.1.max(b.1) + pad).ceil().max(0.0) as usize).min(h);
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    for i in y0..y1 {
        for j in x0..x1 {
            let (px, py) = (j as f64 + 0.5, i as f64 + 0.5);
            let t = if len2 > 0.0 { (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
            let d = ((px - a.0 - t * dx).powi(2) + (py - a.1 - t * dy).powi(2)).sqrt();
            let cover = (r + 0.5 - d).clamp(0.0, 1.0) as f32;
            if cover > 0.0 {
                for (ch, &col) in color.iter().enumerate() {
                    let v = &mut img[(ch * h + i) * w + j];
                    *v += (col - *v) * cover;
                }
            }
        }
    }
}
