//! Object keypoint similarity, COCO-style keypoint AP/AR and PCKh.

pub mod coco;

pub use coco::{load_annotations, load_predictions, parse_annotations, parse_predictions, CocoImage};

use crate::codec::Keypoint;
use crate::error::{Error, Result};

/// Per-keypoint falloff constants κ = 2σ of the 17 COCO keypoints.
pub const COCO_KAPPA: [f64; 17] = [
    0.052, 0.050, 0.050, 0.070, 0.070, 0.158, 0.158, 0.144, 0.144, 0.124, 0.124, 0.214, 0.214, 0.174, 0.174, 0.178,
    0.178,
];

/// Area boundaries of the medium and large ranges, in px².
pub const MEDIUM_AREA: f64 = 32.0 * 32.0;
pub const LARGE_AREA: f64 = 96.0 * 96.0;

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceAnnotation {
    pub id: u64,
    pub image_id: u64,
    /// `(x, y, w, h)`.
    pub bbox: (f64, f64, f64, f64),
    pub area: f64,
    /// `(x, y, v)` with `v` 0 (unlabeled), 1 (occluded) or 2 (visible).
    pub keypoints: Vec<(f64, f64, u8)>,
    /// PCKh reference length in pixels.
    pub head_length: Option<f64>,
}

impl InstanceAnnotation {
    /// An annotation from labeled keypoints; hidden keypoints are unlabeled.
    pub fn from_keypoints(id: u64, image_id: u64, keypoints: &[Keypoint], head_length: Option<f64>) -> Self {
        let labeled: Vec<&Keypoint> = keypoints.iter().filter(|k| k.visible).collect();
        let fold = |f: fn(&Keypoint) -> f64| {
            labeled.iter().map(|k| f(k)).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
        };
        let (x0, x1) = fold(|k| k.x);
        let (y0, y1) = fold(|k| k.y);
        let bbox = if labeled.is_empty() { (0.0, 0.0, 0.0, 0.0) } else { (x0, y0, x1 - x0, y1 - y0) };
        InstanceAnnotation {
            id,
            image_id,
            bbox,
            area: bbox.2 * bbox.3,
            keypoints: keypoints.iter().map(|k| if k.visible { (k.x, k.y, 2) } else { (0.0, 0.0, 0) }).collect(),
            head_length,
        }
    }

    pub fn labeled(&self) -> usize {
        self.keypoints.iter().filter(|k| k.2 > 0).count()
    }
}

/// One predicted person.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub image_id: u64,
    pub keypoints: Vec<(f64, f64)>,
    pub score: f64,
    /// Area used to place an unmatched prediction in an area range; `None`
    /// counts it in every range.
    pub area: Option<f64>,
}

/// Mean over labeled keypoints of `exp(−d²/(2·area·κ²))`.
pub fn oks(pred: &[(f64, f64)], gt: &InstanceAnnotation, kappa: &[f64]) -> Result<f64> {
    if pred.len() != gt.keypoints.len() || kappa.len() != gt.keypoints.len() {
        return Err(Error::shape(
            "oks",
            format!("{} predicted, {} annotated keypoints, {} constants", pred.len(), gt.keypoints.len(), kappa.len()),
        ));
    }
    if !(gt.area > 0.0) {
        return Err(Error::invalid("oks", format!("annotation {} has area {}", gt.id, gt.area)));
    }
    let mut total = 0.0;
    let mut labeled = 0;
    for ((p, g), k) in pred.iter().zip(&gt.keypoints).zip(kappa) {
        if g.2 == 0 {
            continue;
        }
        let d2 = (p.0 - g.0).powi(2) + (p.1 - g.1).powi(2);
        total += (-d2 / (2.0 * gt.area * k * k)).exp();
        labeled += 1;
    }
    if labeled == 0 {
        return Err(Error::NoLabeledKeypoints);
    }
    Ok(total / labeled as f64)
}

/// OKS thresholds 0.50, 0.55, …, 0.95.
pub fn oks_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CocoResult {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    /// `None` when no instance falls in the range.
    pub apm: Option<f64>,
    pub apl: Option<f64>,
    pub ar: f64,
    /// AP at each of [`oks_thresholds`].
    pub ap_per_threshold: Vec<f64>,
}

impl CocoResult {
    /// `metric,value` lines, values in [0, 1]; empty ranges are left blank.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
        format!(
            "metric,value\nAP,{:.6}\nAP50,{:.6}\nAP75,{:.6}\nAPM,{}\nAPL,{}\nAR,{:.6}\n",
            self.ap,
            self.ap50,
            self.ap75,
            opt(self.apm),
            opt(self.apl),
            self.ar
        )
    }
}

/// Precision/recall at one threshold for one area range.
struct Curve {
    ap: f64,
    recall: f64,
}

/// COCO-style keypoint AP and AR.
///
/// Per image and threshold, predictions in descending score (ties by lower
/// index) greedily take the unmatched annotation of highest OKS, preferring
/// annotations inside the area range. Matches to out-of-range annotations
/// and unmatched out-of-range predictions are ignored. Precision is made
/// monotone and sampled at 101 recall points. Annotations without labeled
/// keypoints are ignored everywhere.
pub fn coco_ap(preds: &[Prediction], gts: &[InstanceAnnotation], kappa: &[f64]) -> Result<CocoResult> {
    let thresholds = oks_thresholds();
    let usable = gts.iter().filter(|g| g.labeled() > 0).count();
    if usable == 0 {
        return Err(Error::invalid("coco_ap", "no annotation with labeled keypoints"));
    }
    let sims = similarities(preds, gts, kappa)?;
    let all = |_: f64| true;
    let mut ap_all = Vec::new();
    let mut recalls = Vec::new();
    for &t in &thresholds {
        let c = curve(preds, gts, &sims, t, &all)?.expect("usable annotations exist");
        ap_all.push(c.ap);
        recalls.push(c.recall);
    }
    let range_ap = |lo: f64, hi: f64| -> Result<Option<f64>> {
        let inside = move |a: f64| a >= lo && a < hi;
        let mut sum = 0.0;
        for &t in &thresholds {
            match curve(preds, gts, &sims, t, &inside)? {
                Some(c) => sum += c.ap,
                None => return Ok(None),
            }
        }
        Ok(Some(sum / thresholds.len() as f64))
    };
    Ok(CocoResult {
        ap: ap_all.iter().sum::<f64>() / thresholds.len() as f64,
        ap50: ap_all[0],
        ap75: ap_all[5],
        apm: range_ap(MEDIUM_AREA, LARGE_AREA)?,
        apl: range_ap(LARGE_AREA, f64::INFINITY)?,
        ar: recalls.iter().sum::<f64>() / thresholds.len() as f64,
        ap_per_threshold: ap_all,
    })
}

/// OKS of every prediction against every annotation of the same image;
/// `None` across images or for unusable annotations.
fn similarities(preds: &[Prediction], gts: &[InstanceAnnotation], kappa: &[f64]) -> Result<Vec<Vec<Option<f64>>>> {
    preds
        .iter()
        .map(|p| {
            gts.iter()
                .map(|g| {
                    if g.image_id != p.image_id || g.labeled() == 0 {
                        Ok(None)
                    } else {
                        oks(&p.keypoints, g, kappa).map(Some)
                    }
                })
                .collect()
        })
        .collect()
}

/// Descending score, ties by lower index.
fn score_order(preds: &[Prediction], idx: impl Iterator<Item = usize>) -> Vec<usize> {
    let mut order: Vec<usize> = idx.collect();
    order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score).then(a.cmp(&b)));
    order
}

fn curve(
    preds: &[Prediction],
    gts: &[InstanceAnnotation],
    sims: &[Vec<Option<f64>>],
    threshold: f64,
    in_range: &dyn Fn(f64) -> bool,
) -> Result<Option<Curve>> {
    let ignored: Vec<bool> = gts.iter().map(|g| g.labeled() == 0 || !in_range(g.area)).collect();
    let positives = ignored.iter().filter(|&&i| !i).count();
    if positives == 0 {
        return Ok(None);
    }
    let mut images: Vec<u64> = gts.iter().map(|g| g.image_id).chain(preds.iter().map(|p| p.image_id)).collect();
    images.sort_unstable();
    images.dedup();
    // (prediction, true positive) for every prediction that is not ignored
    let mut outcome: Vec<(usize, bool)> = Vec::new();
    for img in images {
        let order = score_order(preds, (0..preds.len()).filter(|&i| preds[i].image_id == img));
        let mut cands: Vec<usize> = (0..gts.len()).filter(|&g| gts[g].image_id == img && gts[g].labeled() > 0).collect();
        // in-range annotations first, then by index
        cands.sort_by_key(|&g| (ignored[g], g));
        let mut taken = vec![false; gts.len()];
        for p in order {
            let mut best: Option<usize> = None;
            let mut best_sim = threshold.min(1.0 - 1e-10);
            for &g in &cands {
                if taken[g] {
                    continue;
                }
                // once an in-range match exists, out-of-range ones cannot replace it
                if let Some(b) = best {
                    if !ignored[b] && ignored[g] {
                        break;
                    }
                }
                let s = sims[p][g].expect("same image, usable annotation");
                if s < best_sim || (best.is_some() && s == best_sim) {
                    continue;
                }
                best_sim = s;
                best = Some(g);
            }
            match best {
                Some(g) => {
                    taken[g] = true;
                    if !ignored[g] {
                        outcome.push((p, true));
                    }
                }
                None => {
                    if preds[p].area.is_none_or(in_range) {
                        outcome.push((p, false));
                    }
                }
            }
        }
    }
    let order = score_order(preds, outcome.iter().map(|o| o.0));
    let tp_of: std::collections::HashMap<usize, bool> = outcome.into_iter().collect();
    let mut precision = Vec::with_capacity(order.len());
    let mut recall = Vec::with_capacity(order.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for p in order {
        if tp_of[&p] {
            tp += 1;
        } else {
            fp += 1;
        }
        precision.push(tp as f64 / (tp + fp) as f64);
        recall.push(tp as f64 / positives as f64);
    }
    for i in (1..precision.len()).rev() {
        precision[i - 1] = precision[i - 1].max(precision[i]);
    }
    let mut ap = 0.0;
    for r in 0..=100 {
        let rc = r as f64 / 100.0;
        let at = recall.partition_point(|&x| x < rc);
        if at < precision.len() {
            ap += precision[at];
        }
    }
    Ok(Some(Curve { ap: ap / 101.0, recall: tp as f64 / positives as f64 }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PckResult {
    /// Fraction correct per joint; `None` for joints never labeled.
    pub per_joint: Vec<Option<f64>>,
    /// Fraction over all labeled joints.
    pub mean: f64,
    /// Instances without a head length.
    pub skipped: usize,
}

impl PckResult {
    /// `joint,pckh` lines plus a `mean` line, values in [0, 1].
    pub fn to_csv(&self) -> String {
        let mut s = String::from("joint,pckh\n");
        for (j, v) in self.per_joint.iter().enumerate() {
            s.push_str(&format!("{j},{}\n", v.map(|v| format!("{v:.6}")).unwrap_or_default()));
        }
        s.push_str(&format!("mean,{:.6}\n", self.mean));
        s
    }
}

/// Fraction of labeled joints predicted within `tau · head_length`
/// (inclusive). Predictions pair with annotations by position.
pub fn pckh(preds: &[Vec<(f64, f64)>], gts: &[InstanceAnnotation], tau: f64) -> Result<PckResult> {
    if preds.len() != gts.len() {
        return Err(Error::shape("pckh", format!("{} predictions for {} annotations", preds.len(), gts.len())));
    }
    let joints = gts.first().map_or(0, |g| g.keypoints.len());
    let mut correct = vec![0usize; joints];
    let mut labeled = vec![0usize; joints];
    let mut skipped = 0;
    for (p, g) in preds.iter().zip(gts) {
        if p.len() != joints || g.keypoints.len() != joints {
            return Err(Error::shape("pckh", format!("annotation {} joint count differs", g.id)));
        }
        let Some(head) = g.head_length.filter(|h| *h > 0.0) else {
            skipped += 1;
            continue;
        };
        for j in 0..joints {
            let (x, y, v) = g.keypoints[j];
            if v == 0 {
                continue;
            }
            labeled[j] += 1;
            let d = ((p[j].0 - x).powi(2) + (p[j].1 - y).powi(2)).sqrt();
            if d <= tau * head {
                correct[j] += 1;
            }
        }
    }
    let total: usize = labeled.iter().sum();
    if total == 0 {
        return Err(Error::NoLabeledKeypoints);
    }
    Ok(PckResult {
        per_joint: correct.iter().zip(&labeled).map(|(&c, &l)| (l > 0).then(|| c as f64 / l as f64)).collect(),
        mean: correct.iter().sum::<usize>() as f64 / total as f64,
        skipped,
    })
}

/// PCKh reference length from a head box `(x1, y1, x2, y2)`.
pub fn head_length_from_box(b: (f64, f64, f64, f64)) -> f64 {
    0.6 * ((b.2 - b.0).powi(2) + (b.3 - b.1).powi(2)).sqrt()
}
