//! Exhaustive-matching reference for COCO keypoint AP.

use danet::eval::{oks, InstanceAnnotation, Prediction};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn ann(id: u64, image_id: u64, area: f64, kps: &[(f64, f64, u8)]) -> InstanceAnnotation {
    InstanceAnnotation { id, image_id, bbox: (0.0, 0.0, 1.0, 1.0), area, keypoints: kps.to_vec(), head_length: None }
}

pub fn pred(image_id: u64, kps: &[(f64, f64)], score: f64) -> Prediction {
    Prediction { image_id, keypoints: kps.to_vec(), score, area: None }
}

pub fn exact(g: &InstanceAnnotation, score: f64) -> Prediction {
    pred(g.image_id, &g.keypoints.iter().map(|k| (k.0, k.1)).collect::<Vec<_>>(), score)
}

/// Assignment of each prediction (in score order) to an annotation index or
/// none, over every injective choice; the lexicographically best vector of
/// matched similarities is the greedy outcome.
pub fn best_assignment(sims: &[Vec<f64>], threshold: f64) -> Vec<Option<usize>> {
    fn rec(
        i: usize,
        sims: &[Vec<f64>],
        t: f64,
        used: &mut Vec<bool>,
        cur: &mut Vec<Option<usize>>,
        best: &mut Option<(Vec<f64>, Vec<Option<usize>>)>,
    ) {
        if i == sims.len() {
            let key: Vec<f64> = cur.iter().enumerate().map(|(p, g)| g.map_or(-1.0, |g| sims[p][g])).collect();
            let better = match best {
                None => true,
                Some((k, _)) => key.iter().zip(k.iter()).find(|(a, b)| a != b).is_some_and(|(a, b)| a > b),
            };
            if better {
                *best = Some((key, cur.clone()));
            }
            return;
        }
        cur.push(None);
        rec(i + 1, sims, t, used, cur, best);
        cur.pop();
        for g in 0..used.len() {
            if !used[g] && sims[i][g] >= t {
                used[g] = true;
                cur.push(Some(g));
                rec(i + 1, sims, t, used, cur, best);
                cur.pop();
                used[g] = false;
            }
        }
    }
    let gts = sims.first().map_or(0, |s| s.len());
    let mut best = None;
    rec(0, sims, threshold, &mut vec![false; gts], &mut Vec::new(), &mut best);
    best.map(|b| b.1).unwrap_or_default()
}

/// (AP, recall) at one threshold for a single-image scene.
pub fn oracle_at(preds: &[Prediction], gts: &[InstanceAnnotation], kappa: &[f64], t: f64) -> (f64, f64) {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.partial_cmp(&preds[a].score).unwrap().then(a.cmp(&b)));
    let sims: Vec<Vec<f64>> =
        order.iter().map(|&p| gts.iter().map(|g| oks(&preds[p].keypoints, g, kappa).unwrap()).collect()).collect();
    let assign = best_assignment(&sims, t);
    let mut points = Vec::new();
    let mut tp = 0;
    for (i, a) in assign.iter().enumerate() {
        tp += a.is_some() as usize;
        points.push((tp as f64 / gts.len() as f64, tp as f64 / (i + 1) as f64));
    }
    let ap = (0..=100)
        .map(|r| {
            let rc = r as f64 / 100.0;
            points.iter().filter(|p| p.0 >= rc).map(|p| p.1).fold(0.0, f64::max)
        })
        .sum::<f64>()
        / 101.0;
    (ap, tp as f64 / gts.len() as f64)
}

pub fn random_scene(r: &mut ChaCha8Rng, np: usize, ng: usize) -> (Vec<Prediction>, Vec<InstanceAnnotation>) {
    let gts: Vec<InstanceAnnotation> = (0..ng)
        .map(|i| {
            let kps: Vec<(f64, f64, u8)> =
                (0..3).map(|_| (r.random_range(0.0..60.0), r.random_range(0.0..60.0), r.random_range(1..3u8))).collect();
            ann(i as u64, 7, r.random_range(200.0..3000.0), &kps)
        })
        .collect();
    let preds = (0..np)
        .map(|_| {
            let src = &gts[r.random_range(0..ng)];
            let noise = r.random_range(0.0..12.0);
            let kps: Vec<(f64, f64)> =
                src.keypoints.iter().map(|k| (k.0 + r.random_range(-noise..=noise), k.1 + r.random_range(-noise..=noise))).collect();
            // coarse scores so equal scores occur
            pred(7, &kps, r.random_range(0..4u32) as f64 / 4.0)
        })
        .collect();
    (preds, gts)
}
