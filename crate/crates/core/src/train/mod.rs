//! OHKM loss, Adam, the linear learning-rate decay, geometric augmentation,
//! synthetic stick figures and the training loop.

mod adam;
mod augment;
mod synth;

pub use adam::Adam;
pub use augment::{apply_augmentation, augment, augment_transform, warp, AugmentRanges};
pub use synth::{synth_dataset, synth_dataset_sized, JOINTS, SYNTH_SIZE};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::codec::{decode_prediction, render_target, CropTransform, FlipPairs, Keypoint, TARGET_SIGMA};
use crate::eval::{pckh, InstanceAnnotation, PckResult};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::{BatchStats, ParamId, Session};
use crate::scalar::Scalar;
use crate::tensor::{BnMode, Graph, Tensor};

/// Running-statistics momentum of batch norm during training.
pub const BN_MOMENTUM: f64 = 0.1;

/// One training image with its keypoints in pixel coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    /// `[3, H, W]`.
    pub image: Tensor<f32>,
    pub keypoints: Vec<Keypoint>,
    /// Reference length for PCK thresholds, in pixels.
    pub head_length: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub total_iters: usize,
    pub batch_size: usize,
    pub ohkm_k: usize,
    pub seed: u64,
    /// `None` trains on the samples as given.
    pub augment: Option<AugmentRanges>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 3e-4,
            total_iters: 1000,
            batch_size: 8,
            ohkm_k: 8,
            seed: 0,
            augment: Some(AugmentRanges::default()),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, keypoints: usize) -> Result<()> {
        if self.ohkm_k < 1 || self.ohkm_k > keypoints {
            return Err(Error::invalid("train", format!("ohkm_k {} outside 1..={keypoints}", self.ohkm_k)));
        }
        if self.total_iters < 1 || self.batch_size < 1 {
            return Err(Error::invalid("train", "total_iters and batch_size must be at least 1"));
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(Error::invalid("train", format!("base_lr {}", self.base_lr)));
        }
        if let Some(r) = &self.augment {
            r.validate()?;
        }
        Ok(())
    }
}

/// Learning rate decaying linearly from `base_lr` at iteration 0 to zero at
/// `total_iters`.
pub fn lr_at(iter: usize, config: &TrainConfig) -> f64 {
    let done = iter.min(config.total_iters) as f64 / config.total_iters as f64;
    config.base_lr * (1.0 - done)
}

/// Mean over samples of the mean of the `k` largest per-keypoint heatmap
/// MSEs, invisible keypoints excluded.
pub fn ohkm_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>, visible: &[bool], k: usize) -> Result<f64> {
    let (_, kp, _, _) = pred.dims4()?;
    if k > kp {
        return Err(Error::invalid("ohkm_loss", format!("k = {k} exceeds {kp} keypoints")));
    }
    let mut g = Graph::inference();
    let p = g.leaf(pred.clone(), false);
    let t = g.leaf(target.clone(), false);
    let l = g.ohkm_mse(p, t, visible, k)?;
    Ok(g.value(l).item().to_f64_lossy())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub iter: usize,
    pub lr: f64,
    pub loss: f64,
}

/// The loss trace as CSV with header `iter,lr,loss`.
pub fn trace_csv(trace: &[TraceRow]) -> String {
    let mut s = String::from("iter,lr,loss\n");
    for r in trace {
        s.push_str(&format!("{},{:e},{:e}\n", r.iter, r.lr, r.loss));
    }
    s
}

/// Stacks images and heatmap targets for the given samples.
pub fn make_batch<T: Scalar>(
    samples: &[&SynthSample],
    heatmap: (usize, usize),
    stride: f64,
) -> Result<(Tensor<T>, Tensor<T>, Vec<bool>)> {
    let first = samples.first().ok_or_else(|| Error::invalid("train", "empty batch"))?;
    let shape = first.image.shape().to_vec();
    let kp = first.keypoints.len();
    let mut images = Vec::with_capacity(samples.len() * first.image.len());
    let mut targets = Vec::new();
    let mut visible = Vec::new();
    for s in samples {
        if s.image.shape() != shape.as_slice() || s.keypoints.len() != kp {
            return Err(Error::shape("train", "samples differ in image size or keypoint count"));
        }
        images.extend(s.image.data().iter().map(|&v| T::from_f64_lossy(v as f64)));
        let (t, mask) = render_target::<T>(&s.keypoints, TARGET_SIGMA, heatmap, stride)?;
        targets.extend_from_slice(t.data());
        visible.extend(mask);
    }
    let n = samples.len();
    Ok((
        Tensor::new(&[n, shape[0], shape[1], shape[2]], images)?,
        Tensor::new(&[n, kp, heatmap.0, heatmap.1], targets)?,
        visible,
    ))
}

/// Trains `model` in place and returns the per-iteration loss trace.
pub fn train_loop<T: Scalar>(model: &mut Model<T>, data: &[SynthSample], config: &TrainConfig) -> Result<Vec<TraceRow>> {
    train_loop_with(model, data, config, |_| {})
}

/// [`train_loop`] reporting each trace row as it is produced.
///
/// Sample order: the dataset is visited in epochs, each a permutation drawn
/// from a ChaCha8 stream seeded with `config.seed`; batches take consecutive
/// entries and run across epoch boundaries. Augmentation draws from the same
/// stream, sample by sample, after the batch is chosen.
pub fn train_loop_with<T: Scalar>(
    model: &mut Model<T>,
    data: &[SynthSample],
    config: &TrainConfig,
    mut on_iter: impl FnMut(&TraceRow),
) -> Result<Vec<TraceRow>> {
    let cfg = model.config().clone();
    let kp = cfg.head.keypoints;
    config.validate(kp)?;
    if data.is_empty() {
        return Err(Error::invalid("train", "no training samples"));
    }
    for s in data {
        if s.image.shape() != [3, cfg.input_height, cfg.input_width] || s.keypoints.len() != kp {
            return Err(Error::shape(
                "train",
                format!(
                    "sample {:?} with {} keypoints for a {}x{} model with {kp} keypoints",
                    s.image.shape(),
                    s.keypoints.len(),
                    cfg.input_height,
                    cfg.input_width
                ),
            ));
        }
    }
    let heatmap = cfg.heatmap_size();
    let stride = cfg.input_width as f64 / heatmap.1 as f64;
    let pairs = if kp == 17 { FlipPairs::coco() } else { FlipPairs::empty() };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut adam = Adam::new();
    let mut trace = Vec::with_capacity(config.total_iters);
    for iter in 0..config.total_iters {
        let mut batch = Vec::with_capacity(config.batch_size);
        while batch.len() < config.batch_size {
            if order.is_empty() {
                order = (0..data.len()).collect();
                order.shuffle(&mut rng);
                order.reverse();
            }
            let i = order.pop().expect("refilled");
            batch.push(match &config.augment {
                Some(r) => augment(&data[i], &mut rng, r, &pairs)?,
                None => data[i].clone(),
            });
        }
        let refs: Vec<&SynthSample> = batch.iter().collect();
        let (images, targets, visible) = make_batch::<T>(&refs, heatmap, stride)?;
        let (loss, grads, stats) = step_gradients(model, images, targets, &visible, config.ohkm_k)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { iter });
        }
        let lr = lr_at(iter, config);
        adam.step(model.params_mut(), &grads, lr)?;
        model.params_mut().apply_batch_stats(&stats, BN_MOMENTUM);
        let row = TraceRow { iter, lr, loss };
        on_iter(&row);
        trace.push(row);
    }
    Ok(trace)
}

type StepOutput<T> = (f64, Vec<(ParamId, Tensor<T>)>, Vec<BatchStats<T>>);

/// Training-mode forward, OHKM loss and backward: loss, gradient of every
/// learnable parameter and the batch-norm batch moments.
pub fn step_gradients<T: Scalar>(
    model: &Model<T>,
    images: Tensor<T>,
    targets: Tensor<T>,
    visible: &[bool],
    k: usize,
) -> Result<StepOutput<T>> {
    let mut g = Graph::new();
    let x = g.leaf(images, false);
    let t = g.leaf(targets, false);
    let mut s = Session::new(&mut g, model.params(), BnMode::Train);
    let y = model.forward(&mut s, x)?;
    let (bound, bn_nodes) = s.into_parts();
    let loss = g.ohkm_mse(y, t, visible, k)?;
    let loss_value = g.value(loss).item().to_f64_lossy();
    let mut grads = g.backward(loss)?;
    let store = model.params();
    let params = store
        .learnable()
        .map(|id| {
            let grad = bound[id.index()].and_then(|v| grads.take(v));
            (id, grad.unwrap_or_else(|| Tensor::zeros(store.get(id).shape())))
        })
        .collect();
    Ok((loss_value, params, BatchStats::collect(&g, &bn_nodes)))
}

/// PCK of `model` on `samples` at `tau` times each sample's head length,
/// decoding with blur and without flip averaging.
pub fn evaluate_pck<T: Scalar>(model: &Model<T>, samples: &[SynthSample], tau: f64) -> Result<PckResult> {
    let cfg = model.config();
    let transform = CropTransform::identity((cfg.input_width, cfg.input_height));
    let mut preds = Vec::with_capacity(samples.len());
    let mut gts = Vec::with_capacity(samples.len());
    for (i, chunk) in samples.chunks(8).enumerate() {
        let refs: Vec<&SynthSample> = chunk.iter().collect();
        let (images, _, _) = make_batch::<T>(&refs, cfg.heatmap_size(), 1.0)?;
        let heat = model.predict(&images)?;
        let (_, k, hh, ww) = heat.dims4()?;
        for (j, s) in chunk.iter().enumerate() {
            let plane = k * hh * ww;
            let one = Tensor::new(&[1, k, hh, ww], heat.data()[j * plane..(j + 1) * plane].to_vec())?;
            let kps = decode_prediction(&one, None, &FlipPairs::empty(), &transform)?;
            preds.push(kps.iter().map(|p| (p.x, p.y)).collect());
            gts.push(InstanceAnnotation::from_keypoints((i * 8 + j) as u64, 0, &s.keypoints, Some(s.head_length)));
        }
    }
    pckh(&preds, &gts, tau)
}
