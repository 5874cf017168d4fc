//! The full network: stem, four OAB stages with transitions (the top-down
//! path), and a bottom-up path that upsamples and fuses back to 1/4 input
//! resolution where a small head regresses one heatmap per keypoint.

mod config;
mod cost;
mod weights;

pub use config::{check_input_size, DANetConfig, HeadConfig, StageConfig, StageFlow, StemConfig, PRESETS};
pub use cost::{CostReport, FlopConvention, ModuleCost};
pub use weights::{read_weights, write_weights, WeightRecord};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::{
    oab_stage_forward, sfu_forward, BlockVariantConfig, FusionMode, OabLayerParams, SfuParams, TransitionParams,
};
use crate::error::{Error, Result};
use crate::nn::{BnParams, Builder, ParamId, ParamStore, Session};
use crate::scalar::Scalar;
use crate::tensor::{BnMode, Graph, Tensor, Var};

/// Deviation of the heatmap output weights. Small so that training starts
/// from near-zero heatmaps instead of first having to shrink O(1) outputs.
pub const HEAD_OUT_STD: f64 = 1e-3;

#[derive(Debug, Clone, Copy)]
struct Stem {
    conv1: ParamId,
    bn1: BnParams,
    conv2: ParamId,
    bn2: BnParams,
}

#[derive(Debug, Clone)]
struct Stage {
    layers: Vec<OabLayerParams>,
    transition: TransitionParams,
}

/// BN-ReLU-conv1×1 without bias.
#[derive(Debug, Clone, Copy)]
struct PreactConv {
    bn: BnParams,
    conv: ParamId,
}

/// Fusion step producing pyramid level `i` (0-based) from level `i + 1`.
#[derive(Debug, Clone, Copy)]
struct FusionLevel {
    lateral: Option<PreactConv>,
    project: PreactConv,
    sfu: Option<SfuParams>,
}

#[derive(Debug, Clone, Copy)]
struct Head {
    bn: BnParams,
    conv: ParamId,
    out_w: ParamId,
    out_b: ParamId,
}

#[derive(Debug, Clone)]
struct Plan {
    stem: Stem,
    stages: Vec<Stage>,
    /// Levels 0, 1, 2 (levels 1–3 of the pyramid).
    fusion: Vec<FusionLevel>,
    head: Head,
}

/// Built network: configuration, named parameters and the execution plan.
#[derive(Debug, Clone)]
pub struct Model<T> {
    config: DANetConfig,
    store: ParamStore<T>,
    plan: Plan,
}

fn preact<T: Scalar, R: rand::Rng>(b: &mut Builder<'_, T, R>, name: &str, cin: usize, cout: usize) -> Result<PreactConv> {
    b.scope(name, |b| Ok(PreactConv { bn: b.bn("bn", cin)?, conv: b.he("conv", &[cout, cin, 1, 1])? }))
}

/// Deterministically initialized network for `config`.
pub fn build_model<T: Scalar>(config: &DANetConfig, seed: u64) -> Result<Model<T>> {
    config.validate()?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = Builder::new(&mut store, &mut rng);
    let variant = config.variant;
    let c0 = config.stem.channels;
    let stem = b.scope("stem", |b| {
        Ok(Stem {
            conv1: b.he("conv1", &[c0, 3, 7, 7])?,
            bn1: b.bn("bn1", c0)?,
            conv2: b.he("conv2", &[c0, c0, 3, 3])?,
            bn2: b.bn("bn2", c0)?,
        })
    })?;
    let flow = config.channel_flow();
    let mut stages = Vec::with_capacity(4);
    for (i, (sc, f)) in config.stages.iter().zip(&flow).enumerate() {
        let stage = b.scope(format!("stage{}", i + 1), |b| {
            let mut layers = Vec::with_capacity(sc.layers);
            for d in 0..sc.layers {
                let cin = f.input + d * sc.growth;
                layers.push(b.scope(format!("layer{d}"), |b| {
                    OabLayerParams::build(b, cin, sc.growth, sc.bottleneck, &variant, config.cau_reduction)
                })?);
            }
            let transition = b.scope("transition", |b| TransitionParams::build(b, f.dense_out, sc.transition, sc.pool))?;
            Ok(Stage { layers, transition })
        })?;
        stages.push(stage);
    }
    let mut fusion = Vec::with_capacity(3);
    for i in 0..3 {
        let (wi, above) = (config.stages[i].transition, config.stages[i + 1].transition);
        let level = b.scope(format!("pyramid/level{}", i + 1), |b| {
            Ok(FusionLevel {
                lateral: if config.head.lateral { Some(preact(b, "lateral", wi, wi)?) } else { None },
                project: preact(b, "project", above, wi)?,
                sfu: match variant.fusion {
                    FusionMode::Sfu => Some(SfuParams::build(b, wi, config.sfu_hidden)?),
                    FusionMode::Sum => None,
                },
            })
        })?;
        fusion.push(level);
    }
    let w0 = config.stages[0].transition;
    let (hw, k) = (config.head.width, config.head.keypoints);
    let head = b.scope("head", |b| {
        Ok(Head {
            bn: b.bn("bn", w0)?,
            conv: b.he("conv", &[hw, w0, 3, 3])?,
            out_w: b.normal("out/w", &[k, hw, 1, 1], HEAD_OUT_STD)?,
            out_b: b.zeros("out/b", &[k])?,
        })
    })?;
    Ok(Model { config: config.clone(), store, plan: Plan { stem, stages, fusion, head } })
}

impl<T: Scalar> Model<T> {
    pub fn config(&self) -> &DANetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    /// Mutable access to the stored tensors. Shapes are checked on
    /// [`ParamStore::set`]; writing through [`ParamStore::get_mut`] keeps them.
    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn variant(&self) -> &BlockVariantConfig {
        &self.config.variant
    }

    /// The same network at another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model { config: self.config.clone(), store: self.store.cast(), plan: self.plan.clone() }
    }

    /// Id of the final 1×1 heatmap conv weight.
    pub fn head_output_weight(&self) -> ParamId {
        self.plan.head.out_w
    }

    /// Bottleneck 1×1 weight of every dense layer, as `(stage, layer, id)`.
    pub fn bottleneck_weights(&self) -> Vec<(usize, usize, ParamId)> {
        let mut out = Vec::new();
        for (s, st) in self.plan.stages.iter().enumerate() {
            for (l, layer) in st.layers.iter().enumerate() {
                out.push((s, l, layer.conv1));
            }
        }
        out
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let [_, c, h, w] = shape[..] else {
            return Err(Error::shape("forward", format!("expected an [N,3,H,W] image batch, got {shape:?}")));
        };
        if c != 3 {
            return Err(Error::shape("forward", format!("expected 3 input channels, got {c}")));
        }
        check_input_size(h, w)
    }

    /// Records the forward pass of `images` (`[N, 3, H, W]`) into the
    /// session's graph and returns the `[N, K, H/4, W/4]` heatmaps.
    pub fn forward<'a>(&'a self, s: &mut Session<'_, 'a, T>, images: Var) -> Result<Var> {
        self.forward_with_taps(s, images).map(|(y, _)| y)
    }

    /// [`Model::forward`] that also returns the four lateral taps (transition
    /// outputs before pooling), finest first.
    pub fn forward_with_taps<'a>(&'a self, s: &mut Session<'_, 'a, T>, images: Var) -> Result<(Var, Vec<Var>)> {
        self.check_input(s.g.shape(images))?;
        let p = &self.plan;
        let variant = &self.config.variant;

        s.g.push_scope("stem");
        let x = (|| {
            let x = s.conv(images, p.stem.conv1, 2, 3)?;
            let x = s.bn_relu(x, &p.stem.bn1)?;
            let x = s.conv(x, p.stem.conv2, 2, 1)?;
            s.bn_relu(x, &p.stem.bn2)
        })();
        s.g.pop_scope();
        let mut x = x?;

        let mut laterals = Vec::with_capacity(4);
        for (i, st) in p.stages.iter().enumerate() {
            s.g.push_scope(format!("stage{}", i + 1));
            let out = (|| {
                let h = oab_stage_forward(s, x, &st.layers, variant)?;
                s.g.push_scope("transition");
                let tap = (|| {
                    let t = s.bn_relu(h, &st.transition.bn)?;
                    s.conv(t, st.transition.conv, 1, 0)
                })();
                s.g.pop_scope();
                let tap = tap?;
                let next = if st.transition.pool { s.g.max_pool(tap)? } else { tap };
                Ok::<_, Error>((tap, next))
            })();
            s.g.pop_scope();
            let (tap, next) = out?;
            laterals.push(tap);
            x = next;
        }

        let mut u = laterals[3];
        for i in (0..3).rev() {
            let level = &p.fusion[i];
            s.g.push_scope(format!("pyramid/level{}", i + 1));
            let out = (|| {
                let mut lat = laterals[i];
                if let Some(l) = &level.lateral {
                    s.g.push_scope("lateral");
                    let r = s.bn_relu(lat, &l.bn).and_then(|h| s.conv(h, l.conv, 1, 0));
                    s.g.pop_scope();
                    lat = r?;
                }
                // a 1×1 conv and per-channel BN/ReLU commute with nearest
                // upsampling, so project at the coarse resolution
                s.g.push_scope("project");
                let up = (|| {
                    let h = s.bn_relu(u, &level.project.bn)?;
                    let h = s.conv(h, level.project.conv, 1, 0)?;
                    let h = s.g.upsample2x(h)?;
                    let (th, tw) = (s.g.shape(lat)[2], s.g.shape(lat)[3]);
                    let (uh, uw) = (s.g.shape(h)[2], s.g.shape(h)[3]);
                    if (uh, uw) != (th, tw) {
                        s.g.crop(h, th, tw)
                    } else {
                        Ok(h)
                    }
                })();
                s.g.pop_scope();
                sfu_forward(s, lat, up?, level.sfu.as_ref(), variant.fusion)
            })();
            s.g.pop_scope();
            u = out?;
        }

        s.g.push_scope("head");
        let out = (|| {
            let h = s.bn_relu(u, &p.head.bn)?;
            let h = s.conv(h, p.head.conv, 1, 1)?;
            s.conv_bias(h, p.head.out_w, p.head.out_b, 1, 0)
        })();
        s.g.pop_scope();
        Ok((out?, laterals))
    }

    /// Inference with running batch-norm statistics.
    pub fn predict(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let x = g.leaf(images.clone(), false);
        let mut s = Session::new(&mut g, &self.store, BnMode::Eval);
        let y = self.forward(&mut s, x)?;
        Ok(g.value(y).clone())
    }

    /// Learnable parameters per top-level module, from the parameter names.
    pub fn count_params(&self) -> CostReport {
        cost::count_params(self)
    }

    /// Arithmetic cost of one forward pass on a single `height × width`
    /// image, by module.
    pub fn count_flops(&self, height: usize, width: usize, convention: FlopConvention) -> Result<CostReport> {
        cost::count_flops(self, height, width, convention)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_model_output_shape() {
        let cfg = DANetConfig::preset("tiny").unwrap();
        let m = build_model::<f32>(&cfg, 0).unwrap();
        let y = m.predict(&Tensor::zeros(&[2, 3, 32, 24])).unwrap();
        assert_eq!(y.shape(), &[2, 17, 8, 6]);
        let y = m.predict(&Tensor::zeros(&[1, 3, 64, 64])).unwrap();
        assert_eq!(y.shape(), &[1, 17, 16, 16]);
    }

    #[test]
    fn bad_inputs_rejected() {
        let m = build_model::<f32>(&DANetConfig::preset("tiny").unwrap(), 0).unwrap();
        assert!(matches!(m.predict(&Tensor::zeros(&[1, 1, 32, 24])), Err(Error::Shape { .. })));
        assert!(matches!(m.predict(&Tensor::zeros(&[1, 3, 30, 24])), Err(Error::Config(_))));
        assert!(m.predict(&Tensor::zeros(&[3, 32, 24])).is_err());
    }
}
