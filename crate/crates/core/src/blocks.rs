//! Orthogonal attention blocks and the second-order fusion unit.
//!
//! An OAB layer is a pre-activation dense layer whose new features are gated
//! twice: a channel attention vector `C` rescales the input before the
//! bottleneck, and a spatial mask `M` computed from the same input rescales
//! the layer output through `1 − M`. The fusion unit mixes a top-down and a
//! bottom-up map with a learned per-element convex weight.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{BnParams, Builder, ParamId, Session};
use crate::scalar::Scalar;
use crate::tensor::Var;

/// Depthwise kernel size of the mask generator and the fusion weight net.
pub const LARGE_KERNEL: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MauMode {
    Off,
    /// gate by `1 − M`
    #[default]
    Mask,
    /// gate by `M`
    Variant1,
    /// gate by `1 + M`
    Variant2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CauMode {
    Off,
    /// scale the layer input before the bottleneck
    #[default]
    Oab,
    /// scale the bottleneck output
    Variant1,
    /// scale the 3×3 output
    Variant2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FusionMode {
    Sum,
    #[default]
    Sfu,
}

macro_rules! keyword_enum {
    ($ty:ident, $what:literal, $($variant:ident => $word:literal),+) => {
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($word => Ok($ty::$variant),)+
                    other => Err(Error::Config(format!(
                        concat!("unknown ", $what, " `{}` (expected one of: {})"),
                        other,
                        [$($word),+].join(", ")
                    ))),
                }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($ty::$variant => $word,)+ })
            }
        }
    };
}

keyword_enum!(MauMode, "mask attention mode", Off => "off", Mask => "mask", Variant1 => "variant1", Variant2 => "variant2");
keyword_enum!(CauMode, "channel attention mode", Off => "off", Oab => "oab", Variant1 => "variant1", Variant2 => "variant2");
keyword_enum!(FusionMode, "fusion mode", Sum => "sum", Sfu => "sfu");

/// Which attention and fusion components are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BlockVariantConfig {
    pub mau: MauMode,
    pub cau: CauMode,
    pub fusion: FusionMode,
}

impl BlockVariantConfig {
    /// Plain dense blocks with additive fusion.
    pub fn plain() -> Self {
        BlockVariantConfig { mau: MauMode::Off, cau: CauMode::Off, fusion: FusionMode::Sum }
    }
}

/// Mask generator: BN-ReLU-conv1×1 (Cin→g), then a 9×9 depthwise conv.
#[derive(Debug, Clone, Copy)]
pub struct MauParams {
    pub bn: BnParams,
    pub pw: ParamId,
    pub dw: ParamId,
    pub cin: usize,
    pub g: usize,
}

impl MauParams {
    pub fn build<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, cin: usize, g: usize) -> Result<Self> {
        b.scope("mau", |b| {
            Ok(MauParams {
                bn: b.bn("bn", cin)?,
                pw: b.he("pw", &[g, cin, 1, 1])?,
                dw: b.he("dw", &[g, 1, LARGE_KERNEL, LARGE_KERNEL])?,
                cin,
                g,
            })
        })
    }
}

fn expect_channels<T: Scalar>(s: &Session<'_, '_, T>, op: &'static str, x: Var, want: usize) -> Result<()> {
    let shape = s.g.shape(x);
    if shape.len() != 4 || shape[1] != want {
        return Err(Error::shape(op, format!("expected {want} input channels, got shape {shape:?}")));
    }
    Ok(())
}

/// `M = sigmoid(|ψ(f_p)|)`, shape `[N, g, H, W]`, every element in `[0.5, 1)`.
pub fn mau_forward<T: Scalar>(s: &mut Session<'_, '_, T>, f_p: Var, p: &MauParams) -> Result<Var> {
    expect_channels(s, "mau", f_p, p.cin)?;
    s.g.push_scope("mau");
    let out = (|| {
        let h = s.bn_relu(f_p, &p.bn)?;
        let h = s.conv(h, p.pw, 1, 0)?;
        let h = s.depthwise(h, p.dw, LARGE_KERNEL / 2)?;
        let h = s.g.abs(h);
        Ok(s.g.sigmoid(h))
    })();
    s.g.pop_scope();
    out
}

/// Squeeze-excitation style channel weights: GAP → FC → ReLU → FC → sigmoid.
#[derive(Debug, Clone, Copy)]
pub struct CauParams {
    pub fc1_w: ParamId,
    pub fc1_b: ParamId,
    pub fc2_w: ParamId,
    pub fc2_b: ParamId,
    pub cin: usize,
    pub hidden: usize,
    pub cout: usize,
}

impl CauParams {
    /// The hidden width is `ceil(cin / reduction)`, at least one unit.
    pub fn build<T: Scalar, R: Rng>(
        b: &mut Builder<'_, T, R>,
        cin: usize,
        cout: usize,
        reduction: usize,
    ) -> Result<Self> {
        if reduction == 0 {
            return Err(Error::Config("channel attention reduction must be positive".into()));
        }
        let hidden = cin.div_ceil(reduction).max(1);
        b.scope("cau", |b| {
            Ok(CauParams {
                fc1_w: b.he("fc1/w", &[hidden, cin])?,
                fc1_b: b.zeros("fc1/b", &[hidden])?,
                fc2_w: b.he("fc2/w", &[cout, hidden])?,
                fc2_b: b.zeros("fc2/b", &[cout])?,
                cin,
                hidden,
                cout,
            })
        })
    }
}

/// Channel weights `[N, cout, 1, 1]` in `(0, 1)`.
pub fn cau_forward<T: Scalar>(s: &mut Session<'_, '_, T>, f_p: Var, p: &CauParams) -> Result<Var> {
    expect_channels(s, "cau", f_p, p.cin)?;
    let n = s.g.shape(f_p)[0];
    s.g.push_scope("cau");
    let out = (|| {
        let z = s.g.global_avg_pool(f_p)?;
        let z = s.g.reshape(z, &[n, p.cin])?;
        let z = s.linear(z, p.fc1_w, p.fc1_b)?;
        let z = s.g.relu(z);
        let z = s.linear(z, p.fc2_w, p.fc2_b)?;
        let z = s.g.sigmoid(z);
        s.g.reshape(z, &[n, p.cout, 1, 1])
    })();
    s.g.pop_scope();
    out
}

/// One dense layer: BN-ReLU-conv1×1 (Cin→bottleneck), BN-ReLU-conv3×3
/// (bottleneck→g), with optional channel and mask attention.
#[derive(Debug, Clone, Copy)]
pub struct OabLayerParams {
    pub bn1: BnParams,
    pub conv1: ParamId,
    pub bn2: BnParams,
    pub conv2: ParamId,
    pub mau: Option<MauParams>,
    pub cau: Option<CauParams>,
    pub cin: usize,
    pub bottleneck: usize,
    pub g: usize,
}

impl OabLayerParams {
    pub fn build<T: Scalar, R: Rng>(
        b: &mut Builder<'_, T, R>,
        cin: usize,
        growth: usize,
        bottleneck: usize,
        variant: &BlockVariantConfig,
        cau_reduction: usize,
    ) -> Result<Self> {
        let cau = match variant.cau {
            CauMode::Off => None,
            CauMode::Oab => Some(CauParams::build(b, cin, cin, cau_reduction)?),
            CauMode::Variant1 => Some(CauParams::build(b, cin, bottleneck, cau_reduction)?),
            CauMode::Variant2 => Some(CauParams::build(b, cin, growth, cau_reduction)?),
        };
        let mau = match variant.mau {
            MauMode::Off => None,
            _ => Some(MauParams::build(b, cin, growth)?),
        };
        Ok(OabLayerParams {
            bn1: b.bn("bn1", cin)?,
            conv1: b.he("conv1", &[bottleneck, cin, 1, 1])?,
            bn2: b.bn("bn2", bottleneck)?,
            conv2: b.he("conv2", &[growth, bottleneck, 3, 3])?,
            mau,
            cau,
            cin,
            bottleneck,
            g: growth,
        })
    }

    pub fn cout(&self) -> usize {
        self.cin + self.g
    }
}

fn check_variant(p: &OabLayerParams, v: &BlockVariantConfig) -> Result<()> {
    let cau_width = match v.cau {
        CauMode::Off => None,
        CauMode::Oab => Some(p.cin),
        CauMode::Variant1 => Some(p.bottleneck),
        CauMode::Variant2 => Some(p.g),
    };
    if cau_width != p.cau.map(|c| c.cout) {
        return Err(Error::invalid("oab_layer", format!("channel attention mode `{}` does not match the layer parameters", v.cau)));
    }
    if (v.mau == MauMode::Off) != p.mau.is_none() {
        return Err(Error::invalid("oab_layer", format!("mask attention mode `{}` does not match the layer parameters", v.mau)));
    }
    Ok(())
}

/// `Cat(f_p, f_n)` with `f_n = φ(f_p × C) × (1 − M)` in the full
/// configuration.
pub fn oab_layer_forward<T: Scalar>(
    s: &mut Session<'_, '_, T>,
    f_p: Var,
    p: &OabLayerParams,
    variant: &BlockVariantConfig,
) -> Result<Var> {
    expect_channels(s, "oab_layer", f_p, p.cin)?;
    check_variant(p, variant)?;
    let c = match &p.cau {
        Some(cp) => Some(cau_forward(s, f_p, cp)?),
        None => None,
    };
    let scale_if = |s: &mut Session<'_, '_, T>, h: Var, when: CauMode| -> Result<Var> {
        match c {
            Some(c) if variant.cau == when => s.g.mul_channel(h, c),
            _ => Ok(h),
        }
    };
    let x = scale_if(s, f_p, CauMode::Oab)?;
    let h = s.bn_relu(x, &p.bn1)?;
    let h = s.conv(h, p.conv1, 1, 0)?;
    let h = scale_if(s, h, CauMode::Variant1)?;
    let h = s.bn_relu(h, &p.bn2)?;
    let h = s.conv(h, p.conv2, 1, 1)?;
    let mut f_n = scale_if(s, h, CauMode::Variant2)?;
    if let Some(mp) = &p.mau {
        let m = mau_forward(s, f_p, mp)?;
        let gate = match variant.mau {
            MauMode::Mask => s.g.affine(m, -T::one(), T::one()),
            MauMode::Variant1 => m,
            MauMode::Variant2 => s.g.affine(m, T::one(), T::one()),
            MauMode::Off => unreachable!("checked above"),
        };
        f_n = s.g.mul(f_n, gate)?;
    }
    s.g.concat_channels(f_p, f_n)
}

/// Applies the layers in order; layer `d` must expect `C0 + d·g` channels.
pub fn oab_stage_forward<T: Scalar>(
    s: &mut Session<'_, '_, T>,
    x: Var,
    layers: &[OabLayerParams],
    variant: &BlockVariantConfig,
) -> Result<Var> {
    let mut h = x;
    for (d, layer) in layers.iter().enumerate() {
        let c = s.g.shape(h)[1];
        if c != layer.cin {
            return Err(Error::shape("oab_stage", format!("layer {d} expects {} channels, chain provides {c}", layer.cin)));
        }
        s.g.push_scope(format!("layer{d}"));
        let out = oab_layer_forward(s, h, layer, variant);
        s.g.pop_scope();
        h = out?;
    }
    Ok(h)
}

/// BN-ReLU-conv1×1 to the configured width, then optionally a 3×3 stride-2
/// max pool.
#[derive(Debug, Clone, Copy)]
pub struct TransitionParams {
    pub bn: BnParams,
    pub conv: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub pool: bool,
}

impl TransitionParams {
    pub fn build<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, cin: usize, cout: usize, pool: bool) -> Result<Self> {
        Ok(TransitionParams { bn: b.bn("bn", cin)?, conv: b.he("conv", &[cout, cin, 1, 1])?, cin, cout, pool })
    }
}

pub fn transition_forward<T: Scalar>(s: &mut Session<'_, '_, T>, x: Var, p: &TransitionParams) -> Result<Var> {
    expect_channels(s, "transition", x, p.cin)?;
    let h = s.bn_relu(x, &p.bn)?;
    let h = s.conv(h, p.conv, 1, 0)?;
    if p.pool {
        s.g.max_pool(h)
    } else {
        Ok(h)
    }
}

/// Fusion weight net θ: BN-ReLU-conv1×1 (2C→hidden), BN-ReLU-dw9×9,
/// conv1×1 (hidden→C). The last conv starts at zero so that `λ = 0.5`.
#[derive(Debug, Clone, Copy)]
pub struct SfuParams {
    pub bn1: BnParams,
    pub pw1: ParamId,
    pub bn2: BnParams,
    pub dw: ParamId,
    pub pw2: ParamId,
    pub c: usize,
    pub hidden: usize,
}

impl SfuParams {
    pub fn build<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, c: usize, hidden: usize) -> Result<Self> {
        b.scope("sfu", |b| {
            Ok(SfuParams {
                bn1: b.bn("bn1", 2 * c)?,
                pw1: b.he("pw1", &[hidden, 2 * c, 1, 1])?,
                bn2: b.bn("bn2", hidden)?,
                dw: b.he("dw", &[hidden, 1, LARGE_KERNEL, LARGE_KERNEL])?,
                pw2: b.zeros("pw2", &[c, hidden, 1, 1])?,
                c,
                hidden,
            })
        })
    }
}

/// Per-element weights `λ = sigmoid(θ(Cat(f_td, f_bu)))`.
pub fn sfu_lambda<T: Scalar>(s: &mut Session<'_, '_, T>, f_td: Var, f_bu: Var, p: &SfuParams) -> Result<Var> {
    expect_channels(s, "sfu", f_td, p.c)?;
    let cat = s.g.concat_channels(f_td, f_bu)?;
    let h = s.bn_relu(cat, &p.bn1)?;
    let h = s.conv(h, p.pw1, 1, 0)?;
    let h = s.bn_relu(h, &p.bn2)?;
    let h = s.depthwise(h, p.dw, LARGE_KERNEL / 2)?;
    let h = s.conv(h, p.pw2, 1, 0)?;
    Ok(s.g.sigmoid(h))
}

/// `λ·f_td + (1 − λ)·f_bu`, or the plain sum in [`FusionMode::Sum`].
pub fn sfu_forward<T: Scalar>(
    s: &mut Session<'_, '_, T>,
    f_td: Var,
    f_bu: Var,
    p: Option<&SfuParams>,
    mode: FusionMode,
) -> Result<Var> {
    if s.g.shape(f_td) != s.g.shape(f_bu) {
        return Err(Error::shape("sfu", format!("{:?} vs {:?}", s.g.shape(f_td), s.g.shape(f_bu))));
    }
    match mode {
        FusionMode::Sum => s.g.add(f_td, f_bu),
        FusionMode::Sfu => {
            let p = p.ok_or_else(|| Error::invalid("sfu", "fusion mode `sfu` needs fusion parameters"))?;
            s.g.push_scope("sfu");
            let out = (|| {
                let lambda = sfu_lambda(s, f_td, f_bu, p)?;
                s.g.lerp(lambda, f_td, f_bu)
            })();
            s.g.pop_scope();
            out
        }
    }
}
