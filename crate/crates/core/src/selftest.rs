//! Quick internal consistency checks: gradients, channel arithmetic of every
//! preset, codec round trips and the weights format.

use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::{decode, render_target, CropTransform, Keypoint, TARGET_SIGMA};
use crate::error::{Error, Result};
use crate::model::{build_model, DANetConfig, Model, PRESETS};
use crate::nn::{ParamId, Session};
use crate::scalar::Scalar;
use crate::tensor::{finite_diff_check_mixed, BnMode, GradCheckOptions, Graph, Tensor, Var};

pub const GRAD_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub module: &'static str,
    pub invariant: String,
    pub observed: String,
    pub passed: bool,
    /// The check read a user-supplied file rather than computing something.
    pub reads_input: bool,
}

impl fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {}: {} (observed {})", self.module, self.invariant, self.observed)
    }
}

fn outcome(module: &'static str, invariant: impl Into<String>, observed: impl Into<String>, passed: bool) -> CheckOutcome {
    CheckOutcome { module, invariant: invariant.into(), observed: observed.into(), passed, reads_input: false }
}

/// Runs every check. `weights`, when given, is additionally loaded against
/// `config`.
pub fn run(seed: u64, weights: Option<(&DANetConfig, &Path)>) -> Vec<CheckOutcome> {
    let mut out = Vec::new();
    gradient_checks(seed, &mut out);
    channel_flow_checks(&mut out);
    codec_checks(seed, &mut out);
    weights_checks(seed, weights, &mut out);
    out
}

fn wire<'a, T: Scalar>(
    model: &'a Model<T>,
    g: &mut Graph<'a, T>,
    v: Var,
    images: &'a Tensor<T>,
    readout: &'a Tensor<T>,
    param: Option<ParamId>,
) -> Result<Var> {
    let mut s = Session::new(g, model.params(), BnMode::Eval);
    let x = match param {
        Some(id) => {
            s.bind(id, v);
            s.g.leaf_ref(images, false)
        }
        None => v,
    };
    let y = model.forward(&mut s, x)?;
    let r = s.g.leaf_ref(readout, false);
    let y = s.g.mul(y, r)?;
    Ok(s.g.sum(y))
}

fn gradient_checks(seed: u64, out: &mut Vec<CheckOutcome>) {
    let result = (|| -> Result<Vec<CheckOutcome>> {
        let cfg = DANetConfig::preset("tiny")?;
        let m = build_model::<f32>(&cfg, seed)?;
        let m64 = m.cast::<f64>();
        let (hh, ww) = cfg.heatmap_size();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let images = Tensor::<f32>::randn(&[2, 3, cfg.input_height, cfg.input_width], 1.0, &mut rng);
        let readout = Tensor::<f32>::uniform(&[2, cfg.head.keypoints, hh, ww], -1.0, 1.0, &mut rng);
        let (images64, readout64) = (images.cast::<f64>(), readout.cast::<f64>());
        let mut checks = Vec::new();
        for target in [None, Some("stage1/layer0/conv1"), Some("stage3/layer0/mau/dw"), Some("pyramid/level3/project/conv"), Some("head/out/w")] {
            let id = match target {
                Some(n) => Some(m.params().find(n).ok_or_else(|| Error::invalid("selftest", format!("no parameter {n}")))?),
                None => None,
            };
            let point = match id {
                Some(id) => m.params().get(id).clone(),
                None => images.clone(),
            };
            let rep = finite_diff_check_mixed(
                |g, v| wire(&m, g, v, &images, &readout, id),
                |g, v| wire(&m64, g, v, &images64, &readout64, id),
                &point,
                GradCheckOptions { step: 1e-5, ..Default::default() },
            )?;
            checks.push(outcome(
                "tensor-autograd",
                format!("tiny model gradient wrt {} within {GRAD_TOLERANCE:e}", target.unwrap_or("input")),
                format!("max rel error {:.3e} over {} elements, gradient scale {:.2e}", rep.max_rel_error, rep.checked, rep.scale),
                rep.passes(GRAD_TOLERANCE) && rep.scale > 0.0,
            ));
        }
        Ok(checks)
    })();
    match result {
        Ok(checks) => out.extend(checks),
        Err(e) => out.push(outcome("tensor-autograd", "gradient check runs", e.to_string(), false)),
    }
}

fn channel_flow_checks(out: &mut Vec<CheckOutcome>) {
    for &name in PRESETS {
        let result = (|| -> Result<CheckOutcome> {
            let cfg = DANetConfig::preset(name)?;
            let model = build_model::<f32>(&cfg, 0)?;
            let flow = cfg.channel_flow();
            let mut problems = Vec::new();
            for (i, f) in flow.iter().enumerate() {
                if f.dense_out != f.input + f.layers * f.growth {
                    problems.push(format!("stage{} dense width {}", i + 1, f.dense_out));
                }
                if i > 0 && f.input != flow[i - 1].transition {
                    problems.push(format!("stage{} input {} vs previous transition", i + 1, f.input));
                }
            }
            for (s, l, id) in model.bottleneck_weights() {
                let cin = model.params().get(id).shape()[1];
                let want = flow[s].input + l * flow[s].growth;
                if cin != want {
                    problems.push(format!("stage{}/layer{l} reads {cin}, expected {want}", s + 1));
                }
            }
            let counted = model.count_params().total_params;
            let stored = model.params().learnable().map(|id| model.params().get(id).len() as u64).sum::<u64>();
            if counted != stored {
                problems.push(format!("cost model {counted} params vs {stored} stored"));
            }
            let observed = if problems.is_empty() { format!("{counted} params") } else { problems.join("; ") };
            Ok(outcome("danet-model", format!("{name} channel flow"), observed, problems.is_empty()))
        })();
        out.push(result.unwrap_or_else(|e| outcome("danet-model", format!("{name} builds"), e.to_string(), false)));
    }
}

fn codec_checks(seed: u64, out: &mut Vec<CheckOutcome>) {
    let (hh, ww, stride) = (64usize, 48usize, 4.0);
    let transform = CropTransform::identity((ww * stride as usize, hh * stride as usize));
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc0dec);
    let result = (|| -> Result<f64> {
        let mut worst = 0.0f64;
        for _ in 0..64 {
            let kp = Keypoint::new(rng.random_range(8.0..ww as f64 * stride - 8.0), rng.random_range(8.0..hh as f64 * stride - 8.0));
            let (h, _) = render_target::<f64>(&[kp], TARGET_SIGMA, (hh, ww), stride)?;
            let got = decode(&h, &transform)?[0];
            worst = worst.max((got.x - kp.x).abs().max((got.y - kp.y).abs()) / stride);
        }
        Ok(worst)
    })();
    out.push(match result {
        Ok(w) => outcome("heatmap-codec", "encode/decode round trip within 0.5 cell", format!("{w:.4} cell"), w <= 0.5),
        Err(e) => outcome("heatmap-codec", "encode/decode round trip runs", e.to_string(), false),
    });
}

fn weights_checks(seed: u64, weights: Option<(&DANetConfig, &Path)>, out: &mut Vec<CheckOutcome>) {
    let round_trip = (|| -> Result<bool> {
        let cfg = DANetConfig::preset("tiny")?;
        let m = build_model::<f32>(&cfg, seed)?;
        let bytes = m.weights_bytes();
        Ok(Model::<f32>::from_weights_bytes(&cfg, &bytes)?.weights_bytes() == bytes)
    })();
    out.push(match round_trip {
        Ok(same) => outcome("danet-model", "weights round trip is bit-exact", if same { "identical" } else { "bytes differ" }, same),
        Err(e) => outcome("danet-model", "weights round trip", e.to_string(), false),
    });
    if let Some((cfg, path)) = weights {
        let loaded = Model::<f32>::load(cfg, path);
        let check = match loaded {
            Ok(m) => {
                let finite = m.params().ids().all(|id| m.params().get(id).data().iter().all(|v| v.is_finite()));
                outcome("danet-model", format!("{} loads and is finite", path.display()), if finite { "ok" } else { "non-finite values" }, finite)
            }
            Err(e) => {
                let mut c = outcome("danet-model", format!("{} loads", path.display()), e.to_string(), false);
                c.reads_input = true;
                c
            }
        };
        out.push(check);
    }
}
