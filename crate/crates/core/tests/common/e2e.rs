//! Tiny-model gradient checks through a weighted-sum readout.

use danet::nn::{ParamId, Session};
use danet::tensor::{finite_diff_check_mixed, finite_diff_check_with, BnMode, GradCheck, GradCheckOptions, Graph};
use danet::{build_model, DANetConfig, Model, Scalar, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn wire<'a, T: Scalar>(
    model: &'a Model<T>,
    mode: BnMode,
    g: &mut Graph<'a, T>,
    v: Var,
    images: &'a Tensor<T>,
    readout: &'a Tensor<T>,
    param: Option<ParamId>,
) -> danet::Result<Var> {
    let mut s = Session::new(g, model.params(), mode);
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

/// Tiny model away from its neutral start: fusion weights randomized and
/// channel-attention hidden units switched on (with 2 hidden units they are
/// often all dead at initialization).
pub fn perturbed_tiny(seed: u64) -> Model<f32> {
    let mut m = build_model::<f32>(&DANetConfig::preset("tiny").unwrap(), seed).unwrap();
    let biases: Vec<_> = m.params().ids().filter(|&id| m.params().name(id).ends_with("cau/fc1/b")).collect();
    for id in biases {
        m.params_mut().get_mut(id).data_mut().fill(0.5);
    }
    for level in 1..=3 {
        let id = m.params().find(&format!("pyramid/level{level}/sfu/pw2")).unwrap();
        let shape = m.params().get(id).shape().to_vec();
        m.params_mut().set(id, Tensor::randn(&shape, 0.3, &mut rng(seed ^ level))).unwrap();
    }
    m
}

pub struct Case {
    pub images: Tensor<f32>,
    pub readout: Tensor<f32>,
}

pub fn case(seed: u64) -> Case {
    Case {
        images: Tensor::randn(&[2, 3, 32, 24], 1.0, &mut rng(seed ^ 0x11)),
        readout: Tensor::uniform(&[2, 17, 8, 6], -1.0, 1.0, &mut rng(seed ^ 0x22)),
    }
}

pub fn check_f32(seed: u64, param: Option<&str>) -> GradCheck {
    let m = perturbed_tiny(seed);
    let m64 = m.cast::<f64>();
    let c = case(seed);
    let (images64, readout64) = (c.images.cast::<f64>(), c.readout.cast::<f64>());
    let id = param.map(|n| m.params().find(n).unwrap_or_else(|| panic!("no parameter {n}")));
    let point = match id {
        Some(id) => m.params().get(id).clone(),
        None => c.images.clone(),
    };
    finite_diff_check_mixed(
        |g, v| wire(&m, BnMode::Eval, g, v, &c.images, &c.readout, id),
        |g, v| wire(&m64, BnMode::Eval, g, v, &images64, &readout64, id),
        &point,
        GradCheckOptions { step: 1e-5, ..Default::default() },
    )
    .unwrap()
}

pub fn check_f64_train(seed: u64, param: &str) -> GradCheck {
    let m = perturbed_tiny(seed).cast::<f64>();
    let c = case(seed);
    let (images, readout) = (c.images.cast::<f64>(), c.readout.cast::<f64>());
    let id = Some(m.params().find(param).unwrap_or_else(|| panic!("no parameter {param}")));
    let point = m.params().get(id.unwrap()).clone();
    finite_diff_check_with(
        |g, v| wire(&m, BnMode::Train, g, v, &images, &readout, id),
        &point,
        // 64-bit rounding of the difference quotient is ~1e-9 at step 1e-5
        GradCheckOptions { step: 3e-5, ..Default::default() },
    )
    .unwrap()
}
