//! Block builders, an eval-mode runner and gradient probes around single
//! blocks.

use danet::blocks::*;
use danet::nn::{Builder, ParamId, ParamStore, Session};
use danet::tensor::{finite_diff_check_mixed, BnMode, GradCheck, GradCheckOptions, Graph};
use danet::{Scalar, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn build<T: Scalar, O>(seed: u64, f: impl FnOnce(&mut Builder<'_, T, ChaCha8Rng>) -> danet::Result<O>) -> (ParamStore<T>, O) {
    let mut store = ParamStore::new();
    let mut r = rng(seed);
    let out = f(&mut Builder::new(&mut store, &mut r)).unwrap();
    (store, out)
}

/// Runs `f` in a fresh eval-mode session and returns the value of its output.
pub fn eval<T: Scalar>(
    store: &ParamStore<T>,
    inputs: &[&Tensor<T>],
    f: impl FnOnce(&mut Session<'_, '_, T>, &[Var]) -> danet::Result<Var>,
) -> danet::Result<Tensor<T>> {
    let mut g = Graph::inference();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf((*t).clone(), false)).collect();
    let mut s = Session::new(&mut g, store, BnMode::Eval);
    let out = f(&mut s, &vars)?;
    Ok(g.value(out).clone())
}

/// A block wired between an input and a weighted-sum readout, runnable at
/// either precision.
pub trait Probe {
    fn run<T: Scalar>(&self, s: &mut Session<'_, '_, T>, x: Var) -> danet::Result<Var>;
}

/// Input gradient, or the gradient with respect to `param` when given.
pub fn check<P: Probe>(probe: &P, store: &ParamStore<f32>, x: &Tensor<f32>, param: Option<ParamId>, seed: u64) -> GradCheck {
    let store64 = store.cast::<f64>();
    let point: Tensor<f32> = match param {
        Some(id) => store.get(id).clone(),
        None => x.clone(),
    };
    let x64 = x.cast::<f64>();
    let out_shape = {
        let y = eval(store, &[x], |s, v| probe.run(s, v[0])).unwrap();
        y.shape().to_vec()
    };
    let readout = Tensor::<f32>::uniform(&out_shape, -1.0, 1.0, &mut rng(seed ^ 0xabc));
    let readout64 = readout.cast::<f64>();
    fn wire<'a, T: Scalar, P: Probe>(
        probe: &P,
        g: &mut Graph<'a, T>,
        v: Var,
        store: &'a ParamStore<T>,
        input: &'a Tensor<T>,
        readout: &'a Tensor<T>,
        param: Option<ParamId>,
    ) -> danet::Result<Var> {
        let mut s = Session::new(g, store, BnMode::Train);
        let x = match param {
            Some(id) => {
                s.bind(id, v);
                s.g.leaf_ref(input, false)
            }
            None => v,
        };
        let y = probe.run(&mut s, x)?;
        let r = s.g.leaf_ref(readout, false);
        let y = s.g.mul(y, r)?;
        Ok(s.g.sum(y))
    }
    finite_diff_check_mixed(
        |g, v| wire(probe, g, v, store, x, &readout, param),
        |g, v| wire(probe, g, v, &store64, &x64, &readout64, param),
        &point,
        GradCheckOptions { step: 1e-5, ..Default::default() },
    )
    .unwrap()
}

pub struct MauProbe(pub MauParams);
impl Probe for MauProbe {
    fn run<T: Scalar>(&self, s: &mut Session<'_, '_, T>, x: Var) -> danet::Result<Var> {
        mau_forward(s, x, &self.0)
    }
}

pub struct CauProbe(pub CauParams);
impl Probe for CauProbe {
    fn run<T: Scalar>(&self, s: &mut Session<'_, '_, T>, x: Var) -> danet::Result<Var> {
        cau_forward(s, x, &self.0)
    }
}

pub struct LayerProbe(pub OabLayerParams, pub BlockVariantConfig);
impl Probe for LayerProbe {
    fn run<T: Scalar>(&self, s: &mut Session<'_, '_, T>, x: Var) -> danet::Result<Var> {
        oab_layer_forward(s, x, &self.0, &self.1)
    }
}

pub struct SfuProbe(pub SfuParams, pub Tensor<f32>, pub Tensor<f64>);
impl Probe for SfuProbe {
    fn run<T: Scalar>(&self, s: &mut Session<'_, '_, T>, x: Var) -> danet::Result<Var> {
        // the bottom-up operand is a fixed tensor of the session's precision
        let other: Tensor<T> = if T::DTYPE == danet::DType::F32 { self.1.cast() } else { self.2.cast() };
        let b = s.g.constant(other);
        sfu_forward(s, x, b, Some(&self.0), FusionMode::Sfu)
    }
}
