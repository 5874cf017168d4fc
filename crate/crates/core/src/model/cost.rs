use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::nn::{ParamKind, Session};
use crate::scalar::Scalar;
use crate::tensor::{BnMode, Graph, Tensor};

use super::Model;

/// How multiply-accumulates are converted to FLOPs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum FlopConvention {
    /// one FLOP per multiply-accumulate
    Mac,
    /// two FLOPs per multiply-accumulate
    TwoMac,
}

impl FlopConvention {
    /// The convention under which the published complexity figures are
    /// reproduced (one multiply-accumulate = one FLOP).
    pub const CALIBRATED: FlopConvention = FlopConvention::Mac;

    pub fn factor(self) -> u64 {
        match self {
            FlopConvention::Mac => 1,
            FlopConvention::TwoMac => 2,
        }
    }
}

impl FromStr for FlopConvention {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mac" => Ok(FlopConvention::Mac),
            "2mac" => Ok(FlopConvention::TwoMac),
            other => Err(Error::Config(format!("unknown FLOP convention `{other}` (expected mac or 2mac)"))),
        }
    }
}

impl fmt::Display for FlopConvention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FlopConvention::Mac => "mac",
            FlopConvention::TwoMac => "2mac",
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ModuleCost {
    pub name: String,
    pub params: u64,
    pub macs: u64,
    /// Element-wise operations (BN, activations, pooling, gating, ...).
    pub elementwise: u64,
    pub flops: u64,
}

/// Per-module parameter and arithmetic counts; totals are sums of the rows.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CostReport {
    pub convention: FlopConvention,
    pub input: Option<(usize, usize)>,
    pub modules: Vec<ModuleCost>,
    pub total_params: u64,
    pub total_macs: u64,
    pub total_elementwise: u64,
    pub total_flops: u64,
}

impl CostReport {
    fn from_modules(convention: FlopConvention, input: Option<(usize, usize)>, mut modules: Vec<ModuleCost>) -> Self {
        for m in &mut modules {
            m.flops = m.macs * convention.factor() + m.elementwise;
        }
        CostReport {
            convention,
            input,
            total_params: modules.iter().map(|m| m.params).sum(),
            total_macs: modules.iter().map(|m| m.macs).sum(),
            total_elementwise: modules.iter().map(|m| m.elementwise).sum(),
            total_flops: modules.iter().map(|m| m.flops).sum(),
            modules,
        }
    }

    pub fn module(&self, name: &str) -> Option<&ModuleCost> {
        self.modules.iter().find(|m| m.name == name)
    }

    pub fn params_m(&self) -> f64 {
        self.total_params as f64 / 1e6
    }

    pub fn gflops(&self) -> f64 {
        self.total_flops as f64 / 1e9
    }
}

fn top_level(name: &str) -> &str {
    name.split('/').next().unwrap_or(name)
}

fn row<'m>(modules: &'m mut Vec<ModuleCost>, name: &str) -> &'m mut ModuleCost {
    if let Some(i) = modules.iter().position(|m| m.name == name) {
        return &mut modules[i];
    }
    modules.push(ModuleCost { name: name.to_string(), ..Default::default() });
    modules.last_mut().expect("just pushed")
}

fn param_rows<T: Scalar>(model: &Model<T>) -> Vec<ModuleCost> {
    let mut modules = Vec::new();
    for e in model.params().entries() {
        if e.kind == ParamKind::Learnable {
            row(&mut modules, top_level(&e.name)).params += e.value.len() as u64;
        }
    }
    modules
}

pub(super) fn count_params<T: Scalar>(model: &Model<T>) -> CostReport {
    CostReport::from_modules(FlopConvention::CALIBRATED, None, param_rows(model))
}

pub(super) fn count_flops<T: Scalar>(
    model: &Model<T>,
    height: usize,
    width: usize,
    convention: FlopConvention,
) -> Result<CostReport> {
    let mut modules = param_rows(model);
    let images = Tensor::zeros(&[1, 3, height, width]);
    let mut g = Graph::inference();
    let x = g.leaf(images, false);
    let mut s = Session::new(&mut g, model.params(), BnMode::Eval);
    model.forward(&mut s, x)?;
    for c in g.costs() {
        let r = row(&mut modules, top_level(&c.scope));
        r.macs += c.macs;
        r.elementwise += c.elementwise;
    }
    Ok(CostReport::from_modules(convention, Some((height, width)), modules))
}
