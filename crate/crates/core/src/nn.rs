//! Named parameter storage and the glue that feeds stored parameters into a
//! [`Graph`].

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{BnMode, Graph, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Handle of one tensor in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer and counted as a parameter.
    Learnable,
    /// State such as batch-norm running statistics.
    Buffer,
}

#[derive(Debug, Clone)]
pub struct Entry<T> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<T>,
}

/// Flat, insertion-ordered collection of named tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    entries: Vec<Entry<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.find(&name).is_some() {
            return Err(Error::invalid("param store", format!("duplicate tensor name `{name}`")));
        }
        self.entries.push(Entry { name, kind, value });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let e = &mut self.entries[id.0];
        if e.value.shape() != value.shape() {
            return Err(Error::WeightShapeMismatch {
                name: e.name.clone(),
                expected: e.value.shape().to_vec(),
                found: value.shape().to_vec(),
            });
        }
        e.value = value;
        Ok(())
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.entries[id.0].kind
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn entries(&self) -> &[Entry<T>] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn learnable(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|&id| self.kind(id) == ParamKind::Learnable)
    }

    /// Number of learnable scalars whose name starts with `prefix`.
    pub fn count(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Learnable && e.name.starts_with(prefix))
            .map(|e| e.value.len())
            .sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| Entry { name: e.name.clone(), kind: e.kind, value: e.value.cast() })
                .collect(),
        }
    }

    /// Folds the batch statistics recorded by a training-mode forward into
    /// the running buffers: `running ← (1−m)·running + m·batch`, with the
    /// batch variance taken unbiased.
    pub fn update_running_stats(&mut self, graph: &Graph<'_, T>, recorded: &[(BnParams, Var)], momentum: f64) {
        let stats = BatchStats::collect(graph, recorded);
        self.apply_batch_stats(&stats, momentum);
    }

    /// [`ParamStore::update_running_stats`] from statistics already taken
    /// out of the graph, so the graph's borrow of the store can end first.
    pub fn apply_batch_stats(&mut self, stats: &[BatchStats<T>], momentum: f64) {
        let m = T::from_f64_lossy(momentum);
        let keep = T::one() - m;
        for st in stats {
            let unbias = if st.count > 1 { T::from_count(st.count) / T::from_count(st.count - 1) } else { T::one() };
            for (r, &b) in self.get_mut(st.bn.mean).data_mut().iter_mut().zip(&st.mean) {
                *r = keep * *r + m * b;
            }
            for (r, &b) in self.get_mut(st.bn.var).data_mut().iter_mut().zip(&st.var) {
                *r = keep * *r + m * b * unbias;
            }
        }
    }
}

/// Biased batch moments of one training-mode batch-norm node.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub bn: BnParams,
    pub mean: Vec<T>,
    pub var: Vec<T>,
    /// Elements per channel.
    pub count: usize,
}

impl<T: Scalar> BatchStats<T> {
    pub fn collect(graph: &Graph<'_, T>, recorded: &[(BnParams, Var)]) -> Vec<Self> {
        recorded
            .iter()
            .filter_map(|(bn, v)| {
                let (mean, var) = graph.bn_batch_stats(*v)?;
                let s = graph.shape(*v);
                Some(BatchStats { bn: *bn, mean: mean.to_vec(), var: var.to_vec(), count: s[0] * s[2] * s[3] })
            })
            .collect()
    }
}

/// Batch-norm parameters and running statistics of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BnParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub mean: ParamId,
    pub var: ParamId,
}

/// Registers freshly initialized tensors under a `/`-separated name prefix.
pub struct Builder<'s, T, R> {
    store: &'s mut ParamStore<T>,
    rng: &'s mut R,
    prefix: Vec<String>,
}

impl<'s, T: Scalar, R: Rng> Builder<'s, T, R> {
    pub fn new(store: &'s mut ParamStore<T>, rng: &'s mut R) -> Self {
        Builder { store, rng, prefix: Vec::new() }
    }

    /// Runs `f` with `name` appended to the prefix.
    pub fn scope<O>(&mut self, name: impl Into<String>, f: impl FnOnce(&mut Self) -> Result<O>) -> Result<O> {
        self.prefix.push(name.into());
        let out = f(self);
        self.prefix.pop();
        out
    }

    fn full_name(&self, leaf: &str) -> String {
        let mut s = self.prefix.join("/");
        if !s.is_empty() {
            s.push('/');
        }
        s.push_str(leaf);
        s
    }

    pub fn add(&mut self, leaf: &str, kind: ParamKind, value: Tensor<T>) -> Result<ParamId> {
        let name = self.full_name(leaf);
        self.store.add(name, kind, value)
    }

    /// He-normal weights, `std = sqrt(2 / fan_in)`, where the fan-in is the
    /// product of every dimension after the first.
    pub fn he(&mut self, leaf: &str, shape: &[usize]) -> Result<ParamId> {
        let fan_in: usize = shape[1..].iter().product();
        let std = (2.0 / fan_in.max(1) as f64).sqrt();
        let t = Tensor::randn(shape, std, self.rng);
        self.add(leaf, ParamKind::Learnable, t)
    }

    /// Zero-mean Gaussian weights with the given deviation.
    pub fn normal(&mut self, leaf: &str, shape: &[usize], std: f64) -> Result<ParamId> {
        let t = Tensor::randn(shape, std, self.rng);
        self.add(leaf, ParamKind::Learnable, t)
    }

    pub fn zeros(&mut self, leaf: &str, shape: &[usize]) -> Result<ParamId> {
        self.add(leaf, ParamKind::Learnable, Tensor::zeros(shape))
    }

    pub fn bn(&mut self, leaf: &str, channels: usize) -> Result<BnParams> {
        self.scope(leaf, |b| {
            Ok(BnParams {
                gamma: b.add("gamma", ParamKind::Learnable, Tensor::ones(&[channels]))?,
                beta: b.add("beta", ParamKind::Learnable, Tensor::zeros(&[channels]))?,
                mean: b.add("running_mean", ParamKind::Buffer, Tensor::zeros(&[channels]))?,
                var: b.add("running_var", ParamKind::Buffer, Tensor::ones(&[channels]))?,
            })
        })
    }
}

/// One forward pass: binds stored parameters to graph leaves on first use
/// and remembers the batch-norm nodes whose statistics a training step folds
/// back into the store.
pub struct Session<'g, 'a, T: Scalar> {
    pub g: &'g mut Graph<'a, T>,
    store: &'a ParamStore<T>,
    bound: Vec<Option<Var>>,
    bn_mode: BnMode,
    bn_nodes: Vec<(BnParams, Var)>,
}

impl<'g, 'a, T: Scalar> Session<'g, 'a, T> {
    pub fn new(g: &'g mut Graph<'a, T>, store: &'a ParamStore<T>, bn_mode: BnMode) -> Self {
        Session { g, store, bound: vec![None; store.len()], bn_mode, bn_nodes: Vec::new() }
    }

    pub fn store(&self) -> &'a ParamStore<T> {
        self.store
    }

    pub fn bn_mode(&self) -> BnMode {
        self.bn_mode
    }

    /// Graph node of a stored tensor; learnable tensors require grad when the
    /// graph records.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let learnable = self.store.kind(id) == ParamKind::Learnable;
        let v = self.g.leaf_ref(self.store.get(id), learnable);
        self.bound[id.0] = Some(v);
        v
    }

    /// Substitutes an existing node for a stored tensor, e.g. to
    /// differentiate with respect to a perturbed copy of it.
    pub fn bind(&mut self, id: ParamId, v: Var) {
        self.bound[id.0] = Some(v);
    }

    pub fn batchnorm(&mut self, x: Var, bn: &BnParams) -> Result<Var> {
        let gamma = self.param(bn.gamma);
        let beta = self.param(bn.beta);
        let (mean, var) = (self.store.get(bn.mean), self.store.get(bn.var));
        let y = self.g.batchnorm(x, gamma, beta, mean, var, self.bn_mode, BN_EPS)?;
        if self.bn_mode == BnMode::Train {
            self.bn_nodes.push((*bn, y));
        }
        Ok(y)
    }

    pub fn conv(&mut self, x: Var, w: ParamId, stride: usize, padding: usize) -> Result<Var> {
        let w = self.param(w);
        self.g.conv2d(x, w, None, stride, padding)
    }

    pub fn conv_bias(&mut self, x: Var, w: ParamId, b: ParamId, stride: usize, padding: usize) -> Result<Var> {
        let (w, b) = (self.param(w), self.param(b));
        self.g.conv2d(x, w, Some(b), stride, padding)
    }

    pub fn depthwise(&mut self, x: Var, w: ParamId, padding: usize) -> Result<Var> {
        let w = self.param(w);
        self.g.depthwise_conv2d(x, w, 1, padding)
    }

    /// BN → ReLU.
    pub fn bn_relu(&mut self, x: Var, bn: &BnParams) -> Result<Var> {
        let y = self.batchnorm(x, bn)?;
        Ok(self.g.relu(y))
    }

    pub fn linear(&mut self, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
        let (w, b) = (self.param(w), self.param(b));
        self.g.linear(x, w, b)
    }

    /// Graph nodes bound so far, indexed by [`ParamId::index`].
    pub fn bound(&self) -> &[Option<Var>] {
        &self.bound
    }

    pub fn bn_nodes(&self) -> &[(BnParams, Var)] {
        &self.bn_nodes
    }

    pub fn into_parts(self) -> (Vec<Option<Var>>, Vec<(BnParams, Var)>) {
        (self.bound, self.bn_nodes)
    }
}
