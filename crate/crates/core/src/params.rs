//! Named parameter registry and the forward/backward session that binds it
//! to a [`Graph`].

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{BatchNormState, Graph, Mode, Real, Shape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BnStateId(usize);

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct BnBuffers<T> {
    pub name: String,
    pub state: BatchNormState<T>,
}

/// Every learnable tensor and batch-norm buffer of a model, in registration
/// order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    bns: Vec<BnBuffers<T>>,
    names: HashMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new(), bns: Vec::new(), names: HashMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        let id = ParamId(self.params.len());
        assert!(self.names.insert(name.clone(), id).is_none(), "duplicate parameter name {name}");
        let grad = Tensor::zeros(value.shape());
        self.params.push(Param { name, value, grad });
        id
    }

    pub fn add_bn(&mut self, name: impl Into<String>, channels: usize) -> BnStateId {
        self.bns.push(BnBuffers { name: name.into(), state: BatchNormState::new(channels) });
        BnStateId(self.bns.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn bn(&self, id: BnStateId) -> &BnBuffers<T> {
        &self.bns[id.0]
    }

    pub fn bn_mut(&mut self, id: BnStateId) -> &mut BnBuffers<T> {
        &mut self.bns[id.0]
    }

    /// Parameter ids in registration order.
    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn bn_buffers(&self) -> &[BnBuffers<T>] {
        &self.bns
    }

    pub fn bn_buffers_mut(&mut self) -> &mut [BnBuffers<T>] {
        &mut self.bns
    }

    /// Total number of learnable scalars.
    pub fn num_learnable(&self) -> usize {
        self.params.iter().map(|p| p.value.shape().numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(T::zero());
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param { name: p.name.clone(), value: p.value.cast(), grad: p.grad.cast() })
                .collect(),
            bns: self
                .bns
                .iter()
                .map(|b| BnBuffers {
                    name: b.name.clone(),
                    state: BatchNormState {
                        mean: b.state.mean.iter().map(|v| U::from_f64(v.as_f64())).collect(),
                        var: b.state.var.iter().map(|v| U::from_f64(v.as_f64())).collect(),
                        tracked: b.state.tracked,
                    },
                })
                .collect(),
            names: self.names.clone(),
        }
    }
}

/// Deterministic parameter initialiser with a hierarchical name prefix.
pub struct Init<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
    prefix: Vec<String>,
}

impl<'a, T: Real> Init<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, seed: u64) -> Self {
        Init { store, rng: ChaCha8Rng::seed_from_u64(seed), prefix: Vec::new() }
    }

    /// Runs `f` with `name` appended to the prefix.
    pub fn scope<R>(&mut self, name: impl Into<String>, f: impl FnOnce(&mut Self) -> R) -> R {
        self.prefix.push(name.into());
        let out = f(self);
        self.prefix.pop();
        out
    }

    fn full_name(&self, leaf: &str) -> String {
        let mut parts = self.prefix.clone();
        parts.push(leaf.to_string());
        parts.join(".")
    }

    /// Kaiming-uniform weights: U(-b, b) with b = sqrt(6 / fan_in).
    pub fn kaiming(&mut self, leaf: &str, shape: Shape, fan_in: usize) -> ParamId {
        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
        let data = (0..shape.numel()).map(|_| T::from_f64(self.rng.random_range(-bound..bound))).collect();
        let name = self.full_name(leaf);
        self.store.add(name, Tensor::new(shape, data).expect("init shape"))
    }

    pub fn constant(&mut self, leaf: &str, shape: Shape, value: f64) -> ParamId {
        let name = self.full_name(leaf);
        self.store.add(name, Tensor::full(shape, T::from_f64(value)))
    }

    pub fn bn_state(&mut self, channels: usize) -> BnStateId {
        let name = self.prefix.join(".");
        self.store.add_bn(name, channels)
    }
}

/// Counters filled in during a forward pass.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ForwardStats {
    pub fusion_convs: usize,
    pub cmsa_maps: usize,
    /// (module, layer, scale, input channels) of every fusion convolution.
    pub fusion_input_widths: Vec<(usize, usize, usize, usize)>,
}

/// Normalisation hyperparameters shared by every batch-norm layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormSettings {
    pub eps: f64,
    pub momentum: f64,
}

impl Default for NormSettings {
    fn default() -> Self {
        NormSettings { eps: 1e-5, momentum: 0.1 }
    }
}

/// One forward (and optionally backward) pass over a [`ParamStore`].
pub struct Session<'s, T> {
    pub graph: Graph<T>,
    store: &'s mut ParamStore<T>,
    bound: HashMap<ParamId, Var>,
    mode: Mode,
    pub norm: NormSettings,
    pub stats: ForwardStats,
}

impl<'s, T: Real> Session<'s, T> {
    pub fn new(store: &'s mut ParamStore<T>, mode: Mode) -> Self {
        Session {
            graph: Graph::new(),
            store,
            bound: HashMap::new(),
            mode,
            norm: NormSettings::default(),
            stats: ForwardStats::default(),
        }
    }

    /// Continues recording on an existing graph.
    pub fn with_graph(store: &'s mut ParamStore<T>, mode: Mode, graph: Graph<T>) -> Self {
        Session { graph, ..Session::new(store, mode) }
    }

    /// Uses an existing graph value for a parameter instead of its stored value.
    pub fn bind(&mut self, id: ParamId, v: Var) {
        self.bound.insert(id, v);
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Graph handle for a parameter; each parameter is recorded once.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let v = self.graph.param(self.store.get(id).value.clone());
        self.bound.insert(id, v);
        v
    }

    pub fn batch_norm(&mut self, x: Var, gamma: ParamId, beta: ParamId, state: BnStateId) -> Result<Var> {
        let g = self.param(gamma);
        let b = self.param(beta);
        let NormSettings { eps, momentum } = self.norm;
        let st = &mut self.store.bns[state.0].state;
        self.graph.batch_norm(x, g, b, st, self.mode, eps, momentum)
    }

    /// Backward from `loss`, then adds parameter gradients into the store.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.graph.backward(loss)?;
        for (&id, &v) in &self.bound {
            let grad = self
                .graph
                .grad(v)
                .ok_or_else(|| Error::State(format!("no gradient for {}", self.store.get(id).name)))?;
            let dst = &mut self.store.params[id.0].grad;
            dst.data_mut().iter_mut().zip(grad.data()).for_each(|(a, &b)| *a = *a + b);
        }
        Ok(())
    }
}
