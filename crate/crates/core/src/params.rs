//! Named parameter registry and the per-forward execution context.

use std::cell::RefCell;
use std::collections::HashSet;

use bafnet_tensor::{Grads, Graph, NormMode, Real, RunningStats, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{config_err, shape_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StatsId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Const(f64),
    /// Normal with std sqrt(2 / fan_in); fan_in = numel / shape[0].
    HeNormal,
    Normal(f64),
    /// Depthwise identity kernel: 1 at the spatial center, 0 elsewhere.
    Delta,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// Whether decoupled weight decay applies.
    pub decay: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StatsEntry<T> {
    pub name: String,
    pub stats: RunningStats<T>,
}

/// Ordered, uniquely named model state: trainable tensors plus batch-norm
/// running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    pub params: Vec<ParamEntry<T>>,
    pub stats: Vec<StatsEntry<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn count_with_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.name == prefix || p.name.starts_with(&format!("{prefix}.")))
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|i| self.get(i))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.id(name).map(|i| self.get_mut(i))
    }

    pub fn stats(&self, id: StatsId) -> &RunningStats<T> {
        &self.stats[id.0].stats
    }

    pub fn stats_mut(&mut self, id: StatsId) -> &mut RunningStats<T> {
        &mut self.stats[id.0].stats
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        let cast_vec = |v: &[T]| v.iter().map(|x| U::from_f64c(x.to_f64c())).collect();
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| ParamEntry { name: p.name.clone(), value: p.value.cast(), decay: p.decay })
                .collect(),
            stats: self
                .stats
                .iter()
                .map(|s| StatsEntry {
                    name: s.name.clone(),
                    stats: RunningStats { mean: cast_vec(&s.stats.mean), var: cast_vec(&s.stats.var) },
                })
                .collect(),
        }
    }

    pub fn set_stats(&mut self, stats: Vec<RunningStats<T>>) {
        for (e, s) in self.stats.iter_mut().zip(stats) {
            e.stats = s;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.is_finite())
    }
}

/// Registers parameters in construction order and draws their initial
/// values from a seeded stream. Values are drawn in f64 so that stores of
/// either precision start from the same numbers.
pub struct ParamBuilder {
    rng: ChaCha8Rng,
    store: ParamStore<f64>,
    seen: HashSet<String>,
}

impl ParamBuilder {
    pub fn new(seed: u64) -> Self {
        ParamBuilder {
            rng: ChaCha8Rng::seed_from_u64(seed),
            store: ParamStore { params: Vec::new(), stats: Vec::new() },
            seen: HashSet::new(),
        }
    }

    fn claim(&mut self, name: &str) -> Result<()> {
        if !self.seen.insert(name.to_string()) {
            return Err(config_err(format!("duplicate parameter name {name}")));
        }
        Ok(())
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init, decay: bool) -> Result<ParamId> {
        self.claim(name)?;
        let n: usize = shape.iter().product();
        let value = match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Const(c) => Tensor::full(shape, c),
            Init::HeNormal => {
                let fan_in = (n / shape.first().copied().unwrap_or(1).max(1)).max(1);
                self.normal(shape, (2.0 / fan_in as f64).sqrt())
            }
            Init::Normal(std) => self.normal(shape, std),
            Init::Delta => {
                let (kh, kw) = (shape[shape.len() - 2], shape[shape.len() - 1]);
                let center = (kh / 2) * kw + kw / 2;
                Tensor::from_fn(shape, |i| if i % (kh * kw) == center { 1.0 } else { 0.0 })
            }
        };
        self.store.params.push(ParamEntry { name: name.to_string(), value, decay });
        Ok(ParamId(self.store.params.len() - 1))
    }

    pub fn running_stats(&mut self, name: &str, channels: usize) -> Result<StatsId> {
        self.claim(name)?;
        self.store.stats.push(StatsEntry { name: name.to_string(), stats: RunningStats::new(channels) });
        Ok(StatsId(self.store.stats.len() - 1))
    }

    fn normal(&mut self, shape: &[usize], std: f64) -> Tensor<f64> {
        let d = Normal::new(0.0, std).expect("finite std");
        Tensor::from_fn(shape, |_| d.sample(&mut self.rng))
    }

    pub fn finish<T: Real>(self) -> ParamStore<T> {
        self.store.cast()
    }
}

/// One forward pass: parameters bound to graph variables, batch-norm
/// statistics (updated in train mode) and optional feature probes.
pub struct Ctx<'g, T: Real> {
    pub graph: &'g Graph<T>,
    pub mode: NormMode,
    params: Vec<Var<'g, T>>,
    stats: RefCell<Vec<RunningStats<T>>>,
    probes: Option<RefCell<Vec<(String, Tensor<T>)>>>,
}

impl<'g, T: Real> Ctx<'g, T> {
    /// Parameters become gradient leaves when the graph records.
    pub fn new(graph: &'g Graph<T>, store: &ParamStore<T>, mode: NormMode) -> Self {
        Ctx {
            graph,
            mode,
            params: store.params.iter().map(|p| graph.leaf(p.value.clone())).collect(),
            stats: RefCell::new(store.stats.iter().map(|s| s.stats.clone()).collect()),
            probes: None,
        }
    }

    pub fn with_probes(mut self) -> Self {
        self.probes = Some(RefCell::new(Vec::new()));
        self
    }

    pub fn p(&self, id: ParamId) -> &Var<'g, T> {
        &self.params[id.0]
    }

    /// Bind `id` to an externally created variable (e.g. a gradcheck input).
    pub fn bind(&mut self, id: ParamId, v: Var<'g, T>) -> Result<()> {
        let cur = &self.params[id.0];
        if cur.shape() != v.shape() {
            return Err(shape_err(format!("binding {:?} to parameter of shape {:?}", v.shape(), cur.shape())));
        }
        self.params[id.0] = v;
        Ok(())
    }

    pub fn input(&self, t: Tensor<T>) -> Var<'g, T> {
        self.graph.constant(t)
    }

    pub fn batch_norm(&self, x: &Var<'g, T>, scale: ParamId, shift: ParamId, stats: StatsId) -> Result<Var<'g, T>> {
        let mut all = self.stats.borrow_mut();
        Ok(x.batch_norm(self.p(scale), self.p(shift), &mut all[stats.0], self.mode)?)
    }

    pub fn probing(&self) -> bool {
        self.probes.is_some()
    }

    pub fn probe(&self, name: &str, v: &Var<'g, T>) {
        if let Some(p) = &self.probes {
            p.borrow_mut().push((name.to_string(), v.to_tensor()));
        }
    }

    /// Gradients in parameter order (zeros for parameters off the tape).
    pub fn param_grads(&self, grads: &Grads<T>) -> Vec<Tensor<T>> {
        self.params.iter().map(|v| grads.get_or_zeros(v)).collect()
    }

    pub fn stats_snapshot(&self) -> Vec<RunningStats<T>> {
        self.stats.borrow().clone()
    }

    pub fn take_probes(&self) -> Vec<(String, Tensor<T>)> {
        self.probes.as_ref().map(|p| p.take()).unwrap_or_default()
    }
}
