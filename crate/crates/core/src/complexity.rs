//! Parameter and compute accounting per top-level module.

use std::fmt::Write as _;

use bafnet_tensor::FlopTally;

use crate::error::Result;
use crate::model::Bafnet;
use crate::params::ParamStore;

#[derive(Clone, Debug, PartialEq)]
pub struct Complexity {
    pub params: usize,
    pub params_by_module: Vec<(String, usize)>,
    pub input: (usize, usize),
    pub total: FlopTally,
    pub flops_by_module: Vec<(String, FlopTally)>,
}

/// Leading component of a dotted name, e.g. `dep` for `dep.stage1.norm.scale`.
fn module_of(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

pub fn params_by_module(store: &ParamStore<f32>) -> Vec<(String, usize)> {
    let mut out: Vec<(String, usize)> = Vec::new();
    for p in &store.params {
        let m = module_of(&p.name);
        match out.iter_mut().find(|(k, _)| k == m) {
            Some((_, n)) => *n += p.value.numel(),
            None => out.push((m.to_string(), p.value.numel())),
        }
    }
    out
}

pub fn complexity(model: &Bafnet, store: &ParamStore<f32>, h: usize, w: usize) -> Result<Complexity> {
    let counter = model.count_flops(store, h, w)?;
    Ok(Complexity {
        params: store.count(),
        params_by_module: params_by_module(store),
        input: (h, w),
        total: counter.total(),
        flops_by_module: counter.grouped(1),
    })
}

impl Complexity {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "params = {}", self.params);
        let _ = writeln!(s, "input = {}x{}", self.input.0, self.input.1);
        let _ = writeln!(s, "macs = {}", self.total.macs);
        let _ = writeln!(s, "flops = {}", self.total.flops);
        for (m, n) in &self.params_by_module {
            let _ = writeln!(s, "params.{m} = {n}");
        }
        for (m, t) in &self.flops_by_module {
            let _ = writeln!(s, "macs.{m} = {}", t.macs);
        }
        s
    }
}
