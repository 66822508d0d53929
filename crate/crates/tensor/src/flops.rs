//! Op-level compute accounting.
//!
//! Convolutions, linear maps and matmuls are tallied in multiply-accumulates.
//! `flops` uses the 2·MAC convention plus one add per bias element.
//! Elementwise ops, norms and softmax are not counted.

use std::ops::AddAssign;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FlopTally {
    pub macs: u64,
    pub flops: u64,
}

impl FlopTally {
    pub fn from_macs(macs: u64, bias_adds: u64) -> Self {
        FlopTally { macs, flops: 2 * macs + bias_adds }
    }
}

impl AddAssign for FlopTally {
    fn add_assign(&mut self, rhs: Self) {
        self.macs += rhs.macs;
        self.flops += rhs.flops;
    }
}

/// Closed-form tally for one conv2d application.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_tally(
    batch: usize,
    cin: usize,
    cout: usize,
    kernel: usize,
    groups: usize,
    out_h: usize,
    out_w: usize,
    bias: bool,
) -> FlopTally {
    let positions = (batch * cout * out_h * out_w) as u64;
    let macs = positions * ((cin / groups) * kernel * kernel) as u64;
    FlopTally::from_macs(macs, if bias { positions } else { 0 })
}

/// Per-scope tallies in first-seen order.
#[derive(Clone, Debug, Default)]
pub struct FlopCounter {
    entries: Vec<(String, FlopTally)>,
}

impl FlopCounter {
    pub fn add(&mut self, scope: &str, tally: FlopTally) {
        match self.entries.iter_mut().find(|(s, _)| s == scope) {
            Some((_, t)) => *t += tally,
            None => self.entries.push((scope.to_string(), tally)),
        }
    }

    pub fn total(&self) -> FlopTally {
        let mut t = FlopTally::default();
        for (_, e) in &self.entries {
            t += *e;
        }
        t
    }

    pub fn entries(&self) -> &[(String, FlopTally)] {
        &self.entries
    }

    /// Totals grouped by the first `depth` dot-separated scope components.
    pub fn grouped(&self, depth: usize) -> Vec<(String, FlopTally)> {
        let mut out: Vec<(String, FlopTally)> = Vec::new();
        for (scope, t) in &self.entries {
            let key: String = scope.split('.').take(depth).collect::<Vec<_>>().join(".");
            match out.iter_mut().find(|(k, _)| *k == key) {
                Some((_, acc)) => *acc += *t,
                None => out.push((key, *t)),
            }
        }
        out
    }
}
