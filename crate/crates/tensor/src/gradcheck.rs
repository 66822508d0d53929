//! Central finite-difference gradient checking in double precision.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradcheckOptions {
    pub step: f64,
    /// Denominator floor for the relative error, so that gradients which are
    /// zero up to round-off do not blow the ratio up.
    pub floor: f64,
    /// Check at most this many elements per input (evenly spaced). `None`
    /// checks every element.
    pub max_per_input: Option<usize>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions { step: 1e-4, floor: 1e-6, max_per_input: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradMismatch {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradcheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<GradMismatch>,
}

impl GradcheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_err <= tol
    }

    pub fn record(&mut self, m: GradMismatch) {
        self.checked += 1;
        if self.worst.is_none() || m.rel_err > self.max_rel_err {
            self.max_rel_err = m.rel_err;
            self.worst = Some(m);
        }
    }
}

pub fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Evenly spaced element indices, at most `max` of them.
pub fn sample_indices(n: usize, max: Option<usize>) -> Vec<usize> {
    match max {
        Some(m) if m < n => (0..m).map(|i| i * n / m).collect(),
        _ => (0..n).collect(),
    }
}

/// Deterministic pseudo-random values in [-1, 1), used to turn a tensor
/// output into a scalar loss with generic upstream gradients.
pub fn probe_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut state = seed;
    Tensor::from_fn(shape, |_| {
        state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
        (z >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
    })
}

/// Checks the gradient of a scalar function of `inputs` built on a fresh
/// graph. `f` must return a scalar.
pub fn gradcheck<F>(inputs: &[Tensor<f64>], f: F, opts: GradcheckOptions) -> Result<GradcheckReport>
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>,
{
    let g = Graph::new();
    let leaves: Vec<_> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = f(&g, &leaves)?;
    let grads = g.backward(&loss)?;
    let analytic: Vec<Tensor<f64>> = leaves.iter().map(|l| grads.get_or_zeros(l)).collect();

    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let g = Graph::no_grad();
        let vs: Vec<_> = xs.iter().map(|t| g.constant(t.clone())).collect();
        Ok(f(&g, &vs)?.value().item())
    };

    let mut report = GradcheckReport::default();
    let mut xs = inputs.to_vec();
    for (i, a) in analytic.iter().enumerate() {
        for idx in sample_indices(xs[i].numel(), opts.max_per_input) {
            let orig = xs[i].data()[idx];
            xs[i].data_mut()[idx] = orig + opts.step;
            let plus = eval(&xs)?;
            xs[i].data_mut()[idx] = orig - opts.step;
            let minus = eval(&xs)?;
            xs[i].data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let analytic = a.data()[idx];
            report.record(GradMismatch {
                input: i,
                index: idx,
                analytic,
                numeric,
                rel_err: rel_error(analytic, numeric, opts.floor),
            });
        }
    }
    Ok(report)
}
