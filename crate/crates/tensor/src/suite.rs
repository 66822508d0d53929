//! Finite-difference checks of every differentiable op on small fixed
//! instances, for command-line self-checks.

use crate::error::Result;
use crate::gradcheck::{gradcheck, probe_tensor, GradcheckOptions, GradcheckReport};
use crate::graph::{Graph, Var};
use crate::ops::conv::Conv2dParams;
use crate::ops::norm::{NormMode, RunningStats};
use crate::tensor::Tensor;

/// Relative tolerance for op-level checks.
pub const OP_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub name: String,
    pub report: GradcheckReport,
}

fn project<'g>(g: &'g Graph<f64>, y: &Var<'g, f64>, seed: u64) -> Result<Var<'g, f64>> {
    let w = g.constant(probe_tensor(y.shape(), seed));
    y.mul(&w)?.sum_all()
}

fn away_from_zero(shape: &[usize], seed: u64) -> Tensor<f64> {
    probe_tensor(shape, seed).map(|v| if v >= 0.0 { v + 0.2 } else { v - 0.2 })
}

struct Suite(Vec<SuiteEntry>);

impl Suite {
    fn add<F>(&mut self, name: &str, inputs: &[Tensor<f64>], f: F) -> Result<()>
    where
        F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>,
    {
        let report = gradcheck(inputs, f, GradcheckOptions::default())?;
        self.0.push(SuiteEntry { name: name.to_string(), report });
        Ok(())
    }
}

/// One entry per op (and per mode/variant where backward differs).
pub fn op_suite() -> Result<Vec<SuiteEntry>> {
    let r = probe_tensor;
    let mut s = Suite(Vec::new());

    let x = r(&[2, 3, 7, 7], 1);
    s.add("conv2d dense stride 2 + bias", &[x.clone(), r(&[4, 3, 3, 3], 2), r(&[4], 3)], |g, v| {
        project(g, &v[0].conv2d(&v[1], Some(&v[2]), Conv2dParams::new(2, 1, 1, 1))?, 4)
    })?;
    s.add("conv2d depthwise dilated", &[r(&[1, 4, 9, 9], 5), r(&[4, 1, 5, 5], 6)], |g, v| {
        project(g, &v[0].conv2d(&v[1], None, Conv2dParams::new(1, 6, 3, 4))?, 7)
    })?;
    s.add("conv2d grouped 1x1", &[r(&[1, 4, 3, 5], 8), r(&[6, 2, 1, 1], 9)], |g, v| {
        project(g, &v[0].conv2d(&v[1], None, Conv2dParams::new(1, 0, 1, 2))?, 10)
    })?;

    let (bx, bs, bb) = (r(&[2, 4, 5, 5], 11), r(&[4], 12).map(|v| v + 1.5), r(&[4], 13));
    s.add("batch_norm train", &[bx.clone(), bs.clone(), bb.clone()], |g, v| {
        let mut st = RunningStats::new(4);
        project(g, &v[0].batch_norm(&v[1], &v[2], &mut st, NormMode::Train)?, 14)
    })?;
    s.add("batch_norm eval", &[bx, bs, bb], |g, v| {
        let mut st = RunningStats { mean: vec![0.1, -0.2, 0.3, 0.0], var: vec![0.5, 1.5, 2.0, 1.0] };
        project(g, &v[0].batch_norm(&v[1], &v[2], &mut st, NormMode::Eval)?, 15)
    })?;
    s.add("layer_norm", &[r(&[3, 4, 6], 16), r(&[6], 17), r(&[6], 18)], |g, v| {
        project(g, &v[0].layer_norm(&v[1], &v[2], 2)?, 19)
    })?;

    let a = away_from_zero(&[3, 7], 20);
    s.add("gelu", std::slice::from_ref(&a), |g, v| project(g, &v[0].gelu()?, 21))?;
    s.add("sigmoid", std::slice::from_ref(&a), |g, v| project(g, &v[0].sigmoid()?, 22))?;
    s.add("relu", std::slice::from_ref(&a), |g, v| project(g, &v[0].relu()?, 23))?;
    s.add("exp", std::slice::from_ref(&a), |g, v| project(g, &v[0].exp()?, 24))?;
    s.add("square", std::slice::from_ref(&a), |g, v| project(g, &v[0].square()?, 25))?;
    s.add("neg, affine, scale, add_scalar", std::slice::from_ref(&a), |g, v| {
        project(g, &v[0].neg()?.affine(0.5, 2.0)?.scale(3.0)?.add_scalar(-1.0)?, 26)
    })?;
    s.add("clamp", std::slice::from_ref(&a), |g, v| project(g, &v[0].clamp(-0.5, 0.5)?, 27))?;
    s.add("ln", &[a.map(|v| v.abs() + 0.1)], |g, v| project(g, &v[0].ln()?, 28))?;

    let sm = r(&[2, 3, 4], 29).map(|v| 3.0 * v);
    for axis in 0..3 {
        s.add(&format!("softmax axis {axis}"), std::slice::from_ref(&sm), move |g, v| {
            project(g, &v[0].softmax(axis)?, 30)
        })?;
    }
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let a = if ta { r(&[2, 4, 3], 31) } else { r(&[2, 3, 4], 31) };
        let b = if tb { r(&[2, 5, 4], 32) } else { r(&[2, 4, 5], 32) };
        s.add(&format!("matmul transpose ({ta}, {tb})"), &[a, b], move |g, v| {
            project(g, &v[0].matmul_t(&v[1], ta, tb)?, 33)
        })?;
    }
    s.add("matmul shared rhs", &[r(&[3, 3, 4], 34), r(&[4, 5], 35)], |g, v| project(g, &v[0].matmul(&v[1])?, 36))?;

    let x4 = r(&[2, 3, 4, 5], 37);
    s.add("global_avg_pool", std::slice::from_ref(&x4), |g, v| project(g, &v[0].global_avg_pool()?, 38))?;
    s.add("sum_axis", std::slice::from_ref(&x4), |g, v| project(g, &v[0].sum_axis(2)?, 39))?;
    s.add("mean_all", std::slice::from_ref(&x4), |_, v| v[0].square()?.mean_all())?;
    s.add("concat", &[r(&[2, 3, 4], 40), r(&[2, 2, 4], 41)], |g, v| project(g, &Var::concat(&[&v[0], &v[1]], 1)?, 42))?;
    s.add("permute", std::slice::from_ref(&x4), |g, v| project(g, &v[0].permute(&[3, 0, 2, 1])?, 43))?;
    s.add("reshape", std::slice::from_ref(&x4), |g, v| project(g, &v[0].reshape(&[6, 20])?, 44))?;
    s.add("narrow", &[x4], |g, v| project(g, &v[0].narrow(3, 1, 3)?, 45))?;
    s.add("index_select", &[r(&[5, 3], 46)], |g, v| project(g, &v[0].index_select(&[4, 0, 0, 2, 4])?, 47))?;
    let im = r(&[1, 2, 5, 6], 48);
    s.add("bilinear up", std::slice::from_ref(&im), |g, v| project(g, &v[0].bilinear_resize(8, 13)?, 49))?;
    s.add("bilinear down", &[im], |g, v| project(g, &v[0].bilinear_resize(3, 2)?, 50))?;

    let (p, q) = (r(&[2, 3, 4], 51), away_from_zero(&[3, 1], 52));
    s.add("add broadcast", &[p.clone(), q.clone()], |g, v| project(g, &v[0].add(&v[1])?, 53))?;
    s.add("sub broadcast", &[p.clone(), q.clone()], |g, v| project(g, &v[0].sub(&v[1])?, 54))?;
    s.add("mul broadcast", &[p.clone(), q.clone()], |g, v| project(g, &v[0].mul(&v[1])?, 55))?;
    s.add("div broadcast", &[p, q], |g, v| project(g, &v[0].div(&v[1])?, 56))?;
    Ok(s.0)
}
