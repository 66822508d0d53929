#![allow(dead_code)]

pub mod reference;

use bafnet::params::{Ctx, ParamBuilder, ParamStore};
use bafnet::Result;
use bafnet_tensor::gradcheck::probe_tensor;
use bafnet_tensor::{Graph, NormMode, Real, Tensor, Var};

/// Builds a module and returns it with its parameters.
pub fn build<M, T: Real>(seed: u64, f: impl FnOnce(&mut ParamBuilder) -> Result<M>) -> (M, ParamStore<T>) {
    let mut b = ParamBuilder::new(seed);
    let m = f(&mut b).unwrap();
    (m, b.finish())
}

/// Runs `f` on an untaped eval-mode context and returns the output value.
pub fn eval<T: Real>(
    store: &ParamStore<T>,
    input: &Tensor<T>,
    f: impl for<'g> Fn(&Ctx<'g, T>, &Var<'g, T>) -> Result<Var<'g, T>>,
) -> Tensor<T> {
    let g = Graph::no_grad();
    let ctx = Ctx::new(&g, store, NormMode::Eval);
    let x = ctx.input(input.clone());
    f(&ctx, &x).unwrap().to_tensor()
}

pub fn set<T: Real>(store: &mut ParamStore<T>, name: &str, f: impl Fn(usize) -> f64) {
    let t = store.by_name_mut(name).unwrap_or_else(|| panic!("no parameter {name}"));
    for (i, v) in t.data_mut().iter_mut().enumerate() {
        *v = T::from_f64c(f(i));
    }
}

pub fn zero<T: Real>(store: &mut ParamStore<T>, name: &str) {
    set(store, name, |_| 0.0);
}

/// Zeroes every parameter whose name starts with `prefix`.
pub fn zero_prefix<T: Real>(store: &mut ParamStore<T>, prefix: &str) {
    let mut hit = false;
    for p in store.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
        p.value.data_mut().fill(T::zero());
        hit = true;
    }
    assert!(hit, "no parameter under {prefix}");
}

/// Fills every parameter whose name starts with `prefix` with probe values.
pub fn randomize<T: Real>(store: &mut ParamStore<T>, prefix: &str, seed: u64, scale: f64) {
    for (k, p) in store.params.iter_mut().filter(|p| p.name.starts_with(prefix)).enumerate() {
        let r = probe_tensor(p.value.shape(), seed.wrapping_add(k as u64));
        for (d, s) in p.value.data_mut().iter_mut().zip(r.data()) {
            *d = T::from_f64c(s * scale);
        }
    }
}

/// Identity 1x1 kernel `(c, c, 1, 1)`.
pub fn eye(c: usize) -> impl Fn(usize) -> f64 {
    move |i| if i / c == i % c { 1.0 } else { 0.0 }
}

/// Depthwise delta kernel `(c, 1, k, k)`.
pub fn delta(k: usize) -> impl Fn(usize) -> f64 {
    move |i| if i % (k * k) == (k / 2) * k + k / 2 { 1.0 } else { 0.0 }
}

pub fn input(shape: &[usize], seed: u64) -> Tensor<f64> {
    probe_tensor(shape, seed)
}

/// Weighted sum with probe weights: a scalar whose gradient differs per element.
pub fn project<'g>(g: &'g Graph<f64>, y: &Var<'g, f64>, seed: u64) -> bafnet_tensor::Result<Var<'g, f64>> {
    let w = g.constant(probe_tensor(y.shape(), seed));
    y.mul(&w)?.sum_all()
}

/// Direct-loop zero-padded conv (groups = 1): `w` is (co, ci, k, k).
pub fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, stride: usize, pad: usize) -> Tensor<f64> {
    let s = x.shape();
    let (n, ci, h, wd) = (s[0], s[1], s[2], s[3]);
    let (co, k) = (w.shape()[0], w.shape()[2]);
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    Tensor::from_fn(&[n, co, ho, wo], |i| {
        let (bi, o, y, xx) = (i / (co * ho * wo), (i / (ho * wo)) % co, (i / wo) % ho, i % wo);
        let mut acc = b.map_or(0.0, |b| b.data()[o]);
        for c in 0..ci {
            for ki in 0..k {
                for kj in 0..k {
                    let iy = (y * stride + ki) as isize - pad as isize;
                    let ix = (xx * stride + kj) as isize - pad as isize;
                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                        acc += w.data()[((o * ci + c) * k + ki) * k + kj] * x.at(&[bi, c, iy as usize, ix as usize]);
                    }
                }
            }
        }
        acc
    })
}

/// Eval-mode batch norm with the given running statistics, per channel.
pub fn naive_bn(x: &Tensor<f64>, scale: &Tensor<f64>, shift: &Tensor<f64>, mean: &[f64], var: &[f64]) -> Tensor<f64> {
    let s = x.shape();
    let (c, hw) = (s[1], s[2] * s[3]);
    Tensor::from_fn(s, |i| {
        let ch = (i / hw) % c;
        (x.data()[i] - mean[ch]) / (var[ch] + bafnet_tensor::NORM_EPS).sqrt() * scale.data()[ch] + shift.data()[ch]
    })
}

pub fn param<'a>(s: &'a ParamStore<f64>, name: &str) -> &'a Tensor<f64> {
    s.by_name(name).unwrap_or_else(|| panic!("no parameter {name}"))
}
