//! Batch and layer normalization as fused ops.

use crate::error::{shape_err, Result};
use crate::graph::Var;
use crate::real::Real;
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Running statistics of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Real> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats { mean: vec![T::zero(); channels], var: vec![T::one(); channels] }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

/// View a tensor as (outer, axis, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<'g, T: Real> Var<'g, T> {
    /// Per-channel normalization over every axis except 1. In train mode the
    /// batch statistics are used and `stats` is updated with momentum 0.1
    /// (unbiased variance); in eval mode `stats` is used as-is.
    pub fn batch_norm(
        &self,
        scale: &Var<'g, T>,
        shift: &Var<'g, T>,
        stats: &mut RunningStats<T>,
        mode: NormMode,
    ) -> Result<Var<'g, T>> {
        let s = self.shape().to_vec();
        if s.len() < 2 {
            return Err(shape_err("batch_norm", format!("input {s:?}")));
        }
        let (outer, c, inner) = split_axis(&s, 1);
        if scale.shape() != [c] || shift.shape() != [c] || stats.mean.len() != c || stats.var.len() != c {
            return Err(shape_err(
                "batch_norm",
                format!(
                    "{c} channels vs scale {:?}, shift {:?}, stats {}",
                    scale.shape(),
                    shift.shape(),
                    stats.mean.len()
                ),
            ));
        }
        let eps = T::from_f64c(NORM_EPS);
        let x = self.value().data();
        let count = outer * inner;
        let (mean, invstd) = match mode {
            NormMode::Train => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                let n = T::from_usize_c(count.max(1));
                for ch in 0..c {
                    let mut acc = T::zero();
                    for o in 0..outer {
                        let base = (o * c + ch) * inner;
                        acc = acc + x[base..base + inner].iter().copied().sum::<T>();
                    }
                    let m = acc / n;
                    let mut sq = T::zero();
                    for o in 0..outer {
                        let base = (o * c + ch) * inner;
                        sq = sq + x[base..base + inner].iter().map(|&v| (v - m) * (v - m)).sum::<T>();
                    }
                    mean[ch] = m;
                    var[ch] = sq / n;
                }
                let mom = T::from_f64c(BN_MOMENTUM);
                for ch in 0..c {
                    let unbiased = if count > 1 { var[ch] * n / T::from_usize_c(count - 1) } else { var[ch] };
                    stats.mean[ch] = (T::one() - mom) * stats.mean[ch] + mom * mean[ch];
                    stats.var[ch] = (T::one() - mom) * stats.var[ch] + mom * unbiased;
                }
                let invstd = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                (mean, invstd)
            }
            NormMode::Eval => {
                (stats.mean.clone(), stats.var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect::<Vec<T>>())
            }
        };
        let gamma = scale.value().data();
        let beta = shift.value().data();
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for o in 0..outer {
            for ch in 0..c {
                let base = (o * c + ch) * inner;
                let (m, is, ga, be) = (mean[ch], invstd[ch], gamma[ch], beta[ch]);
                for i in base..base + inner {
                    let h = (x[i] - m) * is;
                    xhat[i] = h;
                    out[i] = ga * h + be;
                }
            }
        }
        let out = Tensor::new(&s, out)?;
        let gamma = scale.value_rc();
        self.graph().record("batch_norm", out, &[self, scale, shift], move |g, needs| {
            let gd = g.data();
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            for o in 0..outer {
                for ch in 0..c {
                    let base = (o * c + ch) * inner;
                    let mut sg = T::zero();
                    let mut sgx = T::zero();
                    for i in base..base + inner {
                        sg = sg + gd[i];
                        sgx = sgx + gd[i] * xhat[i];
                    }
                    dbeta[ch] = dbeta[ch] + sg;
                    dgamma[ch] = dgamma[ch] + sgx;
                }
            }
            let gx = if needs[0] {
                let gam = gamma.data();
                let mut gx = vec![T::zero(); gd.len()];
                let n = T::from_usize_c(count.max(1));
                for o in 0..outer {
                    for ch in 0..c {
                        let base = (o * c + ch) * inner;
                        let k = gam[ch] * invstd[ch];
                        match mode {
                            NormMode::Train => {
                                let mg = dbeta[ch] / n;
                                let mgx = dgamma[ch] / n;
                                for i in base..base + inner {
                                    gx[i] = k * (gd[i] - mg - xhat[i] * mgx);
                                }
                            }
                            NormMode::Eval => {
                                for i in base..base + inner {
                                    gx[i] = k * gd[i];
                                }
                            }
                        }
                    }
                }
                Some(Tensor::new(&s, gx)?)
            } else {
                None
            };
            Ok(vec![
                gx,
                if needs[1] { Some(Tensor::new(&[c], dgamma)?) } else { None },
                if needs[2] { Some(Tensor::new(&[c], dbeta)?) } else { None },
            ])
        })
    }

    /// Normalize across `axis` (the channel axis of token-shaped data) with
    /// per-channel affine parameters.
    pub fn layer_norm(&self, scale: &Var<'g, T>, shift: &Var<'g, T>, axis: usize) -> Result<Var<'g, T>> {
        let s = self.shape().to_vec();
        if axis >= s.len() {
            return Err(shape_err("layer_norm", format!("axis {axis} for {s:?}")));
        }
        let (outer, c, inner) = split_axis(&s, axis);
        if scale.shape() != [c] || shift.shape() != [c] {
            return Err(shape_err(
                "layer_norm",
                format!("{c} channels vs scale {:?}, shift {:?}", scale.shape(), shift.shape()),
            ));
        }
        let eps = T::from_f64c(NORM_EPS);
        let nc = T::from_usize_c(c);
        let x = self.value().data();
        let gamma = scale.value().data();
        let beta = shift.value().data();
        let mut xhat = vec![T::zero(); x.len()];
        let mut invstd = vec![T::zero(); outer * inner];
        let mut out = vec![T::zero(); x.len()];
        let mut mean = vec![T::zero(); inner];
        let mut var = vec![T::zero(); inner];
        for o in 0..outer {
            let blk = o * c * inner;
            mean.fill(T::zero());
            var.fill(T::zero());
            for ch in 0..c {
                let row = &x[blk + ch * inner..blk + (ch + 1) * inner];
                for (m, &v) in mean.iter_mut().zip(row) {
                    *m = *m + v;
                }
            }
            for m in mean.iter_mut() {
                *m = *m / nc;
            }
            for ch in 0..c {
                let row = &x[blk + ch * inner..blk + (ch + 1) * inner];
                for ((q, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                    *q = *q + (v - m) * (v - m);
                }
            }
            let inv = &mut invstd[o * inner..(o + 1) * inner];
            for (iv, &q) in inv.iter_mut().zip(&var) {
                *iv = T::one() / (q / nc + eps).sqrt();
            }
            for ch in 0..c {
                let (ga, be) = (gamma[ch], beta[ch]);
                let r = blk + ch * inner;
                for i in 0..inner {
                    let h = (x[r + i] - mean[i]) * inv[i];
                    xhat[r + i] = h;
                    out[r + i] = ga * h + be;
                }
            }
        }
        let out = Tensor::new(&s, out)?;
        let gamma = scale.value_rc();
        self.graph().record("layer_norm", out, &[self, scale, shift], move |g, needs| {
            let gd = g.data();
            let gam = gamma.data();
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            let mut gx = needs[0].then(|| vec![T::zero(); gd.len()]);
            let mut sum_d = vec![T::zero(); inner];
            let mut sum_dx = vec![T::zero(); inner];
            for o in 0..outer {
                let blk = o * c * inner;
                sum_d.fill(T::zero());
                sum_dx.fill(T::zero());
                for ch in 0..c {
                    let r = blk + ch * inner;
                    let mut sg = T::zero();
                    let mut sgx = T::zero();
                    for i in 0..inner {
                        let gv = gd[r + i];
                        let h = xhat[r + i];
                        sg = sg + gv;
                        sgx = sgx + gv * h;
                        let dh = gv * gam[ch];
                        sum_d[i] = sum_d[i] + dh;
                        sum_dx[i] = sum_dx[i] + dh * h;
                    }
                    dbeta[ch] = dbeta[ch] + sg;
                    dgamma[ch] = dgamma[ch] + sgx;
                }
                if let Some(gx) = gx.as_mut() {
                    let inv = &invstd[o * inner..(o + 1) * inner];
                    for ch in 0..c {
                        let r = blk + ch * inner;
                        for i in 0..inner {
                            let dh = gd[r + i] * gam[ch];
                            gx[r + i] = inv[i] * (dh - sum_d[i] / nc - xhat[r + i] * sum_dx[i] / nc);
                        }
                    }
                }
            }
            Ok(vec![
                gx.map(|d| Tensor::new(&s, d)).transpose()?,
                if needs[1] { Some(Tensor::new(&[c], dgamma)?) } else { None },
                if needs[2] { Some(Tensor::new(&[c], dbeta)?) } else { None },
            ])
        })
    }
}
