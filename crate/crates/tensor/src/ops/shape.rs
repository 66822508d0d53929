//! Data-movement ops: reshape, permute, concat, narrow, index_select.

use crate::error::{arg_err, shape_err, Result};
use crate::graph::Var;
use crate::real::Real;
use crate::tensor::{numel, strides, Tensor};

/// Materialize `x` with its axes reordered so that output axis `i` is input
/// axis `perm[i]`.
pub fn permute_tensor<T: Real>(x: &Tensor<T>, perm: &[usize]) -> Result<Tensor<T>> {
    let s = x.shape();
    if perm.len() != s.len() {
        return Err(arg_err("permute", format!("perm {perm:?} for shape {s:?}")));
    }
    let mut seen = vec![false; perm.len()];
    for &p in perm {
        if p >= perm.len() || seen[p] {
            return Err(arg_err("permute", format!("invalid permutation {perm:?}")));
        }
        seen[p] = true;
    }
    let os: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
    let st = strides(s);
    let ist: Vec<usize> = perm.iter().map(|&p| st[p]).collect();
    let n = x.numel();
    let xd = x.data();
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return Tensor::new(&os, out);
    }
    if os.is_empty() {
        return Ok(x.clone());
    }
    let nd = os.len();
    let inner = os[nd - 1];
    let inner_stride = ist[nd - 1];
    let outer = n / inner;
    let mut idx = vec![0usize; nd - 1];
    let mut off = 0usize;
    for _ in 0..outer {
        if inner_stride == 1 {
            out.extend_from_slice(&xd[off..off + inner]);
        } else {
            let mut o = off;
            for _ in 0..inner {
                out.push(xd[o]);
                o += inner_stride;
            }
        }
        for d in (0..nd - 1).rev() {
            idx[d] += 1;
            off += ist[d];
            if idx[d] < os[d] {
                break;
            }
            off -= ist[d] * os[d];
            idx[d] = 0;
        }
    }
    Tensor::new(&os, out)
}

fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

impl<'g, T: Real> Var<'g, T> {
    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'g, T>> {
        let out = self.to_tensor().reshape(shape)?;
        let s = self.shape().to_vec();
        self.graph().record("reshape", out, &[self], move |g, _| Ok(vec![Some(g.clone().reshape(&s)?)]))
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Var<'g, T>> {
        let out = permute_tensor(self.value(), perm)?;
        let inv = inverse_perm(perm);
        self.graph().record("permute", out, &[self], move |g, _| Ok(vec![Some(permute_tensor(g, &inv)?)]))
    }

    /// Concatenate along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[&Var<'g, T>], axis: usize) -> Result<Var<'g, T>> {
        let first = parts.first().ok_or_else(|| arg_err("concat", "no inputs"))?;
        let s0 = first.shape().to_vec();
        if axis >= s0.len() {
            return Err(arg_err("concat", format!("axis {axis} for shape {s0:?}")));
        }
        let mut lens = Vec::with_capacity(parts.len());
        for p in parts {
            let s = p.shape();
            let ok = s.len() == s0.len() && s.iter().zip(&s0).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(shape_err("concat", format!("{s0:?} vs {s:?} on axis {axis}")));
            }
            lens.push(s[axis]);
        }
        let outer: usize = s0[..axis].iter().product();
        let inner: usize = s0[axis + 1..].iter().product();
        let total: usize = lens.iter().sum();
        let mut os = s0.clone();
        os[axis] = total;
        let mut out = Vec::with_capacity(numel(&os));
        for o in 0..outer {
            for (p, &len) in parts.iter().zip(&lens) {
                let d = p.value().data();
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let out = Tensor::new(&os, out)?;
        let shapes: Vec<Vec<usize>> = parts.iter().map(|p| p.shape().to_vec()).collect();
        first.graph().record("concat", out, parts, move |g, needs| {
            let gd = g.data();
            let mut grads = Vec::with_capacity(shapes.len());
            let mut start = 0;
            for ((shape, &len), &need) in shapes.iter().zip(&lens).zip(needs) {
                if need {
                    let mut gx = Vec::with_capacity(numel(shape));
                    for o in 0..outer {
                        let base = (o * total + start) * inner;
                        gx.extend_from_slice(&gd[base..base + len * inner]);
                    }
                    grads.push(Some(Tensor::new(shape, gx)?));
                } else {
                    grads.push(None);
                }
                start += len;
            }
            Ok(grads)
        })
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<'g, T>> {
        let s = self.shape().to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(arg_err("narrow", format!("axis {axis} range {start}..{} for shape {s:?}", start + len)));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let full = s[axis];
        let xd = self.value().data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&xd[base..base + len * inner]);
        }
        let mut os = s.clone();
        os[axis] = len;
        let out = Tensor::new(&os, out)?;
        self.graph().record("narrow", out, &[self], move |g, _| {
            let mut gx = vec![T::zero(); numel(&s)];
            let gd = g.data();
            for o in 0..outer {
                let base = (o * full + start) * inner;
                gx[base..base + len * inner].copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
            }
            Ok(vec![Some(Tensor::new(&s, gx)?)])
        })
    }

    /// Gather rows of a table along axis 0: output shape is
    /// `[indices.len(), rest...]`.
    pub fn index_select(&self, indices: &[usize]) -> Result<Var<'g, T>> {
        let s = self.shape().to_vec();
        if s.is_empty() {
            return Err(arg_err("index_select", "scalar table"));
        }
        let rows = s[0];
        let row: usize = s[1..].iter().product();
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(arg_err("index_select", format!("index {bad} >= {rows}")));
        }
        let xd = self.value().data();
        let mut out = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            out.extend_from_slice(&xd[i * row..(i + 1) * row]);
        }
        let mut os = s.clone();
        os[0] = indices.len();
        let out = Tensor::new(&os, out)?;
        let idx = indices.to_vec();
        self.graph().record("index_select", out, &[self], move |g, _| {
            let mut gx = vec![T::zero(); numel(&s)];
            let gd = g.data();
            for (k, &i) in idx.iter().enumerate() {
                for (d, &v) in gx[i * row..(i + 1) * row].iter_mut().zip(&gd[k * row..(k + 1) * row]) {
                    *d = *d + v;
                }
            }
            Ok(vec![Some(Tensor::new(&s, gx)?)])
        })
    }
}
