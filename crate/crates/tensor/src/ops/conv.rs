//! 2-d convolution with stride, zero padding, dilation and groups.
//!
//! Three kernels share one contract: depthwise (direct shifted-row loops),
//! pointwise (a single GEMM per group) and the general case (im2col + GEMM).

use crate::error::{arg_err, shape_err, Result};
use crate::flops::conv2d_tally;
use crate::graph::Var;
use crate::real::{gemm, MatLayout, Real};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dParams {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Default for Conv2dParams {
    fn default() -> Self {
        Conv2dParams { stride: 1, padding: 0, dilation: 1, groups: 1 }
    }
}

impl Conv2dParams {
    pub fn new(stride: usize, padding: usize, dilation: usize, groups: usize) -> Self {
        Conv2dParams { stride, padding, dilation, groups }
    }
}

/// `floor((n + 2p - d(k-1) - 1) / s) + 1`, or `None` when the kernel does not fit.
pub fn conv_out_size(n: usize, k: usize, stride: usize, padding: usize, dilation: usize) -> Option<usize> {
    let span = dilation * (k - 1) + 1;
    let padded = n + 2 * padding;
    if padded < span || stride == 0 {
        return None;
    }
    Some((padded - span) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    b: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    s: usize,
    p: usize,
    d: usize,
    groups: usize,
}

impl Geometry {
    fn new(x: &[usize], wt: &[usize], prm: Conv2dParams) -> Result<Self> {
        if x.len() != 4 || wt.len() != 4 {
            return Err(shape_err("conv2d", format!("input {x:?}, weight {wt:?}")));
        }
        if prm.stride == 0 || prm.dilation == 0 || prm.groups == 0 {
            return Err(arg_err("conv2d", format!("non-positive stride/dilation/groups in {prm:?}")));
        }
        let (b, cin, h, w) = (x[0], x[1], x[2], x[3]);
        let (cout, cg, kh, kw) = (wt[0], wt[1], wt[2], wt[3]);
        if cin % prm.groups != 0 || cout % prm.groups != 0 {
            return Err(arg_err("conv2d", format!("groups {} must divide channels {cin} -> {cout}", prm.groups)));
        }
        if cg != cin / prm.groups {
            return Err(shape_err(
                "conv2d",
                format!("weight {wt:?} expects {} input channels per group", cin / prm.groups),
            ));
        }
        if kh == 0 || kw == 0 {
            return Err(shape_err("conv2d", "empty kernel"));
        }
        let ho = conv_out_size(h, kh, prm.stride, prm.padding, prm.dilation);
        let wo = conv_out_size(w, kw, prm.stride, prm.padding, prm.dilation);
        let (Some(ho), Some(wo)) = (ho, wo) else {
            return Err(shape_err("conv2d", format!("kernel larger than padded input {x:?}")));
        };
        Ok(Geometry {
            b,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            ho,
            wo,
            s: prm.stride,
            p: prm.padding,
            d: prm.dilation,
            groups: prm.groups,
        })
    }

    fn cg(&self) -> usize {
        self.cin / self.groups
    }

    fn og(&self) -> usize {
        self.cout / self.groups
    }

    fn is_depthwise(&self) -> bool {
        self.groups == self.cin && self.cout == self.cin
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.s == 1 && self.p == 0
    }

    fn kvol(&self) -> usize {
        self.cg() * self.kh * self.kw
    }
}

/// Output positions `o` in `[lo, hi)` whose input index `o*s + off` lies in `[0, n)`.
#[inline]
fn valid_range(n: usize, out_len: usize, s: usize, off: isize) -> (usize, usize) {
    let s_i = s as isize;
    let lo = if off >= 0 { 0 } else { ((-off) + s_i - 1) / s_i };
    let last = n as isize - 1 - off;
    if last < 0 {
        return (0, 0);
    }
    let hi = ((last / s_i) + 1).min(out_len as isize);
    let lo = lo.min(out_len as isize);
    if hi <= lo {
        (0, 0)
    } else {
        (lo as usize, hi as usize)
    }
}

fn im2col<T: Real>(x: &[T], g: &Geometry, cols: &mut [T]) {
    let howo = g.ho * g.wo;
    for ci in 0..g.cg() {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            let offy = (ki * g.d) as isize - g.p as isize;
            let (ylo, yhi) = valid_range(g.h, g.ho, g.s, offy);
            for kj in 0..g.kw {
                let offx = (kj * g.d) as isize - g.p as isize;
                let (xlo, xhi) = valid_range(g.w, g.wo, g.s, offx);
                let r = (ci * g.kh + ki) * g.kw + kj;
                let row = &mut cols[r * howo..(r + 1) * howo];
                row.fill(T::zero());
                for oy in ylo..yhi {
                    let iy = (oy as isize * g.s as isize + offy) as usize;
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    let dst = &mut row[oy * g.wo..(oy + 1) * g.wo];
                    for ox in xlo..xhi {
                        dst[ox] = src[(ox as isize * g.s as isize + offx) as usize];
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], g: &Geometry, gx: &mut [T]) {
    let howo = g.ho * g.wo;
    for ci in 0..g.cg() {
        let plane = &mut gx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            let offy = (ki * g.d) as isize - g.p as isize;
            let (ylo, yhi) = valid_range(g.h, g.ho, g.s, offy);
            for kj in 0..g.kw {
                let offx = (kj * g.d) as isize - g.p as isize;
                let (xlo, xhi) = valid_range(g.w, g.wo, g.s, offx);
                let r = (ci * g.kh + ki) * g.kw + kj;
                let row = &cols[r * howo..(r + 1) * howo];
                for oy in ylo..yhi {
                    let iy = (oy as isize * g.s as isize + offy) as usize;
                    let dst = &mut plane[iy * g.w..(iy + 1) * g.w];
                    let src = &row[oy * g.wo..(oy + 1) * g.wo];
                    for ox in xlo..xhi {
                        let ix = (ox as isize * g.s as isize + offx) as usize;
                        dst[ix] = dst[ix] + src[ox];
                    }
                }
            }
        }
    }
}

/// `acc += a * src`
#[inline]
fn axpy<T: Real>(acc: &mut [T], a: T, src: &[T]) {
    for (o, &v) in acc.iter_mut().zip(src) {
        *o = *o + a * v;
    }
}

/// Dot product with independent partial sums so it vectorizes.
#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    const LANES: usize = 16;
    let mut part = [T::zero(); LANES];
    let (ca, cb) = (a.chunks_exact(LANES), b.chunks_exact(LANES));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..LANES {
            part[l] = part[l] + x[l] * y[l];
        }
    }
    let tail = ra.iter().zip(rb).fold(T::zero(), |s, (&x, &y)| s + x * y);
    part.iter().fold(tail, |s, &v| s + v)
}

/// Stride-1 depthwise convolution on a zero-padded copy of each plane.
/// Output rows are computed `wp` wide (padded width), so every kernel tap is
/// one contiguous `axpy` over the whole plane; the extra columns are dropped.
struct PaddedPlane {
    hp: usize,
    wp: usize,
    /// Length of the wide output: last valid output index + 1.
    len: usize,
}

impl PaddedPlane {
    fn new(g: &Geometry) -> Self {
        let (hp, wp) = (g.h + 2 * g.p, g.w + 2 * g.p);
        PaddedPlane { hp, wp, len: (g.ho - 1) * wp + g.wo }
    }

    fn fill<T: Real>(&self, g: &Geometry, plane: &[T], pad: &mut [T]) {
        for y in 0..g.h {
            let o = (y + g.p) * self.wp + g.p;
            pad[o..o + g.w].copy_from_slice(&plane[y * g.w..(y + 1) * g.w]);
        }
    }

    fn tap_offset(&self, g: &Geometry, ki: usize, kj: usize) -> usize {
        ki * g.d * self.wp + kj * g.d
    }
}

fn depthwise_s1_forward<T: Real>(x: &[T], wt: &[T], g: &Geometry, out: &mut [T]) {
    let (hw, howo, kk) = (g.h * g.w, g.ho * g.wo, g.kh * g.kw);
    let pp = PaddedPlane::new(g);
    let mut pad = vec![T::zero(); pp.hp * pp.wp];
    let mut acc = vec![T::zero(); pp.len];
    for bc in 0..g.b * g.cin {
        let c = bc % g.cin;
        pp.fill(g, &x[bc * hw..(bc + 1) * hw], &mut pad);
        acc.fill(T::zero());
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let off = pp.tap_offset(g, ki, kj);
                axpy(&mut acc, wt[c * kk + ki * g.kw + kj], &pad[off..off + pp.len]);
            }
        }
        let dst = &mut out[bc * howo..(bc + 1) * howo];
        for oy in 0..g.ho {
            dst[oy * g.wo..(oy + 1) * g.wo].copy_from_slice(&acc[oy * pp.wp..oy * pp.wp + g.wo]);
        }
    }
}

fn depthwise_s1_backward<T: Real>(
    x: &[T],
    wt: &[T],
    gout: &[T],
    g: &Geometry,
    mut gx: Option<&mut [T]>,
    mut gw: Option<&mut [T]>,
) {
    let (hw, howo, kk) = (g.h * g.w, g.ho * g.wo, g.kh * g.kw);
    let pp = PaddedPlane::new(g);
    let mut pad = vec![T::zero(); pp.hp * pp.wp];
    let mut gpad = vec![T::zero(); pp.hp * pp.wp];
    // Wide output gradient; the padding columns stay zero.
    let mut gwide = vec![T::zero(); pp.len];
    for bc in 0..g.b * g.cin {
        let c = bc % g.cin;
        let gplane = &gout[bc * howo..(bc + 1) * howo];
        for oy in 0..g.ho {
            gwide[oy * pp.wp..oy * pp.wp + g.wo].copy_from_slice(&gplane[oy * g.wo..(oy + 1) * g.wo]);
        }
        if gw.is_some() {
            pp.fill(g, &x[bc * hw..(bc + 1) * hw], &mut pad);
        }
        if gx.is_some() {
            gpad.fill(T::zero());
        }
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let tap = c * kk + ki * g.kw + kj;
                let off = pp.tap_offset(g, ki, kj);
                if let Some(gw) = gw.as_deref_mut() {
                    gw[tap] = gw[tap] + dot(&gwide, &pad[off..off + pp.len]);
                }
                if gx.is_some() {
                    axpy(&mut gpad[off..off + pp.len], wt[tap], &gwide);
                }
            }
        }
        if let Some(gx) = gx.as_deref_mut() {
            let dst = &mut gx[bc * hw..(bc + 1) * hw];
            for y in 0..g.h {
                let o = (y + g.p) * pp.wp + g.p;
                for (d, &v) in dst[y * g.w..(y + 1) * g.w].iter_mut().zip(&gpad[o..o + g.w]) {
                    *d = *d + v;
                }
            }
        }
    }
}

fn depthwise_forward<T: Real>(x: &[T], wt: &[T], g: &Geometry, out: &mut [T]) {
    if g.s == 1 {
        return depthwise_s1_forward(x, wt, g, out);
    }
    let (hw, howo, kk) = (g.h * g.w, g.ho * g.wo, g.kh * g.kw);
    for bc in 0..g.b * g.cin {
        let c = bc % g.cin;
        let plane = &x[bc * hw..(bc + 1) * hw];
        let dst = &mut out[bc * howo..(bc + 1) * howo];
        for ki in 0..g.kh {
            let offy = (ki * g.d) as isize - g.p as isize;
            let (ylo, yhi) = valid_range(g.h, g.ho, g.s, offy);
            for kj in 0..g.kw {
                let wv = wt[c * kk + ki * g.kw + kj];
                let offx = (kj * g.d) as isize - g.p as isize;
                let (xlo, xhi) = valid_range(g.w, g.wo, g.s, offx);
                if xhi == xlo {
                    continue;
                }
                for oy in ylo..yhi {
                    let iy = (oy as isize * g.s as isize + offy) as usize;
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    let drow = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if g.s == 1 {
                        let ix0 = (xlo as isize + offx) as usize;
                        for (o, &v) in drow[xlo..xhi].iter_mut().zip(&src[ix0..ix0 + (xhi - xlo)]) {
                            *o = *o + wv * v;
                        }
                    } else {
                        for ox in xlo..xhi {
                            let ix = (ox as isize * g.s as isize + offx) as usize;
                            drow[ox] = drow[ox] + wv * src[ix];
                        }
                    }
                }
            }
        }
    }
}

fn depthwise_backward<T: Real>(
    x: &[T],
    wt: &[T],
    gout: &[T],
    g: &Geometry,
    mut gx: Option<&mut [T]>,
    mut gw: Option<&mut [T]>,
) {
    if g.s == 1 {
        return depthwise_s1_backward(x, wt, gout, g, gx, gw);
    }
    let (hw, howo, kk) = (g.h * g.w, g.ho * g.wo, g.kh * g.kw);
    for bc in 0..g.b * g.cin {
        let c = bc % g.cin;
        let plane = &x[bc * hw..(bc + 1) * hw];
        let gplane = &gout[bc * howo..(bc + 1) * howo];
        for ki in 0..g.kh {
            let offy = (ki * g.d) as isize - g.p as isize;
            let (ylo, yhi) = valid_range(g.h, g.ho, g.s, offy);
            for kj in 0..g.kw {
                let tap = c * kk + ki * g.kw + kj;
                let wv = wt[tap];
                let offx = (kj * g.d) as isize - g.p as isize;
                let (xlo, xhi) = valid_range(g.w, g.wo, g.s, offx);
                if xhi == xlo {
                    continue;
                }
                let mut acc = T::zero();
                for oy in ylo..yhi {
                    let iy = (oy as isize * g.s as isize + offy) as usize;
                    let grow = &gplane[oy * g.wo..(oy + 1) * g.wo];
                    if g.s == 1 {
                        let ix0 = (xlo as isize + offx) as usize;
                        let n = xhi - xlo;
                        if gw.is_some() {
                            let src = &plane[iy * g.w + ix0..iy * g.w + ix0 + n];
                            acc = acc + grow[xlo..xhi].iter().zip(src).fold(T::zero(), |a, (&gv, &xv)| a + gv * xv);
                        }
                        if let Some(gx) = gx.as_deref_mut() {
                            let base = bc * hw + iy * g.w + ix0;
                            for (d, &gv) in gx[base..base + n].iter_mut().zip(&grow[xlo..xhi]) {
                                *d = *d + wv * gv;
                            }
                        }
                    } else {
                        for ox in xlo..xhi {
                            let ix = (ox as isize * g.s as isize + offx) as usize;
                            acc = acc + grow[ox] * plane[iy * g.w + ix];
                            if let Some(gx) = gx.as_deref_mut() {
                                let i = bc * hw + iy * g.w + ix;
                                gx[i] = gx[i] + wv * grow[ox];
                            }
                        }
                    }
                }
                if let Some(gw) = gw.as_deref_mut() {
                    gw[tap] = gw[tap] + acc;
                }
            }
        }
    }
}

fn conv_forward<T: Real>(x: &[T], wt: &[T], bias: Option<&[T]>, g: &Geometry) -> Vec<T> {
    let (hw, howo) = (g.h * g.w, g.ho * g.wo);
    let mut out = vec![T::zero(); g.b * g.cout * howo];
    if g.is_depthwise() {
        depthwise_forward(x, wt, g, &mut out);
    } else {
        let (cg, og, kv) = (g.cg(), g.og(), g.kvol());
        let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); kv * howo] };
        for bi in 0..g.b {
            for gi in 0..g.groups {
                let xs = &x[(bi * g.cin + gi * cg) * hw..(bi * g.cin + (gi + 1) * cg) * hw];
                let ws = &wt[gi * og * kv..(gi + 1) * og * kv];
                let os = &mut out[(bi * g.cout + gi * og) * howo..(bi * g.cout + (gi + 1) * og) * howo];
                let rhs: &[T] = if g.is_pointwise() {
                    xs
                } else {
                    im2col(xs, g, &mut cols);
                    &cols
                };
                gemm(
                    T::one(),
                    ws,
                    MatLayout::row_major(og, kv, false),
                    rhs,
                    MatLayout::row_major(kv, howo, false),
                    T::zero(),
                    os,
                    MatLayout::row_major(og, howo, false),
                );
            }
        }
    }
    if let Some(bias) = bias {
        for (i, plane) in out.chunks_mut(howo).enumerate() {
            let bv = bias[i % g.cout];
            for v in plane {
                *v = *v + bv;
            }
        }
    }
    out
}

type ConvGrads<T> = (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>);

fn conv_backward<T: Real>(
    x: &[T],
    wt: &[T],
    gout: &[T],
    g: &Geometry,
    need_x: bool,
    need_w: bool,
    need_b: bool,
) -> ConvGrads<T> {
    let (hw, howo) = (g.h * g.w, g.ho * g.wo);
    let mut gx = need_x.then(|| vec![T::zero(); x.len()]);
    let mut gw = need_w.then(|| vec![T::zero(); wt.len()]);
    let gb = need_b.then(|| {
        let mut gb = vec![T::zero(); g.cout];
        for (i, plane) in gout.chunks(howo).enumerate() {
            gb[i % g.cout] = gb[i % g.cout] + plane.iter().copied().sum::<T>();
        }
        gb
    });
    if !need_x && !need_w {
        return (gx, gw, gb);
    }
    if g.is_depthwise() {
        depthwise_backward(x, wt, gout, g, gx.as_deref_mut(), gw.as_deref_mut());
        return (gx, gw, gb);
    }
    let (cg, og, kv) = (g.cg(), g.og(), g.kvol());
    let pointwise = g.is_pointwise();
    let mut cols = vec![T::zero(); if pointwise { 0 } else { kv * howo }];
    let mut dcols = vec![T::zero(); if pointwise || !need_x { 0 } else { kv * howo }];
    for bi in 0..g.b {
        for gi in 0..g.groups {
            let xr = (bi * g.cin + gi * cg) * hw..(bi * g.cin + (gi + 1) * cg) * hw;
            let wr = gi * og * kv..(gi + 1) * og * kv;
            let go = &gout[(bi * g.cout + gi * og) * howo..(bi * g.cout + (gi + 1) * og) * howo];
            if let Some(gw) = gw.as_deref_mut() {
                let rhs: &[T] = if pointwise {
                    &x[xr.clone()]
                } else {
                    im2col(&x[xr.clone()], g, &mut cols);
                    &cols
                };
                gemm(
                    T::one(),
                    go,
                    MatLayout::row_major(og, howo, false),
                    rhs,
                    MatLayout::row_major(kv, howo, true),
                    T::one(),
                    &mut gw[wr.clone()],
                    MatLayout::row_major(og, kv, false),
                );
            }
            if let Some(gx) = gx.as_deref_mut() {
                if pointwise {
                    gemm(
                        T::one(),
                        &wt[wr.clone()],
                        MatLayout::row_major(og, kv, true),
                        go,
                        MatLayout::row_major(og, howo, false),
                        T::one(),
                        &mut gx[xr.clone()],
                        MatLayout::row_major(kv, howo, false),
                    );
                } else {
                    gemm(
                        T::one(),
                        &wt[wr.clone()],
                        MatLayout::row_major(og, kv, true),
                        go,
                        MatLayout::row_major(og, howo, false),
                        T::zero(),
                        &mut dcols,
                        MatLayout::row_major(kv, howo, false),
                    );
                    col2im(&dcols, g, &mut gx[xr.clone()]);
                }
            }
        }
    }
    (gx, gw, gb)
}

impl<'g, T: Real> Var<'g, T> {
    /// Zero-padded 2-d convolution. `weight` is (Cout, Cin/groups, kh, kw).
    pub fn conv2d(&self, weight: &Var<'g, T>, bias: Option<&Var<'g, T>>, params: Conv2dParams) -> Result<Var<'g, T>> {
        let g = Geometry::new(self.shape(), weight.shape(), params)?;
        if let Some(b) = bias {
            if b.shape() != [g.cout] {
                return Err(shape_err("conv2d", format!("bias {:?} for {} output channels", b.shape(), g.cout)));
            }
        }
        let out = conv_forward(self.value().data(), weight.value().data(), bias.map(|b| b.value().data()), &g);
        self.graph().count(conv2d_tally(g.b, g.cin, g.cout, g.kh, g.groups, g.ho, g.wo, bias.is_some()));
        let out = Tensor::new(&[g.b, g.cout, g.ho, g.wo], out)?;
        let (x, w) = (self.value_rc(), weight.value_rc());
        let mut inputs = vec![self, weight];
        if let Some(b) = bias {
            inputs.push(b);
        }
        let has_bias = bias.is_some();
        let op = if g.is_depthwise() {
            "conv2d_depthwise"
        } else if g.is_pointwise() {
            "conv2d_pointwise"
        } else {
            "conv2d"
        };
        self.graph().record(op, out, &inputs, move |gout, needs| {
            let need_b = has_bias && needs[2];
            let (gx, gw, gb) = conv_backward(x.data(), w.data(), gout.data(), &g, needs[0], needs[1], need_b);
            let mut grads = vec![
                gx.map(|d| Tensor::new(x.shape(), d)).transpose()?,
                gw.map(|d| Tensor::new(w.shape(), d)).transpose()?,
            ];
            if has_bias {
                grads.push(gb.map(|d| Tensor::new(&[g.cout], d)).transpose()?);
            }
            Ok(grads)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;

    #[test]
    fn out_size_formula() {
        assert_eq!(conv_out_size(16, 5, 1, 2, 1), Some(16));
        assert_eq!(conv_out_size(16, 7, 1, 9, 3), Some(16));
        assert_eq!(conv_out_size(64, 3, 2, 1, 1), Some(32));
        assert_eq!(conv_out_size(2, 5, 1, 0, 1), None);
    }

    #[test]
    fn valid_range_handles_offsets() {
        assert_eq!(valid_range(5, 5, 1, -2), (2, 5));
        assert_eq!(valid_range(5, 5, 1, 2), (0, 3));
        assert_eq!(valid_range(8, 4, 2, -1), (1, 4));
        assert_eq!(valid_range(3, 3, 1, 10), (0, 0));
    }

    #[test]
    fn identity_pointwise_conv() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn(&[2, 3, 4, 4], |i| (i as f64).sin()));
        let w = g.constant(Tensor::from_fn(&[3, 3, 1, 1], |i| if i % 4 == 0 { 1.0 } else { 0.0 }));
        let b = g.constant(Tensor::zeros(&[3]));
        let y = x.conv2d(&w, Some(&b), Conv2dParams::default()).unwrap();
        assert_eq!(y.value(), x.value());
    }

    #[test]
    fn depthwise_ones_kernel_on_constant_field() {
        let g = Graph::<f32>::new();
        let v = 0.7f32;
        let x = g.constant(Tensor::full(&[1, 4, 6, 6], v));
        let w = g.constant(Tensor::ones(&[4, 1, 3, 3]));
        let y = x.conv2d(&w, None, Conv2dParams::new(1, 1, 1, 4)).unwrap();
        for c in 0..4 {
            for i in 1..5 {
                for j in 1..5 {
                    assert!((y.value().at(&[0, c, i, j]) - 9.0 * v).abs() < 1e-5);
                }
            }
        }
        // corners see 4 taps under zero padding
        assert!((y.value().at(&[0, 0, 0, 0]) - 4.0 * v).abs() < 1e-5);
    }

    #[test]
    fn rejects_bad_groups_and_stride() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 6, 8, 8]));
        let w = g.constant(Tensor::zeros(&[4, 2, 3, 3]));
        assert!(x.conv2d(&w, None, Conv2dParams::new(1, 1, 1, 4)).is_err());
        assert!(x.conv2d(&w, None, Conv2dParams::new(0, 1, 1, 3)).is_err());
        let w2 = g.constant(Tensor::zeros(&[4, 3, 3, 3]));
        assert!(x.conv2d(&w2, None, Conv2dParams::new(1, 1, 1, 3)).is_err());
    }
}
