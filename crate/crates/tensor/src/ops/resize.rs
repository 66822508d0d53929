//! Bilinear resampling with half-pixel centers (no corner alignment) and
//! border clamping.

use crate::error::{arg_err, shape_err, Result};
use crate::graph::Var;
use crate::real::Real;
use crate::tensor::Tensor;

/// Source taps for each output coordinate along one axis.
#[derive(Clone, Debug)]
struct AxisTaps {
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<f64>,
}

fn axis_taps(input: usize, output: usize) -> AxisTaps {
    let ratio = input as f64 / output as f64;
    let mut taps =
        AxisTaps { lo: Vec::with_capacity(output), hi: Vec::with_capacity(output), frac: Vec::with_capacity(output) };
    for o in 0..output {
        let src = ((o as f64 + 0.5) * ratio - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(input - 1);
        let i1 = (i0 + 1).min(input - 1);
        taps.lo.push(i0);
        taps.hi.push(i1);
        taps.frac.push(src - i0 as f64);
    }
    taps
}

/// Output size for a scale factor: `round(n * factor)`.
pub fn scaled_size(n: usize, factor: f64) -> Result<usize> {
    if !(factor > 0.0) || !factor.is_finite() {
        return Err(arg_err("bilinear_resize", format!("factor must be positive, got {factor}")));
    }
    let out = (n as f64 * factor).round() as usize;
    if out == 0 {
        return Err(arg_err("bilinear_resize", format!("factor {factor} maps {n} to zero")));
    }
    Ok(out)
}

/// Resize the last two axes of `x` to `(out_h, out_w)`.
pub fn bilinear_resize_tensor<T: Real>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() < 2 {
        return Err(shape_err("bilinear_resize", format!("input {s:?}")));
    }
    if out_h == 0 || out_w == 0 {
        return Err(arg_err("bilinear_resize", "zero output size"));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let mut os = s.to_vec();
    let nd = os.len();
    os[nd - 2] = out_h;
    os[nd - 1] = out_w;
    if h == out_h && w == out_w {
        return Ok(x.clone());
    }
    let planes = x.numel() / (h * w).max(1);
    let (ty, tx) = (axis_taps(h, out_h), axis_taps(w, out_w));
    let fy: Vec<T> = ty.frac.iter().map(|&f| T::from_f64c(f)).collect();
    let fx: Vec<T> = tx.frac.iter().map(|&f| T::from_f64c(f)).collect();
    let xd = x.data();
    let mut out = Vec::with_capacity(planes * out_h * out_w);
    for p in 0..planes {
        let plane = &xd[p * h * w..(p + 1) * h * w];
        for oy in 0..out_h {
            let (r0, r1, ly) = (ty.lo[oy] * w, ty.hi[oy] * w, fy[oy]);
            for ox in 0..out_w {
                let (c0, c1, lx) = (tx.lo[ox], tx.hi[ox], fx[ox]);
                let top = plane[r0 + c0] + (plane[r0 + c1] - plane[r0 + c0]) * lx;
                let bot = plane[r1 + c0] + (plane[r1 + c1] - plane[r1 + c0]) * lx;
                out.push(top + (bot - top) * ly);
            }
        }
    }
    Tensor::new(&os, out)
}

fn bilinear_backward<T: Real>(g: &Tensor<T>, in_shape: &[usize]) -> Result<Tensor<T>> {
    let gs = g.shape();
    let (h, w) = (in_shape[in_shape.len() - 2], in_shape[in_shape.len() - 1]);
    let (oh, ow) = (gs[gs.len() - 2], gs[gs.len() - 1]);
    if h == oh && w == ow {
        return Ok(g.clone());
    }
    let planes = g.numel() / (oh * ow).max(1);
    let (ty, tx) = (axis_taps(h, oh), axis_taps(w, ow));
    let fy: Vec<T> = ty.frac.iter().map(|&f| T::from_f64c(f)).collect();
    let fx: Vec<T> = tx.frac.iter().map(|&f| T::from_f64c(f)).collect();
    let gd = g.data();
    let mut gx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let dst = &mut gx[p * h * w..(p + 1) * h * w];
        let src = &gd[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            let (r0, r1, ly) = (ty.lo[oy] * w, ty.hi[oy] * w, fy[oy]);
            for ox in 0..ow {
                let (c0, c1, lx) = (tx.lo[ox], tx.hi[ox], fx[ox]);
                let v = src[oy * ow + ox];
                let top = v * (T::one() - ly);
                let bot = v * ly;
                dst[r0 + c0] = dst[r0 + c0] + top * (T::one() - lx);
                dst[r0 + c1] = dst[r0 + c1] + top * lx;
                dst[r1 + c0] = dst[r1 + c0] + bot * (T::one() - lx);
                dst[r1 + c1] = dst[r1 + c1] + bot * lx;
            }
        }
    }
    Tensor::new(in_shape, gx)
}

impl<'g, T: Real> Var<'g, T> {
    pub fn bilinear_resize(&self, out_h: usize, out_w: usize) -> Result<Var<'g, T>> {
        let out = bilinear_resize_tensor(self.value(), out_h, out_w)?;
        let s = self.shape().to_vec();
        self.graph().record("bilinear_resize", out, &[self], move |g, _| Ok(vec![Some(bilinear_backward(g, &s)?)]))
    }

    /// Resize by a positive scale factor; output dims are `round(dim * factor)`.
    pub fn bilinear_scale(&self, factor: f64) -> Result<Var<'g, T>> {
        let s = self.shape();
        if s.len() < 2 {
            return Err(shape_err("bilinear_resize", format!("input {s:?}")));
        }
        let oh = scaled_size(s[s.len() - 2], factor)?;
        let ow = scaled_size(s[s.len() - 1], factor)?;
        self.bilinear_resize(oh, ow)
    }
}
