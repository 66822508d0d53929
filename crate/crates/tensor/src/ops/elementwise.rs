//! Broadcasting binary ops and pointwise activations.

use crate::error::{shape_err, Result};
use crate::graph::Var;
use crate::real::Real;
use crate::tensor::{numel, strides, Tensor};

/// Iteration plan for a broadcast between two shapes, with adjacent
/// compatible dimensions merged.
#[derive(Debug, Clone)]
pub(crate) struct Broadcast {
    pub out_shape: Vec<usize>,
    // (length, stride in a, stride in b) per merged dim
    dims: Vec<(usize, usize, usize)>,
}

impl Broadcast {
    pub fn new(a: &[usize], b: &[usize], op: &'static str) -> Result<Self> {
        let nd = a.len().max(b.len());
        let pad = |s: &[usize]| -> Vec<usize> {
            let mut v = vec![1; nd - s.len()];
            v.extend_from_slice(s);
            v
        };
        let (pa, pb) = (pad(a), pad(b));
        let (sa, sb) = (strides(&pa), strides(&pb));
        let mut out_shape = Vec::with_capacity(nd);
        let mut dims: Vec<(usize, usize, usize)> = Vec::with_capacity(nd);
        for i in 0..nd {
            let (la, lb) = (pa[i], pb[i]);
            let len = if la == lb {
                la
            } else if la == 1 {
                lb
            } else if lb == 1 {
                la
            } else {
                return Err(shape_err(op, format!("cannot broadcast {a:?} with {b:?}")));
            };
            out_shape.push(len);
            let stride_a = if la == 1 { 0 } else { sa[i] };
            let stride_b = if lb == 1 { 0 } else { sb[i] };
            if len == 1 {
                continue;
            }
            if let Some(last) = dims.last_mut() {
                if last.1 == stride_a * len && last.2 == stride_b * len {
                    last.0 *= len;
                    last.1 = stride_a;
                    last.2 = stride_b;
                    continue;
                }
            }
            dims.push((len, stride_a, stride_b));
        }
        if dims.is_empty() {
            dims.push((1, 0, 0));
        }
        Ok(Broadcast { out_shape, dims })
    }

    /// Calls `f(out_index, a_offset, b_offset)` for every output element in
    /// row-major order.
    #[inline]
    pub fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let nd = self.dims.len();
        let (inner_len, inner_a, inner_b) = self.dims[nd - 1];
        let outer = &self.dims[..nd - 1];
        let outer_count: usize = outer.iter().map(|d| d.0).product();
        let mut idx = vec![0usize; outer.len()];
        let (mut off_a, mut off_b) = (0usize, 0usize);
        let mut o = 0usize;
        for _ in 0..outer_count {
            let (mut ia, mut ib) = (off_a, off_b);
            for _ in 0..inner_len {
                f(o, ia, ib);
                o += 1;
                ia += inner_a;
                ib += inner_b;
            }
            // odometer
            for d in (0..outer.len()).rev() {
                idx[d] += 1;
                off_a += outer[d].1;
                off_b += outer[d].2;
                if idx[d] < outer[d].0 {
                    break;
                }
                off_a -= outer[d].1 * outer[d].0;
                off_b -= outer[d].2 * outer[d].0;
                idx[d] = 0;
            }
        }
    }
}

pub(crate) fn broadcast_map<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    op: &'static str,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(a.shape(), data);
    }
    let plan = Broadcast::new(a.shape(), b.shape(), op)?;
    let mut out = vec![T::zero(); numel(&plan.out_shape)];
    let (ad, bd) = (a.data(), b.data());
    plan.for_each(|o, ia, ib| out[o] = f(ad[ia], bd[ib]));
    Tensor::new(&plan.out_shape, out)
}

/// Sum `grad` (broadcast output shape) down to `target` shape.
pub(crate) fn reduce_to<T: Real>(grad: &Tensor<T>, target: &[usize]) -> Result<Tensor<T>> {
    if grad.shape() == target {
        return Ok(grad.clone());
    }
    let plan = Broadcast::new(target, grad.shape(), "reduce_to")?;
    let mut acc = vec![T::zero(); numel(target)];
    let g = grad.data();
    plan.for_each(|o, ia, _| acc[ia] = acc[ia] + g[o]);
    Tensor::new(target, acc)
}

/// Gradient of a broadcast binary op: `ga[ia] += g * da(a, b)` reduced onto
/// a's shape, same for b.
fn binary_grads<T: Real>(
    g: &Tensor<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
    needs: &[bool],
    da: impl Fn(T, T, T) -> T,
    db: impl Fn(T, T, T) -> T,
) -> Result<Vec<Option<Tensor<T>>>> {
    let plan = Broadcast::new(a.shape(), b.shape(), "binary backward")?;
    let (ad, bd, gd) = (a.data(), b.data(), g.data());
    let ga = if needs[0] {
        let mut acc = vec![T::zero(); a.numel()];
        plan.for_each(|o, ia, ib| acc[ia] = acc[ia] + da(gd[o], ad[ia], bd[ib]));
        Some(Tensor::new(a.shape(), acc)?)
    } else {
        None
    };
    let gb = if needs[1] {
        let mut acc = vec![T::zero(); b.numel()];
        plan.for_each(|o, ia, ib| acc[ib] = acc[ib] + db(gd[o], ad[ia], bd[ib]));
        Some(Tensor::new(b.shape(), acc)?)
    } else {
        None
    };
    Ok(vec![ga, gb])
}

impl<'g, T: Real> Var<'g, T> {
    pub fn add(&self, other: &Var<'g, T>) -> Result<Var<'g, T>> {
        let out = broadcast_map(self.value(), other.value(), "add", |a, b| a + b)?;
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        self.graph().record("add", out, &[self, other], move |g, needs| {
            Ok(vec![
                if needs[0] { Some(reduce_to(g, &sa)?) } else { None },
                if needs[1] { Some(reduce_to(g, &sb)?) } else { None },
            ])
        })
    }

    pub fn sub(&self, other: &Var<'g, T>) -> Result<Var<'g, T>> {
        let out = broadcast_map(self.value(), other.value(), "sub", |a, b| a - b)?;
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        self.graph().record("sub", out, &[self, other], move |g, needs| {
            Ok(vec![
                if needs[0] { Some(reduce_to(g, &sa)?) } else { None },
                if needs[1] { Some(reduce_to(&g.map(|v| -v), &sb)?) } else { None },
            ])
        })
    }

    pub fn mul(&self, other: &Var<'g, T>) -> Result<Var<'g, T>> {
        let out = broadcast_map(self.value(), other.value(), "mul", |a, b| a * b)?;
        let (a, b) = (self.value_rc(), other.value_rc());
        self.graph().record("mul", out, &[self, other], move |g, needs| {
            binary_grads(g, &a, &b, needs, |g, _, b| g * b, |g, a, _| g * a)
        })
    }

    pub fn div(&self, other: &Var<'g, T>) -> Result<Var<'g, T>> {
        let out = broadcast_map(self.value(), other.value(), "div", |a, b| a / b)?;
        let (a, b) = (self.value_rc(), other.value_rc());
        self.graph().record("div", out, &[self, other], move |g, needs| {
            binary_grads(g, &a, &b, needs, |g, _, b| g / b, |g, a, b| -g * a / (b * b))
        })
    }

    fn unary(&self, op: &'static str, f: impl Fn(T) -> T, df: impl Fn(T) -> T + 'static) -> Result<Var<'g, T>> {
        let out = self.value().map(f);
        let x = self.value_rc();
        self.graph().record(op, out, &[self], move |g, _| {
            let data = g.data().iter().zip(x.data()).map(|(&g, &x)| g * df(x)).collect();
            Ok(vec![Some(Tensor::new(g.shape(), data)?)])
        })
    }

    pub fn neg(&self) -> Result<Var<'g, T>> {
        self.affine(-T::one(), T::zero())
    }

    /// `a * x + b` with scalar `a`, `b`.
    pub fn affine(&self, a: T, b: T) -> Result<Var<'g, T>> {
        let out = self.value().map(|v| a * v + b);
        self.graph().record("affine", out, &[self], move |g, _| Ok(vec![Some(g.map(|v| a * v))]))
    }

    pub fn scale(&self, a: T) -> Result<Var<'g, T>> {
        self.affine(a, T::zero())
    }

    pub fn add_scalar(&self, b: T) -> Result<Var<'g, T>> {
        self.affine(T::one(), b)
    }

    pub fn relu(&self) -> Result<Var<'g, T>> {
        self.unary(
            "relu",
            |x| if x > T::zero() { x } else { T::zero() },
            |x| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn sigmoid(&self) -> Result<Var<'g, T>> {
        self.unary("sigmoid", sigmoid, |x| {
            let y = sigmoid(x);
            y * (T::one() - y)
        })
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&self) -> Result<Var<'g, T>> {
        self.unary("gelu", gelu, gelu_grad)
    }

    pub fn ln(&self) -> Result<Var<'g, T>> {
        self.unary("ln", |x| x.ln(), |x| T::one() / x)
    }

    pub fn exp(&self) -> Result<Var<'g, T>> {
        self.unary("exp", |x| x.exp(), |x| x.exp())
    }

    /// Clamp into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&self, lo: T, hi: T) -> Result<Var<'g, T>> {
        self.unary(
            "clamp",
            move |x| x.max(lo).min(hi),
            move |x| {
                if x >= lo && x <= hi {
                    T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    pub fn square(&self) -> Result<Var<'g, T>> {
        self.unary("square", |x| x * x, |x| x + x)
    }
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn gelu<T: Real>(x: T) -> T {
    let half = T::from_f64c(0.5);
    half * x * (T::one() + (x * T::from_f64c(std::f64::consts::FRAC_1_SQRT_2)).erf_fast())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let half = T::from_f64c(0.5);
    let cdf = half * (T::one() + (x * T::from_f64c(std::f64::consts::FRAC_1_SQRT_2)).erf_fast());
    let pdf = (-(x * x) * half).exp_fast() * T::from_f64c(0.398_942_280_401_432_7);
    cdf + x * pdf
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;

    #[test]
    fn broadcast_channel_pattern() {
        let a = Tensor::<f64>::from_fn(&[2, 3, 2, 2], |i| i as f64);
        let b = Tensor::<f64>::new(&[1, 3, 1, 1], vec![10.0, 20.0, 30.0]).unwrap();
        let c = broadcast_map(&a, &b, "t", |x, y| x + y).unwrap();
        assert_eq!(c.shape(), &[2, 3, 2, 2]);
        assert_eq!(c.at(&[1, 2, 1, 0]), a.at(&[1, 2, 1, 0]) + 30.0);
        let r = reduce_to(&c, &[1, 3, 1, 1]).unwrap();
        let expect1: f64 = (0..2).flat_map(|n| (0..4).map(move |p| (n * 12 + 4 + p) as f64 + 20.0)).sum();
        assert_eq!(r.data()[1], expect1);
    }

    #[test]
    fn broadcast_rejects_incompatible() {
        assert!(Broadcast::new(&[2, 3], &[4, 3], "t").is_err());
        assert!(Broadcast::new(&[2, 3], &[3], "t").is_ok());
    }

    #[test]
    fn activation_closed_forms() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(&[3], vec![0.0, -1.0, 2.0]).unwrap());
        assert_eq!(x.sigmoid().unwrap().value().data()[0], 0.5);
        let r = x.relu().unwrap();
        assert_eq!(r.value().data(), &[0.0, 0.0, 2.0]);
        let ge = x.gelu().unwrap();
        assert!((ge.value().data()[2] - 1.954_499_736_103_642).abs() < 1e-12);
    }

    #[test]
    fn sigmoid_is_bounded_for_large_inputs() {
        for &v in &[-10.0f32, -1.0, 0.0, 10.0] {
            let s = sigmoid(v);
            assert!(s > 0.0 && s < 1.0);
        }
        assert!(sigmoid(-1000.0f64).is_finite());
    }
}
