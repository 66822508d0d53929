use crate::error::{shape_err, Result};
use crate::graph::Var;
use crate::real::Real;
use crate::tensor::Tensor;

/// Max-subtracted softmax along `axis` of a plain tensor.
pub fn softmax_tensor<T: Real>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if axis >= s.len() {
        return Err(shape_err("softmax", format!("axis {axis} for {s:?}")));
    }
    let outer: usize = s[..axis].iter().product();
    let len = s[axis];
    let inner: usize = s[axis + 1..].iter().product();
    let xd = x.data();
    let mut out = vec![T::zero(); xd.len()];
    let mut mx = vec![T::neg_infinity(); inner];
    let mut sum = vec![T::zero(); inner];
    for o in 0..outer {
        let blk = o * len * inner;
        mx.fill(T::neg_infinity());
        sum.fill(T::zero());
        for l in 0..len {
            for (m, &v) in mx.iter_mut().zip(&xd[blk + l * inner..blk + (l + 1) * inner]) {
                *m = m.max(v);
            }
        }
        for l in 0..len {
            let r = blk + l * inner;
            for i in 0..inner {
                let e = (xd[r + i] - mx[i]).exp();
                out[r + i] = e;
                sum[i] = sum[i] + e;
            }
        }
        for l in 0..len {
            let r = blk + l * inner;
            for i in 0..inner {
                out[r + i] = out[r + i] / sum[i];
            }
        }
    }
    Tensor::new(s, out)
}

impl<'g, T: Real> Var<'g, T> {
    pub fn softmax(&self, axis: usize) -> Result<Var<'g, T>> {
        let out = softmax_tensor(self.value(), axis)?;
        let s = self.shape().to_vec();
        let outer: usize = s[..axis].iter().product();
        let len = s[axis];
        let inner: usize = s[axis + 1..].iter().product();
        let y = std::rc::Rc::new(out.clone());
        self.graph().record("softmax", out, &[self], move |g, _| {
            // dx = y * (dy - sum(dy * y))
            let (gd, yd) = (g.data(), y.data());
            let mut gx = vec![T::zero(); gd.len()];
            let mut dot = vec![T::zero(); inner];
            for o in 0..outer {
                let blk = o * len * inner;
                dot.fill(T::zero());
                for l in 0..len {
                    let r = blk + l * inner;
                    for i in 0..inner {
                        dot[i] = dot[i] + gd[r + i] * yd[r + i];
                    }
                }
                for l in 0..len {
                    let r = blk + l * inner;
                    for i in 0..inner {
                        gx[r + i] = yd[r + i] * (gd[r + i] - dot[i]);
                    }
                }
            }
            Ok(vec![Some(Tensor::new(&s, gx)?)])
        })
    }
}
