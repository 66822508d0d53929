use crate::error::{shape_err, Result};
use crate::graph::Var;
use crate::real::Real;
use crate::tensor::Tensor;

impl<'g, T: Real> Var<'g, T> {
    /// Sum of all elements as a scalar.
    pub fn sum_all(&self) -> Result<Var<'g, T>> {
        let out = Tensor::scalar(self.value().sum());
        let shape = self.shape().to_vec();
        self.graph().record("sum_all", out, &[self], move |g, _| Ok(vec![Some(Tensor::full(&shape, g.item()))]))
    }

    pub fn mean_all(&self) -> Result<Var<'g, T>> {
        let n = T::from_usize_c(self.value().numel().max(1));
        self.sum_all()?.scale(T::one() / n)
    }

    /// Global average pooling: (B, C, H, W) -> (B, C, 1, 1).
    pub fn global_avg_pool(&self) -> Result<Var<'g, T>> {
        let s = self.shape().to_vec();
        if s.len() != 4 {
            return Err(shape_err("global_avg_pool", format!("expected 4-d input, got {s:?}")));
        }
        let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
        let inv = T::one() / T::from_usize_c(hw.max(1));
        let x = self.value().data();
        let out: Vec<T> = (0..b * c).map(|p| x[p * hw..(p + 1) * hw].iter().copied().sum::<T>() * inv).collect();
        let out = Tensor::new(&[b, c, 1, 1], out)?;
        self.graph().record("global_avg_pool", out, &[self], move |g, _| {
            let mut gx = Vec::with_capacity(b * c * hw);
            for &v in g.data() {
                gx.extend(std::iter::repeat_n(v * inv, hw));
            }
            Ok(vec![Some(Tensor::new(&s, gx)?)])
        })
    }

    /// Sum over one axis, keeping it with length 1.
    pub fn sum_axis(&self, axis: usize) -> Result<Var<'g, T>> {
        let s = self.shape().to_vec();
        if axis >= s.len() {
            return Err(shape_err("sum_axis", format!("axis {axis} for shape {s:?}")));
        }
        let outer: usize = s[..axis].iter().product();
        let len = s[axis];
        let inner: usize = s[axis + 1..].iter().product();
        let x = self.value().data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &x[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d = *d + v;
                }
            }
        }
        let mut os = s.clone();
        os[axis] = 1;
        let out = Tensor::new(&os, out)?;
        self.graph().record("sum_axis", out, &[self], move |g, _| {
            let gd = g.data();
            let mut gx = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                for _ in 0..len {
                    gx.extend_from_slice(&gd[o * inner..(o + 1) * inner]);
                }
            }
            Ok(vec![Some(Tensor::new(&s, gx)?)])
        })
    }
}
