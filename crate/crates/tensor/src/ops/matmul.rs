use crate::error::{shape_err, Result};
use crate::flops::FlopTally;
use crate::graph::Var;
use crate::real::{gemm, MatLayout, Real};
use crate::tensor::Tensor;

struct MatmulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    shared_rhs: bool,
    out_shape: Vec<usize>,
}

fn matmul_dims(a: &[usize], b: &[usize], ta: bool, tb: bool) -> Result<MatmulDims> {
    if a.len() < 2 || b.len() < 2 {
        return Err(shape_err("matmul", format!("need >=2-d operands, got {a:?} x {b:?}")));
    }
    let (ar, ac) = (a[a.len() - 2], a[a.len() - 1]);
    let (br, bc) = (b[b.len() - 2], b[b.len() - 1]);
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if tb { (bc, br) } else { (br, bc) };
    if k != k2 {
        return Err(shape_err("matmul", format!("inner dims {a:?} x {b:?}")));
    }
    let abatch = &a[..a.len() - 2];
    let bbatch = &b[..b.len() - 2];
    let shared_rhs = bbatch.is_empty();
    if !shared_rhs && abatch != bbatch {
        return Err(shape_err("matmul", format!("batch dims {a:?} x {b:?}")));
    }
    let mut out_shape = abatch.to_vec();
    out_shape.extend_from_slice(&[m, n]);
    Ok(MatmulDims { batch: abatch.iter().product(), m, k, n, shared_rhs, out_shape })
}

impl<'g, T: Real> Var<'g, T> {
    /// Batched matrix product over the last two axes, with optional transposes.
    /// `other` may be 2-d, in which case it is shared across the batch.
    pub fn matmul_t(&self, other: &Var<'g, T>, ta: bool, tb: bool) -> Result<Var<'g, T>> {
        let d = matmul_dims(self.shape(), other.shape(), ta, tb)?;
        let (a, b) = (self.value_rc(), other.value_rc());
        let (as_, bs) = (self.shape().to_vec(), other.shape().to_vec());
        let (ar, ac) = (as_[as_.len() - 2], as_[as_.len() - 1]);
        let (br, bc) = (bs[bs.len() - 2], bs[bs.len() - 1]);
        let (m, k, n) = (d.m, d.k, d.n);
        let mut out = vec![T::zero(); d.batch * m * n];
        for i in 0..d.batch {
            let bo = if d.shared_rhs { 0 } else { i * br * bc };
            gemm(
                T::one(),
                &a.data()[i * ar * ac..(i + 1) * ar * ac],
                MatLayout::row_major(ar, ac, ta),
                &b.data()[bo..bo + br * bc],
                MatLayout::row_major(br, bc, tb),
                T::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
                MatLayout::row_major(m, n, false),
            );
        }
        self.graph().count(FlopTally::from_macs((d.batch * m * k * n) as u64, 0));
        let out = Tensor::new(&d.out_shape, out)?;
        let (batch, shared) = (d.batch, d.shared_rhs);
        self.graph().record("matmul", out, &[self, other], move |g, needs| {
            let gd = g.data();
            // C = op(A) op(B); dop(A) = dC op(B)^T, dop(B) = op(A)^T dC
            let ga = if needs[0] {
                let mut ga = vec![T::zero(); a.numel()];
                for i in 0..batch {
                    let bo = if shared { 0 } else { i * br * bc };
                    let gi = &gd[i * m * n..(i + 1) * m * n];
                    let bi = &b.data()[bo..bo + br * bc];
                    let dst = &mut ga[i * ar * ac..(i + 1) * ar * ac];
                    if ta {
                        // dA (k x m) = op(B) dC^T
                        gemm(
                            T::one(),
                            bi,
                            MatLayout::row_major(br, bc, tb),
                            gi,
                            MatLayout::row_major(m, n, true),
                            T::zero(),
                            dst,
                            MatLayout::row_major(ar, ac, false),
                        );
                    } else {
                        gemm(
                            T::one(),
                            gi,
                            MatLayout::row_major(m, n, false),
                            bi,
                            MatLayout::row_major(br, bc, !tb),
                            T::zero(),
                            dst,
                            MatLayout::row_major(ar, ac, false),
                        );
                    }
                }
                Some(Tensor::new(a.shape(), ga)?)
            } else {
                None
            };
            let gb = if needs[1] {
                let mut gb = vec![T::zero(); b.numel()];
                for i in 0..batch {
                    let bo = if shared { 0 } else { i * br * bc };
                    let gi = &gd[i * m * n..(i + 1) * m * n];
                    let ai = &a.data()[i * ar * ac..(i + 1) * ar * ac];
                    let beta = if shared && i > 0 { T::one() } else { T::zero() };
                    let dst = &mut gb[bo..bo + br * bc];
                    if tb {
                        // dB (n x k) = dC^T op(A)
                        gemm(
                            T::one(),
                            gi,
                            MatLayout::row_major(m, n, true),
                            ai,
                            MatLayout::row_major(ar, ac, ta),
                            beta,
                            dst,
                            MatLayout::row_major(br, bc, false),
                        );
                    } else {
                        gemm(
                            T::one(),
                            ai,
                            MatLayout::row_major(ar, ac, !ta),
                            gi,
                            MatLayout::row_major(m, n, false),
                            beta,
                            dst,
                            MatLayout::row_major(br, bc, false),
                        );
                    }
                }
                Some(Tensor::new(b.shape(), gb)?)
            } else {
                None
            };
            Ok(vec![ga, gb])
        })
    }

    pub fn matmul(&self, other: &Var<'g, T>) -> Result<Var<'g, T>> {
        self.matmul_t(other, false, false)
    }
}
