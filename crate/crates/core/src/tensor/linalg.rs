//! Matrix products.
//!
//! Two entry points: [`Tensor::matmul`] (`A · B`) and
//! [`Tensor::matmul_transb`] (`A · Bᵀ`, used for attention scores and the
//! tied-embedding output projection, where materializing the transpose
//! would be wasted copies). Both accept either a 2-D right operand applied
//! to every row of the left operand, or equal leading batch dimensions on
//! both sides. The inner kernel delegates to `matrixmultiply`.

use super::{Scalar, Tensor, TensorError, TensorResult};

/// `c = A_op · B_op` for row-major buffers.
///
/// When `ta` is set, `a` is stored as the transpose of the `m x k` operand
/// (that is, stored `[k, m]`); likewise `tb` means `b` is stored `[n, k]`.
fn gemm<S: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[S],
    ta: bool,
    b: &[S],
    tb: bool,
    c: &mut [S],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if ta {
        (1isize, m as isize)
    } else {
        (k as isize, 1isize)
    };
    let (rsb, csb) = if tb {
        (1isize, k as isize)
    } else {
        (n as isize, 1isize)
    };
    unsafe {
        S::gemm(
            m,
            k,
            n,
            S::ONE,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            S::ZERO,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// How the operand shapes decompose into batched GEMM calls.
struct MatmulPlan {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    /// Right operand shared across the batch (2-D weights).
    shared_rhs: bool,
    out_shape: Vec<usize>,
}

fn plan(
    op: &'static str,
    a_shape: &[usize],
    b_shape: &[usize],
    trans_b: bool,
) -> TensorResult<MatmulPlan> {
    let mismatch = || TensorError::ShapeMismatch {
        op,
        left: a_shape.to_vec(),
        right: b_shape.to_vec(),
    };
    if a_shape.len() < 2 {
        return Err(mismatch());
    }
    // b's contraction dim and output dim under the optional transpose.
    let (bk, bn) = if trans_b {
        (b_shape[b_shape.len() - 1], b_shape[b_shape.len() - 2])
    } else {
        (b_shape[b_shape.len() - 2], b_shape[b_shape.len() - 1])
    };
    let k = a_shape[a_shape.len() - 1];
    if k != bk {
        return Err(mismatch());
    }
    if b_shape.len() == 2 {
        // Shared weights: flatten all leading dims of `a` into rows.
        let m: usize = a_shape[..a_shape.len() - 1].iter().product();
        let mut out_shape = a_shape[..a_shape.len() - 1].to_vec();
        out_shape.push(bn);
        Ok(MatmulPlan {
            batch: 1,
            m,
            k,
            n: bn,
            shared_rhs: true,
            out_shape,
        })
    } else if a_shape.len() == b_shape.len()
        && a_shape[..a_shape.len() - 2] == b_shape[..b_shape.len() - 2]
    {
        let lead = &a_shape[..a_shape.len() - 2];
        let batch: usize = lead.iter().product();
        let m = a_shape[a_shape.len() - 2];
        let mut out_shape = lead.to_vec();
        out_shape.push(m);
        out_shape.push(bn);
        Ok(MatmulPlan {
            batch,
            m,
            k,
            n: bn,
            shared_rhs: false,
            out_shape,
        })
    } else {
        Err(mismatch())
    }
}

impl<S: Scalar> Tensor<S> {
    /// Matrix product `self · other`.
    ///
    /// `other` may be 2-D (shared across all leading dimensions of `self`)
    /// or carry the same leading batch dimensions as `self`.
    pub fn matmul(&self, other: &Tensor<S>) -> TensorResult<Tensor<S>> {
        self.matmul_impl(other, false)
    }

    /// Matrix product against the transpose, `self · otherᵀ`.
    pub fn matmul_transb(&self, other: &Tensor<S>) -> TensorResult<Tensor<S>> {
        self.matmul_impl(other, true)
    }

    fn matmul_impl(&self, other: &Tensor<S>, trans_b: bool) -> TensorResult<Tensor<S>> {
        let op = if trans_b { "matmul_transb" } else { "matmul" };
        let p = plan(op, self.shape(), other.shape(), trans_b)?;
        let (m, k, n, batch) = (p.m, p.k, p.n, p.batch);
        let shared = p.shared_rhs;

        let a = self.data();
        let b = other.data();
        let mut data = vec![S::ZERO; batch * m * n];
        for i in 0..batch {
            let a_sl = &a[i * m * k..(i + 1) * m * k];
            let b_sl = if shared { &b[..] } else { &b[i * k * n..(i + 1) * k * n] };
            gemm(
                m,
                k,
                n,
                a_sl,
                false,
                b_sl,
                trans_b,
                &mut data[i * m * n..(i + 1) * m * n],
            );
        }
        drop(a);
        drop(b);

        Ok(Tensor::from_op(
            p.out_shape,
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |grads, out_grad, _out, inputs| {
                let (lhs, rhs) = (&inputs[0], &inputs[1]);
                if lhs.requires_grad() {
                    // dA = dC · Bᵀ   (or dC · B when C = A·Bᵀ)
                    let b = rhs.data();
                    let mut da = vec![S::ZERO; batch * m * k];
                    for i in 0..batch {
                        let g_sl = &out_grad[i * m * n..(i + 1) * m * n];
                        let b_sl = if shared { &b[..] } else { &b[i * k * n..(i + 1) * k * n] };
                        gemm(
                            m,
                            n,
                            k,
                            g_sl,
                            false,
                            b_sl,
                            !trans_b,
                            &mut da[i * m * k..(i + 1) * m * k],
                        );
                    }
                    grads.add(lhs, &da);
                }
                if rhs.requires_grad() {
                    let a = lhs.data();
                    let mut db = vec![S::ZERO; rhs.numel()];
                    if shared {
                        // Sum over all rows at once: dB = Aᵀ · dC (dCᵀ · A if transposed).
                        let total_m = batch * m;
                        if trans_b {
                            gemm(n, total_m, k, out_grad, true, &a, false, &mut db);
                        } else {
                            gemm(k, total_m, n, &a, true, out_grad, false, &mut db);
                        }
                    } else {
                        for i in 0..batch {
                            let a_sl = &a[i * m * k..(i + 1) * m * k];
                            let g_sl = &out_grad[i * m * n..(i + 1) * m * n];
                            let sl = &mut db[i * k * n..(i + 1) * k * n];
                            if trans_b {
                                gemm(n, m, k, g_sl, true, a_sl, false, sl);
                            } else {
                                gemm(k, m, n, a_sl, true, g_sl, false, sl);
                            }
                        }
                    }
                    grads.add(rhs, &db);
                }
            }),
        ))
    }
}
