use super::array::Array;
use super::tape::Var;

/// `c (m×n) (+)= op(a) (m×k) · op(b) (k×n)` on row-major buffers.
///
/// `a_t`/`b_t` select the transposed view of a buffer stored as (k×m)/(n×k).
#[allow(clippy::too_many_arguments)]
pub fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64], accumulate: bool) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices hold exactly m*k, k*n and m*n elements and the strides
    // describe in-bounds row-major (or transposed) layouts of those buffers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl<'t> Var<'t> {
    /// `[.., m, k] × [k, n] -> [.., m, n]`; leading axes of `self` are batched.
    pub fn matmul(self, w: Var<'t>) -> Var<'t> {
        let a = self.value();
        let b = w.value();
        assert_eq!(b.ndim(), 2, "matmul rhs must be 2-D");
        let k = *a.shape().last().expect("matmul lhs must be at least 1-D");
        assert_eq!(k, b.dim(0), "matmul inner dims {:?} x {:?}", a.shape(), b.shape());
        let n = b.dim(1);
        let m = a.len() / k.max(1);
        let mut out_shape = a.shape().to_vec();
        *out_shape.last_mut().unwrap() = n;
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, a.data(), false, b.data(), false, &mut c, false);
        let (need_a, need_b) = (self.requires_grad(), w.requires_grad());
        self.tape.push(Array::from_vec(&out_shape, c), &[self, w], move |ctx| {
            let g = ctx.grad.data();
            let (a, b) = (&ctx.inputs[0], &ctx.inputs[1]);
            let ga = need_a.then(|| {
                let mut ga = vec![0.0; m * k];
                gemm(m, n, k, g, false, b.data(), true, &mut ga, false);
                Array::from_vec(a.shape(), ga)
            });
            let gb = need_b.then(|| {
                let mut gb = vec![0.0; k * n];
                gemm(k, m, n, a.data(), true, g, false, &mut gb, false);
                Array::from_vec(b.shape(), gb)
            });
            vec![ga, gb]
        })
    }

    /// Batched product `[B, m, k] × [B, k, n] -> [B, m, n]`.
    pub fn bmm(self, other: Var<'t>) -> Var<'t> {
        let a = self.value();
        let b = other.value();
        assert_eq!(a.ndim(), 3);
        assert_eq!(b.ndim(), 3);
        let (bs, m, k) = (a.dim(0), a.dim(1), a.dim(2));
        assert_eq!(b.dim(0), bs);
        assert_eq!(b.dim(1), k);
        let n = b.dim(2);
        let mut c = vec![0.0; bs * m * n];
        for i in 0..bs {
            gemm(
                m,
                k,
                n,
                &a.data()[i * m * k..(i + 1) * m * k],
                false,
                &b.data()[i * k * n..(i + 1) * k * n],
                false,
                &mut c[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let (need_a, need_b) = (self.requires_grad(), other.requires_grad());
        self.tape
            .push(Array::from_vec(&[bs, m, n], c), &[self, other], move |ctx| {
                let g = ctx.grad.data();
                let (a, b) = (ctx.inputs[0].data(), ctx.inputs[1].data());
                let ga = need_a.then(|| {
                    let mut ga = vec![0.0; bs * m * k];
                    for i in 0..bs {
                        gemm(
                            m,
                            n,
                            k,
                            &g[i * m * n..(i + 1) * m * n],
                            false,
                            &b[i * k * n..(i + 1) * k * n],
                            true,
                            &mut ga[i * m * k..(i + 1) * m * k],
                            false,
                        );
                    }
                    Array::from_vec(&[bs, m, k], ga)
                });
                let gb = need_b.then(|| {
                    let mut gb = vec![0.0; bs * k * n];
                    for i in 0..bs {
                        gemm(
                            k,
                            m,
                            n,
                            &a[i * m * k..(i + 1) * m * k],
                            true,
                            &g[i * m * n..(i + 1) * m * n],
                            false,
                            &mut gb[i * k * n..(i + 1) * k * n],
                            false,
                        );
                    }
                    Array::from_vec(&[bs, k, n], gb)
                });
                vec![ga, gb]
            })
    }
}
