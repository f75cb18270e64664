//! Elementwise, reduction and shape operations on [`Var`].

use std::rc::Rc;

use super::array::{strides_for, Array};
use super::tape::Var;

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    (0..n)
        .map(|i| {
            let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
            let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
            match (da, db) {
                (x, y) if x == y => x,
                (1, y) => y,
                (x, 1) => x,
                _ => panic!("cannot broadcast {a:?} with {b:?}"),
            }
        })
        .collect()
}

/// For every element of `out_shape`, the flat offset of the element of `src_shape`
/// it reads under numpy broadcasting. `None` when the shapes are identical.
pub(crate) fn broadcast_map(src_shape: &[usize], out_shape: &[usize]) -> Option<Rc<Vec<usize>>> {
    if src_shape == out_shape {
        return None;
    }
    let n = out_shape.len();
    let pad = n - src_shape.len();
    let src_strides = strides_for(src_shape);
    let mut eff = vec![0usize; n];
    for i in 0..src_shape.len() {
        if src_shape[i] != 1 {
            eff[i + pad] = src_strides[i];
        }
    }
    let total: usize = out_shape.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; n];
    let mut off = 0usize;
    for _ in 0..total {
        map.push(off);
        for ax in (0..n).rev() {
            idx[ax] += 1;
            off += eff[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= eff[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    Some(Rc::new(map))
}

/// Sums a broadcast gradient back down to `shape`.
pub(crate) fn reduce_to(grad: Array, shape: &[usize], map: &Option<Rc<Vec<usize>>>) -> Array {
    match map {
        None => grad,
        Some(map) => {
            let mut out = Array::zeros(shape);
            let o = out.data_mut();
            for (g, &m) in grad.data().iter().zip(map.iter()) {
                o[m] += g;
            }
            out
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Max,
    Min,
}

impl BinOp {
    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            BinOp::Add => a + b,
            BinOp::Sub => a - b,
            BinOp::Mul => a * b,
            BinOp::Div => a / b,
            BinOp::Max => a.max(b),
            BinOp::Min => a.min(b),
        }
    }

    /// Partial derivatives (d/da, d/db).
    fn partials(self, a: f64, b: f64) -> (f64, f64) {
        match self {
            BinOp::Add => (1.0, 1.0),
            BinOp::Sub => (1.0, -1.0),
            BinOp::Mul => (b, a),
            BinOp::Div => (1.0 / b, -a / (b * b)),
            BinOp::Max => {
                if a >= b {
                    (1.0, 0.0)
                } else {
                    (0.0, 1.0)
                }
            }
            BinOp::Min => {
                if a <= b {
                    (1.0, 0.0)
                } else {
                    (0.0, 1.0)
                }
            }
        }
    }
}

fn binary<'t>(a: Var<'t>, b: Var<'t>, op: BinOp) -> Var<'t> {
    let va = a.value();
    let vb = b.value();
    let out_shape = broadcast_shape(va.shape(), vb.shape());
    let ma = broadcast_map(va.shape(), &out_shape);
    let mb = broadcast_map(vb.shape(), &out_shape);
    let total: usize = out_shape.iter().product();
    let (da, db) = (va.data(), vb.data());
    let data: Vec<f64> = match (&ma, &mb) {
        (None, None) => da.iter().zip(db).map(|(&x, &y)| op.apply(x, y)).collect(),
        _ => (0..total)
            .map(|i| {
                let ia = ma.as_ref().map_or(i, |m| m[i]);
                let ib = mb.as_ref().map_or(i, |m| m[i]);
                op.apply(da[ia], db[ib])
            })
            .collect(),
    };
    let out = Array::from_vec(&out_shape, data);
    let (sa, sb) = (va.shape().to_vec(), vb.shape().to_vec());
    let (need_a, need_b) = (a.requires_grad(), b.requires_grad());
    a.tape.push(out, &[a, b], move |ctx| {
        let (xa, xb) = (ctx.inputs[0].data(), ctx.inputs[1].data());
        let g = ctx.grad.data();
        let mut ga = need_a.then(|| vec![0.0; g.len()]);
        let mut gb = need_b.then(|| vec![0.0; g.len()]);
        for i in 0..g.len() {
            let ia = ma.as_ref().map_or(i, |m| m[i]);
            let ib = mb.as_ref().map_or(i, |m| m[i]);
            let (pa, pb) = op.partials(xa[ia], xb[ib]);
            if let Some(ga) = ga.as_mut() {
                ga[i] = g[i] * pa;
            }
            if let Some(gb) = gb.as_mut() {
                gb[i] = g[i] * pb;
            }
        }
        let shape = ctx.grad.shape();
        vec![
            ga.map(|v| reduce_to(Array::from_vec(shape, v), &sa, &ma)),
            gb.map(|v| reduce_to(Array::from_vec(shape, v), &sb, &mb)),
        ]
    })
}

fn unary<'t>(x: Var<'t>, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Var<'t> {
    let out = x.value().map(f);
    x.tape.push(out, &[x], move |ctx| {
        let xs = ctx.inputs[0].data();
        let ys = ctx.output.data();
        let g: Vec<f64> = ctx
            .grad
            .data()
            .iter()
            .enumerate()
            .map(|(i, &g)| g * df(xs[i], ys[i]))
            .collect();
        vec![Some(Array::from_vec(ctx.grad.shape(), g))]
    })
}

/// Splits `shape` around `axis` into (outer, len, inner) extents.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// named methods read better in chained graph code than operator overloads
#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    pub fn add(self, other: Var<'t>) -> Var<'t> {
        binary(self, other, BinOp::Add)
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        binary(self, other, BinOp::Sub)
    }

    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        binary(self, other, BinOp::Mul)
    }

    pub fn div(self, other: Var<'t>) -> Var<'t> {
        binary(self, other, BinOp::Div)
    }

    pub fn maximum(self, other: Var<'t>) -> Var<'t> {
        binary(self, other, BinOp::Max)
    }

    pub fn minimum(self, other: Var<'t>) -> Var<'t> {
        binary(self, other, BinOp::Min)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        unary(self, move |x| x + c, |_, _| 1.0)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        unary(self, move |x| x * c, move |_, _| c)
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn relu(self) -> Var<'t> {
        unary(self, |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(self) -> Var<'t> {
        unary(self, stable_sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn exp(self) -> Var<'t> {
        unary(self, f64::exp, |_, y| y)
    }

    pub fn ln(self) -> Var<'t> {
        unary(self, f64::ln, |x, _| 1.0 / x)
    }

    pub fn abs(self) -> Var<'t> {
        unary(self, f64::abs, |x, _| if x >= 0.0 { 1.0 } else { -1.0 })
    }

    pub fn sqr(self) -> Var<'t> {
        unary(self, |x| x * x, |x, _| 2.0 * x)
    }

    /// Logit of values in (0, 1), clamped away from the endpoints by `eps`.
    pub fn inverse_sigmoid(self, eps: f64) -> Var<'t> {
        unary(
            self,
            move |x| {
                let x = x.clamp(0.0, 1.0);
                (x.max(eps) / (1.0 - x).max(eps)).ln()
            },
            move |x, _| {
                if x <= eps || x >= 1.0 - eps {
                    0.0
                } else {
                    1.0 / x + 1.0 / (1.0 - x)
                }
            },
        )
    }

    pub fn sum(self) -> Var<'t> {
        let v = self.value();
        let shape = v.shape().to_vec();
        self.tape.push(Array::scalar(v.sum()), &[self], move |ctx| {
            vec![Some(Array::full(&shape, ctx.grad.item()))]
        })
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().len().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum along one axis. The axis is kept with extent 1 when `keepdim`.
    pub fn sum_axis(self, axis: usize, keepdim: bool) -> Var<'t> {
        let v = self.value();
        let (outer, n, inner) = split_axis(v.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        let d = v.data();
        for o in 0..outer {
            for k in 0..n {
                let base = (o * n + k) * inner;
                for i in 0..inner {
                    out[o * inner + i] += d[base + i];
                }
            }
        }
        let mut shape = v.shape().to_vec();
        if keepdim {
            shape[axis] = 1;
        } else {
            shape.remove(axis);
        }
        let in_shape = v.shape().to_vec();
        self.tape.push(Array::from_vec(&shape, out), &[self], move |ctx| {
            let g = ctx.grad.data();
            let mut gi = vec![0.0; outer * n * inner];
            for o in 0..outer {
                for k in 0..n {
                    let base = (o * n + k) * inner;
                    gi[base..base + inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(Array::from_vec(&in_shape, gi))]
        })
    }

    pub fn mean_axis(self, axis: usize, keepdim: bool) -> Var<'t> {
        let n = self.dim(axis) as f64;
        self.sum_axis(axis, keepdim).scale(1.0 / n)
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t> {
        let v = self.value();
        let in_shape = v.shape().to_vec();
        let out = (*v).clone().reshape(shape);
        self.tape
            .push(out, &[self], move |ctx| vec![Some(ctx.grad.clone().reshape(&in_shape))])
    }

    /// Inserts a unit axis at `axis`.
    pub fn unsqueeze(self, axis: usize) -> Var<'t> {
        let mut shape = self.shape();
        shape.insert(axis, 1);
        self.reshape(&shape)
    }

    /// Broadcasts to `shape` (numpy rules).
    pub fn expand(self, shape: &[usize]) -> Var<'t> {
        let v = self.value();
        let in_shape = v.shape().to_vec();
        let map = broadcast_map(&in_shape, shape);
        let Some(m) = map.clone() else { return self };
        let d = v.data();
        let out = Array::from_vec(shape, m.iter().map(|&i| d[i]).collect());
        self.tape.push(out, &[self], move |ctx| {
            vec![Some(reduce_to(ctx.grad.clone(), &in_shape, &map))]
        })
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(self, axes: &[usize]) -> Var<'t> {
        let v = self.value();
        let in_shape = v.shape().to_vec();
        assert_eq!(axes.len(), in_shape.len());
        let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
        let map = Rc::new(permute_map(&in_shape, axes));
        let d = v.data();
        let out = Array::from_vec(&out_shape, map.iter().map(|&i| d[i]).collect());
        self.tape.push(out, &[self], move |ctx| {
            let mut g = Array::zeros(&in_shape);
            let gd = g.data_mut();
            for (o, &i) in ctx.grad.data().iter().zip(map.iter()) {
                gd[i] = *o;
            }
            vec![Some(g)]
        })
    }

    pub fn transpose(self, a: usize, b: usize) -> Var<'t> {
        let mut axes: Vec<usize> = (0..self.shape().len()).collect();
        axes.swap(a, b);
        self.permute(&axes)
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Var<'t> {
        let v = self.value();
        let in_shape = v.shape().to_vec();
        let (outer, n, inner) = split_axis(&in_shape, axis);
        assert!(start + len <= n, "narrow out of range");
        let d = v.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut shape = in_shape.clone();
        shape[axis] = len;
        self.tape.push(Array::from_vec(&shape, out), &[self], move |ctx| {
            let mut g = Array::zeros(&in_shape);
            let gd = g.data_mut();
            let src = ctx.grad.data();
            for o in 0..outer {
                let base = (o * n + start) * inner;
                gd[base..base + len * inner].copy_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(g)]
        })
    }

    /// Picks entries along `axis` (indices may repeat).
    pub fn index_select(self, axis: usize, indices: &[usize]) -> Var<'t> {
        let v = self.value();
        let in_shape = v.shape().to_vec();
        let (outer, n, inner) = split_axis(&in_shape, axis);
        let idx: Rc<Vec<usize>> = Rc::new(indices.to_vec());
        let d = v.data();
        let mut out = Vec::with_capacity(outer * idx.len() * inner);
        for o in 0..outer {
            for &k in idx.iter() {
                assert!(k < n, "index {k} out of range for axis of size {n}");
                let base = (o * n + k) * inner;
                out.extend_from_slice(&d[base..base + inner]);
            }
        }
        let mut shape = in_shape.clone();
        shape[axis] = idx.len();
        self.tape.push(Array::from_vec(&shape, out), &[self], move |ctx| {
            let mut g = Array::zeros(&in_shape);
            let gd = g.data_mut();
            let src = ctx.grad.data();
            let m = idx.len();
            for o in 0..outer {
                for (j, &k) in idx.iter().enumerate() {
                    let base = (o * n + k) * inner;
                    let sbase = (o * m + j) * inner;
                    for i in 0..inner {
                        gd[base + i] += src[sbase + i];
                    }
                }
            }
            vec![Some(g)]
        })
    }

    /// Gathers one element per row: `self[.., i, idx[i]]` for a 2-D input.
    pub fn pick_rows(self, cols: &[usize]) -> Var<'t> {
        let v = self.value();
        assert_eq!(v.ndim(), 2);
        let (rows, width) = (v.dim(0), v.dim(1));
        assert_eq!(cols.len(), rows);
        let cols: Rc<Vec<usize>> = Rc::new(cols.to_vec());
        let out: Vec<f64> = cols.iter().enumerate().map(|(r, &c)| v.data()[r * width + c]).collect();
        self.tape.push(Array::from_vec(&[rows], out), &[self], move |ctx| {
            let mut g = Array::zeros(&[rows, width]);
            for (r, &c) in cols.iter().enumerate() {
                g.data_mut()[r * width + c] = ctx.grad.data()[r];
            }
            vec![Some(g)]
        })
    }
}

pub(crate) fn permute_map(in_shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let in_strides = strides_for(in_shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let eff: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let total: usize = in_shape.iter().product();
    let n = axes.len();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; n];
    let mut off = 0usize;
    for _ in 0..total {
        map.push(off);
        for ax in (0..n).rev() {
            idx[ax] += 1;
            off += eff[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= eff[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    map
}

/// Concatenates along `axis`. All other extents must agree.
pub fn concat<'t>(vars: &[Var<'t>], axis: usize) -> Var<'t> {
    assert!(!vars.is_empty(), "concat of nothing");
    let values: Vec<Rc<Array>> = vars.iter().map(|v| v.value()).collect();
    let first = values[0].shape().to_vec();
    let (outer, _, inner) = split_axis(&first, axis);
    let lens: Vec<usize> = values
        .iter()
        .map(|v| {
            let s = v.shape();
            assert_eq!(s.len(), first.len());
            for (i, (&a, &b)) in s.iter().zip(&first).enumerate() {
                assert!(i == axis || a == b, "concat extent mismatch {s:?} vs {first:?}");
            }
            s[axis]
        })
        .collect();
    let total: usize = lens.iter().sum();
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for (v, &len) in values.iter().zip(&lens) {
            let base = o * len * inner;
            out.extend_from_slice(&v.data()[base..base + len * inner]);
        }
    }
    let mut shape = first.clone();
    shape[axis] = total;
    let lens = Rc::new(lens);
    let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
    vars[0].tape.push(Array::from_vec(&shape, out), vars, move |ctx| {
        let g = ctx.grad.data();
        let mut grads: Vec<Vec<f64>> = lens.iter().map(|&l| Vec::with_capacity(outer * l * inner)).collect();
        let mut off = 0;
        for _ in 0..outer {
            for (gi, &len) in grads.iter_mut().zip(lens.iter()) {
                gi.extend_from_slice(&g[off..off + len * inner]);
                off += len * inner;
            }
        }
        grads
            .into_iter()
            .zip(&shapes)
            .map(|(g, s)| Some(Array::from_vec(s, g)))
            .collect()
    })
}

/// Stacks equal-shaped values along a new leading `axis`.
pub fn stack<'t>(vars: &[Var<'t>], axis: usize) -> Var<'t> {
    let expanded: Vec<Var<'t>> = vars.iter().map(|v| v.unsqueeze(axis)).collect();
    concat(&expanded, axis)
}

macro_rules! impl_bin_operator {
    ($tr:ident, $m:ident, $f:ident) => {
        impl<'t> std::ops::$tr for Var<'t> {
            type Output = Var<'t>;
            fn $m(self, rhs: Var<'t>) -> Var<'t> {
                Var::$f(self, rhs)
            }
        }
    };
}

impl_bin_operator!(Add, add, add);
impl_bin_operator!(Sub, sub, sub);
impl_bin_operator!(Mul, mul, mul);
impl_bin_operator!(Div, div, div);

impl<'t> std::ops::Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        Var::neg(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    #[test]
    fn broadcast_shapes() {
        assert_eq!(broadcast_shape(&[2, 3], &[3]), vec![2, 3]);
        assert_eq!(broadcast_shape(&[2, 1, 4], &[3, 1]), vec![2, 3, 4]);
        assert_eq!(broadcast_shape(&[], &[5]), vec![5]);
    }

    #[test]
    fn bias_add_gradient_sums_rows() {
        let t = Tape::new();
        let x = t.input(Array::from_vec(&[2, 3], vec![1., 2., 3., 4., 5., 6.]));
        let b = t.input(Array::from_vec(&[3], vec![0.5, 0.5, 0.5]));
        let y = (x + b).sum();
        let g = t.backward(y);
        assert_eq!(g.wrt(b).unwrap().data(), &[2.0, 2.0, 2.0]);
        assert_eq!(g.wrt(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn permute_then_reshape_roundtrip() {
        let t = Tape::new();
        let x = t.input(Array::from_vec(&[2, 3, 4], (0..24).map(f64::from).collect()));
        let p = x.permute(&[2, 0, 1]);
        assert_eq!(p.shape(), vec![4, 2, 3]);
        assert_eq!(p.value().get(&[1, 1, 2]), x.value().get(&[1, 2, 1]));
        let back = p.permute(&[1, 2, 0]);
        assert_eq!(*back.value(), *x.value());
    }

    #[test]
    fn concat_and_narrow_are_inverse() {
        let t = Tape::new();
        let a = t.input(Array::from_vec(&[2, 2], vec![1., 2., 3., 4.]));
        let b = t.input(Array::from_vec(&[2, 1], vec![9., 8.]));
        let c = concat(&[a, b], 1);
        assert_eq!(c.value().data(), &[1., 2., 9., 3., 4., 8.]);
        assert_eq!(*c.narrow(1, 0, 2).value(), *a.value());
        let loss = c.narrow(1, 2, 1).scale(3.0).sum();
        let g = t.backward(loss);
        assert_eq!(g.wrt(b).unwrap().data(), &[3.0, 3.0]);
        assert_eq!(g.wrt(a).unwrap().data(), &[0.0; 4]);
    }
}
