//! Fused neural-network kernels with hand-written backward passes.

use std::rc::Rc;

use super::array::Array;
use super::linalg::gemm;
use super::tape::Var;
use crate::geometry::resize_taps;

const NORM_EPS: f64 = 1e-5;

impl<'t> Var<'t> {
    /// Softmax over the last axis.
    pub fn softmax(self) -> Var<'t> {
        let v = self.value();
        let n = *v.shape().last().expect("softmax of a scalar");
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(n) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                s += *x;
            }
            for x in row.iter_mut() {
                *x /= s;
            }
        }
        self.tape.push(Array::from_vec(v.shape(), out), &[self], move |ctx| {
            let y = ctx.output.data();
            let g = ctx.grad.data();
            let mut gi = vec![0.0; y.len()];
            for ((gr, yr), out) in g.chunks(n).zip(y.chunks(n)).zip(gi.chunks_mut(n)) {
                let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                for i in 0..n {
                    out[i] = yr[i] * (gr[i] - dot);
                }
            }
            vec![Some(Array::from_vec(ctx.output.shape(), gi))]
        })
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(self) -> Var<'t> {
        let v = self.value();
        let n = *v.shape().last().expect("log_softmax of a scalar");
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(n) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        self.tape.push(Array::from_vec(v.shape(), out), &[self], move |ctx| {
            let y = ctx.output.data();
            let g = ctx.grad.data();
            let mut gi = vec![0.0; y.len()];
            for ((gr, yr), out) in g.chunks(n).zip(y.chunks(n)).zip(gi.chunks_mut(n)) {
                let s: f64 = gr.iter().sum();
                for i in 0..n {
                    out[i] = gr[i] - yr[i].exp() * s;
                }
            }
            vec![Some(Array::from_vec(ctx.output.shape(), gi))]
        })
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(self, gamma: Var<'t>, beta: Var<'t>) -> Var<'t> {
        let v = self.value();
        let d = *v.shape().last().unwrap();
        let rows = v.len() / d;
        let (xhat, inv_std) = normalize_groups(v.data(), rows, d);
        let gm = gamma.value();
        let bt = beta.value();
        assert_eq!(gm.len(), d);
        assert_eq!(bt.len(), d);
        let out: Vec<f64> = xhat
            .iter()
            .enumerate()
            .map(|(i, &x)| x * gm.data()[i % d] + bt.data()[i % d])
            .collect();
        let xhat = Rc::new(xhat);
        let shape = v.shape().to_vec();
        self.tape
            .push(Array::from_vec(&shape, out), &[self, gamma, beta], move |ctx| {
                let g = ctx.grad.data();
                let gm = ctx.inputs[1].data();
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                let mut dx = vec![0.0; g.len()];
                for r in 0..rows {
                    let gr = &g[r * d..(r + 1) * d];
                    let xr = &xhat[r * d..(r + 1) * d];
                    let mut mean_dx = 0.0;
                    let mut mean_dx_x = 0.0;
                    for i in 0..d {
                        dgamma[i] += gr[i] * xr[i];
                        dbeta[i] += gr[i];
                        let dxh = gr[i] * gm[i];
                        mean_dx += dxh;
                        mean_dx_x += dxh * xr[i];
                    }
                    mean_dx /= d as f64;
                    mean_dx_x /= d as f64;
                    for i in 0..d {
                        let dxh = gr[i] * gm[i];
                        dx[r * d + i] = inv_std[r] * (dxh - mean_dx - xr[i] * mean_dx_x);
                    }
                }
                vec![
                    Some(Array::from_vec(&shape, dx)),
                    Some(Array::from_vec(&[d], dgamma)),
                    Some(Array::from_vec(&[d], dbeta)),
                ]
            })
    }

    /// Group normalization of a `[N, C, ...]` tensor with per-channel affine.
    pub fn group_norm(self, groups: usize, gamma: Var<'t>, beta: Var<'t>) -> Var<'t> {
        let v = self.value();
        let shape = v.shape().to_vec();
        let (n, c) = (shape[0], shape[1]);
        assert_eq!(c % groups, 0, "channels {c} not divisible by {groups} groups");
        let spatial: usize = shape[2..].iter().product();
        let gsize = c / groups * spatial;
        let (xhat, inv_std) = normalize_groups(v.data(), n * groups, gsize);
        let gm = gamma.value();
        let bt = beta.value();
        let mut out = xhat.clone();
        for (i, o) in out.iter_mut().enumerate() {
            let ch = (i / spatial) % c;
            *o = *o * gm.data()[ch] + bt.data()[ch];
        }
        let xhat = Rc::new(xhat);
        self.tape
            .push(Array::from_vec(&shape, out), &[self, gamma, beta], move |ctx| {
                let g = ctx.grad.data();
                let gm = ctx.inputs[1].data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dx = vec![0.0; g.len()];
                for (grp, &istd) in inv_std.iter().enumerate() {
                    let base = grp * gsize;
                    let mut mean_dx = 0.0;
                    let mut mean_dx_x = 0.0;
                    for j in 0..gsize {
                        let i = base + j;
                        let ch = (i / spatial) % c;
                        dgamma[ch] += g[i] * xhat[i];
                        dbeta[ch] += g[i];
                        let dxh = g[i] * gm[ch];
                        mean_dx += dxh;
                        mean_dx_x += dxh * xhat[i];
                    }
                    mean_dx /= gsize as f64;
                    mean_dx_x /= gsize as f64;
                    for j in 0..gsize {
                        let i = base + j;
                        let ch = (i / spatial) % c;
                        let dxh = g[i] * gm[ch];
                        dx[i] = istd * (dxh - mean_dx - xhat[i] * mean_dx_x);
                    }
                }
                vec![
                    Some(Array::from_vec(&shape, dx)),
                    Some(Array::from_vec(&[c], dgamma)),
                    Some(Array::from_vec(&[c], dbeta)),
                ]
            })
    }

    /// 2-D convolution of `[N, Cin, H, W]` with weights `[Cout, Cin, kh, kw]`.
    pub fn conv2d(self, weight: Var<'t>, bias: Option<Var<'t>>, stride: usize, padding: usize) -> Var<'t> {
        let x = self.value();
        let w = weight.value();
        let (n, cin, h, wd) = dims4(x.shape());
        let (cout, wcin, kh, kw) = dims4(w.shape());
        assert_eq!(cin, wcin, "conv2d channel mismatch");
        let geo = ConvGeometry {
            cin,
            h,
            w: wd,
            kh,
            kw,
            stride,
            padding,
            ho: (h + 2 * padding - kh) / stride + 1,
            wo: (wd + 2 * padding - kw) / stride + 1,
        };
        let kdim = cin * kh * kw;
        let hw = geo.ho * geo.wo;
        let mut out = vec![0.0; n * cout * hw];
        let mut cols = vec![0.0; kdim * hw];
        for b in 0..n {
            geo.im2col(&x.data()[b * cin * h * wd..(b + 1) * cin * h * wd], &mut cols);
            gemm(
                cout,
                kdim,
                hw,
                w.data(),
                false,
                &cols,
                false,
                &mut out[b * cout * hw..(b + 1) * cout * hw],
                false,
            );
        }
        let mut parents = vec![self, weight];
        if let Some(bv) = bias {
            let bd = bv.value();
            assert_eq!(bd.len(), cout);
            for b in 0..n {
                for co in 0..cout {
                    let base = (b * cout + co) * hw;
                    for o in &mut out[base..base + hw] {
                        *o += bd.data()[co];
                    }
                }
            }
            parents.push(bv);
        }
        let has_bias = bias.is_some();
        let need_x = self.requires_grad();
        let need_w = weight.requires_grad();
        let out_shape = [n, cout, geo.ho, geo.wo];
        self.tape.push(Array::from_vec(&out_shape, out), &parents, move |ctx| {
            let g = ctx.grad.data();
            let x = ctx.inputs[0].data();
            let w = ctx.inputs[1].data();
            let mut dx = need_x.then(|| vec![0.0; x.len()]);
            let mut dw = need_w.then(|| vec![0.0; w.len()]);
            let mut cols = vec![0.0; kdim * hw];
            let mut dcols = vec![0.0; kdim * hw];
            let xs = geo.cin * geo.h * geo.w;
            for b in 0..n {
                let gb = &g[b * cout * hw..(b + 1) * cout * hw];
                if let Some(dw) = dw.as_mut() {
                    geo.im2col(&x[b * xs..(b + 1) * xs], &mut cols);
                    gemm(cout, hw, kdim, gb, false, &cols, true, dw, true);
                }
                if let Some(dx) = dx.as_mut() {
                    gemm(kdim, cout, hw, w, true, gb, false, &mut dcols, false);
                    geo.col2im(&dcols, &mut dx[b * xs..(b + 1) * xs]);
                }
            }
            let mut grads = vec![
                dx.map(|d| Array::from_vec(ctx.inputs[0].shape(), d)),
                dw.map(|d| Array::from_vec(ctx.inputs[1].shape(), d)),
            ];
            if has_bias {
                let mut db = vec![0.0; cout];
                for b in 0..n {
                    for (co, dbv) in db.iter_mut().enumerate() {
                        let base = (b * cout + co) * hw;
                        *dbv += g[base..base + hw].iter().sum::<f64>();
                    }
                }
                grads.push(Some(Array::from_vec(&[cout], db)));
            }
            grads
        })
    }

    /// Bilinear resize of `[N, C, H, W]` to `(out_h, out_w)` with half-pixel centers.
    pub fn resize_bilinear(self, out_h: usize, out_w: usize) -> Var<'t> {
        let x = self.value();
        let (n, c, h, w) = dims4(x.shape());
        if (h, w) == (out_h, out_w) {
            return self;
        }
        let ty = Rc::new(resize_taps(h, out_h));
        let tx = Rc::new(resize_taps(w, out_w));
        let planes = n * c;
        let mut out = vec![0.0; planes * out_h * out_w];
        for p in 0..planes {
            let src = &x.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * out_h * out_w..(p + 1) * out_h * out_w];
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    dst[oy * out_w + ox] = (1.0 - fy) * ((1.0 - fx) * src[y0 * w + x0] + fx * src[y0 * w + x1])
                        + fy * ((1.0 - fx) * src[y1 * w + x0] + fx * src[y1 * w + x1]);
                }
            }
        }
        self.tape
            .push(Array::from_vec(&[n, c, out_h, out_w], out), &[self], move |ctx| {
                let g = ctx.grad.data();
                let mut dx = vec![0.0; planes * h * w];
                for p in 0..planes {
                    let gp = &g[p * out_h * out_w..(p + 1) * out_h * out_w];
                    let dp = &mut dx[p * h * w..(p + 1) * h * w];
                    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                            let gv = gp[oy * out_w + ox];
                            dp[y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                            dp[y0 * w + x1] += gv * (1.0 - fy) * fx;
                            dp[y1 * w + x0] += gv * fy * (1.0 - fx);
                            dp[y1 * w + x1] += gv * fy * fx;
                        }
                    }
                }
                vec![Some(Array::from_vec(&[n, c, h, w], dx))]
            })
    }
}

/// Standardizes `groups` consecutive runs of `size` values. Returns the
/// normalized values and the per-group inverse standard deviation.
fn normalize_groups(x: &[f64], groups: usize, size: usize) -> (Vec<f64>, Vec<f64>) {
    let mut out = vec![0.0; x.len()];
    let mut inv = vec![0.0; groups];
    for gi in 0..groups {
        let s = &x[gi * size..(gi + 1) * size];
        let mean = s.iter().sum::<f64>() / size as f64;
        let var = s.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / size as f64;
        let is = 1.0 / (var + NORM_EPS).sqrt();
        inv[gi] = is;
        for (o, v) in out[gi * size..(gi + 1) * size].iter_mut().zip(s) {
            *o = (v - mean) * is;
        }
    }
    (out, inv)
}

fn dims4(s: &[usize]) -> (usize, usize, usize, usize) {
    assert_eq!(s.len(), 4, "expected a 4-D tensor, got {s:?}");
    (s[0], s[1], s[2], s[3])
}

#[derive(Clone, Copy)]
struct ConvGeometry {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeometry {
    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let hw = self.ho * self.wo;
        for ci in 0..self.cin {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let dst = &mut cols[row * hw..(row + 1) * hw];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            dst[oy * self.wo + ox] =
                                if iy >= 0 && ix >= 0 && (iy as usize) < self.h && (ix as usize) < self.w {
                                    x[(ci * self.h + iy as usize) * self.w + ix as usize]
                                } else {
                                    0.0
                                };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let hw = self.ho * self.wo;
        for ci in 0..self.cin {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let src = &cols[row * hw..(row + 1) * hw];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy as usize >= self.h {
                            continue;
                        }
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix < 0 || ix as usize >= self.w {
                                continue;
                            }
                            dx[(ci * self.h + iy as usize) * self.w + ix as usize] += src[oy * self.wo + ox];
                        }
                    }
                }
            }
        }
    }
}
