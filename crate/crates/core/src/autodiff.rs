//! A small reverse-mode differentiation tape over dense `f64` tensors.
//!
//! Each forward pass records operations into a [`Graph`]; [`Graph::backward`]
//! walks the record in reverse, calling each operation's own backward rule.
//! Parameters enter as leaves through [`Graph::param`] and their gradients are
//! read back with [`Grads::param_grads`].

use std::collections::HashMap;

use crate::model::params::{ParamId, ParamStore};

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor shape {shape:?} does not match {} values",
            data.len()
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(rows, cols)` of a 2D tensor.
    pub fn dims2(&self) -> (usize, usize) {
        assert_eq!(
            self.shape.len(),
            2,
            "expected a 2D tensor, got {:?}",
            self.shape
        );
        (self.shape[0], self.shape[1])
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Geometry of a multi-scale deformable sampling step.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformSpec {
    pub heads: usize,
    pub points: usize,
    /// `(height, width)` per level.
    pub levels: Vec<(usize, usize)>,
}

impl DeformSpec {
    pub fn level_starts(&self) -> Vec<usize> {
        let mut acc = 0;
        self.levels
            .iter()
            .map(|&(h, w)| {
                let s = acc;
                acc += h * w;
                s
            })
            .collect()
    }

    pub fn total_tokens(&self) -> usize {
        self.levels.iter().map(|&(h, w)| h * w).sum()
    }

    /// Sampling points per query and head.
    pub fn samples_per_head(&self) -> usize {
        self.levels.len() * self.points
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Relu(Var),
    Sigmoid(Var),
    SoftmaxGroups(Var, usize),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        col: Vec<f64>,
    },
    Reshape(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    DeformSample {
        value: Var,
        reference: Var,
        offsets: Var,
        attn: Var,
        spec: DeformSpec,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// `c = beta * c + a · b` for row-major `a: m×k`, `b: k×n`, with optional transposes.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: the asserts above bound every index reached through these strides.
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

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Bilinear read of a `[tokens, channels]` level slab at pixel coordinates,
/// zero outside. Calls `f(token_index, weight)` for each in-range corner.
#[inline]
fn bilinear_taps(h: usize, w: usize, px: f64, py: f64, mut f: impl FnMut(usize, f64, f64, f64)) {
    let (x0, y0) = (px.floor(), py.floor());
    let (fx, fy) = (px - x0, py - y0);
    for (dy, wy, dwy) in [(0.0, 1.0 - fy, -1.0), (1.0, fy, 1.0)] {
        for (dx, wx, dwx) in [(0.0, 1.0 - fx, -1.0), (1.0, fx, 1.0)] {
            let (yy, xx) = (y0 + dy, x0 + dx);
            if yy >= 0.0 && xx >= 0.0 && yy < h as f64 && xx < w as f64 {
                // weight, d weight / d px, d weight / d py
                f(yy as usize * w + xx as usize, wy * wx, wy * dwx, dwy * wx);
            }
        }
    }
}

/// Bilinear sample of a `[h, w, channels]` map at normalized `(x, y)`; pixel
/// `(i, j)` has its center at `((j + 0.5) / w, (i + 0.5) / h)`.
pub fn bilinear_sample(
    map: &[f64],
    h: usize,
    w: usize,
    channels: usize,
    point: [f64; 2],
) -> Vec<f64> {
    let mut out = vec![0.0; channels];
    bilinear_taps(
        h,
        w,
        point[0] * w as f64 - 0.5,
        point[1] * h as f64 - 0.5,
        |t, wt, _, _| {
            for c in 0..channels {
                out[c] += wt * map[t * channels + c];
            }
        },
    );
    out
}

/// Gradients of `Σ d_out · bilinear_sample(map, point)` w.r.t. the map and the point.
pub fn bilinear_sample_backward(
    h: usize,
    w: usize,
    channels: usize,
    map: &[f64],
    point: [f64; 2],
    d_out: &[f64],
) -> (Vec<f64>, [f64; 2]) {
    let mut d_map = vec![0.0; map.len()];
    let mut d_point = [0.0; 2];
    bilinear_taps(
        h,
        w,
        point[0] * w as f64 - 0.5,
        point[1] * h as f64 - 0.5,
        |t, wt, dwx, dwy| {
            for c in 0..channels {
                d_map[t * channels + c] += wt * d_out[c];
                d_point[0] += dwx * w as f64 * map[t * channels + c] * d_out[c];
                d_point[1] += dwy * h as f64 * map[t * channels + c] * d_out[c];
            }
        },
    );
    (d_map, d_point)
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; no gradient is propagated into it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Input whose gradient is wanted (used by gradient checks).
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.push(
            Tensor::new(p.shape.clone(), p.value.clone()),
            Op::Leaf,
            true,
        );
        self.params.insert(id, v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape, vb.shape, "add shape mismatch");
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x + y).collect();
        let t = Tensor::new(va.shape.clone(), data);
        let ng = self.needs(a) || self.needs(b);
        self.push(t, Op::Add(a, b), ng)
    }

    /// `x[n, d] + b[d]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Var {
        let (vx, vb) = (self.value(x), self.value(b));
        let (n, d) = vx.dims2();
        assert_eq!(vb.len(), d, "add_row width mismatch");
        let mut data = vx.data.clone();
        for r in 0..n {
            for (o, &bb) in data[r * d..(r + 1) * d].iter_mut().zip(&vb.data) {
                *o += bb;
            }
        }
        let ng = self.needs(x) || self.needs(b);
        self.push(Tensor::new(vec![n, d], data), Op::AddRow(x, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape, vb.shape, "mul shape mismatch");
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x * y).collect();
        let t = Tensor::new(va.shape.clone(), data);
        let ng = self.needs(a) || self.needs(b);
        self.push(t, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let va = self.value(a);
        let t = Tensor::new(va.shape.clone(), va.data.iter().map(|x| x * s).collect());
        let ng = self.needs(a);
        self.push(t, Op::Scale(a, s), ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.value(a).dims2();
        let (k2, n) = self.value(b).dims2();
        assert_eq!(k, k2, "matmul inner dimension mismatch");
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            &self.value(a).data,
            false,
            &self.value(b).data,
            false,
            0.0,
            &mut out,
        );
        let ng = self.needs(a) || self.needs(b);
        self.push(Tensor::new(vec![m, n], out), Op::MatMul(a, b), ng)
    }

    /// `x · w + b` with `w: [in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_row(y, b)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let (r, c) = va.dims2();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = va.data[i * c + j];
            }
        }
        let ng = self.needs(a);
        self.push(Tensor::new(vec![c, r], out), Op::Transpose(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let t = Tensor::new(
            va.shape.clone(),
            va.data.iter().map(|&x| x.max(0.0)).collect(),
        );
        let ng = self.needs(a);
        self.push(t, Op::Relu(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let t = Tensor::new(
            va.shape.clone(),
            va.data.iter().map(|&x| sigmoid(x)).collect(),
        );
        let ng = self.needs(a);
        self.push(t, Op::Sigmoid(a), ng)
    }

    /// Softmax over consecutive runs of `group` elements of the flat data.
    pub fn softmax_groups(&mut self, a: Var, group: usize) -> Var {
        let va = self.value(a);
        assert!(
            group > 0 && va.len().is_multiple_of(group),
            "softmax group does not divide tensor"
        );
        let mut out = va.data.clone();
        for chunk in out.chunks_mut(group) {
            let max = chunk.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in chunk.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in chunk.iter_mut() {
                *v /= sum;
            }
        }
        let t = Tensor::new(va.shape.clone(), out);
        let ng = self.needs(a);
        self.push(t, Op::SoftmaxGroups(a, group), ng)
    }

    /// Normalize each row of `x[n, d]`, then scale by `gamma[d]` and shift by `beta[d]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        const EPS: f64 = 1e-5;
        let vx = self.value(x);
        let (n, d) = vx.dims2();
        let (g, b) = (&self.value(gamma).data, &self.value(beta).data);
        let mut xhat = vec![0.0; n * d];
        let mut rstd = vec![0.0; n];
        let mut out = vec![0.0; n * d];
        for r in 0..n {
            let row = &vx.data[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + EPS).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * g[j] + b[j];
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            Tensor::new(vec![n, d], out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        )
    }

    /// Group normalization of a `[C, H, W]` map with per-channel affine.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        const EPS: f64 = 1e-5;
        let vx = self.value(x);
        let c = vx.shape[0];
        assert!(
            groups > 0 && c.is_multiple_of(groups),
            "groups must divide channels"
        );
        let hw = vx.len() / c;
        let per = c / groups * hw;
        let (g, b) = (&self.value(gamma).data, &self.value(beta).data);
        let mut xhat = vec![0.0; vx.len()];
        let mut rstd = vec![0.0; groups];
        let mut out = vec![0.0; vx.len()];
        for (gi, rstd_g) in rstd.iter_mut().enumerate() {
            let seg = &vx.data[gi * per..(gi + 1) * per];
            let mean = seg.iter().sum::<f64>() / per as f64;
            let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / per as f64;
            let rs = 1.0 / (var + EPS).sqrt();
            *rstd_g = rs;
            for (j, &v) in seg.iter().enumerate() {
                let idx = gi * per + j;
                let ch = idx / hw;
                xhat[idx] = (v - mean) * rs;
                out[idx] = xhat[idx] * g[ch] + b[ch];
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let shape = vx.shape.clone();
        self.push(
            Tensor::new(shape, out),
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            },
            ng,
        )
    }

    /// 2D convolution of `x[C, H, W]` with `w[O, C, k, k]` plus bias `b[O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let vx = self.value(x);
        let vw = self.value(w);
        let (c, h, wd) = (vx.shape[0], vx.shape[1], vx.shape[2]);
        let (o, k) = (vw.shape[0], vw.shape[2]);
        assert_eq!(vw.shape[1], c, "conv channel mismatch");
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let ckk = c * k * k;
        let hw = ho * wo;
        let mut col = vec![0.0; ckk * hw];
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..wo {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < wd as isize {
                                col[row * hw + oy * wo + ox] =
                                    vx.data[(ci * h + iy as usize) * wd + ix as usize];
                            }
                        }
                    }
                }
            }
        }
        let mut out = vec![0.0; o * hw];
        for (oc, &bias) in self.value(b).data.iter().enumerate() {
            out[oc * hw..(oc + 1) * hw].fill(bias);
        }
        gemm(o, ckk, hw, &vw.data, false, &col, false, 1.0, &mut out);
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(
            Tensor::new(vec![o, ho, wo], out),
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                col,
            },
            ng,
        )
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Var {
        let va = self.value(a);
        let t = Tensor::new(shape, va.data.clone());
        let ng = self.needs(a);
        self.push(t, Op::Reshape(a), ng)
    }

    /// Stack 2D tensors with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).dims2().1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.value(p).dims2();
            assert_eq!(c, cols, "concat_rows column mismatch");
            rows += r;
            data.extend_from_slice(&self.value(p).data);
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(
            Tensor::new(vec![rows, cols], data),
            Op::ConcatRows(parts.to_vec()),
            ng,
        )
    }

    /// Join 2D tensors with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).dims2().0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let (r, c) = self.value(p).dims2();
                assert_eq!(r, rows, "concat_cols row mismatch");
                c
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut off = 0;
        for (&p, &wdt) in parts.iter().zip(&widths) {
            let src = &self.value(p).data;
            for r in 0..rows {
                data[r * total + off..r * total + off + wdt]
                    .copy_from_slice(&src[r * wdt..(r + 1) * wdt]);
            }
            off += wdt;
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(
            Tensor::new(vec![rows, total], data),
            Op::ConcatCols(parts.to_vec()),
            ng,
        )
    }

    /// Columns `start..end` of a 2D tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let va = self.value(a);
        let (r, c) = va.dims2();
        assert!(start < end && end <= c, "slice_cols out of range");
        let wdt = end - start;
        let mut data = Vec::with_capacity(r * wdt);
        for i in 0..r {
            data.extend_from_slice(&va.data[i * c + start..i * c + end]);
        }
        let ng = self.needs(a);
        self.push(
            Tensor::new(vec![r, wdt], data),
            Op::SliceCols(a, start, end),
            ng,
        )
    }

    /// Multi-scale deformable sampling.
    ///
    /// * `value`: `[S, d]` tokens of all levels, level-major, each level row-major.
    /// * `reference`: `[Nq, 2]` normalized `(x, y)`.
    /// * `offsets`: `[Nq, M·L·K·2]` in pixels of the sampled level.
    /// * `attn`: `[Nq, M·L·K]`, already normalized per `(query, head)`.
    ///
    /// Head `m` reads channels `m·d/M .. (m+1)·d/M`; the output is `[Nq, d]`.
    pub fn deform_sample(
        &mut self,
        value: Var,
        reference: Var,
        offsets: Var,
        attn: Var,
        spec: &DeformSpec,
    ) -> Var {
        let (s, d) = self.value(value).dims2();
        let (nq, two) = self.value(reference).dims2();
        assert_eq!(two, 2, "reference must be [Nq, 2]");
        assert_eq!(
            s,
            spec.total_tokens(),
            "value token count does not match levels"
        );
        assert_eq!(d % spec.heads, 0, "channels must divide by heads");
        let per_head = spec.samples_per_head();
        assert_eq!(
            self.value(offsets).shape,
            vec![nq, spec.heads * per_head * 2]
        );
        assert_eq!(self.value(attn).shape, vec![nq, spec.heads * per_head]);

        let dh = d / spec.heads;
        let starts = spec.level_starts();
        let (val, refp, off, aw) = (
            &self.value(value).data,
            &self.value(reference).data,
            &self.value(offsets).data,
            &self.value(attn).data,
        );
        let mut out = vec![0.0; nq * d];
        for q in 0..nq {
            for m in 0..spec.heads {
                let acc = &mut out[q * d + m * dh..q * d + (m + 1) * dh];
                for (l, &(h, w)) in spec.levels.iter().enumerate() {
                    for k in 0..spec.points {
                        let si = (m * spec.levels.len() + l) * spec.points + k;
                        let a = aw[q * spec.heads * per_head + si];
                        let o = (q * spec.heads * per_head + si) * 2;
                        let px = (refp[q * 2] + off[o] / w as f64) * w as f64 - 0.5;
                        let py = (refp[q * 2 + 1] + off[o + 1] / h as f64) * h as f64 - 0.5;
                        bilinear_taps(h, w, px, py, |t, wt, _, _| {
                            let row = &val
                                [(starts[l] + t) * d + m * dh..(starts[l] + t) * d + (m + 1) * dh];
                            for (acc_c, &v) in acc.iter_mut().zip(row) {
                                *acc_c += a * wt * v;
                            }
                        });
                    }
                }
            }
        }
        let ng = [value, reference, offsets, attn]
            .iter()
            .any(|&v| self.needs(v));
        self.push(
            Tensor::new(vec![nq, d], out),
            Op::DeformSample {
                value,
                reference,
                offsets,
                attn,
                spec: spec.clone(),
            },
            ng,
        )
    }

    /// Reverse pass seeded with `d output` for one or more nodes.
    pub fn backward(&self, seeds: &[(Var, &[f64])]) -> Grads {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut last = 0;
        for &(v, g) in seeds {
            assert_eq!(g.len(), self.value(v).len(), "seed length mismatch");
            accumulate(&mut grads, v, g);
            last = last.max(v.0);
        }
        for i in (0..=last).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.needs_grad {
                self.backward_node(i, &dy, &mut grads);
            }
            grads[i] = Some(dy);
        }
        Grads {
            grads,
            params: self.params.clone(),
        }
    }

    fn backward_node(&self, i: usize, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.needs(v) {
                        accumulate(grads, v, dy);
                    }
                }
            }
            Op::AddRow(x, b) => {
                if self.needs(*x) {
                    accumulate(grads, *x, dy);
                }
                if self.needs(*b) {
                    let (_, d) = y.dims2();
                    let mut db = vec![0.0; d];
                    for row in dy.chunks(d) {
                        for (o, &g) in db.iter_mut().zip(row) {
                            *o += g;
                        }
                    }
                    accumulate(grads, *b, &db);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&self.value(*a).data, &self.value(*b).data);
                if self.needs(*a) {
                    let g: Vec<f64> = dy.iter().zip(vb).map(|(g, x)| g * x).collect();
                    accumulate(grads, *a, &g);
                }
                if self.needs(*b) {
                    let g: Vec<f64> = dy.iter().zip(va).map(|(g, x)| g * x).collect();
                    accumulate(grads, *b, &g);
                }
            }
            Op::Scale(a, s) => {
                let g: Vec<f64> = dy.iter().map(|g| g * s).collect();
                accumulate(grads, *a, &g);
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2();
                let n = self.value(*b).dims2().1;
                if self.needs(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, dy, false, &self.value(*b).data, true, 0.0, &mut da);
                    accumulate(grads, *a, &da);
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, &self.value(*a).data, true, dy, false, 0.0, &mut db);
                    accumulate(grads, *b, &db);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = y.dims2();
                let mut g = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        g[j * r + i] = dy[i * c + j];
                    }
                }
                accumulate(grads, *a, &g);
            }
            Op::Relu(a) => {
                let g: Vec<f64> = dy
                    .iter()
                    .zip(&self.value(*a).data)
                    .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
                    .collect();
                accumulate(grads, *a, &g);
            }
            Op::Sigmoid(a) => {
                let g: Vec<f64> = dy
                    .iter()
                    .zip(&y.data)
                    .map(|(g, s)| g * s * (1.0 - s))
                    .collect();
                accumulate(grads, *a, &g);
            }
            Op::SoftmaxGroups(a, group) => {
                let mut g = vec![0.0; dy.len()];
                for ((gc, yc), dc) in g
                    .chunks_mut(*group)
                    .zip(y.data.chunks(*group))
                    .zip(dy.chunks(*group))
                {
                    let dot: f64 = yc.iter().zip(dc).map(|(a, b)| a * b).sum();
                    for j in 0..*group {
                        gc[j] = yc[j] * (dc[j] - dot);
                    }
                }
                accumulate(grads, *a, &g);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (n, d) = y.dims2();
                let g = &self.value(*gamma).data;
                if self.needs(*gamma) || self.needs(*beta) {
                    let mut dg = vec![0.0; d];
                    let mut db = vec![0.0; d];
                    for r in 0..n {
                        for j in 0..d {
                            dg[j] += dy[r * d + j] * xhat[r * d + j];
                            db[j] += dy[r * d + j];
                        }
                    }
                    accumulate(grads, *gamma, &dg);
                    accumulate(grads, *beta, &db);
                }
                if self.needs(*x) {
                    let mut dx = vec![0.0; n * d];
                    for r in 0..n {
                        let mut sum = 0.0;
                        let mut sum_xh = 0.0;
                        for j in 0..d {
                            let dxh = dy[r * d + j] * g[j];
                            sum += dxh;
                            sum_xh += dxh * xhat[r * d + j];
                        }
                        for j in 0..d {
                            let dxh = dy[r * d + j] * g[j];
                            dx[r * d + j] = rstd[r] / d as f64
                                * (d as f64 * dxh - sum - xhat[r * d + j] * sum_xh);
                        }
                    }
                    accumulate(grads, *x, &dx);
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            } => {
                let c = y.shape[0];
                let hw = y.len() / c;
                let per = c / groups * hw;
                let g = &self.value(*gamma).data;
                if self.needs(*gamma) || self.needs(*beta) {
                    let mut dg = vec![0.0; c];
                    let mut db = vec![0.0; c];
                    for (idx, (&d, &xh)) in dy.iter().zip(xhat).enumerate() {
                        dg[idx / hw] += d * xh;
                        db[idx / hw] += d;
                    }
                    accumulate(grads, *gamma, &dg);
                    accumulate(grads, *beta, &db);
                }
                if self.needs(*x) {
                    let mut dx = vec![0.0; y.len()];
                    for (gi, &rs) in rstd.iter().enumerate().take(*groups) {
                        let range = gi * per..(gi + 1) * per;
                        let mut sum = 0.0;
                        let mut sum_xh = 0.0;
                        for idx in range.clone() {
                            let dxh = dy[idx] * g[idx / hw];
                            sum += dxh;
                            sum_xh += dxh * xhat[idx];
                        }
                        for idx in range {
                            let dxh = dy[idx] * g[idx / hw];
                            dx[idx] =
                                rs / per as f64 * (per as f64 * dxh - sum - xhat[idx] * sum_xh);
                        }
                    }
                    accumulate(grads, *x, &dx);
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                col,
            } => {
                let vw = self.value(*w);
                let (o, k) = (vw.shape[0], vw.shape[2]);
                let vx = self.value(*x);
                let (c, h, wd) = (vx.shape[0], vx.shape[1], vx.shape[2]);
                let (ho, wo) = (y.shape[1], y.shape[2]);
                let hw = ho * wo;
                let ckk = c * k * k;
                if self.needs(*b) {
                    let db: Vec<f64> = dy.chunks(hw).map(|r| r.iter().sum()).collect();
                    accumulate(grads, *b, &db);
                }
                if self.needs(*w) {
                    let mut dw = vec![0.0; o * ckk];
                    gemm(o, hw, ckk, dy, false, col, true, 0.0, &mut dw);
                    accumulate(grads, *w, &dw);
                }
                if self.needs(*x) {
                    let mut dcol = vec![0.0; ckk * hw];
                    gemm(ckk, o, hw, &vw.data, true, dy, false, 0.0, &mut dcol);
                    let mut dx = vec![0.0; vx.len()];
                    for ci in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let row = (ci * k + ky) * k + kx;
                                for oy in 0..ho {
                                    let iy = (oy * stride + ky) as isize - *pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for ox in 0..wo {
                                        let ix = (ox * stride + kx) as isize - *pad as isize;
                                        if ix >= 0 && ix < wd as isize {
                                            dx[(ci * h + iy as usize) * wd + ix as usize] +=
                                                dcol[row * hw + oy * wo + ox];
                                        }
                                    }
                                }
                            }
                        }
                    }
                    accumulate(grads, *x, &dx);
                }
            }
            Op::Reshape(a) => accumulate(grads, *a, dy),
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if self.needs(p) {
                        accumulate(grads, p, &dy[off..off + n]);
                    }
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = y.dims2();
                let mut off = 0;
                for &p in parts {
                    let wdt = self.value(p).dims2().1;
                    if self.needs(p) {
                        let mut g = Vec::with_capacity(rows * wdt);
                        for r in 0..rows {
                            g.extend_from_slice(&dy[r * total + off..r * total + off + wdt]);
                        }
                        accumulate(grads, p, &g);
                    }
                    off += wdt;
                }
            }
            Op::SliceCols(a, start, end) => {
                let (r, c) = self.value(*a).dims2();
                let wdt = end - start;
                let mut g = vec![0.0; r * c];
                for i in 0..r {
                    g[i * c + start..i * c + end].copy_from_slice(&dy[i * wdt..(i + 1) * wdt]);
                }
                accumulate(grads, *a, &g);
            }
            Op::DeformSample {
                value,
                reference,
                offsets,
                attn,
                spec,
            } => self.deform_backward(*value, *reference, *offsets, *attn, spec, dy, grads),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn deform_backward(
        &self,
        value: Var,
        reference: Var,
        offsets: Var,
        attn: Var,
        spec: &DeformSpec,
        dy: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (_, d) = self.value(value).dims2();
        let nq = self.value(reference).dims2().0;
        let dh = d / spec.heads;
        let per_head = spec.samples_per_head();
        let starts = spec.level_starts();
        let val = &self.value(value).data;
        let refp = &self.value(reference).data;
        let off = &self.value(offsets).data;
        let aw = &self.value(attn).data;

        let mut d_val = vec![0.0; val.len()];
        let mut d_ref = vec![0.0; refp.len()];
        let mut d_off = vec![0.0; off.len()];
        let mut d_attn = vec![0.0; aw.len()];
        for q in 0..nq {
            for m in 0..spec.heads {
                let g = &dy[q * d + m * dh..q * d + (m + 1) * dh];
                for (l, &(h, w)) in spec.levels.iter().enumerate() {
                    for k in 0..spec.points {
                        let si = (m * spec.levels.len() + l) * spec.points + k;
                        let ai = q * spec.heads * per_head + si;
                        let a = aw[ai];
                        let o = ai * 2;
                        let px = (refp[q * 2] + off[o] / w as f64) * w as f64 - 0.5;
                        let py = (refp[q * 2 + 1] + off[o + 1] / h as f64) * h as f64 - 0.5;
                        let (mut dpx, mut dpy, mut da) = (0.0, 0.0, 0.0);
                        bilinear_taps(h, w, px, py, |t, wt, dwx, dwy| {
                            let base = (starts[l] + t) * d + m * dh;
                            for c in 0..dh {
                                let v = val[base + c];
                                da += g[c] * wt * v;
                                dpx += g[c] * a * dwx * v;
                                dpy += g[c] * a * dwy * v;
                                d_val[base + c] += g[c] * a * wt;
                            }
                        });
                        d_attn[ai] += da;
                        // px = ref_x * w + off_x - 0.5
                        d_off[o] += dpx;
                        d_off[o + 1] += dpy;
                        d_ref[q * 2] += dpx * w as f64;
                        d_ref[q * 2 + 1] += dpy * h as f64;
                    }
                }
            }
        }
        for (v, g) in [
            (value, d_val),
            (reference, d_ref),
            (offsets, d_off),
            (attn, d_attn),
        ] {
            if self.needs(v) {
                accumulate(grads, v, &g);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.iter_mut().zip(g) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(g.to_vec()),
    }
}

/// Result of [`Graph::backward`].
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
    params: HashMap<ParamId, Var>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of every parameter in `store` order; unused parameters get zeros.
    pub fn param_grads(&self, store: &ParamStore) -> Vec<Vec<f64>> {
        store
            .iter()
            .map(|(id, p)| {
                self.params
                    .get(&id)
                    .and_then(|&v| self.get(v))
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; p.value.len()])
            })
            .collect()
    }
}
