//! Reverse-mode differentiation over a single sample.
//!
//! A [`Tape`] records the forward pass of one image as a list of nodes.
//! Batch-level gradients are sums of independent per-sample tapes, which
//! keeps every layer free of cross-sample coupling.

use super::params::{Grads, ParamId, ParamStore};
use super::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

pub(crate) const NORM_EPS: f64 = 1e-5;
const L2_EPS: f64 = 1e-12;

enum Op<T> {
    Input,
    Conv2d {
        x: NodeId,
        w: ParamId,
        bias: Option<ParamId>,
        geom: ConvGeom,
        cols: Option<Vec<T>>,
    },
    Norm {
        x: NodeId,
        gamma: ParamId,
        beta: ParamId,
        xhat: Vec<T>,
        inv_std: T,
    },
    Relu(NodeId),
    MaxPool {
        x: NodeId,
        argmax: Vec<usize>,
    },
    AvgPool2(NodeId),
    GlobalAvgPool(NodeId),
    Linear {
        x: NodeId,
        w: ParamId,
        b: ParamId,
    },
    Concat(Vec<NodeId>),
    L2Normalize {
        x: NodeId,
        norm: T,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn new(c: usize, h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> Self {
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        Self {
            c,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            ho,
            wo,
        }
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }
}

pub(crate) fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let p = g.ho * g.wo;
    let mut cols = vec![T::zero(); g.rows() * p];
    for ci in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &x[(ci * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * g.wo + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let p = g.ho * g.wo;
    for ci in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut dx[(ci * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `y = W x + b` for `W: [out, in]`. Shared by the tape and by cached-feature
/// heads so both paths produce identical bits.
pub(crate) fn linear_forward<T: Scalar>(w: &[T], b: &[T], x: &[T]) -> Vec<T> {
    let out = b.len();
    let mut y = b.to_vec();
    T::gemm(out, x.len(), 1, w, false, x, false, &mut y, true);
    y
}

pub struct Tape<'p, T: Scalar> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn input(&mut self, t: Tensor<T>) -> NodeId {
        self.push(t, Op::Input)
    }

    pub fn conv2d(&mut self, x: NodeId, w: ParamId, bias: Option<ParamId>, stride: usize, pad: usize) -> NodeId {
        let (c, h, wd) = self.value(x).chw();
        let wp = self.params.get(w);
        let (o, kc, kh, kw) = match wp.shape.as_slice() {
            [o, kc, kh, kw] => (*o, *kc, *kh, *kw),
            s => panic!("conv weight {} has shape {s:?}", wp.name),
        };
        assert_eq!(kc, c, "conv {}: input has {c} channels, weight expects {kc}", wp.name);
        let g = ConvGeom::new(c, h, wd, kh, kw, stride, pad);
        let p = g.ho * g.wo;
        let mut out = vec![T::zero(); o * p];
        let cols = if g.is_pointwise() {
            T::gemm(
                o,
                g.rows(),
                p,
                &wp.data,
                false,
                &self.value(x).data,
                false,
                &mut out,
                false,
            );
            None
        } else {
            let cols = im2col(&self.value(x).data, &g);
            T::gemm(o, g.rows(), p, &wp.data, false, &cols, false, &mut out, false);
            Some(cols)
        };
        if let Some(b) = bias {
            let b = &self.params.get(b).data;
            for (oc, chunk) in out.chunks_mut(p).enumerate() {
                for v in chunk {
                    *v += b[oc];
                }
            }
        }
        self.push(
            Tensor::new(vec![o, g.ho, g.wo], out),
            Op::Conv2d {
                x,
                w,
                bias,
                geom: g,
                cols,
            },
        )
    }

    /// Per-sample normalization over all of `C x H x W`, then per-channel
    /// scale and shift.
    pub fn norm(&mut self, x: NodeId, gamma: ParamId, beta: ParamId) -> NodeId {
        let xv = self.value(x);
        let (c, h, w) = xv.chw();
        let n = T::of((c * h * w) as f64);
        let mean = xv.data.iter().copied().sum::<T>() / n;
        let var = xv.data.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let inv_std = T::one() / (var + T::of(NORM_EPS)).sqrt();
        let xhat: Vec<T> = xv.data.iter().map(|&v| (v - mean) * inv_std).collect();
        let gm = &self.params.get(gamma).data;
        let bt = &self.params.get(beta).data;
        let hw = h * w;
        let out = xhat
            .iter()
            .enumerate()
            .map(|(i, &v)| gm[i / hw] * v + bt[i / hw])
            .collect();
        let shape = xv.shape.clone();
        self.push(
            Tensor::new(shape, out),
            Op::Norm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let out = Tensor::new(xv.shape.clone(), xv.data.iter().map(|&v| v.max(T::zero())).collect());
        self.push(out, Op::Relu(x))
    }

    /// 3x3 max pooling, stride 2, padding 1.
    pub fn max_pool(&mut self, x: NodeId) -> NodeId {
        let (c, h, w) = self.value(x).chw();
        let (k, s, pad) = (3usize, 2usize, 1usize);
        let ho = (h + 2 * pad - k) / s + 1;
        let wo = (w + 2 * pad - k) / s + 1;
        let data = &self.value(x).data;
        let mut out = Vec::with_capacity(c * ho * wo);
        let mut argmax = Vec::with_capacity(c * ho * wo);
        for ci in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = T::neg_infinity();
                    let mut best_i = 0;
                    for ky in 0..k {
                        let iy = (oy * s + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * s + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let i = (ci * h + iy as usize) * w + ix as usize;
                            if data[i] > best {
                                best = data[i];
                                best_i = i;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_i);
                }
            }
        }
        self.push(Tensor::new(vec![c, ho, wo], out), Op::MaxPool { x, argmax })
    }

    /// 2x2 average pooling, stride 2 (trailing odd row/column dropped).
    pub fn avg_pool2(&mut self, x: NodeId) -> NodeId {
        let (c, h, w) = self.value(x).chw();
        let (ho, wo) = (h / 2, w / 2);
        let data = &self.value(x).data;
        let quarter = T::of(0.25);
        let mut out = Vec::with_capacity(c * ho * wo);
        for ci in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let at = |dy: usize, dx: usize| data[(ci * h + 2 * oy + dy) * w + 2 * ox + dx];
                    out.push((at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1)) * quarter);
                }
            }
        }
        self.push(Tensor::new(vec![c, ho, wo], out), Op::AvgPool2(x))
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> NodeId {
        let (c, h, w) = self.value(x).chw();
        let hw = h * w;
        let inv = T::one() / T::of(hw as f64);
        let out = self
            .value(x)
            .data
            .chunks(hw)
            .map(|ch| ch.iter().copied().sum::<T>() * inv)
            .collect();
        self.push(Tensor::new(vec![c], out), Op::GlobalAvgPool(x))
    }

    pub fn linear(&mut self, x: NodeId, w: ParamId, b: ParamId) -> NodeId {
        let y = linear_forward(&self.params.get(w).data, &self.params.get(b).data, &self.value(x).data);
        let n = y.len();
        self.push(Tensor::new(vec![n], y), Op::Linear { x, w, b })
    }

    /// Channel-axis concatenation of equally sized feature maps.
    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        let (_, h, w) = self.value(parts[0]).chw();
        let mut c = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (pc, ph, pw) = self.value(p).chw();
            assert_eq!((ph, pw), (h, w), "concat spatial mismatch");
            c += pc;
            data.extend_from_slice(&self.value(p).data);
        }
        self.push(Tensor::new(vec![c, h, w], data), Op::Concat(parts.to_vec()))
    }

    pub fn l2_normalize(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let norm = xv.data.iter().map(|&v| v * v).sum::<T>().sqrt().max(T::of(L2_EPS));
        let out = Tensor::new(xv.shape.clone(), xv.data.iter().map(|&v| v / norm).collect());
        self.push(out, Op::L2Normalize { x, norm })
    }

    /// Backpropagates `grad_out` from `out`, adding parameter gradients into
    /// `grads`.
    pub fn backward(&self, out: NodeId, grad_out: &[T], grads: &mut Grads<T>) {
        assert_eq!(grad_out.len(), self.value(out).len(), "gradient shape mismatch");
        let mut node_grads: Vec<Option<Vec<T>>> = (0..=out.0).map(|_| None).collect();
        node_grads[out.0] = Some(grad_out.to_vec());

        fn slot<'a, T: Scalar>(g: &'a mut [Option<Vec<T>>], id: NodeId, len: usize) -> &'a mut Vec<T> {
            g[id.0].get_or_insert_with(|| vec![T::zero(); len])
        }

        for i in (0..=out.0).rev() {
            let Some(dy) = node_grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input => {}
                Op::Conv2d {
                    x,
                    w,
                    bias,
                    geom: g,
                    cols,
                } => {
                    let o = node.value.shape[0];
                    let p = g.ho * g.wo;
                    let xv = &self.value(*x).data;
                    let input_cols: &[T] = cols.as_deref().unwrap_or(xv);
                    T::gemm(o, p, g.rows(), &dy, false, input_cols, true, grads.buf_mut(*w), true);
                    if let Some(b) = bias {
                        let gb = grads.buf_mut(*b);
                        for (oc, chunk) in dy.chunks(p).enumerate() {
                            gb[oc] += chunk.iter().copied().sum::<T>();
                        }
                    }
                    let wdata = &self.params.get(*w).data;
                    let dx = slot(&mut node_grads, *x, xv.len());
                    if g.is_pointwise() {
                        T::gemm(g.rows(), o, p, wdata, true, &dy, false, dx, true);
                    } else {
                        let mut dcols = vec![T::zero(); g.rows() * p];
                        T::gemm(g.rows(), o, p, wdata, true, &dy, false, &mut dcols, false);
                        col2im_add(&dcols, g, dx);
                    }
                }
                Op::Norm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let (_, h, w) = node.value.chw();
                    let hw = h * w;
                    let gm = &self.params.get(*gamma).data;
                    {
                        let gg = grads.buf_mut(*gamma);
                        for (idx, (&d, &xh)) in dy.iter().zip(xhat).enumerate() {
                            gg[idx / hw] += d * xh;
                        }
                    }
                    {
                        let gb = grads.buf_mut(*beta);
                        for (idx, &d) in dy.iter().enumerate() {
                            gb[idx / hw] += d;
                        }
                    }
                    let n = T::of(dy.len() as f64);
                    let dxhat: Vec<T> = dy.iter().enumerate().map(|(idx, &d)| d * gm[idx / hw]).collect();
                    let sum1 = dxhat.iter().copied().sum::<T>() / n;
                    let sum2 = dxhat.iter().zip(xhat).map(|(&a, &b)| a * b).sum::<T>() / n;
                    let dx = slot(&mut node_grads, *x, dy.len());
                    for ((d, &a), &xh) in dx.iter_mut().zip(&dxhat).zip(xhat) {
                        *d += *inv_std * (a - sum1 - xh * sum2);
                    }
                }
                Op::Relu(x) => {
                    let xv = &self.value(*x).data;
                    let dx = slot(&mut node_grads, *x, xv.len());
                    for ((d, &g), &v) in dx.iter_mut().zip(&dy).zip(xv) {
                        if v > T::zero() {
                            *d += g;
                        }
                    }
                }
                Op::MaxPool { x, argmax } => {
                    let len = self.value(*x).len();
                    let dx = slot(&mut node_grads, *x, len);
                    for (&g, &src) in dy.iter().zip(argmax) {
                        dx[src] += g;
                    }
                }
                Op::AvgPool2(x) => {
                    let (c, h, w) = self.value(*x).chw();
                    let (_, ho, wo) = node.value.chw();
                    let quarter = T::of(0.25);
                    let dx = slot(&mut node_grads, *x, c * h * w);
                    for ci in 0..c {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let g = dy[(ci * ho + oy) * wo + ox] * quarter;
                                for (dyy, dxx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                    dx[(ci * h + 2 * oy + dyy) * w + 2 * ox + dxx] += g;
                                }
                            }
                        }
                    }
                }
                Op::GlobalAvgPool(x) => {
                    let (c, h, w) = self.value(*x).chw();
                    let hw = h * w;
                    let inv = T::one() / T::of(hw as f64);
                    let dx = slot(&mut node_grads, *x, c * hw);
                    for (ci, chunk) in dx.chunks_mut(hw).enumerate() {
                        let g = dy[ci] * inv;
                        for d in chunk {
                            *d += g;
                        }
                    }
                }
                Op::Linear { x, w, b } => {
                    let xv = &self.value(*x).data;
                    let out_dim = dy.len();
                    T::gemm(out_dim, 1, xv.len(), &dy, false, xv, false, grads.buf_mut(*w), true);
                    for (gb, &d) in grads.buf_mut(*b).iter_mut().zip(&dy) {
                        *gb += d;
                    }
                    let wdata = &self.params.get(*w).data;
                    let dx = slot(&mut node_grads, *x, xv.len());
                    T::gemm(xv.len(), out_dim, 1, wdata, true, &dy, false, dx, true);
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.value(p).len();
                        let dx = slot(&mut node_grads, p, len);
                        for (d, &g) in dx.iter_mut().zip(&dy[offset..offset + len]) {
                            *d += g;
                        }
                        offset += len;
                    }
                }
                Op::L2Normalize { x, norm } => {
                    let y = &node.value.data;
                    let dot = y.iter().zip(&dy).map(|(&a, &b)| a * b).sum::<T>();
                    let dx = slot(&mut node_grads, *x, y.len());
                    for ((d, &g), &yv) in dx.iter_mut().zip(&dy).zip(y) {
                        *d += (g - yv * dot) / *norm;
                    }
                }
            }
        }
    }
}
