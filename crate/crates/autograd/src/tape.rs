//! Reverse-mode tape. Every op evaluates eagerly and records what its
//! backward pass needs; [`Tape::backward`] then walks the nodes in reverse.

use crate::kernels::{col2im, gemm, im2col, Window};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize, cols: Vec<f64> },
    ConvTranspose2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    ReflectPad { x: Var, pad: usize },
    InstanceNorm { x: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Relu { x: Var },
    LeakyRelu { x: Var, slope: f64 },
    Tanh { x: Var },
    Sigmoid { x: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    MulPlanes { x: Var, m: Var },
    Affine { x: Var, scale: f64 },
    Concat { a: Var, b: Var },
    MaxPool2 { x: Var, argmax: Vec<usize> },
    Upsample2 { x: Var },
    Mean { x: Var },
    Sum { x: Var },
    Abs { x: Var },
    LogClamp { x: Var, lo: f64, hi: f64 },
    Bce { p: Var, target: Tensor, eps: f64 },
    Dice { p: Var, target: Tensor, smooth: f64 },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn conv_out(len: usize, k: usize, stride: usize, pad: usize) -> usize {
    assert!(len + 2 * pad >= k, "kernel {k} larger than padded input {}", len + 2 * pad);
    (len + 2 * pad - k) / stride + 1
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf that receives a gradient.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Copy of `v`'s value as a new constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Zero-padded strided convolution. `x`: `[N,C,H,W]`, `w`: `[O,C,KH,KW]`, `b`: `[O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (n, c, h, wd) = self.value(x).dims4();
        let (o, wc, kh, kw) = self.value(w).dims4();
        assert_eq!(c, wc, "conv2d: input has {c} channels, weight expects {wc}");
        let g = Window {
            channels: c,
            in_h: h,
            in_w: wd,
            k_h: kh,
            k_w: kw,
            stride,
            pad,
            out_h: conv_out(h, kh, stride, pad),
            out_w: conv_out(wd, kw, stride, pad),
        };
        let (rows, ncols) = (g.rows(), g.cols());
        let mut cols = vec![0.0; n * rows * ncols];
        let mut out = vec![0.0; n * o * ncols];
        {
            let xs = self.value(x).data();
            let ws = self.value(w).data();
            for i in 0..n {
                let col = &mut cols[i * rows * ncols..(i + 1) * rows * ncols];
                im2col(&xs[i * c * h * wd..(i + 1) * c * h * wd], &g, col);
                gemm(o, rows, ncols, ws, false, col, false, &mut out[i * o * ncols..(i + 1) * o * ncols], 0.0);
            }
            if let Some(b) = b {
                let bs = self.value(b).data();
                assert_eq!(bs.len(), o);
                for (plane, bias) in out.chunks_mut(ncols).zip(bs.iter().cycle()) {
                    plane.iter_mut().for_each(|v| *v += bias);
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let value = Tensor::new(vec![n, o, g.out_h, g.out_w], out);
        self.push(value, Op::Conv2d { x, w, b, stride, pad, cols }, rg)
    }

    /// Transposed convolution. `x`: `[N,Cin,H,W]`, `w`: `[Cin,Cout,KH,KW]`.
    /// Output side is `(H-1)*stride - 2*pad + KH + output_pad`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize, output_pad: usize) -> Var {
        let (n, cin, h, wd) = self.value(x).dims4();
        let (wcin, cout, kh, kw) = self.value(w).dims4();
        assert_eq!(cin, wcin, "conv_transpose2d: channel mismatch");
        let oh = (h - 1) * stride + kh + output_pad - 2 * pad;
        let ow = (wd - 1) * stride + kw + output_pad - 2 * pad;
        // Geometry of the forward conv whose adjoint this op is.
        let g = Window { channels: cout, in_h: oh, in_w: ow, k_h: kh, k_w: kw, stride, pad, out_h: h, out_w: wd };
        let (rows, ncols) = (g.rows(), g.cols());
        let mut out = vec![0.0; n * cout * oh * ow];
        {
            let xs = self.value(x).data();
            let ws = self.value(w).data();
            let mut cols = vec![0.0; rows * ncols];
            for i in 0..n {
                gemm(rows, cin, ncols, ws, true, &xs[i * cin * h * wd..(i + 1) * cin * h * wd], false, &mut cols, 0.0);
                col2im(&cols, &g, &mut out[i * cout * oh * ow..(i + 1) * cout * oh * ow]);
            }
            if let Some(b) = b {
                let bs = self.value(b).data();
                assert_eq!(bs.len(), cout);
                for (plane, bias) in out.chunks_mut(oh * ow).zip(bs.iter().cycle()) {
                    plane.iter_mut().for_each(|v| *v += bias);
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(Tensor::new(vec![n, cout, oh, ow], out), Op::ConvTranspose2d { x, w, b, stride, pad }, rg)
    }

    pub fn reflect_pad(&mut self, x: Var, pad: usize) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        assert!(pad < h && pad < w, "reflection pad {pad} needs spatial dims > pad");
        let (ph, pw) = (h + 2 * pad, w + 2 * pad);
        let xs = self.value(x).data();
        let mut out = vec![0.0; n * c * ph * pw];
        for p in 0..n * c {
            let src = &xs[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * ph * pw..(p + 1) * ph * pw];
            for i in 0..ph {
                let si = reflect(i as isize - pad as isize, h);
                for j in 0..pw {
                    dst[i * pw + j] = src[si * w + reflect(j as isize - pad as isize, w)];
                }
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::new(vec![n, c, ph, pw], out), Op::ReflectPad { x, pad }, rg)
    }

    /// Per-sample, per-channel normalization without affine parameters.
    pub fn instance_norm(&mut self, x: Var, eps: f64) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let hw = h * w;
        let xs = self.value(x).data();
        let mut xhat = vec![0.0; xs.len()];
        let mut inv_std = vec![0.0; n * c];
        for p in 0..n * c {
            let src = &xs[p * hw..(p + 1) * hw];
            let mean = src.iter().sum::<f64>() / hw as f64;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / hw as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[p] = is;
            for (d, s) in xhat[p * hw..(p + 1) * hw].iter_mut().zip(src) {
                *d = (s - mean) * is;
            }
        }
        let rg = self.rg(x);
        let value = Tensor::new(vec![n, c, h, w], xhat.clone());
        self.push(value, Op::InstanceNorm { x, xhat, inv_std }, rg)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(x).map(f);
        let rg = self.rg(x);
        self.push(value, op, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu { x })
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(x, |v| if v > 0.0 { v } else { slope * v }, Op::LeakyRelu { x, slope })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid { x })
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, f64::abs, Op::Abs { x })
    }

    /// `ln(clamp(x, lo, hi))`; gradient is zero where the clamp is active.
    pub fn log_clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, |v| v.clamp(lo, hi).ln(), Op::LogClamp { x, lo, hi })
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        self.unary(x, |v| scale * v + shift, Op::Affine { x, scale })
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Var {
        self.affine(x, scale, 0.0)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "elementwise op shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(&p, &q)| f(p, q)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |p, q| p + q, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |p, q| p - q, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |p, q| p * q, Op::Mul { a, b })
    }

    /// Multiply every channel of `x` (`[N,C,H,W]`) by the plane `m` (`[N,1,H,W]`).
    pub fn mul_planes(&mut self, x: Var, m: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        assert_eq!(self.value(m).shape(), &[n, 1, h, w], "mul_planes: mask shape mismatch");
        let hw = h * w;
        let (xs, ms) = (self.value(x).data(), self.value(m).data());
        let mut out = vec![0.0; xs.len()];
        for i in 0..n {
            let plane = &ms[i * hw..(i + 1) * hw];
            for ch in 0..c {
                let off = (i * c + ch) * hw;
                for ((o, &v), &mv) in out[off..off + hw].iter_mut().zip(&xs[off..off + hw]).zip(plane) {
                    *o = mv * v;
                }
            }
        }
        let rg = self.rg(x) || self.rg(m);
        self.push(Tensor::new(vec![n, c, h, w], out), Op::MulPlanes { x, m }, rg)
    }

    /// Channel concatenation of two `[N,_,H,W]` tensors.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let (n, ca, h, w) = self.value(a).dims4();
        let (nb, cb, hb, wb) = self.value(b).dims4();
        assert_eq!((n, h, w), (nb, hb, wb), "concat_channels: shape mismatch");
        let hw = h * w;
        let mut out = Vec::with_capacity(n * (ca + cb) * hw);
        for i in 0..n {
            out.extend_from_slice(&self.value(a).data()[i * ca * hw..(i + 1) * ca * hw]);
            out.extend_from_slice(&self.value(b).data()[i * cb * hw..(i + 1) * cb * hw]);
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(vec![n, ca + cb, h, w], out), Op::Concat { a, b }, rg)
    }

    /// 2×2 max pooling with stride 2; odd trailing rows/columns are dropped.
    pub fn max_pool2(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let (oh, ow) = (h / 2, w / 2);
        let xs = self.value(x).data();
        let mut out = vec![0.0; n * c * oh * ow];
        let mut argmax = vec![0; out.len()];
        for p in 0..n * c {
            let base = p * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = base + 2 * i * w + 2 * j;
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * i + di) * w + 2 * j + dj;
                        if xs[idx] > xs[best] {
                            best = idx;
                        }
                    }
                    let o = (p * oh + i) * ow + j;
                    out[o] = xs[best];
                    argmax[o] = best;
                }
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::new(vec![n, c, oh, ow], out), Op::MaxPool2 { x, argmax }, rg)
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let xs = self.value(x).data();
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![0.0; n * c * oh * ow];
        for p in 0..n * c {
            for i in 0..oh {
                for j in 0..ow {
                    out[(p * oh + i) * ow + j] = xs[(p * h + i / 2) * w + j / 2];
                }
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::new(vec![n, c, oh, ow], out), Op::Upsample2 { x }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        assert!(t.numel() > 0, "mean of empty tensor");
        let v = t.sum() / t.numel() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(v), Op::Mean { x }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(v), Op::Sum { x }, rg)
    }

    /// Mean binary cross-entropy of `p` against a constant target, with
    /// predictions clamped to `[eps, 1 - eps]`.
    pub fn bce(&mut self, p: Var, target: &Tensor, eps: f64) -> Var {
        let t = self.value(p);
        assert_eq!(t.shape(), target.shape(), "bce: shape mismatch");
        let n = t.numel() as f64;
        let total: f64 = t
            .data()
            .iter()
            .zip(target.data())
            .map(|(&pv, &tv)| {
                let pc = pv.clamp(eps, 1.0 - eps);
                -(tv * pc.ln() + (1.0 - tv) * (1.0 - pc).ln())
            })
            .sum();
        let rg = self.rg(p);
        self.push(Tensor::scalar(total / n), Op::Bce { p, target: target.clone(), eps }, rg)
    }

    /// Soft Dice loss `1 - (2Σpt + s) / (Σp + Σt + s)` against a constant target.
    pub fn dice(&mut self, p: Var, target: &Tensor, smooth: f64) -> Var {
        let t = self.value(p);
        assert_eq!(t.shape(), target.shape(), "dice: shape mismatch");
        let (num, den) = dice_terms(t.data(), target.data(), smooth);
        let rg = self.rg(p);
        self.push(Tensor::scalar(1.0 - num / den), Op::Dice { p, target: target.clone(), smooth }, rg)
    }

    /// Gradients of the scalar `loss` with respect to every node that requires one.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn accum(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn backprop(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, stride, pad, cols } => {
                let xt = self.value(*x);
                let (n, c, h, wd) = xt.dims4();
                let (o, _, kh, kw) = self.value(*w).dims4();
                let (_, _, oh, ow) = out.dims4();
                let geom =
                    Window { channels: c, in_h: h, in_w: wd, k_h: kh, k_w: kw, stride: *stride, pad: *pad, out_h: oh, out_w: ow };
                let (rows, ncols) = (geom.rows(), geom.cols());
                if self.rg(*w) {
                    let mut gw = vec![0.0; o * rows];
                    for i in 0..n {
                        let go = &gd[i * o * ncols..(i + 1) * o * ncols];
                        gemm(o, ncols, rows, go, false, &cols[i * rows * ncols..(i + 1) * rows * ncols], true, &mut gw, 1.0);
                    }
                    self.accum(grads, *w, Tensor::new(self.value(*w).shape().to_vec(), gw));
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        let mut gb = vec![0.0; o];
                        for (k, plane) in gd.chunks(ncols).enumerate() {
                            gb[k % o] += plane.iter().sum::<f64>();
                        }
                        self.accum(grads, *b, Tensor::new(vec![o], gb));
                    }
                }
                if self.rg(*x) {
                    let ws = self.value(*w).data();
                    let mut gx = vec![0.0; xt.numel()];
                    let mut dcols = vec![0.0; rows * ncols];
                    for i in 0..n {
                        gemm(rows, o, ncols, ws, true, &gd[i * o * ncols..(i + 1) * o * ncols], false, &mut dcols, 0.0);
                        col2im(&dcols, &geom, &mut gx[i * c * h * wd..(i + 1) * c * h * wd]);
                    }
                    self.accum(grads, *x, Tensor::new(xt.shape().to_vec(), gx));
                }
            }
            Op::ConvTranspose2d { x, w, b, stride, pad } => {
                let xt = self.value(*x);
                let (n, cin, h, wd) = xt.dims4();
                let (_, cout, kh, kw) = self.value(*w).dims4();
                let (_, _, oh, ow) = out.dims4();
                let geom = Window {
                    channels: cout,
                    in_h: oh,
                    in_w: ow,
                    k_h: kh,
                    k_w: kw,
                    stride: *stride,
                    pad: *pad,
                    out_h: h,
                    out_w: wd,
                };
                let (rows, ncols) = (geom.rows(), geom.cols());
                let mut dcols = vec![0.0; rows * ncols];
                let mut gw = vec![0.0; cin * rows];
                let mut gx = vec![0.0; xt.numel()];
                let (need_w, need_x) = (self.rg(*w), self.rg(*x));
                let ws = self.value(*w).data();
                for i in 0..n {
                    im2col(&gd[i * cout * oh * ow..(i + 1) * cout * oh * ow], &geom, &mut dcols);
                    let xi = &xt.data()[i * cin * h * wd..(i + 1) * cin * h * wd];
                    if need_w {
                        gemm(cin, ncols, rows, xi, false, &dcols, true, &mut gw, 1.0);
                    }
                    if need_x {
                        gemm(cin, rows, ncols, ws, false, &dcols, false, &mut gx[i * cin * h * wd..(i + 1) * cin * h * wd], 0.0);
                    }
                }
                if need_w {
                    self.accum(grads, *w, Tensor::new(self.value(*w).shape().to_vec(), gw));
                }
                if need_x {
                    self.accum(grads, *x, Tensor::new(xt.shape().to_vec(), gx));
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        let mut gb = vec![0.0; cout];
                        for (k, plane) in gd.chunks(oh * ow).enumerate() {
                            gb[k % cout] += plane.iter().sum::<f64>();
                        }
                        self.accum(grads, *b, Tensor::new(vec![cout], gb));
                    }
                }
            }
            Op::ReflectPad { x, pad } => {
                let (n, c, h, w) = self.value(*x).dims4();
                let (ph, pw) = (h + 2 * pad, w + 2 * pad);
                let mut gx = vec![0.0; n * c * h * w];
                for p in 0..n * c {
                    let src = &gd[p * ph * pw..(p + 1) * ph * pw];
                    let dst = &mut gx[p * h * w..(p + 1) * h * w];
                    for i in 0..ph {
                        let si = reflect(i as isize - *pad as isize, h);
                        for j in 0..pw {
                            dst[si * w + reflect(j as isize - *pad as isize, w)] += src[i * pw + j];
                        }
                    }
                }
                self.accum(grads, *x, Tensor::new(vec![n, c, h, w], gx));
            }
            Op::InstanceNorm { x, xhat, inv_std } => {
                let (_, _, h, w) = out.dims4();
                let hw = h * w;
                let mut gx = vec![0.0; gd.len()];
                for (p, is) in inv_std.iter().enumerate() {
                    let dy = &gd[p * hw..(p + 1) * hw];
                    let xh = &xhat[p * hw..(p + 1) * hw];
                    let mean_dy = dy.iter().sum::<f64>() / hw as f64;
                    let mean_dy_xh = dy.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / hw as f64;
                    for ((o, &d), &xv) in gx[p * hw..(p + 1) * hw].iter_mut().zip(dy).zip(xh) {
                        *o = is * (d - mean_dy - xv * mean_dy_xh);
                    }
                }
                self.accum(grads, *x, Tensor::new(out.shape().to_vec(), gx));
            }
            Op::Relu { x } => {
                let xs = self.value(*x).data();
                let gx = gd.iter().zip(xs).map(|(&d, &v)| if v > 0.0 { d } else { 0.0 }).collect();
                self.accum(grads, *x, Tensor::new(out.shape().to_vec(), gx));
            }
            Op::LeakyRelu { x, slope } => {
                let xs = self.value(*x).data();
                let gx = gd.iter().zip(xs).map(|(&d, &v)| if v > 0.0 { d } else { slope * d }).collect();
                self.accum(grads, *x, Tensor::new(out.shape().to_vec(), gx));
            }
            Op::Tanh { x } => {
                let gx = gd.iter().zip(out.data()).map(|(&d, &y)| d * (1.0 - y * y)).collect();
                self.accum(grads, *x, Tensor::new(out.shape().to_vec(), gx));
            }
            Op::Sigmoid { x } => {
                let gx = gd.iter().zip(out.data()).map(|(&d, &y)| d * y * (1.0 - y)).collect();
                self.accum(grads, *x, Tensor::new(out.shape().to_vec(), gx));
            }
            Op::Abs { x } => {
                let xs = self.value(*x).data();
                let gx = gd.iter().zip(xs).map(|(&d, &v)| d * sign(v)).collect();
                self.accum(grads, *x, Tensor::new(out.shape().to_vec(), gx));
            }
            Op::LogClamp { x, lo, hi } => {
                let xs = self.value(*x).data();
                let gx = gd.iter().zip(xs).map(|(&d, &v)| if v >= *lo && v <= *hi { d / v } else { 0.0 }).collect();
                self.accum(grads, *x, Tensor::new(out.shape().to_vec(), gx));
            }
            Op::Affine { x, scale } => {
                self.accum(grads, *x, g.map(|d| d * scale));
            }
            Op::Add { a, b } => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.clone());
            }
            Op::Sub { a, b } => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.map(|d| -d));
            }
            Op::Mul { a, b } => {
                if self.rg(*a) {
                    let bs = self.value(*b).data();
                    let ga = gd.iter().zip(bs).map(|(d, v)| d * v).collect();
                    self.accum(grads, *a, Tensor::new(out.shape().to_vec(), ga));
                }
                if self.rg(*b) {
                    let as_ = self.value(*a).data();
                    let gb = gd.iter().zip(as_).map(|(d, v)| d * v).collect();
                    self.accum(grads, *b, Tensor::new(out.shape().to_vec(), gb));
                }
            }
            Op::MulPlanes { x, m } => {
                let (n, c, h, w) = out.dims4();
                let hw = h * w;
                let (xs, ms) = (self.value(*x).data(), self.value(*m).data());
                if self.rg(*x) {
                    let mut gx = vec![0.0; gd.len()];
                    for i in 0..n {
                        for ch in 0..c {
                            let off = (i * c + ch) * hw;
                            for k in 0..hw {
                                gx[off + k] = gd[off + k] * ms[i * hw + k];
                            }
                        }
                    }
                    self.accum(grads, *x, Tensor::new(out.shape().to_vec(), gx));
                }
                if self.rg(*m) {
                    let mut gm = vec![0.0; n * hw];
                    for i in 0..n {
                        for ch in 0..c {
                            let off = (i * c + ch) * hw;
                            for k in 0..hw {
                                gm[i * hw + k] += gd[off + k] * xs[off + k];
                            }
                        }
                    }
                    self.accum(grads, *m, Tensor::new(vec![n, 1, h, w], gm));
                }
            }
            Op::Concat { a, b } => {
                let (n, ca, h, w) = self.value(*a).dims4();
                let cb = self.value(*b).dims4().1;
                let hw = h * w;
                let mut ga = Vec::with_capacity(n * ca * hw);
                let mut gb = Vec::with_capacity(n * cb * hw);
                for i in 0..n {
                    let base = i * (ca + cb) * hw;
                    ga.extend_from_slice(&gd[base..base + ca * hw]);
                    gb.extend_from_slice(&gd[base + ca * hw..base + (ca + cb) * hw]);
                }
                self.accum(grads, *a, Tensor::new(vec![n, ca, h, w], ga));
                self.accum(grads, *b, Tensor::new(vec![n, cb, h, w], gb));
            }
            Op::MaxPool2 { x, argmax } => {
                let xt = self.value(*x);
                let mut gx = vec![0.0; xt.numel()];
                for (&d, &idx) in gd.iter().zip(argmax) {
                    gx[idx] += d;
                }
                self.accum(grads, *x, Tensor::new(xt.shape().to_vec(), gx));
            }
            Op::Upsample2 { x } => {
                let (n, c, h, w) = self.value(*x).dims4();
                let ow = 2 * w;
                let mut gx = vec![0.0; n * c * h * w];
                for p in 0..n * c {
                    for i in 0..2 * h {
                        for j in 0..ow {
                            gx[(p * h + i / 2) * w + j / 2] += gd[(p * 2 * h + i) * ow + j];
                        }
                    }
                }
                self.accum(grads, *x, Tensor::new(vec![n, c, h, w], gx));
            }
            Op::Mean { x } => {
                let t = self.value(*x);
                let d = gd[0] / t.numel() as f64;
                self.accum(grads, *x, Tensor::full(t.shape(), d));
            }
            Op::Sum { x } => {
                let t = self.value(*x);
                self.accum(grads, *x, Tensor::full(t.shape(), gd[0]));
            }
            Op::Bce { p, target, eps } => {
                let pt = self.value(*p);
                let n = pt.numel() as f64;
                let gp = pt
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(
                        |(&pv, &tv)| {
                            if pv < *eps || pv > 1.0 - eps {
                                0.0
                            } else {
                                gd[0] * (-tv / pv + (1.0 - tv) / (1.0 - pv)) / n
                            }
                        },
                    )
                    .collect();
                self.accum(grads, *p, Tensor::new(pt.shape().to_vec(), gp));
            }
            Op::Dice { p, target, smooth } => {
                let pt = self.value(*p);
                let (num, den) = dice_terms(pt.data(), target.data(), *smooth);
                let gp = target.data().iter().map(|&tv| -gd[0] * (2.0 * tv * den - num) / (den * den)).collect();
                self.accum(grads, *p, Tensor::new(pt.shape().to_vec(), gp));
            }
        }
    }
}

fn dice_terms(p: &[f64], t: &[f64], smooth: f64) -> (f64, f64) {
    let inter: f64 = p.iter().zip(t).map(|(a, b)| a * b).sum();
    let sp: f64 = p.iter().sum();
    let st: f64 = t.iter().sum();
    (2.0 * inter + smooth, sp + st + smooth)
}

fn reflect(i: isize, len: usize) -> usize {
    let n = len as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * n - 2 - i
    } else {
        i
    };
    r as usize
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
