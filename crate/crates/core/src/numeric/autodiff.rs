//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends a node holding its value and an operation
//! descriptor. [`Tape::backward`] walks the tape from a scalar root in reverse
//! and accumulates gradients for every node that requires one. A tape is a
//! single unit of work; it is never shared across threads.

use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};

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
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    MatMul(Var, Var),
    AddRowBias(Var, Var),
    AddChannel(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
        batch: usize,
        filters: usize,
    },
    Relu(Var),
    Silu(Var),
    Sum(Var),
    Mean(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Gather(Var, Vec<usize>),
    Reshape(Var),
    Upsample2x(Var),
    ConcatChannels(Var, Var),
}

/// One recorded value: its tensor, how it was produced, and whether a
/// gradient flows into it.
#[derive(Debug)]
pub struct DiffNode {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

impl DiffNode {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<DiffNode>,
}

/// Gradient accumulators produced by [`Tape::backward`], indexed by [`Var`].
/// Each gradient has the shape of its node's value.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    /// Gradient of `v`, or zeros of `like`'s shape if nothing reached it.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, v: Var) -> &DiffNode {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(DiffNode {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).mul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).add_scalar(c);
        let rg = self.rg(a);
        self.push(v, Op::AddScalar(a), rg)
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).scale(c);
        let rg = self.rg(a);
        self.push(v, Op::MulScalar(a, c), rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.mul_scalar(a, -1.0)
    }

    /// `c_a * a + c_b * b`.
    pub fn affine2(&mut self, a: Var, c_a: f64, b: Var, c_b: f64) -> Result<Var> {
        let sa = self.mul_scalar(a, c_a);
        let sb = self.mul_scalar(b, c_b);
        self.add(sa, sb)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::MatMul(a, b), rg))
    }

    /// `x[B, N] + b[N]` broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        if xv.rank() != 2 || bv.rank() != 1 || xv.shape()[1] != bv.shape()[0] {
            return Err(mismatch("add_row_bias", xv, bv));
        }
        let n = bv.len();
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, &bb) in row.iter_mut().zip(bv.data()) {
                *o += bb;
            }
        }
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(out, Op::AddRowBias(x, b), rg))
    }

    /// Dense layer `x[B, in] · w[in, out] + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = self.matmul(x, w)?;
        self.add_row_bias(h, b)
    }

    /// `x[B, C, ...] + b` where `b` is `[C]` (shared) or `[B, C]` (per item),
    /// broadcast over the trailing spatial extents.
    pub fn add_channel(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        if xv.rank() < 2 {
            return Err(mismatch("add_channel", xv, bv));
        }
        let (bsz, ch) = (xv.shape()[0], xv.shape()[1]);
        let per_item = match bv.shape() {
            [c] if *c == ch => false,
            [bb, c] if *bb == bsz && *c == ch => true,
            _ => return Err(mismatch("add_channel", xv, bv)),
        };
        let spatial = xv.len() / (bsz * ch);
        let mut out = xv.clone();
        for (i, plane) in out.data_mut().chunks_mut(spatial).enumerate() {
            let (bi, ci) = (i / ch, i % ch);
            let add = if per_item {
                bv.data()[bi * ch + ci]
            } else {
                bv.data()[ci]
            };
            for o in plane {
                *o += add;
            }
        }
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(out, Op::AddChannel(x, b), rg))
    }

    /// Cross-correlation of `x[B, C, H, W]` with `w[F, C, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if xv.rank() != 4 || wv.rank() != 4 || xv.shape()[1] != wv.shape()[1] {
            return Err(mismatch("conv2d", xv, wv));
        }
        if stride == 0 {
            return Err(Error::config("conv2d stride must be positive"));
        }
        let (b, c, h, wd) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let (f, kh, kw) = (wv.shape()[0], wv.shape()[2], wv.shape()[3]);
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::config(format!(
                "conv2d: padded input {}x{} smaller than kernel {kh}x{kw}",
                h + 2 * pad,
                wd + 2 * pad
            )));
        }
        let geom = ConvGeom {
            channels: c,
            height: h,
            width: wd,
            kh,
            kw,
            stride,
            pad,
            out_h: (h + 2 * pad - kh) / stride + 1,
            out_w: (wd + 2 * pad - kw) / stride + 1,
        };
        let (kl, p) = (geom.patch_len(), geom.positions());
        let mut cols = vec![0.0; kl * p];
        let mut out = vec![0.0; b * f * p];
        let img_len = c * h * wd;
        for bi in 0..b {
            kernels::im2col(&geom, &xv.data()[bi * img_len..(bi + 1) * img_len], &mut cols);
            kernels::gemm(
                f,
                kl,
                p,
                1.0,
                wv.data(),
                (kl as isize, 1),
                &cols,
                (p as isize, 1),
                0.0,
                &mut out[bi * f * p..(bi + 1) * f * p],
            );
        }
        let value = Tensor::from_raw(vec![b, f, geom.out_h, geom.out_w], out);
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                w,
                geom,
                batch: b,
                filters: f,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(v, Op::Relu(a), rg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * sigmoid(x));
        let rg = self.rg(a);
        self.push(v, Op::Silu(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(v, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).mean());
        let rg = self.rg(a);
        self.push(v, Op::Mean(a), rg)
    }

    fn expect_rows(&self, a: Var, op: &'static str) -> Result<usize> {
        let v = self.value(a);
        if v.rank() != 2 {
            return Err(Error::InvalidShape {
                shape: v.shape().to_vec(),
                reason: format!("{op} expects [B, K]"),
            });
        }
        Ok(v.shape()[1])
    }

    /// Row-wise softmax of `[B, K]`.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let k = self.expect_rows(a, "softmax")?;
        let mut out = self.value(a).clone();
        let src = self.value(a).data().to_vec();
        for (row, o) in src.chunks(k).zip(out.data_mut().chunks_mut(k)) {
            kernels::log_softmax_row(row, o);
            for v in o.iter_mut() {
                *v = v.exp();
            }
        }
        let rg = self.rg(a);
        Ok(self.push(out, Op::Softmax(a), rg))
    }

    /// Row-wise log-softmax of `[B, K]`.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let k = self.expect_rows(a, "log_softmax")?;
        let mut out = self.value(a).clone();
        let src = self.value(a).data().to_vec();
        for (row, o) in src.chunks(k).zip(out.data_mut().chunks_mut(k)) {
            kernels::log_softmax_row(row, o);
        }
        let rg = self.rg(a);
        Ok(self.push(out, Op::LogSoftmax(a), rg))
    }

    /// Picks `a[b, idx[b]]` from a `[B, K]` tensor, giving `[B]`.
    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let k = self.expect_rows(a, "gather")?;
        let av = self.value(a);
        let b = av.shape()[0];
        if idx.len() != b {
            return Err(Error::ShapeMismatch {
                op: "gather",
                lhs: av.shape().to_vec(),
                rhs: vec![idx.len()],
            });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= k) {
            return Err(Error::IndexOutOfRange {
                op: "gather",
                index: bad,
                extent: k,
            });
        }
        let data = idx
            .iter()
            .enumerate()
            .map(|(r, &i)| av.data()[r * k + i])
            .collect();
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::from_raw(vec![b], data),
            Op::Gather(a, idx.to_vec()),
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(v, Op::Reshape(a), rg))
    }

    /// Flattens `[B, ...]` to `[B, N]`.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let b = v.batch_len();
        let n = v.len() / b;
        self.reshape(a, &[b, n])
    }

    /// Nearest-neighbour 2x upsampling of `[B, C, H, W]`.
    pub fn upsample2x(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.rank() != 4 {
            return Err(Error::InvalidShape {
                shape: av.shape().to_vec(),
                reason: "upsample2x expects [B, C, H, W]".into(),
            });
        }
        let (b, c, h, w) = (av.shape()[0], av.shape()[1], av.shape()[2], av.shape()[3]);
        let mut out = vec![0.0; b * c * 4 * h * w];
        for (plane, src) in av.data().chunks(h * w).enumerate() {
            let dst = &mut out[plane * 4 * h * w..(plane + 1) * 4 * h * w];
            for y in 0..2 * h {
                for x in 0..2 * w {
                    dst[y * 2 * w + x] = src[(y / 2) * w + x / 2];
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::from_raw(vec![b, c, 2 * h, 2 * w], out),
            Op::Upsample2x(a),
            rg,
        ))
    }

    /// Concatenates `[B, C1, H, W]` and `[B, C2, H, W]` along channels.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 4
            || bv.rank() != 4
            || av.shape()[0] != bv.shape()[0]
            || av.shape()[2..] != bv.shape()[2..]
        {
            return Err(mismatch("concat_channels", av, bv));
        }
        let bsz = av.shape()[0];
        let (la, lb) = (av.item_len(), bv.item_len());
        let mut out = Vec::with_capacity(av.len() + bv.len());
        for i in 0..bsz {
            out.extend_from_slice(&av.data()[i * la..(i + 1) * la]);
            out.extend_from_slice(&bv.data()[i * lb..(i + 1) * lb]);
        }
        let shape = vec![
            bsz,
            av.shape()[1] + bv.shape()[1],
            av.shape()[2],
            av.shape()[3],
        ];
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_raw(shape, out), Op::ConcatChannels(a, b), rg))
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if !rv.is_scalar() {
            return Err(Error::NonScalarRoot(rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::ones(rv.shape()));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, contrib: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, c) in acc.data_mut().iter_mut().zip(contrib.data()) {
                    *a += c;
                }
            }
            slot => *slot = Some(contrib),
        }
    }

    fn propagate(&self, node: &DiffNode, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.mul(self.value(*b))?);
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, g.mul(self.value(*a))?);
                }
            }
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::MulScalar(a, c) => self.accumulate(grads, *a, g.scale(*c)),
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.rg(*a) {
                    // dA = G · B^T
                    let mut da = vec![0.0; m * k];
                    kernels::gemm(
                        m,
                        n,
                        k,
                        1.0,
                        g.data(),
                        (n as isize, 1),
                        bv.data(),
                        (1, n as isize),
                        0.0,
                        &mut da,
                    );
                    self.accumulate(grads, *a, Tensor::from_raw(vec![m, k], da));
                }
                if self.rg(*b) {
                    // dB = A^T · G
                    let mut db = vec![0.0; k * n];
                    kernels::gemm(
                        k,
                        m,
                        n,
                        1.0,
                        av.data(),
                        (1, k as isize),
                        g.data(),
                        (n as isize, 1),
                        0.0,
                        &mut db,
                    );
                    self.accumulate(grads, *b, Tensor::from_raw(vec![k, n], db));
                }
            }
            Op::AddRowBias(x, b) => {
                self.accumulate(grads, *x, g.clone());
                if self.rg(*b) {
                    let n = self.value(*b).len();
                    let mut db = vec![0.0; n];
                    for row in g.data().chunks(n) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::from_raw(vec![n], db));
                }
            }
            Op::AddChannel(x, b) => {
                self.accumulate(grads, *x, g.clone());
                if self.rg(*b) {
                    let xs = self.value(*x).shape();
                    let (bsz, ch) = (xs[0], xs[1]);
                    let bshape = self.value(*b).shape().to_vec();
                    let per_item = bshape.len() == 2;
                    let spatial = g.len() / (bsz * ch);
                    let mut db = vec![0.0; if per_item { bsz * ch } else { ch }];
                    for (i, plane) in g.data().chunks(spatial).enumerate() {
                        let slot = if per_item { i } else { i % ch };
                        db[slot] += plane.iter().sum::<f64>();
                    }
                    self.accumulate(grads, *b, Tensor::from_raw(bshape, db));
                }
            }
            Op::Conv2d {
                x,
                w,
                geom,
                batch,
                filters,
            } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (kl, p, f) = (geom.patch_len(), geom.positions(), *filters);
                let img_len = geom.channels * geom.height * geom.width;
                let mut cols = vec![0.0; kl * p];
                let mut dw = if self.rg(*w) {
                    Some(vec![0.0; f * kl])
                } else {
                    None
                };
                let mut dx = if self.rg(*x) {
                    Some((vec![0.0; batch * img_len], vec![0.0; kl * p]))
                } else {
                    None
                };
                for bi in 0..*batch {
                    let gb = &g.data()[bi * f * p..(bi + 1) * f * p];
                    if let Some(dw) = dw.as_mut() {
                        kernels::im2col(
                            geom,
                            &xv.data()[bi * img_len..(bi + 1) * img_len],
                            &mut cols,
                        );
                        // dW += G_b · cols^T
                        kernels::gemm(
                            f,
                            p,
                            kl,
                            1.0,
                            gb,
                            (p as isize, 1),
                            &cols,
                            (1, p as isize),
                            1.0,
                            dw,
                        );
                    }
                    if let Some((dx, dcols)) = dx.as_mut() {
                        // dcols = W^T · G_b
                        kernels::gemm(
                            kl,
                            f,
                            p,
                            1.0,
                            wv.data(),
                            (1, kl as isize),
                            gb,
                            (p as isize, 1),
                            0.0,
                            dcols,
                        );
                        kernels::col2im_add(
                            geom,
                            dcols,
                            &mut dx[bi * img_len..(bi + 1) * img_len],
                        );
                    }
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, *w, Tensor::from_raw(wv.shape().to_vec(), dw));
                }
                if let Some((dx, _)) = dx {
                    self.accumulate(grads, *x, Tensor::from_raw(xv.shape().to_vec(), dx));
                }
            }
            Op::Relu(a) => {
                let d = self
                    .value(*a)
                    .zip_map(g, |x, gv| if x > 0.0 { gv } else { 0.0 })?;
                self.accumulate(grads, *a, d);
            }
            Op::Silu(a) => {
                let d = self.value(*a).zip_map(g, |x, gv| {
                    let s = sigmoid(x);
                    gv * s * (1.0 + x * (1.0 - s))
                })?;
                self.accumulate(grads, *a, d);
            }
            Op::Sum(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, Tensor::full(&shape, g.item()));
            }
            Op::Mean(a) => {
                let av = self.value(*a);
                let c = g.item() / av.len() as f64;
                self.accumulate(grads, *a, Tensor::full(av.shape(), c));
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let k = y.shape()[1];
                let mut d = vec![0.0; y.len()];
                for ((yr, gr), dr) in y.data().chunks(k).zip(g.data().chunks(k)).zip(d.chunks_mut(k)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, &yy), &gg) in dr.iter_mut().zip(yr).zip(gr) {
                        *o = yy * (gg - dot);
                    }
                }
                self.accumulate(grads, *a, Tensor::from_raw(y.shape().to_vec(), d));
            }
            Op::LogSoftmax(a) => {
                let y = &node.value;
                let k = y.shape()[1];
                let mut d = vec![0.0; y.len()];
                for ((yr, gr), dr) in y.data().chunks(k).zip(g.data().chunks(k)).zip(d.chunks_mut(k)) {
                    let gs: f64 = gr.iter().sum();
                    for ((o, &yy), &gg) in dr.iter_mut().zip(yr).zip(gr) {
                        *o = gg - yy.exp() * gs;
                    }
                }
                self.accumulate(grads, *a, Tensor::from_raw(y.shape().to_vec(), d));
            }
            Op::Gather(a, idx) => {
                let av = self.value(*a);
                let k = av.shape()[1];
                let mut d = vec![0.0; av.len()];
                for (r, &i) in idx.iter().enumerate() {
                    d[r * k + i] += g.data()[r];
                }
                self.accumulate(grads, *a, Tensor::from_raw(av.shape().to_vec(), d));
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, g.reshape(&shape)?);
            }
            Op::Upsample2x(a) => {
                let av = self.value(*a);
                let (h, w) = (av.shape()[2], av.shape()[3]);
                let mut d = vec![0.0; av.len()];
                for (plane, src) in g.data().chunks(4 * h * w).enumerate() {
                    let dst = &mut d[plane * h * w..(plane + 1) * h * w];
                    for y in 0..2 * h {
                        for x in 0..2 * w {
                            dst[(y / 2) * w + x / 2] += src[y * 2 * w + x];
                        }
                    }
                }
                self.accumulate(grads, *a, Tensor::from_raw(av.shape().to_vec(), d));
            }
            Op::ConcatChannels(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (la, lb) = (av.item_len(), bv.item_len());
                let bsz = av.batch_len();
                let mut da = Vec::with_capacity(av.len());
                let mut db = Vec::with_capacity(bv.len());
                for i in 0..bsz {
                    let item = &g.data()[i * (la + lb)..(i + 1) * (la + lb)];
                    da.extend_from_slice(&item[..la]);
                    db.extend_from_slice(&item[la..]);
                }
                self.accumulate(grads, *a, Tensor::from_raw(av.shape().to_vec(), da));
                self.accumulate(grads, *b, Tensor::from_raw(bv.shape().to_vec(), db));
            }
        }
        Ok(())
    }
}
