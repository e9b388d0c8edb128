//! A small tape-based reverse-mode differentiator.
//!
//! Nodes are appended in evaluation order, so reversing the tape is a valid
//! topological order for the backward sweep. Leaves created with
//! [`Graph::constant`] never receive gradients, which is how gradient
//! isolation (teacher outputs, frozen parameter sets) is expressed.

use crate::error::{Error, Result};
use crate::tensor::{gemm, Mat, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, T, T),
    Silu(Var),
    Relu(Var),
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    AddChannel(Var, Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Upsample2x(Var),
    ConcatChannels(Var, Var),
    GlobalAvgPool(Var),
    RowSum(Var),
    Mean(Var),
    WeightedMse { a: Var, b: Var, w: Vec<T> },
    LinComb { x: Var, y: Var, a: Vec<T>, b: Vec<T> },
    Gather { table: Var, idx: Vec<usize> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn shape_err(msg: String) -> Error {
    Error::Shape(msg)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Differentiable leaf.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copies a node's value into a new constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    fn same_shape(&self, a: Var, b: Var) -> Result<()> {
        self.value(a).expect_same_shape(self.value(b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Mul(a, b), ng))
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let v = self.value(x).map(|e| scale * e + shift);
        let ng = self.ng(x);
        self.push(v, Op::Affine(x, scale, shift), ng)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        self.affine(x, c, T::zero())
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| e * sigmoid(e));
        let ng = self.ng(x);
        self.push(v, Op::Silu(x), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| e.max(T::zero()));
        let ng = self.ng(x);
        self.push(v, Op::Relu(x), ng)
    }

    /// Zero-padded 2D convolution; weight is `[out, in, k, k]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (n, c, h, wd) = self.value(x).dims4()?;
        let (co, ci, kh, kw) = self.value(w).dims4()?;
        if ci != c || kh != kw || stride == 0 {
            return Err(shape_err(format!(
                "conv2d: input {:?} incompatible with weight {:?}",
                self.value(x).shape(),
                self.value(w).shape()
            )));
        }
        if let Some(b) = b {
            if self.value(b).numel() != co {
                return Err(shape_err("conv2d: bias length".into()));
            }
        }
        let geo = ConvGeom::new(c, h, wd, kh, stride, pad)?;
        let mut out = vec![T::zero(); n * co * geo.ho * geo.wo];
        let mut cols = vec![T::zero(); geo.col_len()];
        let wv = self.value(w).data();
        let xv = self.value(x).data();
        let per_in = c * h * wd;
        let per_out = co * geo.ho * geo.wo;
        for s in 0..n {
            let xs = &xv[s * per_in..(s + 1) * per_in];
            let colref: &[T] = if geo.is_pointwise() {
                xs
            } else {
                geo.im2col(xs, &mut cols);
                &cols
            };
            gemm(
                Mat::new(wv, co, geo.k_len()),
                Mat::new(colref, geo.k_len(), geo.ho * geo.wo),
                &mut out[s * per_out..(s + 1) * per_out],
                false,
            );
        }
        if let Some(b) = b {
            let bv = self.value(b).data();
            let hw = geo.ho * geo.wo;
            for (i, chunk) in out.chunks_mut(hw).enumerate() {
                let bias = bv[i % co];
                chunk.iter_mut().for_each(|e| *e += bias);
            }
        }
        let value = Tensor::from_vec([n, co, geo.ho, geo.wo], out)?;
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(value, Op::Conv2d { x, w, b, stride, pad }, ng))
    }

    /// `x[n, c, :, :] + e[n, c]`.
    pub fn add_channel(&mut self, x: Var, e: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if self.value(e).shape() != [n, c] {
            return Err(shape_err(format!(
                "add_channel: {:?} vs {:?}",
                self.value(x).shape(),
                self.value(e).shape()
            )));
        }
        let mut v = self.value(x).clone();
        let ev = self.value(e).data().to_vec();
        for (i, chunk) in v.data_mut().chunks_mut(h * w).enumerate() {
            let add = ev[i];
            chunk.iter_mut().for_each(|z| *z += add);
        }
        let ng = self.ng(x) || self.ng(e);
        Ok(self.push(v, Op::AddChannel(x, e), ng))
    }

    /// `x · wᵀ + b` with `x: [N, in]`, `w: [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(shape_err(format!("linear: {xs:?} vs {ws:?}")));
        }
        let (n, i, o) = (xs[0], xs[1], ws[0]);
        let mut out = vec![T::zero(); n * o];
        gemm(
            Mat::new(self.value(x).data(), n, i),
            Mat::new(self.value(w).data(), o, i).t(),
            &mut out,
            false,
        );
        if let Some(b) = b {
            let bv = self.value(b).data();
            if bv.len() != o {
                return Err(shape_err("linear: bias length".into()));
            }
            for row in out.chunks_mut(o) {
                for (z, &bb) in row.iter_mut().zip(bv) {
                    *z += bb;
                }
            }
        }
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        let value = Tensor::from_vec([n, o], out)?;
        Ok(self.push(value, Op::Linear { x, w, b }, ng))
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); n * c * 4 * h * w];
        for p in 0..n * c {
            let src = &xv[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
            for i in 0..2 * h {
                for j in 0..2 * w {
                    dst[i * 2 * w + j] = src[(i / 2) * w + j / 2];
                }
            }
        }
        let ng = self.ng(x);
        let value = Tensor::from_vec([n, c, 2 * h, 2 * w], out)?;
        Ok(self.push(value, Op::Upsample2x(x), ng))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, ca, h, w) = self.value(a).dims4()?;
        let (n2, cb, h2, w2) = self.value(b).dims4()?;
        if (n, h, w) != (n2, h2, w2) {
            return Err(shape_err(format!(
                "concat: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = Vec::with_capacity(n * (ca + cb) * h * w);
        for s in 0..n {
            out.extend_from_slice(self.value(a).sample(s));
            out.extend_from_slice(self.value(b).sample(s));
        }
        let ng = self.ng(a) || self.ng(b);
        let value = Tensor::from_vec([n, ca + cb, h, w], out)?;
        Ok(self.push(value, Op::ConcatChannels(a, b), ng))
    }

    /// `[N, C, H, W] -> [N, C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let inv = T::one() / T::from_usize(h * w).unwrap();
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks(h * w)
            .map(|ch| ch.iter().copied().sum::<T>() * inv)
            .collect();
        let ng = self.ng(x);
        let value = Tensor::from_vec([n, c], out)?;
        Ok(self.push(value, Op::GlobalAvgPool(x), ng))
    }

    /// `[N, C] -> [N, 1]`.
    pub fn row_sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 2 {
            return Err(shape_err(format!("row_sum expects rank 2, got {s:?}")));
        }
        let out: Vec<T> = self.value(x).data().chunks(s[1]).map(|r| r.iter().copied().sum()).collect();
        let ng = self.ng(x);
        let value = Tensor::from_vec([s[0], 1], out)?;
        Ok(self.push(value, Op::RowSum(x), ng))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let m = self.value(x).mean();
        let ng = self.ng(x);
        self.push(Tensor::scalar(m), Op::Mean(x), ng)
    }

    /// `(1/N) Σₙ wₙ · mean((aₙ − bₙ)²)` over the leading batch axis.
    pub fn weighted_mse(&mut self, a: Var, b: Var, w: Vec<T>) -> Result<Var> {
        self.same_shape(a, b)?;
        let n = self.value(a).shape()[0];
        if w.len() != n {
            return Err(shape_err(format!("weighted_mse: {} weights for batch {n}", w.len())));
        }
        let per = self.value(a).numel() / n.max(1);
        let inv_m = T::one() / T::from_usize(per.max(1)).unwrap();
        let mut total = T::zero();
        for (s, &ws) in w.iter().enumerate() {
            let sq: T = self
                .value(a)
                .sample(s)
                .iter()
                .zip(self.value(b).sample(s))
                .map(|(&x, &y)| (x - y) * (x - y))
                .sum();
            total += ws * sq * inv_m;
        }
        total = total / T::from_usize(n.max(1)).unwrap();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::scalar(total), Op::WeightedMse { a, b, w }, ng))
    }

    /// Per-sample linear combination `aₙ·x + bₙ·y`.
    pub fn lin_comb(&mut self, x: Var, y: Var, a: Vec<T>, b: Vec<T>) -> Result<Var> {
        self.same_shape(x, y)?;
        let n = self.value(x).shape()[0];
        if a.len() != n || b.len() != n {
            return Err(shape_err("lin_comb: coefficient count must equal batch".into()));
        }
        let mut out = self.value(x).clone();
        for s in 0..n {
            let ys = self.value(y).sample(s).to_vec();
            for (o, yv) in out.sample_mut(s).iter_mut().zip(ys) {
                *o = a[s] * *o + b[s] * yv;
            }
        }
        let ng = self.ng(x) || self.ng(y);
        Ok(self.push(out, Op::LinComb { x, y, a, b }, ng))
    }

    /// Row lookup into an embedding table `[K, E]`.
    pub fn gather(&mut self, table: Var, idx: Vec<usize>) -> Result<Var> {
        let s = self.value(table).shape().to_vec();
        if s.len() != 2 || idx.iter().any(|&i| i >= s[0]) {
            return Err(shape_err(format!("gather: index out of range for table {s:?}")));
        }
        let e = s[1];
        let mut out = Vec::with_capacity(idx.len() * e);
        for &i in &idx {
            out.extend_from_slice(&self.value(table).data()[i * e..(i + 1) * e]);
        }
        let ng = self.ng(table);
        let value = Tensor::from_vec([idx.len(), e], out)?;
        Ok(self.push(value, Op::Gather { table, idx }, ng))
    }

    /// Reverse sweep from a scalar output (seeded with gradient 1).
    pub fn backward(&self, out: Var) -> Result<Grads<T>> {
        if self.value(out).numel() != 1 {
            return Err(shape_err("backward needs a scalar output".into()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Tensor::full(self.value(out).shape().to_vec(), T::one()));
        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gy) = grads[idx].take() else { continue };
            self.backprop(node, &gy, &mut grads)?;
            // Keep the output gradient around for inspection only at leaves.
            grads[idx] = None;
        }
        // Only leaf gradients are meaningful to callers.
        for (i, n) in self.nodes.iter().enumerate() {
            if !matches!(n.op, Op::Leaf) || !n.needs_grad {
                grads[i] = None;
            }
        }
        Ok(Grads { grads })
    }

    fn backprop(&self, node: &Node<T>, gy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let mut acc = |v: Var, g: Tensor<T>| {
            if !self.ng(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, gy.clone());
                acc(*b, gy.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, gy.clone());
                acc(*b, gy.scale(-T::one()));
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    acc(*a, gy.zip_map(self.value(*b), |g, y| g * y)?);
                }
                if self.ng(*b) {
                    acc(*b, gy.zip_map(self.value(*a), |g, x| g * x)?);
                }
            }
            Op::Affine(x, scale, _) => acc(*x, gy.scale(*scale)),
            Op::Silu(x) => {
                let g = gy.zip_map(self.value(*x), |g, x| {
                    let s = sigmoid(x);
                    g * s * (T::one() + x * (T::one() - s))
                })?;
                acc(*x, g);
            }
            Op::Relu(x) => {
                let g = gy.zip_map(self.value(*x), |g, x| if x > T::zero() { g } else { T::zero() })?;
                acc(*x, g);
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let (n, c, h, wd) = self.value(*x).dims4()?;
                let (co, _, k, _) = self.value(*w).dims4()?;
                let geo = ConvGeom::new(c, h, wd, k, *stride, *pad)?;
                let hw = geo.ho * geo.wo;
                let gyv = gy.data();
                if let Some(b) = b {
                    if self.ng(*b) {
                        let mut gb = vec![T::zero(); co];
                        for (i, chunk) in gyv.chunks(hw).enumerate() {
                            gb[i % co] += chunk.iter().copied().sum::<T>();
                        }
                        acc(*b, Tensor::from_vec([co], gb)?);
                    }
                }
                let need_w = self.ng(*w);
                let need_x = self.ng(*x);
                let mut gw = vec![T::zero(); co * geo.k_len()];
                let mut gx = if need_x { vec![T::zero(); n * c * h * wd] } else { Vec::new() };
                let mut cols = vec![T::zero(); geo.col_len()];
                let mut gcols = vec![T::zero(); geo.col_len()];
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let per_in = c * h * wd;
                for s in 0..n {
                    let gys = &gyv[s * co * hw..(s + 1) * co * hw];
                    let xs = &xv[s * per_in..(s + 1) * per_in];
                    if need_w {
                        let colref: &[T] = if geo.is_pointwise() {
                            xs
                        } else {
                            geo.im2col(xs, &mut cols);
                            &cols
                        };
                        gemm(
                            Mat::new(gys, co, hw),
                            Mat::new(colref, geo.k_len(), hw).t(),
                            &mut gw,
                            true,
                        );
                    }
                    if need_x {
                        let gxs = &mut gx[s * per_in..(s + 1) * per_in];
                        if geo.is_pointwise() {
                            gemm(Mat::new(wv, co, geo.k_len()).t(), Mat::new(gys, co, hw), gxs, false);
                        } else {
                            gemm(
                                Mat::new(wv, co, geo.k_len()).t(),
                                Mat::new(gys, co, hw),
                                &mut gcols,
                                false,
                            );
                            geo.col2im(&gcols, gxs);
                        }
                    }
                }
                if need_w {
                    acc(*w, Tensor::from_vec(self.value(*w).shape().to_vec(), gw)?);
                }
                if need_x {
                    acc(*x, Tensor::from_vec([n, c, h, wd], gx)?);
                }
            }
            Op::AddChannel(x, e) => {
                acc(*x, gy.clone());
                if self.ng(*e) {
                    let (_, _, h, w) = gy.dims4()?;
                    let sums: Vec<T> = gy.data().chunks(h * w).map(|c| c.iter().copied().sum()).collect();
                    acc(*e, Tensor::from_vec(self.value(*e).shape().to_vec(), sums)?);
                }
            }
            Op::Linear { x, w, b } => {
                let xs = self.value(*x).shape();
                let (n, i) = (xs[0], xs[1]);
                let o = self.value(*w).shape()[0];
                if self.ng(*x) {
                    let mut gx = vec![T::zero(); n * i];
                    gemm(Mat::new(gy.data(), n, o), Mat::new(self.value(*w).data(), o, i), &mut gx, false);
                    acc(*x, Tensor::from_vec([n, i], gx)?);
                }
                if self.ng(*w) {
                    let mut gw = vec![T::zero(); o * i];
                    gemm(
                        Mat::new(gy.data(), n, o).t(),
                        Mat::new(self.value(*x).data(), n, i),
                        &mut gw,
                        false,
                    );
                    acc(*w, Tensor::from_vec([o, i], gw)?);
                }
                if let Some(b) = b {
                    if self.ng(*b) {
                        let mut gb = vec![T::zero(); o];
                        for row in gy.data().chunks(o) {
                            for (acc_b, &g) in gb.iter_mut().zip(row) {
                                *acc_b += g;
                            }
                        }
                        acc(*b, Tensor::from_vec([o], gb)?);
                    }
                }
            }
            Op::Upsample2x(x) => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let mut gx = vec![T::zero(); n * c * h * w];
                let gyv = gy.data();
                for p in 0..n * c {
                    let src = &gyv[p * 4 * h * w..(p + 1) * 4 * h * w];
                    let dst = &mut gx[p * h * w..(p + 1) * h * w];
                    for i in 0..2 * h {
                        for j in 0..2 * w {
                            dst[(i / 2) * w + j / 2] += src[i * 2 * w + j];
                        }
                    }
                }
                acc(*x, Tensor::from_vec([n, c, h, w], gx)?);
            }
            Op::ConcatChannels(a, b) => {
                let (n, ca, h, w) = self.value(*a).dims4()?;
                let cb = self.value(*b).shape()[1];
                let mut ga = Vec::with_capacity(n * ca * h * w);
                let mut gb = Vec::with_capacity(n * cb * h * w);
                for s in 0..n {
                    let chunk = gy.sample(s);
                    ga.extend_from_slice(&chunk[..ca * h * w]);
                    gb.extend_from_slice(&chunk[ca * h * w..]);
                }
                acc(*a, Tensor::from_vec([n, ca, h, w], ga)?);
                acc(*b, Tensor::from_vec([n, cb, h, w], gb)?);
            }
            Op::GlobalAvgPool(x) => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let inv = T::one() / T::from_usize(h * w).unwrap();
                let mut gx = Vec::with_capacity(n * c * h * w);
                for &g in gy.data() {
                    gx.extend(std::iter::repeat_n(g * inv, h * w));
                }
                acc(*x, Tensor::from_vec([n, c, h, w], gx)?);
            }
            Op::RowSum(x) => {
                let s = self.value(*x).shape();
                let mut gx = Vec::with_capacity(s[0] * s[1]);
                for &g in gy.data() {
                    gx.extend(std::iter::repeat_n(g, s[1]));
                }
                acc(*x, Tensor::from_vec(s.to_vec(), gx)?);
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                let g = gy.data()[0] / T::from_usize(n.max(1)).unwrap();
                acc(*x, Tensor::full(self.value(*x).shape().to_vec(), g));
            }
            Op::WeightedMse { a, b, w } => {
                let av = self.value(*a);
                let n = av.shape()[0];
                let per = av.numel() / n.max(1);
                let two = T::lit(2.0);
                let base = gy.data()[0] * two / T::from_usize(n * per).unwrap();
                let mut ga = av.clone();
                for s in 0..n {
                    let bs = self.value(*b).sample(s).to_vec();
                    for (o, bv) in ga.sample_mut(s).iter_mut().zip(bs) {
                        *o = base * w[s] * (*o - bv);
                    }
                }
                if self.ng(*b) {
                    acc(*b, ga.scale(-T::one()));
                }
                acc(*a, ga);
            }
            Op::LinComb { x, y, a, b } => {
                let n = gy.shape()[0];
                if self.ng(*x) {
                    let mut gx = gy.clone();
                    for s in 0..n {
                        gx.sample_mut(s).iter_mut().for_each(|g| *g *= a[s]);
                    }
                    acc(*x, gx);
                }
                if self.ng(*y) {
                    let mut gyy = gy.clone();
                    for s in 0..n {
                        gyy.sample_mut(s).iter_mut().for_each(|g| *g *= b[s]);
                    }
                    acc(*y, gyy);
                }
            }
            Op::Gather { table, idx } => {
                let s = self.value(*table).shape();
                let e = s[1];
                let mut gt = Tensor::zeros(s.to_vec());
                for (row, &i) in idx.iter().enumerate() {
                    let src = &gy.data()[row * e..(row + 1) * e];
                    for (d, &g) in gt.data_mut()[i * e..(i + 1) * e].iter_mut().zip(src) {
                        *d += g;
                    }
                }
                acc(*table, gt);
            }
        }
        Ok(())
    }
}

/// Geometry of a square-kernel convolution over one sample.
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Result<Self> {
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(shape_err(format!("conv2d: {h}x{w} input smaller than {k}x{k} kernel")));
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        Ok(Self { c, h, w, k, stride, pad, ho, wo })
    }

    fn k_len(&self) -> usize {
        self.c * self.k * self.k
    }

    fn col_len(&self) -> usize {
        self.k_len() * self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn im2col<T: Scalar>(&self, x: &[T], cols: &mut [T]) {
        let hw = self.ho * self.wo;
        for ci in 0..self.c {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ci * self.k + ky) * self.k + kx;
                    let dst = &mut cols[row * hw..(row + 1) * hw];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let drow = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize {
                            drow.iter_mut().for_each(|v| *v = T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            *d = if ix < 0 || ix >= self.w as isize { T::zero() } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, cols: &[T], x: &mut [T]) {
        let hw = self.ho * self.wo;
        for ci in 0..self.c {
            let plane = &mut x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ci * self.k + ky) * self.k + kx;
                    let src = &cols[row * hw..(row + 1) * hw];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let prow = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                prow[ix as usize] += src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Central differences on every element of every leaf, in f64.
    fn check(build: impl Fn(&mut Graph<f64>, &[Var]) -> Var, inputs: Vec<Tensor<f64>>) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = build(&mut g, &vars);
        let grads = g.backward(out).unwrap();
        let h = 1e-6;
        for (k, input) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[k]).expect("leaf gradient");
            for i in 0..input.numel() {
                let eval = |delta: f64| {
                    let mut g2 = Graph::new();
                    let vs: Vec<Var> = inputs
                        .iter()
                        .enumerate()
                        .map(|(j, t)| {
                            let mut t = t.clone();
                            if j == k {
                                t.data_mut()[i] += delta;
                            }
                            g2.leaf(t)
                        })
                        .collect();
                    let o = build(&mut g2, &vs);
                    g2.value(o).data()[0]
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let a = analytic.data()[i];
                assert!(
                    (a - fd).abs() <= 1e-6 * (1.0 + fd.abs()),
                    "input {k} elem {i}: analytic {a} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn conv_stride_pad_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (stride, pad, k) in [(1, 1, 3), (2, 1, 3), (1, 0, 1)] {
            let x = rand_tensor(&mut rng, &[2, 2, 5, 6]);
            let w = rand_tensor(&mut rng, &[3, 2, k, k]);
            let b = rand_tensor(&mut rng, &[3]);
            check(
                |g, v| {
                    let y = g.conv2d(v[0], v[1], Some(v[2]), stride, pad).unwrap();
                    let y = g.silu(y);
                    let yy = g.mul(y, y).unwrap();
                    g.mean(yy)
                },
                vec![x, w, b],
            );
        }
    }

    #[test]
    fn structural_op_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&mut rng, &[2, 2, 3, 3]);
        let skip = rand_tensor(&mut rng, &[2, 1, 6, 6]);
        let e = rand_tensor(&mut rng, &[2, 2]);
        check(
            |g, v| {
                let a = g.add_channel(v[0], v[2]).unwrap();
                let u = g.upsample2x(a).unwrap();
                let c = g.concat_channels(u, v[1]).unwrap();
                let p = g.global_avg_pool(c).unwrap();
                let q = g.mul(p, p).unwrap();
                let r = g.row_sum(q).unwrap();
                g.mean(r)
            },
            vec![x, skip, e],
        );
    }

    #[test]
    fn dense_and_loss_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, &[3, 4]);
        let w = rand_tensor(&mut rng, &[2, 4]);
        let b = rand_tensor(&mut rng, &[2]);
        let t = rand_tensor(&mut rng, &[3, 2]);
        let table = rand_tensor(&mut rng, &[5, 2]);
        check(
            |g, v| {
                let y = g.linear(v[0], v[1], Some(v[2])).unwrap();
                let e = g.gather(v[4], vec![4, 0, 4]).unwrap();
                let y = g.add(y, e).unwrap();
                let z = g.lin_comb(y, v[3], vec![0.5, -1.0, 2.0], vec![1.5, 0.25, -0.75]).unwrap();
                let d = g.sub(z, v[3]).unwrap();
                let d = g.affine(d, 0.7, 0.1);
                g.weighted_mse(d, v[3], vec![1.0, 2.0, 0.5]).unwrap()
            },
            vec![x, w, b, t, table],
        );
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f32>::new();
        let a = g.leaf(Tensor::scalar(2.0));
        let c = g.constant(Tensor::scalar(3.0));
        let d = g.detach(a);
        let m = g.mul(a, c).unwrap();
        let m2 = g.mul(m, d).unwrap();
        let grads = g.backward(m2).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[6.0]);
        assert!(grads.get(c).is_none());
        assert!(grads.get(d).is_none());
        assert!(!g.needs_grad(d));
    }
}
