//! A small reverse-mode autodiff tape over [`Tensor`]s.
//!
//! Every operation records its output value and the inputs it depends on;
//! [`Tape::backward`] walks the records in reverse creation order. Nodes that
//! do not depend on a parameter are never differentiated.

use crate::error::{Error, Result};
use crate::tensor::{gemm, log_softmax_rows, softmax_rows, MatRef, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Square(Var),
    Exp(Var),
    Relu(Var),
    Sum(Var),
    Mean(Var),
    Variance(Var),
    MatMul(Var, Var),
    Transpose(Var),
    AddRowVec(Var, Var),
    MeanRows(Var),
    Linear {
        x: Var,
        weight: Var,
        bias: Var,
    },
    Conv2d {
        x: Var,
        weight: Var,
        bias: Var,
    },
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        normalized: Tensor,
        inv_std: Vec<f64>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    Reshape(Var),
    SoftCrossEntropy {
        logits: Var,
        targets: Tensor,
        probs: Tensor,
    },
    IrmGradient {
        logits: Var,
        targets: Tensor,
        probs: Tensor,
    },
    SquaredDistances(Var, Var),
    SelectRows(Var, Vec<usize>),
    Stack(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Batch statistics observed by a training-mode batch-norm call.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased per-channel variance.
    pub var: Vec<f64>,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients(Vec<Option<Tensor>>);

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.0.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient of `var`, or zeros shaped like `like` when it received none.
    pub fn get_or_zeros(&self, var: Var, like: &Tensor) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
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

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn scalar(&self, var: Var) -> f64 {
        self.value(var).item()
    }

    /// Records a value that is not differentiated.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a differentiable leaf.
    pub fn parameter(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let v = self.value(a).scale(factor);
        self.push(v, Op::Scale(a, factor), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).mean());
        self.push(v, Op::Mean(a), &[a])
    }

    /// Population variance over all elements.
    pub fn variance(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mean = t.mean();
        let var = t.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(var), Op::Variance(a), &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        if self.value(a).shape().len() != 2 {
            return Err(Error::shape("transpose", "expects a 2-D tensor"));
        }
        let v = self.value(a).transpose();
        Ok(self.push(v, Op::Transpose(a), &[a]))
    }

    /// Adds a `[d]` vector to every row of an `[n, d]` matrix.
    pub fn add_row_vec(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, r) = (self.value(a), self.value(row));
        if m.shape().len() != 2 || r.shape() != [m.shape()[1]] {
            return Err(Error::shape(
                "add_row_vec",
                format!("{:?} + {:?}", m.shape(), r.shape()),
            ));
        }
        let d = r.len();
        let mut v = m.clone();
        for chunk in v.data_mut().chunks_mut(d) {
            for (x, y) in chunk.iter_mut().zip(r.data()) {
                *x += y;
            }
        }
        Ok(self.push(v, Op::AddRowVec(a, row), &[a, row]))
    }

    /// Column means of an `[n, d]` matrix.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let m = self.value(a);
        if m.shape().len() != 2 || m.shape()[0] == 0 {
            return Err(Error::shape("mean_rows", format!("{:?}", m.shape())));
        }
        let (n, d) = (m.shape()[0], m.shape()[1]);
        let mut out = vec![0.0; d];
        for row in m.data().chunks(d) {
            for (o, x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        out.iter_mut().for_each(|o| *o /= n as f64);
        Ok(self.push(Tensor::new(vec![d], out)?, Op::MeanRows(a), &[a]))
    }

    /// `x @ weight^T + bias` with `x: [n, in]`, `weight: [out, in]`, `bias: [out]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(weight), self.value(bias));
        if xv.shape().len() != 2
            || wv.shape().len() != 2
            || xv.shape()[1] != wv.shape()[1]
            || bv.shape() != [wv.shape()[0]]
        {
            return Err(Error::shape(
                "linear",
                format!("x {:?}, w {:?}, b {:?}", xv.shape(), wv.shape(), bv.shape()),
            ));
        }
        let (n, k, out) = (xv.shape()[0], xv.shape()[1], wv.shape()[0]);
        let mut data = Vec::with_capacity(n * out);
        for _ in 0..n {
            data.extend_from_slice(bv.data());
        }
        gemm(
            MatRef::row_major(xv.data(), n, k),
            MatRef::transposed(wv.data(), out, k),
            &mut data,
            1.0,
        );
        let v = Tensor::new(vec![n, out], data)?;
        Ok(self.push(v, Op::Linear { x, weight, bias }, &[x, weight, bias]))
    }

    /// Stride-1 convolution with zero "same" padding.
    /// `x: [n, ci, h, w]`, `weight: [co, ci, k, k]` with odd `k`, `bias: [co]`.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(weight), self.value(bias));
        let (xs, ws) = (xv.shape(), wv.shape());
        if xs.len() != 4
            || ws.len() != 4
            || xs[1] != ws[1]
            || ws[2] != ws[3]
            || ws[2] % 2 == 0
            || bv.shape() != [ws[0]]
        {
            return Err(Error::shape(
                "conv2d",
                format!("x {xs:?}, w {ws:?}, b {:?}", bv.shape()),
            ));
        }
        let geom = ConvGeometry::new(xs, ws);
        let cols = im2col(xv.data(), &geom);
        let mut out_mat = vec![0.0; geom.co * geom.cols()];
        gemm(
            MatRef::row_major(wv.data(), geom.co, geom.patch()),
            MatRef::row_major(&cols, geom.patch(), geom.cols()),
            &mut out_mat,
            0.0,
        );
        let hw = geom.h * geom.w;
        let mut out = vec![0.0; geom.n * geom.co * hw];
        for img in 0..geom.n {
            for o in 0..geom.co {
                let src = &out_mat[o * geom.cols() + img * hw..o * geom.cols() + (img + 1) * hw];
                let dst = &mut out[(img * geom.co + o) * hw..(img * geom.co + o + 1) * hw];
                let b = bv.data()[o];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = s + b;
                }
            }
        }
        let v = Tensor::new(vec![geom.n, geom.co, geom.h, geom.w], out)?;
        Ok(self.push(v, Op::Conv2d { x, weight, bias }, &[x, weight, bias]))
    }

    /// Training-mode batch normalization over every axis except axis 1.
    /// Returns the output together with the observed batch statistics.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        let layout = self.channel_layout("batch_norm_train", x, gamma, beta)?;
        let xv = self.value(x);
        let count = layout.n * layout.spatial;
        let mut mean = vec![0.0; layout.c];
        let mut var = vec![0.0; layout.c];
        for (ch, m) in mean.iter_mut().enumerate() {
            *m = layout.channel_iter(ch).map(|i| xv.data()[i]).sum::<f64>() / count as f64;
        }
        for (ch, v) in var.iter_mut().enumerate() {
            *v = layout
                .channel_iter(ch)
                .map(|i| (xv.data()[i] - mean[ch]).powi(2))
                .sum::<f64>()
                / count as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut normalized = xv.clone();
        let mut out = xv.clone();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        for ch in 0..layout.c {
            for i in layout.channel_iter(ch) {
                let xh = (xv.data()[i] - mean[ch]) * inv_std[ch];
                normalized.data_mut()[i] = xh;
                out.data_mut()[i] = g[ch] * xh + b[ch];
            }
        }
        let unbiased = if count > 1 {
            var.iter().map(|v| v * count as f64 / (count - 1) as f64).collect()
        } else {
            var.clone()
        };
        let stats = BatchStats {
            mean,
            var: unbiased,
        };
        let var_out = self.push(
            out,
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            },
            &[x, gamma, beta],
        );
        Ok((var_out, stats))
    }

    /// Evaluation-mode batch normalization with fixed statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let layout = self.channel_layout("batch_norm_eval", x, gamma, beta)?;
        if running_mean.len() != layout.c || running_var.len() != layout.c {
            return Err(Error::shape("batch_norm_eval", "running statistics length"));
        }
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut out = self.value(x).clone();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        for ch in 0..layout.c {
            for i in layout.channel_iter(ch) {
                let xv = out.data()[i];
                out.data_mut()[i] = g[ch] * (xv - running_mean[ch]) * inv_std[ch] + b[ch];
            }
        }
        Ok(self.push(
            out,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean: running_mean.to_vec(),
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    fn channel_layout(
        &self,
        op: &'static str,
        x: Var,
        gamma: Var,
        beta: Var,
    ) -> Result<ChannelLayout> {
        let s = self.value(x).shape();
        if s.len() < 2 || self.value(gamma).shape() != [s[1]] || self.value(beta).shape() != [s[1]]
        {
            return Err(Error::shape(op, format!("x {s:?}")));
        }
        Ok(ChannelLayout {
            n: s[0],
            c: s[1],
            spatial: s[2..].iter().product(),
        })
    }

    /// 2x2 max pooling with stride 2; odd trailing rows/columns are dropped.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape();
        if s.len() != 4 || s[2] < 2 || s[3] < 2 {
            return Err(Error::shape("max_pool2", format!("{s:?}")));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = base + 2 * y * w + 2 * xx;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = base + (2 * y + dy) * w + 2 * xx + dx;
                        if xv.data()[i] > xv.data()[best] {
                            best = i;
                        }
                    }
                    out.push(xv.data()[best]);
                    argmax.push(best);
                }
            }
        }
        let v = Tensor::new(vec![n, c, oh, ow], out)?;
        Ok(self.push(v, Op::MaxPool2 { x, argmax }, &[x]))
    }

    /// `[n, c, h, w] -> [n, c]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape();
        if s.len() != 4 {
            return Err(Error::shape("global_avg_pool", format!("{s:?}")));
        }
        let hw = s[2] * s[3];
        let data = xv
            .data()
            .chunks(hw)
            .map(|p| p.iter().sum::<f64>() / hw as f64)
            .collect();
        let v = Tensor::new(vec![s[0], s[1]], data)?;
        Ok(self.push(v, Op::GlobalAvgPool(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(x), &[x]))
    }

    /// Mean over rows of `-sum_c t_c log softmax(z)_c`. `targets` is `[b, C]`.
    pub fn soft_cross_entropy(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        let z = self.value(logits);
        check_targets("soft_cross_entropy", z, targets)?;
        let logp = log_softmax_rows(z);
        let b = z.shape()[0];
        let loss = -logp
            .data()
            .iter()
            .zip(targets.data())
            .map(|(lp, t)| if *t == 0.0 { 0.0 } else { lp * t })
            .sum::<f64>()
            / b as f64;
        let probs = logp.map(f64::exp);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftCrossEntropy {
                logits,
                targets: targets.clone(),
                probs,
            },
            &[logits],
        ))
    }

    /// Derivative of the mean soft cross-entropy of `w * logits` with respect
    /// to the scalar multiplier `w`, evaluated at `w = 1`.
    pub fn irm_gradient(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        let z = self.value(logits);
        check_targets("irm_gradient", z, targets)?;
        let probs = softmax_rows(z);
        let (b, c) = (z.shape()[0], z.shape()[1]);
        let mut g = 0.0;
        for i in 0..b {
            let s: f64 = targets.row(i).iter().sum();
            for j in 0..c {
                let k = i * c + j;
                g += (s * probs.data()[k] - targets.data()[k]) * z.data()[k];
            }
        }
        g /= b as f64;
        Ok(self.push(
            Tensor::scalar(g),
            Op::IrmGradient {
                logits,
                targets: targets.clone(),
                probs,
            },
            &[logits],
        ))
    }

    /// Pairwise squared Euclidean distances `[n, d] x [m, d] -> [n, m]`.
    pub fn squared_distances(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.shape()[1] != bv.shape()[1] {
            return Err(Error::shape(
                "squared_distances",
                format!("{:?} vs {:?}", av.shape(), bv.shape()),
            ));
        }
        let (n, m) = (av.shape()[0], bv.shape()[0]);
        let mut out = Vec::with_capacity(n * m);
        for i in 0..n {
            for j in 0..m {
                out.push(
                    av.row(i)
                        .iter()
                        .zip(bv.row(j))
                        .map(|(x, y)| (x - y).powi(2))
                        .sum(),
                );
            }
        }
        let v = Tensor::new(vec![n, m], out)?;
        Ok(self.push(v, Op::SquaredDistances(a, b), &[a, b]))
    }

    pub fn select_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let av = self.value(a);
        if av.shape().is_empty() || indices.iter().any(|&i| i >= av.shape()[0]) {
            return Err(Error::shape("select_rows", "index out of range"));
        }
        let v = av.select(indices);
        Ok(self.push(v, Op::SelectRows(a, indices.to_vec()), &[a]))
    }

    /// Stacks scalars into a `[k]` vector.
    pub fn stack(&mut self, scalars: &[Var]) -> Result<Var> {
        let mut data = Vec::with_capacity(scalars.len());
        for &s in scalars {
            if self.value(s).len() != 1 {
                return Err(Error::shape("stack", "expects scalars"));
            }
            data.push(self.value(s).item());
        }
        let v = Tensor::new(vec![scalars.len()], data)?;
        Ok(self.push(v, Op::Stack(scalars.to_vec()), scalars))
    }

    /// Sum of `weights[i] * terms[i]` over scalar terms.
    pub fn weighted_sum(&mut self, terms: &[Var], weights: &[f64]) -> Result<Var> {
        if terms.is_empty() || terms.len() != weights.len() {
            return Err(Error::shape("weighted_sum", "terms and weights differ"));
        }
        let mut acc = self.scale(terms[0], weights[0]);
        for (&t, &w) in terms.iter().zip(weights).skip(1) {
            let s = self.scale(t, w);
            acc = self.add(acc, s)?;
        }
        Ok(acc)
    }

    /// Mean of scalar terms.
    pub fn mean_of(&mut self, terms: &[Var]) -> Result<Var> {
        let w = vec![1.0 / terms.len() as f64; terms.len()];
        self.weighted_sum(terms, &w)
    }

    /// Reverse pass from a scalar `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), 1.0));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients(grads)
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, t: Tensor| {
            if !self.wants(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                acc(*a, g.zip_map(self.value(*b), |x, y| x * y));
                acc(*b, g.zip_map(self.value(*a), |x, y| x * y));
            }
            Op::Scale(a, f) => acc(*a, g.scale(*f)),
            Op::Square(a) => acc(*a, g.zip_map(self.value(*a), |x, y| 2.0 * x * y)),
            Op::Exp(a) => acc(*a, g.zip_map(&node.value, |x, y| x * y)),
            Op::Relu(a) => acc(
                *a,
                g.zip_map(self.value(*a), |x, y| if y > 0.0 { x } else { 0.0 }),
            ),
            Op::Sum(a) => acc(*a, Tensor::full(self.value(*a).shape(), g.item())),
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                acc(*a, Tensor::full(self.value(*a).shape(), g.item() / n));
            }
            Op::Variance(a) => {
                let t = self.value(*a);
                let (mean, n) = (t.mean(), t.len() as f64);
                let gi = g.item();
                acc(*a, t.map(|x| gi * 2.0 * (x - mean) / n));
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    acc(*a, g.matmul(&bv.transpose()).expect("matmul grad shape"));
                }
                if self.wants(*b) {
                    acc(*b, av.transpose().matmul(g).expect("matmul grad shape"));
                }
            }
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::AddRowVec(a, row) => {
                acc(*a, g.clone());
                if self.wants(*row) {
                    acc(*row, column_sums(g));
                }
            }
            Op::MeanRows(a) => {
                let s = self.value(*a).shape();
                let (n, d) = (s[0], s[1]);
                let mut out = Tensor::zeros(s);
                for r in 0..n {
                    for j in 0..d {
                        out.data_mut()[r * d + j] = g.data()[j] / n as f64;
                    }
                }
                acc(*a, out);
            }
            Op::Linear { x, weight, bias } => {
                let (xv, wv) = (self.value(*x), self.value(*weight));
                let (n, k, o) = (xv.shape()[0], xv.shape()[1], wv.shape()[0]);
                if self.wants(*x) {
                    let mut gx = vec![0.0; n * k];
                    gemm(
                        MatRef::row_major(g.data(), n, o),
                        MatRef::row_major(wv.data(), o, k),
                        &mut gx,
                        0.0,
                    );
                    acc(*x, Tensor::new(vec![n, k], gx).expect("linear grad"));
                }
                if self.wants(*weight) {
                    let mut gw = vec![0.0; o * k];
                    gemm(
                        MatRef::transposed(g.data(), n, o),
                        MatRef::row_major(xv.data(), n, k),
                        &mut gw,
                        0.0,
                    );
                    acc(*weight, Tensor::new(vec![o, k], gw).expect("linear grad"));
                }
                if self.wants(*bias) {
                    acc(*bias, column_sums(g));
                }
            }
            Op::Conv2d { x, weight, bias } => {
                let (xv, wv) = (self.value(*x), self.value(*weight));
                let geom = ConvGeometry::new(xv.shape(), wv.shape());
                let hw = geom.h * geom.w;
                // [n, co, h, w] -> [co, n*h*w]
                let mut gmat = vec![0.0; geom.co * geom.cols()];
                for img in 0..geom.n {
                    for o in 0..geom.co {
                        let src = &g.data()[(img * geom.co + o) * hw..(img * geom.co + o + 1) * hw];
                        gmat[o * geom.cols() + img * hw..o * geom.cols() + (img + 1) * hw]
                            .copy_from_slice(src);
                    }
                }
                if self.wants(*weight) {
                    let cols = im2col(xv.data(), &geom);
                    let mut gw = vec![0.0; geom.co * geom.patch()];
                    gemm(
                        MatRef::row_major(&gmat, geom.co, geom.cols()),
                        MatRef::transposed(&cols, geom.patch(), geom.cols()),
                        &mut gw,
                        0.0,
                    );
                    acc(
                        *weight,
                        Tensor::new(wv.shape().to_vec(), gw).expect("conv grad"),
                    );
                }
                if self.wants(*bias) {
                    let gb = (0..geom.co)
                        .map(|o| gmat[o * geom.cols()..(o + 1) * geom.cols()].iter().sum())
                        .collect();
                    acc(*bias, Tensor::new(vec![geom.co], gb).expect("conv grad"));
                }
                if self.wants(*x) {
                    let mut gcols = vec![0.0; geom.patch() * geom.cols()];
                    gemm(
                        MatRef::transposed(wv.data(), geom.co, geom.patch()),
                        MatRef::row_major(&gmat, geom.co, geom.cols()),
                        &mut gcols,
                        0.0,
                    );
                    let gx = col2im(&gcols, &geom);
                    acc(*x, Tensor::new(xv.shape().to_vec(), gx).expect("conv grad"));
                }
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            } => {
                let s = self.value(*x).shape();
                let layout = ChannelLayout {
                    n: s[0],
                    c: s[1],
                    spatial: s[2..].iter().product(),
                };
                let count = (layout.n * layout.spatial) as f64;
                let gam = self.value(*gamma).data();
                let mut ggamma = vec![0.0; layout.c];
                let mut gbeta = vec![0.0; layout.c];
                let mut gx = Tensor::zeros(s);
                for ch in 0..layout.c {
                    let (mut sum_g, mut sum_gx) = (0.0, 0.0);
                    for i in layout.channel_iter(ch) {
                        sum_g += g.data()[i];
                        sum_gx += g.data()[i] * normalized.data()[i];
                    }
                    ggamma[ch] = sum_gx;
                    gbeta[ch] = sum_g;
                    let k = gam[ch] * inv_std[ch] / count;
                    for i in layout.channel_iter(ch) {
                        gx.data_mut()[i] =
                            k * (count * g.data()[i] - sum_g - normalized.data()[i] * sum_gx);
                    }
                }
                acc(*x, gx);
                acc(*gamma, Tensor::new(vec![layout.c], ggamma).expect("bn grad"));
                acc(*beta, Tensor::new(vec![layout.c], gbeta).expect("bn grad"));
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let xv = self.value(*x);
                let s = xv.shape();
                let layout = ChannelLayout {
                    n: s[0],
                    c: s[1],
                    spatial: s[2..].iter().product(),
                };
                let gam = self.value(*gamma).data();
                let mut ggamma = vec![0.0; layout.c];
                let mut gbeta = vec![0.0; layout.c];
                let mut gx = Tensor::zeros(s);
                for ch in 0..layout.c {
                    for i in layout.channel_iter(ch) {
                        let gi = g.data()[i];
                        ggamma[ch] += gi * (xv.data()[i] - mean[ch]) * inv_std[ch];
                        gbeta[ch] += gi;
                        gx.data_mut()[i] = gi * gam[ch] * inv_std[ch];
                    }
                }
                acc(*x, gx);
                acc(*gamma, Tensor::new(vec![layout.c], ggamma).expect("bn grad"));
                acc(*beta, Tensor::new(vec![layout.c], gbeta).expect("bn grad"));
            }
            Op::MaxPool2 { x, argmax } => {
                let mut gx = Tensor::zeros(self.value(*x).shape());
                for (o, &src) in argmax.iter().enumerate() {
                    gx.data_mut()[src] += g.data()[o];
                }
                acc(*x, gx);
            }
            Op::GlobalAvgPool(x) => {
                let s = self.value(*x).shape();
                let hw = s[2] * s[3];
                let mut gx = Tensor::zeros(s);
                for (p, chunk) in gx.data_mut().chunks_mut(hw).enumerate() {
                    chunk.fill(g.data()[p] / hw as f64);
                }
                acc(*x, gx);
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                acc(*x, g.clone().reshape(&shape).expect("reshape grad"));
            }
            Op::SoftCrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let (b, c) = (probs.shape()[0], probs.shape()[1]);
                let scale = g.item() / b as f64;
                let mut gz = Tensor::zeros(probs.shape());
                for i in 0..b {
                    let s: f64 = targets.row(i).iter().sum();
                    for j in 0..c {
                        let k = i * c + j;
                        gz.data_mut()[k] = scale * (s * probs.data()[k] - targets.data()[k]);
                    }
                }
                acc(*logits, gz);
            }
            Op::IrmGradient {
                logits,
                targets,
                probs,
            } => {
                let z = self.value(*logits);
                let (b, c) = (probs.shape()[0], probs.shape()[1]);
                let scale = g.item() / b as f64;
                let mut gz = Tensor::zeros(probs.shape());
                for i in 0..b {
                    let s: f64 = targets.row(i).iter().sum();
                    let zbar: f64 = (0..c)
                        .map(|j| probs.data()[i * c + j] * z.data()[i * c + j])
                        .sum();
                    for j in 0..c {
                        let k = i * c + j;
                        let p = probs.data()[k];
                        gz.data_mut()[k] =
                            scale * (s * p - targets.data()[k] + s * p * (z.data()[k] - zbar));
                    }
                }
                acc(*logits, gz);
            }
            Op::SquaredDistances(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, m, d) = (av.shape()[0], bv.shape()[0], av.shape()[1]);
                let mut ga = Tensor::zeros(av.shape());
                let mut gb = Tensor::zeros(bv.shape());
                for i in 0..n {
                    for j in 0..m {
                        let gij = g.data()[i * m + j];
                        if gij == 0.0 {
                            continue;
                        }
                        for k in 0..d {
                            let diff = 2.0 * gij * (av.data()[i * d + k] - bv.data()[j * d + k]);
                            ga.data_mut()[i * d + k] += diff;
                            gb.data_mut()[j * d + k] -= diff;
                        }
                    }
                }
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::SelectRows(a, indices) => {
                let mut ga = Tensor::zeros(self.value(*a).shape());
                let stride = g.len() / indices.len().max(1);
                for (r, &src) in indices.iter().enumerate() {
                    for k in 0..stride {
                        ga.data_mut()[src * stride + k] += g.data()[r * stride + k];
                    }
                }
                acc(*a, ga);
            }
            Op::Stack(items) => {
                for (k, &s) in items.iter().enumerate() {
                    acc(s, Tensor::scalar(g.data()[k]));
                }
            }
        }
    }
}

fn check_targets(op: &'static str, logits: &Tensor, targets: &Tensor) -> Result<()> {
    if logits.shape().len() != 2 || targets.shape() != logits.shape() || logits.shape()[0] == 0 {
        return Err(Error::shape(
            op,
            format!("logits {:?}, targets {:?}", logits.shape(), targets.shape()),
        ));
    }
    if !logits.is_finite() {
        return Err(Error::Numerical {
            op,
            detail: "non-finite logits".into(),
        });
    }
    Ok(())
}

fn column_sums(g: &Tensor) -> Tensor {
    let d = g.shape()[1];
    let mut out = vec![0.0; d];
    for row in g.data().chunks(d) {
        for (o, x) in out.iter_mut().zip(row) {
            *o += x;
        }
    }
    Tensor::new(vec![d], out).expect("column sums")
}

struct ChannelLayout {
    n: usize,
    c: usize,
    spatial: usize,
}

impl ChannelLayout {
    fn channel_iter(&self, ch: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.n).flat_map(move |img| {
            let base = (img * self.c + ch) * self.spatial;
            base..base + self.spatial
        })
    }
}

struct ConvGeometry {
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    k: usize,
}

impl ConvGeometry {
    fn new(xs: &[usize], ws: &[usize]) -> Self {
        ConvGeometry {
            n: xs[0],
            ci: xs[1],
            h: xs[2],
            w: xs[3],
            co: ws[0],
            k: ws[2],
        }
    }

    fn patch(&self) -> usize {
        self.ci * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.n * self.h * self.w
    }
}

/// `[n, ci, h, w] -> [ci*k*k, n*h*w]` patch matrix with zero padding.
fn im2col(x: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let pad = (g.k / 2) as isize;
    let (h, w) = (g.h as isize, g.w as isize);
    let hw = g.h * g.w;
    let mut cols = vec![0.0; g.patch() * g.cols()];
    for c in 0..g.ci {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let out_row = &mut cols[row * g.cols()..(row + 1) * g.cols()];
                for img in 0..g.n {
                    let plane = &x[(img * g.ci + c) * hw..(img * g.ci + c + 1) * hw];
                    for y in 0..h {
                        let sy = y + ky as isize - pad;
                        if sy < 0 || sy >= h {
                            continue;
                        }
                        for xx in 0..w {
                            let sx = xx + kx as isize - pad;
                            if sx < 0 || sx >= w {
                                continue;
                            }
                            out_row[img * hw + (y * w + xx) as usize] =
                                plane[(sy * w + sx) as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let pad = (g.k / 2) as isize;
    let (h, w) = (g.h as isize, g.w as isize);
    let hw = g.h * g.w;
    let mut x = vec![0.0; g.n * g.ci * hw];
    for c in 0..g.ci {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src_row = &cols[row * g.cols()..(row + 1) * g.cols()];
                for img in 0..g.n {
                    let plane = &mut x[(img * g.ci + c) * hw..(img * g.ci + c + 1) * hw];
                    for y in 0..h {
                        let sy = y + ky as isize - pad;
                        if sy < 0 || sy >= h {
                            continue;
                        }
                        for xx in 0..w {
                            let sx = xx + kx as isize - pad;
                            if sx < 0 || sx >= w {
                                continue;
                            }
                            plane[(sy * w + sx) as usize] += src_row[img * hw + (y * w + xx) as usize];
                        }
                    }
                }
            }
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central differences of `f` with respect to every element of `x0`.
    fn numeric_grad(x0: &Tensor, f: impl Fn(&Tensor) -> f64) -> Vec<f64> {
        let h = 1e-6;
        (0..x0.len())
            .map(|i| {
                let mut p = x0.clone();
                p.data_mut()[i] += h;
                let mut m = x0.clone();
                m.data_mut()[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            let scale = x.abs().max(y.abs()).max(1e-3);
            assert!((x - y).abs() / scale < tol, "{x} vs {y}");
        }
    }

    fn seq(shape: &[usize], offset: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|i| (i as f64 * 0.7 + offset).sin() * 1.3)
            .collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn conv_pool_bn_chain_gradient() {
        let x0 = seq(&[2, 2, 5, 4], 0.1);
        let w0 = seq(&[3, 2, 3, 3], 0.5);
        let b0 = seq(&[3], 0.9);
        let gamma0 = seq(&[3], 1.3);
        let beta0 = seq(&[3], 2.1);
        let run = |x: &Tensor, w: &Tensor, gamma: &Tensor| {
            let mut t = Tape::new();
            let xv = t.parameter(x.clone());
            let wv = t.parameter(w.clone());
            let bv = t.parameter(b0.clone());
            let gv = t.parameter(gamma.clone());
            let be = t.parameter(beta0.clone());
            let c = t.conv2d(xv, wv, bv).unwrap();
            let (n, _) = t.batch_norm_train(c, gv, be, 1e-5).unwrap();
            let r = t.relu(n);
            let p = t.max_pool2(r).unwrap();
            let gp = t.global_avg_pool(p).unwrap();
            let sq = t.square(gp);
            let loss = t.sum(sq);
            (t, loss, xv, wv, gv)
        };
        let (tape, loss, xv, wv, gv) = run(&x0, &w0, &gamma0);
        let grads = tape.backward(loss);
        let f_x = |x: &Tensor| {
            let (t, l, ..) = run(x, &w0, &gamma0);
            t.scalar(l)
        };
        let f_w = |w: &Tensor| {
            let (t, l, ..) = run(&x0, w, &gamma0);
            t.scalar(l)
        };
        let f_g = |g: &Tensor| {
            let (t, l, ..) = run(&x0, &w0, g);
            t.scalar(l)
        };
        assert_close(grads.get(xv).unwrap().data(), &numeric_grad(&x0, f_x), 1e-4);
        assert_close(grads.get(wv).unwrap().data(), &numeric_grad(&w0, f_w), 1e-4);
        assert_close(grads.get(gv).unwrap().data(), &numeric_grad(&gamma0, f_g), 1e-4);
    }

    #[test]
    fn linear_softmax_ce_gradient() {
        let x0 = seq(&[4, 3], 0.2);
        let w0 = seq(&[2, 3], 0.4);
        let b0 = seq(&[2], 0.6);
        let targets = Tensor::from_rows(&[
            vec![1.0, 0.0],
            vec![0.3, 0.7],
            vec![0.0, 1.0],
            vec![0.5, 0.5],
        ])
        .unwrap();
        let run = |w: &Tensor, irm: bool| {
            let mut t = Tape::new();
            let xv = t.constant(x0.clone());
            let wv = t.parameter(w.clone());
            let bv = t.parameter(b0.clone());
            let z = t.linear(xv, wv, bv).unwrap();
            let l = if irm {
                let g = t.irm_gradient(z, &targets).unwrap();
                t.square(g)
            } else {
                t.soft_cross_entropy(z, &targets).unwrap()
            };
            (t, l, wv)
        };
        for irm in [false, true] {
            let (tape, loss, wv) = run(&w0, irm);
            let grads = tape.backward(loss);
            let num = numeric_grad(&w0, |w| {
                let (t, l, _) = run(w, irm);
                t.scalar(l)
            });
            assert_close(grads.get(wv).unwrap().data(), &num, 1e-5);
        }
    }

    #[test]
    fn distance_variance_select_gradient() {
        let a0 = seq(&[3, 2], 0.3);
        let b0 = seq(&[2, 2], 1.7);
        let run = |a: &Tensor| {
            let mut t = Tape::new();
            let av = t.parameter(a.clone());
            let bv = t.constant(b0.clone());
            let d = t.squared_distances(av, bv).unwrap();
            let e = t.scale(d, -0.5);
            let k = t.exp(e);
            let m = t.mean(k);
            let rows = t.select_rows(av, &[0, 2, 2]).unwrap();
            let mr = t.mean_rows(rows).unwrap();
            let s = t.sum(mr);
            let st = t.stack(&[m, s]).unwrap();
            let v = t.variance(st);
            let tr = t.transpose(av).unwrap();
            let gram = t.matmul(tr, av).unwrap();
            let gs = t.sum(gram);
            let l = t.add(v, gs).unwrap();
            (t, l, av)
        };
        let (tape, loss, av) = run(&a0);
        let grads = tape.backward(loss);
        let num = numeric_grad(&a0, |a| {
            let (t, l, _) = run(a);
            t.scalar(l)
        });
        assert_close(grads.get(av).unwrap().data(), &num, 1e-5);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let c = t.constant(Tensor::scalar(2.0));
        let p = t.parameter(Tensor::scalar(3.0));
        let m = t.mul(c, p).unwrap();
        let grads = t.backward(m);
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(p).unwrap().item(), 2.0);
    }
}
