use crate::error::{Error, Result};

use super::{Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch-norm running statistics, one entry per feature.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(features: usize) -> Self {
        RunningStats {
            mean: vec![T::zero(); features],
            var: vec![T::one(); features],
        }
    }

    pub fn cast<U: Scalar>(&self) -> RunningStats<U> {
        RunningStats {
            mean: self.mean.iter().map(|v| U::lit(v.as_f64())).collect(),
            var: self.var.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchNormConfig {
    pub eps: f64,
    pub momentum: f64,
}

impl Default for BatchNormConfig {
    fn default() -> Self {
        BatchNormConfig {
            eps: 1e-5,
            momentum: 0.1,
        }
    }
}

/// Train mode normalizes with batch statistics and folds them into the
/// running statistics; infer mode normalizes with the running statistics.
pub enum BnMode<'a, T> {
    Train(&'a mut RunningStats<T>),
    Infer(&'a RunningStats<T>),
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Sum(Var),
    ConcatTokens(Vec<Var>),
    SliceToken(Var, usize),
    AddToken(Var, Var, usize),
    ConcatFeatures(Vec<Var>),
    Reshape(Var),
    Relu(Var),
    Softmax(Var),
    Bmm {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    PairwiseDistances(Var),
    WeightedGap {
        dist: Var,
        target: Vec<T>,
        weights: Vec<T>,
        scale: T,
        squared: bool,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Records eagerly evaluated operations so gradients can be pulled back in
/// reverse order.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn tokens_view(shape: &[usize]) -> (usize, usize, usize) {
    match *shape {
        [b, d] => (b, 1, d),
        [b, t, d] => (b, t, d),
        [d] => (1, 1, d),
        _ => unreachable!("tensor rank is at most 3"),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Inputs and parameters. Leaves are not checked for finiteness here;
    /// the first op that consumes a non-finite leaf reports it.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    /// `(N x K) . (K x M)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); n * m];
        T::gemm(
            n,
            k,
            m,
            T::one(),
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            m as isize,
            1,
            T::zero(),
            &mut out,
            m as isize,
            1,
        );
        let value = Tensor::new(&[n, m], out)?;
        self.push("matmul", value, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op: "add",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a), data)?;
        self.push("add", value, Op::Add(a, b))
    }

    /// Adds a bias vector to every row (the last axis).
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let d = self.value(a).last_dim();
        if self.shape(bias) != [d] {
            return Err(Error::Shape {
                op: "add_row",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let b = self.value(bias).data();
        let data = self
            .value(a)
            .data()
            .chunks_exact(d)
            .flat_map(|row| row.iter().zip(b).map(|(&x, &y)| x + y))
            .collect();
        let value = Tensor::new(self.shape(a), data)?;
        self.push("add_row", value, Op::AddRow(a, bias))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let data = self.value(a).data().iter().map(|&x| x * c).collect();
        let value = Tensor::new(self.shape(a), data)?;
        self.push("scale", value, Op::Scale(a, c))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().copied().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a))
    }

    /// Concatenates along the token axis. Rank-2 inputs (`B x D`) count as a
    /// single token; rank-3 inputs are `B x T x D`.
    pub fn concat_tokens(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::InvalidArgument("concat_tokens of nothing".into()));
        };
        let (b, _, d) = tokens_view(self.shape(first));
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let (pb, pt, pd) = tokens_view(s);
            if s.len() < 2 || pb != b || pd != d {
                return Err(Error::Shape {
                    op: "concat_tokens",
                    lhs: self.shape(first).to_vec(),
                    rhs: s.to_vec(),
                });
            }
            total += pt;
        }
        let mut out = Vec::with_capacity(b * total * d);
        for bi in 0..b {
            for &p in parts {
                let (_, pt, _) = tokens_view(self.shape(p));
                let src = self.value(p).data();
                out.extend_from_slice(&src[bi * pt * d..(bi + 1) * pt * d]);
            }
        }
        let value = Tensor::new(&[b, total, d], out)?;
        self.push("concat_tokens", value, Op::ConcatTokens(parts.to_vec()))
    }

    /// Token `index` of a `B x T x D` tensor, as `B x D`.
    pub fn slice_token(&mut self, a: Var, index: usize) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 3 || index >= s[1] {
            return Err(Error::Shape {
                op: "slice_token",
                lhs: s.to_vec(),
                rhs: vec![index],
            });
        }
        let (b, t, d) = (s[0], s[1], s[2]);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(b * d);
        for bi in 0..b {
            let at = (bi * t + index) * d;
            out.extend_from_slice(&src[at..at + d]);
        }
        let value = Tensor::new(&[b, d], out)?;
        self.push("slice_token", value, Op::SliceToken(a, index))
    }

    /// Adds a `B x D` tensor onto token `index` of a `B x T x D` tensor.
    pub fn add_token(&mut self, a: Var, t: Var, index: usize) -> Result<Var> {
        let (sa, st) = (self.shape(a), self.shape(t));
        if sa.len() != 3 || index >= sa[1] || st != [sa[0], sa[2]] {
            return Err(Error::Shape {
                op: "add_token",
                lhs: sa.to_vec(),
                rhs: st.to_vec(),
            });
        }
        let (b, tt, d) = (sa[0], sa[1], sa[2]);
        let mut out = self.value(a).data().to_vec();
        let src = self.value(t).data();
        for bi in 0..b {
            let at = (bi * tt + index) * d;
            for j in 0..d {
                out[at + j] = out[at + j] + src[bi * d + j];
            }
        }
        let value = Tensor::new(&[b, tt, d], out)?;
        self.push("add_token", value, Op::AddToken(a, t, index))
    }

    /// Concatenates along the last axis; leading axes must agree.
    pub fn concat_features(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::InvalidArgument("concat_features of nothing".into()));
        };
        let lead = self.shape(first)[..self.shape(first).len() - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s[..s.len() - 1] != lead[..] {
                return Err(Error::Shape {
                    op: "concat_features",
                    lhs: self.shape(first).to_vec(),
                    rhs: s.to_vec(),
                });
            }
            widths.push(*s.last().unwrap());
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let value = Tensor::new(&shape, out)?;
        self.push("concat_features", value, Op::ConcatFeatures(parts.to_vec()))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(a).numel() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let value = Tensor::new(shape, self.value(a).data().to_vec())?;
        self.push("reshape", value, Op::Reshape(a))
    }

    /// Elementwise `max(0, v)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let data = self
            .value(a)
            .data()
            .iter()
            .map(|&x| if x > T::zero() { x } else { T::zero() })
            .collect();
        let value = Tensor::new(self.shape(a), data)?;
        self.push("relu", value, Op::Relu(a))
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let d = self.value(a).last_dim();
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_exact_mut(d) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total = total + *v;
            }
            for v in row.iter_mut() {
                *v = *v / total;
            }
        }
        let value = Tensor::new(self.shape(a), out)?;
        self.push("softmax_rows", value, Op::Softmax(a))
    }

    /// Batched product of `B x T x K` with `B x S x K` (transposed, giving
    /// `B x T x S`) or with `B x K x S`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let ok = sa.len() == 3
            && sb.len() == 3
            && sa[0] == sb[0]
            && if trans_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(Error::Shape {
                op: "bmm",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (bs, t, k) = (sa[0], sa[1], sa[2]);
        let s = if trans_b { sb[1] } else { sb[2] };
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![T::zero(); bs * t * s];
        for bi in 0..bs {
            let ab = &av[bi * t * k..(bi + 1) * t * k];
            let bb = &bv[bi * sb[1] * sb[2]..(bi + 1) * sb[1] * sb[2]];
            let ob = &mut out[bi * t * s..(bi + 1) * t * s];
            for ti in 0..t {
                let arow = &ab[ti * k..(ti + 1) * k];
                let orow = &mut ob[ti * s..(ti + 1) * s];
                if trans_b {
                    for (si, o) in orow.iter_mut().enumerate() {
                        let brow = &bb[si * k..(si + 1) * k];
                        *o = arow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
                    }
                } else {
                    for (ki, &x) in arow.iter().enumerate() {
                        let brow = &bb[ki * s..(ki + 1) * s];
                        for (o, &y) in orow.iter_mut().zip(brow) {
                            *o = *o + x * y;
                        }
                    }
                }
            }
        }
        let value = Tensor::new(&[bs, t, s], out)?;
        self.push("bmm", value, Op::Bmm { a, b, trans_b })
    }

    /// Batch normalization over every leading axis, per feature of the last.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_, T>,
        cfg: BatchNormConfig,
    ) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::Shape {
                op: "batchnorm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let xv = self.value(x).data();
        let n = xv.len() / d;
        let eps = T::lit(cfg.eps);
        let (mean, var, train) = match &mode {
            BnMode::Train(_) => {
                if n < 2 {
                    return Err(Error::InvalidArgument(
                        "train-mode batch norm needs at least 2 rows".into(),
                    ));
                }
                let mut mean = vec![T::zero(); d];
                for row in xv.chunks_exact(d) {
                    for (m, &v) in mean.iter_mut().zip(row) {
                        *m = *m + v;
                    }
                }
                let nf = T::lit(n as f64);
                mean.iter_mut().for_each(|m| *m = *m / nf);
                let mut var = vec![T::zero(); d];
                for row in xv.chunks_exact(d) {
                    for j in 0..d {
                        let c = row[j] - mean[j];
                        var[j] = var[j] + c * c;
                    }
                }
                var.iter_mut().for_each(|v| *v = *v / nf);
                (mean, var, true)
            }
            BnMode::Infer(stats) => {
                if stats.mean.len() != d || stats.var.len() != d {
                    return Err(Error::Shape {
                        op: "batchnorm",
                        lhs: self.shape(x).to_vec(),
                        rhs: vec![stats.mean.len()],
                    });
                }
                (stats.mean.clone(), stats.var.clone(), false)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = Vec::with_capacity(xv.len());
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.chunks_exact(d) {
            for j in 0..d {
                let h = (row[j] - mean[j]) * inv_std[j];
                xhat.push(h);
                out.push(g[j] * h + bt[j]);
            }
        }
        if let BnMode::Train(stats) = mode {
            let m = T::lit(cfg.momentum);
            let keep = T::one() - m;
            let unbias = T::lit(n as f64 / (n as f64 - 1.0));
            for j in 0..d {
                stats.mean[j] = keep * stats.mean[j] + m * mean[j];
                stats.var[j] = keep * stats.var[j] + m * var[j] * unbias;
            }
        }
        let value = Tensor::new(self.shape(x), out)?;
        self.push(
            "batchnorm",
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
        )
    }

    /// `B x D` rows to the `B x B` matrix of Euclidean distances.
    pub fn pairwise_distances(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::Shape {
                op: "pairwise_distances",
                lhs: s.to_vec(),
                rhs: vec![],
            });
        }
        let (b, d) = (s[0], s[1]);
        let v = self.value(a).data();
        let mut out = vec![T::zero(); b * b];
        for i in 0..b {
            let xi = &v[i * d..(i + 1) * d];
            for j in i + 1..b {
                let xj = &v[j * d..(j + 1) * d];
                let sq: T = xi
                    .iter()
                    .zip(xj)
                    .map(|(&p, &q)| {
                        let c = p - q;
                        c * c
                    })
                    .sum();
                let dist = sq.sqrt();
                out[i * b + j] = dist;
                out[j * b + i] = dist;
            }
        }
        let value = Tensor::new(&[b, b], out)?;
        self.push("pairwise_distances", value, Op::PairwiseDistances(a))
    }

    /// `scale * sum_ij w_ij * |d_ij - t_ij|`, or the squared gap when
    /// `squared`. Targets and weights are constants.
    pub fn weighted_gap(
        &mut self,
        dist: Var,
        target: Vec<T>,
        weights: Vec<T>,
        scale: T,
        squared: bool,
    ) -> Result<Var> {
        let n = self.value(dist).numel();
        if target.len() != n || weights.len() != n {
            return Err(Error::Shape {
                op: "weighted_gap",
                lhs: self.shape(dist).to_vec(),
                rhs: vec![target.len(), weights.len()],
            });
        }
        let mut acc = 0.0f64;
        for ((&d, &t), &w) in self.value(dist).data().iter().zip(&target).zip(&weights) {
            let gap = (d - t).as_f64();
            let term = if squared { gap * gap } else { gap.abs() };
            acc += w.as_f64() * term;
        }
        let value = Tensor::scalar(T::lit(acc * scale.as_f64()));
        self.push(
            "weighted_gap",
            value,
            Op::WeightedGap {
                dist,
                target,
                weights,
                scale,
                squared,
            },
        )
    }

    /// Reverse-mode accumulation from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.pull_back(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn pull_back(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (n, k, m) = (sa[0], sa[1], sb[1]);
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let ga = slot(grads, *a, n * k);
                // dA = G . B^T
                T::gemm(n, m, k, T::one(), g, m as isize, 1, bv, 1, m as isize, T::one(), ga, k as isize, 1);
                let gb = slot(grads, *b, k * m);
                // dB = A^T . G
                T::gemm(k, n, m, T::one(), av, 1, k as isize, g, m as isize, 1, T::one(), gb, m as isize, 1);
            }
            Op::Add(a, b) => {
                accumulate(slot(grads, *a, g.len()), g);
                accumulate(slot(grads, *b, g.len()), g);
            }
            Op::AddRow(a, bias) => {
                accumulate(slot(grads, *a, g.len()), g);
                let d = self.value(*bias).numel();
                let gb = slot(grads, *bias, d);
                for row in g.chunks_exact(d) {
                    accumulate(gb, row);
                }
            }
            Op::Scale(a, c) => {
                let ga = slot(grads, *a, g.len());
                for (x, &y) in ga.iter_mut().zip(g) {
                    *x = *x + *c * y;
                }
            }
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                let ga = slot(grads, *a, n);
                for x in ga.iter_mut() {
                    *x = *x + g[0];
                }
            }
            Op::ConcatTokens(parts) => {
                let (b, t, d) = tokens_view(node.value.shape());
                let mut offset = 0;
                for &p in parts {
                    let (_, pt, _) = tokens_view(self.shape(p));
                    let gp = slot(grads, p, b * pt * d);
                    for bi in 0..b {
                        let src = &g[(bi * t + offset) * d..(bi * t + offset + pt) * d];
                        accumulate(&mut gp[bi * pt * d..(bi + 1) * pt * d], src);
                    }
                    offset += pt;
                }
            }
            Op::SliceToken(a, index) => {
                let s = self.shape(*a);
                let (b, t, d) = (s[0], s[1], s[2]);
                let ga = slot(grads, *a, b * t * d);
                for bi in 0..b {
                    let at = (bi * t + index) * d;
                    accumulate(&mut ga[at..at + d], &g[bi * d..(bi + 1) * d]);
                }
            }
            Op::AddToken(a, tok, index) => {
                let s = self.shape(*a);
                let (b, t, d) = (s[0], s[1], s[2]);
                accumulate(slot(grads, *a, g.len()), g);
                let gt = slot(grads, *tok, b * d);
                for bi in 0..b {
                    let at = (bi * t + index) * d;
                    accumulate(&mut gt[bi * d..(bi + 1) * d], &g[at..at + d]);
                }
            }
            Op::ConcatFeatures(parts) => {
                let total = node.value.last_dim();
                let rows = node.value.numel() / total;
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).last_dim();
                    let gp = slot(grads, p, rows * w);
                    for r in 0..rows {
                        let src = &g[r * total + offset..r * total + offset + w];
                        accumulate(&mut gp[r * w..(r + 1) * w], src);
                    }
                    offset += w;
                }
            }
            Op::Reshape(a) => accumulate(slot(grads, *a, g.len()), g),
            Op::Relu(a) => {
                let xv = self.value(*a).data();
                let ga = slot(grads, *a, g.len());
                for ((x, &y), &v) in ga.iter_mut().zip(g).zip(xv) {
                    if v > T::zero() {
                        *x = *x + y;
                    }
                }
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let d = node.value.last_dim();
                let ga = slot(grads, *a, g.len());
                for ((gr, yr), xr) in g.chunks_exact(d).zip(y.chunks_exact(d)).zip(ga.chunks_exact_mut(d)) {
                    let dot: T = gr.iter().zip(yr).map(|(&p, &q)| p * q).sum();
                    for j in 0..d {
                        xr[j] = xr[j] + yr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::Bmm { a, b, trans_b } => {
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                let (bs, t, k) = (sa[0], sa[1], sa[2]);
                let s = node.value.last_dim();
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let bsz = sb[1] * sb[2];
                {
                    let ga = slot(grads, *a, av.len());
                    for bi in 0..bs {
                        for ti in 0..t {
                            let grow = &g[(bi * t + ti) * s..(bi * t + ti + 1) * s];
                            let arow = &mut ga[(bi * t + ti) * k..(bi * t + ti + 1) * k];
                            let bb = &bv[bi * bsz..(bi + 1) * bsz];
                            for (ki, x) in arow.iter_mut().enumerate() {
                                let mut acc = T::zero();
                                for (si, &gv) in grow.iter().enumerate() {
                                    let bval = if *trans_b { bb[si * k + ki] } else { bb[ki * s + si] };
                                    acc = acc + gv * bval;
                                }
                                *x = *x + acc;
                            }
                        }
                    }
                }
                let gb = slot(grads, *b, bv.len());
                for bi in 0..bs {
                    let gbb = &mut gb[bi * bsz..(bi + 1) * bsz];
                    for ti in 0..t {
                        let grow = &g[(bi * t + ti) * s..(bi * t + ti + 1) * s];
                        let arow = &av[(bi * t + ti) * k..(bi * t + ti + 1) * k];
                        for (si, &gv) in grow.iter().enumerate() {
                            for (ki, &aval) in arow.iter().enumerate() {
                                let at = if *trans_b { si * k + ki } else { ki * s + si };
                                gbb[at] = gbb[at] + gv * aval;
                            }
                        }
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let d = inv_std.len();
                let n = g.len() / d;
                let gam = self.value(*gamma).data();
                let mut sum_g = vec![T::zero(); d];
                let mut sum_gx = vec![T::zero(); d];
                for (gr, hr) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                    for j in 0..d {
                        sum_g[j] = sum_g[j] + gr[j];
                        sum_gx[j] = sum_gx[j] + gr[j] * hr[j];
                    }
                }
                accumulate(slot(grads, *gamma, d), &sum_gx);
                accumulate(slot(grads, *beta, d), &sum_g);
                let gx = slot(grads, *x, g.len());
                if *train {
                    let nf = T::lit(n as f64);
                    for ((xr, gr), hr) in gx.chunks_exact_mut(d).zip(g.chunks_exact(d)).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            // dxhat = g * gamma, folded into the sums above
                            let v = gam[j] * inv_std[j] / nf
                                * (nf * gr[j] - sum_g[j] - hr[j] * sum_gx[j]);
                            xr[j] = xr[j] + v;
                        }
                    }
                } else {
                    for (xr, gr) in gx.chunks_exact_mut(d).zip(g.chunks_exact(d)) {
                        for j in 0..d {
                            xr[j] = xr[j] + gr[j] * gam[j] * inv_std[j];
                        }
                    }
                }
            }
            Op::PairwiseDistances(a) => {
                let s = self.shape(*a);
                let (b, d) = (s[0], s[1]);
                let v = self.value(*a).data();
                let dist = node.value.data();
                let ga = slot(grads, *a, b * d);
                for i in 0..b {
                    for j in i + 1..b {
                        let dij = dist[i * b + j];
                        if dij <= T::zero() {
                            continue;
                        }
                        let c = (g[i * b + j] + g[j * b + i]) / dij;
                        if c == T::zero() {
                            continue;
                        }
                        for f in 0..d {
                            let diff = c * (v[i * d + f] - v[j * d + f]);
                            ga[i * d + f] = ga[i * d + f] + diff;
                            ga[j * d + f] = ga[j * d + f] - diff;
                        }
                    }
                }
            }
            Op::WeightedGap {
                dist,
                target,
                weights,
                scale,
                squared,
            } => {
                let dv = self.value(*dist).data();
                let gd = slot(grads, *dist, dv.len());
                let up = g[0] * *scale;
                for (((x, &d), &t), &w) in gd.iter_mut().zip(dv).zip(target).zip(weights) {
                    let gap = d - t;
                    let local = if *squared {
                        T::lit(2.0) * gap
                    } else if gap > T::zero() {
                        T::one()
                    } else if gap < T::zero() {
                        -T::one()
                    } else {
                        T::zero()
                    };
                    *x = *x + up * w * local;
                }
            }
        }
    }
}

fn slot<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, n: usize) -> &mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); n])
}

fn accumulate<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (x, &y) in dst.iter_mut().zip(src) {
        *x = *x + y;
    }
}

/// Gradients of one backward pass, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of `v`; zero when `v` does not reach the loss.
    pub fn get(&self, v: Var) -> Tensor<T> {
        match &self.grads[v.0] {
            Some(g) => Tensor::new(&self.shapes[v.0], g.clone()).expect("gradient shape"),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor<T> {
        match self.grads[v.0].take() {
            Some(g) => Tensor::new(&self.shapes[v.0], g).expect("gradient shape"),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}
