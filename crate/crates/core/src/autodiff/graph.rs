use crate::autodiff::kernels::{self, ConvGeom};
use crate::error::{dim_err, Error, Result};
use crate::tensor::{numel, Scalar, Tensor};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch statistics produced by a training-mode batch norm, for updating
/// running estimates outside the graph.
#[derive(Debug, Clone)]
pub struct BatchStats<S> {
    pub mean: Vec<S>,
    /// Unbiased variance.
    pub var: Vec<S>,
}

pub const BN_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op<S> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        col: Option<Vec<S>>,
    },
    Conv1x1 {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    AdaptiveAvgPool {
        x: Var,
    },
    Bilinear {
        x: Var,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    Sigmoid {
        x: Var,
    },
    Relu {
        x: Var,
    },
    MatMul {
        a: Var,
        b: Var,
        trans_a: bool,
        trans_b: bool,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: S,
    },
    Concat {
        xs: Vec<Var>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<S>,
        inv_std: Vec<S>,
        batch_stats: bool,
    },
    Reshape {
        x: Var,
    },
    Abs {
        x: Var,
    },
    Square {
        x: Var,
    },
    Mean {
        x: Var,
    },
    Sum {
        x: Var,
    },
    MinMaxNormalize {
        x: Var,
        denom: Vec<S>,
        argmin: Vec<usize>,
        argmax: Vec<usize>,
    },
    SoftMargin {
        x: Var,
        target: Vec<S>,
    },
}

impl<S> Op<S> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::Conv1x1 { .. } => "conv1x1",
            Op::AdaptiveAvgPool { .. } => "adaptive_avg_pool",
            Op::Bilinear { .. } => "bilinear_resize",
            Op::Softmax { .. } => "softmax",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Relu { .. } => "relu",
            Op::MatMul { .. } => "matmul",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Concat { .. } => "concat_channels",
            Op::BatchNorm { .. } => "batchnorm2d",
            Op::Reshape { .. } => "reshape",
            Op::Abs { .. } => "abs",
            Op::Square { .. } => "square",
            Op::Mean { .. } => "mean",
            Op::Sum { .. } => "sum",
            Op::MinMaxNormalize { .. } => "minmax_normalize",
            Op::SoftMargin { .. } => "multilabel_soft_margin",
        }
    }
}

#[derive(Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// A single-threaded tape of tensor operations supporting one reverse pass.
///
/// Nodes are appended in evaluation order, so index order is a topological
/// order and the backward sweep simply walks the tape in reverse.
#[derive(Debug)]
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    check_finite: bool,
    fault: Option<&'static str>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of one scalar with respect to every leaf that requires them.
#[derive(Debug)]
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            check_finite: cfg!(debug_assertions),
            fault: None,
        }
    }

    /// Enable or disable the per-op non-finite scan.
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    /// Deliberately corrupt the backward rule of the named op (scales the
    /// propagated gradient by 1.5). Used to prove the gradient checker bites.
    pub fn inject_backward_fault(&mut self, op: &'static str) {
        self.fault = Some(op);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    /// A constant input.
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.push_leaf(t, false)
    }

    /// A leaf whose gradient will be reported by [`Graph::backward`].
    pub fn variable(&mut self, t: Tensor<S>) -> Var {
        self.push_leaf(t, true)
    }

    fn push_leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, inputs: &[Var]) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn val(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    // ---- forward ops -------------------------------------------------

    /// 2-D cross-correlation. `x: [N,Cin,H,W]`, `w: [Cout,Cin,kh,kw]`,
    /// optional `b: [Cout]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let xs = self.val(x).shape();
        let ws = self.val(w).shape();
        if xs.len() != 4 || ws.len() != 4 {
            return dim_err(format!("conv2d: need 4-d input and weight, got {xs:?} and {ws:?}"));
        }
        if xs[1] != ws[1] {
            return dim_err(format!("conv2d: input channels {} vs weight {}", xs[1], ws[1]));
        }
        if stride == 0 {
            return dim_err("conv2d: stride must be ≥ 1");
        }
        if let Some(b) = b {
            self.val(b).expect_shape("conv2d bias", &[ws[0]])?;
        }
        let (hp, wp) = (xs[2] + 2 * padding, xs[3] + 2 * padding);
        if hp < ws[2] || wp < ws[3] {
            return dim_err(format!(
                "conv2d: kernel {}×{} larger than padded input {hp}×{wp}",
                ws[2], ws[3]
            ));
        }
        let geom = ConvGeom {
            n: xs[0],
            cin: xs[1],
            h: xs[2],
            w: xs[3],
            cout: ws[0],
            kh: ws[2],
            kw: ws[3],
            stride,
            pad: padding,
            ho: (hp - ws[2]) / stride + 1,
            wo: (wp - ws[3]) / stride + 1,
        };
        let (out, col) = kernels::conv2d_forward(
            self.val(x).data(),
            self.val(w).data(),
            b.map(|b| self.val(b).data()),
            &geom,
        );
        let col = self.needs(w).then_some(col);
        let t = Tensor::from_parts(vec![geom.n, geom.cout, geom.ho, geom.wo], out);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(t, Op::Conv2d { x, w, b, geom, col }, &inputs)
    }

    /// Per-position linear map across channels. `x: [N,C,...]`, `w: [K,C]`,
    /// optional `b: [K]`; output `[N,K,...]`.
    pub fn conv1x1(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.val(x).shape().to_vec();
        let ws = self.val(w).shape();
        if xs.len() < 2 || ws.len() != 2 {
            return dim_err(format!("conv1x1: bad shapes {xs:?} and {ws:?}"));
        }
        if ws[1] != xs[1] {
            return dim_err(format!("conv1x1: input channels {} vs weight {}", xs[1], ws[1]));
        }
        let (n, c, k) = (xs[0], xs[1], ws[0]);
        if let Some(b) = b {
            self.val(b).expect_shape("conv1x1 bias", &[k])?;
        }
        let r: usize = xs[2..].iter().product();
        let mut out = vec![S::zero(); n * k * r];
        let xd = self.val(x).data();
        let wd = self.val(w).data();
        for ni in 0..n {
            S::gemm(
                k,
                c,
                r,
                wd,
                false,
                &xd[ni * c * r..(ni + 1) * c * r],
                false,
                &mut out[ni * k * r..(ni + 1) * k * r],
                false,
            );
        }
        if let Some(b) = b {
            let bd = self.val(b).data();
            for (i, chunk) in out.chunks_mut(r).enumerate() {
                let bk = bd[i % k];
                chunk.iter_mut().for_each(|v| *v = *v + bk);
            }
        }
        let mut shape = xs.clone();
        shape[1] = k;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(Tensor::from_parts(shape, out), Op::Conv1x1 { x, w, b }, &inputs)
    }

    pub fn adaptive_avg_pool(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let xs = self.val(x).shape().to_vec();
        self.val(x).expect_ndim("adaptive_avg_pool", 4)?;
        if out_h == 0 || out_w == 0 || out_h > xs[2] || out_w > xs[3] {
            return dim_err(format!(
                "adaptive_avg_pool: output {out_h}×{out_w} invalid for input {}×{}",
                xs[2], xs[3]
            ));
        }
        let out = kernels::adaptive_avg_pool_forward(
            self.val(x).data(),
            xs[0] * xs[1],
            xs[2],
            xs[3],
            out_h,
            out_w,
        );
        let t = Tensor::from_parts(vec![xs[0], xs[1], out_h, out_w], out);
        self.push(t, Op::AdaptiveAvgPool { x }, &[x])
    }

    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let xs = self.val(x).shape().to_vec();
        self.val(x).expect_ndim("bilinear_resize", 4)?;
        if out_h == 0 || out_w == 0 {
            return dim_err("bilinear_resize: zero output extent");
        }
        if (out_h, out_w) == (xs[2], xs[3]) {
            // exact identity under the half-pixel mapping
            let t = self.val(x).clone();
            return self.push(t, Op::Reshape { x }, &[x]);
        }
        let out =
            kernels::bilinear_forward(self.val(x).data(), xs[0] * xs[1], xs[2], xs[3], out_h, out_w);
        let t = Tensor::from_parts(vec![xs[0], xs[1], out_h, out_w], out);
        self.push(t, Op::Bilinear { x }, &[x])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xs = self.val(x).shape();
        if axis >= xs.len() {
            return dim_err(format!("softmax: axis {axis} out of range for {xs:?}"));
        }
        let (o, l, i) = kernels::split_axis(xs, axis);
        let out = kernels::softmax_forward(self.val(x).data(), o, l, i);
        let t = Tensor::from_parts(xs.to_vec(), out);
        self.push(t, Op::Softmax { x, axis }, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let t = self.val(x).map(kernels::sigmoid);
        self.push(t, Op::Sigmoid { x }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.val(x).map(|v| v.max(S::zero()));
        self.push(t, Op::Relu { x }, &[x])
    }

    /// Batched matrix product `op(a)·op(b)` over `[B,M,K]`/`[B,K,N]`
    /// (2-D operands are treated as a batch of one).
    pub fn matmul(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.val(a).shape().to_vec(), self.val(b).shape().to_vec());
        if sa.len() != sb.len() || !(sa.len() == 2 || sa.len() == 3) {
            return dim_err(format!("matmul: unsupported shapes {sa:?} × {sb:?}"));
        }
        let batched = sa.len() == 3;
        let (bsz, ra, ca) = if batched { (sa[0], sa[1], sa[2]) } else { (1, sa[0], sa[1]) };
        let (bszb, rb, cb) = if batched { (sb[0], sb[1], sb[2]) } else { (1, sb[0], sb[1]) };
        if bsz != bszb {
            return dim_err(format!("matmul: batch {bsz} vs {bszb}"));
        }
        let (m, k) = if trans_a { (ca, ra) } else { (ra, ca) };
        let (k2, n) = if trans_b { (cb, rb) } else { (rb, cb) };
        if k != k2 {
            return dim_err(format!(
                "matmul: inner dims {k} vs {k2} for {sa:?}{} × {sb:?}{}",
                if trans_a { "ᵀ" } else { "" },
                if trans_b { "ᵀ" } else { "" }
            ));
        }
        let mut out = vec![S::zero(); bsz * m * n];
        let (ad, bd) = (self.val(a).data(), self.val(b).data());
        for bi in 0..bsz {
            S::gemm(
                m,
                k,
                n,
                &ad[bi * m * k..(bi + 1) * m * k],
                trans_a,
                &bd[bi * k * n..(bi + 1) * k * n],
                trans_b,
                &mut out[bi * m * n..(bi + 1) * m * n],
                false,
            );
        }
        let shape = if batched { vec![bsz, m, n] } else { vec![m, n] };
        self.push(
            Tensor::from_parts(shape, out),
            Op::MatMul {
                a,
                b,
                trans_a,
                trans_b,
            },
            &[a, b],
        )
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(S, S) -> S) -> Result<Tensor<S>> {
        let (ta, tb) = (self.val(a), self.val(b));
        if ta.shape() != tb.shape() {
            return dim_err(format!("{what}: shapes {:?} and {:?} differ", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_parts(ta.shape().to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        self.push(t, Op::Add { a, b }, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        self.push(t, Op::Sub { a, b }, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        self.push(t, Op::Mul { a, b }, &[a, b])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let factor = S::from_f64(factor);
        let t = self.val(x).map(|v| v * factor);
        self.push(t, Op::Scale { x, factor }, &[x])
    }

    /// Concatenate `[N,Ci,...]` tensors along the channel axis.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = match xs.first() {
            Some(&v) => self.val(v).shape().to_vec(),
            None => return Err(Error::Argument("concat_channels: no inputs".into())),
        };
        if first.len() < 2 {
            return dim_err("concat_channels: need at least 2-d inputs");
        }
        let mut total_c = 0;
        for &v in xs {
            let s = self.val(v).shape();
            if s.len() != first.len() || s[0] != first[0] || s[2..] != first[2..] {
                return dim_err(format!("concat_channels: {s:?} incompatible with {first:?}"));
            }
            total_c += s[1];
        }
        let n = first[0];
        let r: usize = first[2..].iter().product();
        let mut out = Vec::with_capacity(n * total_c * r);
        for ni in 0..n {
            for &v in xs {
                let t = self.val(v);
                let c = t.shape()[1];
                out.extend_from_slice(&t.data()[ni * c * r..(ni + 1) * c * r]);
            }
        }
        let mut shape = first;
        shape[1] = total_c;
        self.push(Tensor::from_parts(shape, out), Op::Concat { xs: xs.to_vec() }, xs)
    }

    /// Batch normalization over `[N,C,H,W]` with batch statistics.
    /// Returns the output and the statistics for running-estimate updates.
    pub fn batchnorm2d_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
    ) -> Result<(Var, BatchStats<S>)> {
        let xs = self.val(x).shape().to_vec();
        self.bn_check(&xs, gamma, beta)?;
        let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        let m = n * hw;
        let xd = self.val(x).data();
        let mut mean = vec![S::zero(); c];
        let mut var = vec![S::zero(); c];
        for ci in 0..c {
            let mut acc = 0.0f64;
            for ni in 0..n {
                acc += xd[(ni * c + ci) * hw..(ni * c + ci + 1) * hw]
                    .iter()
                    .map(|v| v.as_f64())
                    .sum::<f64>();
            }
            let mu = acc / m as f64;
            let mut sq = 0.0f64;
            for ni in 0..n {
                sq += xd[(ni * c + ci) * hw..(ni * c + ci + 1) * hw]
                    .iter()
                    .map(|v| (v.as_f64() - mu).powi(2))
                    .sum::<f64>();
            }
            mean[ci] = S::from_f64(mu);
            var[ci] = S::from_f64(sq / m as f64);
        }
        let inv_std: Vec<S> = var
            .iter()
            .map(|&v| S::one() / (v + S::from_f64(BN_EPS)).sqrt())
            .collect();
        let unbiased = if m > 1 {
            let f = S::from_f64(m as f64 / (m - 1) as f64);
            var.iter().map(|&v| v * f).collect()
        } else {
            var.clone()
        };
        let out = self.bn_apply(x, gamma, beta, &mean, &inv_std, true)?;
        Ok((out, BatchStats { mean, var: unbiased }))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batchnorm2d_frozen(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[S],
        running_var: &[S],
    ) -> Result<Var> {
        let xs = self.val(x).shape().to_vec();
        self.bn_check(&xs, gamma, beta)?;
        if running_mean.len() != xs[1] || running_var.len() != xs[1] {
            return dim_err("batchnorm2d: running statistics length mismatch");
        }
        let inv_std: Vec<S> = running_var
            .iter()
            .map(|&v| S::one() / (v + S::from_f64(BN_EPS)).sqrt())
            .collect();
        self.bn_apply(x, gamma, beta, running_mean, &inv_std, false)
    }

    fn bn_check(&self, xs: &[usize], gamma: Var, beta: Var) -> Result<()> {
        if xs.len() != 4 {
            return dim_err(format!("batchnorm2d: need 4-d input, got {xs:?}"));
        }
        self.val(gamma).expect_shape("batchnorm2d gamma", &[xs[1]])?;
        self.val(beta).expect_shape("batchnorm2d beta", &[xs[1]])
    }

    fn bn_apply(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[S],
        inv_std: &[S],
        batch_stats: bool,
    ) -> Result<Var> {
        let xs = self.val(x).shape().to_vec();
        let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        let xd = self.val(x).data();
        let (gd, bd) = (self.val(gamma).data(), self.val(beta).data());
        let mut xhat = vec![S::zero(); xd.len()];
        let mut out = vec![S::zero(); xd.len()];
        for ni in 0..n {
            for ci in 0..c {
                let range = (ni * c + ci) * hw..(ni * c + ci + 1) * hw;
                for i in range {
                    let h = (xd[i] - mean[ci]) * inv_std[ci];
                    xhat[i] = h;
                    out[i] = gd[ci] * h + bd[ci];
                }
            }
        }
        self.push(
            Tensor::from_parts(xs, out),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std: inv_std.to_vec(),
                batch_stats,
            },
            &[x, gamma, beta],
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.val(x);
        if numel(shape) != t.len() || shape.contains(&0) {
            return dim_err(format!("reshape: {:?} → {shape:?}", t.shape()));
        }
        let t = Tensor::from_parts(shape.to_vec(), t.data().to_vec());
        self.push(t, Op::Reshape { x }, &[x])
    }

    /// `[N,C,H,W]` → `[N,C,H·W]`
    pub fn flatten_spatial(&mut self, x: Var) -> Result<Var> {
        let s = self.val(x).shape().to_vec();
        if s.len() != 4 {
            return dim_err(format!("flatten_spatial: need 4-d input, got {s:?}"));
        }
        self.reshape(x, &[s[0], s[1], s[2] * s[3]])
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let t = self.val(x).map(|v| v.abs());
        self.push(t, Op::Abs { x }, &[x])
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let t = self.val(x).map(|v| v * v);
        self.push(t, Op::Square { x }, &[x])
    }

    /// Mean of all elements, as a `[1]` tensor.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.val(x);
        let m = t.sum() / S::from_f64(t.len() as f64);
        self.push(Tensor::scalar(m), Op::Mean { x }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.val(x).sum();
        self.push(Tensor::scalar(s), Op::Sum { x }, &[x])
    }

    /// Min-max normalization of every row along the last axis:
    /// `(v − min)/(max − min + eps)`.
    pub fn minmax_normalize(&mut self, x: Var, eps: f64) -> Result<Var> {
        let t = self.val(x);
        let p = *t.shape().last().expect("non-empty shape");
        let eps = S::from_f64(eps);
        let rows = t.len() / p;
        let mut out = vec![S::zero(); t.len()];
        let mut denom = Vec::with_capacity(rows);
        let mut argmin = Vec::with_capacity(rows);
        let mut argmax = Vec::with_capacity(rows);
        for (r, row) in t.data().chunks(p).enumerate() {
            let (mut lo, mut hi) = (0, 0);
            for (i, &v) in row.iter().enumerate() {
                if v < row[lo] {
                    lo = i;
                }
                if v > row[hi] {
                    hi = i;
                }
            }
            let d = row[hi] - row[lo] + eps;
            for (i, &v) in row.iter().enumerate() {
                out[r * p + i] = (v - row[lo]) / d;
            }
            denom.push(d);
            argmin.push(lo);
            argmax.push(hi);
        }
        let t = Tensor::from_parts(t.shape().to_vec(), out);
        self.push(
            t,
            Op::MinMaxNormalize {
                x,
                denom,
                argmin,
                argmax,
            },
            &[x],
        )
    }

    /// Mean multi-label soft-margin loss of logits `x` against binary
    /// targets of the same shape.
    pub fn multilabel_soft_margin(&mut self, x: Var, target: &Tensor<S>) -> Result<Var> {
        let t = self.val(x);
        if t.shape() != target.shape() {
            return dim_err(format!(
                "multilabel_soft_margin: logits {:?} vs targets {:?}",
                t.shape(),
                target.shape()
            ));
        }
        if let Some(bad) = target
            .data()
            .iter()
            .find(|&&y| y != S::zero() && y != S::one())
        {
            return Err(Error::Argument(format!(
                "multilabel_soft_margin: target value {bad} is not binary"
            )));
        }
        let total: f64 = t
            .data()
            .iter()
            .zip(target.data())
            .map(|(&z, &y)| {
                // -[y·log σ(z) + (1-y)·log(1-σ(z))]
                (y * kernels::softplus(-z) + (S::one() - y) * kernels::softplus(z)).as_f64()
            })
            .sum();
        let loss = S::from_f64(total / t.len() as f64);
        self.push(
            Tensor::scalar(loss),
            Op::SoftMargin {
                x,
                target: target.data().to_vec(),
            },
            &[x],
        )
    }

    // ---- reverse pass ------------------------------------------------

    /// Reverse-mode sweep from a single-element output.
    pub fn backward(&self, output: Var) -> Result<Gradients<S>> {
        let out = self.val(output);
        if out.len() != 1 {
            return dim_err(format!("backward: output must be scalar, got {:?}", out.shape()));
        }
        self.backward_with(output, Tensor::full(out.shape(), S::one()))
    }

    /// Reverse-mode sweep seeded with an explicit output cotangent.
    pub fn backward_with(&self, output: Var, seed: Tensor<S>) -> Result<Gradients<S>> {
        seed.expect_shape("backward seed", self.val(output).shape())?;
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed);
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let mut contribs = self.node_backward(node, &g)?;
            if self.fault == Some(node.op.name()) {
                for (_, t) in contribs.iter_mut() {
                    t.data_mut().iter_mut().for_each(|v| *v = *v * S::from_f64(1.5));
                }
            }
            for (v, t) in contribs {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(t.data())
                        .for_each(|(a, &b)| *a = *a + b),
                    slot @ None => *slot = Some(t),
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn node_backward(&self, node: &Node<S>, g: &Tensor<S>) -> Result<Vec<(Var, Tensor<S>)>> {
        let gd = g.data();
        let like = |v: Var, data: Vec<S>| Tensor::from_parts(self.val(v).shape().to_vec(), data);
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom, col } => {
                let grads = kernels::conv2d_backward(
                    self.val(*x).data(),
                    col.as_deref(),
                    self.val(*w).data(),
                    gd,
                    geom,
                    (self.needs(*x), self.needs(*w), b.is_some_and(|b| self.needs(b))),
                );
                if let Some(dx) = grads.dx {
                    out.push((*x, like(*x, dx)));
                }
                if let Some(dw) = grads.dw {
                    out.push((*w, like(*w, dw)));
                }
                if let (Some(b), Some(db)) = (b, grads.db) {
                    out.push((*b, like(*b, db)));
                }
            }
            Op::Conv1x1 { x, w, b } => {
                let xs = self.val(*x).shape();
                let (n, c) = (xs[0], xs[1]);
                let k = self.val(*w).shape()[0];
                let r = self.val(*x).len() / (n * c);
                let xd = self.val(*x).data();
                let wd = self.val(*w).data();
                if self.needs(*w) {
                    let mut dw = vec![S::zero(); k * c];
                    for ni in 0..n {
                        S::gemm(
                            k,
                            r,
                            c,
                            &gd[ni * k * r..(ni + 1) * k * r],
                            false,
                            &xd[ni * c * r..(ni + 1) * c * r],
                            true,
                            &mut dw,
                            true,
                        );
                    }
                    out.push((*w, like(*w, dw)));
                }
                if self.needs(*x) {
                    let mut dx = vec![S::zero(); n * c * r];
                    for ni in 0..n {
                        S::gemm(
                            c,
                            k,
                            r,
                            wd,
                            true,
                            &gd[ni * k * r..(ni + 1) * k * r],
                            false,
                            &mut dx[ni * c * r..(ni + 1) * c * r],
                            false,
                        );
                    }
                    out.push((*x, like(*x, dx)));
                }
                if let Some(b) = b.filter(|&b| self.needs(b)) {
                    let mut db = vec![S::zero(); k];
                    for (i, chunk) in gd.chunks(r).enumerate() {
                        db[i % k] = db[i % k] + chunk.iter().copied().sum::<S>();
                    }
                    out.push((b, like(b, db)));
                }
            }
            Op::AdaptiveAvgPool { x } => {
                let xs = self.val(*x).shape();
                let gs = g.shape();
                let dx = kernels::adaptive_avg_pool_backward(
                    gd,
                    xs[0] * xs[1],
                    xs[2],
                    xs[3],
                    gs[2],
                    gs[3],
                );
                out.push((*x, like(*x, dx)));
            }
            Op::Bilinear { x } => {
                let xs = self.val(*x).shape();
                let gs = g.shape();
                let dx =
                    kernels::bilinear_backward(gd, xs[0] * xs[1], xs[2], xs[3], gs[2], gs[3]);
                out.push((*x, like(*x, dx)));
            }
            Op::Softmax { x, axis } => {
                let (o, l, i) = kernels::split_axis(node.value.shape(), *axis);
                let dx = kernels::softmax_backward(node.value.data(), gd, o, l, i);
                out.push((*x, like(*x, dx)));
            }
            Op::Sigmoid { x } => {
                let dx = node
                    .value
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&y, &gv)| gv * y * (S::one() - y))
                    .collect();
                out.push((*x, like(*x, dx)));
            }
            Op::Relu { x } => {
                let dx = self
                    .val(*x)
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&v, &gv)| if v > S::zero() { gv } else { S::zero() })
                    .collect();
                out.push((*x, like(*x, dx)));
            }
            Op::MatMul {
                a,
                b,
                trans_a,
                trans_b,
            } => {
                let (ta, tb) = (*trans_a, *trans_b);
                let sa = self.val(*a).shape();
                let sb = self.val(*b).shape();
                let batched = sa.len() == 3;
                let bsz = if batched { sa[0] } else { 1 };
                let (ra, ca) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let (rb, cb) = (sb[sb.len() - 2], sb[sb.len() - 1]);
                let (m, k) = if ta { (ca, ra) } else { (ra, ca) };
                let n = if tb { rb } else { cb };
                let (ad, bd) = (self.val(*a).data(), self.val(*b).data());
                if self.needs(*a) {
                    let mut da = vec![S::zero(); bsz * m * k];
                    for bi in 0..bsz {
                        let gs = &gd[bi * m * n..(bi + 1) * m * n];
                        let bs = &bd[bi * k * n..(bi + 1) * k * n];
                        let dst = &mut da[bi * m * k..(bi + 1) * m * k];
                        if ta {
                            S::gemm(k, n, m, bs, tb, gs, true, dst, false);
                        } else {
                            S::gemm(m, n, k, gs, false, bs, !tb, dst, false);
                        }
                    }
                    out.push((*a, like(*a, da)));
                }
                if self.needs(*b) {
                    let mut db = vec![S::zero(); bsz * k * n];
                    for bi in 0..bsz {
                        let gs = &gd[bi * m * n..(bi + 1) * m * n];
                        let as_ = &ad[bi * m * k..(bi + 1) * m * k];
                        let dst = &mut db[bi * k * n..(bi + 1) * k * n];
                        if tb {
                            S::gemm(n, m, k, gs, true, as_, ta, dst, false);
                        } else {
                            S::gemm(k, m, n, as_, !ta, gs, false, dst, false);
                        }
                    }
                    out.push((*b, like(*b, db)));
                }
            }
            Op::Add { a, b } => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Sub { a, b } => {
                out.push((*a, g.clone()));
                out.push((*b, g.map(|v| -v)));
            }
            Op::Mul { a, b } => {
                let (ad, bd) = (self.val(*a).data(), self.val(*b).data());
                let da = gd.iter().zip(bd).map(|(&gv, &y)| gv * y).collect();
                let db = gd.iter().zip(ad).map(|(&gv, &x)| gv * x).collect();
                out.push((*a, like(*a, da)));
                out.push((*b, like(*b, db)));
            }
            Op::Scale { x, factor } => {
                out.push((*x, g.map(|v| v * *factor)));
            }
            Op::Concat { xs } => {
                let shape = node.value.shape();
                let (n, total_c) = (shape[0], shape[1]);
                let r: usize = shape[2..].iter().product();
                let mut offset = 0;
                for &v in xs {
                    let c = self.val(v).shape()[1];
                    let mut d = Vec::with_capacity(n * c * r);
                    for ni in 0..n {
                        let base = (ni * total_c + offset) * r;
                        d.extend_from_slice(&gd[base..base + c * r]);
                    }
                    out.push((v, like(v, d)));
                    offset += c;
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let xs = self.val(*x).shape();
                let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                let m = S::from_f64((n * hw) as f64);
                let gam = self.val(*gamma).data();
                let mut dgamma = vec![S::zero(); c];
                let mut dbeta = vec![S::zero(); c];
                for ni in 0..n {
                    for ci in 0..c {
                        for i in (ni * c + ci) * hw..(ni * c + ci + 1) * hw {
                            dbeta[ci] = dbeta[ci] + gd[i];
                            dgamma[ci] = dgamma[ci] + gd[i] * xhat[i];
                        }
                    }
                }
                if self.needs(*x) {
                    let mut dx = vec![S::zero(); gd.len()];
                    for ni in 0..n {
                        for ci in 0..c {
                            let scale = gam[ci] * inv_std[ci];
                            for i in (ni * c + ci) * hw..(ni * c + ci + 1) * hw {
                                dx[i] = if *batch_stats {
                                    scale / m * (m * gd[i] - dbeta[ci] - xhat[i] * dgamma[ci])
                                } else {
                                    scale * gd[i]
                                };
                            }
                        }
                    }
                    out.push((*x, like(*x, dx)));
                }
                out.push((*gamma, like(*gamma, dgamma)));
                out.push((*beta, like(*beta, dbeta)));
            }
            Op::Reshape { x } => {
                out.push((*x, like(*x, gd.to_vec())));
            }
            Op::Abs { x } => {
                let dx = self
                    .val(*x)
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&v, &gv)| {
                        if v > S::zero() {
                            gv
                        } else if v < S::zero() {
                            -gv
                        } else {
                            S::zero()
                        }
                    })
                    .collect();
                out.push((*x, like(*x, dx)));
            }
            Op::Square { x } => {
                let two = S::from_f64(2.0);
                let dx = self
                    .val(*x)
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&v, &gv)| two * v * gv)
                    .collect();
                out.push((*x, like(*x, dx)));
            }
            Op::Mean { x } => {
                let len = self.val(*x).len();
                let gv = gd[0] / S::from_f64(len as f64);
                out.push((*x, like(*x, vec![gv; len])));
            }
            Op::Sum { x } => {
                let len = self.val(*x).len();
                out.push((*x, like(*x, vec![gd[0]; len])));
            }
            Op::MinMaxNormalize {
                x,
                denom,
                argmin,
                argmax,
            } => {
                let y = node.value.data();
                let p = *node.value.shape().last().expect("non-empty");
                let mut dx = vec![S::zero(); y.len()];
                for r in 0..denom.len() {
                    let d = denom[r];
                    let base = r * p;
                    let mut to_min = S::zero();
                    let mut to_max = S::zero();
                    for i in 0..p {
                        let gv = gd[base + i];
                        dx[base + i] = gv / d;
                        to_min = to_min + gv * (y[base + i] - S::one()) / d;
                        to_max = to_max - gv * y[base + i] / d;
                    }
                    dx[base + argmin[r]] = dx[base + argmin[r]] + to_min;
                    dx[base + argmax[r]] = dx[base + argmax[r]] + to_max;
                }
                out.push((*x, like(*x, dx)));
            }
            Op::SoftMargin { x, target } => {
                let xv = self.val(*x).data();
                let scale = gd[0] / S::from_f64(xv.len() as f64);
                let dx = xv
                    .iter()
                    .zip(target)
                    .map(|(&z, &y)| (kernels::sigmoid(z) - y) * scale)
                    .collect();
                out.push((*x, like(*x, dx)));
            }
        }
        Ok(out)
    }
}
