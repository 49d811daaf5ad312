//! Append-only reverse-mode tape.
//!
//! Every op validates shapes, computes its value eagerly, checks the result
//! for NaN/Inf, and records a node. Parent indices are always smaller than
//! the child index, so the reverse sweep visits each node exactly once and
//! replay of the same inputs is bit-identical.
//!
//! Ops with kinks (relu, the absolute-difference block of pair features,
//! probability clamping inside the reparameterized edge sample) append sign
//! markers to a signature vector. Two forward builds with identical
//! signatures took the same smooth branch everywhere, which is what the
//! finite-difference gradient checks key on.

use serde::{Deserialize, Serialize};

use crate::distributions::{self, match_poisson_rate_grad, GaussianParams};
use crate::error::{Error, Result};

use super::tensor::Tensor;

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct VarId(pub(crate) usize);

impl VarId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeFeatureMode {
    /// `[h_i ; h_j ; |h_i - h_j| ; h_i * h_j]` per pair.
    FourBlock,
    /// `[h_i ; h_j]` per pair.
    Concat,
}

impl EdgeFeatureMode {
    pub fn width(self, d: usize) -> usize {
        match self {
            EdgeFeatureMode::FourBlock => 4 * d,
            EdgeFeatureMode::Concat => 2 * d,
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Matmul { a: VarId, b: VarId },
    Transpose { x: VarId },
    Add { a: VarId, b: VarId },
    Sub { a: VarId, b: VarId },
    Mul { a: VarId, b: VarId },
    Affine { x: VarId, scale: f64 },
    AddRowVec { x: VarId, v: VarId },
    ConcatCols { a: VarId, b: VarId },
    Relu { x: VarId },
    Softplus { x: VarId },
    Sigmoid { x: VarId },
    Tanh { x: VarId },
    Exp { x: VarId },
    Log { x: VarId },
    Sqrt { x: VarId },
    Recip { x: VarId },
    Sum { x: VarId },
    MeanPoolRows { x: VarId, mask: Vec<bool> },
    MaskedSoftmaxRows { x: VarId, key_mask: Vec<bool> },
    LogSoftmaxRows { x: VarId },
    Reshape { x: VarId },
    PairFeatures { h: VarId, pairs: Vec<(usize, usize)>, mode: EdgeFeatureMode },
    ScatterPairs { w: VarId, pairs: Vec<(usize, usize)>, symmetric: bool },
    ScaleRows { x: VarId, v: VarId },
    ScaleCols { x: VarId, v: VarId },
    LaplaceReparam { u: VarId, delta: VarId, b: VarId, eps: Vec<f64> },
    MatchPoissonRate { u: VarId, delta: VarId },
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Gradients of one output with respect to every tape node that needed one.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient with respect to `v`, if `v` influenced the output and
    /// requires gradients.
    pub fn wrt(&self, v: VarId) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    kinks: Vec<i8>,
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

    pub fn value(&self, v: VarId) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: VarId) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Sign markers of every kinked op recorded so far, in construction order.
    pub fn kink_signature(&self) -> &[i8] {
        &self.kinks
    }

    /// Trainable input.
    pub fn leaf(&mut self, value: Tensor) -> VarId {
        self.push_unchecked(value, true, Op::Leaf)
    }

    /// Non-trainable input.
    pub fn constant(&mut self, value: Tensor) -> VarId {
        self.push_unchecked(value, false, Op::Leaf)
    }

    fn push_unchecked(&mut self, value: Tensor, requires_grad: bool, op: Op) -> VarId {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        VarId(self.nodes.len() - 1)
    }

    fn push(&mut self, context: &'static str, value: Tensor, requires_grad: bool, op: Op) -> Result<VarId> {
        value.check_finite(context)?;
        Ok(self.push_unchecked(value, requires_grad, op))
    }

    fn val(&self, v: VarId) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn rg(&self, vars: &[VarId]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn expect_same_shape(&self, context: &'static str, a: VarId, b: VarId) -> Result<()> {
        if self.val(a).shape() != self.val(b).shape() {
            return Err(Error::shape(context, self.val(a).shape_str(), self.val(b).shape_str()));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let out = self.val(a).matmul(self.val(b))?;
        let rg = self.rg(&[a, b]);
        self.push("matmul", out, rg, Op::Matmul { a, b })
    }

    pub fn transpose(&mut self, x: VarId) -> Result<VarId> {
        let out = self.val(x).transpose();
        let rg = self.rg(&[x]);
        self.push("transpose", out, rg, Op::Transpose { x })
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.expect_same_shape("add", a, b)?;
        let mut out = self.val(a).clone();
        out.add_assign(self.val(b))?;
        let rg = self.rg(&[a, b]);
        self.push("add", out, rg, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.expect_same_shape("sub", a, b)?;
        let mut out = self.val(a).clone();
        out.add_scaled(self.val(b), -1.0)?;
        let rg = self.rg(&[a, b]);
        self.push("sub", out, rg, Op::Sub { a, b })
    }

    /// Elementwise product of same-shape tensors.
    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.expect_same_shape("mul", a, b)?;
        let (r, c) = self.val(a).shape();
        let data = self
            .val(a)
            .data()
            .iter()
            .zip(self.val(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(r, c, data)?;
        let rg = self.rg(&[a, b]);
        self.push("mul", out, rg, Op::Mul { a, b })
    }

    /// `scale * x + shift`, elementwise with scalar coefficients.
    pub fn affine(&mut self, x: VarId, scale: f64, shift: f64) -> Result<VarId> {
        let out = self.val(x).map(|v| scale * v + shift);
        let rg = self.rg(&[x]);
        self.push("affine", out, rg, Op::Affine { x, scale })
    }

    /// Adds a 1 x n row vector to every row of an m x n matrix.
    pub fn add_row_vec(&mut self, x: VarId, v: VarId) -> Result<VarId> {
        let (m, n) = self.val(x).shape();
        if self.val(v).shape() != (1, n) {
            return Err(Error::shape("add_row_vec", format!("1x{n}"), self.val(v).shape_str()));
        }
        let mut out = self.val(x).clone();
        for i in 0..m {
            for j in 0..n {
                let v_j = self.val(v).get(0, j);
                out.set(i, j, out.get(i, j) + v_j);
            }
        }
        let rg = self.rg(&[x, v]);
        self.push("add_row_vec", out, rg, Op::AddRowVec { x, v })
    }

    /// Column-wise concatenation of two matrices with equal row counts.
    pub fn concat_cols(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (ra, ca) = self.val(a).shape();
        let (rb, cb) = self.val(b).shape();
        if ra != rb {
            return Err(Error::shape("concat_cols", format!("{ra} rows"), format!("{rb} rows")));
        }
        let mut out = Tensor::zeros(ra, ca + cb);
        for i in 0..ra {
            for j in 0..ca {
                out.set(i, j, self.val(a).get(i, j));
            }
            for j in 0..cb {
                out.set(i, ca + j, self.val(b).get(i, j));
            }
        }
        let rg = self.rg(&[a, b]);
        self.push("concat_cols", out, rg, Op::ConcatCols { a, b })
    }

    /// Rectifier; the subgradient at zero is taken as zero.
    pub fn relu(&mut self, x: VarId) -> Result<VarId> {
        let signs: Vec<i8> = self.val(x).data().iter().map(|&v| if v > 0.0 { 1 } else { -1 }).collect();
        self.kinks.extend(signs);
        let out = self.val(x).map(|v| v.max(0.0));
        let rg = self.rg(&[x]);
        self.push("relu", out, rg, Op::Relu { x })
    }

    pub fn softplus(&mut self, x: VarId) -> Result<VarId> {
        let out = self.val(x).map(softplus_scalar);
        let rg = self.rg(&[x]);
        self.push("softplus", out, rg, Op::Softplus { x })
    }

    pub fn sigmoid(&mut self, x: VarId) -> Result<VarId> {
        let out = self.val(x).map(sigmoid_scalar);
        let rg = self.rg(&[x]);
        self.push("sigmoid", out, rg, Op::Sigmoid { x })
    }

    pub fn tanh(&mut self, x: VarId) -> Result<VarId> {
        let out = self.val(x).map(f64::tanh);
        let rg = self.rg(&[x]);
        self.push("tanh", out, rg, Op::Tanh { x })
    }

    pub fn exp(&mut self, x: VarId) -> Result<VarId> {
        let out = self.val(x).map(f64::exp);
        let rg = self.rg(&[x]);
        self.push("exp", out, rg, Op::Exp { x })
    }

    /// Natural log; non-positive inputs surface as a NonFinite error.
    pub fn log(&mut self, x: VarId) -> Result<VarId> {
        let out = self.val(x).map(f64::ln);
        let rg = self.rg(&[x]);
        self.push("log", out, rg, Op::Log { x })
    }

    pub fn sqrt(&mut self, x: VarId) -> Result<VarId> {
        let out = self.val(x).map(f64::sqrt);
        let rg = self.rg(&[x]);
        self.push("sqrt", out, rg, Op::Sqrt { x })
    }

    pub fn recip(&mut self, x: VarId) -> Result<VarId> {
        let out = self.val(x).map(|v| 1.0 / v);
        let rg = self.rg(&[x]);
        self.push("recip", out, rg, Op::Recip { x })
    }

    /// Sum of all entries, as a 1x1 tensor.
    pub fn sum(&mut self, x: VarId) -> Result<VarId> {
        let s: f64 = self.val(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push("sum", Tensor::scalar(s), rg, Op::Sum { x })
    }

    /// Mean over unmasked rows; output is 1 x cols.
    pub fn mean_pool_rows(&mut self, x: VarId, mask: &[bool]) -> Result<VarId> {
        let (m, n) = self.val(x).shape();
        if mask.len() != m {
            return Err(Error::shape("mean_pool_rows", format!("mask of length {m}"), format!("{}", mask.len())));
        }
        let count = mask.iter().filter(|&&b| b).count();
        if count == 0 {
            return Err(Error::arg("mean_pool_rows: every row is masked out"));
        }
        let mut out = Tensor::zeros(1, n);
        for i in 0..m {
            if !mask[i] {
                continue;
            }
            for j in 0..n {
                out.set(0, j, out.get(0, j) + self.val(x).get(i, j));
            }
        }
        for j in 0..n {
            out.set(0, j, out.get(0, j) / count as f64);
        }
        let rg = self.rg(&[x]);
        self.push(
            "mean_pool_rows",
            out,
            rg,
            Op::MeanPoolRows {
                x,
                mask: mask.to_vec(),
            },
        )
    }

    /// Row-wise softmax over unmasked key columns. Masked columns get
    /// probability zero; each row must keep at least one unmasked key.
    pub fn masked_softmax_rows(&mut self, x: VarId, key_mask: &[bool]) -> Result<VarId> {
        let (m, n) = self.val(x).shape();
        if key_mask.len() != n {
            return Err(Error::shape(
                "masked_softmax_rows",
                format!("mask of length {n}"),
                format!("{}", key_mask.len()),
            ));
        }
        if !key_mask.iter().any(|&b| b) {
            return Err(Error::arg("masked_softmax_rows: every key is masked out"));
        }
        let mut out = Tensor::zeros(m, n);
        for i in 0..m {
            let mut hi = f64::NEG_INFINITY;
            for j in 0..n {
                if key_mask[j] {
                    hi = hi.max(self.val(x).get(i, j));
                }
            }
            let mut z = 0.0;
            for j in 0..n {
                if key_mask[j] {
                    let e = (self.val(x).get(i, j) - hi).exp();
                    out.set(i, j, e);
                    z += e;
                }
            }
            for j in 0..n {
                if key_mask[j] {
                    out.set(i, j, out.get(i, j) / z);
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(
            "masked_softmax_rows",
            out,
            rg,
            Op::MaskedSoftmaxRows {
                x,
                key_mask: key_mask.to_vec(),
            },
        )
    }

    /// Numerically stable row-wise log-softmax.
    pub fn log_softmax_rows(&mut self, x: VarId) -> Result<VarId> {
        let (m, n) = self.val(x).shape();
        let mut out = Tensor::zeros(m, n);
        for i in 0..m {
            let mut hi = f64::NEG_INFINITY;
            for j in 0..n {
                hi = hi.max(self.val(x).get(i, j));
            }
            let mut z = 0.0;
            for j in 0..n {
                z += (self.val(x).get(i, j) - hi).exp();
            }
            let lse = hi + z.ln();
            for j in 0..n {
                out.set(i, j, self.val(x).get(i, j) - lse);
            }
        }
        let rg = self.rg(&[x]);
        self.push("log_softmax_rows", out, rg, Op::LogSoftmaxRows { x })
    }

    /// Reinterprets the elements in row-major order under a new shape.
    pub fn reshape(&mut self, x: VarId, rows: usize, cols: usize) -> Result<VarId> {
        let t = self.val(x);
        if t.len() != rows * cols {
            return Err(Error::shape("reshape", format!("{} elements", t.len()), format!("{rows}x{cols}")));
        }
        let out = Tensor::new(rows, cols, t.data().to_vec())?;
        let rg = self.rg(&[x]);
        self.push("reshape", out, rg, Op::Reshape { x })
    }

    /// Per-pair feature rows built from node embeddings.
    ///
    /// For pair (i, j) the row is `[h_i ; h_j ; |h_i - h_j| ; h_i * h_j]`
    /// in four-block mode or `[h_i ; h_j]` in concat mode. The sign of each
    /// difference entry is recorded in the kink signature.
    pub fn pair_features(&mut self, h: VarId, pairs: &[(usize, usize)], mode: EdgeFeatureMode) -> Result<VarId> {
        let (k, d) = self.val(h).shape();
        for &(i, j) in pairs {
            if i >= k || j >= k {
                return Err(Error::arg(format!("pair ({i}, {j}) out of range for {k} nodes")));
            }
        }
        let width = mode.width(d);
        let mut out = Tensor::zeros(pairs.len(), width);
        let mut signs = Vec::new();
        for (p, &(i, j)) in pairs.iter().enumerate() {
            for c in 0..d {
                let hi = self.val(h).get(i, c);
                let hj = self.val(h).get(j, c);
                out.set(p, c, hi);
                out.set(p, d + c, hj);
                if mode == EdgeFeatureMode::FourBlock {
                    let diff = hi - hj;
                    signs.push(if diff > 0.0 {
                        1
                    } else if diff < 0.0 {
                        -1
                    } else {
                        0
                    });
                    out.set(p, 2 * d + c, diff.abs());
                    out.set(p, 3 * d + c, hi * hj);
                }
            }
        }
        self.kinks.extend(signs);
        let rg = self.rg(&[h]);
        self.push(
            "pair_features",
            out,
            rg,
            Op::PairFeatures {
                h,
                pairs: pairs.to_vec(),
                mode,
            },
        )
    }

    /// Builds an n x n adjacency from per-pair weights (a P x 1 column).
    /// Symmetric mode mirrors each weight across the diagonal; the diagonal
    /// itself stays zero.
    pub fn scatter_pairs(&mut self, w: VarId, pairs: &[(usize, usize)], n: usize, symmetric: bool) -> Result<VarId> {
        let shape = self.val(w).shape();
        if shape != (pairs.len(), 1) {
            return Err(Error::shape("scatter_pairs", format!("{}x1", pairs.len()), self.val(w).shape_str()));
        }
        let mut out = Tensor::zeros(n, n);
        for (p, &(i, j)) in pairs.iter().enumerate() {
            if i >= n || j >= n || i == j {
                return Err(Error::arg(format!("pair ({i}, {j}) invalid for {n} nodes")));
            }
            let v = self.val(w).get(p, 0);
            out.set(i, j, v);
            if symmetric {
                out.set(j, i, v);
            }
        }
        let rg = self.rg(&[w]);
        self.push(
            "scatter_pairs",
            out,
            rg,
            Op::ScatterPairs {
                w,
                pairs: pairs.to_vec(),
                symmetric,
            },
        )
    }

    /// Scales row i of an m x n matrix by `v[i]` (v is m x 1).
    pub fn scale_rows(&mut self, x: VarId, v: VarId) -> Result<VarId> {
        let (m, n) = self.val(x).shape();
        if self.val(v).shape() != (m, 1) {
            return Err(Error::shape("scale_rows", format!("{m}x1"), self.val(v).shape_str()));
        }
        let mut out = Tensor::zeros(m, n);
        for i in 0..m {
            let s = self.val(v).get(i, 0);
            for j in 0..n {
                out.set(i, j, self.val(x).get(i, j) * s);
            }
        }
        let rg = self.rg(&[x, v]);
        self.push("scale_rows", out, rg, Op::ScaleRows { x, v })
    }

    /// Scales column j of an m x n matrix by `v[j]` (v is 1 x n).
    pub fn scale_cols(&mut self, x: VarId, v: VarId) -> Result<VarId> {
        let (m, n) = self.val(x).shape();
        if self.val(v).shape() != (1, n) {
            return Err(Error::shape("scale_cols", format!("1x{n}"), self.val(v).shape_str()));
        }
        let mut out = Tensor::zeros(m, n);
        for i in 0..m {
            for j in 0..n {
                out.set(i, j, self.val(x).get(i, j) * self.val(v).get(0, j));
            }
        }
        let rg = self.rg(&[x, v]);
        self.push("scale_cols", out, rg, Op::ScaleCols { x, v })
    }

    /// Elementwise reparameterized edge-weight draw.
    ///
    /// Inputs are same-shape tensors of posterior means, posterior standard
    /// deviations, and Laplace scales; `eps` supplies one standard normal
    /// draw per element. Differentiable in all three tensor inputs at fixed
    /// `eps`; the probability clamp zeroes the (u, delta) gradient where it
    /// binds, and the clamp state plus median side are recorded as kinks.
    pub fn laplace_reparam(&mut self, u: VarId, delta: VarId, b: VarId, eps: &[f64]) -> Result<VarId> {
        self.expect_same_shape("laplace_reparam", u, delta)?;
        self.expect_same_shape("laplace_reparam", u, b)?;
        let (m, n) = self.val(u).shape();
        if eps.len() != m * n {
            return Err(Error::shape("laplace_reparam", format!("{} draws", m * n), format!("{}", eps.len())));
        }
        let mut data = Vec::with_capacity(m * n);
        let mut signs = Vec::with_capacity(2 * m * n);
        for idx in 0..m * n {
            let parts = distributions::npn_edge_sample_parts(
                self.val(u).data()[idx],
                self.val(delta).data()[idx],
                self.val(b).data()[idx],
                eps[idx],
            )?;
            signs.push(parts.side);
            signs.push(parts.clamped);
            data.push(parts.w);
        }
        self.kinks.extend(signs);
        let out = Tensor::new(m, n, data)?;
        let rg = self.rg(&[u, delta, b]);
        self.push(
            "laplace_reparam",
            out,
            rg,
            Op::LaplaceReparam {
                u,
                delta,
                b,
                eps: eps.to_vec(),
            },
        )
    }

    /// Elementwise matched Poisson rate for posterior means `u` and
    /// standard deviations `delta`.
    pub fn match_poisson_rate(&mut self, u: VarId, delta: VarId) -> Result<VarId> {
        self.expect_same_shape("match_poisson_rate", u, delta)?;
        let (m, n) = self.val(u).shape();
        let mut data = Vec::with_capacity(m * n);
        for idx in 0..m * n {
            let mean = self.val(u).data()[idx];
            let sd = self.val(delta).data()[idx];
            data.push(distributions::match_poisson_rate(GaussianParams::new(mean, sd * sd)?));
        }
        let out = Tensor::new(m, n, data)?;
        let rg = self.rg(&[u, delta]);
        self.push("match_poisson_rate", out, rg, Op::MatchPoissonRate { u, delta })
    }

    /// Reverse sweep from `output`, seeded with `seed` (which must match the
    /// output's shape). Returns per-node gradients.
    pub fn backward(&self, output: VarId, seed: Tensor) -> Result<Gradients> {
        let Some(out_node) = self.nodes.get(output.0) else {
            return Err(Error::arg(format!(
                "backward target {} is not on the tape ({} nodes)",
                output.0,
                self.nodes.len()
            )));
        };
        if seed.shape() != out_node.value.shape() {
            return Err(Error::shape("backward seed", out_node.value.shape_str(), seed.shape_str()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(seed);
        for i in (0..=output.0).rev() {
            if grads[i].is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let (before, rest) = grads.split_at_mut(i);
            let g = rest[0].as_ref().expect("checked above");
            self.backprop_node(i, g, before)?;
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, slots: &mut [Option<Tensor>], p: VarId, contrib: Tensor) -> Result<()> {
        if !self.nodes[p.0].requires_grad {
            return Ok(());
        }
        match &mut slots[p.0] {
            Some(t) => t.add_assign(&contrib)?,
            None => slots[p.0] = Some(contrib),
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &Tensor, slots: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let bt = self.val(*b).transpose();
                self.acc(slots, *a, g.matmul(&bt)?)?;
                let at = self.val(*a).transpose();
                self.acc(slots, *b, at.matmul(g)?)?;
            }
            Op::Transpose { x } => {
                self.acc(slots, *x, g.transpose())?;
            }
            Op::Add { a, b } => {
                self.acc(slots, *a, g.clone())?;
                self.acc(slots, *b, g.clone())?;
            }
            Op::Sub { a, b } => {
                self.acc(slots, *a, g.clone())?;
                self.acc(slots, *b, g.map(|v| -v))?;
            }
            Op::Mul { a, b } => {
                self.acc(slots, *a, elementwise(g, self.val(*b), |gv, bv| gv * bv))?;
                self.acc(slots, *b, elementwise(g, self.val(*a), |gv, av| gv * av))?;
            }
            Op::Affine { x, scale } => {
                self.acc(slots, *x, g.map(|v| v * scale))?;
            }
            Op::AddRowVec { x, v } => {
                self.acc(slots, *x, g.clone())?;
                let (m, n) = g.shape();
                let mut col = Tensor::zeros(1, n);
                for r in 0..m {
                    for c in 0..n {
                        col.set(0, c, col.get(0, c) + g.get(r, c));
                    }
                }
                self.acc(slots, *v, col)?;
            }
            Op::ConcatCols { a, b } => {
                let (m, ca) = self.val(*a).shape();
                let (_, cb) = self.val(*b).shape();
                let mut ga = Tensor::zeros(m, ca);
                let mut gb = Tensor::zeros(m, cb);
                for r in 0..m {
                    for c in 0..ca {
                        ga.set(r, c, g.get(r, c));
                    }
                    for c in 0..cb {
                        gb.set(r, c, g.get(r, ca + c));
                    }
                }
                self.acc(slots, *a, ga)?;
                self.acc(slots, *b, gb)?;
            }
            Op::Relu { x } => {
                self.acc(slots, *x, elementwise(g, self.val(*x), |gv, xv| if xv > 0.0 { gv } else { 0.0 }))?;
            }
            Op::Softplus { x } => {
                self.acc(slots, *x, elementwise(g, self.val(*x), |gv, xv| gv * sigmoid_scalar(xv)))?;
            }
            Op::Sigmoid { x } => {
                self.acc(slots, *x, elementwise(g, &node.value, |gv, yv| gv * yv * (1.0 - yv)))?;
            }
            Op::Tanh { x } => {
                self.acc(slots, *x, elementwise(g, &node.value, |gv, yv| gv * (1.0 - yv * yv)))?;
            }
            Op::Exp { x } => {
                self.acc(slots, *x, elementwise(g, &node.value, |gv, yv| gv * yv))?;
            }
            Op::Log { x } => {
                self.acc(slots, *x, elementwise(g, self.val(*x), |gv, xv| gv / xv))?;
            }
            Op::Sqrt { x } => {
                self.acc(slots, *x, elementwise(g, &node.value, |gv, yv| gv / (2.0 * yv)))?;
            }
            Op::Recip { x } => {
                self.acc(slots, *x, elementwise(g, &node.value, |gv, yv| -gv * yv * yv))?;
            }
            Op::Sum { x } => {
                let gv = g.item()?;
                let (m, n) = self.val(*x).shape();
                self.acc(slots, *x, Tensor::full(m, n, gv))?;
            }
            Op::MeanPoolRows { x, mask } => {
                let (m, n) = self.val(*x).shape();
                let count = mask.iter().filter(|&&b| b).count() as f64;
                let mut gx = Tensor::zeros(m, n);
                for r in 0..m {
                    if !mask[r] {
                        continue;
                    }
                    for c in 0..n {
                        gx.set(r, c, g.get(0, c) / count);
                    }
                }
                self.acc(slots, *x, gx)?;
            }
            Op::MaskedSoftmaxRows { x, key_mask } => {
                let (m, n) = node.value.shape();
                let mut gx = Tensor::zeros(m, n);
                for r in 0..m {
                    let mut dot = 0.0;
                    for c in 0..n {
                        if key_mask[c] {
                            dot += g.get(r, c) * node.value.get(r, c);
                        }
                    }
                    for c in 0..n {
                        if key_mask[c] {
                            let y = node.value.get(r, c);
                            gx.set(r, c, y * (g.get(r, c) - dot));
                        }
                    }
                }
                self.acc(slots, *x, gx)?;
            }
            Op::LogSoftmaxRows { x } => {
                let (m, n) = node.value.shape();
                let mut gx = Tensor::zeros(m, n);
                for r in 0..m {
                    let gsum: f64 = (0..n).map(|c| g.get(r, c)).sum();
                    for c in 0..n {
                        let p = node.value.get(r, c).exp();
                        gx.set(r, c, g.get(r, c) - p * gsum);
                    }
                }
                self.acc(slots, *x, gx)?;
            }
            Op::Reshape { x } => {
                let (m, n) = self.val(*x).shape();
                self.acc(slots, *x, Tensor::new(m, n, g.data().to_vec())?)?;
            }
            Op::PairFeatures { h, pairs, mode } => {
                let (k, d) = self.val(*h).shape();
                let mut gh = Tensor::zeros(k, d);
                for (p, &(i, j)) in pairs.iter().enumerate() {
                    for c in 0..d {
                        let mut gi = g.get(p, c);
                        let mut gj = g.get(p, d + c);
                        if *mode == EdgeFeatureMode::FourBlock {
                            let hi = self.val(*h).get(i, c);
                            let hj = self.val(*h).get(j, c);
                            let diff = hi - hj;
                            let s = if diff > 0.0 {
                                1.0
                            } else if diff < 0.0 {
                                -1.0
                            } else {
                                0.0
                            };
                            let gabs = g.get(p, 2 * d + c);
                            let gprod = g.get(p, 3 * d + c);
                            gi += gabs * s + gprod * hj;
                            gj += -gabs * s + gprod * hi;
                        }
                        gh.set(i, c, gh.get(i, c) + gi);
                        gh.set(j, c, gh.get(j, c) + gj);
                    }
                }
                self.acc(slots, *h, gh)?;
            }
            Op::ScatterPairs { w, pairs, symmetric, .. } => {
                let mut gw = Tensor::zeros(pairs.len(), 1);
                for (p, &(i, j)) in pairs.iter().enumerate() {
                    let mut v = g.get(i, j);
                    if *symmetric {
                        v += g.get(j, i);
                    }
                    gw.set(p, 0, v);
                }
                self.acc(slots, *w, gw)?;
            }
            Op::ScaleRows { x, v } => {
                let (m, n) = self.val(*x).shape();
                let mut gx = Tensor::zeros(m, n);
                let mut gv = Tensor::zeros(m, 1);
                for r in 0..m {
                    let s = self.val(*v).get(r, 0);
                    let mut dot = 0.0;
                    for c in 0..n {
                        gx.set(r, c, g.get(r, c) * s);
                        dot += g.get(r, c) * self.val(*x).get(r, c);
                    }
                    gv.set(r, 0, dot);
                }
                self.acc(slots, *x, gx)?;
                self.acc(slots, *v, gv)?;
            }
            Op::ScaleCols { x, v } => {
                let (m, n) = self.val(*x).shape();
                let mut gx = Tensor::zeros(m, n);
                let mut gv = Tensor::zeros(1, n);
                for r in 0..m {
                    for c in 0..n {
                        gx.set(r, c, g.get(r, c) * self.val(*v).get(0, c));
                        gv.set(0, c, gv.get(0, c) + g.get(r, c) * self.val(*x).get(r, c));
                    }
                }
                self.acc(slots, *x, gx)?;
                self.acc(slots, *v, gv)?;
            }
            Op::LaplaceReparam { u, delta, b, eps } => {
                let (m, n) = node.value.shape();
                let mut gu = Tensor::zeros(m, n);
                let mut gd = Tensor::zeros(m, n);
                let mut gb = Tensor::zeros(m, n);
                for idx in 0..m * n {
                    let uu = self.val(*u).data()[idx];
                    let dd = self.val(*delta).data()[idx];
                    let bb = self.val(*b).data()[idx];
                    let parts = distributions::npn_edge_sample_parts(uu, dd, bb, eps[idx])?;
                    let gv = g.data()[idx];
                    let dz = parts.dw_dp * parts.dp_dz;
                    gu.data_mut()[idx] = gv * dz;
                    gd.data_mut()[idx] = gv * dz * eps[idx];
                    gb.data_mut()[idx] = gv * parts.w / bb;
                }
                self.acc(slots, *u, gu)?;
                self.acc(slots, *delta, gd)?;
                self.acc(slots, *b, gb)?;
            }
            Op::MatchPoissonRate { u, delta } => {
                let (m, n) = node.value.shape();
                let mut gu = Tensor::zeros(m, n);
                let mut gd = Tensor::zeros(m, n);
                for idx in 0..m * n {
                    let (dmu, dmd) = match_poisson_rate_grad(self.val(*u).data()[idx], self.val(*delta).data()[idx]);
                    let gv = g.data()[idx];
                    gu.data_mut()[idx] = gv * dmu;
                    gd.data_mut()[idx] = gv * dmd;
                }
                self.acc(slots, *u, gu)?;
                self.acc(slots, *delta, gd)?;
            }
        }
        Ok(())
    }
}

fn elementwise(g: &Tensor, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    debug_assert_eq!(g.shape(), other.shape());
    let (m, n) = g.shape();
    let data = g.data().iter().zip(other.data()).map(|(&a, &b)| f(a, b)).collect();
    Tensor::new(m, n, data).expect("shapes checked")
}

fn softplus_scalar(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
