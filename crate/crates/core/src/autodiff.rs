//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every op in execution order. [`Tape::backward`] walks
//! the record once in reverse and returns gradients for the leaves created
//! with [`Tape::leaf`]. A tape supports a single backward pass.

use crate::error::{arg_err, dim_err, Error, Result};
use crate::kernels::{gemm_nn, gemm_nt, gemm_tn};
use crate::tensor::{check_same_shape, Scalar, Tensor};

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Binary elementwise op kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElemKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Op<T: Scalar> {
    Leaf,
    Constant,
    Elementwise { a: Var, b: Var, kind: ElemKind },
    MatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize },
    MatMulT { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize },
    Transpose { x: Var },
    Reshape { x: Var },
    Scale { x: Var, c: T },
    Sum { x: Var },
    Softmax { x: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Gelu { x: Var },
    RoundSte { x: Var },
    ClipSte { x: Var, lo: T, hi: T },
    Mse { a: Var, b: Var },
    CausalMask { x: Var },
    SplitHeads { x: Var, heads: usize },
    MergeHeads { x: Var, heads: usize },
    ExpandGroups { x: Var, group_size: usize },
    GatherRows { table: Var, ids: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients of the marked leaves, produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf. `None` for constants or leaves the loss does not
    /// depend on.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Like [`Gradients::get`], but returns zeros shaped like the leaf when
    /// no gradient reached it.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor<T>) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape().to_vec()))
    }
}

/// Execution record for one forward/backward pass.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    consumed: bool,
    round_identity: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
            round_identity: false,
        }
    }

    /// A tape whose [`Tape::round_ste`] forward is the identity: the smooth
    /// surrogate that finite-difference checks of the rounding path use.
    pub fn surrogate() -> Self {
        Self {
            round_identity: true,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A trainable input; receives a gradient on backward.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A constant input; never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Constant, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn live(&self) -> Result<()> {
        if self.consumed {
            return Err(Error::State(
                "tape already consumed by backward; re-run the forward pass".into(),
            ));
        }
        Ok(())
    }

    // ---- elementwise -------------------------------------------------

    /// Binary elementwise op with trailing-dimension broadcasting: the
    /// smaller operand's shape must equal the trailing dims of the larger.
    pub fn elementwise(&mut self, a: Var, b: Var, kind: ElemKind) -> Result<Var> {
        self.live()?;
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(&sa, &sb).ok_or_else(|| {
            dim_err(format!("{kind:?}: shapes {sa:?} and {sb:?} do not broadcast"))
        })?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let n: usize = out_shape.iter().product();
        let (na, nb) = (av.len(), bv.len());
        let f = match kind {
            ElemKind::Add => |x: T, y: T| x + y,
            ElemKind::Sub => |x: T, y: T| x - y,
            ElemKind::Mul => |x: T, y: T| x * y,
            ElemKind::Div => |x: T, y: T| x / y,
        };
        let data: Vec<T> = if na == nb {
            av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect()
        } else {
            (0..n).map(|i| f(av[i % na], bv[i % nb])).collect()
        };
        let out = Tensor::new(out_shape, data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Elementwise { a, b, kind }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, ElemKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, ElemKind::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, ElemKind::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, ElemKind::Div)
    }

    /// `x * c` for a scalar constant `c`.
    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        self.live()?;
        let out = self.value(x).map(|v| v * c);
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Scale { x, c }, rg))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.live()?;
        let s: T = self.value(x).data().iter().copied().sum();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::Sum { x }, rg))
    }

    // ---- shape ops ---------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        self.live()?;
        let out = self.value(x).reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Reshape { x }, rg))
    }

    /// 2-D transpose.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.live()?;
        let out = self.value(x).transpose()?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Transpose { x }, rg))
    }

    /// `[B, S, H·D] → [B·H, S, D]`
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        self.live()?;
        let s = self.shape(x).to_vec();
        if s.len() != 3 || heads == 0 || s[2] % heads != 0 {
            return Err(dim_err(format!("split_heads: bad shape {s:?} for {heads} heads")));
        }
        let (b, t, d) = (s[0], s[1], s[2]);
        let hd = d / heads;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for bi in 0..b {
            for ti in 0..t {
                for h in 0..heads {
                    let from = (bi * t + ti) * d + h * hd;
                    let to = ((bi * heads + h) * t + ti) * hd;
                    out[to..to + hd].copy_from_slice(&src[from..from + hd]);
                }
            }
        }
        let out = Tensor::new([b * heads, t, hd], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::SplitHeads { x, heads }, rg))
    }

    /// `[B·H, S, D] → [B, S, H·D]`
    pub fn merge_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        self.live()?;
        let s = self.shape(x).to_vec();
        if s.len() != 3 || heads == 0 || s[0] % heads != 0 {
            return Err(dim_err(format!("merge_heads: bad shape {s:?} for {heads} heads")));
        }
        let out = merge_heads_raw(self.value(x).data(), s[0] / heads, heads, s[1], s[2]);
        let out = Tensor::new([s[0] / heads, s[1], s[2] * heads], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::MergeHeads { x, heads }, rg))
    }

    /// `[R, G] → [R, C]` with `out[r, c] = x[r, c / group_size]`.
    pub fn expand_groups(&mut self, x: Var, group_size: usize, cols: usize) -> Result<Var> {
        self.live()?;
        let s = self.shape(x).to_vec();
        if s.len() != 2 || group_size == 0 || s[1] != cols.div_ceil(group_size) {
            return Err(dim_err(format!(
                "expand_groups: {s:?} does not cover {cols} columns in groups of {group_size}"
            )));
        }
        let src = self.value(x).data();
        let g = s[1];
        let mut out = Vec::with_capacity(s[0] * cols);
        for r in 0..s[0] {
            out.extend((0..cols).map(|c| src[r * g + c / group_size]));
        }
        let out = Tensor::new([s[0], cols], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::ExpandGroups { x, group_size }, rg))
    }

    /// Rows of `table` selected by `ids`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.live()?;
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(dim_err(format!("gather_rows: table must be 2-D, got {s:?}")));
        }
        if let Some(bad) = ids.iter().find(|&&i| i >= s[0]) {
            return Err(Error::Data(format!("row id {bad} out of range for {} rows", s[0])));
        }
        let d = s[1];
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let out = Tensor::new([ids.len(), d], out)?;
        let rg = self.rg(&[table]);
        Ok(self.push(
            out,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    // ---- matmul ------------------------------------------------------

    /// Matrix product. `[m×k]·[k×n]`, or batched `[b×m×k]·[b×k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.live()?;
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (batch, m, k, n) = match (sa.len(), sb.len()) {
            (2, 2) if sa[1] == sb[0] => (1, sa[0], sa[1], sb[1]),
            (3, 3) if sa[0] == sb[0] && sa[2] == sb[1] => (sa[0], sa[1], sa[2], sb[2]),
            _ => {
                return Err(dim_err(format!(
                    "matmul: incompatible shapes {sa:?} and {sb:?}"
                )))
            }
        };
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::zero(); batch * m * n];
        for i in 0..batch {
            gemm_nn(
                &av[i * m * k..(i + 1) * m * k],
                &bv[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let mut shape = if batch > 1 || sa.len() == 3 { vec![batch] } else { vec![] };
        shape.extend([m, n]);
        let out = Tensor::new(shape, out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul { a, b, batch, m, k, n }, rg))
    }

    /// `a · bᵀ` over the last two dims. With a 2-D `b` of shape `[n×k]`,
    /// `a` may have any leading dims (`[..., k] → [..., n]`), which is a
    /// linear layer with weight `b`. With a 3-D `b`, `a` must be
    /// `[batch×m×k]` and `b` `[batch×n×k]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.live()?;
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let bad = || dim_err(format!("matmul_t: incompatible shapes {sa:?} and {sb:?}"));
        let (batch, m, k, n, out_shape) = match sb.len() {
            2 => {
                let k = *sa.last().ok_or_else(bad)?;
                if sa.is_empty() || k != sb[1] {
                    return Err(bad());
                }
                let m = sa[..sa.len() - 1].iter().product();
                let mut shape = sa[..sa.len() - 1].to_vec();
                shape.push(sb[0]);
                (1, m, k, sb[0], shape)
            }
            3 if sa.len() == 3 && sa[0] == sb[0] && sa[2] == sb[2] => {
                (sa[0], sa[1], sa[2], sb[1], vec![sa[0], sa[1], sb[1]])
            }
            _ => return Err(bad()),
        };
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::zero(); batch * m * n];
        for i in 0..batch {
            gemm_nt(
                &av[i * m * k..(i + 1) * m * k],
                &bv[i * n * k..(i + 1) * n * k],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let out = Tensor::new(out_shape, out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMulT { a, b, batch, m, k, n }, rg))
    }

    // ---- nonlinearities ----------------------------------------------

    /// Softmax over the last dimension, max-subtracted. NaN inputs
    /// propagate NaN through the whole row.
    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        self.live()?;
        let xv = self.value(x);
        let d = xv.last_dim();
        if d == 0 {
            return Err(dim_err("softmax over an empty last dimension"));
        }
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(d) {
            softmax_row(row);
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Softmax { x }, rg))
    }

    /// Row-wise layer norm with affine `gamma`, `beta` over the last dim.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        self.live()?;
        let xv = self.value(x);
        let d = xv.last_dim();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(dim_err(format!(
                "layer_norm: gamma {:?} / beta {:?} must be [{d}]",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xv.numel() / d.max(1);
        let inv_d = T::one() / T::from_usize(d).unwrap();
        let mut xhat = vec![T::zero(); xv.numel()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.numel()];
        for (r, row) in xv.data().chunks(d).enumerate() {
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + bt[j];
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.live()?;
        let out = self.value(x).map(gelu_fwd);
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Gelu { x }, rg))
    }

    /// Round half to even; straight-through (identity) gradient.
    pub fn round_ste(&mut self, x: Var) -> Result<Var> {
        self.live()?;
        let out = if self.round_identity {
            self.value(x).clone()
        } else {
            self.value(x).map(T::round_even)
        };
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::RoundSte { x }, rg))
    }

    /// Clamp to `[lo, hi]`; gradient passes where `lo ≤ x ≤ hi`.
    pub fn clip_ste(&mut self, x: Var, lo: T, hi: T) -> Result<Var> {
        self.live()?;
        if lo > hi {
            return Err(arg_err(format!("clip_ste: lo {lo} > hi {hi}")));
        }
        let out = self.value(x).map(|v| v.max(lo).min(hi));
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::ClipSte { x, lo, hi }, rg))
    }

    /// Fills the strict upper triangle of the last two dims with `-inf`.
    pub fn causal_mask(&mut self, x: Var) -> Result<Var> {
        self.live()?;
        let s = self.shape(x).to_vec();
        let n = s.len();
        if n < 2 || s[n - 1] != s[n - 2] {
            return Err(dim_err(format!("causal_mask expects [..., S, S], got {s:?}")));
        }
        let t = s[n - 1];
        let mut out = self.value(x).data().to_vec();
        for mat in out.chunks_mut(t * t) {
            for i in 0..t {
                for v in &mut mat[i * t + i + 1..(i + 1) * t] {
                    *v = T::neg_infinity();
                }
            }
        }
        let out = Tensor::new(s, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::CausalMask { x }, rg))
    }

    // ---- losses ------------------------------------------------------

    /// Mean squared difference over all elements.
    pub fn mse_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        self.live()?;
        check_same_shape("mse_loss", self.shape(a), self.shape(b))?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let n = T::from_usize(av.len().max(1)).unwrap();
        let s: T = av.iter().zip(bv).map(|(&x, &y)| (x - y) * (x - y)).sum();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::scalar(s / n), Op::Mse { a, b }, rg))
    }

    /// Mean next-token negative log-likelihood of `targets` under
    /// `softmax(logits)`, logits `[N, V]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        self.live()?;
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != targets.len() {
            return Err(dim_err(format!(
                "cross_entropy: logits {s:?} vs {} targets",
                targets.len()
            )));
        }
        let v = s[1];
        if let Some(bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::Data(format!("target {bad} out of range for vocab {v}")));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut nll = T::zero();
        for (row, &t) in probs.chunks_mut(v).zip(targets) {
            softmax_row(row);
            nll -= row[t].ln();
        }
        let n = T::from_usize(targets.len().max(1)).unwrap();
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(nll / n),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    // ---- backward ----------------------------------------------------

    /// Reverse pass from a scalar `loss`. Visits each recorded op once,
    /// newest first, and returns gradients for the leaves. Consumes the
    /// tape: a second call fails with a state error.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        self.live()?;
        if self.value(loss).numel() != 1 {
            return Err(arg_err(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Constant => {}
                op => self.backprop_op(op, &node.value, &g, &mut grads),
            }
        }

        let grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| match (&node.op, g) {
                (Op::Leaf, Some(g)) => Some(
                    Tensor::new(node.value.shape().to_vec(), g).expect("gradient shape"),
                ),
                _ => None,
            })
            .collect();
        for node in &mut self.nodes {
            if !matches!(node.op, Op::Leaf | Op::Constant) {
                node.value = Tensor::zeros(vec![0]);
            }
        }
        Ok(Gradients { grads })
    }

    fn backprop_op(&self, op: &Op<T>, out: &Tensor<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match op {
            Op::Leaf | Op::Constant => {}
            Op::Elementwise { a, b, kind } => {
                let (av, bv) = (val(*a), val(*b));
                let (na, nb) = (av.len(), bv.len());
                if wants(*a) {
                    let mut ga = vec![T::zero(); na];
                    for (i, &gi) in g.iter().enumerate() {
                        let d = match kind {
                            ElemKind::Add | ElemKind::Sub => gi,
                            ElemKind::Mul => gi * bv[i % nb],
                            ElemKind::Div => gi / bv[i % nb],
                        };
                        ga[i % na] += d;
                    }
                    accumulate(grads, *a, ga);
                }
                if wants(*b) {
                    let mut gb = vec![T::zero(); nb];
                    for (i, &gi) in g.iter().enumerate() {
                        let d = match kind {
                            ElemKind::Add => gi,
                            ElemKind::Sub => -gi,
                            ElemKind::Mul => gi * av[i % na],
                            ElemKind::Div => {
                                let y = bv[i % nb];
                                -gi * av[i % na] / (y * y)
                            }
                        };
                        gb[i % nb] += d;
                    }
                    accumulate(grads, *b, gb);
                }
            }
            Op::MatMul { a, b, batch, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let (av, bv) = (val(*a), val(*b));
                if wants(*a) {
                    // dA = G · Bᵀ
                    let mut ga = vec![T::zero(); batch * m * k];
                    for i in 0..*batch {
                        gemm_nt(
                            &g[i * m * n..(i + 1) * m * n],
                            &bv[i * k * n..(i + 1) * k * n],
                            &mut ga[i * m * k..(i + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    accumulate(grads, *a, ga);
                }
                if wants(*b) {
                    // dB = Aᵀ · G
                    let mut gb = vec![T::zero(); batch * k * n];
                    for i in 0..*batch {
                        gemm_tn(
                            &av[i * m * k..(i + 1) * m * k],
                            &g[i * m * n..(i + 1) * m * n],
                            &mut gb[i * k * n..(i + 1) * k * n],
                            k,
                            m,
                            n,
                        );
                    }
                    accumulate(grads, *b, gb);
                }
            }
            Op::MatMulT { a, b, batch, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let (av, bv) = (val(*a), val(*b));
                if wants(*a) {
                    // C = A·Bᵀ ⇒ dA = G · B
                    let mut ga = vec![T::zero(); batch * m * k];
                    for i in 0..*batch {
                        gemm_nn(
                            &g[i * m * n..(i + 1) * m * n],
                            &bv[i * n * k..(i + 1) * n * k],
                            &mut ga[i * m * k..(i + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    accumulate(grads, *a, ga);
                }
                if wants(*b) {
                    // dB = Gᵀ · A
                    let mut gb = vec![T::zero(); batch * n * k];
                    for i in 0..*batch {
                        gemm_tn(
                            &g[i * m * n..(i + 1) * m * n],
                            &av[i * m * k..(i + 1) * m * k],
                            &mut gb[i * n * k..(i + 1) * n * k],
                            n,
                            m,
                            k,
                        );
                    }
                    accumulate(grads, *b, gb);
                }
            }
            Op::Transpose { x } => {
                let s = self.nodes[x.0].value.shape();
                let gt = Tensor::new([s[1], s[0]], g.to_vec())
                    .and_then(|t| t.transpose())
                    .expect("transpose grad");
                accumulate(grads, *x, gt.into_data());
            }
            Op::Reshape { x } => accumulate(grads, *x, g.to_vec()),
            Op::Scale { x, c } => accumulate(grads, *x, g.iter().map(|&v| v * *c).collect()),
            Op::Sum { x } => accumulate(grads, *x, vec![g[0]; val(*x).len()]),
            Op::Softmax { .. } | Op::CausalMask { .. } | Op::Gelu { .. } => {
                self.backprop_unary(op, out, g, grads)
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = out.last_dim();
                let gm = val(*gamma);
                let inv_d = T::one() / T::from_usize(d).unwrap();
                if wants(*x) {
                    let mut gx = vec![T::zero(); g.len()];
                    for (r, grow) in g.chunks(d).enumerate() {
                        let xh = &xhat[r * d..(r + 1) * d];
                        let mut mean_dxh = T::zero();
                        let mut mean_dxh_xh = T::zero();
                        for j in 0..d {
                            let dxh = grow[j] * gm[j];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xh[j];
                        }
                        mean_dxh *= inv_d;
                        mean_dxh_xh *= inv_d;
                        for j in 0..d {
                            let dxh = grow[j] * gm[j];
                            gx[r * d + j] = rstd[r] * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
                        }
                    }
                    accumulate(grads, *x, gx);
                }
                if wants(*gamma) {
                    let mut gg = vec![T::zero(); d];
                    for (grow, xh) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += grow[j] * xh[j];
                        }
                    }
                    accumulate(grads, *gamma, gg);
                }
                if wants(*beta) {
                    let mut gb = vec![T::zero(); d];
                    for grow in g.chunks(d) {
                        for j in 0..d {
                            gb[j] += grow[j];
                        }
                    }
                    accumulate(grads, *beta, gb);
                }
            }
            Op::RoundSte { x } => accumulate(grads, *x, g.to_vec()),
            Op::ClipSte { x, lo, hi } => {
                let gx = val(*x)
                    .iter()
                    .zip(g)
                    .map(|(&v, &gi)| if v >= *lo && v <= *hi { gi } else { T::zero() })
                    .collect();
                accumulate(grads, *x, gx);
            }
            Op::Mse { a, b } => {
                let (av, bv) = (val(*a), val(*b));
                let c = g[0] * T::from_f64_lossy(2.0) / T::from_usize(av.len().max(1)).unwrap();
                if wants(*a) {
                    accumulate(grads, *a, av.iter().zip(bv).map(|(&x, &y)| c * (x - y)).collect());
                }
                if wants(*b) {
                    accumulate(grads, *b, av.iter().zip(bv).map(|(&x, &y)| c * (y - x)).collect());
                }
            }
            Op::SplitHeads { x, heads } => {
                let s = out.shape();
                let b = s[0] / heads;
                accumulate(grads, *x, merge_heads_raw(g, b, *heads, s[1], s[2]));
            }
            Op::MergeHeads { x, heads } => {
                let s = self.nodes[x.0].value.shape();
                let (b, t, hd) = (s[0] / heads, s[1], s[2]);
                let d = hd * heads;
                let mut gx = vec![T::zero(); g.len()];
                for bi in 0..b {
                    for ti in 0..t {
                        for h in 0..*heads {
                            let from = (bi * t + ti) * d + h * hd;
                            let to = ((bi * heads + h) * t + ti) * hd;
                            gx[to..to + hd].copy_from_slice(&g[from..from + hd]);
                        }
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::ExpandGroups { x, group_size } => {
                let s = self.nodes[x.0].value.shape();
                let (rows, ng) = (s[0], s[1]);
                let cols = out.last_dim();
                let mut gx = vec![T::zero(); rows * ng];
                for r in 0..rows {
                    for c in 0..cols {
                        gx[r * ng + c / group_size] += g[r * cols + c];
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::GatherRows { table, ids } => {
                let d = out.last_dim();
                let mut gt = vec![T::zero(); val(*table).len()];
                for (r, &i) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[i * d + j] += g[r * d + j];
                    }
                }
                accumulate(grads, *table, gt);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let v = self.nodes[logits.0].value.last_dim();
                let c = g[0] / T::from_usize(targets.len().max(1)).unwrap();
                let mut gl: Vec<T> = probs.iter().map(|&p| p * c).collect();
                for (r, &t) in targets.iter().enumerate() {
                    gl[r * v + t] -= c;
                }
                accumulate(grads, *logits, gl);
            }
        }
    }

    fn backprop_unary(&self, op: &Op<T>, out: &Tensor<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match op {
            Op::Softmax { x } => {
                let d = out.last_dim();
                let mut gx = vec![T::zero(); g.len()];
                for ((grow, yrow), gxrow) in g.chunks(d).zip(out.data().chunks(d)).zip(gx.chunks_mut(d)) {
                    let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        gxrow[j] = yrow[j] * (grow[j] - dot);
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::CausalMask { x } => {
                let gx = out
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&y, &gi)| if y == T::neg_infinity() { T::zero() } else { gi })
                    .collect();
                accumulate(grads, *x, gx);
            }
            Op::Gelu { x } => {
                let xv = self.nodes[x.0].value.data();
                let gx = xv.iter().zip(g).map(|(&v, &gi)| gi * gelu_grad(v)).collect();
                accumulate(grads, *x, gx);
            }
            _ => unreachable!("not a unary op"),
        }
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(g) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    if a == b {
        return Some(a.to_vec());
    }
    let (big, small) = if a.len() >= b.len() { (a, b) } else { (b, a) };
    big.ends_with(small).then(|| big.to_vec())
}

fn merge_heads_raw<T: Scalar>(src: &[T], b: usize, heads: usize, t: usize, hd: usize) -> Vec<T> {
    let d = hd * heads;
    let mut out = vec![T::zero(); src.len()];
    for bi in 0..b {
        for ti in 0..t {
            for h in 0..heads {
                let from = ((bi * heads + h) * t + ti) * hd;
                let to = (bi * t + ti) * d + h * hd;
                out[to..to + hd].copy_from_slice(&src[from..from + hd]);
            }
        }
    }
    out
}

pub(crate) fn softmax_row<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = T::one() / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

const GELU_K: f64 = 0.044715;

fn gelu_fwd<T: Scalar>(x: T) -> T {
    let c = T::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt());
    let k = T::from_f64_lossy(GELU_K);
    let half = T::from_f64_lossy(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt());
    let k = T::from_f64_lossy(GELU_K);
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    let t = (c * (x + k * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * k * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn matmul_small_cases() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t64(&[1, 2], &[1., 2.]));
        let b = tape.constant(t64(&[2, 1], &[3., 4.]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[11.0]);

        let eye = tape.constant(t64(&[2, 2], &[1., 0., 0., 1.]));
        let m = tape.constant(t64(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let p = tape.matmul(eye, m).unwrap();
        assert_eq!(tape.value(p), tape.value(m));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros([2, 3]));
        let b = tape.constant(Tensor::zeros([4, 5]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 5]"), "{err}");
    }

    #[test]
    fn elementwise_identities_and_broadcast() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t64(&[2], &[1., 2.]));
        let b = tape.constant(t64(&[2], &[3., 4.]));
        let z = tape.constant(t64(&[2], &[0., 0.]));
        let p = tape.mul(a, b).unwrap();
        assert_eq!(tape.value(p).data(), &[3., 8.]);
        let s = tape.add(a, z).unwrap();
        assert_eq!(tape.value(s), tape.value(a));

        let m = tape.constant(Tensor::zeros([2, 3]));
        let bad = tape.constant(Tensor::zeros([2]));
        assert!(matches!(tape.add(m, bad), Err(Error::Dimension(_))));
    }

    #[test]
    fn broadcast_grad_is_column_sum() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let bias = tape.leaf(t64(&[3], &[0.1, 0.2, 0.3]));
        let y = tape.add(x, bias).unwrap();
        let w = tape.constant(t64(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let yw = tape.mul(y, w).unwrap();
        let loss = tape.sum(yw).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(bias).unwrap().data(), &[5., 7., 9.]);
    }

    #[test]
    fn softmax_basics() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t64(&[2, 2], &[0., 0., 1000., 1000.]));
        let y = tape.softmax_lastdim(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn layer_norm_cases() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t64(&[1, 2], &[1., 3.]));
        let g = tape.constant(t64(&[2], &[1., 1.]));
        let b = tape.constant(t64(&[2], &[0., 0.]));
        let y = tape.layer_norm(x, g, b, 0.0).unwrap();
        assert_eq!(tape.value(y).data(), &[-1., 1.]);

        let c = tape.constant(t64(&[1, 3], &[2., 2., 2.]));
        let g3 = tape.constant(t64(&[3], &[1., 1., 1.]));
        let b3 = tape.constant(t64(&[3], &[0., 0., 0.]));
        let y = tape.layer_norm(c, g3, b3, 1e-5).unwrap();
        assert_eq!(tape.value(y).data(), &[0., 0., 0.]);
    }

    #[test]
    fn gelu_values() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t64(&[2], &[0., 10.]));
        let y = tape.gelu(x).unwrap();
        assert_eq!(tape.value(y).data()[0], 0.0);
        assert!((tape.value(y).data()[1] - 10.0).abs() < 1e-4);
    }

    #[test]
    fn round_ste_forward_and_identity_grad() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&[4], &[5.6, 0.5, 1.5, -2.3]));
        let y = tape.round_ste(x).unwrap();
        assert_eq!(tape.value(y).data(), &[6., 0., 2., -2.]);
        let loss = tape.sum(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1., 1., 1., 1.]);
    }

    #[test]
    fn clip_ste_mask() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&[4], &[5.3, 17., 15., -1.]));
        let y = tape.clip_ste(x, 0.0, 15.0).unwrap();
        assert_eq!(tape.value(y).data(), &[5.3, 15., 15., 0.]);
        let loss = tape.sum(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1., 0., 1., 0.]);

        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&[1], &[0.]));
        assert!(matches!(tape.clip_ste(x, 1.0, 0.0), Err(Error::Argument(_))));
    }

    #[test]
    fn mse_values_and_zero_grad() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(t64(&[2], &[0., 2.]));
        let b = tape.constant(t64(&[2], &[0., 0.]));
        let l = tape.mse_loss(a, b).unwrap();
        assert_eq!(tape.value(l).data(), &[2.0]);

        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&[3], &[1., -2., 0.5]));
        let l = tape.mse_loss(x, x).unwrap();
        assert_eq!(tape.value(l).data(), &[0.0]);
        let grads = tape.backward(l).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_linear_and_errors() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&[3], &[1., 2., 3.]));
        let y = tape.scale(x, 2.0).unwrap();
        let loss = tape.sum(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2., 2., 2.]);
        assert!(matches!(tape.backward(loss), Err(Error::State(_))));
        assert!(matches!(tape.sum(x), Err(Error::State(_))));

        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&[3], &[1., 2., 3.]));
        assert!(matches!(tape.backward(x), Err(Error::Argument(_))));
    }

    #[test]
    fn causal_mask_upper_triangle() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t64(&[2, 2], &[1., 2., 3., 4.]));
        let y = tape.causal_mask(x).unwrap();
        let v = tape.value(y).data();
        assert_eq!(v[0], 1.0);
        assert_eq!(v[1], f64::NEG_INFINITY);
        assert_eq!(&v[2..], &[3., 4.]);
    }

    #[test]
    fn heads_round_trip() {
        let mut tape = Tape::<f64>::new();
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let x = tape.constant(t64(&[2, 3, 4], &data));
        let s = tape.split_heads(x, 2).unwrap();
        assert_eq!(tape.shape(s), &[4, 3, 2]);
        // batch 0, head 1, position 0 → features 2..4 of token 0
        assert_eq!(&tape.value(s).data()[6..8], &[2., 3.]);
        let m = tape.merge_heads(s, 2).unwrap();
        assert_eq!(tape.value(m), tape.value(x));
    }

    #[test]
    fn expand_groups_ragged() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&[1, 3], &[1., 2., 3.]));
        let y = tape.expand_groups(x, 4, 10).unwrap();
        assert_eq!(tape.value(y).data(), &[1., 1., 1., 1., 2., 2., 2., 2., 3., 3.]);
        let l = tape.sum(y).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[4., 4., 2.]);
    }
}
