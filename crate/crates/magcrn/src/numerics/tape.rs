//! Reverse-mode differentiation over a linear operation tape.
//!
//! Operations are evaluated eagerly and recorded in construction order; the
//! backward pass replays them in reverse, so gradient accumulation order is
//! fixed by topological op index and replaying an identical graph yields
//! bitwise-identical gradients.

use crate::error::{Error, Result};
use crate::numerics::tensor::{conv1d_same, sigmoid, softmax_row_inplace, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// [m,k] x [k,n]
    MatMul {
        a: NodeId,
        b: NodeId,
    },
    /// [..,k] x [k,n], leading dims flattened
    MatMulRhs {
        a: NodeId,
        w: NodeId,
    },
    /// [B,m,k] x [B,k,n]
    Bmm {
        a: NodeId,
        b: NodeId,
    },
    /// [B,m,k] x [B,n,k]^T
    BmmNt {
        a: NodeId,
        b: NodeId,
    },
    /// [m,k] x [B,k,n], left operand shared across the batch
    BmmSharedA {
        a: NodeId,
        b: NodeId,
    },
    /// x [B,N,Di], theta [N,Di*Do], omega [N,Do] -> [B,N,Do]
    /// out[b,n] = x[b,n] . theta[n] + omega[n]
    PerNodeLinear {
        x: NodeId,
        theta: NodeId,
        omega: NodeId,
    },
    /// h [B,N,D], f [N,T*Lf] -> [B,N,T*D]; same-padded 1-d convolution of
    /// h[b,n] with each of the T per-node kernels.
    NodeConv1d {
        h: NodeId,
        f: NodeId,
        t_out: usize,
        l_f: usize,
    },
    Permute {
        a: NodeId,
        perm: Vec<usize>,
    },
    Reshape {
        a: NodeId,
    },
    ConcatLast {
        parts: Vec<NodeId>,
    },
    SliceLast {
        a: NodeId,
        start: usize,
        len: usize,
    },
    Stack0 {
        parts: Vec<NodeId>,
    },
    SoftmaxLast {
        a: NodeId,
    },
    Sigmoid {
        a: NodeId,
    },
    Tanh {
        a: NodeId,
    },
    Relu {
        a: NodeId,
    },
    Abs {
        a: NodeId,
    },
    Rsqrt {
        a: NodeId,
    },
    Affine {
        a: NodeId,
        mul: f64,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Sub {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    /// [..,C] -> [C], mean over all leading positions
    ColMean {
        a: NodeId,
    },
    AddCol {
        a: NodeId,
        v: NodeId,
    },
    SubCol {
        a: NodeId,
        v: NodeId,
    },
    MulCol {
        a: NodeId,
        v: NodeId,
    },
    /// [..,C] -> leading shape, mean over the last axis
    RowMean {
        a: NodeId,
    },
    SubRow {
        a: NodeId,
        s: NodeId,
    },
    MulRow {
        a: NodeId,
        s: NodeId,
    },
    MeanAll {
        a: NodeId,
    },
    SumAll {
        a: NodeId,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Eagerly evaluated computation graph with reverse-mode gradients.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

// out[i,j] += sum_l a[i,l] * b[l,j], l ascending
fn matmul_nn_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (l, &av) in arow.iter().enumerate() {
            let brow = &b[l * n..(l + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

// out[i,j] += sum_l a[i,l] * b[j,l]  (b used transposed)
fn matmul_nt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            *o += acc;
        }
    }
}

// out[l,j] += sum_i a[i,l] * b[i,j]  (a used transposed)
fn matmul_tn_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (l, &av) in arow.iter().enumerate() {
            let orow = &mut out[l * n..(l + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register a constant (non-parameter) leaf.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push_unchecked(value, Op::Leaf)
    }

    /// Register a trainable leaf. Identical to [`Tape::input`] except intent;
    /// gradients are reported for whichever leaves the caller asks about.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push_unchecked(value, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn push_unchecked(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        Ok(self.push_unchecked(value, op))
    }

    // ── graph construction ────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{:?} x {:?}", sa, sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_nn_acc(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        self.push("matmul", Tensor::new(vec![m, n], out), Op::MatMul { a, b })
    }

    /// Multiply the last axis by a shared matrix: `[.., k] x [k, n] -> [.., n]`.
    pub fn matmul_rhs(&mut self, a: NodeId, w: NodeId) -> Result<NodeId> {
        let (sa, sw) = (self.shape(a).to_vec(), self.shape(w).to_vec());
        if sa.is_empty() || sw.len() != 2 || *sa.last().unwrap() != sw[0] {
            return Err(Error::shape("matmul_rhs", format!("{:?} x {:?}", sa, sw)));
        }
        let k = sw[0];
        let n = sw[1];
        let rows = self.value(a).numel() / k;
        let mut out = vec![0.0; rows * n];
        matmul_nn_acc(
            self.value(a).data(),
            self.value(w).data(),
            &mut out,
            rows,
            k,
            n,
        );
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = n;
        self.push(
            "matmul_rhs",
            Tensor::new(shape, out),
            Op::MatMulRhs { a, w },
        )
    }

    pub fn bmm(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::shape("bmm", format!("{:?} x {:?}", sa, sb)));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bs * m * n];
        for i in 0..bs {
            matmul_nn_acc(
                &self.value(a).data()[i * m * k..(i + 1) * m * k],
                &self.value(b).data()[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        self.push("bmm", Tensor::new(vec![bs, m, n], out), Op::Bmm { a, b })
    }

    /// Batched `a x b^T`: `[B,m,k] x [B,n,k] -> [B,m,n]`.
    pub fn bmm_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[2] {
            return Err(Error::shape("bmm_nt", format!("{:?} x {:?}", sa, sb)));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[1]);
        let mut out = vec![0.0; bs * m * n];
        for i in 0..bs {
            matmul_nt_acc(
                &self.value(a).data()[i * m * k..(i + 1) * m * k],
                &self.value(b).data()[i * n * k..(i + 1) * n * k],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        self.push(
            "bmm_nt",
            Tensor::new(vec![bs, m, n], out),
            Op::BmmNt { a, b },
        )
    }

    /// `a x b[i]` for every batch slice of `b`: `[m,k] x [B,k,n] -> [B,m,n]`.
    pub fn bmm_shared_a(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 3 || sa[1] != sb[1] {
            return Err(Error::shape("bmm_shared_a", format!("{:?} x {:?}", sa, sb)));
        }
        let (m, k) = (sa[0], sa[1]);
        let (bs, n) = (sb[0], sb[2]);
        let mut out = vec![0.0; bs * m * n];
        for i in 0..bs {
            matmul_nn_acc(
                self.value(a).data(),
                &self.value(b).data()[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        self.push(
            "bmm_shared_a",
            Tensor::new(vec![bs, m, n], out),
            Op::BmmSharedA { a, b },
        )
    }

    /// Apply a distinct linear map per node: `out[b,n] = x[b,n] . theta[n] + omega[n]`
    /// with `x [B,N,Di]`, `theta [N, Di*Do]` (row-major over `(Di, Do)`),
    /// `omega [N, Do]`.
    pub fn per_node_linear(&mut self, x: NodeId, theta: NodeId, omega: NodeId) -> Result<NodeId> {
        let (sx, st, so) = (
            self.shape(x).to_vec(),
            self.shape(theta).to_vec(),
            self.shape(omega).to_vec(),
        );
        if sx.len() != 3 || st.len() != 2 || so.len() != 2 {
            return Err(Error::shape(
                "per_node_linear",
                format!("{:?}, {:?}, {:?}", sx, st, so),
            ));
        }
        let (bs, n_nodes, d_in) = (sx[0], sx[1], sx[2]);
        let d_out = so[1];
        if st[0] != n_nodes || so[0] != n_nodes || st[1] != d_in * d_out {
            return Err(Error::shape(
                "per_node_linear",
                format!("{:?}, {:?}, {:?}", sx, st, so),
            ));
        }
        let xv = self.value(x).data();
        let tv = self.value(theta).data();
        let ov = self.value(omega).data();
        let mut out = vec![0.0; bs * n_nodes * d_out];
        for b in 0..bs {
            for node in 0..n_nodes {
                let xrow = &xv[(b * n_nodes + node) * d_in..][..d_in];
                let orow = &mut out[(b * n_nodes + node) * d_out..][..d_out];
                orow.copy_from_slice(&ov[node * d_out..][..d_out]);
                let th = &tv[node * d_in * d_out..][..d_in * d_out];
                for (i, &xi) in xrow.iter().enumerate() {
                    for (o, &t) in orow.iter_mut().zip(&th[i * d_out..][..d_out]) {
                        *o += xi * t;
                    }
                }
            }
        }
        self.push(
            "per_node_linear",
            Tensor::new(vec![bs, n_nodes, d_out], out),
            Op::PerNodeLinear { x, theta, omega },
        )
    }

    /// Convolve each node's signal with its T per-node kernels.
    /// `h [B,N,D]`, `f [N, T*Lf]` -> `[B, N, T*D]` (row-major over `(T, D)`).
    pub fn node_conv1d(
        &mut self,
        h: NodeId,
        f: NodeId,
        t_out: usize,
        l_f: usize,
    ) -> Result<NodeId> {
        let (sh, sf) = (self.shape(h).to_vec(), self.shape(f).to_vec());
        if sh.len() != 3 || sf.len() != 2 || sf[0] != sh[1] || sf[1] != t_out * l_f {
            return Err(Error::shape("node_conv1d", format!("{:?}, {:?}", sh, sf)));
        }
        if l_f % 2 == 0 {
            return Err(Error::shape(
                "node_conv1d",
                format!("even kernel length {}", l_f),
            ));
        }
        let (bs, n_nodes, d) = (sh[0], sh[1], sh[2]);
        let hv = self.value(h).data();
        let fv = self.value(f).data();
        let mut out = vec![0.0; bs * n_nodes * t_out * d];
        for b in 0..bs {
            for node in 0..n_nodes {
                let signal = &hv[(b * n_nodes + node) * d..][..d];
                for t in 0..t_out {
                    let kernel = &fv[node * t_out * l_f + t * l_f..][..l_f];
                    let conv = conv1d_same(signal, kernel);
                    out[((b * n_nodes + node) * t_out + t) * d..][..d].copy_from_slice(&conv);
                }
            }
        }
        self.push(
            "node_conv1d",
            Tensor::new(vec![bs, n_nodes, t_out * d], out),
            Op::NodeConv1d { h, f, t_out, l_f },
        )
    }

    /// Reorder axes; `perm[i]` names the input axis that becomes output axis `i`.
    pub fn permute(&mut self, a: NodeId, perm: &[usize]) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        let mut seen = vec![false; sa.len()];
        if perm.len() != sa.len()
            || perm
                .iter()
                .any(|&p| p >= sa.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::shape(
                "permute",
                format!("perm {:?} for {:?}", perm, sa),
            ));
        }
        let value = permute_tensor(self.value(a), perm);
        self.push(
            "permute",
            value,
            Op::Permute {
                a,
                perm: perm.to_vec(),
            },
        )
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        if numel != self.value(a).numel() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape(a), shape),
            ));
        }
        let value = Tensor::new(shape, self.value(a).data().to_vec());
        self.push("reshape", value, Op::Reshape { a })
    }

    /// Concatenate along the last axis; all leading dims must agree.
    pub fn concat_last(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::shape("concat_last", "no parts"));
        }
        let lead = self.shape(parts[0])[..self.shape(parts[0]).len() - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let sp = self.shape(p);
            if sp[..sp.len() - 1] != lead[..] {
                return Err(Error::shape(
                    "concat_last",
                    format!("leading dims differ: {:?}", sp),
                ));
            }
            widths.push(*sp.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = vec![0.0; rows * total];
        for r in 0..rows {
            let mut offset = 0;
            for (&p, &w) in parts.iter().zip(&widths) {
                out[r * total + offset..][..w].copy_from_slice(&self.value(p).data()[r * w..][..w]);
                offset += w;
            }
        }
        let mut shape = lead;
        shape.push(total);
        self.push(
            "concat_last",
            Tensor::new(shape, out),
            Op::ConcatLast {
                parts: parts.to_vec(),
            },
        )
    }

    /// Take `[start, start+len)` of the last axis.
    pub fn slice_last(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        let width = *sa.last().unwrap();
        if start + len > width {
            return Err(Error::shape(
                "slice_last",
                format!("[{start}, {start}+{len}) of width {width}"),
            ));
        }
        let rows = self.value(a).numel() / width;
        let mut out = vec![0.0; rows * len];
        for r in 0..rows {
            out[r * len..][..len]
                .copy_from_slice(&self.value(a).data()[r * width + start..][..len]);
        }
        let mut shape = sa;
        *shape.last_mut().unwrap() = len;
        self.push(
            "slice_last",
            Tensor::new(shape, out),
            Op::SliceLast { a, start, len },
        )
    }

    /// Stack equal-shaped tensors along a new leading axis.
    pub fn stack0(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::shape("stack0", "no parts"));
        }
        let each = self.shape(parts[0]).to_vec();
        for &p in parts {
            if self.shape(p) != &each[..] {
                return Err(Error::shape("stack0", "parts differ in shape"));
            }
        }
        let step: usize = each.iter().product();
        let mut out = vec![0.0; parts.len() * step];
        for (i, &p) in parts.iter().enumerate() {
            out[i * step..][..step].copy_from_slice(self.value(p).data());
        }
        let mut shape = vec![parts.len()];
        shape.extend(each);
        self.push(
            "stack0",
            Tensor::new(shape, out),
            Op::Stack0 {
                parts: parts.to_vec(),
            },
        )
    }

    /// Stable softmax over the last axis.
    pub fn softmax_last(&mut self, a: NodeId) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        let cols = *sa.last().unwrap();
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(cols) {
            softmax_row_inplace(row);
        }
        self.push("softmax_last", Tensor::new(sa, out), Op::SoftmaxLast { a })
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let out = self.map_unary(a, sigmoid);
        self.push("sigmoid", out, Op::Sigmoid { a })
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        let out = self.map_unary(a, f64::tanh);
        self.push("tanh", out, Op::Tanh { a })
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let out = self.map_unary(a, |x| x.max(0.0));
        self.push("relu", out, Op::Relu { a })
    }

    pub fn abs(&mut self, a: NodeId) -> Result<NodeId> {
        let out = self.map_unary(a, f64::abs);
        self.push("abs", out, Op::Abs { a })
    }

    /// x^(-1/2); callers must guarantee strictly positive inputs.
    pub fn rsqrt(&mut self, a: NodeId) -> Result<NodeId> {
        let out = self.map_unary(a, |x| 1.0 / x.sqrt());
        self.push("rsqrt", out, Op::Rsqrt { a })
    }

    pub fn affine(&mut self, a: NodeId, mul: f64, add: f64) -> Result<NodeId> {
        let out = self.map_unary(a, |x| mul * x + add);
        self.push("affine", out, Op::Affine { a, mul })
    }

    /// 1 - a.
    pub fn one_minus(&mut self, a: NodeId) -> Result<NodeId> {
        self.affine(a, -1.0, 1.0)
    }

    fn map_unary(&self, a: NodeId, f: impl Fn(f64) -> f64) -> Tensor {
        let v = self.value(a);
        Tensor::new(v.shape().to_vec(), v.data().iter().map(|&x| f(x)).collect())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.zip_binary("add", a, b, |x, y| x + y)?;
        self.push("add", out, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.zip_binary("sub", a, b, |x, y| x - y)?;
        self.push("sub", out, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.zip_binary("mul", a, b, |x, y| x * y)?;
        self.push("mul", out, Op::Mul { a, b })
    }

    fn zip_binary(
        &self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(
                name,
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        Ok(Tensor::new(
            va.shape().to_vec(),
            va.data()
                .iter()
                .zip(vb.data())
                .map(|(&x, &y)| f(x, y))
                .collect(),
        ))
    }

    /// Mean over all leading positions per channel: `[.., C] -> [C]`.
    pub fn col_mean(&mut self, a: NodeId) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        if sa.len() < 2 {
            return Err(Error::shape("col_mean", format!("{:?}", sa)));
        }
        let c = *sa.last().unwrap();
        let rows = self.value(a).numel() / c;
        let mut out = vec![0.0; c];
        for r in 0..rows {
            for (o, &x) in out.iter_mut().zip(&self.value(a).data()[r * c..][..c]) {
                *o += x;
            }
        }
        for o in out.iter_mut() {
            *o /= rows as f64;
        }
        self.push("col_mean", Tensor::new(vec![c], out), Op::ColMean { a })
    }

    pub fn add_col(&mut self, a: NodeId, v: NodeId) -> Result<NodeId> {
        let out = self.col_broadcast("add_col", a, v, |x, y| x + y)?;
        self.push("add_col", out, Op::AddCol { a, v })
    }

    pub fn sub_col(&mut self, a: NodeId, v: NodeId) -> Result<NodeId> {
        let out = self.col_broadcast("sub_col", a, v, |x, y| x - y)?;
        self.push("sub_col", out, Op::SubCol { a, v })
    }

    pub fn mul_col(&mut self, a: NodeId, v: NodeId) -> Result<NodeId> {
        let out = self.col_broadcast("mul_col", a, v, |x, y| x * y)?;
        self.push("mul_col", out, Op::MulCol { a, v })
    }

    fn col_broadcast(
        &self,
        name: &'static str,
        a: NodeId,
        v: NodeId,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (va, vv) = (self.value(a), self.value(v));
        let c = *va.shape().last().unwrap();
        if vv.numel() != c {
            return Err(Error::shape(
                name,
                format!("{:?} with {:?}", va.shape(), vv.shape()),
            ));
        }
        let mut out = va.data().to_vec();
        for row in out.chunks_mut(c) {
            for (x, &y) in row.iter_mut().zip(vv.data()) {
                *x = f(*x, y);
            }
        }
        Ok(Tensor::new(va.shape().to_vec(), out))
    }

    /// Mean over the last axis: `[.., C] -> [..]`.
    pub fn row_mean(&mut self, a: NodeId) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        if sa.len() < 2 {
            return Err(Error::shape("row_mean", format!("{:?}", sa)));
        }
        let c = *sa.last().unwrap();
        let rows = self.value(a).numel() / c;
        let mut out = vec![0.0; rows];
        for (r, o) in out.iter_mut().enumerate() {
            *o = self.value(a).data()[r * c..][..c].iter().sum::<f64>() / c as f64;
        }
        let shape = sa[..sa.len() - 1].to_vec();
        self.push("row_mean", Tensor::new(shape, out), Op::RowMean { a })
    }

    pub fn sub_row(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        let out = self.row_broadcast("sub_row", a, s, |x, y| x - y)?;
        self.push("sub_row", out, Op::SubRow { a, s })
    }

    pub fn mul_row(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        let out = self.row_broadcast("mul_row", a, s, |x, y| x * y)?;
        self.push("mul_row", out, Op::MulRow { a, s })
    }

    fn row_broadcast(
        &self,
        name: &'static str,
        a: NodeId,
        s: NodeId,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (va, vs) = (self.value(a), self.value(s));
        let c = *va.shape().last().unwrap();
        let rows = va.numel() / c;
        if vs.numel() != rows {
            return Err(Error::shape(
                name,
                format!("{:?} with {:?}", va.shape(), vs.shape()),
            ));
        }
        let mut out = va.data().to_vec();
        for (r, row) in out.chunks_mut(c).enumerate() {
            let y = vs.data()[r];
            for x in row.iter_mut() {
                *x = f(*x, y);
            }
        }
        Ok(Tensor::new(va.shape().to_vec(), out))
    }

    pub fn mean_all(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a);
        let mean = v.data().iter().sum::<f64>() / v.numel() as f64;
        self.push("mean_all", Tensor::scalar(mean), Op::MeanAll { a })
    }

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        let sum = self.value(a).data().iter().sum::<f64>();
        self.push("sum_all", Tensor::scalar(sum), Op::SumAll { a })
    }

    // ── backward pass ─────────────────────────────────────────────────

    /// Gradients of a scalar `loss` with respect to `params`.
    ///
    /// Parameters the loss does not depend on receive zero gradients of the
    /// parameter's shape.
    pub fn gradients(&self, loss: NodeId, params: &[NodeId]) -> Result<Vec<Tensor>> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::UnknownNode {
                node: loss.0,
                len: self.nodes.len(),
            });
        }
        for p in params {
            if p.0 >= self.nodes.len() {
                return Err(Error::UnknownNode {
                    node: p.0,
                    len: self.nodes.len(),
                });
            }
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::NonScalarLoss {
                shape: self.shape(loss).to_vec(),
            });
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            self.backward_op(idx, &grad, &mut grads);
            // Keep the gradient available for parameter extraction.
            grads[idx] = Some(grad);
        }

        Ok(params
            .iter()
            .map(|p| {
                let shape = self.shape(*p).to_vec();
                match &grads[p.0] {
                    Some(g) => Tensor::new(shape, g.clone()),
                    None => Tensor::zeros(shape),
                }
            })
            .collect())
    }

    fn acc(grads: &mut [Option<Vec<f64>>], id: NodeId, numel: usize, f: impl FnOnce(&mut [f64])) {
        let slot = grads[id.0].get_or_insert_with(|| vec![0.0; numel]);
        f(slot);
    }

    #[allow(clippy::too_many_lines)]
    fn backward_op(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                Self::acc(grads, *a, m * k, |da| matmul_nt_acc(g, bv, da, m, n, k));
                Self::acc(grads, *b, k * n, |db| matmul_tn_acc(av, g, db, m, k, n));
            }
            Op::MatMulRhs { a, w } => {
                let k = self.shape(*w)[0];
                let n = self.shape(*w)[1];
                let rows = self.value(*a).numel() / k;
                let (av, wv) = (self.value(*a).data(), self.value(*w).data());
                Self::acc(grads, *a, rows * k, |da| {
                    matmul_nt_acc(g, wv, da, rows, n, k)
                });
                Self::acc(grads, *w, k * n, |dw| matmul_tn_acc(av, g, dw, rows, k, n));
            }
            Op::Bmm { a, b } => {
                let sa = self.shape(*a);
                let (bs, m, k) = (sa[0], sa[1], sa[2]);
                let n = self.shape(*b)[2];
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                Self::acc(grads, *a, bs * m * k, |da| {
                    for i in 0..bs {
                        matmul_nt_acc(
                            &g[i * m * n..(i + 1) * m * n],
                            &bv[i * k * n..(i + 1) * k * n],
                            &mut da[i * m * k..(i + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                });
                Self::acc(grads, *b, bs * k * n, |db| {
                    for i in 0..bs {
                        matmul_tn_acc(
                            &av[i * m * k..(i + 1) * m * k],
                            &g[i * m * n..(i + 1) * m * n],
                            &mut db[i * k * n..(i + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                });
            }
            Op::BmmNt { a, b } => {
                let sa = self.shape(*a);
                let (bs, m, k) = (sa[0], sa[1], sa[2]);
                let n = self.shape(*b)[1];
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                // out[i] = A[i] B[i]^T: dA = g B, dB = g^T A
                Self::acc(grads, *a, bs * m * k, |da| {
                    for i in 0..bs {
                        matmul_nn_acc(
                            &g[i * m * n..(i + 1) * m * n],
                            &bv[i * n * k..(i + 1) * n * k],
                            &mut da[i * m * k..(i + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                });
                Self::acc(grads, *b, bs * n * k, |db| {
                    for i in 0..bs {
                        matmul_tn_acc(
                            &g[i * m * n..(i + 1) * m * n],
                            &av[i * m * k..(i + 1) * m * k],
                            &mut db[i * n * k..(i + 1) * n * k],
                            m,
                            n,
                            k,
                        );
                    }
                });
            }
            Op::BmmSharedA { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let (bs, n) = (self.shape(*b)[0], self.shape(*b)[2]);
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                Self::acc(grads, *a, m * k, |da| {
                    for i in 0..bs {
                        matmul_nt_acc(
                            &g[i * m * n..(i + 1) * m * n],
                            &bv[i * k * n..(i + 1) * k * n],
                            da,
                            m,
                            n,
                            k,
                        );
                    }
                });
                Self::acc(grads, *b, bs * k * n, |db| {
                    for i in 0..bs {
                        matmul_tn_acc(
                            av,
                            &g[i * m * n..(i + 1) * m * n],
                            &mut db[i * k * n..(i + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                });
            }
            Op::PerNodeLinear { x, theta, omega } => {
                let sx = self.shape(*x);
                let (bs, n_nodes, d_in) = (sx[0], sx[1], sx[2]);
                let d_out = self.shape(*omega)[1];
                let (xv, tv) = (self.value(*x).data(), self.value(*theta).data());
                Self::acc(grads, *x, bs * n_nodes * d_in, |dx| {
                    for b in 0..bs {
                        for node in 0..n_nodes {
                            let grow = &g[(b * n_nodes + node) * d_out..][..d_out];
                            let th = &tv[node * d_in * d_out..][..d_in * d_out];
                            let dxrow = &mut dx[(b * n_nodes + node) * d_in..][..d_in];
                            for (i, dxi) in dxrow.iter_mut().enumerate() {
                                let mut acc = 0.0;
                                for (&gv, &t) in grow.iter().zip(&th[i * d_out..][..d_out]) {
                                    acc += gv * t;
                                }
                                *dxi += acc;
                            }
                        }
                    }
                });
                Self::acc(grads, *theta, n_nodes * d_in * d_out, |dt| {
                    for b in 0..bs {
                        for node in 0..n_nodes {
                            let grow = &g[(b * n_nodes + node) * d_out..][..d_out];
                            let xrow = &xv[(b * n_nodes + node) * d_in..][..d_in];
                            let dth = &mut dt[node * d_in * d_out..][..d_in * d_out];
                            for (i, &xi) in xrow.iter().enumerate() {
                                for (d, &gv) in dth[i * d_out..][..d_out].iter_mut().zip(grow) {
                                    *d += xi * gv;
                                }
                            }
                        }
                    }
                });
                Self::acc(grads, *omega, n_nodes * d_out, |dom| {
                    for b in 0..bs {
                        for node in 0..n_nodes {
                            let grow = &g[(b * n_nodes + node) * d_out..][..d_out];
                            for (d, &gv) in dom[node * d_out..][..d_out].iter_mut().zip(grow) {
                                *d += gv;
                            }
                        }
                    }
                });
            }
            Op::NodeConv1d { h, f, t_out, l_f } => {
                let (t_out, l_f) = (*t_out, *l_f);
                let sh = self.shape(*h);
                let (bs, n_nodes, d) = (sh[0], sh[1], sh[2]);
                let off = (l_f - 1) / 2;
                let (hv, fv) = (self.value(*h).data(), self.value(*f).data());
                Self::acc(grads, *h, bs * n_nodes * d, |dh| {
                    for b in 0..bs {
                        for node in 0..n_nodes {
                            let dhrow = &mut dh[(b * n_nodes + node) * d..][..d];
                            for t in 0..t_out {
                                let kernel = &fv[node * t_out * l_f + t * l_f..][..l_f];
                                let grow = &g[((b * n_nodes + node) * t_out + t) * d..][..d];
                                for (i, &gv) in grow.iter().enumerate() {
                                    for (k, &w) in kernel.iter().enumerate() {
                                        let pos = i + k;
                                        if pos >= off && pos - off < d {
                                            dhrow[pos - off] += gv * w;
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
                Self::acc(grads, *f, n_nodes * t_out * l_f, |df| {
                    for b in 0..bs {
                        for node in 0..n_nodes {
                            let hrow = &hv[(b * n_nodes + node) * d..][..d];
                            for t in 0..t_out {
                                let dk = &mut df[node * t_out * l_f + t * l_f..][..l_f];
                                let grow = &g[((b * n_nodes + node) * t_out + t) * d..][..d];
                                for (i, &gv) in grow.iter().enumerate() {
                                    for (k, dkv) in dk.iter_mut().enumerate() {
                                        let pos = i + k;
                                        if pos >= off && pos - off < d {
                                            *dkv += gv * hrow[pos - off];
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::Permute { a, perm } => {
                let numel = self.value(*a).numel();
                let out_shape = self.nodes[idx].value.shape().to_vec();
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let g_tensor = Tensor::new(out_shape, g.to_vec());
                let back = permute_tensor(&g_tensor, &inv);
                Self::acc(grads, *a, numel, |da| {
                    for (d, &v) in da.iter_mut().zip(back.data()) {
                        *d += v;
                    }
                });
            }
            Op::Reshape { a } => {
                let numel = self.value(*a).numel();
                Self::acc(grads, *a, numel, |da| {
                    for (d, &v) in da.iter_mut().zip(g) {
                        *d += v;
                    }
                });
            }
            Op::ConcatLast { parts } => {
                let widths: Vec<usize> = parts
                    .iter()
                    .map(|&p| *self.shape(p).last().unwrap())
                    .collect();
                let total: usize = widths.iter().sum();
                let rows = self.nodes[idx].value.numel() / total;
                let mut offset = 0;
                for (&p, &w) in parts.iter().zip(&widths) {
                    Self::acc(grads, p, rows * w, |dp| {
                        for r in 0..rows {
                            for (d, &v) in dp[r * w..][..w]
                                .iter_mut()
                                .zip(&g[r * total + offset..][..w])
                            {
                                *d += v;
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::SliceLast { a, start, len } => {
                let width = *self.shape(*a).last().unwrap();
                let numel = self.value(*a).numel();
                let rows = numel / width;
                Self::acc(grads, *a, numel, |da| {
                    for r in 0..rows {
                        for (d, &v) in da[r * width + start..][..*len]
                            .iter_mut()
                            .zip(&g[r * len..][..*len])
                        {
                            *d += v;
                        }
                    }
                });
            }
            Op::Stack0 { parts } => {
                let step = self.value(parts[0]).numel();
                for (i, &p) in parts.iter().enumerate() {
                    Self::acc(grads, p, step, |dp| {
                        for (d, &v) in dp.iter_mut().zip(&g[i * step..][..step]) {
                            *d += v;
                        }
                    });
                }
            }
            Op::SoftmaxLast { a } => {
                let y = self.nodes[idx].value.data();
                let cols = *self.nodes[idx].value.shape().last().unwrap();
                let numel = y.len();
                Self::acc(grads, *a, numel, |da| {
                    for r in 0..numel / cols {
                        let yr = &y[r * cols..][..cols];
                        let gr = &g[r * cols..][..cols];
                        let dot: f64 = yr.iter().zip(gr).map(|(&yv, &gv)| yv * gv).sum();
                        for ((d, &yv), &gv) in da[r * cols..][..cols].iter_mut().zip(yr).zip(gr) {
                            *d += yv * (gv - dot);
                        }
                    }
                });
            }
            Op::Sigmoid { a } => {
                let y = self.nodes[idx].value.data();
                self.acc_elementwise(grads, *a, g, |i, gv| gv * y[i] * (1.0 - y[i]));
            }
            Op::Tanh { a } => {
                let y = self.nodes[idx].value.data();
                self.acc_elementwise(grads, *a, g, |i, gv| gv * (1.0 - y[i] * y[i]));
            }
            Op::Relu { a } => {
                let x = self.value(*a).data();
                self.acc_elementwise(grads, *a, g, |i, gv| if x[i] > 0.0 { gv } else { 0.0 });
            }
            Op::Abs { a } => {
                let x = self.value(*a).data();
                self.acc_elementwise(grads, *a, g, |i, gv| {
                    if x[i] > 0.0 {
                        gv
                    } else if x[i] < 0.0 {
                        -gv
                    } else {
                        0.0
                    }
                });
            }
            Op::Rsqrt { a } => {
                let y = self.nodes[idx].value.data();
                self.acc_elementwise(grads, *a, g, |i, gv| gv * (-0.5 * y[i] * y[i] * y[i]));
            }
            Op::Affine { a, mul } => {
                let mul = *mul;
                self.acc_elementwise(grads, *a, g, |_, gv| gv * mul);
            }
            Op::Add { a, b } => {
                self.acc_elementwise(grads, *a, g, |_, gv| gv);
                self.acc_elementwise(grads, *b, g, |_, gv| gv);
            }
            Op::Sub { a, b } => {
                self.acc_elementwise(grads, *a, g, |_, gv| gv);
                self.acc_elementwise(grads, *b, g, |_, gv| -gv);
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.acc_elementwise(grads, *a, g, |i, gv| gv * bv[i]);
                self.acc_elementwise(grads, *b, g, |i, gv| gv * av[i]);
            }
            Op::ColMean { a } => {
                let numel = self.value(*a).numel();
                let c = g.len();
                let rows = numel / c;
                let scale = 1.0 / rows as f64;
                Self::acc(grads, *a, numel, |da| {
                    for r in 0..rows {
                        for (d, &gv) in da[r * c..][..c].iter_mut().zip(g) {
                            *d += gv * scale;
                        }
                    }
                });
            }
            Op::AddCol { a, v } | Op::SubCol { a, v } => {
                let sign = if matches!(self.nodes[idx].op, Op::AddCol { .. }) {
                    1.0
                } else {
                    -1.0
                };
                let numel = self.value(*a).numel();
                let c = self.value(*v).numel();
                self.acc_elementwise(grads, *a, g, |_, gv| gv);
                Self::acc(grads, *v, c, |dv| {
                    for r in 0..numel / c {
                        for (d, &gv) in dv.iter_mut().zip(&g[r * c..][..c]) {
                            *d += sign * gv;
                        }
                    }
                });
            }
            Op::MulCol { a, v } => {
                let (av, vv) = (self.value(*a).data(), self.value(*v).data());
                let c = vv.len();
                self.acc_elementwise(grads, *a, g, |i, gv| gv * vv[i % c]);
                Self::acc(grads, *v, c, |dv| {
                    for r in 0..av.len() / c {
                        for (j, d) in dv.iter_mut().enumerate() {
                            *d += g[r * c + j] * av[r * c + j];
                        }
                    }
                });
            }
            Op::RowMean { a } => {
                let numel = self.value(*a).numel();
                let rows = g.len();
                let c = numel / rows;
                let scale = 1.0 / c as f64;
                Self::acc(grads, *a, numel, |da| {
                    for (r, &gv) in g.iter().enumerate() {
                        for d in da[r * c..][..c].iter_mut() {
                            *d += gv * scale;
                        }
                    }
                });
            }
            Op::SubRow { a, s } => {
                let numel = self.value(*a).numel();
                let rows = self.value(*s).numel();
                let c = numel / rows;
                self.acc_elementwise(grads, *a, g, |_, gv| gv);
                Self::acc(grads, *s, rows, |ds| {
                    for (r, d) in ds.iter_mut().enumerate() {
                        for &gv in &g[r * c..][..c] {
                            *d -= gv;
                        }
                    }
                });
            }
            Op::MulRow { a, s } => {
                let (av, sv) = (self.value(*a).data(), self.value(*s).data());
                let rows = sv.len();
                let c = av.len() / rows;
                self.acc_elementwise(grads, *a, g, |i, gv| gv * sv[i / c]);
                Self::acc(grads, *s, rows, |ds| {
                    for (r, d) in ds.iter_mut().enumerate() {
                        for j in 0..c {
                            *d += g[r * c + j] * av[r * c + j];
                        }
                    }
                });
            }
            Op::MeanAll { a } => {
                let numel = self.value(*a).numel();
                let gv = g[0] / numel as f64;
                Self::acc(grads, *a, numel, |da| {
                    for d in da.iter_mut() {
                        *d += gv;
                    }
                });
            }
            Op::SumAll { a } => {
                let numel = self.value(*a).numel();
                let gv = g[0];
                Self::acc(grads, *a, numel, |da| {
                    for d in da.iter_mut() {
                        *d += gv;
                    }
                });
            }
        }
    }

    fn acc_elementwise(
        &self,
        grads: &mut [Option<Vec<f64>>],
        id: NodeId,
        g: &[f64],
        f: impl Fn(usize, f64) -> f64,
    ) {
        let numel = self.value(id).numel();
        Self::acc(grads, id, numel, |da| {
            for (i, (d, &gv)) in da.iter_mut().zip(g).enumerate() {
                *d += f(i, gv);
            }
        });
    }
}

fn permute_tensor(t: &Tensor, perm: &[usize]) -> Tensor {
    let in_shape = t.shape();
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let in_strides = row_major_strides(in_shape);
    let out_strides = row_major_strides(&out_shape);
    let mut out = vec![0.0; t.numel()];
    for (flat_out, o) in out.iter_mut().enumerate() {
        let mut rem = flat_out;
        let mut flat_in = 0;
        for (axis, &os) in out_strides.iter().enumerate() {
            let coord = rem / os;
            rem %= os;
            flat_in += coord * in_strides[perm[axis]];
        }
        *o = t.data()[flat_in];
    }
    Tensor::new(out_shape, out)
}
