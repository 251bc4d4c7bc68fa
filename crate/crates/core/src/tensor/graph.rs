use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// GELU tanh-approximation cubic coefficient.
pub const GELU_COEFF: f64 = 0.044715;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which token rows to pick along the second-to-last axis.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TokenIndex {
    /// Same rows for every leading slice.
    Shared(Vec<usize>),
    /// One row list per batch element; all lists have equal length.
    PerBatch(Vec<Vec<usize>>),
}

impl TokenIndex {
    pub fn len(&self) -> usize {
        match self {
            TokenIndex::Shared(v) => v.len(),
            TokenIndex::PerBatch(v) => v.first().map_or(0, Vec::len),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn rows(&self, batch: usize) -> &[usize] {
        match self {
            TokenIndex::Shared(v) => v,
            TokenIndex::PerBatch(v) => &v[batch],
        }
    }
}

enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared: bool,
    },
    Transpose {
        x: Var,
        batch: usize,
        rows: usize,
        cols: usize,
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
        s: T,
    },
    Gelu {
        x: Var,
        /// `tanh` of the inner argument, reused by backward.
        t: Vec<T>,
    },
    Tanh {
        x: Var,
    },
    Abs {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gain: Option<Var>,
        bias: Option<Var>,
        d: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax {
        x: Var,
        n: usize,
    },
    Mse {
        pred: Var,
        target: Var,
    },
    Sum {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Gather {
        x: Var,
        index: TokenIndex,
        lead: usize,
        t: usize,
        d: usize,
    },
    Concat {
        a: Var,
        b: Var,
        lead: usize,
        ta: usize,
        tb: usize,
        d: usize,
    },
    Expand {
        x: Var,
        reps: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        b: usize,
        t: usize,
        heads: usize,
        dh: usize,
        /// Attention weights `[b, heads, t, t]`.
        probs: Vec<T>,
    },
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A recording of tensor operations, replayed in reverse by [`Graph::backward`].
///
/// Nodes are appended in execution order, so the node list is already a
/// topological order and backward is a single reverse sweep.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    consumed: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a leaf carrying the tensor's own `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Records a differentiable leaf.
    pub fn param(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true)
    }

    /// Records a constant; no gradient is ever computed for it.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.clone()).expect("node shape is consistent")
    }

    /// Gradient of the last backward pass with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    // ---- linear algebra -------------------------------------------------

    /// Matrix product. `b` is either a shared `[k, n]` matrix applied to the
    /// trailing axis of `a`, or a stack `[.., k, n]` with the same leading
    /// dims as `a = [.., m, k]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.is_empty() || sb.len() < 2 {
            return Err(Error::dim("matmul", &sa, &sb));
        }
        let k = *sa.last().unwrap();
        if sb.len() == 2 {
            if sb[0] != k {
                return Err(Error::dim("matmul", &sa, &sb));
            }
            let n = sb[1];
            let rows = self.value(a).len() / k.max(1);
            let mut out = vec![T::zero(); rows * n];
            T::gemm(
                rows,
                k,
                n,
                self.value(a),
                k as isize,
                1,
                self.value(b),
                n as isize,
                1,
                T::zero(),
                &mut out,
            );
            let mut shape = sa.clone();
            *shape.last_mut().unwrap() = n;
            let rg = self.rg(a) || self.rg(b);
            let op = Op::MatMul {
                a,
                b,
                batch: 1,
                m: rows,
                k,
                n,
                shared: true,
            };
            return Ok(self.push(shape, out, op, rg));
        }
        if sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] || sb[sb.len() - 2] != k {
            return Err(Error::dim("matmul", &sa, &sb));
        }
        let m = sa[sa.len() - 2];
        let n = sb[sb.len() - 1];
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let mut out = vec![T::zero(); batch * m * n];
        {
            let av = self.value(a);
            let bv = self.value(b);
            for bi in 0..batch {
                T::gemm(
                    m,
                    k,
                    n,
                    &av[bi * m * k..],
                    k as isize,
                    1,
                    &bv[bi * k * n..],
                    n as isize,
                    1,
                    T::zero(),
                    &mut out[bi * m * n..(bi + 1) * m * n],
                );
            }
        }
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(a) || self.rg(b);
        let op = Op::MatMul {
            a,
            b,
            batch,
            m,
            k,
            n,
            shared: false,
        };
        Ok(self.push(shape, out, op, rg))
    }

    /// Swaps the two trailing axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::Dimension(format!("transpose needs rank >= 2, got {s:?}")));
        }
        let rows = s[s.len() - 2];
        let cols = s[s.len() - 1];
        let batch = self.value(x).len() / (rows * cols).max(1);
        let out = transpose_buf(self.value(x), batch, rows, cols);
        let mut shape = s;
        let r = shape.len();
        shape.swap(r - 2, r - 1);
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::Transpose { x, batch, rows, cols }, rg))
    }

    // ---- elementwise ----------------------------------------------------

    fn broadcast_check(&self, op: &str, a: Var, b: Var) -> Result<()> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::dim(op, sa, sb));
        }
        Ok(())
    }

    /// Elementwise sum; `b` may broadcast over the leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = if self.shape(b).len() > self.shape(a).len() {
            (b, a)
        } else {
            (a, b)
        };
        self.broadcast_check("add", a, b)?;
        let out = zip_bcast(self.value(a), self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add { a, b }, rg))
    }

    /// Elementwise difference; `b` may broadcast over the leading axes of `a`.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_check("sub", a, b)?;
        let out = zip_bcast(self.value(a), self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Sub { a, b }, rg))
    }

    /// Elementwise product; `b` may broadcast over the leading axes of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = if self.shape(b).len() > self.shape(a).len() {
            (b, a)
        } else {
            (a, b)
        };
        self.broadcast_check("mul", a, b)?;
        let out = zip_bcast(self.value(a), self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let s = T::of(s);
        let out = self.value(x).iter().map(|&v| v * s).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, Op::Scale { x, s }, rg)
    }

    /// GELU, tanh approximation: `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let t: Vec<T> = xv.iter().map(|&v| gelu_tanh(v)).collect();
        let half = T::of(0.5);
        let out = xv.iter().zip(&t).map(|(&v, &th)| half * v * (T::one() + th)).collect();
        let rg = self.rg(x);
        let t = if rg { t } else { Vec::new() };
        self.push(self.shape(x).to_vec(), out, Op::Gelu { x, t }, rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|v| v.tanh()).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, Op::Tanh { x }, rg)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|v| v.abs()).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, Op::Abs { x }, rg)
    }

    // ---- normalization --------------------------------------------------

    /// Layer norm over the trailing axis, with optional affine parameters.
    pub fn layer_norm(&mut self, x: Var, gain: Option<Var>, bias: Option<Var>, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let d = *s.last().unwrap_or(&0);
        if d == 0 {
            return Err(Error::Dimension(format!("layer_norm over empty axis {s:?}")));
        }
        for p in [gain, bias].into_iter().flatten() {
            if self.shape(p) != [d] {
                return Err(Error::dim("layer_norm affine", &s, self.shape(p)));
            }
        }
        let xv = self.value(x);
        let rows = xv.len() / d;
        let inv_d = T::of(1.0 / d as f64);
        let eps = T::of(eps);
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().fold(T::zero(), |a, &v| a + v) * inv_d;
            let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for (o, &v) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (v - mean) * rs;
            }
        }
        let mut out = xhat.clone();
        if let Some(gv) = gain {
            let gv = self.value(gv);
            out.chunks_mut(d)
                .for_each(|row| row.iter_mut().zip(gv).for_each(|(o, &g)| *o *= g));
        }
        if let Some(bv) = bias {
            let bv = self.value(bv);
            out.chunks_mut(d)
                .for_each(|row| row.iter_mut().zip(bv).for_each(|(o, &b)| *o += b));
        }
        let rg = self.rg(x) || gain.is_some_and(|g| self.rg(g)) || bias.is_some_and(|b| self.rg(b));
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            d,
            xhat,
            rstd,
        };
        Ok(self.push(s, out, op, rg))
    }

    /// Multi-head scaled dot-product attention on `[b, t, d]` queries, keys
    /// and values, with heads taken as contiguous `d / heads` channel groups:
    /// `softmax(q_h k_h^T / sqrt(d_h)) v_h` per batch element and head.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let s = self.shape(q).to_vec();
        if s.len() != 3 || self.shape(k) != s.as_slice() || self.shape(v) != s.as_slice() {
            return Err(Error::Dimension(format!(
                "attention needs equal [b, t, d] inputs, got {:?}, {:?}, {:?}",
                s,
                self.shape(k),
                self.shape(v)
            )));
        }
        let (b, t, d) = (s[0], s[1], s[2]);
        if heads == 0 || d % heads != 0 {
            return Err(Error::Dimension(format!("{heads} heads do not divide width {d}")));
        }
        let dh = d / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let mut probs = vec![T::zero(); b * heads * t * t];
        let mut out = vec![T::zero(); b * t * d];
        {
            let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
            for bi in 0..b {
                for h in 0..heads {
                    let off = bi * t * d + h * dh;
                    let p = &mut probs[(bi * heads + h) * t * t..(bi * heads + h + 1) * t * t];
                    T::gemm_ex(
                        t,
                        dh,
                        t,
                        scale,
                        &qv[off..],
                        (d, 1),
                        &kv[off..],
                        (1, d),
                        T::zero(),
                        p,
                        (t, 1),
                    );
                    p.chunks_mut(t).for_each(softmax_in_place);
                    T::gemm_ex(
                        t,
                        t,
                        dh,
                        T::one(),
                        p,
                        (t, 1),
                        &vv[off..],
                        (d, 1),
                        T::zero(),
                        &mut out[off..],
                        (d, 1),
                    );
                }
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        let probs = if rg { probs } else { Vec::new() };
        let op = Op::Attention {
            q,
            k,
            v,
            b,
            t,
            heads,
            dh,
            probs,
        };
        Ok(self.push(s, out, op, rg))
    }

    /// Softmax over the trailing axis with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let n = *s.last().unwrap_or(&1);
        let mut out = self.value(x).to_vec();
        out.chunks_mut(n.max(1)).for_each(softmax_in_place);
        let rg = self.rg(x);
        self.push(s, out, Op::Softmax { x, n }, rg)
    }

    // ---- reductions -----------------------------------------------------

    /// Mean squared error; `target` must not require gradients.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        if self.shape(pred) != self.shape(target) {
            return Err(Error::dim("mse", self.shape(pred), self.shape(target)));
        }
        if self.rg(target) {
            return Err(Error::Usage("mse target must not require gradients".into()));
        }
        let pv = self.value(pred);
        let tv = self.value(target);
        let n = pv.len().max(1);
        let sum = pv
            .iter()
            .zip(tv)
            .fold(T::zero(), |acc, (&p, &t)| acc + (p - t) * (p - t));
        let val = sum / T::of(n as f64);
        let rg = self.rg(pred);
        Ok(self.push(vec![], vec![val], Op::Mse { pred, target }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let val = self.value(x).iter().fold(T::zero(), |a, &v| a + v);
        let rg = self.rg(x);
        self.push(vec![], vec![val], Op::Sum { x }, rg)
    }

    // ---- shape ----------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(Error::dim("reshape", self.shape(x), shape));
        }
        let out = self.value(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(shape.to_vec(), out, Op::Reshape { x }, rg))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len()
            || perm
                .iter()
                .any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::Dimension(format!("invalid permutation {perm:?} for {s:?}")));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
        let out = permute_buf(self.value(x), &s, perm);
        let rg = self.rg(x);
        Ok(self.push(out_shape, out, Op::Permute { x, perm: perm.to_vec() }, rg))
    }

    /// Picks token rows along the second-to-last axis of `[.., t, d]`.
    pub fn gather_tokens(&mut self, x: Var, index: &TokenIndex) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::Dimension(format!("gather_tokens needs rank >= 2, got {s:?}")));
        }
        let t = s[s.len() - 2];
        let d = s[s.len() - 1];
        let lead = self.value(x).len() / (t * d).max(1);
        let n = index.len();
        let (out_lead, shape) = match index {
            TokenIndex::Shared(_) => {
                let mut shape = s.clone();
                let r = shape.len();
                shape[r - 2] = n;
                (lead, shape)
            }
            TokenIndex::PerBatch(lists) => {
                let b = lists.len();
                if lists.iter().any(|l| l.len() != n) {
                    return Err(Error::Dimension("per-batch token lists differ in length".into()));
                }
                if !(s.len() == 2 || (s.len() == 3 && s[0] == b)) {
                    return Err(Error::Dimension(format!("per-batch gather of {b} lists from {s:?}")));
                }
                (b, vec![b, n, d])
            }
        };
        let xv = self.value(x);
        let mut out = Vec::with_capacity(out_lead * n * d);
        for bi in 0..out_lead {
            let src = if lead == 1 { 0 } else { bi };
            for &row in index.rows(bi) {
                if row >= t {
                    return Err(Error::Dimension(format!("token {row} out of range for {s:?}")));
                }
                let off = (src * t + row) * d;
                out.extend_from_slice(&xv[off..off + d]);
            }
        }
        let rg = self.rg(x);
        let op = Op::Gather {
            x,
            index: index.clone(),
            lead,
            t,
            d,
        };
        Ok(self.push(shape, out, op, rg))
    }

    /// Concatenates `[.., ta, d]` and `[.., tb, d]` along the token axis.
    pub fn concat_tokens(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let r = sa.len();
        if r < 2 || sb.len() != r || sa[..r - 2] != sb[..r - 2] || sa[r - 1] != sb[r - 1] {
            return Err(Error::dim("concat_tokens", &sa, &sb));
        }
        let (ta, tb, d) = (sa[r - 2], sb[r - 2], sa[r - 1]);
        let lead: usize = sa[..r - 2].iter().product();
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(av.len() + bv.len());
        for l in 0..lead {
            out.extend_from_slice(&av[l * ta * d..(l + 1) * ta * d]);
            out.extend_from_slice(&bv[l * tb * d..(l + 1) * tb * d]);
        }
        let mut shape = sa;
        shape[r - 2] = ta + tb;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, out, Op::Concat { a, b, lead, ta, tb, d }, rg))
    }

    /// Repeats `x` along a new leading axis.
    pub fn expand(&mut self, x: Var, reps: usize) -> Var {
        let mut shape = vec![reps];
        shape.extend_from_slice(self.shape(x));
        let xv = self.value(x);
        let mut out = Vec::with_capacity(xv.len() * reps);
        for _ in 0..reps {
            out.extend_from_slice(xv);
        }
        let rg = self.rg(x);
        self.push(shape, out, Op::Expand { x, reps }, rg)
    }

    // ---- backward -------------------------------------------------------

    /// Back-propagates from a scalar loss. Leaf gradients remain readable
    /// through [`Graph::grad`]; a second call is a usage error.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::Usage("backward called twice on the same graph".into()));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        self.consumed = true;
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            self.backprop_node(i, &g)?;
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, g: &[T]) -> Result<()> {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let node = &nodes[i];
        let wants = |v: Var| nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared,
            } => {
                let av = &nodes[a.0].value;
                let bv = &nodes[b.0].value;
                if shared {
                    if wants(a) {
                        let ga = slot(grads, a, av.len());
                        // ga[m,k] += g[m,n] . b^T
                        T::gemm(m, n, k, g, n as isize, 1, bv, 1, n as isize, T::one(), ga);
                    }
                    if wants(b) {
                        let gb = slot(grads, b, bv.len());
                        // gb[k,n] += a^T . g
                        T::gemm(k, m, n, av, 1, k as isize, g, n as isize, 1, T::one(), gb);
                    }
                } else {
                    if wants(a) {
                        let ga = slot(grads, a, av.len());
                        for bi in 0..batch {
                            T::gemm(
                                m,
                                n,
                                k,
                                &g[bi * m * n..],
                                n as isize,
                                1,
                                &bv[bi * k * n..],
                                1,
                                n as isize,
                                T::one(),
                                &mut ga[bi * m * k..(bi + 1) * m * k],
                            );
                        }
                    }
                    if wants(b) {
                        let gb = slot(grads, b, bv.len());
                        for bi in 0..batch {
                            T::gemm(
                                k,
                                m,
                                n,
                                &av[bi * m * k..],
                                1,
                                k as isize,
                                &g[bi * m * n..],
                                n as isize,
                                1,
                                T::one(),
                                &mut gb[bi * k * n..(bi + 1) * k * n],
                            );
                        }
                    }
                }
            }
            &Op::Transpose { x, batch, rows, cols } => {
                let back = transpose_buf(g, batch, cols, rows);
                add_into(slot(grads, x, back.len()), &back);
            }
            &Op::Add { a, b } => {
                if wants(a) {
                    add_into(slot(grads, a, g.len()), g);
                }
                if wants(b) {
                    let nb = nodes[b.0].value.len();
                    reduce_into(slot(grads, b, nb), g);
                }
            }
            &Op::Sub { a, b } => {
                if wants(a) {
                    add_into(slot(grads, a, g.len()), g);
                }
                if wants(b) {
                    let nb = nodes[b.0].value.len();
                    let gb = slot(grads, b, nb);
                    for (j, &gv) in g.iter().enumerate() {
                        gb[j % nb] -= gv;
                    }
                }
            }
            &Op::Mul { a, b } => {
                let av = &nodes[a.0].value;
                let bv = &nodes[b.0].value;
                let nb = bv.len();
                if wants(a) {
                    let ga = slot(grads, a, av.len());
                    for (j, &gv) in g.iter().enumerate() {
                        ga[j] += gv * bv[j % nb];
                    }
                }
                if wants(b) {
                    let gb = slot(grads, b, nb);
                    for (j, &gv) in g.iter().enumerate() {
                        gb[j % nb] += gv * av[j];
                    }
                }
            }
            &Op::Scale { x, s } => {
                let gx = slot(grads, x, g.len());
                gx.iter_mut().zip(g).for_each(|(o, &gv)| *o += gv * s);
            }
            Op::Gelu { x, t } => {
                let xv = &nodes[x.0].value;
                let gx = slot(grads, *x, g.len());
                for (((o, &gv), &v), &th) in gx.iter_mut().zip(g).zip(xv).zip(t) {
                    *o += gv * gelu_grad(v, th);
                }
            }
            &Op::Tanh { x } => {
                let yv = &node.value;
                let gx = slot(grads, x, g.len());
                for ((o, &gv), &y) in gx.iter_mut().zip(g).zip(yv) {
                    *o += gv * (T::one() - y * y);
                }
            }
            &Op::Abs { x } => {
                let xv = &nodes[x.0].value;
                let gx = slot(grads, x, g.len());
                for ((o, &gv), &v) in gx.iter_mut().zip(g).zip(xv) {
                    if v > T::zero() {
                        *o += gv;
                    } else if v < T::zero() {
                        *o -= gv;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                d,
                xhat,
                rstd,
            } => {
                let d = *d;
                let rows = g.len() / d;
                if let Some(bv) = *bias {
                    if wants(bv) {
                        let gb = slot(grads, bv, d);
                        g.chunks(d).for_each(|row| add_into(gb, row));
                    }
                }
                if let Some(gn) = *gain {
                    if wants(gn) {
                        let gg = slot(grads, gn, d);
                        for (grow, xrow) in g.chunks(d).zip(xhat.chunks(d)) {
                            for j in 0..d {
                                gg[j] += grow[j] * xrow[j];
                            }
                        }
                    }
                }
                if wants(*x) {
                    let gainv = gain.map(|gn| nodes[gn.0].value.as_slice());
                    let inv_d = T::of(1.0 / d as f64);
                    let gx = slot(grads, *x, g.len());
                    let mut dxhat = vec![T::zero(); d];
                    for r in 0..rows {
                        let grow = &g[r * d..(r + 1) * d];
                        let xrow = &xhat[r * d..(r + 1) * d];
                        for j in 0..d {
                            dxhat[j] = match gainv {
                                Some(gv) => grow[j] * gv[j],
                                None => grow[j],
                            };
                        }
                        let mean_d = dxhat.iter().fold(T::zero(), |a, &v| a + v) * inv_d;
                        let mean_dx = dxhat.iter().zip(xrow).fold(T::zero(), |a, (&u, &v)| a + u * v) * inv_d;
                        let out = &mut gx[r * d..(r + 1) * d];
                        for j in 0..d {
                            out[j] += rstd[r] * (dxhat[j] - mean_d - xrow[j] * mean_dx);
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                b,
                t,
                heads,
                dh,
                probs,
            } => {
                let (q, k, v) = (*q, *k, *v);
                let (b, t, heads, dh) = (*b, *t, *heads, *dh);
                let d = heads * dh;
                let scale = T::of(1.0 / (dh as f64).sqrt());
                let (qv, kv, vv) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
                let n = b * t * d;
                let mut gq = if wants(q) {
                    grads[q.0].take().unwrap_or_else(|| vec![T::zero(); n])
                } else {
                    Vec::new()
                };
                let mut gk = if wants(k) {
                    grads[k.0].take().unwrap_or_else(|| vec![T::zero(); n])
                } else {
                    Vec::new()
                };
                let mut gv = if wants(v) {
                    grads[v.0].take().unwrap_or_else(|| vec![T::zero(); n])
                } else {
                    Vec::new()
                };
                let mut dp = vec![T::zero(); t * t];
                for bi in 0..b {
                    for h in 0..heads {
                        let off = bi * t * d + h * dh;
                        let p = &probs[(bi * heads + h) * t * t..(bi * heads + h + 1) * t * t];
                        if wants(v) {
                            // dV += P^T dO
                            T::gemm_ex(
                                t,
                                t,
                                dh,
                                T::one(),
                                p,
                                (1, t),
                                &g[off..],
                                (d, 1),
                                T::one(),
                                &mut gv[off..],
                                (d, 1),
                            );
                        }
                        if !(wants(q) || wants(k)) {
                            continue;
                        }
                        // dP = dO V^T, then dS = P (dP - rowsum(dP P)) scaled
                        T::gemm_ex(
                            t,
                            dh,
                            t,
                            T::one(),
                            &g[off..],
                            (d, 1),
                            &vv[off..],
                            (1, d),
                            T::zero(),
                            &mut dp,
                            (t, 1),
                        );
                        for (drow, prow) in dp.chunks_mut(t).zip(p.chunks(t)) {
                            let dot = drow.iter().zip(prow).fold(T::zero(), |a, (&x, &y)| a + x * y);
                            for (dv, &pv) in drow.iter_mut().zip(prow) {
                                *dv = pv * (*dv - dot) * scale;
                            }
                        }
                        if wants(q) {
                            T::gemm_ex(
                                t,
                                t,
                                dh,
                                T::one(),
                                &dp,
                                (t, 1),
                                &kv[off..],
                                (d, 1),
                                T::one(),
                                &mut gq[off..],
                                (d, 1),
                            );
                        }
                        if wants(k) {
                            T::gemm_ex(
                                t,
                                t,
                                dh,
                                T::one(),
                                &dp,
                                (1, t),
                                &qv[off..],
                                (d, 1),
                                T::one(),
                                &mut gk[off..],
                                (d, 1),
                            );
                        }
                    }
                }
                // q, k and v may be the same node; merge rather than overwrite.
                for (var, buf) in [(q, gq), (k, gk), (v, gv)] {
                    if wants(var) {
                        match grads[var.0].as_mut() {
                            Some(existing) => add_into(existing, &buf),
                            None => grads[var.0] = Some(buf),
                        }
                    }
                }
            }
            &Op::Softmax { x, n } => {
                let yv = &node.value;
                let gx = slot(grads, x, g.len());
                for ((grow, yrow), out) in g.chunks(n).zip(yv.chunks(n)).zip(gx.chunks_mut(n)) {
                    let dot = grow.iter().zip(yrow).fold(T::zero(), |a, (&u, &v)| a + u * v);
                    for j in 0..n {
                        out[j] += yrow[j] * (grow[j] - dot);
                    }
                }
            }
            &Op::Mse { pred, target } => {
                let pv = &nodes[pred.0].value;
                let tv = &nodes[target.0].value;
                let coef = g[0] * T::of(2.0 / pv.len().max(1) as f64);
                let gp = slot(grads, pred, pv.len());
                for ((o, &p), &t) in gp.iter_mut().zip(pv).zip(tv) {
                    *o += coef * (p - t);
                }
            }
            &Op::Sum { x } => {
                let n = nodes[x.0].value.len();
                let gx = slot(grads, x, n);
                gx.iter_mut().for_each(|o| *o += g[0]);
            }
            &Op::Reshape { x } => {
                add_into(slot(grads, x, g.len()), g);
            }
            Op::Permute { x, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let back = permute_buf(g, &node.shape, &inv);
                add_into(slot(grads, *x, back.len()), &back);
            }
            Op::Gather { x, index, lead, t, d } => {
                let (lead, t, d) = (*lead, *t, *d);
                let n = index.len();
                let out_lead = g.len() / (n * d).max(1);
                let gx = slot(grads, *x, lead * t * d);
                for bi in 0..out_lead {
                    let src = if lead == 1 { 0 } else { bi };
                    for (ri, &row) in index.rows(bi).iter().enumerate() {
                        let off = (src * t + row) * d;
                        let goff = (bi * n + ri) * d;
                        add_into(&mut gx[off..off + d], &g[goff..goff + d]);
                    }
                }
            }
            &Op::Concat { a, b, lead, ta, tb, d } => {
                let stride = (ta + tb) * d;
                if wants(a) {
                    let ga = slot(grads, a, lead * ta * d);
                    for l in 0..lead {
                        add_into(
                            &mut ga[l * ta * d..(l + 1) * ta * d],
                            &g[l * stride..l * stride + ta * d],
                        );
                    }
                }
                if wants(b) {
                    let gb = slot(grads, b, lead * tb * d);
                    for l in 0..lead {
                        add_into(
                            &mut gb[l * tb * d..(l + 1) * tb * d],
                            &g[l * stride + ta * d..(l + 1) * stride],
                        );
                    }
                }
            }
            &Op::Expand { x, reps } => {
                let n = nodes[x.0].value.len();
                let gx = slot(grads, x, n);
                for r in 0..reps {
                    add_into(gx, &g[r * n..(r + 1) * n]);
                }
            }
        }
        Ok(())
    }
}

fn slot<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

/// Sums `src` into `dst`, wrapping indices modulo `dst.len()`.
fn reduce_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    let n = dst.len();
    if n == src.len() {
        add_into(dst, src);
    } else {
        for chunk in src.chunks(n) {
            add_into(dst, chunk);
        }
    }
}

fn zip_bcast<T: Scalar>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    let nb = b.len();
    if nb == a.len() {
        a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
    } else {
        a.chunks(nb)
            .flat_map(|c| c.iter().zip(b).map(|(&x, &y)| f(x, y)))
            .collect()
    }
}

fn transpose_buf<T: Scalar>(x: &[T], batch: usize, rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for bi in 0..batch {
        let src = &x[bi * rows * cols..(bi + 1) * rows * cols];
        let dst = &mut out[bi * rows * cols..(bi + 1) * rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                dst[c * rows + r] = src[r * cols + c];
            }
        }
    }
    out
}

fn permute_buf<T: Scalar>(x: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(x.len());
    let mut idx = vec![0usize; rank];
    for _ in 0..x.len() {
        let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(x[off]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    out
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

/// `tanh(sqrt(2/pi) (x + 0.044715 x^3))`.
fn gelu_tanh<T: Scalar>(x: T) -> T {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let k = T::of(GELU_COEFF);
    (c * (x + k * x * x * x)).fast_tanh()
}

fn gelu_grad<T: Scalar>(x: T, t: T) -> T {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let k = T::of(GELU_COEFF);
    let half = T::of(0.5);
    let dinner = c * (T::one() + T::of(3.0) * k * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * dinner
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::matmul_reference;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut g = Graph::<f64>::new();
        let i = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let v = g.constant(t(&[2, 1], &[3.0, 4.0]));
        let out = g.matmul(i, v).unwrap();
        assert_eq!(g.value(out), &[3.0, 4.0]);

        let a = g.constant(t(&[1, 2], &[1.0, 2.0]));
        let out = g.matmul(a, v).unwrap();
        assert_eq!(g.value(out), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[4, 2]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
    }

    #[test]
    fn matmul_matches_triple_loop_f32() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a: Vec<f32> = (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f32> = (0..15).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut g = Graph::<f32>::new();
        let va = g.constant(Tensor::new(&[4, 5], a.clone()).unwrap());
        let vb = g.constant(Tensor::new(&[5, 3], b.clone()).unwrap());
        let out = g.matmul(va, vb).unwrap();
        let oracle = matmul_reference(&a, &b, 4, 5, 3);
        for (x, y) in g.value(out).iter().zip(&oracle) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn batched_matmul_matches_per_slice_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a: Vec<f64> = (0..2 * 3 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..2 * 4 * 2).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut g = Graph::<f64>::new();
        let va = g.constant(t(&[2, 3, 4], &a));
        let vb = g.constant(t(&[2, 4, 2], &b));
        let out = g.matmul(va, vb).unwrap();
        assert_eq!(g.shape(out), &[2, 3, 2]);
        for bi in 0..2 {
            let r = matmul_reference(&a[bi * 12..(bi + 1) * 12], &b[bi * 8..(bi + 1) * 8], 3, 4, 2);
            for (x, y) in g.value(out)[bi * 6..(bi + 1) * 6].iter().zip(&r) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn add_zero_and_illegal_broadcast() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let z = g.constant(Tensor::zeros(&[2]));
        let y = g.add(x, z).unwrap();
        assert_eq!(g.value(y), g.value(x));
        let bad = g.constant(Tensor::zeros(&[3]));
        assert!(matches!(g.add(x, bad), Err(Error::Dimension(_))));
        let lead = g.constant(Tensor::zeros(&[2, 1]));
        assert!(g.mul(x, lead).is_err());
    }

    #[test]
    fn gelu_at_origin() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1], &[0.0]));
        let y = g.gelu(x);
        assert_eq!(g.value(y), &[0.0]);
    }

    #[test]
    fn layer_norm_cases() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 4], &[5.0; 4]));
        let y = g.layer_norm(x, None, None, 1e-6).unwrap();
        assert_eq!(g.value(y), &[0.0; 4]);
        let x = g.constant(t(&[1, 2], &[1.0, -1.0]));
        let y = g.layer_norm(x, None, None, 1e-6).unwrap();
        assert!((g.value(y)[0] - 1.0).abs() < 1e-6);
        assert!((g.value(y)[1] + 1.0).abs() < 1e-6);
        let e = g.constant(Tensor::zeros(&[3, 0]));
        assert!(g.layer_norm(e, None, None, 1e-6).is_err());
    }

    #[test]
    fn softmax_cases() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2, 2], &[0.0, 0.0, 1000.0, 0.0]));
        let y = g.softmax_rows(x);
        assert_eq!(g.value(y), &[0.5, 0.5, 1.0, 0.0]);
    }

    #[test]
    fn mse_cases() {
        let mut g = Graph::<f64>::new();
        let p = g.constant(t(&[1], &[2.0]));
        let z = g.constant(t(&[1], &[0.0]));
        let l = g.mse(p, z).unwrap();
        assert_eq!(g.scalar(l), 4.0);
        let l = g.mse(p, p).unwrap();
        assert_eq!(g.scalar(l), 0.0);
        let q = g.constant(t(&[2], &[0.0, 0.0]));
        assert!(g.mse(p, q).is_err());
        let w = g.param(&t(&[1], &[1.0]));
        assert!(matches!(g.mse(p, w), Err(Error::Usage(_))));
    }

    #[test]
    fn backward_sum_gives_ones_and_is_single_use() {
        let mut g = Graph::<f64>::new();
        let x = g.param(&Tensor::zeros(&[2, 3]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);
        assert!(matches!(g.backward(s), Err(Error::Usage(_))));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.param(&Tensor::zeros(&[2]));
        assert!(matches!(g.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn mse_of_linear_map_matches_closed_form() {
        // loss = mean((A x - y)^2), dA = 2 (A x - y) x^T / N
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (m, k, n) = (3, 4, 2);
        let a: Vec<f64> = (0..m * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x: Vec<f64> = (0..k * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..m * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut g = Graph::<f64>::new();
        let va = g.param(&t(&[m, k], &a));
        let vx = g.constant(t(&[k, n], &x));
        let vy = g.constant(t(&[m, n], &y));
        let ax = g.matmul(va, vx).unwrap();
        let l = g.mse(ax, vy).unwrap();
        g.backward(l).unwrap();
        let axv = matmul_reference(&a, &x, m, k, n);
        let nn = (m * n) as f64;
        for i in 0..m {
            for p in 0..k {
                let expect: f64 = (0..n)
                    .map(|j| 2.0 * (axv[i * n + j] - y[i * n + j]) * x[p * n + j] / nn)
                    .sum();
                assert!((g.grad(va).unwrap()[i * k + p] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shared_use_accumulates() {
        let mut g = Graph::<f64>::new();
        let x = g.param(&t(&[2], &[1.0, 2.0]));
        let y = g.mul(x, x).unwrap();
        let z = g.add(y, x).unwrap();
        let s = g.sum(z);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[3.0, 5.0]);
    }

    #[test]
    fn permute_roundtrip_and_gather() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn(&[2, 3, 4], |i| i as f64));
        let p = g.permute(x, &[1, 0, 2]).unwrap();
        assert_eq!(g.shape(p), &[3, 2, 4]);
        assert_eq!(g.value(p)[4..8], [12.0, 13.0, 14.0, 15.0]);
        let back = g.permute(p, &[1, 0, 2]).unwrap();
        assert_eq!(g.value(back), g.value(x));

        let s = g.gather_tokens(x, &TokenIndex::Shared(vec![2, 0])).unwrap();
        assert_eq!(g.shape(s), &[2, 2, 4]);
        assert_eq!(&g.value(s)[..4], &[8.0, 9.0, 10.0, 11.0]);
        let pb = g
            .gather_tokens(x, &TokenIndex::PerBatch(vec![vec![1], vec![2]]))
            .unwrap();
        assert_eq!(g.value(pb), &[4.0, 5.0, 6.0, 7.0, 20.0, 21.0, 22.0, 23.0]);
        assert!(g.gather_tokens(x, &TokenIndex::Shared(vec![3])).is_err());
    }

    fn attention_reference(q: &[f64], k: &[f64], v: &[f64], b: usize, t: usize, d: usize, heads: usize) -> Vec<f64> {
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = vec![0.0; b * t * d];
        for bi in 0..b {
            for h in 0..heads {
                for i in 0..t {
                    let row = |x: &[f64], r: usize, c: usize| x[(bi * t + r) * d + h * dh + c];
                    let s: Vec<f64> = (0..t)
                        .map(|j| (0..dh).map(|c| row(q, i, c) * row(k, j, c)).sum::<f64>() * scale)
                        .collect();
                    let mx = s.iter().cloned().fold(f64::MIN, f64::max);
                    let e: Vec<f64> = s.iter().map(|x| (x - mx).exp()).collect();
                    let z: f64 = e.iter().sum();
                    for c in 0..dh {
                        out[(bi * t + i) * d + h * dh + c] = (0..t).map(|j| e[j] / z * row(v, j, c)).sum();
                    }
                }
            }
        }
        out
    }

    #[test]
    fn attention_matches_loop_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (b, tk, d, heads) = (2, 5, 6, 3);
        let mut draw = || (0..b * tk * d).map(|_| rng.gen_range(-1.5..1.5)).collect::<Vec<f64>>();
        let (q, k, v) = (draw(), draw(), draw());
        let mut g = Graph::<f64>::new();
        let vq = g.constant(t(&[b, tk, d], &q));
        let vk = g.constant(t(&[b, tk, d], &k));
        let vv = g.constant(t(&[b, tk, d], &v));
        let out = g.attention(vq, vk, vv, heads).unwrap();
        let oracle = attention_reference(&q, &k, &v, b, tk, d, heads);
        for (x, y) in g.value(out).iter().zip(&oracle) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(g.attention(vq, vk, vv, 4).is_err());
    }

    #[test]
    fn attention_grad_check() {
        use crate::tensor::gradcheck::grad_check;
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let mut draw = |s: &[usize]| Tensor::from_fn(s, |_| rng.gen_range(-1.0..1.0));
        let inputs = [draw(&[2, 4, 4]), draw(&[2, 4, 4]), draw(&[2, 4, 4]), draw(&[2, 4, 4])];
        let r = grad_check(
            |g, v| {
                let o = g.attention(v[0], v[1], v[2], 2)?;
                let w = g.mul(o, v[3])?;
                Ok(g.sum(w))
            },
            &inputs,
            1e-6,
        )
        .unwrap();
        assert!(r.passed, "{}", r.max_rel_err);
        let shared = grad_check(
            |g, v| {
                let o = g.attention(v[0], v[0], v[0], 2)?;
                let w = g.mul(o, v[1])?;
                Ok(g.sum(w))
            },
            &inputs[..2],
            1e-6,
        )
        .unwrap();
        assert!(shared.passed, "{}", shared.max_rel_err);
    }
}
