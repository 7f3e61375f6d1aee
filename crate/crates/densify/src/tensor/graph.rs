//! Operation recording and reverse-mode differentiation.
//!
//! Nodes are appended in creation order, so reverse tape order is a valid
//! topological order for the backward sweep. The backward sweep emits its
//! gradient arithmetic as ordinary nodes on the same graph, which keeps the
//! op set closed under differentiation: `grad` of a `grad` works to any
//! order.

use std::cell::RefCell;
use std::sync::Arc;

use rand::Rng;

use super::{
    binary_broadcast, broadcast_shape, broadcast_to_kernel, broadcastable_to, pairwise_sum,
    sum_to_kernel, Tensor, TensorError,
};

/// Handle to a node in a [`Graph`]. Only meaningful for the graph that
/// created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReduceKind {
    Mean,
    Sum,
    Max,
}

#[derive(Clone)]
enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    MatMul,
    Relu,
    /// Elementwise product with a fixed buffer (dropout masks, relu and
    /// max-reduce indicators). The buffer is a constant of the graph.
    MulMask(Arc<Vec<f64>>),
    Scale(f64),
    Exp,
    Reduce { axis: usize, kind: ReduceKind },
    MeanAll,
    SumAll,
    BroadcastTo,
    SumTo,
    TransposeLast2,
    Concat { axis: usize },
    Slice { axis: usize, start: usize },
    PadZero { axis: usize, before: usize },
}

struct Node {
    op: Op,
    parents: Vec<Var>,
    value: Tensor,
}

/// Per-forward-pass computation graph (a tape). Single-threaded by design;
/// independent graphs may live on different threads.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.borrow().len()
    }

    fn push(&self, op: Op, parents: Vec<Var>, value: Tensor) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op, parents, value });
        Var(nodes.len() - 1)
    }

    /// Insert a constant/parameter value as a graph leaf.
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(Op::Leaf, vec![], value)
    }

    /// Copy of the forward value at `v`.
    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape_of(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    fn with_value<T>(&self, v: Var, f: impl FnOnce(&Tensor) -> T) -> T {
        f(&self.nodes.borrow()[v.0].value)
    }

    // ── elementwise ─────────────────────────────────────────────────────

    pub fn add(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = {
            let nodes = self.nodes.borrow();
            binary_broadcast("add", &nodes[a.0].value, &nodes[b.0].value, |x, y| x + y)?
        };
        Ok(self.push(Op::Add, vec![a, b], value))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = {
            let nodes = self.nodes.borrow();
            binary_broadcast("sub", &nodes[a.0].value, &nodes[b.0].value, |x, y| x - y)?
        };
        Ok(self.push(Op::Sub, vec![a, b], value))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = {
            let nodes = self.nodes.borrow();
            binary_broadcast("mul", &nodes[a.0].value, &nodes[b.0].value, |x, y| x * y)?
        };
        Ok(self.push(Op::Mul, vec![a, b], value))
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = {
            let nodes = self.nodes.borrow();
            binary_broadcast("div", &nodes[a.0].value, &nodes[b.0].value, |x, y| x / y)?
        };
        Ok(self.push(Op::Div, vec![a, b], value))
    }

    pub fn relu(&self, a: Var) -> Var {
        let value = self.with_value(a, |t| {
            Tensor::new(
                t.shape().to_vec(),
                t.data().iter().map(|&x| x.max(0.0)).collect(),
            )
            .expect("same shape")
        });
        self.push(Op::Relu, vec![a], value)
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let value = self.with_value(a, |t| {
            Tensor::new(
                t.shape().to_vec(),
                t.data().iter().map(|&x| x * c).collect(),
            )
            .expect("same shape")
        });
        self.push(Op::Scale(c), vec![a], value)
    }

    pub fn exp(&self, a: Var) -> Var {
        let value = self.with_value(a, |t| {
            Tensor::new(
                t.shape().to_vec(),
                t.data().iter().map(|&x| x.exp()).collect(),
            )
            .expect("same shape")
        });
        self.push(Op::Exp, vec![a], value)
    }

    pub(crate) fn mul_mask(&self, a: Var, mask: Arc<Vec<f64>>) -> Var {
        let value = self.with_value(a, |t| {
            assert_eq!(t.numel(), mask.len(), "mask length mismatch");
            Tensor::new(
                t.shape().to_vec(),
                t.data()
                    .iter()
                    .zip(mask.iter())
                    .map(|(&x, &m)| x * m)
                    .collect(),
            )
            .expect("same shape")
        });
        self.push(Op::MulMask(mask), vec![a], value)
    }

    /// Inverted dropout: in train mode zero each element with probability `p`
    /// and scale survivors by `1/(1-p)`; in eval mode (or at `p == 0`) the
    /// identity, consuming no randomness.
    pub fn dropout<R: Rng>(
        &self,
        a: Var,
        p: f64,
        train: bool,
        rng: &mut R,
    ) -> Result<Var, TensorError> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::InvalidParameter {
                op: "dropout",
                what: format!("rate {p} outside [0, 1)"),
            });
        }
        if !train || p == 0.0 {
            return Ok(a);
        }
        let keep_scale = 1.0 / (1.0 - p);
        let n = self.with_value(a, |t| t.numel());
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep_scale })
            .collect();
        Ok(self.mul_mask(a, Arc::new(mask)))
    }

    // ── linear algebra ──────────────────────────────────────────────────

    /// Batched matrix product `[..., n, k] · [..., k, m] -> [..., n, m]` with
    /// leading dimensions broadcast.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = {
            let nodes = self.nodes.borrow();
            matmul_kernel(&nodes[a.0].value, &nodes[b.0].value)?
        };
        Ok(self.push(Op::MatMul, vec![a, b], value))
    }

    /// Swap the last two axes.
    pub fn transpose(&self, a: Var) -> Result<Var, TensorError> {
        let value = {
            let nodes = self.nodes.borrow();
            transpose_kernel(&nodes[a.0].value)?
        };
        Ok(self.push(Op::TransposeLast2, vec![a], value))
    }

    // ── reductions ──────────────────────────────────────────────────────

    /// Reduce one axis to extent 1 (kept). Mean and sum have linear
    /// gradients; max routes its gradient to the first argmax.
    pub fn reduce(&self, a: Var, axis: usize, kind: ReduceKind) -> Result<Var, TensorError> {
        let value = {
            let nodes = self.nodes.borrow();
            reduce_kernel(&nodes[a.0].value, axis, kind)?
        };
        Ok(self.push(Op::Reduce { axis, kind }, vec![a], value))
    }

    pub fn mean_all(&self, a: Var) -> Var {
        let value = self.with_value(a, |t| {
            Tensor::scalar(pairwise_sum(t.data()) / t.numel() as f64)
        });
        self.push(Op::MeanAll, vec![a], value)
    }

    pub fn sum_all(&self, a: Var) -> Var {
        let value = self.with_value(a, |t| Tensor::scalar(pairwise_sum(t.data())));
        self.push(Op::SumAll, vec![a], value)
    }

    /// Mean squared error between equal-shaped tensors.
    pub fn mse(&self, pred: Var, target: Var) -> Result<Var, TensorError> {
        let (ps, ts) = {
            let nodes = self.nodes.borrow();
            (
                nodes[pred.0].value.shape().to_vec(),
                nodes[target.0].value.shape().to_vec(),
            )
        };
        if ps != ts {
            return Err(TensorError::ShapeMismatch {
                op: "mse",
                lhs: ps,
                rhs: ts,
            });
        }
        if ps.iter().product::<usize>() == 0 {
            return Err(TensorError::InvalidParameter {
                op: "mse",
                what: "empty prediction".into(),
            });
        }
        let d = self.sub(pred, target)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean_all(sq))
    }

    /// Scalar product `sum(a * b)` of equal-shaped tensors.
    pub fn dot(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        Ok(self.sum_all(self.mul(a, b)?))
    }

    // ── shape plumbing ──────────────────────────────────────────────────

    pub fn broadcast_to(&self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            if t.shape() == shape {
                return Ok(a);
            }
            if !broadcastable_to(t.shape(), shape) {
                return Err(TensorError::ShapeMismatch {
                    op: "broadcast_to",
                    lhs: t.shape().to_vec(),
                    rhs: shape.to_vec(),
                });
            }
            broadcast_to_kernel(t, shape)
        };
        Ok(self.push(Op::BroadcastTo, vec![a], value))
    }

    pub fn sum_to(&self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            if t.shape() == shape {
                return Ok(a);
            }
            if !broadcastable_to(shape, t.shape()) {
                return Err(TensorError::ShapeMismatch {
                    op: "sum_to",
                    lhs: t.shape().to_vec(),
                    rhs: shape.to_vec(),
                });
            }
            sum_to_kernel(t, shape)
        };
        Ok(self.push(Op::SumTo, vec![a], value))
    }

    pub fn concat(&self, axis: usize, parts: &[Var]) -> Result<Var, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::InvalidParameter {
                op: "concat",
                what: "no parts".into(),
            });
        }
        let value = {
            let nodes = self.nodes.borrow();
            let tensors: Vec<&Tensor> = parts.iter().map(|p| &nodes[p.0].value).collect();
            concat_kernel(axis, &tensors)?
        };
        Ok(self.push(Op::Concat { axis }, parts.to_vec(), value))
    }

    pub fn slice(&self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var, TensorError> {
        let value = {
            let nodes = self.nodes.borrow();
            slice_kernel(&nodes[a.0].value, axis, start, len)?
        };
        Ok(self.push(Op::Slice { axis, start }, vec![a], value))
    }

    fn pad_zero(&self, a: Var, axis: usize, before: usize, after: usize) -> Var {
        let value = self.with_value(a, |t| pad_zero_kernel(t, axis, before, after));
        self.push(Op::PadZero { axis, before }, vec![a], value)
    }

    // ── differentiation ─────────────────────────────────────────────────

    /// Reverse-mode gradients of a scalar `output` with respect to `inputs`.
    ///
    /// With `keep_graph` the returned vars are live graph expressions and can
    /// be differentiated again; without it they are detached constants.
    /// Inputs the output does not depend on are an error; see [`Graph::grad_opt`]
    /// for the permissive variant.
    pub fn grad(
        &self,
        output: Var,
        inputs: &[Var],
        keep_graph: bool,
    ) -> Result<Vec<Var>, TensorError> {
        let opts = self.grad_opt(output, inputs, keep_graph)?;
        opts.into_iter()
            .enumerate()
            .map(|(index, o)| o.ok_or(TensorError::Unreachable { index }))
            .collect()
    }

    /// Like [`Graph::grad`], but an input unreachable from the output yields
    /// `None` (a structural zero) instead of an error.
    pub fn grad_opt(
        &self,
        output: Var,
        inputs: &[Var],
        keep_graph: bool,
    ) -> Result<Vec<Option<Var>>, TensorError> {
        let limit = output.0 + 1;
        {
            let nodes = self.nodes.borrow();
            let out_t = &nodes[output.0].value;
            if out_t.numel() != 1 {
                return Err(TensorError::NonScalarOutput {
                    shape: out_t.shape().to_vec(),
                });
            }
        }
        let mut needed = vec![false; limit];
        needed[output.0] = true;
        {
            let nodes = self.nodes.borrow();
            for i in (0..limit).rev() {
                if needed[i] {
                    for p in &nodes[i].parents {
                        needed[p.0] = true;
                    }
                }
            }
        }

        let mut adjoint: Vec<Option<Var>> = vec![None; limit];
        let seed_shape = self.shape_of(output);
        adjoint[output.0] = Some(self.leaf(Tensor::filled(&seed_shape, 1.0)));

        for i in (0..limit).rev() {
            if !needed[i] {
                continue;
            }
            let Some(g) = adjoint[i] else { continue };
            let (op, parents) = {
                let nodes = self.nodes.borrow();
                (nodes[i].op.clone(), nodes[i].parents.clone())
            };
            match op {
                Op::Leaf => {}
                Op::Add => {
                    let ca = self.sum_to(g, &self.shape_of(parents[0]))?;
                    self.accumulate(&mut adjoint, parents[0], ca)?;
                    let cb = self.sum_to(g, &self.shape_of(parents[1]))?;
                    self.accumulate(&mut adjoint, parents[1], cb)?;
                }
                Op::Sub => {
                    let ca = self.sum_to(g, &self.shape_of(parents[0]))?;
                    self.accumulate(&mut adjoint, parents[0], ca)?;
                    let neg = self.scale(g, -1.0);
                    let cb = self.sum_to(neg, &self.shape_of(parents[1]))?;
                    self.accumulate(&mut adjoint, parents[1], cb)?;
                }
                Op::Mul => {
                    let (a, b) = (parents[0], parents[1]);
                    let ca = self.sum_to(self.mul(g, b)?, &self.shape_of(a))?;
                    self.accumulate(&mut adjoint, a, ca)?;
                    let cb = self.sum_to(self.mul(g, a)?, &self.shape_of(b))?;
                    self.accumulate(&mut adjoint, b, cb)?;
                }
                Op::Div => {
                    let (a, b) = (parents[0], parents[1]);
                    let ca = self.sum_to(self.div(g, b)?, &self.shape_of(a))?;
                    self.accumulate(&mut adjoint, a, ca)?;
                    // d(a/b)/db = -(a/b)/b, reusing the recorded quotient.
                    let quot_over_b = self.div(Var(i), b)?;
                    let cb_full = self.scale(self.mul(g, quot_over_b)?, -1.0);
                    let cb = self.sum_to(cb_full, &self.shape_of(b))?;
                    self.accumulate(&mut adjoint, b, cb)?;
                }
                Op::MatMul => {
                    let (a, b) = (parents[0], parents[1]);
                    let bt = self.transpose(b)?;
                    let ca = self.sum_to(self.matmul(g, bt)?, &self.shape_of(a))?;
                    self.accumulate(&mut adjoint, a, ca)?;
                    let at = self.transpose(a)?;
                    let cb = self.sum_to(self.matmul(at, g)?, &self.shape_of(b))?;
                    self.accumulate(&mut adjoint, b, cb)?;
                }
                Op::Relu => {
                    let mask: Vec<f64> = self.with_value(parents[0], |t| {
                        t.data()
                            .iter()
                            .map(|&x| if x > 0.0 { 1.0 } else { 0.0 })
                            .collect()
                    });
                    let ca = self.mul_mask(g, Arc::new(mask));
                    self.accumulate(&mut adjoint, parents[0], ca)?;
                }
                Op::MulMask(mask) => {
                    let ca = self.mul_mask(g, mask);
                    self.accumulate(&mut adjoint, parents[0], ca)?;
                }
                Op::Scale(c) => {
                    let ca = self.scale(g, c);
                    self.accumulate(&mut adjoint, parents[0], ca)?;
                }
                Op::Exp => {
                    let ca = self.mul(g, Var(i))?;
                    self.accumulate(&mut adjoint, parents[0], ca)?;
                }
                Op::Reduce { axis, kind } => {
                    let pshape = self.shape_of(parents[0]);
                    let spread = self.broadcast_to(g, &pshape)?;
                    let ca = match kind {
                        ReduceKind::Sum => spread,
                        ReduceKind::Mean => self.scale(spread, 1.0 / pshape[axis] as f64),
                        ReduceKind::Max => {
                            let indicator = self
                                .with_value(parents[0], |t| argmax_indicator(t, axis));
                            self.mul_mask(spread, Arc::new(indicator))
                        }
                    };
                    self.accumulate(&mut adjoint, parents[0], ca)?;
                }
                Op::MeanAll => {
                    let pshape = self.shape_of(parents[0]);
                    let n: usize = pshape.iter().product();
                    let spread = self.broadcast_to(g, &pshape)?;
                    let ca = self.scale(spread, 1.0 / n as f64);
                    self.accumulate(&mut adjoint, parents[0], ca)?;
                }
                Op::SumAll => {
                    let pshape = self.shape_of(parents[0]);
                    let ca = self.broadcast_to(g, &pshape)?;
                    self.accumulate(&mut adjoint, parents[0], ca)?;
                }
                Op::BroadcastTo => {
                    let ca = self.sum_to(g, &self.shape_of(parents[0]))?;
                    self.accumulate(&mut adjoint, parents[0], ca)?;
                }
                Op::SumTo => {
                    let ca = self.broadcast_to(g, &self.shape_of(parents[0]))?;
                    self.accumulate(&mut adjoint, parents[0], ca)?;
                }
                Op::TransposeLast2 => {
                    let ca = self.transpose(g)?;
                    self.accumulate(&mut adjoint, parents[0], ca)?;
                }
                Op::Concat { axis } => {
                    let mut offset = 0;
                    for p in &parents {
                        let pshape = self.shape_of(*p);
                        let extent = pshape[axis];
                        let ca = self.slice(g, axis, offset, extent)?;
                        self.accumulate(&mut adjoint, *p, ca)?;
                        offset += extent;
                    }
                }
                Op::Slice { axis, start } => {
                    let pshape = self.shape_of(parents[0]);
                    let own = self.shape_of(Var(i));
                    let after = pshape[axis] - start - own[axis];
                    let ca = self.pad_zero(g, axis, start, after);
                    self.accumulate(&mut adjoint, parents[0], ca)?;
                }
                Op::PadZero { axis, before } => {
                    let pshape = self.shape_of(parents[0]);
                    let ca = self.slice(g, axis, before, pshape[axis])?;
                    self.accumulate(&mut adjoint, parents[0], ca)?;
                }
            }
        }

        let mut out = Vec::with_capacity(inputs.len());
        for inp in inputs {
            if inp.0 >= limit || !needed[inp.0] {
                out.push(None);
                continue;
            }
            let gv = adjoint[inp.0].expect("reachable input carries an adjoint");
            out.push(Some(if keep_graph {
                gv
            } else {
                self.leaf(self.value(gv))
            }));
        }
        Ok(out)
    }

    fn accumulate(
        &self,
        adjoint: &mut [Option<Var>],
        target: Var,
        contrib: Var,
    ) -> Result<(), TensorError> {
        adjoint[target.0] = Some(match adjoint[target.0] {
            None => contrib,
            Some(prev) => self.add(prev, contrib)?,
        });
        Ok(())
    }

    /// Hessian-vector product `(∂²loss/∂θ²)·v` over the flattened parameter
    /// list, computed as `grad(⟨grad(loss, θ, keep_graph), v⟩, θ)`.
    pub fn hvp(&self, loss: Var, params: &[Var], v: &[f64]) -> Result<Vec<f64>, TensorError> {
        let total: usize = params
            .iter()
            .map(|p| self.with_value(*p, |t| t.numel()))
            .sum();
        if v.len() != total {
            return Err(TensorError::ShapeMismatch {
                op: "hvp",
                lhs: vec![v.len()],
                rhs: vec![total],
            });
        }
        let grads = self.grad(loss, params, true)?;
        let mut offset = 0;
        let mut dot_sum: Option<Var> = None;
        for (p, gp) in params.iter().zip(&grads) {
            let shape = self.shape_of(*p);
            let n: usize = shape.iter().product();
            let chunk = Tensor::new(shape, v[offset..offset + n].to_vec())?;
            offset += n;
            let term = self.dot(*gp, self.leaf(chunk))?;
            dot_sum = Some(match dot_sum {
                None => term,
                Some(prev) => self.add(prev, term)?,
            });
        }
        let dot = dot_sum.expect("at least one parameter");
        let hv = self.grad(dot, params, false)?;
        let mut out = Vec::with_capacity(total);
        for h in hv {
            out.extend_from_slice(self.value(h).data());
        }
        Ok(out)
    }
}

// ── kernels ─────────────────────────────────────────────────────────────

fn matmul_kernel(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    let (ash, bsh) = (a.shape(), b.shape());
    if ash.len() < 2 || bsh.len() < 2 {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            lhs: ash.to_vec(),
            rhs: bsh.to_vec(),
        });
    }
    let (n, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
    let (k2, m) = (bsh[bsh.len() - 2], bsh[bsh.len() - 1]);
    if k != k2 {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            lhs: ash.to_vec(),
            rhs: bsh.to_vec(),
        });
    }
    let a_batch = &ash[..ash.len() - 2];
    let b_batch = &bsh[..bsh.len() - 2];
    let batch = broadcast_shape("matmul", a_batch, b_batch)?;
    let batch_numel: usize = batch.iter().product();

    let mut out_shape = batch.clone();
    out_shape.push(n);
    out_shape.push(m);
    let mut out = vec![0.0; batch_numel * n * m];

    // Flat batch strides with 0 on broadcast dims; the matrix block of each
    // operand is contiguous.
    let a_bstrides = batch_block_strides(a_batch, &batch, n * k);
    let b_bstrides = batch_block_strides(b_batch, &batch, k * m);
    let batch_strides = Tensor::strides(&batch);

    let ad = a.data();
    let bd = b.data();
    for bi in 0..batch_numel {
        let mut a_base = 0;
        let mut b_base = 0;
        for d in 0..batch.len() {
            let coord = (bi / batch_strides[d]) % batch[d];
            a_base += coord * a_bstrides[d];
            b_base += coord * b_bstrides[d];
        }
        let o_base = bi * n * m;
        for i in 0..n {
            let arow = a_base + i * k;
            let orow = o_base + i * m;
            for p in 0..k {
                let av = ad[arow + p];
                if av == 0.0 {
                    continue;
                }
                let brow = b_base + p * m;
                for j in 0..m {
                    out[orow + j] += av * bd[brow + j];
                }
            }
        }
    }
    Tensor::new(out_shape, out)
}

/// Strides for indexing operand batch blocks from a broadcast batch index.
fn batch_block_strides(shape: &[usize], batch: &[usize], block: usize) -> Vec<usize> {
    let mut strides = vec![0; batch.len()];
    let offset = batch.len() - shape.len();
    let mut s = block;
    for d in (0..shape.len()).rev() {
        strides[offset + d] = if shape[d] == 1 { 0 } else { s };
        s *= shape[d];
    }
    strides
}

fn transpose_kernel(t: &Tensor) -> Result<Tensor, TensorError> {
    let sh = t.shape();
    if sh.len() < 2 {
        return Err(TensorError::InvalidParameter {
            op: "transpose",
            what: format!("rank {} < 2", sh.len()),
        });
    }
    let (r, c) = (sh[sh.len() - 2], sh[sh.len() - 1]);
    let batch: usize = sh[..sh.len() - 2].iter().product();
    let mut out_shape = sh.to_vec();
    let rank = out_shape.len();
    out_shape.swap(rank - 2, rank - 1);
    let mut out = vec![0.0; t.numel()];
    let d = t.data();
    for b in 0..batch {
        let base = b * r * c;
        for i in 0..r {
            for j in 0..c {
                out[base + j * r + i] = d[base + i * c + j];
            }
        }
    }
    Tensor::new(out_shape, out)
}

fn reduce_kernel(t: &Tensor, axis: usize, kind: ReduceKind) -> Result<Tensor, TensorError> {
    let sh = t.shape();
    if axis >= sh.len() {
        return Err(TensorError::AxisOutOfRange {
            op: "reduce",
            axis,
            shape: sh.to_vec(),
        });
    }
    let extent = sh[axis];
    if extent == 0 {
        return Err(TensorError::EmptyAxis {
            op: "reduce",
            axis,
            shape: sh.to_vec(),
        });
    }
    let outer: usize = sh[..axis].iter().product();
    let inner: usize = sh[axis + 1..].iter().product();
    let mut out_shape = sh.to_vec();
    out_shape[axis] = 1;
    let mut out = vec![0.0; outer * inner];
    let d = t.data();
    let mut slice_buf = vec![0.0; extent];
    for o in 0..outer {
        for inn in 0..inner {
            for e in 0..extent {
                slice_buf[e] = d[(o * extent + e) * inner + inn];
            }
            out[o * inner + inn] = match kind {
                ReduceKind::Sum => pairwise_sum(&slice_buf),
                ReduceKind::Mean => pairwise_sum(&slice_buf) / extent as f64,
                ReduceKind::Max => {
                    let mut best = slice_buf[0];
                    for &v in &slice_buf[1..] {
                        if v > best {
                            best = v;
                        }
                    }
                    best
                }
            };
        }
    }
    Tensor::new(out_shape, out)
}

/// 1.0 at the first maximum along `axis`, 0.0 elsewhere (ties break to the
/// lowest index).
fn argmax_indicator(t: &Tensor, axis: usize) -> Vec<f64> {
    let sh = t.shape();
    let extent = sh[axis];
    let outer: usize = sh[..axis].iter().product();
    let inner: usize = sh[axis + 1..].iter().product();
    let d = t.data();
    let mut indicator = vec![0.0; d.len()];
    for o in 0..outer {
        for inn in 0..inner {
            let mut best_e = 0;
            let mut best = d[(o * extent) * inner + inn];
            for e in 1..extent {
                let v = d[(o * extent + e) * inner + inn];
                if v > best {
                    best = v;
                    best_e = e;
                }
            }
            indicator[(o * extent + best_e) * inner + inn] = 1.0;
        }
    }
    indicator
}

fn concat_kernel(axis: usize, parts: &[&Tensor]) -> Result<Tensor, TensorError> {
    let first = parts[0].shape();
    if axis >= first.len() {
        return Err(TensorError::AxisOutOfRange {
            op: "concat",
            axis,
            shape: first.to_vec(),
        });
    }
    let mut total = 0;
    for p in parts {
        let sh = p.shape();
        if sh.len() != first.len()
            || sh
                .iter()
                .enumerate()
                .any(|(d, &e)| d != axis && e != first[d])
        {
            return Err(TensorError::ShapeMismatch {
                op: "concat",
                lhs: first.to_vec(),
                rhs: sh.to_vec(),
            });
        }
        total += sh[axis];
    }
    let mut out_shape = first.to_vec();
    out_shape[axis] = total;
    let outer: usize = first[..axis].iter().product();
    let inner: usize = first[axis + 1..].iter().product();
    let mut out = vec![0.0; outer * total * inner];
    let mut offset = 0;
    for p in parts {
        let extent = p.shape()[axis];
        let d = p.data();
        for o in 0..outer {
            let src = o * extent * inner;
            let dst = (o * total + offset) * inner;
            out[dst..dst + extent * inner].copy_from_slice(&d[src..src + extent * inner]);
        }
        offset += extent;
    }
    Tensor::new(out_shape, out)
}

fn slice_kernel(t: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor, TensorError> {
    let sh = t.shape();
    if axis >= sh.len() {
        return Err(TensorError::AxisOutOfRange {
            op: "slice",
            axis,
            shape: sh.to_vec(),
        });
    }
    if start + len > sh[axis] {
        return Err(TensorError::InvalidParameter {
            op: "slice",
            what: format!("range {start}..{} exceeds extent {}", start + len, sh[axis]),
        });
    }
    let outer: usize = sh[..axis].iter().product();
    let inner: usize = sh[axis + 1..].iter().product();
    let extent = sh[axis];
    let mut out_shape = sh.to_vec();
    out_shape[axis] = len;
    let mut out = vec![0.0; outer * len * inner];
    let d = t.data();
    for o in 0..outer {
        let src = (o * extent + start) * inner;
        let dst = o * len * inner;
        out[dst..dst + len * inner].copy_from_slice(&d[src..src + len * inner]);
    }
    Tensor::new(out_shape, out)
}

fn pad_zero_kernel(t: &Tensor, axis: usize, before: usize, after: usize) -> Tensor {
    let sh = t.shape();
    let extent = sh[axis];
    let total = before + extent + after;
    let outer: usize = sh[..axis].iter().product();
    let inner: usize = sh[axis + 1..].iter().product();
    let mut out_shape = sh.to_vec();
    out_shape[axis] = total;
    let mut out = vec![0.0; outer * total * inner];
    let d = t.data();
    for o in 0..outer {
        let src = o * extent * inner;
        let dst = (o * total + before) * inner;
        out[dst..dst + extent * inner].copy_from_slice(&d[src..src + extent * inner]);
    }
    Tensor::new(out_shape, out).expect("consistent shape")
}
