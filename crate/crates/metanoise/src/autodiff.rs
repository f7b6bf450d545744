//! Tape-based reverse-mode automatic differentiation over small dense arrays.
//!
//! Operations are evaluated eagerly and recorded on a [`Tape`]. The backward
//! pass does not mutate adjoint buffers in place: it *builds the adjoint
//! expressions as new tape nodes*, so a gradient is itself a differentiable
//! node and gradients of gradients come out of the same machinery. Records are
//! immutable once written.
//!
//! A tape and its nodes are confined to one thread; independent tapes on
//! different threads do not interact.

use crate::error::{Error, Result};

/// Array shapes supported by the engine: what a small MLP needs, nothing more.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Scalar,
    Vector(usize),
    /// Row-major (rows, cols).
    Matrix(usize, usize),
}

impl Shape {
    pub fn numel(&self) -> usize {
        match *self {
            Shape::Scalar => 1,
            Shape::Vector(n) => n,
            Shape::Matrix(r, c) => r * c,
        }
    }
}

/// Dense double-precision array with one of the three supported shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f64>) -> Self {
        assert_eq!(shape.numel(), data.len(), "shape/data length mismatch");
        Tensor { shape, data }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: Shape::Scalar, data: vec![v] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor { shape: Shape::Vector(data.len()), data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        Tensor::new(Shape::Matrix(rows, cols), data)
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor { shape, data: vec![0.0; shape.numel()] }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.shape, Shape::Scalar, "item() on non-scalar");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node on a tape. Only meaningful for the tape that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Recorded operation. Parent ids always point at earlier records, so the
/// tape is a DAG by construction.
#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Neg(NodeId),
    Scale(NodeId, f64),
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    MatVec(NodeId, NodeId),
    Outer(NodeId, NodeId),
    Dot(NodeId, NodeId),
    Relu(NodeId),
    /// 1.0 where the parent is positive, 0.0 elsewhere. Derivative is zero
    /// almost everywhere, so this op propagates no gradient.
    ReluMask(NodeId),
    /// Row-wise softmax of a matrix.
    Softmax(NodeId),
    /// Mean softmax cross-entropy of logits against fixed integer labels.
    SoftmaxCrossEntropy(NodeId, std::rc::Rc<[usize]>),
    SumAll(NodeId),
    /// [r,c] -> [c], summing down each column.
    ColSum(NodeId),
    /// [r,c] -> [r], summing along each row.
    RowSum(NodeId),
    BroadcastScalar(NodeId, Shape),
    /// [c] -> [r,c], repeating the vector as every row.
    BroadcastRows(NodeId),
    /// [r] -> [r,c], repeating each entry across its row.
    BroadcastCols(NodeId),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Append-only record of operations plus their eagerly computed values.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grad_passes: usize,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grad_passes: 0 }
    }

    /// Number of completed backward passes. A depth of at least one means the
    /// tape contains gradient expressions that can themselves be
    /// differentiated.
    pub fn nesting_depth(&self) -> usize {
        self.grad_passes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> Shape {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value, op });
        id
    }

    /// Insert an input with no parents. Leaves are both variables (things we
    /// differentiate with respect to) and constants (things we do not).
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.leaf(Tensor::scalar(v))
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape(), vb.shape(), "add: shape mismatch");
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x + y).collect();
        let shape = va.shape();
        self.push(Tensor { shape, data }, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape(), vb.shape(), "sub: shape mismatch");
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x - y).collect();
        let shape = va.shape();
        self.push(Tensor { shape, data }, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape(), vb.shape(), "mul: shape mismatch");
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x * y).collect();
        let shape = va.shape();
        self.push(Tensor { shape, data }, Op::Mul(a, b))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a.0].value;
        let data = va.data.iter().map(|x| -x).collect();
        let shape = va.shape();
        self.push(Tensor { shape, data }, Op::Neg(a))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let va = &self.nodes[a.0].value;
        let data = va.data.iter().map(|x| c * x).collect();
        let shape = va.shape();
        self.push(Tensor { shape, data }, Op::Scale(a, c))
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (m, k) = match va.shape() {
            Shape::Matrix(m, k) => (m, k),
            s => panic!("matmul: lhs must be a matrix, got {s:?}"),
        };
        let (k2, n) = match vb.shape() {
            Shape::Matrix(k2, n) => (k2, n),
            s => panic!("matmul: rhs must be a matrix, got {s:?}"),
        };
        assert_eq!(k, k2, "matmul: inner dimensions differ");
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &va.data[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (p, &av) in arow.iter().enumerate() {
                let brow = &vb.data[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        self.push(Tensor::matrix(m, n, out), Op::Matmul(a, b))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a.0].value;
        let (r, c) = match va.shape() {
            Shape::Matrix(r, c) => (r, c),
            s => panic!("transpose: expected matrix, got {s:?}"),
        };
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = va.data[i * c + j];
            }
        }
        self.push(Tensor::matrix(c, r, out), Op::Transpose(a))
    }

    pub fn matvec(&mut self, a: NodeId, x: NodeId) -> NodeId {
        let (va, vx) = (&self.nodes[a.0].value, &self.nodes[x.0].value);
        let (r, c) = match va.shape() {
            Shape::Matrix(r, c) => (r, c),
            s => panic!("matvec: expected matrix, got {s:?}"),
        };
        let n = match vx.shape() {
            Shape::Vector(n) => n,
            s => panic!("matvec: expected vector, got {s:?}"),
        };
        assert_eq!(c, n, "matvec: dimension mismatch");
        let out = (0..r)
            .map(|i| {
                va.data[i * c..(i + 1) * c]
                    .iter()
                    .zip(&vx.data)
                    .map(|(m, v)| m * v)
                    .sum()
            })
            .collect();
        self.push(Tensor::vector(out), Op::MatVec(a, x))
    }

    pub fn outer(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (m, n) = match (va.shape(), vb.shape()) {
            (Shape::Vector(m), Shape::Vector(n)) => (m, n),
            (sa, sb) => panic!("outer: expected vectors, got {sa:?} and {sb:?}"),
        };
        let mut out = Vec::with_capacity(m * n);
        for &x in &va.data {
            for &y in &vb.data {
                out.push(x * y);
            }
        }
        self.push(Tensor::matrix(m, n, out), Op::Outer(a, b))
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape(), vb.shape(), "dot: shape mismatch");
        assert!(matches!(va.shape(), Shape::Vector(_)), "dot: expected vectors");
        let s = va.data.iter().zip(&vb.data).map(|(x, y)| x * y).sum();
        self.push(Tensor::scalar(s), Op::Dot(a, b))
    }

    // ---- nonlinearities and reductions ----

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a.0].value;
        let data = va.data.iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let shape = va.shape();
        self.push(Tensor { shape, data }, Op::Relu(a))
    }

    pub fn relu_mask(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a.0].value;
        let data = va.data.iter().map(|&x| if x > 0.0 { 1.0 } else { 0.0 }).collect();
        let shape = va.shape();
        self.push(Tensor { shape, data }, Op::ReluMask(a))
    }

    /// Row-wise softmax with the usual max-shift for stability.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a.0].value;
        let (r, c) = match va.shape() {
            Shape::Matrix(r, c) => (r, c),
            s => panic!("softmax: expected matrix, got {s:?}"),
        };
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = &va.data[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|&x| (x - m).exp()).collect();
            let z: f64 = exps.iter().sum();
            out.extend(exps.iter().map(|e| e / z));
        }
        self.push(Tensor::matrix(r, c, out), Op::Softmax(a))
    }

    /// Mean cross-entropy of row-wise softmax(logits) against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> NodeId {
        let va = &self.nodes[logits.0].value;
        let (r, c) = match va.shape() {
            Shape::Matrix(r, c) => (r, c),
            s => panic!("softmax_cross_entropy: expected matrix, got {s:?}"),
        };
        assert_eq!(labels.len(), r, "softmax_cross_entropy: one label per row");
        assert!(labels.iter().all(|&l| l < c), "softmax_cross_entropy: label out of range");
        let mut total = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            let row = &va.data[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
            total += lse - row[label];
        }
        let value = Tensor::scalar(total / r as f64);
        self.push(value, Op::SoftmaxCrossEntropy(logits, labels.into()))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a.0].value;
        let s = va.data.iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.nodes[a.0].value.data.len();
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn col_sum(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a.0].value;
        let (r, c) = match va.shape() {
            Shape::Matrix(r, c) => (r, c),
            s => panic!("col_sum: expected matrix, got {s:?}"),
        };
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, v) in out.iter_mut().zip(&va.data[i * c..(i + 1) * c]) {
                *o += v;
            }
        }
        self.push(Tensor::vector(out), Op::ColSum(a))
    }

    pub fn row_sum(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a.0].value;
        let (r, c) = match va.shape() {
            Shape::Matrix(r, c) => (r, c),
            s => panic!("row_sum: expected matrix, got {s:?}"),
        };
        let out = (0..r).map(|i| va.data[i * c..(i + 1) * c].iter().sum()).collect();
        self.push(Tensor::vector(out), Op::RowSum(a))
    }

    pub fn broadcast_scalar(&mut self, a: NodeId, shape: Shape) -> NodeId {
        let v = self.nodes[a.0].value.item();
        self.push(
            Tensor { shape, data: vec![v; shape.numel()] },
            Op::BroadcastScalar(a, shape),
        )
    }

    pub fn broadcast_rows(&mut self, a: NodeId, rows: usize) -> NodeId {
        let va = &self.nodes[a.0].value;
        let c = match va.shape() {
            Shape::Vector(c) => c,
            s => panic!("broadcast_rows: expected vector, got {s:?}"),
        };
        let mut out = Vec::with_capacity(rows * c);
        for _ in 0..rows {
            out.extend_from_slice(&va.data);
        }
        self.push(Tensor::matrix(rows, c, out), Op::BroadcastRows(a))
    }

    pub fn broadcast_cols(&mut self, a: NodeId, cols: usize) -> NodeId {
        let va = &self.nodes[a.0].value;
        let r = match va.shape() {
            Shape::Vector(r) => r,
            s => panic!("broadcast_cols: expected vector, got {s:?}"),
        };
        let mut out = Vec::with_capacity(r * cols);
        for &v in &va.data {
            for _ in 0..cols {
                out.push(v);
            }
        }
        self.push(Tensor::matrix(r, cols, out), Op::BroadcastCols(a))
    }

    // ---- differentiation ----

    /// Build the gradient of a scalar `output` with respect to each node in
    /// `wrt`, as new nodes on this tape. The returned nodes are ordinary
    /// expressions: they can be combined further and differentiated again.
    ///
    /// A `wrt` node that does not participate in `output` yields a zero leaf
    /// of matching shape.
    pub fn grad_nodes(&mut self, output: NodeId, wrt: &[NodeId]) -> Result<Vec<NodeId>> {
        if self.shape(output) != Shape::Scalar {
            return Err(Error::contract(format!(
                "backward requires a scalar output, got {:?}",
                self.shape(output)
            )));
        }

        // Reachability from the output, following parent edges.
        let mut reachable = vec![false; output.0 + 1];
        reachable[output.0] = true;
        for id in (0..=output.0).rev() {
            if !reachable[id] {
                continue;
            }
            self.nodes[id].op.for_each_parent(|p| {
                reachable[p.0] = true;
            });
        }

        let mut adjoint: Vec<Option<NodeId>> = vec![None; output.0 + 1];
        adjoint[output.0] = Some(self.scalar(1.0));

        for id in (0..=output.0).rev() {
            if !reachable[id] {
                continue;
            }
            let Some(g) = adjoint[id] else { continue };
            let op = self.nodes[id].op.clone();
            self.apply_vjp(NodeId(id), &op, g, &mut adjoint);
        }

        self.grad_passes += 1;

        Ok(wrt
            .iter()
            .map(|&w| match adjoint.get(w.0).copied().flatten() {
                Some(g) => g,
                None => {
                    let shape = self.shape(w);
                    self.leaf(Tensor::zeros(shape))
                }
            })
            .collect())
    }

    /// Gradient values of a scalar `output` with respect to `wrt`. The tape
    /// stays usable afterwards, including for differentiating through the
    /// gradient expressions this call created.
    pub fn backward(&mut self, output: NodeId, wrt: &[NodeId]) -> Result<Vec<Tensor>> {
        let ids = self.grad_nodes(output, wrt)?;
        Ok(ids.into_iter().map(|id| self.value(id).clone()).collect())
    }

    /// Differentiate an expression that already contains a gradient built by
    /// [`Tape::grad_nodes`]. Requires that at least one backward pass has been
    /// taken on this tape, which is what makes `output` second-order.
    pub fn grad_of_grad(&mut self, output: NodeId, outer_wrt: &[NodeId]) -> Result<Vec<Tensor>> {
        if self.grad_passes == 0 {
            return Err(Error::contract(
                "grad_of_grad requires a tape with nesting depth >= 1 \
                 (no inner backward has been taken)",
            ));
        }
        self.backward(output, outer_wrt)
    }

    fn accumulate(
        &mut self,
        adjoint: &mut [Option<NodeId>],
        parent: NodeId,
        contribution: NodeId,
    ) {
        adjoint[parent.0] = Some(match adjoint[parent.0] {
            None => contribution,
            Some(prev) => self.add(prev, contribution),
        });
    }

    fn apply_vjp(
        &mut self,
        node: NodeId,
        op: &Op,
        g: NodeId,
        adjoint: &mut [Option<NodeId>],
    ) {
        match *op {
            Op::Leaf | Op::ReluMask(_) => {}
            Op::Add(a, b) => {
                self.accumulate(adjoint, a, g);
                self.accumulate(adjoint, b, g);
            }
            Op::Sub(a, b) => {
                self.accumulate(adjoint, a, g);
                let ng = self.neg(g);
                self.accumulate(adjoint, b, ng);
            }
            Op::Mul(a, b) => {
                let da = self.mul(g, b);
                self.accumulate(adjoint, a, da);
                let db = self.mul(g, a);
                self.accumulate(adjoint, b, db);
            }
            Op::Neg(a) => {
                let ng = self.neg(g);
                self.accumulate(adjoint, a, ng);
            }
            Op::Scale(a, c) => {
                let sg = self.scale(g, c);
                self.accumulate(adjoint, a, sg);
            }
            Op::Matmul(a, b) => {
                let bt = self.transpose(b);
                let da = self.matmul(g, bt);
                self.accumulate(adjoint, a, da);
                let at = self.transpose(a);
                let db = self.matmul(at, g);
                self.accumulate(adjoint, b, db);
            }
            Op::Transpose(a) => {
                let gt = self.transpose(g);
                self.accumulate(adjoint, a, gt);
            }
            Op::MatVec(a, x) => {
                let xv = self.outer(g, x);
                self.accumulate(adjoint, a, xv);
                let at = self.transpose(a);
                let dx = self.matvec(at, g);
                self.accumulate(adjoint, x, dx);
            }
            Op::Outer(a, b) => {
                let da = self.matvec(g, b);
                self.accumulate(adjoint, a, da);
                let gt = self.transpose(g);
                let db = self.matvec(gt, a);
                self.accumulate(adjoint, b, db);
            }
            Op::Dot(a, b) => {
                let shape = self.shape(a);
                let gb = self.broadcast_scalar(g, shape);
                let da = self.mul(gb, b);
                self.accumulate(adjoint, a, da);
                let db = self.mul(gb, a);
                self.accumulate(adjoint, b, db);
            }
            Op::Relu(a) => {
                let mask = self.relu_mask(a);
                let da = self.mul(g, mask);
                self.accumulate(adjoint, a, da);
            }
            Op::Softmax(a) => {
                // ds = s ⊙ (g − rowsum(g ⊙ s) broadcast back)
                let s = node;
                let cols = match self.shape(s) {
                    Shape::Matrix(_, c) => c,
                    _ => unreachable!("softmax output is a matrix"),
                };
                let gs = self.mul(g, s);
                let rs = self.row_sum(gs);
                let rsb = self.broadcast_cols(rs, cols);
                let centered = self.sub(g, rsb);
                let da = self.mul(s, centered);
                self.accumulate(adjoint, a, da);
            }
            Op::SoftmaxCrossEntropy(logits, ref labels) => {
                // d logits = g/r ⊙ (softmax(logits) − onehot)
                let (r, c) = match self.shape(logits) {
                    Shape::Matrix(r, c) => (r, c),
                    _ => unreachable!("cross-entropy input is a matrix"),
                };
                let sm = self.softmax(logits);
                let mut onehot = vec![0.0; r * c];
                for (i, &label) in labels.iter().enumerate() {
                    onehot[i * c + label] = 1.0;
                }
                let y = self.leaf(Tensor::matrix(r, c, onehot));
                let diff = self.sub(sm, y);
                let gscaled = self.scale(g, 1.0 / r as f64);
                let gb = self.broadcast_scalar(gscaled, Shape::Matrix(r, c));
                let da = self.mul(gb, diff);
                self.accumulate(adjoint, logits, da);
            }
            Op::SumAll(a) => {
                let shape = self.shape(a);
                let da = self.broadcast_scalar(g, shape);
                self.accumulate(adjoint, a, da);
            }
            Op::ColSum(a) => {
                let rows = match self.shape(a) {
                    Shape::Matrix(r, _) => r,
                    _ => unreachable!("col_sum input is a matrix"),
                };
                let da = self.broadcast_rows(g, rows);
                self.accumulate(adjoint, a, da);
            }
            Op::RowSum(a) => {
                let cols = match self.shape(a) {
                    Shape::Matrix(_, c) => c,
                    _ => unreachable!("row_sum input is a matrix"),
                };
                let da = self.broadcast_cols(g, cols);
                self.accumulate(adjoint, a, da);
            }
            Op::BroadcastScalar(a, _) => {
                let da = self.sum_all(g);
                self.accumulate(adjoint, a, da);
            }
            Op::BroadcastRows(a) => {
                let da = self.col_sum(g);
                self.accumulate(adjoint, a, da);
            }
            Op::BroadcastCols(a) => {
                let da = self.row_sum(g);
                self.accumulate(adjoint, a, da);
            }
        }
    }
}

impl Op {
    fn for_each_parent(&self, mut f: impl FnMut(NodeId)) {
        match *self {
            Op::Leaf => {}
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Matmul(a, b)
            | Op::MatVec(a, b)
            | Op::Outer(a, b)
            | Op::Dot(a, b) => {
                f(a);
                f(b);
            }
            Op::Neg(a)
            | Op::Scale(a, _)
            | Op::Transpose(a)
            | Op::Relu(a)
            | Op::ReluMask(a)
            | Op::Softmax(a)
            | Op::SoftmaxCrossEntropy(a, _)
            | Op::SumAll(a)
            | Op::ColSum(a)
            | Op::RowSum(a)
            | Op::BroadcastScalar(a, _)
            | Op::BroadcastRows(a)
            | Op::BroadcastCols(a) => f(a),
        }
    }
}
