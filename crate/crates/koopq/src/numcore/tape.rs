//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! Values are dense row-major f64 tensors. Every operation evaluates eagerly
//! and appends a node, so the tape is topologically ordered by construction;
//! [`Tape::backward`] walks it once in reverse from a scalar root and
//! accumulates vector-Jacobian products additively, which handles fan-out.
//!
//! Shape rules are enforced by the primitives themselves: a mismatch panics
//! with a message naming the primitive and both shapes. Anything downstream
//! of user input is expected to have validated dimensions before building
//! graph nodes.
//!
//! A tape lives for one forward/backward pair. Parameters persist in a
//! [`ParamStore`](super::ParamStore) and are spliced in as leaves via
//! [`Tape::param`]; after `backward`, [`Tape::param_grads`] hands the
//! gradients back keyed by parameter id. After the pass, gradients remain
//! readable on leaves (parameters and variables); interior buffers are
//! consumed as the walk moves through them.

use super::kernels;
use super::params::{ParamId, ParamStore};

/// Handle to one node (tensor) on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct TensorId(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul { a: TensorId, b: TensorId },
    MatMulTB { a: TensorId, b: TensorId },
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Relu { a: TensorId },
    Exp { a: TensorId },
    Ln { a: TensorId },
    Clamp { a: TensorId, lo: f64, hi: f64 },
    Scale { a: TensorId, c: f64 },
    AddScalar { a: TensorId },
    ReduceSum { a: TensorId },
    ReduceMean { a: TensorId },
    AddRow { a: TensorId, b: TensorId },
}

#[derive(Debug)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    values: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Append-only computation tape; see the module docs for the lifecycle.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_leaves: Vec<(ParamId, TensorId)>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Interprets a shape as a matrix: `[n, m]` stays as is, `[n]` is a row.
fn as_matrix(shape: &[usize], what: &str) -> (usize, usize) {
    match shape {
        [n, m] => (*n, *m),
        [n] => (1, *n),
        other => panic!("{what}: expected a 1-D or 2-D tensor, got shape {other:?}"),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, values: Vec<f64>, requires_grad: bool) -> TensorId {
        debug_assert_eq!(numel(&shape), values.len());
        self.nodes.push(Node {
            op,
            shape,
            values,
            requires_grad,
            grad: None,
        });
        TensorId(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient (inputs, masks, drawn noise).
    pub fn constant(&mut self, shape: &[usize], values: Vec<f64>) -> TensorId {
        assert_eq!(
            numel(shape),
            values.len(),
            "constant: shape {:?} holds {} elements but {} values were given",
            shape,
            numel(shape),
            values.len()
        );
        self.push(Op::Leaf, shape.to_vec(), values, false)
    }

    /// Leaf that participates in backward (used for input sensitivities).
    pub fn variable(&mut self, shape: &[usize], values: Vec<f64>) -> TensorId {
        assert_eq!(
            numel(shape),
            values.len(),
            "variable: shape {:?} holds {} elements but {} values were given",
            shape,
            numel(shape),
            values.len()
        );
        self.push(Op::Leaf, shape.to_vec(), values, true)
    }

    /// Scalar constant of shape `[1]`.
    pub fn scalar(&mut self, v: f64) -> TensorId {
        self.constant(&[1], vec![v])
    }

    /// Splices the current value of a stored parameter in as a grad leaf.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> TensorId {
        let t = self.push(
            Op::Leaf,
            store.shape(id).to_vec(),
            store.values(id).to_vec(),
            true,
        );
        self.param_leaves.push((id, t));
        t
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn values(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].values
    }

    /// Value of a single-element tensor.
    pub fn value_scalar(&self, id: TensorId) -> f64 {
        let n = &self.nodes[id.0];
        assert_eq!(n.values.len(), 1, "value_scalar: tensor has shape {:?}", n.shape);
        n.values[0]
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn grad_flag(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// `a * b` for `a` n-by-k and `b` k-by-m.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (n, ka) = as_matrix(self.shape(a), "matmul lhs");
        let (kb, m) = as_matrix(self.shape(b), "matmul rhs");
        assert_eq!(
            ka, kb,
            "matmul: inner dimensions differ (lhs {:?}, rhs {:?})",
            self.shape(a),
            self.shape(b)
        );
        let mut out = vec![0.0; n * m];
        kernels::matmul(self.values(a), self.values(b), n, ka, m, &mut out);
        let rg = self.grad_flag(&[a, b]);
        self.push(Op::MatMul { a, b }, vec![n, m], out, rg)
    }

    /// `a * b^T` for `a` n-by-k and `b` m-by-k (dense-layer layout).
    pub fn matmul_tb(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (n, ka) = as_matrix(self.shape(a), "matmul_tb lhs");
        let (m, kb) = as_matrix(self.shape(b), "matmul_tb rhs");
        assert_eq!(
            ka, kb,
            "matmul_tb: inner dimensions differ (lhs {:?}, rhs {:?})",
            self.shape(a),
            self.shape(b)
        );
        let mut out = vec![0.0; n * m];
        kernels::matmul_tb(self.values(a), self.values(b), n, ka, m, &mut out);
        let rg = self.grad_flag(&[a, b]);
        self.push(Op::MatMulTB { a, b }, vec![n, m], out, rg)
    }

    fn elementwise(
        &mut self,
        what: &str,
        a: TensorId,
        b: TensorId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> TensorId {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "{what}: shapes differ (lhs {:?}, rhs {:?})",
            self.shape(a),
            self.shape(b)
        );
        let out: Vec<f64> = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.grad_flag(&[a, b]);
        self.push(op, shape, out, rg)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    fn unary(&mut self, a: TensorId, f: impl Fn(f64) -> f64, op: Op) -> TensorId {
        let out: Vec<f64> = self.values(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.nodes[a.0].requires_grad;
        self.push(op, shape, out, rg)
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        self.unary(a, |x| x.max(0.0), Op::Relu { a })
    }

    pub fn exp(&mut self, a: TensorId) -> TensorId {
        self.unary(a, f64::exp, Op::Exp { a })
    }

    /// Natural log; the caller is responsible for keeping inputs positive.
    pub fn ln(&mut self, a: TensorId) -> TensorId {
        self.unary(a, f64::ln, Op::Ln { a })
    }

    /// Clamps into `[lo, hi]`; gradient passes only strictly inside.
    pub fn clamp(&mut self, a: TensorId, lo: f64, hi: f64) -> TensorId {
        assert!(lo < hi, "clamp: lo {lo} must be below hi {hi}");
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp { a, lo, hi })
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        self.unary(a, |x| x * c, Op::Scale { a, c })
    }

    pub fn add_scalar(&mut self, a: TensorId, c: f64) -> TensorId {
        self.unary(a, |x| x + c, Op::AddScalar { a })
    }

    /// Sum of all elements, shape `[1]`, accumulated in storage order.
    pub fn reduce_sum(&mut self, a: TensorId) -> TensorId {
        let mut acc = 0.0;
        for &v in self.values(a) {
            acc += v;
        }
        let rg = self.nodes[a.0].requires_grad;
        self.push(Op::ReduceSum { a }, vec![1], vec![acc], rg)
    }

    /// Mean of all elements, shape `[1]`.
    pub fn reduce_mean(&mut self, a: TensorId) -> TensorId {
        let n = self.values(a).len();
        assert!(n > 0, "reduce_mean: empty tensor");
        let mut acc = 0.0;
        for &v in self.values(a) {
            acc += v;
        }
        let rg = self.nodes[a.0].requires_grad;
        self.push(Op::ReduceMean { a }, vec![1], vec![acc / n as f64], rg)
    }

    /// Adds a length-d vector to every row of an n-by-d matrix.
    pub fn add_row(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (n, d) = as_matrix(self.shape(a), "add_row lhs");
        let bd = match self.shape(b) {
            [len] => *len,
            [1, len] => *len,
            other => panic!("add_row: rhs must be a vector, got shape {other:?}"),
        };
        assert_eq!(
            d,
            bd,
            "add_row: row width differs (lhs {:?}, rhs {:?})",
            self.shape(a),
            self.shape(b)
        );
        let mut out = self.values(a).to_vec();
        let bv = self.values(b).to_vec();
        for r in 0..n {
            for (o, &x) in out[r * d..(r + 1) * d].iter_mut().zip(&bv) {
                *o += x;
            }
        }
        let shape = self.shape(a).to_vec();
        let rg = self.grad_flag(&[a, b]);
        self.push(Op::AddRow { a, b }, shape, out, rg)
    }

    fn accumulate(&mut self, id: TensorId, delta: &[f64]) {
        let node = &mut self.nodes[id.0];
        if !node.requires_grad {
            return;
        }
        let len = node.values.len();
        let grad = node.grad.get_or_insert_with(|| vec![0.0; len]);
        debug_assert_eq!(grad.len(), delta.len());
        for (g, &d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
    }

    /// Runs reverse-mode accumulation from a scalar root.
    ///
    /// All gradients are cleared first, so calling this twice on the same
    /// tape yields fresh (not doubled) results.
    pub fn backward(&mut self, root: TensorId) {
        assert_eq!(
            self.nodes[root.0].values.len(),
            1,
            "backward: root must be a scalar, got shape {:?}",
            self.nodes[root.0].shape
        );
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[root.0].grad = Some(vec![1.0]);

        for idx in (0..=root.0).rev() {
            if self.nodes[idx].grad.is_none() || !self.nodes[idx].requires_grad {
                continue;
            }
            if matches!(self.nodes[idx].op, Op::Leaf) {
                continue; // leaves keep their gradient for the caller
            }
            let op = self.nodes[idx].op.clone();
            let g = self.nodes[idx].grad.take().expect("checked above");
            match op {
                Op::Leaf => unreachable!(),
                Op::MatMul { a, b } => {
                    let (n, k) = as_matrix(self.shape(a), "matmul lhs");
                    let (_, m) = as_matrix(self.shape(b), "matmul rhs");
                    if self.nodes[a.0].requires_grad {
                        // dA = dC * B^T
                        let mut da = vec![0.0; n * k];
                        kernels::matmul_tb(&g, self.values(b), n, m, k, &mut da);
                        self.accumulate(a, &da);
                    }
                    if self.nodes[b.0].requires_grad {
                        // dB = A^T * dC
                        let mut db = vec![0.0; k * m];
                        kernels::matmul_ta(self.values(a), &g, n, k, m, &mut db);
                        self.accumulate(b, &db);
                    }
                }
                Op::MatMulTB { a, b } => {
                    let (n, k) = as_matrix(self.shape(a), "matmul_tb lhs");
                    let (m, _) = as_matrix(self.shape(b), "matmul_tb rhs");
                    if self.nodes[a.0].requires_grad {
                        // dA = dC * B
                        let mut da = vec![0.0; n * k];
                        kernels::matmul(&g, self.values(b), n, m, k, &mut da);
                        self.accumulate(a, &da);
                    }
                    if self.nodes[b.0].requires_grad {
                        // dB = dC^T * A
                        let mut db = vec![0.0; m * k];
                        kernels::matmul_ta(&g, self.values(a), n, m, k, &mut db);
                        self.accumulate(b, &db);
                    }
                }
                Op::Add { a, b } => {
                    self.accumulate(a, &g);
                    self.accumulate(b, &g);
                }
                Op::Sub { a, b } => {
                    self.accumulate(a, &g);
                    let neg: Vec<f64> = g.iter().map(|&x| -x).collect();
                    self.accumulate(b, &neg);
                }
                Op::Mul { a, b } => {
                    if self.nodes[a.0].requires_grad {
                        let da: Vec<f64> = g.iter().zip(self.values(b)).map(|(&gi, &bi)| gi * bi).collect();
                        self.accumulate(a, &da);
                    }
                    if self.nodes[b.0].requires_grad {
                        let db: Vec<f64> = g.iter().zip(self.values(a)).map(|(&gi, &ai)| gi * ai).collect();
                        self.accumulate(b, &db);
                    }
                }
                Op::Relu { a } => {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(self.values(a))
                        .map(|(&gi, &xi)| if xi > 0.0 { gi } else { 0.0 })
                        .collect();
                    self.accumulate(a, &da);
                }
                Op::Exp { a } => {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(self.values(TensorId(idx)))
                        .map(|(&gi, &yi)| gi * yi)
                        .collect();
                    self.accumulate(a, &da);
                }
                Op::Ln { a } => {
                    let da: Vec<f64> = g.iter().zip(self.values(a)).map(|(&gi, &xi)| gi / xi).collect();
                    self.accumulate(a, &da);
                }
                Op::Clamp { a, lo, hi } => {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(self.values(a))
                        .map(|(&gi, &xi)| if xi > lo && xi < hi { gi } else { 0.0 })
                        .collect();
                    self.accumulate(a, &da);
                }
                Op::Scale { a, c } => {
                    let da: Vec<f64> = g.iter().map(|&gi| gi * c).collect();
                    self.accumulate(a, &da);
                }
                Op::AddScalar { a } => {
                    self.accumulate(a, &g);
                }
                Op::ReduceSum { a } => {
                    let da = vec![g[0]; self.values(a).len()];
                    self.accumulate(a, &da);
                }
                Op::ReduceMean { a } => {
                    let n = self.values(a).len() as f64;
                    let da = vec![g[0] / n; self.values(a).len()];
                    self.accumulate(a, &da);
                }
                Op::AddRow { a, b } => {
                    let (n, d) = as_matrix(self.shape(a), "add_row lhs");
                    self.accumulate(a, &g);
                    if self.nodes[b.0].requires_grad {
                        let mut db = vec![0.0; d];
                        kernels::col_sums(&g, n, d, &mut db);
                        self.accumulate(b, &db);
                    }
                }
            }
        }
    }

    /// Gradient of a node after [`Tape::backward`], if one was accumulated.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    /// Gradients for every parameter spliced onto this tape, in splice
    /// order. Parameters that did not participate in the root get zeros.
    pub fn param_grads(&self) -> Vec<(ParamId, Vec<f64>)> {
        self.param_leaves
            .iter()
            .map(|&(pid, tid)| {
                let g = match self.grad(tid) {
                    Some(g) => g.to_vec(),
                    None => vec![0.0; self.values(tid).len()],
                };
                (pid, g)
            })
            .collect()
    }
}
