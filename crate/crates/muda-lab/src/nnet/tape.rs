//! Reverse-mode computation tape over dense matrices.
//!
//! Records primitive operations during a forward pass; [`Tape::backward`]
//! accumulates gradients for every tracked leaf. Values are stored per node,
//! so replaying the recorded program reproduces the forward bit-for-bit.
//! Stop-gradient is a first-class node: identical forward value, no reverse
//! flow into its producers.

use crate::linalg::DenseMatrix;
use crate::nnet::NnetError;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    /// Tracked leaf (parameter): gradients are accumulated and reported.
    Param,
    /// Untracked leaf (data, targets, projectors): no gradient.
    Constant,
    MatMul(Var, Var),
    Transpose(Var),
    /// Matrix plus a 1×n bias row added to every row.
    AddRowBroadcast(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    ScalarMul(Var, f64),
    Tanh(Var),
    Exp(Var),
    LogSoftmaxRows(Var),
    SumAll(Var),
    /// Gather one column per row: batch×n → batch×1.
    PickPerRow(Var, Vec<usize>),
    Div(Var, Var),
    Sqrt(Var),
    Neg(Var),
    StopGrad(Var),
}

struct Node {
    op: Op,
    value: DenseMatrix,
}

/// A Wengert-list tape. One tape per loss evaluation; never shared across
/// threads.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
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

    /// Forward value of a node.
    pub fn value(&self, v: Var) -> &DenseMatrix {
        &self.nodes[v.0].value
    }

    /// Forward value of a 1×1 node as a scalar.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert!(m.rows() == 1 && m.cols() == 1, "scalar() on {}x{} node", m.rows(), m.cols());
        m.get(0, 0)
    }

    fn push(&mut self, op: Op, value: DenseMatrix) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    /// Tracked leaf: gradients will be reported for it.
    pub fn param(&mut self, value: DenseMatrix) -> Var {
        self.push(Op::Param, value)
    }

    /// Untracked leaf.
    pub fn constant(&mut self, value: DenseMatrix) -> Var {
        self.push(Op::Constant, value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        self.push(Op::MatMul(a, b), value)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(Op::Transpose(a), value)
    }

    pub fn add_row_broadcast(&mut self, a: Var, bias: Var) -> Var {
        let (m, b) = (self.value(a), self.value(bias));
        assert!(b.rows() == 1 && b.cols() == m.cols(), "bias must be 1x{}", m.cols());
        let mut out = m.clone();
        for r in 0..out.rows() {
            for c in 0..out.cols() {
                let v = out.get(r, c) + b.get(0, c);
                out.set(r, c, v);
            }
        }
        self.push(Op::AddRowBroadcast(a, bias), out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = elementwise(self.value(a), self.value(b), |x, y| x + y);
        self.push(Op::Add(a, b), value)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = elementwise(self.value(a), self.value(b), |x, y| x - y);
        self.push(Op::Sub(a, b), value)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = elementwise(self.value(a), self.value(b), |x, y| x * y);
        self.push(Op::Mul(a, b), value)
    }

    pub fn scalar_mul(&mut self, a: Var, c: f64) -> Var {
        let mut value = self.value(a).clone();
        for v in value.data_mut() {
            *v *= c;
        }
        self.push(Op::ScalarMul(a, c), value)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for v in value.data_mut() {
            *v = v.tanh();
        }
        self.push(Op::Tanh(a), value)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for v in value.data_mut() {
            *v = v.exp();
        }
        self.push(Op::Exp(a), value)
    }

    /// Row-wise log-softmax with max-subtraction stabilization.
    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let value = log_softmax_value(self.value(a));
        self.push(Op::LogSoftmaxRows(a), value)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Op::SumAll(a), DenseMatrix::from_vec_unchecked(1, 1, vec![s]))
    }

    pub fn pick_per_row(&mut self, a: Var, labels: &[usize]) -> Var {
        let m = self.value(a);
        assert_eq!(m.rows(), labels.len(), "one label per row");
        let mut out = DenseMatrix::zeros(m.rows(), 1);
        for (r, &l) in labels.iter().enumerate() {
            assert!(l < m.cols(), "label {l} out of range for {} columns", m.cols());
            out.set(r, 0, m.get(r, l));
        }
        self.push(Op::PickPerRow(a, labels.to_vec()), out)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let (u, v) = (self.scalar(a), self.scalar(b));
        self.push(Op::Div(a, b), DenseMatrix::from_vec_unchecked(1, 1, vec![u / v]))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let u = self.scalar(a);
        self.push(Op::Sqrt(a), DenseMatrix::from_vec_unchecked(1, 1, vec![u.sqrt()]))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for v in value.data_mut() {
            *v = -*v;
        }
        self.push(Op::Neg(a), value)
    }

    /// Identity forward; gradient barrier in reverse.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let value = self.value(a).clone();
        self.push(Op::StopGrad(a), value)
    }

    /// Reverse-mode sweep from a scalar loss. Returns one gradient slot per
    /// node; only nodes reachable from the loss (and not behind a
    /// stop-gradient) carry a value.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients, NnetError> {
        let lv = self.value(loss);
        if lv.rows() != 1 || lv.cols() != 1 {
            return Err(NnetError::NonScalarLoss { rows: lv.rows(), cols: lv.cols() });
        }
        let mut grads: Vec<Option<DenseMatrix>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(DenseMatrix::from_vec_unchecked(1, 1, vec![1.0]));

        for idx in (0..=loss.0).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            let op = self.nodes[idx].op.clone();
            match op {
                Op::Param | Op::Constant => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let bt = self.nodes[b.0].value.transpose();
                    let at = self.nodes[a.0].value.transpose();
                    accumulate(&mut grads, a, g.matmul(&bt));
                    accumulate(&mut grads, b, at.matmul(&g));
                }
                Op::Transpose(a) => {
                    accumulate(&mut grads, a, g.transpose());
                }
                Op::AddRowBroadcast(a, bias) => {
                    let mut bias_g = DenseMatrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for c in 0..g.cols() {
                            let v = bias_g.get(0, c) + g.get(r, c);
                            bias_g.set(0, c, v);
                        }
                    }
                    accumulate(&mut grads, bias, bias_g);
                    accumulate(&mut grads, a, g);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, a, g.clone());
                    accumulate(&mut grads, b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, a, g.clone());
                    let mut ng = g;
                    for v in ng.data_mut() {
                        *v = -*v;
                    }
                    accumulate(&mut grads, b, ng);
                }
                Op::Mul(a, b) => {
                    let ga = elementwise(&g, &self.nodes[b.0].value, |x, y| x * y);
                    let gb = elementwise(&g, &self.nodes[a.0].value, |x, y| x * y);
                    accumulate(&mut grads, a, ga);
                    accumulate(&mut grads, b, gb);
                }
                Op::ScalarMul(a, c) => {
                    let mut ga = g;
                    for v in ga.data_mut() {
                        *v *= c;
                    }
                    accumulate(&mut grads, a, ga);
                }
                Op::Tanh(a) => {
                    let out = &self.nodes[idx].value;
                    let ga = elementwise(&g, out, |gv, t| gv * (1.0 - t * t));
                    accumulate(&mut grads, a, ga);
                }
                Op::Exp(a) => {
                    let out = &self.nodes[idx].value;
                    let ga = elementwise(&g, out, |gv, e| gv * e);
                    accumulate(&mut grads, a, ga);
                }
                Op::LogSoftmaxRows(a) => {
                    // dx = g - softmax * rowsum(g)
                    let out = &self.nodes[idx].value;
                    let mut ga = g.clone();
                    for r in 0..g.rows() {
                        let rowsum: f64 = (0..g.cols()).map(|c| g.get(r, c)).sum();
                        for c in 0..g.cols() {
                            let p = out.get(r, c).exp();
                            ga.set(r, c, g.get(r, c) - p * rowsum);
                        }
                    }
                    accumulate(&mut grads, a, ga);
                }
                Op::SumAll(a) => {
                    let s = g.get(0, 0);
                    let src = &self.nodes[a.0].value;
                    let mut ga = DenseMatrix::zeros(src.rows(), src.cols());
                    for v in ga.data_mut() {
                        *v = s;
                    }
                    accumulate(&mut grads, a, ga);
                }
                Op::PickPerRow(a, labels) => {
                    let src = &self.nodes[a.0].value;
                    let mut ga = DenseMatrix::zeros(src.rows(), src.cols());
                    for (r, &l) in labels.iter().enumerate() {
                        ga.set(r, l, g.get(r, 0));
                    }
                    accumulate(&mut grads, a, ga);
                }
                Op::Div(a, b) => {
                    let u = self.nodes[a.0].value.get(0, 0);
                    let v = self.nodes[b.0].value.get(0, 0);
                    let gv = g.get(0, 0);
                    accumulate(&mut grads, a, scalar_matrix(gv / v));
                    accumulate(&mut grads, b, scalar_matrix(-gv * u / (v * v)));
                }
                Op::Sqrt(a) => {
                    let out = self.nodes[idx].value.get(0, 0);
                    // Subgradient 0 at the origin keeps norm-ratio losses finite.
                    let ga = if out == 0.0 { 0.0 } else { g.get(0, 0) / (2.0 * out) };
                    accumulate(&mut grads, a, scalar_matrix(ga));
                }
                Op::Neg(a) => {
                    let mut ga = g;
                    for v in ga.data_mut() {
                        *v = -*v;
                    }
                    accumulate(&mut grads, a, ga);
                }
                Op::StopGrad(_) => {}
            }
        }
        Ok(Gradients { slots: grads })
    }

    /// Re-execute the recorded program from its leaf values and check that
    /// every node value is reproduced bit-for-bit.
    pub fn replay_matches(&self) -> bool {
        let mut values: Vec<DenseMatrix> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = |x: Var| -> &DenseMatrix { &values[x.0] };
            let recomputed = match &node.op {
                Op::Param | Op::Constant => node.value.clone(),
                Op::MatMul(a, b) => v(*a).matmul(v(*b)),
                Op::Transpose(a) => v(*a).transpose(),
                Op::AddRowBroadcast(a, bias) => {
                    let mut out = v(*a).clone();
                    let b = v(*bias);
                    for r in 0..out.rows() {
                        for c in 0..out.cols() {
                            let x = out.get(r, c) + b.get(0, c);
                            out.set(r, c, x);
                        }
                    }
                    out
                }
                Op::Add(a, b) => elementwise(v(*a), v(*b), |x, y| x + y),
                Op::Sub(a, b) => elementwise(v(*a), v(*b), |x, y| x - y),
                Op::Mul(a, b) => elementwise(v(*a), v(*b), |x, y| x * y),
                Op::ScalarMul(a, c) => {
                    let mut out = v(*a).clone();
                    for x in out.data_mut() {
                        *x *= c;
                    }
                    out
                }
                Op::Tanh(a) => {
                    let mut out = v(*a).clone();
                    for x in out.data_mut() {
                        *x = x.tanh();
                    }
                    out
                }
                Op::Exp(a) => {
                    let mut out = v(*a).clone();
                    for x in out.data_mut() {
                        *x = x.exp();
                    }
                    out
                }
                Op::LogSoftmaxRows(a) => log_softmax_value(v(*a)),
                Op::SumAll(a) => {
                    let s: f64 = v(*a).data().iter().sum();
                    DenseMatrix::from_vec_unchecked(1, 1, vec![s])
                }
                Op::PickPerRow(a, labels) => {
                    let src = v(*a);
                    let mut out = DenseMatrix::zeros(src.rows(), 1);
                    for (r, &l) in labels.iter().enumerate() {
                        out.set(r, 0, src.get(r, l));
                    }
                    out
                }
                Op::Div(a, b) => scalar_matrix(v(*a).get(0, 0) / v(*b).get(0, 0)),
                Op::Sqrt(a) => scalar_matrix(v(*a).get(0, 0).sqrt()),
                Op::Neg(a) => {
                    let mut out = v(*a).clone();
                    for x in out.data_mut() {
                        *x = -*x;
                    }
                    out
                }
                Op::StopGrad(a) => v(*a).clone(),
            };
            if recomputed.data() != node.value.data() {
                return false;
            }
            values.push(recomputed);
        }
        true
    }
}

/// Per-node gradient slots produced by [`Tape::backward`].
pub struct Gradients {
    slots: Vec<Option<DenseMatrix>>,
}

impl Gradients {
    /// Gradient for a node; zeros of the right shape when nothing flowed.
    pub fn get(&self, tape: &Tape, v: Var) -> DenseMatrix {
        match &self.slots[v.0] {
            Some(g) => g.clone(),
            None => {
                let val = tape.value(v);
                DenseMatrix::zeros(val.rows(), val.cols())
            }
        }
    }

    /// True when no gradient reached the node at all.
    pub fn is_zero_slot(&self, v: Var) -> bool {
        self.slots[v.0].is_none()
    }
}

fn accumulate(grads: &mut [Option<DenseMatrix>], target: Var, delta: DenseMatrix) {
    match &mut grads[target.0] {
        Some(existing) => {
            for (d, s) in existing.data_mut().iter_mut().zip(delta.data()) {
                *d += s;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

fn elementwise(a: &DenseMatrix, b: &DenseMatrix, f: impl Fn(f64, f64) -> f64) -> DenseMatrix {
    assert_eq!(a.rows(), b.rows(), "elementwise shape mismatch");
    assert_eq!(a.cols(), b.cols(), "elementwise shape mismatch");
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    DenseMatrix::from_vec_unchecked(a.rows(), a.cols(), data)
}

fn scalar_matrix(v: f64) -> DenseMatrix {
    DenseMatrix::from_vec_unchecked(1, 1, vec![v])
}

fn log_softmax_value(m: &DenseMatrix) -> DenseMatrix {
    let mut out = m.clone();
    for r in 0..m.rows() {
        let row_max = m.row(r).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m.row(r).iter().map(|x| (x - row_max).exp()).sum::<f64>().ln() + row_max;
        for c in 0..m.cols() {
            out.set(r, c, m.get(r, c) - lse);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_loss_has_zero_gradients() {
        let mut tape = Tape::new();
        let x = tape.param(DenseMatrix::from_vec_unchecked(1, 1, vec![2.0]));
        let c = tape.constant(DenseMatrix::from_vec_unchecked(1, 1, vec![5.0]));
        let loss = tape.scalar_mul(c, 1.0);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.is_zero_slot(x));
        assert_eq!(grads.get(&tape, x).get(0, 0), 0.0);
    }

    #[test]
    fn stop_gradient_product_rule_half() {
        // loss = stop_gradient(x) * x at x = 3 → d/dx = 3, not 6.
        let mut tape = Tape::new();
        let x = tape.param(DenseMatrix::from_vec_unchecked(1, 1, vec![3.0]));
        let sg = tape.stop_gradient(x);
        let loss = tape.mul(sg, x);
        assert_eq!(tape.scalar(loss), 9.0);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(&tape, x).get(0, 0), 3.0);
    }

    #[test]
    fn stop_gradient_wrapping_loss_zeroes_everything() {
        let mut tape = Tape::new();
        let x = tape.param(DenseMatrix::from_vec_unchecked(1, 1, vec![3.0]));
        let sq = tape.mul(x, x);
        let loss = tape.stop_gradient(sq);
        assert_eq!(tape.scalar(loss), 9.0);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.is_zero_slot(x));
    }

    #[test]
    fn stop_gradient_preserves_forward_bits() {
        let mut tape = Tape::new();
        let data = vec![0.1, -2.7, 3.333333333333333, f64::MIN_POSITIVE];
        let x = tape.param(DenseMatrix::from_vec_unchecked(2, 2, data.clone()));
        let sg = tape.stop_gradient(x);
        assert_eq!(tape.value(sg).data(), data.as_slice());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(DenseMatrix::zeros(2, 2));
        let y = tape.tanh(x);
        assert!(matches!(tape.backward(y), Err(NnetError::NonScalarLoss { .. })));
    }

    #[test]
    fn matmul_gradient_matches_hand_derivation() {
        // loss = sum(A*B); dA = ones * B^T, dB = A^T * ones.
        let mut tape = Tape::new();
        let a = tape.param(DenseMatrix::from_vec_unchecked(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let b = tape.param(DenseMatrix::from_vec_unchecked(2, 2, vec![5.0, 6.0, 7.0, 8.0]));
        let prod = tape.matmul(a, b);
        let loss = tape.sum_all(prod);
        let grads = tape.backward(loss).unwrap();
        let ga = grads.get(&tape, a);
        assert_eq!(ga.data(), &[11.0, 15.0, 11.0, 15.0]);
        let gb = grads.get(&tape, b);
        assert_eq!(gb.data(), &[4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn replay_reproduces_values() {
        let mut tape = Tape::new();
        let x = tape.param(DenseMatrix::from_vec_unchecked(2, 3, vec![0.3, -1.0, 2.0, 0.7, 0.01, -0.4]));
        let t = tape.tanh(x);
        let ls = tape.log_softmax_rows(t);
        let e = tape.exp(ls);
        let s = tape.sum_all(e);
        let _ = tape.sqrt(s);
        assert!(tape.replay_matches());
    }
}
