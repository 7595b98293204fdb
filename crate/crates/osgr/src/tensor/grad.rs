//! Symbolic input-gradient construction.
//!
//! [`Tape::grad_of`] walks the recorded subgraph between `wrt` and `y` in
//! reverse and emits the vector-Jacobian products as *new tape operations*
//! built from ordinary differentiable primitives. The returned node holds
//! ∂(sum of y's entries)/∂wrt and is itself part of the graph, so a single
//! ordinary [`Tape::backward`] afterwards yields exact second-order parameter
//! gradients — which is all the gradient-penalty term needs.
//!
//! Coverage is deliberately limited to the operation set a critic-style
//! network uses (dense layers, ELU, concatenation, reductions, elementwise
//! arithmetic); anything else panics by name. The derivative of ELU enters
//! the graph through the [`Tape::elu_prime`] primitive, which has its own
//! backward rule, closing the second-order loop.

use super::{Op, Tape, TensorId};
use std::collections::HashMap;

impl Tape {
    /// Build ∂(Σ y)/∂wrt as a new tape node.
    ///
    /// When `y` holds one scalar per batch row that depends only on the same
    /// row of `wrt` (the critic case), the summed seed makes each output row
    /// exactly that row's gradient. Panics if `y` does not depend on `wrt`
    /// or the path contains an unsupported operation.
    pub fn grad_of(&mut self, y: TensorId, wrt: TensorId) -> TensorId {
        let n_ops = self.ops.len();
        let n_nodes = self.len();
        assert!(y < n_nodes && wrt < n_nodes, "grad_of: unknown node id");

        // depends[i]: node i is (transitively) a function of wrt.
        let mut depends = vec![false; n_nodes];
        depends[wrt] = true;
        for oi in 0..n_ops {
            let out = self.ops[oi].out();
            if self.op_inputs(oi).iter().any(|&i| depends[i]) {
                depends[out] = true;
            }
        }
        assert!(
            depends[y],
            "grad_of: output node {} does not depend on input node {}",
            y, wrt
        );
        // needed[i]: node i feeds y.
        let mut needed = vec![false; n_nodes];
        needed[y] = true;
        for oi in (0..n_ops).rev() {
            let out = self.ops[oi].out();
            if needed[out] {
                for i in self.op_inputs(oi) {
                    needed[i] = true;
                }
            }
        }
        let active = |i: TensorId| depends[i] && needed[i];

        let seed_len = self.data(y).len();
        let seed_shape = self.shape(y).to_vec();
        let seed = self.constant(vec![1.0; seed_len], &seed_shape);
        let mut adj: HashMap<TensorId, TensorId> = HashMap::new();
        adj.insert(y, seed);

        let push = |tape: &mut Tape, adj: &mut HashMap<TensorId, TensorId>, id: TensorId, v: TensorId| {
            match adj.get(&id) {
                Some(&e) => {
                    let s = tape.add(e, v);
                    adj.insert(id, s);
                }
                None => {
                    adj.insert(id, v);
                }
            }
        };

        for oi in (0..n_ops).rev() {
            let out = self.ops[oi].out();
            if !active(out) {
                continue;
            }
            let g = match adj.get(&out) {
                Some(&g) => g,
                None => continue,
            };
            match &self.ops[oi] {
                &Op::Matmul { a, b, .. } => {
                    if active(a) {
                        let bt = self.transpose2d(b);
                        let da = self.matmul(g, bt);
                        push(self, &mut adj, a, da);
                    }
                    if active(b) {
                        let at = self.transpose2d(a);
                        let db = self.matmul(at, g);
                        push(self, &mut adj, b, db);
                    }
                }
                &Op::Transpose { a, .. } => {
                    let da = self.transpose2d(g);
                    push(self, &mut adj, a, da);
                }
                &Op::Add { a, b, .. } => {
                    if active(a) {
                        push(self, &mut adj, a, g);
                    }
                    if active(b) {
                        push(self, &mut adj, b, g);
                    }
                }
                &Op::Sub { a, b, .. } => {
                    if active(a) {
                        push(self, &mut adj, a, g);
                    }
                    if active(b) {
                        let ng = self.scale(g, -1.0);
                        push(self, &mut adj, b, ng);
                    }
                }
                &Op::Mul { a, b, .. } => {
                    if active(a) {
                        let da = self.mul(g, b);
                        push(self, &mut adj, a, da);
                    }
                    if active(b) {
                        let db = self.mul(g, a);
                        push(self, &mut adj, b, db);
                    }
                }
                &Op::Scale { a, c, .. } => {
                    let da = self.scale(g, c);
                    push(self, &mut adj, a, da);
                }
                &Op::AddBiasRow { a, bias, .. } => {
                    if active(a) {
                        push(self, &mut adj, a, g);
                    }
                    if active(bias) {
                        // column sums of g as a [1, n] node: onesᵀ · g
                        let m = self.shape(g)[0];
                        let ones = self.constant(vec![1.0; m], &[1, m]);
                        let db = self.matmul(ones, g);
                        push(self, &mut adj, bias, db);
                    }
                }
                &Op::MulCols { a, v, .. } => {
                    if active(a) {
                        let (m, _n) = (self.shape(a)[0], self.shape(a)[1]);
                        let ones = self.constant(vec![1.0; m], &[m, 1]);
                        let vb = self.matmul(ones, v); // broadcast v to [m, n]
                        let da = self.mul(g, vb);
                        push(self, &mut adj, a, da);
                    }
                    if active(v) {
                        let m = self.shape(a)[0];
                        let ga = self.mul(g, a);
                        let ones = self.constant(vec![1.0; m], &[1, m]);
                        let dv = self.matmul(ones, ga);
                        push(self, &mut adj, v, dv);
                    }
                }
                &Op::Elu { a, .. } => {
                    let d = self.elu_prime(a);
                    let da = self.mul(g, d);
                    push(self, &mut adj, a, da);
                }
                Op::ConcatCols { xs, .. } => {
                    let xs = xs.clone();
                    let mut col = 0usize;
                    for &x in &xs {
                        let xn = self.shape(x)[1];
                        if active(x) {
                            let dx = self.slice_cols(g, col, xn);
                            push(self, &mut adj, x, dx);
                        }
                        col += xn;
                    }
                }
                &Op::SliceCols { a, start, len, .. } => {
                    // Pad g back into a's column range with zero blocks.
                    let (m, n) = (self.shape(a)[0], self.shape(a)[1]);
                    let mut parts: Vec<TensorId> = Vec::new();
                    if start > 0 {
                        parts.push(self.constant(vec![0.0; m * start], &[m, start]));
                    }
                    parts.push(g);
                    if start + len < n {
                        let rest = n - start - len;
                        parts.push(self.constant(vec![0.0; m * rest], &[m, rest]));
                    }
                    let da = if parts.len() == 1 { parts[0] } else { self.concat_cols(&parts) };
                    push(self, &mut adj, a, da);
                }
                &Op::Reshape { a, .. } => {
                    let shape = self.shape(a).to_vec();
                    let da = self.reshape(g, &shape);
                    push(self, &mut adj, a, da);
                }
                &Op::SumAll { a, .. } => {
                    let len = self.data(a).len();
                    let shape = self.shape(a).to_vec();
                    let ones = self.constant(vec![1.0; len], &[len, 1]);
                    let bcast = self.matmul(ones, g); // [len,1] x [1,1]
                    let da = self.reshape(bcast, &shape);
                    push(self, &mut adj, a, da);
                }
                &Op::MeanAll { a, .. } => {
                    let len = self.data(a).len();
                    let shape = self.shape(a).to_vec();
                    let ones = self.constant(vec![1.0 / len as f64; len], &[len, 1]);
                    let bcast = self.matmul(ones, g);
                    let da = self.reshape(bcast, &shape);
                    push(self, &mut adj, a, da);
                }
                &Op::SumAxis1 { a, .. } => {
                    let n = self.shape(a)[1];
                    let ones = self.constant(vec![1.0; n], &[1, n]);
                    let da = self.matmul(g, ones); // [m,1] x [1,n]
                    push(self, &mut adj, a, da);
                }
                other => panic!(
                    "grad_of: unsupported operation {} on the path between nodes {} and {}",
                    op_name(other),
                    wrt,
                    y
                ),
            }
        }

        match adj.get(&wrt) {
            Some(&g) => g,
            None => panic!("grad_of: no gradient path reached node {}", wrt),
        }
    }

    /// Euclidean norm of ∂y/∂at for scalar-valued y, as a differentiable node.
    pub fn gradient_norm_of(&mut self, y: TensorId, at: TensorId) -> TensorId {
        assert!(
            self.data(y).len() == 1,
            "gradient_norm_of: y must be scalar, got shape {:?}",
            self.shape(y)
        );
        let g = self.grad_of(y, at);
        let sq = self.mul(g, g);
        let s = self.sum_all(sq);
        self.sqrt(s)
    }

    /// Input ids of a recorded operation (outputs excluded).
    fn op_inputs(&self, oi: usize) -> Vec<TensorId> {
        match &self.ops[oi] {
            Op::Matmul { a, b, .. }
            | Op::Add { a, b, .. }
            | Op::Sub { a, b, .. }
            | Op::Mul { a, b, .. } => vec![*a, *b],
            Op::AddBiasRow { a, bias, .. } => vec![*a, *bias],
            Op::MulCols { a, v, .. } => vec![*a, *v],
            Op::Transpose { a, .. }
            | Op::Scale { a, .. }
            | Op::Elu { a, .. }
            | Op::EluPrime { a, .. }
            | Op::LnClamped { a, .. }
            | Op::Sqrt { a, .. }
            | Op::SoftmaxRows { a, .. }
            | Op::SumAll { a, .. }
            | Op::MeanAll { a, .. }
            | Op::SumAxis1 { a, .. }
            | Op::MeanGroupedRows { a, .. }
            | Op::ShiftRowsInBlocks { a, .. }
            | Op::SliceCols { a, .. }
            | Op::Reshape { a, .. } => vec![*a],
            Op::ConcatCols { xs, .. } => xs.clone(),
            Op::BatchNormTrain { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Chamfer { recon, .. } => vec![*recon],
        }
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Matmul { .. } => "matmul",
        Op::Transpose { .. } => "transpose",
        Op::Add { .. } => "add",
        Op::Sub { .. } => "sub",
        Op::Mul { .. } => "mul",
        Op::Scale { .. } => "scale",
        Op::AddBiasRow { .. } => "add_bias_row",
        Op::MulCols { .. } => "mul_cols",
        Op::Elu { .. } => "elu",
        Op::EluPrime { .. } => "elu_prime",
        Op::LnClamped { .. } => "ln_clamped",
        Op::Sqrt { .. } => "sqrt",
        Op::SoftmaxRows { .. } => "softmax_rows",
        Op::SumAll { .. } => "sum_all",
        Op::MeanAll { .. } => "mean_all",
        Op::SumAxis1 { .. } => "sum_axis1",
        Op::MeanGroupedRows { .. } => "mean_grouped_rows",
        Op::ShiftRowsInBlocks { .. } => "shift_rows_in_blocks",
        Op::ConcatCols { .. } => "concat_cols",
        Op::SliceCols { .. } => "slice_cols",
        Op::Reshape { .. } => "reshape",
        Op::BatchNormTrain { .. } => "batch_norm",
        Op::Chamfer { .. } => "chamfer",
    }
}
