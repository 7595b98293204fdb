//! Minimal dense-tensor engine with reverse-mode automatic differentiation.
//!
//! Everything is `f64`, eagerly evaluated, and recorded on a [`Tape`]. Tensors
//! live inside the tape as flat row-major buffers plus a shape; operations
//! return [`TensorId`] handles. A backward sweep accumulates gradients into
//! per-node buffers that persist until [`Tape::zero_grad`].
//!
//! The engine is deliberately small: it provides exactly the primitives the
//! gait-recognition network needs (dense layers, batch norm, dilated causal
//! convolution built from shifts and matmuls, pooling, softmax, a fused
//! Chamfer node) plus a symbolic input-gradient builder (`grad_of`, in
//! [`grad`]) that makes the gradient-penalty term twice differentiable.
//!
//! Shape conventions: almost every tensor is 2-D `[rows, cols]`. Sequences are
//! flattened into the row axis (`rows = batch * time` or
//! `batch * frames * points`) with the grouping carried by the operation that
//! needs it, so one matmul implements a layer shared across time or points.

mod grad;
pub mod fd;

pub type TensorId = usize;

/// Mode switch for batch normalization, mirroring train/eval semantics.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum BnMode {
    Train,
    Eval,
}

struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    /// True for leaves created with `requires_grad` and for any node that
    /// (transitively) consumes one. Backward skips everything else.
    needs_grad: bool,
}

/// Recorded operation. Each op produces exactly one output node and stores
/// whatever the backward pass needs (input ids, saved statistics, argmins).
enum Op {
    Matmul { a: TensorId, b: TensorId, out: TensorId },
    Transpose { a: TensorId, out: TensorId },
    Add { a: TensorId, b: TensorId, out: TensorId },
    Sub { a: TensorId, b: TensorId, out: TensorId },
    Mul { a: TensorId, b: TensorId, out: TensorId },
    Scale { a: TensorId, c: f64, out: TensorId },
    AddBiasRow { a: TensorId, bias: TensorId, out: TensorId },
    MulCols { a: TensorId, v: TensorId, out: TensorId },
    Elu { a: TensorId, out: TensorId },
    EluPrime { a: TensorId, out: TensorId },
    LnClamped { a: TensorId, floor: f64, out: TensorId },
    Sqrt { a: TensorId, out: TensorId },
    SoftmaxRows { a: TensorId, out: TensorId },
    SumAll { a: TensorId, out: TensorId },
    MeanAll { a: TensorId, out: TensorId },
    SumAxis1 { a: TensorId, out: TensorId },
    MeanGroupedRows { a: TensorId, group: usize, out: TensorId },
    /// Within each consecutive block of `block` rows, shift rows down by
    /// `offset`, filling vacated rows with zeros (causal time shift).
    ShiftRowsInBlocks { a: TensorId, block: usize, offset: usize, out: TensorId },
    ConcatCols { xs: Vec<TensorId>, out: TensorId },
    SliceCols { a: TensorId, start: usize, len: usize, out: TensorId },
    Reshape { a: TensorId, out: TensorId },
    BatchNormTrain {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
        mean: Vec<f64>,
        var: Vec<f64>,
        out: TensorId,
    },
    /// Symmetric squared-nearest-neighbour distance between a constant target
    /// point-cloud sequence and a reconstructed one, averaged over frames,
    /// one value per batch sample. Gradients flow into the reconstruction
    /// only; argmins are saved so ties stay pinned to the forward selection.
    Chamfer {
        target: Vec<f64>, // [b, f, p, 4] row-major
        recon: TensorId,  // [b, 4*f*p], channel-major (4, f, p) per sample
        b: usize,
        f: usize,
        p: usize,
        /// For each target point: index of its nearest reconstructed point.
        nearest_recon: Vec<u32>,
        /// For each reconstructed point: index of its nearest target point.
        nearest_target: Vec<u32>,
        out: TensorId,
    },
}

impl Op {
    fn out(&self) -> TensorId {
        match self {
            Op::Matmul { out, .. }
            | Op::Transpose { out, .. }
            | Op::Add { out, .. }
            | Op::Sub { out, .. }
            | Op::Mul { out, .. }
            | Op::Scale { out, .. }
            | Op::AddBiasRow { out, .. }
            | Op::MulCols { out, .. }
            | Op::Elu { out, .. }
            | Op::EluPrime { out, .. }
            | Op::LnClamped { out, .. }
            | Op::Sqrt { out, .. }
            | Op::SoftmaxRows { out, .. }
            | Op::SumAll { out, .. }
            | Op::MeanAll { out, .. }
            | Op::SumAxis1 { out, .. }
            | Op::MeanGroupedRows { out, .. }
            | Op::ShiftRowsInBlocks { out, .. }
            | Op::ConcatCols { out, .. }
            | Op::SliceCols { out, .. }
            | Op::Reshape { out, .. }
            | Op::BatchNormTrain { out, .. }
            | Op::Chamfer { out, .. } => *out,
        }
    }
}

/// Computation tape: nodes in creation order, ops in execution order
/// (topological by construction), and persistent gradient buffers.
pub struct Tape {
    nodes: Vec<Node>,
    ops: Vec<Op>,
    grads: Vec<Option<Vec<f64>>>,
}

pub fn elu_scalar(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp() - 1.0
    }
}

/// ELU derivative; the value at exactly 0 is defined as 1 (right limit).
pub fn elu_prime_scalar(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        x.exp()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), ops: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, data: Vec<f64>, shape: &[usize], requires_grad: bool) -> TensorId {
        let numel: usize = shape.iter().product();
        assert!(
            data.len() == numel,
            "leaf: data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        assert!(shape.iter().all(|&d| d > 0), "leaf: zero extent in shape {:?}", shape);
        self.push_node(data, shape.to_vec(), requires_grad)
    }

    pub fn constant(&mut self, data: Vec<f64>, shape: &[usize]) -> TensorId {
        self.leaf(data, shape, false)
    }

    pub fn scalar(&mut self, v: f64) -> TensorId {
        self.constant(vec![v], &[1, 1])
    }

    /// Copy of a node's current values as a gradient-free leaf.
    pub fn detach(&mut self, id: TensorId) -> TensorId {
        let data = self.nodes[id].data.clone();
        let shape = self.nodes[id].shape.clone();
        self.push_node(data, shape, false)
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.nodes[id].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id].shape
    }

    pub fn value(&self, id: TensorId) -> f64 {
        assert!(
            self.nodes[id].data.len() == 1,
            "value: node has {} elements, expected scalar",
            self.nodes[id].data.len()
        );
        self.nodes[id].data[0]
    }

    pub fn needs_grad(&self, id: TensorId) -> bool {
        self.nodes[id].needs_grad
    }

    /// Gradient accumulated so far, if any backward pass touched this node.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.grads.get(id).and_then(|g| g.as_deref())
    }

    /// Gradient buffer, materializing zeros for untouched nodes (an unused
    /// leaf has gradient exactly zero).
    pub fn grad_or_zeros(&self, id: TensorId) -> Vec<f64> {
        match self.grad(id) {
            Some(g) => g.to_vec(),
            None => vec![0.0; self.nodes[id].data.len()],
        }
    }

    pub fn zero_grad(&mut self) {
        for g in self.grads.iter_mut() {
            *g = None;
        }
    }

    fn push_node(&mut self, data: Vec<f64>, shape: Vec<usize>, needs_grad: bool) -> TensorId {
        let id = self.nodes.len();
        self.nodes.push(Node { data, shape, needs_grad });
        self.grads.push(None);
        id
    }

    fn rows_cols(&self, id: TensorId) -> (usize, usize) {
        let s = &self.nodes[id].shape;
        assert!(s.len() == 2, "expected 2-D tensor, got shape {:?}", s);
        (s[0], s[1])
    }

    fn record(&mut self, op: Op) {
        self.ops.push(op);
    }

    // ----- primitive operations -------------------------------------------

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (m, k) = self.rows_cols(a);
        let (kb, n) = self.rows_cols(b);
        assert!(
            k == kb,
            "matmul: inner dimensions differ: {:?} vs {:?}",
            self.nodes[a].shape,
            self.nodes[b].shape
        );
        let mut out = vec![0.0; m * n];
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                self.nodes[a].data.as_ptr(),
                k as isize,
                1,
                self.nodes[b].data.as_ptr(),
                n as isize,
                1,
                0.0,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        let ng = self.nodes[a].needs_grad || self.nodes[b].needs_grad;
        let id = self.push_node(out, vec![m, n], ng);
        self.record(Op::Matmul { a, b, out: id });
        id
    }

    pub fn transpose2d(&mut self, a: TensorId) -> TensorId {
        let (m, n) = self.rows_cols(a);
        let src = &self.nodes[a].data;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let ng = self.nodes[a].needs_grad;
        let id = self.push_node(out, vec![n, m], ng);
        self.record(Op::Transpose { a, out: id });
        id
    }

    fn binary_same_shape(&self, a: TensorId, b: TensorId, what: &str) {
        assert!(
            self.nodes[a].shape == self.nodes[b].shape,
            "{}: shape mismatch: {:?} vs {:?}",
            what,
            self.nodes[a].shape,
            self.nodes[b].shape
        );
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.binary_same_shape(a, b, "add");
        let data: Vec<f64> = self.nodes[a]
            .data
            .iter()
            .zip(&self.nodes[b].data)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a].shape.clone();
        let ng = self.nodes[a].needs_grad || self.nodes[b].needs_grad;
        let id = self.push_node(data, shape, ng);
        self.record(Op::Add { a, b, out: id });
        id
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.binary_same_shape(a, b, "sub");
        let data: Vec<f64> = self.nodes[a]
            .data
            .iter()
            .zip(&self.nodes[b].data)
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.nodes[a].shape.clone();
        let ng = self.nodes[a].needs_grad || self.nodes[b].needs_grad;
        let id = self.push_node(data, shape, ng);
        self.record(Op::Sub { a, b, out: id });
        id
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.binary_same_shape(a, b, "mul");
        let data: Vec<f64> = self.nodes[a]
            .data
            .iter()
            .zip(&self.nodes[b].data)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[a].shape.clone();
        let ng = self.nodes[a].needs_grad || self.nodes[b].needs_grad;
        let id = self.push_node(data, shape, ng);
        self.record(Op::Mul { a, b, out: id });
        id
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let data: Vec<f64> = self.nodes[a].data.iter().map(|x| x * c).collect();
        let shape = self.nodes[a].shape.clone();
        let ng = self.nodes[a].needs_grad;
        let id = self.push_node(data, shape, ng);
        self.record(Op::Scale { a, c, out: id });
        id
    }

    /// Broadcast-add a `[1, n]` bias to every row of a `[m, n]` tensor.
    pub fn add_bias_row(&mut self, a: TensorId, bias: TensorId) -> TensorId {
        let (m, n) = self.rows_cols(a);
        let (bm, bn) = self.rows_cols(bias);
        assert!(
            bm == 1 && bn == n,
            "add_bias_row: bias shape {:?} does not broadcast over {:?}",
            self.nodes[bias].shape,
            self.nodes[a].shape
        );
        let mut data = self.nodes[a].data.clone();
        let b = &self.nodes[bias].data;
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += b[j];
            }
        }
        let ng = self.nodes[a].needs_grad || self.nodes[bias].needs_grad;
        let id = self.push_node(data, vec![m, n], ng);
        self.record(Op::AddBiasRow { a, bias, out: id });
        id
    }

    /// Scale each column j of a `[m, n]` tensor by v[j] (v is `[1, n]`).
    pub fn mul_cols(&mut self, a: TensorId, v: TensorId) -> TensorId {
        let (m, n) = self.rows_cols(a);
        let (vm, vn) = self.rows_cols(v);
        assert!(
            vm == 1 && vn == n,
            "mul_cols: vector shape {:?} does not broadcast over {:?}",
            self.nodes[v].shape,
            self.nodes[a].shape
        );
        let mut data = self.nodes[a].data.clone();
        let vv = &self.nodes[v].data;
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] *= vv[j];
            }
        }
        let ng = self.nodes[a].needs_grad || self.nodes[v].needs_grad;
        let id = self.push_node(data, vec![m, n], ng);
        self.record(Op::MulCols { a, v, out: id });
        id
    }

    pub fn elu(&mut self, a: TensorId) -> TensorId {
        let data: Vec<f64> = self.nodes[a].data.iter().map(|&x| elu_scalar(x)).collect();
        let shape = self.nodes[a].shape.clone();
        let ng = self.nodes[a].needs_grad;
        let id = self.push_node(data, shape, ng);
        self.record(Op::Elu { a, out: id });
        id
    }

    /// Elementwise ELU derivative as a differentiable primitive; the symbolic
    /// input-gradient builder emits it when differentiating through ELU.
    pub fn elu_prime(&mut self, a: TensorId) -> TensorId {
        let data: Vec<f64> = self.nodes[a].data.iter().map(|&x| elu_prime_scalar(x)).collect();
        let shape = self.nodes[a].shape.clone();
        let ng = self.nodes[a].needs_grad;
        let id = self.push_node(data, shape, ng);
        self.record(Op::EluPrime { a, out: id });
        id
    }

    /// ln(max(x, floor)) elementwise; below the floor the derivative is 0.
    pub fn ln_clamped(&mut self, a: TensorId, floor: f64) -> TensorId {
        assert!(floor > 0.0, "ln_clamped: floor must be positive, got {}", floor);
        let data: Vec<f64> = self.nodes[a].data.iter().map(|&x| x.max(floor).ln()).collect();
        let shape = self.nodes[a].shape.clone();
        let ng = self.nodes[a].needs_grad;
        let id = self.push_node(data, shape, ng);
        self.record(Op::LnClamped { a, floor, out: id });
        id
    }

    pub fn sqrt(&mut self, a: TensorId) -> TensorId {
        let data: Vec<f64> = self.nodes[a]
            .data
            .iter()
            .map(|&x| {
                assert!(x >= 0.0, "sqrt: negative input {}", x);
                x.sqrt()
            })
            .collect();
        let shape = self.nodes[a].shape.clone();
        let ng = self.nodes[a].needs_grad;
        let id = self.push_node(data, shape, ng);
        self.record(Op::Sqrt { a, out: id });
        id
    }

    /// Row-wise softmax with max-subtraction for stability.
    pub fn softmax_rows(&mut self, a: TensorId) -> TensorId {
        let (m, n) = self.rows_cols(a);
        let src = &self.nodes[a].data;
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..n {
                let e = (row[j] - mx).exp();
                data[i * n + j] = e;
                sum += e;
            }
            for j in 0..n {
                data[i * n + j] /= sum;
            }
        }
        let ng = self.nodes[a].needs_grad;
        let id = self.push_node(data, vec![m, n], ng);
        self.record(Op::SoftmaxRows { a, out: id });
        id
    }

    pub fn sum_all(&mut self, a: TensorId) -> TensorId {
        let s: f64 = self.nodes[a].data.iter().sum();
        let ng = self.nodes[a].needs_grad;
        let id = self.push_node(vec![s], vec![1, 1], ng);
        self.record(Op::SumAll { a, out: id });
        id
    }

    pub fn mean_all(&mut self, a: TensorId) -> TensorId {
        let len = self.nodes[a].data.len();
        let s: f64 = self.nodes[a].data.iter().sum();
        let ng = self.nodes[a].needs_grad;
        let id = self.push_node(vec![s / len as f64], vec![1, 1], ng);
        self.record(Op::MeanAll { a, out: id });
        id
    }

    /// Row sums: `[m, n] -> [m, 1]`.
    pub fn sum_axis1(&mut self, a: TensorId) -> TensorId {
        let (m, n) = self.rows_cols(a);
        let src = &self.nodes[a].data;
        let mut data = vec![0.0; m];
        for i in 0..m {
            data[i] = src[i * n..(i + 1) * n].iter().sum();
        }
        let ng = self.nodes[a].needs_grad;
        let id = self.push_node(data, vec![m, 1], ng);
        self.record(Op::SumAxis1 { a, out: id });
        id
    }

    /// Mean over consecutive groups of `group` rows: `[g*r, n] -> [r, n]`.
    /// Implements global average pooling over points (group = points per
    /// frame) and over time (group = frames per window).
    pub fn mean_grouped_rows(&mut self, a: TensorId, group: usize) -> TensorId {
        let (m, n) = self.rows_cols(a);
        assert!(group >= 1 && m % group == 0, "mean_grouped_rows: {} rows not divisible by group {}", m, group);
        let r = m / group;
        let src = &self.nodes[a].data;
        let mut data = vec![0.0; r * n];
        for out_i in 0..r {
            for g in 0..group {
                let row = (out_i * group + g) * n;
                for j in 0..n {
                    data[out_i * n + j] += src[row + j];
                }
            }
            for j in 0..n {
                data[out_i * n + j] /= group as f64;
            }
        }
        let ng = self.nodes[a].needs_grad;
        let id = self.push_node(data, vec![r, n], ng);
        self.record(Op::MeanGroupedRows { a, group, out: id });
        id
    }

    /// Causal time shift: within each consecutive block of `block` rows, row
    /// t of the output is row t-offset of the input, or zero for t < offset.
    pub fn shift_rows_in_blocks(&mut self, a: TensorId, block: usize, offset: usize) -> TensorId {
        let (m, n) = self.rows_cols(a);
        assert!(block >= 1 && m % block == 0, "shift_rows_in_blocks: {} rows not divisible by block {}", m, block);
        let src = &self.nodes[a].data;
        let mut data = vec![0.0; m * n];
        let nblocks = m / block;
        for bi in 0..nblocks {
            for t in offset..block {
                let dst = (bi * block + t) * n;
                let srcrow = (bi * block + t - offset) * n;
                data[dst..dst + n].copy_from_slice(&src[srcrow..srcrow + n]);
            }
        }
        let ng = self.nodes[a].needs_grad;
        let id = self.push_node(data, vec![m, n], ng);
        self.record(Op::ShiftRowsInBlocks { a, block, offset, out: id });
        id
    }

    /// Concatenate along the column axis (the only axis the network needs).
    pub fn concat(&mut self, xs: &[TensorId], axis: usize) -> TensorId {
        assert!(axis == 1, "concat: only axis 1 (columns) is supported, got {}", axis);
        self.concat_cols(xs)
    }

    pub fn concat_cols(&mut self, xs: &[TensorId]) -> TensorId {
        assert!(!xs.is_empty(), "concat_cols: empty input list");
        let (m, _) = self.rows_cols(xs[0]);
        let mut total = 0usize;
        for &x in xs {
            let (xm, xn) = self.rows_cols(x);
            assert!(xm == m, "concat_cols: row mismatch: {} vs {}", xm, m);
            total += xn;
        }
        let mut data = vec![0.0; m * total];
        let mut col = 0usize;
        for &x in xs {
            let (_, xn) = self.rows_cols(x);
            let src = &self.nodes[x].data;
            for i in 0..m {
                data[i * total + col..i * total + col + xn]
                    .copy_from_slice(&src[i * xn..(i + 1) * xn]);
            }
            col += xn;
        }
        let ng = xs.iter().any(|&x| self.nodes[x].needs_grad);
        let id = self.push_node(data, vec![m, total], ng);
        self.record(Op::ConcatCols { xs: xs.to_vec(), out: id });
        id
    }

    pub fn slice_cols(&mut self, a: TensorId, start: usize, len: usize) -> TensorId {
        let (m, n) = self.rows_cols(a);
        assert!(start + len <= n, "slice_cols: range {}..{} out of {} columns", start, start + len, n);
        let src = &self.nodes[a].data;
        let mut data = vec![0.0; m * len];
        for i in 0..m {
            data[i * len..(i + 1) * len].copy_from_slice(&src[i * n + start..i * n + start + len]);
        }
        let ng = self.nodes[a].needs_grad;
        let id = self.push_node(data, vec![m, len], ng);
        self.record(Op::SliceCols { a, start, len, out: id });
        id
    }

    pub fn reshape(&mut self, a: TensorId, shape: &[usize]) -> TensorId {
        let numel: usize = shape.iter().product();
        assert!(
            numel == self.nodes[a].data.len(),
            "reshape: size mismatch: {:?} has {} elements, target {:?} needs {}",
            self.nodes[a].shape,
            self.nodes[a].data.len(),
            shape,
            numel
        );
        let data = self.nodes[a].data.clone();
        let ng = self.nodes[a].needs_grad;
        let id = self.push_node(data, shape.to_vec(), ng);
        self.record(Op::Reshape { a, out: id });
        id
    }

    /// Batch normalization in train mode over the row axis of `[m, C]`
    /// (rows cover batch plus any flattened frame/point axes). Returns the
    /// output node and the batch mean/variance (biased) so the caller can
    /// maintain running statistics outside the tape.
    pub fn batch_norm_train(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    ) -> (TensorId, Vec<f64>, Vec<f64>) {
        let (m, c) = self.rows_cols(x);
        assert!(m >= 1, "batch_norm_train: zero-size reduction axis");
        let (gm, gc) = self.rows_cols(gamma);
        let (bm, bc) = self.rows_cols(beta);
        assert!(gm == 1 && gc == c && bm == 1 && bc == c,
            "batch_norm_train: gamma/beta must be [1, {}], got {:?} and {:?}",
            c, self.nodes[gamma].shape, self.nodes[beta].shape);

        let src = &self.nodes[x].data;
        let mut mean = vec![0.0; c];
        for i in 0..m {
            for j in 0..c {
                mean[j] += src[i * c + j];
            }
        }
        for j in 0..c {
            mean[j] /= m as f64;
        }
        let mut var = vec![0.0; c];
        for i in 0..m {
            for j in 0..c {
                let d = src[i * c + j] - mean[j];
                var[j] += d * d;
            }
        }
        for j in 0..c {
            var[j] /= m as f64;
        }

        let g = &self.nodes[gamma].data;
        let b = &self.nodes[beta].data;
        let mut data = vec![0.0; m * c];
        for j in 0..c {
            let inv = 1.0 / (var[j] + eps).sqrt();
            for i in 0..m {
                data[i * c + j] = g[j] * (src[i * c + j] - mean[j]) * inv + b[j];
            }
        }
        let ng = self.nodes[x].needs_grad
            || self.nodes[gamma].needs_grad
            || self.nodes[beta].needs_grad;
        let id = self.push_node(data, vec![m, c], ng);
        self.record(Op::BatchNormTrain {
            x,
            gamma,
            beta,
            eps,
            mean: mean.clone(),
            var: var.clone(),
            out: id,
        });
        (id, mean, var)
    }

    /// Batch normalization in eval mode: an affine map using the running
    /// statistics verbatim. Composed from primitives, so it is differentiable
    /// with respect to the input (statistics and parameters are constants —
    /// nothing trains in eval mode).
    pub fn batch_norm_eval(
        &mut self,
        x: TensorId,
        gamma: &[f64],
        beta: &[f64],
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> TensorId {
        let (_, c) = self.rows_cols(x);
        assert!(
            gamma.len() == c && beta.len() == c && running_mean.len() == c && running_var.len() == c,
            "batch_norm_eval: statistics length mismatch with {} channels",
            c
        );
        let scale: Vec<f64> = (0..c).map(|j| gamma[j] / (running_var[j] + eps).sqrt()).collect();
        let shift: Vec<f64> = (0..c).map(|j| beta[j] - running_mean[j] * scale[j]).collect();
        let s = self.constant(scale, &[1, c]);
        let sh = self.constant(shift, &[1, c]);
        let scaled = self.mul_cols(x, s);
        self.add_bias_row(scaled, sh)
    }

    /// Dilated causal 1-D convolution with kernel length 3, built from time
    /// shifts and matmuls. `x` is `[blocks*t_len, C_in]`; `taps` are three
    /// `[C_in, C_out]` weight matrices ordered oldest (t-2·dilation) to
    /// newest (t); `bias` is `[1, C_out]`. Left padding by zero-filled shifts
    /// makes output length equal input length with no future leakage.
    pub fn conv1d_dilated_causal(
        &mut self,
        x: TensorId,
        blocks: usize,
        t_len: usize,
        taps: &[TensorId; 3],
        bias: TensorId,
        dilation: usize,
    ) -> TensorId {
        assert!(dilation >= 1, "conv1d_dilated_causal: dilation must be >= 1, got {}", dilation);
        let (m, _) = self.rows_cols(x);
        assert!(
            m == blocks * t_len,
            "conv1d_dilated_causal: {} rows != blocks {} * t_len {}",
            m,
            blocks,
            t_len
        );
        let x2 = self.shift_rows_in_blocks(x, t_len, (2 * dilation).min(t_len));
        let x1 = self.shift_rows_in_blocks(x, t_len, dilation.min(t_len));
        let m0 = self.matmul(x2, taps[0]);
        let m1 = self.matmul(x1, taps[1]);
        let m2 = self.matmul(x, taps[2]);
        let s = self.add(m0, m1);
        let s = self.add(s, m2);
        self.add_bias_row(s, bias)
    }

    /// Fused sequence Chamfer node. `target` is a constant `[b, f, p, 4]`
    /// point-cloud sequence batch; `recon` is a `[b, 4*f*p]` node laid out
    /// channel-major per sample (the decoder's output order). Produces one
    /// value per sample: the mean over frames of the symmetric sum of squared
    /// nearest-neighbour distances. Nearest-neighbour ties resolve to the
    /// first index in scan order and stay fixed for the backward pass.
    pub fn chamfer_per_sample(
        &mut self,
        target: &[f64],
        recon: TensorId,
        b: usize,
        f: usize,
        p: usize,
    ) -> TensorId {
        assert!(f > 0 && p > 0, "chamfer: empty frame (f={}, p={})", f, p);
        assert!(
            target.len() == b * f * p * 4,
            "chamfer: target length {} != b*f*p*4 = {}",
            target.len(),
            b * f * p * 4
        );
        let (rm, rn) = self.rows_cols(recon);
        assert!(
            rm == b && rn == 4 * f * p,
            "chamfer: recon shape {:?} does not match [b={}, 4*f*p={}]",
            self.nodes[recon].shape,
            b,
            4 * f * p
        );

        let rec = &self.nodes[recon].data;
        let fp = f * p;
        // recon coordinate c of point q in frame fr of sample bi:
        let rc = |bi: usize, c: usize, fr: usize, q: usize| rec[bi * 4 * fp + c * fp + fr * p + q];
        let tc = |bi: usize, fr: usize, pt: usize, c: usize| target[((bi * f + fr) * p + pt) * 4 + c];

        let mut out = vec![0.0; b];
        let mut nearest_recon = vec![0u32; b * f * p];
        let mut nearest_target = vec![0u32; b * f * p];
        for bi in 0..b {
            let mut acc = 0.0;
            for fr in 0..f {
                // target -> nearest recon
                for pt in 0..p {
                    let mut best = f64::INFINITY;
                    let mut best_q = 0u32;
                    for q in 0..p {
                        let mut d = 0.0;
                        for c in 0..4 {
                            let diff = tc(bi, fr, pt, c) - rc(bi, c, fr, q);
                            d += diff * diff;
                        }
                        if d < best {
                            best = d;
                            best_q = q as u32;
                        }
                    }
                    acc += best;
                    nearest_recon[(bi * f + fr) * p + pt] = best_q;
                }
                // recon -> nearest target
                for q in 0..p {
                    let mut best = f64::INFINITY;
                    let mut best_pt = 0u32;
                    for pt in 0..p {
                        let mut d = 0.0;
                        for c in 0..4 {
                            let diff = tc(bi, fr, pt, c) - rc(bi, c, fr, q);
                            d += diff * diff;
                        }
                        if d < best {
                            best = d;
                            best_pt = pt as u32;
                        }
                    }
                    acc += best;
                    nearest_target[(bi * f + fr) * p + q] = best_pt;
                }
            }
            out[bi] = acc / f as f64;
        }
        let ng = self.nodes[recon].needs_grad;
        let id = self.push_node(out, vec![b, 1], ng);
        self.record(Op::Chamfer {
            target: target.to_vec(),
            recon,
            b,
            f,
            p,
            nearest_recon,
            nearest_target,
            out: id,
        });
        id
    }

    // ----- backward --------------------------------------------------------

    fn accumulate(&mut self, id: TensorId, delta: &[f64]) {
        if !self.nodes[id].needs_grad {
            return;
        }
        let n = self.nodes[id].data.len();
        assert!(delta.len() == n, "gradient length {} != node size {}", delta.len(), n);
        let slot = &mut self.grads[id];
        match slot {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    /// Reverse sweep from a scalar loss. Accumulates dLoss/dNode into each
    /// gradient buffer; repeated calls without `zero_grad` add up.
    pub fn backward(&mut self, loss: TensorId) {
        assert!(
            self.nodes[loss].data.len() == 1,
            "backward: loss must be scalar, got shape {:?}",
            self.nodes[loss].shape
        );
        assert!(self.nodes[loss].needs_grad, "backward: loss does not depend on any leaf requiring gradients");

        // Local adjoint buffers for this sweep; persistent buffers only
        // receive the final contributions (so repeated backward calls on the
        // same tape accumulate without double-counting interior nodes).
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        adj[loss] = Some(vec![1.0]);

        macro_rules! take_out_adj {
            ($out:expr) => {
                match adj[$out].take() {
                    Some(g) => g,
                    None => continue,
                }
            };
        }
        fn acc(adj: &mut [Option<Vec<f64>>], nodes: &[Node], id: TensorId, delta: Vec<f64>) {
            if !nodes[id].needs_grad {
                return;
            }
            match &mut adj[id] {
                Some(g) => {
                    for (gi, di) in g.iter_mut().zip(&delta) {
                        *gi += di;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
        }

        for oi in (0..self.ops.len()).rev() {
            let out = self.ops[oi].out();
            if out >= adj.len() || adj[out].is_none() {
                continue;
            }
            match &self.ops[oi] {
                &Op::Matmul { a, b, out } => {
                    let g = take_out_adj!(out);
                    let (m, k) = (self.nodes[a].shape[0], self.nodes[a].shape[1]);
                    let n = self.nodes[b].shape[1];
                    if self.nodes[a].needs_grad {
                        // dA = G · Bᵀ
                        let mut da = vec![0.0; m * k];
                        unsafe {
                            matrixmultiply::dgemm(
                                m, n, k, 1.0,
                                g.as_ptr(), n as isize, 1,
                                self.nodes[b].data.as_ptr(), 1, n as isize, // Bᵀ via strides
                                0.0, da.as_mut_ptr(), k as isize, 1,
                            );
                        }
                        acc(&mut adj, &self.nodes, a, da);
                    }
                    if self.nodes[b].needs_grad {
                        // dB = Aᵀ · G
                        let mut db = vec![0.0; k * n];
                        unsafe {
                            matrixmultiply::dgemm(
                                k, m, n, 1.0,
                                self.nodes[a].data.as_ptr(), 1, k as isize, // Aᵀ via strides
                                g.as_ptr(), n as isize, 1,
                                0.0, db.as_mut_ptr(), n as isize, 1,
                            );
                        }
                        acc(&mut adj, &self.nodes, b, db);
                    }
                }
                &Op::Transpose { a, out } => {
                    let g = take_out_adj!(out);
                    let (n, m) = (self.nodes[out].shape[0], self.nodes[out].shape[1]);
                    let mut da = vec![0.0; m * n];
                    for i in 0..n {
                        for j in 0..m {
                            da[j * n + i] = g[i * m + j];
                        }
                    }
                    acc(&mut adj, &self.nodes, a, da);
                }
                &Op::Add { a, b, out } => {
                    let g = take_out_adj!(out);
                    acc(&mut adj, &self.nodes, a, g.clone());
                    acc(&mut adj, &self.nodes, b, g);
                }
                &Op::Sub { a, b, out } => {
                    let g = take_out_adj!(out);
                    if self.nodes[b].needs_grad {
                        let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                        acc(&mut adj, &self.nodes, b, neg);
                    }
                    acc(&mut adj, &self.nodes, a, g);
                }
                &Op::Mul { a, b, out } => {
                    let g = take_out_adj!(out);
                    if self.nodes[a].needs_grad {
                        let da: Vec<f64> =
                            g.iter().zip(&self.nodes[b].data).map(|(gi, bi)| gi * bi).collect();
                        acc(&mut adj, &self.nodes, a, da);
                    }
                    if self.nodes[b].needs_grad {
                        let db: Vec<f64> =
                            g.iter().zip(&self.nodes[a].data).map(|(gi, ai)| gi * ai).collect();
                        acc(&mut adj, &self.nodes, b, db);
                    }
                }
                &Op::Scale { a, c, out } => {
                    let g = take_out_adj!(out);
                    let da: Vec<f64> = g.iter().map(|x| x * c).collect();
                    acc(&mut adj, &self.nodes, a, da);
                }
                &Op::AddBiasRow { a, bias, out } => {
                    let g = take_out_adj!(out);
                    let (m, n) = (self.nodes[a].shape[0], self.nodes[a].shape[1]);
                    if self.nodes[bias].needs_grad {
                        let mut db = vec![0.0; n];
                        for i in 0..m {
                            for j in 0..n {
                                db[j] += g[i * n + j];
                            }
                        }
                        acc(&mut adj, &self.nodes, bias, db);
                    }
                    acc(&mut adj, &self.nodes, a, g);
                }
                &Op::MulCols { a, v, out } => {
                    let g = take_out_adj!(out);
                    let (m, n) = (self.nodes[a].shape[0], self.nodes[a].shape[1]);
                    if self.nodes[a].needs_grad {
                        let vv = &self.nodes[v].data;
                        let mut da = vec![0.0; m * n];
                        for i in 0..m {
                            for j in 0..n {
                                da[i * n + j] = g[i * n + j] * vv[j];
                            }
                        }
                        acc(&mut adj, &self.nodes, a, da);
                    }
                    if self.nodes[v].needs_grad {
                        let aa = &self.nodes[a].data;
                        let mut dv = vec![0.0; n];
                        for i in 0..m {
                            for j in 0..n {
                                dv[j] += g[i * n + j] * aa[i * n + j];
                            }
                        }
                        acc(&mut adj, &self.nodes, v, dv);
                    }
                }
                &Op::Elu { a, out } => {
                    let g = take_out_adj!(out);
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[a].data)
                        .map(|(gi, &x)| gi * elu_prime_scalar(x))
                        .collect();
                    acc(&mut adj, &self.nodes, a, da);
                }
                &Op::EluPrime { a, out } => {
                    let g = take_out_adj!(out);
                    // d elu'(x)/dx = e^x for x <= 0, 0 for x > 0.
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[a].data)
                        .map(|(gi, &x)| if x > 0.0 { 0.0 } else { gi * x.exp() })
                        .collect();
                    acc(&mut adj, &self.nodes, a, da);
                }
                &Op::LnClamped { a, floor, out } => {
                    let g = take_out_adj!(out);
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[a].data)
                        .map(|(gi, &x)| if x > floor { gi / x } else { 0.0 })
                        .collect();
                    acc(&mut adj, &self.nodes, a, da);
                }
                &Op::Sqrt { a, out } => {
                    let g = take_out_adj!(out);
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[out].data)
                        .map(|(gi, &y)| gi * 0.5 / y)
                        .collect();
                    acc(&mut adj, &self.nodes, a, da);
                }
                &Op::SoftmaxRows { a, out } => {
                    let g = take_out_adj!(out);
                    let (m, n) = (self.nodes[out].shape[0], self.nodes[out].shape[1]);
                    let s = &self.nodes[out].data;
                    let mut da = vec![0.0; m * n];
                    for i in 0..m {
                        let mut dot = 0.0;
                        for j in 0..n {
                            dot += g[i * n + j] * s[i * n + j];
                        }
                        for j in 0..n {
                            da[i * n + j] = s[i * n + j] * (g[i * n + j] - dot);
                        }
                    }
                    acc(&mut adj, &self.nodes, a, da);
                }
                &Op::SumAll { a, out } => {
                    let g = take_out_adj!(out);
                    let da = vec![g[0]; self.nodes[a].data.len()];
                    acc(&mut adj, &self.nodes, a, da);
                }
                &Op::MeanAll { a, out } => {
                    let g = take_out_adj!(out);
                    let len = self.nodes[a].data.len();
                    let da = vec![g[0] / len as f64; len];
                    acc(&mut adj, &self.nodes, a, da);
                }
                &Op::SumAxis1 { a, out } => {
                    let g = take_out_adj!(out);
                    let (m, n) = (self.nodes[a].shape[0], self.nodes[a].shape[1]);
                    let mut da = vec![0.0; m * n];
                    for i in 0..m {
                        for j in 0..n {
                            da[i * n + j] = g[i];
                        }
                    }
                    acc(&mut adj, &self.nodes, a, da);
                }
                &Op::MeanGroupedRows { a, group, out } => {
                    let g = take_out_adj!(out);
                    let (m, n) = (self.nodes[a].shape[0], self.nodes[a].shape[1]);
                    let inv = 1.0 / group as f64;
                    let mut da = vec![0.0; m * n];
                    for i in 0..m {
                        let out_i = i / group;
                        for j in 0..n {
                            da[i * n + j] = g[out_i * n + j] * inv;
                        }
                    }
                    acc(&mut adj, &self.nodes, a, da);
                }
                &Op::ShiftRowsInBlocks { a, block, offset, out } => {
                    let g = take_out_adj!(out);
                    let (m, n) = (self.nodes[a].shape[0], self.nodes[a].shape[1]);
                    let mut da = vec![0.0; m * n];
                    let nblocks = m / block;
                    for bi in 0..nblocks {
                        for t in offset..block {
                            let dst = (bi * block + t - offset) * n;
                            let srcrow = (bi * block + t) * n;
                            da[dst..dst + n].copy_from_slice(&g[srcrow..srcrow + n]);
                        }
                    }
                    acc(&mut adj, &self.nodes, a, da);
                }
                Op::ConcatCols { xs, out } => {
                    let out = *out;
                    let xs = xs.clone();
                    let g = take_out_adj!(out);
                    let (m, total) = (self.nodes[out].shape[0], self.nodes[out].shape[1]);
                    let mut col = 0usize;
                    for &x in &xs {
                        let xn = self.nodes[x].shape[1];
                        if self.nodes[x].needs_grad {
                            let mut dx = vec![0.0; m * xn];
                            for i in 0..m {
                                dx[i * xn..(i + 1) * xn]
                                    .copy_from_slice(&g[i * total + col..i * total + col + xn]);
                            }
                            acc(&mut adj, &self.nodes, x, dx);
                        }
                        col += xn;
                    }
                }
                &Op::SliceCols { a, start, len, out } => {
                    let g = take_out_adj!(out);
                    let (m, n) = (self.nodes[a].shape[0], self.nodes[a].shape[1]);
                    let mut da = vec![0.0; m * n];
                    for i in 0..m {
                        da[i * n + start..i * n + start + len]
                            .copy_from_slice(&g[i * len..(i + 1) * len]);
                    }
                    acc(&mut adj, &self.nodes, a, da);
                }
                &Op::Reshape { a, out } => {
                    let g = take_out_adj!(out);
                    acc(&mut adj, &self.nodes, a, g);
                }
                Op::BatchNormTrain { x, gamma, beta, eps, mean, var, out } => {
                    let (x, gamma, beta, eps, out) = (*x, *gamma, *beta, *eps, *out);
                    let mean = mean.clone();
                    let var = var.clone();
                    let g = take_out_adj!(out);
                    let (m, c) = (self.nodes[x].shape[0], self.nodes[x].shape[1]);
                    let xs = &self.nodes[x].data;
                    let gm = &self.nodes[gamma].data;
                    // Per channel j: xhat = (x - mean)/sqrt(var+eps);
                    // dx = gamma/sqrt(var+eps) * (g - mean(g) - xhat * mean(g*xhat)).
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    let mut gsum = vec![0.0; c];
                    let mut gxsum = vec![0.0; c];
                    let inv: Vec<f64> = (0..c).map(|j| 1.0 / (var[j] + eps).sqrt()).collect();
                    for i in 0..m {
                        for j in 0..c {
                            let xhat = (xs[i * c + j] - mean[j]) * inv[j];
                            let gij = g[i * c + j];
                            gsum[j] += gij;
                            gxsum[j] += gij * xhat;
                            dgamma[j] += gij * xhat;
                            dbeta[j] += gij;
                        }
                    }
                    if self.nodes[x].needs_grad {
                        let minv = 1.0 / m as f64;
                        let mut dx = vec![0.0; m * c];
                        for i in 0..m {
                            for j in 0..c {
                                let xhat = (xs[i * c + j] - mean[j]) * inv[j];
                                dx[i * c + j] = gm[j]
                                    * inv[j]
                                    * (g[i * c + j] - gsum[j] * minv - xhat * gxsum[j] * minv);
                            }
                        }
                        acc(&mut adj, &self.nodes, x, dx);
                    }
                    if self.nodes[gamma].needs_grad {
                        acc(&mut adj, &self.nodes, gamma, dgamma);
                    }
                    if self.nodes[beta].needs_grad {
                        acc(&mut adj, &self.nodes, beta, dbeta);
                    }
                }
                Op::Chamfer { target, recon, b, f, p, nearest_recon, nearest_target, out } => {
                    let (recon, b, f, p, out) = (*recon, *b, *f, *p, *out);
                    let g = take_out_adj!(out);
                    let fp = f * p;
                    let finv = 1.0 / f as f64;
                    let mut dr = vec![0.0; b * 4 * fp];
                    let rec = &self.nodes[recon].data;
                    for bi in 0..b {
                        let gb = g[bi] * finv;
                        for fr in 0..f {
                            for pt in 0..p {
                                // target point pulls its matched recon point
                                let q = nearest_recon[(bi * f + fr) * p + pt] as usize;
                                for c in 0..4 {
                                    let t = target[((bi * f + fr) * p + pt) * 4 + c];
                                    let r = rec[bi * 4 * fp + c * fp + fr * p + q];
                                    dr[bi * 4 * fp + c * fp + fr * p + q] += gb * 2.0 * (r - t);
                                }
                            }
                            for q in 0..p {
                                // recon point pulled toward its matched target
                                let pt = nearest_target[(bi * f + fr) * p + q] as usize;
                                for c in 0..4 {
                                    let t = target[((bi * f + fr) * p + pt) * 4 + c];
                                    let r = rec[bi * 4 * fp + c * fp + fr * p + q];
                                    dr[bi * 4 * fp + c * fp + fr * p + q] += gb * 2.0 * (r - t);
                                }
                            }
                        }
                    }
                    acc(&mut adj, &self.nodes, recon, dr);
                }
            }
        }

        // Fold the sweep's leaf/interior adjoints into the persistent buffers.
        for id in 0..adj.len() {
            if let Some(a) = adj[id].take() {
                self.accumulate(id, &a);
            }
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}
