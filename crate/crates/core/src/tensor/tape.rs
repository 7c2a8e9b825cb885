//! Reverse-mode differentiation over a linear record of executed ops.
//!
//! Nodes are appended in execution order, so every op's inputs precede it
//! and `backward` is a single reverse sweep. A tape belongs to one step and
//! must not be shared across threads mid-step.

use super::conv::{conv_output_len, ConvGeom, Padding};
use super::{ensure_finite, Real, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
}

impl Activation {
    pub fn apply<T: Real>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the output `y`; relu uses 0 at the kink.
    fn derivative_from_output<T: Real>(self, y: T) -> T {
        match self {
            Activation::Relu => {
                if y > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Sigmoid => y * (T::one() - y),
            Activation::Tanh => T::one() - y * y,
        }
    }
}

/// Logistic function, stable for large negative inputs.
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    AddBias { x: usize, bias: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { x: usize, factor: T },
    Act { x: usize, act: Activation },
    Conv2d { x: usize, filters: usize, geom: ConvGeom, col: Vec<T> },
    Reshape { x: usize },
    GatherRows { table: usize, ids: Vec<usize> },
    SliceRows { x: usize, start: usize },
    ConcatRows { parts: Vec<usize> },
    ConcatCols { parts: Vec<usize> },
    Sum { x: usize },
    SoftmaxXent { logits: usize, probs: Vec<T>, targets: Vec<usize>, mask: Vec<bool>, count: usize },
    SigmoidBce { logits: usize, probs: Vec<T>, targets: Vec<T>, mask: Vec<bool>, count: usize },
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn shape_err(op: &'static str, detail: String) -> TensorError {
    TensorError::Shape { op, detail }
}

fn as_matrix(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match *shape {
        [r, c] => Ok((r, c)),
        _ => Err(shape_err(op, format!("expected a matrix, got shape {shape:?}"))),
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op_name: &'static str, shape: Vec<usize>, value: Vec<T>, op: Op<T>, inputs: &[usize]) -> Result<Var> {
        ensure_finite(op_name, &value)?;
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let needs_grad = inputs.iter().any(|&i| self.nodes[i].needs_grad);
        self.nodes.push(Node { shape, value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a tensor as a leaf; it collects a gradient iff `requires_grad`.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            op: Op::Leaf,
            needs_grad: t.requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a non-differentiable input.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(&t))
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape values are finite and well-shaped")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = as_matrix("matmul", self.shape(a))?;
        let (k2, n) = as_matrix("matmul", self.shape(b))?;
        if k != k2 {
            return Err(shape_err("matmul", format!("inner dims {k} and {k2} differ")));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, self.value(a), (k as isize, 1), self.value(b), (n as isize, 1), &mut out);
        self.push("matmul", vec![m, n], out, Op::MatMul { a: a.0, b: b.0, m, k, n }, &[a.0, b.0])
    }

    /// Adds a bias vector along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let cols = *self.shape(x).last().expect("tensors have rank >= 1");
        if self.shape(bias) != [cols] {
            return Err(shape_err(
                "add_bias",
                format!("bias {:?} against trailing dim {cols}", self.shape(bias)),
            ));
        }
        let b = self.value(bias);
        let out: Vec<T> = self.value(x).chunks(cols).flat_map(|row| row.iter().zip(b).map(|(&v, &c)| v + c)).collect();
        let shape = self.shape(x).to_vec();
        self.push("add_bias", shape, out, Op::AddBias { x: x.0, bias: bias.0 }, &[x.0, bias.0])
    }

    /// `x·W + b` for `x: B×I`, `W: I×O`, `b: O`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_bias(xw, b)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Vec<T> {
        self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        let shape = self.shape(a).to_vec();
        self.push("add", shape, out, Op::Add { a: a.0, b: b.0 }, &[a.0, b.0])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        let shape = self.shape(a).to_vec();
        self.push("sub", shape, out, Op::Sub { a: a.0, b: b.0 }, &[a.0, b.0])
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        let shape = self.shape(a).to_vec();
        self.push("mul", shape, out, Op::Mul { a: a.0, b: b.0 }, &[a.0, b.0])
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| v * factor).collect();
        let shape = self.shape(x).to_vec();
        self.push("scale", shape, out, Op::Scale { x: x.0, factor }, &[x.0])
    }

    pub fn activation(&mut self, x: Var, act: Activation) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| act.apply(v)).collect();
        let shape = self.shape(x).to_vec();
        let name = match act {
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
            Activation::Tanh => "tanh",
        };
        self.push(name, shape, out, Op::Act { x: x.0, act }, &[x.0])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Tanh)
    }

    /// Cross-correlation of NHWC `x` with `kh×kw×cin×cout` filters.
    pub fn conv2d(&mut self, x: Var, filters: Var, stride: (usize, usize), padding: Padding) -> Result<Var> {
        let (batch, in_h, in_w, cin) = match *self.shape(x) {
            [b, h, w, c] => (b, h, w, c),
            ref s => return Err(shape_err("conv2d", format!("input must be B×H×W×C, got {s:?}"))),
        };
        let (kh, kw, fcin, cout) = match *self.shape(filters) {
            [a, b, c, d] => (a, b, c, d),
            ref s => return Err(shape_err("conv2d", format!("filters must be kh×kw×Cin×Cout, got {s:?}"))),
        };
        if fcin != cin {
            return Err(shape_err("conv2d", format!("filters expect {fcin} channels, input has {cin}")));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(shape_err("conv2d", "stride must be positive".into()));
        }
        let too_large = || TensorError::KernelTooLarge { kernel: (kh, kw), input: (in_h, in_w) };
        let (out_h, pad_top) = conv_output_len(in_h, kh, stride.0, padding).ok_or_else(too_large)?;
        let (out_w, pad_left) = conv_output_len(in_w, kw, stride.1, padding).ok_or_else(too_large)?;
        let geom = ConvGeom { batch, in_h, in_w, cin, kh, kw, cout, sh: stride.0, sw: stride.1, out_h, out_w, pad_top, pad_left };
        let col = geom.im2col(self.value(x));
        let out = geom.forward(&col, self.value(filters));
        self.push(
            "conv2d",
            vec![batch, out_h, out_w, cout],
            out,
            Op::Conv2d { x: x.0, filters: filters.0, geom, col },
            &[x.0, filters.0],
        )
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() || shape.contains(&0) {
            return Err(shape_err("reshape", format!("{:?} into {shape:?}", self.shape(x))));
        }
        let out = self.value(x).to_vec();
        self.push("reshape", shape, out, Op::Reshape { x: x.0 }, &[x.0])
    }

    /// Row lookup: `out[i] = table[ids[i]]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, cols) = as_matrix("gather_rows", self.shape(table))?;
        if ids.is_empty() {
            return Err(shape_err("gather_rows", "no ids".into()));
        }
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(TensorError::Index { op: "gather_rows", index: id, limit: rows });
            }
            out.extend_from_slice(&t[id * cols..(id + 1) * cols]);
        }
        self.push("gather_rows", vec![ids.len(), cols], out, Op::GatherRows { table: table.0, ids: ids.to_vec() }, &[table.0])
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = as_matrix("slice_rows", self.shape(x))?;
        if len == 0 || start + len > rows {
            return Err(shape_err("slice_rows", format!("rows {start}..{} of {rows}", start + len)));
        }
        let out = self.value(x)[start * cols..(start + len) * cols].to_vec();
        self.push("slice_rows", vec![len, cols], out, Op::SliceRows { x: x.0, start }, &[x.0])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| shape_err("concat_rows", "no parts".into()))?;
        let (_, cols) = as_matrix("concat_rows", self.shape(*first))?;
        let mut rows = 0;
        let mut out = Vec::new();
        for p in parts {
            let (r, c) = as_matrix("concat_rows", self.shape(*p))?;
            if c != cols {
                return Err(shape_err("concat_rows", format!("width {c} vs {cols}")));
            }
            rows += r;
            out.extend_from_slice(self.value(*p));
        }
        let idx: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push("concat_rows", vec![rows, cols], out, Op::ConcatRows { parts: idx.clone() }, &idx)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| shape_err("concat_cols", "no parts".into()))?;
        let (rows, _) = as_matrix("concat_cols", self.shape(*first))?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (r, c) = as_matrix("concat_cols", self.shape(*p))?;
            if r != rows {
                return Err(shape_err("concat_cols", format!("height {r} vs {rows}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(*p)[r * w..(r + 1) * w]);
            }
        }
        let idx: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push("concat_cols", vec![rows, total], out, Op::ConcatCols { parts: idx.clone() }, &idx)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().copied().sum();
        self.push("sum", vec![1], vec![s], Op::Sum { x: x.0 }, &[x.0])
    }

    /// Mean over unmasked rows of `-log softmax(logits)[target]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (rows, classes) = as_matrix("softmax_cross_entropy", self.shape(logits))?;
        if targets.len() != rows || mask.len() != rows {
            return Err(shape_err(
                "softmax_cross_entropy",
                format!("{rows} rows, {} targets, {} mask entries", targets.len(), mask.len()),
            ));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(TensorError::EmptyMask);
        }
        let mut probs = vec![T::zero(); rows * classes];
        let mut total = T::zero();
        for (r, row) in self.value(logits).chunks(classes).enumerate() {
            if !mask[r] {
                continue;
            }
            let t = targets[r];
            if t >= classes {
                return Err(TensorError::Index { op: "softmax_cross_entropy", index: t, limit: classes });
            }
            let lse = log_sum_exp(row);
            for (p, &z) in probs[r * classes..(r + 1) * classes].iter_mut().zip(row) {
                *p = (z - lse).exp();
            }
            total += lse - row[t];
        }
        let loss = total / T::of(count as f64);
        self.push(
            "softmax_cross_entropy",
            vec![1],
            vec![loss],
            Op::SoftmaxXent { logits: logits.0, probs, targets: targets.to_vec(), mask: mask.to_vec(), count },
            &[logits.0],
        )
    }

    /// Mean over unmasked positions of the binary cross-entropy of `sigmoid(logits)`.
    pub fn sigmoid_bce(&mut self, logits: Var, targets: &[T], mask: &[bool]) -> Result<Var> {
        let n = self.value(logits).len();
        if targets.len() != n || mask.len() != n {
            return Err(shape_err("sigmoid_bce", format!("{n} logits, {} targets, {} mask entries", targets.len(), mask.len())));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(TensorError::EmptyMask);
        }
        let mut probs = vec![T::zero(); n];
        let mut total = T::zero();
        for (i, &z) in self.value(logits).iter().enumerate() {
            if !mask[i] {
                continue;
            }
            let t = targets[i];
            probs[i] = sigmoid(z);
            // max(z,0) - z·t + log(1 + e^{-|z|})
            total += z.max(T::zero()) - z * t + (-z.abs()).exp().ln_1p();
        }
        let loss = total / T::of(count as f64);
        self.push(
            "sigmoid_bce",
            vec![1],
            vec![loss],
            Op::SigmoidBce { logits: logits.0, probs, targets: targets.to_vec(), mask: mask.to_vec(), count },
            &[logits.0],
        )
    }

    /// Reverse sweep from a scalar `loss`. Gradients accumulate over every use of a value.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let shape = &self.nodes[loss.0].shape;
        if self.nodes[loss.0].value.len() != 1 {
            return Err(TensorError::NotScalar(shape.clone()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        for (idx, g) in grads.iter_mut().enumerate() {
            let n = &self.nodes[idx];
            if !(n.needs_grad && matches!(n.op, Op::Leaf)) {
                *g = None;
            } else if let Some(g) = g {
                ensure_finite("backward", g)?;
            }
        }
        Ok(Gradients { grads })
    }

    fn grad_slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], i: usize) -> Option<&'g mut Vec<T>> {
        if !self.nodes[i].needs_grad {
            return None;
        }
        let len = self.nodes[i].value.len();
        Some(grads[i].get_or_insert_with(|| vec![T::zero(); len]))
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if let Some(ga) = self.grad_slot(grads, a) {
                    // dA = dC · Bᵀ
                    T::gemm(m, n, k, g, (n as isize, 1), &self.nodes[b].value, (1, n as isize), ga);
                }
                if let Some(gb) = self.grad_slot(grads, b) {
                    // dB = Aᵀ · dC
                    T::gemm(k, m, n, &self.nodes[a].value, (1, k as isize), g, (n as isize, 1), gb);
                }
            }
            &Op::AddBias { x, bias } => {
                if let Some(gx) = self.grad_slot(grads, x) {
                    add_into(gx, g);
                }
                let cols = self.nodes[bias].value.len();
                if let Some(gb) = self.grad_slot(grads, bias) {
                    for row in g.chunks(cols) {
                        add_into(gb, row);
                    }
                }
            }
            &Op::Add { a, b } => {
                for i in [a, b] {
                    if let Some(gi) = self.grad_slot(grads, i) {
                        add_into(gi, g);
                    }
                }
            }
            &Op::Sub { a, b } => {
                if let Some(ga) = self.grad_slot(grads, a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.grad_slot(grads, b) {
                    for (d, &s) in gb.iter_mut().zip(g) {
                        *d -= s;
                    }
                }
            }
            &Op::Mul { a, b } => {
                for (dst, other) in [(a, b), (b, a)] {
                    let other_val = &self.nodes[other].value;
                    if let Some(gd) = self.grad_slot(grads, dst) {
                        for ((d, &s), &o) in gd.iter_mut().zip(g).zip(other_val) {
                            *d += s * o;
                        }
                    }
                }
            }
            &Op::Scale { x, factor } => {
                if let Some(gx) = self.grad_slot(grads, x) {
                    for (d, &s) in gx.iter_mut().zip(g) {
                        *d += s * factor;
                    }
                }
            }
            &Op::Act { x, act } => {
                if let Some(gx) = self.grad_slot(grads, x) {
                    for ((d, &s), &y) in gx.iter_mut().zip(g).zip(&node.value) {
                        *d += s * act.derivative_from_output(y);
                    }
                }
            }
            Op::Conv2d { x, filters, geom, col } => {
                if let Some(gf) = self.grad_slot(grads, *filters) {
                    geom.filter_grad(col, g, gf);
                }
                let fvals = &self.nodes[*filters].value;
                if let Some(gx) = self.grad_slot(grads, *x) {
                    geom.input_grad(fvals, g, gx);
                }
            }
            &Op::Reshape { x } => {
                if let Some(gx) = self.grad_slot(grads, x) {
                    add_into(gx, g);
                }
            }
            Op::GatherRows { table, ids } => {
                let cols = node.shape[1];
                if let Some(gt) = self.grad_slot(grads, *table) {
                    for (row, &id) in g.chunks(cols).zip(ids) {
                        add_into(&mut gt[id * cols..(id + 1) * cols], row);
                    }
                }
            }
            &Op::SliceRows { x, start } => {
                let cols = node.shape[1];
                if let Some(gx) = self.grad_slot(grads, x) {
                    add_into(&mut gx[start * cols..start * cols + g.len()], g);
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p].value.len();
                    if let Some(gp) = self.grad_slot(grads, p) {
                        add_into(gp, &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::ConcatCols { parts } => {
                let (rows, total) = (node.shape[0], node.shape[1]);
                let mut col_offset = 0;
                for &p in parts {
                    let w = self.nodes[p].shape[1];
                    if let Some(gp) = self.grad_slot(grads, p) {
                        for r in 0..rows {
                            add_into(&mut gp[r * w..(r + 1) * w], &g[r * total + col_offset..r * total + col_offset + w]);
                        }
                    }
                    col_offset += w;
                }
            }
            &Op::Sum { x } => {
                if let Some(gx) = self.grad_slot(grads, x) {
                    for d in gx.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::SoftmaxXent { logits, probs, targets, mask, count } => {
                let classes = self.nodes[*logits].shape[1];
                let scale = g[0] / T::of(*count as f64);
                if let Some(gl) = self.grad_slot(grads, *logits) {
                    for (r, (&m, &t)) in mask.iter().zip(targets).enumerate() {
                        if !m {
                            continue;
                        }
                        let row = &mut gl[r * classes..(r + 1) * classes];
                        for (d, &p) in row.iter_mut().zip(&probs[r * classes..(r + 1) * classes]) {
                            *d += scale * p;
                        }
                        row[t] -= scale;
                    }
                }
            }
            Op::SigmoidBce { logits, probs, targets, mask, count } => {
                let scale = g[0] / T::of(*count as f64);
                if let Some(gl) = self.grad_slot(grads, *logits) {
                    for i in 0..gl.len() {
                        if mask[i] {
                            gl[i] += scale * (probs[i] - targets[i]);
                        }
                    }
                }
            }
        }
    }
}

/// Max-shifted, numerically stable `ln Σ exp(row)`.
pub fn log_sum_exp<T: Real>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let s: T = row.iter().map(|&z| (z - max).exp()).sum();
    max + s.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn dense_identity_and_hand_product() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t(&[1, 2], &[1.0, 2.0]));
        let w = tape.leaf(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.leaf(&t(&[2], &[0.0, 0.0]));
        let y = tape.dense(x, w, b).unwrap();
        assert_eq!(tape.value(y), &[1.0, 2.0]);

        let x = tape.leaf(&t(&[1, 2], &[1.0, 0.0]));
        let w = tape.leaf(&t(&[2, 2], &[2.0, 3.0, 5.0, 7.0]));
        let b = tape.leaf(&t(&[2], &[1.0, 1.0]));
        let y = tape.dense(x, w, b).unwrap();
        assert_eq!(tape.shape(y), &[1, 2]);
        assert_eq!(tape.value(y), &[3.0, 4.0]);
    }

    #[test]
    fn dense_bias_gradient_is_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t(&[3, 2], &[1.0, -2.0, 0.5, 4.0, 3.0, 1.0]));
        let w = tape.leaf(&t(&[2, 4], &[0.1; 8]).trainable());
        let b = tape.leaf(&t(&[4], &[0.0; 4]).trainable());
        let y = tape.dense(x, w, b).unwrap();
        let s = tape.sum(y).unwrap();
        let grads = tape.backward(s).unwrap();
        // each output column receives one unit per batch row
        assert_eq!(grads.get(b).unwrap(), &[3.0; 4]);

        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t(&[1, 2], &[1.0, 2.0]));
        let w = tape.leaf(&t(&[2, 3], &[0.1; 6]));
        let b = tape.leaf(&t(&[3], &[0.0; 3]).trainable());
        let y = tape.dense(x, w, b).unwrap();
        let s = tape.sum(y).unwrap();
        assert_eq!(tape.backward(s).unwrap().get(b).unwrap(), &[1.0; 3]);
    }

    #[test]
    fn dense_rejects_mismatched_inner_dims() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t(&[1, 3], &[1.0; 3]));
        let w = tape.leaf(&t(&[2, 2], &[1.0; 4]));
        assert!(matches!(tape.matmul(x, w), Err(TensorError::Shape { .. })));
        let w = tape.leaf(&t(&[3, 2], &[1.0; 6]));
        let b = tape.leaf(&t(&[3], &[1.0; 3]));
        assert!(matches!(tape.dense(x, w, b), Err(TensorError::Shape { .. })));
    }

    #[test]
    fn conv_identity_and_all_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t(&[1, 1, 1, 1], &[3.5]));
        let f = tape.leaf(&t(&[1, 1, 1, 1], &[1.0]));
        let y = tape.conv2d(x, f, (1, 1), Padding::Valid).unwrap();
        assert_eq!(tape.value(y), &[3.5]);

        let x = tape.leaf(&t(&[1, 3, 3, 1], &[1.0; 9]));
        let f = tape.leaf(&t(&[2, 2, 1, 1], &[1.0; 4]));
        let y = tape.conv2d(x, f, (1, 1), Padding::Valid).unwrap();
        assert_eq!(tape.shape(y), &[1, 2, 2, 1]);
        assert_eq!(tape.value(y), &[4.0; 4]);
    }

    #[test]
    fn conv_same_padding_lm_layer_shape() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(&Tensor::zeros(&[1, 36, 36, 1]));
        let f = tape.leaf(&Tensor::zeros(&[7, 7, 1, 32]));
        let y = tape.conv2d(x, f, (2, 2), Padding::Same).unwrap();
        assert_eq!(tape.shape(y), &[1, 18, 18, 32]);
    }

    #[test]
    fn conv_kernel_larger_than_input_errors() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t(&[1, 2, 2, 1], &[1.0; 4]));
        let f = tape.leaf(&t(&[3, 3, 1, 1], &[1.0; 9]));
        assert!(matches!(
            tape.conv2d(x, f, (1, 1), Padding::Valid),
            Err(TensorError::KernelTooLarge { .. })
        ));
    }

    #[test]
    fn activations_match_definitions() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t(&[3], &[-1.0, 0.0, 2.0]));
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r), &[0.0, 0.0, 2.0]);
        let z = tape.leaf(&t(&[1], &[0.0]));
        let s = tape.sigmoid(z).unwrap();
        assert_eq!(tape.value(s), &[0.5]);
        let one = tape.leaf(&t(&[1], &[1.0]));
        let th = tape.tanh(one).unwrap();
        assert!((tape.value(th)[0] - 0.761_594_155_955_764_9).abs() < 1e-15);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t(&[3], &[-1.0, 0.0, 2.0]).trainable());
        let r = tape.relu(x).unwrap();
        let s = tape.sum(r).unwrap();
        assert_eq!(tape.backward(s).unwrap().get(x).unwrap(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn cross_entropy_closed_forms() {
        let mut tape = Tape::<f64>::new();
        let v = 7;
        let logits = tape.leaf(&t(&[2, v], &[0.25; 14]));
        let l = tape.softmax_cross_entropy(logits, &[3, 6], &[true, true]).unwrap();
        assert!((tape.value(l)[0] - (v as f64).ln()).abs() < 1e-12);

        let logits = tape.leaf(&t(&[1, 2], &[1.0, 0.0]));
        let l = tape.softmax_cross_entropy(logits, &[0], &[true]).unwrap();
        let expected = (1.0 + (-1.0f64).exp()).ln();
        assert!((tape.value(l)[0] - expected).abs() < 1e-12);
        assert!((expected - 0.31326).abs() < 1e-5);
    }

    #[test]
    fn cross_entropy_errors() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.leaf(&t(&[2, 3], &[0.0; 6]));
        assert_eq!(
            tape.softmax_cross_entropy(logits, &[0, 1], &[false, false]).unwrap_err(),
            TensorError::EmptyMask
        );
        assert!(matches!(
            tape.softmax_cross_entropy(logits, &[0, 3], &[true, true]),
            Err(TensorError::Index { index: 3, .. })
        ));
    }

    #[test]
    fn masked_rows_do_not_contribute() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.leaf(&t(&[2, 2], &[1.0, 0.0, 50.0, -50.0]).trainable());
        let l = tape.softmax_cross_entropy(logits, &[0, 1], &[true, false]).unwrap();
        assert!((tape.value(l)[0] - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-12);
        let g = tape.backward(l).unwrap();
        assert_eq!(&g.get(logits).unwrap()[2..], &[0.0, 0.0]);
    }

    #[test]
    fn backward_polynomials_and_accumulation() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t(&[3], &[1.0, -2.0, 0.5]).trainable());
        let s = tape.sum(x).unwrap();
        assert_eq!(tape.backward(s).unwrap().get(x).unwrap(), &[1.0; 3]);

        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        assert_eq!(tape.backward(s).unwrap().get(x).unwrap(), &[2.0, -4.0, 1.0]);

        // x used on two paths: sum(x) + sum(3x)
        let three = tape.scale(x, 3.0).unwrap();
        let both = tape.add(x, three).unwrap();
        let s = tape.sum(both).unwrap();
        assert_eq!(tape.backward(s).unwrap().get(x).unwrap(), &[4.0; 3]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t(&[2], &[1.0, 2.0]).trainable());
        assert_eq!(tape.backward(x).unwrap_err(), TensorError::NotScalar(vec![2]));
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t(&[1], &[1e300]));
        assert_eq!(tape.scale(x, 1e300).unwrap_err(), TensorError::NonFinite { op: "scale" });
    }

    #[test]
    fn bce_matches_closed_form() {
        let mut tape = Tape::<f64>::new();
        let z = tape.leaf(&t(&[3], &[0.0, 2.0, -1.0]));
        let l = tape.sigmoid_bce(z, &[1.0, 0.0, 1.0], &[true, true, false]).unwrap();
        let expected = (2.0f64.ln() + (1.0 + 2.0f64.exp()).ln()) / 2.0;
        assert!((tape.value(l)[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(&t(&[2, 1], &[1.0, 2.0]));
        let b = tape.leaf(&t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let c = tape.concat_cols(&[a, b]).unwrap();
        assert_eq!(tape.value(c), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let r = tape.concat_rows(&[b, b]).unwrap();
        let s = tape.slice_rows(r, 2, 2).unwrap();
        assert_eq!(tape.value(s), tape.value(b));
    }

    #[test]
    fn gather_gradient_is_sparse() {
        let mut tape = Tape::<f64>::new();
        let table = tape.leaf(&t(&[10, 2], &[0.5; 20]).trainable());
        let rows = tape.gather_rows(table, &[7, 7]).unwrap();
        let s = tape.sum(rows).unwrap();
        let g = tape.backward(s).unwrap();
        let g = g.get(table).unwrap();
        for (r, row) in g.chunks(2).enumerate() {
            let want = if r == 7 { 2.0 } else { 0.0 };
            assert_eq!(row, &[want, want]);
        }
        assert!(matches!(tape.gather_rows(table, &[10]), Err(TensorError::Index { .. })));
    }
}
