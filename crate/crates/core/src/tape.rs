//! Reverse-mode differentiation over matrix-valued nodes.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters enter the
//! tape by copy from a [`ParameterStore`]; [`Tape::backward`] consumes the tape
//! and accumulates `∂loss/∂param` into the store's gradient buffers.
//!
//! Only nodes that transitively depend on a parameter take part in the backward
//! sweep, so constants (frozen weights, masks, supplied forests) cost nothing.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParameterStore};
use crate::tensor::{self, sigmoid, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Tensor),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    RowSoftmax(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    Lookup(Var, Vec<Option<usize>>),
    MaxRows(Var, Vec<usize>),
    CrossEntropy(Var, usize, Vec<f64>),
    MaskedBce(Var, Tensor, Tensor, f64),
    MaskedSquaredError(Var, Tensor, Tensor, f64),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn dims(&self, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims2()
    }

    /// A value that gradients never flow into.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Binds a store parameter; its gradient is accumulated on backward.
    pub fn param(&mut self, store: &ParameterStore, id: ParamId) -> Var {
        let mut value = store.get(id).clone();
        value.zero_grad();
        let value = Tensor::matrix(value.rows(), value.cols(), value.into_values());
        self.push(value, Op::Param(id), true)
    }

    pub fn param_by_name(&mut self, store: &ParameterStore, name: &str) -> Result<Var> {
        Ok(self.param(store, store.id(name)?))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = tensor::matmul(self.value(a), self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = tensor::matmul_nt(self.value(a), self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::MatMulNt(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::shape(format!("add {:?} + {:?}", x.shape(), y.shape())));
        }
        let vals = x.values().iter().zip(y.values()).map(|(p, q)| p + q).collect();
        let v = Tensor::new(x.shape().to_vec(), vals)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Add(a, b), ng))
    }

    /// Adds a `1 x c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.dims(a)?;
        let (rr, rc) = self.dims(row)?;
        if rr != 1 || rc != c {
            return Err(Error::shape(format!("add_row {r}x{c} + {rr}x{rc}")));
        }
        let x = self.value(a);
        let b = self.value(row).values();
        let mut vals = x.values().to_vec();
        for i in 0..r {
            for j in 0..c {
                vals[i * c + j] += b[j];
            }
        }
        let ng = self.needs(a) || self.needs(row);
        Ok(self.push(Tensor::matrix(r, c, vals), Op::AddRow(a, row), ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::shape(format!("mul {:?} * {:?}", x.shape(), y.shape())));
        }
        let vals = x.values().iter().zip(y.values()).map(|(p, q)| p * q).collect();
        let v = Tensor::new(x.shape().to_vec(), vals)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Mul(a, b), ng))
    }

    /// Elementwise product with a constant tensor.
    pub fn mul_const(&mut self, a: Var, c: Tensor) -> Result<Var> {
        let x = self.value(a);
        if x.shape() != c.shape() {
            return Err(Error::shape(format!("mul_const {:?} * {:?}", x.shape(), c.shape())));
        }
        let vals = x.values().iter().zip(c.values()).map(|(p, q)| p * q).collect();
        let v = Tensor::new(x.shape().to_vec(), vals)?;
        let ng = self.needs(a);
        Ok(self.push(v, Op::MulConst(a, c), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        let ng = self.needs(a);
        self.push(v, Op::Scale(a, s), ng)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x + s);
        let ng = self.needs(a);
        self.push(v, Op::AddScalar(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        let ng = self.needs(a);
        self.push(v, Op::Sigmoid(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        let ng = self.needs(a);
        self.push(v, Op::Tanh(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        let ng = self.needs(a);
        self.push(v, Op::Relu(a), ng)
    }

    pub fn row_softmax(&mut self, a: Var) -> Result<Var> {
        let v = tensor::row_softmax(self.value(a))?;
        let ng = self.needs(a);
        Ok(self.push(v, Op::RowSoftmax(a), ng))
    }

    /// Concatenates along the feature (column) axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::shape("concat of nothing"))?;
        let r = self.dims(first)?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.dims(p)?;
            if pr != r {
                return Err(Error::shape(format!("concat_cols row mismatch {pr} vs {r}")));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut vals = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                vals.extend_from_slice(self.value(p).row(i));
            }
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Tensor::matrix(r, total, vals), Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Stacks along the row axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::shape("concat of nothing"))?;
        let c = self.dims(first)?.1;
        let mut rows = 0;
        let mut vals = Vec::new();
        for &p in parts {
            let (pr, pc) = self.dims(p)?;
            if pc != c {
                return Err(Error::shape(format!("concat_rows column mismatch {pc} vs {c}")));
            }
            rows += pr;
            vals.extend_from_slice(self.value(p).values());
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Tensor::matrix(rows, c, vals), Op::ConcatRows(parts.to_vec()), ng))
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(a)?;
        if len == 0 || start + len > c {
            return Err(Error::shape(format!("slice_cols {start}+{len} of {c}")));
        }
        let x = self.value(a);
        let mut vals = Vec::with_capacity(r * len);
        for i in 0..r {
            vals.extend_from_slice(&x.row(i)[start..start + len]);
        }
        let ng = self.needs(a);
        Ok(self.push(Tensor::matrix(r, len, vals), Op::SliceCols(a, start), ng))
    }

    /// Selects rows by index (repeats allowed); the embedding lookup.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(a)?;
        if idx.is_empty() {
            return Err(Error::shape("gather_rows with no indices"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::Index(format!("row {bad} out of range for {r} rows")));
        }
        let x = self.value(a);
        let mut vals = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            vals.extend_from_slice(x.row(i));
        }
        let ng = self.needs(a);
        Ok(self.push(Tensor::matrix(idx.len(), c, vals), Op::GatherRows(a, idx.to_vec()), ng))
    }

    /// Builds an `n x n` matrix whose cell is `table[k]` for `Some(k)` or `fill`
    /// for `None`. `table` is a `t x 1` column of scalars.
    pub fn lookup(&mut self, table: Var, n: usize, cells: Vec<Option<usize>>, fill: f64) -> Result<Var> {
        let (t, tc) = self.dims(table)?;
        if tc != 1 {
            return Err(Error::shape(format!("lookup table must be t x 1, got {t}x{tc}")));
        }
        if cells.len() != n * n {
            return Err(Error::shape(format!("lookup needs {} cells, got {}", n * n, cells.len())));
        }
        let tv = self.value(table).values();
        let mut vals = Vec::with_capacity(n * n);
        for cell in &cells {
            vals.push(match cell {
                Some(k) if *k < t => tv[*k],
                Some(k) => return Err(Error::Vocab(format!("type id {k} out of range for {t} types"))),
                None => fill,
            });
        }
        let ng = self.needs(table);
        Ok(self.push(Tensor::matrix(n, n, vals), Op::Lookup(table, cells), ng))
    }

    /// Column-wise maximum over the listed rows, giving a `1 x c` row. Ties go
    /// to the lowest listed row.
    pub fn max_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(a)?;
        if rows.is_empty() {
            return Err(Error::shape("max over zero rows"));
        }
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::Index(format!("row {bad} out of range for {r} rows")));
        }
        let x = self.value(a);
        let mut arg = vec![rows[0]; c];
        let mut vals = x.row(rows[0]).to_vec();
        for &i in &rows[1..] {
            for j in 0..c {
                if x.get(i, j) > vals[j] {
                    vals[j] = x.get(i, j);
                    arg[j] = i;
                }
            }
        }
        let ng = self.needs(a);
        Ok(self.push(Tensor::matrix(1, c, vals), Op::MaxRows(a, arg), ng))
    }

    /// Scalar `-log softmax(logits)[gold]` of a `1 x m` logit row.
    pub fn cross_entropy(&mut self, logits: Var, gold: usize) -> Result<Var> {
        let loss = tensor::cross_entropy(self.value(logits), gold)?;
        let probs = tensor::row_softmax(self.value(logits))?.into_values();
        let ng = self.needs(logits);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy(logits, gold, probs), ng))
    }

    /// Mean binary cross-entropy between `sigmoid(logits)` and `target` over
    /// cells where `mask` is nonzero.
    pub fn masked_bce_with_logits(&mut self, logits: Var, target: Tensor, mask: Tensor) -> Result<Var> {
        let x = self.value(logits);
        if x.shape() != target.shape() || x.shape() != mask.shape() {
            return Err(Error::shape("masked_bce shape mismatch"));
        }
        let count: f64 = mask.values().iter().filter(|&&m| m != 0.0).count() as f64;
        if count == 0.0 {
            return Err(Error::shape("masked_bce with an empty mask"));
        }
        let mut total = 0.0;
        for ((&s, &y), &m) in x.values().iter().zip(target.values()).zip(mask.values()) {
            if m != 0.0 {
                // max(s,0) - s*y + log(1 + exp(-|s|))
                total += s.max(0.0) - s * y + (-s.abs()).exp().ln_1p();
            }
        }
        let ng = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(total / count),
            Op::MaskedBce(logits, target, mask, count),
            ng,
        ))
    }

    /// Mean squared error against `target` over cells where `mask` is nonzero.
    pub fn masked_squared_error(&mut self, a: Var, target: Tensor, mask: Tensor) -> Result<Var> {
        let x = self.value(a);
        if x.shape() != target.shape() || x.shape() != mask.shape() {
            return Err(Error::shape("masked_squared_error shape mismatch"));
        }
        let count: f64 = mask.values().iter().filter(|&&m| m != 0.0).count() as f64;
        if count == 0.0 {
            return Err(Error::shape("masked_squared_error with an empty mask"));
        }
        let total: f64 = x
            .values()
            .iter()
            .zip(target.values())
            .zip(mask.values())
            .filter(|(_, &m)| m != 0.0)
            .map(|((p, q), _)| (p - q) * (p - q))
            .sum();
        let ng = self.needs(a);
        Ok(self.push(
            Tensor::scalar(total / count),
            Op::MaskedSquaredError(a, target, mask, count),
            ng,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).values().iter().sum();
        let ng = self.needs(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    /// Propagates `∂loss/∂·` back through the tape and adds the parameter
    /// gradients into `store`. Gradients accumulate across calls until the
    /// store is zeroed.
    pub fn backward(self, loss: Var, store: &mut ParameterStore) -> Result<()> {
        let (r, c) = self.value(loss).dims2()?;
        if r != 1 || c != 1 {
            return Err(Error::shape(format!("backward needs a scalar loss, got {r}x{c}")));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads, store)?;
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, delta: impl FnOnce(&mut [f64])) {
        if !self.needs(v) {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
        delta(slot);
    }

    fn propagate(
        &self,
        node: &Node,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        store: &mut ParameterStore,
    ) -> Result<()> {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => {
                let t = store.get_mut(*id);
                let buf = t
                    .grad_mut()
                    .ok_or_else(|| Error::shape("parameter without gradient buffer"))?;
                buf.iter_mut().zip(g).for_each(|(b, d)| *b += d);
            }
            Op::MatMul(a, b) => {
                let gt = Tensor::matrix(out.rows(), out.cols(), g.to_vec());
                if self.needs(*a) {
                    let da = tensor::matmul_nt(&gt, self.value(*b))?;
                    self.accumulate(grads, *a, |s| add_into(s, da.values()));
                }
                if self.needs(*b) {
                    let db = tensor::matmul_tn(self.value(*a), &gt)?;
                    self.accumulate(grads, *b, |s| add_into(s, db.values()));
                }
            }
            Op::MatMulNt(a, b) => {
                // out = a bᵀ: da = g b, db = gᵀ a
                let gt = Tensor::matrix(out.rows(), out.cols(), g.to_vec());
                if self.needs(*a) {
                    let da = tensor::matmul(&gt, self.value(*b))?;
                    self.accumulate(grads, *a, |s| add_into(s, da.values()));
                }
                if self.needs(*b) {
                    let db = tensor::matmul_tn(&gt, self.value(*a))?;
                    self.accumulate(grads, *b, |s| add_into(s, db.values()));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |s| add_into(s, g));
                self.accumulate(grads, *b, |s| add_into(s, g));
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, |s| add_into(s, g));
                let c = out.cols();
                self.accumulate(grads, *row, |s| {
                    for chunk in g.chunks(c) {
                        add_into(s, chunk);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).values(), self.value(*b).values());
                self.accumulate(grads, *a, |s| {
                    for ((si, gi), bi) in s.iter_mut().zip(g).zip(bv) {
                        *si += gi * bi;
                    }
                });
                self.accumulate(grads, *b, |s| {
                    for ((si, gi), ai) in s.iter_mut().zip(g).zip(av) {
                        *si += gi * ai;
                    }
                });
            }
            Op::MulConst(a, c) => {
                self.accumulate(grads, *a, |s| {
                    for ((si, gi), ci) in s.iter_mut().zip(g).zip(c.values()) {
                        *si += gi * ci;
                    }
                });
            }
            Op::Scale(a, k) => {
                self.accumulate(grads, *a, |s| {
                    for (si, gi) in s.iter_mut().zip(g) {
                        *si += gi * k;
                    }
                });
            }
            Op::AddScalar(a) => self.accumulate(grads, *a, |s| add_into(s, g)),
            Op::Sigmoid(a) => {
                self.accumulate(grads, *a, |s| {
                    for ((si, gi), y) in s.iter_mut().zip(g).zip(out.values()) {
                        *si += gi * y * (1.0 - y);
                    }
                });
            }
            Op::Tanh(a) => {
                self.accumulate(grads, *a, |s| {
                    for ((si, gi), y) in s.iter_mut().zip(g).zip(out.values()) {
                        *si += gi * (1.0 - y * y);
                    }
                });
            }
            Op::Relu(a) => {
                let x = self.value(*a).values();
                self.accumulate(grads, *a, |s| {
                    for ((si, gi), xi) in s.iter_mut().zip(g).zip(x) {
                        if *xi > 0.0 {
                            *si += gi;
                        }
                    }
                });
            }
            Op::RowSoftmax(a) => {
                let c = out.cols();
                self.accumulate(grads, *a, |s| {
                    for (r, (yrow, grow)) in out.values().chunks(c).zip(g.chunks(c)).enumerate() {
                        let dot: f64 = yrow.iter().zip(grow).map(|(y, gi)| y * gi).sum();
                        for j in 0..c {
                            s[r * c + j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut offset = 0;
                for &p in parts {
                    let pc = self.value(p).cols();
                    self.accumulate(grads, p, |s| {
                        for (r, grow) in g.chunks(total).enumerate() {
                            add_into(&mut s[r * pc..(r + 1) * pc], &grow[offset..offset + pc]);
                        }
                    });
                    offset += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    self.accumulate(grads, p, |s| add_into(s, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::SliceCols(a, start) => {
                let (c, len) = (self.value(*a).cols(), out.cols());
                self.accumulate(grads, *a, |s| {
                    for (r, grow) in g.chunks(len).enumerate() {
                        add_into(&mut s[r * c + start..r * c + start + len], grow);
                    }
                });
            }
            Op::GatherRows(a, idx) => {
                let c = out.cols();
                self.accumulate(grads, *a, |s| {
                    for (grow, &i) in g.chunks(c).zip(idx) {
                        add_into(&mut s[i * c..(i + 1) * c], grow);
                    }
                });
            }
            Op::Lookup(table, cells) => {
                self.accumulate(grads, *table, |s| {
                    for (gi, cell) in g.iter().zip(cells) {
                        if let Some(k) = cell {
                            s[*k] += gi;
                        }
                    }
                });
            }
            Op::MaxRows(a, arg) => {
                let c = self.value(*a).cols();
                self.accumulate(grads, *a, |s| {
                    for (j, (&i, gi)) in arg.iter().zip(g).enumerate() {
                        s[i * c + j] += gi;
                    }
                });
            }
            Op::CrossEntropy(a, gold, probs) => {
                self.accumulate(grads, *a, |s| {
                    for (j, (si, p)) in s.iter_mut().zip(probs).enumerate() {
                        let y = if j == *gold { 1.0 } else { 0.0 };
                        *si += g[0] * (p - y);
                    }
                });
            }
            Op::MaskedBce(a, target, mask, count) => {
                let x = self.value(*a).values();
                self.accumulate(grads, *a, |s| {
                    for (i, si) in s.iter_mut().enumerate() {
                        if mask.values()[i] != 0.0 {
                            *si += g[0] * (sigmoid(x[i]) - target.values()[i]) / count;
                        }
                    }
                });
            }
            Op::MaskedSquaredError(a, target, mask, count) => {
                let x = self.value(*a).values();
                self.accumulate(grads, *a, |s| {
                    for (i, si) in s.iter_mut().enumerate() {
                        if mask.values()[i] != 0.0 {
                            *si += g[0] * 2.0 * (x[i] - target.values()[i]) / count;
                        }
                    }
                });
            }
            Op::Sum(a) => {
                self.accumulate(grads, *a, |s| s.iter_mut().for_each(|si| *si += g[0]));
            }
        }
        Ok(())
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
