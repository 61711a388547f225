//! Dense 2-D tensors with reverse-mode automatic differentiation.
//!
//! A `Tape` is an append-only arena of nodes; recording order is the
//! topological order, and `backward` walks it once in reverse. Tensors are
//! row-major `rows x cols` matrices (scalars are 1x1). Gradients flow only
//! into nodes flagged `requires_grad`, so frozen parameters cost nothing
//! on the backward pass.

use crate::error::{Result, SlmError};
use crate::scalar::Scalar;

/// Handle to a node on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

enum Op<S: Scalar> {
    Leaf,
    MatMul(TensorId, TensorId),
    Transpose(TensorId),
    Add(TensorId, TensorId),
    AddRow(TensorId, TensorId),
    Scale(TensorId, S),
    Gelu(TensorId),
    SoftmaxRows(TensorId),
    LayerNorm {
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        eps: S,
    },
    Gather {
        table: TensorId,
        ids: Vec<usize>,
    },
    ConcatRows(TensorId, TensorId),
    SliceCols {
        x: TensorId,
        start: usize,
    },
    ConcatCols(Vec<TensorId>),
    CrossEntropy {
        logits: TensorId,
        targets: Vec<u32>,
        pad_id: u32,
        /// Softmax rows saved at forward time for the backward pass.
        probs: Vec<S>,
        /// Non-pad positions contributing to the mean.
        count: usize,
    },
    MeanScalars(Vec<TensorId>),
}

struct Node<S: Scalar> {
    data: Vec<S>,
    rows: usize,
    cols: usize,
    op: Op<S>,
    requires_grad: bool,
}

pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Vec<S>>>,
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044715;

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn value(&self, id: TensorId) -> &[S] {
        &self.nodes[id.0].data
    }

    pub fn dims(&self, id: TensorId) -> (usize, usize) {
        let n = &self.nodes[id.0];
        (n.rows, n.cols)
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Gradient of the last `backward` loss w.r.t. `id`, if it was reached.
    pub fn grad(&self, id: TensorId) -> Option<&[S]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, data: Vec<S>, rows: usize, cols: usize, op: Op<S>, rg: bool) -> TensorId {
        debug_assert_eq!(data.len(), rows * cols);
        self.nodes.push(Node {
            data,
            rows,
            cols,
            op,
            requires_grad: rg,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn shape_err(&self, op: &str, ids: &[TensorId], detail: &str) -> SlmError {
        let shapes: Vec<String> = ids
            .iter()
            .map(|&id| {
                let (r, c) = self.dims(id);
                format!("{r}x{c}")
            })
            .collect();
        SlmError::Shape(format!("{op}({}): {detail}", shapes.join(", ")))
    }

    // ── node constructors ──

    pub fn leaf(&mut self, rows: usize, cols: usize, data: Vec<S>, requires_grad: bool) -> Result<TensorId> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(SlmError::Shape(format!(
                "leaf: {} values for a {rows}x{cols} tensor",
                data.len()
            )));
        }
        Ok(self.push(data, rows, cols, Op::Leaf, requires_grad))
    }

    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<S>) -> Result<TensorId> {
        self.leaf(rows, cols, data, false)
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(self.shape_err("matmul", &[a, b], "inner extents differ"));
        }
        let mut out = vec![S::ZERO; m * n];
        matmul_acc(&self.nodes[a.0].data, &self.nodes[b.0].data, m, k, n, &mut out);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(out, m, n, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        let (m, n) = self.dims(a);
        let src = &self.nodes[a.0].data;
        let mut out = vec![S::ZERO; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.requires_grad(a);
        Ok(self.push(out, n, m, Op::Transpose(a), rg))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.dims(a) != self.dims(b) {
            return Err(self.shape_err("add", &[a, b], "shapes differ"));
        }
        let (m, n) = self.dims(a);
        let out: Vec<S> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| x + y)
            .collect();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(out, m, n, Op::Add(a, b), rg))
    }

    /// Broadcast-add a 1xN row (a bias) onto every row of `a`.
    pub fn add_row(&mut self, a: TensorId, row: TensorId) -> Result<TensorId> {
        let (m, n) = self.dims(a);
        if self.dims(row) != (1, n) {
            return Err(self.shape_err("add_row", &[a, row], "row must be 1x cols"));
        }
        let mut out = Vec::with_capacity(m * n);
        let rv = &self.nodes[row.0].data;
        for i in 0..m {
            let ar = &self.nodes[a.0].data[i * n..(i + 1) * n];
            out.extend(ar.iter().zip(rv).map(|(&x, &y)| x + y));
        }
        let rg = self.requires_grad(a) || self.requires_grad(row);
        Ok(self.push(out, m, n, Op::AddRow(a, row), rg))
    }

    pub fn scale(&mut self, a: TensorId, factor: f64) -> Result<TensorId> {
        let (m, n) = self.dims(a);
        let c = S::from_f64(factor);
        let out: Vec<S> = self.nodes[a.0].data.iter().map(|&x| x * c).collect();
        let rg = self.requires_grad(a);
        Ok(self.push(out, m, n, Op::Scale(a, c), rg))
    }

    /// GELU with the tanh approximation. Chosen over exact erf so the
    /// derivative stays cheap and finite-difference friendly.
    pub fn gelu(&mut self, a: TensorId) -> Result<TensorId> {
        let (m, n) = self.dims(a);
        let k = S::from_f64(GELU_K);
        let c = S::from_f64(GELU_C);
        let half = S::from_f64(0.5);
        let out: Vec<S> = self.nodes[a.0]
            .data
            .iter()
            .map(|&x| {
                let u = k * (x + c * x * x * x);
                half * x * (S::ONE + u.tanh())
            })
            .collect();
        let rg = self.requires_grad(a);
        Ok(self.push(out, m, n, Op::Gelu(a), rg))
    }

    pub fn softmax_rows(&mut self, a: TensorId) -> Result<TensorId> {
        let (m, n) = self.dims(a);
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let row = &self.nodes[a.0].data[i * n..(i + 1) * n];
            let mut mx = row[0];
            for &x in row {
                mx = mx.maximum(x);
            }
            let mut sum = S::ZERO;
            let base = out.len();
            for &x in row {
                let e = (x - mx).exp();
                out.push(e);
                sum += e;
            }
            for v in &mut out[base..] {
                *v = *v / sum;
            }
        }
        let rg = self.requires_grad(a);
        Ok(self.push(out, m, n, Op::SoftmaxRows(a), rg))
    }

    /// Per-row normalization to zero mean / unit variance, then `gain` and
    /// `bias` (each 1xN) applied elementwise.
    pub fn layer_norm(&mut self, x: TensorId, gain: TensorId, bias: TensorId, eps: f64) -> Result<TensorId> {
        let (m, n) = self.dims(x);
        if self.dims(gain) != (1, n) || self.dims(bias) != (1, n) {
            return Err(self.shape_err("layer_norm", &[x, gain, bias], "gain/bias must be 1x cols"));
        }
        if !(eps > 0.0) {
            return Err(SlmError::Shape(format!("layer_norm: eps {eps} must be positive")));
        }
        let e = S::from_f64(eps);
        let mut out = Vec::with_capacity(m * n);
        let g = &self.nodes[gain.0].data;
        let b = &self.nodes[bias.0].data;
        for i in 0..m {
            let row = &self.nodes[x.0].data[i * n..(i + 1) * n];
            let (mean, var) = row_moments(row);
            let inv = S::ONE / (var + e).sqrt();
            for j in 0..n {
                out.push((row[j] - mean) * inv * g[j] + b[j]);
            }
        }
        let rg = self.requires_grad(x) || self.requires_grad(gain) || self.requires_grad(bias);
        Ok(self.push(out, m, n, Op::LayerNorm { x, gain, bias, eps: e }, rg))
    }

    /// Select rows of `table` by index: embedding lookup, position lookup,
    /// and frame subsampling are all this op.
    pub fn gather(&mut self, table: TensorId, ids: &[usize]) -> Result<TensorId> {
        let (rows, n) = self.dims(table);
        if ids.is_empty() {
            return Err(SlmError::Empty("gather: no indices".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(SlmError::Index(format!(
                "gather: index {bad} out of range for {rows} rows"
            )));
        }
        let mut out = Vec::with_capacity(ids.len() * n);
        for &i in ids {
            out.extend_from_slice(&self.nodes[table.0].data[i * n..(i + 1) * n]);
        }
        let rg = self.requires_grad(table);
        Ok(self.push(
            out,
            ids.len(),
            n,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Stack `a` on top of `b`.
    pub fn concat_rows(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ma, n) = self.dims(a);
        let (mb, nb) = self.dims(b);
        if n != nb {
            return Err(self.shape_err("concat_rows", &[a, b], "column counts differ"));
        }
        let mut out = Vec::with_capacity((ma + mb) * n);
        out.extend_from_slice(&self.nodes[a.0].data);
        out.extend_from_slice(&self.nodes[b.0].data);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(out, ma + mb, n, Op::ConcatRows(a, b), rg))
    }

    pub fn slice_cols(&mut self, x: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let (m, n) = self.dims(x);
        if len == 0 || start + len > n {
            return Err(SlmError::Shape(format!(
                "slice_cols: [{start}, {start}+{len}) out of {n} columns"
            )));
        }
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            let row = &self.nodes[x.0].data[i * n..(i + 1) * n];
            out.extend_from_slice(&row[start..start + len]);
        }
        let rg = self.requires_grad(x);
        Ok(self.push(out, m, len, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(SlmError::Empty("concat_cols: no parts".into()));
        }
        let (m, _) = self.dims(parts[0]);
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.dims(p);
            if r != m {
                return Err(self.shape_err("concat_cols", parts, "row counts differ"));
            }
            total += c;
        }
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                let (_, c) = self.dims(p);
                out.extend_from_slice(&self.nodes[p.0].data[i * c..(i + 1) * c]);
            }
        }
        let rg = parts.iter().any(|&p| self.requires_grad(p));
        Ok(self.push(out, m, total, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Mean negative log-softmax probability of each target over the
    /// positions whose target is not `pad_id`.
    pub fn cross_entropy(&mut self, logits: TensorId, targets: &[u32], pad_id: u32) -> Result<TensorId> {
        let (t, v) = self.dims(logits);
        if targets.len() != t {
            return Err(SlmError::Shape(format!(
                "cross_entropy: {} targets for {t} logit rows",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&id| id != pad_id && id as usize >= v) {
            return Err(SlmError::Index(format!(
                "cross_entropy: target {bad} out of vocabulary range {v}"
            )));
        }
        let mut probs = Vec::with_capacity(t * v);
        let mut total = S::ZERO;
        let mut count = 0usize;
        for i in 0..t {
            let row = &self.nodes[logits.0].data[i * v..(i + 1) * v];
            let mut mx = row[0];
            for &x in row {
                mx = mx.maximum(x);
            }
            let mut sum = S::ZERO;
            let base = probs.len();
            for &x in row {
                let e = (x - mx).exp();
                probs.push(e);
                sum += e;
            }
            for p in &mut probs[base..] {
                *p = *p / sum;
            }
            if targets[i] != pad_id {
                // -log softmax = log-sum-exp - logit[target]
                total += mx + sum.ln() - row[targets[i] as usize];
                count += 1;
            }
        }
        if count == 0 {
            return Err(SlmError::Empty("cross_entropy: every position is padding".into()));
        }
        let loss = total / S::from_f64(count as f64);
        let rg = self.requires_grad(logits);
        Ok(self.push(
            vec![loss],
            1,
            1,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                pad_id,
                probs,
                count,
            },
            rg,
        ))
    }

    /// Mean of 1x1 tensors; the batch loss.
    pub fn mean_scalars(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(SlmError::Empty("mean_scalars: no parts".into()));
        }
        let mut total = S::ZERO;
        for &p in parts {
            if self.dims(p) != (1, 1) {
                return Err(self.shape_err("mean_scalars", parts, "every part must be 1x1"));
            }
            total += self.nodes[p.0].data[0];
        }
        let mean = total / S::from_f64(parts.len() as f64);
        let rg = parts.iter().any(|&p| self.requires_grad(p));
        Ok(self.push(vec![mean], 1, 1, Op::MeanScalars(parts.to_vec()), rg))
    }

    // ── backward ──

    /// Reverse sweep from a 1x1 loss node. Gradients land in `grad(id)`
    /// for every reachable node with `requires_grad`.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.dims(loss) != (1, 1) {
            return Err(SlmError::Shape("backward: loss must be 1x1".into()));
        }
        if !self.requires_grad(loss) {
            return Err(SlmError::Train(
                "backward: loss does not depend on any trainable tensor".into(),
            ));
        }
        self.grads.clear();
        self.grads.resize_with(self.nodes.len(), || None);
        self.grads[loss.0] = Some(vec![S::ONE]);

        for i in (0..=loss.0).rev() {
            if self.grads[i].is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let g = self.grads[i].take().unwrap();
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn grad_buf(&mut self, id: TensorId) -> &mut [S] {
        // Sized from the extents, not data.len(): several backward arms
        // mem::take input data before asking for its gradient buffer.
        let len = self.nodes[id.0].rows * self.nodes[id.0].cols;
        self.grads[id.0].get_or_insert_with(|| vec![S::ZERO; len])
    }

    fn propagate(&mut self, i: usize, g: &[S]) {
        // The op is moved out and restored so input data and grad buffers
        // can be borrowed independently of the node list.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).1;
                if self.requires_grad(*a) {
                    // dA[i,p] = sum_j g[i,j] * B[p,j]
                    let bdat = std::mem::take(&mut self.nodes[b.0].data);
                    let da = self.grad_buf(*a);
                    for r in 0..m {
                        let gr = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let br = &bdat[p * n..(p + 1) * n];
                            let mut acc = S::ZERO;
                            for j in 0..n {
                                acc += gr[j] * br[j];
                            }
                            da[r * k + p] += acc;
                        }
                    }
                    self.nodes[b.0].data = bdat;
                }
                if self.requires_grad(*b) {
                    // dB[p,j] = sum_i A[i,p] * g[i,j]
                    let adat = std::mem::take(&mut self.nodes[a.0].data);
                    let db = self.grad_buf(*b);
                    for r in 0..m {
                        let gr = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let av = adat[r * k + p];
                            let dbr = &mut db[p * n..(p + 1) * n];
                            for j in 0..n {
                                dbr[j] += av * gr[j];
                            }
                        }
                    }
                    self.nodes[a.0].data = adat;
                }
            }
            Op::Transpose(a) => {
                if self.requires_grad(*a) {
                    let (m, n) = self.dims(*a);
                    let da = self.grad_buf(*a);
                    for r in 0..n {
                        for c in 0..m {
                            da[c * n + r] += g[r * m + c];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for side in [*a, *b] {
                    if self.requires_grad(side) {
                        let d = self.grad_buf(side);
                        for (dv, &gv) in d.iter_mut().zip(g) {
                            *dv += gv;
                        }
                    }
                }
            }
            Op::AddRow(a, row) => {
                if self.requires_grad(*a) {
                    let da = self.grad_buf(*a);
                    for (dv, &gv) in da.iter_mut().zip(g) {
                        *dv += gv;
                    }
                }
                if self.requires_grad(*row) {
                    let (m, n) = self.dims(*a);
                    let dr = self.grad_buf(*row);
                    for r in 0..m {
                        for j in 0..n {
                            dr[j] += g[r * n + j];
                        }
                    }
                }
            }
            Op::Scale(a, c) => {
                if self.requires_grad(*a) {
                    let c = *c;
                    let da = self.grad_buf(*a);
                    for (dv, &gv) in da.iter_mut().zip(g) {
                        *dv += gv * c;
                    }
                }
            }
            Op::Gelu(a) => {
                if self.requires_grad(*a) {
                    let k = S::from_f64(GELU_K);
                    let c = S::from_f64(GELU_C);
                    let half = S::from_f64(0.5);
                    let three = S::from_f64(3.0);
                    let xdat = std::mem::take(&mut self.nodes[a.0].data);
                    let da = self.grad_buf(*a);
                    for (j, &gv) in g.iter().enumerate() {
                        let x = xdat[j];
                        let u = k * (x + c * x * x * x);
                        let t = u.tanh();
                        let du = k * (S::ONE + three * c * x * x);
                        let d = half * (S::ONE + t) + half * x * (S::ONE - t * t) * du;
                        da[j] += gv * d;
                    }
                    self.nodes[a.0].data = xdat;
                }
            }
            Op::SoftmaxRows(a) => {
                if self.requires_grad(*a) {
                    let (m, n) = self.dims(*a);
                    let y = std::mem::take(&mut self.nodes[i].data);
                    let da = self.grad_buf(*a);
                    for r in 0..m {
                        let yr = &y[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let mut dot = S::ZERO;
                        for j in 0..n {
                            dot += yr[j] * gr[j];
                        }
                        for j in 0..n {
                            da[r * n + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                    self.nodes[i].data = y;
                }
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let (m, n) = self.dims(*x);
                let inv_n = S::ONE / S::from_f64(n as f64);
                let xdat = std::mem::take(&mut self.nodes[x.0].data);
                let gdat = std::mem::take(&mut self.nodes[gain.0].data);
                let eps = *eps;
                for r in 0..m {
                    let row = &xdat[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let (mean, var) = row_moments(row);
                    let inv = S::ONE / (var + eps).sqrt();
                    if self.requires_grad(*x) {
                        // h = dL/dy * gain; dx = inv*(h - mean(h) - xhat*mean(h*xhat))
                        let mut h_mean = S::ZERO;
                        let mut hx_mean = S::ZERO;
                        for j in 0..n {
                            let xhat = (row[j] - mean) * inv;
                            let h = gr[j] * gdat[j];
                            h_mean += h;
                            hx_mean += h * xhat;
                        }
                        h_mean = h_mean * inv_n;
                        hx_mean = hx_mean * inv_n;
                        let dx = self.grad_buf(*x);
                        for j in 0..n {
                            let xhat = (row[j] - mean) * inv;
                            let h = gr[j] * gdat[j];
                            dx[r * n + j] += inv * (h - h_mean - xhat * hx_mean);
                        }
                    }
                    if self.requires_grad(*gain) {
                        let dg = self.grad_buf(*gain);
                        for j in 0..n {
                            let xhat = (row[j] - mean) * inv;
                            dg[j] += gr[j] * xhat;
                        }
                    }
                    if self.requires_grad(*bias) {
                        let db = self.grad_buf(*bias);
                        for j in 0..n {
                            db[j] += gr[j];
                        }
                    }
                }
                self.nodes[x.0].data = xdat;
                self.nodes[gain.0].data = gdat;
            }
            Op::Gather { table, ids } => {
                if self.requires_grad(*table) {
                    let n = self.dims(*table).1;
                    let dt = self.grad_buf(*table);
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..n {
                            dt[id * n + j] += g[r * n + j];
                        }
                    }
                }
            }
            Op::ConcatRows(a, b) => {
                let asize = self.nodes[a.0].data.len();
                if self.requires_grad(*a) {
                    let da = self.grad_buf(*a);
                    for (dv, &gv) in da.iter_mut().zip(&g[..asize]) {
                        *dv += gv;
                    }
                }
                if self.requires_grad(*b) {
                    let db = self.grad_buf(*b);
                    for (dv, &gv) in db.iter_mut().zip(&g[asize..]) {
                        *dv += gv;
                    }
                }
            }
            Op::SliceCols { x, start } => {
                if self.requires_grad(*x) {
                    let (m, len) = self.dims(TensorId(i));
                    let n = self.dims(*x).1;
                    let start = *start;
                    let dx = self.grad_buf(*x);
                    for r in 0..m {
                        for j in 0..len {
                            dx[r * n + start + j] += g[r * len + j];
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let m = self.dims(TensorId(i)).0;
                let total = self.dims(TensorId(i)).1;
                let mut offset = 0;
                for &p in parts {
                    let c = self.dims(p).1;
                    if self.requires_grad(p) {
                        let dp = self.grad_buf(p);
                        for r in 0..m {
                            for j in 0..c {
                                dp[r * c + j] += g[r * total + offset + j];
                            }
                        }
                    }
                    offset += c;
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                pad_id,
                probs,
                count,
            } => {
                if self.requires_grad(*logits) {
                    let (t, v) = self.dims(*logits);
                    let scale = g[0] / S::from_f64(*count as f64);
                    let dl = self.grad_buf(*logits);
                    for r in 0..t {
                        let tgt = targets[r];
                        if tgt == *pad_id {
                            continue;
                        }
                        for j in 0..v {
                            let indicator = if j as u32 == tgt { S::ONE } else { S::ZERO };
                            dl[r * v + j] += scale * (probs[r * v + j] - indicator);
                        }
                    }
                }
            }
            Op::MeanScalars(parts) => {
                let share = g[0] / S::from_f64(parts.len() as f64);
                for &p in parts {
                    if self.requires_grad(p) {
                        self.grad_buf(p)[0] += share;
                    }
                }
            }
        }
        self.nodes[i].op = op;
    }
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Tape::new()
    }
}

/// `out += a(m x k) * b(k x n)`, i-k-j loop order so the inner loop runs
/// over contiguous rows of both `b` and `out`.
fn matmul_acc<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

fn row_moments<S: Scalar>(row: &[S]) -> (S, S) {
    let inv_n = S::ONE / S::from_f64(row.len() as f64);
    let mut mean = S::ZERO;
    for &x in row {
        mean += x;
    }
    mean = mean * inv_n;
    let mut var = S::ZERO;
    for &x in row {
        let d = x - mean;
        var += d * d;
    }
    (mean, var * inv_n)
}
