use super::{Real, Tensor, PROB_EPS};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<R> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, R),
    MulConst(Var, Vec<R>),
    Relu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<R>,
        rstd: Vec<R>,
    },
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    Sum(Var),
    Mean(Var),
    BceSum {
        p: Var,
        target: Vec<R>,
    },
}

struct Node<R> {
    value: Tensor<R>,
    op: Op<R>,
    requires_grad: bool,
}

/// Records operations in execution order; node indices are a topological
/// order by construction, so backward is a single reverse sweep.
pub struct Tape<R: Real = f32> {
    nodes: Vec<Node<R>>,
    grads: Vec<Option<Vec<R>>>,
    backward_done: bool,
}

impl<R: Real> Default for Tape<R> {
    fn default() -> Self {
        Self::new()
    }
}

fn matrix<R: Real>(t: &Tensor<R>) -> Result<(usize, usize)> {
    t.dims2()
}

impl<R: Real> Tape<R> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<R>, op: Op<R>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor<R>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable leaf; receives a gradient on [`Tape::backward`].
    pub fn param(&mut self, value: Tensor<R>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<R> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to `v`, shaped like
    /// its value.
    pub fn grad(&self, v: Var) -> Option<Tensor<R>> {
        self.grads[v.0].as_ref().map(|g| Tensor {
            shape: self.nodes[v.0].value.shape.clone(),
            data: g.clone(),
        })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape.len() != 2 || tb.shape.len() != 2 || ta.shape[1] != tb.shape[0] {
            return Err(Error::dim("matmul", &ta.shape, &tb.shape));
        }
        let value = ta.matmul(tb)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// `a * b^T` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape.len() != 2 || tb.shape.len() != 2 || ta.shape[1] != tb.shape[1] {
            return Err(Error::dim("matmul_nt", &ta.shape, &tb.shape));
        }
        let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[0]);
        let mut out = vec![R::zero(); m * n];
        R::gemm(
            m,
            k,
            n,
            &ta.data,
            (k as isize, 1),
            &tb.data,
            (1, k as isize),
            &mut out,
            R::zero(),
        );
        let rg = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulNt(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape {
            return Err(Error::dim("add", &ta.shape, &tb.shape));
        }
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| *x + *y).collect();
        let value = Tensor::new(ta.shape.clone(), data)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// Adds a length-`n` bias to every row of an `m x n` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let (_, n) = matrix(tx)?;
        if tb.numel() != n || tb.shape.len() > 2 || (tb.shape.len() == 2 && tb.shape[0] != 1) {
            return Err(Error::dim("add_row", &tx.shape, &tb.shape));
        }
        let mut data = tx.data.clone();
        for row in data.chunks_mut(n.max(1)) {
            for (v, b) in row.iter_mut().zip(&tb.data) {
                *v += *b;
            }
        }
        let value = Tensor::new(tx.shape.clone(), data)?;
        let rg = self.needs(&[x, bias]);
        Ok(self.push(value, Op::AddRow(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, c: R) -> Var {
        let tx = self.value(x);
        let value = Tensor {
            shape: tx.shape.clone(),
            data: tx.data.iter().map(|v| *v * c).collect(),
        };
        let rg = self.needs(&[x]);
        self.push(value, Op::Scale(x, c), rg)
    }

    /// Elementwise product with a constant of the same shape (dropout masks).
    pub fn mul_const(&mut self, x: Var, mask: Vec<R>) -> Result<Var> {
        let tx = self.value(x);
        if mask.len() != tx.numel() {
            return Err(Error::dim("mul_const", &tx.shape, &[mask.len()]));
        }
        let value = Tensor {
            shape: tx.shape.clone(),
            data: tx.data.iter().zip(&mask).map(|(v, m)| *v * *m).collect(),
        };
        let rg = self.needs(&[x]);
        Ok(self.push(value, Op::MulConst(x, mask), rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let value = Tensor {
            shape: tx.shape.clone(),
            data: tx.data.iter().map(|v| v.max(R::zero())).collect(),
        };
        let rg = self.needs(&[x]);
        self.push(value, Op::Relu(x), rg)
    }

    /// Logistic sigmoid, clamped to `[PROB_EPS, 1 - PROB_EPS]`.
    pub fn sigmoid(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let (lo, hi) = (R::of(PROB_EPS), R::one() - R::of(PROB_EPS));
        let value = Tensor {
            shape: tx.shape.clone(),
            data: tx.data.iter().map(|v| logistic(*v).max(lo).min(hi)).collect(),
        };
        let rg = self.needs(&[x]);
        self.push(value, Op::Sigmoid(x), rg)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (_, n) = matrix(tx)?;
        let mut data = tx.data.clone();
        for row in data.chunks_mut(n.max(1)) {
            let max = row.iter().fold(R::neg_infinity(), |m, v| m.max(*v));
            for v in row.iter_mut() {
                *v -= max;
            }
            R::exp_slice(row);
            let total: R = row.iter().copied().sum();
            for v in row.iter_mut() {
                *v = *v / total;
            }
        }
        let value = Tensor::new(tx.shape.clone(), data)?;
        let rg = self.needs(&[x]);
        Ok(self.push(value, Op::SoftmaxRows(x), rg))
    }

    /// Per-row normalization to zero mean and unit variance, then
    /// `gain * xhat + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: R) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let (m, n) = matrix(tx)?;
        if tg.numel() != n || tb.numel() != n {
            return Err(Error::dim("layer_norm", &tx.shape, &tg.shape));
        }
        if eps <= R::zero() {
            return Err(Error::Contract("layer_norm eps must be positive".into()));
        }
        let nf = R::of(n as f64);
        let mut xhat = vec![R::zero(); m * n];
        let mut rstd = vec![R::zero(); m];
        let mut out = vec![R::zero(); m * n];
        for r in 0..m {
            let row = &tx.data[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<R>() / nf;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<R>() / nf;
            let s = R::one() / (var + eps).sqrt();
            rstd[r] = s;
            for c in 0..n {
                let h = (row[c] - mean) * s;
                xhat[r * n + c] = h;
                out[r * n + c] = h * tg.data[c] + tb.data[c];
            }
        }
        let value = Tensor::new(tx.shape.clone(), out)?;
        let rg = self.needs(&[x, gain, bias]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols of nothing".into()))?;
        let rows = matrix(self.value(*first))?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (r, c) = matrix(self.value(*p))?;
            if r != rows {
                return Err(Error::dim("concat_cols", &[rows], &[r]));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(*p).data[r * w..(r + 1) * w]);
            }
        }
        let value = Tensor::new(vec![rows, total], data)?;
        let rg = self.needs(parts);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Columns `start..start + width` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = matrix(tx)?;
        if start + width > n {
            return Err(Error::dim("slice_cols", &tx.shape, &[start, width]));
        }
        let mut data = Vec::with_capacity(m * width);
        for r in 0..m {
            data.extend_from_slice(&tx.data[r * n + start..r * n + start + width]);
        }
        let value = Tensor::new(vec![m, width], data)?;
        let rg = self.needs(&[x]);
        Ok(self.push(value, Op::SliceCols { x, start }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().copied().sum();
        let rg = self.needs(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data.iter().copied().sum::<R>() / R::of(t.numel() as f64);
        let rg = self.needs(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Summed binary cross-entropy of probabilities `p` against a constant
    /// 0/1 target of the same shape. Inputs are clamped to
    /// `[PROB_EPS, 1 - PROB_EPS]`.
    ///
    /// When `p` is a [`Tape::sigmoid`] node the gradient is routed straight
    /// to the logits as `sigmoid(z) - y`, which keeps saturated logits
    /// trainable.
    pub fn bce_sum(&mut self, p: Var, target: Vec<R>) -> Result<Var> {
        let tp = self.value(p);
        if target.len() != tp.numel() {
            return Err(Error::dim("bce_sum", &tp.shape, &[target.len()]));
        }
        let (lo, hi) = (R::of(PROB_EPS), R::one() - R::of(PROB_EPS));
        let mut total = R::zero();
        for (pv, y) in tp.data.iter().zip(&target) {
            let q = pv.max(lo).min(hi);
            total += -(*y * q.ln()) - (R::one() - *y) * (R::one() - q).ln();
        }
        let rg = self.needs(&[p]);
        Ok(self.push(Tensor::scalar(total), Op::BceSum { p, target }, rg))
    }

    /// Reverse sweep from a scalar `loss`. A tape supports one backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Contract(
                "backward already ran on this tape".into(),
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape
            )));
        }
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![R::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, g: &[R]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let node = &nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
                if let Some(ga) = slot(nodes, grads, *a) {
                    // dA += G * B^T
                    R::gemm(m, n, k, g, (n as isize, 1), &tb.data, (1, n as isize), ga, R::one());
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    // dB += A^T * G
                    R::gemm(k, m, n, &ta.data, (1, k as isize), g, (n as isize, 1), gb, R::one());
                }
            }
            Op::MatMulNt(a, b) => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[0]);
                if let Some(ga) = slot(nodes, grads, *a) {
                    // dA += G * B
                    R::gemm(m, n, k, g, (n as isize, 1), &tb.data, (k as isize, 1), ga, R::one());
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    // dB += G^T * A
                    R::gemm(n, m, k, g, (1, n as isize), &ta.data, (k as isize, 1), gb, R::one());
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(gv) = slot(nodes, grads, *v) {
                        axpy(gv, g);
                    }
                }
            }
            Op::AddRow(x, bias) => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    axpy(gx, g);
                }
                if let Some(gb) = slot(nodes, grads, *bias) {
                    let n = gb.len().max(1);
                    for row in g.chunks(n) {
                        axpy(gb, row);
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    for (d, s) in gx.iter_mut().zip(g) {
                        *d += *s * *c;
                    }
                }
            }
            Op::MulConst(x, mask) => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    for ((d, s), m) in gx.iter_mut().zip(g).zip(mask) {
                        *d += *s * *m;
                    }
                }
            }
            Op::Relu(x) => {
                let tx = &nodes[x.0].value;
                if let Some(gx) = slot(nodes, grads, *x) {
                    for ((d, s), v) in gx.iter_mut().zip(g).zip(&tx.data) {
                        if *v > R::zero() {
                            *d += *s;
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                let tx = &nodes[x.0].value;
                if let Some(gx) = slot(nodes, grads, *x) {
                    for ((d, s), v) in gx.iter_mut().zip(g).zip(&tx.data) {
                        let y = logistic(*v);
                        *d += *s * y * (R::one() - y);
                    }
                }
            }
            Op::SoftmaxRows(x) => {
                let n = out.cols().max(1);
                if let Some(gx) = slot(nodes, grads, *x) {
                    for ((drow, grow), yrow) in
                        gx.chunks_mut(n).zip(g.chunks(n)).zip(out.data.chunks(n))
                    {
                        let dot: R = grow.iter().zip(yrow).map(|(a, b)| *a * *b).sum();
                        for ((d, gs), y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += *y * (*gs - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let n = out.cols().max(1);
                let nf = R::of(n as f64);
                let tg = &nodes[gain.0].value;
                if let Some(gg) = slot(nodes, grads, *gain) {
                    for (grow, hrow) in g.chunks(n).zip(xhat.chunks(n)) {
                        for ((d, s), h) in gg.iter_mut().zip(grow).zip(hrow) {
                            *d += *s * *h;
                        }
                    }
                }
                if let Some(gb) = slot(nodes, grads, *bias) {
                    for grow in g.chunks(n) {
                        axpy(gb, grow);
                    }
                }
                if let Some(gx) = slot(nodes, grads, *x) {
                    let mut dxhat = vec![R::zero(); n];
                    for (r, ((drow, grow), hrow)) in gx
                        .chunks_mut(n)
                        .zip(g.chunks(n))
                        .zip(xhat.chunks(n))
                        .enumerate()
                    {
                        let mut mean_d = R::zero();
                        let mut mean_dh = R::zero();
                        for c in 0..n {
                            dxhat[c] = grow[c] * tg.data[c];
                            mean_d += dxhat[c];
                            mean_dh += dxhat[c] * hrow[c];
                        }
                        mean_d = mean_d / nf;
                        mean_dh = mean_dh / nf;
                        for c in 0..n {
                            drow[c] += rstd[r] * (dxhat[c] - mean_d - hrow[c] * mean_dh);
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut offset = 0;
                for p in parts {
                    let w = nodes[p.0].value.cols();
                    if let Some(gp) = slot(nodes, grads, *p) {
                        for (drow, grow) in gp.chunks_mut(w.max(1)).zip(g.chunks(total.max(1))) {
                            axpy(drow, &grow[offset..offset + w]);
                        }
                    }
                    offset += w;
                }
            }
            Op::SliceCols { x, start } => {
                let w = out.cols();
                let n = nodes[x.0].value.cols();
                if let Some(gx) = slot(nodes, grads, *x) {
                    for (drow, grow) in gx.chunks_mut(n.max(1)).zip(g.chunks(w.max(1))) {
                        axpy(&mut drow[*start..*start + w], grow);
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    for d in gx.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::Mean(x) => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    let s = g[0] / R::of(gx.len() as f64);
                    for d in gx.iter_mut() {
                        *d += s;
                    }
                }
            }
            Op::BceSum { p, target } => {
                if let Op::Sigmoid(z) = nodes[p.0].op {
                    let tz = &nodes[z.0].value;
                    if let Some(gz) = slot(nodes, grads, z) {
                        for ((d, v), y) in gz.iter_mut().zip(&tz.data).zip(target) {
                            *d += g[0] * (logistic(*v) - *y);
                        }
                    }
                } else {
                    let (lo, hi) = (R::of(PROB_EPS), R::one() - R::of(PROB_EPS));
                    let tp = &nodes[p.0].value;
                    if let Some(gp) = slot(nodes, grads, *p) {
                        for ((d, pv), y) in gp.iter_mut().zip(&tp.data).zip(target) {
                            let q = pv.max(lo).min(hi);
                            *d += g[0] * (q - *y) / (q * (R::one() - q));
                        }
                    }
                }
            }
        }
    }
}

/// Zero-initialized gradient buffer for `v`, or `None` if `v` is constant.
fn slot<'g, R: Real>(
    nodes: &[Node<R>],
    grads: &'g mut [Option<Vec<R>>],
    v: Var,
) -> Option<&'g mut [R]> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![R::zero(); n]).as_mut_slice())
}

fn axpy<R: Real>(dst: &mut [R], src: &[R]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

/// Unclamped logistic function, stable on both tails.
pub(crate) fn logistic<R: Real>(v: R) -> R {
    if v >= R::zero() {
        R::one() / (R::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (R::one() + e)
    }
}
