//! Built-in differentiable primitives.

use crate::kernels::{self, gemm};
use crate::tape::{BackwardContext, Function};
use crate::{Result, Tape, Tensor, TensorError, Var};

/// Values in `(0, LOG_FLOOR)` are raised to the floor before taking logs.
pub const LOG_FLOOR: f64 = 1e-12;
/// Variance floor used by batch normalization.
pub const BN_EPS: f64 = 1e-5;
/// Weight of the previous running statistic in batch-norm updates.
pub const BN_MOMENTUM: f64 = 0.9;

type Grads = Result<Vec<Option<Vec<f64>>>>;

fn rank2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(TensorError::Shape {
            op,
            lhs: s.to_vec(),
            rhs: vec![0, 0],
        }),
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::Shape {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

#[derive(Debug)]
struct MatMul {
    m: usize,
    k: usize,
    n: usize,
}

impl Function for MatMul {
    fn name(&self) -> &'static str {
        "matmul"
    }

    fn backward(&self, ctx: &BackwardContext<'_>) -> Grads {
        let (m, k, n) = (self.m, self.k, self.n);
        let g = ctx.grad_output;
        let ga = ctx.needs_grad[0].then(|| {
            let mut ga = vec![0.0; m * k];
            gemm(m, n, k, g, false, ctx.inputs[1].data(), true, 0.0, &mut ga);
            ga
        });
        let gb = ctx.needs_grad[1].then(|| {
            let mut gb = vec![0.0; k * n];
            gemm(k, m, n, ctx.inputs[0].data(), true, g, false, 0.0, &mut gb);
            gb
        });
        Ok(vec![ga, gb])
    }
}

#[derive(Debug)]
struct Transpose {
    rows: usize,
    cols: usize,
}

fn transpose_data(rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = x[i * cols + j];
        }
    }
    out
}

impl Function for Transpose {
    fn name(&self) -> &'static str {
        "transpose"
    }

    fn backward(&self, ctx: &BackwardContext<'_>) -> Grads {
        Ok(vec![Some(transpose_data(
            self.cols,
            self.rows,
            ctx.grad_output,
        ))])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
struct Binary(BinaryKind);

impl Function for Binary {
    fn name(&self) -> &'static str {
        match self.0 {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
        }
    }

    fn backward(&self, ctx: &BackwardContext<'_>) -> Grads {
        let g = ctx.grad_output;
        Ok(match self.0 {
            BinaryKind::Add => vec![
                ctx.needs_grad[0].then(|| g.to_vec()),
                ctx.needs_grad[1].then(|| g.to_vec()),
            ],
            BinaryKind::Sub => vec![
                ctx.needs_grad[0].then(|| g.to_vec()),
                ctx.needs_grad[1].then(|| g.iter().map(|x| -x).collect()),
            ],
            BinaryKind::Mul => {
                let (a, b) = (ctx.inputs[0].data(), ctx.inputs[1].data());
                vec![
                    ctx.needs_grad[0].then(|| g.iter().zip(b).map(|(g, b)| g * b).collect()),
                    ctx.needs_grad[1].then(|| g.iter().zip(a).map(|(g, a)| g * a).collect()),
                ]
            }
        })
    }
}

#[derive(Debug)]
struct AddRow {
    cols: usize,
}

impl Function for AddRow {
    fn name(&self) -> &'static str {
        "add_row"
    }

    fn backward(&self, ctx: &BackwardContext<'_>) -> Grads {
        let g = ctx.grad_output;
        let gb = ctx.needs_grad[1].then(|| {
            let mut gb = vec![0.0; self.cols];
            for row in g.chunks_exact(self.cols) {
                kernels::axpy(1.0, row, &mut gb);
            }
            gb
        });
        Ok(vec![ctx.needs_grad[0].then(|| g.to_vec()), gb])
    }
}

#[derive(Debug)]
struct ScaleRows {
    cols: usize,
}

impl Function for ScaleRows {
    fn name(&self) -> &'static str {
        "scale_rows"
    }

    fn backward(&self, ctx: &BackwardContext<'_>) -> Grads {
        let (x, s) = (ctx.inputs[0].data(), ctx.inputs[1].data());
        let g = ctx.grad_output;
        let gx = ctx.needs_grad[0].then(|| {
            let mut gx = g.to_vec();
            for (row, &si) in gx.chunks_exact_mut(self.cols).zip(s) {
                row.iter_mut().for_each(|v| *v *= si);
            }
            gx
        });
        let gs = ctx.needs_grad[1].then(|| {
            g.chunks_exact(self.cols)
                .zip(x.chunks_exact(self.cols))
                .map(|(gr, xr)| kernels::dot(gr, xr))
                .collect()
        });
        Ok(vec![gx, gs])
    }
}

#[derive(Debug)]
struct Scale(f64);

impl Function for Scale {
    fn name(&self) -> &'static str {
        "scale"
    }

    fn backward(&self, ctx: &BackwardContext<'_>) -> Grads {
        Ok(vec![Some(
            ctx.grad_output.iter().map(|g| g * self.0).collect(),
        )])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum UnaryKind {
    Relu,
    Sigmoid,
    Exp,
    Log,
}

#[derive(Debug)]
struct Unary(UnaryKind);

impl Function for Unary {
    fn name(&self) -> &'static str {
        match self.0 {
            UnaryKind::Relu => "relu",
            UnaryKind::Sigmoid => "sigmoid",
            UnaryKind::Exp => "exp",
            UnaryKind::Log => "log",
        }
    }

    fn backward(&self, ctx: &BackwardContext<'_>) -> Grads {
        let x = ctx.inputs[0].data();
        let y = ctx.output.data();
        let g = ctx.grad_output;
        let out = match self.0 {
            UnaryKind::Relu => g
                .iter()
                .zip(x)
                .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                .collect(),
            UnaryKind::Sigmoid => g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect(),
            UnaryKind::Exp => g.iter().zip(y).map(|(g, y)| g * y).collect(),
            UnaryKind::Log => g
                .iter()
                .zip(x)
                .map(|(g, &x)| if x > LOG_FLOOR { g / x } else { 0.0 })
                .collect(),
        };
        Ok(vec![Some(out)])
    }
}

#[derive(Debug)]
struct SoftmaxRows {
    cols: usize,
}

impl Function for SoftmaxRows {
    fn name(&self) -> &'static str {
        "softmax_rows"
    }

    fn backward(&self, ctx: &BackwardContext<'_>) -> Grads {
        let y = ctx.output.data();
        let mut gx = vec![0.0; y.len()];
        for ((gxr, yr), gr) in gx
            .chunks_exact_mut(self.cols)
            .zip(y.chunks_exact(self.cols))
            .zip(ctx.grad_output.chunks_exact(self.cols))
        {
            let s = kernels::dot(gr, yr);
            for ((o, &yi), &gi) in gxr.iter_mut().zip(yr).zip(gr) {
                *o = yi * (gi - s);
            }
        }
        Ok(vec![Some(gx)])
    }
}

#[derive(Debug)]
struct Gather {
    ids: Vec<usize>,
    cols: usize,
    rows: usize,
}

impl Function for Gather {
    fn name(&self) -> &'static str {
        "gather_rows"
    }

    fn backward(&self, ctx: &BackwardContext<'_>) -> Grads {
        let c = self.cols;
        let mut gt = vec![0.0; self.rows * c];
        for (i, &id) in self.ids.iter().enumerate() {
            kernels::axpy(
                1.0,
                &ctx.grad_output[i * c..(i + 1) * c],
                &mut gt[id * c..(id + 1) * c],
            );
        }
        Ok(vec![Some(gt)])
    }
}

#[derive(Debug)]
struct ConcatCols {
    rows: usize,
    widths: Vec<usize>,
}

impl Function for ConcatCols {
    fn name(&self) -> &'static str {
        "concat_cols"
    }

    fn backward(&self, ctx: &BackwardContext<'_>) -> Grads {
        let total: usize = self.widths.iter().sum();
        let mut offset = 0;
        let mut out = Vec::with_capacity(self.widths.len());
        for (i, &w) in self.widths.iter().enumerate() {
            if ctx.needs_grad[i] {
                let mut g = Vec::with_capacity(self.rows * w);
                for r in 0..self.rows {
                    let start = r * total + offset;
                    g.extend_from_slice(&ctx.grad_output[start..start + w]);
                }
                out.push(Some(g));
            } else {
                out.push(None);
            }
            offset += w;
        }
        Ok(out)
    }
}

#[derive(Debug)]
struct SliceCols {
    rows: usize,
    cols: usize,
    start: usize,
    end: usize,
}

impl Function for SliceCols {
    fn name(&self) -> &'static str {
        "slice_cols"
    }

    fn backward(&self, ctx: &BackwardContext<'_>) -> Grads {
        let w = self.end - self.start;
        let mut g = vec![0.0; self.rows * self.cols];
        for r in 0..self.rows {
            g[r * self.cols + self.start..r * self.cols + self.end]
                .copy_from_slice(&ctx.grad_output[r * w..(r + 1) * w]);
        }
        Ok(vec![Some(g)])
    }
}

#[derive(Debug)]
struct Reshape;

impl Function for Reshape {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn backward(&self, ctx: &BackwardContext<'_>) -> Grads {
        Ok(vec![Some(ctx.grad_output.to_vec())])
    }
}

#[derive(Debug)]
struct Sum {
    n: usize,
}

impl Function for Sum {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn backward(&self, ctx: &BackwardContext<'_>) -> Grads {
        Ok(vec![Some(vec![ctx.grad_output[0]; self.n])])
    }
}

#[derive(Debug)]
struct RowNormalize {
    cols: usize,
    norms: Vec<f64>,
    eps: f64,
}

impl Function for RowNormalize {
    fn name(&self) -> &'static str {
        "row_normalize"
    }

    fn backward(&self, ctx: &BackwardContext<'_>) -> Grads {
        let y = ctx.output.data();
        let mut gx = vec![0.0; y.len()];
        for (r, &norm) in self.norms.iter().enumerate() {
            let span = r * self.cols..(r + 1) * self.cols;
            let (yr, gr) = (&y[span.clone()], &ctx.grad_output[span.clone()]);
            let out = &mut gx[span];
            if norm > self.eps {
                let proj = kernels::dot(yr, gr);
                for ((o, &yi), &gi) in out.iter_mut().zip(yr).zip(gr) {
                    *o = (gi - yi * proj) / norm;
                }
            } else {
                for (o, &gi) in out.iter_mut().zip(gr) {
                    *o = gi / self.eps;
                }
            }
        }
        Ok(vec![Some(gx)])
    }
}

/// Per-column batch statistics observed in a training-mode forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchMoments {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Exponential moving averages consumed by evaluation-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            var: vec![1.0; dim],
        }
    }

    pub fn update(&mut self, moments: &BatchMoments) {
        for (r, b) in self.mean.iter_mut().zip(&moments.mean) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
        }
        for (r, b) in self.var.iter_mut().zip(&moments.var) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
        }
    }
}

#[derive(Debug)]
struct BatchNormTrain {
    cols: usize,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

impl Function for BatchNormTrain {
    fn name(&self) -> &'static str {
        "batch_norm"
    }

    fn backward(&self, ctx: &BackwardContext<'_>) -> Grads {
        let d = self.cols;
        let g = ctx.grad_output;
        let gamma = ctx.inputs[1].data();
        let b = g.len() / d;
        let mut sum_g = vec![0.0; d];
        let mut sum_gx = vec![0.0; d];
        for (gr, xr) in g.chunks_exact(d).zip(self.xhat.chunks_exact(d)) {
            for j in 0..d {
                sum_g[j] += gr[j];
                sum_gx[j] += gr[j] * xr[j];
            }
        }
        let gx = ctx.needs_grad[0].then(|| {
            let bf = b as f64;
            let mut gx = vec![0.0; g.len()];
            for ((o, gr), xr) in gx
                .chunks_exact_mut(d)
                .zip(g.chunks_exact(d))
                .zip(self.xhat.chunks_exact(d))
            {
                for j in 0..d {
                    o[j] = gamma[j] * self.inv_std[j] / bf
                        * (bf * gr[j] - sum_g[j] - xr[j] * sum_gx[j]);
                }
            }
            gx
        });
        Ok(vec![
            gx,
            ctx.needs_grad[1].then_some(sum_gx),
            ctx.needs_grad[2].then_some(sum_g),
        ])
    }
}

#[derive(Debug)]
struct BatchNormEval {
    cols: usize,
    mean: Vec<f64>,
    inv_std: Vec<f64>,
}

impl Function for BatchNormEval {
    fn name(&self) -> &'static str {
        "batch_norm_eval"
    }

    fn backward(&self, ctx: &BackwardContext<'_>) -> Grads {
        let d = self.cols;
        let g = ctx.grad_output;
        let x = ctx.inputs[0].data();
        let gamma = ctx.inputs[1].data();
        let mut gx = vec![0.0; g.len()];
        let mut ggamma = vec![0.0; d];
        let mut gbeta = vec![0.0; d];
        for ((o, gr), xr) in gx
            .chunks_exact_mut(d)
            .zip(g.chunks_exact(d))
            .zip(x.chunks_exact(d))
        {
            for j in 0..d {
                o[j] = gr[j] * gamma[j] * self.inv_std[j];
                ggamma[j] += gr[j] * (xr[j] - self.mean[j]) * self.inv_std[j];
                gbeta[j] += gr[j];
            }
        }
        Ok(vec![
            ctx.needs_grad[0].then_some(gx),
            ctx.needs_grad[1].then_some(ggamma),
            ctx.needs_grad[2].then_some(gbeta),
        ])
    }
}

impl Tape {
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = rank2("matmul", self.value(a))?;
        let (k2, n) = rank2("matmul", self.value(b))?;
        if k != k2 {
            return Err(TensorError::Shape {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            0.0,
            &mut out,
        );
        Ok(self.apply(
            Box::new(MatMul { m, k, n }),
            &[a, b],
            Tensor::from_parts(vec![m, n], out),
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = rank2("transpose", self.value(a))?;
        let out = transpose_data(rows, cols, self.value(a).data());
        Ok(self.apply(
            Box::new(Transpose { rows, cols }),
            &[a],
            Tensor::from_parts(vec![cols, rows], out),
        ))
    }

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let op = Binary(kind);
        same_shape(op.name(), ta, tb)?;
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| match kind {
                BinaryKind::Add => x + y,
                BinaryKind::Sub => x - y,
                BinaryKind::Mul => x * y,
            })
            .collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        Ok(self.apply(Box::new(op), &[a, b], out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, n) = rank2("add_row", self.value(x))?;
        if self.value(bias).numel() != n {
            return Err(TensorError::Shape {
                op: "add_row",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_exact_mut(n) {
            kernels::axpy(1.0, b, row);
        }
        let out = Tensor::from_parts(self.shape(x).to_vec(), data);
        Ok(self.apply(Box::new(AddRow { cols: n }), &[x, bias], out))
    }

    /// `x @ w + b` for `x: [m×k]`, `w: [k×n]`, `b: [n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    /// Multiplies row `i` of `x: [m×n]` by `scale[i]`.
    pub fn scale_rows(&mut self, x: Var, scale: Var) -> Result<Var> {
        let (m, n) = rank2("scale_rows", self.value(x))?;
        if self.value(scale).numel() != m {
            return Err(TensorError::Shape {
                op: "scale_rows",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(scale).to_vec(),
            });
        }
        let s = self.value(scale).data();
        let mut data = self.value(x).data().to_vec();
        for (row, &si) in data.chunks_exact_mut(n).zip(s) {
            row.iter_mut().for_each(|v| *v *= si);
        }
        let out = Tensor::from_parts(vec![m, n], data);
        Ok(self.apply(Box::new(ScaleRows { cols: n }), &[x, scale], out))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let t = self.value(x);
        let out = Tensor::from_parts(
            t.shape().to_vec(),
            t.data().iter().map(|v| v * factor).collect(),
        );
        self.apply(Box::new(Scale(factor)), &[x], out)
    }

    fn unary(&mut self, kind: UnaryKind, x: Var) -> Result<Var> {
        let t = self.value(x);
        let data: Vec<f64> = match kind {
            UnaryKind::Relu => t.data().iter().map(|&v| v.max(0.0)).collect(),
            UnaryKind::Sigmoid => t.data().iter().map(|&v| kernels::sigmoid(v)).collect(),
            UnaryKind::Exp => t.data().iter().map(|v| v.exp()).collect(),
            UnaryKind::Log => {
                if let Some(&bad) = t.data().iter().find(|&&v| v.is_nan() || v <= 0.0) {
                    return Err(TensorError::Domain {
                        op: "log",
                        value: bad,
                    });
                }
                t.data().iter().map(|&v| v.max(LOG_FLOOR).ln()).collect()
            }
        };
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        Ok(self.apply(Box::new(Unary(kind)), &[x], out))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Relu, x).expect("relu is total")
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Sigmoid, x).expect("sigmoid is total")
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Exp, x).expect("exp is total")
    }

    /// Natural log with inputs in `(0, 1e-12)` floored; non-positive input is
    /// a domain error.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Log, x)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = rank2("softmax_rows", self.value(x))?;
        let src = self.value(x).data();
        let mut data = vec![0.0; m * n];
        for (row, out) in src.chunks_exact(n).zip(data.chunks_exact_mut(n)) {
            kernels::softmax_into(row, out);
        }
        let out = Tensor::from_parts(vec![m, n], data);
        Ok(self.apply(Box::new(SoftmaxRows { cols: n }), &[x], out))
    }

    /// Row gather `table[ids]`; the backward pass scatter-adds into the table.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, cols) = rank2("embedding_lookup", self.value(table))?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(TensorError::Index {
                op: "embedding_lookup",
                index: bad,
                bound: rows,
            });
        }
        if ids.is_empty() {
            return Err(TensorError::Contract(
                "embedding_lookup needs at least one id".into(),
            ));
        }
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            data.extend_from_slice(&src[id * cols..(id + 1) * cols]);
        }
        let out = Tensor::from_parts(vec![ids.len(), cols], data);
        Ok(self.apply(
            Box::new(Gather {
                ids: ids.to_vec(),
                cols,
                rows,
            }),
            &[table],
            out,
        ))
    }

    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather_rows(table, ids)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat_cols of nothing".into()))?;
        let (rows, _) = rank2("concat_cols", self.value(first))?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = rank2("concat_cols", self.value(p))?;
            if r != rows {
                return Err(TensorError::Shape {
                    op: "concat_cols",
                    lhs: self.shape(first).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let out = Tensor::from_parts(vec![rows, total], data);
        Ok(self.apply(Box::new(ConcatCols { rows, widths }), parts, out))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (rows, cols) = rank2("slice_cols", self.value(x))?;
        if start >= end || end > cols {
            return Err(TensorError::Index {
                op: "slice_cols",
                index: end,
                bound: cols,
            });
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            data.extend_from_slice(&src[r * cols + start..r * cols + end]);
        }
        let out = Tensor::from_parts(vec![rows, end - start], data);
        Ok(self.apply(
            Box::new(SliceCols {
                rows,
                cols,
                start,
                end,
            }),
            &[x],
            out,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.apply(Box::new(Reshape), &[x], out))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = t.numel();
        let s: f64 = t.data().iter().sum();
        self.apply(Box::new(Sum { n }), &[x], Tensor::scalar(s))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Scales each row to unit Euclidean norm, with norms floored at `eps`.
    pub fn row_normalize(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (m, n) = rank2("row_normalize", self.value(x))?;
        let src = self.value(x).data();
        let mut norms = Vec::with_capacity(m);
        let mut data = vec![0.0; m * n];
        for (row, out) in src.chunks_exact(n).zip(data.chunks_exact_mut(n)) {
            let norm = kernels::dot(row, row).sqrt();
            let denom = norm.max(eps);
            for (o, v) in out.iter_mut().zip(row) {
                *o = v / denom;
            }
            norms.push(norm);
        }
        let out = Tensor::from_parts(vec![m, n], data);
        Ok(self.apply(
            Box::new(RowNormalize {
                cols: n,
                norms,
                eps,
            }),
            &[x],
            out,
        ))
    }

    fn check_bn(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize)> {
        let (b, d) = rank2("batch_norm", self.value(x))?;
        for p in [gamma, beta] {
            if self.value(p).numel() != d {
                return Err(TensorError::Shape {
                    op: "batch_norm",
                    lhs: self.shape(x).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        Ok((b, d))
    }

    /// Training-mode batch normalization over rows. Returns the normalized
    /// output and the batch moments so the caller can update running
    /// statistics.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
    ) -> Result<(Var, BatchMoments)> {
        let (b, d) = self.check_bn(x, gamma, beta)?;
        if b < 2 {
            return Err(TensorError::Contract(
                "batch_norm in train mode needs at least 2 rows".into(),
            ));
        }
        let src = self.value(x).data();
        let bf = b as f64;
        let mut mean = vec![0.0; d];
        for row in src.chunks_exact(d) {
            kernels::axpy(1.0, row, &mut mean);
        }
        mean.iter_mut().for_each(|m| *m /= bf);
        let mut var = vec![0.0; d];
        for row in src.chunks_exact(d) {
            for j in 0..d {
                let c = row[j] - mean[j];
                var[j] += c * c;
            }
        }
        var.iter_mut().for_each(|v| *v /= bf);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = vec![0.0; b * d];
        for (row, out) in src.chunks_exact(d).zip(xhat.chunks_exact_mut(d)) {
            for j in 0..d {
                out[j] = (row[j] - mean[j]) * inv_std[j];
            }
        }
        let (g, be) = (self.value(gamma).data(), self.value(beta).data());
        let mut data = xhat.clone();
        for row in data.chunks_exact_mut(d) {
            for j in 0..d {
                row[j] = g[j] * row[j] + be[j];
            }
        }
        let out = Tensor::from_parts(vec![b, d], data);
        let v = self.apply(
            Box::new(BatchNormTrain {
                cols: d,
                xhat,
                inv_std,
            }),
            &[x, gamma, beta],
            out,
        );
        Ok((v, BatchMoments { mean, var }))
    }

    /// Evaluation-mode batch normalization using fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &RunningStats,
    ) -> Result<Var> {
        let (_, d) = self.check_bn(x, gamma, beta)?;
        if stats.mean.len() != d || stats.var.len() != d {
            return Err(TensorError::Shape {
                op: "batch_norm_eval",
                lhs: vec![d],
                rhs: vec![stats.mean.len()],
            });
        }
        let inv_std: Vec<f64> = stats
            .var
            .iter()
            .map(|v| 1.0 / (v + BN_EPS).sqrt())
            .collect();
        let (g, be) = (self.value(gamma).data(), self.value(beta).data());
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_exact_mut(d) {
            for j in 0..d {
                row[j] = g[j] * (row[j] - stats.mean[j]) * inv_std[j] + be[j];
            }
        }
        let out = Tensor::from_parts(self.shape(x).to_vec(), data);
        Ok(self.apply(
            Box::new(BatchNormEval {
                cols: d,
                mean: stats.mean.clone(),
                inv_std,
            }),
            &[x, gamma, beta],
            out,
        ))
    }
}
