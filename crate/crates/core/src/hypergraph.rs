//! Per-batch kNN hypergraph, hypergraph convolution and the structural
//! Jensen-Shannon supervision.

use htgnn_autograd::{BackwardContext, Function};
use htgnn_autograd::{Tape, Tensor, TensorError, Var, LOG_FLOOR};

use crate::error::{Error, Result};

/// Incidence structure over a batch. Edge `e` lists its member vertices;
/// for kNN graphs the anchor comes first, then neighbours by distance.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypergraph {
    pub n_vertices: usize,
    pub edges: Vec<Vec<usize>>,
    pub edge_weights: Vec<f64>,
    pub vertex_degrees: Vec<f64>,
    pub edge_degrees: Vec<f64>,
}

impl Hypergraph {
    /// Builds a hypergraph with unit edge weights from explicit member lists.
    pub fn from_edges(n_vertices: usize, edges: Vec<Vec<usize>>) -> Result<Self> {
        let mut vertex_degrees = vec![0.0; n_vertices];
        for e in &edges {
            for &v in e {
                if v >= n_vertices {
                    return Err(TensorError::Index {
                        op: "hypergraph",
                        index: v,
                        bound: n_vertices,
                    }
                    .into());
                }
                vertex_degrees[v] += 1.0;
            }
        }
        let edge_degrees = edges.iter().map(|e| e.len() as f64).collect();
        Ok(Self {
            n_vertices,
            edge_weights: vec![1.0; edges.len()],
            edges,
            vertex_degrees,
            edge_degrees,
        })
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    /// Dense binary incidence matrix `[|V| × |E|]`.
    pub fn incidence(&self) -> Tensor {
        let (v, e) = (self.n_vertices, self.n_edges());
        let mut h = Tensor::zeros(&[v, e]);
        for (j, members) in self.edges.iter().enumerate() {
            for &i in members {
                h.data_mut()[i * e + j] = 1.0;
            }
        }
        h
    }

    fn check_degrees(&self) -> Result<()> {
        if let Some(v) = self.vertex_degrees.iter().position(|&d| d <= 0.0) {
            return Err(Error::Tensor(TensorError::Contract(format!(
                "vertex {v} has zero degree"
            ))));
        }
        if let Some(e) = self.edge_degrees.iter().position(|&d| d <= 0.0) {
            return Err(Error::Tensor(TensorError::Contract(format!(
                "hyperedge {e} is empty"
            ))));
        }
        Ok(())
    }

    /// Edge ids incident to each vertex.
    fn vertex_edges(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_vertices];
        for (e, members) in self.edges.iter().enumerate() {
            for &v in members {
                out[v].push(e);
            }
        }
        out
    }
}

/// One hyperedge per vertex: the vertex and its `k` nearest neighbours in
/// Euclidean distance, ties going to the lower index.
pub fn build_knn_hyperedges(embeddings: &Tensor, k: usize) -> Result<Hypergraph> {
    let (b, d) = match embeddings.shape() {
        [b, d] => (*b, *d),
        s => {
            return Err(Error::Tensor(TensorError::Contract(format!(
                "kNN expects a matrix, got shape {s:?}"
            ))))
        }
    };
    if b < 2 || k == 0 || k >= b {
        return Err(Error::Tensor(TensorError::Contract(format!(
            "kNN needs 1 <= k < batch size (k = {k}, batch = {b})"
        ))));
    }
    let x = embeddings.data();
    let mut edges = Vec::with_capacity(b);
    let mut dist: Vec<(f64, usize)> = Vec::with_capacity(b - 1);
    for i in 0..b {
        dist.clear();
        let xi = &x[i * d..(i + 1) * d];
        for j in (0..b).filter(|&j| j != i) {
            let xj = &x[j * d..(j + 1) * d];
            let s: f64 = xi.iter().zip(xj).map(|(a, c)| (a - c) * (a - c)).sum();
            dist.push((s, j));
        }
        let cmp = |a: &(f64, usize), c: &(f64, usize)| a.0.total_cmp(&c.0).then(a.1.cmp(&c.1));
        if k < dist.len() {
            dist.select_nth_unstable_by(k, cmp);
        }
        dist[..k].sort_unstable_by(cmp);
        let mut members = Vec::with_capacity(k + 1);
        members.push(i);
        members.extend(dist[..k].iter().map(|&(_, j)| j));
        edges.push(members);
    }
    Hypergraph::from_edges(b, edges)
}

/// `Z = D_v^{-1/2} H W D_e^{-1} Hᵀ D_v^{-1/2} X` evaluated edge by edge.
#[derive(Debug)]
struct Propagate {
    edges: Vec<Vec<usize>>,
    vertex_edges: Vec<Vec<usize>>,
    inv_sqrt_dv: Vec<f64>,
    inv_de: Vec<f64>,
    /// Per-edge sums `S_e = Σ_{v∈e} X_v / sqrt(d_v)`.
    edge_sums: Vec<f64>,
    cols: usize,
}

impl Propagate {
    fn gather(&self, x: &[f64]) -> Vec<f64> {
        let d = self.cols;
        let mut s = vec![0.0; self.edges.len() * d];
        for (e, members) in self.edges.iter().enumerate() {
            let out = &mut s[e * d..(e + 1) * d];
            for &v in members {
                htgnn_autograd::kernels::axpy(self.inv_sqrt_dv[v], &x[v * d..(v + 1) * d], out);
            }
        }
        s
    }

    fn scatter(&self, s: &[f64], w: &[f64], n_vertices: usize) -> Vec<f64> {
        let d = self.cols;
        let mut z = vec![0.0; n_vertices * d];
        for v in 0..n_vertices {
            let out = &mut z[v * d..(v + 1) * d];
            for &e in &self.vertex_edges[v] {
                let c = self.inv_sqrt_dv[v] * w[e] * self.inv_de[e];
                htgnn_autograd::kernels::axpy(c, &s[e * d..(e + 1) * d], out);
            }
        }
        z
    }
}

impl Function for Propagate {
    fn name(&self) -> &'static str {
        "hypergraph_propagate"
    }

    fn backward(&self, ctx: &BackwardContext<'_>) -> htgnn_autograd::Result<Vec<Option<Vec<f64>>>> {
        let d = self.cols;
        let n = ctx.inputs[0].shape()[0];
        let w = ctx.inputs[1].data();
        // the operator is symmetric, so the input adjoint reuses the forward path
        let g = self.gather(ctx.grad_output);
        let gx = ctx.needs_grad[0].then(|| self.scatter(&g, w, n));
        let gw = ctx.needs_grad[1].then(|| {
            let mut gw = vec![0.0; w.len()];
            for e in 0..self.edges.len() {
                let ge = &g[e * d..(e + 1) * d];
                let se = &self.edge_sums[e * d..(e + 1) * d];
                gw[e] = self.inv_de[e] * htgnn_autograd::kernels::dot(ge, se);
            }
            gw
        });
        Ok(vec![gx, gw])
    }
}

/// Degree-normalized propagation with trainable diagonal edge weights `w`
/// (only the first `|E|` entries are used).
pub fn propagate(tape: &mut Tape, x: Var, g: &Hypergraph, w: Var) -> Result<Var> {
    g.check_degrees()?;
    let (n, d) = tape.value(x).dims2();
    if n != g.n_vertices {
        return Err(Error::Tensor(TensorError::Shape {
            op: "hypergraph_propagate",
            lhs: vec![n, d],
            rhs: vec![g.n_vertices, g.n_edges()],
        }));
    }
    let wv = tape.value(w).data();
    if wv.len() < g.n_edges() {
        return Err(Error::Tensor(TensorError::Shape {
            op: "hypergraph_propagate",
            lhs: vec![wv.len()],
            rhs: vec![g.n_edges()],
        }));
    }
    let mut op = Propagate {
        edges: g.edges.clone(),
        vertex_edges: g.vertex_edges(),
        inv_sqrt_dv: g.vertex_degrees.iter().map(|d| 1.0 / d.sqrt()).collect(),
        inv_de: g.edge_degrees.iter().map(|d| 1.0 / d).collect(),
        edge_sums: Vec::new(),
        cols: d,
    };
    op.edge_sums = op.gather(tape.value(x).data());
    let z = op.scatter(&op.edge_sums, wv, n);
    let out = Tensor::new(&[n, d], z)?;
    Ok(tape.apply(Box::new(op), &[x, w], out))
}

/// `ReLU(propagate(x) · Θ)`.
pub fn hypergraph_convolve(
    tape: &mut Tape,
    x: Var,
    g: &Hypergraph,
    w: Var,
    theta: Var,
) -> Result<Var> {
    let z = propagate(tape, x, g, w)?;
    let y = tape.matmul(z, theta)?;
    Ok(tape.relu(y))
}

/// `M = softmax_rows(1 − C)` with `C` the pairwise cosine similarities.
pub fn embedding_dissimilarity_m(tape: &mut Tape, u: Var) -> Result<Var> {
    let b = tape.value(u).dims2().0;
    let un = tape.row_normalize(u, LOG_FLOOR)?;
    let unt = tape.transpose(un)?;
    let c = tape.matmul(un, unt)?;
    let neg = tape.scale(c, -1.0);
    let ones = tape.constant(Tensor::full(&[b, b], 1.0));
    let arg = tape.add(neg, ones)?;
    Ok(tape.softmax_rows(arg)?)
}

/// `N = softmax_rows(|y_i − y_j|)`.
pub fn label_difference_n(labels: &[f64]) -> Result<Tensor> {
    let b = labels.len();
    if b < 2 {
        return Err(Error::Tensor(TensorError::Contract(
            "label distribution needs at least 2 samples".into(),
        )));
    }
    let mut out = vec![0.0; b * b];
    let mut row = vec![0.0; b];
    for i in 0..b {
        for j in 0..b {
            row[j] = (labels[i] - labels[j]).abs();
        }
        htgnn_autograd::kernels::softmax_into(&row, &mut out[i * b..(i + 1) * b]);
    }
    Ok(Tensor::new(&[b, b], out)?)
}

/// Mean and population standard deviation.
pub fn moments(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Down-weights surrogate labels whose distribution drifts from the true
/// labels: `exp(−|μ_p − μ_t| · |σ_p − σ_t|)`.
pub fn surrogate_weight(mu_p: f64, sigma_p: f64, mu_t: f64, sigma_t: f64) -> f64 {
    (-(mu_p - mu_t).abs() * (sigma_p - sigma_t).abs()).exp()
}

/// Row weights for the structural loss: 1 for labeled rows, `weight` for
/// rows carrying surrogate labels.
pub fn row_weights(labeled: &[bool], weight: f64) -> Vec<f64> {
    labeled
        .iter()
        .map(|&l| if l { 1.0 } else { weight })
        .collect()
}

fn floored_ln(x: f64) -> f64 {
    x.max(LOG_FLOOR).ln()
}

/// `log p − log mid` with floored logs; a single log when neither floor
/// binds.
fn log_ratio(p: f64, mid: f64) -> f64 {
    if p > LOG_FLOOR && mid > LOG_FLOOR {
        (p / mid).ln()
    } else {
        floored_ln(p) - floored_ln(mid)
    }
}

/// `p · log(p / ((p + q) / 2))` with floored logs; zero when `p` is zero.
pub fn kl_to_midpoint_term(p: f64, q: f64) -> f64 {
    if p == 0.0 {
        return 0.0;
    }
    p * log_ratio(p, 0.5 * (p + q))
}

fn check_stochastic(name: &str, m: &[f64], b: usize) -> Result<()> {
    for (i, row) in m.chunks_exact(b).enumerate() {
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::Tensor(TensorError::Contract(format!(
                "row {i} of {name} sums to {s}, not 1"
            ))));
        }
    }
    Ok(())
}

/// Holds `∂loss/∂M`, computed alongside the value.
#[derive(Debug)]
struct JsLoss {
    grad: Vec<f64>,
}

impl Function for JsLoss {
    fn name(&self) -> &'static str {
        "js_supervision"
    }

    fn backward(&self, ctx: &BackwardContext<'_>) -> htgnn_autograd::Result<Vec<Option<Vec<f64>>>> {
        let g = ctx.grad_output[0];
        Ok(vec![Some(self.grad.iter().map(|d| g * d).collect())])
    }
}

/// Value and gradient with respect to `m` of the weighted loss.
fn js_value_and_grad(m: &[f64], n: &[f64], cols: usize, weights: &[f64]) -> (f64, Vec<f64>) {
    let mut total = 0.0;
    let mut grad = vec![0.0; m.len()];
    for (i, &r) in weights.iter().enumerate() {
        if r == 0.0 {
            continue;
        }
        let mut row = 0.0;
        for idx in i * cols..(i + 1) * cols {
            let (p, q) = (m[idx], n[idx]);
            let mid = 0.5 * (p + q);
            let lr = log_ratio(p, mid);
            if p != 0.0 {
                row += p * lr;
            }
            let dp = lr + if p > LOG_FLOOR { 1.0 } else { 0.0 }
                - if mid > LOG_FLOOR { 0.5 * p / mid } else { 0.0 };
            grad[idx] = 0.5 * r * dp;
        }
        total += 0.5 * r * row;
    }
    (total, grad)
}

/// `½ Σ_i r_i KL(M_i ‖ (M_i + N_i)/2)`; gradients flow into `M` only.
pub fn js_supervision_loss(tape: &mut Tape, m: Var, n: &Tensor, weights: &[f64]) -> Result<Var> {
    let (b, c) = tape.value(m).dims2();
    if n.shape() != [b, c] || weights.len() != b {
        return Err(Error::Tensor(TensorError::Shape {
            op: "js_supervision",
            lhs: vec![b, c],
            rhs: n.shape().to_vec(),
        }));
    }
    check_stochastic("M", tape.value(m).data(), c)?;
    check_stochastic("N", n.data(), c)?;
    let (value, grad) = js_value_and_grad(tape.value(m).data(), n.data(), c, weights);
    Ok(tape.apply(Box::new(JsLoss { grad }), &[m], Tensor::scalar(value)))
}

/// Plain evaluation of [`js_supervision_loss`].
pub fn js_value(m: &[f64], n: &[f64], cols: usize, weights: &[f64]) -> f64 {
    let mut total = 0.0;
    for (i, &r) in weights.iter().enumerate() {
        if r == 0.0 {
            continue;
        }
        let row: f64 = (0..cols)
            .map(|j| kl_to_midpoint_term(m[i * cols + j], n[i * cols + j]))
            .sum();
        total += 0.5 * r * row;
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn complete_case() {
        let x = Tensor::from_rows(&[vec![0.0], vec![1.0], vec![5.0]]).unwrap();
        let g = build_knn_hyperedges(&x, 2).unwrap();
        assert!(g.incidence().data().iter().all(|&v| v == 1.0));
        assert_eq!(g.vertex_degrees, vec![3.0; 3]);
        assert_eq!(g.edge_degrees, vec![3.0; 3]);
    }

    #[test]
    fn k_must_be_below_batch() {
        let x = Tensor::zeros(&[3, 2]);
        assert!(build_knn_hyperedges(&x, 3).is_err());
        assert!(build_knn_hyperedges(&x, 0).is_err());
    }

    #[test]
    fn surrogate_weight_examples() {
        assert_eq!(surrogate_weight(2.0, 9.0, 2.0, 1.0), 1.0);
        assert!((surrogate_weight(1.0, 2.0, 0.0, 1.0) - (-1f64).exp()).abs() < 1e-15);
    }
}
