//! Task-adaptive mixture of experts and mask-conditioned prediction towers.

use htgnn_autograd::{
    kernels, BatchMoments, ParamId, ParamStore, RunningStats, Tape, Tensor, TensorError, Var,
};
use htgnn_autograd::{BackwardContext, Function};
use rand::Rng;

use crate::error::{Error, Result};
use crate::temporal::Linear;

/// One expert: `ReLU(BatchNorm(x·W + b))`.
#[derive(Debug, Clone)]
pub struct ExpertParams {
    pub w: ParamId,
    pub b: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl ExpertParams {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        d_e: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = 1.0 / (d_in as f64).sqrt();
        Ok(Self {
            w: store.add(
                format!("{prefix}.w"),
                Tensor::uniform(&[d_in, d_e], bound, rng),
            )?,
            b: store.add(format!("{prefix}.b"), Tensor::zeros(&[d_e]))?,
            gamma: store.add(format!("{prefix}.bn.gamma"), Tensor::full(&[d_e], 1.0))?,
            beta: store.add(format!("{prefix}.bn.beta"), Tensor::zeros(&[d_e]))?,
            running_mean: store
                .add_buffer(format!("{prefix}.bn.running_mean"), Tensor::zeros(&[d_e]))?,
            running_var: store.add_buffer(
                format!("{prefix}.bn.running_var"),
                Tensor::full(&[d_e], 1.0),
            )?,
        })
    }
}

/// Batch statistics to fold into running buffers after an optimizer step.
#[derive(Debug, Clone)]
pub struct BnUpdate {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub moments: BatchMoments,
}

impl BnUpdate {
    pub fn apply(&self, store: &mut ParamStore) {
        let mut stats = RunningStats {
            mean: store.tensor(self.running_mean).data().to_vec(),
            var: store.tensor(self.running_var).data().to_vec(),
        };
        stats.update(&self.moments);
        store
            .get_mut(self.running_mean)
            .tensor
            .data_mut()
            .copy_from_slice(&stats.mean);
        store
            .get_mut(self.running_var)
            .tensor
            .data_mut()
            .copy_from_slice(&stats.var);
    }
}

fn as_row(tape: &mut Tape, store: &ParamStore, id: ParamId) -> Result<Var> {
    let v = tape.param(store, id);
    let n = tape.value(v).numel();
    Ok(tape.reshape(v, &[1, n])?)
}

fn concat_vec(tape: &mut Tape, store: &ParamStore, ids: &[ParamId]) -> Result<Var> {
    let rows = ids
        .iter()
        .map(|&id| as_row(tape, store, id))
        .collect::<Result<Vec<_>>>()?;
    let cat = tape.concat_cols(&rows)?;
    let n = tape.value(cat).numel();
    Ok(tape.reshape(cat, &[n])?)
}

/// Runs experts that share an input as one wide layer. Batch norm is
/// per-column, so this equals running them separately. Returns
/// `[b × m·d_e]` with expert `j` in columns `j·d_e..(j+1)·d_e`.
pub fn expert_group_forward(
    tape: &mut Tape,
    store: &ParamStore,
    x: Var,
    experts: &[ExpertParams],
    train: bool,
) -> Result<(Var, Vec<BnUpdate>)> {
    if experts.is_empty() {
        return Err(Error::Config("expert group is empty".into()));
    }
    let ws = experts
        .iter()
        .map(|e| tape.param(store, e.w))
        .collect::<Vec<_>>();
    let w = if ws.len() == 1 {
        ws[0]
    } else {
        tape.concat_cols(&ws)?
    };
    let pick = |f: fn(&ExpertParams) -> ParamId| experts.iter().map(f).collect::<Vec<_>>();
    let b = concat_vec(tape, store, &pick(|e| e.b))?;
    let gamma = concat_vec(tape, store, &pick(|e| e.gamma))?;
    let beta = concat_vec(tape, store, &pick(|e| e.beta))?;
    let z = tape.linear(x, w, b)?;
    let d_e = store.tensor(experts[0].b).numel();
    let mut updates = Vec::new();
    let normed = if train {
        let (y, moments) = tape.batch_norm_train(z, gamma, beta)?;
        for (j, e) in experts.iter().enumerate() {
            updates.push(BnUpdate {
                running_mean: e.running_mean,
                running_var: e.running_var,
                moments: BatchMoments {
                    mean: moments.mean[j * d_e..(j + 1) * d_e].to_vec(),
                    var: moments.var[j * d_e..(j + 1) * d_e].to_vec(),
                },
            });
        }
        y
    } else {
        let mut stats = RunningStats {
            mean: Vec::new(),
            var: Vec::new(),
        };
        for e in experts {
            stats
                .mean
                .extend_from_slice(store.tensor(e.running_mean).data());
            stats
                .var
                .extend_from_slice(store.tensor(e.running_var).data());
        }
        tape.batch_norm_eval(z, gamma, beta, &stats)?
    };
    Ok((tape.relu(normed), updates))
}

pub fn expert_forward(
    tape: &mut Tape,
    store: &ParamStore,
    x: Var,
    expert: &ExpertParams,
    train: bool,
) -> Result<(Var, Vec<BnUpdate>)> {
    expert_group_forward(tape, store, x, std::slice::from_ref(expert), train)
}

#[derive(Debug)]
struct WeightedSum {
    experts: usize,
    dim: usize,
}

impl Function for WeightedSum {
    fn name(&self) -> &'static str {
        "weighted_sum"
    }

    fn backward(&self, ctx: &BackwardContext<'_>) -> htgnn_autograd::Result<Vec<Option<Vec<f64>>>> {
        let (gates, e) = (ctx.inputs[0].data(), ctx.inputs[1].data());
        let (m, d) = (self.experts, self.dim);
        let g = ctx.grad_output;
        let rows = gates.len() / m;
        let mut gg = vec![0.0; gates.len()];
        let mut ge = vec![0.0; e.len()];
        for r in 0..rows {
            let go = &g[r * d..(r + 1) * d];
            for j in 0..m {
                let block = r * m * d + j * d;
                gg[r * m + j] = kernels::dot(go, &e[block..block + d]);
                kernels::axpy(gates[r * m + j], go, &mut ge[block..block + d]);
            }
        }
        Ok(vec![Some(gg), Some(ge)])
    }
}

/// `out_r = Σ_j gates[r, j] · experts[r, j·d..(j+1)·d]`.
pub fn weighted_sum(tape: &mut Tape, gates: Var, experts: Var) -> Result<Var> {
    let (b, m) = tape.value(gates).dims2();
    let (be, width) = tape.value(experts).dims2();
    if be != b || width % m != 0 {
        return Err(Error::Tensor(TensorError::Shape {
            op: "weighted_sum",
            lhs: vec![b, m],
            rhs: vec![be, width],
        }));
    }
    let d = width / m;
    let (gv, ev) = (tape.value(gates).data(), tape.value(experts).data());
    let mut out = vec![0.0; b * d];
    for r in 0..b {
        for j in 0..m {
            let block = r * width + j * d;
            kernels::axpy(
                gv[r * m + j],
                &ev[block..block + d],
                &mut out[r * d..(r + 1) * d],
            );
        }
    }
    let out = Tensor::new(&[b, d], out)?;
    Ok(tape.apply(
        Box::new(WeightedSum { experts: m, dim: d }),
        &[gates, experts],
        out,
    ))
}

/// Gate head over `m` experts.
#[derive(Debug, Clone)]
pub enum GateParams {
    /// `sigmoid(u_mask · W_g + b_g)`.
    Dynamic(Linear),
    /// `sigmoid(b_g)`, identical for every user.
    Static(ParamId),
}

impl GateParams {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        mask_dim: usize,
        m: usize,
        dynamic: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if dynamic {
            Ok(GateParams::Dynamic(Linear::register(
                store, prefix, mask_dim, m, rng,
            )?))
        } else {
            Ok(GateParams::Static(
                store.add(format!("{prefix}.b"), Tensor::zeros(&[m]))?,
            ))
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, u_mask: Var) -> Result<Var> {
        let z = match self {
            GateParams::Dynamic(lin) => lin.forward(tape, store, u_mask)?,
            GateParams::Static(b) => {
                let rows = tape.value(u_mask).dims2().0;
                let bias = tape.param(store, *b);
                let m = tape.value(bias).numel();
                let zeros = tape.constant(Tensor::zeros(&[rows, m]));
                tape.add_row(zeros, bias)?
            }
        };
        Ok(tape.sigmoid(z))
    }
}

/// Gate weights for one head; see [`GateParams`].
pub fn gate_weights(
    tape: &mut Tape,
    store: &ParamStore,
    gate: &GateParams,
    u_mask: Var,
) -> Result<Var> {
    gate.forward(tape, store, u_mask)
}

/// `Σ_j ω_j E_j` over the task's own experts followed by the shared ones.
pub fn task_layer(
    tape: &mut Tape,
    store: &ParamStore,
    task_out: Var,
    shared_out: Var,
    gate: &GateParams,
    u_mask: Var,
) -> Result<Var> {
    let e = tape.concat_cols(&[task_out, shared_out])?;
    let w = gate.forward(tape, store, u_mask)?;
    weighted_sum(tape, w, e)
}

/// `Σ_j ω_j E_j` over every task's experts followed by the shared ones.
pub fn shared_layer(
    tape: &mut Tape,
    store: &ParamStore,
    all_task_outputs: &[Var],
    shared_out: Var,
    gate: &GateParams,
    u_mask: Var,
) -> Result<Var> {
    let mut parts = all_task_outputs.to_vec();
    parts.push(shared_out);
    let e = tape.concat_cols(&parts)?;
    let w = gate.forward(tape, store, u_mask)?;
    weighted_sum(tape, w, e)
}

/// Per-user tower matrices `W1 [d_e × h]`, `W2 [h × h]`, `W3 [h × 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TowerWeights {
    pub w1: Tensor,
    pub w2: Tensor,
    pub w3: Tensor,
}

pub fn tower_param_count(d_e: usize, h: usize) -> usize {
    d_e * h + h * h + h
}

/// Splits `u_mask · W_d + b_d` row-major into `W1`, `W2`, `W3`.
pub fn dynamic_tower_weights(
    u_mask: &[f64],
    w_d: &Tensor,
    b_d: &Tensor,
    d_e: usize,
    h: usize,
) -> Result<TowerWeights> {
    let (dm, p) = w_d.dims2();
    if p != tower_param_count(d_e, h) || b_d.numel() != p || u_mask.len() != dm {
        return Err(Error::Config(format!(
            "tower generator produces {p} values, towers need {}",
            tower_param_count(d_e, h)
        )));
    }
    let mut flat = b_d.data().to_vec();
    for (i, &u) in u_mask.iter().enumerate() {
        kernels::axpy(u, w_d.row(i), &mut flat);
    }
    Ok(TowerWeights {
        w1: Tensor::new(&[d_e, h], flat[..d_e * h].to_vec())?,
        w2: Tensor::new(&[h, h], flat[d_e * h..d_e * h + h * h].to_vec())?,
        w3: Tensor::new(&[h, 1], flat[d_e * h + h * h..].to_vec())?,
    })
}

/// `sigmoid(sigmoid(u·W1)·W2)·W3`, with a final sigmoid for classification.
pub fn tower_forward(u: &[f64], tw: &TowerWeights, classification: bool) -> f64 {
    let (d_e, h) = tw.w1.dims2();
    debug_assert_eq!(u.len(), d_e);
    let mut h1 = vec![0.0; h];
    for (i, &ui) in u.iter().enumerate() {
        kernels::axpy(ui, tw.w1.row(i), &mut h1);
    }
    h1.iter_mut().for_each(|v| *v = kernels::sigmoid(*v));
    let mut h2 = vec![0.0; h];
    for (i, &a) in h1.iter().enumerate() {
        kernels::axpy(a, tw.w2.row(i), &mut h2);
    }
    h2.iter_mut().for_each(|v| *v = kernels::sigmoid(*v));
    let out = kernels::dot(&h2, tw.w3.data());
    if classification {
        kernels::sigmoid(out)
    } else {
        out
    }
}

#[derive(Debug)]
struct DynamicTower {
    d_e: usize,
    h: usize,
    /// Saved hidden activations per row: `h1` then `h2`.
    hidden: Vec<f64>,
}

impl Function for DynamicTower {
    fn name(&self) -> &'static str {
        "dynamic_tower"
    }

    fn backward(&self, ctx: &BackwardContext<'_>) -> htgnn_autograd::Result<Vec<Option<Vec<f64>>>> {
        let (u, p) = (ctx.inputs[0].data(), ctx.inputs[1].data());
        let (d_e, h) = (self.d_e, self.h);
        let np = tower_param_count(d_e, h);
        let rows = u.len() / d_e;
        let mut gu = vec![0.0; u.len()];
        let mut gp = vec![0.0; p.len()];
        let mut dz2 = vec![0.0; h];
        let mut dz1 = vec![0.0; h];
        for r in 0..rows {
            let g = ctx.grad_output[r];
            let ur = &u[r * d_e..(r + 1) * d_e];
            let pr = &p[r * np..(r + 1) * np];
            let (w1, rest) = pr.split_at(d_e * h);
            let (w2, w3) = rest.split_at(h * h);
            let h1 = &self.hidden[r * 2 * h..r * 2 * h + h];
            let h2 = &self.hidden[r * 2 * h + h..(r + 1) * 2 * h];
            let gpr = &mut gp[r * np..(r + 1) * np];
            let (gw1, grest) = gpr.split_at_mut(d_e * h);
            let (gw2, gw3) = grest.split_at_mut(h * h);
            for j in 0..h {
                gw3[j] = g * h2[j];
                dz2[j] = g * w3[j] * h2[j] * (1.0 - h2[j]);
            }
            for i in 0..h {
                kernels::axpy(h1[i], &dz2, &mut gw2[i * h..(i + 1) * h]);
                let dh1 = kernels::dot(&w2[i * h..(i + 1) * h], &dz2);
                dz1[i] = dh1 * h1[i] * (1.0 - h1[i]);
            }
            let gur = &mut gu[r * d_e..(r + 1) * d_e];
            for i in 0..d_e {
                kernels::axpy(ur[i], &dz1, &mut gw1[i * h..(i + 1) * h]);
                gur[i] = kernels::dot(&w1[i * h..(i + 1) * h], &dz1);
            }
        }
        Ok(vec![Some(gu), Some(gp)])
    }
}

/// Applies a per-row generated tower: row `r` of `params` is the flattened
/// `(W1, W2, W3)` for row `r` of `u`. Returns the pre-sigmoid `[b × 1]`.
pub fn dynamic_tower(tape: &mut Tape, u: Var, params: Var, h: usize) -> Result<Var> {
    let (b, d_e) = tape.value(u).dims2();
    let np = tower_param_count(d_e, h);
    if tape.value(params).shape() != [b, np] {
        return Err(Error::Tensor(TensorError::Shape {
            op: "dynamic_tower",
            lhs: vec![b, np],
            rhs: tape.value(params).shape().to_vec(),
        }));
    }
    let (ud, pd) = (tape.value(u).data(), tape.value(params).data());
    let mut out = vec![0.0; b];
    let mut hidden = vec![0.0; b * 2 * h];
    for r in 0..b {
        let tw = TowerWeights {
            w1: Tensor::new(&[d_e, h], pd[r * np..r * np + d_e * h].to_vec())?,
            w2: Tensor::new(
                &[h, h],
                pd[r * np + d_e * h..r * np + d_e * h + h * h].to_vec(),
            )?,
            w3: Tensor::new(&[h, 1], pd[r * np + d_e * h + h * h..(r + 1) * np].to_vec())?,
        };
        let ur = &ud[r * d_e..(r + 1) * d_e];
        let hr = &mut hidden[r * 2 * h..(r + 1) * 2 * h];
        for (i, &ui) in ur.iter().enumerate() {
            kernels::axpy(ui, tw.w1.row(i), &mut hr[..h]);
        }
        for v in &mut hr[..h] {
            *v = kernels::sigmoid(*v);
        }
        let (h1, h2) = hr.split_at_mut(h);
        for (i, &a) in h1.iter().enumerate() {
            kernels::axpy(a, tw.w2.row(i), h2);
        }
        for v in h2.iter_mut() {
            *v = kernels::sigmoid(*v);
        }
        out[r] = kernels::dot(h2, tw.w3.data());
    }
    let out = Tensor::new(&[b, 1], out)?;
    Ok(tape.apply(Box::new(DynamicTower { d_e, h, hidden }), &[u, params], out))
}

#[derive(Debug, Clone)]
pub enum TowerParams {
    /// Tower weights generated from `u_mask` by `W_d`, `b_d`.
    Dynamic {
        w_d: ParamId,
        b_d: ParamId,
        hidden: usize,
    },
    /// A single learned linear layer.
    Static(Linear),
}

impl TowerParams {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        mask_dim: usize,
        d_e: usize,
        h: usize,
        dynamic: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if !dynamic {
            return Ok(TowerParams::Static(Linear::register(
                store, prefix, d_e, 1, rng,
            )?));
        }
        let np = tower_param_count(d_e, h);
        let w_d = store.add(
            format!("{prefix}.w_d"),
            Tensor::uniform(&[mask_dim, np], 1.0 / (mask_dim as f64).sqrt(), rng),
        )?;
        // The bias is the tower used for an all-zero mask embedding, so each
        // segment gets the initialization its own layer would have.
        let mut b = Vec::with_capacity(np);
        for (count, fan_in) in [(d_e * h, d_e), (h * h, h), (h, h)] {
            let bound = 1.0 / (fan_in as f64).sqrt();
            b.extend((0..count).map(|_| rng.gen_range(-bound..bound)));
        }
        let b_d = store.add(format!("{prefix}.b_d"), Tensor::new(&[np], b)?)?;
        Ok(TowerParams::Dynamic {
            w_d,
            b_d,
            hidden: h,
        })
    }

    /// Raw tower output `[b × 1]`; the caller applies the classification
    /// sigmoid.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, u: Var, u_mask: Var) -> Result<Var> {
        match self {
            TowerParams::Static(lin) => lin.forward(tape, store, u),
            TowerParams::Dynamic { w_d, b_d, hidden } => {
                let w = tape.param(store, *w_d);
                let b = tape.param(store, *b_d);
                let p = tape.linear(u_mask, w, b)?;
                dynamic_tower(tape, u, p, *hidden)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct MoeLayer {
    /// `[task][expert]`.
    pub task_experts: Vec<Vec<ExpertParams>>,
    pub shared_experts: Vec<ExpertParams>,
    pub task_gates: Vec<GateParams>,
    /// Absent on the last layer, whose shared output nothing consumes.
    pub shared_gate: Option<GateParams>,
}

#[derive(Debug, Clone)]
pub struct ExpertConfig {
    pub tasks: usize,
    pub n_task_experts: usize,
    pub n_shared_experts: usize,
    pub layers: usize,
    pub expert_dim: usize,
    pub input_dim: usize,
    pub mask_dim: usize,
    pub dynamic_gates: bool,
}

#[derive(Debug, Clone)]
pub struct Moe {
    pub layers: Vec<MoeLayer>,
    pub tasks: usize,
}

impl Moe {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        cfg: &ExpertConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if cfg.n_task_experts == 0 || cfg.n_shared_experts == 0 || cfg.layers == 0 {
            return Err(Error::Config(
                "expert counts and layers must be positive".into(),
            ));
        }
        let mut layers = Vec::with_capacity(cfg.layers);
        for k in 0..cfg.layers {
            let d_in = if k == 0 {
                cfg.input_dim
            } else {
                cfg.expert_dim
            };
            let mut task_experts = Vec::with_capacity(cfg.tasks);
            let mut task_gates = Vec::with_capacity(cfg.tasks);
            for t in 0..cfg.tasks {
                let experts = (0..cfg.n_task_experts)
                    .map(|j| {
                        ExpertParams::register(
                            store,
                            &format!("moe.l{k}.task{t}.e{j}"),
                            d_in,
                            cfg.expert_dim,
                            rng,
                        )
                    })
                    .collect::<Result<Vec<_>>>()?;
                task_experts.push(experts);
                task_gates.push(GateParams::register(
                    store,
                    &format!("moe.l{k}.task{t}.gate"),
                    cfg.mask_dim,
                    cfg.n_task_experts + cfg.n_shared_experts,
                    cfg.dynamic_gates,
                    rng,
                )?);
            }
            let shared_experts = (0..cfg.n_shared_experts)
                .map(|j| {
                    ExpertParams::register(
                        store,
                        &format!("moe.l{k}.shared.e{j}"),
                        d_in,
                        cfg.expert_dim,
                        rng,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            let shared_gate = if k + 1 < cfg.layers {
                Some(GateParams::register(
                    store,
                    &format!("moe.l{k}.shared.gate"),
                    cfg.mask_dim,
                    cfg.tasks * cfg.n_task_experts + cfg.n_shared_experts,
                    cfg.dynamic_gates,
                    rng,
                )?)
            } else {
                None
            };
            layers.push(MoeLayer {
                task_experts,
                shared_experts,
                task_gates,
                shared_gate,
            });
        }
        Ok(Self {
            layers,
            tasks: cfg.tasks,
        })
    }

    /// Returns each task's final-layer representation.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        u0: Var,
        u_mask: Var,
        train: bool,
    ) -> Result<(Vec<Var>, Vec<BnUpdate>)> {
        let mut updates = Vec::new();
        let mut task_in = vec![u0; self.tasks];
        let mut shared_in = u0;
        for (k, layer) in self.layers.iter().enumerate() {
            let (task_outs, shared_out) = if k == 0 {
                // one input for everything: a single wide expert layer
                let all: Vec<ExpertParams> = layer
                    .task_experts
                    .iter()
                    .flatten()
                    .chain(&layer.shared_experts)
                    .cloned()
                    .collect();
                let (out, up) = expert_group_forward(tape, store, u0, &all, train)?;
                updates.extend(up);
                let d_e = store.tensor(all[0].b).numel();
                let mut col = 0;
                let mut task_outs = Vec::with_capacity(self.tasks);
                for experts in &layer.task_experts {
                    let w = experts.len() * d_e;
                    task_outs.push(tape.slice_cols(out, col, col + w)?);
                    col += w;
                }
                let total = tape.value(out).dims2().1;
                let shared = tape.slice_cols(out, col, total)?;
                (task_outs, shared)
            } else {
                let mut task_outs = Vec::with_capacity(self.tasks);
                for (t, experts) in layer.task_experts.iter().enumerate() {
                    let (out, up) = expert_group_forward(tape, store, task_in[t], experts, train)?;
                    updates.extend(up);
                    task_outs.push(out);
                }
                let (shared, up) =
                    expert_group_forward(tape, store, shared_in, &layer.shared_experts, train)?;
                updates.extend(up);
                (task_outs, shared)
            };
            for t in 0..self.tasks {
                task_in[t] = task_layer(
                    tape,
                    store,
                    task_outs[t],
                    shared_out,
                    &layer.task_gates[t],
                    u_mask,
                )?;
            }
            if let Some(gate) = &layer.shared_gate {
                shared_in = shared_layer(tape, store, &task_outs, shared_out, gate, u_mask)?;
            }
        }
        Ok((task_in, updates))
    }
}
