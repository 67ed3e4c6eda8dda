//! The assembled network: static features, hypergraph convolution,
//! temporal encoder, experts and towers, plus the training objective.

use htgnn_autograd::checkpoint::Entry;
use htgnn_autograd::{ParamId, ParamStore, Tape, Tensor, Var};
use rand::Rng;

use crate::config::{LossMode, RunConfig};
use crate::error::{Error, Result};
use crate::experts::{BnUpdate, ExpertConfig, Moe, TowerParams};
use crate::featurizer::{encode_static, FeatureSchema, StaticTables};
use crate::hypergraph::{
    build_knn_hyperedges, embedding_dissimilarity_m, hypergraph_convolve, js_supervision_loss,
    label_difference_n, moments, row_weights, surrogate_weight, Hypergraph,
};
use crate::metrics::Scored;
use crate::objective::{ce_sum, huber_delta, huber_sum, squared_sum, LossReport, TaskLoss};
use crate::record::{Task, UserRecord};
use crate::synthdata::derived_rng;
use crate::temporal::{tokenize_record, SequenceBatch, TemporalDims, TemporalEncoder};

pub const N_TASKS: usize = 6;
const SCALE_ENTRY: &str = "targets.scale";

/// A record resolved against the schema once, ahead of training.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedUser {
    pub user_id: u64,
    pub cat_ids: Vec<usize>,
    pub stat_ids: Vec<usize>,
    pub tokens: Vec<Vec<usize>>,
    pub labels: [Option<f64>; N_TASKS],
    pub obs_days: u32,
}

pub fn prepare(
    records: &[UserRecord],
    schema: &FeatureSchema,
    max_len: usize,
) -> Result<Vec<PreparedUser>> {
    records
        .iter()
        .map(|r| {
            Ok(PreparedUser {
                user_id: r.user_id,
                cat_ids: schema.cat_ids(r)?,
                stat_ids: schema.stat_ids(r)?,
                tokens: tokenize_record(r, schema, max_len)?,
                labels: r.labels_array(),
                obs_days: r.obs_days,
            })
        })
        .collect()
}

/// Per-task mean of the observed labels; targets are divided by it so every
/// task trains on a unit-mean scale.
pub fn target_scales(users: &[PreparedUser]) -> [f64; N_TASKS] {
    let mut out = [1.0; N_TASKS];
    for (t, s) in out.iter_mut().enumerate() {
        let v: Vec<f64> = users.iter().filter_map(|u| u.labels[t]).collect();
        let m = v.iter().sum::<f64>() / v.len().max(1) as f64;
        if m > 0.0 {
            *s = m;
        }
    }
    out
}

#[derive(Debug, Clone)]
struct HgLayer {
    w: ParamId,
    theta: ParamId,
}

/// Quantities that are piecewise constant in the parameters. Gradient
/// checking pins them so finite differences see a smooth function.
#[derive(Debug, Clone)]
pub struct Frozen {
    pub graph: Option<Hypergraph>,
    pub deltas: [Option<f64>; N_TASKS],
    pub js: Vec<Option<(Tensor, Vec<f64>)>>,
}

pub struct Output {
    pub loss: Var,
    pub report: LossReport,
    pub bn: Vec<BnUpdate>,
    /// Regression outputs `[b × 1]` on the normalized scale.
    pub reg: Vec<Var>,
    /// Classification probabilities `[b × 1]`.
    pub prob: Vec<Var>,
    pub frozen: Frozen,
}

#[derive(Debug, Clone)]
pub struct HtGnn {
    pub config: RunConfig,
    pub schema: FeatureSchema,
    pub scales: [f64; N_TASKS],
    pub store: ParamStore,
    tables: StaticTables,
    hg: Vec<HgLayer>,
    temporal: TemporalEncoder,
    moe: Moe,
    reg: Vec<TowerParams>,
    cls: Vec<TowerParams>,
}

impl HtGnn {
    pub fn new(config: RunConfig, schema: FeatureSchema, scales: [f64; N_TASKS]) -> Result<Self> {
        config.validate()?;
        if schema.sequences.len() != config.seq_types {
            return Err(Error::Config(format!(
                "schema has {} sequence types, config asks for {}",
                schema.sequences.len(),
                config.seq_types
            )));
        }
        let mut rng = derived_rng(config.seed, 0x1417, 0);
        let mut store = ParamStore::new();
        let tables = StaticTables::register(&mut store, &schema, &mut rng)?;
        let d = schema.static_dim();
        let mut hg = Vec::new();
        if !config.ablation.no_hypergraph {
            for l in 0..config.hg_layers {
                let w = store.add(
                    format!("hg.layer{l}.w"),
                    Tensor::full(&[config.batch_size], 1.0),
                )?;
                let bound = (6.0 / (2 * d) as f64).sqrt();
                let theta = store.add(
                    format!("hg.layer{l}.theta"),
                    Tensor::uniform(&[d, d], bound, &mut rng),
                )?;
                hg.push(HgLayer { w, theta });
            }
        }
        let temporal = TemporalEncoder::register(
            &mut store,
            &schema,
            &TemporalDims {
                max_len: config.max_seq_len,
                dim: config.model_dim,
                heads: config.heads,
                ffn_hidden: config.ffn_hidden,
                mask_dim: config.mask_dim,
            },
            &mut rng,
        )?;
        let moe = Moe::register(
            &mut store,
            &ExpertConfig {
                tasks: N_TASKS,
                n_task_experts: config.n_task_experts,
                n_shared_experts: config.n_shared_experts,
                layers: config.moe_layers,
                expert_dim: config.expert_dim,
                input_dim: d + config.seq_types * config.model_dim,
                mask_dim: config.mask_dim,
                dynamic_gates: !config.ablation.no_dynamic_weighting,
            },
            &mut rng,
        )?;
        let dynamic = !config.ablation.no_dynamic_tower;
        let mut reg = Vec::with_capacity(N_TASKS);
        let mut cls = Vec::with_capacity(N_TASKS);
        for task in Task::ALL {
            for (head, out) in [("reg", &mut reg), ("cls", &mut cls)] {
                out.push(TowerParams::register(
                    &mut store,
                    &format!("tower.{}.{head}", task.key()),
                    config.mask_dim,
                    config.expert_dim,
                    config.tower_hidden,
                    dynamic,
                    &mut rng,
                )?);
            }
        }
        Ok(Self {
            config,
            schema,
            scales,
            store,
            tables,
            hg,
            temporal,
            moe,
            reg,
            cls,
        })
    }

    /// Builds a model and fits its schema and target scales on `records`.
    pub fn fit_new(config: RunConfig, records: &[UserRecord]) -> Result<(Self, Vec<PreparedUser>)> {
        let schema = FeatureSchema::fit(records, config.seq_types, config.embed_dim)?;
        let users = prepare(records, &schema, config.max_seq_len)?;
        let scales = target_scales(&users);
        Ok((Self::new(config, schema, scales)?, users))
    }

    pub fn sequence_batch<R: Rng + ?Sized>(
        &self,
        users: &[&PreparedUser],
        train: bool,
        rng: &mut R,
    ) -> Result<SequenceBatch> {
        let toks: Vec<&[Vec<usize>]> = users.iter().map(|u| u.tokens.as_slice()).collect();
        SequenceBatch::assemble(
            &toks,
            self.config.seq_types,
            self.config.max_seq_len,
            train,
            rng,
        )
    }

    /// Full forward pass and loss over one batch. `store` may differ from
    /// `self.store` (gradient checking perturbs a copy).
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        users: &[&PreparedUser],
        seq: &SequenceBatch,
        train: bool,
        frozen: Option<&Frozen>,
    ) -> Result<Output> {
        let cfg = &self.config;
        let b = users.len();
        if b == 0 {
            return Err(Error::Data("empty batch".into()));
        }
        let cat: Vec<Vec<usize>> = users.iter().map(|u| u.cat_ids.clone()).collect();
        let stat: Vec<Vec<usize>> = users.iter().map(|u| u.stat_ids.clone()).collect();
        let st = encode_static(tape, store, &self.tables, &cat, &stat)?;

        let mut graph = None;
        let mut u_h = st.u_sc;
        if !self.hg.is_empty() {
            let g = match frozen.and_then(|f| f.graph.clone()) {
                Some(g) => g,
                None if b == 1 => Hypergraph::from_edges(1, vec![vec![0]])?,
                None => build_knn_hyperedges(tape.value(st.u_sc), cfg.k_neighbors.min(b - 1))?,
            };
            for layer in &self.hg {
                let w = tape.param(store, layer.w);
                let theta = tape.param(store, layer.theta);
                u_h = hypergraph_convolve(tape, u_h, &g, w, theta)?;
            }
            graph = Some(g);
        }

        let temporal = self.temporal.encode(tape, store, seq)?;
        let u0 = tape.concat_cols(&[u_h, temporal.u_se])?;
        let (reps, bn) = self.moe.forward(tape, store, u0, temporal.u_mask, train)?;

        let mut reg = Vec::with_capacity(N_TASKS);
        let mut prob = Vec::with_capacity(N_TASKS);
        for ((r, c), &rep) in self.reg.iter().zip(&self.cls).zip(&reps) {
            reg.push(r.forward(tape, store, rep, temporal.u_mask)?);
            let z = c.forward(tape, store, rep, temporal.u_mask)?;
            prob.push(tape.sigmoid(z));
        }

        let betas = cfg.effective_betas();
        let use_js =
            cfg.loss_mode == LossMode::Multi && !self.hg.is_empty() && betas[0] > 0.0 && b >= 2;
        let m = if use_js {
            Some(embedding_dissimilarity_m(tape, u_h)?)
        } else {
            None
        };

        let mut tasks = Vec::with_capacity(N_TASKS);
        let mut terms: Vec<(Var, f64)> = Vec::new();
        let mut deltas = [None; N_TASKS];
        let mut js_frozen = Vec::with_capacity(N_TASKS);
        for t in 0..N_TASKS {
            let labeled: Vec<bool> = users.iter().map(|u| u.labels[t].is_some()).collect();
            let y: Vec<f64> = users
                .iter()
                .map(|u| u.labels[t].map_or(0.0, |l| l / self.scales[t]))
                .collect();
            let c: Vec<f64> = users
                .iter()
                .map(|u| {
                    if u.labels[t].is_some_and(|l| l > 0.0) {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect();
            let pred = tape.value(reg[t]).data().to_vec();
            let n_lab = labeled.iter().filter(|&&l| l).count();
            let mut tl = TaskLoss {
                labeled: n_lab,
                censored: b - n_lab,
                ..TaskLoss::default()
            };
            let mut js_entry = None;
            if n_lab > 0 {
                let delta = match frozen.and_then(|f| f.deltas[t]) {
                    Some(d) => d,
                    None => {
                        let (yl, pl): (Vec<f64>, Vec<f64>) = (0..b)
                            .filter(|&i| labeled[i])
                            .map(|i| (y[i], pred[i]))
                            .unzip();
                        huber_delta(&yl, &pl)?
                    }
                };
                deltas[t] = Some(delta);
                tl.delta = Some(delta);
                let ce = ce_sum(tape, prob[t], &c, &labeled)?;
                let hu = huber_sum(tape, reg[t], &y, &labeled, delta)?;
                let se = squared_sum(tape, reg[t], &y, &labeled)?;
                tl.ce = tape.value(ce).item();
                tl.huber = tape.value(hu).item();
                tl.mse = tape.value(se).item();
                match cfg.loss_mode {
                    LossMode::Multi => {
                        terms.push((ce, betas[1]));
                        terms.push((hu, betas[2]));
                    }
                    LossMode::Huber => terms.push((hu, 1.0)),
                    LossMode::Mse => terms.push((se, 1.0)),
                }
                if let Some(m) = m {
                    let (n_mat, weights) = match frozen.and_then(|f| f.js.get(t).cloned().flatten())
                    {
                        Some(x) => x,
                        None => js_targets(&y, &pred, &labeled)?,
                    };
                    let js = js_supervision_loss(tape, m, &n_mat, &weights)?;
                    tl.js = tape.value(js).item();
                    terms.push((js, betas[0]));
                    js_entry = Some((n_mat, weights));
                }
            }
            js_frozen.push(js_entry);
            tasks.push(tl);
        }

        let inv_n = 1.0 / b as f64;
        let mut loss = tape.constant(Tensor::scalar(0.0));
        for (v, beta) in terms {
            if beta == 0.0 {
                continue;
            }
            let s = tape.scale(v, beta * inv_n);
            loss = tape.add(loss, s)?;
        }
        let total = tape.value(loss).item();
        Ok(Output {
            loss,
            report: LossReport {
                tasks,
                batch: b,
                total,
            },
            bn,
            reg,
            prob,
            frozen: Frozen {
                graph,
                deltas,
                js: js_frozen,
            },
        })
    }

    /// Eval-mode predictions for `users` in batches of the configured size.
    pub fn predict(&self, users: &[PreparedUser]) -> Result<Vec<Scored>> {
        let mut out = Vec::with_capacity(users.len());
        // eval mode never draws
        let mut rng = derived_rng(0, 0, 0);
        for chunk in users.chunks(self.config.batch_size) {
            let refs: Vec<&PreparedUser> = chunk.iter().collect();
            let seq = self.sequence_batch(&refs, false, &mut rng)?;
            let mut tape = Tape::new();
            let o = self.forward(&mut tape, &self.store, &refs, &seq, false, None)?;
            for (i, u) in chunk.iter().enumerate() {
                let mut values = [0.0; N_TASKS];
                let mut probs = [0.0; N_TASKS];
                for t in 0..N_TASKS {
                    values[t] = tape.value(o.reg[t]).data()[i] * self.scales[t];
                    probs[t] = tape.value(o.prob[t]).data()[i];
                }
                out.push(Scored {
                    obs_days: u.obs_days,
                    labels: u.labels,
                    values,
                    probs,
                });
            }
        }
        Ok(out)
    }

    /// Mean eval-mode loss per user over `users`.
    pub fn eval_loss(&self, users: &[PreparedUser]) -> Result<f64> {
        let mut rng = derived_rng(0, 0, 0);
        let mut total = 0.0;
        for chunk in users.chunks(self.config.batch_size) {
            let refs: Vec<&PreparedUser> = chunk.iter().collect();
            let seq = self.sequence_batch(&refs, false, &mut rng)?;
            let mut tape = Tape::new();
            let o = self.forward(&mut tape, &self.store, &refs, &seq, false, None)?;
            total += o.report.total * chunk.len() as f64;
        }
        Ok(total / users.len().max(1) as f64)
    }

    pub fn to_entries(&self) -> Vec<Entry> {
        let mut entries = self.schema.to_entries();
        entries.push(Entry {
            name: SCALE_ENTRY.into(),
            tensor: Tensor::new(&[N_TASKS], self.scales.to_vec()).expect("scale shape"),
        });
        entries.extend(self.store.iter().map(|(_, p)| Entry {
            name: p.name.clone(),
            tensor: p.tensor.detached(),
        }));
        entries
    }

    /// Rebuilds a model from checkpoint entries written by [`Self::to_entries`].
    pub fn from_entries(config: RunConfig, entries: &[Entry]) -> Result<Self> {
        let schema = FeatureSchema::from_entries(entries)?;
        let scale = entries
            .iter()
            .find(|e| e.name == SCALE_ENTRY)
            .ok_or_else(|| Error::Data(format!("checkpoint lacks {SCALE_ENTRY}")))?;
        let mut scales = [0.0; N_TASKS];
        if scale.tensor.numel() != N_TASKS {
            return Err(Error::Data(format!(
                "{SCALE_ENTRY} has {} values",
                scale.tensor.numel()
            )));
        }
        scales.copy_from_slice(scale.tensor.data());
        let mut model = Self::new(config, schema, scales)?;
        let mut loaded = 0;
        for e in entries {
            if let Some(id) = model.store.id(&e.name) {
                let p = model.store.get_mut(id);
                if p.tensor.shape() != e.tensor.shape() {
                    return Err(Error::Data(format!(
                        "checkpoint entry {} has shape {:?}, model expects {:?}",
                        e.name,
                        e.tensor.shape(),
                        p.tensor.shape()
                    )));
                }
                p.tensor.data_mut().copy_from_slice(e.tensor.data());
                loaded += 1;
            }
        }
        if loaded != model.store.len() {
            return Err(Error::Data(format!(
                "checkpoint holds {loaded} of {} model tensors",
                model.store.len()
            )));
        }
        Ok(model)
    }
}

/// `N` and row weights for one task. Censored rows take the model's
/// (detached) prediction as a surrogate label.
pub fn js_targets(y: &[f64], pred: &[f64], labeled: &[bool]) -> Result<(Tensor, Vec<f64>)> {
    let mut truth = Vec::new();
    let mut surrogate = Vec::new();
    let mixed: Vec<f64> = (0..y.len())
        .map(|i| {
            if labeled[i] {
                truth.push(y[i]);
                y[i]
            } else {
                surrogate.push(pred[i]);
                pred[i]
            }
        })
        .collect();
    let weight = if surrogate.is_empty() {
        1.0
    } else {
        let (mu_t, s_t) = moments(&truth);
        let (mu_p, s_p) = moments(&surrogate);
        surrogate_weight(mu_p, s_p, mu_t, s_t)
    };
    Ok((label_difference_n(&mixed)?, row_weights(labeled, weight)))
}
