//! Data splitting, the training loop, checkpoints, ablation sweeps and the
//! end-to-end gradient check.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use htgnn_autograd::gradcheck::{self, GradcheckReport};
use htgnn_autograd::{checkpoint, Adam, ParamStore, Tape, TensorError};
use rand::seq::SliceRandom;
use serde::Serialize;

use crate::config::{LossMode, RunConfig};
use crate::error::{Error, Result};
use crate::metrics::{stratified_eval, EvalResult};
use crate::model::{prepare, HtGnn, PreparedUser};
use crate::objective::LossReport;
use crate::record::{Task, UserRecord};
use crate::synthdata::derived_rng;

const SALT_SPLIT: u64 = 0x5917;
const SALT_SHUFFLE: u64 = 0x5ff1;
const SALT_TRUNCATE: u64 = 0x7c07;
const SALT_GRADCHECK: u64 = 0x9cec;

/// Observation band used to stratify splits: the evaluation strata plus
/// users observed for less than the shortest horizon.
fn band(obs_days: u32) -> usize {
    match obs_days {
        0..=29 => 0,
        30..=180 => 1,
        181..=365 => 2,
        _ => 3,
    }
}

/// Splits indices so that each band contributes `fraction` of its members
/// (rounded) to the held-out side. Both sides keep ascending order.
fn stratified_split(obs: &[u32], fraction: f64, seed: u64, salt: u64) -> (Vec<usize>, Vec<usize>) {
    let mut held = vec![false; obs.len()];
    for b in 0..4 {
        let mut members: Vec<usize> = (0..obs.len()).filter(|&i| band(obs[i]) == b).collect();
        let mut rng = derived_rng(seed, salt, b as u64);
        members.shuffle(&mut rng);
        let take = (members.len() as f64 * fraction).round() as usize;
        for &i in &members[..take] {
            held[i] = true;
        }
    }
    let (mut keep, mut out) = (Vec::new(), Vec::new());
    for (i, &h) in held.iter().enumerate() {
        if h {
            out.push(i)
        } else {
            keep.push(i)
        }
    }
    (keep, out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<UserRecord>,
    pub valid: Vec<UserRecord>,
    pub test: Vec<UserRecord>,
}

/// 9:1 train/test, then a tenth of train for validation, all stratified by
/// observation band.
pub fn split(records: &[UserRecord], seed: u64) -> Split {
    let obs: Vec<u32> = records.iter().map(|r| r.obs_days).collect();
    let (train_idx, test_idx) = stratified_split(&obs, 0.1, seed, SALT_SPLIT);
    let train_obs: Vec<u32> = train_idx.iter().map(|&i| obs[i]).collect();
    let (fit_idx, valid_idx) = stratified_split(&train_obs, 0.1, seed, SALT_SPLIT + 1);
    let pick = |idx: &[usize]| idx.iter().map(|&i| records[i].clone()).collect::<Vec<_>>();
    Split {
        train: fit_idx
            .iter()
            .map(|&j| records[train_idx[j]].clone())
            .collect(),
        valid: valid_idx
            .iter()
            .map(|&j| records[train_idx[j]].clone())
            .collect(),
        test: pick(&test_idx),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub total: f64,
    pub tasks: Vec<TaskLog>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TaskLog {
    pub task: &'static str,
    #[serde(flatten)]
    pub loss: crate::objective::TaskLoss,
}

impl StepLog {
    fn new(epoch: usize, step: usize, r: &LossReport) -> Self {
        Self {
            epoch,
            step,
            total: r.total,
            tasks: Task::ALL
                .into_iter()
                .zip(&r.tasks)
                .map(|(t, l)| TaskLog {
                    task: t.key(),
                    loss: l.clone(),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_mean: f64,
    pub valid: f64,
}

pub struct Trained {
    pub final_model: HtGnn,
    pub best_model: HtGnn,
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
}

fn divergence(epoch: usize, step: usize, r: &LossReport) -> Error {
    for (t, l) in Task::ALL.into_iter().zip(&r.tasks) {
        for (name, v) in [
            ("ce", l.ce),
            ("huber", l.huber),
            ("mse", l.mse),
            ("js", l.js),
        ] {
            if !v.is_finite() {
                return Error::Divergence {
                    epoch,
                    step,
                    term: format!("{}.{name}", t.key()),
                    value: v,
                };
            }
        }
    }
    Error::Divergence {
        epoch,
        step,
        term: "total".into(),
        value: r.total,
    }
}

/// One optimizer step; returns the batch report.
fn train_step(
    model: &mut HtGnn,
    opt: &mut Adam,
    batch: &[&PreparedUser],
    seed_index: u64,
    epoch: usize,
    step: usize,
) -> Result<LossReport> {
    let mut rng = derived_rng(model.config.seed, SALT_TRUNCATE, seed_index);
    let seq = model.sequence_batch(batch, true, &mut rng)?;
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, &model.store, batch, &seq, true, None)?;
    let finite = out.report.total.is_finite()
        && out
            .report
            .tasks
            .iter()
            .all(|t| [t.ce, t.huber, t.mse, t.js].iter().all(|v| v.is_finite()));
    if !finite {
        return Err(divergence(epoch, step, &out.report));
    }
    model.store.zero_grads();
    tape.backward(out.loss, &mut model.store)?;
    opt.step(&mut model.store)?;
    for u in &out.bn {
        u.apply(&mut model.store);
    }
    Ok(out.report)
}

/// Trains on `train`, selecting the best epoch on `valid`.
pub fn train(config: &RunConfig, train: &[UserRecord], valid: &[UserRecord]) -> Result<Trained> {
    config.validate()?;
    let (mut model, users) = HtGnn::fit_new(config.clone(), train)?;
    let valid_users = prepare(valid, &model.schema, config.max_seq_len)?;
    let mut opt = Adam::with_lr(config.lr);
    let mut best = (f64::INFINITY, model.clone());
    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    let mut order: Vec<usize> = (0..users.len()).collect();
    let mut global = 0usize;
    for epoch in 0..config.epochs {
        let mut rng = derived_rng(config.seed, SALT_SHUFFLE, epoch as u64);
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut count = 0usize;
        for chunk in order.chunks(config.batch_size) {
            // a single row has no batch statistics or neighbours
            if chunk.len() < 2 {
                continue;
            }
            let batch: Vec<&PreparedUser> = chunk.iter().map(|&i| &users[i]).collect();
            let report = train_step(&mut model, &mut opt, &batch, global as u64, epoch, global)?;
            sum += report.total;
            count += 1;
            steps.push(StepLog::new(epoch, global, &report));
            global += 1;
        }
        let valid_loss = if valid_users.is_empty() {
            sum / count.max(1) as f64
        } else {
            model.eval_loss(&valid_users)?
        };
        if !valid_loss.is_finite() {
            return Err(Error::Divergence {
                epoch,
                step: global,
                term: "validation".into(),
                value: valid_loss,
            });
        }
        if valid_loss < best.0 {
            best = (valid_loss, model.clone());
        }
        epochs.push(EpochLog {
            epoch,
            train_mean: sum / count.max(1) as f64,
            valid: valid_loss,
        });
    }
    Ok(Trained {
        best_model: best.1,
        final_model: model,
        steps,
        epochs,
    })
}

/// Trains for a fixed number of optimizer steps on one population, cycling
/// epochs as needed. Used for smoke runs.
pub fn train_steps(
    config: &RunConfig,
    records: &[UserRecord],
    n_steps: usize,
) -> Result<(HtGnn, Vec<StepLog>)> {
    config.validate()?;
    let (mut model, users) = HtGnn::fit_new(config.clone(), records)?;
    let mut opt = Adam::with_lr(config.lr);
    let mut order: Vec<usize> = (0..users.len()).collect();
    let mut logs = Vec::with_capacity(n_steps);
    let mut epoch = 0;
    while logs.len() < n_steps {
        let mut rng = derived_rng(config.seed, SALT_SHUFFLE, epoch as u64);
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            if chunk.len() < 2 || logs.len() == n_steps {
                continue;
            }
            let batch: Vec<&PreparedUser> = chunk.iter().map(|&i| &users[i]).collect();
            let step = logs.len();
            let report = train_step(&mut model, &mut opt, &batch, step as u64, epoch, step)?;
            logs.push(StepLog::new(epoch, step, &report));
        }
        epoch += 1;
    }
    Ok((model, logs))
}

pub fn evaluate(model: &HtGnn, records: &[UserRecord]) -> Result<EvalResult> {
    let users = prepare(records, &model.schema, model.config.max_seq_len)?;
    Ok(stratified_eval(&model.predict(&users)?))
}

pub fn save_checkpoint(model: &HtGnn, path: &Path) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    checkpoint::write(
        BufWriter::new(f),
        &model.config.digest(),
        &model.to_entries(),
    )?;
    Ok(())
}

pub fn load_checkpoint(path: &Path, config: &RunConfig) -> Result<HtGnn> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let entries = checkpoint::read(std::io::BufReader::new(f), &config.digest())?;
    HtGnn::from_entries(config.clone(), &entries)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for r in rows {
        let line = serde_json::to_string(r).expect("log rows serialize");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub struct RunSummary {
    pub trained: Trained,
    pub test: EvalResult,
}

/// Split, train, write artifacts to `out`, evaluate the best checkpoint on
/// the test split.
pub fn run(config: &RunConfig, records: &[UserRecord], out: &Path) -> Result<RunSummary> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_text(&out.join("config.txt"), &config.render())?;
    let s = split(records, config.seed);
    let trained = train(config, &s.train, &s.valid)?;
    save_checkpoint(&trained.final_model, &out.join("final.ckpt"))?;
    save_checkpoint(&trained.best_model, &out.join("best.ckpt"))?;
    write_jsonl(&out.join("train_log.jsonl"), &trained.steps)?;
    write_jsonl(&out.join("epochs.jsonl"), &trained.epochs)?;
    let test = evaluate(&trained.best_model, &s.test)?;
    write_jsonl(&out.join("eval.jsonl"), &test.tasks)?;
    Ok(RunSummary { trained, test })
}

/// Named single-change variants of `base` compared by [`ablate`].
pub fn variants(base: &RunConfig) -> Vec<(&'static str, RunConfig)> {
    let mut full = base.clone();
    full.ablation = Default::default();
    full.loss_mode = LossMode::Multi;
    let with = |f: &dyn Fn(&mut RunConfig)| {
        let mut c = full.clone();
        f(&mut c);
        c
    };
    vec![
        ("full", full.clone()),
        ("w/o HG", with(&|c| c.ablation.no_hypergraph = true)),
        ("w/o DW", with(&|c| c.ablation.no_dynamic_weighting = true)),
        ("w/o DT", with(&|c| c.ablation.no_dynamic_tower = true)),
        ("huber only", with(&|c| c.loss_mode = LossMode::Huber)),
        ("mse only", with(&|c| c.loss_mode = LossMode::Mse)),
    ]
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub lt30_nrmse: Option<f64>,
    pub lt30_nmae: Option<f64>,
    pub ltv30_nrmse: Option<f64>,
    pub ltv30_nmae: Option<f64>,
}

impl AblationRow {
    pub fn from_eval(variant: &str, seed: u64, e: &EvalResult) -> Self {
        Self {
            variant: variant.to_string(),
            seed,
            lt30_nrmse: e.get(Task::Lt30).nrmse,
            lt30_nmae: e.get(Task::Lt30).nmae,
            ltv30_nrmse: e.get(Task::Ltv30).nrmse,
            ltv30_nmae: e.get(Task::Ltv30).nmae,
        }
    }
}

/// Trains every variant for every seed on the same split. The split uses
/// `base.seed`; the model seed varies.
pub fn ablate(
    base: &RunConfig,
    records: &[UserRecord],
    seeds: &[u64],
    mut progress: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    let s = split(records, base.seed);
    let mut rows = Vec::new();
    for &seed in seeds {
        for (name, cfg) in variants(base) {
            let mut cfg = cfg;
            cfg.seed = seed;
            let t = train(&cfg, &s.train, &s.valid)?;
            let e = evaluate(&t.best_model, &s.test)?;
            let row = AblationRow::from_eval(name, seed, &e);
            progress(&row);
            rows.push(row);
        }
    }
    Ok(rows)
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let f = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
    let mut s = format!(
        "{:<12} {:>6} {:>10} {:>10} {:>11} {:>11}\n",
        "variant", "seed", "LT30 NRMSE", "LT30 NMAE", "LTV30 NRMSE", "LTV30 NMAE"
    );
    for r in rows {
        s.push_str(&format!(
            "{:<12} {:>6} {:>10} {:>10} {:>11} {:>11}\n",
            r.variant,
            r.seed,
            f(r.lt30_nrmse),
            f(r.lt30_nmae),
            f(r.ltv30_nrmse),
            f(r.ltv30_nmae)
        ));
    }
    s
}

/// Compares the composite loss gradient against central differences on a
/// batch of 8 users. Discrete choices (the kNN graph, δ, surrogate labels)
/// and the train-mode truncations are pinned to their values at the
/// unperturbed point.
pub fn gradcheck_model(
    config: &RunConfig,
    records: &[UserRecord],
    coords: usize,
) -> Result<GradcheckReport> {
    let mut cfg = config.clone();
    cfg.batch_size = 8;
    let take: Vec<UserRecord> = records.iter().take(8).cloned().collect();
    if take.len() < 8 {
        return Err(Error::Data(format!(
            "gradcheck needs 8 records, got {}",
            take.len()
        )));
    }
    let (model, users) = HtGnn::fit_new(cfg, &take)?;
    let refs: Vec<&PreparedUser> = users.iter().collect();
    let mut rng = derived_rng(model.config.seed, SALT_GRADCHECK, 0);
    let seq = model.sequence_batch(&refs, true, &mut rng)?;
    let mut store: ParamStore = model.store.clone();
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, &store, &refs, &seq, true, None)?;
    store.zero_grads();
    tape.backward(out.loss, &mut store)?;
    let frozen = out.frozen;
    let sample = gradcheck::sample_coordinates(&store, coords, &mut rng);
    let report = gradcheck::check_coordinates(
        &mut store,
        &sample,
        gradcheck::DEFAULT_STEP,
        gradcheck::DEFAULT_TOLERANCE,
        |s| {
            let mut tape = Tape::new();
            model
                .forward(&mut tape, s, &refs, &seq, true, Some(&frozen))
                .map(|o| o.report.total)
                .map_err(|e| match e {
                    Error::Tensor(t) => t,
                    other => TensorError::Contract(other.to_string()),
                })
        },
    );
    Ok(report?)
}

/// The synthetic population used for gradient checks.
pub fn gradcheck_records(seed: u64) -> Result<Vec<UserRecord>> {
    let cfg = crate::synthdata::GenConfig {
        n_users: 8,
        n_segments: 4,
        seed,
        ..Default::default()
    };
    crate::synthdata::sample_population(&cfg)
}
