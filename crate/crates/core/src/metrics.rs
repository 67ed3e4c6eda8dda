//! Regression, ranking and classification metrics, and the horizon
//! stratified evaluation protocol.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::record::Task;

fn positive_mean(y: &[f64]) -> Result<f64> {
    if y.is_empty() {
        return Err(Error::Undefined("empty input"));
    }
    let m = y.iter().sum::<f64>() / y.len() as f64;
    if m <= 0.0 {
        return Err(Error::Undefined("mean(y) must be positive"));
    }
    Ok(m)
}

/// `sqrt(mean((y − ŷ)²)) / mean(y)`.
pub fn nrmse(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    let m = positive_mean(y)?;
    let mse = y
        .iter()
        .zip(y_hat)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / y.len() as f64;
    Ok(mse.sqrt() / m)
}

/// `mean(|y − ŷ|) / mean(y)`.
pub fn nmae(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    let m = positive_mean(y)?;
    let mae = y.iter().zip(y_hat).map(|(a, b)| (a - b).abs()).sum::<f64>() / y.len() as f64;
    Ok(mae / m)
}

/// Gini of the cumulative-value curve with users ordered by descending
/// score. Tied users share their group's mean value, which is the average
/// over all orderings of the tie.
fn gini(y: &[f64], scores: &[f64]) -> f64 {
    let n = y.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let total: f64 = y.iter().sum();
    let mut cum = 0.0;
    let mut area = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let mean = order[i..j].iter().map(|&k| y[k]).sum::<f64>() / (j - i) as f64;
        for _ in i..j {
            cum += mean;
            area += cum / total;
        }
        i = j;
    }
    area / n as f64 - (n as f64 + 1.0) / (2.0 * n as f64)
}

/// Gini under `scores` divided by the Gini of the perfect ordering.
pub fn normalized_gini(y: &[f64], scores: &[f64]) -> Result<f64> {
    if y.len() < 2 || y.len() != scores.len() {
        return Err(Error::Undefined(
            "normalized Gini needs at least 2 paired values",
        ));
    }
    if y.iter().sum::<f64>() <= 0.0 {
        return Err(Error::Undefined("normalized Gini needs a positive total"));
    }
    let best = gini(y, y);
    if best == 0.0 {
        return Err(Error::Undefined("normalized Gini of a constant target"));
    }
    Ok(gini(y, scores) / best)
}

/// Mann-Whitney AUC with mid-ranks for ties.
pub fn auc(labels: &[bool], scores: &[f64]) -> Result<f64> {
    let n = labels.len();
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = n - n_pos;
    if n_pos == 0 || n_neg == 0 || scores.len() != n {
        return Err(Error::Undefined("AUC needs both classes"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j share their midpoint
        let mid = (i + 1 + j) as f64 / 2.0;
        rank_sum += mid * order[i..j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j;
    }
    let (p, q) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * q))
}

/// Observation-window band evaluated at each horizon.
pub fn stratum(task: Task) -> (u32, Option<u32>) {
    match task.horizon() {
        30 => (30, Some(180)),
        180 => (181, Some(365)),
        _ => (366, None),
    }
}

pub fn in_stratum(task: Task, obs_days: u32) -> bool {
    let (lo, hi) = stratum(task);
    obs_days >= lo && hi.is_none_or(|h| obs_days <= h)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskMetrics {
    pub task: String,
    pub stratum: String,
    pub count: usize,
    pub skipped: bool,
    pub nrmse: Option<f64>,
    pub nmae: Option<f64>,
    pub ngini: Option<f64>,
    pub auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalResult {
    pub tasks: Vec<TaskMetrics>,
}

/// One test user's labels and the model's outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Scored {
    pub obs_days: u32,
    pub labels: [Option<f64>; 6],
    /// Regression outputs on the label scale.
    pub values: [f64; 6],
    /// Classification probabilities of a non-zero label.
    pub probs: [f64; 6],
}

pub fn stratified_eval(users: &[Scored]) -> EvalResult {
    let tasks = Task::ALL
        .into_iter()
        .map(|task| {
            let t = task.index();
            let (lo, hi) = stratum(task);
            let mut y = Vec::new();
            let mut v = Vec::new();
            let mut p = Vec::new();
            for u in users.iter().filter(|u| in_stratum(task, u.obs_days)) {
                if let Some(label) = u.labels[t] {
                    y.push(label);
                    v.push(u.values[t]);
                    p.push(u.probs[t]);
                }
            }
            let cls: Vec<bool> = y.iter().map(|&l| l > 0.0).collect();
            TaskMetrics {
                task: task.key().to_string(),
                stratum: match hi {
                    Some(h) => format!("{lo}-{h}"),
                    None => format!(">{}", lo - 1),
                },
                count: y.len(),
                skipped: y.is_empty(),
                nrmse: nrmse(&y, &v).ok(),
                nmae: nmae(&y, &v).ok(),
                ngini: normalized_gini(&y, &v).ok(),
                auc: auc(&cls, &p).ok(),
            }
        })
        .collect();
    EvalResult { tasks }
}

impl EvalResult {
    pub fn get(&self, task: Task) -> &TaskMetrics {
        &self.tasks[task.index()]
    }

    pub fn table(&self) -> String {
        let f = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
        let mut s = format!(
            "{:<8} {:>9} {:>7} {:>8} {:>8} {:>8} {:>8}\n",
            "task", "stratum", "n", "nrmse", "nmae", "ngini", "auc"
        );
        for m in &self.tasks {
            if m.skipped {
                let _ = writeln!(
                    s,
                    "{:<8} {:>9} {:>7} (skipped: empty stratum)",
                    m.task, m.stratum, 0
                );
                continue;
            }
            let _ = writeln!(
                s,
                "{:<8} {:>9} {:>7} {:>8} {:>8} {:>8} {:>8}",
                m.task,
                m.stratum,
                m.count,
                f(m.nrmse),
                f(m.nmae),
                f(m.ngini),
                f(m.auc)
            );
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_examples() {
        let y = [1.0, 4.0, 2.0, 7.0];
        assert_eq!(nrmse(&y, &y).unwrap(), 0.0);
        assert_eq!(nmae(&[3.0; 4], &[0.0; 4]).unwrap(), 1.0);
        assert_eq!(nrmse(&[3.0; 4], &[0.0; 4]).unwrap(), 1.0);
        assert!((normalized_gini(&y, &y).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(normalized_gini(&y, &[0.3; 4]).unwrap(), 0.0);
        assert_eq!(auc(&[true, false, true], &[0.2; 3]).unwrap(), 0.5);
        assert_eq!(auc(&[true, false], &[0.9, 0.1]).unwrap(), 1.0);
        assert!(nrmse(&[0.0, 0.0], &[1.0, 1.0]).is_err());
        assert!(auc(&[true, true], &[0.1, 0.2]).is_err());
    }
}
