//! User records and prediction tasks.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const HORIZONS: [u32; 3] = [30, 180, 365];

/// The six prediction tasks, in model order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Task {
    Lt30,
    Ltv30,
    Lt180,
    Ltv180,
    Lt365,
    Ltv365,
}

impl Task {
    pub const ALL: [Task; 6] = [
        Task::Lt30,
        Task::Ltv30,
        Task::Lt180,
        Task::Ltv180,
        Task::Lt365,
        Task::Ltv365,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn key(self) -> &'static str {
        match self {
            Task::Lt30 => "lt30",
            Task::Ltv30 => "ltv30",
            Task::Lt180 => "lt180",
            Task::Ltv180 => "ltv180",
            Task::Lt365 => "lt365",
            Task::Ltv365 => "ltv365",
        }
    }

    pub fn horizon(self) -> u32 {
        HORIZONS[self.index() / 2]
    }

    pub fn is_value(self) -> bool {
        self.index() % 2 == 1
    }

    pub fn from_key(key: &str) -> Option<Task> {
        Task::ALL.into_iter().find(|t| t.key() == key)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub values: Vec<f64>,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserRecord {
    pub user_id: u64,
    pub cat: BTreeMap<String, i64>,
    pub stat: BTreeMap<String, f64>,
    pub seq: BTreeMap<String, Series>,
    pub labels: BTreeMap<String, Option<f64>>,
    pub obs_days: u32,
}

impl UserRecord {
    pub fn label(&self, task: Task) -> Option<f64> {
        self.labels.get(task.key()).copied().flatten()
    }

    pub fn labels_array(&self) -> [Option<f64>; 6] {
        Task::ALL.map(|t| self.label(t))
    }

    /// Checks the record-level invariants: censoring consistency, label
    /// ranges, monotone values across horizons and sequence bookkeeping.
    pub fn validate(&self) -> Result<()> {
        let uid = self.user_id;
        for key in self.labels.keys() {
            if Task::from_key(key).is_none() {
                return Err(Error::Data(format!("user {uid}: unknown label {key:?}")));
            }
        }
        for task in Task::ALL {
            let present = self.label(task);
            let expect = self.obs_days >= task.horizon();
            if present.is_some() != expect {
                return Err(Error::Data(format!(
                    "user {uid}: labels.{} presence inconsistent with obs_days {}",
                    task.key(),
                    self.obs_days
                )));
            }
            if let Some(v) = present {
                if !v.is_finite() || v < 0.0 {
                    return Err(Error::Data(format!(
                        "user {uid}: labels.{} = {v} is not a non-negative number",
                        task.key()
                    )));
                }
                if !task.is_value() && v > task.horizon() as f64 {
                    return Err(Error::Data(format!(
                        "user {uid}: labels.{} = {v} exceeds the horizon",
                        task.key()
                    )));
                }
            }
        }
        for pair in [Task::Ltv30, Task::Ltv180, Task::Ltv365].windows(2) {
            if let (Some(a), Some(b)) = (self.label(pair[0]), self.label(pair[1])) {
                if b < a {
                    return Err(Error::Data(format!(
                        "user {uid}: labels.{} decreases from {}",
                        pair[1].key(),
                        pair[0].key()
                    )));
                }
            }
        }
        for (name, s) in &self.seq {
            if s.values.len() != s.len {
                return Err(Error::Data(format!(
                    "user {uid}: seq.{name}.len = {} but {} values",
                    s.len,
                    s.values.len()
                )));
            }
            if s.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Data(format!(
                    "user {uid}: seq.{name} has a non-finite value"
                )));
            }
        }
        if let Some((name, v)) = self.stat.iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Data(format!(
                "user {uid}: stat.{name} = {v} is not finite"
            )));
        }
        Ok(())
    }
}
