//! Static user features: categorical embeddings and discretized statistics.

use htgnn_autograd::checkpoint::Entry;
use htgnn_autograd::{ParamId, ParamStore, Tape, Tensor, Var};
use rand::Rng;

use crate::error::{Error, Result};
use crate::record::UserRecord;

/// Upper bound on buckets per feature; heavy tails can otherwise produce
/// thousands of near-empty bins.
pub const MAX_BUCKETS: usize = 256;

/// Scott's rule `3.5 σ / n^(1/3)` with the sample standard deviation.
/// Returns 0 for a constant input, meaning "one bucket".
pub fn scott_bin_width(values: &[f64]) -> Result<f64> {
    let n = values.len();
    if n < 2 {
        return Err(Error::Config(format!(
            "bin width needs at least 2 values, got {n}"
        )));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    let sigma = (ss / (n - 1) as f64).sqrt();
    if sigma == 0.0 {
        return Ok(0.0);
    }
    Ok(3.5 * sigma / (n as f64).cbrt())
}

/// Bucket boundaries. `edges[0]` is the fitted minimum and, with more than
/// one bucket, `edges[last]` the maximum; only interior edges decide the
/// bucket, so values outside the fitted range clamp to the end buckets.
#[derive(Debug, Clone, PartialEq)]
pub struct BinEdges {
    edges: Vec<f64>,
}

impl BinEdges {
    pub fn fit(values: &[f64]) -> Result<Self> {
        let width = scott_bin_width(values)?;
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let range = hi - lo;
        if width == 0.0 || range == 0.0 {
            return Ok(Self { edges: vec![lo] });
        }
        let mut n = (range / width).ceil() as usize;
        let mut step = width;
        if n > MAX_BUCKETS {
            n = MAX_BUCKETS;
            step = range / n as f64;
        }
        let mut edges: Vec<f64> = (0..=n).map(|i| lo + i as f64 * step).collect();
        // keep the last edge at or beyond the maximum despite rounding
        if let Some(last) = edges.last_mut() {
            *last = last.max(hi);
        }
        edges.dedup();
        Ok(Self { edges })
    }

    pub fn from_edges(edges: Vec<f64>) -> Result<Self> {
        if edges.is_empty()
            || edges
                .windows(2)
                .any(|w| w[0].partial_cmp(&w[1]) != Some(std::cmp::Ordering::Less))
        {
            return Err(Error::Data(
                "bin edges must be non-empty and strictly increasing".into(),
            ));
        }
        Ok(Self { edges })
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn n_buckets(&self) -> usize {
        self.edges.len().saturating_sub(1).max(1)
    }

    pub fn bucket(&self, v: f64) -> usize {
        if self.edges.len() <= 2 {
            return 0;
        }
        let interior = &self.edges[1..self.edges.len() - 1];
        interior.partition_point(|&e| e <= v)
    }
}

pub fn bucketize_sequence(values: &[f64], edges: &BinEdges) -> Vec<usize> {
    values.iter().map(|&v| edges.bucket(v)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSchema {
    /// Name and cardinality, including the reserved unknown index 0.
    pub categorical: Vec<(String, usize)>,
    pub statistical: Vec<(String, BinEdges)>,
    /// Behaviour series, in token-vocabulary order.
    pub sequences: Vec<(String, BinEdges)>,
    pub embed_dim: usize,
}

impl FeatureSchema {
    /// Fits cardinalities and bins on `records` (the training split). The
    /// first `seq_types` series names in sorted order are used.
    pub fn fit(records: &[UserRecord], seq_types: usize, embed_dim: usize) -> Result<Self> {
        let first = records
            .first()
            .ok_or_else(|| Error::Data("cannot fit features on an empty dataset".into()))?;
        let mut categorical = Vec::new();
        for name in first.cat.keys() {
            let mut max = -1i64;
            for r in records {
                let c = *r.cat.get(name).ok_or_else(|| missing(r, "cat", name))?;
                max = max.max(c);
            }
            categorical.push((name.clone(), (max + 2) as usize));
        }
        let mut statistical = Vec::new();
        for name in first.stat.keys() {
            let values = records
                .iter()
                .map(|r| {
                    r.stat
                        .get(name)
                        .copied()
                        .ok_or_else(|| missing(r, "stat", name))
                })
                .collect::<Result<Vec<_>>>()?;
            statistical.push((name.clone(), BinEdges::fit(&values)?));
        }
        let names: Vec<&String> = first.seq.keys().collect();
        if names.len() < seq_types {
            return Err(Error::Data(format!(
                "config asks for {seq_types} sequence types but records carry {}",
                names.len()
            )));
        }
        let mut sequences = Vec::new();
        for name in names.into_iter().take(seq_types) {
            let mut values = Vec::new();
            for r in records {
                let s = r.seq.get(name).ok_or_else(|| missing(r, "seq", name))?;
                values.extend_from_slice(&s.values);
            }
            let edges = if values.len() >= 2 {
                BinEdges::fit(&values)?
            } else {
                BinEdges {
                    edges: vec![values.first().copied().unwrap_or(0.0)],
                }
            };
            sequences.push((name.clone(), edges));
        }
        Ok(Self {
            categorical,
            statistical,
            sequences,
            embed_dim,
        })
    }

    pub fn static_dim(&self) -> usize {
        (self.categorical.len() + self.statistical.len()) * self.embed_dim
    }

    /// Embedding row per categorical feature: code `c` maps to `c + 1`;
    /// negative or unseen codes map to the unknown row 0.
    pub fn cat_ids(&self, r: &UserRecord) -> Result<Vec<usize>> {
        self.categorical
            .iter()
            .map(|(name, card)| {
                let c = *r.cat.get(name).ok_or_else(|| missing(r, "cat", name))?;
                Ok(if c >= 0 && (c as usize) + 1 < *card {
                    c as usize + 1
                } else {
                    0
                })
            })
            .collect()
    }

    pub fn stat_ids(&self, r: &UserRecord) -> Result<Vec<usize>> {
        self.statistical
            .iter()
            .map(|(name, edges)| {
                let v = *r.stat.get(name).ok_or_else(|| missing(r, "stat", name))?;
                Ok(edges.bucket(v))
            })
            .collect()
    }

    pub fn to_entries(&self) -> Vec<Entry> {
        let mut out = vec![Entry {
            name: "schema.embed_dim".into(),
            tensor: Tensor::scalar(self.embed_dim as f64),
        }];
        for (name, card) in &self.categorical {
            out.push(Entry {
                name: format!("schema.cat.{name}"),
                tensor: Tensor::scalar(*card as f64),
            });
        }
        for (kind, list) in [("stat", &self.statistical), ("seq", &self.sequences)] {
            for (name, edges) in list {
                out.push(Entry {
                    name: format!("schema.{kind}.{name}"),
                    tensor: Tensor::new(&[edges.edges.len()], edges.edges.clone())
                        .expect("non-empty edges"),
                });
            }
        }
        out
    }

    pub fn from_entries(entries: &[Entry]) -> Result<Self> {
        let mut schema = FeatureSchema {
            categorical: Vec::new(),
            statistical: Vec::new(),
            sequences: Vec::new(),
            embed_dim: 0,
        };
        for e in entries {
            let Some(rest) = e.name.strip_prefix("schema.") else {
                continue;
            };
            match rest.split_once('.') {
                None if rest == "embed_dim" => schema.embed_dim = e.tensor.item() as usize,
                Some(("cat", name)) => schema
                    .categorical
                    .push((name.to_string(), e.tensor.item() as usize)),
                Some(("stat", name)) => schema.statistical.push((
                    name.to_string(),
                    BinEdges::from_edges(e.tensor.data().to_vec())?,
                )),
                Some(("seq", name)) => schema.sequences.push((
                    name.to_string(),
                    BinEdges::from_edges(e.tensor.data().to_vec())?,
                )),
                _ => return Err(Error::Data(format!("unexpected schema entry {}", e.name))),
            }
        }
        if schema.embed_dim == 0 {
            return Err(Error::Data("checkpoint lacks schema.embed_dim".into()));
        }
        Ok(schema)
    }
}

fn missing(r: &UserRecord, kind: &str, name: &str) -> Error {
    Error::Data(format!("user {}: missing {kind}.{name}", r.user_id))
}

/// Embedding tables for the static features, one per feature.
#[derive(Debug, Clone)]
pub struct StaticTables {
    pub cat: Vec<ParamId>,
    pub stat: Vec<ParamId>,
}

impl StaticTables {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        schema: &FeatureSchema,
        rng: &mut R,
    ) -> Result<Self> {
        let e = schema.embed_dim;
        let mut table = |name: String, rows: usize, rng: &mut R| {
            let bound = 1.0 / (rows as f64).sqrt();
            store.add(name, Tensor::uniform(&[rows, e], bound, rng))
        };
        let cat = schema
            .categorical
            .iter()
            .map(|(n, card)| table(format!("feat.cat.{n}"), *card, rng))
            .collect::<std::result::Result<_, _>>()?;
        let stat = schema
            .statistical
            .iter()
            .map(|(n, edges)| table(format!("feat.stat.{n}"), edges.n_buckets(), rng))
            .collect::<std::result::Result<_, _>>()?;
        Ok(Self { cat, stat })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StaticRepresentation {
    pub u_c: Var,
    pub u_s: Var,
    pub u_sc: Var,
}

/// Encodes a batch. `cat_ids[i]` and `stat_ids[i]` are user `i`'s rows as
/// produced by [`FeatureSchema::cat_ids`] and [`FeatureSchema::stat_ids`].
pub fn encode_static(
    tape: &mut Tape,
    store: &ParamStore,
    tables: &StaticTables,
    cat_ids: &[Vec<usize>],
    stat_ids: &[Vec<usize>],
) -> Result<StaticRepresentation> {
    let gather = |tape: &mut Tape, ids: &[Vec<usize>], tabs: &[ParamId]| -> Result<Var> {
        let mut parts = Vec::with_capacity(tabs.len());
        for (f, &tab) in tabs.iter().enumerate() {
            let col: Vec<usize> = ids.iter().map(|row| row[f]).collect();
            let t = tape.param(store, tab);
            parts.push(tape.embedding_lookup(t, &col)?);
        }
        Ok(tape.concat_cols(&parts)?)
    };
    let u_c = gather(tape, cat_ids, &tables.cat)?;
    let u_s = gather(tape, stat_ids, &tables.stat)?;
    let u_sc = tape.concat_cols(&[u_c, u_s])?;
    Ok(StaticRepresentation { u_c, u_s, u_sc })
}

/// Encodes one user; see [`encode_static`].
pub fn encode_user(
    tape: &mut Tape,
    store: &ParamStore,
    schema: &FeatureSchema,
    tables: &StaticTables,
    record: &UserRecord,
) -> Result<StaticRepresentation> {
    let c = schema.cat_ids(record)?;
    let s = schema.stat_ids(record)?;
    encode_static(tape, store, tables, &[c], &[s])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scott_width_direct_substitution() {
        // two points at ±a have sample std a·√2
        let a = 3.5 / 2f64.sqrt();
        let d = scott_bin_width(&[-a, a]).unwrap();
        assert!((d - 3.5 * 3.5 / 2f64.cbrt()).abs() < 1e-12);
        assert_eq!(scott_bin_width(&[4.0; 10]).unwrap(), 0.0);
        assert!(scott_bin_width(&[1.0]).is_err());
    }

    #[test]
    fn constant_feature_has_one_bucket() {
        let b = BinEdges::fit(&[2.0; 5]).unwrap();
        assert_eq!(b.n_buckets(), 1);
        assert_eq!(b.bucket(-100.0), 0);
        assert_eq!(b.bucket(100.0), 0);
    }

    #[test]
    fn bucket_count_is_capped() {
        let mut v: Vec<f64> = (0..1000).map(|i| i as f64 * 1e-3).collect();
        v.push(1e9);
        let b = BinEdges::fit(&v).unwrap();
        assert!(b.n_buckets() <= MAX_BUCKETS);
        assert_eq!(b.bucket(1e9), b.n_buckets() - 1);
    }
}
