//! Masked transformer encoding of typed behaviour sequences.

use htgnn_autograd::{kernels, ParamId, ParamStore, Tape, Tensor, TensorError, Var};
use htgnn_autograd::{BackwardContext, Function};
use rand::Rng;

use crate::error::{Error, Result};
use crate::featurizer::{bucketize_sequence, FeatureSchema};
use crate::record::UserRecord;

/// Additive mask value for hidden key positions.
pub const MASKED: f64 = -1e9;
/// Width of each per-type length embedding.
pub const LENGTH_EMBED_DIM: usize = 4;

/// Tokenized, cls-prefixed and padded sequences for a batch. Token ids are
/// local to their type: 0 is cls and bucket `j` is `j + 1`. Position 0 of
/// every sequence is cls; positions past the available length are padding
/// and hidden from attention.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceBatch {
    pub batch: usize,
    pub types: usize,
    pub max_len: usize,
    /// `[batch × types × (max_len + 1)]`.
    pub tokens: Vec<usize>,
    /// `[batch × types]`.
    pub available_lengths: Vec<usize>,
}

impl SequenceBatch {
    /// `user_tokens[i][t]` holds user `i`'s bucket ids for type `t` (already
    /// truncated to the observed length). In train mode each non-empty
    /// sequence is further cut to a length drawn uniformly from `1..=s`.
    pub fn assemble<R: Rng + ?Sized>(
        user_tokens: &[&[Vec<usize>]],
        types: usize,
        max_len: usize,
        train_mode: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let stride = max_len + 1;
        let b = user_tokens.len();
        let mut tokens = vec![0usize; b * types * stride];
        let mut available_lengths = vec![0usize; b * types];
        for (i, seqs) in user_tokens.iter().enumerate() {
            if seqs.len() != types {
                return Err(Error::Data(format!(
                    "batch row {i} has {} sequence types, expected {types}",
                    seqs.len()
                )));
            }
            for (t, seq) in seqs.iter().enumerate() {
                let s = seq.len().min(max_len);
                let row = &mut tokens[(i * types + t) * stride..(i * types + t + 1) * stride];
                for (p, &tok) in seq.iter().take(s).enumerate() {
                    row[p + 1] = tok + 1;
                }
                let eff = if train_mode && s > 0 {
                    rng.gen_range(1..=s)
                } else {
                    s
                };
                available_lengths[i * types + t] = eff;
            }
        }
        Ok(Self {
            batch: b,
            types,
            max_len,
            tokens,
            available_lengths,
        })
    }

    pub fn token(&self, i: usize, t: usize, pos: usize) -> usize {
        self.tokens[(i * self.types + t) * (self.max_len + 1) + pos]
    }

    pub fn length(&self, i: usize, t: usize) -> usize {
        self.available_lengths[i * self.types + t]
    }

    pub fn is_visible(&self, i: usize, t: usize, pos: usize) -> bool {
        pos <= self.length(i, t)
    }

    /// Additive mask for one sequence: `[(L+1) × (L+1)]`, 0 for visible key
    /// columns and [`MASKED`] for hidden ones.
    pub fn additive_mask(&self, i: usize, t: usize) -> Tensor {
        let n = self.max_len + 1;
        let s = self.length(i, t);
        let mut m = Tensor::zeros(&[n, n]);
        for row in m.data_mut().chunks_exact_mut(n) {
            row[s + 1..].fill(MASKED);
        }
        m
    }

    /// The full mask `[b × T × (L+1) × (L+1)]`.
    pub fn full_mask(&self) -> Tensor {
        let n = self.max_len + 1;
        let mut data = Vec::with_capacity(self.batch * self.types * n * n);
        for i in 0..self.batch {
            for t in 0..self.types {
                data.extend_from_slice(self.additive_mask(i, t).data());
            }
        }
        Tensor::new(&[self.batch, self.types, n, n], data).expect("mask shape")
    }
}

/// Tokenizes records against the schema's sequence bins.
pub fn tokenize_record(
    record: &UserRecord,
    schema: &FeatureSchema,
    max_len: usize,
) -> Result<Vec<Vec<usize>>> {
    schema
        .sequences
        .iter()
        .map(|(name, edges)| {
            let s = record.seq.get(name).ok_or_else(|| {
                Error::Data(format!(
                    "user {}: unknown sequence type {name:?} (not present in record)",
                    record.user_id
                ))
            })?;
            let n = s.len.min(max_len).min(s.values.len());
            Ok(bucketize_sequence(&s.values[..n], edges))
        })
        .collect()
}

pub fn assemble_batch<R: Rng + ?Sized>(
    records: &[&UserRecord],
    schema: &FeatureSchema,
    max_len: usize,
    train_mode: bool,
    rng: &mut R,
) -> Result<SequenceBatch> {
    let toks = records
        .iter()
        .map(|r| tokenize_record(r, schema, max_len))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&[Vec<usize>]> = toks.iter().map(Vec::as_slice).collect();
    SequenceBatch::assemble(&refs, schema.sequences.len(), max_len, train_mode, rng)
}

/// `softmax((q·kᵀ + mask) / √d_h) · v` for one head, built from primitives.
pub fn masked_attention(tape: &mut Tape, q: Var, k: Var, v: Var, mask: &Tensor) -> Result<Var> {
    let (n, dh) = tape.value(q).dims2();
    for (r, row) in mask.data().chunks_exact(mask.dims2().1).enumerate() {
        if row.iter().all(|&m| m <= MASKED) {
            return Err(Error::Tensor(TensorError::Contract(format!(
                "attention row {r} has every key masked"
            ))));
        }
    }
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let m = tape.constant(mask.clone());
    let masked = tape.add(scores, m)?;
    let scaled = tape.scale(masked, 1.0 / (dh as f64).sqrt());
    let attn = tape.softmax_rows(scaled)?;
    debug_assert_eq!(tape.value(attn).dims2().0, n);
    Ok(tape.matmul(attn, v)?)
}

/// Multi-head attention of one query row per segment over that segment's
/// key/value rows. Segments are contiguous row ranges of `k` and `v`.
#[derive(Debug)]
struct RaggedAttention {
    segments: Vec<(usize, usize)>,
    heads: usize,
    /// Attention probabilities, concatenated per (segment, head).
    probs: Vec<f64>,
    prob_offsets: Vec<usize>,
}

impl Function for RaggedAttention {
    fn name(&self) -> &'static str {
        "ragged_attention"
    }

    fn backward(&self, ctx: &BackwardContext<'_>) -> htgnn_autograd::Result<Vec<Option<Vec<f64>>>> {
        let (q, k, v) = (
            ctx.inputs[0].data(),
            ctx.inputs[1].data(),
            ctx.inputs[2].data(),
        );
        let d = ctx.inputs[0].shape()[1];
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let g = ctx.grad_output;
        let mut gq = vec![0.0; q.len()];
        let mut gk = vec![0.0; k.len()];
        let mut gv = vec![0.0; v.len()];
        let mut ds = Vec::new();
        for (r, &(start, len)) in self.segments.iter().enumerate() {
            for h in 0..self.heads {
                let off = self.prob_offsets[r * self.heads + h];
                let p = &self.probs[off..off + len];
                let cols = h * dh..(h + 1) * dh;
                let go = &g[r * d + cols.start..r * d + cols.end];
                ds.clear();
                let mut dot_pa = 0.0;
                for (j, &pj) in p.iter().enumerate() {
                    let row = (start + j) * d;
                    kernels::axpy(pj, go, &mut gv[row + cols.start..row + cols.end]);
                    let da = kernels::dot(go, &v[row + cols.start..row + cols.end]);
                    ds.push(da);
                    dot_pa += pj * da;
                }
                for (j, &pj) in p.iter().enumerate() {
                    let row = (start + j) * d;
                    let s = pj * (ds[j] - dot_pa) * scale;
                    let (qr, kr) = (r * d + cols.start, row + cols.start);
                    for c in 0..dh {
                        gq[qr + c] += s * k[kr + c];
                        gk[kr + c] += s * q[qr + c];
                    }
                }
            }
        }
        Ok(vec![Some(gq), Some(gk), Some(gv)])
    }
}

/// Row `r` of `q` attends over rows `segments[r]` of `k`/`v` with `heads`
/// heads. Returns `[segments × d]`.
pub fn ragged_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    segments: &[(usize, usize)],
    heads: usize,
) -> Result<Var> {
    let (rq, d) = tape.value(q).dims2();
    let (rk, dk) = tape.value(k).dims2();
    if rq != segments.len() || dk != d || tape.value(v).shape() != [rk, d] || d % heads != 0 {
        return Err(Error::Tensor(TensorError::Shape {
            op: "ragged_attention",
            lhs: vec![rq, d],
            rhs: vec![rk, dk],
        }));
    }
    if let Some(&(s, l)) = segments.iter().find(|&&(s, l)| l == 0 || s + l > rk) {
        return Err(Error::Tensor(TensorError::Contract(format!(
            "attention segment ({s}, {l}) is empty or out of range"
        ))));
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (qd, kd, vd) = (
        tape.value(q).data(),
        tape.value(k).data(),
        tape.value(v).data(),
    );
    let mut out = vec![0.0; rq * d];
    let mut probs = Vec::new();
    let mut prob_offsets = Vec::with_capacity(rq * heads);
    let mut scores = Vec::new();
    for (r, &(start, len)) in segments.iter().enumerate() {
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let qr = &qd[r * d + cols.start..r * d + cols.end];
            scores.clear();
            for j in 0..len {
                let row = (start + j) * d;
                scores.push(kernels::dot(qr, &kd[row + cols.start..row + cols.end]) * scale);
            }
            prob_offsets.push(probs.len());
            let base = probs.len();
            probs.resize(base + len, 0.0);
            kernels::softmax_into(&scores, &mut probs[base..]);
            let o = &mut out[r * d + cols.start..r * d + cols.end];
            for j in 0..len {
                let row = (start + j) * d;
                kernels::axpy(probs[base + j], &vd[row + cols.start..row + cols.end], o);
            }
        }
    }
    let out = Tensor::new(&[rq, d], out)?;
    let op = RaggedAttention {
        segments: segments.to_vec(),
        heads,
        probs,
        prob_offsets,
    };
    Ok(tape.apply(Box::new(op), &[q, k, v], out))
}

/// Sinusoidal encoding `[positions × d]`.
pub fn sinusoidal_pe(positions: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; positions * d];
    for p in 0..positions {
        for i in 0..d {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let a = p as f64 * freq;
            data[p * d + i] = if i % 2 == 0 { a.sin() } else { a.cos() };
        }
    }
    Tensor::new(&[positions, d], data).expect("positive dims")
}

/// 0 for an empty sequence, otherwise `floor(log2 s) + 1`.
pub fn length_bucket(s: usize) -> usize {
    if s == 0 {
        0
    } else {
        s.ilog2() as usize + 1
    }
}

pub fn n_length_buckets(max_len: usize) -> usize {
    length_bucket(max_len) + 1
}

#[derive(Debug, Clone, Copy)]
pub struct TemporalRepresentation {
    /// `[b × T·d]`.
    pub u_se: Var,
    /// `[b × d_m]`.
    pub u_mask: Var,
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = store.add(
            format!("{prefix}.w"),
            Tensor::uniform(&[fan_in, fan_out], bound, rng),
        )?;
        let b = store.add(format!("{prefix}.b"), Tensor::zeros(&[fan_out]))?;
        Ok(Self { w, b })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        Ok(tape.linear(x, w, b)?)
    }
}

/// Shared single-block encoder across sequence types.
#[derive(Debug, Clone)]
pub struct TemporalEncoder {
    pub types: usize,
    pub max_len: usize,
    pub dim: usize,
    pub heads: usize,
    /// Row offset of each type's vocabulary inside the token table.
    pub vocab_offsets: Vec<usize>,
    pub token_emb: ParamId,
    pub type_emb: ParamId,
    pub pe: Tensor,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ffn1: Linear,
    pub ffn2: Linear,
    pub length_emb: ParamId,
    pub mask_proj: Linear,
}

pub struct TemporalDims {
    pub max_len: usize,
    pub dim: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub mask_dim: usize,
}

impl TemporalEncoder {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        schema: &FeatureSchema,
        dims: &TemporalDims,
        rng: &mut R,
    ) -> Result<Self> {
        let types = schema.sequences.len();
        let d = dims.dim;
        let mut vocab_offsets = Vec::with_capacity(types);
        let mut rows = 0;
        for (_, edges) in &schema.sequences {
            vocab_offsets.push(rows);
            rows += edges.n_buckets() + 1;
        }
        let emb_bound = 1.0 / (d as f64).sqrt();
        let token_emb = store.add("seq.token_emb", Tensor::uniform(&[rows, d], emb_bound, rng))?;
        let type_emb = store.add("seq.type_emb", Tensor::uniform(&[types, d], emb_bound, rng))?;
        let q = Linear::register(store, "seq.attn.q", d, d, rng)?;
        let k = Linear::register(store, "seq.attn.k", d, d, rng)?;
        let v = Linear::register(store, "seq.attn.v", d, d, rng)?;
        let o = Linear::register(store, "seq.attn.o", d, d, rng)?;
        let ffn1 = Linear::register(store, "seq.ffn1", d, dims.ffn_hidden, rng)?;
        let ffn2 = Linear::register(store, "seq.ffn2", dims.ffn_hidden, d, rng)?;
        let nlb = n_length_buckets(dims.max_len);
        let length_emb = store.add(
            "seq.length_emb",
            Tensor::uniform(
                &[types * nlb, LENGTH_EMBED_DIM],
                1.0 / (nlb as f64).sqrt(),
                rng,
            ),
        )?;
        let mask_proj = Linear::register(
            store,
            "seq.mask_proj",
            types * LENGTH_EMBED_DIM,
            dims.mask_dim,
            rng,
        )?;
        Ok(Self {
            types,
            max_len: dims.max_len,
            dim: d,
            heads: dims.heads,
            vocab_offsets,
            token_emb,
            type_emb,
            pe: sinusoidal_pe(dims.max_len + 1, d),
            q,
            k,
            v,
            o,
            ffn1,
            ffn2,
            length_emb,
            mask_proj,
        })
    }

    /// Only visible positions are embedded and attended over, so tokens at
    /// masked positions cannot influence the output.
    pub fn encode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        batch: &SequenceBatch,
    ) -> Result<TemporalRepresentation> {
        if batch.types != self.types || batch.max_len != self.max_len {
            return Err(Error::Data(format!(
                "sequence batch has {} types of length {}, encoder expects {} of {}",
                batch.types, batch.max_len, self.types, self.max_len
            )));
        }
        let b = batch.batch;
        let mut tok_ids = Vec::new();
        let mut type_ids = Vec::new();
        let mut pos_ids = Vec::new();
        let mut segments = Vec::with_capacity(b * self.types);
        for i in 0..b {
            for t in 0..self.types {
                let start = tok_ids.len();
                let s = batch.length(i, t);
                for p in 0..=s {
                    tok_ids.push(self.vocab_offsets[t] + batch.token(i, t, p));
                    type_ids.push(t);
                    pos_ids.push(p);
                }
                segments.push((start, s + 1));
            }
        }
        let tok_table = tape.param(store, self.token_emb);
        let type_table = tape.param(store, self.type_emb);
        let pe = tape.constant(self.pe.clone());
        let x_tok = tape.embedding_lookup(tok_table, &tok_ids)?;
        let x_type = tape.embedding_lookup(type_table, &type_ids)?;
        let x_pos = tape.gather_rows(pe, &pos_ids)?;
        let x = tape.add(x_tok, x_type)?;
        let x = tape.add(x, x_pos)?;
        let cls_rows: Vec<usize> = segments.iter().map(|&(s, _)| s).collect();
        let x_cls = tape.gather_rows(x, &cls_rows)?;
        let k = self.k.forward(tape, store, x)?;
        let v = self.v.forward(tape, store, x)?;
        let q = self.q.forward(tape, store, x_cls)?;
        let att = ragged_attention(tape, q, k, v, &segments, self.heads)?;
        let att = self.o.forward(tape, store, att)?;
        let h = tape.add(att, x_cls)?;
        let f = self.ffn1.forward(tape, store, h)?;
        let f = tape.relu(f);
        let f = self.ffn2.forward(tape, store, f)?;
        let cls = tape.add(f, h)?;
        let u_se = tape.reshape(cls, &[b, self.types * self.dim])?;
        let u_mask = self.mask_embedding(tape, store, &batch.available_lengths, b)?;
        Ok(TemporalRepresentation { u_se, u_mask })
    }

    /// Embeds the per-type length buckets and projects them to `d_m`.
    pub fn mask_embedding(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        lengths: &[usize],
        batch: usize,
    ) -> Result<Var> {
        let nlb = n_length_buckets(self.max_len);
        let ids: Vec<usize> = lengths
            .iter()
            .enumerate()
            .map(|(j, &s)| (j % self.types) * nlb + length_bucket(s.min(self.max_len)))
            .collect();
        let table = tape.param(store, self.length_emb);
        let e = tape.embedding_lookup(table, &ids)?;
        let flat = tape.reshape(e, &[batch, self.types * LENGTH_EMBED_DIM])?;
        self.mask_proj.forward(tape, store, flat)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn length_buckets() {
        assert_eq!(length_bucket(0), 0);
        assert_eq!(length_bucket(1), 1);
        assert_eq!(length_bucket(3), 2);
        assert_eq!(length_bucket(32), 6);
        assert_eq!(n_length_buckets(32), 7);
    }

    #[test]
    fn eval_mode_keeps_true_lengths() {
        let seqs = [vec![vec![1, 2, 3], vec![]], vec![vec![0; 40], vec![4]]];
        let refs: Vec<&[Vec<usize>]> = seqs.iter().map(Vec::as_slice).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = SequenceBatch::assemble(&refs, 2, 32, false, &mut rng).unwrap();
        assert_eq!(b.available_lengths, vec![3, 0, 32, 1]);
        assert_eq!(b.token(0, 0, 0), 0);
        assert_eq!(b.token(0, 0, 1), 2);
        let m = b.additive_mask(0, 1);
        assert_eq!(m.at(5, 0), 0.0);
        assert_eq!(m.at(5, 1), MASKED);
    }
}
