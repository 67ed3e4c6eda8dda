//! Synthetic advertising populations and the line-delimited dataset format.
//!
//! Users belong to latent segments. A segment fixes a categorical profile,
//! an activity rate, a log-scale spending level, a zero-inflation rate and a
//! payer rate; users perturb each of these. Labels come from a simulated
//! year of daily activity. Behaviour sequences cover the first days of that
//! year under a marketing intensity that switches level at geometric times,
//! and the number of days a user exposes shrinks with the number of
//! switches they went through.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};

use crate::error::{Error, Result};
use crate::record::{Series, Task, UserRecord};

pub const FORMAT_VERSION: u32 = 1;

/// Names of the behaviour series; types past the sixth reuse a recipe with
/// a numeric suffix.
const SEQ_BASE: [&str; 6] = [
    "clicks",
    "dwell",
    "impressions",
    "purchases",
    "sessions",
    "spend",
];
const MARKETING_LEVELS: [f64; 3] = [0.5, 1.0, 2.0];

#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub n_users: usize,
    pub n_segments: usize,
    pub seed: u64,
    pub n_cat: usize,
    /// Codes per categorical feature are `0..cat_cardinality`.
    pub cat_cardinality: usize,
    pub n_stat: usize,
    pub seq_types: usize,
    pub max_len: usize,
    pub flip_prob: f64,
    /// Scales every user-level perturbation; 0 makes users exact copies of
    /// their segment up to the daily activity draws.
    pub noise: f64,
    /// Per-day probability that the marketing strategy changes.
    pub switch_rate: f64,
    /// Multiplies every behaviour rate; 0 yields all-zero sequences.
    pub intensity: f64,
    pub max_obs_days: u32,
    /// Overrides every segment's zero-inflation probability.
    pub zero_inflation: Option<f64>,
    /// Log-scale spread of per-user spending around the segment level.
    pub value_sigma: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            n_users: 20_000,
            n_segments: 20,
            seed: 0,
            n_cat: 12,
            cat_cardinality: 24,
            n_stat: 4,
            seq_types: 6,
            max_len: 32,
            flip_prob: 0.15,
            noise: 1.0,
            switch_rate: 0.05,
            intensity: 1.0,
            max_obs_days: 540,
            zero_inflation: None,
            value_sigma: 1.2,
        }
    }
}

impl GenConfig {
    pub fn render(&self) -> String {
        format!(
            "n_users={} n_segments={} seed={} n_cat={} cat_cardinality={} n_stat={} \
             seq_types={} max_len={} flip_prob={:?} noise={:?} switch_rate={:?} \
             intensity={:?} max_obs_days={} zero_inflation={:?} value_sigma={:?}",
            self.n_users,
            self.n_segments,
            self.seed,
            self.n_cat,
            self.cat_cardinality,
            self.n_stat,
            self.seq_types,
            self.max_len,
            self.flip_prob,
            self.noise,
            self.switch_rate,
            self.intensity,
            self.max_obs_days,
            self.zero_inflation,
            self.value_sigma
        )
    }

    pub fn digest_hex(&self) -> String {
        hex::encode(Sha256::digest(self.render().as_bytes()))
    }

    fn validate(&self) -> Result<()> {
        if self.n_segments == 0 || self.n_users < self.n_segments {
            return Err(Error::Config(format!(
                "need n_users >= n_segments >= 1 (got {} users, {} segments)",
                self.n_users, self.n_segments
            )));
        }
        if self.cat_cardinality == 0 || self.max_obs_days == 0 || self.max_len == 0 {
            return Err(Error::Config(
                "cardinality, max_len and max_obs_days must be positive".into(),
            ));
        }
        let probs = [self.flip_prob, self.switch_rate];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config(
                "flip_prob and switch_rate must lie in [0, 1]".into(),
            ));
        }
        if let Some(z) = self.zero_inflation {
            if !(0.0..=1.0).contains(&z) {
                return Err(Error::Config("zero_inflation must lie in [0, 1]".into()));
            }
        }
        if self.noise < 0.0 || self.noise > 1.0 || self.intensity < 0.0 || self.value_sigma < 0.0 {
            return Err(Error::Config(
                "noise must lie in [0, 1]; intensity and value_sigma must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

pub fn cat_name(i: usize) -> String {
    format!("cat{i:02}")
}

pub fn stat_name(i: usize) -> String {
    format!("stat{i}")
}

pub fn seq_name(t: usize) -> String {
    match t / SEQ_BASE.len() {
        0 => SEQ_BASE[t].to_string(),
        k => format!("{}_{k}", SEQ_BASE[t % SEQ_BASE.len()]),
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Independent stream for item `index` of kind `salt` under `seed`.
pub fn derived_rng(seed: u64, salt: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(splitmix64(seed ^ salt.rotate_left(32)) ^ index))
}

const SALT_SEGMENT: u64 = 0x5e6;
const SALT_USER: u64 = 0x05e2;

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentArchetype {
    pub id: usize,
    pub profile: Vec<i64>,
    pub activity: f64,
    pub value_scale: f64,
    pub zero_inflation: f64,
    pub payer_prob: f64,
    stat_centers: Vec<f64>,
}

impl SegmentArchetype {
    fn sample(id: usize, cfg: &GenConfig) -> Self {
        let mut rng = derived_rng(cfg.seed, SALT_SEGMENT, id as u64);
        let profile = (0..cfg.n_cat)
            .map(|_| rng.gen_range(0..cfg.cat_cardinality) as i64)
            .collect();
        let activity = rng.gen_range(0.05..0.7);
        let value_scale = rng.gen_range(0.2f64.ln()..50f64.ln()).exp();
        let zero_inflation = cfg
            .zero_inflation
            .unwrap_or_else(|| rng.gen_range(0.2..0.6));
        let payer_prob = rng.gen_range(0.3..0.9);
        let stat_centers = (0..cfg.n_stat).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Self {
            id,
            profile,
            activity,
            value_scale,
            zero_inflation,
            payer_prob,
            stat_centers,
        }
    }
}

pub fn segments(cfg: &GenConfig) -> Vec<SegmentArchetype> {
    (0..cfg.n_segments)
        .map(|s| SegmentArchetype::sample(s, cfg))
        .collect()
}

/// Latent state of one simulated user.
#[derive(Debug, Clone, PartialEq)]
pub struct UserLatent {
    pub segment: usize,
    pub rate: f64,
    pub payer: bool,
    pub value: f64,
    /// Daily activity over one year.
    pub active: Vec<bool>,
    pub spend: Vec<f64>,
    pub obs_days: u32,
}

/// Marketing level per day over the sequence window.
#[derive(Debug, Clone, PartialEq)]
pub struct MarketingPath {
    pub levels: Vec<f64>,
    pub switch_days: Vec<usize>,
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn poisson(rng: &mut ChaCha8Rng, lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 0.0;
    }
    Poisson::new(lambda).expect("positive rate").sample(rng)
}

fn sample_latent(seg: &SegmentArchetype, cfg: &GenConfig, rng: &mut ChaCha8Rng) -> UserLatent {
    let zero = rng.gen::<f64>() < seg.zero_inflation;
    let rate = if zero {
        0.0
    } else {
        (seg.activity * (cfg.noise * 0.4 * gaussian(rng)).exp()).clamp(0.005, 0.95)
    };
    let payer = rng.gen::<f64>() < seg.payer_prob;
    let s = cfg.noise * cfg.value_sigma;
    let value = seg.value_scale * (s * gaussian(rng) - 0.5 * s * s).exp();
    let mut active = Vec::with_capacity(365);
    let mut spend = Vec::with_capacity(365);
    for _ in 0..365 {
        let a = rng.gen::<f64>() < rate;
        active.push(a);
        let amount = if a && payer {
            let e: f64 = Exp1.sample(rng);
            value * (1.0 + cfg.noise * (e - 1.0))
        } else {
            0.0
        };
        spend.push(amount);
    }
    let obs_days = rng.gen_range(1..=cfg.max_obs_days);
    UserLatent {
        segment: seg.id,
        rate,
        payer,
        value,
        active,
        spend,
        obs_days,
    }
}

pub fn marketing_path(cfg: &GenConfig, rng: &mut ChaCha8Rng) -> MarketingPath {
    let mut level = MARKETING_LEVELS[rng.gen_range(0..MARKETING_LEVELS.len())];
    let mut levels = Vec::with_capacity(cfg.max_len);
    let mut switch_days = Vec::new();
    for day in 0..cfg.max_len {
        if day > 0 && cfg.switch_rate > 0.0 && rng.gen::<f64>() < cfg.switch_rate {
            switch_days.push(day);
            level = MARKETING_LEVELS[rng.gen_range(0..MARKETING_LEVELS.len())];
        }
        levels.push(level);
    }
    MarketingPath {
        levels,
        switch_days,
    }
}

/// Observed prefix length: uniform between `W >> switches` and `W`, where
/// `W` is the part of the window the user has been observed for.
pub fn observed_length(window: usize, switches: usize, rng: &mut ChaCha8Rng) -> usize {
    let lo = window.checked_shr(switches as u32).unwrap_or(0);
    rng.gen_range(lo..=window)
}

/// Behaviour series for `user`; returns the series (truncated to their
/// observed length) and the marketing path that drove them.
pub fn simulate_sequences(
    user: &UserLatent,
    cfg: &GenConfig,
    rng: &mut ChaCha8Rng,
) -> (BTreeMap<String, Series>, MarketingPath) {
    let path = marketing_path(cfg, rng);
    let window = cfg.max_len.min(user.obs_days as usize);
    let switches = path.switch_days.iter().filter(|&&d| d < window).count();
    let len = observed_length(window, switches, rng);
    let mut out = BTreeMap::new();
    for t in 0..cfg.seq_types {
        let gain = 1.0 + (t / SEQ_BASE.len()) as f64 / 6.0;
        let mut values = Vec::with_capacity(len);
        for day in 0..len {
            let m = cfg.intensity * gain * path.levels[day];
            let a = if user.active[day] { 1.0 } else { 0.0 };
            let v = match SEQ_BASE[t % SEQ_BASE.len()] {
                "clicks" => poisson(rng, m * (0.1 + a)),
                "dwell" => {
                    let e: f64 = Exp1.sample(rng);
                    a * 10.0 * m * e
                }
                "impressions" => poisson(rng, 4.0 * m),
                "purchases" => poisson(rng, if user.payer { m * 1.5 * a } else { 0.0 }),
                "sessions" => poisson(rng, m * (0.2 + 2.5 * a)),
                _ => user.spend[day] * m.sqrt(),
            };
            values.push(v);
        }
        out.insert(seq_name(t), Series { values, len });
    }
    (out, path)
}

fn build_record(
    index: usize,
    seg: &SegmentArchetype,
    cfg: &GenConfig,
    rng: &mut ChaCha8Rng,
) -> UserRecord {
    let mut cat = BTreeMap::new();
    for (f, &code) in seg.profile.iter().enumerate() {
        let flipped = rng.gen::<f64>() < cfg.noise * cfg.flip_prob;
        let c = if flipped {
            rng.gen_range(0..cfg.cat_cardinality) as i64
        } else {
            code
        };
        cat.insert(cat_name(f), c);
    }
    let user = sample_latent(seg, cfg, rng);
    let mut stat = BTreeMap::new();
    for k in 0..cfg.n_stat {
        let z = cfg.noise * gaussian(rng);
        let v = match k % 4 {
            0 => seg.value_scale.ln() + 0.7 * z,
            1 => user.rate + 0.1 * z,
            2 => seg.stat_centers[k] + z,
            _ => (seg.stat_centers[k] + 0.5 * z).exp(),
        };
        stat.insert(stat_name(k), v);
    }
    let (seq, _) = simulate_sequences(&user, cfg, rng);
    let mut labels = BTreeMap::new();
    let mut lt = 0.0;
    let mut ltv = 0.0;
    let mut day = 0usize;
    for &h in &crate::record::HORIZONS {
        while day < h as usize {
            lt += if user.active[day] { 1.0 } else { 0.0 };
            ltv += user.spend[day];
            day += 1;
        }
        let seen = user.obs_days >= h;
        let lt_task = Task::ALL
            .into_iter()
            .find(|t| t.horizon() == h && !t.is_value());
        let ltv_task = Task::ALL
            .into_iter()
            .find(|t| t.horizon() == h && t.is_value());
        labels.insert(
            lt_task.expect("lt task").key().to_string(),
            seen.then_some(lt),
        );
        labels.insert(
            ltv_task.expect("ltv task").key().to_string(),
            seen.then_some(ltv),
        );
    }
    UserRecord {
        user_id: index as u64,
        cat,
        stat,
        seq,
        labels,
        obs_days: user.obs_days,
    }
}

/// Draws `cfg.n_users` users. Each user has its own derived stream, so the
/// result for user `i` does not depend on how many users are generated.
pub fn sample_population(cfg: &GenConfig) -> Result<Vec<UserRecord>> {
    cfg.validate()?;
    let segs = segments(cfg);
    Ok((0..cfg.n_users)
        .map(|i| {
            let mut rng = derived_rng(cfg.seed, SALT_USER, i as u64);
            let seg = &segs[rng.gen_range(0..segs.len())];
            build_record(i, seg, cfg, &mut rng)
        })
        .collect())
}

/// Like [`sample_population`] but also returns each user's segment.
pub fn sample_population_with_segments(cfg: &GenConfig) -> Result<Vec<(usize, UserRecord)>> {
    cfg.validate()?;
    let segs = segments(cfg);
    Ok((0..cfg.n_users)
        .map(|i| {
            let mut rng = derived_rng(cfg.seed, SALT_USER, i as u64);
            let s = rng.gen_range(0..segs.len());
            (s, build_record(i, &segs[s], cfg, &mut rng))
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub version: u32,
    pub seed: u64,
    pub config_digest: String,
}

impl DatasetHeader {
    pub fn for_config(cfg: &GenConfig) -> Self {
        Self {
            version: FORMAT_VERSION,
            seed: cfg.seed,
            config_digest: cfg.digest_hex(),
        }
    }
}

pub fn write_dataset(path: &Path, header: &DatasetHeader, records: &[UserRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_records(&mut w, header, records).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_records<W: Write>(
    w: &mut W,
    header: &DatasetHeader,
    records: &[UserRecord],
) -> std::io::Result<()> {
    serde_json::to_writer(&mut *w, header)?;
    w.write_all(b"\n")?;
    for r in records {
        serde_json::to_writer(&mut *w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<(DatasetHeader, Vec<UserRecord>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_records(BufReader::new(file)).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

pub fn read_records<R: BufRead>(reader: R) -> Result<(DatasetHeader, Vec<UserRecord>)> {
    let mut lines = reader.lines().enumerate();
    let header_line = match lines.next() {
        Some((_, line)) => line.map_err(|e| Error::io("<dataset>", e))?,
        None => {
            return Err(Error::Parse {
                line: 1,
                message: "missing header".into(),
            })
        }
    };
    let header: DatasetHeader = serde_json::from_str(&header_line).map_err(|e| Error::Parse {
        line: 1,
        message: e.to_string(),
    })?;
    if header.version != FORMAT_VERSION {
        return Err(Error::Data(format!(
            "unsupported dataset version {}",
            header.version
        )));
    }
    let mut records = Vec::new();
    for (i, line) in lines {
        let line = line.map_err(|e| Error::io("<dataset>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: UserRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        rec.validate()
            .map_err(|e| Error::Data(format!("line {}: {}", i + 1, strip_prefix(&e))))?;
        records.push(rec);
    }
    Ok((header, records))
}

fn strip_prefix(e: &Error) -> String {
    match e {
        Error::Data(m) => m.clone(),
        other => other.to_string(),
    }
}
