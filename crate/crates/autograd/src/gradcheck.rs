//! Central finite-difference checks of reverse-mode gradients.

use std::collections::BTreeMap;

use rand::Rng;

use crate::{ParamId, ParamStore, Result, Tape, Tensor, TensorError, Var};

/// Default perturbation for central differences in double precision.
pub const DEFAULT_STEP: f64 = 1e-5;
/// Default pass threshold on [`relative_error`].
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
/// Denominator floor: gradients smaller than this are compared on an
/// absolute scale (`tolerance × ABS_FLOOR`).
pub const ABS_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(ABS_FLOOR);
    (analytic - numeric).abs() / denom
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Coordinate {
    pub param: ParamId,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoordinateCheck {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub checks: Vec<CoordinateCheck>,
}

impl GradcheckReport {
    pub fn pass_fraction(&self) -> f64 {
        if self.checks.is_empty() {
            return 1.0;
        }
        self.checks.iter().filter(|c| c.passed).count() as f64 / self.checks.len() as f64
    }

    pub fn max_rel_error(&self) -> f64 {
        self.checks.iter().map(|c| c.rel_error).fold(0.0, f64::max)
    }

    /// Worst relative error per parameter group, where a group is the
    /// parameter name up to its first `.`-separated component after the
    /// module prefix (e.g. `moe.layer0` for `moe.layer0.task2.expert1.w`).
    pub fn max_by_group(&self, depth: usize) -> BTreeMap<String, (f64, usize)> {
        let mut out: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for c in &self.checks {
            let group = c.name.split('.').take(depth).collect::<Vec<_>>().join(".");
            let slot = out.entry(group).or_insert((0.0, 0));
            slot.0 = slot.0.max(c.rel_error);
            slot.1 += 1;
        }
        out
    }

    pub fn failures(&self) -> impl Iterator<Item = &CoordinateCheck> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

/// Central difference of `loss` with respect to one parameter coordinate.
/// The coordinate's value is restored bit-for-bit afterwards.
pub fn central_difference<F>(
    store: &mut ParamStore,
    coord: Coordinate,
    step: f64,
    loss: &mut F,
) -> Result<f64>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    let original = store.tensor(coord.param).data()[coord.index];
    store.get_mut(coord.param).tensor.data_mut()[coord.index] = original + step;
    let plus = loss(store);
    store.get_mut(coord.param).tensor.data_mut()[coord.index] = original - step;
    let minus = loss(store);
    store.get_mut(coord.param).tensor.data_mut()[coord.index] = original;
    Ok((plus? - minus?) / (2.0 * step))
}

/// Compares the gradients already accumulated in `store` against central
/// differences of `loss` at each coordinate.
pub fn check_coordinates<F>(
    store: &mut ParamStore,
    coords: &[Coordinate],
    step: f64,
    tolerance: f64,
    mut loss: F,
) -> Result<GradcheckReport>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    let mut checks = Vec::with_capacity(coords.len());
    for &coord in coords {
        let p = store.get(coord.param);
        let analytic = p
            .tensor
            .grad()
            .ok_or_else(|| TensorError::MissingGrad(p.name.clone()))?[coord.index];
        let name = p.name.clone();
        let numeric = central_difference(store, coord, step, &mut loss)?;
        let rel_error = relative_error(analytic, numeric);
        checks.push(CoordinateCheck {
            name,
            index: coord.index,
            analytic,
            numeric,
            rel_error,
            passed: rel_error <= tolerance,
        });
    }
    Ok(GradcheckReport { tolerance, checks })
}

/// Samples `total` coordinates covering every trainable parameter at least
/// once (when `total` allows), the remainder drawn uniformly over all
/// trainable scalars.
pub fn sample_coordinates<R: Rng + ?Sized>(
    store: &ParamStore,
    total: usize,
    rng: &mut R,
) -> Vec<Coordinate> {
    let trainable: Vec<(ParamId, usize)> = store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(id, p)| (id, p.tensor.numel()))
        .collect();
    let mut coords: Vec<Coordinate> = trainable
        .iter()
        .take(total)
        .map(|&(param, n)| Coordinate {
            param,
            index: rng.gen_range(0..n),
        })
        .collect();
    let all: usize = trainable.iter().map(|(_, n)| n).sum();
    while coords.len() < total && all > 0 {
        let mut flat = rng.gen_range(0..all);
        for &(param, n) in &trainable {
            if flat < n {
                coords.push(Coordinate { param, index: flat });
                break;
            }
            flat -= n;
        }
    }
    coords
}

/// Gradient check of a tape-built scalar function with respect to its
/// inputs. `build` receives the input variables (all gradient-carrying
/// leaves) and returns the scalar output. Checks `per_input` random
/// coordinates of each input and returns the worst relative error.
pub fn check_inputs<R, F>(inputs: &[Tensor], per_input: usize, rng: &mut R, build: F) -> Result<f64>
where
    R: Rng + ?Sized,
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = build(&mut tape, &vars)?;
        Ok((tape, vars, out))
    };
    let (tape, vars, out) = eval(inputs)?;
    let grads = tape.gradients(out)?;
    let mut worst: f64 = 0.0;
    let mut work = inputs.to_vec();
    for (i, &v) in vars.iter().enumerate() {
        let analytic_all = grads
            .get(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        for _ in 0..per_input {
            let idx = rng.gen_range(0..inputs[i].numel());
            let original = work[i].data()[idx];
            work[i].data_mut()[idx] = original + DEFAULT_STEP;
            let (t, _, o) = eval(&work)?;
            let plus = t.value(o).item();
            work[i].data_mut()[idx] = original - DEFAULT_STEP;
            let (t, _, o) = eval(&work)?;
            let minus = t.value(o).item();
            work[i].data_mut()[idx] = original;
            let numeric = (plus - minus) / (2.0 * DEFAULT_STEP);
            worst = worst.max(relative_error(analytic_all[idx], numeric));
        }
    }
    Ok(worst)
}
