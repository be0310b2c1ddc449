//! Monte Carlo estimators of the marginal field from target samples.
//!
//! With a bank `{x̄^k}` drawn from `ρ1`, the marginal field at `(x, t)` is the
//! `ρc`-weighted average of conditional velocities, estimated either by
//! self-normalized importance sampling (softmax of the log-weights) or by
//! rejection sampling against the weight supremum.
//!
//! When the bank contains the paired `x1` of the training point, the SNIS
//! estimate is an unbiased estimate of the marginal field at `x`: averaging
//! over which bank member generated `x` turns the self-normalized ratio into
//! the exact conditional expectation.

use rayon::prelude::*;

use crate::densities::{Density, EmpiricalSet};
use crate::error::{check_dim, Error, Result};
use crate::flow_maps::{ConditionalMap, MapAtTime};
use crate::rng;

/// Target samples `x̄^k` (row-major). When `paired` is set, row 0 is the
/// paired `x1` of the point being estimated.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetBank {
    samples: Vec<f64>,
    dim: usize,
    paired: bool,
}

impl TargetBank {
    pub fn new(samples: Vec<f64>, dim: usize, paired: bool) -> Result<Self> {
        if dim == 0 || samples.is_empty() || !samples.len().is_multiple_of(dim) {
            return Err(Error::InvalidParameter("target bank needs N >= 1 rows".into()));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("target bank".into()));
        }
        Ok(Self { samples, dim, paired })
    }

    pub fn from_set(set: &EmpiricalSet) -> Self {
        Self { samples: set.as_flat().to_vec(), dim: set.dim(), paired: false }
    }

    /// Bank with `x1` placed first and flagged as paired.
    pub fn with_paired(x1: &[f64], rest: &[f64]) -> Result<Self> {
        let mut samples = Vec::with_capacity(x1.len() + rest.len());
        samples.extend_from_slice(x1);
        samples.extend_from_slice(rest);
        Self::new(samples, x1.len(), true)
    }

    pub fn len(&self) -> usize {
        self.samples.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_paired(&self) -> bool {
        self.paired
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.samples[k * self.dim..(k + 1) * self.dim]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.samples.chunks_exact(self.dim)
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.samples
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldEstimate {
    pub value: Vec<f64>,
    /// Logits `Y^k`, up to a constant shared by all `k`.
    pub log_weights: Vec<f64>,
    /// Normalized weights; uniform over the accepted set for rejection sampling.
    pub weights: Vec<f64>,
    /// `1/Σw²` for SNIS, the accepted count for rejection sampling.
    pub ess: f64,
}

/// Max-shifted softmax.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    let mut w = logits.to_vec();
    softmax_in_place(&mut w)?;
    Ok(w)
}

fn softmax_in_place(w: &mut [f64]) -> Result<()> {
    if w.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(Error::NonFinite("logit".into()));
    }
    let max = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::DegenerateWeights);
    }
    let mut sum = 0.0;
    for v in w.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in w.iter_mut() {
        *v /= sum;
    }
    Ok(())
}

/// Fills `out` with `Y^k` for every bank row.
fn logits(m: &MapAtTime, x: &[f64], bank: &TargetBank, rho0: &Density, out: &mut Vec<f64>) -> Result<()> {
    out.clear();
    let p = m.path;
    match rho0 {
        Density::Gaussian(g) if p.std == 0.0 => {
            if p.a.abs() < 1e-12 {
                return Err(Error::SingularMap { t: m.t });
            }
            // ‖(x − b x̄)/a − μ‖²_Σ without constants.
            let inv_a = 1.0 / p.a;
            let inv_s: Vec<f64> = g.scale().iter().map(|s| 1.0 / s).collect();
            for row in bank.rows() {
                let mut acc = 0.0;
                for i in 0..x.len() {
                    let z = ((x[i] - p.b * row[i]) * inv_a - g.mean()[i]) * inv_s[i];
                    acc += z * z;
                }
                out.push(-0.5 * acc);
            }
        }
        _ => {
            let mut scratch = vec![0.0; x.len()];
            for row in bank.rows() {
                out.push(m.log_weight(x, row, rho0, &mut scratch)?);
            }
        }
    }
    Ok(())
}

fn weighted_velocity(m: &MapAtTime, x: &[f64], bank: &TargetBank, w: &[f64]) -> Vec<f64> {
    // c1·Σw(x̄ − x) + (c1 + cx)·x, which avoids cancelling E[x̄] against x.
    let mut acc = vec![0.0; x.len()];
    for (row, wk) in bank.rows().zip(w) {
        if *wk == 0.0 {
            continue;
        }
        for i in 0..x.len() {
            acc[i] += wk * (row[i] - x[i]);
        }
    }
    (0..x.len()).map(|i| m.c1 * acc[i] + (m.c1 + m.cx) * x[i]).collect()
}

fn check_inputs(x: &[f64], bank: &TargetBank, rho0: &Density) -> Result<()> {
    check_dim(bank.dim(), x.len())?;
    check_dim(rho0.dim(), x.len())?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("estimator argument".into()));
    }
    Ok(())
}

/// Self-normalized importance-sampling estimate of the marginal field.
pub fn snis_target(
    x: &[f64],
    t: f64,
    bank: &TargetBank,
    map: &ConditionalMap,
    rho0: &Density,
) -> Result<FieldEstimate> {
    check_inputs(x, bank, rho0)?;
    let m = map.at(t)?;
    let mut y = Vec::with_capacity(bank.len());
    logits(&m, x, bank, rho0, &mut y)?;
    let w = softmax(&y)?;
    let value = weighted_velocity(&m, x, bank, &w);
    let ess = 1.0 / w.iter().map(|v| v * v).sum::<f64>();
    Ok(FieldEstimate { value, log_weights: y, weights: w, ess })
}

/// SNIS estimate for the σs-regularized linear map; defined at `t = 1`.
pub fn snis_target_regularized(
    x: &[f64],
    t: f64,
    bank: &TargetBank,
    sigma_s: f64,
    rho0: &Density,
) -> Result<FieldEstimate> {
    let map = ConditionalMap::RegularizedLinear { sigma_s };
    map.validate()?;
    snis_target(x, t, bank, &map, rho0)
}

/// Only the estimated value, skipping the per-sample diagnostics.
pub fn snis_value(x: &[f64], t: f64, bank: &TargetBank, map: &ConditionalMap, rho0: &Density) -> Result<Vec<f64>> {
    check_inputs(x, bank, rho0)?;
    let m = map.at(t)?;
    let mut y = Vec::with_capacity(bank.len());
    logits(&m, x, bank, rho0, &mut y)?;
    softmax_in_place(&mut y)?;
    Ok(weighted_velocity(&m, x, bank, &y))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RejectionOptions {
    pub seed: u64,
    /// Accept the paired sample (row 0 of a paired bank) unconditionally.
    pub admit_paired: bool,
    /// `ln C`; required when it has no closed form (mixture sources).
    pub log_bound: Option<f64>,
}

impl RejectionOptions {
    pub fn new(seed: u64) -> Self {
        Self { seed, admit_paired: true, log_bound: None }
    }
}

/// `ln sup f` of the dropped-constant log-weight used by [`snis_target`].
fn log_supremum(m: &MapAtTime, rho0: &Density, dim: usize) -> Option<f64> {
    let p = m.path;
    if p.std > 0.0 {
        let var = p.a * p.a + p.std * p.std;
        return Some(-0.5 * dim as f64 * (2.0 * std::f64::consts::PI * var).ln());
    }
    rho0.max_log_density()
}

/// Rejection-sampling estimate: accept `x̄^k` when `C·ξ_k ≤ f(x̄^k)` and
/// average conditional velocities over the accepted set.
pub fn rejection_target(
    x: &[f64],
    t: f64,
    bank: &TargetBank,
    map: &ConditionalMap,
    rho0: &Density,
    opts: RejectionOptions,
) -> Result<FieldEstimate> {
    check_inputs(x, bank, rho0)?;
    let m = map.at(t)?;
    let log_c = match opts.log_bound.or_else(|| log_supremum(&m, rho0, x.len())) {
        Some(c) => c,
        None => return Err(Error::Unsupported("rejection sampling needs a weight bound for this source".into())),
    };
    // Full log-weights (not constant-shifted) so they compare against C.
    let mut scratch = vec![0.0; x.len()];
    let mut y = Vec::with_capacity(bank.len());
    for row in bank.rows() {
        y.push(m.log_weight(x, row, rho0, &mut scratch)?);
    }
    let mut r = rng::seeded(opts.seed);
    let mut w = vec![0.0; bank.len()];
    let mut count = 0usize;
    for (k, lw) in y.iter().enumerate() {
        let xi = rng::uniform(&mut r);
        let forced = k == 0 && bank.is_paired() && opts.admit_paired;
        if forced || xi.ln() + log_c <= *lw {
            w[k] = 1.0;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptyAcceptance);
    }
    w.iter_mut().for_each(|v| *v /= count as f64);
    let value = weighted_velocity(&m, x, bank, &w);
    Ok(FieldEstimate { value, log_weights: y, weights: w, ess: count as f64 })
}

/// Brownian-bridge field and score estimates from source and target banks,
/// as softmax-weighted double sums over all pairs `(x0^i, x1^j)`.
pub fn sde_pair_targets(
    x: &[f64],
    t: f64,
    source: &EmpiricalSet,
    target: &EmpiricalSet,
    sigma_e: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let d = x.len();
    check_dim(source.dim(), d)?;
    check_dim(target.dim(), d)?;
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::TimeOutOfRange { t, range: "(0, 1)" });
    }
    if !(sigma_e > 0.0) {
        return Err(Error::InvalidParameter(format!("sigma_e must be positive, got {sigma_e}")));
    }
    let var = sigma_e * sigma_e * t * (1.0 - t);
    let n0 = source.len();
    let n1 = target.len();
    let mut y = Vec::with_capacity(n0 * n1);
    let mut mu = vec![0.0; d];
    for x0 in source.rows() {
        for x1 in target.rows() {
            let mut acc = 0.0;
            for i in 0..d {
                mu[i] = (1.0 - t) * x0[i] + t * x1[i];
                let r = x[i] - mu[i];
                acc += r * r;
            }
            y.push(-0.5 * acc / var);
        }
    }
    softmax_in_place(&mut y)?;
    let drift = (1.0 - 2.0 * t) / (2.0 * t * (1.0 - t));
    let mut field = vec![0.0; d];
    let mut score = vec![0.0; d];
    let mut k = 0;
    for x0 in source.rows() {
        for x1 in target.rows() {
            let w = y[k];
            k += 1;
            if w == 0.0 {
                continue;
            }
            for i in 0..d {
                let m = (1.0 - t) * x0[i] + t * x1[i];
                field[i] += w * (drift * (x[i] - m) + x1[i] - x0[i]);
                score[i] += w * (m - x[i]) / var;
            }
        }
    }
    Ok((field, score))
}

/// SNIS values for many points sharing one bank, evaluated in parallel.
pub fn snis_batch(
    xs: &[f64],
    ts: &[f64],
    bank: &TargetBank,
    map: &ConditionalMap,
    rho0: &Density,
) -> Result<Vec<f64>> {
    let d = bank.dim();
    check_dim(ts.len() * d, xs.len())?;
    let rows: Vec<Result<Vec<f64>>> = xs
        .par_chunks_exact(d)
        .zip(ts.par_iter())
        .map(|(x, t)| snis_value(x, *t, bank, map, rho0))
        .collect();
    let mut out = Vec::with_capacity(xs.len());
    for r in rows {
        out.extend(r?);
    }
    Ok(out)
}
