//! Dispersion of the per-point model update for CFM and ExFM, for the
//! linear map from `N(0, I)` to `N(μ, σ²)` per axis.
//!
//! The update is `Δv = γ·(target − v(x, t))`, where `v` is the exact field
//! and the target is either the conditional velocity (CFM) or the SNIS
//! estimate from a bank of `N` target samples that contains the paired one
//! (ExFM). Dispersion is the per-axis variance over draws; the scalar
//! summaries are sums over axes.
//!
//! The closed-form CFM dispersion follows from `v = w(t)·x + C` with
//! `w(t) = (tσ² + t − 1)/((1 − t)² + t²σ²)`:
//! `D Δv = γ²[(1 + w(1 − t))²·D x0 + c(t)²·D x1]`. Substituting `x = (1 − t)x0 + t·x1`
//! gives `c(t) = 1 − t·w(t)`; the alternative `c(t) = 1 − w(t)` is also
//! reported, and the Monte Carlo estimate tells them apart (they differ by a
//! factor of 4 on `D x1` at `t = 0`).

use rayon::prelude::*;

use crate::densities::{Density, Gaussian};
use crate::error::{check_dim, Error, Result};
use crate::estimators::{snis_value, TargetBank};
use crate::exact_fields::{gauss_to_gauss_field, GaussPairParams};
use crate::flow_maps::ConditionalMap;
use crate::integrators::VectorField;
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct CfmAnalytic {
    /// Per-axis dispersion with `c(t) = 1 − t·w(t)`.
    pub rederived: Vec<f64>,
    /// Per-axis dispersion with `c(t) = 1 − w(t)`.
    pub alternative: Vec<f64>,
}

/// `w(t)` of the affine exact field for `N(0, 1) → N(μ, σ²)`.
pub fn affine_slope(sigma: f64, t: f64) -> f64 {
    let s2 = sigma * sigma;
    (t * s2 + t - 1.0) / ((1.0 - t).powi(2) + t * t * s2)
}

pub fn cfm_dispersion_analytic(pair: &GaussPairParams, t: f64, gamma: f64) -> Result<CfmAnalytic> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::TimeOutOfRange { t, range: "[0, 1]" });
    }
    if pair.source.mean().iter().any(|m| *m != 0.0) || pair.source.scale().iter().any(|s| *s != 1.0) {
        return Err(Error::Unsupported("closed-form dispersion needs a standard normal source".into()));
    }
    let g2 = gamma * gamma;
    let mut rederived = Vec::with_capacity(pair.dim());
    let mut alternative = Vec::with_capacity(pair.dim());
    for &s in pair.target.scale() {
        let w = affine_slope(s, t);
        let d0 = (1.0 + w * (1.0 - t)).powi(2);
        let dx1 = s * s;
        rederived.push(g2 * (d0 + (1.0 - t * w).powi(2) * dx1));
        alternative.push(g2 * (d0 + (1.0 - w).powi(2) * dx1));
    }
    Ok(CfmAnalytic { rederived, alternative })
}

/// Per-axis dispersion with the count of draws that were dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct DispersionEstimate {
    pub per_axis: Vec<f64>,
    pub draws: usize,
    /// Draws excluded because the estimator degenerated there.
    pub excluded: usize,
}

impl DispersionEstimate {
    pub fn total(&self) -> f64 {
        self.per_axis.iter().sum()
    }
}

fn variance_per_axis(rows: &[f64], d: usize) -> Vec<f64> {
    let n = rows.len() / d;
    (0..d)
        .map(|a| {
            let mean = rows.iter().skip(a).step_by(d).sum::<f64>() / n as f64;
            rows.iter().skip(a).step_by(d).map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        })
        .collect()
}

/// Monte Carlo dispersion of the CFM update `γ(x1 − x0 − v(x, t))` under the
/// linear map, for any model `v`.
pub fn cfm_dispersion_mc(
    rho0: &Density,
    rho1: &Density,
    model: &(impl VectorField + ?Sized),
    t: f64,
    draws: usize,
    gamma: f64,
    seed: u64,
) -> Result<DispersionEstimate> {
    let d = rho0.dim();
    check_dim(d, rho1.dim())?;
    if draws < 2 {
        return Err(Error::InvalidParameter("need at least 2 draws".into()));
    }
    let rows: Vec<Result<Vec<f64>>> = (0..draws)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::derive(seed, i as u64);
            let mut x0 = vec![0.0; d];
            let mut x1 = vec![0.0; d];
            rho0.sample_point(&mut r, &mut x0);
            rho1.sample_point(&mut r, &mut x1);
            let x: Vec<f64> = x0.iter().zip(&x1).map(|(a, b)| (1.0 - t) * a + t * b).collect();
            let mut v = vec![0.0; d];
            model.eval(&x, t, &mut v)?;
            Ok((0..d).map(|k| gamma * (x1[k] - x0[k] - v[k])).collect())
        })
        .collect();
    let mut flat = Vec::with_capacity(draws * d);
    for r in rows {
        flat.extend(r?);
    }
    Ok(DispersionEstimate { per_axis: variance_per_axis(&flat, d), draws, excluded: 0 })
}

/// Numeric ExFM dispersion: `M` points `x^i = (1 − t)x0^i + t·x1^{i,0}`, each
/// with its own bank of `N` target samples led by the paired `x1^{i,0}`;
/// returns the dispersion of `γ(v(x^i, t) − v^d(x^i, t))` over `i`.
#[allow(clippy::too_many_arguments)]
pub fn exfm_dispersion_numeric(
    rho0: &Density,
    rho1: &Density,
    v_exact: &(impl VectorField + ?Sized),
    t: f64,
    m: usize,
    n: usize,
    gamma: f64,
    seed: u64,
) -> Result<DispersionEstimate> {
    let d = rho0.dim();
    check_dim(d, rho1.dim())?;
    if m < 2 || n == 0 {
        return Err(Error::InvalidParameter("need M >= 2 and N >= 1".into()));
    }
    let map = ConditionalMap::Linear;
    let rows: Vec<Result<Option<Vec<f64>>>> = (0..m)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::derive(seed, i as u64);
            let bank = rho1.sample_with(&mut r, n);
            let mut x0 = vec![0.0; d];
            rho0.sample_point(&mut r, &mut x0);
            let x: Vec<f64> = (0..d).map(|k| (1.0 - t) * x0[k] + t * bank[k]).collect();
            let bank = TargetBank::new(bank, d, true)?;
            let vd = match snis_value(&x, t, &bank, &map, rho0) {
                Ok(v) => v,
                Err(e) if e.is_numerical() => return Ok(None),
                Err(e) => return Err(e),
            };
            let mut v = vec![0.0; d];
            v_exact.eval(&x, t, &mut v)?;
            Ok(Some((0..d).map(|k| gamma * (v[k] - vd[k])).collect()))
        })
        .collect();
    let mut flat = Vec::with_capacity(m * d);
    let mut excluded = 0;
    for r in rows {
        match r? {
            Some(v) => flat.extend(v),
            None => excluded += 1,
        }
    }
    if flat.len() < 2 * d {
        return Err(Error::DegenerateWeights);
    }
    Ok(DispersionEstimate { per_axis: variance_per_axis(&flat, d), draws: m - excluded, excluded })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DispersionConfig {
    pub dim: usize,
    pub mu: f64,
    pub sigma: f64,
    pub ts: Vec<f64>,
    /// Draws `M` for the ExFM estimate.
    pub m: usize,
    /// Bank size `N`.
    pub n: usize,
    /// Draws for the CFM Monte Carlo check.
    pub cfm_draws: usize,
    pub gamma: f64,
    pub seed: u64,
}

impl Default for DispersionConfig {
    fn default() -> Self {
        Self {
            dim: 1,
            mu: 2.0,
            sigma: 3.0,
            ts: (1..20).map(|k| k as f64 / 20.0).collect(),
            m: 20_000,
            n: 128,
            cfm_draws: 200_000,
            gamma: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DispersionRow {
    pub t: f64,
    pub cfm_analytic: f64,
    pub cfm_alternative: f64,
    pub cfm_mc: f64,
    pub exfm_numeric: f64,
    pub excluded: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DispersionTable {
    pub rows: Vec<DispersionRow>,
    /// `|D x1|`, `|D x0|` and `|D x1|/N`, scaled by `γ²`.
    pub dx1: f64,
    pub dx0: f64,
    pub dx1_over_n: f64,
}

impl DispersionTable {
    /// CSV with the reference levels as leading `#` lines.
    pub fn to_csv_string(&self) -> String {
        use crate::densities::fmt_f64 as f;
        let mut s = format!(
            "# D_x1={}\n# D_x0={}\n# D_x1_over_N={}\nt,cfm_analytic,cfm_alternative,cfm_mc,exfm_numeric,excluded\n",
            f(self.dx1),
            f(self.dx0),
            f(self.dx1_over_n)
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                f(r.t),
                f(r.cfm_analytic),
                f(r.cfm_alternative),
                f(r.cfm_mc),
                f(r.exfm_numeric),
                r.excluded
            ));
        }
        s
    }
}

/// The three curves over the configured time grid.
pub fn dispersion_sweep(cfg: &DispersionConfig) -> Result<DispersionTable> {
    let pair = GaussPairParams::new(Gaussian::standard(cfg.dim), Gaussian::isotropic(cfg.dim, cfg.mu, cfg.sigma)?)?;
    let rho0: Density = pair.source.clone().into();
    let rho1: Density = pair.target.clone().into();
    let exact = |x: &[f64], t: f64, out: &mut [f64]| -> Result<()> {
        out.copy_from_slice(&gauss_to_gauss_field(&pair, x, t)?);
        Ok(())
    };
    let mut rows = Vec::with_capacity(cfg.ts.len());
    for (k, &t) in cfg.ts.iter().enumerate() {
        let a = cfm_dispersion_analytic(&pair, t, cfg.gamma)?;
        let seed = cfg.seed.wrapping_add(2 * k as u64);
        let mc = cfm_dispersion_mc(&rho0, &rho1, &exact, t, cfg.cfm_draws, cfg.gamma, seed)?;
        let ex = exfm_dispersion_numeric(&rho0, &rho1, &exact, t, cfg.m, cfg.n, cfg.gamma, seed + 1)?;
        rows.push(DispersionRow {
            t,
            cfm_analytic: a.rederived.iter().sum(),
            cfm_alternative: a.alternative.iter().sum(),
            cfm_mc: mc.total(),
            exfm_numeric: ex.total(),
            excluded: ex.excluded,
        });
    }
    let g2 = cfg.gamma * cfg.gamma;
    let dx1 = g2 * cfg.dim as f64 * cfg.sigma * cfg.sigma;
    Ok(DispersionTable { rows, dx1, dx0: g2 * cfg.dim as f64, dx1_over_n: dx1 / cfg.n as f64 })
}
