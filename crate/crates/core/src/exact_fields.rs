//! Closed-form marginal vector fields, scores and trajectories, plus direct
//! quadrature of the marginal field integrals for one-dimensional densities.
//!
//! Multi-dimensional Gaussian cases apply the scalar formulas per axis, since
//! the coordinates separate for diagonal covariances.

use crate::densities::{log_sum_exp, Density, Gaussian, GaussianMixture};
use crate::error::{check_dim, Error, Result};
use crate::flow_maps::ConditionalMap;
use crate::quadrature::integrate_with_breaks;

/// Source `N(μ0, σ0²)` and target `N(μ1, σ1²)`, per axis.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussPairParams {
    pub source: Gaussian,
    pub target: Gaussian,
}

impl GaussPairParams {
    pub fn new(source: Gaussian, target: Gaussian) -> Result<Self> {
        check_dim(source.dim(), target.dim())?;
        Ok(Self { source, target })
    }

    /// One-dimensional pair from scalar parameters.
    pub fn scalar(mu0: f64, sigma0: f64, mu1: f64, sigma1: f64) -> Result<Self> {
        Self::new(Gaussian::scalar(mu0, sigma0)?, Gaussian::scalar(mu1, sigma1)?)
    }

    pub fn dim(&self) -> usize {
        self.source.dim()
    }
}

/// Standard normal source, target `N(μ1, σ1²)`, bridge noise `σe`.
#[derive(Debug, Clone, PartialEq)]
pub struct SdeGaussParams {
    pub target: Gaussian,
    pub sigma_e: f64,
}

impl SdeGaussParams {
    pub fn new(target: Gaussian, sigma_e: f64) -> Result<Self> {
        if !(sigma_e > 0.0 && sigma_e.is_finite()) {
            return Err(Error::InvalidParameter(format!("sigma_e must be positive, got {sigma_e}")));
        }
        Ok(Self { target, sigma_e })
    }

    pub fn dim(&self) -> usize {
        self.target.dim()
    }
}

fn check_unit_time(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::TimeOutOfRange { t, range: "[0, 1]" });
    }
    Ok(())
}

#[inline]
fn g2g_scalar(mu0: f64, s0: f64, mu1: f64, s1: f64, x: f64, t: f64) -> f64 {
    let (v0, v1) = (s0 * s0, s1 * s1);
    (v1 * t * (x - mu0) - v0 * (1.0 - t) * (x - mu1)) / (v1 * t * t + v0 * (1.0 - t) * (1.0 - t))
}

/// Marginal field of the linear map between two Gaussians. Finite on all of `[0, 1]`.
pub fn gauss_to_gauss_field(p: &GaussPairParams, x: &[f64], t: f64) -> Result<Vec<f64>> {
    check_dim(p.dim(), x.len())?;
    check_unit_time(t)?;
    let (s, g) = (&p.source, &p.target);
    Ok((0..x.len())
        .map(|i| g2g_scalar(s.mean()[i], s.scale()[i], g.mean()[i], g.scale()[i], x[i], t))
        .collect())
}

/// Trajectory of [`gauss_to_gauss_field`] started at `x0`.
pub fn gauss_to_gauss_trajectory(p: &GaussPairParams, x0: &[f64], t: f64) -> Result<Vec<f64>> {
    check_dim(p.dim(), x0.len())?;
    check_unit_time(t)?;
    let (s, g) = (&p.source, &p.target);
    Ok((0..x0.len())
        .map(|i| {
            let (mu0, mu1) = (s.mean()[i], g.mean()[i]);
            let r = g.scale()[i] / s.scale()[i];
            (1.0 - t) * mu0 + t * mu1 + (x0[i] - mu0) * (r * r * t * t + (1.0 - t) * (1.0 - t)).sqrt()
        })
        .collect())
}

/// Marginal field from `N(0, 1)` to `½N(−μ, σ²) + ½N(μ, σ²)` on the linear map,
/// evaluated in log-space so it stays finite for large `|x|`.
pub fn gauss_to_gm_field(target: &GaussianMixture, x: f64, t: f64) -> Result<f64> {
    let c = target.components();
    let symmetric = c.len() == 2
        && target.dim() == 1
        && c[0].0 == 0.5
        && c[0].1.mean()[0] == -c[1].1.mean()[0]
        && c[0].1.scale()[0] == c[1].1.scale()[0];
    if !symmetric {
        return Err(Error::Unsupported(
            "closed-form mixture field needs a symmetric two-component 1D mixture".into(),
        ));
    }
    if !(0.0..1.0).contains(&t) {
        return Err(Error::TimeOutOfRange { t, range: "[0, 1)" });
    }
    let mu = c[1].1.mean()[0];
    let sigma = c[1].1.scale()[0];
    // Each branch is a Gaussian marginal N(±tμ, (1−t)² + t²σ²) with its own
    // Gaussian-to-Gaussian field; the mixture field is their posterior average.
    let var = (1.0 - t) * (1.0 - t) + t * t * sigma * sigma;
    let logit = |m: f64| -0.5 * (x - t * m) * (x - t * m) / var;
    let (l0, l1) = (logit(-mu), logit(mu));
    let lse = log_sum_exp([l0, l1].into_iter());
    let (p0, p1) = ((l0 - lse).exp(), (l1 - lse).exp());
    Ok(p0 * g2g_scalar(0.0, 1.0, -mu, sigma, x, t) + p1 * g2g_scalar(0.0, 1.0, mu, sigma, x, t))
}

#[derive(Clone, Copy)]
struct Envelope {
    center: f64,
    std: f64,
}

/// Ratio `∫ g·e^L / ∫ e^L` for a log-integrand `L` that is, up to a constant,
/// the log of a product of two Gaussian mixtures in the integration variable.
/// The envelopes of either factor may be empty when it is constant.
fn posterior_ratio(
    g: impl Fn(f64) -> f64,
    log_f: impl Fn(f64) -> f64,
    first: &[Envelope],
    second: &[Envelope],
) -> Result<f64> {
    let mut posts = Vec::new();
    let combine = |a: &Envelope, b: &Envelope| {
        let (pa, pb) = (1.0 / (a.std * a.std), 1.0 / (b.std * b.std));
        let p = pa + pb;
        Envelope { center: (a.center * pa + b.center * pb) / p, std: p.sqrt().recip() }
    };
    match (first.is_empty(), second.is_empty()) {
        (true, true) => return Err(Error::Quadrature("no envelope for integration range".into())),
        (true, false) => posts.extend_from_slice(second),
        (false, true) => posts.extend_from_slice(first),
        (false, false) => {
            for a in first {
                for b in second {
                    posts.push(combine(a, b));
                }
            }
        }
    }
    let mut breaks = Vec::with_capacity(posts.len() * 9);
    for e in &posts {
        for k in [-12.0, -6.0, -3.0, -1.0, 0.0, 1.0, 3.0, 6.0, 12.0] {
            breaks.push(e.center + k * e.std);
        }
    }
    breaks.sort_by(f64::total_cmp);
    breaks.dedup();
    let shift = posts.iter().map(|e| log_f(e.center)).fold(f64::NEG_INFINITY, f64::max);
    if !shift.is_finite() {
        return Err(Error::Quadrature("integrand vanishes at every envelope centre".into()));
    }
    let den = integrate_with_breaks(|u| (log_f(u) - shift).exp(), &breaks, 1e-13, 0.0)?;
    if !(den.value > 0.0) {
        return Err(Error::Quadrature("denominator underflow".into()));
    }
    let spread = posts.iter().map(|e| e.std + e.center.abs()).fold(0.0, f64::max) + 1.0;
    let num = integrate_with_breaks(|u| g(u) * (log_f(u) - shift).exp(), &breaks, 1e-13, 1e-14 * den.value * spread)?;
    Ok(num.value / den.value)
}

fn scalar_components(d: &Density) -> Result<Vec<(f64, f64, f64)>> {
    if d.dim() != 1 {
        return Err(Error::Unsupported("quadrature fields are one-dimensional".into()));
    }
    Ok(d.components().into_iter().map(|(w, g)| (w, g.mean()[0], g.scale()[0])).collect())
}

/// Marginal field of any conditional map between 1D densities, by adaptive
/// quadrature over `x1` of `w(t, x1, x)·ρc(x | x1, t)·ρ1(x1)`, normalized by the
/// same integral without `w`.
pub fn marginal_field_quadrature(
    map: &ConditionalMap,
    rho0: &Density,
    rho1: &Density,
    x: f64,
    t: f64,
) -> Result<f64> {
    let c0 = scalar_components(rho0)?;
    let c1 = scalar_components(rho1)?;
    if !x.is_finite() {
        return Err(Error::NonFinite("field argument".into()));
    }
    let m = map.at(t)?;
    let p = m.path;
    // The ρ0 factor, as a function of x1, is a Gaussian around (x − aμ)/b.
    let first: Vec<Envelope> = if p.b.abs() < 1e-300 {
        Vec::new()
    } else {
        c0.iter()
            .map(|&(_, mu, s)| Envelope {
                center: (x - p.a * mu) / p.b,
                std: (p.a * p.a * s * s + p.std * p.std).sqrt() / p.b.abs(),
            })
            .collect()
    };
    let second: Vec<Envelope> = c1.iter().map(|&(_, mu, s)| Envelope { center: mu, std: s }).collect();
    let log_f = |x1: f64| {
        let mut scratch = [0.0];
        let lw = m.log_weight(&[x], &[x1], rho0, &mut scratch).unwrap_or(f64::NEG_INFINITY);
        lw + rho1.log_density_unchecked(&[x1])
    };
    // ∫(x1 − x)·f keeps the cancellation against x out of the quadrature.
    let shifted_mean = posterior_ratio(|x1| x1 - x, log_f, &first, &second)?;
    Ok(m.c1 * shifted_mean + (m.c1 + m.cx) * x)
}

/// Marginal field of the linear map for 1D densities, `t < 1`.
pub fn quadrature_field(rho0: &Density, rho1: &Density, x: f64, t: f64) -> Result<f64> {
    marginal_field_quadrature(&ConditionalMap::Linear, rho0, rho1, x, t)
}

/// Marginal field of the σs-regularized linear map, defined on all of `[0, 1]`.
pub fn regularized_field(rho0: &Density, rho1: &Density, sigma_s: f64, x: f64, t: f64) -> Result<f64> {
    let map = ConditionalMap::RegularizedLinear { sigma_s };
    map.validate()?;
    marginal_field_quadrature(&map, rho0, rho1, x, t)
}

/// Closed form of the regularized field at `t = 0`: `E[x1] − x(1 − σs)`.
pub fn regularized_field_t0(rho1: &Density, sigma_s: f64, x: &[f64]) -> Result<Vec<f64>> {
    check_dim(rho1.dim(), x.len())?;
    Ok(rho1.mean().iter().zip(x).map(|(m, xi)| m - xi * (1.0 - sigma_s)).collect())
}

/// Regularized field at `t = 1` after the substitution `x1 = x − σs·y`:
/// `∫(x − y)ρ0(y)ρ1(x − σs y)dy / ∫ρ0(y)ρ1(x − σs y)dy`.
pub fn regularized_field_t1(rho0: &Density, rho1: &Density, sigma_s: f64, x: f64) -> Result<f64> {
    if !(sigma_s > 0.0) {
        return Err(Error::InvalidParameter(format!("sigma_s must be positive, got {sigma_s}")));
    }
    let c0 = scalar_components(rho0)?;
    let c1 = scalar_components(rho1)?;
    let first: Vec<Envelope> = c0.iter().map(|&(_, mu, s)| Envelope { center: mu, std: s }).collect();
    let second: Vec<Envelope> = c1
        .iter()
        .map(|&(_, mu, s)| Envelope { center: (x - mu) / sigma_s, std: s / sigma_s })
        .collect();
    let log_f = |y: f64| rho0.log_density_unchecked(&[y]) + rho1.log_density_unchecked(&[x - sigma_s * y]);
    // x − E[y], written as E[x − y].
    posterior_ratio(|y| x - y, log_f, &first, &second)
}

fn sde_variance(sigma1: f64, se: f64, t: f64) -> f64 {
    (1.0 - t) * (1.0 - t) + t * (1.0 - t) * se * se + t * t * sigma1 * sigma1
}

/// Marginal field of the Brownian bridge from `N(0, 1)` to a Gaussian target.
pub fn sde_gauss_field(p: &SdeGaussParams, x: &[f64], t: f64) -> Result<Vec<f64>> {
    check_dim(p.dim(), x.len())?;
    check_unit_time(t)?;
    let se2 = p.sigma_e * p.sigma_e;
    Ok((0..x.len())
        .map(|i| {
            let (mu1, s1) = (p.target.mean()[i], p.target.scale()[i]);
            let num = x[i] * (t * s1 * s1 + 0.5 * (1.0 - t) * se2) - (x[i] - mu1) * ((1.0 - t) + 0.5 * t * se2);
            num / sde_variance(s1, p.sigma_e, t)
        })
        .collect())
}

pub fn sde_gauss_trajectory(p: &SdeGaussParams, x0: &[f64], t: f64) -> Result<Vec<f64>> {
    check_dim(p.dim(), x0.len())?;
    check_unit_time(t)?;
    Ok((0..x0.len())
        .map(|i| {
            let (mu1, s1) = (p.target.mean()[i], p.target.scale()[i]);
            mu1 * t + x0[i] * sde_variance(s1, p.sigma_e, t).sqrt()
        })
        .collect())
}

/// Score of the bridge marginal `N(tμ1, (1−t)² + t(1−t)σe² + t²σ1²)`.
pub fn sde_gauss_score(p: &SdeGaussParams, x: &[f64], t: f64) -> Result<Vec<f64>> {
    check_dim(p.dim(), x.len())?;
    check_unit_time(t)?;
    Ok((0..x.len())
        .map(|i| {
            let (mu1, s1) = (p.target.mean()[i], p.target.scale()[i]);
            (t * mu1 - x[i]) / sde_variance(s1, p.sigma_e, t)
        })
        .collect())
}

fn check_ot(mu: &[f64], sigma: &[f64], len: usize) -> Result<()> {
    check_dim(mu.len(), sigma.len())?;
    check_dim(mu.len(), len)?;
    if let Some(s) = sigma.iter().find(|s| !(**s > 0.0)) {
        return Err(Error::InvalidParameter(format!("diagonal scale must be positive, got {s}")));
    }
    Ok(())
}

/// Field of the degenerate optimal coupling `x1 = μ + σ⊙x0`:
/// `v_i = (μ_i + x_i(σ_i − 1)) / (1 + (σ_i − 1)t)`.
pub fn ot_diag_field(mu: &[f64], sigma: &[f64], x: &[f64], t: f64) -> Result<Vec<f64>> {
    check_ot(mu, sigma, x.len())?;
    check_unit_time(t)?;
    (0..x.len())
        .map(|i| {
            let den = 1.0 + (sigma[i] - 1.0) * t;
            if !(den > 0.0) {
                return Err(Error::SingularMap { t });
            }
            Ok((mu[i] + x[i] * (sigma[i] - 1.0)) / den)
        })
        .collect()
}

/// Straight-line trajectory `x(t) = μt + x0 − (1 − σ)t·x0`.
pub fn ot_diag_trajectory(mu: &[f64], sigma: &[f64], x0: &[f64], t: f64) -> Result<Vec<f64>> {
    check_ot(mu, sigma, x0.len())?;
    check_unit_time(t)?;
    Ok((0..x0.len()).map(|i| mu[i] * t + x0[i] - (1.0 - sigma[i]) * t * x0[i]).collect())
}
