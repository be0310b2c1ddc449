//! Conditional flow maps `x = φ_t^{x1}(x0)`.
//!
//! Every implemented map is affine in both endpoints, so at a fixed time it is
//! described by a [`ConditionalGaussianPath`], `x = a·x0 + b·x1 + std·ε`, and its
//! conditional velocity at a point is affine as well, `w = c1·x1 + cx·x`. The
//! coefficients depend on `t` only; in particular the Jacobian of the inverse
//! map, `a^{-d}`, never depends on `x1`.
//!
//! Variant conventions:
//!
//! | variant | a(t) | b(t) | std(t) |
//! |---|---|---|---|
//! | `Linear` | 1 − t | t | 0 |
//! | `RegularizedLinear(σs)` | 1 − t + σs·t | t | 0 |
//! | `VarianceExploding(σ)` | σ(1 − t) | 1 | 0 |
//! | `VariancePreserving(α)` | √(1 − α(1 − t)²) | α(1 − t) | 0 |
//! | `BrownianBridge(σe)` | 1 − t | t | σe·√(t(1 − t)) |
//!
//! The Brownian bridge velocity is the bridge drift averaged over `x0` under a
//! standard normal source, so it is only defined for `ρ0 = N(0, I)`.

use std::f64::consts::PI;

use crate::densities::Density;
use crate::error::{check_dim, Error, Result};

/// Linear-map operations reject `t` at or beyond this bound.
pub const LINEAR_T_MAX: f64 = 1.0 - 1e-9;

const MIN_SCALE: f64 = 1e-12;

/// A noise schedule as a pair of value and derivative callables.
#[derive(Clone, Copy, Debug)]
pub enum Schedule {
    /// `s ↦ s`, the default variance-exploding schedule.
    Identity,
    /// `s ↦ cos(πs/2)`, the default variance-preserving schedule.
    Cosine,
    Custom { value: fn(f64) -> f64, derivative: fn(f64) -> f64 },
}

impl Schedule {
    pub fn value(&self, s: f64) -> f64 {
        match self {
            Schedule::Identity => s,
            Schedule::Cosine => (0.5 * PI * s).cos(),
            Schedule::Custom { value, .. } => value(s),
        }
    }

    pub fn derivative(&self, s: f64) -> f64 {
        match self {
            Schedule::Identity => 1.0,
            Schedule::Cosine => -0.5 * PI * (0.5 * PI * s).sin(),
            Schedule::Custom { derivative, .. } => derivative(s),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub enum ConditionalMap {
    Linear,
    RegularizedLinear { sigma_s: f64 },
    VarianceExploding(Schedule),
    VariancePreserving(Schedule),
    BrownianBridge { sigma_e: f64 },
}

/// `x = a·x0 + b·x1 + std·ε` at a fixed time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConditionalGaussianPath {
    pub a: f64,
    pub b: f64,
    pub std: f64,
}

/// A map frozen at one time, with every coefficient precomputed.
#[derive(Clone, Copy, Debug)]
pub struct MapAtTime {
    pub t: f64,
    pub path: ConditionalGaussianPath,
    /// Velocity coefficient on the target sample.
    pub c1: f64,
    /// Velocity coefficient on the current point.
    pub cx: f64,
    stochastic: bool,
}

impl ConditionalMap {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ConditionalMap::RegularizedLinear { sigma_s } if !(sigma_s > 0.0 && sigma_s.is_finite()) => {
                Err(Error::InvalidParameter(format!("sigma_s must be positive, got {sigma_s}")))
            }
            ConditionalMap::BrownianBridge { sigma_e } if !(sigma_e > 0.0 && sigma_e.is_finite()) => {
                Err(Error::InvalidParameter(format!("sigma_e must be positive, got {sigma_e}")))
            }
            _ => Ok(()),
        }
    }

    pub fn is_stochastic(&self) -> bool {
        matches!(self, ConditionalMap::BrownianBridge { .. })
    }

    pub fn name(&self) -> &'static str {
        match self {
            ConditionalMap::Linear => "linear",
            ConditionalMap::RegularizedLinear { .. } => "regularized_linear",
            ConditionalMap::VarianceExploding(_) => "variance_exploding",
            ConditionalMap::VariancePreserving(_) => "variance_preserving",
            ConditionalMap::BrownianBridge { .. } => "brownian_bridge",
        }
    }

    pub fn path(&self, t: f64) -> Result<ConditionalGaussianPath> {
        check_time(t)?;
        Ok(match *self {
            ConditionalMap::Linear => ConditionalGaussianPath { a: 1.0 - t, b: t, std: 0.0 },
            ConditionalMap::RegularizedLinear { sigma_s } => {
                ConditionalGaussianPath { a: 1.0 - t + sigma_s * t, b: t, std: 0.0 }
            }
            ConditionalMap::VarianceExploding(s) => {
                ConditionalGaussianPath { a: s.value(1.0 - t), b: 1.0, std: 0.0 }
            }
            ConditionalMap::VariancePreserving(s) => {
                let alpha = s.value(1.0 - t);
                ConditionalGaussianPath { a: (1.0 - alpha * alpha).max(0.0).sqrt(), b: alpha, std: 0.0 }
            }
            ConditionalMap::BrownianBridge { sigma_e } => ConditionalGaussianPath {
                a: 1.0 - t,
                b: t,
                std: sigma_e * (t * (1.0 - t)).max(0.0).sqrt(),
            },
        })
    }

    /// Freezes the map at `t`, failing where the velocity is singular.
    pub fn at(&self, t: f64) -> Result<MapAtTime> {
        let path = self.path(t)?;
        let (c1, cx) = match *self {
            ConditionalMap::Linear => {
                if t >= LINEAR_T_MAX {
                    return Err(Error::SingularMap { t });
                }
                let inv = 1.0 / (1.0 - t);
                (inv, -inv)
            }
            ConditionalMap::RegularizedLinear { sigma_s } => (1.0 / path.a, -(1.0 - sigma_s) / path.a),
            ConditionalMap::VarianceExploding(s) => {
                if path.a.abs() < MIN_SCALE {
                    return Err(Error::SingularMap { t });
                }
                let r = s.derivative(1.0 - t) / path.a;
                (r, -r)
            }
            ConditionalMap::VariancePreserving(s) => {
                let alpha = path.b;
                let denom = 1.0 - alpha * alpha;
                if denom < MIN_SCALE {
                    return Err(Error::SingularMap { t });
                }
                let d = s.derivative(1.0 - t);
                (-d / denom, d * alpha / denom)
            }
            ConditionalMap::BrownianBridge { sigma_e } => {
                if t >= LINEAR_T_MAX {
                    return Err(Error::SingularMap { t });
                }
                let se2 = sigma_e * sigma_e;
                let s2 = (1.0 - t) * (1.0 - t) + se2 * t * (1.0 - t);
                (((1.0 - t) + 0.5 * se2 * t) / s2, (-(1.0 - t) + 0.5 * se2 * (1.0 - 2.0 * t)) / s2)
            }
        };
        Ok(MapAtTime { t, path, c1, cx, stochastic: self.is_stochastic() })
    }

    pub fn forward(&self, t: f64, x0: &[f64], x1: &[f64], noise: Option<&[f64]>) -> Result<Vec<f64>> {
        check_dim(x0.len(), x1.len())?;
        let p = self.path(t)?;
        match (self.is_stochastic(), noise) {
            (true, Some(eps)) => {
                check_dim(x0.len(), eps.len())?;
                Ok((0..x0.len()).map(|i| p.a * x0[i] + p.b * x1[i] + p.std * eps[i]).collect())
            }
            (false, None) => Ok(x0.iter().zip(x1).map(|(u, v)| p.a * u + p.b * v).collect()),
            (true, None) => Err(Error::InvalidParameter("brownian bridge needs a noise vector".into())),
            (false, Some(_)) => Err(Error::InvalidParameter("deterministic map takes no noise".into())),
        }
    }

    /// Preimage `x0` of `x` under the deterministic map toward `x1`.
    pub fn inverse(&self, t: f64, x: &[f64], x1: &[f64]) -> Result<Vec<f64>> {
        check_dim(x.len(), x1.len())?;
        if self.is_stochastic() {
            return Err(Error::Unsupported("stochastic map has no inverse".into()));
        }
        if matches!(self, ConditionalMap::Linear) && t >= LINEAR_T_MAX {
            return Err(Error::SingularMap { t });
        }
        let p = self.path(t)?;
        if p.a.abs() < MIN_SCALE {
            return Err(Error::SingularMap { t });
        }
        Ok(x.iter().zip(x1).map(|(xi, yi)| (xi - p.b * yi) / p.a).collect())
    }

    /// Conditional velocity `w(t, x1, x)`.
    pub fn conditional_velocity(&self, t: f64, x1: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        check_dim(x.len(), x1.len())?;
        let m = self.at(t)?;
        let mut out = vec![0.0; x.len()];
        m.velocity_into(x1, x, &mut out);
        Ok(out)
    }

    /// Log importance weight of `x1` for the point `x`: `log ρ0(φ^{-1}(x))` for
    /// deterministic maps, the `x0`-marginal Gaussian log-density for the bridge.
    pub fn conditional_log_weight(&self, t: f64, x: &[f64], x1: &[f64], rho0: &Density) -> Result<f64> {
        check_dim(x.len(), x1.len())?;
        check_dim(rho0.dim(), x.len())?;
        let m = self.at(t)?;
        let mut scratch = vec![0.0; x.len()];
        let lw = m.log_weight(x, x1, rho0, &mut scratch)?;
        if !lw.is_finite() {
            return Err(Error::NonFinite("conditional log-weight".into()));
        }
        Ok(lw)
    }

    /// `log |det ∂φ^{-1}/∂x|`, a function of `t` only.
    pub fn inverse_log_det(&self, t: f64, dim: usize) -> Result<f64> {
        let p = self.path(t)?;
        Ok(-(dim as f64) * p.a.abs().ln())
    }
}

impl MapAtTime {
    #[inline]
    pub fn velocity_into(&self, x1: &[f64], x: &[f64], out: &mut [f64]) {
        // Same form as the weighted sum in the estimators, so a single-sample
        // bank reproduces this value exactly.
        for ((o, a), b) in out.iter_mut().zip(x1).zip(x) {
            *o = self.c1 * (a - b) + (self.c1 + self.cx) * b;
        }
    }

    /// Log-weight as in [`ConditionalMap::conditional_log_weight`]; `scratch`
    /// must have the data dimension. Additive constants that depend on `t`
    /// alone are dropped for the bridge.
    pub fn log_weight(&self, x: &[f64], x1: &[f64], rho0: &Density, scratch: &mut [f64]) -> Result<f64> {
        let ConditionalGaussianPath { a, b, std } = self.path;
        if self.stochastic {
            match rho0 {
                Density::Gaussian(g) if g.is_standard() => {}
                _ => {
                    return Err(Error::Unsupported(
                        "brownian bridge weights need a standard normal source".into(),
                    ))
                }
            }
            let var = a * a + std * std;
            let mut acc = 0.0;
            for (xi, yi) in x.iter().zip(x1) {
                let r = xi - b * yi;
                acc += r * r;
            }
            return Ok(-0.5 * acc / var - 0.5 * x.len() as f64 * (2.0 * PI * var).ln());
        }
        if a.abs() < MIN_SCALE {
            return Err(Error::SingularMap { t: self.t });
        }
        for ((s, xi), yi) in scratch.iter_mut().zip(x).zip(x1) {
            *s = (xi - b * yi) / a;
        }
        Ok(rho0.log_density_unchecked(scratch))
    }
}

fn check_time(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::TimeOutOfRange { t, range: "[0, 1]" });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::densities::{Gaussian, GaussianMixture};
    use crate::rng;
    use proptest::prelude::*;

    fn deterministic_maps() -> Vec<ConditionalMap> {
        vec![
            ConditionalMap::Linear,
            ConditionalMap::RegularizedLinear { sigma_s: 0.1 },
            ConditionalMap::VarianceExploding(Schedule::Identity),
            ConditionalMap::VariancePreserving(Schedule::Cosine),
        ]
    }

    #[test]
    fn linear_boundaries() {
        let m = ConditionalMap::Linear;
        let x0 = [1.0, -2.0];
        let x1 = [3.0, 0.5];
        assert_eq!(m.forward(0.0, &x0, &x1, None).unwrap(), x0.to_vec());
        assert_eq!(m.forward(1.0, &x0, &x1, None).unwrap(), x1.to_vec());
    }

    #[test]
    fn regularized_forward_at_one() {
        let m = ConditionalMap::RegularizedLinear { sigma_s: 0.1 };
        let x = m.forward(1.0, &[1.0], &[0.0], None).unwrap();
        assert!((x[0] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn bridge_forward_midpoint() {
        let m = ConditionalMap::BrownianBridge { sigma_e: 2.0 };
        let x = m.forward(0.5, &[0.0], &[0.0], Some(&[1.0])).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-15);
        // Pinned at both ends.
        assert_eq!(m.forward(0.0, &[0.3], &[2.0], Some(&[5.0])).unwrap(), vec![0.3]);
        assert_eq!(m.forward(1.0, &[0.3], &[2.0], Some(&[5.0])).unwrap(), vec![2.0]);
        assert!(m.forward(0.5, &[0.0], &[0.0], None).is_err());
    }

    #[test]
    fn time_out_of_range() {
        let m = ConditionalMap::Linear;
        assert!(matches!(m.forward(1.5, &[0.0], &[0.0], None), Err(Error::TimeOutOfRange { .. })));
        assert!(matches!(m.forward(-0.1, &[0.0], &[0.0], None), Err(Error::TimeOutOfRange { .. })));
    }

    #[test]
    fn inverse_examples() {
        let m = ConditionalMap::Linear;
        assert_eq!(m.inverse(0.0, &[1.7], &[3.0]).unwrap(), vec![1.7]);
        let v = m.inverse(0.25, &[1.0], &[2.0]).unwrap();
        assert!((v[0] - (1.0 - 0.5) / 0.75).abs() < 1e-15);
        assert!(matches!(m.inverse(1.0, &[1.0], &[2.0]), Err(Error::SingularMap { .. })));
        let r = ConditionalMap::RegularizedLinear { sigma_s: 0.1 };
        assert!(r.inverse(1.0, &[2.0], &[2.0]).unwrap()[0].abs() < 1e-15);
    }

    #[test]
    fn linear_velocity_examples() {
        let m = ConditionalMap::Linear;
        assert_eq!(m.conditional_velocity(0.5, &[2.0], &[0.0]).unwrap(), vec![4.0]);
        for t in [0.0, 0.3, 0.9] {
            assert_eq!(m.conditional_velocity(t, &[1.5], &[1.5]).unwrap(), vec![0.0]);
        }
        assert!(m.conditional_velocity(1.0, &[1.0], &[0.0]).is_err());
    }

    #[test]
    fn regularized_velocity_limit() {
        let lin = ConditionalMap::Linear;
        let reg = ConditionalMap::RegularizedLinear { sigma_s: 1e-8 };
        for t in [0.0, 0.2, 0.5, 0.8] {
            for x in [-2.0, 0.0, 3.0] {
                let a = lin.conditional_velocity(t, &[1.3], &[x]).unwrap()[0];
                let b = reg.conditional_velocity(t, &[1.3], &[x]).unwrap()[0];
                assert!((a - b).abs() < 1e-6, "t={t} x={x}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn log_weight_examples() {
        let rho0: Density = Gaussian::standard(1).into();
        let m = ConditionalMap::Linear;
        let lw = m.conditional_log_weight(0.0, &[0.0], &[4.0], &rho0).unwrap();
        assert!((lw + 0.5 * (2.0 * PI).ln()).abs() < 1e-15);
        let other = m.conditional_log_weight(0.0, &[0.0], &[-7.0], &rho0).unwrap();
        assert_eq!(lw, other);
    }

    #[test]
    fn log_weight_is_density_of_inverse() {
        let rho0: Density = GaussianMixture::symmetric_pair(1.0, 0.7).unwrap().into();
        let mut r = rng::seeded(5);
        for map in deterministic_maps() {
            for _ in 0..50 {
                let t = 0.95 * rng::uniform(&mut r);
                let x = [3.0 * rng::standard_normal(&mut r)];
                let x1 = [3.0 * rng::standard_normal(&mut r)];
                let lw = map.conditional_log_weight(t, &x, &x1, &rho0).unwrap();
                let direct = rho0.log_density(&map.inverse(t, &x, &x1).unwrap()).unwrap();
                assert!((lw - direct).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bridge_weights_need_standard_source() {
        let m = ConditionalMap::BrownianBridge { sigma_e: 1.0 };
        let rho0: Density = Gaussian::scalar(1.0, 1.0).unwrap().into();
        assert!(matches!(
            m.conditional_log_weight(0.5, &[0.0], &[0.0], &rho0),
            Err(Error::Unsupported(_))
        ));
        let std0: Density = Gaussian::standard(1).into();
        // N(x | t x1, (1-t)^2 + σe² t(1-t)) at t = 0.5, x = x1 = 0.
        let lw = m.conditional_log_weight(0.5, &[0.0], &[0.0], &std0).unwrap();
        assert!((lw + 0.5 * (2.0 * PI * 0.5).ln()).abs() < 1e-14);
    }

    #[test]
    fn inverse_jacobian_independent_of_target() {
        let h = 1e-6;
        for map in deterministic_maps() {
            for t in [0.1, 0.5, 0.9] {
                let jac = |x1: f64| {
                    let p = map.inverse(t, &[0.4 + h], &[x1]).unwrap()[0];
                    let m = map.inverse(t, &[0.4 - h], &[x1]).unwrap()[0];
                    (p - m) / (2.0 * h)
                };
                let j1 = jac(-3.0);
                let j2 = jac(5.0);
                assert!((j1 - j2).abs() < 1e-6 * j1.abs(), "{} t={t}", map.name());
                let ld = map.inverse_log_det(t, 1).unwrap();
                assert!((ld - j1.abs().ln()).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn velocity_matches_time_derivative_of_forward() {
        let h = 1e-5;
        let mut r = rng::seeded(9);
        for map in deterministic_maps() {
            for _ in 0..200 {
                let t = 0.05 + 0.85 * rng::uniform(&mut r);
                let x0 = [rng::standard_normal(&mut r), rng::standard_normal(&mut r)];
                let x1 = [2.0 * rng::standard_normal(&mut r), rng::standard_normal(&mut r)];
                let fp = map.forward(t + h, &x0, &x1, None).unwrap();
                let fm = map.forward(t - h, &x0, &x1, None).unwrap();
                let x = map.forward(t, &x0, &x1, None).unwrap();
                let w = map.conditional_velocity(t, &x1, &x).unwrap();
                for i in 0..2 {
                    let fd = (fp[i] - fm[i]) / (2.0 * h);
                    assert!((fd - w[i]).abs() < 1e-6 * (1.0 + w[i].abs()), "{}: {fd} vs {}", map.name(), w[i]);
                }
            }
        }
    }

    #[test]
    fn bridge_velocity_is_posterior_average_of_bridge_drift() {
        // Average the bridge drift over x0 | x, x1 by quadrature.
        let se = 1.3;
        let map = ConditionalMap::BrownianBridge { sigma_e: se };
        for &(t, x, x1) in &[(0.3, 0.7, 2.0), (0.6, -1.0, 0.5), (0.9, 2.2, 2.5)] {
            let var = se * se * t * (1.0 - t);
            let log_w = |x0: f64| {
                let m = (1.0 - t) * x0 + t * x1;
                -0.5 * x0 * x0 - 0.5 * (x - m) * (x - m) / var
            };
            let drift = |x0: f64| {
                (1.0 - 2.0 * t) / (2.0 * t * (1.0 - t)) * (x - (1.0 - t) * x0 - t * x1) + x1 - x0
            };
            let num = crate::quadrature::integrate(|u| drift(u) * log_w(u).exp(), -15.0, 15.0, 1e-13, 0.0)
                .unwrap()
                .value;
            let den = crate::quadrature::integrate(|u| log_w(u).exp(), -15.0, 15.0, 1e-13, 0.0).unwrap().value;
            let w = map.conditional_velocity(t, &[x1], &[x]).unwrap()[0];
            assert!((w - num / den).abs() < 1e-9, "t={t}: {w} vs {}", num / den);
        }
    }

    proptest! {
        #[test]
        fn forward_inverse_round_trip(
            t in 0.0f64..0.99,
            x0 in prop::collection::vec(-10.0f64..10.0, 3),
            x1 in prop::collection::vec(-10.0f64..10.0, 3),
            which in 0usize..4,
        ) {
            let map = deterministic_maps()[which];
            // VE at small t is close to the identity on x0; keep away from VP's singular end.
            let x = map.forward(t, &x0, &x1, None).unwrap();
            let back = map.inverse(t, &x, &x1).unwrap();
            let again = map.forward(t, &back, &x1, None).unwrap();
            for i in 0..3 {
                prop_assert!((again[i] - x[i]).abs() <= 1e-10 * (1.0 + x[i].abs()));
            }
        }
    }

    #[test]
    fn round_trip_ten_thousand_triples() {
        let mut r = rng::seeded(1);
        let mut worst: f64 = 0.0;
        for i in 0..10_000 {
            let map = deterministic_maps()[i % 4];
            let t = 0.99 * rng::uniform(&mut r);
            let x0 = [5.0 * rng::standard_normal(&mut r)];
            let x1 = [5.0 * rng::standard_normal(&mut r)];
            let x = map.forward(t, &x0, &x1, None).unwrap();
            let back = map.forward(t, &map.inverse(t, &x, &x1).unwrap(), &x1, None).unwrap();
            worst = worst.max((back[0] - x[0]).abs() / x[0].abs().max(1e-300));
        }
        assert!(worst <= 1e-10, "worst relative error {worst}");
    }
}
