//! Globally adaptive Gauss–Kronrod (7, 15) quadrature on finite intervals.

use crate::error::{Error, Result};

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_18,
    0.140_653_259_715_525_92,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_83,
];
// Gauss weights for the nodes XGK[1], XGK[3], XGK[5], XGK[7].
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

const MAX_INTERVALS: usize = 4000;

#[derive(Debug, Clone, Copy)]
pub struct Quadrature {
    pub value: f64,
    pub error: f64,
    pub intervals: usize,
}

#[derive(Clone, Copy)]
struct Piece {
    a: f64,
    b: f64,
    value: f64,
    error: f64,
}

fn gk15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> Piece {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut kronrod = WGK[7] * fc;
    let mut gauss = WG[3] * fc;
    for j in 0..7 {
        let dx = h * XGK[j];
        let s = f(c - dx) + f(c + dx);
        kronrod += WGK[j] * s;
        if j % 2 == 1 {
            gauss += WG[j / 2] * s;
        }
    }
    Piece { a, b, value: kronrod * h, error: ((kronrod - gauss) * h).abs() }
}

/// Integrates `f` over `[breaks[0], breaks[last]]`, starting from the given
/// subdivision, refining the worst interval until the estimated error is at
/// most `max(abs_tol, rel_tol * |value|)`.
///
/// A feature much narrower than its starting interval can fall between all
/// nodes and go unseen, so callers place breaks around peaks.
pub fn integrate_with_breaks<F: Fn(f64) -> f64>(
    f: F,
    breaks: &[f64],
    rel_tol: f64,
    abs_tol: f64,
) -> Result<Quadrature> {
    if breaks.len() < 2 {
        return Err(Error::Quadrature("need at least one interval".into()));
    }
    let mut pieces: Vec<Piece> = breaks
        .windows(2)
        .filter(|w| w[1] > w[0])
        .map(|w| gk15(&f, w[0], w[1]))
        .collect();
    if pieces.is_empty() {
        return Ok(Quadrature { value: 0.0, error: 0.0, intervals: 0 });
    }
    loop {
        let value: f64 = pieces.iter().map(|p| p.value).sum();
        let error: f64 = pieces.iter().map(|p| p.error).sum();
        if !value.is_finite() {
            return Err(Error::Quadrature("non-finite integrand".into()));
        }
        // Errors below the rounding floor cannot be refined further.
        let floor = 50.0 * f64::EPSILON * pieces.iter().map(|p| p.value.abs()).sum::<f64>();
        if error <= abs_tol.max(rel_tol * value.abs()).max(floor) {
            return Ok(Quadrature { value, error, intervals: pieces.len() });
        }
        if pieces.len() >= MAX_INTERVALS {
            return Err(Error::Quadrature(format!(
                "no convergence after {MAX_INTERVALS} intervals (error {error:e}, value {value:e})"
            )));
        }
        let (worst, _) = pieces
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.error.total_cmp(&b.1.error))
            .expect("non-empty");
        let p = pieces.swap_remove(worst);
        let mid = 0.5 * (p.a + p.b);
        pieces.push(gk15(&f, p.a, mid));
        pieces.push(gk15(&f, mid, p.b));
    }
}

pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, rel_tol: f64, abs_tol: f64) -> Result<Quadrature> {
    integrate_with_breaks(f, &[a, b], rel_tol, abs_tol)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomial_exact() {
        let q = integrate(|x| x * x * x - 2.0 * x, 0.0, 2.0, 1e-14, 0.0).unwrap();
        assert!((q.value - 0.0).abs() < 1e-13);
        let q = integrate(|x| x.powi(6), -1.0, 1.0, 1e-14, 0.0).unwrap();
        assert!((q.value - 2.0 / 7.0).abs() < 1e-14);
    }

    #[test]
    fn gaussian_mass() {
        let q = integrate(|x| (-0.5 * x * x).exp(), -12.0, 12.0, 1e-13, 0.0).unwrap();
        assert!((q.value - (2.0 * std::f64::consts::PI).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn narrow_peak_with_breaks() {
        let f = |x: f64| (-0.5 * ((x - 3.0) / 1e-3).powi(2)).exp();
        let q = integrate_with_breaks(f, &[-10.0, 2.99, 3.0, 3.01, 10.0], 1e-12, 0.0).unwrap();
        let exact = 1e-3 * (2.0 * std::f64::consts::PI).sqrt();
        assert!((q.value - exact).abs() / exact < 1e-10);
    }
}
