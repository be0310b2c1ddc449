//! Source and target densities: diagonal Gaussians, Gaussian mixtures and
//! empirical sample sets.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::rng::{self, Rng};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Diagonal Gaussian with per-axis standard deviations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gaussian {
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl Gaussian {
    pub fn new(mean: Vec<f64>, scale: Vec<f64>) -> Result<Self> {
        check_dim(mean.len(), scale.len())?;
        if mean.is_empty() {
            return Err(Error::InvalidParameter("gaussian needs dimension >= 1".into()));
        }
        if let Some(s) = scale.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidParameter(format!("scale must be positive, got {s}")));
        }
        if mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::NonFinite("gaussian mean".into()));
        }
        Ok(Self { mean, scale })
    }

    pub fn standard(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], scale: vec![1.0; dim] }
    }

    /// Isotropic Gaussian `N(mean, scale^2 I)` in `dim` dimensions.
    pub fn isotropic(dim: usize, mean: f64, scale: f64) -> Result<Self> {
        Self::new(vec![mean; dim], vec![scale; dim])
    }

    pub fn scalar(mean: f64, scale: f64) -> Result<Self> {
        Self::new(vec![mean], vec![scale])
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn scale(&self) -> &[f64] {
        &self.scale
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.dim(), x.len())?;
        Ok(self.log_density_unchecked(x))
    }

    pub(crate) fn log_density_unchecked(&self, x: &[f64]) -> f64 {
        let mut acc = 0.0;
        for ((xi, m), s) in x.iter().zip(&self.mean).zip(&self.scale) {
            let z = (xi - m) / s;
            acc += -0.5 * z * z - s.ln() - 0.5 * LN_2PI;
        }
        acc
    }

    fn sample_into(&self, rng: &mut Rng, out: &mut [f64]) {
        for ((o, m), s) in out.iter_mut().zip(&self.mean).zip(&self.scale) {
            *o = m + s * rng::standard_normal(rng);
        }
    }

    /// True when this is `N(0, I)`.
    pub fn is_standard(&self) -> bool {
        self.mean.iter().all(|m| *m == 0.0) && self.scale.iter().all(|s| *s == 1.0)
    }
}

/// Finite mixture of diagonal Gaussians.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixture {
    components: Vec<(f64, Gaussian)>,
}

impl GaussianMixture {
    pub fn new(components: Vec<(f64, Gaussian)>) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| Error::InvalidParameter("mixture needs a component".into()))?;
        let dim = first.1.dim();
        let mut total = 0.0;
        for (w, g) in &components {
            check_dim(dim, g.dim())?;
            if !(*w > 0.0 && *w <= 1.0) {
                return Err(Error::InvalidParameter(format!("mixture weight {w} not in (0, 1]")));
            }
            total += w;
        }
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidParameter(format!("mixture weights sum to {total}")));
        }
        Ok(Self { components })
    }

    /// The symmetric pair `½N(-mu, sigma²) + ½N(mu, sigma²)` in one dimension.
    pub fn symmetric_pair(mu: f64, sigma: f64) -> Result<Self> {
        Self::new(vec![
            (0.5, Gaussian::scalar(-mu, sigma)?),
            (0.5, Gaussian::scalar(mu, sigma)?),
        ])
    }

    pub fn components(&self) -> &[(f64, Gaussian)] {
        &self.components
    }

    pub fn dim(&self) -> usize {
        self.components[0].1.dim()
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.dim(), x.len())?;
        Ok(self.log_density_unchecked(x))
    }

    pub(crate) fn log_density_unchecked(&self, x: &[f64]) -> f64 {
        log_sum_exp(self.components.iter().map(|(w, g)| w.ln() + g.log_density_unchecked(x)))
    }

    fn sample_into(&self, rng: &mut Rng, out: &mut [f64]) {
        let u = rng::uniform(rng);
        let mut acc = 0.0;
        let mut chosen = &self.components[self.components.len() - 1].1;
        for (w, g) in &self.components {
            acc += w;
            if u < acc {
                chosen = g;
                break;
            }
        }
        chosen.sample_into(rng, out);
    }
}

/// A density with exact log-density and sampler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Density {
    Gaussian(Gaussian),
    Mixture(GaussianMixture),
}

impl From<Gaussian> for Density {
    fn from(g: Gaussian) -> Self {
        Density::Gaussian(g)
    }
}

impl From<GaussianMixture> for Density {
    fn from(m: GaussianMixture) -> Self {
        Density::Mixture(m)
    }
}

impl Density {
    pub fn dim(&self) -> usize {
        match self {
            Density::Gaussian(g) => g.dim(),
            Density::Mixture(m) => m.dim(),
        }
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("log_density argument".into()));
        }
        match self {
            Density::Gaussian(g) => g.log_density(x),
            Density::Mixture(m) => m.log_density(x),
        }
    }

    pub(crate) fn log_density_unchecked(&self, x: &[f64]) -> f64 {
        match self {
            Density::Gaussian(g) => g.log_density_unchecked(x),
            Density::Mixture(m) => m.log_density_unchecked(x),
        }
    }

    /// Components as `(weight, gaussian)`; a plain Gaussian is one component.
    pub fn components(&self) -> Vec<(f64, &Gaussian)> {
        match self {
            Density::Gaussian(g) => vec![(1.0, g)],
            Density::Mixture(m) => m.components.iter().map(|(w, g)| (*w, g)).collect(),
        }
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        for (w, g) in self.components() {
            for (o, m) in out.iter_mut().zip(g.mean()) {
                *o += w * m;
            }
        }
        out
    }

    /// Per-axis variance (the diagonal of the covariance).
    pub fn variance(&self) -> Vec<f64> {
        let mean = self.mean();
        let mut out = vec![0.0; self.dim()];
        for (w, g) in self.components() {
            for i in 0..out.len() {
                let dm = g.mean()[i] - mean[i];
                out[i] += w * (g.scale()[i] * g.scale()[i] + dm * dm);
            }
        }
        out
    }

    /// Largest value of the density, available in closed form for a Gaussian.
    pub fn max_log_density(&self) -> Option<f64> {
        match self {
            Density::Gaussian(g) => Some(g.log_density_unchecked(g.mean())),
            Density::Mixture(_) => None,
        }
    }

    pub fn sample_point(&self, rng: &mut Rng, out: &mut [f64]) {
        match self {
            Density::Gaussian(g) => g.sample_into(rng, out),
            Density::Mixture(m) => m.sample_into(rng, out),
        }
    }

    /// Draws `n` points continuing the given generator.
    pub fn sample_with(&self, rng: &mut Rng, n: usize) -> Vec<f64> {
        let d = self.dim();
        let mut pts = vec![0.0; n * d];
        for row in pts.chunks_exact_mut(d) {
            self.sample_point(rng, row);
        }
        pts
    }

    /// `n` i.i.d. draws; the same seed reproduces the same set bit for bit.
    pub fn sample(&self, seed: u64, n: usize) -> Result<EmpiricalSet> {
        if n == 0 {
            return Err(Error::InvalidParameter("sample count must be >= 1".into()));
        }
        let mut rng = rng::seeded(seed);
        let pts = self.sample_with(&mut rng, n);
        EmpiricalSet::new(pts, self.dim(), format!("sample(seed={seed})"))
    }
}

pub(crate) fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Standard normal log-density of a point, `-½|x|² - (d/2) ln 2π`.
pub fn standard_normal_log_density(x: &[f64]) -> f64 {
    -0.5 * x.iter().map(|v| v * v).sum::<f64>() - 0.5 * x.len() as f64 * (2.0 * PI).ln()
}

/// A finite set of points stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalSet {
    points: Vec<f64>,
    dim: usize,
    origin: String,
}

impl EmpiricalSet {
    pub fn new(points: Vec<f64>, dim: usize, origin: impl Into<String>) -> Result<Self> {
        if dim == 0 || points.is_empty() || !points.len().is_multiple_of(dim) {
            return Err(Error::InvalidParameter(format!(
                "empirical set needs n >= 1 rows of dimension {dim}, got {} values",
                points.len()
            )));
        }
        if let Some(pos) = points.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("row {} of empirical set", pos / dim)));
        }
        Ok(Self { points, dim, origin: origin.into() })
    }

    pub fn from_rows(rows: &[Vec<f64>], origin: impl Into<String>) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        let mut points = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            check_dim(dim, r.len())?;
            points.extend_from_slice(r);
        }
        Self::new(points, dim, origin)
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn origin(&self) -> &str {
        &self.origin
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.points.chunks_exact(self.dim)
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.points
    }

    pub fn into_flat(self) -> Vec<f64> {
        self.points
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for r in self.rows() {
            for (a, b) in m.iter_mut().zip(r) {
                *a += b;
            }
        }
        let n = self.len() as f64;
        m.iter_mut().for_each(|v| *v /= n);
        m
    }

    /// Unbiased per-axis sample variance (zero for a single row).
    pub fn variance(&self) -> Vec<f64> {
        let m = self.mean();
        let n = self.len();
        if n < 2 {
            return vec![0.0; self.dim];
        }
        let mut v = vec![0.0; self.dim];
        for r in self.rows() {
            for i in 0..self.dim {
                let d = r[i] - m[i];
                v[i] += d * d;
            }
        }
        v.iter_mut().for_each(|x| *x /= (n - 1) as f64);
        v
    }

    /// `n` rows drawn uniformly with replacement.
    pub fn resample(&self, rng: &mut Rng, n: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(n * self.dim);
        for _ in 0..n {
            out.extend_from_slice(self.row(rng::index(rng, self.len())));
        }
        out
    }

    /// `n` distinct rows in their original order; the whole set when `n >= len`.
    pub fn subset(&self, n: usize, seed: u64) -> Self {
        if n >= self.len() {
            return self.clone();
        }
        let mut rng = rng::seeded(seed);
        let mut idx = rand::seq::index::sample(&mut rng, self.len(), n).into_vec();
        idx.sort_unstable();
        let points = idx.iter().flat_map(|&i| self.row(i).iter().copied()).collect();
        Self { points, dim: self.dim, origin: format!("{}[subset {n}]", self.origin) }
    }

    /// CSV with header `x0,x1,...` and 17 significant digits per value.
    pub fn to_csv_string(&self) -> String {
        let mut s = String::with_capacity(self.points.len() * 25);
        s.push_str(&csv_header("x", self.dim));
        s.push('\n');
        for r in self.rows() {
            push_csv_row(&mut s, r);
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_csv_string().as_bytes())?;
        Ok(())
    }
}

pub(crate) fn csv_header(prefix: &str, dim: usize) -> String {
    (0..dim).map(|i| format!("{prefix}{i}")).collect::<Vec<_>>().join(",")
}

/// Formats a float with 17 significant digits, enough to round-trip any f64.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub(crate) fn push_csv_row(s: &mut String, row: &[f64]) {
    for (i, v) in row.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        let _ = write!(s, "{v:.16e}");
    }
    s.push('\n');
}
