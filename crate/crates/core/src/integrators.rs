//! ODE and SDE integration of vector fields.

use rayon::prelude::*;

use crate::error::{check_dim, Error, Result};
use crate::rng;

/// A time-dependent vector field `v(x, t)`, written into `out`.
pub trait VectorField: Sync {
    fn eval(&self, x: &[f64], t: f64, out: &mut [f64]) -> Result<()>;
}

impl<F> VectorField for F
where
    F: Fn(&[f64], f64, &mut [f64]) -> Result<()> + Sync,
{
    fn eval(&self, x: &[f64], t: f64, out: &mut [f64]) -> Result<()> {
        self(x, t, out)
    }
}

/// Adapts a function returning a fresh vector.
pub struct FromFn<F>(pub F);

impl<F> VectorField for FromFn<F>
where
    F: Fn(&[f64], f64) -> Result<Vec<f64>> + Sync,
{
    fn eval(&self, x: &[f64], t: f64, out: &mut [f64]) -> Result<()> {
        let v = (self.0)(x, t)?;
        check_dim(out.len(), v.len())?;
        out.copy_from_slice(&v);
        Ok(())
    }
}

/// The zero field.
pub struct Zero;

impl VectorField for Zero {
    fn eval(&self, _x: &[f64], _t: f64, out: &mut [f64]) -> Result<()> {
        out.fill(0.0);
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Method {
    Euler { steps: usize },
    Rk4 { steps: usize },
    /// Dormand–Prince 5(4) with absolute and relative tolerance both `tol`.
    Adaptive { tol: f64 },
}

impl Method {
    fn validate(&self) -> Result<()> {
        match *self {
            Method::Euler { steps } | Method::Rk4 { steps } if steps == 0 => {
                Err(Error::InvalidParameter("step count must be >= 1".into()))
            }
            Method::Adaptive { tol } if !(tol > 0.0) => {
                Err(Error::InvalidParameter(format!("tolerance must be positive, got {tol}")))
            }
            _ => Ok(()),
        }
    }
}

/// Visited times and states (row-major, one row per time).
#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    pub times: Vec<f64>,
    pub states: Vec<f64>,
    pub dim: usize,
    /// Accepted steps; rejected adaptive trials are counted separately.
    pub accepted: usize,
    pub rejected: usize,
}

impl Path {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.dim..(i + 1) * self.dim]
    }

    pub fn terminal(&self) -> &[f64] {
        self.state(self.len() - 1)
    }

    /// CSV with header `t,x0,x1,...`.
    pub fn to_csv_string(&self) -> String {
        let mut s = format!("t,{}\n", crate::densities::csv_header("x", self.dim));
        for i in 0..self.len() {
            let mut row = vec![self.times[i]];
            row.extend_from_slice(self.state(i));
            crate::densities::push_csv_row(&mut s, &row);
        }
        s
    }
}

struct Recorder {
    keep: bool,
    times: Vec<f64>,
    states: Vec<f64>,
}

impl Recorder {
    fn push(&mut self, t: f64, x: &[f64]) {
        if self.keep {
            self.times.push(t);
            self.states.extend_from_slice(x);
        }
    }
}

fn check_finite(x: &[f64], t: f64) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Divergence { t })
    }
}

/// Integrates `dx/dt = v(x, t)` from `t_start` to `t_end` (either direction)
/// and returns the full path.
pub fn integrate_ode(
    field: &(impl VectorField + ?Sized),
    x0: &[f64],
    t_start: f64,
    t_end: f64,
    method: Method,
) -> Result<Path> {
    run(field, x0, t_start, t_end, method, true)
}

/// Like [`integrate_ode`] but keeps only the terminal state.
pub fn integrate_terminal(
    field: &(impl VectorField + ?Sized),
    x0: &[f64],
    t_start: f64,
    t_end: f64,
    method: Method,
) -> Result<Vec<f64>> {
    let p = run(field, x0, t_start, t_end, method, false)?;
    Ok(p.states)
}

/// Integrates every row of `starts` independently, in parallel; returns the
/// terminal rows in order. Errors carry the index of the first failing row.
pub fn integrate_many(
    field: &(impl VectorField + ?Sized),
    starts: &[f64],
    dim: usize,
    t_start: f64,
    t_end: f64,
    method: Method,
) -> std::result::Result<Vec<f64>, (usize, Error)> {
    let rows: Vec<std::result::Result<Vec<f64>, (usize, Error)>> = starts
        .par_chunks_exact(dim)
        .enumerate()
        .map(|(i, x0)| integrate_terminal(field, x0, t_start, t_end, method).map_err(|e| (i, e)))
        .collect();
    let mut out = Vec::with_capacity(starts.len());
    for r in rows {
        out.extend(r?);
    }
    Ok(out)
}

fn run(
    field: &(impl VectorField + ?Sized),
    x0: &[f64],
    t_start: f64,
    t_end: f64,
    method: Method,
    keep: bool,
) -> Result<Path> {
    method.validate()?;
    if t_start == t_end || !t_start.is_finite() || !t_end.is_finite() {
        return Err(Error::InvalidParameter("integration needs t_start != t_end".into()));
    }
    check_finite(x0, t_start)?;
    let dim = x0.len();
    let mut rec = Recorder { keep, times: Vec::new(), states: Vec::new() };
    rec.push(t_start, x0);
    let mut x = x0.to_vec();
    let (accepted, rejected) = match method {
        Method::Euler { steps } => {
            fixed_steps(field, &mut x, t_start, t_end, steps, &mut rec, euler_step)?;
            (steps, 0)
        }
        Method::Rk4 { steps } => {
            fixed_steps(field, &mut x, t_start, t_end, steps, &mut rec, rk4_step)?;
            (steps, 0)
        }
        Method::Adaptive { tol } => dormand_prince(field, &mut x, t_start, t_end, tol, &mut rec)?,
    };
    if !keep {
        rec.keep = true;
        rec.push(t_end, &x);
    }
    Ok(Path { times: rec.times, states: rec.states, dim, accepted, rejected })
}

struct Work {
    k: [Vec<f64>; 7],
    tmp: Vec<f64>,
}

impl Work {
    fn new(dim: usize) -> Self {
        Self { k: std::array::from_fn(|_| vec![0.0; dim]), tmp: vec![0.0; dim] }
    }
}

type Stepper<V> = fn(&V, &mut [f64], f64, f64, &mut Work) -> Result<()>;

fn fixed_steps<V: VectorField + ?Sized>(
    field: &V,
    x: &mut [f64],
    t_start: f64,
    t_end: f64,
    steps: usize,
    rec: &mut Recorder,
    step: Stepper<V>,
) -> Result<()> {
    let h = (t_end - t_start) / steps as f64;
    let mut w = Work::new(x.len());
    for i in 0..steps {
        let t = t_start + i as f64 * h;
        step(field, x, t, h, &mut w)?;
        let t_next = if i + 1 == steps { t_end } else { t_start + (i + 1) as f64 * h };
        check_finite(x, t_next)?;
        rec.push(t_next, x);
    }
    Ok(())
}

fn euler_step<V: VectorField + ?Sized>(field: &V, x: &mut [f64], t: f64, h: f64, w: &mut Work) -> Result<()> {
    field.eval(x, t, &mut w.k[0])?;
    for (xi, ki) in x.iter_mut().zip(&w.k[0]) {
        *xi += h * ki;
    }
    Ok(())
}

fn rk4_step<V: VectorField + ?Sized>(field: &V, x: &mut [f64], t: f64, h: f64, w: &mut Work) -> Result<()> {
    let Work { k, tmp } = w;
    let [k1, k2, k3, k4, ..] = k;
    field.eval(x, t, k1)?;
    axpy(tmp, x, 0.5 * h, k1);
    field.eval(tmp, t + 0.5 * h, k2)?;
    axpy(tmp, x, 0.5 * h, k2);
    field.eval(tmp, t + 0.5 * h, k3)?;
    axpy(tmp, x, h, k3);
    field.eval(tmp, t + h, k4)?;
    for i in 0..x.len() {
        x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    Ok(())
}

#[inline]
fn axpy(out: &mut [f64], x: &[f64], h: f64, k: &[f64]) {
    for ((o, a), b) in out.iter_mut().zip(x).zip(k) {
        *o = a + h * b;
    }
}

// Dormand–Prince 5(4) tableau.
const C: [f64; 7] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
// Fifth-order weights minus fourth-order weights.
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

const MAX_STEPS: usize = 1_000_000;

fn error_norm(err: &[f64], x: &[f64], x_new: &[f64], tol: f64) -> f64 {
    let s: f64 = (0..x.len())
        .map(|i| {
            let sc = tol + tol * x[i].abs().max(x_new[i].abs());
            (err[i] / sc).powi(2)
        })
        .sum();
    (s / x.len().max(1) as f64).sqrt()
}

fn dormand_prince<V: VectorField + ?Sized>(
    field: &V,
    x: &mut [f64],
    t_start: f64,
    t_end: f64,
    tol: f64,
    rec: &mut Recorder,
) -> Result<(usize, usize)> {
    let dim = x.len();
    let dir = (t_end - t_start).signum();
    let span = (t_end - t_start).abs();
    let mut w = Work::new(dim);
    let mut x_new = vec![0.0; dim];
    let mut err = vec![0.0; dim];
    let mut t = t_start;
    field.eval(x, t, &mut w.k[0])?;
    check_finite(&w.k[0], t)?;

    // Starting step from the size of the solution and its derivative.
    let d0 = error_norm(x, x, x, tol);
    let d1 = error_norm(&w.k[0], x, x, tol);
    let mut h = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    h = h.min(span);

    let (mut accepted, mut rejected) = (0, 0);
    while (t_end - t) * dir > 0.0 {
        if accepted + rejected >= MAX_STEPS {
            return Err(Error::Divergence { t });
        }
        let last = h >= (t_end - t).abs();
        if last {
            h = (t_end - t).abs();
        }
        let hs = dir * h;
        for s in 1..7 {
            for i in 0..dim {
                let mut acc = x[i];
                for (j, a) in A[s][..s].iter().enumerate() {
                    acc += hs * a * w.k[j][i];
                }
                w.tmp[i] = acc;
            }
            field.eval(&w.tmp, t + C[s] * hs, &mut w.k[s])?;
        }
        // Stage 7 is evaluated at the fifth-order solution itself.
        x_new.copy_from_slice(&w.tmp);
        for i in 0..dim {
            err[i] = hs * (0..7).map(|j| E[j] * w.k[j][i]).sum::<f64>();
        }
        let en = error_norm(&err, x, &x_new, tol);
        if !en.is_finite() {
            if h < 1e-14 * span.max(1.0) {
                return Err(Error::Divergence { t });
            }
            h *= 0.2;
            rejected += 1;
            continue;
        }
        if en <= 1.0 {
            t = if last { t_end } else { t + hs };
            x.copy_from_slice(&x_new);
            check_finite(x, t)?;
            w.k.swap(0, 6);
            accepted += 1;
            rec.push(t, x);
            let fac = if en == 0.0 { 5.0 } else { (0.9 * en.powf(-0.2)).clamp(0.2, 5.0) };
            h *= fac;
        } else {
            rejected += 1;
            h *= (0.9 * en.powf(-0.2)).clamp(0.2, 1.0);
            if h < 1e-14 * span.max(1.0) {
                return Err(Error::Divergence { t });
            }
        }
    }
    Ok((accepted, rejected))
}

/// Euler–Maruyama settings for `dx = (v + g²/2·s)dt + g dW`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SdeOptions {
    pub t_start: f64,
    pub t_end: f64,
    pub steps: usize,
    /// Field, score and `g` are evaluated at `t` clamped to `[ε, 1 − ε]`.
    pub clip: Option<f64>,
}

impl SdeOptions {
    /// Unit interval with the endpoint clip `ε = 1/(2·steps)`.
    pub fn unit(steps: usize) -> Self {
        Self { t_start: 0.0, t_end: 1.0, steps, clip: Some(0.5 / steps.max(1) as f64) }
    }
}

/// One Euler–Maruyama path; deterministic given `seed`.
pub fn integrate_sde(
    field: &(impl VectorField + ?Sized),
    score: &(impl VectorField + ?Sized),
    g: &(impl Fn(f64) -> f64 + Sync + ?Sized),
    x0: &[f64],
    opts: SdeOptions,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut r = rng::seeded(seed);
    sde_path(field, score, g, x0, opts, &mut r)
}

/// Many independent paths, one derived generator per row of `starts`.
pub fn integrate_sde_many(
    field: &(impl VectorField + ?Sized),
    score: &(impl VectorField + ?Sized),
    g: &(impl Fn(f64) -> f64 + Sync + ?Sized),
    starts: &[f64],
    dim: usize,
    opts: SdeOptions,
    seed: u64,
) -> Result<Vec<f64>> {
    let rows: Vec<Result<Vec<f64>>> = starts
        .par_chunks_exact(dim)
        .enumerate()
        .map(|(i, x0)| sde_path(field, score, g, x0, opts, &mut rng::derive(seed, i as u64)))
        .collect();
    let mut out = Vec::with_capacity(starts.len());
    for r in rows {
        out.extend(r?);
    }
    Ok(out)
}

fn sde_path(
    field: &(impl VectorField + ?Sized),
    score: &(impl VectorField + ?Sized),
    g: &(impl Fn(f64) -> f64 + Sync + ?Sized),
    x0: &[f64],
    opts: SdeOptions,
    r: &mut rng::Rng,
) -> Result<Vec<f64>> {
    if opts.steps == 0 {
        return Err(Error::InvalidParameter("step count must be >= 1".into()));
    }
    let dim = x0.len();
    let h = (opts.t_end - opts.t_start) / opts.steps as f64;
    let sqrt_h = h.abs().sqrt();
    let mut x = x0.to_vec();
    let mut v = vec![0.0; dim];
    let mut s = vec![0.0; dim];
    for i in 0..opts.steps {
        let mut t = opts.t_start + i as f64 * h;
        if let Some(eps) = opts.clip {
            t = t.clamp(eps, 1.0 - eps);
        }
        let gt = g(t);
        field.eval(&x, t, &mut v)?;
        if gt != 0.0 {
            score.eval(&x, t, &mut s)?;
            for j in 0..dim {
                x[j] += h * (v[j] + 0.5 * gt * gt * s[j]) + gt * sqrt_h * rng::standard_normal(r);
            }
        } else {
            for j in 0..dim {
                x[j] += h * v[j];
            }
        }
        check_finite(&x, t)?;
    }
    Ok(x)
}
