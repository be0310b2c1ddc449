//! CFM and ExFM training loops, the gradient-equality harness and run logs.
//!
//! One time draw per pair (`m = n`). Every step draws its minibatch and bank
//! from a generator derived from `(seed, step)`, so runs replay exactly and
//! a step does not depend on how many draws earlier steps made.
//!
//! The source is always `N(0, I)` in the data dimension.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::RngCore;
use rayon::prelude::*;
use serde::Serialize;

use crate::datasets;
use crate::densities::{Density, EmpiricalSet, Gaussian};
use crate::error::{Error, Result};
use crate::estimators::{rejection_target, sde_pair_targets, snis_batch, RejectionOptions, TargetBank};
use crate::flow_maps::ConditionalMap;
use crate::integrators::{integrate_many, integrate_sde_many, Method, SdeOptions};
use crate::metrics;
use crate::nn::{loss_and_grad, Activation, Batch, MlpField, MlpSpec, OptimConfig, TrainState};
use crate::rng::{self, Rng};

mod config;

/// Upper end of the time draw for maps that are singular at `t = 1`.
pub const T_MAX: f64 = 1.0 - 1e-6;
/// Time window for the bridge objective, whose targets blow up at both ends.
pub const SDE_T_EPS: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Cfm,
    Exfm,
    ExfmS,
}

impl Objective {
    pub fn name(self) -> &'static str {
        match self {
            Objective::Cfm => "cfm",
            Objective::Exfm => "exfm",
            Objective::ExfmS => "exfm_s",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimatorKind {
    Snis,
    Rejection,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataConfig {
    Toy { name: String, train_size: usize },
    Csv { path: PathBuf, standardize: bool },
    Gaussian { mean: Vec<f64>, scale: Vec<f64> },
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub objective: Objective,
    pub estimator: EstimatorKind,
    /// Target bank size `N`, including the minibatch's own `x1` rows.
    pub bank_size: usize,
    /// Source bank size for the bridge objective.
    pub source_bank_size: usize,
    pub map: ConditionalMap,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub optim: OptimConfig,
    pub data: DataConfig,
    /// Held-out target samples and generated samples per snapshot.
    pub eval_size: usize,
    pub steps: u64,
    /// Pairs per minibatch `n`.
    pub batch_size: usize,
    pub seed: u64,
    /// Snapshot period; 0 keeps only the initial and final snapshots.
    pub eval_every: u64,
    /// Points per side for the assignment-based W2.
    pub w2_size: usize,
    pub ode_tol: f64,
    pub sde_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: Objective::Exfm,
            estimator: EstimatorKind::Snis,
            bank_size: 128 * 64,
            source_bank_size: 256,
            map: ConditionalMap::Linear,
            hidden: vec![64, 64],
            activation: Activation::Relu,
            optim: OptimConfig::default(),
            data: DataConfig::Toy { name: "moons".into(), train_size: 20_000 },
            eval_size: 2000,
            steps: 3000,
            batch_size: 64,
            seed: 0,
            eval_every: 500,
            w2_size: 512,
            ode_tol: 1e-5,
            sde_steps: 200,
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        config::parse(text)
    }

    pub fn from_toml_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    /// Every violated constraint, as `section.key: message` strings.
    pub fn problems(&self) -> Vec<String> {
        let mut e = Vec::new();
        if self.batch_size == 0 {
            e.push("run.batch_size: must be >= 1".into());
        }
        if self.objective != Objective::Cfm && self.bank_size < self.batch_size {
            e.push(format!(
                "objective.bank_size: must be >= run.batch_size ({}) for {}",
                self.batch_size,
                self.objective.name()
            ));
        }
        if self.objective == Objective::ExfmS {
            if !matches!(self.map, ConditionalMap::BrownianBridge { .. }) {
                e.push("map.kind: exfm_s needs the bridge map".into());
            }
            if self.source_bank_size < self.batch_size {
                e.push(format!("objective.source_bank_size: must be >= run.batch_size ({})", self.batch_size));
            }
            if self.estimator != EstimatorKind::Snis {
                e.push("objective.estimator: exfm_s only supports snis".into());
            }
        }
        if let Err(err) = self.map.validate() {
            e.push(format!("map: {err}"));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            e.push("model.hidden: widths must be >= 1".into());
        }
        let o = &self.optim;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            e.push("model.lr: must be positive".into());
        }
        if !(0.0..1.0).contains(&o.beta1) {
            e.push("model.beta1: must be in [0, 1)".into());
        }
        if !(0.0..1.0).contains(&o.beta2) {
            e.push("model.beta2: must be in [0, 1)".into());
        }
        if !(o.eps > 0.0) {
            e.push("model.eps: must be positive".into());
        }
        if !(o.weight_decay >= 0.0) {
            e.push("model.weight_decay: must be >= 0".into());
        }
        if !(0.0..=1.0).contains(&o.ema_rate) {
            e.push("model.ema_rate: must be in [0, 1]".into());
        }
        match &self.data {
            DataConfig::Toy { name, train_size } => {
                if !datasets::TOY_NAMES.contains(&name.as_str()) {
                    e.push(format!("data.name: unknown toy dataset `{name}` ({})", datasets::TOY_NAMES.join(", ")));
                }
                if *train_size == 0 {
                    e.push("data.train_size: must be >= 1".into());
                }
            }
            DataConfig::Csv { path, .. } => {
                if !path.as_os_str().is_empty() && !path.is_file() {
                    e.push(format!("data.path: no such file `{}`", path.display()));
                }
            }
            DataConfig::Gaussian { mean, scale } => {
                if mean.is_empty() || mean.len() != scale.len() {
                    e.push("data.mean/data.scale: need equal, nonzero lengths".into());
                }
                if scale.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
                    e.push("data.scale: entries must be positive".into());
                }
            }
        }
        if self.eval_size < 2 {
            e.push("data.eval_size: must be >= 2".into());
        }
        if self.w2_size == 0 {
            e.push("run.w2_size: must be >= 1".into());
        }
        if !(self.ode_tol > 0.0) {
            e.push("run.ode_tol: must be positive".into());
        }
        if self.sde_steps == 0 {
            e.push("run.sde_steps: must be >= 1".into());
        }
        e
    }

    pub fn validate(&self) -> Result<()> {
        let e = self.problems();
        if e.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(e))
        }
    }

    pub fn time_range(&self) -> (f64, f64) {
        time_range(&self.map, self.objective)
    }
}

/// Interval `t` is drawn from uniformly.
pub fn time_range(map: &ConditionalMap, objective: Objective) -> (f64, f64) {
    match (objective, map) {
        (Objective::ExfmS, _) => (SDE_T_EPS, 1.0 - SDE_T_EPS),
        (_, ConditionalMap::RegularizedLinear { .. }) => (0.0, 1.0),
        _ => (0.0, T_MAX),
    }
}

/// Where target samples come from.
#[derive(Debug, Clone)]
pub enum TargetSampler {
    Density(Density),
    /// Rows resampled uniformly with replacement.
    Samples(EmpiricalSet),
}

impl TargetSampler {
    pub fn dim(&self) -> usize {
        match self {
            TargetSampler::Density(d) => d.dim(),
            TargetSampler::Samples(s) => s.dim(),
        }
    }

    pub fn draw(&self, r: &mut Rng, n: usize) -> Vec<f64> {
        match self {
            TargetSampler::Density(d) => d.sample_with(r, n),
            TargetSampler::Samples(s) => s.resample(r, n),
        }
    }
}

/// Source, target and conditional map of one training problem.
#[derive(Debug, Clone)]
pub struct Problem {
    pub source: Density,
    pub target: TargetSampler,
    pub map: ConditionalMap,
}

impl Problem {
    pub fn new(target: TargetSampler, map: ConditionalMap) -> Result<Self> {
        map.validate()?;
        Ok(Self { source: Gaussian::standard(target.dim()).into(), target, map })
    }

    pub fn dim(&self) -> usize {
        self.target.dim()
    }
}

/// Paired draws `(x0, x1, t)` and the points `x = φ_t(x0, x1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Minibatch {
    pub x0: Vec<f64>,
    pub x1: Vec<f64>,
    pub ts: Vec<f64>,
    pub xs: Vec<f64>,
    pub dim: usize,
}

impl Minibatch {
    pub fn len(&self) -> usize {
        self.ts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ts.is_empty()
    }

    fn row<'a>(&self, v: &'a [f64], i: usize) -> &'a [f64] {
        &v[i * self.dim..(i + 1) * self.dim]
    }
}

pub fn draw_minibatch(problem: &Problem, n: usize, t_range: (f64, f64), r: &mut Rng) -> Result<Minibatch> {
    let d = problem.dim();
    let x0 = problem.source.sample_with(r, n);
    let x1 = problem.target.draw(r, n);
    let ts: Vec<f64> = (0..n).map(|_| t_range.0 + (t_range.1 - t_range.0) * rng::uniform(r)).collect();
    let mut xs = Vec::with_capacity(n * d);
    let mut noise = vec![0.0; d];
    for i in 0..n {
        let (a, b) = (&x0[i * d..(i + 1) * d], &x1[i * d..(i + 1) * d]);
        let z = if problem.map.is_stochastic() {
            rng::fill_standard_normal(r, &mut noise);
            Some(noise.as_slice())
        } else {
            None
        };
        xs.extend(problem.map.forward(ts[i], a, b, z)?);
    }
    Ok(Minibatch { x0, x1, ts, xs, dim: d })
}

/// Conditional velocities at the paired samples (the CFM regression target).
pub fn cfm_targets(mb: &Minibatch, map: &ConditionalMap) -> Result<Vec<f64>> {
    let mut out = vec![0.0; mb.xs.len()];
    for i in 0..mb.len() {
        let m = map.at(mb.ts[i])?;
        m.velocity_into(mb.row(&mb.x1, i), mb.row(&mb.xs, i), &mut out[i * mb.dim..(i + 1) * mb.dim]);
    }
    Ok(out)
}

/// Bank of `bank_size` rows: the minibatch's `x1` followed by fresh draws.
pub fn form_bank(mb: &Minibatch, problem: &Problem, bank_size: usize, r: &mut Rng) -> Result<Vec<f64>> {
    let extra = bank_size.saturating_sub(mb.len());
    let mut rows = mb.x1.clone();
    rows.extend(problem.target.draw(r, extra));
    Ok(rows)
}

/// Estimated marginal field at every minibatch point.
pub fn exfm_targets(
    mb: &Minibatch,
    problem: &Problem,
    bank_rows: &[f64],
    estimator: EstimatorKind,
    r: &mut Rng,
) -> Result<Vec<f64>> {
    let d = mb.dim;
    match estimator {
        EstimatorKind::Snis => {
            let bank = TargetBank::new(bank_rows.to_vec(), d, false)?;
            snis_batch(&mb.xs, &mb.ts, &bank, &problem.map, &problem.source)
        }
        EstimatorKind::Rejection => {
            let seed = r.next_u64();
            let rows: Vec<Result<Vec<f64>>> = (0..mb.len())
                .into_par_iter()
                .map(|i| {
                    // Paired row first so it can be admitted unconditionally.
                    let mut rest = Vec::with_capacity(bank_rows.len() - d);
                    rest.extend_from_slice(&bank_rows[..i * d]);
                    rest.extend_from_slice(&bank_rows[(i + 1) * d..]);
                    let bank = TargetBank::with_paired(mb.row(bank_rows, i), &rest)?;
                    let opts = RejectionOptions::new(seed.wrapping_add(i as u64));
                    Ok(rejection_target(mb.row(&mb.xs, i), mb.ts[i], &bank, &problem.map, &problem.source, opts)?.value)
                })
                .collect();
            let mut out = Vec::with_capacity(mb.xs.len());
            for v in rows {
                out.extend(v?);
            }
            Ok(out)
        }
    }
}

/// Bridge field and score targets from a source bank and a target bank, each
/// seeded with the minibatch's own pairs.
pub fn sde_targets(
    mb: &Minibatch,
    problem: &Problem,
    source_bank_size: usize,
    bank_size: usize,
    sigma_e: f64,
    r: &mut Rng,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let d = mb.dim;
    let mut src = mb.x0.clone();
    src.extend(problem.source.sample_with(r, source_bank_size.saturating_sub(mb.len())));
    let tgt = form_bank(mb, problem, bank_size, r)?;
    let src = EmpiricalSet::new(src, d, "source bank")?;
    let tgt = EmpiricalSet::new(tgt, d, "target bank")?;
    let rows: Vec<Result<(Vec<f64>, Vec<f64>)>> = (0..mb.len())
        .into_par_iter()
        .map(|i| sde_pair_targets(mb.row(&mb.xs, i), mb.ts[i], &src, &tgt, sigma_e))
        .collect();
    let mut field = Vec::with_capacity(mb.xs.len());
    let mut score = Vec::with_capacity(mb.xs.len());
    for row in rows {
        let (f, s) = row?;
        field.extend(f);
        score.extend(s);
    }
    Ok((field, score))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepStats {
    pub loss: f64,
    pub grad_norm: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub score_loss: Option<f64>,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|g| g * g).sum::<f64>().sqrt()
}

fn apply(state: &mut TrainState, spec: &MlpSpec, mb: &Minibatch, targets: &[f64]) -> Result<(f64, f64)> {
    let step = state.step + 1;
    let batch = Batch { xs: &mb.xs, ts: &mb.ts, targets };
    let (loss, grad) = loss_and_grad(spec, &state.params, batch).map_err(|e| match e {
        Error::NonFinite(_) => Error::NonFiniteLoss { step },
        other => other,
    })?;
    let g = norm(&grad);
    state.optimizer_step(&grad).map_err(|e| match e {
        Error::NonFinite(_) => Error::NonFiniteLoss { step },
        other => other,
    })?;
    state.ema_update();
    Ok((loss, g))
}

/// One optimizer step against conditional velocities.
pub fn cfm_step(state: &mut TrainState, spec: &MlpSpec, problem: &Problem, cfg: &TrainConfig, r: &mut Rng) -> Result<StepStats> {
    let mb = draw_minibatch(problem, cfg.batch_size, cfg.time_range(), r)?;
    let targets = cfm_targets(&mb, &problem.map)?;
    let (loss, grad_norm) = apply(state, spec, &mb, &targets)?;
    Ok(StepStats { loss, grad_norm, score_loss: None })
}

/// One optimizer step against estimated marginal-field targets.
pub fn exfm_step(state: &mut TrainState, spec: &MlpSpec, problem: &Problem, cfg: &TrainConfig, r: &mut Rng) -> Result<StepStats> {
    let mb = draw_minibatch(problem, cfg.batch_size, cfg.time_range(), r)?;
    let bank = form_bank(&mb, problem, cfg.bank_size, r)?;
    let targets = exfm_targets(&mb, problem, &bank, cfg.estimator, r)?;
    let (loss, grad_norm) = apply(state, spec, &mb, &targets)?;
    Ok(StepStats { loss, grad_norm, score_loss: None })
}

/// Joint step on the field and score networks (`λ(t) ≡ 1`).
pub fn exfm_s_step(
    field: &mut TrainState,
    score: &mut TrainState,
    spec: &MlpSpec,
    problem: &Problem,
    cfg: &TrainConfig,
    r: &mut Rng,
) -> Result<StepStats> {
    let ConditionalMap::BrownianBridge { sigma_e } = problem.map else {
        return Err(Error::Unsupported("exfm_s needs the bridge map".into()));
    };
    let mb = draw_minibatch(problem, cfg.batch_size, cfg.time_range(), r)?;
    let (ft, st) = sde_targets(&mb, problem, cfg.source_bank_size, cfg.bank_size, sigma_e, r)?;
    let (loss, g1) = apply(field, spec, &mb, &ft)?;
    let (score_loss, g2) = apply(score, spec, &mb, &st)?;
    Ok(StepStats { loss, grad_norm: (g1 * g1 + g2 * g2).sqrt(), score_loss: Some(score_loss) })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub trials: usize,
    pub batch_size: usize,
    pub bank_size: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub trials: usize,
    pub mean_cfm: Vec<f64>,
    pub mean_exfm: Vec<f64>,
    pub mean_diff: Vec<f64>,
    /// Standard error of the mean paired difference, per coordinate.
    pub se_diff: Vec<f64>,
    /// `sqrt(se_cfm² + se_exfm²)`, the unpaired pooled error.
    pub se_pooled: Vec<f64>,
    /// Share of coordinates with `|mean_diff| ≤ 3·se_diff`.
    pub fraction_within: f64,
    pub pass: bool,
}

const GRAD_BLOCK: usize = 256;

/// Averages CFM and ExFM minibatch gradients of a frozen network over
/// independent minibatches. Both losses see the same minibatch in each trial.
pub fn gradient_equality_check(
    spec: &MlpSpec,
    params: &[f64],
    problem: &Problem,
    opts: GradCheckOptions,
) -> Result<GradCheckReport> {
    if opts.trials < 2 || opts.batch_size == 0 || opts.bank_size < opts.batch_size {
        return Err(Error::InvalidParameter("need trials >= 2 and bank_size >= batch_size >= 1".into()));
    }
    let p = params.len();
    let range = time_range(&problem.map, Objective::Exfm);
    let blocks: Vec<usize> = (0..opts.trials).step_by(GRAD_BLOCK).collect();
    // Per block: sums of g_cfm, g_cfm², g_exfm, g_exfm², diff, diff².
    let partial: Vec<Result<Vec<f64>>> = blocks
        .par_iter()
        .map(|&start| {
            let mut acc = vec![0.0; 6 * p];
            for trial in start..(start + GRAD_BLOCK).min(opts.trials) {
                let mut r = rng::derive(opts.seed, trial as u64);
                let mb = draw_minibatch(problem, opts.batch_size, range, &mut r)?;
                let bank = form_bank(&mb, problem, opts.bank_size, &mut r)?;
                let tc = cfm_targets(&mb, &problem.map)?;
                let te = exfm_targets(&mb, problem, &bank, EstimatorKind::Snis, &mut r)?;
                let (_, gc) = loss_and_grad(spec, params, Batch { xs: &mb.xs, ts: &mb.ts, targets: &tc })?;
                let (_, ge) = loss_and_grad(spec, params, Batch { xs: &mb.xs, ts: &mb.ts, targets: &te })?;
                for j in 0..p {
                    let dj = ge[j] - gc[j];
                    acc[j] += gc[j];
                    acc[p + j] += gc[j] * gc[j];
                    acc[2 * p + j] += ge[j];
                    acc[3 * p + j] += ge[j] * ge[j];
                    acc[4 * p + j] += dj;
                    acc[5 * p + j] += dj * dj;
                }
            }
            Ok(acc)
        })
        .collect();
    let mut tot = vec![0.0; 6 * p];
    for b in partial {
        for (a, v) in tot.iter_mut().zip(b?) {
            *a += v;
        }
    }
    let n = opts.trials as f64;
    let stats = |k: usize| -> (Vec<f64>, Vec<f64>) {
        let mean: Vec<f64> = (0..p).map(|j| tot[2 * k * p + j] / n).collect();
        let se = (0..p)
            .map(|j| {
                let var = (tot[(2 * k + 1) * p + j] - n * mean[j] * mean[j]) / (n - 1.0);
                (var.max(0.0) / n).sqrt()
            })
            .collect();
        (mean, se)
    };
    let (mean_cfm, se_c) = stats(0);
    let (mean_exfm, se_e) = stats(1);
    let (mean_diff, se_diff) = stats(2);
    let se_pooled: Vec<f64> = se_c.iter().zip(&se_e).map(|(a, b)| (a * a + b * b).sqrt()).collect();
    let within = mean_diff.iter().zip(&se_diff).filter(|(m, s)| m.abs() <= 3.0 * **s).count();
    let fraction_within = within as f64 / p as f64;
    Ok(GradCheckReport {
        trials: opts.trials,
        mean_cfm,
        mean_exfm,
        mean_diff,
        se_diff,
        se_pooled,
        fraction_within,
        pass: fraction_within >= 0.99,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Snapshot {
    pub energy_distance: f64,
    pub w2: f64,
}

/// One line of the run log. `loss` and `grad_norm` are absent on the
/// initial snapshot line.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunRecord {
    pub step: u64,
    pub loss: Option<f64>,
    pub grad_norm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub score_loss: Option<f64>,
    pub metrics: Option<Snapshot>,
}

impl RunRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub objective: Objective,
    pub map: &'static str,
    pub dataset: String,
    pub steps: u64,
    pub seed: u64,
    pub num_params: usize,
    pub mean_loss: Option<f64>,
    /// Mean loss over the last quarter of the steps.
    pub tail_mean_loss: Option<f64>,
    pub initial_energy_distance: f64,
    pub final_energy_distance: f64,
    pub final_w2: f64,
    /// Reverse-ODE score of the held-out set; absent for the bridge objective.
    pub final_nll: Option<f64>,
    pub wall_time_s: f64,
}

/// Training state and data of one run.
pub struct Trainer {
    pub config: TrainConfig,
    pub spec: MlpSpec,
    pub problem: Problem,
    pub eval: EmpiricalSet,
    pub field: TrainState,
    pub score: Option<TrainState>,
    pub losses: Vec<f64>,
}

const EVAL_STREAM: u64 = 1 << 40;
const DATA_STREAM: u64 = 1 << 41;

fn prepare_data(cfg: &TrainConfig) -> Result<(TargetSampler, EmpiricalSet, String)> {
    let mut r = rng::derive(cfg.seed, DATA_STREAM);
    let eval_seed = r.next_u64();
    match &cfg.data {
        DataConfig::Toy { name, train_size } => {
            let train = datasets::make_toy(name, *train_size, r.next_u64())?;
            let eval = datasets::make_toy(name, cfg.eval_size, eval_seed)?;
            Ok((TargetSampler::Samples(train), eval, name.clone()))
        }
        DataConfig::Csv { path, standardize } => {
            let all = datasets::load_csv(path, *standardize)?;
            if all.len() < cfg.eval_size + 1 {
                return Err(Error::Config(vec![format!(
                    "data.eval_size: {} rows requested but `{}` has only {}",
                    cfg.eval_size,
                    path.display(),
                    all.len()
                )]));
            }
            let mut idx: Vec<usize> = (0..all.len()).collect();
            rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), &mut r);
            let take = |ix: &[usize]| {
                let flat = ix.iter().flat_map(|i| all.row(*i).iter().copied()).collect();
                EmpiricalSet::new(flat, all.dim(), all.origin())
            };
            let eval = take(&idx[..cfg.eval_size])?;
            let train = take(&idx[cfg.eval_size..])?;
            Ok((TargetSampler::Samples(train), eval, path.display().to_string()))
        }
        DataConfig::Gaussian { mean, scale } => {
            let g: Density = Gaussian::new(mean.clone(), scale.clone())?.into();
            let eval = g.sample(eval_seed, cfg.eval_size)?;
            Ok((TargetSampler::Density(g), eval, "gaussian".into()))
        }
    }
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let (target, eval, _) = prepare_data(&config)?;
        let problem = Problem::new(target, config.map)?;
        let spec = MlpSpec::new(problem.dim(), config.hidden.clone(), config.activation)?;
        let field = TrainState::new(spec.init(config.seed), config.optim, config.seed);
        let score = (config.objective == Objective::ExfmS).then(|| {
            let s = config.seed.wrapping_add(1);
            TrainState::new(spec.init(s), config.optim, s)
        });
        Ok(Self { config, spec, problem, eval, field, score, losses: Vec::new() })
    }

    pub fn dataset_name(&self) -> String {
        match &self.config.data {
            DataConfig::Toy { name, .. } => name.clone(),
            DataConfig::Csv { path, .. } => path.display().to_string(),
            DataConfig::Gaussian { .. } => "gaussian".into(),
        }
    }

    /// Runs the next optimizer step.
    pub fn step(&mut self) -> Result<StepStats> {
        let mut r = rng::derive(self.config.seed, self.field.step);
        let cfg = &self.config;
        let s = match cfg.objective {
            Objective::Cfm => cfm_step(&mut self.field, &self.spec, &self.problem, cfg, &mut r)?,
            Objective::Exfm => exfm_step(&mut self.field, &self.spec, &self.problem, cfg, &mut r)?,
            Objective::ExfmS => {
                let score = self.score.as_mut().expect("score model exists for exfm_s");
                exfm_s_step(&mut self.field, score, &self.spec, &self.problem, cfg, &mut r)?
            }
        };
        self.losses.push(s.loss);
        Ok(s)
    }

    /// Generates `n` samples with the EMA weights.
    pub fn sample(&self, n: usize, seed: u64) -> Result<EmpiricalSet> {
        let d = self.problem.dim();
        let starts = self.problem.source.sample(seed, n)?.into_flat();
        let field = MlpField { spec: &self.spec, params: &self.field.shadow };
        let out = match (&self.score, self.config.map) {
            (Some(score), ConditionalMap::BrownianBridge { sigma_e }) => {
                let score = MlpField { spec: &self.spec, params: &score.shadow };
                let g = move |t: f64| sigma_e * (t * (1.0 - t)).max(0.0).sqrt();
                integrate_sde_many(&field, &score, &g, &starts, d, SdeOptions::unit(self.config.sde_steps), seed)?
            }
            _ => integrate_many(&field, &starts, d, 0.0, 1.0, Method::Adaptive { tol: self.config.ode_tol })
                .map_err(|(index, e)| match e {
                    Error::Divergence { t } => Error::SampleDivergence { index, t },
                    other => other,
                })?,
        };
        EmpiricalSet::new(out, d, "generated")
    }

    /// Energy distance and W2 between generated and held-out samples.
    pub fn snapshot(&self) -> Result<Snapshot> {
        let seed = rng::derive(self.config.seed, EVAL_STREAM).next_u64();
        let gen = self.sample(self.eval.len(), seed)?;
        let energy_distance = metrics::energy_distance(&gen, &self.eval)?;
        let w2 = metrics::wasserstein2_subsampled(&gen, &self.eval, self.config.w2_size, seed)?;
        Ok(Snapshot { energy_distance, w2 })
    }

    /// Trains for the configured number of steps, handing every record to
    /// `sink` as it is produced.
    pub fn run(&mut self, mut sink: impl FnMut(&RunRecord) -> Result<()>) -> Result<Summary> {
        let start = Instant::now();
        let first = self.snapshot()?;
        sink(&RunRecord { step: 0, loss: None, grad_norm: None, score_loss: None, metrics: Some(first) })?;
        let mut last = first;
        let total = self.config.steps;
        for k in 1..=total {
            let s = self.step()?;
            let due = k == total || (self.config.eval_every > 0 && k % self.config.eval_every == 0);
            let metrics = if due {
                last = self.snapshot()?;
                Some(last)
            } else {
                None
            };
            sink(&RunRecord {
                step: k,
                loss: Some(s.loss),
                grad_norm: Some(s.grad_norm),
                score_loss: s.score_loss,
                metrics,
            })?;
        }
        let final_nll = match self.config.objective {
            Objective::ExfmS => None,
            _ => {
                let field = MlpField { spec: &self.spec, params: &self.field.shadow };
                Some(metrics::nll(&field, &self.eval, self.config.ode_tol)?)
            }
        };
        Ok(Summary {
            objective: self.config.objective,
            map: self.config.map.name(),
            dataset: self.dataset_name(),
            steps: total,
            seed: self.config.seed,
            num_params: self.spec.num_params(),
            mean_loss: mean(&self.losses),
            tail_mean_loss: mean(&self.losses[self.losses.len() - self.losses.len() / 4..]),
            initial_energy_distance: first.energy_distance,
            final_energy_distance: last.energy_distance,
            final_w2: last.w2,
            final_nll,
            wall_time_s: start.elapsed().as_secs_f64(),
        })
    }
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Builds a trainer and runs it to completion.
pub fn run_experiment(config: TrainConfig, sink: impl FnMut(&RunRecord) -> Result<()>) -> Result<(Summary, Trainer)> {
    let mut t = Trainer::new(config)?;
    let s = t.run(sink)?;
    Ok((s, t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exact_fields::{gauss_to_gauss_field, GaussPairParams};
    use crate::quadrature;

    fn gauss_problem() -> Problem {
        let target = TargetSampler::Density(Gaussian::scalar(2.0, 3.0).unwrap().into());
        Problem::new(target, ConditionalMap::Linear).unwrap()
    }

    fn exact_mse(mb: &Minibatch, targets: &[f64]) -> f64 {
        let p = GaussPairParams::scalar(0.0, 1.0, 2.0, 3.0).unwrap();
        let mut s = 0.0;
        for i in 0..mb.len() {
            let v = gauss_to_gauss_field(&p, &mb.xs[i..i + 1], mb.ts[i]).unwrap()[0];
            s += (v - targets[i]).powi(2);
        }
        s / mb.len() as f64
    }

    #[test]
    fn cfm_loss_of_exact_model_is_conditional_variance() {
        // Var(x1 − x0 | x_t) for N(0,1) → N(2, 9), averaged over t ∈ [0, 1).
        let (s2, t_hi) = (9.0, T_MAX);
        let cond = |t: f64| {
            let c = t * s2 - (1.0 - t);
            s2 + 1.0 - c * c / ((1.0 - t).powi(2) + t * t * s2)
        };
        let expect = quadrature::integrate(cond, 0.0, t_hi, 1e-12, 1e-12).unwrap().value / t_hi;
        let prob = gauss_problem();
        let mut r = rng::seeded(3);
        let mb = draw_minibatch(&prob, 200_000, (0.0, t_hi), &mut r).unwrap();
        let loss = exact_mse(&mb, &cfm_targets(&mb, &prob.map).unwrap());
        assert!(expect > 0.5);
        assert!((loss - expect).abs() < 0.02 * expect, "{loss} vs {expect}");
    }

    #[test]
    fn exfm_loss_of_exact_model_is_small() {
        let prob = gauss_problem();
        let mut r = rng::seeded(4);
        let mb = draw_minibatch(&prob, 256, (0.0, T_MAX), &mut r).unwrap();
        let bank = form_bank(&mb, &prob, 10_000, &mut r).unwrap();
        let te = exfm_targets(&mb, &prob, &bank, EstimatorKind::Snis, &mut r).unwrap();
        let exfm = exact_mse(&mb, &te);
        let cfm = exact_mse(&mb, &cfm_targets(&mb, &prob.map).unwrap());
        assert!(exfm <= 1e-2, "{exfm}");
        assert!(cfm > 1.0, "{cfm}");
    }

    #[test]
    fn t_zero_targets_are_bank_mean_minus_x() {
        let prob = gauss_problem();
        let mut r = rng::seeded(5);
        let mb = draw_minibatch(&prob, 16, (0.0, 0.0), &mut r).unwrap();
        let bank = form_bank(&mb, &prob, 300, &mut r).unwrap();
        let te = exfm_targets(&mb, &prob, &bank, EstimatorKind::Snis, &mut r).unwrap();
        let mean = bank.iter().sum::<f64>() / bank.len() as f64;
        for i in 0..16 {
            assert!((te[i] - (mean - mb.xs[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn single_pair_exfm_equals_cfm_exactly() {
        let prob = gauss_problem();
        let mut r = rng::seeded(6);
        let mb = draw_minibatch(&prob, 1, (0.0, T_MAX), &mut r).unwrap();
        let bank = form_bank(&mb, &prob, 1, &mut r).unwrap();
        assert_eq!(
            exfm_targets(&mb, &prob, &bank, EstimatorKind::Snis, &mut r).unwrap(),
            cfm_targets(&mb, &prob.map).unwrap()
        );

        let mut cfg = TrainConfig { batch_size: 1, bank_size: 1, ..TrainConfig::default() };
        let spec = MlpSpec::new(1, vec![8], Activation::Relu).unwrap();
        let mut a = TrainState::new(spec.init(1), cfg.optim, 1);
        let mut b = a.clone();
        cfg.objective = Objective::Cfm;
        let sa = cfm_step(&mut a, &spec, &prob, &cfg, &mut rng::seeded(9)).unwrap();
        let sb = exfm_step(&mut b, &spec, &prob, &cfg, &mut rng::seeded(9)).unwrap();
        assert_eq!(sa, sb);
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn gradient_check_small_run_is_consistent() {
        let prob = gauss_problem();
        let spec = MlpSpec::new(1, vec![8], Activation::Relu).unwrap();
        let params = spec.init(2);
        let opts = GradCheckOptions { trials: 4000, batch_size: 8, bank_size: 64, seed: 1 };
        let rep = gradient_equality_check(&spec, &params, &prob, opts).unwrap();
        assert!(rep.fraction_within >= 0.9, "{}", rep.fraction_within);
        // Sharing the minibatch makes the paired error the tighter one.
        let tighter = rep.se_diff.iter().zip(&rep.se_pooled).filter(|(a, b)| a <= b).count();
        assert!(tighter as f64 >= 0.9 * params.len() as f64);

        let same = GradCheckOptions { bank_size: 8, batch_size: 8, ..opts };
        let one = GradCheckOptions { batch_size: 1, bank_size: 1, trials: 50, seed: 3 };
        let rep1 = gradient_equality_check(&spec, &params, &prob, one).unwrap();
        assert!(rep1.mean_diff.iter().all(|d| *d == 0.0));
        assert!(gradient_equality_check(&spec, &params, &prob, GradCheckOptions { trials: 1, ..same }).is_err());
    }

    #[test]
    fn gradient_difference_is_linear_in_targets() {
        // Both losses share the network Jacobian, so their gradients differ by
        // a term linear in the targets alone.
        let prob = gauss_problem();
        let spec = MlpSpec::new(1, vec![4], Activation::Relu).unwrap();
        let params = spec.init(3);
        let mut r = rng::seeded(10);
        let mb = draw_minibatch(&prob, 32, (0.0, T_MAX), &mut r).unwrap();
        let bank = form_bank(&mb, &prob, 128, &mut r).unwrap();
        let tc = cfm_targets(&mb, &prob.map).unwrap();
        let te = exfm_targets(&mb, &prob, &bank, EstimatorKind::Snis, &mut r).unwrap();
        let g = |t: &[f64]| loss_and_grad(&spec, &params, Batch { xs: &mb.xs, ts: &mb.ts, targets: t }).unwrap().1;
        let (gc, ge) = (g(&tc), g(&te));
        let scaled = |t: &[f64]| t.iter().map(|v| 2.0 * v).collect::<Vec<_>>();
        let (gc2, ge2) = (g(&scaled(&tc)), g(&scaled(&te)));
        for j in 0..gc.len() {
            // g(2y) − g(y) = −(2/n)·Jᵀy, so g_c − g_e = (g_c(2y) − g_c) − (g_e(2y) − g_e).
            let dc = gc2[j] - gc[j];
            let de = ge2[j] - ge[j];
            assert!(((gc[j] - ge[j]) - (dc - de)).abs() < 1e-9 * (1.0 + gc[j].abs()));
        }
    }

    fn small_config(objective: Objective) -> TrainConfig {
        TrainConfig {
            objective,
            bank_size: 256,
            map: if objective == Objective::ExfmS {
                ConditionalMap::BrownianBridge { sigma_e: 1.0 }
            } else {
                ConditionalMap::Linear
            },
            hidden: vec![16],
            data: DataConfig::Toy { name: "moons".into(), train_size: 2000 },
            eval_size: 200,
            steps: 20,
            batch_size: 16,
            source_bank_size: 64,
            eval_every: 10,
            w2_size: 100,
            sde_steps: 50,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn replay_is_deterministic_for_every_objective() {
        for obj in [Objective::Cfm, Objective::Exfm, Objective::ExfmS] {
            let run = || {
                let mut lines = Vec::new();
                run_experiment(small_config(obj), |r| {
                    lines.push(r.to_json_line());
                    Ok(())
                })
                .unwrap();
                lines
            };
            let a = run();
            assert_eq!(a.len(), 21);
            assert_eq!(a, run(), "{obj:?}");
        }
    }

    #[test]
    fn zero_steps_gives_only_initial_snapshot() {
        let mut lines = Vec::new();
        let (s, _) = run_experiment(TrainConfig { steps: 0, ..small_config(Objective::Exfm) }, |r| {
            lines.push(r.clone());
            Ok(())
        })
        .unwrap();
        assert_eq!(lines.len(), 1);
        assert_eq!(lines[0].step, 0);
        assert!(lines[0].loss.is_none() && lines[0].metrics.is_some());
        assert!(s.mean_loss.is_none());
        let j = lines[0].to_json_line();
        assert!(j.starts_with("{\"step\":0,\"loss\":null,\"grad_norm\":null,\"metrics\":{"), "{j}");
    }

    #[test]
    fn rejection_estimator_trains() {
        let cfg = TrainConfig { estimator: EstimatorKind::Rejection, ..small_config(Objective::Exfm) };
        let (s, _) = run_experiment(cfg, |_| Ok(())).unwrap();
        assert!(s.mean_loss.unwrap().is_finite());
    }

    #[test]
    fn config_defaults_and_full_error_list() {
        let c = TrainConfig::from_toml_str("").unwrap();
        assert_eq!(c.objective, Objective::Exfm);
        assert_eq!(c.bank_size, 128 * c.batch_size);
        let text = r#"
            [objective]
            kind = "exfm"
            bank_size = 4
            colour = 1
            [map]
            kind = "warp"
            [model]
            hidden = [0]
            lr = "fast"
            [run]
            batch_size = 8
            [extra]
        "#;
        match TrainConfig::from_toml_str(text) {
            Err(Error::Config(e)) => {
                let all = e.join("\n");
                for key in ["objective.colour", "map.kind", "model.hidden", "model.lr", "objective.bank_size", "[extra]"] {
                    assert!(all.contains(key), "missing {key} in\n{all}");
                }
            }
            other => panic!("{other:?}"),
        }
        let c = TrainConfig::from_toml_str("[objective]\nkind = \"exfm_s\"\n[map]\nsigma_e = 2.0\n").unwrap();
        assert!(matches!(c.map, ConditionalMap::BrownianBridge { sigma_e } if sigma_e == 2.0));
        assert!(matches!(TrainConfig::from_toml_str("[data]\nkind = \"csv\"\npath = \"/nonexistent.csv\""), Err(Error::Config(_))));
        assert!(matches!(TrainConfig::from_toml_str("[run\n"), Err(Error::Parse { .. })));
    }
}
