// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use exfm::densities::fmt_f64;
use exfm::dispersion::{dispersion_sweep, DispersionConfig};
use exfm::estimators::{rejection_target, snis_target, RejectionOptions, TargetBank};
use exfm::exact_fields::{self as ef, GaussPairParams, SdeGaussParams};
use exfm::integrators::{integrate_many, integrate_ode, integrate_sde_many, Method, SdeOptions};
use exfm::nn::{load_checkpoint, save_checkpoint, MlpField};
use exfm::training::{Objective, TrainConfig, Trainer};
use exfm::{datasets, metrics, rng, ConditionalMap, Density, EmpiricalSet, Error, Gaussian, GaussianMixture, Result};
use serde_json::json;

const DEFAULT_GRID: &str = "0.05:0.95:19,-6:6:25";

#[derive(Parser)]
#[command(name = "exfm", version, about = "Explicit flow matching experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Closed-form marginal field on a (t, x) grid.
    ExactField {
        #[arg(long, value_enum)]
        case: Case,
        /// `t0:t1:nt,x0:x1:nx`
        #[arg(long, default_value = DEFAULT_GRID, allow_hyphen_values = true)]
        grid: String,
        /// Add an independent `v_oracle` column: quadrature for gauss and gm, ray inversion for ot.
        #[arg(long)]
        with_oracle: bool,
        #[command(flatten)]
        params: CaseParams,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Paths of the marginal ODE from a row of starting points.
    Trajectories {
        #[arg(long, value_enum)]
        case: Case,
        /// `x0:x1:n`
        #[arg(long, default_value = "-2:2:9", allow_hyphen_values = true)]
        starts: String,
        /// Fourth-order Runge–Kutta steps over [0, t_end].
        #[arg(long, default_value_t = 100)]
        steps: usize,
        /// Defaults to 1, or 0.999 for gm, whose field is undefined at t = 1.
        #[arg(long)]
        t_end: Option<f64>,
        #[command(flatten)]
        params: CaseParams,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a network from a TOML config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        objective: Option<ObjectiveArg>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Estimated against exact field for N(0, 1) -> N(mu, sigma^2).
    Estimate {
        #[arg(long, default_value_t = 2.0)]
        mu: f64,
        #[arg(long, default_value_t = 3.0)]
        sigma: f64,
        #[arg(long, default_value_t = 1000)]
        bank: usize,
        #[arg(long, value_enum, default_value_t = EstimatorArg::Snis)]
        estimator: EstimatorArg,
        #[arg(long, default_value = DEFAULT_GRID, allow_hyphen_values = true)]
        grid: String,
        /// Emit an N vs RMSE table instead of the per-point grid. Uses the grid
        /// times and, at each, the marginal mean and mean ± one std.
        #[arg(long)]
        convergence: bool,
        #[arg(long, value_delimiter = ',', default_value = "100,1000,10000")]
        ns: Vec<usize>,
        #[arg(long, default_value_t = 20)]
        reps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Target dispersion of the CFM and ExFM regression targets.
    Dispersion {
        /// Use the default time grid k/20, k = 1..19.
        #[arg(long)]
        sweep: bool,
        #[arg(long, value_delimiter = ',', conflicts_with = "sweep")]
        t: Vec<f64>,
        #[arg(long, default_value_t = 1)]
        dim: usize,
        #[arg(long, default_value_t = 2.0)]
        mu: f64,
        #[arg(long, default_value_t = 3.0)]
        sigma: f64,
        #[arg(long, default_value_t = 20_000)]
        m: usize,
        #[arg(long, default_value_t = 128)]
        n: usize,
        #[arg(long, default_value_t = 200_000)]
        cfm_draws: usize,
        #[arg(long, default_value_t = 1.0)]
        gamma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Energy distance and W2 between two CSV sample sets; NLL with a checkpoint.
    Metrics {
        #[arg(long)]
        x: PathBuf,
        #[arg(long)]
        y: Option<PathBuf>,
        #[arg(long, default_value_t = 512)]
        w2_size: usize,
        /// Field checkpoint scored on `--x` by the reverse ODE.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 1e-5)]
        tol: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate samples from a trained field.
    Sample {
        #[arg(long = "from")]
        from: PathBuf,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        /// Score checkpoint; switches to the bridge SDE sampler.
        #[arg(long)]
        score: Option<PathBuf>,
        #[arg(long, default_value_t = 1.0)]
        sigma_e: f64,
        #[arg(long, default_value_t = 200)]
        sde_steps: usize,
        #[arg(long, default_value_t = 1e-5)]
        tol: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Case {
    Gauss,
    Gm,
    Sde,
    Ot,
}

#[derive(Clone, Copy, ValueEnum)]
enum ObjectiveArg {
    Cfm,
    Exfm,
    #[value(name = "exfm_s")]
    ExfmS,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum EstimatorArg {
    Snis,
    Rejection,
}

/// Source is N(0, 1) except for `gauss`, which takes `--mu0/--sigma0`.
/// `gm` targets ½N(−mu, sigma²) + ½N(mu, sigma²).
#[derive(clap::Args, Clone, Copy)]
struct CaseParams {
    #[arg(long, default_value_t = 0.0)]
    mu0: f64,
    #[arg(long, default_value_t = 1.0)]
    sigma0: f64,
    #[arg(long, default_value_t = 2.0)]
    mu: f64,
    #[arg(long, default_value_t = 3.0)]
    sigma: f64,
    #[arg(long, default_value_t = 1.0)]
    sigma_e: f64,
}

fn usage(msg: impl Into<String>) -> Error {
    Error::InvalidParameter(msg.into())
}

/// `a:b:n` into `n` evenly spaced points.
fn parse_range(s: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = s.trim().split(':').collect();
    let bad = || usage(format!("range `{s}` must look like a:b:n"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let a: f64 = parts[0].parse().map_err(|_| bad())?;
    let b: f64 = parts[1].parse().map_err(|_| bad())?;
    let n: usize = parts[2].parse().map_err(|_| bad())?;
    if n == 0 || !a.is_finite() || !b.is_finite() {
        return Err(bad());
    }
    if n == 1 {
        return Ok(vec![a]);
    }
    Ok((0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect())
}

fn parse_grid(s: &str) -> Result<(Vec<f64>, Vec<f64>)> {
    let (t, x) = s.split_once(',').ok_or_else(|| usage(format!("grid `{s}` must look like t0:t1:nt,x0:x1:nx")))?;
    let ts = parse_range(t)?;
    if let Some(t) = ts.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(usage(format!("grid time {t} is outside [0, 1]")));
    }
    Ok((ts, parse_range(x)?))
}

fn write_out(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text)?,
        None => std::io::stdout().lock().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn row(cells: &[f64]) -> String {
    let mut s = cells.iter().map(|v| fmt_f64(*v)).collect::<Vec<_>>().join(",");
    s.push('\n');
    s
}

struct CaseFields {
    case: Case,
    gauss: GaussPairParams,
    gm: GaussianMixture,
    sde: SdeGaussParams,
    p: CaseParams,
}

impl CaseFields {
    fn new(case: Case, p: CaseParams) -> Result<Self> {
        Ok(Self {
            case,
            gauss: GaussPairParams::scalar(p.mu0, p.sigma0, p.mu, p.sigma)?,
            gm: GaussianMixture::symmetric_pair(p.mu, p.sigma)?,
            sde: SdeGaussParams::new(Gaussian::scalar(p.mu, p.sigma)?, p.sigma_e)?,
            p,
        })
    }

    fn field(&self, x: f64, t: f64) -> Result<f64> {
        Ok(match self.case {
            Case::Gauss => ef::gauss_to_gauss_field(&self.gauss, &[x], t)?[0],
            Case::Gm => ef::gauss_to_gm_field(&self.gm, x, t)?,
            Case::Sde => ef::sde_gauss_field(&self.sde, &[x], t)?[0],
            Case::Ot => ef::ot_diag_field(&[self.p.mu], &[self.p.sigma], &[x], t)?[0],
        })
    }

    fn oracle(&self, x: f64, t: f64) -> Result<f64> {
        let rho0: Density = Gaussian::standard(1).into();
        match self.case {
            Case::Gauss => {
                let src: Density = Gaussian::scalar(self.p.mu0, self.p.sigma0)?.into();
                ef::quadrature_field(&src, &Gaussian::scalar(self.p.mu, self.p.sigma)?.into(), x, t)
            }
            Case::Gm => ef::quadrature_field(&rho0, &self.gm.clone().into(), x, t),
            // The coupling x1 = mu + sigma*x0 gives straight rays; invert the
            // ray through x and read off its constant velocity.
            Case::Ot => {
                let x0 = (x - self.p.mu * t) / (1.0 + (self.p.sigma - 1.0) * t);
                Ok(self.p.mu + (self.p.sigma - 1.0) * x0)
            }
            Case::Sde => Err(Error::Unsupported("no oracle column for the sde case".into())),
        }
    }

    fn closed_trajectory(&self, x0: f64, t: f64) -> Result<Option<f64>> {
        Ok(match self.case {
            Case::Gauss => Some(ef::gauss_to_gauss_trajectory(&self.gauss, &[x0], t)?[0]),
            Case::Sde => Some(ef::sde_gauss_trajectory(&self.sde, &[x0], t)?[0]),
            Case::Ot => Some(ef::ot_diag_trajectory(&[self.p.mu], &[self.p.sigma], &[x0], t)?[0]),
            Case::Gm => None,
        })
    }
}

fn exact_field(case: Case, grid: &str, with_oracle: bool, p: CaseParams) -> Result<String> {
    let (ts, xs) = parse_grid(grid)?;
    let f = CaseFields::new(case, p)?;
    if with_oracle && case == Case::Sde {
        return Err(Error::Unsupported("--with-oracle is not available for the sde case".into()));
    }
    let mut s = String::from(if with_oracle { "t,x,v,v_oracle\n" } else { "t,x,v\n" });
    for &t in &ts {
        for &x in &xs {
            let v = f.field(x, t)?;
            if with_oracle {
                s.push_str(&row(&[t, x, v, f.oracle(x, t)?]));
            } else {
                s.push_str(&row(&[t, x, v]));
            }
        }
    }
    Ok(s)
}

fn trajectories(case: Case, starts: &str, steps: usize, t_end: f64, p: CaseParams) -> Result<String> {
    if !(t_end > 0.0 && t_end <= 1.0) {
        return Err(usage(format!("--t-end must lie in (0, 1], got {t_end}")));
    }
    let f = CaseFields::new(case, p)?;
    let field = |x: &[f64], t: f64, out: &mut [f64]| -> Result<()> {
        out[0] = f.field(x[0], t)?;
        Ok(())
    };
    let mut s = String::from("path,t,x,x_closed_form\n");
    for (i, x0) in parse_range(starts)?.into_iter().enumerate() {
        let path = integrate_ode(&field, &[x0], 0.0, t_end, Method::Rk4 { steps })?;
        for (k, &t) in path.times.iter().enumerate() {
            let exact = f.closed_trajectory(x0, t)?.map(fmt_f64).unwrap_or_default();
            s.push_str(&format!("{i},{},{},{exact}\n", fmt_f64(t), fmt_f64(path.state(k)[0])));
        }
    }
    Ok(s)
}

fn train(config: &Path, out: &Path, objective: Option<ObjectiveArg>, steps: Option<u64>, seed: Option<u64>) -> Result<()> {
    let mut cfg = TrainConfig::from_toml_file(config)?;
    if let Some(o) = objective {
        cfg.objective = match o {
            ObjectiveArg::Cfm => Objective::Cfm,
            ObjectiveArg::Exfm => Objective::Exfm,
            ObjectiveArg::ExfmS => Objective::ExfmS,
        };
    }
    if let Some(s) = steps {
        cfg.steps = s;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let mut trainer = Trainer::new(cfg)?;
    fs::create_dir_all(out)?;
    let mut log = BufWriter::new(fs::File::create(out.join("run.jsonl"))?);
    let summary = trainer.run(|rec| {
        writeln!(log, "{}", rec.to_json_line())?;
        Ok(())
    })?;
    log.flush()?;
    let (spec, seed, step) = (&trainer.spec, trainer.config.seed, trainer.field.step);
    save_checkpoint(out.join("field.ckpt"), spec, &trainer.field.params, step, seed)?;
    save_checkpoint(out.join("field_ema.ckpt"), spec, &trainer.field.shadow, step, seed)?;
    if let Some(score) = &trainer.score {
        save_checkpoint(out.join("score.ckpt"), spec, &score.params, step, seed)?;
        save_checkpoint(out.join("score_ema.ckpt"), spec, &score.shadow, step, seed)?;
    }
    let mut text = serde_json::to_string_pretty(&summary)?;
    text.push('\n');
    fs::write(out.join("summary.json"), text)?;
    eprintln!(
        "{} on {}: final energy distance {:.4e}",
        summary.objective.name(),
        summary.dataset,
        summary.final_energy_distance
    );
    Ok(())
}

struct EstimateSetup {
    pair: GaussPairParams,
    rho0: Density,
    rho1: Density,
    kind: EstimatorArg,
}

impl EstimateSetup {
    fn new(mu: f64, sigma: f64, kind: EstimatorArg) -> Result<Self> {
        Ok(Self {
            pair: GaussPairParams::scalar(0.0, 1.0, mu, sigma)?,
            rho0: Gaussian::standard(1).into(),
            rho1: Gaussian::scalar(mu, sigma)?.into(),
            kind,
        })
    }

    fn bank(&self, n: usize, seed: u64) -> Result<TargetBank> {
        Ok(TargetBank::from_set(&self.rho1.sample(seed, n)?))
    }

    fn estimate(&self, bank: &TargetBank, x: f64, t: f64, seed: u64) -> Result<(f64, f64)> {
        let e = match self.kind {
            EstimatorArg::Snis => snis_target(&[x], t, bank, &ConditionalMap::Linear, &self.rho0)?,
            EstimatorArg::Rejection => {
                rejection_target(&[x], t, bank, &ConditionalMap::Linear, &self.rho0, RejectionOptions::new(seed))?
            }
        };
        Ok((e.value[0], e.ess))
    }

    fn bulk_points(&self, t: f64) -> [f64; 3] {
        let (s, g) = (&self.pair.source, &self.pair.target);
        let m = (1.0 - t) * s.mean()[0] + t * g.mean()[0];
        let sd = ((1.0 - t).powi(2) * s.scale()[0].powi(2) + t * t * g.scale()[0].powi(2)).sqrt();
        [m - sd, m, m + sd]
    }

    fn exact(&self, x: f64, t: f64) -> Result<f64> {
        Ok(ef::gauss_to_gauss_field(&self.pair, &[x], t)?[0])
    }
}

#[allow(clippy::too_many_arguments)]
fn estimate(
    mu: f64,
    sigma: f64,
    bank_size: usize,
    kind: EstimatorArg,
    grid: &str,
    convergence: bool,
    ns: &[usize],
    reps: usize,
    seed: u64,
) -> Result<String> {
    let (ts, xs) = parse_grid(grid)?;
    let setup = EstimateSetup::new(mu, sigma, kind)?;
    if !convergence {
        if bank_size == 0 {
            return Err(usage("--bank must be at least 1"));
        }
        let bank = setup.bank(bank_size, seed)?;
        let mut s = String::from("t,x,v_estimate,v_exact,abs_err,ess\n");
        let mut k = 0u64;
        for &t in &ts {
            for &x in &xs {
                let (v, ess) = setup.estimate(&bank, x, t, rng::derive_seed(seed, k))?;
                let exact = setup.exact(x, t)?;
                s.push_str(&row(&[t, x, v, exact, (v - exact).abs(), ess]));
                k += 1;
            }
        }
        return Ok(s);
    }
    if ns.is_empty() || ns.contains(&0) || reps == 0 {
        return Err(usage("--ns needs positive sizes and --reps must be at least 1"));
    }
    let mut rmse = Vec::with_capacity(ns.len());
    for (j, &n) in ns.iter().enumerate() {
        let mut se = 0.0;
        let mut count = 0usize;
        for rep in 0..reps {
            let stream = (j * reps + rep) as u64;
            let bank = setup.bank(n, rng::derive_seed(seed, stream))?;
            for &t in &ts {
                for x in setup.bulk_points(t) {
                    let (v, _) = setup.estimate(&bank, x, t, rng::derive_seed(seed ^ (1 << 40), count as u64))?;
                    se += (v - setup.exact(x, t)?).powi(2);
                    count += 1;
                }
            }
        }
        rmse.push((se / count as f64).sqrt());
    }
    let mut s = String::new();
    if ns.len() >= 2 {
        let (n0, n1) = (ns[0] as f64, ns[ns.len() - 1] as f64);
        let slope = (rmse[rmse.len() - 1] / rmse[0]).ln() / (n1 / n0).ln();
        s.push_str(&format!("# log_log_slope={}\n", fmt_f64(slope)));
    }
    s.push_str("n,rmse,rmse_sqrt_n\n");
    for (n, r) in ns.iter().zip(&rmse) {
        s.push_str(&format!("{n},{},{}\n", fmt_f64(*r), fmt_f64(r * (*n as f64).sqrt())));
    }
    Ok(s)
}

fn metrics_cmd(x: &Path, y: Option<&Path>, w2_size: usize, ckpt: Option<&Path>, tol: f64, seed: u64) -> Result<String> {
    let xs = datasets::load_csv(x, false)?;
    let mut out = serde_json::Map::new();
    out.insert("n_x".into(), json!(xs.len()));
    if let Some(y) = y {
        let ys = datasets::load_csv(y, false)?;
        out.insert("n_y".into(), json!(ys.len()));
        out.insert("energy_distance".into(), json!(metrics::energy_distance(&xs, &ys)?));
        out.insert("w2".into(), json!(metrics::wasserstein2_subsampled(&xs, &ys, w2_size, seed)?));
    }
    if let Some(c) = ckpt {
        let (header, params) = load_checkpoint(c)?;
        let field = MlpField { spec: &header.spec, params: &params };
        out.insert("nll".into(), json!(metrics::nll(&field, &xs, tol)?));
    }
    if out.len() == 1 {
        return Err(usage("metrics needs --y, --checkpoint or both"));
    }
    let mut s = serde_json::to_string_pretty(&out)?;
    s.push('\n');
    Ok(s)
}

#[allow(clippy::too_many_arguments)]
fn sample(from: &Path, n: usize, score: Option<&Path>, sigma_e: f64, sde_steps: usize, tol: f64, seed: u64) -> Result<String> {
    let (header, params) = load_checkpoint(from)?;
    let d = header.spec.data_dim;
    let starts = Density::from(Gaussian::standard(d)).sample(seed, n)?.into_flat();
    let field = MlpField { spec: &header.spec, params: &params };
    let out = match score {
        Some(p) => {
            let (sh, sp) = load_checkpoint(p)?;
            if sh.spec.data_dim != d {
                return Err(Error::DimensionMismatch { expected: d, got: sh.spec.data_dim });
            }
            if sde_steps == 0 {
                return Err(usage("--sde-steps must be at least 1"));
            }
            let score = MlpField { spec: &sh.spec, params: &sp };
            let g = move |t: f64| sigma_e * (t * (1.0 - t)).max(0.0).sqrt();
            integrate_sde_many(&field, &score, &g, &starts, d, SdeOptions::unit(sde_steps), seed)?
        }
        None => integrate_many(&field, &starts, d, 0.0, 1.0, Method::Adaptive { tol })
            .map_err(|(index, e)| match e {
                Error::Divergence { t } => Error::SampleDivergence { index, t },
                other => other,
            })?,
    };
    Ok(EmpiricalSet::new(out, d, "generated")?.to_csv_string())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::ExactField { case, grid, with_oracle, params, out } => {
            write_out(out.as_deref(), &exact_field(case, &grid, with_oracle, params)?)
        }
        Command::Trajectories { case, starts, steps, t_end, params, out } => {
            let t_end = t_end.unwrap_or(if case == Case::Gm { 0.999 } else { 1.0 });
            write_out(out.as_deref(), &trajectories(case, &starts, steps, t_end, params)?)
        }
        Command::Train { config, out, objective, steps, seed } => train(&config, &out, objective, steps, seed),
        Command::Estimate { mu, sigma, bank, estimator, grid, convergence, ns, reps, seed, out } => {
            let text = estimate(mu, sigma, bank, estimator, &grid, convergence, &ns, reps, seed)?;
            write_out(out.as_deref(), &text)
        }
        Command::Dispersion { sweep, t, dim, mu, sigma, m, n, cfm_draws, gamma, seed, out } => {
            let ts = if sweep {
                DispersionConfig::default().ts
            } else if !t.is_empty() {
                t
            } else {
                return Err(usage("dispersion needs --sweep or --t"));
            };
            let cfg = DispersionConfig { dim, mu, sigma, ts, m, n, cfm_draws, gamma, seed };
            write_out(out.as_deref(), &dispersion_sweep(&cfg)?.to_csv_string())
        }
        Command::Metrics { x, y, w2_size, checkpoint, tol, seed, out } => {
            let text = metrics_cmd(&x, y.as_deref(), w2_size, checkpoint.as_deref(), tol, seed)?;
            write_out(out.as_deref(), &text)
        }
        Command::Sample { from, n, score, sigma_e, sde_steps, tol, seed, out } => {
            let text = sample(&from, n, score.as_deref(), sigma_e, sde_steps, tol, seed)?;
            write_out(out.as_deref(), &text)
        }
    }
}

fn configure_threads() -> std::result::Result<(), String> {
    let Ok(v) = std::env::var("EXFM_THREADS") else { return Ok(()) };
    let n: usize = v.trim().parse().map_err(|_| format!("EXFM_THREADS must be a positive integer, got `{v}`"))?;
    if n == 0 {
        return Err("EXFM_THREADS must be a positive integer, got `0`".into());
    }
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(msg) = configure_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(2);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 3 } else { 2 })
        }
    }
}
