//! TOML reader that reports every offending key instead of stopping at the first.

use std::path::PathBuf;

use toml::{Table, Value};

use super::{DataConfig, EstimatorKind, Objective, TrainConfig};
use crate::error::{Error, Result};
use crate::flow_maps::{ConditionalMap, Schedule};
use crate::nn::{Activation, OptimConfig};

const SECTIONS: [&str; 5] = ["objective", "map", "model", "data", "run"];

struct Section<'a> {
    name: &'static str,
    table: Option<&'a Table>,
    seen: Vec<&'static str>,
}

impl<'a> Section<'a> {
    fn new(root: &'a Table, name: &'static str, errors: &mut Vec<String>) -> Self {
        let table = match root.get(name) {
            None => None,
            Some(Value::Table(t)) => Some(t),
            Some(_) => {
                errors.push(format!("[{name}] must be a table"));
                None
            }
        };
        Self { name, table, seen: Vec::new() }
    }

    fn raw(&mut self, key: &'static str) -> Option<&'a Value> {
        self.seen.push(key);
        self.table.and_then(|t| t.get(key))
    }

    fn has(&self, key: &str) -> bool {
        self.table.is_some_and(|t| t.contains_key(key))
    }

    fn bad(&self, key: &str, want: &str, errors: &mut Vec<String>) {
        errors.push(format!("{}.{key}: expected {want}", self.name));
    }

    fn string(&mut self, key: &'static str, default: &str, errors: &mut Vec<String>) -> String {
        match self.raw(key) {
            None => default.to_string(),
            Some(Value::String(s)) => s.clone(),
            Some(_) => {
                self.bad(key, "a string", errors);
                default.to_string()
            }
        }
    }

    fn float(&mut self, key: &'static str, default: f64, errors: &mut Vec<String>) -> f64 {
        match self.raw(key) {
            None => default,
            Some(Value::Float(v)) => *v,
            Some(Value::Integer(v)) => *v as f64,
            Some(_) => {
                self.bad(key, "a number", errors);
                default
            }
        }
    }

    fn count(&mut self, key: &'static str, default: u64, errors: &mut Vec<String>) -> u64 {
        match self.raw(key) {
            None => default,
            Some(Value::Integer(v)) if *v >= 0 => *v as u64,
            Some(_) => {
                self.bad(key, "a non-negative integer", errors);
                default
            }
        }
    }

    fn flag(&mut self, key: &'static str, default: bool, errors: &mut Vec<String>) -> bool {
        match self.raw(key) {
            None => default,
            Some(Value::Boolean(b)) => *b,
            Some(_) => {
                self.bad(key, "a boolean", errors);
                default
            }
        }
    }

    fn floats(&mut self, key: &'static str, errors: &mut Vec<String>) -> Option<Vec<f64>> {
        let arr = match self.raw(key)? {
            Value::Array(a) => a,
            _ => {
                self.bad(key, "an array of numbers", errors);
                return None;
            }
        };
        let mut out = Vec::with_capacity(arr.len());
        for v in arr {
            match v {
                Value::Float(f) => out.push(*f),
                Value::Integer(i) => out.push(*i as f64),
                _ => {
                    self.bad(key, "an array of numbers", errors);
                    return None;
                }
            }
        }
        Some(out)
    }

    fn counts(&mut self, key: &'static str, default: &[usize], errors: &mut Vec<String>) -> Vec<usize> {
        let Some(v) = self.raw(key) else { return default.to_vec() };
        let parsed = match v {
            Value::Array(a) => a
                .iter()
                .map(|x| match x {
                    Value::Integer(i) if *i >= 1 => Some(*i as usize),
                    _ => None,
                })
                .collect::<Option<Vec<_>>>(),
            _ => None,
        };
        parsed.unwrap_or_else(|| {
            self.bad(key, "an array of positive integers", errors);
            default.to_vec()
        })
    }

    fn finish(self, errors: &mut Vec<String>) {
        if let Some(t) = self.table {
            for key in t.keys() {
                if !self.seen.contains(&key.as_str()) {
                    errors.push(format!("{}.{key}: unknown key", self.name));
                }
            }
        }
    }
}

pub(super) fn parse(text: &str) -> Result<TrainConfig> {
    let root: Table = text.parse().map_err(|e: toml::de::Error| {
        let line = e.span().map(|s| text[..s.start].lines().count().max(1)).unwrap_or(0);
        Error::Parse { line, msg: e.message().to_string() }
    })?;
    let mut errors = Vec::new();
    for key in root.keys() {
        if !SECTIONS.contains(&key.as_str()) {
            errors.push(format!("[{key}]: unknown section"));
        }
    }
    let d = TrainConfig::default();

    let mut s = Section::new(&root, "objective", &mut errors);
    let objective = match s.string("kind", "exfm", &mut errors).as_str() {
        "cfm" => Objective::Cfm,
        "exfm" => Objective::Exfm,
        "exfm_s" => Objective::ExfmS,
        other => {
            errors.push(format!("objective.kind: unknown objective `{other}` (cfm, exfm, exfm_s)"));
            d.objective
        }
    };
    let estimator = match s.string("estimator", "snis", &mut errors).as_str() {
        "snis" => EstimatorKind::Snis,
        "rejection" => EstimatorKind::Rejection,
        other => {
            errors.push(format!("objective.estimator: unknown estimator `{other}` (snis, rejection)"));
            d.estimator
        }
    };
    let bank_size = s.count("bank_size", d.bank_size as u64, &mut errors) as usize;
    let source_bank_size = s.count("source_bank_size", d.source_bank_size as u64, &mut errors) as usize;
    s.finish(&mut errors);

    let mut s = Section::new(&root, "map", &mut errors);
    let kind = s.string("kind", if objective == Objective::ExfmS { "bridge" } else { "linear" }, &mut errors);
    let sigma_s = s.float("sigma_s", 0.1, &mut errors);
    let sigma_e = s.float("sigma_e", 1.0, &mut errors);
    let map = match kind.as_str() {
        "linear" => ConditionalMap::Linear,
        "regularized" => ConditionalMap::RegularizedLinear { sigma_s },
        "ve" => ConditionalMap::VarianceExploding(Schedule::Identity),
        "vp" => ConditionalMap::VariancePreserving(Schedule::Cosine),
        "bridge" => ConditionalMap::BrownianBridge { sigma_e },
        other => {
            errors.push(format!("map.kind: unknown map `{other}` (linear, regularized, ve, vp, bridge)"));
            ConditionalMap::Linear
        }
    };
    if s.has("sigma_s") && kind != "regularized" {
        errors.push("map.sigma_s: only used by the regularized map".into());
    }
    if s.has("sigma_e") && kind != "bridge" {
        errors.push("map.sigma_e: only used by the bridge map".into());
    }
    s.finish(&mut errors);

    let mut s = Section::new(&root, "model", &mut errors);
    let hidden = s.counts("hidden", &d.hidden, &mut errors);
    let activation = match s.string("activation", "relu", &mut errors).as_str() {
        "relu" => Activation::Relu,
        "selu" => Activation::Selu,
        other => {
            errors.push(format!("model.activation: unknown activation `{other}` (relu, selu)"));
            d.activation
        }
    };
    let o = OptimConfig::default();
    let optim = OptimConfig {
        lr: s.float("lr", o.lr, &mut errors),
        beta1: s.float("beta1", o.beta1, &mut errors),
        beta2: s.float("beta2", o.beta2, &mut errors),
        eps: s.float("eps", o.eps, &mut errors),
        weight_decay: s.float("weight_decay", o.weight_decay, &mut errors),
        decoupled: s.flag("decoupled", o.decoupled, &mut errors),
        ema_rate: s.float("ema_rate", o.ema_rate, &mut errors),
    };
    s.finish(&mut errors);

    let mut s = Section::new(&root, "data", &mut errors);
    let data = match s.string("kind", "toy", &mut errors).as_str() {
        "toy" => DataConfig::Toy {
            name: s.string("name", "moons", &mut errors),
            train_size: s.count("train_size", 20_000, &mut errors) as usize,
        },
        "csv" => {
            let path = s.string("path", "", &mut errors);
            if path.is_empty() {
                errors.push("data.path: required for csv data".into());
            }
            DataConfig::Csv { path: PathBuf::from(path), standardize: s.flag("standardize", true, &mut errors) }
        }
        "gaussian" => {
            let mean = s.floats("mean", &mut errors).unwrap_or_else(|| vec![0.0]);
            let scale = s.floats("scale", &mut errors).unwrap_or_else(|| vec![1.0; mean.len()]);
            DataConfig::Gaussian { mean, scale }
        }
        other => {
            errors.push(format!("data.kind: unknown data kind `{other}` (toy, csv, gaussian)"));
            d.data.clone()
        }
    };
    let eval_size = s.count("eval_size", d.eval_size as u64, &mut errors) as usize;
    s.finish(&mut errors);

    let mut s = Section::new(&root, "run", &mut errors);
    let cfg = TrainConfig {
        objective,
        estimator,
        bank_size,
        source_bank_size,
        map,
        hidden,
        activation,
        optim,
        data,
        eval_size,
        steps: s.count("steps", d.steps, &mut errors),
        batch_size: s.count("batch_size", d.batch_size as u64, &mut errors) as usize,
        seed: s.count("seed", d.seed, &mut errors),
        eval_every: s.count("eval_every", d.eval_every, &mut errors),
        w2_size: s.count("w2_size", d.w2_size as u64, &mut errors) as usize,
        ode_tol: s.float("ode_tol", d.ode_tol, &mut errors),
        sde_steps: s.count("sde_steps", d.sde_steps as u64, &mut errors) as usize,
    };
    s.finish(&mut errors);

    errors.extend(cfg.problems());
    if errors.is_empty() {
        Ok(cfg)
    } else {
        Err(Error::Config(errors))
    }
}
