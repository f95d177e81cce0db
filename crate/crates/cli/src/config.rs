use std::path::{Path, PathBuf};

use amd_core::training::{TargetTrainConfig, TrainSchedule};
use amd_core::{AmdError, EmbedderConfig, InterpreterConfig, LossConfig, Result};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

/// Flat run configuration shared by every command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: String,
    pub data_dir: String,
    pub target_weights: String,
    pub interpreter_weights: String,

    pub train_ids: usize,
    pub test_ids: usize,
    pub images_per_id: usize,
    pub cameras: usize,

    pub embedder_widths: Vec<usize>,
    pub embedder_strides: Vec<usize>,
    pub embedder_kernel: usize,
    pub gmp_power: f64,

    pub target_epochs: usize,
    pub target_p: usize,
    pub target_s: usize,
    pub target_lr: f64,
    pub target_margin: f64,
    pub target_norm_weight: f64,

    pub shared_stages: usize,
    pub kappa: f64,
    pub tau: f64,
    pub p: usize,
    pub s: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub lr: f64,
    pub warmup_lr: f64,
    pub alpha: f64,
    pub beta: f64,
    pub upsilon: f64,

    pub gamma: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let emb = EmbedderConfig::default();
        let tgt = TargetTrainConfig::default();
        let sched = TrainSchedule::default();
        let loss = LossConfig::default();
        RunConfig {
            seed: 0,
            out_dir: "run".into(),
            data_dir: String::new(),
            target_weights: String::new(),
            interpreter_weights: String::new(),
            train_ids: 32,
            test_ids: 16,
            images_per_id: 16,
            cameras: 4,
            embedder_widths: emb.widths,
            embedder_strides: emb.strides,
            embedder_kernel: emb.kernel,
            gmp_power: emb.gmp_power,
            target_epochs: tgt.epochs,
            target_p: tgt.p,
            target_s: tgt.s,
            target_lr: tgt.lr,
            target_margin: tgt.margin,
            target_norm_weight: tgt.norm_weight,
            shared_stages: 3,
            kappa: 0.0,
            tau: 0.5,
            p: sched.p,
            s: sched.s,
            epochs: sched.epochs,
            warmup_epochs: sched.warmup_epochs,
            lr: sched.base_lr,
            warmup_lr: sched.warmup_start_lr,
            alpha: loss.alpha,
            beta: loss.beta,
            upsilon: loss.upsilon,
            gamma: 1.0,
        }
    }
}

/// Every key with a one-line description, in help order.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "seed for data generation, initialization and sampling"),
    ("out_dir", "directory receiving weights, logs and reports"),
    ("data_dir", "dataset directory (empty: <out_dir>/data)"),
    ("target_weights", "target weight file (empty: <out_dir>/target.amdw)"),
    ("interpreter_weights", "interpreter weight file (empty: <out_dir>/interpreter.amdw)"),
    ("train_ids", "identities in the training split"),
    ("test_ids", "identities in the query/gallery split"),
    ("images_per_id", "images rendered per identity"),
    ("cameras", "number of cameras"),
    ("embedder_widths", "channel width of each of the five stages"),
    ("embedder_strides", "stride of each of the five stages"),
    ("embedder_kernel", "convolution kernel size"),
    ("gmp_power", "generalized mean pooling exponent"),
    ("target_epochs", "target training epochs"),
    ("target_p", "identities per target batch"),
    ("target_s", "images per identity in a target batch"),
    ("target_lr", "target learning rate"),
    ("target_margin", "triplet margin"),
    ("target_norm_weight", "weight of the feature-norm penalty"),
    ("shared_stages", "target stages shared with the interpreter"),
    ("kappa", "PePU scale (0: 1/M)"),
    ("tau", "PePU threshold"),
    ("p", "identities per interpreter batch"),
    ("s", "images per identity in an interpreter batch"),
    ("epochs", "interpreter training epochs"),
    ("warmup_epochs", "linear warmup epochs"),
    ("lr", "interpreter learning rate after warmup"),
    ("warmup_lr", "learning rate at the first warmup epoch"),
    ("alpha", "weight of the group prior loss"),
    ("beta", "weight of the individual prior loss"),
    ("upsilon", "exclusive-share exponent of the priors"),
    ("gamma", "re-weighting strength"),
];

fn config_err(msg: impl Into<String>) -> AmdError {
    AmdError::Config(msg.into())
}

pub fn defaults_table() -> Table {
    Table::try_from(RunConfig::default()).expect("default config serializes")
}

pub fn render_value(v: &Value) -> String {
    match v {
        Value::String(s) if s.is_empty() => "\"\"".into(),
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Parses a command-line override into the type of the key's default.
pub fn parse_override(key: &str, raw: &str) -> Result<Value> {
    let defaults = defaults_table();
    let default = defaults
        .get(key)
        .ok_or_else(|| config_err(format!("unknown key `{}`", key)))?;
    let bad = || config_err(format!("cannot parse `{}` for key `{}`", raw, key));
    let v = match default {
        Value::String(_) => Value::String(raw.to_string()),
        Value::Integer(_) => Value::Integer(raw.trim().parse().map_err(|_| bad())?),
        Value::Float(_) => Value::Float(raw.trim().parse().map_err(|_| bad())?),
        Value::Boolean(_) => Value::Boolean(raw.trim().parse().map_err(|_| bad())?),
        Value::Array(_) => {
            let body = raw.trim().trim_start_matches('[').trim_end_matches(']');
            let items: std::result::Result<Vec<Value>, _> = body
                .split(',')
                .filter(|s| !s.trim().is_empty())
                .map(|s| s.trim().parse::<i64>().map(Value::Integer))
                .collect();
            Value::Array(items.map_err(|_| bad())?)
        }
        _ => return Err(bad()),
    };
    Ok(v)
}

/// Merges defaults, an optional config file and overrides (highest precedence last).
pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut table = Table::new();
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err(format!("cannot read config {}: {}", path.display(), e)))?;
        table = text
            .parse::<Table>()
            .map_err(|e| config_err(format!("{}: {}", path.display(), e)))?;
        // integer literals are accepted for float keys
        let defaults = defaults_table();
        for (k, v) in table.iter_mut() {
            if let (Some(Value::Float(_)), Value::Integer(i)) = (defaults.get(k), &*v) {
                *v = Value::Float(*i as f64);
            }
        }
    }
    for (k, raw) in overrides {
        table.insert(k.clone(), parse_override(k, raw)?);
    }
    let cfg: RunConfig = Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| config_err(e.message().to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.out_dir.is_empty() {
            return Err(config_err("out_dir must not be empty"));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(config_err("gamma must be a finite non-negative number"));
        }
        if !(self.kappa >= 0.0) {
            return Err(config_err("kappa must be non-negative"));
        }
        self.embedder().validate()?;
        self.loss().validate()?;
        self.schedule().validate()?;
        Ok(())
    }

    pub fn out(&self) -> PathBuf {
        PathBuf::from(&self.out_dir)
    }

    fn or_out(&self, explicit: &str, name: &str) -> PathBuf {
        if explicit.is_empty() {
            self.out().join(name)
        } else {
            PathBuf::from(explicit)
        }
    }

    pub fn data_path(&self) -> PathBuf {
        self.or_out(&self.data_dir, "data")
    }

    pub fn target_path(&self) -> PathBuf {
        self.or_out(&self.target_weights, "target.amdw")
    }

    pub fn interpreter_path(&self) -> PathBuf {
        self.or_out(&self.interpreter_weights, "interpreter.amdw")
    }

    pub fn embedder(&self) -> EmbedderConfig {
        EmbedderConfig {
            widths: self.embedder_widths.clone(),
            strides: self.embedder_strides.clone(),
            kernel: self.embedder_kernel,
            gmp_power: self.gmp_power,
            ..EmbedderConfig::default()
        }
    }

    pub fn target_training(&self) -> TargetTrainConfig {
        TargetTrainConfig {
            p: self.target_p,
            s: self.target_s,
            epochs: self.target_epochs,
            lr: self.target_lr,
            margin: self.target_margin,
            norm_weight: self.target_norm_weight,
            seed: self.seed,
        }
    }

    pub fn interpreter(&self, m: usize) -> InterpreterConfig {
        InterpreterConfig {
            n_shared: self.shared_stages,
            kappa: (self.kappa > 0.0).then_some(self.kappa),
            tau: self.tau,
            seed: self.seed,
            ..InterpreterConfig::new(m)
        }
    }

    pub fn schedule(&self) -> TrainSchedule {
        TrainSchedule {
            p: self.p,
            s: self.s,
            epochs: self.epochs,
            warmup_epochs: self.warmup_epochs,
            base_lr: self.lr,
            warmup_start_lr: self.warmup_lr,
            seed: self.seed,
        }
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            alpha: self.alpha,
            beta: self.beta,
            upsilon: self.upsilon,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_list_covers_every_field() {
        let table = defaults_table();
        let listed: Vec<&str> = KEYS.iter().map(|k| k.0).collect();
        let mut fields: Vec<&str> = table.keys().map(String::as_str).collect();
        let mut sorted = listed.clone();
        sorted.sort();
        fields.sort();
        assert_eq!(sorted, fields);
    }

    #[test]
    fn defaults_carry_published_values() {
        let c = RunConfig::default();
        assert_eq!((c.alpha, c.beta, c.upsilon, c.tau, c.gamma), (10.0, 50.0, 0.5, 0.5, 1.0));
        assert_eq!((c.p, c.s, c.epochs, c.warmup_epochs), (6, 4, 30, 10));
        assert_eq!((c.lr, c.warmup_lr), (1e-4, 1e-6));
        assert_eq!(c.interpreter(26).kappa(), 1.0 / 26.0);
    }

    #[test]
    fn precedence_is_cli_then_file_then_default() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("c.toml");
        std::fs::write(&f, "alpha = 3\nbeta = 7.5\nout_dir = \"x\"\n").unwrap();
        let c = resolve(Some(&f), &[("alpha".into(), "4.5".into())]).unwrap();
        assert_eq!(c.alpha, 4.5);
        assert_eq!(c.beta, 7.5);
        assert_eq!(c.out_dir, "x");
        assert_eq!(c.upsilon, 0.5);
    }

    #[test]
    fn overrides_parse_by_default_type() {
        assert_eq!(parse_override("epochs", "12").unwrap(), Value::Integer(12));
        assert_eq!(parse_override("lr", "2e-4").unwrap(), Value::Float(2e-4));
        assert_eq!(
            parse_override("embedder_strides", "1,2,2,1,1").unwrap(),
            Value::Array([1, 2, 2, 1, 1].iter().map(|&v| Value::Integer(v)).collect())
        );
        assert!(parse_override("epochs", "many").is_err());
        assert!(parse_override("nope", "1").is_err());
    }

    #[test]
    fn bad_values_are_config_errors() {
        let e = resolve(None, &[("upsilon".into(), "1.5".into())]).unwrap_err();
        assert_eq!(e.exit_code(), 2);
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("c.toml");
        std::fs::write(&f, "unknown_key = 1\n").unwrap();
        assert_eq!(resolve(Some(&f), &[]).unwrap_err().exit_code(), 2);
    }
}
