use std::fmt;
use std::path::{Path, PathBuf};

use toml::{Table, Value};

use crate::experiments;

#[derive(Debug)]
pub enum CliError {
    /// Bad invocation or configuration; exit code 2.
    Usage(String),
    /// Numerical fault or failed verification; exit code 1.
    Fault(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Fault(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Fault(m) => f.write_str(m),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Fault(format!("i/o: {e}"))
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Fault(format!("csv: {e}"))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Fault(format!("json: {e}"))
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub fn usage<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(CliError::Usage(msg.into()))
}

/// Module errors carry experiment context; invalid inputs count as usage errors.
pub fn module_err(experiment: &str) -> impl Fn(bridgekit::BridgeError) -> CliError + '_ {
    move |e| match e {
        bridgekit::BridgeError::InvalidInput(m) => CliError::Usage(format!("{experiment}: {m}")),
        bridgekit::BridgeError::Numerical(m) => CliError::Fault(format!("{experiment}: {m}")),
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub experiment: String,
    pub seed: Option<u64>,
    pub params: Table,
    pub out: PathBuf,
}

fn parse_override(kv: &str) -> CliResult<(String, Value)> {
    let Some((k, v)) = kv.split_once('=') else {
        return usage(format!("--set expects key=value, got {kv:?}"));
    };
    let value = match toml::from_str::<Table>(&format!("v = {v}")) {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(_) => Value::String(v.to_string()),
    };
    Ok((k.trim().to_string(), value))
}

fn coerce(key: &str, default: &Value, given: Value) -> CliResult<Value> {
    match (default, given) {
        (Value::Float(_), Value::Integer(i)) => Ok(Value::Float(i as f64)),
        (Value::Array(d), Value::Array(g)) => {
            let proto = d.first().cloned().unwrap_or(Value::Float(0.0));
            g.into_iter().map(|v| coerce(key, &proto, v)).collect::<CliResult<Vec<_>>>().map(Value::Array)
        }
        (d, g) if std::mem::discriminant(d) == std::mem::discriminant(&g) => Ok(g),
        (d, g) => usage(format!("parameter {key:?} expects a {}, got {}", d.type_str(), g.type_str())),
    }
}

impl ExperimentConfig {
    /// Config file first, then command-line flags; unknown keys are rejected.
    pub fn assemble(experiment: Option<String>, config: Option<PathBuf>, seed: Option<u64>, out: Option<PathBuf>, set: &[String]) -> CliResult<Self> {
        let mut file_table = Table::new();
        if let Some(path) = &config {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
            file_table = toml::from_str(&text).map_err(|e| CliError::Usage(format!("bad config {}: {e}", path.display())))?;
        }
        for key in file_table.keys() {
            if !["experiment", "seed", "out", "params"].contains(&key.as_str()) {
                return usage(format!("unknown top-level config key {key:?}"));
            }
        }
        let name = match (experiment, file_table.get("experiment")) {
            (Some(n), _) => n,
            (None, Some(Value::String(n))) => n.clone(),
            (None, Some(_)) => return usage("config key \"experiment\" must be a string"),
            (None, None) => return usage("no experiment given; see `bridgekit list`"),
        };
        let defaults = experiments::defaults(&name).ok_or_else(|| CliError::Usage(format!("unknown experiment {name:?}; see `bridgekit list`")))?;
        let seed = match (seed, file_table.get("seed")) {
            (Some(s), _) => Some(s),
            (None, Some(Value::Integer(s))) if *s >= 0 => Some(*s as u64),
            (None, Some(_)) => return usage("seed must be a nonnegative integer"),
            (None, None) => None,
        };
        let out = match (out, file_table.get("out")) {
            (Some(o), _) => o,
            (None, Some(Value::String(o))) => PathBuf::from(o),
            _ => Path::new("out").join(&name),
        };
        let mut params = defaults.clone();
        let mut given: Vec<(String, Value)> = Vec::new();
        if let Some(p) = file_table.get("params") {
            let Value::Table(t) = p else { return usage("params must be a table") };
            given.extend(t.iter().map(|(k, v)| (k.clone(), v.clone())));
        }
        for kv in set {
            given.push(parse_override(kv)?);
        }
        for (k, v) in given {
            let Some(d) = defaults.get(&k) else {
                let known: Vec<&String> = defaults.keys().collect();
                return usage(format!("unknown parameter {k:?} for {name}; known: {known:?}"));
            };
            params.insert(k.clone(), coerce(&k, d, v)?);
        }
        if experiments::is_stochastic(&name) && seed.is_none() {
            return usage(format!("experiment {name} needs a seed (--seed or `seed =` in the config)"));
        }
        Ok(ExperimentConfig { experiment: name, seed, params, out })
    }

    pub fn f(&self, key: &str) -> f64 {
        match &self.params[key] {
            Value::Float(x) => *x,
            Value::Integer(i) => *i as f64,
            v => panic!("parameter {key} is {v:?}"),
        }
    }

    pub fn u(&self, key: &str) -> CliResult<usize> {
        match &self.params[key] {
            Value::Integer(i) if *i >= 0 => Ok(*i as usize),
            v => usage(format!("parameter {key} must be a nonnegative integer, got {v}")),
        }
    }

    pub fn s(&self, key: &str) -> &str {
        self.params[key].as_str().unwrap_or_default()
    }

    pub fn fv(&self, key: &str) -> Vec<f64> {
        match &self.params[key] {
            Value::Array(a) => a.iter().filter_map(|v| v.as_float().or(v.as_integer().map(|i| i as f64))).collect(),
            _ => Vec::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }
}
