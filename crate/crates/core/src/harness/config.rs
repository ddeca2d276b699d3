//! Experiment configuration: flat `key = value` text with dotted keys.
//!
//! ```text
//! # SVM with mini-batch SGD on five nodes
//! model.kind = svm
//! model.lambda = 0.01
//! data.samples = 1000
//! nodes = 5
//! case = 2
//! mode = sgd
//! mode.batch_size = 20
//! policy = adaptive
//! resources.budget = 15
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::control::ControlConfig;
use crate::data::{Case, CsvSchema, LabelKind, SyntheticSpec};
use crate::engine::{Init, Mode};
use crate::error::{Error, Result};
use crate::models::{LossModel, ModelKind};
use crate::resources::{
    dgd_global, dgd_local, Gaussian, MeterMode, ResourceSpec, ResourceType, Semantics, SGD_CENTRAL_LOCAL, SGD_GLOBAL,
    SGD_LOCAL,
};

/// Raw key/value pairs in file order of appearance (later keys win).
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawConfig(pub BTreeMap<String, String>);

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected `key = value`", i + 1)))?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::config(format!("line {}: empty key", i + 1)));
            }
            map.insert(k.to_string(), v.trim().to_string());
        }
        Ok(Self(map))
    }

    /// Reads a config file; a relative `data.path` is resolved against the
    /// file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut raw = Self::parse(&text)?;
        if let (Some(p), Some(dir)) = (raw.0.get("data.path").cloned(), path.parent()) {
            if Path::new(&p).is_relative() {
                raw.set("data.path", dir.join(p).to_string_lossy());
            }
        }
        Ok(raw)
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.0.insert(key.to_string(), value.into());
    }

    /// Applies whitespace-separated `key=value` overrides.
    pub fn apply_overrides(&mut self, line: &str) -> Result<()> {
        for tok in line.split_whitespace() {
            let (k, v) = tok
                .split_once('=')
                .ok_or_else(|| Error::config(format!("override `{tok}` is not key=value")))?;
            self.set(k, v);
        }
        Ok(())
    }
}

/// Where training data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    Csv {
        path: PathBuf,
        dim: usize,
        labels: LabelKind,
        header: bool,
    },
}

impl DataSource {
    pub fn csv_schema(&self) -> Option<CsvSchema> {
        match self {
            DataSource::Csv {
                dim, labels, header, ..
            } => Some(CsvSchema {
                dim: *dim,
                labels: *labels,
                header: *header,
            }),
            DataSource::Synthetic(_) => None,
        }
    }
}

/// Training strategy of an experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Policy {
    Adaptive,
    Fixed(u32),
    Centralized,
    Async,
}

impl Policy {
    pub fn label(self) -> String {
        match self {
            Policy::Adaptive => "adaptive".into(),
            Policy::Fixed(t) => format!("fixed:{t}"),
            Policy::Centralized => "centralized".into(),
            Policy::Async => "async".into(),
        }
    }
}

impl FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "adaptive" => Ok(Policy::Adaptive),
            "centralized" | "centralised" => Ok(Policy::Centralized),
            "async" | "asynchronous" => Ok(Policy::Async),
            other => {
                let t = other
                    .strip_prefix("fixed:")
                    .or_else(|| other.strip_prefix("fixed"))
                    .ok_or_else(|| Error::field("policy", format!("unknown policy `{s}`")))?;
                let t: u32 = t
                    .trim_start_matches(['(', ':'])
                    .trim_end_matches(')')
                    .parse()
                    .map_err(|_| Error::field("policy", format!("bad fixed period in `{s}`")))?;
                if t == 0 {
                    return Err(Error::field("policy", "fixed period must be at least 1"));
                }
                Ok(Policy::Fixed(t))
            }
        }
    }
}

/// A fully validated experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub model: LossModel,
    pub data: DataSource,
    pub train_fraction: f64,
    pub nodes: usize,
    pub case: Case,
    pub mode: Mode,
    pub policy: Policy,
    pub control: ControlConfig,
    pub resources: ResourceSpec,
    pub init: Init,
    pub repeats: u32,
    pub seed: u64,
    pub parallel: bool,
}

const KNOWN_KEYS: &[&str] = &[
    "name",
    "model.kind",
    "model.lambda",
    "model.clusters",
    "data.source",
    "data.path",
    "data.samples",
    "data.dim",
    "data.seed",
    "data.margin",
    "data.spread",
    "data.offset",
    "data.noise",
    "data.labels",
    "data.header",
    "data.train_fraction",
    "nodes",
    "case",
    "mode",
    "mode.batch_size",
    "policy",
    "control.eta",
    "control.phi",
    "control.gamma",
    "control.tau_max",
    "resources.preset",
    "resources.budget",
    "resources.noise",
    "resources.mode",
    "resources.speeds",
    "resources.types",
    "init",
    "repeats",
    "seed",
    "parallel",
];

/// Per-type keys under `resources.<name>.`
const TYPE_KEYS: &[&str] = &["semantics", "local", "global", "central", "budget"];

struct Fields<'a> {
    raw: &'a RawConfig,
}

impl<'a> Fields<'a> {
    fn get(&self, key: &str) -> Option<&'a str> {
        self.raw.0.get(key).map(String::as_str)
    }

    fn parse<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| Error::field(key, format!("cannot parse `{v}`"))),
        }
    }

    fn opt<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.get(key)
            .map(|v| v.parse().map_err(|_| Error::field(key, format!("cannot parse `{v}`"))))
            .transpose()
    }

    fn bool(&self, key: &str, default: bool) -> Result<bool> {
        match self.get(key).map(|v| v.to_ascii_lowercase()) {
            None => Ok(default),
            Some(v) if matches!(v.as_str(), "true" | "yes" | "1" | "on") => Ok(true),
            Some(v) if matches!(v.as_str(), "false" | "no" | "0" | "off") => Ok(false),
            Some(v) => Err(Error::field(key, format!("expected true/false, got `{v}`"))),
        }
    }

    fn gaussian(&self, key: &str, default: Gaussian) -> Result<Gaussian> {
        let Some(v) = self.get(key) else { return Ok(default) };
        let parts: Vec<&str> = v.split(',').map(str::trim).collect();
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| Error::field(key, format!("expected `mean,std`, got `{v}`")))
        };
        let g = match parts.as_slice() {
            [m] => Gaussian::fixed(num(m)?),
            [m, s] => Gaussian::new(num(m)?, num(s)?),
            _ => return Err(Error::field(key, format!("expected `mean,std`, got `{v}`"))),
        };
        g.validate(key)?;
        Ok(g)
    }
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| Error::field(key, format!("cannot parse `{s}`"))))
        .collect()
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        Self::from_raw(&RawConfig::parse(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_raw(&RawConfig::load(path)?)
    }

    pub fn from_raw(raw: &RawConfig) -> Result<Self> {
        let type_names: Vec<String> = raw
            .0
            .get("resources.types")
            .map(|v| parse_list::<String>("resources.types", v))
            .transpose()?
            .unwrap_or_default();
        for key in raw.0.keys() {
            let known = KNOWN_KEYS.contains(&key.as_str())
                || key
                    .strip_prefix("resources.")
                    .and_then(|rest| rest.split_once('.'))
                    .is_some_and(|(name, field)| type_names.iter().any(|n| n == name) && TYPE_KEYS.contains(&field));
            if !known {
                return Err(Error::field(key.clone(), "unknown key"));
            }
        }
        let f = Fields { raw };

        let seed: u64 = f.parse("seed", 1)?;
        let kind: ModelKind = f.parse("model.kind", ModelKind::SquaredSvm)?;
        let model = match kind {
            ModelKind::SquaredSvm => LossModel::svm(f.parse("model.lambda", 0.01)?)
                .map_err(|_| Error::field("model.lambda", "must be positive and finite"))?,
            ModelKind::LinearRegression => LossModel::LinearRegression,
            ModelKind::KMeans => LossModel::kmeans(f.parse("model.clusters", 4)?)
                .map_err(|_| Error::field("model.clusters", "must be at least 1"))?,
        };

        let source = f.get("data.source").unwrap_or("synthetic").to_ascii_lowercase();
        let data = match source.as_str() {
            "synthetic" => {
                let mut spec = SyntheticSpec::new(kind, f.parse("data.samples", 1000)?, f.parse("data.dim", 10)?, 0);
                spec.seed = f.parse("data.seed", seed)?;
                spec.margin = f.parse("data.margin", spec.margin)?;
                spec.spread = f.parse("data.spread", spec.spread)?;
                spec.offset = f.parse("data.offset", spec.offset)?;
                spec.noise = f.parse("data.noise", spec.noise)?;
                if let ModelKind::KMeans = kind {
                    spec.blobs = f.parse("model.clusters", spec.blobs)?;
                }
                DataSource::Synthetic(spec)
            }
            "csv" => {
                let path = f
                    .get("data.path")
                    .ok_or_else(|| Error::field("data.path", "required for csv data"))?;
                let labels = match f.get("data.labels").unwrap_or(match kind {
                    ModelKind::SquaredSvm => "discrete",
                    ModelKind::LinearRegression => "continuous",
                    ModelKind::KMeans => "absent",
                }) {
                    "discrete" => LabelKind::Discrete,
                    "continuous" => LabelKind::Continuous,
                    "absent" | "none" => LabelKind::Absent,
                    other => return Err(Error::field("data.labels", format!("unknown label kind `{other}`"))),
                };
                DataSource::Csv {
                    path: PathBuf::from(path),
                    dim: f
                        .opt("data.dim")?
                        .ok_or_else(|| Error::field("data.dim", "required for csv data"))?,
                    labels,
                    header: f.bool("data.header", false)?,
                }
            }
            other => return Err(Error::field("data.source", format!("unknown source `{other}`"))),
        };
        let train_fraction: f64 = f.parse("data.train_fraction", 0.8)?;
        if !(train_fraction > 0.0 && train_fraction <= 1.0) {
            return Err(Error::field("data.train_fraction", "must be in (0, 1]"));
        }

        let nodes: usize = f.parse("nodes", 5)?;
        if nodes == 0 {
            return Err(Error::field("nodes", "must be at least 1"));
        }
        let case_idx: u8 = f.parse("case", 1)?;
        let case = Case::from_index(case_idx).map_err(|_| Error::field("case", "must be 1, 2, 3 or 4"))?;

        let mode = match f.get("mode").unwrap_or("sgd").to_ascii_lowercase().as_str() {
            "dgd" => Mode::Dgd,
            "sgd" => {
                let batch_size: usize = f.parse("mode.batch_size", 20)?;
                if batch_size == 0 {
                    return Err(Error::field("mode.batch_size", "must be at least 1"));
                }
                Mode::Sgd { batch_size }
            }
            other => return Err(Error::field("mode", format!("expected sgd or dgd, got `{other}`"))),
        };
        let policy: Policy = f.get("policy").unwrap_or("adaptive").parse()?;

        let defaults = ControlConfig::default();
        let control = ControlConfig {
            eta: f.parse("control.eta", defaults.eta)?,
            phi: f.parse("control.phi", defaults.phi)?,
            gamma: f.parse("control.gamma", defaults.gamma)?,
            tau_max: f.parse("control.tau_max", defaults.tau_max)?,
        };
        control.validate()?;

        let resources = build_resources(&f, &type_names, mode, case)?;

        let init = match f.get("init").unwrap_or("zero").to_ascii_lowercase().as_str() {
            "zero" => Init::Zero,
            s if s.starts_with("gaussian") => {
                let std = match s.strip_prefix("gaussian").unwrap().strip_prefix(':') {
                    Some(v) => v
                        .parse()
                        .map_err(|_| Error::field("init", format!("bad std in `{s}`")))?,
                    None => 1.0,
                };
                if !(std >= 0.0) {
                    return Err(Error::field("init", "std must be non-negative"));
                }
                Init::Gaussian { std }
            }
            other => {
                return Err(Error::field(
                    "init",
                    format!("expected zero or gaussian[:std], got `{other}`"),
                ))
            }
        };
        let repeats: u32 = f.parse("repeats", 1)?;
        if repeats == 0 {
            return Err(Error::field("repeats", "must be at least 1"));
        }
        let cfg = Self {
            name: f.get("name").unwrap_or("experiment").to_string(),
            model,
            data,
            train_fraction,
            nodes,
            case,
            mode,
            policy,
            control,
            resources,
            init,
            repeats,
            seed,
            parallel: f.bool("parallel", false)?,
        };
        Ok(cfg)
    }
}

fn build_resources(f: &Fields, type_names: &[String], mode: Mode, case: Case) -> Result<ResourceSpec> {
    let mode_key = f.get("resources.mode").unwrap_or("simulated").to_ascii_lowercase();
    let meter = match mode_key.as_str() {
        "simulated" => MeterMode::Simulated,
        "measured" => MeterMode::Measured,
        other => return Err(Error::field("resources.mode", format!("unknown mode `{other}`"))),
    };
    let budget: f64 = f.parse("resources.budget", 15.0)?;
    let mut spec = if type_names.is_empty() {
        let preset = f
            .get("resources.preset")
            .map(str::to_ascii_lowercase)
            .unwrap_or_else(|| {
                if matches!(mode, Mode::Dgd) {
                    "dgd".into()
                } else {
                    "sgd".into()
                }
            });
        match preset.as_str() {
            "sgd" => ResourceSpec::sgd_time(budget),
            "dgd" => ResourceSpec::dgd_time(case.index(), budget)?,
            other => return Err(Error::field("resources.preset", format!("unknown preset `{other}`"))),
        }
    } else {
        let (local, global) = match mode {
            Mode::Dgd => (
                dgd_local(case.index()).unwrap_or(SGD_LOCAL),
                dgd_global(case.index()).unwrap_or(SGD_GLOBAL),
            ),
            Mode::Sgd { .. } => (SGD_LOCAL, SGD_GLOBAL),
        };
        let mut types = Vec::new();
        for name in type_names {
            let key = |field: &str| format!("resources.{name}.{field}");
            let semantics: Semantics = f.parse(&key("semantics"), Semantics::Max)?;
            let local = f.gaussian(&key("local"), local)?;
            types.push(ResourceType {
                name: name.clone(),
                semantics,
                local,
                global: f.gaussian(&key("global"), global)?,
                central: f.gaussian(&key("central"), SGD_CENTRAL_LOCAL)?,
                budget: f.parse(&key("budget"), budget)?,
            });
        }
        ResourceSpec::simulated(types)
    };
    spec.mode = meter;
    if let Some(v) = f.get("resources.speeds") {
        spec.speeds = parse_list("resources.speeds", v)?;
    }
    if !f.bool("resources.noise", true)? {
        spec = spec.noise_free();
    }
    spec.validate()?;
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = ExperimentConfig::parse("").unwrap();
        assert_eq!(c.nodes, 5);
        assert_eq!(c.policy, Policy::Adaptive);
        assert_eq!(c.control, ControlConfig::default());
        assert_eq!(c.resources.budgets(), vec![15.0]);
        assert_eq!(c.resources.types[0].local, SGD_LOCAL);
        assert_eq!(c.mode, Mode::Sgd { batch_size: 20 });
    }

    #[test]
    fn full_file() {
        let text = "
            # comment
            model.kind = regression
            data.samples = 300   # trailing comment
            nodes = 3
            case = 3
            mode = dgd
            policy = fixed:7
            control.eta = 0.001
            resources.budget = 4
            resources.noise = false
            init = gaussian:0.5
        ";
        let c = ExperimentConfig::parse(text).unwrap();
        assert_eq!(c.model, LossModel::LinearRegression);
        assert_eq!(c.case, Case::Replicated);
        assert_eq!(c.policy, Policy::Fixed(7));
        assert_eq!(c.resources.types[0].local, Gaussian::fixed(0.095353094));
        assert_eq!(c.init, Init::Gaussian { std: 0.5 });
    }

    #[test]
    fn custom_resource_types() {
        let text = "
            resources.types = time, energy
            resources.energy.semantics = sum
            resources.energy.local = 2, 0.5
            resources.energy.budget = 100
        ";
        let c = ExperimentConfig::parse(text).unwrap();
        assert_eq!(c.resources.len(), 2);
        assert_eq!(c.resources.types[1].semantics, Semantics::Sum);
        assert_eq!(c.resources.types[1].local, Gaussian::new(2.0, 0.5));
        assert_eq!(c.resources.budgets(), vec![15.0, 100.0]);
    }

    #[test]
    fn errors_carry_the_field_path() {
        let bad = [
            ("nodes = 0", "nodes"),
            ("case = 7", "case"),
            ("control.eta = -1", "control.eta"),
            ("policy = fixed:0", "policy"),
            ("model.lambda = abc", "model.lambda"),
            ("bogus.key = 1", "bogus.key"),
            ("resources.speeds = 1,-2", "resources.speeds"),
            ("mode = newton", "mode"),
        ];
        for (text, path) in bad {
            match ExperimentConfig::parse(text) {
                Err(Error::ConfigField { path: p, .. }) => assert_eq!(p, path, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
        assert!(matches!(RawConfig::parse("novalue"), Err(Error::Config(_))));
    }

    #[test]
    fn policies_parse() {
        assert_eq!("fixed(12)".parse::<Policy>().unwrap(), Policy::Fixed(12));
        assert_eq!("async".parse::<Policy>().unwrap(), Policy::Async);
        assert_eq!(Policy::Fixed(3).label().parse::<Policy>().unwrap(), Policy::Fixed(3));
    }

    #[test]
    fn overrides_replace_keys() {
        let mut raw = RawConfig::parse("nodes = 5\ncase = 1").unwrap();
        raw.apply_overrides("case=2  policy=fixed:4").unwrap();
        let c = ExperimentConfig::from_raw(&raw).unwrap();
        assert_eq!((c.case, c.policy), (Case::ByLabel, Policy::Fixed(4)));
        assert!(raw.apply_overrides("oops").is_err());
    }
}
