//! Experiment configuration: a JSON tree whose numeric parameters may be
//! written either as JSON numbers or as decimal strings.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::meanfield::{zero_costate_controls, OptimizeOptions};
use crate::model::{self, AgentModel, IsingModel, IsingParams, SirModel, SirParams, TableModel, TableSpec};

/// A binary64 read from a JSON number or a decimal string, written back as
/// the shortest decimal string that round-trips.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Num(pub f64);

impl Serialize for Num {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.0.to_string())
    }
}

impl<'de> Deserialize<'de> for Num {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct NumVisitor;
        impl Visitor<'_> for NumVisitor {
            type Value = Num;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a number or a decimal string")
            }
            fn visit_f64<E: de::Error>(self, v: f64) -> std::result::Result<Num, E> {
                Ok(Num(v))
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> std::result::Result<Num, E> {
                Ok(Num(v as f64))
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> std::result::Result<Num, E> {
                Ok(Num(v as f64))
            }
            fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<Num, E> {
                v.trim()
                    .parse::<f64>()
                    .map(Num)
                    .map_err(|_| E::invalid_value(de::Unexpected::Str(v), &self))
            }
        }
        d.deserialize_any(NumVisitor)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// `ising`, `sir` or `custom-file`.
    pub name: String,
    #[serde(default)]
    pub params: BTreeMap<String, Num>,
    /// Table-model JSON for `custom-file`, relative to the config file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<PathBuf>,
}

/// Initial fluctuation covariance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitialCovariance {
    /// Counts are the rounded `N·S0`; `Π0 = 0`.
    #[default]
    Deterministic,
    /// Counts are multinomial; `Π0 = diag(S0) − S0 S0ᵀ`.
    Multinomial,
}

/// Where the filter and Riccati coefficients come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CoefficientSource {
    /// Linearize the model along the mean-field solution.
    #[default]
    Extracted,
    /// Ising only: the reduced scalar coefficients in their textbook form,
    /// with process noise 2Δt.
    IsingPrinted,
}

fn default_n_agents() -> u64 {
    10_000
}

fn default_replicas() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub dt: Num,
    pub n_steps: usize,
    pub s0: Vec<Num>,
    #[serde(default)]
    pub pi0: InitialCovariance,
    #[serde(default)]
    pub optimizer: OptimizeOptions,
    #[serde(default)]
    pub lqg_coefficients: CoefficientSource,
    #[serde(default = "default_n_agents")]
    pub n_agents: u64,
    #[serde(default)]
    pub n_list: Vec<u64>,
    #[serde(default = "default_replicas")]
    pub replicas: usize,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn dt(&self) -> f64 {
        self.dt.0
    }

    pub fn s0(&self) -> Vec<f64> {
        self.s0.iter().map(|x| x.0).collect()
    }

    /// Builds the named model. `base_dir` resolves a relative model file.
    pub fn build_model(&self, base_dir: &Path) -> Result<Box<dyn AgentModel>> {
        let m = &self.model;
        match m.name.as_str() {
            "ising" => {
                let p = Params::new(&m.params, &["beta", "field", "coupling", "obs_rate"], "ising")?;
                Ok(Box::new(IsingModel::new(IsingParams {
                    beta: p.get("beta")?,
                    field: p.get("field")?,
                    coupling: p.get("coupling")?,
                    obs_rate: p.get("obs_rate")?,
                })?))
            }
            "sir" => {
                let names = ["base_rate", "recovery", "test_rate", "infection_cost", "control_cost"];
                let p = Params::new(&m.params, &names, "sir")?;
                Ok(Box::new(SirModel::new(SirParams {
                    base_rate: p.get("base_rate")?,
                    recovery: p.get("recovery")?,
                    test_rate: p.get("test_rate")?,
                    infection_cost: p.get("infection_cost")?,
                    control_cost: p.get("control_cost")?,
                })?))
            }
            "custom-file" => {
                Params::new(&m.params, &[], "custom-file")?;
                let file = m.file.as_ref().ok_or_else(|| Error::MissingParam("model.file".into()))?;
                let path = base_dir.join(file);
                let text = std::fs::read_to_string(&path)
                    .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
                let spec: TableSpec =
                    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
                Ok(Box::new(TableModel::new(spec)?))
            }
            other => Err(Error::InvalidParam {
                name: "model.name".into(),
                reason: format!("unknown model `{other}` (expected ising, sir or custom-file)"),
            }),
        }
    }

    /// Checks that the config is usable with `model` before anything runs.
    pub fn validate(&self, model: &dyn AgentModel) -> Result<()> {
        let l = model.dims().states;
        if !(self.dt() > 0.0) || !self.dt().is_finite() {
            return Err(Error::InvalidParam {
                name: "dt".into(),
                reason: format!("must be positive, got {}", self.dt()),
            });
        }
        if self.n_steps == 0 {
            return Err(Error::InvalidParam {
                name: "n_steps".into(),
                reason: "must be at least 1".into(),
            });
        }
        if self.s0.len() != l {
            return Err(Error::InvalidParam {
                name: "s0".into(),
                reason: format!("has {} entries, model has {l} states", self.s0.len()),
            });
        }
        let s0 = self.s0();
        model::check_simplex(&s0, l)?;
        let a0 = zero_costate_controls(model, &s0, self.dt(), 1)?;
        let (state, rate) = model::max_exit_rate(model, &s0, a0[0].as_slice())?;
        if rate * self.dt() >= 1.0 {
            return Err(Error::StepTooLarge {
                step: 0,
                state,
                value: rate * self.dt(),
            });
        }
        if self.lqg_coefficients == CoefficientSource::IsingPrinted && self.model.name != "ising" {
            return Err(Error::InvalidParam {
                name: "lqg_coefficients".into(),
                reason: "ising-printed requires the ising model".into(),
            });
        }
        Ok(())
    }

    /// Initial fluctuation covariance for `pi0`.
    pub fn initial_covariance(&self) -> DMatrix<f64> {
        let s = self.s0();
        let l = s.len();
        match self.pi0 {
            InitialCovariance::Deterministic => DMatrix::zeros(l, l),
            InitialCovariance::Multinomial => DMatrix::from_fn(l, l, |i, j| if i == j { s[i] } else { 0.0 } - s[i] * s[j]),
        }
    }
}

struct Params<'a> {
    map: &'a BTreeMap<String, Num>,
}

impl<'a> Params<'a> {
    fn new(map: &'a BTreeMap<String, Num>, known: &[&str], model: &str) -> Result<Self> {
        if let Some(k) = map.keys().find(|k| !known.contains(&k.as_str())) {
            return Err(Error::InvalidParam {
                name: format!("model.params.{k}"),
                reason: format!("unknown parameter for model {model}"),
            });
        }
        Ok(Self { map })
    }

    fn get(&self, name: &str) -> Result<f64> {
        self.map
            .get(name)
            .map(|n| n.0)
            .ok_or_else(|| Error::MissingParam(format!("model.params.{name}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SIR: &str = r#"{
        "model": {"name": "sir", "params": {
            "base_rate": "0.87", "recovery": 0.217, "test_rate": "0.3333333333333333",
            "infection_cost": 8000, "control_cost": "100"}},
        "dt": "1", "n_steps": 100, "s0": ["0.99", "0.01", 0]
    }"#;

    #[test]
    fn numbers_and_strings_parse_alike() {
        let c = ExperimentConfig::from_json(SIR).unwrap();
        assert_eq!(c.model.params["base_rate"].0, 0.87);
        assert_eq!(c.model.params["infection_cost"].0, 8000.0);
        assert_eq!(c.s0(), vec![0.99, 0.01, 0.0]);
        assert_eq!(c.n_agents, 10_000);
        assert_eq!(c.pi0, InitialCovariance::Deterministic);
    }

    #[test]
    fn round_trip_is_identity() {
        let c = ExperimentConfig::from_json(SIR).unwrap();
        let again = ExperimentConfig::from_json(&c.to_json().unwrap()).unwrap();
        assert_eq!(c, again);
        let twice = ExperimentConfig::from_json(&again.to_json().unwrap()).unwrap();
        assert_eq!(again.to_json().unwrap(), twice.to_json().unwrap());
    }

    #[test]
    fn round_trip_preserves_awkward_floats() {
        let mut c = ExperimentConfig::from_json(SIR).unwrap();
        c.dt = Num(0.1 + 0.2);
        c.model.params.insert("recovery".into(), Num(1.0 / 3.0));
        let again = ExperimentConfig::from_json(&c.to_json().unwrap()).unwrap();
        assert_eq!(again.dt.0.to_bits(), (0.1f64 + 0.2).to_bits());
        assert_eq!(again.model.params["recovery"].0.to_bits(), (1.0f64 / 3.0).to_bits());
    }

    #[test]
    fn missing_param_is_named() {
        let text = SIR.replace(r#", "control_cost": "100""#, "");
        let c = ExperimentConfig::from_json(&text).unwrap();
        let err = c.build_model(Path::new(".")).err().unwrap();
        assert!(matches!(&err, Error::MissingParam(n) if n == "model.params.control_cost"), "{err}");
    }

    #[test]
    fn unknown_param_and_field_rejected() {
        let text = SIR.replace(r#""recovery": 0.217"#, r#""recovery": 0.217, "gamma": 1"#);
        let c = ExperimentConfig::from_json(&text).unwrap();
        assert!(matches!(c.build_model(Path::new(".")), Err(Error::InvalidParam { .. })));
        let text = SIR.replace(r#""n_steps": 100"#, r#""n_steps": 100, "nsteps": 3"#);
        let err = ExperimentConfig::from_json(&text).err().unwrap().to_string();
        assert!(err.contains("nsteps"), "{err}");
    }

    #[test]
    fn bad_number_reports_position() {
        let text = SIR.replace(r#""dt": "1""#, r#""dt": "one""#);
        let err = ExperimentConfig::from_json(&text).err().unwrap().to_string();
        assert!(err.contains("line"), "{err}");
    }

    #[test]
    fn validate_checks_step_size_and_simplex() {
        let c = ExperimentConfig::from_json(SIR).unwrap();
        let m = c.build_model(Path::new(".")).unwrap();
        c.validate(m.as_ref()).unwrap();
        let mut big = c.clone();
        big.dt = Num(10.0);
        assert!(matches!(big.validate(m.as_ref()), Err(Error::StepTooLarge { .. })));
        let mut off = c.clone();
        off.s0[0] = Num(0.5);
        assert!(off.validate(m.as_ref()).is_err());
        let mut printed = c;
        printed.lqg_coefficients = CoefficientSource::IsingPrinted;
        assert!(printed.validate(m.as_ref()).is_err());
    }

    #[test]
    fn multinomial_covariance_rows_sum_to_zero() {
        let mut c = ExperimentConfig::from_json(SIR).unwrap();
        c.pi0 = InitialCovariance::Multinomial;
        let p = c.initial_covariance();
        for i in 0..3 {
            assert!(p.row(i).sum().abs() < 1e-15);
        }
        assert!((p[(0, 0)] - 0.99 * 0.01).abs() < 1e-15);
    }
}
