//! Algorithm/hyperparameter configuration spaces.
//!
//! A space holds exactly four algorithms (codes 0..=3), each with four
//! hyperparameter slots. Slot 1 is always `learning_rate` and slot 2 always
//! `gamma`. Configurations are encoded for the surrogate as a [`FeatureVector`]
//! `[algorithm_code, z1, z2, z3, z4]` with every `z` normalized to `[0, 1]`.

use std::fmt;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const N_SLOTS: usize = 4;
pub const N_FEATURES: usize = N_SLOTS + 1;

pub const DEFAULT_SPACE_TOML: &str = include_str!("../data/default_space.toml");

#[derive(Debug, Error)]
pub enum SpaceError {
    #[error("failed to read space file: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed space file: {0}")]
    Parse(String),
    #[error("invalid `{field}`: {message}")]
    Validation { field: String, message: String },
    #[error("value {value} for `{slot}` is outside its range")]
    OutOfRange { slot: String, value: f64 },
    #[error("unknown algorithm code {0}")]
    UnknownAlgorithm(i64),
}

fn invalid(field: impl Into<String>, message: impl Into<String>) -> SpaceError {
    SpaceError::Validation { field: field.into(), message: message.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Log,
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Domain {
    Continuous { scale: Scale, low: f64, high: f64 },
    Choice { choices: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperparameterSpec {
    pub name: String,
    #[serde(flatten)]
    pub domain: Domain,
}

impl HyperparameterSpec {
    fn validate(&self, path: &str) -> Result<(), SpaceError> {
        if self.name.trim().is_empty() {
            return Err(invalid(format!("{path}.name"), "must not be empty"));
        }
        match &self.domain {
            Domain::Continuous { scale, low, high } => {
                if !low.is_finite() || !high.is_finite() {
                    return Err(invalid(format!("{path}.low/high"), "bounds must be finite"));
                }
                if low >= high {
                    return Err(invalid(format!("{path}.low"), format!("low ({low}) must be strictly below high ({high})")));
                }
                if *scale == Scale::Log && *low <= 0.0 {
                    return Err(invalid(format!("{path}.low"), "log scale requires low > 0"));
                }
            }
            Domain::Choice { choices } => {
                if choices.len() < 2 {
                    return Err(invalid(format!("{path}.choices"), "need at least 2 choices"));
                }
                if choices.iter().any(|c| !c.is_finite()) {
                    return Err(invalid(format!("{path}.choices"), "choices must be finite"));
                }
                if choices.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(invalid(format!("{path}.choices"), "choices must be strictly increasing"));
                }
            }
        }
        Ok(())
    }

    /// Maps a uniform draw `u ∈ [0, 1)` to a value by the slot's scale.
    pub fn value_at(&self, u: f64) -> f64 {
        match &self.domain {
            Domain::Continuous { scale: Scale::Log, low, high } => {
                let (a, b) = (low.ln(), high.ln());
                (a + u * (b - a)).exp().clamp(*low, *high)
            }
            Domain::Continuous { scale: Scale::Linear, low, high } => (low + u * (high - low)).clamp(*low, *high),
            Domain::Choice { choices } => {
                let idx = ((u * choices.len() as f64).floor() as usize).min(choices.len() - 1);
                choices[idx]
            }
        }
    }

    pub fn contains(&self, v: f64) -> bool {
        match &self.domain {
            Domain::Continuous { low, high, .. } => v >= *low && v <= *high,
            Domain::Choice { choices } => choices.contains(&v),
        }
    }

    pub fn normalize(&self, v: f64) -> Result<f64, SpaceError> {
        if !self.contains(v) {
            return Err(SpaceError::OutOfRange { slot: self.name.clone(), value: v });
        }
        Ok(match &self.domain {
            Domain::Continuous { scale: Scale::Log, low, high } => {
                let (a, b) = (low.ln(), high.ln());
                ((v.ln() - a) / (b - a)).clamp(0.0, 1.0)
            }
            Domain::Continuous { scale: Scale::Linear, low, high } => ((v - low) / (high - low)).clamp(0.0, 1.0),
            Domain::Choice { choices } => {
                let idx = choices.iter().position(|&c| c == v).expect("checked by contains");
                idx as f64 / (choices.len() - 1) as f64
            }
        })
    }

    pub fn denormalize(&self, z: f64) -> f64 {
        let z = z.clamp(0.0, 1.0);
        match &self.domain {
            Domain::Continuous { scale: Scale::Log, low, high } => {
                let (a, b) = (low.ln(), high.ln());
                (a + z * (b - a)).exp().clamp(*low, *high)
            }
            Domain::Continuous { scale: Scale::Linear, low, high } => (low + z * (high - low)).clamp(*low, *high),
            Domain::Choice { choices } => {
                let idx = (z * (choices.len() - 1) as f64).round() as usize;
                choices[idx.min(choices.len() - 1)]
            }
        }
    }

    pub fn is_choice(&self) -> bool {
        matches!(self.domain, Domain::Choice { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlgorithmSpec {
    #[serde(rename = "id")]
    pub algorithm_id: u8,
    pub name: String,
    pub hyperparameters: Vec<HyperparameterSpec>,
}

impl AlgorithmSpec {
    pub fn slot(&self, s: usize) -> &HyperparameterSpec {
        &self.hyperparameters[s]
    }

    pub fn slot_names(&self) -> [&str; N_SLOTS] {
        std::array::from_fn(|s| self.hyperparameters[s].name.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigurationSpace {
    pub schema_version: u32,
    pub algorithms: Vec<AlgorithmSpec>,
}

impl ConfigurationSpace {
    pub fn default_space() -> Self {
        Self::from_toml_str(DEFAULT_SPACE_TOML).expect("bundled space is valid")
    }

    pub fn from_toml_str(text: &str) -> Result<Self, SpaceError> {
        let space: ConfigurationSpace = toml::from_str(text).map_err(|e| SpaceError::Parse(e.to_string()))?;
        space.validate()?;
        Ok(space)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("space serializes")
    }

    pub fn validate(&self) -> Result<(), SpaceError> {
        if self.schema_version != 1 {
            return Err(invalid("schema_version", format!("unsupported version {}", self.schema_version)));
        }
        let mut ids: Vec<u8> = self.algorithms.iter().map(|a| a.algorithm_id).collect();
        ids.sort_unstable();
        if ids != [0, 1, 2, 3] {
            return Err(invalid("algorithms", "algorithm_id set must be {0,1,2,3}"));
        }
        for alg in &self.algorithms {
            let path = format!("algorithms[{}]", alg.algorithm_id);
            if alg.hyperparameters.len() != N_SLOTS {
                return Err(invalid(
                    format!("{path}.hyperparameters"),
                    format!("expected exactly {N_SLOTS} hyperparameters, found {}", alg.hyperparameters.len()),
                ));
            }
            for (s, hp) in alg.hyperparameters.iter().enumerate() {
                hp.validate(&format!("{path}.hyperparameters[{s}]"))?;
            }
            if alg.hyperparameters[0].name != "learning_rate" {
                return Err(invalid(format!("{path}.hyperparameters[0].name"), "slot 1 must be learning_rate"));
            }
            if alg.hyperparameters[1].name != "gamma" {
                return Err(invalid(format!("{path}.hyperparameters[1].name"), "slot 2 must be gamma"));
            }
        }
        Ok(())
    }

    pub fn algorithm(&self, algorithm_id: u8) -> Result<&AlgorithmSpec, SpaceError> {
        self.algorithms.iter().find(|a| a.algorithm_id == algorithm_id).ok_or(SpaceError::UnknownAlgorithm(algorithm_id as i64))
    }

    /// Draws one configuration for `algorithm_id`, one uniform per slot in slot order.
    pub fn sample<R: Rng + ?Sized>(&self, algorithm_id: u8, rng: &mut R) -> Result<Configuration, SpaceError> {
        let alg = self.algorithm(algorithm_id)?;
        let values = std::array::from_fn(|s| {
            let u: f64 = rng.gen();
            alg.slot(s).value_at(u)
        });
        Ok(Configuration { algorithm_id, values })
    }

    pub fn validate_config(&self, config: &Configuration) -> Result<(), SpaceError> {
        let alg = self.algorithm(config.algorithm_id)?;
        for (s, &v) in config.values.iter().enumerate() {
            if !alg.slot(s).contains(v) {
                return Err(SpaceError::OutOfRange { slot: alg.slot(s).name.clone(), value: v });
            }
        }
        Ok(())
    }

    pub fn encode(&self, config: &Configuration) -> Result<FeatureVector, SpaceError> {
        let alg = self.algorithm(config.algorithm_id)?;
        let mut out = [0.0; N_FEATURES];
        out[0] = config.algorithm_id as f64;
        for s in 0..N_SLOTS {
            out[s + 1] = alg.slot(s).normalize(config.values[s])?;
        }
        Ok(FeatureVector(out))
    }

    pub fn decode(&self, fv: &FeatureVector) -> Result<Configuration, SpaceError> {
        let code = fv.0[0];
        if code.fract() != 0.0 || !(0.0..=3.0).contains(&code) {
            return Err(SpaceError::UnknownAlgorithm(code as i64));
        }
        let algorithm_id = code as u8;
        let alg = self.algorithm(algorithm_id)?;
        let values = std::array::from_fn(|s| alg.slot(s).denormalize(fv.0[s + 1]));
        Ok(Configuration { algorithm_id, values })
    }

    /// Feature labels for the global (5-feature) encoding.
    pub fn global_feature_names(&self) -> Vec<String> {
        ["algorithm", "learning_rate", "gamma", "hp3", "hp4"].map(String::from).to_vec()
    }
}

pub fn load_space(path: &Path) -> Result<ConfigurationSpace, SpaceError> {
    let text = std::fs::read_to_string(path)?;
    ConfigurationSpace::from_toml_str(&text)
}

/// θ: an algorithm code plus its four hyperparameter values in slot order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Configuration {
    pub algorithm_id: u8,
    pub values: [f64; N_SLOTS],
}

impl Configuration {
    pub fn learning_rate(&self) -> f64 {
        self.values[0]
    }

    pub fn gamma(&self) -> f64 {
        self.values[1]
    }
}

impl fmt::Display for Configuration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "alg={} [", self.algorithm_id)?;
        for (i, v) in self.values.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{v:.6}")?;
        }
        f.write_str("]")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector(pub [f64; N_FEATURES]);

impl FeatureVector {
    pub fn algorithm_code(&self) -> f64 {
        self.0[0]
    }

    /// The four normalized slot values, without the algorithm code.
    pub fn slots(&self) -> [f64; N_SLOTS] {
        [self.0[1], self.0[2], self.0[3], self.0[4]]
    }
}
