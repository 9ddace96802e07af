use std::path::Path;

use serde::{Deserialize, Serialize};

use semired::model::{Coefficients, GridConfig, InitialConfig, ModelConfig, PotentialConfig, TimeConfig};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("cannot parse {path}: {source}")]
    Parse { path: String, source: toml::de::Error },
    #[error("invalid tolerance {name} = {value}")]
    Tolerance { name: &'static str, value: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tolerances {
    #[serde(default = "default_inner_tol")]
    pub inner_tol: f64,
    #[serde(default = "default_step_tol")]
    pub step_tol: f64,
}

fn default_inner_tol() -> f64 {
    1e-12
}

fn default_step_tol() -> f64 {
    1e-10
}

impl Default for Tolerances {
    fn default() -> Self {
        Self { inner_tol: default_inner_tol(), step_tol: default_step_tol() }
    }
}

impl Tolerances {
    pub fn with_overrides(mut self, inner: Option<f64>, step: Option<f64>) -> Result<Self, ConfigError> {
        if let Some(v) = inner {
            self.inner_tol = v;
        }
        if let Some(v) = step {
            self.step_tol = v;
        }
        for (name, value) in [("inner_tol", self.inner_tol), ("step_tol", self.step_tol)] {
            if !(value > 0.0 && value.is_finite()) {
                return Err(ConfigError::Tolerance { name, value });
            }
        }
        Ok(self)
    }
}

/// On-disk layout. Every model section is mandatory; only `[tolerances]`
/// falls back to defaults.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    grid: GridConfig,
    coefficients: Coefficients,
    potential: PotentialConfig,
    time: TimeConfig,
    initial: InitialConfig,
    #[serde(default)]
    tolerances: Tolerances,
}

pub fn parse(text: &str, path: &str) -> Result<(ModelConfig, Tolerances), ConfigError> {
    let f: FileConfig = toml::from_str(text).map_err(|source| ConfigError::Parse { path: path.into(), source })?;
    let cfg = ModelConfig {
        grid: f.grid,
        coefficients: f.coefficients,
        potential: f.potential,
        time: f.time,
        initial: f.initial,
    };
    Ok((cfg, f.tolerances))
}

pub fn load(path: &Path) -> Result<(ModelConfig, Tolerances), ConfigError> {
    let shown = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: shown.clone(), source })?;
    parse(&text, &shown)
}

#[cfg(test)]
mod tests {
    use super::*;

    const DEFAULT: &str = include_str!("../../../configs/default.toml");

    #[test]
    fn shipped_config_is_the_library_default() {
        let (cfg, tol) = parse(DEFAULT, "default.toml").unwrap();
        assert_eq!(cfg, ModelConfig::default());
        assert_eq!(tol, Tolerances::default());
    }

    #[test]
    fn missing_section_is_an_error() {
        let text = DEFAULT.replace("[initial]", "[unused]");
        assert!(parse(&text, "x").is_err());
    }

    #[test]
    fn missing_key_is_an_error() {
        let text: String = DEFAULT.lines().filter(|l| !l.starts_with("gamma0")).map(|l| format!("{l}\n")).collect();
        assert!(parse(&text, "x").is_err());
    }

    #[test]
    fn tolerance_overrides() {
        let t = Tolerances::default().with_overrides(Some(1e-9), None).unwrap();
        assert_eq!((t.inner_tol, t.step_tol), (1e-9, 1e-10));
        assert!(Tolerances::default().with_overrides(None, Some(-1.0)).is_err());
    }
}
