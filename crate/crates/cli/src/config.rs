//! Config file layout: optional top-level `seed` and `plots`, then one table
//! per subcommand. Unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bandit::BanditConfig;
use crate::design::DesignConfig;
use crate::hardness::HardnessConfig;
use crate::query::QueryConfig;
use crate::rl::RlConfig;
use crate::{invalid, CliError, Result};

#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub seed: Option<u64>,
    pub plots: Option<bool>,
    pub design: Option<DesignConfig>,
    pub bandit: Option<BanditConfig>,
    pub rl: Option<RlConfig>,
    pub query: Option<QueryConfig>,
    pub hardness: Option<HardnessConfig>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CliError::Validation(e.to_string()))
    }
}

pub(crate) fn section_value<T: Serialize>(section: &T) -> Result<toml::Value> {
    toml::Value::try_from(section).map_err(CliError::runtime)
}

pub(crate) fn write_resolved(path: &Path, seed: u64, plots: bool, name: &str, section: toml::Value) -> Result<()> {
    let mut table = toml::Table::new();
    table.insert("seed".into(), toml::Value::Integer(seed as i64));
    table.insert("plots".into(), toml::Value::Boolean(plots));
    table.insert(name.into(), section);
    let text = toml::to_string(&table).map_err(CliError::runtime)?;
    std::fs::write(path, text)?;
    Ok(())
}

pub(crate) fn positive(name: &str, v: usize) -> Result<()> {
    if v == 0 {
        return invalid(format!("{name} must be at least 1"));
    }
    Ok(())
}

pub(crate) fn in_open_unit(name: &str, v: f64) -> Result<()> {
    if !(v > 0.0 && v < 1.0) {
        return invalid(format!("{name} = {v} must lie strictly between 0 and 1"));
    }
    Ok(())
}

pub(crate) fn non_negative(name: &str, v: f64) -> Result<()> {
    if !(v >= 0.0 && v.is_finite()) {
        return invalid(format!("{name} = {v} must be finite and non-negative"));
    }
    Ok(())
}

pub(crate) fn non_empty<T>(name: &str, v: &[T]) -> Result<()> {
    if v.is_empty() {
        return invalid(format!("{name} must list at least one value"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ConfigFile::parse("[design]\nkk = 3\n").unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("kk"), "{err}");
        assert!(ConfigFile::parse("seed = 4\n[query]\n").is_ok());
    }

    #[test]
    fn resolved_echo_parses_back() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("echo.toml");
        let section = section_value(&HardnessConfig::default().resolved().unwrap()).unwrap();
        write_resolved(&path, 9, false, "hardness", section).unwrap();
        let back = ConfigFile::parse(&std::fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!((back.seed, back.plots), (Some(9), Some(false)));
        assert!(back.hardness.is_some());
    }
}
