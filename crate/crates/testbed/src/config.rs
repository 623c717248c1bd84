//! Deployment config file (TOML).

use std::path::{Path, PathBuf};

use chrono::Duration;
use nusa_core::als::{AlsConfig, Enrollment, StoreSpec};
use nusa_core::crypto::DEFAULT_WORK_FACTOR;
use serde::{Deserialize, Serialize};

use crate::{HarnessError, HarnessResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    /// Holds `deployment/` (server state) and `harness/` (ground truth,
    /// terminal databases).
    pub state_dir: PathBuf,
    #[serde(default = "default_listen")]
    pub listen: String,
    /// Stores named `ehr-1` .. `ehr-N`, all editable, unless `stores` is given.
    #[serde(default = "default_ehr_count")]
    pub ehr_count: usize,
    #[serde(default)]
    pub stores: Vec<StoreSpec>,
    #[serde(default = "default_work_factor")]
    pub work_factor: u32,
    #[serde(default = "default_session_minutes")]
    pub session_lifetime_minutes: i64,
    #[serde(default = "default_salt")]
    pub salt: String,
    #[serde(default)]
    pub sweep_interval_secs: Option<u64>,
    #[serde(default)]
    pub principals: Vec<Enrollment>,
}

fn default_listen() -> String {
    "127.0.0.1:7451".into()
}

fn default_ehr_count() -> usize {
    1
}

fn default_work_factor() -> u32 {
    DEFAULT_WORK_FACTOR
}

fn default_session_minutes() -> i64 {
    30
}

fn default_salt() -> String {
    "nusa-deployment-salt".into()
}

impl Config {
    pub fn parse(text: &str) -> HarnessResult<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| HarnessError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> HarnessResult<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        Self::parse(&text)
    }

    fn validate(&self) -> HarnessResult<()> {
        if self.stores.is_empty() && self.ehr_count == 0 {
            return Err(HarnessError::Invalid("ehr_count must be at least 1".into()));
        }
        if self.work_factor == 0 {
            return Err(HarnessError::Invalid("work_factor must be at least 1".into()));
        }
        if self.session_lifetime_minutes <= 0 {
            return Err(HarnessError::Invalid("session lifetime must be positive".into()));
        }
        if self.sweep_interval_secs == Some(0) {
            return Err(HarnessError::Invalid("sweep interval must be positive".into()));
        }
        Ok(())
    }

    pub fn store_specs(&self) -> Vec<StoreSpec> {
        if !self.stores.is_empty() {
            return self.stores.clone();
        }
        (1..=self.ehr_count)
            .map(|i| StoreSpec {
                name: format!("ehr-{i}"),
                editable: true,
            })
            .collect()
    }

    pub fn als_config(&self, seed: Option<u64>) -> AlsConfig {
        AlsConfig {
            session_lifetime: Duration::minutes(self.session_lifetime_minutes),
            salt: self.salt.as_bytes().to_vec(),
            work_factor: self.work_factor,
            stores: self.store_specs(),
            seed,
        }
    }

    pub fn deployment_dir(&self) -> PathBuf {
        self.state_dir.join("deployment")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_fill_in() {
        let cfg = Config::parse("state_dir = \"/tmp/x\"\nehr_count = 3\n").unwrap();
        assert_eq!(cfg.store_specs().len(), 3);
        assert_eq!(cfg.store_specs()[2].name, "ehr-3");
        assert_eq!(cfg.work_factor, DEFAULT_WORK_FACTOR);
        assert_eq!(cfg.als_config(None).session_lifetime, Duration::minutes(30));
    }

    #[test]
    fn explicit_stores_and_principals() {
        let cfg = Config::parse(
            r#"
state_dir = "/srv/nusa"
work_factor = 1024
session_lifetime_minutes = 10

[[stores]]
name = "hospital"

[[stores]]
name = "lab-archive"
editable = false

[[principals]]
principal_id = "dr-a"
kind = "MD"
credential = "s3cret"
"#,
        )
        .unwrap();
        assert_eq!(cfg.store_specs().len(), 2);
        assert!(!cfg.store_specs()[1].editable);
        assert_eq!(cfg.principals[0].principal_id, "dr-a");
        assert_eq!(cfg.deployment_dir(), PathBuf::from("/srv/nusa/deployment"));
    }

    #[test]
    fn rejects_bad_values() {
        assert!(matches!(Config::parse("state_dir = 3"), Err(HarnessError::Parse(_))));
        assert!(matches!(
            Config::parse("state_dir = \"x\"\nsweep_interval_secs = 0"),
            Err(HarnessError::Invalid(_))
        ));
        assert!(matches!(
            Config::parse("state_dir = \"x\"\nbogus = 1"),
            Err(HarnessError::Parse(_))
        ));
    }
}
