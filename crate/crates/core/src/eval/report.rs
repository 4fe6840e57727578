use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

/// Named metric values for one evaluation run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metrics: BTreeMap<String, f64>,
    pub samples: usize,
    pub config_hash: String,
}

impl MetricReport {
    pub fn new(samples: usize, config_hash: impl Into<String>) -> Self {
        Self {
            metrics: BTreeMap::new(),
            samples,
            config_hash: config_hash.into(),
        }
    }

    pub fn insert(&mut self, name: &str, value: f64) {
        self.metrics.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::invalid("metric report over zero samples"));
        }
        if let Some((k, _)) = self.metrics.iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite(if k.is_empty() { "metric" } else { "metric value" }));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        self.validate()?;
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// `metric,value` lines after a header.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        for (k, v) in &self.metrics {
            s.push_str(&format!("{k},{v}\n"));
        }
        s.push_str(&format!("samples,{}\n", self.samples));
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }
}

/// Hex SHA-256 of a serializable value's JSON form.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(value)?)))
}
