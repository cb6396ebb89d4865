//! Machine-readable run reports and loss curves.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::config::{sha256_hex, RunConfig};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub unix_time: u64,
}

/// Report schema. Everything except `metadata` is a pure function of the
/// inputs, so two runs with the same inputs agree outside that field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub task: String,
    pub dataset_id: String,
    pub seed: u64,
    pub metrics: BTreeMap<String, Value>,
    pub config_hash: String,
    pub tool_version: String,
    pub metadata: ReportMetadata,
}

impl Report {
    pub fn new(task: &str, dataset_id: &str, config: &RunConfig) -> Self {
        let unix_time = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        Report {
            task: task.to_string(),
            dataset_id: dataset_id.to_string(),
            seed: config.train.seed,
            metrics: BTreeMap::new(),
            config_hash: config.config_hash(),
            tool_version: TOOL_VERSION.to_string(),
            metadata: ReportMetadata { unix_time },
        }
    }

    /// Non-finite values are stored as `null`.
    pub fn metric(&mut self, key: &str, value: f64) -> &mut Self {
        let v = serde_json::Number::from_f64(value).map(Value::Number).unwrap_or(Value::Null);
        self.metrics.insert(key.to_string(), v);
        self
    }

    pub fn flag(&mut self, key: &str, value: bool) -> &mut Self {
        self.metrics.insert(key.to_string(), Value::Bool(value));
        self
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.metrics.get(key).and_then(Value::as_f64)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serialises");
        s.push('\n');
        s
    }

    /// The JSON text with `metadata` removed; identical inputs give
    /// identical bytes.
    pub fn stable_json(&self) -> String {
        let mut v = serde_json::to_value(self).expect("report serialises");
        if let Value::Object(m) = &mut v {
            m.remove("metadata");
        }
        serde_json::to_string_pretty(&v).expect("report serialises")
    }

    /// Aligned `metric  value` lines for terminals.
    pub fn pretty(&self) -> String {
        let width = self.metrics.keys().map(String::len).max().unwrap_or(0).max(6);
        let mut out = format!("task     {}\ndataset  {}\nseed     {}\n", self.task, self.dataset_id, self.seed);
        for (k, v) in &self.metrics {
            let shown = match v {
                Value::Number(n) => format!("{:.6}", n.as_f64().unwrap_or(f64::NAN)),
                other => other.to_string(),
            };
            let _ = writeln!(out, "  {k:<width$}  {shown}");
        }
        out
    }
}

/// Identifier of a dataset: SHA-256 of its bytes.
pub fn dataset_id(bytes: &[u8]) -> String {
    sha256_hex(bytes)
}

/// `epoch,loss` CSV with a header line.
pub fn loss_curve_csv(losses: &[f64]) -> String {
    let mut out = String::from("epoch,loss\n");
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(out, "{},{}", i + 1, l);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stable_json_drops_only_metadata() {
        let cfg = RunConfig::default();
        let mut a = Report::new("fsl", "abc", &cfg);
        a.metric("mae", 0.25).metric("r2", f64::NAN).flag("degenerate_targets", true);
        let mut b = a.clone();
        b.metadata.unix_time += 100;
        assert_ne!(a.to_json(), b.to_json());
        assert_eq!(a.stable_json(), b.stable_json());
        let v: Value = serde_json::from_str(&a.to_json()).unwrap();
        assert!(v["metrics"]["r2"].is_null());
        assert_eq!(v["metrics"]["mae"], 0.25);
        for key in ["task", "dataset_id", "seed", "metrics", "config_hash", "tool_version"] {
            assert!(v.get(key).is_some(), "{key}");
        }
    }

    #[test]
    fn csv_layout() {
        assert_eq!(loss_curve_csv(&[0.5, 0.25]), "epoch,loss\n1,0.5\n2,0.25\n");
    }
}
