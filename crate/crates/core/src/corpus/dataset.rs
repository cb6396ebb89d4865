//! JSON-lines dataset records: one circuit (as `aag` text) per line with
//! optional per-node label channels and pairwise similarity samples.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::graph::CircuitGraph;

use super::{parse_aiger, serialize_aiger, CorpusError};

/// Per-node label channels; each present channel has one value per node.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelChannels {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub global_prob: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub local_prob: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shift: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transition_p01: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transition_p10: Option<Vec<f64>>,
}

impl LabelChannels {
    fn channels(&self) -> [(&'static str, Option<&Vec<f64>>, f64, f64); 5] {
        [
            ("global_prob", self.global_prob.as_ref(), 0.0, 1.0),
            ("local_prob", self.local_prob.as_ref(), 0.0, 1.0),
            ("shift", self.shift.as_ref(), -1.0, 1.0),
            ("transition_p01", self.transition_p01.as_ref(), 0.0, 1.0),
            ("transition_p10", self.transition_p10.as_ref(), 0.0, 1.0),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRecord {
    pub id: String,
    pub aag: String,
    /// Bernoulli parameter of each PI, in PI order.
    pub pi_params: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<LabelChannels>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sim_pairs: Option<Vec<(usize, usize, f64)>>,
}

impl DatasetRecord {
    pub fn from_circuit(id: impl Into<String>, graph: &CircuitGraph) -> Result<Self, CorpusError> {
        let aag = serialize_aiger(graph)?;
        let pi_params = graph.pis().iter().map(|&v| graph.source_value(v).unwrap_or(0.5)).collect();
        Ok(DatasetRecord { id: id.into(), aag, pi_params, labels: None, sim_pairs: None })
    }

    /// Parses the stored circuit and applies the stored PI parameters.
    pub fn circuit(&self) -> Result<CircuitGraph, CorpusError> {
        let g = parse_aiger(&self.aag)?;
        g.with_pi_params(&self.pi_params).map_err(CorpusError::Graph)
    }

    /// Checks channel lengths and value ranges against the stored circuit.
    pub fn validate(&self) -> Result<(), String> {
        let g = self.circuit().map_err(|e| e.to_string())?;
        let n = g.len();
        if let Some(labels) = &self.labels {
            for (name, values, lo, hi) in labels.channels() {
                let Some(values) = values else { continue };
                if values.len() != n {
                    return Err(format!("label channel {name} has {} values for {n} nodes", values.len()));
                }
                if let Some(bad) = values.iter().find(|x| !(lo..=hi).contains(*x)) {
                    return Err(format!("label channel {name} value {bad} outside [{lo}, {hi}]"));
                }
            }
        }
        if let Some(pairs) = &self.sim_pairs {
            for &(i, j, s) in pairs {
                if i >= n || j >= n {
                    return Err(format!("similarity pair ({i}, {j}) references a missing node"));
                }
                if !(0.0..=1.0).contains(&s) {
                    return Err(format!("similarity {s} outside [0, 1]"));
                }
            }
        }
        Ok(())
    }
}

pub fn to_jsonl(records: &[DatasetRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("records serialize"));
        out.push('\n');
    }
    out
}

pub fn from_jsonl(text: &str) -> Result<Vec<DatasetRecord>, CorpusError> {
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: DatasetRecord = serde_json::from_str(line)
            .map_err(|e| CorpusError::Schema { line: i + 1, message: e.to_string() })?;
        record.validate().map_err(|message| CorpusError::Schema { line: i + 1, message })?;
        records.push(record);
    }
    Ok(records)
}

/// Writes via a temporary file and rename so readers never see a partial file.
pub fn write_dataset(path: &Path, records: &[DatasetRecord]) -> Result<(), CorpusError> {
    write_atomic(path, to_jsonl(records).as_bytes())
}

pub fn read_dataset(path: &Path) -> Result<Vec<DatasetRecord>, CorpusError> {
    let text = fs::read_to_string(path)?;
    from_jsonl(&text)
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CorpusError> {
    let file_name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{file_name}.tmp"));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}
