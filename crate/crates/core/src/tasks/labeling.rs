//! Attaching oracle labels to dataset records.

use rand::Rng;

use crate::corpus::{DatasetRecord, LabelChannels};
use crate::oracle::{
    function_shift_from_tables, similarity_labels, simulate_with_cap, transition_labels, PatternSource,
    TransitionSpec,
};
use crate::rng::{derive_seed, seeded};

use super::config::OracleConfig;
use super::TaskError;

/// Pairs sampled per node for the similarity channel.
pub const SIM_PAIRS_PER_NODE: usize = 4;

/// Which channels to compute and how.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelRequest {
    /// Global and local probabilities.
    pub prob: bool,
    /// Function shift (stored together with the global probability).
    pub shift: bool,
    pub sim: bool,
    /// Add one `(v, v)` pair per operator node to the sampled pairs.
    pub sim_identity: bool,
    pub transition: bool,
    pub cycles: usize,
    pub seed: u64,
    pub oracle: OracleConfig,
}

impl Default for LabelRequest {
    fn default() -> Self {
        LabelRequest {
            prob: true,
            shift: true,
            sim: false,
            sim_identity: false,
            transition: false,
            cycles: 256,
            seed: 0,
            oracle: OracleConfig::default(),
        }
    }
}

impl LabelRequest {
    /// Parses a comma-separated task list such as `prob,shift,sim`.
    pub fn with_tasks(mut self, list: &str) -> Result<Self, String> {
        self.prob = false;
        self.shift = false;
        for t in list.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            match t {
                "prob" => self.prob = true,
                "shift" => self.shift = true,
                "sim" => self.sim = true,
                "transition" => self.transition = true,
                other => return Err(format!("unknown label task '{other}'")),
            }
        }
        Ok(self)
    }
}

/// Labels one record. `index` picks the record's random stream so results do
/// not depend on how records are scheduled. Returns the labelled record and
/// any warnings (currently only the Monte-Carlo fallback).
pub fn label_record(record: &DatasetRecord, req: &LabelRequest, index: u64) -> Result<(DatasetRecord, Vec<String>), TaskError> {
    let graph = record.circuit()?;
    let schedule = graph.compute_levels()?;
    let seed = derive_seed(req.seed, index);
    let mut warnings = Vec::new();
    let mut out = record.clone();
    let mut labels = out.labels.take().unwrap_or_default();

    if req.prob || req.shift || req.sim {
        let cap = req.oracle.exhaustive_max_inputs;
        let source = PatternSource::auto(&graph, cap, req.oracle.mc_samples, derive_seed(seed, 1));
        if let PatternSource::MonteCarlo { patterns, .. } = source {
            warnings.push(format!(
                "{}: {} inputs exceed the exhaustive cap of {cap}; using {patterns} sampled patterns",
                record.id,
                graph.pis().len()
            ));
        }
        let tts = simulate_with_cap(&graph, &schedule, source, cap)?;
        if req.prob || req.shift {
            let fl = function_shift_from_tables(&graph, &schedule, &tts);
            labels.global_prob = Some(fl.iter().map(|l| l.global_prob).collect());
            if req.prob {
                labels.local_prob = Some(fl.iter().map(|l| l.local_prob).collect());
            }
            if req.shift {
                labels.shift = Some(fl.iter().map(|l| l.shift).collect());
            }
        }
        if req.sim {
            let candidates: Vec<usize> = (0..graph.len()).filter(|&v| schedule.level_of(v) >= 1).collect();
            let mut pairs = Vec::new();
            if !candidates.is_empty() {
                let mut rng = seeded(derive_seed(seed, 2));
                for _ in 0..SIM_PAIRS_PER_NODE * graph.len() {
                    let i = candidates[rng.gen_range(0..candidates.len())];
                    let j = candidates[rng.gen_range(0..candidates.len())];
                    pairs.push((i, j));
                }
                if req.sim_identity {
                    pairs.extend(candidates.iter().map(|&v| (v, v)));
                }
            }
            let s = similarity_labels(&tts, &pairs);
            out.sim_pairs = Some(pairs.into_iter().zip(s).map(|((i, j), s)| (i, j, s)).collect());
        }
    }

    if req.transition {
        let rates = transition_labels(&graph, &schedule, TransitionSpec { n_cycles: req.cycles, seed: derive_seed(seed, 3) })?;
        labels.transition_p01 = Some(rates.iter().map(|r| r.0).collect());
        labels.transition_p10 = Some(rates.iter().map(|r| r.1).collect());
    }

    out.labels = if labels == LabelChannels::default() { None } else { Some(labels) };
    Ok((out, warnings))
}
