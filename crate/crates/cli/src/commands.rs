use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde_json::{json, Value};

use circuitfn::corpus::{
    from_jsonl, generate_random_aig, generate_random_tree, to_jsonl, with_random_pi_params, write_atomic,
    DatasetRecord, GeneratorSpec,
};
use circuitfn::graph::padding_overhead_of;
use circuitfn::nn::Checkpoint;
use circuitfn::rng::{derive_seed, seeded};
use circuitfn::tasks::{
    dataset_id, eval_retrieval, evaluate_fsl, evaluate_similarity, evaluate_transition, infer_global, label_record,
    loss_curve_csv, null_retrieval_items, predict_head, retrieval_items, train_contrastive, train_fsl,
    train_similarity, train_transition, FslPredictor, FslTarget, LabelRequest, PositiveMode, RegressionMetrics,
    Report, RunConfig, ShiftSource, TrainRun, TOOL_VERSION,
};

use crate::error::CliError;
use crate::{EvalArgs, EvalTask, GenArgs, InferArgs, LabelArgs, Positive, Shape, StatsArgs, TrainArgs, TrainTask, SEED_ENV};

/// Per-record label failures echoed before the summary line.
const MAX_REPORTED_FAILURES: usize = 5;

fn seed_or_env(seed: u64) -> Result<u64, CliError> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().map_err(|_| CliError::usage(format!("{SEED_ENV} must be an unsigned integer, got {v:?}"))),
        Err(_) => Ok(seed),
    }
}

/// `N` or `LO..HI` (inclusive).
fn parse_count_range(flag: &str, text: &str) -> Result<(usize, usize), CliError> {
    let bad = || CliError::usage(format!("{flag}: expected N or LO..HI, got {text:?}"));
    let (lo, hi) = match text.split_once("..") {
        Some((a, b)) => (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?),
        None => {
            let n = text.trim().parse().map_err(|_| bad())?;
            (n, n)
        }
    };
    if lo > hi {
        return Err(CliError::usage(format!("{flag}: empty range {text:?}")));
    }
    Ok((lo, hi))
}

fn parse_prob_range(flag: &str, text: &str) -> Result<(f64, f64), CliError> {
    let bad = || CliError::usage(format!("{flag}: expected LO..HI with 0 <= LO <= HI <= 1, got {text:?}"));
    let (a, b) = text.split_once("..").ok_or_else(bad)?;
    let lo: f64 = a.trim().parse().map_err(|_| bad())?;
    let hi: f64 = b.trim().parse().map_err(|_| bad())?;
    if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
        return Err(bad());
    }
    Ok((lo, hi))
}

fn pool(jobs: Option<usize>) -> Result<rayon::ThreadPool, CliError> {
    if jobs == Some(0) {
        return Err(CliError::usage("--jobs must be at least 1"));
    }
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(j) = jobs {
        b = b.num_threads(j);
    }
    b.build().map_err(|e| CliError::usage(format!("thread pool: {e}")))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| CliError::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    write_atomic(path, bytes).map_err(|e| CliError::io(path, e))
}

/// Dataset records together with the dataset id (hash of the file bytes).
fn load_dataset(path: &Path) -> Result<(Vec<DatasetRecord>, String), CliError> {
    let bytes = read_bytes(path)?;
    let text = std::str::from_utf8(&bytes).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    let records = from_jsonl(text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    Ok((records, dataset_id(&bytes)))
}

fn load_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut cfg = RunConfig::parse(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    cfg.train.seed = seed_or_env(cfg.train.seed)?;
    Ok(cfg)
}

fn load_checkpoint(path: &Path) -> Result<(Checkpoint, RunConfig), CliError> {
    let ckpt = Checkpoint::from_bytes(&read_bytes(path)?).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    let cfg = RunConfig::from_header(&ckpt.hyper).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    Ok((ckpt, cfg))
}

fn require_checkpoint(path: &Option<PathBuf>) -> Result<(Checkpoint, RunConfig), CliError> {
    match path {
        Some(p) => load_checkpoint(p),
        None => Err(CliError::usage("--checkpoint is required")),
    }
}

fn emit(report: &Report, out: Option<&Path>, pretty: bool) -> Result<(), CliError> {
    if let Some(path) = out {
        write_bytes(path, report.to_json().as_bytes())?;
    }
    if pretty {
        print!("{}", report.pretty());
    } else {
        print!("{}", report.to_json());
    }
    Ok(())
}

fn regression_metrics(report: &mut Report, prefix: &str, m: &RegressionMetrics) {
    report.metric(&format!("{prefix}mae"), m.mae).metric(&format!("{prefix}r2"), m.r2);
    report.flag(&format!("{prefix}degenerate_targets"), m.degenerate_targets);
}

pub fn gen(a: GenArgs) -> Result<(), CliError> {
    if a.n_circuits == 0 {
        return Err(CliError::usage("--n-circuits must be at least 1"));
    }
    let pis = parse_count_range("--pis", &a.pis)?;
    if pis.0 == 0 {
        return Err(CliError::usage("--pis must be at least 1"));
    }
    let gates = parse_count_range("--gates", &a.gates)?;
    if a.shape == Shape::Dag && gates.0 == 0 {
        return Err(CliError::usage("--gates must be at least 1"));
    }
    if a.latches > 0 && !a.sequential {
        return Err(CliError::usage("--latches requires --sequential"));
    }
    if a.sequential && a.latches == 0 {
        return Err(CliError::usage("--sequential needs --latches of at least 1"));
    }
    if a.sequential && a.shape == Shape::Tree {
        return Err(CliError::usage("--shape tree cannot be combined with --sequential"));
    }
    if !(0.0..=1.0).contains(&a.p_not) {
        return Err(CliError::usage("--p-not must lie in [0, 1]"));
    }
    if !(0.0..=1.0).contains(&a.pi_p) {
        return Err(CliError::usage("--pi-p must lie in [0, 1]"));
    }
    let pi_range = a.pi_p_range.as_deref().map(|t| parse_prob_range("--pi-p-range", t)).transpose()?;
    let seed = seed_or_env(a.seed)?;

    let records = pool(a.jobs)?.install(|| {
        (0..a.n_circuits)
            .into_par_iter()
            .map(|i| {
                let s = derive_seed(seed, i as u64);
                let mut rng = seeded(s);
                let n_pis = rng.gen_range(pis.0..=pis.1);
                let n_gates = rng.gen_range(gates.0..=gates.1);
                let g = match a.shape {
                    Shape::Tree => generate_random_tree(n_pis, a.p_not, a.pi_p, derive_seed(s, 1)),
                    Shape::Dag => generate_random_aig(&GeneratorSpec {
                        n_pis,
                        n_gates,
                        seed: derive_seed(s, 1),
                        p_not: a.p_not,
                        sequential: a.sequential,
                        n_latches: a.latches,
                        pi_p: a.pi_p,
                    }),
                };
                let g = match pi_range {
                    Some((lo, hi)) => with_random_pi_params(&g, lo, hi, derive_seed(s, 2)),
                    None => g,
                };
                DatasetRecord::from_circuit(format!("c{i:06}"), &g)
            })
            .collect::<Result<Vec<_>, _>>()
    })?;
    write_bytes(&a.out, to_jsonl(&records).as_bytes())?;
    eprintln!("wrote {} circuits to {}", records.len(), a.out.display());
    Ok(())
}

pub fn label(a: LabelArgs) -> Result<(), CliError> {
    let mut req = LabelRequest { seed: seed_or_env(a.seed)?, cycles: a.cycles, sim_identity: a.sim_identity, ..LabelRequest::default() }
        .with_tasks(&a.tasks)
        .map_err(|m| CliError::usage(format!("--tasks: {m}")))?;
    if req.transition && req.cycles < 2 {
        return Err(CliError::usage("--cycles must be at least 2"));
    }
    if let Some(cap) = a.exhaustive_max_inputs {
        req.oracle.exhaustive_max_inputs = cap;
    }
    if let Some(n) = a.mc_samples {
        if n == 0 {
            return Err(CliError::usage("--mc-samples must be at least 1"));
        }
        req.oracle.mc_samples = n;
    }
    let (records, _) = load_dataset(&a.input)?;
    let results: Vec<_> = pool(a.jobs)?
        .install(|| records.par_iter().enumerate().map(|(i, r)| label_record(r, &req, i as u64)).collect());

    let mut labelled = Vec::with_capacity(records.len());
    let mut failures = Vec::new();
    for (r, res) in records.iter().zip(results) {
        match res {
            Ok((rec, warnings)) => {
                for w in warnings {
                    eprintln!("warning: {w}");
                }
                labelled.push(rec);
            }
            Err(e) => {
                if failures.len() < MAX_REPORTED_FAILURES {
                    eprintln!("error: {}: {e}", r.id);
                }
                failures.push(e);
            }
        }
    }
    if let Some(first) = failures.into_iter().next() {
        let n_failed = records.len() - labelled.len();
        let err: CliError = first.into();
        return Err(match err {
            CliError::Usage(m) => CliError::Usage(format!("{n_failed} of {} records failed; first: {m}", records.len())),
            other => other,
        });
    }
    write_bytes(&a.out, to_jsonl(&labelled).as_bytes())?;
    eprintln!("labelled {} circuits into {}", labelled.len(), a.out.display());
    Ok(())
}

fn task_name(task: TrainTask) -> &'static str {
    match task {
        TrainTask::Fsl => "fsl",
        TrainTask::Contrastive => "contrastive",
        TrainTask::Transition => "transition",
        TrainTask::Similarity => "similarity",
    }
}

pub fn train(task: TrainTask, a: TrainArgs, pretty: bool) -> Result<(), CliError> {
    let cfg = load_config(&a.config)?;
    let missing = |key: &str| CliError::usage(format!("{}: {key} is required", a.config.display()));
    let dataset = cfg.paths.dataset.clone().ok_or_else(|| missing("paths.dataset"))?;
    let ckpt_path = cfg.paths.checkpoint.clone().ok_or_else(|| missing("paths.checkpoint"))?;
    let report_path = cfg.paths.report.clone().ok_or_else(|| missing("paths.report"))?;
    let curve_path = cfg.paths.loss_curve.clone().unwrap_or_else(|| report_path.with_extension("csv"));
    let (records, id) = load_dataset(&dataset)?;

    let run: TrainRun = match task {
        TrainTask::Fsl => train_fsl(&records, &cfg)?,
        TrainTask::Contrastive => {
            let mode = match a.positive {
                Positive::Rewrite => PositiveMode::Rewrite,
                Positive::Identity => PositiveMode::Identity,
            };
            train_contrastive(&records, &cfg, mode)?
        }
        TrainTask::Transition => train_transition(&records, &cfg)?,
        TrainTask::Similarity => train_similarity(&records, &cfg)?,
    };

    let mut header = cfg.checkpoint_header();
    header.insert("task".into(), task_name(task).into());
    write_bytes(&ckpt_path, &Checkpoint::new(run.params.clone(), header).to_bytes())?;
    write_bytes(&curve_path, loss_curve_csv(&run.loss_curve).as_bytes())?;

    let mut report = Report::new(&format!("train_{}", task_name(task)), &id, &cfg);
    report.metric("final_loss", run.final_loss().unwrap_or(f64::NAN));
    report.metric("initial_loss", run.loss_curve.first().copied().unwrap_or(f64::NAN));
    report.metric("epochs", run.loss_curve.len() as f64);
    report.metric("n_circuits", records.len() as f64);
    emit(&report, Some(&report_path), pretty)
}

fn parse_ks(text: &str) -> Result<Vec<usize>, CliError> {
    let ks: Vec<usize> = text
        .split(',')
        .map(|t| t.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| CliError::usage(format!("--ks: expected a comma-separated list of integers, got {text:?}")))?;
    if ks.is_empty() || ks.contains(&0) {
        return Err(CliError::usage("--ks values must be at least 1"));
    }
    Ok(ks)
}

pub fn eval(task: EvalTask, a: EvalArgs, pretty: bool) -> Result<(), CliError> {
    let (records, id) = load_dataset(&a.dataset)?;
    let report = match task {
        EvalTask::Fsl => {
            let (eval, cfg) = if a.oracle_shift {
                (evaluate_fsl(&records, FslPredictor::OracleShift)?, RunConfig::default())
            } else {
                let (ckpt, cfg) = require_checkpoint(&a.checkpoint)?;
                let predictor = FslPredictor::Model { params: &ckpt.params, config: &cfg.model, target: cfg.train.target };
                (evaluate_fsl(&records, predictor)?, cfg)
            };
            let mut r = Report::new("eval_fsl", &id, &cfg);
            regression_metrics(&mut r, "", &eval.model);
            regression_metrics(&mut r, "baseline_", &eval.baseline);
            r.metric("mae_ratio", eval.model.mae / eval.baseline.mae);
            r.metric("clamp_count", eval.clamp_count as f64);
            r.metric("n_nodes", eval.n_nodes as f64);
            r.flag("oracle_shift", a.oracle_shift);
            r
        }
        EvalTask::Retrieval => {
            let ks = parse_ks(&a.ks)?;
            if a.pool < 2 {
                return Err(CliError::usage("--pool must be at least 2"));
            }
            let (items, cfg) = if a.null_model {
                let cfg = RunConfig::default();
                let seed = seed_or_env(a.seed.unwrap_or(cfg.train.seed))?;
                (null_retrieval_items(records.len(), a.pool, cfg.model.d_model, seed)?, cfg)
            } else {
                let (ckpt, cfg) = require_checkpoint(&a.checkpoint)?;
                let seed = seed_or_env(a.seed.unwrap_or(cfg.train.seed))?;
                let graphs = records.iter().map(|r| r.circuit()).collect::<Result<Vec<_>, _>>()?;
                (retrieval_items(&graphs, &ckpt.params, &cfg.model, a.pool, seed)?, cfg)
            };
            let mut r = Report::new("eval_retrieval", &id, &cfg);
            for (k, v) in eval_retrieval(&items, &ks) {
                r.metric(&format!("recall@{k}"), v);
            }
            r.metric("pool", a.pool as f64);
            r.metric("n_queries", items.len() as f64);
            r.metric("random_recall@1", 1.0 / a.pool as f64);
            r.flag("null_model", a.null_model);
            r
        }
        EvalTask::Transition | EvalTask::Similarity => {
            let (ckpt, cfg) = require_checkpoint(&a.checkpoint)?;
            let (name, m) = if task == EvalTask::Transition {
                ("eval_transition", evaluate_transition(&records, &ckpt.params, &cfg.model)?)
            } else {
                ("eval_similarity", evaluate_similarity(&records, &ckpt.params, &cfg.model)?)
            };
            let mut r = Report::new(name, &id, &cfg);
            regression_metrics(&mut r, "", &m);
            r
        }
    };
    emit(&report, a.out.as_deref(), pretty)
}

pub fn infer(a: InferArgs) -> Result<(), CliError> {
    let (records, _) = load_dataset(&a.dataset)?;
    let model = if a.oracle_shift || a.zero_shift { None } else { Some(require_checkpoint(&a.checkpoint)?) };
    let mut out = String::new();
    for r in &records {
        let g = r.circuit()?;
        let schedule = g.compute_levels().map_err(|e| CliError::usage(e.to_string()))?;
        let (probs, clamp_count) = match &model {
            Some((ckpt, cfg)) if cfg.train.target == FslTarget::Global => {
                let head = predict_head(std::slice::from_ref(&g), &ckpt.params, &cfg.model)?.remove(0);
                let probs: Vec<f64> = (0..g.len()).map(|v| g.source_value(v).unwrap_or_else(|| head[v].clamp(0.0, 1.0))).collect();
                (probs, 0)
            }
            Some((ckpt, cfg)) => {
                let inf = infer_global(&g, &schedule, ShiftSource::Model { params: &ckpt.params, config: &cfg.model })?;
                (inf.probs, inf.clamp_count)
            }
            None => {
                let source = if a.oracle_shift { ShiftSource::Oracle } else { ShiftSource::Zero };
                let inf = infer_global(&g, &schedule, source)?;
                (inf.probs, inf.clamp_count)
            }
        };
        let line = json!({ "id": r.id, "probs": probs, "clamp_count": clamp_count });
        let _ = writeln!(out, "{line}");
    }
    write_bytes(&a.out, out.as_bytes())
}

fn histogram_json(h: &BTreeMap<usize, usize>) -> Value {
    Value::Object(h.iter().map(|(k, v)| (k.to_string(), json!(v))).collect())
}

pub fn stats(a: StatsArgs, pretty: bool) -> Result<(), CliError> {
    let (records, id) = load_dataset(&a.dataset)?;
    let mut hist = BTreeMap::new();
    let mut degrees = Vec::new();
    let mut per_circuit = Vec::with_capacity(records.len());
    for r in &records {
        let g = r.circuit()?;
        per_circuit.push(g.padding_overhead());
        for (d, c) in g.in_degree_histogram() {
            *hist.entry(d).or_insert(0usize) += c;
        }
        degrees.extend(g.nodes().iter().map(|n| n.inputs.len()));
    }
    let pooled = padding_overhead_of(degrees.iter().copied());
    let mean = if per_circuit.is_empty() { 0.0 } else { per_circuit.iter().sum::<f64>() / per_circuit.len() as f64 };
    let max = per_circuit.iter().copied().fold(0.0, f64::max);
    let report = json!({
        "task": "stats",
        "dataset_id": id,
        "tool_version": TOOL_VERSION,
        "metrics": {
            "n_circuits": records.len(),
            "n_nodes": degrees.len(),
            "padding_overhead": pooled,
            "mean_circuit_padding_overhead": mean,
            "max_circuit_padding_overhead": max,
            "in_degree_histogram": histogram_json(&hist),
        },
        "per_circuit_padding_overhead": per_circuit,
    });
    let text = format!("{}\n", serde_json::to_string_pretty(&report).expect("stats serialise"));
    if let Some(path) = &a.out {
        write_bytes(path, text.as_bytes())?;
    }
    if pretty {
        println!("circuits                  {}", records.len());
        println!("nodes                     {}", degrees.len());
        println!("padding overhead          {pooled:.6}");
        println!("mean circuit overhead     {mean:.6}");
        println!("max circuit overhead      {max:.6}");
        for (d, c) in &hist {
            println!("  in-degree {d:<3}           {c}");
        }
    } else {
        print!("{text}");
    }
    Ok(())
}
