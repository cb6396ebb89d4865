use circuitfn::corpus::{generate_random_aig, generate_random_tree, with_random_pi_params, DatasetRecord, GeneratorSpec};
use circuitfn::graph::{CircuitBuilder, CircuitGraph};
use circuitfn::tasks::{
    cosine, label_record, predict_similarity, predict_transition, readouts, train_contrastive, train_fsl,
    train_similarity, train_transition, FslTarget, LabelRequest, PositiveMode, RunConfig, TaskError,
};

fn small_config(epochs: usize, batch_size: usize) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model.d_model = 16;
    cfg.model.n_heads = 2;
    cfg.model.n_layers_per_step = 1;
    cfg.train.epochs = epochs;
    cfg.train.batch_size = batch_size;
    cfg
}

fn labelled(graphs: &[CircuitGraph], req: &LabelRequest) -> Vec<DatasetRecord> {
    graphs
        .iter()
        .enumerate()
        .map(|(i, g)| label_record(&DatasetRecord::from_circuit(format!("c{i}"), g).unwrap(), req, i as u64).unwrap().0)
        .collect()
}

fn random_aigs(n: usize, seed: u64) -> Vec<CircuitGraph> {
    (0..n as u64)
        .map(|i| {
            let g = generate_random_aig(&GeneratorSpec { n_pis: 4, n_gates: 12, seed: seed + i, ..GeneratorSpec::default() });
            with_random_pi_params(&g, 0.1, 0.9, seed + i)
        })
        .collect()
}

#[test]
fn fsl_on_trees_learns_zero() {
    let trees: Vec<_> = (0..16).map(|i| generate_random_tree(6, 0.3, 0.5, i)).collect();
    let records = labelled(&trees, &LabelRequest::default());
    let run = train_fsl(&records, &small_config(30, 4)).unwrap();
    assert!(run.final_loss().unwrap() < 0.01, "{:?}", run.loss_curve);
}

// Dense targets: on sparse shift targets L1 overshoots the zero median once
// and then jitters, so the smoothed curve is never strictly monotone.
#[test]
fn fsl_overfit_loss_does_not_increase() {
    let records = labelled(&random_aigs(10, 100), &LabelRequest::default());
    let mut cfg = small_config(300, 10);
    cfg.model.d_model = 32;
    cfg.train.lr = 1e-4;
    cfg.train.target = FslTarget::Global;
    let run = train_fsl(&records, &cfg).unwrap();
    let c = &run.loss_curve;
    let smoothed: Vec<f64> = c.windows(5).map(|w| w.iter().sum::<f64>() / 5.0).collect();
    for (t, w) in smoothed.windows(2).enumerate() {
        assert!(w[1] <= w[0], "5-epoch mean rises after epoch {t}: {} -> {}", w[0], w[1]);
    }
    assert!(c[c.len() - 1] < 0.5 * c[0]);
}

#[test]
fn fsl_warmup_fits_shift_targets() {
    let records = labelled(&random_aigs(10, 100), &LabelRequest::default());
    let (mut abs_sum, mut n) = (0.0, 0usize);
    for r in &records {
        let g = r.circuit().unwrap();
        for (v, s) in r.labels.as_ref().unwrap().shift.as_ref().unwrap().iter().enumerate() {
            if !g.kind(v).is_source() {
                abs_sum += s.abs();
                n += 1;
            }
        }
    }
    let zero_baseline = abs_sum / n as f64;
    let mut cfg = small_config(300, 10);
    cfg.model.d_model = 32;
    cfg.train.warmup_epochs = 300;
    let run = train_fsl(&records, &cfg).unwrap();
    let last = run.final_loss().unwrap();
    assert!(last < 0.5 * zero_baseline, "train L1 {last} vs zero-shift {zero_baseline}");
}

#[test]
fn fsl_runs_are_deterministic() {
    let records = labelled(&random_aigs(6, 7), &LabelRequest::default());
    let cfg = small_config(3, 2);
    let a = train_fsl(&records, &cfg).unwrap();
    let b = train_fsl(&records, &cfg).unwrap();
    assert_eq!(a.loss_curve, b.loss_curve);
    assert_eq!(a.params, b.params);
}

#[test]
fn fsl_requires_shift_labels() {
    let records: Vec<_> = random_aigs(2, 1).iter().map(|g| DatasetRecord::from_circuit("raw", g).unwrap()).collect();
    let err = train_fsl(&records, &small_config(1, 2)).unwrap_err();
    assert!(matches!(err, TaskError::MissingLabels { channel: "shift", .. }), "{err}");
}

fn and_of_all(n: usize) -> CircuitGraph {
    let mut b = CircuitBuilder::new();
    let xs: Vec<_> = (0..n).map(|_| b.pi(0.5)).collect();
    let mut acc = xs[0];
    for &x in &xs[1..] {
        acc = b.and(acc, x);
    }
    b.output(acc);
    b.build().unwrap()
}

fn parity_like(n: usize) -> CircuitGraph {
    // Chain of (a AND NOT b) OR-style mixing, structurally unlike `and_of_all`.
    let mut b = CircuitBuilder::new();
    let xs: Vec<_> = (0..n).map(|_| b.pi(0.5)).collect();
    let mut acc = xs[0];
    for &x in &xs[1..] {
        let na = b.not(acc);
        let nx = b.not(x);
        let t1 = b.and(acc, nx);
        let t2 = b.and(na, x);
        let n1 = b.not(t1);
        let n2 = b.not(t2);
        let both = b.and(n1, n2);
        acc = b.not(both);
    }
    b.output(acc);
    b.build().unwrap()
}

#[test]
fn contrastive_separates_two_functions() {
    let graphs = vec![and_of_all(4), parity_like(3)];
    let records: Vec<_> = graphs.iter().map(|g| DatasetRecord::from_circuit("g", g).unwrap()).collect();
    let mut cfg = small_config(60, 2);
    cfg.train.lr = 3e-3;
    let run = train_contrastive(&records, &cfg, PositiveMode::Rewrite).unwrap();
    let positives: Vec<_> =
        graphs.iter().enumerate().map(|(i, g)| circuitfn::tasks::positive_for(g, PositiveMode::Rewrite, 99 + i as u64)).collect();
    let q = readouts(&graphs, &run.params, &cfg.model).unwrap();
    let p = readouts(&positives, &run.params, &cfg.model).unwrap();
    for i in 0..2 {
        let j = 1 - i;
        assert!(cosine(&q[i], &p[i]) > cosine(&q[i], &q[j]), "query {i}: curve {:?}", run.loss_curve);
    }
}

#[test]
fn contrastive_identity_positive_beats_uniform_after_one_epoch() {
    let graphs = random_aigs(16, 50);
    let records: Vec<_> = graphs.iter().map(|g| DatasetRecord::from_circuit("g", g).unwrap()).collect();
    let cfg = small_config(1, 8);
    let run = train_contrastive(&records, &cfg, PositiveMode::Identity).unwrap();
    assert!(run.loss_curve[0] <= (8f64).ln(), "{:?}", run.loss_curve);
}

#[test]
fn contrastive_needs_two_per_batch_and_is_deterministic() {
    let graphs = random_aigs(6, 3);
    let records: Vec<_> = graphs.iter().map(|g| DatasetRecord::from_circuit("g", g).unwrap()).collect();
    let err = train_contrastive(&records, &small_config(1, 1), PositiveMode::Rewrite).unwrap_err();
    assert!(matches!(err, TaskError::BatchTooSmall(1)));
    let a = train_contrastive(&records, &small_config(2, 3), PositiveMode::Rewrite).unwrap();
    let b = train_contrastive(&records, &small_config(2, 3), PositiveMode::Rewrite).unwrap();
    assert_eq!(a.loss_curve, b.loss_curve);
}

#[test]
fn similarity_head_learns_identity_pairs() {
    let graphs = random_aigs(6, 11);
    let req = LabelRequest { sim: true, sim_identity: true, ..LabelRequest::default() };
    let records = labelled(&graphs, &req);
    let mut cfg = small_config(40, 2);
    cfg.train.lr = 3e-3;
    let run = train_similarity(&records, &cfg).unwrap();
    for (g, r) in graphs.iter().zip(&records) {
        let ids: Vec<(usize, usize)> = r.sim_pairs.as_ref().unwrap().iter().filter(|p| p.0 == p.1).map(|p| (p.0, p.1)).collect();
        let preds = predict_similarity(g, &ids, &run.params, &small_config(0, 1).model).unwrap();
        let mean = preds.iter().sum::<f64>() / preds.len() as f64;
        assert!(mean > 0.9, "mean identity prediction {mean}");
        assert!(preds.iter().all(|&s| s > 0.0 && s < 1.0));
    }
}

fn sequential_aigs(n: usize) -> Vec<CircuitGraph> {
    (0..n as u64)
        .map(|i| {
            generate_random_aig(&GeneratorSpec {
                n_pis: 3,
                n_gates: 10,
                seed: 500 + i,
                sequential: true,
                n_latches: 2,
                ..GeneratorSpec::default()
            })
        })
        .collect()
}

#[test]
fn transition_head_overfits_small_set() {
    let graphs = sequential_aigs(10);
    let req = LabelRequest { prob: false, shift: false, transition: true, cycles: 128, ..LabelRequest::default() };
    let records = labelled(&graphs, &req);
    let mut cfg = small_config(150, 2);
    cfg.model.d_model = 32;
    cfg.train.lr = 3e-3;
    let run = train_transition(&records, &cfg).unwrap();
    let again = train_transition(&records, &cfg).unwrap();
    assert_eq!(run.loss_curve, again.loss_curve);

    let mut err = 0.0;
    let mut n = 0;
    for (g, r) in graphs.iter().zip(&records) {
        let labels = r.labels.as_ref().unwrap();
        let (p01, p10) = (labels.transition_p01.as_ref().unwrap(), labels.transition_p10.as_ref().unwrap());
        for (v, (a, b)) in predict_transition(g, &run.params, &cfg.model).unwrap().into_iter().enumerate() {
            err += (a - p01[v]).abs() + (b - p10[v]).abs();
            n += 2;
        }
    }
    let mae = err / n as f64;
    assert!(mae < 0.05, "overfit MAE {mae}, curve tail {:?}", &run.loss_curve[run.loss_curve.len() - 5..]);
}
