use super::tape::{Tape, Var};
use super::tensor::Scalar;
use super::NnError;

fn as_rows<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var, NnError> {
    match tape.shape(x).len() {
        1 => {
            let d = tape.shape(x)[0];
            tape.reshape(x, &[1, d])
        }
        _ => Ok(x),
    }
}

/// Pairwise cosine similarity `[m, d] x [n, d] -> [m, n]`.
pub fn cosine_matrix<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var, NnError> {
    let a = as_rows(tape, a)?;
    let b = as_rows(tape, b)?;
    let an = tape.normalize_rows(a)?;
    let bn = tape.normalize_rows(b)?;
    tape.matmul_bt(an, bn)
}

/// Contrastive loss of one query against one positive and any number of
/// negatives, with cosine similarity scaled by `1 / temperature`.
pub fn info_nce_loss<T: Scalar>(
    tape: &mut Tape<T>,
    query: Var,
    positive: Var,
    negatives: &[Var],
    temperature: f64,
) -> Result<Var, NnError> {
    let mut keys = vec![as_rows(tape, positive)?];
    for &n in negatives {
        keys.push(as_rows(tape, n)?);
    }
    let keys = tape.concat(&keys, 0)?;
    info_nce_batch(tape, query, keys, &[0], temperature)
}

/// Mean contrastive loss over a batch: query row `i` should match key row
/// `positives[i]`; every other key acts as a negative.
pub fn info_nce_batch<T: Scalar>(
    tape: &mut Tape<T>,
    queries: Var,
    keys: Var,
    positives: &[usize],
    temperature: f64,
) -> Result<Var, NnError> {
    let sims = cosine_matrix(tape, queries, keys)?;
    let (m, n) = (tape.shape(sims)[0], tape.shape(sims)[1]);
    if positives.len() != m {
        return Err(NnError::Shape { op: "info_nce", lhs: vec![m, n], rhs: vec![positives.len()] });
    }
    let logits = tape.scale(sims, 1.0 / temperature);
    let logp = tape.log_softmax(logits, 1)?;
    let idx: Vec<usize> = positives.iter().enumerate().map(|(i, &p)| i * n + p).collect();
    let picked = tape.select(logp, &idx)?;
    let mean = tape.mean(picked, 0)?;
    Ok(tape.scale(mean, -1.0))
}
