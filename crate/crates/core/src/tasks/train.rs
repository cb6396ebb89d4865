use rand::seq::SliceRandom;

use super::config::{RunConfig, TrainConfig};
use super::TaskError;
use crate::encoder::init_encoder_params;
use crate::nn::{adam_step, clip_grad_norm, AdamConfig, AdamState, ModelParams, Tape, Var};
use crate::rng::{derive_seed, seeded, SplitMix64};

const HEAD_STREAM: u64 = 0x4845_4144;
const SHUFFLE_STREAM: u64 = 0x5348_5546;
const BATCH_STREAM: u64 = 0x4241_5443;

/// Outcome of one training run. The loss curve holds the mean batch loss of
/// each epoch.
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub config: RunConfig,
    pub seed: u64,
    pub loss_curve: Vec<f64>,
    pub params: ModelParams,
}

impl TrainRun {
    pub fn final_loss(&self) -> Option<f64> {
        self.loss_curve.last().copied()
    }
}

/// Encoder parameters from the run seed, then task heads from a derived
/// stream so the two never share random draws.
pub(crate) fn init_model(config: &RunConfig, heads: impl FnOnce(&mut ModelParams, &mut SplitMix64)) -> Result<ModelParams, TaskError> {
    let mut params = ModelParams::new(config.train.seed);
    init_encoder_params(&config.model, &mut params)?;
    let mut rng = seeded(derive_seed(config.train.seed, HEAD_STREAM));
    heads(&mut params, &mut rng);
    Ok(params)
}

/// Seed for batch-local randomness (e.g. rewrite positives).
pub(crate) fn batch_seed(seed: u64, epoch: usize, batch: usize) -> u64 {
    derive_seed(derive_seed(seed, BATCH_STREAM ^ epoch as u64), batch as u64)
}

/// Mini-batch Adam over `n_items` examples. `step` records one batch on a
/// fresh tape and returns the objective to minimise together with the value
/// logged in the loss curve (usually the same variable), or `None` when the
/// batch contributes nothing.
pub(crate) fn train_loop<F>(n_items: usize, cfg: &TrainConfig, params: &mut ModelParams, mut step: F) -> Result<Vec<f64>, TaskError>
where
    F: FnMut(&ModelParams, &[usize], u64, usize, &mut Tape<f32>) -> Result<Option<(Var, Var)>, TaskError>,
{
    let adam = AdamConfig { lr: cfg.lr, ..AdamConfig::default() };
    let mut state = AdamState::new();
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..n_items).collect();
    for epoch in 0..cfg.epochs {
        if epoch > 0 && epoch == cfg.warmup_epochs {
            // The objective changes here; moments sized for the old gradients
            // would blow up the first steps on the new one.
            state = AdamState::new();
        }
        order.shuffle(&mut seeded(derive_seed(cfg.seed, SHUFFLE_STREAM ^ epoch as u64)));
        let mut total = 0.0;
        let mut batches = 0usize;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut tape = Tape::<f32>::new();
            let Some((loss, logged)) = step(params, chunk, batch_seed(cfg.seed, epoch, b), epoch, &mut tape)? else { continue };
            let value = tape.value(logged).item() as f64;
            if !(tape.value(loss).item() as f64).is_finite() {
                return Err(TaskError::NonFinite { epoch: epoch + 1 });
            }
            if !value.is_finite() {
                return Err(TaskError::NonFinite { epoch: epoch + 1 });
            }
            tape.backward(loss)?;
            let mut grads = tape.param_grads();
            if cfg.grad_clip > 0.0 {
                let norm = clip_grad_norm(&mut grads, cfg.grad_clip);
                if !norm.is_finite() {
                    return Err(TaskError::NonFinite { epoch: epoch + 1 });
                }
            }
            adam_step(params, &grads, &mut state, &adam);
            total += value;
            batches += 1;
        }
        curve.push(if batches == 0 { 0.0 } else { total / batches as f64 });
    }
    Ok(curve)
}
