//! Single-threaded deterministic training loop and evaluation helpers.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{sample_clip, FeatureSequence};
use crate::error::{PatError, Result};
use crate::loss;
use crate::metrics::{self, EvalBatch, MapReport};
use crate::model::{ModelConfig, PatModel};
use crate::optim::ParamSet;
use crate::tape::Tape;
use crate::tensor::Scalar;

fn default_batch_size() -> usize {
    3
}
fn default_lr() -> f64 {
    1e-4
}
fn default_decay_period() -> usize {
    10
}
fn default_epochs() -> usize {
    30
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainParams {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    /// Learning rate is divided by 10 every this many epochs.
    #[serde(default = "default_decay_period")]
    pub lr_decay_period: usize,
    #[serde(default)]
    pub seed: u64,
    /// Clip length sampled from each sequence; defaults to the model's T.
    #[serde(default)]
    pub clip_len: Option<usize>,
}

impl Default for TrainParams {
    fn default() -> Self {
        TrainParams {
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            lr: default_lr(),
            lr_decay_period: default_decay_period(),
            seed: 0,
            clip_len: None,
        }
    }
}

/// Serializable experiment description consumed by the command line tools.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainParams,
}

#[derive(Clone, Debug, Serialize)]
pub struct EpochStat {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
}

/// Train in place; returns per-epoch mean clip losses. `on_epoch` runs after
/// every epoch (checkpointing, logging) and may abort training with an error.
pub fn train_model<F>(
    model: &PatModel,
    params: &mut ParamSet<f32>,
    dataset: &[FeatureSequence],
    tp: &TrainParams,
    mut on_epoch: F,
) -> Result<Vec<EpochStat>>
where
    F: FnMut(&EpochStat, &ParamSet<f32>) -> Result<()>,
{
    if dataset.is_empty() {
        return Err(PatError::Config("empty training dataset".into()));
    }
    if tp.batch_size == 0 || tp.epochs == 0 {
        return Err(PatError::Config("batch_size and epochs must be positive".into()));
    }
    let clip_len = tp.clip_len.unwrap_or(model.cfg.t);
    let mut rng = ChaCha8Rng::seed_from_u64(tp.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut stats = Vec::with_capacity(tp.epochs);

    for epoch in 0..tp.epochs {
        let lr = tp.lr / 10f64.powi((epoch / tp.lr_decay_period) as i32);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut clips = 0usize;
        for batch in order.chunks(tp.batch_size) {
            params.clear_grads();
            for &idx in batch {
                let (tokens, labels) = sample_clip(&dataset[idx], clip_len, &mut rng)?;
                let mut tape = Tape::new();
                let bound = params.bind(&mut tape)?;
                let vars = bound.vars.clone();
                let tv = tape.constant(tokens)?;
                let out = model.forward(&mut tape, &bound, tv)?;
                let heads = out.heads(&model.cfg);
                drop(bound);
                let l = loss::total_loss(&mut tape, &heads, &labels, clip_len, &model.cfg.loss)?;
                epoch_loss += Scalar::to_f64(tape.value(l).data()[0]);
                clips += 1;
                tape.backward(l)?;
                params.harvest_grads(&tape, &vars);
            }
            params.scale_grads(1.0 / batch.len() as f32);
            params.adam_step(lr, 0.9, 0.999, 1e-8)?;
        }
        let stat = EpochStat { epoch, mean_loss: epoch_loss / clips as f64, lr };
        on_epoch(&stat, params)?;
        stats.push(stat);
    }
    Ok(stats)
}

/// Full-sequence evaluation: fused head predictions pooled over the dataset.
pub fn eval_map(
    model: &PatModel,
    params: &ParamSet<f32>,
    dataset: &[FeatureSequence],
) -> Result<MapReport> {
    eval_map_impl(model, params, dataset, None)
}

/// Evaluation with an explicit (fine, coarse) fusion weight override.
pub fn eval_map_with_alpha(
    model: &PatModel,
    params: &ParamSet<f32>,
    dataset: &[FeatureSequence],
    alpha: (f64, f64),
) -> Result<MapReport> {
    eval_map_impl(model, params, dataset, Some(alpha))
}

fn eval_map_impl(
    model: &PatModel,
    params: &ParamSet<f32>,
    dataset: &[FeatureSequence],
    alpha: Option<(f64, f64)>,
) -> Result<MapReport> {
    if dataset.is_empty() {
        return Err(PatError::Config("empty evaluation dataset".into()));
    }
    let mut batch = EvalBatch::new(dataset[0].classes);
    for seq in dataset {
        let preds = model.predict(params, &seq.tokens, alpha)?;
        let scores: Vec<f64> = preds.data().iter().map(|&v| Scalar::to_f64(v)).collect();
        batch.push_sequence(&scores, &seq.labels)?;
    }
    metrics::per_frame_map(&batch)
}

/// Reference point for learnability checks: every frame of every class gets
/// the same constant score, so AP collapses to what label order alone gives.
pub fn baseline_map(dataset: &[FeatureSequence]) -> Result<MapReport> {
    if dataset.is_empty() {
        return Err(PatError::Config("empty evaluation dataset".into()));
    }
    let mut batch = EvalBatch::new(dataset[0].classes);
    for seq in dataset {
        let scores = vec![0.5; seq.len() * seq.classes];
        batch.push_sequence(&scores, &seq.labels)?;
    }
    metrics::per_frame_map(&batch)
}

/// Mean clip loss over a dataset without touching parameters; used to compare
/// start-of-training and end-of-training loss under identical sampling.
pub fn mean_loss(
    model: &PatModel,
    params: &ParamSet<f32>,
    dataset: &[FeatureSequence],
    clip_len: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for seq in dataset {
        let (tokens, labels) = sample_clip(seq, clip_len, &mut rng)?;
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape)?;
        let tv = tape.constant(tokens)?;
        let out = model.forward(&mut tape, &bound, tv)?;
        let heads = out.heads(&model.cfg);
        let l = loss::total_loss(&mut tape, &heads, &labels, clip_len, &model.cfg.loss)?;
        total += Scalar::to_f64(tape.value(l).data()[0]);
    }
    Ok(total / dataset.len() as f64)
}
