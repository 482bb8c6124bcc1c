//! Optimizer, learning-rate schedules, metrics and the pre-training,
//! fine-tuning and embedding workflows.

mod embed;
mod finetune;
mod metrics;
mod optim;
mod pretrain;
mod schedule;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use embed::{embed, format_embeddings};
pub use finetune::{
    finetune, finetune_splits, predict, FinetuneConfig, FinetuneInit, FinetuneOutcome, FinetuneReport, HeadConfig, SplitMetrics, Task,
    HEAD_PREFIX,
};
pub use metrics::{mae, metric, rmse, roc_auc, MetricKind};
pub use optim::{Adam, AdamConfig};
pub use pretrain::{pretrain, pretrain_distance, ConformerSampling, PretrainConfig, PretrainOutcome};
pub use schedule::{LrSchedule, Plateau, PlateauConfig};

use crate::autodiff::{ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::Mode;

/// Independent seed for a named purpose, derived from a run seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.next_u64()
}

pub(crate) mod streams {
    pub const INIT_2D: u64 = 1;
    pub const INIT_3D: u64 = 2;
    pub const INIT_HEAD: u64 = 3;
    pub const SHUFFLE: u64 = 4;
    pub const DROPOUT: u64 = 5;
    pub const AUGMENT: u64 = 6;
}

/// One line of the metrics report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: u64,
    /// Learning rate of each parameter group at the end of the epoch.
    pub lr: Vec<f64>,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_metric: Option<f64>,
}

/// Result of validating a model. `criterion` drives the plateau schedule
/// and best-epoch selection; lower is better.
pub(crate) struct Validation {
    pub loss: f64,
    pub metric: Option<f64>,
    pub criterion: f64,
}

pub(crate) struct LoopSpec {
    pub train_len: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
    /// Smallest usable batch; trailing batches below it are dropped.
    pub min_batch: usize,
}

pub(crate) struct LoopOutcome {
    pub best: ParamStore,
    pub best_epoch: usize,
    pub last: ParamStore,
    pub adam: Adam,
    pub schedule: LrSchedule,
    pub records: Vec<EpochRecord>,
}

/// Shuffled batches of indices for one epoch.
pub(crate) fn epoch_batches(len: usize, batch_size: usize, min_batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(rng);
    order
        .chunks(batch_size)
        .filter(|c| c.len() >= min_batch)
        .map(<[usize]>::to_vec)
        .collect()
}

/// Consecutive evaluation batches; a trailing batch below `min_batch` is
/// merged into the one before it.
pub(crate) fn eval_batches(len: usize, batch_size: usize, min_batch: usize) -> Vec<Vec<usize>> {
    let mut batches: Vec<Vec<usize>> = (0..len).collect::<Vec<_>>().chunks(batch_size).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() < min_batch) {
        let tail = batches.pop().unwrap_or_default();
        if let Some(prev) = batches.last_mut() {
            prev.extend(tail);
        }
    }
    batches
}

/// Shared epoch loop: batches, backward, Adam, batch-norm buffers, plateau
/// schedule and best-epoch selection (strictly lower criterion). Without a
/// validation set the mean training loss is the criterion.
pub(crate) fn run_loop<L, V>(
    mut store: ParamStore,
    spec: &LoopSpec,
    mut adam: Adam,
    mut schedule: LrSchedule,
    group_of: impl Fn(&str) -> usize,
    mut batch_loss: L,
    mut validate: V,
) -> Result<LoopOutcome>
where
    L: FnMut(&mut Tape, &ParamStore, &[usize], &mut Mode) -> Result<Option<Var>>,
    V: FnMut(&ParamStore) -> Result<Option<Validation>>,
{
    if spec.batch_size < spec.min_batch {
        return Err(Error::invalid(format!(
            "batch size {} is below the minimum of {}",
            spec.batch_size, spec.min_batch
        )));
    }
    let mut shuffle = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, streams::SHUFFLE));
    let mut dropout = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, streams::DROPOUT));
    let mut records = Vec::with_capacity(spec.max_epochs);
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let groups: Vec<usize> = (0..schedule.num_groups()).collect();

    for epoch in 0..spec.max_epochs {
        let batches = epoch_batches(spec.train_len, spec.batch_size, spec.min_batch, &mut shuffle);
        if batches.is_empty() {
            return Err(Error::invalid(format!(
                "training set of {} molecules yields no batch of at least {}",
                spec.train_len, spec.min_batch
            )));
        }
        let mut total = 0.0;
        let mut counted = 0usize;
        for batch in &batches {
            let mut tape = Tape::new();
            let mut mode = Mode::train(dropout.random());
            let Some(loss) = batch_loss(&mut tape, &store, batch, &mut mode)? else {
                continue;
            };
            let value = tape.item(loss)?;
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("training loss at epoch {epoch}")));
            }
            let grads = tape.backward(loss)?;
            store.zero_grad();
            store.accumulate_grads(&grads.params())?;
            let step = adam.step + 1;
            let lrs: Vec<f64> = groups.iter().map(|&g| schedule.lr_at(step, g)).collect();
            adam.step(&mut store, |name| lrs[group_of(name)])?;
            for (name, value) in tape.take_buffer_updates() {
                store.set_buffer(&name, value)?;
            }
            total += value;
            counted += 1;
        }
        store.zero_grad();
        let train_loss = if counted > 0 { total / counted as f64 } else { f64::NAN };
        let validation = validate(&store)?;
        let (val_loss, val_metric, criterion) = match &validation {
            Some(v) => (Some(v.loss), v.metric, v.criterion),
            None => (None, None, train_loss),
        };
        schedule.observe(adam.step, criterion);
        if best.as_ref().is_none_or(|(b, _, _)| criterion < *b) {
            best = Some((criterion, epoch, store.clone()));
        }
        records.push(EpochRecord {
            epoch,
            step: adam.step,
            lr: groups.iter().map(|&g| schedule.lr_at(adam.step + 1, g)).collect(),
            train_loss,
            val_loss,
            val_metric,
        });
    }
    let (_, best_epoch, best_store) = best.unwrap_or((f64::NAN, 0, store.clone()));
    Ok(LoopOutcome {
        best: best_store,
        best_epoch,
        last: store,
        adam,
        schedule,
        records,
    })
}
