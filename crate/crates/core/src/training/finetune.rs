use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    derive_seed, eval_batches, metric, run_loop, streams, Adam, AdamConfig, EpochRecord, LoopSpec, LrSchedule,
    MetricKind, PlateauConfig, Validation,
};
use crate::autodiff::{ParamKind, ParamStore, Tape, Tensor, Var};
use crate::checkpoint::{Checkpoint, CheckpointKind, TargetInfo, FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::molgraph::{featurize, split_random, Dataset, MolecularGraph, TargetStats};
use crate::net2d::{DegreeStats, GraphBatch, Net2D, Net2DConfig, PREFIX as NET2D_PREFIX};
use crate::nn::{Mlp, Mode, Norm};

/// Parameter-name prefix of the freshly initialized prediction head.
pub const HEAD_PREFIX: &str = "head";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    #[default]
    Regression,
    /// Binary labels in {0, 1}; the head outputs a logit.
    Classification,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub hidden: usize,
    pub layers: usize,
    pub batch_norm: bool,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            hidden: 256,
            layers: 2,
            batch_norm: false,
        }
    }
}

impl HeadConfig {
    pub(crate) fn mlp(&self, input: usize, dropout: f64) -> Result<Mlp> {
        Ok(Mlp::new(HEAD_PREFIX, input, self.hidden, 1, self.layers)?
            .with_norm(Norm {
                mid: self.batch_norm,
                last: false,
                momentum: 0.1,
            })
            .with_dropout(dropout))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub net2d: Net2DConfig,
    pub head: HeadConfig,
    pub optimizer: AdamConfig,
    /// Warmup spans of the batch-norm, head and remaining parameter groups,
    /// ramped in that order.
    pub warmup: [u64; 3],
    pub plateau: PlateauConfig,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub task: Task,
    /// Reported metric; MAE for regression and ROC-AUC for classification
    /// when unset.
    pub metric: Option<MetricKind>,
    /// Train, validation and test fractions used by [`finetune`].
    pub split: (f64, f64, f64),
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            net2d: Net2DConfig::default(),
            head: HeadConfig::default(),
            optimizer: AdamConfig {
                lr: 7e-5,
                weight_decay: 1e-11,
                ..AdamConfig::default()
            },
            warmup: [700, 700, 350],
            plateau: PlateauConfig::FINETUNE,
            batch_size: 128,
            max_epochs: 100,
            seed: 0,
            task: Task::Regression,
            metric: None,
            split: (0.8, 0.1, 0.1),
        }
    }
}

impl FinetuneConfig {
    pub fn metric_kind(&self) -> MetricKind {
        self.metric.unwrap_or(match self.task {
            Task::Regression => MetricKind::Mae,
            Task::Classification => MetricKind::RocAuc,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.net2d.validate()?;
        self.optimizer.validate()?;
        self.plateau.validate()?;
        if self.head.layers == 0 || self.head.hidden == 0 {
            return Err(Error::invalid("head needs at least one layer and a positive width"));
        }
        if self.batch_size < 2 {
            return Err(Error::invalid("fine-tuning batch size must be at least 2"));
        }
        if self.task == Task::Regression && self.metric_kind() == MetricKind::RocAuc {
            return Err(Error::invalid("roc_auc needs a classification task"));
        }
        Ok(())
    }
}

/// Where the 2D encoder weights come from.
#[derive(Debug, Clone)]
pub enum FinetuneInit {
    /// Fresh weights from the run seed.
    RandInit,
    /// Encoder weights and degree statistics transferred from a checkpoint.
    Pretrained(Box<Checkpoint>),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub count: usize,
    /// Loss on standardized targets (regression) or logits (classification).
    pub loss: f64,
    pub metric: MetricKind,
    /// In the target's original units.
    pub value: f64,
    pub mae: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub target: String,
    pub best_epoch: usize,
    pub train: SplitMetrics,
    pub val: SplitMetrics,
    pub test: SplitMetrics,
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub report: FinetuneReport,
    /// Best-validation encoder and head.
    pub best: Checkpoint,
    pub records: Vec<EpochRecord>,
}

/// Names of the configuration fields that differ between two encoders,
/// ignoring settings that do not affect the parameter shapes or forward
/// semantics at inference (dropout).
fn differing_fields(a: &Net2DConfig, b: &Net2DConfig) -> Vec<String> {
    let (Ok(serde_json::Value::Object(a)), Ok(serde_json::Value::Object(b))) =
        (serde_json::to_value(a), serde_json::to_value(b))
    else {
        return vec!["<unserializable>".into()];
    };
    a.iter()
        .filter(|(k, v)| k.as_str() != "dropout" && b.get(*k) != Some(*v))
        .map(|(k, _)| k.clone())
        .collect()
}

struct Split {
    graphs: Vec<MolecularGraph>,
    /// Standardized for regression, raw labels for classification.
    targets: Vec<f64>,
}

fn prepare(dataset: &Dataset, target: &str, net2d: &Net2DConfig, task: Task, stats: &TargetStats) -> Result<Split> {
    let mut graphs = Vec::with_capacity(dataset.len());
    let mut targets = Vec::with_capacity(dataset.len());
    for m in &dataset.molecules {
        let y = m.graph.target(target).ok_or_else(|| Error::InvalidMolecule {
            id: m.graph.id.clone(),
            message: format!("no value for target '{target}'"),
        })?;
        if !y.is_finite() {
            return Err(Error::InvalidMolecule {
                id: m.graph.id.clone(),
                message: format!("target '{target}' is not finite"),
            });
        }
        graphs.push(if m.graph.feature_scheme == Some(net2d.features) {
            m.graph.clone()
        } else {
            featurize(&m.graph, net2d.features)
        });
        targets.push(match task {
            Task::Regression => stats.standardize(y),
            Task::Classification => y,
        });
    }
    Ok(Split { graphs, targets })
}

struct Model<'a> {
    net2d: &'a Net2D,
    head: Mlp,
    task: Task,
}

impl Model<'_> {
    /// `N × 1` head outputs.
    fn outputs(&self, tape: &mut Tape, store: &ParamStore, graphs: &[&MolecularGraph], mode: &mut Mode) -> Result<Var> {
        let batch = GraphBatch::new(graphs)?;
        let z = self.net2d.forward(tape, store, &batch, mode)?;
        let width = self.net2d.config.d_z * self.net2d.config.num_outputs;
        let z = tape.reshape(z, graphs.len(), width)?;
        self.head.forward(tape, store, z, mode)
    }

    fn loss(&self, tape: &mut Tape, out: Var, targets: &[f64]) -> Result<Var> {
        let y = tape.constant(Tensor::column_vector(targets.to_vec()));
        match self.task {
            Task::Regression => {
                let d = tape.sub(out, y)?;
                let sq = tape.mul(d, d)?;
                Ok(tape.mean(sq))
            }
            Task::Classification => {
                // softplus(x) − y·x = −[y log σ(x) + (1 − y) log(1 − σ(x))]
                let sp = tape.softplus(out);
                let yx = tape.mul(y, out)?;
                let l = tape.sub(sp, yx)?;
                Ok(tape.mean(l))
            }
        }
    }

    fn batch_loss(&self, tape: &mut Tape, store: &ParamStore, split: &Split, idx: &[usize], mode: &mut Mode) -> Result<Var> {
        let graphs: Vec<&MolecularGraph> = idx.iter().map(|&i| &split.graphs[i]).collect();
        let targets: Vec<f64> = idx.iter().map(|&i| split.targets[i]).collect();
        let out = self.outputs(tape, store, &graphs, mode)?;
        self.loss(tape, out, &targets)
    }

    /// Eval-mode loss and raw head outputs over a whole split.
    fn evaluate(&self, store: &ParamStore, split: &Split, batch_size: usize) -> Result<(f64, Vec<f64>)> {
        let mut outputs = Vec::with_capacity(split.graphs.len());
        let mut total = 0.0;
        for idx in eval_batches(split.graphs.len(), batch_size, 1) {
            let graphs: Vec<&MolecularGraph> = idx.iter().map(|&i| &split.graphs[i]).collect();
            let targets: Vec<f64> = idx.iter().map(|&i| split.targets[i]).collect();
            let mut tape = Tape::new();
            let out = self.outputs(&mut tape, store, &graphs, &mut Mode::eval())?;
            let l = self.loss(&mut tape, out, &targets)?;
            total += tape.item(l)? * idx.len() as f64;
            outputs.extend_from_slice(tape.value(out).data());
        }
        Ok((total / split.graphs.len() as f64, outputs))
    }
}

fn split_metrics(
    model: &Model<'_>,
    store: &ParamStore,
    split: &Split,
    cfg: &FinetuneConfig,
    stats: &TargetStats,
) -> Result<SplitMetrics> {
    let (loss, outputs) = model.evaluate(store, split, cfg.batch_size)?;
    let (preds, labels): (Vec<f64>, Vec<f64>) = match cfg.task {
        Task::Regression => (
            outputs.iter().map(|&o| stats.destandardize(o)).collect(),
            split.targets.iter().map(|&t| stats.destandardize(t)).collect(),
        ),
        Task::Classification => (outputs, split.targets.clone()),
    };
    let kind = cfg.metric_kind();
    let mae_preds: Vec<f64> = match cfg.task {
        Task::Regression => preds.clone(),
        Task::Classification => preds.iter().map(|&x| 1.0 / (1.0 + (-x).exp())).collect(),
    };
    Ok(SplitMetrics {
        count: split.graphs.len(),
        loss,
        metric: kind,
        value: metric(kind, &preds, &labels)?,
        mae: super::mae(&mae_preds, &labels)?,
    })
}

/// Splits `dataset` with the configured ratios and seed, then runs
/// [`finetune_splits`].
pub fn finetune(cfg: &FinetuneConfig, init: &FinetuneInit, dataset: &Dataset, target: &str) -> Result<FinetuneOutcome> {
    let (train, val, test) = split_random(dataset.clone(), cfg.split, cfg.seed)?;
    finetune_splits(cfg, init, &train, &val, &test, target)
}

/// Fine-tunes the 2D encoder plus a fresh head on one target. Regression
/// targets are z-scored by training statistics; reported metrics are in the
/// original units. Model selection uses validation MAE for regression and
/// validation loss for classification.
pub fn finetune_splits(
    cfg: &FinetuneConfig,
    init: &FinetuneInit,
    train: &Dataset,
    val: &Dataset,
    test: &Dataset,
    target: &str,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    train.target_index(target)?;
    let stats = match cfg.task {
        Task::Regression => {
            let values: Vec<f64> = train.molecules.iter().filter_map(|m| m.graph.target(target)).collect();
            TargetStats::from_values(&values)
        }
        Task::Classification => TargetStats { mean: 0.0, std: 1.0 },
    };
    let train_split = prepare(train, target, &cfg.net2d, cfg.task, &stats)?;
    let val_split = prepare(val, target, &cfg.net2d, cfg.task, &stats)?;
    let test_split = prepare(test, target, &cfg.net2d, cfg.task, &stats)?;
    if train_split.graphs.len() < 2 || val_split.graphs.is_empty() || test_split.graphs.is_empty() {
        return Err(Error::invalid("fine-tuning needs at least 2 training and 1 validation and test molecule"));
    }

    let net2d = match init {
        FinetuneInit::RandInit => Net2D::new(
            cfg.net2d.clone(),
            DegreeStats::from_graphs(train_split.graphs.iter())?,
        )?,
        FinetuneInit::Pretrained(ckpt) => {
            let diff = differing_fields(&ckpt.net2d.config, &cfg.net2d);
            if !diff.is_empty() {
                return Err(Error::ConfigMismatch(format!(
                    "net2d configuration differs from the checkpoint in: {}",
                    diff.join(", ")
                )));
            }
            let mut config = ckpt.net2d.config.clone();
            config.dropout = cfg.net2d.dropout;
            Net2D::new(config, ckpt.net2d.degree_stats)?
        }
    };
    let head_input = net2d.config.d_z * net2d.config.num_outputs;
    let model = Model {
        net2d: &net2d,
        head: cfg.head.mlp(head_input, net2d.config.dropout)?,
        task: cfg.task,
    };

    let mut store = ParamStore::new(cfg.seed);
    net2d.init_params(&mut store, &mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, streams::INIT_2D)))?;
    if let FinetuneInit::Pretrained(ckpt) = init {
        store.copy_prefix_from(&ckpt.params, &format!("{NET2D_PREFIX}."))?;
    }
    model
        .head
        .init(&mut store, &mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, streams::INIT_HEAD)))?;

    let groups: BTreeMap<String, usize> = store
        .iter()
        .map(|(name, p)| {
            let g = if p.kind == ParamKind::BatchNorm {
                0
            } else if name.starts_with(&format!("{HEAD_PREFIX}.")) {
                1
            } else {
                2
            };
            (name.clone(), g)
        })
        .collect();

    let adam = Adam::new(cfg.optimizer)?;
    let schedule = LrSchedule::new(cfg.optimizer.lr, cfg.warmup.to_vec(), cfg.plateau)?;
    let spec = LoopSpec {
        train_len: train_split.graphs.len(),
        batch_size: cfg.batch_size,
        max_epochs: cfg.max_epochs,
        seed: cfg.seed,
        min_batch: 2,
    };
    let outcome = run_loop(
        store,
        &spec,
        adam,
        schedule,
        |name| groups.get(name).copied().unwrap_or(2),
        |tape, store, batch, mode| model.batch_loss(tape, store, &train_split, batch, mode).map(Some),
        |store| {
            let m = split_metrics(&model, store, &val_split, cfg, &stats)?;
            let criterion = match cfg.task {
                Task::Regression => m.mae,
                Task::Classification => m.loss,
            };
            Ok(Some(Validation {
                loss: m.loss,
                metric: Some(m.value),
                criterion,
            }))
        },
    )?;

    let best_store = outcome.best;
    let report = FinetuneReport {
        target: target.to_string(),
        best_epoch: outcome.best_epoch,
        train: split_metrics(&model, &best_store, &train_split, cfg, &stats)?,
        val: split_metrics(&model, &best_store, &val_split, cfg, &stats)?,
        test: split_metrics(&model, &best_store, &test_split, cfg, &stats)?,
    };
    let best_step = outcome.records.get(outcome.best_epoch).map_or(0, |r| r.step);
    let best = Checkpoint {
        format_version: FORMAT_VERSION,
        kind: CheckpointKind::Finetune,
        net2d: net2d.clone(),
        net3d: None,
        distance_head: None,
        loss: None,
        target: Some(TargetInfo {
            name: target.to_string(),
            task: cfg.task,
            stats,
            head: cfg.head,
        }),
        params: best_store,
        optimizer: None,
        schedule: None,
        seed: cfg.seed,
        epoch: outcome.best_epoch,
        step: best_step,
    };
    Ok(FinetuneOutcome {
        report,
        best,
        records: outcome.records,
    })
}

/// Predictions of a fine-tuned checkpoint in the target's original units
/// (regression) or as probabilities (classification).
pub fn predict(checkpoint: &Checkpoint, graphs: &[MolecularGraph]) -> Result<Vec<f64>> {
    let info = checkpoint
        .target
        .as_ref()
        .ok_or_else(|| Error::Checkpoint("checkpoint has no prediction head".into()))?;
    let net2d = &checkpoint.net2d;
    let model = Model {
        net2d,
        head: info.head.mlp(net2d.config.d_z * net2d.config.num_outputs, 0.0)?,
        task: info.task,
    };
    let featurized: Vec<MolecularGraph> = graphs
        .iter()
        .map(|g| {
            if g.feature_scheme == Some(net2d.config.features) {
                g.clone()
            } else {
                featurize(g, net2d.config.features)
            }
        })
        .collect();
    let mut out = Vec::with_capacity(graphs.len());
    for idx in eval_batches(featurized.len(), 256, 1) {
        let refs: Vec<&MolecularGraph> = idx.iter().map(|&i| &featurized[i]).collect();
        let mut tape = Tape::new();
        let o = model.outputs(&mut tape, &checkpoint.params, &refs, &mut Mode::eval())?;
        out.extend(tape.value(o).data().iter().map(|&x| match info.task {
            Task::Regression => info.stats.destandardize(x),
            Task::Classification => 1.0 / (1.0 + (-x).exp()),
        }));
    }
    Ok(out)
}
