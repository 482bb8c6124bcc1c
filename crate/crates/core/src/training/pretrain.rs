use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{derive_seed, eval_batches, run_loop, streams, Adam, AdamConfig, EpochRecord, LoopSpec, LrSchedule, PlateauConfig, Validation};
use crate::autodiff::{ParamStore, Tape, Var};
use crate::checkpoint::{Checkpoint, CheckpointKind, FORMAT_VERSION};
use crate::conformer::{pairwise_distances, sample_conformer, select_conformers, Conformer, ConformerSet, SamplingStrategy};
use crate::error::{Error, Result};
use crate::losses::{contrastive_loss, distance_mse, DistanceHead, DistanceHeadConfig, LossConfig, LossKind};
use crate::molgraph::{node_drop, Dataset, MolecularGraph, Molecule};
use crate::net2d::{DegreeStats, GraphBatch, Net2D, Net2DConfig};
use crate::net3d::{Net3D, Net3DConfig};
use crate::nn::Mode;

/// How the single conformer of the one-conformer loss is chosen.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConformerSampling {
    #[default]
    Lowest,
    Uniform,
    Boltzmann,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub net2d: Net2DConfig,
    pub net3d: Net3DConfig,
    pub loss: LossConfig,
    pub distance_head: DistanceHeadConfig,
    pub optimizer: AdamConfig,
    pub warmup_steps: u64,
    pub plateau: PlateauConfig,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub sampling: ConformerSampling,
    /// Fraction of atoms removed from each training molecule (and its
    /// conformers) per step.
    pub node_drop: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            net2d: Net2DConfig::default(),
            net3d: Net3DConfig::default(),
            loss: LossConfig::default(),
            distance_head: DistanceHeadConfig::default(),
            optimizer: AdamConfig::default(),
            warmup_steps: 700,
            plateau: PlateauConfig::PRETRAIN,
            batch_size: 500,
            max_epochs: 100,
            seed: 0,
            sampling: ConformerSampling::Lowest,
            node_drop: 0.0,
        }
    }
}

impl PretrainConfig {
    /// Copy with derived fields filled in: the 2D encoder emits one vector
    /// per conformer for set-similarity losses.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.net2d.num_outputs = c.loss.kind.outputs_2d(c.loss.num_conformers);
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.net2d.validate()?;
        self.net3d.validate()?;
        self.loss.validate()?;
        self.optimizer.validate()?;
        self.plateau.validate()?;
        if self.loss.kind.is_contrastive() && self.net2d.d_z != self.net3d.d_z {
            return Err(Error::ConfigMismatch(format!(
                "net2d.d_z = {} but net3d.d_z = {}; cosine similarity needs equal widths",
                self.net2d.d_z, self.net3d.d_z
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::invalid(format!(
                "batch size must be at least 2 so every molecule has a negative, got {}",
                self.batch_size
            )));
        }
        if !(0.0..1.0).contains(&self.node_drop) {
            return Err(Error::invalid("node_drop must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    /// Weights of the epoch with the lowest validation loss.
    pub best: Checkpoint,
    /// Final weights with optimizer and schedule state.
    pub last: Checkpoint,
    pub records: Vec<EpochRecord>,
}

fn conformers_of(m: &Molecule) -> Result<&ConformerSet> {
    m.conformers.as_ref().ok_or_else(|| Error::InvalidMolecule {
        id: m.graph.id.clone(),
        message: "pre-training needs 3D coordinates".into(),
    })
}

fn prepare(dataset: &Dataset, net2d: &Net2DConfig) -> Result<Vec<Molecule>> {
    let mut out = Vec::with_capacity(dataset.len());
    for m in &dataset.molecules {
        conformers_of(m)?;
        let mut m = m.clone();
        if m.graph.feature_scheme != Some(net2d.features) {
            m.graph = crate::molgraph::featurize(&m.graph, net2d.features);
        }
        out.push(m);
    }
    Ok(out)
}

/// Graphs and conformers of one batch, after optional augmentation.
struct Views {
    graphs: Vec<MolecularGraph>,
    /// `c` conformers per molecule, molecule-major.
    conformers: Vec<Conformer>,
}

fn views(
    molecules: &[Molecule],
    batch: &[usize],
    cfg: &PretrainConfig,
    train: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Views> {
    let mut graphs = Vec::with_capacity(batch.len());
    let mut conformers = Vec::new();
    for &i in batch {
        let m = &molecules[i];
        let set = conformers_of(m)?;
        let (graph, set) = if train && cfg.node_drop > 0.0 {
            let (g, s) = node_drop(&m.graph, Some(set), cfg.node_drop, rng)?;
            (g, s.ok_or_else(|| Error::invalid("node drop lost the conformers"))?)
        } else {
            (m.graph.clone(), set.clone())
        };
        match cfg.loss.kind {
            LossKind::NtxentEq1 | LossKind::DistanceMse => {
                let conf = match (cfg.sampling, train) {
                    (ConformerSampling::Lowest, _) | (_, false) => set.lowest_energy(),
                    (ConformerSampling::Uniform, true) => sample_conformer(&set, SamplingStrategy::Uniform, rng)?,
                    (ConformerSampling::Boltzmann, true) => sample_conformer(&set, SamplingStrategy::boltzmann(), rng)?,
                };
                conformers.push(conf.clone());
            }
            _ => conformers.extend(select_conformers(&set, cfg.loss.num_conformers)?),
        }
        graphs.push(graph);
    }
    Ok(Views { graphs, conformers })
}

fn contrastive_batch_loss(
    tape: &mut Tape,
    store: &ParamStore,
    net2d: &Net2D,
    net3d: &Net3D,
    cfg: &PretrainConfig,
    v: &Views,
    mode: &mut Mode,
) -> Result<Var> {
    let graph_refs: Vec<&MolecularGraph> = v.graphs.iter().collect();
    let gb = GraphBatch::new(&graph_refs)?;
    let conf_refs: Vec<&Conformer> = v.conformers.iter().collect();
    let cb = net3d.batch(&conf_refs)?;
    let za = net2d.forward(tape, store, &gb, mode)?;
    let zb = net3d.forward(tape, store, &cb, mode)?;
    contrastive_loss(tape, &cfg.loss, za, zb)
}

fn distance_batch_loss(
    tape: &mut Tape,
    store: &ParamStore,
    net2d: &Net2D,
    head: &DistanceHead,
    v: &Views,
    mode: &mut Mode,
) -> Result<Option<Var>> {
    let graph_refs: Vec<&MolecularGraph> = v.graphs.iter().collect();
    let gb = GraphBatch::new(&graph_refs)?;
    let mut pairs = Vec::new();
    let mut targets = Vec::new();
    for (gi, conf) in v.conformers.iter().enumerate() {
        let base = gb.offsets[gi];
        for (u, w, d) in pairwise_distances(conf)?.pairs() {
            pairs.push((base + u, base + w));
            targets.push(d);
        }
    }
    if pairs.is_empty() {
        return Ok(None);
    }
    let h = net2d.node_representations(tape, store, &gb, mode)?;
    let pred = head.forward(tape, store, h, &pairs)?;
    Ok(Some(distance_mse(tape, pred, &targets)?))
}

fn validation_loss(
    val: Option<&[Molecule]>,
    batch_size: usize,
    mut f: impl FnMut(&[usize], &mut Tape, &mut Mode) -> Result<Option<Var>>,
) -> Result<Option<Validation>> {
    let Some(val) = val else { return Ok(None) };
    let mut total = 0.0;
    let mut weight = 0usize;
    for batch in eval_batches(val.len(), batch_size, 2) {
        let mut tape = Tape::new();
        let mut mode = Mode::eval();
        if let Some(l) = f(&batch, &mut tape, &mut mode)? {
            total += tape.item(l)? * batch.len() as f64;
            weight += batch.len();
        }
    }
    if weight == 0 {
        return Ok(None);
    }
    let loss = total / weight as f64;
    Ok(Some(Validation {
        loss,
        metric: None,
        criterion: loss,
    }))
}

fn checkpoint(
    kind: CheckpointKind,
    cfg: &PretrainConfig,
    net2d: &Net2D,
    net3d: Option<&Net3D>,
    head: Option<&DistanceHead>,
    params: ParamStore,
    state: Option<(&Adam, &LrSchedule)>,
    epoch: usize,
    step: u64,
) -> Checkpoint {
    Checkpoint {
        format_version: FORMAT_VERSION,
        kind,
        net2d: net2d.clone(),
        net3d: net3d.cloned(),
        distance_head: head.cloned(),
        loss: Some(cfg.loss),
        target: None,
        params,
        optimizer: state.map(|s| s.0.clone()),
        schedule: state.map(|s| s.1.clone()),
        seed: cfg.seed,
        epoch,
        step,
    }
}

/// Contrastive pre-training of the 2D and 3D encoders, optimized jointly.
/// Without a validation set the training loss drives the schedule.
pub fn pretrain(cfg: &PretrainConfig, train: &Dataset, val: Option<&Dataset>) -> Result<PretrainOutcome> {
    let cfg = cfg.resolved();
    cfg.validate()?;
    if !cfg.loss.kind.is_contrastive() {
        return Err(Error::invalid("use pretrain_distance for the distance_mse objective"));
    }
    if train.len() < 2 {
        return Err(Error::invalid("pre-training needs at least 2 molecules"));
    }
    let molecules = prepare(train, &cfg.net2d)?;
    let val_molecules = val.map(|v| prepare(v, &cfg.net2d)).transpose()?;
    let net2d = Net2D::new(cfg.net2d.clone(), DegreeStats::from_graphs(molecules.iter().map(|m| &m.graph))?)?;
    let net3d = Net3D::new(cfg.net3d.clone())?;
    let mut store = ParamStore::new(cfg.seed);
    net2d.init_params(&mut store, &mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, streams::INIT_2D)))?;
    net3d.init_params(&mut store, &mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, streams::INIT_3D)))?;

    let adam = Adam::new(cfg.optimizer)?;
    let schedule = LrSchedule::new(cfg.optimizer.lr, vec![cfg.warmup_steps], cfg.plateau)?;
    let spec = LoopSpec {
        train_len: molecules.len(),
        batch_size: cfg.batch_size,
        max_epochs: cfg.max_epochs,
        seed: cfg.seed,
        min_batch: 2,
    };
    let mut aug = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, streams::AUGMENT));
    let mut val_rng = ChaCha8Rng::seed_from_u64(0);
    let outcome = run_loop(
        store,
        &spec,
        adam,
        schedule,
        |_| 0,
        |tape, store, batch, mode| {
            let v = views(&molecules, batch, &cfg, true, &mut aug)?;
            contrastive_batch_loss(tape, store, &net2d, &net3d, &cfg, &v, mode).map(Some)
        },
        |store| {
            validation_loss(val_molecules.as_deref(), cfg.batch_size, |batch, tape, mode| {
                let v = views(val_molecules.as_deref().unwrap_or_default(), batch, &cfg, false, &mut val_rng)?;
                contrastive_batch_loss(tape, store, &net2d, &net3d, &cfg, &v, mode).map(Some)
            })
        },
    )?;
    let last_epoch = outcome.records.len().saturating_sub(1);
    let best_step = outcome.records.get(outcome.best_epoch).map_or(0, |r| r.step);
    Ok(PretrainOutcome {
        best: checkpoint(
            CheckpointKind::Pretrain,
            &cfg,
            &net2d,
            Some(&net3d),
            None,
            outcome.best,
            None,
            outcome.best_epoch,
            best_step,
        ),
        last: checkpoint(
            CheckpointKind::Pretrain,
            &cfg,
            &net2d,
            Some(&net3d),
            None,
            outcome.last,
            Some((&outcome.adam, &outcome.schedule)),
            last_epoch,
            outcome.adam.step,
        ),
        records: outcome.records,
    })
}

/// Pre-training baseline that regresses every interatomic distance of the
/// lowest-energy conformer from pairs of 2D node representations.
pub fn pretrain_distance(cfg: &PretrainConfig, train: &Dataset, val: Option<&Dataset>) -> Result<PretrainOutcome> {
    let mut cfg = cfg.resolved();
    cfg.loss.kind = LossKind::DistanceMse;
    cfg.net2d.num_outputs = 1;
    cfg.validate()?;
    if train.len() < 2 {
        return Err(Error::invalid("pre-training needs at least 2 molecules"));
    }
    let molecules = prepare(train, &cfg.net2d)?;
    let val_molecules = val.map(|v| prepare(v, &cfg.net2d)).transpose()?;
    let net2d = Net2D::new(cfg.net2d.clone(), DegreeStats::from_graphs(molecules.iter().map(|m| &m.graph))?)?;
    let head = DistanceHead::new(cfg.distance_head, cfg.net2d.hidden)?;
    let mut store = ParamStore::new(cfg.seed);
    net2d.init_params(&mut store, &mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, streams::INIT_2D)))?;
    head.init_params(&mut store, &mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, streams::INIT_HEAD)))?;

    let adam = Adam::new(cfg.optimizer)?;
    let schedule = LrSchedule::new(cfg.optimizer.lr, vec![cfg.warmup_steps], cfg.plateau)?;
    let spec = LoopSpec {
        train_len: molecules.len(),
        batch_size: cfg.batch_size,
        max_epochs: cfg.max_epochs,
        seed: cfg.seed,
        min_batch: 2,
    };
    let mut aug = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, streams::AUGMENT));
    let mut val_rng = ChaCha8Rng::seed_from_u64(0);
    let outcome = run_loop(
        store,
        &spec,
        adam,
        schedule,
        |_| 0,
        |tape, store, batch, mode| {
            let v = views(&molecules, batch, &cfg, true, &mut aug)?;
            distance_batch_loss(tape, store, &net2d, &head, &v, mode)
        },
        |store| {
            validation_loss(val_molecules.as_deref(), cfg.batch_size, |batch, tape, mode| {
                let v = views(val_molecules.as_deref().unwrap_or_default(), batch, &cfg, false, &mut val_rng)?;
                distance_batch_loss(tape, store, &net2d, &head, &v, mode)
            })
        },
    )?;
    let last_epoch = outcome.records.len().saturating_sub(1);
    let best_step = outcome.records.get(outcome.best_epoch).map_or(0, |r| r.step);
    Ok(PretrainOutcome {
        best: checkpoint(
            CheckpointKind::PretrainDistance,
            &cfg,
            &net2d,
            None,
            Some(&head),
            outcome.best,
            None,
            outcome.best_epoch,
            best_step,
        ),
        last: checkpoint(
            CheckpointKind::PretrainDistance,
            &cfg,
            &net2d,
            None,
            Some(&head),
            outcome.last,
            Some((&outcome.adam, &outcome.schedule)),
            last_epoch,
            outcome.adam.step,
        ),
        records: outcome.records,
    })
}
