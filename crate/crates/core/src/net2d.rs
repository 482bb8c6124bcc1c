//! 2D encoder: principal-neighbourhood-aggregation message passing over the
//! bond graph, followed by a multi-aggregator readout.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Reduction, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::molgraph::{FeatureScheme, MolecularGraph};
use crate::nn::{Mlp, Mode, Norm};

pub const PREFIX: &str = "net2d";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scaler {
    Identity,
    /// `log(d + 1) / δ`
    Amplification,
    /// `δ / log(d + 1)`
    Attenuation,
}

impl Scaler {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "identity" => Some(Self::Identity),
            "amplification" => Some(Self::Amplification),
            "attenuation" => Some(Self::Attenuation),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Net2DConfig {
    pub depth: usize,
    pub hidden: usize,
    pub message_mlp_layers: usize,
    pub update_mlp_layers: usize,
    pub aggregators: Vec<Reduction>,
    pub scalers: Vec<Scaler>,
    pub readout_aggregators: Vec<Reduction>,
    pub readout_mlp_layers: usize,
    pub dropout: f64,
    pub batch_norm: bool,
    pub batch_norm_momentum: f64,
    pub d_z: usize,
    /// Vectors emitted per molecule (more than one for set-similarity losses).
    pub num_outputs: usize,
    pub features: FeatureScheme,
}

impl Default for Net2DConfig {
    fn default() -> Self {
        Self {
            depth: 7,
            hidden: 200,
            message_mlp_layers: 2,
            update_mlp_layers: 1,
            aggregators: vec![Reduction::Mean, Reduction::Max, Reduction::Min, Reduction::Std],
            scalers: vec![Scaler::Identity, Scaler::Amplification, Scaler::Attenuation],
            readout_aggregators: vec![Reduction::Mean, Reduction::Max, Reduction::Min, Reduction::Sum],
            readout_mlp_layers: 2,
            dropout: 0.0,
            batch_norm: true,
            batch_norm_momentum: 0.1,
            d_z: 256,
            num_outputs: 1,
            features: FeatureScheme::OneHotBasic,
        }
    }
}

impl Net2DConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(format!("net2d config: {m}")));
        if self.depth == 0 {
            return bad("depth must be at least 1");
        }
        if self.hidden == 0 || self.d_z == 0 || self.num_outputs == 0 {
            return bad("hidden, d_z and num_outputs must be positive");
        }
        if self.message_mlp_layers == 0 || self.update_mlp_layers == 0 || self.readout_mlp_layers == 0 {
            return bad("MLPs need at least one layer");
        }
        if self.aggregators.is_empty() || self.scalers.is_empty() || self.readout_aggregators.is_empty() {
            return bad("aggregator and scaler lists must be non-empty");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if !(self.batch_norm_momentum > 0.0 && self.batch_norm_momentum <= 1.0) {
            return bad("batch_norm_momentum must lie in (0, 1]");
        }
        Ok(())
    }
}

/// Normalizer of the degree scalers: mean of `log(degree + 1)` over the
/// atoms of the training split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DegreeStats {
    pub delta: f64,
}

impl DegreeStats {
    pub fn new(delta: f64) -> Result<Self> {
        if !(delta.is_finite() && delta > 0.0) {
            return Err(Error::invalid(format!("degree normalizer must be positive, got {delta}")));
        }
        Ok(Self { delta })
    }

    pub fn from_graphs<'a>(graphs: impl IntoIterator<Item = &'a MolecularGraph>) -> Result<Self> {
        let mut total = 0.0;
        let mut count = 0usize;
        for g in graphs {
            for a in g.atoms() {
                total += ((a.degree + 1) as f64).ln();
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::invalid("degree statistics need at least one atom"));
        }
        Self::new(total / count as f64)
    }
}

/// Disjoint union of featurized graphs. Every bond contributes two
/// directed edges.
#[derive(Debug, Clone)]
pub struct GraphBatch {
    pub atom_features: Tensor,
    pub edge_features: Tensor,
    pub senders: Vec<usize>,
    pub receivers: Vec<usize>,
    pub node_graph: Vec<usize>,
    pub degrees: Vec<usize>,
    pub num_graphs: usize,
    /// First node of each graph in the batch.
    pub offsets: Vec<usize>,
}

impl GraphBatch {
    pub fn new(graphs: &[&MolecularGraph]) -> Result<Self> {
        let first = graphs.first().ok_or_else(|| Error::invalid("empty graph batch"))?;
        let not_featurized = |g: &MolecularGraph| Error::InvalidMolecule {
            id: g.id.clone(),
            message: "graph is not featurized".into(),
        };
        let fa = first.atom_features.as_ref().ok_or_else(|| not_featurized(first))?.cols();
        let fb = first.bond_features.as_ref().ok_or_else(|| not_featurized(first))?.cols();
        let mut atoms = Vec::new();
        let mut edges = Vec::new();
        let (mut senders, mut receivers, mut node_graph, mut degrees, mut offsets) =
            (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (gi, g) in graphs.iter().enumerate() {
            let (Some(af), Some(bf)) = (&g.atom_features, &g.bond_features) else {
                return Err(not_featurized(g));
            };
            if af.cols() != fa || bf.cols() != fb {
                return Err(Error::InvalidMolecule {
                    id: g.id.clone(),
                    message: "feature widths differ within the batch".into(),
                });
            }
            let base = node_graph.len();
            offsets.push(base);
            atoms.extend_from_slice(af.data());
            for a in g.atoms() {
                node_graph.push(gi);
                degrees.push(a.degree);
            }
            for (e, b) in g.bonds().iter().enumerate() {
                let (u, v) = b.endpoints;
                for (s, r) in [(u, v), (v, u)] {
                    senders.push(base + s);
                    receivers.push(base + r);
                    edges.extend_from_slice(bf.row(e));
                }
            }
        }
        Ok(Self {
            atom_features: Tensor::new(node_graph.len(), fa, atoms)?,
            edge_features: Tensor::new(senders.len(), fb, edges)?,
            senders,
            receivers,
            node_graph,
            degrees,
            num_graphs: graphs.len(),
            offsets,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.node_graph.len()
    }

    pub fn num_edges(&self) -> usize {
        self.senders.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Net2D {
    pub config: Net2DConfig,
    pub degree_stats: DegreeStats,
}

impl Net2D {
    pub fn new(config: Net2DConfig, degree_stats: DegreeStats) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, degree_stats })
    }

    fn norm(&self, last: bool) -> Norm {
        Norm {
            mid: self.config.batch_norm,
            last: last && self.config.batch_norm,
            momentum: self.config.batch_norm_momentum,
        }
    }

    fn message_mlp(&self, layer: usize) -> Mlp {
        let h = self.config.hidden;
        Mlp::new(format!("{PREFIX}.layer{layer}.msg"), 3 * h, h, h, self.config.message_mlp_layers)
            .expect("validated layer count")
            .with_norm(self.norm(true))
            .with_dropout(self.config.dropout)
    }

    fn update_mlp(&self, layer: usize) -> Mlp {
        let h = self.config.hidden;
        let width = h * (1 + self.config.aggregators.len() * self.config.scalers.len());
        Mlp::new(format!("{PREFIX}.layer{layer}.upd"), width, h, h, self.config.update_mlp_layers)
            .expect("validated layer count")
            .with_norm(self.norm(false))
            .with_dropout(self.config.dropout)
    }

    fn readout_mlp(&self) -> Mlp {
        let h = self.config.hidden;
        Mlp::new(
            format!("{PREFIX}.readout"),
            h * self.config.readout_aggregators.len(),
            h,
            self.config.d_z * self.config.num_outputs,
            self.config.readout_mlp_layers,
        )
        .expect("validated layer count")
        .with_norm(self.norm(false))
        .with_dropout(self.config.dropout)
    }

    pub fn init_params<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        let h = self.config.hidden;
        let scheme = self.config.features;
        store.add_linear(&format!("{PREFIX}.atom_embed"), scheme.atom_dim(), h, rng)?;
        store.add_linear(&format!("{PREFIX}.bond_embed"), scheme.bond_dim(), h, rng)?;
        for l in 0..self.config.depth {
            self.message_mlp(l).init(store, rng)?;
            self.update_mlp(l).init(store, rng)?;
            if self.config.batch_norm {
                store.add_batch_norm(&format!("{PREFIX}.layer{l}.bn"), h)?;
            }
        }
        self.readout_mlp().init(store, rng)
    }

    /// Per-node scaler factors; degree-0 nodes bypass scaling.
    fn scaler_factors(&self, batch: &GraphBatch, scaler: Scaler) -> Option<Vec<f64>> {
        let delta = self.degree_stats.delta;
        let f: fn(f64, f64) -> f64 = match scaler {
            Scaler::Identity => return None,
            Scaler::Amplification => |l, d| l / d,
            Scaler::Attenuation => |l, d| d / l,
        };
        Some(
            batch
                .degrees
                .iter()
                .map(|&deg| if deg == 0 { 1.0 } else { f(((deg + 1) as f64).ln(), delta) })
                .collect(),
        )
    }

    /// One message-passing layer.
    pub fn layer(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        batch: &GraphBatch,
        layer: usize,
        h: Var,
        e: Var,
        mode: &mut Mode,
    ) -> Result<Var> {
        let n = batch.num_nodes();
        let width = self.config.hidden;
        let aggregates: Vec<Var> = if batch.num_edges() == 0 {
            let zero = tape.constant(Tensor::zeros(n, width));
            vec![zero; self.config.aggregators.len()]
        } else {
            let hu = tape.gather_rows(h, batch.receivers.clone())?;
            let hv = tape.gather_rows(h, batch.senders.clone())?;
            let input = tape.concat_cols(&[hu, hv, e])?;
            let messages = self.message_mlp(layer).forward(tape, store, input, mode)?;
            self.config
                .aggregators
                .iter()
                .map(|&kind| tape.segment_reduce(messages, batch.receivers.clone(), n, kind))
                .collect::<Result<_>>()?
        };
        let mut parts = vec![h];
        for &agg in &aggregates {
            for &scaler in &self.config.scalers {
                match self.scaler_factors(batch, scaler) {
                    None => parts.push(agg),
                    Some(f) => parts.push(tape.scale_rows(agg, f)?),
                }
            }
        }
        let joined = tape.concat_cols(&parts)?;
        let mut out = self.update_mlp(layer).forward(tape, store, joined, mode)?;
        out = tape.add(out, h)?;
        if self.config.batch_norm {
            out = tape.batch_norm(
                out,
                store,
                &format!("{PREFIX}.layer{layer}.bn"),
                self.config.batch_norm_momentum,
                mode.train,
            )?;
        }
        Ok(out)
    }

    /// Final node representations (`nodes × hidden`).
    pub fn node_representations(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        batch: &GraphBatch,
        mode: &mut Mode,
    ) -> Result<Var> {
        let scheme = self.config.features;
        if batch.atom_features.cols() != scheme.atom_dim() || batch.edge_features.cols() != scheme.bond_dim() {
            return Err(Error::ConfigMismatch(format!(
                "features have {}/{} columns, network expects {}/{}",
                batch.atom_features.cols(),
                batch.edge_features.cols(),
                scheme.atom_dim(),
                scheme.bond_dim()
            )));
        }
        let x = tape.constant(batch.atom_features.clone());
        let mut h = tape.linear(x, store, &format!("{PREFIX}.atom_embed"))?;
        let ef = tape.constant(batch.edge_features.clone());
        let e = tape.linear(ef, store, &format!("{PREFIX}.bond_embed"))?;
        for l in 0..self.config.depth {
            h = self.layer(tape, store, batch, l, h, e, mode)?;
        }
        Ok(h)
    }

    /// Graph embeddings from node representations: `(graphs·num_outputs) × d_z`,
    /// the outputs of one graph on consecutive rows.
    pub fn readout(&self, tape: &mut Tape, store: &ParamStore, batch: &GraphBatch, h: Var, mode: &mut Mode) -> Result<Var> {
        let pooled: Vec<Var> = self
            .config
            .readout_aggregators
            .iter()
            .map(|&kind| tape.segment_reduce(h, batch.node_graph.clone(), batch.num_graphs, kind))
            .collect::<Result<_>>()?;
        let joined = tape.concat_cols(&pooled)?;
        let z = self.readout_mlp().forward(tape, store, joined, mode)?;
        tape.reshape(z, batch.num_graphs * self.config.num_outputs, self.config.d_z)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, batch: &GraphBatch, mode: &mut Mode) -> Result<Var> {
        let h = self.node_representations(tape, store, batch, mode)?;
        self.readout(tape, store, batch, h, mode)
    }

    /// Eval-mode embedding of one graph, `num_outputs × d_z`.
    pub fn encode(&self, store: &ParamStore, graph: &MolecularGraph) -> Result<Tensor> {
        let batch = GraphBatch::new(&[graph])?;
        let mut tape = Tape::new();
        let z = self.forward(&mut tape, store, &batch, &mut Mode::eval())?;
        Ok(tape.value(z).clone())
    }
}

/// Eval-mode `z^a` of one featurized graph (first output vector).
pub fn encode2d(net: &Net2D, store: &ParamStore, graph: &MolecularGraph) -> Result<Vec<f64>> {
    Ok(net.encode(store, graph)?.row(0).to_vec())
}
