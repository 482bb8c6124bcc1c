//! 3D encoder: message passing over the complete graph of a conformer
//! whose edges carry frequency-encoded interatomic distances. It sees only
//! distances, so its output is invariant to rotations, translations,
//! reflections and atom relabelings.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Reduction, Tape, Tensor, Var};
use crate::conformer::{gamma_encode, pairwise_distances, Conformer, DEFAULT_FREQUENCIES};
use crate::error::{Error, Result};
use crate::nn::{Mlp, Mode, Norm};

pub const PREFIX: &str = "net3d";

/// Largest conformer accepted; edge count grows as n².
pub const MAX_ATOMS: usize = 128;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Net3DConfig {
    pub depth: usize,
    pub hidden: usize,
    pub edge_hidden: usize,
    pub frequencies: usize,
    pub message_mlp_layers: usize,
    pub update_mlp_layers: usize,
    pub softedge_mlp_layers: usize,
    pub readout_aggregators: Vec<Reduction>,
    pub readout_mlp_layers: usize,
    pub dropout: f64,
    pub batch_norm: bool,
    pub batch_norm_momentum: f64,
    pub d_z: usize,
}

impl Default for Net3DConfig {
    fn default() -> Self {
        Self {
            depth: 1,
            hidden: 20,
            edge_hidden: 20,
            frequencies: DEFAULT_FREQUENCIES,
            message_mlp_layers: 1,
            update_mlp_layers: 1,
            softedge_mlp_layers: 1,
            readout_aggregators: vec![Reduction::Mean, Reduction::Max, Reduction::Std],
            readout_mlp_layers: 1,
            dropout: 0.0,
            batch_norm: true,
            batch_norm_momentum: 0.93,
            d_z: 256,
        }
    }
}

impl Net3DConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(format!("net3d config: {m}")));
        if self.depth == 0 {
            return bad("depth must be at least 1");
        }
        if self.hidden == 0 || self.edge_hidden == 0 || self.d_z == 0 {
            return bad("widths must be positive");
        }
        if self.message_mlp_layers == 0
            || self.update_mlp_layers == 0
            || self.softedge_mlp_layers == 0
            || self.readout_mlp_layers == 0
        {
            return bad("MLPs need at least one layer");
        }
        if self.readout_aggregators.is_empty() {
            return bad("readout aggregator list must be non-empty");
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

/// Disjoint union of complete directed graphs, one per conformer, with the
/// encoded distance of every ordered pair `u ≠ v`.
#[derive(Debug, Clone)]
pub struct ConformerBatch {
    pub edge_features: Tensor,
    pub senders: Vec<usize>,
    pub receivers: Vec<usize>,
    pub node_graph: Vec<usize>,
    pub num_graphs: usize,
}

impl ConformerBatch {
    pub fn new(conformers: &[&Conformer], frequencies: usize) -> Result<Self> {
        if conformers.is_empty() {
            return Err(Error::invalid("empty conformer batch"));
        }
        let width = 2 * frequencies + 1;
        let (mut senders, mut receivers, mut node_graph, mut feats) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (gi, conf) in conformers.iter().enumerate() {
            let n = conf.num_atoms();
            if n > MAX_ATOMS {
                return Err(Error::invalid(format!(
                    "conformer has {n} atoms; the 3D encoder accepts at most {MAX_ATOMS}"
                )));
            }
            let dist = pairwise_distances(conf)?;
            let base = node_graph.len();
            node_graph.extend(std::iter::repeat_n(gi, n));
            for u in 0..n {
                for v in 0..n {
                    if u != v {
                        receivers.push(base + u);
                        senders.push(base + v);
                        feats.extend(gamma_encode(dist.get(u, v), frequencies));
                    }
                }
            }
        }
        Ok(Self {
            edge_features: Tensor::new(senders.len(), width, feats)?,
            senders,
            receivers,
            node_graph,
            num_graphs: conformers.len(),
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
pub struct Net3D {
    pub config: Net3DConfig,
}

impl Net3D {
    pub fn new(config: Net3DConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    fn norm(&self) -> Norm {
        Norm {
            mid: self.config.batch_norm,
            last: self.config.batch_norm,
            momentum: self.config.batch_norm_momentum,
        }
    }

    fn init_mlp(&self) -> Mlp {
        let c = &self.config;
        Mlp::new(format!("{PREFIX}.init"), 2 * c.frequencies + 1, c.edge_hidden, c.edge_hidden, 1).expect("one layer")
    }

    fn edge_mlp(&self, layer: usize) -> Mlp {
        let c = &self.config;
        Mlp::new(
            format!("{PREFIX}.layer{layer}.edge"),
            2 * c.hidden + c.edge_hidden,
            c.edge_hidden,
            c.edge_hidden,
            c.message_mlp_layers,
        )
        .expect("validated layer count")
        .with_norm(self.norm())
        .with_dropout(c.dropout)
    }

    fn softedge_mlp(&self, layer: usize) -> Mlp {
        let c = &self.config;
        Mlp::new(format!("{PREFIX}.layer{layer}.softedge"), c.edge_hidden, c.edge_hidden, 1, c.softedge_mlp_layers)
            .expect("validated layer count")
    }

    fn node_mlp(&self, layer: usize) -> Mlp {
        let c = &self.config;
        Mlp::new(
            format!("{PREFIX}.layer{layer}.node"),
            c.hidden + c.edge_hidden,
            c.hidden,
            c.hidden,
            c.update_mlp_layers,
        )
        .expect("validated layer count")
        .with_norm(self.norm())
        .with_dropout(c.dropout)
    }

    fn readout_mlp(&self) -> Mlp {
        let c = &self.config;
        Mlp::new(
            format!("{PREFIX}.readout"),
            c.hidden * c.readout_aggregators.len(),
            c.hidden,
            c.d_z,
            c.readout_mlp_layers,
        )
        .expect("validated layer count")
        .with_norm(Norm {
            last: false,
            ..self.norm()
        })
        .with_dropout(c.dropout)
    }

    pub fn init_params<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        store.add_normal(&format!("{PREFIX}.node_init"), 1, self.config.hidden, rng)?;
        self.init_mlp().init(store, rng)?;
        for l in 0..self.config.depth {
            self.edge_mlp(l).init(store, rng)?;
            self.softedge_mlp(l).init(store, rng)?;
            self.node_mlp(l).init(store, rng)?;
        }
        self.readout_mlp().init(store, rng)
    }

    /// `d⁰_uv = U_init(γ(d_uv))` for every directed edge.
    pub fn init_edges(&self, tape: &mut Tape, store: &ParamStore, batch: &ConformerBatch, mode: &mut Mode) -> Result<Var> {
        if batch.edge_features.cols() != 2 * self.config.frequencies + 1 {
            return Err(Error::ConfigMismatch(format!(
                "edge features have {} columns, network expects {}",
                batch.edge_features.cols(),
                2 * self.config.frequencies + 1
            )));
        }
        let g = tape.constant(batch.edge_features.clone());
        self.init_mlp().forward(tape, store, g, mode)
    }

    /// One layer: `m_uv = U_edge(h_u ‖ h_v ‖ d_uv)`, `d' = d + m`,
    /// `h'_u = U_h(h_u ‖ Σ_v m_uv · σ(U_softedge(m_uv)))`.
    #[allow(clippy::too_many_arguments)]
    pub fn layer(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        batch: &ConformerBatch,
        layer: usize,
        h: Var,
        d: Var,
        mode: &mut Mode,
    ) -> Result<(Var, Var)> {
        let n = batch.num_nodes();
        let (aggregate, d_next) = if batch.num_edges() == 0 {
            (tape.constant(Tensor::zeros(n, self.config.edge_hidden)), d)
        } else {
            let hu = tape.gather_rows(h, batch.receivers.clone())?;
            let hv = tape.gather_rows(h, batch.senders.clone())?;
            let input = tape.concat_cols(&[hu, hv, d])?;
            let m = self.edge_mlp(layer).forward(tape, store, input, mode)?;
            let d_next = tape.add(d, m)?;
            let logits = self.softedge_mlp(layer).forward(tape, store, m, mode)?;
            let gate = tape.sigmoid(logits);
            let gated = tape.mul_col(m, gate)?;
            let agg = tape.segment_reduce(gated, batch.receivers.clone(), n, Reduction::Sum)?;
            (agg, d_next)
        };
        let joined = tape.concat_cols(&[h, aggregate])?;
        let h_next = self.node_mlp(layer).forward(tape, store, joined, mode)?;
        Ok((h_next, d_next))
    }

    /// `conformers × d_z`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, batch: &ConformerBatch, mode: &mut Mode) -> Result<Var> {
        let init = tape.param(store, &format!("{PREFIX}.node_init"))?;
        let mut h = tape.gather_rows(init, vec![0; batch.num_nodes()])?;
        let mut d = self.init_edges(tape, store, batch, mode)?;
        for l in 0..self.config.depth {
            (h, d) = self.layer(tape, store, batch, l, h, d, mode)?;
        }
        let pooled: Vec<Var> = self
            .config
            .readout_aggregators
            .iter()
            .map(|&kind| tape.segment_reduce(h, batch.node_graph.clone(), batch.num_graphs, kind))
            .collect::<Result<_>>()?;
        let joined = tape.concat_cols(&pooled)?;
        self.readout_mlp().forward(tape, store, joined, mode)
    }

    pub fn batch(&self, conformers: &[&Conformer]) -> Result<ConformerBatch> {
        ConformerBatch::new(conformers, self.config.frequencies)
    }
}

/// Eval-mode `z^b` of one conformer.
pub fn encode3d(net: &Net3D, store: &ParamStore, conformer: &Conformer) -> Result<Vec<f64>> {
    let batch = net.batch(&[conformer])?;
    let mut tape = Tape::new();
    let z = net.forward(&mut tape, store, &batch, &mut Mode::eval())?;
    Ok(tape.value(z).data().to_vec())
}
