use std::fmt::Write;

use super::eval_batches;
use crate::autodiff::Tape;
use crate::checkpoint::Checkpoint;
use crate::error::Result;
use crate::molgraph::{featurize, Dataset, MolecularGraph};
use crate::net2d::GraphBatch;
use crate::nn::Mode;

const EMBED_BATCH: usize = 256;

/// Eval-mode `z^a` of every molecule, in dataset order. With several 2D
/// outputs per molecule the vectors are concatenated.
pub fn embed(checkpoint: &Checkpoint, dataset: &Dataset) -> Result<Vec<(String, Vec<f64>)>> {
    let net = &checkpoint.net2d;
    let graphs: Vec<MolecularGraph> = dataset
        .molecules
        .iter()
        .map(|m| {
            if m.graph.feature_scheme == Some(net.config.features) {
                m.graph.clone()
            } else {
                featurize(&m.graph, net.config.features)
            }
        })
        .collect();
    let width = net.config.d_z * net.config.num_outputs;
    let mut out = Vec::with_capacity(graphs.len());
    for idx in eval_batches(graphs.len(), EMBED_BATCH, 1) {
        let refs: Vec<&MolecularGraph> = idx.iter().map(|&i| &graphs[i]).collect();
        let batch = GraphBatch::new(&refs)?;
        let mut tape = Tape::new();
        let z = net.forward(&mut tape, &checkpoint.params, &batch, &mut Mode::eval())?;
        let z = tape.value(z).data();
        for (k, &i) in idx.iter().enumerate() {
            out.push((graphs[i].id.clone(), z[k * width..(k + 1) * width].to_vec()));
        }
    }
    Ok(out)
}

/// One line per molecule, `id<TAB>v1,v2,…`, using the shortest decimal
/// representation that round-trips each value.
pub fn format_embeddings(rows: &[(String, Vec<f64>)]) -> String {
    let mut s = String::new();
    for (id, v) in rows {
        s.push_str(id);
        s.push('\t');
        for (k, x) in v.iter().enumerate() {
            if k > 0 {
                s.push(',');
            }
            let _ = write!(s, "{x}");
        }
        s.push('\n');
    }
    s
}
