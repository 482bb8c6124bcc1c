use serde::{Deserialize, Serialize};

use super::MolecularGraph;
use crate::autodiff::Tensor;

const ATOMIC_NUMBER_BUCKETS: usize = 37;
const DEGREE_BUCKETS: usize = 7;
const CHARGE_BUCKETS: usize = 6;

pub const ATOM_FEATURE_DIM: usize = ATOMIC_NUMBER_BUCKETS + DEGREE_BUCKETS + CHARGE_BUCKETS;
pub const BOND_FEATURE_DIM: usize = 4;

/// Atom rows: one-hot atomic number (H..Kr, then "other"), one-hot degree
/// (0..5, then "≥6"), one-hot formal charge (−2..+2, then "other").
/// Bond rows: one-hot bond order (single, double, triple, aromatic).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureScheme {
    #[default]
    OneHotBasic,
}

impl FeatureScheme {
    pub fn atom_dim(self) -> usize {
        ATOM_FEATURE_DIM
    }

    pub fn bond_dim(self) -> usize {
        BOND_FEATURE_DIM
    }
}

/// Returns a copy of `graph` with feature matrices attached.
pub fn featurize(graph: &MolecularGraph, scheme: FeatureScheme) -> MolecularGraph {
    let mut out = graph.clone();
    let n = graph.num_atoms();
    let mut atoms = Tensor::zeros(n, scheme.atom_dim());
    for (i, a) in graph.atoms().iter().enumerate() {
        let z = a.atomic_number as usize;
        let z_col = if (1..ATOMIC_NUMBER_BUCKETS).contains(&z) {
            z - 1
        } else {
            ATOMIC_NUMBER_BUCKETS - 1
        };
        let d_col = a.degree.min(DEGREE_BUCKETS - 1);
        let q_col = match a.formal_charge {
            q @ -2..=2 => (q + 2) as usize,
            _ => CHARGE_BUCKETS - 1,
        };
        atoms.set(i, z_col, 1.0);
        atoms.set(i, ATOMIC_NUMBER_BUCKETS + d_col, 1.0);
        atoms.set(i, ATOMIC_NUMBER_BUCKETS + DEGREE_BUCKETS + q_col, 1.0);
    }
    let mut bonds = Tensor::zeros(graph.num_bonds(), scheme.bond_dim());
    for (e, b) in graph.bonds().iter().enumerate() {
        bonds.set(e, b.order.index(), 1.0);
    }
    out.atom_features = Some(atoms);
    out.bond_features = Some(bonds);
    out.feature_scheme = Some(scheme);
    out
}
