//! 2D molecular graphs: data model, dataset file format, featurization,
//! random splits and node-drop augmentation.

mod augment;
mod elements;
mod features;
mod parse;
mod split;

use serde::{Deserialize, Serialize};

pub use augment::node_drop;
pub use elements::{atomic_number, symbol, MAX_ATOMIC_NUMBER};
pub use features::{featurize, FeatureScheme, ATOM_FEATURE_DIM, BOND_FEATURE_DIM};
pub use parse::{format_record, parse_dataset, parse_str, write_dataset};
pub use split::split_random;

use crate::autodiff::Tensor;
use crate::conformer::ConformerSet;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BondOrder {
    Single,
    Double,
    Triple,
    Aromatic,
}

impl BondOrder {
    pub fn index(self) -> usize {
        match self {
            BondOrder::Single => 0,
            BondOrder::Double => 1,
            BondOrder::Triple => 2,
            BondOrder::Aromatic => 3,
        }
    }

    /// File token: `1`, `2`, `3` or `a`.
    pub fn token(self) -> &'static str {
        match self {
            BondOrder::Single => "1",
            BondOrder::Double => "2",
            BondOrder::Triple => "3",
            BondOrder::Aromatic => "a",
        }
    }

    pub fn from_token(s: &str) -> Option<Self> {
        match s {
            "1" => Some(BondOrder::Single),
            "2" => Some(BondOrder::Double),
            "3" => Some(BondOrder::Triple),
            "a" | "ar" | "1.5" => Some(BondOrder::Aromatic),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub atomic_number: u8,
    pub formal_charge: i8,
    /// Number of incident bonds, maintained by [`MolecularGraph`].
    pub degree: usize,
}

/// Undirected bond, stored once.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bond {
    pub endpoints: (usize, usize),
    pub order: BondOrder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MolecularGraph {
    pub id: String,
    atoms: Vec<Atom>,
    bonds: Vec<Bond>,
    /// `n × f_atom`, present after [`featurize`].
    pub atom_features: Option<Tensor>,
    /// `|E| × f_bond`, present after [`featurize`].
    pub bond_features: Option<Tensor>,
    pub feature_scheme: Option<FeatureScheme>,
    pub targets: Vec<(String, f64)>,
}

impl MolecularGraph {
    /// Builds and validates a graph from `(atomic number, formal charge)`
    /// pairs and bonds. Degrees are derived.
    pub fn new(id: impl Into<String>, atoms: &[(u8, i8)], bonds: Vec<Bond>) -> Result<Self> {
        let id = id.into();
        let invalid = |message: String| Error::InvalidMolecule {
            id: id.clone(),
            message,
        };
        if atoms.is_empty() {
            return Err(invalid("molecule has no atoms".into()));
        }
        let mut out_atoms = Vec::with_capacity(atoms.len());
        for &(z, charge) in atoms {
            if z == 0 || z > MAX_ATOMIC_NUMBER {
                return Err(invalid(format!("atomic number {z} outside [1, 118]")));
            }
            out_atoms.push(Atom {
                atomic_number: z,
                formal_charge: charge,
                degree: 0,
            });
        }
        let n = out_atoms.len();
        let mut seen = std::collections::HashSet::new();
        for b in &bonds {
            let (u, v) = b.endpoints;
            if u >= n || v >= n {
                return Err(invalid(format!(
                    "atom index out of range: bond {u}-{v} on {n} atoms"
                )));
            }
            if u == v {
                return Err(invalid(format!("self-loop on atom {u}")));
            }
            if !seen.insert((u.min(v), u.max(v))) {
                return Err(invalid(format!("bond {u}-{v} listed twice")));
            }
            out_atoms[u].degree += 1;
            out_atoms[v].degree += 1;
        }
        Ok(Self {
            id,
            atoms: out_atoms,
            bonds,
            atom_features: None,
            bond_features: None,
            feature_scheme: None,
            targets: Vec::new(),
        })
    }

    pub fn with_targets(mut self, targets: Vec<(String, f64)>) -> Self {
        self.targets = targets;
        self
    }

    pub fn num_atoms(&self) -> usize {
        self.atoms.len()
    }

    pub fn num_bonds(&self) -> usize {
        self.bonds.len()
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn bonds(&self) -> &[Bond] {
        &self.bonds
    }

    pub fn target(&self, name: &str) -> Option<f64> {
        self.targets.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    pub fn is_featurized(&self) -> bool {
        self.atom_features.is_some() && self.bond_features.is_some()
    }

    /// Neighbor lists, each sorted ascending.
    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.atoms.len()];
        for b in &self.bonds {
            adj[b.endpoints.0].push(b.endpoints.1);
            adj[b.endpoints.1].push(b.endpoints.0);
        }
        adj.iter_mut().for_each(|a| a.sort_unstable());
        adj
    }

    /// Re-checks every structural invariant.
    pub fn validate(&self) -> Result<()> {
        let atoms: Vec<(u8, i8)> = self
            .atoms
            .iter()
            .map(|a| (a.atomic_number, a.formal_charge))
            .collect();
        let rebuilt = MolecularGraph::new(self.id.clone(), &atoms, self.bonds.clone())?;
        let invalid = |message: String| Error::InvalidMolecule {
            id: self.id.clone(),
            message,
        };
        if rebuilt.atoms != self.atoms {
            return Err(invalid("stored degrees disagree with bonds".into()));
        }
        if let Some(f) = &self.atom_features {
            if f.rows() != self.num_atoms() {
                return Err(invalid("atom feature rows != atom count".into()));
            }
        }
        if let Some(f) = &self.bond_features {
            if f.rows() != self.num_bonds() {
                return Err(invalid("bond feature rows != bond count".into()));
            }
        }
        Ok(())
    }

    /// Same molecule with atoms reordered: new atom `i` is old atom `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let n = self.num_atoms();
        let mut inverse = vec![usize::MAX; n];
        for (new, &old) in perm.iter().enumerate() {
            if old >= n || inverse[old] != usize::MAX {
                return Err(Error::invalid("not a permutation"));
            }
            inverse[old] = new;
        }
        if perm.len() != n {
            return Err(Error::invalid("not a permutation"));
        }
        let atoms: Vec<(u8, i8)> = perm
            .iter()
            .map(|&old| (self.atoms[old].atomic_number, self.atoms[old].formal_charge))
            .collect();
        let bonds = self
            .bonds
            .iter()
            .map(|b| Bond {
                endpoints: (inverse[b.endpoints.0], inverse[b.endpoints.1]),
                order: b.order,
            })
            .collect();
        let mut g = MolecularGraph::new(self.id.clone(), &atoms, bonds)?;
        g.targets = self.targets.clone();
        match self.feature_scheme {
            Some(scheme) => Ok(featurize(&g, scheme)),
            None => Ok(g),
        }
    }
}

/// A graph with its (optional) conformers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Molecule {
    pub graph: MolecularGraph,
    pub conformers: Option<ConformerSet>,
}

impl Molecule {
    pub fn new(graph: MolecularGraph, conformers: Option<ConformerSet>) -> Result<Self> {
        if let Some(set) = &conformers {
            if set.num_atoms() != graph.num_atoms() {
                return Err(Error::InvalidMolecule {
                    id: graph.id.clone(),
                    message: format!(
                        "conformers have {} atoms, graph has {}",
                        set.num_atoms(),
                        graph.num_atoms()
                    ),
                });
            }
        }
        Ok(Self { graph, conformers })
    }

    pub fn id(&self) -> &str {
        &self.graph.id
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetStats {
    pub mean: f64,
    pub std: f64,
}

impl TargetStats {
    /// Mean and population standard deviation; a zero spread maps to 1.
    pub fn from_values(values: &[f64]) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        Self {
            mean,
            std: if std > 0.0 { std } else { 1.0 },
        }
    }

    pub fn standardize(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }

    pub fn destandardize(&self, v: f64) -> f64 {
        v * self.std + self.mean
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub molecules: Vec<Molecule>,
    pub target_names: Vec<String>,
    /// Per-target statistics of the training split, aligned with `target_names`.
    pub target_stats: Option<Vec<TargetStats>>,
}

impl Dataset {
    pub fn new(molecules: Vec<Molecule>) -> Result<Self> {
        let target_names: Vec<String> = molecules
            .first()
            .map(|m| m.graph.targets.iter().map(|(n, _)| n.clone()).collect())
            .unwrap_or_default();
        for m in &molecules {
            let names: Vec<&String> = m.graph.targets.iter().map(|(n, _)| n).collect();
            if names.len() != target_names.len() || names.iter().zip(&target_names).any(|(a, b)| *a != b) {
                return Err(Error::InvalidMolecule {
                    id: m.graph.id.clone(),
                    message: format!("target names {names:?} differ from {target_names:?}"),
                });
            }
        }
        Ok(Self {
            molecules,
            target_names,
            target_stats: None,
        })
    }

    pub fn len(&self) -> usize {
        self.molecules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.molecules.is_empty()
    }

    pub fn target_index(&self, name: &str) -> Result<usize> {
        self.target_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::invalid(format!("dataset has no target '{name}' (available: {:?})", self.target_names)))
    }

    pub fn featurized(mut self, scheme: FeatureScheme) -> Self {
        for m in &mut self.molecules {
            m.graph = featurize(&m.graph, scheme);
        }
        self
    }

    pub fn ids(&self) -> Vec<&str> {
        self.molecules.iter().map(Molecule::id).collect()
    }
}
