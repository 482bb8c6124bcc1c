//! Synthetic molecules for tests, benchmarks and the self-test: random
//! C/N/O skeletons with conformers relaxed under a toy force field, and a
//! geometric target that the 2D graph only determines implicitly.

use std::collections::VecDeque;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::conformer::{pairwise_distances, Conformer, ConformerSet};
use crate::error::{Error, Result};
use crate::molgraph::{Bond, BondOrder, Dataset, MolecularGraph, Molecule};

/// Name of the synthetic target: mean pairwise distance (Å) in the
/// lowest-energy conformer.
pub const MEAN_DIST: &str = "mean_dist";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub min_atoms: usize,
    pub max_atoms: usize,
    pub conformers: usize,
    /// Chance of attempting each of up to two ring closures.
    pub ring_probability: f64,
    pub relax_steps: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            min_atoms: 4,
            max_atoms: 16,
            conformers: 3,
            ring_probability: 0.4,
            relax_steps: 400,
        }
    }
}

const ELEMENTS: [(u8, usize); 3] = [(6, 4), (7, 3), (8, 2)];

fn max_degree(z: u8) -> usize {
    ELEMENTS.iter().find(|e| e.0 == z).map_or(4, |e| e.1)
}

fn bond_length(order: BondOrder) -> f64 {
    match order {
        BondOrder::Single => 1.52,
        BondOrder::Double => 1.34,
        BondOrder::Triple => 1.20,
        BondOrder::Aromatic => 1.40,
    }
}

/// Random connected skeleton: a spanning tree grown atom by atom plus
/// optional five- or six-membered ring closures.
pub fn random_graph<R: Rng + ?Sized>(id: impl Into<String>, cfg: &SynthConfig, rng: &mut R) -> Result<MolecularGraph> {
    if cfg.min_atoms == 0 || cfg.min_atoms > cfg.max_atoms {
        return Err(Error::invalid("synthetic molecules need 0 < min_atoms <= max_atoms"));
    }
    let n = rng.random_range(cfg.min_atoms..=cfg.max_atoms);
    let mut z = Vec::with_capacity(n);
    let mut degree = vec![0usize; n];
    let mut bonds: Vec<Bond> = Vec::new();
    for i in 0..n {
        let roll: f64 = rng.random();
        z.push(if roll < 0.7 { 6 } else if roll < 0.85 { 7 } else { 8 });
        if i == 0 {
            continue;
        }
        let mut open: Vec<usize> = (0..i).filter(|&j| degree[j] < max_degree(z[j])).collect();
        if open.is_empty() {
            // Only reachable if every earlier atom is saturated; force carbon.
            z[i] = 6;
            open = (0..i).collect();
        }
        let j = open[rng.random_range(0..open.len())];
        let order = if rng.random::<f64>() < 0.15 && degree[j] + 2 <= max_degree(z[j]) {
            BondOrder::Double
        } else {
            BondOrder::Single
        };
        bonds.push(Bond { endpoints: (j, i), order });
        degree[i] += 1;
        degree[j] += 1;
    }
    for _ in 0..2 {
        if rng.random::<f64>() >= cfg.ring_probability {
            continue;
        }
        let dist = hop_distances(n, &bonds);
        let mut candidates: Vec<(usize, usize)> = (0..n)
            .flat_map(|u| ((u + 1)..n).map(move |v| (u, v)))
            .filter(|&(u, v)| matches!(dist[u][v], 4 | 5))
            .filter(|&(u, v)| degree[u] < max_degree(z[u]) && degree[v] < max_degree(z[v]))
            .collect();
        candidates.shuffle(rng);
        if let Some(&(u, v)) = candidates.first() {
            bonds.push(Bond {
                endpoints: (u, v),
                order: BondOrder::Single,
            });
            degree[u] += 1;
            degree[v] += 1;
        }
    }
    let atoms: Vec<(u8, i8)> = z.iter().map(|&z| (z, 0)).collect();
    MolecularGraph::new(id, &atoms, bonds)
}

/// All-pairs shortest path lengths in bonds (`usize::MAX` if disconnected).
pub fn hop_distances(n: usize, bonds: &[Bond]) -> Vec<Vec<usize>> {
    let mut adj = vec![Vec::new(); n];
    for b in bonds {
        adj[b.endpoints.0].push(b.endpoints.1);
        adj[b.endpoints.1].push(b.endpoints.0);
    }
    (0..n)
        .map(|s| {
            let mut d = vec![usize::MAX; n];
            d[s] = 0;
            let mut q = VecDeque::from([s]);
            while let Some(u) = q.pop_front() {
                for &v in &adj[u] {
                    if d[v] == usize::MAX {
                        d[v] = d[u] + 1;
                        q.push_back(v);
                    }
                }
            }
            d
        })
        .collect()
}

/// Harmonic bonds and 1-3 distances plus soft repulsion between atoms three
/// or more bonds apart (kcal/mol, Å).
struct ForceField {
    /// (u, v, rest length, stiffness)
    springs: Vec<(usize, usize, f64, f64)>,
    repulsive: Vec<(usize, usize)>,
}

const REPULSION_RANGE: f64 = 3.2;

impl ForceField {
    fn new(graph: &MolecularGraph) -> Self {
        let n = graph.num_atoms();
        let hops = hop_distances(n, graph.bonds());
        let mut springs: Vec<(usize, usize, f64, f64)> = graph
            .bonds()
            .iter()
            .map(|b| (b.endpoints.0, b.endpoints.1, bond_length(b.order), 300.0))
            .collect();
        let mut repulsive = Vec::new();
        for u in 0..n {
            for v in (u + 1)..n {
                match hops[u][v] {
                    1 => {}
                    2 => springs.push((u, v, 2.48, 60.0)),
                    _ => repulsive.push((u, v)),
                }
            }
        }
        Self { springs, repulsive }
    }

    fn energy_and_gradient(&self, x: &[[f64; 3]], grad: &mut [[f64; 3]]) -> f64 {
        grad.iter_mut().for_each(|g| *g = [0.0; 3]);
        let mut e = 0.0;
        let mut pair = |u: usize, v: usize, de_dd: &dyn Fn(f64) -> (f64, f64)| {
            let diff = [x[u][0] - x[v][0], x[u][1] - x[v][1], x[u][2] - x[v][2]];
            let d = (diff[0] * diff[0] + diff[1] * diff[1] + diff[2] * diff[2]).sqrt().max(1e-9);
            let (energy, slope) = de_dd(d);
            e += energy;
            for k in 0..3 {
                let g = slope * diff[k] / d;
                grad[u][k] += g;
                grad[v][k] -= g;
            }
        };
        for &(u, v, r0, k) in &self.springs {
            pair(u, v, &|d| (k * (d - r0).powi(2), 2.0 * k * (d - r0)));
        }
        for &(u, v) in &self.repulsive {
            pair(u, v, &|d| {
                if d < REPULSION_RANGE {
                    let s = REPULSION_RANGE - d;
                    (10.0 * s * s, -20.0 * s)
                } else {
                    (0.0, 0.0)
                }
            });
        }
        e
    }

    /// Gradient descent from `x` with a per-atom step cap; returns the
    /// final energy.
    fn relax(&self, x: &mut [[f64; 3]], steps: usize) -> f64 {
        let mut grad = vec![[0.0; 3]; x.len()];
        let mut e = self.energy_and_gradient(x, &mut grad);
        for _ in 0..steps {
            for (xi, gi) in x.iter_mut().zip(&grad) {
                let norm = (gi[0] * gi[0] + gi[1] * gi[1] + gi[2] * gi[2]).sqrt();
                let scale = if norm * 1e-3 > 0.1 { 0.1 / norm } else { 1e-3 };
                for k in 0..3 {
                    xi[k] -= scale * gi[k];
                }
            }
            e = self.energy_and_gradient(x, &mut grad);
        }
        e
    }
}

/// `count` conformers relaxed from independent random starts, each carrying
/// its final force-field energy. Coordinates are centered.
pub fn generate_conformers<R: Rng + ?Sized>(
    graph: &MolecularGraph,
    count: usize,
    relax_steps: usize,
    rng: &mut R,
) -> Result<ConformerSet> {
    if count == 0 {
        return Err(Error::invalid("need at least one conformer"));
    }
    let n = graph.num_atoms();
    let ff = ForceField::new(graph);
    let box_half = 1.2 * (n as f64).cbrt();
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut x: Vec<[f64; 3]> = (0..n)
            .map(|_| {
                [
                    rng.random_range(-box_half..box_half),
                    rng.random_range(-box_half..box_half),
                    rng.random_range(-box_half..box_half),
                ]
            })
            .collect();
        let energy = ff.relax(&mut x, relax_steps);
        let mut c = [0.0; 3];
        for p in &x {
            for k in 0..3 {
                c[k] += p[k] / n as f64;
            }
        }
        for p in &mut x {
            for k in 0..3 {
                p[k] -= c[k];
            }
        }
        let mut conf = Conformer::new(x);
        conf.energy = Some(energy);
        out.push(conf);
    }
    ConformerSet::new(out)
}

/// Mean over unordered atom pairs of the interatomic distance; zero for a
/// single atom.
pub fn mean_pairwise_distance(conf: &Conformer) -> Result<f64> {
    let pairs = pairwise_distances(conf)?.pairs();
    if pairs.is_empty() {
        return Ok(0.0);
    }
    Ok(pairs.iter().map(|p| p.2).sum::<f64>() / pairs.len() as f64)
}

pub fn synthetic_molecule<R: Rng + ?Sized>(id: impl Into<String>, cfg: &SynthConfig, rng: &mut R) -> Result<Molecule> {
    let graph = random_graph(id, cfg, rng)?;
    let conformers = generate_conformers(&graph, cfg.conformers, cfg.relax_steps, rng)?;
    let target = mean_pairwise_distance(conformers.lowest_energy())?;
    Molecule::new(graph.with_targets(vec![(MEAN_DIST.to_string(), target)]), Some(conformers))
}

/// `count` molecules named `mol0`, `mol1`, … with the `mean_dist` target.
pub fn synthetic_dataset(count: usize, seed: u64, cfg: &SynthConfig) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let molecules = (0..count)
        .map(|i| synthetic_molecule(format!("mol{i}"), cfg, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(molecules)
}

/// Uniformly random rotation from a normalized Gaussian quaternion.
pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> [[f64; 3]; 3] {
    let q: [f64; 4] = loop {
        let q = [0; 4].map(|_| StandardNormal.sample(rng));
        let n = q.iter().map(|v: &f64| v * v).sum::<f64>().sqrt();
        if n > 1e-6 {
            break q.map(|v| v / n);
        }
    };
    let [w, x, y, z] = q;
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

/// `R·x + t` applied to every atom.
pub fn transform(conf: &Conformer, rotation: &[[f64; 3]; 3], translation: [f64; 3]) -> Conformer {
    let coords = conf
        .coords
        .iter()
        .map(|p| {
            let mut out = translation;
            for (r, o) in rotation.iter().zip(out.iter_mut()) {
                *o += r[0] * p[0] + r[1] * p[1] + r[2] * p[2];
            }
            out
        })
        .collect();
    Conformer {
        coords,
        energy: conf.energy,
        weight: conf.weight,
    }
}

/// Conformer with atoms reordered so that new atom `i` is old `perm[i]`.
pub fn permute_conformer(conf: &Conformer, perm: &[usize]) -> Conformer {
    Conformer {
        coords: perm.iter().map(|&p| conf.coords[p]).collect(),
        energy: conf.energy,
        weight: conf.weight,
    }
}

pub fn random_permutation<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn graphs_are_connected_and_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for i in 0..200 {
            let g = random_graph(format!("m{i}"), &SynthConfig::default(), &mut rng).unwrap();
            g.validate().unwrap();
            let d = hop_distances(g.num_atoms(), g.bonds());
            assert!(d[0].iter().all(|&x| x != usize::MAX));
            assert!(g.atoms().iter().all(|a| a.degree <= max_degree(a.atomic_number)));
        }
    }

    #[test]
    fn relaxed_bonds_near_rest_length() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = synthetic_molecule("m", &SynthConfig::default(), &mut rng).unwrap();
        let set = m.conformers.as_ref().unwrap();
        let d = pairwise_distances(set.lowest_energy()).unwrap();
        for b in m.graph.bonds() {
            let l = d.get(b.endpoints.0, b.endpoints.1);
            assert!((l - bond_length(b.order)).abs() < 0.2, "bond length {l}");
        }
        let e: Vec<f64> = set.conformers().iter().map(|c| c.energy.unwrap()).collect();
        assert!(e.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn rotation_is_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = random_rotation(&mut rng);
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[i][k] * r[j][k]).sum();
                assert!((dot - f64::from(u8::from(i == j))).abs() < 1e-12);
            }
        }
        let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1]) - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
        assert!((det - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dataset_is_reproducible() {
        let cfg = SynthConfig::default();
        let a = synthetic_dataset(5, 9, &cfg).unwrap();
        let b = synthetic_dataset(5, 9, &cfg).unwrap();
        assert_eq!(a.molecules, b.molecules);
        assert!(a.molecules.iter().all(|m| m.graph.target(MEAN_DIST).unwrap() > 1.0));
    }
}
