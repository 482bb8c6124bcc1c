//! Conformer geometry: point clouds, pairwise distances, the frequency
//! encoding of distances, and conformer selection and sampling.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Boltzmann constant in kcal/(mol·K).
pub const BOLTZMANN_KCAL_PER_MOL_K: f64 = 0.001_987_204_1;

pub const ROOM_TEMPERATURE_K: f64 = 298.15;

/// Number of frequencies used by default in [`gamma_encode`].
pub const DEFAULT_FREQUENCIES: usize = 4;

const WEIGHT_SUM_TOL: f64 = 1e-6;

/// One 3D arrangement of a molecule's atoms (Ångström).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conformer {
    pub coords: Vec<[f64; 3]>,
    /// kcal/mol
    pub energy: Option<f64>,
    pub weight: Option<f64>,
}

impl Conformer {
    pub fn new(coords: Vec<[f64; 3]>) -> Self {
        Self {
            coords,
            energy: None,
            weight: None,
        }
    }

    pub fn num_atoms(&self) -> usize {
        self.coords.len()
    }

    pub fn is_finite(&self) -> bool {
        self.coords.iter().flatten().all(|v| v.is_finite())
    }
}

/// Non-empty set of conformers of one molecule, lowest energy first when
/// energies are known (file order otherwise).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConformerSet {
    conformers: Vec<Conformer>,
}

impl ConformerSet {
    pub fn new(mut conformers: Vec<Conformer>) -> Result<Self> {
        let first = conformers
            .first()
            .ok_or_else(|| Error::invalid("conformer set is empty"))?;
        let n = first.num_atoms();
        if n == 0 {
            return Err(Error::invalid("conformer without atoms"));
        }
        for (j, c) in conformers.iter().enumerate() {
            if c.num_atoms() != n {
                return Err(Error::invalid(format!(
                    "conformer {j} has {} atoms, expected {n}",
                    c.num_atoms()
                )));
            }
            if !c.is_finite() {
                return Err(Error::NonFinite(format!("coordinates of conformer {j}")));
            }
        }
        let with_energy = conformers.iter().filter(|c| c.energy.is_some()).count();
        if with_energy != 0 && with_energy != conformers.len() {
            return Err(Error::invalid("energies must be given for all conformers or none"));
        }
        let with_weight = conformers.iter().filter(|c| c.weight.is_some()).count();
        if with_weight != 0 && with_weight != conformers.len() {
            return Err(Error::invalid("weights must be given for all conformers or none"));
        }
        if with_weight > 0 {
            let sum: f64 = conformers.iter().filter_map(|c| c.weight).sum();
            if conformers.iter().filter_map(|c| c.weight).any(|w| !(0.0..=1.0).contains(&w))
                || (sum - 1.0).abs() > WEIGHT_SUM_TOL
            {
                return Err(Error::invalid(format!(
                    "conformer weights must lie in [0, 1] and sum to 1 (sum = {sum})"
                )));
            }
        }
        if with_energy > 0 {
            if conformers.iter().filter_map(|c| c.energy).any(|e| !e.is_finite()) {
                return Err(Error::NonFinite("conformer energies".into()));
            }
            conformers.sort_by(|a, b| a.energy.unwrap().total_cmp(&b.energy.unwrap()));
        }
        Ok(Self { conformers })
    }

    pub fn single(conformer: Conformer) -> Result<Self> {
        Self::new(vec![conformer])
    }

    pub fn len(&self) -> usize {
        self.conformers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.conformers.is_empty()
    }

    pub fn num_atoms(&self) -> usize {
        self.conformers[0].num_atoms()
    }

    pub fn conformers(&self) -> &[Conformer] {
        &self.conformers
    }

    /// Lowest-energy conformer (first in file order without energies).
    pub fn lowest_energy(&self) -> &Conformer {
        &self.conformers[0]
    }

    pub fn has_energies(&self) -> bool {
        self.conformers[0].energy.is_some()
    }

    pub fn has_weights(&self) -> bool {
        self.conformers[0].weight.is_some()
    }

    /// Keeps only the atoms listed in `keep` (in that order) in every conformer.
    pub fn retain_atoms(&self, keep: &[usize]) -> Result<Self> {
        let conformers = self
            .conformers
            .iter()
            .map(|c| Conformer {
                coords: keep.iter().map(|&i| c.coords[i]).collect(),
                ..c.clone()
            })
            .collect();
        Self::new(conformers)
    }
}

/// Symmetric `n × n` matrix of interatomic distances.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    values: Vec<f64>,
}

impl DistanceMatrix {
    pub fn num_atoms(&self) -> usize {
        self.n
    }

    pub fn get(&self, u: usize, v: usize) -> f64 {
        self.values[u * self.n + v]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Off-diagonal entries, `n² − n`.
    pub fn informative_entries(&self) -> usize {
        self.n * self.n - self.n
    }

    /// Unordered pairs `u < v` with their distance.
    pub fn pairs(&self) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::with_capacity(self.n * self.n.saturating_sub(1) / 2);
        for u in 0..self.n {
            for v in u + 1..self.n {
                out.push((u, v, self.get(u, v)));
            }
        }
        out
    }
}

pub fn pairwise_distances(conf: &Conformer) -> Result<DistanceMatrix> {
    let n = conf.num_atoms();
    if n == 0 {
        return Err(Error::invalid("pairwise distances of an empty point cloud"));
    }
    if !conf.is_finite() {
        return Err(Error::NonFinite("conformer coordinates".into()));
    }
    let mut values = vec![0.0; n * n];
    for u in 0..n {
        for v in u + 1..n {
            let (a, b) = (conf.coords[u], conf.coords[v]);
            let d = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
            values[u * n + v] = d;
            values[v * n + u] = d;
        }
    }
    Ok(DistanceMatrix { n, values })
}

/// Lifts a distance to `(d, sin(d/2⁰), cos(d/2⁰), …, sin(d/2^{F−1}), cos(d/2^{F−1}))`,
/// a vector of length `2F + 1`.
pub fn gamma_encode(d: f64, frequencies: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * frequencies + 1);
    out.push(d);
    for k in 0..frequencies {
        let x = d / 2f64.powi(k as i32);
        out.push(x.sin());
        out.push(x.cos());
    }
    out
}

/// The `c` lowest-energy conformers; short sets are padded by repeating the
/// lowest-energy one.
pub fn select_conformers(set: &ConformerSet, c: usize) -> Result<Vec<Conformer>> {
    if c < 1 {
        return Err(Error::invalid("number of conformers must be at least 1"));
    }
    let mut out: Vec<Conformer> = set.conformers.iter().take(c).cloned().collect();
    while out.len() < c {
        out.push(set.lowest_energy().clone());
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum SamplingStrategy {
    Uniform,
    Boltzmann { temperature: f64 },
}

impl SamplingStrategy {
    pub fn boltzmann() -> Self {
        SamplingStrategy::Boltzmann {
            temperature: ROOM_TEMPERATURE_K,
        }
    }
}

/// Draws one conformer. Boltzmann sampling uses stored weights when
/// present and weights computed from energies otherwise.
pub fn sample_conformer<'a, R: Rng + ?Sized>(
    set: &'a ConformerSet,
    strategy: SamplingStrategy,
    rng: &mut R,
) -> Result<&'a Conformer> {
    let n = set.len();
    if let SamplingStrategy::Boltzmann { .. } = strategy {
        if !set.has_weights() && !set.has_energies() {
            return Err(Error::invalid(
                "Boltzmann sampling needs conformer weights or energies",
            ));
        }
    }
    if n == 1 {
        return Ok(&set.conformers[0]);
    }
    let idx = match strategy {
        SamplingStrategy::Uniform => rng.random_range(0..n),
        SamplingStrategy::Boltzmann { temperature } => {
            let weights = if set.has_weights() {
                set.conformers.iter().map(|c| c.weight.unwrap()).collect()
            } else {
                let e: Vec<f64> = set.conformers.iter().map(|c| c.energy.unwrap()).collect();
                boltzmann_weights(&e, temperature)?
            };
            WeightedIndex::new(&weights)
                .map_err(|e| Error::invalid(format!("conformer weights: {e}")))?
                .sample(rng)
        }
    };
    Ok(&set.conformers[idx])
}

/// `p_j ∝ exp(−(E_j − min E) / (k_B T))` for energies in kcal/mol.
pub fn boltzmann_weights(energies: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if energies.is_empty() {
        return Err(Error::invalid("no energies given"));
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::invalid(format!("temperature must be positive, got {temperature}")));
    }
    if energies.iter().any(|e| !e.is_finite()) {
        return Err(Error::NonFinite("energies".into()));
    }
    let min = energies.iter().copied().fold(f64::INFINITY, f64::min);
    let kt = BOLTZMANN_KCAL_PER_MOL_K * temperature;
    let raw: Vec<f64> = energies.iter().map(|e| (-(e - min) / kt).exp()).collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|p| p / total).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn with_energy(coords: Vec<[f64; 3]>, e: f64) -> Conformer {
        Conformer {
            coords,
            energy: Some(e),
            weight: None,
        }
    }

    #[test]
    fn three_four_five() {
        let d = pairwise_distances(&Conformer::new(vec![[0.0, 0.0, 0.0], [3.0, 4.0, 0.0]])).unwrap();
        assert_eq!(d.get(0, 1), 5.0);
        assert_eq!(d.get(1, 0), 5.0);
        assert_eq!(d.get(0, 0), 0.0);
        assert_eq!(d.informative_entries(), 2);
    }

    #[test]
    fn non_finite_coords_rejected() {
        let c = Conformer::new(vec![[0.0, f64::NAN, 0.0]]);
        assert!(pairwise_distances(&c).is_err());
    }

    #[test]
    fn gamma_closed_forms() {
        assert_eq!(gamma_encode(0.0, 4), vec![0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert_eq!(gamma_encode(1.0, 8).len(), 17);
        assert_eq!(gamma_encode(2.5, 0), vec![2.5]);
        let pi = std::f64::consts::PI;
        let g = gamma_encode(pi, 2);
        let expected = [pi, 0.0, -1.0, 1.0, 0.0];
        for (a, b) in g.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn padding_repeats_lowest_energy() {
        let set = ConformerSet::new(vec![
            with_energy(vec![[1.0, 0.0, 0.0]], 2.0),
            with_energy(vec![[0.0, 0.0, 0.0]], 1.0),
        ])
        .unwrap();
        let sel = select_conformers(&set, 3).unwrap();
        let e: Vec<f64> = sel.iter().map(|c| c.energy.unwrap()).collect();
        assert_eq!(e, vec![1.0, 2.0, 1.0]);
        assert_eq!(sel[2], sel[0]);
        assert!(select_conformers(&set, 0).is_err());
    }

    #[test]
    fn file_order_without_energies() {
        let set = ConformerSet::new(vec![
            Conformer::new(vec![[5.0, 0.0, 0.0]]),
            Conformer::new(vec![[1.0, 0.0, 0.0]]),
            Conformer::new(vec![[3.0, 0.0, 0.0]]),
        ])
        .unwrap();
        let sel = select_conformers(&set, 2).unwrap();
        assert_eq!(sel[0].coords[0][0], 5.0);
        assert_eq!(sel[1].coords[0][0], 1.0);
    }

    #[test]
    fn set_validation() {
        assert!(ConformerSet::new(vec![]).is_err());
        assert!(ConformerSet::new(vec![
            Conformer::new(vec![[0.0; 3]]),
            Conformer::new(vec![[0.0; 3], [1.0; 3]]),
        ])
        .is_err());
        let bad_weights = vec![
            Conformer {
                coords: vec![[0.0; 3]],
                energy: None,
                weight: Some(0.5),
            },
            Conformer {
                coords: vec![[0.0; 3]],
                energy: None,
                weight: Some(0.4),
            },
        ];
        assert!(ConformerSet::new(bad_weights).is_err());
    }

    #[test]
    fn boltzmann_cases() {
        let w = boltzmann_weights(&[1.0, 1.0, 1.0, 1.0], ROOM_TEMPERATURE_K).unwrap();
        assert!(w.iter().all(|p| (p - 0.25).abs() < 1e-15));

        let w = boltzmann_weights(&[0.0, 50.0], ROOM_TEMPERATURE_K).unwrap();
        assert!(w[0] == 1.0 && w[1] < 1e-30);

        // ΔE = k_B·T gives p = (1, e^{-1}) / (1 + e^{-1})
        let kt = BOLTZMANN_KCAL_PER_MOL_K * ROOM_TEMPERATURE_K;
        let w = boltzmann_weights(&[0.0, kt], ROOM_TEMPERATURE_K).unwrap();
        assert!((w[0] - 0.731_058_578_630_004_9).abs() < 1e-12);
        assert!((w[1] - 0.268_941_421_369_995_1).abs() < 1e-12);
        assert!((kt - 0.5925).abs() < 1e-4);
        assert!(boltzmann_weights(&[0.0], 0.0).is_err());
    }

    #[test]
    fn boltzmann_needs_energy_or_weight() {
        let set = ConformerSet::new(vec![
            Conformer::new(vec![[0.0; 3]]),
            Conformer::new(vec![[1.0; 3]]),
        ])
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_conformer(&set, SamplingStrategy::boltzmann(), &mut rng).is_err());
        assert!(sample_conformer(&set, SamplingStrategy::Uniform, &mut rng).is_ok());
    }

    #[test]
    fn single_conformer_always_drawn() {
        let set = ConformerSet::single(with_energy(vec![[0.0; 3]], -3.0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10 {
            let c = sample_conformer(&set, SamplingStrategy::boltzmann(), &mut rng).unwrap();
            assert_eq!(c, set.lowest_energy());
        }
    }
}
