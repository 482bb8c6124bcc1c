use rand::seq::index::sample;
use rand::Rng;

use super::{featurize, Bond, MolecularGraph};
use crate::conformer::ConformerSet;
use crate::error::{Error, Result};

/// Removes ⌊ratio·n⌋ atoms chosen uniformly without replacement, their
/// incident bonds, and their rows in every conformer. Surviving atoms keep
/// their relative order; indices are compacted. Features are recomputed
/// when the input was featurized.
pub fn node_drop<R: Rng + ?Sized>(
    graph: &MolecularGraph,
    conformers: Option<&ConformerSet>,
    ratio: f64,
    rng: &mut R,
) -> Result<(MolecularGraph, Option<ConformerSet>)> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::invalid(format!("drop ratio must lie in [0, 1), got {ratio}")));
    }
    let n = graph.num_atoms();
    let drop = (ratio * n as f64).floor() as usize;
    if drop >= n {
        return Err(Error::invalid(format!("dropping {drop} of {n} atoms would empty the molecule")));
    }
    if drop == 0 {
        return Ok((graph.clone(), conformers.cloned()));
    }
    let mut removed = vec![false; n];
    for i in sample(rng, n, drop).iter() {
        removed[i] = true;
    }
    let keep: Vec<usize> = (0..n).filter(|&i| !removed[i]).collect();
    let mut new_index = vec![usize::MAX; n];
    for (new, &old) in keep.iter().enumerate() {
        new_index[old] = new;
    }
    let atoms: Vec<(u8, i8)> = keep
        .iter()
        .map(|&i| (graph.atoms()[i].atomic_number, graph.atoms()[i].formal_charge))
        .collect();
    let bonds: Vec<Bond> = graph
        .bonds()
        .iter()
        .filter(|b| !removed[b.endpoints.0] && !removed[b.endpoints.1])
        .map(|b| Bond {
            endpoints: (new_index[b.endpoints.0], new_index[b.endpoints.1]),
            order: b.order,
        })
        .collect();
    let mut out = MolecularGraph::new(graph.id.clone(), &atoms, bonds)?;
    out.targets = graph.targets.clone();
    if let Some(scheme) = graph.feature_scheme {
        out = featurize(&out, scheme);
    }
    out.validate()?;
    let confs = conformers.map(|set| set.retain_atoms(&keep)).transpose()?;
    Ok((out, confs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conformer::{pairwise_distances, Conformer};
    use crate::molgraph::{BondOrder, FeatureScheme};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn chain(n: usize) -> (MolecularGraph, ConformerSet) {
        let bonds = (0..n - 1)
            .map(|i| Bond {
                endpoints: (i, i + 1),
                order: BondOrder::Single,
            })
            .collect();
        let g = MolecularGraph::new("c", &vec![(6, 0); n], bonds).unwrap();
        let coords = (0..n).map(|i| [i as f64 * 1.5, (i * i) as f64 * 0.1, 0.0]).collect();
        (featurize(&g, FeatureScheme::OneHotBasic), ConformerSet::single(Conformer::new(coords)).unwrap())
    }

    #[test]
    fn zero_ratio_is_identity() {
        let (g, c) = chain(5);
        let (g2, c2) = node_drop(&g, Some(&c), 0.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(g2, g);
        assert_eq!(c2.unwrap(), c);
    }

    #[test]
    fn drops_floor_of_ratio_and_matching_rows() {
        let (g, c) = chain(10);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (g2, c2) = node_drop(&g, Some(&c), 0.2, &mut rng).unwrap();
        let c2 = c2.unwrap();
        assert_eq!(g2.num_atoms(), 8);
        assert_eq!(c2.num_atoms(), 8);
        g2.validate().unwrap();
        assert_eq!(g2.atom_features.as_ref().unwrap().rows(), 8);
        // Surviving coordinates are a subsequence of the originals.
        let orig = &c.lowest_energy().coords;
        let kept: Vec<usize> = c2
            .lowest_energy()
            .coords
            .iter()
            .map(|p| orig.iter().position(|q| q == p).unwrap())
            .collect();
        assert!(kept.windows(2).all(|w| w[0] < w[1]));
        let full = pairwise_distances(c.lowest_energy()).unwrap();
        let sub = pairwise_distances(c2.lowest_energy()).unwrap();
        for (a, &i) in kept.iter().enumerate() {
            for (b, &j) in kept.iter().enumerate() {
                assert_eq!(sub.get(a, b), full.get(i, j));
            }
        }
    }

    #[test]
    fn refuses_to_empty() {
        let (g, _) = chain(1);
        assert!(node_drop(&g, None, 0.99, &mut ChaCha8Rng::seed_from_u64(0)).is_ok());
        assert!(node_drop(&g, None, 1.0, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }
}
