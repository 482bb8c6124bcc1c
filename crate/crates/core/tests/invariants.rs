use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use infomax3d::autodiff::{exact_sum, ParamStore};
use infomax3d::conformer::{boltzmann_weights, gamma_encode, pairwise_distances, Conformer};
use infomax3d::losses::{
    cosine_sim, multi2d_loss, multi3d_eq2, ntxent_eq1, sim_all, sim_max, DistanceHead, DistanceHeadConfig,
    SetSimilarity,
};
use infomax3d::molgraph::{parse_str, split_random, write_dataset};
use infomax3d::net3d::{encode3d, Net3D, Net3DConfig};
use infomax3d::synth::{random_rotation, synthetic_dataset, transform, SynthConfig};

fn vector(d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0..3.0f64, d).prop_filter("non-zero", |v| v.iter().map(|x| x * x).sum::<f64>() > 1e-3)
}

fn batch(n: usize, d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(vector(d), n)
}

fn pair_batch() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    (2usize..7, 1usize..9).prop_flat_map(|(n, d)| (batch(n, d), batch(n, d)))
}

fn coords(n: usize) -> impl Strategy<Value = Vec<[f64; 3]>> {
    prop::collection::vec(prop::array::uniform3(-4.0..4.0f64), n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ntxent_ignores_positive_rescaling((za, zb) in pair_batch(), s in 0.1..10.0f64) {
        let scaled: Vec<Vec<f64>> = za.iter().map(|r| r.iter().map(|x| x * s).collect()).collect();
        let a = ntxent_eq1(&za, &zb, 0.1).unwrap();
        let b = ntxent_eq1(&scaled, &zb, 0.1).unwrap();
        prop_assert!((a - b).abs() <= 1e-10);
    }

    #[test]
    fn ntxent_is_invariant_to_joint_reordering((za, zb) in pair_batch(), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let mut order: Vec<usize> = (0..za.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let pa: Vec<Vec<f64>> = order.iter().map(|&i| za[i].clone()).collect();
        let pb: Vec<Vec<f64>> = order.iter().map(|&i| zb[i].clone()).collect();
        let a = ntxent_eq1(&za, &zb, 0.1).unwrap();
        let b = ntxent_eq1(&pa, &pb, 0.1).unwrap();
        prop_assert!((a - b).abs() <= 1e-12);
    }

    #[test]
    fn ntxent_lower_bound((za, zb) in pair_batch()) {
        // Each term is at least −(1 − (−1))/τ minus log of the negatives count.
        let n = za.len() as f64;
        let v = ntxent_eq1(&za, &zb, 0.1).unwrap();
        prop_assert!(v >= -20.0 + (n - 1.0).ln() - 1e-9);
    }

    #[test]
    fn multi3d_is_invariant_to_conformer_order(
        (za, zb) in (2usize..6, 1usize..6).prop_flat_map(|(n, d)| {
            (batch(n, d), prop::collection::vec(batch(3, d), n))
        })
    ) {
        let reversed: Vec<Vec<Vec<f64>>> = zb.iter().map(|s| s.iter().rev().cloned().collect()).collect();
        let a = multi3d_eq2(&za, &zb, 0.1).unwrap();
        let b = multi3d_eq2(&za, &reversed, 0.1).unwrap();
        prop_assert!((a - b).abs() <= 1e-12);
    }

    #[test]
    fn set_similarities_are_bounded(a in batch(3, 4), b in batch(3, 4)) {
        let all = sim_all(&a, &b).unwrap();
        let max = sim_max(&a, &b).unwrap();
        prop_assert!(all.abs() <= 9.0 + 1e-12);
        prop_assert!(max.abs() <= 3.0 + 1e-12);
        prop_assert!(max * 3.0 >= all - 1e-9);
        prop_assert!((sim_all(&b, &a).unwrap() - all).abs() <= 1e-12);
    }

    #[test]
    fn set_losses_match_scalar_similarities(za in batch(6, 4), zb in batch(6, 4)) {
        let sets_a: Vec<Vec<Vec<f64>>> = za.chunks(2).map(<[Vec<f64>]>::to_vec).collect();
        let sets_b: Vec<Vec<Vec<f64>>> = zb.chunks(2).map(<[Vec<f64>]>::to_vec).collect();
        for (kind, sim) in [(SetSimilarity::All, sim_all as fn(&[Vec<f64>], &[Vec<f64>]) -> _), (SetSimilarity::Max, sim_max)] {
            let got = multi2d_loss(kind, &sets_a, &sets_b, 0.5).unwrap();
            let mut total = 0.0;
            for i in 0..3 {
                let pos = (sim(&sets_a[i], &sets_b[i]).unwrap() / 0.5).exp();
                let neg: f64 = (0..3).filter(|&k| k != i).map(|k| (sim(&sets_a[i], &sets_b[k]).unwrap() / 0.5).exp()).sum();
                total -= (pos / neg).ln();
            }
            prop_assert!((got - total / 3.0).abs() <= 1e-10, "{kind:?}: {got} vs {}", total / 3.0);
        }
    }

    #[test]
    fn cosine_is_symmetric_and_bounded(a in vector(5), b in vector(5)) {
        let c = cosine_sim(&a, &b).unwrap();
        prop_assert_eq!(c, cosine_sim(&b, &a).unwrap());
        prop_assert!(c.abs() <= 1.0 + 1e-12);
    }

    #[test]
    fn boltzmann_weights_are_a_distribution(e in prop::collection::vec(-5.0..5.0f64, 1..8), shift in -100.0..100.0f64) {
        let w = boltzmann_weights(&e, 298.15).unwrap();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        let shifted: Vec<f64> = e.iter().map(|x| x + shift).collect();
        let ws = boltzmann_weights(&shifted, 298.15).unwrap();
        for (a, b) in w.iter().zip(&ws) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
        let lowest = e.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        prop_assert!(w.iter().all(|p| *p <= w[lowest]));
    }

    #[test]
    fn gamma_has_fixed_layout(d in 0.0..30.0f64, f in 0usize..20) {
        let g = gamma_encode(d, f);
        prop_assert_eq!(g.len(), 2 * f + 1);
        prop_assert_eq!(g[0], d);
        for k in 0..f {
            let (s, c) = (g[1 + 2 * k], g[2 + 2 * k]);
            prop_assert!((s * s + c * c - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn distances_are_a_metric_and_rigid(pts in coords(6), seed in any::<u64>(), t in prop::array::uniform3(-5.0..5.0f64)) {
        let conf = Conformer::new(pts);
        let d = pairwise_distances(&conf).unwrap();
        let moved = transform(&conf, &random_rotation(&mut ChaCha8Rng::seed_from_u64(seed)), t);
        let dm = pairwise_distances(&moved).unwrap();
        for u in 0..6 {
            prop_assert_eq!(d.get(u, u), 0.0);
            for v in 0..6 {
                prop_assert_eq!(d.get(u, v), d.get(v, u));
                prop_assert!((d.get(u, v) - dm.get(u, v)).abs() <= 1e-12);
                for w in 0..6 {
                    prop_assert!(d.get(u, w) <= d.get(u, v) + d.get(v, w) + 1e-12);
                }
            }
        }
    }

    #[test]
    fn encode3d_is_rigid_motion_invariant(pts in coords(7), seed in any::<u64>(), t in prop::array::uniform3(-20.0..20.0f64)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Net3D::new(Net3DConfig { hidden: 8, edge_hidden: 8, d_z: 4, ..Default::default() }).unwrap();
        let mut store = ParamStore::new(seed);
        net.init_params(&mut store, &mut rng).unwrap();
        let conf = Conformer::new(pts);
        let a = encode3d(&net, &store, &conf).unwrap();
        let b = encode3d(&net, &store, &transform(&conf, &random_rotation(&mut rng), t)).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-9);
        }
    }

    #[test]
    fn distance_head_is_symmetric_and_positive(hu in prop::collection::vec(-50.0..50.0f64, 6), hv in prop::collection::vec(-50.0..50.0f64, 6), seed in any::<u64>()) {
        let head = DistanceHead::new(DistanceHeadConfig { hidden: 8, layers: 2 }, 6).unwrap();
        let mut store = ParamStore::new(seed);
        head.init_params(&mut store, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let a = head.predict(&store, &hu, &hv).unwrap();
        prop_assert_eq!(a, head.predict(&store, &hv, &hu).unwrap());
        prop_assert!(a > 0.0);
    }

    #[test]
    fn exact_sum_ignores_order(mut v in prop::collection::vec(-1e20..1e20f64, 0..40), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        v.extend([1.0, -1e20, 1e20, 1e-10]);
        let a = exact_sum(v.iter().copied());
        v.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(a, exact_sum(v.iter().copied()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn dataset_text_round_trips(seed in any::<u64>(), count in 1usize..6) {
        let data = synthetic_dataset(count, seed, &SynthConfig { relax_steps: 50, ..Default::default() }).unwrap();
        let text = write_dataset(&data);
        let back = parse_str(&text).unwrap();
        prop_assert_eq!(write_dataset(&back), text);
        prop_assert_eq!(back.ids(), data.ids());
        for (a, b) in data.molecules.iter().zip(&back.molecules) {
            prop_assert_eq!(a.graph.bonds(), b.graph.bonds());
            prop_assert_eq!(&a.graph.targets, &b.graph.targets);
            let (ca, cb) = (a.conformers.as_ref().unwrap(), b.conformers.as_ref().unwrap());
            prop_assert_eq!(ca.conformers(), cb.conformers());
        }
    }

    #[test]
    fn random_split_partitions_the_dataset(seed in any::<u64>(), count in 3usize..30) {
        let data = synthetic_dataset(count, 1, &SynthConfig { relax_steps: 10, max_atoms: 5, ..Default::default() }).unwrap();
        let ids: Vec<String> = data.ids().into_iter().map(String::from).collect();
        let (tr, va, te) = split_random(data, (0.6, 0.2, 0.2), seed).unwrap();
        prop_assert_eq!(tr.len() + va.len() + te.len(), count);
        let mut seen: Vec<String> = tr.ids().into_iter().chain(va.ids()).chain(te.ids()).map(String::from).collect();
        seen.sort();
        let mut expected = ids;
        expected.sort();
        prop_assert_eq!(seen, expected);
    }
}
