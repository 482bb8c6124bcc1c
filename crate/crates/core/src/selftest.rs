//! Quick invariant suite: symmetry, loss identities, gradient checks,
//! encoding, schedule and conformer rules. Each probe is also usable on
//! its own with larger sample counts.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{check_gradients, GradCheckOptions, GradCheckReport, ParamKind, ParamStore, Tensor};
use crate::conformer::{boltzmann_weights, gamma_encode, select_conformers, Conformer, ConformerSet};
use crate::error::Result;
use crate::losses::{
    contrastive_loss, distance_mse, multi3d_eq2, ntxent_eq1, DistanceHead, DistanceHeadConfig, LossConfig, LossKind,
};
use crate::molgraph::{featurize, FeatureScheme, MolecularGraph};
use crate::net2d::{encode2d, DegreeStats, GraphBatch, Net2D, Net2DConfig};
use crate::net3d::{encode3d, Net3D, Net3DConfig};
use crate::nn::Mode;
use crate::synth::{permute_conformer, random_permutation, random_rotation, synthetic_molecule, transform, SynthConfig};
use crate::training::{LrSchedule, Plateau, PlateauConfig};

#[derive(Debug, Clone)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, passed: bool, detail: String) -> Check {
    Check { name, passed, detail }
}

pub fn small_net2d() -> Net2DConfig {
    Net2DConfig {
        depth: 2,
        hidden: 8,
        d_z: 6,
        ..Default::default()
    }
}

pub fn small_net3d() -> Net3DConfig {
    Net3DConfig {
        hidden: 8,
        edge_hidden: 8,
        d_z: 6,
        ..Default::default()
    }
}

fn random_rows<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| (0..cols).map(|_| StandardNormal.sample(rng)).collect())
        .collect()
}

/// Largest `‖encode3d(g∘C) − encode3d(C)‖∞` over random isometries `g`,
/// and whether `encode2d` and `encode3d` were exactly unchanged by atom
/// relabelings.
pub fn symmetry_probe(molecules: usize, isometries: usize, permutations: usize, seed: u64) -> Result<(f64, bool, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = SynthConfig {
        conformers: 1,
        ..Default::default()
    };
    let net3d = Net3D::new(small_net3d())?;
    let net2d = Net2D::new(small_net2d(), DegreeStats::new(1.0)?)?;
    let mut store = ParamStore::new(seed);
    net2d.init_params(&mut store, &mut rng)?;
    net3d.init_params(&mut store, &mut rng)?;
    let mut worst_iso = 0.0f64;
    let mut worst_perm3d = 0.0f64;
    let mut exact_2d = true;
    for i in 0..molecules {
        let m = synthetic_molecule(format!("s{i}"), &cfg, &mut rng)?;
        let conf = m.conformers.as_ref().map(|s| s.lowest_energy().clone()).unwrap_or_else(|| Conformer::new(vec![]));
        let base3 = encode3d(&net3d, &store, &conf)?;
        for _ in 0..isometries {
            let r = random_rotation(&mut rng);
            let t = [0; 3].map(|_| rng.random_range(-10.0..10.0));
            let z = encode3d(&net3d, &store, &transform(&conf, &r, t))?;
            worst_iso = worst_iso.max(max_abs_diff(&base3, &z));
        }
        let g = featurize(&m.graph, FeatureScheme::OneHotBasic);
        let base2 = encode2d(&net2d, &store, &g)?;
        for _ in 0..permutations {
            let perm = random_permutation(g.num_atoms(), &mut rng);
            exact_2d &= encode2d(&net2d, &store, &g.permuted(&perm)?)? == base2;
            let z = encode3d(&net3d, &store, &permute_conformer(&conf, &perm))?;
            worst_perm3d = worst_perm3d.max(max_abs_diff(&base3, &z));
        }
    }
    Ok((worst_iso, exact_2d, worst_perm3d))
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Which end-to-end function a gradient check differentiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradTarget {
    Encode2d,
    Encode3d,
    Loss(LossKind),
    DistanceHead,
}

/// Finite-difference check of one target over `samples` parameter
/// coordinates (the embeddings themselves for the losses).
pub fn gradient_probe(target: GradTarget, samples: usize, seed: u64, corrupt: Option<f64>) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = GradCheckOptions {
        samples,
        seed,
        corrupt,
        ..Default::default()
    };
    let synth = SynthConfig {
        min_atoms: 3,
        max_atoms: 7,
        conformers: 3,
        relax_steps: 100,
        ..Default::default()
    };
    let molecules = (0..8)
        .map(|i| synthetic_molecule(format!("g{i}"), &synth, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    match target {
        GradTarget::Encode2d => {
            let graphs: Vec<MolecularGraph> = molecules
                .iter()
                .map(|m| featurize(&m.graph, FeatureScheme::OneHotBasic))
                .collect();
            let refs: Vec<&MolecularGraph> = graphs.iter().collect();
            let net = Net2D::new(small_net2d(), DegreeStats::from_graphs(refs.iter().copied())?)?;
            let mut store = ParamStore::new(seed);
            net.init_params(&mut store, &mut rng)?;
            let batch = GraphBatch::new(&refs)?;
            let probe = Tensor::from_rows(&random_rows(refs.len(), net.config.d_z, &mut rng))?;
            check_gradients(&mut store, &opts, |s, tape| {
                let z = net.forward(tape, s, &batch, &mut Mode::train(seed))?;
                let w = tape.constant(probe.clone());
                let p = tape.mul(z, w)?;
                Ok(tape.sum(p))
            })
        }
        GradTarget::Encode3d => {
            let confs: Vec<Conformer> = molecules
                .iter()
                .filter_map(|m| m.conformers.as_ref().map(|s| s.lowest_energy().clone()))
                .collect();
            let refs: Vec<&Conformer> = confs.iter().collect();
            let net = Net3D::new(small_net3d())?;
            let mut store = ParamStore::new(seed);
            net.init_params(&mut store, &mut rng)?;
            let batch = net.batch(&refs)?;
            let probe = Tensor::from_rows(&random_rows(refs.len(), net.config.d_z, &mut rng))?;
            check_gradients(&mut store, &opts, |s, tape| {
                let z = net.forward(tape, s, &batch, &mut Mode::train(seed))?;
                let w = tape.constant(probe.clone());
                let p = tape.mul(z, w)?;
                Ok(tape.sum(p))
            })
        }
        GradTarget::Loss(kind) => {
            let (n, c, d) = (8, 3, 16);
            let cfg = LossConfig {
                kind,
                tau: 0.5,
                num_conformers: c,
                include_positive: false,
            };
            let mut store = ParamStore::new(seed);
            let rows_a = n * kind.outputs_2d(c);
            let rows_b = n * cfg.conformers_3d();
            store.insert("za", Tensor::from_rows(&random_rows(rows_a, d, &mut rng))?, ParamKind::Weight)?;
            store.insert("zb", Tensor::from_rows(&random_rows(rows_b, d, &mut rng))?, ParamKind::Weight)?;
            check_gradients(&mut store, &opts, |s, tape| {
                let za = tape.param(s, "za")?;
                let zb = tape.param(s, "zb")?;
                contrastive_loss(tape, &cfg, za, zb)
            })
        }
        GradTarget::DistanceHead => {
            let (nodes, dim) = (8, 8);
            let head = DistanceHead::new(DistanceHeadConfig { hidden: 12, layers: 2 }, dim)?;
            let mut store = ParamStore::new(seed);
            head.init_params(&mut store, &mut rng)?;
            store.insert("h", Tensor::from_rows(&random_rows(nodes, dim, &mut rng))?, ParamKind::Weight)?;
            let pairs: Vec<(usize, usize)> = (0..nodes).flat_map(|u| ((u + 1)..nodes).map(move |v| (u, v))).collect();
            let targets: Vec<f64> = pairs.iter().map(|_| rng.random_range(1.0..4.0)).collect();
            check_gradients(&mut store, &opts, |s, tape| {
                let h = tape.param(s, "h")?;
                let pred = head.forward(tape, s, h, &pairs)?;
                distance_mse(tape, pred, &targets)
            })
        }
    }
}

pub const GRAD_TARGETS: [GradTarget; 7] = [
    GradTarget::Encode2d,
    GradTarget::Encode3d,
    GradTarget::Loss(LossKind::NtxentEq1),
    GradTarget::Loss(LossKind::Multi3dEq2),
    GradTarget::Loss(LossKind::Multi2dSimall),
    GradTarget::Loss(LossKind::Multi2dSimmax),
    GradTarget::DistanceHead,
];

/// Runs every probe at a small scale.
pub fn run_selftest(seed: u64) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let (iso, exact2d, perm3d) = symmetry_probe(10, 3, 3, seed)?;
    out.push(check(
        "encode3d isometry invariance",
        iso <= 1e-9,
        format!("max |dz| = {iso:.2e} (tol 1e-9)"),
    ));
    out.push(check(
        "encode3d permutation invariance",
        perm3d <= 1e-9,
        format!("max |dz| = {perm3d:.2e} (tol 1e-9)"),
    ));
    out.push(check("encode2d permutation invariance", exact2d, "bit-exact".into()));

    let aligned = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    let v = ntxent_eq1(&aligned, &aligned, 0.1)?;
    out.push(check(
        "ntxent aligned/orthogonal closed form",
        (v + 10.0).abs() <= 1e-9,
        format!("loss = {v} (expected -10)"),
    ));
    let same = vec![vec![0.3, -0.4, 1.2]; 5];
    let v = ntxent_eq1(&same, &same, 0.1)?;
    out.push(check(
        "ntxent identical embeddings closed form",
        (v - 4f64.ln()).abs() <= 1e-9,
        format!("loss = {v} (expected ln 4)"),
    ));

    let mut worst = 0.0f64;
    for _ in 0..50 {
        let n = rng.random_range(2..=6);
        let d = rng.random_range(2..=8);
        let za = random_rows(n, d, &mut rng);
        let zb = random_rows(n, d, &mut rng);
        let one = ntxent_eq1(&za, &zb, 0.1)?;
        let single: Vec<Vec<Vec<f64>>> = zb.iter().map(|r| vec![r.clone()]).collect();
        let dup: Vec<Vec<Vec<f64>>> = zb.iter().map(|r| vec![r.clone(), r.clone()]).collect();
        worst = worst
            .max((multi3d_eq2(&za, &single, 0.1)? - one).abs())
            .max((multi3d_eq2(&za, &dup, 0.1)? - one).abs());
    }
    out.push(check(
        "multi-conformer loss reduces to single-conformer",
        worst <= 1e-9,
        format!("max diff = {worst:.2e} (tol 1e-9)"),
    ));

    for target in GRAD_TARGETS {
        let r = gradient_probe(target, 60, seed, None)?;
        out.push(Check {
            name: "gradient check",
            passed: r.max_rel_error <= 1e-4,
            detail: format!("{target:?}: max rel err {:.2e} over {} coords (tol 1e-4)", r.max_rel_error, r.checked),
        });
    }
    let r = gradient_probe(GradTarget::Encode2d, 60, seed, Some(0.05))?;
    out.push(check(
        "gradient check negative control",
        r.max_rel_error > 1e-4,
        format!("corrupted gradients give max rel err {:.2e}", r.max_rel_error),
    ));

    let lens_ok = [0, 3, 4, 8, 10, 50].iter().all(|&f| gamma_encode(1.3, f).len() == 2 * f + 1);
    let g = gamma_encode(std::f64::consts::PI, 2);
    let closed = [std::f64::consts::PI, 0.0, -1.0, 1.0, 0.0];
    let gamma_err = max_abs_diff(&g, &closed);
    out.push(check(
        "distance encoding",
        lens_ok && gamma_err <= 1e-12,
        format!("lengths 2F+1: {lens_ok}, gamma(pi) err {gamma_err:.1e}"),
    ));

    let mut p = Plateau::new(PlateauConfig::PRETRAIN)?;
    let fired: Vec<bool> = (0..27).map(|_| p.step(1.0)).collect();
    let sched = LrSchedule::new(8e-5, vec![700], PlateauConfig::PRETRAIN)?;
    out.push(check(
        "schedule constants",
        fired[..26].iter().all(|f| !f) && fired[26] && sched.lr_at(350, 0) == 4e-5,
        format!("reduction at evaluation {:?}, lr(350) = {}", fired.iter().position(|&f| f), sched.lr_at(350, 0)),
    ));

    let c = |e: f64| {
        let mut c = Conformer::new(vec![[0.0; 3], [e, 0.0, 0.0]]);
        c.energy = Some(e);
        c
    };
    let set = ConformerSet::new(vec![c(2.0), c(1.0)])?;
    let picked: Vec<f64> = select_conformers(&set, 3)?.iter().filter_map(|c| c.energy).collect();
    let w1 = boltzmann_weights(&[0.0, 0.5, 1.0], 298.15)?;
    let w2 = boltzmann_weights(&[100.0, 100.5, 101.0], 298.15)?;
    let offset = max_abs_diff(&w1, &w2);
    out.push(check(
        "conformer padding and Boltzmann offset invariance",
        picked == [1.0, 2.0, 1.0] && offset <= 1e-12,
        format!("selected energies {picked:?}, weight diff {offset:.1e}"),
    ));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selftest_passes() {
        for c in run_selftest(1).unwrap() {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }
}
