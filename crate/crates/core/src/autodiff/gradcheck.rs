use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ParamStore, Tape, Var};
use crate::error::{Error, Result};

/// Absolute denominator floor of the relative error.
pub const GRADCHECK_FLOOR: f64 = 1e-6;

/// Coordinates whose gradient is below this fraction of the largest
/// analytic gradient are compared in absolute terms at that scale. Exactly
/// zero gradients (biases ahead of batch norm in training mode) otherwise
/// measure only the cancellation noise of the central difference.
pub const GRADCHECK_SCALE_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub h: f64,
    /// Number of coordinates compared (all of them if the store is smaller).
    pub samples: usize,
    pub seed: u64,
    /// Negative control: analytic gradients are replaced by `g·(1 + c) + c`.
    pub corrupt: Option<f64>,
    /// Skip coordinates whose stencil `θ ± h` changes a ReLU sign or a
    /// max/min selection; central differences are not valid across a kink.
    pub skip_kinks: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            samples: 200,
            seed: 0,
            corrupt: None,
            skip_kinks: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<(String, usize)>,
    /// Analytic and numeric derivative at the worst coordinate.
    pub worst_values: (f64, f64),
    /// Function value at the unperturbed parameters.
    pub output: f64,
    /// Denominator floor actually used.
    pub floor: f64,
    pub checked: usize,
    /// Sampled coordinates left out because the stencil crossed a kink.
    pub skipped: usize,
}

/// Compares analytic gradients of `f` against central differences
/// `(f(θ + h·e_k) − f(θ − h·e_k)) / 2h` over a random subsample of
/// coordinates. `f` records its computation on the given tape and returns
/// the scalar output; it must be deterministic.
pub fn check_gradients<F>(store: &mut ParamStore, opts: &GradCheckOptions, mut f: F) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore, &mut Tape) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = f(store, &mut tape)?;
    let output = tape.item(out)?;
    let branches = tape.branch_fingerprint();
    let analytic = tape.backward(out)?.params();

    let coords: Vec<(String, usize)> = store
        .iter()
        .flat_map(|(name, p)| (0..p.value.len()).map(move |i| (name.clone(), i)))
        .collect();
    if coords.is_empty() {
        return Err(Error::invalid("gradient check on an empty parameter store"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let picked = sample(&mut rng, coords.len(), opts.samples.min(coords.len()));

    let mut eval = |store: &ParamStore| -> Result<(f64, u64)> {
        let mut tape = Tape::new();
        let out = f(store, &mut tape)?;
        Ok((tape.item(out)?, tape.branch_fingerprint()))
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        worst_values: (0.0, 0.0),
        output,
        floor: 0.0,
        checked: 0,
        skipped: 0,
    };
    let scale = analytic
        .values()
        .flat_map(|g| g.data().iter())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    report.floor = GRADCHECK_FLOOR.max(GRADCHECK_SCALE_FLOOR * scale);
    for k in picked.iter() {
        let (name, i) = &coords[k];
        let mut a = analytic.get(name).map_or(0.0, |g| g.data()[*i]);
        if let Some(c) = opts.corrupt {
            a = a * (1.0 + c) + c;
        }
        let orig = store.value(name)?.data()[*i];
        store.get_mut(name)?.value.data_mut()[*i] = orig + opts.h;
        let plus = eval(store);
        store.get_mut(name)?.value.data_mut()[*i] = orig - opts.h;
        let minus = eval(store);
        store.get_mut(name)?.value.data_mut()[*i] = orig;
        let ((plus, bp), (minus, bm)) = (plus?, minus?);
        if opts.skip_kinks && (bp != branches || bm != branches) {
            report.skipped += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * opts.h);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(report.floor);
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = rel;
            report.worst = Some((name.clone(), *i));
            report.worst_values = (a, numeric);
        }
        report.checked += 1;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{ParamKind, Tensor};
    use rand::Rng;

    fn random_store(seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new(seed);
        store.add_linear("l1", 4, 8, &mut rng).unwrap();
        store.add_linear("l2", 8, 1, &mut rng).unwrap();
        for (_, p) in store.iter_mut() {
            p.value.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
        }
        store
    }

    fn input() -> Tensor {
        Tensor::new(
            3,
            4,
            (0..12).map(|i| ((i * 7 % 11) as f64 - 5.0) / 4.0).collect(),
        )
        .unwrap()
    }

    #[test]
    fn linear_function_is_exact() {
        let mut store = ParamStore::new(0);
        store
            .insert("w", Tensor::row_vector(vec![0.3, -1.2, 2.0]), ParamKind::Weight)
            .unwrap();
        let report = check_gradients(&mut store, &GradCheckOptions::default(), |s, tape| {
            let w = tape.param(s, "w")?;
            let c = tape.constant(Tensor::row_vector(vec![1.0, 2.0, -3.0]));
            let p = tape.mul(w, c)?;
            Ok(tape.sum(p))
        })
        .unwrap();
        assert!(report.max_rel_error <= 1e-10, "{report:?}");
    }

    #[test]
    fn sigmoid_mlp_passes_tight_bar() {
        let mut store = random_store(3);
        let x = input();
        let report = check_gradients(&mut store, &GradCheckOptions::default(), |s, tape| {
            let xv = tape.constant(x.clone());
            let h = tape.linear(xv, s, "l1")?;
            let h = tape.sigmoid(h);
            let y = tape.linear(h, s, "l2")?;
            let y = tape.mul(y, y)?;
            Ok(tape.mean(y))
        })
        .unwrap();
        assert_eq!(report.checked, 49);
        assert!(report.max_rel_error <= 1e-6, "{report:?}");
    }

    #[test]
    fn stencil_across_relu_kink_is_skipped() {
        let mut store = ParamStore::new(0);
        store
            .insert("w", Tensor::row_vector(vec![3e-6, 1.0, -2.0]), ParamKind::Weight)
            .unwrap();
        let f = |s: &ParamStore, tape: &mut Tape| {
            let w = tape.param(s, "w")?;
            let r = tape.relu(w);
            Ok(tape.sum(r))
        };
        let report = check_gradients(&mut store, &GradCheckOptions::default(), f).unwrap();
        assert_eq!((report.checked, report.skipped), (2, 1));
        assert!(report.max_rel_error <= 1e-10, "{report:?}");
        let opts = GradCheckOptions {
            skip_kinks: false,
            ..Default::default()
        };
        let report = check_gradients(&mut store, &opts, f).unwrap();
        assert!(report.max_rel_error > 0.1, "{report:?}");
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let mut store = random_store(4);
        let x = input();
        let opts = GradCheckOptions {
            corrupt: Some(0.05),
            ..Default::default()
        };
        let report = check_gradients(&mut store, &opts, |s, tape| {
            let xv = tape.constant(x.clone());
            let h = tape.linear(xv, s, "l1")?;
            let h = tape.sigmoid(h);
            let y = tape.linear(h, s, "l2")?;
            Ok(tape.sum(y))
        })
        .unwrap();
        assert!(report.max_rel_error >= 1e-2, "{report:?}");
    }
}
