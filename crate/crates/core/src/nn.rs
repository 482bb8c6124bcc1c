//! Shared building blocks of the encoders and heads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tape, Var};
use crate::error::{Error, Result};

/// Forward-pass mode. Dropout masks are drawn from `rng` in train mode.
pub struct Mode {
    pub train: bool,
    pub rng: ChaCha8Rng,
}

impl Mode {
    pub fn eval() -> Self {
        Self {
            train: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn train(seed: u64) -> Self {
        Self {
            train: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

/// Batch-norm placement of an [`Mlp`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Norm {
    /// Between hidden layers, before the activation.
    pub mid: bool,
    /// On the output of the last layer.
    pub last: bool,
    pub momentum: f64,
}

impl Norm {
    pub const NONE: Norm = Norm {
        mid: false,
        last: false,
        momentum: 0.1,
    };
}

/// Stack of affine layers `dims[0] → dims[1] → … → dims[k]` with relu
/// between layers and no activation after the last. One layer is a plain
/// affine map.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub prefix: String,
    pub dims: Vec<usize>,
    pub norm: Norm,
    pub dropout: f64,
}

impl Mlp {
    /// `layers` affine maps from `input` to `output`, hidden width `hidden`.
    pub fn new(prefix: impl Into<String>, input: usize, hidden: usize, output: usize, layers: usize) -> Result<Self> {
        if layers == 0 {
            return Err(Error::invalid("an MLP needs at least one layer"));
        }
        let mut dims = vec![input];
        dims.extend(std::iter::repeat_n(hidden, layers - 1));
        dims.push(output);
        Ok(Self {
            prefix: prefix.into(),
            dims,
            norm: Norm::NONE,
            dropout: 0.0,
        })
    }

    pub fn with_norm(mut self, norm: Norm) -> Self {
        self.norm = norm;
        self
    }

    pub fn with_dropout(mut self, p: f64) -> Self {
        self.dropout = p;
        self
    }

    pub fn layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().expect("dims has at least two entries")
    }

    fn layer_name(&self, i: usize) -> String {
        format!("{}.l{i}", self.prefix)
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        let k = self.layers();
        for i in 0..k {
            store.add_linear(&self.layer_name(i), self.dims[i], self.dims[i + 1], rng)?;
            if (i + 1 < k && self.norm.mid) || (i + 1 == k && self.norm.last) {
                store.add_batch_norm(&format!("{}.bn{i}", self.prefix), self.dims[i + 1])?;
            }
        }
        Ok(())
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, mode: &mut Mode) -> Result<Var> {
        let k = self.layers();
        let mut h = x;
        for i in 0..k {
            h = tape.linear(h, store, &self.layer_name(i))?;
            let last = i + 1 == k;
            if (!last && self.norm.mid) || (last && self.norm.last) {
                h = tape.batch_norm(h, store, &format!("{}.bn{i}", self.prefix), self.norm.momentum, mode.train)?;
            }
            if !last {
                h = tape.relu(h);
                h = tape.dropout(h, self.dropout, &mut mode.rng, mode.train)?;
            }
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    #[test]
    fn single_layer_is_affine() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new(0);
        let mlp = Mlp::new("m", 3, 7, 2, 1).unwrap();
        mlp.init(&mut store, &mut rng).unwrap();
        assert_eq!(store.len(), 2);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::row_vector(vec![1.0, -2.0, 0.5]));
        let y = mlp.forward(&mut tape, &store, x, &mut Mode::eval()).unwrap();
        let w = store.value("m.l0.w").unwrap();
        for j in 0..2 {
            let expected = w.get(0, j) - 2.0 * w.get(1, j) + 0.5 * w.get(2, j);
            assert!((tape.value(y).get(0, j) - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn norm_placement() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new(0);
        let norm = Norm {
            mid: true,
            last: true,
            momentum: 0.1,
        };
        Mlp::new("m", 3, 4, 2, 3).unwrap().with_norm(norm).init(&mut store, &mut rng).unwrap();
        for name in ["m.bn0.gamma", "m.bn1.gamma", "m.bn2.gamma"] {
            assert!(store.get(name).is_ok(), "{name}");
        }
        assert_eq!(store.value("m.bn2.gamma").unwrap().cols(), 2);
    }
}
