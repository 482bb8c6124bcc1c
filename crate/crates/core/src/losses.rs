//! Contrastive objectives between 2D and 3D embeddings, set similarities
//! for multi-conformer batches, and the pairwise distance-prediction head.
//!
//! Embedding batches are row matrices. Multi-vector sides list the `c`
//! vectors of molecule `i` on rows `i·c .. (i+1)·c`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Reduction, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{Mlp, Mode};

pub const DEFAULT_TAU: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// One conformer per molecule; negatives-only denominator.
    NtxentEq1,
    /// `c` conformers per molecule summed in numerator and denominator.
    Multi3dEq2,
    /// `c` 2D vectors against `c` conformers, sum of all pairwise cosines.
    Multi2dSimall,
    /// `c` 2D vectors against `c` conformers, best 2D match per conformer.
    Multi2dSimmax,
    /// Predict interatomic distances from 2D node representations.
    DistanceMse,
}

impl LossKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "ntxent_eq1" | "ntxent" => Some(Self::NtxentEq1),
            "multi3d_eq2" | "multi3d" => Some(Self::Multi3dEq2),
            "multi2d_simall" => Some(Self::Multi2dSimall),
            "multi2d_simmax" => Some(Self::Multi2dSimmax),
            "distance_mse" => Some(Self::DistanceMse),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::NtxentEq1 => "ntxent_eq1",
            Self::Multi3dEq2 => "multi3d_eq2",
            Self::Multi2dSimall => "multi2d_simall",
            Self::Multi2dSimmax => "multi2d_simmax",
            Self::DistanceMse => "distance_mse",
        }
    }

    pub fn is_contrastive(self) -> bool {
        self != Self::DistanceMse
    }

    /// Number of 2D vectors the encoder must emit per molecule.
    pub fn outputs_2d(self, c: usize) -> usize {
        match self {
            Self::Multi2dSimall | Self::Multi2dSimmax => c,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub kind: LossKind,
    pub tau: f64,
    pub num_conformers: usize,
    /// Adds the positive pair to the denominator (standard NT-Xent).
    pub include_positive: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::NtxentEq1,
            tau: DEFAULT_TAU,
            num_conformers: 1,
            include_positive: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::invalid(format!("tau must be positive, got {}", self.tau)));
        }
        if self.num_conformers == 0 {
            return Err(Error::invalid("num_conformers must be at least 1"));
        }
        Ok(())
    }

    /// Conformers encoded per molecule.
    pub fn conformers_3d(&self) -> usize {
        match self.kind {
            LossKind::NtxentEq1 | LossKind::DistanceMse => 1,
            _ => self.num_conformers,
        }
    }
}

/// Rows scaled to unit length; zero rows are an error.
fn normalize_rows(tape: &mut Tape, x: Var) -> Result<Var> {
    let norms = tape.row_norm(x);
    if tape.value(norms).data().contains(&0.0) {
        return Err(Error::ZeroVector);
    }
    let inv = tape.recip(norms);
    tape.mul_col(x, inv)
}

/// `A_rows × B_rows` matrix of cosine similarities.
pub fn cosine_matrix(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let an = normalize_rows(tape, a)?;
    let bn = normalize_rows(tape, b)?;
    let bt = tape.transpose(bn);
    tape.matmul(an, bt)
}

/// `−(1/N) Σ_i [lse_{k ∈ neg(i)} S_ik − lse_{k ∈ pos(i)} S_ik]` with
/// `pos(i)` the columns `i·c .. (i+1)·c` of an `N × N·c` logit matrix.
fn contrastive_from_logits(tape: &mut Tape, logits: Var, c: usize, include_positive: bool) -> Result<Var> {
    let t = tape.value(logits);
    let (n, cols) = (t.rows(), t.cols());
    if n < 2 {
        return Err(Error::invalid(format!("contrastive losses need at least 2 molecules per batch, got {n}")));
    }
    if cols != n * c {
        return Err(Error::Shape {
            op: "contrastive loss",
            lhs: vec![n, cols],
            rhs: vec![n, n * c],
        });
    }
    let positive: Vec<bool> = (0..n * cols).map(|k| (k % cols) / c == k / cols).collect();
    let denominator: Vec<bool> = positive.iter().map(|p| include_positive || !p).collect();
    let num = tape.masked_logsumexp(logits, positive)?;
    let den = tape.masked_logsumexp(logits, denominator)?;
    let per_row = tape.sub(den, num)?;
    Ok(tape.mean(per_row))
}

fn check_rows(tape: &Tape, v: Var, rows: usize, what: &'static str) -> Result<()> {
    let t = tape.value(v);
    if t.rows() != rows {
        return Err(Error::Shape {
            op: what,
            lhs: t.shape(),
            rhs: vec![rows, t.cols()],
        });
    }
    Ok(())
}

/// Single-conformer loss: `za`, `zb` are `N × d`.
pub fn ntxent(tape: &mut Tape, za: Var, zb: Var, tau: f64, include_positive: bool) -> Result<Var> {
    let n = tape.value(za).rows();
    check_rows(tape, zb, n, "ntxent")?;
    let s = cosine_matrix(tape, za, zb)?;
    let logits = tape.scale(s, 1.0 / tau);
    contrastive_from_logits(tape, logits, 1, include_positive)
}

/// Multi-conformer loss: `za` is `N × d`, `zb` is `N·c × d`.
pub fn multi3d(tape: &mut Tape, za: Var, zb: Var, c: usize, tau: f64, include_positive: bool) -> Result<Var> {
    if c == 0 {
        return Err(Error::invalid("c must be at least 1"));
    }
    let n = tape.value(za).rows();
    check_rows(tape, zb, n * c, "multi3d")?;
    let s = cosine_matrix(tape, za, zb)?;
    let logits = tape.scale(s, 1.0 / tau);
    contrastive_from_logits(tape, logits, c, include_positive)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SetSimilarity {
    /// `Σ_j Σ_k cos(a_j, b_k)`
    All,
    /// `Σ_k max_j cos(a_j, b_k)`
    Max,
}

/// `N × N` matrix of set similarities between the `c`-vector sets of
/// `za` (rows) and `zb` (columns); both are `N·c × d`.
pub fn set_similarity_matrix(tape: &mut Tape, za: Var, zb: Var, c: usize, sim: SetSimilarity) -> Result<Var> {
    if c == 0 {
        return Err(Error::invalid("c must be at least 1"));
    }
    let rows = tape.value(za).rows();
    if !rows.is_multiple_of(c) {
        return Err(Error::invalid(format!("{rows} rows do not split into sets of {c}")));
    }
    let n = rows / c;
    check_rows(tape, zb, rows, "set similarity")?;
    let cos = cosine_matrix(tape, za, zb)?;
    let mut pool = Tensor::zeros(n, n * c);
    for i in 0..n * c {
        pool.set(i / c, i, 1.0);
    }
    let pool_t = tape.constant(pool.transpose());
    match sim {
        SetSimilarity::All => {
            let p = tape.constant(pool);
            let left = tape.matmul(p, cos)?;
            tape.matmul(left, pool_t)
        }
        SetSimilarity::Max => {
            let best = tape.segment_reduce(cos, (0..n * c).map(|r| r / c).collect(), n, Reduction::Max)?;
            tape.matmul(best, pool_t)
        }
    }
}

/// Set-similarity loss: `za`, `zb` are `N·c × d`.
pub fn multi2d(
    tape: &mut Tape,
    za: Var,
    zb: Var,
    c: usize,
    sim: SetSimilarity,
    tau: f64,
    include_positive: bool,
) -> Result<Var> {
    let s = set_similarity_matrix(tape, za, zb, c, sim)?;
    let logits = tape.scale(s, 1.0 / tau);
    contrastive_from_logits(tape, logits, 1, include_positive)
}

/// Dispatches on `cfg.kind`; shapes as in the individual losses.
pub fn contrastive_loss(tape: &mut Tape, cfg: &LossConfig, za: Var, zb: Var) -> Result<Var> {
    cfg.validate()?;
    let c = cfg.num_conformers;
    match cfg.kind {
        LossKind::NtxentEq1 => ntxent(tape, za, zb, cfg.tau, cfg.include_positive),
        LossKind::Multi3dEq2 => multi3d(tape, za, zb, c, cfg.tau, cfg.include_positive),
        LossKind::Multi2dSimall => multi2d(tape, za, zb, c, SetSimilarity::All, cfg.tau, cfg.include_positive),
        LossKind::Multi2dSimmax => multi2d(tape, za, zb, c, SetSimilarity::Max, cfg.tau, cfg.include_positive),
        LossKind::DistanceMse => Err(Error::invalid("distance_mse is not a contrastive loss")),
    }
}

fn rows_tensor(rows: &[Vec<f64>]) -> Result<Tensor> {
    if rows.is_empty() {
        return Err(Error::invalid("empty embedding batch"));
    }
    let t = Tensor::from_rows(rows)?;
    if !t.all_finite() {
        return Err(Error::NonFinite("embeddings".into()));
    }
    Ok(t)
}

fn eval_loss(za: &[Vec<f64>], zb: &[Vec<f64>], f: impl FnOnce(&mut Tape, Var, Var) -> Result<Var>) -> Result<f64> {
    let mut tape = Tape::new();
    let a = tape.constant(rows_tensor(za)?);
    let b = tape.constant(rows_tensor(zb)?);
    let out = f(&mut tape, a, b)?;
    tape.item(out)
}

/// Value of the single-conformer loss on plain vectors.
pub fn ntxent_eq1(za: &[Vec<f64>], zb: &[Vec<f64>], tau: f64) -> Result<f64> {
    eval_loss(za, zb, |t, a, b| ntxent(t, a, b, tau, false))
}

/// Value of the multi-conformer loss; `zb[i]` holds the `c` conformer
/// embeddings of molecule `i`.
pub fn multi3d_eq2(za: &[Vec<f64>], zb: &[Vec<Vec<f64>>], tau: f64) -> Result<f64> {
    let c = zb.first().map_or(0, Vec::len);
    if zb.iter().any(|s| s.len() != c) {
        return Err(Error::invalid("every molecule needs the same number of conformer embeddings"));
    }
    let flat: Vec<Vec<f64>> = zb.iter().flatten().cloned().collect();
    eval_loss(za, &flat, |t, a, b| multi3d(t, a, b, c, tau, false))
}

/// Value of a set-similarity loss on per-molecule sets.
pub fn multi2d_loss(sim: SetSimilarity, za: &[Vec<Vec<f64>>], zb: &[Vec<Vec<f64>>], tau: f64) -> Result<f64> {
    let c = za.first().map_or(0, Vec::len);
    if za.iter().chain(zb).any(|s| s.len() != c) {
        return Err(Error::invalid("every set needs the same number of vectors"));
    }
    let fa: Vec<Vec<f64>> = za.iter().flatten().cloned().collect();
    let fb: Vec<Vec<f64>> = zb.iter().flatten().cloned().collect();
    eval_loss(&fa, &fb, |t, a, b| multi2d(t, a, b, c, sim, tau, false))
}

pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            op: "cosine_sim",
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

pub fn sim_all(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let mut total = 0.0;
    for x in a {
        for y in b {
            total += cosine_sim(x, y)?;
        }
    }
    Ok(total)
}

/// For every vector of `b`, the best-matching vector of `a`; summed.
/// Not symmetric in its arguments.
pub fn sim_max(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let mut total = 0.0;
    for y in b {
        let mut best = f64::NEG_INFINITY;
        for x in a {
            best = best.max(cosine_sim(x, y)?);
        }
        total += best;
    }
    Ok(total)
}

pub const DISTANCE_HEAD_PREFIX: &str = "dist";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistanceHeadConfig {
    pub hidden: usize,
    pub layers: usize,
}

impl Default for DistanceHeadConfig {
    fn default() -> Self {
        Self { hidden: 64, layers: 2 }
    }
}

/// `dist_uv = softplus(U(h_u ‖ h_v) + U(h_v ‖ h_u))`: positive and exactly
/// symmetric in `(u, v)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceHead {
    pub config: DistanceHeadConfig,
    pub node_dim: usize,
}

impl DistanceHead {
    pub fn new(config: DistanceHeadConfig, node_dim: usize) -> Result<Self> {
        if config.layers == 0 || config.hidden == 0 || node_dim == 0 {
            return Err(Error::invalid("distance head needs positive widths and at least one layer"));
        }
        Ok(Self { config, node_dim })
    }

    fn mlp(&self) -> Mlp {
        Mlp::new(DISTANCE_HEAD_PREFIX, 2 * self.node_dim, self.config.hidden, 1, self.config.layers)
            .expect("validated layer count")
    }

    pub fn init_params<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        self.mlp().init(store, rng)
    }

    /// Predicted distance for each `(u, v)` in `pairs` (rows of `h`), `P × 1`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, h: Var, pairs: &[(usize, usize)]) -> Result<Var> {
        if tape.value(h).cols() != self.node_dim {
            return Err(Error::Shape {
                op: "distance_head",
                lhs: tape.value(h).shape(),
                rhs: vec![tape.value(h).rows(), self.node_dim],
            });
        }
        let hu = tape.gather_rows(h, pairs.iter().map(|p| p.0).collect())?;
        let hv = tape.gather_rows(h, pairs.iter().map(|p| p.1).collect())?;
        let uv = tape.concat_cols(&[hu, hv])?;
        let vu = tape.concat_cols(&[hv, hu])?;
        let mut mode = Mode::eval();
        let a = self.mlp().forward(tape, store, uv, &mut mode)?;
        let b = self.mlp().forward(tape, store, vu, &mut mode)?;
        let s = tape.add(a, b)?;
        Ok(tape.softplus(s))
    }

    pub fn predict(&self, store: &ParamStore, hu: &[f64], hv: &[f64]) -> Result<f64> {
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::from_rows(&[hu.to_vec(), hv.to_vec()])?);
        let d = self.forward(&mut tape, store, h, &[(0, 1)])?;
        tape.item(d)
    }
}

/// Mean of `(pred − target)²` over the pair list; `pred` is `P × 1`.
pub fn distance_mse(tape: &mut Tape, pred: Var, target: &[f64]) -> Result<Var> {
    let p = tape.value(pred);
    if p.cols() != 1 || p.rows() != target.len() {
        return Err(Error::Shape {
            op: "distance_mse",
            lhs: p.shape(),
            rhs: vec![target.len(), 1],
        });
    }
    if target.is_empty() {
        return Err(Error::invalid("distance_mse over an empty pair set"));
    }
    let t = tape.constant(Tensor::column_vector(target.to_vec()));
    let diff = tape.sub(pred, t)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.mean(sq))
}

/// Plain-value version of [`distance_mse`].
pub fn distance_mse_value(pred: &[f64], target: &[f64]) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(Tensor::column_vector(pred.to_vec()));
    let l = distance_mse(&mut tape, p, target)?;
    tape.item(l)
}
