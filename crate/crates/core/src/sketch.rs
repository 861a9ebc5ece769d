//! Row-sampling sketches and embedding-quality diagnostics.
//!
//! A [`SketchOperator`] stands for the `q × n` matrix `Ω` whose row `j` is
//! `weights[j] · e_{rows[j]}ᵀ`. It is never formed densely.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SengError};
use crate::linalg::{dot, sym_spectral_norm, truncated_svd, DenseMatrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SketchKind {
    Uniform,
    Leverage,
}

/// Row scale applied to a sampled row with probability `p`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SketchScaling {
    /// `1/√(q·p)`; makes `E[ΩᵀΩ] = I`.
    #[default]
    Embedding,
    /// `1/p`, taken literally from the row-sampling formula.
    Literal,
}

impl SketchScaling {
    fn weight(self, q: usize, p: f64) -> f64 {
        match self {
            SketchScaling::Embedding => 1.0 / (q as f64 * p).sqrt(),
            SketchScaling::Literal => 1.0 / p,
        }
    }

    /// Same as `weight` at `p = 1/n`, without rounding through `p`.
    fn uniform_weight(self, q: usize, n: usize) -> f64 {
        match self {
            SketchScaling::Embedding => (n as f64 / q as f64).sqrt(),
            SketchScaling::Literal => n as f64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SketchSpec {
    pub kind: SketchKind,
    pub q: usize,
    pub replacement: bool,
    pub seed: u64,
    #[serde(default)]
    pub scaling: SketchScaling,
}

impl SketchSpec {
    pub fn uniform(q: usize, seed: u64) -> Self {
        Self {
            kind: SketchKind::Uniform,
            q,
            replacement: true,
            seed,
            scaling: SketchScaling::Embedding,
        }
    }

    pub fn leverage(q: usize, seed: u64) -> Self {
        Self {
            kind: SketchKind::Leverage,
            ..Self::uniform(q, seed)
        }
    }

    pub fn without_replacement(mut self) -> Self {
        self.replacement = false;
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SketchOperator {
    n: usize,
    rows: Vec<usize>,
    weights: Vec<f64>,
}

impl SketchOperator {
    pub fn new(n: usize, rows: Vec<usize>, weights: Vec<f64>) -> Result<Self> {
        if rows.len() != weights.len() {
            return Err(SengError::Parameter(
                "sketch rows and weights differ in length".into(),
            ));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(SengError::Parameter(format!(
                "sketch row {bad} outside ambient dimension {n}"
            )));
        }
        Ok(Self { n, rows, weights })
    }

    /// `Ω = I_n`.
    pub fn identity(n: usize) -> Self {
        Self {
            n,
            rows: (0..n).collect(),
            weights: vec![1.0; n],
        }
    }

    pub fn ambient_dim(&self) -> usize {
        self.n
    }

    pub fn sketch_dim(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[usize] {
        &self.rows
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Dense `q × n` form, for tests and small diagnostics.
    pub fn to_dense(&self) -> DenseMatrix {
        let mut m = DenseMatrix::zeros(self.rows.len(), self.n);
        for (j, (&r, &w)) in self.rows.iter().zip(&self.weights).enumerate() {
            m[(j, r)] = w;
        }
        m
    }

    /// `Ωᵀ(Ω v)` without forming Ω.
    pub fn gram_apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        let sv = apply_sketch_vec(self, v)?;
        let mut out = vec![0.0; self.n];
        for ((&r, &w), s) in self.rows.iter().zip(&self.weights).zip(sv) {
            out[r] += w * s;
        }
        Ok(out)
    }
}

/// Sampling probabilities proportional to the squared row norms of `u`.
pub fn leverage_probs(u: &DenseMatrix) -> Result<Vec<f64>> {
    let sq: Vec<f64> = (0..u.rows()).map(|i| dot(u.row(i), u.row(i))).collect();
    let total: f64 = sq.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(SengError::Degenerate(
            "all rows are zero; leverage scores undefined".into(),
        ));
    }
    Ok(sq.into_iter().map(|s| s / total).collect())
}

/// Draws a row-sampling operator over an `n`-dimensional space.
///
/// `probs` is required for leverage sketches and ignored for uniform ones.
/// Zero-probability rows are never selected; if every row has zero
/// probability the uniform distribution is used instead.
pub fn build_sketch(spec: &SketchSpec, n: usize, probs: Option<&[f64]>) -> Result<SketchOperator> {
    if n == 0 {
        return Err(SengError::Parameter("sketch over an empty space".into()));
    }
    if spec.q == 0 {
        return Err(SengError::Parameter("sketch size q must be at least 1".into()));
    }
    if !spec.replacement && spec.q > n {
        return Err(SengError::Parameter(format!(
            "cannot draw {} rows without replacement from {n}",
            spec.q
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let uniform = vec![1.0 / n as f64; n];
    let p: &[f64] = match spec.kind {
        SketchKind::Uniform => &uniform,
        SketchKind::Leverage => {
            let p = probs.ok_or_else(|| {
                SengError::Parameter("leverage sketch needs sampling probabilities".into())
            })?;
            if p.len() != n {
                return Err(SengError::Parameter(format!(
                    "{} probabilities for dimension {n}",
                    p.len()
                )));
            }
            if p.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
                return Err(SengError::Parameter("probabilities must be nonnegative".into()));
            }
            let total: f64 = p.iter().sum();
            if total > 0.0 {
                p
            } else {
                &uniform
            }
        }
    };
    let total: f64 = p.iter().sum();
    let support = p.iter().filter(|&&v| v > 0.0).count();
    if !spec.replacement && spec.q > support {
        return Err(SengError::Parameter(format!(
            "cannot draw {} rows without replacement from {support} with nonzero probability",
            spec.q
        )));
    }

    let is_uniform = spec.kind == SketchKind::Uniform || std::ptr::eq(p, uniform.as_slice());
    let rows: Vec<usize> = if is_uniform {
        if spec.replacement {
            (0..spec.q).map(|_| rng.random_range(0..n)).collect()
        } else {
            rand::seq::index::sample(&mut rng, n, spec.q).into_vec()
        }
    } else if spec.replacement {
        let dist = WeightedIndex::new(p).map_err(|e| SengError::Parameter(e.to_string()))?;
        (0..spec.q).map(|_| dist.sample(&mut rng)).collect()
    } else {
        rand::seq::index::sample_weighted(&mut rng, n, |i| p[i], spec.q)
            .map_err(|e| SengError::Parameter(e.to_string()))?
            .into_vec()
    };
    let weights = if is_uniform {
        vec![spec.scaling.uniform_weight(spec.q, n); rows.len()]
    } else {
        rows.iter()
            .map(|&r| spec.scaling.weight(spec.q, p[r] / total))
            .collect()
    };
    Ok(SketchOperator { n, rows, weights })
}

/// `Ω M`: row `j` of the result is `weights[j] · M[rows[j], :]`.
pub fn apply_sketch(op: &SketchOperator, m: &DenseMatrix) -> Result<DenseMatrix> {
    if m.rows() != op.n {
        return Err(SengError::Parameter(format!(
            "sketch expects {} rows, matrix has {}",
            op.n,
            m.rows()
        )));
    }
    let k = m.cols();
    let mut out = DenseMatrix::zeros(op.rows.len(), k);
    for (j, (&r, &w)) in op.rows.iter().zip(&op.weights).enumerate() {
        for (o, &v) in out.row_mut(j).iter_mut().zip(m.row(r)) {
            *o = w * v;
        }
    }
    Ok(out)
}

/// `Ω v`
pub fn apply_sketch_vec(op: &SketchOperator, v: &[f64]) -> Result<Vec<f64>> {
    if v.len() != op.n {
        return Err(SengError::Parameter(format!(
            "sketch expects length {}, vector has {}",
            op.n,
            v.len()
        )));
    }
    Ok(op
        .rows
        .iter()
        .zip(&op.weights)
        .map(|(&r, &w)| w * v[r])
        .collect())
}

/// Orthonormal basis of the column span of `u`.
pub fn column_basis(u: &DenseMatrix) -> Result<DenseMatrix> {
    let k = u.rows().min(u.cols());
    if k == 0 {
        return Err(SengError::Degenerate("empty matrix".into()));
    }
    let svd = truncated_svd(u, k)?;
    let smax = svd.s[0];
    if !(smax > 0.0) {
        return Err(SengError::Degenerate("matrix is zero".into()));
    }
    let rank = svd
        .s
        .iter()
        .take_while(|&&s| s > smax * 1e-10)
        .count();
    Ok(svd.u.column_block(0, rank))
}

/// Measured embedding constants of a sketch on `span(U)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SketchDiagnostics {
    /// `‖NᵀΩᵀΩN − I‖₂`
    pub eta: f64,
    /// `‖NᵀΩᵀΩv − Nᵀv‖² / ‖v‖²`
    pub eps: f64,
}

pub fn sketch_diagnostics(op: &SketchOperator, u: &DenseMatrix, v: &[f64]) -> Result<SketchDiagnostics> {
    let basis = column_basis(u)?;
    diagnostics_with_basis(op, &basis, v)
}

/// Same as [`sketch_diagnostics`] with a precomputed orthonormal basis.
pub fn diagnostics_with_basis(
    op: &SketchOperator,
    basis: &DenseMatrix,
    v: &[f64],
) -> Result<SketchDiagnostics> {
    let sn = apply_sketch(op, basis)?;
    let mut gram = sn.t_matmul(&sn);
    gram.add_diag(-1.0);
    let eta = sym_spectral_norm(&gram)?;

    let vv = dot(v, v);
    let eps = if vv > 0.0 {
        let sv = apply_sketch_vec(op, v)?;
        let sketched = sn.t_matvec(&sv);
        let exact = basis.t_matvec(v);
        let diff: f64 = sketched
            .iter()
            .zip(&exact)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        diff / vv
    } else {
        0.0
    };
    Ok(SketchDiagnostics { eta, eps })
}

/// Mixes a base seed with step/layer/worker coordinates into an
/// independent RNG stream seed.
pub fn stream_seed(seed: u64, step: u64, layer: u64, worker: u64) -> u64 {
    let mut h = splitmix(seed ^ 0x5EED_5EED_5EED_5EED);
    h = splitmix(h ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    h = splitmix(h ^ layer.wrapping_mul(0xC2B2_AE3D_27D4_EB4F));
    splitmix(h ^ worker.wrapping_mul(0x1656_67B1_9E37_79F9))
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
