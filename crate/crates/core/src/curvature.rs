//! Per-layer curvature state `U` and the products `Uᵀz`, `UᵀU`, `Uc`.
//!
//! An explicit block stores `U = [u₁ … u_ϱ]/√ϱ` as an `n × ϱ` matrix. An
//! implicit block stores the factor banks `G̃ = [G₁ … G_ϱ]` (`n_G × rϱ`) and
//! `Ã = [A₁ … A_ϱ]` (`n_A × rϱ`) with `uᵢ ≈ vec(GᵢAᵢᵀ)`, and applies the
//! `1/√ϱ` scale inside every product.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SengError};
use crate::linalg::{dot, gemm, gemm_nt, truncated_svd, DenseMatrix, MatRef};
use crate::net::{GradientFactors, LayerShape};
use crate::sketch::{apply_sketch, leverage_probs, SketchOperator};

pub const DEFAULT_THRESHOLD: usize = 200_000;
pub const DEFAULT_RANK: usize = 16;

/// Rule deciding whether a layer keeps `U` explicitly.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Routing {
    /// Explicit when `n < threshold`.
    Threshold(usize),
    /// Implicit when `n > (n_G + n_A)·κ`.
    Footprint,
}

impl Default for Routing {
    fn default() -> Self {
        Routing::Threshold(DEFAULT_THRESHOLD)
    }
}

impl Routing {
    pub fn is_explicit(&self, shape: &LayerShape) -> bool {
        match *self {
            Routing::Threshold(t) => shape.params() < t,
            Routing::Footprint => shape.params() <= (shape.n_g + shape.n_a) * shape.kappa,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefreshPolicy {
    /// Refresh every `period` steps.
    pub period: u64,
    pub routing: Routing,
    /// Requested factor rank; clamped to κ.
    pub rank: usize,
}

impl Default for RefreshPolicy {
    fn default() -> Self {
        Self {
            period: 1,
            routing: Routing::default(),
            rank: DEFAULT_RANK,
        }
    }
}

/// How `Σ cᵢuᵢ` is formed on an implicit block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UcMode {
    /// One product `G̃·(Ã scaled by c)ᵀ`.
    Exact,
    /// Weighted-average factors, `(Σ√|cᵢ|Gᵢ)(Σcᵢ/s·Aᵢ)ᵀ`.
    #[default]
    Averaged,
}

#[derive(Clone, Debug, PartialEq)]
pub enum BlockStorage {
    /// `n × ϱ`, already scaled.
    Explicit { u: DenseMatrix },
    /// Unscaled banks; block `i` is columns `i·rank..(i+1)·rank`.
    Implicit {
        g: DenseMatrix,
        a: DenseMatrix,
        rank: usize,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurvatureBlock {
    shape: LayerShape,
    samples: usize,
    scale: f64,
    storage: BlockStorage,
    last_refresh_step: u64,
    /// Leverage probabilities over rows of `U` (explicit) or `G̃`.
    probs_primary: Option<Vec<f64>>,
    /// Leverage probabilities over rows of `Ã`.
    probs_a: Option<Vec<f64>>,
}

/// What [`route_and_refresh`] did.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RefreshReport {
    pub refreshed: bool,
    pub explicit: bool,
    /// `(requested, used)` when the rank was clamped to κ.
    pub rank_clamped: Option<(usize, usize)>,
}

fn check_factors(factors: &[GradientFactors], shape: Option<LayerShape>) -> Result<LayerShape> {
    let first = match (factors.first(), shape) {
        (Some(f), _) => f.shape(),
        (None, Some(s)) => s,
        (None, None) => {
            return Err(SengError::Parameter(
                "cannot infer layer shape from an empty refresh batch".into(),
            ))
        }
    };
    if let Some(s) = shape {
        if s != first {
            return Err(SengError::Parameter(format!(
                "factor shape {first:?} does not match layer {s:?}"
            )));
        }
    }
    for (i, f) in factors.iter().enumerate() {
        if f.shape() != first {
            return Err(SengError::Parameter(format!(
                "sample {i} has factor shape {:?}, expected {first:?}",
                f.shape()
            )));
        }
    }
    Ok(first)
}

impl CurvatureBlock {
    /// Explicit block from materialized per-sample gradients.
    pub fn explicit(factors: &[GradientFactors], shape: Option<LayerShape>) -> Result<Self> {
        let rho = factors.len();
        let scale = if rho > 0 { 1.0 / (rho as f64).sqrt() } else { 1.0 };
        Self::explicit_scaled(factors, shape, scale)
    }

    /// Explicit block with column scale `scale` instead of `1/√ϱ`.
    pub fn explicit_scaled(factors: &[GradientFactors], shape: Option<LayerShape>, scale: f64) -> Result<Self> {
        let shape = check_factors(factors, shape)?;
        let rho = factors.len();
        let n = shape.params();
        let cols: Vec<Vec<f64>> = crate::par::map_slice(factors, |f| f.materialize());
        let mut u = DenseMatrix::zeros(n, rho);
        for (j, c) in cols.iter().enumerate() {
            for (i, &v) in c.iter().enumerate() {
                u[(i, j)] = v * scale;
            }
        }
        let probs_primary = if rho > 0 { leverage_probs(&u).ok() } else { None };
        Ok(Self {
            shape,
            samples: rho,
            scale,
            storage: BlockStorage::Explicit { u },
            last_refresh_step: 0,
            probs_primary,
            probs_a: None,
        })
    }

    /// Implicit block with rank-`rank` factors; `rank` must already be ≤ κ.
    pub fn implicit(factors: &[GradientFactors], shape: Option<LayerShape>, rank: usize) -> Result<Self> {
        let shape = check_factors(factors, shape)?;
        if rank == 0 || rank > shape.kappa {
            return Err(SengError::Parameter(format!(
                "rank {rank} outside 1..={}",
                shape.kappa
            )));
        }
        let rho = factors.len();
        let scale = if rho > 0 { 1.0 / (rho as f64).sqrt() } else { 1.0 };
        let pairs: Vec<Result<(DenseMatrix, DenseMatrix)>> =
            crate::par::map_slice(factors, |f| truncate_factors(f, rank));
        let mut g = DenseMatrix::zeros(shape.n_g, rank * rho);
        let mut a = DenseMatrix::zeros(shape.n_a, rank * rho);
        for (i, pair) in pairs.into_iter().enumerate() {
            let (gi, ai) = pair?;
            copy_block(&mut g, &gi, i * rank);
            copy_block(&mut a, &ai, i * rank);
        }
        let (probs_primary, probs_a) = if rho > 0 {
            (leverage_probs(&g).ok(), leverage_probs(&a).ok())
        } else {
            (None, None)
        };
        Ok(Self {
            shape,
            samples: rho,
            scale,
            storage: BlockStorage::Implicit { g, a, rank },
            last_refresh_step: 0,
            probs_primary,
            probs_a,
        })
    }

    pub fn shape(&self) -> LayerShape {
        self.shape
    }

    pub fn dim(&self) -> usize {
        self.shape.params()
    }

    /// ϱ
    pub fn samples(&self) -> usize {
        self.samples
    }

    /// Column scale applied to every `uᵢ`.
    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn storage(&self) -> &BlockStorage {
        &self.storage
    }

    pub fn is_explicit(&self) -> bool {
        matches!(self.storage, BlockStorage::Explicit { .. })
    }

    pub fn rank(&self) -> Option<usize> {
        match self.storage {
            BlockStorage::Implicit { rank, .. } => Some(rank),
            BlockStorage::Explicit { .. } => None,
        }
    }

    pub fn last_refresh_step(&self) -> u64 {
        self.last_refresh_step
    }

    /// The scaled `U` of an explicit block.
    pub fn u(&self) -> Option<&DenseMatrix> {
        match &self.storage {
            BlockStorage::Explicit { u } => Some(u),
            BlockStorage::Implicit { .. } => None,
        }
    }

    /// Row-sampling probabilities for `U` (explicit) or `G̃` (implicit).
    pub fn primary_probs(&self) -> Option<&[f64]> {
        self.probs_primary.as_deref()
    }

    /// Row-sampling probabilities for `Ã` (implicit only).
    pub fn a_probs(&self) -> Option<&[f64]> {
        self.probs_a.as_deref()
    }

    /// Dense scaled `U`, `n × ϱ`. Intended for small layers and tests.
    pub fn materialize(&self) -> DenseMatrix {
        match &self.storage {
            BlockStorage::Explicit { u } => u.clone(),
            BlockStorage::Implicit { g, a, rank } => {
                let n = self.dim();
                let mut u = DenseMatrix::zeros(n, self.samples);
                for i in 0..self.samples {
                    let gi = g.column_block(i * rank, (i + 1) * rank);
                    let ai = a.column_block(i * rank, (i + 1) * rank);
                    for (k, v) in gi.matmul_t(&ai).into_vec().into_iter().enumerate() {
                        u[(k, i)] = v * self.scale;
                    }
                }
                u
            }
        }
    }

    /// Block restricted to samples `idx`, rescaled to `1/√|idx|`.
    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        if let Some(&bad) = idx.iter().find(|&&i| i >= self.samples) {
            return Err(SengError::Parameter(format!(
                "sample {bad} out of range for a block of {}",
                self.samples
            )));
        }
        let m = idx.len();
        let scale = if m > 0 { 1.0 / (m as f64).sqrt() } else { 1.0 };
        let (storage, probs_primary, probs_a) = match &self.storage {
            BlockStorage::Explicit { u } => {
                let ratio = scale / self.scale;
                let mut sub = DenseMatrix::zeros(u.rows(), m);
                for r in 0..u.rows() {
                    let src = u.row(r);
                    for (c, &i) in idx.iter().enumerate() {
                        sub[(r, c)] = src[i] * ratio;
                    }
                }
                let p = if m > 0 { leverage_probs(&sub).ok() } else { None };
                (BlockStorage::Explicit { u: sub }, p, None)
            }
            BlockStorage::Implicit { g, a, rank } => {
                let mut gs = DenseMatrix::zeros(g.rows(), rank * m);
                let mut as_ = DenseMatrix::zeros(a.rows(), rank * m);
                for (c, &i) in idx.iter().enumerate() {
                    copy_block(&mut gs, &g.column_block(i * rank, (i + 1) * rank), c * rank);
                    copy_block(&mut as_, &a.column_block(i * rank, (i + 1) * rank), c * rank);
                }
                let (pg, pa) = if m > 0 {
                    (leverage_probs(&gs).ok(), leverage_probs(&as_).ok())
                } else {
                    (None, None)
                };
                (
                    BlockStorage::Implicit {
                        g: gs,
                        a: as_,
                        rank: *rank,
                    },
                    pg,
                    pa,
                )
            }
        };
        Ok(Self {
            shape: self.shape,
            samples: m,
            scale,
            storage,
            last_refresh_step: self.last_refresh_step,
            probs_primary,
            probs_a,
        })
    }
}

fn copy_block(dst: &mut DenseMatrix, src: &DenseMatrix, col0: usize) {
    let w = src.cols();
    for r in 0..src.rows() {
        dst.row_mut(r)[col0..col0 + w].copy_from_slice(src.row(r));
    }
}

/// Rank-`r` factors `(Gᵢ, Aᵢ)` with `GᵢAᵢᵀ ≈ ĜᵢÂᵢᵀ`.
///
/// The factor with more rows is truncated and `√S` is folded into both
/// sides. When `r = κ` the factors are returned as-is.
fn truncate_factors(f: &GradientFactors, r: usize) -> Result<(DenseMatrix, DenseMatrix)> {
    let kappa = f.g_hat.cols();
    if r >= kappa {
        return Ok((f.g_hat.clone(), f.a_hat.clone()));
    }
    let svd_g = f.g_hat.rows() >= f.a_hat.rows();
    let (big, other) = if svd_g {
        (&f.g_hat, &f.a_hat)
    } else {
        (&f.a_hat, &f.g_hat)
    };
    let k = r.min(big.rows());
    let svd = truncated_svd(big, k)?;
    let root: Vec<f64> = svd.s.iter().map(|s| s.sqrt()).collect();
    // big ≈ U S Vᵀ  ⇒  big·otherᵀ ≈ (U√S)(other V √S)ᵀ
    let mut left = DenseMatrix::zeros(big.rows(), r);
    for i in 0..big.rows() {
        for j in 0..k {
            left[(i, j)] = svd.u[(i, j)] * root[j];
        }
    }
    let ov = other.matmul(&svd.v);
    let mut right = DenseMatrix::zeros(other.rows(), r);
    for i in 0..other.rows() {
        for j in 0..k {
            right[(i, j)] = ov[(i, j)] * root[j];
        }
    }
    Ok(if svd_g { (left, right) } else { (right, left) })
}

/// Refreshes `slot` from the refresh batch when `step` is a multiple of
/// `policy.period` or no block exists yet; otherwise leaves it untouched.
pub fn route_and_refresh(
    slot: &mut Option<CurvatureBlock>,
    factors: &[GradientFactors],
    step: u64,
    policy: &RefreshPolicy,
) -> Result<RefreshReport> {
    if policy.period == 0 {
        return Err(SengError::Parameter("refresh period must be at least 1".into()));
    }
    if let Some(b) = slot.as_ref() {
        if !step.is_multiple_of(policy.period) {
            return Ok(RefreshReport {
                refreshed: false,
                explicit: b.is_explicit(),
                rank_clamped: None,
            });
        }
    }
    let known = slot.as_ref().map(|b| b.shape);
    let shape = check_factors(factors, known)?;
    let mut report = RefreshReport {
        refreshed: true,
        explicit: policy.routing.is_explicit(&shape),
        rank_clamped: None,
    };
    let mut block = if report.explicit {
        CurvatureBlock::explicit(factors, Some(shape))?
    } else {
        if policy.rank == 0 {
            return Err(SengError::Parameter("rank must be at least 1".into()));
        }
        let r = policy.rank.min(shape.kappa);
        if r < policy.rank {
            report.rank_clamped = Some((policy.rank, r));
        }
        CurvatureBlock::implicit(factors, Some(shape), r)?
    };
    block.last_refresh_step = step;
    *slot = Some(block);
    Ok(report)
}

/// Sketches `Ω_G`, `Ω_A` together with the sketched banks `Ω_G G̃`, `Ω_A Ã`.
#[derive(Clone, Debug)]
pub struct FactorSketch {
    omega_g: SketchOperator,
    omega_a: SketchOperator,
    xi_g: DenseMatrix,
    xi_a: DenseMatrix,
}

impl FactorSketch {
    pub fn new(block: &CurvatureBlock, omega_g: SketchOperator, omega_a: SketchOperator) -> Result<Self> {
        let BlockStorage::Implicit { g, a, .. } = &block.storage else {
            return Err(SengError::Parameter(
                "factor sketches apply to implicit blocks only".into(),
            ));
        };
        let xi_g = apply_sketch(&omega_g, g)?;
        let xi_a = apply_sketch(&omega_a, a)?;
        Ok(Self {
            omega_g,
            omega_a,
            xi_g,
            xi_a,
        })
    }

    pub fn omega_g(&self) -> &SketchOperator {
        &self.omega_g
    }

    pub fn omega_a(&self) -> &SketchOperator {
        &self.omega_a
    }

    /// `Ξ_z = Ω_G mat(z) Ω_Aᵀ`, read directly from `z`.
    fn sketch_z(&self, z: &[f64], n_a: usize) -> DenseMatrix {
        let (og, oa) = (&self.omega_g, &self.omega_a);
        let mut out = DenseMatrix::zeros(og.sketch_dim(), oa.sketch_dim());
        for (i, (&rg, &wg)) in og.rows().iter().zip(og.weights()).enumerate() {
            let src = &z[rg * n_a..(rg + 1) * n_a];
            for (o, (&ra, &wa)) in out.row_mut(i).iter_mut().zip(oa.rows().iter().zip(oa.weights())) {
                *o = wg * wa * src[ra];
            }
        }
        out
    }
}

fn sketch_mismatch(block: &CurvatureBlock, sketch: Option<&FactorSketch>) -> Result<()> {
    if sketch.is_some() && block.is_explicit() {
        return Err(SengError::Parameter(
            "factor sketches apply to implicit blocks only".into(),
        ));
    }
    Ok(())
}

/// Sums `x[:, c]·y[:, c]` over the columns of each rank-wide block.
fn block_column_dots(x: &DenseMatrix, y: &DenseMatrix, rank: usize, rho: usize) -> Vec<f64> {
    let width = rank * rho;
    let mut per_col = vec![0.0; width];
    for r in 0..x.rows() {
        for ((acc, &a), &b) in per_col.iter_mut().zip(x.row(r)).zip(y.row(r)) {
            *acc += a * b;
        }
    }
    per_col.chunks(rank.max(1)).map(|c| c.iter().sum()).collect()
}

/// `Uᵀz`
pub fn ut_z(block: &CurvatureBlock, z: &[f64], sketch: Option<&FactorSketch>) -> Result<Vec<f64>> {
    sketch_mismatch(block, sketch)?;
    let n = block.dim();
    if z.len() != n {
        return Err(SengError::Parameter(format!(
            "vector of length {} for a layer of {n} parameters",
            z.len()
        )));
    }
    if block.samples == 0 {
        return Ok(Vec::new());
    }
    match &block.storage {
        BlockStorage::Explicit { u } => Ok(u.t_matvec(z)),
        BlockStorage::Implicit { g, a, rank } => {
            let LayerShape { n_g, n_a, .. } = block.shape;
            let sums = match sketch {
                None => {
                    // Σⱼ gᵢⱼᵀ Z aᵢⱼ via W = Z·Ã
                    let zm = MatRef::new(n_g, n_a, z)?;
                    let w = gemm(zm, a.view());
                    block_column_dots(g, &w, *rank, block.samples)
                }
                Some(s) => {
                    let xz = s.sketch_z(z, n_a);
                    // (Ω_G gᵢⱼ)ᵀ Ξ_z (Ω_A aᵢⱼ) = column dots of Ξ_G and Ξ_z·Ξ_A
                    let w = xz.matmul(&s.xi_a);
                    block_column_dots(&s.xi_g, &w, *rank, block.samples)
                }
            };
            Ok(sums.into_iter().map(|v| v * block.scale).collect())
        }
    }
}

/// `UᵀU`, symmetrized.
pub fn utu(block: &CurvatureBlock, sketch: Option<&FactorSketch>) -> Result<DenseMatrix> {
    sketch_mismatch(block, sketch)?;
    let rho = block.samples;
    let mut out = match &block.storage {
        BlockStorage::Explicit { u } => u.t_matmul(u),
        BlockStorage::Implicit { g, a, rank } => {
            let (gg, aa) = match sketch {
                None => (g.t_matmul(g), a.t_matmul(a)),
                Some(s) => (s.xi_g.t_matmul(&s.xi_g), s.xi_a.t_matmul(&s.xi_a)),
            };
            let h = gg.hadamard(&aa);
            let s2 = block.scale * block.scale;
            let mut out = DenseMatrix::zeros(rho, rho);
            for bi in 0..rho {
                for bj in 0..rho {
                    let mut acc = 0.0;
                    for p in bi * rank..(bi + 1) * rank {
                        acc += h.row(p)[bj * rank..(bj + 1) * rank].iter().sum::<f64>();
                    }
                    out[(bi, bj)] = acc * s2;
                }
            }
            out
        }
    };
    out.symmetrize();
    Ok(out)
}

/// `U c = Σᵢ cᵢuᵢ` (scaled).
pub fn u_times_c(block: &CurvatureBlock, c: &[f64], mode: UcMode) -> Result<Vec<f64>> {
    if c.len() != block.samples {
        return Err(SengError::Parameter(format!(
            "{} coefficients for {} samples",
            c.len(),
            block.samples
        )));
    }
    let n = block.dim();
    if block.samples == 0 {
        return Ok(vec![0.0; n]);
    }
    match &block.storage {
        BlockStorage::Explicit { u } => Ok(u.matvec(c)),
        BlockStorage::Implicit { g, a, rank } => match mode {
            UcMode::Exact => {
                let mut ac = a.clone();
                for r in 0..ac.rows() {
                    for (k, v) in ac.row_mut(r).iter_mut().enumerate() {
                        *v *= c[k / rank] * block.scale;
                    }
                }
                Ok(gemm_nt(g.view(), ac.view()).into_vec())
            }
            UcMode::Averaged => {
                let roots: Vec<f64> = c.iter().map(|v| v.abs().sqrt()).collect();
                let total: f64 = roots.iter().sum();
                if total < 1e-30 {
                    return Ok(vec![0.0; n]);
                }
                let mut gbar = DenseMatrix::zeros(g.rows(), *rank);
                let mut abar = DenseMatrix::zeros(a.rows(), *rank);
                for i in 0..block.samples {
                    accumulate_block(&mut gbar, g, i * rank, roots[i]);
                    accumulate_block(&mut abar, a, i * rank, c[i] / total * block.scale);
                }
                Ok(gemm_nt(gbar.view(), abar.view()).into_vec())
            }
        },
    }
}

fn accumulate_block(dst: &mut DenseMatrix, src: &DenseMatrix, col0: usize, w: f64) {
    let width = dst.cols();
    for r in 0..dst.rows() {
        let s = &src.row(r)[col0..col0 + width];
        for (d, &v) in dst.row_mut(r).iter_mut().zip(s) {
            *d += w * v;
        }
    }
}

/// Squared Frobenius norm of the scaled `U`, `Σᵢ‖uᵢ‖²/ϱ`.
pub fn u_frobenius_sq(block: &CurvatureBlock) -> Result<f64> {
    let gram = utu(block, None)?;
    Ok((0..gram.rows()).map(|i| gram[(i, i)]).sum())
}

/// `‖Σᵢ cᵢuᵢ‖` without materializing (uses `cᵀ(UᵀU)c`).
pub fn uc_norm(block: &CurvatureBlock, c: &[f64]) -> Result<f64> {
    let gram = utu(block, None)?;
    let gc = gram.matvec(c);
    Ok(dot(c, &gc).max(0.0).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{norm, sym_eigen};
    use crate::net::materialize_gradient;
    use crate::sketch::{build_sketch, SketchSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_factors(shape: LayerShape, rho: usize, seed: u64) -> Vec<GradientFactors> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..rho)
            .map(|_| {
                let g = DenseMatrix::from_fn(shape.n_g, shape.kappa, |_, _| rng.sample(StandardNormal));
                let a = DenseMatrix::from_fn(shape.n_a, shape.kappa, |_, _| rng.sample(StandardNormal));
                GradientFactors::new(g, a).unwrap()
            })
            .collect()
    }

    fn oracle_u(factors: &[GradientFactors]) -> DenseMatrix {
        let cols: Vec<Vec<f64>> = factors.iter().map(materialize_gradient).collect();
        let mut u = DenseMatrix::from_columns(&cols).unwrap();
        u.scale(1.0 / (factors.len() as f64).sqrt());
        u
    }

    fn max_dev(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    fn rand_vec(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.sample(StandardNormal)).collect()
    }

    #[test]
    fn routing_examples() {
        let case_i = LayerShape::new(64, 147, 12544);
        let case_v = LayerShape::new(512, 4608, 49);
        assert_eq!(case_i.params(), 9408);
        assert_eq!(case_v.params(), 2_359_296);
        assert!(Routing::Threshold(100_000).is_explicit(&case_i));
        assert!(!Routing::Threshold(100_000).is_explicit(&case_v));
        assert!(Routing::default().is_explicit(&case_i));
        assert!(!Routing::default().is_explicit(&case_v));
        assert!(Routing::Footprint.is_explicit(&case_i));
        assert!(!Routing::Footprint.is_explicit(&case_v));
    }

    #[test]
    fn refresh_gating_leaves_block_untouched() {
        let shape = LayerShape::new(3, 4, 2);
        let policy = RefreshPolicy {
            period: 5,
            ..Default::default()
        };
        let mut slot = None;
        route_and_refresh(&mut slot, &random_factors(shape, 3, 1), 0, &policy).unwrap();
        let before = slot.clone();
        let rep = route_and_refresh(&mut slot, &random_factors(shape, 3, 2), 3, &policy).unwrap();
        assert!(!rep.refreshed);
        assert_eq!(slot, before);
        let rep = route_and_refresh(&mut slot, &random_factors(shape, 3, 2), 5, &policy).unwrap();
        assert!(rep.refreshed);
        assert_ne!(slot, before);
        assert_eq!(slot.unwrap().last_refresh_step(), 5);
    }

    #[test]
    fn first_call_always_refreshes() {
        let shape = LayerShape::new(2, 2, 1);
        let mut slot = None;
        let policy = RefreshPolicy {
            period: 4,
            ..Default::default()
        };
        assert!(route_and_refresh(&mut slot, &random_factors(shape, 2, 1), 3, &policy)
            .unwrap()
            .refreshed);
    }

    #[test]
    fn rank_is_clamped_to_kappa() {
        let shape = LayerShape::new(4, 3, 2);
        let mut slot = None;
        let policy = RefreshPolicy {
            period: 1,
            routing: Routing::Threshold(0),
            rank: 5,
        };
        let rep = route_and_refresh(&mut slot, &random_factors(shape, 2, 3), 0, &policy).unwrap();
        assert_eq!(rep.rank_clamped, Some((5, 2)));
        assert_eq!(slot.unwrap().rank(), Some(2));
    }

    #[test]
    fn mismatched_factor_shapes_are_rejected() {
        let mut f = random_factors(LayerShape::new(3, 4, 2), 2, 1);
        f.extend(random_factors(LayerShape::new(3, 5, 2), 1, 2));
        assert!(CurvatureBlock::explicit(&f, None).is_err());
    }

    #[test]
    fn explicit_matches_materialized_oracle() {
        let shape = LayerShape::new(3, 5, 4);
        let f = random_factors(shape, 6, 11);
        let block = CurvatureBlock::explicit(&f, None).unwrap();
        let u = oracle_u(&f);
        assert!(max_dev(block.u().unwrap().data(), u.data()) < 1e-14);
        let z = rand_vec(15, 4);
        assert!(max_dev(&ut_z(&block, &z, None).unwrap(), &u.t_matvec(&z)) < 1e-12);
        assert!(max_dev(utu(&block, None).unwrap().data(), u.t_matmul(&u).data()) < 1e-12);
    }

    #[test]
    fn zero_vector_gives_zero_products() {
        let shape = LayerShape::new(3, 4, 2);
        let f = random_factors(shape, 2, 5);
        for block in [
            CurvatureBlock::explicit(&f, None).unwrap(),
            CurvatureBlock::implicit(&f, None, 2).unwrap(),
        ] {
            assert!(ut_z(&block, &[0.0; 12], None).unwrap().iter().all(|&v| v == 0.0));
            for mode in [UcMode::Exact, UcMode::Averaged] {
                assert!(u_times_c(&block, &[0.0; 2], mode).unwrap().iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn implicit_full_rank_matches_explicit() {
        let shape = LayerShape::new(5, 7, 3);
        let f = random_factors(shape, 2, 21);
        let ex = CurvatureBlock::explicit(&f, None).unwrap();
        let im = CurvatureBlock::implicit(&f, None, 3).unwrap();
        let z = rand_vec(35, 9);
        assert!(max_dev(&ut_z(&ex, &z, None).unwrap(), &ut_z(&im, &z, None).unwrap()) < 1e-10);
        assert!(max_dev(utu(&ex, None).unwrap().data(), utu(&im, None).unwrap().data()) < 1e-10);
    }

    #[test]
    fn identity_sketches_reproduce_unsketched() {
        let shape = LayerShape::new(6, 4, 3);
        let f = random_factors(shape, 3, 8);
        let im = CurvatureBlock::implicit(&f, None, 3).unwrap();
        let fs = FactorSketch::new(&im, SketchOperator::identity(6), SketchOperator::identity(4)).unwrap();
        let z = rand_vec(24, 2);
        assert!(max_dev(&ut_z(&im, &z, Some(&fs)).unwrap(), &ut_z(&im, &z, None).unwrap()) < 1e-12);
        assert!(max_dev(utu(&im, Some(&fs)).unwrap().data(), utu(&im, None).unwrap().data()) < 1e-12);
    }

    #[test]
    fn sketched_ut_z_matches_dense_sketch_formula() {
        let shape = LayerShape::new(6, 5, 2);
        let f = random_factors(shape, 3, 31);
        let im = CurvatureBlock::implicit(&f, None, 2).unwrap();
        let og = build_sketch(&SketchSpec::uniform(4, 1), 6, None).unwrap();
        let oa = build_sketch(&SketchSpec::uniform(3, 2), 5, None).unwrap();
        let fs = FactorSketch::new(&im, og.clone(), oa.clone()).unwrap();
        let z = rand_vec(30, 3);
        // oracle: Σⱼ (Ω_G gᵢⱼ)ᵀ (Ω_G Z Ω_Aᵀ) (Ω_A aᵢⱼ) / √ϱ
        let (dg, da) = (og.to_dense(), oa.to_dense());
        let zm = DenseMatrix::from_vec(6, 5, z.clone()).unwrap();
        let xz = dg.matmul(&zm).matmul_t(&da);
        let want: Vec<f64> = f
            .iter()
            .map(|fi| {
                let p = dg.matmul(&fi.g_hat).t_matmul(&xz.matmul(&da.matmul(&fi.a_hat)));
                (0..2).map(|j| p[(j, j)]).sum::<f64>() / 3f64.sqrt()
            })
            .collect();
        assert!(max_dev(&ut_z(&im, &z, Some(&fs)).unwrap(), &want) < 1e-12);
    }

    #[test]
    fn single_sample_gram_is_squared_norm() {
        let f = random_factors(LayerShape::new(4, 3, 2), 1, 77);
        let u1 = materialize_gradient(&f[0]);
        let want = dot(&u1, &u1);
        for block in [
            CurvatureBlock::explicit(&f, None).unwrap(),
            CurvatureBlock::implicit(&f, None, 2).unwrap(),
        ] {
            let g = utu(&block, None).unwrap();
            assert!((g[(0, 0)] - want).abs() < 1e-10 * want);
        }
    }

    #[test]
    fn orthogonal_samples_have_zero_off_diagonal() {
        let e = |i: usize| {
            let mut g = DenseMatrix::zeros(2, 1);
            g[(i, 0)] = 1.0;
            GradientFactors::new(g, DenseMatrix::from_vec(2, 1, vec![1.0, 1.0]).unwrap()).unwrap()
        };
        let f = vec![e(0), e(1)];
        for block in [
            CurvatureBlock::explicit(&f, None).unwrap(),
            CurvatureBlock::implicit(&f, None, 1).unwrap(),
        ] {
            let g = utu(&block, None).unwrap();
            assert_eq!(g[(0, 1)], 0.0);
            assert_eq!(g[(1, 0)], 0.0);
        }
    }

    #[test]
    fn exact_uc_matches_weighted_sum() {
        let shape = LayerShape::new(4, 6, 3);
        let f = random_factors(shape, 4, 12);
        let im = CurvatureBlock::implicit(&f, None, 3).unwrap();
        let c = [0.5, -1.2, 2.0, 0.1];
        let mut want = vec![0.0; 24];
        for (fi, ci) in f.iter().zip(c) {
            for (w, v) in want.iter_mut().zip(materialize_gradient(fi)) {
                *w += ci * v / 2.0;
            }
        }
        assert!(max_dev(&u_times_c(&im, &c, UcMode::Exact).unwrap(), &want) < 1e-12);
        let avg = u_times_c(&im, &c, UcMode::Averaged).unwrap();
        let rel = max_dev(&avg, &want) / want.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(rel.is_finite());
    }

    #[test]
    fn averaged_uc_collapses_for_one_sample() {
        let f = random_factors(LayerShape::new(3, 5, 2), 1, 4);
        let im = CurvatureBlock::implicit(&f, None, 2).unwrap();
        for c in [[1.7], [-0.3]] {
            let a = u_times_c(&im, &c, UcMode::Averaged).unwrap();
            let e = u_times_c(&im, &c, UcMode::Exact).unwrap();
            assert!(max_dev(&a, &e) < 1e-12);
        }
    }

    #[test]
    fn truncation_error_is_svd_tail() {
        // n_G ≥ n_A: Ĝ is truncated, so error = ‖(Ĝ − Ĝ_r)Âᵀ‖
        let shape = LayerShape::new(8, 3, 5);
        let f = random_factors(shape, 1, 6);
        let im = CurvatureBlock::implicit(&f, None, 2).unwrap();
        let approx = im.materialize().into_vec();
        let svd = truncated_svd(&f[0].g_hat, 5).unwrap();
        let mut tail = f[0].g_hat.clone();
        let head = truncated_svd(&f[0].g_hat, 2).unwrap().reconstruct();
        tail = tail.sub(&head);
        let want_err = tail.matmul_t(&f[0].a_hat).frobenius_norm();
        let exact = materialize_gradient(&f[0]);
        let diff: Vec<f64> = exact.iter().zip(&approx).map(|(a, b)| a - b).collect();
        assert!((norm(&diff) - want_err).abs() < 1e-10 * (1.0 + want_err));
        assert!(svd.s[2] > 0.0);
    }

    #[test]
    fn truncation_of_a_side() {
        let shape = LayerShape::new(2, 9, 4);
        let f = random_factors(shape, 1, 16);
        let im = CurvatureBlock::implicit(&f, None, 2).unwrap();
        let head = truncated_svd(&f[0].a_hat, 2).unwrap().reconstruct();
        let want = f[0].g_hat.matmul_t(&head).into_vec();
        assert!(max_dev(&im.materialize().into_vec(), &want) < 1e-10);
    }

    #[test]
    fn rank_above_row_count_pads_with_zeros() {
        // κ = 6, rank 4 > n_G = n_A = 3
        let f = random_factors(LayerShape::new(3, 3, 6), 2, 3);
        let im = CurvatureBlock::implicit(&f, None, 4).unwrap();
        let ex = CurvatureBlock::explicit(&f, None).unwrap();
        assert!(max_dev(im.materialize().data(), ex.u().unwrap().data()) < 1e-10);
    }

    #[test]
    fn subset_rescales() {
        let f = random_factors(LayerShape::new(3, 2, 2), 4, 9);
        let ex = CurvatureBlock::explicit(&f, None).unwrap();
        let sub = ex.subset(&[1, 3]).unwrap();
        let want = CurvatureBlock::explicit(&[f[1].clone(), f[3].clone()], None).unwrap();
        assert!(max_dev(sub.u().unwrap().data(), want.u().unwrap().data()) < 1e-15);
        let im = CurvatureBlock::implicit(&f, None, 2).unwrap();
        let sub = im.subset(&[1, 3]).unwrap();
        assert!(max_dev(sub.materialize().data(), want.u().unwrap().data()) < 1e-12);
    }

    #[test]
    fn sketch_on_explicit_block_is_rejected() {
        let f = random_factors(LayerShape::new(2, 2, 1), 1, 1);
        let ex = CurvatureBlock::explicit(&f, None).unwrap();
        assert!(FactorSketch::new(&ex, SketchOperator::identity(2), SketchOperator::identity(2)).is_err());
        assert!(ut_z(&ex, &[1.0], None).is_err());
    }

    #[test]
    fn uc_norm_matches_materialized() {
        let f = random_factors(LayerShape::new(3, 4, 2), 3, 2);
        let im = CurvatureBlock::implicit(&f, None, 2).unwrap();
        let c = [1.0, -2.0, 0.5];
        let v = u_times_c(&im, &c, UcMode::Exact).unwrap();
        assert!((uc_norm(&im, &c).unwrap() - norm(&v)).abs() < 1e-10);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn gram_is_psd(seed in 0u64..1000, rho in 1usize..6, r in 1usize..4, sketched in any::<bool>()) {
                let shape = LayerShape::new(5, 4, 3);
                let f = random_factors(shape, rho, seed);
                let im = CurvatureBlock::implicit(&f, None, r.min(3)).unwrap();
                let fs = if sketched {
                    let og = build_sketch(&SketchSpec::uniform(3, seed), 5, None).unwrap();
                    let oa = build_sketch(&SketchSpec::uniform(2, seed + 1), 4, None).unwrap();
                    Some(FactorSketch::new(&im, og, oa).unwrap())
                } else {
                    None
                };
                let g = utu(&im, fs.as_ref()).unwrap();
                for i in 0..rho {
                    for j in 0..rho {
                        prop_assert_eq!(g[(i, j)], g[(j, i)]);
                    }
                }
                let scale = g.max_abs().max(1.0);
                prop_assert!(sym_eigen(&g).unwrap().values[0] >= -1e-10 * scale);
            }

            #[test]
            fn collapse_chain(seed in 0u64..1000, rho in 1usize..5) {
                let shape = LayerShape::new(4, 3, 2);
                let f = random_factors(shape, rho, seed);
                let ex = CurvatureBlock::explicit(&f, None).unwrap();
                let im = CurvatureBlock::implicit(&f, None, 2).unwrap();
                let fs = FactorSketch::new(&im, SketchOperator::identity(4), SketchOperator::identity(3)).unwrap();
                let z = rand_vec(12, seed + 7);
                let a = ut_z(&ex, &z, None).unwrap();
                prop_assert!(max_dev(&a, &ut_z(&im, &z, None).unwrap()) < 1e-10);
                prop_assert!(max_dev(&a, &ut_z(&im, &z, Some(&fs)).unwrap()) < 1e-10);
                let g = utu(&ex, None).unwrap();
                prop_assert!(max_dev(g.data(), utu(&im, None).unwrap().data()) < 1e-10);
                prop_assert!(max_dev(g.data(), utu(&im, Some(&fs)).unwrap().data()) < 1e-10);
            }
        }
    }
}
