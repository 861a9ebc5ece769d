//! Per-layer damped natural-gradient directions.
//!
//! Every path returns `d = −g/λ + U b/λ` with `b` the (possibly sketched)
//! solution of `(λI + UᵀU) b = Uᵀg`.

use serde::{Deserialize, Serialize};

use crate::curvature::{u_times_c, ut_z, utu, CurvatureBlock, FactorSketch, UcMode};
use crate::error::{Result, SengError};
use crate::linalg::{norm, spd_solve_vec, DenseMatrix};
use crate::sketch::{
    apply_sketch, apply_sketch_vec, build_sketch, column_basis, diagnostics_with_basis, stream_seed,
    SketchDiagnostics, SketchKind, SketchOperator, SketchScaling, SketchSpec,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DirectionPath {
    Exact,
    ExplicitSketched,
    Implicit,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DirectionResult {
    pub d: Vec<f64>,
    /// `b` or `b̂`
    pub coeffs: Vec<f64>,
    pub damping: f64,
    pub path: DirectionPath,
    /// Embedding constants of the sketch actually used, when requested.
    pub diagnostics: Option<SketchDiagnostics>,
}

fn check_damping(lambda: f64) -> Result<()> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(SengError::Parameter(format!(
            "damping must be positive and finite, got {lambda}"
        )));
    }
    Ok(())
}

fn solve_coeffs(mut gram: DenseMatrix, rhs: &[f64], lambda: f64) -> Result<Vec<f64>> {
    gram.add_diag(lambda);
    spd_solve_vec(&gram, rhs)
}

/// `−g/λ + w/λ`
pub(crate) fn assemble(g: &[f64], w: &[f64], lambda: f64) -> Vec<f64> {
    let a = 1.0 / lambda;
    g.iter().zip(w).map(|(gi, wi)| a * (wi - gi)).collect()
}

/// `d = −(UUᵀ + λI)⁻¹g` through the Sherman-Morrison-Woodbury identity.
pub fn smw_exact(u: &DenseMatrix, g: &[f64], lambda: f64) -> Result<DirectionResult> {
    check_damping(lambda)?;
    if u.rows() != g.len() {
        return Err(SengError::Parameter(format!(
            "U has {} rows, g has length {}",
            u.rows(),
            g.len()
        )));
    }
    let b = solve_coeffs(u.t_matmul(u), &u.t_matvec(g), lambda)?;
    let d = assemble(g, &u.matvec(&b), lambda);
    Ok(DirectionResult {
        d,
        coeffs: b,
        damping: lambda,
        path: DirectionPath::Exact,
        diagnostics: None,
    })
}

/// `b̂ = (λI + ΞᵀΞ)⁻¹Ξᵀξ`, the ridge solution of `min ‖Ξb − ξ‖² + λ‖b‖²`.
pub fn sketched_coeffs(xi: &DenseMatrix, xi_vec: &[f64], lambda: f64) -> Result<Vec<f64>> {
    check_damping(lambda)?;
    if xi.rows() != xi_vec.len() {
        return Err(SengError::Parameter(format!(
            "Ξ has {} rows, ξ has length {}",
            xi.rows(),
            xi_vec.len()
        )));
    }
    solve_coeffs(xi.t_matmul(xi), &xi.t_matvec(xi_vec), lambda)
}

/// `min(dim, max(32, dim/4))`
pub fn default_sketch_size(dim: usize) -> usize {
    dim.min(32.max(dim / 4))
}

/// Sketch settings shared by every layer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SketchConfig {
    pub kind: SketchKind,
    /// Row count for explicit layers; `None` picks [`default_sketch_size`].
    pub q: Option<usize>,
    pub zeta_g: Option<usize>,
    pub zeta_a: Option<usize>,
    pub replacement: bool,
    pub scaling: SketchScaling,
    pub uc_mode: UcMode,
    /// Measure `η̂`, `ε̂` on explicit layers.
    pub diagnostics: bool,
}

impl Default for SketchConfig {
    fn default() -> Self {
        Self {
            kind: SketchKind::Leverage,
            q: None,
            zeta_g: None,
            zeta_a: None,
            replacement: true,
            scaling: SketchScaling::Embedding,
            uc_mode: UcMode::Averaged,
            diagnostics: false,
        }
    }
}

impl SketchConfig {
    /// No sketching anywhere.
    pub fn full() -> Self {
        Self {
            q: Some(usize::MAX),
            zeta_g: Some(usize::MAX),
            zeta_a: Some(usize::MAX),
            uc_mode: UcMode::Exact,
            ..Self::default()
        }
    }

    fn operator(&self, q: Option<usize>, dim: usize, probs: Option<&[f64]>, seed: u64) -> Result<Option<SketchOperator>> {
        let q = q.unwrap_or_else(|| default_sketch_size(dim));
        if q == 0 {
            return Err(SengError::Parameter("sketch size must be at least 1".into()));
        }
        if q >= dim {
            return Ok(None);
        }
        let (kind, probs) = match (self.kind, probs) {
            (SketchKind::Leverage, Some(p)) => (SketchKind::Leverage, Some(p)),
            _ => (SketchKind::Uniform, None),
        };
        let spec = SketchSpec {
            kind,
            q,
            replacement: self.replacement,
            seed,
            scaling: self.scaling,
        };
        build_sketch(&spec, dim, probs).map(Some)
    }
}

/// Coefficients `b̂` for one layer, without assembling the direction.
#[derive(Clone, Debug, PartialEq)]
pub struct Coefficients {
    pub b: Vec<f64>,
    pub path: DirectionPath,
    pub diagnostics: Option<SketchDiagnostics>,
}

/// `b̂ = (λI + B)⁻¹𝒜(g)` with `B`, `𝒜` the sketched (or exact) `UᵀU`, `Uᵀg`.
///
/// `seed` selects the sketch draw; callers derive it per step and layer.
pub fn layer_coeffs(
    block: &CurvatureBlock,
    g: &[f64],
    lambda: f64,
    cfg: &SketchConfig,
    seed: u64,
) -> Result<Coefficients> {
    check_damping(lambda)?;
    let n = block.dim();
    if g.len() != n {
        return Err(SengError::Parameter(format!(
            "gradient of length {} for a layer of {n} parameters",
            g.len()
        )));
    }
    let explicit_path = if block.is_explicit() {
        DirectionPath::Exact
    } else {
        DirectionPath::Implicit
    };
    if block.samples() == 0 {
        return Ok(Coefficients {
            b: Vec::new(),
            path: explicit_path,
            diagnostics: None,
        });
    }
    match block.u() {
        Some(u) => {
            let omega = cfg.operator(cfg.q, n, block.primary_probs(), seed)?;
            let Some(omega) = omega else {
                return Ok(Coefficients {
                    b: solve_coeffs(u.t_matmul(u), &u.t_matvec(g), lambda)?,
                    path: DirectionPath::Exact,
                    diagnostics: cfg.diagnostics.then_some(SketchDiagnostics { eta: 0.0, eps: 0.0 }),
                });
            };
            let xi = apply_sketch(&omega, u)?;
            let xv = apply_sketch_vec(&omega, g)?;
            let b = sketched_coeffs(&xi, &xv, lambda)?;
            let diagnostics = if cfg.diagnostics {
                Some(explicit_diagnostics(&omega, u, g)?)
            } else {
                None
            };
            Ok(Coefficients {
                b,
                path: DirectionPath::ExplicitSketched,
                diagnostics,
            })
        }
        None => {
            let shape = block.shape();
            let og = cfg.operator(cfg.zeta_g, shape.n_g, block.primary_probs(), stream_seed(seed, 0, 0, 1))?;
            let oa = cfg.operator(cfg.zeta_a, shape.n_a, block.a_probs(), stream_seed(seed, 0, 0, 2))?;
            let fs = match (og, oa) {
                (None, None) => None,
                (og, oa) => Some(FactorSketch::new(
                    block,
                    og.unwrap_or_else(|| SketchOperator::identity(shape.n_g)),
                    oa.unwrap_or_else(|| SketchOperator::identity(shape.n_a)),
                )?),
            };
            let gram = utu(block, fs.as_ref())?;
            let rhs = ut_z(block, g, fs.as_ref())?;
            Ok(Coefficients {
                b: solve_coeffs(gram, &rhs, lambda)?,
                path: DirectionPath::Implicit,
                diagnostics: None,
            })
        }
    }
}

/// `U b` for a block; explicit blocks ignore `mode`.
pub fn block_times_coeffs(block: &CurvatureBlock, b: &[f64], mode: UcMode) -> Result<Vec<f64>> {
    match block.u() {
        Some(u) if block.samples() > 0 => Ok(u.matvec(b)),
        _ => u_times_c(block, b, mode),
    }
}

/// Direction for one layer from its curvature block and gradient.
pub fn layer_direction(
    block: &CurvatureBlock,
    g: &[f64],
    lambda: f64,
    cfg: &SketchConfig,
    seed: u64,
) -> Result<DirectionResult> {
    let c = layer_coeffs(block, g, lambda, cfg, seed)?;
    let w = block_times_coeffs(block, &c.b, cfg.uc_mode)?;
    Ok(DirectionResult {
        d: assemble(g, &w, lambda),
        coeffs: c.b,
        damping: lambda,
        path: c.path,
        diagnostics: c.diagnostics,
    })
}

/// `η̂`, `ε̂` for an explicit sketch, measured on the part of `g` outside
/// `span(U)`.
pub fn explicit_diagnostics(omega: &SketchOperator, u: &DenseMatrix, g: &[f64]) -> Result<SketchDiagnostics> {
    let basis = match column_basis(u) {
        Ok(b) => b,
        Err(SengError::Degenerate(_)) => return Ok(SketchDiagnostics { eta: 0.0, eps: 0.0 }),
        Err(e) => return Err(e),
    };
    let proj = basis.matvec(&basis.t_matvec(g));
    let perp: Vec<f64> = g.iter().zip(&proj).map(|(a, b)| a - b).collect();
    diagnostics_with_basis(omega, &basis, &perp)
}

/// Right-hand side of the coefficient error bound,
/// `(1/√λ)·(√ε̂ + η̂)/(1 − η̂)·‖g‖`; infinite when `η̂ ≥ 1`.
pub fn coefficient_error_bound(diag: &SketchDiagnostics, g: &[f64], lambda: f64) -> f64 {
    if diag.eta >= 1.0 {
        return f64::INFINITY;
    }
    (diag.eps.sqrt() + diag.eta) / (1.0 - diag.eta) * norm(g) / lambda.sqrt()
}

/// Concatenates per-layer directions into the full parameter step.
pub fn concat_directions(parts: &[DirectionResult]) -> Vec<f64> {
    parts.iter().flat_map(|p| p.d.iter().copied()).collect()
}
