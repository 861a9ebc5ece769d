//! Sketch-error sweep against the exact solve.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::curvature::CurvatureBlock;
use crate::direction::{assemble, coefficient_error_bound, explicit_diagnostics, sketched_coeffs, smw_exact};
use crate::error::{Result, SengError};
use crate::linalg::{norm, DenseMatrix};
use crate::net::GradientFactors;
use crate::sketch::{apply_sketch, apply_sketch_vec, build_sketch, stream_seed, SketchKind, SketchScaling, SketchSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    /// Dense-layer shape; `n = n_g·n_a`.
    pub n_g: usize,
    pub n_a: usize,
    pub rho: usize,
    pub lambda: f64,
    pub qs: Vec<usize>,
    /// Sketch draws per `q`.
    pub seeds: u64,
    pub seed: u64,
    pub kind: SketchKind,
    pub replacement: bool,
    /// Use `g = 0`.
    pub zero_gradient: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            n_g: 16,
            n_a: 32,
            rho: 16,
            lambda: 1.0,
            qs: vec![64, 128, 256, 512],
            seeds: 50,
            seed: 0,
            kind: SketchKind::Uniform,
            replacement: false,
            zero_gradient: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub q: usize,
    pub seed: u64,
    /// `‖d̂ − d‖/‖d‖`
    pub d_rel_err: f64,
    /// `‖b̂ − b‖/‖b‖`
    pub b_rel_err: f64,
    /// `‖b̂ − b‖`
    pub b_abs_err: f64,
    pub eta: f64,
    pub eps: f64,
    /// Bound on `‖b̂ − b‖`; infinite when `η̂ ≥ 1`.
    pub bound: f64,
    pub bound_holds: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub q: usize,
    pub median_d_err: f64,
    pub median_b_err: f64,
    pub median_eta: f64,
    pub median_eps: f64,
    pub median_bound: f64,
    /// Rows with `η̂ < 1` whose error exceeds the bound.
    pub violations: usize,
}

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

fn rank_one_factors(cfg: &SweepConfig, rng: &mut ChaCha8Rng) -> Result<Vec<GradientFactors>> {
    (0..cfg.rho)
        .map(|_| GradientFactors::new(gaussian(cfg.n_g, 1, rng), gaussian(cfg.n_a, 1, rng)))
        .collect()
}

fn rel(err: f64, scale: f64) -> f64 {
    if scale > 0.0 {
        err / scale
    } else {
        err
    }
}

fn diff_norm(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// One row per `(q, seed)` cell, ordered by `q` then seed.
///
/// `U` holds `ϱ` per-sample gradients of a random dense layer; `g` is the
/// mean gradient of an independent batch drawn the same way.
pub fn oracle_error_sweep(cfg: &SweepConfig) -> Result<Vec<SweepRow>> {
    let n = cfg.n_g * cfg.n_a;
    if n == 0 || cfg.rho == 0 {
        return Err(SengError::Parameter("empty sweep problem".into()));
    }
    if n > 10_000 {
        return Err(SengError::Parameter(format!(
            "sweep dimension {n} too large for the exact oracle"
        )));
    }
    if let Some(&q) = cfg.qs.iter().find(|&&q| q == 0 || q > n) {
        return Err(SengError::Parameter(format!("sketch size {q} outside 1..={n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let block = CurvatureBlock::explicit(&rank_one_factors(cfg, &mut rng)?, None)?;
    let u = block.u().expect("explicit block").clone();
    let g: Vec<f64> = if cfg.zero_gradient {
        vec![0.0; n]
    } else {
        let other = CurvatureBlock::explicit(&rank_one_factors(cfg, &mut rng)?, None)?;
        let s = 1.0 / (cfg.rho as f64).sqrt();
        other
            .u()
            .expect("explicit block")
            .matvec(&vec![s; cfg.rho])
    };
    let exact = smw_exact(&u, &g, cfg.lambda)?;
    let (d_norm, b_norm) = (norm(&exact.d), norm(&exact.coeffs));
    let probs = block.primary_probs().map(<[f64]>::to_vec);

    let cells: Vec<(usize, u64)> = cfg
        .qs
        .iter()
        .flat_map(|&q| (0..cfg.seeds).map(move |s| (q, s)))
        .collect();
    let rows: Vec<Result<SweepRow>> = crate::par::map_slice(&cells, |&(q, s)| {
        let spec = SketchSpec {
            kind: cfg.kind,
            q,
            replacement: cfg.replacement,
            seed: stream_seed(cfg.seed, q as u64, s, 0),
            scaling: SketchScaling::Embedding,
        };
        let omega = build_sketch(&spec, n, probs.as_deref())?;
        let b = sketched_coeffs(&apply_sketch(&omega, &u)?, &apply_sketch_vec(&omega, &g)?, cfg.lambda)?;
        let d = assemble(&g, &u.matvec(&b), cfg.lambda);
        let diag = explicit_diagnostics(&omega, &u, &g)?;
        let b_abs_err = diff_norm(&b, &exact.coeffs);
        let bound = coefficient_error_bound(&diag, &g, cfg.lambda);
        Ok(SweepRow {
            q,
            seed: s,
            d_rel_err: rel(diff_norm(&d, &exact.d), d_norm),
            b_rel_err: rel(b_abs_err, b_norm),
            b_abs_err,
            eta: diag.eta,
            eps: diag.eps,
            bound,
            bound_holds: diag.eta >= 1.0 || b_abs_err <= bound * (1.0 + 1e-12) + 1e-300,
        })
    });
    rows.into_iter().collect()
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    0.5 * (v[(n - 1) / 2] + v[n / 2])
}

/// Per-`q` medians, in the order `q` first appears.
pub fn summarize_sweep(rows: &[SweepRow]) -> Vec<SweepSummary> {
    let mut qs: Vec<usize> = Vec::new();
    for r in rows {
        if !qs.contains(&r.q) {
            qs.push(r.q);
        }
    }
    qs.into_iter()
        .map(|q| {
            let cell: Vec<&SweepRow> = rows.iter().filter(|r| r.q == q).collect();
            let col = |f: fn(&SweepRow) -> f64| median(cell.iter().map(|r| f(r)).collect());
            SweepSummary {
                q,
                median_d_err: col(|r| r.d_rel_err),
                median_b_err: col(|r| r.b_rel_err),
                median_eta: col(|r| r.eta),
                median_eps: col(|r| r.eps),
                median_bound: col(|r| r.bound),
                violations: cell.iter().filter(|r| !r.bound_holds).count(),
            }
        })
        .collect()
}

/// Writes the per-cell rows followed by nothing else; one header line.
pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "q", "seed", "d_rel_err", "b_rel_err", "b_abs_err", "eta_est", "eps_est", "bound", "bound_holds",
    ])?;
    for r in rows {
        out.write_record([
            r.q.to_string(),
            r.seed.to_string(),
            r.d_rel_err.to_string(),
            r.b_rel_err.to_string(),
            r.b_abs_err.to_string(),
            r.eta.to_string(),
            r.eps.to_string(),
            r.bound.to_string(),
            r.bound_holds.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SweepConfig {
        SweepConfig {
            n_g: 4,
            n_a: 8,
            rho: 4,
            qs: vec![4, 8, 16, 32],
            seeds: 20,
            ..Default::default()
        }
    }

    #[test]
    fn full_sketch_row_is_exact() {
        let rows = oracle_error_sweep(&small()).unwrap();
        for r in rows.iter().filter(|r| r.q == 32) {
            assert!(r.d_rel_err <= 1e-10 && r.b_rel_err <= 1e-10, "{r:?}");
        }
    }

    #[test]
    fn zero_gradient_has_no_error() {
        let rows = oracle_error_sweep(&SweepConfig {
            zero_gradient: true,
            ..small()
        })
        .unwrap();
        assert!(rows.iter().all(|r| r.d_rel_err == 0.0 && r.b_rel_err == 0.0 && r.bound_holds));
    }

    #[test]
    fn bound_holds_on_small_sweep() {
        let rows = oracle_error_sweep(&small()).unwrap();
        assert!(rows.iter().all(|r| r.bound_holds));
        let s = summarize_sweep(&rows);
        assert_eq!(s.len(), 4);
        assert_eq!(s[0].q, 4);
    }

    #[test]
    fn oversized_q_is_rejected() {
        let cfg = SweepConfig {
            qs: vec![33],
            ..small()
        };
        assert!(oracle_error_sweep(&cfg).is_err());
    }

    #[test]
    fn csv_has_fixed_header() {
        let rows = oracle_error_sweep(&SweepConfig { seeds: 1, ..small() }).unwrap();
        let mut buf = Vec::new();
        write_sweep_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("q,seed,d_rel_err,b_rel_err,b_abs_err,eta_est,eps_est,bound,bound_holds\n"));
        assert_eq!(text.lines().count(), 5);
    }
}
