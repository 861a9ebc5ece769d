//! Wide two-layer ReLU network `f(x) = (1/√m̂)·aᵀrelu(Wx)` trained on its
//! hidden weights only.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::curvature::CurvatureBlock;
use crate::direction::{layer_direction, SketchConfig};
use crate::error::{Result, SengError};
use crate::linalg::{norm, sym_eigen, DenseMatrix};
use crate::net::GradientFactors;
use crate::sketch::stream_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NtkProblem {
    /// `N × m₀`, unit-norm rows.
    pub inputs: DenseMatrix,
    pub targets: Vec<f64>,
    /// `m̂ × m₀`
    pub hidden: DenseMatrix,
    /// `a ∈ {−1, +1}^m̂`
    pub signs: Vec<f64>,
    pub nu: f64,
}

/// Draws unit-norm inputs, targets in `[−1, 1]`, `W ~ N(0, ν²)` and
/// Rademacher output signs.
pub fn setup_ntk(n: usize, m0: usize, width: usize, nu: f64, seed: u64) -> Result<NtkProblem> {
    if n < 2 || m0 == 0 || width == 0 {
        return Err(SengError::Parameter(
            "need at least two samples, one feature and one hidden unit".into(),
        ));
    }
    if !(nu >= 0.0) || !nu.is_finite() {
        return Err(SengError::Parameter("init scale must be nonnegative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    while rows.len() < n {
        let mut accepted = false;
        for _ in 0..100 {
            let mut x: Vec<f64> = (0..m0).map(|_| rng.sample(StandardNormal)).collect();
            let len = norm(&x);
            if !(len > 0.0) {
                continue;
            }
            x.iter_mut().for_each(|v| *v /= len);
            let duplicate = rows.iter().any(|r| {
                r.iter().zip(&x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() < 1e-20
            });
            if !duplicate {
                rows.push(x);
                accepted = true;
                break;
            }
        }
        if !accepted {
            return Err(SengError::Generation(format!(
                "could not draw {n} distinct unit inputs in dimension {m0}"
            )));
        }
    }
    let inputs = DenseMatrix::from_rows(&rows)?;
    let targets = (0..n).map(|_| rng.random_range(-1.0..=1.0)).collect();
    let hidden = if nu > 0.0 {
        let normal = Normal::new(0.0, nu).map_err(|e| SengError::Parameter(e.to_string()))?;
        DenseMatrix::from_fn(width, m0, |_, _| normal.sample(&mut rng))
    } else {
        DenseMatrix::zeros(width, m0)
    };
    let signs = (0..width)
        .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
        .collect();
    Ok(NtkProblem {
        inputs,
        targets,
        hidden,
        signs,
        nu,
    })
}

impl NtkProblem {
    pub fn samples(&self) -> usize {
        self.inputs.rows()
    }

    pub fn width(&self) -> usize {
        self.hidden.rows()
    }

    fn preactivations(&self) -> DenseMatrix {
        // m̂ × N
        self.hidden.matmul_t(&self.inputs)
    }

    pub fn outputs(&self) -> Vec<f64> {
        let z = self.preactivations();
        let s = 1.0 / (self.width() as f64).sqrt();
        (0..self.samples())
            .map(|i| {
                (0..self.width())
                    .map(|r| self.signs[r] * z[(r, i)].max(0.0))
                    .sum::<f64>()
                    * s
            })
            .collect()
    }

    /// `‖f − y‖²`
    pub fn residual(&self) -> f64 {
        self.outputs()
            .iter()
            .zip(&self.targets)
            .map(|(f, y)| (f - y) * (f - y))
            .sum()
    }

    /// Per-sample factors of `∂fᵢ/∂vec(W)`: `Ĝᵢ = a⊙relu'(Wxᵢ)/√m̂`, `Âᵢ = xᵢ`.
    pub fn jacobian_factors(&self) -> Vec<GradientFactors> {
        let z = self.preactivations();
        let s = 1.0 / (self.width() as f64).sqrt();
        (0..self.samples())
            .map(|i| {
                let g = DenseMatrix::from_fn(self.width(), 1, |r, _| {
                    if z[(r, i)] > 0.0 {
                        self.signs[r] * s
                    } else {
                        0.0
                    }
                });
                let a = DenseMatrix::from_vec(self.inputs.cols(), 1, self.inputs.row(i).to_vec())
                    .expect("input row");
                GradientFactors::new(g, a).expect("matching columns")
            })
            .collect()
    }

    /// `J`, `N × m̂m₀`.
    pub fn jacobian(&self) -> DenseMatrix {
        let rows: Vec<Vec<f64>> = self.jacobian_factors().iter().map(|f| f.materialize()).collect();
        DenseMatrix::from_rows(&rows).expect("equal rows")
    }
}

/// Curvature used by the NTK runner.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NtkCurvature {
    /// `U = Jᵀ`, `g = Jᵀ(f − y)`.
    #[default]
    Jacobian,
    /// Per-sample squared-loss gradients with the `1/√N` scale, `g` their mean.
    Efim,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NtkConfig {
    pub alpha: f64,
    pub damping: f64,
    pub steps: usize,
    pub sketch: SketchConfig,
    pub curvature: NtkCurvature,
    pub seed: u64,
}

impl Default for NtkConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            damping: 1e-3,
            steps: 100,
            sketch: SketchConfig::full(),
            curvature: NtkCurvature::Jacobian,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NtkRun {
    /// `‖fᵏ − y‖²` for `k = 0..=steps`.
    pub residuals: Vec<f64>,
    pub lambda_min_g0: Option<f64>,
}

/// Smallest eigenvalue of `G₀ = JJᵀ`.
pub fn lambda_min_g0(problem: &NtkProblem) -> Result<f64> {
    let j = problem.jacobian();
    Ok(sym_eigen(&j.matmul_t(&j))?.values[0])
}

/// Runs `θ ← θ + α·d` with `d` the damped natural-gradient direction and
/// returns the residual after every step.
pub fn run_ntk_experiment(problem: &mut NtkProblem, cfg: &NtkConfig) -> Result<NtkRun> {
    if cfg.alpha < 0.0 || !cfg.alpha.is_finite() {
        return Err(SengError::Parameter("step size must be nonnegative".into()));
    }
    let lambda_min = if problem.samples() <= 64 {
        Some(lambda_min_g0(problem)?)
    } else {
        None
    };
    let initial = problem.residual();
    let mut residuals = Vec::with_capacity(cfg.steps + 1);
    residuals.push(initial);
    let n = problem.samples();
    for k in 0..cfg.steps {
        let r: Vec<f64> = problem
            .outputs()
            .iter()
            .zip(&problem.targets)
            .map(|(f, y)| f - y)
            .collect();
        let factors = problem.jacobian_factors();
        let (block, g) = match cfg.curvature {
            NtkCurvature::Jacobian => {
                let block = CurvatureBlock::explicit_scaled(&factors, None, 1.0)?;
                let g = block.u().expect("explicit").matvec(&r);
                (block, g)
            }
            NtkCurvature::Efim => {
                let scaled: Vec<GradientFactors> = factors
                    .iter()
                    .zip(&r)
                    .map(|(f, ri)| GradientFactors::new(f.g_hat.scaled(*ri), f.a_hat.clone()))
                    .collect::<Result<_>>()?;
                let block = CurvatureBlock::explicit(&scaled, None)?;
                let mut g = block.u().expect("explicit").matvec(&vec![1.0; n]);
                let s = 1.0 / (n as f64).sqrt();
                g.iter_mut().for_each(|v| *v *= s);
                (block, g)
            }
        };
        let dir = layer_direction(&block, &g, cfg.damping, &cfg.sketch, stream_seed(cfg.seed, k as u64, 0, 0))?;
        for (w, d) in problem.hidden.data_mut().iter_mut().zip(&dir.d) {
            *w += cfg.alpha * d;
        }
        let res = problem.residual();
        if !res.is_finite() || res > 10.0 * initial {
            return Err(SengError::Diverged {
                step: k + 1,
                residual: res,
                initial,
            });
        }
        residuals.push(res);
    }
    Ok(NtkRun {
        residuals,
        lambda_min_g0: lambda_min,
    })
}

/// Fraction of steps whose residual ratio is at most `bound`.
pub fn contraction_fraction(residuals: &[f64], bound: f64) -> f64 {
    let steps = residuals.len().saturating_sub(1);
    if steps == 0 {
        return 1.0;
    }
    let ok = residuals
        .windows(2)
        .filter(|w| w[1] <= bound * w[0])
        .count();
    ok as f64 / steps as f64
}
