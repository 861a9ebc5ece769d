//! SENG training step, step-size and damping schedules, and an SGD
//! baseline.

use std::f64::consts::PI;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::curvature::{route_and_refresh, u_frobenius_sq, CurvatureBlock, RefreshPolicy};
use crate::direction::{layer_direction, DirectionResult, SketchConfig};
use crate::error::{Result, SengError};
use crate::linalg::{axpy, norm, DenseMatrix};
use crate::net::{loss_and_grad, Backward, LossKind, Network, Reduction, Targets};
use crate::sketch::stream_seed;

/// Inputs with their targets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub inputs: Vec<Vec<f64>>,
    pub targets: TargetData,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetData {
    Classes(Vec<usize>),
    Values(DenseMatrix),
}

impl Dataset {
    pub fn new(inputs: Vec<Vec<f64>>, targets: TargetData) -> Result<Self> {
        let n = match &targets {
            TargetData::Classes(c) => c.len(),
            TargetData::Values(v) => v.rows(),
        };
        if n != inputs.len() {
            return Err(SengError::Parameter(format!(
                "{} inputs but {n} targets",
                inputs.len()
            )));
        }
        Ok(Self { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn targets(&self) -> Targets<'_> {
        match &self.targets {
            TargetData::Classes(c) => Targets::Classes(c),
            TargetData::Values(v) => Targets::Values(v),
        }
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let inputs = idx.iter().map(|&i| self.inputs[i].clone()).collect();
        let targets = match &self.targets {
            TargetData::Classes(c) => TargetData::Classes(idx.iter().map(|&i| c[i]).collect()),
            TargetData::Values(v) => {
                let mut out = DenseMatrix::zeros(idx.len(), v.cols());
                for (r, &i) in idx.iter().enumerate() {
                    out.row_mut(r).copy_from_slice(v.row(i));
                }
                TargetData::Values(out)
            }
        };
        Dataset { inputs, targets }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// `0.001 + ½(α₀ − 0.001)(1 + cos(πe/E))`
    Cosine,
    /// `α₀(1 − e/E)^decay`
    Exp { decay: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DampingSchedule {
    Constant { value: f64 },
    /// `base · factor^(e/period)`
    ExpDecay { base: f64, factor: f64, period: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub warmup_epochs: f64,
    /// Step size at epoch 0 when warming up.
    pub warmup_start: f64,
    pub damping: DampingSchedule,
    pub refresh: RefreshPolicy,
    pub sketch: SketchConfig,
    pub batch_size: usize,
    pub max_epoch: f64,
    /// SGD baseline only.
    pub momentum: f64,
    pub weight_decay: f64,
    pub loss: LossKind,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 10.0,
            lr_schedule: LrSchedule::Constant,
            warmup_epochs: 0.0,
            warmup_start: 0.0,
            damping: DampingSchedule::Constant { value: 5.0 },
            refresh: RefreshPolicy::default(),
            sketch: SketchConfig::default(),
            batch_size: 32,
            max_epoch: 125.0,
            momentum: 0.9,
            weight_decay: 0.0,
            loss: LossKind::CrossEntropy,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SengError::Parameter(m.into()));
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad("learning rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1");
        }
        if self.refresh.period == 0 {
            return bad("update frequency must be at least 1");
        }
        if !(self.max_epoch > 0.0) {
            return bad("epoch count must be positive");
        }
        if !(self.warmup_epochs >= 0.0) || self.warmup_epochs >= self.max_epoch && self.warmup_epochs > 0.0 {
            return bad("warmup must be shorter than training");
        }
        if self.weight_decay < 0.0 || !(0.0..1.0).contains(&self.momentum) {
            return bad("weight decay must be nonnegative and momentum in [0, 1)");
        }
        match self.damping {
            DampingSchedule::Constant { value } if !(value > 0.0) => bad("damping must be positive"),
            DampingSchedule::ExpDecay { base, factor, period }
                if !(base > 0.0) || !(factor > 0.0) || !(period > 0.0) =>
            {
                bad("damping decay needs positive base, factor and period")
            }
            _ => Ok(()),
        }
    }
}

fn main_schedule(cfg: &TrainConfig, frac: f64) -> f64 {
    let a0 = cfg.lr;
    match cfg.lr_schedule {
        LrSchedule::Constant => a0,
        LrSchedule::Cosine => 0.001 + 0.5 * (a0 - 0.001) * (1.0 + (frac * PI).cos()),
        LrSchedule::Exp { decay } => a0 * (1.0 - frac).max(0.0).powf(decay),
    }
}

/// `(αₖ, λₖ)` at continuous epoch `epoch`.
///
/// During warmup the step size moves linearly from `warmup_start` to `lr`;
/// afterwards the main schedule runs over the remaining epochs.
pub fn schedule_eval(cfg: &TrainConfig, epoch: f64) -> (f64, f64) {
    let e = epoch.clamp(0.0, cfg.max_epoch);
    let w = cfg.warmup_epochs;
    let alpha = if w > 0.0 && e < w {
        cfg.warmup_start + (cfg.lr - cfg.warmup_start) * e / w
    } else {
        main_schedule(cfg, (e - w) / (cfg.max_epoch - w))
    };
    let lambda = match cfg.damping {
        DampingSchedule::Constant { value } => value,
        DampingSchedule::ExpDecay { base, factor, period } => base * factor.powf(e / period),
    };
    (alpha, lambda)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub epoch: f64,
    pub train_loss: f64,
    pub grad_norm: f64,
    pub test_acc: Option<f64>,
    pub eta_est: Option<f64>,
    pub eps_est: Option<f64>,
    pub payload_bytes: u64,
    pub num_syncs: u32,
    pub wall_ms: f64,
    /// `‖Δθ‖`
    pub step_norm: f64,
    /// `(α/λ)·√Σₗ(‖gₗ‖ + ‖b̂ₗ‖‖Uₗ‖_F)²`
    pub step_bound: f64,
}

impl MetricsRecord {
    fn new(step: u64, epoch: f64) -> Self {
        Self {
            step,
            epoch,
            train_loss: 0.0,
            grad_norm: 0.0,
            test_acc: None,
            eta_est: None,
            eps_est: None,
            payload_bytes: 0,
            num_syncs: 0,
            wall_ms: 0.0,
            step_norm: 0.0,
            step_bound: 0.0,
        }
    }
}

pub trait Optimizer {
    /// One update on `batch` at continuous epoch `epoch`.
    fn step(&mut self, net: &mut Network, batch: &Dataset, epoch: f64) -> Result<MetricsRecord>;

    fn steps_taken(&self) -> u64;
}

/// Forward, loss, and per-sample backward on a batch.
pub(crate) struct Evaluated {
    pub loss: f64,
    pub back: Backward,
}

pub(crate) fn evaluate(net: &Network, batch: &Dataset, loss: LossKind, step: u64) -> Result<Evaluated> {
    if batch.is_empty() {
        return Err(SengError::Parameter("empty batch".into()));
    }
    let cache = net.forward(&batch.inputs)?;
    let (value, out_grads) = loss_and_grad(&cache.outputs, batch.targets(), loss, Reduction::Mean)?;
    if !value.is_finite() {
        return Err(SengError::NonFinite { step, value });
    }
    let back = net.backward_factors(cache, &out_grads)?;
    Ok(Evaluated { loss: value, back })
}

/// Gradient plus `wd·θ`, per parametric layer.
pub(crate) fn decayed_grads(net: &Network, grads: &[Vec<f64>], wd: f64) -> Vec<Vec<f64>> {
    grads
        .iter()
        .zip(net.weights())
        .map(|(g, w)| {
            let mut g = g.clone();
            if wd != 0.0 {
                axpy(wd, w.data(), &mut g);
            }
            g
        })
        .collect()
}

pub(crate) fn global_norm(parts: &[Vec<f64>]) -> f64 {
    parts.iter().map(|p| p.iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt()
}

/// SENG optimizer state: one curvature block per parametric layer.
#[derive(Clone, Debug)]
pub struct Seng {
    cfg: TrainConfig,
    pub(crate) blocks: Vec<Option<CurvatureBlock>>,
    /// `‖Uₗ‖_F`, refreshed with the blocks.
    pub(crate) u_norms: Vec<f64>,
    step: u64,
}

impl Seng {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            blocks: Vec::new(),
            u_norms: Vec::new(),
            step: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn blocks(&self) -> &[Option<CurvatureBlock>] {
        &self.blocks
    }

    /// Refreshes curvature blocks per the gating rule. Returns whether any
    /// block was rebuilt.
    pub(crate) fn refresh(&mut self, back: &Backward) -> Result<bool> {
        let layers = back.factors.len();
        if self.blocks.len() != layers {
            self.blocks = vec![None; layers];
            self.u_norms = vec![0.0; layers];
        }
        let mut any = false;
        for (l, factors) in back.factors.iter().enumerate() {
            let rep = route_and_refresh(&mut self.blocks[l], factors, self.step, &self.cfg.refresh)?;
            if rep.refreshed {
                any = true;
                let b = self.blocks[l].as_ref().expect("refreshed block");
                self.u_norms[l] = u_frobenius_sq(b)?.sqrt();
            }
        }
        Ok(any)
    }

    /// Per-layer directions for gradient `grads` against the current blocks.
    pub fn directions(&self, grads: &[Vec<f64>], lambda: f64) -> Result<Vec<DirectionResult>> {
        self.blocks
            .iter()
            .zip(grads)
            .enumerate()
            .map(|(l, (b, g))| {
                let b = b.as_ref().ok_or_else(|| {
                    SengError::Parameter(format!("layer {l} has no curvature block"))
                })?;
                let seed = stream_seed(self.cfg.seed, self.step, l as u64, 0);
                layer_direction(b, g, lambda, &self.cfg.sketch, seed)
            })
            .collect()
    }
}

/// Applies `θ += α·d` and fills the step-size fields of `rec`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn apply_directions(
    net: &mut Network,
    dirs: &[Vec<f64>],
    coeff_norms: &[f64],
    u_norms: &[f64],
    grads: &[Vec<f64>],
    alpha: f64,
    lambda: f64,
    rec: &mut MetricsRecord,
) -> Result<()> {
    let update: Vec<Vec<f64>> = dirs.iter().map(|d| d.iter().map(|v| alpha * v).collect()).collect();
    rec.step_norm = global_norm(&update);
    let bound_sq: f64 = grads
        .iter()
        .zip(coeff_norms.iter().zip(u_norms))
        .map(|(g, (b, u))| {
            let t = norm(g) + b * u;
            t * t
        })
        .sum();
    rec.step_bound = alpha / lambda * bound_sq.sqrt();
    net.apply_update(&update)
}

impl Optimizer for Seng {
    fn step(&mut self, net: &mut Network, batch: &Dataset, epoch: f64) -> Result<MetricsRecord> {
        let start = Instant::now();
        let (alpha, lambda) = schedule_eval(&self.cfg, epoch);
        let mut rec = MetricsRecord::new(self.step, epoch);
        let ev = evaluate(net, batch, self.cfg.loss, self.step)?;
        rec.train_loss = ev.loss;
        let grads = decayed_grads(net, &ev.back.grad, self.cfg.weight_decay);
        rec.grad_norm = global_norm(&grads);
        self.refresh(&ev.back)?;
        let results = self.directions(&grads, lambda)?;
        for r in &results {
            if let Some(d) = r.diagnostics {
                rec.eta_est = Some(rec.eta_est.map_or(d.eta, |e: f64| e.max(d.eta)));
                rec.eps_est = Some(rec.eps_est.map_or(d.eps, |e: f64| e.max(d.eps)));
            }
        }
        let dirs: Vec<Vec<f64>> = results.iter().map(|r| r.d.clone()).collect();
        let coeff_norms: Vec<f64> = results.iter().map(|r| norm(&r.coeffs)).collect();
        apply_directions(net, &dirs, &coeff_norms, &self.u_norms, &grads, alpha, lambda, &mut rec)?;
        self.step += 1;
        rec.wall_ms = start.elapsed().as_secs_f64() * 1e3;
        Ok(rec)
    }

    fn steps_taken(&self) -> u64 {
        self.step
    }
}

/// Heavy-ball SGD: `v ← μv + g + wd·θ`, `θ ← θ − αv`.
#[derive(Clone, Debug)]
pub struct SgdMomentum {
    cfg: TrainConfig,
    velocity: Vec<Vec<f64>>,
    step: u64,
}

impl SgdMomentum {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            velocity: Vec::new(),
            step: 0,
        })
    }
}

impl Optimizer for SgdMomentum {
    fn step(&mut self, net: &mut Network, batch: &Dataset, epoch: f64) -> Result<MetricsRecord> {
        let start = Instant::now();
        let (alpha, _) = schedule_eval(&self.cfg, epoch);
        let mut rec = MetricsRecord::new(self.step, epoch);
        let ev = evaluate(net, batch, self.cfg.loss, self.step)?;
        rec.train_loss = ev.loss;
        let grads = decayed_grads(net, &ev.back.grad, self.cfg.weight_decay);
        rec.grad_norm = global_norm(&grads);
        if self.velocity.len() != grads.len() {
            self.velocity = grads.iter().map(|g| vec![0.0; g.len()]).collect();
        }
        let mu = self.cfg.momentum;
        let update: Vec<Vec<f64>> = self
            .velocity
            .iter_mut()
            .zip(&grads)
            .map(|(v, g)| {
                for (vi, gi) in v.iter_mut().zip(g) {
                    *vi = mu * *vi + gi;
                }
                v.iter().map(|x| -alpha * x).collect()
            })
            .collect();
        rec.step_norm = global_norm(&update);
        rec.step_bound = rec.step_norm;
        net.apply_update(&update)?;
        self.step += 1;
        rec.wall_ms = start.elapsed().as_secs_f64() * 1e3;
        Ok(rec)
    }

    fn steps_taken(&self) -> u64 {
        self.step
    }
}

/// Full-dataset loss and gradient norm (no weight decay).
pub fn full_batch_stats(net: &Network, data: &Dataset, loss: LossKind) -> Result<(f64, f64)> {
    let ev = evaluate(net, data, loss, 0)?;
    Ok((ev.loss, global_norm(&ev.back.grad)))
}
