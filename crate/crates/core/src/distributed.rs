//! Simulated data-parallel SENG over `M` in-process workers.
//!
//! Each worker owns a contiguous shard of the batch, its own curvature
//! blocks built from that shard (`U_{S_i} = [u_j]/√|S_i|`), and its own sketch
//! streams. Everything crossing workers goes through a [`SyncBuffer`], whose
//! reductions run in worker order so results never depend on scheduling.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::curvature::{route_and_refresh, u_frobenius_sq, BlockStorage, CurvatureBlock, UcMode};
use crate::direction::{assemble, block_times_coeffs, layer_coeffs, SketchConfig};
use crate::error::{Result, SengError};
use crate::linalg::{gemm_nt, norm, DenseMatrix};
use crate::net::Network;
use crate::optimizer::{
    apply_directions, decayed_grads, evaluate, global_norm, schedule_eval, Dataset, MetricsRecord,
    Optimizer, TrainConfig,
};
use crate::sketch::stream_seed;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkerShard {
    pub worker_id: usize,
    /// Positions within the batch.
    pub indices: Vec<usize>,
}

/// Contiguous split of `0..batch_len` into `m` shards whose sizes differ by
/// at most one; the first `batch_len % m` shards get the extra sample.
pub fn shard_batch(batch_len: usize, m: usize) -> Result<Vec<WorkerShard>> {
    if m == 0 {
        return Err(SengError::Parameter("worker count must be at least 1".into()));
    }
    if m > batch_len {
        return Err(SengError::Parameter(format!(
            "{m} workers for a batch of {batch_len}"
        )));
    }
    let base = batch_len / m;
    let rem = batch_len % m;
    let mut start = 0;
    Ok((0..m)
        .map(|w| {
            let len = base + usize::from(w < rem);
            let shard = WorkerShard {
                worker_id: w,
                indices: (start..start + len).collect(),
            };
            start += len;
            shard
        })
        .collect())
}

/// Whether worker coefficients use this step's gradient or the previous one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyncMode {
    #[default]
    Fresh,
    Stale,
}

/// Bytes and synchronizations of one step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TrafficRecord {
    pub step: u64,
    /// Sum of reduced tensor sizes.
    pub payload_bytes: u64,
    pub num_syncs: u32,
    /// Bytes each worker sends in a ring all-reduce, `2(M−1)/M` per payload byte.
    pub ring_bytes_per_worker: u64,
}

/// Barrier-style all-reduce staging area.
#[derive(Clone, Debug)]
pub struct SyncBuffer {
    slots: Vec<Option<Vec<f64>>>,
    traffic: TrafficRecord,
}

impl SyncBuffer {
    pub fn new(workers: usize, step: u64) -> Self {
        Self {
            slots: vec![None; workers],
            traffic: TrafficRecord {
                step,
                ..Default::default()
            },
        }
    }

    pub fn workers(&self) -> usize {
        self.slots.len()
    }

    pub fn submit(&mut self, worker: usize, payload: Vec<f64>) -> Result<()> {
        let slot = self.slots.get_mut(worker).ok_or_else(|| {
            SengError::Protocol(format!("worker {worker} is not part of this reduction"))
        })?;
        if slot.is_some() {
            return Err(SengError::Protocol(format!("worker {worker} submitted twice")));
        }
        *slot = Some(payload);
        Ok(())
    }

    /// Element-wise sum over workers, in worker order. Every worker must
    /// have submitted a payload of the same length.
    pub fn reduce_sum(&mut self) -> Result<Vec<f64>> {
        let mut parts = Vec::with_capacity(self.slots.len());
        for (w, slot) in self.slots.iter_mut().enumerate() {
            parts.push(
                slot.take()
                    .ok_or_else(|| SengError::Protocol(format!("worker {w} did not report")))?,
            );
        }
        let len = parts.first().map_or(0, Vec::len);
        if let Some(w) = parts.iter().position(|p| p.len() != len) {
            return Err(SengError::Protocol(format!(
                "worker {w} sent {} values, expected {len}",
                parts[w].len()
            )));
        }
        let mut parts = parts.into_iter();
        let mut sum = parts.next().unwrap_or_default();
        for p in parts {
            for (s, v) in sum.iter_mut().zip(p) {
                *s += v;
            }
        }
        let bytes = (len * std::mem::size_of::<f64>()) as u64;
        let m = self.slots.len() as u64;
        self.traffic.payload_bytes += bytes;
        self.traffic.num_syncs += 1;
        self.traffic.ring_bytes_per_worker += 2 * (m - 1) * bytes / m;
        Ok(sum)
    }

    pub fn traffic(&self) -> TrafficRecord {
        self.traffic
    }
}

/// `b̂_i = (λI + U_iᵀU_i)⁻¹U_iᵀ g_ref` on the worker's own sketch stream.
pub fn local_coeffs(
    block: &CurvatureBlock,
    g_ref: &[f64],
    lambda: f64,
    sketch: &SketchConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    Ok(layer_coeffs(block, g_ref, lambda, sketch, seed)?.b)
}

/// `−(1/λ)·mean(gᵢ) + (1/λ)·mean(U_i b̂_i)` for a single layer, through two
/// reductions on `sync`.
pub fn allreduce_combine(
    contributions: &[Vec<f64>],
    local_grads: &[Vec<f64>],
    lambda: f64,
    sync: &mut SyncBuffer,
) -> Result<Vec<f64>> {
    let m = sync.workers();
    if contributions.len() != m || local_grads.len() != m {
        return Err(SengError::Protocol(format!(
            "{} contributions and {} gradients for {m} workers",
            contributions.len(),
            local_grads.len()
        )));
    }
    for (w, g) in local_grads.iter().enumerate() {
        sync.submit(w, g.clone())?;
    }
    let g = mean_of(sync.reduce_sum()?, m);
    for (w, c) in contributions.iter().enumerate() {
        sync.submit(w, c.clone())?;
    }
    let u = mean_of(sync.reduce_sum()?, m);
    Ok(assemble(&g, &u, lambda))
}

fn mean_of(mut v: Vec<f64>, m: usize) -> Vec<f64> {
    let inv = m as f64;
    for x in &mut v {
        *x /= inv;
    }
    v
}

/// Worker `i`'s factor sums `((Gᶜ)ᵢ, (Aᶜ)ᵢ)` for coefficients `c`, which
/// already carry the block scale and the `1/M` average.
fn factor_partial_sums(block: &CurvatureBlock, c: &[f64]) -> Result<(DenseMatrix, DenseMatrix)> {
    let BlockStorage::Implicit { g, a, rank } = block.storage() else {
        return Err(SengError::Parameter("factor sums need an implicit block".into()));
    };
    let rank = *rank;
    let mut gc = DenseMatrix::zeros(g.rows(), rank);
    let mut ac = DenseMatrix::zeros(a.rows(), rank);
    let roots: Vec<f64> = c.iter().map(|v| v.abs().sqrt()).collect();
    let total: f64 = roots.iter().sum();
    if total < 1e-30 {
        return Ok((gc, ac));
    }
    for (j, (&cj, &rj)) in c.iter().zip(&roots).enumerate() {
        add_block(&mut gc, g, j * rank, rj);
        add_block(&mut ac, a, j * rank, cj / total);
    }
    Ok((gc, ac))
}

fn add_block(dst: &mut DenseMatrix, src: &DenseMatrix, col0: usize, w: f64) {
    let width = dst.cols();
    for r in 0..dst.rows() {
        for (d, &v) in dst.row_mut(r).iter_mut().zip(&src.row(r)[col0..col0 + width]) {
            *d += w * v;
        }
    }
}

fn folded(block: &CurvatureBlock, b: &[f64], m: usize) -> Vec<f64> {
    let s = block.scale() / m as f64;
    b.iter().map(|v| v * s).collect()
}

/// Reduced-communication `Uc`: each worker sends `(Gᶜ)ᵢ`, `(Aᶜ)ᵢ` built
/// with its own denominator, and the result is `vec((Σ(Gᶜ)ᵢ)(Σ(Aᶜ)ᵢ)ᵀ)`.
///
/// `coeffs[i]` are worker `i`'s `b̂_i`; the `1/√|S_i|` block scale and the
/// `1/M` worker average are applied here.
pub fn distributed_uc(blocks: &[&CurvatureBlock], coeffs: &[Vec<f64>], sync: &mut SyncBuffer) -> Result<Vec<f64>> {
    let m = sync.workers();
    if blocks.len() != m || coeffs.len() != m {
        return Err(SengError::Protocol(format!(
            "{} blocks and {} coefficient sets for {m} workers",
            blocks.len(),
            coeffs.len()
        )));
    }
    let shape = blocks[0].shape();
    let rank = blocks[0]
        .rank()
        .ok_or_else(|| SengError::Parameter("distributed Uc needs implicit blocks".into()))?;
    for (w, (b, c)) in blocks.iter().zip(coeffs).enumerate() {
        let (gc, ac) = factor_partial_sums(b, &folded(b, c, m))?;
        let mut payload = gc.into_vec();
        payload.extend(ac.into_vec());
        sync.submit(w, payload)?;
    }
    let sum = sync.reduce_sum()?;
    let split = shape.n_g * rank;
    let g = DenseMatrix::from_vec(shape.n_g, rank, sum[..split].to_vec())?;
    let a = DenseMatrix::from_vec(shape.n_a, rank, sum[split..].to_vec())?;
    Ok(gemm_nt(g.view(), a.view()).into_vec())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistributedConfig {
    pub workers: usize,
    pub mode: SyncMode,
}

/// What one worker sends at the direction sync for one layer.
enum Contribution {
    Dense(Vec<f64>),
    Factors { gc: DenseMatrix, ac: DenseMatrix },
}

impl Contribution {
    fn len(&self) -> usize {
        match self {
            Contribution::Dense(v) => v.len(),
            Contribution::Factors { gc, ac } => gc.data().len() + ac.data().len(),
        }
    }

    fn append_to(&self, out: &mut Vec<f64>) {
        match self {
            Contribution::Dense(v) => out.extend_from_slice(v),
            Contribution::Factors { gc, ac } => {
                out.extend_from_slice(gc.data());
                out.extend_from_slice(ac.data());
            }
        }
    }
}

/// SENG with the block-diagonal coefficient approximation across workers.
#[derive(Clone, Debug)]
pub struct DistributedSeng {
    cfg: TrainConfig,
    dist: DistributedConfig,
    /// `blocks[worker][layer]`
    blocks: Vec<Vec<Option<CurvatureBlock>>>,
    u_norms: Vec<Vec<f64>>,
    prev_grad: Option<Vec<Vec<f64>>>,
    traffic: Vec<TrafficRecord>,
    step: u64,
}

impl DistributedSeng {
    pub fn new(cfg: TrainConfig, dist: DistributedConfig) -> Result<Self> {
        cfg.validate()?;
        if dist.workers == 0 {
            return Err(SengError::Parameter("worker count must be at least 1".into()));
        }
        if dist.workers > cfg.batch_size {
            return Err(SengError::Parameter(format!(
                "{} workers exceed batch size {}",
                dist.workers, cfg.batch_size
            )));
        }
        Ok(Self {
            cfg,
            dist,
            blocks: vec![Vec::new(); dist.workers],
            u_norms: vec![Vec::new(); dist.workers],
            prev_grad: None,
            traffic: Vec::new(),
            step: 0,
        })
    }

    pub fn traffic_log(&self) -> &[TrafficRecord] {
        &self.traffic
    }

    pub fn worker_blocks(&self, worker: usize) -> &[Option<CurvatureBlock>] {
        &self.blocks[worker]
    }

    fn contribution(&self, block: &CurvatureBlock, b: &[f64]) -> Result<Contribution> {
        let m = self.dist.workers;
        if !block.is_explicit() && self.cfg.sketch.uc_mode == UcMode::Averaged {
            let (gc, ac) = factor_partial_sums(block, &folded(block, b, m))?;
            return Ok(Contribution::Factors { gc, ac });
        }
        Ok(Contribution::Dense(block_times_coeffs(block, b, self.cfg.sketch.uc_mode)?))
    }
}

fn flatten(parts: &[Vec<f64>]) -> Vec<f64> {
    parts.iter().flat_map(|p| p.iter().copied()).collect()
}

fn unflatten(flat: &[f64], lens: &[usize]) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(lens.len());
    let mut at = 0;
    for &l in lens {
        out.push(flat[at..at + l].to_vec());
        at += l;
    }
    out
}

impl Optimizer for DistributedSeng {
    fn step(&mut self, net: &mut Network, batch: &Dataset, epoch: f64) -> Result<MetricsRecord> {
        let start = Instant::now();
        let m = self.dist.workers;
        let (alpha, lambda) = schedule_eval(&self.cfg, epoch);
        let shards = shard_batch(batch.len(), m)?;
        let step = self.step;
        let loss_kind = self.cfg.loss;

        // local forward/backward
        let evals: Vec<Result<_>> = crate::par::map_slice(&shards, |s| {
            let local = batch.subset(&s.indices);
            evaluate(net, &local, loss_kind, step)
        });
        let mut local_grads = Vec::with_capacity(m);
        let mut loss = 0.0;
        let mut backs = Vec::with_capacity(m);
        for (s, ev) in shards.iter().zip(evals) {
            let ev = ev?;
            loss += s.indices.len() as f64 / batch.len() as f64 * ev.loss;
            local_grads.push(decayed_grads(net, &ev.back.grad, self.cfg.weight_decay));
            backs.push(ev.back);
        }

        // local curvature refresh
        for (w, back) in backs.iter().enumerate() {
            let layers = back.factors.len();
            if self.blocks[w].len() != layers {
                self.blocks[w] = vec![None; layers];
                self.u_norms[w] = vec![0.0; layers];
            }
            for (l, factors) in back.factors.iter().enumerate() {
                let rep = route_and_refresh(&mut self.blocks[w][l], factors, step, &self.cfg.refresh)?;
                if rep.refreshed {
                    let b = self.blocks[w][l].as_ref().expect("refreshed block");
                    self.u_norms[w][l] = u_frobenius_sq(b)?.sqrt();
                }
            }
        }
        drop(backs);

        let lens: Vec<usize> = local_grads[0].iter().map(Vec::len).collect();
        let mut sync = SyncBuffer::new(m, step);
        let stale = self.dist.mode == SyncMode::Stale && self.prev_grad.is_some();

        // fresh: the gradient is reduced first and feeds the coefficients
        let mut grad = None;
        if !stale {
            for (w, g) in local_grads.iter().enumerate() {
                sync.submit(w, flatten(g))?;
            }
            grad = Some(unflatten(&mean_of(sync.reduce_sum()?, m), &lens));
        }
        let g_ref: &[Vec<f64>] = match (&grad, &self.prev_grad) {
            (Some(g), _) => g,
            (None, Some(p)) => p,
            (None, None) => unreachable!("stale mode needs a previous gradient"),
        };

        let sketch = self.cfg.sketch;
        let seed = self.cfg.seed;
        let blocks = &self.blocks;
        let per_worker: Vec<Result<Vec<Vec<f64>>>> = crate::par::map_range(m, |w| {
            blocks[w]
                .iter()
                .zip(g_ref)
                .enumerate()
                .map(|(l, (b, g))| {
                    let b = b.as_ref().expect("refreshed block");
                    local_coeffs(b, g, lambda, &sketch, stream_seed(seed, step, l as u64, w as u64))
                })
                .collect()
        });
        let coeffs: Vec<Vec<Vec<f64>>> = per_worker.into_iter().collect::<Result<_>>()?;

        let layers = lens.len();
        let mut contrib_lens = vec![0; layers];
        for (w, cw) in coeffs.iter().enumerate() {
            let mut payload = if stale { flatten(&local_grads[w]) } else { Vec::new() };
            for (l, b) in cw.iter().enumerate() {
                let block = self.blocks[w][l].as_ref().expect("refreshed block");
                let c = self.contribution(block, b)?;
                contrib_lens[l] = c.len();
                c.append_to(&mut payload);
            }
            sync.submit(w, payload)?;
        }
        let reduced = sync.reduce_sum()?;
        let (grad, rest) = if stale {
            let total: usize = lens.iter().sum();
            (
                unflatten(&mean_of(reduced[..total].to_vec(), m), &lens),
                reduced[total..].to_vec(),
            )
        } else {
            (grad.expect("fresh gradient"), reduced)
        };

        let mut dirs = Vec::with_capacity(layers);
        let mut at = 0;
        for l in 0..layers {
            let part = &rest[at..at + contrib_lens[l]];
            at += contrib_lens[l];
            let block = self.blocks[0][l].as_ref().expect("refreshed block");
            let w = if !block.is_explicit() && sketch.uc_mode == UcMode::Averaged {
                let shape = block.shape();
                let rank = block.rank().expect("implicit rank");
                let split = shape.n_g * rank;
                let g = DenseMatrix::from_vec(shape.n_g, rank, part[..split].to_vec())?;
                let a = DenseMatrix::from_vec(shape.n_a, rank, part[split..].to_vec())?;
                gemm_nt(g.view(), a.view()).into_vec()
            } else {
                mean_of(part.to_vec(), m)
            };
            dirs.push(assemble(&grad[l], &w, lambda));
        }

        let mut rec = MetricsRecord {
            step,
            epoch,
            train_loss: loss,
            grad_norm: global_norm(&grad),
            test_acc: None,
            eta_est: None,
            eps_est: None,
            payload_bytes: 0,
            num_syncs: 0,
            wall_ms: 0.0,
            step_norm: 0.0,
            step_bound: 0.0,
        };
        let coeff_terms: Vec<f64> = (0..layers)
            .map(|l| {
                (0..m)
                    .map(|w| norm(&coeffs[w][l]) * self.u_norms[w][l])
                    .sum::<f64>()
                    / m as f64
            })
            .collect();
        apply_directions(net, &dirs, &coeff_terms, &vec![1.0; layers], &grad, alpha, lambda, &mut rec)?;

        let traffic = sync.traffic();
        rec.payload_bytes = traffic.payload_bytes;
        rec.num_syncs = traffic.num_syncs;
        self.traffic.push(traffic);
        self.prev_grad = Some(grad);
        self.step += 1;
        rec.wall_ms = start.elapsed().as_secs_f64() * 1e3;
        Ok(rec)
    }

    fn steps_taken(&self) -> u64 {
        self.step
    }
}
