//! Oracles shared by the integration tests. Nothing here calls the solver
//! paths under test.
#![allow(dead_code)]

use std::alloc::{GlobalAlloc, Layout, System};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use seng::linalg::DenseMatrix;
use seng::net::{loss_and_grad, GradientFactors, LossKind, Network, Reduction, Targets};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

pub fn gaussian_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    if den == 0.0 {
        num
    } else {
        num / den
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `vec(ĜÂᵀ)` in row-major order, written out as plain loops.
pub fn vec_outer(f: &GradientFactors) -> Vec<f64> {
    let (n_g, kappa) = (f.g_hat.rows(), f.g_hat.cols());
    let n_a = f.a_hat.rows();
    let mut out = vec![0.0; n_g * n_a];
    for p in 0..n_g {
        for q in 0..n_a {
            let mut s = 0.0;
            for k in 0..kappa {
                s += f.g_hat[(p, k)] * f.a_hat[(q, k)];
            }
            out[p * n_a + q] = s;
        }
    }
    out
}

/// `n × ϱ` matrix with columns `scale · vec(ĜᵢÂᵢᵀ)`.
pub fn materialize_u(factors: &[GradientFactors], scale: f64) -> DenseMatrix {
    let cols: Vec<Vec<f64>> = factors.iter().map(vec_outer).collect();
    let n = cols[0].len();
    DenseMatrix::from_fn(n, cols.len(), |i, j| scale * cols[j][i])
}

pub fn random_factors(n_g: usize, n_a: usize, kappa: usize, rho: usize, rng: &mut ChaCha8Rng) -> Vec<GradientFactors> {
    (0..rho)
        .map(|_| GradientFactors::new(gaussian(n_g, kappa, rng), gaussian(n_a, kappa, rng)).unwrap())
        .collect()
}

/// Gauss-Jordan inverse with partial pivoting.
pub fn inverse(a: &DenseMatrix) -> DenseMatrix {
    let n = a.rows();
    let mut m = a.clone();
    let mut inv = DenseMatrix::identity(n);
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| m[(i, c)].abs().total_cmp(&m[(j, c)].abs())).unwrap();
        for k in 0..n {
            let t = m[(c, k)];
            m[(c, k)] = m[(p, k)];
            m[(p, k)] = t;
            let t = inv[(c, k)];
            inv[(c, k)] = inv[(p, k)];
            inv[(p, k)] = t;
        }
        let d = m[(c, c)];
        for k in 0..n {
            m[(c, k)] /= d;
            inv[(c, k)] /= d;
        }
        for i in 0..n {
            if i != c {
                let f = m[(i, c)];
                if f != 0.0 {
                    for k in 0..n {
                        m[(i, k)] -= f * m[(c, k)];
                        inv[(i, k)] -= f * inv[(c, k)];
                    }
                }
            }
        }
    }
    inv
}

/// `−(UUᵀ + λI)⁻¹g` by forming and inverting the `n × n` matrix.
pub fn dense_direction(u: &DenseMatrix, g: &[f64], lambda: f64) -> Vec<f64> {
    let n = u.rows();
    let mut m = DenseMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let mut s = if i == j { lambda } else { 0.0 };
            for k in 0..u.cols() {
                s += u[(i, k)] * u[(j, k)];
            }
            m[(i, j)] = s;
        }
    }
    let inv = inverse(&m);
    (0..n)
        .map(|i| -(0..n).map(|j| inv[(i, j)] * g[j]).sum::<f64>())
        .collect()
}

/// Loss of a single sample under MSE against `target`.
pub fn sample_loss(net: &Network, x: &[f64], target: &[f64]) -> f64 {
    let out = net.predict(&[x.to_vec()]).unwrap();
    let y = DenseMatrix::from_vec(1, target.len(), target.to_vec()).unwrap();
    loss_and_grad(&out, Targets::Values(&y), LossKind::Mse, Reduction::Sum)
        .unwrap()
        .0
}

/// Central differences of the single-sample loss with respect to every
/// weight of parametric layer `layer`.
pub fn fd_layer_gradient(net: &Network, layer: usize, x: &[f64], target: &[f64], h: f64) -> Vec<f64> {
    let base = net.weights()[layer].data().to_vec();
    let mut probe = net.clone();
    let mut out = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        let mut w = base.clone();
        w[i] = base[i] + h;
        probe.set_weights(layer, &w).unwrap();
        let up = sample_loss(&probe, x, target);
        w[i] = base[i] - h;
        probe.set_weights(layer, &w).unwrap();
        let down = sample_loss(&probe, x, target);
        out.push((up - down) / (2.0 * h));
    }
    out
}

/// Allocator wrapper that records the largest request and how often a
/// watched size was requested.
pub struct CountingAlloc;

pub static ARMED: AtomicBool = AtomicBool::new(false);
pub static LARGEST: AtomicUsize = AtomicUsize::new(0);
pub static WATCH: AtomicUsize = AtomicUsize::new(usize::MAX);
pub static WATCH_HITS: AtomicUsize = AtomicUsize::new(0);
pub static AT_LEAST_WATCH: AtomicUsize = AtomicUsize::new(0);

unsafe impl GlobalAlloc for CountingAlloc {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        note(layout.size());
        unsafe { System.alloc(layout) }
    }

    unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
        note(layout.size());
        unsafe { System.alloc_zeroed(layout) }
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        note(new_size);
        unsafe { System.realloc(ptr, layout, new_size) }
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        unsafe { System.dealloc(ptr, layout) }
    }
}

fn note(size: usize) {
    if !ARMED.load(Ordering::Relaxed) {
        return;
    }
    LARGEST.fetch_max(size, Ordering::Relaxed);
    let watch = WATCH.load(Ordering::Relaxed);
    if size == watch {
        WATCH_HITS.fetch_add(1, Ordering::Relaxed);
    }
    if size >= watch {
        AT_LEAST_WATCH.fetch_add(1, Ordering::Relaxed);
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AllocReport {
    pub largest: usize,
    pub exact_hits: usize,
    pub at_least: usize,
}

/// Runs `f` with allocation tracking armed, watching for requests of
/// `watch` bytes.
pub fn track_allocations<T>(watch: usize, f: impl FnOnce() -> T) -> (T, AllocReport) {
    LARGEST.store(0, Ordering::SeqCst);
    WATCH_HITS.store(0, Ordering::SeqCst);
    AT_LEAST_WATCH.store(0, Ordering::SeqCst);
    WATCH.store(watch, Ordering::SeqCst);
    ARMED.store(true, Ordering::SeqCst);
    let out = f();
    ARMED.store(false, Ordering::SeqCst);
    let report = AllocReport {
        largest: LARGEST.load(Ordering::SeqCst),
        exact_hits: WATCH_HITS.load(Ordering::SeqCst),
        at_least: AT_LEAST_WATCH.load(Ordering::SeqCst),
    };
    (out, report)
}
