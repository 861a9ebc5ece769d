//! Minimal feed-forward network whose backward pass keeps per-sample
//! gradient factors.
//!
//! For every parametric layer and sample `i` the backward pass yields a pair
//! `(Ĝᵢ, Âᵢ)` with `Ĝᵢ ∈ ℝ^{n_G×κ}` (backward signal) and `Âᵢ ∈ ℝ^{n_A×κ}`
//! (forward activations or im2col patches) such that the per-sample weight
//! gradient is `vec(Ĝᵢ Âᵢᵀ)`. Layers carry no bias, so a layer has exactly
//! `n_G · n_A` parameters.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SengError};
use crate::linalg::{axpy, DenseMatrix};
use crate::par;

/// Geometry of a 2-D convolution over a `(C, H, W)` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv2dSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub in_height: usize,
    pub in_width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dSpec {
    pub fn out_height(&self) -> usize {
        (self.in_height + 2 * self.padding - self.kernel_h) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.in_width + 2 * self.padding - self.kernel_w) / self.stride + 1
    }

    pub fn input_len(&self) -> usize {
        self.in_channels * self.in_height * self.in_width
    }

    pub fn output_len(&self) -> usize {
        self.out_channels * self.out_height() * self.out_width()
    }

    fn validate(&self, layer: usize) -> Result<()> {
        let bad = |m: &str| SengError::Structure {
            layer,
            message: m.to_string(),
        };
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(bad("channel counts must be positive"));
        }
        if self.kernel_h == 0 || self.kernel_w == 0 || self.stride == 0 {
            return Err(bad("kernel and stride must be positive"));
        }
        if self.kernel_h > self.in_height + 2 * self.padding
            || self.kernel_w > self.in_width + 2 * self.padding
        {
            return Err(bad("kernel larger than padded input"));
        }
        Ok(())
    }

    /// Unfolds one `(C, H, W)` input into the `n_A × κ` patch matrix.
    pub fn im2col(&self, input: &[f64]) -> DenseMatrix {
        let (oh, ow) = (self.out_height(), self.out_width());
        let n_a = self.in_channels * self.kernel_h * self.kernel_w;
        let mut patches = DenseMatrix::zeros(n_a, oh * ow);
        for c in 0..self.in_channels {
            for ki in 0..self.kernel_h {
                for kj in 0..self.kernel_w {
                    let row = (c * self.kernel_h + ki) * self.kernel_w + kj;
                    let dst = patches.row_mut(row);
                    for y in 0..oh {
                        let iy = (y * self.stride + ki) as isize - self.padding as isize;
                        if iy < 0 || iy >= self.in_height as isize {
                            continue;
                        }
                        for x in 0..ow {
                            let ix = (x * self.stride + kj) as isize - self.padding as isize;
                            if ix < 0 || ix >= self.in_width as isize {
                                continue;
                            }
                            dst[y * ow + x] = input[(c * self.in_height + iy as usize)
                                * self.in_width
                                + ix as usize];
                        }
                    }
                }
            }
        }
        patches
    }

    /// Scatter-adds a patch-shaped gradient back onto the input layout.
    pub fn col2im(&self, cols: &DenseMatrix) -> Vec<f64> {
        let (oh, ow) = (self.out_height(), self.out_width());
        let mut out = vec![0.0; self.input_len()];
        for c in 0..self.in_channels {
            for ki in 0..self.kernel_h {
                for kj in 0..self.kernel_w {
                    let row = (c * self.kernel_h + ki) * self.kernel_w + kj;
                    let src = cols.row(row);
                    for y in 0..oh {
                        let iy = (y * self.stride + ki) as isize - self.padding as isize;
                        if iy < 0 || iy >= self.in_height as isize {
                            continue;
                        }
                        for x in 0..ow {
                            let ix = (x * self.stride + kj) as isize - self.padding as isize;
                            if ix < 0 || ix >= self.in_width as isize {
                                continue;
                            }
                            out[(c * self.in_height + iy as usize) * self.in_width
                                + ix as usize] += src[y * ow + x];
                        }
                    }
                }
            }
        }
        out
    }
}

/// One layer of the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense { inputs: usize, outputs: usize },
    Conv2d(Conv2dSpec),
    Relu,
}

/// Factor geometry of a parametric layer: `n = n_g · n_a` parameters and
/// `kappa` columns per factor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub n_g: usize,
    pub n_a: usize,
    pub kappa: usize,
}

impl LayerShape {
    pub fn new(n_g: usize, n_a: usize, kappa: usize) -> Self {
        Self { n_g, n_a, kappa }
    }

    pub fn params(&self) -> usize {
        self.n_g * self.n_a
    }
}

impl LayerSpec {
    pub fn shape(&self) -> Option<LayerShape> {
        match *self {
            LayerSpec::Dense { inputs, outputs } => Some(LayerShape::new(outputs, inputs, 1)),
            LayerSpec::Conv2d(c) => Some(LayerShape::new(
                c.out_channels,
                c.in_channels * c.kernel_h * c.kernel_w,
                c.out_height() * c.out_width(),
            )),
            LayerSpec::Relu => None,
        }
    }

    pub fn is_parametric(&self) -> bool {
        !matches!(self, LayerSpec::Relu)
    }
}

/// Per-sample factor pair whose product vectorizes to the layer gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientFactors {
    /// `n_G × κ` backward signal.
    pub g_hat: DenseMatrix,
    /// `n_A × κ` forward activations or patches.
    pub a_hat: DenseMatrix,
}

impl GradientFactors {
    pub fn new(g_hat: DenseMatrix, a_hat: DenseMatrix) -> Result<Self> {
        if g_hat.cols() != a_hat.cols() {
            return Err(SengError::Parameter(format!(
                "factor column counts differ: {} vs {}",
                g_hat.cols(),
                a_hat.cols()
            )));
        }
        Ok(Self { g_hat, a_hat })
    }

    pub fn shape(&self) -> LayerShape {
        LayerShape::new(self.g_hat.rows(), self.a_hat.rows(), self.g_hat.cols())
    }

    /// `uᵢ = vec(Ĝᵢ Âᵢᵀ)`
    pub fn materialize(&self) -> Vec<f64> {
        materialize_gradient(self)
    }
}

/// `uᵢ = vec(Ĝᵢ Âᵢᵀ)` under the row-major vec layout.
pub fn materialize_gradient(f: &GradientFactors) -> Vec<f64> {
    f.g_hat.matmul_t(&f.a_hat).into_vec()
}

/// Per-sample record kept between forward and backward.
#[derive(Clone, Debug)]
struct SampleTrace {
    /// Input of every layer.
    inputs: Vec<Vec<f64>>,
    /// im2col patches for conv layers, `None` elsewhere.
    patches: Vec<Option<DenseMatrix>>,
}

/// Activations produced by [`Network::forward`]; consumed by
/// [`Network::backward_factors`].
#[derive(Clone, Debug)]
pub struct ForwardCache {
    version: u64,
    /// `ϱ × m` network outputs.
    pub outputs: DenseMatrix,
    samples: Vec<SampleTrace>,
}

/// Per-sample factors for every parametric layer plus the mini-batch mean
/// gradient.
#[derive(Clone, Debug)]
pub struct Backward {
    /// `factors[layer][sample]`, indexed by parametric layer.
    pub factors: Vec<Vec<GradientFactors>>,
    /// `g = (1/ϱ) Σᵢ uᵢ` per parametric layer.
    pub grad: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Network {
    input_len: usize,
    layers: Vec<LayerSpec>,
    /// One `n_G × n_A` matrix per parametric layer.
    weights: Vec<DenseMatrix>,
    #[serde(skip)]
    version: u64,
}

impl Network {
    /// Validates the layer chain and zero-initializes the weights.
    pub fn new(input_len: usize, layers: Vec<LayerSpec>) -> Result<Self> {
        let mut len = input_len;
        let mut weights = Vec::new();
        for (l, spec) in layers.iter().enumerate() {
            match *spec {
                LayerSpec::Dense { inputs, outputs } => {
                    if inputs != len {
                        return Err(SengError::Structure {
                            layer: l,
                            message: format!("dense layer expects {inputs} inputs, gets {len}"),
                        });
                    }
                    if outputs == 0 {
                        return Err(SengError::Structure {
                            layer: l,
                            message: "dense layer needs at least one output".into(),
                        });
                    }
                    weights.push(DenseMatrix::zeros(outputs, inputs));
                    len = outputs;
                }
                LayerSpec::Conv2d(c) => {
                    c.validate(l)?;
                    if c.input_len() != len {
                        return Err(SengError::Structure {
                            layer: l,
                            message: format!(
                                "conv layer expects {} inputs, gets {len}",
                                c.input_len()
                            ),
                        });
                    }
                    let shape = spec.shape().expect("parametric");
                    weights.push(DenseMatrix::zeros(shape.n_g, shape.n_a));
                    len = c.output_len();
                }
                LayerSpec::Relu => {}
            }
        }
        Ok(Self {
            input_len,
            layers,
            weights,
            version: 0,
        })
    }

    /// He-normal initialization, `std = √(2 / n_A)`.
    pub fn he_init(mut self, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for w in &mut self.weights {
            let std = (2.0 / w.cols() as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("finite std");
            w.data_mut()
                .iter_mut()
                .for_each(|v| *v = normal.sample(&mut rng));
        }
        self.version += 1;
        self
    }

    pub fn input_len(&self) -> usize {
        self.input_len
    }

    pub fn output_len(&self) -> usize {
        let mut len = self.input_len;
        for spec in &self.layers {
            match *spec {
                LayerSpec::Dense { outputs, .. } => len = outputs,
                LayerSpec::Conv2d(c) => len = c.output_len(),
                LayerSpec::Relu => {}
            }
        }
        len
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn weights(&self) -> &[DenseMatrix] {
        &self.weights
    }

    /// Shapes of the parametric layers, in order.
    pub fn param_shapes(&self) -> Vec<LayerShape> {
        self.layers.iter().filter_map(LayerSpec::shape).collect()
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().map(|w| w.data().len()).sum()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// Replaces the weights of parametric layer `layer` with `vec`-layout values.
    pub fn set_weights(&mut self, layer: usize, values: &[f64]) -> Result<()> {
        let w = self
            .weights
            .get_mut(layer)
            .ok_or_else(|| SengError::Parameter(format!("no parametric layer {layer}")))?;
        if values.len() != w.data().len() {
            return Err(SengError::Parameter(format!(
                "layer {layer} has {} weights, got {}",
                w.data().len(),
                values.len()
            )));
        }
        w.data_mut().copy_from_slice(values);
        self.version += 1;
        Ok(())
    }

    /// `θ ← θ + step`, one vector per parametric layer.
    pub fn apply_update(&mut self, step: &[Vec<f64>]) -> Result<()> {
        if step.len() != self.weights.len() {
            return Err(SengError::Parameter(format!(
                "update has {} layers, network has {}",
                step.len(),
                self.weights.len()
            )));
        }
        for (l, (w, d)) in self.weights.iter_mut().zip(step).enumerate() {
            if d.len() != w.data().len() {
                return Err(SengError::Parameter(format!(
                    "update for layer {l} has length {}, expected {}",
                    d.len(),
                    w.data().len()
                )));
            }
            axpy(1.0, d, w.data_mut());
        }
        self.version += 1;
        Ok(())
    }

    /// Runs every sample through the network, keeping the activations that
    /// the backward pass needs.
    pub fn forward(&self, batch: &[Vec<f64>]) -> Result<ForwardCache> {
        if batch.is_empty() {
            return Err(SengError::Parameter("empty batch".into()));
        }
        if let Some(bad) = batch.iter().position(|x| x.len() != self.input_len) {
            return Err(SengError::Structure {
                layer: 0,
                message: format!(
                    "sample {bad} has {} features, expected {}",
                    batch[bad].len(),
                    self.input_len
                ),
            });
        }
        let traces = par::map_slice(batch, |x| self.forward_one(x));
        let m = self.output_len();
        let mut outputs = DenseMatrix::zeros(batch.len(), m);
        let mut samples = Vec::with_capacity(batch.len());
        for (i, (trace, out)) in traces.into_iter().enumerate() {
            outputs.row_mut(i).copy_from_slice(&out);
            samples.push(trace);
        }
        Ok(ForwardCache {
            version: self.version,
            outputs,
            samples,
        })
    }

    /// Outputs only.
    pub fn predict(&self, batch: &[Vec<f64>]) -> Result<DenseMatrix> {
        Ok(self.forward(batch)?.outputs)
    }

    fn forward_one(&self, x: &[f64]) -> (SampleTrace, Vec<f64>) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut patches = Vec::with_capacity(self.layers.len());
        let mut cur = x.to_vec();
        let mut w_idx = 0;
        for spec in &self.layers {
            let next = match *spec {
                LayerSpec::Dense { .. } => {
                    patches.push(None);
                    let y = self.weights[w_idx].matvec(&cur);
                    w_idx += 1;
                    y
                }
                LayerSpec::Conv2d(c) => {
                    let p = c.im2col(&cur);
                    let y = self.weights[w_idx].matmul(&p).into_vec();
                    w_idx += 1;
                    patches.push(Some(p));
                    y
                }
                LayerSpec::Relu => {
                    patches.push(None);
                    cur.iter().map(|&v| v.max(0.0)).collect()
                }
            };
            inputs.push(std::mem::replace(&mut cur, next));
        }
        (SampleTrace { inputs, patches }, cur)
    }

    /// Backward pass that keeps per-sample factors. `output_grads` row `i`
    /// holds `∂ψᵢ/∂fᵢ` for sample `i` (not divided by the batch size).
    pub fn backward_factors(
        &self,
        cache: ForwardCache,
        output_grads: &DenseMatrix,
    ) -> Result<Backward> {
        if cache.version != self.version {
            return Err(SengError::StaleCache {
                cache: cache.version,
                current: self.version,
            });
        }
        let batch = cache.samples.len();
        if output_grads.shape() != (batch, self.output_len()) {
            return Err(SengError::Structure {
                layer: self.layers.len().saturating_sub(1),
                message: format!(
                    "output gradient is {}x{}, expected {}x{}",
                    output_grads.rows(),
                    output_grads.cols(),
                    batch,
                    self.output_len()
                ),
            });
        }
        let per_sample: Vec<Vec<GradientFactors>> = par::map_range(batch, |i| {
            self.backward_one(&cache.samples[i], output_grads.row(i))
        });

        let n_param = self.weights.len();
        let mut factors: Vec<Vec<GradientFactors>> =
            (0..n_param).map(|_| Vec::with_capacity(batch)).collect();
        for sample in per_sample {
            for (l, f) in sample.into_iter().enumerate() {
                factors[l].push(f);
            }
        }
        let inv = 1.0 / batch as f64;
        let grad = par::map_slice(&factors, |layer| {
            let mut g = vec![0.0; layer[0].g_hat.rows() * layer[0].a_hat.rows()];
            for f in layer {
                axpy(inv, &materialize_gradient(f), &mut g);
            }
            g
        });
        Ok(Backward { factors, grad })
    }

    fn backward_one(&self, trace: &SampleTrace, out_grad: &[f64]) -> Vec<GradientFactors> {
        let mut delta = out_grad.to_vec();
        let mut w_idx = self.weights.len();
        let mut factors = Vec::with_capacity(self.weights.len());
        for (l, spec) in self.layers.iter().enumerate().rev() {
            let input = &trace.inputs[l];
            match *spec {
                LayerSpec::Dense { inputs, outputs } => {
                    w_idx -= 1;
                    let w = &self.weights[w_idx];
                    let g_hat = DenseMatrix::from_vec(outputs, 1, delta.clone()).expect("shape");
                    let a_hat = DenseMatrix::from_vec(inputs, 1, input.clone()).expect("shape");
                    delta = w.t_matvec(&delta);
                    factors.push(GradientFactors { g_hat, a_hat });
                }
                LayerSpec::Conv2d(c) => {
                    w_idx -= 1;
                    let w = &self.weights[w_idx];
                    let kappa = c.out_height() * c.out_width();
                    let g_hat =
                        DenseMatrix::from_vec(c.out_channels, kappa, delta.clone()).expect("shape");
                    let a_hat = trace.patches[l].clone().expect("conv patches");
                    delta = c.col2im(&w.t_matmul(&g_hat));
                    factors.push(GradientFactors { g_hat, a_hat });
                }
                LayerSpec::Relu => {
                    for (d, &x) in delta.iter_mut().zip(input) {
                        // subgradient 0 at the kink
                        if x <= 0.0 {
                            *d = 0.0;
                        }
                    }
                }
            }
        }
        factors.reverse();
        factors
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    CrossEntropy,
}

/// How per-sample losses combine into the batch loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    Mean,
    Sum,
}

/// Regression targets (one row per sample) or class labels.
#[derive(Clone, Copy, Debug)]
pub enum Targets<'a> {
    Values(&'a DenseMatrix),
    Classes(&'a [usize]),
}

/// Loss and per-sample output gradients `∂ψᵢ/∂fᵢ`.
///
/// MSE uses `ψᵢ = ½‖fᵢ − yᵢ‖²`; cross-entropy uses `ψᵢ = −log softmax(fᵢ)[yᵢ]`.
/// The reduction only affects the returned loss, never the gradients.
pub fn loss_and_grad(
    outputs: &DenseMatrix,
    targets: Targets<'_>,
    kind: LossKind,
    reduction: Reduction,
) -> Result<(f64, DenseMatrix)> {
    let (batch, m) = outputs.shape();
    let mut grads = DenseMatrix::zeros(batch, m);
    let mut total = 0.0;
    match (kind, targets) {
        (LossKind::Mse, Targets::Values(y)) => {
            if y.shape() != outputs.shape() {
                return Err(SengError::Parameter(format!(
                    "targets are {}x{}, outputs are {batch}x{m}",
                    y.rows(),
                    y.cols()
                )));
            }
            for i in 0..batch {
                let row = grads.row_mut(i);
                for j in 0..m {
                    let r = outputs[(i, j)] - y[(i, j)];
                    row[j] = r;
                    total += 0.5 * r * r;
                }
            }
        }
        (LossKind::CrossEntropy, Targets::Classes(labels)) => {
            if labels.len() != batch {
                return Err(SengError::Parameter(format!(
                    "{} labels for {batch} samples",
                    labels.len()
                )));
            }
            for (i, &label) in labels.iter().enumerate() {
                if label >= m {
                    return Err(SengError::Parameter(format!(
                        "class index {label} out of range for {m} classes"
                    )));
                }
                let logits = outputs.row(i);
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = logits.iter().map(|v| (v - max).exp()).sum();
                let log_z = max + sum.ln();
                total += log_z - logits[label];
                let row = grads.row_mut(i);
                for j in 0..m {
                    row[j] = (logits[j] - log_z).exp();
                }
                row[label] -= 1.0;
            }
        }
        (LossKind::Mse, Targets::Classes(_)) => {
            return Err(SengError::Parameter("mse needs value targets".into()))
        }
        (LossKind::CrossEntropy, Targets::Values(_)) => {
            return Err(SengError::Parameter(
                "cross-entropy needs class targets".into(),
            ))
        }
    }
    let loss = match reduction {
        Reduction::Mean => total / batch.max(1) as f64,
        Reduction::Sum => total,
    };
    Ok((loss, grads))
}
