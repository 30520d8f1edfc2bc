//! Dense networks with reverse-mode gradients and Adam.
//!
//! Every function approximator in the crate is a [`DenseNet`]: a stack of
//! affine layers with one activation shared by all hidden layers and an
//! identity output layer. Inputs are processed in row-major batches
//! (`batch x features`).
//!
//! The activation is the exact GELU, `x * Phi(x)` with `Phi` the standard
//! normal CDF evaluated through `erf`. The tanh approximation is not used
//! anywhere.

use std::f64::consts::{FRAC_1_SQRT_2, PI, SQRT_2};
use std::io::{Read, Write};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use crate::error::{shape_err, Error, Result};

/// Exact GELU.
pub fn activation_eval(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

fn gelu_derivative(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    cdf + x * pdf
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Identity,
}

impl Activation {
    #[inline]
    pub fn eval(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => activation_eval(x),
            Activation::Identity => x,
        }
    }

    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => gelu_derivative(x),
            Activation::Identity => 1.0,
        }
    }

    /// Global Lipschitz constant, i.e. `sup |f'(x)|`.
    ///
    /// For GELU the derivative `Phi(x) + x phi(x)` peaks where
    /// `phi(x) (2 - x^2) = 0`, so at `x = sqrt(2)`.
    pub fn lipschitz(self) -> f64 {
        match self {
            Activation::Gelu => gelu_derivative(SQRT_2),
            Activation::Identity => 1.0,
        }
    }
}

/// One affine map `y = W x + b`, with `weight` stored as `(out, in)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Layer {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Array2::zeros((outputs, inputs)),
            bias: Array1::zeros(outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.nrows()
    }

    fn same_shape(&self, other: &Layer) -> bool {
        self.weight.dim() == other.weight.dim() && self.bias.len() == other.bias.len()
    }

    fn is_finite(&self) -> bool {
        self.weight.iter().chain(self.bias.iter()).all(|v| v.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseNet {
    layers: Vec<Layer>,
    activation: Activation,
}

/// Intermediate values kept from a forward pass for [`DenseNet::backward`].
#[derive(Clone, Debug)]
pub struct Trace {
    /// `inputs[k]` is the input to layer `k`.
    inputs: Vec<Array2<f64>>,
    /// Pre-activations of the hidden layers.
    pre: Vec<Array2<f64>>,
    output: Array2<f64>,
}

impl Trace {
    pub fn output(&self) -> &Array2<f64> {
        &self.output
    }

    pub fn input(&self) -> &Array2<f64> {
        &self.inputs[0]
    }
}

impl DenseNet {
    /// Random network with Glorot-uniform weights, `U(+-sqrt(6 / (fan_in + fan_out)))`,
    /// and zero biases.
    pub fn new<R: Rng + ?Sized>(
        layer_sizes: &[usize],
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        validate_sizes(layer_sizes)?;
        let layers = layer_sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                Layer {
                    weight: Array2::from_shape_simple_fn((fan_out, fan_in), || {
                        rng.random_range(-limit..=limit)
                    }),
                    bias: Array1::zeros(fan_out),
                }
            })
            .collect();
        Ok(Self { layers, activation })
    }

    pub fn zeros(layer_sizes: &[usize], activation: Activation) -> Result<Self> {
        validate_sizes(layer_sizes)?;
        let layers = layer_sizes
            .windows(2)
            .map(|w| Layer::zeros(w[0], w[1]))
            .collect();
        Ok(Self { layers, activation })
    }

    pub fn from_layers(layers: Vec<Layer>, activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(shape_err("a network needs at least one layer"));
        }
        for (k, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.outputs() {
                return Err(shape_err(format!(
                    "layer {k}: bias has {} entries for {} outputs",
                    layer.bias.len(),
                    layer.outputs()
                )));
            }
            if layer.inputs() == 0 || layer.outputs() == 0 {
                return Err(shape_err(format!("layer {k} has a zero dimension")));
            }
        }
        for (k, pair) in layers.windows(2).enumerate() {
            if pair[0].outputs() != pair[1].inputs() {
                return Err(shape_err(format!(
                    "layer {k} emits {} values but layer {} expects {}",
                    pair[0].outputs(),
                    k + 1,
                    pair[1].inputs()
                )));
            }
        }
        Ok(Self { layers, activation })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.input_dim()];
        sizes.extend(self.layers.iter().map(Layer::outputs));
        sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(Layer::is_finite)
    }

    /// Copy with every weight and bias multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        let layers = self
            .layers
            .iter()
            .map(|l| Layer {
                weight: &l.weight * factor,
                bias: &l.bias * factor,
            })
            .collect();
        Self {
            layers,
            activation: self.activation,
        }
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        let x = ArrayView2::from_shape((1, input.len()), input)
            .map_err(|e| shape_err(e.to_string()))?;
        Ok(self.forward_batch(x)?.into_raw_vec_and_offset().0)
    }

    pub fn forward_batch(&self, input: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&input)?;
        let last = self.layers.len() - 1;
        let mut x = input.to_owned();
        for (k, layer) in self.layers.iter().enumerate() {
            x = affine(&x, layer);
            if k != last {
                let act = self.activation;
                x.mapv_inplace(|v| act.eval(v));
            }
            if !x.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite { layer: k });
            }
        }
        Ok(x)
    }

    /// Forward pass that keeps every intermediate needed by [`Self::backward`].
    pub fn trace(&self, input: ArrayView2<f64>) -> Result<Trace> {
        self.check_input(&input)?;
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(last);
        let mut x = input.to_owned();
        for (k, layer) in self.layers.iter().enumerate() {
            let z = affine(&x, layer);
            if !z.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite { layer: k });
            }
            inputs.push(x);
            if k == last {
                x = z;
            } else {
                let act = self.activation;
                x = z.mapv(|v| act.eval(v));
                pre.push(z);
            }
        }
        Ok(Trace {
            inputs,
            pre,
            output: x,
        })
    }

    /// Reverse pass. `d_output` is the derivative of a scalar loss with
    /// respect to the traced output; returns the parameter gradients and the
    /// derivative with respect to the traced input.
    pub fn backward(
        &self,
        trace: &Trace,
        d_output: ArrayView2<f64>,
    ) -> Result<(GradBundle, Array2<f64>)> {
        let (grads, d_input) = self.reverse(trace, d_output, true)?;
        Ok((grads.expect("parameter gradients requested"), d_input))
    }

    /// Reverse pass that skips the parameter gradients. Used where the
    /// network is held fixed and only the derivative with respect to its
    /// input is needed.
    pub fn input_grad(&self, trace: &Trace, d_output: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.reverse(trace, d_output, false)?.1)
    }

    fn reverse(
        &self,
        trace: &Trace,
        d_output: ArrayView2<f64>,
        want_params: bool,
    ) -> Result<(Option<GradBundle>, Array2<f64>)> {
        if d_output.dim() != trace.output.dim() {
            return Err(shape_err(format!(
                "output gradient {:?} does not match traced output {:?}",
                d_output.dim(),
                trace.output.dim()
            )));
        }
        let n = self.layers.len();
        let mut grads = want_params.then(|| Vec::with_capacity(n));
        let mut delta = d_output.to_owned();
        for k in (0..n).rev() {
            if k != n - 1 {
                let act = self.activation;
                delta.zip_mut_with(&trace.pre[k], |d, &z| *d *= act.derivative(z));
            }
            if !delta.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite { layer: k });
            }
            if let Some(g) = grads.as_mut() {
                g.push(Layer {
                    weight: delta.t().dot(&trace.inputs[k]),
                    bias: delta.sum_axis(Axis(0)),
                });
            }
            delta = delta.dot(&self.layers[k].weight);
        }
        let grads = grads.map(|mut g| {
            g.reverse();
            GradBundle { layers: g }
        });
        Ok((grads, delta))
    }

    fn check_input(&self, input: &ArrayView2<f64>) -> Result<()> {
        if input.ncols() != self.input_dim() {
            return Err(shape_err(format!(
                "network expects {} inputs, got {}",
                self.input_dim(),
                input.ncols()
            )));
        }
        Ok(())
    }

    /// `self <- (1 - rate) * self + rate * other`, coordinate-wise.
    pub(crate) fn blend_toward(&mut self, other: &DenseNet, rate: f64) -> Result<()> {
        if !self.same_shape(other) {
            return Err(shape_err("blend between networks of different shapes"));
        }
        for (dst, src) in self.layers.iter_mut().zip(&other.layers) {
            dst.weight
                .zip_mut_with(&src.weight, |a, &b| *a = (1.0 - rate) * *a + rate * b);
            dst.bias
                .zip_mut_with(&src.bias, |a, &b| *a = (1.0 - rate) * *a + rate * b);
        }
        Ok(())
    }

    pub(crate) fn same_shape(&self, other: &DenseNet) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.same_shape(b))
    }
}

fn validate_sizes(sizes: &[usize]) -> Result<()> {
    if sizes.len() < 2 {
        return Err(shape_err("layer_sizes needs an input and an output size"));
    }
    if sizes.contains(&0) {
        return Err(shape_err("layer sizes must be positive"));
    }
    Ok(())
}

fn affine(x: &Array2<f64>, layer: &Layer) -> Array2<f64> {
    let mut z = x.dot(&layer.weight.t());
    z += &layer.bias;
    z
}

/// Partial derivatives of a scalar loss, laid out like the network parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct GradBundle {
    pub layers: Vec<Layer>,
}

impl GradBundle {
    pub fn zeros_like(net: &DenseNet) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| Layer::zeros(l.inputs(), l.outputs()))
                .collect(),
        }
    }

    pub fn matches(&self, net: &DenseNet) -> bool {
        self.layers.len() == net.layers.len()
            && self.layers.iter().zip(&net.layers).all(|(a, b)| a.same_shape(b))
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(Layer::is_finite)
    }

    pub fn is_zero(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|&v| v == 0.0))
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &GradBundle, scale: f64) -> Result<()> {
        if self.layers.len() != other.layers.len()
            || !self.layers.iter().zip(&other.layers).all(|(a, b)| a.same_shape(b))
        {
            return Err(shape_err("gradient bundles have different shapes"));
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight.scaled_add(scale, &b.weight);
            a.bias.scaled_add(scale, &b.bias);
        }
        Ok(())
    }

    /// Flattened view, layer by layer, weights (row-major) then biases.
    pub fn flatten(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()).copied())
            .collect()
    }
}

/// Gradient of `loss(net(input))` with respect to the parameters of `net`.
///
/// `loss` maps the network output to the scalar loss value and its derivative
/// with respect to that output; the rest of the chain is handled here.
pub fn grad<F>(net: &DenseNet, input: ArrayView2<f64>, loss: F) -> Result<(f64, GradBundle)>
where
    F: FnOnce(ArrayView2<f64>) -> (f64, Array2<f64>),
{
    let trace = net.trace(input)?;
    let (value, d_out) = loss(trace.output.view());
    if !value.is_finite() {
        return Err(Error::NonFinite {
            layer: net.layers.len() - 1,
        });
    }
    let (grads, _) = net.backward(&trace, d_out.view())?;
    Ok((value, grads))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub first_moment: GradBundle,
    pub second_moment: GradBundle,
    pub step_count: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_stab: f64,
}

impl AdamState {
    pub const DEFAULT_LR: f64 = 3e-4;

    pub fn new(net: &DenseNet, lr: f64) -> Self {
        Self {
            first_moment: GradBundle::zeros_like(net),
            second_moment: GradBundle::zeros_like(net),
            step_count: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps_stab: 1e-8,
        }
    }
}

/// One bias-corrected Adam update. Consumes and returns the network and the
/// optimizer state so callers never observe a half-updated value.
pub fn adam_step(
    mut net: DenseNet,
    grads: &GradBundle,
    mut state: AdamState,
) -> Result<(DenseNet, AdamState)> {
    adam_update(&mut net, grads, &mut state)?;
    Ok((net, state))
}

/// In-place form of [`adam_step`] used inside the training loop.
pub fn adam_update(net: &mut DenseNet, grads: &GradBundle, state: &mut AdamState) -> Result<()> {
    if !grads.matches(net) || !state.first_moment.matches(net) || !state.second_moment.matches(net)
    {
        return Err(shape_err("adam: gradient/moment shapes do not match the network"));
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2, eps, lr) = (state.beta1, state.beta2, state.eps_stab, state.lr);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);

    let update = |p: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    };

    for (k, layer) in net.layers.iter_mut().enumerate() {
        let g = &grads.layers[k];
        let m = &mut state.first_moment.layers[k];
        let v = &mut state.second_moment.layers[k];
        ndarray::Zip::from(&mut layer.weight)
            .and(&mut m.weight)
            .and(&mut v.weight)
            .and(&g.weight)
            .for_each(|p, m, v, &g| update(p, m, v, g));
        ndarray::Zip::from(&mut layer.bias)
            .and(&mut m.bias)
            .and(&mut v.bias)
            .and(&g.bias)
            .for_each(|p, m, v, &g| update(p, m, v, g));
        if !layer.is_finite() {
            return Err(Error::NonFinite { layer: k });
        }
    }
    Ok(())
}

const WEIGHTS_MAGIC: &[u8; 4] = b"FANW";
const WEIGHTS_VERSION: u32 = 1;

/// Serialize as `FANW | u32 version | u32 layers | per layer (u32 rows,
/// u32 cols, rows*cols f64 row-major weights, rows f64 biases)`, little-endian.
/// The activation is not stored.
pub fn write_net<W: Write>(mut w: W, net: &DenseNet) -> Result<()> {
    w.write_all(WEIGHTS_MAGIC)?;
    w.write_all(&WEIGHTS_VERSION.to_le_bytes())?;
    w.write_all(&(net.layers.len() as u32).to_le_bytes())?;
    for layer in &net.layers {
        w.write_all(&(layer.outputs() as u32).to_le_bytes())?;
        w.write_all(&(layer.inputs() as u32).to_le_bytes())?;
        for v in layer.weight.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in layer.bias.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_net<R: Read>(mut r: R, activation: Activation) -> Result<DenseNet> {
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic")?;
    if &magic != WEIGHTS_MAGIC {
        return Err(Error::Format(format!("bad weights magic {magic:?}")));
    }
    let version = read_u32(&mut r, "version")?;
    if version != WEIGHTS_VERSION {
        return Err(Error::Format(format!("unsupported weights version {version}")));
    }
    let count = read_u32(&mut r, "layer count")? as usize;
    let mut layers = Vec::with_capacity(count.min(64));
    for k in 0..count {
        let rows = read_u32(&mut r, "rows")? as usize;
        let cols = read_u32(&mut r, "cols")? as usize;
        let mut weights = vec![0.0; rows * cols];
        for v in weights.iter_mut() {
            *v = read_f64(&mut r, "weights")?;
        }
        let mut bias = vec![0.0; rows];
        for v in bias.iter_mut() {
            *v = read_f64(&mut r, "biases")?;
        }
        let weight = Array2::from_shape_vec((rows, cols), weights)
            .map_err(|e| Error::Format(format!("layer {k}: {e}")))?;
        layers.push(Layer {
            weight,
            bias: Array1::from(bias),
        });
    }
    DenseNet::from_layers(layers, activation).map_err(|e| Error::Format(e.to_string()))
}

pub(crate) fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Format(format!("truncated file while reading {what}"))
        } else {
            Error::Io(e)
        }
    })
}

pub(crate) fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R, what: &str) -> Result<f64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, what)?;
    Ok(f64::from_le_bytes(b))
}
