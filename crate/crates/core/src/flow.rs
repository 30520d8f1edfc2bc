//! Behavior flow policy `v(s, t, a_t)`: conditional flow matching and
//! Euler sampling of its flow map.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::nn::{Activation, DenseNet, GradBundle};
use crate::rng::{normal_matrix, normal_vec};

/// Anything that can be integrated as a velocity field over actions.
pub trait VelocityField {
    fn action_dim(&self) -> usize;
    fn velocity(&self, state: &[f64], t: f64, x: &[f64]) -> Result<Vec<f64>>;
}

/// Velocity network over the concatenated input `[s, t, a_t]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowPolicyNet {
    pub net: DenseNet,
    state_dim: usize,
    action_dim: usize,
}

impl FlowPolicyNet {
    pub fn new<R: Rng + ?Sized>(
        state_dim: usize,
        action_dim: usize,
        hidden: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        let sizes = layer_sizes(state_dim + 1 + action_dim, hidden, action_dim);
        let net = DenseNet::new(&sizes, Activation::Gelu, rng)?;
        Self::from_net(net, state_dim, action_dim)
    }

    pub fn from_net(net: DenseNet, state_dim: usize, action_dim: usize) -> Result<Self> {
        if net.input_dim() != state_dim + 1 + action_dim || net.output_dim() != action_dim {
            return Err(shape_err(format!(
                "flow net must map {} -> {}, got {} -> {}",
                state_dim + 1 + action_dim,
                action_dim,
                net.input_dim(),
                net.output_dim()
            )));
        }
        Ok(Self {
            net,
            state_dim,
            action_dim,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    /// Row-wise `[s | t | x]`.
    pub fn input(
        &self,
        states: ArrayView2<f64>,
        times: ArrayView1<f64>,
        xs: ArrayView2<f64>,
    ) -> Result<Array2<f64>> {
        let n = states.nrows();
        if states.ncols() != self.state_dim
            || xs.ncols() != self.action_dim
            || xs.nrows() != n
            || times.len() != n
        {
            return Err(shape_err("flow input: states/times/actions do not line up"));
        }
        let mut input = Array2::zeros((n, self.state_dim + 1 + self.action_dim));
        input.slice_mut(s![.., ..self.state_dim]).assign(&states);
        input.column_mut(self.state_dim).assign(&times);
        input.slice_mut(s![.., self.state_dim + 1..]).assign(&xs);
        Ok(input)
    }

    pub fn velocity_batch(
        &self,
        states: ArrayView2<f64>,
        times: ArrayView1<f64>,
        xs: ArrayView2<f64>,
    ) -> Result<Array2<f64>> {
        self.net.forward_batch(self.input(states, times, xs)?.view())
    }

    /// Columns of the network input that carry `a_t`.
    pub(crate) fn action_columns(&self) -> std::ops::Range<usize> {
        self.state_dim + 1..self.state_dim + 1 + self.action_dim
    }
}

impl VelocityField for FlowPolicyNet {
    fn action_dim(&self) -> usize {
        self.action_dim
    }

    fn velocity(&self, state: &[f64], t: f64, x: &[f64]) -> Result<Vec<f64>> {
        if state.len() != self.state_dim || x.len() != self.action_dim {
            return Err(shape_err("flow velocity: bad state or action length"));
        }
        let mut input = Vec::with_capacity(self.net.input_dim());
        input.extend_from_slice(state);
        input.push(t);
        input.extend_from_slice(x);
        self.net.forward(&input)
    }
}

pub(crate) fn layer_sizes(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut sizes = Vec::with_capacity(hidden.len() + 2);
    sizes.push(input);
    sizes.extend_from_slice(hidden);
    sizes.push(output);
    sizes
}

/// Rows `(s, a, t, eps)` with the straight-line interpolant
/// `a_t = (1 - t) eps + t a`.
#[derive(Clone, Debug)]
pub struct FlowSampleBatch {
    pub states: Array2<f64>,
    pub actions: Array2<f64>,
    pub times: Array1<f64>,
    pub noises: Array2<f64>,
    pub interpolants: Array2<f64>,
}

impl FlowSampleBatch {
    pub fn new(
        states: Array2<f64>,
        actions: Array2<f64>,
        times: Array1<f64>,
        noises: Array2<f64>,
    ) -> Result<Self> {
        let n = states.nrows();
        if n == 0 {
            return Err(Error::EmptyBatch);
        }
        if actions.nrows() != n || times.len() != n || noises.dim() != actions.dim() {
            return Err(shape_err("flow batch: rows or action widths disagree"));
        }
        let interpolants = interpolate(noises.view(), actions.view(), times.view());
        Ok(Self {
            states,
            actions,
            times,
            noises,
            interpolants,
        })
    }

    /// Draws `t ~ U[0, 1]` and `eps ~ N(0, I)` for each row.
    pub fn sample<R: Rng + ?Sized>(
        states: ArrayView2<f64>,
        actions: ArrayView2<f64>,
        rng: &mut R,
    ) -> Result<Self> {
        let n = states.nrows();
        let noises = normal_matrix(rng, n, actions.ncols());
        let times = Array1::from_shape_simple_fn(n, || rng.random::<f64>());
        Self::new(states.to_owned(), actions.to_owned(), times, noises)
    }

    pub fn len(&self) -> usize {
        self.states.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Conditional velocity target `a - eps`.
    pub fn targets(&self) -> Array2<f64> {
        &self.actions - &self.noises
    }
}

/// Row-wise `(1 - t) eps + t a`.
pub fn interpolate(
    noises: ArrayView2<f64>,
    actions: ArrayView2<f64>,
    times: ArrayView1<f64>,
) -> Array2<f64> {
    let mut out = noises.to_owned();
    for ((mut row, a), &t) in out
        .axis_iter_mut(Axis(0))
        .zip(actions.axis_iter(Axis(0)))
        .zip(times.iter())
    {
        row.zip_mut_with(&a, |e, &a| *e = (1.0 - t) * *e + t * a);
    }
    out
}

/// Mean over rows of `||v(s, t, a_t) - (a - eps)||^2`.
pub fn cfm_loss(v: &FlowPolicyNet, batch: &FlowSampleBatch) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let pred = v.velocity_batch(
        batch.states.view(),
        batch.times.view(),
        batch.interpolants.view(),
    )?;
    let resid = pred - batch.targets();
    Ok(resid.mapv(|r| r * r).sum() / batch.len() as f64)
}

pub fn cfm_loss_and_grad(v: &FlowPolicyNet, batch: &FlowSampleBatch) -> Result<(f64, GradBundle)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let input = v.input(
        batch.states.view(),
        batch.times.view(),
        batch.interpolants.view(),
    )?;
    let trace = v.net.trace(input.view())?;
    let resid = trace.output() - &batch.targets();
    let n = batch.len() as f64;
    let loss = resid.mapv(|r| r * r).sum() / n;
    let d_out = resid * (2.0 / n);
    let (grads, _) = v.net.backward(&trace, d_out.view())?;
    Ok((loss, grads))
}

/// Forward Euler on `dx/dt = v(s, t, x)` from `x_0 = z` over `[0, 1]`.
///
/// Step `k` evaluates the field at `t_k = k / n` and sets
/// `x_{k+1} = x_k + (1 / n) * v(s, t_k, x_k)`. Returns `x_n`.
pub fn euler_integrate<V: VelocityField + ?Sized>(
    v: &V,
    state: &[f64],
    z: &[f64],
    n_steps: usize,
) -> Result<Vec<f64>> {
    if n_steps == 0 {
        return Err(Error::InvalidParam("n_steps must be at least 1".into()));
    }
    if z.len() != v.action_dim() {
        return Err(shape_err("euler: noise length differs from action dim"));
    }
    let dt = 1.0 / n_steps as f64;
    let mut x = z.to_vec();
    for k in 0..n_steps {
        let t = k as f64 / n_steps as f64;
        let vel = v.velocity(state, t, &x)?;
        for (xi, vi) in x.iter_mut().zip(&vel) {
            *xi += dt * vi;
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { layer: k });
        }
    }
    Ok(x)
}

/// Batched [`euler_integrate`] for a network field: row `i` starts at
/// `z[i]` and is conditioned on `states[i]`. A non-finite state reports the
/// Euler step index as `layer`.
pub fn euler_integrate_batch(
    v: &FlowPolicyNet,
    states: ArrayView2<f64>,
    z: ArrayView2<f64>,
    n_steps: usize,
) -> Result<Array2<f64>> {
    if n_steps == 0 {
        return Err(Error::InvalidParam("n_steps must be at least 1".into()));
    }
    let dt = 1.0 / n_steps as f64;
    let mut x = z.to_owned();
    let mut times = Array1::zeros(states.nrows());
    for k in 0..n_steps {
        times.fill(k as f64 / n_steps as f64);
        let vel = v.velocity_batch(states, times.view(), x.view())?;
        x.scaled_add(dt, &vel);
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { layer: k });
        }
    }
    Ok(x)
}

/// Draw `z ~ N(0, I)` and push it through the Euler flow map.
pub fn sample_behavior_action<V: VelocityField + ?Sized, R: Rng + ?Sized>(
    v: &V,
    state: &[f64],
    n_steps: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let z = normal_vec(rng, v.action_dim());
    euler_integrate(v, state, &z, n_steps)
}
