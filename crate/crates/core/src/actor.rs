//! One-step policy `pi(s, eps)`, the flow-anchoring regularizer, value
//! maximization and the combined policy update.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;

use crate::agent::FanNets;
use crate::config::{FanConfig, Squash, ValueMax, Variant};
use crate::critic::{ExpectileEnsemble, NoiseCriticEnsemble};
use crate::data::Batch;
use crate::error::{shape_err, tag_loss, Error, Result};
use crate::flow::{
    cfm_loss_and_grad, euler_integrate_batch, interpolate, layer_sizes, FlowPolicyNet,
    FlowSampleBatch,
};
use crate::nn::{adam_update, Activation, DenseNet, GradBundle};
use crate::rng::{normal_matrix, uniform_unit};

/// Noise-to-action network over `[s | eps]`.
///
/// With `Squash::Clamp` the raw output is clamped into the action box to act,
/// while the anchoring terms see the raw output. With `Squash::Tanh` the
/// output is `low + (high - low) * (tanh(x) + 1) / 2` and used everywhere.
#[derive(Clone, Debug, PartialEq)]
pub struct OneStepPolicyNet {
    pub net: DenseNet,
    pub action_low: Vec<f64>,
    pub action_high: Vec<f64>,
    pub squash: Squash,
    state_dim: usize,
    action_dim: usize,
}

impl OneStepPolicyNet {
    pub fn new<R: Rng + ?Sized>(
        state_dim: usize,
        action_dim: usize,
        hidden: &[usize],
        squash: Squash,
        rng: &mut R,
    ) -> Result<Self> {
        let sizes = layer_sizes(state_dim + action_dim, hidden, action_dim);
        let net = DenseNet::new(&sizes, Activation::Gelu, rng)?;
        Self::from_net(net, state_dim, action_dim, squash)
    }

    /// Unit action box `[-1, 1]^d`.
    pub fn from_net(
        net: DenseNet,
        state_dim: usize,
        action_dim: usize,
        squash: Squash,
    ) -> Result<Self> {
        if net.input_dim() != state_dim + action_dim || net.output_dim() != action_dim {
            return Err(shape_err(format!(
                "policy net must map {} -> {}, got {} -> {}",
                state_dim + action_dim,
                action_dim,
                net.input_dim(),
                net.output_dim()
            )));
        }
        Ok(Self {
            net,
            action_low: vec![-1.0; action_dim],
            action_high: vec![1.0; action_dim],
            squash,
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

    pub fn input(&self, states: ArrayView2<f64>, noises: ArrayView2<f64>) -> Result<Array2<f64>> {
        let n = states.nrows();
        if states.ncols() != self.state_dim
            || noises.ncols() != self.action_dim
            || noises.nrows() != n
        {
            return Err(shape_err("policy input: states/noises do not line up"));
        }
        let mut input = Array2::zeros((n, self.state_dim + self.action_dim));
        input.slice_mut(s![.., ..self.state_dim]).assign(&states);
        input.slice_mut(s![.., self.state_dim..]).assign(&noises);
        Ok(input)
    }

    /// Unbounded network output.
    pub fn raw(&self, states: ArrayView2<f64>, noises: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.net.forward_batch(self.input(states, noises)?.view())
    }

    /// Bounded actions from raw outputs.
    pub fn bound(&self, raw: &Array2<f64>) -> Array2<f64> {
        let mut out = raw.clone();
        for mut row in out.axis_iter_mut(Axis(0)) {
            for (j, x) in row.iter_mut().enumerate() {
                let (lo, hi) = (self.action_low[j], self.action_high[j]);
                *x = match self.squash {
                    Squash::Clamp => x.clamp(lo, hi),
                    Squash::Tanh => lo + (hi - lo) * 0.5 * (x.tanh() + 1.0),
                };
            }
        }
        out
    }

    /// Chain rule through [`Self::bound`]: maps a gradient with respect to
    /// the bounded action to one with respect to the raw output. Clamping
    /// passes gradients only strictly inside the box.
    pub fn bound_grad(&self, raw: &Array2<f64>, d_bounded: &Array2<f64>) -> Array2<f64> {
        let mut out = d_bounded.clone();
        for ((i, j), d) in out.indexed_iter_mut() {
            let x = raw[[i, j]];
            let (lo, hi) = (self.action_low[j], self.action_high[j]);
            *d *= match self.squash {
                Squash::Clamp => {
                    if x > lo && x < hi {
                        1.0
                    } else {
                        0.0
                    }
                }
                Squash::Tanh => (hi - lo) * 0.5 * (1.0 - x.tanh().powi(2)),
            };
        }
        out
    }

    /// The action that the anchoring terms compare against the flow.
    pub fn anchor(&self, raw: &Array2<f64>) -> Array2<f64> {
        match self.squash {
            Squash::Clamp => raw.clone(),
            Squash::Tanh => self.bound(raw),
        }
    }

    pub fn anchor_grad(&self, raw: &Array2<f64>, d_anchor: &Array2<f64>) -> Array2<f64> {
        match self.squash {
            Squash::Clamp => d_anchor.clone(),
            Squash::Tanh => self.bound_grad(raw, d_anchor),
        }
    }

    pub fn actions(&self, states: ArrayView2<f64>, noises: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.bound(&self.raw(states, noises)?))
    }

    pub fn anchor_actions(
        &self,
        states: ArrayView2<f64>,
        noises: ArrayView2<f64>,
    ) -> Result<Array2<f64>> {
        Ok(self.anchor(&self.raw(states, noises)?))
    }
}

/// Single bounded action `pi(s, eps)`.
pub fn sample_action(pi: &OneStepPolicyNet, state: &[f64], eps: &[f64]) -> Result<Vec<f64>> {
    if state.len() != pi.state_dim || eps.len() != pi.action_dim {
        return Err(shape_err("sample_action: bad state or noise length"));
    }
    let s = ArrayView2::from_shape((1, state.len()), state).map_err(|e| shape_err(e.to_string()))?;
    let e = ArrayView2::from_shape((1, eps.len()), eps).map_err(|e| shape_err(e.to_string()))?;
    Ok(pi.actions(s, e)?.row(0).to_vec())
}

/// Per-row `||(p - eps) - v(s, t, (1 - t) eps + t p)||^2` with `p` the
/// anchoring action derived from `raw`.
pub(crate) fn anchor_residual_sq(
    pi: &OneStepPolicyNet,
    v: &FlowPolicyNet,
    states: ArrayView2<f64>,
    noises: ArrayView2<f64>,
    times: ArrayView1<f64>,
    raw: &Array2<f64>,
) -> Result<Array1<f64>> {
    let p = pi.anchor(raw);
    let x = interpolate(noises, p.view(), times);
    let vel = v.velocity_batch(states, times, x.view())?;
    let resid = &p - &noises - vel;
    Ok(resid.mapv(|r| r * r).sum_axis(Axis(1)))
}

/// Mean anchoring loss and its gradient with respect to the anchoring
/// actions `p`. The flow network is held fixed:
/// `dL/dp = (2/B) r - t * J_x^T ((2/B) r)`.
pub(crate) fn anchor_loss_and_grad(
    v: &FlowPolicyNet,
    states: ArrayView2<f64>,
    noises: ArrayView2<f64>,
    times: ArrayView1<f64>,
    p: &Array2<f64>,
) -> Result<(f64, Array2<f64>)> {
    let n = states.nrows();
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    let x = interpolate(noises, p.view(), times);
    let input = v.input(states, times, x.view())?;
    let trace = v.net.trace(input.view())?;
    let resid = p - &noises - trace.output();
    let loss = resid.mapv(|r| r * r).sum() / n as f64;
    let g = resid * (2.0 / n as f64);
    let d_in = v.net.input_grad(&trace, g.view())?;
    let mut d_p = g;
    let d_x = d_in.slice(s![.., v.action_columns()]);
    for ((mut row, dx), &t) in d_p.axis_iter_mut(Axis(0)).zip(d_x.axis_iter(Axis(0))).zip(times) {
        row.scaled_add(-t, &dx);
    }
    Ok((loss, d_p))
}

/// Mean over rows of `||(pi(s, eps) - eps) - v(s, t, a_t)||^2` with
/// `a_t = (1 - t) eps + t pi(s, eps)`.
pub fn actor_anchor_loss(
    pi: &OneStepPolicyNet,
    v: &FlowPolicyNet,
    states: ArrayView2<f64>,
    noises: ArrayView2<f64>,
    times: ArrayView1<f64>,
) -> Result<f64> {
    if states.nrows() == 0 {
        return Err(Error::EmptyBatch);
    }
    let raw = pi.raw(states, noises)?;
    Ok(anchor_residual_sq(pi, v, states, noises, times, &raw)?.mean().unwrap_or(0.0))
}

/// Value-maximization loss at fixed actions and its gradient with respect
/// to those actions. The critic noise is ignored by a plain critic.
pub(crate) fn value_max_and_grad(
    q: &NoiseCriticEnsemble,
    z: &ExpectileEnsemble,
    states: ArrayView2<f64>,
    actions: ArrayView2<f64>,
    value_noise: ArrayView2<f64>,
    value_max: ValueMax,
) -> Result<(f64, Array2<f64>)> {
    let n = states.nrows();
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    let d_value = Array1::from_elem(n, -1.0 / n as f64);
    let mut loss = 0.0;
    let mut d_actions = Array2::zeros(actions.dim());
    if value_max != ValueMax::ZOnly {
        let noise = (q.noise_dim() > 0).then_some(value_noise);
        let (val, g) = q.value_and_action_grad(states, actions, noise, d_value.view())?;
        loss -= val.sum() / n as f64;
        d_actions += &g;
    }
    if value_max != ValueMax::QOnly {
        let (val, g) = z.value_and_action_grad(states, actions, None, d_value.view())?;
        loss -= val.sum() / n as f64;
        d_actions += &g;
    }
    Ok((loss, d_actions))
}

/// Mean over rows of `-Q(s, a, eps_v) - Z(s, a)` with `a = pi(s, eps_p)`;
/// `value_max` drops either term.
pub fn value_max_loss(
    pi: &OneStepPolicyNet,
    q: &NoiseCriticEnsemble,
    z: &ExpectileEnsemble,
    states: ArrayView2<f64>,
    policy_noise: ArrayView2<f64>,
    value_noise: ArrayView2<f64>,
    value_max: ValueMax,
) -> Result<f64> {
    let actions = pi.actions(states, policy_noise)?;
    Ok(value_max_and_grad(q, z, states, actions.view(), value_noise, value_max)?.0)
}

/// Noise draws for one policy update.
#[derive(Clone, Debug)]
pub struct ActorNoise {
    /// Source noise and times for the flow-matching loss.
    pub flow_noise: Array2<f64>,
    pub flow_times: Array1<f64>,
    /// `eps_p`, also the source point of the anchoring interpolant.
    pub policy_noise: Array2<f64>,
    pub anchor_times: Array1<f64>,
    /// `eps_v` fed to the critic inside the value term.
    pub value_noise: Array2<f64>,
}

impl ActorNoise {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, rows: usize, action_dim: usize) -> Self {
        Self {
            flow_noise: normal_matrix(rng, rows, action_dim),
            flow_times: Array1::from(uniform_unit(rng, rows)),
            policy_noise: normal_matrix(rng, rows, action_dim),
            anchor_times: Array1::from(uniform_unit(rng, rows)),
            value_noise: normal_matrix(rng, rows, action_dim),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ActorLosses {
    pub flow: f64,
    /// Unscaled behavior regularizer (the variant's replacement when not FAN).
    pub anchor: f64,
    pub value: f64,
}

/// How the policy is trained.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ActorObjective {
    pub variant: Variant,
    pub alpha1: f64,
    pub value_max: ValueMax,
    /// When false only the regularizer is minimized (behavior cloning).
    pub maximize_value: bool,
    pub nfql_flow_steps: usize,
}

impl ActorObjective {
    pub fn from_config(cfg: &FanConfig) -> Self {
        Self {
            variant: cfg.variant,
            alpha1: cfg.alpha1,
            // a plain critic has no expectile head to maximize
            value_max: if cfg.variant == Variant::Faql {
                ValueMax::QOnly
            } else {
                cfg.value_max
            },
            maximize_value: true,
            nfql_flow_steps: cfg.nfql_flow_steps,
        }
    }

    /// Policy trained on the regularizer alone with unit weight.
    pub fn behavior_cloning(cfg: &FanConfig) -> Self {
        Self {
            alpha1: 1.0,
            maximize_value: false,
            ..Self::from_config(cfg)
        }
    }
}

/// Policy objective `alpha1 * regularizer + value term` and its gradient
/// with respect to the policy parameters. `data_actions` is only read by the
/// behavior-cloning regularizer.
#[derive(Clone, Debug)]
pub struct PolicyGrad {
    pub anchor: f64,
    pub value: f64,
    pub total: f64,
    pub grads: GradBundle,
}

#[allow(clippy::too_many_arguments)]
pub fn policy_loss_and_grad(
    pi: &OneStepPolicyNet,
    v: &FlowPolicyNet,
    q: &NoiseCriticEnsemble,
    z: &ExpectileEnsemble,
    states: ArrayView2<f64>,
    data_actions: ArrayView2<f64>,
    objective: &ActorObjective,
    noise: &ActorNoise,
) -> Result<PolicyGrad> {
    if states.nrows() == 0 {
        return Err(Error::EmptyBatch);
    }
    let pi_input = pi.input(states, noise.policy_noise.view())?;
    let trace = pi.net.trace(pi_input.view()).map_err(tag_loss("L_B"))?;
    let raw = trace.output().clone();
    let p = pi.anchor(&raw);

    let (reg_loss, d_p) = match objective.variant {
        Variant::Fan | Variant::Faql => anchor_loss_and_grad(
            v,
            states,
            noise.policy_noise.view(),
            noise.anchor_times.view(),
            &p,
        )
        .map_err(tag_loss("L_B"))?,
        Variant::Nbrac => squared_distance_and_grad(&p, &data_actions.to_owned()),
        Variant::Nfql => {
            let target = euler_integrate_batch(
                v,
                states,
                noise.policy_noise.view(),
                objective.nfql_flow_steps,
            )
            .map_err(tag_loss("L_B"))?;
            squared_distance_and_grad(&p, &target)
        }
    };
    if !reg_loss.is_finite() {
        return Err(Error::NonFiniteLoss { loss: "L_B" });
    }
    let mut d_raw = pi.anchor_grad(&raw, &(d_p * objective.alpha1));

    let mut value_loss = 0.0;
    if objective.maximize_value {
        let actions = pi.bound(&raw);
        let (loss, d_a) = value_max_and_grad(
            q,
            z,
            states,
            actions.view(),
            noise.value_noise.view(),
            objective.value_max,
        )
        .map_err(tag_loss("L_P"))?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { loss: "L_P" });
        }
        value_loss = loss;
        d_raw += &pi.bound_grad(&raw, &d_a);
    }
    let (grads, _) = pi.net.backward(&trace, d_raw.view()).map_err(tag_loss("L_P"))?;
    Ok(PolicyGrad {
        anchor: reg_loss,
        value: value_loss,
        total: objective.alpha1 * reg_loss + value_loss,
        grads,
    })
}

/// One Adam step on the flow net from the flow-matching loss, and one on the
/// policy from `alpha1 * regularizer + value term`. All losses are evaluated
/// at the pre-update parameters.
pub fn actor_update(
    nets: &mut FanNets,
    batch: &Batch,
    objective: &ActorObjective,
    noise: &ActorNoise,
) -> Result<ActorLosses> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let flow_batch = FlowSampleBatch::new(
        batch.states.clone(),
        batch.actions.clone(),
        noise.flow_times.clone(),
        noise.flow_noise.clone(),
    )?;
    let (flow_loss, flow_grads) = cfm_loss_and_grad(&nets.v, &flow_batch).map_err(tag_loss("L_F"))?;
    if !flow_loss.is_finite() {
        return Err(Error::NonFiniteLoss { loss: "L_F" });
    }
    let policy = policy_loss_and_grad(
        &nets.pi,
        &nets.v,
        &nets.q,
        &nets.z,
        batch.states.view(),
        batch.actions.view(),
        objective,
        noise,
    )?;
    adam_update(&mut nets.v.net, &flow_grads, &mut nets.opt_v).map_err(tag_loss("L_F"))?;
    adam_update(&mut nets.pi.net, &policy.grads, &mut nets.opt_pi).map_err(tag_loss("L_B"))?;
    Ok(ActorLosses {
        flow: flow_loss,
        anchor: policy.anchor,
        value: policy.value,
    })
}

/// Mean over rows of `||p - target||^2` and its gradient in `p`.
fn squared_distance_and_grad(p: &Array2<f64>, target: &Array2<f64>) -> (f64, Array2<f64>) {
    let n = p.nrows() as f64;
    let diff = p - target;
    let loss = diff.mapv(|d| d * d).sum() / n;
    (loss, diff * (2.0 / n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Aggregation;
    use crate::critic::Ensemble;
    use crate::nn::Layer;
    use crate::rng::Streams;
    use ndarray::array;

    fn linear(weight: Array2<f64>, bias: Array1<f64>) -> DenseNet {
        DenseNet::from_layers(vec![Layer { weight, bias }], Activation::Identity).unwrap()
    }

    /// Policy `pi(s, eps) = eps` on a 1-D state and 2-D action.
    fn echo_policy() -> OneStepPolicyNet {
        let w = array![[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        OneStepPolicyNet::from_net(linear(w, Array1::zeros(2)), 1, 2, Squash::Clamp).unwrap()
    }

    fn constant_flow(c: [f64; 2]) -> FlowPolicyNet {
        FlowPolicyNet::from_net(linear(Array2::zeros((2, 4)), array![c[0], c[1]]), 1, 2).unwrap()
    }

    fn constant_value(inputs: usize, c: f64) -> Ensemble {
        let net = linear(Array2::zeros((1, inputs)), array![c]);
        Ensemble::from_members(vec![net], Aggregation::Mean, 1, 1, inputs - 2).unwrap()
    }

    #[test]
    fn clamp_and_zero_policy() {
        let net = linear(array![[0.0, 0.0]], array![1.7]);
        let pi = OneStepPolicyNet::from_net(net, 1, 1, Squash::Clamp).unwrap();
        assert_eq!(sample_action(&pi, &[0.3], &[0.2]).unwrap(), vec![1.0]);
        let zero = OneStepPolicyNet::from_net(DenseNet::zeros(&[3, 4, 2], Activation::Gelu).unwrap(), 1, 2, Squash::Clamp).unwrap();
        assert_eq!(sample_action(&zero, &[0.5], &[1.0, -1.0]).unwrap(), vec![0.0, 0.0]);
        assert!(sample_action(&zero, &[0.5], &[1.0]).is_err());
    }

    #[test]
    fn tanh_squash_stays_inside() {
        let net = linear(array![[0.0, 0.0]], array![30.0]);
        let pi = OneStepPolicyNet::from_net(net, 1, 1, Squash::Tanh).unwrap();
        let a = sample_action(&pi, &[0.0], &[0.0]).unwrap()[0];
        assert!(a <= 1.0 && a > 0.99);
    }

    #[test]
    fn anchor_loss_examples() {
        let pi = echo_policy();
        let v = constant_flow([1.0, 0.0]);
        let s = array![[0.2], [-0.4]];
        let e = array![[0.3, -0.1], [0.5, 0.5]];
        let t = array![0.25, 0.75];
        let loss = actor_anchor_loss(&pi, &v, s.view(), e.view(), t.view()).unwrap();
        assert!((loss - 1.0).abs() < 1e-15);

        // policy that matches the constant field everywhere: pi = eps + c
        let w = array![[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let shifted =
            OneStepPolicyNet::from_net(linear(w, array![1.0, 0.0]), 1, 2, Squash::Clamp).unwrap();
        let loss = actor_anchor_loss(&shifted, &v, s.view(), e.view(), t.view()).unwrap();
        assert_eq!(loss, 0.0);

        let empty = Array2::<f64>::zeros((0, 1));
        let empty_e = Array2::<f64>::zeros((0, 2));
        let empty_t = Array1::<f64>::zeros(0);
        assert!(matches!(
            actor_anchor_loss(&pi, &v, empty.view(), empty_e.view(), empty_t.view()),
            Err(Error::EmptyBatch)
        ));
    }

    #[test]
    fn anchor_loss_grad_matches_finite_differences() {
        let mut rng = Streams::new(2).stream("anchor", 0);
        let v = FlowPolicyNet::new(2, 2, &[8, 8], &mut rng).unwrap();
        let s = normal_matrix(&mut rng, 4, 2);
        let e = normal_matrix(&mut rng, 4, 2);
        let t = Array1::from(uniform_unit(&mut rng, 4));
        let p = normal_matrix(&mut rng, 4, 2);
        let (_, g) = anchor_loss_and_grad(&v, s.view(), e.view(), t.view(), &p).unwrap();
        let f = |p: &Array2<f64>| anchor_loss_and_grad(&v, s.view(), e.view(), t.view(), p).unwrap().0;
        let h = 1e-6;
        for i in 0..4 {
            for j in 0..2 {
                let mut a = p.clone();
                a[[i, j]] += h;
                let mut b = p.clone();
                b[[i, j]] -= h;
                let fd = (f(&a) - f(&b)) / (2.0 * h);
                assert!((fd - g[[i, j]]).abs() < 1e-6 * (1.0 + fd.abs()));
            }
        }
    }

    #[test]
    fn value_max_examples() {
        let net = linear(array![[0.0, 0.0]], array![0.5]);
        let pi = OneStepPolicyNet::from_net(net, 1, 1, Squash::Clamp).unwrap();
        let s = array![[0.1]];
        let e = array![[0.0]];
        let q0 = constant_value(3, 0.0);
        let z0 = constant_value(2, 0.0);
        let loss = value_max_loss(&pi, &q0, &z0, s.view(), e.view(), e.view(), ValueMax::Both);
        assert_eq!(loss.unwrap(), 0.0);
        let q1 = constant_value(3, 1.0);
        let z2 = constant_value(2, 2.0);
        let both = value_max_loss(&pi, &q1, &z2, s.view(), e.view(), e.view(), ValueMax::Both);
        assert_eq!(both.unwrap(), -3.0);
        let z_only = value_max_loss(&pi, &q1, &z2, s.view(), e.view(), e.view(), ValueMax::ZOnly);
        assert_eq!(z_only.unwrap(), -2.0);
        let q_only = value_max_loss(&pi, &q1, &z2, s.view(), e.view(), e.view(), ValueMax::QOnly);
        assert_eq!(q_only.unwrap(), -1.0);
    }
}
