//! Critic side: noise-conditioned Q ensemble with a Polyak target copy, the
//! upper-expectile head, and their losses.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;

use crate::actor::{anchor_residual_sq, OneStepPolicyNet};
use crate::agent::FanNets;
use crate::config::{Aggregation, FanConfig, Variant};
use crate::data::Batch;
use crate::error::{shape_err, tag_loss, Error, Result};
use crate::flow::{layer_sizes, FlowPolicyNet};
use crate::nn::{adam_update, Activation, DenseNet, GradBundle, Trace};
use crate::rng::{normal_matrix, uniform_unit};

/// Scalar-output networks over `[s | a]` or `[s | a | eps]`, reduced by a
/// fixed aggregation in member order.
#[derive(Clone, Debug, PartialEq)]
pub struct Ensemble {
    pub members: Vec<DenseNet>,
    pub aggregation: Aggregation,
    state_dim: usize,
    action_dim: usize,
    noise_dim: usize,
}

/// `Q(s, a, eps)`; a plain `Q(s, a)` when built with `noise_dim = 0`.
pub type NoiseCriticEnsemble = Ensemble;
/// `Z(s, a)`.
pub type ExpectileEnsemble = Ensemble;

impl Ensemble {
    pub fn new<R: Rng + ?Sized>(
        state_dim: usize,
        action_dim: usize,
        noise_dim: usize,
        hidden: &[usize],
        count: usize,
        aggregation: Aggregation,
        rng: &mut R,
    ) -> Result<Self> {
        let sizes = layer_sizes(state_dim + action_dim + noise_dim, hidden, 1);
        let members = (0..count)
            .map(|_| DenseNet::new(&sizes, Activation::Gelu, rng))
            .collect::<Result<Vec<_>>>()?;
        Self::from_members(members, aggregation, state_dim, action_dim, noise_dim)
    }

    /// Noise-conditioned critic, input `[s | a | eps]` with `eps` of size `action_dim`.
    pub fn noise_critic<R: Rng + ?Sized>(
        state_dim: usize,
        action_dim: usize,
        hidden: &[usize],
        count: usize,
        aggregation: Aggregation,
        rng: &mut R,
    ) -> Result<Self> {
        Self::new(state_dim, action_dim, action_dim, hidden, count, aggregation, rng)
    }

    pub fn expectile<R: Rng + ?Sized>(
        state_dim: usize,
        action_dim: usize,
        hidden: &[usize],
        count: usize,
        aggregation: Aggregation,
        rng: &mut R,
    ) -> Result<Self> {
        Self::new(state_dim, action_dim, 0, hidden, count, aggregation, rng)
    }

    pub fn from_members(
        members: Vec<DenseNet>,
        aggregation: Aggregation,
        state_dim: usize,
        action_dim: usize,
        noise_dim: usize,
    ) -> Result<Self> {
        let Some(first) = members.first() else {
            return Err(Error::InvalidParam("ensemble needs at least one member".into()));
        };
        if first.input_dim() != state_dim + action_dim + noise_dim || first.output_dim() != 1 {
            return Err(shape_err(format!(
                "ensemble member must map {} -> 1, got {} -> {}",
                state_dim + action_dim + noise_dim,
                first.input_dim(),
                first.output_dim()
            )));
        }
        if members.iter().any(|m| !m.same_shape(first)) {
            return Err(shape_err("ensemble members differ in architecture"));
        }
        Ok(Self {
            members,
            aggregation,
            state_dim,
            action_dim,
            noise_dim,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub(crate) fn action_columns(&self) -> std::ops::Range<usize> {
        self.state_dim..self.state_dim + self.action_dim
    }

    /// Row-wise `[s | a | eps]`. `noises` is ignored when `noise_dim == 0`.
    pub fn input(
        &self,
        states: ArrayView2<f64>,
        actions: ArrayView2<f64>,
        noises: Option<ArrayView2<f64>>,
    ) -> Result<Array2<f64>> {
        let n = states.nrows();
        if states.ncols() != self.state_dim
            || actions.ncols() != self.action_dim
            || actions.nrows() != n
        {
            return Err(shape_err("ensemble input: states/actions do not line up"));
        }
        let mut input = Array2::zeros((n, self.state_dim + self.action_dim + self.noise_dim));
        input.slice_mut(s![.., ..self.state_dim]).assign(&states);
        input.slice_mut(s![.., self.action_columns()]).assign(&actions);
        if self.noise_dim > 0 {
            let noises = noises.ok_or_else(|| shape_err("noise-conditioned critic needs noise"))?;
            if noises.dim() != (n, self.noise_dim) {
                return Err(shape_err("ensemble input: noise has the wrong shape"));
            }
            input
                .slice_mut(s![.., self.state_dim + self.action_dim..])
                .assign(&noises);
        }
        Ok(input)
    }

    /// `(rows, members)` matrix of member outputs.
    pub fn member_values(&self, input: ArrayView2<f64>) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((input.nrows(), self.members.len()));
        for (m, net) in self.members.iter().enumerate() {
            out.column_mut(m).assign(&net.forward_batch(input)?.column(0));
        }
        Ok(out)
    }

    pub fn value(
        &self,
        states: ArrayView2<f64>,
        actions: ArrayView2<f64>,
        noises: Option<ArrayView2<f64>>,
    ) -> Result<Array1<f64>> {
        let input = self.input(states, actions, noises)?;
        Ok(aggregate(self.member_values(input.view())?.view(), self.aggregation).0)
    }

    /// Aggregated value and its gradient with respect to the action columns,
    /// scaled row-wise by `d_value`. Parameters are held fixed.
    pub fn value_and_action_grad(
        &self,
        states: ArrayView2<f64>,
        actions: ArrayView2<f64>,
        noises: Option<ArrayView2<f64>>,
        d_value: ArrayView1<f64>,
    ) -> Result<(Array1<f64>, Array2<f64>)> {
        let input = self.input(states, actions, noises)?;
        let traces = self
            .members
            .iter()
            .map(|m| m.trace(input.view()))
            .collect::<Result<Vec<Trace>>>()?;
        let mut values = Array2::zeros((input.nrows(), self.members.len()));
        for (m, t) in traces.iter().enumerate() {
            values.column_mut(m).assign(&t.output().column(0));
        }
        let (agg, weights) = aggregate(values.view(), self.aggregation);
        let mut d_actions = Array2::zeros(actions.dim());
        for (m, (net, trace)) in self.members.iter().zip(&traces).enumerate() {
            let d_out = (&weights.column(m) * &d_value).insert_axis(Axis(1));
            if d_out.iter().all(|&v| v == 0.0) {
                continue;
            }
            let d_in = net.input_grad(trace, d_out.view())?;
            d_actions += &d_in.slice(s![.., self.action_columns()]);
        }
        Ok((agg, d_actions))
    }

    pub fn is_finite(&self) -> bool {
        self.members.iter().all(DenseNet::is_finite)
    }
}

/// Reduces `(rows, members)` values. Returns the aggregate and the
/// derivative of each aggregate with respect to each member value
/// (`1/M` for the mean, an indicator on the first minimizer for the min).
pub fn aggregate(values: ArrayView2<f64>, aggregation: Aggregation) -> (Array1<f64>, Array2<f64>) {
    let (n, m) = values.dim();
    let mut weights = Array2::zeros((n, m));
    let agg = match aggregation {
        Aggregation::Mean => {
            weights.fill(1.0 / m as f64);
            values.sum_axis(Axis(1)) / m as f64
        }
        Aggregation::Min => {
            let mut out = Array1::zeros(n);
            for (i, row) in values.axis_iter(Axis(0)).enumerate() {
                let mut best = 0;
                for j in 1..m {
                    if row[j] < row[best] {
                        best = j;
                    }
                }
                out[i] = row[best];
                weights[[i, best]] = 1.0;
            }
            out
        }
    };
    (agg, weights)
}

/// Polyak-averaged copy of the online critic.
#[derive(Clone, Debug, PartialEq)]
pub struct CriticTargets {
    pub ensemble: Ensemble,
    pub smoothing_rate: f64,
}

impl CriticTargets {
    pub fn new(online: &Ensemble, smoothing_rate: f64) -> Result<Self> {
        if !(smoothing_rate > 0.0 && smoothing_rate <= 1.0) {
            return Err(Error::InvalidParam(format!(
                "smoothing rate {smoothing_rate} outside (0, 1]"
            )));
        }
        Ok(Self {
            ensemble: online.clone(),
            smoothing_rate,
        })
    }

    /// `target <- (1 - eta) * target + eta * online` for every member.
    pub fn update(&mut self, online: &Ensemble) -> Result<()> {
        if online.len() != self.ensemble.len() {
            return Err(shape_err("target and online ensembles differ in size"));
        }
        for (t, o) in self.ensemble.members.iter_mut().zip(&online.members) {
            t.blend_toward(o, self.smoothing_rate)?;
        }
        Ok(())
    }
}

/// Value-returning form of [`CriticTargets::update`].
pub fn polyak_update(targets: &CriticTargets, online: &Ensemble) -> Result<CriticTargets> {
    let mut next = targets.clone();
    next.update(online)?;
    Ok(next)
}

/// `|kappa - 1(u < 0)| * u^2`.
pub fn expectile_loss(u: f64, kappa: f64) -> Result<f64> {
    check_kappa(kappa)?;
    Ok(expectile_weight(u, kappa) * u * u)
}

pub(crate) fn check_kappa(kappa: f64) -> Result<()> {
    if kappa > 0.0 && kappa < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidParam(format!("kappa {kappa} outside (0, 1)")))
    }
}

fn expectile_weight(u: f64, kappa: f64) -> f64 {
    if u < 0.0 {
        1.0 - kappa
    } else {
        kappa
    }
}

/// Next-state value with the anchoring penalty:
/// `Z(s', a') - alpha2 * ||(p' - eps') - v(s', t, (1 - t) eps' + t p')||^2`,
/// where `a' = pi(s', eps')` is the bounded action and `p'` the action the
/// anchoring loss sees. Also returns the per-row penalty term.
pub fn flow_anchored_next_value(
    z: &ExpectileEnsemble,
    pi: &OneStepPolicyNet,
    v: &FlowPolicyNet,
    next_states: ArrayView2<f64>,
    noises: ArrayView2<f64>,
    times: ArrayView1<f64>,
    alpha2: f64,
) -> Result<(Array1<f64>, Array1<f64>)> {
    let raw = pi.raw(next_states, noises)?;
    let actions = pi.bound(&raw);
    let z_val = z.value(next_states, actions.view(), None)?;
    let penalty = anchor_residual_sq(pi, v, next_states, noises, times, &raw)?;
    Ok((&z_val - &(&penalty * alpha2), penalty))
}

/// Same as [`flow_anchored_next_value`] but bootstrapping from a critic,
/// `Q(s', a', noise) - alpha2 * penalty`. A plain critic ignores `critic_noise`.
#[allow(clippy::too_many_arguments)]
pub fn critic_anchored_next_value(
    q: &NoiseCriticEnsemble,
    pi: &OneStepPolicyNet,
    v: &FlowPolicyNet,
    next_states: ArrayView2<f64>,
    noises: ArrayView2<f64>,
    times: ArrayView1<f64>,
    critic_noise: Option<ArrayView2<f64>>,
    alpha2: f64,
) -> Result<(Array1<f64>, Array1<f64>)> {
    let raw = pi.raw(next_states, noises)?;
    let actions = pi.bound(&raw);
    let q_val = q.value(next_states, actions.view(), critic_noise)?;
    let penalty = anchor_residual_sq(pi, v, next_states, noises, times, &raw)?;
    Ok((&q_val - &(&penalty * alpha2), penalty))
}

/// `[r_min / (1 - gamma), r_max / (1 - gamma)]`, the range every discounted
/// return lies in.
pub fn return_bounds(r_min: f64, r_max: f64, gamma: f64) -> (f64, f64) {
    (r_min / (1.0 - gamma), r_max / (1.0 - gamma))
}

/// `y = r + gamma * (1 - done) * next_value`.
pub fn td_targets(
    rewards: ArrayView1<f64>,
    terminals: ArrayView1<f64>,
    next_values: ArrayView1<f64>,
    gamma: f64,
) -> Result<Array1<f64>> {
    if rewards.len() != terminals.len() || rewards.len() != next_values.len() {
        return Err(shape_err("td targets: rows do not line up"));
    }
    let mut y = Array1::zeros(rewards.len());
    for i in 0..y.len() {
        y[i] = if terminals[i] != 0.0 {
            rewards[i]
        } else {
            rewards[i] + gamma * next_values[i]
        };
    }
    if !y.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFiniteLoss { loss: "L_Q" });
    }
    Ok(y)
}

/// Mean over rows and members of `(Q_m(s, a, eps) - y)^2`.
pub fn td_loss(
    q: &NoiseCriticEnsemble,
    states: ArrayView2<f64>,
    actions: ArrayView2<f64>,
    noises: Option<ArrayView2<f64>>,
    targets: ArrayView1<f64>,
) -> Result<f64> {
    Ok(td_loss_and_grads(q, states, actions, noises, targets)?.0)
}

pub fn td_loss_and_grads(
    q: &NoiseCriticEnsemble,
    states: ArrayView2<f64>,
    actions: ArrayView2<f64>,
    noises: Option<ArrayView2<f64>>,
    targets: ArrayView1<f64>,
) -> Result<(f64, Vec<GradBundle>)> {
    let n = states.nrows();
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    if targets.len() != n {
        return Err(shape_err("td loss: targets do not match the batch"));
    }
    let input = q.input(states, actions, noises)?;
    let scale = 1.0 / (n * q.len()) as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(q.len());
    for net in &q.members {
        let trace = net.trace(input.view())?;
        let resid = &trace.output().column(0) - &targets;
        total += resid.mapv(|r| r * r).sum() * scale;
        let d_out = (resid * (2.0 * scale)).insert_axis(Axis(1));
        grads.push(net.backward(&trace, d_out.view())?.0);
    }
    Ok((total, grads))
}

/// Mean over rows and members of `L_kappa(target_value - Z_m(s, a))`.
pub fn expectile_regression_loss(
    z: &ExpectileEnsemble,
    states: ArrayView2<f64>,
    actions: ArrayView2<f64>,
    target_values: ArrayView1<f64>,
    kappa: f64,
) -> Result<f64> {
    Ok(expectile_regression_loss_and_grads(z, states, actions, target_values, kappa)?.0)
}

pub fn expectile_regression_loss_and_grads(
    z: &ExpectileEnsemble,
    states: ArrayView2<f64>,
    actions: ArrayView2<f64>,
    target_values: ArrayView1<f64>,
    kappa: f64,
) -> Result<(f64, Vec<GradBundle>)> {
    check_kappa(kappa)?;
    let n = states.nrows();
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    if target_values.len() != n {
        return Err(shape_err("expectile loss: targets do not match the batch"));
    }
    let input = z.input(states, actions, None)?;
    let scale = 1.0 / (n * z.len()) as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(z.len());
    for net in &z.members {
        let trace = net.trace(input.view())?;
        let mut d_out = Array2::zeros((n, 1));
        for i in 0..n {
            let u = target_values[i] - trace.output()[[i, 0]];
            let w = expectile_weight(u, kappa);
            total += w * u * u * scale;
            d_out[[i, 0]] = -2.0 * w * u * scale;
        }
        grads.push(net.backward(&trace, d_out.view())?.0);
    }
    Ok((total, grads))
}

/// Bootstrap target where the critic noise is redrawn instead of shared
/// with the next action: `r + gamma * (Q(s', a'(eps'), eps_v) - alpha2 * penalty)`.
/// For fixed `(s', eps', t)` it still varies with `eps_v`.
#[allow(clippy::too_many_arguments)]
pub fn resampled_noise_target<R: Rng + ?Sized>(
    q: &NoiseCriticEnsemble,
    pi: &OneStepPolicyNet,
    v: &FlowPolicyNet,
    rewards: ArrayView1<f64>,
    terminals: ArrayView1<f64>,
    next_states: ArrayView2<f64>,
    noises: ArrayView2<f64>,
    times: ArrayView1<f64>,
    gamma: f64,
    alpha2: f64,
    rng: &mut R,
) -> Result<Array1<f64>> {
    if q.noise_dim() == 0 {
        return Err(Error::InvalidParam("resampled target needs a noise-conditioned critic".into()));
    }
    let critic_noise = normal_matrix(rng, next_states.nrows(), q.noise_dim());
    let (next, _) = critic_anchored_next_value(
        q,
        pi,
        v,
        next_states,
        noises,
        times,
        Some(critic_noise.view()),
        alpha2,
    )?;
    td_targets(rewards, terminals, next.view(), gamma)
}

/// Noise draws for one value update.
#[derive(Clone, Debug)]
pub struct CriticNoise {
    /// `eps'`, shared by the next action and the critic input; `k * B` rows,
    /// copy `j` of the batch occupying rows `j * B .. (j + 1) * B`.
    pub next_noise: Array2<f64>,
    pub next_times: Array1<f64>,
    /// Critic noise for the expectile target, `B` rows.
    pub target_noise: Array2<f64>,
}

impl CriticNoise {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, rows: usize, action_dim: usize, k: usize) -> Self {
        Self {
            next_noise: normal_matrix(rng, rows * k, action_dim),
            next_times: Array1::from(uniform_unit(rng, rows * k)),
            target_noise: normal_matrix(rng, rows, action_dim),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CriticLosses {
    pub td: f64,
    pub expectile: f64,
    /// Mean anchoring penalty of the next actions.
    pub next_penalty: f64,
}

fn tile2(a: ArrayView2<f64>, k: usize) -> Array2<f64> {
    let views = vec![a; k];
    ndarray::concatenate(Axis(0), &views).expect("same-shape blocks")
}

fn tile1(a: ArrayView1<f64>, k: usize) -> Array1<f64> {
    let views = vec![a; k];
    ndarray::concatenate(Axis(0), &views).expect("same-shape blocks")
}

/// One Adam step on every critic and expectile member, then the Polyak
/// update of the target critic. With `k = cfg.noise_samples > 1` the TD loss
/// averages over `k` independent noise draws per row.
///
/// The next-state bootstrap depends on the variant: FAN uses the expectile
/// head with the anchoring penalty, the plain-critic variant bootstraps from
/// its target critic with the same penalty, and the two remaining variants
/// use the expectile head without penalty.
///
/// TD targets are clipped to `value_bounds`, normally [`return_bounds`] of
/// the dataset rewards, so values extrapolated off the data cannot feed back
/// into the critic beyond what any return can reach.
pub fn critic_update(
    nets: &mut FanNets,
    batch: &Batch,
    cfg: &FanConfig,
    noise: &CriticNoise,
    value_bounds: (f64, f64),
) -> Result<CriticLosses> {
    let n = batch.len();
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    let k = cfg.noise_samples;
    if noise.next_noise.nrows() != n * k || noise.target_noise.nrows() != n {
        return Err(shape_err("critic noise does not match batch size and noise_samples"));
    }
    let states = tile2(batch.states.view(), k);
    let actions = tile2(batch.actions.view(), k);
    let rewards = tile1(batch.rewards.view(), k);
    let next_states = tile2(batch.next_states.view(), k);
    let terminals = tile1(batch.terminals.view(), k);

    let (next_values, penalty) = match cfg.variant {
        Variant::Faql => critic_anchored_next_value(
            &nets.q_target.ensemble,
            &nets.pi,
            &nets.v,
            next_states.view(),
            noise.next_noise.view(),
            noise.next_times.view(),
            None,
            cfg.alpha2,
        ),
        Variant::Fan => flow_anchored_next_value(
            &nets.z,
            &nets.pi,
            &nets.v,
            next_states.view(),
            noise.next_noise.view(),
            noise.next_times.view(),
            cfg.alpha2,
        ),
        Variant::Nbrac | Variant::Nfql => flow_anchored_next_value(
            &nets.z,
            &nets.pi,
            &nets.v,
            next_states.view(),
            noise.next_noise.view(),
            noise.next_times.view(),
            0.0,
        ),
    }
    .map_err(tag_loss("L_Q"))?;
    let (lo, hi) = value_bounds;
    let y = td_targets(rewards.view(), terminals.view(), next_values.view(), cfg.gamma)?
        .mapv(|y| y.clamp(lo, hi));

    let q_noise = (nets.q.noise_dim() > 0).then(|| noise.next_noise.view());
    let (td, q_grads) = td_loss_and_grads(&nets.q, states.view(), actions.view(), q_noise, y.view())
        .map_err(tag_loss("L_Q"))?;
    if !td.is_finite() {
        return Err(Error::NonFiniteLoss { loss: "L_Q" });
    }

    let mut expectile = 0.0;
    let mut z_grads = Vec::new();
    if cfg.variant != Variant::Faql {
        let target_values = nets
            .q_target
            .ensemble
            .value(
                batch.states.view(),
                batch.actions.view(),
                Some(noise.target_noise.view()),
            )
            .map_err(tag_loss("L_Z"))?;
        let (loss, grads) = expectile_regression_loss_and_grads(
            &nets.z,
            batch.states.view(),
            batch.actions.view(),
            target_values.view(),
            cfg.kappa,
        )
        .map_err(tag_loss("L_Z"))?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { loss: "L_Z" });
        }
        expectile = loss;
        z_grads = grads;
    }

    for ((net, g), opt) in nets.q.members.iter_mut().zip(&q_grads).zip(&mut nets.opt_q) {
        adam_update(net, g, opt).map_err(tag_loss("L_Q"))?;
    }
    for ((net, g), opt) in nets.z.members.iter_mut().zip(&z_grads).zip(&mut nets.opt_z) {
        adam_update(net, g, opt).map_err(tag_loss("L_Z"))?;
    }
    nets.q_target.update(&nets.q)?;
    Ok(CriticLosses {
        td,
        expectile,
        next_penalty: penalty.mean().unwrap_or(0.0),
    })
}
