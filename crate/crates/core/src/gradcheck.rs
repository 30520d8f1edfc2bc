//! Reverse-mode gradients against central finite differences on small
//! random networks and every training loss.

use ndarray::Array1;
use rand::Rng;

use crate::actor::{policy_loss_and_grad, ActorNoise, ActorObjective, OneStepPolicyNet};
use crate::config::{Aggregation, Squash, ValueMax, Variant};
use crate::critic::{
    expectile_regression_loss, expectile_regression_loss_and_grads, td_loss, td_loss_and_grads,
    Ensemble,
};
use crate::error::{shape_err, Result};
use crate::flow::{cfm_loss, cfm_loss_and_grad, FlowPolicyNet, FlowSampleBatch};
use crate::nn::{grad, Activation, DenseNet, GradBundle};
use crate::rng::{normal_matrix, uniform_unit, Streams};

pub const FD_STEP: f64 = 1e-5;
/// Per-coordinate tolerance on [`relative_error`].
pub const GRAD_REL_TOL: f64 = 1e-4;
/// Coordinates where both gradients are at most this large are skipped.
pub const GRAD_MIN: f64 = 1e-6;

/// `|a - b| / max(|a|, |b|)`, or 0 when both are at most [`GRAD_MIN`].
pub fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale <= GRAD_MIN {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub params: usize,
    pub max_rel_error: f64,
    /// Flattened index of the worst coordinate.
    pub worst_index: usize,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < GRAD_REL_TOL
    }
}

fn perturbed(net: &DenseNet, index: usize, delta: f64) -> DenseNet {
    let mut layers = net.layers().to_vec();
    let mut i = index;
    for l in &mut layers {
        let nw = l.weight.len();
        if i < nw {
            let flat = l.weight.as_slice_mut().expect("standard layout");
            flat[i] += delta;
            break;
        }
        i -= nw;
        if i < l.bias.len() {
            l.bias[i] += delta;
            break;
        }
        i -= l.bias.len();
    }
    DenseNet::from_layers(layers, net.activation()).expect("same shapes")
}

/// Compares `analytic` with central differences of `loss` at every
/// parameter of `net`, Richardson-extrapolated over steps `h` and `h / 2`.
/// Returns the worst relative error and its index.
pub fn finite_difference_check<F>(
    net: &DenseNet,
    analytic: &GradBundle,
    loss: F,
    step: f64,
) -> Result<(f64, usize)>
where
    F: Fn(&DenseNet) -> Result<f64>,
{
    if !analytic.matches(net) {
        return Err(shape_err("gradient does not match the network"));
    }
    let flat = analytic.flatten();
    let mut worst = (0.0, 0);
    for (i, &g) in flat.iter().enumerate() {
        let central = |h: f64| -> Result<f64> {
            Ok((loss(&perturbed(net, i, h))? - loss(&perturbed(net, i, -h))?) / (2.0 * h))
        };
        let fd = (4.0 * central(0.5 * step)? - central(step)?) / 3.0;
        let err = relative_error(g, fd);
        if err > worst.0 || !err.is_finite() {
            worst = (err, i);
        }
    }
    Ok(worst)
}

fn random_hidden<R: Rng + ?Sized>(rng: &mut R) -> Vec<usize> {
    let depth = rng.random_range(1..=3);
    (0..depth).map(|_| rng.random_range(2..=16)).collect()
}

fn record(name: String, net: &DenseNet, worst: (f64, usize)) -> GradCheck {
    GradCheck {
        name,
        params: net.param_count(),
        max_rel_error: worst.0,
        worst_index: worst.1,
    }
}

const KINDS: usize = 8;

/// `n_cases` checks cycling through the loss kinds, each on freshly drawn
/// sizes and weights from `(seed, case)`.
pub fn run_gradient_checks(n_cases: usize, seed: u64) -> Result<Vec<GradCheck>> {
    let streams = Streams::new(seed);
    let mut out = Vec::new();
    for case in 0..n_cases {
        let mut rng = streams.stream("gradcheck", case as u64);
        out.extend(check_case(case % KINDS, case, &mut rng)?);
    }
    Ok(out)
}

fn check_case<R: Rng + ?Sized>(kind: usize, case: usize, rng: &mut R) -> Result<Vec<GradCheck>> {
    let sd = rng.random_range(1..=3);
    let ad = rng.random_range(1..=2);
    let n = rng.random_range(3..=6);
    let hidden = random_hidden(rng);
    let states = normal_matrix(rng, n, sd);
    let actions = normal_matrix(rng, n, ad).mapv(|a| 0.8 * a.tanh());
    let tag = |what: &str| format!("case{case}/{what}");
    let mut out = Vec::new();
    match kind {
        0 => {
            let activation = if rng.random_bool(0.5) { Activation::Gelu } else { Activation::Identity };
            let mut sizes = vec![sd];
            sizes.extend(&hidden);
            sizes.push(ad);
            let net = DenseNet::new(&sizes, activation, rng)?;
            let target = actions.clone();
            let mse = |out: ndarray::ArrayView2<f64>| {
                let d = &out - &target;
                ((d.mapv(|x| x * x).sum()) / n as f64, d * (2.0 / n as f64))
            };
            let (_, g) = grad(&net, states.view(), mse)?;
            let worst = finite_difference_check(
                &net,
                &g,
                |m| Ok(mse(m.forward_batch(states.view())?.view()).0),
                FD_STEP,
            )?;
            out.push(record(tag("mse"), &net, worst));
        }
        1 => {
            let v = FlowPolicyNet::new(sd, ad, &hidden, rng)?;
            let batch = FlowSampleBatch::new(
                states.clone(),
                actions.clone(),
                Array1::from(uniform_unit(rng, n)),
                normal_matrix(rng, n, ad),
            )?;
            let (_, g) = cfm_loss_and_grad(&v, &batch)?;
            let worst = finite_difference_check(
                &v.net,
                &g,
                |m| cfm_loss(&FlowPolicyNet::from_net(m.clone(), sd, ad)?, &batch),
                FD_STEP,
            )?;
            out.push(record(tag("flow_matching"), &v.net, worst));
        }
        2 | 3 => {
            let noise_dim = if kind == 2 { ad } else { 0 };
            let agg = if rng.random_bool(0.5) { Aggregation::Mean } else { Aggregation::Min };
            let q = Ensemble::new(sd, ad, noise_dim, &hidden, 2, agg, rng)?;
            let noises = normal_matrix(rng, n, ad);
            let noise = (noise_dim > 0).then_some(noises.view());
            let targets = Array1::from(crate::rng::normal_vec(rng, n));
            let (_, grads) = td_loss_and_grads(&q, states.view(), actions.view(), noise, targets.view())?;
            for (m, g) in grads.iter().enumerate() {
                let worst = finite_difference_check(
                    &q.members[m],
                    g,
                    |net| {
                        let mut q2 = q.clone();
                        q2.members[m] = net.clone();
                        td_loss(&q2, states.view(), actions.view(), noise, targets.view())
                    },
                    FD_STEP,
                )?;
                let what = if noise_dim > 0 { "td_noise" } else { "td_plain" };
                out.push(record(tag(&format!("{what}/member{m}")), &q.members[m], worst));
            }
        }
        4 => {
            let z = Ensemble::expectile(sd, ad, &hidden, 2, Aggregation::Mean, rng)?;
            let targets = Array1::from(crate::rng::normal_vec(rng, n));
            let kappa = rng.random_range(0.5..0.99);
            let (_, grads) =
                expectile_regression_loss_and_grads(&z, states.view(), actions.view(), targets.view(), kappa)?;
            for (m, g) in grads.iter().enumerate() {
                let worst = finite_difference_check(
                    &z.members[m],
                    g,
                    |net| {
                        let mut z2 = z.clone();
                        z2.members[m] = net.clone();
                        expectile_regression_loss(&z2, states.view(), actions.view(), targets.view(), kappa)
                    },
                    FD_STEP,
                )?;
                out.push(record(tag(&format!("expectile/member{m}")), &z.members[m], worst));
            }
        }
        _ => {
            let (variant, squash, value_max, maximize) = match kind {
                5 => (Variant::Fan, Squash::Clamp, ValueMax::Both, true),
                6 => (Variant::Nbrac, Squash::Tanh, ValueMax::QOnly, true),
                _ => (Variant::Nfql, Squash::Tanh, ValueMax::ZOnly, rng.random_bool(0.5)),
            };
            let pi = OneStepPolicyNet::new(sd, ad, &hidden, squash, rng)?;
            let v = FlowPolicyNet::new(sd, ad, &hidden, rng)?;
            let q = Ensemble::noise_critic(sd, ad, &hidden, 2, Aggregation::Mean, rng)?;
            let z = Ensemble::expectile(sd, ad, &hidden, 2, Aggregation::Mean, rng)?;
            let objective = ActorObjective {
                variant,
                alpha1: rng.random_range(0.5..10.0),
                value_max,
                maximize_value: maximize,
                nfql_flow_steps: 4,
            };
            let noise = ActorNoise::sample(rng, n, ad);
            let analytic =
                policy_loss_and_grad(&pi, &v, &q, &z, states.view(), actions.view(), &objective, &noise)?;
            let worst = finite_difference_check(
                &pi.net,
                &analytic.grads,
                |net| {
                    let mut p2 = pi.clone();
                    p2.net = net.clone();
                    Ok(policy_loss_and_grad(&p2, &v, &q, &z, states.view(), actions.view(), &objective, &noise)?
                        .total)
                },
                FD_STEP,
            )?;
            out.push(record(tag(&format!("policy_{variant}_{squash}")), &pi.net, worst));
        }
    }
    Ok(out)
}
