//! Closed-form FLOP counts for dense networks.
//!
//! A dense `m -> n` layer costs `2mn` FLOPs forward and `4mn` backward
//! (weight gradient plus input gradient). A backward pass that only needs
//! the input gradient costs `2mn`. Biases and activations are not counted.

use std::fmt;

use crate::config::{FanConfig, Variant};
use crate::flow::layer_sizes;

pub fn dense_forward(m: usize, n: usize) -> u64 {
    2 * (m * n) as u64
}

pub fn dense_backward(m: usize, n: usize) -> u64 {
    4 * (m * n) as u64
}

fn sum_layers(sizes: &[usize], per: impl Fn(usize, usize) -> u64) -> u64 {
    sizes.windows(2).map(|w| per(w[0], w[1])).sum()
}

/// One row through a network with the given layer sizes.
pub fn net_forward(sizes: &[usize]) -> u64 {
    sum_layers(sizes, dense_forward)
}

pub fn net_backward(sizes: &[usize]) -> u64 {
    sum_layers(sizes, dense_backward)
}

pub fn net_input_backward(sizes: &[usize]) -> u64 {
    sum_layers(sizes, dense_forward)
}

struct Shapes {
    pi: Vec<usize>,
    v: Vec<usize>,
    q: Vec<usize>,
    z: Vec<usize>,
    members: u64,
    batch: u64,
}

impl Shapes {
    fn new(cfg: &FanConfig, state_dim: usize, action_dim: usize) -> Self {
        let noise = if cfg.noise_conditioned() { action_dim } else { 0 };
        Self {
            pi: layer_sizes(state_dim + action_dim, &cfg.hidden, action_dim),
            v: layer_sizes(state_dim + 1 + action_dim, &cfg.hidden, action_dim),
            q: layer_sizes(state_dim + action_dim + noise, &cfg.hidden, 1),
            z: layer_sizes(state_dim + action_dim, &cfg.hidden, 1),
            members: cfg.ensemble as u64,
            batch: cfg.batch_size as u64,
        }
    }
}

/// One value update with `k` noise draws per row.
pub fn critic_update_flops(cfg: &FanConfig, state_dim: usize, action_dim: usize, k: usize) -> u64 {
    let s = Shapes::new(cfg, state_dim, action_dim);
    let rows = s.batch * k as u64;
    // next action and its anchoring penalty
    let mut per_row = net_forward(&s.pi) + net_forward(&s.v);
    // bootstrap value
    per_row += s.members
        * if cfg.variant == Variant::Faql {
            net_forward(&s.q)
        } else {
            net_forward(&s.z)
        };
    per_row += s.members * (net_forward(&s.q) + net_backward(&s.q));
    let mut total = rows * per_row;
    if cfg.variant != Variant::Faql {
        total += s.batch * s.members * (net_forward(&s.q) + net_forward(&s.z) + net_backward(&s.z));
    }
    total
}

/// A quantile-style critic that evaluates `k` online and `k` target samples
/// per row with critics of the same width.
pub fn quantile_critic_update_flops(
    cfg: &FanConfig,
    state_dim: usize,
    action_dim: usize,
    k: usize,
) -> u64 {
    let s = Shapes::new(cfg, state_dim, action_dim);
    let k = k as u64;
    let per_row = net_forward(&s.pi)
        + s.members * k * (net_forward(&s.q) + net_backward(&s.q))
        + s.members * k * net_forward(&s.q);
    s.batch * per_row
}

pub fn actor_update_flops(cfg: &FanConfig, state_dim: usize, action_dim: usize) -> u64 {
    let s = Shapes::new(cfg, state_dim, action_dim);
    let flow = net_forward(&s.v) + net_backward(&s.v);
    let policy = net_forward(&s.pi) + net_backward(&s.pi);
    let regularizer = match cfg.variant {
        Variant::Fan | Variant::Faql => net_forward(&s.v) + net_input_backward(&s.v),
        Variant::Nbrac => 0,
        Variant::Nfql => cfg.nfql_flow_steps as u64 * net_forward(&s.v),
    };
    let value = s.members * (net_forward(&s.q) + net_input_backward(&s.q))
        + if cfg.variant == Variant::Faql {
            0
        } else {
            s.members * (net_forward(&s.z) + net_input_backward(&s.z))
        };
    s.batch * (flow + policy + regularizer + value)
}

/// Counts for one training update and for acting.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FlopReport {
    pub noise_samples: usize,
    pub critic_update: u64,
    pub actor_update: u64,
    pub training_update: u64,
    /// One action from the one-step policy.
    pub inference: u64,
    pub flow_steps: usize,
    /// One action from an Euler sampler of the behavior flow.
    pub flow_sampler_inference: u64,
}

pub fn flop_estimate(cfg: &FanConfig, state_dim: usize, action_dim: usize) -> FlopReport {
    let s = Shapes::new(cfg, state_dim, action_dim);
    let critic = critic_update_flops(cfg, state_dim, action_dim, cfg.noise_samples);
    let actor = actor_update_flops(cfg, state_dim, action_dim);
    FlopReport {
        noise_samples: cfg.noise_samples,
        critic_update: critic,
        actor_update: actor,
        training_update: critic + actor,
        inference: net_forward(&s.pi),
        flow_steps: cfg.nfql_flow_steps,
        flow_sampler_inference: cfg.nfql_flow_steps as u64 * net_forward(&s.v),
    }
}

impl fmt::Display for FlopReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "noise_samples\t{}", self.noise_samples)?;
        writeln!(f, "critic_update\t{}", self.critic_update)?;
        writeln!(f, "actor_update\t{}", self.actor_update)?;
        writeln!(f, "training_update\t{}", self.training_update)?;
        writeln!(f, "inference\t{}", self.inference)?;
        writeln!(f, "flow_steps\t{}", self.flow_steps)?;
        writeln!(f, "flow_sampler_inference\t{}", self.flow_sampler_inference)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_layer_count() {
        // 32 multiply-adds
        assert_eq!(dense_forward(4, 8), 64);
        assert_eq!(net_forward(&[4, 8]), 64);
        assert_eq!(dense_backward(4, 8), 128);
        assert_eq!(net_forward(&[3, 5, 2]), 2 * (15 + 10));
    }

    #[test]
    fn sampler_ratio_with_equal_width() {
        let cfg = FanConfig::default();
        let r = flop_estimate(&cfg, 2, 2);
        assert!(10 * r.inference <= r.flow_sampler_inference);
        // the only difference is the extra time input of the flow net
        let extra = 10 * dense_forward(1, cfg.hidden[0]);
        assert_eq!(r.flow_sampler_inference, 10 * r.inference + extra);
    }

    #[test]
    fn critic_cost_is_affine_in_noise_samples() {
        let cfg = FanConfig::default();
        let c: Vec<u64> = [1, 4, 16].iter().map(|&k| critic_update_flops(&cfg, 2, 2, k)).collect();
        assert!(c[1] > c[0]);
        assert_eq!((c[1] - c[0]) * 4, c[2] - c[1]);
        let q: Vec<u64> = [1, 4, 16]
            .iter()
            .map(|&k| quantile_critic_update_flops(&cfg, 2, 2, k))
            .collect();
        assert_eq!((q[1] - q[0]) * 4, q[2] - q[1]);
    }

    #[test]
    fn inference_ignores_noise_samples() {
        let mut cfg = FanConfig::default();
        let a = flop_estimate(&cfg, 2, 2);
        cfg.noise_samples = 16;
        let b = flop_estimate(&cfg, 2, 2);
        assert_eq!(a.inference, b.inference);
        assert!(b.training_update > a.training_update);
    }
}
