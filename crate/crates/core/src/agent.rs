//! The four trained networks, the target critic and their optimizers.

use crate::actor::OneStepPolicyNet;
use crate::config::FanConfig;
use crate::critic::{CriticTargets, Ensemble, ExpectileEnsemble, NoiseCriticEnsemble};
use crate::error::{Error, Result};
use crate::flow::FlowPolicyNet;
use crate::nn::AdamState;
use crate::rng::Streams;

#[derive(Clone, Debug, PartialEq)]
pub struct FanNets {
    pub pi: OneStepPolicyNet,
    pub v: FlowPolicyNet,
    pub q: NoiseCriticEnsemble,
    pub q_target: CriticTargets,
    pub z: ExpectileEnsemble,
    pub opt_pi: AdamState,
    pub opt_v: AdamState,
    pub opt_q: Vec<AdamState>,
    pub opt_z: Vec<AdamState>,
}

impl FanNets {
    /// Fresh networks. Each one is initialized from its own `init` stream so
    /// changing one architecture leaves the others untouched.
    pub fn new(state_dim: usize, action_dim: usize, cfg: &FanConfig, streams: &Streams) -> Result<Self> {
        cfg.validate()?;
        let pi = OneStepPolicyNet::new(
            state_dim,
            action_dim,
            &cfg.hidden,
            cfg.squash,
            &mut streams.stream("init", 0),
        )?;
        let v = FlowPolicyNet::new(state_dim, action_dim, &cfg.hidden, &mut streams.stream("init", 1))?;
        let noise_dim = if cfg.noise_conditioned() { action_dim } else { 0 };
        let q = Ensemble::new(
            state_dim,
            action_dim,
            noise_dim,
            &cfg.hidden,
            cfg.ensemble,
            cfg.aggregation,
            &mut streams.stream("init", 2),
        )?;
        let z = Ensemble::expectile(
            state_dim,
            action_dim,
            &cfg.hidden,
            cfg.ensemble,
            cfg.aggregation,
            &mut streams.stream("init", 3),
        )?;
        let q_target = CriticTargets::new(&q, cfg.polyak_eta)?;
        Ok(Self::assemble(pi, v, q, q_target, z, cfg.lr))
    }

    /// Wraps existing networks with fresh optimizer state.
    pub fn assemble(
        pi: OneStepPolicyNet,
        v: FlowPolicyNet,
        q: NoiseCriticEnsemble,
        q_target: CriticTargets,
        z: ExpectileEnsemble,
        lr: f64,
    ) -> Self {
        let opt_pi = AdamState::new(&pi.net, lr);
        let opt_v = AdamState::new(&v.net, lr);
        let opt_q = q.members.iter().map(|m| AdamState::new(m, lr)).collect();
        let opt_z = z.members.iter().map(|m| AdamState::new(m, lr)).collect();
        Self {
            pi,
            v,
            q,
            q_target,
            z,
            opt_pi,
            opt_v,
            opt_q,
            opt_z,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.pi.state_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.pi.action_dim()
    }

    /// Checks that all networks agree on the state and action sizes.
    pub fn check_dims(&self, state_dim: usize, action_dim: usize) -> Result<()> {
        let ok = self.pi.state_dim() == state_dim
            && self.pi.action_dim() == action_dim
            && self.v.state_dim() == state_dim
            && self.v.action_dim() == action_dim
            && self.q.state_dim() == state_dim
            && self.q.action_dim() == action_dim
            && self.z.state_dim() == state_dim
            && self.z.action_dim() == action_dim
            && self.q_target.ensemble.state_dim() == state_dim;
        if ok {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "networks do not match state_dim {state_dim}, action_dim {action_dim}"
            )))
        }
    }

    /// Resets every optimizer to step zero with learning rate `lr`.
    pub fn reset_optimizers(&mut self, lr: f64) {
        self.opt_pi = AdamState::new(&self.pi.net, lr);
        self.opt_v = AdamState::new(&self.v.net, lr);
        self.opt_q = self.q.members.iter().map(|m| AdamState::new(m, lr)).collect();
        self.opt_z = self.z.members.iter().map(|m| AdamState::new(m, lr)).collect();
    }

    pub fn is_finite(&self) -> bool {
        self.pi.net.is_finite()
            && self.v.net.is_finite()
            && self.q.is_finite()
            && self.z.is_finite()
            && self.q_target.ensemble.is_finite()
    }
}
