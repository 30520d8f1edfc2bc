//! Offline training loop, evaluation rollouts, online fine-tuning, ablation
//! grids and the metrics log.

use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};
use rand::RngCore;

use crate::actor::{actor_update, ActorLosses, ActorNoise, ActorObjective, OneStepPolicyNet};
use crate::config::{FanConfig, ValueMax, Variant};
use crate::critic::{critic_update, return_bounds, CriticLosses, CriticNoise};
use crate::data::{sample_batch, scripted_action, Behavior, OfflineDataset, Transition};
use crate::env::ToyEnv;
use crate::error::{Error, Result};
use crate::flow::{euler_integrate_batch, FlowPolicyNet};
use crate::nn::{read_net, write_net, Activation};
use crate::rng::{normal_matrix, Streams};

pub use crate::agent::FanNets;
pub use crate::flops::{flop_estimate, FlopReport};

/// Anything that maps a batch of states to a batch of actions.
pub trait Policy {
    fn act(&self, states: ArrayView2<f64>, rng: &mut dyn RngCore) -> Result<Array2<f64>>;
}

/// Acts with fresh `eps ~ N(0, I)` per call.
impl Policy for OneStepPolicyNet {
    fn act(&self, states: ArrayView2<f64>, rng: &mut dyn RngCore) -> Result<Array2<f64>> {
        let noise = normal_matrix(rng, states.nrows(), self.action_dim());
        self.actions(states, noise.view())
    }
}

/// Scripted controller from the dataset generator, optionally noisy.
#[derive(Clone, Debug)]
pub struct ScriptedPolicy {
    pub env: ToyEnv,
    pub behavior: Behavior,
}

impl Policy for ScriptedPolicy {
    fn act(&self, states: ArrayView2<f64>, rng: &mut dyn RngCore) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((states.nrows(), self.env.action_dim));
        for (i, s) in states.rows().into_iter().enumerate() {
            let a = scripted_action(&self.env, self.behavior, &s.to_vec(), rng);
            out.row_mut(i).assign(&ndarray::Array1::from(a));
        }
        Ok(out)
    }
}

/// Euler sampling of a behavior flow, clamped to the unit box.
#[derive(Clone, Debug)]
pub struct FlowSampler<'a> {
    pub flow: &'a FlowPolicyNet,
    pub steps: usize,
}

impl Policy for FlowSampler<'_> {
    fn act(&self, states: ArrayView2<f64>, rng: &mut dyn RngCore) -> Result<Array2<f64>> {
        let z = normal_matrix(rng, states.nrows(), self.flow.action_dim());
        let x = euler_integrate_batch(self.flow, states, z.view(), self.steps)?;
        Ok(x.mapv(|v| v.clamp(-1.0, 1.0)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalStats {
    pub mean_return: f64,
    pub success_rate: f64,
}

/// Rolls out `episodes` episodes side by side. Success means the episode
/// ended on a goal before the horizon. Start states are drawn first, in
/// episode order; the reductions run in episode order too.
pub fn evaluate<P: Policy + ?Sized>(
    policy: &P,
    env: &ToyEnv,
    episodes: usize,
    rng: &mut dyn RngCore,
) -> Result<EvalStats> {
    if episodes == 0 {
        return Err(Error::InvalidParam("episodes must be at least 1".into()));
    }
    let mut states: Vec<Vec<f64>> = (0..episodes).map(|_| env.reset(rng)).collect();
    let mut returns = vec![0.0; episodes];
    let mut success = vec![false; episodes];
    let mut active: Vec<usize> = (0..episodes).collect();
    for _ in 0..env.horizon {
        if active.is_empty() {
            break;
        }
        let mut batch = Array2::zeros((active.len(), env.state_dim));
        for (r, &i) in active.iter().enumerate() {
            batch.row_mut(r).assign(&ndarray::ArrayView1::from(&states[i]));
        }
        let actions = policy.act(batch.view(), rng)?;
        let mut still = Vec::with_capacity(active.len());
        for (r, &i) in active.iter().enumerate() {
            let out = env.step(&states[i], &actions.row(r).to_vec())?;
            returns[i] += out.reward;
            states[i] = out.next_state;
            if out.terminal {
                success[i] = true;
            } else {
                still.push(i);
            }
        }
        active = still;
    }
    let n = episodes as f64;
    Ok(EvalStats {
        mean_return: returns.iter().sum::<f64>() / n,
        success_rate: success.iter().filter(|&&s| s).count() as f64 / n,
    })
}

/// Losses of one training step. Critic losses are zero when the critic
/// is not trained.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLosses {
    pub actor: ActorLosses,
    pub critic: CriticLosses,
}

/// One line of the metrics log. Loss columns average the steps since the
/// previous row.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub l_f: f64,
    pub l_b: f64,
    pub l_p: f64,
    pub l_q: f64,
    pub l_z: f64,
    pub eval_return: f64,
    pub eval_success_rate: f64,
    pub wall_notes: String,
}

pub const METRICS_HEADER: &str =
    "step,L_F,L_B,L_P,L_Q,L_Z,eval_return,eval_success_rate,wall_notes";

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.step,
            self.l_f,
            self.l_b,
            self.l_p,
            self.l_q,
            self.l_z,
            self.eval_return,
            self.eval_success_rate,
            self.wall_notes
        )
    }
}

/// Writes a fresh metrics file: header plus rows.
pub fn write_metrics_csv(path: impl AsRef<Path>, rows: &[MetricsRow]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(w, "{}", r.to_csv())?;
    }
    w.flush()?;
    Ok(())
}

/// Appends rows, writing the header first if the file is new or empty.
pub fn append_metrics_csv(path: impl AsRef<Path>, rows: &[MetricsRow]) -> Result<()> {
    let path = path.as_ref();
    let fresh = fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let mut w = BufWriter::new(OpenOptions::new().create(true).append(true).open(path)?);
    if fresh {
        writeln!(w, "{METRICS_HEADER}")?;
    }
    for r in rows {
        writeln!(w, "{}", r.to_csv())?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, Default)]
struct Window {
    sum: StepLosses,
    count: u64,
}

impl Window {
    fn add(&mut self, l: &StepLosses) {
        self.sum.actor.flow += l.actor.flow;
        self.sum.actor.anchor += l.actor.anchor;
        self.sum.actor.value += l.actor.value;
        self.sum.critic.td += l.critic.td;
        self.sum.critic.expectile += l.critic.expectile;
        self.count += 1;
    }

    fn row(&mut self, step: u64, eval: EvalStats, notes: &str) -> MetricsRow {
        let n = self.count.max(1) as f64;
        let s = std::mem::take(&mut self.sum);
        self.count = 0;
        MetricsRow {
            step,
            l_f: s.actor.flow / n,
            l_b: s.actor.anchor / n,
            l_p: s.actor.value / n,
            l_q: s.critic.td / n,
            l_z: s.critic.expectile / n,
            eval_return: eval.mean_return,
            eval_success_rate: eval.success_rate,
            wall_notes: notes.to_string(),
        }
    }
}

/// Result of a training run.
#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub nets: FanNets,
    pub log: Vec<MetricsRow>,
    /// Losses of every step, in order.
    pub history: Vec<StepLosses>,
}

impl TrainOutput {
    pub fn final_success(&self) -> Option<f64> {
        self.log.last().map(|r| r.eval_success_rate)
    }

    /// Mean success rate over the last `n` evaluations.
    pub fn mean_last_success(&self, n: usize) -> Option<f64> {
        let tail = &self.log[self.log.len().saturating_sub(n)..];
        (!tail.is_empty())
            .then(|| tail.iter().map(|r| r.eval_success_rate).sum::<f64>() / tail.len() as f64)
    }

    pub fn best_last_success(&self, n: usize) -> Option<f64> {
        let tail = &self.log[self.log.len().saturating_sub(n)..];
        tail.iter().map(|r| r.eval_success_rate).reduce(f64::max)
    }
}

/// Stepwise trainer over a fixed dataset. Every random draw comes from a
/// stream keyed by purpose and step index, so a run is a pure function of
/// `(dataset, config, seed)`.
pub struct Trainer<'a> {
    pub nets: FanNets,
    pub cfg: FanConfig,
    pub objective: ActorObjective,
    env: ToyEnv,
    data: &'a OfflineDataset,
    streams: Streams,
    step: u64,
    label: &'static str,
}

impl<'a> Trainer<'a> {
    pub fn new(data: &'a OfflineDataset, cfg: &FanConfig) -> Result<Self> {
        let streams = Streams::new(cfg.seed);
        let nets = FanNets::new(data.state_dim(), data.action_dim(), cfg, &streams)?;
        Self::with_nets(data, cfg, nets)
    }

    pub fn with_nets(data: &'a OfflineDataset, cfg: &FanConfig, nets: FanNets) -> Result<Self> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let env = ToyEnv::new(cfg.env);
        if env.state_dim != data.state_dim() || env.action_dim != data.action_dim() {
            return Err(Error::Config(format!(
                "dataset dims ({}, {}) do not match env {}",
                data.state_dim(),
                data.action_dim(),
                cfg.env
            )));
        }
        nets.check_dims(data.state_dim(), data.action_dim())?;
        Ok(Self {
            nets,
            cfg: cfg.clone(),
            objective: ActorObjective::from_config(cfg),
            env,
            data,
            streams: Streams::new(cfg.seed),
            step: 0,
            label: "offline",
        })
    }

    /// Trains the policy on the regularizer alone; the critic is skipped.
    pub fn behavior_cloning(mut self) -> Self {
        self.objective = ActorObjective::behavior_cloning(&self.cfg);
        self.label = "bc";
        self
    }

    pub fn step_index(&self) -> u64 {
        self.step
    }

    pub fn env(&self) -> &ToyEnv {
        &self.env
    }

    /// One value update followed by one policy update.
    pub fn step(&mut self) -> Result<StepLosses> {
        let idx = self.step;
        let losses = self
            .update(self.data, idx)
            .map_err(|e| abort(e, idx + 1))?;
        self.step += 1;
        Ok(losses)
    }

    fn update(&mut self, data: &OfflineDataset, idx: u64) -> Result<StepLosses> {
        let d = data.action_dim();
        let b = self.cfg.batch_size;
        let batch = sample_batch(data, b, &mut self.streams.stream("batch", idx))?;
        let mut losses = StepLosses::default();
        if self.objective.maximize_value {
            let noise = CriticNoise::sample(
                &mut self.streams.stream("critic", idx),
                b,
                d,
                self.cfg.noise_samples,
            );
            let bounds = return_bounds(data.r_min, data.r_max, self.cfg.gamma);
            losses.critic = critic_update(&mut self.nets, &batch, &self.cfg, &noise, bounds)?;
        }
        let noise = ActorNoise::sample(&mut self.streams.stream("actor", idx), b, d);
        losses.actor = actor_update(&mut self.nets, &batch, &self.objective, &noise)?;
        Ok(losses)
    }

    pub fn evaluate(&self, episodes: usize) -> Result<EvalStats> {
        let mut rng = self.streams.stream("eval", self.step);
        evaluate(&self.nets.pi, &self.env, episodes, &mut rng)
    }

    /// Runs `cfg.total_steps` steps, logging a row with an evaluation every
    /// `cfg.eval_every` steps and after the last step.
    pub fn run(mut self) -> Result<TrainOutput> {
        let total = self.cfg.total_steps;
        let mut log = Vec::new();
        let mut history = Vec::with_capacity(total as usize);
        let mut window = Window::default();
        while self.step < total {
            let l = self.step()?;
            window.add(&l);
            history.push(l);
            if self.step.is_multiple_of(self.cfg.eval_every) || self.step == total {
                let eval = self.evaluate(self.cfg.eval_episodes)?;
                log.push(window.row(self.step, eval, self.label));
            }
        }
        Ok(TrainOutput {
            nets: self.nets,
            log,
            history,
        })
    }
}

fn abort(e: Error, step: u64) -> Error {
    match e {
        Error::NonFiniteLoss { loss } => Error::Aborted { step, loss },
        other => other,
    }
}

/// Offline training from scratch with `cfg`.
pub fn fan_train(ds: &OfflineDataset, cfg: &FanConfig) -> Result<TrainOutput> {
    Trainer::new(ds, cfg)?.run()
}

/// The reference behavior-cloning policy: same networks and schedule, but
/// the policy minimizes only the behavior regularizer.
pub fn train_behavior_cloning(ds: &OfflineDataset, cfg: &FanConfig) -> Result<TrainOutput> {
    Trainer::new(ds, cfg)?.behavior_cloning().run()
}

#[derive(Clone, Debug)]
pub struct OnlineOutput {
    pub nets: FanNets,
    pub log: Vec<MetricsRow>,
    pub buffer: OfflineDataset,
    /// Transitions collected from the environment.
    pub env_steps: u64,
}

/// Continues training with environment interaction. Each update first
/// takes `cfg.env_steps_per_update` environment steps with the current
/// policy (fresh noise per step) and appends them to a buffer that starts
/// as a copy of `offline`, then performs one update on a batch drawn
/// uniformly from the whole buffer. Optimizer state is reset, so this
/// matches resuming from a saved checkpoint. Runs `cfg.online_steps` updates.
pub fn finetune_online(
    nets: FanNets,
    offline: &OfflineDataset,
    cfg: &FanConfig,
) -> Result<OnlineOutput> {
    cfg.validate()?;
    let mut nets = nets;
    nets.reset_optimizers(cfg.lr);
    let streams = Streams::new(cfg.seed).derive("online", 0);
    let mut buffer = offline.clone();
    let mut trainer = Trainer::with_nets(offline, cfg, nets)?;
    trainer.streams = streams;
    trainer.label = "online";
    let env = trainer.env.clone();

    let mut env_rng = streams.stream("env", 0);
    let mut state = env.reset(&mut env_rng);
    let mut t_in_episode = 0usize;
    let mut env_steps = 0u64;
    let mut log = Vec::new();
    let mut window = Window::default();
    for idx in 0..cfg.online_steps {
        for _ in 0..cfg.env_steps_per_update {
            let s = ndarray::ArrayView2::from_shape((1, env.state_dim), &state[..])
                .expect("state row");
            let a = trainer.nets.pi.act(s, &mut env_rng)?.row(0).to_vec();
            let out = env.step(&state, &a)?;
            buffer.push(&Transition {
                state: state.clone(),
                action: a,
                reward: out.reward,
                next_state: out.next_state.clone(),
                terminal: out.terminal,
            })?;
            env_steps += 1;
            t_in_episode += 1;
            if out.terminal || t_in_episode >= env.horizon {
                state = env.reset(&mut env_rng);
                t_in_episode = 0;
            } else {
                state = out.next_state;
            }
        }
        let l = trainer
            .update(&buffer, idx)
            .map_err(|e| abort(e, idx + 1))?;
        trainer.step = idx + 1;
        window.add(&l);
        if trainer.step.is_multiple_of(cfg.eval_every) || trainer.step == cfg.online_steps {
            let eval = trainer.evaluate(cfg.eval_episodes)?;
            log.push(window.row(trainer.step, eval, "online"));
        }
    }
    Ok(OnlineOutput {
        nets: trainer.nets,
        log,
        buffer,
        env_steps,
    })
}

/// Ablation grids.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationSuite {
    Kappa,
    ValueMax,
    NoiseSamples,
    RegularizerVariant,
}

impl AblationSuite {
    pub const ALL: [AblationSuite; 4] = [
        AblationSuite::Kappa,
        AblationSuite::ValueMax,
        AblationSuite::NoiseSamples,
        AblationSuite::RegularizerVariant,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AblationSuite::Kappa => "kappa",
            AblationSuite::ValueMax => "value_max",
            AblationSuite::NoiseSamples => "noise_samples",
            AblationSuite::RegularizerVariant => "regularizer_variant",
        }
    }

    /// `(label, config)` for every cell of the grid.
    pub fn grid(self, base: &FanConfig) -> Vec<(String, FanConfig)> {
        let with = |f: &dyn Fn(&mut FanConfig)| {
            let mut c = base.clone();
            f(&mut c);
            c
        };
        match self {
            AblationSuite::Kappa => [0.5, 0.7, 0.9, 0.99]
                .into_iter()
                .map(|k| (format!("kappa={k}"), with(&|c| c.kappa = k)))
                .collect(),
            AblationSuite::ValueMax => ValueMax::ALL
                .iter()
                .copied()
                .map(|v| (format!("value_max={v}"), with(&|c| c.value_max = v)))
                .collect(),
            AblationSuite::NoiseSamples => [1, 4, 16]
                .into_iter()
                .map(|k| (format!("noise_samples={k}"), with(&|c| c.noise_samples = k)))
                .collect(),
            AblationSuite::RegularizerVariant => Variant::ALL
                .iter()
                .copied()
                .map(|v| (format!("variant={v}"), with(&|c| c.variant = v)))
                .collect(),
        }
    }
}

impl FromStr for AblationSuite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationSuite::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation suite '{s}'")))
    }
}

impl fmt::Display for AblationSuite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationCell {
    pub label: String,
    /// Mean success over the last three evaluations, one entry per seed.
    pub success: Vec<f64>,
}

impl AblationCell {
    pub fn mean(&self) -> f64 {
        self.success.iter().sum::<f64>() / self.success.len().max(1) as f64
    }

    /// Sample standard deviation (zero for a single seed).
    pub fn std(&self) -> f64 {
        let n = self.success.len();
        if n < 2 {
            return 0.0;
        }
        let m = self.mean();
        (self.success.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub suite: AblationSuite,
    pub cells: Vec<AblationCell>,
}

impl fmt::Display for AblationTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "suite\tcell\tmean_success\tstd_success\tseeds")?;
        for c in &self.cells {
            writeln!(
                f,
                "{}\t{}\t{:.4}\t{:.4}\t{}",
                self.suite,
                c.label,
                c.mean(),
                c.std(),
                c.success.len()
            )?;
        }
        Ok(())
    }
}

/// Trains every grid cell once per seed (`base.seed + i` for `i < seeds`).
pub fn run_ablation(
    suite: AblationSuite,
    ds: &OfflineDataset,
    base: &FanConfig,
    seeds: usize,
) -> Result<AblationTable> {
    if seeds == 0 {
        return Err(Error::InvalidParam("seeds must be at least 1".into()));
    }
    let mut cells = Vec::new();
    for (label, cfg) in suite.grid(base) {
        let mut success = Vec::with_capacity(seeds);
        for i in 0..seeds {
            let mut c = cfg.clone();
            c.seed = base.seed + i as u64;
            let out = fan_train(ds, &c)?;
            success.push(out.mean_last_success(3).unwrap_or(0.0));
        }
        cells.push(AblationCell { label, success });
    }
    Ok(AblationTable { suite, cells })
}

/// Directory layout: `config.txt`, `pi.fanw`, `v.fanw`, and per ensemble
/// member `q{i}.fanw`, `qt{i}.fanw`, `z{i}.fanw`. Optimizer state is not saved.
pub fn save_checkpoint(dir: impl AsRef<Path>, nets: &FanNets, cfg: &FanConfig) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.txt"), cfg.to_text())?;
    let put = |name: String, net: &crate::nn::DenseNet| -> Result<()> {
        let mut w = BufWriter::new(File::create(dir.join(name))?);
        write_net(&mut w, net)?;
        w.flush()?;
        Ok(())
    };
    put("pi.fanw".into(), &nets.pi.net)?;
    put("v.fanw".into(), &nets.v.net)?;
    for (i, m) in nets.q.members.iter().enumerate() {
        put(format!("q{i}.fanw"), m)?;
    }
    for (i, m) in nets.q_target.ensemble.members.iter().enumerate() {
        put(format!("qt{i}.fanw"), m)?;
    }
    for (i, m) in nets.z.members.iter().enumerate() {
        put(format!("z{i}.fanw"), m)?;
    }
    Ok(())
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<(FanNets, FanConfig)> {
    let dir = dir.as_ref();
    let cfg = FanConfig::parse(&fs::read_to_string(dir.join("config.txt"))?)?;
    let env = ToyEnv::new(cfg.env);
    let (sd, ad) = (env.state_dim, env.action_dim);
    let get = |name: String| -> Result<crate::nn::DenseNet> {
        let f = File::open(dir.join(&name))?;
        read_net(std::io::BufReader::new(f), Activation::Gelu)
            .map_err(|e| Error::Format(format!("{name}: {e}")))
    };
    let pi = OneStepPolicyNet::from_net(get("pi.fanw".into())?, sd, ad, cfg.squash)?;
    let v = FlowPolicyNet::from_net(get("v.fanw".into())?, sd, ad)?;
    let noise_dim = if cfg.noise_conditioned() { ad } else { 0 };
    let members = |prefix: &str| -> Result<Vec<_>> {
        (0..cfg.ensemble).map(|i| get(format!("{prefix}{i}.fanw"))).collect()
    };
    let q = crate::critic::Ensemble::from_members(members("q")?, cfg.aggregation, sd, ad, noise_dim)?;
    let qt = crate::critic::Ensemble::from_members(members("qt")?, cfg.aggregation, sd, ad, noise_dim)?;
    let z = crate::critic::Ensemble::from_members(members("z")?, cfg.aggregation, sd, ad, 0)?;
    let q_target = crate::critic::CriticTargets {
        ensemble: qt,
        smoothing_rate: cfg.polyak_eta,
    };
    Ok((FanNets::assemble(pi, v, q, q_target, z, cfg.lr), cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, BehaviorMix};
    use crate::env::EnvKind;

    fn twin_cfg() -> FanConfig {
        FanConfig {
            env: EnvKind::TwinGoal1d,
            total_steps: 100,
            eval_every: 50,
            eval_episodes: 5,
            hidden: vec![16, 16],
            ..FanConfig::default()
        }
    }

    fn twin_data() -> OfflineDataset {
        generate_dataset(&ToyEnv::twin_goal_1d(), &BehaviorMix::twin_goal(), 2000, 1).unwrap()
    }

    #[test]
    fn flow_does_not_depend_on_the_policy_objective() {
        let data = twin_data();
        let cfg = FanConfig {
            total_steps: 20,
            eval_every: 20,
            eval_episodes: 1,
            ..twin_cfg()
        };
        let fan = fan_train(&data, &cfg).unwrap().nets.v;
        let bc = train_behavior_cloning(&data, &cfg).unwrap().nets.v;
        assert_eq!(fan.net.layers(), bc.net.layers());
    }

    #[test]
    fn scripted_expert_always_succeeds() {
        let env = ToyEnv::point_mass_2d();
        let p = ScriptedPolicy {
            env: env.clone(),
            behavior: Behavior::Goal(0),
        };
        let mut rng = Streams::new(0).stream("eval", 0);
        let stats = evaluate(&p, &env, 50, &mut rng).unwrap();
        assert_eq!(stats.success_rate, 1.0);
        assert!(stats.mean_return > -20.0);
    }

    #[test]
    fn random_policy_rarely_succeeds() {
        let env = ToyEnv::point_mass_2d();
        let p = ScriptedPolicy {
            env: env.clone(),
            behavior: Behavior::Uniform,
        };
        let mut rng = Streams::new(0).stream("eval", 1);
        let stats = evaluate(&p, &env, 200, &mut rng).unwrap();
        assert!(stats.success_rate <= 0.2, "{}", stats.success_rate);
    }

    #[test]
    fn single_episode_stats() {
        let env = ToyEnv::twin_goal_1d();
        let p = ScriptedPolicy {
            env: env.clone(),
            behavior: Behavior::Goal(1),
        };
        let mut rng = Streams::new(0).stream("eval", 2);
        let stats = evaluate(&p, &env, 1, &mut rng).unwrap();
        assert_eq!(stats.success_rate, 1.0);
        assert!(stats.mean_return <= 0.0 && stats.mean_return.fract() == 0.0);
        assert!(evaluate(&p, &env, 0, &mut rng).is_err());
    }

    #[test]
    fn smoke_run_reduces_flow_loss() {
        let ds = twin_data();
        let out = fan_train(&ds, &twin_cfg()).unwrap();
        assert_eq!(out.history.len(), 100);
        for l in &out.history {
            for v in [l.actor.flow, l.actor.anchor, l.actor.value, l.critic.td, l.critic.expectile] {
                assert!(v.is_finite());
            }
        }
        let first: f64 = out.history[..10].iter().map(|l| l.actor.flow).sum();
        let last: f64 = out.history[90..].iter().map(|l| l.actor.flow).sum();
        assert!(last < first, "{last} vs {first}");
        assert_eq!(out.log.iter().map(|r| r.step).collect::<Vec<_>>(), vec![50, 100]);
    }

    #[test]
    fn training_is_deterministic() {
        let ds = twin_data();
        let mut cfg = twin_cfg();
        cfg.total_steps = 30;
        cfg.eval_every = 10;
        let a = fan_train(&ds, &cfg).unwrap();
        let b = fan_train(&ds, &cfg).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.nets, b.nets);
    }

    #[test]
    fn unregularized_run_works() {
        let ds = twin_data();
        let mut cfg = twin_cfg();
        cfg.total_steps = 20;
        cfg.alpha1 = 0.0;
        cfg.alpha2 = 0.0;
        cfg.value_max = ValueMax::QOnly;
        fan_train(&ds, &cfg).unwrap();
    }

    #[test]
    fn every_variant_trains() {
        let ds = twin_data();
        for &v in Variant::ALL {
            let mut cfg = twin_cfg();
            cfg.total_steps = 10;
            cfg.variant = v;
            cfg.noise_samples = 2;
            fan_train(&ds, &cfg).unwrap();
        }
    }

    #[test]
    fn divergence_aborts_with_step_and_loss() {
        let ds = twin_data();
        let mut cfg = twin_cfg();
        cfg.total_steps = 5;
        let mut trainer = Trainer::new(&ds, &cfg).unwrap();
        trainer.nets.v.net = trainer.nets.v.net.scaled(f64::INFINITY);
        let err = trainer.step().unwrap_err();
        // the critic update runs first and already needs the flow
        assert!(matches!(err, Error::Aborted { step: 1, loss: "L_Q" }), "{err}");

        let mut trainer = Trainer::new(&ds, &cfg).unwrap().behavior_cloning();
        trainer.step().unwrap();
        trainer.nets.v.net = trainer.nets.v.net.scaled(f64::NAN);
        let err = trainer.step().unwrap_err();
        assert!(matches!(err, Error::Aborted { step: 2, loss: "L_F" }), "{err}");
    }

    #[test]
    fn online_buffer_bookkeeping() {
        let ds = twin_data();
        let mut cfg = twin_cfg();
        cfg.total_steps = 10;
        let out = fan_train(&ds, &cfg).unwrap();
        cfg.online_steps = 15;
        cfg.env_steps_per_update = 2;
        cfg.eval_every = 5;
        let on = finetune_online(out.nets, &ds, &cfg).unwrap();
        assert_eq!(on.buffer.len(), ds.len() + 30);
        assert_eq!(on.env_steps, 30);
        assert_eq!(on.log.len(), 3);
    }

    #[test]
    fn checkpoint_round_trip() {
        let ds = twin_data();
        let mut cfg = twin_cfg();
        cfg.total_steps = 5;
        let out = fan_train(&ds, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &out.nets, &cfg).unwrap();
        let (nets, cfg2) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(cfg2, cfg);
        assert_eq!(nets.pi, out.nets.pi);
        assert_eq!(nets.q_target, out.nets.q_target);
        assert_eq!(nets.z, out.nets.z);
        fs::remove_file(dir.path().join("z1.fanw")).unwrap();
        assert!(load_checkpoint(dir.path()).is_err());
    }

    #[test]
    fn metrics_csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let row = MetricsRow {
            step: 1,
            l_f: 0.5,
            l_b: 0.25,
            l_p: -1.0,
            l_q: 2.0,
            l_z: 0.125,
            eval_return: -10.0,
            eval_success_rate: 0.5,
            wall_notes: "offline".into(),
        };
        append_metrics_csv(&path, std::slice::from_ref(&row)).unwrap();
        append_metrics_csv(&path, &[MetricsRow { step: 2, ..row }]).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], METRICS_HEADER);
        assert_eq!(lines[1], "1,0.5,0.25,-1,2,0.125,-10,0.5,offline");
        assert_eq!(lines.len(), 3);
    }

    #[test]
    fn ablation_grids() {
        let base = FanConfig::default();
        let kappas: Vec<f64> = AblationSuite::Kappa.grid(&base).iter().map(|(_, c)| c.kappa).collect();
        assert_eq!(kappas, vec![0.5, 0.7, 0.9, 0.99]);
        let ks: Vec<usize> = AblationSuite::NoiseSamples
            .grid(&base)
            .iter()
            .map(|(_, c)| c.noise_samples)
            .collect();
        assert_eq!(ks, vec![1, 4, 16]);
        assert_eq!(AblationSuite::ValueMax.grid(&base).len(), 3);
        assert_eq!(AblationSuite::RegularizerVariant.grid(&base).len(), 4);
        for s in AblationSuite::ALL {
            assert_eq!(s.as_str().parse::<AblationSuite>().unwrap(), s);
        }
    }

    #[test]
    fn tiny_ablation_table() {
        let ds = twin_data();
        let mut cfg = twin_cfg();
        cfg.total_steps = 4;
        cfg.eval_every = 2;
        let table = run_ablation(AblationSuite::ValueMax, &ds, &cfg, 2).unwrap();
        assert_eq!(table.cells.len(), 3);
        assert!(table.cells.iter().all(|c| c.success.len() == 2));
        let text = table.to_string();
        assert!(text.starts_with("suite\tcell\tmean_success"));
        assert_eq!(text.lines().count(), 4);
    }
}
