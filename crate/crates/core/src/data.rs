//! Offline datasets: scripted generation, minibatch sampling and the binary
//! `FAND` file format.
//!
//! Values are held as `f64` but always rounded to `f32` on insertion, so a
//! dataset survives a write/read cycle bit for bit.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::env::ToyEnv;
use crate::error::{shape_err, Error, Result};
use crate::nn::{read_exact, read_u32};
use crate::rng::Streams;

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub terminal: bool,
}

/// Columnar transition store.
#[derive(Clone, Debug, PartialEq)]
pub struct OfflineDataset {
    state_dim: usize,
    action_dim: usize,
    pub r_min: f64,
    pub r_max: f64,
    states: Vec<f64>,
    actions: Vec<f64>,
    rewards: Vec<f64>,
    next_states: Vec<f64>,
    terminals: Vec<bool>,
}

/// A minibatch in matrix form. `terminals` holds `1.0` on episode ends.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub states: Array2<f64>,
    pub actions: Array2<f64>,
    pub rewards: Array1<f64>,
    pub next_states: Array2<f64>,
    pub terminals: Array1<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.states.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn f32_round(x: f64) -> f64 {
    x as f32 as f64
}

impl OfflineDataset {
    pub fn empty(state_dim: usize, action_dim: usize, r_min: f64, r_max: f64) -> Self {
        Self {
            state_dim,
            action_dim,
            r_min,
            r_max,
            states: Vec::new(),
            actions: Vec::new(),
            rewards: Vec::new(),
            next_states: Vec::new(),
            terminals: Vec::new(),
        }
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn push(&mut self, t: &Transition) -> Result<()> {
        if t.state.len() != self.state_dim
            || t.next_state.len() != self.state_dim
            || t.action.len() != self.action_dim
        {
            return Err(shape_err("transition does not match dataset dimensions"));
        }
        if !(t.reward >= self.r_min && t.reward <= self.r_max) {
            return Err(Error::InvalidParam(format!(
                "reward {} outside [{}, {}]",
                t.reward, self.r_min, self.r_max
            )));
        }
        self.states.extend(t.state.iter().map(|&v| f32_round(v)));
        self.actions.extend(t.action.iter().map(|&v| f32_round(v)));
        self.rewards.push(f32_round(t.reward));
        self.next_states.extend(t.next_state.iter().map(|&v| f32_round(v)));
        self.terminals.push(t.terminal);
        Ok(())
    }

    pub fn row(&self, i: usize) -> Transition {
        let (s, a) = (self.state_dim, self.action_dim);
        Transition {
            state: self.states[i * s..(i + 1) * s].to_vec(),
            action: self.actions[i * a..(i + 1) * a].to_vec(),
            reward: self.rewards[i],
            next_state: self.next_states[i * s..(i + 1) * s].to_vec(),
            terminal: self.terminals[i],
        }
    }

    pub fn rows(&self) -> impl Iterator<Item = Transition> + '_ {
        (0..self.len()).map(|i| self.row(i))
    }

    pub fn gather(&self, indices: &[usize]) -> Batch {
        let (s, a) = (self.state_dim, self.action_dim);
        let n = indices.len();
        let mut batch = Batch {
            states: Array2::zeros((n, s)),
            actions: Array2::zeros((n, a)),
            rewards: Array1::zeros(n),
            next_states: Array2::zeros((n, s)),
            terminals: Array1::zeros(n),
        };
        for (r, &i) in indices.iter().enumerate() {
            for j in 0..s {
                batch.states[[r, j]] = self.states[i * s + j];
                batch.next_states[[r, j]] = self.next_states[i * s + j];
            }
            for j in 0..a {
                batch.actions[[r, j]] = self.actions[i * a + j];
            }
            batch.rewards[r] = self.rewards[i];
            batch.terminals[r] = if self.terminals[i] { 1.0 } else { 0.0 };
        }
        batch
    }

    pub fn all(&self) -> Batch {
        self.gather(&(0..self.len()).collect::<Vec<_>>())
    }

    /// Splits the rows into episodes and counts the successful ones. A row
    /// ends an episode when it is terminal, is the last row, or the next
    /// row does not start from its successor state.
    pub fn episode_stats(&self) -> EpisodeStats {
        let s = self.state_dim;
        let mut stats = EpisodeStats::default();
        for i in 0..self.len() {
            let ends = self.terminals[i]
                || i + 1 == self.len()
                || self.states[(i + 1) * s..(i + 2) * s] != self.next_states[i * s..(i + 1) * s];
            if ends {
                stats.episodes += 1;
                stats.successes += usize::from(self.terminals[i]);
            }
        }
        stats
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EpisodeStats {
    pub episodes: usize,
    pub successes: usize,
}

impl EpisodeStats {
    pub fn success_rate(&self) -> f64 {
        if self.episodes == 0 {
            0.0
        } else {
            self.successes as f64 / self.episodes as f64
        }
    }
}

/// Uniform i.i.d. row indices, with replacement.
pub fn sample_batch<R: Rng + ?Sized>(
    ds: &OfflineDataset,
    batch_size: usize,
    rng: &mut R,
) -> Result<Batch> {
    if ds.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let indices: Vec<usize> = (0..batch_size).map(|_| rng.random_range(0..ds.len())).collect();
    Ok(ds.gather(&indices))
}

/// Scripted controller driving one episode.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Behavior {
    /// Steer to `env.goals[i]`.
    Goal(usize),
    /// Steer to the decoy point and hover there.
    Decoy,
    /// Uniform random actions.
    Uniform,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixComponent {
    pub behavior: Behavior,
    pub weight: f64,
    /// Index into `env.start_zones`.
    pub zone: usize,
}

/// Episode-level mixture of scripted behaviors plus Gaussian action noise.
#[derive(Clone, Debug, PartialEq)]
pub struct BehaviorMix {
    pub components: Vec<MixComponent>,
    pub action_noise: f64,
}

impl BehaviorMix {
    /// Goal-seeking from every start zone with equal weight.
    pub fn expert(env: &ToyEnv, action_noise: f64) -> Self {
        let components = (0..env.start_zones.len())
            .map(|zone| MixComponent {
                behavior: Behavior::Goal(0),
                weight: 1.0,
                zone,
            })
            .collect();
        Self {
            components,
            action_noise,
        }
    }

    /// Point-mass mixture with a 70% episode success rate. The upper zone is
    /// always solved; from the lower zone 60% of episodes go to the decoy.
    pub fn mixed_quality() -> Self {
        Self {
            components: vec![
                MixComponent {
                    behavior: Behavior::Goal(0),
                    weight: 0.5,
                    zone: 0,
                },
                MixComponent {
                    behavior: Behavior::Goal(0),
                    weight: 0.2,
                    zone: 1,
                },
                MixComponent {
                    behavior: Behavior::Decoy,
                    weight: 0.3,
                    zone: 1,
                },
            ],
            action_noise: 0.1,
        }
    }

    /// Half the episodes to each twin goal.
    pub fn twin_goal() -> Self {
        Self {
            components: vec![
                MixComponent {
                    behavior: Behavior::Goal(0),
                    weight: 0.5,
                    zone: 0,
                },
                MixComponent {
                    behavior: Behavior::Goal(1),
                    weight: 0.5,
                    zone: 0,
                },
            ],
            action_noise: 0.02,
        }
    }

    pub fn validate(&self, env: &ToyEnv) -> Result<()> {
        if self.components.is_empty() {
            return Err(Error::InvalidParam("behavior mix has no components".into()));
        }
        for c in &self.components {
            if !(c.weight.is_finite() && c.weight >= 0.0) {
                return Err(Error::InvalidParam(format!("invalid mix weight {}", c.weight)));
            }
            if c.zone >= env.start_zones.len() {
                return Err(Error::InvalidParam(format!("no start zone {}", c.zone)));
            }
            match c.behavior {
                Behavior::Goal(g) if g >= env.goals.len() => {
                    return Err(Error::InvalidParam(format!("no goal {g}")))
                }
                Behavior::Decoy if env.decoy.is_none() => {
                    return Err(Error::InvalidParam("env has no decoy".into()))
                }
                _ => {}
            }
        }
        let total: f64 = self.components.iter().map(|c| c.weight).sum();
        if total <= 0.0 {
            return Err(Error::InvalidParam("mix weights sum to zero".into()));
        }
        if !(self.action_noise >= 0.0 && self.action_noise.is_finite()) {
            return Err(Error::InvalidParam("action noise must be non-negative".into()));
        }
        Ok(())
    }

    fn pick<R: Rng + ?Sized>(&self, rng: &mut R) -> &MixComponent {
        let total: f64 = self.components.iter().map(|c| c.weight).sum();
        let mut u = rng.random::<f64>() * total;
        for c in &self.components {
            if u < c.weight {
                return c;
            }
            u -= c.weight;
        }
        self.components
            .iter()
            .rev()
            .find(|c| c.weight > 0.0)
            .expect("validated mix has positive weight")
    }
}

/// Noise-free scripted action, already clamped to the action box.
pub fn scripted_action<R: Rng + ?Sized>(
    env: &ToyEnv,
    behavior: Behavior,
    state: &[f64],
    rng: &mut R,
) -> Vec<f64> {
    match behavior {
        Behavior::Goal(g) => env.steer(state, &env.goals[g]),
        Behavior::Decoy => env.steer(state, env.decoy.as_ref().expect("decoy present")),
        Behavior::Uniform => (0..env.action_dim)
            .map(|_| rng.random_range(-1.0..=1.0))
            .collect(),
    }
}

/// Rolls out episodes from `mix` until `n_transitions` rows are collected
/// (the last episode may be cut short). Stored actions are the clamped
/// actions the environment executed.
pub fn generate_dataset(
    env: &ToyEnv,
    mix: &BehaviorMix,
    n_transitions: usize,
    seed: u64,
) -> Result<OfflineDataset> {
    if n_transitions == 0 {
        return Err(Error::InvalidParam("n_transitions must be at least 1".into()));
    }
    mix.validate(env)?;
    let (r_min, r_max) = env.reward_bounds();
    let mut ds = OfflineDataset::empty(env.state_dim, env.action_dim, r_min, r_max);
    let mut rng = Streams::new(seed).stream("generate", 0);
    while ds.len() < n_transitions {
        let comp = mix.pick(&mut rng);
        let mut state = env.reset_in_zone(comp.zone, &mut rng);
        for _ in 0..env.horizon {
            let mut action = scripted_action(env, comp.behavior, &state, &mut rng);
            if mix.action_noise > 0.0 {
                for a in action.iter_mut() {
                    let n: f64 = rng.sample(StandardNormal);
                    *a = (*a + mix.action_noise * n).clamp(-1.0, 1.0);
                }
            }
            let out = env.step(&state, &action)?;
            ds.push(&Transition {
                state: state.clone(),
                action,
                reward: out.reward,
                next_state: out.next_state.clone(),
                terminal: out.terminal,
            })?;
            if out.terminal || ds.len() >= n_transitions {
                break;
            }
            state = out.next_state;
        }
    }
    Ok(ds)
}

const DATA_MAGIC: &[u8; 4] = b"FAND";
const DATA_VERSION: u32 = 1;

/// `FAND | u32 version | u32 state_dim | u32 action_dim | u64 count |
/// f64 r_min | f64 r_max | rows`, little-endian; each row is
/// `state f32 x S, action f32 x A, reward f32, next_state f32 x S, terminal u8`.
pub fn write_dataset_to<W: Write>(mut w: W, ds: &OfflineDataset) -> Result<()> {
    w.write_all(DATA_MAGIC)?;
    w.write_all(&DATA_VERSION.to_le_bytes())?;
    w.write_all(&(ds.state_dim as u32).to_le_bytes())?;
    w.write_all(&(ds.action_dim as u32).to_le_bytes())?;
    w.write_all(&(ds.len() as u64).to_le_bytes())?;
    w.write_all(&ds.r_min.to_le_bytes())?;
    w.write_all(&ds.r_max.to_le_bytes())?;
    let put = |w: &mut W, vals: &[f64]| -> Result<()> {
        for &v in vals {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
        Ok(())
    };
    let (s, a) = (ds.state_dim, ds.action_dim);
    for i in 0..ds.len() {
        put(&mut w, &ds.states[i * s..(i + 1) * s])?;
        put(&mut w, &ds.actions[i * a..(i + 1) * a])?;
        put(&mut w, &ds.rewards[i..i + 1])?;
        put(&mut w, &ds.next_states[i * s..(i + 1) * s])?;
        w.write_all(&[ds.terminals[i] as u8])?;
    }
    Ok(())
}

pub fn read_dataset_from<R: Read>(mut r: R) -> Result<OfflineDataset> {
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic")?;
    if &magic != DATA_MAGIC {
        return Err(Error::Format(format!("bad dataset magic {magic:?}")));
    }
    let version = read_u32(&mut r, "version")?;
    if version != DATA_VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let state_dim = read_u32(&mut r, "state_dim")? as usize;
    let action_dim = read_u32(&mut r, "action_dim")? as usize;
    let mut b8 = [0u8; 8];
    read_exact(&mut r, &mut b8, "count")?;
    let count = u64::from_le_bytes(b8) as usize;
    read_exact(&mut r, &mut b8, "r_min")?;
    let r_min = f64::from_le_bytes(b8);
    read_exact(&mut r, &mut b8, "r_max")?;
    let r_max = f64::from_le_bytes(b8);

    let row_bytes = 4 * (2 * state_dim + action_dim + 1) + 1;
    let mut ds = OfflineDataset::empty(state_dim, action_dim, r_min, r_max);
    let mut buf = vec![0u8; row_bytes];
    let f = |b: &[u8]| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64;
    for i in 0..count {
        read_exact(&mut r, &mut buf, &format!("row {i}"))?;
        let mut vals = buf[..row_bytes - 1].chunks_exact(4).map(f);
        let state: Vec<f64> = vals.by_ref().take(state_dim).collect();
        let action: Vec<f64> = vals.by_ref().take(action_dim).collect();
        let reward = vals.next().expect("reward slot");
        let next_state: Vec<f64> = vals.take(state_dim).collect();
        let terminal = match buf[row_bytes - 1] {
            0 => false,
            1 => true,
            other => return Err(Error::Format(format!("row {i}: terminal byte {other}"))),
        };
        ds.push(&Transition {
            state,
            action,
            reward,
            next_state,
            terminal,
        })
        .map_err(|e| Error::Format(format!("row {i}: {e}")))?;
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Format("trailing bytes after the last row".into()));
    }
    Ok(ds)
}

pub fn write_dataset(path: impl AsRef<Path>, ds: &OfflineDataset) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_dataset_to(&mut w, ds)?;
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<OfflineDataset> {
    read_dataset_from(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::ToyEnv;

    fn small() -> OfflineDataset {
        generate_dataset(&ToyEnv::point_mass_2d(), &BehaviorMix::mixed_quality(), 500, 3).unwrap()
    }

    #[test]
    fn generation_is_deterministic() {
        let mut a = Vec::new();
        let mut b = Vec::new();
        write_dataset_to(&mut a, &small()).unwrap();
        write_dataset_to(&mut b, &small()).unwrap();
        assert_eq!(a, b);
        assert_eq!(small().len(), 500);
    }

    #[test]
    fn noiseless_expert_always_succeeds() {
        let env = ToyEnv::point_mass_2d();
        let ds = generate_dataset(&env, &BehaviorMix::expert(&env, 0.0), 2000, 1).unwrap();
        assert!(ds.rows().any(|t| t.reward == 0.0));
        // every complete episode ends in a terminal row
        let mut run = 0;
        for t in ds.rows() {
            run += 1;
            if t.terminal {
                run = 0;
            }
            assert!(run < env.horizon, "an episode hit the horizon");
        }
    }

    #[test]
    fn episode_boundaries() {
        let env = ToyEnv::point_mass_2d();
        let ds = generate_dataset(&env, &BehaviorMix::expert(&env, 0.0), 500, 0).unwrap();
        let stats = ds.episode_stats();
        let terminals = ds.rows().filter(|t| t.terminal).count();
        assert_eq!(stats.successes, terminals);
        // every episode succeeds except possibly the cut-off last one
        assert!(stats.episodes - stats.successes <= 1, "{stats:?}");

        let mixed = generate_dataset(&env, &BehaviorMix::mixed_quality(), 20_000, 1).unwrap();
        let rate = mixed.episode_stats().success_rate();
        assert!((rate - 0.7).abs() < 0.05, "{rate}");
    }

    #[test]
    fn rewards_stay_in_bounds() {
        let ds = small();
        assert!(ds.rows().all(|t| t.reward >= ds.r_min && t.reward <= ds.r_max));
    }

    #[test]
    fn invalid_mix_is_rejected() {
        let env = ToyEnv::twin_goal_1d();
        let mut mix = BehaviorMix::twin_goal();
        mix.components[0].weight = -1.0;
        assert!(generate_dataset(&env, &mix, 10, 0).is_err());
        let mut mix = BehaviorMix::twin_goal();
        mix.components[0].behavior = Behavior::Decoy;
        assert!(generate_dataset(&env, &mix, 10, 0).is_err());
        let zero = BehaviorMix {
            components: vec![MixComponent {
                behavior: Behavior::Goal(0),
                weight: 0.0,
                zone: 0,
            }],
            action_noise: 0.0,
        };
        assert!(generate_dataset(&env, &zero, 10, 0).is_err());
    }

    #[test]
    fn singleton_batch_is_a_row() {
        let ds = small();
        let mut rng = Streams::new(0).stream("t", 0);
        let b = sample_batch(&ds, 1, &mut rng).unwrap();
        let row = (0..ds.len())
            .map(|i| ds.row(i))
            .find(|t| t.state.as_slice() == b.states.row(0).as_slice().unwrap());
        let row = row.expect("batch row comes from the dataset");
        assert_eq!(row.action, b.actions.row(0).to_vec());
    }

    #[test]
    fn batch_indices_reproducible() {
        let ds = small();
        let s = Streams::new(7);
        let a = sample_batch(&ds, 32, &mut s.stream("batch", 1)).unwrap();
        let b = sample_batch(&ds, 32, &mut s.stream("batch", 1)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sampling_is_uniform_over_rows() {
        let env = ToyEnv::twin_goal_1d();
        let mut ds = OfflineDataset::empty(1, 1, -1.0, 0.0);
        for i in 0..10 {
            ds.push(&Transition {
                state: vec![i as f64],
                action: vec![0.0],
                reward: -1.0,
                next_state: vec![0.0],
                terminal: false,
            })
            .unwrap();
        }
        let _ = env;
        let mut rng = Streams::new(1).stream("uniform", 0);
        let b = sample_batch(&ds, 100_000, &mut rng).unwrap();
        let mut counts = [0usize; 10];
        for &s in b.states.column(0) {
            counts[s as usize] += 1;
        }
        for c in counts {
            let freq = c as f64 / 100_000.0;
            assert!((freq - 0.1).abs() < 0.005, "{freq}");
        }
    }

    #[test]
    fn empty_dataset_cannot_be_sampled() {
        let ds = OfflineDataset::empty(1, 1, -1.0, 0.0);
        let mut rng = Streams::new(1).stream("x", 0);
        assert!(matches!(sample_batch(&ds, 4, &mut rng), Err(Error::EmptyBatch)));
    }

    #[test]
    fn file_errors() {
        let ds = small();
        let mut bytes = Vec::new();
        write_dataset_to(&mut bytes, &ds).unwrap();
        assert_eq!(read_dataset_from(&bytes[..]).unwrap(), ds);
        let truncated = &bytes[..bytes.len() - 5];
        assert!(matches!(read_dataset_from(truncated), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(read_dataset_from(&bad[..]), Err(Error::Format(_))));
        assert!(matches!(read_dataset(""), Err(Error::Io(_))));
    }
}
