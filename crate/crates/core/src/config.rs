//! Training configuration and its flat `key = value` text form.
//!
//! Recognised keys (unknown keys are an error):
//!
//! | key | default |
//! |---|---|
//! | `env` | `point_mass_2d` |
//! | `gamma` | `0.995` |
//! | `lr` | `0.0003` |
//! | `batch_size` | `64` |
//! | `total_steps` | `50000` |
//! | `eval_every` | `5000` |
//! | `eval_episodes` | `50` |
//! | `seed` | `0` |
//! | `net.hidden` | `64,64` |
//! | `actor.alpha1` | `10` |
//! | `actor.variant` | `fan` (`fan`, `faql`, `nbrac`, `nfql`) |
//! | `actor.value_max` | `both` (`both`, `q_only`, `z_only`) |
//! | `actor.squash` | `clamp` (`clamp`, `tanh`) |
//! | `actor.nfql_flow_steps` | `10` |
//! | `critic.kappa` | `0.9` |
//! | `critic.alpha2` | `0.1` |
//! | `critic.noise_samples` | `1` |
//! | `critic.aggregation` | `mean` (`mean`, `min`) |
//! | `critic.polyak_eta` | `0.005` |
//! | `critic.ensemble` | `2` |
//! | `online.steps` | `20000` |
//! | `online.env_steps_per_update` | `1` |

use std::fmt;
use std::str::FromStr;

use crate::env::EnvKind;
use crate::error::{Error, Result};

/// Behavior-regularization / critic variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Flow anchoring in actor and critic, noise-conditioned critic.
    Fan,
    /// Flow anchoring with a plain `Q(s, a)` critic and expected-value targets.
    Faql,
    /// Squared distance to the dataset action as the actor regularizer.
    Nbrac,
    /// Squared distance to a multi-step Euler sample of the behavior flow.
    Nfql,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ValueMax {
    Both,
    QOnly,
    ZOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Aggregation {
    Mean,
    Min,
}

/// How raw policy outputs are mapped into the action box.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Squash {
    Clamp,
    Tanh,
}

macro_rules! text_enum {
    ($ty:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        impl $ty {
            pub const ALL: &'static [$ty] = &[$($ty::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($ty::$variant => $text),+
                }
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($ty::$variant),)+
                    other => Err(Error::Config(format!(
                        "unknown {} '{other}'",
                        stringify!($ty).to_lowercase()
                    ))),
                }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
    };
}

text_enum!(Variant { Fan => "fan", Faql => "faql", Nbrac => "nbrac", Nfql => "nfql" });
text_enum!(ValueMax { Both => "both", QOnly => "q_only", ZOnly => "z_only" });
text_enum!(Aggregation { Mean => "mean", Min => "min" });
text_enum!(Squash { Clamp => "clamp", Tanh => "tanh" });

#[derive(Clone, Debug, PartialEq)]
pub struct FanConfig {
    pub env: EnvKind,
    pub gamma: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub total_steps: u64,
    pub eval_every: u64,
    pub eval_episodes: usize,
    pub seed: u64,
    pub hidden: Vec<usize>,
    pub alpha1: f64,
    pub variant: Variant,
    pub value_max: ValueMax,
    pub squash: Squash,
    pub nfql_flow_steps: usize,
    pub kappa: f64,
    pub alpha2: f64,
    pub noise_samples: usize,
    pub aggregation: Aggregation,
    pub polyak_eta: f64,
    pub ensemble: usize,
    pub online_steps: u64,
    pub env_steps_per_update: usize,
}

impl Default for FanConfig {
    fn default() -> Self {
        Self {
            env: EnvKind::PointMass2d,
            gamma: 0.995,
            lr: 3e-4,
            batch_size: 64,
            total_steps: 50_000,
            eval_every: 5_000,
            eval_episodes: 50,
            seed: 0,
            hidden: vec![64, 64],
            alpha1: 10.0,
            variant: Variant::Fan,
            value_max: ValueMax::Both,
            squash: Squash::Clamp,
            nfql_flow_steps: 10,
            kappa: 0.9,
            alpha2: 0.1,
            noise_samples: 1,
            aggregation: Aggregation::Mean,
            polyak_eta: 0.005,
            ensemble: 2,
            online_steps: 20_000,
            env_steps_per_update: 1,
        }
    }
}

impl FanConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad("gamma must lie in (0, 1)");
        }
        if !(self.kappa > 0.0 && self.kappa < 1.0) {
            return bad("critic.kappa must lie in (0, 1)");
        }
        if !(self.polyak_eta > 0.0 && self.polyak_eta <= 1.0) {
            return bad("critic.polyak_eta must lie in (0, 1]");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.alpha1 >= 0.0 && self.alpha1.is_finite()) {
            return bad("actor.alpha1 must be a finite non-negative number");
        }
        if !(self.alpha2 >= 0.0 && self.alpha2.is_finite()) {
            return bad("critic.alpha2 must be a finite non-negative number");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.eval_every == 0 || self.eval_episodes == 0 {
            return bad("eval_every and eval_episodes must be positive");
        }
        if self.noise_samples == 0 || self.ensemble == 0 || self.nfql_flow_steps == 0 {
            return bad("critic.noise_samples, critic.ensemble and actor.nfql_flow_steps must be positive");
        }
        if self.hidden.contains(&0) {
            return bad("net.hidden widths must be positive");
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("{key}: cannot parse '{value}'")))
        }
        match key {
            "env" => self.env = value.parse()?,
            "gamma" => self.gamma = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "total_steps" => self.total_steps = num(key, value)?,
            "eval_every" => self.eval_every = num(key, value)?,
            "eval_episodes" => self.eval_episodes = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "net.hidden" => {
                self.hidden = if value.trim().is_empty() {
                    Vec::new()
                } else {
                    value
                        .split(',')
                        .map(|w| num(key, w.trim()))
                        .collect::<Result<_>>()?
                }
            }
            "actor.alpha1" => self.alpha1 = num(key, value)?,
            "actor.variant" => self.variant = value.parse()?,
            "actor.value_max" => self.value_max = value.parse()?,
            "actor.squash" => self.squash = value.parse()?,
            "actor.nfql_flow_steps" => self.nfql_flow_steps = num(key, value)?,
            "critic.kappa" => self.kappa = num(key, value)?,
            "critic.alpha2" => self.alpha2 = num(key, value)?,
            "critic.noise_samples" => self.noise_samples = num(key, value)?,
            "critic.aggregation" => self.aggregation = value.parse()?,
            "critic.polyak_eta" => self.polyak_eta = num(key, value)?,
            "critic.ensemble" => self.ensemble = num(key, value)?,
            "online.steps" => self.online_steps = num(key, value)?,
            "online.env_steps_per_update" => self.env_steps_per_update = num(key, value)?,
            other => return Err(Error::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`. `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value", lineno + 1))
            })?;
            self.set(key.trim(), value.trim()).map_err(|e| match e {
                Error::Config(msg) => Error::Config(format!("line {}: {msg}", lineno + 1)),
                other => Error::Config(format!("line {}: {other}", lineno + 1)),
            })?;
        }
        self.validate()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let hidden = self
            .hidden
            .iter()
            .map(|w| w.to_string())
            .collect::<Vec<_>>()
            .join(",");
        let pairs: Vec<(&str, String)> = vec![
            ("env", self.env.to_string()),
            ("gamma", self.gamma.to_string()),
            ("lr", self.lr.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("total_steps", self.total_steps.to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("eval_episodes", self.eval_episodes.to_string()),
            ("seed", self.seed.to_string()),
            ("net.hidden", hidden),
            ("actor.alpha1", self.alpha1.to_string()),
            ("actor.variant", self.variant.to_string()),
            ("actor.value_max", self.value_max.to_string()),
            ("actor.squash", self.squash.to_string()),
            ("actor.nfql_flow_steps", self.nfql_flow_steps.to_string()),
            ("critic.kappa", self.kappa.to_string()),
            ("critic.alpha2", self.alpha2.to_string()),
            ("critic.noise_samples", self.noise_samples.to_string()),
            ("critic.aggregation", self.aggregation.to_string()),
            ("critic.polyak_eta", self.polyak_eta.to_string()),
            ("critic.ensemble", self.ensemble.to_string()),
            ("online.steps", self.online_steps.to_string()),
            ("online.env_steps_per_update", self.env_steps_per_update.to_string()),
        ];
        pairs
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Whether the critic takes a noise input.
    pub fn noise_conditioned(&self) -> bool {
        self.variant != Variant::Faql
    }
}
