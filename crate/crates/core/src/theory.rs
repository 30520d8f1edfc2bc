//! Brute-force checks of the contraction, expectile-limit and anchoring
//! results on instances small enough to evaluate exactly.
//!
//! Noise is discretized into `m` equally weighted atoms, so the essential
//! supremum over critic noise is a plain maximum over atoms.

use std::fmt;

use nalgebra::DMatrix;
use ndarray::{s, Array1, Array2, ArrayView2};
use rand::Rng;

use crate::actor::OneStepPolicyNet;
use crate::error::{shape_err, Error, Result};
use crate::flow::{euler_integrate_batch, FlowPolicyNet};
use crate::rng::{normal_matrix, uniform_unit};

/// Finite MDP with deterministic transitions, noise atoms and a tabular
/// noise-conditioned policy `pi[s][atom] -> action`.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularNoiseMDP {
    pub n_states: usize,
    pub n_actions: usize,
    pub rewards: Vec<Vec<f64>>,
    pub next_state: Vec<Vec<usize>>,
    pub gamma: f64,
    pub noise_atoms: Vec<f64>,
    pub policy: Vec<Vec<usize>>,
}

impl TabularNoiseMDP {
    pub fn new(
        rewards: Vec<Vec<f64>>,
        next_state: Vec<Vec<usize>>,
        gamma: f64,
        noise_atoms: Vec<f64>,
        policy: Vec<Vec<usize>>,
    ) -> Result<Self> {
        let n_states = rewards.len();
        let n_actions = rewards.first().map_or(0, Vec::len);
        let m = noise_atoms.len();
        if n_states == 0 || n_actions == 0 || m == 0 {
            return Err(Error::InvalidParam("MDP needs states, actions and noise atoms".into()));
        }
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::InvalidParam(format!("gamma {gamma} outside (0, 1)")));
        }
        let rect = |rows: usize, cols: usize, lens: &mut dyn Iterator<Item = usize>| {
            let l: Vec<usize> = lens.collect();
            l.len() == rows && l.iter().all(|&c| c == cols)
        };
        if !rect(n_states, n_actions, &mut rewards.iter().map(Vec::len))
            || !rect(n_states, n_actions, &mut next_state.iter().map(Vec::len))
            || !rect(n_states, m, &mut policy.iter().map(Vec::len))
        {
            return Err(shape_err("MDP tables are not rectangular"));
        }
        if next_state.iter().flatten().any(|&s| s >= n_states)
            || policy.iter().flatten().any(|&a| a >= n_actions)
        {
            return Err(Error::InvalidParam("state or action index out of range".into()));
        }
        if !rewards.iter().flatten().all(|r| r.is_finite()) {
            return Err(Error::InvalidParam("rewards must be finite".into()));
        }
        Ok(Self {
            n_states,
            n_actions,
            rewards,
            next_state,
            gamma,
            noise_atoms,
            policy,
        })
    }

    /// Uniform random instance with rewards in `[-1, 1]` and standard normal atoms.
    pub fn random<R: Rng + ?Sized>(
        rng: &mut R,
        n_states: usize,
        n_actions: usize,
        n_atoms: usize,
        gamma: f64,
    ) -> Result<Self> {
        let rewards = (0..n_states)
            .map(|_| (0..n_actions).map(|_| rng.random_range(-1.0..=1.0)).collect())
            .collect();
        let next_state = (0..n_states)
            .map(|_| (0..n_actions).map(|_| rng.random_range(0..n_states)).collect())
            .collect();
        let noise_atoms = crate::rng::normal_vec(rng, n_atoms);
        let policy = (0..n_states)
            .map(|_| (0..n_atoms).map(|_| rng.random_range(0..n_actions)).collect())
            .collect();
        Self::new(rewards, next_state, gamma, noise_atoms, policy)
    }

    pub fn n_atoms(&self) -> usize {
        self.noise_atoms.len()
    }

    /// `[r_min / (1 - gamma), r_max / (1 - gamma)]`.
    pub fn return_range(&self) -> (f64, f64) {
        let flat = self.rewards.iter().flatten();
        let lo = flat.clone().copied().fold(f64::INFINITY, f64::min);
        let hi = flat.copied().fold(f64::NEG_INFINITY, f64::max);
        (lo / (1.0 - self.gamma), hi / (1.0 - self.gamma))
    }

    pub fn zeros(&self) -> NoiseQTable {
        NoiseQTable::filled(self.n_states, self.n_actions, self.n_atoms(), 0.0)
    }

    pub fn random_table<R: Rng + ?Sized>(&self, rng: &mut R, lo: f64, hi: f64) -> NoiseQTable {
        let mut q = self.zeros();
        for v in q.values.iter_mut() {
            *v = rng.random_range(lo..=hi);
        }
        q
    }
}

/// `Q[s][a][atom]`, stored flat.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseQTable {
    n_states: usize,
    n_actions: usize,
    n_atoms: usize,
    values: Vec<f64>,
}

impl NoiseQTable {
    pub fn filled(n_states: usize, n_actions: usize, n_atoms: usize, value: f64) -> Self {
        Self {
            n_states,
            n_actions,
            n_atoms,
            values: vec![value; n_states * n_actions * n_atoms],
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.n_states, self.n_actions, self.n_atoms)
    }

    fn idx(&self, s: usize, a: usize, e: usize) -> usize {
        (s * self.n_actions + a) * self.n_atoms + e
    }

    pub fn get(&self, s: usize, a: usize, e: usize) -> f64 {
        self.values[self.idx(s, a, e)]
    }

    pub fn set(&mut self, s: usize, a: usize, e: usize, v: f64) {
        let i = self.idx(s, a, e);
        self.values[i] = v;
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            values: self.values.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

fn check_table(mdp: &TabularNoiseMDP, q: &NoiseQTable) -> Result<()> {
    if q.shape() != (mdp.n_states, mdp.n_actions, mdp.n_atoms()) {
        return Err(shape_err(format!(
            "table shape {:?} does not match MDP ({}, {}, {})",
            q.shape(),
            mdp.n_states,
            mdp.n_actions,
            mdp.n_atoms()
        )));
    }
    Ok(())
}

/// `(T Q)(s, a, e') = r(s, a) + gamma * max_e Q(s', pi(s', e'), e)` with
/// `s'` the successor of `(s, a)`.
pub fn apply_tn(mdp: &TabularNoiseMDP, q: &NoiseQTable) -> Result<NoiseQTable> {
    check_table(mdp, q)?;
    let m = mdp.n_atoms();
    // sup over critic noise of Q(s', pi(s', e'), .) for every (s', e')
    let mut sup = vec![0.0; mdp.n_states * m];
    for sp in 0..mdp.n_states {
        for ep in 0..m {
            let a = mdp.policy[sp][ep];
            sup[sp * m + ep] = (0..m).map(|e| q.get(sp, a, e)).fold(f64::NEG_INFINITY, f64::max);
        }
    }
    let mut out = q.clone();
    for s in 0..mdp.n_states {
        for a in 0..mdp.n_actions {
            let sp = mdp.next_state[s][a];
            for ep in 0..m {
                out.set(s, a, ep, mdp.rewards[s][a] + mdp.gamma * sup[sp * m + ep]);
            }
        }
    }
    Ok(out)
}

/// `max |Q1 - Q2|` over all cells.
pub fn d_infty(q1: &NoiseQTable, q2: &NoiseQTable) -> Result<f64> {
    if q1.shape() != q2.shape() {
        return Err(shape_err("d_infty: tables differ in shape"));
    }
    Ok(q1
        .values
        .iter()
        .zip(&q2.values)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContractionReport {
    pub pairs: usize,
    pub gamma: f64,
    /// Largest `d(TQ1, TQ2) / d(Q1, Q2)`; pairs at distance zero count as 0.
    pub max_ratio: f64,
    /// Pair indices with `d(TQ1, TQ2) > gamma d(Q1, Q2) + 1e-9`.
    pub violations: Vec<usize>,
}

impl ContractionReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

pub const CONTRACTION_TOL: f64 = 1e-9;

/// Random pairs with entries in the return range widened by one on each side.
pub fn verify_contraction<R: Rng + ?Sized>(
    mdp: &TabularNoiseMDP,
    n_pairs: usize,
    rng: &mut R,
) -> Result<ContractionReport> {
    if n_pairs == 0 {
        return Err(Error::InvalidParam("n_pairs must be at least 1".into()));
    }
    let (lo, hi) = mdp.return_range();
    let mut report = ContractionReport {
        pairs: n_pairs,
        gamma: mdp.gamma,
        max_ratio: 0.0,
        violations: Vec::new(),
    };
    for i in 0..n_pairs {
        let q1 = mdp.random_table(rng, lo - 1.0, hi + 1.0);
        let q2 = mdp.random_table(rng, lo - 1.0, hi + 1.0);
        let (before, after) = contraction_sides(mdp, &q1, &q2)?;
        if after > mdp.gamma * before + CONTRACTION_TOL {
            report.violations.push(i);
        }
        if before > 0.0 {
            report.max_ratio = report.max_ratio.max(after / before);
        }
    }
    Ok(report)
}

/// `(d(Q1, Q2), d(T Q1, T Q2))`.
pub fn contraction_sides(
    mdp: &TabularNoiseMDP,
    q1: &NoiseQTable,
    q2: &NoiseQTable,
) -> Result<(f64, f64)> {
    let before = d_infty(q1, q2)?;
    let after = d_infty(&apply_tn(mdp, q1)?, &apply_tn(mdp, q2)?)?;
    Ok((before, after))
}

#[derive(Clone, Debug, PartialEq)]
pub struct FixedPoint {
    pub table: NoiseQTable,
    pub iterations: usize,
    /// `d(Q_{k+1}, Q_k)` for every iteration.
    pub residuals: Vec<f64>,
}

/// Iterates `Q <- T Q` until successive tables are closer than `tol`.
pub fn fixed_point_iterate(
    mdp: &TabularNoiseMDP,
    q0: &NoiseQTable,
    tol: f64,
) -> Result<FixedPoint> {
    if tol.is_nan() || tol <= 0.0 {
        return Err(Error::InvalidParam("tol must be positive".into()));
    }
    check_table(mdp, q0)?;
    let mut q = q0.clone();
    let mut residuals = Vec::new();
    loop {
        let next = apply_tn(mdp, &q)?;
        let r = d_infty(&next, &q)?;
        residuals.push(r);
        q = next;
        // a contraction always gets here; the cap only guards NaN input
        if r < tol || !r.is_finite() || residuals.len() >= 10_000_000 {
            break;
        }
    }
    if !q.is_finite() {
        return Err(Error::NonFiniteLoss { loss: "fixed point" });
    }
    Ok(FixedPoint {
        table: q,
        iterations: residuals.len(),
        residuals,
    })
}

/// `ceil(log(tol / d0) / log(gamma)) + 2`.
pub fn iteration_bound(gamma: f64, tol: f64, d0: f64) -> usize {
    if d0 <= tol {
        return 2;
    }
    ((tol / d0).ln() / gamma.ln()).ceil() as usize + 2
}

/// Root of `kappa E[(X - q)+] = (1 - kappa) E[(q - X)+]` by bisection on
/// `[min, max]`.
pub fn expectile_1d(samples: &[f64], kappa: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyBatch);
    }
    crate::critic::check_kappa(kappa)?;
    if !samples.iter().all(|x| x.is_finite()) {
        return Err(Error::InvalidParam("samples must be finite".into()));
    }
    let (mut lo, mut hi) = min_max(samples);
    // strictly decreasing in q wherever the samples are not all equal
    let foc = |q: f64| {
        let (mut up, mut down) = (0.0, 0.0);
        for &x in samples {
            if x > q {
                up += x - q;
            } else {
                down += q - x;
            }
        }
        kappa * up - (1.0 - kappa) * down
    };
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if foc(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

fn min_max(xs: &[f64]) -> (f64, f64) {
    xs.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExpectileReport {
    pub kappas: Vec<f64>,
    pub values: Vec<f64>,
    pub sample_min: f64,
    pub sample_max: f64,
    pub sample_mean: f64,
    /// Largest decrease between consecutive grid points (0 if monotone).
    pub max_decrease: f64,
    /// `sample_max - values.last()`.
    pub gap_to_max: f64,
}

impl ExpectileReport {
    pub fn monotone(&self, tol: f64) -> bool {
        self.max_decrease <= tol
    }

    pub fn in_range(&self, tol: f64) -> bool {
        self.values
            .iter()
            .all(|&v| v >= self.sample_min - tol && v <= self.sample_max + tol)
    }

    /// Gap to the maximum as a fraction of `|sample_max|` (absolute when the
    /// maximum is zero).
    pub fn relative_gap(&self) -> f64 {
        if self.sample_max == 0.0 {
            self.gap_to_max
        } else {
            self.gap_to_max / self.sample_max.abs()
        }
    }
}

/// Expectiles over an increasing `kappa_grid`.
pub fn verify_expectile_limit(samples: &[f64], kappa_grid: &[f64]) -> Result<ExpectileReport> {
    if kappa_grid.is_empty() {
        return Err(Error::InvalidParam("empty kappa grid".into()));
    }
    if kappa_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidParam("kappa grid must be increasing".into()));
    }
    let values = kappa_grid
        .iter()
        .map(|&k| expectile_1d(samples, k))
        .collect::<Result<Vec<_>>>()?;
    let (sample_min, sample_max) = min_max(samples);
    let max_decrease = values
        .windows(2)
        .map(|w| w[0] - w[1])
        .fold(0.0, f64::max);
    Ok(ExpectileReport {
        kappas: kappa_grid.to_vec(),
        gap_to_max: sample_max - values[values.len() - 1],
        values,
        sample_min,
        sample_max,
        sample_mean: samples.iter().sum::<f64>() / samples.len() as f64,
        max_decrease,
    })
}

/// Empirical squared 2-Wasserstein distance between equal-size 1-D
/// samples: mean squared gap between matched order statistics.
pub fn w2_squared_1d(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(shape_err("w2: sample lists differ in length"));
    }
    if xs.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut a = xs.to_vec();
    let mut b = ys.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    Ok(a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64)
}

fn spectral_norm(w: ArrayView2<f64>) -> f64 {
    if w.is_empty() {
        return 0.0;
    }
    let m = DMatrix::from_fn(w.nrows(), w.ncols(), |i, j| w[[i, j]]);
    m.singular_values().iter().copied().fold(0.0, f64::max)
}

/// Upper bound on the Lipschitz constant of `x -> v(s, t, x)`: the product
/// of layer spectral norms (the first restricted to the `a_t` columns) times
/// the activation's Lipschitz constant for each hidden layer.
pub fn lipschitz_upper_bound(v: &FlowPolicyNet) -> f64 {
    let layers = v.net.layers();
    let act = v.net.activation().lipschitz();
    let mut bound = 1.0;
    for (k, layer) in layers.iter().enumerate() {
        let norm = if k == 0 {
            spectral_norm(layer.weight.slice(s![.., v.action_columns()]))
        } else {
            spectral_norm(layer.weight.view())
        };
        bound *= norm;
        if k + 1 < layers.len() {
            bound *= act;
        }
    }
    bound
}

/// Per-state quantities of the anchoring check.
#[derive(Clone, Debug, PartialEq)]
pub struct StateDiagnostics {
    pub state: Vec<f64>,
    pub w2_squared: f64,
    pub anchor_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnchoringReport {
    pub per_state: Vec<StateDiagnostics>,
    pub lipschitz: f64,
    pub mean_w2_squared: f64,
    pub mean_anchor_loss: f64,
    /// `exp(2 L) * mean_anchor_loss`.
    pub bound: f64,
    /// Three combined standard errors of both Monte Carlo estimates.
    pub slack: f64,
}

impl AnchoringReport {
    pub fn passed(&self) -> bool {
        self.mean_w2_squared <= self.bound + self.slack
    }
}

pub const ANCHOR_EULER_STEPS: usize = 100;
pub const ANCHOR_LOSS_DRAWS: usize = 64;

/// Compares, state by state, the one-step policy's action distribution with
/// the behavior flow's (100-step Euler pushforward of the same noise draws)
/// and checks the mean squared W2 against `exp(2 L) * L_B`, where `L_B` uses
/// 64 fresh `(z, t)` draws per state. The policy side is the action the
/// anchoring loss sees. One-dimensional actions only.
pub fn verify_anchoring_bound<R: Rng + ?Sized>(
    pi: &OneStepPolicyNet,
    v: &FlowPolicyNet,
    states: ArrayView2<f64>,
    n_noise: usize,
    rng: &mut R,
) -> Result<AnchoringReport> {
    if pi.action_dim() != 1 || v.action_dim() != 1 {
        return Err(Error::InvalidParam("anchoring check needs a 1-D action space".into()));
    }
    let n_states = states.nrows();
    if n_states == 0 || n_noise == 0 {
        return Err(Error::EmptyBatch);
    }
    let lipschitz = lipschitz_upper_bound(v);
    let mut per_state = Vec::with_capacity(n_states);
    let mut lb_draws = Vec::with_capacity(n_states * ANCHOR_LOSS_DRAWS);
    for s in states.rows() {
        let rep = |n: usize| {
            let mut m = Array2::zeros((n, s.len()));
            for mut row in m.rows_mut() {
                row.assign(&s);
            }
            m
        };
        let srep = rep(n_noise);
        let z = normal_matrix(rng, n_noise, 1);
        let policy = pi.anchor_actions(srep.view(), z.view())?;
        let flow = euler_integrate_batch(v, srep.view(), z.view(), ANCHOR_EULER_STEPS)?;
        let w2 = w2_squared_1d(policy.as_slice().unwrap(), flow.as_slice().unwrap())?;

        let srep = rep(ANCHOR_LOSS_DRAWS);
        let z = normal_matrix(rng, ANCHOR_LOSS_DRAWS, 1);
        let t = Array1::from(uniform_unit(rng, ANCHOR_LOSS_DRAWS));
        let raw = pi.raw(srep.view(), z.view())?;
        let resid = crate::actor::anchor_residual_sq(pi, v, srep.view(), z.view(), t.view(), &raw)?;
        let lb = resid.mean().unwrap_or(0.0);
        lb_draws.extend(resid.iter().copied());
        per_state.push(StateDiagnostics {
            state: s.to_vec(),
            w2_squared: w2,
            anchor_loss: lb,
        });
    }
    let mean_w2_squared = per_state.iter().map(|d| d.w2_squared).sum::<f64>() / n_states as f64;
    let mean_anchor_loss = lb_draws.iter().sum::<f64>() / lb_draws.len() as f64;
    let factor = (2.0 * lipschitz).exp();
    let se_w2 = std_error(&per_state.iter().map(|d| d.w2_squared).collect::<Vec<_>>());
    let se_lb = std_error(&lb_draws);
    let slack = 3.0 * (se_w2.powi(2) + (factor * se_lb).powi(2)).sqrt();
    Ok(AnchoringReport {
        per_state,
        lipschitz,
        mean_w2_squared,
        mean_anchor_loss,
        bound: factor * mean_anchor_loss,
        slack: if slack.is_finite() { slack } else { f64::INFINITY },
    })
}

fn std_error(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let m = xs.iter().sum::<f64>() / n as f64;
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
    (var / n as f64).sqrt()
}

/// One line of a machine-readable verification report.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckRecord {
    pub name: String,
    pub observed: f64,
    pub bound: f64,
    pub passed: bool,
}

impl CheckRecord {
    pub fn new(name: impl Into<String>, observed: f64, bound: f64, passed: bool) -> Self {
        Self {
            name: name.into(),
            observed,
            bound,
            passed,
        }
    }

    /// `observed <= bound`.
    pub fn at_most(name: impl Into<String>, observed: f64, bound: f64) -> Self {
        Self::new(name, observed, bound, observed <= bound)
    }
}

pub const REPORT_HEADER: &str = "check\tobserved\tbound\tstatus";

impl fmt::Display for CheckRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{:e}\t{:e}\t{}",
            self.name,
            self.observed,
            self.bound,
            if self.passed { "pass" } else { "fail" }
        )
    }
}
