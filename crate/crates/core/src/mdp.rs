//! Finite MDPs, GARNET instance generation and chain validation.

use std::collections::VecDeque;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{rows_to_vecs, vecs_to_matrix};
use crate::rng::{stream_rng, Stream};

const ROW_SUM_TOL: f64 = 1e-12;
/// GARNET draws are repeated with `seed + 1, seed + 2, ...` at most this many
/// times before giving up on finding an ergodic instance.
pub const MAX_GARNET_RETRIES: u32 = 1000;

/// Parameters of a GARNET(X, U, B, σ) instance together with the critic basis
/// dimensions used with it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GarnetSpec {
    pub states: usize,
    pub actions: usize,
    /// Nonzero entries per transition row.
    pub branching: usize,
    /// Standard deviation of the per-transition reward noise.
    pub sigma: f64,
    /// Critic basis size `L`.
    pub basis: usize,
    /// Ones per feature row `l`.
    pub active: usize,
}

impl GarnetSpec {
    pub fn new(
        states: usize,
        actions: usize,
        branching: usize,
        sigma: f64,
        basis: usize,
        active: usize,
    ) -> Result<Self> {
        let spec = Self {
            states,
            actions,
            branching,
            sigma,
            basis,
            active,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// GARNET(30,4,2,0.1) with L=8, l=3.
    pub fn small() -> Self {
        Self::new(30, 4, 2, 0.1, 8, 3).expect("valid preset")
    }

    /// GARNET(100,10,3,0.1) with L=20, l=5.
    pub fn large() -> Self {
        Self::new(100, 10, 3, 0.1, 20, 5).expect("valid preset")
    }

    /// Parses `"X,U,B,sigma"`; the basis dimensions are supplied separately.
    pub fn parse(text: &str, basis: usize, active: usize) -> Result<Self> {
        let parts: Vec<&str> = text.split(',').map(str::trim).collect();
        if parts.len() != 4 {
            return Err(Error::param(format!(
                "expected X,U,B,sigma but got {text:?}"
            )));
        }
        let int = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::param(format!("not a count: {s:?}")))
        };
        let sigma = parts[3]
            .parse::<f64>()
            .map_err(|_| Error::param(format!("not a number: {:?}", parts[3])))?;
        Self::new(
            int(parts[0])?,
            int(parts[1])?,
            int(parts[2])?,
            sigma,
            basis,
            active,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.states == 0 || self.actions == 0 {
            return Err(Error::param("GARNET needs at least one state and one action"));
        }
        if self.branching == 0 || self.branching > self.states {
            return Err(Error::param(format!(
                "branching factor {} must lie in 1..={}",
                self.branching, self.states
            )));
        }
        if self.active == 0 || self.active > self.basis {
            return Err(Error::param(format!(
                "active features {} must lie in 1..={}",
                self.active, self.basis
            )));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::param(format!("sigma must be finite and >= 0, got {}", self.sigma)));
        }
        Ok(())
    }
}

/// Where a generated instance came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GarnetOrigin {
    pub spec: GarnetSpec,
    /// Seed requested by the caller.
    pub seed: u64,
    /// Number of rejected (non-ergodic) draws; the instance was built from
    /// `seed + retries`.
    pub retries: u32,
}

/// Inverse-CDF table over the nonzero targets of one transition row.
#[derive(Clone, Debug, PartialEq)]
struct RowSampler {
    targets: Vec<usize>,
    cumulative: Vec<f64>,
}

impl RowSampler {
    fn new(row: impl Iterator<Item = f64>) -> Self {
        let mut targets = Vec::new();
        let mut cumulative = Vec::new();
        let mut acc = 0.0;
        for (y, p) in row.enumerate() {
            if p > 0.0 {
                acc += p;
                targets.push(y);
                cumulative.push(acc);
            }
        }
        Self {
            targets,
            cumulative,
        }
    }

    fn draw(&self, u: f64) -> usize {
        // `u` is scaled by the accumulated mass so rounding in the row sum
        // cannot push a draw past the last target.
        let total = *self.cumulative.last().expect("row has mass");
        let target = u * total;
        let idx = self.cumulative.partition_point(|&c| c <= target);
        self.targets[idx.min(self.targets.len() - 1)]
    }
}

/// A finite MDP with state-dependent mean rewards.
///
/// `transitions[u][(x, y)]` is `P(y | x, u)`. The reward observed when leaving
/// `x` is `state_reward[x]` plus zero-mean Gaussian noise of variance
/// `reward_noise_var`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mdp {
    transitions: Vec<DMatrix<f64>>,
    state_reward: DVector<f64>,
    reward_noise_var: f64,
    origin: Option<GarnetOrigin>,
    samplers: Vec<RowSampler>,
}

impl Mdp {
    pub fn new(
        transitions: Vec<DMatrix<f64>>,
        state_reward: DVector<f64>,
        reward_noise_var: f64,
    ) -> Result<Self> {
        let n = state_reward.len();
        if n == 0 || transitions.is_empty() {
            return Err(Error::param("MDP needs at least one state and one action"));
        }
        for (u, p) in transitions.iter().enumerate() {
            if p.shape() != (n, n) {
                return Err(Error::param(format!(
                    "action {u}: transition matrix is {:?}, expected ({n}, {n})",
                    p.shape()
                )));
            }
            check_stochastic(p).map_err(|e| Error::param(format!("action {u}: {e}")))?;
        }
        if !(reward_noise_var >= 0.0 && reward_noise_var.is_finite()) {
            return Err(Error::param("reward noise variance must be finite and >= 0"));
        }
        if state_reward.iter().any(|r| !r.is_finite()) {
            return Err(Error::param("rewards must be finite"));
        }
        let samplers = transitions
            .iter()
            .flat_map(|p| (0..n).map(move |x| RowSampler::new(p.row(x).iter().copied())))
            .collect();
        Ok(Self {
            transitions,
            state_reward,
            reward_noise_var,
            origin: None,
            samplers,
        })
    }

    /// Draws a GARNET instance.
    ///
    /// Draw order on the instance stream of `seed`: `X` standard normal state
    /// rewards, then for each action `u` and each state `x` in index order,
    /// `B` distinct target states followed by `B - 1` uniform cut points whose
    /// sorted spacings become the row probabilities.
    ///
    /// Instances whose chain under the uniform policy is not irreducible and
    /// aperiodic are discarded and redrawn from `seed + 1`, `seed + 2`, ...;
    /// the number of discarded draws is kept in [`GarnetOrigin::retries`].
    pub fn garnet(spec: &GarnetSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        for retries in 0..=MAX_GARNET_RETRIES {
            let mut mdp = Self::garnet_draw(spec, seed.wrapping_add(retries as u64))?;
            let uniform = DMatrix::from_element(spec.states, spec.actions, 1.0 / spec.actions as f64);
            let chain = mdp.transition_under_policy(&uniform)?;
            if validate_chain(&chain)?.is_ergodic() {
                mdp.origin = Some(GarnetOrigin {
                    spec: spec.clone(),
                    seed,
                    retries,
                });
                return Ok(mdp);
            }
        }
        Err(Error::Ergodicity(format!(
            "no ergodic GARNET instance within {MAX_GARNET_RETRIES} retries from seed {seed}"
        )))
    }

    fn garnet_draw(spec: &GarnetSpec, seed: u64) -> Result<Self> {
        let mut rng = stream_rng(seed, Stream::Instance);
        let (n, b) = (spec.states, spec.branching);
        let rewards = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let mut transitions = Vec::with_capacity(spec.actions);
        let mut cuts = Vec::with_capacity(b + 1);
        for _ in 0..spec.actions {
            let mut p = DMatrix::zeros(n, n);
            for x in 0..n {
                let targets = rand::seq::index::sample(&mut rng, n, b);
                cuts.clear();
                cuts.push(0.0);
                cuts.extend((1..b).map(|_| rng.random::<f64>()));
                cuts.push(1.0);
                cuts.sort_by(f64::total_cmp);
                for (k, y) in targets.iter().enumerate() {
                    p[(x, y)] = cuts[k + 1] - cuts[k];
                }
            }
            transitions.push(p);
        }
        Self::new(transitions, rewards, spec.sigma * spec.sigma)
    }

    pub fn n_states(&self) -> usize {
        self.state_reward.len()
    }

    pub fn n_actions(&self) -> usize {
        self.transitions.len()
    }

    /// `P(· | ·, u)` as an `|X| × |X|` row-stochastic matrix.
    pub fn transition(&self, u: usize) -> &DMatrix<f64> {
        &self.transitions[u]
    }

    pub fn transitions(&self) -> &[DMatrix<f64>] {
        &self.transitions
    }

    pub fn state_reward(&self) -> &DVector<f64> {
        &self.state_reward
    }

    pub fn reward_noise_var(&self) -> f64 {
        self.reward_noise_var
    }

    pub fn origin(&self) -> Option<&GarnetOrigin> {
        self.origin.as_ref()
    }

    /// Composes the chain `P(y|x) = Σ_u μ(u|x) P(y|x,u)` for a stochastic
    /// `|X| × |U|` policy matrix.
    pub fn transition_under_policy(&self, policy: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let (n, m) = (self.n_states(), self.n_actions());
        if policy.shape() != (n, m) {
            return Err(Error::param(format!(
                "policy matrix is {:?}, expected ({n}, {m})",
                policy.shape()
            )));
        }
        for x in 0..n {
            let s: f64 = policy.row(x).sum();
            if (s - 1.0).abs() > 1e-10 || policy.row(x).iter().any(|&p| p < 0.0) {
                return Err(Error::param(format!("policy row {x} is not a distribution")));
            }
        }
        let mut out = DMatrix::zeros(n, n);
        for (u, p) in self.transitions.iter().enumerate() {
            for x in 0..n {
                let mu = policy[(x, u)];
                if mu != 0.0 {
                    for y in 0..n {
                        out[(x, y)] += mu * p[(x, y)];
                    }
                }
            }
        }
        Ok(out)
    }

    /// Draws `y ~ P(· | x, u)` using exactly one uniform `f64` from `rng`.
    pub fn next_state<R: Rng + ?Sized>(&self, x: usize, u: usize, rng: &mut R) -> usize {
        assert!(x < self.n_states() && u < self.n_actions(), "state or action out of range");
        self.samplers[u * self.n_states() + x].draw(rng.random::<f64>())
    }

    /// Observed reward when leaving `x`: the mean `r̄(x)` plus one standard
    /// normal draw scaled by σ. No draw is made when σ = 0.
    pub fn observe_reward<R: Rng + ?Sized>(&self, x: usize, rng: &mut R) -> f64 {
        let mean = self.state_reward[x];
        if self.reward_noise_var == 0.0 {
            mean
        } else {
            mean + self.reward_noise_var.sqrt() * rng.sample::<f64, _>(StandardNormal)
        }
    }

    /// One environment transition from a single stream: the next-state
    /// uniform is drawn first, then the reward noise.
    pub fn sample_step<R: Rng + ?Sized>(&self, x: usize, u: usize, rng: &mut R) -> (usize, f64) {
        let y = self.next_state(x, u, rng);
        let r = self.observe_reward(x, rng);
        (y, r)
    }

    pub fn to_json(&self) -> String {
        let file = MdpFile {
            format: MDP_FORMAT.to_string(),
            version: MDP_VERSION,
            origin: self.origin.clone(),
            n_states: self.n_states(),
            n_actions: self.n_actions(),
            reward_noise_var: self.reward_noise_var,
            state_reward: self.state_reward.iter().copied().collect(),
            transitions: self.transitions.iter().map(rows_to_vecs).collect(),
        };
        let mut s = serde_json::to_string_pretty(&file).expect("MDP serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: MdpFile =
            serde_json::from_str(text).map_err(|e| Error::Format(format!("MDP file: {e}")))?;
        if file.format != MDP_FORMAT || file.version != MDP_VERSION {
            return Err(Error::Format(format!(
                "unsupported MDP file {} v{}",
                file.format, file.version
            )));
        }
        if file.transitions.len() != file.n_actions || file.state_reward.len() != file.n_states {
            return Err(Error::Format("MDP file: declared sizes do not match data".into()));
        }
        let transitions = file
            .transitions
            .iter()
            .map(|rows| vecs_to_matrix(rows, "transitions"))
            .collect::<Result<Vec<_>>>()?;
        let mut mdp = Self::new(
            transitions,
            DVector::from_vec(file.state_reward),
            file.reward_noise_var,
        )?;
        mdp.origin = file.origin;
        Ok(mdp)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

const MDP_FORMAT: &str = "tdac-mdp";
const MDP_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MdpFile {
    format: String,
    version: u32,
    origin: Option<GarnetOrigin>,
    n_states: usize,
    n_actions: usize,
    reward_noise_var: f64,
    state_reward: Vec<f64>,
    /// Indexed `[action][from][to]`.
    transitions: Vec<Vec<Vec<f64>>>,
}

fn check_stochastic(p: &DMatrix<f64>) -> std::result::Result<(), String> {
    for (x, row) in p.row_iter().enumerate() {
        if row.iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(format!("row {x} has a negative or non-finite entry"));
        }
        let s: f64 = row.sum();
        if (s - 1.0).abs() > ROW_SUM_TOL {
            return Err(format!("row {x} sums to {s}"));
        }
    }
    Ok(())
}

/// Structural properties of a Markov chain.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ChainReport {
    pub irreducible: bool,
    pub aperiodic: bool,
    /// Period of the communicating class containing state 0 (1 when aperiodic).
    pub period: usize,
}

impl ChainReport {
    /// Irreducible and aperiodic, i.e. the chain has a unique stationary
    /// distribution that every initial distribution converges to.
    pub fn is_ergodic(&self) -> bool {
        self.irreducible && self.aperiodic
    }
}

/// Checks irreducibility (strong connectivity of the support digraph) and
/// the period (gcd of cycle lengths through state 0).
pub fn validate_chain(p: &DMatrix<f64>) -> Result<ChainReport> {
    let n = p.nrows();
    if n == 0 || p.ncols() != n {
        return Err(Error::param(format!("chain matrix must be square, got {:?}", p.shape())));
    }
    for (x, row) in p.row_iter().enumerate() {
        let s: f64 = row.sum();
        if row.iter().any(|&v| v.is_nan() || v < 0.0) || (s - 1.0).abs() > 1e-9 {
            return Err(Error::param(format!("chain row {x} is not a distribution")));
        }
    }
    let succ: Vec<Vec<usize>> = (0..n)
        .map(|x| (0..n).filter(|&y| p[(x, y)] > 0.0).collect())
        .collect();
    let mut pred = vec![Vec::new(); n];
    for (x, ys) in succ.iter().enumerate() {
        for &y in ys {
            pred[y].push(x);
        }
    }
    let fwd = bfs_levels(&succ, 0);
    let bwd = bfs_levels(&pred, 0);
    let irreducible = fwd.iter().all(Option::is_some) && bwd.iter().all(Option::is_some);

    // Restrict to the class of state 0: reachable from it and reaching it.
    let mut period = 0usize;
    for x in 0..n {
        if fwd[x].is_none() || bwd[x].is_none() {
            continue;
        }
        for &y in &succ[x] {
            if let (Some(lx), Some(ly), Some(_)) = (fwd[x], fwd[y], bwd[y]) {
                let diff = (lx + 1).abs_diff(ly);
                period = gcd(period, diff);
            }
        }
    }
    let period = period.max(1);
    Ok(ChainReport {
        irreducible,
        aperiodic: period == 1,
        period,
    })
}

fn bfs_levels(adj: &[Vec<usize>], start: usize) -> Vec<Option<usize>> {
    let mut level = vec![None; adj.len()];
    level[start] = Some(0);
    let mut queue = VecDeque::from([start]);
    while let Some(x) = queue.pop_front() {
        let next = level[x].unwrap() + 1;
        for &y in &adj[x] {
            if level[y].is_none() {
                level[y] = Some(next);
                queue.push_back(y);
            }
        }
    }
    level
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}
