//! Online actor-critic iterates.
//!
//! Both algorithms share one update structure per environment step:
//!
//! ```text
//! η̃ ← η̃ + γ^η Γ_η (r − η̃)
//! d̃ = r − η̃_old + φ(y)'w − φ(x)'w
//! e ← λ e + φ(x)
//! w ← clamp(w + γ^w Γ_w d̃ e, ±B_w)
//! θ ← θ + γ^θ ψ(x,u,θ) d̃
//! ```
//!
//! The single-time-scale algorithm uses one sequence `γ_n` for all three
//! iterates. The two-time-scale baseline runs TD(0) with separate critic and
//! actor sequences, the actor being asymptotically slower.

use nalgebra::DVector;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::Mdp;
use crate::policy::{draw_index, FeatureSet, PolicyParams};
use crate::rng::RunStreams;

/// `γ_n = c0 / (c1 + n^p)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateParams {
    pub c0: f64,
    pub c1: f64,
    pub p: f64,
}

impl RateParams {
    /// Critic rate for GARNET(30,4,2,0.1): `100 / (1000 + n^{2/3})`.
    pub const CRITIC_SMALL: Self = Self {
        c0: 100.0,
        c1: 1000.0,
        p: 2.0 / 3.0,
    };
    /// Actor rate for GARNET(30,4,2,0.1): `1000 / (100000 + n)`.
    pub const ACTOR_SMALL: Self = Self {
        c0: 1000.0,
        c1: 100_000.0,
        p: 1.0,
    };
    /// Critic rate for GARNET(100,10,3,0.1): `10^5 / (10^6 + n^{2/3})`.
    pub const CRITIC_LARGE: Self = Self {
        c0: 1e5,
        c1: 1e6,
        p: 2.0 / 3.0,
    };
    /// Actor rate for GARNET(100,10,3,0.1): `10^6 / (10^8 + n)`.
    pub const ACTOR_LARGE: Self = Self {
        c0: 1e6,
        c1: 1e8,
        p: 1.0,
    };

    /// Positive steps with `Σγ = ∞` and `Σγ² < ∞`, i.e. `p ∈ (1/2, 1]`.
    pub fn validate(&self) -> Result<()> {
        if !(self.c0 > 0.0 && self.c0.is_finite()) || !(self.c1 >= 0.0 && self.c1.is_finite()) {
            return Err(Error::param(format!("rate constants must be positive: {self:?}")));
        }
        if !(self.p > 0.5 && self.p <= 1.0) {
            return Err(Error::param(format!(
                "rate exponent {} violates Σγ=∞, Σγ²<∞ (need 1/2 < p ≤ 1)",
                self.p
            )));
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let vals: Vec<f64> = text
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::param(format!("expected c0,c1,p but got {text:?}")))?;
        let [c0, c1, p] = vals[..] else {
            return Err(Error::param(format!("expected c0,c1,p but got {text:?}")));
        };
        let rate = Self { c0, c1, p };
        rate.validate()?;
        Ok(rate)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Single,
    TwoScaleCriticW,
    /// The critic-w sequence scaled by 0.95.
    TwoScaleCriticEta,
    TwoScaleActor,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub rate: RateParams,
}

const CRITIC_ETA_FACTOR: f64 = 0.95;

/// Step size at index `n ≥ 1`.
pub fn step_size(spec: &ScheduleSpec, n: u64) -> f64 {
    debug_assert!(n >= 1, "step indices start at 1");
    let RateParams { c0, c1, p } = spec.rate;
    let base = c0 / (c1 + (n as f64).powf(p));
    match spec.kind {
        ScheduleKind::TwoScaleCriticEta => CRITIC_ETA_FACTOR * base,
        _ => base,
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    #[default]
    Single,
    TwoScale,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlgoConfig {
    pub algorithm: Algorithm,
    /// Γ_η.
    pub gamma_eta: f64,
    /// Γ_w.
    pub gamma_w: f64,
    /// TD parameter; the two-scale baseline always uses 0.
    pub lambda: f64,
    /// Box bound B_w on every critic weight.
    pub b_w: f64,
    /// Sequence for the single-scale algorithm and the baseline's critic.
    pub critic_rate: RateParams,
    /// Actor sequence of the baseline.
    pub actor_rate: RateParams,
    /// Suppress the actor update (policy evaluation only).
    pub freeze_actor: bool,
}

impl Default for AlgoConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Single,
            gamma_eta: 1.0,
            gamma_w: 1.0,
            lambda: 0.5,
            b_w: 1e3,
            critic_rate: RateParams::CRITIC_SMALL,
            actor_rate: RateParams::ACTOR_SMALL,
            freeze_actor: false,
        }
    }
}

/// The three sequences driving `(η̃, w, θ)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedules {
    pub eta: ScheduleSpec,
    pub w: ScheduleSpec,
    pub theta: ScheduleSpec,
}

impl AlgoConfig {
    pub fn two_scale() -> Self {
        Self {
            algorithm: Algorithm::TwoScale,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("gamma_eta", self.gamma_eta), ("gamma_w", self.gamma_w), ("b_w", self.b_w)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::param(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.lambda) {
            return Err(Error::param(format!("λ must lie in [0, 1), got {}", self.lambda)));
        }
        self.critic_rate.validate()?;
        self.actor_rate.validate()
    }

    /// λ actually used by the configured algorithm.
    pub fn effective_lambda(&self) -> f64 {
        match self.algorithm {
            Algorithm::Single => self.lambda,
            Algorithm::TwoScale => 0.0,
        }
    }

    pub fn schedules(&self) -> Schedules {
        let spec = |kind, rate| ScheduleSpec { kind, rate };
        match self.algorithm {
            Algorithm::Single => {
                let s = spec(ScheduleKind::Single, self.critic_rate);
                Schedules { eta: s, w: s, theta: s }
            }
            Algorithm::TwoScale => Schedules {
                eta: spec(ScheduleKind::TwoScaleCriticEta, self.critic_rate),
                w: spec(ScheduleKind::TwoScaleCriticW, self.critic_rate),
                theta: spec(ScheduleKind::TwoScaleActor, self.actor_rate),
            },
        }
    }
}

/// Online iterates `(η̃, w, e, θ)`, the number of completed steps and the
/// current state.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentState {
    pub theta: PolicyParams,
    pub w: DVector<f64>,
    pub eta_tilde: f64,
    pub elig: DVector<f64>,
    pub n: u64,
    pub x: usize,
}

impl AgentState {
    /// All iterates zero, starting from `x0`.
    pub fn new(fs: &FeatureSet, x0: usize) -> Self {
        Self {
            theta: PolicyParams::zeros(fs.param_dim()),
            w: DVector::zeros(fs.basis_size()),
            eta_tilde: 0.0,
            elig: DVector::zeros(fs.basis_size()),
            n: 0,
            x: x0,
        }
    }
}

/// What one step observed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub action: usize,
    pub next_state: usize,
    pub reward: f64,
    /// The estimated temporal difference d̃.
    pub td: f64,
}

/// Componentwise clamp of `w` to `[−b_w, b_w]`.
pub fn project_weights(w: &DVector<f64>, b_w: f64) -> DVector<f64> {
    w.map(|v| v.clamp(-b_w, b_w))
}

/// One step of the single-time-scale algorithm.
pub fn algorithm1_step(
    state: &mut AgentState,
    mdp: &Mdp,
    fs: &FeatureSet,
    config: &AlgoConfig,
    streams: &mut RunStreams,
) -> Result<StepOutcome> {
    let single = ScheduleSpec {
        kind: ScheduleKind::Single,
        rate: config.critic_rate,
    };
    let gamma = step_size(&single, state.n + 1);
    update(state, mdp, fs, config, config.lambda, [gamma; 3], streams)
}

/// One step of the two-time-scale TD(0) baseline.
pub fn baseline_two_timescale_step(
    state: &mut AgentState,
    mdp: &Mdp,
    fs: &FeatureSet,
    config: &AlgoConfig,
    streams: &mut RunStreams,
) -> Result<StepOutcome> {
    let two = AlgoConfig {
        algorithm: Algorithm::TwoScale,
        ..config.clone()
    }
    .schedules();
    let n = state.n + 1;
    let rates = [step_size(&two.eta, n), step_size(&two.w, n), step_size(&two.theta, n)];
    update(state, mdp, fs, config, 0.0, rates, streams)
}

/// Dispatches on `config.algorithm`.
pub fn step(
    state: &mut AgentState,
    mdp: &Mdp,
    fs: &FeatureSet,
    config: &AlgoConfig,
    streams: &mut RunStreams,
) -> Result<StepOutcome> {
    match config.algorithm {
        Algorithm::Single => algorithm1_step(state, mdp, fs, config, streams),
        Algorithm::TwoScale => baseline_two_timescale_step(state, mdp, fs, config, streams),
    }
}

fn update(
    state: &mut AgentState,
    mdp: &Mdp,
    fs: &FeatureSet,
    config: &AlgoConfig,
    lambda: f64,
    [rate_eta, rate_w, rate_theta]: [f64; 3],
    streams: &mut RunStreams,
) -> Result<StepOutcome> {
    let x = state.x;
    let n = state.n + 1;

    let mut probs = vec![0.0; fs.n_actions()];
    fs.probabilities_into(state.theta.as_slice(), x, &mut probs);
    let u = draw_index(&probs, streams.actions.random::<f64>());
    let y = mdp.next_state(x, u, &mut streams.transitions);
    let r = mdp.observe_reward(x, &mut streams.noise);

    let phi = fs.phi();
    let (mut h_x, mut h_y) = (0.0, 0.0);
    for j in 0..phi.ncols() {
        h_x += phi[(x, j)] * state.w[j];
        h_y += phi[(y, j)] * state.w[j];
    }
    let td = r - state.eta_tilde + h_y - h_x;
    let eta_next = state.eta_tilde + rate_eta * config.gamma_eta * (r - state.eta_tilde);
    if !td.is_finite() || !eta_next.is_finite() {
        return Err(Error::Numerical {
            step: n,
            state: x,
            detail: format!("td={td}, eta={eta_next}, reward={r}"),
        });
    }
    state.eta_tilde = eta_next;

    let gain = rate_w * config.gamma_w * td;
    for j in 0..phi.ncols() {
        let e = lambda * state.elig[j] + phi[(x, j)];
        state.elig[j] = e;
        state.w[j] = (state.w[j] + gain * e).clamp(-config.b_w, config.b_w);
    }

    if !config.freeze_actor {
        let theta = state.theta.as_mut_slice();
        fs.add_scaled_score(x, u, &probs, rate_theta * td, theta);
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical {
                step: n,
                state: x,
                detail: "actor parameters overflowed".into(),
            });
        }
    }

    state.n = n;
    state.x = y;
    Ok(StepOutcome {
        action: u,
        next_state: y,
        reward: r,
        td,
    })
}
