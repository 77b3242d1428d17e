//! Oracle self-consistency suite run by `tdac verify`.
//!
//! Every check draws GARNET instances with features that exclude the constant
//! direction, evaluates the exact solvers at random policy parameters and
//! records the worst observed value against a fixed tolerance.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::Result;
use crate::mdp::{GarnetSpec, Mdp};
use crate::oracle::{
    average_reward_at, check_negative_definite, critic_ode_quantities, OracleBundle,
};
use crate::policy::{FeatureMode, FeatureSet, PolicyParams};
use crate::rng::{stream_rng, Stream};

pub const GRADIENT_IDENTITY_TOL: f64 = 1e-9;
pub const FINITE_DIFFERENCE_TOL: f64 = 1e-5;
pub const FINITE_DIFFERENCE_STEP: f64 = 1e-5;
pub const STATIONARITY_TOL: f64 = 1e-10;
pub const POISSON_TOL: f64 = 1e-9;
pub const TD_FIXED_POINT_TOL: f64 = 1e-10;
/// A constant column makes `A` singular; its top eigenvalue must reach zero.
pub const COUNTEREXAMPLE_TOL: f64 = 1e-10;
pub const LAMBDAS: [f64; 3] = [0.0, 0.5, 0.9];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VerifyOptions {
    pub states: usize,
    pub actions: usize,
    pub branching: usize,
    pub basis: usize,
    pub active: usize,
    /// Number of GARNET instances.
    pub trials: usize,
    /// Random θ per instance.
    pub thetas: usize,
    /// Standard deviation of the θ entries.
    pub theta_scale: f64,
    pub seed: u64,
}

impl VerifyOptions {
    pub fn new(states: usize, actions: usize, trials: usize, seed: u64) -> Self {
        Self {
            states,
            actions,
            branching: 2.min(states),
            basis: 3,
            active: 2,
            trials,
            thetas: 5,
            theta_scale: 1.0,
            seed,
        }
    }

    fn spec(&self) -> Result<GarnetSpec> {
        GarnetSpec::new(self.states, self.actions, self.branching, 0.0, self.basis, self.active)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    /// Largest residual, or smallest margin for the definiteness check.
    pub worst: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VerifyReport {
    pub options: VerifyOptions,
    pub evaluations: usize,
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }
}

impl std::fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for c in &self.checks {
            writeln!(
                f,
                "{} {:<28} worst={:.3e} tol={:.1e}",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.worst,
                c.tolerance
            )?;
        }
        Ok(())
    }
}

/// Draws `count` parameter vectors with i.i.d. `N(0, scale²)` entries.
pub fn random_thetas(dim: usize, count: usize, scale: f64, seed: u64) -> Vec<PolicyParams> {
    let mut rng = stream_rng(seed, Stream::Probe);
    (0..count)
        .map(|_| {
            let raw = (0..dim).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
            PolicyParams::new(raw).expect("finite draws")
        })
        .collect()
}

/// Central differences of the exact average reward.
pub fn finite_difference_gradient(
    mdp: &Mdp,
    fs: &FeatureSet,
    theta: &PolicyParams,
    eps: f64,
) -> Result<Vec<f64>> {
    let base = theta.as_slice();
    (0..base.len())
        .map(|i| {
            let mut plus = base.to_vec();
            let mut minus = base.to_vec();
            plus[i] += eps;
            minus[i] -= eps;
            let up = average_reward_at(mdp, fs, &PolicyParams::new(plus)?)?;
            let down = average_reward_at(mdp, fs, &PolicyParams::new(minus)?)?;
            Ok((up - down) / (2.0 * eps))
        })
        .collect()
}

#[derive(Default)]
struct Worst {
    identity: f64,
    finite_diff: f64,
    stationarity: f64,
    poisson: f64,
    td: f64,
    gamma: f64,
    counter_gamma: f64,
}

pub fn run_verification(opts: &VerifyOptions) -> Result<VerifyReport> {
    let spec = opts.spec()?;
    let mut worst = Worst {
        gamma: f64::INFINITY,
        counter_gamma: f64::NEG_INFINITY,
        ..Default::default()
    };
    let mut evaluations = 0;
    for trial in 0..opts.trials {
        let seed = opts.seed.wrapping_add(trial as u64);
        let mdp = Mdp::garnet(&spec, seed)?;
        let fs = FeatureSet::build(&spec, seed, FeatureMode::ExcludeConstant)?;
        let phi_c = fs.phi().clone().insert_column(fs.basis_size(), 1.0);
        let fs_c = FeatureSet::from_matrix(phi_c, fs.n_actions())?;
        let thetas = random_thetas(fs.param_dim(), opts.thetas, opts.theta_scale, seed);
        let thetas_c = random_thetas(fs_c.param_dim(), opts.thetas, opts.theta_scale, !seed);

        for (theta, theta_c) in thetas.iter().zip(&thetas_c) {
            evaluations += 1;
            let bundle = OracleBundle::evaluate(&mdp, &fs, theta, LAMBDAS[0])?;
            worst.identity = worst.identity.max((&bundle.grad_eta - &bundle.grad_eta_via_h).amax());
            let fd = finite_difference_gradient(&mdp, &fs, theta, FINITE_DIFFERENCE_STEP)?;
            let err = bundle.grad_eta.iter().zip(&fd).map(|(g, d)| (g - d).abs()).fold(0.0, f64::max);
            worst.finite_diff = worst.finite_diff.max(err / bundle.grad_eta.amax().max(f64::MIN_POSITIVE));
            worst.stationarity = worst.stationarity.max(bundle.stationarity_residual());
            worst.poisson = worst.poisson.max(bundle.poisson_residual(mdp.state_reward()));

            for &lambda in &LAMBDAS {
                let b = if lambda == LAMBDAS[0] {
                    bundle.clone()
                } else {
                    OracleBundle::evaluate(&mdp, &fs, theta, lambda)?
                };
                worst.td = worst.td.max(b.td_residual());
                worst.gamma = worst.gamma.min(check_negative_definite(&b.a)?.gamma);
                let ode_c = critic_ode_quantities(&mdp, &fs_c, theta_c, lambda)?;
                worst.counter_gamma = worst.counter_gamma.max(-check_negative_definite(&ode_c.a)?.gamma);
            }
        }
    }

    let at_most = |name, worst: f64, tolerance| CheckResult {
        name,
        worst,
        tolerance,
        passed: worst <= tolerance,
    };
    let checks = vec![
        at_most("gradient identity", worst.identity, GRADIENT_IDENTITY_TOL),
        at_most("finite differences", worst.finite_diff, FINITE_DIFFERENCE_TOL),
        at_most("stationarity residual", worst.stationarity, STATIONARITY_TOL),
        at_most("poisson residual", worst.poisson, POISSON_TOL),
        at_most("td fixed point residual", worst.td, TD_FIXED_POINT_TOL),
        CheckResult {
            name: "negative definiteness",
            worst: worst.gamma,
            tolerance: 0.0,
            passed: worst.gamma > 0.0,
        },
        CheckResult {
            name: "constant column singular",
            worst: worst.counter_gamma,
            tolerance: -COUNTEREXAMPLE_TOL,
            passed: worst.counter_gamma >= -COUNTEREXAMPLE_TOL,
        },
    ];
    Ok(VerifyReport {
        options: opts.clone(),
        evaluations,
        checks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suite_passes() {
        let report = run_verification(&VerifyOptions::new(5, 3, 4, 7)).unwrap();
        assert_eq!(report.evaluations, 20);
        assert!(report.all_passed(), "{report}");
        assert_eq!(report.checks.len(), 7);
    }

    #[test]
    fn finite_differences_of_linear_direction() {
        // At θ = 0 with two actions the gradient is finite and the central
        // difference agrees with the exact value.
        let spec = GarnetSpec::new(4, 2, 2, 0.0, 3, 2).unwrap();
        let mdp = Mdp::garnet(&spec, 3).unwrap();
        let fs = FeatureSet::build(&spec, 3, FeatureMode::ExcludeConstant).unwrap();
        let theta = PolicyParams::zeros(fs.param_dim());
        let fd = finite_difference_gradient(&mdp, &fs, &theta, 1e-5).unwrap();
        let exact = OracleBundle::evaluate(&mdp, &fs, &theta, 0.0).unwrap().grad_eta;
        for (a, b) in exact.iter().zip(&fd) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn report_lookup_and_display() {
        let report = run_verification(&VerifyOptions::new(4, 2, 1, 0)).unwrap();
        assert!(report.check("poisson residual").is_some());
        assert!(report.check("missing").is_none());
        assert_eq!(report.to_string().lines().count(), 7);
    }
}
