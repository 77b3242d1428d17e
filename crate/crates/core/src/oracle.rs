//! Exact quantities for a fixed policy, computed by dense linear algebra.
//!
//! For a policy `θ` the induced chain `P(θ)` has a stationary distribution
//! `π`, average reward `η = π'r̄` and differential value `h` solving
//! `h = r̄ − η·1 + P h` with `h(x*) = 0`. From these follow the policy
//! gradient and the matrices of the mean TD(λ) critic dynamics
//!
//! ```text
//! S = (I − λP)⁻¹    G = Φ'ΠS    M = (1−λ)SP
//! A = Φ'Π(M − I)Φ   b = Φ'ΠS(r̄ − η·1)
//! ```
//!
//! where `Π = diag(π)`. The critic's fixed point solves `A w + b = 0`.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{checked_inverse, inf_norm, rows_to_vecs, solve};
use crate::mdp::{validate_chain, Mdp};
use crate::policy::{policy_matrix, FeatureSet, PolicyParams};

/// Stationary distribution of an irreducible aperiodic chain, from the
/// balance equations with the last one replaced by `Σπ = 1`.
pub fn stationary_distribution(p: &DMatrix<f64>) -> Result<DVector<f64>> {
    let report = validate_chain(p)?;
    if !report.is_ergodic() {
        return Err(Error::Ergodicity(format!(
            "irreducible={}, period={}",
            report.irreducible, report.period
        )));
    }
    let n = p.nrows();
    let mut system = p.transpose() - DMatrix::identity(n, n);
    system.row_mut(n - 1).fill(1.0);
    let mut rhs = DVector::zeros(n);
    rhs[n - 1] = 1.0;
    solve(&system, &rhs, "stationary system")
}

pub fn average_reward(pi: &DVector<f64>, reward: &DVector<f64>) -> f64 {
    pi.dot(reward)
}

/// State of largest stationary mass, lowest index on ties.
pub fn recurrent_anchor(pi: &DVector<f64>) -> usize {
    let mut best = 0;
    for (x, &p) in pi.iter().enumerate() {
        if p > pi[best] {
            best = x;
        }
    }
    best
}

/// Solves Poisson's equation `h = r̄ − η·1 + P h` with the row of `x_star`
/// replaced by `h(x_star) = 0`.
pub fn differential_value(
    p: &DMatrix<f64>,
    reward: &DVector<f64>,
    eta: f64,
    x_star: usize,
) -> Result<DVector<f64>> {
    let n = p.nrows();
    if reward.len() != n || x_star >= n {
        return Err(Error::param("reward length or anchor does not match the chain"));
    }
    let mut system = DMatrix::identity(n, n) - p;
    system.row_mut(x_star).fill(0.0);
    system[(x_star, x_star)] = 1.0;
    let mut rhs = reward.add_scalar(-eta);
    rhs[x_star] = 0.0;
    solve(&system, &rhs, "Poisson system")
}

/// `‖π'P − π'‖∞`.
pub fn stationarity_residual(p: &DMatrix<f64>, pi: &DVector<f64>) -> f64 {
    inf_norm(&(p.tr_mul(pi) - pi))
}

/// `‖h − (r̄ − η·1 + P h)‖∞`.
pub fn poisson_residual(p: &DMatrix<f64>, reward: &DVector<f64>, eta: f64, h: &DVector<f64>) -> f64 {
    inf_norm(&(h - (reward.add_scalar(-eta) + p * h)))
}

/// The temporal difference `d(x,y) = r̄(x) − η + h(y) − h(x)`.
pub fn td_exact(bundle: &OracleBundle, reward: &DVector<f64>, x: usize, y: usize) -> f64 {
    reward[x] - bundle.eta + bundle.h[y] - bundle.h[x]
}

/// The two exact expressions of `∇η(θ)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyGradients {
    /// `Σ π(x)μ(u|x)P(y|x,u) ψ(x,u) d(x,y)`.
    pub via_td: DVector<f64>,
    /// `Σ π(x)μ(u|x)P(y|x,u) ψ(x,u) h(y)`.
    pub via_h: DVector<f64>,
}

/// Mean-dynamics matrices of the TD(λ) critic.
#[derive(Clone, Debug, PartialEq)]
pub struct CriticOde {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub g: DMatrix<f64>,
    pub m: DMatrix<f64>,
}

/// Chain quantities shared by the gradient and critic computations.
#[derive(Clone, Debug)]
struct ChainSolution {
    policy: DMatrix<f64>,
    p: DMatrix<f64>,
    pi: DVector<f64>,
    eta: f64,
    x_star: usize,
    h: DVector<f64>,
}

fn solve_chain(mdp: &Mdp, fs: &FeatureSet, theta: &PolicyParams) -> Result<ChainSolution> {
    if fs.n_states() != mdp.n_states() || fs.n_actions() != mdp.n_actions() {
        return Err(Error::param(format!(
            "features are {}x{} but the MDP is {}x{}",
            fs.n_states(),
            fs.n_actions(),
            mdp.n_states(),
            mdp.n_actions()
        )));
    }
    let policy = policy_matrix(fs, theta)?;
    let p = mdp.transition_under_policy(&policy)?;
    let pi = stationary_distribution(&p)?;
    let eta = average_reward(&pi, mdp.state_reward());
    let x_star = recurrent_anchor(&pi);
    let h = differential_value(&p, mdp.state_reward(), eta, x_star)?;
    Ok(ChainSolution {
        policy,
        p,
        pi,
        eta,
        x_star,
        h,
    })
}

fn gradients_from(mdp: &Mdp, fs: &FeatureSet, chain: &ChainSolution) -> PolicyGradients {
    let (n, m) = (mdp.n_states(), mdp.n_actions());
    let reward = mdp.state_reward();
    let mut via_td = vec![0.0; fs.param_dim()];
    let mut via_h = vec![0.0; fs.param_dim()];
    // Summing over y first: Σ_y P(y|x,u) h(y) = (P_u h)(x).
    let next_h: Vec<DVector<f64>> = (0..m).map(|u| mdp.transition(u) * &chain.h).collect();
    let mut probs = vec![0.0; m];
    for x in 0..n {
        probs.copy_from_slice(chain.policy.row(x).transpose().as_slice());
        for u in 0..m {
            let weight = chain.pi[x] * probs[u];
            let expected_h = next_h[u][x];
            let expected_td = reward[x] - chain.eta + expected_h - chain.h[x];
            fs.add_scaled_score(x, u, &probs, weight * expected_td, &mut via_td);
            fs.add_scaled_score(x, u, &probs, weight * expected_h, &mut via_h);
        }
    }
    PolicyGradients {
        via_td: DVector::from_vec(via_td),
        via_h: DVector::from_vec(via_h),
    }
}

fn critic_from(fs: &FeatureSet, reward: &DVector<f64>, chain: &ChainSolution, lambda: f64) -> Result<CriticOde> {
    if !(0.0..1.0).contains(&lambda) {
        return Err(Error::param(format!("λ must lie in [0, 1), got {lambda}")));
    }
    let n = chain.p.nrows();
    let phi = fs.phi();
    let s = checked_inverse(&(DMatrix::identity(n, n) - &chain.p * lambda), "I − λP")?;
    let mut phi_t_pi = phi.transpose();
    for (x, mut col) in phi_t_pi.column_iter_mut().enumerate() {
        col *= chain.pi[x];
    }
    let g = &phi_t_pi * &s;
    let m = (&s * &chain.p) * (1.0 - lambda);
    let a = &phi_t_pi * (&m - DMatrix::identity(n, n)) * phi;
    let b = &g * reward.add_scalar(-chain.eta);
    Ok(CriticOde { a, b, g, m })
}

/// `∇η(θ)` through the temporal difference and through `h` directly.
pub fn gradient_exact(mdp: &Mdp, fs: &FeatureSet, theta: &PolicyParams) -> Result<PolicyGradients> {
    let chain = solve_chain(mdp, fs, theta)?;
    Ok(gradients_from(mdp, fs, &chain))
}

/// Exact `η(θ)`.
pub fn average_reward_at(mdp: &Mdp, fs: &FeatureSet, theta: &PolicyParams) -> Result<f64> {
    let policy = policy_matrix(fs, theta)?;
    let p = mdp.transition_under_policy(&policy)?;
    Ok(average_reward(&stationary_distribution(&p)?, mdp.state_reward()))
}

/// `(A, b, G, M)` at `θ`, using a linear solve for `Σ λ^m P^m`.
pub fn critic_ode_quantities(
    mdp: &Mdp,
    fs: &FeatureSet,
    theta: &PolicyParams,
    lambda: f64,
) -> Result<CriticOde> {
    let chain = solve_chain(mdp, fs, theta)?;
    critic_from(fs, mdp.state_reward(), &chain, lambda)
}

/// Solves `A w = −b`.
pub fn td_fixed_point(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    if a.nrows() != a.ncols() || a.nrows() != b.len() {
        return Err(Error::param("A must be square and match b"));
    }
    solve(a, &-b, "TD fixed-point system")
}

/// Solution of `A w = −b` orthogonal to `null`, for a singular `A` whose
/// left and right kernels are both spanned by `null` (the case when the
/// basis represents the constant vector).
pub fn td_fixed_point_anchored(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    null: &DVector<f64>,
) -> Result<DVector<f64>> {
    if a.nrows() != a.ncols() || a.nrows() != b.len() || null.len() != b.len() {
        return Err(Error::param("A, b and the null direction must agree in size"));
    }
    let unit = null.normalize();
    let scale = a.amax().max(f64::MIN_POSITIVE);
    let regular = a + &unit * unit.transpose() * scale;
    solve(&regular, &-b, "anchored TD fixed-point system")
}

/// The Π-weighted least-squares weights `(Φ'ΠΦ)⁻¹Φ'Πh` and the residual
/// `‖h − Φw‖_Π`.
pub fn projected_weights_and_error(
    fs: &FeatureSet,
    pi: &DVector<f64>,
    h: &DVector<f64>,
) -> Result<(DVector<f64>, f64)> {
    let phi = fs.phi();
    if pi.len() != phi.nrows() || h.len() != phi.nrows() {
        return Err(Error::param("π and h must have one entry per state"));
    }
    let mut phi_t_pi = phi.transpose();
    for (x, mut col) in phi_t_pi.column_iter_mut().enumerate() {
        col *= pi[x];
    }
    let gram = &phi_t_pi * phi;
    let w = solve(&gram, &(&phi_t_pi * h), "Φ'ΠΦ")?;
    let eps = weighted_norm(&(h - phi * &w), pi);
    Ok((w, eps))
}

/// `‖v‖_Π = sqrt(Σ π(x) v(x)²)`.
pub fn weighted_norm(v: &DVector<f64>, pi: &DVector<f64>) -> f64 {
    v.iter().zip(pi.iter()).map(|(a, p)| p * a * a).sum::<f64>().sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Definiteness {
    pub is_negative_definite: bool,
    /// Minus the largest eigenvalue of `(A + A')/2`.
    pub gamma: f64,
}

pub fn check_negative_definite(a: &DMatrix<f64>) -> Result<Definiteness> {
    if a.nrows() != a.ncols() || a.nrows() == 0 {
        return Err(Error::param("definiteness needs a nonempty square matrix"));
    }
    let sym = (a + a.transpose()) * 0.5;
    let max = sym
        .symmetric_eigenvalues()
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(Definiteness {
        is_negative_definite: -max > 0.0,
        gamma: -max,
    })
}

/// Every exact quantity at one `θ` and `λ`.
#[derive(Clone, Debug)]
pub struct OracleBundle {
    pub lambda: f64,
    pub policy: DMatrix<f64>,
    pub chain: DMatrix<f64>,
    pub pi: DVector<f64>,
    pub eta: f64,
    pub x_star: usize,
    pub h: DVector<f64>,
    pub grad_eta: DVector<f64>,
    pub grad_eta_via_h: DVector<f64>,
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub g: DMatrix<f64>,
    pub m: DMatrix<f64>,
    /// TD(λ) fixed point; orthogonal to the constant direction when the
    /// basis represents constants.
    pub w_star_td: DVector<f64>,
    pub w_star_proj: DVector<f64>,
    pub eps_app: f64,
}

impl OracleBundle {
    pub fn evaluate(mdp: &Mdp, fs: &FeatureSet, theta: &PolicyParams, lambda: f64) -> Result<Self> {
        let chain = solve_chain(mdp, fs, theta)?;
        let grads = gradients_from(mdp, fs, &chain);
        let ode = critic_from(fs, mdp.state_reward(), &chain, lambda)?;
        let w_star_td = match fs.constant_weights() {
            Some(c) => td_fixed_point_anchored(&ode.a, &ode.b, c)?,
            None => td_fixed_point(&ode.a, &ode.b)?,
        };
        let (w_star_proj, eps_app) = projected_weights_and_error(fs, &chain.pi, &chain.h)?;
        Ok(Self {
            lambda,
            policy: chain.policy,
            chain: chain.p,
            pi: chain.pi,
            eta: chain.eta,
            x_star: chain.x_star,
            h: chain.h,
            grad_eta: grads.via_td,
            grad_eta_via_h: grads.via_h,
            a: ode.a,
            b: ode.b,
            g: ode.g,
            m: ode.m,
            w_star_td,
            w_star_proj,
            eps_app,
        })
    }

    pub fn stationarity_residual(&self) -> f64 {
        stationarity_residual(&self.chain, &self.pi)
    }

    pub fn poisson_residual(&self, reward: &DVector<f64>) -> f64 {
        poisson_residual(&self.chain, reward, self.eta, &self.h)
    }

    /// `‖A w* + b‖∞`.
    pub fn td_residual(&self) -> f64 {
        inf_norm(&(&self.a * &self.w_star_td + &self.b))
    }

    pub fn grad_norm(&self) -> f64 {
        self.grad_eta.norm()
    }

    pub fn to_json(&self) -> String {
        let vec = |v: &DVector<f64>| v.iter().copied().collect::<Vec<_>>();
        let record = BundleRecord {
            lambda: self.lambda,
            pi: vec(&self.pi),
            eta: self.eta,
            x_star: self.x_star,
            h: vec(&self.h),
            grad_eta: vec(&self.grad_eta),
            a: rows_to_vecs(&self.a),
            b: vec(&self.b),
            g: rows_to_vecs(&self.g),
            m: rows_to_vecs(&self.m),
            w_star_td: vec(&self.w_star_td),
            w_star_proj: vec(&self.w_star_proj),
            eps_app: self.eps_app,
        };
        serde_json::to_string_pretty(&record).expect("bundle serializes")
    }
}

#[derive(Serialize)]
struct BundleRecord {
    lambda: f64,
    pi: Vec<f64>,
    eta: f64,
    x_star: usize,
    h: Vec<f64>,
    grad_eta: Vec<f64>,
    a: Vec<Vec<f64>>,
    b: Vec<f64>,
    g: Vec<Vec<f64>>,
    m: Vec<Vec<f64>>,
    w_star_td: Vec<f64>,
    w_star_proj: Vec<f64>,
    eps_app: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::GarnetSpec;
    use crate::policy::{likelihood_ratio, FeatureMode};
    use crate::rng::{stream_rng, Stream};
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn m(rows: usize, data: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(rows, data.len() / rows, data)
    }

    fn v(data: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(data)
    }

    fn instance(states: usize, actions: usize, seed: u64) -> (Mdp, FeatureSet) {
        let spec = GarnetSpec::new(states, actions, 2, 0.0, 3, 2).unwrap();
        let mdp = Mdp::garnet(&spec, seed).unwrap();
        let fs = FeatureSet::build(&spec, seed, FeatureMode::ExcludeConstant).unwrap();
        (mdp, fs)
    }

    fn random_theta(dim: usize, seed: u64) -> PolicyParams {
        let mut rng = stream_rng(seed, Stream::Probe);
        PolicyParams::new((0..dim).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
    }

    /// Rows of `P^k` for large k, by repeated squaring.
    fn power_limit(p: &DMatrix<f64>, squarings: u32) -> DMatrix<f64> {
        let mut q = p.clone();
        for _ in 0..squarings {
            q = &q * &q;
        }
        q
    }

    #[test]
    fn stationary_hand_examples() {
        let pi = stationary_distribution(&m(2, &[0.5, 0.5, 0.5, 0.5])).unwrap();
        assert!((pi - v(&[0.5, 0.5])).amax() < 1e-15);
        let pi = stationary_distribution(&m(2, &[0.9, 0.1, 0.5, 0.5])).unwrap();
        assert!((&pi - v(&[5.0 / 6.0, 1.0 / 6.0])).amax() < 1e-15);
        assert!((average_reward(&pi, &v(&[1.0, 0.0])) - 5.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn stationary_matches_power_iteration() {
        let (mdp, fs) = instance(6, 2, 4);
        let theta = random_theta(fs.param_dim(), 1);
        let p = mdp.transition_under_policy(&policy_matrix(&fs, &theta).unwrap()).unwrap();
        let pi = stationary_distribution(&p).unwrap();
        let limit = power_limit(&p, 11); // P^2048
        for row in limit.row_iter() {
            assert!((row.transpose() - &pi).amax() <= 1e-8);
        }
        assert!(stationarity_residual(&p, &pi) <= 1e-10);
        assert!(pi.iter().all(|&x| x > 0.0));
    }

    #[test]
    fn periodic_chain_has_no_stationary_solve() {
        let err = stationary_distribution(&m(2, &[0.0, 1.0, 1.0, 0.0])).unwrap_err();
        assert!(matches!(err, Error::Ergodicity(_)));
        assert!(stationary_distribution(&DMatrix::identity(2, 2)).is_err());
    }

    #[test]
    fn average_reward_examples() {
        let pi = v(&[0.2, 0.3, 0.5]);
        assert!((average_reward(&pi, &v(&[1.7, 1.7, 1.7])) - 1.7).abs() < 1e-15);
        assert_eq!(average_reward(&v(&[0.5, 0.5]), &v(&[1.0, 0.0])), 0.5);
    }

    #[test]
    fn poisson_hand_example() {
        let p = m(2, &[0.5, 0.5, 0.5, 0.5]);
        let r = v(&[1.0, 0.0]);
        let h = differential_value(&p, &r, 0.5, 0).unwrap();
        assert!((&h - v(&[0.0, -1.0])).amax() < 1e-15);
        assert!(poisson_residual(&p, &r, 0.5, &h) < 1e-15);

        let h = differential_value(&p, &v(&[2.0, 2.0]), 2.0, 1).unwrap();
        assert!(h.amax() == 0.0);
    }

    #[test]
    fn td_examples() {
        let mdp = Mdp::new(vec![m(2, &[0.5, 0.5, 0.5, 0.5])], v(&[1.0, 0.0]), 0.0).unwrap();
        let fs = FeatureSet::from_matrix(m(2, &[1.0, 0.0]), 1).unwrap();
        let theta = PolicyParams::zeros(1);
        let bundle = OracleBundle::evaluate(&mdp, &fs, &theta, 0.0).unwrap();
        assert_eq!(bundle.x_star, 0);
        assert!((td_exact(&bundle, mdp.state_reward(), 0, 1) + 0.5).abs() < 1e-15);

        let flat = Mdp::new(vec![m(2, &[0.3, 0.7, 0.6, 0.4])], v(&[0.8, 0.8]), 0.0).unwrap();
        let bundle = OracleBundle::evaluate(&flat, &fs, &theta, 0.0).unwrap();
        for x in 0..2 {
            assert!(td_exact(&bundle, flat.state_reward(), x, x).abs() < 1e-15);
        }
    }

    #[test]
    fn expected_td_vanishes() {
        for seed in 0..10 {
            let (mdp, fs) = instance(6, 3, seed);
            let theta = random_theta(fs.param_dim(), seed);
            let bundle = OracleBundle::evaluate(&mdp, &fs, &theta, 0.5).unwrap();
            let mut expectation = 0.0;
            for x in 0..6 {
                for y in 0..6 {
                    expectation += bundle.pi[x]
                        * bundle.chain[(x, y)]
                        * td_exact(&bundle, mdp.state_reward(), x, y);
                }
            }
            assert!(expectation.abs() < 1e-12);
        }
    }

    #[test]
    fn poisson_matches_regenerative_cycles() {
        let (mdp, fs) = instance(5, 2, 21);
        let theta = random_theta(fs.param_dim(), 3);
        let bundle = OracleBundle::evaluate(&mdp, &fs, &theta, 0.0).unwrap();
        let mut rng = stream_rng(99, Stream::Transitions);
        let cycles = 100_000;
        for start in 0..5 {
            // Reward minus η accumulated until the chain first hits x*.
            let (mut sum, mut sum_sq) = (0.0, 0.0);
            for _ in 0..cycles {
                let mut x = start;
                let mut total = 0.0;
                loop {
                    total += mdp.state_reward()[x] - bundle.eta;
                    let u = crate::policy::draw_index(
                        bundle.policy.row(x).transpose().as_slice(),
                        rng.random(),
                    );
                    x = mdp.next_state(x, u, &mut rng);
                    if x == bundle.x_star {
                        break;
                    }
                }
                sum += total;
                sum_sq += total * total;
            }
            let mean = sum / cycles as f64;
            let se = ((sum_sq / cycles as f64 - mean * mean) / cycles as f64).sqrt();
            assert!(
                (mean - bundle.h[start]).abs() <= 3.0 * se,
                "state {start}: MC {mean} ± {se}, exact {}",
                bundle.h[start]
            );
        }
    }

    #[test]
    fn single_action_gradient_is_zero() {
        let spec = GarnetSpec::new(5, 1, 3, 0.0, 4, 2).unwrap();
        let mdp = Mdp::garnet(&spec, 0).unwrap();
        let fs = FeatureSet::build(&spec, 0, FeatureMode::Garnet).unwrap();
        let g = gradient_exact(&mdp, &fs, &random_theta(fs.param_dim(), 0)).unwrap();
        assert!(g.via_td.iter().chain(g.via_h.iter()).all(|&x| x == 0.0));
    }

    #[test]
    fn gradient_formulas_agree_with_triple_sum() {
        let spec = GarnetSpec::new(5, 3, 2, 0.0, 3, 2).unwrap();
        for seed in 0..10 {
            let mdp = Mdp::garnet(&spec, seed).unwrap();
            let fs = FeatureSet::build(&spec, seed, FeatureMode::ExcludeConstant).unwrap();
            let theta = random_theta(fs.param_dim(), seed + 100);
            let bundle = OracleBundle::evaluate(&mdp, &fs, &theta, 0.0).unwrap();
            // Direct Σ_{x,u,y} D^{(x,u,y)} d(x,y).
            let mut direct = DVector::zeros(fs.param_dim());
            for x in 0..5 {
                for u in 0..3 {
                    let psi = likelihood_ratio(&fs, &theta, x, u).unwrap();
                    for y in 0..5 {
                        let weight = bundle.pi[x] * bundle.policy[(x, u)] * mdp.transition(u)[(x, y)];
                        direct += &psi * (weight * td_exact(&bundle, mdp.state_reward(), x, y));
                    }
                }
            }
            assert!((&direct - &bundle.grad_eta).amax() <= 1e-12);
            assert!((&bundle.grad_eta - &bundle.grad_eta_via_h).amax() <= 1e-9);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (mdp, fs) = instance(6, 3, 8);
        let theta = random_theta(fs.param_dim(), 2);
        let grad = gradient_exact(&mdp, &fs, &theta).unwrap().via_td;
        let eps = 1e-5;
        // η via P^(2^12) rows, independent of the linear solve.
        let eta_power = |t: &PolicyParams| {
            let p = mdp.transition_under_policy(&policy_matrix(&fs, t).unwrap()).unwrap();
            let limit = power_limit(&p, 12);
            limit.row(0).transpose().dot(mdp.state_reward())
        };
        let mut fd = DVector::zeros(fs.param_dim());
        for k in 0..fs.param_dim() {
            let mut plus = theta.clone();
            let mut minus = theta.clone();
            plus.as_mut_slice()[k] += eps;
            minus.as_mut_slice()[k] -= eps;
            fd[k] = (eta_power(&plus) - eta_power(&minus)) / (2.0 * eps);
        }
        assert!((&fd - &grad).amax() / grad.amax() <= 1e-5);
    }

    #[test]
    fn lambda_zero_collapses_series() {
        let (mdp, fs) = instance(5, 2, 1);
        let theta = random_theta(fs.param_dim(), 1);
        let bundle = OracleBundle::evaluate(&mdp, &fs, &theta, 0.0).unwrap();
        assert!((&bundle.m - &bundle.chain).amax() < 1e-14);
        let pi_diag = DMatrix::from_diagonal(&bundle.pi);
        let phi = fs.phi();
        let a = phi.transpose() * &pi_diag * (&bundle.chain - DMatrix::identity(5, 5)) * phi;
        let b = phi.transpose() * &pi_diag * mdp.state_reward().add_scalar(-bundle.eta);
        assert!((a - &bundle.a).amax() < 1e-14);
        assert!((b - &bundle.b).amax() < 1e-14);
    }

    #[test]
    fn critic_matrices_match_truncated_series() {
        let (mdp, fs) = instance(4, 2, 6);
        let theta = random_theta(fs.param_dim(), 6);
        let lambda = 0.9;
        let ode = critic_ode_quantities(&mdp, &fs, &theta, lambda).unwrap();
        let bundle = OracleBundle::evaluate(&mdp, &fs, &theta, lambda).unwrap();
        let p = &bundle.chain;
        let mut series_m = DMatrix::zeros(4, 4);
        let mut power = p.clone();
        let mut weight = 1.0;
        for _ in 0..=200 {
            series_m += &power * weight;
            power = &power * p;
            weight *= lambda;
        }
        series_m *= 1.0 - lambda;
        let pi_diag = DMatrix::from_diagonal(&bundle.pi);
        let phi = fs.phi();
        let a = phi.transpose() * &pi_diag * (&series_m - DMatrix::identity(4, 4)) * phi;
        assert!((a - &ode.a).amax() <= 1e-8);
        for row in ode.m.row_iter() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn td_fixed_point_examples() {
        let a = -DMatrix::<f64>::identity(3, 3) * 2.0;
        assert_eq!(td_fixed_point(&a, &DVector::zeros(3)).unwrap(), DVector::zeros(3));
        assert!(matches!(
            td_fixed_point(&DMatrix::zeros(2, 2), &DVector::zeros(2)),
            Err(Error::Conditioning { .. })
        ));

        let flat = Mdp::new(
            vec![m(3, &[0.2, 0.5, 0.3, 0.4, 0.4, 0.2, 0.1, 0.1, 0.8])],
            v(&[0.3, 0.3, 0.3]),
            0.0,
        )
        .unwrap();
        let fs = FeatureSet::from_matrix(m(3, &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]), 1).unwrap();
        let bundle = OracleBundle::evaluate(&flat, &fs, &PolicyParams::zeros(2), 0.5).unwrap();
        assert!(bundle.w_star_td.amax() < 1e-14);
    }

    #[test]
    fn complementary_basis_reproduces_h() {
        // L = |X| − 1 with 1 ∉ span(Φ): Φw* = h + c·1.
        let spec = GarnetSpec::new(5, 2, 3, 0.0, 4, 2).unwrap();
        let mdp = Mdp::garnet(&spec, 13).unwrap();
        let fs = FeatureSet::build(&spec, 13, FeatureMode::ExcludeConstant).unwrap();
        let theta = random_theta(fs.param_dim(), 13);
        for lambda in [0.0, 0.5, 0.9] {
            let bundle = OracleBundle::evaluate(&mdp, &fs, &theta, lambda).unwrap();
            assert!(bundle.td_residual() <= 1e-10);
            let diff = fs.phi() * &bundle.w_star_td - &bundle.h;
            let offset = diff.mean();
            assert!(diff.add_scalar(-offset).amax() <= 1e-8);
        }
    }

    #[test]
    fn anchored_fixed_point_for_garnet_features() {
        let spec = GarnetSpec::small();
        let mdp = Mdp::garnet(&spec, 2).unwrap();
        let fs = FeatureSet::build(&spec, 2, FeatureMode::Garnet).unwrap();
        let theta = random_theta(fs.param_dim(), 2);
        let bundle = OracleBundle::evaluate(&mdp, &fs, &theta, 0.5).unwrap();
        let c = fs.constant_weights().unwrap();
        assert!((&bundle.a * c).amax() < 1e-12);
        assert!(bundle.td_residual() <= 1e-10);
        assert!(c.dot(&bundle.w_star_td).abs() < 1e-10);
    }

    #[test]
    fn projection_examples() {
        let (mdp, fs) = instance(6, 2, 3);
        let theta = random_theta(fs.param_dim(), 3);
        let bundle = OracleBundle::evaluate(&mdp, &fs, &theta, 0.0).unwrap();

        // h in span(Φ).
        let w_true = v(&[0.5, -1.0, 2.0]);
        let h_in = fs.phi() * &w_true;
        let (w, eps) = projected_weights_and_error(&fs, &bundle.pi, &h_in).unwrap();
        assert!(eps < 1e-12);
        assert!((fs.phi() * w - h_in).amax() < 1e-12);

        // Optimality against random probes.
        let mut rng = stream_rng(0, Stream::Probe);
        for _ in 0..100 {
            let probe = DVector::from_fn(3, |_, _| rng.sample::<f64, _>(StandardNormal) * 3.0);
            let other = weighted_norm(&(&bundle.h - fs.phi() * probe), &bundle.pi);
            assert!(bundle.eps_app <= other + 1e-12);
        }
    }

    #[test]
    fn projection_of_orthogonal_target() {
        let fs = FeatureSet::from_matrix(m(3, &[1.0, 0.0, 2.0]), 1).unwrap();
        let pi = v(&[0.25, 0.25, 0.5]);
        let h = v(&[4.0, 2.0, -1.0]);
        let (w, eps) = projected_weights_and_error(&fs, &pi, &h).unwrap();
        assert!(w[0].abs() < 1e-15);
        assert!((eps - weighted_norm(&h, &pi)).abs() < 1e-15);
    }

    #[test]
    fn definiteness_examples() {
        let d = check_negative_definite(&-DMatrix::<f64>::identity(3, 3)).unwrap();
        assert!(d.is_negative_definite);
        assert!((d.gamma - 1.0).abs() < 1e-15);

        for seed in 0..5 {
            let (mdp, fs) = instance(6, 3, seed);
            let theta = random_theta(fs.param_dim(), seed);
            let ode = critic_ode_quantities(&mdp, &fs, &theta, 0.5).unwrap();
            assert!(check_negative_definite(&ode.a).unwrap().is_negative_definite);

            let with_constant = fs.phi().clone().insert_column(3, 1.0);
            let fs_c = FeatureSet::from_matrix(with_constant, 3).unwrap();
            let theta_c = random_theta(fs_c.param_dim(), seed);
            let ode = critic_ode_quantities(&mdp, &fs_c, &theta_c, 0.5).unwrap();
            assert!(check_negative_definite(&ode.a).unwrap().gamma <= 1e-10);
        }
    }

    #[test]
    fn simulated_long_run_average_matches_eta() {
        let (mdp, fs) = instance(5, 3, 30);
        let theta = random_theta(fs.param_dim(), 30);
        let bundle = OracleBundle::evaluate(&mdp, &fs, &theta, 0.0).unwrap();
        let mut rng = stream_rng(1, Stream::Transitions);
        let (batches, per_batch) = (100, 10_000);
        let mut x = 0;
        let means: Vec<f64> = (0..batches)
            .map(|_| {
                let mut total = 0.0;
                for _ in 0..per_batch {
                    total += mdp.state_reward()[x];
                    let u = crate::policy::draw_index(
                        bundle.policy.row(x).transpose().as_slice(),
                        rng.random(),
                    );
                    x = mdp.next_state(x, u, &mut rng);
                }
                total / per_batch as f64
            })
            .collect();
        let mean = means.iter().sum::<f64>() / batches as f64;
        let var = means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (batches - 1) as f64;
        let se = (var / batches as f64).sqrt();
        assert!((mean - bundle.eta).abs() <= 3.0 * se, "{mean} vs {}", bundle.eta);
    }

    #[test]
    fn bundle_json_exports_fields() {
        let (mdp, fs) = instance(5, 2, 0);
        let bundle = OracleBundle::evaluate(&mdp, &fs, &PolicyParams::zeros(fs.param_dim()), 0.5).unwrap();
        let value: serde_json::Value = serde_json::from_str(&bundle.to_json()).unwrap();
        assert_eq!(value["a"].as_array().unwrap().len(), 3);
        assert_eq!(value["pi"].as_array().unwrap().len(), 5);
    }
}
