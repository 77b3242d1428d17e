//! Critic features, the linear-softmax actor and its score function.
//!
//! The critic approximates the differential value as `h̃(x) = φ(x)'w` with a
//! basis matrix `Φ` of shape `|X| × L`. The actor uses `K = L·|U|`
//! parameters: the feature of the pair `(x, u)` is `φ(x)` placed in block `u`
//! of a length-`K` vector, and `μ(u|x,θ) ∝ exp(θ'ξ(x,u))`.

use std::collections::HashSet;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::rank;
use crate::mdp::GarnetSpec;
use crate::rng::{stream_rng, Stream};

const MAX_FEATURE_ATTEMPTS: usize = 1000;

/// How random binary feature rows are drawn.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureMode {
    /// Exactly `l` ones per row. Every row then sums to `l`, so the constant
    /// vector always lies in the span of `Φ`.
    #[default]
    Garnet,
    /// Between 1 and `l` ones per row, redrawn until `[Φ | 1]` has full
    /// column rank. The TD(λ) matrix `A(θ)` is then nonsingular.
    ExcludeConstant,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    /// Critic basis, possibly column-normalized.
    phi: DMatrix<f64>,
    /// Raw pattern used for the actor blocks.
    pattern: DMatrix<f64>,
    n_actions: usize,
    /// `c` with `Φc = 1`, when the constant vector is representable.
    constant_weights: Option<DVector<f64>>,
}

impl FeatureSet {
    /// Random binary features for a GARNET spec; distinct rows, linearly
    /// independent columns, deterministic in `(spec, seed, mode)`.
    pub fn build(spec: &GarnetSpec, seed: u64, mode: FeatureMode) -> Result<Self> {
        spec.validate()?;
        let (n, l, k) = (spec.states, spec.basis, spec.active);
        let min_ones = match mode {
            FeatureMode::Garnet => k,
            FeatureMode::ExcludeConstant => 1,
        };
        let patterns: u128 = (min_ones..=k).map(|j| binomial(l, j)).sum();
        if patterns < n as u128 {
            return Err(Error::param(format!(
                "only {patterns} distinct feature rows exist for L={l}, l={k} but {n} states need one each"
            )));
        }
        let needed_rows = match mode {
            FeatureMode::Garnet => l,
            FeatureMode::ExcludeConstant => l + 1,
        };
        if n < needed_rows {
            return Err(Error::param(format!(
                "{n} states cannot support {needed_rows} independent columns"
            )));
        }

        let mut rng = stream_rng(seed, Stream::Features);
        for _ in 0..MAX_FEATURE_ATTEMPTS {
            let phi = draw_rows(&mut rng, n, l, min_ones, k);
            let ok = match mode {
                FeatureMode::Garnet => rank(&phi) == l,
                FeatureMode::ExcludeConstant => rank(&phi.clone().insert_column(l, 1.0)) == l + 1,
            };
            if ok {
                return Self::from_matrix(phi, spec.actions);
            }
        }
        Err(Error::param(format!(
            "no admissible feature set after {MAX_FEATURE_ATTEMPTS} draws"
        )))
    }

    /// Wraps an explicit basis. Rows must be pairwise distinct and columns
    /// linearly independent.
    pub fn from_matrix(phi: DMatrix<f64>, n_actions: usize) -> Result<Self> {
        let (n, l) = phi.shape();
        if n == 0 || l == 0 || n_actions == 0 {
            return Err(Error::param("feature matrix and action set must be nonempty"));
        }
        if phi.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("feature matrix has non-finite entries"));
        }
        let mut seen = HashSet::new();
        for x in 0..n {
            let key: Vec<u64> = phi.row(x).iter().map(|v| v.to_bits()).collect();
            if !seen.insert(key) {
                return Err(Error::param(format!("state {x} repeats an earlier feature row")));
            }
        }
        if rank(&phi) < l {
            return Err(Error::param("feature columns are linearly dependent"));
        }
        let constant_weights = constant_weights(&phi);
        Ok(Self {
            pattern: phi.clone(),
            phi,
            n_actions,
            constant_weights,
        })
    }

    /// Critic basis rescaled to unit column norms; actor features unchanged.
    pub fn normalized(&self) -> Self {
        let mut phi = self.phi.clone();
        for mut col in phi.column_iter_mut() {
            let norm = col.norm();
            if norm > 0.0 {
                col /= norm;
            }
        }
        Self {
            constant_weights: constant_weights(&phi),
            phi,
            pattern: self.pattern.clone(),
            n_actions: self.n_actions,
        }
    }

    pub fn n_states(&self) -> usize {
        self.phi.nrows()
    }

    pub fn basis_size(&self) -> usize {
        self.phi.ncols()
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    /// Actor parameter dimension `L·|U|`.
    pub fn param_dim(&self) -> usize {
        self.pattern.ncols() * self.n_actions
    }

    pub fn phi(&self) -> &DMatrix<f64> {
        &self.phi
    }

    pub fn actor_pattern(&self) -> &DMatrix<f64> {
        &self.pattern
    }

    pub fn constant_weights(&self) -> Option<&DVector<f64>> {
        self.constant_weights.as_ref()
    }

    /// Removes from `w` its Euclidean component along the weights that
    /// represent the constant vector. The TD(λ) fixed point is only defined
    /// modulo that direction when it exists.
    pub fn quotient_constant(&self, w: &DVector<f64>) -> DVector<f64> {
        match &self.constant_weights {
            Some(c) => w - c * (c.dot(w) / c.norm_squared()),
            None => w.clone(),
        }
    }

    /// `ξ(x,u)`: `φ(x)` in block `u`, zeros elsewhere.
    pub fn action_feature(&self, x: usize, u: usize) -> Result<DVector<f64>> {
        self.check_pair(x, u)?;
        let l = self.pattern.ncols();
        let mut out = DVector::zeros(self.param_dim());
        for j in 0..l {
            out[u * l + j] = self.pattern[(x, j)];
        }
        Ok(out)
    }

    fn check_pair(&self, x: usize, u: usize) -> Result<()> {
        if x >= self.n_states() || u >= self.n_actions {
            return Err(Error::param(format!(
                "(state {x}, action {u}) out of range for {}x{}",
                self.n_states(),
                self.n_actions
            )));
        }
        Ok(())
    }

    fn check_theta(&self, theta: &PolicyParams) -> Result<()> {
        if theta.len() != self.param_dim() {
            return Err(Error::param(format!(
                "θ has length {}, expected {}",
                theta.len(),
                self.param_dim()
            )));
        }
        if theta.0.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("θ has non-finite entries"));
        }
        Ok(())
    }

    /// Softmax probabilities written into `out` (length `|U|`), max-shifted.
    pub(crate) fn probabilities_into(&self, theta: &[f64], x: usize, out: &mut [f64]) {
        let l = self.pattern.ncols();
        let row = self.pattern.row(x);
        let mut max = f64::NEG_INFINITY;
        for (u, o) in out.iter_mut().enumerate() {
            let block = &theta[u * l..(u + 1) * l];
            let logit: f64 = row.iter().zip(block).map(|(a, b)| a * b).sum();
            *o = logit;
            max = max.max(logit);
        }
        let mut total = 0.0;
        for o in out.iter_mut() {
            *o = (*o - max).exp();
            total += *o;
        }
        for o in out.iter_mut() {
            *o /= total;
        }
    }

    /// Adds `scale · ψ(x,u,θ)` to `target`, given the probabilities at `x`.
    pub(crate) fn add_scaled_score(
        &self,
        x: usize,
        u: usize,
        probs: &[f64],
        scale: f64,
        target: &mut [f64],
    ) {
        let l = self.pattern.ncols();
        let row = self.pattern.row(x);
        for (a, &p) in probs.iter().enumerate() {
            let coeff = scale * (if a == u { 1.0 } else { 0.0 } - p);
            if coeff == 0.0 {
                continue;
            }
            for (t, f) in target[a * l..(a + 1) * l].iter_mut().zip(row.iter()) {
                *t += coeff * f;
            }
        }
    }
}

fn draw_rows<R: Rng>(rng: &mut R, n: usize, l: usize, min_ones: usize, max_ones: usize) -> DMatrix<f64> {
    let mut seen = HashSet::new();
    let mut phi = DMatrix::zeros(n, l);
    for x in 0..n {
        let positions = loop {
            let ones = if min_ones == max_ones {
                max_ones
            } else {
                rng.random_range(min_ones..=max_ones)
            };
            let mut positions = rand::seq::index::sample(rng, l, ones).into_vec();
            positions.sort_unstable();
            if seen.insert(positions.clone()) {
                break positions;
            }
        };
        for j in positions {
            phi[(x, j)] = 1.0;
        }
    }
    phi
}

fn constant_weights(phi: &DMatrix<f64>) -> Option<DVector<f64>> {
    let ones = DVector::from_element(phi.nrows(), 1.0);
    let c = phi.clone().svd(true, true).solve(&ones, 1e-12).ok()?;
    let residual = (phi * &c - ones).amax();
    (residual <= 1e-9).then_some(c)
}

fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc.saturating_mul((n - i) as u128) / (i as u128 + 1))
}

/// Actor parameters `θ ∈ R^K`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PolicyParams(Vec<f64>);

impl PolicyParams {
    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("θ has non-finite entries"));
        }
        Ok(Self(values))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub(crate) fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn to_dvector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.0)
    }
}

impl From<DVector<f64>> for PolicyParams {
    fn from(v: DVector<f64>) -> Self {
        Self(v.iter().copied().collect())
    }
}

/// `μ(·|x,θ)` as a vector over actions.
pub fn policy_distribution(fs: &FeatureSet, theta: &PolicyParams, x: usize) -> Result<Vec<f64>> {
    fs.check_theta(theta)?;
    fs.check_pair(x, 0)?;
    let mut out = vec![0.0; fs.n_actions()];
    fs.probabilities_into(theta.as_slice(), x, &mut out);
    Ok(out)
}

/// The full `|X| × |U|` policy matrix.
pub fn policy_matrix(fs: &FeatureSet, theta: &PolicyParams) -> Result<DMatrix<f64>> {
    fs.check_theta(theta)?;
    let mut m = DMatrix::zeros(fs.n_states(), fs.n_actions());
    let mut buf = vec![0.0; fs.n_actions()];
    for x in 0..fs.n_states() {
        fs.probabilities_into(theta.as_slice(), x, &mut buf);
        for (u, p) in buf.iter().enumerate() {
            m[(x, u)] = *p;
        }
    }
    Ok(m)
}

/// The score `ψ(x,u,θ) = ∇θ μ(u|x,θ) / μ(u|x,θ)`, which for the softmax
/// family is `ξ(x,u) − Σ_{u'} μ(u'|x,θ) ξ(x,u')`.
pub fn likelihood_ratio(
    fs: &FeatureSet,
    theta: &PolicyParams,
    x: usize,
    u: usize,
) -> Result<DVector<f64>> {
    fs.check_theta(theta)?;
    fs.check_pair(x, u)?;
    let mut probs = vec![0.0; fs.n_actions()];
    fs.probabilities_into(theta.as_slice(), x, &mut probs);
    let mut out = vec![0.0; fs.param_dim()];
    fs.add_scaled_score(x, u, &probs, 1.0, &mut out);
    Ok(DVector::from_vec(out))
}

/// Inverse-CDF draw over actions in index order; consumes one uniform `f64`.
pub fn sample_action<R: Rng + ?Sized>(
    fs: &FeatureSet,
    theta: &PolicyParams,
    x: usize,
    rng: &mut R,
) -> Result<usize> {
    let probs = policy_distribution(fs, theta, x)?;
    Ok(draw_index(&probs, rng.random::<f64>()))
}

pub(crate) fn draw_index(probs: &[f64], uniform: f64) -> usize {
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if uniform < acc {
            return i;
        }
    }
    probs.len() - 1
}
