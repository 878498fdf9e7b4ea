//! Reward attributes, personalized mixtures and synthetic preference data.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SoupError};
use crate::langmdp::{LanguageMdp, PolicyTable, State, Token};
use crate::math::{sample_categorical, sigmoid};
use crate::softrl::RewardFn;

const SIMPLEX_TOL: f64 = 1e-12;

/// K linear reward attributes r_k = ψᵀν_k sharing one temperature.
#[derive(Debug, Clone)]
pub struct AttributeSet {
    nus: Vec<DVector<f64>>,
    rewards: Vec<RewardFn>,
    beta: f64,
}

impl AttributeSet {
    /// Fails with `NegativeReward` if any attribute is negative somewhere.
    pub fn new(mdp: &LanguageMdp, nus: Vec<DVector<f64>>, beta: f64) -> Result<Self> {
        if nus.is_empty() {
            return Err(SoupError::InvalidArgument("attribute set needs at least one attribute".into()));
        }
        if !(beta > 0.0) {
            return Err(SoupError::InvalidArgument(format!("beta must be positive, got {beta}")));
        }
        let mut rewards = Vec::with_capacity(nus.len());
        for nu in &nus {
            let r = RewardFn::from_linear(mdp, nu.clone())?;
            if let Some((row, value)) = r.first_negative() {
                return Err(SoupError::NegativeReward { row, value });
            }
            rewards.push(r);
        }
        Ok(Self { nus, rewards, beta })
    }

    /// Random nonnegative attributes; attribute k leans toward token k mod A.
    pub fn random<R: Rng + ?Sized>(mdp: &LanguageMdp, k: usize, beta: f64, noise: f64, rng: &mut R) -> Result<Self> {
        let d = mdp.features().dim();
        let a = mdp.actions();
        let favored = |i: usize| if mdp.features().is_tabular() { Some(i % a) } else { None };
        let nus = (0..k)
            .map(|j| {
                DVector::from_fn(d, |i, _| {
                    let bump = if favored(i) == Some(j % a) { 1.0 } else { 0.0 };
                    bump + noise * rng.random::<f64>()
                })
            })
            .collect();
        Self::new(mdp, nus, beta)
    }

    pub fn k(&self) -> usize {
        self.nus.len()
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn nu(&self, k: usize) -> &DVector<f64> {
        &self.nus[k]
    }

    pub fn nus(&self) -> &[DVector<f64>] {
        &self.nus
    }

    pub fn reward(&self, k: usize) -> &RewardFn {
        &self.rewards[k]
    }

    pub fn rewards(&self) -> &[RewardFn] {
        &self.rewards
    }
}

/// A point on the K-simplex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct PreferenceVector(Vec<f64>);

impl PreferenceVector {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.is_empty() {
            return Err(SoupError::SimplexViolation("empty vector".into()));
        }
        if let Some(x) = w.iter().find(|x| !(**x >= 0.0) || !x.is_finite()) {
            return Err(SoupError::SimplexViolation(format!("entry {x} is negative or not finite")));
        }
        let total: f64 = w.iter().sum();
        if (total - 1.0).abs() > SIMPLEX_TOL {
            return Err(SoupError::SimplexViolation(format!("entries sum to {total}")));
        }
        Ok(Self(w))
    }

    pub fn uniform(k: usize) -> Self {
        Self(vec![1.0 / k as f64; k])
    }

    pub fn one_hot(k: usize, j: usize) -> Self {
        let mut w = vec![0.0; k];
        w[j] = 1.0;
        Self(w)
    }

    pub fn k(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for PreferenceVector {
    type Error = SoupError;
    fn try_from(w: Vec<f64>) -> Result<Self> {
        Self::new(w)
    }
}

impl From<PreferenceVector> for Vec<f64> {
    fn from(w: PreferenceVector) -> Self {
        w.0
    }
}

/// ν_w = Σ_k w_k ν_k.
pub fn personalized_nu(attrs: &AttributeSet, w: &PreferenceVector) -> Result<DVector<f64>> {
    if w.k() != attrs.k() {
        return Err(SoupError::SimplexViolation(format!("{} weights for {} attributes", w.k(), attrs.k())));
    }
    let mut nu = DVector::zeros(attrs.nu(0).len());
    for (wk, nk) in w.as_slice().iter().zip(attrs.nus()) {
        nu.axpy(*wk, nk, 1.0);
    }
    Ok(nu)
}

pub fn personalized_reward(mdp: &LanguageMdp, attrs: &AttributeSet, w: &PreferenceVector) -> Result<RewardFn> {
    RewardFn::from_linear(mdp, personalized_nu(attrs, w)?)
}

/// A rollout from a prompt to depth T.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    prompt: State,
    steps: Vec<(State, Token)>,
    nodes: Vec<usize>,
}

impl Trajectory {
    /// Builds the rollout `prompt · tokens`, which must end at depth T.
    pub fn new(mdp: &LanguageMdp, prompt: State, tokens: &[Token]) -> Result<Self> {
        if prompt.depth() + tokens.len() != mdp.horizon() {
            return Err(SoupError::InvalidArgument(format!(
                "trajectory from depth {} with {} tokens does not reach horizon {}",
                prompt.depth(),
                tokens.len(),
                mdp.horizon()
            )));
        }
        let mut steps = Vec::with_capacity(tokens.len());
        let mut nodes = Vec::with_capacity(tokens.len());
        let mut s = prompt.clone();
        for &tok in tokens {
            nodes.push(mdp.index_of(&s)?);
            let next = mdp.transition(&s, tok)?;
            steps.push((s, tok));
            s = next;
        }
        Ok(Self { prompt, steps, nodes })
    }

    pub fn prompt(&self) -> &State {
        &self.prompt
    }

    pub fn steps(&self) -> &[(State, Token)] {
        &self.steps
    }

    /// Node index of each visited state, aligned with `steps`.
    pub fn nodes(&self) -> &[usize] {
        &self.nodes
    }

    pub fn tokens(&self) -> Vec<Token> {
        self.steps.iter().map(|(_, a)| *a).collect()
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Rows (node·A + token) visited, in order.
    pub fn rows(&self, actions: usize) -> impl Iterator<Item = usize> + '_ {
        self.nodes.iter().zip(&self.steps).map(move |(n, (_, a))| n * actions + a)
    }

    /// Σ_t r(s_t, a_t).
    pub fn reward(&self, r: &RewardFn, actions: usize) -> f64 {
        self.rows(actions).map(|row| r.eval(row)).sum()
    }
}

pub fn sample_trajectory<R: Rng + ?Sized>(
    mdp: &LanguageMdp,
    policy: &PolicyTable,
    prompt: &State,
    rng: &mut R,
) -> Result<Trajectory> {
    if prompt.depth() >= mdp.horizon() {
        return Err(SoupError::DepthExceeded { horizon: mdp.horizon() });
    }
    let mut node = mdp.index_of(prompt)?;
    let mut tokens = Vec::with_capacity(mdp.horizon() - prompt.depth());
    while !mdp.is_terminal(node) {
        let tok = sample_categorical(policy.row(node), rng);
        tokens.push(tok);
        node = mdp.child(node, tok);
    }
    Trajectory::new(mdp, prompt.clone(), &tokens)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreferencePair {
    pub winner: Trajectory,
    pub loser: Trajectory,
    pub user: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PairMode {
    DeterministicRank,
    #[default]
    BtSample,
}

/// True when the first of two trajectories with returns (r1, r2) wins.
pub fn first_wins<R: Rng + ?Sized>(r1: f64, r2: f64, mode: PairMode, rng: &mut R) -> bool {
    match mode {
        PairMode::DeterministicRank => r1 >= r2,
        PairMode::BtSample => rng.random::<f64>() < sigmoid(r1 - r2),
    }
}

/// Labels two rollouts under `r`, putting the winner first.
pub fn label_pair<R: Rng + ?Sized>(
    r: &RewardFn,
    actions: usize,
    t1: Trajectory,
    t2: Trajectory,
    mode: PairMode,
    user: usize,
    rng: &mut R,
) -> PreferencePair {
    let (r1, r2) = (t1.reward(r, actions), t2.reward(r, actions));
    if first_wins(r1, r2, mode, rng) {
        PreferencePair { winner: t1, loser: t2, user }
    } else {
        PreferencePair { winner: t2, loser: t1, user }
    }
}

/// Pairs of independent π_ref rollouts from the empty prompt.
pub fn generate_pairs<R: Rng + ?Sized>(
    mdp: &LanguageMdp,
    r: &RewardFn,
    n: usize,
    mode: PairMode,
    rng: &mut R,
) -> Result<Vec<PreferencePair>> {
    generate_pairs_from(mdp, r, n, mode, &[State::root()], 0, rng)
}

/// Pairs cycling over `prompts`, tagged with `user`.
pub fn generate_pairs_from<R: Rng + ?Sized>(
    mdp: &LanguageMdp,
    r: &RewardFn,
    n: usize,
    mode: PairMode,
    prompts: &[State],
    user: usize,
    rng: &mut R,
) -> Result<Vec<PreferencePair>> {
    if n == 0 || prompts.is_empty() {
        return Err(SoupError::EmptyDataset);
    }
    let refp = mdp.reference().table();
    (0..n)
        .map(|i| {
            let prompt = &prompts[i % prompts.len()];
            let t1 = sample_trajectory(mdp, refp, prompt, rng)?;
            let t2 = sample_trajectory(mdp, refp, prompt, rng)?;
            Ok(label_pair(r, mdp.actions(), t1, t2, mode, user, rng))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledTrajectory {
    pub trajectory: Trajectory,
    pub label: bool,
}

/// π_ref rollouts labeled good iff their return is strictly above the median.
pub fn generate_labeled<R: Rng + ?Sized>(
    mdp: &LanguageMdp,
    r: &RewardFn,
    n: usize,
    prompts: &[State],
    rng: &mut R,
) -> Result<Vec<LabeledTrajectory>> {
    if n == 0 || prompts.is_empty() {
        return Err(SoupError::EmptyDataset);
    }
    let refp = mdp.reference().table();
    let trajs = (0..n)
        .map(|i| sample_trajectory(mdp, refp, &prompts[i % prompts.len()], rng))
        .collect::<Result<Vec<_>>>()?;
    let returns: Vec<f64> = trajs.iter().map(|t| t.reward(r, mdp.actions())).collect();
    let med = median(&returns);
    Ok(trajs
        .into_iter()
        .zip(returns)
        .map(|(trajectory, ret)| LabeledTrajectory { trajectory, label: ret > med })
        .collect())
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Training preference vectors scattered around the basis one-hots, cycling j.
pub fn make_training_weights<R: Rng + ?Sized>(
    k_train: usize,
    n_base: usize,
    spread: f64,
    rng: &mut R,
) -> Result<Vec<PreferenceVector>> {
    if n_base == 0 || k_train < n_base {
        return Err(SoupError::InvalidArgument(format!("need K_train >= n_base >= 1, got {k_train} and {n_base}")));
    }
    (0..k_train)
        .map(|i| {
            let j = i % n_base;
            let mut w: Vec<f64> = (0..n_base)
                .map(|b| {
                    let noise: f64 = StandardNormal.sample(rng);
                    let base = if b == j { 1.0 } else { 0.0 };
                    (base + spread * noise).max(0.0)
                })
                .collect();
            let total: f64 = w.iter().sum();
            if total > 0.0 && total.is_finite() {
                w.iter_mut().for_each(|x| *x /= total);
                // land exactly on the simplex despite rounding
                let drift: f64 = 1.0 - w.iter().sum::<f64>();
                let top = (0..n_base).max_by(|&a, &b| w[a].total_cmp(&w[b])).unwrap_or(0);
                w[top] += drift;
                PreferenceVector::new(w)
            } else {
                Ok(PreferenceVector::one_hot(n_base, j))
            }
        })
        .collect()
}

/// Dirichlet(1,…,1) draw.
pub fn sample_simplex<R: Rng + ?Sized>(k: usize, rng: &mut R) -> PreferenceVector {
    let mut e: Vec<f64> = (0..k).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
    let total: f64 = e.iter().sum();
    e.iter_mut().for_each(|x| *x /= total);
    let drift = 1.0 - e.iter().sum::<f64>();
    e[0] += drift;
    PreferenceVector(e)
}
