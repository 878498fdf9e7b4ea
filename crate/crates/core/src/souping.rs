//! Policy soups: explicit logit mixing of specialists, the rejection sampler
//! that realizes the same distribution from π_ref, and the temperature constraint.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SoupError};
use crate::langmdp::{LanguageMdp, PolicyTable, State, Token};
use crate::math::{logsumexp, sample_categorical, softmax};
use crate::offline::{policy_from_q_hat, AdapterParams, LogitAdapter};
use crate::softrl::{kl_state, SoftSolution};

const CONSTRAINT_TOL: f64 = 1e-12;

/// Mixture weights λ with base temperature β and soup temperature β′.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoupWeights {
    pub lambda: Vec<f64>,
    pub beta: f64,
    pub beta_prime: f64,
}

impl SoupWeights {
    /// Fails unless β, β′ > 0 and β·Σ|λ| ≤ β′.
    pub fn new(lambda: Vec<f64>, beta: f64, beta_prime: f64) -> Result<Self> {
        let sw = Self { lambda, beta, beta_prime };
        sw.validate()?;
        Ok(sw)
    }

    pub fn zero(k: usize, beta: f64, beta_prime: f64) -> Self {
        Self { lambda: vec![0.0; k], beta, beta_prime }
    }

    /// λ = (β′/β)e_k, which recovers specialist k.
    pub fn one_hot(k: usize, j: usize, beta: f64, beta_prime: f64) -> Self {
        let mut lambda = vec![0.0; k];
        lambda[j] = beta_prime / beta;
        Self { lambda, beta, beta_prime }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) || !(self.beta_prime > 0.0) {
            return Err(SoupError::InvalidArgument(format!(
                "temperatures must be positive, got beta={} beta'={}",
                self.beta, self.beta_prime
            )));
        }
        if self.lambda.iter().any(|l| !l.is_finite()) {
            return Err(SoupError::InvalidArgument("lambda has non-finite entries".into()));
        }
        let lhs = self.beta * self.l1();
        if lhs > self.beta_prime * (1.0 + CONSTRAINT_TOL) + CONSTRAINT_TOL {
            return Err(SoupError::ConstraintViolation { lhs, beta_prime: self.beta_prime });
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.lambda.len()
    }

    pub fn l1(&self) -> f64 {
        self.lambda.iter().map(|l| l.abs()).sum()
    }

    /// Coefficient β/β′ applied to Σ λ_k q̂_k.
    pub fn scale(&self) -> f64 {
        self.beta / self.beta_prime
    }

    /// KL coefficient β′/Σ|λ| of the soup objective (∞ at λ = 0).
    pub fn kl_coeff(&self) -> f64 {
        self.beta_prime / self.l1()
    }
}

/// Radial rescaling onto {β·Σ|λ| ≤ β′}; feasible inputs pass through unchanged.
pub fn project_lambda(lambda: &[f64], beta: f64, beta_prime: f64) -> Result<SoupWeights> {
    let l1: f64 = lambda.iter().map(|l| l.abs()).sum();
    let lambda = if beta * l1 > beta_prime {
        let c = beta_prime / (beta * l1);
        lambda.iter().map(|l| l * c).collect()
    } else {
        lambda.to_vec()
    };
    SoupWeights::new(lambda, beta, beta_prime)
}

/// Euclidean projection onto the L1 ball of the given radius.
pub fn project_l1_ball(v: &[f64], radius: f64) -> Vec<f64> {
    let l1: f64 = v.iter().map(|x| x.abs()).sum();
    if l1 <= radius {
        return v.to_vec();
    }
    if radius <= 0.0 {
        return vec![0.0; v.len()];
    }
    let mut u: Vec<f64> = v.iter().map(|x| x.abs()).collect();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (j, &uj) in u.iter().enumerate() {
        cum += uj;
        let t = (cum - radius) / (j + 1) as f64;
        if uj > t {
            theta = t;
        }
    }
    v.iter().map(|x| x.signum() * (x.abs() - theta).max(0.0)).collect()
}

/// K specialists with their q̂ tables and log-ratios log π_k − log π_ref cached per row.
#[derive(Debug, Clone)]
pub struct Specialists {
    adapters: Vec<LogitAdapter>,
    q_hat: Vec<Vec<f64>>,
    log_ratio: Vec<Vec<f64>>,
    policies: Vec<PolicyTable>,
}

impl Specialists {
    pub fn new(mdp: &LanguageMdp, adapters: Vec<LogitAdapter>) -> Result<Self> {
        if adapters.is_empty() {
            return Err(SoupError::InvalidArgument("need at least one specialist".into()));
        }
        let a = mdp.actions();
        let lref = mdp.reference().log_probs();
        let mut q_hat = Vec::with_capacity(adapters.len());
        let mut log_ratio = Vec::with_capacity(adapters.len());
        let mut policies = Vec::with_capacity(adapters.len());
        for ad in &adapters {
            let q = ad.q_hat(mdp)?;
            let pol = policy_from_q_hat(mdp, &q);
            let mut lr = vec![0.0; mdp.row_count()];
            let mut buf = vec![0.0; a];
            for node in 0..mdp.internal_count() {
                for tok in 0..a {
                    buf[tok] = lref[node * a + tok] + q[node * a + tok];
                }
                let z = logsumexp(&buf);
                for tok in 0..a {
                    lr[node * a + tok] = q[node * a + tok] - z;
                }
            }
            q_hat.push(q);
            log_ratio.push(lr);
            policies.push(pol);
        }
        Ok(Self { adapters, q_hat, log_ratio, policies })
    }

    /// Oracle specialists q̂_k = Q*_k/β.
    pub fn from_solutions(mdp: &LanguageMdp, sols: &[SoftSolution]) -> Result<Self> {
        Self::new(mdp, sols.iter().enumerate().map(|(k, s)| LogitAdapter::from_solution(k, s)).collect())
    }

    pub fn k(&self) -> usize {
        self.adapters.len()
    }

    pub fn adapters(&self) -> &[LogitAdapter] {
        &self.adapters
    }

    pub fn q_hat(&self, k: usize) -> &[f64] {
        &self.q_hat[k]
    }

    pub fn log_ratio(&self, k: usize) -> &[f64] {
        &self.log_ratio[k]
    }

    pub fn policy(&self, k: usize) -> &PolicyTable {
        &self.policies[k]
    }

    /// Keeps the listed specialists, in order.
    pub fn subset(&self, keep: &[usize]) -> Self {
        Self {
            adapters: keep.iter().map(|&k| self.adapters[k].clone()).collect(),
            q_hat: keep.iter().map(|&k| self.q_hat[k].clone()).collect(),
            log_ratio: keep.iter().map(|&k| self.log_ratio[k].clone()).collect(),
            policies: keep.iter().map(|&k| self.policies[k].clone()).collect(),
        }
    }

    fn check(&self, sw: &SoupWeights) -> Result<()> {
        if sw.k() != self.k() {
            return Err(SoupError::InvalidArgument(format!("{} weights for {} specialists", sw.k(), self.k())));
        }
        sw.validate()
    }

    /// logit_ref(s,·) + (β/β′) Σ λ_k q̂_k(s,·) at one node, written into `out`.
    pub(crate) fn soup_logits_into(&self, mdp: &LanguageMdp, lambda: &[f64], scale: f64, node: usize, out: &mut [f64]) {
        let a = mdp.actions();
        out.copy_from_slice(&mdp.reference().log_probs()[node * a..(node + 1) * a]);
        for (lk, q) in lambda.iter().zip(&self.q_hat) {
            if *lk != 0.0 {
                for tok in 0..a {
                    out[tok] += scale * lk * q[node * a + tok];
                }
            }
        }
    }
}

/// π̃_λ(·|s) ∝ π_ref(·|s) exp((β/β′) Σ λ_k q̂_k(s,·)).
pub fn soup_policy(mdp: &LanguageMdp, spec: &Specialists, sw: &SoupWeights, s: &State) -> Result<Vec<f64>> {
    spec.check(sw)?;
    let node = mdp.index_of(s)?;
    if mdp.is_terminal(node) {
        return Err(SoupError::DepthExceeded { horizon: mdp.horizon() });
    }
    if sw.lambda.iter().all(|l| *l == 0.0) {
        return Ok(mdp.reference().row(node).to_vec());
    }
    let mut logits = vec![0.0; mdp.actions()];
    spec.soup_logits_into(mdp, &sw.lambda, sw.scale(), node, &mut logits);
    Ok(softmax(&logits))
}

/// The soup at every internal node.
pub fn soup_table(mdp: &LanguageMdp, spec: &Specialists, sw: &SoupWeights) -> Result<PolicyTable> {
    spec.check(sw)?;
    Ok(soup_table_unchecked(mdp, spec, &sw.lambda, sw.scale()))
}

pub(crate) fn soup_table_unchecked(mdp: &LanguageMdp, spec: &Specialists, lambda: &[f64], scale: f64) -> PolicyTable {
    if lambda.iter().all(|l| *l == 0.0) {
        return mdp.reference().table().clone();
    }
    let a = mdp.actions();
    let mut logits = vec![0.0; mdp.row_count()];
    for node in 0..mdp.internal_count() {
        spec.soup_logits_into(mdp, lambda, scale, node, &mut logits[node * a..(node + 1) * a]);
    }
    PolicyTable::from_logits(a, &logits)
}

/// Weighted average of adapter parameters (all adapters must share a kind).
pub fn psoups_average(adapters: &[LogitAdapter], weights: &[f64]) -> Result<LogitAdapter> {
    if adapters.is_empty() || adapters.len() != weights.len() {
        return Err(SoupError::InvalidArgument("need one weight per adapter".into()));
    }
    let n = adapters[0].param_len();
    let mut avg = vec![0.0; n];
    for (ad, w) in adapters.iter().zip(weights) {
        if ad.param_len() != n || std::mem::discriminant(&ad.params) != std::mem::discriminant(&adapters[0].params) {
            return Err(SoupError::InvalidArgument("adapters have different parameterizations".into()));
        }
        for (x, p) in avg.iter_mut().zip(ad.params()) {
            *x += w * p;
        }
    }
    let params = match adapters[0].params {
        AdapterParams::Theta(_) => AdapterParams::Theta(avg),
        AdapterParams::Table(_) => AdapterParams::Table(avg),
    };
    Ok(LogitAdapter { attribute_id: usize::MAX, beta: adapters[0].beta, params })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundMode {
    /// exp(−Σ_k λ_k KL(π_ref‖π_k)/β); may fall below the true ratio.
    PaperHeuristic,
    /// max_a of the acceptance ratio.
    #[default]
    ExactMax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RatioForm {
    /// exp((β/β′) Σ λ_k log(π_k/π_ref)); targets the soup exactly.
    #[default]
    Corrected,
    /// exp(Σ (λ_k/β) log(π_k/π_ref)).
    LiteralPaper,
}

/// log of the acceptance ratio for every token at `node`.
pub fn log_acceptance_ratios(mdp: &LanguageMdp, spec: &Specialists, sw: &SoupWeights, node: usize, form: RatioForm) -> Vec<f64> {
    let a = mdp.actions();
    let coef = match form {
        RatioForm::Corrected => sw.scale(),
        RatioForm::LiteralPaper => 1.0 / sw.beta,
    };
    (0..a)
        .map(|tok| {
            sw.lambda.iter().enumerate().map(|(k, l)| coef * l * spec.log_ratio(k)[node * a + tok]).sum::<f64>()
        })
        .collect()
}

/// Envelope M(s) for the rejection sampler.
pub fn acceptance_bound(
    mdp: &LanguageMdp,
    spec: &Specialists,
    sw: &SoupWeights,
    s: &State,
    mode: BoundMode,
    form: RatioForm,
) -> Result<f64> {
    spec.check(sw)?;
    let node = mdp.index_of(s)?;
    if mdp.is_terminal(node) {
        return Err(SoupError::DepthExceeded { horizon: mdp.horizon() });
    }
    Ok(bound_at(mdp, spec, sw, node, mode, form))
}

fn bound_at(mdp: &LanguageMdp, spec: &Specialists, sw: &SoupWeights, node: usize, mode: BoundMode, form: RatioForm) -> f64 {
    match mode {
        BoundMode::ExactMax => {
            log_acceptance_ratios(mdp, spec, sw, node, form).into_iter().fold(f64::NEG_INFINITY, f64::max).exp()
        }
        BoundMode::PaperHeuristic => {
            let refp = mdp.reference().row(node);
            let total: f64 = sw
                .lambda
                .iter()
                .enumerate()
                .map(|(k, l)| l * kl_state(refp, spec.policy(k).row(node)).unwrap_or(f64::INFINITY))
                .sum();
            (-total / sw.beta).exp()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub mode: BoundMode,
    pub form: RatioForm,
    pub max_tries: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { mode: BoundMode::ExactMax, form: RatioForm::Corrected, max_tries: 10_000 }
    }
}

/// Counters accumulated across calls to the rejection sampler.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SamplerStats {
    pub proposals: u64,
    pub accepted: u64,
    /// Proposals whose ratio/M exceeded 1 and was clamped.
    pub clamped: u64,
    /// Draws that hit max_tries and fell back to explicit sampling.
    pub max_tries_exceeded: u64,
}

impl SamplerStats {
    pub fn acceptance_rate(&self) -> f64 {
        if self.proposals == 0 {
            0.0
        } else {
            self.accepted as f64 / self.proposals as f64
        }
    }

    pub fn merge(&mut self, other: &SamplerStats) {
        self.proposals += other.proposals;
        self.accepted += other.accepted;
        self.clamped += other.clamped;
        self.max_tries_exceeded += other.max_tries_exceeded;
    }
}

/// Per-node proposal and acceptance tables, reusable across many draws.
#[derive(Debug, Clone)]
pub struct ImplicitSampler<'a> {
    mdp: &'a LanguageMdp,
    spec: &'a Specialists,
    sw: SoupWeights,
    cfg: SamplerConfig,
    accept: Vec<Option<Vec<f64>>>,
}

impl<'a> ImplicitSampler<'a> {
    pub fn new(mdp: &'a LanguageMdp, spec: &'a Specialists, sw: &SoupWeights, cfg: SamplerConfig) -> Result<Self> {
        spec.check(sw)?;
        if cfg.max_tries == 0 {
            return Err(SoupError::InvalidArgument("max_tries must be at least 1".into()));
        }
        Ok(Self { mdp, spec, sw: sw.clone(), cfg, accept: vec![None; mdp.internal_count()] })
    }

    /// Raw acceptance probabilities ratio(a)/M(s), before clamping.
    fn accept_probs(&mut self, node: usize) -> &[f64] {
        let (mdp, spec, sw, cfg) = (self.mdp, self.spec, &self.sw, self.cfg);
        self.accept[node].get_or_insert_with(|| {
            let log_m = bound_at(mdp, spec, sw, node, cfg.mode, cfg.form).ln();
            log_acceptance_ratios(mdp, spec, sw, node, cfg.form).into_iter().map(|lr| (lr - log_m).exp()).collect()
        })
    }

    /// One token at `node`: propose from π_ref, accept w.p. min(1, ratio/M).
    pub fn sample<R: Rng + ?Sized>(&mut self, node: usize, rng: &mut R, stats: &mut SamplerStats) -> Token {
        let mdp = self.mdp;
        let refp = mdp.reference().row(node);
        for _ in 0..self.cfg.max_tries {
            let tok = sample_categorical(refp, rng);
            let mut p = self.accept_probs(node)[tok];
            stats.proposals += 1;
            if p > 1.0 {
                stats.clamped += 1;
                p = 1.0;
            }
            if rng.random::<f64>() < p {
                stats.accepted += 1;
                return tok;
            }
        }
        stats.max_tries_exceeded += 1;
        let mut logits = vec![0.0; mdp.actions()];
        self.spec.soup_logits_into(mdp, &self.sw.lambda, self.sw.scale(), node, &mut logits);
        sample_categorical(&softmax(&logits), rng)
    }

    /// Rollout from `prompt` to depth T, one rejection-sampled token per step.
    pub fn sample_trajectory<R: Rng + ?Sized>(&mut self, prompt: &State, rng: &mut R, stats: &mut SamplerStats) -> Result<Vec<Token>> {
        let mut node = self.mdp.index_of(prompt)?;
        let mut tokens = Vec::new();
        while !self.mdp.is_terminal(node) {
            let tok = self.sample(node, rng, stats);
            tokens.push(tok);
            node = self.mdp.child(node, tok);
        }
        Ok(tokens)
    }

    /// Empirical policy from `n` draws at every internal node.
    pub fn empirical_table<R: Rng + ?Sized>(&mut self, n: usize, rng: &mut R, stats: &mut SamplerStats) -> Result<PolicyTable> {
        let a = self.mdp.actions();
        let mut probs = vec![0.0; self.mdp.row_count()];
        for node in 0..self.mdp.internal_count() {
            for _ in 0..n {
                probs[node * a + self.sample(node, rng, stats)] += 1.0;
            }
            for p in &mut probs[node * a..(node + 1) * a] {
                *p /= n as f64;
            }
        }
        // renormalize away the rounding of 1/n sums
        for node in 0..self.mdp.internal_count() {
            let row = &mut probs[node * a..(node + 1) * a];
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|p| *p /= s);
        }
        PolicyTable::from_probs(a, probs)
    }
}

/// One rejection-sampled token at `s`.
#[allow(clippy::too_many_arguments)]
pub fn rejection_sample<R: Rng + ?Sized>(
    mdp: &LanguageMdp,
    spec: &Specialists,
    sw: &SoupWeights,
    s: &State,
    rng: &mut R,
    cfg: SamplerConfig,
    stats: &mut SamplerStats,
) -> Result<Token> {
    let node = mdp.index_of(s)?;
    if mdp.is_terminal(node) {
        return Err(SoupError::DepthExceeded { horizon: mdp.horizon() });
    }
    Ok(ImplicitSampler::new(mdp, spec, sw, cfg)?.sample(node, rng, stats))
}
