//! Online estimation of soup weights from pairwise feedback, plus an exact
//! solver for the best weights when the user's reward is known.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SoupError};
use crate::langmdp::{LanguageMdp, State};
use crate::math::{log_sigmoid, sigmoid, softmax};
use crate::preference::PreferencePair;
use crate::softrl::{kl_state, RewardFn};
use crate::souping::{project_l1_ball, project_lambda, SoupWeights, Specialists};

/// Per-specialist return differences Δ_k = (R_k(w) − R_k(l))/β, winner first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeedbackEvent {
    pub delta: Vec<f64>,
}

impl FeedbackEvent {
    pub fn new(delta: Vec<f64>) -> Result<Self> {
        if delta.iter().any(|d| !d.is_finite()) {
            return Err(SoupError::InvalidArgument("feedback delta has non-finite entries".into()));
        }
        Ok(Self { delta })
    }

    /// Δ_k = Σ_t log(π_k/π_ref)(winner) − Σ_t log(π_k/π_ref)(loser).
    pub fn from_pair(mdp: &LanguageMdp, spec: &Specialists, pair: &PreferencePair) -> Result<Self> {
        let a = mdp.actions();
        let delta = (0..spec.k())
            .map(|k| {
                let lr = spec.log_ratio(k);
                let w: f64 = pair.winner.rows(a).map(|row| lr[row]).sum();
                let l: f64 = pair.loser.rows(a).map(|row| lr[row]).sum();
                w - l
            })
            .collect();
        Self::new(delta)
    }

    pub fn k(&self) -> usize {
        self.delta.len()
    }

    fn vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.delta)
    }
}

/// Gaussian q(λ) = N(mean, covariance).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawPosterior", into = "RawPosterior")]
pub struct VariationalPosterior {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawPosterior {
    mean: Vec<f64>,
    covariance: Vec<Vec<f64>>,
}

impl TryFrom<RawPosterior> for VariationalPosterior {
    type Error = SoupError;
    fn try_from(raw: RawPosterior) -> Result<Self> {
        let k = raw.mean.len();
        if raw.covariance.len() != k || raw.covariance.iter().any(|r| r.len() != k) {
            return Err(SoupError::InvalidArgument("covariance must be K×K".into()));
        }
        let cov = DMatrix::from_fn(k, k, |i, j| raw.covariance[i][j]);
        Self::new(DVector::from_vec(raw.mean), cov)
    }
}

impl From<VariationalPosterior> for RawPosterior {
    fn from(p: VariationalPosterior) -> Self {
        let k = p.mean.len();
        Self {
            mean: p.mean.iter().copied().collect(),
            covariance: (0..k).map(|i| (0..k).map(|j| p.covariance[(i, j)]).collect()).collect(),
        }
    }
}

impl VariationalPosterior {
    /// Fails with `SingularUpdate` unless the covariance is symmetric positive-definite.
    pub fn new(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        let k = mean.len();
        if covariance.shape() != (k, k) {
            return Err(SoupError::InvalidArgument("covariance must be K×K".into()));
        }
        let asym = (&covariance - covariance.transpose()).amax();
        if !(asym <= 1e-9 * covariance.amax().max(1.0)) || Cholesky::new(covariance.clone()).is_none() {
            return Err(SoupError::SingularUpdate);
        }
        Ok(Self { mean, covariance })
    }

    /// N(0, variance·I).
    pub fn prior(k: usize, variance: f64) -> Self {
        Self { mean: DVector::zeros(k), covariance: DMatrix::identity(k, k) * variance }
    }

    pub fn k(&self) -> usize {
        self.mean.len()
    }

    pub fn trace(&self) -> f64 {
        self.covariance.trace()
    }
}

/// One Gaussian update for the event "winner preferred", σ = σ(λᵀΔ):
///
/// ```text
/// S_n⁻¹ = S_{n−1}⁻¹ + σ(1−σ) Δ Δᵀ
/// λ̄_n   = λ̄_{n−1} + (1−σ) S_n Δ
/// ```
///
/// Extra passes re-linearize σ at the current mean and take a Newton step on
/// the same local objective; the first pass is exactly the update above.
pub fn svi_update(post: &VariationalPosterior, e: &FeedbackEvent, inner_iters: usize) -> Result<VariationalPosterior> {
    if e.k() != post.k() {
        return Err(SoupError::InvalidArgument(format!("event has {} entries, posterior has {}", e.k(), post.k())));
    }
    if inner_iters == 0 {
        return Err(SoupError::InvalidArgument("inner_iters must be at least 1".into()));
    }
    let d = e.vector();
    let s0 = &post.covariance;
    let m0 = &post.mean;
    let sd = s0 * &d;
    let dsd = d.dot(&sd);
    let chol0 = if inner_iters > 1 { Some(Cholesky::new(s0.clone()).ok_or(SoupError::SingularUpdate)?) } else { None };
    let mut m = m0.clone();
    let mut s = s0.clone();
    for _ in 0..inner_iters {
        let sig = sigmoid(m.dot(&d));
        let c = sig * (1.0 - sig);
        let denom = 1.0 + c * dsd;
        if !(denom > 0.0) || !denom.is_finite() {
            return Err(SoupError::SingularUpdate);
        }
        s = s0 - (&sd * sd.transpose()) * (c / denom);
        // gradient of the local objective at m: S0⁻¹(m − m0) − (1−σ)Δ
        let mut g = -(1.0 - sig) * &d;
        if let Some(ch) = &chol0 {
            g += ch.solve(&(&m - m0));
        }
        m -= &s * g;
    }
    let s = (&s + s.transpose()) * 0.5;
    if m.iter().any(|x| !x.is_finite()) {
        return Err(SoupError::SingularUpdate);
    }
    VariationalPosterior::new(m, s)
}

/// Posterior after each event, starting with the prior itself.
pub fn svi_stream(prior: &VariationalPosterior, events: &[FeedbackEvent], inner_iters: usize) -> Result<Vec<VariationalPosterior>> {
    let mut out = Vec::with_capacity(events.len() + 1);
    out.push(prior.clone());
    for e in events {
        let next = svi_update(out.last().unwrap_or(prior), e, inner_iters)?;
        out.push(next);
    }
    Ok(out)
}

/// Soup weights deployed from a posterior mean.
///
/// Feedback is modeled as P(w ≻ l) = σ(λᵀΔ) with Δ measured in units of 1/β, so a
/// user with simplex weights w has λ ≈ βw. The soup needs (β/β′)λ_soup ≈ w, hence
/// λ_soup = (β′/β²)·λ̄, then projected onto the constraint.
pub fn deployed_weights(post: &VariationalPosterior, beta: f64, beta_prime: f64) -> Result<SoupWeights> {
    let scaled: Vec<f64> = post.mean.iter().map(|x| x * beta_prime / (beta * beta)).collect();
    project_lambda(&scaled, beta, beta_prime)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchFit {
    pub lambda: DVector<f64>,
    /// Objective at the start of each Newton iteration and at the end.
    pub objective: Vec<f64>,
    pub grad_norm: f64,
}

fn bt_objective(events: &[FeedbackEvent], lambda: &DVector<f64>, p: f64) -> f64 {
    events.iter().map(|e| -log_sigmoid(lambda.dot(&e.vector()))).sum::<f64>() + 0.5 * p * lambda.norm_squared()
}

/// MAP of −Σ log σ(λᵀΔ_i) + (p/2)‖λ‖² by damped Newton.
pub fn lambda_bt_batch(events: &[FeedbackEvent], prior_precision: f64) -> Result<DVector<f64>> {
    Ok(lambda_bt_batch_fit(events, prior_precision)?.lambda)
}

pub fn lambda_bt_batch_fit(events: &[FeedbackEvent], prior_precision: f64) -> Result<BatchFit> {
    if events.is_empty() {
        return Err(SoupError::EmptyDataset);
    }
    if !(prior_precision > 0.0) {
        return Err(SoupError::InvalidArgument(format!("prior precision must be positive, got {prior_precision}")));
    }
    let k = events[0].k();
    if events.iter().any(|e| e.k() != k) {
        return Err(SoupError::InvalidArgument("events have different lengths".into()));
    }
    let p = prior_precision;
    let deltas: Vec<DVector<f64>> = events.iter().map(|e| e.vector()).collect();
    let mut lambda = DVector::zeros(k);
    let mut f = bt_objective(events, &lambda, p);
    let mut trace = vec![f];
    let mut grad_norm = f64::INFINITY;
    for _ in 0..200 {
        let mut g = &lambda * p;
        let mut h = DMatrix::identity(k, k) * p;
        for d in &deltas {
            let s = sigmoid(lambda.dot(d));
            g -= d * (1.0 - s);
            h += d * d.transpose() * (s * (1.0 - s));
        }
        grad_norm = g.norm();
        if grad_norm < 1e-8 {
            break;
        }
        let step = Cholesky::new(h).ok_or(SoupError::SingularUpdate)?.solve(&g);
        let slope = g.dot(&step);
        let mut t = 1.0;
        loop {
            let cand = &lambda - &step * t;
            let fc = bt_objective(events, &cand, p);
            if fc <= f - 1e-4 * t * slope || t < 1e-12 {
                if fc <= f {
                    lambda = cand;
                    f = fc;
                }
                break;
            }
            t *= 0.5;
        }
        trace.push(f);
        if t < 1e-12 {
            break;
        }
    }
    Ok(BatchFit { lambda, objective: trace, grad_norm })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Eq6Config {
    /// Starts, counting the 2K signed one-hots; never fewer than 2K.
    pub restarts: usize,
    pub max_iters: usize,
    /// Central-difference step.
    pub h: f64,
    /// Smoothing in √(λ² + ε²) for Σ|λ| during ascent.
    pub eps: f64,
    pub seed: u64,
}

impl Default for Eq6Config {
    fn default() -> Self {
        Self { restarts: 8, max_iters: 400, h: 1e-4, eps: 1e-8, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Eq6Solution {
    pub lambda: Vec<f64>,
    pub value: f64,
    /// Whether any start improved on its own starting value.
    pub ascended: bool,
    /// Objective at each one-hot (β′/β)e_k.
    pub one_hot_values: Vec<f64>,
    /// Objective at λ = 0, i.e. E_ref[Σ r_w].
    pub reference_value: f64,
}

/// Soup objective J(λ) = E_π̃λ[Σ r_w − (β′/Σ|λ|) Σ KL(π̃λ‖π_ref)] on the subtree of one node.
pub struct SoupObjective<'a> {
    mdp: &'a LanguageMdp,
    spec: &'a Specialists,
    r: &'a RewardFn,
    beta: f64,
    beta_prime: f64,
    root: usize,
}

impl<'a> SoupObjective<'a> {
    pub fn new(
        mdp: &'a LanguageMdp,
        spec: &'a Specialists,
        r: &'a RewardFn,
        beta: f64,
        beta_prime: f64,
        s: &State,
    ) -> Result<Self> {
        if !(beta > 0.0) || !(beta_prime > 0.0) {
            return Err(SoupError::InvalidArgument("temperatures must be positive".into()));
        }
        let root = mdp.index_of(s)?;
        Ok(Self { mdp, spec, r, beta, beta_prime, root })
    }

    /// Radius β′/β of the feasible L1 ball.
    pub fn radius(&self) -> f64 {
        self.beta_prime / self.beta
    }

    /// Exact objective; λ = 0 takes its limit E_ref[Σ r_w].
    pub fn value(&self, lambda: &[f64]) -> f64 {
        let l1: f64 = lambda.iter().map(|l| l.abs()).sum();
        self.eval(lambda, l1)
    }

    fn smoothed(&self, lambda: &[f64], eps: f64) -> f64 {
        let l1: f64 = lambda.iter().map(|l| (l * l + eps * eps).sqrt()).sum();
        self.eval(lambda, l1)
    }

    fn eval(&self, lambda: &[f64], l1: f64) -> f64 {
        let zero = lambda.iter().all(|l| *l == 0.0);
        let coeff = if zero { 0.0 } else { self.beta_prime / l1 };
        let scale = self.beta / self.beta_prime;
        let mut buf = vec![0.0; self.mdp.actions()];
        self.node_value(self.root, lambda, scale, coeff, zero, &mut buf)
    }

    fn node_value(&self, node: usize, lambda: &[f64], scale: f64, coeff: f64, zero: bool, buf: &mut Vec<f64>) -> f64 {
        if self.mdp.is_terminal(node) {
            return 0.0;
        }
        let a = self.mdp.actions();
        let refp = self.mdp.reference().row(node);
        let p = if zero {
            refp.to_vec()
        } else {
            self.spec.soup_logits_into(self.mdp, lambda, scale, node, buf);
            softmax(buf)
        };
        let mut total = 0.0;
        for tok in 0..a {
            if p[tok] > 0.0 {
                let child = self.mdp.child(node, tok);
                total += p[tok] * (self.r.eval(node * a + tok) + self.node_value(child, lambda, scale, coeff, zero, buf));
            }
        }
        if !zero {
            total -= coeff * kl_state(&p, refp).unwrap_or(f64::INFINITY);
        }
        total
    }
}

/// Best soup weights for a known reward r_w at state `s`, by projected
/// finite-difference ascent from several starts. The feasible set
/// {β·Σ|λ| ≤ β′} is handled with the Euclidean L1-ball projection.
#[allow(clippy::too_many_arguments)]
pub fn solve_eq6(
    mdp: &LanguageMdp,
    spec: &Specialists,
    r_w: &RewardFn,
    beta: f64,
    beta_prime: f64,
    s: &State,
    cfg: &Eq6Config,
) -> Result<Eq6Solution> {
    let obj = SoupObjective::new(mdp, spec, r_w, beta, beta_prime, s)?;
    let k = spec.k();
    let rho = obj.radius();
    let mut starts: Vec<Vec<f64>> = Vec::new();
    for j in 0..k {
        for sign in [1.0, -1.0] {
            let mut l = vec![0.0; k];
            l[j] = sign * rho;
            starts.push(l);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    while starts.len() < cfg.restarts.max(2 * k) {
        let raw: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let radius = rho * rng.random::<f64>();
        let l1: f64 = raw.iter().map(|x| x.abs()).sum::<f64>().max(1e-300);
        starts.push(raw.iter().map(|x| x * radius / l1).collect());
    }
    starts.push(vec![0.0; k]);

    let one_hot_values: Vec<f64> = (0..k).map(|j| obj.value(&starts[2 * j])).collect();
    let reference_value = obj.value(&vec![0.0; k]);

    // one-hots compete first so ties keep the specialist
    let mut best = starts[0].clone();
    let mut best_val = one_hot_values[0];
    for (j, v) in one_hot_values.iter().enumerate() {
        if *v > best_val + 1e-12 {
            best_val = *v;
            best = starts[2 * j].clone();
        }
    }
    let mut ascended = false;
    for start in &starts {
        let start_val = obj.value(start);
        let end = ascend(&obj, start.clone(), rho, cfg);
        let end_val = obj.value(&end);
        let (cand, cand_val) = if end_val >= start_val { (end, end_val) } else { (start.clone(), start_val) };
        if cand_val > start_val + 1e-12 {
            ascended = true;
        }
        if cand_val > best_val + 1e-12 {
            best_val = cand_val;
            best = cand;
        }
    }
    // land exactly inside the constraint
    let l1: f64 = best.iter().map(|x| x.abs()).sum();
    if beta * l1 > beta_prime {
        let c = beta_prime / (beta * l1);
        best.iter_mut().for_each(|x| *x *= c);
        best_val = obj.value(&best);
    }
    Ok(Eq6Solution { lambda: best, value: best_val, ascended, one_hot_values, reference_value })
}

fn ascend(obj: &SoupObjective, mut lambda: Vec<f64>, rho: f64, cfg: &Eq6Config) -> Vec<f64> {
    let k = lambda.len();
    let mut f = obj.smoothed(&lambda, cfg.eps);
    let mut step = rho;
    let mut probe = lambda.clone();
    for _ in 0..cfg.max_iters {
        let grad: Vec<f64> = (0..k)
            .map(|i| {
                probe.copy_from_slice(&lambda);
                probe[i] += cfg.h;
                let up = obj.smoothed(&probe, cfg.eps);
                probe[i] -= 2.0 * cfg.h;
                let down = obj.smoothed(&probe, cfg.eps);
                (up - down) / (2.0 * cfg.h)
            })
            .collect();
        let mut moved = false;
        while step > 1e-10 * rho {
            let trial: Vec<f64> = lambda.iter().zip(&grad).map(|(l, g)| l + step * g).collect();
            let cand = project_l1_ball(&trial, rho);
            let fc = obj.smoothed(&cand, cfg.eps);
            if fc > f {
                let shift: f64 = cand.iter().zip(&lambda).map(|(a, b)| (a - b).abs()).sum();
                lambda = cand;
                f = fc;
                step = (step * 2.0).min(4.0 * rho);
                moved = shift > 1e-12 * rho;
                break;
            }
            step *= 0.5;
        }
        if !moved {
            break;
        }
    }
    lambda
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::langmdp::{MdpSpec, RefPolicySpec};
    use crate::softrl::{evaluate_policy, solve_soft};
    use crate::souping::soup_table;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_distr::{Distribution, StandardNormal};

    fn ev(d: &[f64]) -> FeedbackEvent {
        FeedbackEvent::new(d.to_vec()).unwrap()
    }

    fn synthetic_stream(truth: &[f64], n: usize, seed: u64) -> Vec<FeedbackEvent> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let d: Vec<f64> = truth.iter().map(|_| StandardNormal.sample(&mut rng)).collect();
                let logit: f64 = d.iter().zip(truth).map(|(a, b)| a * b).sum();
                if rng.random::<f64>() < sigmoid(logit) {
                    ev(&d)
                } else {
                    ev(&d.iter().map(|x| -x).collect::<Vec<_>>())
                }
            })
            .collect()
    }

    #[test]
    fn hand_update() {
        let prior = VariationalPosterior::prior(2, 1.0);
        let post = svi_update(&prior, &ev(&[1.0, 0.0]), 1).unwrap();
        assert!((post.covariance[(0, 0)] - 0.8).abs() < 1e-12);
        assert!((post.covariance[(1, 1)] - 1.0).abs() < 1e-12);
        assert!(post.covariance[(0, 1)].abs() < 1e-12);
        assert!((post.mean[0] - 0.4).abs() < 1e-12);
        assert!(post.mean[1].abs() < 1e-12);
        let same = svi_update(&prior, &ev(&[0.0, 0.0]), 1).unwrap();
        assert_eq!(same, prior);
    }

    #[test]
    fn posterior_json_roundtrip() {
        let prior = VariationalPosterior::prior(2, 1.0);
        let post = svi_update(&prior, &ev(&[1.0, 0.5]), 1).unwrap();
        let js = serde_json::to_string(&post).unwrap();
        let back: VariationalPosterior = serde_json::from_str(&js).unwrap();
        assert_eq!(back, post);
        let v: serde_json::Value = serde_json::from_str(&js).unwrap();
        assert!(v["mean"].is_array() && v["covariance"][0].is_array());
        let bad = r#"{"mean":[0.0],"covariance":[[-1.0]]}"#;
        assert!(serde_json::from_str::<VariationalPosterior>(bad).is_err());
    }

    #[test]
    fn batch_examples() {
        let lam = lambda_bt_batch(&[ev(&[1.0, 0.0])], 1.0).unwrap();
        assert!((lam[0] - 0.4011).abs() < 1e-4);
        assert!((lam[0] - (1.0 - sigmoid(lam[0]))).abs() < 1e-8);
        assert!(lam[1].abs() < 1e-12);
        let sym = [ev(&[1.0, -2.0]), ev(&[-1.0, 2.0]), ev(&[0.3, 0.1]), ev(&[-0.3, -0.1])];
        let lam = lambda_bt_batch(&sym, 0.5).unwrap();
        assert!(lam.norm() < 1e-10);
        let lam = lambda_bt_batch(&synthetic_stream(&[2.0, -1.0], 100, 1), 1e6).unwrap();
        assert!(lam.norm() < 1e-3);
        assert!(matches!(lambda_bt_batch(&[], 1.0), Err(SoupError::EmptyDataset)));
    }

    #[test]
    fn batch_newton_is_monotone() {
        let fit = lambda_bt_batch_fit(&synthetic_stream(&[1.0, 3.0, -2.0], 300, 2), 0.1).unwrap();
        assert!(fit.grad_norm < 1e-8);
        for w in fit.objective.windows(2) {
            assert!(w[1] <= w[0]);
        }
    }

    #[test]
    fn stream_tracks_batch_map() {
        let events = synthetic_stream(&[1.5], 500, 7);
        let posts = svi_stream(&VariationalPosterior::prior(1, 1.0), &events, 1).unwrap();
        let map = lambda_bt_batch(&events, 1.0).unwrap();
        let last = posts.last().unwrap();
        assert!((last.mean[0] - map[0]).abs() < 0.05, "{} vs {}", last.mean[0], map[0]);
        for w in posts.windows(2) {
            assert!(w[1].trace() <= w[0].trace() + 1e-15);
        }
    }

    #[test]
    fn multi_pass_matches_single_pass_on_first_step() {
        let prior = VariationalPosterior::prior(2, 2.0);
        let e = ev(&[0.7, -1.2]);
        let one = svi_update(&prior, &e, 1).unwrap();
        let many = svi_update(&prior, &e, 5).unwrap();
        // the extra passes move the mean toward the mode of the local objective
        let local = |m: &DVector<f64>| -log_sigmoid(m.dot(&e.vector())) + 0.25 * m.norm_squared();
        assert!(local(&many.mean) <= local(&one.mean) + 1e-12);
        assert!(many.trace() <= prior.trace());
    }

    #[test]
    fn deployed_weights_are_feasible() {
        let post = VariationalPosterior::new(DVector::from_vec(vec![3.0, -4.0]), DMatrix::identity(2, 2)).unwrap();
        let sw = deployed_weights(&post, 0.5, 1.0).unwrap();
        assert!(0.5 * sw.l1() <= 1.0 + 1e-12);
        let small = VariationalPosterior::new(DVector::from_vec(vec![0.1, 0.05]), DMatrix::identity(2, 2)).unwrap();
        let sw = deployed_weights(&small, 0.5, 1.0).unwrap();
        assert!((sw.lambda[0] - 0.4).abs() < 1e-12);
    }

    fn instance(seed: u64, k: usize) -> (LanguageMdp, Vec<RewardFn>, Specialists, f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = LanguageMdp::from_spec(&MdpSpec {
            vocab: rng.random_range(2..=3),
            horizon: rng.random_range(1..=3),
            reference: RefPolicySpec::SoftmaxLinear { scale: 0.7, seed },
            ..MdpSpec::default()
        })
        .unwrap();
        let beta = rng.random_range(0.4..1.5);
        let rewards: Vec<RewardFn> = (0..k)
            .map(|_| RewardFn::from_table(&m, (0..m.row_count()).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap())
            .collect();
        let sols: Vec<_> = rewards.iter().map(|r| solve_soft(&m, r, beta).unwrap()).collect();
        let spec = Specialists::from_solutions(&m, &sols).unwrap();
        (m, rewards, spec, beta)
    }

    #[test]
    fn objective_matches_policy_evaluation() {
        let (m, rewards, spec, beta) = instance(3, 2);
        let bp = 1.3 * beta;
        let obj = SoupObjective::new(&m, &spec, &rewards[0], beta, bp, &State::root()).unwrap();
        let sw = SoupWeights::new(vec![0.4, -0.3], beta, bp).unwrap();
        let pol = soup_table(&m, &spec, &sw).unwrap();
        let want = evaluate_policy(&m, &pol, &rewards[0], sw.kl_coeff())[0];
        assert!((obj.value(&sw.lambda) - want).abs() < 1e-12);
        let refv = evaluate_policy(&m, m.reference().table(), &rewards[0], 0.0)[0];
        assert!((obj.value(&[0.0, 0.0]) - refv).abs() < 1e-12);
    }

    #[test]
    fn specialist_user_keeps_one_hot() {
        let (m, rewards, spec, beta) = instance(5, 3);
        let sol = solve_eq6(&m, &spec, &rewards[1], beta, beta, &State::root(), &Eq6Config::default()).unwrap();
        for v in &sol.one_hot_values {
            assert!(sol.value >= v - 1e-7);
        }
        let v_star = solve_soft(&m, &rewards[1], beta).unwrap().root_value();
        assert!((sol.one_hot_values[1] - v_star).abs() < 1e-9);
        assert!((sol.value - v_star).abs() < 1e-7);
    }

    #[test]
    fn zero_reward_optimum_is_zero() {
        let (m, _, spec, beta) = instance(6, 2);
        let zero = RewardFn::zero(&m);
        let sol = solve_eq6(&m, &spec, &zero, beta, 2.0 * beta, &State::root(), &Eq6Config::default()).unwrap();
        assert!(sol.value.abs() < 1e-9, "{}", sol.value);
        assert_eq!(sol.reference_value, 0.0);
    }

    #[test]
    fn grid_oracle_two_specialists() {
        for seed in 0..3 {
            let (m, rewards, spec, beta) = instance(100 + seed, 2);
            let bp = beta * 1.5;
            let r_w = RewardFn::from_table(
                &m,
                rewards[0].values().iter().zip(rewards[1].values()).map(|(a, b)| 0.3 * a + 0.7 * b).collect(),
            )
            .unwrap();
            let sol = solve_eq6(&m, &spec, &r_w, beta, bp, &State::root(), &Eq6Config::default()).unwrap();
            let obj = SoupObjective::new(&m, &spec, &r_w, beta, bp, &State::root()).unwrap();
            let rho = bp / beta;
            let mut grid_best = f64::NEG_INFINITY;
            for i in 0..=200 {
                for j in 0..=200 {
                    let l = [rho * (i as f64 / 100.0 - 1.0), rho * (j as f64 / 100.0 - 1.0)];
                    if l[0].abs() + l[1].abs() <= rho + 1e-12 {
                        grid_best = grid_best.max(obj.value(&l));
                    }
                }
            }
            assert!(sol.value >= grid_best - 1e-4, "{} < {}", sol.value, grid_best);
            assert!(beta * sol.lambda.iter().map(|x| x.abs()).sum::<f64>() <= bp + 1e-12);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        #[test]
        fn svi_matches_direct_inverse(seed in any::<u64>(), k in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = DMatrix::from_fn(k, k, |_, _| rng.random_range(-1.0..1.0));
            let cov = &a * a.transpose() + DMatrix::identity(k, k) * 0.5;
            let mean = DVector::from_fn(k, |_, _| rng.random_range(-1.0..1.0));
            let post = VariationalPosterior::new(mean.clone(), cov.clone()).unwrap();
            let d = DVector::from_fn(k, |_, _| rng.random_range(-2.0..2.0));
            let next = svi_update(&post, &ev(d.as_slice()), 1).unwrap();
            let sig = sigmoid(mean.dot(&d));
            let prec = cov.clone().try_inverse().unwrap() + &d * d.transpose() * (sig * (1.0 - sig));
            let s_n = prec.try_inverse().unwrap();
            let m_n = &mean + &s_n * &d * (1.0 - sig);
            prop_assert!((&next.covariance - &s_n).amax() < 1e-12);
            prop_assert!((&next.mean - &m_n).amax() < 1e-12);
            prop_assert!(next.trace() <= post.trace() + 1e-15);
        }

        #[test]
        fn solver_dominates_one_hots_and_stays_feasible(seed in any::<u64>(), k in 1usize..4) {
            let (m, rewards, spec, beta) = instance(seed, k);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
            let w: Vec<f64> = (0..k).map(|_| rng.random::<f64>()).collect();
            let tot: f64 = w.iter().sum();
            let mut vals = vec![0.0; m.row_count()];
            for (wk, r) in w.iter().zip(&rewards) {
                for (v, x) in vals.iter_mut().zip(r.values()) {
                    *v += wk / tot * x;
                }
            }
            let r_w = RewardFn::from_table(&m, vals).unwrap();
            let bp = beta * rng.random_range(0.5..2.0);
            let sol = solve_eq6(&m, &spec, &r_w, beta, bp, &State::root(), &Eq6Config::default()).unwrap();
            for v in &sol.one_hot_values {
                prop_assert!(sol.value >= v - 1e-7);
            }
            prop_assert!(sol.value >= sol.reference_value - 1e-7);
            prop_assert!(beta * sol.lambda.iter().map(|x| x.abs()).sum::<f64>() <= bp + 1e-12);
        }
    }
}
