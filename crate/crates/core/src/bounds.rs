//! Numerical certification of linear Q-representability and of the soup's
//! KL and value bounds on small enumerable instances.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapt::{solve_eq6, Eq6Config};
use crate::error::{Result, SoupError};
use crate::langmdp::{FeatureSpec, LanguageMdp, MdpSpec, RefPolicySpec};
use crate::preference::{personalized_nu, personalized_reward, sample_simplex, AttributeSet, PreferenceVector};
use crate::softrl::{cumulative_feature_norms, kl_state, min_linear_policy, per_action_feature_norms, solve_soft, SoftSolution};
use crate::souping::{soup_table, SoupWeights, Specialists};

/// Tolerance for every certified inequality.
pub const BOUND_TOL: f64 = 1e-7;
/// Largest feature-fit residual treated as exact.
pub const EXACT_TOL: f64 = 1e-8;

/// Least-squares ν with Q*(s,a) ≈ ψ(s,a)ᵀν.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralFit {
    pub nu: Vec<f64>,
    /// max |ψᵀν − Q*| over all rows.
    pub residual: f64,
    pub rank: usize,
    pub rank_deficient: bool,
}

impl SpectralFit {
    pub fn nu_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.nu)
    }
}

/// Fits Q* of `solution` on the MDP's own feature map via SVD.
pub fn lemma1_fit(mdp: &LanguageMdp, solution: &SoftSolution) -> Result<SpectralFit> {
    let f = &mdp.feature_table().matrix;
    let q = DVector::from_column_slice(solution.q_table());
    let svd = f.clone().svd(true, true);
    let tol = 1e-12 * svd.singular_values.max().max(1.0) * f.nrows().max(f.ncols()) as f64;
    let rank = svd.rank(tol);
    let nu = svd.solve(&q, tol).map_err(|e| SoupError::InvalidArgument(e.to_string()))?;
    let residual = (f * &nu - &q).amax();
    Ok(SpectralFit { nu: nu.iter().copied().collect(), residual, rank, rank_deficient: rank < f.ncols() })
}

/// (M̄, M̲, Δ) for one specialist row against the reference row:
/// Δ = ln(M̄ + M̲ − 1) − ln(M̄·M̲) with M̄, M̲ the max and min of π_k/π_ref.
pub fn delta_k(specialist: &[f64], reference: &[f64]) -> Result<(f64, f64, f64)> {
    if specialist.len() != reference.len() {
        return Err(SoupError::InvalidArgument("policy rows differ in length".into()));
    }
    let mut hi = f64::NEG_INFINITY;
    let mut lo = f64::INFINITY;
    for (i, (p, q)) in specialist.iter().zip(reference).enumerate() {
        if !(*p > 0.0) || !(*q > 0.0) {
            return Err(SoupError::SupportViolation { index: i });
        }
        let r = p / q;
        hi = hi.max(r);
        lo = lo.min(r);
    }
    Ok((hi, lo, (hi + lo - 1.0).ln() - (hi * lo).ln()))
}

/// One random certification problem.
#[derive(Debug, Clone)]
pub struct CertInstance {
    pub id: usize,
    pub mdp: LanguageMdp,
    pub attrs: AttributeSet,
    pub w: PreferenceVector,
    pub beta: f64,
    pub beta_prime: f64,
}

impl CertInstance {
    /// A ≤ 3, T ≤ 3, K ≤ 3, tabular full-context features, nonnegative attributes.
    pub fn random<R: Rng + ?Sized>(id: usize, rng: &mut R) -> Result<Self> {
        let a = rng.random_range(2..=3);
        let t = rng.random_range(1..=3);
        let k = rng.random_range(1..=3);
        let mdp = LanguageMdp::from_spec(&MdpSpec {
            vocab: a,
            horizon: t,
            features: FeatureSpec::TabularLGram { context: t },
            reference: RefPolicySpec::SoftmaxLinear { scale: rng.random_range(0.0..1.5), seed: rng.random() },
            ..MdpSpec::default()
        })?;
        let beta = rng.random_range(0.3..1.5);
        let beta_prime = beta * rng.random_range(0.5..2.0);
        let attrs = AttributeSet::random(&mdp, k, beta, rng.random_range(0.1..1.0), rng)?;
        let w = sample_simplex(k, rng);
        Ok(Self { id, mdp, attrs, w, beta, beta_prime })
    }

    /// Same problem with the user equal to attribute `k`.
    pub fn specialist_user(&self, k: usize) -> Self {
        Self { w: PreferenceVector::one_hot(self.attrs.k(), k), ..self.clone() }
    }
}

/// Per-state certification record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub instance: usize,
    pub node: usize,
    pub depth: usize,
    pub state: String,
    pub lambda: String,
    pub lhs_kl: f64,
    pub rhs_kl: f64,
    pub kl_pass: bool,
    pub value_gap: f64,
    pub value_bound: f64,
    pub reward_term: f64,
    pub negative_weight_term: f64,
    pub logit_term: f64,
    pub value_pass: bool,
    /// λ* = 0, reward term taken at its limit.
    pub degenerate: bool,
    pub delta_min: f64,
    pub ratio_bracket_ok: bool,
    pub dominance_pass: bool,
}

impl BoundReport {
    pub fn passed(&self) -> bool {
        self.kl_pass && self.value_pass && self.ratio_bracket_ok && self.dominance_pass && self.delta_min >= -1e-12
    }

    pub fn is_finite(&self) -> bool {
        [self.lhs_kl, self.rhs_kl, self.value_gap, self.value_bound, self.reward_term, self.negative_weight_term, self.logit_term]
            .iter()
            .all(|x| x.is_finite())
    }
}

/// Shared per-instance quantities: exact solutions and their feature fits.
struct Certifier<'a> {
    inst: &'a CertInstance,
    sol_w: SoftSolution,
    nu_w: DVector<f64>,
    nu_q_w: DVector<f64>,
    nu_q_k: Vec<DVector<f64>>,
    spec: Specialists,
    r_w: crate::softrl::RewardFn,
}

impl<'a> Certifier<'a> {
    fn new(inst: &'a CertInstance) -> Result<Self> {
        let mdp = &inst.mdp;
        for r in inst.attrs.rewards() {
            if let Some((row, value)) = r.first_negative() {
                return Err(SoupError::NegativeReward { row, value });
            }
        }
        let r_w = personalized_reward(mdp, &inst.attrs, &inst.w)?;
        let nu_w = personalized_nu(&inst.attrs, &inst.w)?;
        let sol_w = solve_soft(mdp, &r_w, inst.beta)?;
        let fit = |sol: &SoftSolution| -> Result<DVector<f64>> {
            let f = lemma1_fit(mdp, sol)?;
            if f.residual >= EXACT_TOL {
                return Err(SoupError::FeatureNotExact { residual: f.residual });
            }
            Ok(f.nu_vector())
        };
        let nu_q_w = fit(&sol_w)?;
        let sols: Vec<SoftSolution> =
            inst.attrs.rewards().iter().map(|r| solve_soft(mdp, r, inst.beta)).collect::<Result<_>>()?;
        let nu_q_k = sols.iter().map(fit).collect::<Result<Vec<_>>>()?;
        let spec = Specialists::from_solutions(mdp, &sols)?;
        Ok(Self { inst, sol_w, nu_w, nu_q_w, nu_q_k, spec, r_w })
    }

    fn report(&self, node: usize, eq6: &Eq6Config) -> Result<BoundReport> {
        let inst = self.inst;
        let mdp = &inst.mdp;
        let (beta, bp) = (inst.beta, inst.beta_prime);
        let k = inst.attrs.k();
        let s = mdp.state_of(node);
        let sol = solve_eq6(mdp, &self.spec, &self.r_w, beta, bp, &s, eq6)?;
        let lambda = &sol.lambda;
        let l1: f64 = lambda.iter().map(|x| x.abs()).sum();
        let sw = SoupWeights::new(lambda.clone(), beta, bp)?;
        let soup = soup_table(mdp, &self.spec, &sw)?;
        let refp = mdp.reference().table();

        // KL part, per-state expectations over actions
        let per_opt = per_action_feature_norms(mdp, self.sol_w.policy())[node];
        let per_ref = per_action_feature_norms(mdp, refp)[node];
        let lhs_kl = kl_state(self.sol_w.policy().row(node), soup.row(node))?;
        let mut v = &self.nu_q_w * (bp / beta);
        for (lk, nk) in lambda.iter().zip(&self.nu_q_k) {
            v.axpy(-lk, nk, 1.0);
        }
        let rhs_kl = (per_opt + per_ref) * v.norm() / bp;

        // value part
        let value_gap = self.sol_w.v(node) - sol.value;
        let degenerate = l1 == 0.0;
        let reward_term = if degenerate {
            0.0
        } else {
            let mut diff = DVector::zeros(self.nu_w.len());
            for j in 0..k {
                diff.axpy(inst.w.as_slice()[j] - lambda[j].abs() / l1, inst.attrs.nu(j), 1.0);
            }
            let mut weight = DVector::zeros(self.nu_w.len());
            for j in 0..k {
                weight.axpy(lambda[j].abs(), &(&self.nu_w - inst.attrs.nu(j)), 1.0);
            }
            let (low, _) = min_linear_policy(mdp, &weight)?;
            cumulative_feature_norms(mdp, &low)[node] * diff.norm()
        };
        let mut negative_weight_term = 0.0;
        let mut delta_min = f64::INFINITY;
        let mut ratio_bracket_ok = true;
        for j in 0..k {
            let (hi, lo, d) = delta_k(self.spec.policy(j).row(node), refp.row(node))?;
            delta_min = delta_min.min(d);
            ratio_bracket_ok &= lo <= 1.0 + 1e-12 && hi >= 1.0 - 1e-12;
            negative_weight_term += d * (-lambda[j]).max(0.0);
        }
        negative_weight_term *= beta * beta / bp;
        let mut u = self.nu_q_w.clone();
        for (lk, nk) in lambda.iter().zip(&self.nu_q_k) {
            u.axpy(-beta / bp * lk, nk, 1.0);
        }
        let logit_term = per_ref * u.norm();
        let value_bound = reward_term + negative_weight_term + logit_term;
        let dominance_pass = sol.one_hot_values.iter().all(|v| sol.value >= v - BOUND_TOL);

        Ok(BoundReport {
            instance: inst.id,
            node,
            depth: s.depth(),
            state: format!("{:?}", s.tokens()),
            lambda: lambda.iter().map(|x| format!("{x:.12e}")).collect::<Vec<_>>().join(";"),
            lhs_kl,
            rhs_kl,
            kl_pass: lhs_kl <= rhs_kl + BOUND_TOL,
            value_gap,
            value_bound,
            reward_term,
            negative_weight_term,
            logit_term,
            value_pass: value_gap >= -BOUND_TOL && value_gap <= value_bound + BOUND_TOL,
            degenerate,
            delta_min,
            ratio_bracket_ok,
            dominance_pass,
        })
    }
}

/// KL lhs and rhs at every internal state, λ*(s) from the exact solver.
pub fn theorem1_kl_check(inst: &CertInstance, eq6: &Eq6Config) -> Result<Vec<(f64, f64)>> {
    Ok(certify(inst, eq6)?.into_iter().map(|r| (r.lhs_kl, r.rhs_kl)).collect())
}

/// Value gap and bound decomposition at one state.
pub fn theorem1_value_check(inst: &CertInstance, node: usize, eq6: &Eq6Config) -> Result<BoundReport> {
    if node >= inst.mdp.internal_count() {
        return Err(SoupError::DepthExceeded { horizon: inst.mdp.horizon() });
    }
    Certifier::new(inst)?.report(node, eq6)
}

/// Full report for every internal state of an instance.
pub fn certify(inst: &CertInstance, eq6: &Eq6Config) -> Result<Vec<BoundReport>> {
    let cert = Certifier::new(inst)?;
    (0..inst.mdp.internal_count()).map(|node| cert.report(node, eq6)).collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CertSummary {
    pub instances: usize,
    pub instances_passed: usize,
    pub states: usize,
    pub states_passed: usize,
    pub degenerate_states: usize,
    pub max_kl_slack_violation: f64,
    pub max_value_slack_violation: f64,
}

impl CertSummary {
    pub fn from_reports(per_instance: &[Vec<BoundReport>]) -> Self {
        let mut s = CertSummary { instances: per_instance.len(), ..Default::default() };
        s.max_kl_slack_violation = f64::NEG_INFINITY;
        s.max_value_slack_violation = f64::NEG_INFINITY;
        for reps in per_instance {
            if reps.iter().all(|r| r.passed()) {
                s.instances_passed += 1;
            }
            for r in reps {
                s.states += 1;
                s.states_passed += r.passed() as usize;
                s.degenerate_states += r.degenerate as usize;
                s.max_kl_slack_violation = s.max_kl_slack_violation.max(r.lhs_kl - r.rhs_kl);
                s.max_value_slack_violation =
                    s.max_value_slack_violation.max((r.value_gap - r.value_bound).max(-r.value_gap));
            }
        }
        s
    }
}

/// Certifies `n` random instances; instance i draws from stream i of `seed`.
pub fn certify_random(n: usize, seed: u64, eq6: &Eq6Config) -> Result<Vec<Vec<BoundReport>>> {
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let inst = CertInstance::random(i, &mut rng)?;
            certify(&inst, eq6)
        })
        .collect()
}

/// Writes one CSV row per report, header always present.
pub fn write_bounds_csv<W: std::io::Write>(out: W, reports: &[BoundReport]) -> Result<()> {
    let mut wtr = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    wtr.write_record(BOUNDS_HEADER)?;
    for r in reports {
        wtr.serialize(r)?;
    }
    wtr.flush()?;
    Ok(())
}

pub const BOUNDS_HEADER: [&str; 18] = [
    "instance",
    "node",
    "depth",
    "state",
    "lambda",
    "lhs_kl",
    "rhs_kl",
    "kl_pass",
    "value_gap",
    "value_bound",
    "reward_term",
    "negative_weight_term",
    "logit_term",
    "value_pass",
    "degenerate",
    "delta_min",
    "ratio_bracket_ok",
    "dominance_pass",
];

/// Raw feature matrix helper for callers fitting on their own targets.
pub fn least_squares(f: &DMatrix<f64>, y: &DVector<f64>) -> Result<(DVector<f64>, usize)> {
    let svd = f.clone().svd(true, true);
    let tol = 1e-12 * svd.singular_values.max().max(1.0) * f.nrows().max(f.ncols()) as f64;
    let rank = svd.rank(tol);
    let x = svd.solve(y, tol).map_err(|e| SoupError::InvalidArgument(e.to_string()))?;
    Ok((x, rank))
}
