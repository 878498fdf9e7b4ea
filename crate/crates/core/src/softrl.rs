//! Exact KL-regularized soft-RL on the enumerated tree.
//!
//! With deterministic transitions the optimum is a single backward sweep:
//!
//! ```text
//! Q(s,a) = r(s,a) + V(s·a)
//! V(s)   = β log Σ_a π_ref(a|s) exp(Q(s,a)/β)         (V = 0 at depth T)
//! π*(a|s) = π_ref(a|s) exp((Q(s,a) - V(s))/β)
//! ```

use nalgebra::DVector;

use crate::error::{Result, SoupError};
use crate::langmdp::{LanguageMdp, PolicyTable, State, Token};
use crate::math::logsumexp;

/// Per-row reward r(s, a), optionally carrying its linear form ν_r.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardFn {
    values: Vec<f64>,
    linear: Option<DVector<f64>>,
}

impl RewardFn {
    pub fn from_table(mdp: &LanguageMdp, values: Vec<f64>) -> Result<Self> {
        if values.len() != mdp.row_count() {
            return Err(SoupError::InvalidArgument(format!(
                "reward table has {} rows, expected {}",
                values.len(),
                mdp.row_count()
            )));
        }
        if let Some(row) = values.iter().position(|v| !v.is_finite()) {
            return Err(SoupError::NonFiniteReward { row });
        }
        Ok(Self { values, linear: None })
    }

    pub fn from_fn(mdp: &LanguageMdp, f: impl Fn(&State, Token) -> f64) -> Result<Self> {
        let a = mdp.actions();
        let mut values = vec![0.0; mdp.row_count()];
        for node in 0..mdp.internal_count() {
            let s = mdp.state_of(node);
            for tok in 0..a {
                values[node * a + tok] = f(&s, tok);
            }
        }
        Self::from_table(mdp, values)
    }

    /// r(s,a) = ψ(s,a)ᵀν.
    pub fn from_linear(mdp: &LanguageMdp, nu: DVector<f64>) -> Result<Self> {
        let ft = mdp.feature_table();
        if nu.len() != ft.matrix.ncols() {
            return Err(SoupError::InvalidArgument(format!(
                "reward weight has dim {}, features have dim {}",
                nu.len(),
                ft.matrix.ncols()
            )));
        }
        let values = (&ft.matrix * &nu).data.into();
        let mut r = Self::from_table(mdp, values)?;
        r.linear = Some(nu);
        Ok(r)
    }

    pub fn zero(mdp: &LanguageMdp) -> Self {
        let d = mdp.features().dim();
        Self { values: vec![0.0; mdp.row_count()], linear: Some(DVector::zeros(d)) }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn linear(&self) -> Option<&DVector<f64>> {
        self.linear.as_ref()
    }

    pub fn eval(&self, row: usize) -> f64 {
        self.values[row]
    }

    pub fn eval_state(&self, mdp: &LanguageMdp, state: &State, token: Token) -> Result<f64> {
        let node = mdp.index_of(state)?;
        if mdp.is_terminal(node) {
            return Err(SoupError::DepthExceeded { horizon: mdp.horizon() });
        }
        Ok(self.values[node * mdp.actions() + token])
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            values: self.values.iter().map(|v| v * c).collect(),
            linear: self.linear.as_ref().map(|n| n * c),
        }
    }

    /// First negative row, if any.
    pub fn first_negative(&self) -> Option<(usize, f64)> {
        self.values.iter().copied().enumerate().find(|(_, v)| *v < 0.0)
    }

    pub fn is_nonneg(&self) -> bool {
        self.first_negative().is_none()
    }
}

/// Q, V and π* satisfying the soft Bellman fixed point.
#[derive(Debug, Clone)]
pub struct SoftSolution {
    pub beta: f64,
    q: Vec<f64>,
    v: Vec<f64>,
    policy: PolicyTable,
}

/// Max absolute residuals of the three fixed-point equations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixedPointResiduals {
    pub policy: f64,
    pub bellman: f64,
    pub normalization: f64,
    pub terminal: f64,
}

impl FixedPointResiduals {
    pub fn max(&self) -> f64 {
        self.policy.max(self.bellman).max(self.normalization).max(self.terminal)
    }
}

impl SoftSolution {
    pub fn q(&self, node: usize, token: Token) -> f64 {
        self.q[node * self.policy.vocab() + token]
    }

    pub fn q_table(&self) -> &[f64] {
        &self.q
    }

    pub fn v(&self, node: usize) -> f64 {
        self.v[node]
    }

    pub fn v_table(&self) -> &[f64] {
        &self.v
    }

    pub fn root_value(&self) -> f64 {
        self.v[0]
    }

    pub fn policy(&self) -> &PolicyTable {
        &self.policy
    }

    /// Recomputes every fixed-point equation from the stored tables.
    pub fn residuals(&self, mdp: &LanguageMdp, r: &RewardFn) -> FixedPointResiduals {
        let a = mdp.actions();
        let beta = self.beta;
        let mut res = FixedPointResiduals { policy: 0.0, bellman: 0.0, normalization: 0.0, terminal: 0.0 };
        for node in 0..mdp.internal_count() {
            let refp = mdp.reference().row(node);
            let mut acc = 0.0;
            for tok in 0..a {
                let q = self.q(node, tok);
                let want = refp[tok] * ((q - self.v[node]) / beta).exp();
                res.policy = res.policy.max((self.policy.prob(node, tok) - want).abs());
                let bell = q - r.eval(node * a + tok) - self.v[mdp.child(node, tok)];
                res.bellman = res.bellman.max(bell.abs());
                acc += refp[tok] * (q / beta).exp();
            }
            res.normalization = res.normalization.max((self.v[node] - beta * acc.ln()).abs());
        }
        for node in mdp.internal_count()..mdp.node_count() {
            res.terminal = res.terminal.max(self.v[node].abs());
        }
        res
    }
}

/// Backward induction from the leaves (V = 0) to the root.
pub fn solve_soft(mdp: &LanguageMdp, r: &RewardFn, beta: f64) -> Result<SoftSolution> {
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(SoupError::InvalidArgument(format!("beta must be positive, got {beta}")));
    }
    if r.values.len() != mdp.row_count() {
        return Err(SoupError::InvalidArgument("reward table does not match MDP".into()));
    }
    if let Some(row) = r.values.iter().position(|v| !v.is_finite()) {
        return Err(SoupError::NonFiniteReward { row });
    }
    let a = mdp.actions();
    let mut q = vec![0.0; mdp.row_count()];
    let mut v = vec![0.0; mdp.node_count()];
    let mut logits = vec![0.0; mdp.row_count()];
    let mut buf = vec![0.0; a];
    for depth in (0..mdp.horizon()).rev() {
        for node in mdp.depth_range(depth) {
            let lref = mdp.reference().log_probs_row(node);
            for tok in 0..a {
                let row = node * a + tok;
                q[row] = r.values[row] + v[mdp.child(node, tok)];
                buf[tok] = lref[tok] + q[row] / beta;
            }
            v[node] = beta * logsumexp(&buf);
            for tok in 0..a {
                logits[node * a + tok] = buf[tok];
            }
        }
    }
    let policy = PolicyTable::from_logits(a, &logits);
    Ok(SoftSolution { beta, q, v, policy })
}

/// Independent oracle for V(s): β log Σ_paths Π π_ref · exp(Σ r / β),
/// enumerating every completion of `s` explicitly.
pub fn path_enum_value(mdp: &LanguageMdp, r: &RewardFn, beta: f64, s: &State) -> Result<f64> {
    mdp.index_of(s)?;
    let remaining = mdp.horizon() - s.depth();
    if remaining == 0 {
        return Ok(0.0);
    }
    let a = mdp.actions();
    let mut log_terms = Vec::with_capacity(a.pow(remaining as u32));
    let mut digits = vec![0usize; remaining];
    loop {
        let mut state = s.clone();
        let mut log_w = 0.0;
        for &tok in &digits {
            let node = mdp.index_of(&state)?;
            log_w += mdp.reference().row(node)[tok].ln();
            log_w += r.eval_state(mdp, &state, tok)? / beta;
            state = mdp.transition(&state, tok)?;
        }
        log_terms.push(log_w);
        // odometer increment over the continuation tokens
        let mut i = remaining;
        loop {
            if i == 0 {
                return Ok(beta * logsumexp(&log_terms));
            }
            i -= 1;
            digits[i] += 1;
            if digits[i] < a {
                break;
            }
            digits[i] = 0;
        }
    }
}

/// Σ_a p_a log(p_a / q_a), with 0·log 0 = 0.
pub fn kl_state(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(SoupError::InvalidArgument("KL arguments differ in length".into()));
    }
    let mut kl = 0.0;
    for (i, (&pi, &qi)) in p.iter().zip(q).enumerate() {
        if pi > 0.0 {
            if qi <= 0.0 {
                return Err(SoupError::SupportViolation { index: i });
            }
            kl += pi * (pi / qi).ln();
        }
    }
    Ok(kl.max(0.0))
}

/// Values of E_π[Σ r − c·KL(π‖π_ref)] from every node (terminal nodes are 0).
pub fn evaluate_policy(mdp: &LanguageMdp, policy: &PolicyTable, r: &RewardFn, kl_coeff: f64) -> Vec<f64> {
    let a = mdp.actions();
    let mut v = vec![0.0; mdp.node_count()];
    for depth in (0..mdp.horizon()).rev() {
        for node in mdp.depth_range(depth) {
            let p = policy.row(node);
            let mut total = 0.0;
            for tok in 0..a {
                if p[tok] > 0.0 {
                    total += p[tok] * (r.eval(node * a + tok) + v[mdp.child(node, tok)]);
                }
            }
            if kl_coeff != 0.0 {
                // π_ref > 0 everywhere, so the support check cannot fail
                let kl = kl_state(p, mdp.reference().row(node)).unwrap_or(f64::INFINITY);
                total -= kl_coeff * kl;
            }
            v[node] = total;
        }
    }
    v
}

/// Deterministic policy minimizing E[Σ_t ψ(s_t,a_t)ᵀ weight] from every node.
/// Ties go to the lowest token id.
pub fn min_linear_policy(mdp: &LanguageMdp, weight: &DVector<f64>) -> Result<(PolicyTable, Vec<f64>)> {
    let ft = mdp.feature_table();
    if weight.len() != ft.matrix.ncols() {
        return Err(SoupError::InvalidArgument("weight dimension does not match features".into()));
    }
    let cost = &ft.matrix * weight;
    let a = mdp.actions();
    let mut v = vec![0.0; mdp.node_count()];
    let mut probs = vec![0.0; mdp.row_count()];
    for depth in (0..mdp.horizon()).rev() {
        for node in mdp.depth_range(depth) {
            let mut best = 0;
            let mut best_val = f64::INFINITY;
            for tok in 0..a {
                let val = cost[node * a + tok] + v[mdp.child(node, tok)];
                if val < best_val {
                    best_val = val;
                    best = tok;
                }
            }
            v[node] = best_val;
            probs[node * a + best] = 1.0;
        }
    }
    Ok((PolicyTable::from_probs(a, probs)?, v))
}

/// Per-node E_{a~π}‖ψ(s,a)‖₂ (0 at terminal nodes).
pub fn per_action_feature_norms(mdp: &LanguageMdp, policy: &PolicyTable) -> Vec<f64> {
    let a = mdp.actions();
    let norms = &mdp.feature_table().norms;
    let mut out = vec![0.0; mdp.node_count()];
    for node in 0..mdp.internal_count() {
        out[node] = policy.row(node).iter().zip(&norms[node * a..(node + 1) * a]).map(|(p, n)| p * n).sum();
    }
    out
}

/// Per-node E_π[Σ_{t'≥t} ‖ψ(s_t',a_t')‖₂ | s_t = s].
pub fn cumulative_feature_norms(mdp: &LanguageMdp, policy: &PolicyTable) -> Vec<f64> {
    let a = mdp.actions();
    let norms = &mdp.feature_table().norms;
    let mut c = vec![0.0; mdp.node_count()];
    for depth in (0..mdp.horizon()).rev() {
        for node in mdp.depth_range(depth) {
            let p = policy.row(node);
            c[node] = (0..a).map(|tok| p[tok] * (norms[node * a + tok] + c[mdp.child(node, tok)])).sum();
        }
    }
    c
}

/// (per-action expectation at s, cumulative expectation from s).
pub fn expected_feature_norms(mdp: &LanguageMdp, policy: &PolicyTable, s: &State) -> Result<(f64, f64)> {
    let node = mdp.index_of(s)?;
    Ok((per_action_feature_norms(mdp, policy)[node], cumulative_feature_norms(mdp, policy)[node]))
}
