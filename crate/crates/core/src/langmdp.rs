//! Deterministic finite-horizon token-generation MDP.
//!
//! States are token prefixes, transitions append one token, and episodes end
//! at depth `T`. Every reachable prefix is enumerated once, ordered by depth
//! and then lexicographically, so a state is identified by a dense node index:
//!
//! ```text
//! node(tokens) = offset[depth] + Σ_i tokens[i] · A^(depth-1-i)
//! ```
//!
//! Per-(state, token) tables (rewards, Q-values, policies) are flattened as
//! `row = node * A + token` over the internal nodes (depth < T).

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SoupError};
use crate::math::{logsumexp, softmax};

pub type Token = usize;

/// Default cap on the number of enumerated states.
pub const DEFAULT_NODE_BUDGET: usize = 200_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    size: usize,
}

impl Vocab {
    pub fn new(size: usize) -> Result<Self> {
        if size < 2 {
            return Err(SoupError::InvalidArgument(format!(
                "vocabulary needs at least 2 tokens, got {size}"
            )));
        }
        Ok(Self { size })
    }

    pub fn size(&self) -> usize {
        self.size
    }
}

/// A token prefix. Depth is the prefix length.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct State {
    tokens: Vec<Token>,
}

impl State {
    pub fn root() -> Self {
        Self { tokens: Vec::new() }
    }

    pub fn from_tokens(tokens: Vec<Token>) -> Self {
        Self { tokens }
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn depth(&self) -> usize {
        self.tokens.len()
    }

    /// The last `len` tokens (fewer if the prefix is shorter).
    pub fn suffix(&self, len: usize) -> &[Token] {
        let start = self.tokens.len().saturating_sub(len);
        &self.tokens[start..]
    }
}

/// `s_{t+1} = concat(s_t, a_t)`.
pub fn concat_transition(state: &State, token: Token, vocab: Vocab, horizon: usize) -> Result<State> {
    if state.depth() >= horizon {
        return Err(SoupError::DepthExceeded { horizon });
    }
    if token >= vocab.size() {
        return Err(SoupError::TokenOutOfRange { token, vocab: vocab.size() });
    }
    let mut tokens = state.tokens.clone();
    tokens.push(token);
    Ok(State { tokens })
}

fn pow(base: usize, exp: usize) -> usize {
    (0..exp).fold(1usize, |acc, _| acc * base)
}

/// Base-A value of a token slice, most significant first.
fn encode(tokens: &[Token], vocab: usize) -> usize {
    tokens.iter().fold(0, |acc, &t| acc * vocab + t)
}

/// Serializable description of a feature map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureSpec {
    /// One-hot over (depth, last-L tokens, action).
    TabularLGram { context: usize },
    /// The tabular one-hot projected through a seeded Gaussian matrix.
    RandomLinear { dim: usize, seed: u64, context: usize },
    /// Concatenation of the parts.
    Composite { parts: Vec<FeatureSpec> },
}

impl Default for FeatureSpec {
    fn default() -> Self {
        FeatureSpec::TabularLGram { context: usize::MAX }
    }
}

/// One-hot indexer over (depth t, last min(L, t) tokens, action).
#[derive(Debug, Clone)]
pub struct TabularLGram {
    context: usize,
    vocab: usize,
    /// `blocks[t]` is the first coordinate for depth t; `blocks[T]` is the dimension.
    blocks: Vec<usize>,
}

impl TabularLGram {
    fn new(context: usize, vocab: usize, horizon: usize) -> Self {
        let context = context.min(horizon);
        let mut blocks = Vec::with_capacity(horizon + 1);
        let mut acc = 0;
        for t in 0..horizon {
            blocks.push(acc);
            acc += pow(vocab, context.min(t)) * vocab;
        }
        blocks.push(acc);
        Self { context, vocab, blocks }
    }

    pub fn context(&self) -> usize {
        self.context
    }

    pub fn dim(&self) -> usize {
        *self.blocks.last().unwrap()
    }

    pub fn index(&self, state: &State, token: Token) -> usize {
        let t = state.depth();
        let suffix = state.suffix(self.context.min(t));
        self.blocks[t] + encode(suffix, self.vocab) * self.vocab + token
    }
}

#[derive(Debug, Clone)]
pub struct RandomLinear {
    base: TabularLGram,
    seed: u64,
    /// `dim × base.dim()`, entries N(0, 1/dim).
    projection: DMatrix<f64>,
}

impl RandomLinear {
    fn new(dim: usize, seed: u64, base: TabularLGram) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (dim as f64).sqrt();
        let raw = base.dim();
        let projection = DMatrix::from_fn(dim, raw, |_, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * scale
        });
        Self { base, seed, projection }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

/// Feature map ψ(s, a). Every variant depends only on (depth, last-L tokens, a).
#[derive(Debug, Clone)]
pub enum FeatureMap {
    TabularLGram(TabularLGram),
    RandomLinear(RandomLinear),
    Composite(Vec<FeatureMap>),
}

impl FeatureMap {
    pub fn build(spec: &FeatureSpec, vocab: Vocab, horizon: usize) -> Result<Self> {
        Ok(match spec {
            FeatureSpec::TabularLGram { context } => {
                FeatureMap::TabularLGram(TabularLGram::new(*context, vocab.size(), horizon))
            }
            FeatureSpec::RandomLinear { dim, seed, context } => {
                if *dim == 0 {
                    return Err(SoupError::InvalidArgument("random-linear dim must be positive".into()));
                }
                let base = TabularLGram::new(*context, vocab.size(), horizon);
                FeatureMap::RandomLinear(RandomLinear::new(*dim, *seed, base))
            }
            FeatureSpec::Composite { parts } => {
                if parts.is_empty() {
                    return Err(SoupError::InvalidArgument("composite feature map has no parts".into()));
                }
                FeatureMap::Composite(
                    parts
                        .iter()
                        .map(|p| FeatureMap::build(p, vocab, horizon))
                        .collect::<Result<_>>()?,
                )
            }
        })
    }

    pub fn dim(&self) -> usize {
        match self {
            FeatureMap::TabularLGram(t) => t.dim(),
            FeatureMap::RandomLinear(r) => r.projection.nrows(),
            FeatureMap::Composite(parts) => parts.iter().map(FeatureMap::dim).sum(),
        }
    }

    /// Longest token history any part looks at.
    pub fn context(&self) -> usize {
        match self {
            FeatureMap::TabularLGram(t) => t.context,
            FeatureMap::RandomLinear(r) => r.base.context,
            FeatureMap::Composite(parts) => parts.iter().map(FeatureMap::context).max().unwrap_or(0),
        }
    }

    /// True when ψ is a one-hot indicator (so ‖ψ‖₂ = 1 everywhere).
    pub fn is_tabular(&self) -> bool {
        matches!(self, FeatureMap::TabularLGram(_))
    }

    /// ψ(s, a). Panics if `token` is outside the vocabulary.
    pub fn psi(&self, state: &State, token: Token) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim());
        self.write_psi(state, token, out.as_mut_slice());
        out
    }

    fn write_psi(&self, state: &State, token: Token, out: &mut [f64]) {
        match self {
            FeatureMap::TabularLGram(t) => {
                assert!(token < t.vocab, "token {token} out of range");
                out.iter_mut().for_each(|x| *x = 0.0);
                out[t.index(state, token)] = 1.0;
            }
            FeatureMap::RandomLinear(r) => {
                assert!(token < r.base.vocab, "token {token} out of range");
                let col = r.projection.column(r.base.index(state, token));
                out.copy_from_slice(col.as_slice());
            }
            FeatureMap::Composite(parts) => {
                let mut start = 0;
                for p in parts {
                    let d = p.dim();
                    p.write_psi(state, token, &mut out[start..start + d]);
                    start += d;
                }
            }
        }
    }
}

/// How the reference policy's logits are produced.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum RefPolicySpec {
    #[default]
    Uniform,
    /// logit(s, a) = ψ_tab(s, a)ᵀ ν_ref with ν_ref ~ N(0, scale²) i.i.d.
    SoftmaxLinear { scale: f64, seed: u64 },
}

/// Row-stochastic table over internal nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyTable {
    vocab: usize,
    probs: Vec<f64>,
}

impl PolicyTable {
    /// Wraps a flattened `internal × A` probability table. Rows must sum to one.
    pub fn from_probs(vocab: usize, probs: Vec<f64>) -> Result<Self> {
        if vocab == 0 || !probs.len().is_multiple_of(vocab) {
            return Err(SoupError::InvalidArgument("probability table shape mismatch".into()));
        }
        for (i, row) in probs.chunks(vocab).enumerate() {
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 || row.iter().any(|p| !(*p >= 0.0)) {
                return Err(SoupError::InvalidArgument(format!("row {i} is not a distribution (sum {s})")));
            }
        }
        Ok(Self { vocab, probs })
    }

    /// Row-wise softmax of a flattened logit table.
    pub fn from_logits(vocab: usize, logits: &[f64]) -> Self {
        let probs = logits.chunks(vocab).flat_map(softmax).collect();
        Self { vocab, probs }
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn rows(&self) -> usize {
        self.probs.len() / self.vocab
    }

    pub fn row(&self, node: usize) -> &[f64] {
        &self.probs[node * self.vocab..(node + 1) * self.vocab]
    }

    pub fn prob(&self, node: usize, token: Token) -> f64 {
        self.probs[node * self.vocab + token]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.probs
    }
}

/// The frozen base policy π_ref, strictly positive everywhere.
#[derive(Debug, Clone)]
pub struct ReferencePolicy {
    spec: RefPolicySpec,
    logits: Vec<f64>,
    log_probs: Vec<f64>,
    table: PolicyTable,
}

impl ReferencePolicy {
    pub fn spec(&self) -> &RefPolicySpec {
        &self.spec
    }

    pub fn table(&self) -> &PolicyTable {
        &self.table
    }

    pub fn row(&self, node: usize) -> &[f64] {
        self.table.row(node)
    }

    pub fn logits_row(&self, node: usize) -> &[f64] {
        let a = self.table.vocab;
        &self.logits[node * a..(node + 1) * a]
    }

    pub fn log_probs_row(&self, node: usize) -> &[f64] {
        let a = self.table.vocab;
        &self.log_probs[node * a..(node + 1) * a]
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn log_probs(&self) -> &[f64] {
        &self.log_probs
    }
}

/// Dense ψ rows for every internal (node, token), plus their Euclidean norms.
#[derive(Debug, Clone)]
pub struct FeatureTable {
    pub matrix: DMatrix<f64>,
    pub norms: Vec<f64>,
}

/// Serializable MDP description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MdpSpec {
    pub vocab: usize,
    pub horizon: usize,
    #[serde(default)]
    pub features: FeatureSpec,
    #[serde(default)]
    pub reference: RefPolicySpec,
    #[serde(default = "default_budget")]
    pub node_budget: usize,
}

fn default_budget() -> usize {
    DEFAULT_NODE_BUDGET
}

impl Default for MdpSpec {
    fn default() -> Self {
        Self {
            vocab: 3,
            horizon: 3,
            features: FeatureSpec::default(),
            reference: RefPolicySpec::Uniform,
            node_budget: DEFAULT_NODE_BUDGET,
        }
    }
}

/// Language MDP: vocabulary, horizon, feature map and reference policy.
#[derive(Debug)]
pub struct LanguageMdp {
    vocab: Vocab,
    horizon: usize,
    features: FeatureMap,
    reference: ReferencePolicy,
    offsets: Vec<usize>,
    feature_table: OnceLock<FeatureTable>,
}

impl Clone for LanguageMdp {
    fn clone(&self) -> Self {
        Self {
            vocab: self.vocab,
            horizon: self.horizon,
            features: self.features.clone(),
            reference: self.reference.clone(),
            offsets: self.offsets.clone(),
            feature_table: OnceLock::new(),
        }
    }
}

impl LanguageMdp {
    pub fn from_spec(spec: &MdpSpec) -> Result<Self> {
        let vocab = Vocab::new(spec.vocab)?;
        let features = FeatureMap::build(&spec.features, vocab, spec.horizon)?;
        Self::new(vocab, spec.horizon, features, spec.reference.clone(), spec.node_budget)
    }

    pub fn new(
        vocab: Vocab,
        horizon: usize,
        features: FeatureMap,
        reference: RefPolicySpec,
        node_budget: usize,
    ) -> Result<Self> {
        if horizon == 0 {
            return Err(SoupError::InvalidArgument("horizon must be positive".into()));
        }
        let a = vocab.size() as u128;
        let mut total: u128 = 0;
        let mut level: u128 = 1;
        for _ in 0..=horizon {
            total += level;
            if total > node_budget as u128 {
                break;
            }
            level *= a;
        }
        if total > node_budget as u128 {
            // finish the count for the error message without overflowing
            let nodes = (0..=horizon as u32).map(|t| a.saturating_pow(t)).fold(0u128, u128::saturating_add);
            return Err(SoupError::BudgetExceeded { nodes, budget: node_budget });
        }
        let mut offsets = Vec::with_capacity(horizon + 2);
        let mut acc = 0;
        for t in 0..=horizon {
            offsets.push(acc);
            acc += pow(vocab.size(), t);
        }
        offsets.push(acc);

        let mut mdp = Self {
            vocab,
            horizon,
            features,
            reference: ReferencePolicy {
                spec: RefPolicySpec::Uniform,
                logits: Vec::new(),
                log_probs: Vec::new(),
                table: PolicyTable { vocab: vocab.size(), probs: Vec::new() },
            },
            offsets,
            feature_table: OnceLock::new(),
        };
        mdp.reference = mdp.build_reference(reference)?;
        Ok(mdp)
    }

    fn build_reference(&self, spec: RefPolicySpec) -> Result<ReferencePolicy> {
        let a = self.vocab.size();
        let rows = self.internal_count() * a;
        let logits = match &spec {
            RefPolicySpec::Uniform => vec![0.0; rows],
            RefPolicySpec::SoftmaxLinear { scale, seed } => {
                if !scale.is_finite() {
                    return Err(SoupError::InvalidArgument("reference scale must be finite".into()));
                }
                let idx = TabularLGram::new(self.features.context(), a, self.horizon);
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let nu: Vec<f64> = (0..idx.dim())
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        z * scale
                    })
                    .collect();
                let mut logits = vec![0.0; rows];
                for node in 0..self.internal_count() {
                    let s = self.state_of(node);
                    for tok in 0..a {
                        logits[node * a + tok] = nu[idx.index(&s, tok)];
                    }
                }
                logits
            }
        };
        let mut log_probs = vec![0.0; rows];
        for (lp, lg) in log_probs.chunks_mut(a).zip(logits.chunks(a)) {
            let lse = logsumexp(lg);
            for (o, l) in lp.iter_mut().zip(lg) {
                *o = l - lse;
            }
        }
        let table = PolicyTable::from_logits(a, &logits);
        Ok(ReferencePolicy { spec, logits, log_probs, table })
    }

    pub fn vocab(&self) -> Vocab {
        self.vocab
    }

    pub fn actions(&self) -> usize {
        self.vocab.size()
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn features(&self) -> &FeatureMap {
        &self.features
    }

    pub fn reference(&self) -> &ReferencePolicy {
        &self.reference
    }

    /// Σ_{t=0}^{T} A^t.
    pub fn node_count(&self) -> usize {
        self.offsets[self.horizon + 1]
    }

    /// Nodes with depth < T.
    pub fn internal_count(&self) -> usize {
        self.offsets[self.horizon]
    }

    /// Number of flattened (internal node, token) rows.
    pub fn row_count(&self) -> usize {
        self.internal_count() * self.actions()
    }

    pub fn depth_range(&self, depth: usize) -> std::ops::Range<usize> {
        self.offsets[depth]..self.offsets[depth + 1]
    }

    pub fn depth_of(&self, node: usize) -> usize {
        self.offsets.partition_point(|&o| o <= node) - 1
    }

    pub fn is_terminal(&self, node: usize) -> bool {
        node >= self.internal_count()
    }

    pub fn child(&self, node: usize, token: Token) -> usize {
        let t = self.depth_of(node);
        debug_assert!(t < self.horizon && token < self.actions());
        self.offsets[t + 1] + (node - self.offsets[t]) * self.actions() + token
    }

    pub fn index_of(&self, state: &State) -> Result<usize> {
        let t = state.depth();
        if t > self.horizon {
            return Err(SoupError::DepthExceeded { horizon: self.horizon });
        }
        if let Some(&bad) = state.tokens().iter().find(|&&x| x >= self.actions()) {
            return Err(SoupError::TokenOutOfRange { token: bad, vocab: self.actions() });
        }
        Ok(self.offsets[t] + encode(state.tokens(), self.actions()))
    }

    pub fn state_of(&self, node: usize) -> State {
        let t = self.depth_of(node);
        let mut rem = node - self.offsets[t];
        let mut tokens = vec![0; t];
        for slot in tokens.iter_mut().rev() {
            *slot = rem % self.actions();
            rem /= self.actions();
        }
        State { tokens }
    }

    pub fn transition(&self, state: &State, token: Token) -> Result<State> {
        concat_transition(state, token, self.vocab, self.horizon)
    }

    /// Every reachable state with its available tokens, depth-major then lexicographic.
    pub fn enumerate_nodes(&self) -> Vec<(State, Vec<Token>)> {
        (0..self.node_count())
            .map(|n| {
                let avail = if self.is_terminal(n) { Vec::new() } else { (0..self.actions()).collect() };
                (self.state_of(n), avail)
            })
            .collect()
    }

    pub fn psi(&self, state: &State, token: Token) -> DVector<f64> {
        self.features.psi(state, token)
    }

    /// Dense ψ table for all internal rows; computed once on first use.
    pub fn feature_table(&self) -> &FeatureTable {
        self.feature_table.get_or_init(|| {
            let a = self.actions();
            let d = self.features.dim();
            let mut matrix = DMatrix::zeros(self.row_count(), d);
            let mut buf = vec![0.0; d];
            for node in 0..self.internal_count() {
                let s = self.state_of(node);
                for tok in 0..a {
                    self.features.write_psi(&s, tok, &mut buf);
                    matrix.row_mut(node * a + tok).copy_from_slice(&buf);
                }
            }
            let norms = (0..matrix.nrows()).map(|r| matrix.row(r).norm()).collect();
            FeatureTable { matrix, norms }
        })
    }
}

/// Free-function form of [`LanguageMdp::enumerate_nodes`].
pub fn enumerate_nodes(mdp: &LanguageMdp) -> Vec<(State, Vec<Token>)> {
    mdp.enumerate_nodes()
}

/// Free-function form of [`FeatureMap::psi`].
pub fn psi(fm: &FeatureMap, state: &State, token: Token) -> DVector<f64> {
    fm.psi(state, token)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mdp(a: usize, t: usize, features: FeatureSpec, reference: RefPolicySpec) -> LanguageMdp {
        LanguageMdp::from_spec(&MdpSpec { vocab: a, horizon: t, features, reference, node_budget: DEFAULT_NODE_BUDGET })
            .unwrap()
    }

    #[test]
    fn concat_examples() {
        let v = Vocab::new(2).unwrap();
        let s = concat_transition(&State::root(), 1, v, 3).unwrap();
        assert_eq!(s.tokens(), &[1]);
        assert_eq!(s.depth(), 1);
        let s = concat_transition(&State::from_tokens(vec![1, 0]), 1, v, 3).unwrap();
        assert_eq!(s.tokens(), &[1, 0, 1]);
        assert_eq!(s.depth(), 3);
        assert!(matches!(
            concat_transition(&State::from_tokens(vec![0, 0]), 0, v, 2),
            Err(SoupError::DepthExceeded { .. })
        ));
        assert!(matches!(concat_transition(&State::root(), 2, v, 2), Err(SoupError::TokenOutOfRange { .. })));
    }

    #[test]
    fn enumeration_counts() {
        let m = mdp(2, 1, FeatureSpec::default(), RefPolicySpec::Uniform);
        let nodes = m.enumerate_nodes();
        let states: Vec<_> = nodes.iter().map(|(s, _)| s.tokens().to_vec()).collect();
        assert_eq!(states, vec![vec![], vec![0], vec![1]]);
        assert_eq!(mdp(2, 2, FeatureSpec::default(), RefPolicySpec::Uniform).node_count(), 7);
        assert_eq!(mdp(3, 3, FeatureSpec::default(), RefPolicySpec::Uniform).enumerate_nodes().len(), 40);
    }

    #[test]
    fn budget_is_enforced() {
        let spec = MdpSpec { vocab: 10, horizon: 6, ..MdpSpec::default() };
        assert!(matches!(LanguageMdp::from_spec(&spec), Err(SoupError::BudgetExceeded { .. })));
    }

    #[test]
    fn tabular_truncates_history() {
        let m = mdp(2, 3, FeatureSpec::TabularLGram { context: 1 }, RefPolicySpec::Uniform);
        let a = m.psi(&State::from_tokens(vec![0, 1]), 0);
        let b = m.psi(&State::from_tokens(vec![1, 1]), 0);
        assert_eq!(a, b);
        assert_eq!(a.iter().filter(|&&x| x == 1.0).count(), 1);
        assert_eq!(a.iter().filter(|&&x| x == 0.0).count(), a.len() - 1);
    }

    #[test]
    fn random_linear_is_deterministic() {
        let spec = FeatureSpec::RandomLinear { dim: 8, seed: 7, context: 2 };
        let m1 = mdp(3, 3, spec.clone(), RefPolicySpec::Uniform);
        let m2 = mdp(3, 3, spec, RefPolicySpec::Uniform);
        let s = State::from_tokens(vec![2, 0]);
        let x = m1.psi(&s, 1);
        assert_eq!(x.len(), 8);
        assert_eq!(x.as_slice(), m1.psi(&s, 1).as_slice());
        assert_eq!(x.as_slice(), m2.psi(&s, 1).as_slice());
    }

    #[test]
    fn composite_concatenates() {
        let spec = FeatureSpec::Composite {
            parts: vec![FeatureSpec::TabularLGram { context: 1 }, FeatureSpec::RandomLinear { dim: 4, seed: 1, context: 1 }],
        };
        let m = mdp(2, 2, spec, RefPolicySpec::Uniform);
        let tab = mdp(2, 2, FeatureSpec::TabularLGram { context: 1 }, RefPolicySpec::Uniform);
        assert_eq!(m.features().dim(), tab.features().dim() + 4);
        let s = State::from_tokens(vec![1]);
        assert_eq!(m.psi(&s, 0).rows(0, tab.features().dim()), tab.psi(&s, 0));
    }

    #[test]
    fn index_roundtrip_and_children() {
        let m = mdp(3, 3, FeatureSpec::default(), RefPolicySpec::Uniform);
        for n in 0..m.node_count() {
            assert_eq!(m.index_of(&m.state_of(n)).unwrap(), n);
        }
        for n in 0..m.internal_count() {
            for a in 0..3 {
                let s = m.transition(&m.state_of(n), a).unwrap();
                assert_eq!(m.child(n, a), m.index_of(&s).unwrap());
            }
        }
    }

    proptest! {
        #[test]
        fn reference_rows_normalized(a in 2usize..5, t in 1usize..4, scale in 0.0f64..3.0, seed in 0u64..1000) {
            let m = mdp(a, t, FeatureSpec::TabularLGram { context: 2 }, RefPolicySpec::SoftmaxLinear { scale, seed });
            for n in 0..m.internal_count() {
                let row = m.reference().row(n);
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                prop_assert!(row.iter().all(|&p| p > 0.0));
            }
        }

        #[test]
        fn old_tokens_do_not_matter(l in 1usize..3, prefix in proptest::collection::vec(0usize..3, 3), tok in 0usize..3) {
            let m = mdp(3, 4, FeatureSpec::TabularLGram { context: l }, RefPolicySpec::Uniform);
            let mut permuted = prefix.clone();
            let keep = prefix.len() - l;
            permuted[..keep].reverse();
            permuted[..keep].rotate_left(1);
            let a = m.psi(&State::from_tokens(prefix), tok);
            let b = m.psi(&State::from_tokens(permuted), tok);
            prop_assert_eq!(a, b);
        }

        #[test]
        fn enumeration_is_a_bijection(a in 2usize..4, t in 1usize..5) {
            let m = mdp(a, t, FeatureSpec::default(), RefPolicySpec::Uniform);
            let nodes = m.enumerate_nodes();
            let expected: usize = (0..=t).map(|k| a.pow(k as u32)).sum();
            prop_assert_eq!(nodes.len(), expected);
            let mut seen: Vec<_> = nodes.iter().map(|(s, _)| s.clone()).collect();
            let sorted = seen.windows(2).all(|w| (w[0].depth(), w[0].tokens()) < (w[1].depth(), w[1].tokens()));
            prop_assert!(sorted);
            seen.dedup();
            prop_assert_eq!(seen.len(), expected);
        }
    }
}
