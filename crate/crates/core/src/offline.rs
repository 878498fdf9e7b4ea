//! Logit adapters for specialized policies and the offline losses that train them.
//!
//! An adapter stores q̂ = Q/β, so its policy is softmax(logit_ref + q̂).

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SoupError};
use crate::langmdp::{LanguageMdp, PolicyTable, Token};
use crate::math::{log_sigmoid, logsumexp, sigmoid};
use crate::preference::{LabeledTrajectory, PreferencePair, Trajectory};
use crate::softrl::SoftSolution;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterParams {
    /// q̂(s,a) = ψ(s,a)ᵀθ
    Theta(Vec<f64>),
    /// One q̂ per (node, token) row.
    Table(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitAdapter {
    pub attribute_id: usize,
    pub beta: f64,
    #[serde(flatten)]
    pub params: AdapterParams,
}

impl LogitAdapter {
    pub fn zeros_linear(mdp: &LanguageMdp, attribute_id: usize, beta: f64) -> Self {
        Self { attribute_id, beta, params: AdapterParams::Theta(vec![0.0; mdp.features().dim()]) }
    }

    pub fn zeros_table(mdp: &LanguageMdp, attribute_id: usize, beta: f64) -> Self {
        Self { attribute_id, beta, params: AdapterParams::Table(vec![0.0; mdp.row_count()]) }
    }

    /// Oracle adapter q̂ = Q*/β read off an exact solution.
    pub fn from_solution(attribute_id: usize, sol: &SoftSolution) -> Self {
        let q = sol.q_table().iter().map(|q| q / sol.beta).collect();
        Self { attribute_id, beta: sol.beta, params: AdapterParams::Table(q) }
    }

    pub fn param_len(&self) -> usize {
        self.params().len()
    }

    pub fn params(&self) -> &[f64] {
        match &self.params {
            AdapterParams::Theta(v) | AdapterParams::Table(v) => v,
        }
    }

    pub fn params_mut(&mut self) -> &mut Vec<f64> {
        match &mut self.params {
            AdapterParams::Theta(v) | AdapterParams::Table(v) => v,
        }
    }

    fn check(&self, mdp: &LanguageMdp) -> Result<()> {
        let want = match self.params {
            AdapterParams::Theta(_) => mdp.features().dim(),
            AdapterParams::Table(_) => mdp.row_count(),
        };
        if self.param_len() != want {
            return Err(SoupError::InvalidArgument(format!(
                "adapter has {} parameters, MDP needs {want}",
                self.param_len()
            )));
        }
        Ok(())
    }

    /// q̂ for every row.
    pub fn q_hat(&self, mdp: &LanguageMdp) -> Result<Vec<f64>> {
        self.check(mdp)?;
        Ok(match &self.params {
            AdapterParams::Theta(theta) => {
                let ft = mdp.feature_table();
                (&ft.matrix * DVector::from_column_slice(theta)).data.into()
            }
            AdapterParams::Table(t) => t.clone(),
        })
    }

    /// Induced policy softmax(logit_ref + q̂).
    pub fn policy(&self, mdp: &LanguageMdp) -> Result<PolicyTable> {
        let q = self.q_hat(mdp)?;
        Ok(policy_from_q_hat(mdp, &q))
    }

    /// Maps a row-space gradient to parameter space (Fᵀc for linear adapters).
    pub fn pull_back(&self, mdp: &LanguageMdp, row_grad: &[f64]) -> Vec<f64> {
        match &self.params {
            AdapterParams::Theta(_) => {
                let c = DVector::from_column_slice(row_grad);
                mdp.feature_table().matrix.tr_mul(&c).data.into()
            }
            AdapterParams::Table(_) => row_grad.to_vec(),
        }
    }
}

pub fn policy_from_q_hat(mdp: &LanguageMdp, q_hat: &[f64]) -> PolicyTable {
    let logits: Vec<f64> = mdp.reference().log_probs().iter().zip(q_hat).map(|(l, q)| l + q).collect();
    PolicyTable::from_logits(mdp.actions(), &logits)
}

/// Per-node log Σ_a π_ref(a|s) exp(q̂(s,a)), 0 at terminal nodes.
pub fn log_partition(mdp: &LanguageMdp, q_hat: &[f64]) -> Vec<f64> {
    let a = mdp.actions();
    let lref = mdp.reference().log_probs();
    let mut buf = vec![0.0; a];
    let mut z = vec![0.0; mdp.node_count()];
    for (node, zn) in z.iter_mut().enumerate().take(mdp.internal_count()) {
        for tok in 0..a {
            buf[tok] = lref[node * a + tok] + q_hat[node * a + tok];
        }
        *zn = logsumexp(&buf);
    }
    z
}

/// Precomputed q̂, log-partition and policy for one parameter setting.
struct Induced {
    q: Vec<f64>,
    log_z: Vec<f64>,
    policy: PolicyTable,
}

impl Induced {
    fn new(adapter: &LogitAdapter, mdp: &LanguageMdp) -> Result<Self> {
        let q = adapter.q_hat(mdp)?;
        let log_z = log_partition(mdp, &q);
        let policy = policy_from_q_hat(mdp, &q);
        Ok(Self { q, log_z, policy })
    }

    fn ret(&self, tau: &Trajectory, actions: usize, beta: f64) -> f64 {
        tau.nodes().iter().zip(tau.rows(actions)).map(|(&n, row)| beta * (self.q[row] - self.log_z[n])).sum()
    }

    /// Adds coef · ∂R/∂q̂ into the row-space accumulator.
    fn accumulate(&self, tau: &Trajectory, actions: usize, beta: f64, coef: f64, acc: &mut [f64]) {
        for (&n, (_, a_t)) in tau.nodes().iter().zip(tau.steps()) {
            let p = self.policy.row(n);
            for b in 0..actions {
                let ind = if b == *a_t { 1.0 } else { 0.0 };
                acc[n * actions + b] += coef * beta * (ind - p[b]);
            }
        }
    }
}

/// β Σ_t log(π_θ(a_t|s_t)/π_ref(a_t|s_t)).
pub fn trajectory_return(adapter: &LogitAdapter, mdp: &LanguageMdp, tau: &Trajectory, beta: f64) -> Result<f64> {
    Ok(Induced::new(adapter, mdp)?.ret(tau, mdp.actions(), beta))
}

/// Σ_t Q_θ(s_t,a_t) − Σ_t V_θ(s_{t+1}) with Q_θ = βq̂, V_θ = β log Z_θ and V_θ = 0 at depth T.
/// Differs from `trajectory_return` by V_θ(prompt).
pub fn trajectory_return_qv(adapter: &LogitAdapter, mdp: &LanguageMdp, tau: &Trajectory, beta: f64) -> Result<f64> {
    let q = adapter.q_hat(mdp)?;
    let log_z = log_partition(mdp, &q);
    let a = mdp.actions();
    let mut total = 0.0;
    for (&n, (_, tok)) in tau.nodes().iter().zip(tau.steps()) {
        let next = mdp.child(n, *tok);
        total += beta * q[n * a + tok] - beta * log_z[next];
    }
    Ok(total)
}

/// |(R(w) − R(l)) − (R_QV(w) − R_QV(l))|, the internal consistency gap of a pair.
pub fn return_identity_gap(adapter: &LogitAdapter, mdp: &LanguageMdp, pair: &PreferencePair, beta: f64) -> Result<f64> {
    let lr = trajectory_return(adapter, mdp, &pair.winner, beta)? - trajectory_return(adapter, mdp, &pair.loser, beta)?;
    let qv =
        trajectory_return_qv(adapter, mdp, &pair.winner, beta)? - trajectory_return_qv(adapter, mdp, &pair.loser, beta)?;
    Ok((lr - qv).abs())
}

/// Mean −log σ(R(w) − R(l)) and its gradient in parameter space.
pub fn bt_loss_grad(
    adapter: &LogitAdapter,
    mdp: &LanguageMdp,
    pairs: &[PreferencePair],
    beta: f64,
) -> Result<(f64, Vec<f64>)> {
    if pairs.is_empty() {
        return Err(SoupError::EmptyDataset);
    }
    let ind = Induced::new(adapter, mdp)?;
    let a = mdp.actions();
    let n = pairs.len() as f64;
    let mut acc = vec![0.0; mdp.row_count()];
    let mut loss = 0.0;
    for p in pairs {
        let d = ind.ret(&p.winner, a, beta) - ind.ret(&p.loser, a, beta);
        loss -= log_sigmoid(d);
        let coef = -sigmoid(-d) / n;
        ind.accumulate(&p.winner, a, beta, coef, &mut acc);
        ind.accumulate(&p.loser, a, beta, -coef, &mut acc);
    }
    Ok((loss / n, adapter.pull_back(mdp, &acc)))
}

/// Mean cross-entropy of σ(R(τ)) against the labels.
pub fn binary_loss_grad(
    adapter: &LogitAdapter,
    mdp: &LanguageMdp,
    data: &[LabeledTrajectory],
    beta: f64,
) -> Result<(f64, Vec<f64>)> {
    if data.is_empty() {
        return Err(SoupError::EmptyDataset);
    }
    let ind = Induced::new(adapter, mdp)?;
    let a = mdp.actions();
    let n = data.len() as f64;
    let mut acc = vec![0.0; mdp.row_count()];
    let mut loss = 0.0;
    for d in data {
        let r = ind.ret(&d.trajectory, a, beta);
        let l = if d.label { 1.0 } else { 0.0 };
        loss -= l * log_sigmoid(r) + (1.0 - l) * log_sigmoid(-r);
        ind.accumulate(&d.trajectory, a, beta, (sigmoid(r) - l) / n, &mut acc);
    }
    Ok((loss / n, adapter.pull_back(mdp, &acc)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueFeatures {
    /// ψ_state(s) = mean_a ψ(s,a)
    #[default]
    Pooled,
    /// One parameter per internal node.
    Tabular,
}

/// V_φ(s) = ψ_state(s)ᵀφ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueModel {
    pub features: ValueFeatures,
    pub phi: Vec<f64>,
}

impl ValueModel {
    pub fn zeros(mdp: &LanguageMdp, features: ValueFeatures) -> Self {
        let dim = match features {
            ValueFeatures::Pooled => mdp.features().dim(),
            ValueFeatures::Tabular => mdp.internal_count(),
        };
        Self { features, phi: vec![0.0; dim] }
    }

    /// Adds coef · ψ_state(node) into `out`.
    fn add_state_features(&self, mdp: &LanguageMdp, node: usize, coef: f64, out: &mut [f64]) {
        match self.features {
            ValueFeatures::Tabular => out[node] += coef,
            ValueFeatures::Pooled => {
                let a = mdp.actions();
                let m = &mdp.feature_table().matrix;
                for row in node * a..(node + 1) * a {
                    for (j, o) in out.iter_mut().enumerate() {
                        *o += coef * m[(row, j)] / a as f64;
                    }
                }
            }
        }
    }

    pub fn value(&self, mdp: &LanguageMdp, node: usize) -> f64 {
        match self.features {
            ValueFeatures::Tabular => self.phi[node],
            ValueFeatures::Pooled => {
                let a = mdp.actions();
                let m = &mdp.feature_table().matrix;
                (node * a..(node + 1) * a).map(|row| m.row(row).iter().zip(&self.phi).map(|(x, p)| x * p).sum::<f64>()).sum::<f64>()
                    / a as f64
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GumbelOutput {
    pub loss: f64,
    pub grad_theta: Vec<f64>,
    pub grad_phi: Vec<f64>,
}

/// Mean exp(x) − x − 1 with x = A/β = q̂(s,a) − V_φ(s)/β over (node, token) samples.
pub fn gumbel_loss_grad(
    adapter: &LogitAdapter,
    value: &ValueModel,
    mdp: &LanguageMdp,
    data: &[(usize, Token)],
    beta: f64,
) -> Result<GumbelOutput> {
    if !(beta > 0.0) {
        return Err(SoupError::InvalidArgument(format!("beta must be positive, got {beta}")));
    }
    if data.is_empty() {
        return Err(SoupError::EmptyDataset);
    }
    let q = adapter.q_hat(mdp)?;
    let a = mdp.actions();
    let n = data.len() as f64;
    let mut acc = vec![0.0; mdp.row_count()];
    let mut grad_phi = vec![0.0; value.phi.len()];
    let mut loss = 0.0;
    for &(node, tok) in data {
        let x = q[node * a + tok] - value.value(mdp, node) / beta;
        let ex = x.exp();
        loss += ex - x - 1.0;
        acc[node * a + tok] += (ex - 1.0) / n;
        value.add_state_features(mdp, node, -(ex - 1.0) / (n * beta), &mut grad_phi);
    }
    Ok(GumbelOutput { loss: loss / n, grad_theta: adapter.pull_back(mdp, &acc), grad_phi })
}

/// (node, token) samples visited by a labeled dataset.
pub fn visited_rows(data: &[LabeledTrajectory]) -> Vec<(usize, Token)> {
    data.iter()
        .flat_map(|d| d.trajectory.nodes().iter().copied().zip(d.trajectory.steps().iter().map(|(_, a)| *a)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMethod {
    #[default]
    Bt,
    BinaryGumbel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterKind {
    #[default]
    Linear,
    Tabular,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub method: TrainMethod,
    pub adapter: AdapterKind,
    pub value_features: ValueFeatures,
    pub lr: f64,
    pub steps: usize,
    pub l2: f64,
    /// Weight of the Gumbel term in the binary+gumbel objective.
    pub gumbel_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: TrainMethod::Bt,
            adapter: AdapterKind::Linear,
            value_features: ValueFeatures::Pooled,
            lr: 0.5,
            steps: 300,
            l2: 1e-3,
            gumbel_weight: 1.0,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct OfflineDataset {
    pub pairs: Vec<PreferencePair>,
    pub labeled: Vec<LabeledTrajectory>,
}

#[derive(Debug, Clone)]
pub struct TrainedSpecialist {
    pub adapter: LogitAdapter,
    pub value: Option<ValueModel>,
    /// Regularized objective before each step and after the last one.
    pub losses: Vec<f64>,
}

/// Proximal gradient descent on loss + (l2/2)‖θ‖²:
/// θ ← (θ − lr·∇loss) / (1 + lr·l2).
pub fn train_specialized(
    mdp: &LanguageMdp,
    data: &OfflineDataset,
    cfg: &TrainConfig,
    attribute_id: usize,
    beta: f64,
) -> Result<TrainedSpecialist> {
    let mut adapter = match cfg.adapter {
        AdapterKind::Linear => LogitAdapter::zeros_linear(mdp, attribute_id, beta),
        AdapterKind::Tabular => LogitAdapter::zeros_table(mdp, attribute_id, beta),
    };
    let mut value = match cfg.method {
        TrainMethod::Bt => {
            if data.pairs.is_empty() {
                return Err(SoupError::EmptyDataset);
            }
            None
        }
        TrainMethod::BinaryGumbel => {
            if data.labeled.is_empty() {
                return Err(SoupError::EmptyDataset);
            }
            Some(ValueModel::zeros(mdp, cfg.value_features))
        }
    };
    let rows = visited_rows(&data.labeled);
    let objective = |adapter: &LogitAdapter, value: &Option<ValueModel>| -> Result<(f64, Vec<f64>, Vec<f64>)> {
        let (mut loss, g, gphi) = match value {
            None => {
                let (l, g) = bt_loss_grad(adapter, mdp, &data.pairs, beta)?;
                (l, g, Vec::new())
            }
            Some(v) => {
                let (lb, gb) = binary_loss_grad(adapter, mdp, &data.labeled, beta)?;
                let gu = gumbel_loss_grad(adapter, v, mdp, &rows, beta)?;
                let w = cfg.gumbel_weight;
                let g = gb.iter().zip(&gu.grad_theta).map(|(a, b)| a + w * b).collect();
                let gphi = gu.grad_phi.iter().map(|x| w * x).collect();
                (lb + w * gu.loss, g, gphi)
            }
        };
        // the ridge term's gradient is handled by the proximal step
        let sq = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
        loss += 0.5 * cfg.l2 * (sq(adapter.params()) + value.as_ref().map_or(0.0, |v| sq(&v.phi)));
        Ok((loss, g, gphi))
    };
    let shrink = 1.0 / (1.0 + cfg.lr * cfg.l2);
    let mut losses = Vec::with_capacity(cfg.steps + 1);
    for step in 0..=cfg.steps {
        let (loss, g, gphi) = objective(&adapter, &value)?;
        if !loss.is_finite() {
            return Err(SoupError::Divergence { step });
        }
        losses.push(loss);
        if step == cfg.steps {
            break;
        }
        for (p, gi) in adapter.params_mut().iter_mut().zip(&g) {
            *p = (*p - cfg.lr * gi) * shrink;
        }
        if let Some(v) = value.as_mut() {
            for (p, gi) in v.phi.iter_mut().zip(&gphi) {
                *p = (*p - cfg.lr * gi) * shrink;
            }
        }
    }
    Ok(TrainedSpecialist { adapter, value, losses })
}
