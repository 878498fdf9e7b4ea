//! Scenario orchestration: offline specialists, online weight adaptation per
//! held-out user, exact evaluation of every method, and result emission.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapt::{deployed_weights, solve_eq6, svi_stream, Eq6Config, FeedbackEvent, VariationalPosterior};
use crate::bounds::{certify, write_bounds_csv, BoundReport, CertInstance, CertSummary};
use crate::error::{Result, SoupError};
use crate::langmdp::{FeatureSpec, LanguageMdp, MdpSpec, PolicyTable, RefPolicySpec, State};
use crate::offline::{train_specialized, LogitAdapter, OfflineDataset, TrainConfig, TrainMethod};
use crate::preference::{
    generate_labeled, generate_pairs_from, make_training_weights, personalized_reward, sample_simplex, AttributeSet,
    PairMode, PreferenceVector,
};
use crate::softrl::{evaluate_policy, solve_soft, RewardFn};
use crate::souping::{psoups_average, soup_table, ImplicitSampler, SamplerConfig, SamplerStats, SoupWeights, Specialists};

/// Stream offsets so that offline, user and ablation draws never overlap.
const OFFLINE_STREAM: u64 = 1 << 32;
const ABLATION_STREAM: u64 = 2 << 32;
const SAMPLER_STREAM: u64 = 3 << 32;
const USER_STREAM: u64 = 4 << 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpecialistSource {
    /// Adapters fitted on preference data.
    #[default]
    Trained,
    /// Exact soft-RL solutions of each training reward.
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttributeConfig {
    pub n_base: usize,
    /// Size of the uniform perturbation added to each one-hot attribute.
    pub noise: f64,
}

impl Default for AttributeConfig {
    fn default() -> Self {
        Self { n_base: 4, noise: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    /// Number of specialists K (one per training weight vector).
    pub n_specialists: usize,
    pub spread: f64,
    pub pairs_per_specialist: usize,
    pub labeled_per_specialist: usize,
    pub pair_mode: PairMode,
    pub source: SpecialistSource,
    pub optimizer: TrainConfig,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            n_specialists: 4,
            spread: 0.2,
            pairs_per_specialist: 1000,
            labeled_per_specialist: 1000,
            pair_mode: PairMode::BtSample,
            source: SpecialistSource::Trained,
            optimizer: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OnlineConfig {
    pub n_users: usize,
    /// Fixed user weights over the base attributes; empty means fresh draws.
    pub users: Vec<Vec<f64>>,
    pub events_per_user: usize,
    pub batch_size: usize,
    pub prior_variance: f64,
    pub inner_iters: usize,
    pub feedback_mode: PairMode,
    /// Draws per node for the implicit sampler's empirical policy.
    pub implicit_samples: usize,
    pub sampler: SamplerConfig,
}

impl Default for OnlineConfig {
    fn default() -> Self {
        Self {
            n_users: 5,
            users: Vec::new(),
            events_per_user: 500,
            batch_size: 50,
            prior_variance: 1.0,
            inner_iters: 1,
            feedback_mode: PairMode::BtSample,
            implicit_samples: 4000,
            sampler: SamplerConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    pub enabled: bool,
    /// Random removal orders per user.
    pub orders: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self { enabled: true, orders: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub scenario_id: String,
    pub seed: u64,
    pub mdp: MdpSpec,
    pub attributes: AttributeConfig,
    pub training: TrainingConfig,
    pub online: OnlineConfig,
    pub beta: f64,
    pub beta_prime: f64,
    pub eq6: Eq6Config,
    pub certify: bool,
    pub ablation: AblationConfig,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            scenario_id: "toy".into(),
            seed: 0,
            mdp: MdpSpec {
                vocab: 3,
                horizon: 3,
                features: FeatureSpec::TabularLGram { context: 3 },
                reference: RefPolicySpec::SoftmaxLinear { scale: 1.0, seed: 11 },
                ..MdpSpec::default()
            },
            attributes: AttributeConfig::default(),
            training: TrainingConfig::default(),
            online: OnlineConfig::default(),
            beta: 1.0,
            beta_prime: 1.0,
            eq6: Eq6Config::default(),
            certify: true,
            ablation: AblationConfig::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SoupError::InvalidArgument(m.into()));
        if !(self.beta > 0.0 && self.beta.is_finite()) || !(self.beta_prime > 0.0 && self.beta_prime.is_finite()) {
            return bad("beta and beta_prime must be positive");
        }
        if self.attributes.n_base == 0 {
            return bad("n_base must be positive");
        }
        if self.training.n_specialists < self.attributes.n_base {
            return bad("n_specialists must be at least n_base");
        }
        let t = &self.training;
        if t.source == SpecialistSource::Trained {
            let n = match t.optimizer.method {
                TrainMethod::Bt => t.pairs_per_specialist,
                TrainMethod::BinaryGumbel => t.labeled_per_specialist,
            };
            if n == 0 {
                return bad("training set size must be positive");
            }
        }
        let o = &self.online;
        let n_users = if o.users.is_empty() { o.n_users } else { o.users.len() };
        if n_users == 0 || o.batch_size == 0 || o.inner_iters == 0 || o.implicit_samples == 0 {
            return bad("user, batch, inner-iteration and sample counts must be positive");
        }
        if !(o.prior_variance > 0.0) {
            return bad("prior_variance must be positive");
        }
        for u in &o.users {
            if u.len() != self.attributes.n_base {
                return bad("user weights must have one entry per base attribute");
            }
            PreferenceVector::new(u.clone())?;
        }
        Ok(())
    }

    pub fn n_users(&self) -> usize {
        if self.online.users.is_empty() {
            self.online.n_users
        } else {
            self.online.users.len()
        }
    }

    /// Feedback counts at which every method is evaluated, 0 included.
    pub fn checkpoints(&self) -> Vec<usize> {
        let mut c: Vec<usize> = (0..=self.online.events_per_user).step_by(self.online.batch_size).collect();
        if c.last() != Some(&self.online.events_per_user) {
            c.push(self.online.events_per_user);
        }
        c
    }
}

pub const METHODS: [&str; 6] = ["ss_explicit", "ss_implicit", "ss_explicit_exact", "psoups", "reference", "rlhf_oracle"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub scenario_id: String,
    pub user_id: usize,
    pub method: String,
    pub n_feedback: usize,
    pub eval_value: f64,
    pub acceptance_rate: Option<f64>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserSummary {
    pub user_id: usize,
    pub w: Vec<f64>,
    pub exact_lambda: Vec<f64>,
    pub learned_lambda: Vec<f64>,
    pub rlhf_oracle: f64,
    pub ss_explicit_exact: f64,
    pub ss_explicit_final: f64,
    pub ss_implicit_final: f64,
    pub specialist_values: Vec<f64>,
    pub max_specialist: f64,
    pub psoups: f64,
    pub reference: f64,
    /// learned-λ value over exact-λ value at the last checkpoint
    pub learned_over_exact: f64,
    pub sampler: SamplerStats,
    pub posterior: VariationalPosterior,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub k: usize,
    pub learned_mean: f64,
    pub exact_mean: f64,
    pub runs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub scenario_id: String,
    pub seed: u64,
    pub config: ScenarioConfig,
    pub training_weights: Vec<Vec<f64>>,
    pub specialist_final_loss: Vec<f64>,
    pub rows: Vec<ResultRow>,
    pub users: Vec<UserSummary>,
    pub certification: Option<CertSummary>,
    pub bounds: Vec<BoundReport>,
    pub acceptance: SamplerStats,
    pub ablation: Vec<AblationRow>,
}

/// Everything built in the offline phase.
pub struct OfflineArtifacts {
    pub mdp: LanguageMdp,
    pub attrs: AttributeSet,
    pub training_weights: Vec<PreferenceVector>,
    pub specialists: Specialists,
    pub final_losses: Vec<f64>,
}

/// MDP, base attributes and training weights; everything drawn before training.
pub struct World {
    pub mdp: LanguageMdp,
    pub attrs: AttributeSet,
    pub training_weights: Vec<PreferenceVector>,
}

pub fn build_world(cfg: &ScenarioConfig) -> Result<World> {
    cfg.validate()?;
    let mdp = LanguageMdp::from_spec(&cfg.mdp)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(OFFLINE_STREAM);
    let attrs = AttributeSet::random(&mdp, cfg.attributes.n_base, cfg.beta, cfg.attributes.noise, &mut rng)?;
    let training_weights =
        make_training_weights(cfg.training.n_specialists, cfg.attributes.n_base, cfg.training.spread, &mut rng)?;
    Ok(World { mdp, attrs, training_weights })
}

pub fn build_offline(cfg: &ScenarioConfig) -> Result<OfflineArtifacts> {
    let World { mdp, attrs, training_weights } = build_world(cfg)?;
    let t = &cfg.training;
    let rewards: Vec<RewardFn> =
        training_weights.iter().map(|w| personalized_reward(&mdp, &attrs, w)).collect::<Result<_>>()?;
    let (adapters, final_losses): (Vec<LogitAdapter>, Vec<f64>) = match t.source {
        SpecialistSource::Oracle => rewards
            .iter()
            .enumerate()
            .map(|(j, r)| Ok((LogitAdapter::from_solution(j, &solve_soft(&mdp, r, cfg.beta)?), 0.0)))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .unzip(),
        SpecialistSource::Trained => rewards
            .par_iter()
            .enumerate()
            .map(|(j, r)| {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                rng.set_stream(OFFLINE_STREAM + 1 + j as u64);
                let prompts = [State::root()];
                let data = match t.optimizer.method {
                    TrainMethod::Bt => OfflineDataset {
                        pairs: generate_pairs_from(&mdp, r, t.pairs_per_specialist, t.pair_mode, &prompts, j, &mut rng)?,
                        labeled: Vec::new(),
                    },
                    TrainMethod::BinaryGumbel => OfflineDataset {
                        pairs: Vec::new(),
                        labeled: generate_labeled(&mdp, r, t.labeled_per_specialist, &prompts, &mut rng)?,
                    },
                };
                let fit = train_specialized(&mdp, &data, &t.optimizer, j, cfg.beta)?;
                let last = fit.losses.last().copied().unwrap_or(f64::NAN);
                Ok((fit.adapter, last))
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .unzip(),
    };
    let specialists = Specialists::new(&mdp, adapters)?;
    Ok(OfflineArtifacts { mdp, attrs, training_weights, specialists, final_losses })
}

fn root_value(mdp: &LanguageMdp, policy: &PolicyTable, r: &RewardFn, beta: f64) -> f64 {
    evaluate_policy(mdp, policy, r, beta)[0]
}

/// Simulated feedback for one user: bt-labeled pairs of reference rollouts.
pub fn user_feedback(
    cfg: &ScenarioConfig,
    mdp: &LanguageMdp,
    spec: &Specialists,
    r_w: &RewardFn,
    user: usize,
    n: usize,
) -> Result<Vec<FeedbackEvent>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut rng = user_rng(cfg, user);
    generate_pairs_from(mdp, r_w, n, cfg.online.feedback_mode, &[State::root()], user, &mut rng)?
        .iter()
        .map(|p| FeedbackEvent::from_pair(mdp, spec, p))
        .collect()
}

fn user_rng(cfg: &ScenarioConfig, user: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(user as u64 + 1);
    rng
}

/// Feedback Δ restricted to the specialists in `keep`.
fn restrict(events: &[FeedbackEvent], keep: &[usize]) -> Result<Vec<FeedbackEvent>> {
    events.iter().map(|e| FeedbackEvent::new(keep.iter().map(|&k| e.delta[k]).collect())).collect()
}

/// Learned-λ soup value after all of `events`.
fn learned_value(
    off: &OfflineArtifacts,
    spec: &Specialists,
    events: &[FeedbackEvent],
    r_w: &RewardFn,
    cfg: &ScenarioConfig,
) -> Result<f64> {
    let prior = VariationalPosterior::prior(spec.k(), cfg.online.prior_variance);
    let post = svi_stream(&prior, events, cfg.online.inner_iters)?;
    let sw = deployed_weights(post.last().unwrap_or(&prior), cfg.beta, cfg.beta_prime)?;
    Ok(root_value(&off.mdp, &soup_table(&off.mdp, spec, &sw)?, r_w, cfg.beta))
}

struct UserRun {
    rows: Vec<ResultRow>,
    summary: UserSummary,
    ablation: Vec<(usize, f64, f64)>,
}

fn sanity(cfg: &ScenarioConfig, user: usize, w: &PreferenceVector, what: &str, values: &[f64]) -> SoupError {
    let instance = serde_json::json!({
        "scenario_id": cfg.scenario_id,
        "seed": cfg.seed,
        "user_id": user,
        "w": w.as_slice(),
        "values": values,
    });
    SoupError::Sanity(format!("{what}: {instance}"))
}

fn run_user(cfg: &ScenarioConfig, off: &OfflineArtifacts, user: usize, w: PreferenceVector) -> Result<UserRun> {
    let mdp = &off.mdp;
    let spec = &off.specialists;
    let (beta, bp) = (cfg.beta, cfg.beta_prime);
    let k = spec.k();
    let r_w = personalized_reward(mdp, &off.attrs, &w)?;
    let root = State::root();

    // fixed baselines
    let rlhf = solve_soft(mdp, &r_w, beta)?.root_value();
    let exact = solve_eq6(mdp, spec, &r_w, beta, bp, &root, &cfg.eq6)?;
    let exact_sw = SoupWeights::new(exact.lambda.clone(), beta, bp)?;
    let exact_value = root_value(mdp, &soup_table(mdp, spec, &exact_sw)?, &r_w, beta);
    let specialist_values: Vec<f64> = (0..k).map(|j| root_value(mdp, spec.policy(j), &r_w, beta)).collect();
    let max_specialist = specialist_values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let reference = root_value(mdp, mdp.reference().table(), &r_w, beta);
    let ps = psoups_average(spec.adapters(), &vec![1.0 / k as f64; k])?;
    let psoups = root_value(mdp, &ps.policy(mdp)?, &r_w, beta);

    let tol = 1e-7;
    if rlhf < exact_value - tol {
        return Err(sanity(cfg, user, &w, "oracle below exact soup", &[rlhf, exact_value]));
    }
    if exact_value < max_specialist - tol {
        return Err(sanity(cfg, user, &w, "exact soup below best specialist", &[exact_value, max_specialist]));
    }
    if exact_value < reference - tol {
        return Err(sanity(cfg, user, &w, "exact soup below reference", &[exact_value, reference]));
    }

    // online feedback
    let events = user_feedback(cfg, mdp, spec, &r_w, user, cfg.online.events_per_user)?;
    // the implicit sampler continues on a stream of its own
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(SAMPLER_STREAM + user as u64);
    let prior = VariationalPosterior::prior(k, cfg.online.prior_variance);
    let posts = svi_stream(&prior, &events, cfg.online.inner_iters)?;

    let mut rows = Vec::new();
    let mut total = SamplerStats::default();
    let mut last = (0.0, 0.0, Vec::new());
    let row = |method: &str, n: usize, v: f64, acc: Option<f64>| ResultRow {
        scenario_id: cfg.scenario_id.clone(),
        user_id: user,
        method: method.into(),
        n_feedback: n,
        eval_value: v,
        acceptance_rate: acc,
        seed: cfg.seed,
    };
    for n in cfg.checkpoints() {
        let sw = deployed_weights(&posts[n], beta, bp)?;
        let learned = root_value(mdp, &soup_table(mdp, spec, &sw)?, &r_w, beta);
        let mut stats = SamplerStats::default();
        let mut sampler = ImplicitSampler::new(mdp, spec, &sw, cfg.online.sampler)?;
        let emp = sampler.empirical_table(cfg.online.implicit_samples, &mut rng, &mut stats)?;
        let implicit = root_value(mdp, &emp, &r_w, beta);
        total.merge(&stats);
        rows.push(row(METHODS[0], n, learned, None));
        rows.push(row(METHODS[1], n, implicit, Some(stats.acceptance_rate())));
        rows.push(row(METHODS[2], n, exact_value, None));
        rows.push(row(METHODS[3], n, psoups, None));
        rows.push(row(METHODS[4], n, reference, None));
        rows.push(row(METHODS[5], n, rlhf, None));
        last = (learned, implicit, sw.lambda.clone());
    }

    let mut ablation = Vec::new();
    if cfg.ablation.enabled && k > 1 {
        let mut arng = ChaCha8Rng::seed_from_u64(cfg.seed);
        arng.set_stream(ABLATION_STREAM + user as u64);
        for _ in 0..cfg.ablation.orders {
            let mut order: Vec<usize> = (0..k).collect();
            order.shuffle(&mut arng);
            for keep_n in (1..=k).rev() {
                let mut keep = order[..keep_n].to_vec();
                keep.sort_unstable();
                let sub = spec.subset(&keep);
                let learned = learned_value(off, &sub, &restrict(&events, &keep)?, &r_w, cfg)?;
                let ex = solve_eq6(mdp, &sub, &r_w, beta, bp, &root, &cfg.eq6)?;
                let ex_value =
                    root_value(mdp, &soup_table(mdp, &sub, &SoupWeights::new(ex.lambda, beta, bp)?)?, &r_w, beta);
                ablation.push((keep_n, learned, ex_value));
            }
        }
    }

    let summary = UserSummary {
        user_id: user,
        w: w.as_slice().to_vec(),
        exact_lambda: exact.lambda,
        learned_lambda: last.2,
        rlhf_oracle: rlhf,
        ss_explicit_exact: exact_value,
        ss_explicit_final: last.0,
        ss_implicit_final: last.1,
        specialist_values,
        max_specialist,
        psoups,
        reference,
        learned_over_exact: last.0 / exact_value,
        sampler: total,
        posterior: posts.last().cloned().unwrap_or(prior),
    };
    Ok(UserRun { rows, summary, ablation })
}

/// Held-out user weights over the base attributes.
pub fn held_out_users(cfg: &ScenarioConfig) -> Result<Vec<PreferenceVector>> {
    if !cfg.online.users.is_empty() {
        return cfg.online.users.iter().map(|u| PreferenceVector::new(u.clone())).collect();
    }
    Ok((0..cfg.online.n_users)
        .map(|u| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(USER_STREAM + u as u64);
            sample_simplex(cfg.attributes.n_base, &mut rng)
        })
        .collect())
}

pub fn run_scenario(cfg: &ScenarioConfig) -> Result<RunReport> {
    let off = build_offline(cfg)?;
    let users = held_out_users(cfg)?;
    let runs: Vec<UserRun> = users
        .clone()
        .into_par_iter()
        .enumerate()
        .map(|(u, w)| run_user(cfg, &off, u, w))
        .collect::<Result<_>>()?;

    let (bounds, certification) = if cfg.certify {
        let per: Vec<Vec<BoundReport>> = users
            .par_iter()
            .enumerate()
            .map(|(u, w)| {
                let inst = CertInstance {
                    id: u,
                    mdp: off.mdp.clone(),
                    attrs: off.attrs.clone(),
                    w: w.clone(),
                    beta: cfg.beta,
                    beta_prime: cfg.beta_prime,
                };
                certify(&inst, &cfg.eq6)
            })
            .collect::<Result<_>>()?;
        let summary = CertSummary::from_reports(&per);
        (per.into_iter().flatten().collect(), Some(summary))
    } else {
        (Vec::new(), None)
    };

    let mut acceptance = SamplerStats::default();
    let mut ablation: Vec<AblationRow> = Vec::new();
    for run in &runs {
        acceptance.merge(&run.summary.sampler);
        for &(k, l, e) in &run.ablation {
            match ablation.iter_mut().find(|r| r.k == k) {
                Some(r) => {
                    r.learned_mean += l;
                    r.exact_mean += e;
                    r.runs += 1;
                }
                None => ablation.push(AblationRow { k, learned_mean: l, exact_mean: e, runs: 1 }),
            }
        }
    }
    for r in &mut ablation {
        r.learned_mean /= r.runs as f64;
        r.exact_mean /= r.runs as f64;
    }
    ablation.sort_by_key(|r| r.k);

    let (rows, users): (Vec<Vec<ResultRow>>, Vec<UserSummary>) = runs.into_iter().map(|r| (r.rows, r.summary)).unzip();
    Ok(RunReport {
        scenario_id: cfg.scenario_id.clone(),
        seed: cfg.seed,
        config: cfg.clone(),
        training_weights: off.training_weights.iter().map(|w| w.as_slice().to_vec()).collect(),
        specialist_final_loss: off.final_losses,
        rows: rows.into_iter().flatten().collect(),
        users,
        certification,
        bounds,
        acceptance,
        ablation,
    })
}

/// results.csv, bounds.csv and report.json under `out_dir`.
pub fn emit_report(report: &RunReport, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    let mut wtr = csv::Writer::from_path(out_dir.join("results.csv"))?;
    for r in &report.rows {
        wtr.serialize(r)?;
    }
    if report.rows.is_empty() {
        wtr.write_record(["scenario_id", "user_id", "method", "n_feedback", "eval_value", "acceptance_rate", "seed"])?;
    }
    wtr.flush()?;
    write_bounds_csv(fs::File::create(out_dir.join("bounds.csv"))?, &report.bounds)?;
    let json = serde_json::to_string_pretty(report)?;
    fs::write(out_dir.join("report.json"), json + "\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Small and quick; the full default run lives in the integration tests.
    fn small() -> ScenarioConfig {
        let mut c = ScenarioConfig::default();
        c.mdp.vocab = 2;
        c.mdp.horizon = 2;
        c.mdp.features = FeatureSpec::TabularLGram { context: 2 };
        c.attributes.n_base = 2;
        c.training.n_specialists = 2;
        c.training.pairs_per_specialist = 200;
        c.training.optimizer.steps = 100;
        c.online.n_users = 2;
        c.online.events_per_user = 40;
        c.online.batch_size = 20;
        c.online.implicit_samples = 500;
        c.ablation.orders = 1;
        c
    }

    #[test]
    fn checkpoints_include_both_ends() {
        let c = ScenarioConfig::default();
        assert_eq!(c.checkpoints(), (0..=10).map(|i| i * 50).collect::<Vec<_>>());
        let mut c = small();
        c.online.events_per_user = 45;
        assert_eq!(c.checkpoints(), vec![0, 20, 40, 45]);
        c.online.events_per_user = 0;
        assert_eq!(c.checkpoints(), vec![0]);
    }

    #[test]
    fn config_validation() {
        let mut c = small();
        c.beta = 0.0;
        assert!(c.validate().is_err());
        let mut c = small();
        c.training.n_specialists = 1;
        assert!(c.validate().is_err());
        let mut c = small();
        c.online.users = vec![vec![0.5, 0.6]];
        assert!(c.validate().is_err());
        let mut c = small();
        c.online.batch_size = 0;
        assert!(c.validate().is_err());
        assert!(small().validate().is_ok());
    }

    #[test]
    fn config_json_defaults() {
        let c: ScenarioConfig = serde_json::from_str("{\"seed\": 9}").unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.online.events_per_user, 500);
        let back: ScenarioConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn no_feedback_means_reference() {
        let mut c = small();
        c.online.events_per_user = 0;
        let rep = run_scenario(&c).unwrap();
        assert_eq!(rep.rows.len(), 2 * 6);
        for u in &rep.users {
            assert_eq!(u.ss_explicit_final, u.reference);
            assert!((u.ss_implicit_final - u.reference).abs() < 0.05);
            assert_eq!(u.sampler.clamped, 0);
        }
    }

    #[test]
    fn specialist_user_with_oracles() {
        let mut c = small();
        c.training.source = SpecialistSource::Oracle;
        c.training.spread = 0.0;
        c.online.users = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let rep = run_scenario(&c).unwrap();
        for (j, u) in rep.users.iter().enumerate() {
            assert!((u.rlhf_oracle - u.specialist_values[j]).abs() < 1e-9);
            assert!((u.ss_explicit_exact - u.rlhf_oracle).abs() < 1e-7);
        }
    }

    #[test]
    fn rows_and_files() {
        let c = small();
        let rep = run_scenario(&c).unwrap();
        assert_eq!(rep.rows.len(), 2 * 6 * 3);
        assert!(rep.certification.as_ref().unwrap().states_passed == rep.bounds.len());
        assert_eq!(rep.ablation.iter().map(|r| r.k).collect::<Vec<_>>(), vec![1, 2]);
        let dir = tempfile::tempdir().unwrap();
        emit_report(&rep, dir.path()).unwrap();
        let csv = fs::read_to_string(dir.path().join("results.csv")).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "scenario_id,user_id,method,n_feedback,eval_value,acceptance_rate,seed");
        assert_eq!(lines.count(), rep.rows.len());
        let json: RunReport = serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
        assert_eq!(json.rows, rep.rows);
    }

    #[test]
    fn certification_disabled_gives_header_only() {
        let mut c = small();
        c.certify = false;
        c.ablation.enabled = false;
        let rep = run_scenario(&c).unwrap();
        assert!(rep.ablation.is_empty());
        let dir = tempfile::tempdir().unwrap();
        emit_report(&rep, dir.path()).unwrap();
        let b = fs::read_to_string(dir.path().join("bounds.csv")).unwrap();
        assert_eq!(b.lines().count(), 1);
    }
}
