use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use souplab_core::adapt::{deployed_weights, svi_stream, FeedbackEvent, VariationalPosterior};
use souplab_core::bounds::{certify_random, write_bounds_csv, CertSummary};
use souplab_core::harness::{build_offline, build_world, emit_report, held_out_users, run_scenario, user_feedback, ScenarioConfig};
use souplab_core::offline::LogitAdapter;
use souplab_core::preference::{personalized_reward, PreferenceVector};
use souplab_core::softrl::solve_soft;
use souplab_core::souping::Specialists;
use souplab_core::spectral::{em_fit, EmConfig, EmData, WeightMode};
use souplab_core::{Result, SoupError};

#[derive(Parser, Debug)]
#[command(name = "souplab", version, about = "Policy soups for personalized soft-RL on token trees")]
struct Cli {
    /// Scenario configuration (JSON); defaults are used for missing fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true, env = "SOUPLAB_SEED")]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Solve one MDP for a user reward and print Q, V and the optimal policy.
    Solve(UserArgs),
    /// Fit one adapter per training weight vector and write them as JSON.
    TrainOffline,
    /// Update the weight posterior from a feedback stream and emit soup weights.
    AdaptOnline(AdaptArgs),
    /// Randomized certification of the KL and value bounds.
    VerifyBounds {
        #[arg(long, default_value_t = 100)]
        instances: usize,
    },
    /// Full offline + online pipeline with result files.
    Scenario,
    /// Alternating fit of a shared feature map for the base attributes.
    EmFit(EmArgs),
}

#[derive(Args, Debug)]
struct UserArgs {
    /// Comma-separated simplex weights over the base attributes.
    #[arg(long, value_delimiter = ',')]
    weights: Option<Vec<f64>>,
    /// Held-out user index, used when --weights is absent.
    #[arg(long, default_value_t = 0)]
    user: usize,
}

#[derive(Args, Debug)]
struct AdaptArgs {
    #[command(flatten)]
    user: UserArgs,
    /// Directory with adapter JSON files (defaults to OUT/adapters).
    #[arg(long)]
    adapters: Option<PathBuf>,
    /// JSON-lines feedback stream, one Δ array per line; simulated when absent.
    #[arg(long)]
    feedback: Option<PathBuf>,
    /// Number of simulated events (defaults to the configured count).
    #[arg(long)]
    events: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mode {
    MonteCarlo,
    Expected,
}

#[derive(Args, Debug)]
struct EmArgs {
    #[arg(long, default_value_t = 3)]
    d_out: usize,
    #[arg(long, default_value_t = 200)]
    iters: usize,
    #[arg(long, default_value_t = 64)]
    samples: usize,
    #[arg(long, value_enum, default_value_t = Mode::MonteCarlo)]
    mode: Mode,
}

fn load_config(cli: &Cli) -> Result<ScenarioConfig> {
    let mut cfg: ScenarioConfig = match &cli.config {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?)?,
        None => ScenarioConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn user_weights(cfg: &ScenarioConfig, args: &UserArgs) -> Result<PreferenceVector> {
    match &args.weights {
        Some(w) => PreferenceVector::new(w.clone()),
        None => held_out_users(cfg)?
            .get(args.user)
            .cloned()
            .ok_or_else(|| SoupError::InvalidArgument(format!("no held-out user {}", args.user))),
    }
}

fn solve(cfg: &ScenarioConfig, out: &Path, args: &UserArgs) -> Result<()> {
    let world = build_world(cfg)?;
    let mdp = &world.mdp;
    let w = user_weights(cfg, args)?;
    let r = personalized_reward(mdp, &world.attrs, &w)?;
    let sol = solve_soft(mdp, &r, cfg.beta)?;
    let a = mdp.actions();
    println!("beta {}  w {:?}  V(root) {:.9}", cfg.beta, w.as_slice(), sol.root_value());
    println!("{:<16} {:>12}  {:<40}  pi", "state", "V", "Q");
    let mut nodes = Vec::new();
    for node in 0..mdp.internal_count() {
        let s = mdp.state_of(node);
        let q: Vec<f64> = (0..a).map(|t| sol.q(node, t)).collect();
        let pi = sol.policy().row(node).to_vec();
        let fmt = |xs: &[f64]| xs.iter().map(|x| format!("{x:.6}")).collect::<Vec<_>>().join(" ");
        println!("{:<16} {:>12.6}  {:<40}  {}", format!("{:?}", s.tokens()), sol.v(node), fmt(&q), fmt(&pi));
        nodes.push(serde_json::json!({ "state": s.tokens(), "v": sol.v(node), "q": q, "pi": pi }));
    }
    let json = serde_json::json!({ "beta": cfg.beta, "w": w.as_slice(), "root_value": sol.root_value(), "nodes": nodes });
    write_json(&out.join("solution.json"), &json)
}

fn adapter_path(dir: &Path, j: usize) -> PathBuf {
    dir.join(format!("adapter_{j:03}.json"))
}

fn train_offline(cfg: &ScenarioConfig, out: &Path) -> Result<()> {
    let off = build_offline(cfg)?;
    let dir = out.join("adapters");
    for (j, ad) in off.specialists.adapters().iter().enumerate() {
        write_json(&adapter_path(&dir, j), ad)?;
    }
    let weights: Vec<&[f64]> = off.training_weights.iter().map(|w| w.as_slice()).collect();
    write_json(
        &out.join("training.json"),
        &serde_json::json!({ "training_weights": weights, "final_loss": off.final_losses }),
    )?;
    println!("wrote {} adapters to {}", off.specialists.k(), dir.display());
    Ok(())
}

fn read_adapters(dir: &Path) -> Result<Vec<LogitAdapter>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(SoupError::InvalidArgument(format!("no adapter files in {}", dir.display())));
    }
    paths.iter().map(|p| Ok(serde_json::from_str(&fs::read_to_string(p)?)?)).collect()
}

fn read_feedback(path: &Path) -> Result<Vec<FeedbackEvent>> {
    let f = fs::File::open(path)?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let delta: Vec<f64> = serde_json::from_str(&line)?;
        out.push(FeedbackEvent::new(delta)?);
    }
    Ok(out)
}

fn adapt_online(cfg: &ScenarioConfig, out: &Path, args: &AdaptArgs) -> Result<()> {
    let world = build_world(cfg)?;
    let mdp = &world.mdp;
    let dir = args.adapters.clone().unwrap_or_else(|| out.join("adapters"));
    let spec = Specialists::new(mdp, read_adapters(&dir)?)?;
    let events = match &args.feedback {
        Some(p) => read_feedback(p)?,
        None => {
            let w = user_weights(cfg, &args.user)?;
            let r = personalized_reward(mdp, &world.attrs, &w)?;
            let n = args.events.unwrap_or(cfg.online.events_per_user);
            let events = user_feedback(cfg, mdp, &spec, &r, args.user.user, n)?;
            fs::create_dir_all(out)?;
            let mut f = fs::File::create(out.join("feedback.jsonl"))?;
            for e in &events {
                writeln!(f, "{}", serde_json::to_string(&e.delta)?)?;
            }
            events
        }
    };
    if let Some(e) = events.iter().find(|e| e.k() != spec.k()) {
        return Err(SoupError::InvalidArgument(format!("event has {} entries for {} adapters", e.k(), spec.k())));
    }
    let prior = VariationalPosterior::prior(spec.k(), cfg.online.prior_variance);
    let posts = svi_stream(&prior, &events, cfg.online.inner_iters)?;
    let post = posts.last().unwrap_or(&prior);
    let sw = deployed_weights(post, cfg.beta, cfg.beta_prime)?;
    write_json(&out.join("posterior.json"), post)?;
    write_json(&out.join("soup_weights.json"), &sw)?;
    println!("{} events, posterior trace {:.6}, lambda {:?}", events.len(), post.trace(), sw.lambda);
    Ok(())
}

fn verify_bounds(cfg: &ScenarioConfig, out: &Path, instances: usize) -> Result<bool> {
    let reports = certify_random(instances, cfg.seed, &cfg.eq6)?;
    let summary = CertSummary::from_reports(&reports);
    fs::create_dir_all(out)?;
    let flat: Vec<_> = reports.into_iter().flatten().collect();
    write_bounds_csv(fs::File::create(out.join("bounds.csv"))?, &flat)?;
    write_json(&out.join("certification.json"), &summary)?;
    println!(
        "{}/{} instances certified, {}/{} states, {} degenerate",
        summary.instances_passed, summary.instances, summary.states_passed, summary.states, summary.degenerate_states
    );
    Ok(summary.instances_passed == summary.instances)
}

fn scenario(cfg: &ScenarioConfig, out: &Path) -> Result<()> {
    let report = run_scenario(cfg)?;
    emit_report(&report, out)?;
    println!("{:>4} {:>10} {:>10} {:>10} {:>10} {:>10}", "user", "rlhf", "exact", "learned", "best_spec", "reference");
    for u in &report.users {
        println!(
            "{:>4} {:>10.6} {:>10.6} {:>10.6} {:>10.6} {:>10.6}",
            u.user_id, u.rlhf_oracle, u.ss_explicit_exact, u.ss_explicit_final, u.max_specialist, u.reference
        );
    }
    println!("wrote results.csv, bounds.csv and report.json to {}", out.display());
    Ok(())
}

fn em(cfg: &ScenarioConfig, out: &Path, args: &EmArgs) -> Result<()> {
    let world = build_world(cfg)?;
    let data = EmData::from_mdp(&world.mdp, world.attrs.rewards())?;
    let em_cfg = EmConfig {
        d_out: args.d_out,
        iters: args.iters,
        samples: args.samples,
        mode: match args.mode {
            Mode::MonteCarlo => WeightMode::MonteCarlo,
            Mode::Expected => WeightMode::Expected,
        },
        seed: cfg.seed,
        ..EmConfig::default()
    };
    let fit = em_fit(&data, &em_cfg, None)?;
    write_json(&out.join("em_fit.json"), &fit)?;
    println!("final mse {:.3e} after {} iterations", fit.final_mse, fit.iterations);
    Ok(())
}

fn run(cli: &Cli) -> Result<bool> {
    let cfg = load_config(cli)?;
    let out = cli.out.as_path();
    match &cli.command {
        Command::Solve(a) => solve(&cfg, out, a)?,
        Command::TrainOffline => train_offline(&cfg, out)?,
        Command::AdaptOnline(a) => adapt_online(&cfg, out, a)?,
        Command::VerifyBounds { instances } => return verify_bounds(&cfg, out, *instances),
        Command::Scenario => scenario(&cfg, out)?,
        Command::EmFit(a) => em(&cfg, out, a)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
