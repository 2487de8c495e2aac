//! Experiment driver: run a decoding method over a prompt set, compute
//! safety and reward metrics, and write machine-readable reports.
//!
//! `metrics.json`, `rows.csv` and `pareto.csv` depend only on the config and
//! seed, so they are byte-identical across reruns. Wall-clock times go to a
//! separate `timing.json`.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{args_decode, beam_search_baseline, best_of_n, ArgsConfig, LagrangianSelector, Selector};
use crate::critic::{CriticCheckpoint, CriticNet};
use crate::error::{Error, Result};
use crate::mdp::{CmdpSpec, GenerativeModel, SafetyCostModel, TaskCostModel, TokenId, Vocabulary};
use crate::prompts::{load_prompts, synthetic_prompts, Prompt};
use crate::rng::derive_seed;
use crate::search::{inference_guard, SearchConfig, SearchOutcome};
use crate::toy::{LexiconSafetyCost, TargetTaskCost, TinyRecurrentModel, ToyModel};

pub const CONFIG_VERSION: u32 = 1;
pub const SEED_ENV: &str = "SAUTE_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    InferenceGuard,
    BonLagrangian,
    BonAugmented,
    BeamLagrangian,
    BeamAugmented,
    Args,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::InferenceGuard,
        Method::BonLagrangian,
        Method::BonAugmented,
        Method::BeamLagrangian,
        Method::BeamAugmented,
        Method::Args,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::InferenceGuard => "inference_guard",
            Method::BonLagrangian => "bon_lagrangian",
            Method::BonAugmented => "bon_augmented",
            Method::BeamLagrangian => "beam_lagrangian",
            Method::BeamAugmented => "beam_augmented",
            Method::Args => "args",
        }
    }

    pub fn uses_lambda(self) -> bool {
        matches!(self, Method::BonLagrangian | Method::BeamLagrangian | Method::Args)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL.into_iter().find(|m| m.as_str() == s).ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

/// A generative model with its cost models and constraint, loadable as one
/// JSON file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub spec: CmdpSpec,
    pub model: ToyModel,
    pub safety: LexiconSafetyCost,
    pub task: TargetTaskCost,
}

impl World {
    /// Eight-token recurrent model whose likely continuations are costly.
    /// Token 1 is a high-reward target that alone exceeds the budget; token 2
    /// is a cheaper target. EOS is free, so every prompt admits a safe answer.
    pub fn builtin() -> Self {
        let vocab = Vocabulary::new(8, 7).expect("static vocabulary");
        let mut model = TinyRecurrentModel::random(vocab, TinyRecurrentModel::DEFAULT_WIDTH, 1.5, 7);
        model.logit_bias[1] += 1.0;
        model.logit_bias[2] += 1.0;
        model.logit_bias[3] += 1.0;
        model.logit_bias[7] -= 1.0;
        Self {
            spec: CmdpSpec { gamma: 0.999, budget_d: 10.0, max_len_t: 16 },
            model: ToyModel::Recurrent(model),
            safety: LexiconSafetyCost {
                weights: vec![0.0, 12.0, 3.0, 2.5, 0.0, 0.0, 1.0, 0.0],
                context_multiplier: true,
            },
            task: TargetTaskCost { targets: vec![1, 2], reward: 100.0, length_penalty: 0.5, max_len: 16 },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        let v = self.model.vocab().size();
        if self.safety.weights.len() != v {
            return Err(Error::Config(format!(
                "safety weights cover {} tokens, vocabulary has {v}",
                self.safety.weights.len()
            )));
        }
        for &t in &self.task.targets {
            self.model.vocab().check(t)?;
        }
        LexiconSafetyCost::new(self.safety.weights.clone(), self.safety.context_multiplier)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let w: World = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        w.validate()?;
        Ok(w)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// One run: method, hyperparameters, and where inputs and outputs live.
/// Stored as TOML. The CLI resolves relative paths against the directory of
/// the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub method: Method,
    pub seed: u64,
    /// World JSON; the builtin world when absent.
    pub world: Option<PathBuf>,
    /// Prompt JSONL; `num_prompts` synthetic prompts when absent.
    pub prompts: Option<PathBuf>,
    pub num_prompts: usize,
    pub critic: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    /// Replaces the world's safety budget.
    pub budget_d: Option<f64>,
    pub lambda: f64,
    pub search: SearchConfig,
    pub args: ArgsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            method: Method::InferenceGuard,
            seed: 0,
            world: None,
            prompts: None,
            num_prompts: 200,
            critic: None,
            output_dir: None,
            budget_d: None,
            lambda: LagrangianSelector::default().lambda,
            search: SearchConfig::default(),
            args: ArgsConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Toml(e.to_string()))
    }

    /// Reads a config file and applies the seed override from the environment.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::from_toml_str(&std::fs::read_to_string(path)?)?;
        cfg.apply_seed_override(std::env::var(SEED_ENV).ok().as_deref())?;
        Ok(cfg)
    }

    pub fn apply_seed_override(&mut self, value: Option<&str>) -> Result<()> {
        if let Some(v) = value {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV} must be an unsigned integer, got {v:?}")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        self.search.validate()?;
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config("lambda must be finite and nonnegative".into()));
        }
        if self.args.width == 0 {
            return Err(Error::Config("ARGS width must be at least 1".into()));
        }
        if self.prompts.is_none() && self.num_prompts == 0 {
            return Err(Error::Config("no prompt file and num_prompts = 0".into()));
        }
        Ok(())
    }

    pub fn load_world(&self) -> Result<World> {
        let mut world = match &self.world {
            Some(p) => World::load(p)?,
            None => World::builtin(),
        };
        if let Some(d) = self.budget_d {
            world.spec.budget_d = d;
            world.spec.validate()?;
        }
        Ok(world)
    }

    pub fn load_prompts(&self, vocab: &Vocabulary) -> Result<Vec<Prompt>> {
        match &self.prompts {
            Some(p) => load_prompts(p, vocab),
            None => Ok(synthetic_prompts(self.num_prompts, vocab, self.seed)),
        }
    }

    pub fn load_critic(&self) -> Result<Option<CriticNet>> {
        self.critic.as_deref().map(|p| CriticCheckpoint::load(p)?.into_net()).transpose()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptResult {
    pub id: String,
    pub prompt: Vec<TokenId>,
    pub tokens: Vec<TokenId>,
    pub complete: bool,
    pub task_cost: f64,
    pub discounted_safety_cost: f64,
    pub raw_safety_cost: f64,
    pub z_trace: Vec<f64>,
    pub score: f64,
    pub wall_time_s: f64,
}

impl PromptResult {
    pub fn reward(&self) -> f64 {
        -self.task_cost
    }

    pub fn final_z(&self) -> f64 {
        self.z_trace.last().copied().unwrap_or(f64::NAN)
    }
}

/// Stable per-prompt seed: independent of prompt order and worker count.
pub fn prompt_seed(seed: u64, id: &str) -> u64 {
    let digest = Sha256::digest(id.as_bytes());
    let mut b = [0u8; 8];
    b.copy_from_slice(&digest[..8]);
    derive_seed(seed, &[u64::from_le_bytes(b)])
}

/// Decodes one prompt with the configured method.
pub fn decode_prompt(
    cfg: &RunConfig,
    world: &World,
    critic: Option<&CriticNet>,
    prompt: &Prompt,
) -> Result<SearchOutcome> {
    let seed = prompt_seed(cfg.seed, &prompt.id);
    let search = SearchConfig { seed, ..cfg.search.clone() };
    let (m, s, t, spec) = (&world.model, &world.safety, &world.task, &world.spec);
    let lag = Selector::Lagrangian(LagrangianSelector { lambda: cfg.lambda });
    let aug = Selector::Augmented { n: search.penalty_n };
    match cfg.method {
        Method::InferenceGuard => inference_guard(&prompt.tokens, &search, spec, m, s, t, critic),
        Method::BonLagrangian => best_of_n(&prompt.tokens, search.num_beams_n, &lag, spec, m, s, t, seed),
        Method::BonAugmented => best_of_n(&prompt.tokens, search.num_beams_n, &aug, spec, m, s, t, seed),
        Method::BeamLagrangian => beam_search_baseline(&prompt.tokens, &search, &lag, spec, m, s, t),
        Method::BeamAugmented => beam_search_baseline(&prompt.tokens, &search, &aug, spec, m, s, t),
        Method::Args => {
            let args = ArgsConfig { lambda: cfg.lambda, ..cfg.args };
            args_decode(&prompt.tokens, &args, spec, m, s, t)
        }
    }
}

/// Runs every prompt; results come back sorted by prompt id.
pub fn run_with(
    cfg: &RunConfig,
    world: &World,
    critic: Option<&CriticNet>,
    prompts: &[Prompt],
) -> Result<Vec<PromptResult>> {
    cfg.validate()?;
    world.validate()?;
    let mut rows = Vec::with_capacity(prompts.len());
    for p in prompts {
        let clock = Stopwatch::start();
        let out = decode_prompt(cfg, world, critic, p)?;
        let wall = clock.seconds();
        rows.push(PromptResult {
            id: p.id.clone(),
            prompt: p.tokens.clone(),
            task_cost: world.task.terminal_cost(&out.sequence),
            raw_safety_cost: raw_safety_sum(&world.safety, &out.sequence),
            tokens: out.sequence.generated,
            complete: out.complete,
            discounted_safety_cost: out.discounted_safety_cost,
            z_trace: out.z_trace,
            score: out.score,
            wall_time_s: wall,
        });
    }
    rows.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(rows)
}

/// Wall clock; reads zero on targets without one (browser wasm).
struct Stopwatch(#[cfg(not(target_arch = "wasm32"))] std::time::Instant);

impl Stopwatch {
    fn start() -> Self {
        Self(
            #[cfg(not(target_arch = "wasm32"))]
            std::time::Instant::now(),
        )
    }

    fn seconds(&self) -> f64 {
        #[cfg(not(target_arch = "wasm32"))]
        return self.0.elapsed().as_secs_f64();
        #[cfg(target_arch = "wasm32")]
        0.0
    }
}

fn raw_safety_sum<S: SafetyCostModel + ?Sized>(safety: &S, seq: &crate::mdp::TokenSequence) -> f64 {
    let mut prefix = crate::mdp::TokenSequence { prompt: seq.prompt.clone(), generated: Vec::new(), terminated: false };
    let mut total = 0.0;
    for &t in &seq.generated {
        total += safety.cost(&prefix, t);
        prefix.generated.push(t);
    }
    total
}

pub fn run_experiment(cfg: &RunConfig) -> Result<Vec<PromptResult>> {
    let world = cfg.load_world()?;
    let prompts = cfg.load_prompts(world.model.vocab())?;
    let critic = cfg.load_critic()?;
    run_with(cfg, &world, critic.as_ref(), &prompts)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: Method,
    pub n_prompts: usize,
    /// Mean of `-c_task`; higher is better.
    pub avg_reward: f64,
    pub avg_cost_discounted: f64,
    pub avg_cost_raw_sum: f64,
    /// Fraction of responses whose discounted safety cost is at most `d`.
    pub safety_rate: f64,
    pub unterminated: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub mean_wall_time_s: f64,
    pub per_prompt: Vec<(String, f64)>,
}

pub fn compute_metrics(method: Method, results: &[PromptResult], spec: &CmdpSpec) -> Result<MetricsReport> {
    if results.is_empty() {
        return Err(Error::Input("no results to summarize".into()));
    }
    let n = results.len() as f64;
    let mean = |f: &dyn Fn(&PromptResult) -> f64| results.iter().map(f).sum::<f64>() / n;
    Ok(MetricsReport {
        method,
        n_prompts: results.len(),
        avg_reward: mean(&|r| r.reward()),
        avg_cost_discounted: mean(&|r| r.discounted_safety_cost),
        avg_cost_raw_sum: mean(&|r| r.raw_safety_cost),
        safety_rate: results.iter().filter(|r| r.discounted_safety_cost <= spec.budget_d).count() as f64 / n,
        unterminated: results.iter().filter(|r| !r.complete).count(),
    })
}

pub fn timing(results: &[PromptResult]) -> TimingReport {
    let per_prompt: Vec<(String, f64)> = results.iter().map(|r| (r.id.clone(), r.wall_time_s)).collect();
    let mean =
        if results.is_empty() { 0.0 } else { per_prompt.iter().map(|p| p.1).sum::<f64>() / results.len() as f64 };
    TimingReport { mean_wall_time_s: mean, per_prompt }
}

#[derive(Serialize)]
struct Row<'a> {
    id: &'a str,
    prompt: String,
    tokens: String,
    complete: bool,
    task_cost: f64,
    reward: f64,
    discounted_safety_cost: f64,
    raw_safety_cost: f64,
    final_z: f64,
    score: f64,
}

fn join(tokens: &[TokenId]) -> String {
    tokens.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ")
}

pub fn write_rows(results: &[PromptResult], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in results {
        w.serialize(Row {
            id: &r.id,
            prompt: join(&r.prompt),
            tokens: join(&r.tokens),
            complete: r.complete,
            task_cost: r.task_cost,
            reward: r.reward(),
            discounted_safety_cost: r.discounted_safety_cost,
            raw_safety_cost: r.raw_safety_cost,
            final_z: r.final_z(),
            score: r.score,
        })?;
    }
    w.flush()?;
    Ok(())
}

/// One point of a sweep; `error` is set when that configuration failed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub method: Method,
    pub lambda: Option<f64>,
    pub budget_d: f64,
    pub num_beams_n: usize,
    pub metrics: Option<MetricsReport>,
    pub error: Option<String>,
}

const PARETO_HEADER: [&str; 8] =
    ["method", "lambda", "budget_d", "num_beams_n", "avg_reward", "safety_rate", "avg_cost_discounted", "error"];

pub fn write_pareto(points: &[SweepPoint], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(PARETO_HEADER)?;
    let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
    for p in points {
        let m = p.metrics.as_ref();
        w.write_record([
            p.method.as_str().to_string(),
            opt(p.lambda),
            p.budget_d.to_string(),
            p.num_beams_n.to_string(),
            opt(m.map(|m| m.avg_reward)),
            opt(m.map(|m| m.safety_rate)),
            opt(m.map(|m| m.avg_cost_discounted)),
            p.error.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `metrics.json`, `rows.csv`, `pareto.csv` and `timing.json`.
pub fn emit_report(
    report: &MetricsReport,
    results: &[PromptResult],
    points: &[SweepPoint],
    out_dir: &Path,
) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("metrics.json"), serde_json::to_string_pretty(report)? + "\n")?;
    write_rows(results, &out_dir.join("rows.csv"))?;
    write_pareto(points, &out_dir.join("pareto.csv"))?;
    std::fs::write(out_dir.join("timing.json"), serde_json::to_string_pretty(&timing(results))? + "\n")?;
    Ok(())
}

/// Base config plus the grid to expand over. Empty axes keep the base value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    pub methods: Vec<Method>,
    pub lambdas: Vec<f64>,
    pub budgets: Vec<f64>,
    pub num_beams: Vec<usize>,
    pub base: RunConfig,
}

impl SweepSpec {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        Ok(toml::from_str(s)?)
    }

    /// Lambda only varies for methods that use it.
    pub fn expand(&self) -> Vec<RunConfig> {
        let or = |v: &Vec<f64>, d: f64| if v.is_empty() { vec![d] } else { v.clone() };
        let methods = if self.methods.is_empty() { vec![self.base.method] } else { self.methods.clone() };
        let beams = if self.num_beams.is_empty() { vec![self.base.search.num_beams_n] } else { self.num_beams.clone() };
        let budgets: Vec<Option<f64>> = if self.budgets.is_empty() {
            vec![self.base.budget_d]
        } else {
            self.budgets.iter().map(|&b| Some(b)).collect()
        };
        let mut out = Vec::new();
        for &method in &methods {
            let lambdas =
                if method.uses_lambda() { or(&self.lambdas, self.base.lambda) } else { vec![self.base.lambda] };
            for &lambda in &lambdas {
                for &budget_d in &budgets {
                    for &n in &beams {
                        let mut c = self.base.clone();
                        c.method = method;
                        c.lambda = lambda;
                        c.budget_d = budget_d;
                        c.search.num_beams_n = n;
                        c.search.top_k = c.search.top_k.min(n).max(1);
                        out.push(c);
                    }
                }
            }
        }
        out
    }
}

/// Runs every config; failures are recorded per point and the sweep goes on.
pub fn sweep(configs: &[RunConfig]) -> Result<Vec<SweepPoint>> {
    if configs.is_empty() {
        return Err(Error::Config("sweep needs at least one configuration".into()));
    }
    Ok(configs
        .iter()
        .map(|cfg| {
            let outcome = cfg.load_world().and_then(|w| {
                let rows = run_experiment(cfg)?;
                Ok((w.spec.budget_d, compute_metrics(cfg.method, &rows, &w.spec)?))
            });
            let (budget_d, metrics, error) = match outcome {
                Ok((b, m)) => (b, Some(m), None),
                Err(e) => (cfg.budget_d.unwrap_or(f64::NAN), None, Some(e.to_string())),
            };
            if let Some(e) = &error {
                log::warn!("sweep point {} failed: {e}", cfg.method);
            }
            SweepPoint {
                method: cfg.method,
                lambda: cfg.method.uses_lambda().then_some(cfg.lambda),
                budget_d,
                num_beams_n: cfg.search.num_beams_n,
                metrics,
                error,
            }
        })
        .collect())
}
