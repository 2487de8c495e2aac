use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use saute_core::critic::{
    generate_mc_dataset, load_dataset, save_dataset, train_critic, CriticCheckpoint, CriticNet, DiscountHorizon,
    TrainConfig,
};
use saute_core::harness::{
    compute_metrics, emit_report, run_with, sweep, write_pareto, PromptResult, RunConfig, SweepPoint, SweepSpec, World,
    SEED_ENV,
};
use saute_core::mdp::GenerativeModel;
use saute_core::oracle::{
    model_phi, optimal_policy, solve_value_iteration, verify_almost_sure_safety, verify_latent_equivalence,
    verify_monotone_convergence, FiniteAugmentedMDP,
};
use saute_core::prompts::{save_prompts, synthetic_prompts};
use saute_core::toy::{feasibility_probe, make_instance, InstanceParams};

#[derive(Parser)]
#[command(name = "saute", version, about = "Safety-augmented constrained decoding experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Horizon {
    Realized,
    Cap,
}

#[derive(Subcommand)]
enum Command {
    /// Decode every prompt with one method and write reports.
    Decode {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the method in the config.
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Roll out the reference model and write critic training samples.
    GenDataset {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        rollouts: usize,
        #[arg(long, value_enum, default_value_t = Horizon::Realized)]
        horizon: Horizon,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the two-head critic on a sample file.
    TrainCritic {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = TrainConfig::default().epochs)]
        epochs: usize,
        #[arg(long, default_value_t = TrainConfig::default().learning_rate)]
        lr: f64,
        #[arg(long, default_value_t = TrainConfig::default().batch_size)]
        batch: usize,
        #[arg(long, default_value_t = CriticNet::DEFAULT_HIDDEN)]
        hidden: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Solve a small augmented MDP exactly.
    SolveOracle {
        /// Instance JSON; otherwise one is generated from `--seed`.
        #[arg(long)]
        instance: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Penalty; defaults to the instance's own.
        #[arg(long)]
        n: Option<f64>,
        #[arg(long, default_value_t = 1e-12)]
        tol: f64,
        /// Also write the instance JSON here.
        #[arg(long)]
        save_instance: Option<PathBuf>,
    },
    /// Check safety, convergence and latent equivalence on random instances.
    VerifyTheorems {
        #[arg(long, default_value_t = 200)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run a grid of configurations and write pareto.csv.
    Sweep {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rebuild reports from a decode output directory.
    Report {
        #[arg(long)]
        dir: PathBuf,
    },
    /// Write a synthetic prompt file.
    MakePrompts {
        #[arg(long, default_value_t = 200)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        world: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the builtin world as JSON, as a starting point for custom ones.
    ExportWorld {
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => {
            let mut c = RunConfig::default();
            c.apply_seed_override(std::env::var(SEED_ENV).ok().as_deref())?;
            c
        }
    };
    cfg.validate()?;
    if let Some(p) = path {
        // Paths inside a config file are relative to the file.
        let base = p.parent().unwrap_or(Path::new("."));
        for slot in [&mut cfg.world, &mut cfg.prompts, &mut cfg.critic, &mut cfg.output_dir] {
            if let Some(rel) = slot.as_ref().filter(|q| q.is_relative()) {
                *slot = Some(base.join(rel));
            }
        }
    }
    Ok(cfg)
}

fn write_results(results: &[PromptResult], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in results {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn read_results(path: &Path) -> Result<Vec<PromptResult>> {
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

fn point(cfg: &RunConfig, world: &World, metrics: &saute_core::harness::MetricsReport) -> SweepPoint {
    SweepPoint {
        method: cfg.method,
        lambda: cfg.method.uses_lambda().then_some(cfg.lambda),
        budget_d: world.spec.budget_d,
        num_beams_n: cfg.search.num_beams_n,
        metrics: Some(metrics.clone()),
        error: None,
    }
}

fn decode(config: Option<PathBuf>, method: Option<String>, out: Option<PathBuf>) -> Result<()> {
    let mut cfg = load_config(config.as_deref())?;
    if let Some(m) = method {
        cfg.method = m.parse()?;
    }
    let out = out.or(cfg.output_dir.clone()).unwrap_or_else(|| PathBuf::from("out"));
    let world = cfg.load_world()?;
    let prompts = cfg.load_prompts(world.model.vocab())?;
    let critic = cfg.load_critic()?;
    let results = run_with(&cfg, &world, critic.as_ref(), &prompts)?;
    let metrics = compute_metrics(cfg.method, &results, &world.spec)?;
    emit_report(&metrics, &results, &[point(&cfg, &world, &metrics)], &out)?;
    write_results(&results, &out.join("results.jsonl"))?;
    // Stored with absolute paths so `report` works from any directory.
    let mut stored = cfg.clone();
    for slot in [&mut stored.world, &mut stored.prompts, &mut stored.critic] {
        if let Some(p) = slot.as_ref() {
            *slot = Some(fs::canonicalize(p).unwrap_or_else(|_| p.clone()));
        }
    }
    fs::write(out.join("run.toml"), stored.to_toml_string()?)?;
    println!("{}", serde_json::to_string_pretty(&metrics)?);
    Ok(())
}

fn report(dir: &Path) -> Result<()> {
    let cfg = RunConfig::from_toml_str(&fs::read_to_string(dir.join("run.toml"))?)?;
    let world = cfg.load_world()?;
    let results = read_results(&dir.join("results.jsonl"))?;
    let metrics = compute_metrics(cfg.method, &results, &world.spec)?;
    emit_report(&metrics, &results, &[point(&cfg, &world, &metrics)], dir)?;
    println!("{}", serde_json::to_string_pretty(&metrics)?);
    Ok(())
}

fn gen_dataset(config: Option<PathBuf>, rollouts: usize, horizon: Horizon, out: &Path) -> Result<()> {
    let cfg = load_config(config.as_deref())?;
    let world = cfg.load_world()?;
    let prompts: Vec<_> = cfg.load_prompts(world.model.vocab())?.into_iter().map(|p| p.tokens).collect();
    let horizon = match horizon {
        Horizon::Realized => DiscountHorizon::Realized,
        Horizon::Cap => DiscountHorizon::Cap,
    };
    let data = generate_mc_dataset(
        &world.model,
        &world.safety,
        &world.task,
        &prompts,
        rollouts,
        &world.spec,
        horizon,
        cfg.seed,
    )?;
    save_dataset(&data.samples, out)?;
    let safe = data.rollouts.iter().filter(|r| r.z_final > 0.0).count();
    eprintln!("{} samples from {} rollouts ({} safe)", data.samples.len(), data.rollouts.len(), safe);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train(data: &Path, out: &Path, epochs: usize, lr: f64, batch: usize, hidden: usize, seed: u64) -> Result<()> {
    let samples = load_dataset(data)?;
    let first = samples.first().context("dataset is empty")?;
    let net = CriticNet::new(first.h.len() + first.o.len() + 1, hidden, seed);
    let cfg = TrainConfig { learning_rate: lr, epochs, batch_size: batch, seed, ..TrainConfig::default() };
    let outcome = train_critic(net, &samples, &cfg)?;
    CriticCheckpoint::new(&outcome.net, &cfg).save(out)?;
    for (e, l) in outcome.loss_curve.iter().enumerate() {
        log::info!("epoch {e}: loss {l}");
    }
    println!(
        "{}",
        serde_json::json!({ "epochs": epochs, "final_loss": outcome.loss_curve.last(), "config_hash": cfg.hash() })
    );
    Ok(())
}

fn solve(instance: Option<PathBuf>, seed: u64, n: Option<f64>, tol: f64, save: Option<PathBuf>) -> Result<()> {
    let mut mdp = match instance {
        Some(p) => FiniteAugmentedMDP::from_json(&fs::read_to_string(&p)?)?,
        None => make_instance(seed, &InstanceParams::default())?,
    };
    if let Some(n) = n {
        mdp.params.n = n;
    }
    if let Some(p) = save {
        fs::write(p, mdp.to_json()?)?;
    }
    let table = solve_value_iteration(&mdp, tol)?;
    let verdict = verify_almost_sure_safety(&mdp, &optimal_policy(&table))?;
    let root: Vec<u32> = Vec::new();
    println!(
        "{}",
        serde_json::to_string_pretty(&serde_json::json!({
            "root_value": table.root_value(),
            "penalty_n": mdp.params.n,
            "nodes": table.tree().len(),
            "iterations": table.iterations,
            "bellman_residual": table.bellman_residual,
            "first_action": table.greedy_action(&root),
            "feasible": feasibility_probe(&mdp),
            "optimal_policy_safe": verdict.all_safe,
        }))?
    );
    Ok(())
}

fn verify_theorems(count: usize, seed: u64) -> Result<bool> {
    let params = InstanceParams::default();
    let mut instances = Vec::with_capacity(count);
    let mut s = seed;
    while instances.len() < count {
        let mdp = make_instance(s, &params)?;
        if feasibility_probe(&mdp) {
            instances.push(mdp);
        }
        s += 1;
        if s - seed > 100 * count as u64 + 100 {
            bail!("generator produced too few feasible instances");
        }
    }
    let mut safety_failures = 0;
    let mut equivalence_failures = 0;
    for mdp in &instances {
        let table = solve_value_iteration(mdp, 1e-12)?;
        if !verify_almost_sure_safety(mdp, &optimal_policy(&table))?.implication_holds {
            safety_failures += 1;
        }
        if !verify_latent_equivalence(mdp, model_phi(mdp), 1e-9)?.equivalent {
            equivalence_failures += 1;
        }
    }
    let mono = verify_monotone_convergence(&instances, &[1.0, 10.0, 1e2, 1e3, 1e4], 1e-12)?;
    let checks = [
        ("almost-sure safety of the optimal policy", safety_failures == 0, format!("{safety_failures} failures")),
        ("bellman residual <= 1e-9", mono.max_residual <= 1e-9, format!("max {:e}", mono.max_residual)),
        ("monotone in n, constant past the bound", mono.passed(), format!("{} violations", mono.violations.len())),
        (
            "latent and token greedy policies agree",
            equivalence_failures == 0,
            format!("{equivalence_failures} failures"),
        ),
    ];
    println!("{} feasible instances (seeds {seed}..{s})", instances.len());
    for (name, ok, detail) in &checks {
        println!("{} {name} ({detail})", if *ok { "PASS" } else { "FAIL" });
    }
    Ok(checks.iter().all(|c| c.1))
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Decode { config, method, out } => decode(config, method, out)?,
        Command::GenDataset { config, rollouts, horizon, out } => gen_dataset(config, rollouts, horizon, &out)?,
        Command::TrainCritic { data, out, epochs, lr, batch, hidden, seed } => {
            train(&data, &out, epochs, lr, batch, hidden, seed)?
        }
        Command::SolveOracle { instance, seed, n, tol, save_instance } => solve(instance, seed, n, tol, save_instance)?,
        Command::VerifyTheorems { instances, seed } => return verify_theorems(instances, seed),
        Command::Sweep { spec, out } => {
            let spec = SweepSpec::from_toml_str(&fs::read_to_string(&spec)?)?;
            let points = sweep(&spec.expand())?;
            fs::create_dir_all(&out)?;
            write_pareto(&points, &out.join("pareto.csv"))?;
            fs::write(out.join("sweep.json"), serde_json::to_string_pretty(&points)? + "\n")?;
            let failed = points.iter().filter(|p| p.error.is_some()).count();
            eprintln!("{} points, {failed} failed", points.len());
        }
        Command::Report { dir } => report(&dir)?,
        Command::MakePrompts { count, seed, world, out } => {
            let world = match world {
                Some(p) => World::load(&p)?,
                None => World::builtin(),
            };
            save_prompts(&synthetic_prompts(count, world.model.vocab(), seed), &out)?;
        }
        Command::ExportWorld { out } => World::builtin().save(&out)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
