//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each,
//! and exits nonzero if any fails.

use std::collections::HashSet;
use std::time::{Duration, Instant};

use rand::Rng;
use saute_core::augment::{augmented_transition, AugmentedState};
use saute_core::baselines::{beam_search_baseline, Selector};
use saute_core::critic::{
    generate_mc_dataset, grad_check, train_critic, CriticNet, DiscountHorizon, TrainConfig, TrainingSample,
};
use saute_core::harness::{
    compute_metrics, emit_report, prompt_seed, run_with, Method, PromptResult, RunConfig, World,
};
use saute_core::mdp::{sample_token, CmdpSpec, GenerativeModel, TaskCostModel, TokenId, TokenSequence, Vocabulary};
use saute_core::oracle::{
    model_phi, optimal_policy, solve_value_iteration, verify_almost_sure_safety, verify_latent_equivalence,
    verify_monotone_convergence, FiniteAugmentedMDP,
};
use saute_core::prompts::synthetic_prompts;
use saute_core::rng::stream;
use saute_core::search::{
    inference_guard, penalized_logits, update_frequency, Expansion, FrequencyMatrix, SearchConfig, SearchEngine,
};
use saute_core::toy::{feasibility_probe, make_instance, InstanceParams, LexiconSafetyCost, TinyRecurrentModel};

type Check = Result<String, String>;

fn ensure(ok: bool, msg: String) -> Check {
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn feasible_instances(count: usize, params: &InstanceParams) -> Vec<FiniteAugmentedMDP> {
    let mut out = Vec::with_capacity(count);
    let mut seed = 0u64;
    while out.len() < count {
        let mdp = make_instance(seed, params).expect("generator");
        if feasibility_probe(&mdp) {
            out.push(mdp);
        }
        seed += 1;
    }
    out
}

fn small_params() -> InstanceParams {
    InstanceParams { max_vocab: 5, max_horizon: 6, ..InstanceParams::default() }
}

fn almost_sure_safety() -> Check {
    let instances = feasible_instances(200, &small_params());
    let mut below_n = 0;
    let mut trajectories = 0;
    for (i, mdp) in instances.iter().enumerate() {
        let table = solve_value_iteration(mdp, 1e-12).map_err(|e| e.to_string())?;
        let v = verify_almost_sure_safety(mdp, &optimal_policy(&table)).map_err(|e| e.to_string())?;
        trajectories += v.trajectories;
        if v.value < mdp.params.n {
            below_n += 1;
            if !v.all_safe {
                return Err(format!(
                    "instance {i}: value {} < n but an unsafe trajectory has positive probability",
                    v.value
                ));
            }
        }
    }
    ensure(
        below_n == instances.len(),
        format!(
            "{} feasible instances, {below_n} with value < n, {trajectories} trajectories all within budget",
            instances.len()
        ),
    )
}

fn monotone_convergence() -> Check {
    let instances = feasible_instances(100, &small_params());
    let rep = verify_monotone_convergence(&instances, &[1.0, 10.0, 1e2, 1e3, 1e4], 1e-12).map_err(|e| e.to_string())?;
    let saturated = rep.rows.iter().filter(|r| r.constant_after_bound == Some(true)).count();
    ensure(
        rep.passed() && rep.max_residual <= 1e-9 && rep.rows.len() >= 100,
        format!(
            "{} instances, max residual {:e}, {} violations, {saturated} constant past the bound",
            rep.rows.len(),
            rep.max_residual,
            rep.violations.len()
        ),
    )
}

fn latent_equivalence() -> Check {
    let instances = feasible_instances(50, &small_params());
    let mut nodes = 0;
    let mut detected = 0;
    for (i, mdp) in instances.iter().enumerate() {
        let rep = verify_latent_equivalence(mdp, model_phi(mdp), 1e-12).map_err(|e| e.to_string())?;
        if !rep.equivalent {
            return Err(format!("instance {i}: {:?}", rep.counterexample));
        }
        nodes += rep.nodes_checked;
        // Negative control: forget the last token before embedding.
        let lossy = |seq: &TokenSequence| {
            let mut s = seq.clone();
            s.generated.pop();
            s.terminated = false;
            mdp.model.replay(&s)
        };
        if !verify_latent_equivalence(mdp, lossy, 1e-12).map_err(|e| e.to_string())?.equivalent {
            detected += 1;
        }
    }
    ensure(
        detected > 0,
        format!(
            "{} instances, {nodes} nodes match; lossy map rejected on {detected}/{}",
            instances.len(),
            instances.len()
        ),
    )
}

fn search_optimality() -> Check {
    let instances = feasible_instances(50, &small_params());
    let mut worst = 0.0f64;
    for (i, mdp) in instances.iter().enumerate() {
        let v = mdp.vocab().size();
        let t = mdp.spec.max_len_t;
        let n_beams = v.pow(t as u32);
        let cfg = SearchConfig {
            num_beams_n: n_beams,
            block_len: t,
            max_depth_d: t,
            top_k: 1,
            max_retry_m: 1,
            penalty_n: mdp.params.n,
            expansion: Expansion::Exhaustive,
            ..SearchConfig::default()
        };
        let out = inference_guard(&mdp.prompt, &cfg, &mdp.spec, &mdp.model, &mdp.safety, &mdp.task, None)
            .map_err(|e| format!("instance {i}: {e}"))?;
        let mut aug = mdp.root();
        for &y in &out.sequence.generated {
            aug = mdp.step(&aug, y).map_err(|e| e.to_string())?;
        }
        let cost = mdp.terminal_cost(&aug, mdp.params.n).map_err(|e| e.to_string())?;
        let oracle = solve_value_iteration(mdp, 1e-12).map_err(|e| e.to_string())?.root_value();
        let gap = (cost - oracle).abs();
        worst = worst.max(gap);
        if gap > 1e-9 {
            return Err(format!("instance {i}: search {cost} vs oracle {oracle}"));
        }
    }
    ensure(true, format!("{} feasible instances, max |search - oracle| = {worst:e}", instances.len()))
}

fn benchmark_config(method: Method) -> RunConfig {
    RunConfig {
        method,
        seed: 0,
        num_prompts: 200,
        lambda: 5.0,
        search: SearchConfig {
            num_beams_n: 16,
            block_len: 4,
            max_depth_d: 16,
            top_k: 4,
            max_retry_m: 2,
            ..SearchConfig::default()
        },
        ..RunConfig::default()
    }
}

fn method_ordering() -> Check {
    let world = World::builtin();
    // Stopping at once is free and the prompt is not charged, so every prompt
    // has a response within budget.
    let eos = world.model.vocab().eos() as usize;
    if world.safety.weights[eos] != 0.0 {
        return Err("builtin world does not guarantee feasibility".into());
    }
    let prompts = synthetic_prompts(200, world.model.vocab(), 0);
    let rate = |m: Method| -> Result<f64, String> {
        let rows = run_with(&benchmark_config(m), &world, None, &prompts).map_err(|e| e.to_string())?;
        Ok(compute_metrics(m, &rows, &world.spec).map_err(|e| e.to_string())?.safety_rate)
    };
    let ig = rate(Method::InferenceGuard)?;
    let beam_aug = rate(Method::BeamAugmented)?;
    let beam_lag = rate(Method::BeamLagrangian)?;
    ensure(
        ig >= beam_aug && beam_aug >= beam_lag && ig >= 0.95,
        format!("safety rate: guarded {ig:.3}, beam augmented {beam_aug:.3}, beam lagrangian(5) {beam_lag:.3}"),
    )
}

fn critic_suite() -> Check {
    let mut rng = stream(11, &[]);
    let random_sample = |rng: &mut rand_chacha::ChaCha8Rng| TrainingSample {
        h: (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        o: (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        z: rng.gen_range(-5.0..5.0),
        label_safe: rng.gen_bool(0.5),
        label_cost: rng.gen_range(-2.0..2.0),
        rollout: 0,
        step: 0,
    };
    let batch: Vec<TrainingSample> = (0..16).map(|_| random_sample(&mut rng)).collect();
    let gc = grad_check(&CriticNet::new(8, 16, 5), &batch, 1e-6, 0).map_err(|e| e.to_string())?;
    if gc.max_rel_error.is_nan() || gc.max_rel_error >= 1e-4 {
        return Err(format!("gradient check max relative error {:e}", gc.max_rel_error));
    }

    // Separable: the sign of z decides the label.
    let separable = |rng: &mut rand_chacha::ChaCha8Rng| {
        let mut s = random_sample(rng);
        s.label_safe = s.z > 0.0;
        s
    };
    let train: Vec<TrainingSample> = (0..2000).map(|_| separable(&mut rng)).collect();
    let held_out: Vec<TrainingSample> = (0..1000).map(|_| separable(&mut rng)).collect();
    let cfg = TrainConfig { learning_rate: 0.02, epochs: 20, batch_size: 8, ..TrainConfig::default() };
    let net = train_critic(CriticNet::new(8, 16, 1), &train, &cfg).map_err(|e| e.to_string())?.net;
    let correct = held_out
        .iter()
        .filter(|s| net.forward(&s.h, &s.o, s.z).map(|(p, _)| (p > 0.5) == s.label_safe).unwrap_or(false))
        .count();
    let acc = correct as f64 / held_out.len() as f64;
    if acc < 0.95 {
        return Err(format!("held-out accuracy {acc:.3}"));
    }

    let world = World::builtin();
    let prompts: Vec<Vec<TokenId>> =
        synthetic_prompts(200, world.model.vocab(), 3).into_iter().map(|p| p.tokens).collect();
    let data = generate_mc_dataset(
        &world.model,
        &world.safety,
        &world.task,
        &prompts,
        8,
        &world.spec,
        DiscountHorizon::Realized,
        0,
    )
    .map_err(|e| e.to_string())?;
    let samples = &data.samples[..data.samples.len().min(10_000)];
    if samples.len() < 10_000 {
        return Err(format!("only {} samples generated", data.samples.len()));
    }
    for (k, s) in samples.iter().enumerate() {
        let r = &data.rollouts[s.rollout];
        let mut aug = AugmentedState::new(r.prompt.clone(), &world.spec);
        for &y in &r.tokens[..s.step] {
            aug = augmented_transition(&aug, y, &world.safety, world.model.vocab(), &world.spec)
                .map_err(|e| e.to_string())?;
        }
        let latent = world.model.replay(&aug.seq).map_err(|e| e.to_string())?;
        let full = TokenSequence { prompt: r.prompt.clone(), generated: r.tokens.clone(), terminated: true };
        let mut end = AugmentedState::new(r.prompt.clone(), &world.spec);
        for &y in &r.tokens {
            end = augmented_transition(&end, y, &world.safety, world.model.vocab(), &world.spec)
                .map_err(|e| e.to_string())?;
        }
        let cost = world.spec.gamma.powi(r.tokens.len() as i32) * world.task.terminal_cost(&full);
        let sound = latent.h == s.h
            && latent.o == s.o
            && aug.safety.z == s.z
            && s.label_safe == (end.safety.z > 0.0)
            && s.label_cost == cost;
        if !sound {
            return Err(format!("sample {k} does not match its replay"));
        }
    }
    ensure(
        true,
        format!(
            "grad check {:.2e}, held-out accuracy {acc:.3}, {} samples replay exactly",
            gc.max_rel_error,
            samples.len()
        ),
    )
}

fn diversity_penalty() -> Check {
    let vocab = Vocabulary::new(5, 4).unwrap();
    let mut model = TinyRecurrentModel::random(vocab, 8, 1.0, 2);
    model.logit_bias[4] -= 3.0;
    let safety = LexiconSafetyCost::new(vec![0.0; 5], false).unwrap();
    let spec = CmdpSpec::new(0.99, 10.0, 64).unwrap();
    let block_len = 4;
    let mut f = FrequencyMatrix::new(block_len, 5);
    update_frequency(&mut f, &[vec![0, 2, 1, 3], vec![1, 2, 0], vec![3]]).unwrap();
    let penalized: HashSet<(usize, TokenId)> = f.support().into_iter().collect();
    let cfg = SearchConfig {
        num_beams_n: 5000,
        block_len,
        max_depth_d: 64,
        top_k: 1,
        diversity_n2: 1e3,
        ..SearchConfig::default()
    };
    let engine = SearchEngine::new(&model, &safety, spec, cfg).unwrap();
    let root = saute_core::search::Beam::root(&model, &[0], &spec).unwrap();
    let (mut draws, mut hits) = (0u64, 0u64);
    let mut round = 1;
    while draws < 100_000 {
        for c in engine.expand(std::slice::from_ref(&root), &f, 0, round).map_err(|e| e.to_string())? {
            for (pos, &t) in c.block.iter().enumerate() {
                draws += 1;
                hits += penalized.contains(&(pos, t)) as u64;
            }
        }
        round += 1;
    }
    // Unpenalized baseline from the same logits, to show the pairs are likely.
    let logits = model.logits(&root.latent);
    let plain = penalized_logits(&logits, &FrequencyMatrix::new(block_len, 5), 0, 1e3).unwrap();
    let mut rng = stream(1, &[]);
    let base = (0..10_000).filter(|_| penalized.contains(&(0, sample_token(&plain, 1.0, &mut rng).unwrap()))).count();
    let rate = hits as f64 / draws as f64;
    ensure(
        rate < 1e-4,
        format!(
            "{hits} penalized pairs in {draws} draws (rate {rate:e}; unpenalized first-position rate {:.3})",
            base as f64 / 1e4
        ),
    )
}

fn baseline_equivalence() -> Check {
    let world = World::builtin();
    let prompts = synthetic_prompts(50, world.model.vocab(), 7);
    let base = benchmark_config(Method::BeamAugmented).search;
    for p in &prompts {
        let cfg = SearchConfig { seed: prompt_seed(0, &p.id), ..base.clone() };
        let a = beam_search_baseline(
            &p.tokens,
            &cfg,
            &Selector::Augmented { n: cfg.penalty_n },
            &world.spec,
            &world.model,
            &world.safety,
            &world.task,
        )
        .map_err(|e| e.to_string())?;
        let g = SearchConfig { max_retry_m: 1, ..cfg };
        let b = inference_guard(&p.tokens, &g, &world.spec, &world.model, &world.safety, &world.task, None)
            .map_err(|e| e.to_string())?;
        if a.sequence != b.sequence {
            return Err(format!("prompt {}: {:?} vs {:?}", p.id, a.sequence.generated, b.sequence.generated));
        }
    }
    ensure(true, format!("{} prompts identical token-for-token", prompts.len()))
}

fn fixture(id: &str, cost: f64) -> PromptResult {
    PromptResult {
        id: id.into(),
        prompt: vec![0],
        tokens: vec![7],
        complete: true,
        task_cost: 0.0,
        discounted_safety_cost: cost,
        raw_safety_cost: cost,
        z_trace: vec![10.0],
        score: 0.0,
        wall_time_s: 0.0,
    }
}

fn metrics_fidelity() -> Check {
    let spec = CmdpSpec { gamma: 0.999, budget_d: 10.0, max_len_t: 16 };
    let three_of_four = [fixture("a", 0.0), fixture("b", 11.0), fixture("c", 10.0), fixture("d", 2.5)];
    let r = compute_metrics(Method::Args, &three_of_four, &spec).map_err(|e| e.to_string())?.safety_rate;
    let all = [fixture("a", 0.0), fixture("b", 0.0)];
    let r_all = compute_metrics(Method::Args, &all, &spec).map_err(|e| e.to_string())?.safety_rate;
    if r != 0.75 || r_all != 1.0 {
        return Err(format!("fixture rates {r} and {r_all}"));
    }

    let world = World::builtin();
    let cfg = RunConfig { num_prompts: 40, ..benchmark_config(Method::InferenceGuard) };
    let prompts = synthetic_prompts(40, world.model.vocab(), 0);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    for run in ["a", "b"] {
        let rows = run_with(&cfg, &world, None, &prompts).map_err(|e| e.to_string())?;
        let m = compute_metrics(cfg.method, &rows, &world.spec).map_err(|e| e.to_string())?;
        emit_report(&m, &rows, &[], &dir.path().join(run)).map_err(|e| e.to_string())?;
    }
    for f in ["metrics.json", "rows.csv", "pareto.csv"] {
        let a = std::fs::read(dir.path().join("a").join(f)).map_err(|e| e.to_string())?;
        let b = std::fs::read(dir.path().join("b").join(f)).map_err(|e| e.to_string())?;
        if a != b {
            return Err(format!("{f} differs across reruns"));
        }
    }
    // Recompute the rate from rows.csv alone.
    let mut rd = csv::Reader::from_path(dir.path().join("a/rows.csv")).map_err(|e| e.to_string())?;
    let idx = rd.headers().map_err(|e| e.to_string())?.iter().position(|h| h == "discounted_safety_cost").unwrap();
    let costs: Vec<f64> = rd.records().map(|r| r.unwrap()[idx].parse().unwrap()).collect();
    let recomputed = costs.iter().filter(|&&c| c <= world.spec.budget_d).count() as f64 / costs.len() as f64;
    let metrics: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("a/metrics.json")).unwrap()).unwrap();
    ensure(
        metrics["safety_rate"].as_f64() == Some(recomputed),
        format!("fixtures 0.75 and 1.0 exact; reports byte-stable; rate {recomputed} recomputed from rows.csv"),
    )
}

type Criterion = (&'static str, fn() -> Check, Option<Duration>);

fn main() {
    let criteria: [Criterion; 9] = [
        ("1 almost-sure safety of the optimal augmented policy", almost_sure_safety, Some(Duration::from_secs(120))),
        ("2 bellman residual and monotone convergence in n", monotone_convergence, Some(Duration::from_secs(120))),
        ("3 latent/token greedy policy equivalence", latent_equivalence, None),
        ("4 exhaustive guarded search matches the oracle", search_optimality, None),
        ("5 method ordering on the synthetic benchmark", method_ordering, None),
        ("6 critic gradients, separability and label soundness", critic_suite, None),
        ("7 diversity penalty suppresses resampling", diversity_penalty, None),
        ("8 beam baseline equals single-round guarded search", baseline_equivalence, None),
        ("9 metrics fidelity and byte-stable reports", metrics_fidelity, None),
    ];
    let mut failed = 0;
    for (name, check, limit) in criteria {
        let start = Instant::now();
        let result = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let elapsed = start.elapsed();
        let result = match (result, limit) {
            (Ok(msg), Some(l)) if elapsed > l => Err(format!("{msg}; took {elapsed:.1?}, limit {l:?}")),
            (r, _) => r,
        };
        match result {
            Ok(msg) => println!("PASS criterion {name}: {msg} [{elapsed:.1?}]"),
            Err(msg) => {
                failed += 1;
                println!("FAIL criterion {name}: {msg} [{elapsed:.1?}]");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", 9 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
