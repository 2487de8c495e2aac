//! Browser bindings over the builtin toy world. Every export takes plain
//! numbers or strings and returns a JSON string, so the page needs no glue
//! beyond `JSON.parse`.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use saute_core::augment::{advance_safety_state, init_budget};
use saute_core::harness::{compute_metrics, decode_prompt, run_with, Method, RunConfig, World};
use saute_core::mdp::{CmdpSpec, GenerativeModel, TaskCostModel};
use saute_core::prompts::{synthetic_prompts, Prompt};
use saute_core::search::SearchConfig;
use saute_core::toy::tokenize_text;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

#[derive(Serialize)]
struct TrackerTrace {
    z: Vec<f64>,
    /// Whether the budget still held after each step.
    safe: Vec<bool>,
    discounted_cost: f64,
}

/// Runs the budget tracker over a comma- or space-separated cost list.
#[wasm_bindgen]
pub fn tracker_trace(costs: &str, gamma: f64, budget: f64) -> Result<String, String> {
    let spec = CmdpSpec::new(gamma, budget, 1).map_err(err)?;
    let costs: Vec<f64> = costs
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().map_err(|_| format!("not a number: {s:?}")))
        .collect::<Result<_, _>>()?;
    let mut s = init_budget(&spec);
    let mut z = vec![s.z];
    let mut safe = Vec::new();
    let mut discounted_cost = 0.0;
    for (t, &c) in costs.iter().enumerate() {
        if c.is_nan() || c < 0.0 {
            return Err(format!("cost {c} is negative"));
        }
        discounted_cost += gamma.powi(t as i32) * c;
        s = advance_safety_state(s, c, gamma).map_err(err)?;
        z.push(s.z);
        safe.push(s.z > 0.0);
    }
    serde_json::to_string(&TrackerTrace { z, safe, discounted_cost }).map_err(err)
}

fn demo_config(method: Method, beams: usize, lambda: f64, seed: u64) -> RunConfig {
    let beams = beams.clamp(4, 256);
    RunConfig {
        method,
        seed,
        lambda,
        search: SearchConfig {
            num_beams_n: beams,
            block_len: 4,
            max_depth_d: 16,
            top_k: (beams / 4).max(1),
            ..SearchConfig::default()
        },
        ..RunConfig::default()
    }
}

#[derive(Serialize)]
struct Decoded {
    method: String,
    prompt: Vec<u32>,
    tokens: Vec<u32>,
    z_trace: Vec<f64>,
    discounted_safety_cost: f64,
    budget: f64,
    safe: bool,
    reward: f64,
    complete: bool,
}

/// Decodes a text prompt in the builtin world with the named method.
#[wasm_bindgen]
pub fn decode(prompt: &str, method: &str, beams: usize, lambda: f64, seed: u64) -> Result<String, String> {
    let method: Method = method.parse().map_err(err)?;
    let world = World::builtin();
    let tokens = tokenize_text(prompt, world.model.vocab());
    if tokens.is_empty() {
        return Err("prompt has no visible characters".into());
    }
    let cfg = demo_config(method, beams, lambda, seed);
    cfg.validate().map_err(err)?;
    let p = Prompt { id: prompt.to_string(), tokens: tokens.clone() };
    let out = decode_prompt(&cfg, &world, None, &p).map_err(err)?;
    let reward = -world.task.terminal_cost(&out.sequence);
    serde_json::to_string(&Decoded {
        method: method.to_string(),
        prompt: tokens,
        safe: out.discounted_safety_cost <= world.spec.budget_d,
        tokens: out.sequence.generated,
        z_trace: out.z_trace,
        discounted_safety_cost: out.discounted_safety_cost,
        budget: world.spec.budget_d,
        reward,
        complete: out.complete,
    })
    .map_err(err)
}

#[derive(Serialize)]
struct ParetoPoint {
    label: String,
    lambda: Option<f64>,
    safety_rate: f64,
    avg_reward: f64,
}

/// Safety rate and reward of Lagrangian Best-of-N for each lambda in the
/// list, plus the guarded search and augmented beam search for reference.
#[wasm_bindgen]
pub fn lambda_sweep(lambdas: &str, prompts: usize, beams: usize, seed: u64) -> Result<String, String> {
    let lambdas: Vec<f64> = lambdas
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().map_err(|_| format!("not a number: {s:?}")))
        .collect::<Result<_, _>>()?;
    let world = World::builtin();
    let prompts = synthetic_prompts(prompts.clamp(1, 200), world.model.vocab(), seed);
    let mut points = Vec::new();
    let mut run = |label: String, method: Method, lambda: f64| -> Result<(), String> {
        let cfg = demo_config(method, beams, lambda, seed);
        let rows = run_with(&cfg, &world, None, &prompts).map_err(err)?;
        let m = compute_metrics(method, &rows, &world.spec).map_err(err)?;
        points.push(ParetoPoint {
            label,
            lambda: method.uses_lambda().then_some(lambda),
            safety_rate: m.safety_rate,
            avg_reward: m.avg_reward,
        });
        Ok(())
    };
    for &l in &lambdas {
        run(format!("BoN lambda={l}"), Method::BonLagrangian, l)?;
    }
    run("beam augmented".into(), Method::BeamAugmented, 0.0)?;
    run("guarded search".into(), Method::InferenceGuard, 0.0)?;
    serde_json::to_string(&points).map_err(err)
}
