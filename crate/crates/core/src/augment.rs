//! Safety-state augmentation.
//!
//! The remaining budget is tracked as `z_{t+1} = (z_t - c_t) / gamma` with
//! `z_0 = d`, so `z_{t+1} > 0` exactly when `d - sum_{k<=t} gamma^k c_k > 0`.
//! The task cost is reshaped to a large penalty `n` whenever the tracker has
//! run out, which turns the constrained problem into an unconstrained one.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{
    eval_safety_cost, eval_task_cost, transition, CmdpSpec, SafetyCostModel, TaskCostModel, TokenId, TokenSequence,
    Vocabulary,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SafetyState {
    pub z: f64,
    pub step_t: usize,
}

impl SafetyState {
    pub fn is_safe(&self) -> bool {
        self.z > 0.0
    }
}

pub fn init_budget(spec: &CmdpSpec) -> SafetyState {
    SafetyState { z: spec.budget_d, step_t: 0 }
}

pub fn advance_safety_state(s: SafetyState, cost: f64, gamma: f64) -> Result<SafetyState> {
    if !(cost >= 0.0) || !cost.is_finite() {
        return Err(Error::Invariant(format!("safety cost must be nonnegative, got {cost}")));
    }
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::Config(format!("tracker needs 0 < gamma < 1, got {gamma}")));
    }
    Ok(SafetyState { z: (s.z - cost) / gamma, step_t: s.step_t + 1 })
}

/// A token sequence paired with its safety tracker.
///
/// `costs` keeps the per-step safety costs so the cumulative discounted cost
/// and the z-trace can be reported without re-querying the cost model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentedState {
    pub seq: TokenSequence,
    pub safety: SafetyState,
    pub costs: Vec<f64>,
}

impl AugmentedState {
    pub fn new(prompt: Vec<TokenId>, spec: &CmdpSpec) -> Self {
        Self { seq: TokenSequence::new(prompt), safety: init_budget(spec), costs: Vec::new() }
    }

    pub fn discounted_cost(&self, gamma: f64) -> f64 {
        discounted_sum(&self.costs, gamma)
    }

    /// `z_0, z_1, ..., z_t` recomputed from the stored costs.
    pub fn z_trace(&self, spec: &CmdpSpec) -> Vec<f64> {
        let mut z = spec.budget_d;
        let mut trace = vec![z];
        for c in &self.costs {
            z = (z - c) / spec.gamma;
            trace.push(z);
        }
        trace
    }
}

pub fn augmented_transition<S: SafetyCostModel + ?Sized>(
    aug: &AugmentedState,
    token: TokenId,
    safety_model: &S,
    vocab: &Vocabulary,
    spec: &CmdpSpec,
) -> Result<AugmentedState> {
    let cost = eval_safety_cost(safety_model, &aug.seq, token, vocab)?;
    let seq = transition(&aug.seq, token, vocab, spec)?;
    let safety = advance_safety_state(aug.safety, cost, spec.gamma)?;
    let mut costs = aug.costs.clone();
    costs.push(cost);
    Ok(AugmentedState { seq, safety, costs })
}

/// Finite stand-in `n` for the infinite penalty.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReshapedCostParams {
    pub n: f64,
}

impl Default for ReshapedCostParams {
    fn default() -> Self {
        Self { n: 1e4 }
    }
}

impl ReshapedCostParams {
    /// `n` must strictly dominate every attainable `|gamma^T c_task|`.
    pub fn validate(&self, task_bound: f64) -> Result<()> {
        if !(self.n > task_bound) || !self.n.is_finite() {
            return Err(Error::Config(format!(
                "penalty n = {} does not dominate the task-cost bound {task_bound}",
                self.n
            )));
        }
        Ok(())
    }
}

/// `c_task` when the tracker is still positive at termination, `n` otherwise.
pub fn reshaped_task_cost<C: TaskCostModel + ?Sized>(
    aug: &AugmentedState,
    params: &ReshapedCostParams,
    task_model: &C,
) -> Result<f64> {
    let c = eval_task_cost(task_model, &aug.seq)?;
    Ok(if aug.safety.z > 0.0 { c } else { params.n })
}

/// Objective contribution of a finished trajectory: `gamma^L c_task` if safe,
/// `n` otherwise, where `L` is the realized number of generated tokens.
pub fn discounted_reshaped_cost<C: TaskCostModel + ?Sized>(
    aug: &AugmentedState,
    params: &ReshapedCostParams,
    task_model: &C,
    gamma: f64,
) -> Result<f64> {
    let c = eval_task_cost(task_model, &aug.seq)?;
    Ok(if aug.safety.z > 0.0 { gamma.powi(aug.seq.len() as i32) * c } else { params.n })
}

pub fn discounted_sum(costs: &[f64], gamma: f64) -> f64 {
    let mut acc = 0.0;
    let mut g = 1.0;
    for c in costs {
        acc += g * c;
        g *= gamma;
    }
    acc
}

/// Every discounted prefix sum stays within the budget (ties count as safe).
pub fn trajectory_satisfies_constraint(costs: &[f64], spec: &CmdpSpec) -> bool {
    let mut acc = 0.0;
    let mut g = 1.0;
    for c in costs {
        acc += g * c;
        g *= spec.gamma;
        if acc > spec.budget_d {
            return false;
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    struct Lex(Vec<f64>);
    impl SafetyCostModel for Lex {
        fn cost(&self, _: &TokenSequence, t: TokenId) -> f64 {
            self.0[t as usize]
        }
    }
    struct Flat(f64);
    impl TaskCostModel for Flat {
        fn terminal_cost(&self, _: &TokenSequence) -> f64 {
            self.0
        }
    }

    fn spec(gamma: f64, d: f64) -> CmdpSpec {
        CmdpSpec::new(gamma, d, 50).unwrap()
    }

    #[test]
    fn init_budget_uses_d() {
        assert_eq!(init_budget(&spec(0.999, 10.0)).z, 10.0);
        let s = init_budget(&spec(0.999, 0.0));
        assert_eq!(s.z, 0.0);
        assert!(!s.is_safe());
        assert_eq!(s.step_t, 0);
    }

    #[test]
    fn advance_examples() {
        let s = SafetyState { z: 10.0, step_t: 0 };
        let n = advance_safety_state(s, 0.0, 0.999).unwrap();
        assert_relative_eq!(n.z, 10.0 / 0.999, max_relative = 1e-15);
        assert_eq!(n.step_t, 1);
        let n = advance_safety_state(SafetyState { z: 5.0, step_t: 0 }, 5.0, 0.5).unwrap();
        assert_eq!(n.z, 0.0);
        let n = advance_safety_state(SafetyState { z: -1.0, step_t: 3 }, 0.0, 0.9).unwrap();
        assert_relative_eq!(n.z, -1.0 / 0.9);
        assert!(advance_safety_state(s, -0.1, 0.9).is_err());
        assert!(advance_safety_state(s, 1.0, 1.0).is_err());
    }

    #[test]
    fn augmented_transition_examples() {
        let v = Vocabulary::new(3, 2).unwrap();
        let sp = spec(0.5, 10.0);
        let zero = Lex(vec![0.0, 10.0, 0.0]);
        let mut a = AugmentedState::new(vec![0], &sp);
        for _ in 0..3 {
            a = augmented_transition(&a, 0, &zero, &v, &sp).unwrap();
        }
        assert_eq!(a.safety.z, 80.0);
        assert_eq!(a.safety.step_t, 3);

        let sp = spec(0.9, 10.0);
        let mut a = AugmentedState::new(vec![0], &sp);
        a = augmented_transition(&a, 1, &zero, &v, &sp).unwrap();
        assert_eq!(a.safety.z, 0.0);
        for _ in 0..4 {
            a = augmented_transition(&a, 0, &zero, &v, &sp).unwrap();
            assert!(a.safety.z <= 0.0);
        }
    }

    #[test]
    fn reshaped_cost_branches() {
        let p = ReshapedCostParams::default();
        let sp = spec(0.9, 10.0);
        let mut a = AugmentedState::new(vec![], &sp);
        assert!(reshaped_task_cost(&a, &p, &Flat(-6.15)).is_err());
        a.seq.terminated = true;
        a.safety.z = 2.0;
        assert_eq!(reshaped_task_cost(&a, &p, &Flat(-6.15)).unwrap(), -6.15);
        a.safety.z = -0.3;
        assert_eq!(reshaped_task_cost(&a, &p, &Flat(-6.15)).unwrap(), 1e4);
        a.safety.z = 0.0;
        assert_eq!(reshaped_task_cost(&a, &p, &Flat(-6.15)).unwrap(), 1e4);
    }

    #[test]
    fn penalty_must_dominate() {
        assert!(ReshapedCostParams { n: 5.0 }.validate(5.0).is_err());
        assert!(ReshapedCostParams { n: 5.1 }.validate(5.0).is_ok());
    }

    #[test]
    fn constraint_examples() {
        assert!(trajectory_satisfies_constraint(&[0.0, 0.0, 0.0], &spec(0.9, 10.0)));
        assert!(!trajectory_satisfies_constraint(&[11.0], &spec(0.999, 10.0)));
        assert!(trajectory_satisfies_constraint(&[10.0], &spec(0.999, 10.0)));
    }

    fn replay_z(costs: &[f64], sp: &CmdpSpec) -> Vec<f64> {
        let mut s = init_budget(sp);
        let mut out = vec![s.z];
        for &c in costs {
            s = advance_safety_state(s, c, sp.gamma).unwrap();
            out.push(s.z);
        }
        out
    }

    proptest! {
        #[test]
        fn z_sign_matches_prefix_sums(
            costs in prop::collection::vec(0.0f64..6.0, 1..12),
            gamma in 0.3f64..0.999,
            d in 0.0f64..15.0,
        ) {
            let sp = spec(gamma, d);
            let zs = replay_z(&costs, &sp);
            let mut partial = 0.0;
            for (t, &c) in costs.iter().enumerate() {
                partial += gamma.powi(t as i32) * c;
                let z = zs[t + 1];
                let slack = d - partial;
                if slack.abs() > 1e-9 * d.max(partial).max(1.0) {
                    prop_assert_eq!(z > 0.0, slack > 0.0);
                    prop_assert_eq!(z >= 0.0, slack >= 0.0);
                }
            }
        }

        #[test]
        fn unsafety_is_absorbing(
            costs in prop::collection::vec(0.0f64..4.0, 1..15),
            gamma in 0.3f64..0.99,
            d in 0.0f64..5.0,
        ) {
            let zs = replay_z(&costs, &spec(gamma, d));
            if let Some(first) = zs.iter().position(|&z| z <= 0.0) {
                prop_assert!(zs[first..].iter().all(|&z| z <= 0.0));
            }
        }

        #[test]
        fn constraint_check_agrees_with_tracker(
            costs in prop::collection::vec(0.0f64..5.0, 1..10),
            gamma in 0.5f64..0.999,
            d in 0.0f64..12.0,
        ) {
            let sp = spec(gamma, d);
            let z_final = *replay_z(&costs, &sp).last().unwrap();
            let total = discounted_sum(&costs, gamma);
            if (d - total).abs() > 1e-9 * d.max(1.0) {
                prop_assert_eq!(trajectory_satisfies_constraint(&costs, &sp), z_final >= 0.0);
                prop_assert_eq!(trajectory_satisfies_constraint(&costs, &sp), total <= d);
            }
        }
    }
}
