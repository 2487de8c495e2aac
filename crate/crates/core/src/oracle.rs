//! Exact solver for small finite augmented decision processes.
//!
//! Token transitions are deterministic, so the reachable state space is the
//! prefix tree of the prompt. Values are kept in absolute-time units: the
//! only nonzero step cost is paid on the edge that terminates a trajectory
//! and equals `gamma^L c_task` when the tracker is positive, `n` otherwise.
//! The Bellman operator on the tree is then
//! `(T v)(s) = min_y [ c(s, y) + v(s ⊕ y) ]`, with `v = 0` on terminal nodes.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::augment::{
    augmented_transition, discounted_sum, trajectory_satisfies_constraint, AugmentedState, ReshapedCostParams,
};
use crate::error::{Error, Result};
use crate::mdp::{
    eval_task_cost, softmax, CmdpSpec, GenerativeModel, LatentState, TaskCostModel, TokenId, TokenSequence, Vocabulary,
};
use crate::toy::{LexiconSafetyCost, TargetTaskCost, ToyModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FiniteAugmentedMDP {
    pub spec: CmdpSpec,
    pub model: ToyModel,
    pub safety: LexiconSafetyCost,
    pub task: TargetTaskCost,
    pub params: ReshapedCostParams,
    pub prompt: Vec<TokenId>,
    #[serde(default = "default_cap")]
    pub cap: u128,
}

fn default_cap() -> u128 {
    FiniteAugmentedMDP::DEFAULT_CAP
}

impl FiniteAugmentedMDP {
    pub const DEFAULT_CAP: u128 = 1_000_000;

    pub fn vocab(&self) -> &Vocabulary {
        self.model.vocab()
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if self.safety.weights.len() != self.vocab().size() {
            return Err(Error::Config("lexicon size differs from the vocabulary".into()));
        }
        for &t in self.prompt.iter().chain(&self.task.targets) {
            self.vocab().check(t)?;
        }
        self.params.validate(self.task.bound().unwrap_or(0.0))
    }

    /// `V^T`, the worst-case number of trajectories.
    pub fn trajectory_bound(&self) -> u128 {
        (self.vocab().size() as u128).saturating_pow(self.spec.max_len_t as u32)
    }

    fn check_size(&self) -> Result<()> {
        let needed = self.trajectory_bound();
        if needed > self.cap {
            return Err(Error::TooLarge { needed, cap: self.cap });
        }
        Ok(())
    }

    pub fn root(&self) -> AugmentedState {
        AugmentedState::new(self.prompt.clone(), &self.spec)
    }

    pub fn step(&self, aug: &AugmentedState, token: TokenId) -> Result<AugmentedState> {
        augmented_transition(aug, token, &self.safety, self.vocab(), &self.spec)
    }

    /// Objective contribution of a finished trajectory under penalty `n`.
    pub fn terminal_cost(&self, aug: &AugmentedState, n: f64) -> Result<f64> {
        let c = eval_task_cost(&self.task, &aug.seq)?;
        Ok(if aug.safety.z > 0.0 { self.spec.gamma.powi(aug.seq.len() as i32) * c } else { n })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let mdp: Self = serde_json::from_str(s)?;
        mdp.spec.validate()?;
        Ok(mdp)
    }
}

/// A (possibly stochastic) policy over augmented token states.
pub trait Policy {
    fn distribution(&self, mdp: &FiniteAugmentedMDP, aug: &AugmentedState, latent: &LatentState) -> Result<Vec<f64>>;
}

/// Raw `SoftMax` of the model logits.
pub struct ReferencePolicy;

impl Policy for ReferencePolicy {
    fn distribution(&self, mdp: &FiniteAugmentedMDP, _: &AugmentedState, latent: &LatentState) -> Result<Vec<f64>> {
        softmax(&mdp.model.logits(latent), 1.0)
    }
}

pub struct UniformPolicy;

impl Policy for UniformPolicy {
    fn distribution(&self, mdp: &FiniteAugmentedMDP, _: &AugmentedState, _: &LatentState) -> Result<Vec<f64>> {
        let v = mdp.vocab().size();
        Ok(vec![1.0 / v as f64; v])
    }
}

/// Deterministic policy keyed by generated-token history.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TablePolicy {
    pub actions: HashMap<Vec<TokenId>, TokenId>,
}

impl TablePolicy {
    pub fn action(&self, history: &[TokenId]) -> Option<TokenId> {
        self.actions.get(history).copied()
    }
}

impl Policy for TablePolicy {
    fn distribution(&self, mdp: &FiniteAugmentedMDP, aug: &AugmentedState, _: &LatentState) -> Result<Vec<f64>> {
        let a = self
            .action(&aug.seq.generated)
            .ok_or_else(|| Error::Contract(format!("policy undefined at history {:?}", aug.seq.generated)))?;
        let mut p = vec![0.0; mdp.vocab().size()];
        p[a as usize] = 1.0;
        Ok(p)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub tokens: Vec<TokenId>,
    pub probability: f64,
    pub task_cost: f64,
    pub discounted_task_cost: f64,
    pub discounted_safety_cost: f64,
    /// Objective contribution under the instance penalty.
    pub reshaped_cost: f64,
    pub z_final: f64,
    pub safe: bool,
}

/// Every positive-probability trajectory with its exact probability.
pub fn enumerate_trajectories<P: Policy + ?Sized>(
    mdp: &FiniteAugmentedMDP,
    policy: &P,
) -> Result<Vec<TrajectoryRecord>> {
    mdp.check_size()?;
    let mut out = Vec::new();
    let root = mdp.root();
    let latent = mdp.model.init(&mdp.prompt)?;
    let mut stack = vec![(root, latent, 1.0f64)];
    while let Some((aug, latent, prob)) = stack.pop() {
        if aug.seq.terminated {
            let task_cost = eval_task_cost(&mdp.task, &aug.seq)?;
            out.push(TrajectoryRecord {
                tokens: aug.seq.generated.clone(),
                probability: prob,
                task_cost,
                discounted_task_cost: mdp.spec.gamma.powi(aug.seq.len() as i32) * task_cost,
                discounted_safety_cost: discounted_sum(&aug.costs, mdp.spec.gamma),
                reshaped_cost: mdp.terminal_cost(&aug, mdp.params.n)?,
                z_final: aug.safety.z,
                safe: trajectory_satisfies_constraint(&aug.costs, &mdp.spec),
            });
            continue;
        }
        let dist = policy.distribution(mdp, &aug, &latent)?;
        // reversed so the stack pops tokens in ascending order
        for t in mdp.vocab().tokens().rev() {
            let p = dist[t as usize];
            if p <= 0.0 {
                continue;
            }
            let next = mdp.step(&aug, t)?;
            let next_latent = mdp.model.step(&latent, t)?;
            stack.push((next, next_latent, prob * p));
        }
    }
    Ok(out)
}

/// Expected objective of a policy, `E[reshaped cost]`.
pub fn policy_value<P: Policy + ?Sized>(mdp: &FiniteAugmentedMDP, policy: &P) -> Result<f64> {
    Ok(enumerate_trajectories(mdp, policy)?.iter().map(|r| r.probability * r.reshaped_cost).sum())
}

#[derive(Clone, Debug)]
struct Node {
    aug: AugmentedState,
    /// Child node per token, empty for terminal nodes.
    children: Vec<usize>,
    /// `gamma^L c_task` for terminal nodes.
    discounted_task: f64,
}

/// Every reachable history of an instance, parents before children.
#[derive(Clone, Debug)]
pub struct HistoryTree {
    nodes: Vec<Node>,
    index: HashMap<Vec<TokenId>, usize>,
}

impl HistoryTree {
    pub fn build(mdp: &FiniteAugmentedMDP) -> Result<Self> {
        mdp.check_size()?;
        let mut nodes = vec![Node { aug: mdp.root(), children: Vec::new(), discounted_task: 0.0 }];
        let mut i = 0;
        while i < nodes.len() {
            let aug = nodes[i].aug.clone();
            if aug.seq.terminated {
                nodes[i].discounted_task =
                    mdp.spec.gamma.powi(aug.seq.len() as i32) * eval_task_cost(&mdp.task, &aug.seq)?;
            } else {
                let mut children = Vec::with_capacity(mdp.vocab().size());
                for t in mdp.vocab().tokens() {
                    children.push(nodes.len());
                    nodes.push(Node { aug: mdp.step(&aug, t)?, children: Vec::new(), discounted_task: 0.0 });
                }
                nodes[i].children = children;
            }
            i += 1;
        }
        let index = nodes.iter().enumerate().map(|(i, n)| (n.aug.seq.generated.clone(), i)).collect();
        Ok(Self { nodes, index })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node_of(&self, history: &[TokenId]) -> Option<usize> {
        self.index.get(history).copied()
    }

    pub fn state(&self, node: usize) -> &AugmentedState {
        &self.nodes[node].aug
    }

    pub fn is_terminal(&self, node: usize) -> bool {
        self.nodes[node].children.is_empty()
    }

    /// `c(s, y)`: nonzero only on edges into terminal nodes.
    pub fn edge_cost(&self, node: usize, token: TokenId, n: f64) -> f64 {
        let child = &self.nodes[self.nodes[node].children[token as usize]];
        if child.children.is_empty() {
            if child.aug.safety.z > 0.0 {
                child.discounted_task
            } else {
                n
            }
        } else {
            0.0
        }
    }

    fn backup(&self, node: usize, values: &[f64], n: f64) -> (f64, TokenId) {
        let mut best = (f64::INFINITY, 0);
        for (t, &child) in self.nodes[node].children.iter().enumerate() {
            let q = self.edge_cost(node, t as TokenId, n) + values[child];
            // strict comparison keeps the lowest token id on ties
            if q < best.0 {
                best = (q, t as TokenId);
            }
        }
        best
    }

    /// Repeated Bellman sweeps from `v = 0` until the sup-norm change is at
    /// most `tol`; on a depth-`T` tree this is exact after `T + 1` sweeps.
    pub fn solve(&self, n: f64, tol: f64) -> ValueTable {
        let mut values = vec![0.0; self.nodes.len()];
        let mut iterations = 0;
        loop {
            iterations += 1;
            let mut next = vec![0.0; self.nodes.len()];
            let mut delta = 0.0f64;
            for i in 0..self.nodes.len() {
                if !self.is_terminal(i) {
                    next[i] = self.backup(i, &values, n).0;
                }
                delta = delta.max((next[i] - values[i]).abs());
            }
            values = next;
            if delta <= tol || iterations > self.depth() + 2 {
                break;
            }
        }
        let bellman_residual = (0..self.nodes.len())
            .filter(|&i| !self.is_terminal(i))
            .map(|i| (self.backup(i, &values, n).0 - values[i]).abs())
            .fold(0.0, f64::max);
        ValueTable { tree: self.clone(), values, penalty: n, bellman_residual, iterations }
    }

    fn depth(&self) -> usize {
        self.nodes.iter().map(|n| n.aug.seq.len()).max().unwrap_or(0)
    }
}

#[derive(Clone, Debug)]
pub struct ValueTable {
    tree: HistoryTree,
    values: Vec<f64>,
    pub penalty: f64,
    pub bellman_residual: f64,
    pub iterations: usize,
}

impl ValueTable {
    pub fn root_value(&self) -> f64 {
        self.values[0]
    }

    pub fn value(&self, history: &[TokenId]) -> Option<f64> {
        self.tree.node_of(history).map(|i| self.values[i])
    }

    pub fn tree(&self) -> &HistoryTree {
        &self.tree
    }

    /// Largest `|v(s) - (T v)(s)|` recomputed at each node, for callers that
    /// want the per-node check.
    pub fn residuals(&self) -> Vec<f64> {
        (0..self.tree.len())
            .map(|i| {
                if self.tree.is_terminal(i) {
                    self.values[i].abs()
                } else {
                    (self.tree.backup(i, &self.values, self.penalty).0 - self.values[i]).abs()
                }
            })
            .collect()
    }

    pub fn greedy_action(&self, history: &[TokenId]) -> Option<TokenId> {
        let i = self.tree.node_of(history)?;
        (!self.tree.is_terminal(i)).then(|| self.tree.backup(i, &self.values, self.penalty).1)
    }
}

pub fn solve_value_iteration(mdp: &FiniteAugmentedMDP, tol: f64) -> Result<ValueTable> {
    Ok(HistoryTree::build(mdp)?.solve(mdp.params.n, tol))
}

/// Greedy policy with respect to the solved values, lowest token on ties.
pub fn optimal_policy(values: &ValueTable) -> TablePolicy {
    let tree = &values.tree;
    let actions = (0..tree.len())
        .filter(|&i| !tree.is_terminal(i))
        .map(|i| (tree.nodes[i].aug.seq.generated.clone(), tree.backup(i, &values.values, values.penalty).1))
        .collect();
    TablePolicy { actions }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonotoneRow {
    pub instance: usize,
    pub feasible: bool,
    pub task_bound: f64,
    pub root_values: Vec<f64>,
    pub nondecreasing: bool,
    /// `None` when the instance has no safe trajectory.
    pub constant_after_bound: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonotoneReport {
    pub n_sequence: Vec<f64>,
    pub rows: Vec<MonotoneRow>,
    pub max_residual: f64,
    /// Serialized instances that broke a property, replayable as-is.
    pub violations: Vec<String>,
}

impl MonotoneReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Solves each instance for every penalty in `n_sequence` and checks that the
/// root value is nondecreasing in `n`, and constant once `n` exceeds the
/// task-cost bound on instances with a safe trajectory.
pub fn verify_monotone_convergence(
    instances: &[FiniteAugmentedMDP],
    n_sequence: &[f64],
    tol: f64,
) -> Result<MonotoneReport> {
    if n_sequence.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Input("penalty sequence must be strictly increasing".into()));
    }
    let mut rows = Vec::with_capacity(instances.len());
    let mut violations = Vec::new();
    let mut max_residual = 0.0f64;
    for (k, mdp) in instances.iter().enumerate() {
        let tree = HistoryTree::build(mdp)?;
        let feasible = (0..tree.len()).any(|i| tree.is_terminal(i) && tree.state(i).safety.z > 0.0);
        let bound = mdp.task.bound().unwrap_or(f64::INFINITY);
        let mut root_values = Vec::with_capacity(n_sequence.len());
        for &n in n_sequence {
            let table = tree.solve(n, tol);
            max_residual = max_residual.max(table.bellman_residual);
            root_values.push(table.root_value());
        }
        let nondecreasing = root_values.windows(2).all(|w| w[1] >= w[0]);
        let constant_after_bound = feasible.then(|| {
            let dominated: Vec<f64> =
                n_sequence.iter().zip(&root_values).filter(|(n, _)| **n > bound).map(|(_, v)| *v).collect();
            dominated.windows(2).all(|w| w[0] == w[1])
        });
        if !nondecreasing || constant_after_bound == Some(false) {
            violations.push(mdp.to_json()?);
        }
        rows.push(MonotoneRow {
            instance: k,
            feasible,
            task_bound: bound,
            root_values,
            nondecreasing,
            constant_after_bound,
        });
    }
    Ok(MonotoneReport { n_sequence: n_sequence.to_vec(), rows, max_residual, violations })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SafetyVerdict {
    pub all_safe: bool,
    pub value: f64,
    /// `value < n` implies `all_safe`.
    pub implication_holds: bool,
    pub trajectories: usize,
}

pub fn verify_almost_sure_safety<P: Policy + ?Sized>(mdp: &FiniteAugmentedMDP, policy: &P) -> Result<SafetyVerdict> {
    let records = enumerate_trajectories(mdp, policy)?;
    let all_safe = records.iter().all(|r| r.safe);
    let value: f64 = records.iter().map(|r| r.probability * r.reshaped_cost).sum();
    Ok(SafetyVerdict {
        all_safe,
        value,
        implication_holds: !(value < mdp.params.n) || all_safe,
        trajectories: records.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub equivalent: bool,
    pub nodes_checked: usize,
    pub latent_states: usize,
    pub counterexample: Option<String>,
}

type LatentKey = (Vec<u64>, u64);

/// Checks that costs, transitions, values and the greedy policy are all
/// well defined on the embedded states `(phi(s), z)`, and that the greedy
/// policy computed there matches the one computed on token histories.
pub fn verify_latent_equivalence<F>(mdp: &FiniteAugmentedMDP, phi: F, tol: f64) -> Result<EquivalenceReport>
where
    F: Fn(&TokenSequence) -> Result<LatentState>,
{
    let tree = HistoryTree::build(mdp)?;
    let n = mdp.params.n;
    let token_values = tree.solve(n, tol);
    let keys: Vec<LatentKey> = tree
        .nodes
        .iter()
        .map(|node| Ok((phi(&node.aug.seq)?.key(), node.aug.safety.z.to_bits())))
        .collect::<Result<_>>()?;

    let fail = |msg: String| EquivalenceReport {
        equivalent: false,
        nodes_checked: tree.len(),
        latent_states: 0,
        counterexample: Some(msg),
    };

    // (node, terminal?, per-token (cost, successor)) for each embedded state
    type Row<'a> = (usize, bool, Vec<(f64, &'a LatentKey)>);
    let mut table: HashMap<&LatentKey, Row> = HashMap::new();
    for (i, node) in tree.nodes.iter().enumerate() {
        let row: Vec<(f64, &LatentKey)> =
            node.children.iter().enumerate().map(|(t, &c)| (tree.edge_cost(i, t as TokenId, n), &keys[c])).collect();
        let terminal = node.children.is_empty();
        match table.get(&keys[i]) {
            None => {
                table.insert(&keys[i], (i, terminal, row));
            }
            Some((j, term_j, row_j)) => {
                let same = *term_j == terminal
                    && row_j.len() == row.len()
                    && row_j.iter().zip(&row).all(|(a, b)| a.0.to_bits() == b.0.to_bits() && a.1 == b.1);
                if !same {
                    return Ok(fail(format!(
                        "histories {:?} and {:?} share an embedded state but differ in cost or transition",
                        tree.nodes[*j].aug.seq.generated, node.aug.seq.generated
                    )));
                }
            }
        }
    }

    // latent values; children appear after parents, so a reverse sweep sees
    // every successor before its predecessors
    let mut latent_values: HashMap<&LatentKey, f64> = HashMap::new();
    let mut latent_greedy: HashMap<&LatentKey, TokenId> = HashMap::new();
    for i in (0..tree.len()).rev() {
        let key = &keys[i];
        if latent_values.contains_key(key) {
            continue;
        }
        let (_, terminal, row) = &table[key];
        if *terminal {
            latent_values.insert(key, 0.0);
            continue;
        }
        let mut best = (f64::INFINITY, 0);
        for (t, (c, succ)) in row.iter().enumerate() {
            let q = c + latent_values[*succ];
            if q < best.0 {
                best = (q, t as TokenId);
            }
        }
        latent_values.insert(key, best.0);
        latent_greedy.insert(key, best.1);
    }

    for (i, node) in tree.nodes.iter().enumerate() {
        let lv = latent_values[&keys[i]];
        if (lv - token_values.values[i]).abs() > tol {
            return Ok(fail(format!(
                "history {:?}: latent value {lv} != token value {}",
                node.aug.seq.generated, token_values.values[i]
            )));
        }
        if !node.children.is_empty() {
            let token_action = tree.backup(i, &token_values.values, n).1;
            let latent_action = latent_greedy[&keys[i]];
            if token_action != latent_action {
                return Ok(fail(format!(
                    "history {:?}: latent greedy picks {latent_action}, token greedy picks {token_action}",
                    node.aug.seq.generated
                )));
            }
        }
    }
    Ok(EquivalenceReport {
        equivalent: true,
        nodes_checked: tree.len(),
        latent_states: table.len(),
        counterexample: None,
    })
}

/// The model's own embedding: replay of the token sequence.
pub fn model_phi(mdp: &FiniteAugmentedMDP) -> impl Fn(&TokenSequence) -> Result<LatentState> + '_ {
    move |seq| mdp.model.replay(seq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::{make_instance, InstanceParams, NGramModel};

    fn flat_instance(v: usize, t: usize, safety: Vec<f64>, reward: f64, lp: f64, d: f64) -> FiniteAugmentedMDP {
        let vocab = Vocabulary::new(v, (v - 1) as TokenId).unwrap();
        let table = vec![vec![0.0; v]; v + 1];
        FiniteAugmentedMDP {
            spec: CmdpSpec::new(0.9, d, t).unwrap(),
            model: ToyModel::NGram(NGramModel::new(vocab, 2, 16, table).unwrap()),
            safety: LexiconSafetyCost::new(safety, false).unwrap(),
            task: TargetTaskCost { targets: vec![0], reward, length_penalty: lp, max_len: t },
            params: ReshapedCostParams::default(),
            prompt: vec![0],
            cap: FiniteAugmentedMDP::DEFAULT_CAP,
        }
    }

    #[test]
    fn uniform_enumeration_counts() {
        // EOS truncates: 1 + 2 + 2*2*3 trajectories
        let mdp = flat_instance(3, 3, vec![0.0; 3], 1.0, 0.0, 10.0);
        let recs = enumerate_trajectories(&mdp, &UniformPolicy).unwrap();
        assert_eq!(recs.len(), 1 + 2 + 12);
        let total: f64 = recs.iter().map(|r| r.probability).sum();
        assert!((total - 1.0).abs() < 1e-12);
        let full: Vec<_> = recs.iter().filter(|r| r.tokens.len() == 3).collect();
        assert!(full.iter().all(|r| (r.probability - 1.0 / 27.0).abs() < 1e-15));
    }

    #[test]
    fn deterministic_policy_yields_one_trajectory() {
        let mdp = flat_instance(3, 4, vec![0.0; 3], 1.0, 0.0, 10.0);
        let table = solve_value_iteration(&mdp, 1e-12).unwrap();
        let recs = enumerate_trajectories(&mdp, &optimal_policy(&table)).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].probability, 1.0);
    }

    #[test]
    fn enumeration_respects_cap() {
        let mut mdp = flat_instance(5, 6, vec![0.0; 5], 1.0, 0.0, 10.0);
        mdp.cap = 100;
        assert!(matches!(enumerate_trajectories(&mdp, &UniformPolicy), Err(Error::TooLarge { .. })));
    }

    #[test]
    fn constant_cost_tree() {
        // every generated token is a "target" with negative reward, so the
        // task cost is the constant 2 and the longest trajectory is cheapest
        let mut mdp = flat_instance(3, 4, vec![0.0; 3], -2.0, 0.0, 10.0);
        mdp.task.targets = vec![0, 1, 2];
        mdp.params.n = 1e4;
        let t = solve_value_iteration(&mdp, 1e-12).unwrap();
        assert!((t.root_value() - 0.9f64.powi(4) * 2.0).abs() < 1e-12);
    }

    #[test]
    fn all_unsafe_tree_costs_n() {
        let mdp = flat_instance(3, 3, vec![20.0; 3], 1.0, 0.0, 10.0);
        let t = solve_value_iteration(&mdp, 1e-12).unwrap();
        assert_eq!(t.root_value(), 1e4);
        let p = optimal_policy(&t);
        assert!(p.actions.values().all(|&a| a == 0));
        let verdict = verify_almost_sure_safety(&mdp, &p).unwrap();
        assert!(!verdict.all_safe);
        assert_eq!(verdict.value, 1e4);
        assert!(verdict.implication_holds);
    }

    #[test]
    fn single_safe_path_is_followed() {
        // only token 1 is safe and target; EOS costs too much; horizon 2
        let mut mdp = flat_instance(3, 2, vec![20.0, 0.0, 20.0], 3.0, 0.0, 10.0);
        mdp.task.targets = vec![1];
        let t = solve_value_iteration(&mdp, 1e-12).unwrap();
        let p = optimal_policy(&t);
        let recs = enumerate_trajectories(&mdp, &p).unwrap();
        assert_eq!(recs[0].tokens, vec![1, 1]);
        assert!((t.root_value() - (-3.0 * 0.81)).abs() < 1e-12);
    }

    #[test]
    fn root_value_matches_brute_force_min() {
        for seed in 0..40 {
            let mdp =
                make_instance(seed, &InstanceParams { max_vocab: 3, max_horizon: 4, ..Default::default() }).unwrap();
            let table = solve_value_iteration(&mdp, 1e-12).unwrap();
            let recs = enumerate_trajectories(&mdp, &UniformPolicy).unwrap();
            let brute = recs.iter().map(|r| r.reshaped_cost).fold(f64::INFINITY, f64::min);
            assert!((table.root_value() - brute).abs() <= 1e-9, "seed {seed}");
            assert!(table.bellman_residual <= 1e-9);
            assert!(table.residuals().iter().all(|&r| r <= 1e-9));
            let pv = policy_value(&mdp, &optimal_policy(&table)).unwrap();
            assert!((pv - table.root_value()).abs() <= 1e-9);
        }
    }

    #[test]
    fn probabilities_sum_to_one_under_reference_policy() {
        for seed in 0..50 {
            let mdp = make_instance(seed, &InstanceParams::default()).unwrap();
            let total: f64 =
                enumerate_trajectories(&mdp, &ReferencePolicy).unwrap().iter().map(|r| r.probability).sum();
            assert!((total - 1.0).abs() < 1e-9, "seed {seed}: {total}");
        }
    }

    #[test]
    fn uniform_policy_with_unsafe_token_is_not_all_safe() {
        let mdp = flat_instance(3, 3, vec![0.0, 20.0, 0.0], 1.0, 0.0, 10.0);
        let verdict = verify_almost_sure_safety(&mdp, &UniformPolicy).unwrap();
        assert!(!verdict.all_safe);
        let opt = optimal_policy(&solve_value_iteration(&mdp, 1e-12).unwrap());
        let verdict = verify_almost_sure_safety(&mdp, &opt).unwrap();
        assert!(verdict.all_safe && verdict.value < mdp.params.n);
    }

    #[test]
    fn monotone_in_penalty() {
        let mdp = flat_instance(3, 3, vec![0.0, 20.0, 0.0], 1.0, 0.1, 10.0);
        let all_safe = flat_instance(3, 3, vec![0.0; 3], 1.0, 0.1, 10.0);
        let report = verify_monotone_convergence(&[mdp, all_safe], &[1.0, 10.0, 100.0, 1000.0], 1e-12).unwrap();
        assert!(report.passed());
        let safe_row = &report.rows[1];
        assert!(safe_row.root_values.windows(2).all(|w| w[0] == w[1]));
        assert!(verify_monotone_convergence(&[], &[2.0, 1.0], 1e-9).is_err());
    }

    #[test]
    fn latent_equivalence_holds_and_lossy_map_fails() {
        let mdp = make_instance(3, &InstanceParams::default()).unwrap();
        let ok = verify_latent_equivalence(&mdp, model_phi(&mdp), 1e-12).unwrap();
        assert!(ok.equivalent, "{:?}", ok.counterexample);
        let lossy = |seq: &TokenSequence| {
            let mut s = seq.clone();
            s.generated.pop();
            s.terminated = false;
            mdp.model.replay(&s)
        };
        let bad = verify_latent_equivalence(&mdp, lossy, 1e-12).unwrap();
        assert!(!bad.equivalent);
        assert!(bad.counterexample.is_some());
    }

    #[test]
    fn single_step_empty_prompt() {
        let mut mdp = flat_instance(3, 1, vec![0.0, 1.0, 0.0], 1.0, 0.0, 10.0);
        mdp.prompt.clear();
        let rep = verify_latent_equivalence(&mdp, model_phi(&mdp), 1e-12).unwrap();
        assert!(rep.equivalent);
    }

    #[test]
    fn instance_json_round_trip_is_exact() {
        let mdp = make_instance(5, &InstanceParams::default()).unwrap();
        let json = mdp.to_json().unwrap();
        let back = FiniteAugmentedMDP::from_json(&json).unwrap();
        assert_eq!(back, mdp);
        assert_eq!(back.to_json().unwrap(), json);
    }
}
