//! Blockwise lookahead search over the augmented decision process.
//!
//! Each block samples `N` continuations of `block_len` tokens from the current
//! beams, scores them, and keeps the best `K`. If no fresh candidate escapes
//! the penalty `n`, the block is retried (up to `M` rounds) with the tokens
//! already tried at each in-block position pushed down by `n2` in logit space.

use serde::{Deserialize, Serialize};

use crate::augment::{augmented_transition, trajectory_satisfies_constraint, AugmentedState, ReshapedCostParams};
use crate::critic::CriticNet;
use crate::error::{Error, Result};
use crate::mdp::{
    check_logits, sample_token, CmdpSpec, GenerativeModel, LatentState, SafetyCostModel, TaskCostModel, TokenId,
    TokenSequence,
};
use crate::rng::stream;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    /// Direct intermediate cost queries.
    #[default]
    Inter,
    /// Critic only, for costs that exist only on complete responses.
    Critic,
    /// Intermediate costs plus the critic's cost estimate, critic as filter.
    Mix,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Expansion {
    /// Sample continuations from the (penalized) reference model.
    #[default]
    Sampled,
    /// Enumerate every continuation of every parent; for exactness tests on
    /// tiny vocabularies.
    Exhaustive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    pub num_beams_n: usize,
    pub block_len: usize,
    pub max_depth_d: usize,
    pub top_k: usize,
    pub max_retry_m: usize,
    pub penalty_n: f64,
    pub diversity_n2: f64,
    pub eta: f64,
    pub score_kind: ScoreKind,
    pub expansion: Expansion,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            num_beams_n: 128,
            block_len: 32,
            max_depth_d: 128,
            top_k: 32,
            max_retry_m: 2,
            penalty_n: 1e4,
            diversity_n2: 1e3,
            eta: 1.0,
            score_kind: ScoreKind::Inter,
            expansion: Expansion::Sampled,
            temperature: 1.0,
            seed: 0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.num_beams_n == 0 || self.block_len == 0 || self.max_depth_d == 0 || self.max_retry_m == 0 {
            return bad("N, block length, max depth and retries must all be positive");
        }
        if self.top_k == 0 || self.top_k > self.num_beams_n {
            return bad("top_k must lie in [1, N]");
        }
        if !(self.diversity_n2 > 0.0) {
            return bad("diversity penalty n2 must be positive");
        }
        if !(self.penalty_n.is_finite()) || !(self.temperature > 0.0) {
            return bad("penalty n must be finite and temperature positive");
        }
        Ok(())
    }

    pub fn params(&self) -> ReshapedCostParams {
        ReshapedCostParams { n: self.penalty_n }
    }

    pub fn blocks(&self) -> usize {
        self.max_depth_d.div_ceil(self.block_len)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Beam {
    pub aug: AugmentedState,
    pub latent: LatentState,
    pub score: f64,
    pub complete: bool,
}

impl Beam {
    pub fn root<M: GenerativeModel + ?Sized>(model: &M, prompt: &[TokenId], spec: &CmdpSpec) -> Result<Self> {
        Ok(Self {
            aug: AugmentedState::new(prompt.to_vec(), spec),
            latent: model.init(prompt)?,
            score: 0.0,
            complete: false,
        })
    }

    pub fn len(&self) -> usize {
        self.aug.seq.len()
    }

    pub fn is_empty(&self) -> bool {
        self.aug.seq.is_empty()
    }
}

/// Token counts per in-block position, from rounds that produced no safe
/// candidate. Positions are 0-based.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrequencyMatrix {
    counts: Vec<Vec<u32>>,
}

impl FrequencyMatrix {
    pub fn new(block_len: usize, vocab_size: usize) -> Self {
        Self { counts: vec![vec![0; vocab_size]; block_len] }
    }

    pub fn get(&self, pos: usize, token: TokenId) -> u32 {
        self.counts[pos][token as usize]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().map(|&c| c as u64).sum()
    }

    pub fn is_zero(&self) -> bool {
        self.counts.iter().flatten().all(|&c| c == 0)
    }

    pub fn block_len(&self) -> usize {
        self.counts.len()
    }

    /// `(position, token)` pairs with a positive count.
    pub fn support(&self) -> Vec<(usize, TokenId)> {
        let mut out = Vec::new();
        for (i, row) in self.counts.iter().enumerate() {
            for (j, &c) in row.iter().enumerate() {
                if c > 0 {
                    out.push((i, j as TokenId));
                }
            }
        }
        out
    }
}

/// `F[i][j] += 1` for each occurrence of token `j` at in-block position `i`.
pub fn update_frequency(f: &mut FrequencyMatrix, blocks: &[Vec<TokenId>]) -> Result<()> {
    for block in blocks {
        if block.len() > f.block_len() {
            return Err(Error::Input(format!(
                "block of {} tokens exceeds block length {}",
                block.len(),
                f.block_len()
            )));
        }
        for (i, &t) in block.iter().enumerate() {
            let row = &mut f.counts[i];
            let vocab_size = row.len();
            let slot = row.get_mut(t as usize).ok_or(Error::TokenOutOfRange { token: t, vocab_size })?;
            *slot += 1;
        }
    }
    Ok(())
}

/// Subtracts `n2` from every logit whose token was already seen at `pos`.
/// The penalty is an indicator: counts above one do not scale it.
pub fn penalized_logits(logits: &[f64], f: &FrequencyMatrix, pos: usize, n2: f64) -> Result<Vec<f64>> {
    let row =
        f.counts.get(pos).ok_or_else(|| Error::Input(format!("position {pos} outside block of {}", f.block_len())))?;
    if row.len() != logits.len() {
        return Err(Error::Input("frequency matrix and logits disagree on vocabulary size".into()));
    }
    Ok(logits.iter().zip(row).map(|(&l, &c)| if c > 0 { l - n2 } else { l }).collect())
}

fn discount(gamma: f64, beam: &Beam) -> f64 {
    gamma.powi(beam.len() as i32)
}

fn task_term<C: TaskCostModel + ?Sized>(beam: &Beam, task: &C, gamma: f64) -> f64 {
    let c = if beam.complete { task.terminal_cost(&beam.aug.seq) } else { task.partial_cost(&beam.aug.seq) };
    discount(gamma, beam) * c
}

/// `gamma^t c_task` at the beam frontier when the tracker is positive, else `n`.
pub fn score_inter<C: TaskCostModel + ?Sized>(beam: &Beam, params: &ReshapedCostParams, task: &C, gamma: f64) -> f64 {
    if beam.aug.safety.z > 0.0 {
        task_term(beam, task, gamma)
    } else {
        params.n
    }
}

/// Terminal beams are scored exactly; intermediate beams take the critic's
/// cost estimate when it predicts safety with probability above one half.
pub fn score_critic<C: TaskCostModel + ?Sized>(
    beam: &Beam,
    critic: &CriticNet,
    params: &ReshapedCostParams,
    task: &C,
    gamma: f64,
) -> Result<f64> {
    if beam.complete {
        return Ok(score_inter(beam, params, task, gamma));
    }
    let (p_safe, cost) = critic.forward(&beam.latent.h, &beam.latent.o, beam.aug.safety.z)?;
    Ok(if p_safe > 0.5 { cost } else { params.n })
}

/// Like [`score_critic`], but intermediate beams combine the direct cost
/// query with `eta` times the critic estimate, and need both a positive
/// tracker and a confident safety head.
pub fn score_mix<C: TaskCostModel + ?Sized>(
    beam: &Beam,
    critic: &CriticNet,
    params: &ReshapedCostParams,
    eta: f64,
    task: &C,
    gamma: f64,
) -> Result<f64> {
    if beam.complete {
        return Ok(score_inter(beam, params, task, gamma));
    }
    let (p_safe, cost) = critic.forward(&beam.latent.h, &beam.latent.o, beam.aug.safety.z)?;
    Ok(if p_safe > 0.5 && beam.aug.safety.z > 0.0 { task_term(beam, task, gamma) + eta * cost } else { params.n })
}

/// Scores candidate beams; lower is better.
pub trait BeamScorer: Sync {
    fn score(&self, beam: &Beam) -> Result<f64>;

    /// Value marking a candidate as unsafe, used by the retry rule.
    fn unsafe_marker(&self) -> f64;
}

/// The three augmented scoring rules behind one interface.
pub struct AugmentedScorer<'a, C: ?Sized> {
    pub kind: ScoreKind,
    pub params: ReshapedCostParams,
    pub task: &'a C,
    pub critic: Option<&'a CriticNet>,
    pub eta: f64,
    pub gamma: f64,
}

impl<'a, C: TaskCostModel + ?Sized> AugmentedScorer<'a, C> {
    pub fn new(config: &SearchConfig, task: &'a C, critic: Option<&'a CriticNet>, gamma: f64) -> Result<Self> {
        if matches!(config.score_kind, ScoreKind::Critic | ScoreKind::Mix) && critic.is_none() {
            return Err(Error::Config(format!("score kind {:?} needs a trained critic", config.score_kind)));
        }
        Ok(Self { kind: config.score_kind, params: config.params(), task, critic, eta: config.eta, gamma })
    }
}

impl<C: TaskCostModel + ?Sized> BeamScorer for AugmentedScorer<'_, C> {
    fn score(&self, beam: &Beam) -> Result<f64> {
        match self.kind {
            ScoreKind::Inter => Ok(score_inter(beam, &self.params, self.task, self.gamma)),
            ScoreKind::Critic => score_critic(beam, self.critic.unwrap(), &self.params, self.task, self.gamma),
            ScoreKind::Mix => score_mix(beam, self.critic.unwrap(), &self.params, self.eta, self.task, self.gamma),
        }
    }

    fn unsafe_marker(&self) -> f64 {
        self.params.n
    }
}

/// A continuation together with the tokens it added in this block.
#[derive(Clone, Debug)]
pub struct Candidate {
    pub beam: Beam,
    pub block: Vec<TokenId>,
}

pub struct SearchEngine<'a, M: ?Sized, S: ?Sized> {
    pub model: &'a M,
    pub safety: &'a S,
    pub spec: CmdpSpec,
    pub config: SearchConfig,
}

pub(crate) fn advance<M, S>(model: &M, safety: &S, spec: &CmdpSpec, beam: &Beam, token: TokenId) -> Result<Beam>
where
    M: GenerativeModel + ?Sized,
    S: SafetyCostModel + ?Sized,
{
    let aug = augmented_transition(&beam.aug, token, safety, model.vocab(), spec)?;
    let latent = model.step(&beam.latent, token)?;
    let complete = aug.seq.terminated;
    Ok(Beam { aug, latent, score: 0.0, complete })
}

fn beam_order(a: &Beam, b: &Beam) -> std::cmp::Ordering {
    a.score.total_cmp(&b.score).then_with(|| a.aug.seq.generated.cmp(&b.aug.seq.generated))
}

impl<'a, M, S> SearchEngine<'a, M, S>
where
    M: GenerativeModel + ?Sized,
    S: SafetyCostModel + ?Sized,
{
    pub fn new(model: &'a M, safety: &'a S, spec: CmdpSpec, config: SearchConfig) -> Result<Self> {
        spec.validate()?;
        config.validate()?;
        Ok(Self { model, safety, spec, config })
    }

    /// `N` continuations of up to `block_len` tokens, parents assigned
    /// round-robin (best parents first). Each continuation draws from its
    /// own stream keyed by `(block, round, index)`.
    pub fn expand(&self, parents: &[Beam], f: &FrequencyMatrix, block: usize, round: usize) -> Result<Vec<Candidate>> {
        let live: Vec<&Beam> = parents.iter().filter(|b| !b.complete).collect();
        if live.is_empty() {
            log::warn!("expand called with only complete parents");
            return Ok(Vec::new());
        }
        match self.config.expansion {
            Expansion::Sampled => (0..self.config.num_beams_n)
                .map(|i| {
                    let mut rng = stream(self.config.seed, &[block as u64, round as u64, i as u64]);
                    let mut beam = live[i % live.len()].clone();
                    let mut tokens = Vec::with_capacity(self.config.block_len);
                    for pos in 0..self.config.block_len {
                        if beam.complete {
                            break;
                        }
                        let logits = self.model.logits(&beam.latent);
                        check_logits(&logits, self.model.vocab())?;
                        let logits = if f.is_zero() {
                            logits
                        } else {
                            penalized_logits(&logits, f, pos, self.config.diversity_n2)?
                        };
                        let t = sample_token(&logits, self.config.temperature, &mut rng)?;
                        beam = advance(self.model, self.safety, &self.spec, &beam, t)?;
                        tokens.push(t);
                    }
                    Ok(Candidate { beam, block: tokens })
                })
                .collect(),
            Expansion::Exhaustive => {
                let mut out = Vec::new();
                for parent in live {
                    let before = out.len();
                    self.enumerate_block(parent.clone(), Vec::new(), &mut out)?;
                    if out.len() - before > self.config.num_beams_n {
                        return Err(Error::Config(format!(
                            "exhaustive expansion needs N >= {} continuations per parent",
                            out.len() - before
                        )));
                    }
                }
                Ok(out)
            }
        }
    }

    fn enumerate_block(&self, beam: Beam, tokens: Vec<TokenId>, out: &mut Vec<Candidate>) -> Result<()> {
        if beam.complete || tokens.len() == self.config.block_len {
            out.push(Candidate { beam, block: tokens });
            return Ok(());
        }
        for t in self.model.vocab().tokens() {
            let next = advance(self.model, self.safety, &self.spec, &beam, t)?;
            let mut block = tokens.clone();
            block.push(t);
            self.enumerate_block(next, block, out)?;
        }
        Ok(())
    }

    /// Runs the full block/retry loop for one prompt.
    pub fn run<B: BeamScorer + ?Sized>(&self, prompt: &[TokenId], scorer: &B) -> Result<SearchOutcome> {
        for &t in prompt {
            self.model.vocab().check(t)?;
        }
        let mut beams = vec![Beam::root(self.model, prompt, &self.spec)?];
        let mut rounds_used = Vec::new();
        let mut penalized = 0usize;
        let mut evaluated = 0usize;
        let marker = scorer.unsafe_marker();
        for block in 0..self.config.blocks() {
            if beams.iter().all(|b| b.complete) {
                break;
            }
            let mut f = FrequencyMatrix::new(self.config.block_len, self.model.vocab().size());
            let carried: Vec<Beam> = beams.iter().filter(|b| b.complete).cloned().collect();
            let mut pool = Vec::new();
            for round in 0..self.config.max_retry_m {
                let mut fresh = self.expand(&beams, &f, block, round)?;
                for c in &mut fresh {
                    c.beam.score = scorer.score(&c.beam)?;
                }
                evaluated += fresh.len();
                let n_unsafe = fresh.iter().filter(|c| c.beam.score >= marker).count();
                penalized += n_unsafe;
                let found_safe = n_unsafe < fresh.len();
                let last = round + 1 == self.config.max_retry_m;
                if found_safe || last {
                    rounds_used.push(round + 1);
                    pool = fresh.into_iter().map(|c| c.beam).collect();
                    break;
                }
                let blocks: Vec<Vec<TokenId>> = fresh.into_iter().map(|c| c.block).collect();
                update_frequency(&mut f, &blocks)?;
            }
            pool.extend(carried);
            pool.sort_by(beam_order);
            pool.truncate(self.config.top_k);
            beams = pool;
        }
        let best = beams
            .iter()
            .filter(|b| b.complete)
            .min_by(|a, b| beam_order(a, b))
            .or_else(|| beams.iter().min_by(|a, b| beam_order(a, b)))
            .cloned()
            .ok_or_else(|| Error::Contract("search ended with no beams".into()))?;
        Ok(SearchOutcome::new(best, &self.spec, rounds_used, penalized, evaluated))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub sequence: TokenSequence,
    pub score: f64,
    /// `false` when no trajectory terminated within the depth budget.
    pub complete: bool,
    pub z_trace: Vec<f64>,
    pub final_z: f64,
    pub discounted_safety_cost: f64,
    pub safe: bool,
    pub rounds_used: Vec<usize>,
    pub beams_penalized: usize,
    pub candidates_evaluated: usize,
}

impl SearchOutcome {
    pub(crate) fn new(
        best: Beam,
        spec: &CmdpSpec,
        rounds_used: Vec<usize>,
        penalized: usize,
        evaluated: usize,
    ) -> Self {
        Self {
            z_trace: best.aug.z_trace(spec),
            final_z: best.aug.safety.z,
            discounted_safety_cost: best.aug.discounted_cost(spec.gamma),
            safe: trajectory_satisfies_constraint(&best.aug.costs, spec),
            sequence: best.aug.seq,
            score: best.score,
            complete: best.complete,
            rounds_used,
            beams_penalized: penalized,
            candidates_evaluated: evaluated,
        }
    }
}

/// Guarded search with the scoring rule chosen by `config.score_kind`.
pub fn inference_guard<M, S, C>(
    prompt: &[TokenId],
    config: &SearchConfig,
    spec: &CmdpSpec,
    model: &M,
    safety: &S,
    task: &C,
    critic: Option<&CriticNet>,
) -> Result<SearchOutcome>
where
    M: GenerativeModel + ?Sized,
    S: SafetyCostModel + ?Sized,
    C: TaskCostModel + ?Sized,
{
    let scorer = AugmentedScorer::new(config, task, critic, spec.gamma)?;
    if let Some(c) = critic {
        let l = model.init(prompt)?;
        if l.h.len() + l.o.len() + 1 != c.input_dim {
            return Err(Error::Config("critic input size does not match the model latent".into()));
        }
    }
    SearchEngine::new(model, safety, *spec, config.clone())?.run(prompt, &scorer)
}
