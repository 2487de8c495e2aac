//! Token-level decision process: vocabulary, sequences, the generative-model
//! interface with explicit latent state, and the task/safety cost contracts.
//!
//! A language model is treated as a dynamical system. Its memory `h` and
//! pre-projection activation `o` evolve with every emitted token, and the next
//! token is drawn from `SoftMax(logits(o))`. The engine never looks at model
//! weights, only at logits and the latent pair.

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    size: usize,
    eos: TokenId,
}

impl Vocabulary {
    pub fn new(size: usize, eos: TokenId) -> Result<Self> {
        if size < 2 {
            return Err(Error::Config(format!("vocabulary needs at least 2 tokens, got {size}")));
        }
        if eos as usize >= size {
            return Err(Error::Config(format!("eos {eos} outside vocabulary of size {size}")));
        }
        Ok(Self { size, eos })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn eos(&self) -> TokenId {
        self.eos
    }

    pub fn contains(&self, token: TokenId) -> bool {
        (token as usize) < self.size
    }

    pub fn check(&self, token: TokenId) -> Result<()> {
        if self.contains(token) {
            Ok(())
        } else {
            Err(Error::TokenOutOfRange { token, vocab_size: self.size })
        }
    }

    pub fn tokens(&self) -> std::ops::Range<TokenId> {
        0..self.size as TokenId
    }
}

/// Discount, safety budget and horizon of the constrained problem.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CmdpSpec {
    pub gamma: f64,
    pub budget_d: f64,
    pub max_len_t: usize,
}

impl Default for CmdpSpec {
    fn default() -> Self {
        Self { gamma: 0.999, budget_d: 10.0, max_len_t: 128 }
    }
}

impl CmdpSpec {
    pub fn new(gamma: f64, budget_d: f64, max_len_t: usize) -> Result<Self> {
        let spec = Self { gamma, budget_d, max_len_t };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma must lie in [0, 1), got {}", self.gamma)));
        }
        if !(self.budget_d >= 0.0) || !self.budget_d.is_finite() {
            return Err(Error::Config(format!("budget must be finite and >= 0, got {}", self.budget_d)));
        }
        if self.max_len_t == 0 {
            return Err(Error::Config("max_len_t must be at least 1".into()));
        }
        Ok(())
    }
}

/// Prompt plus generated continuation. Terminates on EOS or at the length cap.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence {
    pub prompt: Vec<TokenId>,
    pub generated: Vec<TokenId>,
    pub terminated: bool,
}

impl TokenSequence {
    pub fn new(prompt: Vec<TokenId>) -> Self {
        Self { prompt, generated: Vec::new(), terminated: false }
    }

    pub fn len(&self) -> usize {
        self.generated.len()
    }

    pub fn is_empty(&self) -> bool {
        self.generated.is_empty()
    }

    pub fn last_token(&self) -> Option<TokenId> {
        self.generated.last().or(self.prompt.last()).copied()
    }

    /// Prompt followed by the generated tokens.
    pub fn full(&self) -> impl Iterator<Item = TokenId> + '_ {
        self.prompt.iter().chain(self.generated.iter()).copied()
    }
}

/// `s_{t+1} = s_t ⊕ y_t`, with forced termination at the horizon.
pub fn transition(state: &TokenSequence, token: TokenId, vocab: &Vocabulary, spec: &CmdpSpec) -> Result<TokenSequence> {
    if state.terminated {
        return Err(Error::Contract("cannot append to a terminated sequence".into()));
    }
    vocab.check(token)?;
    let mut next = state.clone();
    next.generated.push(token);
    next.terminated = token == vocab.eos() || next.generated.len() >= spec.max_len_t;
    Ok(next)
}

/// Model memory `h` and pre-projection activation `o`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentState {
    pub h: Vec<f64>,
    pub o: Vec<f64>,
}

impl LatentState {
    pub fn new(h: Vec<f64>, o: Vec<f64>) -> Result<Self> {
        if h.iter().chain(o.iter()).any(|x| !x.is_finite()) {
            return Err(Error::Invariant("latent state has non-finite entries".into()));
        }
        Ok(Self { h, o })
    }

    /// Bitwise key, used wherever latent states are compared for exact equality.
    pub fn key(&self) -> Vec<u64> {
        let mut k = Vec::with_capacity(self.h.len() + self.o.len() + 1);
        k.push(self.h.len() as u64);
        k.extend(self.h.iter().map(|x| x.to_bits()));
        k.extend(self.o.iter().map(|x| x.to_bits()));
        k
    }
}

/// A language model seen as a deterministic latent dynamical system.
pub trait GenerativeModel: Send + Sync {
    fn vocab(&self) -> &Vocabulary;

    /// Latent state after consuming the prompt.
    fn init(&self, prompt: &[TokenId]) -> Result<LatentState>;

    /// `[h', o'] = f(h, y)`.
    fn step(&self, latent: &LatentState, token: TokenId) -> Result<LatentState>;

    /// Next-token logits, the linear image of `o`.
    fn logits(&self, latent: &LatentState) -> Vec<f64>;

    /// Replays `init` followed by `step` over the generated tokens.
    fn replay(&self, seq: &TokenSequence) -> Result<LatentState> {
        let mut latent = self.init(&seq.prompt)?;
        for &t in &seq.generated {
            latent = self.step(&latent, t)?;
        }
        Ok(latent)
    }
}

/// Advances the model one token and returns the new latent with its logits.
pub fn model_step<M: GenerativeModel + ?Sized>(
    model: &M,
    latent: &LatentState,
    token: TokenId,
) -> Result<(LatentState, Vec<f64>)> {
    model.vocab().check(token)?;
    let next = model.step(latent, token)?;
    let logits = model.logits(&next);
    check_logits(&logits, model.vocab())?;
    Ok((next, logits))
}

pub(crate) fn check_logits(logits: &[f64], vocab: &Vocabulary) -> Result<()> {
    if logits.len() != vocab.size() {
        return Err(Error::Config(format!(
            "model produced {} logits for a vocabulary of {}",
            logits.len(),
            vocab.size()
        )));
    }
    if logits.iter().any(|x| x.is_nan() || *x == f64::INFINITY) {
        return Err(Error::Invariant("model produced NaN or +inf logits".into()));
    }
    Ok(())
}

/// Numerically stable softmax of `logits / temperature`. `-inf` entries get 0.
pub fn softmax(logits: &[f64], temperature: f64) -> Result<Vec<f64>> {
    let max = logits.iter().copied().filter(|x| x.is_finite()).fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::NoValidToken);
    }
    let mut p: Vec<f64> =
        logits.iter().map(|&l| if l.is_finite() { ((l - max) / temperature).exp() } else { 0.0 }).collect();
    let z: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= z);
    Ok(p)
}

/// Draws a token from `SoftMax(logits / temperature)`.
pub fn sample_token<R: Rng + ?Sized>(logits: &[f64], temperature: f64, rng: &mut R) -> Result<TokenId> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
    }
    if logits.iter().any(|x| x.is_nan() || *x == f64::INFINITY) {
        return Err(Error::Input("logits must be finite or -inf".into()));
    }
    let probs = softmax(logits, temperature)?;
    let dist = WeightedIndex::new(&probs).map_err(|_| Error::NoValidToken)?;
    Ok(dist.sample(rng) as TokenId)
}

/// Terminal task cost `c_task([x, y])`. Lower is better.
pub trait TaskCostModel: Send + Sync {
    fn terminal_cost(&self, seq: &TokenSequence) -> f64;

    /// Cost of an unfinished response, for scoring rules that may query
    /// intermediate answers. Defaults to scoring the prefix as if complete.
    fn partial_cost(&self, seq: &TokenSequence) -> f64 {
        self.terminal_cost(seq)
    }

    /// Upper bound on `|c_task|`, if the model knows one.
    fn bound(&self) -> Option<f64> {
        None
    }
}

/// Instantaneous safety cost `C_safety(s, y)`. Must be nonnegative.
pub trait SafetyCostModel: Send + Sync {
    fn cost(&self, state: &TokenSequence, token: TokenId) -> f64;
}

pub fn eval_task_cost<C: TaskCostModel + ?Sized>(model: &C, seq: &TokenSequence) -> Result<f64> {
    if !seq.terminated {
        return Err(Error::Contract("task cost is only defined on terminated sequences".into()));
    }
    let c = model.terminal_cost(seq);
    if !c.is_finite() {
        return Err(Error::Invariant(format!("task cost model returned {c}")));
    }
    Ok(c)
}

/// Safety cost with the nonnegativity guard applied at the adapter boundary.
pub fn eval_safety_cost<C: SafetyCostModel + ?Sized>(
    model: &C,
    state: &TokenSequence,
    token: TokenId,
    vocab: &Vocabulary,
) -> Result<f64> {
    vocab.check(token)?;
    let c = model.cost(state, token);
    if !(c >= 0.0) || !c.is_finite() {
        return Err(Error::Invariant(format!("safety cost must be finite and nonnegative, got {c} for token {token}")));
    }
    Ok(c)
}
