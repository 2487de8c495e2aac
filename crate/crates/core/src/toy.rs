//! Small, fully inspectable models that plug into the generative-model and
//! cost interfaces, plus the random instance generator used by the oracle and
//! search test suites.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::ReshapedCostParams;
use crate::error::{Error, Result};
use crate::mdp::{
    CmdpSpec, GenerativeModel, LatentState, SafetyCostModel, TaskCostModel, TokenId, TokenSequence, Vocabulary,
};
use crate::oracle::FiniteAugmentedMDP;

/// Order-`k` n-gram model.
///
/// The latent memory `h` is a fixed-capacity cache of the most recent tokens
/// (stored as `id + 1`, `0` marking an empty slot), the analogue of a
/// key-value cache. `o` is the logit row selected by the last `k - 1` tokens,
/// and the projection to logits is the identity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NGramModel {
    pub vocab: Vocabulary,
    pub order: usize,
    pub cache_len: usize,
    /// `(V + 1)^(order - 1)` rows of `V` logits; context slot value `V` is BOS.
    pub table: Vec<Vec<f64>>,
}

impl NGramModel {
    pub fn new(vocab: Vocabulary, order: usize, cache_len: usize, table: Vec<Vec<f64>>) -> Result<Self> {
        if order == 0 {
            return Err(Error::Config("n-gram order must be at least 1".into()));
        }
        if cache_len + 1 < order {
            return Err(Error::Config("cache must hold at least order - 1 tokens".into()));
        }
        let rows = (vocab.size() + 1).pow(order as u32 - 1);
        if table.len() != rows || table.iter().any(|r| r.len() != vocab.size()) {
            return Err(Error::Config(format!("n-gram table must be {rows} x {}", vocab.size())));
        }
        if table.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::Config("n-gram table has non-finite entries".into()));
        }
        Ok(Self { vocab, order, cache_len, table })
    }

    fn row_index(&self, context: &[usize]) -> usize {
        let base = self.vocab.size() + 1;
        context.iter().fold(0, |acc, &c| acc * base + c)
    }

    /// Context of the last `order - 1` cached tokens, BOS-padded.
    fn context_of(&self, cache: &[f64]) -> Vec<usize> {
        let bos = self.vocab.size();
        let k = self.order - 1;
        cache[cache.len() - k..].iter().map(|&slot| if slot == 0.0 { bos } else { slot as usize - 1 }).collect()
    }

    fn latent_from_cache(&self, cache: Vec<f64>) -> LatentState {
        let row = self.row_index(&self.context_of(&cache));
        LatentState { h: cache, o: self.table[row].clone() }
    }
}

impl GenerativeModel for NGramModel {
    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn init(&self, prompt: &[TokenId]) -> Result<LatentState> {
        let mut cache = vec![0.0; self.cache_len];
        for &t in prompt {
            self.vocab.check(t)?;
            cache.rotate_left(1);
            *cache.last_mut().unwrap() = (t + 1) as f64;
        }
        Ok(self.latent_from_cache(cache))
    }

    fn step(&self, latent: &LatentState, token: TokenId) -> Result<LatentState> {
        self.vocab.check(token)?;
        let mut cache = latent.h.clone();
        if cache.len() != self.cache_len {
            return Err(Error::Config("latent state does not belong to this n-gram model".into()));
        }
        cache.rotate_left(1);
        *cache.last_mut().unwrap() = (token + 1) as f64;
        Ok(self.latent_from_cache(cache))
    }

    fn logits(&self, latent: &LatentState) -> Vec<f64> {
        latent.o.clone()
    }
}

/// Add-one smoothed n-gram estimate in log space. Each corpus sequence is
/// BOS-padded on the left, so unseen contexts get a uniform row.
pub fn build_ngram(corpus: &[Vec<TokenId>], order: usize, vocab: Vocabulary, cache_len: usize) -> Result<NGramModel> {
    if order == 0 {
        return Err(Error::Config("n-gram order must be at least 1".into()));
    }
    if corpus.is_empty() {
        return Err(Error::Input("n-gram corpus is empty".into()));
    }
    let v = vocab.size();
    let bos = v;
    let rows = (v + 1).pow(order as u32 - 1);
    let mut counts = vec![vec![0.0f64; v]; rows];
    for seq in corpus {
        let mut ctx = vec![bos; order - 1];
        for &t in seq {
            vocab.check(t)?;
            let row = ctx.iter().fold(0, |acc, &c| acc * (v + 1) + c);
            counts[row][t as usize] += 1.0;
            if order > 1 {
                ctx.remove(0);
                ctx.push(t as usize);
            }
        }
    }
    let table = counts
        .into_iter()
        .map(|row| {
            let total: f64 = row.iter().sum::<f64>() + v as f64;
            row.into_iter().map(|c| ((c + 1.0) / total).ln()).collect()
        })
        .collect();
    NGramModel::new(vocab, order, cache_len.max(order - 1), table)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Nonlinearity {
    Tanh,
}

impl Nonlinearity {
    fn apply(self, x: f64) -> f64 {
        match self {
            Nonlinearity::Tanh => x.tanh(),
        }
    }
}

/// Elman-style recurrent model:
/// `h' = tanh(E[y] + R h + b)`, `o' = tanh(U h')`, `logits = W o + c`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TinyRecurrentModel {
    pub vocab: Vocabulary,
    pub width: usize,
    pub nonlinearity: Nonlinearity,
    /// `V x width`
    pub embedding: Vec<Vec<f64>>,
    /// `width x width`
    pub recurrent: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
    /// `width x width`
    pub readout: Vec<Vec<f64>>,
    /// `V x width`, the projection `W`.
    pub projection: Vec<Vec<f64>>,
    pub logit_bias: Vec<f64>,
}

fn matvec(m: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    m.iter().map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

impl TinyRecurrentModel {
    pub const DEFAULT_WIDTH: usize = 16;

    /// Seeded uniform initialization. `logit_scale` controls how peaked the
    /// next-token distributions are.
    pub fn random(vocab: Vocabulary, width: usize, logit_scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = vocab.size();
        let r = 1.0 / (width as f64).sqrt();
        let mut mat = |rows: usize, cols: usize, a: f64| -> Vec<Vec<f64>> {
            (0..rows).map(|_| (0..cols).map(|_| rng.gen_range(-a..a)).collect()).collect()
        };
        let embedding = mat(v, width, 1.0);
        let recurrent = mat(width, width, 1.5 * r);
        let readout = mat(width, width, 2.0 * r);
        let projection = mat(v, width, logit_scale * r * 3.0f64.sqrt());
        let bias = mat(1, width, 0.1).remove(0);
        Self {
            vocab,
            width,
            nonlinearity: Nonlinearity::Tanh,
            embedding,
            recurrent,
            bias,
            readout,
            projection,
            logit_bias: vec![0.0; v],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (v, w) = (self.vocab.size(), self.width);
        let ok = self.embedding.len() == v
            && self.embedding.iter().all(|r| r.len() == w)
            && self.recurrent.len() == w
            && self.recurrent.iter().all(|r| r.len() == w)
            && self.readout.len() == w
            && self.readout.iter().all(|r| r.len() == w)
            && self.projection.len() == v
            && self.projection.iter().all(|r| r.len() == w)
            && self.bias.len() == w
            && self.logit_bias.len() == v;
        if ok {
            Ok(())
        } else {
            Err(Error::Config("recurrent model weight shapes are inconsistent".into()))
        }
    }
}

impl GenerativeModel for TinyRecurrentModel {
    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn init(&self, prompt: &[TokenId]) -> Result<LatentState> {
        let mut latent = LatentState { h: vec![0.0; self.width], o: vec![0.0; self.width] };
        for &t in prompt {
            latent = self.step(&latent, t)?;
        }
        Ok(latent)
    }

    fn step(&self, latent: &LatentState, token: TokenId) -> Result<LatentState> {
        self.vocab.check(token)?;
        if latent.h.len() != self.width {
            return Err(Error::Config("latent state does not belong to this recurrent model".into()));
        }
        let rh = matvec(&self.recurrent, &latent.h);
        let emb = &self.embedding[token as usize];
        let h: Vec<f64> = (0..self.width).map(|i| self.nonlinearity.apply(emb[i] + rh[i] + self.bias[i])).collect();
        let o = matvec(&self.readout, &h).into_iter().map(|x| self.nonlinearity.apply(x)).collect();
        LatentState::new(h, o)
    }

    fn logits(&self, latent: &LatentState) -> Vec<f64> {
        matvec(&self.projection, &latent.o).into_iter().zip(&self.logit_bias).map(|(a, b)| a + b).collect()
    }
}

/// Either toy model family, serializable as a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ToyModel {
    NGram(NGramModel),
    Recurrent(TinyRecurrentModel),
}

impl GenerativeModel for ToyModel {
    fn vocab(&self) -> &Vocabulary {
        match self {
            ToyModel::NGram(m) => m.vocab(),
            ToyModel::Recurrent(m) => m.vocab(),
        }
    }

    fn init(&self, prompt: &[TokenId]) -> Result<LatentState> {
        match self {
            ToyModel::NGram(m) => m.init(prompt),
            ToyModel::Recurrent(m) => m.init(prompt),
        }
    }

    fn step(&self, latent: &LatentState, token: TokenId) -> Result<LatentState> {
        match self {
            ToyModel::NGram(m) => m.step(latent, token),
            ToyModel::Recurrent(m) => m.step(latent, token),
        }
    }

    fn logits(&self, latent: &LatentState) -> Vec<f64> {
        match self {
            ToyModel::NGram(m) => m.logits(latent),
            ToyModel::Recurrent(m) => m.logits(latent),
        }
    }
}

/// Per-token safety weights. With `context_multiplier`, a forbidden token that
/// directly follows another forbidden token costs double.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LexiconSafetyCost {
    pub weights: Vec<f64>,
    #[serde(default)]
    pub context_multiplier: bool,
}

impl LexiconSafetyCost {
    pub fn new(weights: Vec<f64>, context_multiplier: bool) -> Result<Self> {
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Config("lexicon weights must be finite and nonnegative".into()));
        }
        Ok(Self { weights, context_multiplier })
    }

    pub fn is_forbidden(&self, token: TokenId) -> bool {
        self.weights.get(token as usize).is_some_and(|&w| w > 0.0)
    }

    pub fn max_step_cost(&self) -> f64 {
        let m = self.weights.iter().copied().fold(0.0, f64::max);
        if self.context_multiplier {
            2.0 * m
        } else {
            m
        }
    }
}

impl SafetyCostModel for LexiconSafetyCost {
    fn cost(&self, state: &TokenSequence, token: TokenId) -> f64 {
        let w = self.weights.get(token as usize).copied().unwrap_or(0.0);
        if w > 0.0 && self.context_multiplier && state.last_token().is_some_and(|p| self.is_forbidden(p)) {
            2.0 * w
        } else {
            w
        }
    }
}

/// `c_task = -reward * [a target token was generated] + length_penalty * len`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetTaskCost {
    pub targets: Vec<TokenId>,
    pub reward: f64,
    pub length_penalty: f64,
    pub max_len: usize,
}

impl TargetTaskCost {
    pub fn hit(&self, seq: &TokenSequence) -> bool {
        seq.generated.iter().any(|t| self.targets.contains(t))
    }
}

impl TaskCostModel for TargetTaskCost {
    fn terminal_cost(&self, seq: &TokenSequence) -> f64 {
        let hit = if self.hit(seq) { 1.0 } else { 0.0 };
        -self.reward * hit + self.length_penalty * seq.len() as f64
    }

    fn bound(&self) -> Option<f64> {
        Some(self.reward.abs() + self.length_penalty.abs() * self.max_len as f64)
    }
}

/// Maps text to token ids: every non-whitespace character goes to one of the
/// non-EOS tokens by its code point.
pub fn tokenize_text(text: &str, vocab: &Vocabulary) -> Vec<TokenId> {
    let ids: Vec<TokenId> = vocab.tokens().filter(|&t| t != vocab.eos()).collect();
    text.chars().filter(|c| !c.is_whitespace()).map(|c| ids[c as usize % ids.len()]).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    NGram,
    Recurrent,
}

/// Size and shape of randomly generated oracle instances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceParams {
    pub min_vocab: usize,
    pub max_vocab: usize,
    pub min_horizon: usize,
    pub max_horizon: usize,
    pub model: Option<ModelKind>,
    pub gamma: f64,
    /// Probability that the EOS token carries zero safety cost, which makes
    /// the instance feasible by construction (stop immediately).
    pub safe_eos_prob: f64,
    pub penalty_n: f64,
}

impl Default for InstanceParams {
    fn default() -> Self {
        Self {
            min_vocab: 3,
            max_vocab: 5,
            min_horizon: 3,
            max_horizon: 6,
            model: None,
            gamma: 0.9,
            safe_eos_prob: 0.7,
            penalty_n: 1e4,
        }
    }
}

/// Deterministic random instance: model, lexicon cost, target cost and problem definition.
pub fn make_instance(seed: u64, p: &InstanceParams) -> Result<FiniteAugmentedMDP> {
    if p.min_vocab < 2 || p.min_vocab > p.max_vocab || p.min_horizon == 0 || p.min_horizon > p.max_horizon {
        return Err(Error::Config("invalid instance size ranges".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x005e_ed0f_1a57);
    let v = rng.gen_range(p.min_vocab..=p.max_vocab);
    let horizon = rng.gen_range(p.min_horizon..=p.max_horizon);
    let vocab = Vocabulary::new(v, (v - 1) as TokenId)?;
    let eos = vocab.eos();
    let kind = p.model.unwrap_or(if rng.gen_bool(0.5) { ModelKind::NGram } else { ModelKind::Recurrent });
    let model = match kind {
        ModelKind::NGram => {
            let rows = (v + 1).pow(1);
            let table = (0..rows).map(|_| (0..v).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
            ToyModel::NGram(NGramModel::new(vocab.clone(), 2, 16, table)?)
        }
        ModelKind::Recurrent => ToyModel::Recurrent(TinyRecurrentModel::random(
            vocab.clone(),
            TinyRecurrentModel::DEFAULT_WIDTH,
            2.0,
            rng.gen(),
        )),
    };
    let weights = (0..v as TokenId)
        .map(|t| {
            if t == eos {
                if rng.gen_bool(p.safe_eos_prob) {
                    0.0
                } else {
                    rng.gen_range(1..=4) as f64
                }
            } else if rng.gen_bool(0.5) {
                0.0
            } else {
                rng.gen_range(1..=4) as f64
            }
        })
        .collect();
    let safety = LexiconSafetyCost::new(weights, rng.gen_bool(0.5))?;
    let target = rng.gen_range(0..eos);
    let task = TargetTaskCost {
        targets: vec![target],
        reward: rng.gen_range(1.0..5.0),
        length_penalty: rng.gen_range(0.0..0.3),
        max_len: horizon,
    };
    let spec = CmdpSpec::new(p.gamma, rng.gen_range(1..=6) as f64, horizon)?;
    let prompt = vec![rng.gen_range(0..eos)];
    let mdp = FiniteAugmentedMDP {
        spec,
        model,
        safety,
        task,
        params: ReshapedCostParams { n: p.penalty_n },
        prompt,
        cap: FiniteAugmentedMDP::DEFAULT_CAP,
    };
    mdp.validate()?;
    Ok(mdp)
}

/// Whether some trajectory ends with a positive tracker, found by a
/// branch-and-bound search on the minimum discounted safety cost.
pub fn feasibility_probe(mdp: &FiniteAugmentedMDP) -> bool {
    fn walk(mdp: &FiniteAugmentedMDP, seq: &TokenSequence, acc: f64, g: f64, best: &mut f64) {
        if acc >= *best {
            return;
        }
        if seq.terminated {
            *best = acc;
            return;
        }
        let vocab = mdp.model.vocab();
        for t in vocab.tokens() {
            let c = mdp.safety.cost(seq, t);
            let mut next = seq.clone();
            next.generated.push(t);
            next.terminated = t == vocab.eos() || next.generated.len() >= mdp.spec.max_len_t;
            walk(mdp, &next, acc + g * c, g * mdp.spec.gamma, best);
        }
    }
    let mut best = f64::INFINITY;
    walk(mdp, &TokenSequence::new(mdp.prompt.clone()), 0.0, 1.0, &mut best);
    best < mdp.spec.budget_d
}
