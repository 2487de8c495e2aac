//! Two-head latent critic.
//!
//! The trunk maps `[h, o, z]` through two tanh layers. Head one is a logistic
//! classifier for `z_T > 0`, head two regresses `gamma^T c_task`. Targets come
//! from Monte-Carlo rollouts of the reference policy, so the penalty `n` never
//! enters training and can be changed at decode time.

use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{augmented_transition, AugmentedState};
use crate::error::{Error, Result};
use crate::mdp::{
    eval_task_cost, sample_token, CmdpSpec, GenerativeModel, LatentState, SafetyCostModel, TaskCostModel, TokenId,
};
use crate::rng::stream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriticNet {
    pub input_dim: usize,
    pub hidden: usize,
    /// Flat parameters: `W1 b1 W2 b2 w_safe b_safe w_cost b_cost`.
    pub theta: Vec<f64>,
}

struct Layout {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    ws: usize,
    bs: usize,
    wc: usize,
    bc: usize,
    len: usize,
}

struct Activations {
    x: Vec<f64>,
    a1: Vec<f64>,
    a2: Vec<f64>,
    safe_logit: f64,
    cost: f64,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `-[y ln p + (1 - y) ln(1 - p)]` with `p = sigmoid(a)`, computed from `a`.
fn bce_with_logit(a: f64, label: bool) -> f64 {
    let softplus = if a > 0.0 { a + (-a).exp().ln_1p() } else { a.exp().ln_1p() };
    softplus - if label { a } else { 0.0 }
}

impl CriticNet {
    pub const DEFAULT_HIDDEN: usize = 64;

    fn layout(input_dim: usize, hidden: usize) -> Layout {
        let w1 = 0;
        let b1 = w1 + hidden * input_dim;
        let w2 = b1 + hidden;
        let b2 = w2 + hidden * hidden;
        let ws = b2 + hidden;
        let bs = ws + hidden;
        let wc = bs + 1;
        let bc = wc + hidden;
        Layout { w1, b1, w2, b2, ws, bs, wc, bc, len: bc + 1 }
    }

    /// Seeded uniform initialization scaled by fan-in.
    pub fn new(input_dim: usize, hidden: usize, seed: u64) -> Self {
        let l = Self::layout(input_dim, hidden);
        let mut rng = stream(seed, &[0xc417]);
        let mut theta = vec![0.0; l.len];
        let a1 = (3.0 / input_dim as f64).sqrt();
        let a2 = (3.0 / hidden as f64).sqrt();
        theta[l.w1..l.b1].iter_mut().for_each(|w| *w = rng.gen_range(-a1..a1));
        theta[l.w2..l.b2].iter_mut().for_each(|w| *w = rng.gen_range(-a2..a2));
        theta[l.ws..l.bs].iter_mut().for_each(|w| *w = rng.gen_range(-a2..a2));
        theta[l.wc..l.bc].iter_mut().for_each(|w| *w = rng.gen_range(-a2..a2));
        Self { input_dim, hidden, theta }
    }

    /// Both heads output constants: `p_safe = 0.5`, `cost = 0`.
    pub fn with_zero_heads(mut self) -> Self {
        let l = Self::layout(self.input_dim, self.hidden);
        self.theta[l.ws..].iter_mut().for_each(|w| *w = 0.0);
        self
    }

    pub fn for_latent(latent: &LatentState, hidden: usize, seed: u64) -> Self {
        Self::new(latent.h.len() + latent.o.len() + 1, hidden, seed)
    }

    pub fn param_count(&self) -> usize {
        self.theta.len()
    }

    fn check_shape(&self) -> Result<()> {
        if self.theta.len() != Self::layout(self.input_dim, self.hidden).len {
            return Err(Error::Config("critic parameter vector has the wrong length".into()));
        }
        Ok(())
    }

    fn features(&self, h: &[f64], o: &[f64], z: f64) -> Result<Vec<f64>> {
        if h.len() + o.len() + 1 != self.input_dim {
            return Err(Error::Input(format!(
                "critic expects {} inputs, got {}",
                self.input_dim,
                h.len() + o.len() + 1
            )));
        }
        if h.iter().chain(o).any(|x| !x.is_finite()) || !z.is_finite() {
            return Err(Error::Input("critic inputs must be finite".into()));
        }
        let mut x = Vec::with_capacity(self.input_dim);
        x.extend_from_slice(h);
        x.extend_from_slice(o);
        x.push(z);
        Ok(x)
    }

    fn forward_x(&self, x: Vec<f64>) -> Activations {
        let (d, k) = (self.input_dim, self.hidden);
        let l = Self::layout(d, k);
        let t = &self.theta;
        let a1: Vec<f64> = (0..k)
            .map(|i| {
                let row = &t[l.w1 + i * d..l.w1 + (i + 1) * d];
                (row.iter().zip(&x).map(|(w, v)| w * v).sum::<f64>() + t[l.b1 + i]).tanh()
            })
            .collect();
        let a2: Vec<f64> = (0..k)
            .map(|i| {
                let row = &t[l.w2 + i * k..l.w2 + (i + 1) * k];
                (row.iter().zip(&a1).map(|(w, v)| w * v).sum::<f64>() + t[l.b2 + i]).tanh()
            })
            .collect();
        let safe_logit = t[l.ws..l.bs].iter().zip(&a2).map(|(w, v)| w * v).sum::<f64>() + t[l.bs];
        let cost = t[l.wc..l.bc].iter().zip(&a2).map(|(w, v)| w * v).sum::<f64>() + t[l.bc];
        Activations { x, a1, a2, safe_logit, cost }
    }

    /// `(p_safe, cost_pred)` for one latent state and tracker value.
    pub fn forward(&self, h: &[f64], o: &[f64], z: f64) -> Result<(f64, f64)> {
        self.check_shape()?;
        let act = self.forward_x(self.features(h, o, z)?);
        // clamp keeps the probability strictly inside (0, 1) in f64
        let p = sigmoid(act.safe_logit).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0);
        Ok((p, act.cost))
    }

    fn sample_loss(&self, s: &TrainingSample) -> Result<(f64, Activations)> {
        let act = self.forward_x(self.features(&s.h, &s.o, s.z)?);
        let loss = bce_with_logit(act.safe_logit, s.label_safe) + (act.cost - s.label_cost).powi(2);
        Ok((loss, act))
    }

    /// Mean loss over the batch and its gradient with respect to `theta`.
    pub fn loss_and_grad(&self, batch: &[TrainingSample]) -> Result<(f64, Vec<f64>)> {
        if batch.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        self.check_shape()?;
        let (d, k) = (self.input_dim, self.hidden);
        let l = Self::layout(d, k);
        let t = &self.theta;
        let mut grad = vec![0.0; t.len()];
        let mut total = 0.0;
        let scale = 1.0 / batch.len() as f64;
        for s in batch {
            let (loss, act) = self.sample_loss(s)?;
            total += loss;
            let g_logit = (sigmoid(act.safe_logit) - if s.label_safe { 1.0 } else { 0.0 }) * scale;
            let g_cost = 2.0 * (act.cost - s.label_cost) * scale;
            grad[l.bs] += g_logit;
            grad[l.bc] += g_cost;
            let mut g_a2 = vec![0.0; k];
            for i in 0..k {
                grad[l.ws + i] += g_logit * act.a2[i];
                grad[l.wc + i] += g_cost * act.a2[i];
                g_a2[i] = g_logit * t[l.ws + i] + g_cost * t[l.wc + i];
            }
            let g_z2: Vec<f64> = (0..k).map(|i| g_a2[i] * (1.0 - act.a2[i] * act.a2[i])).collect();
            let mut g_a1 = vec![0.0; k];
            for i in 0..k {
                grad[l.b2 + i] += g_z2[i];
                for j in 0..k {
                    grad[l.w2 + i * k + j] += g_z2[i] * act.a1[j];
                    g_a1[j] += g_z2[i] * t[l.w2 + i * k + j];
                }
            }
            for i in 0..k {
                let g_z1 = g_a1[i] * (1.0 - act.a1[i] * act.a1[i]);
                grad[l.b1 + i] += g_z1;
                for j in 0..d {
                    grad[l.w1 + i * d + j] += g_z1 * act.x[j];
                }
            }
        }
        Ok((total * scale, grad))
    }
}

pub fn critic_forward(net: &CriticNet, h: &[f64], o: &[f64], z: f64) -> Result<(f64, f64)> {
    net.forward(h, o, z)
}

/// `mean_i [BCE(p_i, safe_i) + (cost_i - target_i)^2]`.
pub fn critic_loss(net: &CriticNet, batch: &[TrainingSample]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    net.check_shape()?;
    let mut total = 0.0;
    for s in batch {
        total += net.sample_loss(s)?.0;
    }
    Ok(total / batch.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingSample {
    pub h: Vec<f64>,
    pub o: Vec<f64>,
    pub z: f64,
    pub label_safe: bool,
    pub label_cost: f64,
    #[serde(default)]
    pub rollout: usize,
    #[serde(default)]
    pub step: usize,
}

/// Which horizon the cost target is discounted by.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscountHorizon {
    /// The step at which the rollout actually terminated.
    #[default]
    Realized,
    /// The length cap `T`, regardless of early EOS.
    Cap,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub prompt: Vec<TokenId>,
    pub tokens: Vec<TokenId>,
    pub z_final: f64,
    pub task_cost: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McDataset {
    pub samples: Vec<TrainingSample>,
    pub rollouts: Vec<RolloutRecord>,
}

/// Monte-Carlo targets: reference-policy rollouts from every prompt, one
/// sample per generated step with the terminal labels broadcast back.
#[allow(clippy::too_many_arguments)]
pub fn generate_mc_dataset<M, S, C>(
    model: &M,
    safety_model: &S,
    task_model: &C,
    prompts: &[Vec<TokenId>],
    rollouts_per_prompt: usize,
    spec: &CmdpSpec,
    horizon: DiscountHorizon,
    seed: u64,
) -> Result<McDataset>
where
    M: GenerativeModel + ?Sized,
    S: SafetyCostModel + ?Sized,
    C: TaskCostModel + ?Sized,
{
    if rollouts_per_prompt == 0 {
        return Err(Error::Input("need at least one rollout per prompt".into()));
    }
    let vocab = model.vocab();
    let mut samples = Vec::new();
    let mut rollouts = Vec::new();
    for (pi, prompt) in prompts.iter().enumerate() {
        for r in 0..rollouts_per_prompt {
            let mut rng = stream(seed, &[pi as u64, r as u64]);
            let mut aug = AugmentedState::new(prompt.clone(), spec);
            let mut latent = model.init(prompt)?;
            let mut visited = Vec::new();
            while !aug.seq.terminated {
                let token = sample_token(&model.logits(&latent), 1.0, &mut rng)?;
                aug = augmented_transition(&aug, token, safety_model, vocab, spec)?;
                latent = model.step(&latent, token)?;
                visited.push((latent.clone(), aug.safety.z));
            }
            let task_cost = eval_task_cost(task_model, &aug.seq)?;
            let power = match horizon {
                DiscountHorizon::Realized => aug.seq.len(),
                DiscountHorizon::Cap => spec.max_len_t,
            };
            let label_cost = spec.gamma.powi(power as i32) * task_cost;
            let label_safe = aug.safety.z > 0.0;
            let rollout = rollouts.len();
            for (step, (l, z)) in visited.into_iter().enumerate() {
                samples.push(TrainingSample { h: l.h, o: l.o, z, label_safe, label_cost, rollout, step: step + 1 });
            }
            rollouts.push(RolloutRecord {
                prompt: prompt.clone(),
                tokens: aug.seq.generated,
                z_final: aug.safety.z,
                task_cost,
            });
        }
    }
    Ok(McDataset { samples, rollouts })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub gamma: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-5, epochs: 50, batch_size: 8, gamma: 0.999, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.batch_size == 0 {
            return Err(Error::Config("learning rate and batch size must be positive".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form, stored in checkpoints.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("train config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub net: CriticNet,
    /// Mean training loss after each epoch.
    pub loss_curve: Vec<f64>,
}

/// Minibatch SGD with a seeded shuffle per epoch.
pub fn train_critic(mut net: CriticNet, dataset: &[TrainingSample], config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Input("empty training set".into()));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut loss_curve = Vec::with_capacity(config.epochs);
    let mut batch = Vec::with_capacity(config.batch_size);
    for epoch in 0..config.epochs {
        let mut rng = stream(config.seed, &[epoch as u64]);
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| dataset[i].clone()));
            let (loss, grad) = net.loss_and_grad(&batch)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, detail: format!("batch loss {loss}") });
            }
            net.theta.iter_mut().zip(&grad).for_each(|(w, g)| *w -= config.learning_rate * g);
        }
        let loss = critic_loss(&net, dataset)?;
        if !loss.is_finite() || net.theta.iter().any(|w| !w.is_finite()) {
            return Err(Error::Diverged { epoch, detail: format!("epoch loss {loss}") });
        }
        log::debug!("critic epoch {epoch}: loss {loss:.6}");
        loss_curve.push(loss);
    }
    Ok(TrainOutcome { net, loss_curve })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

/// Central finite differences against a supplied analytic gradient on a
/// random subset of at least 200 parameters (or all, if fewer).
pub fn grad_check_against(
    net: &CriticNet,
    batch: &[TrainingSample],
    analytic: &[f64],
    eps: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Input(format!("eps must lie in [1e-7, 1e-3], got {eps}")));
    }
    let mut idx: Vec<usize> = (0..net.theta.len()).collect();
    idx.shuffle(&mut stream(seed, &[0x9c]));
    idx.truncate(idx.len().min(200.max(net.theta.len() / 10)));
    let mut probe = net.clone();
    let mut max_rel = 0.0f64;
    let mut max_abs = 0.0f64;
    for &i in &idx {
        let w = probe.theta[i];
        probe.theta[i] = w + eps;
        let up = critic_loss(&probe, batch)?;
        probe.theta[i] = w - eps;
        let down = critic_loss(&probe, batch)?;
        probe.theta[i] = w;
        let numeric = (up - down) / (2.0 * eps);
        let abs = (analytic[i] - numeric).abs();
        let denom = analytic[i].abs() + numeric.abs();
        let rel = if denom > 1e-7 { abs / denom } else { 0.0 };
        max_abs = max_abs.max(abs);
        max_rel = max_rel.max(rel);
    }
    Ok(GradCheckReport { checked: idx.len(), max_rel_error: max_rel, max_abs_error: max_abs })
}

pub fn grad_check(net: &CriticNet, batch: &[TrainingSample], eps: f64, seed: u64) -> Result<GradCheckReport> {
    let (_, grad) = net.loss_and_grad(batch)?;
    grad_check_against(net, batch, &grad, eps, seed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriticCheckpoint {
    pub version: u32,
    pub input_dim: usize,
    pub hidden: usize,
    pub config_hash: String,
    pub theta: Vec<f64>,
}

impl CriticCheckpoint {
    pub const VERSION: u32 = 1;

    pub fn new(net: &CriticNet, config: &TrainConfig) -> Self {
        Self {
            version: Self::VERSION,
            input_dim: net.input_dim,
            hidden: net.hidden,
            config_hash: config.hash(),
            theta: net.theta.clone(),
        }
    }

    pub fn into_net(self) -> Result<CriticNet> {
        if self.version != Self::VERSION {
            return Err(Error::Config(format!("unsupported critic checkpoint version {}", self.version)));
        }
        let net = CriticNet { input_dim: self.input_dim, hidden: self.hidden, theta: self.theta };
        net.check_shape()?;
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// One JSON sample per line.
pub fn save_dataset(samples: &[TrainingSample], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for s in samples {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Vec<TrainingSample>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
