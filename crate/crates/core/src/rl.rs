//! Rewards, regularizers, REINFORCE with a moving-average baseline, and the
//! SGD training loop.
//!
//! Rewards are not differentiable. They reach the parameters only through
//! the score-function surrogate `-(1/k) sum_e (R_e - c) sum_t log pi(a_t)`,
//! while the regularizers and the prediction loss backpropagate directly.

use crate::autodiff::{sigmoid, NodeId, Tape};
use crate::error::{Error, Result};
use crate::model::{self, FramePolicy, ModelConfig, ModelParams};
use crate::tensor::{dims4, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub const PROB_FLOOR: f64 = 1e-6;
/// Stand-in for the binary regularizer when every probability is exactly 0.5.
pub const SATURATED_PENALTY: f64 = 1e6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Paradigm {
    Unsupervised,
    Supervised,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub paradigm: Paradigm,
    pub lambda: f64,
    pub epsilon: f64,
    pub episodes: usize,
    pub baseline_decay: f64,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub lr_step: usize,
    pub lr_gamma: f64,
    pub use_rep: bool,
    pub use_div: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            paradigm: Paradigm::Unsupervised,
            lambda: 0.01,
            epsilon: 0.5,
            episodes: 5,
            baseline_decay: 0.9,
            lr: 1e-5,
            momentum: 0.9,
            weight_decay: 1e-6,
            epochs: 60,
            lr_step: 30,
            lr_gamma: 0.5,
            use_rep: true,
            use_div: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lambda >= 0.0) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return bad(format!("epsilon must be in (0, 1), got {}", self.epsilon));
        }
        if self.episodes == 0 {
            return bad("episodes must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.baseline_decay) {
            return bad(format!("baseline_decay must be in [0, 1), got {}", self.baseline_decay));
        }
        if !(self.lr >= 0.0) || !(self.momentum >= 0.0) || !(self.weight_decay >= 0.0) {
            return bad("lr, momentum and weight_decay must be >= 0".into());
        }
        if self.lr_step == 0 || !(self.lr_gamma > 0.0) {
            return bad("lr_step must be >= 1 and lr_gamma > 0".into());
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_gamma.powi((epoch / self.lr_step) as i32)
    }
}

/// Binary action sequence; the summary set is `{t : a_t = 1}`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ActionTrace {
    a: Vec<bool>,
}

impl ActionTrace {
    pub fn new(a: Vec<bool>) -> Self {
        ActionTrace { a }
    }

    pub fn actions(&self) -> &[bool] {
        &self.a
    }

    pub fn summary_set(&self) -> Vec<usize> {
        self.a
            .iter()
            .enumerate()
            .filter_map(|(i, &s)| s.then_some(i))
            .collect()
    }

    pub fn as_weights(&self) -> Vec<f64> {
        self.a.iter().map(|&s| if s { 1.0 } else { 0.0 }).collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct RewardBreakdown {
    pub r_rep: f64,
    pub r_div: f64,
    pub total: f64,
    /// The episode selected nothing, so every reward term is 0.
    pub empty: bool,
}

/// Moving average of past rewards.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Baseline {
    pub c: f64,
    pub count: usize,
}

impl Baseline {
    pub fn update(&mut self, r: f64, beta: f64) {
        self.c = beta * self.c + (1.0 - beta) * r;
        self.count += 1;
    }
}

/// Spatially pooled feature steps, each repeated `n` times, so that there is
/// one vector per frame.
pub fn frame_vectors(f: &Tensor, n: usize) -> Result<Vec<Vec<f64>>> {
    let [t, c, w, h] = dims4(f, "features")?;
    let area = (w * h) as f64;
    let d = f.data();
    let mut out = Vec::with_capacity(t * n);
    for s in 0..t {
        let v: Vec<f64> = (0..c)
            .map(|ch| {
                let base = (s * c + ch) * w * h;
                d[base..base + w * h].iter().sum::<f64>() / area
            })
            .collect();
        for _ in 0..n {
            out.push(v.clone());
        }
    }
    Ok(out)
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `exp(-(1/L) sum_t min_{i in S} |x_t - x_i|)`; 0 when `S` is empty.
pub fn reward_rep(x: &[Vec<f64>], s: &[usize]) -> Result<f64> {
    if x.is_empty() {
        return Err(Error::Degenerate("no frames".into()));
    }
    if s.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = x
        .iter()
        .map(|xt| s.iter().map(|&i| dist(xt, &x[i])).fold(f64::INFINITY, f64::min))
        .sum();
    Ok((-total / x.len() as f64).exp())
}

/// Mean pairwise cosine dissimilarity over `S`; 0 when `|S| <= 1`.
pub fn reward_div(x: &[Vec<f64>], s: &[usize]) -> Result<f64> {
    if s.len() < 2 {
        return Ok(0.0);
    }
    let unit: Vec<Vec<f64>> = s
        .iter()
        .map(|&i| {
            let n = x[i].iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                Err(Error::Degenerate(format!("frame {i} has a zero feature vector")))
            } else {
                Ok(x[i].iter().map(|v| v / n).collect())
            }
        })
        .collect::<Result<_>>()?;
    let mut acc = 0.0;
    for a in 0..unit.len() {
        for b in a + 1..unit.len() {
            let cos: f64 = unit[a].iter().zip(&unit[b]).map(|(p, q)| p * q).sum();
            acc += 1.0 - cos;
        }
    }
    let m = s.len() as f64;
    Ok((2.0 * acc / (m * (m - 1.0))).clamp(0.0, 2.0))
}

pub fn rewards(x: &[Vec<f64>], actions: &ActionTrace, use_rep: bool, use_div: bool) -> Result<RewardBreakdown> {
    let s = actions.summary_set();
    let r_rep = if use_rep { reward_rep(x, &s)? } else { 0.0 };
    let r_div = if use_div { reward_div(x, &s)? } else { 0.0 };
    Ok(RewardBreakdown {
        r_rep,
        r_div,
        total: r_rep + r_div,
        empty: s.is_empty(),
    })
}

pub fn sample_actions(p: &[f64], rng: &mut impl Rng) -> ActionTrace {
    ActionTrace::new(
        p.iter()
            .map(|&v| rng.random::<f64>() < v.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR))
            .collect(),
    )
}

pub fn loss_reg_proportion(p: &[f64], epsilon: f64) -> f64 {
    let mean = p.iter().sum::<f64>() / p.len() as f64;
    (mean - epsilon).powi(2)
}

pub fn loss_reg_binary(p: &[f64]) -> Result<f64> {
    let m = p.iter().map(|v| (v - 0.5).abs()).sum::<f64>() / p.len() as f64;
    if m == 0.0 {
        return Err(Error::Saturated);
    }
    Ok(1.0 / m)
}

pub fn loss_pred(p: &[f64], p_star: &[f64]) -> Result<f64> {
    if p.len() != p_star.len() {
        return Err(Error::shape(
            "frames",
            format!("{} predictions vs {} targets", p.len(), p_star.len()),
        ));
    }
    Ok(p.iter().zip(p_star).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / p.len() as f64)
}

/// `L_reg - R` with `L_reg = L_reg^p + lambda * L_reg^b`.
pub fn loss_unsupervised(p: &[f64], reward: f64, cfg: &TrainConfig) -> Result<f64> {
    let binary = if cfg.lambda == 0.0 {
        0.0
    } else {
        cfg.lambda * loss_reg_binary(p)?
    };
    Ok(loss_reg_proportion(p, cfg.epsilon) + binary - reward)
}

/// `L_pred + L_reg - R`.
pub fn loss_supervised(p: &[f64], p_star: &[f64], reward: f64, cfg: &TrainConfig) -> Result<f64> {
    Ok(loss_pred(p, p_star)? + loss_unsupervised(p, reward, cfg)?)
}

pub fn loss_reg_proportion_on_tape(tape: &mut Tape, p: NodeId, epsilon: f64) -> NodeId {
    let m = tape.mean(p);
    let d = tape.add_scalar(m, -epsilon);
    tape.square(d)
}

/// Fails with [`Error::Saturated`] when every probability is exactly 0.5.
pub fn loss_reg_binary_on_tape(tape: &mut Tape, p: NodeId) -> Result<NodeId> {
    let d = tape.add_scalar(p, -0.5);
    let a = tape.abs(d);
    let m = tape.mean(a);
    if tape.value(m).item() == 0.0 {
        return Err(Error::Saturated);
    }
    Ok(tape.recip(m))
}

pub fn loss_pred_on_tape(tape: &mut Tape, p: NodeId, p_star: &Tensor) -> Result<NodeId> {
    if tape.value(p).len() != p_star.len() {
        return Err(Error::shape(
            "frames",
            format!("{} predictions vs {} targets", tape.value(p).len(), p_star.len()),
        ));
    }
    let target = tape.leaf(p_star.reshape(tape.value(p).shape())?);
    let d = tape.sub(p, target)?;
    let s = tape.square(d);
    Ok(tape.mean(s))
}

/// Score-function surrogate whose gradient with respect to the logits `z` is
/// the REINFORCE estimate `-(1/k) sum_e (R_e - c) grad sum_t log pi(a_t)`.
pub fn reinforce_surrogate(
    tape: &mut Tape,
    z: NodeId,
    episodes: &[(ActionTrace, f64)],
    c: f64,
) -> Result<NodeId> {
    let k = episodes.len() as f64;
    let mut acc: Option<NodeId> = None;
    for (trace, r) in episodes {
        let ll = tape.bernoulli_log_lik(z, &trace.as_weights())?;
        let term = tape.scale(ll, -(r - c) / k);
        acc = Some(match acc {
            None => term,
            Some(prev) => tape.add(prev, term)?,
        });
    }
    acc.ok_or_else(|| Error::Contract("at least one episode is required".into()))
}

/// Per-coordinate score `a_t - sigmoid(z_t)` of one episode.
pub fn score_function(z: &[f64], actions: &ActionTrace) -> Vec<f64> {
    z.iter()
        .zip(actions.actions())
        .map(|(&z, &a)| if a { 1.0 } else { 0.0 } - sigmoid(z))
        .collect()
}

/// One video prepared for training.
#[derive(Clone, Debug)]
pub struct TrainVideo {
    pub id: String,
    /// Features padded to the model's temporal multiple.
    pub features: Tensor,
    /// One vector per original frame.
    pub frames: Vec<Vec<f64>>,
    /// Target scores, required for supervised training.
    pub p_star: Option<Vec<f64>>,
}

impl TrainVideo {
    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub reg_p: f64,
    pub reg_b: f64,
    pub pred: f64,
    pub reward: f64,
    /// `pred + reg_p + lambda * reg_b - reward`.
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    /// One gradient per parameter tensor, in storage order.
    pub grads: Vec<Tensor>,
    pub rewards: Vec<RewardBreakdown>,
    pub loss: LossBreakdown,
    pub baseline_used: f64,
    pub policy: FramePolicy,
}

/// Runs `k` episodes on one video and returns the gradient of the training
/// objective. The baseline is read before and updated after.
pub fn policy_gradient_step(
    params: &ModelParams,
    video: &TrainVideo,
    cfg: &TrainConfig,
    baseline: &mut Baseline,
    rng: &mut ChaCha8Rng,
) -> Result<StepOutput> {
    let mut tape = Tape::new();
    let ids = params.bind(&mut tape);
    let x = tape.leaf(video.features.clone());
    let z_full = model::logits_on_tape(&mut tape, &params.config, &ids, x)?;
    let z = tape.truncate(z_full, video.frame_count())?;
    let p = tape.sigmoid(z);
    let probs = tape.value(p).data().to_vec();

    let traces: Vec<ActionTrace> = (0..cfg.episodes).map(|_| sample_actions(&probs, rng)).collect();
    let rewards: Vec<RewardBreakdown> = traces
        .par_iter()
        .map(|a| rewards(&video.frames, a, cfg.use_rep, cfg.use_div))
        .collect::<Result<_>>()?;
    let mean_r = rewards.iter().map(|r| r.total).sum::<f64>() / rewards.len() as f64;
    if baseline.count == 0 {
        baseline.c = mean_r;
    }
    let c = baseline.c;

    let mut loss = LossBreakdown {
        reward: mean_r,
        ..Default::default()
    };
    let reg_p = loss_reg_proportion_on_tape(&mut tape, p, cfg.epsilon);
    loss.reg_p = tape.value(reg_p).item();
    let mut objective = reg_p;
    match loss_reg_binary_on_tape(&mut tape, p) {
        _ if cfg.lambda == 0.0 => {}
        Ok(b) => {
            loss.reg_b = tape.value(b).item();
            let wb = tape.scale(b, cfg.lambda);
            objective = tape.add(objective, wb)?;
        }
        Err(Error::Saturated) => loss.reg_b = SATURATED_PENALTY,
        Err(e) => return Err(e),
    }
    if cfg.paradigm == Paradigm::Supervised {
        let target = video.p_star.as_ref().ok_or_else(|| {
            Error::Config(format!("supervised training needs annotations for {}", video.id))
        })?;
        let pred = loss_pred_on_tape(&mut tape, p, &Tensor::from_vec(target.clone()))?;
        loss.pred = tape.value(pred).item();
        objective = tape.add(objective, pred)?;
    }
    if cfg.use_rep || cfg.use_div {
        let episodes: Vec<(ActionTrace, f64)> = traces
            .into_iter()
            .zip(&rewards)
            .map(|(a, r)| (a, r.total))
            .collect();
        let pg = reinforce_surrogate(&mut tape, z, &episodes, c)?;
        objective = tape.add(objective, pg)?;
    }
    loss.total = loss.pred + loss.reg_p + cfg.lambda * loss.reg_b - loss.reward;

    let g = tape.backward(objective)?;
    let grads: Vec<Tensor> = ids.iter().map(|&id| g.wrt(&tape, id)).collect();
    for (i, t) in grads.iter().enumerate() {
        if let Some(pos) = t.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient for {} at coordinate {pos} on video {} (rewards {:?}, baseline {c})",
                params.names[i], video.id, rewards
            )));
        }
    }
    baseline.update(mean_r, cfg.baseline_decay);
    Ok(StepOutput {
        grads,
        rewards,
        loss,
        baseline_used: c,
        policy: FramePolicy { p: probs },
    })
}

/// SGD with momentum and L2 weight decay applied to the gradient.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(params: &ModelParams, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: params.tensors.iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &[Tensor], lr: f64) {
        for ((t, g), v) in params.tensors.iter_mut().zip(grads).zip(&mut self.velocity) {
            let data = t.data_mut();
            for ((w, &gi), vi) in data.iter_mut().zip(g.data()).zip(v.iter_mut()) {
                let d = gi + self.weight_decay * *w;
                *vi = self.momentum * *vi + d;
                *w -= lr * *vi;
            }
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub video: String,
    pub r_rep: f64,
    pub r_div: f64,
    pub reward: f64,
    pub baseline: f64,
    pub loss_reg_p: f64,
    pub loss_reg_b: f64,
    pub loss_pred: f64,
    pub loss: f64,
    pub lr: f64,
    pub empty_episodes: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub r_rep: f64,
    pub r_div: f64,
    pub reward: f64,
    pub loss_reg_p: f64,
    pub loss_reg_b: f64,
    pub loss_pred: f64,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Final parameters, or the last finite ones if training diverged.
    pub params: ModelParams,
    pub epochs: Vec<EpochMetrics>,
    pub diverged: Option<String>,
}

/// Trains from a fresh initialization drawn with `seed`.
pub fn train(
    videos: &[TrainVideo],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    seed: u64,
    log: &mut dyn FnMut(&StepRecord),
) -> Result<TrainOutcome> {
    let params = model::init_params(model_cfg, seed)?;
    train_from(params, videos, cfg, seed, log)
}

pub fn train_from(
    mut params: ModelParams,
    videos: &[TrainVideo],
    cfg: &TrainConfig,
    seed: u64,
    log: &mut dyn FnMut(&StepRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if videos.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    if cfg.paradigm == Paradigm::Supervised {
        if let Some(v) = videos.iter().find(|v| v.p_star.is_none()) {
            return Err(Error::Config(format!(
                "supervised training needs annotations; {} has none",
                v.id
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let mut opt = Sgd::new(&params, cfg.momentum, cfg.weight_decay);
    let mut baselines = vec![Baseline::default(); videos.len()];
    let mut order: Vec<usize> = (0..videos.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut m = EpochMetrics {
            epoch,
            lr,
            ..Default::default()
        };
        for &vi in &order {
            let video = &videos[vi];
            let out = match policy_gradient_step(&params, video, cfg, &mut baselines[vi], &mut rng) {
                Ok(o) => o,
                Err(e @ (Error::Numeric(_) | Error::NonFinite { .. })) => {
                    return Ok(TrainOutcome {
                        params,
                        epochs,
                        diverged: Some(format!("epoch {epoch}: {e}")),
                    })
                }
                Err(e) => return Err(e),
            };
            let before = params.clone();
            opt.step(&mut params, &out.grads, lr);
            if params.tensors.iter().any(|t| !t.all_finite()) {
                return Ok(TrainOutcome {
                    params: before,
                    epochs,
                    diverged: Some(format!("epoch {epoch}: parameters became non-finite on {}", video.id)),
                });
            }
            let k = out.rewards.len() as f64;
            let rec = StepRecord {
                epoch,
                video: video.id.clone(),
                r_rep: out.rewards.iter().map(|r| r.r_rep).sum::<f64>() / k,
                r_div: out.rewards.iter().map(|r| r.r_div).sum::<f64>() / k,
                reward: out.loss.reward,
                baseline: out.baseline_used,
                loss_reg_p: out.loss.reg_p,
                loss_reg_b: out.loss.reg_b,
                loss_pred: out.loss.pred,
                loss: out.loss.total,
                lr,
                empty_episodes: out.rewards.iter().filter(|r| r.empty).count(),
            };
            log(&rec);
            m.r_rep += rec.r_rep;
            m.r_div += rec.r_div;
            m.reward += rec.reward;
            m.loss_reg_p += rec.loss_reg_p;
            m.loss_reg_b += rec.loss_reg_b;
            m.loss_pred += rec.loss_pred;
            m.loss += rec.loss;
        }
        let n = videos.len() as f64;
        m.r_rep /= n;
        m.r_div /= n;
        m.reward /= n;
        m.loss_reg_p /= n;
        m.loss_reg_b /= n;
        m.loss_pred /= n;
        m.loss /= n;
        epochs.push(m);
    }
    Ok(TrainOutcome {
        params,
        epochs,
        diverged: None,
    })
}
