//! PPO for the recurrent policy: rollouts against two rule-based agents,
//! GAE, a clipped surrogate with clipped value loss and entropy bonus, and
//! Adam on gradients from `net::backward_sequence`.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{AgentError, Policy, RuleBasedAgent};
use crate::encoding::{encode, Observation};
use crate::engine::{GameState, KindSet, Rules, Seat, NUM_KINDS};
use crate::harness::{evaluate_fitness, play_game_with, with_threads, HarnessError};
use crate::net::{backward_sequence, forward_step, init_params, masked_log_softmax, mask_and_select, ArchSpec, HiddenState, Network, Selection, StepCache};
use crate::rng::{derive_seed, stream, GameRng, LANE_AUX};

#[derive(Debug, Error)]
pub enum PpoError {
    #[error("length mismatch: {0}")]
    Length(String),
    #[error("non-finite {0} during the update")]
    NonFinite(&'static str),
    #[error("architecture must carry a value head")]
    NoValueHead,
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error(transparent)]
    Net(#[from] crate::net::NetError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PpoConfig {
    pub clip: f64,
    pub learning_rate: f64,
    pub gamma: f64,
    pub epochs: usize,
    pub games_per_update: u64,
    pub gae_lambda: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub grad_clip_norm: f64,
    /// Optimizer steps per epoch; episodes are split evenly among them.
    pub minibatches: usize,
    /// Multiplier from game score to reward, keeping value targets near unit scale.
    pub reward_scale: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            clip: 0.2,
            learning_rate: 1e-4,
            gamma: 0.99,
            epochs: 4,
            games_per_update: 200,
            gae_lambda: 0.95,
            entropy_coef: 0.01,
            value_coef: 0.5,
            grad_clip_norm: 0.5,
            minibatches: 4,
            reward_scale: 0.04,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), PpoError> {
        let positive = [
            ("clip", self.clip),
            ("learning_rate", self.learning_rate),
            ("gamma", self.gamma),
            ("gae_lambda", self.gae_lambda),
            ("grad_clip_norm", self.grad_clip_norm),
            ("reward_scale", self.reward_scale),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(PpoError::Config(format!("{name} must be positive")));
            }
        }
        if self.clip >= 1.0 {
            return Err(PpoError::Config("clip must be below 1".into()));
        }
        if self.entropy_coef < 0.0 || self.value_coef < 0.0 {
            return Err(PpoError::Config("loss coefficients must be non-negative".into()));
        }
        if self.epochs == 0 || self.games_per_update == 0 || self.minibatches == 0 {
            return Err(PpoError::Config("epochs, games_per_update and minibatches must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Step {
    pub obs: Observation,
    pub legal: KindSet,
    pub action: u8,
    pub logp: f64,
    pub value: f64,
    pub reward: f64,
    pub done: bool,
}

/// The learner's decisions in one game, in order.
pub type Episode = Vec<Step>;

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectories {
    pub episodes: Vec<Episode>,
    /// Learner score of every game, including games where it never acted.
    pub scores: Vec<i32>,
}

impl Trajectories {
    pub fn mean_score(&self) -> f64 {
        self.scores.iter().map(|&s| s as f64).sum::<f64>() / self.scores.len().max(1) as f64
    }
}

struct Learner<'a> {
    arch: ArchSpec,
    params: &'a [f64],
    hidden: HiddenState,
    steps: Episode,
}

impl Policy for Learner<'_> {
    fn begin_game(&mut self) {
        self.hidden = HiddenState::zeros(self.arch);
        self.steps.clear();
    }

    fn discard(&mut self, state: &GameState, seat: Seat, rng: &mut GameRng) -> Result<u8, AgentError> {
        let obs = encode(state, seat)?;
        let (cache, next) = forward_step(self.arch, self.params, &obs.as_f64(), &self.hidden, None);
        let legal = state.discard_options();
        let action = mask_and_select(&cache.logits, legal, Selection::Sample, rng)?;
        self.steps.push(Step {
            obs,
            legal,
            action,
            logp: masked_log_softmax(&cache.logits, legal)[action as usize - 1],
            value: cache.value.unwrap_or(0.0),
            reward: 0.0,
            done: false,
        });
        self.hidden = next;
        Ok(action)
    }
}

/// Play `config.games_per_update` games of the sampling learner against two
/// rule-based agents; the final step of each game carries its score.
pub fn collect(arch: ArchSpec, params: &[f64], config: &PpoConfig, seed: u64, rules: Rules) -> Result<Trajectories, PpoError> {
    if !arch.value_head {
        return Err(PpoError::NoValueHead);
    }
    if params.len() != arch.param_count() {
        return Err(crate::net::NetError::ParamCount {
            expected: arch.param_count(),
            got: params.len(),
        }
        .into());
    }
    let games: Vec<(Episode, i32)> = (0..config.games_per_update)
        .into_par_iter()
        .map(|i| {
            let mut learner = Learner {
                arch,
                params,
                hidden: HiddenState::zeros(arch),
                steps: Vec::new(),
            };
            let (mut a, mut b) = (RuleBasedAgent, RuleBasedAgent);
            let record = play_game_with(&mut [&mut learner, &mut a, &mut b], seed, i, rules)?;
            let score = record.score_of(0);
            let mut steps = learner.steps;
            if let Some(last) = steps.last_mut() {
                last.reward = score as f64 * config.reward_scale;
                last.done = true;
            }
            Ok((steps, score))
        })
        .collect::<Result<_, HarnessError>>()?;
    let (episodes, scores): (Vec<Episode>, Vec<i32>) = games.into_iter().unzip();
    Ok(Trajectories {
        episodes: episodes.into_iter().filter(|e| !e.is_empty()).collect(),
        scores,
    })
}

/// Generalized advantage estimates and returns, before normalization.
pub fn gae(rewards: &[f64], values: &[f64], dones: &[bool], gamma: f64, lambda: f64) -> Result<(Vec<f64>, Vec<f64>), PpoError> {
    let n = rewards.len();
    if values.len() != n || dones.len() != n {
        return Err(PpoError::Length(format!("{n} rewards, {} values, {} dones", values.len(), dones.len())));
    }
    let mut adv = vec![0.0; n];
    let mut next_value = 0.0;
    let mut next_adv = 0.0;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        adv[t] = delta + gamma * lambda * live * next_adv;
        next_value = values[t];
        next_adv = adv[t];
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}

/// Shift and scale to zero mean and unit (population) variance.
pub fn normalize(values: &mut [f64]) {
    if values.is_empty() {
        return;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    for v in values.iter_mut() {
        *v -= mean;
        if sd > 1e-12 {
            *v /= sd;
        }
    }
}

/// A step ready for the loss: behaviour data plus its targets.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainStep {
    pub obs: Observation,
    pub legal: KindSet,
    pub action: u8,
    pub old_logp: f64,
    pub old_value: f64,
    pub advantage: f64,
    pub ret: f64,
}

/// Advantages over the whole batch, normalized, split back into games.
pub fn prepare(trajectories: &Trajectories, config: &PpoConfig) -> Result<Vec<Vec<TrainStep>>, PpoError> {
    let flat: Vec<&Step> = trajectories.episodes.iter().flatten().collect();
    let rewards: Vec<f64> = flat.iter().map(|s| s.reward).collect();
    let values: Vec<f64> = flat.iter().map(|s| s.value).collect();
    let dones: Vec<bool> = flat.iter().map(|s| s.done).collect();
    let (mut adv, ret) = gae(&rewards, &values, &dones, config.gamma, config.gae_lambda)?;
    normalize(&mut adv);
    let mut i = 0;
    Ok(trajectories
        .episodes
        .iter()
        .map(|ep| {
            ep.iter()
                .map(|s| {
                    let t = TrainStep {
                        obs: s.obs,
                        legal: s.legal,
                        action: s.action,
                        old_logp: s.logp,
                        old_value: s.value,
                        advantage: adv[i],
                        ret: ret[i],
                    };
                    i += 1;
                    t
                })
                .collect()
        })
        .collect())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossParts {
    pub total: f64,
    pub policy: f64,
    pub value: f64,
    pub entropy: f64,
}

fn episode_loss(arch: ArchSpec, params: &[f64], steps: &[TrainStep], config: &PpoConfig, n: f64) -> (LossParts, Vec<f64>) {
    let mut hidden = HiddenState::zeros(arch);
    let mut caches: Vec<StepCache> = Vec::with_capacity(steps.len());
    let mut dlogits = Vec::with_capacity(steps.len());
    let mut dvalue = Vec::with_capacity(steps.len());
    let mut parts = LossParts::default();
    for s in steps {
        let (cache, next) = forward_step(arch, params, &s.obs.as_f64(), &hidden, None);
        hidden = next;
        let logp = masked_log_softmax(&cache.logits, s.legal);
        let a = s.action as usize - 1;
        let ratio = (logp[a] - s.old_logp).exp();
        let clipped = ratio.clamp(1.0 - config.clip, 1.0 + config.clip);
        let (unclipped_term, clipped_term) = (ratio * s.advantage, clipped * s.advantage);
        parts.policy -= unclipped_term.min(clipped_term) / n;
        // d(-surrogate)/d logp[a]; zero once the clipped branch binds
        let dlogp_a = if unclipped_term <= clipped_term { -ratio * s.advantage / n } else { 0.0 };

        let probs: Vec<f64> = logp.iter().map(|l| if l.is_finite() { l.exp() } else { 0.0 }).collect();
        let entropy: f64 = -(0..NUM_KINDS).filter(|&j| probs[j] > 0.0).map(|j| probs[j] * logp[j]).sum::<f64>();
        parts.entropy += entropy / n;
        let mut dl = vec![0.0; NUM_KINDS];
        for j in 0..NUM_KINDS {
            if !s.legal.contains(j as u8 + 1) {
                continue;
            }
            let onehot = if j == a { 1.0 } else { 0.0 };
            dl[j] = dlogp_a * (onehot - probs[j]);
            // -c * dH/dz_j with dH/dz_j = -p_j (log p_j + H)
            dl[j] += config.entropy_coef / n * probs[j] * (logp[j] + entropy);
        }

        let v = cache.value.expect("value head");
        let v_clipped = s.old_value + (v - s.old_value).clamp(-config.clip, config.clip);
        let (e1, e2) = ((v - s.ret).powi(2), (v_clipped - s.ret).powi(2));
        parts.value += e1.max(e2) / n;
        let dv = if e1 >= e2 {
            2.0 * (v - s.ret)
        } else if (v - s.old_value).abs() < config.clip {
            2.0 * (v_clipped - s.ret)
        } else {
            0.0
        };
        dvalue.push(config.value_coef * dv / n);
        dlogits.push(dl);
        caches.push(cache);
    }
    let mut grad = vec![0.0; params.len()];
    backward_sequence(arch, params, &caches, &dlogits, &dvalue, &mut grad);
    parts.total = parts.policy + config.value_coef * parts.value - config.entropy_coef * parts.entropy;
    (parts, grad)
}

/// Mean loss over the steps of `batch` and its gradient, with backpropagation
/// through time inside each game. Per-game gradients are summed in order, so
/// the result does not depend on the thread count.
pub fn ppo_loss(arch: ArchSpec, params: &[f64], batch: &[&[TrainStep]], config: &PpoConfig) -> Result<(LossParts, Vec<f64>), PpoError> {
    if !arch.value_head {
        return Err(PpoError::NoValueHead);
    }
    let n = batch.iter().map(|e| e.len()).sum::<usize>() as f64;
    let mut parts = LossParts::default();
    let mut grad = vec![0.0; params.len()];
    if n == 0.0 {
        return Ok((parts, grad));
    }
    let per_game: Vec<(LossParts, Vec<f64>)> = batch.par_iter().map(|e| episode_loss(arch, params, e, config, n)).collect();
    for (p, g) in per_game {
        parts.total += p.total;
        parts.policy += p.policy;
        parts.value += p.value;
        parts.entropy += p.entropy;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    if !parts.total.is_finite() {
        return Err(PpoError::NonFinite("loss"));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(PpoError::NonFinite("gradient"));
    }
    Ok((parts, grad))
}

pub fn grad_norm(grad: &[f64]) -> f64 {
    grad.iter().map(|g| g * g).sum::<f64>().sqrt()
}

/// Rescale to at most `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = grad_norm(grad);
    if norm > max_norm {
        let k = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= k);
    }
    norm
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    /// Mean gradient norm before clipping.
    pub grad_norm: f64,
}

/// `config.epochs` passes over the prepared games, each split into
/// `config.minibatches` shuffled minibatches of whole games.
pub fn update(
    arch: ArchSpec,
    params: &mut [f64],
    games: &[Vec<TrainStep>],
    config: &PpoConfig,
    adam: &mut Adam,
    rng: &mut GameRng,
) -> Result<UpdateStats, PpoError> {
    let mut stats = UpdateStats::default();
    let mut steps = 0.0;
    let mut order: Vec<usize> = (0..games.len()).collect();
    for _ in 0..config.epochs {
        order.shuffle(rng);
        let size = order.len().div_ceil(config.minibatches).max(1);
        for chunk in order.chunks(size) {
            let batch: Vec<&[TrainStep]> = chunk.iter().map(|&i| games[i].as_slice()).collect();
            let (parts, mut grad) = ppo_loss(arch, params, &batch, config)?;
            let norm = clip_grad_norm(&mut grad, config.grad_clip_norm);
            adam.step(params, &grad, config.learning_rate);
            stats.policy_loss += parts.policy;
            stats.value_loss += parts.value;
            stats.entropy += parts.entropy;
            stats.grad_norm += norm;
            steps += 1.0;
        }
    }
    if steps > 0.0 {
        stats.policy_loss /= steps;
        stats.value_loss /= steps;
        stats.entropy /= steps;
        stats.grad_norm /= steps;
    }
    if params.iter().any(|p| !p.is_finite()) {
        return Err(PpoError::NonFinite("parameters"));
    }
    Ok(stats)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct UpdateLog {
    pub update_index: usize,
    pub mean_episode_score: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub grad_norm: f64,
}

/// Trainer state; the parameter vector includes the value head.
#[derive(Clone, Debug)]
pub struct PpoTrainer {
    pub arch: ArchSpec,
    pub params: Vec<f64>,
    pub adam: Adam,
    pub config: PpoConfig,
    pub seed: u64,
    pub rules: Rules,
    pub updates_done: usize,
}

impl PpoTrainer {
    pub fn new(arch: ArchSpec, config: PpoConfig, seed: u64, rules: Rules) -> Result<Self, PpoError> {
        config.validate()?;
        let arch = arch.with_value_head();
        let params = init_params(arch, seed);
        Ok(PpoTrainer {
            adam: Adam::new(params.len()),
            arch,
            params,
            config,
            seed,
            rules,
            updates_done: 0,
        })
    }

    /// One collect, advantage and optimize round on the current pool.
    pub fn step(&mut self) -> Result<UpdateLog, PpoError> {
        let u = self.updates_done as u64;
        let trajectories = collect(self.arch, &self.params, &self.config, derive_seed(self.seed, 2 * u), self.rules)?;
        let games = prepare(&trajectories, &self.config)?;
        let mut rng = stream(derive_seed(self.seed, 2 * u + 1), 0, LANE_AUX);
        let stats = update(self.arch, &mut self.params, &games, &self.config, &mut self.adam, &mut rng)?;
        self.updates_done += 1;
        Ok(UpdateLog {
            update_index: self.updates_done,
            mean_episode_score: trajectories.mean_score(),
            policy_loss: stats.policy_loss,
            value_loss: stats.value_loss,
            entropy: stats.entropy,
            grad_norm: stats.grad_norm,
        })
    }

    /// The policy without its value head.
    pub fn policy(&self) -> Network {
        Network::new(self.arch, self.params.clone()).expect("matching length").policy_only()
    }
}

/// Run `updates` PPO updates on `threads` workers (0 = all).
pub fn train(arch: ArchSpec, config: PpoConfig, updates: usize, seed: u64, rules: Rules, threads: usize, mut on_update: impl FnMut(&UpdateLog) + Send) -> Result<PpoTrainer, PpoError> {
    let mut trainer = PpoTrainer::new(arch, config, seed, rules)?;
    with_threads(threads, || -> Result<(), PpoError> {
        for _ in 0..updates {
            let log = trainer.step()?;
            on_update(&log);
        }
        Ok(())
    })??;
    Ok(trainer)
}

/// Mean greedy score of a policy against two rule-based agents.
pub fn evaluate(policy: Network, games: u64, seed: u64, rules: Rules) -> Result<f64, PpoError> {
    let r = evaluate_fitness(0, Arc::new(policy), games, seed, rules)?;
    Ok(r.total as f64 / games as f64)
}

/// Outcome of comparing the analytic loss gradient with central differences.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GradientCheck {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates whose two probes fall on different sides of a ReLU or clip
    /// boundary, where a central difference is not a derivative.
    pub skipped: usize,
}

/// Games from a sampling rollout with the behaviour log-probabilities and
/// values moved so that some steps are clipped; every offset stays at least
/// 0.1 away from a clip boundary.
pub fn gradient_fixture(arch: ArchSpec, params: &[f64], seed: u64, games: u64) -> Result<Vec<Vec<TrainStep>>, PpoError> {
    let config = PpoConfig {
        games_per_update: games,
        ..PpoConfig::default()
    };
    let mut prepared = prepare(&collect(arch, params, &config, seed, Rules::default())?, &config)?;
    let mut rng = stream(seed, 1, LANE_AUX);
    let offset = |rng: &mut GameRng| {
        let m = if rng.random_bool(0.5) { rng.random_range(0.0..0.1) } else { rng.random_range(0.3..0.6) };
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    };
    for s in prepared.iter_mut().flatten() {
        s.old_logp += offset(&mut rng);
        s.old_value += offset(&mut rng);
    }
    Ok(prepared)
}

/// Every branch the loss takes: active units, ratio and value clip regions.
fn branch_signature(arch: ArchSpec, params: &[f64], games: &[Vec<TrainStep>], config: &PpoConfig) -> Vec<u8> {
    let mut sig = Vec::new();
    for game in games {
        let mut hidden = HiddenState::zeros(arch);
        for s in game {
            let (cache, next) = forward_step(arch, params, &s.obs.as_f64(), &hidden, None);
            hidden = next;
            sig.extend(cache.relu_pattern().into_iter().map(u8::from));
            let ratio = (masked_log_softmax(&cache.logits, s.legal)[s.action as usize - 1] - s.old_logp).exp();
            sig.push(u8::from(ratio > 1.0 - config.clip) + u8::from(ratio > 1.0 + config.clip));
            let v = cache.value.unwrap_or(0.0);
            let d = v - s.old_value;
            let vc = s.old_value + d.clamp(-config.clip, config.clip);
            sig.push(u8::from(d > -config.clip) + u8::from(d > config.clip));
            // inside the window both value branches coincide
            let outside = d.abs() >= config.clip;
            sig.push(u8::from(outside && (v - s.ret).powi(2) >= (vc - s.ret).powi(2)));
        }
    }
    sig
}

/// Smallest gradient magnitude at which relative error is measured.
pub const GRADIENT_FLOOR: f64 = 1e-5;

/// Central differences with step `h` on every coordinate.
pub fn gradient_check(arch: ArchSpec, params: &[f64], games: &[Vec<TrainStep>], config: &PpoConfig, h: f64) -> Result<GradientCheck, PpoError> {
    let refs: Vec<&[TrainStep]> = games.iter().map(|g| g.as_slice()).collect();
    let (_, grad) = ppo_loss(arch, params, &refs, config)?;
    let results: Vec<Option<f64>> = (0..params.len())
        .into_par_iter()
        .map(|i| {
            let mut up = params.to_vec();
            up[i] += h;
            let mut down = params.to_vec();
            down[i] -= h;
            if branch_signature(arch, &up, games, config) != branch_signature(arch, &down, games, config) {
                return Ok(None);
            }
            let fu = ppo_loss(arch, &up, &refs, config)?.0.total;
            let fd = ppo_loss(arch, &down, &refs, config)?.0.total;
            let numeric = (fu - fd) / (2.0 * h);
            // the difference is itself only accurate to O(h^2), so tiny
            // gradients are measured against a floor
            let scale = grad[i].abs().max(numeric.abs()).max(GRADIENT_FLOOR);
            Ok(Some((grad[i] - numeric).abs() / scale))
        })
        .collect::<Result<_, PpoError>>()?;
    let checked: Vec<f64> = results.iter().flatten().copied().collect();
    Ok(GradientCheck {
        max_rel_error: checked.iter().copied().fold(0.0, f64::max),
        checked: checked.len(),
        skipped: results.len() - checked.len(),
    })
}
