//! PPO over vectorised market environments, and the retraining schedule
//! that follows every PPO update with a monotonicity step.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{PriceSeries, STEPS_PER_DAY};
use crate::env::{MarketData, MarketEnv};
use crate::error::{Error, Result};
use crate::ess::EssParams;
use crate::features::OBS_DIM;
use crate::nn::{Adam, AdamConfig, Gradients};
use crate::policy::{
    monotonicity_loss, monotonicity_metric, BidMode, GaussianHead, PolicyNetwork, PriceRange, ReferenceLevels,
    LOG_STD_SLOPE,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub n_envs: usize,
    pub gamma: f64,
    pub lr_actor: f64,
    pub lr_critic: f64,
    pub clip_eps: f64,
    /// Steps per environment per update.
    pub rollout_horizon: usize,
    pub minibatch_size: usize,
    pub epochs: usize,
    pub gae_lambda: f64,
    /// Total environment steps, summed over all environments.
    pub total_steps: u64,
    pub mono_batch: usize,
    pub mono_weight: f64,
    /// Gradient steps per monotonicity phase, each on a fresh batch.
    pub mono_steps: usize,
    /// Finite-difference step as a fraction of the price range width.
    pub mono_step_fraction: f64,
    /// Fixed observations on which the monotonicity loss and metric are logged.
    pub probe_size: usize,
    pub hidden: usize,
    pub entropy_coef: f64,
    pub max_grad_norm: f64,
    /// Critic output scale in $; derived from the data when absent.
    pub value_scale: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_envs: 256,
            gamma: 0.9999,
            lr_actor: 3e-4,
            lr_critic: 1e-3,
            clip_eps: 0.2,
            rollout_horizon: STEPS_PER_DAY,
            minibatch_size: 4096,
            epochs: 4,
            gae_lambda: 0.95,
            total_steps: 5_000_000,
            mono_batch: 1024,
            mono_weight: 1.0,
            mono_steps: 1,
            mono_step_fraction: 0.01,
            probe_size: 32,
            hidden: 256,
            entropy_coef: 0.0,
            max_grad_norm: 0.5,
            value_scale: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParams(m.to_string()));
        if self.n_envs == 0 || self.rollout_horizon == 0 || self.minibatch_size == 0 || self.epochs == 0 {
            return bad("n_envs, rollout_horizon, minibatch_size and epochs must be positive");
        }
        if self.hidden == 0 || self.total_steps == 0 || self.mono_batch == 0 || self.probe_size == 0 || self.mono_steps == 0 {
            return bad("hidden, total_steps, mono_batch, mono_steps and probe_size must be positive");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must lie in (0, 1]");
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return bad("clip_eps must lie in (0, 1)");
        }
        if !(self.gae_lambda >= 0.0 && self.gae_lambda <= 1.0) {
            return bad("gae_lambda must lie in [0, 1]");
        }
        if !(self.lr_actor > 0.0 && self.lr_critic > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(self.mono_weight >= 0.0 && self.entropy_coef >= 0.0 && self.max_grad_norm > 0.0) {
            return bad("mono_weight and entropy_coef must be non-negative, max_grad_norm positive");
        }
        if !(self.mono_step_fraction > 0.0 && self.mono_step_fraction < 1.0) {
            return bad("mono_step_fraction must lie in (0, 1)");
        }
        if let Some(s) = self.value_scale {
            if !(s.is_finite() && s > 0.0) {
                return bad("value_scale must be positive");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub observation: [f64; OBS_DIM],
    pub price: f64,
    /// Raw sampled action; only the first `action_dim` entries are used.
    pub action: [f64; 4],
    pub log_prob: f64,
    pub reward: f64,
    pub value: f64,
    pub done: bool,
    /// Power cleared by the market before discretisation and clamping.
    pub market_power: f64,
}

/// Transitions stored step-major: index `step * n_envs + env`.
#[derive(Debug, Clone)]
pub struct RolloutBatch {
    pub n_envs: usize,
    pub horizon: usize,
    pub transitions: Vec<Transition>,
    /// Critic value of each environment's state after the last step.
    pub last_values: Vec<f64>,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    /// GAE advantages and returns, computed per environment.
    pub fn advantages(&self, gamma: f64, lam: f64) -> (Vec<f64>, Vec<f64>) {
        let n = self.n_envs;
        let mut adv = vec![0.0; self.len()];
        let mut ret = vec![0.0; self.len()];
        for e in 0..n {
            let idx: Vec<usize> = (0..self.horizon).map(|s| s * n + e).collect();
            let rewards: Vec<f64> = idx.iter().map(|&i| self.transitions[i].reward).collect();
            let dones: Vec<bool> = idx.iter().map(|&i| self.transitions[i].done).collect();
            let mut values: Vec<f64> = idx.iter().map(|&i| self.transitions[i].value).collect();
            values.push(self.last_values[e]);
            let (a, r) = compute_gae(&rewards, &values, &dones, gamma, lam);
            for (k, &i) in idx.iter().enumerate() {
                adv[i] = a[k];
                ret[i] = r[k];
            }
        }
        (adv, ret)
    }
}

/// Steps every environment `horizon` times under `policy`.
///
/// With `stochastic` false the actor mean is played; the stored log-prob is
/// still that of the Gaussian head.
pub fn rollout<R: Rng>(
    envs: &mut [MarketEnv],
    policy: &PolicyNetwork,
    horizon: usize,
    stochastic: bool,
    rng: &mut R,
) -> Result<RolloutBatch> {
    let n = envs.len();
    let in_dim = policy.mode.actor_input_dim();
    let dim = policy.action_dim();
    let mut transitions = Vec::with_capacity(n * horizon);
    let mut actor_x = Array2::zeros((n, in_dim));
    let mut critic_x = Array2::zeros((n, OBS_DIM));
    let fill_obs = |envs: &[MarketEnv], x: &mut Array2<f64>| {
        for (i, env) in envs.iter().enumerate() {
            for (j, v) in env.observation().iter().enumerate() {
                x[[i, j]] = *v;
            }
        }
    };
    for _ in 0..horizon {
        fill_obs(envs, &mut critic_x);
        for (i, env) in envs.iter().enumerate() {
            let row = policy.actor_input(&env.observation(), env.price());
            for (j, v) in row.into_iter().enumerate() {
                actor_x[[i, j]] = v;
            }
        }
        let out = policy.actor.forward(actor_x.view())?;
        let values = policy.values(critic_x.view())?;
        for (i, env) in envs.iter_mut().enumerate() {
            let head = GaussianHead::from_row(out.row(i).as_slice().expect("standard layout"), dim);
            let sampled = if stochastic { head.sample(rng) } else { head.mean.clone() };
            let log_prob = head.log_prob(&sampled);
            let observation = env.observation();
            let price = env.price();
            let market_power = policy.power_from_action(&sampled, price);
            let outcome = env.step(market_power);
            let mut action = [0.0; 4];
            action[..dim].copy_from_slice(&sampled);
            let t = Transition {
                observation,
                price,
                action,
                log_prob,
                reward: outcome.settlement.net_income,
                value: values[i],
                done: outcome.done,
                market_power,
            };
            if !(t.log_prob.is_finite() && t.reward.is_finite()) {
                return Err(Error::NonFinite("rollout produced a non-finite log-prob or reward".into()));
            }
            transitions.push(t);
        }
    }
    fill_obs(envs, &mut critic_x);
    let last_values = policy.values(critic_x.view())?;
    Ok(RolloutBatch {
        n_envs: n,
        horizon,
        transitions,
        last_values,
    })
}

/// Generalised advantage estimates for one trajectory. `values` carries one
/// extra bootstrap entry; `dones[t]` cuts the recursion after step `t`.
pub fn compute_gae(rewards: &[f64], values: &[f64], dones: &[bool], gamma: f64, lam: f64) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    assert_eq!(values.len(), n + 1, "values need a bootstrap entry");
    assert_eq!(dones.len(), n);
    let mut adv = vec![0.0; n];
    let mut next = 0.0;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * values[t + 1] * live - values[t];
        next = delta + gamma * lam * live * next;
        adv[t] = next;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, returns)
}

/// Zero mean, unit variance (left centred only when the variance vanishes).
pub fn normalize(xs: &mut [f64]) {
    if xs.is_empty() {
        return;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    for x in xs.iter_mut() {
        *x -= mean;
        if sd > 1e-12 {
            *x /= sd;
        }
    }
}

/// Clipped surrogate `min(r A, clip(r, 1-eps, 1+eps) A)` and whether its
/// gradient passes through `r`.
pub fn clipped_surrogate(ratio: f64, advantage: f64, eps: f64) -> (f64, bool) {
    let unclipped = ratio * advantage;
    let clipped = ratio.clamp(1.0 - eps, 1.0 + eps) * advantage;
    if unclipped <= clipped {
        (unclipped, true)
    } else {
        (clipped, false)
    }
}

#[derive(Debug, Clone)]
pub struct Optimizers {
    pub actor: Adam,
    pub critic: Adam,
    /// Separate moment estimates for monotonicity steps on the actor, whose
    /// gradients are orders of magnitude smaller than the PPO ones.
    pub monotone: Adam,
}

impl Optimizers {
    pub fn new(policy: &PolicyNetwork, config: &TrainConfig) -> Self {
        Self {
            actor: Adam::new(AdamConfig::with_lr(config.lr_actor), &policy.actor),
            critic: Adam::new(AdamConfig::with_lr(config.lr_critic), &policy.critic),
            monotone: Adam::new(AdamConfig::with_lr(config.lr_actor), &policy.actor),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct UpdateStats {
    pub actor_loss: f64,
    pub critic_loss: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
}

/// Actor loss `-mean(surrogate) - c * mean(entropy)` on one minibatch and
/// its gradient with respect to the actor outputs.
pub fn actor_objective(
    policy: &PolicyNetwork,
    outputs: &Array2<f64>,
    samples: &[&Transition],
    advantages: &[f64],
    config: &TrainConfig,
) -> (f64, Array2<f64>, f64, f64) {
    let b = samples.len() as f64;
    let dim = policy.action_dim();
    let mut grad = Array2::zeros(outputs.raw_dim());
    let (mut loss, mut kl, mut clipped) = (0.0, 0.0, 0usize);
    for (i, (t, &a)) in samples.iter().zip(advantages).enumerate() {
        let row = outputs.row(i);
        let head = GaussianHead::from_row(row.as_slice().expect("standard layout"), dim);
        let log_ratio = head.log_prob(&t.action[..dim]) - t.log_prob;
        let ratio = log_ratio.exp();
        let (surrogate, active) = clipped_surrogate(ratio, a, config.clip_eps);
        loss -= surrogate / b;
        loss -= config.entropy_coef * head.entropy() / b;
        kl += (ratio - 1.0 - log_ratio) / b;
        if (ratio - 1.0).abs() > config.clip_eps {
            clipped += 1;
        }
        let dl_dlogp = if active { -a * ratio / b } else { 0.0 };
        for j in 0..dim {
            let sd = head.log_std[j].exp();
            let z = (t.action[j] - head.mean[j]) / sd;
            grad[[i, j]] = dl_dlogp * z / sd;
            grad[[i, dim + j]] = (dl_dlogp * (z * z - 1.0) - config.entropy_coef / b) * LOG_STD_SLOPE;
        }
    }
    (loss, grad, kl, clipped as f64 / b)
}

/// Squared-error critic loss `0.5 * mean((v - target)^2)` and its gradient
/// with respect to the critic outputs.
pub fn critic_objective(outputs: &Array2<f64>, targets: &[f64]) -> (f64, Array2<f64>) {
    let b = targets.len() as f64;
    let mut grad = Array2::zeros((targets.len(), 1));
    let mut loss = 0.0;
    for (r, &target) in targets.iter().enumerate() {
        let err = outputs[[r, 0]] - target;
        loss += 0.5 * err * err / b;
        grad[[r, 0]] = err / b;
    }
    (loss, grad)
}

/// Actor loss on `samples` with its gradient over the actor parameters,
/// plus the approximate KL and clip fraction.
pub fn actor_loss_and_grads(
    policy: &PolicyNetwork,
    samples: &[&Transition],
    advantages: &[f64],
    config: &TrainConfig,
) -> Result<(f64, Gradients, f64, f64)> {
    let mut x = Array2::zeros((samples.len(), policy.mode.actor_input_dim()));
    for (r, t) in samples.iter().enumerate() {
        for (j, v) in policy.actor_input(&t.observation, t.price).into_iter().enumerate() {
            x[[r, j]] = v;
        }
    }
    let cache = policy.actor.forward_cached(x.view())?;
    let (loss, g_out, kl, clip_frac) = actor_objective(policy, cache.output(), samples, advantages, config);
    let (grads, _) = policy.actor.backward(&cache, g_out.view());
    Ok((loss, grads, kl, clip_frac))
}

/// Critic loss against `targets` (already divided by `value_scale`) with its
/// gradient over the critic parameters.
pub fn critic_loss_and_grads(
    policy: &PolicyNetwork,
    samples: &[&Transition],
    targets: &[f64],
) -> Result<(f64, Gradients)> {
    if samples.len() != targets.len() {
        return Err(Error::Shape {
            expected: samples.len(),
            got: targets.len(),
        });
    }
    let mut x = Array2::zeros((samples.len(), OBS_DIM));
    for (r, t) in samples.iter().enumerate() {
        for (j, v) in t.observation.iter().enumerate() {
            x[[r, j]] = *v;
        }
    }
    let cache = policy.critic.forward_cached(x.view())?;
    let (loss, g_out) = critic_objective(cache.output(), targets);
    let (grads, _) = policy.critic.backward(&cache, g_out.view());
    Ok((loss, grads))
}

/// Several epochs of clipped-surrogate actor steps and squared-error critic
/// steps over shuffled minibatches. A non-finite loss or gradient restores
/// the parameters and optimiser state held before the call.
pub fn ppo_update<R: Rng>(
    policy: &mut PolicyNetwork,
    optim: &mut Optimizers,
    batch: &RolloutBatch,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<UpdateStats> {
    let (mut adv, returns) = batch.advantages(config.gamma, config.gae_lambda);
    normalize(&mut adv);
    let saved = (policy.actor.clone(), policy.critic.clone(), optim.clone());
    match ppo_epochs(policy, optim, batch, &adv, &returns, config, rng) {
        Ok(stats) => Ok(stats),
        Err(e) => {
            policy.actor = saved.0;
            policy.critic = saved.1;
            *optim = saved.2;
            Err(e)
        }
    }
}

fn ppo_epochs<R: Rng>(
    policy: &mut PolicyNetwork,
    optim: &mut Optimizers,
    batch: &RolloutBatch,
    adv: &[f64],
    returns: &[f64],
    config: &TrainConfig,
    rng: &mut R,
) -> Result<UpdateStats> {
    let n = batch.len();
    let scale = policy.value_scale;
    let mut order: Vec<usize> = (0..n).collect();
    let mut stats = UpdateStats::default();
    let mut count = 0.0;
    for _ in 0..config.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(config.minibatch_size) {
            let samples: Vec<&Transition> = chunk.iter().map(|&i| &batch.transitions[i]).collect();
            let mb_adv: Vec<f64> = chunk.iter().map(|&i| adv[i]).collect();

            let (actor_loss, mut actor_grads, kl, clip_frac) = actor_loss_and_grads(policy, &samples, &mb_adv, config)?;
            // Critic regresses on returns in units of value_scale.
            let targets: Vec<f64> = chunk.iter().map(|&i| returns[i] / scale).collect();
            let (critic_loss, mut critic_grads) = critic_loss_and_grads(policy, &samples, &targets)?;

            check_finite(actor_loss, &actor_grads, "actor")?;
            check_finite(critic_loss, &critic_grads, "critic")?;
            actor_grads.clip_norm(config.max_grad_norm);
            critic_grads.clip_norm(config.max_grad_norm);
            optim.actor.step(&mut policy.actor, &actor_grads);
            optim.critic.step(&mut policy.critic, &critic_grads);
            if !(policy.actor.is_finite() && policy.critic.is_finite()) {
                return Err(Error::NonFinite("parameters became non-finite".into()));
            }

            stats.actor_loss += actor_loss;
            stats.critic_loss += critic_loss;
            stats.approx_kl += kl;
            stats.clip_fraction += clip_frac;
            count += 1.0;
        }
    }
    stats.actor_loss /= count;
    stats.critic_loss /= count;
    stats.approx_kl /= count;
    stats.clip_fraction /= count;
    Ok(stats)
}

fn check_finite(loss: f64, grads: &Gradients, what: &str) -> Result<()> {
    if loss.is_finite() && grads.sq_norm().is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} loss or gradient is not finite")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub update_index: usize,
    pub env_steps: u64,
    /// Mean net income of the episodes (days) completed during the update.
    pub mean_reward: f64,
    pub actor_loss: f64,
    pub critic_loss: f64,
    /// Monotonicity loss on the fixed probe set; NaN outside NNEB mode.
    pub mono_loss: f64,
    pub mono_metric: f64,
    pub clip_fraction: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingCurve {
    pub rows: Vec<CurveRow>,
}

impl TrainingCurve {
    pub fn write_csv<W: Write>(&self, mut writer: W) -> Result<()> {
        writeln!(writer, "# env_steps counts environment steps summed over all environments")?;
        let mut w = csv::Writer::from_writer(writer);
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::io::BufWriter::new(std::fs::File::create(path)?))
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub policy: PolicyNetwork,
    pub curve: TrainingCurve,
}

/// Default critic scale: one full storage cycle across the price range.
pub fn default_value_scale(ess: &EssParams, range: &PriceRange) -> f64 {
    ess.capacity_mwh * range.width()
}

/// Rollout/update loop shared by first-stage training and retraining.
pub struct Trainer {
    config: TrainConfig,
    policy: PolicyNetwork,
    optim: Optimizers,
    envs: Vec<MarketEnv>,
    rng: ChaCha8Rng,
    price_pool: Vec<f64>,
    probe_obs: Vec<[f64; OBS_DIM]>,
    probe_prices: Vec<f64>,
    episode_returns: Vec<f64>,
    env_steps: u64,
    curve: TrainingCurve,
    monotone_phase: bool,
}

impl Trainer {
    /// Fresh policy in `mode` trained on `data`.
    pub fn new(config: TrainConfig, data: &PriceSeries, ess: EssParams, mode: BidMode) -> Result<Self> {
        config.validate()?;
        ess.validate()?;
        let range = PriceRange::from_quantiles(&data.values)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let scale = config.value_scale.unwrap_or_else(|| default_value_scale(&ess, &range));
        let policy = PolicyNetwork::new(mode, config.hidden, range, scale, ess, &mut rng);
        Self::build(config, policy, data, rng, false)
    }

    /// Continues training `policy` with cleared power snapped to `levels`
    /// and monotonicity steps after every PPO update.
    pub fn resume(config: TrainConfig, mut policy: PolicyNetwork, levels: ReferenceLevels, data: &PriceSeries) -> Result<Self> {
        config.validate()?;
        if policy.mode != BidMode::Nneb {
            return Err(Error::WrongMode {
                expected: BidMode::Nneb.to_string(),
                found: policy.mode.to_string(),
            });
        }
        levels.check_range(&policy.ess)?;
        policy.levels = Some(levels);
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        let monotone = config.mono_weight > 0.0;
        Self::build(config, policy, data, rng, monotone)
    }

    fn build(
        config: TrainConfig,
        policy: PolicyNetwork,
        data: &PriceSeries,
        mut rng: ChaCha8Rng,
        monotone_phase: bool,
    ) -> Result<Self> {
        let market = Arc::new(MarketData::new(data)?);
        let mut starts = market.day_starts();
        if starts.is_empty() {
            starts.push(0);
        }
        let candidates = policy.levels.as_ref().map(|l| l.candidates(&policy.ess));
        let envs = (0..config.n_envs)
            .map(|_| {
                let start = starts[rng.random_range(0..starts.len())];
                let env = MarketEnv::new(market.clone(), policy.ess, start);
                match &candidates {
                    Some(c) => env.with_snapping(c.clone()),
                    None => env,
                }
            })
            .collect();
        let price_pool = data.values.clone();
        let (probe_obs, probe_prices) = if policy.mode == BidMode::Nneb {
            (0..config.probe_size)
                .map(|_| {
                    let t = rng.random_range(0..market.len());
                    let soc = rng.random_range(0.0..=policy.ess.capacity_mwh);
                    let obs = market.observation(t, soc, &policy.ess);
                    (obs, price_pool[rng.random_range(0..price_pool.len())])
                })
                .unzip()
        } else {
            (Vec::new(), Vec::new())
        };
        Ok(Self {
            optim: Optimizers::new(&policy, &config),
            episode_returns: vec![0.0; config.n_envs],
            config,
            policy,
            envs,
            rng,
            price_pool,
            probe_obs,
            probe_prices,
            env_steps: 0,
            curve: TrainingCurve::default(),
            monotone_phase,
        })
    }

    pub fn policy(&self) -> &PolicyNetwork {
        &self.policy
    }

    pub fn env_steps(&self) -> u64 {
        self.env_steps
    }

    pub fn is_finished(&self) -> bool {
        self.env_steps >= self.config.total_steps
    }

    /// One rollout, one PPO update, and (when retraining) `mono_steps`
    /// monotonicity steps.
    pub fn update(&mut self) -> Result<CurveRow> {
        let batch = rollout(
            &mut self.envs,
            &self.policy,
            self.config.rollout_horizon,
            true,
            &mut self.rng,
        )?;
        self.env_steps += batch.len() as u64;
        let mean_reward = self.track_episodes(&batch);
        let stats = ppo_update(&mut self.policy, &mut self.optim, &batch, &self.config, &mut self.rng)?;
        if self.monotone_phase {
            for _ in 0..self.config.mono_steps {
                self.monotone_step(&batch)?;
            }
        }
        let (mono_loss, mono_metric) = self.probe()?;
        let row = CurveRow {
            update_index: self.curve.rows.len(),
            env_steps: self.env_steps,
            mean_reward,
            actor_loss: stats.actor_loss,
            critic_loss: stats.critic_loss,
            mono_loss,
            mono_metric,
            clip_fraction: stats.clip_fraction,
        };
        log::debug!(
            "update {} steps {} reward {:.2} mono {:.4}",
            row.update_index,
            row.env_steps,
            row.mean_reward,
            row.mono_metric
        );
        self.curve.rows.push(row);
        Ok(row)
    }

    pub fn run(mut self) -> Result<TrainOutcome> {
        while !self.is_finished() {
            self.update()?;
        }
        Ok(TrainOutcome {
            policy: self.policy,
            curve: self.curve,
        })
    }

    /// Mean return of episodes finished in `batch`; when none finished, the
    /// per-step mean scaled to a day.
    fn track_episodes(&mut self, batch: &RolloutBatch) -> f64 {
        let mut finished = Vec::new();
        for (i, t) in batch.transitions.iter().enumerate() {
            let e = i % batch.n_envs;
            self.episode_returns[e] += t.reward;
            if t.done {
                finished.push(self.episode_returns[e]);
                self.episode_returns[e] = 0.0;
            }
        }
        if finished.is_empty() {
            let total: f64 = batch.transitions.iter().map(|t| t.reward).sum();
            total / batch.len() as f64 * STEPS_PER_DAY as f64
        } else {
            finished.iter().sum::<f64>() / finished.len() as f64
        }
    }

    fn monotone_step(&mut self, batch: &RolloutBatch) -> Result<()> {
        let (obs, prices): (Vec<[f64; OBS_DIM]>, Vec<f64>) = (0..self.config.mono_batch)
            .map(|_| {
                let t = &batch.transitions[self.rng.random_range(0..batch.len())];
                (t.observation, self.price_pool[self.rng.random_range(0..self.price_pool.len())])
            })
            .unzip();
        let h = self.config.mono_step_fraction * self.policy.price_range.width();
        let mut m = monotonicity_loss(&self.policy, &obs, &prices, h)?;
        if m.loss == 0.0 {
            return Ok(());
        }
        m.grads.scale(self.config.mono_weight);
        check_finite(m.loss, &m.grads, "monotonicity")?;
        m.grads.clip_norm(self.config.max_grad_norm);
        self.optim.monotone.step(&mut self.policy.actor, &m.grads);
        Ok(())
    }

    fn probe(&self) -> Result<(f64, f64)> {
        if self.policy.mode != BidMode::Nneb {
            return Ok((f64::NAN, f64::NAN));
        }
        let h = self.config.mono_step_fraction * self.policy.price_range.width();
        let loss = monotonicity_loss(&self.policy, &self.probe_obs, &self.probe_prices, h)?.loss;
        Ok((loss, monotonicity_metric(&self.policy, &self.probe_obs)?))
    }
}

/// First-stage training of a fresh policy.
pub fn train(config: TrainConfig, data: &PriceSeries, ess: EssParams, mode: BidMode) -> Result<TrainOutcome> {
    Trainer::new(config, data, ess, mode)?.run()
}

/// Monotone, discrete retraining of a first-stage NNEB policy.
pub fn retrain(
    policy: PolicyNetwork,
    levels: ReferenceLevels,
    config: TrainConfig,
    data: &PriceSeries,
) -> Result<TrainOutcome> {
    Trainer::resume(config, policy, levels, data)?.run()
}

/// Observations met by `policy` on `data` from `n` random days,
/// for held-out monotonicity evaluation.
pub fn sample_observations(
    policy: &PolicyNetwork,
    data: &MarketData,
    n: usize,
    seed: u64,
) -> Vec<[f64; OBS_DIM]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let t = rng.random_range(0..data.len());
            let soc = rng.random_range(0.0..=policy.ess.capacity_mwh);
            data.observation(t, soc, &policy.ess)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_prices, SynthSpec};
    use crate::nn::Mlp;

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            n_envs: 2,
            rollout_horizon: 48,
            minibatch_size: 32,
            epochs: 2,
            total_steps: 960,
            hidden: 8,
            mono_batch: 16,
            probe_size: 4,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn gae_one_step_td() {
        let (gamma, v, r) = (0.9, 3.0, 2.0);
        let (adv, ret) = compute_gae(&[r], &[v, v], &[false], gamma, 0.0);
        assert!((adv[0] - (r + gamma * v - v)).abs() < 1e-12);
        assert!((ret[0] - (r + gamma * v)).abs() < 1e-12);
    }

    #[test]
    fn gae_monte_carlo_limit() {
        let rewards = [1.0, -2.0, 0.5, 4.0];
        let gamma = 0.8;
        let (adv, _) = compute_gae(&rewards, &[0.0; 5], &[false; 4], gamma, 1.0);
        for t in 0..4 {
            let g: f64 = (t..4).map(|k| gamma.powi((k - t) as i32) * rewards[k]).sum();
            assert!((adv[t] - g).abs() < 1e-12);
        }
    }

    #[test]
    fn gae_matches_direct_summation() {
        // A_t = sum_l (gamma lam)^l delta_{t+l}, truncated at the first done.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let n = rng.random_range(1..12);
            let rewards: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
            let values: Vec<f64> = (0..=n).map(|_| rng.random_range(-5.0..5.0)).collect();
            let dones: Vec<bool> = (0..n).map(|_| rng.random_bool(0.2)).collect();
            let (gamma, lam) = (rng.random_range(0.5..1.0), rng.random_range(0.0..1.0));
            let (adv, _) = compute_gae(&rewards, &values, &dones, gamma, lam);
            for t in 0..n {
                let mut total = 0.0;
                let mut w = 1.0;
                for k in t..n {
                    let live = if dones[k] { 0.0 } else { 1.0 };
                    total += w * (rewards[k] + gamma * values[k + 1] * live - values[k]);
                    if dones[k] {
                        break;
                    }
                    w *= gamma * lam;
                }
                assert!((adv[t] - total).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn surrogate_identity_ratio_and_clip_region() {
        assert_eq!(clipped_surrogate(1.0, 2.5, 0.2), (2.5, true));
        // A > 0 beyond 1 + eps: the clipped branch wins and blocks the gradient.
        assert_eq!(clipped_surrogate(1.5, 1.0, 0.2).1, false);
        assert!((clipped_surrogate(1.5, 1.0, 0.2).0 - 1.2).abs() < 1e-12);
        // A < 0 below 1 - eps likewise.
        assert_eq!(clipped_surrogate(0.5, -1.0, 0.2).1, false);
        // A < 0 above 1 + eps keeps the (more pessimistic) unclipped term.
        assert_eq!(clipped_surrogate(1.5, -1.0, 0.2), (-1.5, true));
    }

    fn self_policy(hidden: usize) -> PolicyNetwork {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        PolicyNetwork::new(
            BidMode::SelfSchedule,
            hidden,
            PriceRange::new(0.0, 100.0).unwrap(),
            100.0,
            EssParams::default(),
            &mut rng,
        )
    }

    #[test]
    fn single_sample_surrogate_by_hand() {
        let policy = self_policy(4);
        let config = TrainConfig::default();
        // Output row: mean 0.1, log-std y = 0 -> log_std -2.
        let outputs = Array2::from_shape_vec((1, 2), vec![0.1, 0.0]).unwrap();
        let t = Transition {
            observation: [0.0; OBS_DIM],
            price: 0.0,
            action: [0.2, 0.0, 0.0, 0.0],
            log_prob: -1.0,
            reward: 0.0,
            value: 0.0,
            done: false,
            market_power: 0.0,
        };
        let sd = (-2.0f64).exp();
        let z = 0.1 / sd;
        let logp = -0.5 * z * z + 2.0 - 0.5 * (2.0 * std::f64::consts::PI).ln();
        let ratio = (logp + 1.0).exp();
        let adv = 0.7;
        let expected = -(ratio.min(1.2) * adv).min(ratio * adv);
        let (loss, grad, _, _) = actor_objective(&policy, &outputs, &[&t], &[adv], &config);
        assert!((loss - expected).abs() < 1e-12);
        // ratio is far above 1.2 here, so the clip blocks the gradient.
        assert!(ratio > 1.2);
        assert!(grad.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn actor_gradient_matches_finite_difference() {
        let policy = self_policy(4);
        let config = TrainConfig {
            entropy_coef: 0.05,
            ..TrainConfig::default()
        };
        let outputs = Array2::from_shape_vec((2, 2), vec![0.1, -0.3, -0.2, 0.4]).unwrap();
        let mk = |a: f64, lp: f64| Transition {
            observation: [0.0; OBS_DIM],
            price: 0.0,
            action: [a, 0.0, 0.0, 0.0],
            log_prob: lp,
            reward: 0.0,
            value: 0.0,
            done: false,
            market_power: 0.0,
        };
        let ts = [mk(0.12, 0.9), mk(-0.25, 0.1)];
        let refs: Vec<&Transition> = ts.iter().collect();
        let adv = [0.8, -0.4];
        let (_, grad, _, _) = actor_objective(&policy, &outputs, &refs, &adv, &config);
        let eps = 1e-6;
        for i in 0..2 {
            for j in 0..2 {
                let mut up = outputs.clone();
                up[[i, j]] += eps;
                let mut dn = outputs.clone();
                dn[[i, j]] -= eps;
                let fd = (actor_objective(&policy, &up, &refs, &adv, &config).0
                    - actor_objective(&policy, &dn, &refs, &adv, &config).0)
                    / (2.0 * eps);
                assert!((fd - grad[[i, j]]).abs() < 1e-6, "{i},{j}: {fd} vs {}", grad[[i, j]]);
            }
        }
    }

    fn envs(n: usize, days: usize) -> Vec<MarketEnv> {
        let data = Arc::new(MarketData::new(&synth_prices(5, days, &SynthSpec::default())).unwrap());
        (0..n).map(|i| MarketEnv::new(data.clone(), EssParams::default(), i * 17)).collect()
    }

    #[test]
    fn zero_policy_rollout_earns_nothing() {
        let mut policy = self_policy(4);
        policy.actor = Mlp::zeros(&policy.actor.widths());
        let mut e = envs(3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = rollout(&mut e, &policy, 100, false, &mut rng).unwrap();
        assert_eq!(batch.len(), 300);
        assert!(batch.transitions.iter().all(|t| t.reward == 0.0 && t.observation[14] == 0.5));
    }

    #[test]
    fn rollout_is_deterministic() {
        let policy = self_policy(8);
        let run = || {
            let mut e = envs(1, 2);
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            rollout(&mut e, &policy, 200, true, &mut rng).unwrap().transitions
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn non_finite_update_restores_parameters() {
        let mut policy = self_policy(4);
        let config = tiny_config();
        let mut e = envs(2, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut batch = rollout(&mut e, &policy, 20, true, &mut rng).unwrap();
        batch.transitions[3].reward = f64::NAN;
        let mut optim = Optimizers::new(&policy, &config);
        let before = policy.clone();
        let err = ppo_update(&mut policy, &mut optim, &batch, &config, &mut rng).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
        assert_eq!(policy, before);
    }

    #[test]
    fn tiny_training_run_logs_every_update() {
        let data = synth_prices(1, 3, &SynthSpec::default());
        let out = train(tiny_config(), &data, EssParams::default(), BidMode::Nneb).unwrap();
        assert_eq!(out.curve.rows.len(), 10);
        assert!(out.curve.rows.windows(2).all(|w| w[1].env_steps > w[0].env_steps));
        assert!(out.curve.rows.iter().all(|r| r.mono_metric >= 0.0 && r.mono_metric <= 1.0));
        let mut buf = Vec::new();
        out.curve.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.lines().nth(1).unwrap().starts_with("update_index,env_steps,mean_reward"));
    }

    #[test]
    fn training_is_reproducible() {
        let data = synth_prices(1, 3, &SynthSpec::default());
        let config = TrainConfig { n_envs: 1, ..tiny_config() };
        let a = train(config.clone(), &data, EssParams::default(), BidMode::TwoPair).unwrap();
        let b = train(config, &data, EssParams::default(), BidMode::TwoPair).unwrap();
        assert_eq!(a.policy, b.policy);
        assert_eq!(a.curve.rows.len(), b.curve.rows.len());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { clip_eps: 1.0, ..TrainConfig::default() },
            TrainConfig { gamma: 0.0, ..TrainConfig::default() },
            TrainConfig { n_envs: 0, ..TrainConfig::default() },
            TrainConfig { value_scale: Some(-1.0), ..TrainConfig::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }
}
