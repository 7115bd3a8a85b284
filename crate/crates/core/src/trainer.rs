//! On-policy training loop: rollouts, GAE, and epochs of shuffled minibatch
//! updates on the ratio-shaped objective.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::envs::{mix_seed, AnyEnv, EnvSpec, Environment};
use crate::error::{domain, usage, Error, Result};
use crate::kernels::{KernelFamily, ShapingFunctionSpec};
use crate::policy::{
    forward, greedy_action, loss_and_grad, sample_index, Architecture, LossBatch, LossCoeffs, ParameterVector,
};

// RNG stream identifiers for `mix_seed`.
const STREAM_INIT: u64 = 0;
const STREAM_SHUFFLE: u64 = 1;
const STREAM_ENV_RESET: u64 = 1 << 20;
const STREAM_ACTIONS: u64 = 2 << 20;
const STREAM_EVAL: u64 = 3 << 20;

/// `n_envs * rollout_length` transitions stored env-major: index `e * T + t`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RolloutBatch {
    pub n_envs: usize,
    pub rollout_length: usize,
    pub observations: Vec<Vec<f64>>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub terminated: Vec<bool>,
    pub truncated: Vec<bool>,
    pub old_log_probs: Vec<f64>,
    pub old_values: Vec<f64>,
    /// `V(s_{t+1})` under the rollout parameters. Read only on truncated steps
    /// and at the end of each env's segment; ignored after termination.
    pub next_values: Vec<f64>,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_envs * self.rollout_length;
        let lens = [
            self.observations.len(),
            self.actions.len(),
            self.rewards.len(),
            self.terminated.len(),
            self.truncated.len(),
            self.old_log_probs.len(),
            self.old_values.len(),
            self.next_values.len(),
        ];
        if lens.iter().any(|&l| l != n) {
            return Err(usage(format!("rollout arrays must all have length {n}, got {lens:?}")));
        }
        if self.old_log_probs.iter().any(|&lp| lp > 0.0) {
            return Err(domain("old log-probabilities must be <= 0"));
        }
        let finite = self.rewards.iter().chain(&self.old_log_probs).chain(&self.old_values).chain(&self.next_values)
            .all(|v| v.is_finite())
            && self.observations.iter().flatten().all(|v| v.is_finite());
        if !finite {
            return Err(domain("rollout contains non-finite entries"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaeConfig {
    pub gamma: f64,
    pub lam: f64,
}

impl GaeConfig {
    pub fn new(gamma: f64, lam: f64) -> Result<Self> {
        let cfg = Self { gamma, lam };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.lam) {
            return Err(domain(format!("GAE gamma and lambda must lie in [0, 1], got {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaeOutput {
    pub advantages: Vec<f64>,
    pub value_targets: Vec<f64>,
}

/// Backward GAE recursion over one env's contiguous segment.
///
/// `delta_t = r_t + gamma V(s_{t+1}) (1 - terminated_t) - V(s_t)` and
/// `A_t = delta_t + gamma lambda (1 - done_t) A_{t+1}`, where `done` is
/// terminated or truncated, so the trace never crosses an episode boundary.
pub fn gae_segment(
    rewards: &[f64],
    values: &[f64],
    next_values: &[f64],
    terminated: &[bool],
    truncated: &[bool],
    cfg: GaeConfig,
) -> Vec<f64> {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut running = 0.0;
    for t in (0..n).rev() {
        let bootstrap = if terminated[t] { 0.0 } else { cfg.gamma * next_values[t] };
        let delta = rewards[t] + bootstrap - values[t];
        let carry = if terminated[t] || truncated[t] { 0.0 } else { cfg.gamma * cfg.lam * running };
        running = delta + carry;
        adv[t] = running;
    }
    adv
}

/// Advantages and value targets `R = A + V_old` for a whole rollout.
pub fn compute_gae(batch: &RolloutBatch, cfg: GaeConfig) -> Result<GaeOutput> {
    batch.validate()?;
    cfg.validate()?;
    let t_len = batch.rollout_length;
    let mut advantages = Vec::with_capacity(batch.len());
    for e in 0..batch.n_envs {
        let r = e * t_len..(e + 1) * t_len;
        advantages.extend(gae_segment(
            &batch.rewards[r.clone()],
            &batch.old_values[r.clone()],
            &batch.next_values[r.clone()],
            &batch.terminated[r.clone()],
            &batch.truncated[r],
            cfg,
        ));
    }
    let value_targets = advantages.iter().zip(&batch.old_values).map(|(a, v)| a + v).collect();
    Ok(GaeOutput { advantages, value_targets })
}

/// Mean of `r - 1 - ln r` with `r = exp(new - old)`.
pub fn approx_kl(old_log_probs: &[f64], new_log_probs: &[f64]) -> Result<f64> {
    if old_log_probs.len() != new_log_probs.len() {
        return Err(usage("approx_kl needs equal-length inputs"));
    }
    if old_log_probs.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = old_log_probs
        .iter()
        .zip(new_log_probs)
        .map(|(o, n)| {
            let log_r = n - o;
            log_r.exp_m1() - log_r
        })
        .sum();
    Ok(total / old_log_probs.len() as f64)
}

/// Bias-corrected adaptive-moment optimizer over a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n_params: usize) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; n_params], v: vec![0.0; n_params], t: 0 }
    }

    pub fn steps_taken(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Linear decay to zero over the planned number of updates.
    Linear,
}

/// Which network to train. `Auto` picks tabular for the gridworld (one-hot
/// observations) and the MLP for pole balance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    #[default]
    Auto,
    Tabular,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub kernel: ShapingFunctionSpec,
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
    pub epochs: usize,
    pub minibatch_size: usize,
    pub lambda_val: f64,
    pub lambda_ent: f64,
    pub total_env_steps: usize,
    pub rollout_length: usize,
    pub n_envs: usize,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub advantage_normalization: bool,
    pub max_grad_norm: Option<f64>,
    pub seed: u64,
    pub policy: PolicyKind,
    pub hidden: [usize; 2],
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            kernel: ShapingFunctionSpec::new(KernelFamily::Ano, 0.2).expect("default kernel"),
            learning_rate: 2.5e-4,
            lr_schedule: LrSchedule::Constant,
            epochs: 4,
            minibatch_size: 128,
            lambda_val: 0.5,
            lambda_ent: 0.01,
            total_env_steps: 200_000,
            rollout_length: 128,
            n_envs: 4,
            gamma: 0.99,
            gae_lambda: 0.95,
            advantage_normalization: true,
            max_grad_norm: Some(0.5),
            seed: 0,
            policy: PolicyKind::Auto,
            hidden: [64, 64],
        }
    }
}

impl TrainConfig {
    /// A zero learning rate is accepted (it makes training a no-op, which is
    /// useful for testing); negative or non-finite rates are not.
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config(format!("learning_rate must be finite and >= 0, got {}", self.learning_rate)));
        }
        if self.epochs == 0 || self.minibatch_size == 0 || self.rollout_length == 0 || self.n_envs == 0 {
            return Err(Error::Config("epochs, minibatch_size, rollout_length and n_envs must be >= 1".into()));
        }
        if self.total_env_steps == 0 {
            return Err(Error::Config("total_env_steps must be >= 1".into()));
        }
        if !(self.lambda_val >= 0.0 && self.lambda_ent >= 0.0) {
            return Err(Error::Config("loss coefficients must be non-negative".into()));
        }
        if let Some(clip) = self.max_grad_norm {
            if !(clip.is_finite() && clip > 0.0) {
                return Err(Error::Config(format!("max_grad_norm must be positive, got {clip}")));
            }
        }
        GaeConfig::new(self.gamma, self.gae_lambda).map_err(|e| Error::Config(e.to_string()))?;
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden layer sizes must be >= 1".into()));
        }
        Ok(())
    }

    pub fn architecture(&self, env: &EnvSpec) -> Architecture {
        let (obs_dim, n_actions) = (env.observation_dim(), env.n_actions());
        let tabular = match self.policy {
            PolicyKind::Auto => matches!(env, EnvSpec::GridWorld(_)),
            PolicyKind::Tabular => true,
            PolicyKind::Mlp => false,
        };
        if tabular {
            Architecture::Tabular { obs_dim, n_actions }
        } else {
            Architecture::Mlp { obs_dim, hidden: self.hidden, n_actions }
        }
    }

    pub fn steps_per_update(&self) -> usize {
        self.n_envs * self.rollout_length
    }

    pub fn n_updates(&self) -> usize {
        self.total_env_steps.div_ceil(self.steps_per_update())
    }

    fn coeffs(&self) -> LossCoeffs {
        LossCoeffs { value: self.lambda_val, entropy: self.lambda_ent }
    }
}

/// Per-update aggregates. Loss, KL and gradient-norm fields are means over
/// every minibatch step of every epoch; ratio extrema are taken over all of
/// them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub update_index: usize,
    /// Cumulative environment steps after this update's rollout.
    pub env_steps: usize,
    /// Mean undiscounted return of episodes finished during this rollout;
    /// carries the previous value forward if none finished (0 before the first).
    pub episode_return_mean: f64,
    pub loss_policy: f64,
    pub loss_value: f64,
    pub loss_entropy: f64,
    pub approx_kl: f64,
    pub ratio_min: f64,
    pub ratio_max: f64,
    /// Pre-clipping global gradient norm.
    pub grad_norm: f64,
    pub learning_rate: f64,
    /// Fraction of positive-advantage samples with `r > 1 + 2 eps` in the last epoch.
    pub overshoot_fraction: f64,
    /// `max |r - 1|` on the first minibatch, before any parameter change.
    pub first_step_ratio_deviation: f64,
}

pub const METRICS_HEADER: &str =
    "step,update_index,episode_return_mean,loss_policy,loss_value,loss_entropy,approx_kl,ratio_min,ratio_max,grad_norm";

/// Nine significant digits in scientific notation.
pub fn format_metric(x: f64) -> String {
    format!("{x:.8e}")
}

impl UpdateStats {
    pub fn csv_row(&self) -> String {
        let floats = [
            self.episode_return_mean,
            self.loss_policy,
            self.loss_value,
            self.loss_entropy,
            self.approx_kl,
            self.ratio_min,
            self.ratio_max,
            self.grad_norm,
        ];
        let mut row = format!("{},{}", self.env_steps, self.update_index);
        for f in floats {
            row.push(',');
            row.push_str(&format_metric(f));
        }
        row
    }
}

struct EnvSlot {
    env: AnyEnv,
    obs: Vec<f64>,
    rng: ChaCha8Rng,
    episodes: u64,
    episode_return: f64,
}

/// Holds the parameters, optimizer and live environments between updates.
pub struct Trainer {
    cfg: TrainConfig,
    env_spec: EnvSpec,
    params: ParameterVector,
    optimizer: Adam,
    slots: Vec<EnvSlot>,
    shuffle_rng: ChaCha8Rng,
    update_index: usize,
    env_steps: usize,
    last_return_mean: f64,
}

impl Trainer {
    pub fn new(env_spec: &EnvSpec, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let arch = cfg.architecture(env_spec);
        let params = ParameterVector::init(arch, &mut ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, STREAM_INIT, 0)))?;
        Self::with_params(env_spec, cfg, params)
    }

    pub fn with_params(env_spec: &EnvSpec, cfg: &TrainConfig, params: ParameterVector) -> Result<Self> {
        cfg.validate()?;
        let arch = params.architecture();
        if arch.obs_dim() != env_spec.observation_dim() || arch.n_actions() != env_spec.n_actions() {
            return Err(usage("parameter architecture does not match the environment"));
        }
        let mut slots = Vec::with_capacity(cfg.n_envs);
        for e in 0..cfg.n_envs as u64 {
            let mut env = env_spec.build()?;
            let obs = env.reset(mix_seed(cfg.seed, STREAM_ENV_RESET + e, 0));
            let rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, STREAM_ACTIONS + e, 0));
            slots.push(EnvSlot { env, obs, rng, episodes: 0, episode_return: 0.0 });
        }
        Ok(Self {
            optimizer: Adam::new(params.len()),
            cfg: cfg.clone(),
            env_spec: env_spec.clone(),
            params,
            slots,
            shuffle_rng: ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, STREAM_SHUFFLE, 0)),
            update_index: 0,
            env_steps: 0,
            last_return_mean: 0.0,
        })
    }

    pub fn params(&self) -> &ParameterVector {
        &self.params
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn env_spec(&self) -> &EnvSpec {
        &self.env_spec
    }

    pub fn env_steps(&self) -> usize {
        self.env_steps
    }

    /// Runs every env for `rollout_length` steps with the current parameters.
    /// Returns the batch and the undiscounted returns of episodes that ended.
    pub fn collect_rollout(&mut self) -> Result<(RolloutBatch, Vec<f64>)> {
        let t_len = self.cfg.rollout_length;
        let n = self.cfg.n_envs * t_len;
        let mut batch = RolloutBatch {
            n_envs: self.cfg.n_envs,
            rollout_length: t_len,
            observations: Vec::with_capacity(n),
            actions: Vec::with_capacity(n),
            rewards: Vec::with_capacity(n),
            terminated: Vec::with_capacity(n),
            truncated: Vec::with_capacity(n),
            old_log_probs: Vec::with_capacity(n),
            old_values: Vec::with_capacity(n),
            next_values: Vec::with_capacity(n),
        };
        let mut finished = Vec::new();
        for (e, slot) in self.slots.iter_mut().enumerate() {
            for t in 0..t_len {
                let out = forward(&self.params, &slot.obs)?;
                let a = sample_index(&out.log_probs, &mut slot.rng)?;
                let step = slot.env.step(a)?;
                slot.episode_return += step.reward;
                batch.observations.push(std::mem::take(&mut slot.obs));
                batch.actions.push(a);
                batch.rewards.push(step.reward);
                batch.terminated.push(step.terminated);
                batch.truncated.push(step.truncated);
                batch.old_log_probs.push(out.log_probs[a]);
                batch.old_values.push(out.value);
                // filled in below from the next step's value where possible
                let next_value = if step.truncated || (t + 1 == t_len && !step.terminated) {
                    forward(&self.params, &step.observation)?.value
                } else {
                    0.0
                };
                batch.next_values.push(next_value);
                if step.done() {
                    finished.push(slot.episode_return);
                    slot.episode_return = 0.0;
                    slot.episodes += 1;
                    slot.obs = slot.env.reset(mix_seed(self.cfg.seed, STREAM_ENV_RESET + e as u64, slot.episodes));
                } else {
                    slot.obs = step.observation;
                }
            }
        }
        for e in 0..self.cfg.n_envs {
            for t in 0..t_len - 1 {
                let i = e * t_len + t;
                if !(batch.terminated[i] || batch.truncated[i]) {
                    batch.next_values[i] = batch.old_values[i + 1];
                }
            }
        }
        self.env_steps += n;
        Ok((batch, finished))
    }

    fn current_lr(&self) -> f64 {
        match self.cfg.lr_schedule {
            LrSchedule::Constant => self.cfg.learning_rate,
            LrSchedule::Linear => {
                let frac = 1.0 - self.update_index as f64 / self.cfg.n_updates() as f64;
                self.cfg.learning_rate * frac.max(0.0)
            }
        }
    }

    /// `epochs` passes of reshuffled minibatches over `batch`. The batch is
    /// borrowed immutably, so its old log-probs are fixed for the whole update.
    pub fn update(&mut self, batch: &RolloutBatch, finished_returns: &[f64]) -> Result<UpdateStats> {
        let gae = compute_gae(batch, GaeConfig::new(self.cfg.gamma, self.cfg.gae_lambda)?)?;
        let lr = self.current_lr();
        let coeffs = self.cfg.coeffs();
        let mut order: Vec<usize> = (0..batch.len()).collect();

        let mut sums = [0.0f64; 5]; // policy, value, entropy, kl, grad norm
        let mut n_steps = 0usize;
        let mut ratio_min = f64::INFINITY;
        let mut ratio_max = f64::NEG_INFINITY;
        let mut first_dev = 0.0;
        let (mut positive, mut overshoot) = (0usize, 0usize);

        for epoch in 0..self.cfg.epochs {
            order.shuffle(&mut self.shuffle_rng);
            for chunk in order.chunks(self.cfg.minibatch_size) {
                let mb = self.minibatch(batch, &gae, chunk);
                let out = loss_and_grad(&self.params, &mb, &self.cfg.kernel, coeffs)?;
                let d = &out.diagnostics;
                if n_steps == 0 {
                    first_dev = (d.ratio_max - 1.0).abs().max((1.0 - d.ratio_min).abs());
                    if first_dev > 1e-7 {
                        return Err(Error::Internal(format!(
                            "ratios at the first step of an update deviate from 1 by {first_dev:e}"
                        )));
                    }
                }
                if epoch + 1 == self.cfg.epochs {
                    positive += d.positive_advantages;
                    overshoot += d.overshoots;
                }
                ratio_min = ratio_min.min(d.ratio_min);
                ratio_max = ratio_max.max(d.ratio_max);
                let mut grad = out.grad;
                let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
                if let Some(max) = self.cfg.max_grad_norm {
                    if norm > max {
                        let scale = max / norm;
                        grad.iter_mut().for_each(|g| *g *= scale);
                    }
                }
                self.optimizer.step(self.params.values_mut(), &grad, lr);
                for (s, v) in sums.iter_mut().zip([out.loss_policy, out.loss_value, out.loss_entropy, d.approx_kl, norm]) {
                    *s += v;
                }
                n_steps += 1;
            }
        }
        if self.params.values().iter().any(|v| !v.is_finite()) {
            return Err(Error::Internal("optimizer produced non-finite parameters".into()));
        }
        if !finished_returns.is_empty() {
            self.last_return_mean = finished_returns.iter().sum::<f64>() / finished_returns.len() as f64;
        }
        let k = n_steps as f64;
        let stats = UpdateStats {
            update_index: self.update_index,
            env_steps: self.env_steps,
            episode_return_mean: self.last_return_mean,
            loss_policy: sums[0] / k,
            loss_value: sums[1] / k,
            loss_entropy: sums[2] / k,
            approx_kl: sums[3] / k,
            ratio_min,
            ratio_max,
            grad_norm: sums[4] / k,
            learning_rate: lr,
            overshoot_fraction: if positive == 0 { 0.0 } else { overshoot as f64 / positive as f64 },
            first_step_ratio_deviation: first_dev,
        };
        self.update_index += 1;
        Ok(stats)
    }

    fn minibatch(&self, batch: &RolloutBatch, gae: &GaeOutput, idx: &[usize]) -> LossBatch {
        let mut advantages: Vec<f64> = idx.iter().map(|&i| gae.advantages[i]).collect();
        if self.cfg.advantage_normalization && advantages.len() > 1 {
            let n = advantages.len() as f64;
            let mean = advantages.iter().sum::<f64>() / n;
            let std = (advantages.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
            advantages.iter_mut().for_each(|a| *a = (*a - mean) / (std + 1e-8));
        }
        LossBatch {
            observations: idx.iter().map(|&i| batch.observations[i].clone()).collect(),
            actions: idx.iter().map(|&i| batch.actions[i]).collect(),
            old_log_probs: idx.iter().map(|&i| batch.old_log_probs[i]).collect(),
            advantages,
            returns: idx.iter().map(|&i| gae.value_targets[i]).collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub final_params: ParameterVector,
    pub history: Vec<UpdateStats>,
    pub metrics_csv_path: Option<PathBuf>,
}

/// Trains until `total_env_steps` have been collected. With `out_dir`, the
/// metrics CSV is written to `out_dir/metrics.csv` row by row, so a run that
/// aborts on a non-finite loss leaves the rows before the failure.
pub fn train(env_spec: &EnvSpec, cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(env_spec, cfg)?;
    let (mut writer, path) = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let path = dir.join("metrics.csv");
            let mut w = BufWriter::new(File::create(&path)?);
            w.write_all(METRICS_HEADER.as_bytes())?;
            w.write_all(b"\n")?;
            (Some(w), Some(path))
        }
        None => (None, None),
    };
    let mut history = Vec::with_capacity(cfg.n_updates());
    for _ in 0..cfg.n_updates() {
        let (batch, finished) = trainer.collect_rollout()?;
        let stats = match trainer.update(&batch, &finished) {
            Ok(stats) => stats,
            Err(e) => {
                if let Some(w) = writer.as_mut() {
                    w.flush()?;
                }
                return Err(e);
            }
        };
        log::debug!(
            "update {} steps {} return {:.4} kl {:.3e} ratio [{:.3}, {:.3}]",
            stats.update_index,
            stats.env_steps,
            stats.episode_return_mean,
            stats.approx_kl,
            stats.ratio_min,
            stats.ratio_max
        );
        if let Some(w) = writer.as_mut() {
            w.write_all(stats.csv_row().as_bytes())?;
            w.write_all(b"\n")?;
        }
        history.push(stats);
    }
    if let Some(mut w) = writer {
        w.flush()?;
    }
    Ok(TrainOutcome { final_params: trainer.params, history, metrics_csv_path: path })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub episodes: usize,
    /// Discount applied to evaluation returns.
    pub gamma: f64,
    /// Argmax actions when set; otherwise sample from the policy.
    pub greedy: bool,
    pub seed: u64,
}

/// Per-episode discounted returns of the given policy.
pub fn evaluate(params: &ParameterVector, env_spec: &EnvSpec, cfg: EvalConfig) -> Result<Vec<f64>> {
    let mut env = env_spec.build()?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, STREAM_EVAL, 0));
    let mut returns = Vec::with_capacity(cfg.episodes);
    for ep in 0..cfg.episodes as u64 {
        let mut obs = env.reset(mix_seed(cfg.seed, STREAM_EVAL + 1, ep));
        let mut total = 0.0;
        let mut discount = 1.0;
        loop {
            let a = if cfg.greedy {
                greedy_action(params, &obs)?
            } else {
                sample_index(&forward(params, &obs)?.log_probs, &mut rng)?
            };
            let step = env.step(a)?;
            total += discount * step.reward;
            discount *= cfg.gamma;
            if step.done() {
                break;
            }
            obs = step.observation;
        }
        returns.push(total);
    }
    Ok(returns)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::GridWorldSpec;

    fn approx(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn single_env_batch(rewards: &[f64], values: &[f64], terminated: &[bool], truncated: &[bool]) -> RolloutBatch {
        let n = rewards.len();
        let mut next_values: Vec<f64> = values[1..].to_vec();
        next_values.push(0.0);
        RolloutBatch {
            n_envs: 1,
            rollout_length: n,
            observations: vec![vec![1.0]; n],
            actions: vec![0; n],
            rewards: rewards.to_vec(),
            terminated: terminated.to_vec(),
            truncated: truncated.to_vec(),
            old_log_probs: vec![-0.5; n],
            old_values: values.to_vec(),
            next_values,
        }
    }

    #[test]
    fn gae_hand_example() {
        let batch = single_env_batch(&[1.0, 1.0], &[0.5, 0.5], &[false, true], &[false, false]);
        let out = compute_gae(&batch, GaeConfig::new(0.9, 0.95).unwrap()).unwrap();
        assert!(approx(out.advantages[0], 1.3775, 1e-12));
        assert!(approx(out.advantages[1], 0.5, 1e-12));
        assert!(approx(out.value_targets[0], 1.8775, 1e-12));
    }

    #[test]
    fn gae_lambda_zero_is_td_residual() {
        let values = [0.3, -0.2, 0.7, 0.1];
        let rewards = [0.5, 1.0, -1.0, 2.0];
        let batch = single_env_batch(&rewards, &values, &[false, false, false, true], &[false; 4]);
        let out = compute_gae(&batch, GaeConfig::new(0.9, 0.0).unwrap()).unwrap();
        for t in 0..4 {
            let next = if t == 3 { 0.0 } else { values[t + 1] };
            assert_eq!(out.advantages[t], rewards[t] + 0.9 * next - values[t]);
        }
    }

    #[test]
    fn gae_lambda_one_telescopes() {
        let values = [0.3, -0.2, 0.7, 0.1];
        let rewards = [0.5, 1.0, -1.0, 2.0];
        let batch = single_env_batch(&rewards, &values, &[false, false, false, true], &[false; 4]);
        let out = compute_gae(&batch, GaeConfig::new(1.0, 1.0).unwrap()).unwrap();
        for t in 0..4 {
            let tail: f64 = rewards[t..].iter().sum();
            assert!(approx(out.advantages[t], tail - values[t], 1e-12));
        }
    }

    #[test]
    fn gae_resets_across_episode_boundaries() {
        // truncated after step 1: bootstrap from next_values[1], no carry from step 2
        let mut batch = single_env_batch(&[1.0, 1.0, 1.0], &[0.0, 0.0, 0.0], &[false, false, false], &[false, true, false]);
        batch.next_values[1] = 2.0;
        batch.next_values[2] = 0.0;
        let out = compute_gae(&batch, GaeConfig::new(0.5, 1.0).unwrap()).unwrap();
        assert_eq!(out.advantages[2], 1.0);
        assert_eq!(out.advantages[1], 1.0 + 0.5 * 2.0);
        assert_eq!(out.advantages[0], 1.0 + 0.5 * out.advantages[1]);
    }

    #[test]
    fn approx_kl_examples() {
        assert_eq!(approx_kl(&[-1.0, -2.0], &[-1.0, -2.0]).unwrap(), 0.0);
        let ln2 = 2f64.ln();
        let kl = approx_kl(&[-1.0, -3.0], &[-1.0 + ln2, -3.0 + ln2]).unwrap();
        assert!(approx(kl, 1.0 - ln2, 1e-12));
        assert!(approx_kl(&[0.0], &[]).is_err());
    }

    proptest::proptest! {
        #[test]
        fn approx_kl_is_nonnegative(pairs in proptest::collection::vec((-20.0f64..0.0, -20.0f64..0.0), 1..50)) {
            let (old, new): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            proptest::prop_assert!(approx_kl(&old, &new).unwrap() >= 0.0);
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr_times_sign() {
        let mut adam = Adam::new(3);
        let mut p = vec![0.0, 1.0, -1.0];
        adam.step(&mut p, &[2.0, -0.5, 0.0], 0.1);
        assert!(approx(p[0], -0.1, 1e-8));
        assert!(approx(p[1], 1.1, 1e-8));
        assert_eq!(p[2], -1.0);
    }

    fn small_grid() -> EnvSpec {
        EnvSpec::GridWorld(GridWorldSpec { width: 3, height: 3, goal: (2, 2), ..Default::default() })
    }

    fn short_cfg() -> TrainConfig {
        TrainConfig { total_env_steps: 2048, rollout_length: 64, n_envs: 2, minibatch_size: 32, ..Default::default() }
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let env = small_grid();
        let cfg = TrainConfig { learning_rate: 0.0, policy: PolicyKind::Mlp, hidden: [8, 8], ..short_cfg() };
        let init = Trainer::new(&env, &cfg).unwrap().params().clone();
        let out = train(&env, &cfg, None).unwrap();
        assert_eq!(
            init.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            out.final_params.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        for s in &out.history {
            assert_eq!(s.ratio_min, 1.0);
            assert_eq!(s.ratio_max, 1.0);
        }
    }

    #[test]
    fn same_seed_gives_identical_metrics_bytes() {
        let env = small_grid();
        let cfg = short_cfg();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ra = train(&env, &cfg, Some(a.path())).unwrap();
        train(&env, &cfg, Some(b.path())).unwrap();
        let bytes_a = std::fs::read(a.path().join("metrics.csv")).unwrap();
        let bytes_b = std::fs::read(b.path().join("metrics.csv")).unwrap();
        assert_eq!(bytes_a, bytes_b);
        let text = String::from_utf8(bytes_a).unwrap();
        assert!(text.starts_with(METRICS_HEADER));
        assert!(!text.contains('\r'));
        assert_eq!(text.lines().count(), 1 + ra.history.len());
        assert_eq!(ra.history.len(), cfg.n_updates());
        let other = train(&env, &TrainConfig { seed: 1, ..cfg }, None).unwrap();
        assert_ne!(other.history, ra.history);
    }

    #[test]
    fn first_step_ratios_are_one() {
        let env = small_grid();
        let out = train(&env, &short_cfg(), None).unwrap();
        for s in &out.history {
            assert!(s.first_step_ratio_deviation <= 1e-7);
            assert!(s.approx_kl >= 0.0);
        }
    }

    #[test]
    fn identity_full_batch_step_is_vanilla_policy_gradient() {
        // one state, two actions, no normalization or clipping: the single
        // Adam step moves each logit by -lr * sign(dL/dlogit)
        let env = EnvSpec::GridWorld(GridWorldSpec { width: 2, height: 1, goal: (1, 0), ..Default::default() });
        let cfg = TrainConfig {
            kernel: ShapingFunctionSpec::identity(),
            learning_rate: 0.01,
            epochs: 1,
            minibatch_size: 4,
            rollout_length: 4,
            n_envs: 1,
            advantage_normalization: false,
            max_grad_norm: None,
            lambda_val: 0.0,
            lambda_ent: 0.0,
            policy: PolicyKind::Tabular,
            ..Default::default()
        };
        let params = ParameterVector::zeros(cfg.architecture(&env)).unwrap();
        let mut trainer = Trainer::with_params(&env, &cfg, params).unwrap();
        let obs = vec![1.0, 0.0];
        let lp = -(4f64.ln());
        let batch = RolloutBatch {
            n_envs: 1,
            rollout_length: 4,
            observations: vec![obs; 4],
            actions: vec![1, 1, 0, 3],
            rewards: vec![1.0, 0.5, -1.0, 0.0],
            terminated: vec![true; 4],
            truncated: vec![false; 4],
            old_log_probs: vec![lp; 4],
            old_values: vec![0.0; 4],
            next_values: vec![0.0; 4],
        };
        trainer.update(&batch, &[]).unwrap();
        // A = rewards; dL/dlogit_k = -(1/4) sum_i A_i (1[a_i = k] - 1/4)
        let adv = [1.0, 0.5, -1.0, 0.0];
        let actions = [1usize, 1, 0, 3];
        for k in 0..4 {
            let g: f64 = -adv
                .iter()
                .zip(&actions)
                .map(|(a, &act)| a * (if act == k { 1.0 } else { 0.0 } - 0.25))
                .sum::<f64>()
                / 4.0;
            // tabular layout: logits row k, observation column 0
            let moved = trainer.params().values()[k * 2];
            let expected = if g == 0.0 { 0.0 } else { -0.01 * g.signum() * g.abs() / (g.abs() + 1e-8) };
            assert!(approx(moved, expected, 1e-12), "logit {k}: {moved} vs {expected}");
        }
    }

    #[test]
    fn evaluation_of_uniform_policy_matches_exact_value() {
        let spec = GridWorldSpec { width: 3, height: 3, goal: (2, 2), max_steps: 400, ..Default::default() };
        let env = EnvSpec::GridWorld(spec.clone());
        let params = ParameterVector::zeros(Architecture::Tabular { obs_dim: 9, n_actions: 4 }).unwrap();
        let returns = evaluate(&params, &env, EvalConfig { episodes: 4000, gamma: 0.9, greedy: false, seed: 0 }).unwrap();
        let mean = returns.iter().sum::<f64>() / returns.len() as f64;
        let exact = crate::envs::random_return(&spec, 0.9).unwrap();
        assert!((mean - exact).abs() < 0.02, "{mean} vs {exact}");
    }
}
