//! Policy/value function approximators with hand-written gradients.
//!
//! Two architectures share one flat [`ParameterVector`]:
//!
//! * `Tabular`: logits `W obs` and value `v . obs`. With one-hot observations
//!   this is exactly a softmax table plus a value table.
//! * `Mlp`: separate policy and value towers, each two tanh hidden layers.
//!
//! Policy parameters (theta) come first in the flat vector, value parameters
//! (phi) after them.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{domain, usage, Divergence, Error, Result};
use crate::kernels::ShapingFunctionSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    Tabular { obs_dim: usize, n_actions: usize },
    Mlp { obs_dim: usize, hidden: [usize; 2], n_actions: usize },
}

impl Architecture {
    pub fn mlp(obs_dim: usize, n_actions: usize) -> Self {
        Self::Mlp { obs_dim, hidden: [64, 64], n_actions }
    }

    pub fn obs_dim(&self) -> usize {
        match *self {
            Self::Tabular { obs_dim, .. } | Self::Mlp { obs_dim, .. } => obs_dim,
        }
    }

    pub fn n_actions(&self) -> usize {
        match *self {
            Self::Tabular { n_actions, .. } | Self::Mlp { n_actions, .. } => n_actions,
        }
    }

    fn towers(&self) -> (Tower, Tower) {
        match *self {
            Self::Tabular { obs_dim, n_actions } => (
                Tower { input: obs_dim, hidden: None, output: n_actions, offset: 0 },
                Tower { input: obs_dim, hidden: None, output: 1, offset: obs_dim * n_actions },
            ),
            Self::Mlp { obs_dim, hidden, n_actions } => {
                let policy = Tower { input: obs_dim, hidden: Some(hidden), output: n_actions, offset: 0 };
                let value = Tower { input: obs_dim, hidden: Some(hidden), output: 1, offset: policy.len() };
                (policy, value)
            }
        }
    }

    /// Total number of trainable parameters.
    pub fn n_params(&self) -> usize {
        let (p, v) = self.towers();
        p.len() + v.len()
    }

    /// Number of policy (theta) parameters; the rest belong to the value head.
    pub fn n_policy_params(&self) -> usize {
        self.towers().0.len()
    }

    fn validate(&self) -> Result<()> {
        let dims_ok = match *self {
            Self::Tabular { obs_dim, n_actions } => obs_dim > 0 && n_actions > 0,
            Self::Mlp { obs_dim, hidden, n_actions } => {
                obs_dim > 0 && n_actions > 0 && hidden[0] > 0 && hidden[1] > 0
            }
        };
        if dims_ok {
            Ok(())
        } else {
            Err(usage(format!("architecture has a zero dimension: {self:?}")))
        }
    }
}

/// A stack of dense layers: `input -> [tanh h1 -> tanh h2 ->] output`. The
/// tabular case has no hidden layers and no bias.
#[derive(Debug, Clone, Copy)]
struct Tower {
    input: usize,
    hidden: Option<[usize; 2]>,
    output: usize,
    offset: usize,
}

/// `(fan_in, fan_out, has_bias)` per layer.
impl Tower {
    fn layers(&self) -> Vec<(usize, usize, bool)> {
        match self.hidden {
            None => vec![(self.input, self.output, false)],
            Some([h1, h2]) => vec![(self.input, h1, true), (h1, h2, true), (h2, self.output, true)],
        }
    }

    fn len(&self) -> usize {
        self.layers().iter().map(|&(i, o, b)| i * o + if b { o } else { 0 }).sum()
    }

    /// Returns the activations of every layer; the last entry is the output.
    fn forward(&self, params: &[f64], x: &[f64]) -> Vec<Vec<f64>> {
        let layers = self.layers();
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(layers.len());
        let mut offset = self.offset;
        for (k, &(fan_in, fan_out, bias)) in layers.iter().enumerate() {
            let input = if k == 0 { x } else { &acts[k - 1] };
            let w = &params[offset..offset + fan_in * fan_out];
            offset += fan_in * fan_out;
            let mut out: Vec<f64> = w.chunks_exact(fan_in).map(|row| dot(row, input)).collect();
            if bias {
                for (o, b) in out.iter_mut().zip(&params[offset..offset + fan_out]) {
                    *o += b;
                }
                offset += fan_out;
            }
            if k + 1 < layers.len() {
                out.iter_mut().for_each(|v| *v = v.tanh());
            }
            acts.push(out);
        }
        acts
    }

    /// Accumulates `d(loss)/d(params)` into `grad` given `d(loss)/d(output)`.
    fn backward(&self, params: &[f64], x: &[f64], acts: &[Vec<f64>], d_out: &[f64], grad: &mut [f64]) {
        let layers = self.layers();
        // offsets of each layer's weights
        let mut offsets = Vec::with_capacity(layers.len());
        let mut offset = self.offset;
        for &(fan_in, fan_out, bias) in &layers {
            offsets.push(offset);
            offset += fan_in * fan_out + if bias { fan_out } else { 0 };
        }
        let mut delta = d_out.to_vec();
        for k in (0..layers.len()).rev() {
            let (fan_in, fan_out, bias) = layers[k];
            let input = if k == 0 { x } else { &acts[k - 1] };
            let w_off = offsets[k];
            for o in 0..fan_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                let row = &mut grad[w_off + o * fan_in..w_off + (o + 1) * fan_in];
                for (g, xi) in row.iter_mut().zip(input) {
                    *g += d * xi;
                }
            }
            if bias {
                let b_off = w_off + fan_in * fan_out;
                for o in 0..fan_out {
                    grad[b_off + o] += delta[o];
                }
            }
            if k > 0 {
                let w = &params[w_off..w_off + fan_in * fan_out];
                let mut next = vec![0.0; fan_in];
                for o in 0..fan_out {
                    let d = delta[o];
                    if d == 0.0 {
                        continue;
                    }
                    for (n, wi) in next.iter_mut().zip(&w[o * fan_in..(o + 1) * fan_in]) {
                        *n += d * wi;
                    }
                }
                // tanh' = 1 - a^2
                for (n, a) in next.iter_mut().zip(&acts[k - 1]) {
                    *n *= 1.0 - a * a;
                }
                delta = next;
            }
        }
    }

    fn init(&self, params: &mut [f64], head_gain: f64, rng: &mut impl Rng) {
        let layers = self.layers();
        let mut offset = self.offset;
        for (k, &(fan_in, fan_out, bias)) in layers.iter().enumerate() {
            let n = fan_in * fan_out;
            if self.hidden.is_some() {
                let gain = if k + 1 == layers.len() { head_gain } else { std::f64::consts::SQRT_2 };
                params[offset..offset + n].copy_from_slice(&orthogonal(fan_out, fan_in, gain, rng));
            }
            offset += n;
            if bias {
                params[offset..offset + fan_out].fill(0.0);
                offset += fan_out;
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Row-major `rows x cols` matrix with orthonormal rows or columns, scaled by `gain`.
fn orthogonal(rows: usize, cols: usize, gain: f64, rng: &mut impl Rng) -> Vec<f64> {
    let (tall, short) = (rows.max(cols), rows.min(cols));
    let a = DMatrix::<f64>::from_fn(tall, short, |_, _| rng.sample(StandardNormal));
    let qr = a.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..short {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    let m = if rows >= cols { q } else { q.transpose() };
    let mut out = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            out.push(gain * m[(i, j)]);
        }
    }
    out
}

/// Flat trainable parameters plus the architecture that gives them shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterVector {
    arch: Architecture,
    values: Vec<f64>,
}

impl ParameterVector {
    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        Ok(Self { arch, values: vec![0.0; arch.n_params()] })
    }

    /// Tabular: all zeros (uniform policy). MLP: orthogonal weights with gain
    /// `sqrt(2)` on hidden layers, `0.01` on the policy head and `1` on the
    /// value head; zero biases.
    pub fn init(arch: Architecture, rng: &mut impl Rng) -> Result<Self> {
        let mut params = Self::zeros(arch)?;
        let (policy, value) = arch.towers();
        policy.init(&mut params.values, 0.01, rng);
        value.init(&mut params.values, 1.0, rng);
        Ok(params)
    }

    pub fn from_values(arch: Architecture, values: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        if values.len() != arch.n_params() {
            return Err(usage(format!(
                "{} values for an architecture with {} parameters",
                values.len(),
                arch.n_params()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(domain("parameter vector has non-finite entries"));
        }
        Ok(Self { arch, values })
    }

    pub fn architecture(&self) -> Architecture {
        self.arch
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyOutput {
    pub log_probs: Vec<f64>,
    pub value: f64,
    pub entropy: f64,
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_z = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - log_z).collect()
}

fn entropy(log_probs: &[f64]) -> f64 {
    -log_probs
        .iter()
        .map(|&lp| {
            let p = lp.exp();
            if p == 0.0 {
                0.0
            } else {
                p * lp
            }
        })
        .sum::<f64>()
}

struct Trace {
    policy_acts: Vec<Vec<f64>>,
    value_acts: Vec<Vec<f64>>,
    log_probs: Vec<f64>,
}

fn trace(params: &ParameterVector, obs: &[f64]) -> Result<Trace> {
    if obs.len() != params.arch.obs_dim() {
        return Err(usage(format!(
            "observation has {} entries, architecture expects {}",
            obs.len(),
            params.arch.obs_dim()
        )));
    }
    let (policy, value) = params.arch.towers();
    let policy_acts = policy.forward(&params.values, obs);
    let value_acts = value.forward(&params.values, obs);
    let log_probs = log_softmax(policy_acts.last().expect("policy output"));
    Ok(Trace { policy_acts, value_acts, log_probs })
}

/// Action log-probabilities, state value and policy entropy at `obs`.
pub fn forward(params: &ParameterVector, obs: &[f64]) -> Result<PolicyOutput> {
    let t = trace(params, obs)?;
    let value = t.value_acts.last().expect("value output")[0];
    let entropy = entropy(&t.log_probs);
    Ok(PolicyOutput { log_probs: t.log_probs, value, entropy })
}

/// Draws `a ~ softmax(logits)`; the returned log-probability is the one
/// `forward` reports for that action.
pub fn sample_action(params: &ParameterVector, obs: &[f64], rng: &mut impl Rng) -> Result<(usize, f64)> {
    let out = forward(params, obs)?;
    let a = sample_index(&out.log_probs, rng)?;
    Ok((a, out.log_probs[a]))
}

/// Inverse-CDF draw from a categorical given its log-probabilities.
pub fn sample_index(log_probs: &[f64], rng: &mut impl Rng) -> Result<usize> {
    let u: f64 = rng.random();
    let mut cum = 0.0;
    let mut chosen = None;
    for (a, lp) in log_probs.iter().enumerate() {
        let p = lp.exp();
        if p > 0.0 {
            chosen = Some(a);
        }
        cum += p;
        if u < cum {
            chosen = Some(a);
            break;
        }
    }
    chosen.ok_or_else(|| Error::Internal("policy assigns zero mass to every action".into()))
}

/// Index of the most likely action (first on ties).
pub fn greedy_action(params: &ParameterVector, obs: &[f64]) -> Result<usize> {
    let out = forward(params, obs)?;
    Ok(out
        .log_probs
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0)
}

/// Samples the loss is evaluated on. All vectors have one entry per sample.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossBatch {
    pub observations: Vec<Vec<f64>>,
    pub actions: Vec<usize>,
    pub old_log_probs: Vec<f64>,
    pub advantages: Vec<f64>,
    /// Value targets.
    pub returns: Vec<f64>,
}

impl LossBatch {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    fn validate(&self, arch: &Architecture) -> Result<()> {
        let n = self.actions.len();
        if n == 0 {
            return Err(usage("empty loss batch"));
        }
        if [self.observations.len(), self.old_log_probs.len(), self.advantages.len(), self.returns.len()]
            .iter()
            .any(|&len| len != n)
        {
            return Err(usage("loss batch arrays have different lengths"));
        }
        if self.actions.iter().any(|&a| a >= arch.n_actions()) {
            return Err(usage("loss batch contains an out-of-range action"));
        }
        let finite = self.observations.iter().flatten().all(|v| v.is_finite())
            && self.old_log_probs.iter().all(|v| v.is_finite())
            && self.advantages.iter().all(|v| v.is_finite())
            && self.returns.iter().all(|v| v.is_finite());
        if !finite {
            return Err(domain("loss batch contains non-finite entries"));
        }
        Ok(())
    }
}

/// `lambda_val` and `lambda_ent` of the joint loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossCoeffs {
    pub value: f64,
    pub entropy: f64,
}

impl Default for LossCoeffs {
    fn default() -> Self {
        Self { value: 0.5, entropy: 0.01 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossDiagnostics {
    /// Mean of `r - 1 - ln r`.
    pub approx_kl: f64,
    pub ratio_min: f64,
    pub ratio_max: f64,
    /// Fraction of samples where `min(g A, f A)` picked the `f` branch.
    pub f_branch_fraction: f64,
    /// Fraction of positive-advantage samples with `r > 1 + 2 eps`.
    pub overshoot_fraction: f64,
    pub positive_advantages: usize,
    pub overshoots: usize,
    pub advantage_min: f64,
    pub advantage_max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossAndGrad {
    pub loss_total: f64,
    pub loss_policy: f64,
    pub loss_value: f64,
    /// Mean policy entropy (enters the total with a minus sign).
    pub loss_entropy: f64,
    pub grad: Vec<f64>,
    pub diagnostics: LossDiagnostics,
}

/// Joint loss `L_policy + lambda_val L_value - lambda_ent L_entropy` and its
/// exact gradient.
///
/// `L_policy = -mean(min(g(r) A, f(r) A))` with `r = exp(logp_new - logp_old)`;
/// ties between the branches take the `f` branch. `L_value = mean((V - R)^2) / 2`.
pub fn loss_and_grad(
    params: &ParameterVector,
    batch: &LossBatch,
    spec: &ShapingFunctionSpec,
    coeffs: LossCoeffs,
) -> Result<LossAndGrad> {
    batch.validate(&params.arch)?;
    let n = batch.len() as f64;
    let (policy_tower, value_tower) = params.arch.towers();
    let mut grad = vec![0.0; params.len()];
    let mut loss_policy = 0.0;
    let mut loss_value = 0.0;
    let mut loss_entropy = 0.0;
    let mut kl = 0.0;
    let mut f_branch = 0usize;
    let mut positive = 0usize;
    let mut overshoot = 0usize;
    let mut ratio_min = f64::INFINITY;
    let mut ratio_max = f64::NEG_INFINITY;
    let overshoot_at = 1.0 + 2.0 * spec.epsilon();

    for i in 0..batch.len() {
        let obs = &batch.observations[i];
        let t = trace(params, obs)?;
        let a = batch.actions[i];
        let adv = batch.advantages[i];
        let log_ratio = t.log_probs[a] - batch.old_log_probs[i];
        let r = log_ratio.exp();
        ratio_min = ratio_min.min(r);
        ratio_max = ratio_max.max(r);
        kl += log_ratio.exp_m1() - log_ratio;

        let f_term = spec.value(r) * adv;
        let g_term = spec.dual_value(r) * adv;
        let (term, slope) = if f_term <= g_term {
            f_branch += 1;
            (f_term, spec.slope(r).value)
        } else {
            (g_term, spec.dual_slope(r).value)
        };
        if adv > 0.0 {
            positive += 1;
            if r > overshoot_at {
                overshoot += 1;
            }
        }
        loss_policy -= term / n;
        // d(-term/n)/d(logp_a) = -slope * adv * r / n; a zero slope kills the
        // contribution even when r has overflowed.
        let d_logp = if slope == 0.0 || adv == 0.0 { 0.0 } else { -slope * adv * r / n };

        let h = entropy(&t.log_probs);
        loss_entropy += h / n;

        let value = t.value_acts.last().expect("value output")[0];
        let err = value - batch.returns[i];
        loss_value += 0.5 * err * err / n;

        let d_logits: Vec<f64> = t
            .log_probs
            .iter()
            .enumerate()
            .map(|(j, &logp)| {
                let p = logp.exp();
                let indicator = if j == a { 1.0 } else { 0.0 };
                let d_policy = d_logp * (indicator - p);
                // d(-lambda_ent H / n)/d(logit_j) = lambda_ent p_j (logp_j + H) / n
                let d_entropy = if p == 0.0 { 0.0 } else { coeffs.entropy * p * (logp + h) / n };
                d_policy + d_entropy
            })
            .collect();
        policy_tower.backward(&params.values, obs, &t.policy_acts, &d_logits, &mut grad);
        value_tower.backward(&params.values, obs, &t.value_acts, &[coeffs.value * err / n], &mut grad);
    }

    let loss_total = loss_policy + coeffs.value * loss_value - coeffs.entropy * loss_entropy;
    let diagnostics = LossDiagnostics {
        approx_kl: kl / n,
        ratio_min,
        ratio_max,
        f_branch_fraction: f_branch as f64 / n,
        overshoot_fraction: if positive == 0 { 0.0 } else { overshoot as f64 / positive as f64 },
        positive_advantages: positive,
        overshoots: overshoot,
        advantage_min: batch.advantages.iter().copied().fold(f64::INFINITY, f64::min),
        advantage_max: batch.advantages.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    };
    if !loss_total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteLoss(Divergence {
            ratio_min,
            ratio_max,
            advantage_min: diagnostics.advantage_min,
            advantage_max: diagnostics.advantage_max,
        }));
    }
    Ok(LossAndGrad { loss_total, loss_policy, loss_value, loss_entropy, grad, diagnostics })
}

/// Central finite differences of `loss_total` with step `h`.
pub fn numerical_gradient(
    params: &ParameterVector,
    batch: &LossBatch,
    spec: &ShapingFunctionSpec,
    coeffs: LossCoeffs,
    h: f64,
) -> Result<Vec<f64>> {
    let mut probe = params.clone();
    let mut grad = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let base = params.values[i];
        probe.values[i] = base + h;
        let up = loss_and_grad(&probe, batch, spec, coeffs)?.loss_total;
        probe.values[i] = base - h;
        let down = loss_and_grad(&probe, batch, spec, coeffs)?.loss_total;
        probe.values[i] = base;
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

/// `|a - b|_2 / max(|a|_2, |b|_2)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"ANOK";
const CHECKPOINT_VERSION: u32 = 1;

/// Checkpoint layout (little-endian):
///
/// ```text
/// "ANOK" | version u32 | arch tag u32 (0 tabular, 1 mlp) | obs_dim u32 |
/// n_actions u32 | hidden1 u32 | hidden2 u32 | n_params u64 | n_params x f64
/// ```
pub fn write_checkpoint(params: &ParameterVector, mut out: impl Write) -> Result<()> {
    let (tag, obs_dim, n_actions, hidden) = match params.arch {
        Architecture::Tabular { obs_dim, n_actions } => (0u32, obs_dim, n_actions, [0, 0]),
        Architecture::Mlp { obs_dim, hidden, n_actions } => (1u32, obs_dim, n_actions, hidden),
    };
    out.write_all(CHECKPOINT_MAGIC)?;
    for word in [CHECKPOINT_VERSION, tag, obs_dim as u32, n_actions as u32, hidden[0] as u32, hidden[1] as u32] {
        out.write_all(&word.to_le_bytes())?;
    }
    out.write_all(&(params.values.len() as u64).to_le_bytes())?;
    for v in &params.values {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_checkpoint(mut input: impl Read) -> Result<ParameterVector> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(usage("not a parameter checkpoint (bad magic)"));
    }
    let mut word = || -> Result<u32> {
        let mut b = [0u8; 4];
        input.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    };
    let version = word()?;
    if version != CHECKPOINT_VERSION {
        return Err(usage(format!("unsupported checkpoint version {version}")));
    }
    let tag = word()?;
    let (obs_dim, n_actions) = (word()? as usize, word()? as usize);
    let hidden = [word()? as usize, word()? as usize];
    let arch = match tag {
        0 => Architecture::Tabular { obs_dim, n_actions },
        1 => Architecture::Mlp { obs_dim, hidden, n_actions },
        other => return Err(usage(format!("unknown architecture tag {other}"))),
    };
    let mut len = [0u8; 8];
    input.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    if len != arch.n_params() {
        return Err(usage(format!("checkpoint holds {len} values, layout needs {}", arch.n_params())));
    }
    let mut values = Vec::with_capacity(len);
    let mut b = [0u8; 8];
    for _ in 0..len {
        input.read_exact(&mut b)?;
        values.push(f64::from_le_bytes(b));
    }
    ParameterVector::from_values(arch, values)
}

pub fn save_checkpoint(params: &ParameterVector, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut writer = std::io::BufWriter::new(file);
    write_checkpoint(params, &mut writer)?;
    writer.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ParameterVector> {
    read_checkpoint(std::io::BufReader::new(std::fs::File::open(path)?))
}
