//! Exact analysis of small tabular MDPs.
//!
//! Everything here is computed by dense linear solves, so the performance
//! bounds and improvement guarantees for ratio-shaped objectives can be
//! checked against ground truth rather than sampled estimates.
//!
//! Visitation convention: [`ExactAnalysis::rho`] is the *unnormalized*
//! discounted visitation `sum_t gamma^t P(s_t = s)`, which sums to
//! `1 / (1 - gamma)`. The surrogate `S` uses it directly (absorbing the
//! `1 / (1 - gamma)` factor); the generalized objective `M` uses the normalized
//! distribution `(1 - gamma) rho`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::kernels::ShapingFunctionSpec;

const STOCHASTIC_TOL: f64 = 1e-12;

fn check_simplex(row: &[f64], what: &str) -> Result<()> {
    if row.iter().any(|&p| !p.is_finite() || p < 0.0) {
        return Err(domain(format!("{what} has a negative or non-finite entry")));
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > STOCHASTIC_TOL {
        return Err(domain(format!("{what} sums to {sum}, expected 1")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularMDP {
    n_states: usize,
    n_actions: usize,
    /// `transition[s][a][s']`
    transition: Vec<Vec<Vec<f64>>>,
    /// `reward[s][a]`
    reward: Vec<Vec<f64>>,
    discount: f64,
    initial_dist: Vec<f64>,
}

impl TabularMDP {
    pub fn new(
        transition: Vec<Vec<Vec<f64>>>,
        reward: Vec<Vec<f64>>,
        discount: f64,
        initial_dist: Vec<f64>,
    ) -> Result<Self> {
        let n_states = transition.len();
        if n_states == 0 {
            return Err(domain("MDP needs at least one state"));
        }
        let n_actions = transition[0].len();
        if n_actions == 0 {
            return Err(domain("MDP needs at least one action"));
        }
        if !(0.0..1.0).contains(&discount) {
            return Err(domain(format!("discount must lie in [0, 1), got {discount}")));
        }
        if reward.len() != n_states || initial_dist.len() != n_states {
            return Err(domain("reward / initial distribution shape mismatch"));
        }
        for s in 0..n_states {
            if transition[s].len() != n_actions || reward[s].len() != n_actions {
                return Err(domain(format!("state {s} has inconsistent action count")));
            }
            if reward[s].iter().any(|r| !r.is_finite()) {
                return Err(domain(format!("state {s} has a non-finite reward")));
            }
            for (a, row) in transition[s].iter().enumerate() {
                if row.len() != n_states {
                    return Err(domain(format!("P[{s}][{a}] has wrong length")));
                }
                check_simplex(row, &format!("P[{s}][{a}]"))?;
            }
        }
        check_simplex(&initial_dist, "initial distribution")?;
        Ok(Self { n_states, n_actions, transition, reward, discount, initial_dist })
    }

    /// Random MDP: Dirichlet(1) transitions and initial distribution, rewards
    /// uniform in `[-1, 1]`.
    pub fn random(n_states: usize, n_actions: usize, discount: f64, rng: &mut impl Rng) -> Result<Self> {
        let transition = (0..n_states)
            .map(|_| (0..n_actions).map(|_| dirichlet_ones(n_states, rng)).collect())
            .collect();
        let reward = (0..n_states)
            .map(|_| (0..n_actions).map(|_| rng.random_range(-1.0..=1.0)).collect())
            .collect();
        let initial = dirichlet_ones(n_states, rng);
        Self::new(transition, reward, discount, initial)
    }

    /// Random MDP from a seed, with `gamma = 0.9`.
    pub fn random_seeded(n_states: usize, n_actions: usize, seed: u64) -> Result<Self> {
        Self::random(n_states, n_actions, 0.9, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// One state that loops onto itself; `rewards[a]` per action.
    pub fn single_state(rewards: &[f64], discount: f64) -> Result<Self> {
        let n = rewards.len();
        Self::new(vec![vec![vec![1.0]; n]], vec![rewards.to_vec()], discount, vec![1.0])
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn transition(&self, s: usize, a: usize) -> &[f64] {
        &self.transition[s][a]
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.reward[s][a]
    }

    pub fn initial_dist(&self) -> &[f64] {
        &self.initial_dist
    }
}

fn dirichlet_ones(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    let draws: Vec<f64> = (0..n).map(|_| Exp1.sample(rng)).collect::<Vec<f64>>();
    let sum: f64 = draws.iter().sum();
    let mut probs: Vec<f64> = draws.iter().map(|d| d / sum).collect();
    // push the rounding residue into the largest entry so rows sum to 1 tightly
    let residue = 1.0 - probs.iter().sum::<f64>();
    let imax = argmax(&probs);
    probs[imax] += residue;
    probs
}

fn argmax(xs: &[f64]) -> usize {
    xs.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

/// Row-stochastic policy table `probs[s][a]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularPolicy {
    probs: Vec<Vec<f64>>,
}

impl TabularPolicy {
    pub fn new(probs: Vec<Vec<f64>>) -> Result<Self> {
        if probs.is_empty() {
            return Err(domain("policy needs at least one state"));
        }
        let width = probs[0].len();
        for (s, row) in probs.iter().enumerate() {
            if row.len() != width {
                return Err(domain(format!("policy row {s} has wrong length")));
            }
            check_simplex(row, &format!("policy row {s}"))?;
        }
        Ok(Self { probs })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self { probs: vec![vec![1.0 / n_actions as f64; n_actions]; n_states] }
    }

    /// Dirichlet(1) rows.
    pub fn random(n_states: usize, n_actions: usize, rng: &mut impl Rng) -> Self {
        Self { probs: (0..n_states).map(|_| dirichlet_ones(n_actions, rng)).collect() }
    }

    /// Softmax of `ln pi + noise`, noise uniform in `[-spread, spread]`. Every
    /// log-ratio against `self` is bounded by `2 * spread`.
    pub fn perturbed(&self, spread: f64, rng: &mut impl Rng) -> Self {
        let probs = self
            .probs
            .iter()
            .map(|row| {
                let logits: Vec<f64> = row
                    .iter()
                    .map(|&p| p.ln() + rng.random_range(-spread..=spread))
                    .collect();
                let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
                let z: f64 = exps.iter().sum();
                let mut out: Vec<f64> = exps.iter().map(|e| e / z).collect();
                let residue = 1.0 - out.iter().sum::<f64>();
                let imax = argmax(&out);
                out[imax] += residue;
                out
            })
            .collect();
        Self { probs }
    }

    pub fn n_states(&self) -> usize {
        self.probs.len()
    }

    pub fn n_actions(&self) -> usize {
        self.probs[0].len()
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s][a]
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.probs
    }
}

fn check_shapes(mdp: &TabularMDP, policy: &TabularPolicy) -> Result<()> {
    if policy.n_states() != mdp.n_states || policy.n_actions() != mdp.n_actions {
        return Err(Error::Usage(format!(
            "policy is {}x{}, MDP is {}x{}",
            policy.n_states(),
            policy.n_actions(),
            mdp.n_states,
            mdp.n_actions
        )));
    }
    Ok(())
}

/// Exact value functions and visitation of a policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExactAnalysis {
    pub v: Vec<f64>,
    pub q: Vec<Vec<f64>>,
    pub advantage: Vec<Vec<f64>>,
    /// Unnormalized discounted visitation; sums to `1 / (1 - gamma)`.
    pub rho: Vec<f64>,
    pub eta: f64,
}

impl ExactAnalysis {
    pub fn max_abs_advantage(&self) -> f64 {
        self.advantage.iter().flatten().fold(0.0_f64, |m, a| m.max(a.abs()))
    }
}

/// Solves `(I - gamma P_pi) V = R_pi` and `(I - gamma P_pi^T) rho = rho0`.
pub fn analyze(mdp: &TabularMDP, policy: &TabularPolicy) -> Result<ExactAnalysis> {
    check_shapes(mdp, policy)?;
    let n = mdp.n_states;
    let gamma = mdp.discount;
    let mut p_pi = DMatrix::<f64>::zeros(n, n);
    let mut r_pi = DVector::<f64>::zeros(n);
    for s in 0..n {
        for a in 0..mdp.n_actions {
            let w = policy.prob(s, a);
            if w == 0.0 {
                continue;
            }
            r_pi[s] += w * mdp.reward[s][a];
            for (s2, &p) in mdp.transition[s][a].iter().enumerate() {
                p_pi[(s, s2)] += w * p;
            }
        }
    }
    let identity = DMatrix::<f64>::identity(n, n);
    let bellman = &identity - gamma * &p_pi;
    let v = bellman
        .clone()
        .lu()
        .solve(&r_pi)
        .ok_or_else(|| Error::Internal("singular Bellman system".into()))?;
    let occupancy = &identity - gamma * p_pi.transpose();
    let rho0 = DVector::from_column_slice(&mdp.initial_dist);
    let rho = occupancy
        .lu()
        .solve(&rho0)
        .ok_or_else(|| Error::Internal("singular occupancy system".into()))?;

    let v: Vec<f64> = v.iter().copied().collect();
    let q: Vec<Vec<f64>> = (0..n)
        .map(|s| {
            (0..mdp.n_actions)
                .map(|a| {
                    let next: f64 = mdp.transition[s][a].iter().zip(&v).map(|(p, v)| p * v).sum();
                    mdp.reward[s][a] + gamma * next
                })
                .collect()
        })
        .collect();
    let advantage = q
        .iter()
        .zip(&v)
        .map(|(row, vs)| row.iter().map(|qa| qa - vs).collect())
        .collect();
    let eta = mdp.initial_dist.iter().zip(&v).map(|(p, v)| p * v).sum();
    Ok(ExactAnalysis { v, q, advantage, rho: rho.iter().copied().collect(), eta })
}

fn ratio(pi_old: &TabularPolicy, pi_new: &TabularPolicy, s: usize, a: usize) -> Result<Option<f64>> {
    let (old, new) = (pi_old.prob(s, a), pi_new.prob(s, a));
    if old == 0.0 {
        if new == 0.0 {
            return Ok(None);
        }
        return Err(domain(format!("pi_old({a}|{s}) = 0 but pi_new puts mass there")));
    }
    Ok(Some(new / old))
}

/// `S(pi_new) = eta(pi_old) + sum_s rho(s) sum_a pi_old(a|s) r(s,a) A(s,a)`
/// with unnormalized `rho`.
pub fn surrogate_s(mdp: &TabularMDP, pi_old: &TabularPolicy, pi_new: &TabularPolicy) -> Result<f64> {
    check_shapes(mdp, pi_new)?;
    let exact = analyze(mdp, pi_old)?;
    surrogate_from(&exact, pi_old, pi_new)
}

fn surrogate_from(exact: &ExactAnalysis, pi_old: &TabularPolicy, pi_new: &TabularPolicy) -> Result<f64> {
    let mut total = exact.eta;
    for s in 0..pi_old.n_states() {
        let mut inner = 0.0;
        for a in 0..pi_old.n_actions() {
            if let Some(r) = ratio(pi_old, pi_new, s, a)? {
                inner += pi_old.prob(s, a) * r * exact.advantage[s][a];
            }
        }
        total += exact.rho[s] * inner;
    }
    Ok(total)
}

/// `E_{s ~ d_pi, a ~ pi_old}[min(g(r) A, f(r) A)]` with the normalized
/// visitation `d_pi = (1 - gamma) rho`.
pub fn generalized_objective_m(
    mdp: &TabularMDP,
    pi_old: &TabularPolicy,
    pi_new: &TabularPolicy,
    spec: &ShapingFunctionSpec,
) -> Result<f64> {
    check_shapes(mdp, pi_new)?;
    let exact = analyze(mdp, pi_old)?;
    objective_from(&exact, mdp.discount, pi_old, pi_new, spec)
}

fn objective_from(
    exact: &ExactAnalysis,
    discount: f64,
    pi_old: &TabularPolicy,
    pi_new: &TabularPolicy,
    spec: &ShapingFunctionSpec,
) -> Result<f64> {
    let mut total = 0.0;
    for s in 0..pi_old.n_states() {
        let mut inner = 0.0;
        for a in 0..pi_old.n_actions() {
            if let Some(r) = ratio(pi_old, pi_new, s, a)? {
                inner += pi_old.prob(s, a) * shaped_term(spec, r, exact.advantage[s][a]);
            }
        }
        total += (1.0 - discount) * exact.rho[s] * inner;
    }
    Ok(total)
}

fn shaped_term(spec: &ShapingFunctionSpec, r: f64, adv: f64) -> f64 {
    (spec.dual_value(r) * adv).min(spec.value(r) * adv)
}

/// Mixing weight `alpha` and penalty scale `beta` of the dual-ratio bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DualBoundParams {
    alpha: f64,
    beta: f64,
}

impl DualBoundParams {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(domain(format!("alpha must lie in [0, 1], got {alpha}")));
        }
        if !(beta >= 0.0 && beta.is_finite()) {
            return Err(domain(format!("beta must be finite and >= 0, got {beta}")));
        }
        Ok(Self { alpha, beta })
    }

    /// `beta = 4 gamma max|A| / (1 - gamma)^2`, the coefficient of the classical
    /// total-variation improvement bound.
    pub fn with_default_beta(alpha: f64, mdp: &TabularMDP, pi_old: &TabularPolicy) -> Result<Self> {
        let exact = analyze(mdp, pi_old)?;
        Self::new(alpha, default_beta(mdp.discount, exact.max_abs_advantage()))
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }
}

pub fn default_beta(discount: f64, max_abs_advantage: f64) -> f64 {
    4.0 * discount * max_abs_advantage / (1.0 - discount).powi(2)
}

/// `max_{s,a} ln(pi_new / pi_old)` and `max_{s,a} ln(pi_old / pi_new)`.
pub fn max_log_ratios(pi_old: &TabularPolicy, pi_new: &TabularPolicy) -> Result<(f64, f64)> {
    let mut forward = f64::NEG_INFINITY;
    let mut reverse = f64::NEG_INFINITY;
    for s in 0..pi_old.n_states() {
        for a in 0..pi_old.n_actions() {
            let (old, new) = (pi_old.prob(s, a), pi_new.prob(s, a));
            if (old == 0.0) != (new == 0.0) {
                return Err(domain(format!("support mismatch at state {s}, action {a}")));
            }
            if old == 0.0 {
                continue;
            }
            let l = (new / old).ln();
            forward = forward.max(l);
            reverse = reverse.max(-l);
        }
    }
    Ok((forward, reverse))
}

/// Right-hand side of the dual-ratio lower bound on `eta(pi_new)`:
/// `S - (beta alpha / 2) max ln(new/old) - (beta (1 - alpha) / 2) max ln(old/new)`.
pub fn dual_ratio_bound(
    mdp: &TabularMDP,
    pi_old: &TabularPolicy,
    pi_new: &TabularPolicy,
    params: DualBoundParams,
) -> Result<f64> {
    check_shapes(mdp, pi_new)?;
    let (forward, reverse) = max_log_ratios(pi_old, pi_new)?;
    let s = surrogate_s(mdp, pi_old, pi_new)?;
    let half = 0.5 * params.beta;
    Ok(s - half * params.alpha * forward - half * (1.0 - params.alpha) * reverse)
}

/// Maximizes the generalized objective over policies whose ratios stay in
/// `[1 - eps_l, 1 + eps_u]`.
///
/// The objective is a `d_pi`-weighted sum of independent per-state terms, so
/// each state is solved on its own box-clipped simplex by pairwise coordinate
/// ascent started from `pi_old`. Only improving moves are accepted, so every
/// per-state value stays `>= 0`, which is what makes `eta` non-decreasing.
pub fn constrained_improve(
    mdp: &TabularMDP,
    pi_old: &TabularPolicy,
    spec: &ShapingFunctionSpec,
    eps_l: f64,
    eps_u: f64,
) -> Result<TabularPolicy> {
    check_shapes(mdp, pi_old)?;
    if !(0.0..1.0).contains(&eps_l) {
        return Err(domain(format!("eps_l must lie in [0, 1), got {eps_l}")));
    }
    if !(eps_u >= 0.0 && eps_u.is_finite()) {
        return Err(domain(format!("eps_u must be finite and >= 0, got {eps_u}")));
    }
    let exact = analyze(mdp, pi_old)?;
    let rows = (0..mdp.n_states)
        .map(|s| improve_state(pi_old.row(s), &exact.advantage[s], spec, eps_l, eps_u))
        .collect::<Result<Vec<_>>>()?;
    TabularPolicy::new(rows)
}

const MAX_SWEEPS: usize = 1000;
const LINE_SAMPLES: usize = 32;

fn state_value(old: &[f64], adv: &[f64], new: &[f64], spec: &ShapingFunctionSpec) -> f64 {
    old.iter()
        .zip(adv)
        .zip(new)
        .filter(|((&p, _), _)| p > 0.0)
        .map(|((&p, &a), &q)| p * shaped_term(spec, q / p, a))
        .sum()
}

/// Box limits `[lo, hi]` on the new probabilities of one state.
fn state_box(old: &[f64], eps_l: f64, eps_u: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let lo: Vec<f64> = old.iter().map(|p| p * (1.0 - eps_l)).collect();
    let hi: Vec<f64> = old.iter().map(|p| (p * (1.0 + eps_u)).min(1.0)).collect();
    if lo.iter().sum::<f64>() > 1.0 + 1e-12 || hi.iter().sum::<f64>() < 1.0 - 1e-12 {
        return Err(domain("ratio box does not intersect the probability simplex"));
    }
    Ok((lo, hi))
}

fn improve_state(
    old: &[f64],
    adv: &[f64],
    spec: &ShapingFunctionSpec,
    eps_l: f64,
    eps_u: f64,
) -> Result<Vec<f64>> {
    let (lo, hi) = state_box(old, eps_l, eps_u)?;
    let n = old.len();
    let mut cur = old.to_vec();
    let mut best = state_value(old, adv, &cur, spec);
    let pair_value = |cur: &[f64], i: usize, j: usize, t: f64| -> f64 {
        let mut v = best_partial(old, adv, cur, spec, i, j);
        v += term(old[i], adv[i], cur[i] + t, spec) + term(old[j], adv[j], cur[j] - t, spec);
        v
    };
    for _ in 0..MAX_SWEEPS {
        let mut improved = false;
        for i in 0..n {
            for j in 0..n {
                if i == j || old[i] == 0.0 || old[j] == 0.0 {
                    continue;
                }
                // move t from j to i
                let t_max = (hi[i] - cur[i]).min(cur[j] - lo[j]);
                if t_max <= 1e-15 {
                    continue;
                }
                let (t, value) = line_maximize(|t| pair_value(&cur, i, j, t), t_max);
                if value > best + 1e-15 * best.abs().max(1e-3) && t > 0.0 {
                    cur[i] = (cur[i] + t).min(hi[i]);
                    cur[j] = (cur[j] - t).max(lo[j]);
                    best = state_value(old, adv, &cur, spec);
                    improved = true;
                }
            }
        }
        if !improved {
            break;
        }
    }
    // exact renormalization against accumulated rounding
    let sum: f64 = cur.iter().sum();
    let residue = 1.0 - sum;
    let k = argmax(&cur);
    cur[k] += residue;
    Ok(cur)
}

fn term(old: f64, adv: f64, new: f64, spec: &ShapingFunctionSpec) -> f64 {
    if old == 0.0 {
        0.0
    } else {
        old * shaped_term(spec, new / old, adv)
    }
}

fn best_partial(
    old: &[f64],
    adv: &[f64],
    cur: &[f64],
    spec: &ShapingFunctionSpec,
    skip_i: usize,
    skip_j: usize,
) -> f64 {
    (0..old.len())
        .filter(|&k| k != skip_i && k != skip_j)
        .map(|k| term(old[k], adv[k], cur[k], spec))
        .sum()
}

/// Maximizes `h` on `[0, t_max]`: coarse sampling, then step-halving local
/// search around the best sample. Returns `(t, h(t))`.
fn line_maximize(h: impl Fn(f64) -> f64, t_max: f64) -> (f64, f64) {
    let mut best_t = 0.0;
    let mut best_v = h(0.0);
    for k in 1..=LINE_SAMPLES {
        let t = t_max * k as f64 / LINE_SAMPLES as f64;
        let v = h(t);
        if v > best_v {
            best_t = t;
            best_v = v;
        }
    }
    let mut step = t_max / LINE_SAMPLES as f64;
    while step > 1e-15 * t_max.max(1e-300) {
        let mut moved = false;
        for cand in [best_t - step, best_t + step] {
            if (0.0..=t_max).contains(&cand) {
                let v = h(cand);
                if v > best_v {
                    best_t = cand;
                    best_v = v;
                    moved = true;
                }
            }
        }
        if !moved {
            step *= 0.5;
        }
    }
    (best_t, best_v)
}

/// Dense grid search for single-state MDPs: enumerates the box-clipped
/// simplex at the given resolution and returns the maximizer of the
/// generalized objective. Supports 2 and 3 actions.
pub fn grid_search_single_state(
    mdp: &TabularMDP,
    pi_old: &TabularPolicy,
    spec: &ShapingFunctionSpec,
    eps_l: f64,
    eps_u: f64,
    resolution: f64,
) -> Result<TabularPolicy> {
    if mdp.n_states != 1 {
        return Err(Error::Usage("grid search only handles single-state MDPs".into()));
    }
    let exact = analyze(mdp, pi_old)?;
    let old = pi_old.row(0);
    let adv = &exact.advantage[0];
    let (lo, hi) = state_box(old, eps_l, eps_u)?;
    let steps = (1.0 / resolution).round() as usize;
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut consider = |cand: Vec<f64>| {
        let inside = cand.iter().zip(&lo).zip(&hi).all(|((c, l), h)| *c >= l - 1e-12 && *c <= h + 1e-12);
        if !inside {
            return;
        }
        let v = state_value(old, adv, &cand, spec);
        if best.as_ref().is_none_or(|(bv, _)| v > *bv) {
            best = Some((v, cand));
        }
    };
    match old.len() {
        2 => {
            for i in 0..=steps {
                let p = i as f64 / steps as f64;
                consider(vec![p, 1.0 - p]);
            }
        }
        3 => {
            for i in 0..=steps {
                for j in 0..=steps - i {
                    let (p, q) = (i as f64 / steps as f64, j as f64 / steps as f64);
                    consider(vec![p, q, (1.0 - p - q).max(0.0)]);
                }
            }
        }
        n => return Err(Error::Usage(format!("grid search supports 2 or 3 actions, got {n}"))),
    }
    let (_, row) = best.ok_or_else(|| domain("no grid point inside the ratio box"))?;
    let sum: f64 = row.iter().sum();
    TabularPolicy::new(vec![row.iter().map(|p| p / sum).collect()])
}

/// Solution of the single-state KKT system that picks `alpha` so the
/// implied trust region is symmetric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaExample {
    pub beta: f64,
    pub alpha: f64,
    pub eps_u: f64,
    pub eps_l: f64,
    /// Multiplier of the simplex constraint.
    pub lambda: f64,
    pub new_policy: [f64; 3],
    /// Residuals of the three stationarity conditions at the solution.
    pub stationarity_residuals: [f64; 3],
    pub on_simplex: bool,
    /// `alpha` in `[0, 1]`, probabilities in `[0, 1]` and `eps_l < 1`.
    pub feasible: bool,
}

/// The reference instance: `pi = [0.2, 0.7, 0.1]`, `A = [10, -2, -6]`,
/// linear `f = g = r`.
pub const ALPHA_EXAMPLE_POLICY: [f64; 3] = [0.2, 0.7, 0.1];
pub const ALPHA_EXAMPLE_ADVANTAGE: [f64; 3] = [10.0, -2.0, -6.0];

/// Solves the reference instance at `beta = 8` and, for sensitivity, at
/// `beta = 16`.
pub fn remark_alpha_example() -> Result<(AlphaExample, AlphaExample)> {
    Ok((
        solve_alpha_example(ALPHA_EXAMPLE_POLICY, ALPHA_EXAMPLE_ADVANTAGE, 8.0)?,
        solve_alpha_example(ALPHA_EXAMPLE_POLICY, ALPHA_EXAMPLE_ADVANTAGE, 16.0)?,
    ))
}

/// Stationarity of
/// `sum_a q_a A_a - (beta alpha / 2) ln(q_1/pi_1) - (beta (1-alpha) / 2) ln(pi_3/q_3) - lambda (sum q - 1)`
/// with action 1 at the upper ratio bound `q_1 = pi_1 (1 + eps)`, action 3 at
/// the lower bound `q_3 = pi_3 (1 - eps)` and action 2 interior, plus the
/// simplex constraint and `eps_u = eps_l = eps`.
pub fn solve_alpha_example(pi: [f64; 3], adv: [f64; 3], beta: f64) -> Result<AlphaExample> {
    let half = 0.5 * beta;
    // interior action: A_2 - lambda = 0
    let lambda = adv[1];
    // unknowns x = (alpha, eps, q_2):
    //   half * alpha - (A_1 - lambda) pi_1 eps          = (A_1 - lambda) pi_1
    //   -half * alpha + (lambda - A_3) pi_3 eps         = (lambda - A_3) pi_3 - half
    //   (pi_1 - pi_3) eps + q_2                         = 1 - pi_1 - pi_3
    let up = (adv[0] - lambda) * pi[0];
    let down = (lambda - adv[2]) * pi[2];
    let m = DMatrix::from_row_slice(3, 3, &[half, -up, 0.0, -half, down, 0.0, 0.0, pi[0] - pi[2], 1.0]);
    let rhs = DVector::from_column_slice(&[up, down - half, 1.0 - pi[0] - pi[2]]);
    let x = m
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Internal("singular KKT system".into()))?;
    let (alpha, eps, q2) = (x[0], x[1], x[2]);
    let q = [pi[0] * (1.0 + eps), q2, pi[2] * (1.0 - eps)];
    let residuals = [
        adv[0] - half * alpha / q[0] - lambda,
        adv[1] - lambda,
        adv[2] + half * (1.0 - alpha) / q[2] - lambda,
    ];
    let on_simplex = q.iter().all(|&p| (0.0..=1.0).contains(&p)) && (q.iter().sum::<f64>() - 1.0).abs() < 1e-12;
    let feasible = on_simplex && (0.0..=1.0).contains(&alpha) && eps < 1.0;
    Ok(AlphaExample {
        beta,
        alpha,
        eps_u: eps,
        eps_l: eps,
        lambda,
        new_policy: q,
        stationarity_residuals: residuals,
        on_simplex,
        feasible,
    })
}
