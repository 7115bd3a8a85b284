//! Seedable toy environments: a slippery gridworld and a discretized
//! pole-balance task.

mod gridworld;
mod pole;

pub use gridworld::{optimal_return, random_return, GridWorld, GridWorldSpec};
pub use pole::{PoleBalance, PoleBalanceSpec, PoleState};

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub observation: Vec<f64>,
    pub reward: f64,
    /// The episode reached a terminal state (goal, failure).
    pub terminated: bool,
    /// The episode hit its step limit without terminating.
    pub truncated: bool,
}

impl StepResult {
    pub fn done(&self) -> bool {
        self.terminated || self.truncated
    }
}

pub trait Environment {
    fn observation_dim(&self) -> usize;
    fn n_actions(&self) -> usize;
    /// Starts a new episode. The initial state and the RNG stream used by
    /// subsequent steps are a pure function of `(spec, seed)`.
    fn reset(&mut self, seed: u64) -> Vec<f64>;
    fn step(&mut self, action: usize) -> Result<StepResult>;
}

/// Environment selection as it appears in configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EnvSpec {
    #[serde(alias = "gridworld")]
    GridWorld(GridWorldSpec),
    PoleBalance(PoleBalanceSpec),
}

impl EnvSpec {
    pub fn build(&self) -> Result<AnyEnv> {
        Ok(match self {
            EnvSpec::GridWorld(spec) => AnyEnv::GridWorld(GridWorld::new(spec.clone())?),
            EnvSpec::PoleBalance(spec) => AnyEnv::PoleBalance(PoleBalance::new(spec.clone())?),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            EnvSpec::GridWorld(_) => "gridworld",
            EnvSpec::PoleBalance(_) => "pole_balance",
        }
    }

    pub fn observation_dim(&self) -> usize {
        match self {
            EnvSpec::GridWorld(spec) => spec.width * spec.height,
            EnvSpec::PoleBalance(_) => 4,
        }
    }

    pub fn n_actions(&self) -> usize {
        match self {
            EnvSpec::GridWorld(_) => 4,
            EnvSpec::PoleBalance(spec) => spec.n_discrete_actions,
        }
    }
}

#[allow(clippy::large_enum_variant)]
pub enum AnyEnv {
    GridWorld(GridWorld),
    PoleBalance(PoleBalance),
}

impl Environment for AnyEnv {
    fn observation_dim(&self) -> usize {
        match self {
            AnyEnv::GridWorld(env) => env.observation_dim(),
            AnyEnv::PoleBalance(env) => env.observation_dim(),
        }
    }

    fn n_actions(&self) -> usize {
        match self {
            AnyEnv::GridWorld(env) => env.n_actions(),
            AnyEnv::PoleBalance(env) => env.n_actions(),
        }
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        match self {
            AnyEnv::GridWorld(env) => env.reset(seed),
            AnyEnv::PoleBalance(env) => env.reset(seed),
        }
    }

    fn step(&mut self, action: usize) -> Result<StepResult> {
        match self {
            AnyEnv::GridWorld(env) => env.step(action),
            AnyEnv::PoleBalance(env) => env.step(action),
        }
    }
}

/// SplitMix64 finalizer; used to derive independent seeds from
/// `(base_seed, stream, counter)` triples.
pub fn mix_seed(base: u64, stream: u64, counter: u64) -> u64 {
    let mut z = base
        ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ counter.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
