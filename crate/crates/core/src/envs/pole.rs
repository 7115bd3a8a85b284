use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Environment, StepResult};
use crate::error::{domain, usage, Result};

/// Cart-pole constants, SI units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoleBalanceSpec {
    pub gravity: f64,
    pub cart_mass: f64,
    pub pole_mass: f64,
    /// Distance from the pivot to the pole's centre of mass.
    pub pole_half_length: f64,
    pub force_mag: f64,
    pub timestep: f64,
    /// Failure when `|theta|` exceeds this (radians).
    pub angle_threshold: f64,
    /// Failure when `|x|` exceeds this (metres).
    pub position_threshold: f64,
    pub max_steps: usize,
    /// Forces are spread evenly over `[-force_mag, force_mag]`.
    pub n_discrete_actions: usize,
}

impl Default for PoleBalanceSpec {
    fn default() -> Self {
        Self {
            gravity: 9.8,
            cart_mass: 1.0,
            pole_mass: 0.1,
            pole_half_length: 0.5,
            force_mag: 10.0,
            timestep: 0.02,
            angle_threshold: 12.0_f64.to_radians(),
            position_threshold: 2.4,
            max_steps: 500,
            n_discrete_actions: 2,
        }
    }
}

impl PoleBalanceSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.gravity,
            self.cart_mass,
            self.pole_mass,
            self.pole_half_length,
            self.timestep,
            self.angle_threshold,
            self.position_threshold,
        ];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(domain("pole-balance constants, timestep and thresholds must be positive"));
        }
        if !(self.force_mag.is_finite() && self.force_mag >= 0.0) {
            return Err(domain("force_mag must be finite and non-negative"));
        }
        if self.n_discrete_actions < 2 {
            return Err(domain("pole-balance needs at least 2 force bins"));
        }
        if self.max_steps == 0 {
            return Err(domain("max_steps must be at least 1"));
        }
        Ok(())
    }

    pub fn force(&self, action: usize) -> f64 {
        let n = self.n_discrete_actions as f64;
        -self.force_mag + 2.0 * self.force_mag * action as f64 / (n - 1.0)
    }
}

/// `(x, x_dot, theta, theta_dot)`; `theta = 0` is upright.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PoleState {
    pub x: f64,
    pub x_dot: f64,
    pub theta: f64,
    pub theta_dot: f64,
}

impl PoleState {
    fn to_vec(self) -> Vec<f64> {
        vec![self.x, self.x_dot, self.theta, self.theta_dot]
    }
}

pub struct PoleBalance {
    spec: PoleBalanceSpec,
    state: PoleState,
    steps: usize,
    done: bool,
}

impl PoleBalance {
    pub fn new(spec: PoleBalanceSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self { spec, state: PoleState::default(), steps: 0, done: false })
    }

    pub fn spec(&self) -> &PoleBalanceSpec {
        &self.spec
    }

    pub fn state(&self) -> PoleState {
        self.state
    }

    /// Overrides the physical state and restarts the step counter.
    pub fn set_state(&mut self, state: PoleState) {
        self.state = state;
        self.steps = 0;
        self.done = false;
    }

    /// Kinetic plus potential energy of the cart and a uniform rod pivoting at
    /// the cart (potential measured from the pivot).
    pub fn mechanical_energy(&self) -> f64 {
        let s = &self.spec;
        let PoleState { x_dot, theta, theta_dot, .. } = self.state;
        let l = s.pole_half_length;
        let kinetic = 0.5 * (s.cart_mass + s.pole_mass) * x_dot * x_dot
            + s.pole_mass * l * x_dot * theta_dot * theta.cos()
            + 0.5 * (4.0 / 3.0) * s.pole_mass * l * l * theta_dot * theta_dot;
        kinetic + s.pole_mass * s.gravity * l * theta.cos()
    }

    fn integrate(&mut self, force: f64) {
        let s = &self.spec;
        let total_mass = s.cart_mass + s.pole_mass;
        let pole_moment = s.pole_mass * s.pole_half_length;
        let PoleState { x, x_dot, theta, theta_dot } = self.state;
        let (sin, cos) = theta.sin_cos();
        let temp = (force + pole_moment * theta_dot * theta_dot * sin) / total_mass;
        let theta_acc = (s.gravity * sin - cos * temp)
            / (s.pole_half_length * (4.0 / 3.0 - s.pole_mass * cos * cos / total_mass));
        let x_acc = temp - pole_moment * theta_acc * cos / total_mass;
        // semi-implicit Euler: velocities first, positions from the new velocities
        let x_dot = x_dot + s.timestep * x_acc;
        let theta_dot = theta_dot + s.timestep * theta_acc;
        self.state = PoleState {
            x: x + s.timestep * x_dot,
            x_dot,
            theta: theta + s.timestep * theta_dot,
            theta_dot,
        };
    }
}

impl Environment for PoleBalance {
    fn observation_dim(&self) -> usize {
        4
    }

    fn n_actions(&self) -> usize {
        self.spec.n_discrete_actions
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = || rng.random_range(-0.05..=0.05);
        self.state = PoleState { x: draw(), x_dot: draw(), theta: draw(), theta_dot: draw() };
        self.steps = 0;
        self.done = false;
        self.state.to_vec()
    }

    fn step(&mut self, action: usize) -> Result<StepResult> {
        if self.done {
            return Err(usage("step called on a finished pole-balance episode; reset first"));
        }
        if action >= self.spec.n_discrete_actions {
            return Err(usage(format!(
                "pole-balance action {action} out of range 0..{}",
                self.spec.n_discrete_actions
            )));
        }
        self.integrate(self.spec.force(action));
        self.steps += 1;
        let st = self.state;
        let terminated = st.x.abs() > self.spec.position_threshold
            || st.theta.abs() > self.spec.angle_threshold
            || !st.to_vec().iter().all(|v| v.is_finite());
        let truncated = !terminated && self.steps >= self.spec.max_steps;
        self.done = terminated || truncated;
        Ok(StepResult {
            observation: st.to_vec(),
            reward: if terminated { 0.0 } else { 1.0 },
            terminated,
            truncated,
        })
    }
}
