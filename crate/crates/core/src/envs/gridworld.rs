use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Environment, StepResult};
use crate::error::{domain, usage, Result};
use crate::exactmdp::{analyze, TabularMDP, TabularPolicy};

/// Actions: 0 = up (+y), 1 = right (+x), 2 = down (-y), 3 = left (-x).
const MOVES: [(i64, i64); 4] = [(0, 1), (1, 0), (0, -1), (-1, 0)];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridWorldSpec {
    pub width: usize,
    pub height: usize,
    pub start: (usize, usize),
    pub goal: (usize, usize),
    /// Added on every step, including the one that reaches the goal.
    pub step_penalty: f64,
    pub goal_reward: f64,
    pub max_steps: usize,
    /// Probability that a move is replaced by one of the two perpendicular moves.
    pub slip_prob: f64,
}

impl Default for GridWorldSpec {
    fn default() -> Self {
        Self {
            width: 5,
            height: 5,
            start: (0, 0),
            goal: (4, 4),
            step_penalty: -0.01,
            goal_reward: 1.0,
            max_steps: 100,
            slip_prob: 0.1,
        }
    }
}

impl GridWorldSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(domain("grid must have positive width and height"));
        }
        let inside = |(x, y): (usize, usize)| x < self.width && y < self.height;
        if !inside(self.goal) || !inside(self.start) {
            return Err(domain("start and goal must lie inside the grid"));
        }
        if !(0.0..1.0).contains(&self.slip_prob) {
            return Err(domain(format!("slip_prob must lie in [0, 1), got {}", self.slip_prob)));
        }
        if self.max_steps == 0 {
            return Err(domain("max_steps must be at least 1"));
        }
        if !(self.step_penalty.is_finite() && self.goal_reward.is_finite()) {
            return Err(domain("rewards must be finite"));
        }
        Ok(())
    }

    pub fn n_cells(&self) -> usize {
        self.width * self.height
    }

    pub fn cell_index(&self, (x, y): (usize, usize)) -> usize {
        y * self.width + x
    }

    pub fn cell(&self, index: usize) -> (usize, usize) {
        (index % self.width, index / self.width)
    }

    fn shift(&self, (x, y): (usize, usize), action: usize) -> (usize, usize) {
        let (dx, dy) = MOVES[action];
        let nx = x as i64 + dx;
        let ny = y as i64 + dy;
        if nx < 0 || ny < 0 || nx >= self.width as i64 || ny >= self.height as i64 {
            (x, y)
        } else {
            (nx as usize, ny as usize)
        }
    }

    fn perpendicular(action: usize) -> [usize; 2] {
        [(action + 1) % 4, (action + 3) % 4]
    }

    /// Outcome distribution of `action` from `cell` as `(next_cell, prob)` pairs.
    fn outcomes(&self, cell: (usize, usize), action: usize) -> Vec<((usize, usize), f64)> {
        let mut out = vec![(self.shift(cell, action), 1.0 - self.slip_prob)];
        if self.slip_prob > 0.0 {
            for side in Self::perpendicular(action) {
                out.push((self.shift(cell, side), 0.5 * self.slip_prob));
            }
        }
        out
    }

    /// The gridworld as an infinite-horizon tabular MDP (the time limit is
    /// dropped); the goal is absorbing with zero reward.
    pub fn to_tabular(&self, gamma: f64) -> Result<TabularMDP> {
        self.validate()?;
        let n = self.n_cells();
        let goal = self.cell_index(self.goal);
        let mut transition = vec![vec![vec![0.0; n]; 4]; n];
        let mut reward = vec![vec![0.0; 4]; n];
        for s in 0..n {
            for a in 0..4 {
                if s == goal {
                    transition[s][a][s] = 1.0;
                    continue;
                }
                let mut r = self.step_penalty;
                for (next, p) in self.outcomes(self.cell(s), a) {
                    let s2 = self.cell_index(next);
                    transition[s][a][s2] += p;
                    if s2 == goal {
                        r += p * self.goal_reward;
                    }
                }
                reward[s][a] = r;
            }
        }
        let mut initial = vec![0.0; n];
        initial[self.cell_index(self.start)] = 1.0;
        TabularMDP::new(transition, reward, gamma, initial)
    }

    /// Length of the shortest start-to-goal path, ignoring slips.
    pub fn shortest_path_len(&self) -> Option<usize> {
        let mut dist = vec![usize::MAX; self.n_cells()];
        let mut queue = VecDeque::from([self.start]);
        dist[self.cell_index(self.start)] = 0;
        while let Some(cell) = queue.pop_front() {
            let d = dist[self.cell_index(cell)];
            if cell == self.goal {
                return Some(d);
            }
            for a in 0..4 {
                let next = self.shift(cell, a);
                let k = self.cell_index(next);
                if dist[k] == usize::MAX {
                    dist[k] = d + 1;
                    queue.push_back(next);
                }
            }
        }
        None
    }
}

/// Optimal discounted return from the start cell, by value iteration to a
/// sup-norm change below `1e-10`.
pub fn optimal_return(spec: &GridWorldSpec, gamma: f64) -> Result<f64> {
    let mdp = spec.to_tabular(gamma)?;
    let v = value_iteration(&mdp, 1e-10);
    Ok(v[spec.cell_index(spec.start)])
}

/// Exact discounted return of the uniform-random policy from the start cell.
pub fn random_return(spec: &GridWorldSpec, gamma: f64) -> Result<f64> {
    let mdp = spec.to_tabular(gamma)?;
    Ok(analyze(&mdp, &TabularPolicy::uniform(mdp.n_states(), 4))?.eta)
}

pub(crate) fn value_iteration(mdp: &TabularMDP, tol: f64) -> Vec<f64> {
    let n = mdp.n_states();
    let gamma = mdp.discount();
    let mut v = vec![0.0; n];
    loop {
        let mut delta = 0.0_f64;
        let next: Vec<f64> = (0..n)
            .map(|s| {
                (0..mdp.n_actions())
                    .map(|a| {
                        let cont: f64 = mdp.transition(s, a).iter().zip(&v).map(|(p, v)| p * v).sum();
                        mdp.reward(s, a) + gamma * cont
                    })
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
        for (a, b) in v.iter().zip(&next) {
            delta = delta.max((a - b).abs());
        }
        v = next;
        if delta < tol {
            return v;
        }
    }
}

pub struct GridWorld {
    spec: GridWorldSpec,
    pos: (usize, usize),
    steps: usize,
    done: bool,
    slipped: bool,
    rng: ChaCha8Rng,
}

impl GridWorld {
    pub fn new(spec: GridWorldSpec) -> Result<Self> {
        spec.validate()?;
        let pos = spec.start;
        Ok(Self { spec, pos, steps: 0, done: false, slipped: false, rng: ChaCha8Rng::seed_from_u64(0) })
    }

    pub fn spec(&self) -> &GridWorldSpec {
        &self.spec
    }

    pub fn position(&self) -> (usize, usize) {
        self.pos
    }

    /// Whether the last step slipped sideways.
    pub fn slipped(&self) -> bool {
        self.slipped
    }

    fn observe(&self) -> Vec<f64> {
        let mut obs = vec![0.0; self.spec.n_cells()];
        obs[self.spec.cell_index(self.pos)] = 1.0;
        obs
    }
}

impl Environment for GridWorld {
    fn observation_dim(&self) -> usize {
        self.spec.n_cells()
    }

    fn n_actions(&self) -> usize {
        4
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.pos = self.spec.start;
        self.steps = 0;
        self.done = false;
        self.slipped = false;
        self.observe()
    }

    fn step(&mut self, action: usize) -> Result<StepResult> {
        if self.done {
            return Err(usage("step called on a finished gridworld episode; reset first"));
        }
        if action >= 4 {
            return Err(usage(format!("gridworld action {action} out of range 0..4")));
        }
        let draw: f64 = self.rng.random();
        let effective = if self.spec.slip_prob > 0.0 && draw < self.spec.slip_prob {
            self.slipped = true;
            GridWorldSpec::perpendicular(action)[(draw < 0.5 * self.spec.slip_prob) as usize]
        } else {
            self.slipped = false;
            action
        };
        self.pos = self.spec.shift(self.pos, effective);
        self.steps += 1;
        let mut reward = self.spec.step_penalty;
        let terminated = self.pos == self.spec.goal;
        if terminated {
            reward += self.spec.goal_reward;
        }
        let truncated = !terminated && self.steps >= self.spec.max_steps;
        self.done = terminated || truncated;
        Ok(StepResult { observation: self.observe(), reward, terminated, truncated })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn deterministic() -> GridWorldSpec {
        GridWorldSpec { slip_prob: 0.0, ..Default::default() }
    }

    #[test]
    fn reset_gives_one_hot_start() {
        let mut env = GridWorld::new(GridWorldSpec::default()).unwrap();
        let obs = env.reset(0);
        assert_eq!(obs.len(), 25);
        assert_eq!(obs.iter().sum::<f64>(), 1.0);
        assert_eq!(obs[0], 1.0);
        assert_eq!(env.reset(0), obs);
    }

    #[test]
    fn right_moves_along_x() {
        let mut env = GridWorld::new(deterministic()).unwrap();
        env.reset(0);
        env.step(1).unwrap();
        assert_eq!(env.position(), (1, 0));
        // walls hold the agent in place
        env.step(2).unwrap();
        assert_eq!(env.position(), (1, 0));
    }

    #[test]
    fn shortest_path_return_matches_bfs() {
        let spec = deterministic();
        let len = spec.shortest_path_len().unwrap();
        assert_eq!(len, 8);
        let mut env = GridWorld::new(spec.clone()).unwrap();
        env.reset(1);
        let mut total = 0.0;
        for a in [1, 1, 1, 1, 0, 0, 0, 0] {
            let step = env.step(a).unwrap();
            total += step.reward;
            if step.terminated {
                break;
            }
        }
        let expected = spec.goal_reward + len as f64 * spec.step_penalty;
        assert!((total - expected).abs() < 1e-12);
        assert!(env.step(0).is_err());
    }

    #[test]
    fn truncation_at_max_steps() {
        let spec = GridWorldSpec { max_steps: 3, ..deterministic() };
        let mut env = GridWorld::new(spec).unwrap();
        env.reset(0);
        assert!(!env.step(3).unwrap().done());
        assert!(!env.step(3).unwrap().done());
        let last = env.step(3).unwrap();
        assert!(last.truncated && !last.terminated);
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(GridWorld::new(GridWorldSpec { goal: (5, 0), ..Default::default() }).is_err());
        assert!(GridWorld::new(GridWorldSpec { slip_prob: 1.0, ..Default::default() }).is_err());
        assert!(GridWorld::new(GridWorldSpec { max_steps: 0, ..Default::default() }).is_err());
        let mut env = GridWorld::new(GridWorldSpec::default()).unwrap();
        env.reset(0);
        assert!(env.step(4).is_err());
    }

    #[test]
    fn slip_frequency() {
        let spec = GridWorldSpec { max_steps: usize::MAX, goal: (4, 4), ..Default::default() };
        let mut env = GridWorld::new(spec.clone()).unwrap();
        env.reset(42);
        let n = 100_000;
        let mut slips = 0;
        let mut episode = 0;
        for i in 0..n {
            let step = env.step(i % 4).unwrap();
            slips += env.slipped() as usize;
            if step.done() {
                episode += 1;
                env.reset(42 + episode);
            }
        }
        let freq = slips as f64 / n as f64;
        assert!((freq - spec.slip_prob).abs() < 0.01, "{freq}");
    }

    #[test]
    fn determinism_per_seed() {
        let run = |seed| {
            let mut env = GridWorld::new(GridWorldSpec::default()).unwrap();
            env.reset(seed);
            (0..60)
                .map_while(|i| env.step((i * 7) % 4).ok())
                .map(|s| (s.observation, s.reward.to_bits(), s.terminated, s.truncated))
                .collect::<Vec<_>>()
        };
        assert_eq!(run(9), run(9));
    }

    #[test]
    fn optimal_return_small_cases() {
        let spec = GridWorldSpec {
            width: 2,
            height: 1,
            goal: (1, 0),
            step_penalty: 0.0,
            goal_reward: 1.0,
            slip_prob: 0.0,
            ..Default::default()
        };
        assert!((optimal_return(&spec, 0.9).unwrap() - 1.0).abs() < 1e-10);
        let zero = GridWorldSpec { step_penalty: 0.0, goal_reward: 0.0, ..Default::default() };
        assert!(optimal_return(&zero, 0.9).unwrap().abs() < 1e-10);
    }

    #[test]
    fn deterministic_optimum_is_discounted_shortest_path() {
        let spec = deterministic();
        let gamma: f64 = 0.99;
        let l = spec.shortest_path_len().unwrap() as i32;
        let oracle: f64 =
            (0..l).map(|t| gamma.powi(t) * spec.step_penalty).sum::<f64>() + gamma.powi(l - 1) * spec.goal_reward;
        assert!((optimal_return(&spec, gamma).unwrap() - oracle).abs() < 1e-9);
    }

    #[test]
    fn random_return_is_below_optimal() {
        let spec = GridWorldSpec::default();
        assert!(random_return(&spec, 0.99).unwrap() < optimal_return(&spec, 0.99).unwrap());
    }
}
