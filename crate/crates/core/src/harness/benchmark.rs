//! Multi-seed benchmark runs and their aggregate report.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::stats::{bootstrap_ci, iqm, mean, median, normalized_score, Statistic};
use crate::envs::{mix_seed, optimal_return, random_return, EnvSpec};
use crate::error::{Error, Result};
use crate::kernels::{KernelFamily, ShapingFunctionSpec};
use crate::policy::{Architecture, ParameterVector};
use crate::trainer::{evaluate, train, EvalConfig, TrainConfig};

const STREAM_EVAL_SEED: u64 = 0xE7A1;
const RANDOM_REFERENCE_EPISODES: usize = 1000;

/// Returns that define a normalized score of 0 (random) and 1 (expert).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReferences {
    pub random: f64,
    pub expert: f64,
    /// Discount applied to evaluation returns.
    pub eval_gamma: f64,
    pub description: String,
}

/// Gridworld: discounted returns at the training discount, expert = optimal
/// value from value iteration, random = exact uniform-policy value.
/// Pole balance: undiscounted episode length, expert = the step limit,
/// random = Monte Carlo mean of the uniform policy.
pub fn score_references(env: &EnvSpec, train: &TrainConfig) -> Result<ScoreReferences> {
    match env {
        EnvSpec::GridWorld(spec) => Ok(ScoreReferences {
            random: random_return(spec, train.gamma)?,
            expert: optimal_return(spec, train.gamma)?,
            eval_gamma: train.gamma,
            description: format!("discounted return (gamma = {}); expert = value iteration optimum; random = exact uniform-policy value", train.gamma),
        }),
        EnvSpec::PoleBalance(spec) => {
            let uniform = ParameterVector::zeros(Architecture::Tabular { obs_dim: 4, n_actions: spec.n_discrete_actions })?;
            let eval = EvalConfig { episodes: RANDOM_REFERENCE_EPISODES, gamma: 1.0, greedy: false, seed: 0 };
            let returns = evaluate(&uniform, env, eval)?;
            Ok(ScoreReferences {
                random: mean(&returns)?,
                expert: spec.max_steps as f64,
                eval_gamma: 1.0,
                description: format!(
                    "undiscounted return; expert = step limit; random = uniform policy over {RANDOM_REFERENCE_EPISODES} episodes"
                ),
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub kernel_index: usize,
    pub kernel: String,
    pub learning_rate: f64,
    pub seed: u64,
    /// Mean evaluation return; the random reference for failed cells.
    pub mean_return: f64,
    pub score: f64,
    pub failed: bool,
    pub metrics_csv: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbortLog {
    pub kernel: String,
    pub learning_rate: f64,
    pub seed: u64,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub kernel_index: usize,
    pub kernel: String,
    pub learning_rate: f64,
    /// Normalized scores in seed order.
    pub scores: Vec<f64>,
    pub mean: f64,
    pub iqm: f64,
    pub iqm_ci_low: f64,
    pub iqm_ci_high: f64,
    pub mean_ci_low: f64,
    pub mean_ci_high: f64,
    pub failed_cells: usize,
}

/// Score drop from the reference learning rate to a stress learning rate,
/// in percent of the reference score (positive = worse).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Degradation {
    pub kernel_index: usize,
    pub kernel: String,
    pub reference_lr: f64,
    pub stress_lr: f64,
    pub per_seed_percent: Vec<f64>,
    pub median_percent: f64,
    /// Same quantity computed on the group means.
    pub mean_score_percent: f64,
}

/// Directional comparison between kernels under learning-rate stress. Soft:
/// the toy environments are not expected to reproduce large-benchmark magnitudes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessCheck {
    pub soft: bool,
    pub stress_lr: f64,
    pub ano_median_degradation: f64,
    pub ppo_median_degradation: Option<f64>,
    pub ano_failed_cells: usize,
    pub spo_failed_cells: Option<usize>,
    /// ANO median degradation <= PPO median degradation.
    pub ano_degrades_no_more_than_ppo: Option<bool>,
    /// ANO collapse count <= SPO collapse count.
    pub ano_collapses_no_more_than_spo: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    /// Seconds since the Unix epoch; absent under a fixed clock.
    pub generated_at_unix: Option<u64>,
    pub env: String,
    pub config: ExperimentConfig,
    pub references: ScoreReferences,
    pub cells: Vec<CellResult>,
    pub groups: Vec<GroupSummary>,
    pub degradation: Vec<Degradation>,
    pub failed_cells: usize,
    pub aborts: Vec<AbortLog>,
    pub robustness: Vec<RobustnessCheck>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenchmarkOptions {
    /// Worker threads; 0 uses rayon's default.
    pub jobs: usize,
    pub fixed_clock: bool,
}

impl Default for BenchmarkOptions {
    fn default() -> Self {
        Self { jobs: 1, fixed_clock: true }
    }
}

struct Cell {
    kernel_index: usize,
    kernel: ShapingFunctionSpec,
    lr: f64,
    seed: u64,
}

fn cell_label(c: &Cell) -> String {
    format!("k{}_{}_lr{:e}_seed{}", c.kernel_index, c.kernel.family().name(), c.lr, c.seed)
}

fn run_cell(
    cfg: &ExperimentConfig,
    refs: &ScoreReferences,
    cell: &Cell,
    runs_dir: Option<&Path>,
) -> Result<(CellResult, Option<AbortLog>)> {
    let train_cfg = TrainConfig { kernel: cell.kernel, learning_rate: cell.lr, seed: cell.seed, ..cfg.train.clone() };
    let dir = runs_dir.map(|d| d.join(cell_label(cell)));
    let outcome = train(&cfg.env, &train_cfg, dir.as_deref());
    let label = cell.kernel.to_string();
    let mut result = CellResult {
        kernel_index: cell.kernel_index,
        kernel: label.clone(),
        learning_rate: cell.lr,
        seed: cell.seed,
        mean_return: refs.random,
        score: 0.0,
        failed: true,
        metrics_csv: dir.map(|d| d.join("metrics.csv")),
    };
    match outcome {
        Ok(out) => {
            let eval = EvalConfig {
                episodes: cfg.eval_episodes,
                gamma: refs.eval_gamma,
                greedy: cfg.eval_greedy,
                seed: mix_seed(cell.seed, STREAM_EVAL_SEED, 0),
            };
            let returns = evaluate(&out.final_params, &cfg.env, eval)?;
            result.mean_return = mean(&returns)?;
            result.score = normalized_score(result.mean_return, refs.random, refs.expert)?;
            result.failed = false;
            Ok((result, None))
        }
        Err(e @ (Error::NonFiniteLoss(_) | Error::Internal(_))) => {
            log::warn!("cell {label} lr {} seed {} collapsed: {e}", cell.lr, cell.seed);
            let abort = AbortLog { kernel: label, learning_rate: cell.lr, seed: cell.seed, message: e.to_string() };
            Ok((result, Some(abort)))
        }
        Err(e) => Err(e),
    }
}

fn degradation_percent(reference: f64, stress: f64) -> f64 {
    100.0 * (reference - stress) / reference.abs().max(1e-12)
}

/// Trains every `(kernel, learning rate, seed)` cell, evaluates the final
/// policies and aggregates normalized scores. With `out_dir` set, writes
/// `report.json` and one `runs/<cell>/metrics.csv` per cell.
pub fn run_benchmark(cfg: &ExperimentConfig, opts: BenchmarkOptions) -> Result<AggregateReport> {
    cfg.validate()?;
    let refs = score_references(&cfg.env, &cfg.train)?;
    let runs_dir = cfg.out_dir.as_ref().map(|d| d.join("runs"));
    if let Some(dir) = &runs_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut cells = Vec::new();
    for (kernel_index, kernel) in cfg.kernels.iter().enumerate() {
        for &lr in &cfg.learning_rates {
            for &seed in &cfg.seeds {
                cells.push(Cell { kernel_index, kernel: *kernel, lr, seed });
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs)
        .build()
        .map_err(|e| Error::Internal(format!("thread pool: {e}")))?;
    let outcomes: Vec<Result<(CellResult, Option<AbortLog>)>> =
        pool.install(|| cells.par_iter().map(|c| run_cell(cfg, &refs, c, runs_dir.as_deref())).collect());

    let mut results = Vec::with_capacity(cells.len());
    let mut aborts = Vec::new();
    for outcome in outcomes {
        let (result, abort) = outcome?;
        results.push(result);
        aborts.extend(abort);
    }

    let mut groups = Vec::new();
    for (kernel_index, kernel) in cfg.kernels.iter().enumerate() {
        for &lr in &cfg.learning_rates {
            let members: Vec<&CellResult> =
                results.iter().filter(|r| r.kernel_index == kernel_index && r.learning_rate == lr).collect();
            let scores: Vec<f64> = members.iter().map(|r| r.score).collect();
            let (iqm_ci_low, iqm_ci_high) = bootstrap_ci(&scores, Statistic::Iqm, cfg.bootstrap_resamples, cfg.bootstrap_seed)?;
            let (mean_ci_low, mean_ci_high) =
                bootstrap_ci(&scores, Statistic::Mean, cfg.bootstrap_resamples, cfg.bootstrap_seed)?;
            groups.push(GroupSummary {
                kernel_index,
                kernel: kernel.to_string(),
                learning_rate: lr,
                mean: mean(&scores)?,
                iqm: iqm(&scores)?,
                iqm_ci_low,
                iqm_ci_high,
                mean_ci_low,
                mean_ci_high,
                failed_cells: members.iter().filter(|r| r.failed).count(),
                scores,
            });
        }
    }

    let mut degradation = Vec::new();
    for (kernel_index, kernel) in cfg.kernels.iter().enumerate() {
        let group = |lr: f64| groups.iter().find(|g| g.kernel_index == kernel_index && g.learning_rate == lr);
        let reference = group(cfg.reference_lr).expect("reference group exists");
        for &stress_lr in cfg.learning_rates.iter().filter(|&&lr| lr != cfg.reference_lr) {
            let stress = group(stress_lr).expect("stress group exists");
            let per_seed: Vec<f64> = reference
                .scores
                .iter()
                .zip(&stress.scores)
                .map(|(&r, &s)| degradation_percent(r, s))
                .collect();
            degradation.push(Degradation {
                kernel_index,
                kernel: kernel.to_string(),
                reference_lr: cfg.reference_lr,
                stress_lr,
                median_percent: median(&per_seed)?,
                mean_score_percent: degradation_percent(reference.mean, stress.mean),
                per_seed_percent: per_seed,
            });
        }
    }

    let robustness = robustness_checks(cfg, &groups, &degradation);
    let report = AggregateReport {
        generated_at_unix: if opts.fixed_clock {
            None
        } else {
            Some(SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0))
        },
        env: cfg.env.name().to_string(),
        config: cfg.clone(),
        references: refs,
        failed_cells: results.iter().filter(|r| r.failed).count(),
        cells: results,
        groups,
        degradation,
        aborts,
        robustness,
    };
    if let Some(dir) = &cfg.out_dir {
        write_report(&report, &dir.join("report.json"))?;
    }
    Ok(report)
}

fn robustness_checks(cfg: &ExperimentConfig, groups: &[GroupSummary], degradation: &[Degradation]) -> Vec<RobustnessCheck> {
    let first = |family: KernelFamily| cfg.kernels.iter().position(|k| k.family() == family);
    let Some(ano) = first(KernelFamily::Ano) else { return Vec::new() };
    let (ppo, spo) = (first(KernelFamily::Ppo), first(KernelFamily::Spo));
    let failed = |k: usize, lr: f64| {
        groups.iter().find(|g| g.kernel_index == k && g.learning_rate == lr).map(|g| g.failed_cells).unwrap_or(0)
    };
    let median_of = |k: usize, lr: f64| {
        degradation.iter().find(|d| d.kernel_index == k && d.stress_lr == lr).map(|d| d.median_percent)
    };
    cfg.learning_rates
        .iter()
        .filter(|&&lr| lr != cfg.reference_lr)
        .filter_map(|&lr| {
            let ano_median = median_of(ano, lr)?;
            let ppo_median = ppo.and_then(|p| median_of(p, lr));
            let ano_failed = failed(ano, lr);
            let spo_failed = spo.map(|s| failed(s, lr));
            Some(RobustnessCheck {
                soft: true,
                stress_lr: lr,
                ano_median_degradation: ano_median,
                ppo_median_degradation: ppo_median,
                ano_failed_cells: ano_failed,
                spo_failed_cells: spo_failed,
                ano_degrades_no_more_than_ppo: ppo_median.map(|p| ano_median <= p),
                ano_collapses_no_more_than_spo: spo_failed.map(|s| ano_failed <= s),
            })
        })
        .collect()
}

pub fn write_report(report: &AggregateReport, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut text = serde_json::to_string_pretty(report)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_report(path: &Path) -> Result<AggregateReport> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::GridWorldSpec;

    fn tiny(kernels: Vec<ShapingFunctionSpec>, lrs: Vec<f64>, seeds: Vec<u64>) -> ExperimentConfig {
        let env = EnvSpec::GridWorld(GridWorldSpec { width: 3, height: 3, goal: (2, 2), ..Default::default() });
        let mut cfg = ExperimentConfig::new(env, kernels, lrs, seeds).unwrap();
        cfg.train = TrainConfig { total_env_steps: 1024, rollout_length: 64, n_envs: 2, minibatch_size: 64, ..Default::default() };
        cfg.eval_episodes = 10;
        cfg.bootstrap_resamples = 1000;
        cfg
    }

    fn ano() -> ShapingFunctionSpec {
        ShapingFunctionSpec::new(KernelFamily::Ano, 0.2).unwrap()
    }

    #[test]
    fn single_cell_report() {
        let report = run_benchmark(&tiny(vec![ano()], vec![2.5e-4], vec![3]), BenchmarkOptions::default()).unwrap();
        assert_eq!(report.cells.len(), 1);
        let g = &report.groups[0];
        assert_eq!(g.scores.len(), 1);
        assert_eq!(g.iqm, g.scores[0]);
        assert_eq!(g.mean, g.scores[0]);
        assert!(report.degradation.is_empty());
        assert_eq!(report.generated_at_unix, None);
    }

    #[test]
    fn duplicate_kernels_give_identical_scores_in_parallel() {
        let cfg = tiny(vec![ano(), ano()], vec![2.5e-4, 1e-3], vec![0, 1]);
        let report = run_benchmark(&cfg, BenchmarkOptions { jobs: 3, fixed_clock: true }).unwrap();
        assert_eq!(report.groups[0].scores, report.groups[2].scores);
        assert_eq!(report.groups[1].scores, report.groups[3].scores);
        assert_eq!(report.degradation.len(), 2);
        assert_eq!(report.failed_cells, report.aborts.len());
        let again = run_benchmark(&cfg, BenchmarkOptions { jobs: 1, fixed_clock: true }).unwrap();
        assert_eq!(serde_json::to_string(&report).unwrap(), serde_json::to_string(&again).unwrap());
    }

    #[test]
    fn diverging_cells_are_scored_as_random() {
        // unclipped identity kernel with a huge step blows up the ratio
        let mut cfg = tiny(vec![ShapingFunctionSpec::identity(), ano()], vec![50.0], vec![0, 1]);
        cfg.train.max_grad_norm = None;
        cfg.train.advantage_normalization = false;
        cfg.train.epochs = 10;
        let report = run_benchmark(&cfg, BenchmarkOptions::default()).unwrap();
        assert_eq!(report.failed_cells, report.aborts.len());
        for cell in report.cells.iter().filter(|c| c.failed) {
            assert_eq!(cell.score, 0.0);
            assert_eq!(cell.mean_return, report.references.random);
        }
    }

    #[test]
    fn report_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny(vec![ano()], vec![2.5e-4], vec![0, 1]);
        cfg.out_dir = Some(dir.path().to_path_buf());
        let report = run_benchmark(&cfg, BenchmarkOptions::default()).unwrap();
        let back = read_report(&dir.path().join("report.json")).unwrap();
        assert_eq!(back, report);
        for cell in &report.cells {
            assert!(cell.metrics_csv.as_ref().unwrap().exists());
        }
    }
}
