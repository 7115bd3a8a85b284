//! CSV data behind kernel-geometry, training-curve and aggregate plots.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::benchmark::read_report;
use crate::error::{usage, Error, Result};
use crate::kernels::{KernelFamily, ShapingFunctionSpec};
use crate::trainer::{format_metric, METRICS_HEADER};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlotKind {
    /// Kernel values and slopes on `r in [0, 3]`; needs no input.
    KernelGeometry,
    /// One row per update from a metrics CSV.
    TrainingCurves,
    /// One row per (kernel, learning rate) group from a report JSON.
    AggregateBars,
}

impl FromStr for PlotKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kernel_geometry" => Ok(Self::KernelGeometry),
            "training_curves" => Ok(Self::TrainingCurves),
            "aggregate_bars" => Ok(Self::AggregateBars),
            other => Err(usage(format!(
                "unknown plot kind `{other}` (expected kernel_geometry, training_curves or aggregate_bars)"
            ))),
        }
    }
}

fn kernel_geometry(epsilon: f64) -> Result<String> {
    let families = [KernelFamily::Ppo, KernelFamily::Spo, KernelFamily::Ano];
    let specs = families.map(|f| ShapingFunctionSpec::new(f, epsilon)).into_iter().collect::<Result<Vec<_>>>()?;
    let mut out = String::from("r,f_ppo,f_spo,f_ano,df_ppo,df_spo,df_ano\n");
    for i in 0..=3000 {
        let r = i as f64 / 1000.0;
        let _ = write!(out, "{}", format_metric(r));
        for s in &specs {
            let _ = write!(out, ",{}", format_metric(s.value(r)));
        }
        for s in &specs {
            let _ = write!(out, ",{}", format_metric(s.slope(r).value));
        }
        out.push('\n');
    }
    Ok(out)
}

fn training_curves(input: &Path) -> Result<String> {
    let text = std::fs::read_to_string(input)?;
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(usage(format!("{} is not a metrics CSV", input.display())));
    }
    // reorder so the x axis comes first
    let mut out = String::from(
        "update_index,step,episode_return_mean,loss_policy,loss_value,loss_entropy,approx_kl,ratio_min,ratio_max,grad_norm\n",
    );
    for (i, line) in lines.enumerate() {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 10 {
            return Err(usage(format!("metrics row {} has {} columns", i + 1, cols.len())));
        }
        out.push_str(cols[1]);
        out.push(',');
        out.push_str(cols[0]);
        for c in &cols[2..] {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
    }
    Ok(out)
}

fn aggregate_bars(input: &Path) -> Result<String> {
    let report = read_report(input)?;
    let mut out = String::from("kernel,learning_rate,n,mean,iqm,iqm_ci_low,iqm_ci_high,mean_ci_low,mean_ci_high,failed_cells\n");
    for g in &report.groups {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            g.kernel,
            format_metric(g.learning_rate),
            g.scores.len(),
            format_metric(g.mean),
            format_metric(g.iqm),
            format_metric(g.iqm_ci_low),
            format_metric(g.iqm_ci_high),
            format_metric(g.mean_ci_low),
            format_metric(g.mean_ci_high),
            g.failed_cells
        );
    }
    Ok(out)
}

/// Writes the CSV for `kind` to `out` and returns that path. `input` is the
/// metrics CSV or report JSON to reshape; kernel geometry ignores it.
pub fn emit_plot_data(kind: PlotKind, input: Option<&Path>, out: &Path, epsilon: f64) -> Result<PathBuf> {
    let need_input = || input.ok_or_else(|| usage("this plot kind needs an input file"));
    let text = match kind {
        PlotKind::KernelGeometry => kernel_geometry(epsilon)?,
        PlotKind::TrainingCurves => training_curves(need_input()?)?,
        PlotKind::AggregateBars => aggregate_bars(need_input()?)?,
    };
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(out, text)?;
    Ok(out.to_path_buf())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{EnvSpec, GridWorldSpec};
    use crate::trainer::{train, TrainConfig};

    fn parse(text: &str) -> Vec<Vec<f64>> {
        text.lines().skip(1).map(|l| l.split(',').map(|c| c.parse().unwrap()).collect()).collect()
    }

    #[test]
    fn kernel_geometry_anchors_and_peaks() {
        let rows = parse(&kernel_geometry(0.2).unwrap());
        assert_eq!(rows.len(), 3001);
        let one = &rows[1000];
        assert_eq!(one[0], 1.0);
        for f in &one[1..4] {
            assert!((f - 1.0).abs() < 1e-9);
        }
        let argmax = (0..rows.len()).max_by(|&a, &b| rows[a][3].total_cmp(&rows[b][3])).unwrap();
        assert_eq!(argmax, 1200);
    }

    #[test]
    fn unknown_kind_is_a_usage_error() {
        assert!(matches!("bars".parse::<PlotKind>(), Err(Error::Usage(_))));
    }

    #[test]
    fn training_curves_have_one_row_per_update() {
        let dir = tempfile::tempdir().unwrap();
        let env = EnvSpec::GridWorld(GridWorldSpec { width: 3, height: 3, goal: (2, 2), ..Default::default() });
        let cfg = TrainConfig { total_env_steps: 1024, rollout_length: 64, n_envs: 2, minibatch_size: 64, ..Default::default() };
        let run = train(&env, &cfg, Some(dir.path())).unwrap();
        let out = dir.path().join("curves.csv");
        emit_plot_data(PlotKind::TrainingCurves, run.metrics_csv_path.as_deref(), &out, 0.2).unwrap();
        let text = std::fs::read_to_string(&out).unwrap();
        assert_eq!(text.lines().count() - 1, run.history.len());
        assert!(emit_plot_data(PlotKind::AggregateBars, None, &out, 0.2).is_err());
    }
}
