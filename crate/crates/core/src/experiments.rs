//! Convergence and consistency trend studies on synthetic data.
//!
//! These reports are numerical evidence only; they do not prove anything.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{generate_synthetic, write_atomic, PulseSpec, SynthMode, SynthOptions};
use crate::density::{RhoParams, N_RHO};
use crate::error::{PopdiffError, Result};
use crate::forward::{simulate_population, sup_diff, Episode};
use crate::grid_basis::{GridSpec, QBox};
use crate::objective::ObjectiveOptions;
use crate::optimizer::{fit, initialize, FitStatus, InitOptions, OptimizerOptions};

pub const REPORT_NOTE: &str = "numerical evidence only, not a proof";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrendAxis {
    /// Number of episodes.
    #[serde(rename = "nu")]
    Nu,
    /// Samples per episode, with the horizon fixed and the interval shrinking.
    #[serde(rename = "mu")]
    Mu,
    /// Discretization level.
    #[serde(rename = "N")]
    N,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorNorm {
    /// Euclidean distance between the means.
    Mean,
    /// Euclidean distance over all nine parameters.
    Full,
}

impl ErrorNorm {
    pub fn distance(self, a: &RhoParams, b: &RhoParams) -> f64 {
        match self {
            ErrorNorm::Mean => (a.mu1 - b.mu1).hypot(a.mu2 - b.mu2),
            ErrorNorm::Full => {
                let (x, y) = (a.to_array(), b.to_array());
                (0..N_RHO)
                    .map(|k| (x[k] - y[k]).powi(2))
                    .sum::<f64>()
                    .sqrt()
            }
        }
    }
}

/// Everything besides the level schedule that a trend run depends on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendSettings {
    pub spec: GridSpec,
    /// Episode length in hours.
    pub horizon: f64,
    /// Episodes per data set when the axis is not `nu`.
    pub n_episodes: usize,
    pub noise_sigma: f64,
    pub seeds: Vec<u64>,
    pub pulse: PulseSpec,
    pub global_box: QBox,
    pub norm: ErrorNorm,
    pub objective: ObjectiveOptions,
    pub optimizer: OptimizerOptions,
    pub init: InitOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub level: usize,
    pub seed: u64,
    pub error: Option<f64>,
    pub status: Option<FitStatus>,
    pub final_cost: Option<f64>,
    pub rho_hat: Option<RhoParams>,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendReport {
    pub axis: TrendAxis,
    pub levels: Vec<usize>,
    /// Median over seeds per level; failed cells are left out.
    pub errors: Vec<f64>,
    pub monotone: bool,
    pub note: String,
    pub truth: Option<RhoParams>,
    pub settings: TrendSettings,
    pub cells: Vec<CellResult>,
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

pub fn nonincreasing(values: &[f64]) -> bool {
    values.iter().all(|v| v.is_finite()) && values.windows(2).all(|w| w[1] <= w[0])
}

fn summarize(levels: &[usize], cells: &[CellResult]) -> (Vec<f64>, bool) {
    let errors: Vec<f64> = levels
        .iter()
        .map(|&l| {
            let ok: Vec<f64> = cells
                .iter()
                .filter(|c| c.level == l)
                .filter_map(|c| c.error)
                .collect();
            median(&ok)
        })
        .collect();
    let monotone = nonincreasing(&errors);
    (errors, monotone)
}

/// Moment-based start followed by the population fit.
fn fit_from_moments(
    episodes: &[Episode],
    spec: &GridSpec,
    s: &TrendSettings,
) -> Result<crate::optimizer::FitResult> {
    let init = initialize(episodes, spec, s.global_box, &s.init, &s.optimizer)?;
    fit(
        episodes,
        spec,
        &init.rho,
        s.global_box,
        &s.objective,
        &s.optimizer,
    )
}

fn failed(level: usize, seed: u64, e: PopdiffError) -> CellResult {
    CellResult {
        level,
        seed,
        error: None,
        status: None,
        final_cost: None,
        rho_hat: None,
        failure: Some(e.to_string()),
    }
}

/// Estimator error against the truth as the amount of data grows, with the
/// episode horizon fixed. Along `Nu` the number of population-mode episodes
/// is the level; along `Mu` the level is the number of samples per episode
/// and the sampling interval is `horizon / level`.
pub fn consistency_trend(
    rho0: &RhoParams,
    axis: TrendAxis,
    levels: &[usize],
    settings: &TrendSettings,
) -> Result<TrendReport> {
    if levels.len() < 3 || !levels.windows(2).all(|w| w[0] < w[1]) || levels[0] == 0 {
        return Err(PopdiffError::Domain(
            "a trend needs at least 3 strictly increasing positive levels".into(),
        ));
    }
    if settings.seeds.len() < 5 {
        return Err(PopdiffError::Domain(format!(
            "a trend needs at least 5 seeds, got {}",
            settings.seeds.len()
        )));
    }
    if axis == TrendAxis::N {
        return Err(PopdiffError::Domain(
            "use refinement_trend for the N axis".into(),
        ));
    }
    rho0.validate()?;
    let jobs: Vec<(usize, u64)> = levels
        .iter()
        .flat_map(|&l| settings.seeds.iter().map(move |&s| (l, s)))
        .collect();
    let cells: Vec<CellResult> = jobs
        .par_iter()
        .map(|&(level, seed)| {
            let (n_episodes, spec, steps) = match axis {
                TrendAxis::Nu => {
                    let steps = (settings.horizon / settings.spec.tau).round() as usize;
                    (level, settings.spec, steps)
                }
                _ => {
                    let spec = GridSpec {
                        tau: settings.horizon / level as f64,
                        ..settings.spec
                    };
                    (settings.n_episodes, spec, level)
                }
            };
            let synth = SynthOptions {
                n_episodes,
                steps,
                noise_sigma: settings.noise_sigma,
                seed,
                mode: SynthMode::Population,
                pulse: settings.pulse,
                clamp_nonnegative: false,
                quad_order: settings.objective.quad_order,
            };
            let run = generate_synthetic(rho0, &spec, &synth)
                .and_then(|eps| fit_from_moments(&eps, &spec, settings));
            match run {
                Ok(res) => CellResult {
                    level,
                    seed,
                    error: Some(settings.norm.distance(&res.rho_hat, rho0)),
                    status: Some(res.status),
                    final_cost: Some(res.final_cost()),
                    rho_hat: Some(res.rho_hat),
                    failure: None,
                },
                Err(e) => failed(level, seed, e),
            }
        })
        .collect();
    let (errors, monotone) = summarize(levels, &cells);
    Ok(TrendReport {
        axis,
        levels: levels.to_vec(),
        errors,
        monotone,
        note: REPORT_NOTE.into(),
        truth: Some(*rho0),
        settings: settings.clone(),
        cells,
    })
}

/// Fits the same episodes at each discretization level from the same
/// starting law and reports the distance of each estimate to the one at the
/// finest level. Levels are labelled by `n`.
pub fn refinement_trend(
    specs: &[GridSpec],
    episodes: &[Episode],
    init: &RhoParams,
    settings: &TrendSettings,
) -> Result<TrendReport> {
    if specs.len() < 3 {
        return Err(PopdiffError::Domain(
            "refinement needs at least 3 levels".into(),
        ));
    }
    let nested = specs.windows(2).all(|w| {
        w[1].n > w[0].n
            && w[1].n % w[0].n == 0
            && w[1].m1 % w[0].m1 == 0
            && w[1].m2 % w[0].m2 == 0
            && w[1].tau == w[0].tau
    });
    if !nested {
        return Err(PopdiffError::Domain(
            "refinement levels must be nested with a common sampling interval".into(),
        ));
    }
    let fits: Vec<Result<crate::optimizer::FitResult>> = specs
        .par_iter()
        .map(|spec| {
            fit(
                episodes,
                spec,
                init,
                settings.global_box,
                &settings.objective,
                &settings.optimizer,
            )
        })
        .collect();
    let finest = match fits.last() {
        Some(Ok(r)) => r.rho_hat,
        Some(Err(e)) => {
            return Err(PopdiffError::Domain(format!(
                "fit at the finest level failed: {e}"
            )));
        }
        None => unreachable!(),
    };
    let levels: Vec<usize> = specs.iter().map(|s| s.n).collect();
    let cells: Vec<CellResult> = fits
        .into_iter()
        .zip(&levels)
        .map(|(r, &level)| match r {
            Ok(res) => CellResult {
                level,
                seed: 0,
                error: Some(settings.norm.distance(&res.rho_hat, &finest)),
                status: Some(res.status),
                final_cost: Some(res.final_cost()),
                rho_hat: Some(res.rho_hat),
                failure: None,
            },
            Err(e) => failed(level, 0, e),
        })
        .collect();
    let (errors, monotone) = summarize(&levels, &cells);
    Ok(TrendReport {
        axis: TrendAxis::N,
        levels,
        errors,
        monotone,
        note: REPORT_NOTE.into(),
        truth: None,
        settings: settings.clone(),
        cells,
    })
}

/// Sup-norm differences of the population output between consecutive
/// discretization levels.
pub fn output_refinement(
    rho: &RhoParams,
    specs: &[GridSpec],
    u: &[f64],
    quad_order: usize,
) -> Result<Vec<f64>> {
    let outs = specs
        .iter()
        .map(|s| simulate_population(rho, s, u, quad_order))
        .collect::<Result<Vec<_>>>()?;
    Ok(outs.windows(2).map(|w| sup_diff(&w[0], &w[1])).collect())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:e}"))
}

/// Summary CSV, per-cell CSV and full JSON, written as `<stem>.csv`,
/// `<stem>_cells.csv` and `<stem>.json` under `dir`.
pub fn write_report(report: &TrendReport, dir: &Path, stem: &str) -> Result<()> {
    let axis = serde_json::to_value(report.axis)?;
    let axis = axis.as_str().unwrap_or_default();
    let mut summary = String::new();
    writeln!(summary, "# popdiff-trend v1").unwrap();
    writeln!(
        summary,
        "# {REPORT_NOTE}; axis {axis}; monotone {}",
        report.monotone
    )
    .unwrap();
    writeln!(summary, "level,median_error,n_ok,n_failed").unwrap();
    for (l, e) in report.levels.iter().zip(&report.errors) {
        let at = report.cells.iter().filter(|c| c.level == *l);
        let ok = at.clone().filter(|c| c.error.is_some()).count();
        let bad = at.count() - ok;
        writeln!(summary, "{l},{e:e},{ok},{bad}").unwrap();
    }
    let mut cells = String::new();
    writeln!(cells, "# popdiff-trend-cells v1").unwrap();
    writeln!(cells, "level,seed,error,final_cost,status,failure").unwrap();
    for c in &report.cells {
        let status = c
            .status
            .map(|s| {
                serde_json::to_value(s)
                    .ok()
                    .and_then(|v| v.as_str().map(String::from))
                    .unwrap_or_default()
            })
            .unwrap_or_default();
        let failure = c.failure.as_deref().unwrap_or("").replace([',', '\n'], ";");
        writeln!(
            cells,
            "{},{},{},{},{status},{failure}",
            c.level,
            c.seed,
            fmt_opt(c.error),
            fmt_opt(c.final_cost)
        )
        .unwrap();
    }
    write_atomic(&dir.join(format!("{stem}.csv")), &summary)?;
    write_atomic(&dir.join(format!("{stem}_cells.csv")), &cells)?;
    write_atomic(
        &dir.join(format!("{stem}.json")),
        &serde_json::to_string_pretty(report)?,
    )?;
    Ok(())
}
