//! Command-line entry points.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde_json::json;

use crate::config::{InitMode, RunConfig, ScalingMode};
use crate::data::{
    generate_synthetic, load_raw, resample, write_atomic, write_episode, RawEpisode, Scaling,
};
use crate::density::RhoParams;
use crate::error::{PopdiffError, Result};
use crate::experiments::{consistency_trend, write_report, ErrorNorm, TrendAxis, TrendSettings};
use crate::forward::{simulate_population, Episode};
use crate::objective::{gradient_adjoint, gradient_fd, max_relative_error};
use crate::optimizer::{fit, initialize};
use crate::uncertainty::credible_band;

pub const GRADCHECK_TOL: f64 = 1e-4;
const GRADCHECK_STEP: f64 = 1e-6;

#[derive(Debug, Parser)]
#[command(
    name = "popdiff",
    version,
    about = "Fit and simulate a population model of transdermal alcohol transport"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Run configuration (TOML).
    pub config: PathBuf,
    /// Output directory.
    #[arg(long, short, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit the parameter distribution to pooled episodes.
    Fit {
        #[command(flatten)]
        common: Common,
        #[arg(required = true, num_args = 1..)]
        episodes: Vec<PathBuf>,
    },
    /// Predicted versus observed TAC for one episode.
    Simulate {
        #[command(flatten)]
        common: Common,
        rho: PathBuf,
        episode: PathBuf,
    },
    /// Write synthetic episode files drawn from a parameter distribution.
    Synth {
        #[command(flatten)]
        common: Common,
        rho: PathBuf,
    },
    /// Compare the adjoint gradient with central differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        rho: PathBuf,
        #[arg(required = true, num_args = 1..)]
        episodes: Vec<PathBuf>,
    },
    /// Pointwise credible band of the predicted TAC for one episode.
    Bands {
        #[command(flatten)]
        common: Common,
        rho: PathBuf,
        episode: PathBuf,
    },
    /// Estimator error as the number of synthetic episodes grows.
    Consistency {
        #[command(flatten)]
        common: Common,
        rho: PathBuf,
    },
}

/// Reads either a bare parameter object or a fit result with `rho_hat`.
pub fn load_rho(path: &Path) -> Result<RhoParams> {
    let value: serde_json::Value = serde_json::from_str(&crate::data::read_text(path)?)?;
    let inner = value.get("rho_hat").cloned().unwrap_or(value);
    let rho: RhoParams = serde_json::from_value(inner)?;
    rho.validate()?;
    Ok(rho)
}

struct Loaded {
    episodes: Vec<Episode>,
    scaling: Scaling,
}

fn load_episodes(cfg: &RunConfig, paths: &[PathBuf]) -> Result<Loaded> {
    let raw = paths
        .iter()
        .map(|p| load_raw(p))
        .collect::<Result<Vec<RawEpisode>>>()?;
    let scaling = match cfg.scaling {
        ScalingMode::None => Scaling::identity(),
        ScalingMode::Paper => Scaling::from_data(&raw, cfg.brac_ref, cfg.tac_ref)?,
    };
    let episodes = raw
        .iter()
        .map(|r| resample(r, cfg.tau, scaling))
        .collect::<Result<Vec<_>>>()?;
    Ok(Loaded { episodes, scaling })
}

fn trace_csv(rows: &[crate::optimizer::TraceRow]) -> String {
    let mut s = String::from("# popdiff-trace v1\niteration,cost,grad_norm,step_norm\n");
    for r in rows {
        writeln!(
            s,
            "{},{:e},{:e},{:e}",
            r.iteration, r.cost, r.grad_norm, r.step_norm
        )
        .unwrap();
    }
    s
}

fn cmd_fit(common: &Common, paths: &[PathBuf]) -> Result<()> {
    let cfg = RunConfig::load(&common.config)?;
    let spec = cfg.grid()?;
    let Loaded { episodes, scaling } = load_episodes(&cfg, paths)?;
    let mut warnings = Vec::new();
    let init = match cfg.init {
        InitMode::Explicit => load_rho(cfg.init_rho.as_deref().expect("validated"))?,
        InitMode::Moments => {
            let init = initialize(
                &episodes,
                &spec,
                cfg.global_box(),
                &cfg.init_options(),
                &cfg.optimizer(),
            )?;
            for w in &init.warnings {
                warn!("{w}");
            }
            warnings = init.warnings;
            init.rho
        }
    };
    info!("fitting {} episodes from {:?}", episodes.len(), init);
    let res = fit(
        &episodes,
        &spec,
        &init,
        cfg.global_box(),
        &cfg.objective(),
        &cfg.optimizer(),
    )?;
    let sigma = res.rho_hat.sigma()?;
    let out = json!({
        "rho_hat": res.rho_hat,
        "sigma": [[sigma[(0, 0)], sigma[(0, 1)]], [sigma[(1, 0)], sigma[(1, 1)]]],
        "status": res.status,
        "cost": res.final_cost(),
        "trace": res.cost_trace,
        "config_echo": cfg,
        "seed": cfg.seed,
        "init": init,
        "init_warnings": warnings,
        "scaling": scaling,
        "episodes": episodes.iter().map(|e| e.id.clone()).collect::<Vec<_>>(),
        "n_cost_evals": res.n_cost_evals,
        "n_grad_evals": res.n_grad_evals,
    });
    write_atomic(
        &common.out.join("fit_result.json"),
        &(serde_json::to_string_pretty(&out)? + "\n"),
    )?;
    write_atomic(
        &common.out.join("cost_trace.csv"),
        &trace_csv(&res.cost_trace),
    )?;
    println!("status {:?}, cost {:e}", res.status, res.final_cost());
    Ok(())
}

fn single_episode(cfg: &RunConfig, path: &Path) -> Result<(Episode, Scaling)> {
    let Loaded {
        mut episodes,
        scaling,
    } = load_episodes(cfg, &[path.to_path_buf()])?;
    Ok((episodes.remove(0), scaling))
}

fn cmd_simulate(common: &Common, rho: &Path, episode: &Path) -> Result<()> {
    let cfg = RunConfig::load(&common.config)?;
    let spec = cfg.grid()?;
    let rho = load_rho(rho)?;
    let (ep, scaling) = single_episode(&cfg, episode)?;
    let pred = simulate_population(&rho, &spec, &ep.u, cfg.quad_order)?;
    let mut s = String::from("# popdiff-prediction v1\nt_hours,brac,observed,predicted\n");
    for (j, t) in ep.times().iter().enumerate() {
        let u = ep.u.get(j).copied().unwrap_or(f64::NAN) * scaling.brac;
        writeln!(
            s,
            "{t},{u},{},{}",
            ep.y_obs[j] * scaling.tac,
            pred[j] * scaling.tac
        )
        .unwrap();
    }
    write_atomic(&common.out.join(format!("{}_predicted.csv", ep.id)), &s)
}

fn cmd_synth(common: &Common, rho: &Path) -> Result<()> {
    let cfg = RunConfig::load(&common.config)?;
    let rho = load_rho(rho)?;
    let eps = generate_synthetic(&rho, &cfg.grid()?, &cfg.synth())?;
    for ep in &eps {
        write_atomic(
            &common.out.join(format!("{}.csv", ep.id)),
            &write_episode(ep),
        )?;
    }
    println!("wrote {} episodes", eps.len());
    Ok(())
}

/// Returns whether the check passed.
fn cmd_gradcheck(common: &Common, rho: &Path, paths: &[PathBuf]) -> Result<bool> {
    let cfg = RunConfig::load(&common.config)?;
    let spec = cfg.grid()?;
    let rho = load_rho(rho)?;
    let Loaded { episodes, .. } = load_episodes(&cfg, paths)?;
    let adj = gradient_adjoint(&rho, &spec, &episodes, &cfg.objective())?;
    let fd = gradient_fd(&rho, &spec, &episodes, GRADCHECK_STEP, &cfg.objective())?;
    let err = max_relative_error(&adj.grad, &fd.grad, 1e-3);
    let pass = err <= GRADCHECK_TOL;
    println!(
        "{:>5} {:>24} {:>24}",
        "param", "adjoint", "finite-difference"
    );
    for (k, name) in crate::density::RHO_NAMES.iter().enumerate() {
        println!("{name:>5} {:>24.15e} {:>24.15e}", adj.grad[k], fd.grad[k]);
    }
    println!(
        "max relative error {err:.3e} (tolerance {GRADCHECK_TOL:e}): {}",
        if pass { "ok" } else { "FAILED" }
    );
    let report = json!({
        "cost": adj.cost,
        "adjoint": adj.grad,
        "finite_difference": fd.grad,
        "max_relative_error": err,
        "tolerance": GRADCHECK_TOL,
        "pass": pass,
    });
    write_atomic(
        &common.out.join("gradcheck.json"),
        &(serde_json::to_string_pretty(&report)? + "\n"),
    )?;
    Ok(pass)
}

fn cmd_bands(common: &Common, rho: &Path, episode: &Path) -> Result<()> {
    let cfg = RunConfig::load(&common.config)?;
    let spec = cfg.grid()?;
    let rho = load_rho(rho)?;
    let (ep, scaling) = single_episode(&cfg, episode)?;
    let band = credible_band(
        &rho,
        &spec,
        &ep.u,
        cfg.band_level,
        cfg.band_nsamples,
        cfg.seed,
        cfg.quad_order,
    )?;
    let mut s = String::from("# popdiff-band v1\nt_hours,lower,mean,upper\n");
    for (j, t) in ep.times().iter().enumerate() {
        let k = scaling.tac;
        writeln!(
            s,
            "{t},{},{},{}",
            band.lower[j] * k,
            band.mean_output[j] * k,
            band.upper[j] * k
        )
        .unwrap();
    }
    write_atomic(&common.out.join(format!("{}_band.csv", ep.id)), &s)
}

fn cmd_consistency(common: &Common, rho: &Path) -> Result<()> {
    let cfg = RunConfig::load(&common.config)?;
    let rho = load_rho(rho)?;
    let settings = TrendSettings {
        spec: cfg.grid()?,
        horizon: cfg.horizon,
        n_episodes: cfg.synth_episodes,
        noise_sigma: cfg.noise_sigma,
        seeds: (0..cfg.trend_seeds as u64).map(|k| cfg.seed + k).collect(),
        pulse: cfg.pulse(),
        global_box: cfg.global_box(),
        norm: ErrorNorm::Mean,
        objective: cfg.objective(),
        optimizer: cfg.optimizer(),
        init: cfg.init_options(),
    };
    let report = consistency_trend(&rho, TrendAxis::Nu, &cfg.nu_levels, &settings)?;
    write_report(&report, &common.out, "consistency")?;
    println!("# {}", crate::experiments::REPORT_NOTE);
    println!("{:>6} {:>14}", "nu", "median error");
    for (l, e) in report.levels.iter().zip(&report.errors) {
        println!("{l:>6} {e:>14.6e}");
    }
    println!("nonincreasing: {}", report.monotone);
    Ok(())
}

fn exit_code(e: &PopdiffError) -> i32 {
    match e {
        PopdiffError::Config(_)
        | PopdiffError::Parse { .. }
        | PopdiffError::Ingestion(_)
        | PopdiffError::Io(_)
        | PopdiffError::Json(_) => 2,
        _ => 1,
    }
}

fn error_kind(e: &PopdiffError) -> &'static str {
    match e {
        PopdiffError::Domain(_) => "domain",
        PopdiffError::InvalidParameter(_) => "invalid-parameter",
        PopdiffError::DegenerateDensity(_) => "degenerate-density",
        PopdiffError::SingularOperator(_) => "singular-operator",
        PopdiffError::Conditioning(_) => "conditioning",
        PopdiffError::SimulationDivergence { .. } => "simulation-divergence",
        PopdiffError::Parse { .. } => "parse",
        PopdiffError::Ingestion(_) => "ingestion",
        PopdiffError::Config(_) => "config",
        PopdiffError::Episode { source, .. } => error_kind(source),
        PopdiffError::Io(_) => "io",
        PopdiffError::Json(_) => "json",
    }
}

fn configure_threads() {
    if let Some(n) = std::env::var("POPDIFF_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
    {
        if n > 0 {
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global();
        }
    }
}

/// Runs the CLI and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    configure_threads();
    let result = match &cli.command {
        Command::Fit { common, episodes } => cmd_fit(common, episodes).map(|_| true),
        Command::Simulate {
            common,
            rho,
            episode,
        } => cmd_simulate(common, rho, episode).map(|_| true),
        Command::Synth { common, rho } => cmd_synth(common, rho).map(|_| true),
        Command::Gradcheck {
            common,
            rho,
            episodes,
        } => cmd_gradcheck(common, rho, episodes),
        Command::Bands {
            common,
            rho,
            episode,
        } => cmd_bands(common, rho, episode).map(|_| true),
        Command::Consistency { common, rho } => cmd_consistency(common, rho).map(|_| true),
    };
    match result {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            let msg = json!({ "error": error_kind(&e), "message": e.to_string() });
            eprintln!("{msg}");
            exit_code(&e)
        }
    }
}
