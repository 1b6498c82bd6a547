//! Run configuration: a flat TOML table with every key optional.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{PulseSpec, SynthMode, SynthOptions};
use crate::error::{PopdiffError, Result};
use crate::grid_basis::{GridSpec, QBox};
use crate::objective::ObjectiveOptions;
use crate::optimizer::{InitOptions, OptimizerOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitMode {
    /// Per-episode deterministic fits summarized into a starting law.
    Moments,
    /// Start from the law in `init_rho`.
    Explicit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScalingMode {
    None,
    /// Divide each channel by a reference level.
    Paper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    // grid
    pub n: usize,
    pub m1: usize,
    pub m2: usize,
    /// Hours.
    pub tau: f64,
    pub quad_order: usize,
    pub enforce_gamma_floor: bool,

    // optimizer
    pub gtol: f64,
    pub xtol: f64,
    pub max_iter: usize,
    pub max_backtracks: usize,
    pub armijo: f64,
    pub initial_step: f64,

    // initialization and admissible region
    pub init: InitMode,
    pub init_rho: Option<PathBuf>,
    pub init_q1: f64,
    pub init_q2: f64,
    pub box_a1: f64,
    pub box_b1: f64,
    pub box_a2: f64,
    pub box_b2: f64,

    // data
    pub scaling: ScalingMode,
    pub brac_ref: Option<f64>,
    pub tac_ref: Option<f64>,

    // bands
    pub band_level: f64,
    pub band_nsamples: usize,

    pub seed: u64,

    // synthetic data
    pub synth_episodes: usize,
    pub synth_steps: usize,
    pub synth_mode: SynthMode,
    pub noise_sigma: f64,
    pub clamp_nonnegative: bool,
    pub pulse_count_min: usize,
    pub pulse_count_max: usize,
    pub pulse_height_min: f64,
    pub pulse_height_max: f64,
    pub pulse_width_min: f64,
    pub pulse_width_max: f64,
    pub pulse_start_frac: f64,

    // consistency experiment
    pub nu_levels: Vec<usize>,
    pub trend_seeds: usize,
    /// Episode length in hours, held fixed across levels.
    pub horizon: f64,
    /// Relative perturbation of the truth used as the fit starting point.
    pub start_offset: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let opt = OptimizerOptions::default();
        let pulse = PulseSpec::default();
        RunConfig {
            n: 8,
            m1: 4,
            m2: 4,
            tau: 1.0 / 12.0,
            quad_order: 8,
            enforce_gamma_floor: true,
            gtol: opt.gtol,
            xtol: opt.xtol,
            max_iter: opt.max_iter,
            max_backtracks: opt.max_backtracks,
            armijo: opt.armijo,
            initial_step: opt.initial_step,
            init: InitMode::Moments,
            init_rho: None,
            init_q1: 0.5,
            init_q2: 1.0,
            box_a1: 1e-3,
            box_b1: 5.0,
            box_a2: 0.0,
            box_b2: 5.0,
            scaling: ScalingMode::None,
            brac_ref: None,
            tac_ref: None,
            band_level: 0.75,
            band_nsamples: 2000,
            seed: 1,
            synth_episodes: 10,
            synth_steps: 120,
            synth_mode: SynthMode::Population,
            noise_sigma: 0.01,
            clamp_nonnegative: true,
            pulse_count_min: pulse.count_min,
            pulse_count_max: pulse.count_max,
            pulse_height_min: pulse.height_min,
            pulse_height_max: pulse.height_max,
            pulse_width_min: pulse.width_min,
            pulse_width_max: pulse.width_max,
            pulse_start_frac: pulse.start_frac,
            nu_levels: vec![2, 8, 32],
            trend_seeds: 5,
            horizon: 6.0,
            start_offset: 0.2,
        }
    }
}

fn check(ok: bool, what: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(PopdiffError::Config(what.to_string()))
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| PopdiffError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; a relative `init_rho` resolves against the
    /// config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = crate::data::read_text(path)?;
        let mut cfg = Self::from_toml_str(&text)?;
        if let (Some(p), Some(dir)) = (&cfg.init_rho, path.parent()) {
            if p.is_relative() {
                cfg.init_rho = Some(dir.join(p));
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        check(self.n >= 1 && self.n <= 512, "n must be in 1..=512")?;
        check(self.m1 >= 1 && self.m1 <= 256, "m1 must be in 1..=256")?;
        check(self.m2 >= 1 && self.m2 <= 256, "m2 must be in 1..=256")?;
        check(
            self.tau > 0.0 && self.tau.is_finite(),
            "tau must be positive",
        )?;
        check(
            self.quad_order >= 1 && self.quad_order <= 64,
            "quad_order must be in 1..=64",
        )?;
        check(self.gtol > 0.0, "gtol must be positive")?;
        check(self.xtol >= 0.0, "xtol must be nonnegative")?;
        check(self.max_iter >= 1, "max_iter must be at least 1")?;
        check(
            self.max_backtracks >= 1,
            "max_backtracks must be at least 1",
        )?;
        check(
            self.armijo > 0.0 && self.armijo < 0.5,
            "armijo must be in (0, 0.5)",
        )?;
        check(self.initial_step > 0.0, "initial_step must be positive")?;
        check(
            self.init != InitMode::Explicit || self.init_rho.is_some(),
            "init = \"explicit\" requires init_rho",
        )?;
        check(
            self.init_q1 > 0.0 && self.init_q2 >= 0.0,
            "init_q1 must be positive and init_q2 nonnegative",
        )?;
        self.global_box()
            .validate()
            .map_err(|e| PopdiffError::Config(format!("global box: {e}")))?;
        for r in [self.brac_ref, self.tac_ref].into_iter().flatten() {
            check(
                r > 0.0 && r.is_finite(),
                "reference levels must be positive",
            )?;
        }
        check(
            self.band_level > 0.0 && self.band_level < 1.0,
            "band_level must be in (0, 1)",
        )?;
        check(
            self.band_nsamples >= 100,
            "band_nsamples must be at least 100",
        )?;
        check(self.synth_steps >= 1, "synth_steps must be at least 1")?;
        check(
            self.noise_sigma >= 0.0 && self.noise_sigma.is_finite(),
            "noise_sigma must be nonnegative",
        )?;
        check(
            self.pulse_count_min <= self.pulse_count_max
                && self.pulse_height_min >= 0.0
                && self.pulse_height_min <= self.pulse_height_max
                && self.pulse_width_min > 0.0
                && self.pulse_width_min <= self.pulse_width_max
                && (0.0..=1.0).contains(&self.pulse_start_frac),
            "pulse ranges must be ordered and nonnegative",
        )?;
        check(
            self.nu_levels.windows(2).all(|w| w[0] < w[1]),
            "nu_levels must be strictly increasing",
        )?;
        check(
            self.nu_levels.first().is_none_or(|&v| v >= 1),
            "nu_levels must be positive",
        )?;
        check(self.horizon > 0.0, "horizon must be positive")?;
        check(
            self.start_offset >= 0.0 && self.start_offset < 1.0,
            "start_offset must be in [0, 1)",
        )?;
        Ok(())
    }

    pub fn grid(&self) -> Result<GridSpec> {
        GridSpec::new(self.n, self.m1, self.m2, self.tau)
    }

    pub fn global_box(&self) -> QBox {
        QBox::new(self.box_a1, self.box_b1, self.box_a2, self.box_b2)
    }

    pub fn optimizer(&self) -> OptimizerOptions {
        OptimizerOptions {
            gtol: self.gtol,
            xtol: self.xtol,
            max_iter: self.max_iter,
            max_backtracks: self.max_backtracks,
            armijo: self.armijo,
            initial_step: self.initial_step,
        }
    }

    pub fn objective(&self) -> ObjectiveOptions {
        ObjectiveOptions {
            quad_order: self.quad_order,
            enforce_gamma_floor: self.enforce_gamma_floor,
        }
    }

    pub fn init_options(&self) -> InitOptions {
        InitOptions {
            q_start: (self.init_q1, self.init_q2),
            ..InitOptions::default()
        }
    }

    pub fn pulse(&self) -> PulseSpec {
        PulseSpec {
            count_min: self.pulse_count_min,
            count_max: self.pulse_count_max,
            height_min: self.pulse_height_min,
            height_max: self.pulse_height_max,
            width_min: self.pulse_width_min,
            width_max: self.pulse_width_max,
            start_frac: self.pulse_start_frac,
        }
    }

    pub fn synth(&self) -> SynthOptions {
        SynthOptions {
            n_episodes: self.synth_episodes,
            steps: self.synth_steps,
            noise_sigma: self.noise_sigma,
            seed: self.seed,
            mode: self.synth_mode,
            pulse: self.pulse(),
            clamp_nonnegative: self.clamp_nonnegative,
            quad_order: self.quad_order,
        }
    }
}
