//! Episode files, resampling onto the model grid, and synthetic data.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::assembly::assemble;
use crate::density::{RhoParams, TruncatedNormalSampler};
use crate::error::{PopdiffError, Result};
use crate::forward::{simulate, simulate_deterministic, Episode};
use crate::grid_basis::GridSpec;
use crate::sampled_system::build_sampled;

pub const EPISODE_HEADER: &str = "# popdiff-episode v1";
pub const EPISODE_COLUMNS: &str = "t_hours,channel,value";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    Brac,
    Tac,
}

/// Samples of one channel, times in hours.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Series {
    pub t: Vec<f64>,
    pub v: Vec<f64>,
}

impl Series {
    /// Linear interpolation; exact at sample times.
    pub fn at(&self, t: f64) -> f64 {
        let idx = self.t.partition_point(|&x| x <= t);
        if idx == 0 {
            return self.v[0];
        }
        let i = idx - 1;
        if self.t[i] == t || i + 1 == self.t.len() {
            return self.v[i];
        }
        let (t0, t1) = (self.t[i], self.t[i + 1]);
        self.v[i] + (self.v[i + 1] - self.v[i]) * (t - t0) / (t1 - t0)
    }

    fn max(&self) -> f64 {
        self.v.iter().copied().fold(0.0, f64::max)
    }
}

/// A parsed episode file before resampling.
#[derive(Debug, Clone, PartialEq)]
pub struct RawEpisode {
    pub id: String,
    pub brac: Series,
    pub tac: Series,
}

pub fn parse_episode(text: &str, id: &str) -> Result<RawEpisode> {
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, l)) if l.trim() == EPISODE_HEADER => {}
        Some((i, l)) if l.trim_start().starts_with("# popdiff-episode") => {
            return Err(PopdiffError::Parse {
                line: i + 1,
                message: format!("unsupported episode file version `{}`", l.trim()),
            })
        }
        other => {
            return Err(PopdiffError::Parse {
                line: other.map_or(1, |(i, _)| i + 1),
                message: format!("missing `{EPISODE_HEADER}` header"),
            })
        }
    }
    match lines.next() {
        Some((_, l)) if l.trim().replace(' ', "") == EPISODE_COLUMNS => {}
        Some((i, l)) => {
            return Err(PopdiffError::Parse {
                line: i + 1,
                message: format!("expected columns `{EPISODE_COLUMNS}`, found `{}`", l.trim()),
            })
        }
        None => {
            return Err(PopdiffError::Parse {
                line: 2,
                message: "missing column header".into(),
            })
        }
    }
    let mut raw = RawEpisode {
        id: id.to_string(),
        brac: Series::default(),
        tac: Series::default(),
    };
    for (i, line) in lines {
        let line_no = i + 1;
        if line.trim_start().starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(PopdiffError::Parse {
                line: line_no,
                message: format!("expected 3 fields, found {}", fields.len()),
            });
        }
        let num = |s: &str, what: &str| -> Result<f64> {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| PopdiffError::Parse {
                    line: line_no,
                    message: format!("invalid {what} `{s}`"),
                })
        };
        let t = num(fields[0], "time")?;
        let value = num(fields[2], "value")?;
        if value < 0.0 {
            return Err(PopdiffError::Parse {
                line: line_no,
                message: format!("negative value {value}"),
            });
        }
        let series = match fields[1] {
            "brac" => &mut raw.brac,
            "tac" => &mut raw.tac,
            other => {
                return Err(PopdiffError::Parse {
                    line: line_no,
                    message: format!("unknown channel `{other}`"),
                })
            }
        };
        if series.t.last().is_some_and(|&last| t < last) {
            return Err(PopdiffError::Parse {
                line: line_no,
                message: format!("time {t} decreases within channel {}", fields[1]),
            });
        }
        series.t.push(t);
        series.v.push(value);
    }
    for (name, s) in [("brac", &raw.brac), ("tac", &raw.tac)] {
        if s.t.len() < 2 {
            return Err(PopdiffError::Ingestion(format!(
                "episode `{id}`: channel {name} needs at least 2 rows, found {}",
                s.t.len()
            )));
        }
    }
    Ok(raw)
}

/// Reference levels each channel is divided by before fitting.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Scaling {
    pub brac: f64,
    pub tac: f64,
}

impl Scaling {
    pub fn identity() -> Self {
        Scaling {
            brac: 1.0,
            tac: 1.0,
        }
    }

    /// Dataset maxima per channel, with optional overrides.
    pub fn from_data(
        raw: &[RawEpisode],
        brac_ref: Option<f64>,
        tac_ref: Option<f64>,
    ) -> Result<Self> {
        let brac = brac_ref.unwrap_or_else(|| raw.iter().map(|r| r.brac.max()).fold(0.0, f64::max));
        let tac = tac_ref.unwrap_or_else(|| raw.iter().map(|r| r.tac.max()).fold(0.0, f64::max));
        if !(brac > 0.0 && tac > 0.0) {
            return Err(PopdiffError::Ingestion(format!(
                "reference levels must be positive, got brac {brac} tac {tac}"
            )));
        }
        Ok(Scaling { brac, tac })
    }
}

/// Resamples both channels onto `{t0, t0+τ, …}` over their common time range,
/// zero-order hold for BrAC, and rescales.
pub fn resample(raw: &RawEpisode, tau: f64, scaling: Scaling) -> Result<Episode> {
    let t0 = raw.brac.t[0].max(raw.tac.t[0]);
    let t_end = raw
        .brac
        .t
        .last()
        .copied()
        .unwrap()
        .min(raw.tac.t.last().copied().unwrap());
    if !(t_end > t0) {
        return Err(PopdiffError::Ingestion(format!(
            "episode `{}`: BrAC and TAC time ranges do not overlap",
            raw.id
        )));
    }
    let steps = ((t_end - t0) / tau + 1e-9).floor() as usize;
    if steps < 1 {
        return Err(PopdiffError::Ingestion(format!(
            "episode `{}`: common time range is shorter than one sampling interval",
            raw.id
        )));
    }
    let grid: Vec<f64> = (0..=steps).map(|j| t0 + j as f64 * tau).collect();
    let u = grid[..steps]
        .iter()
        .map(|&t| raw.brac.at(t) / scaling.brac)
        .collect();
    let y = grid.iter().map(|&t| raw.tac.at(t) / scaling.tac).collect();
    Episode::new(raw.id.clone(), tau, u, y)
}

/// `read_to_string` with the path in the error message.
pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path)
        .map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())).into())
}

pub fn load_raw(path: &Path) -> Result<RawEpisode> {
    let text = read_text(path)?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "episode".into());
    parse_episode(&text, &id)
}

/// Reads and resamples one episode file without rescaling.
pub fn load_episode(path: &Path, tau: f64) -> Result<Episode> {
    resample(&load_raw(path)?, tau, Scaling::identity())
}

/// Episode file text on the model grid. BrAC is written at every grid time,
/// holding the last input over the final interval, so that reading the file
/// back reproduces the grid values exactly.
pub fn write_episode(ep: &Episode) -> String {
    let mut out = String::new();
    writeln!(out, "{EPISODE_HEADER}").unwrap();
    writeln!(out, "{EPISODE_COLUMNS}").unwrap();
    let times = ep.times();
    for (j, t) in times.iter().enumerate() {
        let u = ep.u[j.min(ep.u.len() - 1)];
        writeln!(out, "{t},brac,{u}").unwrap();
    }
    for (t, y) in times.iter().zip(&ep.y_obs) {
        writeln!(out, "{t},tac,{y}").unwrap();
    }
    out
}

/// Writes through a temporary file in the same directory and renames it.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(contents.as_bytes())?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Randomized BrAC pulse trains. Each pulse rises linearly over a third of
/// its width and decays linearly over the rest.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PulseSpec {
    pub count_min: usize,
    pub count_max: usize,
    pub height_min: f64,
    pub height_max: f64,
    /// Pulse widths, hours.
    pub width_min: f64,
    pub width_max: f64,
    /// Pulses start within the first `start_frac` of the horizon.
    pub start_frac: f64,
}

impl Default for PulseSpec {
    fn default() -> Self {
        PulseSpec {
            count_min: 1,
            count_max: 2,
            height_min: 0.5,
            height_max: 1.0,
            width_min: 1.5,
            width_max: 3.0,
            start_frac: 0.4,
        }
    }
}

impl PulseSpec {
    pub fn draw(&self, rng: &mut impl Rng, steps: usize, tau: f64) -> Vec<f64> {
        let horizon = steps as f64 * tau;
        let count = rng.random_range(self.count_min..=self.count_max.max(self.count_min));
        let pulses: Vec<(f64, f64, f64)> = (0..count)
            .map(|_| {
                let start = rng.random::<f64>() * self.start_frac * horizon;
                let width =
                    self.width_min + rng.random::<f64>() * (self.width_max - self.width_min);
                let height =
                    self.height_min + rng.random::<f64>() * (self.height_max - self.height_min);
                (start, width, height)
            })
            .collect();
        (0..steps)
            .map(|j| {
                let t = j as f64 * tau;
                pulses
                    .iter()
                    .map(|&(s, w, h)| {
                        let rise = w / 3.0;
                        let x = t - s;
                        if x <= 0.0 || x >= w {
                            0.0
                        } else if x < rise {
                            h * x / rise
                        } else {
                            h * (w - x) / (w - rise)
                        }
                    })
                    .sum()
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthMode {
    /// One realization of q per episode, simulated with the single-q model.
    Episode,
    /// Population-expected output for every episode.
    Population,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthOptions {
    pub n_episodes: usize,
    /// Transitions per episode.
    pub steps: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    pub mode: SynthMode,
    pub pulse: PulseSpec,
    /// Clip noisy observations at zero (sensors do not read negative).
    pub clamp_nonnegative: bool,
    pub quad_order: usize,
}

/// Synthetic episodes drawn from the law `rho0` on the grid `spec`:
/// observations are model outputs plus i.i.d. `N(0, σ²)` noise.
pub fn generate_synthetic(
    rho0: &RhoParams,
    spec: &GridSpec,
    opts: &SynthOptions,
) -> Result<Vec<Episode>> {
    rho0.validate()?;
    spec.validate()?;
    if !(opts.noise_sigma >= 0.0) {
        return Err(PopdiffError::Domain(format!(
            "noise level must be nonnegative, got {}",
            opts.noise_sigma
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut q_sampler =
        TruncatedNormalSampler::new(rho0, opts.seed.wrapping_add(0x9E37_79B9_7F4A_7C15))?;
    let noise = Normal::new(0.0, opts.noise_sigma.max(0.0)).expect("finite noise level");
    let population = match opts.mode {
        SynthMode::Population => Some(build_sampled(
            &assemble(spec, rho0, opts.quad_order)?,
            spec.tau,
        )?),
        SynthMode::Episode => None,
    };
    let width = (opts.n_episodes.max(1) as f64).log10().floor() as usize + 1;
    (0..opts.n_episodes)
        .map(|i| {
            let u = opts.pulse.draw(&mut rng, opts.steps, spec.tau);
            let clean = match &population {
                Some(sys) => simulate(sys, &u)?.outputs,
                None => simulate_deterministic(q_sampler.draw()?, spec.n, spec.tau, &u)?,
            };
            let y = clean
                .iter()
                .map(|v| {
                    let noisy = if opts.noise_sigma > 0.0 {
                        v + noise.sample(&mut rng)
                    } else {
                        *v
                    };
                    if opts.clamp_nonnegative {
                        noisy.max(0.0)
                    } else {
                        noisy
                    }
                })
                .collect();
            Episode::new(format!("synth{:0width$}", i + 1), spec.tau, u, y)
        })
        .collect()
}
