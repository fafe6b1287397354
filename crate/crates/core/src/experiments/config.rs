//! Flat `section.key = value` experiment configuration.
//!
//! Every key has a default; a config file only overrides what it names.
//! Lines starting with `#` (or blank lines) are ignored. Unknown keys are
//! rejected so typos cannot silently fall back to defaults.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::deepkernel::OptimizerKind;
use crate::error::{Error, Result};
use crate::imaging::{FrameSchedule, TimeActivityModel};
use crate::projector::ScannerGeometry2D;
use crate::recon::{window_frame_ranges, ReconSettings};

use super::Method;

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomConfig {
    pub width: usize,
    pub height: usize,
    pub pixel_size_mm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeometryConfig {
    pub n_angles: usize,
    /// Defaults to 1.5x the image width when absent.
    pub n_bins: Option<usize>,
    /// Defaults to the image pixel size when absent.
    pub bin_spacing_mm: Option<f64>,
}

impl GeometryConfig {
    pub fn resolve(&self, phantom: &PhantomConfig) -> Result<ScannerGeometry2D> {
        let n_bins = self.n_bins.unwrap_or((3 * phantom.width).div_ceil(2));
        let spacing = self.bin_spacing_mm.unwrap_or(phantom.pixel_size_mm);
        ScannerGeometry2D::new(self.n_angles, n_bins, spacing)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    /// Expected total detected events over the whole scan, background
    /// included.
    pub total_counts: f64,
    pub background_fraction: f64,
    /// Uniform attenuation coefficient (1/mm) applied over the head mask;
    /// 0 disables attenuation.
    pub attenuation_mu_per_mm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelConfig {
    pub k: usize,
    pub sigma: f64,
    /// Odd side length of the spatial kNN search window, in pixels.
    pub window: usize,
    pub standardize: bool,
    /// Rebuild the kNN pattern once from trained features before the final
    /// deep-kernel assembly.
    pub rebuild_graph_after_training: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorruptedRecon {
    /// Training pairs reconstructed with plain EM (identity kernel).
    Mlem,
    /// Training pairs reconstructed with the empirical kernel.
    Kem,
}

impl FromStr for CorruptedRecon {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlem" => Ok(CorruptedRecon::Mlem),
            "kem" => Ok(CorruptedRecon::Kem),
            other => Err(Error::Config(format!("unknown corrupted_recon '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Count reduction factor for the corrupted images.
    pub d: f64,
    pub learning_rate: f64,
    pub n_iterations: usize,
    pub optimizer: OptimizerKind,
    pub corrupted_recon: CorruptedRecon,
    /// Hidden channel count of the feature network.
    pub hidden_channels: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum AttentionPixels {
    /// Tumor center plus a gray matter pixel, picked from the phantom.
    Auto,
    List(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub phantom: PhantomConfig,
    pub tac: TimeActivityModel,
    pub geometry: GeometryConfig,
    pub schedule_durations: Vec<f64>,
    pub sim: SimConfig,
    /// Base seed; per-stage streams are derived from it.
    pub seed: u64,
    pub composite_windows: Vec<(f64, f64)>,
    pub kernel: KernelConfig,
    pub train: TrainConfig,
    pub recon: ReconSettings,
    pub methods: Vec<Method>,
    pub output_dir: PathBuf,
    pub attention_pixels: AttentionPixels,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            phantom: PhantomConfig {
                width: 128,
                height: 128,
                pixel_size_mm: 2.0,
            },
            tac: TimeActivityModel::default(),
            geometry: GeometryConfig {
                n_angles: 180,
                n_bins: None,
                bin_spacing_mm: None,
            },
            schedule_durations: FrameSchedule::one_hour_24frames()
                .frames()
                .iter()
                .map(|&(t0, t1)| t1 - t0)
                .collect(),
            sim: SimConfig {
                total_counts: 8e6,
                background_fraction: 0.2,
                attenuation_mu_per_mm: 0.0,
            },
            seed: 42,
            composite_windows: vec![(0.0, 1200.0), (1200.0, 2400.0), (2400.0, 3600.0)],
            kernel: KernelConfig {
                k: 50,
                sigma: 1.0,
                window: 21,
                standardize: true,
                rebuild_graph_after_training: false,
            },
            train: TrainConfig {
                d: 10.0,
                learning_rate: 1e-2,
                n_iterations: 500,
                optimizer: OptimizerKind::Adam,
                corrupted_recon: CorruptedRecon::Mlem,
                hidden_channels: 8,
            },
            recon: ReconSettings::default(),
            methods: vec![Method::Mlem, Method::Kem, Method::DeepKem],
            output_dir: PathBuf::from("out"),
            attention_pixels: AttentionPixels::Auto,
        }
    }
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_text(&text)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected 'key = value'", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            cfg.apply(key, value)
                .map_err(|e| Error::Config(format!("line {} ({key}): {e}", lineno + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "phantom.width" => self.phantom.width = parse(value)?,
            "phantom.height" => self.phantom.height = parse(value)?,
            "phantom.pixel_size_mm" => self.phantom.pixel_size_mm = parse(value)?,

            "tac.blood.amplitude" => self.tac.blood.amplitude = parse(value)?,
            "tac.blood.tau_slow" => self.tac.blood.tau_slow_s = parse(value)?,
            "tac.blood.tau_fast" => self.tac.blood.tau_fast_s = parse(value)?,
            "tac.tumor.amplitude" => self.tac.tumor.amplitude = parse(value)?,
            "tac.tumor.tau" => self.tac.tumor.tau_s = parse(value)?,
            "tac.gray.amplitude" => self.tac.gray_matter.amplitude = parse(value)?,
            "tac.gray.tau" => self.tac.gray_matter.tau_s = parse(value)?,
            "tac.white.amplitude" => self.tac.white_matter.amplitude = parse(value)?,
            "tac.white.tau" => self.tac.white_matter.tau_s = parse(value)?,
            "tac.t_max" => self.tac.t_max_s = parse(value)?,

            "geometry.n_angles" => self.geometry.n_angles = parse(value)?,
            "geometry.n_bins" => self.geometry.n_bins = Some(parse(value)?),
            "geometry.bin_spacing_mm" => self.geometry.bin_spacing_mm = Some(parse(value)?),

            "schedule.frames" => self.schedule_durations = parse_durations(value)?,

            "sim.total_counts" => self.sim.total_counts = parse(value)?,
            "sim.background_fraction" => self.sim.background_fraction = parse(value)?,
            "sim.attenuation_mu" => self.sim.attenuation_mu_per_mm = parse(value)?,

            "seed" => self.seed = parse(value)?,

            "composite.windows" => self.composite_windows = parse_windows(value)?,

            "kernel.k" => self.kernel.k = parse(value)?,
            "kernel.sigma" => self.kernel.sigma = parse(value)?,
            "kernel.window" => self.kernel.window = parse(value)?,
            "kernel.standardize" => self.kernel.standardize = parse_bool(value)?,
            "kernel.rebuild_graph_after_training" => {
                self.kernel.rebuild_graph_after_training = parse_bool(value)?
            }

            "train.d" => self.train.d = parse(value)?,
            "train.learning_rate" => self.train.learning_rate = parse(value)?,
            "train.iterations" => self.train.n_iterations = parse(value)?,
            "train.optimizer" => self.train.optimizer = value.parse()?,
            "train.corrupted_recon" => self.train.corrupted_recon = value.parse()?,
            "train.hidden_channels" => self.train.hidden_channels = parse(value)?,

            "recon.iterations" => self.recon.n_iterations = parse(value)?,
            "recon.epsilon" => self.recon.epsilon = parse(value)?,
            "recon.record_every" => self.recon.record_every = parse(value)?,

            "methods" => {
                self.methods = value
                    .split(',')
                    .map(|m| m.trim().parse())
                    .collect::<Result<_>>()?
            }

            "output.dir" => self.output_dir = PathBuf::from(value),

            "attention.pixels" => {
                self.attention_pixels = if value == "auto" {
                    AttentionPixels::Auto
                } else {
                    AttentionPixels::List(
                        value
                            .split(',')
                            .map(|v| {
                                v.trim().parse::<usize>().map_err(|e| {
                                    Error::Config(format!("bad pixel index '{v}': {e}"))
                                })
                            })
                            .collect::<Result<_>>()?,
                    )
                }
            }

            other => return Err(Error::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.phantom.width < 32 || self.phantom.height < 32 {
            return Err(Error::Config(format!(
                "phantom dims {}x{} below the 32-pixel minimum",
                self.phantom.width, self.phantom.height
            )));
        }
        if !(self.phantom.pixel_size_mm.is_finite() && self.phantom.pixel_size_mm > 0.0) {
            return Err(Error::Config("phantom.pixel_size_mm must be > 0".to_string()));
        }
        self.tac.validate()?;
        let schedule = self.schedule()?;
        if schedule.end() > self.tac.t_max_s {
            return Err(Error::Config(format!(
                "schedule ends at {} s, beyond tac.t_max = {} s",
                schedule.end(),
                self.tac.t_max_s
            )));
        }
        self.geometry.resolve(&self.phantom)?;
        if !(self.sim.total_counts.is_finite() && self.sim.total_counts > 0.0) {
            return Err(Error::Config("sim.total_counts must be > 0".to_string()));
        }
        if !(0.0..1.0).contains(&self.sim.background_fraction) {
            return Err(Error::Config(
                "sim.background_fraction must lie in [0, 1)".to_string(),
            ));
        }
        if self.sim.attenuation_mu_per_mm < 0.0 {
            return Err(Error::Config("sim.attenuation_mu must be >= 0".to_string()));
        }
        window_frame_ranges(&schedule, &self.composite_windows)?;
        if self.kernel.k == 0 {
            return Err(Error::Config("kernel.k must be >= 1".to_string()));
        }
        if self.kernel.window % 2 == 0 {
            return Err(Error::Config("kernel.window must be odd".to_string()));
        }
        if !(self.kernel.sigma.is_finite() && self.kernel.sigma > 0.0) {
            return Err(Error::Config("kernel.sigma must be > 0".to_string()));
        }
        if !(self.train.d.is_finite() && self.train.d > 1.0) {
            return Err(Error::Config("train.d must be > 1".to_string()));
        }
        if !(self.train.learning_rate.is_finite() && self.train.learning_rate >= 0.0) {
            return Err(Error::Config("train.learning_rate must be >= 0".to_string()));
        }
        if self.train.n_iterations == 0 {
            return Err(Error::Config("train.iterations must be >= 1".to_string()));
        }
        if self.train.hidden_channels == 0 {
            return Err(Error::Config("train.hidden_channels must be >= 1".to_string()));
        }
        self.recon.validate()?;
        if self.methods.is_empty() {
            return Err(Error::Config("methods must not be empty".to_string()));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<FrameSchedule> {
        FrameSchedule::from_durations(&self.schedule_durations)
    }

    /// Render the fully resolved configuration back to the flat text
    /// format (written into the output directory for provenance).
    pub fn to_text(&self) -> String {
        let durations = self
            .schedule_durations
            .iter()
            .map(|d| format!("{d}"))
            .collect::<Vec<_>>()
            .join(",");
        let windows = self
            .composite_windows
            .iter()
            .map(|(a, b)| format!("{a}-{b}"))
            .collect::<Vec<_>>()
            .join(",");
        let methods = self
            .methods
            .iter()
            .map(|m| m.to_string())
            .collect::<Vec<_>>()
            .join(",");
        let attention = match &self.attention_pixels {
            AttentionPixels::Auto => "auto".to_string(),
            AttentionPixels::List(v) => v
                .iter()
                .map(|p| p.to_string())
                .collect::<Vec<_>>()
                .join(","),
        };
        let optimizer = match self.train.optimizer {
            OptimizerKind::Adam => "adam",
            OptimizerKind::GradientDescent => "gd",
        };
        let corrupted = match self.train.corrupted_recon {
            CorruptedRecon::Mlem => "mlem",
            CorruptedRecon::Kem => "kem",
        };
        let mut s = String::new();
        let mut push = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        push("phantom.width", self.phantom.width.to_string());
        push("phantom.height", self.phantom.height.to_string());
        push("phantom.pixel_size_mm", self.phantom.pixel_size_mm.to_string());
        push("tac.blood.amplitude", self.tac.blood.amplitude.to_string());
        push("tac.blood.tau_slow", self.tac.blood.tau_slow_s.to_string());
        push("tac.blood.tau_fast", self.tac.blood.tau_fast_s.to_string());
        push("tac.tumor.amplitude", self.tac.tumor.amplitude.to_string());
        push("tac.tumor.tau", self.tac.tumor.tau_s.to_string());
        push("tac.gray.amplitude", self.tac.gray_matter.amplitude.to_string());
        push("tac.gray.tau", self.tac.gray_matter.tau_s.to_string());
        push("tac.white.amplitude", self.tac.white_matter.amplitude.to_string());
        push("tac.white.tau", self.tac.white_matter.tau_s.to_string());
        push("tac.t_max", self.tac.t_max_s.to_string());
        push("geometry.n_angles", self.geometry.n_angles.to_string());
        if let Some(b) = self.geometry.n_bins {
            push("geometry.n_bins", b.to_string());
        }
        if let Some(sp) = self.geometry.bin_spacing_mm {
            push("geometry.bin_spacing_mm", sp.to_string());
        }
        push("schedule.frames", durations);
        push("sim.total_counts", self.sim.total_counts.to_string());
        push(
            "sim.background_fraction",
            self.sim.background_fraction.to_string(),
        );
        push("sim.attenuation_mu", self.sim.attenuation_mu_per_mm.to_string());
        push("seed", self.seed.to_string());
        push("composite.windows", windows);
        push("kernel.k", self.kernel.k.to_string());
        push("kernel.sigma", self.kernel.sigma.to_string());
        push("kernel.window", self.kernel.window.to_string());
        push("kernel.standardize", self.kernel.standardize.to_string());
        push(
            "kernel.rebuild_graph_after_training",
            self.kernel.rebuild_graph_after_training.to_string(),
        );
        push("train.d", self.train.d.to_string());
        push("train.learning_rate", self.train.learning_rate.to_string());
        push("train.iterations", self.train.n_iterations.to_string());
        push("train.optimizer", optimizer.to_string());
        push("train.corrupted_recon", corrupted.to_string());
        push("train.hidden_channels", self.train.hidden_channels.to_string());
        push("recon.iterations", self.recon.n_iterations.to_string());
        push("recon.epsilon", self.recon.epsilon.to_string());
        push("recon.record_every", self.recon.record_every.to_string());
        push("methods", methods);
        push("output.dir", self.output_dir.display().to_string());
        push("attention.pixels", attention);
        s
    }
}

fn parse<T: FromStr>(value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("bad value '{value}': {e}")))
}

fn parse_bool(value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        other => Err(Error::Config(format!("bad boolean '{other}'"))),
    }
}

/// `4x20,4x40,2x60` or plain comma-separated durations in seconds.
fn parse_durations(value: &str) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for part in value.split(',') {
        let part = part.trim();
        if let Some((count, dur)) = part.split_once('x') {
            let n: usize = parse(count.trim())?;
            let d: f64 = parse(dur.trim())?;
            out.extend(std::iter::repeat(d).take(n));
        } else {
            out.push(parse(part)?);
        }
    }
    if out.is_empty() {
        return Err(Error::Config("empty schedule".to_string()));
    }
    Ok(out)
}

/// `0-1200,1200-2400` window spans in seconds.
fn parse_windows(value: &str) -> Result<Vec<(f64, f64)>> {
    value
        .split(',')
        .map(|part| {
            let part = part.trim();
            let (a, b) = part
                .split_once('-')
                .ok_or_else(|| Error::Config(format!("bad window '{part}'")))?;
            Ok((parse(a.trim())?, parse(b.trim())?))
        })
        .collect()
}
