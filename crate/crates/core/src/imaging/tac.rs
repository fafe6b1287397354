//! Time-activity curves and frame integration.

use crate::error::{Error, Result};
use crate::image::Image2D;
use crate::imaging::{Region, RegionMap};
use crate::par;

/// Default quadrature step for frame integration, in seconds.
pub const DEFAULT_QUADRATURE_STEP_S: f64 = 1.0;

/// Bi-exponential bolus: `A * (exp(-t/tau_slow) - exp(-t/tau_fast))`.
///
/// Zero at t = 0, rises on the fast time constant and decays on the slow
/// one; with the defaults the peak sits near t = 35 s.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BloodCurve {
    pub amplitude: f64,
    pub tau_slow_s: f64,
    pub tau_fast_s: f64,
}

/// Saturating uptake: `A * (1 - exp(-t/tau))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TissueCurve {
    pub amplitude: f64,
    pub tau_s: f64,
}

/// Parametric activity curves for every phantom region.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeActivityModel {
    pub blood: BloodCurve,
    pub gray_matter: TissueCurve,
    pub white_matter: TissueCurve,
    pub tumor: TissueCurve,
    /// Scan end; `eval` rejects times outside [0, t_max].
    pub t_max_s: f64,
}

impl Default for TimeActivityModel {
    fn default() -> Self {
        TimeActivityModel {
            blood: BloodCurve {
                amplitude: 6.0,
                tau_slow_s: 300.0,
                tau_fast_s: 10.0,
            },
            tumor: TissueCurve {
                amplitude: 4.0,
                tau_s: 600.0,
            },
            gray_matter: TissueCurve {
                amplitude: 3.0,
                tau_s: 400.0,
            },
            white_matter: TissueCurve {
                amplitude: 1.0,
                tau_s: 500.0,
            },
            t_max_s: 3600.0,
        }
    }
}

impl TimeActivityModel {
    pub fn validate(&self) -> Result<()> {
        let params = [
            ("blood.amplitude", self.blood.amplitude),
            ("blood.tau_slow", self.blood.tau_slow_s),
            ("blood.tau_fast", self.blood.tau_fast_s),
            ("tumor.amplitude", self.tumor.amplitude),
            ("tumor.tau", self.tumor.tau_s),
            ("gray.amplitude", self.gray_matter.amplitude),
            ("gray.tau", self.gray_matter.tau_s),
            ("white.amplitude", self.white_matter.amplitude),
            ("white.tau", self.white_matter.tau_s),
            ("t_max", self.t_max_s),
        ];
        for (name, v) in params {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidParameter {
                    name: "tac",
                    reason: format!("{name} = {v} must be finite and >= 0"),
                });
            }
        }
        if self.blood.tau_fast_s >= self.blood.tau_slow_s {
            return Err(Error::InvalidParameter {
                name: "tac",
                reason: format!(
                    "blood tau_fast {} must be below tau_slow {}",
                    self.blood.tau_fast_s, self.blood.tau_slow_s
                ),
            });
        }
        Ok(())
    }

    /// Activity of `region` at time `t` seconds after injection.
    pub fn eval(&self, region: Region, t: f64) -> Result<f64> {
        if !(t.is_finite() && (0.0..=self.t_max_s).contains(&t)) {
            return Err(Error::InvalidParameter {
                name: "t",
                reason: format!("{t} outside [0, {}]", self.t_max_s),
            });
        }
        Ok(self.eval_unchecked(region, t))
    }

    fn eval_unchecked(&self, region: Region, t: f64) -> f64 {
        match region {
            Region::Background => 0.0,
            Region::Blood => {
                let b = &self.blood;
                b.amplitude * ((-t / b.tau_slow_s).exp() - (-t / b.tau_fast_s).exp()).max(0.0)
            }
            Region::GrayMatter => tissue(&self.gray_matter, t),
            Region::WhiteMatter => tissue(&self.white_matter, t),
            Region::Tumor => tissue(&self.tumor, t),
        }
    }
}

fn tissue(c: &TissueCurve, t: f64) -> f64 {
    c.amplitude * (1.0 - (-t / c.tau_s).exp())
}

/// Contiguous, strictly increasing frame intervals in seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSchedule {
    frames: Vec<(f64, f64)>,
}

impl FrameSchedule {
    pub fn new(frames: Vec<(f64, f64)>) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::InvalidParameter {
                name: "schedule",
                reason: "at least one frame required".to_string(),
            });
        }
        for (i, &(t0, t1)) in frames.iter().enumerate() {
            if !(t0.is_finite() && t1.is_finite() && t1 > t0) {
                return Err(Error::InvalidParameter {
                    name: "schedule",
                    reason: format!("frame {i}: ({t0}, {t1}) must satisfy t_end > t_start"),
                });
            }
            if i > 0 && frames[i - 1].1 != t0 {
                return Err(Error::InvalidParameter {
                    name: "schedule",
                    reason: format!(
                        "frame {i} starts at {t0} but frame {} ends at {}",
                        i - 1,
                        frames[i - 1].1
                    ),
                });
            }
        }
        Ok(FrameSchedule { frames })
    }

    /// Build a schedule from consecutive frame durations, starting at t = 0.
    pub fn from_durations(durations: &[f64]) -> Result<Self> {
        let mut frames = Vec::with_capacity(durations.len());
        let mut t = 0.0;
        for &d in durations {
            frames.push((t, t + d));
            t += d;
        }
        Self::new(frames)
    }

    /// The 24-frame one-hour schedule: 4x20 s, 4x40 s, 4x60 s, 4x180 s, 8x300 s.
    pub fn one_hour_24frames() -> Self {
        let mut durations = Vec::new();
        durations.extend(std::iter::repeat(20.0).take(4));
        durations.extend(std::iter::repeat(40.0).take(4));
        durations.extend(std::iter::repeat(60.0).take(4));
        durations.extend(std::iter::repeat(180.0).take(4));
        durations.extend(std::iter::repeat(300.0).take(8));
        Self::from_durations(&durations).expect("static schedule is valid")
    }

    pub fn frames(&self) -> &[(f64, f64)] {
        &self.frames
    }

    pub fn n_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn start(&self) -> f64 {
        self.frames[0].0
    }

    pub fn end(&self) -> f64 {
        self.frames[self.frames.len() - 1].1
    }

    pub fn duration(&self, frame: usize) -> f64 {
        let (t0, t1) = self.frames[frame];
        t1 - t0
    }
}

/// Dynamic frame timing plus one activity image per frame.
#[derive(Debug, Clone)]
pub struct DynamicImageSet {
    schedule: FrameSchedule,
    frames: Vec<Image2D>,
}

impl DynamicImageSet {
    pub fn new(schedule: FrameSchedule, frames: Vec<Image2D>) -> Result<Self> {
        if frames.len() != schedule.n_frames() {
            return Err(Error::DimensionMismatch {
                context: "DynamicImageSet",
                expected: format!("{} frames", schedule.n_frames()),
                actual: format!("{}", frames.len()),
            });
        }
        if let Some(first) = frames.first() {
            if !frames.iter().all(|f| f.same_dims(first)) {
                return Err(Error::DimensionMismatch {
                    context: "DynamicImageSet frames",
                    expected: format!("{}x{}", first.width(), first.height()),
                    actual: "mixed dimensions".to_string(),
                });
            }
        }
        Ok(DynamicImageSet { schedule, frames })
    }

    pub fn schedule(&self) -> &FrameSchedule {
        &self.schedule
    }

    pub fn frames(&self) -> &[Image2D] {
        &self.frames
    }

    pub fn frame(&self, m: usize) -> &Image2D {
        &self.frames[m]
    }

    pub fn n_frames(&self) -> usize {
        self.frames.len()
    }
}

/// Mean of `curve` over [t0, t1] by the composite midpoint rule.
///
/// The step is shrunk so it divides the interval evenly; midpoint sums are
/// exact for linear curves and well below noise for the smooth defaults.
pub fn mean_over_frame(curve: impl Fn(f64) -> f64, t0: f64, t1: f64, max_step_s: f64) -> f64 {
    debug_assert!(t1 > t0 && max_step_s > 0.0);
    let n = ((t1 - t0) / max_step_s).ceil().max(1.0) as usize;
    let h = (t1 - t0) / n as f64;
    let sum: f64 = (0..n).map(|i| curve(t0 + (i as f64 + 0.5) * h)).sum();
    sum / n as f64
}

/// Relative tolerance of the adaptive frame quadrature.
pub const QUADRATURE_REL_TOL: f64 = 1e-6;

/// [`mean_over_frame`] with step halving until two successive refinements
/// agree to [`QUADRATURE_REL_TOL`] relative (the fast bolus rise needs a
/// finer step than slow uptake curves).
fn mean_over_frame_adaptive(curve: impl Fn(f64) -> f64, t0: f64, t1: f64, start_step_s: f64) -> f64 {
    let mut step = start_step_s;
    let mut value = mean_over_frame(&curve, t0, t1, step);
    for _ in 0..16 {
        step /= 2.0;
        let refined = mean_over_frame(&curve, t0, t1, step);
        let done = (value - refined).abs() <= QUADRATURE_REL_TOL * refined.abs().max(1e-30);
        value = refined;
        if done {
            break;
        }
    }
    value
}

/// Discretize the activity model onto the schedule: frame m holds the mean
/// activity of each pixel's region over that frame.
pub fn integrate_frames(
    region_map: &RegionMap,
    model: &TimeActivityModel,
    schedule: &FrameSchedule,
) -> Result<DynamicImageSet> {
    integrate_frames_with_step(region_map, model, schedule, DEFAULT_QUADRATURE_STEP_S)
}

pub fn integrate_frames_with_step(
    region_map: &RegionMap,
    model: &TimeActivityModel,
    schedule: &FrameSchedule,
    max_step_s: f64,
) -> Result<DynamicImageSet> {
    model.validate()?;
    if max_step_s <= 0.0 {
        return Err(Error::InvalidParameter {
            name: "max_step_s",
            reason: format!("{max_step_s} must be > 0"),
        });
    }
    if schedule.start() < 0.0 || schedule.end() > model.t_max_s {
        return Err(Error::InvalidParameter {
            name: "schedule",
            reason: format!(
                "span [{}, {}] outside model range [0, {}]",
                schedule.start(),
                schedule.end(),
                model.t_max_s
            ),
        });
    }

    // Five regions per frame, then a per-pixel label lookup.
    let frames: Vec<Image2D> = schedule
        .frames()
        .iter()
        .map(|&(t0, t1)| {
            let mut region_mean = [0.0f64; 5];
            for region in Region::ALL {
                region_mean[region.index()] = mean_over_frame_adaptive(
                    |t| model.eval_unchecked(region, t),
                    t0,
                    t1,
                    max_step_s,
                );
            }
            let values = par::map_collect(region_map.n_pixels(), |idx| {
                region_mean[region_map.label(idx).index()]
            });
            Image2D::new(
                region_map.width(),
                region_map.height(),
                region_map.pixel_size_mm(),
                values,
            )
        })
        .collect::<Result<_>>()?;

    DynamicImageSet::new(schedule.clone(), frames)
}
