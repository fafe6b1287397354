//! ML-EM and kernelized-EM iterative reconstruction.
//!
//! The update on the kernel coefficient image is
//!
//! ```text
//! alpha <- (alpha / s) .* K^T P^T ( y ./ (P K alpha + r) ),   s = K^T P^T 1
//! ```
//!
//! With `K = I` this is the textbook ML-EM iteration. The displayed
//! activity image is `x = K alpha`. Divisions are stabilized by a small
//! epsilon relative to the data scale; pixels whose sensitivity falls below
//! it are frozen and never updated.

use crate::error::{Error, Result};
use crate::image::Image2D;
use crate::imaging::FrameSchedule;
use crate::kernel::SparseKernelMatrix;
use crate::par;
use crate::projector::{Projection, Sinogram};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReconSettings {
    pub n_iterations: usize,
    /// Division stabilizer, relative to the data scale.
    pub epsilon: f64,
    /// Logging stride for the trace (1 = every iteration).
    pub record_every: usize,
}

impl Default for ReconSettings {
    fn default() -> Self {
        ReconSettings {
            n_iterations: 60,
            epsilon: 1e-12,
            record_every: 1,
        }
    }
}

impl ReconSettings {
    pub fn validate(&self) -> Result<()> {
        if self.n_iterations == 0 {
            return Err(Error::InvalidParameter {
                name: "n_iterations",
                reason: "must be >= 1".to_string(),
            });
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::InvalidParameter {
                name: "epsilon",
                reason: format!("{} must be > 0", self.epsilon),
            });
        }
        if self.record_every == 0 {
            return Err(Error::InvalidParameter {
                name: "record_every",
                reason: "must be >= 1".to_string(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceEntry {
    pub iteration: usize,
    pub loglik: f64,
    pub snr_db: Option<f64>,
}

/// Per-iteration log of the Poisson log-likelihood (without the constant
/// `log y!` term) and, when a truth image is supplied, the image SNR.
#[derive(Debug, Clone, Default)]
pub struct ReconTrace {
    pub entries: Vec<TraceEntry>,
}

#[derive(Debug, Clone)]
pub struct ReconOutput {
    /// Kernel coefficient image (the EM iterate).
    pub alpha: Image2D,
    /// Displayed activity image `x = K alpha`.
    pub activity: Image2D,
    pub trace: ReconTrace,
}

/// Poisson log-likelihood `sum_i y_i ln(ybar_i) - ybar_i`, dropping the
/// x-independent `log y_i!` term. Elements with `y_i = 0` contribute
/// `-ybar_i`; `0 ln 0` is taken as 0.
pub fn poisson_loglik(y: &Sinogram, ybar: &Sinogram) -> f64 {
    y.values()
        .iter()
        .zip(ybar.values())
        .map(|(&yi, &bi)| {
            if yi > 0.0 {
                yi * bi.max(f64::MIN_POSITIVE).ln() - bi
            } else {
                -bi
            }
        })
        .sum()
}

/// The EM denominator `s = K^T P^T 1`.
pub fn sensitivity_image(
    model: &impl Projection,
    kernel: &SparseKernelMatrix,
) -> Result<Image2D> {
    check_kernel_dims(model, kernel)?;
    let ones = Sinogram::new(
        model.sino_angles(),
        model.sino_bins(),
        vec![1.0; model.n_elements()],
    )?;
    let bp = model.back_project(&ones)?;
    kernel.rmatvec(&bp)
}

fn check_kernel_dims(model: &impl Projection, kernel: &SparseKernelMatrix) -> Result<()> {
    if kernel.width() != model.image_width() || kernel.height() != model.image_height() {
        return Err(Error::DimensionMismatch {
            context: "kernel vs projector",
            expected: format!("{}x{}", model.image_width(), model.image_height()),
            actual: format!("{}x{}", kernel.width(), kernel.height()),
        });
    }
    Ok(())
}

/// `y_i / ybar_i` where the denominator is safely above `epsilon * max(ybar)`,
/// else 0 (empty rays carry no information).
fn stabilized_ratio(y: &[f64], ybar: &[f64], epsilon: f64) -> Vec<f64> {
    let scale = ybar.iter().copied().fold(0.0f64, f64::max);
    let floor = epsilon * scale;
    y.iter()
        .zip(ybar)
        .map(|(&yi, &bi)| if bi > floor { yi / bi } else { 0.0 })
        .collect()
}

/// One multiplicative EM step given the current expected data.
fn kem_step(
    alpha: &[f64],
    y: &[f64],
    ybar: &[f64],
    model: &impl Projection,
    kernel: &SparseKernelMatrix,
    sensitivity: &[f64],
    sensitivity_floor: f64,
    epsilon: f64,
) -> Result<Vec<f64>> {
    let ratio = stabilized_ratio(y, ybar, epsilon);
    let ratio_sino = Sinogram::new(model.sino_angles(), model.sino_bins(), ratio)?;
    let bp = model.back_project(&ratio_sino)?;
    let corr = kernel.rmatvec_values(bp.values());
    let mut next = alpha.to_vec();
    par::for_each_mut(&mut next, |j, a| {
        if sensitivity[j] > sensitivity_floor {
            *a *= corr[j] / sensitivity[j];
        }
    });
    Ok(next)
}

/// One kernelized-EM update. `sensitivity` must be the precomputed
/// `K^T P^T 1` for this model/kernel pair. Pixels whose sensitivity is at
/// or below `epsilon * max(s)` are left unchanged.
pub fn kem_update(
    alpha: &Image2D,
    y: &Sinogram,
    r: &Sinogram,
    model: &impl Projection,
    kernel: &SparseKernelMatrix,
    sensitivity: &Image2D,
    epsilon: f64,
) -> Result<Image2D> {
    alpha.require_nonnegative("kem_update alpha")?;
    if !y.values().iter().all(|&v| v >= 0.0) {
        return Err(Error::Negative("kem_update data"));
    }
    if !r.values().iter().all(|&v| v >= 0.0) {
        return Err(Error::Negative("kem_update background"));
    }
    check_kernel_dims(model, kernel)?;
    let x = kernel.matvec(alpha)?;
    let ybar = model.forward_project(&x)?.add(r)?;
    let s = sensitivity.values();
    let floor = epsilon * s.iter().copied().fold(0.0f64, f64::max);
    let next = kem_step(
        alpha.values(),
        y.values(),
        ybar.values(),
        model,
        kernel,
        s,
        floor,
        epsilon,
    )?;
    Image2D::new(alpha.width(), alpha.height(), alpha.pixel_size_mm(), next)
}

/// Run `settings.n_iterations` EM updates from a uniform start.
///
/// The trace logs the post-update log-likelihood every `record_every`
/// iterations (the final iteration is always logged) and the SNR versus
/// `truth` when given. Fully deterministic: no RNG, fixed reduction orders.
pub fn reconstruct(
    y: &Sinogram,
    r: &Sinogram,
    model: &impl Projection,
    kernel: &SparseKernelMatrix,
    settings: &ReconSettings,
    truth: Option<&Image2D>,
) -> Result<ReconOutput> {
    settings.validate()?;
    check_kernel_dims(model, kernel)?;
    if !y.values().iter().all(|&v| v >= 0.0) {
        return Err(Error::Negative("reconstruct data"));
    }
    if !r.values().iter().all(|&v| v >= 0.0) {
        return Err(Error::Negative("reconstruct background"));
    }
    if !y.same_dims(r) || y.n_angles() != model.sino_angles() || y.n_bins() != model.sino_bins() {
        return Err(Error::DimensionMismatch {
            context: "reconstruct data",
            expected: format!("{}x{}", model.sino_angles(), model.sino_bins()),
            actual: format!(
                "y {}x{}, r {}x{}",
                y.n_angles(),
                y.n_bins(),
                r.n_angles(),
                r.n_bins()
            ),
        });
    }

    let sensitivity = sensitivity_image(model, kernel)?;
    let s = sensitivity.values();
    let floor = settings.epsilon * s.iter().copied().fold(0.0f64, f64::max);

    // Uniform start inside the reconstructable support, frozen zeros outside.
    let alpha0: Vec<f64> = s
        .iter()
        .map(|&sj| if sj > floor { 1.0 } else { 0.0 })
        .collect();
    let mut alpha = Image2D::new(
        model.image_width(),
        model.image_height(),
        model.image_pixel_size_mm(),
        alpha0,
    )?;

    let mut x = kernel.matvec(&alpha)?;
    let mut ybar = model.forward_project(&x)?.add(r)?;
    let mut trace = ReconTrace::default();

    for it in 1..=settings.n_iterations {
        let next = kem_step(
            alpha.values(),
            y.values(),
            ybar.values(),
            model,
            kernel,
            s,
            floor,
            settings.epsilon,
        )?;
        alpha = Image2D::new(
            alpha.width(),
            alpha.height(),
            alpha.pixel_size_mm(),
            next,
        )?;
        x = kernel.matvec(&alpha)?;
        ybar = model.forward_project(&x)?.add(r)?;

        if it % settings.record_every == 0 || it == settings.n_iterations {
            let snr = match truth {
                Some(t) => Some(crate::experiments::snr_db(&x, t)?),
                None => None,
            };
            trace.entries.push(TraceEntry {
                iteration: it,
                loglik: poisson_loglik(y, &ybar),
                snr_db: snr,
            });
        }
    }

    Ok(ReconOutput {
        alpha,
        activity: x,
        trace,
    })
}

/// Map composite windows onto frame index ranges; every window must start
/// and end exactly on frame boundaries and windows must not overlap.
pub fn window_frame_ranges(
    schedule: &FrameSchedule,
    windows: &[(f64, f64)],
) -> Result<Vec<std::ops::Range<usize>>> {
    let frames = schedule.frames();
    let mut ranges = Vec::with_capacity(windows.len());
    for &(start, end) in windows {
        if end <= start {
            return Err(Error::MisalignedWindow { start, end });
        }
        let first = frames
            .iter()
            .position(|&(t0, _)| t0 == start)
            .ok_or(Error::MisalignedWindow { start, end })?;
        let mut last = first;
        loop {
            if frames[last].1 == end {
                break;
            }
            last += 1;
            if last >= frames.len() {
                return Err(Error::MisalignedWindow { start, end });
            }
        }
        ranges.push(first..last + 1);
    }
    for (i, a) in ranges.iter().enumerate() {
        for b in ranges.iter().skip(i + 1) {
            if a.start < b.end && b.start < a.end {
                return Err(Error::InvalidParameter {
                    name: "composite windows",
                    reason: format!("windows {a:?} and {b:?} overlap"),
                });
            }
        }
    }
    Ok(ranges)
}

/// Sum member frames of each composite window elementwise (Poisson counts
/// are additive over disjoint intervals).
pub fn rebin_composite(
    counts: &[Sinogram],
    schedule: &FrameSchedule,
    windows: &[(f64, f64)],
) -> Result<Vec<Sinogram>> {
    if counts.len() != schedule.n_frames() {
        return Err(Error::DimensionMismatch {
            context: "rebin_composite",
            expected: format!("{} frames", schedule.n_frames()),
            actual: format!("{}", counts.len()),
        });
    }
    let ranges = window_frame_ranges(schedule, windows)?;
    ranges
        .into_iter()
        .map(|range| {
            let mut acc = counts[range.start].clone();
            for m in range.start + 1..range.end {
                acc = acc.add(&counts[m])?;
            }
            Ok(acc)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::FrameSchedule;
    use crate::projector::{
        expected_data, sample_poisson, IdentityProjection, ScannerGeometry2D, SystemModel,
    };

    fn model16() -> SystemModel {
        let geom = ScannerGeometry2D::default_for_image(16, 2.0).unwrap();
        SystemModel::build(geom, 16, 16, 2.0).unwrap()
    }

    fn bumpy_image(width: usize, height: usize) -> Image2D {
        let values = (0..width * height)
            .map(|j| {
                let x = (j % width) as f64;
                let y = (j / width) as f64;
                1.0 + 0.5 * ((x / 3.0).sin() + (y / 2.0).cos()).abs()
            })
            .collect();
        Image2D::new(width, height, 2.0, values).unwrap()
    }

    #[test]
    fn sensitivity_with_identity_kernel_is_backprojected_ones() {
        let model = model16();
        let kernel = SparseKernelMatrix::identity(16, 16, 2.0);
        let s = sensitivity_image(&model, &kernel).unwrap();
        let ones = Sinogram::new(
            model.sino_angles(),
            model.sino_bins(),
            vec![1.0; model.n_elements()],
        )
        .unwrap();
        let expected = model.back_project(&ones).unwrap();
        assert_eq!(s.values(), expected.values());
    }

    #[test]
    fn doubling_factors_doubles_sensitivity_exactly() {
        let model = model16();
        let doubled = model.with_factors(vec![2.0; model.n_elements()]).unwrap();
        let kernel = SparseKernelMatrix::identity(16, 16, 2.0);
        let s1 = sensitivity_image(&model, &kernel).unwrap();
        let s2 = sensitivity_image(&doubled, &kernel).unwrap();
        for (a, b) in s1.values().iter().zip(s2.values()) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn sensitivity_positive_inside_fov_with_wide_kernel() {
        use crate::kernel::{
            extract_intensity_features, knn_search, pairwise_similarity, softmax_normalize,
            SparseKernelMatrix,
        };
        let width = 32;
        let geom = ScannerGeometry2D::default_for_image(width, 2.0).unwrap();
        let model = SystemModel::build(geom, width, width, 2.0).unwrap();
        let prior = bumpy_image(width, width);
        let f = extract_intensity_features(std::slice::from_ref(&prior), true).unwrap();
        let g = knn_search(&f, 8, 2 * width + 1).unwrap();
        let w = softmax_normalize(&pairwise_similarity(&f, &g, 1.0).unwrap());
        let kernel = SparseKernelMatrix::assemble(&w, &g).unwrap();
        let s = sensitivity_image(&model, &kernel).unwrap();
        for (j, &v) in s.values().iter().enumerate() {
            assert!(v > 0.0, "pixel {j}");
        }
    }

    #[test]
    fn consistent_data_is_a_fixed_point() {
        let model = model16();
        let kernel = SparseKernelMatrix::identity(16, 16, 2.0);
        let alpha = bumpy_image(16, 16);
        let (ybar, r) = expected_data(&model, &alpha, 0.2).unwrap();
        let s = sensitivity_image(&model, &kernel).unwrap();
        let next = kem_update(&alpha, &ybar, &r, &model, &kernel, &s, 1e-12).unwrap();
        for (a, b) in alpha.values().iter().zip(next.values()) {
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn identity_everything_recovers_data_in_one_step() {
        let proj = IdentityProjection {
            width: 4,
            height: 4,
            pixel_size_mm: 1.0,
        };
        let kernel = SparseKernelMatrix::identity(4, 4, 1.0);
        let y = Sinogram::new(1, 16, (1..=16).map(|v| v as f64).collect()).unwrap();
        let r = Sinogram::zeros(1, 16);
        let alpha0 = Image2D::constant(4, 4, 1.0, 1.0).unwrap();
        let s = sensitivity_image(&proj, &kernel).unwrap();
        let next = kem_update(&alpha0, &y, &r, &proj, &kernel, &s, 1e-12).unwrap();
        assert_eq!(next.values(), y.values());
    }

    #[test]
    fn identity_kernel_matches_plain_mlem_oracle() {
        // Independent textbook MLEM: x *= P^T(y / (Px + r)) / P^T 1.
        let model = model16();
        let truth = bumpy_image(16, 16);
        let (ybar, r) = expected_data(&model, &truth, 0.2).unwrap();
        let (scaled, factor) = crate::projector::scale_to_counts(&[ybar], 5e4).unwrap();
        let r = r.map(|v| v * factor);
        let y = sample_poisson(&scaled[0], 11).unwrap();

        let epsilon = 1e-12;
        let n_iters = 20;

        let ones = Sinogram::new(
            model.sino_angles(),
            model.sino_bins(),
            vec![1.0; model.n_elements()],
        )
        .unwrap();
        let sens = model.back_project(&ones).unwrap();
        let s_floor = epsilon * sens.values().iter().copied().fold(0.0f64, f64::max);
        let mut x: Vec<f64> = sens
            .values()
            .iter()
            .map(|&s| if s > s_floor { 1.0 } else { 0.0 })
            .collect();
        for _ in 0..n_iters {
            let img = Image2D::new(16, 16, 2.0, x.clone()).unwrap();
            let fp = model.forward_project(&img).unwrap().add(&r).unwrap();
            let scale = fp.values().iter().copied().fold(0.0f64, f64::max);
            let ratio: Vec<f64> = y
                .values()
                .iter()
                .zip(fp.values())
                .map(|(&yi, &bi)| if bi > epsilon * scale { yi / bi } else { 0.0 })
                .collect();
            let ratio =
                Sinogram::new(model.sino_angles(), model.sino_bins(), ratio).unwrap();
            let bp = model.back_project(&ratio).unwrap();
            for j in 0..x.len() {
                if sens.values()[j] > s_floor {
                    x[j] *= bp.values()[j] / sens.values()[j];
                }
            }
        }

        let kernel = SparseKernelMatrix::identity(16, 16, 2.0);
        let settings = ReconSettings {
            n_iterations: n_iters,
            epsilon,
            record_every: 1,
        };
        let out = reconstruct(&y, &r, &model, &kernel, &settings, None).unwrap();
        for (j, (a, b)) in out.activity.values().iter().zip(&x).enumerate() {
            assert!(
                (a - b).abs() <= 1e-12 * b.abs().max(1.0),
                "pixel {j}: {a} vs {b}"
            );
        }
    }

    #[test]
    fn loglik_is_monotone_and_trace_has_one_entry_per_iteration() {
        let model = model16();
        let truth = bumpy_image(16, 16);
        let (ybar, r) = expected_data(&model, &truth, 0.2).unwrap();
        let (scaled, factor) = crate::projector::scale_to_counts(&[ybar], 2e4).unwrap();
        let r = r.map(|v| v * factor);
        let y = sample_poisson(&scaled[0], 5).unwrap();
        let kernel = SparseKernelMatrix::identity(16, 16, 2.0);
        let settings = ReconSettings {
            n_iterations: 30,
            epsilon: 1e-12,
            record_every: 1,
        };
        let out = reconstruct(&y, &r, &model, &kernel, &settings, Some(&truth)).unwrap();
        assert_eq!(out.trace.entries.len(), 30);
        for pair in out.trace.entries.windows(2) {
            let slack = 1e-9 * pair[0].loglik.abs().max(1.0);
            assert!(
                pair[1].loglik >= pair[0].loglik - slack,
                "loglik decreased: {} -> {}",
                pair[0].loglik,
                pair[1].loglik
            );
        }
        assert!(out.trace.entries.iter().all(|e| e.snr_db.is_some()));
        assert!(out.alpha.is_nonnegative() && out.activity.is_nonnegative());
    }

    #[test]
    fn record_every_strides_the_trace() {
        let model = model16();
        let truth = bumpy_image(16, 16);
        let (ybar, r) = expected_data(&model, &truth, 0.0).unwrap();
        let y = sample_poisson(&ybar.map(|v| v * 50.0), 3).unwrap();
        let kernel = SparseKernelMatrix::identity(16, 16, 2.0);
        let settings = ReconSettings {
            n_iterations: 10,
            epsilon: 1e-12,
            record_every: 4,
        };
        let out = reconstruct(&y, &r, &model, &kernel, &settings, None).unwrap();
        let iters: Vec<usize> = out.trace.entries.iter().map(|e| e.iteration).collect();
        assert_eq!(iters, vec![4, 8, 10]);
    }

    #[test]
    fn reconstruction_is_deterministic() {
        let model = model16();
        let truth = bumpy_image(16, 16);
        let (ybar, r) = expected_data(&model, &truth, 0.2).unwrap();
        let y = sample_poisson(&ybar.map(|v| v * 20.0), 9).unwrap();
        let r = r.map(|v| v * 20.0);
        let kernel = SparseKernelMatrix::identity(16, 16, 2.0);
        let settings = ReconSettings::default();
        let a = reconstruct(&y, &r, &model, &kernel, &settings, None).unwrap();
        let b = reconstruct(&y, &r, &model, &kernel, &settings, None).unwrap();
        assert_eq!(a.activity.values(), b.activity.values());
        assert_eq!(a.alpha.values(), b.alpha.values());
    }

    #[test]
    fn rebin_three_twenty_minute_windows() {
        let schedule = FrameSchedule::one_hour_24frames();
        let counts: Vec<Sinogram> = (0..24)
            .map(|m| Sinogram::new(1, 4, vec![m as f64; 4]).unwrap())
            .collect();
        let windows = [(0.0, 1200.0), (1200.0, 2400.0), (2400.0, 3600.0)];
        let composites = rebin_composite(&counts, &schedule, &windows).unwrap();
        assert_eq!(composites.len(), 3);
        let total_in: f64 = counts.iter().map(|s| s.total_counts()).sum();
        let total_out: f64 = composites.iter().map(|s| s.total_counts()).sum();
        assert_eq!(total_in, total_out);
    }

    #[test]
    fn rebin_single_window_sums_everything() {
        let schedule = FrameSchedule::from_durations(&[10.0, 20.0, 30.0]).unwrap();
        let counts: Vec<Sinogram> = (0..3)
            .map(|m| Sinogram::new(1, 2, vec![m as f64 + 1.0; 2]).unwrap())
            .collect();
        let composites = rebin_composite(&counts, &schedule, &[(0.0, 60.0)]).unwrap();
        assert_eq!(composites.len(), 1);
        assert_eq!(composites[0].values(), &[6.0, 6.0]);
    }

    #[test]
    fn rebin_boundary_walk_on_24_frame_schedule() {
        // The first 12 frames (4x20 + 4x40 + 4x60) end at 480 s.
        let schedule = FrameSchedule::one_hour_24frames();
        let ranges =
            window_frame_ranges(&schedule, &[(0.0, 480.0), (480.0, 3600.0)]).unwrap();
        assert_eq!(ranges[0], 0..12);
        assert_eq!(ranges[1], 12..24);

        // 600 s is not a frame boundary: misaligned.
        let err = window_frame_ranges(&schedule, &[(0.0, 600.0)]).unwrap_err();
        assert!(matches!(err, Error::MisalignedWindow { .. }));
    }

    #[test]
    fn rebin_rejects_overlapping_windows() {
        let schedule = FrameSchedule::from_durations(&[10.0, 10.0, 10.0]).unwrap();
        let counts: Vec<Sinogram> = (0..3).map(|_| Sinogram::zeros(1, 2)).collect();
        let err = rebin_composite(&counts, &schedule, &[(0.0, 20.0), (10.0, 30.0)]);
        assert!(err.is_err());
    }
}
