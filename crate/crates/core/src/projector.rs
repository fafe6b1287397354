//! 2D parallel-beam system model.
//!
//! The detection model is `ybar = P x + r`. `P` is assembled once per
//! geometry as a sparse matrix of exact ray/pixel intersection lengths
//! (Siddon-style traversal) scaled by a per-ray normalization/attenuation
//! factor; the stored transpose makes forward and back projection exact
//! adjoints of each other and both run as deterministic row-parallel
//! sparse matvecs.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};

use crate::error::{Error, Result};
use crate::image::Image2D;
use crate::par;

/// Parallel-beam geometry: `n_angles` views uniformly spanning [0, pi),
/// each with `n_bins` radial bins at `bin_spacing_mm` pitch centered on the
/// rotation axis.
#[derive(Debug, Clone, PartialEq)]
pub struct ScannerGeometry2D {
    pub n_angles: usize,
    pub n_bins: usize,
    pub bin_spacing_mm: f64,
}

impl ScannerGeometry2D {
    pub fn new(n_angles: usize, n_bins: usize, bin_spacing_mm: f64) -> Result<Self> {
        if n_angles == 0 || n_bins == 0 {
            return Err(Error::InvalidParameter {
                name: "geometry",
                reason: format!("n_angles={n_angles}, n_bins={n_bins} must be >= 1"),
            });
        }
        if !(bin_spacing_mm.is_finite() && bin_spacing_mm > 0.0) {
            return Err(Error::InvalidParameter {
                name: "bin_spacing_mm",
                reason: format!("{bin_spacing_mm} must be positive"),
            });
        }
        Ok(ScannerGeometry2D {
            n_angles,
            n_bins,
            bin_spacing_mm,
        })
    }

    /// Default desk-scale geometry for a given image: 180 angles,
    /// 1.5x width bins at the image pixel pitch.
    pub fn default_for_image(width: usize, pixel_size_mm: f64) -> Result<Self> {
        Self::new(180, (3 * width).div_ceil(2), pixel_size_mm)
    }

    pub fn n_elements(&self) -> usize {
        self.n_angles * self.n_bins
    }

    pub fn angle_rad(&self, a: usize) -> f64 {
        a as f64 * std::f64::consts::PI / self.n_angles as f64
    }

    pub fn bin_offset_mm(&self, b: usize) -> f64 {
        (b as f64 - (self.n_bins as f64 - 1.0) / 2.0) * self.bin_spacing_mm
    }
}

/// An `n_angles x n_bins` raster of line-integral measurements
/// (expected or sampled counts), row-major by angle.
#[derive(Debug, Clone, PartialEq)]
pub struct Sinogram {
    n_angles: usize,
    n_bins: usize,
    values: Vec<f64>,
}

impl Sinogram {
    pub fn new(n_angles: usize, n_bins: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n_angles * n_bins {
            return Err(Error::DimensionMismatch {
                context: "Sinogram values",
                expected: format!("{} values", n_angles * n_bins),
                actual: format!("{}", values.len()),
            });
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("Sinogram values"));
        }
        Ok(Sinogram {
            n_angles,
            n_bins,
            values,
        })
    }

    pub fn zeros(n_angles: usize, n_bins: usize) -> Self {
        Sinogram {
            n_angles,
            n_bins,
            values: vec![0.0; n_angles * n_bins],
        }
    }

    pub fn n_angles(&self) -> usize {
        self.n_angles
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn n_elements(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn total_counts(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn same_dims(&self, other: &Sinogram) -> bool {
        self.n_angles == other.n_angles && self.n_bins == other.n_bins
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Sinogram {
        Sinogram {
            n_angles: self.n_angles,
            n_bins: self.n_bins,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise sum; dims must match.
    pub fn add(&self, other: &Sinogram) -> Result<Sinogram> {
        if !self.same_dims(other) {
            return Err(Error::DimensionMismatch {
                context: "Sinogram add",
                expected: format!("{}x{}", self.n_angles, self.n_bins),
                actual: format!("{}x{}", other.n_angles, other.n_bins),
            });
        }
        Ok(Sinogram {
            n_angles: self.n_angles,
            n_bins: self.n_bins,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a + b)
                .collect(),
        })
    }
}

/// Abstraction over the forward/back projection pair, so the EM code can
/// run against the full system model or a trivial identity operator.
pub trait Projection: Sync {
    fn image_width(&self) -> usize;
    fn image_height(&self) -> usize;
    fn image_pixel_size_mm(&self) -> f64;
    fn sino_angles(&self) -> usize;
    fn sino_bins(&self) -> usize;
    fn forward_project(&self, image: &Image2D) -> Result<Sinogram>;
    fn back_project(&self, sino: &Sinogram) -> Result<Image2D>;

    fn n_elements(&self) -> usize {
        self.sino_angles() * self.sino_bins()
    }

    fn n_pixels(&self) -> usize {
        self.image_width() * self.image_height()
    }
}

/// Sparse rows of intersection lengths, one row per ray.
#[derive(Debug)]
struct Csr {
    indptr: Vec<usize>,
    cols: Vec<u32>,
    vals: Vec<f64>,
}

impl Csr {
    fn row(&self, i: usize) -> (&[u32], &[f64]) {
        let (lo, hi) = (self.indptr[i], self.indptr[i + 1]);
        (&self.cols[lo..hi], &self.vals[lo..hi])
    }

    fn n_rows(&self) -> usize {
        self.indptr.len() - 1
    }

    /// Deterministic transpose via a serial counting pass.
    fn transpose(&self, n_cols: usize) -> Csr {
        let mut counts = vec![0usize; n_cols + 1];
        for &c in &self.cols {
            counts[c as usize + 1] += 1;
        }
        for j in 0..n_cols {
            counts[j + 1] += counts[j];
        }
        let indptr = counts.clone();
        let mut cols = vec![0u32; self.cols.len()];
        let mut vals = vec![0.0f64; self.vals.len()];
        let mut cursor = counts;
        for row in 0..self.n_rows() {
            let (cs, vs) = self.row(row);
            for (&c, &v) in cs.iter().zip(vs) {
                let dst = cursor[c as usize];
                cols[dst] = row as u32;
                vals[dst] = v;
                cursor[c as usize] += 1;
            }
        }
        Csr { indptr, cols, vals }
    }
}

/// Precomputed system matrix `P` with per-ray factors.
#[derive(Debug, Clone)]
pub struct SystemModel {
    geometry: ScannerGeometry2D,
    width: usize,
    height: usize,
    pixel_size_mm: f64,
    /// Per-ray normalization/attenuation factor (scanner sensitivity,
    /// attenuation correction); all >= 0.
    factors: Arc<Vec<f64>>,
    fwd: Arc<Csr>,
    adj: Arc<Csr>,
}

impl SystemModel {
    /// Assemble the system matrix with all per-ray factors set to 1.
    pub fn build(
        geometry: ScannerGeometry2D,
        width: usize,
        height: usize,
        pixel_size_mm: f64,
    ) -> Result<Self> {
        let factors = vec![1.0; geometry.n_elements()];
        Self::build_with_factors(geometry, width, height, pixel_size_mm, factors)
    }

    pub fn build_with_factors(
        geometry: ScannerGeometry2D,
        width: usize,
        height: usize,
        pixel_size_mm: f64,
        factors: Vec<f64>,
    ) -> Result<Self> {
        if width == 0 || height == 0 || !(pixel_size_mm.is_finite() && pixel_size_mm > 0.0) {
            return Err(Error::InvalidParameter {
                name: "image dims",
                reason: format!("{width}x{height} at {pixel_size_mm} mm"),
            });
        }
        let diagonal =
            ((width as f64 * pixel_size_mm).powi(2) + (height as f64 * pixel_size_mm).powi(2)).sqrt();
        let detector_extent = (geometry.n_bins as f64 - 1.0) * geometry.bin_spacing_mm;
        if detector_extent < diagonal {
            return Err(Error::InvalidParameter {
                name: "geometry",
                reason: format!(
                    "detector extent {detector_extent:.1} mm does not cover the image diagonal {diagonal:.1} mm"
                ),
            });
        }
        check_factors(&factors, geometry.n_elements())?;

        let grid = Grid {
            width,
            height,
            pixel_size_mm,
        };
        let rows: Vec<Vec<(u32, f64)>> = par::map_collect(geometry.n_elements(), |i| {
            let a = i / geometry.n_bins;
            let b = i % geometry.n_bins;
            let theta = geometry.angle_rad(a);
            let t = geometry.bin_offset_mm(b);
            let origin = (t * theta.cos(), t * theta.sin());
            let dir = (-theta.sin(), theta.cos());
            trace_ray(&grid, origin, dir)
        });

        let mut indptr = Vec::with_capacity(rows.len() + 1);
        indptr.push(0usize);
        let nnz: usize = rows.iter().map(|r| r.len()).sum();
        let mut cols = Vec::with_capacity(nnz);
        let mut vals = Vec::with_capacity(nnz);
        for row in &rows {
            for &(c, v) in row {
                cols.push(c);
                vals.push(v);
            }
            indptr.push(cols.len());
        }
        let fwd = Csr { indptr, cols, vals };
        let adj = fwd.transpose(width * height);
        Ok(SystemModel {
            geometry,
            width,
            height,
            pixel_size_mm,
            factors: Arc::new(factors),
            fwd: Arc::new(fwd),
            adj: Arc::new(adj),
        })
    }

    /// Same geometry and ray weights, different per-ray factors.
    pub fn with_factors(&self, factors: Vec<f64>) -> Result<Self> {
        check_factors(&factors, self.geometry.n_elements())?;
        Ok(SystemModel {
            factors: Arc::new(factors),
            ..self.clone()
        })
    }

    pub fn geometry(&self) -> &ScannerGeometry2D {
        &self.geometry
    }

    pub fn factors(&self) -> &[f64] {
        &self.factors
    }

    /// Uniform-attenuation per-ray factors `exp(-mu * L)` where `L` is each
    /// ray's path length through the mask (pixels with value > 0.5).
    pub fn uniform_attenuation_factors(&self, mask: &Image2D, mu_per_mm: f64) -> Result<Vec<f64>> {
        self.check_image(mask)?;
        if !(mu_per_mm.is_finite() && mu_per_mm >= 0.0) {
            return Err(Error::InvalidParameter {
                name: "mu_per_mm",
                reason: format!("{mu_per_mm} must be finite and >= 0"),
            });
        }
        let binary: Vec<f64> = mask.values().iter().map(|&v| f64::from(v > 0.5)).collect();
        Ok(par::map_collect(self.geometry.n_elements(), |i| {
            let (cs, vs) = self.fwd.row(i);
            let path: f64 = cs
                .iter()
                .zip(vs)
                .map(|(&c, &w)| w * binary[c as usize])
                .sum();
            (-mu_per_mm * path).exp()
        }))
    }

    fn check_image(&self, image: &Image2D) -> Result<()> {
        if image.width() != self.width || image.height() != self.height {
            return Err(Error::DimensionMismatch {
                context: "projector image",
                expected: format!("{}x{}", self.width, self.height),
                actual: format!("{}x{}", image.width(), image.height()),
            });
        }
        Ok(())
    }

    fn check_sino(&self, sino: &Sinogram) -> Result<()> {
        if sino.n_angles() != self.geometry.n_angles || sino.n_bins() != self.geometry.n_bins {
            return Err(Error::DimensionMismatch {
                context: "projector sinogram",
                expected: format!("{}x{}", self.geometry.n_angles, self.geometry.n_bins),
                actual: format!("{}x{}", sino.n_angles(), sino.n_bins()),
            });
        }
        Ok(())
    }
}

fn check_factors(factors: &[f64], n: usize) -> Result<()> {
    if factors.len() != n {
        return Err(Error::DimensionMismatch {
            context: "ray factors",
            expected: format!("{n}"),
            actual: format!("{}", factors.len()),
        });
    }
    if !factors.iter().all(|f| f.is_finite() && *f >= 0.0) {
        return Err(Error::Negative("ray factors"));
    }
    Ok(())
}

impl Projection for SystemModel {
    fn image_width(&self) -> usize {
        self.width
    }

    fn image_height(&self) -> usize {
        self.height
    }

    fn image_pixel_size_mm(&self) -> f64 {
        self.pixel_size_mm
    }

    fn sino_angles(&self) -> usize {
        self.geometry.n_angles
    }

    fn sino_bins(&self) -> usize {
        self.geometry.n_bins
    }

    fn forward_project(&self, image: &Image2D) -> Result<Sinogram> {
        self.check_image(image)?;
        let x = image.values();
        let fwd = &self.fwd;
        let factors = &self.factors;
        let values = par::map_collect(self.geometry.n_elements(), |i| {
            let (cs, vs) = fwd.row(i);
            let dot: f64 = cs.iter().zip(vs).map(|(&c, &w)| w * x[c as usize]).sum();
            factors[i] * dot
        });
        Sinogram::new(self.geometry.n_angles, self.geometry.n_bins, values)
    }

    fn back_project(&self, sino: &Sinogram) -> Result<Image2D> {
        self.check_sino(sino)?;
        let weighted: Vec<f64> = sino
            .values()
            .iter()
            .zip(self.factors.iter())
            .map(|(y, f)| y * f)
            .collect();
        let adj = &self.adj;
        let values = par::map_collect(self.width * self.height, |j| {
            let (cs, vs) = adj.row(j);
            cs.iter()
                .zip(vs)
                .map(|(&i, &w)| w * weighted[i as usize])
                .sum()
        });
        Image2D::new(self.width, self.height, self.pixel_size_mm, values)
    }
}

/// Identity operator: the "sinogram" is the image itself (1 x n_p).
/// Turns the EM iteration into pure image-domain denoising; also handy in
/// tests where `P = I` has a closed-form update.
#[derive(Debug, Clone)]
pub struct IdentityProjection {
    pub width: usize,
    pub height: usize,
    pub pixel_size_mm: f64,
}

impl Projection for IdentityProjection {
    fn image_width(&self) -> usize {
        self.width
    }

    fn image_height(&self) -> usize {
        self.height
    }

    fn image_pixel_size_mm(&self) -> f64 {
        self.pixel_size_mm
    }

    fn sino_angles(&self) -> usize {
        1
    }

    fn sino_bins(&self) -> usize {
        self.width * self.height
    }

    fn forward_project(&self, image: &Image2D) -> Result<Sinogram> {
        Sinogram::new(1, self.width * self.height, image.values().to_vec())
    }

    fn back_project(&self, sino: &Sinogram) -> Result<Image2D> {
        Image2D::new(
            self.width,
            self.height,
            self.pixel_size_mm,
            sino.values().to_vec(),
        )
    }
}

struct Grid {
    width: usize,
    height: usize,
    pixel_size_mm: f64,
}

const DIR_EPS: f64 = 1e-12;

/// Exact intersection lengths (mm) of a unit-direction ray with every grid
/// pixel it crosses. The grid is centered on the origin. Cells are resolved
/// from segment midpoints, so boundary-grazing rays never double-count.
fn trace_ray(grid: &Grid, origin: (f64, f64), dir: (f64, f64)) -> Vec<(u32, f64)> {
    let p = grid.pixel_size_mm;
    let (half_w, half_h) = (
        grid.width as f64 * p / 2.0,
        grid.height as f64 * p / 2.0,
    );

    // Clip the ray parameter to the grid bounding box (slab test per axis).
    let mut s_min = f64::NEG_INFINITY;
    let mut s_max = f64::INFINITY;
    for (o, d, half) in [
        (origin.0, dir.0, half_w),
        (origin.1, dir.1, half_h),
    ] {
        if d.abs() < DIR_EPS {
            if o.abs() >= half {
                return Vec::new();
            }
        } else {
            let s1 = (-half - o) / d;
            let s2 = (half - o) / d;
            s_min = s_min.max(s1.min(s2));
            s_max = s_max.min(s1.max(s2));
        }
    }
    if s_min >= s_max {
        return Vec::new();
    }

    // Parameter of the first axis-plane crossing after s, and the constant
    // step between crossings.
    let next_crossing = |o: f64, d: f64, half: f64, s: f64| -> (f64, f64) {
        if d.abs() < DIR_EPS {
            return (f64::INFINITY, f64::INFINITY);
        }
        let step = p / d.abs();
        let rel = (o + s * d + half) / p;
        let k = if d > 0.0 {
            rel.floor() + 1.0
        } else {
            rel.ceil() - 1.0
        };
        let crossing = (k * p - half - o) / d;
        // Guard against `rel` landing exactly on a boundary in the wrong
        // direction due to rounding.
        if crossing <= s {
            (crossing + step, step)
        } else {
            (crossing, step)
        }
    };

    let (mut ax, dax) = next_crossing(origin.0, dir.0, half_w, s_min);
    let (mut ay, day) = next_crossing(origin.1, dir.1, half_h, s_min);

    let mut out = Vec::with_capacity(grid.width + grid.height);
    let mut s = s_min;
    while s < s_max {
        let s_next = ax.min(ay).min(s_max);
        let len = s_next - s;
        if len > 0.0 {
            let mid = 0.5 * (s + s_next);
            let x = origin.0 + mid * dir.0;
            let y = origin.1 + mid * dir.1;
            let ix = (((x + half_w) / p).floor() as isize).clamp(0, grid.width as isize - 1);
            let iy = (((y + half_h) / p).floor() as isize).clamp(0, grid.height as isize - 1);
            out.push(((iy as usize * grid.width + ix as usize) as u32, len));
        }
        if ax <= s_next {
            ax += dax;
        }
        if ay <= s_next {
            ay += day;
        }
        s = s_next;
    }
    out
}

/// `ybar = P x + r` with a uniform background `r` holding the requested
/// fraction of the total expected counts.
pub fn expected_data(
    model: &SystemModel,
    image: &Image2D,
    background_fraction: f64,
) -> Result<(Sinogram, Sinogram)> {
    if !(0.0..1.0).contains(&background_fraction) {
        return Err(Error::InvalidParameter {
            name: "background_fraction",
            reason: format!("{background_fraction} outside [0, 1)"),
        });
    }
    image.require_nonnegative("expected_data image")?;
    let px = model.forward_project(image)?;
    let trues = px.total_counts();
    // sum(r) = bf * (sum(Px) + sum(r))  =>  sum(r) = bf/(1-bf) * sum(Px)
    let r_total = background_fraction / (1.0 - background_fraction) * trues;
    let r_elem = r_total / px.n_elements() as f64;
    let r = px.map(|_| r_elem);
    let ybar = px.add(&r)?;
    Ok((ybar, r))
}

/// Scale a dynamic sequence by one global factor so the grand total of
/// expected counts hits `target_total`. Returns the scaled frames and the
/// factor (so callers can scale matching backgrounds identically).
pub fn scale_to_counts(sinos: &[Sinogram], target_total: f64) -> Result<(Vec<Sinogram>, f64)> {
    if !(target_total.is_finite() && target_total > 0.0) {
        return Err(Error::InvalidParameter {
            name: "target_total",
            reason: format!("{target_total} must be > 0"),
        });
    }
    let total: f64 = sinos.iter().map(|s| s.total_counts()).sum();
    if total <= 0.0 {
        return Err(Error::InvalidParameter {
            name: "scale_to_counts",
            reason: "all input sinograms are zero".to_string(),
        });
    }
    let scale = target_total / total;
    let scaled = sinos.iter().map(|s| s.map(|v| v * scale)).collect();
    Ok((scaled, scale))
}

/// Draw independent Poisson counts for every sinogram element.
///
/// Element `i` samples from its own ChaCha stream (stream id = `i`, seeded
/// by `seed`), so results are bit-identical no matter how the loop is
/// scheduled. Distinct frames must use distinct seeds; see [`derive_seed`].
pub fn sample_poisson(ybar: &Sinogram, seed: u64) -> Result<Sinogram> {
    if !ybar.values().iter().all(|&v| v >= 0.0) {
        return Err(Error::Negative("Poisson means"));
    }
    let means = ybar.values();
    let values = par::map_collect(ybar.n_elements(), |i| {
        let mean = means[i];
        if mean <= 0.0 {
            return 0.0;
        }
        let mut rng = element_rng(seed, i as u64);
        let dist = Poisson::new(mean).expect("positive finite mean");
        dist.sample(&mut rng)
    });
    Sinogram::new(ybar.n_angles(), ybar.n_bins(), values)
}

pub(crate) fn element_rng(seed: u64, element: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(element);
    rng
}

/// Derive an independent sub-seed from a base seed, a purpose tag and an
/// index (SplitMix64 steps). Used to give every frame / stage its own
/// Poisson or thinning stream family.
pub fn derive_seed(base: u64, tag: u64, index: u64) -> u64 {
    let mut z = base;
    for salt in [tag, index] {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(salt);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}
