//! Analytic ellipse head phantom.
//!
//! The head is an ellipse filling 90% of the field of view, with a gray
//! matter rim, a white matter interior, two elliptical blood pools and one
//! circular tumor of fixed 15 mm diameter. All membership tests run on
//! pixel centers, so region counts are exactly reproducible at any grid
//! resolution.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::par;

pub const TUMOR_DIAMETER_MM: f64 = 15.0;

/// Head ellipse semi-axes as a fraction of the half field of view.
const HEAD_FRACTION: f64 = 0.90;
/// White matter interior as a fraction of the head semi-axes.
const WHITE_FRACTION: f64 = 0.78;
/// Blood pool centers (fractions of head semi-axes).
const BLOOD_CENTER: (f64, f64) = (0.22, 0.20);
/// Blood pool semi-axes (fractions of head semi-axes).
const BLOOD_SEMI: (f64, f64) = (0.10, 0.18);
/// Nominal tumor center (fractions of head semi-axes); snapped to the
/// nearest pixel center at construction.
const TUMOR_CENTER: (f64, f64) = (0.40, -0.35);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Region {
    Background = 0,
    GrayMatter = 1,
    WhiteMatter = 2,
    Blood = 3,
    Tumor = 4,
}

impl Region {
    pub const ALL: [Region; 5] = [
        Region::Background,
        Region::GrayMatter,
        Region::WhiteMatter,
        Region::Blood,
        Region::Tumor,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Region::Background => "background",
            Region::GrayMatter => "gray_matter",
            Region::WhiteMatter => "white_matter",
            Region::Blood => "blood",
            Region::Tumor => "tumor",
        };
        f.write_str(s)
    }
}

impl FromStr for Region {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "background" => Ok(Region::Background),
            "gray_matter" => Ok(Region::GrayMatter),
            "white_matter" => Ok(Region::WhiteMatter),
            "blood" => Ok(Region::Blood),
            "tumor" => Ok(Region::Tumor),
            other => Err(Error::UnknownRegion(other.to_string())),
        }
    }
}

/// Per-pixel region labels on the phantom grid.
#[derive(Debug, Clone)]
pub struct RegionMap {
    width: usize,
    height: usize,
    pixel_size_mm: f64,
    labels: Vec<Region>,
}

impl RegionMap {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixel_size_mm(&self) -> f64 {
        self.pixel_size_mm
    }

    pub fn n_pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn labels(&self) -> &[Region] {
        &self.labels
    }

    #[inline]
    pub fn label(&self, index: usize) -> Region {
        self.labels[index]
    }

    /// Pixel count per region, indexed by `Region::index()`.
    pub fn region_counts(&self) -> [usize; 5] {
        let mut counts = [0usize; 5];
        for &l in &self.labels {
            counts[l.index()] += 1;
        }
        counts
    }

    /// Labels rendered as an image (value = region index), e.g. for export.
    pub fn label_image(&self) -> crate::Image2D {
        let values = self.labels.iter().map(|l| l.index() as f64).collect();
        crate::Image2D::new(self.width, self.height, self.pixel_size_mm, values)
            .expect("label raster is valid by construction")
    }

    /// Binary head mask (1 inside the head outline, 0 outside).
    pub fn head_mask(&self) -> crate::Image2D {
        let values = self
            .labels
            .iter()
            .map(|l| if *l == Region::Background { 0.0 } else { 1.0 })
            .collect();
        crate::Image2D::new(self.width, self.height, self.pixel_size_mm, values)
            .expect("mask raster is valid by construction")
    }
}

/// Geometry summary returned alongside the labels.
#[derive(Debug, Clone)]
pub struct PhantomReport {
    pub region_counts: [usize; 5],
    pub head_semi_axes_mm: (f64, f64),
    pub tumor_center_mm: (f64, f64),
    /// Flat pixel index of the tumor center (snapped to a pixel center).
    pub tumor_center_index: usize,
    pub tumor_diameter_px: f64,
    pub tumor_pixel_count: usize,
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let dx = (x - self.cx) / self.a;
        let dy = (y - self.cy) / self.b;
        dx * dx + dy * dy <= 1.0
    }
}

/// Build the head phantom on a `width` x `height` grid.
///
/// Coordinates are in mm with the origin at the grid center; pixel (ix, iy)
/// has its center at `((ix + 0.5) - width/2, (iy + 0.5) - height/2) * pixel_size`.
pub fn make_phantom(
    width: usize,
    height: usize,
    pixel_size_mm: f64,
) -> Result<(RegionMap, PhantomReport)> {
    if width < 32 || height < 32 {
        return Err(Error::InvalidParameter {
            name: "phantom dims",
            reason: format!("{width}x{height}: both must be >= 32"),
        });
    }
    if !(pixel_size_mm.is_finite() && pixel_size_mm > 0.0) {
        return Err(Error::InvalidParameter {
            name: "pixel_size_mm",
            reason: format!("{pixel_size_mm} must be positive and finite"),
        });
    }

    let half_w = width as f64 * pixel_size_mm / 2.0;
    let half_h = height as f64 * pixel_size_mm / 2.0;
    let head = Ellipse {
        cx: 0.0,
        cy: 0.0,
        a: HEAD_FRACTION * half_w,
        b: HEAD_FRACTION * half_h,
    };
    let white = Ellipse {
        cx: 0.0,
        cy: 0.0,
        a: WHITE_FRACTION * head.a,
        b: WHITE_FRACTION * head.b,
    };
    let blood = [
        Ellipse {
            cx: -BLOOD_CENTER.0 * head.a,
            cy: BLOOD_CENTER.1 * head.b,
            a: BLOOD_SEMI.0 * head.a,
            b: BLOOD_SEMI.1 * head.b,
        },
        Ellipse {
            cx: BLOOD_CENTER.0 * head.a,
            cy: BLOOD_CENTER.1 * head.b,
            a: BLOOD_SEMI.0 * head.a,
            b: BLOOD_SEMI.1 * head.b,
        },
    ];

    let tumor_radius = TUMOR_DIAMETER_MM / 2.0;
    let (tcx, tcy) = snap_to_pixel_center(
        TUMOR_CENTER.0 * head.a,
        TUMOR_CENTER.1 * head.b,
        width,
        height,
        pixel_size_mm,
    );

    // The 15 mm disc must sit fully inside the white matter interior and
    // clear of both blood pools.
    let n_probe = 720;
    for i in 0..n_probe {
        let phi = i as f64 / n_probe as f64 * std::f64::consts::TAU;
        let (px, py) = (tcx + tumor_radius * phi.cos(), tcy + tumor_radius * phi.sin());
        if !white.contains(px, py) {
            return Err(Error::PhantomSizing(format!(
                "{width}x{height} at {pixel_size_mm} mm/px cannot contain the {TUMOR_DIAMETER_MM} mm tumor inside white matter"
            )));
        }
        if blood.iter().any(|e| e.contains(px, py)) {
            return Err(Error::PhantomSizing(
                "tumor overlaps a blood pool".to_string(),
            ));
        }
    }

    let labels = par::map_collect(width * height, |idx| {
        let ix = idx % width;
        let iy = idx / width;
        let x = (ix as f64 + 0.5) * pixel_size_mm - half_w;
        let y = (iy as f64 + 0.5) * pixel_size_mm - half_h;
        let dxt = x - tcx;
        let dyt = y - tcy;
        if dxt * dxt + dyt * dyt <= tumor_radius * tumor_radius {
            Region::Tumor
        } else if blood.iter().any(|e| e.contains(x, y)) {
            Region::Blood
        } else if white.contains(x, y) {
            Region::WhiteMatter
        } else if head.contains(x, y) {
            Region::GrayMatter
        } else {
            Region::Background
        }
    });

    let map = RegionMap {
        width,
        height,
        pixel_size_mm,
        labels,
    };
    let counts = map.region_counts();
    let tix = ((tcx + half_w) / pixel_size_mm - 0.5).round() as usize;
    let tiy = ((tcy + half_h) / pixel_size_mm - 0.5).round() as usize;
    let report = PhantomReport {
        region_counts: counts,
        head_semi_axes_mm: (head.a, head.b),
        tumor_center_mm: (tcx, tcy),
        tumor_center_index: tiy * width + tix,
        tumor_diameter_px: TUMOR_DIAMETER_MM / pixel_size_mm,
        tumor_pixel_count: counts[Region::Tumor.index()],
    };
    Ok((map, report))
}

fn snap_to_pixel_center(
    x: f64,
    y: f64,
    width: usize,
    height: usize,
    pixel_size_mm: f64,
) -> (f64, f64) {
    let half_w = width as f64 * pixel_size_mm / 2.0;
    let half_h = height as f64 * pixel_size_mm / 2.0;
    let ix = (((x + half_w) / pixel_size_mm - 0.5).round()).clamp(0.0, width as f64 - 1.0);
    let iy = (((y + half_h) / pixel_size_mm - 0.5).round()).clamp(0.0, height as f64 - 1.0);
    (
        (ix + 0.5) * pixel_size_mm - half_w,
        (iy + 0.5) * pixel_size_mm - half_h,
    )
}
