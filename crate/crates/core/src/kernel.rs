//! Sparse row-stochastic kernel matrices built from per-pixel features.
//!
//! The construction chain is: feature extraction -> kNN neighborhoods in
//! feature space (restricted to a spatial window) -> Gaussian similarity
//! `s_jl = -||f_j - f_l||^2 / (2 sigma^2)` -> per-row softmax -> sparse
//! assembly. Each kernel row acts as an attention map over its pixel's
//! neighbors and sums to 1.

use std::io::{Read, Write};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::image::Image2D;
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureProvenance {
    /// Raw or standardized prior-image intensities.
    Intensity,
    /// Output of a trained feature-extraction network.
    Network,
}

/// Per-pixel feature rows: `n_pixels` x `n_features`, pixel-major.
#[derive(Debug, Clone)]
pub struct FeatureSet {
    width: usize,
    height: usize,
    pixel_size_mm: f64,
    n_features: usize,
    data: Vec<f64>,
    provenance: FeatureProvenance,
    /// Columns whose variance was exactly zero during standardization
    /// (centered only, scale left at 1).
    degenerate_columns: Vec<usize>,
}

impl FeatureSet {
    pub fn from_channels(channels: &[Image2D], provenance: FeatureProvenance) -> Result<Self> {
        let first = channels.first().ok_or_else(|| Error::InvalidParameter {
            name: "channels",
            reason: "at least one feature channel required".to_string(),
        })?;
        if !channels.iter().all(|c| c.same_dims(first)) {
            return Err(Error::DimensionMismatch {
                context: "feature channels",
                expected: format!("{}x{}", first.width(), first.height()),
                actual: "mixed dimensions".to_string(),
            });
        }
        let n_pixels = first.n_pixels();
        let n_features = channels.len();
        let mut data = vec![0.0; n_pixels * n_features];
        for (c, ch) in channels.iter().enumerate() {
            for (j, &v) in ch.values().iter().enumerate() {
                data[j * n_features + c] = v;
            }
        }
        Ok(FeatureSet {
            width: first.width(),
            height: first.height(),
            pixel_size_mm: first.pixel_size_mm(),
            n_features,
            data,
            provenance,
            degenerate_columns: Vec::new(),
        })
    }

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

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn provenance(&self) -> FeatureProvenance {
        self.provenance
    }

    pub fn degenerate_columns(&self) -> &[usize] {
        &self.degenerate_columns
    }

    #[inline]
    pub fn row(&self, j: usize) -> &[f64] {
        &self.data[j * self.n_features..(j + 1) * self.n_features]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Reshape feature columns back into per-channel images.
    pub fn to_channel_images(&self) -> Vec<Image2D> {
        (0..self.n_features)
            .map(|c| {
                let values = (0..self.n_pixels())
                    .map(|j| self.data[j * self.n_features + c])
                    .collect();
                Image2D::new(self.width, self.height, self.pixel_size_mm, values)
                    .expect("finite by construction")
            })
            .collect()
    }

    /// Center each column and scale it to unit population variance.
    /// Zero-variance columns are centered only and recorded.
    fn standardize(&mut self) {
        let n_p = self.n_pixels();
        self.degenerate_columns.clear();
        for c in 0..self.n_features {
            let mean = (0..n_p)
                .map(|j| self.data[j * self.n_features + c])
                .sum::<f64>()
                / n_p as f64;
            let var = (0..n_p)
                .map(|j| {
                    let d = self.data[j * self.n_features + c] - mean;
                    d * d
                })
                .sum::<f64>()
                / n_p as f64;
            let std = var.sqrt();
            let scale = if std == 0.0 {
                self.degenerate_columns.push(c);
                1.0
            } else {
                std
            };
            for j in 0..n_p {
                let v = &mut self.data[j * self.n_features + c];
                *v = (*v - mean) / scale;
            }
        }
    }

    #[inline]
    fn squared_distance(&self, a: usize, b: usize) -> f64 {
        let fa = self.row(a);
        let fb = self.row(b);
        fa.iter()
            .zip(fb)
            .map(|(x, y)| {
                let d = x - y;
                d * d
            })
            .sum()
    }
}

/// Stack prior images into per-pixel intensity features, one column per
/// prior, optionally standardized per column.
pub fn extract_intensity_features(priors: &[Image2D], standardize: bool) -> Result<FeatureSet> {
    let mut features = FeatureSet::from_channels(priors, FeatureProvenance::Intensity)?;
    if standardize {
        features.standardize();
    }
    Ok(features)
}

/// Incoming edges of the sparse pattern: for each pixel `l`, which (row,
/// slot) pairs reference it. Shared by every kernel built on the same
/// neighborhoods, and gives `K^T v` a deterministic gather form.
#[derive(Debug)]
pub struct TransposePlan {
    indptr: Vec<usize>,
    rows: Vec<u32>,
    slots: Vec<u32>,
}

impl TransposePlan {
    fn build(neighbors: &[u32], n_pixels: usize, k: usize) -> Self {
        let mut counts = vec![0usize; n_pixels + 1];
        for &l in neighbors {
            counts[l as usize + 1] += 1;
        }
        for j in 0..n_pixels {
            counts[j + 1] += counts[j];
        }
        let indptr = counts.clone();
        let mut rows = vec![0u32; neighbors.len()];
        let mut slots = vec![0u32; neighbors.len()];
        let mut cursor = counts;
        for j in 0..n_pixels {
            for slot in 0..k {
                let l = neighbors[j * k + slot] as usize;
                let dst = cursor[l];
                rows[dst] = j as u32;
                slots[dst] = slot as u32;
                cursor[l] += 1;
            }
        }
        TransposePlan {
            indptr,
            rows,
            slots,
        }
    }

    #[inline]
    pub fn incoming(&self, l: usize) -> impl Iterator<Item = (u32, u32)> + '_ {
        let (lo, hi) = (self.indptr[l], self.indptr[l + 1]);
        self.rows[lo..hi]
            .iter()
            .copied()
            .zip(self.slots[lo..hi].iter().copied())
    }
}

/// Fixed k-nearest-neighbor pattern: for each pixel `j`, `k` distinct
/// neighbor indices with `j` itself in slot 0.
#[derive(Debug, Clone)]
pub struct NeighborhoodGraph {
    width: usize,
    height: usize,
    pixel_size_mm: f64,
    k: usize,
    neighbors: Vec<u32>,
    transpose: Arc<TransposePlan>,
}

impl NeighborhoodGraph {
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

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn neighbors(&self) -> &[u32] {
        &self.neighbors
    }

    #[inline]
    pub fn row(&self, j: usize) -> &[u32] {
        &self.neighbors[j * self.k..(j + 1) * self.k]
    }

    pub fn transpose_plan(&self) -> &Arc<TransposePlan> {
        &self.transpose
    }
}

/// Exact kNN in feature space over a square spatial window.
///
/// `window` is the odd side length in pixels of the candidate window
/// centered at each pixel (clipped at the borders). The pixel itself is
/// always a neighbor; remaining slots take the k-1 smallest Euclidean
/// feature distances, ties broken by ascending pixel index.
pub fn knn_search(features: &FeatureSet, k: usize, window: usize) -> Result<NeighborhoodGraph> {
    let n_p = features.n_pixels();
    if k == 0 || k > n_p {
        return Err(Error::InvalidParameter {
            name: "k",
            reason: format!("{k} outside [1, {n_p}]"),
        });
    }
    if window == 0 || window % 2 == 0 {
        return Err(Error::InvalidParameter {
            name: "window",
            reason: format!("{window} must be odd and >= 1"),
        });
    }
    let width = features.width();
    let height = features.height();
    let radius = (window / 2) as isize;

    let rows: Vec<Result<Vec<u32>>> = par::map_collect(n_p, |j| {
        let cx = (j % width) as isize;
        let cy = (j / width) as isize;
        let x_lo = (cx - radius).max(0) as usize;
        let x_hi = (cx + radius).min(width as isize - 1) as usize;
        let y_lo = (cy - radius).max(0) as usize;
        let y_hi = (cy + radius).min(height as isize - 1) as usize;
        let n_cand = (x_hi - x_lo + 1) * (y_hi - y_lo + 1);
        if k > n_cand {
            return Err(Error::KnnWindowTooSmall {
                k,
                candidates: n_cand,
                pixel: j,
            });
        }
        let mut cand: Vec<(f64, u32)> = Vec::with_capacity(n_cand);
        for y in y_lo..=y_hi {
            for x in x_lo..=x_hi {
                let idx = y * width + x;
                if idx != j {
                    cand.push((features.squared_distance(j, idx), idx as u32));
                }
            }
        }
        cand.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut row = Vec::with_capacity(k);
        row.push(j as u32);
        row.extend(cand.iter().take(k - 1).map(|&(_, idx)| idx));
        Ok(row)
    });

    let mut neighbors = Vec::with_capacity(n_p * k);
    for row in rows {
        neighbors.extend(row?);
    }
    let transpose = Arc::new(TransposePlan::build(&neighbors, n_p, k));
    Ok(NeighborhoodGraph {
        width,
        height,
        pixel_size_mm: features.pixel_size_mm(),
        k,
        neighbors,
        transpose,
    })
}

/// An `n_pixels` x `k` table aligned with a graph's neighbor slots
/// (similarities or softmax weights).
#[derive(Debug, Clone, PartialEq)]
pub struct PairTable {
    n_pixels: usize,
    k: usize,
    values: Vec<f64>,
}

impl PairTable {
    pub fn new(n_pixels: usize, k: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n_pixels * k {
            return Err(Error::DimensionMismatch {
                context: "PairTable",
                expected: format!("{} values", n_pixels * k),
                actual: format!("{}", values.len()),
            });
        }
        Ok(PairTable {
            n_pixels,
            k,
            values,
        })
    }

    pub fn n_pixels(&self) -> usize {
        self.n_pixels
    }

    pub fn k(&self) -> usize {
        self.k
    }

    #[inline]
    pub fn row(&self, j: usize) -> &[f64] {
        &self.values[j * self.k..(j + 1) * self.k]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Gaussian log-similarities `s_jl = -||f_j - f_l||^2 / (2 sigma^2)` for
/// every graph edge.
pub fn pairwise_similarity(
    features: &FeatureSet,
    graph: &NeighborhoodGraph,
    sigma: f64,
) -> Result<PairTable> {
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::InvalidParameter {
            name: "sigma",
            reason: format!("{sigma} must be > 0"),
        });
    }
    if features.n_pixels() != graph.n_pixels() {
        return Err(Error::DimensionMismatch {
            context: "pairwise_similarity",
            expected: format!("{} pixels", graph.n_pixels()),
            actual: format!("{}", features.n_pixels()),
        });
    }
    let k = graph.k();
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut values = vec![0.0; features.n_pixels() * k];
    par::for_each_chunk_mut(&mut values, k, |j, row| {
        for (slot, &l) in graph.row(j).iter().enumerate() {
            row[slot] = -features.squared_distance(j, l as usize) * inv;
        }
    });
    PairTable::new(features.n_pixels(), k, values)
}

/// Per-row softmax with max subtraction; every output row sums to 1.
pub fn softmax_normalize(similarities: &PairTable) -> PairTable {
    let k = similarities.k();
    let mut values = vec![0.0; similarities.values().len()];
    par::for_each_chunk_mut(&mut values, k, |j, row| {
        let s = similarities.row(j);
        let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (slot, &v) in s.iter().enumerate() {
            let e = (v - max).exp();
            row[slot] = e;
            sum += e;
        }
        for w in row.iter_mut() {
            *w /= sum;
        }
    });
    PairTable::new(similarities.n_pixels(), k, values).expect("same shape as input")
}

/// Row-compressed `n_p x n_p` kernel matrix with exactly `k` entries per
/// row; all weights nonnegative, each row summing to 1.
#[derive(Debug, Clone)]
pub struct SparseKernelMatrix {
    width: usize,
    height: usize,
    pixel_size_mm: f64,
    k: usize,
    indices: Vec<u32>,
    weights: Vec<f64>,
    transpose: Arc<TransposePlan>,
}

/// Guard for obviously broken rows at construction; the published row-sum
/// invariant (1e-12) is asserted by tests on real constructions.
const ROW_SUM_GUARD: f64 = 1e-9;

impl SparseKernelMatrix {
    pub fn new(
        width: usize,
        height: usize,
        pixel_size_mm: f64,
        k: usize,
        indices: Vec<u32>,
        weights: Vec<f64>,
    ) -> Result<Self> {
        let n_p = width * height;
        if indices.len() != n_p * k || weights.len() != n_p * k {
            return Err(Error::DimensionMismatch {
                context: "SparseKernelMatrix",
                expected: format!("{} entries", n_p * k),
                actual: format!("{} indices / {} weights", indices.len(), weights.len()),
            });
        }
        if indices.iter().any(|&i| i as usize >= n_p) {
            return Err(Error::PixelOutOfRange {
                index: indices.iter().map(|&i| i as usize).max().unwrap_or(0),
                n_p,
            });
        }
        for j in 0..n_p {
            let row = &weights[j * k..(j + 1) * k];
            if !row.iter().all(|&w| w.is_finite() && w >= 0.0) {
                return Err(Error::Negative("kernel weights"));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_GUARD {
                return Err(Error::InvalidParameter {
                    name: "kernel row sum",
                    reason: format!("row {j} sums to {sum}"),
                });
            }
        }
        let transpose = Arc::new(TransposePlan::build(&indices, n_p, k));
        Ok(SparseKernelMatrix {
            width,
            height,
            pixel_size_mm,
            k,
            indices,
            weights,
            transpose,
        })
    }

    /// Assemble from softmax weights and the neighborhood pattern.
    pub fn assemble(weights: &PairTable, graph: &NeighborhoodGraph) -> Result<Self> {
        if weights.n_pixels() != graph.n_pixels() || weights.k() != graph.k() {
            return Err(Error::DimensionMismatch {
                context: "assemble_kernel",
                expected: format!("{} x {}", graph.n_pixels(), graph.k()),
                actual: format!("{} x {}", weights.n_pixels(), weights.k()),
            });
        }
        let n_p = graph.n_pixels();
        let k = graph.k();
        for j in 0..n_p {
            let row = weights.row(j);
            if !row.iter().all(|&w| w.is_finite() && w >= 0.0) {
                return Err(Error::Negative("kernel weights"));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_GUARD {
                return Err(Error::InvalidParameter {
                    name: "kernel row sum",
                    reason: format!("row {j} sums to {sum}"),
                });
            }
        }
        Ok(SparseKernelMatrix {
            width: graph.width(),
            height: graph.height(),
            pixel_size_mm: graph.pixel_size_mm(),
            k,
            indices: graph.neighbors().to_vec(),
            weights: weights.values().to_vec(),
            transpose: Arc::clone(graph.transpose_plan()),
        })
    }

    /// The identity matrix (k = 1, unit self-weights): plain per-pixel EM.
    pub fn identity(width: usize, height: usize, pixel_size_mm: f64) -> Self {
        let n_p = width * height;
        let indices: Vec<u32> = (0..n_p as u32).collect();
        let weights = vec![1.0; n_p];
        let transpose = Arc::new(TransposePlan::build(&indices, n_p, 1));
        SparseKernelMatrix {
            width,
            height,
            pixel_size_mm,
            k: 1,
            indices,
            weights,
            transpose,
        }
    }

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

    pub fn k(&self) -> usize {
        self.k
    }

    #[inline]
    pub fn row(&self, j: usize) -> (&[u32], &[f64]) {
        let (lo, hi) = (j * self.k, (j + 1) * self.k);
        (&self.indices[lo..hi], &self.weights[lo..hi])
    }

    pub(crate) fn matvec_values(&self, v: &[f64]) -> Vec<f64> {
        let k = self.k;
        let indices = &self.indices;
        let weights = &self.weights;
        par::map_collect(self.n_pixels(), |j| {
            let (lo, hi) = (j * k, (j + 1) * k);
            indices[lo..hi]
                .iter()
                .zip(&weights[lo..hi])
                .map(|(&l, &w)| w * v[l as usize])
                .sum()
        })
    }

    pub(crate) fn rmatvec_values(&self, v: &[f64]) -> Vec<f64> {
        let k = self.k;
        let weights = &self.weights;
        let plan = &self.transpose;
        par::map_collect(self.n_pixels(), |l| {
            plan.incoming(l)
                .map(|(row, slot)| weights[row as usize * k + slot as usize] * v[row as usize])
                .sum()
        })
    }

    fn check_len(&self, v: &Image2D, context: &'static str) -> Result<()> {
        if v.n_pixels() != self.n_pixels() {
            return Err(Error::DimensionMismatch {
                context: "kernel matvec",
                expected: format!("{} pixels", self.n_pixels()),
                actual: format!("{} ({context})", v.n_pixels()),
            });
        }
        Ok(())
    }

    /// `K v` (sparse row-wise product).
    pub fn matvec(&self, v: &Image2D) -> Result<Image2D> {
        self.check_len(v, "matvec input")?;
        Image2D::new(
            self.width,
            self.height,
            self.pixel_size_mm,
            self.matvec_values(v.values()),
        )
    }

    /// `K^T v` (exact transpose product).
    pub fn rmatvec(&self, v: &Image2D) -> Result<Image2D> {
        self.check_len(v, "rmatvec input")?;
        Image2D::new(
            self.width,
            self.height,
            self.pixel_size_mm,
            self.rmatvec_values(v.values()),
        )
    }

    /// Row `j` rendered as an image: pixel `l` holds `K[j, l]`.
    pub fn attention_map(&self, j: usize) -> Result<Image2D> {
        if j >= self.n_pixels() {
            return Err(Error::PixelOutOfRange {
                index: j,
                n_p: self.n_pixels(),
            });
        }
        let mut values = vec![0.0; self.n_pixels()];
        let (indices, weights) = self.row(j);
        for (&l, &w) in indices.iter().zip(weights) {
            values[l as usize] = w;
        }
        Image2D::new(self.width, self.height, self.pixel_size_mm, values)
    }

    /// Binary row-compressed serialization: u32-LE `n_p`, u32-LE `k`, then
    /// per row `k` u32-LE neighbor indices followed by `k` f64-LE weights.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(&(self.n_pixels() as u32).to_le_bytes())?;
        w.write_all(&(self.k as u32).to_le_bytes())?;
        for j in 0..self.n_pixels() {
            let (indices, weights) = self.row(j);
            for &i in indices {
                w.write_all(&i.to_le_bytes())?;
            }
            for &v in weights {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Inverse of [`write_to`]; image geometry is not stored in the file
    /// and must be supplied by the caller.
    pub fn read_from(
        mut r: impl Read,
        width: usize,
        height: usize,
        pixel_size_mm: f64,
    ) -> Result<Self> {
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf)?;
        let n_p = u32::from_le_bytes(u32buf) as usize;
        r.read_exact(&mut u32buf)?;
        let k = u32::from_le_bytes(u32buf) as usize;
        if n_p != width * height {
            return Err(Error::Format(format!(
                "kernel file has {n_p} pixels, expected {}",
                width * height
            )));
        }
        if k == 0 || k > n_p {
            return Err(Error::Format(format!("kernel file k = {k} out of range")));
        }
        let mut indices = Vec::with_capacity(n_p * k);
        let mut weights = Vec::with_capacity(n_p * k);
        let mut f64buf = [0u8; 8];
        for _ in 0..n_p {
            for _ in 0..k {
                r.read_exact(&mut u32buf)?;
                indices.push(u32::from_le_bytes(u32buf));
            }
            for _ in 0..k {
                r.read_exact(&mut f64buf)?;
                weights.push(f64::from_le_bytes(f64buf));
            }
        }
        Self::new(width, height, pixel_size_mm, k, indices, weights)
    }
}

/// `K v` directly from a weight table and graph, without assembling a
/// matrix. Used by the training loop where weights change every iteration.
pub(crate) fn weighted_matvec(graph: &NeighborhoodGraph, weights: &PairTable, v: &[f64]) -> Vec<f64> {
    par::map_collect(graph.n_pixels(), |j| {
        graph
            .row(j)
            .iter()
            .zip(weights.row(j))
            .map(|(&l, &w)| w * v[l as usize])
            .sum()
    })
}
