//! The trainable kernel.
//!
//! A small residual convolutional network extracts per-pixel features from
//! the prior stack; the features feed the same similarity -> softmax ->
//! sparse-assembly pipeline as the empirical kernel. The network is trained
//! on a denoising-autoencoder objective
//!
//! ```text
//! L(theta) = sum_m || z_m - K(theta; Z) z~_m ||^2
//! ```
//!
//! where `z_m` are composite-frame reconstructions and `z~_m` their
//! low-count (binomially thinned) counterparts. Gradients are exact
//! analytic chain-rule derivatives; the kNN pattern is computed once from
//! intensity features and held fixed, which keeps the loss differentiable.

mod net;
mod train;

pub use net::{ActivationCache, ConvSpec, FeatureNetwork, NetworkArchitecture, NetworkOutput};
pub use train::{train, OptimizerKind, TrainOutput, TrainSettings};

use rand_distr::{Binomial, Distribution};

use crate::error::{Error, Result};
use crate::image::Image2D;
use crate::kernel::{
    pairwise_similarity, softmax_normalize, weighted_matvec, NeighborhoodGraph, PairTable,
    SparseKernelMatrix,
};
use crate::par;
use crate::projector::{element_rng, Sinogram, SystemModel};
use crate::recon::{reconstruct, ReconSettings};

/// A (target, corrupted) image pair for the autoencoder loss.
#[derive(Debug, Clone)]
pub struct TrainingPair {
    pub target: Image2D,
    pub corrupted: Image2D,
}

impl TrainingPair {
    pub fn new(target: Image2D, corrupted: Image2D) -> Result<Self> {
        if !target.same_dims(&corrupted) {
            return Err(Error::DimensionMismatch {
                context: "TrainingPair",
                expected: format!("{}x{}", target.width(), target.height()),
                actual: format!("{}x{}", corrupted.width(), corrupted.height()),
            });
        }
        target.require_nonnegative("TrainingPair target")?;
        corrupted.require_nonnegative("TrainingPair corrupted")?;
        Ok(TrainingPair { target, corrupted })
    }
}

/// Binomial thinning: every count is replaced by `Binomial(count, 1/d)`,
/// reducing the expected total by the factor `d`. Element `i` draws from
/// its own seeded stream, so results are schedule-independent.
pub fn thin_counts(counts: &Sinogram, d: f64, seed: u64) -> Result<Sinogram> {
    if !(d.is_finite() && d > 1.0) {
        return Err(Error::InvalidParameter {
            name: "d",
            reason: format!("count reduction factor {d} must be > 1"),
        });
    }
    for (i, &v) in counts.values().iter().enumerate() {
        if v < 0.0 || v.fract() != 0.0 || !v.is_finite() {
            return Err(Error::NonIntegerCounts { index: i, value: v });
        }
    }
    let p = 1.0 / d;
    let vals = counts.values();
    let values = par::map_collect(counts.n_elements(), |i| {
        let n = vals[i] as u64;
        if n == 0 {
            return 0.0;
        }
        let mut rng = element_rng(seed, i as u64);
        let dist = Binomial::new(n, p).expect("valid binomial parameters");
        dist.sample(&mut rng) as f64
    });
    Sinogram::new(counts.n_angles(), counts.n_bins(), values)
}

/// Deep kernel `K(theta; Z)`: network features pushed through the
/// similarity/softmax/assembly pipeline on a fixed neighborhood pattern.
pub fn build_deep_kernel(
    network: &FeatureNetwork,
    prior_channels: &[Image2D],
    graph: &NeighborhoodGraph,
    sigma: f64,
) -> Result<SparseKernelMatrix> {
    let out = network.forward(prior_channels)?;
    let similarities = pairwise_similarity(&out.features, graph, sigma)?;
    let weights = softmax_normalize(&similarities);
    SparseKernelMatrix::assemble(&weights, graph)
}

fn check_pairs(graph: &NeighborhoodGraph, pairs: &[TrainingPair]) -> Result<()> {
    if pairs.is_empty() {
        return Err(Error::InvalidParameter {
            name: "pairs",
            reason: "at least one training pair required".to_string(),
        });
    }
    for p in pairs {
        if p.target.n_pixels() != graph.n_pixels() {
            return Err(Error::DimensionMismatch {
                context: "training pair",
                expected: format!("{} pixels", graph.n_pixels()),
                actual: format!("{}", p.target.n_pixels()),
            });
        }
    }
    Ok(())
}

/// Denoising-autoencoder loss `sum_m || z_m - K(theta; Z) z~_m ||^2`.
pub fn dae_loss(
    network: &FeatureNetwork,
    prior_channels: &[Image2D],
    graph: &NeighborhoodGraph,
    sigma: f64,
    pairs: &[TrainingPair],
) -> Result<f64> {
    check_pairs(graph, pairs)?;
    let out = network.forward(prior_channels)?;
    let similarities = pairwise_similarity(&out.features, graph, sigma)?;
    let weights = softmax_normalize(&similarities);
    Ok(loss_from_weights(graph, &weights, pairs))
}

fn loss_from_weights(graph: &NeighborhoodGraph, weights: &PairTable, pairs: &[TrainingPair]) -> f64 {
    pairs
        .iter()
        .map(|pair| {
            let denoised = weighted_matvec(graph, weights, pair.corrupted.values());
            pair.target
                .values()
                .iter()
                .zip(&denoised)
                .map(|(t, d)| {
                    let r = t - d;
                    r * r
                })
                .sum::<f64>()
        })
        .sum()
}

/// Exact analytic gradient of [`dae_loss`] w.r.t. the network parameters.
///
/// Chain: residuals -> dL/dW -> softmax Jacobian per row -> similarity
/// derivatives `ds/df_j = -(f_j - f_l)/sigma^2`, `ds/df_l = +(f_j - f_l)/sigma^2`
/// (both endpoints accumulate, the l-side through the graph's transpose
/// plan so the reduction order is fixed) -> convolution backprop.
pub fn loss_gradient(
    network: &FeatureNetwork,
    prior_channels: &[Image2D],
    graph: &NeighborhoodGraph,
    sigma: f64,
    pairs: &[TrainingPair],
) -> Result<Vec<f64>> {
    check_pairs(graph, pairs)?;
    let out = network.forward(prior_channels)?;
    let features = &out.features;
    let similarities = pairwise_similarity(features, graph, sigma)?;
    let weights = softmax_normalize(&similarities);

    let n_p = graph.n_pixels();
    let k = graph.k();

    // dL/dW[j, slot] = sum_m -2 resid_m[j] * z~_m[neighbor].
    let mut grad_w = vec![0.0; n_p * k];
    for pair in pairs {
        let corrupted = pair.corrupted.values();
        let denoised = weighted_matvec(graph, &weights, corrupted);
        let target = pair.target.values();
        par::for_each_chunk_mut(&mut grad_w, k, |j, row| {
            let resid = target[j] - denoised[j];
            for (slot, &l) in graph.row(j).iter().enumerate() {
                row[slot] += -2.0 * resid * corrupted[l as usize];
            }
        });
    }

    // Softmax Jacobian per row: dL/dS = W .* (dL/dW - <dL/dW, W>).
    let mut grad_s = vec![0.0; n_p * k];
    par::for_each_chunk_mut(&mut grad_s, k, |j, row| {
        let w = weights.row(j);
        let gw = &grad_w[j * k..(j + 1) * k];
        let dot: f64 = w.iter().zip(gw).map(|(a, b)| a * b).sum();
        for slot in 0..k {
            row[slot] = w[slot] * (gw[slot] - dot);
        }
    });

    // Feature gradients, query side then key side (gather form for both).
    let n_f = features.n_features();
    let inv_sigma2 = 1.0 / (sigma * sigma);
    let mut grad_f = vec![0.0; n_p * n_f];
    par::for_each_chunk_mut(&mut grad_f, n_f, |j, gj| {
        let fj = features.row(j);
        for (slot, &l) in graph.row(j).iter().enumerate() {
            let gs = grad_s[j * k + slot];
            if gs == 0.0 {
                continue;
            }
            let fl = features.row(l as usize);
            for c in 0..n_f {
                gj[c] += -gs * (fj[c] - fl[c]) * inv_sigma2;
            }
        }
    });
    let plan = graph.transpose_plan().clone();
    let mut grad_f_key = vec![0.0; n_p * n_f];
    par::for_each_chunk_mut(&mut grad_f_key, n_f, |l, gl| {
        let fl = features.row(l);
        for (row, slot) in plan.incoming(l) {
            let j = row as usize;
            let gs = grad_s[j * k + slot as usize];
            if gs == 0.0 {
                continue;
            }
            let fj = features.row(j);
            for c in 0..n_f {
                gl[c] += gs * (fj[c] - fl[c]) * inv_sigma2;
            }
        }
    });
    for (a, b) in grad_f.iter_mut().zip(&grad_f_key) {
        *a += b;
    }

    // Reshape (pixel-major) feature gradients into channel images.
    let grad_channels: Vec<Vec<f64>> = (0..n_f)
        .map(|c| (0..n_p).map(|j| grad_f[j * n_f + c]).collect())
        .collect();
    network.backward(&out.cache, &grad_channels)
}

/// Reconstruct each composite with its known background.
pub fn reconstruct_composites(
    composites: &[Sinogram],
    backgrounds: &[Sinogram],
    model: &SystemModel,
    kernel: &SparseKernelMatrix,
    settings: &ReconSettings,
) -> Result<Vec<Image2D>> {
    if composites.len() != backgrounds.len() {
        return Err(Error::DimensionMismatch {
            context: "composite backgrounds",
            expected: format!("{}", composites.len()),
            actual: format!("{}", backgrounds.len()),
        });
    }
    composites
        .iter()
        .zip(backgrounds)
        .map(|(y, r)| Ok(reconstruct(y, r, model, kernel, settings, None)?.activity))
        .collect()
}

/// Build (target, corrupted) pairs from composite count data: targets are
/// full-count reconstructions, corrupted images are reconstructions of
/// `Binomial(y, 1/d)`-thinned data under the matching thinned model
/// (system factors and background both divided by `d`).
pub fn make_training_pairs(
    composites: &[Sinogram],
    backgrounds: &[Sinogram],
    model: &SystemModel,
    kernel: &SparseKernelMatrix,
    settings: &ReconSettings,
    d: f64,
    seed: u64,
) -> Result<Vec<TrainingPair>> {
    let targets = reconstruct_composites(composites, backgrounds, model, kernel, settings)?;

    let thinned: Vec<Sinogram> = composites
        .iter()
        .enumerate()
        .map(|(m, y)| thin_counts(y, d, crate::projector::derive_seed(seed, SEED_TAG_THIN, m as u64)))
        .collect::<Result<_>>()?;
    let thin_factors: Vec<f64> = model.factors().iter().map(|f| f / d).collect();
    let thin_model = model.with_factors(thin_factors)?;
    let thin_backgrounds: Vec<Sinogram> =
        backgrounds.iter().map(|r| r.map(|v| v / d)).collect();
    let corrupted =
        reconstruct_composites(&thinned, &thin_backgrounds, &thin_model, kernel, settings)?;

    targets
        .into_iter()
        .zip(corrupted)
        .map(|(t, c)| TrainingPair::new(t, c))
        .collect()
}

/// Seed tag for thinning streams (see `projector::derive_seed`).
pub const SEED_TAG_THIN: u64 = 0x7468;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{extract_intensity_features, knn_search};

    fn tiny_instance() -> (Vec<Image2D>, NeighborhoodGraph) {
        // 3x3 pixels, two prior channels with mixed structure.
        let z0 = Image2D::new(
            3,
            3,
            1.0,
            vec![0.1, 0.9, 0.2, 0.8, 0.15, 0.85, 0.3, 0.7, 0.25],
        )
        .unwrap();
        let z1 = Image2D::new(
            3,
            3,
            1.0,
            vec![1.0, 0.2, 0.9, 0.3, 1.1, 0.1, 0.8, 0.4, 0.95],
        )
        .unwrap();
        let features = extract_intensity_features(&[z0, z1], true).unwrap();
        let graph = knn_search(&features, 3, 7).unwrap();
        let channels = features.to_channel_images();
        (channels, graph)
    }

    fn tiny_pairs(channels: &[Image2D]) -> Vec<TrainingPair> {
        let target = channels[0].map(|v| v.abs() + 0.2);
        let corrupted = Image2D::new(
            3,
            3,
            1.0,
            target
                .values()
                .iter()
                .enumerate()
                .map(|(i, v)| v * (1.0 + 0.3 * ((i as f64 * 2.7).sin())))
                .collect(),
        )
        .unwrap();
        vec![TrainingPair::new(target, corrupted).unwrap()]
    }

    #[test]
    fn zero_theta_deep_kernel_equals_empirical_kernel() {
        let (channels, graph) = tiny_instance();
        let net =
            FeatureNetwork::new(NetworkArchitecture::desk_default(channels.len(), 4)).unwrap();
        let deep = build_deep_kernel(&net, &channels, &graph, 1.0).unwrap();

        let features = extract_intensity_features(&channels, false).unwrap();
        let sims = pairwise_similarity(&features, &graph, 1.0).unwrap();
        let weights = softmax_normalize(&sims);
        let empirical = SparseKernelMatrix::assemble(&weights, &graph).unwrap();

        for j in 0..graph.n_pixels() {
            let (di, dw) = deep.row(j);
            let (ei, ew) = empirical.row(j);
            assert_eq!(di, ei);
            for (a, b) in dw.iter().zip(ew) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn deep_kernel_rows_sum_to_one_for_any_theta() {
        let (channels, graph) = tiny_instance();
        let mut net =
            FeatureNetwork::new(NetworkArchitecture::desk_default(channels.len(), 4)).unwrap();
        for seed in [1, 2, 3] {
            net.init_uniform(seed);
            let kern = build_deep_kernel(&net, &channels, &graph, 1.0).unwrap();
            for j in 0..graph.n_pixels() {
                let sum: f64 = kern.row(j).1.iter().sum();
                assert!((sum - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn deep_kernel_is_linear_in_alpha() {
        let (channels, graph) = tiny_instance();
        let mut net =
            FeatureNetwork::new(NetworkArchitecture::desk_default(channels.len(), 4)).unwrap();
        net.init_uniform(5);
        let kern = build_deep_kernel(&net, &channels, &graph, 1.0).unwrap();
        let a1 = channels[0].map(|v| v + 1.0);
        let a2 = channels[1].map(|v| 2.0 * v - 0.5);
        let combo = Image2D::new(
            3,
            3,
            1.0,
            a1.values()
                .iter()
                .zip(a2.values())
                .map(|(u, v)| 1.3 * u - 0.7 * v)
                .collect(),
        )
        .unwrap();
        let lhs = kern.matvec(&combo).unwrap();
        let k1 = kern.matvec(&a1).unwrap();
        let k2 = kern.matvec(&a2).unwrap();
        for j in 0..9 {
            let rhs = 1.3 * k1.values()[j] - 0.7 * k2.values()[j];
            assert!((lhs.values()[j] - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn dae_loss_zero_cases() {
        let (channels, graph) = tiny_instance();
        let net =
            FeatureNetwork::new(NetworkArchitecture::desk_default(channels.len(), 4)).unwrap();

        // Constant target and corrupted: any row-stochastic K preserves
        // constants, so the loss is 0 for any theta.
        let c = Image2D::constant(3, 3, 1.0, 2.5).unwrap();
        let pairs = vec![TrainingPair::new(c.clone(), c).unwrap()];
        let loss = dae_loss(&net, &channels, &graph, 1.0, &pairs).unwrap();
        assert!(loss < 1e-24, "loss {loss}");
    }

    #[test]
    fn dae_loss_matches_dense_oracle() {
        let (channels, graph) = tiny_instance();
        let mut net =
            FeatureNetwork::new(NetworkArchitecture::desk_default(channels.len(), 4)).unwrap();
        net.init_uniform(9);
        let pairs = tiny_pairs(&channels);
        let loss = dae_loss(&net, &channels, &graph, 1.0, &pairs).unwrap();

        // Dense oracle: build the full kernel row by row from the network
        // features, then evaluate the loss with dense arithmetic.
        let feats = net.forward(&channels).unwrap().features;
        let mut dense = vec![vec![0.0; 9]; 9];
        for j in 0..9 {
            let fj = feats.row(j);
            let mut denom = 0.0;
            for &l in graph.row(j) {
                let fl = feats.row(l as usize);
                let d2: f64 = fj.iter().zip(fl).map(|(a, b)| (a - b) * (a - b)).sum();
                denom += (-d2 / 2.0).exp();
            }
            for &l in graph.row(j) {
                let fl = feats.row(l as usize);
                let d2: f64 = fj.iter().zip(fl).map(|(a, b)| (a - b) * (a - b)).sum();
                dense[j][l as usize] = (-d2 / 2.0).exp() / denom;
            }
        }
        let mut oracle = 0.0;
        for pair in &pairs {
            for j in 0..9 {
                let kv: f64 = (0..9)
                    .map(|l| dense[j][l] * pair.corrupted.values()[l])
                    .sum();
                oracle += (pair.target.values()[j] - kv).powi(2);
            }
        }
        assert!((loss - oracle).abs() < 1e-12, "{loss} vs {oracle}");
    }

    #[test]
    fn gradient_matches_central_finite_differences() {
        let (channels, graph) = tiny_instance();
        let pairs = tiny_pairs(&channels);
        let sigma = 1.0;
        for seed in [1, 7, 42] {
            let mut net =
                FeatureNetwork::new(NetworkArchitecture::desk_default(channels.len(), 3))
                    .unwrap();
            net.init_uniform(seed);
            let analytic = loss_gradient(&net, &channels, &graph, sigma, &pairs).unwrap();
            let g_inf = analytic.iter().fold(0.0f64, |m, g| m.max(g.abs()));
            let floor = 1e-6 * g_inf.max(1.0);
            let h = 1e-4;
            for i in 0..net.n_params() {
                let mut plus = net.clone();
                plus.params_mut()[i] += h;
                let mut minus = net.clone();
                minus.params_mut()[i] -= h;
                let fd = (dae_loss(&plus, &channels, &graph, sigma, &pairs).unwrap()
                    - dae_loss(&minus, &channels, &graph, sigma, &pairs).unwrap())
                    / (2.0 * h);
                let denom = fd.abs().max(analytic[i].abs()).max(floor);
                let rel = (analytic[i] - fd).abs() / denom;
                assert!(
                    rel < 1e-4,
                    "seed {seed} param {i}: analytic {} vs fd {fd} (rel {rel:.2e})",
                    analytic[i]
                );
            }
        }
    }

    #[test]
    fn gradient_is_zero_at_zero_residual() {
        let (channels, graph) = tiny_instance();
        let net =
            FeatureNetwork::new(NetworkArchitecture::desk_default(channels.len(), 4)).unwrap();
        // K preserves constants, so (c, c) pairs give zero residuals.
        let c = Image2D::constant(3, 3, 1.0, 1.75).unwrap();
        let pairs = vec![TrainingPair::new(c.clone(), c).unwrap()];
        let grad = loss_gradient(&net, &channels, &graph, 1.0, &pairs).unwrap();
        for (i, g) in grad.iter().enumerate() {
            assert!(g.abs() < 1e-12, "param {i}: {g}");
        }
    }

    #[test]
    fn softmax_row_gradients_annihilate_constants() {
        // sum over a row of dL/dS must vanish: shifting a whole row of
        // similarities by a constant cannot change the loss.
        let (channels, graph) = tiny_instance();
        let mut net =
            FeatureNetwork::new(NetworkArchitecture::desk_default(channels.len(), 4)).unwrap();
        net.init_uniform(13);
        let pairs = tiny_pairs(&channels);
        let out = net.forward(&channels).unwrap();
        let sims = pairwise_similarity(&out.features, &graph, 1.0).unwrap();
        let weights = softmax_normalize(&sims);
        let k = graph.k();

        let mut grad_w = vec![0.0; graph.n_pixels() * k];
        for pair in &pairs {
            let corrupted = pair.corrupted.values();
            let denoised = weighted_matvec(&graph, &weights, corrupted);
            for j in 0..graph.n_pixels() {
                let resid = pair.target.values()[j] - denoised[j];
                for (slot, &l) in graph.row(j).iter().enumerate() {
                    grad_w[j * k + slot] += -2.0 * resid * corrupted[l as usize];
                }
            }
        }
        for j in 0..graph.n_pixels() {
            let w = weights.row(j);
            let gw = &grad_w[j * k..(j + 1) * k];
            let dot: f64 = w.iter().zip(gw).map(|(a, b)| a * b).sum();
            let row_sum: f64 = (0..k).map(|slot| w[slot] * (gw[slot] - dot)).sum();
            assert!(row_sum.abs() < 1e-10, "row {j}: {row_sum}");
        }
    }

    #[test]
    fn thinning_statistics_and_determinism() {
        let counts = Sinogram::new(40, 50, vec![400.0; 2000]).unwrap(); // 8e5 total
        let thinned = thin_counts(&counts, 10.0, 7).unwrap();
        let total = thinned.total_counts();
        let bound = 3.0 * (8e5 * 0.1 * 0.9f64).sqrt();
        assert!((total - 8e4).abs() <= bound, "total {total}");
        assert!(thinned
            .values()
            .iter()
            .zip(counts.values())
            .all(|(t, c)| *t >= 0.0 && t <= c && t.fract() == 0.0));
        let again = thin_counts(&counts, 10.0, 7).unwrap();
        assert_eq!(thinned.values(), again.values());

        let zero = Sinogram::zeros(4, 4);
        assert!(thin_counts(&zero, 10.0, 0).unwrap().values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn thinning_validates_inputs() {
        let counts = Sinogram::new(1, 2, vec![3.0, 4.0]).unwrap();
        assert!(thin_counts(&counts, 1.0, 0).is_err());
        assert!(thin_counts(&counts, 0.5, 0).is_err());
        let frac = Sinogram::new(1, 2, vec![3.5, 4.0]).unwrap();
        assert!(thin_counts(&frac, 10.0, 0).is_err());
        // d = 2 halves expected counts.
        let big = Sinogram::new(10, 100, vec![1000.0; 1000]).unwrap();
        let half = thin_counts(&big, 2.0, 3).unwrap();
        let bound = 3.0 * (1e6 * 0.25f64).sqrt();
        assert!((half.total_counts() - 5e5).abs() <= bound);
    }
}
