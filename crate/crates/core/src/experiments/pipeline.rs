//! Simulation and reconstruction orchestration.
//!
//! `run_pipeline` drives the full chain (phantom -> projections -> counts
//! -> composites -> kernels -> training -> per-frame reconstruction ->
//! metrics and attention maps), writing every artifact under the config's
//! output directory. The individual stage functions are public so the CLI
//! can run them one at a time against artifacts on disk.

use std::path::{Path, PathBuf};

use crate::deepkernel::{
    build_deep_kernel, make_training_pairs, train, FeatureNetwork, NetworkArchitecture,
    TrainSettings, TrainingPair,
};
use crate::error::{Error, Result, StageExt};
use crate::image::Image2D;
use crate::imaging::{integrate_frames, make_phantom, DynamicImageSet, PhantomReport, Region, RegionMap};
use crate::kernel::{
    extract_intensity_features, knn_search, pairwise_similarity, softmax_normalize, FeatureSet,
    NeighborhoodGraph, SparseKernelMatrix,
};
use crate::par;
use crate::projector::{
    derive_seed, expected_data, sample_poisson, scale_to_counts, Sinogram,
    SystemModel,
};
use crate::recon::{rebin_composite, reconstruct, ReconOutput};

use super::config::{AttentionPixels, CorruptedRecon, ExperimentConfig};
use super::io;
use super::metrics::{snr_db, MetricsReport};
use super::Method;

/// Seed tag for per-frame Poisson streams.
pub const SEED_TAG_POISSON: u64 = 0x706f;
/// Seed tag for network parameter initialization.
pub const SEED_TAG_NETINIT: u64 = 0x6e69;

/// Well-known artifact paths under an output directory.
#[derive(Debug, Clone)]
pub struct OutputLayout {
    root: PathBuf,
}

impl OutputLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        OutputLayout { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn resolved_config(&self) -> PathBuf {
        self.root.join("resolved.cfg")
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("sim/manifest.txt")
    }

    pub fn labels_raster(&self) -> PathBuf {
        self.root.join("phantom/labels.kr")
    }

    pub fn labels_pgm(&self) -> PathBuf {
        self.root.join("phantom/labels.pgm")
    }

    pub fn truth_frame(&self, m: usize) -> PathBuf {
        self.root.join(format!("truth/frame_{m:03}.kr"))
    }

    pub fn counts_frame(&self, m: usize) -> PathBuf {
        self.root.join(format!("sino/counts_{m:03}.kr"))
    }

    pub fn background_frame(&self, m: usize) -> PathBuf {
        self.root.join(format!("sino/background_{m:03}.kr"))
    }

    pub fn composite(&self, m: usize) -> PathBuf {
        self.root.join(format!("composites/composite_{m}.kr"))
    }

    pub fn composite_background(&self, m: usize) -> PathBuf {
        self.root.join(format!("composites/background_{m}.kr"))
    }

    pub fn prior(&self, m: usize) -> PathBuf {
        self.root.join(format!("priors/prior_{m}.kr"))
    }

    pub fn prior_pgm(&self, m: usize) -> PathBuf {
        self.root.join(format!("priors/prior_{m}.pgm"))
    }

    pub fn empirical_kernel(&self) -> PathBuf {
        self.root.join("kernels/empirical.kkm")
    }

    pub fn deep_kernel(&self) -> PathBuf {
        self.root.join("kernels/deep.kkm")
    }

    pub fn network(&self) -> PathBuf {
        self.root.join("network/network.knet")
    }

    pub fn train_loss_csv(&self) -> PathBuf {
        self.root.join("network/train_loss.csv")
    }

    pub fn recon_frame(&self, method: Method, m: usize) -> PathBuf {
        self.root.join(format!("recon/{method}/frame_{m:03}.kr"))
    }

    pub fn recon_trace(&self, method: Method, m: usize) -> PathBuf {
        self.root.join(format!("recon/{method}/trace_{m:03}.csv"))
    }

    pub fn metrics_csv(&self) -> PathBuf {
        self.root.join("metrics/frames.csv")
    }

    pub fn attention_raster(&self, method: Method, pixel: usize) -> PathBuf {
        self.root.join(format!("attention/{method}_px{pixel:05}.kr"))
    }

    pub fn attention_overlay(&self, method: Method, pixel: usize) -> PathBuf {
        self.root
            .join(format!("attention/{method}_px{pixel:05}_overlay.pgm"))
    }
}

#[derive(Debug, Clone)]
pub struct SimulationProducts {
    pub region_map: RegionMap,
    pub report: PhantomReport,
    pub truth: DynamicImageSet,
    /// Geometric model with attenuation factors when enabled.
    pub base_model: SystemModel,
    /// Per-frame models: base factors times `count_scale * duration_m`.
    pub frame_models: Vec<SystemModel>,
    /// Expected data per frame, after global count scaling.
    pub expected: Vec<Sinogram>,
    /// Known uniform background per frame, after scaling.
    pub backgrounds: Vec<Sinogram>,
    /// Sampled Poisson counts per frame.
    pub counts: Vec<Sinogram>,
    pub count_scale: f64,
}

impl SimulationProducts {
    /// Model for composite (multi-frame summed) data: base times the
    /// global count scale; durations are already inside the frame sums.
    pub fn composite_model(&self) -> Result<SystemModel> {
        let factors = self
            .base_model
            .factors()
            .iter()
            .map(|f| f * self.count_scale)
            .collect();
        self.base_model.with_factors(factors)
    }
}

pub fn phantom_stage(cfg: &ExperimentConfig) -> Result<(RegionMap, PhantomReport)> {
    make_phantom(
        cfg.phantom.width,
        cfg.phantom.height,
        cfg.phantom.pixel_size_mm,
    )
    .stage("phantom")
}

pub fn model_stage(cfg: &ExperimentConfig, region_map: &RegionMap) -> Result<SystemModel> {
    let geometry = cfg.geometry.resolve(&cfg.phantom).stage("projector")?;
    let model = SystemModel::build(
        geometry,
        cfg.phantom.width,
        cfg.phantom.height,
        cfg.phantom.pixel_size_mm,
    )
    .stage("projector")?;
    if cfg.sim.attenuation_mu_per_mm > 0.0 {
        let factors = model
            .uniform_attenuation_factors(&region_map.head_mask(), cfg.sim.attenuation_mu_per_mm)
            .stage("projector")?;
        return model.with_factors(factors).stage("projector");
    }
    Ok(model)
}

/// Phantom -> dynamic truth -> expected data -> global count scaling ->
/// Poisson sampling, all in memory.
pub fn simulate(cfg: &ExperimentConfig) -> Result<SimulationProducts> {
    cfg.validate()?;
    let (region_map, report) = phantom_stage(cfg)?;
    let schedule = cfg.schedule().stage("schedule")?;
    let truth = integrate_frames(&region_map, &cfg.tac, &schedule).stage("tac")?;
    let base_model = model_stage(cfg, &region_map)?;

    let mut expected = Vec::with_capacity(truth.n_frames());
    let mut backgrounds = Vec::with_capacity(truth.n_frames());
    for m in 0..truth.n_frames() {
        let duration = schedule.duration(m);
        let weighted = truth.frame(m).map(|v| v * duration);
        let (ybar, r) = expected_data(&base_model, &weighted, cfg.sim.background_fraction)
            .stage("expected-data")?;
        expected.push(ybar);
        backgrounds.push(r);
    }
    let (expected, count_scale) =
        scale_to_counts(&expected, cfg.sim.total_counts).stage("count-scaling")?;
    let backgrounds: Vec<Sinogram> = backgrounds
        .iter()
        .map(|r| r.map(|v| v * count_scale))
        .collect();

    let counts: Vec<Sinogram> = expected
        .iter()
        .enumerate()
        .map(|(m, ybar)| {
            sample_poisson(ybar, derive_seed(cfg.seed, SEED_TAG_POISSON, m as u64))
        })
        .collect::<Result<_>>()
        .stage("poisson")?;

    let frame_models: Vec<SystemModel> = (0..truth.n_frames())
        .map(|m| {
            let c = count_scale * schedule.duration(m);
            let factors = base_model.factors().iter().map(|f| f * c).collect();
            base_model.with_factors(factors)
        })
        .collect::<Result<_>>()
        .stage("projector")?;

    Ok(SimulationProducts {
        region_map,
        report,
        truth,
        base_model,
        frame_models,
        expected,
        backgrounds,
        counts,
        count_scale,
    })
}

#[derive(Debug, Clone)]
pub struct KernelProducts {
    pub composites: Vec<Sinogram>,
    pub composite_backgrounds: Vec<Sinogram>,
    /// Composite reconstructions; the prior stack Z.
    pub priors: Vec<Image2D>,
    /// Intensity features per the `kernel.standardize` flag.
    pub features: FeatureSet,
    pub graph: NeighborhoodGraph,
    pub empirical: SparseKernelMatrix,
}

/// Rebin counts and known backgrounds onto the composite windows.
pub fn rebin_stage(
    cfg: &ExperimentConfig,
    counts: &[Sinogram],
    backgrounds: &[Sinogram],
) -> Result<(Vec<Sinogram>, Vec<Sinogram>)> {
    let schedule = cfg.schedule()?;
    let composites =
        rebin_composite(counts, &schedule, &cfg.composite_windows).stage("rebin")?;
    let composite_backgrounds =
        rebin_composite(backgrounds, &schedule, &cfg.composite_windows).stage("rebin")?;
    Ok((composites, composite_backgrounds))
}

/// Reconstruct the composite priors with plain EM and build the empirical
/// intensity kernel from them.
pub fn build_empirical_kernel(
    cfg: &ExperimentConfig,
    composites: &[Sinogram],
    composite_backgrounds: &[Sinogram],
    composite_model: &SystemModel,
) -> Result<KernelProducts> {
    let identity = SparseKernelMatrix::identity(
        cfg.phantom.width,
        cfg.phantom.height,
        cfg.phantom.pixel_size_mm,
    );
    let priors = crate::deepkernel::reconstruct_composites(
        composites,
        composite_backgrounds,
        composite_model,
        &identity,
        &cfg.recon,
    )
    .stage("priors")?;

    let features =
        extract_intensity_features(&priors, cfg.kernel.standardize).stage("kernel")?;
    let graph = knn_search(&features, cfg.kernel.k, cfg.kernel.window).stage("kernel")?;
    let sims = pairwise_similarity(&features, &graph, cfg.kernel.sigma).stage("kernel")?;
    let weights = softmax_normalize(&sims);
    let empirical = SparseKernelMatrix::assemble(&weights, &graph).stage("kernel")?;

    Ok(KernelProducts {
        composites: composites.to_vec(),
        composite_backgrounds: composite_backgrounds.to_vec(),
        priors,
        features,
        graph,
        empirical,
    })
}

/// Rebuild [`KernelProducts`] from priors already reconstructed (and read
/// back from disk), skipping the composite EM runs.
pub fn kernel_products_from_priors(
    cfg: &ExperimentConfig,
    composites: &[Sinogram],
    composite_backgrounds: &[Sinogram],
    priors: Vec<Image2D>,
) -> Result<KernelProducts> {
    let features =
        extract_intensity_features(&priors, cfg.kernel.standardize).stage("kernel")?;
    let graph = knn_search(&features, cfg.kernel.k, cfg.kernel.window).stage("kernel")?;
    let sims = pairwise_similarity(&features, &graph, cfg.kernel.sigma).stage("kernel")?;
    let weights = softmax_normalize(&sims);
    let empirical = SparseKernelMatrix::assemble(&weights, &graph).stage("kernel")?;
    Ok(KernelProducts {
        composites: composites.to_vec(),
        composite_backgrounds: composite_backgrounds.to_vec(),
        priors,
        features,
        graph,
        empirical,
    })
}

#[derive(Debug, Clone)]
pub struct TrainingProducts {
    pub pairs: Vec<TrainingPair>,
    pub network: FeatureNetwork,
    pub loss_trace: Vec<f64>,
    pub deep_kernel: SparseKernelMatrix,
}

/// Build training pairs, train the feature network and assemble the deep
/// kernel.
pub fn train_deep_kernel(
    cfg: &ExperimentConfig,
    kernel_products: &KernelProducts,
    composite_model: &SystemModel,
) -> Result<TrainingProducts> {
    let pair_kernel = match cfg.train.corrupted_recon {
        CorruptedRecon::Mlem => SparseKernelMatrix::identity(
            cfg.phantom.width,
            cfg.phantom.height,
            cfg.phantom.pixel_size_mm,
        ),
        CorruptedRecon::Kem => kernel_products.empirical.clone(),
    };
    let pairs = make_training_pairs(
        &kernel_products.composites,
        &kernel_products.composite_backgrounds,
        composite_model,
        &pair_kernel,
        &cfg.recon,
        cfg.train.d,
        cfg.seed,
    )
    .stage("training-pairs")?;

    let channels = kernel_products.features.to_channel_images();
    let mut network = FeatureNetwork::new(NetworkArchitecture::desk_default(
        channels.len(),
        cfg.train.hidden_channels,
    ))
    .stage("train")?;
    network.init_uniform(derive_seed(cfg.seed, SEED_TAG_NETINIT, 0));

    let settings = TrainSettings {
        learning_rate: cfg.train.learning_rate,
        n_iterations: cfg.train.n_iterations,
        seed: cfg.seed,
        optimizer: cfg.train.optimizer,
    };
    let out = train(
        &network,
        &channels,
        &kernel_products.graph,
        cfg.kernel.sigma,
        &pairs,
        &settings,
    )
    .stage("train")?;

    let graph = if cfg.kernel.rebuild_graph_after_training {
        let trained = out.network.forward(&channels).stage("train")?;
        knn_search(&trained.features, cfg.kernel.k, cfg.kernel.window).stage("train")?
    } else {
        kernel_products.graph.clone()
    };
    let deep_kernel =
        build_deep_kernel(&out.network, &channels, &graph, cfg.kernel.sigma).stage("train")?;

    Ok(TrainingProducts {
        pairs,
        network: out.network,
        loss_trace: out.loss_trace,
        deep_kernel,
    })
}

/// Reconstruct every frame with the given kernel; frames run concurrently
/// (they share only read-only inputs).
pub fn reconstruct_frames(
    cfg: &ExperimentConfig,
    counts: &[Sinogram],
    backgrounds: &[Sinogram],
    frame_models: &[SystemModel],
    kernel: &SparseKernelMatrix,
    truth: Option<&DynamicImageSet>,
) -> Result<Vec<ReconOutput>> {
    if counts.len() != frame_models.len() || counts.len() != backgrounds.len() {
        return Err(Error::DimensionMismatch {
            context: "reconstruct_frames",
            expected: format!("{} frames", frame_models.len()),
            actual: format!("{} counts / {} backgrounds", counts.len(), backgrounds.len()),
        });
    }
    let outputs = par::map_collect(counts.len(), |m| {
        reconstruct(
            &counts[m],
            &backgrounds[m],
            &frame_models[m],
            kernel,
            &cfg.recon,
            truth.map(|t| t.frame(m)),
        )
    });
    outputs.into_iter().collect::<Result<_>>().stage("recon")
}

/// Tumor center plus the innermost left gray matter pixel at mid-height:
/// the two pixels whose attention maps the experiments look at.
pub fn default_attention_pixels(map: &RegionMap, report: &PhantomReport) -> Vec<usize> {
    let mut pixels = vec![report.tumor_center_index];
    let y = map.height() / 2;
    let mut last_gray = None;
    for x in 0..map.width() {
        match map.label(y * map.width() + x) {
            Region::GrayMatter => last_gray = Some(y * map.width() + x),
            Region::WhiteMatter => break,
            _ => {}
        }
    }
    if let Some(g) = last_gray {
        pixels.push(g);
    }
    pixels
}

/// Write one attention map per pixel: the raw row raster plus a PGM where
/// the map is alpha-blended (factor 0.5) onto the min-max normalized
/// structural image, grayscale ramp colormap.
pub fn export_attention(
    kernel: &SparseKernelMatrix,
    pixels: &[usize],
    overlay: &Image2D,
    layout: &OutputLayout,
    method: Method,
) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let norm = |img: &Image2D| -> Vec<f64> {
        let (lo, hi) = img
            .values()
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        let span = if hi > lo { hi - lo } else { 1.0 };
        img.values().iter().map(|&v| (v - lo) / span).collect()
    };
    let structural = norm(overlay);
    for &j in pixels {
        let map = kernel.attention_map(j).stage("attention")?;
        let raster = layout.attention_raster(method, j);
        io::write_image(&map, &raster).stage("attention")?;
        written.push(raster);

        let map_norm = norm(&map);
        let blend: Vec<f64> = structural
            .iter()
            .zip(&map_norm)
            .map(|(s, m)| 0.5 * s + 0.5 * m)
            .collect();
        let blend_img = Image2D::new(
            overlay.width(),
            overlay.height(),
            overlay.pixel_size_mm(),
            blend,
        )
        .stage("attention")?;
        let pgm = layout.attention_overlay(method, j);
        io::write_image_pgm(&blend_img, &pgm).stage("attention")?;
        written.push(pgm);
    }
    Ok(written)
}

#[derive(Debug, Clone)]
pub struct SimManifest {
    pub count_scale: f64,
    pub n_frames: usize,
}

pub fn write_manifest(layout: &OutputLayout, manifest: &SimManifest) -> Result<()> {
    let path = layout.manifest();
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(
        &path,
        format!(
            "count_scale = {:e}\nn_frames = {}\n",
            manifest.count_scale, manifest.n_frames
        ),
    )?;
    Ok(())
}

pub fn read_manifest(layout: &OutputLayout) -> Result<SimManifest> {
    let text = std::fs::read_to_string(layout.manifest())
        .map_err(|e| Error::Config(format!("{}: {e} (run `simulate` first?)", layout.manifest().display())))?;
    let mut count_scale = None;
    let mut n_frames = None;
    for line in text.lines() {
        if let Some((k, v)) = line.split_once('=') {
            match k.trim() {
                "count_scale" => {
                    count_scale = Some(v.trim().parse::<f64>().map_err(|e| {
                        Error::Format(format!("manifest count_scale: {e}"))
                    })?)
                }
                "n_frames" => {
                    n_frames = Some(v.trim().parse::<usize>().map_err(|e| {
                        Error::Format(format!("manifest n_frames: {e}"))
                    })?)
                }
                _ => {}
            }
        }
    }
    Ok(SimManifest {
        count_scale: count_scale
            .ok_or_else(|| Error::Format("manifest missing count_scale".to_string()))?,
        n_frames: n_frames
            .ok_or_else(|| Error::Format("manifest missing n_frames".to_string()))?,
    })
}

/// Write phantom, truth, count and background artifacts.
pub fn write_simulation(
    cfg: &ExperimentConfig,
    sim: &SimulationProducts,
    layout: &OutputLayout,
) -> Result<()> {
    std::fs::create_dir_all(layout.root())?;
    std::fs::write(layout.resolved_config(), cfg.to_text())?;
    io::write_image(&sim.region_map.label_image(), &layout.labels_raster())?;
    io::write_image_pgm(&sim.region_map.label_image(), &layout.labels_pgm())?;
    let spacing = sim.base_model.geometry().bin_spacing_mm;
    for m in 0..sim.truth.n_frames() {
        io::write_image(sim.truth.frame(m), &layout.truth_frame(m))?;
        io::write_sinogram(&sim.counts[m], spacing, &layout.counts_frame(m))?;
        io::write_sinogram(&sim.backgrounds[m], spacing, &layout.background_frame(m))?;
    }
    write_manifest(
        layout,
        &SimManifest {
            count_scale: sim.count_scale,
            n_frames: sim.truth.n_frames(),
        },
    )
}

#[derive(Debug)]
pub struct PipelineSummary {
    pub out_dir: PathBuf,
    pub report: PhantomReport,
    pub metrics: MetricsReport,
}

fn kernel_for_method(
    cfg: &ExperimentConfig,
    method: Method,
    kernel_products: Option<&KernelProducts>,
    training: Option<&TrainingProducts>,
) -> Result<SparseKernelMatrix> {
    match method {
        Method::Mlem => Ok(SparseKernelMatrix::identity(
            cfg.phantom.width,
            cfg.phantom.height,
            cfg.phantom.pixel_size_mm,
        )),
        Method::Kem => kernel_products
            .map(|kp| kp.empirical.clone())
            .ok_or_else(|| Error::Config("kem requested but kernel stage did not run".to_string())),
        Method::DeepKem => training
            .map(|t| t.deep_kernel.clone())
            .ok_or_else(|| Error::Config("deep-kem requested but training did not run".to_string())),
    }
}

/// The full experiment: every stage in memory, every artifact on disk.
/// Deterministic given the config (seeds included in it).
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<PipelineSummary> {
    let layout = OutputLayout::new(&cfg.output_dir);
    let sim = simulate(cfg)?;
    write_simulation(cfg, &sim, &layout).stage("simulate-io")?;

    let needs_kernel = cfg
        .methods
        .iter()
        .any(|m| matches!(m, Method::Kem | Method::DeepKem));
    let kernel_products = if needs_kernel {
        let (composites, composite_backgrounds) =
            rebin_stage(cfg, &sim.counts, &sim.backgrounds)?;
        let spacing = sim.base_model.geometry().bin_spacing_mm;
        for m in 0..composites.len() {
            io::write_sinogram(&composites[m], spacing, &layout.composite(m))
                .stage("rebin-io")?;
            io::write_sinogram(
                &composite_backgrounds[m],
                spacing,
                &layout.composite_background(m),
            )
            .stage("rebin-io")?;
        }
        let kp = build_empirical_kernel(
            cfg,
            &composites,
            &composite_backgrounds,
            &sim.composite_model()?,
        )?;
        for (m, prior) in kp.priors.iter().enumerate() {
            io::write_image(prior, &layout.prior(m)).stage("priors-io")?;
            io::write_image_pgm(prior, &layout.prior_pgm(m)).stage("priors-io")?;
        }
        let mut file = std::fs::File::create(ensure_parent(&layout.empirical_kernel())?)
            .map_err(Error::from)
            .stage("kernel-io")?;
        kp.empirical.write_to(&mut file).stage("kernel-io")?;
        Some(kp)
    } else {
        None
    };

    let training = if cfg.methods.contains(&Method::DeepKem) {
        let kp = kernel_products
            .as_ref()
            .expect("deep-kem implies the kernel stage");
        let tp = train_deep_kernel(cfg, kp, &sim.composite_model()?)?;
        let mut file = std::fs::File::create(ensure_parent(&layout.network())?)
            .map_err(Error::from)
            .stage("train-io")?;
        tp.network.write_to(&mut file).stage("train-io")?;
        io::write_loss_trace_csv(&tp.loss_trace, &layout.train_loss_csv()).stage("train-io")?;
        let mut file = std::fs::File::create(ensure_parent(&layout.deep_kernel())?)
            .map_err(Error::from)
            .stage("train-io")?;
        tp.deep_kernel.write_to(&mut file).stage("train-io")?;
        Some(tp)
    } else {
        None
    };

    let mut metrics = MetricsReport::default();
    for &method in &cfg.methods {
        let kernel = kernel_for_method(cfg, method, kernel_products.as_ref(), training.as_ref())?;
        let outputs = reconstruct_frames(
            cfg,
            &sim.counts,
            &sim.backgrounds,
            &sim.frame_models,
            &kernel,
            Some(&sim.truth),
        )?;
        for (m, out) in outputs.iter().enumerate() {
            io::write_image(&out.activity, &layout.recon_frame(method, m)).stage("recon-io")?;
            io::write_trace_csv(&out.trace, &layout.recon_trace(method, m)).stage("recon-io")?;
            metrics.push(method, m, snr_db(&out.activity, sim.truth.frame(m))?);
        }
    }
    io::write_metrics_csv(&metrics, &layout.metrics_csv()).stage("metrics-io")?;

    // Attention maps for every requested method, overlaid on the last
    // prior (or the last truth frame when no priors were built).
    let pixels = match &cfg.attention_pixels {
        AttentionPixels::Auto => default_attention_pixels(&sim.region_map, &sim.report),
        AttentionPixels::List(v) => v.clone(),
    };
    let overlay = kernel_products
        .as_ref()
        .and_then(|kp| kp.priors.last().cloned())
        .unwrap_or_else(|| sim.truth.frame(sim.truth.n_frames() - 1).clone());
    for &method in &cfg.methods {
        let kernel = kernel_for_method(cfg, method, kernel_products.as_ref(), training.as_ref())?;
        export_attention(&kernel, &pixels, &overlay, &layout, method)?;
    }

    Ok(PipelineSummary {
        out_dir: cfg.output_dir.clone(),
        report: sim.report,
        metrics,
    })
}

fn ensure_parent(path: &Path) -> Result<&Path> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    Ok(path)
}
