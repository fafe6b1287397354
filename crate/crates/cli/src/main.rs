//! Command-line driver for the deepkem toolkit.
//!
//! Stages communicate through artifacts in the output directory, so each
//! subcommand can be run on its own (in pipeline order) or everything at
//! once with `run-all`.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use deepkem_core::experiments::{
    self as exp, AttentionPixels, ExperimentConfig, Method, OutputLayout,
};
use deepkem_core::kernel::SparseKernelMatrix;
use deepkem_core::projector::{Sinogram, SystemModel};
use deepkem_core::{Error, Image2D};

#[derive(Parser)]
#[command(
    name = "deepkem",
    about = "Dynamic emission tomography with empirical and trained sparse kernel models",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config file (flat `section.key = value`); defaults apply
    /// when omitted.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Override the config's base seed.
    #[arg(long)]
    seed: Option<u64>,

    /// Override the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct MethodArg {
    /// Reconstruction method: mlem | kem | deep-kem.
    #[arg(long)]
    method: String,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the phantom, dynamic truth and noisy sinograms.
    Simulate(Common),
    /// Sum frame sinograms into composite windows.
    Rebin(Common),
    /// Reconstruct composite priors and build the empirical kernel.
    BuildKernel(Common),
    /// Train the feature network and assemble the deep kernel.
    TrainKernel(Common),
    /// Reconstruct every frame with one method.
    Reconstruct {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        method: MethodArg,
    },
    /// Export attention maps for one method's kernel.
    Attention {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        method: MethodArg,
    },
    /// Compute per-frame SNR against the stored truth.
    Metrics(Common),
    /// Run the whole pipeline end to end.
    RunAll(Common),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(command: Command) -> Result<(), Error> {
    match command {
        Command::Simulate(common) => {
            let cfg = load_config(&common)?;
            let layout = OutputLayout::new(&cfg.output_dir);
            let sim = exp::simulate(&cfg)?;
            exp::write_simulation(&cfg, &sim, &layout).map_err(|e| e.in_stage("simulate-io"))?;
            let total: f64 = sim.counts.iter().map(Sinogram::total_counts).sum();
            println!(
                "simulated {} frames, {:.3e} detected counts -> {}",
                sim.truth.n_frames(),
                total,
                cfg.output_dir.display()
            );
            Ok(())
        }
        Command::Rebin(common) => {
            let cfg = load_config(&common)?;
            let layout = OutputLayout::new(&cfg.output_dir);
            let (counts, backgrounds, spacing) = load_frame_sinograms(&cfg, &layout)?;
            let (composites, composite_backgrounds) =
                exp::rebin_stage(&cfg, &counts, &backgrounds)?;
            for m in 0..composites.len() {
                exp::write_sinogram(&composites[m], spacing, &layout.composite(m))
                    .map_err(|e| e.in_stage("rebin-io"))?;
                exp::write_sinogram(
                    &composite_backgrounds[m],
                    spacing,
                    &layout.composite_background(m),
                )
                .map_err(|e| e.in_stage("rebin-io"))?;
            }
            println!("rebinned {} composites", composites.len());
            Ok(())
        }
        Command::BuildKernel(common) => {
            let cfg = load_config(&common)?;
            let layout = OutputLayout::new(&cfg.output_dir);
            let (composites, composite_backgrounds) = load_composites(&cfg, &layout)?;
            let composite_model = composite_model(&cfg, &layout)?;
            let kp = exp::build_empirical_kernel(
                &cfg,
                &composites,
                &composite_backgrounds,
                &composite_model,
            )?;
            for (m, prior) in kp.priors.iter().enumerate() {
                exp::write_image(prior, &layout.prior(m)).map_err(|e| e.in_stage("priors-io"))?;
                exp::write_image_pgm(prior, &layout.prior_pgm(m))
                    .map_err(|e| e.in_stage("priors-io"))?;
            }
            write_kernel(&kp.empirical, &layout.empirical_kernel())?;
            println!(
                "built empirical kernel (k = {}) from {} priors",
                kp.empirical.k(),
                kp.priors.len()
            );
            Ok(())
        }
        Command::TrainKernel(common) => {
            let cfg = load_config(&common)?;
            let layout = OutputLayout::new(&cfg.output_dir);
            let (composites, composite_backgrounds) = load_composites(&cfg, &layout)?;
            let priors = load_priors(&cfg, &layout)?;
            let kp = exp::kernel_products_from_priors(
                &cfg,
                &composites,
                &composite_backgrounds,
                priors,
            )?;
            let composite_model = composite_model(&cfg, &layout)?;
            let tp = exp::train_deep_kernel(&cfg, &kp, &composite_model)?;
            let mut file = create(&layout.network())?;
            tp.network
                .write_to(&mut file)
                .map_err(|e| e.in_stage("train-io"))?;
            exp::write_loss_trace_csv(&tp.loss_trace, &layout.train_loss_csv())
                .map_err(|e| e.in_stage("train-io"))?;
            write_kernel(&tp.deep_kernel, &layout.deep_kernel())?;
            let first = tp.loss_trace.first().copied().unwrap_or(f64::NAN);
            let last = tp.loss_trace.last().copied().unwrap_or(f64::NAN);
            println!(
                "trained {} iterations: loss {first:.6e} -> {last:.6e}",
                tp.loss_trace.len()
            );
            Ok(())
        }
        Command::Reconstruct { common, method } => {
            let cfg = load_config(&common)?;
            let method: Method = method.method.parse()?;
            let layout = OutputLayout::new(&cfg.output_dir);
            let (counts, backgrounds, _) = load_frame_sinograms(&cfg, &layout)?;
            let frame_models = frame_models(&cfg, &layout)?;
            let kernel = kernel_for(&cfg, &layout, method)?;
            let truth = load_truth(&cfg, &layout).ok();
            let outputs = exp::reconstruct_frames(
                &cfg,
                &counts,
                &backgrounds,
                &frame_models,
                &kernel,
                truth.as_ref(),
            )?;
            for (m, out) in outputs.iter().enumerate() {
                exp::write_image(&out.activity, &layout.recon_frame(method, m))
                    .map_err(|e| e.in_stage("recon-io"))?;
                exp::write_trace_csv(&out.trace, &layout.recon_trace(method, m))
                    .map_err(|e| e.in_stage("recon-io"))?;
            }
            println!("reconstructed {} frames with {method}", outputs.len());
            Ok(())
        }
        Command::Attention { common, method } => {
            let cfg = load_config(&common)?;
            let method: Method = method.method.parse()?;
            let layout = OutputLayout::new(&cfg.output_dir);
            let kernel = kernel_for(&cfg, &layout, method)?;
            let (region_map, report) = exp::phantom_stage(&cfg)?;
            let pixels = match &cfg.attention_pixels {
                AttentionPixels::Auto => exp::default_attention_pixels(&region_map, &report),
                AttentionPixels::List(v) => v.clone(),
            };
            let overlay = load_overlay(&cfg, &layout)?;
            let written = exp::export_attention(&kernel, &pixels, &overlay, &layout, method)?;
            println!("wrote {} attention files for {method}", written.len());
            Ok(())
        }
        Command::Metrics(common) => {
            let cfg = load_config(&common)?;
            let layout = OutputLayout::new(&cfg.output_dir);
            let truth = load_truth(&cfg, &layout)?;
            let mut report = exp::MetricsReport::default();
            for &method in &cfg.methods {
                for m in 0..truth.n_frames() {
                    let path = layout.recon_frame(method, m);
                    if !path.exists() {
                        continue;
                    }
                    let estimate = exp::read_image(&path)?;
                    report.push(method, m, exp::snr_db(&estimate, truth.frame(m))?);
                }
            }
            if report.entries.is_empty() {
                return Err(Error::Config(
                    "no reconstructed frames found; run `reconstruct` first".to_string(),
                )
                .in_stage("metrics"));
            }
            exp::write_metrics_csv(&report, &layout.metrics_csv())
                .map_err(|e| e.in_stage("metrics-io"))?;
            for &method in &cfg.methods {
                if let Some(mean) = report.mean_snr(method) {
                    println!("{method}: mean SNR {mean:.2} dB");
                }
            }
            Ok(())
        }
        Command::RunAll(common) => {
            let cfg = load_config(&common)?;
            let summary = exp::run_pipeline(&cfg)?;
            println!(
                "pipeline complete -> {} ({} tumor pixels)",
                summary.out_dir.display(),
                summary.report.tumor_pixel_count
            );
            for &method in &cfg.methods {
                if let Some(mean) = summary.metrics.mean_snr(method) {
                    println!("{method}: mean SNR {mean:.2} dB");
                }
            }
            Ok(())
        }
    }
}

fn create(path: &std::path::Path) -> Result<std::fs::File, Error> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    Ok(std::fs::File::create(path)?)
}

fn write_kernel(kernel: &SparseKernelMatrix, path: &std::path::Path) -> Result<(), Error> {
    let mut file = create(path)?;
    kernel
        .write_to(&mut file)
        .map_err(|e| e.in_stage("kernel-io"))
}

fn load_frame_sinograms(
    cfg: &ExperimentConfig,
    layout: &OutputLayout,
) -> Result<(Vec<Sinogram>, Vec<Sinogram>, f64), Error> {
    let manifest = exp::read_manifest(layout)?;
    let mut counts = Vec::with_capacity(manifest.n_frames);
    let mut backgrounds = Vec::with_capacity(manifest.n_frames);
    let mut spacing = cfg.phantom.pixel_size_mm;
    for m in 0..manifest.n_frames {
        let (c, sp) = exp::read_sinogram(&layout.counts_frame(m))?;
        let (b, _) = exp::read_sinogram(&layout.background_frame(m))?;
        counts.push(c);
        backgrounds.push(b);
        spacing = sp;
    }
    Ok((counts, backgrounds, spacing))
}

fn load_composites(
    cfg: &ExperimentConfig,
    layout: &OutputLayout,
) -> Result<(Vec<Sinogram>, Vec<Sinogram>), Error> {
    let n = cfg.composite_windows.len();
    let mut composites = Vec::with_capacity(n);
    let mut backgrounds = Vec::with_capacity(n);
    for m in 0..n {
        composites.push(exp::read_sinogram(&layout.composite(m))?.0);
        backgrounds.push(exp::read_sinogram(&layout.composite_background(m))?.0);
    }
    Ok((composites, backgrounds))
}

fn load_priors(cfg: &ExperimentConfig, layout: &OutputLayout) -> Result<Vec<Image2D>, Error> {
    (0..cfg.composite_windows.len())
        .map(|m| exp::read_image(&layout.prior(m)))
        .collect()
}

fn load_truth(
    cfg: &ExperimentConfig,
    layout: &OutputLayout,
) -> Result<deepkem_core::imaging::DynamicImageSet, Error> {
    let schedule = cfg.schedule()?;
    let frames: Vec<Image2D> = (0..schedule.n_frames())
        .map(|m| exp::read_image(&layout.truth_frame(m)))
        .collect::<Result<_, _>>()?;
    deepkem_core::imaging::DynamicImageSet::new(schedule, frames)
}

fn load_overlay(cfg: &ExperimentConfig, layout: &OutputLayout) -> Result<Image2D, Error> {
    let last_prior = layout.prior(cfg.composite_windows.len() - 1);
    if last_prior.exists() {
        return exp::read_image(&last_prior);
    }
    let last_truth = layout.truth_frame(cfg.schedule_durations.len() - 1);
    exp::read_image(&last_truth)
}

fn base_model(cfg: &ExperimentConfig) -> Result<SystemModel, Error> {
    let (region_map, _) = exp::phantom_stage(cfg)?;
    exp::model_stage(cfg, &region_map)
}

fn composite_model(cfg: &ExperimentConfig, layout: &OutputLayout) -> Result<SystemModel, Error> {
    let manifest = exp::read_manifest(layout)?;
    let base = base_model(cfg)?;
    let factors = base
        .factors()
        .iter()
        .map(|f| f * manifest.count_scale)
        .collect();
    base.with_factors(factors)
}

fn frame_models(
    cfg: &ExperimentConfig,
    layout: &OutputLayout,
) -> Result<Vec<SystemModel>, Error> {
    let manifest = exp::read_manifest(layout)?;
    let base = base_model(cfg)?;
    let schedule = cfg.schedule()?;
    (0..schedule.n_frames())
        .map(|m| {
            let c = manifest.count_scale * schedule.duration(m);
            let factors = base.factors().iter().map(|f| f * c).collect();
            base.with_factors(factors)
        })
        .collect()
}

fn kernel_for(
    cfg: &ExperimentConfig,
    layout: &OutputLayout,
    method: Method,
) -> Result<SparseKernelMatrix, Error> {
    let path = match method {
        Method::Mlem => {
            return Ok(SparseKernelMatrix::identity(
                cfg.phantom.width,
                cfg.phantom.height,
                cfg.phantom.pixel_size_mm,
            ))
        }
        Method::Kem => layout.empirical_kernel(),
        Method::DeepKem => layout.deep_kernel(),
    };
    let file = std::fs::File::open(&path).map_err(|e| {
        Error::Config(format!(
            "{}: {e} (run `build-kernel`/`train-kernel` first?)",
            path.display()
        ))
    })?;
    SparseKernelMatrix::read_from(
        std::io::BufReader::new(file),
        cfg.phantom.width,
        cfg.phantom.height,
        cfg.phantom.pixel_size_mm,
    )
}
