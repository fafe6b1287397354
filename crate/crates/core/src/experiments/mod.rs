//! End-to-end pipeline driver: configuration, file formats, metrics and
//! the simulation/reconstruction orchestration behind the CLI.

mod config;
mod io;
mod metrics;
mod pipeline;

pub use config::{
    AttentionPixels, CorruptedRecon, ExperimentConfig, GeometryConfig, KernelConfig,
    PhantomConfig, SimConfig, TrainConfig,
};
pub use io::{
    read_image, read_sinogram, write_image, write_image_pgm, write_loss_trace_csv,
    write_metrics_csv, write_sinogram, write_trace_csv,
};
pub use metrics::{snr_db, FrameMetric, MetricsReport, SNR_CAP_DB};
pub use pipeline::{
    build_empirical_kernel, default_attention_pixels, export_attention,
    kernel_products_from_priors, model_stage, phantom_stage, read_manifest, rebin_stage,
    reconstruct_frames, run_pipeline, simulate, train_deep_kernel, write_manifest,
    write_simulation, KernelProducts, OutputLayout, PipelineSummary, SimManifest,
    SimulationProducts, TrainingProducts, SEED_TAG_NETINIT, SEED_TAG_POISSON,
};

use crate::error::{Error, Result};

/// Reconstruction method selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    /// Plain ML-EM (identity kernel).
    Mlem,
    /// Kernelized EM with the empirical intensity kernel.
    Kem,
    /// Kernelized EM with the trained deep kernel.
    DeepKem,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Mlem, Method::Kem, Method::DeepKem];
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Method::Mlem => "mlem",
            Method::Kem => "kem",
            Method::DeepKem => "deep-kem",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlem" => Ok(Method::Mlem),
            "kem" => Ok(Method::Kem),
            "deep-kem" | "deepkem" => Ok(Method::DeepKem),
            other => Err(Error::Config(format!("unknown method '{other}'"))),
        }
    }
}
