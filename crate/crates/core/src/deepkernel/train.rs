//! First-order training loop for the feature network.

use crate::error::{Error, Result};
use crate::image::Image2D;
use crate::kernel::NeighborhoodGraph;

use super::net::FeatureNetwork;
use super::{dae_loss, loss_gradient, TrainingPair};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    /// theta <- theta - lr * g
    GradientDescent,
    /// Adaptive-moment estimation (decay 0.9 / 0.999, stabilizer 1e-8).
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gd" | "gradient-descent" => Ok(OptimizerKind::GradientDescent),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::Config(format!("unknown optimizer '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainSettings {
    pub learning_rate: f64,
    pub n_iterations: usize,
    /// Stream for parameter initialization (used by callers via
    /// `FeatureNetwork::init_uniform`; the loop itself draws nothing).
    pub seed: u64,
    pub optimizer: OptimizerKind,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            learning_rate: 1e-2,
            n_iterations: 500,
            seed: 0,
            optimizer: OptimizerKind::Adam,
        }
    }
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::InvalidParameter {
                name: "learning_rate",
                reason: format!("{} must be finite and >= 0", self.learning_rate),
            });
        }
        if self.n_iterations == 0 {
            return Err(Error::InvalidParameter {
                name: "n_train_iters",
                reason: "must be >= 1".to_string(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub network: FeatureNetwork,
    /// Loss at the start of every iteration (before that iteration's step).
    pub loss_trace: Vec<f64>,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - Self::BETA1.powi(self.t as i32);
        let bc2 = 1.0 - Self::BETA2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * grad[i];
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * grad[i] * grad[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + Self::EPS);
        }
    }
}

/// Minimize the autoencoder loss by first-order descent on the network
/// parameters, starting from the given network. The loss is recorded at
/// every iteration; training aborts if the loss exceeds 1e3 times its
/// initial value.
pub fn train(
    network: &FeatureNetwork,
    prior_channels: &[Image2D],
    graph: &NeighborhoodGraph,
    sigma: f64,
    pairs: &[TrainingPair],
    settings: &TrainSettings,
) -> Result<TrainOutput> {
    settings.validate()?;
    let mut net = network.clone();
    let mut adam = Adam::new(net.n_params());
    let mut trace = Vec::with_capacity(settings.n_iterations);
    let mut initial = None;

    for it in 0..settings.n_iterations {
        let loss = dae_loss(&net, prior_channels, graph, sigma, pairs)?;
        let initial = *initial.get_or_insert(loss);
        if loss > 1e3 * initial.max(f64::MIN_POSITIVE) {
            return Err(Error::TrainingDiverged {
                iteration: it,
                loss,
                initial,
            });
        }
        trace.push(loss);

        let grad = loss_gradient(&net, prior_channels, graph, sigma, pairs)?;
        match settings.optimizer {
            OptimizerKind::GradientDescent => {
                for (p, g) in net.params_mut().iter_mut().zip(&grad) {
                    *p -= settings.learning_rate * g;
                }
            }
            OptimizerKind::Adam => {
                adam.step(net.params_mut(), &grad, settings.learning_rate);
            }
        }
    }

    Ok(TrainOutput {
        network: net,
        loss_trace: trace,
    })
}
