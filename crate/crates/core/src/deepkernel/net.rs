//! Small residual convolutional feature extractor with hand-written
//! backpropagation.
//!
//! The network maps an `n_z`-channel prior stack to `n_z` feature channels
//! through same-padded 2D convolutions, with one input-to-output residual
//! skip. With all parameters at zero the skip makes the network an exact
//! identity, so the untrained deep kernel reproduces the empirical
//! intensity kernel.

use std::io::{BufRead, Read, Write};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::Image2D;
use crate::kernel::{FeatureProvenance, FeatureSet};
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Odd kernel side length (1 or 3 at desk scale).
    pub kernel_size: usize,
    /// Apply the smooth-ramp nonlinearity after this convolution.
    pub nonlinearity: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkArchitecture {
    pub layers: Vec<ConvSpec>,
    /// Add the network input to the final convolution output.
    pub residual: bool,
}

impl NetworkArchitecture {
    /// Desk-scale residual extractor:
    /// conv(3x3, n_z -> hidden) + ramp + conv(3x3, hidden -> n_z) + skip.
    pub fn desk_default(n_z: usize, hidden: usize) -> Self {
        NetworkArchitecture {
            layers: vec![
                ConvSpec {
                    in_channels: n_z,
                    out_channels: hidden,
                    kernel_size: 3,
                    nonlinearity: true,
                },
                ConvSpec {
                    in_channels: hidden,
                    out_channels: n_z,
                    kernel_size: 3,
                    nonlinearity: false,
                },
            ],
            residual: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::InvalidParameter {
                name: "architecture",
                reason: "at least one layer required".to_string(),
            });
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.in_channels == 0 || l.out_channels == 0 {
                return Err(Error::InvalidParameter {
                    name: "architecture",
                    reason: format!("layer {i}: zero channel count"),
                });
            }
            if l.kernel_size % 2 == 0 || l.kernel_size == 0 {
                return Err(Error::InvalidParameter {
                    name: "architecture",
                    reason: format!("layer {i}: kernel size {} must be odd", l.kernel_size),
                });
            }
            if i > 0 && self.layers[i - 1].out_channels != l.in_channels {
                return Err(Error::InvalidParameter {
                    name: "architecture",
                    reason: format!("layer {i}: channel mismatch with layer {}", i - 1),
                });
            }
        }
        let n_in = self.layers[0].in_channels;
        let n_out = self.layers[self.layers.len() - 1].out_channels;
        if self.residual && n_in != n_out {
            return Err(Error::InvalidParameter {
                name: "architecture",
                reason: format!(
                    "residual skip requires in = out channels, got {n_in} vs {n_out}"
                ),
            });
        }
        Ok(())
    }

    pub fn n_input_channels(&self) -> usize {
        self.layers[0].in_channels
    }

    pub fn n_output_channels(&self) -> usize {
        self.layers[self.layers.len() - 1].out_channels
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerLayout {
    weights: usize,
    n_weights: usize,
    biases: usize,
    n_biases: usize,
}

/// Trainable feature extractor: architecture plus a flat parameter vector
/// laid out as `[w_0, b_0, w_1, b_1, ...]` with weights indexed
/// `[out_ch][in_ch][ky * k + kx]`.
#[derive(Debug, Clone)]
pub struct FeatureNetwork {
    arch: NetworkArchitecture,
    layout: Vec<LayerLayout>,
    params: Vec<f64>,
}

impl FeatureNetwork {
    /// All parameters zero; with a residual skip this is the identity map.
    pub fn new(arch: NetworkArchitecture) -> Result<Self> {
        arch.validate()?;
        let mut layout = Vec::with_capacity(arch.layers.len());
        let mut offset = 0;
        for l in &arch.layers {
            let n_w = l.out_channels * l.in_channels * l.kernel_size * l.kernel_size;
            layout.push(LayerLayout {
                weights: offset,
                n_weights: n_w,
                biases: offset + n_w,
                n_biases: l.out_channels,
            });
            offset += n_w + l.out_channels;
        }
        Ok(FeatureNetwork {
            arch,
            layout,
            params: vec![0.0; offset],
        })
    }

    /// Zero-centered uniform weights scaled by 1/sqrt(fan-in), zero biases.
    /// With the residual skip the initial kernel stays near the empirical one.
    pub fn init_uniform(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (l, spec) in self.arch.layers.iter().enumerate() {
            let fan_in = (spec.in_channels * spec.kernel_size * spec.kernel_size) as f64;
            let scale = 1.0 / fan_in.sqrt();
            let lay = self.layout[l];
            for w in &mut self.params[lay.weights..lay.weights + lay.n_weights] {
                *w = rng.gen_range(-scale..scale);
            }
            for b in &mut self.params[lay.biases..lay.biases + lay.n_biases] {
                *b = 0.0;
            }
        }
    }

    pub fn architecture(&self) -> &NetworkArchitecture {
        &self.arch
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::DimensionMismatch {
                context: "network params",
                expected: format!("{}", self.params.len()),
                actual: format!("{}", params.len()),
            });
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    fn layer_weights(&self, l: usize) -> &[f64] {
        let lay = self.layout[l];
        &self.params[lay.weights..lay.weights + lay.n_weights]
    }

    fn layer_biases(&self, l: usize) -> &[f64] {
        let lay = self.layout[l];
        &self.params[lay.biases..lay.biases + lay.n_biases]
    }

    /// Run the network on a channel stack, keeping per-layer activations
    /// for backpropagation.
    pub fn forward(&self, input: &[Image2D]) -> Result<NetworkOutput> {
        let first = input.first().ok_or_else(|| Error::InvalidParameter {
            name: "network input",
            reason: "empty channel stack".to_string(),
        })?;
        if input.len() != self.arch.n_input_channels() {
            return Err(Error::DimensionMismatch {
                context: "network input channels",
                expected: format!("{}", self.arch.n_input_channels()),
                actual: format!("{}", input.len()),
            });
        }
        if !input.iter().all(|c| c.same_dims(first)) {
            return Err(Error::DimensionMismatch {
                context: "network input channels",
                expected: format!("{}x{}", first.width(), first.height()),
                actual: "mixed dimensions".to_string(),
            });
        }
        let width = first.width();
        let height = first.height();
        let stack: Vec<Vec<f64>> = input.iter().map(|c| c.values().to_vec()).collect();

        let mut layer_inputs = Vec::with_capacity(self.arch.layers.len());
        let mut pre_activations = Vec::with_capacity(self.arch.layers.len());
        let mut current = stack;
        for (l, spec) in self.arch.layers.iter().enumerate() {
            let pre = conv2d_forward(
                &current,
                width,
                height,
                spec,
                self.layer_weights(l),
                self.layer_biases(l),
            );
            layer_inputs.push(current);
            let post = if spec.nonlinearity {
                pre.iter()
                    .map(|ch| ch.iter().map(|&v| softplus(v)).collect())
                    .collect()
            } else {
                pre.clone()
            };
            pre_activations.push(pre);
            current = post;
        }

        if self.arch.residual {
            for (c, ch) in current.iter_mut().enumerate() {
                for (p, v) in ch.iter_mut().enumerate() {
                    *v += layer_inputs[0][c][p];
                }
            }
        }

        let channels: Vec<Image2D> = current
            .iter()
            .map(|ch| Image2D::new(width, height, first.pixel_size_mm(), ch.clone()))
            .collect::<Result<_>>()?;
        let features = FeatureSet::from_channels(&channels, FeatureProvenance::Network)?;
        Ok(NetworkOutput {
            features,
            cache: ActivationCache {
                width,
                height,
                layer_inputs,
                pre_activations,
            },
        })
    }

    /// Backpropagate a gradient w.r.t. the output channels into a gradient
    /// w.r.t. the flat parameter vector. The residual skip adds nothing to
    /// parameter gradients, so it only affects the (unused) input gradient.
    pub fn backward(&self, cache: &ActivationCache, grad_output: &[Vec<f64>]) -> Result<Vec<f64>> {
        if grad_output.len() != self.arch.n_output_channels() {
            return Err(Error::DimensionMismatch {
                context: "network output gradient",
                expected: format!("{}", self.arch.n_output_channels()),
                actual: format!("{}", grad_output.len()),
            });
        }
        let mut grad = vec![0.0; self.params.len()];
        let mut g_out: Vec<Vec<f64>> = grad_output.to_vec();
        for l in (0..self.arch.layers.len()).rev() {
            let spec = &self.arch.layers[l];
            // Through the nonlinearity: d softplus = sigmoid.
            if spec.nonlinearity {
                for (c, ch) in g_out.iter_mut().enumerate() {
                    let pre = &cache.pre_activations[l][c];
                    for (p, g) in ch.iter_mut().enumerate() {
                        *g *= sigmoid(pre[p]);
                    }
                }
            }
            let lay = self.layout[l];
            let (dw, db, g_in) = conv2d_backward(
                &cache.layer_inputs[l],
                cache.width,
                cache.height,
                spec,
                self.layer_weights(l),
                &g_out,
            );
            grad[lay.weights..lay.weights + lay.n_weights].copy_from_slice(&dw);
            grad[lay.biases..lay.biases + lay.n_biases].copy_from_slice(&db);
            g_out = g_in;
        }
        Ok(grad)
    }

    /// Text header (architecture) followed by the little-endian f64
    /// parameter block.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "deepkem-net v1")?;
        writeln!(w, "residual {}", u8::from(self.arch.residual))?;
        writeln!(w, "layers {}", self.arch.layers.len())?;
        for l in &self.arch.layers {
            writeln!(
                w,
                "conv {} {} {} {}",
                l.in_channels,
                l.out_channels,
                l.kernel_size,
                if l.nonlinearity { "ramp" } else { "linear" }
            )?;
        }
        writeln!(w, "params {}", self.params.len())?;
        writeln!(w, "end")?;
        for &p in &self.params {
            w.write_all(&p.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(r: impl Read) -> Result<Self> {
        let mut reader = std::io::BufReader::new(r);
        let mut line = String::new();
        let mut next_line = |reader: &mut std::io::BufReader<_>| -> Result<String> {
            line.clear();
            if reader.read_line(&mut line)? == 0 {
                return Err(Error::Format("truncated network header".to_string()));
            }
            Ok(line.trim_end().to_string())
        };

        if next_line(&mut reader)? != "deepkem-net v1" {
            return Err(Error::Format("bad network magic".to_string()));
        }
        let residual_line = next_line(&mut reader)?;
        let residual = match residual_line.strip_prefix("residual ") {
            Some("1") => true,
            Some("0") => false,
            _ => return Err(Error::Format(format!("bad residual line: {residual_line}"))),
        };
        let layers_line = next_line(&mut reader)?;
        let n_layers: usize = layers_line
            .strip_prefix("layers ")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format(format!("bad layers line: {layers_line}")))?;
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let l = next_line(&mut reader)?;
            let parts: Vec<&str> = l.split_whitespace().collect();
            if parts.len() != 5 || parts[0] != "conv" {
                return Err(Error::Format(format!("bad layer line: {l}")));
            }
            layers.push(ConvSpec {
                in_channels: parts[1]
                    .parse()
                    .map_err(|_| Error::Format(format!("bad layer line: {l}")))?,
                out_channels: parts[2]
                    .parse()
                    .map_err(|_| Error::Format(format!("bad layer line: {l}")))?,
                kernel_size: parts[3]
                    .parse()
                    .map_err(|_| Error::Format(format!("bad layer line: {l}")))?,
                nonlinearity: match parts[4] {
                    "ramp" => true,
                    "linear" => false,
                    _ => return Err(Error::Format(format!("bad layer line: {l}"))),
                },
            });
        }
        let params_line = next_line(&mut reader)?;
        let n_params: usize = params_line
            .strip_prefix("params ")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format(format!("bad params line: {params_line}")))?;
        if next_line(&mut reader)? != "end" {
            return Err(Error::Format("missing end marker".to_string()));
        }

        let mut net = FeatureNetwork::new(NetworkArchitecture { layers, residual })?;
        if net.params.len() != n_params {
            return Err(Error::Format(format!(
                "parameter count {n_params} does not match architecture ({})",
                net.params.len()
            )));
        }
        let mut buf = [0u8; 8];
        for p in &mut net.params {
            reader.read_exact(&mut buf)?;
            *p = f64::from_le_bytes(buf);
            if !p.is_finite() {
                return Err(Error::NonFinite("network parameters"));
            }
        }
        Ok(net)
    }
}

/// Network features plus the cached activations needed for backprop.
pub struct NetworkOutput {
    pub features: FeatureSet,
    pub cache: ActivationCache,
}

pub struct ActivationCache {
    width: usize,
    height: usize,
    /// Input channel stack of each layer (element 0 is the network input).
    layer_inputs: Vec<Vec<Vec<f64>>>,
    /// Convolution outputs before the nonlinearity.
    pre_activations: Vec<Vec<Vec<f64>>>,
}

#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Same-padded 2D convolution: one output slot per (channel, pixel) task.
fn conv2d_forward(
    input: &[Vec<f64>],
    width: usize,
    height: usize,
    spec: &ConvSpec,
    weights: &[f64],
    biases: &[f64],
) -> Vec<Vec<f64>> {
    let k = spec.kernel_size;
    let pad = (k / 2) as isize;
    let taps = k * k;
    (0..spec.out_channels)
        .map(|oc| {
            let mut out = vec![0.0; width * height];
            par::for_each_mut(&mut out, |p, v| {
                let x = (p % width) as isize;
                let y = (p / width) as isize;
                let mut acc = biases[oc];
                for (ic, in_ch) in input.iter().enumerate() {
                    let w_base = (oc * spec.in_channels + ic) * taps;
                    for ky in 0..k {
                        let yy = y + ky as isize - pad;
                        if yy < 0 || yy >= height as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let xx = x + kx as isize - pad;
                            if xx < 0 || xx >= width as isize {
                                continue;
                            }
                            acc += weights[w_base + ky * k + kx]
                                * in_ch[yy as usize * width + xx as usize];
                        }
                    }
                }
                *v = acc;
            });
            out
        })
        .collect()
}

/// Gradients of a same-padded convolution: weight gradients are computed
/// per output channel (serial over pixels, deterministic), the input
/// gradient as a per-pixel gather over the transposed stencil.
fn conv2d_backward(
    input: &[Vec<f64>],
    width: usize,
    height: usize,
    spec: &ConvSpec,
    weights: &[f64],
    grad_out: &[Vec<f64>],
) -> (Vec<f64>, Vec<f64>, Vec<Vec<f64>>) {
    let k = spec.kernel_size;
    let pad = (k / 2) as isize;
    let taps = k * k;

    let per_oc: Vec<(Vec<f64>, f64)> = par::map_collect(spec.out_channels, |oc| {
        let g = &grad_out[oc];
        let mut dw = vec![0.0; spec.in_channels * taps];
        let mut db = 0.0;
        for y in 0..height as isize {
            for x in 0..width as isize {
                let gv = g[y as usize * width + x as usize];
                db += gv;
                if gv == 0.0 {
                    continue;
                }
                for (ic, in_ch) in input.iter().enumerate() {
                    for ky in 0..k {
                        let yy = y + ky as isize - pad;
                        if yy < 0 || yy >= height as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let xx = x + kx as isize - pad;
                            if xx < 0 || xx >= width as isize {
                                continue;
                            }
                            dw[ic * taps + ky * k + kx] +=
                                gv * in_ch[yy as usize * width + xx as usize];
                        }
                    }
                }
            }
        }
        (dw, db)
    });

    let mut dw_flat = vec![0.0; spec.out_channels * spec.in_channels * taps];
    let mut db = vec![0.0; spec.out_channels];
    for (oc, (dw, b)) in per_oc.into_iter().enumerate() {
        dw_flat[oc * spec.in_channels * taps..(oc + 1) * spec.in_channels * taps]
            .copy_from_slice(&dw);
        db[oc] = b;
    }

    let g_in: Vec<Vec<f64>> = (0..spec.in_channels)
        .map(|ic| {
            let mut g = vec![0.0; width * height];
            par::for_each_mut(&mut g, |p, v| {
                let x = (p % width) as isize;
                let y = (p / width) as isize;
                let mut acc = 0.0;
                for (oc, g_out_ch) in grad_out.iter().enumerate() {
                    let w_base = (oc * spec.in_channels + ic) * taps;
                    for ky in 0..k {
                        let yo = y - (ky as isize - pad);
                        if yo < 0 || yo >= height as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let xo = x - (kx as isize - pad);
                            if xo < 0 || xo >= width as isize {
                                continue;
                            }
                            acc += weights[w_base + ky * k + kx]
                                * g_out_ch[yo as usize * width + xo as usize];
                        }
                    }
                }
                *v = acc;
            });
            g
        })
        .collect();

    (dw_flat, db, g_in)
}
