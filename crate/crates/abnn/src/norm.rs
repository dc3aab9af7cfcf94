//! Batch normalization, per-channel statistics, and the adaptive BN layer.
//!
//! A standard BN layer rescales a standardized feature with learned
//! per-channel parameters. The adaptive layer instead re-standardizes the
//! target feature and recolors it with statistics and scale/shift
//! parameters derived from a substitute network's feature by a learned
//! encoder, so the normalization constants no longer come from the
//! (possibly attacked) target activations alone.

use rand::Rng;

use crate::tensor::{Graph, ParamId, ParamStore, Tensor, TensorError, Var};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

/// Per-channel mean and standard deviation with the stabilizer that was
/// added under the square root.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub eps: f64,
}

impl BnStats {
    /// Identity statistics: zero mean, unit deviation.
    pub fn identity(channels: usize, eps: f64) -> Self {
        BnStats { mu: vec![0.0; channels], sigma: vec![1.0; channels], eps }
    }

    pub fn channels(&self) -> usize {
        self.mu.len()
    }
}

fn channel_layout(shape: &[usize]) -> Result<(usize, usize), TensorError> {
    match shape.len() {
        2 => Ok((shape[1], 1)),
        4 => Ok((shape[1], shape[2] * shape[3])),
        _ => Err(TensorError::Shape {
            op: "compute_bn_stats",
            detail: format!("expected 2-D or 4-D input, got {shape:?}"),
        }),
    }
}

/// Per-channel mean and `sqrt(var + eps)` over batch and spatial axes,
/// with population (biased) variance.
pub fn compute_bn_stats(z: &Tensor, eps: f64) -> Result<BnStats, TensorError> {
    let (channels, inner) = channel_layout(z.shape())?;
    if z.numel() == 0 {
        return Err(TensorError::Empty { op: "compute_bn_stats" });
    }
    let count = (z.numel() / channels) as f64;
    let mut mu = vec![0.0; channels];
    for (i, &v) in z.data().iter().enumerate() {
        mu[(i / inner) % channels] += v;
    }
    for m in &mut mu {
        *m /= count;
    }
    let mut var = vec![0.0; channels];
    for (i, &v) in z.data().iter().enumerate() {
        let c = (i / inner) % channels;
        let d = v - mu[c];
        var[c] += d * d;
    }
    let sigma = var.iter().map(|v| (v / count + eps).sqrt()).collect();
    Ok(BnStats { mu, sigma, eps })
}

/// Differentiable per-channel `(mu, sigma)` of a graph value, matching
/// [`compute_bn_stats`].
pub fn graph_channel_stats(
    g: &mut Graph,
    x: Var,
    eps: f64,
) -> Result<(Var, Var), TensorError> {
    let mu = g.channel_mean(x)?;
    let centered = g.channel_sub(x, mu)?;
    let sq = g.mul(centered, centered)?;
    let var = g.channel_mean(sq)?;
    let stabilized = g.add_scalar(var, eps);
    let sigma = g.sqrt(stabilized);
    Ok((mu, sigma))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with current-batch statistics; caller is expected to feed
    /// the returned batch stats into [`BatchNorm::update_running`].
    Train,
    /// Normalize with stored running statistics; mutates nothing.
    Eval,
}

/// Standard batch normalization with learned per-channel scale and shift.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running: BnStats,
    pub momentum: f64,
    pub eps: f64,
    pub channels: usize,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(vec![channels], 1.0));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(vec![channels]));
        BatchNorm {
            gamma,
            beta,
            running: BnStats::identity(channels, DEFAULT_EPS),
            momentum: DEFAULT_MOMENTUM,
            eps: DEFAULT_EPS,
            channels,
        }
    }

    /// `gamma * (z - mu) / sigma + beta`, with the statistics chosen by
    /// `mode`. In train mode the statistics are part of the graph, so they
    /// participate in the gradient; the plain batch stats are returned for
    /// the running-average update.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        z: Var,
        mode: BnMode,
    ) -> Result<(Var, Option<BnStats>), TensorError> {
        let (channels, _) = channel_layout(g.shape(z))?;
        if channels != self.channels {
            return Err(TensorError::Shape {
                op: "batch_norm_forward",
                detail: format!("layer has {} channels, input has {channels}", self.channels),
            });
        }
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        let (xhat, batch) = match mode {
            BnMode::Train => {
                let (mu, sigma) = graph_channel_stats(g, z, self.eps)?;
                let centered = g.channel_sub(z, mu)?;
                let xhat = g.channel_div(centered, sigma)?;
                let stats = compute_bn_stats(&g.value_tensor(z), self.eps)?;
                (xhat, Some(stats))
            }
            BnMode::Eval => {
                let mu = g.constant(&Tensor::new(self.running.mu.clone(), vec![channels])?);
                let sigma = g.constant(&Tensor::new(self.running.sigma.clone(), vec![channels])?);
                let centered = g.channel_sub(z, mu)?;
                (g.channel_div(centered, sigma)?, None)
            }
        };
        let scaled = g.channel_mul(xhat, gamma)?;
        let out = g.channel_add(scaled, beta)?;
        Ok((out, batch))
    }

    /// Exponential moving average over mean and deviation.
    pub fn update_running(&mut self, batch: &BnStats) {
        let m = self.momentum;
        for c in 0..self.channels {
            self.running.mu[c] = (1.0 - m) * self.running.mu[c] + m * batch.mu[c];
            self.running.sigma[c] = (1.0 - m) * self.running.sigma[c] + m * batch.sigma[c];
        }
    }
}

/// Adaptive parameters produced by the encoder for one block: statistics
/// mapped onto the target's channel space plus the scale/shift pair.
pub struct AdaInParams {
    pub mapped_mu: Var,
    pub mapped_sigma: Var,
    pub gamma: Var,
    pub beta: Var,
}

/// Learned affine map from substitute channel statistics `[mu_s || sigma_s]`
/// (length `2 * c_sub`) to `4 * c_tgt` values: mapped mean, mapped deviation
/// (through softplus + eps to stay positive), scale, and shift.
#[derive(Debug, Clone)]
pub struct AdaInEncoder {
    pub weight: ParamId,
    pub bias: ParamId,
    pub c_sub: usize,
    pub c_tgt: usize,
    pub eps: f64,
}

impl AdaInEncoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_sub: usize,
        c_tgt: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let weight =
            Tensor::uniform(vec![2 * c_sub, 4 * c_tgt], -1e-2, 1e-2, rng);
        // Bias chosen so the initial output sits at the identity-reduction
        // point: mapped stats near (0, 1), scale/shift near (1, 0).
        let mut bias = vec![0.0; 4 * c_tgt];
        let sigma_raw = softplus_inverse(1.0 - DEFAULT_EPS);
        for c in 0..c_tgt {
            bias[c_tgt + c] = sigma_raw;
            bias[2 * c_tgt + c] = 1.0;
        }
        let weight = store.add(format!("{name}.weight"), weight);
        let bias = store.add(format!("{name}.bias"), Tensor::new(bias, vec![4 * c_tgt]).unwrap());
        AdaInEncoder { weight, bias, c_sub, c_tgt, eps: DEFAULT_EPS }
    }

    /// Encode a substitute feature into adaptive parameters. The statistics
    /// of `z_s` are computed in-graph, so gradient reaches the input only
    /// if `z_s` itself requires it; the encoder parameters always do.
    pub fn encode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        z_s: Var,
    ) -> Result<AdaInParams, TensorError> {
        let (channels, _) = channel_layout(g.shape(z_s))?;
        if channels != self.c_sub {
            return Err(TensorError::Shape {
                op: "adain_encode",
                detail: format!("encoder expects {} substitute channels, got {channels}", self.c_sub),
            });
        }
        let (mu_s, sigma_s) = graph_channel_stats(g, z_s, self.eps)?;
        let stats = g.concat(mu_s, sigma_s)?;
        let row = g.reshape(stats, vec![1, 2 * self.c_sub])?;
        let weight = g.param(store, self.weight);
        let bias = g.param(store, self.bias);
        let mapped = g.linear(row, weight, bias)?;
        let flat = g.reshape(mapped, vec![4 * self.c_tgt])?;
        let c = self.c_tgt;
        let mapped_mu = g.slice(flat, 0, c)?;
        let sigma_raw = g.slice(flat, c, c)?;
        let soft = g.softplus(sigma_raw);
        let mapped_sigma = g.add_scalar(soft, self.eps);
        let gamma = g.slice(flat, 2 * c, c)?;
        let beta = g.slice(flat, 3 * c, c)?;
        Ok(AdaInParams { mapped_mu, mapped_sigma, gamma, beta })
    }
}

/// Inverse of `ln(1 + e^x)`.
fn softplus_inverse(y: f64) -> f64 {
    (y.exp() - 1.0).ln()
}

/// Test-only overrides that pin the adaptive parameters to fixed points.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormOverride {
    /// Mapped stats equal the target batch stats, scale/shift equal (1, 0):
    /// the layer collapses to the identity on its input.
    Identity,
    /// Mapped stats pinned to (0, 1), scale/shift to (1, 0): the layer
    /// equals a standard BN layer with unit scale and zero shift.
    Standardize,
}

/// The adaptive normalization unit deployed after each target block.
#[derive(Debug, Clone)]
pub struct AdaptiveBatchNorm {
    pub encoder: AdaInEncoder,
    pub eps: f64,
}

impl AdaptiveBatchNorm {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_sub: usize,
        c_tgt: usize,
        rng: &mut impl Rng,
    ) -> Self {
        AdaptiveBatchNorm {
            encoder: AdaInEncoder::new(store, &format!("{name}.adain"), c_sub, c_tgt, rng),
            eps: DEFAULT_EPS,
        }
    }

    /// Re-standardize `z_t` with its own batch statistics, recolor with the
    /// encoder-mapped substitute statistics, then scale and shift:
    /// `gamma_s * (sigma_map * (z_t - mu_t) / sigma_t + mu_map) + beta_s`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        z_t: Var,
        z_s: Var,
        over: Option<NormOverride>,
    ) -> Result<Var, TensorError> {
        let (c_tgt, _) = channel_layout(g.shape(z_t))?;
        if c_tgt != self.encoder.c_tgt {
            return Err(TensorError::Shape {
                op: "adaptive_bn_forward",
                detail: format!("layer emits {} channels, input has {c_tgt}", self.encoder.c_tgt),
            });
        }
        let (mu_t, sigma_t) = graph_channel_stats(g, z_t, self.eps)?;
        let centered = g.channel_sub(z_t, mu_t)?;
        let xhat = g.channel_div(centered, sigma_t)?;

        let ones = Tensor::full(vec![c_tgt], 1.0);
        let zeros = Tensor::zeros(vec![c_tgt]);
        let params = match over {
            None => self.encoder.encode(g, store, z_s)?,
            Some(NormOverride::Identity) => AdaInParams {
                mapped_mu: mu_t,
                mapped_sigma: sigma_t,
                gamma: g.constant(&ones),
                beta: g.constant(&zeros),
            },
            Some(NormOverride::Standardize) => AdaInParams {
                mapped_mu: g.constant(&zeros),
                mapped_sigma: g.constant(&ones),
                gamma: g.constant(&ones),
                beta: g.constant(&zeros),
            },
        };
        let recolored = g.channel_mul(xhat, params.mapped_sigma)?;
        let shifted = g.channel_add(recolored, params.mapped_mu)?;
        let scaled = g.channel_mul(shifted, params.gamma)?;
        g.channel_add(scaled, params.beta)
    }
}
