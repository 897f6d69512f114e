//! The slice-scoring network and its bag-level forward/backward passes.
//!
//! A bag is one straightened volume's sampled slices, shaped `[S, H, W, C]`.
//! Every slice runs through a shared stack of convolution blocks (each block
//! is `convs_per_block` conv+batchnorm+relu layers followed by 2x2 max
//! pooling), global average pooling, and a dense+sigmoid head that yields a
//! per-slice probability. The bag probability is the adaptive exponential
//! pooling of the slice probabilities, with the sharpness `alpha` trained
//! alongside the weights.
//!
//! Batch normalisation treats the slices of one bag as its batch, so a
//! training-mode forward needs at least two slices. Forward passes are pure:
//! updated running statistics are returned to the caller, which applies them
//! explicitly via [`MilModel::apply_bn_updates`].

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::adaptive::{adaptive_pool, AdaptivePool};
use super::ops::{
    batchnorm_backward, batchnorm_forward, conv2d_backward, conv2d_forward, dense_backward,
    dense_forward, global_avg_pool_backward, global_avg_pool_forward, maxpool2x2_backward,
    maxpool2x2_forward, relu_backward, relu_forward, sigmoid_backward, sigmoid_forward,
    BatchNormCache, BnMode, MaxPoolCache,
};
use super::scalar::Scalar;
use super::tensor::Tensor;
use super::MilError;

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MilConfig {
    /// Number of conv blocks; each halves the spatial extent.
    pub blocks: usize,
    /// Conv+batchnorm+relu layers per block.
    pub convs_per_block: usize,
    /// Channels produced by every conv layer.
    pub filters: usize,
    /// Channels of the input slices.
    pub in_channels: usize,
    /// Square conv kernel side; must be odd.
    pub kernel: usize,
    /// Running-statistics decay: `r' = momentum * r + (1 - momentum) * batch`.
    pub bn_momentum: f64,
    /// Stabiliser added to variances before the square root.
    pub bn_eps: f64,
    /// Initial pooling sharpness.
    pub alpha_init: f64,
}

impl Default for MilConfig {
    fn default() -> Self {
        Self {
            blocks: 4,
            convs_per_block: 3,
            filters: 64,
            in_channels: 3,
            kernel: 3,
            bn_momentum: 0.9,
            bn_eps: 1e-5,
            alpha_init: 1.0,
        }
    }
}

impl MilConfig {
    pub fn validate(&self) -> Result<(), MilError> {
        if self.blocks == 0 || self.convs_per_block == 0 {
            return Err(MilError::BadConfig(
                "blocks and convs_per_block must be at least 1".into(),
            ));
        }
        if self.filters == 0 || self.in_channels == 0 {
            return Err(MilError::BadConfig(
                "filters and in_channels must be at least 1".into(),
            ));
        }
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return Err(MilError::BadConfig(format!(
                "kernel must be odd and positive, got {}",
                self.kernel
            )));
        }
        if !(0.0..1.0).contains(&self.bn_momentum) {
            return Err(MilError::BadConfig(format!(
                "bn_momentum must be in [0, 1), got {}",
                self.bn_momentum
            )));
        }
        if !(self.bn_eps > 0.0) || !self.bn_eps.is_finite() {
            return Err(MilError::BadConfig(format!(
                "bn_eps must be positive and finite, got {}",
                self.bn_eps
            )));
        }
        if !self.alpha_init.is_finite() {
            return Err(MilError::BadConfig("alpha_init must be finite".into()));
        }
        Ok(())
    }

    fn n_layers(&self) -> usize {
        self.blocks * self.convs_per_block
    }
}

/// One conv+batchnorm unit's parameters and running statistics.
#[derive(Debug, Clone)]
pub struct ConvLayer<T> {
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
}

/// The full model.
#[derive(Debug, Clone)]
pub struct MilModel<T> {
    config: MilConfig,
    pub layers: Vec<ConvLayer<T>>,
    pub head_w: Tensor<T>,
    pub head_b: Tensor<T>,
    /// Pooling sharpness, stored as a one-element tensor so it joins the
    /// flat parameter-group list.
    pub alpha: Tensor<T>,
}

struct LayerCache<T> {
    conv_out: Tensor<T>,
    bn_cache: Option<BatchNormCache<T>>,
    relu_out: Tensor<T>,
}

struct SliceCache<T> {
    mode: BnMode,
    /// Input to each block's first conv (the slice batch, then pool outputs).
    block_inputs: Vec<Tensor<T>>,
    layer_caches: Vec<LayerCache<T>>,
    pool_caches: Vec<MaxPoolCache>,
    gap_in_shape: [usize; 4],
    /// Dense-layer input, `[N, filters]`.
    gap_out: Tensor<T>,
    /// Sigmoid output, `[N, 1]`.
    sig_out: Tensor<T>,
}

/// Per-slice scores and activation caches from [`MilModel::forward_slices`].
///
/// The slices need not come from a single volume: a trainer can concatenate
/// the bags of a minibatch (when their spatial dims agree) so the batchnorm
/// statistics cover the whole minibatch, then pool each bag's segment of
/// `slice_scores` separately.
pub struct SliceForward<T> {
    pub slice_scores: Vec<T>,
    /// Updated `(running_mean, running_var)` per layer in training mode;
    /// empty in inference mode. Not yet applied to the model.
    pub bn_updates: Vec<(Vec<T>, Vec<T>)>,
    /// Raw biased batch `(mean, var, element count)` per layer in training
    /// mode; empty in inference mode. A trainer that runs several forwards
    /// between running-statistic commits should pool these (element-count
    /// weighted, keeping the spread of the per-forward means) instead of
    /// averaging the momentum-blended `bn_updates`.
    pub batch_stats: Vec<(Vec<T>, Vec<T>, usize)>,
    cache: SliceCache<T>,
}

/// Everything produced by a bag forward pass.
pub struct BagForward<T> {
    pub slice_scores: Vec<T>,
    pub bag_score: T,
    /// See [`SliceForward::bn_updates`].
    pub bn_updates: Vec<(Vec<T>, Vec<T>)>,
    /// See [`SliceForward::batch_stats`].
    pub batch_stats: Vec<(Vec<T>, Vec<T>, usize)>,
    cache: SliceCache<T>,
    pool: AdaptivePool<T>,
}

/// Gradients for one conv+batchnorm unit.
#[derive(Debug, Clone)]
pub struct LayerGrads<T> {
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

/// Gradients for every trainable parameter, mirroring the model layout.
#[derive(Debug, Clone)]
pub struct BagGradients<T> {
    pub layers: Vec<LayerGrads<T>>,
    pub head_w: Tensor<T>,
    pub head_b: Tensor<T>,
    pub alpha: Tensor<T>,
}

impl<T: Scalar> BagGradients<T> {
    /// All-zero gradients shaped like the model's trainable parameters.
    pub fn zeros_like(model: &MilModel<T>) -> Self {
        Self {
            layers: model
                .layers
                .iter()
                .map(|l| LayerGrads {
                    kernel: Tensor::zeros(l.kernel.shape()),
                    bias: Tensor::zeros(l.bias.shape()),
                    gamma: Tensor::zeros(l.gamma.shape()),
                    beta: Tensor::zeros(l.beta.shape()),
                })
                .collect(),
            head_w: Tensor::zeros(model.head_w.shape()),
            head_b: Tensor::zeros(model.head_b.shape()),
            alpha: Tensor::zeros(&[1]),
        }
    }

    /// Element-wise accumulation; layouts must match.
    pub fn add(&mut self, other: &Self) -> Result<(), MilError> {
        let mut mine = self.slices_mut();
        let theirs = other.slices();
        if mine.len() != theirs.len() {
            return Err(MilError::Shape("gradient layouts differ".into()));
        }
        for (m, t) in mine.iter_mut().zip(theirs) {
            if m.len() != t.len() {
                return Err(MilError::Shape("gradient group sizes differ".into()));
            }
            for (a, &b) in m.iter_mut().zip(t) {
                *a = *a + b;
            }
        }
        Ok(())
    }

    /// Multiplies every gradient by `s` (e.g. `1 / batch_size`).
    pub fn scale(&mut self, s: T) {
        for group in self.slices_mut() {
            for v in group {
                *v = *v * s;
            }
        }
    }

    /// Flat group views in the model's canonical parameter order.
    pub fn slices(&self) -> Vec<&[T]> {
        let mut out = Vec::with_capacity(self.layers.len() * 4 + 3);
        for l in &self.layers {
            out.push(l.kernel.data());
            out.push(l.bias.data());
            out.push(l.gamma.data());
            out.push(l.beta.data());
        }
        out.push(self.head_w.data());
        out.push(self.head_b.data());
        out.push(self.alpha.data());
        out
    }

    fn slices_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = Vec::with_capacity(self.layers.len() * 4 + 3);
        for l in &mut self.layers {
            out.push(l.kernel.data_mut());
            out.push(l.bias.data_mut());
            out.push(l.gamma.data_mut());
            out.push(l.beta.data_mut());
        }
        out.push(self.head_w.data_mut());
        out.push(self.head_b.data_mut());
        out.push(self.alpha.data_mut());
        out
    }
}

impl<T: Scalar> MilModel<T> {
    /// Fan-in-scaled uniform initialisation: conv and head weights are drawn
    /// from `U(-b, b)` with `b = sqrt(6 / fan_in)` (variance `2 / fan_in`),
    /// batchnorm starts as the identity, biases at zero, and `alpha` at its
    /// configured initial value. Deterministic in `seed`.
    pub fn init(config: &MilConfig, seed: u64) -> Result<Self, MilError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = config.kernel;
        let f = config.filters;
        let mut layers = Vec::with_capacity(config.n_layers());
        for idx in 0..config.n_layers() {
            let cin = if idx == 0 { config.in_channels } else { f };
            let bound = (6.0 / (k * k * cin) as f64).sqrt();
            let kern: Vec<T> = (0..k * k * cin * f)
                .map(|_| T::from_f64(rng.random_range(-bound..bound)))
                .collect();
            layers.push(ConvLayer {
                kernel: Tensor::from_vec(&[k, k, cin, f], kern)?,
                bias: Tensor::zeros(&[f]),
                gamma: Tensor::from_vec(&[f], vec![T::one(); f])?,
                beta: Tensor::zeros(&[f]),
                running_mean: Tensor::zeros(&[f]),
                running_var: Tensor::from_vec(&[f], vec![T::one(); f])?,
            });
        }
        let head_bound = (6.0 / f as f64).sqrt();
        let head_w: Vec<T> = (0..f)
            .map(|_| T::from_f64(rng.random_range(-head_bound..head_bound)))
            .collect();
        Ok(Self {
            config: config.clone(),
            layers,
            head_w: Tensor::from_vec(&[f, 1], head_w)?,
            head_b: Tensor::zeros(&[1]),
            alpha: Tensor::from_vec(&[1], vec![T::from_f64(config.alpha_init)])?,
        })
    }

    pub fn config(&self) -> &MilConfig {
        &self.config
    }

    /// Current pooling sharpness.
    pub fn alpha(&self) -> T {
        self.alpha.data()[0]
    }

    /// Number of trainable parameters (running statistics excluded).
    pub fn num_params(&self) -> usize {
        self.param_group_sizes().iter().sum()
    }

    /// Sizes of the flat parameter groups, in canonical order: per layer
    /// kernel, bias, gamma, beta; then head weight, head bias, alpha.
    pub fn param_group_sizes(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.layers.len() * 4 + 3);
        for l in &self.layers {
            out.push(l.kernel.numel());
            out.push(l.bias.numel());
            out.push(l.gamma.numel());
            out.push(l.beta.numel());
        }
        out.push(self.head_w.numel());
        out.push(self.head_b.numel());
        out.push(1);
        out
    }

    /// Read-only flat views of the trainable parameters.
    pub fn param_slices(&self) -> Vec<&[T]> {
        let mut out = Vec::with_capacity(self.layers.len() * 4 + 3);
        for l in &self.layers {
            out.push(l.kernel.data());
            out.push(l.bias.data());
            out.push(l.gamma.data());
            out.push(l.beta.data());
        }
        out.push(self.head_w.data());
        out.push(self.head_b.data());
        out.push(self.alpha.data());
        out
    }

    /// Mutable flat views of the trainable parameters, for the optimiser.
    pub fn param_slices_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = Vec::with_capacity(self.layers.len() * 4 + 3);
        for l in &mut self.layers {
            out.push(l.kernel.data_mut());
            out.push(l.bias.data_mut());
            out.push(l.gamma.data_mut());
            out.push(l.beta.data_mut());
        }
        out.push(self.head_w.data_mut());
        out.push(self.head_b.data_mut());
        out.push(self.alpha.data_mut());
        out
    }

    /// Commits running-statistic updates returned by a training forward.
    pub fn apply_bn_updates(&mut self, updates: &[(Vec<T>, Vec<T>)]) -> Result<(), MilError> {
        if updates.len() != self.layers.len() {
            return Err(MilError::Shape(format!(
                "expected {} batchnorm updates, got {}",
                self.layers.len(),
                updates.len()
            )));
        }
        for (layer, (rm, rv)) in self.layers.iter_mut().zip(updates) {
            if rm.len() != layer.running_mean.numel() || rv.len() != layer.running_var.numel() {
                return Err(MilError::Shape("batchnorm update size mismatch".into()));
            }
            layer.running_mean.data_mut().copy_from_slice(rm);
            layer.running_var.data_mut().copy_from_slice(rv);
        }
        Ok(())
    }

    /// Converts every parameter to another scalar type (e.g. `f32 -> f64`
    /// for finite-difference verification).
    pub fn cast<U: Scalar>(&self) -> MilModel<U> {
        MilModel {
            config: self.config.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| ConvLayer {
                    kernel: l.kernel.cast(),
                    bias: l.bias.cast(),
                    gamma: l.gamma.cast(),
                    beta: l.beta.cast(),
                    running_mean: l.running_mean.cast(),
                    running_var: l.running_var.cast(),
                })
                .collect(),
            head_w: self.head_w.cast(),
            head_b: self.head_b.cast(),
            alpha: self.alpha.cast(),
        }
    }

    /// Scores a batch of slices: blocks, global average pool, dense, sigmoid.
    ///
    /// `x` is `[N, H, W, in_channels]`. In training mode the `N` slices are
    /// the batchnorm batch (so `N >= 2`) and the result carries the caches
    /// for [`MilModel::backward_slices`] plus measured batch statistics; in
    /// inference mode running statistics are used as-is.
    pub fn forward_slices(&self, x: &Tensor<T>, mode: BnMode) -> Result<SliceForward<T>, MilError> {
        let (s, c) = match x.shape() {
            &[s, h, w, c] if h > 0 && w > 0 => {
                let _ = (h, w);
                (s, c)
            }
            other => {
                return Err(MilError::Shape(format!(
                    "slice batch must be [N,H,W,C] with nonzero spatial extent, got {other:?}"
                )))
            }
        };
        if s == 0 {
            return Err(MilError::Shape("slice batch has no slices".into()));
        }
        if c != self.config.in_channels {
            return Err(MilError::Shape(format!(
                "slice batch has {c} channels, model expects {}",
                self.config.in_channels
            )));
        }

        let mut block_inputs = Vec::with_capacity(self.config.blocks);
        let mut layer_caches = Vec::with_capacity(self.layers.len());
        let mut pool_caches = Vec::with_capacity(self.config.blocks);
        let mut bn_updates = Vec::new();
        let mut batch_stats = Vec::new();

        let mut x = x.clone();
        let mut layer_idx = 0;
        for _ in 0..self.config.blocks {
            block_inputs.push(x.clone());
            for _ in 0..self.config.convs_per_block {
                let layer = &self.layers[layer_idx];
                let conv_out = conv2d_forward(&x, &layer.kernel, &layer.bias)?;
                let bn = batchnorm_forward(
                    &conv_out,
                    &layer.gamma,
                    &layer.beta,
                    &layer.running_mean,
                    &layer.running_var,
                    self.config.bn_momentum,
                    self.config.bn_eps,
                    mode,
                )?;
                if let Some(upd) = bn.new_running {
                    bn_updates.push(upd);
                }
                if let Some(stats) = bn.batch_stats {
                    batch_stats.push(stats);
                }
                let relu_out = relu_forward(&bn.output);
                x = relu_out.clone();
                layer_caches.push(LayerCache {
                    conv_out,
                    bn_cache: bn.cache,
                    relu_out,
                });
                layer_idx += 1;
            }
            let (pooled, cache) = maxpool2x2_forward(&x)?;
            pool_caches.push(cache);
            x = pooled;
        }

        let gap_in_shape = [
            x.shape()[0],
            x.shape()[1],
            x.shape()[2],
            x.shape()[3],
        ];
        let gap_out = global_avg_pool_forward(&x)?;
        let logits = dense_forward(&gap_out, &self.head_w, &self.head_b)?;
        let sig_out = sigmoid_forward(&logits);
        let slice_scores: Vec<T> = sig_out.data().to_vec();

        Ok(SliceForward {
            slice_scores,
            bn_updates,
            batch_stats,
            cache: SliceCache {
                mode,
                block_inputs,
                layer_caches,
                pool_caches,
                gap_in_shape,
                gap_out,
                sig_out,
            },
        })
    }

    /// Runs one bag through the network: [`MilModel::forward_slices`] on the
    /// bag's slices, then adaptive pooling of the slice scores.
    ///
    /// `bag` is `[S, H, W, in_channels]`. In training mode the bag's slices
    /// are the batchnorm batch (so `S >= 2`); in inference mode running
    /// statistics are used as-is.
    pub fn forward_bag(&self, bag: &Tensor<T>, mode: BnMode) -> Result<BagForward<T>, MilError> {
        let sf = self.forward_slices(bag, mode)?;
        let pool = adaptive_pool(&sf.slice_scores, self.alpha())?;
        Ok(BagForward {
            slice_scores: sf.slice_scores,
            bag_score: pool.value,
            bn_updates: sf.bn_updates,
            batch_stats: sf.batch_stats,
            cache: sf.cache,
            pool,
        })
    }

    /// Backpropagates per-slice score gradients (`d_loss/d_score` for each
    /// slice of the forward batch) through a training-mode
    /// [`MilModel::forward_slices`] pass.
    ///
    /// The returned `alpha` gradient is zero: pooling happens outside the
    /// slice network, so its gradient is the caller's to compute.
    pub fn backward_slices(
        &self,
        fwd: &SliceForward<T>,
        d_scores: &[T],
    ) -> Result<BagGradients<T>, MilError> {
        self.backward_from_cache(&fwd.cache, d_scores)
    }

    /// Backpropagates `d_loss/d_bag_score` through a training-mode forward,
    /// returning gradients for every trainable parameter.
    pub fn backward_bag(
        &self,
        fwd: &BagForward<T>,
        d_bag_score: T,
    ) -> Result<BagGradients<T>, MilError> {
        let d_scores: Vec<T> = fwd
            .pool
            .d_scores
            .iter()
            .map(|&d| d * d_bag_score)
            .collect();
        let mut grads = self.backward_from_cache(&fwd.cache, &d_scores)?;
        grads.alpha.data_mut()[0] = fwd.pool.d_alpha * d_bag_score;
        Ok(grads)
    }

    fn backward_from_cache(
        &self,
        cache: &SliceCache<T>,
        d_scores: &[T],
    ) -> Result<BagGradients<T>, MilError> {
        if cache.mode != BnMode::Train {
            return Err(MilError::BadConfig(
                "backward requires a training-mode forward pass".into(),
            ));
        }
        let s = cache.sig_out.shape()[0];
        if d_scores.len() != s {
            return Err(MilError::Shape(format!(
                "got {} score gradients for {s} slices",
                d_scores.len()
            )));
        }
        let d_sig = Tensor::from_vec(&[s, 1], d_scores.to_vec())?;

        let d_logits = sigmoid_backward(&cache.sig_out, &d_sig);
        let (d_gap_out, d_head_w, d_head_b) =
            dense_backward(&cache.gap_out, &self.head_w, &d_logits)?;
        let mut d = global_avg_pool_backward(&d_gap_out, cache.gap_in_shape)?;

        let mut layer_grads: Vec<Option<LayerGrads<T>>> =
            (0..self.layers.len()).map(|_| None).collect();
        for block in (0..self.config.blocks).rev() {
            d = maxpool2x2_backward(&cache.pool_caches[block], &d)?;
            for li in (0..self.config.convs_per_block).rev() {
                let idx = block * self.config.convs_per_block + li;
                let layer = &self.layers[idx];
                let lc = &cache.layer_caches[idx];
                let bn_cache = lc.bn_cache.as_ref().ok_or_else(|| {
                    MilError::BadConfig("missing batchnorm cache in backward".into())
                })?;
                let d_relu = relu_backward(&lc.relu_out, &d);
                let (d_bn, d_gamma, d_beta) =
                    batchnorm_backward(&lc.conv_out, &layer.gamma, bn_cache, &d_relu)?;
                let conv_in = if li == 0 {
                    &cache.block_inputs[block]
                } else {
                    &cache.layer_caches[idx - 1].relu_out
                };
                let (d_x, d_kernel, d_bias) = conv2d_backward(conv_in, &layer.kernel, &d_bn)?;
                layer_grads[idx] = Some(LayerGrads {
                    kernel: d_kernel,
                    bias: d_bias,
                    gamma: d_gamma,
                    beta: d_beta,
                });
                d = d_x;
            }
        }

        Ok(BagGradients {
            layers: layer_grads
                .into_iter()
                .map(|g| g.expect("every layer visited in backward"))
                .collect(),
            head_w: d_head_w,
            head_b: d_head_b,
            alpha: Tensor::zeros(&[1]),
        })
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"MILCKPT1";
const CHECKPOINT_VERSION: u32 = 1;

fn write_err(path: &Path, source: std::io::Error) -> MilError {
    MilError::Write {
        path: path.to_path_buf(),
        source,
    }
}

/// Serialises a model to a binary checkpoint plus a human-readable `.txt`
/// sidecar summarising the architecture and parameter count.
///
/// Layout: magic, version, config (five `u32` + three `f64`, little
/// endian), then every tensor as little-endian `f32` in canonical order
/// (per layer: kernel, bias, gamma, beta, running mean, running var; then
/// head weight, head bias, alpha).
pub fn save_checkpoint(model: &MilModel<f32>, path: &Path) -> Result<(), MilError> {
    let cfg = &model.config;
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for v in [
        cfg.blocks,
        cfg.convs_per_block,
        cfg.filters,
        cfg.in_channels,
        cfg.kernel,
    ] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    buf.extend_from_slice(&cfg.bn_momentum.to_le_bytes());
    buf.extend_from_slice(&cfg.bn_eps.to_le_bytes());
    buf.extend_from_slice(&cfg.alpha_init.to_le_bytes());
    let push_tensor = |t: &Tensor<f32>, buf: &mut Vec<u8>| {
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    };
    for layer in &model.layers {
        push_tensor(&layer.kernel, &mut buf);
        push_tensor(&layer.bias, &mut buf);
        push_tensor(&layer.gamma, &mut buf);
        push_tensor(&layer.beta, &mut buf);
        push_tensor(&layer.running_mean, &mut buf);
        push_tensor(&layer.running_var, &mut buf);
    }
    push_tensor(&model.head_w, &mut buf);
    push_tensor(&model.head_b, &mut buf);
    push_tensor(&model.alpha, &mut buf);
    fs::write(path, &buf).map_err(|e| write_err(path, e))?;

    let sidecar = path.with_extension(format!(
        "{}txt",
        path.extension()
            .map(|e| format!("{}.", e.to_string_lossy()))
            .unwrap_or_default()
    ));
    let mut txt = fs::File::create(&sidecar).map_err(|e| write_err(&sidecar, e))?;
    let mut describe = || -> std::io::Result<()> {
        writeln!(txt, "blocks: {}", cfg.blocks)?;
        writeln!(txt, "convs_per_block: {}", cfg.convs_per_block)?;
        writeln!(txt, "filters: {}", cfg.filters)?;
        writeln!(txt, "in_channels: {}", cfg.in_channels)?;
        writeln!(txt, "kernel: {}", cfg.kernel)?;
        writeln!(txt, "bn_momentum: {}", cfg.bn_momentum)?;
        writeln!(txt, "bn_eps: {}", cfg.bn_eps)?;
        writeln!(txt, "trainable_params: {}", model.num_params())?;
        writeln!(txt, "alpha: {}", model.alpha())?;
        for (i, layer) in model.layers.iter().enumerate() {
            writeln!(txt, "layer[{i}].kernel: {:?}", layer.kernel.shape())?;
        }
        writeln!(txt, "head_w: {:?}", model.head_w.shape())?;
        Ok(())
    };
    describe().map_err(|e| write_err(&sidecar, e))?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], MilError> {
        if self.pos + n > self.buf.len() {
            return Err(MilError::BadCheckpoint {
                path: self.path.to_path_buf(),
                reason: format!(
                    "truncated: wanted {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.buf.len()
                ),
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, MilError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, MilError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensor(&mut self, shape: &[usize]) -> Result<Tensor<f32>, MilError> {
        let n: usize = shape.iter().product();
        let bytes = self.take(n * 4)?;
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Tensor::from_vec(shape, data)
    }
}

/// Loads a checkpoint written by [`save_checkpoint`], validating the magic,
/// version, configuration, and exact payload length.
pub fn load_checkpoint(path: &Path) -> Result<MilModel<f32>, MilError> {
    let buf = fs::read(path).map_err(|e| MilError::Read {
        path: path.to_path_buf(),
        source: e,
    })?;
    let bad = |reason: String| MilError::BadCheckpoint {
        path: path.to_path_buf(),
        reason,
    };
    let mut r = Reader {
        buf: &buf,
        pos: 0,
        path,
    };
    let magic = r.take(8)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(bad(format!("bad magic {magic:02x?}")));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let config = MilConfig {
        blocks: r.u32()? as usize,
        convs_per_block: r.u32()? as usize,
        filters: r.u32()? as usize,
        in_channels: r.u32()? as usize,
        kernel: r.u32()? as usize,
        bn_momentum: r.f64()?,
        bn_eps: r.f64()?,
        alpha_init: r.f64()?,
    };
    config
        .validate()
        .map_err(|e| bad(format!("invalid stored config: {e}")))?;

    let k = config.kernel;
    let f = config.filters;
    let mut layers = Vec::with_capacity(config.n_layers());
    for idx in 0..config.n_layers() {
        let cin = if idx == 0 { config.in_channels } else { f };
        layers.push(ConvLayer {
            kernel: r.tensor(&[k, k, cin, f])?,
            bias: r.tensor(&[f])?,
            gamma: r.tensor(&[f])?,
            beta: r.tensor(&[f])?,
            running_mean: r.tensor(&[f])?,
            running_var: r.tensor(&[f])?,
        });
    }
    let head_w = r.tensor(&[f, 1])?;
    let head_b = r.tensor(&[1])?;
    let alpha = r.tensor(&[1])?;
    if r.pos != buf.len() {
        return Err(bad(format!(
            "{} trailing bytes after payload",
            buf.len() - r.pos
        )));
    }
    Ok(MilModel {
        config,
        layers,
        head_w,
        head_b,
        alpha,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;

    fn tiny_config() -> MilConfig {
        MilConfig {
            blocks: 2,
            convs_per_block: 1,
            filters: 4,
            in_channels: 3,
            kernel: 3,
            ..MilConfig::default()
        }
    }

    fn random_bag(seed: u64, s: usize, hw: usize, c: usize) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..s * hw * hw * c)
            .map(|_| rng.random_range(0.0..1.0))
            .collect();
        Tensor::from_vec(&[s, hw, hw, c], data).unwrap()
    }

    #[test]
    fn init_is_deterministic_in_the_seed() {
        let cfg = tiny_config();
        let a = MilModel::<f32>::init(&cfg, 7).unwrap();
        let b = MilModel::<f32>::init(&cfg, 7).unwrap();
        let c = MilModel::<f32>::init(&cfg, 8).unwrap();
        assert_eq!(a.layers[0].kernel.data(), b.layers[0].kernel.data());
        assert_eq!(a.head_w.data(), b.head_w.data());
        assert_ne!(a.layers[0].kernel.data(), c.layers[0].kernel.data());
        // Batchnorm starts as the identity transform.
        assert!(a.layers[0].gamma.data().iter().all(|&g| g == 1.0));
        assert!(a.layers[0].beta.data().iter().all(|&b| b == 0.0));
        assert!(a.layers[0].running_var.data().iter().all(|&v| v == 1.0));
        assert_eq!(a.alpha(), 1.0);
    }

    #[test]
    fn parameter_count_matches_hand_formula() {
        let cfg = tiny_config();
        let model = MilModel::<f32>::init(&cfg, 0).unwrap();
        // Layer 0: 3*3*3*4 kernel + 4 bias + 4 gamma + 4 beta = 120.
        // Layer 1: 3*3*4*4 + 12 = 156. Head: 4 + 1. Alpha: 1.
        assert_eq!(model.num_params(), 120 + 156 + 4 + 1 + 1);
        let sizes = model.param_group_sizes();
        assert_eq!(sizes.len(), 2 * 4 + 3);
        assert_eq!(*sizes.last().unwrap(), 1);
        assert_eq!(model.param_slices().len(), sizes.len());
    }

    #[test]
    fn forward_produces_probabilities_for_each_slice() {
        let cfg = tiny_config();
        let model = MilModel::<f32>::init(&cfg, 1).unwrap();
        let bag = random_bag(2, 5, 12, 3);
        let fwd = model.forward_bag(&bag, BnMode::Train).unwrap();
        assert_eq!(fwd.slice_scores.len(), 5);
        for &p in &fwd.slice_scores {
            assert!((0.0..=1.0).contains(&p), "score {p} out of range");
        }
        assert!((0.0..=1.0).contains(&fwd.bag_score));
        assert_eq!(fwd.bn_updates.len(), 2);

        let infer = model.forward_bag(&bag, BnMode::Infer).unwrap();
        assert!(infer.bn_updates.is_empty());
        // Fresh running stats differ from batch stats, so outputs differ.
        assert_ne!(fwd.bag_score, infer.bag_score);
    }

    #[test]
    fn forward_rejects_bad_bags() {
        let cfg = tiny_config();
        let model = MilModel::<f32>::init(&cfg, 1).unwrap();
        let wrong_channels = random_bag(3, 4, 8, 2);
        assert!(model.forward_bag(&wrong_channels, BnMode::Infer).is_err());
        let single = random_bag(3, 1, 8, 3);
        // One slice cannot form a batchnorm batch in training mode...
        assert!(matches!(
            model.forward_bag(&single, BnMode::Train),
            Err(MilError::BatchTooSmall(1))
        ));
        // ...but is fine for inference.
        assert!(model.forward_bag(&single, BnMode::Infer).is_ok());
    }

    #[test]
    fn backward_gradient_shapes_mirror_parameters() {
        let cfg = tiny_config();
        let model = MilModel::<f32>::init(&cfg, 1).unwrap();
        let bag = random_bag(4, 4, 10, 3);
        let fwd = model.forward_bag(&bag, BnMode::Train).unwrap();
        let grads = model.backward_bag(&fwd, 1.0).unwrap();
        for (g, p) in grads.slices().iter().zip(model.param_slices()) {
            assert_eq!(g.len(), p.len());
        }
        // Inference-mode forward cannot be backpropagated.
        let infer = model.forward_bag(&bag, BnMode::Infer).unwrap();
        assert!(model.backward_bag(&infer, 1.0).is_err());
    }

    #[test]
    fn gradient_accumulation_scales_and_adds() {
        let cfg = tiny_config();
        let model = MilModel::<f32>::init(&cfg, 1).unwrap();
        let bag = random_bag(5, 3, 8, 3);
        let fwd = model.forward_bag(&bag, BnMode::Train).unwrap();
        let g1 = model.backward_bag(&fwd, 1.0).unwrap();
        let mut acc = BagGradients::zeros_like(&model);
        acc.add(&g1).unwrap();
        acc.add(&g1).unwrap();
        acc.scale(0.5);
        for (a, b) in acc.slices().iter().zip(g1.slices()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert_relative_eq!(*x, *y, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn bn_updates_change_inference_output() {
        let cfg = tiny_config();
        let mut model = MilModel::<f32>::init(&cfg, 1).unwrap();
        let bag = random_bag(6, 4, 8, 3);
        let before = model.forward_bag(&bag, BnMode::Infer).unwrap().bag_score;
        let fwd = model.forward_bag(&bag, BnMode::Train).unwrap();
        model.apply_bn_updates(&fwd.bn_updates).unwrap();
        let after = model.forward_bag(&bag, BnMode::Infer).unwrap().bag_score;
        assert_ne!(before, after);
        // Wrong number of updates is rejected.
        assert!(model.apply_bn_updates(&fwd.bn_updates[..1]).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = std::env::temp_dir().join("milmodel_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.bin");

        let cfg = tiny_config();
        let mut model = MilModel::<f32>::init(&cfg, 42).unwrap();
        // Perturb running stats and alpha so the round trip covers them.
        let bag = random_bag(7, 4, 8, 3);
        let fwd = model.forward_bag(&bag, BnMode::Train).unwrap();
        model.apply_bn_updates(&fwd.bn_updates).unwrap();
        model.alpha.data_mut()[0] = 1.4;

        save_checkpoint(&model, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.config(), model.config());
        for (a, b) in model.layers.iter().zip(&loaded.layers) {
            assert_eq!(a.kernel.data(), b.kernel.data());
            assert_eq!(a.running_mean.data(), b.running_mean.data());
            assert_eq!(a.running_var.data(), b.running_var.data());
        }
        assert_eq!(model.head_w.data(), loaded.head_w.data());
        assert_eq!(model.alpha(), loaded.alpha());
        // The sidecar exists and mentions the parameter count.
        let sidecar = std::fs::read_to_string(dir.join("model.bin.txt")).unwrap();
        assert!(sidecar.contains("trainable_params"));
        // Loaded model predicts identically.
        let a = model.forward_bag(&bag, BnMode::Infer).unwrap().bag_score;
        let b = loaded.forward_bag(&bag, BnMode::Infer).unwrap().bag_score;
        assert_eq!(a, b);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn corrupted_checkpoints_are_rejected() {
        let dir = std::env::temp_dir().join("milmodel_ckpt_corrupt");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.bin");
        let model = MilModel::<f32>::init(&tiny_config(), 3).unwrap();
        save_checkpoint(&model, &path).unwrap();
        let good = std::fs::read(&path).unwrap();

        // Bad magic.
        let mut bad = good.clone();
        bad[0] ^= 0xff;
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(MilError::BadCheckpoint { .. })
        ));

        // Truncated payload.
        std::fs::write(&path, &good[..good.len() - 5]).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(MilError::BadCheckpoint { .. })
        ));

        // Trailing junk.
        let mut long = good.clone();
        long.extend_from_slice(&[0u8; 3]);
        std::fs::write(&path, &long).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(MilError::BadCheckpoint { .. })
        ));

        // Missing file.
        assert!(matches!(
            load_checkpoint(&dir.join("absent.bin")),
            Err(MilError::Read { .. })
        ));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn cast_round_trip_preserves_f32_values() {
        let model = MilModel::<f32>::init(&tiny_config(), 9).unwrap();
        let back: MilModel<f32> = model.cast::<f64>().cast();
        assert_eq!(model.layers[0].kernel.data(), back.layers[0].kernel.data());
        assert_eq!(model.head_w.data(), back.head_w.data());
    }

    #[test]
    fn config_validation_catches_bad_values() {
        let mut cfg = MilConfig::default();
        cfg.kernel = 4;
        assert!(cfg.validate().is_err());
        let mut cfg = MilConfig::default();
        cfg.bn_momentum = 1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = MilConfig::default();
        cfg.blocks = 0;
        assert!(cfg.validate().is_err());
        assert!(MilConfig::default().validate().is_ok());
    }
}
