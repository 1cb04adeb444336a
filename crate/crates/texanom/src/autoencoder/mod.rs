//! Convolutional encoder/decoder, reverse-mode gradients through every layer,
//! the ADAM training loop, and model serialization.

mod adam;
mod ops;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use ops::{
    conv_forward, conv_transpose_forward, leaky_relu, sigmoid, KERNEL, LEAKY_SLOPE, PAD, STRIDE,
};

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dataio::{DatasetIndex, GrayImage, PatchSampler};
use crate::error::{Result, TexanomError};
use crate::pyramid::{Decomposer, DecomposerConfig};
use crate::similarity::{
    cwssim_loss, cwssim_loss_grad, mse_grad, mse_loss, ssim_grad, ssim_loss, CwssimConfig,
    SsimConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum LayerKind {
    Conv,
    ConvTranspose,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
}

/// Layer list of the autoencoder. All layers use kernel 4, stride 2,
/// padding 1; hidden layers are followed by a leaky rectifier (slope 0.2)
/// and the final layer by a sigmoid.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ArchitectureSpec {
    pub layers: Vec<LayerSpec>,
}

impl Default for ArchitectureSpec {
    fn default() -> Self {
        ArchitectureSpec::with_encoder_channels(&[32, 64, 128, 256, 512])
    }
}

impl ArchitectureSpec {
    /// Builds a symmetric autoencoder from the encoder channel widths: the
    /// encoder maps 1 -> ch[0] -> ... -> ch[last], the decoder mirrors back
    /// down to a single channel.
    pub fn with_encoder_channels(channels: &[usize]) -> ArchitectureSpec {
        assert!(!channels.is_empty());
        let mut layers = Vec::new();
        let mut prev = 1;
        for &c in channels {
            layers.push(LayerSpec {
                kind: LayerKind::Conv,
                in_channels: prev,
                out_channels: c,
            });
            prev = c;
        }
        for i in (0..channels.len()).rev() {
            let out = if i == 0 { 1 } else { channels[i - 1] };
            layers.push(LayerSpec {
                kind: LayerKind::ConvTranspose,
                in_channels: channels[i],
                out_channels: out,
            });
        }
        ArchitectureSpec { layers }
    }

    pub fn encoder_len(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| l.kind == LayerKind::Conv)
            .count()
    }

    /// Total trainable parameters: `sum(4*4*in*out + out)` over layers.
    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| KERNEL * KERNEL * l.in_channels * l.out_channels + l.out_channels)
            .sum()
    }

    /// Spatial downsampling factor of the encoder (`2^layers`).
    pub fn encoder_factor(&self) -> usize {
        1 << self.encoder_len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(TexanomError::Config("architecture has no layers".into()));
        }
        if self.layers.first().unwrap().in_channels != 1
            || self.layers.last().unwrap().out_channels != 1
        {
            return Err(TexanomError::Config(
                "architecture must map 1 channel to 1 channel".into(),
            ));
        }
        for pair in self.layers.windows(2) {
            if pair[0].out_channels != pair[1].in_channels {
                return Err(TexanomError::Config(format!(
                    "channel mismatch between layers: {} -> {}",
                    pair[0].out_channels, pair[1].in_channels
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LayerParams {
    pub spec: LayerSpec,
    /// `(out_channels, in_channels, 4, 4)`
    pub weight: Array4<f64>,
    pub bias: Array1<f64>,
}

impl LayerParams {
    pub fn describe(&self) -> String {
        format!(
            "{:?} {}->{}",
            self.spec.kind, self.spec.in_channels, self.spec.out_channels
        )
    }
}

/// Training metadata carried alongside the weights.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TrainMeta {
    pub epochs_seen: u32,
    pub rng_seed: u64,
}

#[derive(Debug, Clone)]
pub struct ModelParams {
    pub spec: ArchitectureSpec,
    pub layers: Vec<LayerParams>,
    pub meta: TrainMeta,
}

impl ModelParams {
    pub fn param_count(&self) -> usize {
        self.spec.param_count()
    }

    pub fn assert_finite(&self) -> Result<()> {
        for l in &self.layers {
            if l.weight.iter().chain(l.bias.iter()).any(|v| !v.is_finite()) {
                return Err(TexanomError::Training(format!(
                    "non-finite parameter in layer {}",
                    l.describe()
                )));
            }
        }
        Ok(())
    }
}

/// Initializes kernels uniformly in `[-b, b]` with `b = 1/sqrt(in_ch * 16)`,
/// biases zero. Deterministic per seed.
pub fn init_model(spec: &ArchitectureSpec, seed: u64) -> Result<ModelParams> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = spec
        .layers
        .iter()
        .map(|&l| {
            let bound = 1.0 / ((l.in_channels * KERNEL * KERNEL) as f64).sqrt();
            let weight = Array4::from_shape_fn(
                (l.out_channels, l.in_channels, KERNEL, KERNEL),
                |_| rng.gen_range(-bound..bound),
            );
            LayerParams {
                spec: l,
                weight,
                bias: Array1::zeros(l.out_channels),
            }
        })
        .collect();
    Ok(ModelParams {
        spec: spec.clone(),
        layers,
        meta: TrainMeta {
            epochs_seen: 0,
            rng_seed: seed,
        },
    })
}

/// Per-layer activation inputs/outputs retained for the backward pass.
pub struct ForwardCache {
    inputs: Vec<Array4<f64>>,
    outputs: Vec<Array4<f64>>,
}

/// Per-layer `(weight, bias)` gradients.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub layers: Vec<(Array4<f64>, Array1<f64>)>,
}

impl Gradients {
    pub fn zeros_like(params: &ModelParams) -> Gradients {
        Gradients {
            layers: params
                .layers
                .iter()
                .map(|l| (Array4::zeros(l.weight.dim()), Array1::zeros(l.bias.dim())))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for ((w, b), (ow, ob)) in self.layers.iter_mut().zip(&other.layers) {
            *w += ow;
            *b += ob;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for (w, b) in &mut self.layers {
            w.mapv_inplace(|v| v * s);
            b.mapv_inplace(|v| v * s);
        }
    }
}

/// Runs the full autoencoder. Returns the latent (encoder output), the
/// reconstruction, and the cache needed by [`backward`].
pub fn forward(
    x: &Array4<f64>,
    params: &ModelParams,
) -> Result<(Array4<f64>, Array4<f64>, ForwardCache)> {
    let (_, c, h, w) = x.dim();
    if c != 1 {
        return Err(TexanomError::Contract(format!("expected 1 input channel, got {c}")));
    }
    let factor = params.spec.encoder_factor();
    if h % factor != 0 || w % factor != 0 {
        return Err(TexanomError::Contract(format!(
            "input {h}x{w} not divisible by encoder factor {factor}"
        )));
    }
    let n_layers = params.layers.len();
    let enc_len = params.spec.encoder_len();
    let mut inputs = Vec::with_capacity(n_layers);
    let mut outputs = Vec::with_capacity(n_layers);
    let mut latent = None;
    let mut act = x.clone();
    for (i, layer) in params.layers.iter().enumerate() {
        inputs.push(act.clone());
        let z = match layer.spec.kind {
            LayerKind::Conv => ops::conv_forward(&act, &layer.weight, &layer.bias),
            LayerKind::ConvTranspose => {
                ops::conv_transpose_forward(&act, &layer.weight, &layer.bias)
            }
        };
        act = if i + 1 == n_layers {
            ops::sigmoid(&z)
        } else {
            ops::leaky_relu(&z)
        };
        outputs.push(act.clone());
        if i + 1 == enc_len {
            latent = Some(act.clone());
        }
    }
    let cache = ForwardCache { inputs, outputs };
    Ok((latent.expect("encoder produced no latent"), act, cache))
}

/// Reverse-mode pass: exact gradients for every kernel and bias given the
/// loss gradient with respect to the reconstruction.
pub fn backward(
    params: &ModelParams,
    cache: &ForwardCache,
    grad_output: &Array4<f64>,
) -> Result<Gradients> {
    let n_layers = params.layers.len();
    if cache.inputs.len() != n_layers {
        return Err(TexanomError::Contract(format!(
            "cache has {} layers, model has {n_layers}",
            cache.inputs.len()
        )));
    }
    if grad_output.dim() != cache.outputs[n_layers - 1].dim() {
        return Err(TexanomError::Contract(
            "output gradient shape does not match cached forward output".into(),
        ));
    }
    let mut grads = vec![None; n_layers];
    let mut g = grad_output.clone();
    for i in (0..n_layers).rev() {
        let layer = &params.layers[i];
        g = if i + 1 == n_layers {
            ops::sigmoid_backward(&cache.outputs[i], &g)
        } else {
            ops::leaky_relu_backward(&cache.outputs[i], &g)
        };
        let (gx, gw, gb) = match layer.spec.kind {
            LayerKind::Conv => ops::conv_backward(&cache.inputs[i], &layer.weight, &g),
            LayerKind::ConvTranspose => {
                ops::conv_transpose_backward(&cache.inputs[i], &layer.weight, &g)
            }
        };
        grads[i] = Some((gw, gb));
        g = gx;
    }
    Ok(Gradients {
        layers: grads.into_iter().map(|o| o.unwrap()).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Cwssim,
    Ssim,
    Mse,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub epochs: usize,
    pub initial_lr: f64,
    /// Learning-rate multiplier applied every `lr_decay_every` epochs.
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub batch_size: usize,
    pub patch_count: usize,
    pub patch_size: usize,
    pub seed: u64,
    pub orientations: usize,
    pub scales: usize,
    pub cwssim_k: f64,
    pub cwssim_window: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss: LossKind::Cwssim,
            epochs: 400,
            initial_lr: 1e-3,
            lr_decay: 0.5,
            lr_decay_every: 20,
            batch_size: 8,
            patch_count: 50_000,
            patch_size: 256,
            seed: 0,
            orientations: 6,
            scales: 5,
            cwssim_k: 0.01,
            cwssim_window: 7,
        }
    }
}

impl TrainConfig {
    /// Scheduled learning rate for a 0-based epoch index; decay steps apply
    /// starting at epochs `lr_decay_every`, `2*lr_decay_every`, ...
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.initial_lr * self.lr_decay.powi((epoch / self.lr_decay_every) as i32)
    }
}

fn derive_seed(seed: u64, label: &str) -> u64 {
    label
        .bytes()
        .fold(seed ^ 0x9e37_79b9_7f4a_7c15, |acc, b| {
            (acc.rotate_left(7) ^ b as u64).wrapping_mul(0x100_0000_01b3)
        })
}

/// Everything the per-sample loss evaluation needs.
struct LossContext {
    kind: LossKind,
    decomposer: Option<Decomposer>,
    cwssim: CwssimConfig,
    ssim: SsimConfig,
}

impl LossContext {
    fn new(cfg: &TrainConfig) -> Result<LossContext> {
        let decomposer = match cfg.loss {
            LossKind::Cwssim => Some(Decomposer::new(DecomposerConfig {
                orientations: cfg.orientations,
                scales: cfg.scales,
                input_size: cfg.patch_size,
            })?),
            _ => None,
        };
        Ok(LossContext {
            kind: cfg.loss,
            decomposer,
            cwssim: CwssimConfig {
                window_size: cfg.cwssim_window,
                k: cfg.cwssim_k,
                stride: 1,
            },
            ssim: SsimConfig::default(),
        })
    }

    fn loss_and_grad(&self, x: &Array2<f64>, y: &Array2<f64>) -> Result<(f64, Array2<f64>)> {
        match self.kind {
            LossKind::Cwssim => {
                let d = self.decomposer.as_ref().unwrap();
                Ok((
                    cwssim_loss(x, y, d, &self.cwssim)?,
                    cwssim_loss_grad(x, y, d, &self.cwssim)?,
                ))
            }
            LossKind::Ssim => Ok((ssim_loss(x, y, &self.ssim)?, ssim_grad(x, y, &self.ssim)?)),
            LossKind::Mse => Ok((mse_loss(x, y)?, mse_grad(x, y)?)),
        }
    }
}

fn patch_to_batch1(p: &Array2<f64>) -> Array4<f64> {
    let (h, w) = p.dim();
    p.clone().into_shape((1, 1, h, w)).unwrap()
}

fn recon_to_patch(r: &Array4<f64>) -> Array2<f64> {
    let (_, _, h, w) = r.dim();
    r.clone().into_shape((h, w)).unwrap()
}

fn sample_loss_and_grads(
    patch: &Array2<f64>,
    params: &ModelParams,
    loss_ctx: &LossContext,
) -> Result<(f64, Gradients)> {
    let x4 = patch_to_batch1(patch);
    let (_, recon, cache) = forward(&x4, params)?;
    let y2 = recon_to_patch(&recon);
    let (loss, grad_y) = loss_ctx.loss_and_grad(patch, &y2)?;
    let g4 = patch_to_batch1(&grad_y);
    let grads = backward(params, &cache, &g4)?;
    Ok((loss, grads))
}

pub struct TrainOutput {
    pub params: ModelParams,
    /// Per-epoch mean loss, one entry per epoch.
    pub loss_history: Vec<f64>,
}

/// Trains on patches sampled from the index's training images.
pub fn train(
    index: &DatasetIndex,
    spec: &ArchitectureSpec,
    cfg: &TrainConfig,
) -> Result<TrainOutput> {
    index.validate()?;
    let images = index
        .train_normal
        .iter()
        .map(crate::dataio::load_image)
        .collect::<Result<Vec<_>>>()?;
    train_on_images(&images, spec, cfg)
}

/// Training entry point over preloaded images.
pub fn train_on_images(
    images: &[GrayImage],
    spec: &ArchitectureSpec,
    cfg: &TrainConfig,
) -> Result<TrainOutput> {
    spec.validate()?;
    if cfg.patch_size % spec.encoder_factor() != 0 {
        return Err(TexanomError::Config(format!(
            "patch size {} not divisible by encoder factor {}",
            cfg.patch_size,
            spec.encoder_factor()
        )));
    }
    let sampler = PatchSampler {
        patch_size: cfg.patch_size,
        count: cfg.patch_count,
        rng_seed: derive_seed(cfg.seed, "sampling"),
    };
    let patches: Vec<Array2<f64>> = sampler
        .sample_patches(images)?
        .into_iter()
        .map(|p| p.into_data())
        .collect();
    let loss_ctx = LossContext::new(cfg)?;
    let mut params = init_model(spec, derive_seed(cfg.seed, "init"))?;
    params.meta.rng_seed = cfg.seed;
    let mut state = AdamState::new(&params);
    let adam_cfg = AdamConfig::default();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "shuffle"));
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..patches.len()).collect();
    for epoch in 0..cfg.epochs {
        // Fisher-Yates reshuffle each epoch from the dedicated stream
        for i in (1..order.len()).rev() {
            let j = shuffle_rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let lr = cfg.lr_at(epoch);
        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            // per-sample gradients in parallel, reduced in index order so
            // training stays bit-reproducible
            let results: Vec<Result<(f64, Gradients)>> = batch
                .par_iter()
                .map(|&i| sample_loss_and_grads(&patches[i], &params, &loss_ctx))
                .collect();
            let mut grads = Gradients::zeros_like(&params);
            let mut batch_loss = 0.0;
            for r in results {
                let (l, g) = r?;
                batch_loss += l;
                grads.add_assign(&g);
            }
            grads.scale(1.0 / batch.len() as f64);
            batch_loss /= batch.len() as f64;
            if !batch_loss.is_finite() {
                return Err(TexanomError::Training(format!(
                    "non-finite loss {batch_loss} at epoch {epoch}, batch {batch_idx}"
                )));
            }
            adam_step(&mut params, &grads, &mut state, lr, &adam_cfg)?;
            epoch_loss += batch_loss * batch.len() as f64;
            seen += batch.len();
        }
        let mean = epoch_loss / seen.max(1) as f64;
        log::info!("epoch {epoch}: mean loss {mean:.6} (lr {lr:.2e})");
        history.push(mean);
        params.meta.epochs_seen = (epoch + 1) as u32;
    }
    params.assert_finite()?;
    Ok(TrainOutput {
        params,
        loss_history: history,
    })
}

const MODEL_MAGIC: &[u8; 4] = b"CWAE";
const MODEL_VERSION: u16 = 1;

/// Writes the model file: magic "CWAE", version, metadata, architecture
/// descriptor, then per-layer little-endian f32 tensors in declaration order.
pub fn save_model(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| TexanomError::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let werr = |e| TexanomError::io(path.display().to_string(), e);
    w.write_all(MODEL_MAGIC).map_err(werr)?;
    w.write_all(&MODEL_VERSION.to_le_bytes()).map_err(werr)?;
    w.write_all(&params.meta.epochs_seen.to_le_bytes()).map_err(werr)?;
    w.write_all(&params.meta.rng_seed.to_le_bytes()).map_err(werr)?;
    w.write_all(&(params.layers.len() as u16).to_le_bytes()).map_err(werr)?;
    for l in &params.layers {
        let kind = match l.spec.kind {
            LayerKind::Conv => 0u8,
            LayerKind::ConvTranspose => 1u8,
        };
        w.write_all(&[kind]).map_err(werr)?;
        w.write_all(&(l.spec.in_channels as u32).to_le_bytes()).map_err(werr)?;
        w.write_all(&(l.spec.out_channels as u32).to_le_bytes()).map_err(werr)?;
        w.write_all(&(KERNEL as u32).to_le_bytes()).map_err(werr)?;
        w.write_all(&(STRIDE as u32).to_le_bytes()).map_err(werr)?;
    }
    for l in &params.layers {
        for &v in l.weight.iter() {
            w.write_all(&(v as f32).to_le_bytes()).map_err(werr)?;
        }
        for &v in l.bias.iter() {
            w.write_all(&(v as f32).to_le_bytes()).map_err(werr)?;
        }
    }
    w.flush().map_err(werr)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelParams> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| TexanomError::io(path.display().to_string(), e))?;
    let mut r = BufReader::new(file);
    let fmt = |m: &str| TexanomError::Format(format!("{}: {m}", path.display()));
    let mut b4 = [0u8; 4];
    let mut b2 = [0u8; 2];
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b4).map_err(|_| fmt("truncated header"))?;
    if &b4 != MODEL_MAGIC {
        return Err(fmt("not a model file (bad magic)"));
    }
    r.read_exact(&mut b2).map_err(|_| fmt("truncated header"))?;
    let version = u16::from_le_bytes(b2);
    if version != MODEL_VERSION {
        return Err(fmt(&format!("unsupported format version {version}")));
    }
    r.read_exact(&mut b4).map_err(|_| fmt("truncated header"))?;
    let epochs_seen = u32::from_le_bytes(b4);
    r.read_exact(&mut b8).map_err(|_| fmt("truncated header"))?;
    let rng_seed = u64::from_le_bytes(b8);
    r.read_exact(&mut b2).map_err(|_| fmt("truncated header"))?;
    let n_layers = u16::from_le_bytes(b2) as usize;
    let mut specs = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let mut kind = [0u8; 1];
        r.read_exact(&mut kind).map_err(|_| fmt("truncated layer descriptor"))?;
        let kind = match kind[0] {
            0 => LayerKind::Conv,
            1 => LayerKind::ConvTranspose,
            k => return Err(fmt(&format!("unknown layer kind {k}"))),
        };
        r.read_exact(&mut b4).map_err(|_| fmt("truncated layer descriptor"))?;
        let in_channels = u32::from_le_bytes(b4) as usize;
        r.read_exact(&mut b4).map_err(|_| fmt("truncated layer descriptor"))?;
        let out_channels = u32::from_le_bytes(b4) as usize;
        r.read_exact(&mut b4).map_err(|_| fmt("truncated layer descriptor"))?;
        if u32::from_le_bytes(b4) as usize != KERNEL {
            return Err(fmt("unsupported kernel size"));
        }
        r.read_exact(&mut b4).map_err(|_| fmt("truncated layer descriptor"))?;
        if u32::from_le_bytes(b4) as usize != STRIDE {
            return Err(fmt("unsupported stride"));
        }
        specs.push(LayerSpec {
            kind,
            in_channels,
            out_channels,
        });
    }
    let mut layers = Vec::with_capacity(n_layers);
    for &spec in &specs {
        let mut read_f32 = |n: usize| -> Result<Vec<f64>> {
            let mut out = Vec::with_capacity(n);
            let mut buf = [0u8; 4];
            for _ in 0..n {
                r.read_exact(&mut buf).map_err(|_| fmt("truncated tensor data"))?;
                out.push(f32::from_le_bytes(buf) as f64);
            }
            Ok(out)
        };
        let wlen = spec.out_channels * spec.in_channels * KERNEL * KERNEL;
        let weight = Array4::from_shape_vec(
            (spec.out_channels, spec.in_channels, KERNEL, KERNEL),
            read_f32(wlen)?,
        )
        .unwrap();
        let bias = Array1::from_vec(read_f32(spec.out_channels)?);
        layers.push(LayerParams { spec, weight, bias });
    }
    let model = ModelParams {
        spec: ArchitectureSpec { layers: specs },
        layers,
        meta: TrainMeta {
            epochs_seen,
            rng_seed,
        },
    };
    model.spec.validate()?;
    Ok(model)
}
