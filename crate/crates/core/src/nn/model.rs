use serde::{Deserialize, Serialize};

use super::layers::{leaky_relu, leaky_relu_backward, sigmoid, Conv3d, ConvGeometry, ConvTranspose3d, Linear};
use crate::data::VoxelGrid;
use crate::error::{invalid, Result};
use crate::gaussian::{DiagonalGaussian, LatentCode};
use crate::rng;

pub const KERNEL: usize = 4;
pub const STRIDE: usize = 2;
pub const PADDING: usize = 1;
pub const LEAKY_SLOPE: f32 = 0.2;

const ENCODER_STREAM: u64 = 0x656e63;
const DECODER_STREAM: u64 = 0x646563;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_shape: [usize; 3],
    pub latent_dim: usize,
    pub num_layers: usize,
    pub base_channels: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// 32³ input, 4 layers.
    pub fn toy() -> Self {
        Self {
            input_shape: [32, 32, 32],
            latent_dim: 32,
            num_layers: 4,
            base_channels: 8,
            seed: 0,
        }
    }

    /// Six layers and d = 32; needs at least 64 voxels per axis.
    pub fn full_scale(input_shape: [usize; 3]) -> Self {
        Self {
            input_shape,
            latent_dim: 32,
            num_layers: 6,
            base_channels: 8,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.num_layers == 0 || self.base_channels == 0 {
            return Err(invalid("latent_dim, num_layers and base_channels must be positive"));
        }
        if self.num_layers > 16 {
            return Err(invalid(format!("num_layers {} is too large", self.num_layers)));
        }
        let f = 1usize << self.num_layers;
        if self.input_shape.iter().any(|&n| n == 0 || n % f != 0) {
            return Err(invalid(format!(
                "input shape {:?} must be divisible by 2^{} = {f} along every axis",
                self.input_shape, self.num_layers
            )));
        }
        Ok(())
    }

    fn channels(&self, layer: usize) -> usize {
        self.base_channels << layer
    }

    fn shape_at(&self, layer: usize) -> [usize; 3] {
        self.input_shape.map(|n| n >> layer)
    }

    /// Flattened length of the deepest feature map Φ(x).
    pub fn feature_len(&self) -> usize {
        let l = self.num_layers;
        self.channels(l - 1) * self.shape_at(l).iter().product::<usize>()
    }

    pub fn voxels(&self) -> usize {
        self.input_shape.iter().product()
    }

    fn check_input(&self, x: &VoxelGrid) -> Result<()> {
        if x.dims() != self.input_shape {
            return Err(invalid(format!(
                "input grid {:?} does not match the model input shape {:?}",
                x.dims(),
                self.input_shape
            )));
        }
        Ok(())
    }
}

/// A flat list of parameter tensors with stable names and order.
pub trait Parameters {
    fn named_tensors(&self) -> Vec<(String, &[f32])>;
    fn tensors_mut(&mut self) -> Vec<&mut [f32]>;

    fn tensors(&self) -> Vec<&[f32]> {
        self.named_tensors().into_iter().map(|(_, t)| t).collect()
    }

    fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn zero_grads(&self) -> Vec<Vec<f32>> {
        self.tensors().iter().map(|t| vec![0.0; t.len()]).collect()
    }

    /// SHA-256 over the little-endian bytes of every tensor.
    fn params_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for t in self.tensors() {
            for v in t {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    config: ModelConfig,
    convs: Vec<Conv3d>,
    mu_head: Linear,
    logvar_head: Linear,
}

/// Intermediates kept for the backward pass.
#[derive(Debug, Clone)]
pub struct EncoderCache {
    cols: Vec<Vec<f32>>,
    activations: Vec<Vec<f32>>,
}

impl Encoder {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(config.seed, ENCODER_STREAM);
        let mut convs = Vec::with_capacity(config.num_layers);
        for l in 0..config.num_layers {
            let in_c = if l == 0 { 1 } else { config.channels(l - 1) };
            let g = ConvGeometry::new(in_c, config.shape_at(l), KERNEL, STRIDE, PADDING);
            convs.push(Conv3d::new(g, config.channels(l), &mut r));
        }
        let m = config.feature_len();
        let mu_head = Linear::new(m, config.latent_dim, &mut r, 0.5);
        // Near-zero log-variance head: training starts at σ ≈ 1.
        let logvar_head = Linear::new(m, config.latent_dim, &mut r, 0.01);
        Ok(Self {
            config: config.clone(),
            convs,
            mu_head,
            logvar_head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Returns `(mu, logvar)` in f32 plus the cache.
    pub fn forward(&self, x: &VoxelGrid) -> Result<(Vec<f32>, Vec<f32>, EncoderCache)> {
        self.config.check_input(x)?;
        let mut cols = Vec::with_capacity(self.convs.len());
        let mut activations = Vec::with_capacity(self.convs.len());
        let mut h = x.values().to_vec();
        for conv in &self.convs {
            let (mut y, c) = conv.forward(&h);
            leaky_relu(&mut y, LEAKY_SLOPE);
            cols.push(c);
            activations.push(y.clone());
            h = y;
        }
        let mu = self.mu_head.forward(&h);
        let logvar = self.logvar_head.forward(&h);
        Ok((mu, logvar, EncoderCache { cols, activations }))
    }

    /// The posterior q(z|x).
    pub fn encode(&self, x: &VoxelGrid) -> Result<DiagonalGaussian> {
        let (mu, logvar, _) = self.forward(x)?;
        DiagonalGaussian::new(
            mu.iter().map(|&v| v as f64).collect(),
            logvar.iter().map(|&v| v as f64).collect(),
        )
    }

    /// Accumulates parameter gradients for upstream `dmu`, `dlogvar`.
    pub fn backward(&self, cache: &EncoderCache, dmu: &[f32], dlogvar: &[f32], grads: &mut [Vec<f32>]) {
        let l = self.convs.len();
        let features = &cache.activations[l - 1];
        let [mw, mb, lw, lb] = &mut grads[2 * l..] else {
            panic!("gradient buffer does not match the encoder");
        };
        let mut g = self
            .mu_head
            .backward(features, dmu, mw, mb, true)
            .expect("input grad requested");
        let g2 = self
            .logvar_head
            .backward(features, dlogvar, lw, lb, true)
            .expect("input grad requested");
        g.iter_mut().zip(&g2).for_each(|(a, b)| *a += b);
        for i in (0..l).rev() {
            leaky_relu_backward(&cache.activations[i], &mut g, LEAKY_SLOPE);
            let (gw, gb) = grads[2 * i..2 * i + 2].split_at_mut(1);
            match self.convs[i].backward(&cache.cols[i], &g, &mut gw[0], &mut gb[0], i > 0) {
                Some(next) => g = next,
                None => break,
            }
        }
    }
}

impl Parameters for Encoder {
    fn named_tensors(&self) -> Vec<(String, &[f32])> {
        let mut out = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            out.push((format!("conv{i}.weight"), c.weight.as_slice()));
            out.push((format!("conv{i}.bias"), c.bias.as_slice()));
        }
        out.push(("mu.weight".into(), &self.mu_head.weight));
        out.push(("mu.bias".into(), &self.mu_head.bias));
        out.push(("logvar.weight".into(), &self.logvar_head.weight));
        out.push(("logvar.bias".into(), &self.logvar_head.bias));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f32]> {
        let mut out: Vec<&mut [f32]> = Vec::new();
        for c in &mut self.convs {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        out.push(&mut self.mu_head.weight);
        out.push(&mut self.mu_head.bias);
        out.push(&mut self.logvar_head.weight);
        out.push(&mut self.logvar_head.bias);
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    config: ModelConfig,
    fc: Linear,
    deconvs: Vec<ConvTranspose3d>,
}

#[derive(Debug, Clone)]
pub struct DecoderCache {
    z: Vec<f32>,
    inputs: Vec<Vec<f32>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderOutput {
    pub logits: Vec<f32>,
    pub occupancy: VoxelGrid,
}

impl Decoder {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        Self::with_stream(config, config.seed, DECODER_STREAM)
    }

    fn with_stream(config: &ModelConfig, seed: u64, stream: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(seed, stream);
        let l = config.num_layers;
        let fc = Linear::new(config.latent_dim, config.feature_len(), &mut r, 1.0);
        let mut deconvs = Vec::with_capacity(l);
        for j in 0..l {
            // Mirror of encoder layer `l - 1 - j`.
            let layer = l - 1 - j;
            let in_c = config.channels(layer);
            let out_c = if layer == 0 { 1 } else { config.channels(layer - 1) };
            let g = ConvGeometry::new(out_c, config.shape_at(layer), KERNEL, STRIDE, PADDING);
            let gain = if layer == 0 { 0.5 } else { 1.0 };
            deconvs.push(ConvTranspose3d::new(g, in_c, &mut r, gain));
        }
        Ok(Self {
            config: config.clone(),
            fc,
            deconvs,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn forward(&self, z: &[f32]) -> Result<(Vec<f32>, DecoderCache)> {
        if z.len() != self.config.latent_dim {
            return Err(invalid(format!(
                "latent code has length {}, decoder expects {}",
                z.len(),
                self.config.latent_dim
            )));
        }
        let mut h = self.fc.forward(z);
        leaky_relu(&mut h, LEAKY_SLOPE);
        let mut inputs = Vec::with_capacity(self.deconvs.len());
        let last = self.deconvs.len() - 1;
        for (j, deconv) in self.deconvs.iter().enumerate() {
            let mut y = deconv.forward(&h);
            if j < last {
                leaky_relu(&mut y, LEAKY_SLOPE);
            }
            inputs.push(h);
            h = y;
        }
        Ok((h, DecoderCache { z: z.to_vec(), inputs }))
    }

    pub fn decode(&self, z: &LatentCode) -> Result<DecoderOutput> {
        let zf: Vec<f32> = z.as_slice().iter().map(|&v| v as f32).collect();
        let (logits, _) = self.forward(&zf)?;
        let occupancy = VoxelGrid::new(self.config.input_shape, logits.iter().map(|&v| sigmoid(v)).collect())?;
        Ok(DecoderOutput { logits, occupancy })
    }

    /// Accumulates parameter gradients for `dL/dlogits`; returns `dL/dz`
    /// when requested.
    pub fn backward(
        &self,
        cache: &DecoderCache,
        grad_logits: &[f32],
        grads: &mut [Vec<f32>],
        need_latent_grad: bool,
    ) -> Option<Vec<f32>> {
        let mut g = grad_logits.to_vec();
        for j in (0..self.deconvs.len()).rev() {
            let (gw, gb) = grads[2 + 2 * j..4 + 2 * j].split_at_mut(1);
            let input = &cache.inputs[j];
            g = self.deconvs[j]
                .backward(input, &g, &mut gw[0], &mut gb[0], true)
                .expect("input grad requested");
            leaky_relu_backward(input, &mut g, LEAKY_SLOPE);
        }
        let (gw, gb) = grads[..2].split_at_mut(1);
        self.fc.backward(&cache.z, &g, &mut gw[0], &mut gb[0], need_latent_grad)
    }
}

impl Parameters for Decoder {
    fn named_tensors(&self) -> Vec<(String, &[f32])> {
        let mut out = vec![
            ("fc.weight".to_string(), self.fc.weight.as_slice()),
            ("fc.bias".to_string(), self.fc.bias.as_slice()),
        ];
        for (j, d) in self.deconvs.iter().enumerate() {
            out.push((format!("deconv{j}.weight"), d.weight.as_slice()));
            out.push((format!("deconv{j}.bias"), d.bias.as_slice()));
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f32]> {
        let mut out: Vec<&mut [f32]> = vec![&mut self.fc.weight, &mut self.fc.bias];
        for d in &mut self.deconvs {
            out.push(&mut d.weight);
            out.push(&mut d.bias);
        }
        out
    }
}

/// A freshly initialized decoder with the stage-1 architecture and its own
/// seed; shares nothing with any existing decoder.
pub fn clone_decoder_architecture(config: &ModelConfig, fresh_seed: u64) -> Result<Decoder> {
    Decoder::with_stream(config, fresh_seed, DECODER_STREAM ^ 0x2)
}

/// Overwrites the tensors of `target` with `values` (same order and sizes).
pub fn load_tensors<P: Parameters + ?Sized>(target: &mut P, values: &[Vec<f32>]) -> Result<()> {
    let mut slots = target.tensors_mut();
    if slots.len() != values.len() {
        return Err(invalid(format!(
            "expected {} tensors, got {}",
            slots.len(),
            values.len()
        )));
    }
    for (i, (slot, v)) in slots.iter_mut().zip(values).enumerate() {
        if slot.len() != v.len() {
            return Err(invalid(format!(
                "tensor {i} has {} values, expected {}",
                v.len(),
                slot.len()
            )));
        }
        slot.copy_from_slice(v);
    }
    Ok(())
}
