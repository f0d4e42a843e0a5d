//! Two-stage training: a joint VAE under a KLD weight β, then a decoupled
//! decoder fed by the frozen stage-1 encoder's resampled codes.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{ShapeClass, SkullTriplet, VoxelGrid};
use crate::error::{invalid, Error, Result};
use crate::gaussian::{DiagonalGaussian, LatentCode};
use crate::losses::{kld_gradient, soft_dice_from_logits};
use crate::nn::layers::sigmoid;
use crate::nn::{clone_decoder_architecture, Decoder, Encoder, ModelConfig, Parameters};
use crate::rng;

pub const DEFAULT_LEARNING_RATE: f64 = 1e-3;
pub const LARGE_BETA: f64 = 100.0;
pub const SMALL_BETA: f64 = 0.0001;
/// Stage-2 epochs per stage-1 epoch.
pub const STAGE2_EPOCH_RATIO: usize = 6;

const SHUFFLE_STREAM: u64 = 1 << 40;
const EPS_STREAM_STAGE1: u64 = 2 << 40;
const EPS_STREAM_STAGE2: u64 = 3 << 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    One,
    Two,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::One => "one",
            Stage::Two => "two",
        }
    }
}

/// How per-sample Dice losses combine within a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiceReduction {
    Mean,
    #[default]
    Sum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub stage: Stage,
    pub beta: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub dice_reduction: DiceReduction,
}

impl StageConfig {
    pub fn stage1(beta: f64, epochs: usize, seed: u64) -> Self {
        Self {
            stage: Stage::One,
            beta,
            epochs,
            learning_rate: DEFAULT_LEARNING_RATE,
            batch_size: 8,
            seed,
            dice_reduction: DiceReduction::default(),
        }
    }

    pub fn stage2(epochs: usize, seed: u64) -> Self {
        Self {
            stage: Stage::Two,
            beta: 0.0,
            ..Self::stage1(0.0, epochs, seed)
        }
    }

    /// The effective KLD weight: stage two always uses 0.
    pub fn effective_beta(&self) -> f64 {
        match self.stage {
            Stage::One => self.beta,
            Stage::Two => 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(invalid("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(invalid(format!("beta must be nonnegative, got {}", self.beta)));
        }
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
    t: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new<P: Parameters + ?Sized>(params: &P, learning_rate: f64) -> Self {
        Self {
            lr: learning_rate as f32,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: params.zero_grads(),
            v: params.zero_grads(),
        }
    }

    pub fn step<P: Parameters + ?Sized>(&mut self, params: &mut P, grads: &[Vec<f32>]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in params.tensors_mut().into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                p[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-sample soft Dice loss.
    pub dice_loss: f64,
    /// Mean per-sample closed-form KLD (nats).
    pub kld: f64,
    pub beta: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingCurve {
    pub stage: Stage,
    pub records: Vec<EpochRecord>,
}

impl TrainingCurve {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    /// Writes `epoch,dice_loss,kld,beta,seconds`. With `deterministic`, the
    /// wall-clock column is zero so reruns are byte-identical.
    pub fn write_csv(&self, path: &Path, deterministic: bool) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["epoch", "dice_loss", "kld", "beta", "seconds"])?;
        for r in &self.records {
            let seconds = if deterministic { 0.0 } else { r.seconds };
            w.write_record([
                r.epoch.to_string(),
                r.dice_loss.to_string(),
                r.kld.to_string(),
                r.beta.to_string(),
                seconds.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    /// Writes `epoch,seconds` only.
    pub fn write_timing_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["epoch", "seconds"])?;
        for r in &self.records {
            w.write_record([r.epoch.to_string(), r.seconds.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Grids of the selected subjects in (subject, class) order; each grid is
/// both input and target.
pub fn training_grids(triplets: &[SkullTriplet], subjects: &[usize]) -> Vec<VoxelGrid> {
    subjects
        .iter()
        .flat_map(|&i| ShapeClass::ALL.iter().map(move |&c| triplets[i].grid(c).clone()))
        .collect()
}

fn check_dataset(dataset: &[VoxelGrid], config: &ModelConfig) -> Result<()> {
    if dataset.is_empty() {
        return Err(invalid("training dataset is empty"));
    }
    if let Some(g) = dataset.iter().find(|g| g.dims() != config.input_shape) {
        return Err(invalid(format!(
            "dataset grid {:?} does not match model input {:?}",
            g.dims(),
            config.input_shape
        )));
    }
    Ok(())
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, SHUFFLE_STREAM + epoch as u64));
    order
}

fn epsilon(seed: u64, base: u64, epoch: usize, item: usize, d: usize) -> Vec<f32> {
    let mut r = rng::stream(seed, base ^ rng::epoch_item_stream(epoch, item));
    rng::standard_normal_vec(&mut r, d).into_iter().map(|v| v as f32).collect()
}

fn kld_of(mu: &[f32], lv: &[f32]) -> f64 {
    mu.iter()
        .zip(lv)
        .map(|(&m, &l)| {
            let (m, l) = (m as f64, l as f64);
            0.5 * (l.exp() + m * m - 1.0 - l)
        })
        .sum()
}

/// Called once per finished epoch.
pub type EpochObserver<'a> = &'a mut dyn FnMut(&EpochRecord);

/// Joint training of a fresh encoder/decoder pair under `config.beta`.
pub fn train_stage1(
    model: &ModelConfig,
    dataset: &[VoxelGrid],
    config: &StageConfig,
    observer: Option<EpochObserver<'_>>,
) -> Result<(Encoder, Decoder, TrainingCurve)> {
    config.validate()?;
    if config.stage != Stage::One {
        return Err(invalid("train_stage1 needs a stage-one config"));
    }
    check_dataset(dataset, model)?;
    let mut observer = observer;
    let mut encoder = Encoder::new(model)?;
    let mut decoder = Decoder::new(model)?;
    let mut enc_opt = Adam::new(&encoder, config.learning_rate);
    let mut dec_opt = Adam::new(&decoder, config.learning_rate);
    let beta = config.effective_beta() as f32;
    let d = model.latent_dim;
    let mut records = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let start = Instant::now();
        let order = epoch_order(dataset.len(), config.seed, epoch);
        let (mut dice_sum, mut kld_sum) = (0.0, 0.0);
        for (batch, items) in order.chunks(config.batch_size).enumerate() {
            let bs = items.len() as f32;
            let dice_weight = match config.dice_reduction {
                DiceReduction::Mean => 1.0 / bs,
                DiceReduction::Sum => 1.0,
            };
            let mut enc_grads = encoder.zero_grads();
            let mut dec_grads = decoder.zero_grads();
            for &item in items {
                let x = &dataset[item];
                let (mu, lv, enc_cache) = encoder.forward(x)?;
                let eps = epsilon(config.seed, EPS_STREAM_STAGE1, epoch, item, d);
                let sigma: Vec<f32> = lv.iter().map(|&l| (0.5 * l).exp()).collect();
                let z: Vec<f32> = (0..d).map(|i| mu[i] + sigma[i] * eps[i]).collect();
                let (logits, dec_cache) = decoder.forward(&z)?;
                let (dice, mut dlogits) = soft_dice_from_logits(&logits, x.values());
                let kld = kld_of(&mu, &lv);
                if !dice.is_finite() || !kld.is_finite() {
                    return Err(Error::NonFiniteLoss { epoch, batch, dice, kld });
                }
                dice_sum += dice;
                kld_sum += kld;
                dlogits.iter_mut().for_each(|g| *g *= dice_weight);
                let dz = decoder
                    .backward(&dec_cache, &dlogits, &mut dec_grads, true)
                    .expect("latent grad requested");
                let (kmu, klv) = kld_gradient(&mu, &lv);
                let dmu: Vec<f32> = (0..d).map(|i| dz[i] + beta * kmu[i] / bs).collect();
                let dlv: Vec<f32> = (0..d)
                    .map(|i| dz[i] * eps[i] * 0.5 * sigma[i] + beta * klv[i] / bs)
                    .collect();
                encoder.backward(&enc_cache, &dmu, &dlv, &mut enc_grads);
            }
            check_grads(&enc_grads, epoch, batch)?;
            check_grads(&dec_grads, epoch, batch)?;
            enc_opt.step(&mut encoder, &enc_grads);
            dec_opt.step(&mut decoder, &dec_grads);
        }
        let n = dataset.len() as f64;
        let rec = EpochRecord {
            epoch,
            dice_loss: dice_sum / n,
            kld: kld_sum / n,
            beta: config.effective_beta(),
            seconds: start.elapsed().as_secs_f64(),
        };
        if let Some(obs) = observer.as_mut() {
            obs(&rec);
        }
        records.push(rec);
    }
    Ok((encoder, decoder, TrainingCurve { stage: Stage::One, records }))
}

fn check_grads(grads: &[Vec<f32>], epoch: usize, batch: usize) -> Result<()> {
    if grads.iter().flatten().all(|g| g.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss {
            epoch,
            batch,
            dice: f64::NAN,
            kld: f64::NAN,
        })
    }
}

/// Trains a decoupled decoder (fresh parameters from `decoder_seed`) on
/// `z = μ + σ ⊙ ε` drawn from the frozen `encoder`, with a fresh ε per
/// sample per epoch and the reconstruction loss only.
pub fn train_stage2(
    encoder: &Encoder,
    dataset: &[VoxelGrid],
    config: &StageConfig,
    decoder_seed: u64,
    observer: Option<EpochObserver<'_>>,
) -> Result<(Decoder, TrainingCurve)> {
    config.validate()?;
    if config.stage != Stage::Two {
        return Err(invalid("train_stage2 needs a stage-two config"));
    }
    let model = encoder.config();
    check_dataset(dataset, model)?;
    let mut observer = observer;
    let d = model.latent_dim;
    // The encoder is frozen, so posteriors are computed once.
    let posteriors: Vec<(Vec<f32>, Vec<f32>)> = dataset
        .iter()
        .map(|x| encoder.forward(x).map(|(mu, lv, _)| (mu, lv)))
        .collect::<Result<_>>()?;
    let mean_kld = posteriors.iter().map(|(m, l)| kld_of(m, l)).sum::<f64>() / dataset.len() as f64;

    let mut decoder = clone_decoder_architecture(model, decoder_seed)?;
    let mut opt = Adam::new(&decoder, config.learning_rate);
    let mut records = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let start = Instant::now();
        let order = epoch_order(dataset.len(), config.seed, epoch);
        let mut dice_sum = 0.0;
        for (batch, items) in order.chunks(config.batch_size).enumerate() {
            let dice_weight = match config.dice_reduction {
                DiceReduction::Mean => 1.0 / items.len() as f32,
                DiceReduction::Sum => 1.0,
            };
            let mut grads = decoder.zero_grads();
            for &item in items {
                let (mu, lv) = &posteriors[item];
                let eps = epsilon(config.seed, EPS_STREAM_STAGE2, epoch, item, d);
                let z: Vec<f32> = (0..d).map(|i| mu[i] + (0.5 * lv[i]).exp() * eps[i]).collect();
                let (logits, cache) = decoder.forward(&z)?;
                let (dice, mut dlogits) = soft_dice_from_logits(&logits, dataset[item].values());
                if !dice.is_finite() {
                    return Err(Error::NonFiniteLoss { epoch, batch, dice, kld: mean_kld });
                }
                dice_sum += dice;
                dlogits.iter_mut().for_each(|g| *g *= dice_weight);
                decoder.backward(&cache, &dlogits, &mut grads, false);
            }
            check_grads(&grads, epoch, batch)?;
            opt.step(&mut decoder, &grads);
        }
        let rec = EpochRecord {
            epoch,
            dice_loss: dice_sum / dataset.len() as f64,
            kld: mean_kld,
            beta: 0.0,
            seconds: start.elapsed().as_secs_f64(),
        };
        if let Some(obs) = observer.as_mut() {
            obs(&rec);
        }
        records.push(rec);
    }
    Ok((decoder, TrainingCurve { stage: Stage::Two, records }))
}

/// Anything that maps a voxel grid to a Gaussian posterior and latent codes
/// back to soft occupancy grids.
pub trait ShapeModel {
    fn latent_dim(&self) -> usize;
    fn posterior(&self, x: &VoxelGrid) -> Result<DiagonalGaussian>;
    fn decode_latent(&self, z: &LatentCode) -> Result<VoxelGrid>;

    /// Latent code used for analytics and arithmetic: the posterior mean.
    fn encode_mean(&self, x: &VoxelGrid) -> Result<LatentCode> {
        LatentCode::new(self.posterior(x)?.mu().to_vec())
    }

    /// Deterministic reconstruction through `z = μ`.
    fn reconstruct(&self, x: &VoxelGrid) -> Result<VoxelGrid> {
        self.decode_latent(&self.encode_mean(x)?)
    }

    /// Reconstruction through `z = μ + σ ⊙ ε`.
    fn reconstruct_sampled(&self, x: &VoxelGrid, epsilon: &[f64]) -> Result<VoxelGrid> {
        let z = crate::gaussian::reparameterize(&self.posterior(x)?, epsilon)?;
        self.decode_latent(&z)
    }
}

/// An encoder with the decoder it was trained jointly with.
#[derive(Debug, Clone)]
pub struct Vae {
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl ShapeModel for Vae {
    fn latent_dim(&self) -> usize {
        self.encoder.config().latent_dim
    }

    fn posterior(&self, x: &VoxelGrid) -> Result<DiagonalGaussian> {
        self.encoder.encode(x)
    }

    fn decode_latent(&self, z: &LatentCode) -> Result<VoxelGrid> {
        Ok(self.decoder.decode(z)?.occupancy)
    }
}

/// Stage-1 encoder combined with a stage-2 decoupled decoder.
#[derive(Debug, Clone)]
pub struct AggregatedModel {
    encoder: Encoder,
    decoder: Decoder,
    pub encoder_hash: String,
    pub decoder_hash: String,
}

impl AggregatedModel {
    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }
}

/// Combines the stage-1 encoder with the stage-2 decoder.
pub fn aggregate(encoder: Encoder, decoder: Decoder) -> Result<AggregatedModel> {
    let (de, dd) = (encoder.config().latent_dim, decoder.config().latent_dim);
    if de != dd {
        return Err(invalid(format!("encoder latent dim {de} != decoder latent dim {dd}")));
    }
    if encoder.config().input_shape != decoder.config().input_shape {
        return Err(invalid(format!(
            "encoder input {:?} != decoder output {:?}",
            encoder.config().input_shape,
            decoder.config().input_shape
        )));
    }
    Ok(AggregatedModel {
        encoder_hash: encoder.params_hash(),
        decoder_hash: decoder.params_hash(),
        encoder,
        decoder,
    })
}

impl ShapeModel for AggregatedModel {
    fn latent_dim(&self) -> usize {
        self.encoder.config().latent_dim
    }

    fn posterior(&self, x: &VoxelGrid) -> Result<DiagonalGaussian> {
        self.encoder.encode(x)
    }

    fn decode_latent(&self, z: &LatentCode) -> Result<VoxelGrid> {
        Ok(self.decoder.decode(z)?.occupancy)
    }
}

/// Soft occupancy from raw logits.
pub fn occupancy_from_logits(logits: &[f32], dims: [usize; 3]) -> Result<VoxelGrid> {
    VoxelGrid::new(dims, logits.iter().map(|&v| sigmoid(v)).collect())
}
