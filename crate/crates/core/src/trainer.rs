//! Alternating discriminator/generator optimization and inference.

use crate::checkpoint;
use crate::compositor::LayerTriple;
use crate::datapipe::{MixedStream, SampleRef};
use crate::error::{Error, Result};
use crate::imagecore::{Image, LinearImage};
use crate::losses::{
    adversarial_loss_grad, default_layer_weights, discriminator_loss_grad, exclusion_loss_grad, feature_loss_grad,
    l1_loss_grad, LossComponents, LossLog, LossRecord, LossToggles, LossWeights,
};
use crate::model::{grad_slices, split_layers, Discriminator, Generator, Network};
use crate::nn::{Adam, AdamConfig, Tensor};
use crate::perception::{hypercolumn, hypercolumn_from, FeatureExtractor, FeatureStack, Vgg19};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::{Path, PathBuf};

pub const LOG_FILE: &str = "train_log.csv";
pub const EPOCH_FILE: &str = "epochs.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

/// The generator objectives compared in the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    NoFeature,
    NoAdversarial,
    NoExclusion,
    AdversarialOnly,
    Complete,
}

impl Ablation {
    /// Table order: the four ablations, then the complete model.
    pub const ALL: [Ablation; 5] =
        [Ablation::NoFeature, Ablation::NoAdversarial, Ablation::NoExclusion, Ablation::AdversarialOnly, Ablation::Complete];

    pub fn toggles(self) -> LossToggles {
        let all = LossToggles::default();
        match self {
            Ablation::Complete => all,
            Ablation::NoFeature => LossToggles { feature: false, ..all },
            Ablation::NoAdversarial => LossToggles { adversarial: false, ..all },
            Ablation::NoExclusion => LossToggles { exclusion: false, ..all },
            Ablation::AdversarialOnly => LossToggles {
                feature: false,
                exclusion: false,
                reflection: false,
                image_l1_substitute: false,
                ..all
            },
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Ablation::NoFeature => "Ours w/o L_feat",
            Ablation::NoAdversarial => "Ours w/o L_adv",
            Ablation::NoExclusion => "Ours w/o L_excl",
            Ablation::AdversarialOnly => "Ours L_adv-only",
            Ablation::Complete => "Ours complete",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: u64,
    pub batch_size: usize,
    pub seed: u64,
    /// Write a checkpoint every this many epochs; 0 writes only the final one.
    pub checkpoint_every: u64,
    pub toggles: LossToggles,
    pub weights: LossWeights,
    /// Budget for cached VGG features of training inputs and targets.
    pub feature_cache_mb: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            epochs: 250,
            batch_size: 1,
            seed: 0,
            checkpoint_every: 10,
            toggles: LossToggles::default(),
            weights: LossWeights::default(),
            feature_cache_mb: 1024,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size != 1 {
            return Err(Error::Config(format!("only batch size 1 is supported, got {}", self.batch_size)));
        }
        self.weights.validate()
    }

    /// True when `other` continues the same optimization: everything except
    /// the epoch budget and bookkeeping may not change.
    pub fn resumable_as(&self, other: &TrainConfig) -> bool {
        self.learning_rate == other.learning_rate
            && self.seed == other.seed
            && self.toggles == other.toggles
            && self.weights == other.weights
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig { learning_rate: self.learning_rate, ..AdamConfig::default() }
    }
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub generator: Generator<f32>,
    pub discriminator: Discriminator<f32>,
    pub generator_opt: Adam<f32>,
    pub discriminator_opt: Adam<f32>,
    /// Completed epochs.
    pub epoch: u64,
    /// Completed generator updates.
    pub step: u64,
    pub config: TrainConfig,
    pub vgg_checksum: String,
}

impl TrainState {
    pub fn new(config: TrainConfig, vgg_checksum: impl Into<String>) -> Result<Self> {
        config.validate()?;
        let generator = Generator::init(config.seed);
        let discriminator = Discriminator::init(config.seed);
        let generator_opt = Adam::new(config.adam(), &generator.param_lens());
        let discriminator_opt = Adam::new(config.adam(), &discriminator.param_lens());
        Ok(Self {
            generator,
            discriminator,
            generator_opt,
            discriminator_opt,
            epoch: 0,
            step: 0,
            config,
            vgg_checksum: vgg_checksum.into(),
        })
    }

    pub fn check_vgg(&self, vgg: &Vgg19<f32>) -> Result<()> {
        if self.vgg_checksum != vgg.checksum() {
            return Err(Error::Checksum { expected: self.vgg_checksum.clone(), found: vgg.checksum().to_string() });
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(self, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        checkpoint::load(path)
    }
}

/// Per-sample tensors that do not depend on the parameters.
struct Prepared {
    input: Tensor<f32>,
    input_features: FeatureStack<f32>,
    transmission: Tensor<f32>,
    target_features: Option<FeatureStack<f32>>,
}

impl Prepared {
    fn new(vgg: &Vgg19<f32>, sample: &LayerTriple, toggles: &LossToggles) -> Result<Self> {
        let input = sample.input.to_tensor::<f32>();
        let transmission = sample.transmission.to_tensor::<f32>();
        let input_features = vgg.features(&input)?;
        let target_features = if toggles.feature { Some(vgg.features(&transmission)?) } else { None };
        Ok(Self { input, input_features, transmission, target_features })
    }

    fn bytes(&self) -> usize {
        let stack = |s: &FeatureStack<f32>| s.layers.iter().map(|l| l.data().len()).sum::<usize>();
        4 * (self.input.data().len()
            + self.transmission.data().len()
            + stack(&self.input_features)
            + self.target_features.as_ref().map_or(0, stack))
    }
}

fn add_scaled(acc: &mut Image, g: &Image, scale: f64) {
    for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
        *a += scale * v;
    }
}

fn add_scaled_tensor(acc: &mut Image, g: &Tensor<f32>, scale: f64) {
    for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
        *a += scale * *v as f64;
    }
}

/// One discriminator update followed by one generator update on `sample`.
pub fn train_step(state: &mut TrainState, vgg: &Vgg19<f32>, sample: &LayerTriple) -> Result<LossRecord> {
    state.check_vgg(vgg)?;
    let prepared = Prepared::new(vgg, sample, &state.config.toggles)?;
    step_prepared(state, vgg, sample, &prepared)
}

fn step_prepared(state: &mut TrainState, vgg: &Vgg19<f32>, sample: &LayerTriple, prep: &Prepared) -> Result<LossRecord> {
    let toggles = state.config.toggles;
    let weights = state.config.weights.clone();
    let hc = hypercolumn_from(&prep.input, &prep.input_features);
    let (out, trace) = state.generator.forward_traced(&hc)?;
    let (ft, fr) = split_layers(&out);

    // The discriminator sees the current prediction as a constant.
    let mut discriminator = None;
    if toggles.adversarial {
        let d = &state.discriminator;
        let fake = d.forward_traced(&prep.input, &ft)?;
        let real = d.forward_traced(&prep.input, &prep.transmission)?;
        let (loss, g_fake, g_real) = discriminator_loss_grad(fake.probabilities(), real.probabilities())?;
        let mut grads = d.zero_grads();
        d.backward(&fake, &g_fake, Some(&mut grads), false);
        d.backward(&real, &g_real, Some(&mut grads), false);
        if loss.is_finite() {
            state.discriminator_opt.step(state.discriminator.params_mut(), grad_slices(&grads));
        }
        discriminator = Some(loss);
    }

    let ft_img = Image::from_tensor(&ft)?;
    let fr_img = Image::from_tensor(&fr)?;
    let (h, w) = ft_img.dims();
    let mut grad_t = Image::zeros(h, w);
    let mut grad_r = Image::zeros(h, w);
    let mut c = LossComponents::default();

    if let Some(target) = prep.target_features.as_ref().filter(|_| toggles.feature) {
        let (stack, vtrace) = vgg.forward_traced(&ft)?;
        let layer_weights = weights.layer_weights.clone().unwrap_or_else(|| default_layer_weights(&stack));
        let (loss, taps) = feature_loss_grad(&stack, target, &layer_weights)?;
        add_scaled_tensor(&mut grad_t, &vgg.backward(&vtrace, &taps), weights.feature);
        c.feature = Some(loss);
    }
    if toggles.uses_image_l1() {
        let (loss, g) = l1_loss_grad(&ft_img, &sample.transmission)?;
        add_scaled(&mut grad_t, &g, weights.image_l1);
        c.image_l1 = Some(loss);
    }
    if toggles.adversarial {
        let d = &state.discriminator;
        let fake = d.forward_traced(&prep.input, &ft)?;
        let (loss, gp) = adversarial_loss_grad(fake.probabilities());
        let gx = d.backward(&fake, &gp, None, true).expect("candidate gradient requested");
        add_scaled_tensor(&mut grad_t, &gx, weights.adversarial);
        c.adversarial = Some(loss);
    }
    if toggles.exclusion {
        let e = exclusion_loss_grad(&ft_img, &fr_img, weights.exclusion_scales, toggles.normalization())?;
        add_scaled(&mut grad_t, &e.grad_t, weights.exclusion);
        add_scaled(&mut grad_r, &e.grad_r, weights.exclusion);
        c.exclusion = Some(e.value);
    }
    if let Some(r) = sample.reflection.as_ref().filter(|_| toggles.reflection && !sample.is_real) {
        let (loss, g) = l1_loss_grad(&fr_img, r)?;
        add_scaled(&mut grad_r, &g, 1.0);
        c.reflection = Some(loss);
    }

    let mut record = LossRecord::new(state.step, state.epoch + 1, &sample.id, sample.is_real, &c, &weights);
    record.discriminator = discriminator;
    if !record.is_finite() || !state.generator.is_finite() {
        log::error!("non-finite loss, aborting: {record}");
        return Err(Error::NonFiniteLoss { sample_id: sample.id.clone(), step: state.step, breakdown: record.to_string() });
    }

    let grad_out = Tensor::concat(&[&grad_t.to_tensor::<f32>(), &grad_r.to_tensor::<f32>()]);
    let mut grads = state.generator.zero_grads();
    state.generator.backward(&hc, &trace, &grad_out, &mut grads);
    state.generator_opt.step(state.generator.params_mut(), grad_slices(&grads));
    state.step += 1;
    Ok(record)
}

/// Mean loss breakdown over one epoch; a component absent from every step
/// stays `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: u64,
    pub steps: u64,
    pub feature: Option<f64>,
    pub image_l1: Option<f64>,
    pub adversarial: Option<f64>,
    pub exclusion: Option<f64>,
    pub reflection: Option<f64>,
    pub discriminator: Option<f64>,
    pub total: f64,
}

impl EpochSummary {
    fn from_records(epoch: u64, records: &[LossRecord]) -> Self {
        let mean = |f: fn(&LossRecord) -> Option<f64>| {
            let vals: Vec<f64> = records.iter().filter_map(f).collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        };
        Self {
            epoch,
            steps: records.len() as u64,
            feature: mean(|r| r.feature),
            image_l1: mean(|r| r.image_l1),
            adversarial: mean(|r| r.adversarial),
            exclusion: mean(|r| r.exclusion),
            reflection: mean(|r| r.reflection),
            discriminator: mean(|r| r.discriminator),
            total: records.iter().map(|r| r.total).sum::<f64>() / records.len().max(1) as f64,
        }
    }
}

pub struct TrainOutcome {
    pub state: TrainState,
    pub epochs: Vec<EpochSummary>,
}

/// Trains from freshly initialized parameters.
pub fn train(
    config: &TrainConfig,
    vgg: &Vgg19<f32>,
    synthetic: &[LayerTriple],
    real: &[LayerTriple],
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    let state = TrainState::new(config.clone(), vgg.checksum())?;
    run(state, config, vgg, synthetic, real, out_dir)
}

/// Continues `state` until `config.epochs` epochs are complete.
pub fn resume(
    state: TrainState,
    config: &TrainConfig,
    vgg: &Vgg19<f32>,
    synthetic: &[LayerTriple],
    real: &[LayerTriple],
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if !state.config.resumable_as(config) {
        return Err(Error::Config("checkpoint was trained with a different configuration".into()));
    }
    run(state, config, vgg, synthetic, real, out_dir)
}

fn run(
    mut state: TrainState,
    config: &TrainConfig,
    vgg: &Vgg19<f32>,
    synthetic: &[LayerTriple],
    real: &[LayerTriple],
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    state.check_vgg(vgg)?;
    state.config.epochs = config.epochs;
    state.config.checkpoint_every = config.checkpoint_every;
    let stream = MixedStream::new(synthetic, real, config.seed)?;
    let mut log = out_dir.map(|d| LossLog::append(&d.join(LOG_FILE))).transpose()?;
    let mut epoch_log = out_dir.map(|d| epoch_writer(&d.join(EPOCH_FILE))).transpose()?;
    let mut cache: HashMap<SampleRef, Prepared> = HashMap::new();
    let mut cached_bytes = 0usize;
    let budget = config.feature_cache_mb.saturating_mul(1 << 20);
    let mut summaries = Vec::new();

    while state.epoch < config.epochs {
        let epoch = state.epoch + 1;
        let mut records = Vec::with_capacity(stream.epoch_len());
        for r in stream.order(epoch) {
            let sample = stream.get(r);
            let mut uncached = None;
            if !cache.contains_key(&r) {
                let p = Prepared::new(vgg, sample, &config.toggles)?;
                if cached_bytes + p.bytes() <= budget {
                    cached_bytes += p.bytes();
                    cache.insert(r, p);
                } else {
                    uncached = Some(p);
                }
            }
            let prep = uncached.as_ref().or_else(|| cache.get(&r)).expect("prepared sample");
            let record = step_prepared(&mut state, vgg, sample, prep)?;
            log::debug!("{record}");
            if let Some(log) = log.as_mut() {
                log.write(&record)?;
            }
            records.push(record);
        }
        state.epoch = epoch;
        let summary = EpochSummary::from_records(epoch, &records);
        log::info!(
            "epoch {epoch}: total {:.5} excl {} disc {}",
            summary.total,
            summary.exclusion.map_or("-".into(), |v| format!("{v:.5}")),
            summary.discriminator.map_or("-".into(), |v| format!("{v:.5}"))
        );
        if let Some(log) = log.as_mut() {
            log.flush()?;
        }
        if let Some(w) = epoch_log.as_mut() {
            w.serialize(&summary)?;
            w.flush().map_err(|e| Error::io(EPOCH_FILE, e))?;
        }
        if let Some(dir) = out_dir {
            if config.checkpoint_every > 0 && epoch % config.checkpoint_every == 0 {
                state.save(&dir.join(format!("epoch_{epoch:04}.ckpt")))?;
            }
        }
        summaries.push(summary);
    }
    if let Some(dir) = out_dir {
        state.save(&dir.join(FINAL_CHECKPOINT))?;
    }
    Ok(TrainOutcome { state, epochs: summaries })
}

fn epoch_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = std::fs::OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::WriterBuilder::new().has_headers(fresh).from_writer(file))
}

/// Hypercolumn, generator, clip: the separated `(transmission, reflection)`.
pub fn infer(generator: &Generator<f32>, vgg: &Vgg19<f32>, img: &LinearImage) -> Result<(LinearImage, LinearImage)> {
    let out = generator.forward(&hypercolumn(vgg, img)?)?;
    let (t, r) = split_layers(&out);
    Ok((LinearImage::from_clipped(&Image::from_tensor(&t)?)?, LinearImage::from_clipped(&Image::from_tensor(&r)?)?))
}

/// Trained generator bound to the feature extractor it was trained against.
pub struct Model<'a> {
    pub generator: Generator<f32>,
    pub vgg: &'a Vgg19<f32>,
    pub name: String,
}

impl<'a> Model<'a> {
    pub fn new(state: &TrainState, vgg: &'a Vgg19<f32>, name: impl Into<String>) -> Result<Self> {
        state.check_vgg(vgg)?;
        Ok(Self { generator: state.generator.clone(), vgg, name: name.into() })
    }

    pub fn from_checkpoint(path: &Path, vgg: &'a Vgg19<f32>) -> Result<Self> {
        let state = TrainState::load(path)?;
        let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        Self::new(&state, vgg, name)
    }

    pub fn separate(&self, img: &LinearImage) -> Result<(LinearImage, LinearImage)> {
        infer(&self.generator, self.vgg, img)
    }
}

/// Paths a training run writes under its output directory.
pub fn checkpoint_path(out_dir: &Path, epoch: Option<u64>) -> PathBuf {
    match epoch {
        Some(e) => out_dir.join(format!("epoch_{e:04}.ckpt")),
        None => out_dir.join(FINAL_CHECKPOINT),
    }
}
