//! The alternating generator/discriminator optimization loop.
//!
//! Each step updates G and F jointly on the full objective, then pushes the
//! fresh fakes through the history pools and updates D_Y and D_X on the
//! pooled samples. A per-step Bernoulli gate, whose probability ramps up
//! over the epochs, decides whether the adversarial terms of that step see
//! masked images.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use smcyclegan_autograd::{Adam, Tape, Tensor, Var};

use crate::checkpoint::{Container, ModuleKind, Section};
use crate::data::{sample_unpaired_batch, Batch, ImageDataset};
use crate::error::{config_err, data_err, Error, Result};
use crate::image::{images_to_tensor, masks_to_tensor, Image, ValueRange};
use crate::losses::{graph, AdversarialMode, GeneratorObjective, LossBundle};
use crate::networks::{Discriminator, DiscriminatorArch, DiscriminatorHead, Generator, GeneratorArch};
use crate::nn::{collect_grads, ensure_finite, Network};
use crate::pool::ImagePool;
use crate::rng::{stream_rng, streams, RngState};
use crate::segmenter::Segmenter;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskSource {
    /// Masks predicted by the frozen segmenter.
    #[default]
    Segmenter,
    /// Dataset masks; a fake inherits the mask of the image it was translated from.
    GroundTruth,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    #[default]
    Soft,
    /// Masks binarized at `mask_threshold`.
    Binary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lambda: f64,
    pub pool_size: usize,
    pub mask_prob_start: f64,
    pub mask_prob_end: f64,
    pub mask_source: MaskSource,
    pub mask_mode: MaskMode,
    pub mask_threshold: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Linear decay to zero over the second half of training.
    pub lr_decay: bool,
    pub seed: u64,
    /// Defaults to one pass over the larger domain.
    pub steps_per_epoch: Option<usize>,
    pub checkpoint_every: usize,
    pub generator: GeneratorArch,
    pub discriminator: DiscriminatorArch,
    pub adversarial: AdversarialMode,
    pub generator_objective: GeneratorObjective,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lambda: 10.0,
            pool_size: 3,
            mask_prob_start: 0.1,
            mask_prob_end: 1.0,
            mask_source: MaskSource::Segmenter,
            mask_mode: MaskMode::Soft,
            mask_threshold: 0.5,
            batch_size: 1,
            learning_rate: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            lr_decay: true,
            seed: 0,
            steps_per_epoch: None,
            checkpoint_every: 10,
            generator: GeneratorArch::default(),
            discriminator: DiscriminatorArch::default(),
            adversarial: AdversarialMode::Log,
            generator_objective: GeneratorObjective::NonSaturating,
        }
    }
}

impl TrainConfig {
    /// Desk-scale networks for 32×32 inputs.
    pub fn toy() -> Self {
        Self { generator: GeneratorArch::toy(), discriminator: DiscriminatorArch::toy(), ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(config_err!("epochs must be positive"));
        }
        if self.pool_size == 0 {
            return Err(config_err!("pool_size must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(config_err!("batch_size must be at least 1"));
        }
        if self.checkpoint_every == 0 {
            return Err(config_err!("checkpoint_every must be positive"));
        }
        if self.steps_per_epoch == Some(0) {
            return Err(config_err!("steps_per_epoch must be positive"));
        }
        for (name, p) in [("mask_prob_start", self.mask_prob_start), ("mask_prob_end", self.mask_prob_end)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(config_err!("{name} = {p} is outside [0, 1]"));
            }
        }
        if self.mask_prob_start > self.mask_prob_end {
            return Err(config_err!("mask_prob_start must not exceed mask_prob_end"));
        }
        if !(self.mask_threshold > 0.0 && self.mask_threshold < 1.0) {
            return Err(config_err!("mask_threshold must lie in (0, 1)"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(config_err!("lambda must be finite and non-negative"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(config_err!("learning_rate must be positive"));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(config_err!("Adam betas must lie in [0, 1)"));
        }
        let head_ok = match self.adversarial {
            AdversarialMode::Log => self.discriminator.head == DiscriminatorHead::Sigmoid,
            AdversarialMode::LeastSquares => self.discriminator.head == DiscriminatorHead::Linear,
        };
        if !head_ok {
            return Err(config_err!("log adversarial mode needs a sigmoid head, least squares a linear head"));
        }
        if self.generator.in_channels != self.generator.out_channels
            || self.discriminator.in_channels != self.generator.out_channels
        {
            return Err(config_err!("generator and discriminator channel counts must agree"));
        }
        Ok(())
    }

    /// Whether the mask gate can ever fire.
    pub fn uses_masks(&self) -> bool {
        self.mask_prob_end > 0.0
    }
}

/// Linear ramp from `mask_prob_start` at epoch 0 to `mask_prob_end` at the last epoch.
pub fn mask_probability(epoch: usize, config: &TrainConfig) -> Result<f64> {
    if epoch >= config.epochs {
        return Err(config_err!("epoch {epoch} outside 0..{}", config.epochs));
    }
    if config.epochs == 1 {
        return Ok(config.mask_prob_end);
    }
    let t = epoch as f64 / (config.epochs - 1) as f64;
    Ok((config.mask_prob_start + t * (config.mask_prob_end - config.mask_prob_start)).clamp(0.0, 1.0))
}

/// Learning-rate multiplier: constant for the first half, then linear towards zero.
pub fn lr_factor(epoch: usize, config: &TrainConfig) -> f64 {
    if !config.lr_decay {
        return 1.0;
    }
    let keep = config.epochs / 2;
    let n_decay = config.epochs - keep;
    1.0 - (epoch + 1).saturating_sub(keep) as f64 / (n_decay + 1) as f64
}

/// A pooled fake and, for ground-truth masking, the mask of its source image.
#[derive(Clone, Debug, PartialEq)]
pub struct PoolEntry {
    pub image: Tensor,
    pub mask: Option<Tensor>,
}

/// Everything needed to continue training bit-exactly.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub config: TrainConfig,
    pub g: Generator,
    pub f: Generator,
    pub d_x: Discriminator,
    pub d_y: Discriminator,
    pub segmenter: Option<Segmenter>,
    /// Adam over G's parameters followed by F's.
    pub opt_gen: Adam,
    pub opt_d_x: Adam,
    pub opt_d_y: Adam,
    /// Fakes in domain X, produced by F, shown to D_X.
    pub pool_x: ImagePool<PoolEntry>,
    /// Fakes in domain Y, produced by G, shown to D_Y.
    pub pool_y: ImagePool<PoolEntry>,
    pub data_rng: ChaCha8Rng,
    pub gate_rng: ChaCha8Rng,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed steps.
    pub step: usize,
}

/// Losses and gate outcome of one step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub epoch: usize,
    pub adv_g: f64,
    pub adv_f: f64,
    pub cycle: f64,
    pub identity: f64,
    pub total: f64,
    pub lambda: f64,
    pub loss_d_x: f64,
    pub loss_d_y: f64,
    pub mask_used: bool,
    pub mask_prob: f64,
}

impl StepReport {
    pub fn bundle(&self) -> LossBundle {
        LossBundle {
            adv_g: self.adv_g,
            adv_f: self.adv_f,
            cycle: self.cycle,
            identity: self.identity,
            lambda: self.lambda,
            total: self.total,
        }
    }
}

fn check_term(value: f64, name: &str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::Numeric(format!("{name} loss is {value}")))
    }
}

fn apply_step(opt: &mut Adam, params: &mut [Tensor], grads: &[Tensor], lr_scale: f64) {
    let mut refs: Vec<&mut Tensor> = params.iter_mut().collect();
    opt.step(&mut refs, grads, lr_scale);
}

fn stack(entries: &[Tensor]) -> Tensor {
    Tensor::stack_batch(entries)
}

impl TrainState {
    /// Fresh networks and optimizers seeded from `config.seed`.
    pub fn new(config: TrainConfig, segmenter: Option<Segmenter>) -> Result<Self> {
        config.validate()?;
        if config.uses_masks() && config.mask_source == MaskSource::Segmenter && segmenter.is_none() {
            return Err(config_err!("mask_source = segmenter requires a segmenter checkpoint"));
        }
        let mut init = stream_rng(config.seed, streams::INIT);
        let g = Generator::new(config.generator, &mut init);
        let f = Generator::new(config.generator, &mut init);
        let d_x = Discriminator::new(config.discriminator, &mut init);
        let d_y = Discriminator::new(config.discriminator, &mut init);
        let gen_params: Vec<Tensor> = g.params().iter().chain(f.params()).cloned().collect();
        let adam = |p: &[Tensor]| Adam::new(p, config.learning_rate, config.beta1, config.beta2);
        Ok(Self {
            opt_gen: adam(&gen_params),
            opt_d_x: adam(d_x.params()),
            opt_d_y: adam(d_y.params()),
            pool_x: ImagePool::new(config.pool_size, stream_rng(config.seed, streams::POOL_X)),
            pool_y: ImagePool::new(config.pool_size, stream_rng(config.seed, streams::POOL_Y)),
            data_rng: stream_rng(config.seed, streams::DATA),
            gate_rng: stream_rng(config.seed, streams::MASK_GATE),
            g,
            f,
            d_x,
            d_y,
            segmenter,
            config,
            epoch: 0,
            step: 0,
        })
    }

    pub fn all_finite(&self) -> bool {
        self.g.all_finite() && self.f.all_finite() && self.d_x.all_finite() && self.d_y.all_finite()
    }

    /// Masks `[N, 1, H, W]` for a batch, from ground truth or the segmenter.
    fn masks_for(&self, images: &Tensor, truth: Option<Tensor>) -> Result<Tensor> {
        let raw = match self.config.mask_source {
            MaskSource::GroundTruth => truth.ok_or_else(|| data_err!("ground-truth masking needs dataset masks"))?,
            MaskSource::Segmenter => {
                self.segmenter.as_ref().ok_or_else(|| config_err!("no segmenter loaded"))?.segment_tensor(images)?
            }
        };
        Ok(match self.config.mask_mode {
            MaskMode::Soft => raw,
            MaskMode::Binary => raw.map(|v| if v >= self.config.mask_threshold { 1.0 } else { 0.0 }),
        })
    }

    fn pool_masks(entries: &[PoolEntry]) -> Option<Tensor> {
        entries.iter().map(|e| e.mask.clone()).collect::<Option<Vec<_>>>().map(|m| stack(&m))
    }

    /// One alternating update on a pair of unpaired batches.
    pub fn training_step(&mut self, x_batch: &Batch, y_batch: &Batch) -> Result<StepReport> {
        if x_batch.images.is_empty() || y_batch.images.is_empty() {
            return Err(data_err!("training batches must be non-empty"));
        }
        let epoch = self.epoch;
        let mask_prob = mask_probability(epoch, &self.config)?;
        let masked = self.gate_rng.random::<f64>() < mask_prob;
        let lr_scale = lr_factor(epoch, &self.config);
        let (mode, objective, lambda) = (self.config.adversarial, self.config.generator_objective, self.config.lambda);

        let x = images_to_tensor(&x_batch.images)?;
        let y = images_to_tensor(&y_batch.images)?;
        let (_, c, h, w) = x.dims4();
        self.config.generator.check_input(c, h, w)?;
        self.config.discriminator.score_map_dims(h, w)?;
        let x_masks = x_batch.masks.as_deref().map(masks_to_tensor).transpose()?;
        let y_masks = y_batch.masks.as_deref().map(masks_to_tensor).transpose()?;

        // Generators.
        let mut tape = Tape::new();
        let gv = self.g.bind(&mut tape, true);
        let fv = self.f.bind(&mut tape, true);
        let dxv = self.d_x.bind(&mut tape, false);
        let dyv = self.d_y.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let yv = tape.constant(y.clone());
        let fake_y = self.g.forward(&mut tape, &gv, xv);
        let rec_x = self.f.forward(&mut tape, &fv, fake_y);
        let fake_x = self.f.forward(&mut tape, &fv, yv);
        let rec_y = self.g.forward(&mut tape, &gv, fake_x);
        let idt_y = self.g.forward(&mut tape, &gv, yv);
        let idt_x = self.f.forward(&mut tape, &fv, xv);
        let fake_y_value = tape.value(fake_y).clone();
        let fake_x_value = tape.value(fake_x).clone();

        let (d_in_y, d_in_x): (Var, Var) = if masked {
            let my = self.masks_for(&fake_y_value, x_masks.clone())?;
            let mx = self.masks_for(&fake_x_value, y_masks.clone())?;
            let my = tape.constant(my);
            let mx = tape.constant(mx);
            (tape.mul_planes(fake_y, my), tape.mul_planes(fake_x, mx))
        } else {
            (fake_y, fake_x)
        };
        let score_y = self.d_y.forward(&mut tape, &dyv, d_in_y);
        let score_x = self.d_x.forward(&mut tape, &dxv, d_in_x);
        let adv_g = graph::generator_loss(&mut tape, score_y, mode, objective);
        let adv_f = graph::generator_loss(&mut tape, score_x, mode, objective);
        let cycle = graph::paired_l1(&mut tape, xv, rec_x, yv, rec_y);
        let identity = graph::paired_l1(&mut tape, yv, idt_y, xv, idt_x);
        let total = graph::full_objective(&mut tape, adv_g, adv_f, cycle, identity, lambda);

        let adv_g_v = check_term(tape.value(adv_g).item(), "adv_G")?;
        let adv_f_v = check_term(tape.value(adv_f).item(), "adv_F")?;
        let cycle_v = check_term(tape.value(cycle).item(), "cycle")?;
        let identity_v = check_term(tape.value(identity).item(), "identity")?;
        let total_v = check_term(tape.value(total).item(), "total")?;

        let grads = tape.backward(total);
        let n_g = gv.len();
        let gen_vars: Vec<Var> = gv.iter().chain(&fv).copied().collect();
        let gen_params: Vec<Tensor> = self.g.params().iter().chain(self.f.params()).cloned().collect();
        let gen_grads = collect_grads(&grads, &gen_vars, &gen_params);
        ensure_finite(&gen_grads, "generators")?;
        drop(tape);
        let mut updated = gen_params;
        apply_step(&mut self.opt_gen, &mut updated, &gen_grads, lr_scale);
        let f_params = updated.split_off(n_g);
        self.g.params_mut().clone_from_slice(&updated);
        self.f.params_mut().clone_from_slice(&f_params);

        // History pools, one query per sample.
        let mut pooled_y = Vec::with_capacity(x_batch.images.len());
        let mut pooled_x = Vec::with_capacity(y_batch.images.len());
        for n in 0..fake_y_value.dims4().0 {
            let mask = x_masks.as_ref().map(|m| m.batch_item(n));
            pooled_y.push(self.pool_y.query(PoolEntry { image: fake_y_value.batch_item(n), mask }));
        }
        for n in 0..fake_x_value.dims4().0 {
            let mask = y_masks.as_ref().map(|m| m.batch_item(n));
            pooled_x.push(self.pool_x.query(PoolEntry { image: fake_x_value.batch_item(n), mask }));
        }

        let loss_d_y = self.update_discriminator(Domain::Y, &y, y_masks, &pooled_y, masked, lr_scale)?;
        let loss_d_x = self.update_discriminator(Domain::X, &x, x_masks, &pooled_x, masked, lr_scale)?;

        self.step += 1;
        Ok(StepReport {
            step: self.step,
            epoch,
            adv_g: adv_g_v,
            adv_f: adv_f_v,
            cycle: cycle_v,
            identity: identity_v,
            total: total_v,
            lambda,
            loss_d_x,
            loss_d_y,
            mask_used: masked,
            mask_prob,
        })
    }

    fn update_discriminator(
        &mut self,
        which: Domain,
        real: &Tensor,
        real_masks: Option<Tensor>,
        pooled: &[PoolEntry],
        masked: bool,
        lr_scale: f64,
    ) -> Result<f64> {
        let fake = stack(&pooled.iter().map(|e| e.image.clone()).collect::<Vec<_>>());
        let (real_in, fake_in) = if masked {
            let mr = self.masks_for(real, real_masks)?;
            let mf = self.masks_for(&fake, Self::pool_masks(pooled))?;
            (Some(mr), Some(mf))
        } else {
            (None, None)
        };
        let (d, opt, name) = match which {
            Domain::X => (&mut self.d_x, &mut self.opt_d_x, "D_X"),
            Domain::Y => (&mut self.d_y, &mut self.opt_d_y, "D_Y"),
        };
        let mut tape = Tape::new();
        let dv = d.bind(&mut tape, true);
        let mut rv = tape.constant(real.clone());
        let mut fv = tape.constant(fake);
        if let (Some(mr), Some(mf)) = (real_in, fake_in) {
            let mr = tape.constant(mr);
            let mf = tape.constant(mf);
            rv = tape.mul_planes(rv, mr);
            fv = tape.mul_planes(fv, mf);
        }
        let sr = d.forward(&mut tape, &dv, rv);
        let sf = d.forward(&mut tape, &dv, fv);
        let loss = graph::discriminator_loss(&mut tape, sr, sf, self.config.adversarial);
        let value = check_term(tape.value(loss).item(), name)?;
        let grads = collect_grads(&tape.backward(loss), &dv, d.params());
        ensure_finite(&grads, name)?;
        apply_step(opt, d.params_mut(), &grads, lr_scale);
        Ok(value)
    }

    fn steps_per_epoch(&self, len_x: usize, len_y: usize) -> usize {
        self.config.steps_per_epoch.unwrap_or_else(|| len_x.max(len_y).div_ceil(self.config.batch_size))
    }

    /// Serialize every network, optimizer, pool and rng into one container.
    pub fn to_container(&self) -> Result<Container> {
        let pool_flags = |p: &ImagePool<PoolEntry>| p.buffer().iter().map(|e| e.mask.is_some()).collect();
        let meta = StateMeta {
            config: self.config.clone(),
            epoch: self.epoch,
            step: self.step,
            data_rng: RngState::capture(&self.data_rng),
            gate_rng: RngState::capture(&self.gate_rng),
            pool_x_rng: RngState::capture(self.pool_x.rng()),
            pool_y_rng: RngState::capture(self.pool_y.rng()),
            pool_x_masks: pool_flags(&self.pool_x),
            pool_y_masks: pool_flags(&self.pool_y),
            adam_steps: [self.opt_gen.step, self.opt_d_x.step, self.opt_d_y.step],
        };
        let mut tensors = Vec::new();
        for opt in [&self.opt_gen, &self.opt_d_x, &self.opt_d_y] {
            tensors.extend(opt.m.iter().cloned());
            tensors.extend(opt.v.iter().cloned());
        }
        for pool in [&self.pool_x, &self.pool_y] {
            for e in pool.buffer() {
                tensors.push(e.image.clone());
                tensors.extend(e.mask.clone());
            }
        }
        let mut sections = vec![
            self.g.to_section(ModuleKind::GenG)?,
            self.f.to_section(ModuleKind::GenF)?,
            self.d_x.to_section(ModuleKind::DiscX)?,
            self.d_y.to_section(ModuleKind::DiscY)?,
        ];
        if let Some(seg) = &self.segmenter {
            sections.push(seg.to_section()?);
        }
        sections.push(Section::new(ModuleKind::TrainState, &meta, tensors)?);
        Ok(Container::new(sections))
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let g = Generator::from_section(c.section(ModuleKind::GenG)?)?;
        let f = Generator::from_section(c.section(ModuleKind::GenF)?)?;
        let d_x = Discriminator::from_section(c.section(ModuleKind::DiscX)?)?;
        let d_y = Discriminator::from_section(c.section(ModuleKind::DiscY)?)?;
        let segmenter = match c.section(ModuleKind::Segmenter) {
            Ok(s) => Some(Segmenter::from_section(s)?),
            Err(_) => None,
        };
        let section = c.section(ModuleKind::TrainState)?;
        let meta: StateMeta = section.meta()?;
        meta.config.validate().map_err(|e| Error::Checkpoint(format!("stored config: {e}")))?;
        let mut tensors = section.tensors.clone().into_iter();
        let bad = || Error::Checkpoint("train state tensors are incomplete".into());
        let mut adam = |params: &[Tensor], step: u64| -> Result<Adam> {
            let mut opt = Adam::new(params, meta.config.learning_rate, meta.config.beta1, meta.config.beta2);
            opt.step = step;
            for slot in opt.m.iter_mut().chain(opt.v.iter_mut()) {
                let t = tensors.next().ok_or_else(bad)?;
                if t.shape() != slot.shape() {
                    return Err(Error::Checkpoint("optimizer state shape mismatch".into()));
                }
                *slot = t;
            }
            Ok(opt)
        };
        let gen_params: Vec<Tensor> = g.params().iter().chain(f.params()).cloned().collect();
        let opt_gen = adam(&gen_params, meta.adam_steps[0])?;
        let opt_d_x = adam(d_x.params(), meta.adam_steps[1])?;
        let opt_d_y = adam(d_y.params(), meta.adam_steps[2])?;
        let mut pool = |flags: &[bool], rng: &RngState| -> Result<ImagePool<PoolEntry>> {
            if flags.len() > meta.config.pool_size {
                return Err(Error::Checkpoint("pool holds more entries than its capacity".into()));
            }
            let mut entries = Vec::with_capacity(flags.len());
            for &has_mask in flags {
                let image = tensors.next().ok_or_else(bad)?;
                let mask = if has_mask { Some(tensors.next().ok_or_else(bad)?) } else { None };
                entries.push(PoolEntry { image, mask });
            }
            Ok(ImagePool::from_parts(meta.config.pool_size, entries, rng.restore()?))
        };
        let pool_x = pool(&meta.pool_x_masks, &meta.pool_x_rng)?;
        let pool_y = pool(&meta.pool_y_masks, &meta.pool_y_rng)?;
        if tensors.next().is_some() {
            return Err(Error::Checkpoint("unexpected extra train state tensors".into()));
        }
        Ok(Self {
            config: meta.config,
            g,
            f,
            d_x,
            d_y,
            segmenter,
            opt_gen,
            opt_d_x,
            opt_d_y,
            pool_x,
            pool_y,
            data_rng: meta.data_rng.restore()?,
            gate_rng: meta.gate_rng.restore()?,
            epoch: meta.epoch,
            step: meta.step,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

#[derive(Clone, Copy)]
enum Domain {
    X,
    Y,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateMeta {
    config: TrainConfig,
    epoch: usize,
    step: usize,
    data_rng: RngState,
    gate_rng: RngState,
    pool_x_rng: RngState,
    pool_y_rng: RngState,
    pool_x_masks: Vec<bool>,
    pool_y_masks: Vec<bool>,
    adam_steps: [u64; 3],
}

/// Files written by [`train`] inside its run directory.
pub mod layout {
    pub const METRICS: &str = "metrics.jsonl";
    pub const CHECKPOINTS: &str = "checkpoints";
    pub const FINAL: &str = "final.smcg";
    pub const SAMPLES: &str = "samples";

    pub fn epoch_checkpoint(epoch: usize) -> String {
        format!("epoch_{epoch:04}.smcg")
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    /// Reports of the steps run by this call.
    pub reports: Vec<StepReport>,
    pub final_checkpoint: PathBuf,
}

/// Where a run starts from.
pub enum Start {
    Fresh(Option<Segmenter>),
    Resume(PathBuf),
}

fn open_metrics(path: &Path, keep_through_step: usize) -> Result<File> {
    if keep_through_step == 0 {
        return File::create(path).map_err(|e| Error::io(path, e));
    }
    let mut kept = Vec::new();
    if path.exists() {
        let reader = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
        for line in reader.lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let report: StepReport = serde_json::from_str(&line).map_err(|e| data_err!("bad metrics line: {e}"))?;
            if report.step <= keep_through_step {
                kept.push(line);
            }
        }
    }
    let mut file = File::create(path).map_err(|e| Error::io(path, e))?;
    for line in kept {
        writeln!(file, "{line}").map_err(|e| Error::io(path, e))?;
    }
    drop(file);
    OpenOptions::new().append(true).open(path).map_err(|e| Error::io(path, e))
}

/// Translate the first few X images with G and save input/output pairs.
pub fn write_samples(state: &TrainState, data_x: &ImageDataset, dir: &Path, count: usize) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, img) in data_x.images.iter().take(count).enumerate() {
        img.save_png(&dir.join(format!("input_{i:02}.png")))?;
        state.g.generate(img)?.save_png(&dir.join(format!("output_{i:02}.png")))?;
    }
    Ok(())
}

/// Run (or continue) training, writing metrics, checkpoints and samples under `run_dir`.
pub fn train(
    config: &TrainConfig,
    data_x: &ImageDataset,
    data_y: &ImageDataset,
    start: Start,
    run_dir: &Path,
) -> Result<TrainOutcome> {
    config.validate()?;
    if data_x.is_empty() || data_y.is_empty() {
        return Err(data_err!("both domains need at least one image"));
    }
    for ds in [data_x, data_y] {
        if ds.images.iter().any(|img| img.range() != ValueRange::Symmetric) {
            return Err(data_err!("training images must be in the symmetric range"));
        }
    }
    if config.uses_masks() && config.mask_source == MaskSource::GroundTruth && (data_x.masks.is_none() || data_y.masks.is_none())
    {
        return Err(data_err!("mask_source = ground_truth needs masks for both domains"));
    }
    let mut state = match start {
        Start::Fresh(seg) => TrainState::new(config.clone(), seg)?,
        Start::Resume(path) => {
            let state = TrainState::load(&path)?;
            if &state.config != config {
                return Err(config_err!("resume checkpoint was written with a different training config"));
            }
            state
        }
    };
    let spe = state.steps_per_epoch(data_x.len(), data_y.len());
    let ckpt_dir = run_dir.join(layout::CHECKPOINTS);
    fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
    let metrics_path = run_dir.join(layout::METRICS);
    let mut metrics = open_metrics(&metrics_path, state.step)?;

    let mut reports = Vec::new();
    while state.epoch < config.epochs {
        let done_in_epoch = state.step - state.epoch * spe;
        for _ in done_in_epoch..spe {
            let (xb, yb) = sample_unpaired_batch(data_x, data_y, config.batch_size, &mut state.data_rng)?;
            let report = state.training_step(&xb, &yb)?;
            let line = serde_json::to_string(&report).expect("report serializes");
            writeln!(metrics, "{line}").map_err(|e| Error::io(&metrics_path, e))?;
            reports.push(report);
        }
        state.epoch += 1;
        if let Some(last) = reports.last() {
            log::info!(
                "epoch {}/{}: total {:.4} cycle {:.4} D_X {:.4} D_Y {:.4}",
                state.epoch,
                config.epochs,
                last.total,
                last.cycle,
                last.loss_d_x,
                last.loss_d_y
            );
        }
        if state.epoch % config.checkpoint_every == 0 && state.epoch < config.epochs {
            state.save(&ckpt_dir.join(layout::epoch_checkpoint(state.epoch)))?;
        }
    }
    metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
    let final_checkpoint = run_dir.join(layout::FINAL);
    state.save(&final_checkpoint)?;
    state.save(&ckpt_dir.join(layout::epoch_checkpoint(state.epoch)))?;
    write_samples(&state, data_x, &run_dir.join(layout::SAMPLES), 8)?;
    Ok(TrainOutcome { state, reports, final_checkpoint })
}

/// Read a metrics log back.
pub fn read_metrics(path: &Path) -> Result<Vec<StepReport>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| data_err!("bad metrics line in {}: {e}", path.display())))
        .collect()
}

/// Translate an image of any range with `generator`.
pub fn translate_image(generator: &Generator, image: &Image) -> Result<Image> {
    generator.generate(&image.to_range(ValueRange::Symmetric))
}
