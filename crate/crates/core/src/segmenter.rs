//! U-Net subject/background segmenter.
//!
//! Each level is two 3×3 convolutions with ReLU; the encoder halves
//! resolution with 2×2 max pooling, the decoder doubles it with a 2×2
//! transposed convolution and concatenates the matching encoder features.
//! A 1×1 convolution and a sigmoid produce the per-pixel subject score.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use smcyclegan_autograd::{Adagrad, Tape, Tensor, Var};

use crate::checkpoint::{check_shapes, Container, ModuleKind, Section};
use crate::error::{config_err, data_err, shape_err, Error, Result};
use crate::image::{images_to_tensor, masks_to_tensor, Image, Mask, ValueRange};
use crate::nn::{collect_grads, ensure_finite, normal_tensor, Cursor, Network};
use crate::rng::{stream_rng, streams};

/// Clamp used by the segmentation cross-entropy.
pub const BCE_EPS: f64 = 1e-7;
const DICE_SMOOTH: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetArch {
    pub in_channels: usize,
    pub base_channels: usize,
    pub depth: usize,
}

impl Default for UNetArch {
    fn default() -> Self {
        Self { in_channels: 3, base_channels: 64, depth: 4 }
    }
}

impl UNetArch {
    pub fn toy() -> Self {
        Self { in_channels: 3, base_channels: 16, depth: 3 }
    }

    fn width(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Parameter shapes in checkpoint order: encoder levels, bottleneck,
    /// decoder levels (deepest first), head.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = Vec::new();
        let double = |shapes: &mut Vec<Vec<usize>>, cin: usize, cout: usize| {
            shapes.push(vec![cout, cin, 3, 3]);
            shapes.push(vec![cout]);
            shapes.push(vec![cout, cout, 3, 3]);
            shapes.push(vec![cout]);
        };
        let mut cin = self.in_channels;
        for level in 0..self.depth {
            double(&mut shapes, cin, self.width(level));
            cin = self.width(level);
        }
        double(&mut shapes, cin, self.width(self.depth));
        for level in (0..self.depth).rev() {
            let c = self.width(level);
            shapes.push(vec![self.width(level + 1), c, 2, 2]);
            shapes.push(vec![c]);
            double(&mut shapes, 2 * c, c);
        }
        shapes.push(vec![1, self.width(0), 1, 1]);
        shapes.push(vec![1]);
        shapes
    }

    pub fn check_input(&self, channels: usize, h: usize, w: usize) -> Result<()> {
        let factor = 1 << self.depth;
        if channels != self.in_channels {
            return Err(shape_err!("segmenter expects {} channels, got {channels}", self.in_channels));
        }
        if h == 0 || w == 0 || !h.is_multiple_of(factor) || !w.is_multiple_of(factor) {
            return Err(shape_err!("segmenter input {h}x{w} must be a positive multiple of {factor}"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Segmenter {
    arch: UNetArch,
    params: Vec<Tensor>,
}

impl Network for Segmenter {
    fn params(&self) -> &[Tensor] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }
}

impl Segmenter {
    /// He-initialized weights, zero biases.
    pub fn new(arch: UNetArch, rng: &mut impl Rng) -> Self {
        let params = arch
            .param_shapes()
            .iter()
            .map(|s| match s.len() {
                1 => Tensor::zeros(s),
                _ if s[2] == 2 => normal_tensor(s, (1.0 / s[0] as f64).sqrt(), rng),
                _ => normal_tensor(s, (2.0 / (s[1] * s[2] * s[3]) as f64).sqrt(), rng),
            })
            .collect();
        Self { arch, params }
    }

    pub fn from_params(arch: UNetArch, params: Vec<Tensor>) -> Result<Self> {
        check_shapes(ModuleKind::Segmenter, &params, &arch.param_shapes())?;
        Ok(Self { arch, params })
    }

    pub fn arch(&self) -> &UNetArch {
        &self.arch
    }

    fn double_conv(tape: &mut Tape, p: &mut Cursor<'_>, x: Var) -> Var {
        let (w, b) = (p.next(), p.next());
        let h = tape.conv2d(x, w, Some(b), 1, 1);
        let h = tape.relu(h);
        let (w, b) = (p.next(), p.next());
        let h = tape.conv2d(h, w, Some(b), 1, 1);
        tape.relu(h)
    }

    /// Subject probabilities `[N, 1, H, W]` for a symmetric-range batch.
    pub fn forward(&self, tape: &mut Tape, params: &[Var], x: Var) -> Var {
        let mut p = Cursor::new(params);
        let mut skips = Vec::with_capacity(self.arch.depth);
        let mut h = x;
        for _ in 0..self.arch.depth {
            h = Self::double_conv(tape, &mut p, h);
            skips.push(h);
            h = tape.max_pool2(h);
        }
        h = Self::double_conv(tape, &mut p, h);
        for skip in skips.into_iter().rev() {
            let (w, b) = (p.next(), p.next());
            h = tape.conv_transpose2d(h, w, Some(b), 2, 0, 0);
            h = tape.concat_channels(skip, h);
            h = Self::double_conv(tape, &mut p, h);
        }
        let (w, b) = (p.next(), p.next());
        let logits = tape.conv2d(h, w, Some(b), 1, 0);
        p.finish();
        tape.sigmoid(logits)
    }

    /// Masks `[N, 1, H, W]` for a symmetric-range batch tensor.
    pub fn segment_tensor(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4();
        self.arch.check_input(c, h, w)?;
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, &vars, xv);
        let t = tape.value(out).clone();
        if !t.is_finite() {
            return Err(Error::Numeric("segmenter produced a non-finite score".into()));
        }
        Ok(t)
    }

    pub fn segment(&self, image: &Image) -> Result<Mask> {
        let x = image.to_range(ValueRange::Symmetric).to_tensor();
        Mask::from_tensor(&self.segment_tensor(&x)?, 0)
    }

    pub fn to_section(&self) -> Result<Section> {
        Section::new(ModuleKind::Segmenter, &self.arch, self.params.clone())
    }

    pub fn from_section(section: &Section) -> Result<Self> {
        if section.kind != ModuleKind::Segmenter {
            return Err(Error::Checkpoint(format!("{:?} section is not a segmenter", section.kind)));
        }
        let arch: UNetArch = section.meta()?;
        Self::from_params(arch, section.tensors.clone())
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        Container::new(vec![self.to_section()?]).save(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_section(Container::load(path)?.section(ModuleKind::Segmenter)?)
    }
}

/// Segmentation training objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegLoss {
    #[default]
    Bce,
    Dice,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegTrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub loss: SegLoss,
    pub arch: UNetArch,
}

impl Default for SegTrainConfig {
    fn default() -> Self {
        Self { epochs: 15, learning_rate: 0.01, batch_size: 4, seed: 0, loss: SegLoss::Bce, arch: UNetArch::default() }
    }
}

impl SegTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(config_err!("segmenter epochs must be positive"));
        }
        if self.batch_size == 0 {
            return Err(config_err!("segmenter batch_size must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(config_err!("segmenter learning_rate must be positive"));
        }
        if self.arch.depth == 0 || self.arch.base_channels == 0 {
            return Err(config_err!("segmenter depth and base_channels must be positive"));
        }
        Ok(())
    }
}

/// Mean per-pixel binary cross-entropy with predictions clamped to `[ε, 1-ε]`.
pub fn segmenter_loss(pred: &Mask, truth: &Mask) -> Result<f64> {
    if (pred.height(), pred.width()) != (truth.height(), truth.width()) {
        return Err(shape_err!("prediction {}x{} vs truth {}x{}", pred.height(), pred.width(), truth.height(), truth.width()));
    }
    let mut tape = Tape::new();
    let p = tape.constant(pred.to_tensor());
    let l = tape.bce(p, &truth.to_tensor(), BCE_EPS);
    Ok(tape.value(l).item())
}

/// Soft Dice loss between a prediction and a target mask.
pub fn dice_loss(pred: &Mask, truth: &Mask) -> Result<f64> {
    if (pred.height(), pred.width()) != (truth.height(), truth.width()) {
        return Err(shape_err!("dice: mask dims differ"));
    }
    let mut tape = Tape::new();
    let p = tape.constant(pred.to_tensor());
    let l = tape.dice(p, &truth.to_tensor(), DICE_SMOOTH);
    Ok(tape.value(l).item())
}

/// Loss graph for a batch of predictions against constant targets.
pub fn segmentation_objective(tape: &mut Tape, pred: Var, truth: &Tensor, loss: SegLoss) -> Var {
    match loss {
        SegLoss::Bce => tape.bce(pred, truth, BCE_EPS),
        SegLoss::Dice => tape.dice(pred, truth, DICE_SMOOTH),
    }
}

#[derive(Clone, Debug)]
pub struct SegTrainOutcome {
    pub segmenter: Segmenter,
    /// Mean training loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

/// Train a U-Net on image/mask pairs with Adagrad.
pub fn train_segmenter(pairs: &[(Image, Mask)], config: &SegTrainConfig) -> Result<SegTrainOutcome> {
    config.validate()?;
    let (first, _) = pairs.first().ok_or_else(|| data_err!("segmenter training set is empty"))?;
    let (h, w) = (first.height(), first.width());
    config.arch.check_input(first.channels(), h, w)?;
    for (i, (img, m)) in pairs.iter().enumerate() {
        if (img.height(), img.width(), img.channels()) != (h, w, first.channels()) || (m.height(), m.width()) != (h, w) {
            return Err(data_err!("training pair {i} is not {h}x{w}"));
        }
    }
    let images: Vec<Image> = pairs.iter().map(|(img, _)| img.to_range(ValueRange::Symmetric)).collect();

    let mut rng = stream_rng(config.seed, streams::SEGMENTER);
    let mut net = Segmenter::new(config.arch, &mut rng);
    let mut opt = Adagrad::new(net.params(), config.learning_rate);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<Image> = chunk.iter().map(|&i| images[i].clone()).collect();
            let masks: Vec<Mask> = chunk.iter().map(|&i| pairs[i].1.clone()).collect();
            let x = images_to_tensor(&batch)?;
            let truth = masks_to_tensor(&masks)?;

            let mut tape = Tape::new();
            let vars = net.bind(&mut tape, true);
            let xv = tape.constant(x);
            let pred = net.forward(&mut tape, &vars, xv);
            let loss = segmentation_objective(&mut tape, pred, &truth, config.loss);
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Numeric(format!("segmenter loss is {value} in epoch {epoch}")));
            }
            let grads = collect_grads(&tape.backward(loss), &vars, net.params());
            ensure_finite(&grads, "segmenter")?;
            let mut params: Vec<&mut Tensor> = net.params_mut().iter_mut().collect();
            opt.step(&mut params, &grads);
            total += value * chunk.len() as f64;
        }
        let mean = total / pairs.len() as f64;
        log::info!("segmenter epoch {}/{}: loss {mean:.6}", epoch + 1, config.epochs);
        epoch_losses.push(mean);
    }
    Ok(SegTrainOutcome { segmenter: net, epoch_losses })
}

/// Intersection over union of two masks binarized at `threshold`.
pub fn iou(pred: &Mask, truth: &Mask, threshold: f64) -> Result<f64> {
    if (pred.height(), pred.width()) != (truth.height(), truth.width()) {
        return Err(shape_err!("iou: mask dims differ"));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &t) in pred.data().iter().zip(truth.data()) {
        let (a, b) = (p >= threshold, t >= threshold);
        inter += (a && b) as usize;
        union += (a || b) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}
