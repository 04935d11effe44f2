//! The two translators (G: X→Y, F: Y→X) and the two patch discriminators.
//!
//! Generator: reflection-padded 7×7 stem, strided 3×3 downsampling, a stack
//! of residual blocks, transposed-convolution upsampling and a 7×7 `tanh`
//! head. Discriminator: 4×4 convolutions with LeakyReLU(0.2), instance
//! normalization after the first layer, and a one-channel score map.

use rand::Rng;
use serde::{Deserialize, Serialize};
use smcyclegan_autograd::{Tape, Tensor, Var};

use crate::checkpoint::{check_shapes, Container, ModuleKind, Section};
use crate::error::{shape_err, Error, Result};
use crate::image::{images_to_tensor, Image, ValueRange};
use crate::nn::{conv_output_len, normal_tensor, Cursor, Network};

const NORM_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;
const LEAK: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorArch {
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_channels: usize,
    pub n_res_blocks: usize,
    pub n_downsampling: usize,
}

impl Default for GeneratorArch {
    /// Full-scale ResNet generator for 256×256 inputs.
    fn default() -> Self {
        Self { in_channels: 3, out_channels: 3, base_channels: 64, n_res_blocks: 9, n_downsampling: 2 }
    }
}

impl GeneratorArch {
    /// Desk-scale generator for images of at most 64 pixels.
    pub fn toy() -> Self {
        Self { base_channels: 8, n_res_blocks: 3, ..Self::default() }
    }

    fn trunk_channels(&self) -> usize {
        self.base_channels << self.n_downsampling
    }

    /// Parameter shapes in checkpoint order.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let b = self.base_channels;
        let mut shapes = vec![vec![b, self.in_channels, 7, 7]];
        for i in 0..self.n_downsampling {
            shapes.push(vec![b << (i + 1), b << i, 3, 3]);
        }
        let c = self.trunk_channels();
        for _ in 0..self.n_res_blocks {
            shapes.push(vec![c, c, 3, 3]);
            shapes.push(vec![c, c, 3, 3]);
        }
        for i in (0..self.n_downsampling).rev() {
            shapes.push(vec![b << (i + 1), b << i, 3, 3]);
        }
        shapes.push(vec![self.out_channels, b, 7, 7]);
        shapes.push(vec![self.out_channels]);
        shapes
    }

    /// Whether `h × w` inputs fit this generator.
    pub fn check_input(&self, channels: usize, h: usize, w: usize) -> Result<()> {
        let factor = 1 << self.n_downsampling;
        if channels != self.in_channels {
            return Err(shape_err!("generator expects {} channels, got {channels}", self.in_channels));
        }
        if !h.is_multiple_of(factor) || !w.is_multiple_of(factor) || h / factor < 2 || w / factor < 2 || h < 4 || w < 4 {
            return Err(shape_err!(
                "generator input {h}x{w} must be divisible by {factor} with at least 2 pixels per side after downsampling"
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    arch: GeneratorArch,
    params: Vec<Tensor>,
}

impl Network for Generator {
    fn params(&self) -> &[Tensor] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }
}

impl Generator {
    pub fn new(arch: GeneratorArch, rng: &mut impl Rng) -> Self {
        let params = arch
            .param_shapes()
            .iter()
            .map(|s| if s.len() == 1 { Tensor::zeros(s) } else { normal_tensor(s, INIT_STD, rng) })
            .collect();
        Self { arch, params }
    }

    pub fn from_params(arch: GeneratorArch, params: Vec<Tensor>) -> Result<Self> {
        check_shapes(ModuleKind::GenG, &params, &arch.param_shapes())?;
        Ok(Self { arch, params })
    }

    pub fn arch(&self) -> &GeneratorArch {
        &self.arch
    }

    /// Record the forward pass of an `[N, C, H, W]` batch on `tape`.
    pub fn forward(&self, tape: &mut Tape, params: &[Var], x: Var) -> Var {
        let mut p = Cursor::new(params);
        let pad = tape.reflect_pad(x, 3);
        let mut h = tape.conv2d(pad, p.next(), None, 1, 0);
        h = tape.instance_norm(h, NORM_EPS);
        h = tape.relu(h);
        for _ in 0..self.arch.n_downsampling {
            h = tape.conv2d(h, p.next(), None, 2, 1);
            h = tape.instance_norm(h, NORM_EPS);
            h = tape.relu(h);
        }
        for _ in 0..self.arch.n_res_blocks {
            let skip = h;
            let mut r = tape.reflect_pad(h, 1);
            r = tape.conv2d(r, p.next(), None, 1, 0);
            r = tape.instance_norm(r, NORM_EPS);
            r = tape.relu(r);
            r = tape.reflect_pad(r, 1);
            r = tape.conv2d(r, p.next(), None, 1, 0);
            r = tape.instance_norm(r, NORM_EPS);
            h = tape.add(skip, r);
        }
        for _ in 0..self.arch.n_downsampling {
            h = tape.conv_transpose2d(h, p.next(), None, 2, 1, 1);
            h = tape.instance_norm(h, NORM_EPS);
            h = tape.relu(h);
        }
        let pad = tape.reflect_pad(h, 3);
        let w = p.next();
        let b = p.next();
        let out = tape.conv2d(pad, w, Some(b), 1, 0);
        p.finish();
        tape.tanh(out)
    }

    /// Translate a batch tensor without recording gradients.
    pub fn translate_tensor(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4();
        self.arch.check_input(c, h, w)?;
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, &vars, xv);
        Ok(tape.value(out).clone())
    }

    /// Translate one image in the symmetric range.
    pub fn generate(&self, image: &Image) -> Result<Image> {
        if image.range() != ValueRange::Symmetric {
            return Err(shape_err!("generator input must be in the symmetric [-1,1] range"));
        }
        let out = self.translate_tensor(&images_to_tensor(std::slice::from_ref(image))?)?;
        Image::from_tensor(&out, 0, ValueRange::Symmetric)
    }

    pub fn to_section(&self, kind: ModuleKind) -> Result<Section> {
        Section::new(kind, &self.arch, self.params.clone())
    }

    pub fn from_section(section: &Section) -> Result<Self> {
        if !matches!(section.kind, ModuleKind::GenG | ModuleKind::GenF) {
            return Err(Error::Checkpoint(format!("{:?} section is not a generator", section.kind)));
        }
        let arch: GeneratorArch = section.meta()?;
        check_shapes(section.kind, &section.tensors, &arch.param_shapes())?;
        Ok(Self { arch, params: section.tensors.clone() })
    }

    /// Load the generator with `kind` from a checkpoint file.
    pub fn load(path: &std::path::Path, kind: ModuleKind) -> Result<Self> {
        Self::from_section(Container::load(path)?.section(kind)?)
    }
}

/// Output head of the discriminator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscriminatorHead {
    /// Scores in (0,1), paired with the log-form adversarial losses.
    Sigmoid,
    /// Raw scores, paired with the least-squares losses.
    Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorArch {
    pub in_channels: usize,
    pub base_channels: usize,
    pub n_layers: usize,
    pub head: DiscriminatorHead,
}

impl Default for DiscriminatorArch {
    /// 70×70 receptive-field patch classifier.
    fn default() -> Self {
        Self { in_channels: 3, base_channels: 64, n_layers: 3, head: DiscriminatorHead::Sigmoid }
    }
}

/// One convolution of the discriminator stack: `(in, out, stride)`, kernel 4, padding 1.
struct ConvSpec {
    in_ch: usize,
    out_ch: usize,
    stride: usize,
    bias: bool,
    norm: bool,
}

impl DiscriminatorArch {
    pub const KERNEL: usize = 4;
    pub const PAD: usize = 1;

    /// Desk-scale classifier for 32×32 inputs (16×16 receptive field).
    pub fn toy() -> Self {
        Self { base_channels: 16, n_layers: 1, ..Self::default() }
    }

    fn layers(&self) -> Vec<ConvSpec> {
        let b = self.base_channels;
        let width = |i: usize| b * (1usize << i.min(3));
        let mut v = vec![ConvSpec { in_ch: self.in_channels, out_ch: b, stride: 2, bias: true, norm: false }];
        for i in 1..self.n_layers {
            v.push(ConvSpec { in_ch: width(i - 1), out_ch: width(i), stride: 2, bias: false, norm: true });
        }
        let last = width(self.n_layers - 1);
        v.push(ConvSpec { in_ch: last, out_ch: width(self.n_layers), stride: 1, bias: false, norm: true });
        v.push(ConvSpec { in_ch: width(self.n_layers), out_ch: 1, stride: 1, bias: true, norm: false });
        v
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = Vec::new();
        for l in self.layers() {
            shapes.push(vec![l.out_ch, l.in_ch, Self::KERNEL, Self::KERNEL]);
            if l.bias {
                shapes.push(vec![l.out_ch]);
            }
        }
        shapes
    }

    /// Strides of the convolution stack, in order.
    pub fn strides(&self) -> Vec<usize> {
        self.layers().iter().map(|l| l.stride).collect()
    }

    /// Side length of the input patch seen by one output score.
    pub fn receptive_field(&self) -> usize {
        self.strides().iter().rev().fold(1, |rf, s| (rf - 1) * s + Self::KERNEL)
    }

    /// Score-map dims for an `h × w` input.
    pub fn score_map_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let rf = self.receptive_field();
        if h < rf || w < rf {
            return Err(shape_err!("discriminator input {h}x{w} smaller than receptive field {rf}"));
        }
        let mut dims = (h, w);
        for s in self.strides() {
            dims = (
                conv_output_len(dims.0, Self::KERNEL, s, Self::PAD).ok_or_else(|| shape_err!("input too small"))?,
                conv_output_len(dims.1, Self::KERNEL, s, Self::PAD).ok_or_else(|| shape_err!("input too small"))?,
            );
        }
        Ok(dims)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    arch: DiscriminatorArch,
    params: Vec<Tensor>,
}

impl Network for Discriminator {
    fn params(&self) -> &[Tensor] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }
}

impl Discriminator {
    pub fn new(arch: DiscriminatorArch, rng: &mut impl Rng) -> Self {
        let params = arch
            .param_shapes()
            .iter()
            .map(|s| if s.len() == 1 { Tensor::zeros(s) } else { normal_tensor(s, INIT_STD, rng) })
            .collect();
        Self { arch, params }
    }

    pub fn from_params(arch: DiscriminatorArch, params: Vec<Tensor>) -> Result<Self> {
        check_shapes(ModuleKind::DiscX, &params, &arch.param_shapes())?;
        Ok(Self { arch, params })
    }

    pub fn arch(&self) -> &DiscriminatorArch {
        &self.arch
    }

    pub fn forward(&self, tape: &mut Tape, params: &[Var], x: Var) -> Var {
        let mut p = Cursor::new(params);
        let layers = self.arch.layers();
        let n = layers.len();
        let mut h = x;
        for (i, l) in layers.iter().enumerate() {
            let w = p.next();
            let b = l.bias.then(|| p.next());
            h = tape.conv2d(h, w, b, l.stride, DiscriminatorArch::PAD);
            if l.norm {
                h = tape.instance_norm(h, NORM_EPS);
            }
            if i + 1 < n {
                h = tape.leaky_relu(h, LEAK);
            }
        }
        p.finish();
        match self.arch.head {
            DiscriminatorHead::Sigmoid => tape.sigmoid(h),
            DiscriminatorHead::Linear => h,
        }
    }

    /// Check an `[N, C, H, W]` input against the architecture.
    pub fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_, c, h, w) = x.dims4();
        if c != self.arch.in_channels {
            return Err(shape_err!("discriminator expects {} channels, got {c}", self.arch.in_channels));
        }
        self.arch.score_map_dims(h, w).map(|_| ())
    }

    /// Score map `[N, 1, h', w']` for a batch tensor.
    pub fn score_tensor(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, &vars, xv);
        Ok(tape.value(out).clone())
    }

    /// Score map `[1, 1, h', w']` for a single image.
    pub fn discriminate(&self, image: &Image) -> Result<Tensor> {
        self.score_tensor(&image.to_tensor())
    }

    pub fn to_section(&self, kind: ModuleKind) -> Result<Section> {
        Section::new(kind, &self.arch, self.params.clone())
    }

    pub fn from_section(section: &Section) -> Result<Self> {
        if !matches!(section.kind, ModuleKind::DiscX | ModuleKind::DiscY) {
            return Err(Error::Checkpoint(format!("{:?} section is not a discriminator", section.kind)));
        }
        let arch: DiscriminatorArch = section.meta()?;
        check_shapes(section.kind, &section.tensors, &arch.param_shapes())?;
        Ok(Self { arch, params: section.tensors.clone() })
    }
}
