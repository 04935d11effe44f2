//! Image and mask value types, mask algebra, resizing and PNG I/O.
//!
//! Images are stored planar (`C × H × W`), which is also the per-sample
//! layout of network tensors, so conversion is a copy rather than a shuffle.

use std::path::Path;

use serde::{Deserialize, Serialize};
use smcyclegan_autograd::Tensor;

use crate::error::{config_err, shape_err, Error, Result};

/// Declared value range of an [`Image`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueRange {
    /// `[0, 1]`
    Unit,
    /// `[-1, 1]`
    Symmetric,
}

impl ValueRange {
    pub fn bounds(self) -> (f64, f64) {
        match self {
            ValueRange::Unit => (0.0, 1.0),
            ValueRange::Symmetric => (-1.0, 1.0),
        }
    }
}

/// The two translation domains.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainTag {
    /// Source domain X.
    Art,
    /// Target domain Y.
    Real,
}

impl DomainTag {
    pub fn image_dir(self) -> &'static str {
        match self {
            DomainTag::Art => "domain_a",
            DomainTag::Real => "domain_b",
        }
    }

    pub fn mask_dir(self) -> &'static str {
        match self {
            DomainTag::Art => "masks_a",
            DomainTag::Real => "masks_b",
        }
    }

    pub fn other(self) -> Self {
        match self {
            DomainTag::Art => DomainTag::Real,
            DomainTag::Real => DomainTag::Art,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
    range: ValueRange,
}

impl Image {
    /// Build an image from planar `C × H × W` data, validating dims and range.
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>, range: ValueRange) -> Result<Self> {
        if height == 0 || width == 0 || !(channels == 1 || channels == 3) {
            return Err(shape_err!("invalid image dims {height}x{width}x{channels}"));
        }
        if data.len() != height * width * channels {
            return Err(shape_err!(
                "image {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            ));
        }
        let (lo, hi) = range.bounds();
        if let Some(bad) = data.iter().find(|v| !(**v >= lo && **v <= hi)) {
            return Err(Error::Numeric(format!("pixel value {bad} outside {range:?} range")));
        }
        Ok(Self { height, width, channels, data, range })
    }

    /// Like [`Image::new`] but clamps values into range instead of rejecting them.
    /// NaN is still rejected.
    pub fn new_clamped(height: usize, width: usize, channels: usize, mut data: Vec<f64>, range: ValueRange) -> Result<Self> {
        let (lo, hi) = range.bounds();
        data.iter_mut().for_each(|v| *v = v.clamp(lo, hi));
        Self::new(height, width, channels, data, range)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64, range: ValueRange) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels], range)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn range(&self) -> ValueRange {
        self.range
    }

    /// Planar `C × H × W` values.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, h: usize, w: usize, c: usize) -> f64 {
        self.data[(c * self.height + h) * self.width + w]
    }

    /// Same content expressed in another value range.
    pub fn to_range(&self, range: ValueRange) -> Image {
        let data = match (self.range, range) {
            (a, b) if a == b => self.data.clone(),
            (ValueRange::Unit, ValueRange::Symmetric) => self.data.iter().map(|v| 2.0 * v - 1.0).collect(),
            (ValueRange::Symmetric, ValueRange::Unit) => self.data.iter().map(|v| (v + 1.0) / 2.0).collect(),
            _ => unreachable!(),
        };
        let (lo, hi) = range.bounds();
        let data = data.into_iter().map(|v: f64| v.clamp(lo, hi)).collect();
        Image { data, range, ..*self }
    }

    /// `[1, C, H, W]` tensor of the raw values.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, self.channels, self.height, self.width], self.data.clone())
    }

    /// Sample `n` of an `[N, C, H, W]` tensor; values are clamped into `range`.
    pub fn from_tensor(t: &Tensor, n: usize, range: ValueRange) -> Result<Image> {
        let (batch, c, h, w) = t.dims4();
        if n >= batch {
            return Err(shape_err!("sample {n} out of batch of {batch}"));
        }
        let per = c * h * w;
        if let Some(bad) = t.data()[n * per..(n + 1) * per].iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite value {bad} in network output")));
        }
        Image::new_clamped(h, w, c, t.data()[n * per..(n + 1) * per].to_vec(), range)
    }

    pub fn load_png(path: &Path, range: ValueRange) -> Result<Image> {
        let img = image::open(path).map_err(|source| Error::Codec { path: path.to_path_buf(), source })?;
        let rgb = img.to_rgb8();
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        let mut data = vec![0.0; 3 * h * w];
        for (x, y, px) in rgb.enumerate_pixels() {
            for c in 0..3 {
                data[(c * h + y as usize) * w + x as usize] = px[c] as f64 / 255.0;
            }
        }
        Ok(Image::new(h, w, 3, data, ValueRange::Unit)?.to_range(range))
    }

    /// Write as 8-bit PNG (RGB, or grayscale for one channel).
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let unit = self.to_range(ValueRange::Unit);
        let (h, w) = (self.height, self.width);
        let result = if self.channels == 3 {
            let buf = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
                image::Rgb(std::array::from_fn(|c| quantize(unit.get(y as usize, x as usize, c))))
            });
            buf.save(path)
        } else {
            let buf = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
                image::Luma([quantize(unit.get(y as usize, x as usize, 0))])
            });
            buf.save(path)
        };
        result.map_err(|source| Error::Codec { path: path.to_path_buf(), source })
    }
}

/// Unit value to 8 bits with round-half-up.
pub fn quantize(v: f64) -> u8 {
    (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Soft subject mask: 1 marks the adversarial-loss activation region,
/// 0 the silent region.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(shape_err!("mask {height}x{width} with {} values", data.len()));
        }
        if let Some(bad) = data.iter().find(|v| !(**v >= 0.0 && **v <= 1.0)) {
            return Err(Error::Numeric(format!("mask value {bad} outside [0,1]")));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![1.0; height * width] }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0.0; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, h: usize, w: usize) -> f64 {
        self.data[h * self.width + w]
    }

    /// Element-wise product of two masks.
    pub fn compose(&self, other: &Mask) -> Result<Mask> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(shape_err!("mask dims {}x{} vs {}x{}", self.height, self.width, other.height, other.width));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a * b).collect();
        Ok(Mask { data, ..*self })
    }

    /// `[1, 1, H, W]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, 1, self.height, self.width], self.data.clone())
    }

    /// Sample `n` of an `[N, 1, H, W]` tensor; values are clamped into `[0, 1]`.
    pub fn from_tensor(t: &Tensor, n: usize) -> Result<Mask> {
        let (batch, c, h, w) = t.dims4();
        if c != 1 || n >= batch {
            return Err(shape_err!("mask tensor {:?}, sample {n}", t.shape()));
        }
        let slice = &t.data()[n * h * w..(n + 1) * h * w];
        if slice.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite mask value".into()));
        }
        Mask::new(h, w, slice.iter().map(|v| v.clamp(0.0, 1.0)).collect())
    }

    pub fn load_png(path: &Path) -> Result<Mask> {
        let img = image::open(path).map_err(|source| Error::Codec { path: path.to_path_buf(), source })?;
        let gray = img.to_luma8();
        let (w, h) = (gray.width() as usize, gray.height() as usize);
        let data = gray.pixels().map(|p| p[0] as f64 / 255.0).collect();
        Mask::new(h, w, data)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf = image::GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            image::Luma([quantize(self.get(y as usize, x as usize))])
        });
        buf.save(path).map_err(|source| Error::Codec { path: path.to_path_buf(), source })
    }
}

/// Multiply every channel of `image` by `mask`.
pub fn apply_mask(image: &Image, mask: &Mask) -> Result<Image> {
    if (image.height, image.width) != (mask.height, mask.width) {
        return Err(shape_err!("mask {}x{} does not match image {}x{}", mask.height, mask.width, image.height, image.width));
    }
    let plane = image.height * image.width;
    let data = image.data.chunks(plane).flat_map(|ch| ch.iter().zip(&mask.data).map(|(v, m)| v * m)).collect();
    Ok(Image { data, ..*image })
}

/// 1 where `mask >= threshold`, else 0.
pub fn binarize_mask(mask: &Mask, threshold: f64) -> Result<Mask> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(config_err!("binarize threshold {threshold} outside (0,1)"));
    }
    let data = mask.data.iter().map(|&v| if v >= threshold { 1.0 } else { 0.0 }).collect();
    Ok(Mask { data, ..*mask })
}

/// Bilinear resampling with half-pixel centres, per plane.
fn resample_planes(data: &[f64], planes: usize, h: usize, w: usize, th: usize, tw: usize) -> Vec<f64> {
    if (h, w) == (th, tw) {
        return data.to_vec();
    }
    let axis = |dst: usize, src_len: usize, dst_len: usize| {
        let pos = ((dst as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5).max(0.0);
        let i0 = (pos.floor() as usize).min(src_len - 1);
        let i1 = (i0 + 1).min(src_len - 1);
        (i0, i1, pos - i0 as f64)
    };
    let rows: Vec<_> = (0..th).map(|y| axis(y, h, th)).collect();
    let cols: Vec<_> = (0..tw).map(|x| axis(x, w, tw)).collect();
    let mut out = Vec::with_capacity(planes * th * tw);
    for p in 0..planes {
        let src = &data[p * h * w..(p + 1) * h * w];
        for &(y0, y1, fy) in &rows {
            for &(x0, x1, fx) in &cols {
                let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    out
}

pub fn resize_image(image: &Image, target_h: usize, target_w: usize) -> Result<Image> {
    if target_h == 0 || target_w == 0 {
        return Err(config_err!("resize target {target_h}x{target_w} must be positive"));
    }
    let data = resample_planes(&image.data, image.channels, image.height, image.width, target_h, target_w);
    Image::new_clamped(target_h, target_w, image.channels, data, image.range)
}

pub fn resize_mask(mask: &Mask, target_h: usize, target_w: usize) -> Result<Mask> {
    if target_h == 0 || target_w == 0 {
        return Err(config_err!("resize target {target_h}x{target_w} must be positive"));
    }
    let data = resample_planes(&mask.data, 1, mask.height, mask.width, target_h, target_w);
    Mask::new(target_h, target_w, data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect())
}

/// Stack same-sized images into an `[N, C, H, W]` tensor.
pub fn images_to_tensor(images: &[Image]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| shape_err!("empty image batch"))?;
    let dims = (first.height, first.width, first.channels);
    let mut data = Vec::with_capacity(images.len() * first.data.len());
    for img in images {
        if (img.height, img.width, img.channels) != dims {
            return Err(shape_err!("batch mixes image dims {:?} and {:?}", dims, (img.height, img.width, img.channels)));
        }
        data.extend_from_slice(&img.data);
    }
    Ok(Tensor::new(vec![images.len(), dims.2, dims.0, dims.1], data))
}

/// Stack same-sized masks into an `[N, 1, H, W]` tensor.
pub fn masks_to_tensor(masks: &[Mask]) -> Result<Tensor> {
    let first = masks.first().ok_or_else(|| shape_err!("empty mask batch"))?;
    let mut data = Vec::with_capacity(masks.len() * first.data.len());
    for m in masks {
        if (m.height, m.width) != (first.height, first.width) {
            return Err(shape_err!("batch mixes mask dims"));
        }
        data.extend_from_slice(&m.data);
    }
    Ok(Tensor::new(vec![masks.len(), 1, first.height, first.width], data))
}

pub fn tensor_to_images(t: &Tensor, range: ValueRange) -> Result<Vec<Image>> {
    (0..t.dims4().0).map(|n| Image::from_tensor(t, n, range)).collect()
}

pub fn tensor_to_masks(t: &Tensor) -> Result<Vec<Mask>> {
    (0..t.dims4().0).map(|n| Mask::from_tensor(t, n)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rgb(h: usize, w: usize, f: impl Fn(usize) -> f64, range: ValueRange) -> Image {
        Image::new(h, w, 3, (0..3 * h * w).map(f).collect(), range).unwrap()
    }

    #[test]
    fn identity_and_zero_masks() {
        let img = rgb(4, 5, |i| ((i as f64) * 0.37).sin(), ValueRange::Symmetric);
        assert_eq!(apply_mask(&img, &Mask::ones(4, 5)).unwrap(), img);
        let zeroed = apply_mask(&img, &Mask::zeros(4, 5)).unwrap();
        assert!(zeroed.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn half_mask_scales_each_channel() {
        let img = Image::new(1, 1, 3, vec![0.8, 0.4, 0.2], ValueRange::Unit).unwrap();
        let out = apply_mask(&img, &Mask::filled(1, 1, 0.5).unwrap()).unwrap();
        assert_eq!(out.data(), &[0.4, 0.2, 0.1]);
        assert_eq!(out.range(), ValueRange::Unit);
    }

    #[test]
    fn mask_dim_mismatch_is_shape_error() {
        let img = rgb(4, 4, |_| 0.0, ValueRange::Unit);
        assert!(matches!(apply_mask(&img, &Mask::ones(4, 3)), Err(Error::Shape(_))));
    }

    #[test]
    fn binarize_thresholds_inclusively() {
        let m = Mask::new(1, 3, vec![0.49, 0.50, 0.51]).unwrap();
        assert_eq!(binarize_mask(&m, 0.5).unwrap().data(), &[0.0, 1.0, 1.0]);
        let hi = binarize_mask(&Mask::filled(2, 2, 0.7).unwrap(), 0.5).unwrap();
        assert!(hi.data().iter().all(|v| *v == 1.0));
        let lo = binarize_mask(&Mask::filled(2, 2, 0.3).unwrap(), 0.5).unwrap();
        assert!(lo.data().iter().all(|v| *v == 0.0));
        for t in [0.0, 1.0, -0.2, 1.5] {
            assert!(matches!(binarize_mask(&m, t), Err(Error::Config(_))));
        }
    }

    #[test]
    fn resize_halves_and_noops() {
        let big = rgb(512, 512, |i| (i % 255) as f64 / 255.0, ValueRange::Unit);
        let small = resize_image(&big, 256, 256).unwrap();
        assert_eq!((small.height(), small.width(), small.channels()), (256, 256, 3));
        let same = resize_image(&small, 256, 256).unwrap();
        assert_eq!(same, small);
        assert!(matches!(resize_image(&small, 0, 4), Err(Error::Config(_))));
    }

    #[test]
    fn two_to_one_downsample_averages_blocks() {
        let img = Image::new(2, 2, 1, vec![0.0, 1.0, 0.5, 0.5], ValueRange::Unit).unwrap();
        let out = resize_image(&img, 1, 1).unwrap();
        assert!((out.data()[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_pixels_are_rejected() {
        assert!(Image::new(1, 1, 1, vec![1.5], ValueRange::Unit).is_err());
        assert!(Image::new(1, 1, 1, vec![-0.5], ValueRange::Symmetric).is_ok());
        assert!(Image::new(1, 1, 1, vec![f64::NAN], ValueRange::Symmetric).is_err());
        assert!(Image::new(1, 1, 2, vec![0.0, 0.0], ValueRange::Unit).is_err());
        assert!(Mask::new(1, 1, vec![1.01]).is_err());
    }

    #[test]
    fn png_round_trip_is_exact_on_quantized_values() {
        let dir = tempfile::tempdir().unwrap();
        let img = rgb(3, 4, |i| (i * 7 % 256) as f64 / 255.0, ValueRange::Unit);
        let path = dir.path().join("x.png");
        img.save_png(&path).unwrap();
        assert_eq!(Image::load_png(&path, ValueRange::Unit).unwrap(), img);
        let m = Mask::new(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let mp = dir.path().join("m.png");
        m.save_png(&mp).unwrap();
        assert_eq!(Mask::load_png(&mp).unwrap(), m);
    }

    #[test]
    fn quantize_rounds_half_up() {
        assert_eq!(quantize(0.5 / 255.0), 1);
        assert_eq!(quantize(0.4999 / 255.0), 0);
        assert_eq!(quantize(1.0), 255);
        assert_eq!(quantize(0.0), 0);
    }

    fn arb_image() -> impl Strategy<Value = Image> {
        (1usize..6, 1usize..6).prop_flat_map(|(h, w)| {
            prop::collection::vec(-1.0f64..=1.0, 3 * h * w)
                .prop_map(move |d| Image::new(h, w, 3, d, ValueRange::Symmetric).unwrap())
        })
    }

    fn arb_mask(h: usize, w: usize) -> impl Strategy<Value = Mask> {
        prop::collection::vec(0.0f64..=1.0, h * w).prop_map(move |d| Mask::new(h, w, d).unwrap())
    }

    proptest! {
        #[test]
        fn masking_is_linear_in_the_image(
            (x, z, m) in arb_image().prop_flat_map(|x| {
                let (h, w) = (x.height(), x.width());
                (Just(x), prop::collection::vec(-1.0f64..=1.0, 3 * h * w), arb_mask(h, w))
            }),
            a in -0.5f64..=0.5,
            b in -0.5f64..=0.5,
        ) {
            let z = Image::new(x.height(), x.width(), 3, z, ValueRange::Symmetric).unwrap();
            let combo: Vec<f64> = x.data().iter().zip(z.data()).map(|(p, q)| a * p + b * q).collect();
            let combo = Image::new(x.height(), x.width(), 3, combo, ValueRange::Symmetric).unwrap();
            let lhs = apply_mask(&combo, &m).unwrap();
            let mx = apply_mask(&x, &m).unwrap();
            let mz = apply_mask(&z, &m).unwrap();
            for (i, v) in lhs.data().iter().enumerate() {
                prop_assert!((v - (a * mx.data()[i] + b * mz.data()[i])).abs() < 1e-12);
            }
        }

        #[test]
        fn mask_composition_equals_sequential_masking(
            (x, m1, m2) in arb_image().prop_flat_map(|x| {
                let (h, w) = (x.height(), x.width());
                (Just(x), arb_mask(h, w), arb_mask(h, w))
            })
        ) {
            let once = apply_mask(&x, &m1.compose(&m2).unwrap()).unwrap();
            let twice = apply_mask(&apply_mask(&x, &m1).unwrap(), &m2).unwrap();
            for (a, b) in once.data().iter().zip(twice.data()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            prop_assert!(once.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }

        #[test]
        fn binarize_is_idempotent(m in arb_mask(3, 4), t in 0.01f64..0.99) {
            let once = binarize_mask(&m, t).unwrap();
            prop_assert_eq!(binarize_mask(&once, t).unwrap(), once);
        }

        #[test]
        fn resizing_a_constant_keeps_it_constant(v in 0.0f64..=1.0, h in 1usize..20, w in 1usize..20, th in 1usize..40, tw in 1usize..40) {
            let img = Image::filled(h, w, 3, v, ValueRange::Unit).unwrap();
            let out = resize_image(&img, th, tw).unwrap();
            prop_assert_eq!((out.height(), out.width()), (th, tw));
            prop_assert!(out.data().iter().all(|x| (x - v).abs() <= 1e-6));
        }
    }
}
