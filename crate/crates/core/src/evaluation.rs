//! Fréchet distance between Gaussian fits of embedded image sets.

use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};
use smcyclegan_autograd::{Tape, Tensor};

use crate::checkpoint::{check_shapes, Container, ModuleKind, Section};
use crate::data::load_image_dir;
use crate::error::{config_err, data_err, shape_err, Error, Result};
use crate::image::{resize_image, Image, ValueRange};
use crate::nn::normal_tensor;
use crate::rng::stream_rng;

/// Deterministic embedding of an image into a fixed-length feature vector.
pub trait FeatureExtractor {
    fn id(&self) -> String;

    /// Spatial size images are resized to before embedding, if any.
    fn input_size(&self) -> Option<(usize, usize)>;

    fn embed(&self, image: &Image) -> Result<Vec<f64>>;
}

/// Flattened unit-range pixel values.
#[derive(Clone, Copy, Debug, Default)]
pub struct RawPixels;

impl FeatureExtractor for RawPixels {
    fn id(&self) -> String {
        "raw-pixels".into()
    }

    fn input_size(&self) -> Option<(usize, usize)> {
        None
    }

    fn embed(&self, image: &Image) -> Result<Vec<f64>> {
        Ok(image.to_range(ValueRange::Unit).data().to_vec())
    }
}

/// Small convolutional embedding with frozen weights.
///
/// Three stride-2 3×3 convolutions with leaky ReLU, then the final feature
/// map is averaged over each image quadrant and over the whole map.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvEmbedding {
    meta: ConvEmbeddingMeta,
    params: Vec<Tensor>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConvEmbeddingMeta {
    id: String,
    input_size: usize,
    widths: Vec<usize>,
}

impl ConvEmbedding {
    pub const DEFAULT_SEED: u64 = 0x5EED;
    pub const INPUT_SIZE: usize = 32;

    fn shapes(widths: &[usize]) -> Vec<Vec<usize>> {
        let mut cin = 3;
        let mut shapes = Vec::new();
        for &w in widths {
            shapes.push(vec![w, cin, 3, 3]);
            shapes.push(vec![w]);
            cin = w;
        }
        shapes
    }

    /// Embedding with He-initialized weights drawn from `seed`.
    pub fn random(seed: u64) -> Self {
        let widths = vec![16, 24, 32];
        let mut rng = stream_rng(seed, 0);
        let params = Self::shapes(&widths)
            .iter()
            .map(|s| {
                if s.len() == 1 {
                    Tensor::new(s.clone(), (0..s[0]).map(|_| rng.random_range(-0.1..0.1)).collect())
                } else {
                    normal_tensor(s, (2.0 / (s[1] * 9) as f64).sqrt(), &mut rng)
                }
            })
            .collect();
        let id = if seed == Self::DEFAULT_SEED { "random-conv".to_string() } else { format!("random-conv:{seed}") };
        Self { meta: ConvEmbeddingMeta { id, input_size: Self::INPUT_SIZE, widths }, params }
    }

    pub fn dim(&self) -> usize {
        5 * self.meta.widths.last().copied().unwrap_or(0)
    }

    pub fn to_section(&self) -> Result<Section> {
        Section::new(ModuleKind::FeatureExtractor, &self.meta, self.params.clone())
    }

    pub fn from_section(section: &Section) -> Result<Self> {
        let meta: ConvEmbeddingMeta = section.meta()?;
        check_shapes(ModuleKind::FeatureExtractor, &section.tensors, &Self::shapes(&meta.widths))?;
        if meta.input_size < 1 << meta.widths.len() {
            return Err(Error::Checkpoint(format!("feature extractor input size {} too small", meta.input_size)));
        }
        Ok(Self { meta, params: section.tensors.clone() })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut e = Self::from_section(Container::load(path)?.section(ModuleKind::FeatureExtractor)?)?;
        e.meta.id = format!("checkpoint:{}", path.display());
        Ok(e)
    }
}

impl FeatureExtractor for ConvEmbedding {
    fn id(&self) -> String {
        self.meta.id.clone()
    }

    fn input_size(&self) -> Option<(usize, usize)> {
        Some((self.meta.input_size, self.meta.input_size))
    }

    fn embed(&self, image: &Image) -> Result<Vec<f64>> {
        let s = self.meta.input_size;
        if image.channels() != 3 {
            return Err(shape_err!("feature extractor expects RGB input"));
        }
        let img = if (image.height(), image.width()) == (s, s) { image.clone() } else { resize_image(image, s, s)? };
        let mut tape = Tape::new();
        let mut h = tape.constant(img.to_range(ValueRange::Symmetric).to_tensor());
        for pair in self.params.chunks(2) {
            let w = tape.constant(pair[0].clone());
            let b = tape.constant(pair[1].clone());
            h = tape.conv2d(h, w, Some(b), 2, 1);
            h = tape.leaky_relu(h, 0.2);
        }
        let out = tape.value(h);
        let (_, c, fh, fw) = out.dims4();
        let (hh, hw) = (fh.div_ceil(2), fw.div_ceil(2));
        let mut features = Vec::with_capacity(5 * c);
        for ch in 0..c {
            let plane = &out.data()[ch * fh * fw..(ch + 1) * fh * fw];
            let region_mean = |r0: usize, r1: usize, c0: usize, c1: usize| {
                let mut sum = 0.0;
                for r in r0..r1 {
                    sum += plane[r * fw + c0..r * fw + c1].iter().sum::<f64>();
                }
                sum / ((r1 - r0) * (c1 - c0)) as f64
            };
            features.push(region_mean(0, fh, 0, fw));
            features.push(region_mean(0, hh, 0, hw));
            features.push(region_mean(0, hh, fw - hw, fw));
            features.push(region_mean(fh - hh, fh, 0, hw));
            features.push(region_mean(fh - hh, fh, fw - hw, fw));
        }
        Ok(features)
    }
}

/// Resolve `raw-pixels`, `random-conv` or `checkpoint:<path>`.
pub fn extractor_from_id(id: &str) -> Result<Box<dyn FeatureExtractor>> {
    match id {
        "raw-pixels" => Ok(Box::new(RawPixels)),
        "random-conv" => Ok(Box::new(ConvEmbedding::random(ConvEmbedding::DEFAULT_SEED))),
        _ => match id.strip_prefix("checkpoint:") {
            Some(path) => Ok(Box::new(ConvEmbedding::load(Path::new(path))?)),
            None => Err(config_err!("unknown feature extractor {id:?}")),
        },
    }
}

/// Mean and unbiased covariance of a feature set.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStatistics {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub sample_count: usize,
}

impl FeatureStatistics {
    pub fn from_features(features: &[Vec<f64>]) -> Result<Self> {
        let n = features.len();
        if n < 2 {
            return Err(data_err!("feature statistics need at least 2 samples, got {n}"));
        }
        let d = features[0].len();
        if d == 0 || features.iter().any(|f| f.len() != d) {
            return Err(shape_err!("features must share a positive dimension"));
        }
        let x = DMatrix::from_fn(n, d, |i, j| features[i][j]);
        let mean = DVector::from_fn(d, |j, _| x.column(j).sum() / n as f64);
        let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
        let cov = centered.transpose() * &centered / (n - 1) as f64;
        let covariance = (&cov + cov.transpose()) * 0.5;
        Ok(Self { mean, covariance, sample_count: n })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Statistics of the embeddings of `images`.
pub fn feature_statistics(images: &[Image], extractor: &dyn FeatureExtractor) -> Result<FeatureStatistics> {
    if images.len() < 2 {
        return Err(data_err!("need at least 2 images, got {}", images.len()));
    }
    let features = images.iter().map(|img| extractor.embed(img)).collect::<Result<Vec<_>>>()?;
    FeatureStatistics::from_features(&features)
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `|μa − μb|² + Tr(Σa + Σb − 2(Σa Σb)^½)`, clamped at zero.
///
/// The trace of the square root is taken over the symmetric product
/// `Σa^½ Σb Σa^½`, which has the same spectrum as `Σa Σb`; negative
/// eigenvalues from round-off are clamped to zero.
pub fn frechet_distance(a: &FeatureStatistics, b: &FeatureStatistics) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(shape_err!("feature dimensions differ: {} vs {}", a.dim(), b.dim()));
    }
    let finite = |s: &FeatureStatistics| s.mean.iter().chain(s.covariance.iter()).all(|v| v.is_finite());
    if !finite(a) || !finite(b) {
        return Err(Error::Numeric("non-finite feature statistics".into()));
    }
    let diff = (&a.mean - &b.mean).norm_squared();
    let root_a = psd_sqrt(&a.covariance);
    let product = &root_a * &b.covariance * &root_a;
    let product = (&product + product.transpose()) * 0.5;
    let tr_sqrt: f64 = SymmetricEigen::new(product).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let value = diff + a.covariance.trace() + b.covariance.trace() - 2.0 * tr_sqrt;
    if !value.is_finite() {
        return Err(Error::Numeric("Fréchet distance is not finite".into()));
    }
    Ok(value.max(0.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidReport {
    pub fid: f64,
    pub generated_count: usize,
    pub reference_count: usize,
    pub extractor: String,
}

/// FID of two in-memory image sets.
pub fn fid(generated: &[Image], reference: &[Image], extractor: &dyn FeatureExtractor) -> Result<f64> {
    let prep = |images: &[Image]| -> Result<Vec<Image>> {
        match extractor.input_size() {
            Some((h, w)) => images.iter().map(|img| resize_image(img, h, w)).collect(),
            None => Ok(images.to_vec()),
        }
    };
    let a = feature_statistics(&prep(generated)?, extractor)?;
    let b = feature_statistics(&prep(reference)?, extractor)?;
    frechet_distance(&a, &b)
}

/// FID between the images in two directories.
pub fn evaluate_fid(generated_dir: &Path, reference_dir: &Path, extractor: &dyn FeatureExtractor) -> Result<FidReport> {
    let (_, generated, _) = load_image_dir(generated_dir, ValueRange::Unit)?;
    let (_, reference, _) = load_image_dir(reference_dir, ValueRange::Unit)?;
    log::info!("FID over {} generated and {} reference images", generated.len(), reference.len());
    Ok(FidReport {
        fid: fid(&generated, &reference, extractor)?,
        generated_count: generated.len(),
        reference_count: reference.len(),
        extractor: extractor.id(),
    })
}
