//! Dataset ingestion, unpaired batch sampling and the synthetic toy domains.
//!
//! On-disk layout: `<root>/domain_a/*.png` (X), `<root>/domain_b/*.png` (Y)
//! and optional filename-matched masks under `masks_a/` and `masks_b/`.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, data_err, Error, Result};
use crate::image::{resize_image, resize_mask, DomainTag, Image, Mask, ValueRange};
use crate::rng::{stream_rng, streams};

/// Images of one domain, decoded to the symmetric range at a fixed size.
#[derive(Clone, Debug)]
pub struct ImageDataset {
    pub root: PathBuf,
    pub domain: DomainTag,
    /// File names in lexicographic order.
    pub names: Vec<String>,
    pub images: Vec<Image>,
    /// Masks aligned with `images`, when requested.
    pub masks: Option<Vec<Mask>>,
    /// Files that were present but could not be decoded.
    pub skipped: Vec<String>,
}

impl ImageDataset {
    /// Dataset built from in-memory images.
    pub fn from_images(domain: DomainTag, images: Vec<Image>, masks: Option<Vec<Mask>>) -> Result<Self> {
        if images.is_empty() {
            return Err(data_err!("{domain:?} dataset is empty"));
        }
        if masks.as_ref().is_some_and(|m| m.len() != images.len()) {
            return Err(data_err!("{domain:?}: mask count differs from image count"));
        }
        let names = (0..images.len()).map(|i| format!("{i:04}.png")).collect();
        Ok(Self { root: PathBuf::new(), domain, names, images, masks, skipped: Vec::new() })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

fn sorted_files(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.is_file() {
            files.push((entry.file_name().to_string_lossy().into_owned(), path));
        }
    }
    files.sort();
    Ok(files)
}

/// Decode every file in `dir` as an image, in lexicographic order.
///
/// Returns `(names, images, skipped)`; undecodable files are skipped with a
/// warning. A directory without any readable image is a data error.
pub fn load_image_dir(dir: &Path, range: ValueRange) -> Result<(Vec<String>, Vec<Image>, Vec<String>)> {
    let mut names = Vec::new();
    let mut images = Vec::new();
    let mut skipped = Vec::new();
    for (name, path) in sorted_files(dir)? {
        match Image::load_png(&path, range) {
            Ok(img) => {
                names.push(name);
                images.push(img);
            }
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                skipped.push(name);
            }
        }
    }
    if images.is_empty() {
        return Err(data_err!("no readable images in {}", dir.display()));
    }
    Ok((names, images, skipped))
}

/// Decode every image under `root/<domain dir>`, resized to `size × size`.
///
/// Undecodable files are skipped with a warning and listed in `skipped`.
pub fn load_dataset(root: &Path, domain: DomainTag, size: usize, with_masks: bool) -> Result<ImageDataset> {
    if size == 0 {
        return Err(config_err!("target size must be positive"));
    }
    let dir = root.join(domain.image_dir());
    let (names, images, skipped) = load_image_dir(&dir, ValueRange::Symmetric)?;
    let images = images
        .into_iter()
        .map(|img| if (img.height(), img.width()) == (size, size) { Ok(img) } else { resize_image(&img, size, size) })
        .collect::<Result<Vec<_>>>()?;
    let masks = if with_masks {
        let mask_dir = root.join(domain.mask_dir());
        let mut masks = Vec::with_capacity(names.len());
        for name in &names {
            let path = mask_dir.join(name);
            if !path.is_file() {
                return Err(data_err!("missing mask for {name} (expected {})", path.display()));
            }
            let m = Mask::load_png(&path)?;
            masks.push(if (m.height(), m.width()) == (size, size) { m } else { resize_mask(&m, size, size)? });
        }
        Some(masks)
    } else {
        None
    };
    Ok(ImageDataset { root: root.to_path_buf(), domain, names, images, masks, skipped })
}

/// `batch_size` uniform indices into `0..len`, without replacement when possible.
pub fn sample_indices(len: usize, batch_size: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if batch_size < 1 {
        return Err(config_err!("batch_size must be at least 1"));
    }
    if len == 0 {
        return Err(data_err!("cannot sample from an empty dataset"));
    }
    if len >= batch_size {
        Ok(index::sample(rng, len, batch_size).into_vec())
    } else {
        log::warn!("dataset of {len} is smaller than batch size {batch_size}; sampling with replacement");
        Ok((0..batch_size).map(|_| rng.random_range(0..len)).collect())
    }
}

/// One side of an unpaired batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub images: Vec<Image>,
    pub masks: Option<Vec<Mask>>,
}

impl Batch {
    fn gather(ds: &ImageDataset, indices: Vec<usize>) -> Self {
        let images = indices.iter().map(|&i| ds.images[i].clone()).collect();
        let masks = ds.masks.as_ref().map(|m| indices.iter().map(|&i| m[i].clone()).collect());
        Self { indices, images, masks }
    }
}

/// Independent batches from the two domains; x and y indices share no pairing.
pub fn sample_unpaired_batch(
    ds_x: &ImageDataset,
    ds_y: &ImageDataset,
    batch_size: usize,
    rng: &mut impl Rng,
) -> Result<(Batch, Batch)> {
    let xi = sample_indices(ds_x.len(), batch_size, rng)?;
    let yi = sample_indices(ds_y.len(), batch_size, rng)?;
    Ok((Batch::gather(ds_x, xi), Batch::gather(ds_y, yi)))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToyShape {
    #[default]
    Disk,
    Square,
}

/// Colour distributions of one toy domain, in unit range.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyStyle {
    /// Per-image subject colour: mean and std per channel.
    pub subject_mean: [f64; 3],
    pub subject_std: [f64; 3],
    /// Per-image background base colour.
    pub background_mean: [f64; 3],
    pub background_std: [f64; 3],
    /// Std of the per-pixel background texture noise.
    pub noise_scale: f64,
}

impl ToyStyle {
    pub fn art() -> Self {
        Self {
            subject_mean: [0.8, 0.2, 0.2],
            subject_std: [0.05; 3],
            background_mean: [0.85, 0.8, 0.6],
            background_std: [0.04; 3],
            noise_scale: 0.08,
        }
    }

    pub fn real() -> Self {
        Self {
            subject_mean: [0.2, 0.2, 0.8],
            subject_std: [0.05; 3],
            background_mean: [0.35, 0.45, 0.35],
            background_std: [0.04; 3],
            noise_scale: 0.03,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToySpec {
    pub image_size: usize,
    pub shape: ToyShape,
    pub count: usize,
    pub seed: u64,
    /// Subject radius (disk) or half-side (square) as a fraction of the image size.
    pub min_radius: f64,
    pub max_radius: f64,
    pub art: ToyStyle,
    pub real: ToyStyle,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            image_size: 32,
            shape: ToyShape::Disk,
            count: 200,
            seed: 7,
            min_radius: 0.2,
            max_radius: 0.35,
            art: ToyStyle::art(),
            real: ToyStyle::real(),
        }
    }
}

impl ToySpec {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(config_err!("toy count must be positive"));
        }
        if self.image_size < 8 {
            return Err(config_err!("toy image_size must be at least 8"));
        }
        if !(0.0 < self.min_radius && self.min_radius <= self.max_radius && self.max_radius <= 0.5) {
            return Err(config_err!("toy radii must satisfy 0 < min_radius <= max_radius <= 0.5"));
        }
        for style in [&self.art, &self.real] {
            let stds = style.subject_std.iter().chain(&style.background_std).chain([&style.noise_scale]);
            if stds.into_iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
                return Err(config_err!("toy standard deviations must be finite and non-negative"));
            }
            if style.subject_mean.iter().chain(&style.background_mean).any(|m| !(0.0..=1.0).contains(m)) {
                return Err(config_err!("toy colour means must lie in [0, 1]"));
            }
        }
        if self.art == self.real {
            return Err(config_err!("toy domains must differ in style"));
        }
        Ok(())
    }
}

/// Placement of one rendered subject, in pixel units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SubjectGeometry {
    pub center_row: f64,
    pub center_col: f64,
    pub radius: f64,
}

impl SubjectGeometry {
    /// Whether the centre of pixel `(row, col)` is inside the subject.
    pub fn covers(&self, shape: ToyShape, row: usize, col: usize) -> bool {
        let dy = row as f64 + 0.5 - self.center_row;
        let dx = col as f64 + 0.5 - self.center_col;
        match shape {
            ToyShape::Disk => dx * dx + dy * dy <= self.radius * self.radius,
            ToyShape::Square => dx.abs() <= self.radius && dy.abs() <= self.radius,
        }
    }
}

/// Both generated domains with ground-truth masks and subject geometry.
#[derive(Clone, Debug)]
pub struct ToyDomains {
    pub x: ImageDataset,
    pub y: ImageDataset,
    pub geometry_x: Vec<SubjectGeometry>,
    pub geometry_y: Vec<SubjectGeometry>,
}

fn normal(mean: f64, std: f64) -> Normal<f64> {
    Normal::new(mean, std).expect("validated std")
}

fn render(spec: &ToySpec, style: &ToyStyle, rng: &mut impl Rng) -> (Image, Mask, SubjectGeometry) {
    let s = spec.image_size;
    let size = s as f64;
    let radius = rng.random_range(spec.min_radius..=spec.max_radius) * size;
    let center_row = rng.random_range(radius..=size - radius);
    let center_col = rng.random_range(radius..=size - radius);
    let geom = SubjectGeometry { center_row, center_col, radius };
    let subject: [f64; 3] = std::array::from_fn(|c| normal(style.subject_mean[c], style.subject_std[c]).sample(rng));
    let background: [f64; 3] = std::array::from_fn(|c| normal(style.background_mean[c], style.background_std[c]).sample(rng));
    let noise = normal(0.0, style.noise_scale);

    let mut data = vec![0.0; 3 * s * s];
    let mut mask = vec![0.0; s * s];
    for row in 0..s {
        for col in 0..s {
            let inside = geom.covers(spec.shape, row, col);
            mask[row * s + col] = if inside { 1.0 } else { 0.0 };
            let texture = if inside { 0.0 } else { noise.sample(rng) };
            for c in 0..3 {
                let base = if inside { subject[c] } else { background[c] };
                data[(c * s + row) * s + col] = (base + texture).clamp(0.0, 1.0);
            }
        }
    }
    let image = Image::new(s, s, 3, data, ValueRange::Unit).expect("clamped values");
    (image, Mask::new(s, s, mask).expect("binary mask"), geom)
}

/// Render `spec.count` images per domain under `root` and load them back.
///
/// Each image is a textured background with one subject shape; the exact
/// binary subject masks are written alongside. Output depends only on `spec`.
pub fn generate_toy_domains(spec: &ToySpec, root: &Path) -> Result<ToyDomains> {
    spec.validate()?;
    let mut geometry = Vec::new();
    for (domain, style, stream) in
        [(DomainTag::Art, &spec.art, streams::TOY_ART), (DomainTag::Real, &spec.real, streams::TOY_REAL)]
    {
        let img_dir = root.join(domain.image_dir());
        let mask_dir = root.join(domain.mask_dir());
        for dir in [&img_dir, &mask_dir] {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut rng = stream_rng(spec.seed, stream);
        let mut geoms = Vec::with_capacity(spec.count);
        for i in 0..spec.count {
            let (image, mask, geom) = render(spec, style, &mut rng);
            let name = format!("{i:04}.png");
            image.save_png(&img_dir.join(&name))?;
            mask.save_png(&mask_dir.join(&name))?;
            geoms.push(geom);
        }
        geometry.push(geoms);
    }
    let geometry_y = geometry.pop().expect("two domains");
    let geometry_x = geometry.pop().expect("two domains");
    Ok(ToyDomains {
        x: load_dataset(root, DomainTag::Art, spec.image_size, true)?,
        y: load_dataset(root, DomainTag::Real, spec.image_size, true)?,
        geometry_x,
        geometry_y,
    })
}
