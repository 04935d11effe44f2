//! Statistical checks of sampling, toy data and feature statistics.

mod common;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use smcyclegan::data::{generate_toy_domains, sample_unpaired_batch, ImageDataset, ToySpec};
use smcyclegan::evaluation::{feature_statistics, frechet_distance, FeatureStatistics, RawPixels};
use smcyclegan::image::{DomainTag, Image, ValueRange};
use smcyclegan::rng::stream_rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use common::random_image;

fn tagged(domain: DomainTag, n: usize, seed: u64) -> ImageDataset {
    let mut rng = stream_rng(seed, 0);
    ImageDataset::from_images(domain, (0..n).map(|_| random_image(4, &mut rng)).collect(), None).unwrap()
}

#[test]
fn unpaired_draws_are_independent_and_uniform() {
    let (nx, ny) = (5, 7);
    let (dx, dy) = (tagged(DomainTag::Art, nx, 1), tagged(DomainTag::Real, ny, 2));
    let mut rng = stream_rng(3, 0);
    let draws = 10_000;
    let mut table = vec![vec![0.0; ny]; nx];
    for _ in 0..draws {
        let (bx, by) = sample_unpaired_batch(&dx, &dy, 1, &mut rng).unwrap();
        table[bx.indices[0]][by.indices[0]] += 1.0;
    }
    let rows: Vec<f64> = table.iter().map(|r| r.iter().sum()).collect();
    let cols: Vec<f64> = (0..ny).map(|j| table.iter().map(|r| r[j]).sum()).collect();
    let total = draws as f64;

    // Independence of the two draws.
    let mut stat = 0.0;
    for i in 0..nx {
        for j in 0..ny {
            let expected = rows[i] * cols[j] / total;
            stat += (table[i][j] - expected).powi(2) / expected;
        }
    }
    let dof = ((nx - 1) * (ny - 1)) as f64;
    let p = 1.0 - ChiSquared::new(dof).unwrap().cdf(stat);
    assert!(p > 0.01, "independence rejected: chi2 = {stat:.2}, p = {p:.4}");

    // Uniform marginals.
    for (counts, n) in [(&rows, nx), (&cols, ny)] {
        let expected = total / n as f64;
        let stat: f64 = counts.iter().map(|c| (c - expected).powi(2) / expected).sum();
        let p = 1.0 - ChiSquared::new((n - 1) as f64).unwrap().cdf(stat);
        assert!(p > 0.01, "uniformity rejected: chi2 = {stat:.2}, p = {p:.4}");
    }
}

#[test]
fn toy_colour_means_match_the_style() {
    let dir = tempfile::tempdir().unwrap();
    let spec = ToySpec { count: 1000, ..ToySpec::default() };
    let toy = generate_toy_domains(&spec, dir.path()).unwrap();
    for (ds, style) in [(&toy.x, &spec.art), (&toy.y, &spec.real)] {
        let masks = ds.masks.as_ref().unwrap();
        let n = ds.len() as f64;
        let mut subject = [0.0; 3];
        for (img, mask) in ds.images.iter().zip(masks) {
            let unit = img.to_range(ValueRange::Unit);
            let inside: Vec<(usize, usize)> =
                (0..32).flat_map(|r| (0..32).map(move |c| (r, c))).filter(|&(r, c)| mask.get(r, c) >= 0.5).collect();
            assert!(!inside.is_empty());
            for (c, s) in subject.iter_mut().enumerate() {
                *s += inside.iter().map(|&(r, col)| unit.get(r, col, c)).sum::<f64>() / inside.len() as f64 / n;
            }
        }
        for (c, got) in subject.iter().enumerate() {
            let se = style.subject_std[c] / n.sqrt();
            let want = style.subject_mean[c];
            assert!((got - want).abs() <= 3.0 * se, "channel {c}: mean {got:.4} vs {want:.4}, 3 SE = {:.4}", 3.0 * se);
        }
    }
}

#[test]
fn feature_statistics_match_a_scalar_oracle() {
    let mut rng = stream_rng(11, 0);
    let images: Vec<Image> = (0..100).map(|_| random_image(8, &mut rng)).collect();
    let stats = feature_statistics(&images, &RawPixels).unwrap();
    let feats: Vec<Vec<f64>> = images.iter().map(|img| img.data().iter().map(|v| (v + 1.0) / 2.0).collect()).collect();
    let (n, d) = (feats.len(), feats[0].len());
    assert_eq!(stats.dim(), d);
    assert_eq!(stats.sample_count, n);
    let mut mean = vec![0.0; d];
    for f in &feats {
        for (m, v) in mean.iter_mut().zip(f) {
            *m += v / n as f64;
        }
    }
    for (k, m) in mean.iter().enumerate() {
        assert!((stats.mean[k] - m).abs() <= 1e-9);
    }
    for i in 0..d {
        for j in 0..d {
            let mut cov = 0.0;
            for f in &feats {
                cov += (f[i] - mean[i]) * (f[j] - mean[j]);
            }
            cov /= (n - 1) as f64;
            assert!((stats.covariance[(i, j)] - cov).abs() <= 1e-9, "cov[{i},{j}]");
        }
    }
}

fn random_stats(d: usize, rng: &mut impl Rng) -> FeatureStatistics {
    let feats: Vec<Vec<f64>> = (0..3 * d).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    FeatureStatistics::from_features(&feats).unwrap()
}

#[test]
fn covariance_is_symmetric_positive_semidefinite() {
    let mut rng = stream_rng(12, 0);
    for d in [1, 3, 10] {
        let s = random_stats(d, &mut rng);
        assert_eq!(s.covariance, s.covariance.transpose());
        let eig = SymmetricEigen::new(s.covariance.clone());
        assert!(eig.eigenvalues.iter().all(|&v| v >= -1e-12), "{:?}", eig.eigenvalues);
    }
    // Fewer samples than dims still gives a PSD (rank-deficient) matrix.
    let feats: Vec<Vec<f64>> = (0..3).map(|_| (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let s = FeatureStatistics::from_features(&feats).unwrap();
    assert!(SymmetricEigen::new(s.covariance).eigenvalues.iter().all(|&v| v >= -1e-12));
}

#[test]
fn frechet_distance_is_symmetric_and_non_negative() {
    let mut rng = stream_rng(13, 0);
    for d in [1, 2, 5, 12] {
        for _ in 0..10 {
            let (a, b) = (random_stats(d, &mut rng), random_stats(d, &mut rng));
            let ab = frechet_distance(&a, &b).unwrap();
            let ba = frechet_distance(&b, &a).unwrap();
            assert!(ab >= 0.0);
            assert!((ab - ba).abs() <= 1e-8 * ab.max(1.0), "{ab} vs {ba}");
        }
    }
}

#[test]
fn frechet_distance_of_a_mean_shift_is_its_squared_norm() {
    let mut rng = stream_rng(14, 0);
    let a = random_stats(6, &mut rng);
    let shift = DVector::from_fn(6, |_, _| rng.random_range(-2.0..2.0));
    let b = FeatureStatistics { mean: &a.mean + &shift, covariance: a.covariance.clone(), sample_count: a.sample_count };
    let got = frechet_distance(&a, &b).unwrap();
    assert!((got - shift.norm_squared()).abs() <= 1e-8, "{got} vs {}", shift.norm_squared());

    let zero = FeatureStatistics { mean: DVector::zeros(2), covariance: DMatrix::zeros(2, 2), sample_count: 2 };
    assert_eq!(frechet_distance(&zero, &zero).unwrap(), 0.0);
}
