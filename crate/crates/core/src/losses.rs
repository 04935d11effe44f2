//! Training objectives.
//!
//! Each loss exists as a graph builder (in [`graph`]) used by the training
//! engine, and as a value-level function that evaluates the same graph on
//! constants. Both directions are expressed as minimization targets:
//!
//! * discriminator: `-(mean log D(real) + mean log(1 - D(fake)))`
//! * generator (non-saturating): `-mean log D(fake)`
//! * cycle / identity: sums of per-direction mean absolute errors
//! * full objective: `adv_G + adv_F + λ·cycle + 0.5·λ·identity`
//!
//! Expectations are means over the batch and over every patch score.

use serde::{Deserialize, Serialize};
use smcyclegan_autograd::{Tape, Tensor};

use crate::error::{shape_err, Error, Result};
use crate::image::{apply_mask, images_to_tensor, Image, Mask};
use crate::networks::Discriminator;

/// Clamp applied inside every logarithm.
pub const LOG_EPS: f64 = 1e-7;

/// Which adversarial objective family to use.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdversarialMode {
    /// Log-likelihood form over sigmoid scores.
    #[default]
    Log,
    /// Least-squares form over raw scores.
    LeastSquares,
}

/// Generator adversarial term in log mode.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorObjective {
    /// `-log D(G(x))`
    #[default]
    NonSaturating,
    /// `log(1 - D(G(x)))`
    Minimax,
}

/// Named loss components of one generator update.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub adv_g: f64,
    pub adv_f: f64,
    pub cycle: f64,
    pub identity: f64,
    pub lambda: f64,
    pub total: f64,
}

pub mod graph {
    //! Loss graph builders over tape variables.

    use smcyclegan_autograd::{Tape, Var};

    use super::{AdversarialMode, GeneratorObjective, LOG_EPS};

    /// Discriminator minimization target for a real and a fake score map.
    pub fn discriminator_loss(tape: &mut Tape, real: Var, fake: Var, mode: AdversarialMode) -> Var {
        match mode {
            AdversarialMode::Log => {
                let lr = tape.log_clamp(real, LOG_EPS, 1.0 - LOG_EPS);
                let mr = tape.mean(lr);
                let one_minus = tape.affine(fake, -1.0, 1.0);
                let lf = tape.log_clamp(one_minus, LOG_EPS, 1.0 - LOG_EPS);
                let mf = tape.mean(lf);
                let s = tape.add(mr, mf);
                tape.scale(s, -1.0)
            }
            AdversarialMode::LeastSquares => {
                let dr = tape.affine(real, 1.0, -1.0);
                let sr = tape.mul(dr, dr);
                let mr = tape.mean(sr);
                let sf = tape.mul(fake, fake);
                let mf = tape.mean(sf);
                tape.add(mr, mf)
            }
        }
    }

    /// Generator minimization target for the scores of its fakes.
    pub fn generator_loss(tape: &mut Tape, fake: Var, mode: AdversarialMode, objective: GeneratorObjective) -> Var {
        match (mode, objective) {
            (AdversarialMode::Log, GeneratorObjective::NonSaturating) => {
                let l = tape.log_clamp(fake, LOG_EPS, 1.0 - LOG_EPS);
                let m = tape.mean(l);
                tape.scale(m, -1.0)
            }
            (AdversarialMode::Log, GeneratorObjective::Minimax) => {
                let one_minus = tape.affine(fake, -1.0, 1.0);
                let l = tape.log_clamp(one_minus, LOG_EPS, 1.0 - LOG_EPS);
                tape.mean(l)
            }
            (AdversarialMode::LeastSquares, _) => {
                let d = tape.affine(fake, 1.0, -1.0);
                let s = tape.mul(d, d);
                tape.mean(s)
            }
        }
    }

    /// Mean absolute difference.
    pub fn l1(tape: &mut Tape, a: Var, b: Var) -> Var {
        let d = tape.sub(a, b);
        let ad = tape.abs(d);
        tape.mean(ad)
    }

    /// Sum of two mean absolute differences, one per translation direction.
    pub fn paired_l1(tape: &mut Tape, a: Var, a_hat: Var, b: Var, b_hat: Var) -> Var {
        let la = l1(tape, a_hat, a);
        let lb = l1(tape, b_hat, b);
        tape.add(la, lb)
    }

    /// `adv_g + adv_f + λ·cycle + 0.5·λ·identity`.
    pub fn full_objective(tape: &mut Tape, adv_g: Var, adv_f: Var, cycle: Var, identity: Var, lambda: f64) -> Var {
        let adv = tape.add(adv_g, adv_f);
        let c = tape.scale(cycle, lambda);
        let i = tape.scale(identity, 0.5 * lambda);
        let s = tape.add(adv, c);
        tape.add(s, i)
    }
}

fn check_scores(t: &Tensor, what: &str) -> Result<()> {
    if t.numel() == 0 {
        return Err(shape_err!("empty {what} score map"));
    }
    if !t.is_finite() {
        return Err(Error::Numeric(format!("non-finite {what} score")));
    }
    Ok(())
}

/// `-(mean log real + mean log(1 - fake))`, the discriminator's target.
pub fn adversarial_loss_d(real_scores: &Tensor, fake_scores: &Tensor) -> Result<f64> {
    check_scores(real_scores, "real")?;
    check_scores(fake_scores, "fake")?;
    let mut tape = Tape::new();
    let r = tape.constant(real_scores.clone());
    let f = tape.constant(fake_scores.clone());
    let l = graph::discriminator_loss(&mut tape, r, f, AdversarialMode::Log);
    Ok(tape.value(l).item())
}

/// `-mean log fake`, the non-saturating generator target.
pub fn adversarial_loss_g(fake_scores: &Tensor) -> Result<f64> {
    check_scores(fake_scores, "fake")?;
    let mut tape = Tape::new();
    let f = tape.constant(fake_scores.clone());
    let l = graph::generator_loss(&mut tape, f, AdversarialMode::Log, GeneratorObjective::NonSaturating);
    Ok(tape.value(l).item())
}

/// Discriminator loss on masked real and masked fake images.
pub fn masked_adversarial_loss_d(
    d: &Discriminator,
    real: &Image,
    real_mask: &Mask,
    fake: &Image,
    fake_mask: &Mask,
) -> Result<f64> {
    let real_masked = apply_mask(real, real_mask)?;
    let fake_masked = apply_mask(fake, fake_mask)?;
    adversarial_loss_d(&d.discriminate(&real_masked)?, &d.discriminate(&fake_masked)?)
}

/// Generator loss on a masked fake image.
pub fn masked_adversarial_loss_g(d: &Discriminator, fake: &Image, fake_mask: &Mask) -> Result<f64> {
    adversarial_loss_g(&d.discriminate(&apply_mask(fake, fake_mask)?)?)
}

fn paired_l1_value(a: &Image, a_hat: &Image, b: &Image, b_hat: &Image) -> Result<f64> {
    for (p, q) in [(a, a_hat), (b, b_hat)] {
        if (p.height(), p.width(), p.channels()) != (q.height(), q.width(), q.channels()) {
            return Err(shape_err!(
                "paired images differ: {}x{}x{} vs {}x{}x{}",
                p.height(),
                p.width(),
                p.channels(),
                q.height(),
                q.width(),
                q.channels()
            ));
        }
    }
    let mut tape = Tape::new();
    let vars: Vec<_> = [a, a_hat, b, b_hat]
        .into_iter()
        .map(|img| images_to_tensor(std::slice::from_ref(img)).map(|t| tape.constant(t)))
        .collect::<Result<_>>()?;
    let l = graph::paired_l1(&mut tape, vars[0], vars[1], vars[2], vars[3]);
    Ok(tape.value(l).item())
}

/// `mean|x_rec - x| + mean|y_rec - y|`.
pub fn cycle_consistency_loss(x: &Image, x_reconstructed: &Image, y: &Image, y_reconstructed: &Image) -> Result<f64> {
    paired_l1_value(x, x_reconstructed, y, y_reconstructed)
}

/// `mean|G(y) - y| + mean|F(x) - x|`.
pub fn identity_loss(y: &Image, g_of_y: &Image, x: &Image, f_of_x: &Image) -> Result<f64> {
    paired_l1_value(y, g_of_y, x, f_of_x)
}

/// Combine components into a [`LossBundle`].
pub fn full_objective(adv_g: f64, adv_f: f64, cycle: f64, identity: f64, lambda: f64) -> Result<LossBundle> {
    for (name, v) in [("adv_G", adv_g), ("adv_F", adv_f), ("cycle", cycle), ("identity", identity), ("lambda", lambda)] {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("{name} is {v}")));
        }
    }
    if lambda < 0.0 {
        return Err(Error::Config(format!("lambda {lambda} must be non-negative")));
    }
    let mut tape = Tape::new();
    let [g, f, c, i] = [adv_g, adv_f, cycle, identity].map(|v| tape.constant(Tensor::scalar(v)));
    let total = graph::full_objective(&mut tape, g, f, c, i, lambda);
    Ok(LossBundle { adv_g, adv_f, cycle, identity, lambda, total: tape.value(total).item() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::ValueRange;
    use crate::networks::DiscriminatorArch;
    use crate::rng::stream_rng;
    use rand::Rng;

    fn map(h: usize, w: usize, v: f64) -> Tensor {
        Tensor::full(&[1, 1, h, w], v)
    }

    fn random_map(h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = stream_rng(seed, 0);
        Tensor::new(vec![1, 1, h, w], (0..h * w).map(|_| rng.random_range(0.01..0.99)).collect())
    }

    fn random_image(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = stream_rng(seed, 1);
        Image::new(h, w, 3, (0..3 * h * w).map(|_| rng.random_range(-1.0..=1.0)).collect(), ValueRange::Symmetric).unwrap()
    }

    #[test]
    fn half_scores_give_log_two() {
        let ln2 = std::f64::consts::LN_2;
        assert!((adversarial_loss_d(&map(3, 3, 0.5), &map(2, 2, 0.5)).unwrap() - 2.0 * ln2).abs() < 1e-6);
        assert!((adversarial_loss_g(&map(4, 4, 0.5)).unwrap() - ln2).abs() < 1e-6);
    }

    #[test]
    fn perfect_discriminator_and_perfect_fool_limits() {
        let l = adversarial_loss_d(&map(2, 2, 1.0 - 1e-7), &map(2, 2, 1e-7)).unwrap();
        assert!((0.0..1e-6).contains(&l));
        assert!(adversarial_loss_g(&map(2, 2, 1.0 - 1e-7)).unwrap() < 1e-6);
    }

    #[test]
    fn empty_score_map_is_shape_error() {
        let empty = Tensor::zeros(&[1, 1, 0, 0]);
        assert!(matches!(adversarial_loss_g(&empty), Err(Error::Shape(_))));
        assert!(matches!(adversarial_loss_d(&map(1, 1, 0.5), &empty), Err(Error::Shape(_))));
    }

    #[test]
    fn loop_oracles_for_adversarial_losses() {
        let real = random_map(3, 3, 1);
        let fake = random_map(3, 3, 2);
        let mean = |t: &Tensor, f: &dyn Fn(f64) -> f64| {
            let mut s = 0.0;
            for v in t.data() {
                s += f(*v);
            }
            s / t.numel() as f64
        };
        let want_d = -(mean(&real, &|p| p.ln()) + mean(&fake, &|p| (1.0 - p).ln()));
        assert!((adversarial_loss_d(&real, &fake).unwrap() - want_d).abs() < 1e-9);
        let g = random_map(4, 4, 3);
        let want_g = -mean(&g, &|p| p.ln());
        assert!((adversarial_loss_g(&g).unwrap() - want_g).abs() < 1e-9);
    }

    #[test]
    fn masked_losses_reduce_to_vanilla_under_identity_masks() {
        let d = Discriminator::new(DiscriminatorArch::toy(), &mut stream_rng(4, 0));
        let (real, fake) = (random_image(32, 32, 5), random_image(32, 32, 6));
        let ones = Mask::ones(32, 32);
        let vanilla_d = adversarial_loss_d(&d.discriminate(&real).unwrap(), &d.discriminate(&fake).unwrap()).unwrap();
        let masked_d = masked_adversarial_loss_d(&d, &real, &ones, &fake, &ones).unwrap();
        assert!((vanilla_d - masked_d).abs() <= 1e-9);
        let vanilla_g = adversarial_loss_g(&d.discriminate(&fake).unwrap()).unwrap();
        assert!((vanilla_g - masked_adversarial_loss_g(&d, &fake, &ones).unwrap()).abs() <= 1e-9);
    }

    #[test]
    fn zero_masks_score_blank_images() {
        let d = Discriminator::new(DiscriminatorArch::toy(), &mut stream_rng(7, 0));
        let (real, fake) = (random_image(32, 32, 8), random_image(32, 32, 9));
        let zeros = Mask::zeros(32, 32);
        let blank = Image::filled(32, 32, 3, 0.0, ValueRange::Symmetric).unwrap();
        let blank_scores = d.discriminate(&blank).unwrap();
        let want_d = adversarial_loss_d(&blank_scores, &blank_scores).unwrap();
        let got_d = masked_adversarial_loss_d(&d, &real, &zeros, &fake, &zeros).unwrap();
        assert!(got_d.is_finite());
        assert_eq!(got_d, want_d);
        assert_eq!(masked_adversarial_loss_g(&d, &fake, &zeros).unwrap(), adversarial_loss_g(&blank_scores).unwrap());
    }

    #[test]
    fn compositional_oracle_with_random_masks() {
        let d = Discriminator::new(DiscriminatorArch::toy(), &mut stream_rng(10, 0));
        let (real, fake) = (random_image(32, 32, 11), random_image(32, 32, 12));
        let mut rng = stream_rng(13, 0);
        let mut rand_mask = || Mask::new(32, 32, (0..1024).map(|_| rng.random_range(0.0..=1.0)).collect()).unwrap();
        let (mr, mf) = (rand_mask(), rand_mask());
        let rs = d.discriminate(&apply_mask(&real, &mr).unwrap()).unwrap();
        let fs = d.discriminate(&apply_mask(&fake, &mf).unwrap()).unwrap();
        let want = adversarial_loss_d(&rs, &fs).unwrap();
        assert!((masked_adversarial_loss_d(&d, &real, &mr, &fake, &mf).unwrap() - want).abs() <= 1e-9);
        let want_g = adversarial_loss_g(&fs).unwrap();
        assert!((masked_adversarial_loss_g(&d, &fake, &mf).unwrap() - want_g).abs() <= 1e-9);
    }

    #[test]
    fn cycle_and_identity_losses() {
        let x = random_image(4, 4, 14);
        let y = random_image(4, 4, 15);
        assert_eq!(cycle_consistency_loss(&x, &x, &y, &y).unwrap(), 0.0);
        assert_eq!(identity_loss(&y, &y, &x, &x).unwrap(), 0.0);

        let shift = |img: &Image, d: f64| {
            let data = img.data().iter().map(|v| (v * 0.5) + d).collect();
            Image::new(4, 4, 3, data, ValueRange::Symmetric).unwrap()
        };
        let (xs, ys) = (shift(&x, 0.0), shift(&y, 0.0));
        let c = cycle_consistency_loss(&xs, &shift(&x, 0.1), &ys, &shift(&y, 0.1)).unwrap();
        assert!((c - 0.2).abs() < 1e-9);
        let i = identity_loss(&ys, &shift(&y, -0.05), &xs, &shift(&x, 0.05)).unwrap();
        assert!((i - 0.1).abs() < 1e-9);

        let oracle = |a: &Image, b: &Image| {
            let mut s = 0.0;
            for h in 0..4 {
                for w in 0..4 {
                    for ch in 0..3 {
                        s += (a.get(h, w, ch) - b.get(h, w, ch)).abs();
                    }
                }
            }
            s / 48.0
        };
        let (xr, yr) = (random_image(4, 4, 16), random_image(4, 4, 17));
        let want = oracle(&xr, &x) + oracle(&yr, &y);
        assert!((cycle_consistency_loss(&x, &xr, &y, &yr).unwrap() - want).abs() < 1e-9);
        assert!((identity_loss(&x, &xr, &y, &yr).unwrap() - want).abs() < 1e-9);

        let small = random_image(8, 4, 18);
        assert!(matches!(cycle_consistency_loss(&x, &small, &y, &y), Err(Error::Shape(_))));
    }

    #[test]
    fn full_objective_arithmetic() {
        let b = full_objective(1.0, 2.0, 0.5, 0.2, 10.0).unwrap();
        assert_eq!(b.total, 9.0);
        assert_eq!(full_objective(0.0, 0.0, 0.0, 0.0, 3.7).unwrap().total, 0.0);
        assert_eq!(full_objective(1.25, 0.5, 7.0, 9.0, 0.0).unwrap().total, 1.75);
        assert!(matches!(full_objective(f64::NAN, 0.0, 0.0, 0.0, 1.0), Err(Error::Numeric(_))));
        assert!(full_objective(0.0, 0.0, 0.0, 0.0, -1.0).is_err());
    }

    proptest::proptest! {
        #[test]
        fn full_objective_is_linear_in_each_component(
            base in proptest::array::uniform4(0.0f64..5.0),
            delta in 0.01f64..2.0,
            lambda in 0.0f64..20.0,
            which in 0usize..4,
        ) {
            let t0 = full_objective(base[0], base[1], base[2], base[3], lambda).unwrap().total;
            let mut bumped = base;
            bumped[which] += delta;
            let t1 = full_objective(bumped[0], bumped[1], bumped[2], bumped[3], lambda).unwrap().total;
            let coeff = [1.0, 1.0, lambda, 0.5 * lambda][which];
            proptest::prop_assert!(((t1 - t0) - coeff * delta).abs() < 1e-9);
        }

        #[test]
        fn adversarial_losses_are_non_negative(seed in 0u64..500) {
            let (r, f) = (random_map(3, 3, seed), random_map(2, 5, seed + 1000));
            proptest::prop_assert!(adversarial_loss_d(&r, &f).unwrap() >= 0.0);
            proptest::prop_assert!(adversarial_loss_g(&f).unwrap() >= 0.0);
        }
    }
}
