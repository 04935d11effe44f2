//! Parameter plumbing shared by the generator, discriminator and segmenter.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use smcyclegan_autograd::{Gradients, Tape, Tensor, Var};

use crate::error::{Error, Result};

/// A network whose parameters are a flat tensor list in a fixed order.
pub trait Network {
    fn params(&self) -> &[Tensor];
    fn params_mut(&mut self) -> &mut [Tensor];

    fn num_params(&self) -> usize {
        self.params().iter().map(Tensor::numel).sum()
    }

    /// Put every parameter on `tape`; `trainable` decides whether they collect gradients.
    fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params().iter().map(|p| if trainable { tape.variable(p.clone()) } else { tape.constant(p.clone()) }).collect()
    }

    fn all_finite(&self) -> bool {
        self.params().iter().all(Tensor::is_finite)
    }
}

/// Hands out bound parameters in order during a forward pass.
pub(crate) struct Cursor<'a> {
    vars: &'a [Var],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub fn new(vars: &'a [Var]) -> Self {
        Self { vars, pos: 0 }
    }

    pub fn next(&mut self) -> Var {
        let v = self.vars[self.pos];
        self.pos += 1;
        v
    }

    pub fn finish(self) {
        debug_assert_eq!(self.pos, self.vars.len(), "forward pass did not consume every parameter");
    }
}

pub(crate) fn normal_tensor(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    let dist = Normal::new(0.0, std).expect("valid std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect())
}

/// Gradients for `vars`, zero-filled where a parameter received none.
pub fn collect_grads(grads: &Gradients, vars: &[Var], params: &[Tensor]) -> Vec<Tensor> {
    vars.iter().zip(params).map(|(v, p)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape()))).collect()
}

pub(crate) fn ensure_finite(grads: &[Tensor], what: &str) -> Result<()> {
    if grads.iter().all(Tensor::is_finite) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite gradient in {what}")))
    }
}

/// Spatial output length of a convolution.
pub fn conv_output_len(len: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    (len + 2 * pad).checked_sub(kernel).map(|v| v / stride + 1)
}
