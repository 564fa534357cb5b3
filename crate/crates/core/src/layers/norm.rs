use super::{Builder, Forward, Init, Mode, ParamId};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor, Var};

/// Normalises the last axis, then applies `gain * x + offset`.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub offset: ParamId,
    pub dim: usize,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Element>(b: &mut Builder<'_, T>, name: &str, dim: usize) -> Result<Self> {
        let mut s = b.scope(name);
        Ok(LayerNorm {
            gain: s.param("gain", &[dim], Init::Ones)?,
            offset: s.param("offset", &[dim], Init::Zeros)?,
            dim,
            eps: 1e-5,
        })
    }

    pub fn forward<T: Element>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let shape = f.tape.shape(x);
        if shape.last() != Some(&self.dim) {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: shape.to_vec(),
                rhs: vec![self.dim],
            });
        }
        let axis = shape.len() - 1;
        let n = f.tape.normalize_last(x, T::of(self.eps))?;
        let g = f.param(self.gain);
        let o = f.param(self.offset);
        let y = f.tape.mul_along(n, g, axis)?;
        f.tape.add_along(y, o, axis)
    }
}

/// Per-channel batch normalisation over `[B, C, ...]`.
///
/// Training mode normalises with batch statistics and queues running-stat
/// updates `r <- momentum * r + (1 - momentum) * batch` (biased variance);
/// eval mode uses the running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gain: ParamId,
    pub offset: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm2d {
    pub fn new<T: Element>(b: &mut Builder<'_, T>, name: &str, channels: usize) -> Result<Self> {
        Self::with_gain(b, name, channels, Init::Ones)
    }

    pub fn with_gain<T: Element>(b: &mut Builder<'_, T>, name: &str, channels: usize, gain: Init) -> Result<Self> {
        let mut s = b.scope(name);
        Ok(BatchNorm2d {
            gain: s.param("gain", &[channels], gain)?,
            offset: s.param("offset", &[channels], Init::Zeros)?,
            running_mean: s.buffer("running_mean", Tensor::zeros(&[channels]))?,
            running_var: s.buffer("running_var", Tensor::ones(&[channels]))?,
            channels,
            eps: 1e-5,
            momentum: 0.9,
        })
    }

    pub fn forward<T: Element>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let shape = f.tape.shape(x);
        if shape.len() < 2 || shape[1] != self.channels {
            return Err(Error::ShapeMismatch {
                op: "batch_norm",
                lhs: shape.to_vec(),
                rhs: vec![self.channels],
            });
        }
        let eps = T::of(self.eps);
        let normalized = match f.mode() {
            Mode::Train => {
                let (n, mean, var) = f.tape.normalize_channels(x, eps)?;
                let m = T::of(self.momentum);
                let blend = |old: &[T], new: &[T]| -> Vec<T> {
                    old.iter().zip(new).map(|(&o, &v)| m * o + (T::one() - m) * v).collect()
                };
                let rm = blend(f.store().get(self.running_mean).data(), &mean);
                let rv = blend(f.store().get(self.running_var).data(), &var);
                f.push_update(self.running_mean, rm);
                f.push_update(self.running_var, rv);
                n
            }
            Mode::Eval => {
                let rm = f.store().get(self.running_mean).data().to_vec();
                let rv = f.store().get(self.running_var).data().to_vec();
                let scale: Vec<T> = rv.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                let shift: Vec<T> = rm.iter().zip(&scale).map(|(&m, &s)| -m * s).collect();
                let c = self.channels;
                let scale = f.input(Tensor::from_vec(&[c], scale)?);
                let shift = f.input(Tensor::from_vec(&[c], shift)?);
                let y = f.tape.mul_along(x, scale, 1)?;
                f.tape.add_along(y, shift, 1)?
            }
        };
        let g = f.param(self.gain);
        let o = f.param(self.offset);
        let y = f.tape.mul_along(normalized, g, 1)?;
        f.tape.add_along(y, o, 1)
    }
}
