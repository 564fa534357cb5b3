use rand::Rng as _;

use super::{Forward, Mode};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Element, Tape, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub enum Activation {
    Identity,
    #[default]
    Relu,
    /// `z` for `z > 0`, `slope * z` otherwise.
    LeakyRelu(f64),
    Sigmoid,
    Tanh,
    /// Exact form `z * Phi(z)`.
    Gelu,
    /// `z * relu6(z + 3) / 6`.
    HardSwish,
}

impl Activation {
    pub const LEAKY_SLOPE: f64 = 0.01;

    pub fn leaky() -> Self {
        Activation::LeakyRelu(Self::LEAKY_SLOPE)
    }

    pub fn apply<T: Element>(self, tape: &mut Tape<T>, z: Var) -> Var {
        match self {
            Activation::Identity => z,
            Activation::Relu => tape.relu(z),
            Activation::LeakyRelu(slope) => tape.leaky_relu(z, T::of(slope)),
            Activation::Sigmoid => tape.sigmoid(z),
            Activation::Tanh => tape.tanh(z),
            Activation::Gelu => tape.gelu(z),
            Activation::HardSwish => tape.hard_swish(z),
        }
    }
}

/// Inverted dropout: in training each element is zeroed with probability
/// `rate` and survivors are scaled by `1 / (1 - rate)`. Otherwise, and at
/// rate 0, the input is returned untouched.
pub fn dropout<T: Element>(tape: &mut Tape<T>, x: Var, rate: f64, training: bool, seed: u64) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid("dropout", format!("rate {rate} outside [0, 1)")));
    }
    if !training || rate == 0.0 {
        return Ok(x);
    }
    let keep = T::of(1.0 / (1.0 - rate));
    let mut r = rng::seeded(seed);
    let mask = (0..tape.value(x).numel())
        .map(|_| if r.random::<f64>() < rate { T::zero() } else { keep })
        .collect();
    tape.mask(x, mask)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dropout {
    pub rate: f64,
}

impl Dropout {
    pub fn new(rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid("dropout", format!("rate {rate} outside [0, 1)")));
        }
        Ok(Dropout { rate })
    }

    pub fn forward<T: Element>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let training = f.mode() == Mode::Train;
        let seed = if training && self.rate > 0.0 {
            f.next_dropout_seed()
        } else {
            0
        };
        dropout(&mut f.tape, x, self.rate, training, seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn apply(a: Activation, z: f64) -> f64 {
        let mut tape = Tape::<f64>::new();
        let v = tape.constant(Tensor::scalar(z));
        let y = a.apply(&mut tape, v);
        tape.value(y).data()[0]
    }

    #[test]
    fn activation_examples() {
        assert_eq!(apply(Activation::Relu, -2.0), 0.0);
        assert_eq!(apply(Activation::Relu, 3.0), 3.0);
        assert_eq!(apply(Activation::Sigmoid, 0.0), 0.5);
        assert_eq!(apply(Activation::Tanh, 0.0), 0.0);
        assert!((apply(Activation::leaky(), -10.0) + 0.1).abs() < 1e-15);
        assert_eq!(apply(Activation::Gelu, 0.0), 0.0);
        // Phi(1) = 0.841344746...
        assert!((apply(Activation::Gelu, 1.0) - 0.841_344_746_068_542_9).abs() < 1e-12);
        assert_eq!(apply(Activation::HardSwish, -4.0), 0.0);
        assert_eq!(apply(Activation::HardSwish, 4.0), 4.0);
        assert_eq!(apply(Activation::HardSwish, 0.0), 0.0);
    }

    #[test]
    fn sigmoid_is_stable_for_large_inputs() {
        assert_eq!(apply(Activation::Sigmoid, -1000.0), 0.0);
        assert_eq!(apply(Activation::Sigmoid, 1000.0), 1.0);
    }

    #[test]
    fn dropout_identity_cases() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::ones(&[10]));
        assert_eq!(dropout(&mut tape, x, 0.0, true, 1).unwrap(), x);
        assert_eq!(dropout(&mut tape, x, 0.7, false, 1).unwrap(), x);
        assert!(dropout(&mut tape, x, 1.0, true, 1).is_err());
        assert!(Dropout::new(1.0).is_err());
    }

    #[test]
    fn dropout_statistics() {
        let mut tape = Tape::<f64>::new();
        let n = 100_000;
        let x = tape.constant(Tensor::ones(&[n]));
        let y = dropout(&mut tape, x, 0.5, true, 42).unwrap();
        let out = tape.value(y).data();
        let kept = out.iter().filter(|&&v| v != 0.0).count() as f64 / n as f64;
        let mean = out.iter().sum::<f64>() / n as f64;
        assert!((0.49..=0.51).contains(&kept), "{kept}");
        assert!((mean - 1.0).abs() < 0.02, "{mean}");
    }
}
