use super::{Builder, Forward, Init, ParamId};
use crate::error::{Error, Result};
use crate::tensor::{Element, Var};

/// Fully connected layer, `out = x . W + b` with `W: [in, out]`.
///
/// Column `i` of `W` is the weight vector of output unit `i`, so per sample
/// this is `W^T x + b`. Inputs of any rank are accepted; the last axis is
/// the feature axis.
#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Dense {
    pub fn new<T: Element>(
        b: &mut Builder<'_, T>,
        name: &str,
        in_features: usize,
        out_features: usize,
    ) -> Result<Self> {
        let init = Init::KaimingUniform { fan_in: in_features };
        Self::with_init(b, name, in_features, out_features, init)
    }

    pub fn with_init<T: Element>(
        b: &mut Builder<'_, T>,
        name: &str,
        in_features: usize,
        out_features: usize,
        init: Init,
    ) -> Result<Self> {
        let mut s = b.scope(name);
        Ok(Dense {
            weight: s.param("weight", &[in_features, out_features], init)?,
            bias: s.param("bias", &[out_features], Init::Zeros)?,
            in_features,
            out_features,
        })
    }

    pub fn forward<T: Element>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let shape = f.tape.shape(x).to_vec();
        if shape.last() != Some(&self.in_features) {
            return Err(Error::ShapeMismatch {
                op: "dense",
                lhs: shape,
                rhs: vec![self.in_features, self.out_features],
            });
        }
        let rows = shape[..shape.len() - 1].iter().product();
        let w = f.param(self.weight);
        let b = f.param(self.bias);
        let flat = if shape.len() == 2 {
            x
        } else {
            f.tape.reshape(x, &[rows, self.in_features])?
        };
        let y = f.tape.matmul(flat, w)?;
        let y = f.tape.add_along(y, b, 1)?;
        if shape.len() == 2 {
            return Ok(y);
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.out_features;
        f.tape.reshape(y, &out_shape)
    }
}
