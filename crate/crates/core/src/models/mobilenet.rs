use super::resnet::ConvBn;
use super::{ModelConfig, Scale};
use crate::error::Result;
use crate::layers::{global_avg_pool, Activation, Builder, Dense, Dropout, Forward, Init};
use crate::tensor::{Element, Var};

/// One row of the block table.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockSpec {
    pub kernel: usize,
    pub expand: usize,
    pub out: usize,
    pub squeeze_excite: bool,
    pub act: Activation,
    pub stride: usize,
}

const fn row(kernel: usize, expand: usize, out: usize, se: bool, hard: bool, stride: usize) -> BlockSpec {
    BlockSpec {
        kernel,
        expand,
        out,
        squeeze_excite: se,
        act: if hard { Activation::HardSwish } else { Activation::Relu },
        stride,
    }
}

/// The Small layout at 224 input.
pub const SMALL: [BlockSpec; 11] = [
    row(3, 16, 16, true, false, 2),
    row(3, 72, 24, false, false, 2),
    row(3, 88, 24, false, false, 1),
    row(5, 96, 40, true, true, 2),
    row(5, 240, 40, true, true, 1),
    row(5, 240, 40, true, true, 1),
    row(5, 120, 48, true, true, 1),
    row(5, 144, 48, true, true, 1),
    row(5, 288, 96, true, true, 2),
    row(5, 576, 96, true, true, 1),
    row(5, 576, 96, true, true, 1),
];

/// Reduced layout for 32x32 inputs.
pub const DESK: [BlockSpec; 5] = [
    row(3, 16, 16, true, false, 2),
    row(3, 48, 24, false, false, 2),
    row(3, 72, 24, false, false, 1),
    row(5, 96, 40, true, true, 2),
    row(5, 120, 40, true, true, 1),
];

/// Round to a multiple of 8, never more than 10% below `v`.
pub fn make_divisible(v: f64) -> usize {
    let d = 8.0;
    let mut n = (((v + d / 2.0) / d).floor() * d).max(d);
    if n < 0.9 * v {
        n += d;
    }
    n as usize
}

/// Channel gate: global pool, ReLU bottleneck, sigmoid, rescale.
#[derive(Clone, Debug)]
pub struct SqueezeExcite {
    pub reduce: Dense,
    pub expand: Dense,
}

impl SqueezeExcite {
    pub fn new<T: Element>(b: &mut Builder<'_, T>, name: &str, channels: usize) -> Result<Self> {
        let squeeze = make_divisible(channels as f64 / 4.0);
        let mut s = b.scope(name);
        Ok(SqueezeExcite {
            reduce: Dense::new(&mut s, "reduce", channels, squeeze)?,
            expand: Dense::new(&mut s, "expand", squeeze, channels)?,
        })
    }

    pub fn forward<T: Element>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let p = global_avg_pool(f, x)?;
        let r = self.reduce.forward(f, p)?;
        let r = f.tape.relu(r);
        let g = self.expand.forward(f, r)?;
        let g = f.tape.sigmoid(g);
        f.tape.mul_prefix(x, g)
    }
}

/// Expand (1x1) -> depthwise (kxk, strided) -> optional squeeze-excite ->
/// linear projection (1x1), with a skip connection when the stride is 1 and
/// the channel count is unchanged.
#[derive(Clone, Debug)]
pub struct InvertedResidual {
    pub expand: Option<ConvBn>,
    pub depthwise: ConvBn,
    pub squeeze_excite: Option<SqueezeExcite>,
    pub project: ConvBn,
    pub act: Activation,
    pub residual: bool,
}

impl InvertedResidual {
    pub fn new<T: Element>(b: &mut Builder<'_, T>, name: &str, in_channels: usize, spec: BlockSpec) -> Result<Self> {
        let mut s = b.scope(name);
        let expand = if spec.expand != in_channels {
            Some(ConvBn::new(&mut s, "expand", in_channels, spec.expand, 1, 1, 1)?)
        } else {
            None
        };
        Ok(InvertedResidual {
            expand,
            depthwise: ConvBn::new(
                &mut s,
                "depthwise",
                spec.expand,
                spec.expand,
                spec.kernel,
                spec.stride,
                spec.expand,
            )?,
            squeeze_excite: if spec.squeeze_excite {
                Some(SqueezeExcite::new(&mut s, "se", spec.expand)?)
            } else {
                None
            },
            project: ConvBn::new(&mut s, "project", spec.expand, spec.out, 1, 1, 1)?,
            act: spec.act,
            residual: spec.stride == 1 && in_channels == spec.out,
        })
    }

    pub fn weight_layers(&self) -> usize {
        self.expand.is_some() as usize + 2 + 2 * self.squeeze_excite.is_some() as usize
    }

    pub fn forward<T: Element>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let mut h = x;
        if let Some(e) = &self.expand {
            h = e.forward(f, h, self.act)?;
        }
        h = self.depthwise.forward(f, h, self.act)?;
        if let Some(se) = &self.squeeze_excite {
            h = se.forward(f, h)?;
        }
        h = self.project.forward(f, h, Activation::Identity)?;
        if self.residual {
            h = f.tape.add(x, h)?;
        }
        Ok(h)
    }
}

#[derive(Clone, Debug)]
pub struct MobileNetV3 {
    pub stem: ConvBn,
    pub blocks: Vec<InvertedResidual>,
    pub last: ConvBn,
    pub hidden: Dense,
    pub dropout: Dropout,
    pub head: Dense,
}

impl MobileNetV3 {
    pub fn build<T: Element>(b: &mut Builder<'_, T>, c: &ModelConfig) -> Result<Self> {
        let (table, stem_stride): (&[BlockSpec], usize) = match c.scale {
            Scale::Full => (&SMALL, 2),
            Scale::Desk => (&DESK, 1),
        };
        let (stem_width, last_width, hidden_width) = (c.widths[0], c.widths[1], c.widths[2]);
        let stem = ConvBn::new(b, "stem", 3, stem_width, 3, stem_stride, 1)?;
        let mut channels = stem_width;
        let mut blocks = Vec::with_capacity(table.len());
        for (i, &spec) in table.iter().enumerate() {
            blocks.push(InvertedResidual::new(b, &format!("block{i}"), channels, spec)?);
            channels = spec.out;
        }
        Ok(MobileNetV3 {
            stem,
            blocks,
            last: ConvBn::new(b, "last", channels, last_width, 1, 1, 1)?,
            hidden: Dense::new(b, "fc", last_width, hidden_width)?,
            dropout: Dropout::new(c.dropout)?,
            head: Dense::with_init(
                b,
                "head",
                hidden_width,
                1,
                Init::XavierUniform {
                    fan_in: hidden_width,
                    fan_out: 1,
                },
            )?,
        })
    }

    pub fn weight_layers(&self) -> usize {
        1 + self.blocks.iter().map(|b| b.weight_layers()).sum::<usize>() + 3
    }

    pub fn logits<T: Element>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let mut h = self.stem.forward(f, x, Activation::HardSwish)?;
        for block in &self.blocks {
            h = block.forward(f, h)?;
        }
        let h = self.last.forward(f, h, Activation::HardSwish)?;
        let h = global_avg_pool(f, h)?;
        let h = self.hidden.forward(f, h)?;
        let h = Activation::HardSwish.apply(&mut f.tape, h);
        let h = self.dropout.forward(f, h)?;
        self.head.forward(f, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn divisible_rounding() {
        assert_eq!(make_divisible(4.0), 8);
        assert_eq!(make_divisible(16.0 / 4.0), 8);
        assert_eq!(make_divisible(96.0 / 4.0), 24);
        assert_eq!(make_divisible(240.0 / 4.0), 64);
        assert_eq!(make_divisible(576.0 / 4.0), 144);
    }
}
