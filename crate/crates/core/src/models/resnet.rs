use super::{ModelConfig, Scale};
use crate::error::Result;
use crate::layers::{
    global_avg_pool, Activation, BatchNorm2d, Builder, Conv2d, Dense, Dropout, Forward, Init, MaxPool2d, Padding,
};
use crate::tensor::{Element, Var};

/// Bias-free convolution followed by batch normalisation.
#[derive(Clone, Debug)]
pub struct ConvBn {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Element>(
        b: &mut Builder<'_, T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
    ) -> Result<Self> {
        Self::with_gain(b, name, in_channels, out_channels, kernel, stride, groups, Init::Ones)
    }

    /// As [`ConvBn::new`] with a chosen initial normalisation gain.
    #[allow(clippy::too_many_arguments)]
    pub fn with_gain<T: Element>(
        b: &mut Builder<'_, T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
        gain: Init,
    ) -> Result<Self> {
        let mut s = b.scope(name);
        Ok(ConvBn {
            conv: Conv2d::new(
                &mut s,
                "conv",
                in_channels,
                out_channels,
                kernel,
                stride,
                Padding::Same,
                groups,
                false,
            )?,
            bn: BatchNorm2d::with_gain(&mut s, "bn", out_channels, gain)?,
        })
    }

    pub fn forward<T: Element>(&self, f: &mut Forward<'_, T>, x: Var, act: Activation) -> Result<Var> {
        let h = self.conv.forward(f, x)?;
        let h = self.bn.forward(f, h)?;
        Ok(act.apply(&mut f.tape, h))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockStyle {
    /// Two 3x3 convolutions.
    Basic,
    /// 1x1 reduce, 3x3, 1x1 expand by 4.
    Bottleneck,
}

impl BlockStyle {
    pub fn expansion(self) -> usize {
        match self {
            BlockStyle::Basic => 1,
            BlockStyle::Bottleneck => 4,
        }
    }
}

/// `relu(branch(x) + shortcut(x))`. The shortcut is the identity unless the
/// stride or channel count changes, in which case it is a strided 1x1
/// projection.
/// `relu(branch(x) + shortcut(x))`. The branch's last normalisation starts
/// with zero gain, so a fresh block passes its shortcut straight through.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub branch: Vec<ConvBn>,
    pub shortcut: Option<ConvBn>,
    pub out_channels: usize,
}

impl ResidualBlock {
    pub fn new<T: Element>(
        b: &mut Builder<'_, T>,
        name: &str,
        style: BlockStyle,
        in_channels: usize,
        width: usize,
        stride: usize,
    ) -> Result<Self> {
        let out = width * style.expansion();
        let mut s = b.scope(name);
        let branch = match style {
            BlockStyle::Basic => vec![
                ConvBn::new(&mut s, "conv1", in_channels, width, 3, stride, 1)?,
                ConvBn::with_gain(&mut s, "conv2", width, width, 3, 1, 1, Init::Zeros)?,
            ],
            BlockStyle::Bottleneck => vec![
                ConvBn::new(&mut s, "conv1", in_channels, width, 1, 1, 1)?,
                ConvBn::new(&mut s, "conv2", width, width, 3, stride, 1)?,
                ConvBn::with_gain(&mut s, "conv3", width, out, 1, 1, 1, Init::Zeros)?,
            ],
        };
        let shortcut = if stride != 1 || in_channels != out {
            Some(ConvBn::new(&mut s, "shortcut", in_channels, out, 1, stride, 1)?)
        } else {
            None
        };
        Ok(ResidualBlock {
            branch,
            shortcut,
            out_channels: out,
        })
    }

    pub fn forward<T: Element>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.branch.len() - 1;
        for (i, layer) in self.branch.iter().enumerate() {
            let act = if i == last {
                Activation::Identity
            } else {
                Activation::Relu
            };
            h = layer.forward(f, h, act)?;
        }
        let skip = match &self.shortcut {
            Some(p) => p.forward(f, x, Activation::Identity)?,
            None => x,
        };
        let sum = f.tape.add(h, skip)?;
        Ok(f.tape.relu(sum))
    }
}

#[derive(Clone, Debug)]
pub struct ResNet {
    pub stem: ConvBn,
    pub pool: MaxPool2d,
    pub blocks: Vec<ResidualBlock>,
    pub dropout: Dropout,
    pub head: Dense,
}

impl ResNet {
    /// Full scale: 7x7/2 stem, 3x3/2 max-pool, bottleneck stages.
    /// Desk scale: 3x3/1 stem, 2x2/2 max-pool, basic blocks.
    pub fn build<T: Element>(b: &mut Builder<'_, T>, c: &ModelConfig) -> Result<Self> {
        let stem_width = c.widths[0];
        let (stem, pool, style) = match c.scale {
            Scale::Full => (
                ConvBn::new(b, "stem", 3, stem_width, 7, 2, 1)?,
                MaxPool2d::new(3, 2).with_padding(1),
                BlockStyle::Bottleneck,
            ),
            Scale::Desk => (
                ConvBn::new(b, "stem", 3, stem_width, 3, 1, 1)?,
                MaxPool2d::new(2, 2),
                BlockStyle::Basic,
            ),
        };
        let mut blocks = Vec::new();
        let mut channels = stem_width;
        for (stage, (&width, &depth)) in c.widths.iter().zip(&c.depths).enumerate() {
            for k in 0..depth {
                let stride = if stage > 0 && k == 0 { 2 } else { 1 };
                let name = format!("stage{}.block{k}", stage + 1);
                let block = ResidualBlock::new(b, &name, style, channels, width, stride)?;
                channels = block.out_channels;
                blocks.push(block);
            }
        }
        Ok(ResNet {
            stem,
            pool,
            blocks,
            dropout: Dropout::new(c.dropout)?,
            head: Dense::with_init(
                b,
                "head",
                channels,
                1,
                Init::XavierUniform {
                    fan_in: channels,
                    fan_out: 1,
                },
            )?,
        })
    }

    /// Convolutions on the main path plus the dense head. Projection
    /// shortcuts are not counted.
    pub fn weight_layers(&self) -> usize {
        1 + self.blocks.iter().map(|b| b.branch.len()).sum::<usize>() + 1
    }

    pub fn logits<T: Element>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let h = self.stem.forward(f, x, Activation::Relu)?;
        let mut h = self.pool.forward(f, h)?;
        for block in &self.blocks {
            h = block.forward(f, h)?;
        }
        let h = global_avg_pool(f, h)?;
        let h = self.dropout.forward(f, h)?;
        self.head.forward(f, h)
    }
}
