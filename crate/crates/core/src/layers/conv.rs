use super::{Builder, Forward, Init, ParamId};
use crate::error::{Error, Result};
use crate::tensor::{Conv2dGeometry, Element, Pool2dGeometry, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Valid,
    /// `(k - 1) / 2` zeros per side; preserves extent at stride 1 for odd `k`.
    Same,
    Explicit(usize),
}

impl Padding {
    fn amount(self, kernel: usize) -> usize {
        match self {
            Padding::Valid => 0,
            Padding::Same => (kernel - 1) / 2,
            Padding::Explicit(p) => p,
        }
    }
}

/// 2-D convolution (cross-correlation, no kernel flip).
///
/// Output channel `j` is the sum over input channels `k` of the
/// single-channel correlation of input plane `k` with kernel slice `[j, k]`,
/// plus `bias[j]`. `groups == in_channels` gives a depthwise convolution.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: Padding,
    pub groups: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Element>(
        b: &mut Builder<'_, T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
        groups: usize,
        bias: bool,
    ) -> Result<Self> {
        if kernel == 0 || stride == 0 || groups == 0 {
            return Err(Error::invalid("conv2d", "kernel, stride and groups must be positive"));
        }
        if !in_channels.is_multiple_of(groups) || !out_channels.is_multiple_of(groups) {
            return Err(Error::invalid(
                "conv2d",
                format!("groups {groups} must divide {in_channels} and {out_channels}"),
            ));
        }
        let cin_g = in_channels / groups;
        let fan_in = cin_g * kernel * kernel;
        let mut s = b.scope(name);
        let weight = s.param(
            "weight",
            &[out_channels, cin_g, kernel, kernel],
            Init::KaimingUniform { fan_in },
        )?;
        let bias = if bias {
            Some(s.param("bias", &[out_channels], Init::Zeros)?)
        } else {
            None
        };
        Ok(Conv2d {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            groups,
        })
    }

    pub fn geometry(&self) -> Conv2dGeometry {
        let pad = self.padding.amount(self.kernel);
        Conv2dGeometry {
            stride: self.stride,
            pad_h: pad,
            pad_w: pad,
            groups: self.groups,
        }
    }

    /// Output spatial extent for an input extent.
    pub fn output_extent(&self, input: usize) -> Option<usize> {
        let pad = self.padding.amount(self.kernel);
        (input + 2 * pad).checked_sub(self.kernel).map(|v| v / self.stride + 1)
    }

    pub fn forward<T: Element>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let shape = f.tape.shape(x);
        if shape.len() != 4 || shape[1] != self.in_channels {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: shape.to_vec(),
                rhs: vec![self.out_channels, self.in_channels, self.kernel, self.kernel],
            });
        }
        let w = f.param(self.weight);
        let b = self.bias.map(|id| f.param(id));
        f.tape.conv2d(x, w, b, self.geometry())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MaxPool2d {
    pub window: usize,
    pub stride: usize,
    pub padding: usize,
}

impl MaxPool2d {
    pub fn new(window: usize, stride: usize) -> Self {
        MaxPool2d {
            window,
            stride,
            padding: 0,
        }
    }

    pub fn with_padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn output_extent(&self, input: usize) -> Option<usize> {
        (input + 2 * self.padding)
            .checked_sub(self.window)
            .map(|v| v / self.stride + 1)
    }

    pub fn forward<T: Element>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        f.tape.max_pool2d(
            x,
            Pool2dGeometry {
                window: self.window,
                stride: self.stride,
                padding: self.padding,
            },
        )
    }
}

/// Mean over the spatial axes: `[B, C, H, W] -> [B, C]`.
pub fn global_avg_pool<T: Element>(f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
    let s = f.tape.shape(x).to_vec();
    if s.len() != 4 {
        return Err(Error::invalid("global_avg_pool", format!("needs rank 4, got {s:?}")));
    }
    let flat = f.tape.reshape(x, &[s[0], s[1], s[2] * s[3]])?;
    f.tape.mean(flat, Some(2))
}
