use super::ModelConfig;
use crate::error::Result;
use crate::layers::{Activation, Builder, Conv2d, Dense, Dropout, Forward, MaxPool2d, Padding};
use crate::tensor::{Element, Var};

/// Three conv/ReLU/max-pool/dropout stages, a ReLU dense layer and a
/// single-logit head.
#[derive(Clone, Debug)]
pub struct Dfcnet {
    pub convs: Vec<Conv2d>,
    pub pool: MaxPool2d,
    pub dropout: Dropout,
    pub hidden: Dense,
    pub head: Dense,
}

impl Dfcnet {
    pub fn build<T: Element>(b: &mut Builder<'_, T>, c: &ModelConfig) -> Result<Self> {
        let mut convs = Vec::with_capacity(c.widths.len());
        let mut channels = 3;
        for (i, &w) in c.widths.iter().enumerate() {
            convs.push(Conv2d::new(
                b,
                &format!("conv{}", i + 1),
                channels,
                w,
                3,
                1,
                Padding::Same,
                1,
                true,
            )?);
            channels = w;
        }
        let shrink = 1 << c.widths.len();
        let flat = channels * (c.height / shrink) * (c.width / shrink);
        Ok(Dfcnet {
            convs,
            pool: MaxPool2d::new(2, 2),
            dropout: Dropout::new(c.dropout)?,
            hidden: Dense::new(b, "fc", flat, c.dense_units)?,
            head: Dense::with_init(
                b,
                "head",
                c.dense_units,
                1,
                crate::layers::Init::XavierUniform {
                    fan_in: c.dense_units,
                    fan_out: 1,
                },
            )?,
        })
    }

    /// Width of the flattened feature vector fed to the dense layer.
    pub fn flatten_dim(&self) -> usize {
        self.hidden.in_features
    }

    pub fn weight_layers(&self) -> usize {
        self.convs.len() + 2
    }

    pub fn logits<T: Element>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let mut h = x;
        for conv in &self.convs {
            h = conv.forward(f, h)?;
            h = f.tape.relu(h);
            h = self.pool.forward(f, h)?;
            h = self.dropout.forward(f, h)?;
        }
        let h = f.tape.flatten(h)?;
        let h = self.hidden.forward(f, h)?;
        let h = Activation::Relu.apply(&mut f.tape, h);
        self.head.forward(f, h)
    }
}
