//! The four classifiers and their checkpoint format.
//!
//! Every model maps `[B, 3, H, W]` images in `[0, 1]` to `[B, 1]`
//! probabilities that the image is fake.

mod checkpoint;
mod config;
mod dfcnet;
mod mobilenet;
mod resnet;
mod vfdnet;

use std::collections::BTreeMap;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use config::{ModelConfig, ModelKind, Scale};
pub use dfcnet::Dfcnet;
pub use mobilenet::{make_divisible, BlockSpec, InvertedResidual, MobileNetV3, SqueezeExcite, DESK, SMALL};
pub use resnet::{BlockStyle, ConvBn, ResNet, ResidualBlock};
pub use vfdnet::{EncoderBlock, PatchEmbedding, Vfdnet};

use crate::error::{Error, Result};
use crate::layers::{Builder, Forward, Mode, ParamStore};
use crate::tensor::{Tensor, Var};

#[derive(Clone, Debug)]
pub enum Network {
    Dfcnet(Dfcnet),
    Vfdnet(Vfdnet),
    Resnet(ResNet),
    MobileNetV3(MobileNetV3),
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore<f32>,
    pub network: Network,
}

impl Model {
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut b = Builder::new(&mut params, seed);
        let network = match config.kind {
            ModelKind::Dfcnet => Network::Dfcnet(Dfcnet::build(&mut b, &config)?),
            ModelKind::Vfdnet => Network::Vfdnet(Vfdnet::build(&mut b, &config)?),
            ModelKind::Resnet => Network::Resnet(ResNet::build(&mut b, &config)?),
            ModelKind::MobileNetV3 => Network::MobileNetV3(MobileNetV3::build(&mut b, &config)?),
        };
        Ok(Model {
            config,
            params,
            network,
        })
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let want = [3, self.config.height, self.config.width];
        if shape.len() != 4 || shape[1..] != want || shape[0] == 0 {
            return Err(Error::ShapeMismatch {
                op: "model input",
                lhs: shape.to_vec(),
                rhs: want.to_vec(),
            });
        }
        Ok(())
    }

    /// Pre-sigmoid scores, `[B, 1]`.
    pub fn logits(&self, f: &mut Forward<'_, f32>, images: Var) -> Result<Var> {
        self.check_input(f.tape.shape(images))?;
        match &self.network {
            Network::Dfcnet(n) => n.logits(f, images),
            Network::Vfdnet(n) => n.logits(f, images),
            Network::Resnet(n) => n.logits(f, images),
            Network::MobileNetV3(n) => n.logits(f, images),
        }
    }

    /// Probabilities `[B, 1]` on the pass's tape.
    pub fn forward(&self, f: &mut Forward<'_, f32>, images: Var) -> Result<Var> {
        let z = self.logits(f, images)?;
        Ok(f.tape.sigmoid(z))
    }

    /// Inference-mode probabilities, one per image.
    pub fn predict(&self, images: &Tensor<f32>) -> Result<Vec<f32>> {
        let mut f = Forward::new(&self.params, Mode::Eval, 0);
        let x = f.input(images.clone());
        let p = self.forward(&mut f, x)?;
        Ok(f.tape.value(p).data().to_vec())
    }

    /// Element count over trainable parameters.
    pub fn count_params(&self) -> usize {
        self.params.count_trainable()
    }

    /// Convolution and dense layers on the main path.
    pub fn weight_layers(&self) -> usize {
        match &self.network {
            Network::Dfcnet(n) => n.weight_layers(),
            Network::Vfdnet(n) => n.weight_layers(),
            Network::Resnet(n) => n.weight_layers(),
            Network::MobileNetV3(n) => n.weight_layers(),
        }
    }

    /// One line per top-level component with its trainable parameter count.
    pub fn summary(&self) -> String {
        let mut groups: BTreeMap<String, (usize, usize)> = BTreeMap::new();
        for (order, id) in self.params.trainable().enumerate() {
            let name = self.params.name(id);
            let key = match name.split_once('.') {
                Some((head, rest)) if head.starts_with("stage") => {
                    format!("{head}.{}", rest.split('.').next().unwrap_or(""))
                }
                Some((head, _)) => head.to_string(),
                None => name.to_string(),
            };
            let e = groups.entry(key).or_insert((order, 0));
            e.1 += self.params.get(id).numel();
        }
        let mut rows: Vec<_> = groups.into_iter().collect();
        rows.sort_by_key(|(_, (order, _))| *order);
        let mut out = format!(
            "{} ({} scale, input {}x{}x3)\n",
            self.config.kind, self.config.scale, self.config.height, self.config.width
        );
        for (name, (_, n)) in rows {
            out.push_str(&format!("  {name:<24} {n:>12}\n"));
        }
        out.push_str(&format!(
            "  {:<24} {:>12}\n  weight layers: {}\n",
            "total",
            self.count_params(),
            self.weight_layers()
        ));
        out
    }
}
