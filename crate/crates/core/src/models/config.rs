use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModelKind {
    Dfcnet,
    Vfdnet,
    Resnet,
    MobileNetV3,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [
        ModelKind::Dfcnet,
        ModelKind::Vfdnet,
        ModelKind::Resnet,
        ModelKind::MobileNetV3,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Dfcnet => "dfcnet",
            ModelKind::Vfdnet => "vfdnet",
            ModelKind::Resnet => "resnet",
            ModelKind::MobileNetV3 => "mobilenetv3",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "dfcnet" => Ok(ModelKind::Dfcnet),
            "vfdnet" => Ok(ModelKind::Vfdnet),
            "resnet" | "resnet50" => Ok(ModelKind::Resnet),
            "mobilenetv3" | "mobilenet" => Ok(ModelKind::MobileNetV3),
            other => Err(Error::Config(format!("unknown model kind `{other}`"))),
        }
    }
}

/// `Full` is the 224x224 layout, `Desk` a reduced one that trains on a
/// laptop CPU.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Scale {
    Full,
    Desk,
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scale::Full => "full",
            Scale::Desk => "desk",
        })
    }
}

impl FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "full" => Ok(Scale::Full),
            "desk" => Ok(Scale::Desk),
            other => Err(Error::Config(format!("unknown scale `{other}`"))),
        }
    }
}

/// Every knob of every architecture in one flat record. Fields that do not
/// apply to `kind` are carried along but ignored.
///
/// `widths` means: conv widths per stage (dfcnet), stage base widths
/// (resnet; the first entry is also the stem width), or
/// `[stem, last conv, head hidden]` (mobilenetv3). `depths` is the number of
/// residual blocks per resnet stage.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub scale: Scale,
    pub height: usize,
    pub width: usize,
    pub widths: Vec<usize>,
    pub depths: Vec<usize>,
    pub dense_units: usize,
    pub dropout: f64,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl ModelConfig {
    pub fn new(kind: ModelKind, scale: Scale) -> Self {
        let side = match scale {
            Scale::Full => 224,
            Scale::Desk => 32,
        };
        let mut c = ModelConfig {
            kind,
            scale,
            height: side,
            width: side,
            widths: Vec::new(),
            depths: Vec::new(),
            dense_units: 256,
            dropout: 0.0,
            patch_size: 16,
            embed_dim: 256,
            depth: 6,
            heads: 8,
            mlp_ratio: 4,
        };
        match (kind, scale) {
            (ModelKind::Dfcnet, Scale::Full) => {
                c.widths = vec![32, 64, 128];
                c.dropout = 0.25;
            }
            (ModelKind::Dfcnet, Scale::Desk) => {
                c.widths = vec![8, 16, 32];
                c.dropout = 0.25;
            }
            (ModelKind::Vfdnet, Scale::Full) => c.dropout = 0.1,
            (ModelKind::Vfdnet, Scale::Desk) => {
                c.patch_size = 4;
                c.embed_dim = 64;
                c.depth = 4;
                c.heads = 4;
            }
            (ModelKind::Resnet, Scale::Full) => {
                c.widths = vec![64, 128, 256, 512];
                c.depths = vec![3, 4, 6, 3];
            }
            (ModelKind::Resnet, Scale::Desk) => {
                c.widths = vec![16, 32, 64];
                c.depths = vec![2, 2, 2];
            }
            (ModelKind::MobileNetV3, Scale::Full) => {
                c.widths = vec![16, 576, 1024];
                c.dropout = 0.2;
            }
            (ModelKind::MobileNetV3, Scale::Desk) => c.widths = vec![16, 160, 128],
        }
        c
    }

    pub fn with_input(mut self, height: usize, width: usize) -> Self {
        self.height = height;
        self.width = width;
        self
    }

    /// Patch tokens per image for the transformer.
    pub fn num_patches(&self) -> usize {
        (self.height / self.patch_size.max(1)) * (self.width / self.patch_size.max(1))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.height == 0 || self.width == 0 {
            return bad("input size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.widths.contains(&0) || self.depths.contains(&0) {
            return bad("widths and depths must be at least 1".into());
        }
        match self.kind {
            ModelKind::Dfcnet => {
                if self.widths.is_empty() || self.dense_units == 0 {
                    return bad("dfcnet needs conv widths and dense units".into());
                }
                let cascade = 1usize << self.widths.len();
                if !self.height.is_multiple_of(cascade) || !self.width.is_multiple_of(cascade) {
                    return bad(format!(
                        "input {}x{} not divisible by the pooling cascade ({cascade})",
                        self.height, self.width
                    ));
                }
            }
            ModelKind::Vfdnet => {
                let p = self.patch_size;
                if p == 0 || !self.height.is_multiple_of(p) || !self.width.is_multiple_of(p) {
                    return bad(format!(
                        "input {}x{} not divisible by patch size {p}",
                        self.height, self.width
                    ));
                }
                if self.embed_dim == 0 || self.depth == 0 || self.mlp_ratio == 0 {
                    return bad("embed_dim, depth and mlp_ratio must be positive".into());
                }
                if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
                    return bad(format!(
                        "embed_dim {} not divisible by {} heads",
                        self.embed_dim, self.heads
                    ));
                }
            }
            ModelKind::Resnet => {
                if self.widths.is_empty() || self.widths.len() != self.depths.len() {
                    return bad("resnet needs one width and one depth per stage".into());
                }
            }
            ModelKind::MobileNetV3 => {
                if self.widths.len() != 3 {
                    return bad("mobilenetv3 widths are [stem, last conv, head hidden]".into());
                }
            }
        }
        Ok(())
    }

    /// Assign one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let num = |v: &str| -> Result<usize> {
            v.parse()
                .map_err(|_| Error::Config(format!("`{key}` expects an integer, got `{v}`")))
        };
        let list = |v: &str| -> Result<Vec<usize>> {
            if v.is_empty() {
                return Ok(Vec::new());
            }
            v.split(',').map(|p| num(p.trim())).collect()
        };
        match key.trim() {
            "kind" | "model" => self.kind = value.parse()?,
            "scale" => self.scale = value.parse()?,
            "height" => self.height = num(value)?,
            "width" => self.width = num(value)?,
            "input_size" => {
                let n = num(value)?;
                self.height = n;
                self.width = n;
            }
            "widths" => self.widths = list(value)?,
            "depths" => self.depths = list(value)?,
            "dense_units" => self.dense_units = num(value)?,
            "dropout" => {
                self.dropout = value
                    .parse()
                    .map_err(|_| Error::Config(format!("`dropout` expects a number, got `{value}`")))?
            }
            "patch_size" => self.patch_size = num(value)?,
            "embed_dim" => self.embed_dim = num(value)?,
            "depth" => self.depth = num(value)?,
            "heads" => self.heads = num(value)?,
            "mlp_ratio" => self.mlp_ratio = num(value)?,
            other => return Err(Error::Config(format!("unknown model setting `{other}`"))),
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let join = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        format!(
            "kind = {}\nscale = {}\nheight = {}\nwidth = {}\nwidths = {}\ndepths = {}\n\
             dense_units = {}\ndropout = {}\npatch_size = {}\nembed_dim = {}\ndepth = {}\n\
             heads = {}\nmlp_ratio = {}\n",
            self.kind,
            self.scale,
            self.height,
            self.width,
            join(&self.widths),
            join(&self.depths),
            self.dense_units,
            self.dropout,
            self.patch_size,
            self.embed_dim,
            self.depth,
            self.heads,
            self.mlp_ratio,
        )
    }

    /// Parse the output of [`ModelConfig::to_text`]. `kind` and `scale`
    /// select the defaults; remaining keys override them.
    pub fn from_text(text: &str) -> Result<Self> {
        let pairs: Vec<(&str, &str)> = text
            .lines()
            .map(|l| l.split('#').next().unwrap_or("").trim())
            .filter(|l| !l.is_empty())
            .map(|l| {
                l.split_once('=')
                    .map(|(k, v)| (k.trim(), v.trim()))
                    .ok_or_else(|| Error::Config(format!("expected `key = value`, got `{l}`")))
            })
            .collect::<Result<_>>()?;
        let lookup = |k: &str| pairs.iter().rev().find(|(key, _)| *key == k).map(|(_, v)| *v);
        let kind: ModelKind = lookup("kind")
            .ok_or_else(|| Error::Config("missing `kind`".into()))?
            .parse()?;
        let scale: Scale = lookup("scale").unwrap_or("desk").parse()?;
        let mut c = ModelConfig::new(kind, scale);
        for (k, v) in pairs {
            if k != "kind" && k != "scale" {
                c.set(k, v)?;
            }
        }
        c.validate()?;
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        for kind in ModelKind::ALL {
            for scale in [Scale::Full, Scale::Desk] {
                let c = ModelConfig::new(kind, scale);
                c.validate().unwrap();
                assert_eq!(ModelConfig::from_text(&c.to_text()).unwrap(), c);
            }
        }
    }

    #[test]
    fn patch_divisibility() {
        let mut c = ModelConfig::new(ModelKind::Vfdnet, Scale::Full);
        assert_eq!(c.num_patches(), 196);
        c.height = 230;
        assert!(c.validate().is_err());
    }

    #[test]
    fn dfcnet_cascade() {
        let c = ModelConfig::new(ModelKind::Dfcnet, Scale::Desk).with_input(36, 36);
        assert!(c.validate().is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(ModelConfig::from_text("kind = dfcnet\nbogus = 1\n").is_err());
        assert!(ModelConfig::from_text("scale = desk\n").is_err());
    }
}
