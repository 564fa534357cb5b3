//! Training run settings: defaults, then a `key = value` file, then flags.

use std::fs;
use std::path::{Path, PathBuf};

use dfkit_core::data::{AugmentKind, AugmentPolicy};
use dfkit_core::models::{ModelConfig, ModelKind, Scale};
use dfkit_core::optim::{AdamConfig, FitConfig};
use dfkit_core::rng::derive_seed;
use dfkit_core::{Error, Result};

use crate::args::TrainArgs;

/// Sub-seed streams derived from the global seed.
pub mod streams {
    pub const SPLIT: u64 = 1;
    pub const INIT: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const AUGMENT: u64 = 4;
    pub const DROPOUT: u64 = 5;
}

pub fn sub_seed(seed: u64, stream: u64) -> u64 {
    derive_seed(seed, stream)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub data: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub augment: AugmentKind,
    pub out: Option<PathBuf>,
    pub seed: u64,
    pub timings: bool,
}

/// Parse `key = value` lines, dropping blanks and `#` comments.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    text.lines()
        .enumerate()
        .map(|(n, l)| (n, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty())
        .map(|(n, l)| {
            l.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Error::Config(format!("config line {}: expected `key = value`", n + 1)))
        })
        .collect()
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

impl RunConfig {
    pub fn new(kind: ModelKind, scale: Scale) -> Self {
        RunConfig {
            model: ModelConfig::new(kind, scale),
            data: None,
            manifest: None,
            epochs: 20,
            batch_size: 16,
            adam: AdamConfig::default(),
            augment: AugmentKind::None,
            out: None,
            seed: 0,
            timings: false,
        }
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "data" => self.data = Some(PathBuf::from(v)),
            "manifest" => self.manifest = Some(PathBuf::from(v)),
            "epochs" => self.epochs = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "lr" => self.adam.lr = parse(key, v)?,
            "beta1" => self.adam.beta1 = parse(key, v)?,
            "beta2" => self.adam.beta2 = parse(key, v)?,
            "adam_eps" => self.adam.eps = parse(key, v)?,
            "augment" => self.augment = v.parse()?,
            "out" => self.out = Some(PathBuf::from(v)),
            "seed" => self.seed = parse(key, v)?,
            "timings" => self.timings = parse(key, v)?,
            _ => self.model.set(key, v)?,
        }
        Ok(())
    }

    /// Resolve settings from an optional config file and the flags.
    pub fn resolve(args: &TrainArgs) -> Result<Self> {
        let pairs = match &args.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
                parse_pairs(&text)?
            }
            None => Vec::new(),
        };
        let from_file = |k: &str| {
            pairs
                .iter()
                .rev()
                .find(|(key, _)| key == k || (k == "kind" && key == "model"))
                .map(|(_, v)| v.clone())
        };
        let kind: ModelKind = args
            .model
            .clone()
            .or_else(|| from_file("kind"))
            .unwrap_or_else(|| "dfcnet".into())
            .parse()?;
        let scale: Scale = args
            .scale
            .clone()
            .or_else(|| from_file("scale"))
            .unwrap_or_else(|| "desk".into())
            .parse()?;
        let mut cfg = RunConfig::new(kind, scale);
        for (k, v) in &pairs {
            if !matches!(k.as_str(), "kind" | "model" | "scale") {
                cfg.set(k, v)?;
            }
        }
        if let Some(n) = args.input_size {
            cfg.model.height = n;
            cfg.model.width = n;
        }
        if let Some(v) = &args.data {
            cfg.data = Some(v.clone());
        }
        if let Some(v) = &args.manifest {
            cfg.manifest = Some(v.clone());
        }
        if let Some(v) = args.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = args.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = args.lr {
            cfg.adam.lr = v;
        }
        if let Some(v) = &args.augment {
            cfg.augment = v.parse()?;
        }
        if let Some(v) = &args.out {
            cfg.out = Some(v.clone());
        }
        if let Some(v) = args.seed {
            cfg.seed = v;
        }
        cfg.timings |= args.timings;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.adam.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        match &self.data {
            None => return Err(Error::Config("no dataset given (use --data or `data = ...`)".into())),
            Some(d) if !d.is_dir() => {
                return Err(Error::Config(format!(
                    "dataset directory {} does not exist",
                    d.display()
                )))
            }
            _ => {}
        }
        if !self.manifest_path().is_file() {
            return Err(Error::Config(format!(
                "manifest {} not found (run `dfkit split` first)",
                self.manifest_path().display()
            )));
        }
        Ok(())
    }

    pub fn data_dir(&self) -> &Path {
        self.data.as_deref().unwrap_or(Path::new("."))
    }

    pub fn manifest_path(&self) -> PathBuf {
        default_manifest(self.data_dir(), self.manifest.as_deref())
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out
            .clone()
            .unwrap_or_else(|| PathBuf::from("runs").join(self.model.kind.name()))
    }

    pub fn fit_config(&self) -> FitConfig {
        FitConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            adam: self.adam,
            seed: sub_seed(self.seed, streams::SHUFFLE),
            dropout_seed: sub_seed(self.seed, streams::DROPOUT),
            augment: AugmentPolicy::new(self.augment, sub_seed(self.seed, streams::AUGMENT)),
            timings: self.timings,
        }
    }
}

pub fn default_manifest(data: &Path, manifest: Option<&Path>) -> PathBuf {
    manifest
        .map(Path::to_path_buf)
        .unwrap_or_else(|| data.join("split.tsv"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairs_skip_comments() {
        let p = parse_pairs("# run\nepochs = 3 # short\n\nmodel=vfdnet\n").unwrap();
        assert_eq!(
            p,
            vec![("epochs".into(), "3".into()), ("model".into(), "vfdnet".into())]
        );
        assert!(parse_pairs("epochs 3\n").is_err());
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("split.tsv"), "a.png\t0\ttrain\n").unwrap();
        let cfg_path = dir.path().join("run.cfg");
        fs::write(
            &cfg_path,
            format!(
                "model = vfdnet\nepochs = 3\nlr = 0.01\ndepth = 2\ndata = {}\n",
                dir.path().display()
            ),
        )
        .unwrap();
        let args = TrainArgs {
            config: Some(cfg_path.clone()),
            epochs: Some(5),
            ..Default::default()
        };
        let cfg = RunConfig::resolve(&args).unwrap();
        assert_eq!(cfg.model.kind, ModelKind::Vfdnet);
        assert_eq!(cfg.model.depth, 2);
        assert_eq!(cfg.epochs, 5);
        assert_eq!(cfg.adam.lr, 0.01);

        fs::write(&cfg_path, "bogus = 1\n").unwrap();
        assert!(matches!(RunConfig::resolve(&args), Err(Error::Config(_))));
    }
}
