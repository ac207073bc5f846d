//! The run configuration file.
//!
//! ```toml
//! [network]
//! preset = "micro"        # "micro" or "isles"; fields below override it
//! base_channels = 8
//!
//! [ndc]
//! groups = "channels"
//! ratio = 4.0
//!
//! [train]
//! steps = 300
//! batch_size = 8
//!
//! [data]
//! samples = 8             # synthetic data, unless `images` is set
//! spatial = [32, 32]
//!
//! [io]
//! output_dir = "run"
//! ```

use std::path::{Path, PathBuf};

use deconver_core::net::{DeconverConfig, NdcLayerConfig};
use deconver_core::train::{synth_dataset, Sample, TrainConfig};
use deconver_core::tensor::io;
use deconver_core::{Error, Result, Scalar};
use serde::Deserialize;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub network: NetworkSection,
    pub ndc: Option<NdcLayerConfig>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub io: IoSection,
    /// Initialisation seed of the network weights.
    #[serde(skip)]
    pub init_seed: u64,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    pub preset: Option<String>,
    pub spatial_rank: Option<usize>,
    pub in_channels: Option<usize>,
    pub out_channels: Option<usize>,
    pub depth: Option<usize>,
    pub base_channels: Option<usize>,
    pub mlp_ratio: Option<usize>,
    pub channel_cap: Option<usize>,
    pub stem_kernel: Option<usize>,
    pub init_seed: Option<u64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub samples: usize,
    pub spatial: Vec<usize>,
    pub seed: u64,
    /// DCT1 image files; replaces the synthetic set when nonempty.
    pub images: Vec<PathBuf>,
    /// DCT1 mask files, one per image.
    pub masks: Vec<PathBuf>,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            samples: 8,
            spatial: vec![32, 32],
            seed: 0,
            images: Vec::new(),
            masks: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoSection {
    pub output_dir: PathBuf,
    pub log: String,
    pub checkpoint: String,
    pub best_checkpoint: String,
}

impl Default for IoSection {
    fn default() -> Self {
        IoSection {
            output_dir: PathBuf::from("run"),
            log: "train_log.csv".into(),
            checkpoint: "final.dcvw".into(),
            best_checkpoint: "best.dcvw".into(),
        }
    }
}

impl RunConfig {
    /// Parses and validates a configuration document. Relative data paths
    /// are resolved against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for p in cfg.data.images.iter_mut().chain(cfg.data.masks.iter_mut()) {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if cfg.io.output_dir.is_relative() {
            cfg.io.output_dir = base.join(&cfg.io.output_dir);
        }
        cfg.init_seed = cfg.network.init_seed.unwrap_or(0);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Overrides every seed in the document.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.train.seed = seed;
        self.data.seed = seed;
        self.init_seed = seed;
        self
    }

    pub fn network(&self) -> Result<DeconverConfig> {
        let n = &self.network;
        let mut cfg = match n.preset.as_deref() {
            None | Some("micro") => DeconverConfig::micro(),
            Some("isles") => DeconverConfig::isles(),
            Some(other) => {
                return Err(Error::Config(format!(
                    "unknown network preset \"{other}\" (expected \"micro\" or \"isles\")"
                )))
            }
        };
        let set = |dst: &mut usize, src: Option<usize>| {
            if let Some(v) = src {
                *dst = v;
            }
        };
        set(&mut cfg.spatial_rank, n.spatial_rank);
        set(&mut cfg.in_channels, n.in_channels);
        set(&mut cfg.out_channels, n.out_channels);
        set(&mut cfg.depth, n.depth);
        set(&mut cfg.base_channels, n.base_channels);
        set(&mut cfg.mlp_ratio, n.mlp_ratio);
        set(&mut cfg.channel_cap, n.channel_cap);
        set(&mut cfg.stem_kernel, n.stem_kernel);
        if let Some(ndc) = &self.ndc {
            cfg.ndc = ndc.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        let net = self.network()?;
        self.train.validate()?;
        let d = &self.data;
        if d.images.len() != d.masks.len() {
            return Err(Error::Config(format!(
                "data.images has {} entries but data.masks has {}",
                d.images.len(),
                d.masks.len()
            )));
        }
        if d.images.is_empty() {
            if d.samples == 0 {
                return Err(Error::Config("data.samples must be positive".into()));
            }
            net.check_input_extent(&d.spatial)
                .map_err(|e| Error::Config(format!("data.spatial: {e}")))?;
        }
        if let Some(p) = &self.train.patch {
            net.check_input_extent(p)
                .map_err(|e| Error::Config(format!("train.patch: {e}")))?;
            if d.images.is_empty() && p.iter().zip(&d.spatial).any(|(a, b)| a > b) {
                return Err(Error::Config("train.patch exceeds data.spatial".into()));
            }
        }
        Ok(())
    }

    /// Loads the training set described by the `data` section.
    pub fn dataset<T: Scalar>(&self) -> Result<Vec<Sample<T>>> {
        let d = &self.data;
        if d.images.is_empty() {
            return synth_dataset(d.samples, &d.spatial, d.seed);
        }
        let net = self.network()?;
        d.images
            .iter()
            .zip(&d.masks)
            .map(|(i, m)| {
                let image = io::read(i)?.into_tensor::<T>();
                let mask = io::read(m)?.into_tensor::<T>();
                if image.spatial() != mask.spatial() {
                    return Err(Error::Config(format!(
                        "{} and {} differ in spatial extent",
                        i.display(),
                        m.display()
                    )));
                }
                if image.channels() != net.in_channels || mask.channels() != net.out_channels {
                    return Err(Error::Config(format!(
                        "{}: channel counts do not match the network",
                        i.display()
                    )));
                }
                Ok(Sample { image, mask })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<RunConfig> {
        RunConfig::parse(text, Path::new("/tmp"))
    }

    #[test]
    fn empty_document_is_the_micro_run() {
        let cfg = parse("").unwrap();
        assert_eq!(cfg.network().unwrap(), DeconverConfig::micro());
        assert_eq!(cfg.train, TrainConfig::default());
        assert_eq!(cfg.io.output_dir, Path::new("/tmp/run"));
    }

    #[test]
    fn overrides_apply_on_top_of_preset() {
        let cfg = parse("[network]\npreset = \"isles\"\ndepth = 3\n[ndc]\ngroups = 8\n[data]\nspatial = [16, 16, 16]\n").unwrap();
        let net = cfg.network().unwrap();
        assert_eq!(net.depth, 3);
        assert_eq!(net.in_channels, 2);
        assert_eq!(net.ndc.groups, deconver_core::net::Groups::Fixed(8));
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        for text in [
            "[network]\nwidth = 3\n",
            "[train]\nlr = 0.1\n",
            "[extra]\n",
            "[ndc]\nkernel = 4\n",
            "[ndc]\ngroups = 3\n",
            "[data]\nspatial = [31, 32]\n",
            "[train]\nsteps = 0\n",
            "[train]\npatch = [64, 64]\n",
            "[network]\npreset = \"large\"\n",
            "[data]\nimages = [\"a.dct\"]\n",
        ] {
            assert!(matches!(parse(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn seed_override_reaches_every_section() {
        let cfg = parse("[train]\nseed = 3\n").unwrap().with_seed(11);
        assert_eq!((cfg.train.seed, cfg.data.seed, cfg.init_seed), (11, 11, 11));
    }
}
