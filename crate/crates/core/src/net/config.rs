use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How many channel groups an NDC layer uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "GroupsRepr", into = "GroupsRepr")]
pub enum Groups {
    /// One group per input channel.
    Channels,
    Fixed(usize),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum GroupsRepr {
    Count(usize),
    Name(String),
}

impl TryFrom<GroupsRepr> for Groups {
    type Error = String;

    fn try_from(r: GroupsRepr) -> std::result::Result<Self, String> {
        match r {
            GroupsRepr::Count(0) => Err("groups must be positive".into()),
            GroupsRepr::Count(n) => Ok(Groups::Fixed(n)),
            GroupsRepr::Name(s) if s == "channels" => Ok(Groups::Channels),
            GroupsRepr::Name(s) => Err(format!("groups must be an integer or \"channels\", got \"{s}\"")),
        }
    }
}

impl From<Groups> for GroupsRepr {
    fn from(g: Groups) -> Self {
        match g {
            Groups::Channels => GroupsRepr::Name("channels".into()),
            Groups::Fixed(n) => GroupsRepr::Count(n),
        }
    }
}

impl Groups {
    pub fn resolve(self, channels: usize) -> usize {
        match self {
            Groups::Channels => channels,
            Groups::Fixed(n) => n,
        }
    }
}

/// NDC layer hyperparameters, shared by every stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NdcLayerConfig {
    pub groups: Groups,
    /// Source channel ratio `R = E / C`.
    pub ratio: f64,
    /// Odd kernel extent per spatial axis.
    pub kernel: usize,
    pub epsilon: f64,
}

impl Default for NdcLayerConfig {
    fn default() -> Self {
        NdcLayerConfig {
            groups: Groups::Channels,
            ratio: 4.0,
            kernel: 3,
            epsilon: 1e-8,
        }
    }
}

/// Channel bookkeeping of one NDC layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NdcDims {
    pub channels: usize,
    pub groups: usize,
    pub sources: usize,
}

impl NdcLayerConfig {
    /// Resolves `G` and `E` for a layer with `channels` inputs.
    pub fn dims(&self, channels: usize) -> Result<NdcDims> {
        let groups = self.groups.resolve(channels);
        if groups == 0 || !channels.is_multiple_of(groups) {
            return Err(Error::Config(format!(
                "ndc groups {groups} must divide the channel count {channels}"
            )));
        }
        if !(self.ratio > 0.0) {
            return Err(Error::Config(format!("ndc ratio must be positive, got {}", self.ratio)));
        }
        let e = self.ratio * channels as f64;
        let sources = e.round() as usize;
        if (e - sources as f64).abs() > 1e-9 || sources == 0 {
            return Err(Error::Config(format!(
                "ndc ratio {} times {channels} channels is not a positive integer",
                self.ratio
            )));
        }
        if !sources.is_multiple_of(groups) {
            return Err(Error::Config(format!(
                "{sources} source channels cannot be split into {groups} groups"
            )));
        }
        Ok(NdcDims {
            channels,
            groups,
            sources,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel.is_multiple_of(2) || self.kernel == 0 {
            return Err(Error::Config(format!(
                "ndc kernel must be odd, got {}",
                self.kernel
            )));
        }
        if !(self.epsilon >= 0.0) {
            return Err(Error::Config("ndc epsilon must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Architecture hyperparameters of the full network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeconverConfig {
    /// 2 for images, 3 for volumes.
    pub spatial_rank: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Number of encoder stages `L`.
    pub depth: usize,
    pub base_channels: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    #[serde(default = "default_cap")]
    pub channel_cap: usize,
    #[serde(default = "default_stem_kernel")]
    pub stem_kernel: usize,
    #[serde(default)]
    pub ndc: NdcLayerConfig,
}

fn default_mlp_ratio() -> usize {
    4
}

fn default_cap() -> usize {
    512
}

fn default_stem_kernel() -> usize {
    3
}

impl DeconverConfig {
    /// The 3D stroke-lesion configuration (two input modalities, one class).
    pub fn isles() -> Self {
        DeconverConfig {
            spatial_rank: 3,
            in_channels: 2,
            out_channels: 1,
            depth: 4,
            base_channels: 64,
            mlp_ratio: 4,
            channel_cap: 512,
            stem_kernel: 3,
            ndc: NdcLayerConfig::default(),
        }
    }

    /// Small 2D network used for desk-scale training.
    pub fn micro() -> Self {
        DeconverConfig {
            spatial_rank: 2,
            in_channels: 1,
            out_channels: 1,
            depth: 2,
            base_channels: 8,
            mlp_ratio: 4,
            channel_cap: 512,
            stem_kernel: 3,
            ndc: NdcLayerConfig::default(),
        }
    }

    /// `C_ℓ = min(C₀·2^ℓ, cap)` for every stage.
    pub fn stage_channels(&self) -> Vec<usize> {
        (0..self.depth)
            .map(|l| {
                self.base_channels
                    .checked_shl(l as u32)
                    .unwrap_or(usize::MAX)
                    .min(self.channel_cap)
            })
            .collect()
    }

    /// Spatial extents must be multiples of this.
    pub fn divisor(&self) -> usize {
        1 << (self.depth - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=3).contains(&self.spatial_rank) {
            return Err(Error::Config(format!(
                "spatial_rank must be 2 or 3, got {}",
                self.spatial_rank
            )));
        }
        if self.depth < 2 {
            return Err(Error::Config(format!("depth must be at least 2, got {}", self.depth)));
        }
        if self.depth > 16 {
            return Err(Error::Config(format!("depth {} is unreasonably large", self.depth)));
        }
        for (name, v) in [
            ("in_channels", self.in_channels),
            ("out_channels", self.out_channels),
            ("base_channels", self.base_channels),
            ("mlp_ratio", self.mlp_ratio),
            ("channel_cap", self.channel_cap),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.stem_kernel.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "stem_kernel must be odd, got {}",
                self.stem_kernel
            )));
        }
        self.ndc.validate()?;
        for c in self.stage_channels() {
            self.ndc.dims(c)?;
        }
        Ok(())
    }

    /// Checks that `spatial` is a valid network input extent.
    pub fn check_input_extent(&self, spatial: &[usize]) -> Result<()> {
        if spatial.len() != self.spatial_rank {
            return Err(Error::InvalidArgument(format!(
                "input has spatial rank {}, network expects {}",
                spatial.len(),
                self.spatial_rank
            )));
        }
        let d = self.divisor();
        if let Some(n) = spatial.iter().find(|&&n| n % d != 0) {
            return Err(Error::InvalidArgument(format!(
                "spatial extent {n} is not divisible by 2^(depth-1) = {d}"
            )));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: DeconverConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_channel_rule_caps_at_512() {
        let mut c = DeconverConfig::isles();
        assert_eq!(c.stage_channels(), vec![64, 128, 256, 512]);
        c.depth = 6;
        c.base_channels = 32;
        assert_eq!(c.stage_channels(), vec![32, 64, 128, 256, 512, 512]);
    }

    #[test]
    fn ndc_dims() {
        let n = NdcLayerConfig::default();
        assert_eq!(
            n.dims(16).unwrap(),
            NdcDims {
                channels: 16,
                groups: 16,
                sources: 64
            }
        );
        let mut n8 = n.clone();
        n8.groups = Groups::Fixed(3);
        assert!(n8.dims(16).is_err());
        n8.groups = Groups::Fixed(1);
        n8.ratio = 0.3;
        assert!(n8.dims(16).is_err());
        n8.ratio = 0.5;
        assert_eq!(n8.dims(16).unwrap().sources, 8);
    }

    #[test]
    fn toml_roundtrip_and_rejections() {
        let c = DeconverConfig::isles();
        assert_eq!(DeconverConfig::from_toml(&c.to_toml()).unwrap(), c);
        let text = "spatial_rank = 2\nin_channels = 1\nout_channels = 1\ndepth = 2\nbase_channels = 4\n[ndc]\ngroups = 2\n";
        let c = DeconverConfig::from_toml(text).unwrap();
        assert_eq!(c.ndc.groups, Groups::Fixed(2));
        assert!(DeconverConfig::from_toml(&format!("{text}bogus = 1\n")).is_err());
        assert!(DeconverConfig::from_toml(&text.replace("depth = 2", "depth = 1")).is_err());
        assert!(DeconverConfig::from_toml(&text.replace("groups = 2", "groups = \"all\"")).is_err());
        assert!(DeconverConfig::from_toml(&text.replace("groups = 2", "groups = 3")).is_err());
    }

    #[test]
    fn input_extent_divisibility() {
        let c = DeconverConfig::isles();
        assert!(c.check_input_extent(&[64, 64, 64]).is_ok());
        let msg = c.check_input_extent(&[64, 60, 64]).unwrap_err().to_string();
        assert!(msg.contains("divisible"), "{msg}");
        assert!(c.check_input_extent(&[64, 64]).is_err());
    }
}
