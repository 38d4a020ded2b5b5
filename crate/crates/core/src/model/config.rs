use std::collections::BTreeMap;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Resolution of the learned constant that starts synthesis.
pub const BASE_RES: usize = 4;

/// Channel count per synthesis resolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelMap(pub BTreeMap<usize, usize>);

impl ChannelMap {
    pub fn get(&self, res: usize) -> Option<usize> {
        self.0.get(&res).copied()
    }
}

impl Serialize for ChannelMap {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let m: BTreeMap<String, usize> = self.0.iter().map(|(k, v)| (k.to_string(), *v)).collect();
        m.serialize(s)
    }
}

impl<'de> Deserialize<'de> for ChannelMap {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let m = BTreeMap::<String, usize>::deserialize(d)?;
        m.into_iter()
            .map(|(k, v)| {
                k.parse::<usize>()
                    .map(|r| (r, v))
                    .map_err(|_| serde::de::Error::custom(format!("bad resolution key {k:?}")))
            })
            .collect::<std::result::Result<BTreeMap<_, _>, _>>()
            .map(ChannelMap)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub max_res: usize,
    pub style_dim: usize,
    #[serde(default = "default_styles_per_level")]
    pub styles_per_level: usize,
    pub channel_map: ChannelMap,
    pub replacement_res: usize,
    #[serde(default = "default_mapping_layers")]
    pub mapping_layers: usize,
    #[serde(default = "default_rgb")]
    pub rgb_channels: usize,
}

fn default_styles_per_level() -> usize {
    2
}
fn default_mapping_layers() -> usize {
    4
}
fn default_rgb() -> usize {
    3
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl GeneratorConfig {
    /// The CPU-sized configuration used throughout the test suite.
    pub fn desk() -> Self {
        Self {
            max_res: 64,
            style_dim: 64,
            styles_per_level: 2,
            channel_map: ChannelMap([(4, 64), (8, 32), (16, 32), (32, 16), (64, 8)].into_iter().collect()),
            replacement_res: 8,
            mapping_layers: 4,
            rgb_channels: 3,
        }
    }

    /// The 1024² layout of the reference face generator (shape arithmetic only).
    pub fn full_scale() -> Self {
        Self {
            max_res: 1024,
            style_dim: 512,
            styles_per_level: 2,
            channel_map: ChannelMap(
                [
                    (4, 512),
                    (8, 512),
                    (16, 512),
                    (32, 512),
                    (64, 512),
                    (128, 256),
                    (256, 128),
                    (512, 64),
                    (1024, 32),
                ]
                .into_iter()
                .collect(),
            ),
            replacement_res: 32,
            mapping_layers: 8,
            rgb_channels: 3,
        }
    }

    pub fn with_replacement(&self, res: usize) -> Self {
        Self {
            replacement_res: res,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let pow2 = |v: usize| v.is_power_of_two();
        if !pow2(self.max_res) || !pow2(self.replacement_res) {
            return Err(Error::Config("resolutions must be powers of two".into()));
        }
        if !(BASE_RES <= self.replacement_res && self.replacement_res < self.max_res) {
            return Err(Error::Config(format!(
                "replacement resolution {} must satisfy {BASE_RES} <= r < {}",
                self.replacement_res, self.max_res
            )));
        }
        if self.styles_per_level == 0 || self.style_dim == 0 {
            return Err(Error::Config("styles_per_level and style_dim must be >= 1".into()));
        }
        if self.rgb_channels == 0 {
            return Err(Error::Config("rgb_channels must be >= 1".into()));
        }
        for res in self.resolutions() {
            match self.channel_map.get(res) {
                Some(c) if c > 0 => {}
                _ => return Err(Error::Config(format!("channel_map has no entry for {res}"))),
            }
        }
        Ok(())
    }

    /// 4, 8, …, max_res.
    pub fn resolutions(&self) -> Vec<usize> {
        let mut v = Vec::new();
        let mut r = BASE_RES;
        while r <= self.max_res {
            v.push(r);
            r *= 2;
        }
        v
    }

    pub fn channels(&self, res: usize) -> usize {
        self.channel_map.get(res).unwrap_or(0)
    }

    /// Styled convolutions at a level: the base level uses one fewer, since
    /// its input is the learned constant.
    pub fn convs_at(&self, res: usize) -> usize {
        if res == BASE_RES {
            self.styles_per_level - 1
        } else {
            self.styles_per_level
        }
    }

    /// Total rows of a style code.
    pub fn total_styles(&self) -> usize {
        self.styles_per_level * self.resolutions().len()
    }

    /// Style rows consumed only by layers up to and including the
    /// replacement resolution.
    pub fn high_style_count(&self) -> usize {
        self.resolutions()
            .into_iter()
            .take_while(|&r| r <= self.replacement_res)
            .map(|r| self.convs_at(r))
            .sum()
    }

    pub fn low_style_count(&self) -> usize {
        self.total_styles() - self.high_style_count()
    }

    /// log2 of each resolution strictly between the replacement level and the
    /// output level: the feature-matching levels.
    pub fn default_fm_levels(&self) -> Vec<u32> {
        self.resolutions()
            .into_iter()
            .filter(|&r| r > self.replacement_res && r < self.max_res)
            .map(|r| r.trailing_zeros())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    #[default]
    Instance,
    None,
}

/// Which condition rasters the spatial encoder sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    #[default]
    Both,
    Sketch,
    Mask,
}

impl Modality {
    pub fn name(self) -> &'static str {
        match self {
            Modality::Both => "both",
            Modality::Sketch => "sketch",
            Modality::Mask => "mask",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub condition_res: usize,
    pub label_classes: usize,
    pub branch_out_channels: usize,
    pub feature_head_blocks: usize,
    pub image_head_blocks: usize,
    #[serde(default)]
    pub norm_kind: NormKind,
    #[serde(default)]
    pub modality: Modality,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl EncoderConfig {
    pub fn desk() -> Self {
        Self {
            condition_res: 64,
            label_classes: 10,
            branch_out_channels: 16,
            feature_head_blocks: 8,
            image_head_blocks: 3,
            norm_kind: NormKind::Instance,
            modality: Modality::Both,
        }
    }

    pub fn full_scale() -> Self {
        Self {
            condition_res: 512,
            label_classes: 19,
            branch_out_channels: 64,
            feature_head_blocks: 40,
            image_head_blocks: 5,
            norm_kind: NormKind::Instance,
            modality: Modality::Both,
        }
    }

    pub fn merged_channels(&self) -> usize {
        2 * self.branch_out_channels
    }

    /// Output width of each active branch; a single modality gets the full
    /// merged width so downstream layers are unchanged.
    pub fn per_branch_channels(&self) -> usize {
        match self.modality {
            Modality::Both => self.branch_out_channels,
            _ => 2 * self.branch_out_channels,
        }
    }

    pub fn validate(&self, generator: &GeneratorConfig) -> Result<()> {
        if self.feature_head_blocks == 0 || self.image_head_blocks == 0 {
            return Err(Error::Config("head block counts must be >= 1".into()));
        }
        if self.branch_out_channels == 0 || self.label_classes < 2 {
            return Err(Error::Config("encoder widths must be positive".into()));
        }
        self.down_steps(generator.replacement_res).map(|_| ())
    }

    /// Number of stride-2 blocks after the input branches.
    pub fn down_steps(&self, replacement_res: usize) -> Result<usize> {
        let branch_res = self.condition_res / 2;
        if !self.condition_res.is_power_of_two()
            || !replacement_res.is_power_of_two()
            || branch_res < replacement_res
        {
            return Err(Error::Config(format!(
                "condition resolution {} is not reducible to {} by stride-2 steps",
                self.condition_res, replacement_res
            )));
        }
        Ok((branch_res / replacement_res).trailing_zeros() as usize)
    }
}
