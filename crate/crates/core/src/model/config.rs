use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// The four switchable fusion modules.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Toggles {
    pub aux: bool,
    pub low: bool,
    pub att: bool,
    pub high: bool,
}

impl Toggles {
    pub const ALL_OFF: Toggles = Toggles::new(false, false, false, false);
    pub const ALL_ON: Toggles = Toggles::new(true, true, true, true);

    pub const fn new(aux: bool, low: bool, att: bool, high: bool) -> Self {
        Self { aux, low, att, high }
    }

    /// The eight ablation rows, from image-only to every module on.
    pub fn grid() -> [Toggles; 8] {
        let t = Toggles::new;
        [
            t(false, false, false, false),
            t(true, false, false, false),
            t(true, true, false, false),
            t(true, false, true, false),
            t(true, false, false, true),
            t(true, true, true, false),
            t(true, true, false, true),
            t(true, true, true, true),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if !self.aux && (self.low || self.att || self.high) {
            return Err(Error::Config(format!(
                "toggles `{self}`: low, att and high all consume the aux input and need aux on"
            )));
        }
        Ok(())
    }

    /// Row label in `O`/`×` notation, ordered Aux Low Att High.
    pub fn marks(&self) -> String {
        [self.aux, self.low, self.att, self.high]
            .iter()
            .map(|&b| if b { "O" } else { "×" })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

impl fmt::Display for Toggles {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let on: Vec<&str> = [("aux", self.aux), ("low", self.low), ("att", self.att), ("high", self.high)]
            .iter()
            .filter(|(_, b)| *b)
            .map(|(n, _)| *n)
            .collect();
        if on.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&on.join(","))
        }
    }
}

/// Parses `aux,low,att,high` subsets; `none` or the empty string turns
/// everything off.
impl FromStr for Toggles {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let mut t = Toggles::default();
        let s = s.trim();
        if s.is_empty() || s == "none" {
            return Ok(t);
        }
        for part in s.split(',') {
            match part.trim() {
                "aux" => t.aux = true,
                "low" => t.low = true,
                "att" => t.att = true,
                "high" => t.high = true,
                other => return Err(Error::Config(format!("unknown toggle `{other}` (expected aux, low, att, high)"))),
            }
        }
        t.validate()?;
        Ok(t)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Scalar,
    Distribution,
}

pub const DIST_BUCKETS: usize = 10;

impl HeadKind {
    pub fn outputs(self) -> usize {
        match self {
            HeadKind::Scalar => 1,
            HeadKind::Distribution => DIST_BUCKETS,
        }
    }
}

/// One backbone stage: same-padded conv, normalization, relu, then max-pool
/// with a square window (`pool` ≤ 1 means no pooling).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub out_channels: usize,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    #[serde(default = "default_stride")]
    pub stride: usize,
    #[serde(default = "default_pool")]
    pub pool: usize,
}

fn default_kernel() -> usize {
    3
}
fn default_stride() -> usize {
    1
}
fn default_pool() -> usize {
    2
}

impl StageSpec {
    pub fn new(out_channels: usize) -> Self {
        Self {
            out_channels,
            kernel: 3,
            stride: 1,
            pool: 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    #[serde(rename = "ava-like")]
    AvaLike,
    #[serde(rename = "realad-100")]
    RealAd100,
    #[serde(rename = "realad-500")]
    RealAd500,
}

impl Preset {
    /// `(cbn_hidden, attn_hidden, high_dim)`
    pub fn widths(self) -> (usize, usize, usize) {
        match self {
            Preset::AvaLike => (64, 512, 512),
            Preset::RealAd100 | Preset::RealAd500 => (256, 512, 1024),
        }
    }

    pub fn min_impressions(self) -> Option<u64> {
        match self {
            Preset::AvaLike => None,
            Preset::RealAd100 => Some(100),
            Preset::RealAd500 => Some(500),
        }
    }
}

impl FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ava-like" => Ok(Preset::AvaLike),
            "realad-100" => Ok(Preset::RealAd100),
            "realad-500" => Ok(Preset::RealAd500),
            other => Err(Error::Config(format!(
                "unknown preset `{other}` (expected realad-100, realad-500 or ava-like)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_backbone")]
    pub backbone: Vec<StageSpec>,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    #[serde(default = "default_cbn_hidden")]
    pub cbn_hidden: usize,
    #[serde(default = "default_attn_hidden")]
    pub attn_hidden: usize,
    #[serde(default = "default_high_dim")]
    pub high_dim: usize,
    #[serde(default)]
    pub toggles: Toggles,
    #[serde(default = "default_head")]
    pub head: HeadKind,
    pub dim_aux: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_backbone() -> Vec<StageSpec> {
    [16, 32, 64, 64].into_iter().map(StageSpec::new).collect()
}
fn default_image_size() -> usize {
    64
}
fn default_cbn_hidden() -> usize {
    256
}
fn default_attn_hidden() -> usize {
    512
}
fn default_high_dim() -> usize {
    1024
}
fn default_head() -> HeadKind {
    HeadKind::Scalar
}

pub const IMAGE_CHANNELS: usize = 3;

impl ModelConfig {
    /// Default backbone and Real-Ad widths with every module on.
    pub fn new(dim_aux: usize) -> Self {
        Self {
            backbone: default_backbone(),
            image_size: default_image_size(),
            cbn_hidden: default_cbn_hidden(),
            attn_hidden: default_attn_hidden(),
            high_dim: default_high_dim(),
            toggles: Toggles::ALL_ON,
            head: HeadKind::Scalar,
            dim_aux,
            seed: 0,
        }
    }

    pub fn with_preset(mut self, preset: Preset) -> Self {
        (self.cbn_hidden, self.attn_hidden, self.high_dim) = preset.widths();
        self
    }

    pub fn with_toggles(mut self, toggles: Toggles) -> Self {
        self.toggles = toggles;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.toggles.validate()?;
        if self.backbone.is_empty() {
            return Err(Error::Config("backbone needs at least one stage".into()));
        }
        if self.toggles.aux && self.dim_aux == 0 {
            return Err(Error::Config("aux is on but dim_aux is 0".into()));
        }
        for (name, v) in [
            ("cbn_hidden", self.cbn_hidden),
            ("attn_hidden", self.attn_hidden),
            ("high_dim", self.high_dim),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        self.feature_map_size()?;
        Ok(())
    }

    /// Spatial side and channel count after the last stage.
    pub fn feature_map_size(&self) -> Result<(usize, usize)> {
        let mut side = self.image_size;
        let mut channels = IMAGE_CHANNELS;
        for (i, s) in self.backbone.iter().enumerate() {
            if s.out_channels == 0 || s.kernel == 0 || s.kernel % 2 == 0 || s.stride == 0 {
                return Err(Error::Config(format!(
                    "backbone stage {i}: channels/stride must be positive and the kernel odd, got {s:?}"
                )));
            }
            side = (side - 1) / s.stride + 1;
            if s.pool > 1 {
                if side < s.pool {
                    return Err(Error::Config(format!(
                        "backbone stage {i}: {side}x{side} map is smaller than the {}x{} pool for image_size {}",
                        s.pool, s.pool, self.image_size
                    )));
                }
                side = (side - s.pool) / s.pool + 1;
            }
            channels = s.out_channels;
        }
        Ok((side, channels))
    }
}
