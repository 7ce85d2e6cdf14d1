//! Projector hyperparameters and the size schedules derived from them.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("invalid value `{value}` for `{key}`: {reason}")]
    InvalidValue {
        key: String,
        value: String,
        reason: String,
    },
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// How the multi-scale pyramid is built.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Symmetric inward crops, ordered from the central region to the global map.
    Cropping,
    /// Adaptive average pooling, ordered from abstract (small) to specific (full).
    Pooling,
}

impl Variant {
    pub const ALL: [Variant; 2] = [Variant::Cropping, Variant::Pooling];
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Cropping => "cropping",
            Variant::Pooling => "pooling",
        })
    }
}

impl FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "cropping" | "crop" => Ok(Variant::Cropping),
            "pooling" | "pool" => Ok(Variant::Pooling),
            other => Err(format!("expected cropping|pooling, got `{other}`")),
        }
    }
}

/// Where the detail integrator's layer norms sit relative to the Q/K/V maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NormPlacement {
    /// `W(LN(x))`
    Pre,
    /// `LN(W(x))`
    Post,
}

impl fmt::Display for NormPlacement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NormPlacement::Pre => "pre",
            NormPlacement::Post => "post",
        })
    }
}

impl FromStr for NormPlacement {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "pre" => Ok(NormPlacement::Pre),
            "post" => Ok(NormPlacement::Post),
            other => Err(format!("expected pre|post, got `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectorConfig {
    pub variant: Variant,
    /// Side `G` of the square patch grid.
    pub grid: usize,
    /// Encoder channel width `C`.
    pub enc_dim: usize,
    /// Spatial token width `C'` (conv output channels).
    pub spatial_dim: usize,
    /// Language model embedding width `D`.
    pub llm_dim: usize,
    /// Inward step per pyramid level; each level shrinks the side by twice this.
    pub crop_stride: usize,
    /// Kernel side of the stride-2 convolution producing the big map.
    pub big_kernel: usize,
    pub dfi_enabled: bool,
    pub conv_bias: bool,
    /// GELU on the conv outputs before fusion.
    pub conv_activation: bool,
    pub qkv_bias: bool,
    pub norm_placement: NormPlacement,
    pub ln_eps: f64,
    pub seed: u64,
}

impl Default for ProjectorConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Cropping,
            grid: 24,
            enc_dim: 1024,
            spatial_dim: 512,
            llm_dim: 64,
            crop_stride: 2,
            big_kernel: 16,
            dfi_enabled: true,
            conv_bias: true,
            conv_activation: false,
            qkv_bias: true,
            norm_placement: NormPlacement::Pre,
            ln_eps: 1e-5,
            seed: 0,
        }
    }
}

/// Stride of the big-map convolution.
pub const BIG_STRIDE: usize = 2;

impl ProjectorConfig {
    /// Full published dimensions, including a 4096-wide language model.
    pub fn full_scale() -> Self {
        Self {
            llm_dim: 4096,
            ..Self::default()
        }
    }

    /// Small dimensions for gradient checks and toy training: two scales (4, 8), a 3×3 big map.
    pub fn desk() -> Self {
        Self {
            grid: 8,
            enc_dim: 8,
            spatial_dim: 8,
            llm_dim: 16,
            crop_stride: 2,
            big_kernel: 4,
            ..Self::default()
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let dims = [
            ("grid", self.grid),
            ("enc_dim", self.enc_dim),
            ("spatial_dim", self.spatial_dim),
            ("llm_dim", self.llm_dim),
            ("crop_stride", self.crop_stride),
            ("big_kernel", self.big_kernel),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(ConfigError::Invalid(format!("{name} must be positive")));
        }
        if self.big_kernel > self.grid {
            return Err(ConfigError::Invalid(format!(
                "big_kernel {} exceeds grid {}",
                self.big_kernel, self.grid
            )));
        }
        if !(self.grid - self.big_kernel).is_multiple_of(BIG_STRIDE) {
            return Err(ConfigError::Invalid(format!(
                "grid - big_kernel = {} is odd; the stride-2 big-map convolution would need padding",
                self.grid - self.big_kernel
            )));
        }
        if self.dfi_enabled && self.spatial_dim < 2 {
            return Err(ConfigError::Invalid(
                "spatial_dim must be at least 2 for layer normalization".into(),
            ));
        }
        if !(self.ln_eps > 0.0) {
            return Err(ConfigError::Invalid("ln_eps must be positive".into()));
        }
        Ok(())
    }

    pub fn scale_sizes(&self) -> Vec<usize> {
        scale_sizes(self.grid, self.crop_stride)
    }

    pub fn scale_count(&self) -> usize {
        self.scale_sizes().len()
    }

    pub fn big_side(&self) -> usize {
        big_side(self.grid, self.big_kernel)
    }

    pub fn patch_count(&self) -> usize {
        self.grid * self.grid
    }

    /// Spatial tokens plus patch tokens.
    pub fn visual_token_count(&self) -> usize {
        self.scale_count() + self.patch_count()
    }

    /// Input width of the spatial MLP.
    pub fn spatial_mlp_in(&self) -> usize {
        if self.dfi_enabled {
            2 * self.spatial_dim
        } else {
            self.spatial_dim
        }
    }

    /// Applies one `key = value` setting. Keys accept `-` or `_` separators.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let norm = key.trim().replace('-', "_");
        let v = value.trim();
        match norm.as_str() {
            "variant" => self.variant = parse(key, v)?,
            "grid" => self.grid = parse(key, v)?,
            "enc_dim" => self.enc_dim = parse(key, v)?,
            "spatial_dim" => self.spatial_dim = parse(key, v)?,
            "llm_dim" => self.llm_dim = parse(key, v)?,
            "crop_stride" => self.crop_stride = parse(key, v)?,
            "big_kernel" => self.big_kernel = parse(key, v)?,
            "dfi" | "dfi_enabled" => self.dfi_enabled = parse_bool(key, v)?,
            "no_dfi" => self.dfi_enabled = !parse_bool(key, v)?,
            "conv_bias" => self.conv_bias = parse_bool(key, v)?,
            "conv_activation" => self.conv_activation = parse_bool(key, v)?,
            "qkv_bias" => self.qkv_bias = parse_bool(key, v)?,
            "norm_placement" => self.norm_placement = parse(key, v)?,
            "ln_eps" => self.ln_eps = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            _ => return Err(ConfigError::UnknownKey(key.trim().to_string())),
        }
        Ok(())
    }
}

/// Parses flat `key = value` text. Blank lines and `#` comments are skipped.
/// Returns the pairs in file order so callers can route non-projector keys.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            });
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            });
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V, ConfigError>
where
    V::Err: fmt::Display,
{
    value.parse().map_err(|e: V::Err| ConfigError::InvalidValue {
        key: key.to_string(),
        value: value.to_string(),
        reason: e.to_string(),
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(ConfigError::InvalidValue {
            key: key.to_string(),
            value: value.to_string(),
            reason: "expected a boolean".into(),
        }),
    }
}

/// Pyramid side lengths: every positive `grid - 2·crop_stride·j`, ascending.
pub fn scale_sizes(grid: usize, crop_stride: usize) -> Vec<usize> {
    if crop_stride == 0 || grid == 0 {
        return Vec::new();
    }
    let step = 2 * crop_stride;
    let mut sizes: Vec<usize> = (0..)
        .map(|j| grid as isize - (step * j) as isize)
        .take_while(|&s| s > 0)
        .map(|s| s as usize)
        .collect();
    sizes.reverse();
    sizes
}

/// Side of the big map produced by a stride-2 valid convolution.
pub fn big_side(grid: usize, big_kernel: usize) -> usize {
    (grid - big_kernel) / BIG_STRIDE + 1
}
