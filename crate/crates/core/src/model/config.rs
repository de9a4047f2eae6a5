use std::fmt;

use crate::data::DownsampleMode;
use crate::error::{Error, Result};

/// Which target-side sub-layers receive source activations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ConditioningMode {
    /// Actnorm, 1×1 convolution and coupling are all conditional.
    #[default]
    Full,
    /// Only the couplings see source activations.
    CouplingOnly,
    /// The target stack ignores the source entirely.
    Unconditional,
}

impl ConditioningMode {
    pub const ALL: [ConditioningMode; 3] =
        [ConditioningMode::Full, ConditioningMode::CouplingOnly, ConditioningMode::Unconditional];

    pub fn as_str(self) -> &'static str {
        match self {
            ConditioningMode::Full => "full",
            ConditioningMode::CouplingOnly => "coupling_only",
            ConditioningMode::Unconditional => "unconditional",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.as_str() == s)
    }
}

impl fmt::Display for ConditioningMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Architecture and objective settings shared by both stacks.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub n_blocks: usize,
    /// Flow steps per block.
    pub n_flows: usize,
    /// Side length of the square input images.
    pub image_size: usize,
    pub in_channels: usize,
    /// Width of the hidden layer of every coupling network.
    pub hidden_channels: usize,
    /// Weight of the source log-likelihood in the objective.
    pub lambda: f64,
    pub conditioning: ConditioningMode,
    pub use_boundary: bool,
    pub boundary_mode: DownsampleMode,
    /// Default sampling temperature.
    pub temperature: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_blocks: 4,
            n_flows: 16,
            image_size: 32,
            in_channels: 3,
            hidden_channels: 128,
            lambda: 1e-4,
            conditioning: ConditioningMode::Full,
            use_boundary: false,
            boundary_mode: DownsampleMode::Bilinear,
            temperature: 0.7,
        }
    }
}

pub const MODEL_KEYS: [&str; 10] = [
    "n_blocks",
    "n_flows",
    "image_size",
    "in_channels",
    "hidden_channels",
    "lambda",
    "conditioning_mode",
    "use_boundary",
    "boundary_mode",
    "temperature",
];

impl ModelConfig {
    /// Checks every field and reports all violations at once.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.n_blocks == 0 {
            problems.push("n_blocks must be at least 1".to_string());
        }
        if self.n_flows == 0 {
            problems.push("n_flows must be at least 1".to_string());
        }
        if self.in_channels == 0 {
            problems.push("in_channels must be at least 1".to_string());
        }
        if self.hidden_channels == 0 {
            problems.push("hidden_channels must be at least 1".to_string());
        }
        if self.n_blocks > 0 && self.n_blocks < usize::BITS as usize {
            let unit = 1usize << self.n_blocks;
            if self.image_size == 0 || self.image_size % unit != 0 {
                problems.push(format!("image_size {} must be a positive multiple of 2^n_blocks = {unit}", self.image_size));
            }
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            problems.push(format!("lambda must be finite and > 0, got {}", self.lambda));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            problems.push(format!("temperature must be finite and ≥ 0, got {}", self.temperature));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::config(problems.join("; ")))
        }
    }

    /// Per-sample dimensionality of an image.
    pub fn image_dim(&self) -> usize {
        self.in_channels * self.image_size * self.image_size
    }

    /// Channels, height and width seen by the flow steps of `block`.
    pub fn block_shape(&self, block: usize) -> (usize, usize, usize) {
        // Each earlier block halves the channels kept after its split.
        let c = self.in_channels * 4 * 2usize.pow(block as u32);
        let side = self.image_size >> (block + 1);
        (c, side, side)
    }

    pub fn total_steps(&self) -> usize {
        self.n_blocks * self.n_flows
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("n_blocks", self.n_blocks.to_string()),
            ("n_flows", self.n_flows.to_string()),
            ("image_size", self.image_size.to_string()),
            ("in_channels", self.in_channels.to_string()),
            ("hidden_channels", self.hidden_channels.to_string()),
            ("lambda", format_f64(self.lambda)),
            ("conditioning_mode", self.conditioning.as_str().to_string()),
            ("use_boundary", self.use_boundary.to_string()),
            ("boundary_mode", self.boundary_mode.as_str().to_string()),
            ("temperature", format_f64(self.temperature)),
        ]
    }

    /// Applies one `key = value` setting. Returns `Ok(false)` for keys that
    /// do not belong to the model.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "n_blocks" => self.n_blocks = parse_value(key, value)?,
            "n_flows" => self.n_flows = parse_value(key, value)?,
            "image_size" => self.image_size = parse_value(key, value)?,
            "in_channels" => self.in_channels = parse_value(key, value)?,
            "hidden_channels" => self.hidden_channels = parse_value(key, value)?,
            "lambda" => self.lambda = parse_value(key, value)?,
            "temperature" => self.temperature = parse_value(key, value)?,
            "use_boundary" => self.use_boundary = parse_value(key, value)?,
            "conditioning_mode" => {
                self.conditioning = ConditioningMode::parse(value).ok_or_else(|| {
                    Error::config(format!("conditioning_mode: expected full, coupling_only or unconditional, got {value:?}"))
                })?
            }
            "boundary_mode" => {
                self.boundary_mode = DownsampleMode::parse(value)
                    .ok_or_else(|| Error::config(format!("boundary_mode: expected bilinear or binary, got {value:?}")))?
            }
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Serializes as `key=value` lines.
    pub fn to_text(&self) -> String {
        self.to_pairs().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Parses [`to_text`](Self::to_text) output; unknown keys are errors.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (key, value) in parse_kv(text)? {
            if !cfg.set(&key, &value)? {
                return Err(Error::config(format!("unknown model key {key:?}")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Shortest decimal text that parses back to the same value.
pub fn format_f64(v: f64) -> String {
    format!("{v:?}")
}

pub fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("{key}: cannot parse {value:?} as {}", std::any::type_name::<T>())))
}

/// Splits `key=value` lines, skipping blanks and `#` comments.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("line {}: expected key=value, got {raw:?}", i + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_round_trip() {
        let cfg = ModelConfig::default();
        cfg.validate().unwrap();
        assert_eq!(ModelConfig::from_text(&cfg.to_text()).unwrap(), cfg);
        let odd = ModelConfig { lambda: 0.1 + 0.2, conditioning: ConditioningMode::CouplingOnly, ..cfg };
        assert_eq!(ModelConfig::from_text(&odd.to_text()).unwrap(), odd);
    }

    #[test]
    fn block_shapes_follow_squeeze_and_split() {
        let cfg = ModelConfig::default();
        let shapes: Vec<_> = (0..4).map(|b| cfg.block_shape(b)).collect();
        assert_eq!(shapes, vec![(12, 16, 16), (24, 8, 8), (48, 4, 4), (96, 2, 2)]);
    }

    #[test]
    fn invalid_values_are_all_reported() {
        let cfg = ModelConfig { image_size: 20, lambda: 0.0, ..ModelConfig::default() };
        let Err(Error::Config(msg)) = cfg.validate() else { panic!("expected a config error") };
        assert!(msg.contains("image_size") && msg.contains("lambda"), "{msg}");
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(ModelConfig::from_text("n_blockz=3").is_err());
        assert!(ModelConfig::from_text("n_blocks=three").is_err());
        assert!(ModelConfig::from_text("conditioning_mode=partial").is_err());
        assert!(ModelConfig::from_text("noise").is_err());
        let cfg = ModelConfig::from_text("# comment\n n_flows = 2 \n\nuse_boundary=true").unwrap();
        assert_eq!((cfg.n_flows, cfg.use_boundary), (2, true));
    }
}
