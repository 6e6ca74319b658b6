use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Feedforward,
    Convolutional,
    Diffusion,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::Feedforward, Family::Convolutional, Family::Diffusion];

    /// Identifier used in reports, checkpoints and the rating backend.
    pub fn id(self) -> &'static str {
        match self {
            Family::Feedforward => "feedforward",
            Family::Convolutional => "convolutional",
            Family::Diffusion => "diffusion",
        }
    }

    /// Short form accepted on the command line.
    pub fn short(self) -> &'static str {
        match self {
            Family::Feedforward => "ff",
            Family::Convolutional => "conv",
            Family::Diffusion => "diff",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.id() == s || f.short() == s)
            .ok_or_else(|| Error::Config(format!("unknown model family `{s}` (expected ff, conv or diff)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDims {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl InputDims {
    pub fn rgb(height: usize, width: usize) -> Self {
        Self {
            channels: 3,
            height,
            width,
        }
    }

    pub fn numel(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }
}

/// Encoder channel chain; the decoder mirrors it with transposed convolutions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvChain {
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Default for ConvChain {
    fn default() -> Self {
        Self {
            channels: vec![32, 64, 128],
            kernel: 4,
            stride: 2,
            pad: 1,
        }
    }
}

impl ConvChain {
    /// Spatial sizes after each encoder layer, starting from `size`.
    pub fn spatial_chain(&self, size: usize) -> Vec<usize> {
        let mut out = vec![size];
        let mut s = size;
        for _ in &self.channels {
            s = (s + 2 * self.pad).saturating_sub(self.kernel) / self.stride + 1;
            out.push(s);
        }
        out
    }

    /// `(channels, h, w)` of the deepest feature map.
    pub fn bottleneck(&self, input: &InputDims) -> (usize, usize, usize) {
        let h = *self.spatial_chain(input.height).last().expect("non-empty");
        let w = *self.spatial_chain(input.width).last().expect("non-empty");
        (*self.channels.last().expect("validated non-empty"), h, w)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionGeometry {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub denoiser_width: usize,
    pub primary_layers: usize,
    /// Extra hidden blocks appended after the primary layers.
    pub extra_blocks: usize,
    /// Sinusoidal timestep features (in addition to the scalar `t / T`).
    pub time_features: usize,
}

impl Default for DiffusionGeometry {
    fn default() -> Self {
        Self {
            timesteps: 100,
            beta_start: 1e-4,
            beta_end: 0.02,
            denoiser_width: 256,
            primary_layers: 5,
            extra_blocks: 0,
            time_features: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum Architecture {
    Feedforward { hidden: Vec<usize> },
    Convolutional { conv: ConvChain },
    Diffusion { conv: ConvChain, diffusion: DiffusionGeometry },
}

/// Architecture descriptor, persisted verbatim in checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input: InputDims,
    pub latent_dim: usize,
    pub arch: Architecture,
}

pub const DEFAULT_LATENT: usize = 64;
pub const DEFAULT_FEEDFORWARD_HIDDEN: usize = 512;

impl ModelSpec {
    pub fn feedforward(input: InputDims) -> Self {
        Self {
            input,
            latent_dim: DEFAULT_LATENT,
            arch: Architecture::Feedforward {
                hidden: vec![DEFAULT_FEEDFORWARD_HIDDEN],
            },
        }
    }

    pub fn convolutional(input: InputDims) -> Self {
        Self {
            input,
            latent_dim: DEFAULT_LATENT,
            arch: Architecture::Convolutional {
                conv: ConvChain::default(),
            },
        }
    }

    pub fn diffusion(input: InputDims) -> Self {
        Self {
            input,
            latent_dim: DEFAULT_LATENT,
            arch: Architecture::Diffusion {
                conv: ConvChain::default(),
                diffusion: DiffusionGeometry::default(),
            },
        }
    }

    pub fn for_family(family: Family, input: InputDims) -> Self {
        match family {
            Family::Feedforward => Self::feedforward(input),
            Family::Convolutional => Self::convolutional(input),
            Family::Diffusion => Self::diffusion(input),
        }
    }

    pub fn family(&self) -> Family {
        match self.arch {
            Architecture::Feedforward { .. } => Family::Feedforward,
            Architecture::Convolutional { .. } => Family::Convolutional,
            Architecture::Diffusion { .. } => Family::Diffusion,
        }
    }

    pub fn conv_chain(&self) -> Option<&ConvChain> {
        match &self.arch {
            Architecture::Convolutional { conv } | Architecture::Diffusion { conv, .. } => Some(conv),
            Architecture::Feedforward { .. } => None,
        }
    }

    pub fn diffusion_geometry(&self) -> Option<&DiffusionGeometry> {
        match &self.arch {
            Architecture::Diffusion { diffusion, .. } => Some(diffusion),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let InputDims {
            channels,
            height,
            width,
        } = self.input;
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::Config(format!("input dimensions must be positive: {:?}", self.input)));
        }
        if self.latent_dim == 0 {
            return Err(Error::Config("latent_dim must be at least 1".into()));
        }
        match &self.arch {
            Architecture::Feedforward { hidden } => {
                if hidden.iter().any(|&h| h == 0) {
                    return Err(Error::Config("feedforward hidden widths must be positive".into()));
                }
            }
            Architecture::Convolutional { conv } => validate_conv(conv, &self.input)?,
            Architecture::Diffusion { conv, diffusion } => {
                validate_conv(conv, &self.input)?;
                let d = diffusion;
                if d.timesteps == 0 {
                    return Err(Error::Config("diffusion needs at least one timestep".into()));
                }
                if !(0.0 < d.beta_start && d.beta_start <= d.beta_end && d.beta_end < 1.0) {
                    return Err(Error::Config(format!(
                        "beta range must satisfy 0 < start <= end < 1, got {}..{}",
                        d.beta_start, d.beta_end
                    )));
                }
                if d.denoiser_width == 0 || d.primary_layers == 0 {
                    return Err(Error::Config("denoiser needs positive width and layer count".into()));
                }
                if d.time_features % 2 != 0 {
                    return Err(Error::Config("time_features must be even (sin/cos pairs)".into()));
                }
            }
        }
        Ok(())
    }

    /// Parameter count derived from layer shapes alone.
    pub fn parameter_count(&self) -> usize {
        let linear = |i: usize, o: usize| i * o + o;
        let conv = |i: usize, o: usize, k: usize| i * o * k * k + o;
        let n = self.input.numel();
        let z = self.latent_dim;
        let conv_stack = |c: &ConvChain| {
            let mut total = 0;
            let mut prev = self.input.channels;
            for &ch in &c.channels {
                total += conv(prev, ch, c.kernel);
                prev = ch;
            }
            // Decoder mirrors the encoder down to the input channels.
            let mut rev: Vec<usize> = c.channels.iter().rev().copied().collect();
            rev.push(self.input.channels);
            for pair in rev.windows(2) {
                total += conv(pair[0], pair[1], c.kernel);
            }
            let (bc, bh, bw) = c.bottleneck(&self.input);
            (total, bc * bh * bw)
        };
        match &self.arch {
            Architecture::Feedforward { hidden } => {
                let mut widths = vec![n];
                widths.extend(hidden);
                widths.push(z);
                widths.extend(hidden.iter().rev());
                widths.push(n);
                widths.windows(2).map(|w| linear(w[0], w[1])).sum()
            }
            Architecture::Convolutional { conv: c } => {
                let (convs, flat) = conv_stack(c);
                convs + linear(flat, z) + linear(z, flat)
            }
            Architecture::Diffusion { conv: c, diffusion: d } => {
                let (convs, flat) = conv_stack(c);
                let w = d.denoiser_width;
                let hidden = d.primary_layers + d.extra_blocks;
                let denoiser = linear(z + 1 + d.time_features, w) + (hidden - 1) * linear(w, w) + linear(w, z);
                convs + 2 * linear(flat, z) + linear(z, flat) + denoiser
            }
        }
    }
}

fn validate_conv(conv: &ConvChain, input: &InputDims) -> Result<()> {
    if conv.channels.is_empty() || conv.channels.iter().any(|&c| c == 0) {
        return Err(Error::Config("conv channel chain must be non-empty and positive".into()));
    }
    if conv.stride == 0 || conv.kernel == 0 {
        return Err(Error::Config("conv kernel and stride must be positive".into()));
    }
    let factor = conv.stride.pow(conv.channels.len() as u32);
    if input.height % factor != 0 || input.width % factor != 0 {
        return Err(Error::Config(format!(
            "input {}x{} must be divisible by {factor} for {} stride-{} layers",
            input.height,
            input.width,
            conv.channels.len(),
            conv.stride
        )));
    }
    // The mirrored decoder must land exactly on the input size.
    for size in [input.height, input.width] {
        let chain = conv.spatial_chain(size);
        for pair in chain.windows(2) {
            let back = (pair[1] - 1) * conv.stride + conv.kernel;
            if back < 2 * conv.pad || back - 2 * conv.pad != pair[0] {
                return Err(Error::Config(format!(
                    "conv geometry (k={}, s={}, p={}) does not invert {} -> {}",
                    conv.kernel, conv.stride, conv.pad, pair[0], pair[1]
                )));
            }
        }
    }
    Ok(())
}
