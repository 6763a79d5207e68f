//! Convolutional sentence encoders producing `c x L` feature maps.
//!
//! * `Msnn`: parallel same-padded convolution branches of different odd
//!   widths (default 1, 3 and 5) applied to the embedded sentence, with the
//!   branch outputs stacked channel-wise.
//! * `SingleCnn`: one convolution layer (width 3 by default).
//! * `MultiCnn`: two stacked convolution layers; the second reads the first
//!   layer's activations, so two width-3 layers reach a 5-token window.
//!
//! Columns past a sentence's true length are padding. They are never read
//! by a convolution and come out exactly zero, at every layer.

use crate::error::{Error, Result};
use crate::tensor::{Activation, ParamId, ParamStore, ReduceAxis, Tape, Tensor, Var};
use rand::Rng;
use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderVariant {
    Msnn,
    SingleCnn,
    MultiCnn,
}

impl fmt::Display for EncoderVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EncoderVariant::Msnn => "msnn",
            EncoderVariant::SingleCnn => "single_cnn",
            EncoderVariant::MultiCnn => "multi_cnn",
        })
    }
}

impl FromStr for EncoderVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "msnn" => Ok(EncoderVariant::Msnn),
            "single_cnn" => Ok(EncoderVariant::SingleCnn),
            "multi_cnn" => Ok(EncoderVariant::MultiCnn),
            other => Err(Error::Config(format!("unknown encoder variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BranchSpec {
    pub width: usize,
    pub channels: usize,
}

/// Parses `"1:100,3:100,5:100"` (width:channels pairs).
pub fn parse_branches(s: &str) -> Result<Vec<BranchSpec>> {
    s.split(',')
        .map(|part| {
            let (w, c) = part
                .trim()
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("branch {part:?} is not width:channels")))?;
            let parse = |x: &str| {
                x.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Config(format!("bad number {x:?} in branch spec")))
            };
            Ok(BranchSpec {
                width: parse(w)?,
                channels: parse(c)?,
            })
        })
        .collect()
}

pub fn format_branches(branches: &[BranchSpec]) -> String {
    branches
        .iter()
        .map(|b| format!("{}:{}", b.width, b.channels))
        .collect::<Vec<_>>()
        .join(",")
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub variant: EncoderVariant,
    /// Branches of the multi-size network.
    pub branches: Vec<BranchSpec>,
    /// Filter width of the single/multi-layer CNNs.
    pub width: usize,
    /// Channel count of the single/multi-layer CNNs.
    pub channels: usize,
    pub layers: usize,
    pub activation: Activation,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            variant: EncoderVariant::Msnn,
            branches: [1, 3, 5]
                .iter()
                .map(|&width| BranchSpec {
                    width,
                    channels: 100,
                })
                .collect(),
            width: 3,
            channels: 300,
            layers: 2,
            activation: Activation::Relu,
        }
    }
}

impl EncoderConfig {
    pub fn msnn(branches: Vec<BranchSpec>) -> Self {
        Self {
            variant: EncoderVariant::Msnn,
            branches,
            ..Self::default()
        }
    }

    pub fn single_cnn(width: usize, channels: usize) -> Self {
        Self {
            variant: EncoderVariant::SingleCnn,
            width,
            channels,
            ..Self::default()
        }
    }

    pub fn multi_cnn(width: usize, channels: usize) -> Self {
        Self {
            variant: EncoderVariant::MultiCnn,
            width,
            channels,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let odd = |w: usize| w > 0 && w % 2 == 1;
        match self.variant {
            EncoderVariant::Msnn => {
                if self.branches.is_empty() {
                    return Err(Error::Config("msnn needs at least one branch".into()));
                }
                for (i, b) in self.branches.iter().enumerate() {
                    if !odd(b.width) {
                        return Err(Error::Config(format!(
                            "branch width {} must be a positive odd number",
                            b.width
                        )));
                    }
                    if b.channels == 0 {
                        return Err(Error::Config(format!("branch {} has zero channels", b.width)));
                    }
                    if self.branches[..i].iter().any(|o| o.width == b.width) {
                        return Err(Error::Config(format!("duplicate branch width {}", b.width)));
                    }
                }
            }
            EncoderVariant::SingleCnn | EncoderVariant::MultiCnn => {
                if !odd(self.width) {
                    return Err(Error::Config(format!(
                        "filter width {} must be a positive odd number",
                        self.width
                    )));
                }
                if self.channels == 0 {
                    return Err(Error::Config("encoder needs at least one channel".into()));
                }
                if self.variant == EncoderVariant::MultiCnn && !(1..=2).contains(&self.layers) {
                    return Err(Error::Config(format!(
                        "multi_cnn supports 1 or 2 layers, got {}",
                        self.layers
                    )));
                }
            }
        }
        Ok(())
    }

    /// Rows of the produced feature map.
    pub fn total_channels(&self) -> usize {
        match self.variant {
            EncoderVariant::Msnn => self.branches.iter().map(|b| b.channels).sum(),
            _ => self.channels,
        }
    }

    /// `(width, in_channels, out_channels, name)` for each convolution, in
    /// parameter order.
    fn layer_shapes(&self, embed_dim: usize) -> Vec<(usize, usize, usize, String)> {
        match self.variant {
            EncoderVariant::Msnn => self
                .branches
                .iter()
                .map(|b| (b.width, embed_dim, b.channels, format!("encoder.branch_k{}", b.width)))
                .collect(),
            EncoderVariant::SingleCnn => {
                vec![(self.width, embed_dim, self.channels, "encoder.conv".to_string())]
            }
            EncoderVariant::MultiCnn => (0..self.layers)
                .map(|i| {
                    let input = if i == 0 { embed_dim } else { self.channels };
                    (self.width, input, self.channels, format!("encoder.layer{}", i + 1))
                })
                .collect(),
        }
    }
}

/// Filters `[c, d, k]` and bias `[c]` of one convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvLayer {
    pub filters: ParamId,
    pub bias: ParamId,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderParams {
    pub layers: Vec<ConvLayer>,
}

/// Registers the encoder's convolutions, drawing every weight and bias
/// uniformly from `[-sqrt(1/(d k)), sqrt(1/(d k))]`.
pub fn init_encoder<R: Rng + ?Sized>(
    store: &mut ParamStore,
    config: &EncoderConfig,
    embed_dim: usize,
    rng: &mut R,
) -> Result<EncoderParams> {
    config.validate()?;
    let mut layers = Vec::new();
    for (width, input, output, name) in config.layer_shapes(embed_dim) {
        let bound = (1.0 / (input * width) as f64).sqrt();
        let filters = store.add(
            format!("{name}.filters"),
            Tensor::uniform(vec![output, input, width], bound, rng)?,
        )?;
        let bias = store.add(format!("{name}.bias"), Tensor::uniform(vec![output], bound, rng)?)?;
        layers.push(ConvLayer {
            filters,
            bias,
            width,
        });
    }
    Ok(EncoderParams { layers })
}

/// Looks up an existing encoder's parameters by name.
pub fn bind_encoder(store: &ParamStore, config: &EncoderConfig, embed_dim: usize) -> Result<EncoderParams> {
    config.validate()?;
    let mut layers = Vec::new();
    for (width, input, output, name) in config.layer_shapes(embed_dim) {
        let find = |suffix: &str, shape: &[usize]| {
            let full = format!("{name}.{suffix}");
            let id = store
                .id_of(&full)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {full}")))?;
            if store.get(id).shape() != shape {
                return Err(Error::Checkpoint(format!(
                    "parameter {full} has shape {:?}, expected {shape:?}",
                    store.get(id).shape()
                )));
            }
            Ok(id)
        };
        layers.push(ConvLayer {
            filters: find("filters", &[output, input, width])?,
            bias: find("bias", &[output])?,
            width,
        });
    }
    Ok(EncoderParams { layers })
}

/// A `c x L` feature map and the number of leading columns that hold real
/// tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureMap {
    pub values: Var,
    pub len: usize,
}

/// `activation(conv1d_same(input))` for one convolution, over the first
/// `len` columns.
pub fn branch_forward(
    tape: &mut Tape,
    store: &ParamStore,
    input: Var,
    len: usize,
    layer: &ConvLayer,
    activation: Activation,
) -> Result<Var> {
    let w = tape.param(store, layer.filters);
    let b = tape.param(store, layer.bias);
    let pre = tape.conv1d_same(input, w, b, Some(len))?;
    let out = tape.activation(pre, activation)?;
    if activation.apply(0.0) == 0.0 {
        return Ok(out);
    }
    let (c, l) = (tape.shape(out)[0], tape.shape(out)[1]);
    let mask = (0..c * l)
        .map(|i| if i % l < len { 1.0 } else { 0.0 })
        .collect();
    tape.scale(out, mask)
}

pub fn encode_feature_map(
    tape: &mut Tape,
    store: &ParamStore,
    embedded: Var,
    len: usize,
    config: &EncoderConfig,
    params: &EncoderParams,
) -> Result<FeatureMap> {
    let act = config.activation;
    let values = match config.variant {
        EncoderVariant::Msnn => {
            let outs = params
                .layers
                .iter()
                .map(|layer| branch_forward(tape, store, embedded, len, layer, act))
                .collect::<Result<Vec<_>>>()?;
            if outs.len() == 1 {
                outs[0]
            } else {
                tape.concat(&outs, 0)?
            }
        }
        EncoderVariant::SingleCnn => branch_forward(tape, store, embedded, len, &params.layers[0], act)?,
        EncoderVariant::MultiCnn => {
            let mut h = embedded;
            for layer in &params.layers {
                h = branch_forward(tape, store, h, len, layer, act)?;
            }
            h
        }
    };
    if tape.shape(values)[0] != config.total_channels() {
        return Err(Error::dim(
            "encode_feature_map",
            tape.shape(values),
            &[config.total_channels()],
        ));
    }
    Ok(FeatureMap { values, len })
}

/// Per-channel maximum over the unpadded columns.
pub fn pool_encoding(tape: &mut Tape, fm: &FeatureMap) -> Result<Var> {
    Ok(tape.max_reduce(fm.values, ReduceAxis::Rows, Some(fm.len))?.0)
}
