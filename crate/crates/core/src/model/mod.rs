//! Network definitions: the FCN ladders over spectrogram input, the
//! frame-based MFCC network, and reduced desk-scale variants of each for
//! quick experiments on short clips.
//!
//! A [`ModelSpec`] is a flat list of blocks with a canonical one-line-per-
//! block text form; [`shape_trace`] and [`param_count`] work on the spec
//! alone, and [`Model::build`](network::Model::build) turns it into live
//! tensors.

mod checkpoint;
mod network;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
pub use network::Model;

use std::fmt;

use crate::audio::FeatureKind;
use crate::tensor::TensorError;

/// One entry in a model's block list.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BlockSpec {
    /// Same-padded square convolution raising the depth to `channels`.
    Conv { channels: usize, kernel: usize },
    /// Batch normalization over the preceding layer's channels.
    Bn,
    Relu,
    /// Non-overlapping max pool (floor semantics).
    Pool { ph: usize, pw: usize },
    Dropout { rate: f64 },
    /// Per-frame affine over the band axis, realized as a 1x1 convolution.
    Dense { units: usize },
    /// Global max over the remaining time axis.
    TimePool,
    /// Output layer: 1x1 convolution to `units` scores plus sigmoid.
    Head { units: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub name: String,
    pub input_kind: FeatureKind,
    pub input_bands: usize,
    pub input_frames: usize,
    pub blocks: Vec<BlockSpec>,
    pub output_dim: usize,
}

/// How the bands-by-frames input maps onto the `[n, c, h, w]` tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    /// One input plane; bands and frames are the two spatial axes.
    Plane,
    /// Bands become channels over a `1 x frames` map; each frame is
    /// transformed independently until the time pool.
    PerFrame,
}

#[derive(Debug)]
pub enum ModelError {
    UnknownModel(String),
    InvalidSpec(String),
    InvalidLadder { block: usize, detail: String },
    KindMismatch { expected: FeatureKind, got: FeatureKind },
    ShapeMismatch { expected: (usize, usize), got: (usize, usize) },
    Parse { line: usize, detail: String },
    Tensor(TensorError),
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::UnknownModel(name) => write!(
                f,
                "unknown model '{name}'; valid names: {}",
                MODEL_NAMES.join(", ")
            ),
            ModelError::InvalidSpec(detail) => write!(f, "invalid model spec: {detail}"),
            ModelError::InvalidLadder { block, detail } => {
                write!(f, "pooling ladder fails at block {block}: {detail}")
            }
            ModelError::KindMismatch { expected, got } => {
                write!(f, "feature kind mismatch: model wants {expected}, got {got}")
            }
            ModelError::ShapeMismatch { expected, got } => write!(
                f,
                "input shape mismatch: model wants {}x{}, got {}x{}",
                expected.0, expected.1, got.0, got.1
            ),
            ModelError::Parse { line, detail } => {
                write!(f, "model text line {line}: {detail}")
            }
            ModelError::Tensor(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for ModelError {}

impl From<TensorError> for ModelError {
    fn from(e: TensorError) -> Self {
        ModelError::Tensor(e)
    }
}

/// Names accepted by [`model_spec`].
pub const MODEL_NAMES: &[&str] = &[
    "fcn3", "fcn4", "fcn5", "fcn6", "fcn7", "fcn4-stft", "mfcc4", "fcn4s", "fcn4s-stft",
    "mfcc4s",
];

/// Looks up a named architecture with `output_dim` output units.
pub fn model_spec(name: &str, output_dim: usize) -> Result<ModelSpec, ModelError> {
    let spec = match name {
        "fcn3" => fcn_spec(3, FeatureKind::LogMel)?,
        "fcn4" => fcn_spec(4, FeatureKind::LogMel)?,
        "fcn5" => fcn_spec(5, FeatureKind::LogMel)?,
        "fcn6" => fcn_spec(6, FeatureKind::LogMel)?,
        "fcn7" => fcn_spec(7, FeatureKind::LogMel)?,
        "fcn4-stft" => fcn_spec(4, FeatureKind::LogStft)?,
        "mfcc4" => mfcc_spec(),
        "fcn4s" => ladder_spec(
            "fcn4s",
            FeatureKind::LogMel,
            96,
            256,
            &[16, 24, 32, 64],
            &[(2, 4), (4, 4), (3, 4), (4, 4)],
            0,
        ),
        "fcn4s-stft" => ladder_spec(
            "fcn4s-stft",
            FeatureKind::LogStft,
            129,
            256,
            &[16, 24, 32, 64],
            &[(3, 4), (4, 4), (3, 4), (3, 4)],
            0,
        ),
        "mfcc4s" => frame_spec("mfcc4s", 90, 256, &[64, 96, 128]),
        _ => return Err(ModelError::UnknownModel(name.to_string())),
    };
    let spec = spec.with_output_dim(output_dim);
    spec.validate()?;
    Ok(spec)
}

/// The n-layer fully convolutional ladder on full-length spectrograms.
/// Depths 6 and 7 extend the 5-layer ladder with 1x1 convolution blocks;
/// STFT input is defined for depth 4 only, with adjusted frequency pools.
pub fn fcn_spec(n_layers: usize, input_kind: FeatureKind) -> Result<ModelSpec, ModelError> {
    let (channels, pools): (&[usize], &[(usize, usize)]) = match (n_layers, input_kind) {
        (3, FeatureKind::LogMel) => (&[256, 768, 2048], &[(3, 5), (4, 16), (8, 17)]),
        (4, FeatureKind::LogMel) => {
            (&[128, 384, 768, 2048], &[(2, 4), (4, 5), (3, 8), (4, 8)])
        }
        (5..=7, FeatureKind::LogMel) => (
            &[128, 256, 512, 1024, 2048],
            &[(2, 4), (2, 4), (2, 4), (3, 5), (4, 4)],
        ),
        (4, FeatureKind::LogStft) => {
            (&[128, 384, 768, 2048], &[(3, 4), (4, 5), (3, 8), (3, 8)])
        }
        (_, FeatureKind::LogStft) => {
            return Err(ModelError::InvalidSpec(format!(
                "stft ladder is defined for 4 layers, not {n_layers}"
            )))
        }
        (_, FeatureKind::MfccStack) => {
            return Err(ModelError::InvalidSpec(
                "mfcc input takes the frame-based network, not a conv ladder".into(),
            ))
        }
        _ => {
            return Err(ModelError::InvalidSpec(format!(
                "no {n_layers}-layer ladder; supported depths are 3..=7"
            )))
        }
    };
    let bands = match input_kind {
        FeatureKind::LogMel => 96,
        FeatureKind::LogStft => 129,
        FeatureKind::MfccStack => unreachable!(),
    };
    let name = match input_kind {
        FeatureKind::LogStft => format!("fcn{n_layers}-stft"),
        _ => format!("fcn{n_layers}"),
    };
    Ok(ladder_spec(
        &name,
        input_kind,
        bands,
        1366,
        channels,
        pools,
        n_layers.saturating_sub(5),
    ))
}

/// The frame-based MFCC network: three per-frame dense layers, a global max
/// over time, then the sigmoid head. Dropout sits after the time pool.
pub fn mfcc_spec() -> ModelSpec {
    frame_spec("mfcc4", 90, 1366, &[256, 512, 1024])
}

fn ladder_spec(
    name: &str,
    kind: FeatureKind,
    bands: usize,
    frames: usize,
    channels: &[usize],
    pools: &[(usize, usize)],
    n_one_by_one: usize,
) -> ModelSpec {
    assert_eq!(channels.len(), pools.len());
    let mut blocks = Vec::new();
    for (&ch, &(ph, pw)) in channels.iter().zip(pools) {
        blocks.push(BlockSpec::Conv { channels: ch, kernel: 3 });
        blocks.push(BlockSpec::Bn);
        blocks.push(BlockSpec::Relu);
        blocks.push(BlockSpec::Pool { ph, pw });
        blocks.push(BlockSpec::Dropout { rate: 0.5 });
    }
    for _ in 0..n_one_by_one {
        blocks.push(BlockSpec::Conv { channels: 1024, kernel: 1 });
        blocks.push(BlockSpec::Bn);
        blocks.push(BlockSpec::Relu);
    }
    blocks.push(BlockSpec::Head { units: 50 });
    ModelSpec {
        name: name.to_string(),
        input_kind: kind,
        input_bands: bands,
        input_frames: frames,
        blocks,
        output_dim: 50,
    }
}

fn frame_spec(name: &str, bands: usize, frames: usize, units: &[usize]) -> ModelSpec {
    let mut blocks = Vec::new();
    for &u in units {
        blocks.push(BlockSpec::Dense { units: u });
        blocks.push(BlockSpec::Bn);
        blocks.push(BlockSpec::Relu);
    }
    blocks.push(BlockSpec::TimePool);
    blocks.push(BlockSpec::Dropout { rate: 0.5 });
    blocks.push(BlockSpec::Head { units: 50 });
    ModelSpec {
        name: name.to_string(),
        input_kind: FeatureKind::MfccStack,
        input_bands: bands,
        input_frames: frames,
        blocks,
        output_dim: 50,
    }
}

impl ModelSpec {
    pub fn with_output_dim(mut self, k: usize) -> ModelSpec {
        self.output_dim = k;
        if let Some(BlockSpec::Head { units }) = self.blocks.last_mut() {
            *units = k;
        }
        self
    }

    pub fn layout(&self) -> Layout {
        if self.blocks.iter().any(|b| matches!(b, BlockSpec::Dense { .. })) {
            Layout::PerFrame
        } else {
            Layout::Plane
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.output_dim == 0 {
            return Err(ModelError::InvalidSpec("output_dim must be positive".into()));
        }
        if self.input_bands == 0 || self.input_frames == 0 {
            return Err(ModelError::InvalidSpec("input dimensions must be positive".into()));
        }
        match self.blocks.last() {
            Some(BlockSpec::Head { units }) if *units == self.output_dim => {}
            Some(BlockSpec::Head { units }) => {
                return Err(ModelError::InvalidSpec(format!(
                    "head has {units} units but output_dim is {}",
                    self.output_dim
                )))
            }
            _ => return Err(ModelError::InvalidSpec("block list must end with a head".into())),
        }
        let heads = self
            .blocks
            .iter()
            .filter(|b| matches!(b, BlockSpec::Head { .. }))
            .count();
        if heads != 1 {
            return Err(ModelError::InvalidSpec(format!("{heads} heads, want exactly 1")));
        }
        let has_conv = self.blocks.iter().any(
            |b| matches!(b, BlockSpec::Conv { kernel, .. } if *kernel > 1),
        );
        let has_dense = self.blocks.iter().any(|b| matches!(b, BlockSpec::Dense { .. }));
        if has_conv && has_dense {
            return Err(ModelError::InvalidSpec(
                "conv ladder and per-frame dense layers cannot mix".into(),
            ));
        }
        match self.blocks.first() {
            Some(BlockSpec::Conv { kernel, .. }) if *kernel % 2 == 1 => {}
            Some(BlockSpec::Dense { .. }) => {}
            _ => {
                return Err(ModelError::InvalidSpec(
                    "first block must be a conv or dense layer".into(),
                ))
            }
        }
        for b in &self.blocks {
            match *b {
                BlockSpec::Conv { channels, kernel } => {
                    if channels == 0 || kernel == 0 || kernel % 2 == 0 {
                        return Err(ModelError::InvalidSpec(format!(
                            "conv wants positive channels and an odd kernel, got {channels} / {kernel}"
                        )));
                    }
                }
                BlockSpec::Pool { ph, pw } => {
                    if ph == 0 || pw == 0 {
                        return Err(ModelError::InvalidSpec("pool sizes must be positive".into()));
                    }
                }
                BlockSpec::Dropout { rate } => {
                    if !(0.0..1.0).contains(&rate) {
                        return Err(ModelError::InvalidSpec(format!(
                            "dropout rate {rate} outside [0, 1)"
                        )));
                    }
                }
                BlockSpec::Dense { units } | BlockSpec::Head { units } => {
                    if units == 0 {
                        return Err(ModelError::InvalidSpec("layer units must be positive".into()));
                    }
                }
                _ => {}
            }
        }
        let trace = shape_trace(self)?;
        if let Some(&(h, w, _)) = trace.last() {
            if h != 1 || w != 1 {
                return Err(ModelError::InvalidLadder {
                    block: trace.len(),
                    detail: format!("feature map is {h}x{w} at the head, want 1x1"),
                });
            }
        }
        Ok(())
    }

    /// The canonical text form used in checkpoints: three header lines, then
    /// one line per block.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("name {}\n", self.name));
        out.push_str(&format!(
            "input {} {}x{}\n",
            self.input_kind, self.input_bands, self.input_frames
        ));
        out.push_str(&format!("output {}\n", self.output_dim));
        for b in &self.blocks {
            match *b {
                BlockSpec::Conv { channels, kernel } => {
                    out.push_str(&format!("conv {kernel}x{kernel}x{channels}\n"))
                }
                BlockSpec::Bn => out.push_str("bn\n"),
                BlockSpec::Relu => out.push_str("relu\n"),
                BlockSpec::Pool { ph, pw } => out.push_str(&format!("pool {ph}x{pw}\n")),
                BlockSpec::Dropout { rate } => out.push_str(&format!("dropout {rate}\n")),
                BlockSpec::Dense { units } => out.push_str(&format!("dense {units}\n")),
                BlockSpec::TimePool => out.push_str("timepool\n"),
                BlockSpec::Head { units } => out.push_str(&format!("head 1x1x{units}\n")),
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<ModelSpec, ModelError> {
        fn err(line: usize, detail: impl Into<String>) -> ModelError {
            ModelError::Parse { line, detail: detail.into() }
        }
        fn dims(s: &str, n: usize, line: usize) -> Result<Vec<usize>, ModelError> {
            let parts: Vec<_> = s.split('x').collect();
            if parts.len() != n {
                return Err(err(line, format!("want {n} 'x'-separated sizes, got '{s}'")));
            }
            parts
                .iter()
                .map(|p| p.parse::<usize>().map_err(|_| err(line, format!("bad size '{p}'"))))
                .collect()
        }

        let mut name = None;
        let mut input = None;
        let mut output = None;
        let mut blocks = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let l = raw.trim();
            if l.is_empty() {
                continue;
            }
            let (word, rest) = l.split_once(' ').unwrap_or((l, ""));
            match word {
                "name" => name = Some(rest.to_string()),
                "input" => {
                    let (kind, shape) = rest
                        .split_once(' ')
                        .ok_or_else(|| err(line, "want 'input <kind> <bands>x<frames>'"))?;
                    let kind = FeatureKind::parse(kind)
                        .ok_or_else(|| err(line, format!("unknown feature kind '{kind}'")))?;
                    let d = dims(shape, 2, line)?;
                    input = Some((kind, d[0], d[1]));
                }
                "output" => {
                    output =
                        Some(rest.parse::<usize>().map_err(|_| err(line, "bad output dim"))?)
                }
                "conv" => {
                    let d = dims(rest, 3, line)?;
                    if d[0] != d[1] {
                        return Err(err(line, "conv kernels are square"));
                    }
                    blocks.push(BlockSpec::Conv { channels: d[2], kernel: d[0] });
                }
                "bn" => blocks.push(BlockSpec::Bn),
                "relu" => blocks.push(BlockSpec::Relu),
                "pool" => {
                    let d = dims(rest, 2, line)?;
                    blocks.push(BlockSpec::Pool { ph: d[0], pw: d[1] });
                }
                "dropout" => {
                    let rate =
                        rest.parse::<f64>().map_err(|_| err(line, "bad dropout rate"))?;
                    blocks.push(BlockSpec::Dropout { rate });
                }
                "dense" => {
                    let units =
                        rest.parse::<usize>().map_err(|_| err(line, "bad dense units"))?;
                    blocks.push(BlockSpec::Dense { units });
                }
                "timepool" => blocks.push(BlockSpec::TimePool),
                "head" => {
                    let d = dims(rest, 3, line)?;
                    if d[0] != 1 || d[1] != 1 {
                        return Err(err(line, "head is a 1x1 layer"));
                    }
                    blocks.push(BlockSpec::Head { units: d[2] });
                }
                other => return Err(err(line, format!("unknown block '{other}'"))),
            }
        }
        let spec = ModelSpec {
            name: name.ok_or_else(|| err(0, "missing 'name' line"))?,
            input_kind: input.ok_or_else(|| err(0, "missing 'input' line"))?.0,
            input_bands: input.unwrap().1,
            input_frames: input.unwrap().2,
            blocks,
            output_dim: output.ok_or_else(|| err(0, "missing 'output' line"))?,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Feature-map shape after each conv, dense, or pooling stage, as
/// `(height, width, depth)` with floor pooling. The head is excluded.
pub fn shape_trace(spec: &ModelSpec) -> Result<Vec<(usize, usize, usize)>, ModelError> {
    let (mut h, mut w, mut d) = match spec.layout() {
        Layout::Plane => (spec.input_bands, spec.input_frames, 1),
        Layout::PerFrame => (1, spec.input_frames, spec.input_bands),
    };
    let mut trace = Vec::new();
    let mut block = 0usize;
    for b in &spec.blocks {
        match *b {
            BlockSpec::Conv { channels, kernel } => {
                block += 1;
                d = channels;
                if kernel == 1 {
                    trace.push((h, w, d));
                }
            }
            BlockSpec::Dense { units } => {
                block += 1;
                d = units;
                trace.push((h, w, d));
            }
            BlockSpec::Pool { ph, pw } => {
                if h < ph || w < pw {
                    return Err(ModelError::InvalidLadder {
                        block,
                        detail: format!("cannot pool a {h}x{w} map by {ph}x{pw}"),
                    });
                }
                h /= ph;
                w /= pw;
                trace.push((h, w, d));
            }
            BlockSpec::TimePool => {
                w = 1;
                trace.push((h, w, d));
            }
            _ => {}
        }
    }
    Ok(trace)
}

/// Per-layer learned parameter counts; batch-norm running statistics are
/// tallied separately since the optimizer never touches them.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerCount {
    pub name: String,
    pub learned: usize,
    pub stats: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCount {
    pub total_learned: usize,
    pub total_stats: usize,
    pub per_layer: Vec<LayerCount>,
}

pub fn param_count(spec: &ModelSpec) -> Result<ParamCount, ModelError> {
    let mut d = match spec.layout() {
        Layout::Plane => 1,
        Layout::PerFrame => spec.input_bands,
    };
    let mut per_layer = Vec::new();
    let mut block = 0usize;
    for b in &spec.blocks {
        match *b {
            BlockSpec::Conv { channels, kernel } => {
                block += 1;
                per_layer.push(LayerCount {
                    name: format!("block{block}.conv"),
                    learned: kernel * kernel * d * channels + channels,
                    stats: 0,
                });
                d = channels;
            }
            BlockSpec::Dense { units } => {
                block += 1;
                per_layer.push(LayerCount {
                    name: format!("block{block}.dense"),
                    learned: d * units + units,
                    stats: 0,
                });
                d = units;
            }
            BlockSpec::Bn => per_layer.push(LayerCount {
                name: format!("block{block}.bn"),
                learned: 2 * d,
                stats: 2 * d,
            }),
            BlockSpec::Head { units } => per_layer.push(LayerCount {
                name: "head".to_string(),
                learned: d * units + units,
                stats: 0,
            }),
            _ => {}
        }
    }
    Ok(ParamCount {
        total_learned: per_layer.iter().map(|l| l.learned).sum(),
        total_stats: per_layer.iter().map(|l| l.stats).sum(),
        per_layer,
    })
}
