//! Architecture files: the pruned network as JSON plus its weights.
//!
//! The JSON lists every stage in order. A layer entry records its retained
//! stems and operations with their channel indices, the skip source, the
//! optional 1x1 reducer and the divisor of the layer average. A resource
//! summary closes the document. Weights live in a sibling checkpoint
//! container named by the `weights` field.

use std::path::{Path, PathBuf};

use gatenas_core::compile::{
    ArchitectureDescriptor, CompiledArchitecture, LayerDesc, OperationDesc, ReducerDesc, StageDesc, StemDesc,
};
use gatenas_core::network::{Activation, ConvType};
use gatenas_core::resource::ResourceReport;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::{fsutil, Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConvTypeEntry {
    Normal,
    Depthwise,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationEntry {
    Relu,
    Prelu,
    Tanh,
    None,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReducerEntry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub channels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StemEntry {
    pub conv_type: ConvTypeEntry,
    pub kernel: usize,
    pub stride: usize,
    pub batch_norm: bool,
    pub channels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OperationEntry {
    pub stem: usize,
    pub activation: ActivationEntry,
    pub channels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerEntry {
    pub index: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub in_hw: [usize; 2],
    pub out_hw: [usize; 2],
    pub divisor: usize,
    pub reducer: Option<ReducerEntry>,
    pub stems: Vec<StemEntry>,
    pub operations: Vec<OperationEntry>,
    pub skip_source: Option<usize>,
    pub channels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum StageEntry {
    Layer(LayerEntry),
    MaxPool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResourceSummary {
    pub parameters: u64,
    pub flops: u64,
    pub predicted_latency_ms: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureFile {
    pub format_version: u32,
    pub input: [usize; 3],
    pub num_classes: usize,
    pub stages: Vec<StageEntry>,
    pub resources: ResourceSummary,
    /// Weight file, relative to the architecture file.
    pub weights: Option<String>,
}

impl From<ConvType> for ConvTypeEntry {
    fn from(c: ConvType) -> Self {
        match c {
            ConvType::Normal => ConvTypeEntry::Normal,
            ConvType::Depthwise => ConvTypeEntry::Depthwise,
        }
    }
}

impl From<ConvTypeEntry> for ConvType {
    fn from(c: ConvTypeEntry) -> Self {
        match c {
            ConvTypeEntry::Normal => ConvType::Normal,
            ConvTypeEntry::Depthwise => ConvType::Depthwise,
        }
    }
}

impl From<Activation> for ActivationEntry {
    fn from(a: Activation) -> Self {
        match a {
            Activation::Relu => ActivationEntry::Relu,
            Activation::Prelu => ActivationEntry::Prelu,
            Activation::Tanh => ActivationEntry::Tanh,
            Activation::None => ActivationEntry::None,
        }
    }
}

impl From<ActivationEntry> for Activation {
    fn from(a: ActivationEntry) -> Self {
        match a {
            ActivationEntry::Relu => Activation::Relu,
            ActivationEntry::Prelu => Activation::Prelu,
            ActivationEntry::Tanh => Activation::Tanh,
            ActivationEntry::None => Activation::None,
        }
    }
}

impl From<ResourceReport> for ResourceSummary {
    fn from(r: ResourceReport) -> Self {
        ResourceSummary { parameters: r.parameters, flops: r.flops, predicted_latency_ms: r.predicted_latency_ms }
    }
}

impl ArchitectureFile {
    pub fn new(desc: &ArchitectureDescriptor, report: ResourceReport, weights: Option<String>) -> Self {
        let stages = desc
            .stages
            .iter()
            .map(|s| match s {
                StageDesc::MaxPool => StageEntry::MaxPool,
                StageDesc::Layer(l) => StageEntry::Layer(LayerEntry {
                    index: l.index,
                    in_channels: l.in_channels,
                    out_channels: l.out_channels,
                    in_hw: [l.in_hw.0, l.in_hw.1],
                    out_hw: [l.out_hw.0, l.out_hw.1],
                    divisor: l.divisor,
                    reducer: l.reducer.as_ref().map(|r| ReducerEntry {
                        in_channels: r.in_channels,
                        out_channels: r.out_channels,
                        channels: r.channels.clone(),
                    }),
                    stems: l
                        .stems
                        .iter()
                        .map(|s| StemEntry {
                            conv_type: s.conv_type.into(),
                            kernel: s.kernel,
                            stride: s.stride,
                            batch_norm: s.batch_norm,
                            channels: s.channels.clone(),
                        })
                        .collect(),
                    operations: l
                        .operations
                        .iter()
                        .map(|o| OperationEntry { stem: o.stem, activation: o.activation.into(), channels: o.channels.clone() })
                        .collect(),
                    skip_source: l.skip_source,
                    channels: l.channels.clone(),
                }),
            })
            .collect();
        ArchitectureFile {
            format_version: FORMAT_VERSION,
            input: desc.input,
            num_classes: desc.num_classes,
            stages,
            resources: report.into(),
            weights,
        }
    }

    /// The descriptor, checked for structural consistency.
    pub fn descriptor(&self) -> Result<ArchitectureDescriptor> {
        let stages = self
            .stages
            .iter()
            .map(|s| match s {
                StageEntry::MaxPool => StageDesc::MaxPool,
                StageEntry::Layer(l) => StageDesc::Layer(LayerDesc {
                    index: l.index,
                    in_channels: l.in_channels,
                    out_channels: l.out_channels,
                    in_hw: (l.in_hw[0], l.in_hw[1]),
                    out_hw: (l.out_hw[0], l.out_hw[1]),
                    divisor: l.divisor,
                    reducer: l.reducer.as_ref().map(|r| ReducerDesc {
                        in_channels: r.in_channels,
                        out_channels: r.out_channels,
                        channels: r.channels.clone(),
                    }),
                    stems: l
                        .stems
                        .iter()
                        .map(|s| StemDesc {
                            conv_type: s.conv_type.into(),
                            kernel: s.kernel,
                            stride: s.stride,
                            batch_norm: s.batch_norm,
                            channels: s.channels.clone(),
                        })
                        .collect(),
                    operations: l
                        .operations
                        .iter()
                        .map(|o| OperationDesc { stem: o.stem, activation: o.activation.into(), channels: o.channels.clone() })
                        .collect(),
                    skip_source: l.skip_source,
                    channels: l.channels.clone(),
                }),
            })
            .collect();
        let desc = ArchitectureDescriptor { input: self.input, num_classes: self.num_classes, stages };
        desc.validate()?;
        Ok(desc)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("architecture serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str, file: &str) -> Result<Self> {
        let a: ArchitectureFile = serde_json::from_str(text)
            .map_err(|e| Error::Parse { file: file.into(), line: e.line(), message: e.to_string() })?;
        if a.format_version != FORMAT_VERSION {
            return Err(Error::Parse {
                file: file.into(),
                line: 1,
                message: format!("unsupported format version {} (expected {FORMAT_VERSION})", a.format_version),
            });
        }
        Ok(a)
    }

    pub fn load(path: &Path) -> Result<Self> {
        ArchitectureFile::from_json(&fsutil::read_string(path)?, &path.display().to_string())
    }
}

/// Path of the weight file that goes with `json_path`.
pub fn weights_path(json_path: &Path) -> PathBuf {
    json_path.with_extension("weights")
}

/// Writes the JSON file and its weights atomically.
pub fn save(json_path: &Path, compiled: &CompiledArchitecture, report: ResourceReport) -> Result<()> {
    let weights = weights_path(json_path);
    let name = weights.file_name().map(|n| n.to_string_lossy().into_owned());
    Checkpoint::from_f32_arrays(&compiled.export_weights()).save(&weights)?;
    let file = ArchitectureFile::new(compiled.descriptor(), report, name);
    fsutil::write_atomic(json_path, file.to_json().as_bytes())
}

/// Loads an architecture file together with its weights.
pub fn load_compiled(json_path: &Path) -> Result<CompiledArchitecture> {
    let file = ArchitectureFile::load(json_path)?;
    let desc = file.descriptor()?;
    let name = file.weights.as_ref().ok_or_else(|| Error::Parse {
        file: json_path.display().to_string(),
        line: 1,
        message: String::from("architecture file has no weights"),
    })?;
    let weights = Checkpoint::load(&json_path.with_file_name(name))?;
    Ok(CompiledArchitecture::from_weights(desc, &weights.f32_group(""))?)
}
