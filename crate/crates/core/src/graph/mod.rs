//! Declarative layer graphs for the YOLOv5s family and the strawberry
//! variant, with parameter and FLOP accounting.
//!
//! Every architecture uses the same 25-slot layout: a ten-layer backbone,
//! an FPN/PAN neck built from plain C3 blocks, and a three-scale detect
//! head. The variants differ only in which block sits in the four backbone
//! feature slots (C3 or C2f) and in the pyramid slot (SPPF or SPPFCSP).

mod forward;
mod weights;

use std::fmt::{self, Write as _};
use std::str::FromStr;

use thiserror::Error;

use crate::tensor::TensorError;

pub use forward::{forward, pool_pyramid, Block, Model};
pub use weights::{init_weights, load_weights, save_weights, SlotKind, SlotSpec, WeightEntry, WeightFileError, WeightStore};

/// Epsilon of every batch-norm layer.
pub const BN_EPS: f32 = 1e-3;

/// Detection strides of the three head outputs.
pub const STRIDES: [usize; 3] = [8, 16, 32];

/// Anchors per grid cell at each scale.
pub const ANCHORS_PER_SCALE: usize = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("unknown architecture '{0}' (expected yolov5s, yolov5s-c2f or yolov5s-straw)")]
    UnknownArch(String),
    #[error("number of classes must be >= 1")]
    NoClasses,
    #[error("layer {layer} reads from layer {input}, which is not an earlier layer")]
    ForwardReference { layer: usize, input: usize },
    #[error("layer {layer}: expected {expected} input channels, producers give {actual}")]
    ChannelMismatch { layer: usize, expected: usize, actual: usize },
    #[error("layer {layer}: {msg}")]
    InvalidLayer { layer: usize, msg: String },
    #[error("input size {0} is not a positive multiple of 32")]
    BadInputSize(usize),
    #[error("input tensor must be (1, 3, H, W) with H and W multiples of 32, got {0:?}")]
    BadInput([usize; 4]),
    #[error("missing weight slot '{0}'")]
    MissingSlot(String),
    #[error("unexpected weight slot '{0}' not used by the graph")]
    UnexpectedSlot(String),
    #[error("weight slot '{name}' has shape {actual:?}, graph expects {expected:?}")]
    SlotShape {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ArchId {
    Yolov5s,
    Yolov5sC2f,
    Yolov5sStraw,
}

impl ArchId {
    pub const ALL: [ArchId; 3] = [ArchId::Yolov5s, ArchId::Yolov5sC2f, ArchId::Yolov5sStraw];

    pub fn as_str(self) -> &'static str {
        match self {
            ArchId::Yolov5s => "yolov5s",
            ArchId::Yolov5sC2f => "yolov5s-c2f",
            ArchId::Yolov5sStraw => "yolov5s-straw",
        }
    }
}

impl fmt::Display for ArchId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ArchId {
    type Err = GraphError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ArchId::ALL
            .into_iter()
            .find(|a| a.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| GraphError::UnknownArch(s.to_string()))
    }
}

/// Block type with its channel/kernel/repeat parameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BlockKind {
    /// conv2d + batch norm + SiLU.
    Conv { cin: usize, cout: usize, k: usize, s: usize, p: usize },
    /// Two Convs (`k1` then `k2`) with optional residual add.
    Bottleneck { cin: usize, cout: usize, k1: usize, k2: usize, shortcut: bool },
    C3 { cin: usize, cout: usize, n: usize, shortcut: bool },
    C2f { cin: usize, cout: usize, n: usize, shortcut: bool },
    Sppf { cin: usize, cout: usize, k: usize },
    SppfCsp { cin: usize, cout: usize, k: usize },
    Upsample { channels: usize },
    Concat { cout: usize },
    Detect { nc: usize, in_channels: [usize; 3] },
}

/// One convolution inside a block, in slot order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvUnit {
    /// Name relative to the layer, e.g. `cv1` or `m.0.cv2`; empty for a bare Conv.
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub s: usize,
    pub p: usize,
    /// Batch-norm + SiLU follow (otherwise the conv carries its own bias).
    pub bn: bool,
}

impl ConvUnit {
    fn conv(name: impl Into<String>, cin: usize, cout: usize, k: usize, s: usize) -> Self {
        ConvUnit {
            name: name.into(),
            cin,
            cout,
            k,
            s,
            p: k / 2,
            bn: true,
        }
    }

    pub fn weight_count(&self) -> usize {
        self.cout * self.cin * self.k * self.k
    }

    /// Trainable parameters: weights plus BN gamma/beta, or weights plus bias.
    pub fn param_count(&self) -> usize {
        self.weight_count() + if self.bn { 2 * self.cout } else { self.cout }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.p - self.k) / self.s + 1,
            (w + 2 * self.p - self.k) / self.s + 1,
        )
    }
}

impl BlockKind {
    pub fn name(&self) -> &'static str {
        match self {
            BlockKind::Conv { .. } => "Conv",
            BlockKind::Bottleneck { .. } => "Bottleneck",
            BlockKind::C3 { .. } => "C3",
            BlockKind::C2f { .. } => "C2f",
            BlockKind::Sppf { .. } => "SPPF",
            BlockKind::SppfCsp { .. } => "SPPFCSP",
            BlockKind::Upsample { .. } => "Upsample",
            BlockKind::Concat { .. } => "Concat",
            BlockKind::Detect { .. } => "Detect",
        }
    }

    /// Output channels of the block (the per-scale width for Detect).
    pub fn out_channels(&self) -> usize {
        match *self {
            BlockKind::Conv { cout, .. }
            | BlockKind::Bottleneck { cout, .. }
            | BlockKind::C3 { cout, .. }
            | BlockKind::C2f { cout, .. }
            | BlockKind::Sppf { cout, .. }
            | BlockKind::SppfCsp { cout, .. }
            | BlockKind::Concat { cout } => cout,
            BlockKind::Upsample { channels } => channels,
            BlockKind::Detect { nc, .. } => ANCHORS_PER_SCALE * (nc + 5),
        }
    }

    /// Convolutions of the block in weight-slot order.
    pub fn conv_units(&self) -> Vec<ConvUnit> {
        match *self {
            BlockKind::Conv { cin, cout, k, s, p } => vec![ConvUnit {
                name: String::new(),
                cin,
                cout,
                k,
                s,
                p,
                bn: true,
            }],
            BlockKind::Bottleneck { cin, cout, k1, k2, .. } => vec![
                ConvUnit::conv("cv1", cin, cout, k1, 1),
                ConvUnit::conv("cv2", cout, cout, k2, 1),
            ],
            BlockKind::C3 { cin, cout, n, .. } => {
                let h = cout / 2;
                let mut units = vec![
                    ConvUnit::conv("cv1", cin, h, 1, 1),
                    ConvUnit::conv("cv2", cin, h, 1, 1),
                    ConvUnit::conv("cv3", 2 * h, cout, 1, 1),
                ];
                for i in 0..n {
                    units.push(ConvUnit::conv(format!("m.{i}.cv1"), h, h, 1, 1));
                    units.push(ConvUnit::conv(format!("m.{i}.cv2"), h, h, 3, 1));
                }
                units
            }
            BlockKind::C2f { cin, cout, n, .. } => {
                let h = cout / 2;
                let mut units = vec![
                    ConvUnit::conv("cv1", cin, 2 * h, 1, 1),
                    ConvUnit::conv("cv2", (2 + n) * h, cout, 1, 1),
                ];
                for i in 0..n {
                    units.push(ConvUnit::conv(format!("m.{i}.cv1"), h, h, 3, 1));
                    units.push(ConvUnit::conv(format!("m.{i}.cv2"), h, h, 3, 1));
                }
                units
            }
            BlockKind::Sppf { cin, cout, .. } => {
                let h = cin / 2;
                vec![
                    ConvUnit::conv("cv1", cin, h, 1, 1),
                    ConvUnit::conv("cv2", 4 * h, cout, 1, 1),
                ]
            }
            BlockKind::SppfCsp { cin, cout, .. } => {
                let h = cout / 2;
                vec![
                    ConvUnit::conv("cv1", cin, h, 1, 1),
                    ConvUnit::conv("cv2", cin, h, 1, 1),
                    ConvUnit::conv("cv3", h, h, 3, 1),
                    ConvUnit::conv("cv4", h, h, 1, 1),
                    ConvUnit::conv("cv5", 4 * h, h, 1, 1),
                    ConvUnit::conv("cv6", h, h, 3, 1),
                    ConvUnit::conv("cv7", 2 * h, cout, 1, 1),
                ]
            }
            BlockKind::Upsample { .. } | BlockKind::Concat { .. } => Vec::new(),
            BlockKind::Detect { nc, in_channels } => in_channels
                .iter()
                .enumerate()
                .map(|(i, &cin)| ConvUnit {
                    name: format!("m.{i}"),
                    cin,
                    cout: ANCHORS_PER_SCALE * (nc + 5),
                    k: 1,
                    s: 1,
                    p: 0,
                    bn: false,
                })
                .collect(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.conv_units().iter().map(ConvUnit::param_count).sum()
    }

    fn params_label(&self) -> String {
        match *self {
            BlockKind::Conv { cin, cout, k, s, p } => format!("{cin}->{cout} k{k} s{s} p{p}"),
            BlockKind::Bottleneck { cin, cout, k1, k2, shortcut } => {
                format!("{cin}->{cout} k{k1}/{k2} shortcut={shortcut}")
            }
            BlockKind::C3 { cin, cout, n, shortcut } | BlockKind::C2f { cin, cout, n, shortcut } => {
                format!("{cin}->{cout} n={n} shortcut={shortcut}")
            }
            BlockKind::Sppf { cin, cout, k } | BlockKind::SppfCsp { cin, cout, k } => {
                format!("{cin}->{cout} k={k}")
            }
            BlockKind::Upsample { channels } => format!("{channels} x2 nearest"),
            BlockKind::Concat { cout } => format!("-> {cout}"),
            BlockKind::Detect { nc, in_channels } => format!("nc={nc} in={in_channels:?}"),
        }
    }
}

/// A layer and the indices of the layers it reads. An empty `inputs` list
/// means the network input image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub inputs: Vec<usize>,
}

impl BlockSpec {
    pub fn new(kind: BlockKind, inputs: Vec<usize>) -> Self {
        BlockSpec { kind, inputs }
    }
}

/// Anchor boxes in pixels, three per stride.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    pub anchors: [[(f32, f32); 3]; 3],
    pub strides: [usize; 3],
}

impl Default for AnchorSet {
    fn default() -> Self {
        AnchorSet {
            anchors: [
                [(10.0, 13.0), (16.0, 30.0), (33.0, 23.0)],
                [(30.0, 61.0), (62.0, 45.0), (59.0, 119.0)],
                [(116.0, 90.0), (156.0, 198.0), (373.0, 326.0)],
            ],
            strides: STRIDES,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    pub arch: ArchId,
    pub nc: usize,
    layers: Vec<BlockSpec>,
    pub anchors: AnchorSet,
}

/// Layer index of the detect head in the canonical layout.
pub const DETECT_LAYER: usize = 24;

impl ModelGraph {
    /// Validates topological order and channel consistency.
    pub fn new(arch: ArchId, nc: usize, layers: Vec<BlockSpec>, anchors: AnchorSet) -> Result<Self, GraphError> {
        if nc == 0 {
            return Err(GraphError::NoClasses);
        }
        for (i, layer) in layers.iter().enumerate() {
            for &src in &layer.inputs {
                if src >= i {
                    return Err(GraphError::ForwardReference { layer: i, input: src });
                }
            }
            let widths: Vec<usize> = if layer.inputs.is_empty() {
                vec![3]
            } else {
                layer.inputs.iter().map(|&s| layers[s].kind.out_channels()).collect()
            };
            check_layer_inputs(i, &layer.kind, &widths)?;
        }
        Ok(ModelGraph {
            arch,
            nc,
            layers,
            anchors,
        })
    }

    pub fn layers(&self) -> &[BlockSpec] {
        &self.layers
    }

    /// Index of the (single) detect layer.
    pub fn detect_index(&self) -> Option<usize> {
        self.layers
            .iter()
            .position(|l| matches!(l.kind, BlockKind::Detect { .. }))
    }

    /// Sum over layers of conv weights, conv biases and BN gamma/beta.
    pub fn count_params(&self) -> usize {
        self.layers.iter().map(|l| l.kind.param_count()).sum()
    }

    /// Spatial size `(h, w)` of every layer output for a square input; the
    /// detect layer reports its first (stride-8) scale.
    pub fn spatial_sizes(&self, input_hw: usize) -> Vec<(usize, usize)> {
        let mut sizes: Vec<(usize, usize)> = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (h, w) = layer.inputs.first().map_or((input_hw, input_hw), |&s| sizes[s]);
            let size = match &layer.kind {
                BlockKind::Conv { .. } => layer.kind.conv_units()[0].output_hw(h, w),
                BlockKind::Upsample { .. } => (2 * h, 2 * w),
                _ => (h, w),
            };
            sizes.push(size);
        }
        sizes
    }

    /// Forward-pass GFLOPs at batch 1: `2 * MACs` over every convolution.
    pub fn count_flops(&self, input_hw: usize) -> Result<f64, GraphError> {
        if input_hw == 0 || !input_hw.is_multiple_of(32) {
            return Err(GraphError::BadInputSize(input_hw));
        }
        Ok(self.layer_flops(input_hw).iter().sum::<f64>() / 1e9)
    }

    fn layer_flops(&self, input_hw: usize) -> Vec<f64> {
        let sizes = self.spatial_sizes(input_hw);
        self.layers
            .iter()
            .map(|layer| {
                let in_sizes: Vec<(usize, usize)> = if layer.inputs.is_empty() {
                    vec![(input_hw, input_hw)]
                } else {
                    layer.inputs.iter().map(|&s| sizes[s]).collect()
                };
                layer
                    .kind
                    .conv_units()
                    .iter()
                    .enumerate()
                    .map(|(i, u)| {
                        // Detect units each read their own scale; all others the first input.
                        let (h, w) = match layer.kind {
                            BlockKind::Detect { .. } => in_sizes[i],
                            _ => in_sizes[0],
                        };
                        let (oh, ow) = u.output_hw(h, w);
                        2.0 * (u.weight_count() * oh * ow) as f64
                    })
                    .sum()
            })
            .collect()
    }

    /// Plain-text layer table with parameter total and GFLOPs.
    pub fn describe(&self, input_hw: usize) -> String {
        let sizes = self.spatial_sizes(input_hw);
        let flops = self.layer_flops(input_hw);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:>3}  {:<10} {:<32} {:<12} {:<16} {:>10}",
            "idx", "kind", "params", "inputs", "out-shape", "param-count"
        );
        for (i, layer) in self.layers.iter().enumerate() {
            let inputs = if layer.inputs.is_empty() {
                "input".to_string()
            } else {
                layer
                    .inputs
                    .iter()
                    .map(usize::to_string)
                    .collect::<Vec<_>>()
                    .join(",")
            };
            let shape = match layer.kind {
                BlockKind::Detect { .. } => {
                    let c = layer.kind.out_channels();
                    layer
                        .inputs
                        .iter()
                        .map(|&s| format!("{c}x{}", sizes[s].0))
                        .collect::<Vec<_>>()
                        .join("|")
                }
                _ => format!("{}x{}x{}", layer.kind.out_channels(), sizes[i].0, sizes[i].1),
            };
            let _ = writeln!(
                out,
                "{:>3}  {:<10} {:<32} {:<12} {:<16} {:>10}",
                i,
                layer.kind.name(),
                layer.kind.params_label(),
                inputs,
                shape,
                layer.kind.param_count()
            );
        }
        let _ = writeln!(out, "architecture: {} (nc={})", self.arch, self.nc);
        let _ = writeln!(out, "layers: {}", self.layers.len());
        let _ = writeln!(out, "parameters: {}", self.count_params());
        let _ = writeln!(
            out,
            "GFLOPs@{input_hw}: {:.2}",
            flops.iter().sum::<f64>() / 1e9
        );
        out
    }
}

fn check_layer_inputs(layer: usize, kind: &BlockKind, widths: &[usize]) -> Result<(), GraphError> {
    let single = |expected: usize| -> Result<(), GraphError> {
        if widths.len() != 1 {
            return Err(GraphError::InvalidLayer {
                layer,
                msg: format!("{} takes one input, got {}", kind.name(), widths.len()),
            });
        }
        if widths[0] != expected {
            return Err(GraphError::ChannelMismatch {
                layer,
                expected,
                actual: widths[0],
            });
        }
        Ok(())
    };
    match *kind {
        BlockKind::Conv { cin, s, k, .. } => {
            if s == 0 || k == 0 {
                return Err(GraphError::InvalidLayer {
                    layer,
                    msg: "kernel and stride must be >= 1".into(),
                });
            }
            single(cin)
        }
        BlockKind::Bottleneck { cin, .. }
        | BlockKind::C3 { cin, .. }
        | BlockKind::C2f { cin, .. }
        | BlockKind::Sppf { cin, .. }
        | BlockKind::SppfCsp { cin, .. } => single(cin),
        BlockKind::Upsample { channels } => single(channels),
        BlockKind::Concat { cout } => {
            let total: usize = widths.iter().sum();
            if total != cout {
                return Err(GraphError::ChannelMismatch {
                    layer,
                    expected: cout,
                    actual: total,
                });
            }
            Ok(())
        }
        BlockKind::Detect { in_channels, .. } => {
            if widths != in_channels {
                return Err(GraphError::InvalidLayer {
                    layer,
                    msg: format!("detect expects inputs {in_channels:?}, got {widths:?}"),
                });
            }
            Ok(())
        }
    }
}

/// Builds the canonical 25-layer graph for `arch`.
pub fn build_model(arch: ArchId, nc: usize) -> Result<ModelGraph, GraphError> {
    let feat = |cin: usize, cout: usize, n: usize| match arch {
        ArchId::Yolov5s => BlockKind::C3 { cin, cout, n, shortcut: true },
        ArchId::Yolov5sC2f | ArchId::Yolov5sStraw => BlockKind::C2f { cin, cout, n, shortcut: true },
    };
    let pyramid = match arch {
        ArchId::Yolov5sStraw => BlockKind::SppfCsp { cin: 512, cout: 512, k: 5 },
        _ => BlockKind::Sppf { cin: 512, cout: 512, k: 5 },
    };
    let conv = |cin: usize, cout: usize, k: usize, s: usize| BlockKind::Conv {
        cin,
        cout,
        k,
        s,
        p: k / 2,
    };
    let neck_c3 = |cin: usize, cout: usize| BlockKind::C3 {
        cin,
        cout,
        n: 1,
        shortcut: false,
    };
    use BlockSpec as L;
    let layers = vec![
        // backbone
        L::new(BlockKind::Conv { cin: 3, cout: 32, k: 6, s: 2, p: 2 }, vec![]),
        L::new(conv(32, 64, 3, 2), vec![0]),
        L::new(feat(64, 64, 1), vec![1]),
        L::new(conv(64, 128, 3, 2), vec![2]),
        L::new(feat(128, 128, 2), vec![3]),
        L::new(conv(128, 256, 3, 2), vec![4]),
        L::new(feat(256, 256, 3), vec![5]),
        L::new(conv(256, 512, 3, 2), vec![6]),
        L::new(feat(512, 512, 1), vec![7]),
        L::new(pyramid, vec![8]),
        // top-down
        L::new(conv(512, 256, 1, 1), vec![9]),
        L::new(BlockKind::Upsample { channels: 256 }, vec![10]),
        L::new(BlockKind::Concat { cout: 512 }, vec![11, 6]),
        L::new(neck_c3(512, 256), vec![12]),
        L::new(conv(256, 128, 1, 1), vec![13]),
        L::new(BlockKind::Upsample { channels: 128 }, vec![14]),
        L::new(BlockKind::Concat { cout: 256 }, vec![15, 4]),
        L::new(neck_c3(256, 128), vec![16]),
        // bottom-up
        L::new(conv(128, 128, 3, 2), vec![17]),
        L::new(BlockKind::Concat { cout: 256 }, vec![18, 14]),
        L::new(neck_c3(256, 256), vec![19]),
        L::new(conv(256, 256, 3, 2), vec![20]),
        L::new(BlockKind::Concat { cout: 512 }, vec![21, 10]),
        L::new(neck_c3(512, 512), vec![22]),
        L::new(
            BlockKind::Detect {
                nc,
                in_channels: [128, 256, 512],
            },
            vec![17, 20, 23],
        ),
    ];
    ModelGraph::new(arch, nc, layers, AnchorSet::default())
}
