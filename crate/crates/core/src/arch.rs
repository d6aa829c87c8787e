//! Declarative architecture specifications for the four network families
//! (DM, KK, UNet, UResNet) in 2D and 3D, plus shape inference and parameter
//! counting over the layer graph.
//!
//! 2D variants are expressed in the same triple-based geometry with a z
//! extent of 1 everywhere (kernels, strides, pools); they consume axial
//! slices.
//!
//! Family summaries:
//!
//! * `DM` — nine valid 3^d convolutions (PReLU after each); the outputs of
//!   convolutions 3, 6 and 9 are center-cropped to a common size and
//!   concatenated, then mined by three 1^d convolutions (400/200/150) and a
//!   softmax head. Output shrinks by 18 voxels per active axis.
//! * `KK` — two parallel paths of eight valid 3^d convolutions: one on a
//!   center crop of the input context, one on a 3x-downscaled version of
//!   it; the low-resolution output is upsampled back and both are fused by
//!   two 1^d convolutions with 150 kernels and a softmax head.
//! * `UNet` — three conv-conv-pool encoder levels (32/64/128), a 256
//!   bottleneck, and a mirrored decoder with 2^d transposed convolutions
//!   and concatenation skips; ReLU activations; output size = input size.
//! * `UResNet` — residual modules (3^d conv and 1^d conv added, batchnorm,
//!   ReLU) with 32/64/128 kernels, each followed by 2^d max pooling, a
//!   256-kernel bottleneck module, and a decoder of 3^d transposed
//!   convolutions with addition skips followed by residual modules;
//!   output size = input size.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::NUM_CLASSES;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Family {
    #[serde(rename = "dm")]
    Dm,
    #[serde(rename = "kk")]
    Kk,
    #[serde(rename = "unet")]
    UNet,
    #[serde(rename = "uresnet")]
    UResNet,
}

impl Family {
    pub const ALL: [Family; 4] = [Family::Dm, Family::Kk, Family::UNet, Family::UResNet];

    pub fn name(self) -> &'static str {
        match self {
            Family::Dm => "dm",
            Family::Kk => "kk",
            Family::UNet => "unet",
            Family::UResNet => "uresnet",
        }
    }

    /// U-shaped families keep output size equal to input size; the others
    /// use valid convolutions throughout and shrink.
    pub fn is_u_shaped(self) -> bool {
        matches!(self, Family::UNet | Family::UResNet)
    }
}

impl std::str::FromStr for Family {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dm" => Ok(Family::Dm),
            "kk" => Ok(Family::Kk),
            "unet" => Ok(Family::UNet),
            "uresnet" => Ok(Family::UResNet),
            other => Err(Error::Architecture(format!("unknown family '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Dimensionality {
    #[serde(rename = "2d")]
    TwoD,
    #[serde(rename = "3d")]
    ThreeD,
}

impl Dimensionality {
    pub fn name(self) -> &'static str {
        match self {
            Dimensionality::TwoD => "2d",
            Dimensionality::ThreeD => "3d",
        }
    }

    /// Map an isotropic extent onto the active axes (z is fixed to 1 in 2D).
    fn triple(self, v: usize) -> [usize; 3] {
        match self {
            Dimensionality::TwoD => [1, v, v],
            Dimensionality::ThreeD => [v, v, v],
        }
    }
}

impl std::str::FromStr for Dimensionality {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "2d" | "2" => Ok(Dimensionality::TwoD),
            "3d" | "3" => Ok(Dimensionality::ThreeD),
            other => Err(Error::Architecture(format!(
                "unknown dimensionality '{other}'"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    Valid,
    Same,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationKind {
    Relu,
    PRelu,
}

/// One node of the layer graph.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Conv {
        kernel: [usize; 3],
        channels_out: usize,
        padding: Padding,
        stride: [usize; 3],
    },
    Deconv {
        kernel: [usize; 3],
        channels_out: usize,
        stride: [usize; 3],
        pad: [usize; 3],
        out_pad: [usize; 3],
    },
    MaxPool {
        kernel: [usize; 3],
    },
    Activation {
        function: ActivationKind,
    },
    BatchNorm,
    Concat,
    Add,
    Downsample {
        factor: [usize; 3],
    },
    Upsample {
        factor: [usize; 3],
    },
    /// Center crop removing `margin` voxels from each side per axis.
    Crop {
        margin: [usize; 3],
    },
    /// 1^d convolution onto the class channels; softmax is applied at
    /// inference time.
    SoftmaxHead {
        channels_out: usize,
    },
}

/// A graph node: `inputs` lists earlier layer ids; an empty list means the
/// node consumes the model input.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub id: usize,
    pub inputs: Vec<usize>,
    #[serde(flatten)]
    pub op: LayerKind,
}

/// Override for the default patch geometry (the architecture's output
/// window; the input window is derived per family).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchConfig {
    pub output_size: [usize; 3],
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub family: Family,
    pub dimensionality: Dimensionality,
    pub in_channels: usize,
    pub num_classes: usize,
    pub input_size: [usize; 3],
    pub output_size: [usize; 3],
    pub layers: Vec<LayerSpec>,
}

impl ArchitectureSpec {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(json: &str) -> Result<ArchitectureSpec> {
        let spec: ArchitectureSpec = serde_json::from_str(json)?;
        validate_spec(&spec)?;
        Ok(spec)
    }

    pub fn label(&self) -> String {
        format!("{}_{}", self.family.name(), self.dimensionality.name())
    }

    /// Margin between input and output windows, per axis (always even).
    pub fn margin(&self) -> [usize; 3] {
        let mut m = [0usize; 3];
        for a in 0..3 {
            m[a] = (self.input_size[a] - self.output_size[a]) / 2;
        }
        m
    }
}

// --- channel widths -------------------------------------------------------
//
// The published per-layer widths stop at structural hints, so the concrete
// ramps below are calibrated against the reported per-architecture totals
// (see tests); they differ between 2D and 3D because the reported totals do.

fn dm_conv_widths(dim: Dimensionality) -> [usize; 9] {
    match dim {
        Dimensionality::TwoD => [32, 32, 32, 64, 64, 64, 96, 96, 96],
        Dimensionality::ThreeD => [80, 80, 80, 160, 160, 160, 240, 240, 240],
    }
}

const DM_FC_WIDTHS: [usize; 3] = [400, 200, 150];

fn kk_path_widths(dim: Dimensionality) -> [usize; 8] {
    match dim {
        Dimensionality::TwoD => [45, 45, 60, 60, 60, 60, 75, 75],
        Dimensionality::ThreeD => [75, 75, 90, 90, 90, 90, 115, 115],
    }
}

const KK_FUSION_WIDTH: usize = 150;
const UNET_LADDER: [usize; 4] = [32, 64, 128, 256];
const URESNET_LADDER: [usize; 4] = [32, 64, 128, 256];

// --- builders --------------------------------------------------------------

struct GraphBuilder {
    layers: Vec<LayerSpec>,
}

impl GraphBuilder {
    fn new() -> Self {
        GraphBuilder { layers: Vec::new() }
    }

    fn push(&mut self, inputs: Vec<usize>, op: LayerKind) -> usize {
        let id = self.layers.len();
        self.layers.push(LayerSpec { id, inputs, op });
        id
    }

    fn conv(&mut self, from: Option<usize>, kernel: [usize; 3], ch: usize, padding: Padding) -> usize {
        self.push(
            from.into_iter().collect(),
            LayerKind::Conv {
                kernel,
                channels_out: ch,
                padding,
                stride: [1; 3],
            },
        )
    }

    fn act(&mut self, from: usize, function: ActivationKind) -> usize {
        self.push(vec![from], LayerKind::Activation { function })
    }
}

fn default_output(family: Family, dim: Dimensionality) -> [usize; 3] {
    match family {
        Family::Dm | Family::Kk => dim.triple(9),
        Family::UNet | Family::UResNet => dim.triple(32),
    }
}

/// Active-axis flags: in 2D the z axis stays untouched.
fn active(dim: Dimensionality) -> [bool; 3] {
    match dim {
        Dimensionality::TwoD => [false, true, true],
        Dimensionality::ThreeD => [true, true, true],
    }
}

fn per_axis(dim: Dimensionality, value: usize, inactive: usize) -> [usize; 3] {
    let act = active(dim);
    [
        if act[0] { value } else { inactive },
        if act[1] { value } else { inactive },
        if act[2] { value } else { inactive },
    ]
}

fn check_output_size(family: Family, dim: Dimensionality, out: [usize; 3]) -> Result<()> {
    let act = active(dim);
    if dim == Dimensionality::TwoD && out[0] != 1 {
        return Err(Error::Architecture(format!(
            "2D variants require output z extent 1, got {out:?}"
        )));
    }
    for a in 0..3 {
        if out[a] == 0 {
            return Err(Error::Architecture("output size must be >= 1".into()));
        }
        if !act[a] {
            continue;
        }
        match family {
            Family::Kk => {
                if out[a] % 3 != 0 {
                    return Err(Error::Architecture(format!(
                        "kk output size must be divisible by 3 per active axis, got {out:?}"
                    )));
                }
            }
            Family::UNet | Family::UResNet => {
                // Three pooling stages halve each active axis.
                if out[a] % 8 != 0 {
                    return Err(Error::Architecture(format!(
                        "u-shaped output size must be divisible by 8 per active axis, got {out:?}"
                    )));
                }
            }
            Family::Dm => {}
        }
    }
    Ok(())
}

/// Build the declarative spec for a family/dimensionality pair.
pub fn build_spec(
    family: Family,
    dim: Dimensionality,
    in_channels: usize,
    patch: Option<PatchConfig>,
) -> Result<ArchitectureSpec> {
    if in_channels == 0 {
        return Err(Error::Architecture("in_channels must be >= 1".into()));
    }
    let output_size = patch
        .map(|p| p.output_size)
        .unwrap_or_else(|| default_output(family, dim));
    check_output_size(family, dim, output_size)?;

    let kernel3 = per_axis(dim, 3, 1);
    let kernel1 = [1usize; 3];
    let mut g = GraphBuilder::new();

    let (input_size, head_input) = match family {
        Family::Dm => {
            let widths = dm_conv_widths(dim);
            let mut prev: Option<usize> = None;
            let mut taps = Vec::new();
            for (i, &w) in widths.iter().enumerate() {
                let c = g.conv(prev, kernel3, w, Padding::Valid);
                let a = g.act(c, ActivationKind::PRelu);
                prev = Some(a);
                if i % 3 == 2 {
                    taps.push((i, a));
                }
            }
            // Crop each tap to the deepest spatial size before concatenation.
            let deepest_reduction = 2 * widths.len(); // 18 per active axis
            let mut concat_inputs = Vec::new();
            for &(i, tap) in &taps {
                let reduction = 2 * (i + 1);
                let margin = (deepest_reduction - reduction) / 2;
                if margin == 0 {
                    concat_inputs.push(tap);
                } else {
                    let cropped =
                        g.push(vec![tap], LayerKind::Crop { margin: per_axis(dim, margin, 0) });
                    concat_inputs.push(cropped);
                }
            }
            let cat = g.push(concat_inputs, LayerKind::Concat);
            let mut prev = cat;
            for &w in DM_FC_WIDTHS.iter() {
                let c = g.conv(Some(prev), kernel1, w, Padding::Valid);
                prev = g.act(c, ActivationKind::PRelu);
            }
            let mut input_size = output_size;
            for a in 0..3 {
                if active(dim)[a] {
                    input_size[a] += deepest_reduction;
                }
            }
            (input_size, prev)
        }
        Family::Kk => {
            let widths = kk_path_widths(dim);
            let mut input_size = output_size;
            for a in 0..3 {
                if active(dim)[a] {
                    input_size[a] += 48;
                }
            }
            // Normal-resolution path on a center crop of the input context.
            let crop = g.push(Vec::new(), LayerKind::Crop { margin: per_axis(dim, 16, 0) });
            let mut prev = crop;
            for &w in widths.iter() {
                let c = g.conv(Some(prev), kernel3, w, Padding::Valid);
                prev = g.act(c, ActivationKind::PRelu);
            }
            let normal_end = prev;
            // Low-resolution path on the 3x-downscaled context.
            let down = g.push(Vec::new(), LayerKind::Downsample { factor: per_axis(dim, 3, 1) });
            let mut prev = down;
            for &w in widths.iter() {
                let c = g.conv(Some(prev), kernel3, w, Padding::Valid);
                prev = g.act(c, ActivationKind::PRelu);
            }
            let up = g.push(vec![prev], LayerKind::Upsample { factor: per_axis(dim, 3, 1) });
            let cat = g.push(vec![normal_end, up], LayerKind::Concat);
            let mut prev = cat;
            for _ in 0..2 {
                let c = g.conv(Some(prev), kernel1, KK_FUSION_WIDTH, Padding::Valid);
                prev = g.act(c, ActivationKind::PRelu);
            }
            (input_size, prev)
        }
        Family::UNet => {
            let pool = per_axis(dim, 2, 1);
            let deconv_kernel = per_axis(dim, 2, 1);
            let mut skips = Vec::new();
            let mut prev: Option<usize> = None;
            for &w in &UNET_LADDER[..3] {
                let c1 = g.conv(prev, kernel3, w, Padding::Same);
                let a1 = g.act(c1, ActivationKind::Relu);
                let c2 = g.conv(Some(a1), kernel3, w, Padding::Same);
                let a2 = g.act(c2, ActivationKind::Relu);
                skips.push(a2);
                let p = g.push(vec![a2], LayerKind::MaxPool { kernel: pool });
                prev = Some(p);
            }
            let b1 = g.conv(prev, kernel3, UNET_LADDER[3], Padding::Same);
            let a = g.act(b1, ActivationKind::Relu);
            let b2 = g.conv(Some(a), kernel3, UNET_LADDER[3], Padding::Same);
            let mut up_from = g.act(b2, ActivationKind::Relu);
            for (&w, &skip) in UNET_LADDER[..3].iter().rev().zip(skips.iter().rev()) {
                let d = g.push(
                    vec![up_from],
                    LayerKind::Deconv {
                        kernel: deconv_kernel,
                        channels_out: w,
                        stride: pool,
                        pad: [0; 3],
                        out_pad: [0; 3],
                    },
                );
                let cat = g.push(vec![d, skip], LayerKind::Concat);
                let c1 = g.conv(Some(cat), kernel3, w, Padding::Same);
                let a1 = g.act(c1, ActivationKind::Relu);
                let c2 = g.conv(Some(a1), kernel3, w, Padding::Same);
                up_from = g.act(c2, ActivationKind::Relu);
            }
            (output_size, up_from)
        }
        Family::UResNet => {
            let pool = per_axis(dim, 2, 1);
            let stride2 = per_axis(dim, 2, 1);
            let pad1 = per_axis(dim, 1, 0);
            // Residual module: 3^d conv and 1^d conv from the same input,
            // added, then batchnorm and ReLU.
            let residual = |g: &mut GraphBuilder, from: Option<usize>, w: usize| -> usize {
                let c3 = g.conv(from, kernel3, w, Padding::Same);
                let c1 = g.conv(from, kernel1, w, Padding::Valid);
                let add = g.push(vec![c3, c1], LayerKind::Add);
                let bn = g.push(vec![add], LayerKind::BatchNorm);
                g.act(bn, ActivationKind::Relu)
            };
            let mut skips = Vec::new();
            let mut prev: Option<usize> = None;
            for &w in &URESNET_LADDER[..3] {
                let r = residual(&mut g, prev, w);
                skips.push(r);
                let p = g.push(vec![r], LayerKind::MaxPool { kernel: pool });
                prev = Some(p);
            }
            let bottleneck = residual(&mut g, prev, URESNET_LADDER[3]);
            let mut up_from = bottleneck;
            for (&w, &skip) in URESNET_LADDER[..3].iter().rev().zip(skips.iter().rev()) {
                let d = g.push(
                    vec![up_from],
                    LayerKind::Deconv {
                        kernel: kernel3,
                        channels_out: w,
                        stride: stride2,
                        pad: pad1,
                        out_pad: pad1,
                    },
                );
                let merged = g.push(vec![d, skip], LayerKind::Add);
                up_from = residual(&mut g, Some(merged), w);
            }
            (output_size, up_from)
        }
    };

    g.push(
        vec![head_input],
        LayerKind::SoftmaxHead {
            channels_out: NUM_CLASSES,
        },
    );

    let spec = ArchitectureSpec {
        family,
        dimensionality: dim,
        in_channels,
        num_classes: NUM_CLASSES,
        input_size,
        output_size,
        layers: g.layers,
    };
    validate_spec(&spec)?;
    Ok(spec)
}

// --- shape inference and parameter counting --------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeShape {
    pub channels: usize,
    pub dims: [usize; 3],
}

/// Propagate shapes through the graph for the given input size. Fails on
/// inconsistent merges or non-positive dimensions.
pub fn infer_shapes(spec: &ArchitectureSpec, input_size: [usize; 3]) -> Result<Vec<NodeShape>> {
    let input_shape = NodeShape {
        channels: spec.in_channels,
        dims: input_size,
    };
    let mut shapes: Vec<NodeShape> = Vec::with_capacity(spec.layers.len());
    for layer in &spec.layers {
        let ins: Vec<NodeShape> = if layer.inputs.is_empty() {
            vec![input_shape]
        } else {
            layer
                .inputs
                .iter()
                .map(|&i| {
                    shapes.get(i).copied().ok_or_else(|| {
                        Error::Architecture(format!(
                            "layer {} references later or missing layer {i}",
                            layer.id
                        ))
                    })
                })
                .collect::<Result<_>>()?
        };
        let fail = |msg: String| Error::Architecture(format!("layer {}: {msg}", layer.id));
        let shape = match &layer.op {
            LayerKind::Conv {
                kernel,
                channels_out,
                padding,
                stride,
            } => {
                let x = ins[0];
                let mut dims = [0usize; 3];
                for a in 0..3 {
                    let pad = match padding {
                        Padding::Same => (kernel[a] - 1) / 2,
                        Padding::Valid => 0,
                    };
                    let padded = x.dims[a] + 2 * pad;
                    if padded < kernel[a] {
                        return Err(fail(format!(
                            "conv kernel {kernel:?} exceeds input {:?}",
                            x.dims
                        )));
                    }
                    dims[a] = (padded - kernel[a]) / stride[a] + 1;
                }
                NodeShape {
                    channels: *channels_out,
                    dims,
                }
            }
            LayerKind::Deconv {
                kernel,
                channels_out,
                stride,
                pad,
                out_pad,
            } => {
                let x = ins[0];
                let mut dims = [0usize; 3];
                for a in 0..3 {
                    dims[a] =
                        stride[a] * (x.dims[a] - 1) + kernel[a] - 2 * pad[a] + out_pad[a];
                }
                NodeShape {
                    channels: *channels_out,
                    dims,
                }
            }
            LayerKind::MaxPool { kernel } => {
                let x = ins[0];
                let mut dims = [0usize; 3];
                for a in 0..3 {
                    if x.dims[a] % kernel[a] != 0 {
                        return Err(fail(format!(
                            "pool {kernel:?} does not divide input {:?}",
                            x.dims
                        )));
                    }
                    dims[a] = x.dims[a] / kernel[a];
                }
                NodeShape {
                    channels: x.channels,
                    dims,
                }
            }
            LayerKind::Activation { .. } | LayerKind::BatchNorm => ins[0],
            LayerKind::Concat => {
                let dims = ins[0].dims;
                if ins.iter().any(|s| s.dims != dims) {
                    return Err(fail("concat inputs must share spatial shape".into()));
                }
                NodeShape {
                    channels: ins.iter().map(|s| s.channels).sum(),
                    dims,
                }
            }
            LayerKind::Add => {
                if ins.iter().any(|s| *s != ins[0]) {
                    return Err(fail("add inputs must share shape and channels".into()));
                }
                ins[0]
            }
            LayerKind::Downsample { factor } => {
                let x = ins[0];
                let mut dims = [0usize; 3];
                for a in 0..3 {
                    if x.dims[a] % factor[a] != 0 {
                        return Err(fail(format!(
                            "downsample factor {factor:?} does not divide input {:?}",
                            x.dims
                        )));
                    }
                    dims[a] = x.dims[a] / factor[a];
                }
                NodeShape {
                    channels: x.channels,
                    dims,
                }
            }
            LayerKind::Upsample { factor } => {
                let x = ins[0];
                let mut dims = [0usize; 3];
                for a in 0..3 {
                    dims[a] = x.dims[a] * factor[a];
                }
                NodeShape {
                    channels: x.channels,
                    dims,
                }
            }
            LayerKind::Crop { margin } => {
                let x = ins[0];
                let mut dims = [0usize; 3];
                for a in 0..3 {
                    if x.dims[a] <= 2 * margin[a] {
                        return Err(fail(format!(
                            "crop margin {margin:?} consumes input {:?}",
                            x.dims
                        )));
                    }
                    dims[a] = x.dims[a] - 2 * margin[a];
                }
                NodeShape {
                    channels: x.channels,
                    dims,
                }
            }
            LayerKind::SoftmaxHead { channels_out } => NodeShape {
                channels: *channels_out,
                dims: ins[0].dims,
            },
        };
        shapes.push(shape);
    }
    Ok(shapes)
}

/// Structural validation: id ordering, single terminal softmax head, merge
/// constraints, and agreement between declared and inferred output size.
pub fn validate_spec(spec: &ArchitectureSpec) -> Result<()> {
    if spec.in_channels == 0 {
        return Err(Error::Architecture("in_channels must be >= 1".into()));
    }
    if spec.num_classes < 2 {
        return Err(Error::Architecture("num_classes must be >= 2".into()));
    }
    for (i, layer) in spec.layers.iter().enumerate() {
        if layer.id != i {
            return Err(Error::Architecture(format!(
                "layer ids must be sequential, got {} at position {i}",
                layer.id
            )));
        }
        for &input in &layer.inputs {
            if input >= i {
                return Err(Error::Architecture(format!(
                    "layer {i} consumes layer {input}, which is not earlier in the graph"
                )));
            }
        }
        match &layer.op {
            LayerKind::Conv { channels_out, .. } | LayerKind::Deconv { channels_out, .. } => {
                if *channels_out == 0 {
                    return Err(Error::Architecture(format!(
                        "layer {i}: channels_out must be >= 1"
                    )));
                }
            }
            LayerKind::SoftmaxHead { channels_out } => {
                if *channels_out != spec.num_classes {
                    return Err(Error::Architecture(format!(
                        "layer {i}: head channels {channels_out} != num_classes {}",
                        spec.num_classes
                    )));
                }
            }
            _ => {}
        }
    }
    let heads: Vec<usize> = spec
        .layers
        .iter()
        .filter(|l| matches!(l.op, LayerKind::SoftmaxHead { .. }))
        .map(|l| l.id)
        .collect();
    if heads.len() != 1 || heads[0] != spec.layers.len() - 1 {
        return Err(Error::Architecture(
            "the graph must end in exactly one softmax head".into(),
        ));
    }
    let shapes = infer_shapes(spec, spec.input_size)?;
    let out = shapes.last().expect("head shape");
    if out.dims != spec.output_size {
        return Err(Error::Architecture(format!(
            "inferred output {:?} does not match declared {:?}",
            out.dims, spec.output_size
        )));
    }
    if spec.family.is_u_shaped() && spec.output_size != spec.input_size {
        return Err(Error::Architecture(
            "u-shaped families must preserve input size".into(),
        ));
    }
    if !spec.family.is_u_shaped() {
        let act = active(spec.dimensionality);
        for a in 0..3 {
            if act[a] && spec.output_size[a] >= spec.input_size[a] {
                return Err(Error::Architecture(
                    "valid-convolution families must shrink active axes".into(),
                ));
            }
        }
    }
    Ok(())
}

/// Spatial output size for a given input size (shape inference over the
/// graph). U-shaped families return the input size unchanged; DM and KK
/// shrink it according to their valid convolutions.
pub fn output_shape(spec: &ArchitectureSpec, input_size: [usize; 3]) -> Result<[usize; 3]> {
    let shapes = infer_shapes(spec, input_size)?;
    Ok(shapes.last().expect("non-empty graph").dims)
}

/// Total learnable parameters: convolution/deconvolution weights and
/// biases, batchnorm scale/shift pairs, and PReLU slopes.
pub fn count_parameters(spec: &ArchitectureSpec) -> Result<usize> {
    let shapes = infer_shapes(spec, spec.input_size)?;
    let channels_of = |layer: &LayerSpec| -> usize {
        if layer.inputs.is_empty() {
            spec.in_channels
        } else if matches!(layer.op, LayerKind::Concat) {
            layer.inputs.iter().map(|&i| shapes[i].channels).sum()
        } else {
            shapes[layer.inputs[0]].channels
        }
    };
    let mut total = 0usize;
    for layer in &spec.layers {
        let cin = channels_of(layer);
        total += match &layer.op {
            LayerKind::Conv {
                kernel,
                channels_out,
                ..
            }
            | LayerKind::Deconv {
                kernel,
                channels_out,
                ..
            } => {
                let kvol: usize = kernel.iter().product();
                channels_out * (cin * kvol + 1)
            }
            LayerKind::Activation { function } => match function {
                ActivationKind::PRelu => cin,
                ActivationKind::Relu => 0,
            },
            LayerKind::BatchNorm => 2 * cin,
            LayerKind::SoftmaxHead { channels_out } => channels_out * (cin + 1),
            _ => 0,
        };
    }
    Ok(total)
}
