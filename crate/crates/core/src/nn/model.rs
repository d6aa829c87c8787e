//! Trainable model: an architecture spec instantiated into runtime layers,
//! executed as a DAG with manual backpropagation.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, Array3, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::arch::{
    infer_shapes, validate_spec, ActivationKind, ArchitectureSpec, LayerKind, LayerSpec, Padding,
};
use crate::error::{Error, Result};
use crate::nn::layers::{LayerCache, LayerImpl};
use crate::nn::ops::{ConvGeom, DeconvGeom};

/// Per-forward scratch: node outputs and backward caches. Reused across
/// samples to limit allocation churn.
#[derive(Default)]
pub struct Workspace {
    pub outputs: Vec<Option<Array4<f32>>>,
    pub caches: Vec<LayerCache>,
}

impl Workspace {
    fn reset(&mut self, n: usize) {
        self.outputs.clear();
        self.outputs.resize_with(n, || None);
        self.caches.clear();
        self.caches.resize_with(n, || LayerCache::None);
    }
}

/// Per-layer gradient buffers, laid out like `LayerImpl::visit_params`.
#[derive(Debug, Clone)]
pub struct Grads(pub Vec<Vec<f32>>);

impl Grads {
    pub fn zeros_like(model: &Model) -> Grads {
        Grads(
            model
                .layers
                .iter()
                .map(|l| vec![0f32; l.param_count()])
                .collect(),
        )
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.0.iter_mut().zip(other.0.iter()) {
            for (x, &y) in a.iter_mut().zip(b.iter()) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f32) {
        for a in self.0.iter_mut() {
            for x in a.iter_mut() {
                *x *= s;
            }
        }
    }
}

pub struct Model {
    spec: ArchitectureSpec,
    layers: Vec<LayerImpl>,
}

impl Model {
    /// Instantiate a validated spec with seeded fan-in-scaled normal weight
    /// initialization. The same (spec, seed) pair always produces identical
    /// weights.
    pub fn instantiate(spec: &ArchitectureSpec, seed: u64) -> Result<Model> {
        validate_spec(spec)?;
        let shapes = infer_shapes(spec, spec.input_size)?;
        let channels_in = |layer: &LayerSpec| -> usize {
            if layer.inputs.is_empty() {
                spec.in_channels
            } else if matches!(layer.op, LayerKind::Concat) {
                layer.inputs.iter().map(|&i| shapes[i].channels).sum()
            } else {
                shapes[layer.inputs[0]].channels
            }
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |rows: usize, cols: usize, fan_in: usize| -> Array2<f32> {
            let std = (2.0 / fan_in as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("valid std");
            Array2::from_shape_simple_fn((rows, cols), || normal.sample(&mut rng) as f32)
        };
        let mut layers = Vec::with_capacity(spec.layers.len());
        for layer in &spec.layers {
            let cin = channels_in(layer);
            let imp = match &layer.op {
                LayerKind::Conv {
                    kernel,
                    channels_out,
                    padding,
                    stride,
                } => {
                    let kvol: usize = kernel.iter().product();
                    let pad = match padding {
                        Padding::Same => [
                            (kernel[0] - 1) / 2,
                            (kernel[1] - 1) / 2,
                            (kernel[2] - 1) / 2,
                        ],
                        Padding::Valid => [0; 3],
                    };
                    LayerImpl::Conv {
                        w: draw(*channels_out, cin * kvol, cin * kvol),
                        b: vec![0.0; *channels_out],
                        geom: ConvGeom {
                            kernel: *kernel,
                            stride: *stride,
                            pad,
                        },
                        same_pad: *padding == Padding::Same,
                    }
                }
                LayerKind::Deconv {
                    kernel,
                    channels_out,
                    stride,
                    pad,
                    out_pad,
                } => {
                    let kvol: usize = kernel.iter().product();
                    LayerImpl::Deconv {
                        w: draw(cin, channels_out * kvol, cin * kvol),
                        b: vec![0.0; *channels_out],
                        geom: DeconvGeom {
                            kernel: *kernel,
                            stride: *stride,
                            pad: *pad,
                            out_pad: *out_pad,
                        },
                    }
                }
                LayerKind::MaxPool { kernel } => LayerImpl::MaxPool { kernel: *kernel },
                LayerKind::Activation { function } => match function {
                    ActivationKind::Relu => LayerImpl::Relu,
                    ActivationKind::PRelu => LayerImpl::PRelu {
                        alpha: vec![0.25; cin],
                    },
                },
                LayerKind::BatchNorm => LayerImpl::BatchNorm {
                    gamma: vec![1.0; cin],
                    beta: vec![0.0; cin],
                },
                LayerKind::Concat => LayerImpl::Concat,
                LayerKind::Add => LayerImpl::Add,
                LayerKind::Downsample { factor } => LayerImpl::Downsample { factor: *factor },
                LayerKind::Upsample { factor } => LayerImpl::Upsample { factor: *factor },
                LayerKind::Crop { margin } => LayerImpl::Crop { margin: *margin },
                // The classification head starts at zero: logits begin
                // exactly uniform and no gradient reaches the body until
                // the head has differentiated the classes, which keeps the
                // early sign-coherent gradient phase from destabilizing
                // the wide hidden layers.
                LayerKind::SoftmaxHead { channels_out } => LayerImpl::Head {
                    w: Array2::zeros((*channels_out, cin)),
                    b: vec![0.0; *channels_out],
                },
            };
            layers.push(imp);
        }
        Ok(Model {
            spec: spec.clone(),
            layers,
        })
    }

    pub fn spec(&self) -> &ArchitectureSpec {
        &self.spec
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.param_count()).sum()
    }

    /// Run the graph, filling the workspace; the last node holds class
    /// logits. The input may have any spatial size the graph accepts.
    pub fn forward_into(&self, input: &Array4<f32>, ws: &mut Workspace) -> Result<()> {
        if input.dim().0 != self.spec.in_channels {
            return Err(Error::Architecture(format!(
                "expected {} input channels, got {}",
                self.spec.in_channels,
                input.dim().0
            )));
        }
        ws.reset(self.layers.len());
        for (i, (layer, spec)) in self.layers.iter().zip(self.spec.layers.iter()).enumerate() {
            let gathered: Vec<&Array4<f32>> = if spec.inputs.is_empty() {
                vec![input]
            } else {
                spec.inputs
                    .iter()
                    .map(|&j| ws.outputs[j].as_ref().expect("topological order"))
                    .collect()
            };
            let (out, cache) = layer.forward(&gathered)?;
            ws.outputs[i] = Some(out);
            ws.caches[i] = cache;
        }
        Ok(())
    }

    /// Class logits for an input window.
    pub fn forward_logits(&self, input: &Array4<f32>) -> Result<Array4<f32>> {
        let mut ws = Workspace::default();
        self.forward_into(input, &mut ws)?;
        Ok(ws.outputs.pop().flatten().expect("head output"))
    }

    /// Per-class probabilities (softmax over the channel axis), each voxel
    /// summing to 1.
    pub fn forward(&self, input: &Array4<f32>) -> Result<Array4<f32>> {
        let mut logits = self.forward_logits(input)?;
        softmax_channels_inplace(&mut logits);
        Ok(logits)
    }

    /// Hard labels by per-voxel argmax over class probabilities.
    pub fn predict_labels(&self, input: &Array4<f32>) -> Result<Array3<u8>> {
        let logits = self.forward_logits(input)?;
        Ok(argmax_labels(&logits))
    }

    /// Backpropagate from the head logits; parameter gradients are added
    /// into `grads`.
    pub fn backward_from_logits(
        &self,
        input: &Array4<f32>,
        ws: &Workspace,
        dlogits: Array4<f32>,
        grads: &mut Grads,
    ) {
        let n = self.layers.len();
        let mut dacts: Vec<Option<Array4<f32>>> = vec![None; n];
        dacts[n - 1] = Some(dlogits);
        for i in (0..n).rev() {
            let Some(dy) = dacts[i].take() else { continue };
            let spec = &self.spec.layers[i];
            let gathered: Vec<&Array4<f32>> = if spec.inputs.is_empty() {
                vec![input]
            } else {
                spec.inputs
                    .iter()
                    .map(|&j| ws.outputs[j].as_ref().expect("forward ran"))
                    .collect()
            };
            let dins = self.layers[i].backward(&gathered, &ws.caches[i], &dy, &mut grads.0[i]);
            for (&j, din) in spec.inputs.iter().zip(dins.into_iter()) {
                match &mut dacts[j] {
                    Some(acc) => *acc += &din,
                    slot => *slot = Some(din),
                }
            }
            // gradients flowing into the model input are discarded
        }
    }

    pub fn snapshot(&self) -> Vec<Vec<f32>> {
        self.layers
            .iter()
            .map(|l| {
                let mut buf = Vec::with_capacity(l.param_count());
                l.visit_params(&mut |p| buf.extend_from_slice(p));
                buf
            })
            .collect()
    }

    pub fn restore(&mut self, snapshot: &[Vec<f32>]) {
        assert_eq!(snapshot.len(), self.layers.len());
        for (layer, saved) in self.layers.iter_mut().zip(snapshot.iter()) {
            let mut off = 0;
            layer.visit_params_mut(&mut |p| {
                p.copy_from_slice(&saved[off..off + p.len()]);
                off += p.len();
            });
            assert_eq!(off, saved.len());
        }
    }

    pub fn layers(&self) -> &[LayerImpl] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [LayerImpl] {
        &mut self.layers
    }

    // --- checkpoint container ------------------------------------------

    /// Save to a self-describing binary container: magic, embedded spec
    /// JSON, then the raw little-endian f32 parameters per layer.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(path, e))?;
            }
        }
        let mut f = std::io::BufWriter::new(
            std::fs::File::create(path).map_err(|e| Error::io(path, e))?,
        );
        let json = serde_json::to_vec(&self.spec)?;
        f.write_all(b"TBMODEL1").map_err(|e| Error::io(path, e))?;
        f.write_all(&(json.len() as u64).to_le_bytes())
            .map_err(|e| Error::io(path, e))?;
        f.write_all(&json).map_err(|e| Error::io(path, e))?;
        for layer in &self.layers {
            let mut buf = Vec::with_capacity(layer.param_count());
            layer.visit_params(&mut |p| buf.extend_from_slice(p));
            f.write_all(&(buf.len() as u64).to_le_bytes())
                .map_err(|e| Error::io(path, e))?;
            for v in buf {
                f.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))?;
            }
        }
        f.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Model> {
        let path = path.as_ref();
        let mut f = std::io::BufReader::new(
            std::fs::File::open(path).map_err(|e| Error::io(path, e))?,
        );
        let mut magic = [0u8; 8];
        f.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
        if &magic != b"TBMODEL1" {
            return Err(Error::Format(format!(
                "{}: not a model checkpoint",
                path.display()
            )));
        }
        let mut len8 = [0u8; 8];
        f.read_exact(&mut len8).map_err(|e| Error::io(path, e))?;
        let json_len = u64::from_le_bytes(len8) as usize;
        let mut json = vec![0u8; json_len];
        f.read_exact(&mut json).map_err(|e| Error::io(path, e))?;
        let spec: ArchitectureSpec = serde_json::from_slice(&json)?;
        let mut model = Model::instantiate(&spec, 0)?;
        for layer in model.layers.iter_mut() {
            f.read_exact(&mut len8).map_err(|e| Error::io(path, e))?;
            let n = u64::from_le_bytes(len8) as usize;
            if n != layer.param_count() {
                return Err(Error::Format(format!(
                    "{}: parameter block size {n} does not match the embedded spec",
                    path.display()
                )));
            }
            let mut bytes = vec![0u8; n * 4];
            f.read_exact(&mut bytes).map_err(|e| Error::io(path, e))?;
            let vals: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let mut off = 0;
            layer.visit_params_mut(&mut |p| {
                p.copy_from_slice(&vals[off..off + p.len()]);
                off += p.len();
            });
        }
        Ok(model)
    }
}

/// In-place softmax over the channel axis (numerically stabilized).
pub fn softmax_channels_inplace(logits: &mut Array4<f32>) {
    let (c, z, y, x) = logits.dim();
    let s = logits.as_slice_mut().expect("contiguous");
    let plane = z * y * x;
    for v in 0..plane {
        let mut maxv = f32::NEG_INFINITY;
        for ci in 0..c {
            maxv = maxv.max(s[ci * plane + v]);
        }
        let mut sum = 0f32;
        for ci in 0..c {
            let e = (s[ci * plane + v] - maxv).exp();
            s[ci * plane + v] = e;
            sum += e;
        }
        for ci in 0..c {
            s[ci * plane + v] /= sum;
        }
    }
}

/// Per-voxel argmax over the channel axis; ties resolve to the lowest
/// class index.
pub fn argmax_labels(logits: &Array4<f32>) -> Array3<u8> {
    let (c, z, y, x) = logits.dim();
    let mut out = Array3::<u8>::zeros((z, y, x));
    let s = logits.as_slice().expect("contiguous");
    let plane = z * y * x;
    for (v, lab) in out.iter_mut().enumerate() {
        let mut best = s[v];
        let mut best_c = 0usize;
        for ci in 1..c {
            let val = s[ci * plane + v];
            if val > best {
                best = val;
                best_c = ci;
            }
        }
        *lab = best_c as u8;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{build_spec, count_parameters, output_shape, Dimensionality, Family};
    use ndarray::Array4;

    #[test]
    fn instantiation_is_deterministic_per_seed() {
        let spec = build_spec(Family::UResNet, Dimensionality::TwoD, 1, None).unwrap();
        let a = Model::instantiate(&spec, 42).unwrap();
        let b = Model::instantiate(&spec, 42).unwrap();
        assert_eq!(a.snapshot(), b.snapshot());
        let c = Model::instantiate(&spec, 43).unwrap();
        assert_ne!(a.snapshot(), c.snapshot());
    }

    #[test]
    fn runtime_param_count_matches_spec_count() {
        for family in Family::ALL {
            for dim in [Dimensionality::TwoD, Dimensionality::ThreeD] {
                let spec = build_spec(family, dim, 2, None).unwrap();
                let model = Model::instantiate(&spec, 1).unwrap();
                assert_eq!(
                    model.param_count(),
                    count_parameters(&spec).unwrap(),
                    "{} {}",
                    family.name(),
                    dim.name()
                );
            }
        }
    }

    #[test]
    fn forward_probabilities_sum_to_one_even_on_zero_input() {
        for family in Family::ALL {
            let spec = build_spec(family, Dimensionality::TwoD, 1, None).unwrap();
            let model = Model::instantiate(&spec, 7).unwrap();
            let [z, y, x] = spec.input_size;
            let input = Array4::<f32>::zeros((1, z, y, x));
            let probs = model.forward(&input).unwrap();
            let expected = output_shape(&spec, spec.input_size).unwrap();
            assert_eq!(
                probs.dim(),
                (4, expected[0], expected[1], expected[2]),
                "{}",
                family.name()
            );
            let (c, zz, yy, xx) = probs.dim();
            for vz in 0..zz {
                for vy in 0..yy {
                    for vx in 0..xx {
                        let sum: f32 = (0..c).map(|ci| probs[[ci, vz, vy, vx]]).sum();
                        assert!((sum - 1.0).abs() < 1e-5);
                        assert!(probs.iter().all(|p| p.is_finite()));
                    }
                }
            }
        }
    }

    #[test]
    fn forward_shape_matches_output_shape_oracle() {
        // Valid-convolution graphs accept larger inputs; the runtime shape
        // must track the spec-level inference.
        let spec = build_spec(Family::Dm, Dimensionality::TwoD, 1, None).unwrap();
        let model = Model::instantiate(&spec, 3).unwrap();
        let input = Array4::<f32>::zeros((1, 1, 41, 35));
        let logits = model.forward_logits(&input).unwrap();
        let expect = output_shape(&spec, [1, 41, 35]).unwrap();
        assert_eq!(logits.dim(), (4, expect[0], expect[1], expect[2]));
    }

    #[test]
    fn checkpoint_roundtrip_preserves_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let spec = build_spec(Family::Kk, Dimensionality::TwoD, 2, None).unwrap();
        let model = Model::instantiate(&spec, 9).unwrap();
        let path = dir.path().join("model.tbm");
        model.save(&path).unwrap();
        let back = Model::load(&path).unwrap();
        assert_eq!(back.spec(), model.spec());
        let [z, y, x] = spec.input_size;
        let mut input = Array4::<f32>::zeros((2, z, y, x));
        input.mapv_inplace(|_| 0.3);
        input[[0, 0, 20, 20]] = -1.0;
        let a = model.forward(&input).unwrap();
        let b = back.forward(&input).unwrap();
        assert_eq!(a, b);
    }
}
