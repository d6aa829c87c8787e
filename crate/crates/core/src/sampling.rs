//! Overlap-controlled patch grids and training-sample extraction.
//!
//! A sampling plan places output-sized windows on a stride grid per axis,
//! clamping the final origin to the volume boundary so that every voxel is
//! covered. Training extraction pairs each output window with a larger,
//! centered input window read from the stacked modality grid (zero-padded
//! where it hangs outside the volume) and skips windows whose ground truth
//! is entirely background.

use ndarray::{Array3, Array4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{stack_modalities, Case};

/// Patch-extraction overlap levels: roughly 0%, 50% and 90% overlap,
/// realized as stride divisors 1, 2 and 8 of the patch size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverlapLevel {
    Null,
    Medium,
    High,
}

impl OverlapLevel {
    pub fn stride_divisor(self) -> usize {
        match self {
            OverlapLevel::Null => 1,
            OverlapLevel::Medium => 2,
            OverlapLevel::High => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            OverlapLevel::Null => "null",
            OverlapLevel::Medium => "medium",
            OverlapLevel::High => "high",
        }
    }

    /// Per-axis stride: `floor(patch_size / divisor)`, at least 1.
    pub fn stride(self, patch_size: [usize; 3]) -> [usize; 3] {
        let d = self.stride_divisor();
        patch_size.map(|p| (p / d).max(1))
    }
}

impl std::str::FromStr for OverlapLevel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "null" | "none" | "0" => Ok(OverlapLevel::Null),
            "medium" | "med" | "50" => Ok(OverlapLevel::Medium),
            "high" | "90" => Ok(OverlapLevel::High),
            other => Err(Error::InvalidArgument(format!(
                "unknown overlap level '{other}' (expected null|medium|high)"
            ))),
        }
    }
}

/// Patch geometry over one volume: patch size, per-axis stride, and the
/// ordered list of patch origins.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplingPlan {
    pub patch_size: [usize; 3],
    pub stride: [usize; 3],
    pub volume_dims: [usize; 3],
    pub origins: Vec<[usize; 3]>,
}

impl SamplingPlan {
    pub fn origin_count(&self) -> usize {
        self.origins.len()
    }

    /// Compact JSON document for experiment provenance (origins are fully
    /// determined by the grid parameters, so only the count is recorded).
    pub fn provenance_json(&self) -> serde_json::Value {
        serde_json::json!({
            "patch_size": self.patch_size,
            "stride": self.stride,
            "volume_dims": self.volume_dims,
            "origin_count": self.origin_count(),
        })
    }
}

fn axis_origins(dim: usize, patch: usize, stride: usize) -> Vec<usize> {
    let last = dim - patch;
    let mut out = Vec::with_capacity(last / stride + 2);
    let mut o = 0;
    while o <= last {
        out.push(o);
        if o == last {
            return out;
        }
        o += stride;
    }
    // Stride overshot the boundary: clamp a final origin onto it.
    out.push(last);
    out
}

/// Plan a patch grid over a volume. Per axis, origins are `{0, s, 2s, ...}`
/// with the final origin clamped to `dim - patch` so the union of patches
/// covers the whole volume.
pub fn plan_grid(
    volume_dims: [usize; 3],
    patch_size: [usize; 3],
    level: OverlapLevel,
) -> Result<SamplingPlan> {
    for a in 0..3 {
        if patch_size[a] == 0 {
            return Err(Error::InvalidArgument(format!(
                "patch size must be >= 1 per axis, got {patch_size:?}"
            )));
        }
        if patch_size[a] > volume_dims[a] {
            return Err(Error::InvalidArgument(format!(
                "patch {patch_size:?} larger than volume {volume_dims:?} on axis {a}"
            )));
        }
    }
    let stride = level.stride(patch_size);
    let zs = axis_origins(volume_dims[0], patch_size[0], stride[0]);
    let ys = axis_origins(volume_dims[1], patch_size[1], stride[1]);
    let xs = axis_origins(volume_dims[2], patch_size[2], stride[2]);
    let mut origins = Vec::with_capacity(zs.len() * ys.len() * xs.len());
    for &z in &zs {
        for &y in &ys {
            for &x in &xs {
                origins.push([z, y, x]);
            }
        }
    }
    Ok(SamplingPlan {
        patch_size,
        stride,
        volume_dims,
        origins,
    })
}

/// One training sample: a multi-channel input window, the centered label
/// window it predicts, and per-voxel loss weights (0 on background).
#[derive(Debug, Clone)]
pub struct TrainingSample {
    pub origin: [usize; 3],
    /// `[c, z, y, x]`, input size of the architecture.
    pub input: Array4<f32>,
    /// `[z, y, x]`, output size of the architecture.
    pub target: Array3<u8>,
    pub weights: Array3<f32>,
}

/// Per-voxel loss weights: 1.0 on tissue (classes 1..=3), 0.0 on background.
pub fn compute_sample_weights(target: &Array3<u8>) -> Array3<f32> {
    target.mapv(|v| if v == 0 { 0.0 } else { 1.0 })
}

/// Crop a window from the stacked grid with zero padding where the window
/// exceeds the volume bounds. `start` may be negative.
pub fn crop_padded(stacked: &Array4<f32>, start: [isize; 3], size: [usize; 3]) -> Array4<f32> {
    let (c, dz, dy, dx) = stacked.dim();
    let dims = [dz, dy, dx];
    let mut out = Array4::<f32>::zeros((c, size[0], size[1], size[2]));
    // Intersection of [start, start+size) with [0, dims) per axis.
    let mut src_lo = [0usize; 3];
    let mut dst_lo = [0usize; 3];
    let mut len = [0usize; 3];
    for a in 0..3 {
        let lo = start[a].max(0) as usize;
        let hi = (start[a] + size[a] as isize).min(dims[a] as isize);
        if hi <= lo as isize {
            return out; // window entirely outside
        }
        src_lo[a] = lo;
        dst_lo[a] = (lo as isize - start[a]) as usize;
        len[a] = hi as usize - lo;
    }
    let src = stacked.slice(ndarray::s![
        ..,
        src_lo[0]..src_lo[0] + len[0],
        src_lo[1]..src_lo[1] + len[1],
        src_lo[2]..src_lo[2] + len[2]
    ]);
    out.slice_mut(ndarray::s![
        ..,
        dst_lo[0]..dst_lo[0] + len[0],
        dst_lo[1]..dst_lo[1] + len[1],
        dst_lo[2]..dst_lo[2] + len[2]
    ])
    .assign(&src);
    out
}

/// Extract training samples for a plan built over `output_size` windows.
/// Yields one sample per plan origin whose output window contains at least
/// one tissue voxel, in plan order. The returned stream owns its data.
pub fn extract_training_samples(
    case: &Case,
    plan: &SamplingPlan,
    input_size: [usize; 3],
    output_size: [usize; 3],
) -> Result<impl Iterator<Item = TrainingSample>> {
    let gt = case.require_ground_truth()?;
    if plan.patch_size != output_size {
        return Err(Error::InvalidArgument(format!(
            "plan patch size {:?} does not match output size {:?}",
            plan.patch_size, output_size
        )));
    }
    if plan.volume_dims != case.dims() {
        return Err(Error::DimensionMismatch {
            context: "sampling plan volume".into(),
            expected: case.dims(),
            got: plan.volume_dims,
        });
    }
    let mut margin = [0usize; 3];
    for a in 0..3 {
        if input_size[a] < output_size[a] || (input_size[a] - output_size[a]) % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "input size {input_size:?} must exceed output size {output_size:?} by an even margin per axis"
            )));
        }
        margin[a] = (input_size[a] - output_size[a]) / 2;
    }
    let stacked = stack_modalities(case)?;
    let labels = gt.labels.clone();
    let origins = plan.origins.clone();

    Ok(origins.into_iter().filter_map(move |origin| {
        let target = labels
            .slice(ndarray::s![
                origin[0]..origin[0] + output_size[0],
                origin[1]..origin[1] + output_size[1],
                origin[2]..origin[2] + output_size[2]
            ])
            .to_owned();
        if target.iter().all(|&v| v == 0) {
            return None;
        }
        let start = [
            origin[0] as isize - margin[0] as isize,
            origin[1] as isize - margin[1] as isize,
            origin[2] as isize - margin[2] as isize,
        ];
        let input = crop_padded(&stacked, start, input_size);
        let weights = compute_sample_weights(&target);
        Some(TrainingSample {
            origin,
            input,
            target,
            weights,
        })
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_phantom, PhantomConfig};
    use proptest::prelude::*;

    #[test]
    fn paper_patch_counts_256_cube() {
        let null = plan_grid([256; 3], [32; 3], OverlapLevel::Null).unwrap();
        assert_eq!(null.stride, [32; 3]);
        assert_eq!(null.origin_count(), 512);
        let medium = plan_grid([256; 3], [32; 3], OverlapLevel::Medium).unwrap();
        assert_eq!(medium.stride, [16; 3]);
        assert_eq!(medium.origin_count(), 3375);
        let high = plan_grid([256; 3], [32; 3], OverlapLevel::High).unwrap();
        assert_eq!(high.stride, [4; 3]);
        assert_eq!(high.origin_count(), 185_193);
    }

    #[test]
    fn exact_fit_yields_single_origin() {
        for level in [OverlapLevel::Null, OverlapLevel::Medium, OverlapLevel::High] {
            let plan = plan_grid([32; 3], [32; 3], level).unwrap();
            assert_eq!(plan.origins, vec![[0, 0, 0]]);
        }
    }

    #[test]
    fn non_divisible_axis_gets_clamped_origin() {
        // 10 - 4 = 6, stride 4 -> {0, 4} then clamped 6.
        let plan = plan_grid([10, 4, 4], [4, 4, 4], OverlapLevel::Null).unwrap();
        let zs: Vec<usize> = plan.origins.iter().map(|o| o[0]).collect();
        assert_eq!(zs, vec![0, 4, 6]);
    }

    #[test]
    fn patch_larger_than_volume_is_error() {
        assert!(plan_grid([16; 3], [32; 3], OverlapLevel::Null).is_err());
    }

    #[test]
    fn origins_sorted_unique_and_in_bounds() {
        let plan = plan_grid([45, 33, 40], [16, 16, 16], OverlapLevel::High).unwrap();
        let mut seen = std::collections::HashSet::new();
        let mut prev: Option<[usize; 3]> = None;
        for &o in &plan.origins {
            assert!(seen.insert(o), "duplicate origin {o:?}");
            if let Some(p) = prev {
                assert!(p < o, "origins not lexicographically sorted");
            }
            prev = Some(o);
            for a in 0..3 {
                assert!(o[a] + plan.patch_size[a] <= plan.volume_dims[a]);
            }
        }
    }

    #[test]
    fn interior_coverage_under_high_overlap() {
        // stride s = P/8: interior voxels are covered by exactly (P/s)^3 patches.
        let plan = plan_grid([64; 3], [16; 3], OverlapLevel::High).unwrap();
        let s = plan.stride[0];
        let expect = (16 / s).pow(3);
        let mut cover = Array3::<u32>::zeros((64, 64, 64));
        for &o in &plan.origins {
            let mut sl = cover.slice_mut(ndarray::s![o[0]..o[0] + 16, o[1]..o[1] + 16, o[2]..o[2] + 16]);
            sl += 1;
        }
        assert_eq!(cover[[32, 32, 32]], expect as u32);
        assert!(cover.iter().all(|&c| c >= 1));
    }

    #[test]
    fn counts_monotone_in_overlap() {
        let dims = [50, 41, 37];
        let p = [12, 12, 12];
        let n0 = plan_grid(dims, p, OverlapLevel::Null).unwrap().origin_count();
        let n1 = plan_grid(dims, p, OverlapLevel::Medium).unwrap().origin_count();
        let n2 = plan_grid(dims, p, OverlapLevel::High).unwrap().origin_count();
        assert!(n0 <= n1 && n1 <= n2);
    }

    #[test]
    fn extraction_skips_background_and_pads_input() {
        let case = generate_phantom(&PhantomConfig::new(9, [64, 64, 64], 0.0, 1)).unwrap();
        let plan = plan_grid([64; 3], [16; 3], OverlapLevel::Null).unwrap();
        let samples: Vec<_> = extract_training_samples(&case, &plan, [34, 34, 34], [16, 16, 16])
            .unwrap()
            .collect();
        // Tissue-free corners are skipped.
        assert!(samples.len() < plan.origin_count());
        assert!(!samples.is_empty());
        for s in &samples {
            assert!(s.target.iter().any(|&v| v != 0));
            assert_eq!(s.input.dim(), (1, 34, 34, 34));
            // weight = 0 exactly where target = background
            for (w, &t) in s.weights.iter().zip(s.target.iter()) {
                assert_eq!(*w != 0.0, t != 0);
            }
        }
        // A border sample's input window hangs 9 voxels outside the volume;
        // its first z-plane reads entirely from the zero padding.
        let border = samples.iter().find(|s| s.origin[0] == 0).unwrap();
        assert!(border
            .input
            .slice(ndarray::s![0, 0, .., ..])
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn extraction_without_margin_equals_crop() {
        let case = generate_phantom(&PhantomConfig::new(4, [32, 32, 32], 0.0, 1)).unwrap();
        let plan = plan_grid([32; 3], [16; 3], OverlapLevel::Null).unwrap();
        let stacked = stack_modalities(&case).unwrap();
        for s in extract_training_samples(&case, &plan, [16; 3], [16; 3]).unwrap() {
            let o = s.origin;
            let crop = stacked.slice(ndarray::s![.., o[0]..o[0] + 16, o[1]..o[1] + 16, o[2]..o[2] + 16]);
            assert_eq!(s.input, crop.to_owned());
        }
    }

    #[test]
    fn extraction_is_deterministic() {
        let case = generate_phantom(&PhantomConfig::new(6, [48, 48, 48], 5.0, 1)).unwrap();
        let plan = plan_grid([48; 3], [16; 3], OverlapLevel::Medium).unwrap();
        let a: Vec<_> = extract_training_samples(&case, &plan, [16; 3], [16; 3])
            .unwrap()
            .map(|s| s.origin)
            .collect();
        let b: Vec<_> = extract_training_samples(&case, &plan, [16; 3], [16; 3])
            .unwrap()
            .map(|s| s.origin)
            .collect();
        assert_eq!(a, b);
    }

    #[test]
    fn extraction_requires_ground_truth() {
        let mut case = generate_phantom(&PhantomConfig::new(6, [32, 32, 32], 0.0, 1)).unwrap();
        case.ground_truth = None;
        let plan = plan_grid([32; 3], [16; 3], OverlapLevel::Null).unwrap();
        assert!(extract_training_samples(&case, &plan, [16; 3], [16; 3]).is_err());
    }

    #[test]
    fn weight_examples() {
        let all_wm = Array3::<u8>::from_elem((2, 2, 2), 3);
        assert!(compute_sample_weights(&all_wm).iter().all(|&w| w == 1.0));
        let all_bg = Array3::<u8>::zeros((2, 2, 2));
        assert!(compute_sample_weights(&all_bg).iter().all(|&w| w == 0.0));
        let mut half = Array3::<u8>::zeros((2, 2, 2));
        half.slice_mut(ndarray::s![0, .., ..]).fill(2);
        assert_eq!(compute_sample_weights(&half).sum(), 4.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn every_voxel_covered(
            dz in 4usize..40, dy in 4usize..40, dx in 4usize..40,
            pz in 1usize..12, py in 1usize..12, px in 1usize..12,
            level in prop_oneof![
                Just(OverlapLevel::Null),
                Just(OverlapLevel::Medium),
                Just(OverlapLevel::High)
            ],
        ) {
            prop_assume!(pz <= dz && py <= dy && px <= dx);
            let plan = plan_grid([dz, dy, dx], [pz, py, px], level).unwrap();
            let mut cover = Array3::<u8>::zeros((dz, dy, dx));
            for &o in &plan.origins {
                cover
                    .slice_mut(ndarray::s![o[0]..o[0] + pz, o[1]..o[1] + py, o[2]..o[2] + px])
                    .fill(1);
            }
            prop_assert!(cover.iter().all(|&c| c == 1));
        }
    }
}
