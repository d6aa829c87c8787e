//! Dense inference and majority-vote fusion of overlapping patch
//! predictions.
//!
//! Patch predictions are defined per patch: the input window around each
//! output window is read with zero padding at volume borders and pushed
//! through the network; the per-voxel argmax labels are the patch's votes.
//!
//! Two observations make high-overlap inference tractable on a CPU:
//!
//! * DM is built from valid convolutions only, so a voxel's prediction
//!   depends only on its receptive field — every patch covering the voxel
//!   predicts the same label. The dense map is computed once in z-slabs
//!   (each slab is itself just a large patch) and patch votes are crops of
//!   it.
//! * KK additionally carries a 3x-downscaled path, which breaks shift
//!   invariance modulo 3: a patch's prediction at a voxel depends only on
//!   the patch origin modulo the downsampling factor. One dense map per
//!   origin phase (27 in 3D, 9 in 2D) covers every patch exactly.
//!
//! U-shaped families use same-padding and pooling, so patches genuinely
//! disagree on overlaps; they are evaluated patch by patch and fused by
//! majority vote.

use ndarray::{s, Array3, Array4};
use rayon::prelude::*;

use crate::arch::{Family, LayerKind};
use crate::error::{Error, Result};
use crate::nn::model::{argmax_labels, Model};
use crate::sampling::{crop_padded, plan_grid, OverlapLevel, SamplingPlan};
use crate::volume::{stack_modalities, Case, LabelMap, NUM_CLASSES};

/// Per-voxel vote accumulator: one counter per class plus a coverage grid.
#[derive(Debug, Clone)]
pub struct VoteGrid {
    pub votes: Array4<u32>,
    pub coverage: Array3<u32>,
}

impl VoteGrid {
    pub fn new(dims: [usize; 3]) -> VoteGrid {
        VoteGrid {
            votes: Array4::zeros((NUM_CLASSES, dims[0], dims[1], dims[2])),
            coverage: Array3::zeros((dims[0], dims[1], dims[2])),
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        let d = self.coverage.dim();
        [d.0, d.1, d.2]
    }

    /// Merge another grid by addition (used by parallel accumulation).
    pub fn merge(&mut self, other: &VoteGrid) {
        self.votes += &other.votes;
        self.coverage += &other.coverage;
    }
}

/// Add one predicted patch's votes at `origin`.
pub fn accumulate_votes(grid: &mut VoteGrid, origin: [usize; 3], patch: &Array3<u8>) -> Result<()> {
    let dims = grid.dims();
    let p = patch.dim();
    let p = [p.0, p.1, p.2];
    for a in 0..3 {
        if origin[a] + p[a] > dims[a] {
            return Err(Error::InvalidArgument(format!(
                "patch {p:?} at {origin:?} exceeds vote grid {dims:?}"
            )));
        }
    }
    let votes = grid.votes.as_slice_mut().expect("contiguous votes");
    let plane = dims[0] * dims[1] * dims[2];
    let coverage = grid.coverage.as_slice_mut().expect("contiguous coverage");
    let patch_s = patch.as_slice().expect("contiguous patch");
    let mut i = 0;
    for z in 0..p[0] {
        for y in 0..p[1] {
            let base = ((origin[0] + z) * dims[1] + origin[1] + y) * dims[2] + origin[2];
            for x in 0..p[2] {
                let lab = patch_s[i] as usize;
                votes[lab * plane + base + x] += 1;
                coverage[base + x] += 1;
                i += 1;
            }
        }
    }
    Ok(())
}

/// Per-voxel majority label; ties resolve to the lowest class index and
/// uncovered voxels stay background.
pub fn fuse_votes(grid: &VoteGrid) -> LabelMap {
    let [dz, dy, dx] = grid.dims();
    let mut labels = Array3::<u8>::zeros((dz, dy, dx));
    for ((z, y, x), lab) in labels.indexed_iter_mut() {
        if grid.coverage[[z, y, x]] == 0 {
            continue;
        }
        let mut best = 0u32;
        let mut best_c = 0u8;
        for c in 0..NUM_CLASSES {
            let v = grid.votes[[c, z, y, x]];
            if v > best {
                best = v;
                best_c = c as u8;
            }
        }
        *lab = best_c;
    }
    LabelMap { labels }
}

// --- prediction sources -----------------------------------------------------

enum PredictionSource {
    /// One label per voxel; every covering patch votes identically.
    Dense(Array3<u8>),
    /// One dense label map per origin phase (KK).
    PhaseDense {
        factor: [usize; 3],
        maps: Vec<Array3<u8>>,
    },
    /// Individually predicted patches, keyed by plan order.
    PatchWise(Vec<Array3<u8>>),
}

impl PredictionSource {
    fn patch(&self, plan_index: usize, origin: [usize; 3], size: [usize; 3]) -> Array3<u8> {
        match self {
            PredictionSource::Dense(map) => map
                .slice(s![
                    origin[0]..origin[0] + size[0],
                    origin[1]..origin[1] + size[1],
                    origin[2]..origin[2] + size[2]
                ])
                .to_owned(),
            PredictionSource::PhaseDense { factor, maps } => {
                let idx = ((origin[0] % factor[0]) * factor[1] + origin[1] % factor[1])
                    * factor[2]
                    + origin[2] % factor[2];
                maps[idx]
                    .slice(s![
                        origin[0]..origin[0] + size[0],
                        origin[1]..origin[1] + size[1],
                        origin[2]..origin[2] + size[2]
                    ])
                    .to_owned()
            }
            PredictionSource::PatchWise(patches) => patches[plan_index].clone(),
        }
    }
}

fn build_source(
    model: &Model,
    stacked: &Array4<f32>,
    plan: &SamplingPlan,
) -> Result<PredictionSource> {
    match model.spec().family {
        Family::Dm => Ok(PredictionSource::Dense(dense_valid_labels(
            model, stacked,
        )?)),
        Family::Kk => {
            let kk = KkDense::prepare(model)?;
            let (factor, maps) = kk.phase_maps(stacked)?;
            Ok(PredictionSource::PhaseDense { factor, maps })
        }
        Family::UNet | Family::UResNet => {
            Ok(PredictionSource::PatchWise(patchwise_labels(
                model, stacked, plan,
            )?))
        }
    }
}

/// Stream of (origin, predicted label patch) pairs in plan order.
pub fn predict_patches<'a>(
    model: &'a Model,
    case: &Case,
    plan: &'a SamplingPlan,
) -> Result<impl Iterator<Item = ([usize; 3], Array3<u8>)> + 'a> {
    let spec = model.spec();
    if plan.patch_size != spec.output_size {
        return Err(Error::InvalidArgument(format!(
            "plan patch size {:?} does not match model output size {:?}",
            plan.patch_size, spec.output_size
        )));
    }
    if plan.volume_dims != case.dims() {
        return Err(Error::DimensionMismatch {
            context: "prediction plan volume".into(),
            expected: case.dims(),
            got: plan.volume_dims,
        });
    }
    if case.modality_count() != spec.in_channels {
        return Err(Error::InvalidArgument(format!(
            "model expects {} modalities, case has {}",
            spec.in_channels,
            case.modality_count()
        )));
    }
    let stacked = stack_modalities(case)?;
    let source = build_source(model, &stacked, plan)?;
    let size = plan.patch_size;
    Ok(plan
        .origins
        .iter()
        .enumerate()
        .map(move |(i, &origin)| (origin, source.patch(i, origin, size))))
}

/// Tile, predict, accumulate and fuse; voxels outside the brain mask are
/// forced to background. The case must already be preprocessed.
pub fn segment_case(model: &Model, case: &Case, level: OverlapLevel) -> Result<LabelMap> {
    let plan = plan_grid(case.dims(), model.spec().output_size, level)?;
    let mut grid = VoteGrid::new(case.dims());
    for (origin, patch) in predict_patches(model, case, &plan)? {
        accumulate_votes(&mut grid, origin, &patch)?;
    }
    let mut fused = fuse_votes(&grid);
    for (lab, &m) in fused.labels.iter_mut().zip(case.brain_mask.iter()) {
        if m == 0 {
            *lab = 0;
        }
    }
    Ok(fused)
}

// --- dense pass for pure valid-convolution graphs ---------------------------

/// Slab height used when running a valid-convolution graph densely.
const DENSE_SLAB: usize = 16;

/// Dense per-voxel labels for a shift-invariant (valid-convolution) model:
/// the volume is processed in z-slabs, each slab being one large "patch"
/// whose input window is zero-padded exactly like any other patch window.
fn dense_valid_labels(model: &Model, stacked: &Array4<f32>) -> Result<Array3<u8>> {
    let (_, dz, dy, dx) = stacked.dim();
    let margin = model.spec().margin();
    let starts: Vec<usize> = (0..dz).step_by(DENSE_SLAB).collect();
    let slabs: Vec<Result<(usize, Array3<u8>)>> = starts
        .par_iter()
        .map(|&z0| {
            let h = DENSE_SLAB.min(dz - z0);
            let start = [
                z0 as isize - margin[0] as isize,
                -(margin[1] as isize),
                -(margin[2] as isize),
            ];
            let size = [h + 2 * margin[0], dy + 2 * margin[1], dx + 2 * margin[2]];
            let window = crop_padded(stacked, start, size);
            let logits = model.forward_logits(&window)?;
            let got = logits.dim();
            if got.1 != h || got.2 != dy || got.3 != dx {
                return Err(Error::Architecture(format!(
                    "dense slab produced {:?}, expected ({h},{dy},{dx})",
                    (got.1, got.2, got.3)
                )));
            }
            Ok((z0, argmax_labels(&logits)))
        })
        .collect();
    let mut out = Array3::<u8>::zeros((dz, dy, dx));
    for slab in slabs {
        let (z0, labels) = slab?;
        let h = labels.dim().0;
        out.slice_mut(s![z0..z0 + h, .., ..]).assign(&labels);
    }
    Ok(out)
}

// --- patch-wise prediction for u-shaped graphs -------------------------------

/// Predict every plan origin individually. For 2D models all origins that
/// share a (y, x) position are batched into one multi-slice forward pass,
/// which is exact because every kernel has z extent 1.
fn patchwise_labels(
    model: &Model,
    stacked: &Array4<f32>,
    plan: &SamplingPlan,
) -> Result<Vec<Array3<u8>>> {
    let spec = model.spec();
    let size = spec.output_size;
    let margin = spec.margin();
    let (_, dz, _, _) = stacked.dim();
    let two_d = spec.input_size[0] == 1;

    if two_d && dz > 1 {
        // Group by (y, x); run each group once over the full z extent.
        let mut groups: Vec<([usize; 2], Vec<usize>)> = Vec::new();
        for (i, &o) in plan.origins.iter().enumerate() {
            match groups.last_mut() {
                Some((yx, idxs)) if *yx == [o[1], o[2]] => idxs.push(i),
                _ => groups.push(([o[1], o[2]], vec![i])),
            }
        }
        let results: Vec<Result<Vec<(usize, Array3<u8>)>>> = groups
            .par_iter()
            .map(|(yx, idxs)| {
                let start = [
                    0isize,
                    yx[0] as isize - margin[1] as isize,
                    yx[1] as isize - margin[2] as isize,
                ];
                let win = [dz, size[1] + 2 * margin[1], size[2] + 2 * margin[2]];
                let window = crop_padded(stacked, start, win);
                let logits = model.forward_logits(&window)?;
                let labels = argmax_labels(&logits);
                Ok(idxs
                    .iter()
                    .map(|&i| {
                        let z = plan.origins[i][0];
                        (i, labels.slice(s![z..z + 1, .., ..]).to_owned())
                    })
                    .collect())
            })
            .collect();
        let mut out: Vec<Option<Array3<u8>>> = vec![None; plan.origins.len()];
        for group in results {
            for (i, lab) in group? {
                out[i] = Some(lab);
            }
        }
        return Ok(out.into_iter().map(|o| o.expect("all plan origins")).collect());
    }

    plan.origins
        .par_iter()
        .map(|&o| {
            let start = [
                o[0] as isize - margin[0] as isize,
                o[1] as isize - margin[1] as isize,
                o[2] as isize - margin[2] as isize,
            ];
            let win = [
                size[0] + 2 * margin[0],
                size[1] + 2 * margin[1],
                size[2] + 2 * margin[2],
            ];
            let window = crop_padded(stacked, start, win);
            model.predict_labels(&window)
        })
        .collect()
}

// --- KK phase-dense inference ------------------------------------------------

/// Structural handles into a KK model: the normal-resolution chain, the
/// low-resolution chain, and the point-wise fusion tail.
struct KkDense<'m> {
    model: &'m Model,
    normal: std::ops::Range<usize>,
    low: std::ops::Range<usize>,
    fusion: std::ops::Range<usize>,
    factor: [usize; 3],
    crop_margin: [usize; 3],
}

impl<'m> KkDense<'m> {
    fn prepare(model: &'m Model) -> Result<KkDense<'m>> {
        let spec = model.spec();
        if spec.family != Family::Kk {
            return Err(Error::Architecture("phase-dense inference is KK-only".into()));
        }
        let mut crop_id = None;
        let mut down_id = None;
        let mut up_id = None;
        let mut concat_id = None;
        let mut factor = [1; 3];
        let mut crop_margin = [0; 3];
        for l in &spec.layers {
            match &l.op {
                LayerKind::Crop { margin } if l.inputs.is_empty() => {
                    crop_id = Some(l.id);
                    crop_margin = *margin;
                }
                LayerKind::Downsample { factor: f } => {
                    down_id = Some(l.id);
                    factor = *f;
                }
                LayerKind::Upsample { .. } => up_id = Some(l.id),
                LayerKind::Concat => concat_id = Some(l.id),
                _ => {}
            }
        }
        let (crop_id, down_id, up_id, concat_id) = match (crop_id, down_id, up_id, concat_id) {
            (Some(a), Some(b), Some(c), Some(d)) => (a, b, c, d),
            _ => {
                return Err(Error::Architecture(
                    "KK graph is missing its crop/downsample/upsample/concat structure".into(),
                ))
            }
        };
        // Builder layout: crop, normal chain, downsample, low chain,
        // upsample, concat, fusion chain, head.
        if !(crop_id < down_id && down_id < up_id && up_id < concat_id) {
            return Err(Error::Architecture("unexpected KK layer ordering".into()));
        }
        Ok(KkDense {
            model,
            normal: crop_id + 1..down_id,
            low: down_id + 1..up_id,
            fusion: concat_id + 1..spec.layers.len(),
            factor,
            crop_margin,
        })
    }

    /// Run a pure chain of layers on one input, keeping only the final
    /// output.
    fn run_chain(&self, range: std::ops::Range<usize>, input: Array4<f32>) -> Result<Array4<f32>> {
        let mut cur = input;
        for i in range {
            let (out, _) = self.model.layers()[i].forward(&[&cur])?;
            cur = out;
        }
        Ok(cur)
    }

    /// One dense label map per origin phase.
    fn phase_maps(&self, stacked: &Array4<f32>) -> Result<([usize; 3], Vec<Array3<u8>>)> {
        let spec = self.model.spec();
        let (c_in, dz, dy, dx) = stacked.dim();
        let dims = [dz, dy, dx];
        let margin = spec.margin(); // 24 on active axes
        let f = self.factor;

        // Normal path densely: pad by the normal-path margin (the crop
        // leaves margin - crop_margin = 8 on active axes).
        let normal_margin = [
            margin[0].saturating_sub(self.crop_margin[0]),
            margin[1].saturating_sub(self.crop_margin[1]),
            margin[2].saturating_sub(self.crop_margin[2]),
        ];
        let padded = crop_padded(
            stacked,
            [
                -(normal_margin[0] as isize),
                -(normal_margin[1] as isize),
                -(normal_margin[2] as isize),
            ],
            [
                dims[0] + 2 * normal_margin[0],
                dims[1] + 2 * normal_margin[1],
                dims[2] + 2 * normal_margin[2],
            ],
        );
        let normal_feats = self.run_chain(self.normal.clone(), padded)?;
        let nf_dims = normal_feats.dim();
        if (nf_dims.1, nf_dims.2, nf_dims.3) != (dims[0], dims[1], dims[2]) {
            return Err(Error::Architecture(format!(
                "normal path dense output {:?} does not cover the volume {dims:?}",
                nf_dims
            )));
        }

        let phases: Vec<[usize; 3]> = {
            let mut v = Vec::new();
            for pz in 0..f[0] {
                for py in 0..f[1] {
                    for px in 0..f[2] {
                        v.push([pz, py, px]);
                    }
                }
            }
            v
        };

        let maps: Vec<Result<Array3<u8>>> = phases
            .par_iter()
            .map(|&p| self.phase_map(stacked, &normal_feats, p, dims, c_in))
            .collect();
        let maps = maps.into_iter().collect::<Result<Vec<_>>>()?;
        Ok((f, maps))
    }

    /// Dense label map valid for every patch origin congruent to `p`
    /// modulo the downsampling factor.
    fn phase_map(
        &self,
        stacked: &Array4<f32>,
        normal_feats: &Array4<f32>,
        p: [usize; 3],
        dims: [usize; 3],
        c_in: usize,
    ) -> Result<Array3<u8>> {
        let f = self.factor;
        // Per axis: map each output voxel v to the global coarse window
        // index g(v) of the low-resolution feature it receives, and record
        // the coarse index range that must be materialized.
        //
        // For an active axis (factor 3): a patch at origin o (o ≡ p mod 3)
        // downsamples its context window [o-24, o+out+24) at coordinates
        // o-23+3t; in global coarse coordinates c(g) = 3g + phi with
        // phi = (p+1) mod 3. Its upsampled feature for voxel v = o+u comes
        // from the coarse window starting at g(v) = (v - rho - 23 - phi)/3
        // with rho = (v - p) mod 3 — independent of o.
        let mut g_of_v: Vec<Vec<isize>> = Vec::with_capacity(3);
        let mut g_lo = [0isize; 3];
        let mut g_hi = [0isize; 3]; // exclusive, window-start indices
        let mut phi = [0isize; 3];
        let mut reduction = [0usize; 3]; // valid-conv shrink of the low chain
        for a in 0..3 {
            if f[a] == 1 {
                phi[a] = 0;
                reduction[a] = 0;
                g_of_v.push((0..dims[a] as isize).collect());
                g_lo[a] = 0;
                g_hi[a] = dims[a] as isize;
            } else {
                let fa = f[a] as isize;
                let off = (fa / 2) as isize; // downsample tap offset (1 for factor 3)
                let m = self.model.spec().margin()[a] as isize; // 24
                phi[a] = (p[a] as isize - m + off).rem_euclid(fa);
                reduction[a] = 16;
                let mut col = Vec::with_capacity(dims[a]);
                for v in 0..dims[a] as isize {
                    let rho = (v - p[a] as isize).rem_euclid(fa);
                    let g = (v - rho - (m - off) - phi[a]) / fa;
                    debug_assert_eq!((v - rho - (m - off) - phi[a]).rem_euclid(fa), 0);
                    col.push(g);
                }
                g_lo[a] = col[0];
                g_hi[a] = col[dims[a] - 1] + 1;
                g_of_v.push(col);
            }
        }

        // Materialize the zero-padded coarse volume covering every needed
        // window: window-start g plus the low chain's receptive extent.
        let mut d_lo = [0isize; 3];
        let mut d_len = [0usize; 3];
        for a in 0..3 {
            d_lo[a] = g_lo[a];
            d_len[a] = (g_hi[a] - g_lo[a]) as usize + reduction[a];
        }
        let mut coarse = Array4::<f32>::zeros((c_in, d_len[0], d_len[1], d_len[2]));
        for ci in 0..c_in {
            for gz in 0..d_len[0] {
                let vz = coord_of(gz as isize + d_lo[0], f[0], phi[0]);
                let Some(vz) = vz.filter(|&v| v < dims[0]) else { continue };
                for gy in 0..d_len[1] {
                    let vy = coord_of(gy as isize + d_lo[1], f[1], phi[1]);
                    let Some(vy) = vy.filter(|&v| v < dims[1]) else { continue };
                    for gx in 0..d_len[2] {
                        let vx = coord_of(gx as isize + d_lo[2], f[2], phi[2]);
                        let Some(vx) = vx.filter(|&v| v < dims[2]) else { continue };
                        coarse[[ci, gz, gy, gx]] = stacked[[ci, vz, vy, vx]];
                    }
                }
            }
        }
        let coarse_feats = self.run_chain(self.low.clone(), coarse)?;

        // Gather the per-voxel low-resolution features: voxel v reads the
        // coarse feature at window-start index g(v), i.e. offset g(v)-g_lo.
        let cl = coarse_feats.dim().0;
        let mut low_gathered = Array4::<f32>::zeros((cl, dims[0], dims[1], dims[2]));
        for c in 0..cl {
            for z in 0..dims[0] {
                let gz = (g_of_v[0][z] - g_lo[0]) as usize;
                for y in 0..dims[1] {
                    let gy = (g_of_v[1][y] - g_lo[1]) as usize;
                    for x in 0..dims[2] {
                        let gx = (g_of_v[2][x] - g_lo[2]) as usize;
                        low_gathered[[c, z, y, x]] = coarse_feats[[c, gz, gy, gx]];
                    }
                }
            }
        }

        // Point-wise fusion tail over the volume, in z-slabs.
        let cn = normal_feats.dim().0;
        let mut labels = Array3::<u8>::zeros((dims[0], dims[1], dims[2]));
        let mut z0 = 0;
        while z0 < dims[0] {
            let h = DENSE_SLAB.min(dims[0] - z0);
            let mut fused = Array4::<f32>::zeros((cn + cl, h, dims[1], dims[2]));
            fused
                .slice_mut(s![..cn, .., .., ..])
                .assign(&normal_feats.slice(s![.., z0..z0 + h, .., ..]));
            fused
                .slice_mut(s![cn.., .., .., ..])
                .assign(&low_gathered.slice(s![.., z0..z0 + h, .., ..]));
            let logits = self.run_chain(self.fusion.clone(), fused)?;
            labels
                .slice_mut(s![z0..z0 + h, .., ..])
                .assign(&argmax_labels(&logits));
            z0 += h;
        }
        Ok(labels)
    }
}

/// Volume coordinate sampled by coarse index g on a factor-f grid with
/// offset phi; None when it falls before the volume start.
fn coord_of(g: isize, f: usize, phi: isize) -> Option<usize> {
    let c = g * f as isize + phi;
    (c >= 0).then_some(c as usize)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{build_spec, Dimensionality, PatchConfig};
    use crate::phantom::{generate_phantom, PhantomConfig};
    use crate::sampling::plan_grid;
    use rand::{Rng, SeedableRng};

    fn gt_patches(
        labels: &Array3<u8>,
        plan: &SamplingPlan,
    ) -> Vec<([usize; 3], Array3<u8>)> {
        plan.origins
            .iter()
            .map(|&o| {
                let p = plan.patch_size;
                (
                    o,
                    labels
                        .slice(s![o[0]..o[0] + p[0], o[1]..o[1] + p[1], o[2]..o[2] + p[2]])
                        .to_owned(),
                )
            })
            .collect()
    }

    #[test]
    fn accumulation_examples() {
        let mut grid = VoteGrid::new([4, 4, 4]);
        let patch = Array3::<u8>::from_elem((2, 2, 2), 2);
        accumulate_votes(&mut grid, [0, 0, 0], &patch).unwrap();
        assert_eq!(grid.coverage[[0, 0, 0]], 1);
        assert_eq!(grid.coverage[[3, 3, 3]], 0);
        accumulate_votes(&mut grid, [0, 0, 0], &patch).unwrap();
        assert_eq!(grid.votes[[2, 1, 1, 1]], 2);
        assert!(accumulate_votes(&mut grid, [3, 3, 3], &patch).is_err());
    }

    #[test]
    fn vote_sum_equals_coverage() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut grid = VoteGrid::new([6, 6, 6]);
        for _ in 0..10 {
            let patch = Array3::from_shape_simple_fn((3, 3, 3), || rng.random_range(0..4u8));
            let o = [
                rng.random_range(0..4usize),
                rng.random_range(0..4usize),
                rng.random_range(0..4usize),
            ];
            accumulate_votes(&mut grid, o, &patch).unwrap();
        }
        for ((z, y, x), &cov) in grid.coverage.indexed_iter() {
            let total: u32 = (0..4).map(|c| grid.votes[[c, z, y, x]]).sum();
            assert_eq!(total, cov);
        }
    }

    #[test]
    fn fuse_mode_and_tie_break() {
        let mut grid = VoteGrid::new([1, 1, 1]);
        // CSF:1, GM:2 -> GM
        accumulate_votes(&mut grid, [0, 0, 0], &Array3::from_elem((1, 1, 1), 1)).unwrap();
        accumulate_votes(&mut grid, [0, 0, 0], &Array3::from_elem((1, 1, 1), 2)).unwrap();
        accumulate_votes(&mut grid, [0, 0, 0], &Array3::from_elem((1, 1, 1), 2)).unwrap();
        assert_eq!(fuse_votes(&grid).labels[[0, 0, 0]], 2);
        // tie CSF:2, GM:2 -> CSF (lower index)
        accumulate_votes(&mut grid, [0, 0, 0], &Array3::from_elem((1, 1, 1), 1)).unwrap();
        assert_eq!(fuse_votes(&grid).labels[[0, 0, 0]], 1);
        // zero coverage stays background
        let empty = VoteGrid::new([1, 1, 2]);
        assert_eq!(fuse_votes(&empty).labels[[0, 0, 1]], 0);
    }

    #[test]
    fn accumulation_order_is_irrelevant() {
        let case = generate_phantom(&PhantomConfig::new(3, [32, 32, 32], 0.0, 1)).unwrap();
        let labels = &case.ground_truth.as_ref().unwrap().labels;
        let plan = plan_grid([32; 3], [8; 3], OverlapLevel::Medium).unwrap();
        let patches = gt_patches(labels, &plan);
        let mut forward = VoteGrid::new([32; 3]);
        for (o, p) in &patches {
            accumulate_votes(&mut forward, *o, p).unwrap();
        }
        let mut reverse = VoteGrid::new([32; 3]);
        for (o, p) in patches.iter().rev() {
            accumulate_votes(&mut reverse, *o, p).unwrap();
        }
        assert_eq!(forward.votes, reverse.votes);
        assert_eq!(fuse_votes(&forward).labels, fuse_votes(&reverse).labels);
        // partitioned accumulation merged by addition gives the same grid
        let mut part_a = VoteGrid::new([32; 3]);
        let mut part_b = VoteGrid::new([32; 3]);
        for (i, (o, p)) in patches.iter().enumerate() {
            let target = if i % 2 == 0 { &mut part_a } else { &mut part_b };
            accumulate_votes(target, *o, p).unwrap();
        }
        part_a.merge(&part_b);
        assert_eq!(part_a.votes, forward.votes);
    }

    #[test]
    fn identity_reconstruction_across_levels() {
        let case = generate_phantom(&PhantomConfig::new(5, [34, 40, 33], 0.0, 1)).unwrap();
        let labels = &case.ground_truth.as_ref().unwrap().labels;
        for level in [OverlapLevel::Null, OverlapLevel::Medium, OverlapLevel::High] {
            let plan = plan_grid([34, 40, 33], [9, 12, 7], level).unwrap();
            let mut grid = VoteGrid::new([34, 40, 33]);
            for (o, p) in gt_patches(labels, &plan) {
                accumulate_votes(&mut grid, o, &p).unwrap();
            }
            assert!(grid.coverage.iter().all(|&c| c >= 1));
            assert_eq!(fuse_votes(&grid).labels, *labels, "level {level:?}");
        }
    }

    #[test]
    fn null_overlap_is_plain_tiling() {
        let plan = plan_grid([32; 3], [8; 3], OverlapLevel::Null).unwrap();
        let mut grid = VoteGrid::new([32; 3]);
        let patch = Array3::<u8>::from_elem((8, 8, 8), 3);
        for &o in &plan.origins {
            accumulate_votes(&mut grid, o, &patch).unwrap();
        }
        assert!(grid.coverage.iter().all(|&c| c == 1));
    }

    #[test]
    fn minority_corruption_is_repaired() {
        let case = generate_phantom(&PhantomConfig::new(8, [32, 32, 32], 0.0, 1)).unwrap();
        let labels = &case.ground_truth.as_ref().unwrap().labels;
        let plan = plan_grid([32; 3], [8; 3], OverlapLevel::High).unwrap();
        let mut grid = VoteGrid::new([32; 3]);
        let mut corrupted_cov = Array3::<u32>::zeros((32, 32, 32));
        for (o, mut p) in gt_patches(labels, &plan) {
            let corrupt = o.iter().all(|&c| c % 4 == 2);
            if corrupt {
                p.mapv_inplace(|v| (v + 1) % 4);
                let mut sl = corrupted_cov.slice_mut(s![o[0]..o[0] + 8, o[1]..o[1] + 8, o[2]..o[2] + 8]);
                sl += 1;
            }
            accumulate_votes(&mut grid, o, &p).unwrap();
        }
        // the corruption rule must stay a strict per-voxel minority
        for ((z, y, x), &cc) in corrupted_cov.indexed_iter() {
            assert!(2 * cc < grid.coverage[[z, y, x]], "voxel ({z},{y},{x})");
        }
        assert_eq!(fuse_votes(&grid).labels, *labels);
    }

    #[test]
    fn dm_dense_pass_matches_per_patch_prediction() {
        let spec = build_spec(Family::Dm, Dimensionality::TwoD, 1, None).unwrap();
        let model = Model::instantiate(&spec, 21).unwrap();
        let case = generate_phantom(&PhantomConfig::new(13, [32, 36, 40], 6.0, 1)).unwrap()
            .preprocessed()
            .unwrap();
        let stacked = stack_modalities(&case).unwrap();
        let dense = dense_valid_labels(&model, &stacked).unwrap();
        let plan = plan_grid(case.dims(), spec.output_size, OverlapLevel::Null).unwrap();
        let margin = spec.margin();
        for &o in plan.origins.iter().step_by(7) {
            let start = [
                o[0] as isize - margin[0] as isize,
                o[1] as isize - margin[1] as isize,
                o[2] as isize - margin[2] as isize,
            ];
            let win = crop_padded(
                &stacked,
                start,
                [
                    spec.output_size[0] + 2 * margin[0],
                    spec.output_size[1] + 2 * margin[1],
                    spec.output_size[2] + 2 * margin[2],
                ],
            );
            let direct = model.predict_labels(&win).unwrap();
            let crop = dense
                .slice(s![
                    o[0]..o[0] + spec.output_size[0],
                    o[1]..o[1] + spec.output_size[1],
                    o[2]..o[2] + spec.output_size[2]
                ])
                .to_owned();
            assert_eq!(direct, crop, "origin {o:?}");
        }
    }

    #[test]
    fn kk_phase_dense_matches_per_patch_prediction() {
        for dim in [Dimensionality::TwoD, Dimensionality::ThreeD] {
            let patch = match dim {
                Dimensionality::TwoD => PatchConfig { output_size: [1, 9, 9] },
                Dimensionality::ThreeD => PatchConfig { output_size: [9, 9, 9] },
            };
            let spec = build_spec(Family::Kk, dim, 1, Some(patch)).unwrap();
            let model = Model::instantiate(&spec, 31).unwrap();
            let dims = match dim {
                Dimensionality::TwoD => [4usize, 34, 37],
                Dimensionality::ThreeD => [33usize, 32, 35],
            };
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
            let stacked =
                Array4::from_shape_simple_fn((1, dims[0], dims[1], dims[2]), || {
                    rng.random_range(-1.0..1.0f32)
                });
            let kk = KkDense::prepare(&model).unwrap();
            let (factor, maps) = kk.phase_maps(&stacked).unwrap();
            let source = PredictionSource::PhaseDense { factor, maps };
            let plan = plan_grid(dims, spec.output_size, OverlapLevel::Medium).unwrap();
            let margin = spec.margin();
            for (i, &o) in plan.origins.iter().enumerate().step_by(5) {
                let start = [
                    o[0] as isize - margin[0] as isize,
                    o[1] as isize - margin[1] as isize,
                    o[2] as isize - margin[2] as isize,
                ];
                let win = crop_padded(&stacked, start, spec.input_size);
                let direct = model.predict_labels(&win).unwrap();
                let fast = source.patch(i, o, spec.output_size);
                assert_eq!(direct, fast, "{dim:?} origin {o:?}");
            }
        }
    }

    #[test]
    fn segment_forces_background_outside_mask() {
        let spec = build_spec(
            Family::UNet,
            Dimensionality::TwoD,
            1,
            Some(PatchConfig { output_size: [1, 32, 32] }),
        )
        .unwrap();
        let model = Model::instantiate(&spec, 2).unwrap();
        let case = generate_phantom(&PhantomConfig::new(17, [32, 32, 32], 0.0, 1))
            .unwrap()
            .preprocessed()
            .unwrap();
        let seg = segment_case(&model, &case, OverlapLevel::Null).unwrap();
        for (lab, &m) in seg.labels.iter().zip(case.brain_mask.iter()) {
            if m == 0 {
                assert_eq!(*lab, 0);
            }
        }
    }
}
