//! Volumetric data model: intensity volumes, label maps, cases, and the
//! preprocessing steps applied before sampling (masking, intensity
//! standardization, modality stacking).

use ndarray::{Array3, Array4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of segmentation classes, background included.
pub const NUM_CLASSES: usize = 4;

/// Tissue classes. Label values are fixed: datasets with richer label sets
/// must be mapped onto these four before ingestion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[repr(u8)]
pub enum TissueClass {
    Background = 0,
    Csf = 1,
    Gm = 2,
    Wm = 3,
}

impl TissueClass {
    pub const TISSUES: [TissueClass; 3] = [TissueClass::Csf, TissueClass::Gm, TissueClass::Wm];

    pub fn name(self) -> &'static str {
        match self {
            TissueClass::Background => "background",
            TissueClass::Csf => "csf",
            TissueClass::Gm => "gm",
            TissueClass::Wm => "wm",
        }
    }

    pub fn from_id(id: usize) -> Option<TissueClass> {
        match id {
            0 => Some(TissueClass::Background),
            1 => Some(TissueClass::Csf),
            2 => Some(TissueClass::Gm),
            3 => Some(TissueClass::Wm),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Modality {
    T1w,
    T2w,
    Synthetic,
}

impl Modality {
    pub fn name(self) -> &'static str {
        match self {
            Modality::T1w => "t1w",
            Modality::T2w => "t2w",
            Modality::Synthetic => "synthetic",
        }
    }
}

/// A scalar 3D grid with voxel spacing metadata, one per imaging modality.
/// Indexed `[z, y, x]`.
#[derive(Debug, Clone)]
pub struct Volume {
    pub data: Array3<f32>,
    /// Voxel size in mm, `[z, y, x]` order.
    pub spacing: [f32; 3],
    pub modality: Modality,
}

impl Volume {
    pub fn new(data: Array3<f32>, spacing: [f32; 3], modality: Modality) -> Result<Volume> {
        let dims = data.dim();
        if dims.0 == 0 || dims.1 == 0 || dims.2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "volume dimensions must all be >= 1, got {:?}",
                dims
            )));
        }
        if spacing.iter().any(|&s| s <= 0.0 || !s.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "voxel spacing must be strictly positive, got {:?}",
                spacing
            )));
        }
        Ok(Volume {
            data,
            spacing,
            modality,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        let (z, y, x) = self.data.dim();
        [z, y, x]
    }
}

/// An integer label grid over the fixed class set {0=background, 1=CSF,
/// 2=GM, 3=WM}.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub labels: Array3<u8>,
}

impl LabelMap {
    pub fn new(labels: Array3<u8>) -> Result<LabelMap> {
        for (idx, &v) in labels.indexed_iter() {
            if v as usize >= NUM_CLASSES {
                return Err(Error::InvalidLabel {
                    label: v as i64,
                    at: [idx.0, idx.1, idx.2],
                });
            }
        }
        Ok(LabelMap { labels })
    }

    pub fn dims(&self) -> [usize; 3] {
        let (z, y, x) = self.labels.dim();
        [z, y, x]
    }

    /// Voxel count carrying the given class.
    pub fn class_volume(&self, class_id: u8) -> usize {
        self.labels.iter().filter(|&&v| v == class_id).count()
    }
}

/// One subject: stacked modality volumes, optional ground truth, and a
/// binary brain mask (1 = intracranial). All grids share dimensions.
#[derive(Debug, Clone)]
pub struct Case {
    pub case_id: String,
    pub volumes: Vec<Volume>,
    pub ground_truth: Option<LabelMap>,
    pub brain_mask: Array3<u8>,
}

impl Case {
    pub fn new(
        case_id: impl Into<String>,
        volumes: Vec<Volume>,
        ground_truth: Option<LabelMap>,
        brain_mask: Array3<u8>,
    ) -> Result<Case> {
        let case_id = case_id.into();
        if volumes.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "case {case_id}: at least one modality volume is required"
            )));
        }
        let dims = volumes[0].dims();
        for (i, v) in volumes.iter().enumerate() {
            if v.dims() != dims {
                return Err(Error::DimensionMismatch {
                    context: format!("case {case_id}, modality {i}"),
                    expected: dims,
                    got: v.dims(),
                });
            }
        }
        let mask_dims = brain_mask.dim();
        if [mask_dims.0, mask_dims.1, mask_dims.2] != dims {
            return Err(Error::DimensionMismatch {
                context: format!("case {case_id}, brain mask"),
                expected: dims,
                got: [mask_dims.0, mask_dims.1, mask_dims.2],
            });
        }
        if let Some(gt) = &ground_truth {
            if gt.dims() != dims {
                return Err(Error::DimensionMismatch {
                    context: format!("case {case_id}, ground truth"),
                    expected: dims,
                    got: gt.dims(),
                });
            }
        }
        if !brain_mask.iter().any(|&m| m != 0) {
            return Err(Error::InvalidArgument(format!(
                "case {case_id}: brain mask has no foreground voxels"
            )));
        }
        Ok(Case {
            case_id,
            volumes,
            ground_truth,
            brain_mask,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.volumes[0].dims()
    }

    pub fn modality_count(&self) -> usize {
        self.volumes.len()
    }

    /// Ground truth or an error; training entry points call this.
    pub fn require_ground_truth(&self) -> Result<&LabelMap> {
        self.ground_truth.as_ref().ok_or_else(|| {
            Error::InvalidArgument(format!("case {}: ground truth is required", self.case_id))
        })
    }

    /// New case restricted to a subset of modalities (used by the
    /// single-vs-multi-modality study). Indices refer to the stored order.
    pub fn select_modalities(&self, indices: &[usize]) -> Result<Case> {
        let mut volumes = Vec::with_capacity(indices.len());
        for &i in indices {
            let v = self.volumes.get(i).ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "case {}: modality index {i} out of range ({} available)",
                    self.case_id,
                    self.volumes.len()
                ))
            })?;
            volumes.push(v.clone());
        }
        Case::new(
            self.case_id.clone(),
            volumes,
            self.ground_truth.clone(),
            self.brain_mask.clone(),
        )
    }

    /// Case with every modality standardized over the brain mask and
    /// non-brain voxels zeroed. Ground truth and mask are shared.
    pub fn preprocessed(&self) -> Result<Case> {
        let volumes = self
            .volumes
            .iter()
            .map(|v| normalize_intensity(v, &self.brain_mask))
            .collect::<Result<Vec<_>>>()?;
        Case::new(
            self.case_id.clone(),
            volumes,
            self.ground_truth.clone(),
            self.brain_mask.clone(),
        )
    }
}

/// Standardize a volume to zero mean and unit variance over mask-foreground
/// voxels; voxels outside the mask are set to 0. Statistics use the
/// population convention. A constant intensity inside the mask is rejected
/// rather than patched with an epsilon.
pub fn normalize_intensity(volume: &Volume, mask: &Array3<u8>) -> Result<Volume> {
    let mask_dims = mask.dim();
    if [mask_dims.0, mask_dims.1, mask_dims.2] != volume.dims() {
        return Err(Error::DimensionMismatch {
            context: "normalize_intensity mask".into(),
            expected: volume.dims(),
            got: [mask_dims.0, mask_dims.1, mask_dims.2],
        });
    }
    let mut n = 0usize;
    let mut sum = 0f64;
    for (&v, &m) in volume.data.iter().zip(mask.iter()) {
        if m != 0 {
            n += 1;
            sum += v as f64;
        }
    }
    if n < 2 {
        return Err(Error::DegenerateInput(format!(
            "normalization requires >= 2 mask-foreground voxels, got {n}"
        )));
    }
    let mean = sum / n as f64;
    let mut ss = 0f64;
    for (&v, &m) in volume.data.iter().zip(mask.iter()) {
        if m != 0 {
            let d = v as f64 - mean;
            ss += d * d;
        }
    }
    let std = (ss / n as f64).sqrt();
    if std == 0.0 {
        return Err(Error::DegenerateInput(
            "constant intensity inside mask (standard deviation is zero)".into(),
        ));
    }
    let mut out = volume.data.clone();
    for (v, &m) in out.iter_mut().zip(mask.iter()) {
        *v = if m != 0 {
            ((*v as f64 - mean) / std) as f32
        } else {
            0.0
        };
    }
    Volume::new(out, volume.spacing, volume.modality)
}

/// Stack the case's modalities into a multi-channel grid `[c, z, y, x]`,
/// channel order equal to the stored modality order (early fusion).
pub fn stack_modalities(case: &Case) -> Result<Array4<f32>> {
    if case.volumes.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot stack an empty modality list".into(),
        ));
    }
    let [z, y, x] = case.dims();
    let mut out = Array4::<f32>::zeros((case.volumes.len(), z, y, x));
    for (c, v) in case.volumes.iter().enumerate() {
        out.index_axis_mut(ndarray::Axis(0), c).assign(&v.data);
    }
    Ok(out)
}
