//! Desk-scale benchmarking framework for patch-based fully convolutional
//! networks applied to brain-MRI tissue segmentation (CSF / GM / WM).
//!
//! The crate covers the whole pipeline: volumetric data model and synthetic
//! phantoms, overlap-controlled patch sampling, a zoo of eight network
//! architectures (four families, each in 2D and 3D), CPU training with
//! weighted cross-entropy and early stopping, majority-vote fusion of
//! overlapping patch predictions, Dice / Wilcoxon evaluation, and a
//! config-driven experiment runner.
//!
//! Volumes are indexed `[z, y, x]`; feature tensors are `[channel, z, y, x]`.
//! 2D networks are expressed in the same machinery with a z extent of 1 and
//! operate on axial slices.

pub mod arch;
pub mod error;
pub mod experiment;
pub mod fusion;
pub mod nifti;
pub mod nn;
pub mod phantom;
pub mod report;
pub mod sampling;
pub mod stats;
pub mod train;
pub mod volume;

pub use error::{Error, Result};

pub use arch::{
    build_spec, count_parameters, output_shape, ArchitectureSpec, Dimensionality, Family,
    LayerKind, LayerSpec,
};
pub use fusion::{accumulate_votes, fuse_votes, predict_patches, segment_case, VoteGrid};
pub use nn::model::Model;
pub use phantom::{generate_phantom, PhantomConfig};
pub use sampling::{
    compute_sample_weights, extract_training_samples, plan_grid, OverlapLevel, SamplingPlan,
    TrainingSample,
};
pub use stats::{
    dice, evaluate_case, loocv_folds, wilcoxon_signed_rank, DscResult, SignificanceResult,
    TestSide,
};
pub use train::{split_dataset, train_model, TrainConfig, TrainReport};
pub use volume::{
    normalize_intensity, stack_modalities, Case, LabelMap, Modality, TissueClass, Volume,
    NUM_CLASSES,
};
