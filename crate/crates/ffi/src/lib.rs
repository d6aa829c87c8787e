//! C ABI over the tissuebench library: opaque handles, integer error
//! codes, and a thread-local last-error message. The generated header
//! lives at `include/tissuebench.h`.
//!
//! Conventions:
//! * every fallible function returns a `TbStatus` code; on failure a
//!   human-readable message is retrievable via [`tb_last_error_message`];
//! * out-parameters are written only on `TB_OK`;
//! * objects returned through `out` pointers are owned by the caller and
//!   released with the matching `*_free` function;
//! * strings returned by the library are released with [`tb_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::PathBuf;
use std::ptr;

use tissuebench::arch::{build_spec, count_parameters, ArchitectureSpec, Dimensionality, Family};
use tissuebench::experiment::samples_for_case;
use tissuebench::fusion::segment_case;
use tissuebench::phantom::{generate_phantom, PhantomConfig};
use tissuebench::sampling::OverlapLevel;
use tissuebench::stats::{dice, wilcoxon_signed_rank, TestSide};
use tissuebench::train::{split_dataset, train_model, TrainConfig};
use tissuebench::volume::{Case, LabelMap};
use tissuebench::Model;

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TbStatus {
    TbOk = 0,
    TbErrNullArgument = 1,
    TbErrInvalidArgument = 2,
    TbErrIo = 3,
    TbErrRuntime = 4,
    TbErrUtf8 = 5,
}

/// Opaque subject handle (modalities + optional ground truth + mask).
pub struct TbCase(Case);
/// Opaque architecture description.
pub struct TbSpec(ArchitectureSpec);
/// Opaque trainable model.
pub struct TbModel(Model);
/// Opaque label volume.
pub struct TbLabelMap(LabelMap);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let message = CString::new(message)
        .unwrap_or_else(|_| CString::new("error message contained NUL").unwrap());
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(message));
}

fn fail(status: TbStatus, message: impl Into<String>) -> TbStatus {
    set_error(message.into());
    status
}

fn fail_with(err: tissuebench::Error) -> TbStatus {
    let status = match &err {
        tissuebench::Error::Io { .. } => TbStatus::TbErrIo,
        tissuebench::Error::DimensionMismatch { .. }
        | tissuebench::Error::InvalidArgument(_)
        | tissuebench::Error::InvalidLabel { .. }
        | tissuebench::Error::Config(_) => TbStatus::TbErrInvalidArgument,
        _ => TbStatus::TbErrRuntime,
    };
    fail(status, err.to_string())
}

/// Last error message for this thread, or NULL if none was recorded.
/// The caller owns the returned string (release with `tb_string_free`).
#[no_mangle]
pub extern "C" fn tb_last_error_message() -> *mut c_char {
    LAST_ERROR.with(|slot| match slot.borrow().as_ref() {
        Some(msg) => msg.clone().into_raw(),
        None => ptr::null_mut(),
    })
}

/// Library version as a static string (do not free).
#[no_mangle]
pub extern "C" fn tb_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Release a string returned by this library.
///
/// # Safety
/// `s` must be a pointer previously returned by a tissuebench function
/// that transfers string ownership, and must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn tb_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

unsafe fn cstr<'a>(ptr: *const c_char, name: &str) -> Result<&'a str, TbStatus> {
    if ptr.is_null() {
        return Err(fail(
            TbStatus::TbErrNullArgument,
            format!("{name} must not be NULL"),
        ));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| fail(TbStatus::TbErrUtf8, format!("{name} is not valid UTF-8")))
}

fn parse_overlap(name: &str) -> Result<OverlapLevel, TbStatus> {
    name.parse::<OverlapLevel>().map_err(|e| fail_with(e))
}

macro_rules! require_out {
    ($out:ident) => {
        if $out.is_null() {
            return fail(
                TbStatus::TbErrNullArgument,
                concat!(stringify!($out), " must not be NULL"),
            );
        }
    };
}

macro_rules! require_handle {
    ($ptr:ident) => {
        match unsafe { $ptr.as_ref() } {
            Some(h) => h,
            None => {
                return fail(
                    TbStatus::TbErrNullArgument,
                    concat!(stringify!($ptr), " must not be NULL"),
                )
            }
        }
    };
}

// --- cases -------------------------------------------------------------

/// Generate a synthetic phantom case (concentric tissue shells).
///
/// # Safety
/// `out_case` must point to writable storage for one pointer.
#[no_mangle]
pub unsafe extern "C" fn tb_case_generate_phantom(
    seed: u64,
    dim_z: usize,
    dim_y: usize,
    dim_x: usize,
    noise_sigma: f32,
    modalities: u32,
    out_case: *mut *mut TbCase,
) -> TbStatus {
    require_out!(out_case);
    let config = PhantomConfig::new(seed, [dim_z, dim_y, dim_x], noise_sigma, modalities as usize);
    match generate_phantom(&config) {
        Ok(case) => {
            *out_case = Box::into_raw(Box::new(TbCase(case)));
            TbStatus::TbOk
        }
        Err(e) => fail_with(e),
    }
}

/// Load a case from a directory laid out as written by `tb_case_save_dir`
/// (or the CLI's `phantom` verb).
///
/// # Safety
/// `dir` and `case_id` must be valid NUL-terminated strings; `out_case`
/// must point to writable storage for one pointer.
#[no_mangle]
pub unsafe extern "C" fn tb_case_load_dir(
    dir: *const c_char,
    case_id: *const c_char,
    modalities: u32,
    out_case: *mut *mut TbCase,
) -> TbStatus {
    require_out!(out_case);
    let dir = match cstr(dir, "dir") {
        Ok(s) => s,
        Err(status) => return status,
    };
    let case_id = match cstr(case_id, "case_id") {
        Ok(s) => s,
        Err(status) => return status,
    };
    match tissuebench::nifti::load_saved_case(case_id, PathBuf::from(dir), modalities as usize) {
        Ok(case) => {
            *out_case = Box::into_raw(Box::new(TbCase(case)));
            TbStatus::TbOk
        }
        Err(e) => fail_with(e),
    }
}

/// Write a case's NIfTI grids into a directory.
///
/// # Safety
/// `case` must be a live handle; `dir` a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn tb_case_save_dir(case: *const TbCase, dir: *const c_char) -> TbStatus {
    let case = require_handle!(case);
    let dir = match cstr(dir, "dir") {
        Ok(s) => s,
        Err(status) => return status,
    };
    match tissuebench::nifti::save_case(&case.0, PathBuf::from(dir)) {
        Ok(_) => TbStatus::TbOk,
        Err(e) => fail_with(e),
    }
}

/// Standardize intensities over the brain mask (in place). Training and
/// segmentation expect preprocessed cases.
///
/// # Safety
/// `case` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn tb_case_preprocess(case: *mut TbCase) -> TbStatus {
    let Some(case) = case.as_mut() else {
        return fail(TbStatus::TbErrNullArgument, "case must not be NULL");
    };
    match case.0.preprocessed() {
        Ok(p) => {
            case.0 = p;
            TbStatus::TbOk
        }
        Err(e) => fail_with(e),
    }
}

/// Volume dimensions (z, y, x).
///
/// # Safety
/// `case` must be a live handle; out pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn tb_case_dims(
    case: *const TbCase,
    out_z: *mut usize,
    out_y: *mut usize,
    out_x: *mut usize,
) -> TbStatus {
    let case = require_handle!(case);
    require_out!(out_z);
    require_out!(out_y);
    require_out!(out_x);
    let [z, y, x] = case.0.dims();
    *out_z = z;
    *out_y = y;
    *out_x = x;
    TbStatus::TbOk
}

/// Clone the case's ground-truth labels, if present.
///
/// # Safety
/// `case` must be a live handle; `out_labels` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tb_case_ground_truth(
    case: *const TbCase,
    out_labels: *mut *mut TbLabelMap,
) -> TbStatus {
    let case = require_handle!(case);
    require_out!(out_labels);
    match &case.0.ground_truth {
        Some(gt) => {
            *out_labels = Box::into_raw(Box::new(TbLabelMap(gt.clone())));
            TbStatus::TbOk
        }
        None => fail(
            TbStatus::TbErrInvalidArgument,
            "case carries no ground truth",
        ),
    }
}

/// # Safety
/// `case` must originate from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn tb_case_free(case: *mut TbCase) {
    if !case.is_null() {
        drop(Box::from_raw(case));
    }
}

// --- specs and models ----------------------------------------------------

/// Build an architecture spec. `family` is dm|kk|unet|uresnet, `dim` is
/// 2d|3d.
///
/// # Safety
/// String arguments must be valid NUL-terminated strings; `out_spec` must
/// be writable.
#[no_mangle]
pub unsafe extern "C" fn tb_spec_build(
    family: *const c_char,
    dim: *const c_char,
    in_channels: u32,
    out_spec: *mut *mut TbSpec,
) -> TbStatus {
    require_out!(out_spec);
    let family = match cstr(family, "family") {
        Ok(s) => s,
        Err(status) => return status,
    };
    let dim = match cstr(dim, "dim") {
        Ok(s) => s,
        Err(status) => return status,
    };
    let family: Family = match family.parse() {
        Ok(f) => f,
        Err(e) => return fail_with(e),
    };
    let dim: Dimensionality = match dim.parse() {
        Ok(d) => d,
        Err(e) => return fail_with(e),
    };
    match build_spec(family, dim, in_channels as usize, None) {
        Ok(spec) => {
            *out_spec = Box::into_raw(Box::new(TbSpec(spec)));
            TbStatus::TbOk
        }
        Err(e) => fail_with(e),
    }
}

/// Total learnable parameters of a spec.
///
/// # Safety
/// `spec` must be a live handle; `out_count` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tb_spec_parameter_count(
    spec: *const TbSpec,
    out_count: *mut u64,
) -> TbStatus {
    let spec = require_handle!(spec);
    require_out!(out_count);
    match count_parameters(&spec.0) {
        Ok(n) => {
            *out_count = n as u64;
            TbStatus::TbOk
        }
        Err(e) => fail_with(e),
    }
}

/// Serialize the spec's layer graph to JSON (free with `tb_string_free`).
///
/// # Safety
/// `spec` must be a live handle; `out_json` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tb_spec_to_json(
    spec: *const TbSpec,
    out_json: *mut *mut c_char,
) -> TbStatus {
    let spec = require_handle!(spec);
    require_out!(out_json);
    match spec.0.to_json() {
        Ok(json) => match CString::new(json) {
            Ok(s) => {
                *out_json = s.into_raw();
                TbStatus::TbOk
            }
            Err(_) => fail(TbStatus::TbErrRuntime, "JSON contained NUL"),
        },
        Err(e) => fail_with(e),
    }
}

/// # Safety
/// `spec` must originate from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn tb_spec_free(spec: *mut TbSpec) {
    if !spec.is_null() {
        drop(Box::from_raw(spec));
    }
}

/// Instantiate a model with seeded deterministic weights.
///
/// # Safety
/// `spec` must be a live handle; `out_model` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tb_model_new(
    spec: *const TbSpec,
    seed: u64,
    out_model: *mut *mut TbModel,
) -> TbStatus {
    let spec = require_handle!(spec);
    require_out!(out_model);
    match Model::instantiate(&spec.0, seed) {
        Ok(model) => {
            *out_model = Box::into_raw(Box::new(TbModel(model)));
            TbStatus::TbOk
        }
        Err(e) => fail_with(e),
    }
}

/// Save a model checkpoint.
///
/// # Safety
/// `model` must be a live handle; `path` a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn tb_model_save(model: *const TbModel, path: *const c_char) -> TbStatus {
    let model = require_handle!(model);
    let path = match cstr(path, "path") {
        Ok(s) => s,
        Err(status) => return status,
    };
    match model.0.save(PathBuf::from(path)) {
        Ok(()) => TbStatus::TbOk,
        Err(e) => fail_with(e),
    }
}

/// Load a model checkpoint.
///
/// # Safety
/// `path` must be a valid NUL-terminated string; `out_model` writable.
#[no_mangle]
pub unsafe extern "C" fn tb_model_load(
    path: *const c_char,
    out_model: *mut *mut TbModel,
) -> TbStatus {
    require_out!(out_model);
    let path = match cstr(path, "path") {
        Ok(s) => s,
        Err(status) => return status,
    };
    match Model::load(PathBuf::from(path)) {
        Ok(model) => {
            *out_model = Box::into_raw(Box::new(TbModel(model)));
            TbStatus::TbOk
        }
        Err(e) => fail_with(e),
    }
}

/// # Safety
/// `model` must originate from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn tb_model_free(model: *mut TbModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

// --- training, segmentation, evaluation -----------------------------------

/// Train a model on preprocessed cases with the standard pipeline
/// (patch extraction with the given overlap, weighted cross-entropy,
/// early stopping with the given patience, best-weight restoration).
///
/// With a single case, training and validation share that case's samples
/// (the overfit smoke-test setup); with two or more, cases are split
/// 80/20 at case granularity by `seed`. `max_samples_per_epoch` of 0
/// means "use every sample". Writes the number of completed epochs to
/// `out_epochs` when non-NULL.
///
/// # Safety
/// `model` must be a live handle; `cases` must point to `n_cases` live
/// case handles; `overlap` must be a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn tb_model_train(
    model: *mut TbModel,
    cases: *const *const TbCase,
    n_cases: usize,
    overlap: *const c_char,
    max_epochs: u32,
    patience: u32,
    val_fraction: f64,
    batch_size: u32,
    learning_rate: f32,
    seed: u64,
    max_samples_per_epoch: usize,
    out_epochs: *mut u32,
) -> TbStatus {
    let Some(model) = model.as_mut() else {
        return fail(TbStatus::TbErrNullArgument, "model must not be NULL");
    };
    if cases.is_null() || n_cases == 0 {
        return fail(
            TbStatus::TbErrNullArgument,
            "cases must be a non-empty array",
        );
    }
    let overlap = match cstr(overlap, "overlap") {
        Ok(s) => s,
        Err(status) => return status,
    };
    let level = match parse_overlap(overlap) {
        Ok(l) => l,
        Err(status) => return status,
    };
    let mut owned = Vec::with_capacity(n_cases);
    for i in 0..n_cases {
        let ptr = *cases.add(i);
        let Some(c) = ptr.as_ref() else {
            return fail(TbStatus::TbErrNullArgument, format!("cases[{i}] is NULL"));
        };
        owned.push(c.0.clone());
    }
    let spec = model.0.spec().clone();
    let config = TrainConfig {
        max_epochs: max_epochs as usize,
        patience: patience as usize,
        val_fraction,
        batch_size: batch_size as usize,
        learning_rate,
        seed,
        max_samples_per_epoch: (max_samples_per_epoch > 0).then_some(max_samples_per_epoch),
        fan_in_lr_cap: TrainConfig::default_for(spec.family).fan_in_lr_cap,
    };
    let mut run = || -> tissuebench::Result<usize> {
        let (train_samples, val_samples) = if owned.len() == 1 {
            let samples = samples_for_case(&owned[0], &spec, level)?;
            let stride = (samples.len() / 8).max(1);
            let val: Vec<_> = samples.iter().step_by(stride).cloned().collect();
            (samples, val)
        } else {
            let (train_cases, val_cases) = split_dataset(&owned, config.val_fraction, seed)?;
            let mut train_samples = Vec::new();
            for c in &train_cases {
                train_samples.extend(samples_for_case(c, &spec, level)?);
            }
            let mut val_samples = Vec::new();
            for c in &val_cases {
                val_samples.extend(samples_for_case(c, &spec, level)?);
            }
            (train_samples, val_samples)
        };
        let report = train_model(&mut model.0, &train_samples, &val_samples, &config)?;
        Ok(report.epochs_run)
    };
    match run() {
        Ok(epochs) => {
            if !out_epochs.is_null() {
                *out_epochs = epochs as u32;
            }
            TbStatus::TbOk
        }
        Err(e) => fail_with(e),
    }
}

/// Segment a preprocessed case with majority-vote fusion at the given
/// overlap level.
///
/// # Safety
/// `model` and `case` must be live handles; `overlap` a valid string;
/// `out_labels` writable.
#[no_mangle]
pub unsafe extern "C" fn tb_model_segment(
    model: *const TbModel,
    case: *const TbCase,
    overlap: *const c_char,
    out_labels: *mut *mut TbLabelMap,
) -> TbStatus {
    let model = require_handle!(model);
    let case = require_handle!(case);
    require_out!(out_labels);
    let overlap = match cstr(overlap, "overlap") {
        Ok(s) => s,
        Err(status) => return status,
    };
    let level = match parse_overlap(overlap) {
        Ok(l) => l,
        Err(status) => return status,
    };
    match segment_case(&model.0, &case.0, level) {
        Ok(labels) => {
            *out_labels = Box::into_raw(Box::new(TbLabelMap(labels)));
            TbStatus::TbOk
        }
        Err(e) => fail_with(e),
    }
}

/// Label-map dimensions (z, y, x).
///
/// # Safety
/// `labels` must be a live handle; out pointers writable.
#[no_mangle]
pub unsafe extern "C" fn tb_labelmap_dims(
    labels: *const TbLabelMap,
    out_z: *mut usize,
    out_y: *mut usize,
    out_x: *mut usize,
) -> TbStatus {
    let labels = require_handle!(labels);
    require_out!(out_z);
    require_out!(out_y);
    require_out!(out_x);
    let [z, y, x] = labels.0.dims();
    *out_z = z;
    *out_y = y;
    *out_x = x;
    TbStatus::TbOk
}

/// Copy the labels (z-major, x fastest) into a caller buffer of exactly
/// `len` bytes, where `len` must equal the voxel count.
///
/// # Safety
/// `labels` must be a live handle; `buffer` must point to `len` writable
/// bytes.
#[no_mangle]
pub unsafe extern "C" fn tb_labelmap_copy(
    labels: *const TbLabelMap,
    buffer: *mut u8,
    len: usize,
) -> TbStatus {
    let labels = require_handle!(labels);
    require_out!(buffer);
    let data = labels.0.labels.as_slice().expect("contiguous labels");
    if len != data.len() {
        return fail(
            TbStatus::TbErrInvalidArgument,
            format!("buffer holds {len} bytes, label map has {}", data.len()),
        );
    }
    ptr::copy_nonoverlapping(data.as_ptr(), buffer, len);
    TbStatus::TbOk
}

/// # Safety
/// `labels` must originate from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn tb_labelmap_free(labels: *mut TbLabelMap) {
    if !labels.is_null() {
        drop(Box::from_raw(labels));
    }
}

/// Dice coefficient of one tissue class (1 = CSF, 2 = GM, 3 = WM).
///
/// # Safety
/// Both label maps must be live handles; `out_dsc` writable.
#[no_mangle]
pub unsafe extern "C" fn tb_dice(
    ground_truth: *const TbLabelMap,
    segmentation: *const TbLabelMap,
    class_id: u32,
    out_dsc: *mut f64,
) -> TbStatus {
    let gt = require_handle!(ground_truth);
    let seg = require_handle!(segmentation);
    require_out!(out_dsc);
    match dice(&gt.0, &seg.0, class_id as u8) {
        Ok(d) => {
            *out_dsc = d;
            TbStatus::TbOk
        }
        Err(e) => fail_with(e),
    }
}

/// Wilcoxon signed-rank test on paired samples. `side`: 0 two-sided,
/// 1 greater, 2 less. Writes the positive-rank sum W, the p-value, and
/// the number of non-zero pairs.
///
/// # Safety
/// `a` and `b` must point to `n` readable doubles; out pointers writable.
#[no_mangle]
pub unsafe extern "C" fn tb_wilcoxon_signed_rank(
    a: *const f64,
    b: *const f64,
    n: usize,
    side: u32,
    out_statistic: *mut f64,
    out_p_value: *mut f64,
    out_n_effective: *mut usize,
) -> TbStatus {
    if a.is_null() || b.is_null() {
        return fail(TbStatus::TbErrNullArgument, "samples must not be NULL");
    }
    require_out!(out_statistic);
    require_out!(out_p_value);
    require_out!(out_n_effective);
    let side = match side {
        0 => TestSide::TwoSided,
        1 => TestSide::Greater,
        2 => TestSide::Less,
        other => {
            return fail(
                TbStatus::TbErrInvalidArgument,
                format!("side must be 0, 1 or 2, got {other}"),
            )
        }
    };
    let av = std::slice::from_raw_parts(a, n);
    let bv = std::slice::from_raw_parts(b, n);
    match wilcoxon_signed_rank(av, bv, side) {
        Ok(r) => {
            *out_statistic = r.statistic;
            *out_p_value = r.p_value;
            *out_n_effective = r.n_effective;
            TbStatus::TbOk
        }
        Err(e) => fail_with(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn version_is_non_null() {
        let v = tb_version();
        assert!(!v.is_null());
        let s = unsafe { CStr::from_ptr(v) }.to_str().unwrap();
        assert!(!s.is_empty());
    }

    #[test]
    fn null_arguments_are_rejected_with_messages() {
        let status = unsafe { tb_case_generate_phantom(1, 32, 32, 32, 0.0, 1, ptr::null_mut()) };
        assert_eq!(status, TbStatus::TbErrNullArgument);
        let msg = tb_last_error_message();
        assert!(!msg.is_null());
        unsafe { tb_string_free(msg) };
    }

    #[test]
    fn phantom_spec_dice_roundtrip() {
        unsafe {
            let mut case = ptr::null_mut();
            assert_eq!(
                tb_case_generate_phantom(7, 32, 32, 32, 0.0, 1, &mut case),
                TbStatus::TbOk
            );
            let mut z = 0;
            let mut y = 0;
            let mut x = 0;
            assert_eq!(tb_case_dims(case, &mut z, &mut y, &mut x), TbStatus::TbOk);
            assert_eq!([z, y, x], [32, 32, 32]);

            let mut gt = ptr::null_mut();
            assert_eq!(tb_case_ground_truth(case, &mut gt), TbStatus::TbOk);
            let mut d = 0.0;
            assert_eq!(tb_dice(gt, gt, 2, &mut d), TbStatus::TbOk);
            assert_eq!(d, 1.0);

            let family = CString::new("uresnet").unwrap();
            let dim = CString::new("2d").unwrap();
            let mut spec = ptr::null_mut();
            assert_eq!(
                tb_spec_build(family.as_ptr(), dim.as_ptr(), 1, &mut spec),
                TbStatus::TbOk
            );
            let mut count = 0u64;
            assert_eq!(tb_spec_parameter_count(spec, &mut count), TbStatus::TbOk);
            assert!(count > 900_000 && count < 1_200_000);

            let mut json = ptr::null_mut();
            assert_eq!(tb_spec_to_json(spec, &mut json), TbStatus::TbOk);
            let text = CStr::from_ptr(json).to_str().unwrap();
            assert!(text.contains("softmax_head"));
            tb_string_free(json);

            tb_labelmap_free(gt);
            tb_spec_free(spec);
            tb_case_free(case);
        }
    }

    #[test]
    fn wilcoxon_via_ffi() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        let b = [0.5, 1.0, 2.0, 3.0, 4.0];
        let mut w = 0.0;
        let mut p = 0.0;
        let mut n = 0usize;
        let status = unsafe {
            tb_wilcoxon_signed_rank(a.as_ptr(), b.as_ptr(), 5, 1, &mut w, &mut p, &mut n)
        };
        assert_eq!(status, TbStatus::TbOk);
        assert_eq!(n, 5);
        assert_eq!(p, 1.0 / 32.0);
    }
}
