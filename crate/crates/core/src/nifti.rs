//! Minimal NIfTI-1 reading and writing (.nii / .nii.gz).
//!
//! Only the subset needed here is supported: single-file NIfTI-1, 3D grids,
//! the common scalar datatypes, and the scl_slope/scl_inter intensity
//! scaling. Affines are carried no further than voxel spacing — all
//! processing happens in voxel space. Volumes are written as float32 and
//! label/mask grids as uint8.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use ndarray::Array3;

use crate::error::{Error, Result};
use crate::volume::{Case, LabelMap, Modality, Volume};

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_INT32: i16 = 8;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;
const DT_INT8: i16 = 256;
const DT_UINT16: i16 = 512;

struct Header {
    dims: [usize; 3],      // (z, y, x)
    spacing: [f32; 3],     // (z, y, x) in mm
    datatype: i16,
    vox_offset: usize,
    scl_slope: f32,
    scl_inter: f32,
    swapped: bool,
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::new();
    let is_gz = path
        .extension()
        .map(|e| e.eq_ignore_ascii_case("gz"))
        .unwrap_or(false);
    if is_gz {
        GzDecoder::new(BufReader::new(file))
            .read_to_end(&mut buf)
            .map_err(|e| Error::io(path, e))?;
    } else {
        BufReader::new(file)
            .read_to_end(&mut buf)
            .map_err(|e| Error::io(path, e))?;
    }
    Ok(buf)
}

fn write_all(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(path, e))?;
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let is_gz = path
        .extension()
        .map(|e| e.eq_ignore_ascii_case("gz"))
        .unwrap_or(false);
    if is_gz {
        let mut enc = GzEncoder::new(BufWriter::new(file), Compression::fast());
        enc.write_all(bytes).map_err(|e| Error::io(path, e))?;
        enc.finish().map_err(|e| Error::io(path, e))?;
    } else {
        let mut w = BufWriter::new(file);
        w.write_all(bytes).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn i16_at(buf: &[u8], off: usize, swap: bool) -> i16 {
    let b = [buf[off], buf[off + 1]];
    let v = i16::from_le_bytes(b);
    if swap {
        v.swap_bytes()
    } else {
        v
    }
}

fn i32_at(buf: &[u8], off: usize, swap: bool) -> i32 {
    let b = [buf[off], buf[off + 1], buf[off + 2], buf[off + 3]];
    let v = i32::from_le_bytes(b);
    if swap {
        v.swap_bytes()
    } else {
        v
    }
}

fn f32_at(buf: &[u8], off: usize, swap: bool) -> f32 {
    let v = i32_at(buf, off, swap);
    f32::from_bits(v as u32)
}

fn parse_header(buf: &[u8], path: &Path) -> Result<Header> {
    if buf.len() < HEADER_SIZE {
        return Err(Error::Format(format!(
            "{}: file shorter than a NIfTI-1 header",
            path.display()
        )));
    }
    let magic_ok = &buf[344..347] == b"n+1" || &buf[344..347] == b"ni1";
    if !magic_ok {
        return Err(Error::Format(format!(
            "{}: missing NIfTI-1 magic",
            path.display()
        )));
    }
    let swapped = match i32_at(buf, 0, false) {
        348 => false,
        _ if i32_at(buf, 0, true) == 348 => true,
        other => {
            return Err(Error::Format(format!(
                "{}: bad sizeof_hdr {other}",
                path.display()
            )))
        }
    };
    let ndim = i16_at(buf, 40, swapped);
    if !(1..=7).contains(&ndim) {
        return Err(Error::Format(format!(
            "{}: unsupported dim[0] = {ndim}",
            path.display()
        )));
    }
    let mut sizes = [1usize; 7];
    for (i, s) in sizes.iter_mut().enumerate() {
        let d = i16_at(buf, 40 + 2 * (i + 1), swapped);
        *s = if i < ndim as usize { d.max(1) as usize } else { 1 };
    }
    if sizes[3..].iter().any(|&s| s > 1) {
        return Err(Error::Format(format!(
            "{}: only 3D grids are supported (dims {:?})",
            path.display(),
            sizes
        )));
    }
    let (nx, ny, nz) = (sizes[0], sizes[1], sizes[2]);
    let datatype = i16_at(buf, 70, swapped);
    let vox_offset = f32_at(buf, 108, swapped).max(HEADER_SIZE as f32) as usize;
    let px = f32_at(buf, 80, swapped);
    let py = f32_at(buf, 84, swapped);
    let pz = f32_at(buf, 88, swapped);
    let fix = |p: f32| if p > 0.0 && p.is_finite() { p } else { 1.0 };
    Ok(Header {
        dims: [nz, ny, nx],
        spacing: [fix(pz), fix(py), fix(px)],
        datatype,
        vox_offset,
        scl_slope: f32_at(buf, 112, swapped),
        scl_inter: f32_at(buf, 116, swapped),
        swapped,
    })
}

fn decode_values(buf: &[u8], h: &Header, path: &Path) -> Result<Vec<f64>> {
    let n = h.dims[0] * h.dims[1] * h.dims[2];
    let width = match h.datatype {
        DT_UINT8 | DT_INT8 => 1,
        DT_INT16 | DT_UINT16 => 2,
        DT_INT32 | DT_FLOAT32 => 4,
        DT_FLOAT64 => 8,
        other => {
            return Err(Error::Format(format!(
                "{}: unsupported NIfTI datatype {other}",
                path.display()
            )))
        }
    };
    let need = h.vox_offset + n * width;
    if buf.len() < need {
        return Err(Error::Format(format!(
            "{}: truncated data section ({} < {need} bytes)",
            path.display(),
            buf.len()
        )));
    }
    let data = &buf[h.vox_offset..h.vox_offset + n * width];
    let sw = h.swapped;
    let mut out = Vec::with_capacity(n);
    match h.datatype {
        DT_UINT8 => out.extend(data.iter().map(|&b| b as f64)),
        DT_INT8 => out.extend(data.iter().map(|&b| b as i8 as f64)),
        DT_INT16 => {
            for c in data.chunks_exact(2) {
                let v = i16::from_le_bytes([c[0], c[1]]);
                out.push(if sw { v.swap_bytes() } else { v } as f64);
            }
        }
        DT_UINT16 => {
            for c in data.chunks_exact(2) {
                let v = u16::from_le_bytes([c[0], c[1]]);
                out.push(if sw { v.swap_bytes() } else { v } as f64);
            }
        }
        DT_INT32 => {
            for c in data.chunks_exact(4) {
                let v = i32::from_le_bytes([c[0], c[1], c[2], c[3]]);
                out.push(if sw { v.swap_bytes() } else { v } as f64);
            }
        }
        DT_FLOAT32 => {
            for c in data.chunks_exact(4) {
                let v = u32::from_le_bytes([c[0], c[1], c[2], c[3]]);
                out.push(f32::from_bits(if sw { v.swap_bytes() } else { v }) as f64);
            }
        }
        DT_FLOAT64 => {
            for c in data.chunks_exact(8) {
                let mut b = [0u8; 8];
                b.copy_from_slice(c);
                let v = u64::from_le_bytes(b);
                out.push(f64::from_bits(if sw { v.swap_bytes() } else { v }));
            }
        }
        _ => unreachable!(),
    }
    Ok(out)
}

/// Read an intensity volume, applying scl_slope/scl_inter when present.
pub fn read_volume(path: impl AsRef<Path>, modality: Modality) -> Result<Volume> {
    let path = path.as_ref();
    let buf = read_all(path)?;
    let h = parse_header(&buf, path)?;
    let mut vals = decode_values(&buf, &h, path)?;
    if h.scl_slope != 0.0 && (h.scl_slope != 1.0 || h.scl_inter != 0.0) {
        for v in &mut vals {
            *v = *v * h.scl_slope as f64 + h.scl_inter as f64;
        }
    }
    let data = Array3::from_shape_vec(
        (h.dims[0], h.dims[1], h.dims[2]),
        vals.into_iter().map(|v| v as f32).collect(),
    )
    .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    Volume::new(data, h.spacing, modality)
}

/// Read an integer grid (labels or mask). Intensity scaling is rejected and
/// non-integral values are an error.
pub fn read_int_grid(path: impl AsRef<Path>) -> Result<Array3<i64>> {
    let path = path.as_ref();
    let buf = read_all(path)?;
    let h = parse_header(&buf, path)?;
    if h.scl_slope != 0.0 && (h.scl_slope != 1.0 || h.scl_inter != 0.0) {
        return Err(Error::Format(format!(
            "{}: label grids must not carry intensity scaling",
            path.display()
        )));
    }
    let vals = decode_values(&buf, &h, path)?;
    let mut out = Vec::with_capacity(vals.len());
    for v in vals {
        if v.fract() != 0.0 {
            return Err(Error::Format(format!(
                "{}: non-integral label value {v}",
                path.display()
            )));
        }
        out.push(v as i64);
    }
    Array3::from_shape_vec((h.dims[0], h.dims[1], h.dims[2]), out)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn build_header(dims: [usize; 3], spacing: [f32; 3], datatype: i16, bitpix: i16) -> Vec<u8> {
    let mut h = vec![0u8; VOX_OFFSET];
    h[0..4].copy_from_slice(&348i32.to_le_bytes());
    // dim[0..3] = 3, nx, ny, nz
    h[40..42].copy_from_slice(&3i16.to_le_bytes());
    h[42..44].copy_from_slice(&(dims[2] as i16).to_le_bytes());
    h[44..46].copy_from_slice(&(dims[1] as i16).to_le_bytes());
    h[46..48].copy_from_slice(&(dims[0] as i16).to_le_bytes());
    for i in 4..=7 {
        h[40 + 2 * i..42 + 2 * i].copy_from_slice(&1i16.to_le_bytes());
    }
    h[70..72].copy_from_slice(&datatype.to_le_bytes());
    h[72..74].copy_from_slice(&bitpix.to_le_bytes());
    // pixdim[0] (qfac) and spacings
    h[76..80].copy_from_slice(&1f32.to_le_bytes());
    h[80..84].copy_from_slice(&spacing[2].to_le_bytes());
    h[84..88].copy_from_slice(&spacing[1].to_le_bytes());
    h[88..92].copy_from_slice(&spacing[0].to_le_bytes());
    h[108..112].copy_from_slice(&(VOX_OFFSET as f32).to_le_bytes());
    h[112..116].copy_from_slice(&1f32.to_le_bytes()); // scl_slope
    h[116..120].copy_from_slice(&0f32.to_le_bytes()); // scl_inter
    h[123] = 2; // xyzt_units: mm
    h[344..348].copy_from_slice(b"n+1\0");
    h
}

/// Write an intensity volume as float32.
pub fn write_volume(path: impl AsRef<Path>, volume: &Volume) -> Result<()> {
    let dims = volume.dims();
    let mut bytes = build_header(dims, volume.spacing, DT_FLOAT32, 32);
    bytes.reserve(volume.data.len() * 4);
    // Array (z, y, x) C-order matches the x-fastest file order directly.
    for &v in volume.data.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_all(path.as_ref(), &bytes)
}

/// Write a label or mask grid as uint8.
pub fn write_u8_grid(path: impl AsRef<Path>, grid: &Array3<u8>, spacing: [f32; 3]) -> Result<()> {
    let (z, y, x) = grid.dim();
    let mut bytes = build_header([z, y, x], spacing, DT_UINT8, 8);
    bytes.extend(grid.iter().copied());
    write_all(path.as_ref(), &bytes)
}

/// A "source_label target_label" two-column plain-text table used to map
/// dataset-specific label sets onto {0, 1, 2, 3}. Lines starting with `#`
/// and blank lines are ignored.
pub fn read_label_mapping(path: impl AsRef<Path>) -> Result<BTreeMap<i64, u8>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut map = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let src = parts.next().and_then(|t| t.parse::<i64>().ok());
        let dst = parts.next().and_then(|t| t.parse::<i64>().ok());
        match (src, dst, parts.next()) {
            (Some(s), Some(d), None) if (0..=3).contains(&d) => {
                map.insert(s, d as u8);
            }
            _ => {
                return Err(Error::Format(format!(
                    "{}:{}: expected 'source_label target_label' with target in 0..=3",
                    path.display(),
                    lineno + 1
                )))
            }
        }
    }
    Ok(map)
}

fn labels_from_grid(
    grid: Array3<i64>,
    mapping: Option<&BTreeMap<i64, u8>>,
    path: &Path,
) -> Result<LabelMap> {
    let (z, y, x) = grid.dim();
    let mut out = Array3::<u8>::zeros((z, y, x));
    for (idx, &v) in grid.indexed_iter() {
        let mapped = match mapping {
            Some(m) => match m.get(&v) {
                Some(&d) => d as i64,
                None => {
                    return Err(Error::Format(format!(
                        "{}: label {v} missing from mapping table",
                        path.display()
                    )))
                }
            },
            None => v,
        };
        if !(0..=3).contains(&mapped) {
            return Err(Error::InvalidLabel {
                label: mapped,
                at: [idx.0, idx.1, idx.2],
            });
        }
        out[idx] = mapped as u8;
    }
    LabelMap::new(out)
}

/// Load a case from NIfTI files. Modalities are tagged T1w, T2w, then
/// Synthetic in path order. All grids must agree dimensionally; label
/// values outside {0,1,2,3} are rejected unless a mapping table translates
/// them.
pub fn load_case(
    case_id: impl Into<String>,
    modality_paths: &[PathBuf],
    gt_path: Option<&Path>,
    mask_path: &Path,
    label_mapping: Option<&BTreeMap<i64, u8>>,
) -> Result<Case> {
    if modality_paths.is_empty() {
        return Err(Error::InvalidArgument(
            "at least one modality path is required".into(),
        ));
    }
    let tags = [Modality::T1w, Modality::T2w];
    let mut volumes = Vec::with_capacity(modality_paths.len());
    for (i, p) in modality_paths.iter().enumerate() {
        let tag = tags.get(i).copied().unwrap_or(Modality::Synthetic);
        volumes.push(read_volume(p, tag)?);
    }
    let dims = volumes[0].dims();
    for (v, p) in volumes.iter().zip(modality_paths.iter()) {
        if v.dims() != dims {
            return Err(Error::DimensionMismatch {
                context: p.display().to_string(),
                expected: dims,
                got: v.dims(),
            });
        }
    }

    let mask_grid = read_int_grid(mask_path)?;
    let (mz, my, mx) = mask_grid.dim();
    if [mz, my, mx] != dims {
        return Err(Error::DimensionMismatch {
            context: mask_path.display().to_string(),
            expected: dims,
            got: [mz, my, mx],
        });
    }
    let brain_mask = mask_grid.mapv(|v| u8::from(v != 0));

    let ground_truth = match gt_path {
        Some(p) => {
            let grid = read_int_grid(p)?;
            let (gz, gy, gx) = grid.dim();
            if [gz, gy, gx] != dims {
                return Err(Error::DimensionMismatch {
                    context: p.display().to_string(),
                    expected: dims,
                    got: [gz, gy, gx],
                });
            }
            Some(labels_from_grid(grid, label_mapping, p)?)
        }
        None => None,
    };

    Case::new(case_id, volumes, ground_truth, brain_mask)
}

/// Write a case's grids into a directory as `<id>_<modality>.nii.gz`,
/// `<id>_gt.nii.gz` and `<id>_mask.nii.gz`; returns the modality paths.
pub fn save_case(case: &Case, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for (i, v) in case.volumes.iter().enumerate() {
        let name = format!("{}_{}{}.nii.gz", case.case_id, v.modality.name(), i);
        let p = dir.join(name);
        write_volume(&p, v)?;
        paths.push(p);
    }
    let spacing = case.volumes[0].spacing;
    if let Some(gt) = &case.ground_truth {
        write_u8_grid(dir.join(format!("{}_gt.nii.gz", case.case_id)), &gt.labels, spacing)?;
    }
    write_u8_grid(
        dir.join(format!("{}_mask.nii.gz", case.case_id)),
        &case.brain_mask,
        spacing,
    )?;
    Ok(paths)
}

/// Load every case in a directory laid out as written by [`save_case`].
/// Case ids are discovered from `<id>_mask.nii.gz` files and returned in
/// sorted order.
pub fn load_case_directory(dir: impl AsRef<Path>, modality_count: usize) -> Result<Vec<Case>> {
    let dir = dir.as_ref();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut ids = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(id) = name.strip_suffix("_mask.nii.gz") {
            ids.push(id.to_string());
        }
    }
    if ids.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no cases found in {} (expected <id>_mask.nii.gz files)",
            dir.display()
        )));
    }
    ids.sort();
    ids.iter()
        .map(|id| load_saved_case(id, dir, modality_count))
        .collect()
}

/// Re-load a case previously written by [`save_case`].
pub fn load_saved_case(case_id: &str, dir: impl AsRef<Path>, modality_count: usize) -> Result<Case> {
    let dir = dir.as_ref();
    let tags = ["t1w", "t2w"];
    let mut modality_paths = Vec::new();
    for i in 0..modality_count {
        let tag = tags.get(i).copied().unwrap_or("synthetic");
        modality_paths.push(dir.join(format!("{case_id}_{tag}{i}.nii.gz")));
    }
    let gt = dir.join(format!("{case_id}_gt.nii.gz"));
    let gt_path = gt.exists().then_some(gt.as_path());
    load_case(
        case_id,
        &modality_paths,
        gt_path,
        &dir.join(format!("{case_id}_mask.nii.gz")),
        None,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_phantom, PhantomConfig};

    #[test]
    fn volume_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let case = generate_phantom(&PhantomConfig::new(11, [32, 32, 32], 3.5, 2)).unwrap();
        save_case(&case, dir.path()).unwrap();
        let back = load_saved_case(&case.case_id, dir.path(), 2).unwrap();
        for (a, b) in case.volumes.iter().zip(back.volumes.iter()) {
            assert_eq!(a.data, b.data);
            assert_eq!(a.spacing, b.spacing);
        }
        assert_eq!(
            case.ground_truth.as_ref().unwrap().labels,
            back.ground_truth.as_ref().unwrap().labels
        );
        assert_eq!(case.brain_mask, back.brain_mask);
    }

    #[test]
    fn plain_nii_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let case = generate_phantom(&PhantomConfig::new(2, [32, 32, 32], 0.0, 1)).unwrap();
        let p = dir.path().join("vol.nii");
        write_volume(&p, &case.volumes[0]).unwrap();
        let v = read_volume(&p, Modality::T1w).unwrap();
        assert_eq!(v.data, case.volumes[0].data);
    }

    #[test]
    fn load_case_rejects_dimension_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let a = generate_phantom(&PhantomConfig::new(1, [32, 32, 32], 0.0, 1)).unwrap();
        let b = generate_phantom(&PhantomConfig::new(1, [36, 32, 32], 0.0, 1)).unwrap();
        let pa = dir.path().join("a.nii.gz");
        let pb = dir.path().join("b.nii.gz");
        write_volume(&pa, &a.volumes[0]).unwrap();
        write_volume(&pb, &b.volumes[0]).unwrap();
        let mask = dir.path().join("mask.nii.gz");
        write_u8_grid(&mask, &a.brain_mask, [1.0; 3]).unwrap();
        let err = load_case("c", &[pa, pb.clone()], None, &mask, None).unwrap_err();
        match err {
            Error::DimensionMismatch { context, .. } => {
                assert!(context.contains("b.nii.gz"), "context: {context}")
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn label_mapping_table() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("map.txt");
        std::fs::write(&p, "# comment\n10 1\n20 2\n30 3\n0 0\n").unwrap();
        let map = read_label_mapping(&p).unwrap();
        assert_eq!(map.get(&20), Some(&2));
        assert_eq!(map.len(), 4);

        std::fs::write(&p, "10 9\n").unwrap();
        assert!(read_label_mapping(&p).is_err());
    }

    #[test]
    fn out_of_range_labels_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let case = generate_phantom(&PhantomConfig::new(5, [32, 32, 32], 0.0, 1)).unwrap();
        let vol = dir.path().join("v.nii.gz");
        write_volume(&vol, &case.volumes[0]).unwrap();
        let mask = dir.path().join("m.nii.gz");
        write_u8_grid(&mask, &case.brain_mask, [1.0; 3]).unwrap();
        let bad = dir.path().join("gt.nii.gz");
        let mut labels = case.ground_truth.as_ref().unwrap().labels.clone();
        labels[[16, 16, 16]] = 7;
        write_u8_grid(&bad, &labels, [1.0; 3]).unwrap();
        let err = load_case("c", &[vol], Some(&bad), &mask, None).unwrap_err();
        assert!(matches!(err, Error::InvalidLabel { label: 7, .. }));
    }
}
