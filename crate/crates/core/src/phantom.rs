//! Synthetic concentric-shell phantoms used for desk-scale testing.
//!
//! Geometry: a WM core wrapped by a GM shell wrapped by a CSF shell, all
//! centered near the volume middle, with seeded angular wobble on each
//! boundary and a seeded center jitter so that one case cannot be segmented
//! by memorizing absolute positions. The brain mask is exactly the tissue
//! region.
//!
//! Intensity design (arbitrary units), chosen so every class pair is
//! separated by at least 60 in some channel:
//!
//! * single modality: CSF 40, GM 100, WM 160;
//! * dual modality:   channel 0 (T1-like) CSF 40, GM 100, WM 100 — GM and WM
//!   coincide; channel 1 (T2-like) CSF 40, GM 100, WM 40 — WM and CSF
//!   coincide. WM is therefore ambiguous in either channel alone and
//!   resolvable only when both are combined, which is what the
//!   modality-benefit study exercises.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::volume::{Case, LabelMap, Modality, Volume};

/// Boundary radii as fractions of half the smallest volume dimension.
const RADIUS_FRACTIONS: [f64; 3] = [0.40, 0.62, 0.80]; // WM, GM, CSF outer
/// Relative amplitude of the angular wobble applied to each boundary.
const WOBBLE_AMPLITUDE: f64 = 0.05;
/// Center jitter as a fraction of the smallest dimension.
const CENTER_JITTER: f64 = 0.06;

/// Class intensity means by (modality index, class id 1..=3).
fn class_mean(modality_count: usize, channel: usize, class_id: u8) -> f32 {
    debug_assert!((1..=3).contains(&class_id));
    if modality_count == 1 {
        match class_id {
            1 => 40.0,
            2 => 100.0,
            _ => 160.0,
        }
    } else {
        match (channel, class_id) {
            (0, 1) => 40.0,
            (0, 2) => 100.0,
            (0, 3) => 100.0,
            (1, 1) => 40.0,
            (1, 2) => 100.0,
            _ => 40.0, // (1, 3)
        }
    }
}

/// Smallest intensity separation over class pairs, maximised over channels:
/// the generator guarantees `>= 3 * noise_sigma` for this quantity.
fn min_pairwise_separation(modality_count: usize) -> f32 {
    let pairs = [(1u8, 2u8), (1, 3), (2, 3)];
    let mut worst = f32::INFINITY;
    for &(a, b) in &pairs {
        let mut best = 0f32;
        for ch in 0..modality_count {
            let d = (class_mean(modality_count, ch, a) - class_mean(modality_count, ch, b)).abs();
            best = best.max(d);
        }
        worst = worst.min(best);
    }
    worst
}

#[derive(Debug, Clone)]
pub struct PhantomConfig {
    pub seed: u64,
    pub dims: [usize; 3],
    pub noise_sigma: f32,
    pub modality_count: usize,
}

impl PhantomConfig {
    pub fn new(seed: u64, dims: [usize; 3], noise_sigma: f32, modality_count: usize) -> Self {
        PhantomConfig {
            seed,
            dims,
            noise_sigma,
            modality_count,
        }
    }
}

/// Deterministically generate a phantom case from a seed.
pub fn generate_phantom(config: &PhantomConfig) -> Result<Case> {
    let [dz, dy, dx] = config.dims;
    if config.dims.iter().any(|&d| d < 32) {
        return Err(Error::InvalidArgument(format!(
            "phantom dims must be >= 32 per axis to contain three shells, got {:?}",
            config.dims
        )));
    }
    if !(1..=2).contains(&config.modality_count) {
        return Err(Error::InvalidArgument(format!(
            "phantom supports 1 or 2 modalities, got {}",
            config.modality_count
        )));
    }
    if config.noise_sigma < 0.0 || !config.noise_sigma.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "noise_sigma must be finite and >= 0, got {}",
            config.noise_sigma
        )));
    }
    let sep = min_pairwise_separation(config.modality_count);
    if 3.0 * config.noise_sigma > sep {
        return Err(Error::InvalidArgument(format!(
            "noise_sigma {} too large: class separation {} requires sigma <= {}",
            config.noise_sigma,
            sep,
            sep / 3.0
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let half_min = config.dims.iter().copied().min().unwrap() as f64 / 2.0;

    // Seeded geometry parameters.
    let center = [
        dz as f64 / 2.0 + rng.random_range(-1.0..1.0) * CENTER_JITTER * 2.0 * half_min,
        dy as f64 / 2.0 + rng.random_range(-1.0..1.0) * CENTER_JITTER * 2.0 * half_min,
        dx as f64 / 2.0 + rng.random_range(-1.0..1.0) * CENTER_JITTER * 2.0 * half_min,
    ];
    // Independent wobble phases and harmonics per boundary.
    let mut wobble = Vec::with_capacity(3);
    for _ in 0..3 {
        let phase_theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let phase_phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let k_theta: f64 = rng.random_range(2..5) as f64;
        let k_phi: f64 = rng.random_range(2..4) as f64;
        wobble.push((phase_theta, phase_phi, k_theta, k_phi));
    }

    let mut labels = Array3::<u8>::zeros((dz, dy, dx));
    for ((z, y, x), lab) in labels.indexed_iter_mut() {
        let vz = z as f64 - center[0];
        let vy = y as f64 - center[1];
        let vx = x as f64 - center[2];
        let r = (vz * vz + vy * vy + vx * vx).sqrt();
        if r == 0.0 {
            *lab = 3;
            continue;
        }
        let theta = (vz / r).acos();
        let phi = vy.atan2(vx);
        // Innermost boundary whose wobbled radius still contains the voxel
        // decides the class; boundaries stay nested because the base radii
        // are well separated relative to the wobble amplitude.
        let mut class = 0u8;
        for (i, &(pt, pp, kt, kp)) in wobble.iter().enumerate() {
            let base = RADIUS_FRACTIONS[i] * half_min;
            let factor =
                1.0 + WOBBLE_AMPLITUDE * (kt * theta + pt).sin() * (kp * phi + pp).cos();
            if r < base * factor {
                // i = 0 -> WM, 1 -> GM, 2 -> CSF
                class = (3 - i) as u8;
                break;
            }
        }
        *lab = class;
    }

    let mask = labels.mapv(|v| u8::from(v != 0));
    if !mask.iter().any(|&m| m != 0) {
        return Err(Error::InvalidArgument(
            "phantom geometry produced an empty mask".into(),
        ));
    }

    let modalities = if config.modality_count == 1 {
        vec![Modality::T1w]
    } else {
        vec![Modality::T1w, Modality::T2w]
    };
    let mut volumes = Vec::with_capacity(config.modality_count);
    for (ch, &modality) in modalities.iter().enumerate() {
        let mut data = Array3::<f32>::zeros((dz, dy, dx));
        if config.noise_sigma > 0.0 {
            let normal = Normal::new(0.0f32, config.noise_sigma).map_err(|e| {
                Error::InvalidArgument(format!("invalid noise distribution: {e}"))
            })?;
            for (v, &lab) in data.iter_mut().zip(labels.iter()) {
                if lab != 0 {
                    *v = class_mean(config.modality_count, ch, lab) + normal.sample(&mut rng);
                }
            }
        } else {
            for (v, &lab) in data.iter_mut().zip(labels.iter()) {
                if lab != 0 {
                    *v = class_mean(config.modality_count, ch, lab);
                }
            }
        }
        volumes.push(Volume::new(data, [1.0; 3], modality)?);
    }

    Case::new(
        format!("phantom-{:04}", config.seed),
        volumes,
        Some(LabelMap::new(labels)?),
        mask,
    )
}

/// The class whose identity requires both channels in the dual-modality
/// intensity design (see module docs).
pub const DUAL_MODALITY_DESIGNED_CLASS: crate::volume::TissueClass = crate::volume::TissueClass::Wm;
