//! Temporary calibration probe (deleted before release).

use std::time::Instant;

use tissuebench::arch::{build_spec, Dimensionality, Family};
use tissuebench::experiment::samples_for_case;
use tissuebench::fusion::segment_case;
use tissuebench::phantom::{generate_phantom, PhantomConfig};
use tissuebench::sampling::OverlapLevel;
use tissuebench::stats::evaluate_case;
use tissuebench::train::{train_model, TrainConfig};
use tissuebench::Model;

fn probe_seg(
    family: Family,
    dim: Dimensionality,
    level: OverlapLevel,
    cap: usize,
    epochs: usize,
    lr: f32,
    batch: usize,
    run_seg: bool,
) {
    let case = generate_phantom(&PhantomConfig::new(7, [64, 64, 64], 0.0, 1))
        .unwrap()
        .preprocessed()
        .unwrap();
    let spec = build_spec(family, dim, 1, None).unwrap();
    let t0 = Instant::now();
    let samples = samples_for_case(&case, &spec, level).unwrap();
    let t_extract = t0.elapsed();
    let mut model = Model::instantiate(&spec, 42).unwrap();
    let config = TrainConfig {
        max_epochs: epochs,
        patience: 2,
        val_fraction: 0.2,
        batch_size: batch,
        learning_rate: lr,
        seed: 1,
        max_samples_per_epoch: Some(cap),
        fan_in_lr_cap: if family.is_u_shaped() { None } else { Some(1024) },
    };
    // validation on a small deterministic subset (spread over the plan)
    let stride = (samples.len() / 8).max(1);
    let val: Vec<_> = samples.iter().step_by(stride).cloned().collect();
    let t1 = Instant::now();
    let report = train_model(&mut model, &samples, &val, &config).unwrap();
    let t_train = t1.elapsed();
    let (t_seg, dsc) = if run_seg {
        let t2 = Instant::now();
        let seg = segment_case(&model, &case, OverlapLevel::High).unwrap();
        let t = t2.elapsed().as_secs_f32();
        let d = evaluate_case(&case.case_id, case.ground_truth.as_ref().unwrap(), &seg).unwrap();
        (t, [d.per_class[&1], d.per_class[&2], d.per_class[&3]])
    } else {
        (0.0, [f64::NAN; 3])
    };
    println!(
        "{:8} {:3} lr{lr} b{batch} | samples {:5} (cap {cap}) extract {:6.1}s train {:7.1}s ({} ep) seg-high {:6.1}s | dsc csf {:.3} gm {:.3} wm {:.3} | val {:?}",
        spec.label(),
        dim.name(),
        samples.len(),
        t_extract.as_secs_f32(),
        t_train.as_secs_f32(),
        report.epochs_run,
        t_seg,
        dsc[0],
        dsc[1],
        dsc[2],
        report.val_loss_curve.iter().map(|v| (v * 1000.0).round() / 1000.0).collect::<Vec<_>>()
    );
}

fn probe(family: Family, dim: Dimensionality, level: OverlapLevel, cap: usize, epochs: usize, lr: f32, batch: usize) {
    probe_seg(family, dim, level, cap, epochs, lr, batch, true);
}

#[test]
#[ignore]
fn calib_unet2d() {
    probe(Family::UNet, Dimensionality::TwoD, OverlapLevel::Medium, 64, 8, 2e-3, 8);
}

#[test]
#[ignore]
fn calib_unet3d() {
    probe(Family::UNet, Dimensionality::ThreeD, OverlapLevel::Medium, 12, 20, 3e-3, 2);
}

#[test]
#[ignore]
fn calib_dm3d() {
    probe(Family::Dm, Dimensionality::ThreeD, OverlapLevel::Null, 8, 20, 3e-3, 2);
}

#[test]
#[ignore]
fn calib_dm3d_lr1e3() {
    probe_seg(Family::Dm, Dimensionality::ThreeD, OverlapLevel::Null, 16, 8, 1e-3, 4, false);
}

#[test]
#[ignore]
fn calib_dm3d_lr2e4() {
    probe_seg(Family::Dm, Dimensionality::ThreeD, OverlapLevel::Null, 12, 8, 2e-4, 2, false);
}

#[test]
#[ignore]
fn calib_dm3d_cap() {
    probe_seg(Family::Dm, Dimensionality::ThreeD, OverlapLevel::Null, 12, 10, 2e-3, 2, false);
}

#[test]
#[ignore]
fn calib_kk3d_cap() {
    probe_seg(Family::Kk, Dimensionality::ThreeD, OverlapLevel::Null, 12, 10, 2e-3, 2, false);
}

#[test]
#[ignore]
fn calib_kk3d_lr2e4() {
    probe_seg(Family::Kk, Dimensionality::ThreeD, OverlapLevel::Null, 12, 8, 2e-4, 2, false);
}

#[test]
#[ignore]
fn calib_dm3d_lr5e4() {
    probe_seg(Family::Dm, Dimensionality::ThreeD, OverlapLevel::Null, 16, 8, 5e-4, 4, false);
}

#[test]
#[ignore]
fn calib_kk3d_lr1e3() {
    probe_seg(Family::Kk, Dimensionality::ThreeD, OverlapLevel::Null, 16, 8, 1e-3, 4, false);
}

#[test]
#[ignore]
fn calib_kk3d() {
    probe(Family::Kk, Dimensionality::ThreeD, OverlapLevel::Null, 8, 20, 3e-3, 2);
}

#[test]
#[ignore]
fn calib_dm2d() {
    probe(Family::Dm, Dimensionality::TwoD, OverlapLevel::Null, 128, 8, 2e-3, 16);
}

#[test]
#[ignore]
fn calib_uresnet3d() {
    probe(Family::UResNet, Dimensionality::ThreeD, OverlapLevel::Medium, 12, 20, 3e-3, 2);
}
