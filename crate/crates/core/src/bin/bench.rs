// Temporary micro-benchmark (removed before release).
use ndarray::Array4;
use std::time::Instant;
use tissuebench::arch::{build_spec, Dimensionality, Family};
use tissuebench::nn::loss::weighted_ce_grad;
use tissuebench::nn::model::{Grads, Model, Workspace};

fn main() {
    for (family, dim) in [
        (Family::UNet, Dimensionality::TwoD),
        (Family::Dm, Dimensionality::TwoD),
        (Family::UNet, Dimensionality::ThreeD),
        (Family::Dm, Dimensionality::ThreeD),
        (Family::Kk, Dimensionality::ThreeD),
        (Family::UResNet, Dimensionality::ThreeD),
    ] {
        let spec = build_spec(family, dim, 1, None).unwrap();
        let model = Model::instantiate(&spec, 1).unwrap();
        let [z, y, x] = spec.input_size;
        let input = Array4::<f32>::from_elem((1, z, y, x), 0.5);
        let mut ws = Workspace::default();
        // warmup
        model.forward_into(&input, &mut ws).unwrap();
        let t = Instant::now();
        let mut reps = 0;
        while t.elapsed().as_secs_f64() < 3.0 {
            model.forward_into(&input, &mut ws).unwrap();
            reps += 1;
        }
        let fwd = t.elapsed().as_secs_f64() / reps as f64;

        let [oz, oy, ox] = spec.output_size;
        let target = ndarray::Array3::<u8>::from_elem((oz, oy, ox), 2);
        let weights = ndarray::Array3::<f32>::from_elem((oz, oy, ox), 1.0);
        let t = Instant::now();
        let mut reps = 0;
        while t.elapsed().as_secs_f64() < 3.0 {
            model.forward_into(&input, &mut ws).unwrap();
            let logits = ws.outputs.last().unwrap().as_ref().unwrap();
            let dl = weighted_ce_grad(logits, &target, &weights, 1.0);
            let mut grads = Grads::zeros_like(&model);
            model.backward_from_logits(&input, &ws, dl, &mut grads);
            reps += 1;
        }
        let step = t.elapsed().as_secs_f64() / reps as f64;
        println!(
            "{:12} fwd {:8.1} ms   fwd+bwd {:8.1} ms",
            spec.label(),
            fwd * 1e3,
            step * 1e3
        );
    }
}
