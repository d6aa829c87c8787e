//! Runtime layer implementations: forward, backward, and parameter access.
//!
//! Parameter layout per layer is fixed (weights then biases; gamma then
//! beta) and shared between gradient buffers, Adam state and checkpoints.

use ndarray::{s, Array2, Array4, Axis};

use crate::error::{Error, Result};
use crate::nn::ops::{self, ConvGeom, DeconvGeom};

const BN_EPS: f32 = 1e-5;

/// Per-node scratch produced by forward and consumed by backward.
#[derive(Debug, Clone)]
pub enum LayerCache {
    None,
    /// Flat input index of the winning element per output element.
    Pool(Vec<u32>),
    /// Per-channel mean and 1/sqrt(var + eps) over the sample's spatial
    /// extent.
    Bn { mean: Vec<f32>, inv_std: Vec<f32> },
}

#[derive(Debug, Clone)]
pub enum LayerImpl {
    Conv {
        w: Array2<f32>,
        b: Vec<f32>,
        geom: ConvGeom,
        same_pad: bool,
    },
    Deconv {
        w: Array2<f32>,
        b: Vec<f32>,
        geom: DeconvGeom,
    },
    MaxPool {
        kernel: [usize; 3],
    },
    Relu,
    PRelu {
        alpha: Vec<f32>,
    },
    BatchNorm {
        gamma: Vec<f32>,
        beta: Vec<f32>,
    },
    Concat,
    Add,
    Downsample {
        factor: [usize; 3],
    },
    Upsample {
        factor: [usize; 3],
    },
    Crop {
        margin: [usize; 3],
    },
    /// 1^d convolution producing class logits.
    Head {
        w: Array2<f32>,
        b: Vec<f32>,
    },
}

impl LayerImpl {
    pub fn param_count(&self) -> usize {
        match self {
            LayerImpl::Conv { w, b, .. } | LayerImpl::Deconv { w, b, .. } => w.len() + b.len(),
            LayerImpl::Head { w, b } => w.len() + b.len(),
            LayerImpl::PRelu { alpha } => alpha.len(),
            LayerImpl::BatchNorm { gamma, beta } => gamma.len() + beta.len(),
            _ => 0,
        }
    }

    /// Incoming connections per output unit (1 for parameter-free and
    /// element-wise layers).
    pub fn fan_in(&self) -> usize {
        match self {
            LayerImpl::Conv { w, .. } => w.dim().1,
            // deconv weights are (cin, cout * kvol); fan-in is cin * kvol
            LayerImpl::Deconv { w, geom, .. } => {
                let kvol: usize = geom.kernel.iter().product();
                w.dim().0 * kvol
            }
            LayerImpl::Head { w, .. } => w.dim().1,
            _ => 1,
        }
    }

    /// Visit parameter slices in the fixed layout order.
    pub fn visit_params(&self, f: &mut impl FnMut(&[f32])) {
        match self {
            LayerImpl::Conv { w, b, .. } | LayerImpl::Deconv { w, b, .. } => {
                f(w.as_slice().expect("contiguous"));
                f(b);
            }
            LayerImpl::Head { w, b } => {
                f(w.as_slice().expect("contiguous"));
                f(b);
            }
            LayerImpl::PRelu { alpha } => f(alpha),
            LayerImpl::BatchNorm { gamma, beta } => {
                f(gamma);
                f(beta);
            }
            _ => {}
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut impl FnMut(&mut [f32])) {
        match self {
            LayerImpl::Conv { w, b, .. } | LayerImpl::Deconv { w, b, .. } => {
                f(w.as_slice_mut().expect("contiguous"));
                f(b);
            }
            LayerImpl::Head { w, b } => {
                f(w.as_slice_mut().expect("contiguous"));
                f(b);
            }
            LayerImpl::PRelu { alpha } => f(alpha),
            LayerImpl::BatchNorm { gamma, beta } => {
                f(gamma);
                f(beta);
            }
            _ => {}
        }
    }

    /// Effective conv geometry for the given input (SAME padding depends on
    /// the kernel only, so it is precomputed; this re-checks dims).
    fn conv_geom_checked(&self, geom: &ConvGeom, dims: [usize; 3]) -> Result<ConvGeom> {
        if geom.out_dims(dims).is_none() {
            return Err(Error::Architecture(format!(
                "conv kernel {:?} exceeds padded input {:?}",
                geom.kernel, dims
            )));
        }
        Ok(*geom)
    }

    pub fn forward(&self, inputs: &[&Array4<f32>]) -> Result<(Array4<f32>, LayerCache)> {
        match self {
            LayerImpl::Conv { w, b, geom, .. } => {
                let x = inputs[0];
                let (_, z, y, xx) = x.dim();
                let g = self.conv_geom_checked(geom, [z, y, xx])?;
                Ok((ops::conv_forward(&x.view(), &w.view(), b, &g), LayerCache::None))
            }
            LayerImpl::Deconv { w, b, geom } => Ok((
                ops::deconv_forward(&inputs[0].view(), &w.view(), b, geom),
                LayerCache::None,
            )),
            LayerImpl::Head { w, b } => {
                let g = ConvGeom::unit([1, 1, 1]);
                Ok((
                    ops::conv_forward(&inputs[0].view(), &w.view(), b, &g),
                    LayerCache::None,
                ))
            }
            LayerImpl::MaxPool { kernel } => max_pool_forward(inputs[0], *kernel),
            LayerImpl::Relu => Ok((inputs[0].mapv(|v| v.max(0.0)), LayerCache::None)),
            LayerImpl::PRelu { alpha } => {
                let x = inputs[0];
                let mut y = x.clone();
                for (c, mut plane) in y.axis_iter_mut(Axis(0)).enumerate() {
                    let a = alpha[c];
                    plane.mapv_inplace(|v| if v > 0.0 { v } else { a * v });
                }
                Ok((y, LayerCache::None))
            }
            LayerImpl::BatchNorm { gamma, beta } => bn_forward(inputs[0], gamma, beta),
            LayerImpl::Concat => {
                let c_total: usize = inputs.iter().map(|x| x.dim().0).sum();
                let (_, z, y, xx) = inputs[0].dim();
                for x in inputs {
                    let d = x.dim();
                    if (d.1, d.2, d.3) != (z, y, xx) {
                        return Err(Error::Architecture(
                            "concat inputs must share spatial shape".into(),
                        ));
                    }
                }
                let mut out = Array4::<f32>::zeros((c_total, z, y, xx));
                let mut c0 = 0;
                for x in inputs {
                    let c = x.dim().0;
                    out.slice_mut(s![c0..c0 + c, .., .., ..]).assign(x);
                    c0 += c;
                }
                Ok((out, LayerCache::None))
            }
            LayerImpl::Add => {
                let mut out = inputs[0].clone();
                for x in &inputs[1..] {
                    if x.dim() != out.dim() {
                        return Err(Error::Architecture(
                            "add inputs must share shape".into(),
                        ));
                    }
                    out += *x;
                }
                Ok((out, LayerCache::None))
            }
            LayerImpl::Downsample { factor } => {
                let x = inputs[0];
                let (c, z, y, xx) = x.dim();
                let f = *factor;
                if z % f[0] != 0 || y % f[1] != 0 || xx % f[2] != 0 {
                    return Err(Error::Architecture(format!(
                        "downsample {f:?} does not divide input ({z},{y},{xx})"
                    )));
                }
                let off = [f[0] / 2, f[1] / 2, f[2] / 2];
                let out = Array4::from_shape_fn((c, z / f[0], y / f[1], xx / f[2]), |(ci, oz, oy, ox)| {
                    x[[ci, oz * f[0] + off[0], oy * f[1] + off[1], ox * f[2] + off[2]]]
                });
                Ok((out, LayerCache::None))
            }
            LayerImpl::Upsample { factor } => {
                let x = inputs[0];
                let (c, z, y, xx) = x.dim();
                let f = *factor;
                let out = Array4::from_shape_fn(
                    (c, z * f[0], y * f[1], xx * f[2]),
                    |(ci, oz, oy, ox)| x[[ci, oz / f[0], oy / f[1], ox / f[2]]],
                );
                Ok((out, LayerCache::None))
            }
            LayerImpl::Crop { margin } => {
                let x = inputs[0];
                let (_, z, y, xx) = x.dim();
                let m = *margin;
                if z <= 2 * m[0] || y <= 2 * m[1] || xx <= 2 * m[2] {
                    return Err(Error::Architecture(format!(
                        "crop margin {m:?} consumes input ({z},{y},{xx})"
                    )));
                }
                Ok((
                    x.slice(s![.., m[0]..z - m[0], m[1]..y - m[1], m[2]..xx - m[2]])
                        .to_owned(),
                    LayerCache::None,
                ))
            }
        }
    }

    /// Backpropagate `dy` through the layer. Parameter gradients are added
    /// into `grad` (layout as in `visit_params`); returns one gradient per
    /// input.
    pub fn backward(
        &self,
        inputs: &[&Array4<f32>],
        cache: &LayerCache,
        dy: &Array4<f32>,
        grad: &mut [f32],
    ) -> Vec<Array4<f32>> {
        match self {
            LayerImpl::Conv { w, geom, .. } => {
                let (dx, dw, db) = ops::conv_backward(&inputs[0].view(), &w.view(), geom, &dy.view());
                accumulate(grad, dw.as_slice().unwrap(), &db);
                vec![dx]
            }
            LayerImpl::Deconv { w, geom, .. } => {
                let (dx, dw, db) =
                    ops::deconv_backward(&inputs[0].view(), &w.view(), geom, &dy.view());
                accumulate(grad, dw.as_slice().unwrap(), &db);
                vec![dx]
            }
            LayerImpl::Head { w, .. } => {
                let g = ConvGeom::unit([1, 1, 1]);
                let (dx, dw, db) = ops::conv_backward(&inputs[0].view(), &w.view(), &g, &dy.view());
                accumulate(grad, dw.as_slice().unwrap(), &db);
                vec![dx]
            }
            LayerImpl::MaxPool { .. } => {
                let LayerCache::Pool(argmax) = cache else {
                    panic!("pool backward without cache");
                };
                let mut dx = Array4::<f32>::zeros(inputs[0].dim());
                let dxs = dx.as_slice_mut().unwrap();
                for (&idx, &g) in argmax.iter().zip(dy.iter()) {
                    dxs[idx as usize] += g;
                }
                vec![dx]
            }
            LayerImpl::Relu => {
                let mut dx = dy.clone();
                ndarray::Zip::from(&mut dx).and(inputs[0]).for_each(|d, &x| {
                    if x <= 0.0 {
                        *d = 0.0;
                    }
                });
                vec![dx]
            }
            LayerImpl::PRelu { alpha } => {
                let x = inputs[0];
                let mut dx = dy.clone();
                for (c, (mut dplane, xplane)) in dx
                    .axis_iter_mut(Axis(0))
                    .zip(x.axis_iter(Axis(0)))
                    .enumerate()
                {
                    let a = alpha[c];
                    let mut da = 0f64;
                    ndarray::Zip::from(&mut dplane).and(&xplane).for_each(|d, &xv| {
                        if xv <= 0.0 {
                            da += (*d as f64) * xv as f64;
                            *d *= a;
                        }
                    });
                    grad[c] += da as f32;
                }
                vec![dx]
            }
            LayerImpl::BatchNorm { gamma, .. } => {
                let LayerCache::Bn { mean, inv_std } = cache else {
                    panic!("batchnorm backward without cache");
                };
                vec![bn_backward(inputs[0], gamma, mean, inv_std, dy, grad)]
            }
            LayerImpl::Concat => {
                let mut outs = Vec::with_capacity(inputs.len());
                let mut c0 = 0;
                for x in inputs {
                    let c = x.dim().0;
                    outs.push(dy.slice(s![c0..c0 + c, .., .., ..]).to_owned());
                    c0 += c;
                }
                outs
            }
            LayerImpl::Add => inputs.iter().map(|_| dy.clone()).collect(),
            LayerImpl::Downsample { factor } => {
                let f = *factor;
                let off = [f[0] / 2, f[1] / 2, f[2] / 2];
                let mut dx = Array4::<f32>::zeros(inputs[0].dim());
                for ((c, oz, oy, ox), &g) in dy.indexed_iter() {
                    dx[[c, oz * f[0] + off[0], oy * f[1] + off[1], ox * f[2] + off[2]]] += g;
                }
                vec![dx]
            }
            LayerImpl::Upsample { factor } => {
                let f = *factor;
                let mut dx = Array4::<f32>::zeros(inputs[0].dim());
                for ((c, oz, oy, ox), &g) in dy.indexed_iter() {
                    dx[[c, oz / f[0], oy / f[1], ox / f[2]]] += g;
                }
                vec![dx]
            }
            LayerImpl::Crop { margin } => {
                let m = *margin;
                let (_, z, y, xx) = inputs[0].dim();
                let mut dx = Array4::<f32>::zeros(inputs[0].dim());
                dx.slice_mut(s![.., m[0]..z - m[0], m[1]..y - m[1], m[2]..xx - m[2]])
                    .assign(dy);
                vec![dx]
            }
        }
    }
}

fn accumulate(grad: &mut [f32], dw: &[f32], db: &[f32]) {
    let (gw, gb) = grad.split_at_mut(dw.len());
    for (g, &d) in gw.iter_mut().zip(dw.iter()) {
        *g += d;
    }
    for (g, &d) in gb.iter_mut().zip(db.iter()) {
        *g += d;
    }
}

fn max_pool_forward(x: &Array4<f32>, kernel: [usize; 3]) -> Result<(Array4<f32>, LayerCache)> {
    let (c, z, y, xx) = x.dim();
    let [kz, ky, kx] = kernel;
    if z % kz != 0 || y % ky != 0 || xx % kx != 0 {
        return Err(Error::Architecture(format!(
            "pool {kernel:?} does not divide input ({z},{y},{xx})"
        )));
    }
    let (oz, oy, ox) = (z / kz, y / ky, xx / kx);
    let mut out = Array4::<f32>::zeros((c, oz, oy, ox));
    let mut argmax = vec![0u32; c * oz * oy * ox];
    let xs = x.as_slice().expect("contiguous");
    let mut oi = 0usize;
    for ci in 0..c {
        for pz in 0..oz {
            for py in 0..oy {
                for px in 0..ox {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for dz in 0..kz {
                        for dyk in 0..ky {
                            let base =
                                ((ci * z + pz * kz + dz) * y + py * ky + dyk) * xx + px * kx;
                            for dxk in 0..kx {
                                let v = xs[base + dxk];
                                if v > best {
                                    best = v;
                                    best_idx = base + dxk;
                                }
                            }
                        }
                    }
                    out[[ci, pz, py, px]] = best;
                    argmax[oi] = best_idx as u32;
                    oi += 1;
                }
            }
        }
    }
    Ok((out, LayerCache::Pool(argmax)))
}

fn bn_forward(x: &Array4<f32>, gamma: &[f32], beta: &[f32]) -> Result<(Array4<f32>, LayerCache)> {
    let c = x.dim().0;
    let mut mean = vec![0f32; c];
    let mut inv_std = vec![0f32; c];
    let mut y = x.clone();
    for (ci, mut plane) in y.axis_iter_mut(Axis(0)).enumerate() {
        let n = plane.len() as f64;
        let m = plane.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = plane.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / n;
        let inv = 1.0 / (var + BN_EPS as f64).sqrt();
        mean[ci] = m as f32;
        inv_std[ci] = inv as f32;
        let (g, b) = (gamma[ci], beta[ci]);
        let (mf, invf) = (m as f32, inv as f32);
        plane.mapv_inplace(|v| g * (v - mf) * invf + b);
    }
    Ok((y, LayerCache::Bn { mean, inv_std }))
}

fn bn_backward(
    x: &Array4<f32>,
    gamma: &[f32],
    mean: &[f32],
    inv_std: &[f32],
    dy: &Array4<f32>,
    grad: &mut [f32],
) -> Array4<f32> {
    let c = x.dim().0;
    let (ggamma, gbeta) = grad.split_at_mut(c);
    let mut dx = Array4::<f32>::zeros(x.dim());
    for ci in 0..c {
        let xp = x.index_axis(Axis(0), ci);
        let dyp = dy.index_axis(Axis(0), ci);
        let mut dxp = dx.index_axis_mut(Axis(0), ci);
        let n = xp.len() as f64;
        let (m, inv) = (mean[ci], inv_std[ci]);
        let mut sum_dy = 0f64;
        let mut sum_dy_xhat = 0f64;
        ndarray::Zip::from(&xp).and(&dyp).for_each(|&xv, &dv| {
            let xhat = (xv - m) * inv;
            sum_dy += dv as f64;
            sum_dy_xhat += dv as f64 * xhat as f64;
        });
        ggamma[ci] += sum_dy_xhat as f32;
        gbeta[ci] += sum_dy as f32;
        let g = gamma[ci] as f64;
        let inv64 = inv as f64;
        ndarray::Zip::from(&mut dxp).and(&xp).and(&dyp).for_each(|d, &xv, &dv| {
            let xhat = ((xv - m) * inv) as f64;
            *d = ((g * inv64) * (dv as f64 - sum_dy / n - xhat * sum_dy_xhat / n)) as f32;
        });
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use rand::{Rng, SeedableRng};

    fn rand4(dims: (usize, usize, usize, usize), seed: u64) -> Array4<f32> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_simple_fn(dims, || rng.random_range(-1.0..1.0f32))
    }

    /// Central finite-difference check of backward() against a sum-of-squares
    /// loss over the layer output.
    fn check_input_gradient(layer: &LayerImpl, x: Array4<f32>, tol: f64) {
        let loss = |x: &Array4<f32>| -> f64 {
            let (y, _) = layer.forward(&[x]).unwrap();
            y.iter().map(|&v| (v as f64).powi(2) / 2.0).sum()
        };
        let (y, cache) = layer.forward(&[&x]).unwrap();
        let mut grad = vec![0f32; layer.param_count()];
        let dx = layer.backward(&[&x], &cache, &y, &mut grad);
        let mut xm = x.clone();
        let h = 1e-2f32;
        let idxs: Vec<_> = x
            .indexed_iter()
            .step_by((x.len() / 7).max(1))
            .map(|(i, _)| i)
            .collect();
        for i in idxs {
            let orig = xm[i];
            xm[i] = orig + h;
            let lp = loss(&xm);
            xm[i] = orig - h;
            let lm = loss(&xm);
            xm[i] = orig;
            let fd = (lp - lm) / (2.0 * h as f64);
            let an = dx[0][i] as f64;
            assert!(
                (fd - an).abs() / fd.abs().max(1.0) < tol,
                "{i:?}: fd {fd} vs analytic {an}"
            );
        }
    }

    #[test]
    fn pool_gradient() {
        let layer = LayerImpl::MaxPool { kernel: [1, 2, 2] };
        check_input_gradient(&layer, rand4((2, 1, 4, 4), 3), 1e-3);
    }

    #[test]
    fn prelu_gradient() {
        let layer = LayerImpl::PRelu {
            alpha: vec![0.25, -0.3, 0.7],
        };
        check_input_gradient(&layer, rand4((3, 2, 3, 3), 4), 1e-3);
    }

    #[test]
    fn batchnorm_gradient() {
        let layer = LayerImpl::BatchNorm {
            gamma: vec![1.2, 0.8],
            beta: vec![0.1, -0.4],
        };
        check_input_gradient(&layer, rand4((2, 2, 3, 3), 5), 1e-2);
    }

    #[test]
    fn resample_and_crop_gradients() {
        check_input_gradient(
            &LayerImpl::Downsample { factor: [1, 3, 3] },
            rand4((2, 1, 9, 9), 6),
            1e-3,
        );
        check_input_gradient(
            &LayerImpl::Upsample { factor: [1, 3, 3] },
            rand4((2, 1, 3, 3), 7),
            1e-3,
        );
        check_input_gradient(
            &LayerImpl::Crop { margin: [0, 2, 2] },
            rand4((2, 1, 7, 7), 8),
            1e-3,
        );
    }

    #[test]
    fn batchnorm_output_is_standardized() {
        let layer = LayerImpl::BatchNorm {
            gamma: vec![1.0],
            beta: vec![0.0],
        };
        let x = rand4((1, 2, 5, 5), 9);
        let (y, _) = layer.forward(&[&x]).unwrap();
        let n = y.len() as f64;
        let mean = y.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = y.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-5);
        assert!((var - 1.0).abs() < 1e-3);
    }
}
