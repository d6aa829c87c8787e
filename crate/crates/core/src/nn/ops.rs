//! Convolution primitives: im2col / col2im with z-slab chunking and the
//! forward/backward routines for strided, padded convolution and
//! transposed convolution. Feature tensors are `[c, z, y, x]`.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, Array4, ArrayView2, ArrayView4};

/// Geometry of a (possibly strided, padded) convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvGeom {
    pub fn unit(kernel: [usize; 3]) -> ConvGeom {
        ConvGeom {
            kernel,
            stride: [1; 3],
            pad: [0; 3],
        }
    }

    pub fn out_dims(&self, input: [usize; 3]) -> Option<[usize; 3]> {
        let mut out = [0usize; 3];
        for a in 0..3 {
            let padded = input[a] + 2 * self.pad[a];
            if padded < self.kernel[a] {
                return None;
            }
            out[a] = (padded - self.kernel[a]) / self.stride[a] + 1;
        }
        Some(out)
    }

    fn kvol(&self) -> usize {
        self.kernel[0] * self.kernel[1] * self.kernel[2]
    }
}

/// Slab height over output z so an im2col buffer stays within a fixed
/// float budget.
fn slab_height(rows: usize, out: [usize; 3]) -> usize {
    const BUDGET: usize = 8 << 20; // floats (32 MiB)
    let per_slice = rows * out[1] * out[2];
    (BUDGET / per_slice.max(1)).clamp(1, out[0])
}

/// Fill `cols` (rows = cin*kvol, columns = slab output positions) for the
/// output z range `[oz0, oz1)`. Out-of-bounds taps read zero.
fn im2col_slab(
    x: &ArrayView4<f32>,
    g: &ConvGeom,
    out: [usize; 3],
    oz0: usize,
    oz1: usize,
    cols: &mut Array2<f32>,
) {
    let (cin, iz, iy, ix) = x.dim();
    let [kz, ky, kx] = g.kernel;
    let [sz, sy, sx] = g.stride;
    let [pz, py, px] = g.pad;
    let (oy, ox) = (out[1], out[2]);
    let slab = oz1 - oz0;
    debug_assert_eq!(cols.dim(), (cin * g.kvol(), slab * oy * ox));
    cols.fill(0.0);
    let cols_slice = cols.as_slice_mut().expect("cols contiguous");
    let x_slice = x.as_slice().expect("input contiguous");
    let row_len = slab * oy * ox;

    for ci in 0..cin {
        for dz in 0..kz {
            for dy in 0..ky {
                for dx in 0..kx {
                    let row = ((ci * kz + dz) * ky + dy) * kx + dx;
                    let out_row = &mut cols_slice[row * row_len..(row + 1) * row_len];
                    for oz in oz0..oz1 {
                        let z = (oz * sz + dz) as isize - pz as isize;
                        if z < 0 || z as usize >= iz {
                            continue;
                        }
                        for oyi in 0..oy {
                            let yy = (oyi * sy + dy) as isize - py as isize;
                            if yy < 0 || yy as usize >= iy {
                                continue;
                            }
                            let src_base = ((ci * iz + z as usize) * iy + yy as usize) * ix;
                            let dst_base = ((oz - oz0) * oy + oyi) * ox;
                            if sx == 1 {
                                // x taps form a contiguous run, clipped at borders.
                                let first = dx as isize - px as isize; // x for oxi = 0
                                let lo = (-first).max(0) as usize;
                                let hi = (ix as isize - first).clamp(0, ox as isize) as usize;
                                if hi > lo {
                                    let src0 = (src_base as isize + first + lo as isize) as usize;
                                    out_row[dst_base + lo..dst_base + hi]
                                        .copy_from_slice(&x_slice[src0..src0 + (hi - lo)]);
                                }
                            } else {
                                for oxi in 0..ox {
                                    let xx = (oxi * sx + dx) as isize - px as isize;
                                    if xx >= 0 && (xx as usize) < ix {
                                        out_row[dst_base + oxi] =
                                            x_slice[src_base + xx as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col_slab`]: scatter-add columns back into `dx`.
fn col2im_slab_add(
    cols: &ArrayView2<f32>,
    g: &ConvGeom,
    out: [usize; 3],
    oz0: usize,
    oz1: usize,
    dx: &mut Array4<f32>,
) {
    let (cin, iz, iy, ix) = dx.dim();
    let [kz, ky, kx] = g.kernel;
    let [sz, sy, sx] = g.stride;
    let [pz, py, px] = g.pad;
    let (oy, ox) = (out[1], out[2]);
    let slab = oz1 - oz0;
    debug_assert_eq!(cols.dim(), (cin * g.kvol(), slab * oy * ox));
    let cols_slice = cols.as_slice().expect("cols contiguous");
    let dx_slice = dx.as_slice_mut().expect("dx contiguous");
    let row_len = slab * oy * ox;

    for ci in 0..cin {
        for dz in 0..kz {
            for dy in 0..ky {
                for dx_k in 0..kx {
                    let row = ((ci * kz + dz) * ky + dy) * kx + dx_k;
                    let in_row = &cols_slice[row * row_len..(row + 1) * row_len];
                    for oz in oz0..oz1 {
                        let z = (oz * sz + dz) as isize - pz as isize;
                        if z < 0 || z as usize >= iz {
                            continue;
                        }
                        for oyi in 0..oy {
                            let yy = (oyi * sy + dy) as isize - py as isize;
                            if yy < 0 || yy as usize >= iy {
                                continue;
                            }
                            let dst_base = ((ci * iz + z as usize) * iy + yy as usize) * ix;
                            let src_base = ((oz - oz0) * oy + oyi) * ox;
                            if sx == 1 {
                                let first = dx_k as isize - px as isize;
                                let lo = (-first).max(0) as usize;
                                let hi = (ix as isize - first).clamp(0, ox as isize) as usize;
                                for o in lo..hi {
                                    let xi = (first + o as isize) as usize;
                                    dx_slice[dst_base + xi] += in_row[src_base + o];
                                }
                            } else {
                                for oxi in 0..ox {
                                    let xx = (oxi * sx + dx_k) as isize - px as isize;
                                    if xx >= 0 && (xx as usize) < ix {
                                        dx_slice[dst_base + xx as usize] +=
                                            in_row[src_base + oxi];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// y = W * im2col(x) + b, with W of shape (cout, cin * kvol).
pub fn conv_forward(
    x: &ArrayView4<f32>,
    w: &ArrayView2<f32>,
    b: &[f32],
    g: &ConvGeom,
) -> Array4<f32> {
    let (cin, izd, iyd, ixd) = x.dim();
    let out = g
        .out_dims([izd, iyd, ixd])
        .expect("conv output dims must be validated by the caller");
    let cout = w.dim().0;
    debug_assert_eq!(w.dim().1, cin * g.kvol());
    let n = out[0] * out[1] * out[2];
    let mut y = Array2::<f32>::zeros((cout, n));
    let rows = cin * g.kvol();
    let slab = slab_height(rows, out);
    let mut cols = Array2::<f32>::zeros((rows, slab * out[1] * out[2]));
    let mut oz0 = 0;
    while oz0 < out[0] {
        let oz1 = (oz0 + slab).min(out[0]);
        let width = (oz1 - oz0) * out[1] * out[2];
        if width != cols.dim().1 {
            cols = Array2::<f32>::zeros((rows, width));
        }
        im2col_slab(x, g, out, oz0, oz1, &mut cols);
        let n0 = oz0 * out[1] * out[2];
        let mut y_chunk = y.slice_mut(s![.., n0..n0 + width]);
        general_mat_mul(1.0, w, &cols.view(), 0.0, &mut y_chunk);
        oz0 = oz1;
    }
    for (co, &bias) in b.iter().enumerate() {
        if bias != 0.0 {
            y.row_mut(co).mapv_inplace(|v| v + bias);
        }
    }
    y.into_shape_with_order((cout, out[0], out[1], out[2]))
        .expect("conv reshape")
}

/// Gradients of a convolution. Returns (dx, dw, db).
pub fn conv_backward(
    x: &ArrayView4<f32>,
    w: &ArrayView2<f32>,
    g: &ConvGeom,
    dy: &ArrayView4<f32>,
) -> (Array4<f32>, Array2<f32>, Vec<f32>) {
    let (cin, izd, iyd, ixd) = x.dim();
    let (cout, oz, oy, ox) = dy.dim();
    let out = [oz, oy, ox];
    debug_assert_eq!(g.out_dims([izd, iyd, ixd]), Some(out));
    let n = oz * oy * ox;
    let dy_mat = dy
        .to_shape((cout, n))
        .expect("dy reshape")
        .into_owned();
    let rows = cin * g.kvol();
    let mut dw = Array2::<f32>::zeros((cout, rows));
    let mut dx = Array4::<f32>::zeros((cin, izd, iyd, ixd));
    let slab = slab_height(rows, out);
    let mut cols = Array2::<f32>::zeros((rows, slab * oy * ox));
    let mut dcols = Array2::<f32>::zeros((rows, slab * oy * ox));
    let mut oz0 = 0;
    while oz0 < oz {
        let oz1 = (oz0 + slab).min(oz);
        let width = (oz1 - oz0) * oy * ox;
        if width != cols.dim().1 {
            cols = Array2::<f32>::zeros((rows, width));
            dcols = Array2::<f32>::zeros((rows, width));
        }
        let n0 = oz0 * oy * ox;
        let dy_chunk = dy_mat.slice(s![.., n0..n0 + width]);

        im2col_slab(x, g, out, oz0, oz1, &mut cols);
        general_mat_mul(1.0, &dy_chunk, &cols.t(), 1.0, &mut dw);

        general_mat_mul(1.0, &w.t(), &dy_chunk, 0.0, &mut dcols);
        col2im_slab_add(&dcols.view(), g, out, oz0, oz1, &mut dx);
        oz0 = oz1;
    }
    let db = (0..cout)
        .map(|co| dy_mat.row(co).iter().map(|&v| v as f64).sum::<f64>() as f32)
        .collect();
    (dx, dw, db)
}

/// Transposed-convolution geometry: the mirror convolution maps the deconv
/// output back to its input. `out = stride * (in - 1) + kernel - 2*pad +
/// out_pad`, and `pad == out_pad` is required so the last output voxel is
/// reachable.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DeconvGeom {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub out_pad: [usize; 3],
}

impl DeconvGeom {
    pub fn out_dims(&self, input: [usize; 3]) -> [usize; 3] {
        let mut out = [0usize; 3];
        for a in 0..3 {
            out[a] = self.stride[a] * (input[a] - 1) + self.kernel[a] - 2 * self.pad[a]
                + self.out_pad[a];
        }
        out
    }

    fn mirror(&self) -> ConvGeom {
        ConvGeom {
            kernel: self.kernel,
            stride: self.stride,
            pad: self.pad,
        }
    }
}

/// Transposed convolution; W has shape (cin, cout * kvol).
pub fn deconv_forward(
    x: &ArrayView4<f32>,
    w: &ArrayView2<f32>,
    b: &[f32],
    g: &DeconvGeom,
) -> Array4<f32> {
    let (cin, izd, iyd, ixd) = x.dim();
    let out = g.out_dims([izd, iyd, ixd]);
    let mirror = g.mirror();
    debug_assert_eq!(mirror.out_dims(out), Some([izd, iyd, ixd]));
    let kvol = g.kernel[0] * g.kernel[1] * g.kernel[2];
    let cout = w.dim().1 / kvol;
    let n = izd * iyd * ixd;
    let x_mat = x.to_shape((cin, n)).expect("x reshape").into_owned();
    let mut ycols = Array2::<f32>::zeros((cout * kvol, n));
    general_mat_mul(1.0, &w.t(), &x_mat.view(), 0.0, &mut ycols);
    let mut y = Array4::<f32>::zeros((cout, out[0], out[1], out[2]));
    // The deconv input grid is the mirror conv's output grid (one slab).
    col2im_slab_add(&ycols.view(), &mirror, [izd, iyd, ixd], 0, izd, &mut y);
    for (co, &bias) in b.iter().enumerate() {
        if bias != 0.0 {
            y.index_axis_mut(ndarray::Axis(0), co)
                .mapv_inplace(|v| v + bias);
        }
    }
    y
}

/// Gradients of a transposed convolution. Returns (dx, dw, db).
pub fn deconv_backward(
    x: &ArrayView4<f32>,
    w: &ArrayView2<f32>,
    g: &DeconvGeom,
    dy: &ArrayView4<f32>,
) -> (Array4<f32>, Array2<f32>, Vec<f32>) {
    let (cin, izd, iyd, ixd) = x.dim();
    let (cout, _, _, _) = dy.dim();
    let mirror = g.mirror();
    let kvol = g.kernel[0] * g.kernel[1] * g.kernel[2];
    let n = izd * iyd * ixd;
    let rows = cout * kvol;
    let mut dycols = Array2::<f32>::zeros((rows, n));
    // The mirror conv's "input" is dy; its im2col columns line up with the
    // deconv input positions.
    im2col_slab(dy, &mirror, [izd, iyd, ixd], 0, izd, &mut dycols);

    // dx = W * im2col(dy)
    let mut dx_mat = Array2::<f32>::zeros((cin, n));
    general_mat_mul(1.0, w, &dycols.view(), 0.0, &mut dx_mat);
    let dx = dx_mat
        .into_shape_with_order((cin, izd, iyd, ixd))
        .expect("dx reshape");

    // dW = x_mat * im2col(dy)^T
    let x_mat = x.to_shape((cin, n)).expect("x reshape").into_owned();
    let mut dw = Array2::<f32>::zeros((cin, rows));
    general_mat_mul(1.0, &x_mat.view(), &dycols.t(), 0.0, &mut dw);

    let db = (0..cout)
        .map(|co| {
            dy.index_axis(ndarray::Axis(0), co)
                .iter()
                .map(|&v| v as f64)
                .sum::<f64>() as f32
        })
        .collect();
    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    fn brute_conv(
        x: &Array4<f32>,
        w: &Array2<f32>,
        b: &[f32],
        g: &ConvGeom,
    ) -> Array4<f32> {
        let (cin, iz, iy, ix) = x.dim();
        let out = g.out_dims([iz, iy, ix]).unwrap();
        let cout = w.dim().0;
        let [kz, ky, kx] = g.kernel;
        let mut y = Array4::<f32>::zeros((cout, out[0], out[1], out[2]));
        for co in 0..cout {
            for oz in 0..out[0] {
                for oy in 0..out[1] {
                    for ox in 0..out[2] {
                        let mut acc = b[co];
                        for ci in 0..cin {
                            for dz in 0..kz {
                                for dy in 0..ky {
                                    for dx in 0..kx {
                                        let z = (oz * g.stride[0] + dz) as isize - g.pad[0] as isize;
                                        let yy = (oy * g.stride[1] + dy) as isize - g.pad[1] as isize;
                                        let xx = (ox * g.stride[2] + dx) as isize - g.pad[2] as isize;
                                        if z < 0 || yy < 0 || xx < 0 {
                                            continue;
                                        }
                                        let (z, yy, xx) = (z as usize, yy as usize, xx as usize);
                                        if z >= iz || yy >= iy || xx >= ix {
                                            continue;
                                        }
                                        let row = ((ci * kz + dz) * ky + dy) * kx + dx;
                                        acc += w[[co, row]] * x[[ci, z, yy, xx]];
                                    }
                                }
                            }
                        }
                        y[[co, oz, oy, ox]] = acc;
                    }
                }
            }
        }
        y
    }

    fn rand_array4(dims: (usize, usize, usize, usize), seed: u64) -> Array4<f32> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_simple_fn(dims, || rng.random_range(-1.0..1.0))
    }

    fn rand_array2(dims: (usize, usize), seed: u64) -> Array2<f32> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn(dims, || rng.random_range(-1.0..1.0))
    }

    #[test]
    fn gemm_conv_matches_brute_force() {
        let cases = [
            (ConvGeom { kernel: [3, 3, 3], stride: [1; 3], pad: [0; 3] }, (2, 5, 6, 7)),
            (ConvGeom { kernel: [1, 3, 3], stride: [1; 3], pad: [0, 1, 1] }, (3, 1, 6, 5)),
            (ConvGeom { kernel: [3, 3, 3], stride: [1; 3], pad: [1; 3] }, (2, 4, 4, 4)),
            (ConvGeom { kernel: [1, 1, 1], stride: [1; 3], pad: [0; 3] }, (4, 3, 3, 3)),
        ];
        for (i, (g, dims)) in cases.iter().enumerate() {
            let x = rand_array4(*dims, 10 + i as u64);
            let cout = 3;
            let w = rand_array2((cout, dims.0 * g.kernel.iter().product::<usize>()), 20 + i as u64);
            let b = vec![0.1, -0.2, 0.3];
            let got = conv_forward(&x.view(), &w.view(), &b, g);
            let want = brute_conv(&x, &w, &b, g);
            assert_eq!(got.dim(), want.dim());
            for (a, b) in got.iter().zip(want.iter()) {
                assert!((a - b).abs() < 1e-4, "{a} vs {b} in case {i}");
            }
        }
    }

    #[test]
    fn deconv_doubles_spatial_dims() {
        // UNet-style kernel 2 stride 2 and UResNet-style kernel 3 stride 2.
        let x = rand_array4((2, 3, 4, 4), 1);
        let g2 = DeconvGeom { kernel: [2; 3], stride: [2; 3], pad: [0; 3], out_pad: [0; 3] };
        let w2 = rand_array2((2, 3 * 8), 2);
        let y2 = deconv_forward(&x.view(), &w2.view(), &[0.0; 3], &g2);
        assert_eq!(y2.dim(), (3, 6, 8, 8));

        let g3 = DeconvGeom { kernel: [3; 3], stride: [2; 3], pad: [1; 3], out_pad: [1; 3] };
        let w3 = rand_array2((2, 3 * 27), 3);
        let y3 = deconv_forward(&x.view(), &w3.view(), &[0.0; 3], &g3);
        assert_eq!(y3.dim(), (3, 6, 8, 8));
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let g = ConvGeom { kernel: [1, 3, 3], stride: [1; 3], pad: [0, 1, 1] };
        let x = rand_array4((2, 1, 4, 5), 42);
        let mut w = rand_array2((2, 2 * 9), 43);
        let b = vec![0.05, -0.07];
        // Loss = sum(y^2) / 2 so that dy = y.
        let y = conv_forward(&x.view(), &w.view(), &b, &g);
        let (dx, dw, db) = conv_backward(&x.view(), &w.view(), &g, &y.view());
        let loss = |x: &Array4<f32>, w: &Array2<f32>, b: &[f32]| -> f64 {
            conv_forward(&x.view(), &w.view(), b, &g)
                .iter()
                .map(|&v| (v as f64).powi(2) / 2.0)
                .sum()
        };
        let h = 1e-3f32;
        // spot-check a few weight entries
        for &(i, j) in &[(0usize, 0usize), (1, 5), (0, 17)] {
            let orig = w[[i, j]];
            w[[i, j]] = orig + h;
            let lp = loss(&x, &w, &b);
            w[[i, j]] = orig - h;
            let lm = loss(&x, &w, &b);
            w[[i, j]] = orig;
            let fd = (lp - lm) / (2.0 * h as f64);
            let an = dw[[i, j]] as f64;
            assert!((fd - an).abs() / fd.abs().max(1.0) < 1e-2, "dw {fd} vs {an}");
        }
        // spot-check dx
        let mut xm = x.clone();
        for &(c, z, yy, xx) in &[(0usize, 0usize, 1usize, 2usize), (1, 0, 3, 4)] {
            let orig = xm[[c, z, yy, xx]];
            xm[[c, z, yy, xx]] = orig + h;
            let lp = loss(&xm, &w, &b);
            xm[[c, z, yy, xx]] = orig - h;
            let lm = loss(&xm, &w, &b);
            xm[[c, z, yy, xx]] = orig;
            let fd = (lp - lm) / (2.0 * h as f64);
            let an = dx[[c, z, yy, xx]] as f64;
            assert!((fd - an).abs() / fd.abs().max(1.0) < 1e-2, "dx {fd} vs {an}");
        }
        let _ = db;
    }

    #[test]
    fn deconv_backward_matches_finite_differences() {
        let g = DeconvGeom { kernel: [1, 3, 3], stride: [1, 2, 2], pad: [0, 1, 1], out_pad: [0, 1, 1] };
        let x = rand_array4((2, 1, 3, 3), 7);
        let mut w = rand_array2((2, 2 * 9), 8);
        let b = vec![0.0, 0.0];
        let y = deconv_forward(&x.view(), &w.view(), &b, &g);
        assert_eq!(y.dim(), (2, 1, 6, 6));
        let (dx, dw, _db) = deconv_backward(&x.view(), &w.view(), &g, &y.view());
        let loss = |x: &Array4<f32>, w: &Array2<f32>| -> f64 {
            deconv_forward(&x.view(), &w.view(), &b, &g)
                .iter()
                .map(|&v| (v as f64).powi(2) / 2.0)
                .sum()
        };
        let h = 1e-3f32;
        for &(i, j) in &[(0usize, 3usize), (1, 10)] {
            let orig = w[[i, j]];
            w[[i, j]] = orig + h;
            let lp = loss(&x, &w);
            w[[i, j]] = orig - h;
            let lm = loss(&x, &w);
            w[[i, j]] = orig;
            let fd = (lp - lm) / (2.0 * h as f64);
            let an = dw[[i, j]] as f64;
            assert!((fd - an).abs() / fd.abs().max(1.0) < 1e-2, "dw {fd} vs {an}");
        }
        let mut xm = x.clone();
        let orig = xm[[1, 0, 2, 1]];
        let h = 1e-3f32;
        xm[[1, 0, 2, 1]] = orig + h;
        let lp = loss(&xm, &w);
        xm[[1, 0, 2, 1]] = orig - h;
        let lm = loss(&xm, &w);
        let fd = (lp - lm) / (2.0 * h as f64);
        let an = dx[[1, 0, 2, 1]] as f64;
        assert!((fd - an).abs() / fd.abs().max(1.0) < 1e-2, "dx {fd} vs {an}");
    }
}
