//! Single-device reference implementations.
//!
//! Everything here works on dense global tensors and is written
//! independently of the partitioned path: the convolution loops are
//! duplicated rather than shared so that an indexing bug in the production
//! kernel cannot hide behind the reference. Accumulation orders are kept
//! identical to the production kernels so comparisons can be bitwise.

mod fd;
mod model;

pub use fd::{finite_difference_check, BlockReport, FdReport};
pub use model::{oracle_backward, oracle_forward, oracle_loss, OracleModel, OracleTape};

use crate::tensor::{Real, Tensor};

/// Zero-pads the three spatial dimensions of a `(b, x, y, z, c)` tensor by
/// `m` on each side.
pub fn zero_pad_spatial<T: Real>(x: &Tensor<T>, m: usize) -> Tensor<T> {
    let s = x.shape();
    let mut out = Tensor::zeros(&[s[0], s[1] + 2 * m, s[2] + 2 * m, s[3] + 2 * m, s[4]]);
    out.write_box(&[0, m, m, m, 0], x);
    out
}

/// SAME convolution by direct summation over the zero-padded tensor.
pub fn conv3d<T: Real>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Tensor<T> {
    let ws = weight.shape();
    let (k, ci, co) = (ws[0], ws[3], ws[4]);
    assert_eq!(x.shape()[4], ci, "oracle conv3d channel mismatch");
    let m = (k - 1) / 2;
    let p = zero_pad_spatial(x, m);
    let [b, nx, ny, nz, _] = <[usize; 5]>::try_from(x.shape()).expect("5-d input");
    let (py, pz) = (ny + 2 * m, nz + 2 * m);
    let pd = p.data();
    let wd = weight.data();
    let px_stride = py * pz * ci;
    let mut out = Tensor::zeros(&[b, nx, ny, nz, co]);
    let mut acc = vec![T::zero(); co];
    for n in 0..b {
        for i in 0..nx {
            for j in 0..ny {
                for l in 0..nz {
                    for a in acc.iter_mut() {
                        *a = T::zero();
                    }
                    for kx in 0..k {
                        for ky in 0..k {
                            for kz in 0..k {
                                for c in 0..ci {
                                    let xv = pd[n * (nx + 2 * m) * px_stride
                                        + (i + kx) * px_stride
                                        + ((j + ky) * pz + (l + kz)) * ci
                                        + c];
                                    let wo = (((kx * k + ky) * k + kz) * ci + c) * co;
                                    for o in 0..co {
                                        acc[o] += xv * wd[wo + o];
                                    }
                                }
                            }
                        }
                    }
                    for o in 0..co {
                        out.set(&[n, i, j, l, o], acc[o] + bias.data()[o]);
                    }
                }
            }
        }
    }
    out
}

/// Gradients of [`conv3d`] with respect to input, kernel and bias.
pub fn conv3d_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let ws = weight.shape();
    let (k, ci, co) = (ws[0], ws[3], ws[4]);
    let m = (k - 1) / 2;
    let p = zero_pad_spatial(x, m);
    let [b, nx, ny, nz, _] = <[usize; 5]>::try_from(x.shape()).expect("5-d input");
    let mut gp = Tensor::zeros(p.shape());
    let mut gw = Tensor::zeros(ws);
    let mut gb = Tensor::zeros(&[co]);
    let wd = weight.data();
    for n in 0..b {
        let mut gw_n = vec![T::zero(); weight.len()];
        let mut gb_n = vec![T::zero(); co];
        for i in 0..nx {
            for j in 0..ny {
                for l in 0..nz {
                    let g: Vec<T> = (0..co).map(|o| grad_out.get(&[n, i, j, l, o])).collect();
                    for o in 0..co {
                        gb_n[o] += g[o];
                    }
                    for kx in 0..k {
                        for ky in 0..k {
                            for kz in 0..k {
                                for c in 0..ci {
                                    let at = [n, i + kx, j + ky, l + kz, c];
                                    let xv = p.get(&at);
                                    let wo = (((kx * k + ky) * k + kz) * ci + c) * co;
                                    let mut dot = T::zero();
                                    for o in 0..co {
                                        gw_n[wo + o] += xv * g[o];
                                        dot += wd[wo + o] * g[o];
                                    }
                                    let prev = gp.get(&at);
                                    gp.set(&at, prev + dot);
                                }
                            }
                        }
                    }
                }
            }
        }
        if n == 0 {
            gw.data_mut().copy_from_slice(&gw_n);
            gb.data_mut().copy_from_slice(&gb_n);
        } else {
            for (a, v) in gw.data_mut().iter_mut().zip(gw_n) {
                *a += v;
            }
            for (a, v) in gb.data_mut().iter_mut().zip(gb_n) {
                *a += v;
            }
        }
    }
    let gx = gp.sub_box(&[0, m, m, m, 0], x.shape());
    (gx, gw, gb)
}

/// 2x2x2 max-pool; ties go to the first voxel in scan order.
pub fn maxpool2<T: Real>(x: &Tensor<T>) -> (Tensor<T>, Vec<u8>) {
    let s = x.shape();
    let out_shape = [s[0], s[1] / 2, s[2] / 2, s[3] / 2, s[4]];
    let mut arg = Vec::new();
    let mut out = Tensor::zeros(&out_shape);
    for n in 0..s[0] {
        for i in 0..out_shape[1] {
            for j in 0..out_shape[2] {
                for l in 0..out_shape[3] {
                    for c in 0..s[4] {
                        let mut best: Option<(T, u8)> = None;
                        for cell in 0..8u8 {
                            let (dx, dy, dz) = ((cell >> 2) as usize, ((cell >> 1) & 1) as usize, (cell & 1) as usize);
                            let v = x.get(&[n, 2 * i + dx, 2 * j + dy, 2 * l + dz, c]);
                            if best.is_none_or(|(b, _)| v > b) {
                                best = Some((v, cell));
                            }
                        }
                        let (v, cell) = best.expect("eight candidates");
                        out.set(&[n, i, j, l, c], v);
                        arg.push(cell);
                    }
                }
            }
        }
    }
    (out, arg)
}

pub fn maxpool2_backward<T: Real>(grad: &Tensor<T>, argmax: &[u8], input_shape: &[usize]) -> Tensor<T> {
    let s = grad.shape();
    let mut out = Tensor::zeros(input_shape);
    let mut it = argmax.iter();
    for n in 0..s[0] {
        for i in 0..s[1] {
            for j in 0..s[2] {
                for l in 0..s[3] {
                    for c in 0..s[4] {
                        let cell = *it.next().expect("argmax per output");
                        let (dx, dy, dz) = ((cell >> 2) as usize, ((cell >> 1) & 1) as usize, (cell & 1) as usize);
                        let at = [n, 2 * i + dx, 2 * j + dy, 2 * l + dz, c];
                        let prev = out.get(&at);
                        out.set(&at, prev + grad.get(&[n, i, j, l, c]));
                    }
                }
            }
        }
    }
    out
}

pub fn upsample2<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    Tensor::from_fn(&[s[0], 2 * s[1], 2 * s[2], 2 * s[3], s[4]], |i| {
        x.get(&[i[0], i[1] / 2, i[2] / 2, i[3] / 2, i[4]])
    })
}

pub fn upsample2_backward<T: Real>(grad: &Tensor<T>) -> Tensor<T> {
    let s = grad.shape();
    Tensor::from_fn(&[s[0], s[1] / 2, s[2] / 2, s[3] / 2, s[4]], |i| {
        let mut acc = T::zero();
        for cell in 0..8usize {
            let (dx, dy, dz) = (cell >> 2, (cell >> 1) & 1, cell & 1);
            acc += grad.get(&[i[0], 2 * i[1] + dx, 2 * i[2] + dy, 2 * i[3] + dz, i[4]]);
        }
        acc
    })
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn softmax_channels<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let c = x.shape()[x.ndim() - 1];
    let mut out = Vec::with_capacity(x.len());
    for row in x.data().chunks(c) {
        let m = row.iter().fold(T::neg_infinity(), |a, &b| if b > a { b } else { a });
        let e: Vec<T> = row.iter().map(|&v| (v - m).exp()).collect();
        let s = e.iter().fold(T::zero(), |a, &b| a + b);
        out.extend(e.into_iter().map(|v| v / s));
    }
    Tensor::from_vec(x.shape(), out).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_backward_is_adjoint_of_forward() {
        let x = Tensor::from_fn(&[2, 3, 4, 2, 2], |i| ((i[1] * 5 + i[2] * 3 + i[3] + i[0] + i[4] * 7) as f64).sin());
        let w = Tensor::from_fn(&[3, 3, 3, 2, 3], |i| ((i.iter().sum::<usize>() * 13 % 7) as f64) - 3.0);
        let zero_b = Tensor::zeros(&[3]);
        let y = conv3d(&x, &w, &zero_b);
        let g = Tensor::from_fn(y.shape(), |i| ((i[1] + 2 * i[2] + 3 * i[3] + i[4]) as f64).cos());
        let (gx, _, _) = conv3d_backward(&x, &w, &g);
        let lhs = y.dot(&g);
        let rhs = x.dot(&gx);
        assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0));
    }

    #[test]
    fn pool_matches_kernel() {
        let x = Tensor::from_fn(&[1, 4, 4, 2, 2], |i| ((i[1] * 31 + i[2] * 17 + i[3] * 5 + i[4]) % 11) as f32);
        let (a, aa) = maxpool2(&x);
        let (b, ba) = crate::ops::kernels::maxpool2(&x).unwrap();
        assert_eq!(a, b);
        assert_eq!(aa, ba);
    }
}
