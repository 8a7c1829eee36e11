//! Shard-local compute kernels on `(batch, x, y, z, channels)` blocks.
//!
//! Convolutions are direct loop nests. For every output element the sum runs
//! over kernel offsets `(kx, ky, kz)` in row-major order, then input
//! channels, and the bias is added last; this order is what makes the
//! partitioned result bitwise equal to the single-device one.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

fn dims5(t: &Tensor<impl crate::tensor::Element>, what: &str) -> Result<[usize; 5]> {
    <[usize; 5]>::try_from(t.shape()).map_err(|_| Error::ShapeMismatch {
        what: format!("{what}: expected a (batch, x, y, z, channels) tensor"),
        expected: vec![0; 5],
        got: t.shape().to_vec(),
    })
}

/// Checks a `[k, k, k, c_in, c_out]` kernel and returns `(k, c_in, c_out)`.
pub fn kernel_dims<T: Real>(weight: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let s = weight.shape();
    if s.len() != 5 || s[0] != s[1] || s[1] != s[2] {
        return Err(Error::ShapeMismatch {
            what: "convolution kernel [k, k, k, c_in, c_out]".into(),
            expected: vec![],
            got: s.to_vec(),
        });
    }
    if s[0] % 2 == 0 {
        return Err(Error::EvenKernel(s[0]));
    }
    Ok((s[0], s[3], s[4]))
}

/// VALID convolution of an already padded block.
pub fn conv3d_valid<T: Real>(padded: &Tensor<T>, weight: &Tensor<T>, bias: &[T]) -> Result<Tensor<T>> {
    let [b, px, py, pz, ci] = dims5(padded, "conv input")?;
    let (k, wci, co) = kernel_dims(weight)?;
    if wci != ci {
        return Err(Error::ChannelMismatch {
            what: "conv3d input".into(),
            expected: wci,
            got: ci,
        });
    }
    if bias.len() != co || px < k || py < k || pz < k {
        return Err(Error::ShapeMismatch {
            what: "conv3d bias / padded extent".into(),
            expected: vec![co, k, k, k],
            got: vec![bias.len(), px, py, pz],
        });
    }
    let (ox, oy, oz) = (px - k + 1, py - k + 1, pz - k + 1);
    let mut out = Tensor::zeros(&[b, ox, oy, oz, co]);
    let geom = [b, px, py, pz, ci, k, co];
    let (src, w, dst) = (padded.data(), weight.data(), out.data_mut());
    match co {
        1 => conv_fwd::<T, 1>(geom, src, w, bias, dst),
        2 => conv_fwd::<T, 2>(geom, src, w, bias, dst),
        3 => conv_fwd::<T, 3>(geom, src, w, bias, dst),
        4 => conv_fwd::<T, 4>(geom, src, w, bias, dst),
        8 => conv_fwd::<T, 8>(geom, src, w, bias, dst),
        16 => conv_fwd::<T, 16>(geom, src, w, bias, dst),
        32 => conv_fwd::<T, 32>(geom, src, w, bias, dst),
        24 => conv_fwd::<T, 24>(geom, src, w, bias, dst),
        48 => conv_fwd::<T, 48>(geom, src, w, bias, dst),
        _ => conv_fwd::<T, 0>(geom, src, w, bias, dst),
    }
    Ok(out)
}

fn conv_fwd<T: Real, const C: usize>(geom: [usize; 7], src: &[T], w: &[T], bias: &[T], dst: &mut [T]) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the feature was just detected.
        unsafe { conv_fwd_avx2::<T, C>(geom, src, w, bias, dst) };
        return;
    }
    conv_fwd_impl::<T, C>(geom, src, w, bias, dst)
}

// Same loop nest with wider vectors. Multiplies and adds stay separate
// (no fused multiply-add), so results are bitwise identical to the
// baseline build.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
fn conv_fwd_avx2<T: Real, const C: usize>(geom: [usize; 7], src: &[T], w: &[T], bias: &[T], dst: &mut [T]) {
    conv_fwd_impl::<T, C>(geom, src, w, bias, dst)
}

/// Forward loop nest. `C` fixes the output channel count at compile time
/// for common sizes (0 = read it from `geom`).
#[inline(always)]
fn conv_fwd_impl<T: Real, const C: usize>(geom: [usize; 7], src: &[T], w: &[T], bias: &[T], dst: &mut [T]) {
    let [b, px, py, pz, ci, k, co_dyn] = geom;
    let co = if C > 0 { C } else { co_dyn };
    let (ox, oy, oz) = (px - k + 1, py - k + 1, pz - k + 1);
    let span = k * ci;
    // Several z outputs share each weight row; every output still sums its
    // terms in (kx, ky, kz, ci) order.
    const ZB: usize = 4;
    let mut acc = vec![T::zero(); ZB * co];
    for n in 0..b {
        for x in 0..ox {
            for y in 0..oy {
                let mut z0 = 0;
                while z0 < oz {
                    let nz = ZB.min(oz - z0);
                    acc.fill(T::zero());
                    for kx in 0..k {
                        for ky in 0..k {
                            let row = (((n * px + x + kx) * py + y + ky) * pz + z0) * ci;
                            let wbase = (kx * k + ky) * span * co;
                            let ws = &w[wbase..wbase + span * co];
                            let xs = &src[row..row + (nz - 1) * ci + span];
                            for j in 0..span {
                                let wr = &ws[j * co..(j + 1) * co];
                                for zz in 0..nz {
                                    let xv = xs[zz * ci + j];
                                    let a = &mut acc[zz * co..(zz + 1) * co];
                                    for o in 0..co {
                                        a[o] += xv * wr[o];
                                    }
                                }
                            }
                        }
                    }
                    let o_off = (((n * ox + x) * oy + y) * oz + z0) * co;
                    for zz in 0..nz {
                        let d = &mut dst[o_off + zz * co..o_off + (zz + 1) * co];
                        for ((d, &a), &bv) in d.iter_mut().zip(&acc[zz * co..(zz + 1) * co]).zip(bias) {
                            *d = a + bv;
                        }
                    }
                    z0 += nz;
                }
            }
        }
    }
}

/// Gradients of [`conv3d_valid`]: with respect to the padded input, the
/// kernel, and the bias.
///
/// Kernel and bias gradients are accumulated per batch element and the
/// per-element partials are then summed in batch order, the same grouping a
/// batch-split mesh produces with its rank-ordered all-reduce.
pub fn conv3d_valid_backward<T: Real>(
    padded: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let [b, px, py, pz, ci] = dims5(padded, "conv backward input")?;
    let (k, _, co) = kernel_dims(weight)?;
    let (ox, oy, oz) = (px + 1 - k, py + 1 - k, pz + 1 - k);
    if grad_out.shape() != [b, ox, oy, oz, co] {
        return Err(Error::ShapeMismatch {
            what: "conv3d output gradient".into(),
            expected: vec![b, ox, oy, oz, co],
            got: grad_out.shape().to_vec(),
        });
    }
    let wlen = weight.len();
    let src = padded.data();
    let g = grad_out.data();
    // The input gradient is a valid convolution of the output gradient,
    // zero-padded by k - 1, with the kernel flipped and transposed.
    let m = k - 1;
    let mut gpad = Tensor::zeros(&[b, ox + 2 * m, oy + 2 * m, oz + 2 * m, co]);
    gpad.write_box(&[0, m, m, m, 0], grad_out);
    let wflip = Tensor::from_fn(&[k, k, k, co, ci], |i| {
        weight.get(&[m - i[0], m - i[1], m - i[2], i[4], i[3]])
    });
    let gin = conv3d_valid(&gpad, &wflip, &vec![T::zero(); ci])?;
    drop(gpad);
    let mut gw_total = vec![T::zero(); wlen];
    let mut gb_total = vec![T::zero(); co];
    let geom = [b, px, py, pz, ci, k, co];
    let bufs = (gw_total.as_mut_slice(), gb_total.as_mut_slice());
    match co {
        1 => conv_bwd::<T, 1>(geom, src, g, bufs),
        2 => conv_bwd::<T, 2>(geom, src, g, bufs),
        3 => conv_bwd::<T, 3>(geom, src, g, bufs),
        4 => conv_bwd::<T, 4>(geom, src, g, bufs),
        8 => conv_bwd::<T, 8>(geom, src, g, bufs),
        16 => conv_bwd::<T, 16>(geom, src, g, bufs),
        32 => conv_bwd::<T, 32>(geom, src, g, bufs),
        24 => conv_bwd::<T, 24>(geom, src, g, bufs),
        48 => conv_bwd::<T, 48>(geom, src, g, bufs),
        _ => conv_bwd::<T, 0>(geom, src, g, bufs),
    }
    Ok((
        gin,
        Tensor::from_vec(weight.shape(), gw_total)?,
        Tensor::from_vec(&[co], gb_total)?,
    ))
}

/// 2x2x2 non-overlapping max. The second result holds, for every output
/// element, the offset `dx * 4 + dy * 2 + dz` of the first maximum in scan
/// order.
pub fn maxpool2<T: Real>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<u8>)> {
    let [b, sx, sy, sz, c] = dims5(x, "maxpool input")?;
    if sx % 2 != 0 || sy % 2 != 0 || sz % 2 != 0 {
        return Err(Error::Config(format!(
            "max-pool needs even local extents, got {sx}x{sy}x{sz}"
        )));
    }
    let (hx, hy, hz) = (sx / 2, sy / 2, sz / 2);
    let mut out = Tensor::zeros(&[b, hx, hy, hz, c]);
    let mut arg = vec![0u8; out.len()];
    let src = x.data();
    let dst = out.data_mut();
    let mut o = 0;
    for n in 0..b {
        for i in 0..hx {
            for j in 0..hy {
                for l in 0..hz {
                    for ch in 0..c {
                        let mut best = T::neg_infinity();
                        let mut at = 0u8;
                        let mut first = true;
                        for dx in 0..2 {
                            for dy in 0..2 {
                                for dz in 0..2 {
                                    let v = src[(((n * sx + 2 * i + dx) * sy + 2 * j + dy) * sz + 2 * l + dz) * c + ch];
                                    if first || v > best {
                                        best = v;
                                        at = (dx * 4 + dy * 2 + dz) as u8;
                                        first = false;
                                    }
                                }
                            }
                        }
                        dst[o] = best;
                        arg[o] = at;
                        o += 1;
                    }
                }
            }
        }
    }
    Ok((out, arg))
}

/// Routes each pooled gradient to the recorded argmax voxel.
pub fn maxpool2_backward<T: Real>(grad: &Tensor<T>, argmax: &[u8], input_shape: &[usize]) -> Result<Tensor<T>> {
    let [b, hx, hy, hz, c] = dims5(grad, "maxpool gradient")?;
    if input_shape != [b, 2 * hx, 2 * hy, 2 * hz, c] || argmax.len() != grad.len() {
        return Err(Error::ShapeMismatch {
            what: "maxpool backward".into(),
            expected: vec![b, 2 * hx, 2 * hy, 2 * hz, c],
            got: input_shape.to_vec(),
        });
    }
    let (sx, sy, sz) = (2 * hx, 2 * hy, 2 * hz);
    let mut gin = Tensor::zeros(input_shape);
    let g = grad.data();
    let dst = gin.data_mut();
    let mut o = 0;
    for n in 0..b {
        for i in 0..hx {
            for j in 0..hy {
                for l in 0..hz {
                    for ch in 0..c {
                        let a = argmax[o] as usize;
                        let (dx, dy, dz) = (a / 4, (a / 2) % 2, a % 2);
                        dst[(((n * sx + 2 * i + dx) * sy + 2 * j + dy) * sz + 2 * l + dz) * c + ch] += g[o];
                        o += 1;
                    }
                }
            }
        }
    }
    Ok(gin)
}

/// Nearest-neighbour x2 upsampling along every spatial dimension.
pub fn upsample2<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [b, sx, sy, sz, c] = dims5(x, "upsample input")?;
    let (ux, uy, uz) = (2 * sx, 2 * sy, 2 * sz);
    let mut out = Tensor::zeros(&[b, ux, uy, uz, c]);
    let src = x.data();
    let dst = out.data_mut();
    for n in 0..b {
        for i in 0..ux {
            for j in 0..uy {
                for l in 0..uz {
                    let s = (((n * sx + i / 2) * sy + j / 2) * sz + l / 2) * c;
                    let d = (((n * ux + i) * uy + j) * uz + l) * c;
                    dst[d..d + c].copy_from_slice(&src[s..s + c]);
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`upsample2`]: sums each 2x2x2 cell in scan order.
pub fn upsample2_backward<T: Real>(grad: &Tensor<T>) -> Result<Tensor<T>> {
    let [b, ux, uy, uz, c] = dims5(grad, "upsample gradient")?;
    if ux % 2 != 0 || uy % 2 != 0 || uz % 2 != 0 {
        return Err(Error::ShapeMismatch {
            what: "upsample gradient extents must be even".into(),
            expected: vec![],
            got: grad.shape().to_vec(),
        });
    }
    let (sx, sy, sz) = (ux / 2, uy / 2, uz / 2);
    let mut out = Tensor::zeros(&[b, sx, sy, sz, c]);
    let g = grad.data();
    let dst = out.data_mut();
    for n in 0..b {
        for i in 0..sx {
            for j in 0..sy {
                for l in 0..sz {
                    let d = (((n * sx + i) * sy + j) * sz + l) * c;
                    for dx in 0..2 {
                        for dy in 0..2 {
                            for dz in 0..2 {
                                let s = (((n * ux + 2 * i + dx) * uy + 2 * j + dy) * uz + 2 * l + dz) * c;
                                for ch in 0..c {
                                    dst[d + ch] += g[s + ch];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient of ReLU given its output.
pub fn relu_backward<T: Real>(grad: &Tensor<T>, out: &Tensor<T>) -> Tensor<T> {
    let data = grad
        .data()
        .iter()
        .zip(out.data())
        .map(|(&g, &y)| if y > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(grad.shape(), data).expect("same shape")
}

/// Softmax over the last (channel) dimension.
pub fn softmax_channels<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let c = *x.shape().last().unwrap_or(&1);
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(c) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v = *v / s;
        }
    }
    out
}

/// Pulls a gradient with respect to softmax probabilities back to logits:
/// `g_z = p * (g_p - <p, g_p>)` per voxel.
pub fn softmax_backward<T: Real>(probs: &Tensor<T>, grad_probs: &Tensor<T>) -> Tensor<T> {
    let c = *probs.shape().last().unwrap_or(&1);
    let mut out = Tensor::zeros(probs.shape());
    for ((o, p), g) in out
        .data_mut()
        .chunks_mut(c)
        .zip(probs.data().chunks(c))
        .zip(grad_probs.data().chunks(c))
    {
        let mut inner = T::zero();
        for (&pv, &gv) in p.iter().zip(g) {
            inner += pv * gv;
        }
        for ((ov, &pv), &gv) in o.iter_mut().zip(p).zip(g) {
            *ov = pv * (gv - inner);
        }
    }
    out
}

/// Splits the last dimension into `[0, first)` and `[first, end)`.
pub fn split_channels<T: Real>(x: &Tensor<T>, first: usize) -> (Tensor<T>, Tensor<T>) {
    let last = x.ndim() - 1;
    let c = x.shape()[last];
    (x.slice_dim(last, 0, first), x.slice_dim(last, first, c - first))
}

/// Kernel and bias gradient loop nest; `C` as in [`conv_fwd_impl`].
type GradBufs<'a, T> = (&'a mut [T], &'a mut [T]);

fn conv_bwd<T: Real, const C: usize>(geom: [usize; 7], src: &[T], g: &[T], bufs: GradBufs<'_, T>) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the feature was just detected.
        unsafe { conv_bwd_avx2::<T, C>(geom, src, g, bufs) };
        return;
    }
    conv_bwd_impl::<T, C>(geom, src, g, bufs)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
fn conv_bwd_avx2<T: Real, const C: usize>(geom: [usize; 7], src: &[T], g: &[T], bufs: GradBufs<'_, T>) {
    conv_bwd_impl::<T, C>(geom, src, g, bufs)
}

#[inline(always)]
fn conv_bwd_impl<T: Real, const C: usize>(
    geom: [usize; 7],
    src: &[T],
    g: &[T],
    (gw_total, gb_total): GradBufs<'_, T>,
) {
    let [b, px, py, pz, ci, k, co_dyn] = geom;
    let co = if C > 0 { C } else { co_dyn };
    let (ox, oy, oz) = (px + 1 - k, py + 1 - k, pz + 1 - k);
    let span = k * ci;
    let mut gw = vec![T::zero(); gw_total.len()];
    let mut gb = vec![T::zero(); co];
    const ZB: usize = 4;
    let mut g_off = 0;
    for n in 0..b {
        gw.fill(T::zero());
        gb.fill(T::zero());
        for x in 0..ox {
            for y in 0..oy {
                let mut z0 = 0;
                while z0 < oz {
                    let nz = ZB.min(oz - z0);
                    let gr = &g[g_off..g_off + nz * co];
                    g_off += nz * co;
                    z0 += nz;
                    if gr.iter().all(|v| v.is_zero()) {
                        continue;
                    }
                    for zz in 0..nz {
                        for (a, &gv) in gb.iter_mut().zip(&gr[zz * co..(zz + 1) * co]) {
                            *a += gv;
                        }
                    }
                    for kx in 0..k {
                        for ky in 0..k {
                            let kk = kx * k + ky;
                            let row = (((n * px + x + kx) * py + y + ky) * pz + z0 - nz) * ci;
                            let xs = &src[row..row + (nz - 1) * ci + span];
                            let gwr = &mut gw[kk * span * co..(kk + 1) * span * co];
                            let mut j0 = 0;
                            if C > 0 {
                                // JB kernel rows at a time in registers, so
                                // the adds over zz are independent chains.
                                const JB: usize = 4;
                                while j0 + JB <= span {
                                    let mut acc = [[T::zero(); C]; JB];
                                    for (q, a) in acc.iter_mut().enumerate() {
                                        a.copy_from_slice(&gwr[(j0 + q) * C..(j0 + q + 1) * C]);
                                    }
                                    for zz in 0..nz {
                                        let gz = &gr[zz * C..(zz + 1) * C];
                                        for (q, a) in acc.iter_mut().enumerate() {
                                            let xv = xs[zz * ci + j0 + q];
                                            for o in 0..C {
                                                a[o] += xv * gz[o];
                                            }
                                        }
                                    }
                                    for (q, a) in acc.iter().enumerate() {
                                        gwr[(j0 + q) * C..(j0 + q + 1) * C].copy_from_slice(a);
                                    }
                                    j0 += JB;
                                }
                            }
                            for j in j0..span {
                                let a = &mut gwr[j * co..(j + 1) * co];
                                for zz in 0..nz {
                                    let xv = xs[zz * ci + j];
                                    let gz = &gr[zz * co..(zz + 1) * co];
                                    for o in 0..co {
                                        a[o] += xv * gz[o];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        if n == 0 {
            gw_total.copy_from_slice(&gw);
            gb_total.copy_from_slice(&gb);
        } else {
            for (t, &v) in gw_total.iter_mut().zip(&gw) {
                *t += v;
            }
            for (t, &v) in gb_total.iter_mut().zip(&gb) {
                *t += v;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_pool_routes_to_first_voxel() {
        let x = Tensor::full(&[1, 4, 2, 2, 1], 3.0f64);
        let (y, arg) = maxpool2(&x).unwrap();
        assert_eq!(y.data(), &[3.0, 3.0]);
        assert_eq!(arg, vec![0, 0]);
        let g = maxpool2_backward(&Tensor::full(&[1, 2, 1, 1, 1], 1.0), &arg, x.shape()).unwrap();
        assert_eq!(g.get(&[0, 0, 0, 0, 0]), 1.0);
        assert_eq!(g.get(&[0, 2, 0, 0, 0]), 1.0);
        assert_eq!(g.data().iter().sum::<f64>(), 2.0);
    }

    #[test]
    fn odd_pool_extent_is_an_error() {
        assert!(maxpool2(&Tensor::<f32>::zeros(&[1, 5, 2, 2, 1])).is_err());
    }

    #[test]
    fn upsample_extent_one() {
        let x = Tensor::from_vec(&[1, 1, 1, 1, 2], vec![7.0f32, -1.0]).unwrap();
        let y = upsample2(&x).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2, 2, 2]);
        assert!(y.data().chunks(2).all(|c| c == [7.0, -1.0]));
    }

    #[test]
    fn pool_inverts_upsample() {
        let x = Tensor::from_fn(&[2, 3, 2, 1, 3], |i| (i.iter().sum::<usize>() as f64).sin());
        let (back, _) = maxpool2(&upsample2(&x).unwrap()).unwrap();
        assert_eq!(back, x);
    }

    #[test]
    fn relu_of_nonpositive_is_zero() {
        let x = Tensor::from_vec(&[4], vec![0.0f32, 1.0, 2.5, 1e-30]).unwrap();
        let y = relu(&x.map(|v| -v));
        assert!(y.data().iter().all(|v| v.to_bits() == 0));
    }

    #[test]
    fn softmax_uniform_logits() {
        let x = Tensor::full(&[2, 3], 0.7f64);
        let p = softmax_channels(&x);
        for v in p.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let x = Tensor::from_fn(&[1, 4, 3, 5, 2], |i| (i[1] * 7 + i[2] * 3 + i[3] + i[4] * 11) as f32 * 0.37);
        let mut w = Tensor::zeros(&[3, 3, 3, 2, 2]);
        w.set(&[1, 1, 1, 0, 0], 1.0);
        w.set(&[1, 1, 1, 1, 1], 1.0);
        let padded = crate::oracle::zero_pad_spatial(&x, 1);
        let y = conv3d_valid(&padded, &w, &[0.0, 0.0]).unwrap();
        assert!(y.data().iter().zip(x.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
