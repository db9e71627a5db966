//! CPU kernels behind the tape operations.
//!
//! All parallel loops split over independent output rows/planes, so each
//! output element is reduced by exactly one thread in a fixed order and
//! results are bitwise identical to the serial path.

use rayon::prelude::*;

use crate::scalar::Scalar;

/// Minimum work (m*k*n) before a matmul bothers spawning rayon tasks.
const PAR_THRESHOLD: usize = 1 << 15;

/// c[m,n] = a[m,k] * b[k,n], all row-major.
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    let body = |i: usize, row: &mut [T]| {
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip != T::zero() {
                let b_row = &b[p * n..(p + 1) * n];
                for (cj, &bj) in row.iter_mut().zip(b_row) {
                    *cj = *cj + a_ip * bj;
                }
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        c.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, row)| body(i, row));
    } else {
        for (i, row) in c.chunks_mut(n).enumerate() {
            body(i, row);
        }
    }
    c
}

/// c[m,n] = a[m,k] * b^T where b is stored [n,k].
pub fn matmul_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    let body = |i: usize, row: &mut [T]| {
        let a_row = &a[i * k..(i + 1) * k];
        for (j, cj) in row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut s = T::zero();
            for (&x, &y) in a_row.iter().zip(b_row) {
                s = s + x * y;
            }
            *cj = s;
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        c.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, row)| body(i, row));
    } else {
        for (i, row) in c.chunks_mut(n).enumerate() {
            body(i, row);
        }
    }
    c
}

/// c[m,n] = a^T * b where a is stored [k,m] and b is stored [k,n].
pub fn matmul_tn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    let body = |i: usize, row: &mut [T]| {
        for p in 0..k {
            let a_pi = a[p * m + i];
            if a_pi != T::zero() {
                let b_row = &b[p * n..(p + 1) * n];
                for (cj, &bj) in row.iter_mut().zip(b_row) {
                    *cj = *cj + a_pi * bj;
                }
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        c.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, row)| body(i, row));
    } else {
        for (i, row) in c.chunks_mut(n).enumerate() {
            body(i, row);
        }
    }
    c
}

/// Geometry of a 2-D convolution.
#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub in_h: usize,
    pub in_w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.dilation * (self.k - 1) - 1) / self.stride + 1
    }
    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.dilation * (self.k - 1) - 1) / self.stride + 1
    }
}

/// Gather sliding-window patches of one image [c,h,w] into cols [c*k*k, oh*ow].
pub fn im2col<T: Scalar>(img: &[T], channels: usize, g: &ConvGeom, cols: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let span = oh * ow;
    debug_assert_eq!(cols.len(), channels * g.k * g.k * span);
    for c in 0..channels {
        let plane = &img[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = &mut cols[(c * g.k * g.k + ky * g.k + kx) * span..][..span];
                for oy in 0..oh {
                    let y = (oy * g.stride + ky * g.dilation) as isize - g.pad as isize;
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    if y < 0 || y >= g.in_h as isize {
                        for v in dst.iter_mut() {
                            *v = T::zero();
                        }
                        continue;
                    }
                    let src_row = &plane[y as usize * g.in_w..(y as usize + 1) * g.in_w];
                    for (ox, v) in dst.iter_mut().enumerate() {
                        let x = (ox * g.stride + kx * g.dilation) as isize - g.pad as isize;
                        *v = if x < 0 || x >= g.in_w as isize {
                            T::zero()
                        } else {
                            src_row[x as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add cols [c*k*k, oh*ow] back into one image [c,h,w]; adjoint of `im2col`.
pub fn col2im<T: Scalar>(cols: &[T], channels: usize, g: &ConvGeom, img: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let span = oh * ow;
    for c in 0..channels {
        let plane = &mut img[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = &cols[(c * g.k * g.k + ky * g.k + kx) * span..][..span];
                for oy in 0..oh {
                    let y = (oy * g.stride + ky * g.dilation) as isize - g.pad as isize;
                    if y < 0 || y >= g.in_h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[y as usize * g.in_w..(y as usize + 1) * g.in_w];
                    for ox in 0..ow {
                        let x = (ox * g.stride + kx * g.dilation) as isize - g.pad as isize;
                        if x >= 0 && x < g.in_w as isize {
                            dst_row[x as usize] = dst_row[x as usize] + row[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// out [n,o,oh,ow] = conv2d(input [n,i,h,w], weight [o,i,k,k], bias [o]).
pub fn conv2d_fwd<T: Scalar>(
    input: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    batch: usize,
    in_c: usize,
    out_c: usize,
    g: &ConvGeom,
) -> Vec<T> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let span = oh * ow;
    let ikk = in_c * g.k * g.k;
    let in_plane = in_c * g.in_h * g.in_w;
    let mut out = vec![T::zero(); batch * out_c * span];
    out.par_chunks_mut(out_c * span)
        .enumerate()
        .for_each(|(n, out_n)| {
            let mut cols = vec![T::zero(); ikk * span];
            im2col(&input[n * in_plane..(n + 1) * in_plane], in_c, g, &mut cols);
            let prod = matmul(weight, &cols, out_c, ikk, span);
            out_n.copy_from_slice(&prod);
            if let Some(b) = bias {
                for o in 0..out_c {
                    let bo = b[o];
                    for v in &mut out_n[o * span..(o + 1) * span] {
                        *v = *v + bo;
                    }
                }
            }
        });
    out
}

/// Gradients of conv2d w.r.t. (input, weight, bias).
pub fn conv2d_bwd<T: Scalar>(
    input: &[T],
    weight: &[T],
    dout: &[T],
    batch: usize,
    in_c: usize,
    out_c: usize,
    g: &ConvGeom,
    want_dinput: bool,
    want_dweight: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let span = oh * ow;
    let ikk = in_c * g.k * g.k;
    let in_plane = in_c * g.in_h * g.in_w;

    let mut dinput = vec![T::zero(); if want_dinput { batch * in_plane } else { 0 }];
    let mut dweight = vec![T::zero(); if want_dweight { out_c * ikk } else { 0 }];
    let mut dbias = vec![T::zero(); out_c];

    for n in 0..batch {
        let dout_n = &dout[n * out_c * span..(n + 1) * out_c * span];
        if want_dinput {
            // dcols = W^T * dout_n, then scatter back.
            let dcols = matmul_tn(weight, dout_n, ikk, out_c, span);
            col2im(
                &dcols,
                in_c,
                g,
                &mut dinput[n * in_plane..(n + 1) * in_plane],
            );
        }
        if want_dweight {
            let mut cols = vec![T::zero(); ikk * span];
            im2col(&input[n * in_plane..(n + 1) * in_plane], in_c, g, &mut cols);
            let dw_n = matmul_nt(dout_n, &cols, out_c, span, ikk);
            for (dw, d) in dweight.iter_mut().zip(dw_n.iter()) {
                *dw = *dw + *d;
            }
        }
        for o in 0..out_c {
            let mut s = T::zero();
            for &v in &dout_n[o * span..(o + 1) * span] {
                s = s + v;
            }
            dbias[o] = dbias[o] + s;
        }
    }
    (dinput, dweight, dbias)
}

/// out [n,o,oh,ow] = conv_transpose2d(input [n,i,h,w], weight [i,o,k,k]).
///
/// `g` describes the *equivalent forward conv* going out -> in: g.in_h/in_w is
/// the transposed-conv output size, g.out_h()/out_w() equals the input size.
pub fn conv_transpose2d_fwd<T: Scalar>(
    input: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    batch: usize,
    in_c: usize,
    out_c: usize,
    g: &ConvGeom,
) -> Vec<T> {
    let span = g.out_h() * g.out_w(); // input spatial size
    let okk = out_c * g.k * g.k;
    let out_plane = out_c * g.in_h * g.in_w;
    let in_plane = in_c * span;
    let mut out = vec![T::zero(); batch * out_plane];
    out.par_chunks_mut(out_plane).enumerate().for_each(|(n, out_n)| {
        let in_n = &input[n * in_plane..(n + 1) * in_plane];
        // cols[q, s] = sum_i weight[i, q] * in[i, s]
        let cols = matmul_tn(weight, in_n, okk, in_c, span);
        col2im(&cols, out_c, g, out_n);
        if let Some(b) = bias {
            for o in 0..out_c {
                let bo = b[o];
                for v in &mut out_n[o * g.in_h * g.in_w..(o + 1) * g.in_h * g.in_w] {
                    *v = *v + bo;
                }
            }
        }
    });
    out
}

/// Gradients of conv_transpose2d w.r.t. (input, weight, bias).
pub fn conv_transpose2d_bwd<T: Scalar>(
    input: &[T],
    weight: &[T],
    dout: &[T],
    batch: usize,
    in_c: usize,
    out_c: usize,
    g: &ConvGeom,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let span = g.out_h() * g.out_w();
    let okk = out_c * g.k * g.k;
    let out_plane = out_c * g.in_h * g.in_w;
    let in_plane = in_c * span;

    let mut dinput = vec![T::zero(); batch * in_plane];
    let mut dweight = vec![T::zero(); in_c * okk];
    let mut dbias = vec![T::zero(); out_c];

    for n in 0..batch {
        let dout_n = &dout[n * out_plane..(n + 1) * out_plane];
        let in_n = &input[n * in_plane..(n + 1) * in_plane];
        let mut dcols = vec![T::zero(); okk * span];
        im2col(dout_n, out_c, g, &mut dcols);
        // dinput = W * dcols
        let di = matmul(weight, &dcols, in_c, okk, span);
        dinput[n * in_plane..(n + 1) * in_plane].copy_from_slice(&di);
        // dweight[i, q] += sum_s in[i, s] * dcols[q, s]
        let dw_n = matmul_nt(in_n, &dcols, in_c, span, okk);
        for (dw, d) in dweight.iter_mut().zip(dw_n.iter()) {
            *dw = *dw + *d;
        }
        for o in 0..out_c {
            let mut s = T::zero();
            for &v in &dout_n[o * g.in_h * g.in_w..(o + 1) * g.in_h * g.in_w] {
                s = s + v;
            }
            dbias[o] = dbias[o] + s;
        }
    }
    (dinput, dweight, dbias)
}

/// Depthwise conv2d: weight [c,1,k,k], each channel convolved independently.
pub fn dwconv2d_fwd<T: Scalar>(
    input: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    batch: usize,
    channels: usize,
    g: &ConvGeom,
) -> Vec<T> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let span = oh * ow;
    let kk = g.k * g.k;
    let mut out = vec![T::zero(); batch * channels * span];
    out.par_chunks_mut(span).enumerate().for_each(|(nc, out_p)| {
        let (n, c) = (nc / channels, nc % channels);
        let plane = &input[(n * channels + c) * g.in_h * g.in_w..][..g.in_h * g.in_w];
        let w = &weight[c * kk..(c + 1) * kk];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = T::zero();
                for ky in 0..g.k {
                    let y = (oy * g.stride + ky * g.dilation) as isize - g.pad as isize;
                    if y < 0 || y >= g.in_h as isize {
                        continue;
                    }
                    for kx in 0..g.k {
                        let x = (ox * g.stride + kx * g.dilation) as isize - g.pad as isize;
                        if x >= 0 && x < g.in_w as isize {
                            s = s + plane[y as usize * g.in_w + x as usize] * w[ky * g.k + kx];
                        }
                    }
                }
                if let Some(b) = bias {
                    s = s + b[c];
                }
                out_p[oy * ow + ox] = s;
            }
        }
    });
    out
}

/// Gradients of depthwise conv2d.
pub fn dwconv2d_bwd<T: Scalar>(
    input: &[T],
    weight: &[T],
    dout: &[T],
    batch: usize,
    channels: usize,
    g: &ConvGeom,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let kk = g.k * g.k;
    let plane_sz = g.in_h * g.in_w;
    let mut dinput = vec![T::zero(); batch * channels * plane_sz];
    let mut dweight = vec![T::zero(); channels * kk];
    let mut dbias = vec![T::zero(); channels];

    for n in 0..batch {
        for c in 0..channels {
            let plane = &input[(n * channels + c) * plane_sz..][..plane_sz];
            let dplane = &mut dinput[(n * channels + c) * plane_sz..][..plane_sz];
            let dout_p = &dout[(n * channels + c) * oh * ow..][..oh * ow];
            let w = &weight[c * kk..(c + 1) * kk];
            let dw = &mut dweight[c * kk..(c + 1) * kk];
            for oy in 0..oh {
                for ox in 0..ow {
                    let go = dout_p[oy * ow + ox];
                    if go == T::zero() {
                        continue;
                    }
                    dbias[c] = dbias[c] + go;
                    for ky in 0..g.k {
                        let y = (oy * g.stride + ky * g.dilation) as isize - g.pad as isize;
                        if y < 0 || y >= g.in_h as isize {
                            continue;
                        }
                        for kx in 0..g.k {
                            let x = (ox * g.stride + kx * g.dilation) as isize - g.pad as isize;
                            if x >= 0 && x < g.in_w as isize {
                                let pos = y as usize * g.in_w + x as usize;
                                dw[ky * g.k + kx] = dw[ky * g.k + kx] + go * plane[pos];
                                dplane[pos] = dplane[pos] + go * w[ky * g.k + kx];
                            }
                        }
                    }
                }
            }
            // dbias accumulated only where go != 0 above misses zero entries, which
            // contribute nothing anyway.
        }
    }
    (dinput, dweight, dbias)
}

/// Max pooling; returns (out, argmax) where argmax holds the flat input index
/// of each window maximum (first index wins ties) or usize::MAX for windows
/// that cover padding only.
pub fn maxpool2d_fwd<T: Scalar>(
    input: &[T],
    batch: usize,
    channels: usize,
    g: &ConvGeom,
) -> (Vec<T>, Vec<usize>) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let span = oh * ow;
    let plane_sz = g.in_h * g.in_w;
    let mut out = vec![T::zero(); batch * channels * span];
    let mut argmax = vec![usize::MAX; batch * channels * span];
    for n in 0..batch {
        for c in 0..channels {
            let base = (n * channels + c) * plane_sz;
            let plane = &input[base..base + plane_sz];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best: Option<(T, usize)> = None;
                    for ky in 0..g.k {
                        let y = (oy * g.stride + ky) as isize - g.pad as isize;
                        if y < 0 || y >= g.in_h as isize {
                            continue;
                        }
                        for kx in 0..g.k {
                            let x = (ox * g.stride + kx) as isize - g.pad as isize;
                            if x < 0 || x >= g.in_w as isize {
                                continue;
                            }
                            let pos = y as usize * g.in_w + x as usize;
                            let v = plane[pos];
                            // Strict > keeps the first (row-major) maximum.
                            if best.map_or(true, |(bv, _)| v > bv) {
                                best = Some((v, pos));
                            }
                        }
                    }
                    let oi = (n * channels + c) * span + oy * ow + ox;
                    if let Some((v, pos)) = best {
                        out[oi] = v;
                        argmax[oi] = base + pos;
                    }
                }
            }
        }
    }
    (out, argmax)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let eye = vec![1.0f64, 0.0, 0.0, 1.0];
        let b = vec![3.0, 4.0, 5.0, 6.0];
        assert_eq!(matmul(&eye, &b, 2, 2, 2), b);
    }

    #[test]
    fn matmul_variants_agree() {
        // Random-ish fixed matrices; nt/tn must match plain matmul on
        // explicitly transposed operands.
        let a: Vec<f64> = (0..6).map(|i| (i as f64) * 0.7 - 1.0).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|i| (i as f64) * 0.3 + 0.1).collect(); // 3x4
        let c = matmul(&a, &b, 2, 3, 4);

        // b stored transposed: 4x3
        let mut bt = vec![0.0; 12];
        for i in 0..3 {
            for j in 0..4 {
                bt[j * 3 + i] = b[i * 4 + j];
            }
        }
        assert_eq!(matmul_nt(&a, &bt, 2, 3, 4), c);

        // a stored transposed: 3x2
        let mut at = vec![0.0; 6];
        for i in 0..2 {
            for j in 0..3 {
                at[j * 2 + i] = a[i * 3 + j];
            }
        }
        assert_eq!(matmul_tn(&at, &b, 2, 3, 4), c);
    }

    #[test]
    fn im2col_col2im_adjoint() {
        // <im2col(x), y> == <x, col2im(y)> for random x, y: the defining
        // property the conv backward relies on.
        let g = ConvGeom {
            in_h: 5,
            in_w: 4,
            k: 3,
            stride: 2,
            pad: 1,
            dilation: 1,
        };
        let c = 2;
        let span = g.out_h() * g.out_w();
        let x: Vec<f64> = (0..c * 20).map(|i| (i as f64 * 37.0) % 11.0 - 5.0).collect();
        let y: Vec<f64> = (0..c * 9 * span)
            .map(|i| (i as f64 * 17.0) % 7.0 - 3.0)
            .collect();
        let mut cols = vec![0.0; c * 9 * span];
        im2col(&x, c, &g, &mut cols);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; c * 20];
        col2im(&y, c, &g, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
    }

    #[test]
    fn conv_center_and_corner_sums() {
        // 3x3 all-ones kernel, pad 1, all-ones 3x3 input: center 9, corners 4.
        let g = ConvGeom {
            in_h: 3,
            in_w: 3,
            k: 3,
            stride: 1,
            pad: 1,
            dilation: 1,
        };
        let out = conv2d_fwd(&vec![1.0f64; 9], &vec![1.0; 9], None, 1, 1, 1, &g);
        assert_eq!(out[4], 9.0);
        assert_eq!(out[0], 4.0);
        assert_eq!(out[2], 4.0);
        assert_eq!(out[6], 4.0);
        assert_eq!(out[8], 4.0);
    }

    #[test]
    fn maxpool_basic_and_tiebreak() {
        let g = ConvGeom {
            in_h: 2,
            in_w: 2,
            k: 2,
            stride: 2,
            pad: 0,
            dilation: 1,
        };
        let (out, arg) = maxpool2d_fwd(&[1.0f32, 2.0, 3.0, 4.0], 1, 1, &g);
        assert_eq!(out, vec![4.0]);
        assert_eq!(arg, vec![3]);
        // Constant input: first index in row-major order wins.
        let (out, arg) = maxpool2d_fwd(&[7.0f32; 4], 1, 1, &g);
        assert_eq!(out, vec![7.0]);
        assert_eq!(arg, vec![0]);
    }
}
