//! Low-level compute kernels: GEMM wrappers over `matrixmultiply`, im2col /
//! col2im, and pooling. Everything here is single-sample and allocation-free;
//! batching and parallelism live in the layers above.

/// C = alpha * A @ B + beta * C, all row-major.
pub fn gemm_nn(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: &[f32],
    b: &[f32],
    beta: f32,
    c: &mut [f32],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// C = alpha * A^T @ B + beta * C; A is stored row-major as (k x m).
pub fn gemm_tn(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: &[f32],
    b: &[f32],
    beta: f32,
    c: &mut [f32],
) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// C = alpha * A @ B^T + beta * C; B is stored row-major as (n x k).
pub fn gemm_nt(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: &[f32],
    b: &[f32],
    beta: f32,
    c: &mut [f32],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Conv output spatial size (floor convention).
pub fn conv_out_dim(dim: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (dim + 2 * pad - kernel) / stride + 1
}

/// Unfold `input` (in_ch, h, w) into `cols` (in_ch*k*k, oh*ow) for a
/// k x k convolution. Out-of-bounds taps are zero.
#[allow(clippy::too_many_arguments)]
pub fn im2col(
    input: &[f32],
    in_ch: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    cols: &mut [f32],
) {
    let oh = conv_out_dim(h, kernel, stride, pad);
    let ow = conv_out_dim(w, kernel, stride, pad);
    debug_assert_eq!(cols.len(), in_ch * kernel * kernel * oh * ow);
    let mut row_base = 0;
    for c in 0..in_ch {
        let plane = &input[c * h * w..(c + 1) * h * w];
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = &mut cols[row_base..row_base + oh * ow];
                row_base += oh * ow;
                let mut out_idx = 0;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        row[out_idx..out_idx + ow].fill(0.0);
                        out_idx += ow;
                        continue;
                    }
                    let iy = iy as usize;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        row[out_idx] = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            plane[iy * w + ix as usize]
                        };
                        out_idx += 1;
                    }
                }
            }
        }
    }
}

/// Scatter-add the column gradient back to the input gradient; inverse of
/// [`im2col`].
#[allow(clippy::too_many_arguments)]
pub fn col2im(
    cols: &[f32],
    in_ch: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    d_input: &mut [f32],
) {
    let oh = conv_out_dim(h, kernel, stride, pad);
    let ow = conv_out_dim(w, kernel, stride, pad);
    debug_assert_eq!(cols.len(), in_ch * kernel * kernel * oh * ow);
    debug_assert_eq!(d_input.len(), in_ch * h * w);
    let mut row_base = 0;
    for c in 0..in_ch {
        let plane = &mut d_input[c * h * w..(c + 1) * h * w];
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = &cols[row_base..row_base + oh * ow];
                row_base += oh * ow;
                let mut idx = 0;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        idx += ow;
                        continue;
                    }
                    let iy = iy as usize;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            plane[iy * w + ix as usize] += row[idx];
                        }
                        idx += 1;
                    }
                }
            }
        }
    }
}

/// 2x2 max pool with stride 2. Records the flat input index of each winner
/// (first occurrence wins ties) for the backward pass.
pub fn maxpool2(input: &[f32], ch: usize, h: usize, w: usize, out: &mut [f32], argmax: &mut [u32]) {
    let (oh, ow) = (h / 2, w / 2);
    debug_assert_eq!(out.len(), ch * oh * ow);
    for c in 0..ch {
        let plane = &input[c * h * w..(c + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let base = (oy * 2) * w + ox * 2;
                let candidates = [base, base + 1, base + w, base + w + 1];
                let mut best = candidates[0];
                for &idx in &candidates[1..] {
                    if plane[idx] > plane[best] {
                        best = idx;
                    }
                }
                let o = (c * oh + oy) * ow + ox;
                out[o] = plane[best];
                argmax[o] = (c * h * w + best) as u32;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_small_known_product() {
        // [1 2; 3 4] @ [5 6; 7 8] = [19 22; 43 50]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm_nn(2, 2, 2, 1.0, &a, &b, 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);

        // A^T path: a stored as (k=2 x m=2)
        let mut ct = [0.0; 4];
        gemm_tn(2, 2, 2, 1.0, &a, &b, 0.0, &mut ct);
        // A^T = [1 3; 2 4] -> product [26 30; 38 44]
        assert_eq!(ct, [26.0, 30.0, 38.0, 44.0]);

        // B^T path: b stored as (n=2 x k=2)
        let mut cn = [0.0; 4];
        gemm_nt(2, 2, 2, 1.0, &a, &b, 0.0, &mut cn);
        // B^T = [5 7; 6 8] -> A @ B^T = [17 23; 39 53]
        assert_eq!(cn, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn im2col_matches_direct_convolution() {
        // 1 channel 4x4, 3x3 kernel, pad 1: conv via im2col+gemm must equal
        // the naive nested-loop convolution.
        let input: Vec<f32> = (0..16).map(|i| i as f32 * 0.25 - 1.0).collect();
        let weight: Vec<f32> = (0..9).map(|i| ((i * 7) % 5) as f32 - 2.0).collect();
        let mut cols = vec![0.0; 9 * 16];
        im2col(&input, 1, 4, 4, 3, 1, 1, &mut cols);
        let mut out = vec![0.0; 16];
        gemm_nn(1, 9, 16, 1.0, &weight, &cols, 0.0, &mut out);

        for oy in 0..4i32 {
            for ox in 0..4i32 {
                let mut acc = 0.0;
                for ky in 0..3i32 {
                    for kx in 0..3i32 {
                        let iy = oy + ky - 1;
                        let ix = ox + kx - 1;
                        if iy >= 0 && iy < 4 && ix >= 0 && ix < 4 {
                            acc += weight[(ky * 3 + kx) as usize]
                                * input[(iy * 4 + ix) as usize];
                        }
                    }
                }
                let got = out[(oy * 4 + ox) as usize];
                assert!((got - acc).abs() < 1e-5, "({oy},{ox}): {got} vs {acc}");
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)> for random x, y.
        use rand::Rng;
        let mut rng = crate::rng::stream(11, 0xdead);
        let (ch, h, w, k, s, p) = (2, 5, 5, 3, 2, 1);
        let oh = conv_out_dim(h, k, s, p);
        let ow = conv_out_dim(w, k, s, p);
        let x: Vec<f32> = (0..ch * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y: Vec<f32> = (0..ch * k * k * oh * ow)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let mut cols = vec![0.0; y.len()];
        im2col(&x, ch, h, w, k, s, p, &mut cols);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        let mut back = vec![0.0; x.len()];
        col2im(&y, ch, h, w, k, s, p, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        assert!((lhs - rhs).abs() < 1e-3, "{lhs} vs {rhs}");
    }

    #[test]
    fn maxpool_picks_first_max_on_ties() {
        let input = vec![1.0, 1.0, 0.0, 0.0];
        let mut out = vec![0.0; 1];
        let mut argmax = vec![0u32; 1];
        maxpool2(&input, 1, 2, 2, &mut out, &mut argmax);
        assert_eq!(out[0], 1.0);
        assert_eq!(argmax[0], 0);
    }
}
