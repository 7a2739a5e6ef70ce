//! Matrix kernels shared by the convolution and recurrent code.

/// `c = a' * b' + beta * c` where `a'` is `m x k` and `b'` is `k x n`.
///
/// `a` holds `a'` row-major, or its transpose when `trans_a` is set (same for
/// `b`). `c` is `m x n` row-major. With `beta == 0` the old contents of `c`
/// are ignored.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    n: usize,
    k: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k, "gemm: a has wrong length");
    assert_eq!(b.len(), k * n, "gemm: b has wrong length");
    assert_eq!(c.len(), m * n, "gemm: c has wrong length");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c.fill(0.0);
        } else {
            c.iter_mut().for_each(|x| *x *= beta);
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the lengths asserted above cover every (row, col) addressed
    // through these strides, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfold a zero-padded `[channels, height, width]` image into a
/// `[channels * kh * kw, height * width]` matrix for same-padded correlation.
pub(crate) fn im2col(input: &[f64], channels: usize, height: usize, width: usize, kh: usize, kw: usize) -> Vec<f64> {
    let hw = height * width;
    let (ph, pw) = (kh / 2, kw / 2);
    let mut cols = vec![0.0; channels * kh * kw * hw];
    for c in 0..channels {
        let plane = &input[c * hw..(c + 1) * hw];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((c * kh + ky) * kw + kx) * hw;
                let dst = &mut cols[row..row + hw];
                for y in 0..height {
                    let sy = y as isize + ky as isize - ph as isize;
                    if sy < 0 || sy >= height as isize {
                        continue;
                    }
                    let src_row = &plane[sy as usize * width..(sy as usize + 1) * width];
                    let dst_row = &mut dst[y * width..(y + 1) * width];
                    let shift = kx as isize - pw as isize;
                    let x_lo = (-shift).max(0) as usize;
                    let x_hi = (width as isize - shift).min(width as isize).max(0) as usize;
                    for x in x_lo..x_hi {
                        dst_row[x] = src_row[(x as isize + shift) as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add columns back into an image buffer.
pub(crate) fn col2im_add(
    cols: &[f64],
    channels: usize,
    height: usize,
    width: usize,
    kh: usize,
    kw: usize,
    out: &mut [f64],
) {
    let hw = height * width;
    let (ph, pw) = (kh / 2, kw / 2);
    for c in 0..channels {
        let plane = &mut out[c * hw..(c + 1) * hw];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((c * kh + ky) * kw + kx) * hw;
                let src = &cols[row..row + hw];
                for y in 0..height {
                    let sy = y as isize + ky as isize - ph as isize;
                    if sy < 0 || sy >= height as isize {
                        continue;
                    }
                    let dst_row = &mut plane[sy as usize * width..(sy as usize + 1) * width];
                    let src_row = &src[y * width..(y + 1) * width];
                    let shift = kx as isize - pw as isize;
                    let x_lo = (-shift).max(0) as usize;
                    let x_hi = (width as isize - shift).min(width as isize).max(0) as usize;
                    for x in x_lo..x_hi {
                        dst_row[(x as isize + shift) as usize] += src_row[x];
                    }
                }
            }
        }
    }
}

/// Add `bias[r]` to every entry of row `r` of a `rows x cols` matrix.
pub(crate) fn add_row_bias(mat: &mut [f64], bias: &[f64], cols: usize) {
    for (row, b) in mat.chunks_exact_mut(cols).zip(bias) {
        row.iter_mut().for_each(|x| *x += b);
    }
}

/// `acc[r] += sum of row r`.
pub(crate) fn accumulate_row_sums(mat: &[f64], cols: usize, acc: &mut [f64]) {
    for (row, a) in mat.chunks_exact(cols).zip(acc) {
        *a += row.iter().sum::<f64>();
    }
}
