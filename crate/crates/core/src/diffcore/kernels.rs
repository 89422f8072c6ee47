//! Raw numeric kernels shared by the forward and backward passes.
//!
//! Matrix products go through `matrixmultiply::dgemm`; everything else is a
//! plain loop. All kernels are deterministic: identical inputs give
//! bit-identical outputs regardless of thread count.

/// C = A(m x k) * B(k x n), row-major slices.
pub fn gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![0.0; m * n];
    // SAFETY: dimensions and row-major strides match the slice lengths above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

/// C = A^T(m x k) * B(.. ) where `a` is stored as (k x m) row-major.
pub fn gemm_at_b(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![0.0; m * n];
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

/// C = A(m x k) * B^T where `b` is stored as (n x k) row-major.
pub fn gemm_a_bt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut c = vec![0.0; m * n];
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

/// Unfold an image (c_in x h x w) into columns (c_in*ksize*ksize x h*w) for a
/// stride-1 convolution with `pad = ksize / 2` zero padding.
pub fn im2col(input: &[f64], c_in: usize, h: usize, w: usize, ksize: usize) -> Vec<f64> {
    let pad = ksize / 2;
    let cols_w = h * w;
    let mut cols = vec![0.0; c_in * ksize * ksize * cols_w];
    for c in 0..c_in {
        for ky in 0..ksize {
            for kx in 0..ksize {
                let row = ((c * ksize + ky) * ksize + kx) * cols_w;
                for oy in 0..h {
                    let iy = oy as isize + ky as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let in_row = (c * h + iy as usize) * w;
                    for ox in 0..w {
                        let ix = ox as isize + kx as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols[row + oy * w + ox] = input[in_row + ix as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add the columns back into image layout; adjoint of [`im2col`].
pub fn col2im(cols: &[f64], c_in: usize, h: usize, w: usize, ksize: usize) -> Vec<f64> {
    let pad = ksize / 2;
    let cols_w = h * w;
    let mut img = vec![0.0; c_in * h * w];
    for c in 0..c_in {
        for ky in 0..ksize {
            for kx in 0..ksize {
                let row = ((c * ksize + ky) * ksize + kx) * cols_w;
                for oy in 0..h {
                    let iy = oy as isize + ky as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let in_row = (c * h + iy as usize) * w;
                    for ox in 0..w {
                        let ix = ox as isize + kx as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        img[in_row + ix as usize] += cols[row + oy * w + ox];
                    }
                }
            }
        }
    }
    img
}

/// Gaussian error linear unit, tanh approximation.
pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + ((C * (x + 0.044715 * x * x * x)).tanh()))
}

/// d gelu / dx for the tanh approximation above.
pub fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let dinner = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Stable elementwise binary cross-entropy from a logit:
/// max(z,0) - z*y + ln(1 + exp(-|z|)).
pub fn bce_with_logit(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}
