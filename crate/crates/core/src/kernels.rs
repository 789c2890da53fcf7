//! Raw numeric kernels behind the tape ops.
//!
//! Everything here is plain slice math with no gradient bookkeeping. The
//! convolution path uses im2col + matmul; batch items are processed in
//! parallel with per-item buffers so results are independent of thread
//! scheduling (reductions over the batch are summed in index order).

use crate::tensor::Scalar;
use rayon::prelude::*;

/// C[m,n] += A[m,k] * B[k,n]
pub fn matmul_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            if aip == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
}

pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    matmul_acc(a, b, &mut c, m, k, n);
    c
}

/// C[m,n] += A^T[m,k] * B[k,n] where A is stored [k,m]
pub fn matmul_at_b_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// C[m,n] += A[m,k] * B^T[k,n] where B is stored [n,k]
pub fn matmul_a_bt_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = T::zero();
            for (&av, &bv) in arow.iter().zip(brow) {
                s += av * bv;
            }
            c[i * n + j] += s;
        }
    }
}

/// Output spatial size of a convolution.
pub fn conv_out_dim(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

/// Unfold one image [cin, h, w] into columns [cin*k*k, oh*ow].
#[allow(clippy::too_many_arguments)]
pub fn im2col<T: Scalar>(
    x: &[T],
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    cols: &mut [T],
) {
    let oh = conv_out_dim(h, k, stride, pad);
    let ow = conv_out_dim(w, k, stride, pad);
    debug_assert_eq!(cols.len(), cin * k * k * oh * ow);
    for v in cols.iter_mut() {
        *v = T::zero();
    }
    for c in 0..cin {
        let xc = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * oh * ow;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let xrow = &xc[iy as usize * w..(iy as usize + 1) * w];
                    let crow = &mut cols[row + oy * ow..row + (oy + 1) * ow];
                    for (ox, cv) in crow.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            *cv = xrow[ix as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add columns [cin*k*k, oh*ow] back into an image gradient.
#[allow(clippy::too_many_arguments)]
pub fn col2im_acc<T: Scalar>(
    cols: &[T],
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    dx: &mut [T],
) {
    let oh = conv_out_dim(h, k, stride, pad);
    let ow = conv_out_dim(w, k, stride, pad);
    for c in 0..cin {
        let dxc = &mut dx[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * oh * ow;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let crow = &cols[row + oy * ow..row + (oy + 1) * ow];
                    for (ox, &cv) in crow.iter().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dxc[iy as usize * w + ix as usize] += cv;
                        }
                    }
                }
            }
        }
    }
}

pub struct ConvDims {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvDims {
    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.batch, self.cout, self.oh, self.ow]
    }
}

/// Batched 2-D cross-correlation via im2col; parallel over batch items.
pub fn conv2d_forward<T: Scalar>(x: &[T], wgt: &[T], d: &ConvDims) -> Vec<T> {
    let xi = d.cin * d.h * d.w;
    let oi = d.cout * d.oh * d.ow;
    let ck2 = d.cin * d.k * d.k;
    let mut out = vec![T::zero(); d.batch * oi];
    out.par_chunks_mut(oi).enumerate().for_each(|(b, ob)| {
        let mut cols = vec![T::zero(); ck2 * d.oh * d.ow];
        im2col(&x[b * xi..(b + 1) * xi], d.cin, d.h, d.w, d.k, d.stride, d.pad, &mut cols);
        matmul_acc(wgt, &cols, ob, d.cout, ck2, d.oh * d.ow);
    });
    out
}

/// Gradients of the batched convolution w.r.t. input and weights.
///
/// dW contributions are computed per batch item in parallel and then summed
/// in batch order, keeping the result deterministic.
pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    wgt: &[T],
    dy: &[T],
    d: &ConvDims,
) -> (Vec<T>, Vec<T>) {
    let xi = d.cin * d.h * d.w;
    let oi = d.cout * d.oh * d.ow;
    let ck2 = d.cin * d.k * d.k;
    let mut dx = vec![T::zero(); d.batch * xi];

    let dw_parts: Vec<Vec<T>> = dx
        .par_chunks_mut(xi)
        .enumerate()
        .map(|(b, dxb)| {
            let xb = &x[b * xi..(b + 1) * xi];
            let dyb = &dy[b * oi..(b + 1) * oi];
            // dX_b = col2im(W^T . dY_b)
            let mut dcols = vec![T::zero(); ck2 * d.oh * d.ow];
            matmul_at_b_acc(wgt, dyb, &mut dcols, ck2, d.cout, d.oh * d.ow);
            col2im_acc(&dcols, d.cin, d.h, d.w, d.k, d.stride, d.pad, dxb);
            // dW_b = dY_b . cols_b^T
            let mut cols = vec![T::zero(); ck2 * d.oh * d.ow];
            im2col(xb, d.cin, d.h, d.w, d.k, d.stride, d.pad, &mut cols);
            let mut dwb = vec![T::zero(); d.cout * ck2];
            matmul_a_bt_acc(dyb, &cols, &mut dwb, d.cout, d.oh * d.ow, ck2);
            dwb
        })
        .collect();

    let mut dw = vec![T::zero(); d.cout * ck2];
    for part in &dw_parts {
        for (acc, &v) in dw.iter_mut().zip(part) {
            *acc += v;
        }
    }
    (dx, dw)
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

pub fn norm2<T: Scalar>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_hand_case() {
        // [[1,2]] x [[3],[4]] = [[11]]
        let c = matmul(&[1.0f64, 2.0], &[3.0, 4.0], 1, 2, 1);
        assert_eq!(c, vec![11.0]);
    }

    #[test]
    fn matmul_identity() {
        let c = matmul(&[1.0f64, 0.0, 0.0, 1.0], &[3.0, 4.0], 2, 2, 1);
        assert_eq!(c, vec![3.0, 4.0]);
    }

    #[test]
    fn transposed_variants_agree() {
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3x2
        let c = matmul(&a, &b, 2, 3, 2);
        // A^T stored as [3,2] -> compute (A^T)^T B = A B
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let mut c2 = vec![0.0; 4];
        matmul_at_b_acc(&at, &b, &mut c2, 2, 3, 2);
        assert_eq!(c, c2);
        // B^T stored as [2,3] -> A (B^T)^T = A B
        let bt = [7.0, 9.0, 11.0, 8.0, 10.0, 12.0];
        let mut c3 = vec![0.0; 4];
        matmul_a_bt_acc(&a, &bt, &mut c3, 2, 3, 2);
        assert_eq!(c, c3);
    }
}
