//! Raw buffer kernels shared by forward and backward passes.

use super::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeometry {
    pub fn rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    pub fn cols(&self) -> usize {
        self.h_out * self.w_out
    }

    /// Output columns `[lo, hi)` along one axis whose tap `offset` lands inside `extent`.
    fn valid_range(&self, offset: isize, extent: usize, out: usize) -> (usize, usize) {
        let s = self.stride as isize;
        // o*s + offset >= 0  and  o*s + offset < extent
        let lo = if offset >= 0 { 0 } else { ((-offset) + s - 1) / s };
        let hi = if extent as isize - offset <= 0 {
            0
        } else {
            ((extent as isize - offset + s - 1) / s).min(out as isize)
        };
        let lo = (lo as usize).min(out);
        (lo, (hi.max(0) as usize).max(lo))
    }
}

/// Unfold `C×H×W` into a `(C·k·k)×(H'·W')` patch matrix.
pub(crate) fn im2col<T: Scalar>(x: &[T], g: &ConvGeometry, col: &mut [T]) {
    let cols = g.cols();
    debug_assert_eq!(col.len(), g.rows() * cols);
    col.fill(T::zero());
    for ci in 0..g.c_in {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            let dy = ky as isize - g.pad as isize;
            let (oy_lo, oy_hi) = g.valid_range(dy, g.h, g.h_out);
            for kx in 0..g.k {
                let dx = kx as isize - g.pad as isize;
                let (ox_lo, ox_hi) = g.valid_range(dx, g.w, g.w_out);
                if ox_lo == ox_hi {
                    continue;
                }
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oy in oy_lo..oy_hi {
                    let iy = (oy * g.stride) as isize + dy;
                    let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let dst_row = &mut dst[oy * g.w_out..(oy + 1) * g.w_out];
                    if g.stride == 1 {
                        let ix0 = (ox_lo as isize + dx) as usize;
                        let n = ox_hi - ox_lo;
                        dst_row[ox_lo..ox_hi].copy_from_slice(&src_row[ix0..ix0 + n]);
                    } else {
                        for ox in ox_lo..ox_hi {
                            let ix = (ox * g.stride) as isize + dx;
                            dst_row[ox] = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add a patch matrix back onto `C×H×W`.
pub(crate) fn col2im<T: Scalar>(col: &[T], g: &ConvGeometry, x: &mut [T]) {
    let cols = g.cols();
    for ci in 0..g.c_in {
        let plane = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            let dy = ky as isize - g.pad as isize;
            let (oy_lo, oy_hi) = g.valid_range(dy, g.h, g.h_out);
            for kx in 0..g.k {
                let dx = kx as isize - g.pad as isize;
                let (ox_lo, ox_hi) = g.valid_range(dx, g.w, g.w_out);
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &col[row * cols..(row + 1) * cols];
                for oy in oy_lo..oy_hi {
                    let iy = ((oy * g.stride) as isize + dy) as usize;
                    let src_row = &src[oy * g.w_out..(oy + 1) * g.w_out];
                    let dst_row = &mut plane[iy * g.w..(iy + 1) * g.w];
                    for ox in ox_lo..ox_hi {
                        let ix = ((ox * g.stride) as isize + dx) as usize;
                        dst_row[ix] += src_row[ox];
                    }
                }
            }
        }
    }
}

/// Same-length 1D correlation of a single-channel signal with zero padding.
pub(crate) fn conv1d_same<T: Scalar>(x: &[T], kernel: &[T], pad: usize, out: &mut [T]) {
    let n = x.len();
    for (i, o) in out.iter_mut().enumerate() {
        let mut acc = T::zero();
        for (j, &w) in kernel.iter().enumerate() {
            let idx = i as isize + j as isize - pad as isize;
            if idx >= 0 && (idx as usize) < n {
                acc += w * x[idx as usize];
            }
        }
        *o = acc;
    }
}

/// Splits a shape around `axis` into (outer, axis extent, inner) block sizes.
pub(crate) fn axis_blocks(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Row-major strides of `shape`, with zero stride on axes that broadcast into `out`.
pub(crate) fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let offset = out.len() - shape.len();
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i + offset] = if shape[i] == 1 && out[i + offset] != 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Broadcast result shape under numpy rules, or `None` if incompatible.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Visits every output position, yielding the flat offsets into both operands.
pub(crate) fn for_each_broadcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let numel: usize = out.iter().product();
    if numel == 0 {
        return;
    }
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for flat in 0..numel {
        f(flat, ia, ib);
        let mut d = rank;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

/// Sums `grad` (shaped like `out`) down to `shape` by collapsing broadcast axes.
pub(crate) fn reduce_to_shape<T: Scalar>(grad: &[T], out: &[usize], shape: &[usize]) -> Vec<T> {
    let numel: usize = shape.iter().product();
    if numel == grad.len() {
        return grad.to_vec();
    }
    let strides = broadcast_strides(shape, out);
    let zeros = vec![0; out.len()];
    let mut acc = vec![T::zero(); numel];
    for_each_broadcast(out, &strides, &zeros, |flat, ia, _| acc[ia] += grad[flat]);
    acc
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    // Branch on sign so exp never overflows.
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_shape_rules() {
        assert_eq!(broadcast_shape(&[3, 1, 1], &[3, 4, 5]), Some(vec![3, 4, 5]));
        assert_eq!(broadcast_shape(&[1, 4, 5], &[3, 4, 5]), Some(vec![3, 4, 5]));
        assert_eq!(broadcast_shape(&[1], &[2, 2]), Some(vec![2, 2]));
        assert_eq!(broadcast_shape(&[2, 3], &[3, 2]), None);
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        let g = ConvGeometry {
            c_in: 2,
            h: 5,
            w: 4,
            k: 3,
            stride: 2,
            pad: 1,
            h_out: 3,
            w_out: 2,
        };
        let x: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..g.rows() * g.cols()).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut col = vec![0.0; y.len()];
        im2col(&x, &g, &mut col);
        let mut back = vec![0.0; x.len()];
        col2im(&y, &g, &mut back);
        let lhs: f64 = col.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn sigmoid_is_overflow_safe() {
        assert_eq!(sigmoid(1000.0f64), 1.0);
        assert_eq!(sigmoid(-1000.0f64), 0.0);
        assert!((sigmoid(0.5f64) - 0.622_459_331_201_854_6).abs() < 1e-15);
    }
}
