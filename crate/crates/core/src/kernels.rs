//! Low-level dense kernels: GEMM dispatch, im2col/col2im, index maps.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2, ShapeBuilder};

use crate::scalar::Scalar;
use crate::tensor::{numel, strides};

/// Row-major `rows × cols` view over `data`, optionally transposed.
fn view<T: Scalar>(data: &[T], rows: usize, cols: usize, transpose: bool) -> ArrayView2<'_, T> {
    let v = ArrayView2::from_shape((rows, cols).strides((cols, 1)), data).expect("view shape");
    if transpose {
        v.reversed_axes()
    } else {
        v
    }
}

/// `c = beta·c + op(a)·op(b)` where `a` is stored `a_rows × a_cols` and `b` is stored
/// `b_rows × b_cols`; `op` transposes when the flag is set. `c` is row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Scalar>(
    a: &[T],
    a_rows: usize,
    a_cols: usize,
    ta: bool,
    b: &[T],
    b_rows: usize,
    b_cols: usize,
    tb: bool,
    c: &mut [T],
    beta: T,
) {
    let av = view(a, a_rows, a_cols, ta);
    let bv = view(b, b_rows, b_cols, tb);
    let (m, n) = (av.nrows(), bv.ncols());
    assert_eq!(av.ncols(), bv.nrows(), "gemm inner dimension");
    let mut cv = ArrayViewMut2::from_shape((m, n), c).expect("gemm output shape");
    general_mat_mul(T::one(), &av, &bv, beta, &mut cv);
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(
        c: usize,
        h: usize,
        w: usize,
        o: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Self {
        let (kh, kw) = kernel;
        let (sh, sw) = stride;
        let (ph, pw) = pad;
        assert!(h + 2 * ph >= kh && w + 2 * pw >= kw, "kernel larger than padded input");
        let ho = (h + 2 * ph - kh) / sh + 1;
        let wo = (w + 2 * pw - kw) / sw + 1;
        Self { c, h, w, o, kh, kw, sh, sw, ph, pw, ho, wo }
    }

    pub fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.ho * self.wo
    }

    /// 1x1, stride 1, no padding: the input already is its column matrix.
    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.sh == 1 && self.sw == 1 && self.ph == 0 && self.pw == 0
    }
}

pub(crate) fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let ncol = g.col_cols();
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let dst = &mut cols[row * ncol..(row + 1) * ncol];
                for oh in 0..g.ho {
                    let ih = (oh * g.sh + i) as isize - g.ph as isize;
                    let out = &mut dst[oh * g.wo..(oh + 1) * g.wo];
                    if ih < 0 || ih >= g.h as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for (ow, o) in out.iter_mut().enumerate() {
                        let iw = (ow * g.sw + j) as isize - g.pw as isize;
                        *o = if iw < 0 || iw >= g.w as isize { T::zero() } else { src[iw as usize] };
                    }
                }
            }
        }
    }
}

/// Scatter-add columns back into the input layout.
pub(crate) fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let ncol = g.col_cols();
    for c in 0..g.c {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let src = &cols[row * ncol..(row + 1) * ncol];
                for oh in 0..g.ho {
                    let ih = (oh * g.sh + i) as isize - g.ph as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for ow in 0..g.wo {
                        let iw = (ow * g.sw + j) as isize - g.pw as isize;
                        if iw >= 0 && iw < g.w as isize {
                            dst[iw as usize] += src[oh * g.wo + ow];
                        }
                    }
                }
            }
        }
    }
}

/// For each input element, the flat index of the output element it reduces into
/// when `axes` are summed out.
pub(crate) fn reduce_map(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let out_shape: Vec<usize> =
        shape.iter().enumerate().filter(|(i, _)| !axes.contains(i)).map(|(_, &n)| n).collect();
    let out_strides = strides(&out_shape);
    // stride of each input axis in the output (0 for reduced axes)
    let mut axis_stride = vec![0; shape.len()];
    let mut k = 0;
    for (i, s) in axis_stride.iter_mut().enumerate() {
        if !axes.contains(&i) {
            *s = out_strides[k];
            k += 1;
        }
    }
    let n = numel(shape);
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; shape.len()];
    let mut off = 0usize;
    for _ in 0..n {
        map.push(off);
        for ax in (0..shape.len()).rev() {
            idx[ax] += 1;
            off += axis_stride[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            off -= axis_stride[ax] * shape[ax];
            idx[ax] = 0;
        }
    }
    (out_shape, map)
}

/// Source flat index for every element of the permuted output.
pub(crate) fn permute_map(shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let step: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = numel(shape);
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; shape.len()];
    let mut off = 0usize;
    for _ in 0..n {
        map.push(off);
        for ax in (0..out_shape.len()).rev() {
            idx[ax] += 1;
            off += step[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= step[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out_shape, map)
}

/// `(outer, len, inner)` split of a shape around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]))
}
