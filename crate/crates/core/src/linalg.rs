//! Dense row-major matrices, a safe gemm wrapper and 3×3 convolution via im2col.
//!
//! Feature maps are stored as `(h·w) × c` matrices with row index `y·w + x`,
//! which is the same layout the region-feature rows use everywhere else.

use std::fmt;

#[derive(Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl fmt::Debug for Mat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Mat({}x{})", self.rows, self.cols)
    }
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "Mat::from_vec length");
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn view(&self) -> MatRef<'_> {
        MatRef::new(self.rows, self.cols, &self.data)
    }

    pub fn add_assign(&mut self, other: &Mat) {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn add_row_bias(&mut self, bias: &[f64]) {
        debug_assert_eq!(bias.len(), self.cols);
        for r in self.data.chunks_exact_mut(self.cols) {
            for (a, b) in r.iter_mut().zip(bias) {
                *a += b;
            }
        }
    }

    /// Column sums, accumulated into `out`.
    pub fn col_sums_into(&self, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.cols);
        for r in self.data.chunks_exact(self.cols) {
            for (o, v) in out.iter_mut().zip(r) {
                *o += v;
            }
        }
    }

    /// Vertical concatenation.
    pub fn vstack(parts: &[&Mat]) -> Mat {
        let cols = parts.first().map_or(0, |m| m.cols);
        let rows = parts.iter().map(|m| m.rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for p in parts {
            assert_eq!(p.cols, cols, "vstack width");
            data.extend_from_slice(&p.data);
        }
        Mat { rows, cols, data }
    }

    /// Inverse of [`Mat::vstack`].
    pub fn split_rows(&self, sizes: &[usize]) -> Vec<Mat> {
        let mut out = Vec::with_capacity(sizes.len());
        let mut start = 0;
        for &n in sizes {
            let end = start + n * self.cols;
            out.push(Mat::from_vec(n, self.cols, self.data[start..end].to_vec()));
            start = end;
        }
        assert_eq!(start, self.data.len(), "split_rows sizes");
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Borrowed strided matrix view; `t()` is free.
#[derive(Clone, Copy)]
pub struct MatRef<'a> {
    pub rows: usize,
    pub cols: usize,
    rs: isize,
    cs: isize,
    data: &'a [f64],
}

impl<'a> MatRef<'a> {
    pub fn new(rows: usize, cols: usize, data: &'a [f64]) -> Self {
        assert_eq!(data.len(), rows * cols, "MatRef::new length");
        Self {
            rows,
            cols,
            rs: cols as isize,
            cs: 1,
            data,
        }
    }

    pub fn t(self) -> Self {
        Self {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
            data: self.data,
        }
    }
}

/// `c = alpha · a · b + beta · c`.
pub fn gemm(alpha: f64, a: MatRef<'_>, b: MatRef<'_>, beta: f64, c: &mut Mat) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    assert_eq!((a.rows, b.cols), (c.rows, c.cols), "gemm output shape");
    if c.rows == 0 || c.cols == 0 {
        return;
    }
    if a.cols == 0 {
        for v in &mut c.data {
            *v *= beta;
        }
        return;
    }
    // SAFETY: the views were constructed with lengths matching their
    // dimensions, the strides address only in-bounds elements, and `c`
    // is exclusively borrowed and does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            c.data.as_mut_ptr(),
            c.cols as isize,
            1,
        );
    }
}

pub fn matmul(a: MatRef<'_>, b: MatRef<'_>) -> Mat {
    let mut c = Mat::zeros(a.rows, b.cols);
    gemm(1.0, a, b, 0.0, &mut c);
    c
}

/// Row-wise softmax in place.
pub fn softmax_rows(m: &mut Mat) {
    for r in m.data.chunks_exact_mut(m.cols.max(1)) {
        let max = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in r.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in r.iter_mut() {
            *v /= sum;
        }
    }
}

/// Given softmax output `p` and upstream gradient `dp`, returns the gradient
/// w.r.t. the softmax input: `p ⊙ (dp − rowsum(dp ⊙ p))`.
pub fn softmax_rows_backward(p: &Mat, dp: &Mat) -> Mat {
    let mut out = Mat::zeros(p.rows, p.cols);
    for r in 0..p.rows {
        let pr = p.row(r);
        let dr = dp.row(r);
        let dot: f64 = pr.iter().zip(dr).map(|(a, b)| a * b).sum();
        for (o, (a, b)) in out.row_mut(r).iter_mut().zip(pr.iter().zip(dr)) {
            *o = a * (b - dot);
        }
    }
    out
}

pub fn relu_in_place(m: &mut Mat) {
    for v in &mut m.data {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Geometry of a 3×3, padding-1 convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub const KERNEL: usize = 3;

    pub fn out_h(&self) -> usize {
        out_dim(self.h, self.stride)
    }

    pub fn out_w(&self) -> usize {
        out_dim(self.w, self.stride)
    }

    /// Row count of the `(9·c_in) × c_out` weight matrix.
    pub fn patch_len(&self) -> usize {
        Self::KERNEL * Self::KERNEL * self.c_in
    }
}

pub fn out_dim(n: usize, stride: usize) -> usize {
    (n + 2 - ConvGeom::KERNEL) / stride + 1
}

/// Patch matrix with column index `(ky·3 + kx)·c_in + c`.
pub fn im2col(input: &Mat, g: &ConvGeom) -> Mat {
    debug_assert_eq!((input.rows, input.cols), (g.h * g.w, g.c_in));
    let (ho, wo) = (g.out_h(), g.out_w());
    let pl = g.patch_len();
    let mut cols = Mat::zeros(ho * wo, pl);
    for oy in 0..ho {
        for ox in 0..wo {
            let dst = cols.row_mut(oy * wo + ox);
            for ky in 0..3 {
                let iy = (oy * g.stride + ky) as isize - 1;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let ix = (ox * g.stride + kx) as isize - 1;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let src = input.row(iy as usize * g.w + ix as usize);
                    let off = (ky * 3 + kx) * g.c_in;
                    dst[off..off + g.c_in].copy_from_slice(src);
                }
            }
        }
    }
    cols
}

/// Scatter-adds patch gradients back onto the input grid.
pub fn col2im(dcols: &Mat, g: &ConvGeom) -> Mat {
    let (ho, wo) = (g.out_h(), g.out_w());
    let mut dinput = Mat::zeros(g.h * g.w, g.c_in);
    for oy in 0..ho {
        for ox in 0..wo {
            let src = dcols.row(oy * wo + ox);
            for ky in 0..3 {
                let iy = (oy * g.stride + ky) as isize - 1;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let ix = (ox * g.stride + kx) as isize - 1;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let off = (ky * 3 + kx) * g.c_in;
                    let dst = dinput.row_mut(iy as usize * g.w + ix as usize);
                    for (d, s) in dst.iter_mut().zip(&src[off..off + g.c_in]) {
                        *d += s;
                    }
                }
            }
        }
    }
    dinput
}

/// Forward convolution; returns the output and the patch matrix needed by
/// [`conv_backward`].
pub fn conv_forward(input: &Mat, g: &ConvGeom, weight: &[f64], bias: Option<&[f64]>) -> (Mat, Mat) {
    let patches = im2col(input, g);
    let mut out = Mat::zeros(patches.rows, g.c_out);
    gemm(
        1.0,
        patches.view(),
        MatRef::new(g.patch_len(), g.c_out, weight),
        0.0,
        &mut out,
    );
    if let Some(b) = bias {
        out.add_row_bias(b);
    }
    (out, patches)
}

/// Parameter gradients of a convolution; `None` when not requested.
pub struct ConvGrads {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

pub fn conv_backward(
    dout: &Mat,
    patches: &Mat,
    g: &ConvGeom,
    weight: &[f64],
    want_params: bool,
    want_input: bool,
) -> (Option<ConvGrads>, Option<Mat>) {
    let params = want_params.then(|| {
        let mut dw = Mat::zeros(g.patch_len(), g.c_out);
        gemm(1.0, patches.view().t(), dout.view(), 0.0, &mut dw);
        let mut db = vec![0.0; g.c_out];
        dout.col_sums_into(&mut db);
        ConvGrads {
            weight: dw.data,
            bias: db,
        }
    });
    let input = want_input.then(|| {
        let mut dcols = Mat::zeros(patches.rows, g.patch_len());
        gemm(
            1.0,
            dout.view(),
            MatRef::new(g.patch_len(), g.c_out, weight).t(),
            0.0,
            &mut dcols,
        );
        col2im(&dcols, g)
    });
    (params, input)
}
