//! Convolution kernels: im2col/col2im lowering onto a row-major GEMM.

/// Geometry of one 2-D convolution over a single sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_height: usize,
    pub out_width: usize,
}

/// Output length of a convolution along one axis, `None` if the kernel does
/// not fit.
pub fn conv_out_len(len: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Output length of a transposed convolution along one axis.
pub fn deconv_out_len(len: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    ((len - 1) * stride + kernel).checked_sub(2 * pad)
}

impl ConvGeom {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        Some(Self {
            channels,
            height,
            width,
            kernel,
            stride,
            pad,
            out_height: conv_out_len(height, kernel, stride, pad)?,
            out_width: conv_out_len(width, kernel, stride, pad)?,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_height * self.out_width
    }

    /// Offsets of kernel tap `k` for output index `o`: `o*stride + k - pad`.
    #[inline]
    fn src(&self, o: usize, k: usize, len: usize) -> Option<usize> {
        let i = (o * self.stride + k) as isize - self.pad as isize;
        (i >= 0 && (i as usize) < len).then_some(i as usize)
    }

    /// Unfold `x` (C×H×W) into `cols` ((C·k·k)×(Ho·Wo)).
    pub fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let (k, ho, wo) = (self.kernel, self.out_height, self.out_width);
        let plane = self.height * self.width;
        for c in 0..self.channels {
            let xc = &x[c * plane..(c + 1) * plane];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                    for oy in 0..ho {
                        let line = &mut dst[oy * wo..(oy + 1) * wo];
                        match self.src(oy, ki, self.height) {
                            None => line.fill(0.0),
                            Some(iy) => {
                                let xrow = &xc[iy * self.width..(iy + 1) * self.width];
                                for (ox, v) in line.iter_mut().enumerate() {
                                    *v = match self.src(ox, kj, self.width) {
                                        Some(ix) => xrow[ix],
                                        None => 0.0,
                                    };
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Fold `cols` back, accumulating into `x` (C×H×W).
    pub fn col2im(&self, cols: &[f64], x: &mut [f64]) {
        let (k, ho, wo) = (self.kernel, self.out_height, self.out_width);
        let plane = self.height * self.width;
        for c in 0..self.channels {
            let xc = &mut x[c * plane..(c + 1) * plane];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                    for oy in 0..ho {
                        let Some(iy) = self.src(oy, ki, self.height) else {
                            continue;
                        };
                        let xrow = &mut xc[iy * self.width..(iy + 1) * self.width];
                        for ox in 0..wo {
                            if let Some(ix) = self.src(ox, kj, self.width) {
                                xrow[ix] += src[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Row-major matrix operand, optionally transposed.
#[derive(Clone, Copy)]
pub struct Mat<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl<'a> Mat<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            transposed: false,
        }
    }

    /// View the stored `rows×cols` matrix as its transpose.
    pub fn t(self) -> Self {
        Self {
            transposed: !self.transposed,
            ..self
        }
    }

    fn logical(&self) -> (usize, usize) {
        if self.transposed {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `c = a·b + beta·c` with `c` row-major `m×n`.
pub fn gemm(a: Mat<'_>, b: Mat<'_>, c: &mut [f64], beta: f64) {
    let (m, k) = a.logical();
    let (k2, n) = b.logical();
    assert_eq!(k, k2, "gemm inner dimension mismatch");
    assert_eq!(c.len(), m * n, "gemm output size mismatch");
    assert!(a.data.len() >= a.rows * a.cols && b.data.len() >= b.rows * b.cols);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: all three buffers were bounds-checked against their logical
    // shapes above and `c` is exclusively borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
