//! Slice-level numeric kernels behind the graph operations. Layout is NCHW,
//! row-major throughout.

/// `c = a · b + beta · c` with `a` m×k and `b` k×n, each optionally stored
/// transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if a_trans { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_trans { (1, k) } else { (n, 1) };
    // SAFETY: the asserts above bound every index the kernel touches given
    // these strides, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a strided, zero-padded 2-D window sweep over one image plane.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Window {
    pub channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub s_h: usize,
    pub s_w: usize,
    pub p_h: usize,
    pub p_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Window {
    pub fn rows(&self) -> usize {
        self.channels * self.k_h * self.k_w
    }

    pub fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Input coordinate for output position `o` and kernel offset `k`, or
    /// `None` when it lands in the padding.
    #[inline]
    fn src(o: usize, k: usize, stride: usize, pad: usize, len: usize) -> Option<usize> {
        let v = (o * stride + k) as isize - pad as isize;
        (v >= 0 && (v as usize) < len).then_some(v as usize)
    }

    /// Writes the column matrix of `img` (channels × in_h × in_w) into `cols`,
    /// whose rows are `row_stride` apart starting at column `col_offset`.
    pub fn im2col(&self, img: &[f64], cols: &mut [f64], row_stride: usize, col_offset: usize) {
        let plane = self.in_h * self.in_w;
        for c in 0..self.channels {
            let src = &img[c * plane..(c + 1) * plane];
            for kh in 0..self.k_h {
                for kw in 0..self.k_w {
                    let row = (c * self.k_h + kh) * self.k_w + kw;
                    let base = row * row_stride + col_offset;
                    for oh in 0..self.out_h {
                        let dst = &mut cols[base + oh * self.out_w..base + (oh + 1) * self.out_w];
                        match Self::src(oh, kh, self.s_h, self.p_h, self.in_h) {
                            None => dst.iter_mut().for_each(|v| *v = 0.0),
                            Some(ih) => {
                                for (ow, d) in dst.iter_mut().enumerate() {
                                    *d = match Self::src(ow, kw, self.s_w, self.p_w, self.in_w) {
                                        Some(iw) => src[ih * self.in_w + iw],
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

    /// Adjoint of [`Window::im2col`]: accumulates columns back into `img`.
    pub fn col2im(&self, cols: &[f64], img: &mut [f64], row_stride: usize, col_offset: usize) {
        let plane = self.in_h * self.in_w;
        for c in 0..self.channels {
            let dst = &mut img[c * plane..(c + 1) * plane];
            for kh in 0..self.k_h {
                for kw in 0..self.k_w {
                    let row = (c * self.k_h + kh) * self.k_w + kw;
                    let base = row * row_stride + col_offset;
                    for oh in 0..self.out_h {
                        let Some(ih) = Self::src(oh, kh, self.s_h, self.p_h, self.in_h) else {
                            continue;
                        };
                        let src = &cols[base + oh * self.out_w..base + (oh + 1) * self.out_w];
                        for (ow, s) in src.iter().enumerate() {
                            if let Some(iw) = Self::src(ow, kw, self.s_w, self.p_w, self.in_w) {
                                dst[ih * self.in_w + iw] += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// [B, C, P] -> [C, B·P]
pub(crate) fn to_channel_major(x: &[f64], b: usize, c: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for bi in 0..b {
        for ci in 0..c {
            let src = &x[(bi * c + ci) * p..(bi * c + ci + 1) * p];
            out[ci * b * p + bi * p..ci * b * p + (bi + 1) * p].copy_from_slice(src);
        }
    }
    out
}

/// [C, B·P] -> [B, C, P]
pub(crate) fn from_channel_major(x: &[f64], b: usize, c: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for bi in 0..b {
        for ci in 0..c {
            let src = &x[ci * b * p + bi * p..ci * b * p + (bi + 1) * p];
            out[(bi * c + ci) * p..(bi * c + ci + 1) * p].copy_from_slice(src);
        }
    }
    out
}

/// Column matrix [rows, B·P] for a batch of images.
pub(crate) fn batch_im2col(x: &[f64], batch: usize, win: &Window) -> Vec<f64> {
    let img = win.channels * win.in_h * win.in_w;
    let p = win.positions();
    let mut cols = vec![0.0; win.rows() * batch * p];
    for b in 0..batch {
        win.im2col(&x[b * img..(b + 1) * img], &mut cols, batch * p, b * p);
    }
    cols
}

pub(crate) fn batch_col2im(cols: &[f64], batch: usize, win: &Window) -> Vec<f64> {
    let img = win.channels * win.in_h * win.in_w;
    let p = win.positions();
    let mut out = vec![0.0; batch * img];
    for b in 0..batch {
        win.col2im(cols, &mut out[b * img..(b + 1) * img], batch * p, b * p);
    }
    out
}
