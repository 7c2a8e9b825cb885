use super::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Padding {
    /// Output length `ceil(input / stride)`, zero padding split evenly (extra on the far side).
    Same,
    /// No padding; the kernel must fit inside the input.
    Valid,
}

/// Output length and leading pad for one spatial axis, or `None` when the
/// kernel does not fit.
pub fn conv_output_len(input: usize, kernel: usize, stride: usize, padding: Padding) -> Option<(usize, usize)> {
    if input == 0 || kernel == 0 || stride == 0 {
        return None;
    }
    match padding {
        Padding::Same => {
            let out = input.div_ceil(stride);
            let total = ((out - 1) * stride + kernel).saturating_sub(input);
            Some((out, total / 2))
        }
        Padding::Valid => (kernel <= input).then(|| ((input - kernel) / stride + 1, 0)),
    }
}

/// Shape bookkeeping for an NHWC convolution with `kh×kw×cin×cout` filters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub sh: usize,
    pub sw: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl ConvGeom {
    pub fn patch_len(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    pub fn rows(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }

    /// Visits every (column-matrix index, input index) pair that lies inside the input.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let patch = self.patch_len();
        for b in 0..self.batch {
            for oy in 0..self.out_h {
                for ox in 0..self.out_w {
                    let row = (b * self.out_h + oy) * self.out_w + ox;
                    for ky in 0..self.kh {
                        let iy = (oy * self.sh + ky) as isize - self.pad_top as isize;
                        if iy < 0 || iy as usize >= self.in_h {
                            continue;
                        }
                        for kx in 0..self.kw {
                            let ix = (ox * self.sw + kx) as isize - self.pad_left as isize;
                            if ix < 0 || ix as usize >= self.in_w {
                                continue;
                            }
                            let col_base = row * patch + (ky * self.kw + kx) * self.cin;
                            let in_base = ((b * self.in_h + iy as usize) * self.in_w + ix as usize) * self.cin;
                            for c in 0..self.cin {
                                f(col_base + c, in_base + c);
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn im2col<T: Real>(&self, input: &[T]) -> Vec<T> {
        let mut col = vec![T::zero(); self.rows() * self.patch_len()];
        self.for_each_tap(|ci, ii| col[ci] = input[ii]);
        col
    }

    pub fn col2im_add<T: Real>(&self, col: &[T], input_grad: &mut [T]) {
        self.for_each_tap(|ci, ii| input_grad[ii] += col[ci]);
    }

    pub fn forward<T: Real>(&self, col: &[T], filters: &[T]) -> Vec<T> {
        let (m, k, n) = (self.rows(), self.patch_len(), self.cout);
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, col, (k as isize, 1), filters, (n as isize, 1), &mut out);
        out
    }

    /// Accumulates `colᵀ · dout` into the filter gradient.
    pub fn filter_grad<T: Real>(&self, col: &[T], dout: &[T], dfilters: &mut [T]) {
        let (m, k, n) = (self.rows(), self.patch_len(), self.cout);
        T::gemm(k, m, n, col, (1, k as isize), dout, (n as isize, 1), dfilters);
    }

    /// Accumulates the input gradient through `dout · Fᵀ` and col2im.
    pub fn input_grad<T: Real>(&self, filters: &[T], dout: &[T], dinput: &mut [T]) {
        let (m, k, n) = (self.rows(), self.patch_len(), self.cout);
        let mut dcol = vec![T::zero(); m * k];
        T::gemm(m, n, k, dout, (n as isize, 1), filters, (1, n as isize), &mut dcol);
        self.col2im_add(&dcol, dinput);
    }
}
