//! Raw numeric kernels over row-major slices. Shapes are checked by callers.

/// `c = alpha * op(a) * op(b) + beta * c` with `op(a)` of shape `m x k` and
/// `op(b)` of shape `k x n`, all row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    trans_a: bool,
    trans_b: bool,
    m: usize,
    n: usize,
    k: usize,
    alpha: f64,
    a: &[f64],
    b: &[f64],
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k, "gemm: lhs too short");
    assert!(b.len() >= k * n, "gemm: rhs too short");
    assert!(c.len() >= m * n, "gemm: output too short");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above guarantee every index touched by the strided
    // access pattern lies inside the slices, and `c` does not alias `a`/`b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
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

/// Strided view of a row-major-ish matrix: element `(i, j)` lives at
/// `offset + i * rs + j * cs`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct View {
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

impl View {
    fn last(&self, rows: usize, cols: usize) -> usize {
        self.offset + (rows - 1) * self.rs + (cols - 1) * self.cs
    }
}

/// `c = alpha * a * b + beta * c` over strided views, `a: m x k`,
/// `b: k x n`, `c: m x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_view(
    m: usize,
    n: usize,
    k: usize,
    alpha: f64,
    a: &[f64],
    va: View,
    b: &[f64],
    vb: View,
    beta: f64,
    c: &mut [f64],
    vc: View,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(vc.last(m, n) < c.len(), "gemm_view: output view out of bounds");
    if k > 0 {
        assert!(va.last(m, k) < a.len(), "gemm_view: lhs view out of bounds");
        assert!(vb.last(k, n) < b.len(), "gemm_view: rhs view out of bounds");
    }
    // SAFETY: the asserts above bound every index reached through the views,
    // and `c` is a distinct mutable slice so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr().add(va.offset),
            va.rs as isize,
            va.cs as isize,
            b.as_ptr().add(vb.offset),
            vb.rs as isize,
            vb.cs as isize,
            beta,
            c.as_mut_ptr().add(vc.offset),
            vc.rs as isize,
            vc.cs as isize,
        );
    }
}

/// Geometry of a convolution along the time axis of a `C x T x V` sample.
#[derive(Debug, Clone, Copy)]
pub(crate) struct TimeConv {
    pub channels: usize,
    pub frames: usize,
    pub joints: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl TimeConv {
    pub fn out_frames(&self) -> usize {
        (self.frames + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_frames() * self.joints
    }

    /// Source frame for output frame `t_out` and tap `k`, if inside the input.
    #[inline]
    fn source(&self, t_out: usize, k: usize) -> Option<usize> {
        let t = (t_out * self.stride + k) as isize - self.pad as isize;
        (t >= 0 && (t as usize) < self.frames).then_some(t as usize)
    }

    /// For unit stride: the output frames `lo..hi` that tap `k` reads from
    /// inside the input, and the input frame feeding output frame `lo`.
    pub fn tap_range(&self, k: usize) -> Option<(usize, usize, usize)> {
        debug_assert_eq!(self.stride, 1);
        let lo = self.pad.saturating_sub(k);
        let hi = self.out_frames().min((self.frames + self.pad).saturating_sub(k));
        (lo < hi).then(|| (lo, hi, lo + k - self.pad))
    }

    /// Unfolds one sample into a `(C*K) x (T_out*V)` matrix.
    pub fn im2col(&self, x: &[f64], col: &mut [f64]) {
        let v = self.joints;
        let t_out = self.out_frames();
        let cols = self.col_cols();
        for c in 0..self.channels {
            let xc = &x[c * self.frames * v..(c + 1) * self.frames * v];
            for k in 0..self.kernel {
                let row = &mut col[(c * self.kernel + k) * cols..(c * self.kernel + k + 1) * cols];
                for to in 0..t_out {
                    let dst = &mut row[to * v..(to + 1) * v];
                    match self.source(to, k) {
                        Some(t) => dst.copy_from_slice(&xc[t * v..(t + 1) * v]),
                        None => dst.fill(0.0),
                    }
                }
            }
        }
    }

    /// Adjoint of [`TimeConv::im2col`]: scatters column gradients back onto
    /// the sample, accumulating.
    pub fn col2im(&self, col: &[f64], dx: &mut [f64]) {
        let v = self.joints;
        let t_out = self.out_frames();
        let cols = self.col_cols();
        for c in 0..self.channels {
            let dxc = &mut dx[c * self.frames * v..(c + 1) * self.frames * v];
            for k in 0..self.kernel {
                let row = &col[(c * self.kernel + k) * cols..(c * self.kernel + k + 1) * cols];
                for to in 0..t_out {
                    if let Some(t) = self.source(to, k) {
                        dxc[t * v..(t + 1) * v]
                            .iter_mut()
                            .zip(&row[to * v..(to + 1) * v])
                            .for_each(|(d, &g)| *d += g);
                    }
                }
            }
        }
    }
}
