//! Dense kernels shared by the forward and backward passes.

/// Matrix layout flag for [`gemm`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trans {
    No,
    Yes,
}

/// `c = alpha * op(a) * op(b) + beta * c` with `op(a)` of shape `m x k` and
/// `op(b)` of shape `k x n`; all buffers row-major and contiguous.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    ta: Trans,
    b: &[f64],
    tb: Trans,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k, "gemm: lhs too small");
    assert!(b.len() >= k * n, "gemm: rhs too small");
    assert!(c.len() >= m * n, "gemm: out too small");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = match ta {
        Trans::No => (k as isize, 1),
        Trans::Yes => (1, m as isize),
    };
    let (rsb, csb) = match tb {
        Trans::No => (n as isize, 1),
        Trans::Yes => (1, k as isize),
    };
    // SAFETY: the asserts above guarantee every index reached through the
    // given strides lies inside the slices, and `c` does not alias `a`/`b`
    // because it is borrowed mutably.
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

/// Geometry of a 2-D sliding window: an "image" of `channels x h x w`
/// visited at `out_h x out_w` window positions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Window {
    pub fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    #[inline]
    fn source(&self, o: usize, k: usize) -> Option<usize> {
        let i = (o * self.stride + k) as isize - self.pad as isize;
        (i >= 0 && (i as usize) < self.h).then_some(i as usize)
    }

    #[inline]
    fn source_x(&self, o: usize, k: usize) -> Option<usize> {
        let i = (o * self.stride + k) as isize - self.pad as isize;
        (i >= 0 && (i as usize) < self.w).then_some(i as usize)
    }
}

/// Unfold `image` (`channels x h x w`) into `cols` (`rows x positions`).
pub fn im2col(win: &Window, image: &[f64], cols: &mut [f64]) {
    let k = win.kernel;
    let pos = win.positions();
    debug_assert_eq!(cols.len(), win.rows() * pos);
    for c in 0..win.channels {
        let plane = &image[c * win.h * win.w..(c + 1) * win.h * win.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * pos..(row + 1) * pos];
                for oy in 0..win.out_h {
                    let line = &mut dst[oy * win.out_w..(oy + 1) * win.out_w];
                    match win.source(oy, ky) {
                        None => line.fill(0.0),
                        Some(iy) => {
                            let src = &plane[iy * win.w..(iy + 1) * win.w];
                            for (ox, v) in line.iter_mut().enumerate() {
                                *v = match win.source_x(ox, kx) {
                                    Some(ix) => src[ix],
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

/// Adjoint of [`im2col`]: accumulate `cols` back into `image`.
pub fn col2im(win: &Window, cols: &[f64], image: &mut [f64]) {
    let k = win.kernel;
    let pos = win.positions();
    debug_assert_eq!(cols.len(), win.rows() * pos);
    for c in 0..win.channels {
        let plane = &mut image[c * win.h * win.w..(c + 1) * win.h * win.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * pos..(row + 1) * pos];
                for oy in 0..win.out_h {
                    let Some(iy) = win.source(oy, ky) else {
                        continue;
                    };
                    let line = &src[oy * win.out_w..(oy + 1) * win.out_w];
                    let dst = &mut plane[iy * win.w..(iy + 1) * win.w];
                    for (ox, &v) in line.iter().enumerate() {
                        if let Some(ix) = win.source_x(ox, kx) {
                            dst[ix] += v;
                        }
                    }
                }
            }
        }
    }
}
