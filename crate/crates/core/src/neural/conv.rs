use super::Scalar;

/// Geometry of a strided, zero-padded square-kernel convolution from an
/// `[n, c, h, w]` input to an `[n, _, oh, ow]` output.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub oh: usize,
    pub ow: usize,
}

pub(crate) fn conv_out_len(len: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
    (len + 2 * padding).checked_sub(k).map(|span| span / stride + 1)
}

/// Unfolds the input into a `[c*k*k, n*oh*ow]` matrix; rows are
/// `(channel, ky, kx)`, columns `(image, oy, ox)`.
pub(crate) fn im2col<S: Scalar>(input: &[S], g: &ConvGeom) -> Vec<S> {
    let ncols = g.n * g.oh * g.ow;
    let mut cols = vec![S::zero(); g.c * g.k * g.k * ncols];
    for c in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for n in 0..g.n {
                    let plane = &input[(n * g.c + c) * g.h * g.w..(n * g.c + c + 1) * g.h * g.w];
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let base = (n * g.oh + oy) * g.ow;
                        for ox in 0..g.ow {
                            let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst[base + ox] = plane[iy as usize * g.w + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters-adds columns back into `out` (`[n, c, h, w]`).
pub(crate) fn col2im<S: Scalar>(cols: &[S], g: &ConvGeom, out: &mut [S]) {
    let ncols = g.n * g.oh * g.ow;
    for c in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for n in 0..g.n {
                    let plane = &mut out[(n * g.c + c) * g.h * g.w..(n * g.c + c + 1) * g.h * g.w];
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let base = (n * g.oh + oy) * g.ow;
                        for ox in 0..g.ow {
                            let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                            if ix >= 0 && ix < g.w as isize {
                                plane[iy as usize * g.w + ix as usize] += src[base + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}
