//! im2col / GEMM convolution kernels.
//!
//! Forward passes run one GEMM per sample so every output sample is computed
//! by exactly the same arithmetic regardless of how many samples share the
//! batch.

use super::Element;

/// Spatial geometry of a strided, zero-padded sliding window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Window {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Window {
    /// Number of window positions along an axis of length `len`, or `None`
    /// when the kernel does not fit.
    pub fn out_len(&self, len: usize) -> Option<usize> {
        let padded = len + 2 * self.padding;
        if padded < self.kernel || self.stride == 0 {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }

    /// Inverse of `out_len` for transposed convolution: `(len−1)·s − 2p + K`.
    pub fn transposed_len(&self, len: usize) -> Option<usize> {
        ((len - 1) * self.stride + self.kernel)
            .checked_sub(2 * self.padding)
            .filter(|&v| v > 0)
    }
}

/// Unfolds one C×H×W image into a (C·K·K) × (GH·GW) column matrix, where the
/// GH×GW grid is the set of window positions.
#[allow(clippy::too_many_arguments)]
pub(crate) fn im2col<T: Element>(img: &[T], c: usize, h: usize, w: usize, win: Window, gh: usize, gw: usize, cols: &mut [T]) {
    let k = win.kernel;
    let grid = gh * gw;
    debug_assert_eq!(cols.len(), c * k * k * grid);
    for ch in 0..c {
        let plane = &img[ch * h * w..(ch + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = ((ch * k + ki) * k + kj) * grid;
                let out = &mut cols[row..row + grid];
                for gy in 0..gh {
                    let iy = (gy * win.stride + ki) as isize - win.padding as isize;
                    let dst = &mut out[gy * gw..(gy + 1) * gw];
                    if iy < 0 || iy >= h as isize {
                        dst.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (gx, d) in dst.iter_mut().enumerate() {
                        let ix = (gx * win.stride + kj) as isize - win.padding as isize;
                        *d = if ix < 0 || ix >= w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds a column matrix back into a
/// C×H×W image (which is accumulated into, not overwritten).
#[allow(clippy::too_many_arguments)]
pub(crate) fn col2im<T: Element>(cols: &[T], c: usize, h: usize, w: usize, win: Window, gh: usize, gw: usize, img: &mut [T]) {
    let k = win.kernel;
    let grid = gh * gw;
    debug_assert_eq!(cols.len(), c * k * k * grid);
    for ch in 0..c {
        let plane = &mut img[ch * h * w..(ch + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = ((ch * k + ki) * k + kj) * grid;
                let src = &cols[row..row + grid];
                for gy in 0..gh {
                    let iy = (gy * win.stride + ki) as isize - win.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for (gx, &v) in src[gy * gw..(gy + 1) * gw].iter().enumerate() {
                        let ix = (gx * win.stride + kj) as isize - win.padding as isize;
                        if ix >= 0 && (ix as usize) < w {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Shapes of a convolution: input N×C×H×W, weight O×C×K×K, output N×O×OH×OW.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub oh: usize,
    pub ow: usize,
    pub win: Window,
}

impl ConvGeom {
    fn ckk(&self) -> usize {
        self.c * self.win.kernel * self.win.kernel
    }
}

pub(crate) fn conv2d_forward<T: Element>(g: &ConvGeom, x: &[T], weight: &[T], bias: Option<&[T]>) -> Vec<T> {
    let (in_len, out_hw) = (g.c * g.h * g.w, g.oh * g.ow);
    let mut out = vec![T::zero(); g.n * g.o * out_hw];
    let mut cols = vec![T::zero(); g.ckk() * out_hw];
    for s in 0..g.n {
        im2col(&x[s * in_len..(s + 1) * in_len], g.c, g.h, g.w, g.win, g.oh, g.ow, &mut cols);
        let dst = &mut out[s * g.o * out_hw..(s + 1) * g.o * out_hw];
        T::gemm(g.o, g.ckk(), out_hw, weight, false, &cols, false, dst, T::zero());
        if let Some(b) = bias {
            for (row, &bv) in dst.chunks_exact_mut(out_hw).zip(b) {
                row.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

/// Gradients of conv2d. Each requested output buffer is accumulated into.
pub(crate) fn conv2d_backward<T: Element>(
    g: &ConvGeom,
    x: &[T],
    weight: &[T],
    dy: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    mut db: Option<&mut [T]>,
) {
    let (in_len, out_hw) = (g.c * g.h * g.w, g.oh * g.ow);
    let mut cols = vec![T::zero(); g.ckk() * out_hw];
    for s in 0..g.n {
        let dy_s = &dy[s * g.o * out_hw..(s + 1) * g.o * out_hw];
        if let Some(dw) = dw.as_deref_mut() {
            im2col(&x[s * in_len..(s + 1) * in_len], g.c, g.h, g.w, g.win, g.oh, g.ow, &mut cols);
            T::gemm(g.o, out_hw, g.ckk(), dy_s, false, &cols, true, dw, T::one());
        }
        if let Some(dx) = dx.as_deref_mut() {
            T::gemm(g.ckk(), g.o, out_hw, weight, true, dy_s, false, &mut cols, T::zero());
            col2im(&cols, g.c, g.h, g.w, g.win, g.oh, g.ow, &mut dx[s * in_len..(s + 1) * in_len]);
        }
        if let Some(db) = db.as_deref_mut() {
            for (b, row) in db.iter_mut().zip(dy_s.chunks_exact(out_hw)) {
                *b += row.iter().copied().sum::<T>();
            }
        }
    }
}

/// Transposed convolution: input N×C×H×W, weight C×O×K×K, output N×O×OH×OW
/// with OH = (H−1)·s − 2p + K. Here `g.c`/`g.h`/`g.w` describe the input and
/// `g.o`/`g.oh`/`g.ow` the output.
pub(crate) fn conv_transpose2d_forward<T: Element>(g: &ConvGeom, x: &[T], weight: &[T], bias: Option<&[T]>) -> Vec<T> {
    let (in_hw, out_len) = (g.h * g.w, g.o * g.oh * g.ow);
    let okk = g.o * g.win.kernel * g.win.kernel;
    let mut out = vec![T::zero(); g.n * out_len];
    let mut cols = vec![T::zero(); okk * in_hw];
    for s in 0..g.n {
        let x_s = &x[s * g.c * in_hw..(s + 1) * g.c * in_hw];
        T::gemm(okk, g.c, in_hw, weight, true, x_s, false, &mut cols, T::zero());
        let dst = &mut out[s * out_len..(s + 1) * out_len];
        col2im(&cols, g.o, g.oh, g.ow, g.win, g.h, g.w, dst);
        if let Some(b) = bias {
            for (plane, &bv) in dst.chunks_exact_mut(g.oh * g.ow).zip(b) {
                plane.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

pub(crate) fn conv_transpose2d_backward<T: Element>(
    g: &ConvGeom,
    x: &[T],
    weight: &[T],
    dy: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    mut db: Option<&mut [T]>,
) {
    let (in_hw, out_len) = (g.h * g.w, g.o * g.oh * g.ow);
    let okk = g.o * g.win.kernel * g.win.kernel;
    let mut cols = vec![T::zero(); okk * in_hw];
    for s in 0..g.n {
        let dy_s = &dy[s * out_len..(s + 1) * out_len];
        if dx.is_some() || dw.is_some() {
            im2col(dy_s, g.o, g.oh, g.ow, g.win, g.h, g.w, &mut cols);
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dst = &mut dx[s * g.c * in_hw..(s + 1) * g.c * in_hw];
            T::gemm(g.c, okk, in_hw, weight, false, &cols, false, dst, T::one());
        }
        if let Some(dw) = dw.as_deref_mut() {
            let x_s = &x[s * g.c * in_hw..(s + 1) * g.c * in_hw];
            T::gemm(g.c, in_hw, okk, x_s, false, &cols, true, dw, T::one());
        }
        if let Some(db) = db.as_deref_mut() {
            for (b, plane) in db.iter_mut().zip(dy_s.chunks_exact(g.oh * g.ow)) {
                *b += plane.iter().copied().sum::<T>();
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_lengths() {
        let w = Window {
            kernel: 4,
            stride: 2,
            padding: 1,
        };
        assert_eq!(w.out_len(256), Some(128));
        assert_eq!(w.transposed_len(128), Some(256));
        let s1 = Window {
            kernel: 4,
            stride: 1,
            padding: 1,
        };
        assert_eq!(s1.out_len(32), Some(31));
        assert_eq!(
            Window {
                kernel: 5,
                stride: 1,
                padding: 0
            }
            .out_len(3),
            None
        );
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)> for arbitrary x, c.
        let win = Window {
            kernel: 3,
            stride: 2,
            padding: 1,
        };
        let (c, h, w) = (2, 5, 4);
        let (gh, gw) = (win.out_len(h).unwrap(), win.out_len(w).unwrap());
        let x: Vec<f64> = (0..c * h * w).map(|i| ((i * 7 % 11) as f64) - 5.0).collect();
        let cv: Vec<f64> = (0..c * 9 * gh * gw).map(|i| ((i * 5 % 13) as f64) * 0.25).collect();
        let mut cols = vec![0.0; cv.len()];
        im2col(&x, c, h, w, win, gh, gw, &mut cols);
        let mut back = vec![0.0; x.len()];
        col2im(&cv, c, h, w, win, gh, gw, &mut back);
        let lhs: f64 = cols.iter().zip(&cv).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }
}
