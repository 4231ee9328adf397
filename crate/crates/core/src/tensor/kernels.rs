//! Raw numeric kernels shared by the graph ops.

use super::Real;

/// Row-major `c = op(a) · op(b) + beta · c` where `op(a)` is `m×k` and `op(b)` is `k×n`.
///
/// `ta` means `a` is stored as `k×m`; `tb` means `b` is stored as `n×k`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    ta: bool,
    b: &[T],
    tb: bool,
    beta: T,
    c: &mut [T],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above pin every buffer to the extent the strides address.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
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
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(cin: usize, h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> Option<Self> {
        if stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
            return None;
        }
        Some(Self {
            cin,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kw) / stride + 1,
        })
    }

    pub fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    pub fn out_area(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfold one `cin×h×w` image into a `patch × (ho·wo)` column matrix.
pub(crate) fn im2col<T: Real>(g: &ConvGeom, img: &[T], col: &mut [T]) {
    let area = g.out_area();
    for c in 0..g.cin {
        let plane = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut col[row * area..(row + 1) * area];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into an image gradient.
pub(crate) fn col2im<T: Real>(g: &ConvGeom, col: &[T], img: &mut [T]) {
    let area = g.out_area();
    for c in 0..g.cin {
        let plane = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &col[row * area..(row + 1) * area];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `out[n] = weight · im2col(input[n])` for a batch of `n` images.
pub(crate) fn conv2d_forward<T: Real>(
    g: &ConvGeom,
    batch: usize,
    cout: usize,
    input: &[T],
    weight: &[T],
    out: &mut [T],
) {
    let in_sz = g.cin * g.h * g.w;
    let out_sz = cout * g.out_area();
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); g.patch() * g.out_area()]
    };
    for n in 0..batch {
        let img = &input[n * in_sz..(n + 1) * in_sz];
        let cols: &[T] = if g.is_pointwise() {
            img
        } else {
            im2col(g, img, &mut col);
            &col
        };
        gemm(
            cout,
            g.patch(),
            g.out_area(),
            weight,
            false,
            cols,
            false,
            T::zero(),
            &mut out[n * out_sz..(n + 1) * out_sz],
        );
    }
}

/// Accumulates weight and (optionally) input gradients of a conv2d.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<T: Real>(
    g: &ConvGeom,
    batch: usize,
    cout: usize,
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    grad_weight: Option<&mut [T]>,
    grad_input: Option<&mut [T]>,
) {
    let in_sz = g.cin * g.h * g.w;
    let out_sz = cout * g.out_area();
    let pointwise = g.is_pointwise();
    let mut col = vec![T::zero(); if pointwise { 0 } else { g.patch() * g.out_area() }];
    let mut dcol = vec![T::zero(); g.patch() * g.out_area()];
    let mut gw = grad_weight;
    let mut gi = grad_input;
    for n in 0..batch {
        let go = &grad_out[n * out_sz..(n + 1) * out_sz];
        if let Some(gw) = gw.as_deref_mut() {
            let img = &input[n * in_sz..(n + 1) * in_sz];
            let cols: &[T] = if pointwise {
                img
            } else {
                im2col(g, img, &mut col);
                &col
            };
            gemm(cout, g.out_area(), g.patch(), go, false, cols, true, T::one(), gw);
        }
        if let Some(gi) = gi.as_deref_mut() {
            let dst = &mut gi[n * in_sz..(n + 1) * in_sz];
            if pointwise {
                gemm(g.patch(), cout, g.out_area(), weight, true, go, false, T::one(), dst);
            } else {
                gemm(g.patch(), cout, g.out_area(), weight, true, go, false, T::zero(), &mut dcol);
                col2im(g, &dcol, dst);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0, 7.0, 8.0];
        let mut c = [0.0f64; 4];
        gemm(2, 2, 2, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, &a, true, &b, false, 0.0, &mut c);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, 0.0, &mut c);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn conv_geometry() {
        let g = ConvGeom::new(3, 32, 32, 3, 3, 2, 1).unwrap();
        assert_eq!((g.ho, g.wo), (16, 16));
        assert!(ConvGeom::new(1, 2, 2, 5, 5, 1, 0).is_none());
    }
}
