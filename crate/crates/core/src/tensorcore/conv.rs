use super::Real;

/// Shape bookkeeping for one convolution call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        n: usize,
        in_c: usize,
        in_h: usize,
        in_w: usize,
        out_c: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        let ph = in_h + 2 * pad;
        let pw = in_w + 2 * pad;
        if kh == 0 || kw == 0 || kh > ph || kw > pw {
            return None;
        }
        Some(Self {
            n,
            in_c,
            in_h,
            in_w,
            out_c,
            kh,
            kw,
            stride,
            pad,
            out_h: (ph - kh) / stride + 1,
            out_w: (pw - kw) / stride + 1,
        })
    }

    pub fn ckk(&self) -> usize {
        self.in_c * self.kh * self.kw
    }

    pub fn out_positions(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfold every image into a `[C·kh·kw, Ho·Wo]` column matrix, images
/// stacked back to back.
pub(crate) fn im2col<T: Real>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let (ckk, p) = (g.ckk(), g.out_positions());
    let mut cols = vec![T::zero(); g.n * ckk * p];
    let plane = g.in_h * g.in_w;
    for n in 0..g.n {
        let img = &x[n * g.in_c * plane..(n + 1) * g.in_c * plane];
        let dst = &mut cols[n * ckk * p..(n + 1) * ckk * p];
        for c in 0..g.in_c {
            for ki in 0..g.kh {
                for kj in 0..g.kw {
                    let row = (c * g.kh + ki) * g.kw + kj;
                    let out_row = &mut dst[row * p..(row + 1) * p];
                    for oy in 0..g.out_h {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.in_h as isize {
                            continue;
                        }
                        let src_row = &img[c * plane + iy as usize * g.in_w..][..g.in_w];
                        for ox in 0..g.out_w {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.in_w as isize {
                                out_row[oy * g.out_w + ox] = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add columns back onto the input grid.
pub(crate) fn col2im<T: Real>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let (ckk, p) = (g.ckk(), g.out_positions());
    let plane = g.in_h * g.in_w;
    let mut x = vec![T::zero(); g.n * g.in_c * plane];
    for n in 0..g.n {
        let src = &cols[n * ckk * p..(n + 1) * ckk * p];
        let img = &mut x[n * g.in_c * plane..(n + 1) * g.in_c * plane];
        for c in 0..g.in_c {
            for ki in 0..g.kh {
                for kj in 0..g.kw {
                    let row = (c * g.kh + ki) * g.kw + kj;
                    let col_row = &src[row * p..(row + 1) * p];
                    for oy in 0..g.out_h {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.in_h as isize {
                            continue;
                        }
                        let base = c * plane + iy as usize * g.in_w;
                        for ox in 0..g.out_w {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.in_w as isize {
                                img[base + ix as usize] = img[base + ix as usize] + col_row[oy * g.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_dims() {
        let g = ConvGeom::new(1, 1, 48, 64, 8, 4, 4, 4, 0).unwrap();
        assert_eq!((g.out_h, g.out_w), (12, 16));
        let g = ConvGeom::new(1, 8, 12, 16, 8, 3, 3, 2, 1).unwrap();
        assert_eq!((g.out_h, g.out_w), (6, 8));
        assert!(ConvGeom::new(1, 1, 2, 2, 1, 5, 5, 1, 0).is_none());
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)>
        let g = ConvGeom::new(2, 2, 5, 4, 3, 3, 3, 2, 1).unwrap();
        let x: Vec<f64> = (0..2 * 2 * 5 * 4).map(|i| ((i * 37 % 11) as f64) - 5.0).collect();
        let c: Vec<f64> = (0..2 * g.ckk() * g.out_positions()).map(|i| ((i * 17 % 7) as f64) - 3.0).collect();
        let lhs: f64 = im2col(&x, &g).iter().zip(&c).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(col2im(&c, &g)).map(|(a, b)| a * b).sum();
        assert_eq!(lhs, rhs);
    }
}
