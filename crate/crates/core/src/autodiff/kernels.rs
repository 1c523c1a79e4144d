//! Raw slice kernels shared by the tape's forward and backward rules.
//!
//! All accumulation happens in `f64` regardless of the storage type.

use super::tensor::Scalar;

/// Row-major operand of a matrix product, optionally read transposed.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a, E> {
    pub data: &'a [E],
    /// Stored as `rows×cols`; with `transposed` it is read as `cols×rows`.
    pub cols: usize,
    pub transposed: bool,
}

impl<'a, E> MatRef<'a, E> {
    pub fn plain(data: &'a [E], cols: usize) -> Self {
        MatRef { data, cols, transposed: false }
    }

    pub fn transposed(data: &'a [E], cols: usize) -> Self {
        MatRef { data, cols, transposed: true }
    }

    pub(crate) fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `op(a)` is `m×k`, `op(b)` is `k×n`; returns the `m×n` product,
/// accumulated in `f64`.
pub(crate) fn matmul<E: Scalar>(a: MatRef<E>, b: MatRef<E>, m: usize, k: usize, n: usize) -> Vec<E> {
    let a64: Vec<f64> = a.data.iter().map(|v| v.as_f64()).collect();
    let b64: Vec<f64> = b.data.iter().map(|v| v.as_f64()).collect();
    dgemm(&a64, a.cols, a.transposed, &b64, b.cols, b.transposed, m, k, n).into_iter().map(E::from_f64).collect()
}

/// Row-major `f64` product of `op(a)` (`m×k`) and `op(b)` (`k×n`), where
/// each operand is stored with `*_cols` columns and optionally transposed.
#[allow(clippy::too_many_arguments)]
fn dgemm(
    a: &[f64],
    a_cols: usize,
    a_t: bool,
    b: &[f64],
    b_cols: usize,
    b_t: bool,
    m: usize,
    k: usize,
    n: usize,
) -> Vec<f64> {
    assert_eq!(a.len(), m * k, "left operand size");
    assert_eq!(b.len(), k * n, "right operand size");
    let (rsa, csa) = MatRef { data: a, cols: a_cols, transposed: a_t }.strides();
    let (rsb, csb) = MatRef { data: b, cols: b_cols, transposed: b_t }.strides();
    let mut c = vec![0.0f64; m * n];
    // SAFETY: the asserted buffer sizes match the m·k and k·n layouts the
    // strides describe, and `c` holds m·n elements.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

/// Geometry of a 2D convolution with zero padding.
///
/// The output spatial size is `ceil(in / stride)`; `pad` is the number of
/// zero rows/columns in front of the input, any remainder is padded behind.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        self.height.div_ceil(self.stride)
    }

    pub fn out_width(&self) -> usize {
        self.width.div_ceil(self.stride)
    }

    fn input_index(&self, out: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = (out * self.stride + k) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

/// Unfolds `x` into a `[C·K·K, B·OH·OW]` matrix of receptive fields.
fn im2col<E: Scalar>(x: &[E], g: &ConvGeometry) -> Vec<f64> {
    let (oh, ow, ks) = (g.out_height(), g.out_width(), g.kernel);
    let cols = g.batch * oh * ow;
    let mut out = vec![0.0; g.in_channels * ks * ks * cols];
    for c in 0..g.in_channels {
        for ky in 0..ks {
            for kx in 0..ks {
                let row = &mut out[((c * ks + ky) * ks + kx) * cols..][..cols];
                for b in 0..g.batch {
                    let plane = &x[(b * g.in_channels + c) * g.height * g.width..][..g.height * g.width];
                    for y in 0..oh {
                        let Some(iy) = g.input_index(y, ky, g.height) else { continue };
                        for xo in 0..ow {
                            if let Some(ix) = g.input_index(xo, kx, g.width) {
                                row[(b * oh + y) * ow + xo] = plane[iy * g.width + ix].as_f64();
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn conv2d_forward<E: Scalar>(x: &[E], w: &[E], bias: &[E], g: &ConvGeometry) -> Vec<E> {
    let (ohw, ckk) = (g.out_height() * g.out_width(), g.in_channels * g.kernel * g.kernel);
    let cols = im2col(x, g);
    let w64: Vec<f64> = w.iter().map(|v| v.as_f64()).collect();
    // [O, B·OH·OW]
    let prod = dgemm(&w64, ckk, false, &cols, g.batch * ohw, false, g.out_channels, ckk, g.batch * ohw);
    let mut out = Vec::with_capacity(g.batch * g.out_channels * ohw);
    for b in 0..g.batch {
        for o in 0..g.out_channels {
            let bo = bias[o].as_f64();
            let src = &prod[o * g.batch * ohw + b * ohw..][..ohw];
            out.extend(src.iter().map(|&v| E::from_f64(v + bo)));
        }
    }
    out
}

/// Returns `(d_input, d_weight, d_bias)`.
pub(crate) fn conv2d_backward<E: Scalar>(
    x: &[E],
    w: &[E],
    grad_out: &[E],
    g: &ConvGeometry,
) -> (Vec<E>, Vec<E>, Vec<E>) {
    let (oh, ow, ks) = (g.out_height(), g.out_width(), g.kernel);
    let (ohw, ckk, n) = (oh * ow, g.in_channels * ks * ks, g.batch * oh * ow);
    // gradient rearranged to [O, B·OH·OW]
    let mut gm = vec![0.0f64; g.out_channels * n];
    let mut db = vec![0.0f64; g.out_channels];
    for b in 0..g.batch {
        for o in 0..g.out_channels {
            let src = &grad_out[(b * g.out_channels + o) * ohw..][..ohw];
            let dst = &mut gm[o * n + b * ohw..][..ohw];
            for (d, s) in dst.iter_mut().zip(src) {
                *d = s.as_f64();
                db[o] += *d;
            }
        }
    }
    let cols = im2col(x, g);
    let dw = dgemm(&gm, n, false, &cols, n, true, g.out_channels, n, ckk);
    let w64: Vec<f64> = w.iter().map(|v| v.as_f64()).collect();
    let dcols = dgemm(&w64, ckk, true, &gm, n, false, ckk, g.out_channels, n);
    let mut dx = vec![0.0f64; x.len()];
    for c in 0..g.in_channels {
        for ky in 0..ks {
            for kx in 0..ks {
                let row = &dcols[((c * ks + ky) * ks + kx) * n..][..n];
                for b in 0..g.batch {
                    let plane = &mut dx[(b * g.in_channels + c) * g.height * g.width..][..g.height * g.width];
                    for y in 0..oh {
                        let Some(iy) = g.input_index(y, ky, g.height) else { continue };
                        for xo in 0..ow {
                            if let Some(ix) = g.input_index(xo, kx, g.width) {
                                plane[iy * g.width + ix] += row[(b * oh + y) * ow + xo];
                            }
                        }
                    }
                }
            }
        }
    }
    let cast = |v: Vec<f64>| v.into_iter().map(E::from_f64).collect::<Vec<E>>();
    (cast(dx), cast(dw), cast(db))
}

/// Normalized coordinate of index `i` along an axis of length `n`, in [-1, 1].
#[inline]
pub fn normalized_coord(i: usize, n: usize) -> f64 {
    if n <= 1 {
        0.0
    } else {
        -1.0 + 2.0 * i as f64 / (n - 1) as f64
    }
}

/// Softmax over one `h×w` feature map scaled by `1/temperature`.
fn channel_softmax<E: Scalar>(feat: &[E], temperature: f64, probs: &mut [f64]) {
    let max = feat.iter().map(|v| v.as_f64() / temperature).fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (p, v) in probs.iter_mut().zip(feat) {
        *p = (v.as_f64() / temperature - max).exp();
        z += *p;
    }
    probs.iter_mut().for_each(|p| *p /= z);
}

/// `x` is `[batch, channels, h, w]`; output is `[batch, 2*channels]`
/// interleaved as `(x̄_0, ȳ_0, x̄_1, ȳ_1, …)`.
pub(crate) fn spatial_softmax_forward<E: Scalar>(
    x: &[E],
    batch: usize,
    channels: usize,
    h: usize,
    w: usize,
    temperature: f64,
) -> Vec<E> {
    let hw = h * w;
    let mut probs = vec![0.0; hw];
    let mut out = Vec::with_capacity(batch * channels * 2);
    for bc in 0..batch * channels {
        channel_softmax(&x[bc * hw..(bc + 1) * hw], temperature, &mut probs);
        let (mut ex, mut ey) = (0.0, 0.0);
        for r in 0..h {
            let cy = normalized_coord(r, h);
            for c in 0..w {
                let p = probs[r * w + c];
                ex += p * normalized_coord(c, w);
                ey += p * cy;
            }
        }
        out.push(E::from_f64(ex));
        out.push(E::from_f64(ey));
    }
    out
}

pub(crate) fn spatial_softmax_backward<E: Scalar>(
    x: &[E],
    grad_out: &[E],
    batch: usize,
    channels: usize,
    h: usize,
    w: usize,
    temperature: f64,
) -> Vec<E> {
    let hw = h * w;
    let mut probs = vec![0.0; hw];
    let mut dx = Vec::with_capacity(x.len());
    for bc in 0..batch * channels {
        channel_softmax(&x[bc * hw..(bc + 1) * hw], temperature, &mut probs);
        let (mut ex, mut ey) = (0.0, 0.0);
        for r in 0..h {
            for c in 0..w {
                ex += probs[r * w + c] * normalized_coord(c, w);
                ey += probs[r * w + c] * normalized_coord(r, h);
            }
        }
        let gx = grad_out[2 * bc].as_f64();
        let gy = grad_out[2 * bc + 1].as_f64();
        for r in 0..h {
            let dy = normalized_coord(r, h) - ey;
            for c in 0..w {
                let dxc = normalized_coord(c, w) - ex;
                let p = probs[r * w + c];
                dx.push(E::from_f64(p * (gx * dxc + gy * dy) / temperature));
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct loop-nest convolution, the reference for the unfolded kernel.
    fn conv_reference(x: &[f64], w: &[f64], bias: &[f64], g: &ConvGeometry) -> Vec<f64> {
        let (oh, ow, ks) = (g.out_height(), g.out_width(), g.kernel);
        let mut out = Vec::new();
        for b in 0..g.batch {
            for o in 0..g.out_channels {
                for y in 0..oh {
                    for xo in 0..ow {
                        let mut acc = bias[o];
                        for c in 0..g.in_channels {
                            for ky in 0..ks {
                                for kx in 0..ks {
                                    let iy = (y * g.stride + ky) as isize - g.pad as isize;
                                    let ix = (xo * g.stride + kx) as isize - g.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= g.height as isize || ix >= g.width as isize {
                                        continue;
                                    }
                                    acc += w[((o * g.in_channels + c) * ks + ky) * ks + kx]
                                        * x[((b * g.in_channels + c) * g.height + iy as usize) * g.width + ix as usize];
                                }
                            }
                        }
                        out.push(acc);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn unfolded_conv_matches_reference() {
        for (pad, h, w) in [(1, 8, 8), (0, 8, 8), (1, 7, 5), (0, 6, 9)] {
            let g = ConvGeometry {
                batch: 2,
                in_channels: 3,
                out_channels: 4,
                height: h,
                width: w,
                kernel: 3,
                stride: 2,
                pad,
            };
            let x: Vec<f64> = (0..2 * 3 * h * w).map(|i| ((i * 37 % 11) as f64 - 5.0) / 7.0).collect();
            let wt: Vec<f64> = (0..4 * 3 * 9).map(|i| ((i * 13 % 7) as f64 - 3.0) / 5.0).collect();
            let bias = [0.1, -0.2, 0.3, 0.0];
            let fast = conv2d_forward(&x, &wt, &bias, &g);
            let slow = conv_reference(&x, &wt, &bias, &g);
            assert_eq!(fast.len(), slow.len());
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_geometry_halves_even_inputs() {
        let g = ConvGeometry {
            batch: 1,
            in_channels: 1,
            out_channels: 1,
            height: 32,
            width: 32,
            kernel: 3,
            stride: 2,
            pad: 1,
        };
        assert_eq!((g.out_height(), g.out_width()), (16, 16));
    }

    #[test]
    fn transposed_operands_match_plain_product() {
        // a = [[1,2,3],[4,5,6]], b = [[1,0],[0,1],[1,1]]
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0f64, 0.0, 0.0, 1.0, 1.0, 1.0];
        let ab = matmul(MatRef::plain(&a, 3), MatRef::plain(&b, 2), 2, 3, 2);
        assert_eq!(ab, vec![4.0, 5.0, 10.0, 11.0]);
        // aᵀ·a via the transposed view
        let ata = matmul(MatRef::transposed(&a, 3), MatRef::plain(&a, 3), 3, 2, 3);
        assert_eq!(ata, vec![17.0, 22.0, 27.0, 22.0, 29.0, 36.0, 27.0, 36.0, 45.0]);
        let aat = matmul(MatRef::plain(&a, 3), MatRef::transposed(&a, 3), 2, 3, 2);
        assert_eq!(aat, vec![14.0, 32.0, 32.0, 77.0]);
    }

    #[test]
    fn normalized_coord_spans_unit_interval() {
        assert_eq!(normalized_coord(0, 8), -1.0);
        assert_eq!(normalized_coord(7, 8), 1.0);
        assert_eq!(normalized_coord(0, 1), 0.0);
    }
}
