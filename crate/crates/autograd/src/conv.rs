//! im2col based 2-D convolution kernels.

use crate::error::{Result, TensorError};
use crate::scalar::{gemm, MatView, Scalar};

/// How out-of-range taps are filled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PadMode {
    Zero,
    /// Mirror without repeating the edge sample (`d c b | a b c d | c b a`).
    Reflect,
}

/// Static geometry of a square-kernel convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub pad_mode: PadMode,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn new(
        input: (usize, usize, usize, usize),
        weight: (usize, usize, usize, usize),
        stride: usize,
        pad: usize,
        pad_mode: PadMode,
    ) -> Result<Self> {
        let (batch, c_in, h, w) = input;
        let (c_out, wc_in, kh, kw) = weight;
        if wc_in != c_in {
            return Err(TensorError::Invalid(format!(
                "conv weight expects {wc_in} input channels, input has {c_in}"
            )));
        }
        if kh != kw || kh == 0 {
            return Err(TensorError::Invalid(format!("unsupported kernel {kh}x{kw}")));
        }
        if stride == 0 {
            return Err(TensorError::Invalid("stride must be positive".into()));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(TensorError::Invalid(format!(
                "input {h}x{w} with padding {pad} is smaller than kernel {kh}"
            )));
        }
        if pad_mode == PadMode::Reflect && (pad >= h || pad >= w) {
            return Err(TensorError::Invalid(format!(
                "reflect padding {pad} needs spatial dims > pad, got {h}x{w}"
            )));
        }
        Ok(Self {
            batch,
            c_in,
            h,
            w,
            c_out,
            kernel: kh,
            stride,
            pad,
            pad_mode,
            h_out: (h + 2 * pad - kh) / stride + 1,
            w_out: (w + 2 * pad - kw) / stride + 1,
        })
    }

    /// Rows of the im2col matrix.
    pub fn patch_len(&self) -> usize {
        self.c_in * self.kernel * self.kernel
    }

    pub fn out_len(&self) -> usize {
        self.h_out * self.w_out
    }

    /// A 1x1 stride-1 unpadded conv needs no patch matrix.
    pub fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    fn source_index(&self, pos: isize, len: usize) -> Option<usize> {
        let n = len as isize;
        if (0..n).contains(&pos) {
            return Some(pos as usize);
        }
        match self.pad_mode {
            PadMode::Zero => None,
            PadMode::Reflect => {
                let r = if pos < 0 { -pos } else { 2 * (n - 1) - pos };
                Some(r as usize)
            }
        }
    }

    /// For each (kernel offset, output coordinate) the source coordinate, if any.
    fn tap_table(&self, len: usize, out: usize) -> Vec<Option<usize>> {
        let mut t = Vec::with_capacity(self.kernel * out);
        for k in 0..self.kernel {
            for o in 0..out {
                let pos = (o * self.stride + k) as isize - self.pad as isize;
                t.push(self.source_index(pos, len));
            }
        }
        t
    }
}

/// Writes the `[patch_len, out_len]` patch matrix of every sample, back to back.
pub fn im2col<T: Scalar>(g: &ConvGeom, input: &[T]) -> Vec<T> {
    let (k, ho, wo) = (g.kernel, g.h_out, g.w_out);
    let rows_tab = g.tap_table(g.h, ho);
    let cols_tab = g.tap_table(g.w, wo);
    let per_sample = g.patch_len() * g.out_len();
    let mut cols = vec![T::zero(); g.batch * per_sample];
    for b in 0..g.batch {
        let xs = &input[b * g.c_in * g.h * g.w..(b + 1) * g.c_in * g.h * g.w];
        let cs = &mut cols[b * per_sample..(b + 1) * per_sample];
        for ci in 0..g.c_in {
            let plane = &xs[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    let dst = &mut cs[row * ho * wo..(row + 1) * ho * wo];
                    for oy in 0..ho {
                        let Some(iy) = rows_tab[ki * ho + oy] else { continue };
                        let src = &plane[iy * g.w..(iy + 1) * g.w];
                        let drow = &mut dst[oy * wo..(oy + 1) * wo];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            if let Some(ix) = cols_tab[kj * wo + ox] {
                                *d = src[ix];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-adds one sample's patch-matrix gradient into its input gradient.
fn col2im_sample<T: Scalar>(
    g: &ConvGeom,
    dcols: &[T],
    dx: &mut [T],
    rows_tab: &[Option<usize>],
    cols_tab: &[Option<usize>],
) {
    let (k, ho, wo) = (g.kernel, g.h_out, g.w_out);
    for ci in 0..g.c_in {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &dcols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let Some(iy) = rows_tab[ki * ho + oy] else { continue };
                    let srow = &src[oy * wo..(oy + 1) * wo];
                    for (ox, &v) in srow.iter().enumerate() {
                        if let Some(ix) = cols_tab[kj * wo + ox] {
                            plane[iy * g.w + ix] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Forward pass. Returns the output and, unless pointwise, the patch matrix.
pub fn conv2d_forward<T: Scalar>(
    g: &ConvGeom,
    input: &[T],
    weight: &[T],
    bias: Option<&[T]>,
) -> (Vec<T>, Option<Vec<T>>) {
    let (kl, ol) = (g.patch_len(), g.out_len());
    let cols = if g.is_pointwise() { None } else { Some(im2col(g, input)) };
    let src: &[T] = cols.as_deref().unwrap_or(input);
    let mut out = vec![T::zero(); g.batch * g.c_out * ol];
    for b in 0..g.batch {
        gemm(
            T::one(),
            weight,
            MatView::row_major(g.c_out, kl),
            src,
            MatView::block(kl, ol, ol, b * kl * ol),
            T::zero(),
            &mut out,
            MatView::block(g.c_out, ol, ol, b * g.c_out * ol),
        );
    }
    if let Some(bias) = bias {
        for b in 0..g.batch {
            for (co, &bv) in bias.iter().enumerate() {
                let start = (b * g.c_out + co) * ol;
                for v in &mut out[start..start + ol] {
                    *v += bv;
                }
            }
        }
    }
    (out, cols)
}

/// Gradient of the weight, accumulated into `dw`.
pub fn conv2d_weight_grad<T: Scalar>(g: &ConvGeom, src: &[T], dy: &[T], dw: &mut [T]) {
    let (kl, ol) = (g.patch_len(), g.out_len());
    for b in 0..g.batch {
        gemm(
            T::one(),
            dy,
            MatView::block(g.c_out, ol, ol, b * g.c_out * ol),
            src,
            MatView::block(kl, ol, ol, b * kl * ol).t(),
            T::one(),
            dw,
            MatView::row_major(g.c_out, kl),
        );
    }
}

pub fn conv2d_bias_grad<T: Scalar>(g: &ConvGeom, dy: &[T], db: &mut [T]) {
    let ol = g.out_len();
    for b in 0..g.batch {
        for (co, d) in db.iter_mut().enumerate() {
            let start = (b * g.c_out + co) * ol;
            *d += dy[start..start + ol].iter().copied().sum::<T>();
        }
    }
}

/// Gradient of the input, accumulated into `dx`.
pub fn conv2d_input_grad<T: Scalar>(g: &ConvGeom, weight: &[T], dy: &[T], dx: &mut [T]) {
    let (kl, ol) = (g.patch_len(), g.out_len());
    let in_len = g.c_in * g.h * g.w;
    if g.is_pointwise() {
        for b in 0..g.batch {
            gemm(
                T::one(),
                weight,
                MatView::row_major(g.c_out, kl).t(),
                dy,
                MatView::block(g.c_out, ol, ol, b * g.c_out * ol),
                T::one(),
                dx,
                MatView::block(kl, ol, ol, b * in_len),
            );
        }
        return;
    }
    let rows_tab = g.tap_table(g.h, g.h_out);
    let cols_tab = g.tap_table(g.w, g.w_out);
    let mut dcols = vec![T::zero(); kl * ol];
    for b in 0..g.batch {
        gemm(
            T::one(),
            weight,
            MatView::row_major(g.c_out, kl).t(),
            dy,
            MatView::block(g.c_out, ol, ol, b * g.c_out * ol),
            T::zero(),
            &mut dcols,
            MatView::row_major(kl, ol),
        );
        col2im_sample(g, &dcols, &mut dx[b * in_len..(b + 1) * in_len], &rows_tab, &cols_tab);
    }
}
