use ratenet_autograd::{Scalar, Tensor};

use crate::error::{Error, Result};

pub const WINDOW: usize = 11;
pub const SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

/// Normalised 1-D Gaussian taps.
pub fn gaussian_taps() -> [f64; WINDOW] {
    let mut t = [0.0; WINDOW];
    let c = (WINDOW / 2) as f64;
    for (i, v) in t.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SIGMA * SIGMA)).exp();
    }
    let s: f64 = t.iter().sum();
    t.map(|v| v / s)
}

/// Separable "valid" Gaussian filter of an `h x w` plane.
fn blur(plane: &[f64], h: usize, w: usize, taps: &[f64; WINDOW]) -> Vec<f64> {
    let wo = w - WINDOW + 1;
    let ho = h - WINDOW + 1;
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for x in 0..wo {
            rows[y * wo + x] = (0..WINDOW).map(|k| taps[k] * plane[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = (0..WINDOW).map(|k| taps[k] * rows[(y + k) * wo + x]).sum();
        }
    }
    out
}

/// Single-scale SSIM of two images in `[-1, 1]` (`C x H x W` or
/// `1 x C x H x W`), computed per channel on `[0, 1]` values and averaged
/// over channels and window positions.
pub fn ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Invalid(format!("ssim: shapes {:?} and {:?} differ", a.shape(), b.shape())));
    }
    let (c, h, w) = match a.shape() {
        [c, h, w] | [1, c, h, w] => (*c, *h, *w),
        s => return Err(Error::Invalid(format!("ssim expects one image, got shape {s:?}"))),
    };
    if h < WINDOW || w < WINDOW {
        return Err(Error::Invalid(format!("ssim: image {h}x{w} is smaller than the {WINDOW}x{WINDOW} window")));
    }
    let taps = gaussian_taps();
    let (c1, c2) = (K1 * K1, K2 * K2);
    let unit = |t: &Tensor<T>, ch: usize| -> Vec<f64> {
        t.data()[ch * h * w..(ch + 1) * h * w].iter().map(|v| (v.to_f64_lossy() + 1.0) / 2.0).collect()
    };
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        let (x, y) = (unit(a, ch), unit(b, ch));
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let (mx, my) = (blur(&x, h, w, &taps), blur(&y, h, w, &taps));
        let (sxx, syy, sxy) = (blur(&xx, h, w, &taps), blur(&yy, h, w, &taps), blur(&xy, h, w, &taps));
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cxy = sxy[i] - ux * uy;
            total += ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn taps_are_normalised_and_symmetric() {
        let t = gaussian_taps();
        assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        for i in 0..WINDOW {
            assert_eq!(t[i], t[WINDOW - 1 - i]);
        }
    }

    #[test]
    fn small_images_rejected() {
        let a = Tensor::<f32>::zeros(&[3, 10, 16]);
        assert!(ssim(&a, &a).is_err());
    }
}
