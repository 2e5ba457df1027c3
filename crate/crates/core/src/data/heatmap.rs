use ratenet_autograd::Tensor;

use super::keypoints::{Keypoints18, NUM_JOINTS};
use crate::error::{Error, Result};

/// Gaussian width used at 256 px height; other resolutions scale linearly.
pub const REFERENCE_SIGMA: f64 = 6.0;

pub fn default_sigma(height: usize) -> f64 {
    REFERENCE_SIGMA * height as f64 / 256.0
}

/// Renders an `18 x H x W` heatmap: an isotropic Gaussian of width `sigma`
/// centred on every visible joint, an all-zero channel for hidden ones.
pub fn render_heatmap(kp: &Keypoints18, height: usize, width: usize, sigma: f64) -> Result<Tensor<f32>> {
    if height == 0 || width == 0 {
        return Err(Error::Invalid(format!("heatmap size {height}x{width} must be positive")));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Invalid(format!("heatmap sigma must be positive, got {sigma}")));
    }
    kp.validate()?;
    kp.check_bounds(height, width)?;
    let plane = height * width;
    let mut data = vec![0f32; NUM_JOINTS * plane];
    let inv = 1.0 / (2.0 * sigma * sigma);
    for (j, (p, &vis)) in kp.points.iter().zip(&kp.visible).enumerate() {
        if !vis {
            continue;
        }
        let ch = &mut data[j * plane..(j + 1) * plane];
        // Separable: exp(-(dx² + dy²) k) = exp(-dx² k) exp(-dy² k).
        let gx: Vec<f64> = (0..width).map(|x| (-(x as f64 - p[0]).powi(2) * inv).exp()).collect();
        for y in 0..height {
            let gy = (-(y as f64 - p[1]).powi(2) * inv).exp();
            for (x, v) in ch[y * width..(y + 1) * width].iter_mut().enumerate() {
                *v = (gy * gx[x]) as f32;
            }
        }
    }
    Ok(Tensor::from_vec(&[NUM_JOINTS, height, width], data)?)
}

/// Pixel `(x, y)` of the maximum of channel `joint`, or `None` for an all-zero channel.
pub fn channel_argmax(heatmap: &Tensor<f32>, joint: usize) -> Option<(usize, usize)> {
    let s = heatmap.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let ch = &heatmap.data()[joint * h * w..(joint + 1) * h * w];
    let (idx, &max) = ch
        .iter()
        .enumerate()
        .fold((0, &f32::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best });
    (max > 0.0).then_some((idx % w, idx / w))
}
