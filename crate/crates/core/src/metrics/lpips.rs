use ratenet_autograd::Tensor;

use crate::error::{Error, Result};
use crate::losses::FeatureExtractor;

const NORM_EPS: f64 = 1e-10;

/// Per-sample learned-perceptual-style distance between two feature stacks.
///
/// Each layer's features (`B x C x H x W`) are unit-normalised along
/// channels at every position; the squared difference is weighted per
/// channel, summed over channels, averaged over positions and summed over
/// layers. `weights[l]` must have one entry per channel of layer `l`;
/// `None` weights every channel by 1.
pub fn lpips_from_features(fa: &[Tensor<f64>], fb: &[Tensor<f64>], weights: Option<&[Vec<f64>]>) -> Result<Vec<f64>> {
    if fa.len() != fb.len() || fa.is_empty() {
        return Err(Error::Invalid(format!("lpips: {} and {} feature layers", fa.len(), fb.len())));
    }
    if let Some(w) = weights {
        if w.len() != fa.len() {
            return Err(Error::Invalid(format!("lpips: {} weight vectors for {} layers", w.len(), fa.len())));
        }
    }
    let batch = fa[0].shape().first().copied().unwrap_or(0);
    let mut out = vec![0.0; batch];
    for (l, (a, b)) in fa.iter().zip(fb).enumerate() {
        a.expect_same_shape(b)?;
        let (n, c, h, w) = a.dims4()?;
        if n != batch {
            return Err(Error::Invalid("lpips: layers disagree on batch size".into()));
        }
        let wl = match weights {
            Some(ws) if ws[l].len() != c => {
                return Err(Error::Invalid(format!("lpips: layer {l} has {c} channels, {} weights", ws[l].len())))
            }
            Some(ws) => ws[l].clone(),
            None => vec![1.0; c],
        };
        let hw = h * w;
        let (da, db) = (a.data(), b.data());
        for (i, acc) in out.iter_mut().enumerate() {
            let base = i * c * hw;
            let mut layer = 0.0;
            for p in 0..hw {
                let at = |d: &[f64], ch: usize| d[base + ch * hw + p];
                let na = (0..c).map(|ch| at(da, ch).powi(2)).sum::<f64>().sqrt() + NORM_EPS;
                let nb = (0..c).map(|ch| at(db, ch).powi(2)).sum::<f64>().sqrt() + NORM_EPS;
                layer += (0..c).map(|ch| wl[ch] * (at(da, ch) / na - at(db, ch) / nb).powi(2)).sum::<f64>();
            }
            *acc += layer / hw as f64;
        }
    }
    Ok(out)
}

/// Per-sample distance between two image batches through `fx`.
pub fn lpips_distance(fx: &FeatureExtractor, a: &Tensor<f32>, b: &Tensor<f32>, weights: Option<&[Vec<f64>]>) -> Result<Vec<f64>> {
    a.expect_same_shape(b)?;
    let fa = fx.features_tensor(&a.cast::<f64>())?;
    let fb = fx.features_tensor(&b.cast::<f64>())?;
    lpips_from_features(&fa, &fb, weights)
}
