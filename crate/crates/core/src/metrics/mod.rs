//! Image quality metrics and directory evaluation.

mod fid;
mod inception;
mod lpips;
mod ssim;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use ratenet_autograd::Tensor;
use serde::{Deserialize, Serialize};

pub use fid::{fid, fid_from_moments, moments, NEG_EIG_TOL};
pub use inception::{inception_score, DEFAULT_SPLITS};
pub use lpips::{lpips_distance, lpips_from_features};
pub use ssim::{gaussian_taps, ssim, SIGMA as SSIM_SIGMA, WINDOW as SSIM_WINDOW};

use crate::data::load_image;
use crate::error::{Error, Result};
use crate::losses::{FeatureExtractor, Provenance};

pub const CLASSIFIER_SEED: u64 = 0x0c1a_55e5;
pub const CLASSIFIER_CLASSES: usize = 10;

/// Globally pooled last-tap features, one row per image.
pub fn pooled_features(fx: &FeatureExtractor, images: &Tensor<f32>) -> Result<DMatrix<f64>> {
    let taps = fx.features_tensor(&images.cast::<f64>())?;
    let last = taps.last().ok_or_else(|| Error::Invalid("extractor has no taps".into()))?;
    let (n, c, h, w) = last.dims4()?;
    let hw = h * w;
    Ok(DMatrix::from_fn(n, c, |i, ch| {
        let s = (i * c + ch) * hw;
        last.data()[s..s + hw].iter().sum::<f64>() / hw as f64
    }))
}

/// Stand-in for a pretrained image classifier: softmax of a fixed random
/// linear map of pooled extractor features.
#[derive(Clone, Debug)]
pub struct SurrogateClassifier {
    pub seed: u64,
    weights: DMatrix<f64>,
}

impl SurrogateClassifier {
    pub fn new(seed: u64, in_features: usize, n_classes: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (in_features as f64).sqrt();
        let weights = DMatrix::from_fn(in_features, n_classes, |_, _| {
            scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
        });
        Self { seed, weights }
    }

    /// Default classifier sized for the last tap of `fx`.
    pub fn for_extractor(fx: &FeatureExtractor) -> Self {
        let width = fx.tap_channels().last().copied().unwrap_or(3);
        Self::new(CLASSIFIER_SEED, width, CLASSIFIER_CLASSES)
    }

    pub fn n_classes(&self) -> usize {
        self.weights.ncols()
    }

    /// Row-wise class probabilities for pooled features.
    pub fn probabilities(&self, feats: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if feats.ncols() != self.weights.nrows() {
            return Err(Error::Invalid(format!(
                "classifier expects {} features, got {}",
                self.weights.nrows(),
                feats.ncols()
            )));
        }
        let mut logits = feats * &self.weights;
        for mut row in logits.row_iter_mut() {
            let m = row.max();
            row.apply(|v| *v = (*v - m).exp());
            let s = row.sum();
            row /= s;
        }
        Ok(logits)
    }
}

/// Metrics of a set of generated images against their ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub n_samples: usize,
    pub ssim: f64,
    pub is_mean: f64,
    pub is_std: f64,
    /// Absent with fewer than two samples.
    pub fid: Option<f64>,
    pub lpips: f64,
    pub extractor_provenance: Provenance,
    pub classifier: String,
}

impl MetricReport {
    pub fn table_header() -> String {
        format!("{:>8} {:>17} {:>10} {:>8} {:>6}  {}", "SSIM↑", "IS↑", "FID↓", "LPIPS↓", "N", "features")
    }

    pub fn table_row(&self) -> String {
        let fid = self.fid.map_or_else(|| "n/a".to_string(), |f| format!("{f:.3}"));
        let is = format!("{:.3} ± {:.3}", self.is_mean, self.is_std);
        format!(
            "{:>8.3} {:>17} {:>10} {:>8.3} {:>6}  {}",
            self.ssim, is, fid, self.lpips, self.n_samples, self.extractor_provenance
        )
    }
}

/// Scores `preds` against `gts` (each `3 x H x W` or `1 x 3 x H x W`, in `[-1, 1]`).
pub fn evaluate_images(
    preds: &[Tensor<f32>],
    gts: &[Tensor<f32>],
    fx: &FeatureExtractor,
    classifier: &SurrogateClassifier,
) -> Result<MetricReport> {
    if preds.is_empty() || preds.len() != gts.len() {
        return Err(Error::Invalid(format!("evaluate: {} predictions for {} targets", preds.len(), gts.len())));
    }
    let batch = |ts: &[Tensor<f32>]| -> Result<Tensor<f32>> {
        let four: Vec<Tensor<f32>> = ts
            .iter()
            .map(|t| match t.shape() {
                [c, h, w] => t.reshape(&[1, *c, *h, *w]),
                _ => Ok(t.clone()),
            })
            .collect::<std::result::Result<_, _>>()?;
        Ok(Tensor::cat_batch(&four.iter().collect::<Vec<_>>())?)
    };
    let (p, g) = (batch(preds)?, batch(gts)?);
    p.expect_same_shape(&g)?;
    let n = preds.len();

    let mut ssim_sum = 0.0;
    for i in 0..n {
        ssim_sum += ssim(&p.narrow_batch(i, 1)?, &g.narrow_batch(i, 1)?)?;
    }
    let fp = pooled_features(fx, &p)?;
    let fg = pooled_features(fx, &g)?;
    let (is_mean, is_std) = inception_score(&classifier.probabilities(&fp)?, DEFAULT_SPLITS)?;
    let fid = if n >= 2 { Some(fid(&fp, &fg)?) } else { None };
    let lp = lpips_distance(fx, &p, &g, None)?;
    Ok(MetricReport {
        n_samples: n,
        ssim: ssim_sum / n as f64,
        is_mean,
        is_std,
        fid,
        lpips: lp.iter().sum::<f64>() / n as f64,
        extractor_provenance: fx.provenance(),
        classifier: format!("fixed-seed-surrogate (seed {:#x}, {} classes)", classifier.seed, classifier.n_classes()),
    })
}

fn png_names(dir: &Path) -> Result<BTreeSet<String>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = BTreeSet::new();
    for entry in rd {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            if let Some(name) = path.file_name().and_then(|n| n.to_str()) {
                out.insert(name.to_string());
            }
        }
    }
    Ok(out)
}

/// Scores every PNG in `pred_dir` against the same-named PNG in `gt_dir`.
pub fn evaluate_directory(
    pred_dir: &Path,
    gt_dir: &Path,
    fx: &FeatureExtractor,
    classifier: &SurrogateClassifier,
) -> Result<MetricReport> {
    let pn = png_names(pred_dir)?;
    let gn = png_names(gt_dir)?;
    if pn != gn {
        let only_p: Vec<_> = pn.difference(&gn).take(5).cloned().collect();
        let only_g: Vec<_> = gn.difference(&pn).take(5).cloned().collect();
        return Err(Error::Dataset(format!(
            "prediction and ground-truth file sets differ (only predicted: {only_p:?}; only ground truth: {only_g:?})"
        )));
    }
    if pn.is_empty() {
        return Err(Error::Dataset(format!("no PNG images in {}", pred_dir.display())));
    }
    let load = |dir: &Path| -> Result<Vec<Tensor<f32>>> {
        pn.iter().map(|n| load_image(&PathBuf::from(dir).join(n))).collect()
    };
    evaluate_images(&load(pred_dir)?, &load(gt_dir)?, fx, classifier)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classifier_rows_are_distributions() {
        let clf = SurrogateClassifier::new(1, 4, 10);
        let f = DMatrix::from_fn(3, 4, |i, j| (i + j) as f64);
        let p = clf.probabilities(&f).unwrap();
        for row in p.row_iter() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        assert!(clf.probabilities(&DMatrix::zeros(1, 5)).is_err());
    }

    #[test]
    fn identical_images_score_perfectly() {
        let fx = FeatureExtractor::surrogate(3);
        let clf = SurrogateClassifier::for_extractor(&fx);
        let imgs: Vec<Tensor<f32>> =
            (0..3).map(|k| Tensor::from_fn(&[3, 16, 16], |i| ((i * (k + 3)) % 17) as f32 / 8.5 - 1.0)).collect();
        let r = evaluate_images(&imgs, &imgs, &fx, &clf).unwrap();
        assert!((r.ssim - 1.0).abs() < 1e-9);
        assert!(r.lpips.abs() < 1e-9);
        assert!(r.fid.unwrap() < 1e-6);
        assert!(r.table_row().contains("fixed-seed-surrogate"));
    }
}
